use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Projection inside the attention block that may carry a low-rank delta.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdapterSite {
    #[serde(rename = "q")]
    Query,
    #[serde(rename = "k")]
    Key,
    #[serde(rename = "v")]
    Value,
    #[serde(rename = "o")]
    Output,
}

impl AdapterSite {
    pub const ALL: [AdapterSite; 4] = [AdapterSite::Query, AdapterSite::Key, AdapterSite::Value, AdapterSite::Output];

    pub fn index(self) -> usize {
        match self {
            AdapterSite::Query => 0,
            AdapterSite::Key => 1,
            AdapterSite::Value => 2,
            AdapterSite::Output => 3,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            AdapterSite::Query => "q",
            AdapterSite::Key => "k",
            AdapterSite::Value => "v",
            AdapterSite::Output => "o",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "q" | "query" => Ok(AdapterSite::Query),
            "k" | "key" => Ok(AdapterSite::Key),
            "v" | "value" => Ok(AdapterSite::Value),
            "o" | "output" => Ok(AdapterSite::Output),
            other => Err(Error::invalid(format!("unknown adapter site `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub mlp_ratio: usize,
    pub adapter_rank: usize,
    pub adapter_sites: Vec<AdapterSite>,
}

impl ModelConfig {
    /// Desk-scale defaults: 4 layers, 4 heads, width 64, context 64, rank-8
    /// adapters on the query and key projections.
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            vocab_size,
            max_seq: 64,
            mlp_ratio: 4,
            adapter_rank: 8,
            adapter_sites: vec![AdapterSite::Query, AdapterSite::Key],
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_mlp(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
            ("mlp_ratio", self.mlp_ratio),
            ("adapter_rank", self.adapter_rank),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        let mut seen = [false; 4];
        for site in &self.adapter_sites {
            if std::mem::replace(&mut seen[site.index()], true) {
                return Err(Error::invalid(format!("adapter site `{}` listed twice", site.tag())));
            }
        }
        Ok(())
    }

    pub fn has_site(&self, site: AdapterSite) -> bool {
        self.adapter_sites.contains(&site)
    }
}

/// Named view over every array of a parameter container. Optimizers,
/// checkpoints and gradient checks walk containers through this trait; the
/// order of [`ParamSet::arrays`] is stable and matches [`ParamSet::arrays_mut`].
pub trait ParamSet {
    fn arrays(&self) -> Vec<(String, ArrayViewD<'_, f64>)>;
    fn arrays_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)>;

    fn num_values(&self) -> usize {
        self.arrays().iter().map(|(_, a)| a.len()).sum()
    }

    /// Concatenation of every value in canonical order.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for (_, a) in self.arrays() {
            out.extend(a.iter().copied());
        }
        out
    }

    fn fill(&mut self, value: f64) {
        for (_, mut a) in self.arrays_mut() {
            a.fill(value);
        }
    }

    fn scale(&mut self, factor: f64) {
        for (_, mut a) in self.arrays_mut() {
            a.mapv_inplace(|x| x * factor);
        }
    }

    /// `self += factor * other`; both containers must share a layout.
    fn add_scaled(&mut self, other: &Self, factor: f64)
    where
        Self: Sized,
    {
        let theirs = other.arrays();
        for ((_, mut mine), (_, src)) in self.arrays_mut().into_iter().zip(theirs) {
            mine.zip_mut_with(&src, |a, &b| *a += factor * b);
        }
    }

    fn sq_norm(&self) -> f64 {
        self.arrays().iter().map(|(_, a)| a.iter().map(|x| x * x).sum::<f64>()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub mlp_norm: Array1<f64>,
    pub w_up: Array2<f64>,
    pub b_up: Array1<f64>,
    pub w_down: Array2<f64>,
    pub b_down: Array1<f64>,
}

impl LayerParams {
    pub fn projection(&self, site: AdapterSite) -> &Array2<f64> {
        match site {
            AdapterSite::Query => &self.wq,
            AdapterSite::Key => &self.wk,
            AdapterSite::Value => &self.wv,
            AdapterSite::Output => &self.wo,
        }
    }
}

/// Base model weights. Matrices are stored `out x in`, so a projection of
/// row-major activations `x` is `x · Wᵀ`. Embedding and output head are not tied.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub final_norm: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

const INIT_STD: f64 = 0.02;

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

impl Parameters {
    /// Deterministic initialization: normal(0, 0.02) matrices, unit norm
    /// gains, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let f = config.d_mlp();
        let tok_emb = normal_matrix(&mut rng, config.vocab_size, d, INIT_STD);
        let pos_emb = normal_matrix(&mut rng, config.max_seq, d, INIT_STD);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: Array1::ones(d),
                wq: normal_matrix(&mut rng, d, d, INIT_STD),
                wk: normal_matrix(&mut rng, d, d, INIT_STD),
                wv: normal_matrix(&mut rng, d, d, INIT_STD),
                wo: normal_matrix(&mut rng, d, d, INIT_STD),
                mlp_norm: Array1::ones(d),
                w_up: normal_matrix(&mut rng, f, d, INIT_STD),
                b_up: Array1::zeros(f),
                w_down: normal_matrix(&mut rng, d, f, INIT_STD),
                b_down: Array1::zeros(d),
            })
            .collect();
        let w_out = normal_matrix(&mut rng, config.vocab_size, d, INIT_STD);
        Ok(Parameters {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_norm: Array1::ones(d),
            w_out,
            b_out: Array1::zeros(config.vocab_size),
        })
    }

    /// Same layout, every value zero. Used for gradient and moment buffers.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn all_finite(&self) -> bool {
        self.arrays().iter().all(|(_, a)| a.iter().all(|x| x.is_finite()))
    }
}

impl ParamSet for Parameters {
    fn arrays(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.view().into_dyn()),
            ("pos_emb".to_string(), self.pos_emb.view().into_dyn()),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{l}.{n}");
            out.push((p("attn_norm"), layer.attn_norm.view().into_dyn()));
            out.push((p("wq"), layer.wq.view().into_dyn()));
            out.push((p("wk"), layer.wk.view().into_dyn()));
            out.push((p("wv"), layer.wv.view().into_dyn()));
            out.push((p("wo"), layer.wo.view().into_dyn()));
            out.push((p("mlp_norm"), layer.mlp_norm.view().into_dyn()));
            out.push((p("w_up"), layer.w_up.view().into_dyn()));
            out.push((p("b_up"), layer.b_up.view().into_dyn()));
            out.push((p("w_down"), layer.w_down.view().into_dyn()));
            out.push((p("b_down"), layer.b_down.view().into_dyn()));
        }
        out.push(("final_norm".to_string(), self.final_norm.view().into_dyn()));
        out.push(("w_out".to_string(), self.w_out.view().into_dyn()));
        out.push(("b_out".to_string(), self.b_out.view().into_dyn()));
        out
    }

    fn arrays_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.view_mut().into_dyn()),
            ("pos_emb".to_string(), self.pos_emb.view_mut().into_dyn()),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let p = |n: &str| format!("layers.{l}.{n}");
            out.push((p("attn_norm"), layer.attn_norm.view_mut().into_dyn()));
            out.push((p("wq"), layer.wq.view_mut().into_dyn()));
            out.push((p("wk"), layer.wk.view_mut().into_dyn()));
            out.push((p("wv"), layer.wv.view_mut().into_dyn()));
            out.push((p("wo"), layer.wo.view_mut().into_dyn()));
            out.push((p("mlp_norm"), layer.mlp_norm.view_mut().into_dyn()));
            out.push((p("w_up"), layer.w_up.view_mut().into_dyn()));
            out.push((p("b_up"), layer.b_up.view_mut().into_dyn()));
            out.push((p("w_down"), layer.w_down.view_mut().into_dyn()));
            out.push((p("b_down"), layer.b_down.view_mut().into_dyn()));
        }
        out.push(("final_norm".to_string(), self.final_norm.view_mut().into_dyn()));
        out.push(("w_out".to_string(), self.w_out.view_mut().into_dyn()));
        out.push(("b_out".to_string(), self.b_out.view_mut().into_dyn()));
        out
    }
}

/// One low-rank delta `ΔW = up · down` added to a frozen projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRank {
    /// `r x d_in`
    pub down: Array2<f64>,
    /// `d_out x r`, zero at initialization
    pub up: Array2<f64>,
}

/// The trainable set during unlearning. `sites[l][site.index()]` is present
/// exactly for the sites listed in the model configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBank {
    pub enabled: bool,
    pub rank: usize,
    pub sites: Vec<[Option<LowRank>; 4]>,
}

impl AdapterBank {
    /// Down matrices ~ normal(0, 1/sqrt(d_model)), up matrices zero, so the
    /// adapted model starts out equal to the base model.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let r = config.adapter_rank;
        let std = 1.0 / (d as f64).sqrt();
        let sites = (0..config.n_layers)
            .map(|_| {
                let mut slots: [Option<LowRank>; 4] = Default::default();
                for site in AdapterSite::ALL {
                    if config.has_site(site) {
                        slots[site.index()] =
                            Some(LowRank { down: normal_matrix(&mut rng, r, d, std), up: Array2::zeros((d, r)) });
                    }
                }
                slots
            })
            .collect();
        Ok(AdapterBank { enabled: true, rank: r, sites })
    }

    /// Bank with no sites at all; behaves exactly like disabled adapters.
    pub fn empty(config: &ModelConfig) -> Self {
        AdapterBank {
            enabled: false,
            rank: config.adapter_rank,
            sites: (0..config.n_layers).map(|_| Default::default()).collect(),
        }
    }

    pub fn disabled(&self) -> Self {
        let mut b = self.clone();
        b.enabled = false;
        b
    }

    pub fn site(&self, layer: usize, site: AdapterSite) -> Option<&LowRank> {
        if !self.enabled {
            return None;
        }
        self.sites.get(layer).and_then(|s| s[site.index()].as_ref())
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn is_empty(&self) -> bool {
        self.sites.iter().all(|s| s.iter().all(Option::is_none))
    }
}

impl ParamSet for AdapterBank {
    fn arrays(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        for (l, slots) in self.sites.iter().enumerate() {
            for site in AdapterSite::ALL {
                if let Some(lr) = &slots[site.index()] {
                    out.push((format!("adapters.{l}.{}.down", site.tag()), lr.down.view().into_dyn()));
                    out.push((format!("adapters.{l}.{}.up", site.tag()), lr.up.view().into_dyn()));
                }
            }
        }
        out
    }

    fn arrays_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        for (l, slots) in self.sites.iter_mut().enumerate() {
            for (site, slot) in AdapterSite::ALL.into_iter().zip(slots.iter_mut()) {
                if let Some(lr) = slot {
                    out.push((format!("adapters.{l}.{}.down", site.tag()), lr.down.view_mut().into_dyn()));
                    out.push((format!("adapters.{l}.{}.up", site.tag()), lr.up.view_mut().into_dyn()));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::new(20);
        let a = Parameters::init(&cfg, 3).unwrap();
        let b = Parameters::init(&cfg, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = ModelConfig::new(20);
        let a = Parameters::init(&cfg, 3).unwrap();
        let b = Parameters::init(&cfg, 4).unwrap();
        let diff = a.flatten().iter().zip(b.flatten()).filter(|(x, y)| **x != *y).count();
        assert!(diff > a.num_values() / 2);
    }

    #[test]
    fn rejects_indivisible_width() {
        let mut cfg = ModelConfig::new(20);
        cfg.d_model = 65;
        assert!(matches!(Parameters::init(&cfg, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn rejects_zero_rank() {
        let mut cfg = ModelConfig::new(20);
        cfg.adapter_rank = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_scale_is_small() {
        let cfg = ModelConfig::new(50);
        let p = Parameters::init(&cfg, 9).unwrap();
        let w = &p.layers[0].wq;
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.02).abs() < 0.002, "std {std}");
    }

    #[test]
    fn adapter_up_starts_at_zero() {
        let cfg = ModelConfig::new(20);
        let bank = AdapterBank::init(&cfg, 1).unwrap();
        for l in 0..cfg.n_layers {
            assert!(bank.site(l, AdapterSite::Query).unwrap().up.iter().all(|&x| x == 0.0));
            assert!(bank.site(l, AdapterSite::Value).is_none());
        }
        assert_eq!(bank.arrays().len(), cfg.n_layers * 2 * 2);
    }
}
