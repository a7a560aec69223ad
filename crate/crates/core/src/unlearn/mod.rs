//! Pretraining to memorization, attention-shifting unlearning over the
//! adapter bank, and the gradient-ascent baseline.

mod losses;
mod optim;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split, TokenSequence};
use crate::error::{Error, Result};
use crate::eval::{exact_match, exact_match_flags};
use crate::importance::{entropy_importance, lexical_importance, mask_by_percentile, Estimator, ImportanceMask};
use crate::model::{AdapterBank, ParamSet, Parameters, Trainable};
use crate::shift::ShiftSpec;

pub use losses::{
    akl_loss, as_loss, asp_loss, attention_kl_with_targets, attention_targets, cross_entropy, AttentionObjective,
};
pub use optim::{clip_grad_norm, AdamW};

/// Recall the pretraining loop must reach before it stops.
pub const MEMORIZATION_TARGET: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Recall is checked after every `eval_every` epochs and after the last.
    pub eval_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            max_epochs: 400,
            learning_rate: 3e-3,
            batch_size: 16,
            weight_decay: 0.0,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 5,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("pretraining learning_rate must be finite and >= 0"));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::invalid("batch_size and eval_every must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    /// `None` on epochs where recall was not measured.
    pub recall: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: Parameters,
    /// Epoch counter after training, including epochs of earlier sessions.
    pub epoch: usize,
    pub recall: f64,
    pub reached: bool,
    pub log: Vec<PretrainEpoch>,
    pub rng: ChaCha8Rng,
}

/// Exact-match recall of the weakest split; pretraining must lift every
/// split past [`MEMORIZATION_TARGET`], not just the pooled rate.
pub fn recall_all(params: &Parameters, corpus: &Corpus) -> Result<f64> {
    let none = AdapterBank::empty(&params.config);
    let mut worst = f64::INFINITY;
    for split in Split::ALL {
        worst = worst.min(exact_match(params, &none, &corpus.examples(split)?)?);
    }
    Ok(worst)
}

/// Train every base parameter on completion cross-entropy until every split's
/// recall reaches [`MEMORIZATION_TARGET`] or `max_epochs` more epochs
/// have run. Resumes from `start_epoch` with `rng` when given.
pub fn train_to_memorization(
    mut params: Parameters,
    corpus: &Corpus,
    cfg: &PretrainConfig,
    start_epoch: usize,
    rng: Option<ChaCha8Rng>,
    mut on_epoch: impl FnMut(&PretrainEpoch),
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let examples = corpus.all_examples()?;
    let seqs: Vec<&TokenSequence> = examples.iter().map(|e| &e.seq).collect();
    let none = AdapterBank::empty(&params.config);
    let mut rng = rng.unwrap_or_else(|| ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut opt = AdamW::new(&params, cfg.learning_rate, cfg.weight_decay);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut log = Vec::new();
    let mut recall = None;
    let mut epoch = start_epoch;
    for i in 0..cfg.max_epochs {
        epoch += 1;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TokenSequence> = chunk.iter().map(|&j| seqs[j]).collect();
            let (loss, g) = cross_entropy(&params, &none, &batch, Some(Trainable::Base), 1.0)?;
            let mut g = g.expect("gradient requested").into_base();
            clip_grad_norm(&mut g, cfg.grad_clip);
            opt.step(&mut params, &g);
            total += loss * chunk.len() as f64;
        }
        let measure = (i + 1) % cfg.eval_every == 0 || i + 1 == cfg.max_epochs;
        recall = if measure { Some(recall_all(&params, corpus)?) } else { None };
        let row = PretrainEpoch { epoch, loss: total / seqs.len() as f64, recall };
        on_epoch(&row);
        log.push(row);
        if recall.is_some_and(|r| r >= MEMORIZATION_TARGET) {
            break;
        }
    }
    let recall = match recall {
        Some(r) => r,
        None => recall_all(&params, corpus)?,
    };
    Ok(PretrainOutcome { params, epoch, recall, reached: recall >= MEMORIZATION_TARGET, log, rng })
}

/// Fresh pretraining run; an error if memorization is not reached.
pub fn pretrain(params: Parameters, corpus: &Corpus, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    let out = train_to_memorization(params, corpus, cfg, 0, None, |_| {})?;
    if !out.reached {
        return Err(Error::NotMemorized { recall: out.recall, epochs: out.epoch, target: MEMORIZATION_TARGET });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaMode {
    Fixed,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Attention shifting.
    As,
    /// Gradient ascent on forget cross-entropy.
    Ga,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::As => "as",
            Method::Ga => "ga",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnConfig {
    pub method: Method,
    pub alpha_mode: AlphaMode,
    pub alpha0: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub lambda: f64,
    pub beta: f64,
    pub threshold_pct: f64,
    pub estimator: Estimator,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Batches whose gradients are summed before one optimizer step.
    pub grad_accum: usize,
    pub max_epochs: usize,
    pub forget_stop: f64,
    /// Stop as soon as forget exact match is at or below `forget_stop`.
    pub early_stop: bool,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        UnlearnConfig {
            method: Method::As,
            alpha_mode: AlphaMode::Dynamic,
            alpha0: 0.5,
            alpha_min: 0.2,
            alpha_max: 0.8,
            lambda: 0.99,
            beta: 0.1,
            threshold_pct: crate::importance::DEFAULT_THRESHOLD_PCT,
            estimator: Estimator::Entropy,
            learning_rate: 5e-4,
            batch_size: 4,
            grad_accum: 1,
            max_epochs: 30,
            forget_stop: 0.10,
            early_stop: true,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl UnlearnConfig {
    pub fn shift_spec(&self) -> ShiftSpec {
        ShiftSpec { lambda: self.lambda, beta: self.beta }
    }

    pub fn validate(&self) -> Result<()> {
        self.shift_spec().validate()?;
        if !(0.0 <= self.alpha_min
            && self.alpha_min <= self.alpha0
            && self.alpha0 <= self.alpha_max
            && self.alpha_max <= 1.0)
        {
            return Err(Error::invalid(format!(
                "need 0 <= alpha_min <= alpha0 <= alpha_max <= 1, got {} / {} / {}",
                self.alpha_min, self.alpha0, self.alpha_max
            )));
        }
        if !(self.threshold_pct > 0.0 && self.threshold_pct < 100.0) {
            return Err(Error::invalid(format!("threshold_pct must lie in (0, 100), got {}", self.threshold_pct)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and >= 0"));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::invalid("batch_size and grad_accum must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.forget_stop) {
            return Err(Error::invalid("forget_stop must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `L_ASP` for attention shifting, forget cross-entropy for ascent.
    pub forget_loss: f64,
    /// `L_AKL`; zero for ascent.
    pub retain_loss: f64,
    /// α used during this epoch.
    pub alpha: f64,
    pub grad_cosine: f64,
    pub forget_em: f64,
    pub retain_em: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub method: Method,
    pub epoch: usize,
    pub alpha: f64,
    pub initial_forget_em: f64,
    pub initial_retain_em: f64,
    pub history: Vec<EpochRecord>,
    pub status: RunStatus,
}

impl Method {
    /// Header of the per-epoch CSV log.
    pub fn log_header(self) -> &'static str {
        match self {
            Method::As => "epoch,l_asp,l_akl,alpha,grad_cosine,forget_em,retain_em",
            Method::Ga => "epoch,forget_ce,forget_em,retain_em",
        }
    }
}

impl EpochRecord {
    /// One log line (no newline); floats use the shortest exact decimal form.
    pub fn csv_line(&self, method: Method) -> String {
        match method {
            Method::As => format!(
                "{},{},{},{},{},{},{}",
                self.epoch,
                self.forget_loss,
                self.retain_loss,
                self.alpha,
                self.grad_cosine,
                self.forget_em,
                self.retain_em
            ),
            Method::Ga => format!("{},{},{},{}", self.epoch, self.forget_loss, self.forget_em, self.retain_em),
        }
    }
}

impl TrainState {
    /// Per-epoch CSV log.
    pub fn log_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.method.log_header());
        for r in &self.history {
            let _ = writeln!(out, "{}", r.csv_line(self.method));
        }
        out
    }
}

/// Cosine between two flattened gradients; zero if either is (near) zero.
pub fn grad_cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("gradient lengths {} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-15 || nb < 1e-15 {
        return Ok(0.0);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Next α from one epoch's mean losses and mean gradient cosine: the ASP
/// share of the total loss, clipped to the bounds, then moved halfway toward
/// 0.5 when the objectives conflicted.
pub fn dynamic_alpha_update(l_asp: f64, l_akl: f64, mean_cosine: f64, alpha_min: f64, alpha_max: f64) -> f64 {
    let raw = (l_asp / (l_asp + l_akl + 1e-12)).clamp(alpha_min, alpha_max);
    let damped = if mean_cosine < 0.0 { raw + 0.5 * (0.5 - raw) } else { raw };
    damped.clamp(alpha_min, alpha_max)
}

/// Per-sequence importance masks from the frozen base model.
pub fn importance_masks(
    params: &Parameters,
    adapters: &AdapterBank,
    corpus: &Corpus,
    seqs: &[&TokenSequence],
    estimator: Estimator,
    threshold_pct: f64,
) -> Result<Vec<ImportanceMask>> {
    seqs.iter()
        .map(|s| {
            let scores = match estimator {
                Estimator::Entropy => entropy_importance(params, adapters, s)?,
                Estimator::Lexical => lexical_importance(s, &corpus.vocab),
            };
            mask_by_percentile(&scores, threshold_pct)
        })
        .collect()
}

struct SplitData {
    forget: Vec<TokenSequence>,
    neighbour: Vec<TokenSequence>,
    retain: Vec<TokenSequence>,
}

impl SplitData {
    fn new(corpus: &Corpus) -> Result<Self> {
        let seqs =
            |s: Split| -> Result<Vec<TokenSequence>> { Ok(corpus.examples(s)?.into_iter().map(|e| e.seq).collect()) };
        let forget = seqs(Split::Forget)?;
        let neighbour = seqs(Split::Neighbour)?;
        let mut retain = neighbour.clone();
        retain.extend(seqs(Split::General)?);
        if forget.is_empty() || neighbour.is_empty() {
            return Err(Error::invalid("unlearning needs nonempty forget and neighbour splits"));
        }
        Ok(SplitData { forget, neighbour, retain })
    }

    fn em(&self, params: &Parameters, adapters: &AdapterBank) -> Result<(f64, f64)> {
        let rate = |v: &[TokenSequence]| -> Result<f64> {
            let refs: Vec<&TokenSequence> = v.iter().collect();
            let f = exact_match_flags(params, adapters, &refs)?;
            Ok(f.iter().filter(|&&x| x).count() as f64 / f.len() as f64)
        };
        Ok((rate(&self.forget)?, rate(&self.retain)?))
    }
}

/// Endless shuffled stream of neighbour indices, reshuffled at each wrap.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Cycler { order, pos: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Result of an unlearning run.
#[derive(Debug, Clone)]
pub struct UnlearnOutcome {
    pub adapters: AdapterBank,
    pub state: TrainState,
    pub rng: ChaCha8Rng,
}

/// Sum `src` into `acc`, allocating on first use.
fn accumulate(acc: &mut Option<AdapterBank>, src: &AdapterBank, factor: f64) {
    match acc {
        Some(a) => a.add_scaled(src, factor),
        None => {
            let mut a = src.clone();
            a.scale(factor);
            *acc = Some(a);
        }
    }
}

struct Stepper {
    opt: AdamW<AdapterBank>,
    pending: Option<AdapterBank>,
    count: usize,
    accum: usize,
    clip: f64,
}

impl Stepper {
    fn push(&mut self, adapters: &mut AdapterBank, g: &AdapterBank) {
        accumulate(&mut self.pending, g, 1.0);
        self.count += 1;
        if self.count == self.accum {
            self.flush(adapters);
        }
    }

    /// A step with an all-zero gradient is skipped, weight decay included,
    /// so an objective that is already at its optimum moves nothing.
    fn flush(&mut self, adapters: &mut AdapterBank) {
        if let Some(mut g) = self.pending.take() {
            if g.sq_norm() > 0.0 {
                clip_grad_norm(&mut g, self.clip);
                self.opt.step(adapters, &g);
            }
        }
        self.count = 0;
    }
}

fn prepare(params: &Parameters, adapters: &AdapterBank, cfg: &UnlearnConfig) -> Result<AdapterBank> {
    cfg.validate()?;
    if adapters.is_empty() {
        return Err(Error::invalid("unlearning needs at least one adapter site"));
    }
    if adapters.sites.len() != params.config.n_layers {
        return Err(Error::ShapeMismatch("adapter bank does not match the model depth".into()));
    }
    let mut a = adapters.clone();
    a.enabled = true;
    Ok(a)
}

/// Attention-shifting unlearning. Only `adapters` change; `params` is only
/// read. `on_epoch` sees each record as soon as it is final.
pub fn run_unlearning(
    params: &Parameters,
    adapters: &AdapterBank,
    corpus: &Corpus,
    cfg: &UnlearnConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<UnlearnOutcome> {
    let mut adapters = prepare(params, adapters, cfg)?;
    let data = SplitData::new(corpus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let frefs: Vec<&TokenSequence> = data.forget.iter().collect();
    let nrefs: Vec<&TokenSequence> = data.neighbour.iter().collect();
    let fmasks = importance_masks(params, &adapters, corpus, &frefs, cfg.estimator, cfg.threshold_pct)?;
    let nmasks = importance_masks(params, &adapters, corpus, &nrefs, cfg.estimator, cfg.threshold_pct)?;

    let (f0, r0) = data.em(params, &adapters)?;
    let mut state = TrainState {
        method: Method::As,
        epoch: 0,
        alpha: cfg.alpha0,
        initial_forget_em: f0,
        initial_retain_em: r0,
        history: Vec::new(),
        status: RunStatus::MaxEpochs,
    };
    let mut step = Stepper {
        opt: AdamW::new(&adapters, cfg.learning_rate, cfg.weight_decay),
        pending: None,
        count: 0,
        accum: cfg.grad_accum,
        clip: cfg.grad_clip,
    };
    let mut order: Vec<usize> = (0..data.forget.len()).collect();
    let mut neighbours = Cycler::new(data.neighbour.len(), &mut rng);

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let alpha = state.alpha;
        let (mut sum_asp, mut sum_akl, mut sum_cos, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let fb: Vec<&TokenSequence> = chunk.iter().map(|&i| &data.forget[i]).collect();
            let fm: Vec<&ImportanceMask> = chunk.iter().map(|&i| &fmasks[i]).collect();
            let picks = neighbours.take(chunk.len(), &mut rng);
            let nb: Vec<&TokenSequence> = picks.iter().map(|&i| &data.neighbour[i]).collect();
            let nm: Vec<&ImportanceMask> = picks.iter().map(|&i| &nmasks[i]).collect();

            let (asp, g_asp) = asp_loss(params, &adapters, &fb, &fm, cfg.lambda, true)?;
            let (akl, g_akl) = akl_loss(params, &adapters, &nb, &nm, cfg.beta, true)?;
            let (g_asp, g_akl) = (g_asp.expect("gradient requested"), g_akl.expect("gradient requested"));
            sum_cos += grad_cosine(&g_asp.flatten(), &g_akl.flatten())?;
            sum_asp += asp;
            sum_akl += akl;
            batches += 1;

            let mut g = g_asp;
            g.scale(alpha);
            g.add_scaled(&g_akl, 1.0 - alpha);
            step.push(&mut adapters, &g);
        }
        step.flush(&mut adapters);

        let (forget_em, retain_em) = data.em(params, &adapters)?;
        let n = batches as f64;
        let record = EpochRecord {
            epoch,
            forget_loss: sum_asp / n,
            retain_loss: sum_akl / n,
            alpha,
            grad_cosine: sum_cos / n,
            forget_em,
            retain_em,
        };
        on_epoch(&record)?;
        state.epoch = epoch;
        if cfg.alpha_mode == AlphaMode::Dynamic {
            state.alpha = dynamic_alpha_update(
                record.forget_loss,
                record.retain_loss,
                record.grad_cosine,
                cfg.alpha_min,
                cfg.alpha_max,
            );
        }
        state.history.push(record);
        if cfg.early_stop && forget_em <= cfg.forget_stop {
            state.status = RunStatus::Converged;
            break;
        }
    }
    Ok(UnlearnOutcome { adapters, state, rng })
}

/// Gradient ascent on forget cross-entropy over the adapters, with the same
/// batching, optimizer and stopping rule as [`run_unlearning`].
pub fn ga_baseline(
    params: &Parameters,
    adapters: &AdapterBank,
    corpus: &Corpus,
    cfg: &UnlearnConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<UnlearnOutcome> {
    let mut adapters = prepare(params, adapters, cfg)?;
    let data = SplitData::new(corpus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (f0, r0) = data.em(params, &adapters)?;
    let mut state = TrainState {
        method: Method::Ga,
        epoch: 0,
        alpha: 1.0,
        initial_forget_em: f0,
        initial_retain_em: r0,
        history: Vec::new(),
        status: RunStatus::MaxEpochs,
    };
    let mut step = Stepper {
        opt: AdamW::new(&adapters, cfg.learning_rate, cfg.weight_decay),
        pending: None,
        count: 0,
        accum: cfg.grad_accum,
        clip: cfg.grad_clip,
    };
    let mut order: Vec<usize> = (0..data.forget.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let fb: Vec<&TokenSequence> = chunk.iter().map(|&i| &data.forget[i]).collect();
            let (ce, g) = cross_entropy(params, &adapters, &fb, Some(Trainable::Adapters), -1.0)?;
            sum += ce;
            batches += 1;
            step.push(&mut adapters, &g.expect("gradient requested").into_adapters());
        }
        step.flush(&mut adapters);
        let (forget_em, retain_em) = data.em(params, &adapters)?;
        let record = EpochRecord {
            epoch,
            forget_loss: sum / batches as f64,
            retain_loss: 0.0,
            alpha: 1.0,
            grad_cosine: 0.0,
            forget_em,
            retain_em,
        };
        on_epoch(&record)?;
        state.epoch = epoch;
        state.history.push(record);
        if cfg.early_stop && forget_em <= cfg.forget_stop {
            state.status = RunStatus::Converged;
            break;
        }
    }
    Ok(UnlearnOutcome { adapters, state, rng })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_cases() {
        let g = [1.0, -2.0, 0.5];
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        assert!((grad_cosine(&g, &g).unwrap() - 1.0).abs() < 1e-12);
        assert!((grad_cosine(&g, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(grad_cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert_eq!(grad_cosine(&[0.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!(grad_cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn alpha_rule_cases() {
        assert!((dynamic_alpha_update(1.3, 1.3, -0.4, 0.2, 0.8) - 0.5).abs() < 1e-12);
        assert!((dynamic_alpha_update(3.0, 1.0, 0.1, 0.2, 0.8) - 0.75).abs() < 1e-12);
        assert!((dynamic_alpha_update(3.0, 1.0, -0.1, 0.2, 0.8) - 0.625).abs() < 1e-12);
        assert_eq!(dynamic_alpha_update(5.0, 0.0, 0.0, 0.2, 0.8), 0.8);
        assert_eq!(dynamic_alpha_update(0.0, 5.0, 0.0, 0.2, 0.8), 0.2);
    }

    #[test]
    fn config_validation() {
        assert!(UnlearnConfig::default().validate().is_ok());
        let bad = |f: fn(&mut UnlearnConfig)| {
            let mut c = UnlearnConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.lambda = 1.5));
        assert!(bad(|c| c.beta = -0.1));
        assert!(bad(|c| c.alpha0 = 0.9));
        assert!(bad(|c| c.alpha_min = 0.6));
        assert!(bad(|c| c.threshold_pct = 100.0));
        assert!(bad(|c| c.learning_rate = -1.0));
        assert!(bad(|c| c.batch_size = 0));
    }

    #[test]
    fn ga_log_header() {
        let s = TrainState {
            method: Method::Ga,
            epoch: 0,
            alpha: 1.0,
            initial_forget_em: 1.0,
            initial_retain_em: 1.0,
            history: vec![],
            status: RunStatus::MaxEpochs,
        };
        assert_eq!(s.log_csv(), "epoch,forget_ce,forget_em,retain_em\n");
    }
}
