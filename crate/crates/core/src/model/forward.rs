use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, Axis, Zip};

use super::params::{AdapterBank, AdapterSite, LowRank, Parameters};
use super::TokenId;
use crate::corpus::{TokenSequence, EOS};
use crate::error::{Error, Result};

pub(super) const NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Per-layer, per-head attention of one sequence, shape `(L, H, n, n)`.
/// Row `i` of head `(l, h)` is the distribution of query `i` over keys `0..=i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    pub values: Array4<f64>,
}

impl AttentionTensor {
    pub fn new(values: Array4<f64>) -> Result<Self> {
        let sh = values.shape();
        if sh[2] != sh[3] {
            return Err(Error::ShapeMismatch(format!("attention maps must be square, got {}x{}", sh[2], sh[3])));
        }
        Ok(AttentionTensor { values })
    }

    pub fn n_layers(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_heads(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn head(&self, layer: usize, head: usize) -> ArrayView2<'_, f64> {
        self.values.slice(s![layer, head, .., ..])
    }

    /// Largest deviation of any row sum from 1 and largest entry above the
    /// causal diagonal.
    pub fn stochasticity_error(&self) -> (f64, f64) {
        let mut row_err = 0.0f64;
        let mut upper = 0.0f64;
        for (l, h) in (0..self.n_layers()).flat_map(|l| (0..self.n_heads()).map(move |h| (l, h))) {
            for (i, row) in self.head(l, h).outer_iter().enumerate() {
                row_err = row_err.max((row.sum() - 1.0).abs());
                for &v in row.iter().skip(i + 1) {
                    upper = upper.max(v.abs());
                }
            }
        }
        (row_err, upper)
    }

    /// Mean attention mass a query row places on the flagged key columns,
    /// averaged over every layer, head and row that has at least one
    /// flagged key in its causal window.
    pub fn mean_mass_on(&self, flagged: &[bool]) -> f64 {
        let n = self.len();
        let mut total = 0.0;
        let mut count = 0usize;
        for l in 0..self.n_layers() {
            for h in 0..self.n_heads() {
                let head = self.head(l, h);
                for i in 0..n {
                    if !flagged[..=i].iter().any(|&f| f) {
                        continue;
                    }
                    total += (0..=i).filter(|&j| flagged[j]).map(|j| head[[i, j]]).sum::<f64>();
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }
}

/// Output of a single-sequence forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `n x V`
    pub logits: Array2<f64>,
    pub attention: AttentionTensor,
    pub adapters_enabled: bool,
}

pub(super) struct LayerCache {
    pub x: Array2<f64>,
    pub inv_rms1: Array1<f64>,
    pub u1: Array2<f64>,
    /// `input · downᵀ` for every active adapter site
    pub lowrank_in: [Option<Array2<f64>>; 4],
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub ctx: Array2<f64>,
    pub h_mid: Array2<f64>,
    pub inv_rms2: Array1<f64>,
    pub u2: Array2<f64>,
    pub z: Array2<f64>,
    pub act: Array2<f64>,
}

/// Everything a packed forward pass records; consumed by `backward`.
pub struct BatchTrace {
    /// Row offset of each sequence inside the packed matrices.
    pub offsets: Vec<usize>,
    pub lens: Vec<usize>,
    /// `N x V` over all packed rows.
    pub logits: Array2<f64>,
    /// One tensor per sequence.
    pub attention: Vec<AttentionTensor>,
    pub adapters_enabled: bool,
    pub(super) ids: Vec<TokenId>,
    pub(super) layers: Vec<LayerCache>,
    pub(super) final_in: Array2<f64>,
    pub(super) inv_rms_f: Array1<f64>,
    pub(super) uf: Array2<f64>,
}

impl BatchTrace {
    pub fn num_sequences(&self) -> usize {
        self.lens.len()
    }

    pub fn logits_of(&self, seq: usize) -> ArrayView2<'_, f64> {
        let off = self.offsets[seq];
        self.logits.slice(s![off..off + self.lens[seq], ..])
    }
}

pub(super) fn rmsnorm(x: &Array2<f64>, gain: &Array1<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let inv: Array1<f64> = x.axis_iter(Axis(0)).map(|row| 1.0 / (row.dot(&row) / d + NORM_EPS).sqrt()).collect();
    let mut out = x.clone();
    for (mut row, &r) in out.axis_iter_mut(Axis(0)).zip(inv.iter()) {
        Zip::from(&mut row).and(gain).for_each(|v, &g| *v *= r * g);
    }
    (out, inv)
}

pub(super) fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + GELU_K * z * z * z)).tanh())
}

pub(super) fn gelu_grad(z: f64) -> f64 {
    let t = (GELU_C * (z + GELU_K * z * z * z)).tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * z * z)
}

/// `x · Wᵀ (+ (x · downᵀ) · upᵀ)`; returns the low-rank intermediate too.
fn project(x: &Array2<f64>, w: &Array2<f64>, lr: Option<&LowRank>) -> (Array2<f64>, Option<Array2<f64>>) {
    let mut out = x.dot(&w.t());
    let t = lr.map(|lr| {
        let t = x.dot(&lr.down.t());
        out += &t.dot(&lr.up.t());
        t
    });
    (out, t)
}

/// Softmax over the causal window of each row, with max subtraction.
/// Entries above the diagonal are set to exactly zero.
pub(super) fn causal_softmax(scores: &mut Array2<f64>) {
    for (i, mut row) in scores.axis_iter_mut(Axis(0)).enumerate() {
        let max = row.iter().take(i + 1).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j <= i {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        for v in row.iter_mut().take(i + 1) {
            *v /= sum;
        }
    }
}

/// Forward pass over a packed batch of sequences.
pub fn forward_batch(params: &Parameters, adapters: &AdapterBank, seqs: &[&[TokenId]]) -> Result<BatchTrace> {
    let cfg = &params.config;
    if seqs.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut offsets = Vec::with_capacity(seqs.len());
    let mut lens = Vec::with_capacity(seqs.len());
    let mut ids = Vec::new();
    for seq in seqs {
        if seq.is_empty() {
            return Err(Error::invalid("empty sequence"));
        }
        if seq.len() > cfg.max_seq {
            return Err(Error::SequenceTooLong { len: seq.len(), max: cfg.max_seq });
        }
        if let Some(&bad) = seq.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        offsets.push(ids.len());
        lens.push(seq.len());
        ids.extend_from_slice(seq);
    }
    let total = ids.len();
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut h = Array2::<f64>::zeros((total, d));
    for (s, seq) in seqs.iter().enumerate() {
        for (p, &t) in seq.iter().enumerate() {
            let mut row = h.row_mut(offsets[s] + p);
            row.assign(&params.tok_emb.row(t as usize));
            row += &params.pos_emb.row(p);
        }
    }

    let mut attention: Vec<Array4<f64>> =
        lens.iter().map(|&n| Array4::zeros((cfg.n_layers, cfg.n_heads, n, n))).collect();
    let mut layers = Vec::with_capacity(cfg.n_layers);

    for (l, layer) in params.layers.iter().enumerate() {
        let (u1, inv_rms1) = rmsnorm(&h, &layer.attn_norm);
        let (q, tq) = project(&u1, &layer.wq, adapters.site(l, AdapterSite::Query));
        let (k, tk) = project(&u1, &layer.wk, adapters.site(l, AdapterSite::Key));
        let (v, tv) = project(&u1, &layer.wv, adapters.site(l, AdapterSite::Value));

        let mut ctx = Array2::<f64>::zeros((total, d));
        for (s, att) in attention.iter_mut().enumerate() {
            let (off, n) = (offsets[s], lens[s]);
            for hd in 0..cfg.n_heads {
                let cols = hd * dh..(hd + 1) * dh;
                let qh = q.slice(s![off..off + n, cols.clone()]);
                let kh = k.slice(s![off..off + n, cols.clone()]);
                let vh = v.slice(s![off..off + n, cols.clone()]);
                let mut probs = qh.dot(&kh.t());
                probs.mapv_inplace(|x| x * scale);
                causal_softmax(&mut probs);
                ctx.slice_mut(s![off..off + n, cols]).assign(&probs.dot(&vh));
                att.slice_mut(s![l, hd, .., ..]).assign(&probs);
            }
        }

        let (o, to) = project(&ctx, &layer.wo, adapters.site(l, AdapterSite::Output));
        let h_mid = &h + &o;
        let (u2, inv_rms2) = rmsnorm(&h_mid, &layer.mlp_norm);
        let mut z = u2.dot(&layer.w_up.t());
        z += &layer.b_up;
        let act = z.mapv(gelu);
        let mut m = act.dot(&layer.w_down.t());
        m += &layer.b_down;
        let h_out = &h_mid + &m;

        layers.push(LayerCache {
            x: std::mem::replace(&mut h, h_out),
            inv_rms1,
            u1,
            lowrank_in: [tq, tk, tv, to],
            q,
            k,
            v,
            ctx,
            h_mid,
            inv_rms2,
            u2,
            z,
            act,
        });
    }

    let (uf, inv_rms_f) = rmsnorm(&h, &params.final_norm);
    let mut logits = uf.dot(&params.w_out.t());
    logits += &params.b_out;

    Ok(BatchTrace {
        offsets,
        lens,
        logits,
        attention: attention.into_iter().map(|values| AttentionTensor { values }).collect(),
        adapters_enabled: adapters.enabled,
        ids,
        layers,
        final_in: h,
        inv_rms_f,
        uf,
    })
}

/// Forward pass over one sequence.
pub fn forward(params: &Parameters, adapters: &AdapterBank, x: &TokenSequence) -> Result<ForwardTrace> {
    let mut trace = forward_batch(params, adapters, &[x.ids.as_slice()])?;
    Ok(ForwardTrace {
        logits: std::mem::take(&mut trace.logits),
        attention: trace.attention.pop().expect("one sequence"),
        adapters_enabled: trace.adapters_enabled,
    })
}

/// Index of the largest logit; ties go to the lowest token id.
pub fn greedy_argmax(row: ArrayView1<'_, f64>) -> TokenId {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Shannon entropy (nats) of `softmax(logits)`.
pub fn logits_entropy(row: ArrayView1<'_, f64>) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let log_sum = sum.ln();
    exps.iter().zip(row.iter()).filter(|(e, _)| **e > 0.0).map(|(e, &v)| -(e / sum) * ((v - max) - log_sum)).sum()
}

/// Mean entropy over the rows that predict completion tokens
/// (`boundary..len-1`). Zero when the completion is empty.
pub(crate) fn completion_entropy(logits: ArrayView2<'_, f64>, boundary: usize) -> f64 {
    let end = logits.nrows().saturating_sub(1);
    if end <= boundary {
        return 0.0;
    }
    let total: f64 = (boundary..end).map(|p| logits_entropy(logits.row(p))).sum();
    total / (end - boundary) as f64
}

/// Mean predictive entropy (nats) over the completion positions of `x`.
pub fn predictive_entropy(params: &Parameters, adapters: &AdapterBank, x: &TokenSequence) -> Result<f64> {
    let trace = forward(params, adapters, x)?;
    Ok(completion_entropy(trace.logits.view(), x.boundary))
}

/// Greedy decoding until EOS, `max_new` tokens, or a full context window.
pub fn generate(
    params: &Parameters,
    adapters: &AdapterBank,
    prompt: &TokenSequence,
    max_new: usize,
) -> Result<TokenSequence> {
    let mut ids = prompt.ids.clone();
    for _ in 0..max_new {
        if ids.len() >= params.config.max_seq {
            break;
        }
        let trace = forward_batch(params, adapters, &[ids.as_slice()])?;
        let next = greedy_argmax(trace.logits.row(ids.len() - 1));
        ids.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(TokenSequence { ids, boundary: prompt.boundary })
}

/// Greedy decoding of several prompts at once. Every step packs the
/// still-active sequences into one forward pass; results equal running
/// [`generate`] on each prompt separately.
pub fn generate_many(
    params: &Parameters,
    adapters: &AdapterBank,
    prompts: &[TokenSequence],
    max_new: &[usize],
) -> Result<Vec<TokenSequence>> {
    if prompts.len() != max_new.len() {
        return Err(Error::invalid("one max_new per prompt"));
    }
    let mut out: Vec<Vec<TokenId>> = prompts.iter().map(|p| p.ids.clone()).collect();
    let mut budget = max_new.to_vec();
    loop {
        let active: Vec<usize> = (0..out.len())
            .filter(|&i| {
                budget[i] > 0
                    && out[i].len() < params.config.max_seq
                    && !(out[i].len() > prompts[i].ids.len() && out[i].last() == Some(&EOS))
            })
            .collect();
        if active.is_empty() {
            break;
        }
        let seqs: Vec<&[TokenId]> = active.iter().map(|&i| out[i].as_slice()).collect();
        let trace = forward_batch(params, adapters, &seqs)?;
        let next: Vec<TokenId> = (0..active.len())
            .map(|s| {
                let lg = trace.logits_of(s);
                greedy_argmax(lg.row(lg.nrows() - 1))
            })
            .collect();
        for (&i, t) in active.iter().zip(next) {
            out[i].push(t);
            budget[i] -= 1;
        }
    }
    Ok(out.into_iter().zip(prompts).map(|(ids, p)| TokenSequence { ids, boundary: p.boundary }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use ndarray::array;

    fn tiny() -> (Parameters, AdapterBank) {
        let mut cfg = ModelConfig::new(12);
        cfg.n_layers = 2;
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.max_seq = 8;
        cfg.adapter_rank = 2;
        let p = Parameters::init(&cfg, 5).unwrap();
        let a = AdapterBank::init(&cfg, 6).unwrap();
        (p, a)
    }

    #[test]
    fn uniform_entropy_is_ln_vocab() {
        let row = array![0.0, 0.0, 0.0, 0.0];
        assert!((logits_entropy(row.view()) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn one_hot_entropy_is_zero() {
        let row = array![2000.0, 0.0, 0.0, 0.0];
        assert!(logits_entropy(row.view()).abs() < 1e-12);
    }

    #[test]
    fn mean_of_zero_and_ln4() {
        // rows 0..2 predict completion when boundary = 0 and n = 3
        let logits = array![[2000.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]];
        let mean = completion_entropy(logits.view(), 0);
        assert!((mean - 4f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_token_attention_is_one() {
        let (p, a) = tiny();
        let x = TokenSequence { ids: vec![1], boundary: 0 };
        let t = forward(&p, &a, &x).unwrap();
        for l in 0..2 {
            for h in 0..2 {
                assert_eq!(t.attention.head(l, h)[[0, 0]], 1.0);
            }
        }
    }

    #[test]
    fn rows_are_stochastic_and_causal() {
        let (p, a) = tiny();
        let x = TokenSequence { ids: vec![1, 5, 7, 3, 9, 2], boundary: 3 };
        let t = forward(&p, &a, &x).unwrap();
        let (row_err, upper) = t.attention.stochasticity_error();
        assert!(row_err < 1e-9);
        assert_eq!(upper, 0.0);
    }

    #[test]
    fn zero_adapters_match_disabled_exactly() {
        let (p, a) = tiny();
        let x = TokenSequence { ids: vec![1, 5, 7, 3, 9, 2], boundary: 3 };
        let on = forward(&p, &a, &x).unwrap();
        let off = forward(&p, &a.disabled(), &x).unwrap();
        assert_eq!(on.logits, off.logits);
        assert_eq!(on.attention, off.attention);
    }

    #[test]
    fn packing_matches_single_sequences() {
        let (p, a) = tiny();
        let s1: Vec<TokenId> = vec![1, 5, 7];
        let s2: Vec<TokenId> = vec![1, 4, 4, 8, 2];
        let packed = forward_batch(&p, &a, &[&s1, &s2]).unwrap();
        let single = forward_batch(&p, &a, &[&s2]).unwrap();
        let diff = (&packed.logits_of(1) - &single.logits_of(0)).mapv(f64::abs).fold(0.0, |m: f64, &v| m.max(v));
        assert!(diff < 1e-12);
    }

    #[test]
    fn too_long_is_rejected() {
        let (p, a) = tiny();
        let x = TokenSequence { ids: vec![1; 9], boundary: 0 };
        assert!(matches!(forward(&p, &a, &x), Err(Error::SequenceTooLong { len: 9, max: 8 })));
    }

    #[test]
    fn generate_zero_new_is_identity() {
        let (p, a) = tiny();
        let prompt = TokenSequence { ids: vec![1, 5, 3], boundary: 2 };
        assert_eq!(generate(&p, &a, &prompt, 0).unwrap(), prompt);
    }

    #[test]
    fn generate_stops_on_eos() {
        let (mut p, a) = tiny();
        // force EOS to dominate every position
        p.b_out[EOS as usize] = 1e3;
        let prompt = TokenSequence { ids: vec![1, 5, 3], boundary: 2 };
        let out = generate(&p, &a, &prompt, 5).unwrap();
        assert_eq!(out.ids, vec![1, 5, 3, EOS]);
    }

    #[test]
    fn argmax_ties_pick_lowest_id() {
        assert_eq!(greedy_argmax(array![0.5, 1.0, 1.0, 0.2].view()), 1);
    }

    #[test]
    fn batched_generation_matches_single() {
        let (p, a) = tiny();
        let prompts = vec![
            TokenSequence { ids: vec![1, 4, 5], boundary: 2 },
            TokenSequence { ids: vec![1, 7], boundary: 1 },
            TokenSequence { ids: vec![1, 9, 9, 3], boundary: 3 },
        ];
        let budgets = [3, 6, 2];
        let many = generate_many(&p, &a, &prompts, &budgets).unwrap();
        for ((pr, &m), got) in prompts.iter().zip(&budgets).zip(&many) {
            assert_eq!(&generate(&p, &a, pr, m).unwrap(), got);
        }
    }
}
