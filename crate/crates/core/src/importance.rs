//! Per-token importance and the percentile mask that selects which key
//! positions get suppressed or reinforced.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Category, TokenSequence, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::model::{forward_batch, AdapterBank, Parameters, TokenId};

/// Default share of positions flagged per sequence.
pub const DEFAULT_THRESHOLD_PCT: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    /// Change in mean completion entropy when the token is replaced by PAD.
    Entropy,
    /// Content word = 1, function word or special token = 0.
    Lexical,
}

impl Estimator {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(Estimator::Entropy),
            "lexical" => Ok(Estimator::Lexical),
            other => Err(Error::invalid(format!("unknown estimator `{other}` (entropy|lexical)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    /// Signed per-position scores. Ranking uses `|score|`.
    pub scores: Vec<f64>,
    pub estimator: Estimator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMask {
    pub flagged: Vec<bool>,
    pub threshold_pct: f64,
}

impl ImportanceMask {
    pub fn count(&self) -> usize {
        self.flagged.iter().filter(|&&f| f).count()
    }
}

/// `I(t_i) = φ(x) − φ(x with t_i replaced by PAD)`, where φ is the mean
/// completion entropy under the base model. Every position is scored; the
/// masked variants are evaluated together in one packed pass.
pub fn entropy_importance(params: &Parameters, adapters: &AdapterBank, x: &TokenSequence) -> Result<ImportanceScores> {
    let n = x.len();
    if n < 2 {
        return Err(Error::invalid("entropy importance needs at least two tokens"));
    }
    // the estimator always reads the frozen base model
    let base = adapters.disabled();
    let mut variants: Vec<Vec<TokenId>> = Vec::with_capacity(n + 1);
    variants.push(x.ids.clone());
    for i in 0..n {
        let mut v = x.ids.clone();
        v[i] = PAD;
        variants.push(v);
    }
    let refs: Vec<&[TokenId]> = variants.iter().map(Vec::as_slice).collect();
    let trace = forward_batch(params, &base, &refs)?;
    let phi = |s: usize| crate::model::completion_entropy(trace.logits_of(s), x.boundary);
    let full = phi(0);
    let scores = (0..n).map(|i| full - phi(i + 1)).collect();
    Ok(ImportanceScores { scores, estimator: Estimator::Entropy })
}

pub fn lexical_importance(x: &TokenSequence, vocab: &Vocabulary) -> ImportanceScores {
    let scores = x.ids.iter().map(|&t| if vocab.category(t) == Some(Category::Content) { 1.0 } else { 0.0 }).collect();
    ImportanceScores { scores, estimator: Estimator::Lexical }
}

/// Flag the `ceil(pct/100 · n)` positions with the largest `|score|`; ties
/// go to the earlier position. At least one position always stays
/// unflagged (the lowest-ranked one).
pub fn mask_by_percentile(scores: &ImportanceScores, threshold_pct: f64) -> Result<ImportanceMask> {
    if !(threshold_pct > 0.0 && threshold_pct < 100.0) {
        return Err(Error::invalid(format!("threshold_pct must lie in (0, 100), got {threshold_pct}")));
    }
    let n = scores.scores.len();
    if n < 2 {
        return Err(Error::invalid("percentile mask needs at least two positions"));
    }
    if scores.scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("importance score".into()));
    }
    let want = ((threshold_pct / 100.0) * n as f64 - 1e-9).ceil() as usize;
    let count = want.clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps index order among equal magnitudes
    order.sort_by(|&a, &b| scores.scores[b].abs().total_cmp(&scores.scores[a].abs()));
    let mut flagged = vec![false; n];
    for &i in &order[..count] {
        flagged[i] = true;
    }
    Ok(ImportanceMask { flagged, threshold_pct })
}

/// `position,token,score,flagged` rows.
pub fn write_scores_csv(
    path: &Path,
    seq: &TokenSequence,
    vocab: &Vocabulary,
    scores: &ImportanceScores,
    mask: &ImportanceMask,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["position", "token", "score", "flagged"]).map_err(io)?;
    for (i, &t) in seq.ids.iter().enumerate() {
        w.write_record([
            i.to_string(),
            vocab.label(t),
            format!("{:.9e}", scores.scores[i]),
            mask.flagged[i].to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
