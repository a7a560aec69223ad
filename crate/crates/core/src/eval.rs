//! Forgetting and retention metrics: exact match, ROUGE-L, top-k exclusion,
//! extraction likelihood, the reproduction proxy, and heatmap export.
//!
//! Exact match, TR@k and el_n are read off teacher-forced logits. Greedy
//! decoding reproduces a reference continuation iff the teacher-forced argmax
//! equals the next reference token at every step, so one forward pass per
//! sequence answers all three.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Example, FactRecord, Split, TokenSequence, Vocabulary, EOS};
use crate::error::{Error, Result};
use crate::model::{forward_batch, generate_many, greedy_argmax, AdapterBank, AttentionTensor, Parameters, TokenId};

/// Sequences packed into one forward pass during evaluation.
const EVAL_CHUNK: usize = 48;

pub const DEFAULT_K: usize = 5;
pub const ROBUST_K: usize = 50;
pub const DEFAULT_EL_N: usize = 10;
/// A sequence with `el_n` at or below this value counts as forgotten.
pub const EL_FORGOTTEN: f64 = 0.05;

fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 between token lists.
pub fn rouge_l(candidate: &[TokenId], reference: &[TokenId]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("ROUGE-L reference is empty"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_len(candidate, reference) as f64;
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

/// Run packed forward passes over `seqs` and hand each sequence's logits to `f`.
fn each_logits(
    params: &Parameters,
    adapters: &AdapterBank,
    seqs: &[&TokenSequence],
    mut f: impl FnMut(usize, ArrayView2<'_, f64>) -> Result<()>,
) -> Result<()> {
    for (c, chunk) in seqs.chunks(EVAL_CHUNK).enumerate() {
        let ids: Vec<&[TokenId]> = chunk.iter().map(|s| s.ids.as_slice()).collect();
        let trace = forward_batch(params, adapters, &ids)?;
        for s in 0..chunk.len() {
            f(c * EVAL_CHUNK + s, trace.logits_of(s))?;
        }
    }
    Ok(())
}

/// Teacher-forced greedy predictions for every completion row
/// (`boundary..len-1`), aligned with `seq.ids[boundary+1..]`.
pub fn teacher_forced_predictions(
    params: &Parameters,
    adapters: &AdapterBank,
    seqs: &[&TokenSequence],
) -> Result<Vec<Vec<TokenId>>> {
    let mut out = vec![Vec::new(); seqs.len()];
    each_logits(params, adapters, seqs, |i, logits| {
        let b = seqs[i].boundary;
        out[i] = (b..logits.nrows() - 1).map(|p| greedy_argmax(logits.row(p))).collect();
        Ok(())
    })?;
    Ok(out)
}

/// Whether greedy decoding from the prompt reproduces the answer and EOS.
pub fn exact_match_flags(params: &Parameters, adapters: &AdapterBank, seqs: &[&TokenSequence]) -> Result<Vec<bool>> {
    let preds = teacher_forced_predictions(params, adapters, seqs)?;
    Ok(preds.iter().zip(seqs).map(|(p, s)| p.as_slice() == s.completion()).collect())
}

/// Fraction of examples whose greedy generation equals the reference answer.
pub fn exact_match(params: &Parameters, adapters: &AdapterBank, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("exact match over an empty split"));
    }
    let seqs: Vec<&TokenSequence> = examples.iter().map(|e| &e.seq).collect();
    let flags = exact_match_flags(params, adapters, &seqs)?;
    Ok(flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64)
}

/// Rank of `truth` when the row is ordered by logit descending, ties by
/// lowest id first.
fn rank_of(row: ndarray::ArrayView1<'_, f64>, truth: TokenId) -> usize {
    let t = truth as usize;
    let lt = row[t];
    row.iter().enumerate().filter(|&(v, &x)| x > lt || (x == lt && v < t)).count()
}

/// Excluded and total answer positions (EOS not included) for each sequence.
fn exclusion_counts(
    params: &Parameters,
    adapters: &AdapterBank,
    seqs: &[&TokenSequence],
    ks: &[usize],
) -> Result<Vec<(usize, usize)>> {
    if ks.contains(&0) {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut counts = vec![(0usize, 0usize); ks.len()];
    each_logits(params, adapters, seqs, |i, logits| {
        let s = seqs[i];
        let answer_end = s.len() - 1 - usize::from(s.ids.last() == Some(&EOS));
        for p in s.boundary..answer_end {
            let r = rank_of(logits.row(p), s.ids[p + 1]);
            for (c, &k) in counts.iter_mut().zip(ks) {
                c.1 += 1;
                if r >= k {
                    c.0 += 1;
                }
            }
        }
        Ok(())
    })?;
    Ok(counts)
}

/// Share of answer positions whose true token lies outside the model's top-k
/// next-token predictions (teacher-forced context).
pub fn topk_exclusion_rate(params: &Parameters, adapters: &AdapterBank, examples: &[Example], k: usize) -> Result<f64> {
    let seqs: Vec<&TokenSequence> = examples.iter().map(|e| &e.seq).collect();
    let (ex, tot) = exclusion_counts(params, adapters, &seqs, &[k])?[0];
    Ok(if tot == 0 { 0.0 } else { ex as f64 / tot as f64 })
}

fn el_from_predictions(seq: &TokenSequence, preds: &[TokenId], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("el_n needs n >= 1"));
    }
    let len = seq.len();
    if len <= seq.boundary + n {
        return Err(Error::invalid(format!(
            "sequence completion too short for n = {n} (length {len}, boundary {})",
            seq.boundary
        )));
    }
    // prediction at row p lives at preds[p - boundary]
    let ok: Vec<bool> = (seq.boundary..len - 1).map(|p| preds[p - seq.boundary] == seq.ids[p + 1]).collect();
    let windows = len - n - seq.boundary;
    let hits = (0..windows).filter(|&w| ok[w..w + n].iter().all(|&b| b)).count();
    Ok(hits as f64 / windows as f64)
}

/// Fraction of length-`n` windows of the completion that greedy decoding
/// reproduces exactly, with prefixes ending anywhere from the boundary on.
pub fn extraction_likelihood(
    params: &Parameters,
    adapters: &AdapterBank,
    seq: &TokenSequence,
    n: usize,
) -> Result<f64> {
    let preds = teacher_forced_predictions(params, adapters, &[seq])?;
    el_from_predictions(seq, &preds[0], n)
}

/// Deterministic stand-in for a judge model: the generation reproduces the
/// record if it contains any fact token or overlaps the answer with
/// ROUGE-L >= 0.5.
pub fn reproduction_heuristic(generation: &[TokenId], record: &FactRecord, vocab: &Vocabulary) -> Result<bool> {
    if generation.is_empty() {
        return Ok(false);
    }
    let facts = record.fact_tokens(vocab);
    if generation.iter().any(|t| facts.contains(t)) {
        return Ok(true);
    }
    let answer = vocab.encode_words(&record.answer)?;
    Ok(rouge_l(generation, &answer)? >= 0.5)
}

/// Write one head's attention as a labeled CSV matrix.
pub fn export_heatmap(
    attention: &AttentionTensor,
    labels: &[String],
    layer: usize,
    head: usize,
    out: &Path,
) -> Result<()> {
    if layer >= attention.n_layers() || head >= attention.n_heads() {
        return Err(Error::invalid(format!(
            "heatmap index (layer {layer}, head {head}) outside ({}, {})",
            attention.n_layers(),
            attention.n_heads()
        )));
    }
    if labels.len() != attention.len() {
        return Err(Error::ShapeMismatch(format!("{} labels for {} positions", labels.len(), attention.len())));
    }
    let m = attention.head(layer, head);
    let mut w = csv::Writer::from_path(out).map_err(|e| Error::io(out, e.into()))?;
    let io = |e: csv::Error| Error::io(out, e.into());
    let mut header = vec![String::new()];
    header.extend(labels.iter().cloned());
    w.write_record(&header).map_err(io)?;
    for (i, label) in labels.iter().enumerate() {
        let mut row = vec![label.clone()];
        row.extend(m.row(i).iter().map(|v| format!("{v:.9e}")));
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(out, e))
}

/// `position:word` labels for heatmap axes.
pub fn position_labels(seq: &TokenSequence, vocab: &Vocabulary) -> Vec<String> {
    seq.ids.iter().enumerate().map(|(i, &t)| format!("{i}:{}", vocab.label(t))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub records: usize,
    pub exact_match: f64,
    pub rouge_l: f64,
    pub tr_at_k: f64,
    pub tr_at_robust_k: f64,
    pub el_n: f64,
    /// Share of sequences with `el_n <= 0.05`.
    pub el_forgotten: f64,
    /// Proxy judged by string overlap, not by a language model.
    pub reproduction_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub robust_k: usize,
    pub el_n: usize,
    pub reproduction_note: String,
    /// Keys: `forget`, `neighbour`, `general`, `forget_rephrased`.
    pub splits: BTreeMap<String, SplitMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub k: usize,
    pub el_n: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { k: DEFAULT_K, el_n: DEFAULT_EL_N }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if self.el_n == 0 {
            return Err(Error::invalid("el_n must be at least 1"));
        }
        Ok(())
    }
}

/// Every metric over one list of examples.
pub fn evaluate_examples(
    params: &Parameters,
    adapters: &AdapterBank,
    corpus: &Corpus,
    examples: &[Example],
    settings: EvalSettings,
) -> Result<SplitMetrics> {
    settings.validate()?;
    if examples.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let seqs: Vec<&TokenSequence> = examples.iter().map(|e| &e.seq).collect();
    let n = examples.len() as f64;

    let prompts: Vec<TokenSequence> = examples.iter().map(Example::prompt).collect();
    let budgets: Vec<usize> = examples.iter().map(|e| e.answer().len() + 1).collect();
    let gens = generate_many(params, adapters, &prompts, &budgets)?;
    let mut em = 0usize;
    let mut rouge = 0.0;
    let mut repro = 0usize;
    for (ex, g) in examples.iter().zip(&gens) {
        let produced = &g.ids[ex.prompt().len()..];
        let text: Vec<TokenId> = produced.iter().copied().take_while(|&t| t != EOS).collect();
        if produced == ex.seq.completion() {
            em += 1;
        }
        rouge += rouge_l(&text, ex.answer())?;
        if reproduction_heuristic(&text, &corpus.records[ex.record], &corpus.vocab)? {
            repro += 1;
        }
    }

    let counts = exclusion_counts(params, adapters, &seqs, &[settings.k, ROBUST_K])?;
    let rate = |(e, t): (usize, usize)| if t == 0 { 0.0 } else { e as f64 / t as f64 };

    let preds = teacher_forced_predictions(params, adapters, &seqs)?;
    let mut el_total = 0.0;
    let mut forgotten = 0usize;
    for (s, p) in seqs.iter().zip(&preds) {
        let el = el_from_predictions(s, p, settings.el_n)?;
        el_total += el;
        if el <= EL_FORGOTTEN {
            forgotten += 1;
        }
    }

    Ok(SplitMetrics {
        records: examples.len(),
        exact_match: em as f64 / n,
        rouge_l: rouge / n,
        tr_at_k: rate(counts[0]),
        tr_at_robust_k: rate(counts[1]),
        el_n: el_total / n,
        el_forgotten: forgotten as f64 / n,
        reproduction_rate: repro as f64 / n,
    })
}

/// Metrics for the three splits plus rephrased forget questions.
pub fn evaluate(
    params: &Parameters,
    adapters: &AdapterBank,
    corpus: &Corpus,
    settings: EvalSettings,
) -> Result<EvalReport> {
    let mut splits = BTreeMap::new();
    for split in [Split::Forget, Split::Neighbour, Split::General] {
        let ex = corpus.examples(split)?;
        splits.insert(split.as_str().to_string(), evaluate_examples(params, adapters, corpus, &ex, settings)?);
    }
    let rephrased = corpus
        .record_indices(Split::Forget)
        .into_iter()
        .map(|i| corpus.rephrased_example(i))
        .collect::<Result<Vec<_>>>()?;
    splits.insert("forget_rephrased".into(), evaluate_examples(params, adapters, corpus, &rephrased, settings)?);
    Ok(EvalReport {
        k: settings.k,
        robust_k: ROBUST_K,
        el_n: settings.el_n,
        reproduction_note: "reproduction_rate is a string-overlap proxy (fact token present or ROUGE-L >= 0.5)".into(),
        splits,
    })
}

impl EvalReport {
    pub fn split(&self, name: &str) -> Option<&SplitMetrics> {
        self.splits.get(name)
    }

    /// Mean exact match over neighbour and general records.
    pub fn retain_exact_match(&self) -> f64 {
        let parts: Vec<&SplitMetrics> = ["neighbour", "general"].iter().filter_map(|k| self.splits.get(*k)).collect();
        let n: usize = parts.iter().map(|m| m.records).sum();
        if n == 0 {
            return 0.0;
        }
        parts.iter().map(|m| m.exact_match * m.records as f64).sum::<f64>() / n as f64
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::invalid(format!("bad report: {e}")))
    }

    /// One row per split.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::invalid(e.to_string());
        w.write_record([
            "split",
            "records",
            "exact_match",
            "rouge_l",
            &format!("tr_at_{}", self.k),
            &format!("tr_at_{}", self.robust_k),
            &format!("el_{}", self.el_n),
            "el_forgotten",
            "reproduction_rate",
        ])
        .map_err(err)?;
        for (name, m) in &self.splits {
            w.write_record([
                name.clone(),
                m.records.to_string(),
                format!("{:.6}", m.exact_match),
                format!("{:.6}", m.rouge_l),
                format!("{:.6}", m.tr_at_k),
                format!("{:.6}", m.tr_at_robust_k),
                format!("{:.6}", m.el_n),
                format!("{:.6}", m.el_forgotten),
                format!("{:.6}", m.reproduction_rate),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let json = dir.join("eval.json");
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("eval.csv");
        std::fs::write(&csv, self.to_csv()?).map_err(|e| Error::io(&csv, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, BOS, SEP};
    use crate::model::{generate, ModelConfig};
    use ndarray::Array1;

    #[test]
    fn rouge_identical_and_disjoint() {
        assert_eq!(rouge_l(&[4, 5, 6], &[4, 5, 6]).unwrap(), 1.0);
        assert_eq!(rouge_l(&[1, 2], &[3, 4]).unwrap(), 0.0);
        assert_eq!(rouge_l(&[], &[3, 4]).unwrap(), 0.0);
        assert!(rouge_l(&[3], &[]).is_err());
    }

    #[test]
    fn rouge_word_order_case() {
        // "the cat sat" vs "cat the sat": LCS 2
        let f = rouge_l(&[1, 2, 3], &[2, 1, 3]).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rank_ties_favour_low_ids() {
        let row = Array1::from(vec![1.0, 3.0, 3.0, 0.0]);
        assert_eq!(rank_of(row.view(), 1), 0);
        assert_eq!(rank_of(row.view(), 2), 1);
        assert_eq!(rank_of(row.view(), 0), 2);
        assert_eq!(rank_of(row.view(), 3), 3);
    }

    /// Bias the output head so the model always predicts `tok`.
    fn constant_model(vocab: usize, tok: TokenId) -> (Parameters, AdapterBank) {
        let mut cfg = ModelConfig::new(vocab);
        cfg.n_layers = 1;
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.max_seq = 40;
        let mut p = Parameters::init(&cfg, 1).unwrap();
        p.b_out[tok as usize] = 1e3;
        let a = AdapterBank::init(&cfg, 2).unwrap();
        (p, a)
    }

    #[test]
    fn eos_model_extracts_nothing_and_matches_nothing() {
        let c = generate_corpus(1, 6, 2).unwrap();
        let (p, a) = constant_model(c.vocab.len(), EOS);
        let ex = c.examples(Split::Forget).unwrap();
        assert_eq!(exact_match(&p, &a, &ex).unwrap(), 0.0);
        assert_eq!(extraction_likelihood(&p, &a, &ex[0].seq, 10).unwrap(), 0.0);
        assert_eq!(topk_exclusion_rate(&p, &a, &ex, 1).unwrap(), 1.0);
        assert_eq!(topk_exclusion_rate(&p, &a, &ex, c.vocab.len()).unwrap(), 0.0);
    }

    #[test]
    fn el_windows_on_hand_sequence() {
        // boundary 1, completion of 4 tokens, n = 2 -> 3 windows
        let seq = TokenSequence { ids: vec![BOS, SEP, 7, 8, 9, EOS], boundary: 1 };
        let all = vec![7, 8, 9, EOS];
        assert_eq!(el_from_predictions(&seq, &all, 2).unwrap(), 1.0);
        let miss_last = vec![7, 8, 9, 4];
        assert!((el_from_predictions(&seq, &miss_last, 2).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let miss_first = vec![5, 8, 9, EOS];
        assert!((el_from_predictions(&seq, &miss_first, 2).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(el_from_predictions(&seq, &all, 4).is_ok());
        assert!(el_from_predictions(&seq, &all, 5).is_err());
    }

    #[test]
    fn teacher_forced_match_agrees_with_generation() {
        let c = generate_corpus(3, 6, 3).unwrap();
        let vocab = c.vocab.len();
        let examples = c.all_examples().unwrap();
        for (p, a) in [constant_model(vocab, EOS), constant_model(vocab, examples[0].seq.ids[2])] {
            let seqs: Vec<&TokenSequence> = examples.iter().map(|e| &e.seq).collect();
            let flags = exact_match_flags(&p, &a, &seqs).unwrap();
            for (ex, f) in examples.iter().zip(flags) {
                let g = generate(&p, &a, &ex.prompt(), ex.answer().len() + 1).unwrap();
                assert_eq!(f, &g.ids[ex.prompt().len()..] == ex.seq.completion());
            }
        }
    }

    #[test]
    fn reproduction_rules() {
        let c = generate_corpus(2, 6, 2).unwrap();
        let r = &c.records[0];
        let facts = r.fact_tokens(&c.vocab);
        assert!(reproduction_heuristic(&[facts[facts.len() - 1]], r, &c.vocab).unwrap());
        assert!(!reproduction_heuristic(&[], r, &c.vocab).unwrap());
        // every template word of the answer but no fact token: LCS 10 - |facts|
        let answer = c.vocab.encode_words(&r.answer).unwrap();
        let template: Vec<TokenId> = answer.iter().copied().filter(|t| !facts.contains(t)).collect();
        let f = rouge_l(&template, &answer).unwrap();
        assert_eq!(reproduction_heuristic(&template, r, &c.vocab).unwrap(), f >= 0.5);
        assert!(f >= 0.5);
        let the = c.vocab.id("the").unwrap();
        assert!(!reproduction_heuristic(&[the], r, &c.vocab).unwrap());
    }

    #[test]
    fn report_round_trips() {
        let c = generate_corpus(5, 6, 2).unwrap();
        let (p, a) = constant_model(c.vocab.len(), EOS);
        let r = evaluate(&p, &a, &c, EvalSettings::default()).unwrap();
        assert_eq!(EvalReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        assert_eq!(r.splits.len(), 4);
        for m in r.splits.values() {
            for v in
                [m.exact_match, m.rouge_l, m.tr_at_k, m.tr_at_robust_k, m.el_n, m.el_forgotten, m.reproduction_rate]
            {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        assert!(r.to_csv().unwrap().lines().count() == 5);
    }

    #[test]
    fn single_token_heatmap() {
        let att = AttentionTensor::new(ndarray::Array4::ones((1, 1, 1, 1))).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("h.csv");
        export_heatmap(&att, &["0:<bos>".into()], 0, 0, &out).unwrap();
        let text = std::fs::read_to_string(&out).unwrap();
        assert_eq!(text, ",0:<bos>\n0:<bos>,1.000000000e0\n");
        assert!(export_heatmap(&att, &["x".into()], 1, 0, &out).is_err());
    }
}
