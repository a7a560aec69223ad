//! Scalar training objectives and their gradients.
//!
//! Attention losses are per-sample sums over layers and heads of the
//! row-averaged KL, averaged over the batch. Targets come from a fresh
//! adapters-off pass over the same batch.

use ndarray::Array4;

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::importance::ImportanceMask;
use crate::model::{backward, forward_batch, AdapterBank, Gradients, Parameters, TokenId, Trainable, Upstream};
use crate::shift::{kl_rowwise, kl_rowwise_grad_p, kl_rowwise_grad_q, reinforce_attention, suppress_attention, KL_EPS};

/// Which attention target a KL loss pulls toward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttentionObjective {
    /// `KL(A_model ‖ A_sup)` on forget data.
    Suppress { lambda: f64 },
    /// `KL(A_rein ‖ A_model)` on retain data.
    Reinforce { beta: f64 },
}

/// `α·asp + (1−α)·akl`.
pub fn as_loss(asp: f64, akl: f64, alpha: f64) -> f64 {
    alpha * asp + (1.0 - alpha) * akl
}

fn ids_of<'a>(batch: &'a [&TokenSequence]) -> Vec<&'a [TokenId]> {
    batch.iter().map(|s| s.ids.as_slice()).collect()
}

fn check_finite(loss: f64, what: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite(format!("{what} loss is {loss}")))
    }
}

/// Target attention tensors for `batch` built from the frozen base model.
pub fn attention_targets(
    params: &Parameters,
    adapters: &AdapterBank,
    batch: &[&TokenSequence],
    masks: &[&ImportanceMask],
    objective: AttentionObjective,
) -> Result<Vec<Array4<f64>>> {
    if batch.is_empty() {
        return Err(Error::invalid("empty loss batch"));
    }
    if batch.len() != masks.len() {
        return Err(Error::invalid("one importance mask per sequence"));
    }
    let reference = forward_batch(params, &adapters.disabled(), &ids_of(batch))?;
    reference
        .attention
        .iter()
        .zip(masks)
        .map(|(att, mask)| {
            if mask.flagged.len() != att.len() {
                return Err(Error::ShapeMismatch(format!(
                    "mask of {} positions for a sequence of {}",
                    mask.flagged.len(),
                    att.len()
                )));
            }
            let t = match objective {
                AttentionObjective::Suppress { lambda } => suppress_attention(att, mask, lambda)?,
                AttentionObjective::Reinforce { beta } => reinforce_attention(att, mask, beta)?,
            };
            Ok(t.values)
        })
        .collect()
}

/// Loss and optional adapter gradient of an attention objective against
/// precomputed targets.
///
/// A sample whose model attention already equals its target bit for bit
/// sits at the minimum of the divergence; its gradient is defined as zero
/// rather than the `O(ε)` residue of the smoothed logarithm.
pub fn attention_kl_with_targets(
    params: &Parameters,
    adapters: &AdapterBank,
    batch: &[&TokenSequence],
    targets: &[Array4<f64>],
    objective: AttentionObjective,
    with_grad: bool,
) -> Result<(f64, Option<AdapterBank>)> {
    let trace = forward_batch(params, adapters, &ids_of(batch))?;
    let cfg = &params.config;
    let lh = (cfg.n_layers * cfg.n_heads) as f64;
    let b = batch.len() as f64;
    let mut loss = 0.0;
    let mut dattn = Vec::with_capacity(batch.len());
    for (att, target) in trace.attention.iter().zip(targets) {
        let p = att.values.view();
        let t = target.view();
        let (value, grad) = match objective {
            AttentionObjective::Suppress { .. } => {
                (kl_rowwise(p, t, KL_EPS)?, with_grad.then(|| kl_rowwise_grad_p(p, t, KL_EPS)).transpose()?)
            }
            AttentionObjective::Reinforce { .. } => {
                (kl_rowwise(t, p, KL_EPS)?, with_grad.then(|| kl_rowwise_grad_q(t, p, KL_EPS)).transpose()?)
            }
        };
        loss += lh * value / b;
        if let Some(mut g) = grad {
            if att.values == *target {
                g.fill(0.0);
            } else {
                g.mapv_inplace(|x| x * lh / b);
            }
            dattn.push(g);
        }
    }
    let loss = check_finite(loss, "attention KL")?;
    if !with_grad {
        return Ok((loss, None));
    }
    let up = Upstream { dlogits: None, dattn: Some(dattn) };
    let grads = backward(params, adapters, &trace, &up, Trainable::Adapters)?.into_adapters();
    Ok((loss, Some(grads)))
}

/// Attention-suppression loss on a forget batch.
pub fn asp_loss(
    params: &Parameters,
    adapters: &AdapterBank,
    batch: &[&TokenSequence],
    masks: &[&ImportanceMask],
    lambda: f64,
    with_grad: bool,
) -> Result<(f64, Option<AdapterBank>)> {
    let objective = AttentionObjective::Suppress { lambda };
    let targets = attention_targets(params, adapters, batch, masks, objective)?;
    attention_kl_with_targets(params, adapters, batch, &targets, objective, with_grad)
}

/// Attention-reinforcement loss on a retain batch.
pub fn akl_loss(
    params: &Parameters,
    adapters: &AdapterBank,
    batch: &[&TokenSequence],
    masks: &[&ImportanceMask],
    beta: f64,
    with_grad: bool,
) -> Result<(f64, Option<AdapterBank>)> {
    let objective = AttentionObjective::Reinforce { beta };
    let targets = attention_targets(params, adapters, batch, masks, objective)?;
    attention_kl_with_targets(params, adapters, batch, &targets, objective, with_grad)
}

/// Mean next-token cross-entropy over completion tokens, optionally with the
/// gradient for `trainable`. `sign = -1` turns it into the gradient-ascent
/// objective (the returned loss is still the plain cross-entropy).
pub fn cross_entropy(
    params: &Parameters,
    adapters: &AdapterBank,
    batch: &[&TokenSequence],
    trainable: Option<Trainable>,
    sign: f64,
) -> Result<(f64, Option<Gradients>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty loss batch"));
    }
    let trace = forward_batch(params, adapters, &ids_of(batch))?;
    let count: usize = batch.iter().map(|s| s.len().saturating_sub(s.boundary + 1)).sum();
    if count == 0 {
        return Err(Error::invalid("batch has no completion tokens"));
    }
    let mut dlogits = trainable.map(|_| ndarray::Array2::<f64>::zeros(trace.logits.raw_dim()));
    let mut total = 0.0;
    for (s, seq) in batch.iter().enumerate() {
        let off = trace.offsets[s];
        for p in seq.boundary..seq.len() - 1 {
            let row = trace.logits.row(off + p);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let target = seq.ids[p + 1] as usize;
            total += sum.ln() + max - row[target];
            if let Some(d) = dlogits.as_mut() {
                let mut drow = d.row_mut(off + p);
                for (dv, &v) in drow.iter_mut().zip(row.iter()) {
                    *dv = sign * (v - max).exp() / sum / count as f64;
                }
                drow[target] -= sign / count as f64;
            }
        }
    }
    let loss = check_finite(total / count as f64, "cross-entropy")?;
    let grads = match (trainable, dlogits) {
        (Some(t), Some(d)) => {
            let up = Upstream { dlogits: Some(d), dattn: None };
            Some(backward(params, adapters, &trace, &up, t)?)
        }
        _ => None,
    };
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ParamSet};
    use ndarray::Array2;

    fn setup() -> (Parameters, AdapterBank, Vec<TokenSequence>, Vec<ImportanceMask>) {
        let mut cfg = ModelConfig::new(11);
        cfg.n_layers = 2;
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.max_seq = 8;
        cfg.adapter_rank = 2;
        let p = Parameters::init(&cfg, 21).unwrap();
        let a = AdapterBank::init(&cfg, 22).unwrap();
        let seqs = vec![
            TokenSequence { ids: vec![1, 5, 6, 3, 7, 8, 2], boundary: 3 },
            TokenSequence { ids: vec![1, 9, 3, 10, 2], boundary: 2 },
        ];
        let masks = vec![
            ImportanceMask { flagged: vec![false, true, true, false, true, false, false], threshold_pct: 50.0 },
            ImportanceMask { flagged: vec![false, true, false, true, false], threshold_pct: 50.0 },
        ];
        (p, a, seqs, masks)
    }

    #[test]
    fn as_loss_arithmetic() {
        assert_eq!(as_loss(2.0, 4.0, 0.25), 3.5);
        assert_eq!(as_loss(2.0, 4.0, 1.0), 2.0);
        assert_eq!(as_loss(2.0, 4.0, 0.0), 4.0);
        for alpha in [0.0, 0.3, 0.9] {
            assert!((as_loss(1.7, 1.7, alpha) - 1.7).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_adapters_identity_targets_give_zero_loss_and_gradient() {
        let (p, a, seqs, masks) = setup();
        let batch: Vec<&TokenSequence> = seqs.iter().collect();
        let m: Vec<&ImportanceMask> = masks.iter().collect();
        let (asp, g) = asp_loss(&p, &a, &batch, &m, 0.0, true).unwrap();
        assert_eq!(asp, 0.0);
        assert_eq!(g.unwrap().sq_norm(), 0.0);
        let (akl, g) = akl_loss(&p, &a, &batch, &m, 0.0, true).unwrap();
        assert_eq!(akl, 0.0);
        assert_eq!(g.unwrap().sq_norm(), 0.0);
    }

    #[test]
    fn zero_adapters_nonzero_strength_give_positive_loss() {
        let (p, a, seqs, masks) = setup();
        let batch: Vec<&TokenSequence> = seqs.iter().collect();
        let m: Vec<&ImportanceMask> = masks.iter().collect();
        let asp = asp_loss(&p, &a, &batch, &m, 0.99, false).unwrap().0;
        let akl = akl_loss(&p, &a, &batch, &m, 0.1, false).unwrap().0;
        assert!(asp > 0.0);
        assert!(akl > 0.0 && akl < asp);
    }

    #[test]
    fn reversing_kl_arguments_changes_the_value() {
        let (p, a, seqs, masks) = setup();
        let batch: Vec<&TokenSequence> = seqs.iter().collect();
        let m: Vec<&ImportanceMask> = masks.iter().collect();
        let obj = AttentionObjective::Reinforce { beta: 0.7 };
        let targets = attention_targets(&p, &a, &batch, &m, obj).unwrap();
        let forward_order = attention_kl_with_targets(&p, &a, &batch, &targets, obj, false).unwrap().0;
        let reversed =
            attention_kl_with_targets(&p, &a, &batch, &targets, AttentionObjective::Suppress { lambda: 0.0 }, false)
                .unwrap()
                .0;
        assert!(forward_order > 0.0 && reversed > 0.0);
        assert!((forward_order - reversed).abs() > 1e-6);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_vocab() {
        let (mut p, a, seqs, _) = setup();
        p.w_out = Array2::zeros(p.w_out.raw_dim());
        let batch: Vec<&TokenSequence> = seqs.iter().collect();
        let (ce, _) = cross_entropy(&p, &a, &batch, None, 1.0).unwrap();
        assert!((ce - 11f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ascent_gradient_is_negated_descent_gradient() {
        let (p, a, seqs, _) = setup();
        let batch: Vec<&TokenSequence> = seqs.iter().collect();
        let (_, gd) = cross_entropy(&p, &a, &batch, Some(Trainable::Adapters), 1.0).unwrap();
        let (_, ga) = cross_entropy(&p, &a, &batch, Some(Trainable::Adapters), -1.0).unwrap();
        let (gd, ga) = (gd.unwrap().into_adapters().flatten(), ga.unwrap().into_adapters().flatten());
        assert!(gd.iter().any(|&x| x != 0.0));
        for (x, y) in gd.iter().zip(&ga) {
            assert_eq!(*x, -*y);
        }
    }
}
