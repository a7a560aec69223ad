//! Target attention construction and the row-wise KL kernel.
//!
//! Suppression scales the attention a query places on flagged keys by
//! `1 - λ` and renormalizes each row; reinforcement scales it by `1 + β`.
//! Both keep causal zeros in place and keep every row a distribution.

use ndarray::{Array4, ArrayView2, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::ImportanceMask;
use crate::model::AttentionTensor;

/// Default ε inside the KL logarithm.
pub const KL_EPS: f64 = 1e-8;

const DEGENERATE_DENOM: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    /// Suppression strength in `[0, 1]`.
    pub lambda: f64,
    /// Reinforcement strength, `>= 0`.
    pub beta: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec { lambda: 0.99, beta: 0.1 }
    }
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be a finite value >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Suppressed,
    Reinforced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetAttention {
    /// `(L, H, n, n)`, same layout as [`AttentionTensor::values`].
    pub values: Array4<f64>,
    pub provenance: Provenance,
}

impl TargetAttention {
    pub fn as_attention(&self) -> AttentionTensor {
        AttentionTensor { values: self.values.clone() }
    }
}

/// Reweight one attention row by `factor[j]` on its causal window and
/// renormalize. Rows whose window carries a single common factor are
/// returned unchanged, since the scaling cancels.
fn reweight_row(row: &mut [f64], window: usize, factor: impl Fn(usize) -> f64) -> std::result::Result<(), ()> {
    let first = factor(0);
    if first != 0.0 && (1..window).all(|j| factor(j) == first) {
        return Ok(());
    }
    let denom: f64 = (0..window).map(|j| row[j] * factor(j)).sum();
    if denom <= DEGENERATE_DENOM {
        return Err(());
    }
    for (j, v) in row.iter_mut().enumerate().take(window) {
        *v = *v * factor(j) / denom;
    }
    Ok(())
}

/// Suppress one row: `a_j (1 - λ m_j) / Σ a_j' (1 - λ m_j')`. Returns
/// `None` when the renormalizing denominator vanishes.
pub fn suppress_row(row: &[f64], mask: &[bool], lambda: f64) -> Option<Vec<f64>> {
    let mut out = row.to_vec();
    let n = row.len().min(mask.len());
    reweight_row(&mut out, n, |j| if mask[j] { 1.0 - lambda } else { 1.0 }).ok()?;
    Some(out)
}

/// Reinforce one row: `a_j (1 + β m_j) / Σ a_j' (1 + β m_j')`.
pub fn reinforce_row(row: &[f64], mask: &[bool], beta: f64) -> Vec<f64> {
    let mut out = row.to_vec();
    let n = row.len().min(mask.len());
    // denominator >= row mass, never degenerate for a distribution
    let _ = reweight_row(&mut out, n, |j| if mask[j] { 1.0 + beta } else { 1.0 });
    out
}

fn check_mask(reference: &AttentionTensor, mask: &ImportanceMask) -> Result<()> {
    if mask.flagged.len() != reference.len() {
        return Err(Error::ShapeMismatch(format!(
            "mask covers {} positions, attention covers {}",
            mask.flagged.len(),
            reference.len()
        )));
    }
    Ok(())
}

pub fn suppress_attention(reference: &AttentionTensor, mask: &ImportanceMask, lambda: f64) -> Result<TargetAttention> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    check_mask(reference, mask)?;
    let mut values = reference.values.clone();
    for (l, mut layer) in values.axis_iter_mut(Axis(0)).enumerate() {
        for (h, mut head) in layer.axis_iter_mut(Axis(0)).enumerate() {
            for (i, mut row) in head.axis_iter_mut(Axis(0)).enumerate() {
                let row = row.as_slice_mut().expect("standard layout");
                reweight_row(row, i + 1, |j| if mask.flagged[j] { 1.0 - lambda } else { 1.0 })
                    .map_err(|_| Error::DegenerateRow { layer: l, head: h, row: i })?;
            }
        }
    }
    Ok(TargetAttention { values, provenance: Provenance::Suppressed })
}

pub fn reinforce_attention(reference: &AttentionTensor, mask: &ImportanceMask, beta: f64) -> Result<TargetAttention> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("beta must be a finite value >= 0, got {beta}")));
    }
    check_mask(reference, mask)?;
    let mut values = reference.values.clone();
    for mut layer in values.axis_iter_mut(Axis(0)) {
        for mut head in layer.axis_iter_mut(Axis(0)) {
            for (i, mut row) in head.axis_iter_mut(Axis(0)).enumerate() {
                let row = row.as_slice_mut().expect("standard layout");
                let _ = reweight_row(row, i + 1, |j| if mask.flagged[j] { 1.0 + beta } else { 1.0 });
            }
        }
    }
    Ok(TargetAttention { values, provenance: Provenance::Reinforced })
}

/// Mean over rows of `Σ_j P_ij ln((P_ij + ε) / (Q_ij + ε))`.
pub fn kl_rows(p: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>, eps: f64) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::ShapeMismatch(format!("KL operands {:?} vs {:?}", p.dim(), q.dim())));
    }
    if p.nrows() == 0 {
        return Ok(0.0);
    }
    let total: f64 =
        p.iter().zip(q.iter()).filter(|(&pv, _)| pv != 0.0).map(|(&pv, &qv)| pv * ((pv + eps) / (qv + eps)).ln()).sum();
    Ok(total / p.nrows() as f64)
}

fn as_rows<'a>(t: &'a ArrayView4<'a, f64>) -> Result<ArrayView2<'a, f64>> {
    let sh = t.shape();
    let rows = sh[0] * sh[1] * sh[2];
    t.view().into_shape_with_order((rows, sh[3])).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

/// KL over every row of two `(L, H, n, n)` tensors. Causal zeros present in
/// both operands contribute nothing, so all `L·H·n` rows are valid.
pub fn kl_rowwise(p: ArrayView4<'_, f64>, q: ArrayView4<'_, f64>, eps: f64) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::ShapeMismatch(format!("KL operands {:?} vs {:?}", p.shape(), q.shape())));
    }
    kl_rows(as_rows(&p)?, as_rows(&q)?, eps)
}

/// `∂/∂P` of [`kl_rowwise`]: `(ln((P+ε)/(Q+ε)) + P/(P+ε)) / rows`.
pub fn kl_rowwise_grad_p(p: ArrayView4<'_, f64>, q: ArrayView4<'_, f64>, eps: f64) -> Result<Array4<f64>> {
    if p.shape() != q.shape() {
        return Err(Error::ShapeMismatch(format!("KL operands {:?} vs {:?}", p.shape(), q.shape())));
    }
    let sh = p.shape();
    let rows = (sh[0] * sh[1] * sh[2]) as f64;
    let mut g = p.to_owned();
    g.zip_mut_with(&q, |pv, &qv| {
        *pv = (((*pv + eps) / (qv + eps)).ln() + *pv / (*pv + eps)) / rows;
    });
    Ok(g)
}

/// `∂/∂Q` of [`kl_rowwise`]: `-P/(Q+ε) / rows`.
pub fn kl_rowwise_grad_q(p: ArrayView4<'_, f64>, q: ArrayView4<'_, f64>, eps: f64) -> Result<Array4<f64>> {
    if p.shape() != q.shape() {
        return Err(Error::ShapeMismatch(format!("KL operands {:?} vs {:?}", p.shape(), q.shape())));
    }
    let sh = p.shape();
    let rows = (sh[0] * sh[1] * sh[2]) as f64;
    let mut g = q.to_owned();
    g.zip_mut_with(&p, |qv, &pv| *qv = -pv / (*qv + eps) / rows);
    Ok(g)
}
