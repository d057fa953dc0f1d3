//! Similarity-separation loss between the syntactic and semantic adjacency
//! matrices. Each row of either matrix is read as logits, softmaxed, and the
//! two resulting distributions are compared with a symmetric KL divergence.
//! The loss falls as the rows move apart.

use candle_core::{Result, Tensor, D};

use crate::params::{masked_log_softmax, masked_softmax};

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// KL(softmax(p) ‖ softmax(q)) for one pair of logit rows.
pub fn row_kl(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    assert_eq!(p_logits.len(), q_logits.len(), "rows differ in length");
    let p = softmax(p_logits);
    let q = softmax(q_logits);
    p.iter()
        .zip(&q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

/// Loss contribution of one row given its symmetric KL.
pub fn row_contribution(symmetric_kl: f64, epsilon: f64) -> f64 {
    (1.0 + 1.0 / (symmetric_kl.abs() + epsilon)).ln()
}

/// Per-row symmetric KL `(B, N)` between row-softmaxed `a_syn` and `a_sem`,
/// both `(B, N, N)`. Softmax runs over real columns only; padded rows give
/// zero.
pub fn symmetric_row_kl(a_syn: &Tensor, a_sem: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let col_mask = mask.unsqueeze(1)?;
    let p = masked_softmax(a_syn, &col_mask)?;
    let q = masked_softmax(a_sem, &col_mask)?;
    let log_p = masked_log_softmax(a_syn, &col_mask)?;
    let log_q = masked_log_softmax(a_sem, &col_mask)?;
    let diff = (log_p - log_q)?;
    // KL(p‖q) + KL(q‖p) = Σ (p − q)(log p − log q)
    ((p - q)? * diff)?
        .sum(D::Minus1)?
        .broadcast_mul(mask)
}

/// Σ over real rows of log(1 + 1/(|sym KL| + ε)), averaged over the batch.
pub fn separation_loss(
    a_syn: &Tensor,
    a_sem: &Tensor,
    mask: &Tensor,
    epsilon: f64,
) -> Result<Tensor> {
    let sym = symmetric_row_kl(a_syn, a_sem, mask)?;
    let per_row = ((sym.abs()? + epsilon)?.recip()? + 1.0)?.log()?;
    per_row.broadcast_mul(mask)?.sum(1)?.mean(0)
}
