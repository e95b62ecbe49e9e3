//! Packed-sequence helpers: per-token loss and serpentine micro-batch order.

use crate::error::{invalid, Result};

/// Mean loss over valid (non-padding) tokens.
pub fn per_token_loss(losses: &[f64], valid: &[bool]) -> Result<f64> {
    if losses.len() != valid.len() {
        return invalid("loss and mask lengths differ");
    }
    let (sum, n) = losses
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .fold((0.0, 0usize), |(s, n), (l, _)| (s + l, n + 1));
    if n == 0 {
        return invalid("no valid tokens");
    }
    Ok(sum / n as f64)
}

/// Attention cost of a bin: Σ S².
pub fn attention_cost(lengths: &[u64]) -> u128 {
    lengths.iter().map(|&s| s as u128 * s as u128).sum()
}

/// Indices ordered small-to-large-to-small: the lighter half ascending,
/// then the heavier half descending. Ties keep input order.
pub fn serpentine_order(costs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..costs.len()).collect();
    idx.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));
    let up = idx.len().div_ceil(2);
    let mut out = idx[..up].to_vec();
    out.extend(idx[up..].iter().rev());
    out
}

/// Σ |c[i+1] − c[i]| along an ordering.
pub fn total_variation(costs: &[f64], order: &[usize]) -> f64 {
    order
        .windows(2)
        .map(|w| (costs[w[1]] - costs[w[0]]).abs())
        .sum()
}
