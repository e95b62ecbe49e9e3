//! Exposed all-to-all time when forward and backward passes of neighbouring
//! micro-batches are merged.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct OverlapPair {
    /// All-to-all seconds of the merged forward and backward.
    pub comm: f64,
    /// Compute seconds that can run while the all-to-all is in flight.
    pub window: f64,
    /// Weight-gradient seconds, usable as extra window under the W/D split.
    #[serde(default)]
    pub wgrad: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct OverlapResult {
    pub total_comm: f64,
    pub exposed: f64,
    pub overlap_ratio: f64,
}

/// `endpoints` are the unpaired first-forward and last-backward
/// communications, which stay fully on the critical path.
pub fn overlap_exposed_comm(
    pairs: &[OverlapPair],
    endpoints: &[f64],
    wd_split: bool,
) -> Result<OverlapResult> {
    let bad = |x: f64| !(x >= 0.0) || !x.is_finite();
    if pairs
        .iter()
        .any(|p| bad(p.comm) || bad(p.window) || bad(p.wgrad))
        || endpoints.iter().any(|&e| bad(e))
    {
        return invalid("durations must be finite and nonnegative");
    }
    let mut exposed: f64 = endpoints.iter().sum();
    let mut total = exposed;
    for p in pairs {
        let window = p.window + if wd_split { p.wgrad } else { 0.0 };
        exposed += (p.comm - window).max(0.0);
        total += p.comm;
    }
    let overlap_ratio = if total > 0.0 {
        1.0 - exposed / total
    } else {
        1.0
    };
    Ok(OverlapResult {
        total_comm: total,
        exposed,
        overlap_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(comm: f64, window: f64, wgrad: f64) -> OverlapPair {
        OverlapPair {
            comm,
            window,
            wgrad,
        }
    }

    #[test]
    fn hidden_when_window_large() {
        let r = overlap_exposed_comm(&[p(5.0, 7.0, 0.0)], &[], false).unwrap();
        assert_eq!(r.exposed, 0.0);
    }

    #[test]
    fn wd_split_enlarges_window() {
        let with = overlap_exposed_comm(&[p(5.0, 3.0, 3.0)], &[], true).unwrap();
        let without = overlap_exposed_comm(&[p(5.0, 3.0, 3.0)], &[], false).unwrap();
        assert_eq!(with.exposed, 0.0);
        assert_eq!(without.exposed, 2.0);
    }

    #[test]
    fn endpoints_stay_exposed() {
        let pairs = vec![p(2.0, 3.0, 0.0); 16];
        let r = overlap_exposed_comm(&pairs, &[1.0, 1.0], false).unwrap();
        assert_eq!(r.exposed, 2.0);
        assert!(r.overlap_ratio >= 0.9);
    }

    #[test]
    fn negative_rejected() {
        assert!(overlap_exposed_comm(&[p(-1.0, 0.0, 0.0)], &[], false).is_err());
    }
}
