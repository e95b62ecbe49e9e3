//! Randomised property checks over the MoE numerics, run by `moe-check`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::experts::*;
use super::router::*;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    /// Worst observed error in the check's own metric.
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct MoeCheckReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
}

fn rand_experts(rng: &mut ChaCha8Rng, e: usize, h: usize, m: usize, gated: bool) -> ExpertParams {
    ExpertParams {
        experts: (0..e)
            .map(|_| Expert {
                w1: rand_mat(rng, m, h),
                w2: rand_mat(rng, h, m),
                w_gate: gated.then(|| rand_mat(rng, m, h)),
            })
            .collect(),
        activation: Activation::Silu,
    }
}

fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn result(name: &str, instances: usize, max_error: f64, tolerance: f64) -> CheckResult {
    CheckResult {
        name: name.into(),
        instances,
        max_error,
        tolerance,
        passed: max_error <= tolerance,
    }
}

/// Largest relative elementwise difference between the two combines.
pub fn combine_equivalence(rng: &mut ChaCha8Rng, n: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..n {
        let t = rng.gen_range(1..=64);
        let e = rng.gen_range(1..=16);
        let k = rng.gen_range(1..=e.min(4));
        let h = rng.gen_range(1..=8);
        let m = rng.gen_range(1..=8);
        let x = rand_mat(rng, t, h);
        let w = rand_mat(rng, h, e);
        let gated = rng.gen_bool(0.5);
        let ex = rand_experts(rng, e, h, m, gated);
        let score = if rng.gen_bool(0.5) {
            ScoreFn::Softmax
        } else {
            ScoreFn::Sigmoid
        };
        let d = route(&x, &w, score, k)?;
        let (pm, p) = permute(&x, &d)?;
        let a = combine_standard(&expert_outputs(&pm, &p, &ex)?, &p, &d)?;
        let b = combine_mem_efficient(&pm, &p, &d, &ex)?;
        for (u, v) in a.iter().zip(b.iter()) {
            let rel = (u - v).abs() / u.abs().max(v.abs()).max(1e-300);
            if (u - v).abs() > 1e-15 {
                worst = worst.max(rel);
            }
        }
    }
    Ok(worst)
}

/// Count of dropless decisions whose counts do not sum to T·K.
pub fn dropless_conservation(rng: &mut ChaCha8Rng, n: usize) -> Result<f64> {
    let mut bad = 0;
    for _ in 0..n {
        let t = rng.gen_range(1..=64);
        let e = rng.gen_range(1..=16);
        let k = rng.gen_range(1..=e);
        let h = rng.gen_range(1..=8);
        let d = route(
            &rand_mat(rng, t, h),
            &rand_mat(rng, h, e),
            ScoreFn::Softmax,
            k,
        )?;
        let rows_ok = (0..t).all(|i| d.routing_map.row(i).iter().filter(|&&b| b).count() == k);
        if d.counts.iter().sum::<usize>() != t * k || !rows_ok {
            bad += 1;
        }
    }
    Ok(bad as f64)
}

/// Worst ‖MoE − Dense‖∞ / ‖Dense‖∞ over random upcyclings.
pub fn upcycling_identity(rng: &mut ChaCha8Rng, n: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..n {
        let h = rng.gen_range(2..=8);
        let g = rng.gen_range(1..=4);
        let copies = rng.gen_range(1..=3);
        let f = g * rng.gen_range(1..=4);
        let dense = DenseMlp {
            w1: rand_mat(rng, f, h),
            w2: rand_mat(rng, h, f),
            w_gate: rng.gen_bool(0.5).then(|| rand_mat(rng, f, h)),
            activation: Activation::Silu,
        };
        let up = upcycle(&dense, g, copies, &rand_mat(rng, h, copies))?;
        let x = rand_mat(rng, 16, h);
        let score = if rng.gen_bool(0.5) {
            ScoreFn::Softmax
        } else {
            ScoreFn::Sigmoid
        };
        let a = up.forward(&x, score)?;
        let b = dense.forward(&x);
        worst = worst.max(max_abs(&(&a - &b)) / max_abs(&b).max(1e-300));
    }
    Ok(worst)
}

/// Worst relative gap between the analytic aux-loss gradient and central
/// finite differences.
pub fn aux_grad_check(rng: &mut ChaCha8Rng, n: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < n {
        let t = rng.gen_range(2..=12);
        let e = rng.gen_range(2..=6);
        let k = rng.gen_range(1..=e);
        let h = rng.gen_range(1..=5);
        let x = rand_mat(rng, t, h);
        let w = rand_mat(rng, h, e);
        let score = if rng.gen_bool(0.5) {
            ScoreFn::Softmax
        } else {
            ScoreFn::Sigmoid
        };
        let coeff = 0.01;
        let base = route(&x, &w, score, k)?;
        let g = aux_loss_grad(&x, &w, score, k, coeff)?;
        let eps = 1e-6;
        let mut fd = Array2::zeros(w.dim());
        let mut selection_changed = false;
        for i in 0..h {
            for j in 0..e {
                let mut wp = w.clone();
                wp[[i, j]] += eps;
                let mut wm = w.clone();
                wm[[i, j]] -= eps;
                let dp = route(&x, &wp, score, k)?;
                let dm = route(&x, &wm, score, k)?;
                if dp.routing_map != base.routing_map || dm.routing_map != base.routing_map {
                    selection_changed = true;
                }
                fd[[i, j]] = (aux_loss(&dp, coeff)? - aux_loss(&dm, coeff)?) / (2.0 * eps);
            }
        }
        if selection_changed {
            continue;
        }
        // Gradients that vanish analytically (K = E) are compared on an absolute floor.
        let scale = max_abs(&g).max(max_abs(&fd)).max(1e-6);
        worst = worst.max(max_abs(&(&g - &fd)) / scale);
        done += 1;
    }
    Ok(worst)
}

/// Instances where shifting every bias by a constant changed a selection.
pub fn bias_shift_invariance(rng: &mut ChaCha8Rng, n: usize) -> Result<f64> {
    let mut bad = 0;
    for _ in 0..n {
        let t = rng.gen_range(1..=32);
        let e = rng.gen_range(2..=16);
        let k = rng.gen_range(1..=e);
        let h = rng.gen_range(1..=8);
        let x = rand_mat(rng, t, h);
        let w = rand_mat(rng, h, e);
        // Dyadic values keep the shifted sums exact.
        let bias: Vec<f64> = (0..e)
            .map(|_| rng.gen_range(-64..64) as f64 / 256.0)
            .collect();
        let c = rng.gen_range(-8..8) as f64 / 4.0;
        let shifted: Vec<f64> = bias.iter().map(|b| b + c).collect();
        let opt = |b| RouteOptions {
            bias: Some(b),
            renormalize: false,
        };
        let a = route_with(&x, &w, ScoreFn::Sigmoid, k, &opt(&bias))?;
        let b = route_with(&x, &w, ScoreFn::Sigmoid, k, &opt(&shifted))?;
        if a.routing_map != b.routing_map {
            bad += 1;
        }
    }
    Ok(bad as f64)
}

/// Instances where unpermute(permute(x)) differs from K-fold duplicate sums.
pub fn permute_roundtrip(rng: &mut ChaCha8Rng, n: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..n {
        let t = rng.gen_range(1..=32);
        let e = rng.gen_range(1..=8);
        let k = rng.gen_range(1..=e);
        let h = rng.gen_range(1..=6);
        let x = rand_mat(rng, t, h);
        let d = route(&x, &rand_mat(rng, h, e), ScoreFn::Softmax, k)?;
        let (pm, p) = permute(&x, &d)?;
        let back = unpermute(&pm, &p, t)?;
        // Oracle: each token summed once per selection, in selection order.
        let mut oracle = Array2::zeros((t, h));
        for i in 0..t {
            for j in 0..e {
                if d.routing_map[[i, j]] {
                    let mut r = oracle.row_mut(i);
                    r += &x.row(i);
                }
            }
        }
        worst = worst.max(max_abs(&(&back - &oracle)));
    }
    Ok(worst)
}

pub fn run_checks(seed: u64, instances: usize) -> Result<MoeCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = instances.max(1);
    let checks = vec![
        result(
            "combine_equivalence",
            n,
            combine_equivalence(&mut rng, n)?,
            1e-6,
        ),
        result(
            "dropless_conservation",
            n,
            dropless_conservation(&mut rng, n)?,
            0.0,
        ),
        result(
            "upcycling_identity",
            n,
            upcycling_identity(&mut rng, n)?,
            1e-6,
        ),
        result(
            "aux_loss_gradient",
            n.min(50),
            aux_grad_check(&mut rng, n.min(50))?,
            1e-4,
        ),
        result(
            "bias_shift_invariance",
            n,
            bias_shift_invariance(&mut rng, n)?,
            0.0,
        ),
        result("permute_roundtrip", n, permute_roundtrip(&mut rng, n)?, 0.0),
        result(
            "capacity_example",
            1,
            (capacity(1.0, 128, 2, 8)? as f64 - 32.0).abs(),
            0.0,
        ),
    ];
    let passed = checks.iter().all(|c| c.passed);
    Ok(MoeCheckReport {
        seed,
        checks,
        passed,
    })
}
