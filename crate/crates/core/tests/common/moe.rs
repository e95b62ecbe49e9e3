//! Plain-loop reference for routing and experts.

use moelab::moe::experts::{Activation, Expert, ExpertParams};
use moelab::moe::router::ScoreFn;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0) * scale)
}

pub fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Silu => x / (1.0 + (-x).exp()),
        Activation::Relu => x.max(0.0),
        Activation::Gelu => {
            0.5 * x
                * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
        }
    }
}

pub fn matvec(w: &Array2<f64>, x: &[f64]) -> Vec<f64> {
    (0..w.nrows())
        .map(|i| (0..w.ncols()).map(|j| w[[i, j]] * x[j]).sum())
        .collect()
}

pub fn reference_expert(e: &Expert, a: Activation, x: &[f64]) -> Vec<f64> {
    let u = matvec(&e.w1, x);
    let hidden: Vec<f64> = match &e.w_gate {
        Some(g) => matvec(g, x)
            .iter()
            .zip(&u)
            .map(|(&g, &u)| act(a, g) * u)
            .collect(),
        None => u.iter().map(|&v| act(a, v)).collect(),
    };
    matvec(&e.w2, &hidden)
}

/// Softmax or normalized-sigmoid scores, top-k with ties to the lower index.
pub fn reference_route(logits: &[f64], f: ScoreFn, k: usize) -> Vec<(usize, f64)> {
    let s: Vec<f64> = match f {
        ScoreFn::Softmax => {
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        }
        ScoreFn::Sigmoid => {
            let e: Vec<f64> = logits.iter().map(|l| 1.0 / (1.0 + (-l).exp())).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        }
    };
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
    idx[..k].iter().map(|&i| (i, s[i])).collect()
}

pub struct Instance {
    pub x: Array2<f64>,
    pub w_r: Array2<f64>,
    pub ex: ExpertParams,
    pub k: usize,
    pub score: ScoreFn,
}

pub fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let (t, h, m, e) = (
        rng.gen_range(1..=12),
        rng.gen_range(1..=8),
        rng.gen_range(1..=8),
        rng.gen_range(1..=8),
    );
    let gated = rng.gen_bool(0.5);
    let experts = (0..e)
        .map(|_| Expert {
            w1: randn(rng, m, h, 1.0),
            w2: randn(rng, h, m, 1.0),
            w_gate: gated.then(|| randn(rng, m, h, 1.0)),
        })
        .collect();
    Instance {
        x: randn(rng, t, h, 2.0),
        w_r: randn(rng, h, e, 1.0),
        ex: ExpertParams {
            experts,
            activation: [Activation::Silu, Activation::Relu, Activation::Gelu][rng.gen_range(0..3)],
        },
        k: rng.gen_range(1..=e),
        score: if rng.gen_bool(0.5) {
            ScoreFn::Softmax
        } else {
            ScoreFn::Sigmoid
        },
    }
}

pub fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}
