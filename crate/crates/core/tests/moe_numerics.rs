//! MoE layer math against a plain-loop reference.

use moelab::moe::experts::{
    combine_mem_efficient, moe_forward, permute, upcycle, Activation, DenseMlp,
};
use moelab::moe::router::{aux_loss, aux_loss_grad, capacity, route, ScoreFn};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::moe::*;

#[test]
fn forward_matches_reference_and_combines_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..1000 {
        let inst = instance(&mut rng);
        let d = route(&inst.x, &inst.w_r, inst.score, inst.k).unwrap();
        let t = inst.x.nrows();
        let h = inst.x.ncols();

        // Dropless conservation.
        assert_eq!(d.counts.iter().sum::<usize>(), t * inst.k);

        let mut want = Array2::zeros((t, h));
        for tok in 0..t {
            let xt: Vec<f64> = inst.x.row(tok).to_vec();
            let logits: Vec<f64> = (0..inst.w_r.ncols())
                .map(|e| (0..h).map(|j| xt[j] * inst.w_r[[j, e]]).sum())
                .collect();
            for (e, p) in reference_route(&logits, inst.score, inst.k) {
                assert!(d.routing_map[[tok, e]]);
                assert!((d.probs[[tok, e]] - p).abs() <= 1e-12);
                for (j, v) in reference_expert(&inst.ex.experts[e], inst.ex.activation, &xt)
                    .iter()
                    .enumerate()
                {
                    want[[tok, j]] += p * v;
                }
            }
        }
        let standard = moe_forward(&inst.x, &d, &inst.ex).unwrap();
        assert!(rel_err(&standard, &want) <= 1e-9);
        let (pm, perm) = permute(&inst.x, &d).unwrap();
        let efficient = combine_mem_efficient(&pm, &perm, &d, &inst.ex).unwrap();
        assert!(rel_err(&efficient, &standard) <= 1e-6);
    }
}

#[test]
fn upcycled_layer_reproduces_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..200 {
        let h = rng.gen_range(1..=8);
        let g = rng.gen_range(1..=4);
        let f = g * rng.gen_range(1..=4);
        let copies = rng.gen_range(1..=3);
        let gated = rng.gen_bool(0.5);
        let dense = DenseMlp {
            w1: randn(&mut rng, f, h, 1.0),
            w2: randn(&mut rng, h, f, 1.0),
            w_gate: gated.then(|| randn(&mut rng, f, h, 1.0)),
            activation: Activation::Silu,
        };
        let t = rng.gen_range(1..=10);
        let x = randn(&mut rng, t, h, 1.0);
        let up = upcycle(&dense, g, copies, &randn(&mut rng, h, copies, 1.0)).unwrap();
        for score in [ScoreFn::Softmax, ScoreFn::Sigmoid] {
            let y = up.forward(&x, score).unwrap();
            let want = dense.forward(&x);
            let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let err = y
                .iter()
                .zip(want.iter())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err <= 1e-6 * scale + 1e-300, "err {err} scale {scale}");
        }
    }
}

#[test]
fn aux_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut checked = 0;
    for _ in 0..100 {
        let (t, h, e) = (
            rng.gen_range(2..=16),
            rng.gen_range(1..=6),
            rng.gen_range(2..=8),
        );
        let k = rng.gen_range(1..=e);
        let score = if rng.gen_bool(0.5) {
            ScoreFn::Softmax
        } else {
            ScoreFn::Sigmoid
        };
        let x = randn(&mut rng, t, h, 1.0);
        let w = randn(&mut rng, h, e, 1.0);
        let coeff = 0.01;
        let base = route(&x, &w, score, k).unwrap();
        let grad = aux_loss_grad(&x, &w, score, k, coeff).unwrap();
        let eps = 1e-6;
        for i in 0..h {
            for j in 0..e {
                let mut wp = w.clone();
                wp[[i, j]] += eps;
                let mut wm = w.clone();
                wm[[i, j]] -= eps;
                let dp = route(&x, &wp, score, k).unwrap();
                let dm = route(&x, &wm, score, k).unwrap();
                // The loss is piecewise smooth in the selection; skip kinks.
                if dp.routing_map != base.routing_map || dm.routing_map != base.routing_map {
                    continue;
                }
                let fd =
                    (aux_loss(&dp, coeff).unwrap() - aux_loss(&dm, coeff).unwrap()) / (2.0 * eps);
                let g = grad[[i, j]];
                assert!(
                    (fd - g).abs() <= 1e-4 * g.abs().max(fd.abs()).max(1e-6),
                    "fd {fd} analytic {g}"
                );
                checked += 1;
            }
        }
    }
    assert!(checked > 1000);
}

#[test]
fn capacity_example() {
    assert_eq!(capacity(1.0, 128, 2, 8).unwrap(), 32);
    assert_eq!(capacity(1.25, 128, 2, 8).unwrap(), 40);
    assert_eq!(capacity(1.0, 3, 1, 2).unwrap(), 2);
}
