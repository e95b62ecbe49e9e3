//! Property suites behind `quant-check`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::cast::{primary_weight_cast, Fragment};
use super::format::FloatFormat;
use super::rht::{rht, rht_inverse};
use super::tensor::*;
use crate::error::Result;
use crate::model::PrecisionRecipe;
use crate::moe::CheckResult;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct QuantCheckReport {
    pub seed: u64,
    pub samples: usize,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
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

/// Worst relative round-trip error over elements whose scaled magnitude is a
/// normal number of the element format.
pub fn roundtrip_error(rng: &mut ChaCha8Rng, recipe: &Recipe, samples: usize) -> Result<f64> {
    let cols = 256;
    let rows = samples.div_ceil(cols).max(1);
    // Log-uniform magnitudes exercise every binade.
    let x = Array2::from_shape_fn((rows, cols), |_| {
        let m = 2f64.powf(rng.gen_range(-8.0..8.0));
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    });
    let q = quantize(&x, recipe)?;
    let y = dequantize(&q)?;
    let fmt = q.element_format;
    let min_normal = 2f64.powi(1 - fmt.bias());
    let mut worst = 0.0f64;
    for ((r, c), &v) in x.indexed_iter() {
        let d = fmt.decode(q.codes[r * q.cols + c]).abs();
        if d == 0.0 {
            continue;
        }
        // |v| over the element's total scale.
        let scaled = v.abs() * d / y[[r, c]].abs();
        if scaled >= min_normal {
            worst = worst.max((y[[r, c]] - v).abs() / v.abs());
        }
    }
    Ok(worst)
}

/// Documented per-format relative bound on normals.
pub fn roundtrip_bound(fmt: FloatFormat) -> f64 {
    match fmt {
        FloatFormat::E4M3 => 2f64.powi(-3) * (1.0 + f64::EPSILON),
        FloatFormat::E5M2 => 2f64.powi(-2) * (1.0 + f64::EPSILON),
        FloatFormat::E2M1 => 0.25,
        FloatFormat::E8M0 => 1.0,
    }
}

/// Mismatching instances for quantize(2x) vs quantize(x) under per-tensor scaling.
pub fn scale_invariance(rng: &mut ChaCha8Rng, n: usize) -> Result<f64> {
    let mut bad = 0;
    for i in 0..n {
        let role = if i % 2 == 0 {
            TensorRole::Activation
        } else {
            TensorRole::Gradient
        };
        let r = Recipe::new(PrecisionRecipe::Fp8Tensor, role);
        let x = Array2::from_shape_fn((rng.gen_range(1..8), rng.gen_range(1..64)), |_| {
            rng.gen_range(-10.0..10.0)
        });
        let f = 2f64.powi(rng.gen_range(-4..5));
        let a = quantize(&x, &r)?;
        let b = quantize(&x.mapv(|v| v * f), &r)?;
        if a.codes != b.codes || a.tensor_scales[0] as f64 * f != b.tensor_scales[0] as f64 {
            bad += 1;
        }
    }
    Ok(bad as f64)
}

/// Instances where rescaling one 1×128 block disturbed another block.
pub fn block_isolation(rng: &mut ChaCha8Rng, n: usize) -> Result<f64> {
    let mut bad = 0;
    let r = Recipe::new(PrecisionRecipe::Fp8Block, TensorRole::Activation);
    for _ in 0..n {
        let (rows, nb) = (rng.gen_range(1..6), rng.gen_range(2..5));
        let x = Array2::from_shape_fn((rows, nb * 128), |_| rng.gen_range(-3.0..3.0));
        let (br, bb) = (rng.gen_range(0..rows), rng.gen_range(0..nb));
        let mut y = x.clone();
        for c in bb * 128..(bb + 1) * 128 {
            y[[br, c]] *= 2.0;
        }
        let a = quantize(&x, &r)?;
        let b = quantize(&y, &r)?;
        let target = br * nb + bb;
        let scales_ok = (0..a.block_scales.len()).all(|i| {
            let want = if i == target {
                a.block_scales[i] * 2.0
            } else {
                a.block_scales[i]
            };
            b.block_scales[i] == want
        });
        if !scales_ok || a.codes != b.codes {
            bad += 1;
        }
    }
    Ok(bad as f64)
}

/// Largest |mean − x| / σ_mean over midpoints between E2M1 neighbours.
pub fn stochastic_unbiasedness(seed: u64, trials: usize) -> Result<f64> {
    let grid = FloatFormat::E2M1.table();
    // One anchor at the E2M1 maximum pins the block scale; the other
    // fifteen lanes sit strictly between neighbours.
    let mut xs = vec![6.0];
    let mut k = 0;
    while xs.len() < 16 {
        let (lo, hi) = (grid[k % 7], grid[k % 7 + 1]);
        let t = [0.5, 0.25, 0.8][k / 7 % 3];
        xs.push(lo + t * (hi - lo));
        k += 1;
    }
    let x = Array2::from_shape_vec((1, 16), xs.clone()).expect("16 lanes");
    let mut sum = [0.0; 16];
    let mut sumsq = [0.0; 16];
    for t in 0..trials {
        let y = dequantize(&nvfp4_quantize(
            &x,
            false,
            true,
            Some(seed.wrapping_add(t as u64)),
        )?)?;
        for j in 0..16 {
            sum[j] += y[[0, j]];
            sumsq[j] += y[[0, j]] * y[[0, j]];
        }
    }
    let n = trials as f64;
    let mut worst = 0.0f64;
    for j in 1..16 {
        let mean = sum[j] / n;
        let var = (sumsq[j] / n - mean * mean).max(0.0);
        let sigma = (var / n).sqrt();
        if sigma > 0.0 {
            worst = worst.max((mean - xs[j]).abs() / sigma);
        }
    }
    Ok(worst)
}

/// Worst of inverse reconstruction error and per-block relative energy drift.
pub fn rht_orthonormality(rng: &mut ChaCha8Rng, n: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..n {
        let block = 1usize << rng.gen_range(0..7);
        let cols = block * rng.gen_range(1..4);
        let x = Array2::from_shape_fn((rng.gen_range(1..6), cols), |_| {
            rng.gen_range(-100.0..100.0)
        });
        let s = rng.gen();
        let y = rht(&x, block, s)?;
        let back = rht_inverse(&y, block, s)?;
        let fwd = rht(&rht_inverse(&x, block, s)?, block, s)?;
        for (a, (b, c)) in x.iter().zip(back.iter().zip(fwd.iter())) {
            worst = worst.max((a - b).abs()).max((a - c).abs());
        }
        for r in 0..x.nrows() {
            for c0 in (0..cols).step_by(block) {
                let e0: f64 = (c0..c0 + block).map(|j| x[[r, j]].powi(2)).sum();
                let e1: f64 = (c0..c0 + block).map(|j| y[[r, j]].powi(2)).sum();
                if e0 > 0.0 {
                    worst = worst.max((e0 - e1).abs() / e0);
                }
            }
        }
    }
    Ok(worst)
}

pub fn cast_recipes() -> Vec<Recipe> {
    let mut nv2d = Recipe::new(PrecisionRecipe::Nvfp4, TensorRole::Weight);
    nv2d.two_d_weight_scaling = true;
    vec![
        Recipe::new(PrecisionRecipe::Fp8Tensor, TensorRole::Weight),
        Recipe::new(PrecisionRecipe::Fp8Block, TensorRole::Weight),
        Recipe::new(PrecisionRecipe::Mxfp8, TensorRole::Weight),
        Recipe::new(PrecisionRecipe::Nvfp4, TensorRole::Weight),
        nv2d,
    ]
}

/// Instances where the sharded cast differs from assemble-then-quantize.
pub fn cast_parity(rng: &mut ChaCha8Rng, n: usize) -> Result<f64> {
    let mut bad = 0;
    for i in 0..n {
        let recipe = &cast_recipes()[i % 5];
        // Shapes larger than one 128×128 block so cuts cross blocks.
        let rows = rng.gen_range(1..=3) * 64 + rng.gen_range(0..2) * 16;
        let cols = 16 * rng.gen_range(8..=20);
        let w: Vec<f32> = (0..rows * cols)
            .map(|_| rng.gen_range(-4.0f32..4.0))
            .collect();
        let ranks = rng.gen_range(1..=8);
        let mut cuts: Vec<usize> = (1..ranks).map(|_| rng.gen_range(0..=w.len())).collect();
        cuts.sort();
        let mut b = vec![0];
        b.extend(cuts);
        b.push(w.len());
        // Fragments are dealt to ranks out of order; some ranks may be empty.
        let frags: Vec<Fragment> = b
            .windows(2)
            .enumerate()
            .map(|(j, p)| Fragment {
                rank: (j * 3) % ranks.max(1),
                offset: p[0],
                values: w[p[0]..p[1]].to_vec(),
            })
            .collect();
        let cast = primary_weight_cast(&frags, rows, cols, recipe)?;
        let x = Array2::from_shape_fn((rows, cols), |(r, c)| w[r * cols + c] as f64);
        let mut oracle = quantize(&x, recipe)?;
        oracle.columnwise = None;
        if cast.tensor != oracle {
            bad += 1;
        }
    }
    Ok(bad as f64)
}

/// Elements where grouped NVFP4 differs from per-expert quantization.
pub fn expert_scale_independence(rng: &mut ChaCha8Rng, n: usize) -> Result<f64> {
    let r = Recipe::new(PrecisionRecipe::Nvfp4, TensorRole::Activation);
    let mut bad = 0;
    for _ in 0..n {
        let experts = rng.gen_range(1..6);
        let counts: Vec<usize> = (0..experts).map(|_| rng.gen_range(0..20)).collect();
        let rows: usize = counts.iter().sum();
        if rows == 0 {
            continue;
        }
        let cols = 16 * rng.gen_range(1..4);
        // Per-expert magnitudes differ by orders of magnitude.
        let mags: Vec<f64> = (0..experts)
            .map(|_| 10f64.powi(rng.gen_range(-3..4)))
            .collect();
        let mut x = Array2::zeros((rows, cols));
        let mut r0 = 0;
        for (e, &c) in counts.iter().enumerate() {
            for r in r0..r0 + c {
                for j in 0..cols {
                    x[[r, j]] = rng.gen_range(-1.0..1.0) * mags[e];
                }
            }
            r0 += c;
        }
        let g = dequantize(&quantize_grouped(&x, &counts, &r)?)?;
        let mut r0 = 0;
        for &c in &counts {
            if c > 0 {
                let part = x.slice(ndarray::s![r0..r0 + c, ..]).to_owned();
                let d = dequantize(&quantize(&part, &r)?)?;
                bad += d
                    .iter()
                    .zip(g.slice(ndarray::s![r0..r0 + c, ..]).iter())
                    .filter(|(a, b)| a != b)
                    .count();
            }
            r0 += c;
        }
    }
    Ok(bad as f64)
}

pub fn alignment_examples() -> f64 {
    let mut g = Recipe::new(PrecisionRecipe::Nvfp4, TensorRole::Activation);
    g.grouped = true;
    let b = Recipe::new(PrecisionRecipe::Fp8Block, TensorRole::Activation);
    let ok = super::alignment_pad(&[5, 3], &g).counts == [128, 128]
        && super::alignment_pad(&[128, 256], &g).counts == [128, 256]
        && super::alignment_pad(&[17], &b).counts == [32];
    if ok {
        0.0
    } else {
        1.0
    }
}

pub fn mxfp8_scale_examples() -> f64 {
    let ok = mxfp8_scale(448.0).1 == 1.0
        && mxfp8_scale(896.0).1 == 2.0
        && mxfp8_scale(0.0).1 == 2f64.powi(-127);
    if ok {
        0.0
    } else {
        1.0
    }
}

/// Round-trip recipes and the element format each exercises.
pub fn roundtrip_recipes() -> Vec<(&'static str, Recipe)> {
    vec![
        (
            "roundtrip_e4m3",
            Recipe::new(PrecisionRecipe::Fp8Tensor, TensorRole::Activation),
        ),
        (
            "roundtrip_e5m2",
            Recipe::new(PrecisionRecipe::Fp8Tensor, TensorRole::Gradient),
        ),
        (
            "roundtrip_e4m3_blockwise",
            Recipe::new(PrecisionRecipe::Fp8Block, TensorRole::Activation),
        ),
        (
            "roundtrip_e4m3_mxfp8",
            Recipe::new(PrecisionRecipe::Mxfp8, TensorRole::Gradient),
        ),
        (
            "roundtrip_e2m1_nvfp4",
            Recipe::new(PrecisionRecipe::Nvfp4, TensorRole::Activation),
        ),
    ]
}

/// `samples` sets the round-trip element count; stochastic rounding uses
/// `samples / 10` trials.
pub fn run_checks(seed: u64, samples: usize) -> Result<QuantCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = samples.max(256);
    let mut checks = vec![];
    for (name, r) in roundtrip_recipes() {
        let bound = roundtrip_bound(r.element_format());
        checks.push(result(
            name,
            samples,
            roundtrip_error(&mut rng, &r, samples)?,
            bound,
        ));
    }
    let n = 50;
    checks.push(result(
        "scale_invariance",
        n,
        scale_invariance(&mut rng, n)?,
        0.0,
    ));
    checks.push(result(
        "block_isolation",
        n,
        block_isolation(&mut rng, n)?,
        0.0,
    ));
    checks.push(result(
        "mxfp8_scale_examples",
        3,
        mxfp8_scale_examples(),
        0.0,
    ));
    let trials = (samples / 10).max(100);
    checks.push(result(
        "stochastic_rounding_unbiased",
        trials,
        stochastic_unbiasedness(seed, trials)?,
        3.0,
    ));
    checks.push(result(
        "rht_orthonormal",
        n,
        rht_orthonormality(&mut rng, n)?,
        1e-6,
    ));
    checks.push(result(
        "primary_weight_cast_parity",
        n,
        cast_parity(&mut rng, n)?,
        0.0,
    ));
    checks.push(result(
        "nvfp4_expert_scale_independence",
        n,
        expert_scale_independence(&mut rng, n)?,
        0.0,
    ));
    checks.push(result("alignment_examples", 3, alignment_examples(), 0.0));
    let passed = checks.iter().all(|c| c.passed);
    Ok(QuantCheckReport {
        seed,
        samples,
        checks,
        passed,
    })
}
