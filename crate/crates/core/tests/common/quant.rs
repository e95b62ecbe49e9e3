//! Bit-layout format tables and a scalar reference of each scaling recipe.

use moelab::model::PrecisionRecipe;
use moelab::quant::{FloatFormat, TensorRole};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Non-negative finite values from the bit layout, with whether the
/// mantissa's low bit is clear.
pub fn grid(
    exp_bits: u32,
    man_bits: u32,
    bias: i32,
    top_exp_reserved: bool,
    e4m3_nan: bool,
) -> Vec<(f64, bool)> {
    let mut v = vec![];
    for e in 0..(1u32 << exp_bits) {
        if top_exp_reserved && e == (1 << exp_bits) - 1 {
            continue;
        }
        for m in 0..(1u32 << man_bits) {
            if e4m3_nan && e == (1 << exp_bits) - 1 && m == (1 << man_bits) - 1 {
                continue;
            }
            let frac = m as f64 / (1u32 << man_bits) as f64;
            let val = if e == 0 {
                frac * 2f64.powi(1 - bias)
            } else {
                (1.0 + frac) * 2f64.powi(e as i32 - bias)
            };
            v.push((val, m % 2 == 0));
        }
    }
    v
}

pub fn grid_of(f: FloatFormat) -> Vec<(f64, bool)> {
    match f {
        FloatFormat::E4M3 => grid(4, 3, 7, false, true),
        FloatFormat::E5M2 => grid(5, 2, 15, true, false),
        FloatFormat::E2M1 => grid(2, 1, 1, false, false),
        FloatFormat::E8M0 => unreachable!(),
    }
}

/// Nearest grid value, ties to the even mantissa, saturating.
pub fn nearest(g: &[(f64, bool)], x: f64) -> f64 {
    let a = x.abs();
    let mut best = g[0];
    for &(v, even) in g {
        let (d, db) = ((v - a).abs(), (best.0 - a).abs());
        if d < db || (d == db && even && !best.1) {
            best = (v, even);
        }
    }
    best.0.copysign(x)
}

pub fn amax<'a>(it: impl Iterator<Item = &'a f64>) -> f64 {
    it.fold(0.0f64, |m, v| m.max(v.abs()))
}

pub fn f32_scale(amax: f64, max: f64) -> f64 {
    if amax > 0.0 {
        (amax / max) as f32 as f64
    } else {
        1.0
    }
}

/// Element format and per-element total scale of the row-wise recipes.
pub fn reference_scales(
    x: &Array2<f64>,
    precision: PrecisionRecipe,
    role: TensorRole,
) -> (FloatFormat, Array2<f64>) {
    let (rows, cols) = x.dim();
    let fmt = match (precision, role) {
        (PrecisionRecipe::Nvfp4, _) => FloatFormat::E2M1,
        (PrecisionRecipe::Fp8Tensor, TensorRole::Gradient) => FloatFormat::E5M2,
        _ => FloatFormat::E4M3,
    };
    let g = grid_of(fmt);
    let fmax = g.last().unwrap().0;
    let block = |bw: usize, f: &dyn Fn(f64) -> f64| {
        let mut s = Array2::zeros((rows, cols));
        for r in 0..rows {
            for c0 in (0..cols).step_by(bw) {
                let end = (c0 + bw).min(cols);
                let m = amax(x.slice(ndarray::s![r, c0..end]).iter());
                for c in c0..end {
                    s[[r, c]] = f(m);
                }
            }
        }
        s
    };
    let scale: Array2<f64> = match precision {
        PrecisionRecipe::Fp8Tensor => {
            Array2::from_elem((rows, cols), f32_scale(amax(x.iter()), fmax))
        }
        PrecisionRecipe::Fp8Block => block(128, &|m| f32_scale(m, fmax)),
        PrecisionRecipe::Mxfp8 => block(32, &|m| {
            let mut e = -127;
            while m > fmax * 2f64.powi(e) && e < 127 {
                e += 1;
            }
            2f64.powi(e)
        }),
        PrecisionRecipe::Nvfp4 => {
            let e4 = grid_of(FloatFormat::E4M3);
            let st = f32_scale(amax(x.iter()), 6.0 * 448.0);
            block(16, &|m| {
                let mut sb = nearest(&e4, m / 6.0 / st);
                if sb == 0.0 {
                    sb = e4[1].0;
                }
                (sb as f32 as f64) * st
            })
        }
        PrecisionRecipe::Bf16 => unreachable!(),
    };
    (fmt, scale)
}

/// Scalar reference of dequantize(quantize(x)) for the row-wise recipes.
pub fn reference(x: &Array2<f64>, precision: PrecisionRecipe, role: TensorRole) -> Array2<f64> {
    let (fmt, scale) = reference_scales(x, precision, role);
    let g = grid_of(fmt);
    Array2::from_shape_fn(x.dim(), |(r, c)| {
        nearest(&g, x[[r, c]] / scale[[r, c]]) * scale[[r, c]]
    })
}

pub fn sample(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let base = 2f64.powf(rng.gen_range(-10.0..10.0));
    Array2::from_shape_fn((rows, cols), |_| {
        let v = base * 2f64.powf(rng.gen_range(-8.0..8.0));
        match rng.gen_range(0..10) {
            0 => 0.0,
            1 => -v,
            _ => v * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
        }
    })
}
