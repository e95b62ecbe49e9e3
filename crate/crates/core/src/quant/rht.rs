//! Random Hadamard transform applied per contiguous block along rows.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

pub const DEFAULT_BLOCK: usize = 16;

/// Seeded ±1 diagonal shared by every block.
pub fn signs(block: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..block)
        .map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect()
}

/// In-place normalized fast Walsh-Hadamard transform.
fn fwht(v: &mut [f64]) {
    let n = v.len();
    let mut h = 1;
    while h < n {
        for i in (0..n).step_by(2 * h) {
            for j in i..i + h {
                let (a, b) = (v[j], v[j + h]);
                v[j] = a + b;
                v[j + h] = a - b;
            }
        }
        h *= 2;
    }
    let s = 1.0 / (n as f64).sqrt();
    v.iter_mut().for_each(|x| *x *= s);
}

fn check(x: &Array2<f64>, block: usize) -> Result<()> {
    if block == 0 || !block.is_power_of_two() {
        return invalid(format!("hadamard block {block} is not a power of two"));
    }
    if !x.ncols().is_multiple_of(block) {
        return invalid(format!(
            "row length {} not a multiple of block {block}",
            x.ncols()
        ));
    }
    Ok(())
}

/// y = H·D·x for each block of `block` columns.
pub fn rht(x: &Array2<f64>, block: usize, seed: u64) -> Result<Array2<f64>> {
    check(x, block)?;
    let d = signs(block, seed);
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let s = row.as_slice_mut().expect("standard layout");
        for chunk in s.chunks_mut(block) {
            chunk.iter_mut().zip(&d).for_each(|(v, di)| *v *= di);
            fwht(chunk);
        }
    }
    Ok(y)
}

/// x = D·Hᵀ·y; H is symmetric and orthonormal.
pub fn rht_inverse(y: &Array2<f64>, block: usize, seed: u64) -> Result<Array2<f64>> {
    check(y, block)?;
    let d = signs(block, seed);
    let mut x = y.as_standard_layout().to_owned();
    for mut row in x.rows_mut() {
        let s = row.as_slice_mut().expect("standard layout");
        for chunk in s.chunks_mut(block) {
            fwht(chunk);
            chunk.iter_mut().zip(&d).for_each(|(v, di)| *v *= di);
        }
    }
    Ok(x)
}
