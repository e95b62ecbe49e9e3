//! Scaling recipes, quantized tensors and the quantize/dequantize pair.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::format::FloatFormat;
use super::rht::{rht, DEFAULT_BLOCK};
use crate::error::{invalid, Error, Result};
use crate::model::PrecisionRecipe;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    #[default]
    Activation,
    Weight,
    Gradient,
}

fn default_hadamard() -> usize {
    DEFAULT_BLOCK
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct Recipe {
    pub precision: PrecisionRecipe,
    #[serde(default)]
    pub role: TensorRole,
    #[serde(default)]
    pub rht: bool,
    #[serde(default)]
    pub stochastic_rounding: bool,
    #[serde(default)]
    pub two_d_weight_scaling: bool,
    /// Grouped (per-expert) GEMM path; raises the token alignment to 128.
    #[serde(default)]
    pub grouped: bool,
    #[serde(default = "default_hadamard")]
    pub hadamard_block: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Recipe {
    pub fn new(precision: PrecisionRecipe, role: TensorRole) -> Recipe {
        Recipe {
            precision,
            role,
            rht: false,
            stochastic_rounding: false,
            two_d_weight_scaling: false,
            grouped: false,
            hadamard_block: DEFAULT_BLOCK,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mech = self.rht || self.stochastic_rounding || self.two_d_weight_scaling;
        if mech && self.precision != PrecisionRecipe::Nvfp4 {
            return invalid("rht, stochastic rounding and 2D weight scaling are NVFP4-only");
        }
        if self.precision == PrecisionRecipe::Bf16 {
            return invalid("BF16 is not a quantized recipe");
        }
        if self.stochastic_rounding && self.seed.is_none() {
            return invalid("stochastic rounding requires a seed");
        }
        if self.rht && !self.hadamard_block.is_power_of_two() {
            return invalid(format!(
                "hadamard block {} is not a power of two",
                self.hadamard_block
            ));
        }
        Ok(())
    }

    /// Element formats for the forward operands and for gradients.
    pub fn format_pair(&self) -> (FloatFormat, FloatFormat) {
        match self.precision {
            PrecisionRecipe::Fp8Tensor => (FloatFormat::E4M3, FloatFormat::E5M2),
            PrecisionRecipe::Nvfp4 => (FloatFormat::E2M1, FloatFormat::E2M1),
            _ => (FloatFormat::E4M3, FloatFormat::E4M3),
        }
    }

    pub fn element_format(&self) -> FloatFormat {
        let (f, g) = self.format_pair();
        if self.role == TensorRole::Gradient {
            g
        } else {
            f
        }
    }

    pub fn geometry(&self) -> BlockGeometry {
        let b = |rows, cols| BlockGeometry::Block { rows, cols };
        match (self.precision, self.role) {
            (PrecisionRecipe::Fp8Block, TensorRole::Weight) => b(128, 128),
            (PrecisionRecipe::Fp8Block, _) => b(1, 128),
            (PrecisionRecipe::Mxfp8, _) => b(1, 32),
            (PrecisionRecipe::Nvfp4, TensorRole::Weight) if self.two_d_weight_scaling => b(16, 16),
            (PrecisionRecipe::Nvfp4, _) => b(1, 16),
            _ => BlockGeometry::WholeTensor,
        }
    }

    /// Per-expert token-count multiple required before a GEMM.
    pub fn alignment_multiple(&self) -> usize {
        match self.precision {
            PrecisionRecipe::Bf16 => 1,
            _ if self.grouped => 128,
            PrecisionRecipe::Fp8Tensor | PrecisionRecipe::Fp8Block => 16,
            PrecisionRecipe::Mxfp8 | PrecisionRecipe::Nvfp4 => 32,
        }
    }

    fn needs_columnwise(&self) -> bool {
        self.precision == PrecisionRecipe::Mxfp8 && self.role != TensorRole::Gradient
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockGeometry {
    WholeTensor,
    Block { rows: usize, cols: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct RhtMeta {
    pub block: usize,
    pub seed: u64,
}

/// Codes are row-major magnitudes-with-sign per [`FloatFormat`]. Scales are
/// stored unswizzled; `scale_layout` records what a GEMM kernel would expect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct QuantTensor {
    pub recipe: Recipe,
    pub element_format: FloatFormat,
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<u8>,
    pub geometry: BlockGeometry,
    /// One FP32 scale per row group (a single group unless grouped).
    pub tensor_scales: Vec<f32>,
    /// Row offsets delimiting the groups, `tensor_scales.len() + 1` entries.
    pub group_offsets: Vec<usize>,
    /// Decoded per-block scales, row-major over blocks.
    pub block_scales: Vec<f32>,
    pub block_scale_format: Option<FloatFormat>,
    pub block_scale_codes: Vec<u8>,
    /// The payload holds the (possibly rotated) transpose of the input.
    pub transposed: bool,
    pub rht: Option<RhtMeta>,
    pub scale_layout: Option<String>,
    pub columnwise: Option<Box<QuantTensor>>,
}

impl QuantTensor {
    pub fn block_grid(&self) -> (usize, usize, usize, usize) {
        grid(self.geometry, self.rows, self.cols)
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.codes.len() != self.rows * self.cols {
            return invalid("code count does not match shape");
        }
        if self.recipe.geometry() != self.geometry {
            return invalid("block geometry does not match recipe");
        }
        if self
            .tensor_scales
            .iter()
            .chain(&self.block_scales)
            .any(|s| !(*s > 0.0))
        {
            return invalid("scales must be positive");
        }
        if self.block_scale_format == Some(FloatFormat::E8M0)
            && self.block_scales.iter().any(|s| s.log2().fract() != 0.0)
        {
            return invalid("E8M0 scale is not a power of two");
        }
        Ok(())
    }
}

/// (block rows, block cols, grid rows, grid cols).
pub(crate) fn grid(g: BlockGeometry, rows: usize, cols: usize) -> (usize, usize, usize, usize) {
    match g {
        BlockGeometry::WholeTensor => (rows.max(1), cols.max(1), 1, 1),
        BlockGeometry::Block { rows: br, cols: bc } => {
            (br, bc, rows.div_ceil(br), cols.div_ceil(bc))
        }
    }
}

/// Maxima of |x| at every scaling level of a recipe.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Amax {
    /// Per row group; used by per-tensor FP8 and the NVFP4 second level.
    pub tensor: Vec<f64>,
    pub blocks: Vec<f64>,
}

impl Amax {
    pub fn zeros(recipe: &Recipe, rows: usize, cols: usize, groups: usize) -> Amax {
        let (_, _, gr, gc) = grid(recipe.geometry(), rows, cols);
        let blocks = if recipe.geometry() == BlockGeometry::WholeTensor {
            0
        } else {
            gr * gc
        };
        Amax {
            tensor: vec![0.0; groups],
            blocks: vec![0.0; blocks],
        }
    }

    pub fn observe(
        &mut self,
        recipe: &Recipe,
        cols: usize,
        groups: &[usize],
        r: usize,
        c: usize,
        v: f64,
    ) {
        let a = v.abs();
        let g = group_of(groups, r);
        self.tensor[g] = self.tensor[g].max(a);
        if !self.blocks.is_empty() {
            let (br, bc, _, gc) = grid(recipe.geometry(), 0, cols);
            let i = (r / br) * gc + c / bc;
            self.blocks[i] = self.blocks[i].max(a);
        }
    }

    pub fn merge_max(&mut self, other: &Amax) {
        for (a, b) in self.tensor.iter_mut().zip(&other.tensor) {
            *a = a.max(*b);
        }
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            *a = a.max(*b);
        }
    }
}

fn group_of(groups: &[usize], r: usize) -> usize {
    groups
        .partition_point(|&o| o <= r)
        .saturating_sub(1)
        .min(groups.len().saturating_sub(2))
}

/// E8M0 scale: smallest power of two with amax / s ≤ 448.
pub fn mxfp8_scale(block_amax: f64) -> (u8, f64) {
    let max = FloatFormat::E4M3.max_finite();
    for code in 0u8..=254 {
        let s = FloatFormat::E8M0.decode(code);
        if block_amax <= max * s {
            return (code, s);
        }
    }
    (254, FloatFormat::E8M0.decode(254))
}

fn fp32_scale(amax: f64, fmt_max: f64) -> f32 {
    if amax > 0.0 {
        let s = (amax / fmt_max) as f32;
        if s > 0.0 {
            return s;
        }
    }
    1.0
}

/// Scales derived from amaxes; shared by quantize and the distributed cast.
#[derive(Debug, Clone)]
pub(crate) struct Scales {
    pub tensor: Vec<f32>,
    pub blocks: Vec<f32>,
    pub block_codes: Vec<u8>,
    pub block_format: Option<FloatFormat>,
}

pub(crate) fn scales_from_amax(recipe: &Recipe, a: &Amax) -> Scales {
    let fmt_max = recipe.element_format().max_finite();
    match recipe.precision {
        PrecisionRecipe::Fp8Tensor => Scales {
            tensor: a.tensor.iter().map(|&m| fp32_scale(m, fmt_max)).collect(),
            blocks: vec![],
            block_codes: vec![],
            block_format: None,
        },
        PrecisionRecipe::Fp8Block => Scales {
            tensor: vec![],
            blocks: a.blocks.iter().map(|&m| fp32_scale(m, fmt_max)).collect(),
            block_codes: vec![],
            block_format: None,
        },
        PrecisionRecipe::Mxfp8 => {
            let (codes, vals): (Vec<u8>, Vec<f32>) = a
                .blocks
                .iter()
                .map(|&m| {
                    let (c, s) = mxfp8_scale(m);
                    (c, s as f32)
                })
                .unzip();
            Scales {
                tensor: vec![],
                blocks: vals,
                block_codes: codes,
                block_format: Some(FloatFormat::E8M0),
            }
        }
        PrecisionRecipe::Nvfp4 | PrecisionRecipe::Bf16 => {
            let e4 = FloatFormat::E4M3;
            let tensor: Vec<f32> = a
                .tensor
                .iter()
                .map(|&m| fp32_scale(m, fmt_max * e4.max_finite()))
                .collect();
            // Block scales are relative to the group's tensor scale; the
            // caller resolves which group a block belongs to.
            Scales {
                tensor,
                blocks: vec![],
                block_codes: vec![],
                block_format: Some(e4),
            }
        }
    }
}

/// NVFP4 block scale for a block whose rows fall in group `g`.
fn nvfp4_block_scale(block_amax: f64, tensor_scale: f32) -> (u8, f32) {
    let e4 = FloatFormat::E4M3;
    let target = block_amax / FloatFormat::E2M1.max_finite() / tensor_scale as f64;
    let mut code = e4.encode(target);
    // A nonzero block never gets a zero scale.
    if code == 0 {
        code = 1;
    }
    (code, e4.decode(code) as f32)
}

pub(crate) fn finish_nvfp4_scales(
    recipe: &Recipe,
    s: &mut Scales,
    a: &Amax,
    rows: usize,
    cols: usize,
    groups: &[usize],
) {
    if recipe.precision != PrecisionRecipe::Nvfp4 {
        return;
    }
    let (br, _, _, gc) = grid(recipe.geometry(), rows, cols);
    for (i, &m) in a.blocks.iter().enumerate() {
        let g = group_of(groups, (i / gc) * br);
        let (c, v) = nvfp4_block_scale(m, s.tensor[g]);
        s.block_codes.push(c);
        s.blocks.push(v);
    }
}

/// Total dequantization scale for element (r, c).
pub(crate) fn element_scale(
    recipe: &Recipe,
    s: &Scales,
    cols: usize,
    groups: &[usize],
    r: usize,
    c: usize,
) -> f64 {
    let block = || {
        let (br, bc, _, gc) = grid(recipe.geometry(), 0, cols);
        s.blocks[(r / br) * gc + c / bc] as f64
    };
    match recipe.precision {
        PrecisionRecipe::Fp8Tensor => s.tensor[group_of(groups, r)] as f64,
        PrecisionRecipe::Nvfp4 => block() * s.tensor[group_of(groups, r)] as f64,
        _ => block(),
    }
}

fn check_finite(x: &Array2<f64>) -> Result<()> {
    if let Some(((r, c), v)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return invalid(format!("non-finite input {v} at ({r}, {c})"));
    }
    Ok(())
}

fn encode_all(recipe: &Recipe, x: &Array2<f64>, s: &Scales, groups: &[usize]) -> Result<Vec<u8>> {
    let fmt = recipe.element_format();
    let cols = x.ncols();
    let mut rng = match (recipe.stochastic_rounding, recipe.seed) {
        (true, Some(seed)) => Some(ChaCha8Rng::seed_from_u64(seed)),
        (true, None) => return invalid("stochastic rounding requires a seed"),
        _ => None,
    };
    Ok(x.indexed_iter()
        .map(|((r, c), &v)| {
            let y = v / element_scale(recipe, s, cols, groups, r, c);
            match rng.as_mut() {
                Some(rng) => fmt.encode_stochastic(y, rng),
                None => fmt.encode(y),
            }
        })
        .collect())
}

pub(crate) fn assemble(
    recipe: &Recipe,
    rows: usize,
    cols: usize,
    codes: Vec<u8>,
    s: Scales,
    groups: Vec<usize>,
) -> QuantTensor {
    let nvfp4 = recipe.precision == PrecisionRecipe::Nvfp4;
    let mx = recipe.precision == PrecisionRecipe::Mxfp8;
    QuantTensor {
        recipe: recipe.clone(),
        element_format: recipe.element_format(),
        rows,
        cols,
        codes,
        geometry: recipe.geometry(),
        tensor_scales: s.tensor,
        group_offsets: if nvfp4 || recipe.precision == PrecisionRecipe::Fp8Tensor {
            groups
        } else {
            vec![]
        },
        block_scales: s.blocks,
        block_scale_format: s.block_format,
        block_scale_codes: s.block_codes,
        transposed: false,
        rht: None,
        scale_layout: (nvfp4 || mx).then(|| {
            "unswizzled row-major; GEMM kernels require a 128x4-aligned swizzled scale layout"
                .into()
        }),
        columnwise: None,
    }
}

fn quantize_groups(x: &Array2<f64>, recipe: &Recipe, groups: Vec<usize>) -> Result<QuantTensor> {
    let (rows, cols) = x.dim();
    let mut a = Amax::zeros(recipe, rows, cols, groups.len() - 1);
    for ((r, c), &v) in x.indexed_iter() {
        a.observe(recipe, cols, &groups, r, c, v);
    }
    let mut s = scales_from_amax(recipe, &a);
    finish_nvfp4_scales(recipe, &mut s, &a, rows, cols, &groups);
    let codes = encode_all(recipe, x, &s, &groups)?;
    Ok(assemble(recipe, rows, cols, codes, s, groups))
}

fn prepare(x: &Array2<f64>, recipe: &Recipe) -> Result<(Array2<f64>, bool, Option<RhtMeta>)> {
    recipe.validate()?;
    check_finite(x)?;
    if recipe.precision == PrecisionRecipe::Nvfp4 && !x.ncols().is_multiple_of(16) && !recipe.rht {
        return invalid(format!(
            "row length {} is not a multiple of 16; pad first",
            x.ncols()
        ));
    }
    if recipe.rht {
        let meta = RhtMeta {
            block: recipe.hadamard_block,
            seed: recipe.seed.unwrap_or(0),
        };
        let t = x.t().as_standard_layout().to_owned();
        if !t.ncols().is_multiple_of(16) {
            return invalid(format!(
                "token dimension {} is not a multiple of 16; pad first",
                t.ncols()
            ));
        }
        return Ok((rht(&t, meta.block, meta.seed)?, true, Some(meta)));
    }
    Ok((x.as_standard_layout().to_owned(), false, None))
}

/// Quantize `x` under `recipe`. With `recipe.rht` set this is the
/// weight-gradient path: the payload is the rotated transpose of `x`.
pub fn quantize(x: &Array2<f64>, recipe: &Recipe) -> Result<QuantTensor> {
    let (y, transposed, meta) = prepare(x, recipe)?;
    let mut q = quantize_groups(&y, recipe, vec![0, y.nrows()])?;
    q.transposed = transposed;
    q.rht = meta;
    if recipe.needs_columnwise() {
        let t = x.t().as_standard_layout().to_owned();
        let mut cw = quantize_groups(&t, recipe, vec![0, t.nrows()])?;
        cw.transposed = true;
        q.columnwise = Some(Box::new(cw));
    }
    Ok(q)
}

/// Quantize a tensor whose rows are split into consecutive expert slices of
/// `row_counts` rows, with one second-level (tensor) scale per expert.
pub fn quantize_grouped(
    x: &Array2<f64>,
    row_counts: &[usize],
    recipe: &Recipe,
) -> Result<QuantTensor> {
    if recipe.rht || recipe.needs_columnwise() {
        return invalid("grouped quantization covers the row-wise, unrotated path only");
    }
    if !matches!(
        recipe.precision,
        PrecisionRecipe::Nvfp4 | PrecisionRecipe::Fp8Tensor
    ) {
        return invalid("per-expert tensor scales apply to NVFP4 and per-tensor FP8");
    }
    let (y, _, _) = prepare(x, recipe)?;
    if row_counts.iter().sum::<usize>() != y.nrows() || row_counts.is_empty() {
        return invalid("row counts must sum to the row count");
    }
    let (br, _, _, _) = grid(recipe.geometry(), 1, 1);
    if br > 1 && row_counts.iter().any(|c| c % br != 0) {
        return invalid(format!(
            "expert slices must be multiples of {br} rows for 2D blocks"
        ));
    }
    let mut groups = vec![0];
    for c in row_counts {
        groups.push(groups.last().unwrap() + c);
    }
    quantize_groups(&y, recipe, groups)
}

pub fn dequantize(q: &QuantTensor) -> Result<Array2<f64>> {
    if q.codes.len() != q.rows * q.cols {
        return Err(Error::InvalidArgument(
            "code count does not match shape".into(),
        ));
    }
    let s = Scales {
        tensor: q.tensor_scales.clone(),
        blocks: q.block_scales.clone(),
        block_codes: vec![],
        block_format: None,
    };
    let groups = if q.group_offsets.is_empty() {
        vec![0, q.rows]
    } else {
        q.group_offsets.clone()
    };
    Ok(Array2::from_shape_fn((q.rows, q.cols), |(r, c)| {
        q.element_format.decode(q.codes[r * q.cols + c])
            * element_scale(&q.recipe, &s, q.cols, &groups, r, c)
    }))
}

/// Two-level NVFP4 quantization; the transpose path applies the RHT first.
pub fn nvfp4_quantize(
    x: &Array2<f64>,
    transpose_path: bool,
    stochastic: bool,
    seed: Option<u64>,
) -> Result<QuantTensor> {
    let mut r = Recipe::new(
        PrecisionRecipe::Nvfp4,
        if transpose_path {
            TensorRole::Gradient
        } else {
            TensorRole::Activation
        },
    );
    r.rht = transpose_path;
    r.stochastic_rounding = stochastic;
    r.seed = seed;
    quantize(x, &r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_x(seed: u64, r: usize, c: usize, scale: f64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-scale..scale))
    }

    #[test]
    fn per_tensor_representable_roundtrip() {
        let x = Array2::from_shape_vec((1, 3), vec![448.0, -224.0, 112.0]).unwrap();
        let q = quantize(
            &x,
            &Recipe::new(PrecisionRecipe::Fp8Tensor, TensorRole::Activation),
        )
        .unwrap();
        assert_eq!(q.tensor_scales, vec![1.0]);
        assert_eq!(dequantize(&q).unwrap(), x);
    }

    #[test]
    fn zeros_give_zero_codes() {
        for p in [
            PrecisionRecipe::Fp8Tensor,
            PrecisionRecipe::Fp8Block,
            PrecisionRecipe::Mxfp8,
            PrecisionRecipe::Nvfp4,
        ] {
            let q = quantize(
                &Array2::zeros((3, 64)),
                &Recipe::new(p, TensorRole::Activation),
            )
            .unwrap();
            assert!(q.codes.iter().all(|&c| c == 0));
            q.check_invariants().unwrap();
        }
    }

    #[test]
    fn scale_invariance() {
        let x = rand_x(1, 7, 33, 5.0);
        for role in [TensorRole::Activation, TensorRole::Gradient] {
            let r = Recipe::new(PrecisionRecipe::Fp8Tensor, role);
            let a = quantize(&x, &r).unwrap();
            let b = quantize(&x.mapv(|v| v * 2.0), &r).unwrap();
            assert_eq!(a.codes, b.codes);
            assert_eq!(a.tensor_scales[0] * 2.0, b.tensor_scales[0]);
        }
    }

    #[test]
    fn block_isolation() {
        let x = rand_x(2, 4, 384, 1.0);
        let r = Recipe::new(PrecisionRecipe::Fp8Block, TensorRole::Activation);
        let a = quantize(&x, &r).unwrap();
        let mut y = x.clone();
        for c in 128..256 {
            y[[2, c]] *= 2.0;
        }
        let b = quantize(&y, &r).unwrap();
        let (_, _, _, gc) = a.block_grid();
        for i in 0..a.block_scales.len() {
            if i == 2 * gc + 1 {
                assert_eq!(a.block_scales[i] * 2.0, b.block_scales[i]);
            } else {
                assert_eq!(a.block_scales[i], b.block_scales[i]);
            }
        }
        assert_eq!(a.codes, b.codes);
    }

    #[test]
    fn mxfp8_scales() {
        assert_eq!(mxfp8_scale(448.0).1, 1.0);
        assert_eq!(mxfp8_scale(896.0).1, 2.0);
        assert_eq!(mxfp8_scale(449.0).1, 2.0);
        assert_eq!(mxfp8_scale(0.0), (0, 2f64.powi(-127)));
        let q = quantize(
            &rand_x(3, 5, 64, 100.0),
            &Recipe::new(PrecisionRecipe::Mxfp8, TensorRole::Weight),
        )
        .unwrap();
        q.check_invariants().unwrap();
        let cw = q.columnwise.as_ref().unwrap();
        assert_eq!((cw.rows, cw.cols), (64, 5));
    }

    #[test]
    fn nvfp4_representable_roundtrip() {
        // Tensor amax 6·448 makes the FP32 scale exactly 1.
        let grid = FloatFormat::E2M1.table();
        let mut x = Array2::zeros((2, 32));
        for c in 0..16 {
            x[[0, c]] = grid[c % 8] * 448.0 * if c % 3 == 0 { -1.0 } else { 1.0 };
            x[[1, c + 16]] = grid[c % 8] * 0.5;
        }
        x[[0, 7]] = 6.0 * 448.0;
        x[[1, 23]] = 3.0;
        let q = nvfp4_quantize(&x, false, false, None).unwrap();
        assert_eq!(q.tensor_scales, vec![1.0]);
        assert_eq!(dequantize(&q).unwrap(), x);
    }

    #[test]
    fn nvfp4_degenerate_hadamard_is_plain() {
        let x = rand_x(4, 32, 16, 2.0);
        let mut r = Recipe::new(PrecisionRecipe::Nvfp4, TensorRole::Gradient);
        r.rht = true;
        r.hadamard_block = 1;
        r.seed = Some(9);
        let rot = dequantize(&quantize(&x, &r).unwrap()).unwrap();
        let d = super::super::rht::signs(1, 9)[0];
        let plain = quantize(
            &x.t().to_owned().mapv(|v| v * d),
            &Recipe::new(PrecisionRecipe::Nvfp4, TensorRole::Gradient),
        )
        .unwrap();
        assert_eq!(rot, dequantize(&plain).unwrap());
    }

    #[test]
    fn stochastic_needs_seed_and_mechanisms_need_nvfp4() {
        assert!(nvfp4_quantize(&Array2::zeros((1, 16)), false, true, None).is_err());
        let mut r = Recipe::new(PrecisionRecipe::Mxfp8, TensorRole::Activation);
        r.rht = true;
        assert!(quantize(&Array2::zeros((1, 32)), &r).is_err());
        let x = Array2::from_elem((1, 16), f64::NAN);
        assert!(nvfp4_quantize(&x, false, false, None).is_err());
    }

    #[test]
    fn grouped_matches_slices() {
        let mut x = rand_x(5, 48, 32, 1.0);
        for c in 0..32 {
            x[[20, c]] *= 50.0;
        }
        let r = Recipe::new(PrecisionRecipe::Nvfp4, TensorRole::Activation);
        let g = dequantize(&quantize_grouped(&x, &[16, 32], &r).unwrap()).unwrap();
        let a = dequantize(&quantize(&x.slice(ndarray::s![0..16, ..]).to_owned(), &r).unwrap())
            .unwrap();
        let b = dequantize(&quantize(&x.slice(ndarray::s![16..48, ..]).to_owned(), &r).unwrap())
            .unwrap();
        assert_eq!(g.slice(ndarray::s![0..16, ..]), a);
        assert_eq!(g.slice(ndarray::s![16..48, ..]), b);
    }

    #[test]
    fn json_roundtrip() {
        let q = quantize(
            &rand_x(6, 3, 32, 1.0),
            &Recipe::new(PrecisionRecipe::Mxfp8, TensorRole::Activation),
        )
        .unwrap();
        let s = serde_json::to_string(&q).unwrap();
        let back: QuantTensor = serde_json::from_str(&s).unwrap();
        assert_eq!(back, q);
    }
}
