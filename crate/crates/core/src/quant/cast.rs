//! Low-precision casting of sharded master weights, and token alignment.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::tensor::*;
use crate::error::{invalid, Error, Result};
use crate::model::PrecisionRecipe;

/// A contiguous run of the row-major flattened weight owned by one rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Fragment {
    pub rank: usize,
    pub offset: usize,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum SyncStep {
    /// A rank reduces its fragment into per-scale-unit maxima; units it does
    /// not touch stay at 0.
    LocalAmax {
        rank: usize,
        elements: usize,
        units_touched: usize,
    },
    /// Max all-reduce over every rank's unit maxima.
    AllReduceMax { ranks: usize, units: usize },
    /// A rank casts its own elements with the global scales.
    PartialCast { rank: usize, elements: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CastResult {
    pub tensor: QuantTensor,
    pub trace: Vec<SyncStep>,
}

fn check_tiling(frags: &[Fragment], n: usize) -> Result<()> {
    let mut spans: Vec<(usize, usize)> = frags
        .iter()
        .filter(|f| !f.values.is_empty())
        .map(|f| (f.offset, f.offset + f.values.len()))
        .collect();
    spans.sort();
    let mut end = 0;
    for (s, e) in spans {
        if s < end {
            return Err(Error::OverlappingFragments(s));
        }
        if s > end {
            return invalid(format!(
                "elements {end}..{s} are not covered by any fragment"
            ));
        }
        end = e;
    }
    if end != n {
        return invalid(format!("fragments cover {end} of {n} elements"));
    }
    Ok(())
}

/// Quantize a weight held as FP32 fragments across ranks: local amax per
/// scaling unit, a max all-reduce, then each rank casts its own slice.
pub fn primary_weight_cast(
    frags: &[Fragment],
    rows: usize,
    cols: usize,
    recipe: &Recipe,
) -> Result<CastResult> {
    recipe.validate()?;
    if recipe.rht || recipe.stochastic_rounding {
        return invalid("the primary weight cast is deterministic and unrotated");
    }
    if recipe.precision == PrecisionRecipe::Nvfp4 && !cols.is_multiple_of(16) {
        return invalid(format!(
            "row length {cols} is not a multiple of 16; pad first"
        ));
    }
    check_tiling(frags, rows * cols)?;
    if let Some(f) = frags
        .iter()
        .find(|f| f.values.iter().any(|v| !v.is_finite()))
    {
        return invalid(format!("non-finite master weight on rank {}", f.rank));
    }
    let groups = [0, rows];
    let mut ranks: Vec<usize> = frags.iter().map(|f| f.rank).collect();
    ranks.sort();
    ranks.dedup();

    let mut trace = vec![];
    let mut global = Amax::zeros(recipe, rows, cols, 1);
    for &rank in &ranks {
        let mut local = Amax::zeros(recipe, rows, cols, 1);
        let mut elements = 0;
        let mut touched = std::collections::BTreeSet::new();
        let (br, bc, _, gc) = grid(recipe.geometry(), rows, cols);
        for f in frags.iter().filter(|f| f.rank == rank) {
            for (i, &v) in f.values.iter().enumerate() {
                let (r, c) = ((f.offset + i) / cols, (f.offset + i) % cols);
                local.observe(recipe, cols, &groups, r, c, v as f64);
                touched.insert((r / br) * gc + c / bc);
            }
            elements += f.values.len();
        }
        trace.push(SyncStep::LocalAmax {
            rank,
            elements,
            units_touched: touched.len(),
        });
        global.merge_max(&local);
    }
    trace.push(SyncStep::AllReduceMax {
        ranks: ranks.len(),
        units: global.tensor.len() + global.blocks.len(),
    });

    let mut s = scales_from_amax(recipe, &global);
    finish_nvfp4_scales(recipe, &mut s, &global, rows, cols, &groups);
    let fmt = recipe.element_format();
    let mut codes = vec![0u8; rows * cols];
    for &rank in &ranks {
        let mut elements = 0;
        for f in frags.iter().filter(|f| f.rank == rank) {
            for (i, &v) in f.values.iter().enumerate() {
                let k = f.offset + i;
                let scale = element_scale(recipe, &s, cols, &groups, k / cols, k % cols);
                codes[k] = fmt.encode(v as f64 / scale);
            }
            elements += f.values.len();
        }
        trace.push(SyncStep::PartialCast { rank, elements });
    }
    let tensor = assemble(recipe, rows, cols, codes, s, groups.to_vec());
    Ok(CastResult { tensor, trace })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct Alignment {
    pub counts: Vec<usize>,
    pub multiple: usize,
    /// Scale-factor tile the padded shape must also satisfy, if any.
    pub scale_tile: Option<[usize; 2]>,
}

/// Round every per-expert token count up to the recipe's multiple.
pub fn alignment_pad(counts: &[usize], recipe: &Recipe) -> Alignment {
    let m = recipe.alignment_multiple();
    Alignment {
        counts: counts.iter().map(|c| c.div_ceil(m) * m).collect(),
        multiple: m,
        scale_tile: matches!(
            recipe.precision,
            PrecisionRecipe::Mxfp8 | PrecisionRecipe::Nvfp4
        )
        .then_some([128, 4]),
    }
}
