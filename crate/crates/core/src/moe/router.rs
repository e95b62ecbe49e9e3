//! Router scoring, top-k selection and load-balancing terms.

use ndarray::{Array1, Array2, ArrayView1};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFn {
    Softmax,
    /// σ(l_i) / Σ_j σ(l_j).
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    /// Number of real tokens; rows past this are filler tokens added by
    /// [`routing_map_pad`].
    pub num_tokens: usize,
    pub num_experts: usize,
    pub top_k: usize,
    /// Routing weights, zero outside the selections.
    pub probs: Array2<f64>,
    pub routing_map: Array2<bool>,
    /// Column sums of `routing_map`.
    pub counts: Vec<usize>,
    /// Full score matrix before selection (real tokens only).
    pub scores: Array2<f64>,
    /// Assignments removed by capacity dropping.
    pub dropped: Array2<bool>,
    /// Zero rows appended per expert by pad-to-capacity.
    pub pad_rows: Vec<usize>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-token scores from one row of logits.
pub fn score_row(logits: ArrayView1<f64>, f: ScoreFn) -> Array1<f64> {
    match f {
        ScoreFn::Softmax => {
            let mx = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let e = logits.mapv(|l| (l - mx).exp());
            let s = e.sum();
            e / s
        }
        ScoreFn::Sigmoid => {
            let s = logits.mapv(sigmoid);
            let t = s.sum();
            s / t
        }
    }
}

/// Indices of the `k` largest values; ties go to the lower index.
pub fn top_k_indices(v: ArrayView1<f64>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

pub fn logits(hidden: &Array2<f64>, w_r: &Array2<f64>) -> Result<Array2<f64>> {
    if hidden.ncols() != w_r.nrows() {
        return invalid(format!(
            "hidden width {} does not match router rows {}",
            hidden.ncols(),
            w_r.nrows()
        ));
    }
    let l = hidden.dot(w_r);
    for ((t, e), v) in l.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFiniteLogit {
                token: t,
                expert: e,
            });
        }
    }
    Ok(l)
}

#[derive(Debug, Clone, Default)]
pub struct RouteOptions<'a> {
    /// Added to logits for selection only; weights use unbiased scores.
    pub bias: Option<&'a [f64]>,
    /// Rescale each token's selected weights to sum to one.
    pub renormalize: bool,
}

pub fn route(
    hidden: &Array2<f64>,
    w_r: &Array2<f64>,
    score: ScoreFn,
    k: usize,
) -> Result<RoutingDecision> {
    route_with(hidden, w_r, score, k, &RouteOptions::default())
}

pub fn route_with(
    hidden: &Array2<f64>,
    w_r: &Array2<f64>,
    score: ScoreFn,
    k: usize,
    opts: &RouteOptions,
) -> Result<RoutingDecision> {
    let e = w_r.ncols();
    if k == 0 || k > e {
        return invalid(format!("top_k {k} must be in 1..={e}"));
    }
    if let Some(b) = opts.bias {
        if b.len() != e {
            return invalid("bias length differs from expert count");
        }
    }
    let l = logits(hidden, w_r)?;
    let t = l.nrows();
    let mut scores = Array2::zeros((t, e));
    let mut probs = Array2::zeros((t, e));
    let mut map = Array2::from_elem((t, e), false);
    for i in 0..t {
        let s = score_row(l.row(i), score);
        let sel = match opts.bias {
            Some(b) => {
                let biased = &s + &ArrayView1::from(b);
                top_k_indices(biased.view(), k)
            }
            None => top_k_indices(s.view(), k),
        };
        let norm = if opts.renormalize {
            sel.iter().map(|&j| s[j]).sum::<f64>()
        } else {
            1.0
        };
        for &j in &sel {
            probs[[i, j]] = s[j] / norm;
            map[[i, j]] = true;
        }
        scores.row_mut(i).assign(&s);
    }
    let counts = (0..e)
        .map(|j| map.column(j).iter().filter(|&&b| b).count())
        .collect();
    Ok(RoutingDecision {
        num_tokens: t,
        num_experts: e,
        top_k: k,
        probs,
        routing_map: map,
        counts,
        scores,
        dropped: Array2::from_elem((t, e), false),
        pad_rows: vec![0; e],
    })
}

/// coeff · E · Σ_i f_i · P_i with f_i the fraction of the T·K assignments
/// that went to expert i and P_i the mean score of expert i.
pub fn aux_loss(d: &RoutingDecision, coeff: f64) -> Result<f64> {
    let t = d.num_tokens;
    if t == 0 {
        return invalid("aux loss needs at least one token");
    }
    let tk = (t * d.top_k) as f64;
    let e = d.num_experts;
    let mut acc = 0.0;
    for i in 0..e {
        let f = d
            .routing_map
            .column(i)
            .iter()
            .take(t)
            .filter(|&&b| b)
            .count() as f64
            / tk;
        let p = d.scores.column(i).sum() / t as f64;
        acc += f * p;
    }
    Ok(coeff * e as f64 * acc)
}

/// Gradient of [`aux_loss`] with respect to the router weights, holding the
/// (piecewise constant) selection fractions fixed.
pub fn aux_loss_grad(
    hidden: &Array2<f64>,
    w_r: &Array2<f64>,
    score: ScoreFn,
    k: usize,
    coeff: f64,
) -> Result<Array2<f64>> {
    let d = route(hidden, w_r, score, k)?;
    let l = logits(hidden, w_r)?;
    let t = d.num_tokens;
    let e = d.num_experts;
    let tk = (t * k) as f64;
    let f: Vec<f64> = (0..e).map(|i| d.counts[i] as f64 / tk).collect();
    // dL/dscore[t, i] is the same for every token.
    let g: Array1<f64> = Array1::from_iter(f.iter().map(|fi| coeff * e as f64 * fi / t as f64));
    let mut dl = Array2::zeros((t, e));
    for i in 0..t {
        let p = d.scores.row(i);
        let gp: f64 = g.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
        match score {
            ScoreFn::Softmax => {
                for j in 0..e {
                    dl[[i, j]] = p[j] * (g[j] - gp);
                }
            }
            ScoreFn::Sigmoid => {
                let s: Vec<f64> = l.row(i).iter().map(|&x| sigmoid(x)).collect();
                let tot: f64 = s.iter().sum();
                for j in 0..e {
                    dl[[i, j]] = s[j] * (1.0 - s[j]) / tot * (g[j] - gp);
                }
            }
        }
    }
    Ok(hidden.t().dot(&dl))
}

/// Sign-rule update: over-loaded experts lose `step`, under-loaded gain it.
pub fn auxfree_bias_update(counts: &[usize], bias: &[f64], step: f64) -> Result<Vec<f64>> {
    if counts.len() != bias.len() {
        return invalid("counts and bias lengths differ");
    }
    if !(step > 0.0) {
        return invalid("step must be positive");
    }
    let total: usize = counts.iter().sum();
    let n = counts.len();
    Ok(counts
        .iter()
        .zip(bias)
        .map(|(&c, &b)| {
            // Compare c against total / n without rounding.
            match (c * n).cmp(&total) {
                std::cmp::Ordering::Greater => b - step,
                std::cmp::Ordering::Less => b + step,
                std::cmp::Ordering::Equal => b,
            }
        })
        .collect())
}

/// ceil(CF · T · K / E).
pub fn capacity(cf: f64, tokens: usize, k: usize, experts: usize) -> Result<usize> {
    if !(cf > 0.0) || experts == 0 {
        return invalid("capacity factor and expert count must be positive");
    }
    let x = cf * (tokens * k) as f64 / experts as f64;
    Ok((x - 1e-9 * x.abs().max(1.0)).ceil().max(0.0) as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CapacityReport {
    pub capacity: usize,
    pub dropped: usize,
    pub effective_counts: Vec<usize>,
}

/// Keep at most `capacity` assignments per expert, preferring higher weights
/// and then lower token index. Dropped assignments fall back to the residual
/// path. With `pad`, every expert is filled to exactly `capacity` rows.
pub fn apply_capacity(
    d: &RoutingDecision,
    cf: f64,
    pad: bool,
) -> Result<(RoutingDecision, CapacityReport)> {
    let cap = capacity(cf, d.num_tokens, d.top_k, d.num_experts)?;
    let mut out = d.clone();
    let mut dropped = 0;
    for j in 0..d.num_experts {
        let mut rows: Vec<usize> = (0..d.routing_map.nrows())
            .filter(|&t| d.routing_map[[t, j]])
            .collect();
        rows.sort_by(|&a, &b| d.probs[[b, j]].total_cmp(&d.probs[[a, j]]).then(a.cmp(&b)));
        for &t in rows.iter().skip(cap) {
            out.routing_map[[t, j]] = false;
            out.probs[[t, j]] = 0.0;
            out.dropped[[t, j]] = true;
            dropped += 1;
        }
        out.counts[j] = rows.len().min(cap);
        out.pad_rows[j] = if pad { cap - out.counts[j] } else { 0 };
    }
    let effective_counts = out
        .counts
        .iter()
        .zip(&out.pad_rows)
        .map(|(c, p)| c + p)
        .collect();
    Ok((
        out,
        CapacityReport {
            capacity: cap,
            dropped,
            effective_counts,
        },
    ))
}

/// Round each expert's count up to `multiple` by routing zero-weight filler
/// tokens to it. `fillers` filler rows are appended; each may be routed to
/// any expert at most once.
pub fn routing_map_pad(
    d: &RoutingDecision,
    multiple: usize,
    fillers: usize,
) -> Result<RoutingDecision> {
    if ![16, 32, 128].contains(&multiple) {
        return invalid(format!(
            "alignment multiple {multiple} not in {{16, 32, 128}}"
        ));
    }
    let e = d.num_experts;
    let need: Vec<usize> = d
        .counts
        .iter()
        .map(|&c| c.div_ceil(multiple) * multiple - c)
        .collect();
    if let Some(&n) = need.iter().max() {
        if n > fillers {
            return Err(Error::Infeasible(format!(
                "padding needs {n} filler tokens, {fillers} available"
            )));
        }
    }
    let rows = d.routing_map.nrows();
    let mut map = Array2::from_elem((rows + fillers, e), false);
    let mut probs = Array2::zeros((rows + fillers, e));
    let mut dropped = Array2::from_elem((rows + fillers, e), false);
    map.slice_mut(ndarray::s![..rows, ..])
        .assign(&d.routing_map);
    probs.slice_mut(ndarray::s![..rows, ..]).assign(&d.probs);
    dropped
        .slice_mut(ndarray::s![..rows, ..])
        .assign(&d.dropped);
    let mut counts = d.counts.clone();
    for j in 0..e {
        for f in 0..need[j] {
            map[[rows + f, j]] = true;
        }
        counts[j] += need[j];
    }
    Ok(RoutingDecision {
        probs,
        routing_map: map,
        counts,
        dropped,
        ..d.clone()
    })
}
