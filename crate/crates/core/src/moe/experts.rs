//! Expert MLPs, token permutation and the two combine formulations.
//!
//! Standard combine scales each expert's output by its routing weight after
//! the second GEMM. The memory-efficient form folds the weight into the
//! activation before the second GEMM, so the expert output need not be kept
//! for backward. The two agree because experts carry no bias.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::router::{RouteOptions, RoutingDecision, ScoreFn};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
            }
        }
    }
}

/// One bias-free expert: W2 · φ(W1 x), or W2 · (φ(W_gate x) ⊙ W1 x) when gated.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    /// m × h
    pub w1: Array2<f64>,
    /// h × m
    pub w2: Array2<f64>,
    /// m × h
    pub w_gate: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    pub experts: Vec<Expert>,
    pub activation: Activation,
}

impl ExpertParams {
    pub fn check(&self, h: usize) -> Result<()> {
        for (i, e) in self.experts.iter().enumerate() {
            let m = e.w1.nrows();
            let gate_ok = e.w_gate.as_ref().is_none_or(|g| g.dim() == (m, h));
            if e.w1.ncols() != h || e.w2.dim() != (h, m) || !gate_ok {
                return invalid(format!("expert {i} has inconsistent dimensions"));
            }
        }
        Ok(())
    }

    /// Hidden activation φ(...) of expert `i` for one input row.
    pub fn hidden(&self, i: usize, x: ArrayView1<f64>) -> Array1<f64> {
        let e = &self.experts[i];
        let a = e.w1.dot(&x);
        match &e.w_gate {
            Some(g) => {
                let gv = g.dot(&x);
                Array1::from_iter(
                    gv.iter()
                        .zip(a.iter())
                        .map(|(&g, &u)| self.activation.apply(g) * u),
                )
            }
            None => a.mapv(|v| self.activation.apply(v)),
        }
    }

    pub fn forward(&self, i: usize, x: ArrayView1<f64>) -> Array1<f64> {
        self.experts[i].w2.dot(&self.hidden(i, x))
    }
}

/// Rows grouped by expert; `None` marks a zero padding row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Permutation {
    /// Source token of each permuted row.
    pub row_id_map: Vec<Option<usize>>,
    pub row_expert: Vec<usize>,
    /// Start row of each expert's block, plus the total at the end.
    pub offsets: Vec<usize>,
}

/// Group token copies by expert, stable by token index within an expert.
/// Filler tokens beyond the real rows and pad rows become zero rows.
pub fn permute(tokens: &Array2<f64>, d: &RoutingDecision) -> Result<(Array2<f64>, Permutation)> {
    if tokens.nrows() != d.num_tokens {
        return invalid(format!(
            "{} token rows for a decision over {} tokens",
            tokens.nrows(),
            d.num_tokens
        ));
    }
    let h = tokens.ncols();
    let mut row_id_map = Vec::new();
    let mut row_expert = Vec::new();
    let mut offsets = vec![0];
    for j in 0..d.num_experts {
        for t in 0..d.routing_map.nrows() {
            if d.routing_map[[t, j]] {
                row_id_map.push((t < d.num_tokens).then_some(t));
                row_expert.push(j);
            }
        }
        for _ in 0..d.pad_rows[j] {
            row_id_map.push(None);
            row_expert.push(j);
        }
        offsets.push(row_id_map.len());
    }
    let mut out = Array2::zeros((row_id_map.len(), h));
    for (r, src) in row_id_map.iter().enumerate() {
        if let Some(t) = src {
            out.row_mut(r).assign(&tokens.row(*t));
        }
    }
    Ok((
        out,
        Permutation {
            row_id_map,
            row_expert,
            offsets,
        },
    ))
}

/// Scatter rows back to their tokens, summing duplicates.
pub fn unpermute(rows: &Array2<f64>, p: &Permutation, num_tokens: usize) -> Result<Array2<f64>> {
    if rows.nrows() != p.row_id_map.len() {
        return invalid("row count differs from the permutation");
    }
    let mut out = Array2::zeros((num_tokens, rows.ncols()));
    for (r, src) in p.row_id_map.iter().enumerate() {
        if let Some(t) = src {
            let mut o = out.row_mut(*t);
            o += &rows.row(r);
        }
    }
    Ok(out)
}

/// Expert outputs for every permuted row (zero rows stay zero).
pub fn expert_outputs(
    permuted: &Array2<f64>,
    p: &Permutation,
    ex: &ExpertParams,
) -> Result<Array2<f64>> {
    ex.check(permuted.ncols())?;
    let h_out = ex
        .experts
        .first()
        .map_or(permuted.ncols(), |e| e.w2.nrows());
    let mut out = Array2::zeros((permuted.nrows(), h_out));
    for (r, &j) in p.row_expert.iter().enumerate() {
        if p.row_id_map[r].is_some() {
            out.row_mut(r).assign(&ex.forward(j, permuted.row(r)));
        }
    }
    Ok(out)
}

fn weight(d: &RoutingDecision, p: &Permutation, r: usize) -> f64 {
    match p.row_id_map[r] {
        Some(t) => d.probs[[t, p.row_expert[r]]],
        None => 0.0,
    }
}

/// y_t = Σ_i p_ti · E_i(x_t), from already computed expert outputs.
pub fn combine_standard(
    expert_outputs: &Array2<f64>,
    p: &Permutation,
    d: &RoutingDecision,
) -> Result<Array2<f64>> {
    if expert_outputs.nrows() != p.row_id_map.len() {
        return invalid("expert output rows differ from the permutation");
    }
    let mut scaled = expert_outputs.clone();
    for (r, mut row) in scaled.axis_iter_mut(Axis(0)).enumerate() {
        row *= weight(d, p, r);
    }
    unpermute(&scaled, p, d.num_tokens)
}

/// y_t = Σ_i W2_i · (p_ti · φ(...)), with the weight folded into the activation.
pub fn combine_mem_efficient(
    permuted: &Array2<f64>,
    p: &Permutation,
    d: &RoutingDecision,
    ex: &ExpertParams,
) -> Result<Array2<f64>> {
    ex.check(permuted.ncols())?;
    if permuted.nrows() != p.row_id_map.len() {
        return invalid("permuted rows differ from the permutation");
    }
    let h_out = ex
        .experts
        .first()
        .map_or(permuted.ncols(), |e| e.w2.nrows());
    let mut out = Array2::zeros((permuted.nrows(), h_out));
    for (r, &j) in p.row_expert.iter().enumerate() {
        let a = ex.hidden(j, permuted.row(r)) * weight(d, p, r);
        out.row_mut(r).assign(&ex.experts[j].w2.dot(&a));
    }
    unpermute(&out, p, d.num_tokens)
}

/// Routed MoE output with the standard combine.
pub fn moe_forward(x: &Array2<f64>, d: &RoutingDecision, ex: &ExpertParams) -> Result<Array2<f64>> {
    let (pm, p) = permute(x, d)?;
    let out = expert_outputs(&pm, &p, ex)?;
    combine_standard(&out, &p, d)
}

/// W_up · MoE_ℓ(W_down · x) + Σ shared(x). Routing uses the full-width `x`.
pub fn latent_moe_forward(
    x: &Array2<f64>,
    w_down: &Array2<f64>,
    w_up: &Array2<f64>,
    experts: &ExpertParams,
    d: &RoutingDecision,
    shared: Option<&ExpertParams>,
) -> Result<Array2<f64>> {
    let h = x.ncols();
    let l = w_down.nrows();
    if w_down.ncols() != h || w_up.dim() != (h, l) {
        return invalid("latent projections do not match the hidden width");
    }
    let z = x.dot(&w_down.t());
    let routed = moe_forward(&z, d, experts)?;
    let mut y = routed.dot(&w_up.t());
    if let Some(sh) = shared {
        sh.check(h)?;
        for (t, mut row) in y.axis_iter_mut(Axis(0)).enumerate() {
            for i in 0..sh.experts.len() {
                row += &sh.forward(i, x.row(t));
            }
        }
    }
    Ok(y)
}

/// Dispatch-volume compression h / ℓ.
pub fn latent_compression(h: usize, l: usize) -> Result<f64> {
    if l == 0 || l > h {
        return invalid("latent width must be in 1..=h");
    }
    Ok(h as f64 / l as f64)
}

/// Dense MLP weights to upcycle: W1 (F×h), W2 (h×F), optional gate (F×h).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMlp {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    pub w_gate: Option<Array2<f64>>,
    pub activation: Activation,
}

impl DenseMlp {
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let e = ExpertParams {
            experts: vec![Expert {
                w1: self.w1.clone(),
                w2: self.w2.clone(),
                w_gate: self.w_gate.clone(),
            }],
            activation: self.activation,
        };
        let mut out = Array2::zeros((x.nrows(), self.w2.nrows()));
        for (t, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            row.assign(&e.forward(0, x.row(t)));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Upcycled {
    pub experts: ExpertParams,
    /// h × (G · copies)
    pub router: Array2<f64>,
    pub granularity: usize,
    pub copies: usize,
}

impl Upcycled {
    /// Top-G routing with renormalised weights.
    pub fn route(&self, x: &Array2<f64>, score: ScoreFn) -> Result<RoutingDecision> {
        super::router::route_with(
            x,
            &self.router,
            score,
            self.granularity,
            &RouteOptions {
                bias: None,
                renormalize: true,
            },
        )
    }

    pub fn forward(&self, x: &Array2<f64>, score: ScoreFn) -> Result<Array2<f64>> {
        let d = self.route(x, score)?;
        moe_forward(x, &d, &self.experts)
    }
}

/// Shard the dense MLP into `granularity` slices of the intermediate
/// dimension and duplicate each slice `copies` times. Expert `g·copies + c`
/// is copy `c` of shard `g`. Every shard's copy `c` shares router column `c`
/// of `router_base` (h × copies), so top-G picks one copy of each shard with
/// equal weights; W2 is scaled by G to undo the 1/G weight.
pub fn upcycle(
    dense: &DenseMlp,
    granularity: usize,
    copies: usize,
    router_base: &Array2<f64>,
) -> Result<Upcycled> {
    let f = dense.w1.nrows();
    let h = dense.w1.ncols();
    if granularity == 0 || copies == 0 || !f.is_multiple_of(granularity) {
        return invalid(format!(
            "intermediate size {f} is not divisible by granularity {granularity}"
        ));
    }
    if router_base.dim() != (h, copies) {
        return invalid("router base must be h × copies");
    }
    if dense.w2.dim() != (h, f) {
        return invalid("dense W2 must be h × F");
    }
    let step = f / granularity;
    let mut experts = Vec::with_capacity(granularity * copies);
    let mut router = Array2::zeros((h, granularity * copies));
    for g in 0..granularity {
        let rows = s![g * step..(g + 1) * step, ..];
        let w1 = dense.w1.slice(rows).to_owned();
        let w2 = dense.w2.slice(s![.., g * step..(g + 1) * step]).to_owned() * granularity as f64;
        let w_gate = dense.w_gate.as_ref().map(|w| w.slice(rows).to_owned());
        for c in 0..copies {
            experts.push(Expert {
                w1: w1.clone(),
                w2: w2.clone(),
                w_gate: w_gate.clone(),
            });
            router
                .column_mut(g * copies + c)
                .assign(&router_base.column(c));
        }
    }
    Ok(Upcycled {
        experts: ExpertParams {
            experts,
            activation: dense.activation,
        },
        router,
        granularity,
        copies,
    })
}
