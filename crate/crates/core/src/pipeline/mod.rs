//! Pipeline layouts and schedule simulation.

pub mod layout;
pub mod sim;

pub use layout::{parse, render, Layout, Symbol};
pub use sim::{simulate, Schedule, SimInput, StageCost};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::ModelSpec;
use crate::perf::flops::forward_flops;

/// The layout a job runs with: the given DSL text, or a uniform split.
pub fn job_layout(model: &ModelSpec, pp: usize, vpp: usize, text: Option<&str>) -> Result<Layout> {
    let lay = match text {
        Some(t) => parse(t)?,
        None => layout::uniform_split(
            model.num_layers,
            pp * vpp,
            model.has_embedding,
            model.has_mtp,
        ),
    };
    lay.check_against(model.num_layers, pp * vpp)?;
    Ok(lay)
}

/// Forward/backward cost of each layer symbol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SymbolCosts {
    pub embedding: StageCost,
    pub decoder: StageCost,
    pub mtp: StageCost,
    pub loss: StageCost,
}

impl Default for SymbolCosts {
    fn default() -> Self {
        let c = |f: f64| StageCost {
            f,
            b: 2.0 * f,
            w: 0.0,
        };
        SymbolCosts {
            embedding: c(0.1),
            decoder: c(1.0),
            mtp: c(1.0),
            loss: c(0.2),
        }
    }
}

impl SymbolCosts {
    /// Costs proportional to forward FLOPs of one sequence, in units of the
    /// mean decoder layer. The MTP block is a MoE layer plus its concat
    /// projection and a pass through the shared output head; the loss stage
    /// is the output head. Embedding lookups count as free. Backward is twice
    /// the forward.
    pub fn from_model(m: &ModelSpec, seq: u64) -> Result<SymbolCosts> {
        if m.num_layers == 0 || seq == 0 {
            return invalid("need at least one decoder layer and a positive sequence length");
        }
        let s = seq as f64;
        let layers = m.num_layers as f64;
        let total = forward_flops(m, seq);
        let layer = total.total() / layers;
        let k = m.top_k.min(m.num_experts) as f64;
        let moe_layer = (total.sdpa + total.linear_attn) / layers
            + 2.0 * (k * m.expert_params() as f64 + m.moe_dense_params() as f64) * s;
        let h = m.hidden_dim as f64;
        let head = 2.0 * m.head_params() as f64 * s;
        let mtp = if m.has_mtp {
            moe_layer + 2.0 * 2.0 * h * h * s + head
        } else {
            0.0
        };
        let c = |flops: f64| StageCost {
            f: flops / layer,
            b: 2.0 * flops / layer,
            w: 0.0,
        };
        Ok(SymbolCosts {
            embedding: c(0.0),
            decoder: c(layer),
            mtp: c(mtp),
            loss: c(head),
        })
    }

    pub fn of(&self, s: Symbol) -> StageCost {
        match s {
            Symbol::Embedding => self.embedding,
            Symbol::Decoder => self.decoder,
            Symbol::Mtp => self.mtp,
            Symbol::Loss => self.loss,
        }
    }
}

/// Per-stage costs: the sum over the symbols in each stage.
pub fn layout_stage_costs(layout: &Layout, costs: &SymbolCosts) -> Vec<StageCost> {
    layout
        .stages
        .iter()
        .map(|st| {
            st.iter().fold(
                StageCost {
                    f: 0.0,
                    b: 0.0,
                    w: 0.0,
                },
                |a, &s| {
                    let c = costs.of(s);
                    StageCost {
                        f: a.f + c.f,
                        b: a.b + c.b,
                        w: a.w + c.w,
                    }
                },
            )
        })
        .collect()
}

/// Simulation driven by a layout string instead of explicit stage costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct LayoutSimRequest {
    pub layout: String,
    pub pp: usize,
    pub num_microbatches: usize,
    /// Defaults to the stage count over `pp`.
    #[serde(default)]
    pub vpp: Option<usize>,
    #[serde(default)]
    pub num_layers: Option<usize>,
    #[serde(default)]
    pub symbol_costs: SymbolCosts,
    #[serde(default)]
    pub extra_warmup: bool,
    #[serde(default)]
    pub wd_split: bool,
    #[serde(default)]
    pub p2p_latency: f64,
}

pub fn simulate_layout(req: &LayoutSimRequest) -> Result<Schedule> {
    let lay = parse(&req.layout)?;
    if req.pp == 0 {
        return invalid("pp must be positive");
    }
    let vpp = match req.vpp {
        Some(v) => v,
        None if lay.num_stages() % req.pp == 0 => lay.num_stages() / req.pp,
        None => {
            return invalid(format!(
                "{} stages do not divide over pp={}",
                lay.num_stages(),
                req.pp
            ))
        }
    };
    let layers = req.num_layers.unwrap_or(lay.count(Symbol::Decoder));
    lay.check_against(layers, req.pp * vpp)?;
    simulate(&SimInput {
        pp: req.pp,
        vpp,
        num_microbatches: req.num_microbatches,
        stage_costs: layout_stage_costs(&lay, &req.symbol_costs),
        extra_warmup: req.extra_warmup,
        wd_split: req.wd_split,
        p2p_latency: req.p2p_latency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_driven_simulation() {
        let req = LayoutSimRequest {
            layout: "Et*3|(tt|)*29m|L".into(),
            pp: 16,
            num_microbatches: 32,
            vpp: None,
            num_layers: Some(61),
            symbol_costs: SymbolCosts::default(),
            extra_warmup: false,
            wd_split: false,
            p2p_latency: 0.0,
        };
        let s = simulate_layout(&req).unwrap();
        assert_eq!(s.vpp, 2);
        assert!(s.bubble_ratio > 0.0 && s.bubble_ratio < 1.0);
        let bad = LayoutSimRequest {
            num_layers: Some(60),
            ..req
        };
        assert!(simulate_layout(&bad).is_err());
    }
}
