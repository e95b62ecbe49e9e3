//! Forward FLOPs per layer split into attention scores, attention linears and
//! MLP/MoE linears.
//!
//! Linears cost 2 FLOPs per active weight per token. Causal SDPA costs
//! 2·S²·heads·(d_qk + d_v)·½ per layer: QKᵀ and PV over the lower triangle.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::ModelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct FlopsShare {
    pub sdpa: f64,
    pub linear_attn: f64,
    pub moe: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct FlopsBreakdown {
    pub sdpa: f64,
    pub linear_attn: f64,
    pub moe: f64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> f64 {
        self.sdpa + self.linear_attn + self.moe
    }
}

/// Forward FLOPs of one sequence of length `s` through all decoder layers.
pub fn forward_flops(m: &ModelSpec, s: u64) -> FlopsBreakdown {
    let s = s as f64;
    let a = &m.attention_kind;
    let layers = m.num_layers as f64;
    let sdpa = layers
        * 2.0
        * s
        * s
        * a.num_heads() as f64
        * (a.qk_head_dim() + a.v_head_dim()) as f64
        * 0.5;
    let linear_attn = layers * 2.0 * m.attention_params() as f64 * s;
    let dense = m.num_dense_prefix_layers.min(m.num_layers) as f64;
    let k = m.top_k.min(m.num_experts) as f64;
    let moe_layer = k * m.expert_params() as f64 + m.moe_dense_params() as f64;
    let mlp = dense * m.dense_mlp_params() as f64 + m.num_moe_layers() as f64 * moe_layer;
    FlopsBreakdown {
        sdpa,
        linear_attn,
        moe: 2.0 * mlp * s,
    }
}

pub fn flops_share(m: &ModelSpec, s: u64) -> Result<FlopsShare> {
    if s == 0 {
        return invalid("sequence length must be at least 1");
    }
    let b = forward_flops(m, s);
    let t = b.total();
    if !(t > 0.0) {
        return invalid("model has no FLOPs");
    }
    let sdpa = b.sdpa / t;
    let linear_attn = b.linear_attn / t;
    Ok(FlopsShare {
        sdpa,
        linear_attn,
        moe: 1.0 - sdpa - linear_attn,
    })
}
