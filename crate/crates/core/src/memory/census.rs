//! Saved-for-backward tensor census of one layer for one micro-batch.
//!
//! Element counts are per pipeline rank after TP/CP/ETP sharding. Each entry
//! names the module that produces it (recomputation discards outputs of the
//! recomputed module) and the module that consumes it (offloading moves the
//! saved inputs of the offloaded module).

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::model::{AttentionKind, ModelSpec, ParallelConfig};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, JsonSchema,
)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Moe,
    Mtp,
    Loss,
}

/// Whether a tensor lives until its layer's backward or only transiently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Lifetime {
    UntilBackward,
    Transient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SavedTensor {
    pub name: &'static str,
    pub producer: &'static str,
    pub consumer: &'static str,
    pub elements: u64,
    /// Storage bits per element before any precision lever.
    pub bits: u64,
    /// Stored at the recipe width when a low-precision recipe is active.
    pub lowp_eligible: bool,
    /// Routed-expert tensor scaled by the imbalance factor.
    pub routed: bool,
    pub lifetime: Lifetime,
}

/// Sizing inputs shared by all layers on a rank.
#[derive(Debug, Clone, Copy)]
pub struct CensusDims {
    /// Local tokens per micro-batch (mbs * seq / cp).
    pub tokens: u64,
    pub tp: u64,
    pub etp: u64,
    pub ep: u64,
    /// Routed tokens received per rank per token of local input, as a
    /// rational (num / den). Dropless balanced routing gives top_k / 1.
    pub routed_num: u64,
    pub routed_den: u64,
}

impl CensusDims {
    pub fn new(
        model: &ModelSpec,
        par: &ParallelConfig,
        capacity_factor: Option<f64>,
        pad: bool,
    ) -> Self {
        let a = par.attention;
        let tokens = (par.mbs * par.seq_len / a.cp.max(1)) as u64;
        let k = model.top_k as u64;
        let (routed_num, routed_den) = match capacity_factor {
            None => (k, 1),
            Some(cf) => {
                // Per-expert capacity over the tokens an EP group routes.
                let e = model.num_experts.max(1) as f64;
                let ep = par.moe.ep.max(1) as u64;
                let group_tokens = tokens as f64 * ep as f64;
                let cap = (cf * group_tokens * k as f64 / e).ceil() as u64;
                let local_experts = (model.num_experts as u64 / ep).max(1);
                let received = local_experts * cap;
                let dropless = tokens * k;
                let got = if pad {
                    received
                } else {
                    received.min(dropless)
                };
                (got, tokens.max(1))
            }
        };
        CensusDims {
            tokens,
            tp: a.tp.max(1) as u64,
            etp: par.moe.etp.max(1) as u64,
            ep: par.moe.ep.max(1) as u64,
            routed_num,
            routed_den,
        }
    }

    fn routed_tokens(&self) -> u64 {
        (self.tokens * self.routed_num).div_ceil(self.routed_den)
    }
}

fn t(
    name: &'static str,
    producer: &'static str,
    consumer: &'static str,
    elements: u64,
    bits: u64,
    lowp_eligible: bool,
) -> SavedTensor {
    SavedTensor {
        name,
        producer,
        consumer,
        elements,
        bits,
        lowp_eligible,
        routed: false,
        lifetime: Lifetime::UntilBackward,
    }
}

fn attention_block(m: &ModelSpec, d: &CensusDims, out: &mut Vec<SavedTensor>) {
    let h = m.hidden_dim as u64;
    let tok = d.tokens;
    let tp = d.tp;
    out.push(t(
        "attn_norm_in",
        "residual",
        "layernorm",
        tok * h / tp,
        16,
        false,
    ));
    out.push(t(
        "attn_norm_out",
        "layernorm",
        "attention",
        tok * h / tp,
        16,
        false,
    ));
    match &m.attention_kind {
        AttentionKind::Standard {
            num_heads,
            num_query_groups,
            head_dim,
        } => {
            let q = (*num_heads * *head_dim) as u64;
            let kv = (*num_query_groups * *head_dim) as u64;
            out.push(t(
                "qkv",
                "attention",
                "attention",
                tok * (q + 2 * kv) / tp,
                16,
                false,
            ));
            out.push(t(
                "attn_out",
                "attention",
                "attention",
                tok * q / tp,
                16,
                false,
            ));
            out.push(t(
                "softmax_lse",
                "attention",
                "attention",
                tok * *num_heads as u64 / tp,
                32,
                false,
            ));
        }
        AttentionKind::Mla {
            num_heads,
            q_lora_rank,
            kv_lora_rank,
            qk_nope_head_dim,
            qk_rope_head_dim,
            v_head_dim,
        } => {
            let nh = *num_heads as u64;
            let qk = (*qk_nope_head_dim + *qk_rope_head_dim) as u64;
            let ql = *q_lora_rank as u64;
            let kvl = *kv_lora_rank as u64;
            let rope = *qk_rope_head_dim as u64;
            if ql > 0 {
                out.push(t(
                    "q_norm_in",
                    "attention",
                    "layernorm",
                    tok * ql,
                    16,
                    false,
                ));
                out.push(t(
                    "q_norm_out",
                    "layernorm",
                    "mla_up_proj",
                    tok * ql,
                    16,
                    false,
                ));
            }
            out.push(t(
                "kv_norm_in",
                "attention",
                "layernorm",
                tok * kvl,
                16,
                false,
            ));
            out.push(t("k_pe", "attention", "attention", tok * rope, 16, false));
            out.push(t(
                "kv_norm_out",
                "layernorm",
                "mla_up_proj",
                tok * kvl,
                16,
                false,
            ));
            out.push(t(
                "q_up",
                "mla_up_proj",
                "attention",
                tok * nh * qk / tp,
                16,
                false,
            ));
            out.push(t(
                "k_up",
                "mla_up_proj",
                "attention",
                tok * nh * qk / tp,
                16,
                false,
            ));
            out.push(t(
                "v_up",
                "mla_up_proj",
                "attention",
                tok * nh * *v_head_dim as u64 / tp,
                16,
                false,
            ));
            out.push(t(
                "attn_out",
                "attention",
                "attention",
                tok * nh * *v_head_dim as u64 / tp,
                16,
                false,
            ));
            out.push(t(
                "softmax_lse",
                "attention",
                "attention",
                tok * nh / tp,
                32,
                false,
            ));
        }
    }
}

fn glu(m: &ModelSpec) -> u64 {
    if m.gated_linear_unit {
        2
    } else {
        1
    }
}

fn moe_block(m: &ModelSpec, d: &CensusDims, out: &mut Vec<SavedTensor>) {
    let h = m.hidden_dim as u64;
    let io = m.expert_io_dim() as u64;
    let tok = d.tokens;
    let tp = d.tp;
    let ffn = m.ffn_hidden_dim as u64;
    out.push(t(
        "mlp_norm_in",
        "residual",
        "layernorm",
        tok * h / tp,
        16,
        false,
    ));
    // Shared with the router, which keeps it in high precision.
    out.push(t(
        "mlp_norm_out",
        "layernorm",
        "router",
        tok * h / tp,
        16,
        false,
    ));
    out.push(t(
        "router_probs",
        "router",
        "router",
        tok * m.num_experts as u64,
        32,
        false,
    ));
    if m.latent_dim.is_some() {
        out.push(t(
            "latent_up_in",
            "combine",
            "latent_proj",
            tok * io,
            16,
            true,
        ));
    }
    let rt = d.routed_tokens();
    let mut routed = |name, producer, consumer, elements, lowp| {
        let mut s = t(name, producer, consumer, elements, 16, lowp);
        s.routed = true;
        out.push(s);
    };
    routed("expert_fc1_in", "dispatch", "expert_fc1", rt * io, true);
    routed(
        "expert_fc1_out",
        "expert_fc1",
        "moe_act",
        rt * glu(m) * ffn / d.etp,
        false,
    );
    routed(
        "expert_act_out",
        "moe_act",
        "expert_fc2",
        rt * ffn / d.etp,
        true,
    );
    routed("expert_out", "expert_fc2", "combine", rt * io, false);
    if m.num_shared_experts > 0 {
        let s = m.num_shared_experts as u64 * ffn;
        out.push(t(
            "shared_fc1_out",
            "mlp",
            "mlp",
            tok * glu(m) * s / tp,
            16,
            false,
        ));
        out.push(t("shared_act_out", "mlp", "mlp", tok * s / tp, 16, true));
    }
}

fn dense_block(m: &ModelSpec, d: &CensusDims, out: &mut Vec<SavedTensor>) {
    let h = m.hidden_dim as u64;
    let tok = d.tokens;
    let tp = d.tp;
    let f = m.dense_ffn_hidden_dim as u64;
    out.push(t(
        "mlp_norm_in",
        "residual",
        "layernorm",
        tok * h / tp,
        16,
        false,
    ));
    out.push(t(
        "mlp_norm_out",
        "layernorm",
        "mlp",
        tok * h / tp,
        16,
        true,
    ));
    out.push(t(
        "dense_fc1_out",
        "mlp",
        "mlp",
        tok * glu(m) * f / tp,
        16,
        false,
    ));
    out.push(t("dense_act_out", "mlp", "mlp", tok * f / tp, 16, true));
}

/// Saved tensors of one layer of `kind` for one micro-batch.
pub fn layer_census(m: &ModelSpec, d: &CensusDims, kind: LayerKind) -> Vec<SavedTensor> {
    let mut out = Vec::new();
    match kind {
        LayerKind::Dense => {
            attention_block(m, d, &mut out);
            dense_block(m, d, &mut out);
        }
        LayerKind::Moe => {
            attention_block(m, d, &mut out);
            moe_block(m, d, &mut out);
        }
        LayerKind::Mtp => {
            let h = m.hidden_dim as u64;
            out.push(t(
                "mtp_proj_in",
                "mtp",
                "mtp",
                d.tokens * 2 * h / d.tp,
                16,
                false,
            ));
            attention_block(m, d, &mut out);
            moe_block(m, d, &mut out);
        }
        LayerKind::Loss => {
            out.push(t(
                "final_norm_in",
                "residual",
                "layernorm",
                d.tokens * m.hidden_dim as u64 / d.tp,
                16,
                false,
            ));
            out.push(t(
                "logits",
                "output_layer",
                "loss",
                d.tokens * m.vocab_size as u64 / d.tp,
                32,
                false,
            ));
        }
    }
    out
}
