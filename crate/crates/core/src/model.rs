//! Model, cluster, parallelism and job descriptions.
//!
//! JSON is the canonical serialization; field names match the struct fields.
//! Parameter counts are derived from the architectural dimensions so the
//! memory and perf models never depend on headline numbers.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

/// Attention block variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttentionKind {
    /// Multi-head / grouped-query attention.
    Standard {
        num_heads: usize,
        num_query_groups: usize,
        head_dim: usize,
    },
    /// Multi-head latent attention with low-rank query and key/value paths.
    Mla {
        num_heads: usize,
        q_lora_rank: usize,
        kv_lora_rank: usize,
        qk_nope_head_dim: usize,
        qk_rope_head_dim: usize,
        v_head_dim: usize,
    },
}

impl AttentionKind {
    pub fn num_heads(&self) -> usize {
        match self {
            AttentionKind::Standard { num_heads, .. } | AttentionKind::Mla { num_heads, .. } => {
                *num_heads
            }
        }
    }

    /// Per-head query/key width used by the score product.
    pub fn qk_head_dim(&self) -> usize {
        match self {
            AttentionKind::Standard { head_dim, .. } => *head_dim,
            AttentionKind::Mla {
                qk_nope_head_dim,
                qk_rope_head_dim,
                ..
            } => qk_nope_head_dim + qk_rope_head_dim,
        }
    }

    pub fn v_head_dim(&self) -> usize {
        match self {
            AttentionKind::Standard { head_dim, .. } => *head_dim,
            AttentionKind::Mla { v_head_dim, .. } => *v_head_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ModelSpec {
    #[serde(default)]
    pub name: String,
    pub num_layers: usize,
    #[serde(default)]
    pub num_dense_prefix_layers: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub hidden_dim: usize,
    /// Routed (and shared) expert intermediate size.
    pub ffn_hidden_dim: usize,
    /// Intermediate size of the dense prefix layers.
    #[serde(default)]
    pub dense_ffn_hidden_dim: usize,
    #[serde(default)]
    pub num_shared_experts: usize,
    /// Latent width for latent-MoE experts; `None` runs experts at `hidden_dim`.
    #[serde(default)]
    pub latent_dim: Option<usize>,
    #[serde(default)]
    pub has_mtp: bool,
    #[serde(default = "yes")]
    pub has_embedding: bool,
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default = "yes")]
    pub gated_linear_unit: bool,
    pub attention_kind: AttentionKind,
    #[serde(default)]
    pub params_total: Option<f64>,
    #[serde(default)]
    pub params_active: Option<f64>,
}

fn yes() -> bool {
    true
}

impl ModelSpec {
    pub fn num_moe_layers(&self) -> usize {
        self.num_layers.saturating_sub(self.num_dense_prefix_layers)
    }

    pub fn is_moe_layer(&self, layer: usize) -> bool {
        layer >= self.num_dense_prefix_layers
    }

    fn mlp_mats(&self) -> u64 {
        if self.gated_linear_unit {
            3
        } else {
            2
        }
    }

    /// Width the routed experts operate at.
    pub fn expert_io_dim(&self) -> usize {
        self.latent_dim.unwrap_or(self.hidden_dim)
    }

    pub fn attention_params(&self) -> u64 {
        let h = self.hidden_dim as u64;
        match &self.attention_kind {
            AttentionKind::Standard {
                num_heads,
                num_query_groups,
                head_dim,
            } => {
                let q = (*num_heads * *head_dim) as u64;
                let kv = (*num_query_groups * *head_dim) as u64;
                h * q + 2 * h * kv + q * h
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
                let q = if ql > 0 {
                    h * ql + ql + ql * nh * qk
                } else {
                    h * nh * qk
                };
                let kv_a = h * (kvl + *qk_rope_head_dim as u64) + kvl;
                let kv_b = kvl * nh * (*qk_nope_head_dim + *v_head_dim) as u64;
                let o = nh * *v_head_dim as u64 * h;
                q + kv_a + kv_b + o
            }
        }
    }

    /// Input and pre-MLP norm weights of one decoder layer.
    pub fn layer_norm_params(&self) -> u64 {
        2 * self.hidden_dim as u64
    }

    pub fn dense_mlp_params(&self) -> u64 {
        self.mlp_mats() * (self.hidden_dim * self.dense_ffn_hidden_dim) as u64
    }

    /// Parameters of one routed expert.
    pub fn expert_params(&self) -> u64 {
        self.mlp_mats() * (self.expert_io_dim() * self.ffn_hidden_dim) as u64
    }

    pub fn shared_expert_params(&self) -> u64 {
        self.num_shared_experts as u64
            * self.mlp_mats()
            * (self.hidden_dim * self.ffn_hidden_dim) as u64
    }

    pub fn router_params(&self) -> u64 {
        (self.hidden_dim * self.num_experts) as u64
    }

    /// Latent down/up projections around the routed experts.
    pub fn latent_proj_params(&self) -> u64 {
        match self.latent_dim {
            Some(l) => 2 * (self.hidden_dim * l) as u64,
            None => 0,
        }
    }

    /// Everything in a MoE block except the routed experts.
    pub fn moe_dense_params(&self) -> u64 {
        self.shared_expert_params() + self.router_params() + self.latent_proj_params()
    }

    pub fn moe_block_params(&self) -> u64 {
        self.num_experts as u64 * self.expert_params() + self.moe_dense_params()
    }

    pub fn embedding_params(&self) -> u64 {
        if self.has_embedding {
            (self.vocab_size * self.hidden_dim) as u64
        } else {
            0
        }
    }

    /// Output projection plus final norm.
    pub fn head_params(&self) -> u64 {
        if self.has_embedding {
            (self.vocab_size * self.hidden_dim + self.hidden_dim) as u64
        } else {
            0
        }
    }

    /// MTP module: concat projection, its norms, one MoE decoder layer and a
    /// final norm. Embedding and head are shared with the main model.
    pub fn mtp_params(&self) -> u64 {
        if !self.has_mtp {
            return 0;
        }
        let h = self.hidden_dim as u64;
        2 * h * h
            + 2 * h
            + self.attention_params()
            + self.layer_norm_params()
            + self.moe_block_params()
            + h
    }

    /// Main-model parameter count (MTP excluded).
    pub fn derived_params_total(&self) -> u64 {
        let dense = self.num_dense_prefix_layers.min(self.num_layers) as u64;
        let moe = self.num_moe_layers() as u64;
        self.num_layers as u64 * (self.attention_params() + self.layer_norm_params())
            + dense * self.dense_mlp_params()
            + moe * self.moe_block_params()
            + self.embedding_params()
            + self.head_params()
    }

    /// Parameters touched per token, counted the same way as the total
    /// (embedding and head included, MTP excluded).
    pub fn derived_params_active(&self) -> u64 {
        let dense = self.num_dense_prefix_layers.min(self.num_layers) as u64;
        let moe = self.num_moe_layers() as u64;
        let k = self.top_k.min(self.num_experts) as u64;
        self.num_layers as u64 * (self.attention_params() + self.layer_norm_params())
            + dense * self.dense_mlp_params()
            + moe * (k * self.expert_params() + self.moe_dense_params())
            + self.embedding_params()
            + self.head_params()
    }

    pub fn params_active_or_derived(&self) -> f64 {
        self.params_active
            .unwrap_or(self.derived_params_active() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ClusterSpec {
    #[serde(default)]
    pub name: String,
    pub num_gpus: usize,
    /// Bytes of HBM per GPU.
    pub gpu_memory: f64,
    pub nvlink_domain_size: usize,
    /// Bytes/s per GPU inside an NVLink domain.
    pub intra_domain_bw: f64,
    /// Bytes/s per GPU across domains.
    pub inter_node_bw: f64,
    /// Seconds of fixed cost per collective message.
    pub per_message_latency: f64,
    /// Bytes/s between GPU and host memory.
    pub host_link_bw: f64,
    /// Dense BF16 FLOP/s per GPU.
    #[serde(default = "default_peak_flops")]
    pub peak_flops: f64,
}

fn default_peak_flops() -> f64 {
    1.0e15
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
pub enum PrecisionRecipe {
    #[serde(rename = "BF16")]
    Bf16,
    #[serde(rename = "FP8_TENSOR")]
    Fp8Tensor,
    #[serde(rename = "FP8_BLOCK")]
    Fp8Block,
    #[serde(rename = "MXFP8")]
    Mxfp8,
    #[serde(rename = "NVFP4")]
    Nvfp4,
}

impl PrecisionRecipe {
    /// Storage bits per element for tensors eligible for low-precision
    /// storage. NVFP4 carries one E4M3 scale per 16 elements.
    pub fn eligible_bits_per_element(self) -> (u64, u64) {
        // (numerator, denominator) bits per element
        match self {
            PrecisionRecipe::Bf16 => (16, 1),
            PrecisionRecipe::Fp8Tensor | PrecisionRecipe::Fp8Block | PrecisionRecipe::Mxfp8 => {
                (8, 1)
            }
            PrecisionRecipe::Nvfp4 => (72, 16),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct AttentionParallel {
    pub tp: usize,
    pub cp: usize,
    pub dp: usize,
    pub pp: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct MoeParallel {
    pub etp: usize,
    pub ep: usize,
    pub edp: usize,
    pub pp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ParallelConfig {
    pub attention: AttentionParallel,
    pub moe: MoeParallel,
    #[serde(default = "one")]
    pub vpp: usize,
    pub mbs: usize,
    pub gbs: usize,
    pub seq_len: usize,
    pub precision_recipe: PrecisionRecipe,
}

fn one() -> usize {
    1
}

impl ParallelConfig {
    pub fn attention_world(&self) -> usize {
        let a = self.attention;
        a.tp * a.cp * a.dp * a.pp
    }

    pub fn moe_world(&self) -> usize {
        let m = self.moe;
        m.etp * m.ep * m.edp * m.pp
    }

    /// Microbatches per global batch per data-parallel replica.
    pub fn num_microbatches(&self) -> usize {
        let d = self.mbs * self.attention.dp;
        if d == 0 {
            0
        } else {
            self.gbs / d
        }
    }
}

/// Module vocabulary shared by recomputation and offloading.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, JsonSchema,
)]
#[serde(rename_all = "snake_case")]
pub enum Module {
    MlaUpProj,
    Mlp,
    MoeAct,
    Layernorm,
    Attention,
    ExpertFc1,
}

impl Module {
    pub const ALL: [Module; 6] = [
        Module::MlaUpProj,
        Module::Mlp,
        Module::MoeAct,
        Module::Layernorm,
        Module::Attention,
        Module::ExpertFc1,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Module::MlaUpProj => "mla_up_proj",
            Module::Mlp => "mlp",
            Module::MoeAct => "moe_act",
            Module::Layernorm => "layernorm",
            Module::Attention => "attention",
            Module::ExpertFc1 => "expert_fc1",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct OverlapFlags {
    /// Hide EP all-to-all behind the paired micro-batch's compute.
    #[serde(default)]
    pub ep_a2a: bool,
    /// Split backward into data- and weight-gradient passes.
    #[serde(default)]
    pub wd_split: bool,
    /// One extra warm-up micro-batch so paired passes never share a micro-batch.
    #[serde(default)]
    pub extra_warmup: bool,
    /// Compute slowdown while communication kernels hold SMs (1.0 = none).
    #[serde(default = "unit")]
    pub gemm_penalty: f64,
}

fn unit() -> f64 {
    1.0
}

impl Default for OverlapFlags {
    fn default() -> Self {
        OverlapFlags {
            ep_a2a: false,
            wd_split: false,
            extra_warmup: false,
            gemm_penalty: 1.0,
        }
    }
}

/// Token dispatcher backend used by the cost model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Dispatcher {
    /// Flat all-to-all of per-expert token copies.
    #[default]
    A2a,
    /// Token-based two-hop dispatch with inter-node dedup.
    Hybridep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct JobToggles {
    #[serde(default)]
    pub recompute: Vec<Module>,
    #[serde(default)]
    pub offload: Vec<Module>,
    #[serde(default)]
    pub overlap: OverlapFlags,
    /// `None` means dropless routing.
    #[serde(default)]
    pub capacity_factor: Option<f64>,
    #[serde(default)]
    pub pad_to_capacity: bool,
    #[serde(default)]
    pub mem_efficient_permutation: bool,
    /// Bytes per optimizer moment (4 = FP32, 2 = BF16).
    #[serde(default = "four")]
    pub optimizer_moment_bytes: u32,
    /// Pipeline layout in the layout DSL; uniform split when absent.
    #[serde(default)]
    pub pipeline_layout: Option<String>,
    /// Multiplier on routed-expert activations for routing imbalance.
    #[serde(default)]
    pub imbalance_factor: Option<f64>,
    #[serde(default)]
    pub dispatcher: Dispatcher,
}

fn four() -> u32 {
    4
}

impl Default for JobToggles {
    fn default() -> Self {
        JobToggles {
            recompute: vec![],
            offload: vec![],
            overlap: OverlapFlags::default(),
            capacity_factor: None,
            pad_to_capacity: false,
            mem_efficient_permutation: false,
            optimizer_moment_bytes: 4,
            pipeline_layout: None,
            imbalance_factor: None,
            dispatcher: Dispatcher::A2a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TrainingJobSpec {
    pub model: ModelSpec,
    pub cluster: ClusterSpec,
    pub parallel: ParallelConfig,
    #[serde(default)]
    pub toggles: JobToggles,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct Violation {
    pub code: String,
    pub message: String,
}

impl Violation {
    fn new(code: &str, message: String) -> Self {
        Violation {
            code: code.to_string(),
            message,
        }
    }
}

/// Relative tolerance when checking headline parameter counts against dims.
pub const PARAM_COUNT_TOLERANCE: f64 = 0.01;

/// Check the structural constraints of a job. An empty list means valid.
pub fn validate_job(job: &TrainingJobSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    let m = &job.model;
    let p = &job.parallel;
    let a = p.attention;
    let e = p.moe;

    let zero = [
        a.tp, a.cp, a.dp, a.pp, e.etp, e.ep, e.edp, e.pp, p.vpp, p.mbs, p.gbs, p.seq_len,
    ]
    .contains(&0);
    if zero {
        out.push(Violation::new(
            "zero_degree",
            "parallel degrees, batch sizes and sequence length must be positive".into(),
        ));
        return out;
    }
    if a.pp != e.pp {
        out.push(Violation::new(
            "pp_mismatch",
            format!("PP mismatch: attention pp={} but moe pp={}", a.pp, e.pp),
        ));
    }
    if m.top_k > m.num_experts {
        out.push(Violation::new(
            "topk_exceeds_experts",
            format!(
                "top-k exceeds expert count: k={} > experts={}",
                m.top_k, m.num_experts
            ),
        ));
    }
    let world = job.cluster.num_gpus;
    if p.attention_world() != world {
        out.push(Violation::new(
            "world_size_mismatch",
            format!(
                "attention tp*cp*dp*pp={} does not equal world size {}",
                p.attention_world(),
                world
            ),
        ));
    }
    if p.moe_world() != world {
        out.push(Violation::new(
            "world_size_mismatch",
            format!(
                "moe etp*ep*edp*pp={} does not equal world size {}",
                p.moe_world(),
                world
            ),
        ));
    }
    if !p.gbs.is_multiple_of(p.mbs * a.dp) {
        out.push(Violation::new(
            "gbs_indivisible",
            format!(
                "global batch {} is not divisible by mbs*dp={}",
                p.gbs,
                p.mbs * a.dp
            ),
        ));
    }
    if m.num_experts > 0 && !m.num_experts.is_multiple_of(e.ep) {
        out.push(Violation::new(
            "experts_indivisible",
            format!("{} experts do not divide over ep={}", m.num_experts, e.ep),
        ));
    }
    if a.cp > 1 && !p.seq_len.is_multiple_of(2 * a.cp) {
        out.push(Violation::new(
            "seq_indivisible",
            format!("sequence {} not divisible by 2*cp={}", p.seq_len, 2 * a.cp),
        ));
    }
    if m.num_dense_prefix_layers > m.num_layers {
        out.push(Violation::new(
            "dense_prefix_exceeds_layers",
            format!(
                "{} dense prefix layers exceed {} layers",
                m.num_dense_prefix_layers, m.num_layers
            ),
        ));
    }
    let check = |given: Option<f64>, derived: u64, label: &str, out: &mut Vec<Violation>| {
        if let Some(g) = given {
            let d = derived as f64;
            if d > 0.0 && ((g - d) / d).abs() > PARAM_COUNT_TOLERANCE {
                out.push(Violation::new(
                    "param_count_inconsistent",
                    format!(
                        "{label} {:.4e} differs from dims-derived {:.4e} by {:.2}%",
                        g,
                        d,
                        100.0 * ((g - d) / d).abs()
                    ),
                ));
            }
        }
    };
    check(
        m.params_total,
        m.derived_params_total(),
        "params_total",
        &mut out,
    );
    check(
        m.params_active,
        m.derived_params_active(),
        "params_active",
        &mut out,
    );
    if let Some(layout) = &job.toggles.pipeline_layout {
        match crate::pipeline::layout::parse(layout) {
            Ok(l) => {
                if let Err(err) = l.check_against(m.num_layers, a.pp * p.vpp) {
                    out.push(Violation::new("layout_invalid", err.to_string()));
                }
            }
            Err(err) => out.push(Violation::new("layout_invalid", err.to_string())),
        }
    }
    out
}

/// Training FLOPs per token: forward plus backward over the active parameters.
pub fn active_flops_per_token(n_active: f64) -> f64 {
    6.0 * n_active
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;

    #[test]
    fn toy_job_is_valid() {
        assert!(validate_job(&toy_job()).is_empty());
    }

    #[test]
    fn pp_mismatch_reported() {
        let mut j = toy_job();
        j.parallel.moe.pp = 2;
        let v = validate_job(&j);
        assert!(v
            .iter()
            .any(|v| v.code == "pp_mismatch" && v.message.contains("PP mismatch")));
    }

    #[test]
    fn topk_over_experts_reported() {
        let mut j = toy_job();
        j.model.top_k = 9;
        j.model.num_experts = 8;
        let v = validate_job(&j);
        assert!(v
            .iter()
            .any(|v| v.message.contains("top-k exceeds expert count")));
    }

    #[test]
    fn world_and_batch_checks() {
        let mut j = toy_job();
        j.cluster.num_gpus = 2;
        j.parallel.gbs = 3;
        j.parallel.mbs = 2;
        let codes: Vec<_> = validate_job(&j).into_iter().map(|v| v.code).collect();
        assert!(codes.contains(&"world_size_mismatch".to_string()));
        assert!(codes.contains(&"gbs_indivisible".to_string()));
    }

    #[test]
    fn param_count_check() {
        let mut j = toy_job();
        let d = j.model.derived_params_total() as f64;
        j.model.params_total = Some(d * 1.005);
        assert!(validate_job(&j).is_empty());
        j.model.params_total = Some(d * 1.02);
        assert_eq!(validate_job(&j)[0].code, "param_count_inconsistent");
    }

    #[test]
    fn flops_per_token() {
        assert_eq!(active_flops_per_token(37e9), 222e9);
        assert_eq!(active_flops_per_token(70e9), 420e9);
    }

    #[test]
    fn toy_param_counts() {
        let m = toy_model();
        // q,k,v,o each 8x8
        assert_eq!(m.attention_params(), 256);
        assert_eq!(m.expert_params(), 3 * 8 * 16);
        assert_eq!(m.router_params(), 32);
        assert_eq!(m.derived_params_total(), 256 + 16 + 4 * 384 + 32);
        assert_eq!(m.derived_params_active(), 256 + 16 + 2 * 384 + 32);
    }

    #[test]
    fn recipe_serde_names() {
        let s = serde_json::to_string(&PrecisionRecipe::Fp8Block).unwrap();
        assert_eq!(s, "\"FP8_BLOCK\"");
        let m: Module = serde_json::from_str("\"mla_up_proj\"").unwrap();
        assert_eq!(m, Module::MlaUpProj);
    }
}
