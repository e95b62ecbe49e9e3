//! Per-GPU memory estimation: weights and gradients, optimizer state, and a
//! tensor-level activation census multiplied by the in-flight micro-batches
//! the pipeline schedule actually holds.
//!
//! Levers (recomputation, memory-efficient permutation, low-precision
//! storage, offloading) transform a report. A report keeps the set of applied
//! levers and is always re-derived from that set, so lever order never
//! matters.

pub mod census;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{
    validate_job, ModelSpec, Module, ParallelConfig, PrecisionRecipe, TrainingJobSpec,
};
use crate::pipeline::layout::{Layout, Symbol};
use crate::pipeline::sim::{simulate, Schedule, SimInput, StageCost};

pub use census::{layer_census, CensusDims, LayerKind, Lifetime, SavedTensor};

pub const GIB: f64 = 1024.0 * 1024.0 * 1024.0;

/// Bytes of BF16 weight plus FP32 main gradient per parameter.
pub const WEIGHT_GRAD_BYTES: u64 = 6;
/// FP32 master weight bytes per parameter.
pub const MASTER_BYTES: u64 = 4;

/// Bytes per parameter for weights, gradients and a distributed optimizer
/// sharded `d` ways with two moments of `moment_width` bytes.
pub fn optimizer_bytes_per_param(d: u32, moment_width: u32) -> f64 {
    6.0 + (4.0 + 2.0 * moment_width as f64) / d.max(1) as f64
}

/// Peak activation bytes under full recompute and under offloading, for
/// `layers` layers with `input` bytes of layer input and `intermediate`
/// bytes of per-layer working set.
pub fn offload_peak(input: f64, intermediate: f64, layers: u32) -> (f64, f64) {
    (layers as f64 * input + intermediate, input + intermediate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct LeverState {
    pub recompute: BTreeSet<Module>,
    pub offload: BTreeSet<Module>,
    pub precision: PrecisionRecipe,
    pub mem_efficient_permutation: bool,
    pub imbalance_factor: Option<f64>,
    /// Which rank the headline figures describe.
    #[serde(default)]
    pub report_rank: ReportRank,
}

/// Rank selection for the headline figures of a report.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ReportRank {
    /// The pipeline rank with the largest total.
    #[default]
    Peak,
    /// The largest total among ranks holding only decoder layers (no
    /// embedding, MTP or loss), falling back to the peak when none exist.
    DecoderPeak,
    /// A fixed pipeline rank.
    Rank(usize),
}

impl Default for LeverState {
    fn default() -> Self {
        LeverState {
            recompute: BTreeSet::new(),
            offload: BTreeSet::new(),
            precision: PrecisionRecipe::Bf16,
            mem_efficient_permutation: false,
            imbalance_factor: None,
            report_rank: ReportRank::Peak,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct InventoryEntry {
    pub name: String,
    pub layer_kind: LayerKind,
    pub producer: String,
    pub consumer: String,
    /// Elements per micro-batch per layer on this rank.
    pub elements_per_layer_mb: u64,
    /// Storage bits per element after levers.
    pub bits_per_element: f64,
    /// Layer-micro-batch instances alive at the rank's activation peak.
    pub instances: u64,
    pub lifetime: Lifetime,
    pub bytes: u64,
    /// Where the entry went: kept, recomputed, offloaded or removed.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct LeverDelta {
    pub lever: String,
    pub activations_bytes: i64,
    pub total_bytes: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RankSummary {
    pub pp_rank: usize,
    pub params: u64,
    pub expert_params: u64,
    pub weights_and_grads: u64,
    pub optimizer: u64,
    pub activations: u64,
    pub total: u64,
    /// Layer-micro-batch instances alive at this rank's peak.
    pub inflight_layer_microbatches: u64,
    /// (micro-batch, chunk) activations alive at the peak.
    pub inflight_chunks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Gib {
    pub weights_and_grads: f64,
    pub optimizer: f64,
    pub activations: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
pub struct MemoryReport {
    /// The reported rank, chosen by `levers.report_rank`.
    pub pp_rank: usize,
    /// The pipeline rank with the largest total.
    pub peak_rank: usize,
    pub weights_and_grads: u64,
    pub optimizer: u64,
    pub activations: u64,
    pub total: u64,
    pub gib: Gib,
    pub gpu_memory: f64,
    pub fits: bool,
    /// Schedule used for the in-flight multiplier.
    pub schedule: String,
    pub num_microbatches_simulated: usize,
    pub levers: LeverState,
    pub lever_deltas: Vec<LeverDelta>,
    pub per_rank: Vec<RankSummary>,
    /// Activation inventory of the reported rank.
    pub inventory: Vec<InventoryEntry>,
    #[serde(skip)]
    ctx: Option<Arc<Context>>,
}

impl PartialEq for MemoryReport {
    fn eq(&self, o: &Self) -> bool {
        self.pp_rank == o.pp_rank
            && self.weights_and_grads == o.weights_and_grads
            && self.optimizer == o.optimizer
            && self.activations == o.activations
            && self.total == o.total
            && self.levers == o.levers
            && self.per_rank == o.per_rank
            && self.inventory == o.inventory
    }
}

#[derive(Debug)]
struct Context {
    model: ModelSpec,
    par: ParallelConfig,
    dims: CensusDims,
    /// Layer kinds held by each stage.
    stage_kinds: Vec<Vec<LayerKind>>,
    schedule: Schedule,
    rank_params: Vec<(u64, u64)>,
    /// Ranks whose stages hold decoder layers only.
    decoder_only: Vec<bool>,
    moment_bytes: u64,
    gpu_memory: f64,
}

fn stage_kinds(model: &ModelSpec, lay: &Layout) -> Vec<Vec<LayerKind>> {
    let idx = lay.decoder_indices();
    lay.stages
        .iter()
        .zip(idx)
        .map(|(st, ids)| {
            let mut v: Vec<LayerKind> = ids
                .iter()
                .map(|&i| {
                    if model.is_moe_layer(i) {
                        LayerKind::Moe
                    } else {
                        LayerKind::Dense
                    }
                })
                .collect();
            if st.contains(&Symbol::Mtp) {
                v.push(LayerKind::Mtp);
            }
            if st.contains(&Symbol::Loss) {
                v.push(LayerKind::Loss);
            }
            v
        })
        .collect()
}

/// (non-expert, expert) parameters held by each pipeline rank.
fn rank_params(model: &ModelSpec, par: &ParallelConfig, lay: &Layout) -> Vec<(u64, u64)> {
    let pp = par.attention.pp;
    let tp = par.attention.tp as u64;
    let ep = par.moe.ep as u64;
    let etp = par.moe.etp as u64;
    let local_experts = model.num_experts as u64 / ep.max(1);
    let expert_local = local_experts * model.expert_params() / etp.max(1);
    let idx = lay.decoder_indices();
    let mut out = vec![(0u64, 0u64); pp];
    for (s, st) in lay.stages.iter().enumerate() {
        let r = s % pp;
        let mut ne = 0u64;
        let mut ex = 0u64;
        for &i in &idx[s] {
            ne += model.attention_params() + model.layer_norm_params();
            if model.is_moe_layer(i) {
                ne += model.moe_dense_params();
                ex += expert_local;
            } else {
                ne += model.dense_mlp_params();
            }
        }
        if st.contains(&Symbol::Embedding) {
            ne += model.embedding_params();
        }
        if st.contains(&Symbol::Loss) {
            ne += model.head_params();
        }
        if st.contains(&Symbol::Mtp) {
            let experts_total = model.num_experts as u64 * model.expert_params();
            ne += model.mtp_params() - experts_total;
            ex += expert_local;
        }
        out[r].0 += ne.div_ceil(tp.max(1));
        out[r].1 += ex;
    }
    out
}

fn symbol_cost(s: Symbol) -> f64 {
    match s {
        Symbol::Decoder | Symbol::Mtp => 1.0,
        Symbol::Embedding => 0.1,
        Symbol::Loss => 0.2,
    }
}

fn build_context(job: &TrainingJobSpec) -> Result<Context> {
    let violations = validate_job(job);
    if let Some(v) = violations.first() {
        return Err(Error::InvalidArgument(format!("{}: {}", v.code, v.message)));
    }
    let model = job.model.clone();
    let par = job.parallel.clone();
    let pp = par.attention.pp;
    let vpp = par.vpp;
    let lay = crate::pipeline::job_layout(&model, pp, vpp, job.toggles.pipeline_layout.as_deref())?;
    let m_total = par.num_microbatches().max(1);
    // The activation peak is reached once every rank has finished warm-up.
    let mut m_sim = m_total.min(4 * pp);
    if vpp > 1 {
        m_sim = ((m_sim / pp) * pp).max(pp);
    }
    let stage_costs = lay
        .stages
        .iter()
        .map(|st| {
            let f = st.iter().map(|&s| symbol_cost(s)).sum::<f64>().max(0.01);
            StageCost {
                f,
                b: 2.0 * f,
                w: 0.0,
            }
        })
        .collect();
    let schedule = simulate(&SimInput {
        pp,
        vpp,
        num_microbatches: m_sim,
        stage_costs,
        extra_warmup: job.toggles.overlap.extra_warmup,
        wd_split: false,
        p2p_latency: 0.0,
    })?;
    let dims = CensusDims::new(
        &model,
        &par,
        job.toggles.capacity_factor,
        job.toggles.pad_to_capacity,
    );
    let decoder_only = (0..pp)
        .map(|r| (0..vpp).all(|c| lay.stages[c * pp + r].iter().all(|&s| s == Symbol::Decoder)))
        .collect();
    Ok(Context {
        decoder_only,
        stage_kinds: stage_kinds(&model, &lay),
        rank_params: rank_params(&model, &par, &lay),
        model,
        par,
        dims,
        schedule,
        moment_bytes: job.toggles.optimizer_moment_bytes as u64,
        gpu_memory: job.cluster.gpu_memory,
    })
}

/// Offloading a module moves the input it saves for backward.
fn offload_covers(m: Module, t: &SavedTensor) -> bool {
    match m {
        Module::Attention => t.name == "attn_norm_out",
        Module::ExpertFc1 => t.name == "expert_fc1_in",
        Module::MoeAct => t.name == "expert_fc1_out",
        Module::Mlp => t.name == "mlp_norm_out" && t.consumer == "mlp",
        Module::Layernorm => t.consumer == "layernorm",
        Module::MlaUpProj => t.consumer == "mla_up_proj",
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Fate {
    Kept,
    Recomputed,
    Offloaded,
    Removed,
}

fn fate(t: &SavedTensor, lv: &LeverState) -> Fate {
    if lv.mem_efficient_permutation && t.name == "expert_out" {
        return Fate::Removed;
    }
    if lv.recompute.iter().any(|m| m.as_str() == t.producer) {
        return Fate::Recomputed;
    }
    if lv.offload.iter().any(|&m| offload_covers(m, t)) {
        return Fate::Offloaded;
    }
    Fate::Kept
}

fn bits(t: &SavedTensor, lv: &LeverState) -> (u64, u64) {
    if t.lowp_eligible && lv.precision != PrecisionRecipe::Bf16 {
        lv.precision.eligible_bits_per_element()
    } else {
        (t.bits, 1)
    }
}

fn scaled_elements(t: &SavedTensor, lv: &LeverState) -> u64 {
    match (t.routed, lv.imbalance_factor) {
        (true, Some(f)) if f > 0.0 => (t.elements as f64 * f).ceil() as u64,
        _ => t.elements,
    }
}

fn entry_bytes(t: &SavedTensor, lv: &LeverState, instances: u64) -> u64 {
    let (num, den) = bits(t, lv);
    let e = scaled_elements(t, lv) as u128 * instances as u128 * num as u128;
    e.div_ceil(den as u128 * 8) as u64
}

struct RankActs {
    bytes: u64,
    layer_mbs: u64,
    chunks: u64,
    inventory: Vec<InventoryEntry>,
}

fn rank_activations(ctx: &Context, lv: &LeverState, r: usize) -> RankActs {
    let pp = ctx.par.attention.pp;
    let vpp = ctx.par.vpp;
    let census: BTreeMap<LayerKind, Vec<SavedTensor>> = [
        LayerKind::Dense,
        LayerKind::Moe,
        LayerKind::Mtp,
        LayerKind::Loss,
    ]
    .into_iter()
    .map(|k| (k, layer_census(&ctx.model, &ctx.dims, k)))
    .collect();
    let kept_bytes = |k: LayerKind| -> u64 {
        census[&k]
            .iter()
            .filter(|t| fate(t, lv) == Fate::Kept)
            .map(|t| entry_bytes(t, lv, 1))
            .sum()
    };
    let chunk_weight = |c: usize| -> f64 {
        let s = c * pp + r;
        ctx.stage_kinds[s]
            .iter()
            .map(|&k| kept_bytes(k) as f64)
            .sum::<f64>()
            + 1.0
    };
    let (_, alive) = ctx.schedule.alive_at_peak(r, chunk_weight);
    let mut instances: BTreeMap<LayerKind, u64> = BTreeMap::new();
    let mut present: BTreeSet<LayerKind> = BTreeSet::new();
    let mut layer_mbs = 0;
    for c in 0..vpp {
        let s = c * pp + r;
        for &k in &ctx.stage_kinds[s] {
            present.insert(k);
            *instances.entry(k).or_default() += alive[c] as u64;
            if k != LayerKind::Loss {
                layer_mbs += alive[c] as u64;
            }
        }
    }
    let mut inventory = Vec::new();
    let mut total = 0u64;
    // Offloaded tensors stay resident for one layer at a time.
    let mut offload_resident: BTreeMap<LayerKind, u64> = BTreeMap::new();
    for (&k, ts) in &census {
        if !present.contains(&k) {
            continue;
        }
        let n = instances.get(&k).copied().unwrap_or(0);
        for t in ts {
            let f = fate(t, lv);
            let (num, den) = bits(t, lv);
            let (inst, status) = match f {
                Fate::Kept => (n, "kept"),
                Fate::Offloaded => (n.min(1), "offloaded"),
                Fate::Recomputed => (0, "recomputed"),
                Fate::Removed => (0, "removed"),
            };
            let bytes = entry_bytes(t, lv, inst);
            if f == Fate::Offloaded {
                *offload_resident.entry(k).or_default() += bytes;
            } else {
                total += bytes;
            }
            inventory.push(InventoryEntry {
                name: t.name.to_string(),
                layer_kind: k,
                producer: t.producer.to_string(),
                consumer: t.consumer.to_string(),
                elements_per_layer_mb: scaled_elements(t, lv),
                bits_per_element: num as f64 / den as f64,
                instances: inst,
                lifetime: t.lifetime,
                bytes,
                status: status.to_string(),
            });
        }
    }
    total += offload_resident.values().copied().max().unwrap_or(0);
    RankActs {
        bytes: total,
        layer_mbs,
        chunks: alive.iter().map(|&a| a as u64).sum(),
        inventory,
    }
}

fn render_report(ctx: Arc<Context>, lv: LeverState, deltas: Vec<LeverDelta>) -> MemoryReport {
    let pp = ctx.par.attention.pp;
    let dpcp = (ctx.par.attention.dp * ctx.par.attention.cp) as u64;
    let edp = ctx.par.moe.edp as u64;
    let opt_bytes = MASTER_BYTES + 2 * ctx.moment_bytes;
    let mut per_rank = Vec::with_capacity(pp);
    let mut invs = Vec::with_capacity(pp);
    for r in 0..pp {
        let (ne, ex) = ctx.rank_params[r];
        let acts = rank_activations(&ctx, &lv, r);
        let wg = WEIGHT_GRAD_BYTES * (ne + ex);
        let opt = opt_bytes * (ne.div_ceil(dpcp.max(1)) + ex.div_ceil(edp.max(1)));
        per_rank.push(RankSummary {
            pp_rank: r,
            params: ne + ex,
            expert_params: ex,
            weights_and_grads: wg,
            optimizer: opt,
            activations: acts.bytes,
            total: wg + opt + acts.bytes,
            inflight_layer_microbatches: acts.layer_mbs,
            inflight_chunks: acts.chunks,
        });
        invs.push(acts.inventory);
    }
    let argmax = |keep: &dyn Fn(usize) -> bool| {
        per_rank
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .max_by(|a, b| a.1.total.cmp(&b.1.total).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
    };
    let peak = argmax(&|_| true).unwrap_or(0);
    let top = match lv.report_rank {
        ReportRank::Peak => peak,
        ReportRank::DecoderPeak => argmax(&|i| ctx.decoder_only[i]).unwrap_or(peak),
        ReportRank::Rank(r) => r.min(pp - 1),
    };
    let s = per_rank[top].clone();
    MemoryReport {
        pp_rank: top,
        peak_rank: peak,
        weights_and_grads: s.weights_and_grads,
        optimizer: s.optimizer,
        activations: s.activations,
        total: s.total,
        gib: Gib {
            weights_and_grads: s.weights_and_grads as f64 / GIB,
            optimizer: s.optimizer as f64 / GIB,
            activations: s.activations as f64 / GIB,
            total: s.total as f64 / GIB,
        },
        gpu_memory: ctx.gpu_memory,
        fits: (s.total as f64) <= ctx.gpu_memory,
        schedule: if ctx.par.vpp > 1 {
            "interleaved_1f1b".into()
        } else {
            "1f1b".into()
        },
        num_microbatches_simulated: ctx.schedule.num_microbatches,
        levers: lv,
        lever_deltas: deltas,
        per_rank,
        inventory: invs.swap_remove(top),
        ctx: Some(ctx),
    }
}

/// Baseline estimate: BF16 storage and no levers.
pub fn estimate_baseline(job: &TrainingJobSpec) -> Result<MemoryReport> {
    let ctx = Arc::new(build_context(job)?);
    Ok(render_report(ctx, LeverState::default(), vec![]))
}

/// Estimate with the job's own toggles and precision recipe applied.
pub fn estimate(job: &TrainingJobSpec) -> Result<MemoryReport> {
    let mut r = estimate_baseline(job)?;
    let tg = &job.toggles;
    if let Some(f) = tg.imbalance_factor {
        r = r.with_imbalance(f)?;
    }
    if tg.mem_efficient_permutation {
        r = r.apply_mem_efficient_permutation()?;
    }
    if job.parallel.precision_recipe != PrecisionRecipe::Bf16 {
        r = r.apply_precision(job.parallel.precision_recipe)?;
    }
    if !tg.recompute.is_empty() {
        r = r.apply_recompute(&tg.recompute)?;
    }
    if !tg.offload.is_empty() {
        r = r.apply_offload(&tg.offload)?;
    }
    Ok(r)
}

impl MemoryReport {
    fn derive(&self, name: String, f: impl FnOnce(&mut LeverState)) -> Result<MemoryReport> {
        let ctx = self
            .ctx
            .clone()
            .ok_or_else(|| Error::InvalidArgument("report has no estimator context".into()))?;
        let mut lv = self.levers.clone();
        f(&mut lv);
        let mut deltas = self.lever_deltas.clone();
        let next = render_report(ctx, lv, vec![]);
        deltas.push(LeverDelta {
            lever: name,
            activations_bytes: next.activations as i64 - self.activations as i64,
            total_bytes: next.total as i64 - self.total as i64,
        });
        Ok(MemoryReport {
            lever_deltas: deltas,
            ..next
        })
    }

    pub fn apply_recompute(&self, modules: &[Module]) -> Result<MemoryReport> {
        let names: Vec<&str> = modules.iter().map(|m| m.as_str()).collect();
        self.derive(format!("recompute:{}", names.join(",")), |lv| {
            lv.recompute.extend(modules.iter().copied())
        })
    }

    pub fn apply_offload(&self, modules: &[Module]) -> Result<MemoryReport> {
        let names: Vec<&str> = modules.iter().map(|m| m.as_str()).collect();
        self.derive(format!("offload:{}", names.join(",")), |lv| {
            lv.offload.extend(modules.iter().copied())
        })
    }

    pub fn apply_mem_efficient_permutation(&self) -> Result<MemoryReport> {
        self.derive("mem_efficient_permutation".into(), |lv| {
            lv.mem_efficient_permutation = true
        })
    }

    pub fn apply_precision(&self, recipe: PrecisionRecipe) -> Result<MemoryReport> {
        let name = serde_json::to_value(recipe)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        self.derive(format!("precision:{name}"), |lv| lv.precision = recipe)
    }

    /// Re-target the headline figures to another rank.
    pub fn at_rank(&self, sel: ReportRank) -> Result<MemoryReport> {
        let ctx = self
            .ctx
            .clone()
            .ok_or_else(|| Error::InvalidArgument("report has no estimator context".into()))?;
        let mut lv = self.levers.clone();
        lv.report_rank = sel;
        Ok(MemoryReport {
            lever_deltas: self.lever_deltas.clone(),
            ..render_report(ctx, lv, vec![])
        })
    }

    pub fn with_imbalance(&self, factor: f64) -> Result<MemoryReport> {
        if !(factor >= 1.0 && factor.is_finite()) {
            return invalid("imbalance factor must be a finite value >= 1");
        }
        self.derive(format!("imbalance:{factor}"), |lv| {
            lv.imbalance_factor = Some(factor)
        })
    }

    /// Apply a lever set on top of this report.
    pub fn apply_levers(&self, l: &LeverRequest) -> Result<MemoryReport> {
        let mut r = self.clone();
        if l.mem_efficient_permutation {
            r = r.apply_mem_efficient_permutation()?;
        }
        if let Some(p) = l.precision {
            r = r.apply_precision(p)?;
        }
        if !l.recompute.is_empty() {
            r = r.apply_recompute(&l.recompute)?;
        }
        if !l.offload.is_empty() {
            r = r.apply_offload(&l.offload)?;
        }
        if let Some(sel) = l.report_rank {
            r = r.at_rank(sel)?;
        }
        Ok(r)
    }

    /// Bytes of the reported rank's inventory produced by `module` that are
    /// still resident.
    pub fn inventory_bytes_by_producer(&self, producer: &str) -> u64 {
        self.inventory
            .iter()
            .filter(|e| e.producer == producer && e.status == "kept")
            .map(|e| e.bytes)
            .sum()
    }
}

/// Extra levers requested alongside an estimate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct LeverRequest {
    #[serde(default)]
    pub recompute: Vec<Module>,
    #[serde(default)]
    pub offload: Vec<Module>,
    #[serde(default)]
    pub precision: Option<PrecisionRecipe>,
    #[serde(default)]
    pub mem_efficient_permutation: bool,
    #[serde(default)]
    pub report_rank: Option<ReportRank>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testutil::toy_job;

    #[test]
    fn optimizer_bytes_examples() {
        assert_eq!(optimizer_bytes_per_param(1, 4), 18.0);
        assert_eq!(optimizer_bytes_per_param(4, 2), 8.0);
    }

    #[test]
    fn offload_peak_example() {
        let g = 1.0;
        assert_eq!(offload_peak(g, 2.0 * g, 60), (62.0, 3.0));
    }

    #[test]
    fn toy_weights() {
        let r = estimate(&toy_job()).unwrap();
        let params = toy_job().model.derived_params_total();
        assert_eq!(r.weights_and_grads, 6 * params);
        assert_eq!(r.optimizer, 12 * params);
        assert_eq!(r.per_rank[0].inflight_layer_microbatches, 1);
    }

    #[test]
    fn fp8_halves_eligible() {
        let base = estimate_baseline(&toy_job()).unwrap();
        let eligible: u64 = base
            .inventory
            .iter()
            .filter(|e| {
                layer_census(
                    &toy_job().model,
                    &CensusDims::new(&toy_job().model, &toy_job().parallel, None, false),
                    e.layer_kind,
                )
                .iter()
                .any(|t| t.name == e.name && t.lowp_eligible)
            })
            .map(|e| e.bytes)
            .sum();
        let fp8 = base.apply_precision(PrecisionRecipe::Fp8Block).unwrap();
        assert_eq!(base.activations - fp8.activations, eligible / 2);
    }

    #[test]
    fn lever_order_independent() {
        let base = estimate_baseline(&toy_job()).unwrap();
        let a = base
            .apply_recompute(&[Module::MoeAct])
            .unwrap()
            .apply_mem_efficient_permutation()
            .unwrap();
        let b = base
            .apply_mem_efficient_permutation()
            .unwrap()
            .apply_recompute(&[Module::MoeAct])
            .unwrap();
        assert_eq!(a.total, b.total);
        assert!(a.total < base.total);
    }

    #[test]
    fn zero_layers_has_only_embedding() {
        let mut j = toy_job();
        j.model.num_layers = 0;
        let r = estimate(&j).unwrap();
        assert_eq!(r.total, 0);
        j.model.has_embedding = true;
        j.model.vocab_size = 10;
        let r = estimate(&j).unwrap();
        let emb = j.model.embedding_params() + j.model.head_params();
        assert_eq!(r.weights_and_grads, 6 * emb);
    }
}
