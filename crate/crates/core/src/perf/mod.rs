//! Communication and compute cost model.
//!
//! [`cost`] combines per-layer all-to-all volumes, an α–β time model, a
//! compute-only pipeline simulation and the FWD-BWD merge overlap into a
//! per-iteration estimate for one GPU.

pub mod advisor;
pub mod calibrate;
pub mod comm;
pub mod flops;
pub mod overlap;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{validate_job, Dispatcher, ModelSpec, PrecisionRecipe, TrainingJobSpec};
use crate::pipeline::sim::{simulate, EventKind, SimInput, StageCost};
use crate::pipeline::{job_layout, Symbol};

pub use advisor::{advise, Recommendation, Severity};
pub use calibrate::{calibrate, parse_latency_csv, Calibration, CalibrationWorkload, LatencyRow};
pub use comm::{
    a2a_send_volume, comm_time, dispatch_ops_per_forward, hierarchical_dispatch_volumes,
    naive_tier_volumes, CommEvent, CommKind, DispatchShape, Tier, TierVolumes,
};
pub use flops::{flops_share, forward_flops, FlopsShare};
pub use overlap::{overlap_exposed_comm, OverlapPair, OverlapResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct LayerComm {
    /// Per-GPU dispatch send volume from the flat formula.
    pub a2a_send_bytes: f64,
    pub naive: TierVolumes,
    pub hierarchical: TierVolumes,
    /// EP ranks that share one NVLink domain.
    pub ep_ranks_per_domain: u64,
    pub dispatch_seconds: f64,
    pub combine_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CostReport {
    pub tokens_per_microbatch: u64,
    pub num_microbatches: usize,
    pub moe_layers: usize,
    pub dispatch_ops_per_forward: usize,
    pub dispatcher: Dispatcher,
    pub layer_comm: LayerComm,
    pub flops_share: FlopsShare,
    pub model_flops_per_token: f64,
    /// Seconds per iteration, worst pipeline rank.
    pub compute_seconds: f64,
    pub pipeline_makespan: f64,
    pub bubble_ratio: f64,
    pub comm_seconds: f64,
    pub exposed_comm_seconds: f64,
    pub overlap_ratio: f64,
    pub iteration_seconds: f64,
    pub comm_share: f64,
    pub achieved_tflops_per_gpu: f64,
}

/// EP ranks of one group inside a domain, rounded down to a divisor of EP.
fn ep_ranks_per_domain(domain: usize, etp: usize, ep: usize) -> u64 {
    let fit = if etp > 0 && domain.is_multiple_of(etp) {
        domain / etp
    } else {
        1
    };
    let cap = fit.clamp(1, ep.max(1));
    (1..=cap).rev().find(|d| ep.is_multiple_of(*d)).unwrap_or(1) as u64
}

/// Forward FLOPs per GPU for one micro-batch of each layer type.
struct LayerFlops {
    dense: f64,
    moe: f64,
    mtp: f64,
    loss: f64,
}

fn layer_flops(m: &ModelSpec, seq: u64, mbs: u64, split: f64) -> LayerFlops {
    let s = seq as f64;
    let a = &m.attention_kind;
    let sdpa = 2.0 * s * s * a.num_heads() as f64 * (a.qk_head_dim() + a.v_head_dim()) as f64 * 0.5;
    let attn = sdpa + 2.0 * m.attention_params() as f64 * s;
    let k = m.top_k.min(m.num_experts) as f64;
    let moe_mlp = 2.0 * (k * m.expert_params() as f64 + m.moe_dense_params() as f64) * s;
    let dense_mlp = 2.0 * m.dense_mlp_params() as f64 * s;
    let h = m.hidden_dim as f64;
    let per = mbs as f64 / split;
    LayerFlops {
        dense: (attn + dense_mlp) * per,
        moe: (attn + moe_mlp) * per,
        mtp: (attn + moe_mlp + 2.0 * 2.0 * h * h * s) * per,
        loss: 2.0 * m.vocab_size as f64 * h * s * per,
    }
}

pub fn cost(job: &TrainingJobSpec) -> Result<CostReport> {
    if let Some(v) = validate_job(job).first() {
        return Err(Error::InvalidArgument(format!("{}: {}", v.code, v.message)));
    }
    let m = &job.model;
    let par = &job.parallel;
    let c = &job.cluster;
    let a = par.attention;
    let pp = a.pp;
    let vpp = par.vpp;
    let lay = job_layout(m, pp, vpp, job.toggles.pipeline_layout.as_deref())?;
    let split = (a.tp * a.cp) as u64;
    let tokens = (par.mbs * par.seq_len) as u64 / split;

    let ep = par.moe.ep as u64;
    let epd = ep_ranks_per_domain(c.nvlink_domain_size, par.moe.etp, par.moe.ep);
    let dispatch_width = if par.precision_recipe == PrecisionRecipe::Bf16 {
        2
    } else {
        1
    };
    let shape = |width| DispatchShape {
        tokens,
        top_k: m.top_k as u64,
        hidden: m.expert_io_dim() as u64,
        num_experts: m.num_experts as u64,
        ep,
        domain_size: epd,
        width,
    };
    let naive = naive_tier_volumes(&shape(dispatch_width))?.to_f64();
    let hier = hierarchical_dispatch_volumes(&shape(dispatch_width))?.to_f64();
    let tiers = |width| -> Result<TierVolumes> {
        let s = shape(width);
        Ok(match job.toggles.dispatcher {
            Dispatcher::A2a => naive_tier_volumes(&s)?.to_f64(),
            Dispatcher::Hybridep => {
                let t = comm::token_dedup_volumes(&s)?.to_f64();
                let h = hierarchical_dispatch_volumes(&s)?.to_f64();
                TierVolumes {
                    inter_node: h.inter_node,
                    intra_domain: t.intra_domain,
                }
            }
        })
    };
    let dispatch_seconds = if ep > 1 {
        comm::tiered_time(&tiers(dispatch_width)?, c)
    } else {
        0.0
    };
    let combine_seconds = if ep > 1 {
        comm::tiered_time(&tiers(2)?, c)
    } else {
        0.0
    };
    let a2a_send_bytes = comm::ratio_f64(&a2a_send_volume(
        tokens,
        m.top_k as u64,
        m.expert_io_dim() as u64,
        ep,
        dispatch_width,
    )?);
    let layer_comm = LayerComm {
        a2a_send_bytes,
        naive,
        hierarchical: hier,
        ep_ranks_per_domain: epd,
        dispatch_seconds,
        combine_seconds,
    };
    let moe_comm = dispatch_seconds + combine_seconds;

    let ov = &job.toggles.overlap;
    let penalty = if ov.ep_a2a {
        ov.gemm_penalty.max(1.0)
    } else {
        1.0
    };
    let lf = layer_flops(m, par.seq_len as u64, par.mbs as u64, split as f64);
    let idx = lay.decoder_indices();
    let mut stage_costs = Vec::with_capacity(lay.stages.len());
    let mut stage_comm = Vec::with_capacity(lay.stages.len());
    for (st, ids) in lay.stages.iter().zip(&idx) {
        let moe_layers = ids.iter().filter(|&&i| m.is_moe_layer(i)).count();
        let dense_layers = ids.len() - moe_layers;
        let mut fl = moe_layers as f64 * lf.moe + dense_layers as f64 * lf.dense;
        let mut nmoe = moe_layers;
        if st.contains(&Symbol::Mtp) {
            fl += lf.mtp;
            nmoe += 1;
        }
        if st.contains(&Symbol::Loss) {
            fl += lf.loss;
        }
        let f = fl / c.peak_flops * penalty;
        stage_costs.push(if ov.wd_split {
            StageCost { f, b: f, w: f }
        } else {
            StageCost {
                f,
                b: 2.0 * f,
                w: 0.0,
            }
        });
        stage_comm.push(nmoe as f64 * moe_comm);
    }
    let num_microbatches = par.num_microbatches().max(1);
    let sched = simulate(&SimInput {
        pp,
        vpp,
        num_microbatches,
        stage_costs: stage_costs.clone(),
        extra_warmup: ov.extra_warmup,
        wd_split: ov.wd_split,
        p2p_latency: 0.0,
    })?;

    // Per-rank exposed communication; the worst rank bounds the iteration.
    let pairs = sched.fwd_bwd_pairs();
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    let mut compute_seconds = 0.0f64;
    for r in 0..pp {
        let stage_of = |chunk: usize| chunk * pp + r;
        let mut total = 0.0;
        let mut compute = 0.0;
        for e in sched.events.iter().filter(|e| e.rank == r) {
            compute += e.end - e.start;
            if e.kind != EventKind::W {
                total += stage_comm[e.stage];
            }
        }
        compute_seconds = compute_seconds.max(compute);
        let res = if ov.ep_a2a {
            let mine: Vec<_> = pairs.iter().filter(|p| p.rank == r).collect();
            let ov_pairs: Vec<OverlapPair> = mine
                .iter()
                .map(|p| {
                    let fs = stage_of(p.forward.chunk);
                    let bs = stage_of(p.backward.chunk);
                    OverlapPair {
                        comm: stage_comm[fs] + stage_comm[bs],
                        window: stage_costs[fs].f + stage_costs[bs].b,
                        wgrad: stage_costs[bs].w,
                    }
                })
                .collect();
            let paired: f64 = ov_pairs.iter().map(|p| p.comm).sum();
            let unpaired = (total - paired).max(0.0);
            overlap_exposed_comm(&ov_pairs, &[unpaired], ov.wd_split)?
        } else {
            OverlapResult {
                total_comm: total,
                exposed: total,
                overlap_ratio: 0.0,
            }
        };
        if res.exposed >= worst.1 {
            worst = (res.total_comm, res.exposed, res.overlap_ratio);
        }
    }
    let iteration_seconds = sched.makespan + worst.1;

    let fwd = forward_flops(m, par.seq_len as u64);
    let loss_fwd = 2.0 * (m.vocab_size * m.hidden_dim) as f64 * par.seq_len as f64;
    let iter_flops = 3.0 * (fwd.total() + loss_fwd) * par.gbs as f64 / c.num_gpus.max(1) as f64;
    Ok(CostReport {
        tokens_per_microbatch: tokens,
        num_microbatches,
        moe_layers: m.num_moe_layers(),
        dispatch_ops_per_forward: dispatch_ops_per_forward(m),
        dispatcher: job.toggles.dispatcher,
        layer_comm,
        flops_share: flops_share(m, par.seq_len as u64)?,
        model_flops_per_token: crate::model::active_flops_per_token(m.params_active_or_derived()),
        compute_seconds,
        pipeline_makespan: sched.makespan,
        bubble_ratio: sched.bubble_ratio,
        comm_seconds: worst.0,
        exposed_comm_seconds: worst.1,
        overlap_ratio: worst.2,
        iteration_seconds,
        comm_share: if iteration_seconds > 0.0 {
            worst.1 / iteration_seconds
        } else {
            0.0
        },
        achieved_tflops_per_gpu: if iteration_seconds > 0.0 {
            iter_flops / iteration_seconds / 1e12
        } else {
            0.0
        },
    })
}
