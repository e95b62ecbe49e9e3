//! Deterministic discrete-event simulation of 1F1B and interleaved 1F1B.
//!
//! Each rank executes a fixed op order; an op starts once its rank is free and
//! its cross-stage dependency has finished. Stage `s` lives on rank `s % pp`
//! as chunk `s / pp`.

use std::collections::VecDeque;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct StageCost {
    pub f: f64,
    /// Data-gradient backward.
    pub b: f64,
    /// Weight-gradient backward; folded into `b` unless the W/D split is on.
    #[serde(default)]
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SimInput {
    pub pp: usize,
    #[serde(default = "one")]
    pub vpp: usize,
    pub num_microbatches: usize,
    /// One entry per stage, `pp * vpp` long.
    pub stage_costs: Vec<StageCost>,
    #[serde(default)]
    pub extra_warmup: bool,
    #[serde(default)]
    pub wd_split: bool,
    /// Point-to-point activation transfer time between stages.
    #[serde(default)]
    pub p2p_latency: f64,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
pub enum EventKind {
    F,
    B,
    W,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Event {
    pub rank: usize,
    pub kind: EventKind,
    pub microbatch: usize,
    pub chunk: usize,
    pub stage: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct OpRef {
    pub microbatch: usize,
    pub chunk: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Schedule {
    pub pp: usize,
    pub vpp: usize,
    pub num_microbatches: usize,
    pub events: Vec<Event>,
    pub makespan: f64,
    pub bubble_ratio: f64,
    /// Peak count of (micro-batch, chunk) activations held per rank.
    pub peak_inflight: Vec<usize>,
    /// Warm-up forward count per rank.
    pub warmup: Vec<usize>,
    /// Per-rank F/B order (W excluded).
    #[serde(skip)]
    order: Vec<Vec<(EventKind, OpRef)>>,
}

/// Warm-up forwards before the first backward on `rank`.
pub fn warmup_count(pp: usize, vpp: usize, m: usize, rank: usize, extra: bool) -> usize {
    let total = m * vpp;
    let base = if vpp == 1 {
        pp - rank - 1
    } else {
        (pp - rank - 1) * 2 + (vpp - 1) * pp
    };
    (base + usize::from(extra)).min(total)
}

fn chunk_op(k: usize, pp: usize, vpp: usize, forward: bool) -> OpRef {
    let group = pp * vpp;
    let in_group = k % group;
    let mut chunk = in_group / pp;
    if !forward {
        chunk = vpp - 1 - chunk;
    }
    OpRef {
        microbatch: (k / group) * pp + k % pp,
        chunk,
    }
}

/// Per-rank F/B order.
pub fn op_order(pp: usize, vpp: usize, m: usize, extra: bool) -> Vec<Vec<(EventKind, OpRef)>> {
    (0..pp)
        .map(|r| {
            let total = m * vpp;
            let w = warmup_count(pp, vpp, m, r, extra);
            let op = |k, fwd| {
                if vpp == 1 {
                    OpRef {
                        microbatch: k,
                        chunk: 0,
                    }
                } else {
                    chunk_op(k, pp, vpp, fwd)
                }
            };
            let mut v = Vec::with_capacity(2 * total);
            for k in 0..w {
                v.push((EventKind::F, op(k, true)));
            }
            for i in 0..total - w {
                v.push((EventKind::F, op(w + i, true)));
                v.push((EventKind::B, op(i, false)));
            }
            for i in total - w..total {
                v.push((EventKind::B, op(i, false)));
            }
            v
        })
        .collect()
}

pub fn simulate(input: &SimInput) -> Result<Schedule> {
    let p = input.pp;
    let v = input.vpp;
    let m = input.num_microbatches;
    if p == 0 || v == 0 || m == 0 {
        return invalid("pp, vpp and num_microbatches must be positive");
    }
    if v > 1 && !m.is_multiple_of(p) {
        return invalid(format!(
            "interleaved schedule needs num_microbatches ({m}) divisible by pp ({p})"
        ));
    }
    let stages = p * v;
    if input.stage_costs.len() != stages {
        return Err(Error::LayoutArity {
            expected: stages,
            actual: input.stage_costs.len(),
        });
    }
    for c in &input.stage_costs {
        if !(c.f >= 0.0 && c.b >= 0.0 && c.w >= 0.0) {
            return invalid("stage costs must be finite and non-negative");
        }
    }
    let order = op_order(p, v, m, input.extra_warmup);
    let mut fwd_end = vec![vec![f64::NAN; m]; stages];
    let mut bwd_end = vec![vec![f64::NAN; m]; stages];
    let mut free = vec![0.0f64; p];
    let mut idx = vec![0usize; p];
    let mut pending_w: Vec<VecDeque<(OpRef, usize)>> = vec![VecDeque::new(); p];
    let mut events: Vec<Event> = Vec::with_capacity(3 * m * stages);
    let lat = input.p2p_latency;

    let push = |events: &mut Vec<Event>, r, kind, op: OpRef, s, start, end| {
        events.push(Event {
            rank: r,
            kind,
            microbatch: op.microbatch,
            chunk: op.chunk,
            stage: s,
            start,
            end,
        })
    };

    let mut remaining: usize = order.iter().map(|o| o.len()).sum();
    while remaining > 0 {
        let mut progressed = false;
        for r in 0..p {
            while idx[r] < order[r].len() {
                let (kind, op) = order[r][idx[r]];
                let s = op.chunk * p + r;
                let mb = op.microbatch;
                let ready = match kind {
                    EventKind::F => {
                        if s == 0 {
                            Some(0.0)
                        } else {
                            let e = fwd_end[s - 1][mb];
                            (!e.is_nan()).then_some(e + lat)
                        }
                    }
                    _ => {
                        let own = fwd_end[s][mb];
                        let dep = if s + 1 == stages {
                            own
                        } else {
                            let e = bwd_end[s + 1][mb];
                            if e.is_nan() {
                                f64::NAN
                            } else {
                                e + lat
                            }
                        };
                        (!dep.is_nan() && !own.is_nan()).then(|| dep.max(own))
                    }
                };
                let Some(ready) = ready else { break };
                // Fill the idle gap with deferred weight-gradient work.
                if input.wd_split {
                    while let Some(&(wop, ws)) = pending_w[r].front() {
                        let cost = input.stage_costs[ws].w;
                        if free[r] + cost <= ready {
                            push(
                                &mut events,
                                r,
                                EventKind::W,
                                wop,
                                ws,
                                free[r],
                                free[r] + cost,
                            );
                            free[r] += cost;
                            pending_w[r].pop_front();
                        } else {
                            break;
                        }
                    }
                }
                let c = input.stage_costs[s];
                let dur = match kind {
                    EventKind::F => c.f,
                    _ if input.wd_split => c.b,
                    _ => c.b + c.w,
                };
                let start = free[r].max(ready);
                let end = start + dur;
                free[r] = end;
                match kind {
                    EventKind::F => fwd_end[s][mb] = end,
                    _ => {
                        bwd_end[s][mb] = end;
                        if input.wd_split {
                            pending_w[r].push_back((op, s));
                        }
                    }
                }
                push(&mut events, r, kind, op, s, start, end);
                idx[r] += 1;
                remaining -= 1;
                progressed = true;
            }
        }
        if !progressed {
            let rank = (0..p).find(|&r| idx[r] < order[r].len()).unwrap_or(0);
            return Err(Error::Deadlock { rank });
        }
    }
    for r in 0..p {
        while let Some((wop, ws)) = pending_w[r].pop_front() {
            let cost = input.stage_costs[ws].w;
            push(
                &mut events,
                r,
                EventKind::W,
                wop,
                ws,
                free[r],
                free[r] + cost,
            );
            free[r] += cost;
        }
    }
    events.sort_by(|a, b| {
        a.start
            .total_cmp(&b.start)
            .then(a.rank.cmp(&b.rank))
            .then(a.end.total_cmp(&b.end))
    });
    let makespan = events.iter().map(|e| e.end).fold(0.0, f64::max);
    let busy: f64 = events.iter().map(|e| e.end - e.start).sum();
    let bubble_ratio = if makespan > 0.0 {
        1.0 - busy / (p as f64 * makespan)
    } else {
        0.0
    };
    let mut sched = Schedule {
        pp: p,
        vpp: v,
        num_microbatches: m,
        events,
        makespan,
        bubble_ratio,
        peak_inflight: vec![],
        warmup: (0..p)
            .map(|r| warmup_count(p, v, m, r, input.extra_warmup))
            .collect(),
        order,
    };
    sched.peak_inflight = (0..p)
        .map(|r| sched.peak_inflight_weighted(r, |_| 1.0).round() as usize)
        .collect();
    Ok(sched)
}

/// A forward and a backward executed back to back in the steady phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct FwdBwdPair {
    pub rank: usize,
    pub forward: OpRef,
    pub backward: OpRef,
    pub same_microbatch: bool,
}

impl Schedule {
    /// Peak of the summed weights of chunks whose activations are alive on
    /// `rank`. Activations live from forward start until the last backward
    /// pass over that chunk finishes; releases at a timestamp are applied
    /// before allocations at the same timestamp.
    pub fn peak_inflight_weighted(&self, rank: usize, weight: impl Fn(usize) -> f64) -> f64 {
        self.alive_at_peak(rank, weight).0
    }

    /// Peak weight on `rank` and, at the first moment it is reached, the
    /// number of live micro-batches per chunk.
    pub fn alive_at_peak(&self, rank: usize, weight: impl Fn(usize) -> f64) -> (f64, Vec<usize>) {
        let has_w = self.events.iter().any(|e| e.kind == EventKind::W);
        let mut deltas: Vec<(f64, i32, usize)> = Vec::new();
        for e in self.events.iter().filter(|e| e.rank == rank) {
            match e.kind {
                EventKind::F => deltas.push((e.start, 1, e.chunk)),
                EventKind::B if !has_w => deltas.push((e.end, -1, e.chunk)),
                EventKind::W => deltas.push((e.end, -1, e.chunk)),
                _ => {}
            }
        }
        deltas.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut live = vec![0usize; self.vpp];
        let mut best = vec![0usize; self.vpp];
        let mut cur = 0.0;
        let mut peak = 0.0f64;
        for (_, d, c) in deltas {
            let w = weight(c);
            if d > 0 {
                live[c] += 1;
                cur += w;
            } else {
                live[c] -= 1;
                cur -= w;
            }
            if cur > peak + 1e-12 * peak.abs().max(1.0) {
                peak = cur;
                best.clone_from(&live);
            }
        }
        (peak, best)
    }

    /// Mergeable steady-phase pairs: adjacent forward/backward on a rank
    /// belonging to different micro-batches. Warm-up forwards, cool-down
    /// backwards and dependent adjacencies stay exposed.
    pub fn fwd_bwd_pairs(&self) -> Vec<FwdBwdPair> {
        self.steady_adjacencies()
            .into_iter()
            .filter(|p| !p.same_microbatch)
            .collect()
    }

    /// Every steady-phase (forward, backward) adjacency per rank.
    pub fn steady_adjacencies(&self) -> Vec<FwdBwdPair> {
        let mut out = Vec::new();
        for (r, ord) in self.order.iter().enumerate() {
            let w = self.warmup[r];
            let total = ord.len() / 2;
            for i in 0..total - w {
                let (_, f) = ord[w + 2 * i];
                let (_, b) = ord[w + 2 * i + 1];
                out.push(FwdBwdPair {
                    rank: r,
                    forward: f,
                    backward: b,
                    same_microbatch: f.microbatch == b.microbatch,
                });
            }
        }
        out
    }

    /// Chrome trace-event JSON (times in microseconds when costs are seconds
    /// times 1e6; costs are emitted as given).
    pub fn chrome_trace(&self) -> serde_json::Value {
        let evs: Vec<serde_json::Value> = self
            .events
            .iter()
            .map(|e| {
                serde_json::json!({
                    "name": format!("{:?}{}", e.kind, e.microbatch),
                    "cat": format!("{:?}", e.kind),
                    "ph": "X",
                    "ts": e.start,
                    "dur": e.end - e.start,
                    "pid": 0,
                    "tid": e.rank,
                    "args": {"microbatch": e.microbatch, "chunk": e.chunk, "stage": e.stage},
                })
            })
            .collect();
        serde_json::json!({ "traceEvents": evs, "displayTimeUnit": "ms" })
    }
}

/// Closed-form bubble ratio for uniform stage costs.
pub fn uniform_bubble_ratio(pp: usize, vpp: usize, m: usize) -> f64 {
    (pp as f64 - 1.0) / ((vpp * m) as f64 + pp as f64 - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(p: usize, v: usize, m: usize, f: f64, b: f64) -> SimInput {
        SimInput {
            pp: p,
            vpp: v,
            num_microbatches: m,
            stage_costs: vec![
                StageCost {
                    f: f / v as f64,
                    b: b / v as f64,
                    w: 0.0
                };
                p * v
            ],
            extra_warmup: false,
            wd_split: false,
            p2p_latency: 0.0,
        }
    }

    #[test]
    fn bubble_examples() {
        let s = simulate(&uniform(4, 1, 16, 1.0, 2.0)).unwrap();
        assert!((s.bubble_ratio - 3.0 / 19.0).abs() < 1e-9);
        let s = simulate(&uniform(4, 4, 16, 1.0, 2.0)).unwrap();
        assert!((s.bubble_ratio - 3.0 / 67.0).abs() < 1e-9);
    }

    #[test]
    fn single_microbatch_has_no_pairs() {
        let s = simulate(&uniform(4, 1, 1, 1.0, 1.0)).unwrap();
        assert!(s.fwd_bwd_pairs().is_empty());
        assert!(s.steady_adjacencies().iter().all(|p| p.same_microbatch));
        let s = simulate(&SimInput {
            extra_warmup: true,
            ..uniform(4, 1, 1, 1.0, 1.0)
        })
        .unwrap();
        assert!(s.fwd_bwd_pairs().is_empty());
    }

    #[test]
    fn pp2_m4_pairs_by_hand() {
        let s = simulate(&uniform(2, 1, 4, 1.0, 2.0)).unwrap();
        let pairs: Vec<(usize, usize, usize)> = s
            .fwd_bwd_pairs()
            .iter()
            .map(|p| (p.rank, p.forward.microbatch, p.backward.microbatch))
            .collect();
        assert_eq!(pairs, vec![(0, 1, 0), (0, 2, 1), (0, 3, 2)]);
        assert_eq!(
            s.steady_adjacencies()
                .iter()
                .filter(|p| p.same_microbatch)
                .count(),
            4
        );
        let s = simulate(&SimInput {
            extra_warmup: true,
            ..uniform(2, 1, 4, 1.0, 2.0)
        })
        .unwrap();
        let pairs: Vec<(usize, usize, usize)> = s
            .fwd_bwd_pairs()
            .iter()
            .map(|p| (p.rank, p.forward.microbatch, p.backward.microbatch))
            .collect();
        assert_eq!(
            pairs,
            vec![(0, 2, 0), (0, 3, 1), (1, 1, 0), (1, 2, 1), (1, 3, 2)]
        );
    }

    #[test]
    fn peak_inflight_1f1b() {
        let s = simulate(&uniform(4, 1, 8, 1.0, 2.0)).unwrap();
        assert_eq!(s.peak_inflight, vec![4, 3, 2, 1]);
    }

    #[test]
    fn wd_split_emits_w_events() {
        let mut inp = uniform(4, 1, 8, 1.0, 1.0);
        for c in &mut inp.stage_costs {
            c.w = 1.0;
        }
        let base = simulate(&inp).unwrap();
        assert!(base.events.iter().all(|e| e.kind != EventKind::W));
        inp.wd_split = true;
        let s = simulate(&inp).unwrap();
        assert_eq!(
            s.events.iter().filter(|e| e.kind == EventKind::W).count(),
            32
        );
        assert!(s.makespan <= base.makespan + 1e-12);
    }

    #[test]
    fn interleaved_needs_divisible_m() {
        assert!(simulate(&uniform(4, 2, 6, 1.0, 1.0)).is_err());
    }

    #[test]
    fn backward_order_filo_over_chunks() {
        let order = op_order(2, 2, 4, false);
        let bw: Vec<OpRef> = order[0]
            .iter()
            .filter(|(k, _)| *k == EventKind::B)
            .map(|(_, o)| *o)
            .collect();
        assert_eq!(
            bw[0],
            OpRef {
                microbatch: 0,
                chunk: 1
            }
        );
        assert_eq!(
            bw[1],
            OpRef {
                microbatch: 1,
                chunk: 1
            }
        );
        assert_eq!(
            bw[2],
            OpRef {
                microbatch: 0,
                chunk: 0
            }
        );
    }
}
