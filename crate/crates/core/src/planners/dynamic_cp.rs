//! Joint sequence packing and per-micro-batch context-parallel sizing.
//!
//! The pool of `dp · cp_max` GPUs runs `M` micro-batch steps. Each step is
//! split into CP groups (power-of-two sizes); each group runs one packed bin.
//! A bin's per-rank memory is Σ S / cp tokens and its per-rank attention
//! workload is Σ S² / cp. Its per-rank time adds a CP communication term,
//! `overhead · Σ S · (cp − 1) / cp`, so short bins gain nothing from CP.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

fn default_multiple() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct DynamicCpRequest {
    pub lengths: Vec<u64>,
    /// Tokens a single GPU can hold for one micro-batch.
    pub memory_budget_tokens: u64,
    pub dp: usize,
    pub cp_max: usize,
    pub pp: usize,
    /// Micro-batch counts are swept over PP·1 ..= PP·this.
    #[serde(default = "default_multiple")]
    pub max_microbatch_multiple: usize,
    /// CP communication cost per token, in units of attention workload
    /// (a sequence of this length spends as long in CP exchange as in
    /// attention).
    #[serde(default = "default_overhead")]
    pub cp_overhead_tokens: f64,
}

fn default_overhead() -> f64 {
    4096.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Bin {
    pub sequences: Vec<usize>,
    pub cu_seqlens: Vec<u64>,
    pub cp_size: usize,
    pub microbatch: usize,
    pub tokens: u64,
    /// Σ S² / cp_size.
    pub rank_workload: f64,
    /// Σ S / cp_size.
    pub rank_tokens: f64,
    /// Workload plus CP communication.
    pub rank_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SweepPoint {
    pub microbatches: usize,
    pub feasible: bool,
    pub max_rank_time: Option<f64>,
    pub estimated_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct PackedBatch {
    pub sequences: Vec<u64>,
    pub gpus: usize,
    pub num_microbatches: usize,
    pub bins: Vec<Bin>,
    pub max_rank_workload: f64,
    pub max_rank_time: f64,
    /// Σ over steps of the slowest bin, plus (PP − 1) average steps of bubble.
    pub estimated_time: f64,
    pub sweep: Vec<SweepPoint>,
}

#[derive(Debug, Clone)]
struct Draft {
    seqs: Vec<usize>,
    cp: usize,
    sum: u128,
    sum2: u128,
}

/// Per-rank time of a bin with the given totals.
pub fn rank_time(sum: u128, sum2: u128, cp: usize, overhead: f64) -> f64 {
    let c = cp as f64;
    sum2 as f64 / c + overhead * sum as f64 * (c - 1.0) / c
}

impl Draft {
    fn work(&self) -> f64 {
        self.sum2 as f64 / self.cp as f64
    }
}

fn min_cp(s: u128, budget: u128, cap: usize) -> Option<usize> {
    let mut cp = 1;
    while cp <= cap {
        if s <= budget * cp as u128 {
            return Some(cp);
        }
        cp *= 2;
    }
    None
}

struct Ctx<'a> {
    lengths: &'a [u64],
    order: Vec<usize>,
    budget: u128,
    g: usize,
    overhead: f64,
}

impl Ctx<'_> {
    fn time(&self, d: &Draft) -> f64 {
        rank_time(d.sum, d.sum2, d.cp, self.overhead)
    }

    /// Smallest CP meeting memory, then doubled while the bin is over quota
    /// and doubling still helps. None when the quota cannot be met.
    fn size(&self, sum: u128, sum2: u128, q: f64) -> Option<usize> {
        let mut cp = min_cp(sum, self.budget, self.g)?;
        while rank_time(sum, sum2, cp, self.overhead) > q {
            if cp * 2 > self.g
                || rank_time(sum, sum2, cp * 2, self.overhead)
                    >= rank_time(sum, sum2, cp, self.overhead)
            {
                return None;
            }
            cp *= 2;
        }
        Some(cp)
    }

    fn fits(&self, b: &Draft, s: u128, q: f64) -> bool {
        b.sum + s <= self.budget * b.cp as u128
            && rank_time(b.sum + s, b.sum2 + s * s, b.cp, self.overhead) <= q
    }

    /// Greedy packing against a per-rank time quota `q`. With `eager` each
    /// sequence joins the bin that stays lightest when it fits; otherwise
    /// every sequence starts alone and the lightest bins are merged until
    /// the GPU slots suffice.
    fn pack(&self, slots: usize, q: f64, eager: bool) -> Option<Vec<Draft>> {
        let mut bins: Vec<Draft> = vec![];
        for &i in &self.order {
            let s = self.lengths[i] as u128;
            let join = if eager {
                bins.iter()
                    .enumerate()
                    .filter(|(_, b)| self.fits(b, s, q))
                    .min_by(|a, b| {
                        let ta = rank_time(a.1.sum + s, a.1.sum2 + s * s, a.1.cp, self.overhead);
                        let tb = rank_time(b.1.sum + s, b.1.sum2 + s * s, b.1.cp, self.overhead);
                        ta.total_cmp(&tb).then(a.0.cmp(&b.0))
                    })
                    .map(|(j, _)| j)
            } else {
                None
            };
            match join {
                Some(j) => {
                    let b = &mut bins[j];
                    b.seqs.push(i);
                    b.sum += s;
                    b.sum2 += s * s;
                }
                None => bins.push(Draft {
                    seqs: vec![i],
                    cp: self.size(s, s * s, q)?,
                    sum: s,
                    sum2: s * s,
                }),
            }
        }
        let mut width: usize = bins.iter().map(|b| b.cp).sum();
        while width > slots {
            // Merge the lightest single bin into the bin it burdens least.
            let times: Vec<f64> = bins.iter().map(|b| self.time(b)).collect();
            let lightest =
                (0..bins.len()).min_by(|&a, &b| times[a].total_cmp(&times[b]).then(a.cmp(&b)))?;
            let mut idx = vec![lightest];
            let mut merged = false;
            'outer: for pass in 0..2 {
                if pass == 1 {
                    // Lightest bin fits nowhere: fall back to the full order.
                    idx = (0..bins.len()).collect();
                    idx.sort_by(|&a, &b| times[a].total_cmp(&times[b]).then(a.cmp(&b)));
                }
                for &a in &idx {
                    let mut best: Option<(f64, usize)> = None;
                    for b in 0..bins.len() {
                        if a == b {
                            continue;
                        }
                        let (sum, sum2, cp) = (
                            bins[a].sum + bins[b].sum,
                            bins[a].sum2 + bins[b].sum2,
                            bins[b].cp,
                        );
                        let t = rank_time(sum, sum2, cp, self.overhead);
                        if sum <= self.budget * cp as u128
                            && t <= q
                            && best.is_none_or(|(bt, _)| t < bt)
                        {
                            best = Some((t, b));
                        }
                    }
                    if let Some((_, b)) = best {
                        let src = bins.remove(a);
                        let b = if b > a { b - 1 } else { b };
                        bins[b].seqs.extend(src.seqs);
                        bins[b].sum += src.sum;
                        bins[b].sum2 += src.sum2;
                        width -= src.cp;
                        merged = true;
                        break 'outer;
                    }
                }
            }
            if !merged {
                return None;
            }
        }
        // Spend leftover GPUs on the slowest bin while that helps it.
        loop {
            let (j, _) = bins.iter().enumerate().max_by(|a, b| {
                self.time(a.1)
                    .total_cmp(&self.time(b.1))
                    .then(b.0.cmp(&a.0))
            })?;
            let b = &bins[j];
            if b.cp * 2 > self.g
                || width + b.cp > slots
                || rank_time(b.sum, b.sum2, b.cp * 2, self.overhead) >= self.time(b)
            {
                break;
            }
            width += b.cp;
            bins[j].cp *= 2;
        }
        Some(bins)
    }

    /// Assign bins to `m` steps of `g` GPUs each, every step non-empty.
    fn schedule(&self, bins: &[Draft], m: usize) -> Option<Vec<usize>> {
        if bins.len() < m {
            return None;
        }
        let mut idx: Vec<usize> = (0..bins.len()).collect();
        idx.sort_by(|&a, &b| {
            bins[b]
                .cp
                .cmp(&bins[a].cp)
                .then(self.time(&bins[b]).total_cmp(&self.time(&bins[a])))
                .then(a.cmp(&b))
        });
        let mut free = vec![self.g; m];
        let mut step = vec![usize::MAX; bins.len()];
        for &i in &idx {
            let s = (0..m).find(|&s| free[s] >= bins[i].cp)?;
            free[s] -= bins[i].cp;
            step[i] = s;
        }
        // Fill empty steps from steps holding several bins, lightest first.
        for s in 0..m {
            if step.contains(&s) {
                continue;
            }
            let mut movable: Vec<usize> = (0..bins.len())
                .filter(|&i| step.iter().filter(|&&t| t == step[i]).count() > 1)
                .collect();
            movable.sort_by(|&a, &b| {
                self.time(&bins[a])
                    .total_cmp(&self.time(&bins[b]))
                    .then(a.cmp(&b))
            });
            step[*movable.first()?] = s;
        }
        Some(step)
    }

    fn step_sum(&self, bins: &[Draft], step: &[usize], m: usize) -> f64 {
        let mut mx = vec![0.0f64; m];
        for (b, &s) in bins.iter().zip(step) {
            mx[s] = mx[s].max(self.time(b));
        }
        mx.iter().sum()
    }

    /// Best packing for `m` micro-batches: least max per-rank time, then
    /// least summed step time.
    fn plan_fixed(&self, m: usize) -> Option<(Vec<Draft>, Vec<usize>)> {
        let total: f64 = self
            .lengths
            .iter()
            .map(|&s| rank_time(s as u128, (s as u128).pow(2), 1, self.overhead))
            .sum();
        // No bin can beat its longest sequence at the best CP it can get.
        let longest = self
            .lengths
            .iter()
            .map(|&s| {
                let (s, s2) = (s as u128, (s as u128).pow(2));
                let mut cp = min_cp(s, self.budget, self.g).unwrap_or(self.g);
                let mut t = rank_time(s, s2, cp, self.overhead);
                while cp * 2 <= self.g {
                    cp *= 2;
                    t = t.min(rank_time(s, s2, cp, self.overhead));
                }
                t
            })
            .fold(0.0, f64::max);
        let base = (total / (m * self.g) as f64).max(longest);
        let ceiling = total.max(1.0) * 1.03;
        let mut best: Option<((f64, f64), Vec<Draft>, Vec<usize>)> = None;
        let mut q = base;
        // Quotas above the best max time found so far only loosen packing.
        while q <= ceiling * 1.03 && best.as_ref().is_none_or(|(k, _, _)| q <= k.0 * 1.03) {
            for eager in [true, false] {
                if let Some(bins) = self.pack(m * self.g, q, eager) {
                    if let Some(step) = self.schedule(&bins, m) {
                        let key = (
                            bins.iter().map(|b| self.time(b)).fold(0.0, f64::max),
                            self.step_sum(&bins, &step, m),
                        );
                        let better = best.as_ref().is_none_or(|(k, _, _)| {
                            key.0 < k.0 * (1.0 - 1e-12)
                                || (key.0 <= k.0 * (1.0 + 1e-12) && key.1 < k.1)
                        });
                        if better {
                            best = Some((key, bins, step));
                        }
                    }
                }
            }
            q *= 1.03;
        }
        best.map(|(_, b, s)| (b, s))
    }
}

pub fn dynamic_cp_plan(req: &DynamicCpRequest) -> Result<PackedBatch> {
    if req.lengths.is_empty() {
        return invalid("no sequences");
    }
    if req.dp == 0 || req.pp == 0 || req.cp_max == 0 || !req.cp_max.is_power_of_two() {
        return invalid("dp and pp must be positive and cp_max a power of two");
    }
    if req.memory_budget_tokens == 0 || req.max_microbatch_multiple == 0 {
        return invalid("memory budget and micro-batch multiple must be positive");
    }
    let g = req.dp * req.cp_max;
    let budget = req.memory_budget_tokens as u128;
    for (i, &s) in req.lengths.iter().enumerate() {
        if min_cp(s as u128, budget, g).is_none() {
            return Err(Error::Infeasible(format!(
                "sequence {i} ({s} tokens) exceeds the budget at CP={g}"
            )));
        }
    }
    if !(req.cp_overhead_tokens >= 0.0) {
        return invalid("cp_overhead_tokens must be non-negative");
    }
    let mut order: Vec<usize> = (0..req.lengths.len()).collect();
    order.sort_by(|&a, &b| req.lengths[b].cmp(&req.lengths[a]).then(a.cmp(&b)));
    let ctx = Ctx {
        lengths: &req.lengths,
        order,
        budget,
        g,
        overhead: req.cp_overhead_tokens,
    };
    let mut sweep = vec![];
    let mut best: Option<(f64, usize, Vec<Draft>, Vec<usize>)> = None;
    for m in (1..=req.max_microbatch_multiple).map(|k| k * req.pp) {
        match ctx.plan_fixed(m) {
            Some((bins, step)) => {
                let sum = ctx.step_sum(&bins, &step, m);
                let time = sum + (req.pp - 1) as f64 * sum / m as f64;
                let w = bins.iter().map(|b| ctx.time(b)).fold(0.0, f64::max);
                sweep.push(SweepPoint {
                    microbatches: m,
                    feasible: true,
                    max_rank_time: Some(w),
                    estimated_time: Some(time),
                });
                if best.as_ref().is_none_or(|(t, ..)| time < *t) {
                    best = Some((time, m, bins, step));
                }
            }
            None => sweep.push(SweepPoint {
                microbatches: m,
                feasible: false,
                max_rank_time: None,
                estimated_time: None,
            }),
        }
    }
    let (time, m, drafts, step) = best.ok_or_else(|| {
        Error::Infeasible(format!(
            "no packing fits {}..={} micro-batches; fewer sequences than micro-batches or too little memory",
            req.pp,
            req.pp * req.max_microbatch_multiple
        ))
    })?;
    let mut bins: Vec<Bin> = drafts
        .iter()
        .zip(&step)
        .map(|(d, &s)| {
            let mut seqs = d.seqs.clone();
            seqs.sort();
            let mut cu = vec![0u64];
            for &i in &seqs {
                cu.push(cu.last().unwrap() + req.lengths[i]);
            }
            Bin {
                tokens: *cu.last().unwrap(),
                sequences: seqs,
                cu_seqlens: cu,
                cp_size: d.cp,
                microbatch: s,
                rank_workload: d.work(),
                rank_tokens: d.sum as f64 / d.cp as f64,
                rank_time: ctx.time(d),
            }
        })
        .collect();
    bins.sort_by(|a, b| {
        a.microbatch
            .cmp(&b.microbatch)
            .then(a.sequences.cmp(&b.sequences))
    });
    Ok(PackedBatch {
        sequences: req.lengths.clone(),
        gpus: g,
        num_microbatches: m,
        max_rank_workload: bins.iter().map(|b| b.rank_workload).fold(0.0, f64::max),
        max_rank_time: bins.iter().map(|b| b.rank_time).fold(0.0, f64::max),
        bins,
        estimated_time: time,
        sweep,
    })
}
