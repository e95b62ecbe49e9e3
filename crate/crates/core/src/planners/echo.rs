//! Hot-expert cloning: move spillover tokens of overloaded ranks onto clones
//! hosted in spare slots of underloaded ranks, using as few clones as
//! possible.

use ndarray::{Array1, Array2};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::moe::{Activation, Expert};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct EchoRequest {
    /// Tokens routed to each expert.
    pub counts: Vec<u64>,
    pub experts_per_rank: usize,
    /// Clone slots available on each rank.
    pub spare_slots: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct CloneAssignment {
    pub expert: usize,
    pub home_rank: usize,
    pub rank: usize,
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct EchoPlan {
    pub mean_load: f64,
    /// Balance target: no rank above ceil(mean).
    pub target: u64,
    pub loads_before: Vec<u64>,
    pub loads_after: Vec<u64>,
    /// Tokens above the target on each rank.
    pub rank_spillover: Vec<u64>,
    /// Room below the target on each rank.
    pub spare: Vec<u64>,
    /// Tokens each expert sends to its clones.
    pub spillover: Vec<u64>,
    pub hot_expert_map: Vec<CloneAssignment>,
    /// The target was out of reach (too few spare slots); the plan is the
    /// first-fit result.
    pub best_effort: bool,
    /// True when the clone count is proven minimal.
    pub optimal: bool,
}

impl EchoPlan {
    pub fn clone_count(&self) -> usize {
        self.hot_expert_map.len()
    }
}

/// Dense max-flow on a small graph (augmenting paths by BFS).
struct Flow {
    cap: Vec<Vec<u64>>,
}

impl Flow {
    fn new(n: usize) -> Flow {
        Flow {
            cap: vec![vec![0; n]; n],
        }
    }

    fn add(&mut self, a: usize, b: usize, c: u64) {
        self.cap[a][b] += c;
    }

    /// Returns the total flow; `self.cap` becomes the residual graph.
    fn run(&mut self, s: usize, t: usize) -> u64 {
        let n = self.cap.len();
        let mut total = 0;
        loop {
            let mut prev = vec![usize::MAX; n];
            prev[s] = s;
            let mut q = std::collections::VecDeque::from([s]);
            while let Some(u) = q.pop_front() {
                for v in 0..n {
                    if prev[v] == usize::MAX && self.cap[u][v] > 0 {
                        prev[v] = u;
                        q.push_back(v);
                    }
                }
            }
            if prev[t] == usize::MAX {
                return total;
            }
            let mut f = u64::MAX;
            let mut v = t;
            while v != s {
                f = f.min(self.cap[prev[v]][v]);
                v = prev[v];
            }
            let mut v = t;
            while v != s {
                self.cap[prev[v]][v] -= f;
                self.cap[v][prev[v]] += f;
                v = prev[v];
            }
            total += f;
        }
    }
}

struct Instance {
    counts: Vec<u64>,
    epr: usize,
    ranks: usize,
    target: u64,
    need: Vec<u64>,
    room: Vec<u64>,
    slots: Vec<usize>,
}

impl Instance {
    fn home(&self, e: usize) -> usize {
        e / self.epr
    }

    /// Tokens moved along each (expert, rank) clone if the set can reach the
    /// target, else None.
    fn route(&self, clones: &[(usize, usize)]) -> Option<Vec<u64>> {
        let e = self.counts.len();
        // source, ranks (as donors), experts, ranks (as receivers), sink
        let (src, sink) = (0, 1 + 2 * self.ranks + e);
        let donor = |r: usize| 1 + r;
        let exp = |x: usize| 1 + self.ranks + x;
        let recv = |r: usize| 1 + self.ranks + e + r;
        let mut g = Flow::new(sink + 1);
        let need: u64 = self.need.iter().sum();
        for r in 0..self.ranks {
            g.add(src, donor(r), self.need[r]);
            g.add(recv(r), sink, self.room[r]);
        }
        for x in 0..e {
            g.add(donor(self.home(x)), exp(x), self.counts[x]);
        }
        for &(x, r) in clones {
            g.add(exp(x), recv(r), u64::MAX / 4);
        }
        let before = g.cap.clone();
        if g.run(src, sink) < need {
            return None;
        }
        Some(
            clones
                .iter()
                .map(|&(x, r)| before[exp(x)][recv(r)] - g.cap[exp(x)][recv(r)])
                .collect(),
        )
    }

    /// Clones that can matter: an overloaded rank's expert onto a rank with
    /// room and a free slot.
    fn candidates(&self) -> Vec<(usize, usize)> {
        let mut c = vec![];
        for x in 0..self.counts.len() {
            for r in 0..self.ranks {
                if self.need[self.home(x)] > 0
                    && self.counts[x] > 0
                    && self.room[r] > 0
                    && self.slots[r] > 0
                {
                    c.push((x, r));
                }
            }
        }
        c
    }

    /// First-fit decreasing: largest experts of each overloaded rank first,
    /// each piece to the first receiver (by remaining room, descending) that
    /// takes it whole, else split across the roomiest.
    fn ffd(&self) -> (Vec<(usize, usize)>, Vec<u64>) {
        let mut room = self.room.clone();
        let mut slots = self.slots.clone();
        let mut clones = vec![];
        let mut moved = vec![];
        let mut items: Vec<usize> = (0..self.counts.len())
            .filter(|&x| self.need[self.home(x)] > 0)
            .collect();
        items.sort_by(|&a, &b| self.counts[b].cmp(&self.counts[a]).then(a.cmp(&b)));
        let mut need = self.need.clone();
        for x in items {
            let h = self.home(x);
            let mut piece = need[h].min(self.counts[x]);
            while piece > 0 {
                let mut recv: Vec<usize> = (0..self.ranks)
                    .filter(|&r| room[r] > 0 && slots[r] > 0)
                    .collect();
                if recv.is_empty() {
                    break;
                }
                recv.sort_by(|&a, &b| room[b].cmp(&room[a]).then(a.cmp(&b)));
                let r = recv
                    .iter()
                    .rev()
                    .copied()
                    .find(|&r| room[r] >= piece)
                    .unwrap_or(recv[0]);
                let t = piece.min(room[r]);
                room[r] -= t;
                slots[r] -= 1;
                piece -= t;
                need[h] -= t;
                clones.push((x, r));
                moved.push(t);
            }
        }
        (clones, moved)
    }
}

fn choose(n: usize, k: usize) -> u128 {
    (0..k as u128).fold(1u128, |acc, i| acc * (n as u128 - i) / (i + 1))
}

/// Subsets examined before the exact search gives up and keeps first-fit.
const SEARCH_BUDGET: u128 = 500_000;

fn search(
    inst: &Instance,
    cand: &[(usize, usize)],
    k: usize,
) -> Option<(Vec<(usize, usize)>, Vec<u64>)> {
    fn rec(
        inst: &Instance,
        cand: &[(usize, usize)],
        start: usize,
        k: usize,
        used: &mut Vec<usize>,
        pick: &mut Vec<(usize, usize)>,
    ) -> Option<(Vec<(usize, usize)>, Vec<u64>)> {
        if pick.len() == k {
            // Every overloaded rank needs at least one clone of its own.
            let covered = (0..inst.ranks)
                .all(|r| inst.need[r] == 0 || pick.iter().any(|&(x, _)| inst.home(x) == r));
            return covered
                .then(|| inst.route(pick).map(|m| (pick.clone(), m)))
                .flatten();
        }
        for i in start..cand.len() {
            if cand.len() - i < k - pick.len() {
                break;
            }
            let (x, r) = cand[i];
            if used[r] == inst.slots[r] {
                continue;
            }
            used[r] += 1;
            pick.push((x, r));
            let found = rec(inst, cand, i + 1, k, used, pick);
            pick.pop();
            used[r] -= 1;
            if found.is_some() {
                return found;
            }
        }
        None
    }
    rec(inst, cand, 0, k, &mut vec![0; inst.ranks], &mut vec![])
}

pub fn echo_plan(req: &EchoRequest) -> Result<EchoPlan> {
    let e = req.counts.len();
    let epr = req.experts_per_rank;
    if epr == 0 || e == 0 || !e.is_multiple_of(epr) {
        return invalid("expert count must be a positive multiple of experts_per_rank");
    }
    let ranks = e / epr;
    if req.spare_slots.len() != ranks {
        return invalid(format!(
            "spare_slots has {} entries for {ranks} ranks",
            req.spare_slots.len()
        ));
    }
    let loads: Vec<u64> = (0..ranks)
        .map(|r| req.counts[r * epr..(r + 1) * epr].iter().sum())
        .collect();
    let total: u64 = loads.iter().sum();
    let target = total.div_ceil(ranks as u64);
    let inst = Instance {
        counts: req.counts.clone(),
        epr,
        ranks,
        target,
        need: loads.iter().map(|&l| l.saturating_sub(target)).collect(),
        room: loads.iter().map(|&l| target.saturating_sub(l)).collect(),
        slots: req.spare_slots.clone(),
    };

    let (ffd_clones, ffd_moved) = inst.ffd();
    let ffd_moved_total: u64 = ffd_moved.iter().sum();
    let ffd_ok = ffd_moved_total == inst.need.iter().sum::<u64>();
    let cand = inst.candidates();
    let lower = inst.need.iter().filter(|&&n| n > 0).count();
    let upper = if ffd_ok {
        ffd_clones.len()
    } else {
        cand.len().min(req.spare_slots.iter().sum()) + 1
    };

    let mut best: Option<(Vec<(usize, usize)>, Vec<u64>)> =
        ffd_ok.then(|| (ffd_clones.clone(), ffd_moved.clone()));
    let mut optimal = lower == upper || (ffd_ok && lower == ffd_clones.len());
    let mut spent = 0u128;
    for k in lower..upper {
        spent += choose(cand.len(), k);
        if spent > SEARCH_BUDGET {
            optimal = false;
            break;
        }
        if let Some(found) = search(&inst, &cand, k) {
            best = Some(found);
            optimal = true;
            break;
        }
        if k + 1 == upper {
            optimal = true;
        }
    }
    let balanced = best.is_some();
    let (clones, moved) = best.unwrap_or((ffd_clones, ffd_moved));

    let mut loads_after = loads.clone();
    let mut spillover = vec![0; e];
    let mut map = vec![];
    for (&(x, r), &t) in clones.iter().zip(&moved) {
        if t == 0 {
            continue;
        }
        loads_after[inst.home(x)] -= t;
        loads_after[r] += t;
        spillover[x] += t;
        map.push(CloneAssignment {
            expert: x,
            home_rank: inst.home(x),
            rank: r,
            tokens: t,
        });
    }
    map.sort_by_key(|c| (c.expert, c.rank));
    Ok(EchoPlan {
        mean_load: total as f64 / ranks as f64,
        target: inst.target,
        loads_before: loads,
        loads_after,
        rank_spillover: inst.need,
        spare: inst.room,
        spillover,
        hot_expert_map: map,
        best_effort: !balanced,
        optimal: optimal && balanced,
    })
}

/// Redirect, for each clone, the last `tokens` tokens routed to its home
/// expert into a new column `E + clone index`.
pub fn echo_rewrite(routing_map: &Array2<bool>, plan: &EchoPlan) -> Result<Array2<bool>> {
    let (t, e) = routing_map.dim();
    if plan.spillover.len() != e {
        return invalid("routing map width does not match the plan's expert count");
    }
    let mut out = Array2::from_elem((t, e + plan.hot_expert_map.len()), false);
    out.slice_mut(ndarray::s![.., ..e]).assign(routing_map);
    for (j, c) in plan.hot_expert_map.iter().enumerate() {
        let mut left = c.tokens;
        for tok in (0..t).rev() {
            if left == 0 {
                break;
            }
            if out[[tok, c.expert]] {
                out[[tok, c.expert]] = false;
                out[[tok, e + j]] = true;
                left -= 1;
            }
        }
        if left > 0 {
            return invalid(format!(
                "expert {} has fewer routed tokens than the plan moves",
                c.expert
            ));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGrad {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

fn act(a: Activation, z: f64) -> (f64, f64) {
    match a {
        Activation::Relu => (z.max(0.0), if z > 0.0 { 1.0 } else { 0.0 }),
        Activation::Silu => {
            let s = 1.0 / (1.0 + (-z).exp());
            (z * s, s * (1.0 + z * (1.0 - s)))
        }
        Activation::Gelu => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            let u = c * (z + 0.044715 * z.powi(3));
            let th = u.tanh();
            let du = c * (1.0 + 3.0 * 0.044715 * z * z);
            (
                0.5 * z * (1.0 + th),
                0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * du,
            )
        }
    }
}

/// Weight gradients of an ungated expert y = W2·act(W1·x) for the tokens in
/// `x` (rows) given upstream gradients `dy` (rows).
pub fn expert_grads(
    expert: &Expert,
    activation: Activation,
    x: &Array2<f64>,
    dy: &Array2<f64>,
) -> Result<ExpertGrad> {
    if expert.w_gate.is_some() {
        return invalid("gated experts are not supported here");
    }
    if x.nrows() != dy.nrows() || x.ncols() != expert.w1.ncols() || dy.ncols() != expert.w2.nrows()
    {
        return invalid("shape mismatch");
    }
    let mut g1 = Array2::zeros(expert.w1.dim());
    let mut g2 = Array2::zeros(expert.w2.dim());
    for (xr, dyr) in x.rows().into_iter().zip(dy.rows()) {
        let z = expert.w1.dot(&xr);
        let (a, da): (Vec<f64>, Vec<f64>) = z.iter().map(|&v| act(activation, v)).unzip();
        let (a, da) = (Array1::from(a), Array1::from(da));
        g2 += &dyr
            .to_owned()
            .insert_axis(ndarray::Axis(1))
            .dot(&a.insert_axis(ndarray::Axis(0)));
        let dz = expert.w2.t().dot(&dyr) * &da;
        g1 += &dz
            .insert_axis(ndarray::Axis(1))
            .dot(&xr.to_owned().insert_axis(ndarray::Axis(0)));
    }
    Ok(ExpertGrad { w1: g1, w2: g2 })
}

/// Sum the home expert's gradient with every clone's gradient.
pub fn echo_grad_reduce(home: &ExpertGrad, clones: &[ExpertGrad]) -> Result<ExpertGrad> {
    let mut out = home.clone();
    for c in clones {
        if c.w1.dim() != out.w1.dim() || c.w2.dim() != out.w2.dim() {
            return invalid("clone gradient shape differs from home");
        }
        out.w1 += &c.w1;
        out.w2 += &c.w2;
    }
    Ok(out)
}
