//! Brute-force oracles for ECHO and Dynamic-CP.

use moelab::planners::DynamicCpRequest;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Simple augmenting-path max flow by DFS over an adjacency matrix.
pub fn max_flow(cap: &mut [Vec<i64>], s: usize, t: usize) -> i64 {
    fn dfs(cap: &mut [Vec<i64>], u: usize, t: usize, f: i64, seen: &mut [bool]) -> i64 {
        if u == t {
            return f;
        }
        seen[u] = true;
        for v in 0..cap.len() {
            if !seen[v] && cap[u][v] > 0 {
                let got = dfs(cap, v, t, f.min(cap[u][v]), seen);
                if got > 0 {
                    cap[u][v] -= got;
                    cap[v][u] += got;
                    return got;
                }
            }
        }
        0
    }
    let mut total = 0;
    loop {
        let mut seen = vec![false; cap.len()];
        let f = dfs(cap, s, t, i64::MAX, &mut seen);
        if f == 0 {
            return total;
        }
        total += f;
    }
}

/// Can the clone set bring every rank to at most `target`?
pub fn feasible(counts: &[u64], epr: usize, target: u64, clones: &[(usize, usize)]) -> bool {
    let e = counts.len();
    let ranks = e / epr;
    let loads: Vec<i64> = (0..ranks)
        .map(|r| counts[r * epr..(r + 1) * epr].iter().sum::<u64>() as i64)
        .collect();
    // nodes: 0 source, 1..=e experts, then ranks, then sink, then one donor
    // node per rank capping what it may shed at its overflow
    let n = 2 + e + ranks;
    let sink = n - 1;
    let donor = |r: usize| n + r;
    let mut cap = vec![vec![0i64; n + ranks]; n + ranks];
    let mut need = 0;
    for x in 0..e {
        let h = x / epr;
        let over = (loads[h] - target as i64).max(0);
        if over > 0 {
            cap[0][donor(h)] = over;
            cap[donor(h)][1 + x] = counts[x] as i64;
        }
    }
    for r in 0..ranks {
        need += (loads[r] - target as i64).max(0);
        cap[1 + e + r][sink] = (target as i64 - loads[r]).max(0);
    }
    for &(x, r) in clones {
        cap[1 + x][1 + e + r] += 1 << 40;
    }
    max_flow(&mut cap, 0, sink) == need
}

/// Fewest clones reaching the target, trying every (expert, foreign rank)
/// subset in order of size; None when no subset works.
pub fn min_clones(counts: &[u64], epr: usize, slots: &[usize]) -> Option<usize> {
    let e = counts.len();
    let ranks = e / epr;
    let total: u64 = counts.iter().sum();
    let target = total.div_ceil(ranks as u64);
    let pairs: Vec<(usize, usize)> = (0..e)
        .flat_map(|x| {
            (0..ranks)
                .filter(move |&r| r != x / epr)
                .map(move |r| (x, r))
        })
        .collect();
    let max_k = pairs.len().min(slots.iter().sum());
    for k in 0..=max_k {
        let mut pick = vec![];
        if subsets(&pairs, 0, k, slots, &mut vec![0; ranks], &mut pick, &|c| {
            feasible(counts, epr, target, c)
        }) {
            return Some(k);
        }
    }
    None
}

pub fn subsets(
    pairs: &[(usize, usize)],
    start: usize,
    k: usize,
    slots: &[usize],
    used: &mut Vec<usize>,
    pick: &mut Vec<(usize, usize)>,
    ok: &dyn Fn(&[(usize, usize)]) -> bool,
) -> bool {
    if pick.len() == k {
        return ok(pick);
    }
    for i in start..pairs.len() {
        let (x, r) = pairs[i];
        if used[r] == slots[r] {
            continue;
        }
        used[r] += 1;
        pick.push((x, r));
        let found = subsets(pairs, i + 1, k, slots, used, pick, ok);
        pick.pop();
        used[r] -= 1;
        if found {
            return true;
        }
    }
    false
}

/// Least max per-rank time over every partition of the sequences into at
/// least `m` bins, with CP sizes chosen optimally under `m · g` GPUs.
pub fn brute_force_dynamic_cp(
    lengths: &[u64],
    budget: u64,
    g: usize,
    m: usize,
    overhead: f64,
) -> Option<f64> {
    fn time(sum: f64, sum2: f64, cp: usize, overhead: f64) -> f64 {
        let c = cp as f64;
        sum2 / c + overhead * sum * (c - 1.0) / c
    }
    fn best_for(
        blocks: &[Vec<u64>],
        budget: u64,
        g: usize,
        slots: usize,
        overhead: f64,
    ) -> Option<f64> {
        let mut cps = vec![];
        for b in blocks {
            let s: u64 = b.iter().sum();
            let mut cp = 1;
            while s > budget * cp as u64 {
                cp *= 2;
                if cp > g {
                    return None;
                }
            }
            cps.push(cp);
        }
        let stats: Vec<(f64, f64)> = blocks
            .iter()
            .map(|b| {
                (
                    b.iter().map(|&s| s as f64).sum(),
                    b.iter().map(|&s| (s as f64).powi(2)).sum(),
                )
            })
            .collect();
        let mut width: usize = cps.iter().sum();
        if width > slots {
            return None;
        }
        loop {
            let (j, t) = (0..blocks.len())
                .map(|j| (j, time(stats[j].0, stats[j].1, cps[j], overhead)))
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            let doubled = time(stats[j].0, stats[j].1, cps[j] * 2, overhead);
            if cps[j] * 2 > g || width + cps[j] > slots || doubled >= t {
                return Some(t);
            }
            width += cps[j];
            cps[j] *= 2;
        }
    }
    fn rec(
        lengths: &[u64],
        i: usize,
        blocks: &mut Vec<Vec<u64>>,
        args: (u64, usize, usize, usize, f64),
        best: &mut Option<f64>,
    ) {
        let (budget, g, m, slots, overhead) = args;
        if i == lengths.len() {
            if blocks.len() >= m {
                if let Some(t) = best_for(blocks, budget, g, slots, overhead) {
                    if best.is_none_or(|b| t < b) {
                        *best = Some(t);
                    }
                }
            }
            return;
        }
        for j in 0..blocks.len() {
            blocks[j].push(lengths[i]);
            rec(lengths, i + 1, blocks, args, best);
            blocks[j].pop();
        }
        if blocks.len() < slots {
            blocks.push(vec![lengths[i]]);
            rec(lengths, i + 1, blocks, args, best);
            blocks.pop();
        }
    }
    let mut best = None;
    rec(
        lengths,
        0,
        &mut vec![],
        (budget, g, m, m * g, overhead),
        &mut best,
    );
    best
}

pub fn random_request(rng: &mut ChaCha8Rng, n: usize) -> DynamicCpRequest {
    let dp = [1, 2][rng.gen_range(0..2)];
    let cp_max = [1, 2, 4][rng.gen_range(0..3)];
    let budget = 4096;
    let g = (dp * cp_max) as u64;
    // Log-uniform lengths, each feasible at the full pool.
    let lengths = (0..n)
        .map(|_| (2f64.powf(rng.gen_range(7.0..13.5)) as u64).clamp(1, budget * g))
        .collect();
    DynamicCpRequest {
        lengths,
        memory_budget_tokens: budget,
        dp,
        cp_max,
        pp: rng.gen_range(1..=2),
        max_microbatch_multiple: 8,
        cp_overhead_tokens: 4096.0,
    }
}
