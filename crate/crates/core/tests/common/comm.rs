//! Token-enumeration oracle for dispatch volumes.

use moelab::perf::comm::DispatchShape;
use num_rational::Ratio;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Q = Ratio<u128>;

/// Per-token expectations over every K-subset of experts and every source
/// rank: (remote copies, copies to other nodes, copies to same-node peers,
/// remote nodes hit, remote ranks hit).
pub struct Tally {
    pub remote: Q,
    pub inter_copies: Q,
    pub intra_copies: Q,
    pub nodes_hit: Q,
    pub ranks_hit: Q,
}

pub fn enumerate(e: u64, k: u64, ep: u64, domain: u64) -> Tally {
    let per_rank = e / ep;
    let ranks_per_node = ep.min(domain);
    let rank_of = |x: u64| x / per_rank;
    let node_of = |r: u64| r / ranks_per_node;
    let mut sums = [0u128; 5];
    let mut cases = 0u128;
    for mask in 0u32..(1 << e) {
        if mask.count_ones() as u64 != k {
            continue;
        }
        let chosen: Vec<u64> = (0..e).filter(|i| mask >> i & 1 == 1).collect();
        for src in 0..ep {
            cases += 1;
            let mut nodes = std::collections::BTreeSet::new();
            let mut ranks = std::collections::BTreeSet::new();
            for &x in &chosen {
                let r = rank_of(x);
                if r == src {
                    continue;
                }
                sums[0] += 1;
                ranks.insert(r);
                if node_of(r) == node_of(src) {
                    sums[2] += 1;
                } else {
                    sums[1] += 1;
                    nodes.insert(node_of(r));
                }
            }
            sums[3] += nodes.len() as u128;
            sums[4] += ranks.len() as u128;
        }
    }
    let q = |i: usize| Q::new(sums[i], cases);
    Tally {
        remote: q(0),
        inter_copies: q(1),
        intra_copies: q(2),
        nodes_hit: q(3),
        ranks_hit: q(4),
    }
}

pub fn random_shape(rng: &mut ChaCha8Rng) -> DispatchShape {
    let ep = [1u64, 2, 4, 8, 16][rng.gen_range(0..5)];
    let per_rank = rng.gen_range(1..=(16 / ep).max(1));
    let e = ep * per_rank;
    let domain = [1u64, 2, 4, 8, 16][rng.gen_range(0..5)].min(ep.max(1));
    DispatchShape {
        tokens: rng.gen_range(1..=64),
        top_k: rng.gen_range(1..=e.min(4)),
        hidden: rng.gen_range(1..=32),
        num_experts: e,
        ep,
        domain_size: domain,
        width: [1, 2, 4][rng.gen_range(0..3)],
    }
}
