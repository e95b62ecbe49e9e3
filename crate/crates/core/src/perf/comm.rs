//! Expert-parallel communication volumes and the latency-bandwidth time model.
//!
//! Volumes are expectations under uniform top-k routing with experts spread
//! evenly over EP ranks, kept as exact rationals so they can be compared
//! against token-level enumeration without rounding.

use num_rational::Ratio;
use num_traits::{CheckedMul, CheckedSub};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{ClusterSpec, ModelSpec};

pub type Bytes = Ratio<u128>;

pub fn ratio_f64(r: &Bytes) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Per-GPU send volume of one dispatch (or one combine): T·K·h·width·(EP−1)/EP.
pub fn a2a_send_volume(t: u64, k: u64, h: u64, ep: u64, width: u64) -> Result<Bytes> {
    if ep == 0 {
        return invalid("EP must be at least 1");
    }
    let base = t as u128 * k as u128 * h as u128 * width as u128;
    Ok(Ratio::new(base * (ep as u128 - 1), ep as u128))
}

/// Dispatch plus combine operations in one forward pass.
pub fn dispatch_ops_per_forward(model: &ModelSpec) -> usize {
    2 * model.num_moe_layers()
}

fn exact<T>(x: Option<T>) -> Result<T> {
    x.map_or_else(|| invalid("volume exceeds the exact arithmetic range"), Ok)
}

/// Probability that a uniformly drawn K-subset of `e` experts misses a
/// particular block of `block` experts: prod (e-block-i)/(e-i) over i < K.
fn miss_probability(e: u64, block: u64, k: u64) -> Result<Ratio<u128>> {
    let mut p = Ratio::from_integer(1u128);
    for i in 0..k {
        if e - block <= i {
            return Ok(Ratio::from_integer(0));
        }
        let f = Ratio::new((e - block - i) as u128, (e - i) as u128);
        p = exact(p.checked_mul(&f))?;
    }
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TierVolumes {
    pub inter_node: f64,
    pub intra_domain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactTierVolumes {
    pub inter_node: Bytes,
    pub intra_domain: Bytes,
}

impl ExactTierVolumes {
    pub fn to_f64(&self) -> TierVolumes {
        TierVolumes {
            inter_node: ratio_f64(&self.inter_node),
            intra_domain: ratio_f64(&self.intra_domain),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DispatchShape {
    pub tokens: u64,
    pub top_k: u64,
    pub hidden: u64,
    pub num_experts: u64,
    pub ep: u64,
    /// EP ranks sharing one NVLink domain.
    pub domain_size: u64,
    pub width: u64,
}

impl DispatchShape {
    fn check(&self) -> Result<u64> {
        if self.ep == 0 || self.domain_size == 0 {
            return invalid("EP and domain size must be positive");
        }
        if !self.num_experts.is_multiple_of(self.ep) {
            return invalid("num_experts must be divisible by EP");
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return invalid("top_k must be in 1..=num_experts");
        }
        if self.ep > self.domain_size && !self.ep.is_multiple_of(self.domain_size) {
            return invalid(format!(
                "domain size {} does not divide EP {}",
                self.domain_size, self.ep
            ));
        }
        Ok(if self.ep <= self.domain_size {
            1
        } else {
            self.ep / self.domain_size
        })
    }

    fn token_bytes(&self) -> u128 {
        self.tokens as u128 * self.hidden as u128 * self.width as u128
    }
}

/// Per-(token, expert) copies split by the tier they cross.
pub fn naive_tier_volumes(s: &DispatchShape) -> Result<ExactTierVolumes> {
    let nodes = s.check()? as u128;
    let ep = s.ep as u128;
    let local = ep / nodes;
    let tk = s.token_bytes() * s.top_k as u128;
    // Fraction of routed copies landing on another node / another rank of the
    // same node.
    Ok(ExactTierVolumes {
        inter_node: Ratio::new(tk * (nodes - 1), nodes),
        intra_domain: Ratio::new(tk * (local - 1), ep),
    })
}

/// HybridEP-style two-hop dispatch. A token crosses the network once per
/// remote destination node; the relay rank delivers one expert copy and the
/// intra-domain leg carries every other copy.
pub fn hierarchical_dispatch_volumes(s: &DispatchShape) -> Result<ExactTierVolumes> {
    let nodes = s.check()?;
    let naive = naive_tier_volumes(s)?;
    let remote_copies = naive.inter_node + naive.intra_domain;
    if nodes == 1 {
        return Ok(ExactTierVolumes {
            inter_node: Ratio::from_integer(0),
            intra_domain: remote_copies,
        });
    }
    let per_node = s.num_experts / nodes;
    let hit = Ratio::from_integer(1u128) - miss_probability(s.num_experts, per_node, s.top_k)?;
    let inter =
        exact(hit.checked_mul(&Ratio::from_integer(s.token_bytes() * (nodes as u128 - 1))))?;
    let intra = exact(remote_copies.checked_sub(&inter))?;
    Ok(ExactTierVolumes {
        inter_node: inter,
        intra_domain: intra,
    })
}

/// Token-based dispatch that sends each token once per destination rank,
/// with the hierarchical inter-node dedup.
pub fn token_dedup_volumes(s: &DispatchShape) -> Result<ExactTierVolumes> {
    let nodes = s.check()?;
    let per_rank = s.num_experts / s.ep;
    let rank_hit = Ratio::from_integer(1u128) - miss_probability(s.num_experts, per_rank, s.top_k)?;
    let remote_ranks =
        exact(rank_hit.checked_mul(&Ratio::from_integer(s.token_bytes() * (s.ep as u128 - 1))))?;
    if nodes == 1 {
        return Ok(ExactTierVolumes {
            inter_node: Ratio::from_integer(0),
            intra_domain: remote_ranks,
        });
    }
    let inter = hierarchical_dispatch_volumes(s)?.inter_node;
    let intra = exact(remote_ranks.checked_sub(&inter))?;
    Ok(ExactTierVolumes {
        inter_node: inter,
        intra_domain: intra,
    })
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, JsonSchema,
)]
#[serde(rename_all = "snake_case")]
pub enum CommKind {
    Dispatch,
    Combine,
    TpCollective,
    PpP2p,
    DpReduce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    IntraDomain,
    InterNode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CommEvent {
    pub kind: CommKind,
    pub volume: f64,
    pub tier: Tier,
    /// Occurrences per layer per pass.
    pub count: u32,
}

/// Latency plus volume over the tier bandwidth.
pub fn comm_time(ev: &CommEvent, cluster: &ClusterSpec) -> f64 {
    let bw = match ev.tier {
        Tier::IntraDomain => cluster.intra_domain_bw,
        Tier::InterNode => cluster.inter_node_bw,
    };
    cluster.per_message_latency + ev.volume.max(0.0) / bw
}

/// Time of a two-tier transfer whose legs proceed concurrently.
pub fn tiered_time(v: &TierVolumes, cluster: &ClusterSpec) -> f64 {
    let intra = v.intra_domain / cluster.intra_domain_bw;
    let inter = v.inter_node / cluster.inter_node_bw;
    cluster.per_message_latency + intra.max(inter)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deepseek_instance() {
        let v = a2a_send_volume(4096, 8, 7168, 64, 2).unwrap();
        assert_eq!(v, Ratio::from_integer(462_422_016));
        assert_eq!(
            a2a_send_volume(4096, 8, 7168, 1, 2).unwrap(),
            Ratio::from_integer(0)
        );
        assert!(a2a_send_volume(1, 1, 1, 0, 2).is_err());
    }

    #[test]
    fn saturates_toward_full_payload() {
        let full = 4096u128 * 8 * 7168 * 2;
        let v = ratio_f64(&a2a_send_volume(4096, 8, 7168, 1 << 20, 2).unwrap());
        assert!((v / full as f64 - 1.0).abs() < 1e-5);
    }

    fn shape(k: u64, ep: u64, dom: u64) -> DispatchShape {
        DispatchShape {
            tokens: 1024,
            top_k: k,
            hidden: 7168,
            num_experts: 256,
            ep,
            domain_size: dom,
            width: 2,
        }
    }

    #[test]
    fn single_domain_has_no_inter_traffic() {
        let v = hierarchical_dispatch_volumes(&shape(8, 8, 8)).unwrap();
        assert_eq!(v.inter_node, Ratio::from_integer(0));
        let naive = a2a_send_volume(1024, 8, 7168, 8, 2).unwrap();
        assert_eq!(v.intra_domain, naive);
    }

    #[test]
    fn top1_has_nothing_to_dedup() {
        let s = shape(1, 64, 8);
        assert_eq!(
            hierarchical_dispatch_volumes(&s).unwrap().inter_node,
            naive_tier_volumes(&s).unwrap().inter_node
        );
    }

    #[test]
    fn dedup_reduces_inter_volume() {
        let s = shape(8, 64, 8);
        let h = hierarchical_dispatch_volumes(&s).unwrap();
        let n = naive_tier_volumes(&s).unwrap();
        assert!(h.inter_node < n.inter_node);
        let total_h = h.inter_node + h.intra_domain;
        let total_n = n.inter_node + n.intra_domain;
        assert_eq!(total_h, total_n);
    }

    #[test]
    fn bad_domain_factorization() {
        assert!(hierarchical_dispatch_volumes(&shape(8, 24, 16)).is_err());
    }

    #[test]
    fn ops_count() {
        let mut m = crate::model::testutil::toy_model();
        m.num_layers = 61;
        m.num_dense_prefix_layers = 3;
        assert_eq!(dispatch_ops_per_forward(&m), 116);
        m.num_layers = 3;
        assert_eq!(dispatch_ops_per_forward(&m), 0);
        m.num_dense_prefix_layers = 0;
        assert_eq!(dispatch_ops_per_forward(&m), 6);
    }

    #[test]
    fn alpha_beta() {
        let c = crate::model::testutil::toy_job().cluster;
        let ev = CommEvent {
            kind: CommKind::Dispatch,
            volume: 0.0,
            tier: Tier::InterNode,
            count: 1,
        };
        assert_eq!(comm_time(&ev, &c), c.per_message_latency);
        let ev = CommEvent {
            volume: 462_422_016.0,
            ..ev
        };
        let t = comm_time(&ev, &c) - c.per_message_latency;
        assert!((t - 9.248e-3).abs() < 1e-5);
    }
}
