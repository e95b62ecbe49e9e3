//! Dispatch volumes against exhaustive enumeration of top-k expert subsets.

use moelab::perf::comm::{
    a2a_send_volume, hierarchical_dispatch_volumes, naive_tier_volumes, token_dedup_volumes,
    DispatchShape,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::comm::*;

#[test]
fn volumes_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..120 {
        let s = random_shape(&mut rng);
        let t = enumerate(s.num_experts, s.top_k, s.ep, s.domain_size);
        let tok = Q::from_integer(s.tokens as u128 * s.hidden as u128 * s.width as u128);

        let a2a = a2a_send_volume(s.tokens, s.top_k, s.hidden, s.ep, s.width).unwrap();
        assert_eq!(a2a, tok * t.remote, "{s:?}");

        let naive = naive_tier_volumes(&s).unwrap();
        assert_eq!(naive.inter_node, tok * t.inter_copies, "{s:?}");
        assert_eq!(naive.intra_domain, tok * t.intra_copies, "{s:?}");

        let hier = hierarchical_dispatch_volumes(&s).unwrap();
        assert_eq!(hier.inter_node, tok * t.nodes_hit, "{s:?}");
        assert_eq!(hier.inter_node + hier.intra_domain, tok * t.remote, "{s:?}");

        let dedup = token_dedup_volumes(&s).unwrap();
        assert_eq!(dedup.inter_node, tok * t.nodes_hit, "{s:?}");
        assert_eq!(
            dedup.inter_node + dedup.intra_domain,
            tok * t.ranks_hit,
            "{s:?}"
        );
    }
}

#[test]
fn deepseek_dispatch_volume() {
    let v = a2a_send_volume(4096, 8, 7168, 64, 2).unwrap();
    assert_eq!(v, Q::from_integer(462_422_016));
}

#[test]
fn hierarchical_never_exceeds_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let ep = 1u64 << rng.gen_range(0..8);
        let domain = (1u64 << rng.gen_range(0..5)).min(ep);
        let e = ep * rng.gen_range(1..=(512 / ep).min(8));
        let s = DispatchShape {
            tokens: rng.gen_range(1..=8192),
            top_k: rng.gen_range(1..=e.min(8)),
            hidden: rng.gen_range(1..=8192),
            num_experts: e,
            ep,
            domain_size: domain,
            width: 2,
        };
        let naive = naive_tier_volumes(&s).unwrap();
        let hier = hierarchical_dispatch_volumes(&s).unwrap();
        let dedup = token_dedup_volumes(&s).unwrap();
        assert!(hier.inter_node <= naive.inter_node, "{s:?}");
        assert!(dedup.inter_node + dedup.intra_domain <= hier.inter_node + hier.intra_domain);
    }
}

#[test]
fn out_of_range_shapes_error_instead_of_overflowing() {
    let s = DispatchShape {
        tokens: 8192,
        top_k: 64,
        hidden: 8192,
        num_experts: 4096,
        ep: 256,
        domain_size: 8,
        width: 2,
    };
    let _ = hierarchical_dispatch_volumes(&s);
    let _ = token_dedup_volumes(&s);
}
