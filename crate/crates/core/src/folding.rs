//! Process-group derivation for folded attention/MoE parallelism.
//!
//! Both mappings share one flat rank space. Attention ranks nest as
//! (tp, cp, dp, pp) and MoE ranks as (etp, ep, edp, pp), fastest first.

use std::collections::BTreeMap;

use num_rational::Ratio;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::ParallelConfig;

/// Groups as lists of ranks. Every rank lands in exactly one group per kind.
pub type GroupList = Vec<Vec<usize>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ProcessGroups {
    pub world: usize,
    /// Keyed by group kind: tp, cp, dp, pp, tp_cp, dp_cp, etp, ep, edp, tp_ep.
    pub groups: BTreeMap<String, GroupList>,
}

impl ProcessGroups {
    pub fn get(&self, kind: &str) -> &GroupList {
        &self.groups[kind]
    }

    /// The group of `kind` containing `rank`.
    pub fn group_of(&self, kind: &str, rank: usize) -> Option<&Vec<usize>> {
        self.groups.get(kind)?.iter().find(|g| g.contains(&rank))
    }

    /// Relabel every rank through `perm` (logical -> physical).
    pub fn permuted(&self, perm: &[usize]) -> Result<ProcessGroups> {
        if perm.len() != self.world {
            return invalid("permutation length differs from world size");
        }
        let mut seen = vec![false; self.world];
        for &p in perm {
            if p >= self.world || seen[p] {
                return invalid("not a permutation");
            }
            seen[p] = true;
        }
        let groups = self
            .groups
            .iter()
            .map(|(k, gl)| {
                let gl = gl
                    .iter()
                    .map(|g| {
                        let mut g: Vec<usize> = g.iter().map(|&r| perm[r]).collect();
                        g.sort_unstable();
                        g
                    })
                    .collect();
                (k.clone(), gl)
            })
            .collect();
        Ok(ProcessGroups {
            world: self.world,
            groups,
        })
    }

    /// Largest number of NVLink domains any group of `kind` spans, assuming
    /// domains are consecutive physical rank blocks.
    pub fn max_domain_span(&self, kind: &str, domain_size: usize) -> usize {
        let d = domain_size.max(1);
        self.groups
            .get(kind)
            .map(|gl| {
                gl.iter()
                    .map(|g| {
                        let mut doms: Vec<usize> = g.iter().map(|r| r / d).collect();
                        doms.dedup();
                        doms.len()
                    })
                    .max()
                    .unwrap_or(0)
            })
            .unwrap_or(0)
    }
}

/// Partition ranks of a nested index space, grouping over the dims in `vary`.
fn partition(dims: &[usize], vary: &[usize]) -> GroupList {
    let world: usize = dims.iter().product();
    let mut map: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for r in 0..world {
        let mut rem = r;
        let mut key = Vec::with_capacity(dims.len());
        for (i, &d) in dims.iter().enumerate() {
            let c = rem % d;
            rem /= d;
            if !vary.contains(&i) {
                key.push(c);
            }
        }
        map.entry(key).or_default().push(r);
    }
    map.into_values().collect()
}

/// Expert data-parallel degree implied by the attention block and MoE tuple.
pub fn derive_edp(tp: usize, cp: usize, dp: usize, etp: usize, ep: usize) -> Result<usize> {
    let attn = tp * cp * dp;
    let moe = etp * ep;
    if moe == 0 || !attn.is_multiple_of(moe) {
        return invalid(format!("tp*cp*dp={attn} is not divisible by etp*ep={moe}"));
    }
    Ok(attn / moe)
}

pub fn derive_groups(cfg: &ParallelConfig) -> Result<ProcessGroups> {
    let a = cfg.attention;
    let m = cfg.moe;
    if a.pp != m.pp {
        return invalid(format!("PP mismatch: {} vs {}", a.pp, m.pp));
    }
    let world = cfg.attention_world();
    if world != cfg.moe_world() {
        return invalid(format!(
            "attention world {} differs from moe world {}",
            world,
            cfg.moe_world()
        ));
    }
    if world == 0 {
        return invalid("empty world");
    }
    let ad = [a.tp, a.cp, a.dp, a.pp];
    let md = [m.etp, m.ep, m.edp, m.pp];
    let mut groups = BTreeMap::new();
    groups.insert("tp".into(), partition(&ad, &[0]));
    groups.insert("cp".into(), partition(&ad, &[1]));
    groups.insert("dp".into(), partition(&ad, &[2]));
    groups.insert("pp".into(), partition(&ad, &[3]));
    groups.insert("tp_cp".into(), partition(&ad, &[0, 1]));
    groups.insert("dp_cp".into(), partition(&ad, &[1, 2]));
    groups.insert("etp".into(), partition(&md, &[0]));
    groups.insert("ep".into(), partition(&md, &[1]));
    groups.insert("edp".into(), partition(&md, &[2]));
    groups.insert("tp_ep".into(), partition(&md, &[0, 1]));
    Ok(ProcessGroups { world, groups })
}

/// Which group kinds each MoE component communicates over.
pub fn component_group_map() -> BTreeMap<&'static str, Vec<&'static str>> {
    let mut m = BTreeMap::new();
    m.insert("router", vec!["tp", "cp", "tp_cp"]);
    m.insert("dispatcher", vec!["ep", "tp_ep"]);
    m.insert("experts", vec!["ep", "etp", "edp"]);
    m.insert("shared_experts", vec!["tp"]);
    m
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    if a == 0 || b == 0 {
        0
    } else {
        a / gcd(a, b) * b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct RequiredDegrees {
    pub tp: usize,
    pub cp: usize,
    pub dp: usize,
    pub pp: usize,
    pub etp: usize,
    pub ep: usize,
}

/// Smallest world size that realises the degrees. Unfolded layouts nest EP
/// inside DP; folded layouts let EP reuse TP x CP x DP ranks.
pub fn min_gpus(d: RequiredDegrees, folded: bool) -> usize {
    if folded {
        lcm(d.tp * d.cp * d.dp, d.etp * d.ep) * d.pp
    } else {
        d.tp * d.cp * d.pp * lcm(d.dp, d.ep) * d.etp
    }
}

/// Scale applied to expert gradients so they average over the dense DP group.
pub fn expert_grad_scale(edp: u64, dp: u64) -> Result<Ratio<u64>> {
    if dp == 0 {
        return invalid("dp must be positive");
    }
    Ok(Ratio::new(edp, dp))
}
