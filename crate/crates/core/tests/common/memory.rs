//! Hand census of toy job memory.

use moelab::model::TrainingJobSpec;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Debug, Clone, Copy)]
pub struct Toy {
    pub layers: u64,
    pub dense_prefix: u64,
    pub experts: u64,
    pub k: u64,
    pub h: u64,
    pub m: u64,
    pub f: u64,
    pub heads: u64,
    pub groups: u64,
    pub head_dim: u64,
    pub shared: u64,
    pub gated: bool,
    pub vocab: u64,
    pub seq: u64,
    pub mbs: u64,
}

impl Toy {
    pub fn random(rng: &mut ChaCha8Rng) -> Toy {
        let layers = rng.gen_range(0..=2);
        let experts = [2, 4, 8][rng.gen_range(0..3)];
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        Toy {
            layers,
            dense_prefix: rng.gen_range(0..=layers),
            experts,
            k: rng.gen_range(1..=experts.min(4)),
            h: [8, 16][rng.gen_range(0..2)],
            m: [8, 16, 24][rng.gen_range(0..3)],
            f: [16, 32][rng.gen_range(0..2)],
            heads,
            groups: [1, heads][rng.gen_range(0..2)],
            head_dim: [4, 8][rng.gen_range(0..2)],
            shared: rng.gen_range(0..=1),
            gated: rng.gen_bool(0.5),
            vocab: [0, 32][rng.gen_range(0..2)],
            seq: [8, 16, 32][rng.gen_range(0..3)],
            mbs: rng.gen_range(1..=2),
        }
    }

    pub fn job(&self) -> TrainingJobSpec {
        serde_json::from_value(json!({
            "model": {
                "name": "toy",
                "num_layers": self.layers,
                "num_dense_prefix_layers": self.dense_prefix,
                "num_experts": self.experts,
                "top_k": self.k,
                "hidden_dim": self.h,
                "ffn_hidden_dim": self.m,
                "dense_ffn_hidden_dim": self.f,
                "num_shared_experts": self.shared,
                "has_embedding": self.vocab > 0,
                "vocab_size": self.vocab,
                "gated_linear_unit": self.gated,
                "attention_kind": {"kind": "standard", "num_heads": self.heads,
                                   "num_query_groups": self.groups, "head_dim": self.head_dim}
            },
            "cluster": {"num_gpus": 1, "gpu_memory": 80e9, "nvlink_domain_size": 8,
                        "intra_domain_bw": 450e9, "inter_node_bw": 50e9,
                        "per_message_latency": 1e-5, "host_link_bw": 50e9},
            "parallel": {
                "attention": {"tp": 1, "cp": 1, "dp": 1, "pp": 1},
                "moe": {"etp": 1, "ep": 1, "edp": 1, "pp": 1},
                "vpp": 1, "mbs": self.mbs, "gbs": self.mbs * 2, "seq_len": self.seq,
                "precision_recipe": "BF16"
            }
        }))
        .unwrap()
    }

    pub fn mats(&self) -> u64 {
        if self.gated {
            3
        } else {
            2
        }
    }

    pub fn glu(&self) -> u64 {
        if self.gated {
            2
        } else {
            1
        }
    }

    pub fn params(&self) -> u64 {
        let (h, q, kv) = (
            self.h,
            self.heads * self.head_dim,
            self.groups * self.head_dim,
        );
        let attn = h * q + 2 * h * kv + q * h + 2 * h;
        let moe = self.experts * self.mats() * h * self.m
            + h * self.experts
            + self.shared * self.mats() * h * self.m;
        let dense = self.mats() * h * self.f;
        let emb = if self.vocab > 0 {
            2 * self.vocab * h + h
        } else {
            0
        };
        self.layers * attn
            + self.dense_prefix * dense
            + (self.layers - self.dense_prefix) * moe
            + emb
    }

    pub fn tok(&self) -> u64 {
        self.seq * self.mbs
    }

    /// Per-tensor bytes of one layer: (name, bytes, low-precision eligible).
    pub fn attention(&self) -> Vec<(&'static str, u64, bool)> {
        let (t, h, q, kv) = (
            self.tok(),
            self.h,
            self.heads * self.head_dim,
            self.groups * self.head_dim,
        );
        vec![
            ("attn_norm_in", 2 * t * h, false),
            ("attn_norm_out", 2 * t * h, false),
            ("qkv", 2 * t * (q + 2 * kv), false),
            ("attn_out", 2 * t * q, false),
            ("softmax_lse", 4 * t * self.heads, false),
        ]
    }

    pub fn moe(&self) -> Vec<(&'static str, u64, bool)> {
        let (t, h, k, m) = (self.tok(), self.h, self.k, self.m);
        let mut v = self.attention();
        v.extend([
            ("mlp_norm_in", 2 * t * h, false),
            ("mlp_norm_out", 2 * t * h, false),
            ("router_probs", 4 * t * self.experts, false),
            ("expert_fc1_in", 2 * t * k * h, true),
            ("expert_fc1_out", 2 * t * k * self.glu() * m, false),
            ("expert_act_out", 2 * t * k * m, true),
            ("expert_out", 2 * t * k * h, false),
        ]);
        if self.shared > 0 {
            v.push((
                "shared_fc1_out",
                2 * t * self.glu() * self.shared * m,
                false,
            ));
            v.push(("shared_act_out", 2 * t * self.shared * m, true));
        }
        v
    }

    pub fn dense(&self) -> Vec<(&'static str, u64, bool)> {
        let (t, h, f) = (self.tok(), self.h, self.f);
        let mut v = self.attention();
        v.extend([
            ("mlp_norm_in", 2 * t * h, false),
            ("mlp_norm_out", 2 * t * h, true),
            ("dense_fc1_out", 2 * t * self.glu() * f, false),
            ("dense_act_out", 2 * t * f, true),
        ]);
        v
    }

    pub fn loss(&self) -> Vec<(&'static str, u64, bool)> {
        if self.vocab == 0 {
            return vec![];
        }
        vec![
            ("final_norm_in", 2 * self.tok() * self.h, false),
            ("logits", 4 * self.tok() * self.vocab, false),
        ]
    }

    pub fn all(&self) -> Vec<(&'static str, u64, bool)> {
        let mut v = vec![];
        for _ in 0..self.dense_prefix {
            v.extend(self.dense());
        }
        for _ in self.dense_prefix..self.layers {
            v.extend(self.moe());
        }
        v.extend(self.loss());
        v
    }
}

pub fn sum(v: &[(&str, u64, bool)], keep: impl Fn(&str, bool) -> bool) -> u64 {
    v.iter().filter(|(n, _, e)| keep(n, *e)).map(|t| t.1).sum()
}
