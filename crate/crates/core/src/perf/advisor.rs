//! Rule-based parallelism advice.
//!
//! G1 minimise model parallelism, G2 keep EP×ETP (and TP) inside one NVLink
//! domain, G3 use PP to scale across nodes, G4 prefer EP over expert TP,
//! G5 use CP only for long sequences.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::memory::estimate;
use crate::model::{validate_job, TrainingJobSpec};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, JsonSchema,
)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Warning,
    Suggestion,
    Info,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Recommendation {
    pub rule: String,
    pub severity: Severity,
    pub message: String,
}

fn rec(rule: &str, severity: Severity, message: String) -> Recommendation {
    Recommendation {
        rule: rule.into(),
        severity,
        message,
    }
}

/// A copy of `job` with TP halved and DP doubled, if still consistent.
fn halve_tp(job: &TrainingJobSpec) -> Option<TrainingJobSpec> {
    let mut j = job.clone();
    let a = &mut j.parallel.attention;
    if a.tp < 2 || !a.tp.is_multiple_of(2) {
        return None;
    }
    a.tp /= 2;
    a.dp *= 2;
    if !validate_job(&j).is_empty() {
        return None;
    }
    Some(j)
}

pub fn advise(job: &TrainingJobSpec) -> Vec<Recommendation> {
    let a = job.parallel.attention;
    let m = job.parallel.moe;
    let domain = job.cluster.nvlink_domain_size.max(1);
    let world = job.cluster.num_gpus;
    let seq = job.parallel.seq_len;
    let mut out = Vec::new();

    if let Some(j) = halve_tp(job) {
        if let Ok(r) = estimate(&j) {
            if r.fits {
                out.push(rec(
                    "G1",
                    Severity::Suggestion,
                    format!(
                        "TP={} can drop to {} with DP={}: the estimate still fits ({:.1} of {:.1} GiB)",
                        a.tp,
                        a.tp / 2,
                        a.dp * 2,
                        r.gib.total,
                        r.gpu_memory / crate::memory::GIB
                    ),
                ));
            }
        }
    }

    if m.ep * m.etp > domain {
        out.push(rec(
            "G2",
            Severity::Warning,
            format!(
                "EP×ETP={} exceeds the NVLink domain of {domain}; all-to-all crosses the slower inter-node fabric",
                m.ep * m.etp
            ),
        ));
    }
    if a.tp > domain {
        out.push(rec(
            "G2",
            Severity::Warning,
            format!("TP={} exceeds the NVLink domain of {domain}", a.tp),
        ));
    }

    if world > domain && a.pp == 1 {
        out.push(rec(
            "G3",
            Severity::Suggestion,
            format!("{world} GPUs span several NVLink domains; use PP across nodes instead of widening TP/EP"),
        ));
    }

    if m.etp > 1
        && m.ep * m.etp <= job.model.num_experts
        && job.model.num_experts.is_multiple_of(m.ep * m.etp)
    {
        out.push(rec(
            "G4",
            Severity::Suggestion,
            format!(
                "ETP={} splits every expert GEMM; EP{}×ETP1 keeps the same group size with larger GEMMs (EP8×TP1 outperforms EP4×TP2)",
                m.etp,
                m.ep * m.etp
            ),
        ));
    }

    if a.cp > 1 && seq < 8192 {
        let severity = if seq < 4096 {
            Severity::Warning
        } else {
            Severity::Suggestion
        };
        out.push(rec(
            "G5",
            severity,
            format!(
                "CP={} at sequence length {seq}; context parallelism pays off from about 8K tokens",
                a.cp
            ),
        ));
    }

    out.sort_by(|x, y| {
        x.severity
            .cmp(&y.severity)
            .then_with(|| x.rule.cmp(&y.rule))
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testutil::toy_job;

    fn rules(j: &TrainingJobSpec) -> Vec<String> {
        advise(j).into_iter().map(|r| r.rule).collect()
    }

    #[test]
    fn clean_job_has_no_hits() {
        assert!(rules(&toy_job()).is_empty());
    }

    #[test]
    fn wide_ep_warns() {
        let mut j = toy_job();
        j.model.num_experts = 128;
        j.cluster.num_gpus = 128;
        j.parallel.attention.dp = 128;
        j.parallel.moe.ep = 128;
        j.parallel.gbs = 128;
        let r = advise(&j);
        assert!(r
            .iter()
            .any(|r| r.rule == "G2" && r.severity == Severity::Warning));
        assert!(r.iter().any(|r| r.rule == "G3"));
    }

    #[test]
    fn short_context_cp_warns() {
        let mut j = toy_job();
        j.cluster.num_gpus = 4;
        j.parallel.attention.cp = 4;
        j.parallel.moe.ep = 4;
        j.parallel.seq_len = 2048;
        let r = advise(&j);
        assert!(r
            .iter()
            .any(|r| r.rule == "G5" && r.severity == Severity::Warning));
    }

    #[test]
    fn expert_tp_suggests_ep() {
        let mut j = toy_job();
        j.model.num_experts = 8;
        j.cluster.num_gpus = 8;
        j.parallel.attention.dp = 8;
        j.parallel.gbs = 8;
        j.parallel.moe.ep = 4;
        j.parallel.moe.etp = 2;
        assert!(rules(&j).contains(&"G4".to_string()));
    }

    #[test]
    fn tp_reduction_suggested_when_memory_allows() {
        let mut j = toy_job();
        j.cluster.num_gpus = 2;
        j.parallel.attention.tp = 2;
        j.parallel.moe.ep = 2;
        j.parallel.gbs = 2;
        assert!(rules(&j).contains(&"G1".to_string()));
    }
}
