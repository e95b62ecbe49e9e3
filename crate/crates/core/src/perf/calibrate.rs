//! Fit per-message latency and effective bandwidth from measured latencies.
//!
//! Each (kind, platform) series is regressed as `us = alpha + beta * x`, where
//! `x` is the transfer time in microseconds at the platform's nominal tier
//! bandwidths. `beta` is the inverse bandwidth efficiency.

use std::collections::BTreeMap;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::comm::{
    hierarchical_dispatch_volumes, naive_tier_volumes, token_dedup_volumes, DispatchShape,
    TierVolumes,
};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct LatencyRow {
    /// `dispatch` or `combine`.
    pub kind: String,
    pub ep: u64,
    /// `<hardware>_<backend>`, e.g. `gb200_hybridep` or `h100_a2a`.
    pub platform: String,
    pub us: f64,
}

/// Workload the latency table was measured on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CalibrationWorkload {
    pub tokens: u64,
    pub hidden: u64,
    pub num_experts: u64,
    pub top_k: u64,
    pub width: u64,
}

impl Default for CalibrationWorkload {
    fn default() -> Self {
        CalibrationWorkload {
            tokens: 4096,
            hidden: 7168,
            num_experts: 256,
            top_k: 8,
            width: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Hardware {
    pub domain_size: u64,
    pub intra_domain_bw: f64,
    pub inter_node_bw: f64,
}

pub fn hardware(tag: &str) -> Option<Hardware> {
    match tag {
        "gb200" => Some(Hardware {
            domain_size: 72,
            intra_domain_bw: 900e9,
            inter_node_bw: 50e9,
        }),
        "h100" => Some(Hardware {
            domain_size: 8,
            intra_domain_bw: 450e9,
            inter_node_bw: 50e9,
        }),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Token-based hierarchical dispatch.
    Hybridep,
    /// Per-expert copies over a flat all-to-all.
    A2a,
}

fn split_platform(p: &str) -> Result<(Hardware, Backend)> {
    let (hw, be) = p
        .rsplit_once('_')
        .ok_or_else(|| Error::Parse(format!("platform tag {p:?} lacks a backend suffix")))?;
    let hw = hardware(hw).ok_or_else(|| Error::Parse(format!("unknown hardware {hw:?}")))?;
    let be = match be {
        "hybridep" => Backend::Hybridep,
        "a2a" => Backend::A2a,
        _ => return Err(Error::Parse(format!("unknown backend {be:?}"))),
    };
    Ok((hw, be))
}

/// Tier volumes moved by one operation of the given backend.
pub fn backend_volumes(
    w: &CalibrationWorkload,
    hw: &Hardware,
    be: Backend,
    ep: u64,
) -> Result<TierVolumes> {
    let s = DispatchShape {
        tokens: w.tokens,
        top_k: w.top_k,
        hidden: w.hidden,
        num_experts: w.num_experts,
        ep,
        domain_size: hw.domain_size.min(ep).max(1),
        width: w.width,
    };
    let v = match be {
        Backend::A2a => naive_tier_volumes(&s)?,
        Backend::Hybridep if ep <= hw.domain_size => token_dedup_volumes(&s)?,
        Backend::Hybridep => {
            let t = token_dedup_volumes(&s)?;
            let h = hierarchical_dispatch_volumes(&s)?;
            super::comm::ExactTierVolumes {
                inter_node: h.inter_node,
                intra_domain: t.intra_domain,
            }
        }
    };
    Ok(v.to_f64())
}

/// Nominal transfer time in microseconds with both tiers running concurrently.
pub fn nominal_us(v: &TierVolumes, hw: &Hardware) -> f64 {
    let intra = v.intra_domain / hw.intra_domain_bw;
    let inter = v.inter_node / hw.inter_node_bw;
    intra.max(inter) * 1e6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Fit {
    pub kind: String,
    pub platform: String,
    pub alpha_us: f64,
    pub beta: f64,
    pub rows: usize,
    pub rmse_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Calibration {
    pub workload: CalibrationWorkload,
    pub fits: Vec<Fit>,
}

pub fn parse_latency_csv(text: &str) -> Result<Vec<LatencyRow>> {
    let mut rd = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, r) in rd.deserialize::<LatencyRow>().enumerate() {
        let r = r.map_err(|e| Error::Parse(format!("row {}: {e}", i + 1)))?;
        if !(r.us > 0.0) {
            return Err(Error::Parse(format!(
                "row {}: latency must be positive",
                i + 1
            )));
        }
        rows.push(r);
    }
    if rows.is_empty() {
        return Err(Error::Parse("latency table has no rows".into()));
    }
    Ok(rows)
}

fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx <= 1e-12 * mx.abs().max(1.0) {
        return (0.0, if mx > 0.0 { my / mx } else { 0.0 });
    }
    let beta = sxy / sxx;
    (my - beta * mx, beta)
}

pub fn calibrate(rows: &[LatencyRow], w: CalibrationWorkload) -> Result<Calibration> {
    let mut series: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        if r.kind != "dispatch" && r.kind != "combine" {
            return Err(Error::Parse(format!("unknown kind {:?}", r.kind)));
        }
        let (hw, be) = split_platform(&r.platform)?;
        let x = nominal_us(&backend_volumes(&w, &hw, be, r.ep)?, &hw);
        series
            .entry((r.kind.clone(), r.platform.clone()))
            .or_default()
            .push((x, r.us));
    }
    let fits = series
        .into_iter()
        .map(|((kind, platform), pts)| {
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let (alpha_us, beta) = least_squares(&xs, &ys);
            let sse: f64 = xs
                .iter()
                .zip(&ys)
                .map(|(x, y)| (alpha_us + beta * x - y).powi(2))
                .sum();
            Fit {
                kind,
                platform,
                alpha_us,
                beta,
                rows: pts.len(),
                rmse_us: (sse / pts.len() as f64).sqrt(),
            }
        })
        .collect();
    Ok(Calibration { workload: w, fits })
}

impl Calibration {
    pub fn fit(&self, kind: &str, platform: &str) -> Option<&Fit> {
        self.fits
            .iter()
            .find(|f| f.kind == kind && f.platform == platform)
    }

    /// Predicted latency in microseconds at EP size `ep`.
    pub fn predict_us(&self, kind: &str, platform: &str, ep: u64) -> Result<f64> {
        let f = match self.fit(kind, platform) {
            Some(f) => f,
            None => return invalid(format!("no calibration for {kind} on {platform}")),
        };
        let (hw, be) = split_platform(platform)?;
        let x = nominal_us(&backend_volumes(&self.workload, &hw, be, ep)?, &hw);
        Ok(f.alpha_us + f.beta * x)
    }
}

/// Latency table shipped with the crate.
pub const TABLE4_CSV: &str = include_str!("../../fixtures/table4_latency.csv");
