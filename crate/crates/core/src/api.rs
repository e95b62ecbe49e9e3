//! Versioned JSON operations shared by the CLI and the HTTP service.
//!
//! Every operation takes a JSON request body and returns an [`ApiResponse`]
//! envelope. Both front ends render the envelope with [`ApiResponse::to_json`],
//! so identical requests produce identical bytes.

use ndarray::Array2;
use schemars::JsonSchema;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::memory::{self, LeverRequest};
use crate::model::{validate_job, ParallelConfig, TrainingJobSpec};
use crate::perf::{self, CalibrationWorkload};
use crate::pipeline::{self, LayoutSimRequest, SimInput};
use crate::planners::{self, DynamicCpRequest, EchoRequest};
use crate::{folding, moe, quant};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum Operation {
    Estimate,
    Cost,
    Simulate,
    PlanDynamicCp,
    PlanEcho,
    PlanGroups,
    Advise,
    QuantCheck,
    MoeCheck,
    Calibrate,
    Fixtures,
}

impl Operation {
    pub const ALL: [Operation; 11] = [
        Operation::Estimate,
        Operation::Cost,
        Operation::Simulate,
        Operation::PlanDynamicCp,
        Operation::PlanEcho,
        Operation::PlanGroups,
        Operation::Advise,
        Operation::QuantCheck,
        Operation::MoeCheck,
        Operation::Calibrate,
        Operation::Fixtures,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Operation::Estimate => "estimate",
            Operation::Cost => "cost",
            Operation::Simulate => "simulate",
            Operation::PlanDynamicCp => "plan-dynamic-cp",
            Operation::PlanEcho => "plan-echo",
            Operation::PlanGroups => "plan-groups",
            Operation::Advise => "advise",
            Operation::QuantCheck => "quant-check",
            Operation::MoeCheck => "moe-check",
            Operation::Calibrate => "calibrate",
            Operation::Fixtures => "fixtures",
        }
    }

    pub fn from_name(name: &str) -> Option<Operation> {
        Operation::ALL.into_iter().find(|o| o.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    /// The body is not JSON or does not match the request schema.
    BadRequest,
    /// The request parsed but breaks a constraint, or a check failed.
    Violation,
}

impl Status {
    pub fn http_code(self) -> u16 {
        match self {
            Status::Ok => 200,
            Status::BadRequest => 400,
            Status::Violation => 422,
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Status::Ok => 0,
            Status::Violation => 1,
            Status::BadRequest => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Error,
    Warning,
    Info,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Diagnostic {
    pub level: Level,
    pub code: String,
    pub message: String,
}

impl Diagnostic {
    fn error(code: &str, message: impl Into<String>) -> Self {
        Diagnostic {
            level: Level::Error,
            code: code.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ApiResponse {
    pub schema_version: u32,
    pub operation: Operation,
    /// sha256 of the canonical request JSON (sorted keys, no whitespace), or
    /// of the raw bytes when they are not JSON.
    pub request_digest: String,
    pub status: Status,
    pub diagnostics: Vec<Diagnostic>,
    pub result: Option<Value>,
}

impl ApiResponse {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("response serializes");
        s.push('\n');
        s
    }
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Canonical bytes of a request value. Object keys come out sorted.
pub fn canonical(v: &Value) -> Vec<u8> {
    serde_json::to_vec(v).expect("value serializes")
}

/// A fixture job shipped with the library.
#[derive(Debug, Clone, Copy)]
pub struct Fixture {
    pub name: &'static str,
    pub json: &'static str,
}

pub const FIXTURES: [Fixture; 2] = [
    Fixture {
        name: "deepseek-v3",
        json: include_str!("../fixtures/deepseek-v3.json"),
    },
    Fixture {
        name: "qwen3-235b",
        json: include_str!("../fixtures/qwen3-235b.json"),
    },
];

pub fn fixture(name: &str) -> Option<Fixture> {
    FIXTURES.into_iter().find(|f| f.name == name)
}

/// Outcome of an operation body before it is wrapped in the envelope.
struct Outcome {
    status: Status,
    diagnostics: Vec<Diagnostic>,
    result: Option<Value>,
}

impl Outcome {
    fn ok(result: impl Serialize) -> Outcome {
        Outcome {
            status: Status::Ok,
            diagnostics: vec![],
            result: Some(to_value(result)),
        }
    }

    fn bad(code: &str, message: impl Into<String>) -> Outcome {
        Outcome {
            status: Status::BadRequest,
            diagnostics: vec![Diagnostic::error(code, message)],
            result: None,
        }
    }
}

impl From<Error> for Outcome {
    fn from(e: Error) -> Outcome {
        Outcome {
            status: Status::Violation,
            diagnostics: vec![Diagnostic::error(e.code(), e.to_string())],
            result: None,
        }
    }
}

fn to_value(v: impl Serialize) -> Value {
    serde_json::to_value(v).expect("result serializes")
}

fn typed<T: DeserializeOwned>(v: Value) -> Result<T, Outcome> {
    serde_json::from_value(v).map_err(|e| Outcome::bad("schema_mismatch", e.to_string()))
}

fn lib<T>(r: crate::Result<T>) -> Result<T, Outcome> {
    r.map_err(Outcome::from)
}

/// Parse a job and reject it with the validation report when it breaks a
/// constraint.
fn job(v: Value) -> Result<TrainingJobSpec, Outcome> {
    checked(typed(v)?)
}

fn checked(job: TrainingJobSpec) -> Result<TrainingJobSpec, Outcome> {
    let violations = validate_job(&job);
    if violations.is_empty() {
        return Ok(job);
    }
    Err(Outcome {
        status: Status::Violation,
        diagnostics: violations
            .iter()
            .map(|v| Diagnostic::error(&v.code, v.message.clone()))
            .collect(),
        result: Some(json!({ "violations": violations })),
    })
}

/// Body of `estimate`: a training job plus optional levers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct EstimateRequest {
    #[serde(flatten)]
    pub job: TrainingJobSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levers: Option<LeverRequest>,
}

/// Body of `simulate`: a layout string with per-symbol costs, or explicit
/// per-stage costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(untagged)]
pub enum SimulateRequest {
    Layout(LayoutSimRequest),
    Stages(SimInput),
}

/// Body of `plan/echo`: load counts plus an optional T × E routing map to
/// rewrite onto the clones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct EchoPlanRequest {
    #[serde(flatten)]
    pub request: EchoRequest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing_map: Option<Vec<Vec<bool>>>,
}

/// Body of `quant-check` and `moe-check`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CheckRequest {
    #[serde(default)]
    pub seed: u64,
    /// Samples (quant) or instances (moe) per check.
    #[serde(default)]
    pub samples: Option<usize>,
}

/// Body of `calibrate`. Without `csv` the bundled latency table is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CalibrateRequest {
    #[serde(default)]
    pub csv: Option<String>,
    #[serde(default)]
    pub workload: Option<CalibrationWorkload>,
}

/// One entry of the `fixtures` listing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct FixtureEntry {
    pub name: String,
    pub job: TrainingJobSpec,
}

fn estimate(v: Value) -> Result<Outcome, Outcome> {
    let req: EstimateRequest = typed(v)?;
    let job = checked(req.job)?;
    let mut r = lib(memory::estimate(&job))?;
    if let Some(l) = req.levers {
        r = lib(r.apply_levers(&l))?;
    }
    let mut out = Outcome::ok(&r);
    if !r.fits {
        out.diagnostics.push(Diagnostic {
            level: Level::Warning,
            code: "exceeds_gpu_memory".into(),
            message: format!(
                "peak {:.1} GiB exceeds the {:.1} GiB device",
                r.gib.total,
                r.gpu_memory / memory::GIB
            ),
        });
    }
    Ok(out)
}

fn simulate(v: Value) -> Result<Outcome, Outcome> {
    let by_layout = v.get("layout").is_some();
    let s = if by_layout {
        lib(pipeline::simulate_layout(&typed::<LayoutSimRequest>(v)?))?
    } else {
        lib(pipeline::simulate(&typed::<SimInput>(v)?))?
    };
    Ok(Outcome::ok(s))
}

fn plan_echo(v: Value) -> Result<Outcome, Outcome> {
    let EchoPlanRequest {
        request: req,
        routing_map,
    } = typed(v)?;
    let plan = lib(planners::echo_plan(&req))?;
    let mut out = to_value(&plan);
    if let Some(rows) = routing_map {
        let width = rows.first().map_or(req.counts.len(), Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Outcome::bad(
                "schema_mismatch",
                "routing_map rows differ in length",
            ));
        }
        let flat: Vec<bool> = rows.concat();
        let arr = Array2::from_shape_vec((rows.len(), width), flat)
            .map_err(|e| Outcome::bad("schema_mismatch", e.to_string()))?;
        let rewritten = lib(planners::echo_rewrite(&arr, &plan))?;
        let rows: Vec<Vec<bool>> = rewritten.rows().into_iter().map(|r| r.to_vec()).collect();
        out["routing_map"] = to_value(rows);
    }
    Ok(Outcome {
        status: Status::Ok,
        diagnostics: if plan.best_effort {
            vec![Diagnostic {
                level: Level::Warning,
                code: "best_effort".into(),
                message: "spare slots cannot reach the balance target".into(),
            }]
        } else {
            vec![]
        },
        result: Some(out),
    })
}

fn check_outcome(passed: bool, report: impl Serialize) -> Outcome {
    let mut out = Outcome::ok(report);
    if !passed {
        out.status = Status::Violation;
        out.diagnostics.push(Diagnostic::error(
            "check_failed",
            "one or more property checks failed",
        ));
    }
    out
}

fn fixtures() -> Vec<FixtureEntry> {
    FIXTURES
        .iter()
        .map(|f| FixtureEntry {
            name: f.name.into(),
            job: serde_json::from_str(f.json).expect("fixture parses"),
        })
        .collect()
}

fn dispatch(op: Operation, v: Value) -> Result<Outcome, Outcome> {
    match op {
        Operation::Estimate => estimate(v),
        Operation::Cost => Ok(Outcome::ok(lib(perf::cost(&job(v)?))?)),
        Operation::Simulate => simulate(v),
        Operation::PlanDynamicCp => {
            let req: DynamicCpRequest = typed(v)?;
            Ok(Outcome::ok(lib(planners::dynamic_cp_plan(&req))?))
        }
        Operation::PlanEcho => plan_echo(v),
        Operation::PlanGroups => {
            let cfg: ParallelConfig = typed(v)?;
            Ok(Outcome::ok(lib(folding::derive_groups(&cfg))?))
        }
        Operation::Advise => Ok(Outcome::ok(perf::advise(&job(v)?))),
        Operation::QuantCheck => {
            let r: CheckRequest = typed(v)?;
            let rep = lib(quant::run_checks(r.seed, r.samples.unwrap_or(100_000)))?;
            Ok(check_outcome(rep.passed, &rep))
        }
        Operation::MoeCheck => {
            let r: CheckRequest = typed(v)?;
            let rep = lib(moe::run_checks(r.seed, r.samples.unwrap_or(200)))?;
            Ok(check_outcome(rep.passed, &rep))
        }
        Operation::Calibrate => {
            let r: CalibrateRequest = typed(v)?;
            let rows = lib(perf::parse_latency_csv(
                r.csv.as_deref().unwrap_or(perf::calibrate::TABLE4_CSV),
            ))?;
            Ok(Outcome::ok(lib(perf::calibrate(
                &rows,
                r.workload.unwrap_or_default(),
            ))?))
        }
        Operation::Fixtures => Ok(Outcome::ok(fixtures())),
    }
}

/// Run an operation on an already-parsed request.
pub fn handle_value(op: Operation, request: Value) -> ApiResponse {
    let request_digest = digest(&canonical(&request));
    let o = dispatch(op, request).unwrap_or_else(|e| e);
    ApiResponse {
        schema_version: SCHEMA_VERSION,
        operation: op,
        request_digest,
        status: o.status,
        diagnostics: o.diagnostics,
        result: o.result,
    }
}

/// Run an operation on a raw request body.
pub fn handle(op: Operation, body: &[u8]) -> ApiResponse {
    match serde_json::from_slice::<Value>(body) {
        Ok(v) => handle_value(op, v),
        Err(e) => ApiResponse {
            schema_version: SCHEMA_VERSION,
            operation: op,
            request_digest: digest(body),
            status: Status::BadRequest,
            diagnostics: vec![Diagnostic::error("malformed_json", e.to_string())],
            result: None,
        },
    }
}

/// JSON Schemas of the v1 request and result bodies, keyed by file stem.
pub fn schemas() -> Vec<(&'static str, Value)> {
    fn of<T: JsonSchema>() -> Value {
        to_value(schemars::schema_for!(T))
    }
    vec![
        ("api-response", of::<ApiResponse>()),
        ("training-job-spec", of::<TrainingJobSpec>()),
        ("estimate-request", of::<EstimateRequest>()),
        ("memory-report", of::<memory::MemoryReport>()),
        ("cost-report", of::<perf::CostReport>()),
        ("simulate-request", of::<SimulateRequest>()),
        ("schedule", of::<pipeline::Schedule>()),
        ("dynamic-cp-request", of::<DynamicCpRequest>()),
        ("packed-batch", of::<planners::PackedBatch>()),
        ("echo-request", of::<EchoPlanRequest>()),
        ("echo-plan", of::<planners::EchoPlan>()),
        ("parallel-config", of::<ParallelConfig>()),
        ("process-groups", of::<folding::ProcessGroups>()),
        ("recommendations", of::<Vec<perf::Recommendation>>()),
        ("check-request", of::<CheckRequest>()),
        ("quant-check-report", of::<quant::QuantCheckReport>()),
        ("moe-check-report", of::<moe::MoeCheckReport>()),
        ("quant-tensor", of::<quant::QuantTensor>()),
        ("calibrate-request", of::<CalibrateRequest>()),
        ("calibration", of::<perf::Calibration>()),
        ("fixtures", of::<Vec<FixtureEntry>>()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds() -> Value {
        serde_json::from_str(fixture("deepseek-v3").unwrap().json).unwrap()
    }

    #[test]
    fn digest_ignores_whitespace_and_key_order() {
        let a = handle(
            Operation::PlanEcho,
            br#"{"counts":[10,2,2,2],"experts_per_rank":1,"spare_slots":[1,1,1,1]}"#,
        );
        let b = handle(
            Operation::PlanEcho,
            b"{ \"spare_slots\": [1,1,1,1],\n \"experts_per_rank\": 1, \"counts\": [10,2,2,2] }",
        );
        assert_eq!(a.status, Status::Ok);
        assert_eq!(a, b);
        assert_eq!(a.request_digest.len(), 64);
    }

    #[test]
    fn malformed_and_mismatched() {
        let r = handle(Operation::Estimate, b"{not json");
        assert_eq!(r.status, Status::BadRequest);
        assert_eq!(r.diagnostics[0].code, "malformed_json");
        assert_eq!(r.request_digest, digest(b"{not json"));
        let r = handle(Operation::Estimate, b"{\"model\": 3}");
        assert_eq!(r.status.http_code(), 400);
    }

    #[test]
    fn violation_lists_pp_mismatch() {
        let mut v = ds();
        v["parallel"]["moe"]["pp"] = json!(8);
        let r = handle_value(Operation::Estimate, v);
        assert_eq!(r.status.http_code(), 422);
        assert!(r
            .diagnostics
            .iter()
            .any(|d| d.message.contains("PP mismatch")));
        assert!(r.result.unwrap()["violations"].is_array());
    }

    #[test]
    fn estimate_with_levers_matches_library() {
        let mut v = ds();
        v["levers"] = json!({"recompute": ["moe_act"]});
        let r = handle_value(Operation::Estimate, v);
        assert_eq!(r.status, Status::Ok);
        let job: TrainingJobSpec = serde_json::from_value(ds()).unwrap();
        let lib = memory::estimate(&job)
            .unwrap()
            .apply_recompute(&[crate::model::Module::MoeAct])
            .unwrap();
        assert_eq!(r.result.unwrap()["total"], json!(lib.total));
    }

    #[test]
    fn fixtures_listed() {
        let r = handle(Operation::Fixtures, b"{}");
        let names: Vec<String> = r
            .result
            .unwrap()
            .as_array()
            .unwrap()
            .iter()
            .map(|f| f["name"].as_str().unwrap().to_string())
            .collect();
        assert_eq!(names, vec!["deepseek-v3", "qwen3-235b"]);
    }

    #[test]
    fn operation_names_round_trip() {
        for op in Operation::ALL {
            assert_eq!(Operation::from_name(op.name()), Some(op));
            assert_eq!(serde_json::to_value(op).unwrap(), json!(op.name()));
        }
    }
}
