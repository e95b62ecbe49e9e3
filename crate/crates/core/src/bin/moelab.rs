use std::io::{IsTerminal, Read};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use moelab::api::{self, ApiResponse, Operation};
use moelab::memory::{LeverRequest, ReportRank};
use moelab::model::PrecisionRecipe;

/// Planning, estimation and numerics for large-scale MoE training.
///
/// Every subcommand prints a versioned JSON envelope on stdout. Exit status is
/// 0 on success, 1 on validation violations or failed checks, 2 on usage errors.
#[derive(Parser)]
#[command(name = "moelab", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Per-GPU memory report for a training job.
    Estimate {
        /// Job JSON path, `-` for stdin, or a built-in fixture name.
        job: String,
        /// Comma-separated levers: recompute:<module>, offload:<module>,
        /// precision:<recipe>, mem_efficient_permutation, rank:<peak|decoder_peak|N>.
        #[arg(long, value_delimiter = ',')]
        levers: Vec<String>,
    },
    /// Communication and compute cost report for a training job.
    Cost { job: String },
    /// Simulate a pipeline schedule.
    Simulate(SimulateArgs),
    /// Runtime planners.
    #[command(subcommand)]
    Plan(PlanCmd),
    /// Run the quantization property suite.
    QuantCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
    /// Run the MoE numerics property suite.
    MoeCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random instances per check.
        #[arg(long, default_value_t = 200)]
        instances: usize,
    },
    /// Configuration recommendations for a training job.
    Advise { job: String },
    /// Fit the latency model to a CSV table with columns kind, ep, platform, us.
    Calibrate {
        /// Defaults to the bundled dispatch/combine latency table.
        csv: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
    },
}

#[derive(Args)]
struct SimulateArgs {
    /// Layout string, e.g. "Et*3|(tt|)*29m|L".
    #[arg(long, conflicts_with = "input")]
    layout: Option<String>,
    /// Full request JSON (stage costs or layout form).
    #[arg(long)]
    input: Option<String>,
    #[arg(long)]
    pp: Option<usize>,
    #[arg(long)]
    vpp: Option<usize>,
    #[arg(long, short = 'm')]
    microbatches: Option<usize>,
    /// Decoder layers the layout must hold.
    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    extra_warmup: bool,
    #[arg(long)]
    wd_split: bool,
    /// Also write a Chrome trace of the schedule to this path.
    #[arg(long)]
    chrome_trace: Option<PathBuf>,
}

#[derive(Subcommand)]
enum PlanCmd {
    /// Pack variable-length sequences and choose per-bin CP sizes.
    DynamicCp {
        /// Request JSON; otherwise built from the flags.
        input: Option<String>,
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<u64>,
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long, default_value_t = 1)]
        dp: usize,
        #[arg(long, default_value_t = 1)]
        cp_max: usize,
        #[arg(long, default_value_t = 1)]
        pp: usize,
    },
    /// Plan hot-expert clones for a load vector.
    Echo {
        input: Option<String>,
        #[arg(long, value_delimiter = ',')]
        counts: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        experts_per_rank: usize,
        #[arg(long, value_delimiter = ',')]
        spare_slots: Vec<usize>,
    },
    /// Derive process groups from a parallel config or a full job.
    Groups { input: String },
}

struct Usage(String);

fn read_source(src: &str) -> Result<String, Usage> {
    if src == "-" {
        let mut s = String::new();
        std::io::stdin()
            .read_to_string(&mut s)
            .map_err(|e| Usage(format!("reading stdin: {e}")))?;
        return Ok(s);
    }
    if !Path::new(src).exists() {
        if let Some(f) = api::fixture(src) {
            return Ok(f.json.to_string());
        }
    }
    std::fs::read_to_string(src).map_err(|e| Usage(format!("{src}: {e}")))
}

fn read_json(src: &str) -> Result<Value, Usage> {
    let text = read_source(src)?;
    serde_json::from_str(&text).map_err(|e| Usage(format!("{src}: not valid JSON: {e}")))
}

fn enum_of<T: serde::de::DeserializeOwned>(kind: &str, v: &str) -> Result<T, Usage> {
    serde_json::from_value(json!(v)).map_err(|_| Usage(format!("unknown {kind} `{v}`")))
}

fn parse_levers(items: &[String]) -> Result<LeverRequest, Usage> {
    let mut l = LeverRequest::default();
    for item in items.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        let (key, val) = item.split_once(':').unwrap_or((item, ""));
        match key {
            "recompute" => l.recompute.push(enum_of("module", val)?),
            "offload" => l.offload.push(enum_of("module", val)?),
            "precision" => l.precision = Some(enum_of::<PrecisionRecipe>("precision recipe", val)?),
            "mem_efficient_permutation" => l.mem_efficient_permutation = true,
            "rank" => {
                l.report_rank = Some(match val.parse::<usize>() {
                    Ok(r) => ReportRank::Rank(r),
                    Err(_) => enum_of("rank selector", val)?,
                })
            }
            _ => return Err(Usage(format!("unknown lever `{item}`"))),
        }
    }
    Ok(l)
}

fn simulate_request(a: &SimulateArgs) -> Result<Value, Usage> {
    if let Some(src) = &a.input {
        return read_json(src);
    }
    let layout = a
        .layout
        .as_ref()
        .ok_or_else(|| Usage("simulate needs --layout or --input".into()))?;
    let pp = a.pp.ok_or_else(|| Usage("--layout needs --pp".into()))?;
    let m = a
        .microbatches
        .ok_or_else(|| Usage("--layout needs --microbatches".into()))?;
    let mut v = json!({
        "layout": layout,
        "pp": pp,
        "num_microbatches": m,
        "extra_warmup": a.extra_warmup,
        "wd_split": a.wd_split,
    });
    if let Some(x) = a.vpp {
        v["vpp"] = json!(x);
    }
    if let Some(x) = a.num_layers {
        v["num_layers"] = json!(x);
    }
    Ok(v)
}

fn request(cmd: &Cmd) -> Result<(Operation, Value), Usage> {
    Ok(match cmd {
        Cmd::Estimate { job, levers } => {
            let mut v = read_json(job)?;
            if !levers.is_empty() {
                let l = parse_levers(levers)?;
                match v.as_object_mut() {
                    Some(m) => {
                        m.insert(
                            "levers".into(),
                            serde_json::to_value(l).expect("levers serialize"),
                        );
                    }
                    None => return Err(Usage(format!("{job}: job must be a JSON object"))),
                }
            }
            (Operation::Estimate, v)
        }
        Cmd::Cost { job } => (Operation::Cost, read_json(job)?),
        Cmd::Advise { job } => (Operation::Advise, read_json(job)?),
        Cmd::Simulate(a) => (Operation::Simulate, simulate_request(a)?),
        Cmd::Plan(PlanCmd::DynamicCp {
            input,
            lengths,
            budget,
            dp,
            cp_max,
            pp,
        }) => {
            let v = match input {
                Some(src) => read_json(src)?,
                None => {
                    let budget = budget.ok_or_else(|| {
                        Usage("dynamic-cp needs an input file or --budget".into())
                    })?;
                    json!({
                        "lengths": lengths,
                        "memory_budget_tokens": budget,
                        "dp": dp,
                        "cp_max": cp_max,
                        "pp": pp,
                    })
                }
            };
            (Operation::PlanDynamicCp, v)
        }
        Cmd::Plan(PlanCmd::Echo {
            input,
            counts,
            experts_per_rank,
            spare_slots,
        }) => {
            let v = match input {
                Some(src) => read_json(src)?,
                None => json!({
                    "counts": counts,
                    "experts_per_rank": experts_per_rank,
                    "spare_slots": spare_slots,
                }),
            };
            (Operation::PlanEcho, v)
        }
        Cmd::Plan(PlanCmd::Groups { input }) => {
            let v = read_json(input)?;
            let v = v.get("parallel").cloned().unwrap_or(v);
            (Operation::PlanGroups, v)
        }
        Cmd::QuantCheck { seed, samples } => (
            Operation::QuantCheck,
            json!({"seed": seed, "samples": samples}),
        ),
        Cmd::MoeCheck { seed, instances } => (
            Operation::MoeCheck,
            json!({"seed": seed, "samples": instances}),
        ),
        Cmd::Calibrate { csv } => {
            let v = match csv {
                Some(p) => {
                    let text = std::fs::read_to_string(p)
                        .map_err(|e| Usage(format!("{}: {e}", p.display())))?;
                    json!({ "csv": text })
                }
                None => json!({}),
            };
            (Operation::Calibrate, v)
        }
        Cmd::Serve { .. } => unreachable!("serve has no request"),
    })
}

fn summary(resp: &ApiResponse) {
    eprintln!("{}: {:?}", resp.operation.name(), resp.status);
    for d in &resp.diagnostics {
        eprintln!("  {:?} {}: {}", d.level, d.code, d.message);
    }
    if let Some(r) = &resp.result {
        if let Some(g) = r.get("gib") {
            eprintln!(
                "  total {:.1} GiB (weights+grads {:.1}, optimizer {:.1}, activations {:.1})",
                g["total"].as_f64().unwrap_or(0.0),
                g["weights_and_grads"].as_f64().unwrap_or(0.0),
                g["optimizer"].as_f64().unwrap_or(0.0),
                g["activations"].as_f64().unwrap_or(0.0)
            );
        }
        if let Some(b) = r.get("bubble_ratio") {
            eprintln!("  bubble ratio {:.4}", b.as_f64().unwrap_or(0.0));
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Cmd::Serve { bind } = &cli.cmd {
        let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
        return match rt.block_on(moelab::server::serve(bind)) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("serve: {e}");
                ExitCode::from(2)
            }
        };
    }
    let (op, req) = match request(&cli.cmd) {
        Ok(x) => x,
        Err(Usage(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let resp = api::handle_value(op, req);
    if let (Some(path), Some(r)) = (sim_trace(&cli.cmd), &resp.result) {
        match serde_json::from_value::<moelab::pipeline::Schedule>(r.clone()) {
            Ok(s) => {
                if let Err(e) = std::fs::write(
                    path,
                    serde_json::to_string_pretty(&s.chrome_trace()).expect("trace serializes"),
                ) {
                    eprintln!("error: {}: {e}", path.display());
                    return ExitCode::from(2);
                }
            }
            Err(e) => eprintln!("warning: schedule not re-readable for tracing: {e}"),
        }
    }
    print!("{}", resp.to_json());
    if std::io::stderr().is_terminal() {
        summary(&resp);
    }
    ExitCode::from(resp.status.exit_code() as u8)
}

fn sim_trace(cmd: &Cmd) -> Option<&PathBuf> {
    match cmd {
        Cmd::Simulate(a) => a.chrome_trace.as_ref(),
        _ => None,
    }
}
