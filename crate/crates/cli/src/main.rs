//! `himoe`: training runs, variant ablations, top-K sweeps, gradient checks
//! and routing diagnostics, all driven by a TOML config plus `--set` overrides.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use himoe::config::{RunConfig, RunManifest};
use himoe::diagnostics::{diagnose, Attribution};
use himoe::experts::{count_params_flops, VariantPolicy};
use himoe::gradcheck::{check_gradients, small_config};
use himoe::latency::{measure_latency, DEFAULT_TIMED, DEFAULT_WARMUP};
use himoe::numerics::{AdjointFault, OpKind};
use himoe::routing::RoutingTrace;
use himoe::synthetic::{train, MetricLog, TaskWorld, TrainOutcome};
use himoe::{Error, ErrorClass, Result};

pub const ABLATION_COLUMNS: [&str; 7] = [
    "variant",
    "seed",
    "final_task_loss",
    "params",
    "active_params_per_query",
    "flops_per_query",
    "status",
];

pub const TOPK_COLUMNS: [&str; 11] = [
    "k",
    "final_task_loss",
    "params",
    "active_params_per_query",
    "flops_per_query",
    "latency_median_s",
    "latency_q1_s",
    "latency_q3_s",
    "latency_iqr_s",
    "latency_batches",
    "status",
];

/// Adjoint scale used by `--inject-fault` when none is given.
const DEFAULT_FAULT_SCALE: f64 = 1.5;

#[derive(Parser)]
#[command(name = "himoe", version, about = "Hierarchical scene-to-instance MoE routing harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file, or a manifest.json from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted-key override such as `moe.top_k=4`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one variant and write metrics, trace and checkpoint.
    Train(Common),
    /// Train every variant on shared seed and data, then tabulate.
    Ablate(Common),
    /// Train at several top-K values and measure batch latency.
    SweepTopk {
        #[command(flatten)]
        common: Common,
        /// Comma-separated K values.
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_WARMUP)]
        warmup: usize,
        /// Timed batches per K; at least 30.
        #[arg(long, default_value_t = DEFAULT_TIMED)]
        timed: usize,
    },
    /// Compare tape gradients with finite differences on a small model.
    CheckGrad {
        #[command(flatten)]
        common: Common,
        /// Corrupts one op's adjoint, as `op` or `op:scale`.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Route profiles, entropy, utilization and specialization from a trace.
    Diagnose {
        trace: PathBuf,
        #[command(flatten)]
        common: Common,
        /// containing_route or top_route.
        #[arg(long, default_value = "containing_route")]
        attribution: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(c) => cmd_train(&c),
        Command::Ablate(c) => cmd_ablate(&c),
        Command::SweepTopk { common, k, warmup, timed } => cmd_sweep_topk(&common, &k, warmup, timed),
        Command::CheckGrad { common, inject_fault } => cmd_check_grad(&common, inject_fault.as_deref()),
        Command::Diagnose {
            trace,
            common,
            attribution,
        } => cmd_diagnose(&trace, &common, &attribution),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Numerical => 3,
        ErrorClass::Io => 4,
    }
}

fn out_dir(common: &Common, verb: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| Path::new("runs").join(verb))
}

/// Records the manifest before compute, then again with the final status.
struct Run {
    dir: PathBuf,
    manifest: RunManifest,
    start: Instant,
}

impl Run {
    fn begin(verb: &str, cfg: &RunConfig, common: &Common, dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir)?;
        let manifest = RunManifest::new(verb, cfg, &common.set);
        manifest.save(&dir.join("manifest.json"))?;
        Ok(Run {
            dir,
            manifest,
            start: Instant::now(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn artifact(&mut self, key: &str, name: &str) -> PathBuf {
        self.manifest.artifacts.insert(key.into(), name.into());
        self.path(name)
    }

    fn finish<T>(mut self, result: Result<T>) -> Result<T> {
        self.manifest.timings.insert("total".into(), self.start.elapsed().as_secs_f64());
        self.manifest.status = match &result {
            Ok(_) => "completed".into(),
            Err(e) => format!("failed: {e}"),
        };
        self.manifest.save(&self.dir.join("manifest.json"))?;
        result
    }
}

fn train_into(cfg: &RunConfig, run: &mut Run, prefix: &str) -> Result<TrainOutcome> {
    let metrics = run.artifact(&format!("{prefix}metrics"), &format!("{prefix}metrics.csv"));
    let mut log = MetricLog::create(&metrics)?;
    let out = train(cfg, &mut |r| log.append(r))?;
    drop(log);
    out.trace.save(&run.artifact(&format!("{prefix}trace"), &format!("{prefix}trace.jsonl")))?;
    out.params
        .save(&run.artifact(&format!("{prefix}checkpoint"), &format!("{prefix}checkpoint.json")))?;
    Ok(out)
}

fn cmd_train(common: &Common) -> Result<()> {
    let cfg = RunConfig::resolve(common.config.as_deref(), &common.set, common.seed)?;
    let mut run = Run::begin("train", &cfg, common, out_dir(common, "train"))?;
    let result = train_into(&cfg, &mut run, "").and_then(|out| {
        let summary = serde_json::json!({
            "policy": cfg.train.policy,
            "seed": cfg.train.seed,
            "steps": out.metrics.len(),
            "final_train_task_loss": out.metrics.last().map(|m| m.losses.task),
            "final_task_loss": out.eval_task_loss,
        });
        fs::write(run.artifact("summary", "summary.json"), serde_json::to_string_pretty(&summary)?)?;
        println!(
            "{}: {} steps, held-out task loss {}",
            cfg.train.policy,
            out.metrics.len(),
            out.eval_task_loss
        );
        Ok(())
    });
    run.finish(result)
}

fn cmd_ablate(common: &Common) -> Result<()> {
    let cfg = RunConfig::resolve(common.config.as_deref(), &common.set, common.seed)?;
    let mut run = Run::begin("ablate", &cfg, common, out_dir(common, "ablate"))?;
    let mut rows = Vec::new();
    let mut first_err: Option<Error> = None;
    for policy in VariantPolicy::ALL {
        let mut c = cfg.clone();
        c.train.policy = policy;
        let cost = count_params_flops(policy, &c.moe);
        let prefix = format!("{policy}/");
        fs::create_dir_all(run.path(policy.name()))?;
        let (loss, status) = match train_into(&c, &mut run, &prefix) {
            Ok(out) => (out.eval_task_loss.to_string(), "ok".to_string()),
            Err(e) => {
                let s = format!("failed: {e}");
                first_err.get_or_insert(e);
                (String::new(), s)
            }
        };
        println!("{policy}: {} {status}", if loss.is_empty() { "-" } else { &loss });
        rows.push([
            policy.name().to_string(),
            c.train.seed.to_string(),
            loss,
            cost.total_params.to_string(),
            cost.active_params_per_query.to_string(),
            cost.flops_per_query.to_string(),
            status,
        ]);
    }
    let table = run.artifact("ablation", "ablation.csv");
    let written = write_table(&table, &ABLATION_COLUMNS, &rows);
    let result = written.and(first_err.map_or(Ok(()), Err));
    run.finish(result)
}

fn write_table<const N: usize>(path: &Path, header: &[&str; N], rows: &[[String; N]]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_sweep_topk(common: &Common, ks: &[usize], warmup: usize, timed: usize) -> Result<()> {
    let cfg = RunConfig::resolve(common.config.as_deref(), &common.set, common.seed)?;
    if timed < DEFAULT_TIMED {
        return Err(Error::Config(format!("--timed must be at least {DEFAULT_TIMED}, got {timed}")));
    }
    let mut configs = Vec::new();
    for &k in ks {
        let mut c = cfg.clone();
        c.moe.top_k = k;
        c.validate()
            .map_err(|e| Error::Config(format!("k = {k}: {}", e.to_string().trim_start_matches("invalid configuration: "))))?;
        configs.push(c);
    }
    let mut run = Run::begin("sweep-topk", &cfg, common, out_dir(common, "sweep-topk"))?;
    let mut rows = Vec::new();
    let mut first_err: Option<Error> = None;
    for c in &configs {
        let k = c.moe.top_k;
        let cost = count_params_flops(c.train.policy, &c.moe);
        let prefix = format!("k{k}/");
        fs::create_dir_all(run.path(&format!("k{k}")))?;
        let measured = train_into(c, &mut run, &prefix).and_then(|out| {
            let world = TaskWorld::new(&c.data, &c.moe, c.train.seed)?;
            let lat = measure_latency(&out.params, &world, c.train.batch_size, warmup, timed)?;
            Ok((out.eval_task_loss, lat))
        });
        let mut row = [
            k.to_string(),
            String::new(),
            cost.total_params.to_string(),
            cost.active_params_per_query.to_string(),
            cost.flops_per_query.to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            "ok".to_string(),
        ];
        match measured {
            Ok((loss, lat)) => {
                row[1] = loss.to_string();
                row[5] = lat.median_s.to_string();
                row[6] = lat.q1_s.to_string();
                row[7] = lat.q3_s.to_string();
                row[8] = lat.iqr_s.to_string();
                row[9] = lat.samples.to_string();
                println!(
                    "k={k}: task loss {loss}, flops/query {}, latency median {:.1}us IQR {:.1}us",
                    cost.flops_per_query,
                    1e6 * lat.median_s,
                    1e6 * lat.iqr_s
                );
            }
            Err(e) => {
                row[10] = format!("failed: {e}");
                println!("k={k}: {}", row[10]);
                first_err.get_or_insert(e);
            }
        }
        rows.push(row);
    }
    let table = run.artifact("topk", "topk.csv");
    let written = write_table(&table, &TOPK_COLUMNS, &rows);
    let result = written.and(first_err.map_or(Ok(()), Err));
    run.finish(result)
}

fn parse_fault(arg: &str) -> Result<AdjointFault> {
    let (op, scale) = match arg.split_once(':') {
        Some((op, s)) => (
            op,
            s.parse::<f64>()
                .map_err(|_| Error::Config(format!("--inject-fault scale `{s}` is not a number")))?,
        ),
        None => (arg, DEFAULT_FAULT_SCALE),
    };
    let op: OpKind = op.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
    Ok(AdjointFault { op, scale })
}

fn cmd_check_grad(common: &Common, fault: Option<&str>) -> Result<()> {
    let fault = fault.map(parse_fault).transpose()?;
    let cfg = RunConfig::resolve_with_base(Some(&small_config()), common.config.as_deref(), &common.set, common.seed)?;
    let mut run = Run::begin("check-grad", &cfg, common, out_dir(common, "check-grad"))?;
    let result = check_gradients(&cfg, fault).and_then(|rep| {
        fs::write(run.artifact("report", "gradcheck.json"), serde_json::to_string_pretty(&rep)?)?;
        for b in &rep.blocks {
            println!(
                "{:<24} {:>5} {:>12.3e} {}",
                b.block,
                b.n_params,
                b.max_rel_error,
                if b.passed { "PASS" } else { "FAIL" }
            );
        }
        if rep.passed {
            println!("{}: all blocks within {:e}", rep.policy, rep.tolerance);
            Ok(())
        } else {
            Err(Error::Oracle(format!(
                "blocks exceeding {:e}: {}",
                rep.tolerance,
                rep.failing().join(", ")
            )))
        }
    });
    run.finish(result)
}

/// The run config behind a trace: `--config` if given, else the manifest
/// saved next to the trace, else the defaults.
fn trace_config(trace: &Path, common: &Common) -> Result<RunConfig> {
    if common.config.is_some() {
        return RunConfig::resolve(common.config.as_deref(), &common.set, common.seed);
    }
    let sibling = trace.parent().unwrap_or(Path::new(".")).join("manifest.json");
    if sibling.is_file() {
        return RunConfig::resolve(Some(&sibling), &common.set, common.seed);
    }
    eprintln!("note: no manifest next to the trace and no --config; using the default route map");
    RunConfig::resolve(None, &common.set, common.seed)
}

fn cmd_diagnose(trace_path: &Path, common: &Common, attribution: &str) -> Result<()> {
    let mode: Attribution = attribution.parse()?;
    let cfg = trace_config(trace_path, common)?;
    let dir = common.out.clone().unwrap_or_else(|| {
        trace_path.parent().unwrap_or(Path::new(".")).join("diagnostics")
    });
    // read before creating anything so a bad trace leaves no output behind
    let trace = RoutingTrace::load(trace_path)?;
    if trace.n_experts() != cfg.moe.n_experts {
        return Err(Error::Config(format!(
            "trace has {} experts but moe.n_experts = {}",
            trace.n_experts(),
            cfg.moe.n_experts
        )));
    }
    let mut run = Run::begin("diagnose", &cfg, common, dir)?;
    run.manifest
        .artifacts
        .insert("input_trace".into(), trace_path.display().to_string());
    let result = (|| {
        let report = diagnose(&trace, &cfg.moe.labels(), &cfg.moe.route_map(), &cfg.data.type_names(), mode)?;
        report.save(&run.dir)?;
        for name in ["report.json", "report.csv", "profiles.csv", "entropy.csv", "utilization.csv"] {
            run.artifact(name, name);
        }
        println!("{} records, mean routing entropy {:.4} nats", trace.len(), report.entropy);
        for p in report.profiles.iter().flatten() {
            if let (Some(label), Some(share)) = (&p.dominant_label, p.dominant_share) {
                println!("expert {}: {label} {share:.2} of {}", p.expert, p.total);
            }
        }
        Ok(())
    })();
    run.finish(result)
}
