use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use vflbus_core::error::{Error, Result};
use vflbus_core::planner::{dp_search, SearchSpace};
use vflbus_core::profiler::{fit_constants, memory_bound, run_calibration, DelayModelConstants};
use vflbus_core::runtime::{run_training, TrainOutcome};
use vflbus_core::{ExperimentSpec, KvFile, PlanState, SplitModels};

#[derive(Parser, Debug)]
#[command(name = "vflbus", version, about = "Two-party split learning over a pub/sub broker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Time the models over a batch-size sweep and fit the delay model.
    Profile(CommonArgs),
    /// Choose worker counts and batch size from a profile.
    Plan(PlanArgs),
    /// Train one mode and write per-epoch metrics.
    Train(CommonArgs),
    /// Train several modes on the same data and tabulate them.
    Compare(CompareArgs),
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// key=value experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    wa: Option<usize>,
    #[arg(long)]
    wp: Option<usize>,
    /// Batch size for training.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Privacy parameter; `inf` disables noise.
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    tddl_ms: Option<u64>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    delta_t0: Option<usize>,
    #[arg(long)]
    skew_passive_ms: Option<u64>,
    #[arg(long)]
    skew_active_ms: Option<u64>,
    /// `sgd` or `adam`.
    #[arg(long)]
    optimizer: Option<String>,
    /// Plan file whose w_a, w_p and batch_size override the config.
    #[arg(long)]
    plan: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlanArgs {
    /// Profile written by `vflbus profile`.
    #[arg(long)]
    profile: PathBuf,
    /// Active worker range, e.g. `2..50`.
    #[arg(long, default_value = "2..50")]
    wa: String,
    /// Passive worker range.
    #[arg(long, default_value = "2..50")]
    wp: String,
    /// Candidate batch sizes.
    #[arg(long, default_value = "16,32,64,128,256,512,1024")]
    batches: String,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated modes; defaults to the config's list.
    #[arg(long)]
    modes: Option<String>,
}

fn parse_range(s: &str) -> Result<std::ops::RangeInclusive<usize>> {
    let bad = || Error::Config(format!("invalid range '{s}' (expected N or A..B)"));
    let parse = |x: &str| x.trim().parse::<usize>().map_err(|_| bad());
    match s.split_once("..") {
        Some((a, b)) => Ok(parse(a)?..=parse(b.trim_start_matches('='))?),
        None => {
            let v = parse(s)?;
            Ok(v..=v)
        }
    }
}

fn parse_batches(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("invalid batch size '{x}'"))))
        .collect()
}

fn load_spec(args: &CommonArgs) -> Result<ExperimentSpec> {
    let spec = build_spec(args)?;
    spec.validate()?;
    Ok(spec)
}

/// Config file plus flag overrides, not yet validated.
fn build_spec(args: &CommonArgs) -> Result<ExperimentSpec> {
    let kv = match &args.config {
        Some(path) => KvFile::read(path)?,
        None => KvFile::new(),
    };
    let mut spec = ExperimentSpec::from_kv(&kv)?;
    let t = &mut spec.train;
    if let Some(m) = &args.mode {
        t.mode = m.parse()?;
    }
    if let Some(plan) = &args.plan {
        let plan = PlanState::from_kv(&KvFile::read(plan)?)?;
        t.w_a = plan.w_a;
        t.w_p = plan.w_p;
        t.batch_size = plan.batch_size;
    }
    macro_rules! set {
        ($($flag:expr => $field:expr),* $(,)?) => { $(if let Some(v) = $flag { $field = v; })* };
    }
    set! {
        args.seed => t.seed,
        args.wa => t.w_a,
        args.wp => t.w_p,
        args.batch_size => t.batch_size,
        args.epochs => t.epochs,
        args.mu => t.mu,
        args.p => t.p,
        args.q => t.q,
        args.delta_t0 => t.delta_t0,
        args.tddl_ms.map(Duration::from_millis) => t.t_ddl,
        args.skew_passive_ms.map(Duration::from_millis) => t.skew_passive,
        args.skew_active_ms.map(Duration::from_millis) => t.skew_active,
    }
    if let Some(o) = &args.optimizer {
        t.optimizer = o.parse()?;
    }
    Ok(spec)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_profile(args: &CommonArgs) -> Result<()> {
    let spec = load_spec(args)?;
    let data = spec.load()?;
    let models = SplitModels::init(
        &spec.train.shape,
        data.train.d_active(),
        data.train.d_passive(),
        data.train.task,
        spec.train.seed,
    )?;
    let samples = run_calibration(&models, &spec.calibration_batches, spec.calibration_reps)?;
    let (constants, fits) = fit_constants(&samples, &models, &spec.env)?;
    ensure_dir(&args.out)?;
    let path = args.out.join("profile.kv");
    constants.to_kv().write(&path)?;
    write_json(&args.out.join("calibration.json"), &json!({ "samples": samples, "fits": fits }))?;
    for (role, fit) in &fits {
        println!(
            "{role:?}: coef {:.6e} exponent {:.4} r2 {:.4}",
            fit.coef, fit.exponent, fit.r_squared
        );
    }
    println!("B_max {:.1}", memory_bound(&constants)?);
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_plan(args: &PlanArgs) -> Result<()> {
    let constants = DelayModelConstants::from_kv(&KvFile::read(&args.profile)?)?;
    let space = SearchSpace::new(parse_range(&args.wa)?, parse_range(&args.wp)?, parse_batches(&args.batches)?);
    let plan = dp_search(&constants, &space)?;
    ensure_dir(&args.out)?;
    let path = args.out.join("plan.kv");
    let mut kv = plan.to_kv();
    kv.set("b_max", space.ceiling(&constants)?);
    kv.write(&path)?;
    println!(
        "w_a {} w_p {} batch_size {} cost {:.6e}s",
        plan.w_a, plan.w_p, plan.batch_size, plan.cost
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn write_run(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    ensure_dir(dir)?;
    outcome.metrics.write_jsonl(dir.join("metrics.jsonl"))?;
    outcome.metrics.write_summary(dir.join("summary.json"))?;
    write_json(&dir.join("models.json"), &serde_json::to_value(&outcome.models)?)
}

fn cmd_train(args: &CommonArgs) -> Result<()> {
    let spec = load_spec(args)?;
    let data = spec.load()?;
    let outcome = run_training(&data, &spec.train)?;
    write_run(&args.out, &outcome)?;
    let s = &outcome.metrics.summary;
    println!(
        "{}: {} epochs in {:.3}s, final loss {:.6}, test metric {:.4}",
        s.mode, s.epochs, s.total_seconds, s.final_train_loss, s.final_test_metric
    );
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let mut spec = build_spec(&args.common)?;
    if let Some(s) = &args.modes {
        spec.modes = s.split(',').map(str::parse).collect::<Result<_>>()?;
    }
    // Worker counts apply to the pooled modes; single-pair modes pin them to 1.
    let modes = spec.modes.clone();
    for &mode in &modes {
        let mut check = spec.clone();
        check.train = spec.train.for_mode(mode);
        check.validate()?;
    }
    let data = spec.load()?;
    ensure_dir(&args.common.out)?;
    let mut rows = Vec::new();
    let mut first_error = None;
    println!(
        "{:<10} {:>10} {:>8} {:>10} {:>12} {:>10}",
        "mode", "time_s", "busy", "wait/ep", "bytes", "metric"
    );
    for mode in modes {
        let config = spec.train.for_mode(mode);
        match run_training(&data, &config) {
            Ok(outcome) => {
                write_run(&args.common.out.join(mode.name()), &outcome)?;
                let s = &outcome.metrics.summary;
                println!(
                    "{:<10} {:>10.3} {:>8.3} {:>10.4} {:>12} {:>10.4}",
                    mode.name(),
                    s.total_seconds,
                    s.mean_busy_fraction,
                    s.mean_wait_per_epoch,
                    s.bytes_published,
                    s.final_test_metric
                );
                rows.push(json!({
                    "mode": mode.name(),
                    "status": "ok",
                    "running_seconds": s.total_seconds,
                    "busy_fraction": s.mean_busy_fraction,
                    "wait_per_epoch": s.mean_wait_per_epoch,
                    "bytes_published": s.bytes_published,
                    "final_metric": s.final_test_metric,
                }));
            }
            Err(e) => {
                println!("{:<10} failed: {e}", mode.name());
                rows.push(json!({ "mode": mode.name(), "status": "failed", "error": e.to_string() }));
                first_error.get_or_insert(e);
            }
        }
    }
    write_json(&args.common.out.join("compare.json"), &json!({ "rows": rows }))?;
    let all_failed = rows.iter().all(|r| r["status"] == "failed");
    match first_error {
        Some(e) if all_failed => Err(e),
        _ => Ok(()),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::TrainingAbort { .. } => 3,
        Error::Infeasible(_) => 4,
        Error::Config(_)
        | Error::Parse { .. }
        | Error::Shape { .. }
        | Error::Io { .. }
        | Error::Csv(_)
        | Error::Json(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Profile(a) => cmd_profile(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Train(a) => cmd_train(a),
        Command::Compare(a) => cmd_compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
