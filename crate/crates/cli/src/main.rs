use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use revcd::config::{DataSource, RunConfig};
use revcd::data::{
    generate_synthetic, read_f32_matrix, write_f32_matrix, GzslDataset, SyntheticSpec,
};
use revcd::eval::{evaluate, EvalMode, PrototypeEcho};
use revcd::pipeline::{
    self, check_compatible, evaluate_model, lambda3_sweep, load_checkpoint, parse_grid, sweep_csv,
};
use revcd::sampling::{sample_with, Guidance};
use revcd::verify::{self, Suite};
use revcd::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(
    name = "revcd",
    version,
    about = "Reversed conditional diffusion for generalized zero-shot learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser and write checkpoints plus loss_history.csv.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset's test splits.
    Eval(EvalArgs),
    /// Draw semantic vectors for a feature matrix.
    Sample(SampleArgs),
    /// Retrain for each classifier weight and tabulate S/U/H.
    Sweep(SweepArgs),
    /// Run the 64-bit self-check suites.
    Verify(VerifyArgs),
    /// Write a synthetic dataset directory.
    GenSynthetic(GenArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args, Clone)]
struct Source {
    /// JSON run configuration.
    #[arg(long, conflicts_with = "synthetic")]
    config: Option<PathBuf>,
    /// Built-in synthetic preset (`default` or `tiny`).
    #[arg(long)]
    synthetic: Option<String>,
    /// Dataset directory; replaces the configured data source.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    /// Diffusion steps T.
    #[arg(long = "T")]
    steps: Option<usize>,
    /// Guidance strength used at evaluation time.
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    lambda3: Option<f64>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    dump_config: bool,
    /// Suppress per-step progress lines.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Zsl,
    Gzsl,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "oracle_sampler")]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    common: Common,
    /// Replace the model with the true class attribute of every row.
    #[arg(long)]
    oracle_sampler: bool,
    #[arg(long, value_enum, default_value = "gzsl")]
    mode: ModeArg,
    #[arg(long)]
    guidance: Option<f64>,
    /// Samples averaged per row.
    #[arg(long, default_value_t = 1)]
    n_draws: usize,
    /// Reverse steps; defaults to the full chain.
    #[arg(long)]
    steps: Option<usize>,
    /// Metrics JSON path.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Headerless float32 matrix with d_x columns.
    #[arg(long, conflicts_with_all = ["data", "synthetic"])]
    features: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    synthetic: Option<String>,
    /// Dataset split to sample when reading a dataset.
    #[arg(long, value_enum, default_value = "test-unseen")]
    split: SplitArg,
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    g: Option<f64>,
    /// Conditional pass only.
    #[arg(long, conflicts_with = "g")]
    no_guidance: bool,
    #[arg(long)]
    steps: Option<usize>,
    /// Headerless float32 output, one row per input row.
    #[arg(long)]
    output: PathBuf,
    /// Write `t,mean_cos_dist` per reverse step (dataset input only).
    #[arg(long)]
    log_trajectory: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    TrainSeen,
    TestSeen,
    TestUnseen,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    overrides: Overrides,
    /// Comma-separated classifier weights.
    #[arg(long, default_value = "0,0.001,0.01,0.1,1")]
    lambda3: String,
    #[arg(long, default_value_t = 1)]
    n_draws: usize,
    #[arg(long)]
    dump_config: bool,
    /// CSV path; stdout when omitted.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Inject a fault into this suite (negative control).
    #[arg(long)]
    negate: Vec<String>,
    /// Run only these suites.
    #[arg(long)]
    only: Vec<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 5)]
    n_seen: usize,
    #[arg(long, default_value_t = 3)]
    n_unseen: usize,
    #[arg(long, default_value_t = 8)]
    d_s: usize,
    #[arg(long, default_value_t = 16)]
    d_x: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 0.05)]
    noise_sigma: f64,
    #[command(flatten)]
    common: Common,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Dataset(_) | Error::Checkpoint(_) => EXIT_IO,
            Error::Config(_)
            | Error::InvalidArgument(_)
            | Error::Json(_)
            | Error::DimMismatch { .. } => EXIT_USAGE,
            _ => EXIT_FAILURE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type CmdResult = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = threads_env().and_then(|forced| match cli.command {
        Command::Train(a) => cmd_train(a, forced),
        Command::Eval(a) => cmd_eval(a, forced),
        Command::Sample(a) => cmd_sample(a, forced),
        Command::Sweep(a) => cmd_sweep(a, forced),
        Command::Verify(a) => cmd_verify(a),
        Command::GenSynthetic(a) => cmd_gen(a),
    });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// `REVCD_THREADS` caps internal parallelism; every kernel here is
/// single-threaded, so the cap only matters for the determinism flag it implies.
fn threads_env() -> Result<bool, Failure> {
    match std::env::var("REVCD_THREADS") {
        Err(_) => Ok(false),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n == 1),
            _ => Err(usage(format!(
                "REVCD_THREADS must be a positive integer, got {v:?}"
            ))),
        },
    }
}

/// Config resolution: flags over file over defaults.
fn resolve(source: &Source, common: &Common, forced_det: bool) -> Result<RunConfig, Failure> {
    let mut cfg = match (&source.config, &source.synthetic) {
        (Some(path), _) => {
            if !path.is_file() {
                return Err(usage(format!(
                    "config file {} does not exist",
                    path.display()
                )));
            }
            RunConfig::load(path)?
        }
        (None, Some(name)) => RunConfig::synthetic_preset(name, common.seed.unwrap_or(0))?,
        (None, None) => match &source.data {
            Some(_) => RunConfig::default(),
            None => return Err(usage("one of --config, --synthetic or --data is required")),
        },
    };
    if let Some(dir) = &source.data {
        cfg.data = DataSource::Path(dir.clone());
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.deterministic || forced_det {
        cfg.train.deterministic = true;
    }
    Ok(cfg.normalized())
}

fn apply(cfg: &mut RunConfig, o: &Overrides) {
    if let Some(v) = &o.output {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = o.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = o.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = o.lr {
        cfg.train.adam.lr = v;
    }
    if let Some(v) = o.lambda1 {
        cfg.train.loss.lambda1 = v;
    }
    if let Some(v) = o.lambda2 {
        cfg.train.loss.lambda2 = v;
    }
    if let Some(v) = o.steps {
        cfg.schedule.steps = v;
    }
    if let Some(v) = o.guidance {
        cfg.guidance.g = v;
    }
    if let Some(v) = o.checkpoint_every {
        cfg.train.checkpoint_every = Some(v);
    }
}

fn cmd_train(a: TrainArgs, forced: bool) -> CmdResult {
    let mut cfg = resolve(&a.source, &a.common, forced)?;
    apply(&mut cfg, &a.overrides);
    if let Some(v) = a.lambda3 {
        cfg.train.loss.lambda3 = v;
    }
    if a.dump_config {
        println!("{}", cfg.to_json()?);
        return Ok(0);
    }
    cfg.validate()?;
    let ds = cfg.load_dataset()?;
    let quiet = a.quiet;
    let out = pipeline::train_to_dir(&cfg, &ds, &cfg.output_dir, |r| {
        if !quiet {
            println!("{}", r.progress_line());
        }
    })?;
    println!(
        "trained {} steps; checkpoint written to {}",
        out.trainer.step(),
        cfg.output_dir.join(pipeline::CHECKPOINT_FILE).display()
    );
    Ok(0)
}

fn eval_dataset(
    source: &Source,
    common: &Common,
    fallback: Option<&RunConfig>,
) -> Result<GzslDataset, Failure> {
    if source.config.is_some() || source.synthetic.is_some() || source.data.is_some() {
        let cfg = resolve(source, common, false)?;
        cfg.validate()?;
        return Ok(cfg.load_dataset()?);
    }
    match fallback {
        Some(cfg) => {
            cfg.validate()?;
            Ok(cfg.load_dataset()?)
        }
        None => Err(usage("one of --config, --synthetic or --data is required")),
    }
}

fn cmd_eval(a: EvalArgs, _forced: bool) -> CmdResult {
    let mode = match a.mode {
        ModeArg::Zsl => EvalMode::Zsl,
        ModeArg::Gzsl => EvalMode::Gzsl,
    };
    let metrics = if a.oracle_sampler {
        let ds = eval_dataset(&a.source, &a.common, None)?;
        evaluate(&ds, &mut PrototypeEcho(&ds.attributes), mode)?
    } else {
        let path = a.checkpoint.as_ref().expect("required by clap");
        let mut loaded = load_checkpoint(path)?;
        let ds = eval_dataset(&a.source, &a.common, Some(&loaded.meta.run))?;
        check_compatible(&loaded.model.config, &ds)?;
        let mut guidance = loaded.meta.run.guidance;
        if let Some(g) = a.guidance {
            guidance.g = g;
        }
        if let Some(seed) = a.common.seed {
            guidance.seed = seed;
        }
        if a.steps.is_some() {
            guidance.steps = a.steps;
        }
        evaluate_model(
            &mut loaded.model,
            &loaded.schedule,
            &ds,
            guidance,
            a.n_draws,
            mode,
        )?
    };
    print!("{}", metrics.table());
    if let Some(out) = &a.output {
        let text = serde_json::to_string_pretty(&metrics).map_err(Error::from)?;
        fs::write(out, text).map_err(|e| Error::io(out, e))?;
    }
    Ok(0)
}

fn cmd_sample(a: SampleArgs, _forced: bool) -> CmdResult {
    let mut loaded = load_checkpoint(&a.checkpoint)?;
    let mut guidance = loaded.meta.run.guidance;
    if let Some(g) = a.g {
        guidance.g = g;
    }
    if let Some(seed) = a.common.seed {
        guidance.seed = seed;
    }
    if a.steps.is_some() {
        guidance.steps = a.steps;
    }
    let mode = if a.no_guidance {
        Guidance::ConditionalOnly
    } else {
        Guidance::Cfg(guidance.g)
    };

    let (x, reference) = if let Some(path) = &a.features {
        if a.log_trajectory.is_some() {
            return Err(usage(
                "--log-trajectory needs labelled rows; use --data or --synthetic",
            ));
        }
        (read_f32_matrix(path, loaded.model.config.d_x)?, None)
    } else {
        let source = Source {
            config: None,
            synthetic: a.synthetic.clone(),
            data: a.data.clone(),
        };
        let ds = eval_dataset(&source, &a.common, Some(&loaded.meta.run))?;
        check_compatible(&loaded.model.config, &ds)?;
        let rows: Vec<usize> = match a.split {
            SplitArg::TrainSeen => ds.train_seen.clone(),
            SplitArg::TestSeen => ds.test_seen.clone(),
            SplitArg::TestUnseen => ds.test_unseen.clone(),
        };
        let labels: Vec<usize> = rows.iter().map(|&r| ds.labels[r]).collect();
        (
            ds.features.select_rows(&rows),
            Some(ds.attributes.select_rows(&labels)),
        )
    };
    let reference = if a.log_trajectory.is_some() {
        reference
    } else {
        None
    };
    let out = sample_with(
        &mut loaded.model,
        &x,
        &loaded.schedule,
        &guidance,
        mode,
        reference.as_ref(),
    )?;
    write_f32_matrix(&a.output, &out.semantics)?;
    if let Some(path) = &a.log_trajectory {
        let mut csv = String::from("t,mean_cos_dist\n");
        for (t, d) in &out.trajectory {
            csv.push_str(&format!("{t},{d}\n"));
        }
        fs::write(path, csv).map_err(|e| Error::io(path, e))?;
    }
    println!(
        "sampled {} rows x {} dims to {}",
        out.semantics.rows(),
        out.semantics.cols(),
        a.output.display()
    );
    Ok(0)
}

fn cmd_sweep(a: SweepArgs, forced: bool) -> CmdResult {
    let mut cfg = resolve(&a.source, &a.common, forced)?;
    apply(&mut cfg, &a.overrides);
    let grid = parse_grid(&a.lambda3)?;
    if a.dump_config {
        println!("{}", cfg.to_json()?);
        return Ok(0);
    }
    cfg.validate()?;
    let ds = cfg.load_dataset()?;
    let rows = lambda3_sweep(&cfg, &ds, &grid, a.n_draws, |r| {
        eprintln!(
            "lambda3={} S={:.1} U={:.1} H={:.1}",
            r.lambda3,
            100.0 * r.s,
            100.0 * r.u,
            100.0 * r.h
        )
    })?;
    let csv = sweep_csv(&rows);
    match &a.csv {
        Some(path) => fs::write(path, csv).map_err(|e| Error::io(path, e))?,
        None => print!("{csv}"),
    }
    Ok(0)
}

fn parse_suites(names: &[String]) -> Result<Vec<Suite>, Failure> {
    names
        .iter()
        .flat_map(|n| n.split(','))
        .map(|n| n.trim().parse::<Suite>().map_err(Failure::from))
        .collect()
}

fn cmd_verify(a: VerifyArgs) -> CmdResult {
    let negate = parse_suites(&a.negate)?;
    let only = parse_suites(&a.only)?;
    let seed = a.common.seed.unwrap_or(0);
    let mut failed = false;
    for suite in Suite::ALL {
        if !only.is_empty() && !only.contains(&suite) {
            continue;
        }
        let report = verify::run_suite(suite, negate.contains(&suite), seed)?;
        println!("{}", report.line());
        failed |= !report.passed();
    }
    Ok(if failed { EXIT_FAILURE } else { 0 })
}

fn cmd_gen(a: GenArgs) -> CmdResult {
    let spec = SyntheticSpec {
        n_seen: a.n_seen,
        n_unseen: a.n_unseen,
        d_s: a.d_s,
        d_x: a.d_x,
        per_class: a.per_class,
        noise_sigma: a.noise_sigma,
        seed: a.common.seed.unwrap_or(0),
    };
    let ds = generate_synthetic(&spec)?;
    ds.save(&a.output)?;
    println!("{}", summary(&ds, &a.output));
    Ok(0)
}

fn summary(ds: &GzslDataset, dir: &Path) -> String {
    format!(
        "wrote {} rows (d_x={}, d_s={}, {} seen / {} unseen classes) to {}",
        ds.n(),
        ds.d_x(),
        ds.d_s(),
        ds.seen_classes.len(),
        ds.unseen_classes.len(),
        dir.display()
    )
}
