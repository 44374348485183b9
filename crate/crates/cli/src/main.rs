//! `hiertopk`: generate data, train, sweep, diagnose and calibrate.
//!
//! Exit status is 0 on success, 1 when the invocation or its inputs are
//! invalid, and 2 when a run aborts part way (for example on a NaN loss).

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use hiertopk::codes::{apply_jumprelu, calibrate_jumprelu};
use hiertopk::dataio::{
    data_digest, file_digest, generate_synthetic_file, ActivationReader, SyntheticSpec,
};
use hiertopk::evalkit::{
    activation_distributions, compare_inference_modes, cosine_profile, parse_k_grid, sweep,
    CosineReference, EvalOptions, EvalReport, InferenceMode,
};
use hiertopk::model::{load, Checkpoint};
use hiertopk::train::{ActivationKind, TrainConfig, Trainer};
use hiertopk::{Error, Matrix};

const SUBCOMMANDS: &[&str] = &[
    "gen-data",
    "train",
    "eval",
    "sweep",
    "diagnose",
    "calibrate",
];
const GLOBAL_VALUED: &[&str] = &["--threads", "--config"];

#[derive(Parser, Debug)]
#[command(
    name = "hiertopk",
    version,
    about = "Hierarchical TopK sparse autoencoder toolkit"
)]
struct Cli {
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// key=value file of flag defaults; explicit flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic sparse-dictionary activation file.
    GenData(GenDataArgs),
    /// Train an autoencoder on an activation file.
    Train(TrainArgs),
    /// Evaluate a checkpoint at one k, with the TopK/JumpReLU comparison.
    Eval(EvalArgs),
    /// Evaluate a checkpoint over a grid of k.
    Sweep(SweepArgs),
    /// Decoder cosine profile and activation distributions.
    Diagnose(DiagnoseArgs),
    /// Fit a constant JumpReLU threshold for a target active count.
    Calibrate(CalibrateArgs),
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct GenDataArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 200_000)]
    rows: usize,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long, default_value_t = 1024)]
    atoms: usize,
    #[arg(long, default_value_t = 8)]
    active: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// topk, batchtopk or hierarchical
    #[arg(long)]
    activation: Option<ActivationKind>,
    #[arg(long)]
    dict_size: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    decoder_norm: Option<bool>,
    #[arg(long)]
    holdout: Option<usize>,
    #[arg(long)]
    log_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    freq_window: Option<u64>,
    #[arg(long)]
    dead_threshold: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the training log here.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct EvalCommon {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use only the first N rows of the data.
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long, default_value_t = 1e-5)]
    dead_threshold: f64,
    #[arg(long, default_value_t = 100_000)]
    dead_window: u64,
    #[arg(long, default_value_t = 4096)]
    chunk_rows: usize,
    #[arg(long, default_value_t = 4096)]
    calibration_rows: usize,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct EvalArgs {
    #[command(flatten)]
    common: EvalCommon,
    /// Defaults to the checkpoint's K.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value = "topk")]
    mode: InferenceMode,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct SweepArgs {
    #[command(flatten)]
    common: EvalCommon,
    /// `start:stop:step` or a comma list; defaults to 1:K:1.
    #[arg(long)]
    k_grid: Option<String>,
    #[arg(long, default_value = "topk")]
    mode: InferenceMode,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Defaults to the report path with a .csv extension.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct DiagnoseArgs {
    #[command(flatten)]
    common: EvalCommon,
    #[arg(long)]
    k: Option<usize>,
    /// top1 or adjacent
    #[arg(long, default_value = "top1")]
    reference: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct CalibrateArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    target_k: Option<usize>,
    /// Rows used for calibration; the rest are used to check the fit.
    #[arg(long, default_value_t = 4096)]
    calibration_rows: usize,
}

enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome<T> = std::result::Result<T, Failure>;

fn invalid(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Validation(e.into())
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Validation(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match parse(&argv) {
        Ok(cli) => cli,
        Err(Failure::Validation(e)) | Err(Failure::Runtime(e)) => {
            // clap renders its own usage text
            match e.downcast::<clap::Error>() {
                Ok(ce) if !ce.use_stderr() => {
                    let _ = ce.print();
                    return ExitCode::SUCCESS;
                }
                Ok(ce) => {
                    let _ = ce.print();
                }
                Err(e) => eprintln!("error: {e:#}"),
            }
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("aborted: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Parses `argv`, splicing in the `--config` file when one is named.
fn parse(argv: &[String]) -> Outcome<Cli> {
    let cli = Cli::try_parse_from(argv).map_err(invalid)?;
    let Some(path) = &cli.config else {
        return Ok(cli);
    };
    let entries = config::read_config(path).map_err(invalid)?;
    let at = config::subcommand_position(argv, SUBCOMMANDS, GLOBAL_VALUED)
        .ok_or_else(|| invalid(anyhow!("no subcommand given")))?;
    Cli::try_parse_from(config::splice(argv, at, &entries)).map_err(invalid)
}

fn run(cli: Cli) -> Outcome<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| invalid(anyhow!("thread pool: {e}")))?;
    match cli.command {
        Command::GenData(a) => gen_data(a, cli.threads),
        Command::Train(a) => train(a, cli.threads),
        Command::Eval(a) => eval(a, cli.threads),
        Command::Sweep(a) => run_sweep(a, cli.threads),
        Command::Diagnose(a) => diagnose(a, cli.threads),
        Command::Calibrate(a) => calibrate(a, cli.threads),
    }
}

fn echo(command: &str, threads: usize, entries: &[(&str, String)]) {
    eprintln!("# hiertopk {command}: resolved config");
    eprintln!("threads={threads}");
    for (k, v) in entries.iter().filter(|(_, v)| !v.is_empty()) {
        eprintln!("{k}={v}");
    }
}

fn required<T>(v: Option<T>, flag: &str) -> Outcome<T> {
    v.ok_or_else(|| invalid(anyhow!("--{flag} is required")))
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or(String::new(), |p| p.display().to_string())
}

fn gen_data(a: GenDataArgs, threads: usize) -> Outcome<()> {
    let out = required(a.out, "out")?;
    let spec = SyntheticSpec::new(a.atoms, a.dim, a.active, a.noise, a.seed);
    echo(
        "gen-data",
        threads,
        &[
            ("out", out.display().to_string()),
            ("rows", a.rows.to_string()),
            ("dim", a.dim.to_string()),
            ("atoms", a.atoms.to_string()),
            ("active", a.active.to_string()),
            ("noise", a.noise.to_string()),
            ("seed", a.seed.to_string()),
        ],
    );
    spec.validate().map_err(invalid)?;
    if a.rows < 1 {
        return Err(invalid(anyhow!("--rows must be >= 1")));
    }
    generate_synthetic_file(&spec, a.rows, &out)
        .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "rows={} dim={} digest={}",
        a.rows,
        a.dim,
        file_digest(&out)?
    );
    Ok(())
}

fn train(a: TrainArgs, threads: usize) -> Outcome<()> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        activation: a.activation.unwrap_or(d.activation),
        k: a.k.unwrap_or(d.k),
        stride: a.stride.unwrap_or(d.stride),
        dict_size: a.dict_size.unwrap_or(d.dict_size),
        lr: a.lr.unwrap_or(d.lr),
        beta1: a.beta1.unwrap_or(d.beta1),
        beta2: a.beta2.unwrap_or(d.beta2),
        eps: a.eps.unwrap_or(d.eps),
        batch_size: a.batch.unwrap_or(d.batch_size),
        steps: a.steps.unwrap_or(d.steps),
        init_seed: a.seed.unwrap_or(d.init_seed),
        data_seed: a.data_seed.unwrap_or(d.data_seed),
        decoder_norm: a.decoder_norm.unwrap_or(d.decoder_norm),
        holdout_rows: a.holdout.unwrap_or(d.holdout_rows),
        log_every: a.log_every.unwrap_or(d.log_every),
        checkpoint_every: a.checkpoint_every.unwrap_or(d.checkpoint_every),
        freq_window: a.freq_window.unwrap_or(d.freq_window),
        dead_threshold: a.dead_threshold.unwrap_or(d.dead_threshold),
        data_path: a.data,
        out: a.out,
        log_path: a.log,
    };
    let kv = cfg.to_kv();
    let schedule = kv
        .iter()
        .find(|(k, _)| *k == "schedule")
        .map(|(_, v)| v.clone());
    let flags: Vec<(&str, String)> = kv.into_iter().filter(|(k, _)| *k != "schedule").collect();
    echo("train", threads, &flags);
    if let Some(s) = schedule {
        eprintln!("# schedule {s}");
    }
    cfg.validate().map_err(invalid)?;
    let data_path = required(cfg.data_path.clone(), "data")?;
    let out = required(cfg.out.clone(), "out")?;
    let data: Matrix<f32> = hiertopk::dataio::read_activations(&data_path)
        .with_context(|| format!("reading {}", data_path.display()))
        .map_err(invalid)?;
    let trainer = Trainer::<f32>::new(cfg.clone(), data.cols()).map_err(invalid)?;

    let mut log_file = match &cfg.log_path {
        Some(p) => Some(BufWriter::new(
            File::create(p)
                .with_context(|| format!("creating {}", p.display()))
                .map_err(invalid)?,
        )),
        None => None,
    };
    let stdout = std::io::stdout();
    let outcome = trainer.fit(&data, |rec| {
        let line = rec.to_string();
        writeln!(stdout.lock(), "{line}")?;
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        Ok(())
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e @ Error::NonFinite { .. }) => {
            let line = format!("abort {e}");
            println!("{line}");
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{line}")?;
                f.flush()?;
            }
            return Err(Failure::Runtime(e.into()));
        }
        Err(e) => return Err(e.into()),
    };
    hiertopk::model::save(&outcome.params, &outcome.meta, &out)
        .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "checkpoint={} digest={}",
        out.display(),
        outcome.params.digest()
    );
    Ok(())
}

struct Loaded {
    ckpt: Checkpoint<f32>,
    data: Matrix<f32>,
    opts: EvalOptions,
    data_digest: String,
}

fn common_kv(c: &EvalCommon) -> Vec<(&'static str, String)> {
    vec![
        ("model", show(&c.model)),
        ("data", show(&c.data)),
        ("rows", c.rows.map_or(String::new(), |r| r.to_string())),
        ("dead-threshold", c.dead_threshold.to_string()),
        ("dead-window", c.dead_window.to_string()),
        ("chunk-rows", c.chunk_rows.to_string()),
        ("calibration-rows", c.calibration_rows.to_string()),
    ]
}

fn load_inputs(c: &EvalCommon) -> Outcome<Loaded> {
    let model = required(c.model.clone(), "model")?;
    let data_path = required(c.data.clone(), "data")?;
    let ckpt = load::<f32>(&model)
        .with_context(|| format!("loading checkpoint {}", model.display()))
        .map_err(invalid)?;
    let data = read_rows(&data_path, c.rows).map_err(invalid)?;
    if data.cols() != ckpt.params.hidden() {
        return Err(invalid(anyhow!(
            "data dimension {} does not match the checkpoint's {}",
            data.cols(),
            ckpt.params.hidden()
        )));
    }
    Ok(Loaded {
        data_digest: data_digest(&data),
        ckpt,
        data,
        opts: EvalOptions {
            dead_threshold: c.dead_threshold,
            dead_window: c.dead_window,
            chunk_rows: c.chunk_rows,
            calibration_rows: c.calibration_rows,
        },
    })
}

fn read_rows(path: &Path, rows: Option<usize>) -> anyhow::Result<Matrix<f32>> {
    let mut r =
        ActivationReader::open(path).with_context(|| format!("opening {}", path.display()))?;
    let n = rows.unwrap_or(r.num_rows()).min(r.num_rows());
    let dim = r.dim();
    Ok(r.read_chunk(n)?.unwrap_or_else(|| Matrix::zeros(0, dim)))
}

fn check_k(k: usize, ckpt: &Checkpoint<f32>) -> Outcome<usize> {
    let d = ckpt.params.dict_size();
    if k < 1 || k > d {
        return Err(invalid(anyhow!("k = {k} must be in [1, {d}]")));
    }
    Ok(k)
}

fn write_report(report: &EvalReport, out: Option<&Path>) -> Outcome<()> {
    match out {
        Some(p) => report
            .write(p)
            .with_context(|| format!("writing {}", p.display()))?,
        None => println!("{}", report.to_json()?),
    }
    Ok(())
}

fn eval(a: EvalArgs, threads: usize) -> Outcome<()> {
    let l = load_inputs(&a.common)?;
    let k = check_k(a.k.unwrap_or(l.ckpt.meta.k), &l.ckpt)?;
    let mut kv = common_kv(&a.common);
    kv.extend([
        ("k", k.to_string()),
        ("mode", a.mode.to_string()),
        ("out", show(&a.out)),
    ]);
    echo("eval", threads, &kv);
    let mut report = EvalReport::new(
        l.ckpt.params.digest(),
        l.data_digest,
        l.data.rows(),
        &l.opts,
    );
    report.entries = sweep(&l.ckpt.params, &l.data, &[k], a.mode, &l.opts)?;
    report.comparisons = vec![compare_inference_modes(
        &l.ckpt.params,
        &l.data,
        k,
        &l.opts,
    )?];
    let e = &report.entries[0];
    eprintln!(
        "k={} l0={} fvu={} explained_variance={}",
        e.k, e.l0, e.fvu, e.explained_variance
    );
    write_report(&report, a.out.as_deref())
}

fn run_sweep(a: SweepArgs, threads: usize) -> Outcome<()> {
    let l = load_inputs(&a.common)?;
    let out = required(a.out.clone(), "out")?;
    let grid_text = a
        .k_grid
        .clone()
        .unwrap_or_else(|| format!("1:{}:1", l.ckpt.meta.k.max(1)));
    let grid = parse_k_grid(&grid_text).map_err(invalid)?;
    for &k in &grid {
        check_k(k, &l.ckpt)?;
    }
    let csv = a.csv.clone().unwrap_or_else(|| out.with_extension("csv"));
    let mut kv = common_kv(&a.common);
    kv.extend([
        ("k-grid", grid_text),
        ("mode", a.mode.to_string()),
        ("out", out.display().to_string()),
        ("csv", csv.display().to_string()),
    ]);
    echo("sweep", threads, &kv);
    let mut report = EvalReport::new(
        l.ckpt.params.digest(),
        l.data_digest,
        l.data.rows(),
        &l.opts,
    );
    report.entries = sweep(&l.ckpt.params, &l.data, &grid, a.mode, &l.opts)?;
    write_report(&report, Some(&out))?;
    let mut w =
        BufWriter::new(File::create(&csv).with_context(|| format!("creating {}", csv.display()))?);
    report.write_csv(&mut w)?;
    w.flush()?;
    eprintln!(
        "{} entries written to {}",
        report.entries.len(),
        out.display()
    );
    Ok(())
}

fn diagnose(a: DiagnoseArgs, threads: usize) -> Outcome<()> {
    let l = load_inputs(&a.common)?;
    let k = check_k(a.k.unwrap_or(l.ckpt.meta.k), &l.ckpt)?;
    let reference = match a.reference.as_str() {
        "top1" => CosineReference::Top1,
        "adjacent" => CosineReference::Adjacent,
        other => {
            return Err(invalid(anyhow!(
                "unknown reference {other:?}; use top1 or adjacent"
            )))
        }
    };
    let mut kv = common_kv(&a.common);
    kv.extend([
        ("k", k.to_string()),
        ("reference", a.reference.clone()),
        ("out", show(&a.out)),
    ]);
    echo("diagnose", threads, &kv);
    let mut report = EvalReport::new(
        l.ckpt.params.digest(),
        l.data_digest,
        l.data.rows(),
        &l.opts,
    );
    report.cosine_profile = Some(cosine_profile(&l.ckpt.params, &l.data, k, reference)?);
    report.distributions = Some(activation_distributions(&l.ckpt.params, &l.data, k)?);
    write_report(&report, a.out.as_deref())
}

fn calibrate(a: CalibrateArgs, threads: usize) -> Outcome<()> {
    let model = required(a.model.clone(), "model")?;
    let data_path = required(a.data.clone(), "data")?;
    let target = required(a.target_k, "target-k")?;
    echo(
        "calibrate",
        threads,
        &[
            ("model", model.display().to_string()),
            ("data", data_path.display().to_string()),
            ("target-k", target.to_string()),
            ("calibration-rows", a.calibration_rows.to_string()),
        ],
    );
    let ckpt = load::<f32>(&model)
        .with_context(|| format!("loading checkpoint {}", model.display()))
        .map_err(invalid)?;
    check_k(target, &ckpt)?;
    let data = read_rows(&data_path, None).map_err(invalid)?;
    if data.cols() != ckpt.params.hidden() || data.rows() == 0 {
        return Err(invalid(anyhow!("data does not match the checkpoint")));
    }
    let split = a.calibration_rows.clamp(1, data.rows());
    let calib = ckpt.params.encode_batch(&data.slice_rows(0, split))?;
    let theta = calibrate_jumprelu(calib.iter_rows(), target)?;
    println!("threshold={}", theta.theta);
    if split < data.rows() {
        let held = ckpt
            .params
            .encode_batch(&data.slice_rows(split, data.rows()))?;
        let active: usize = held
            .iter_rows()
            .map(|r| apply_jumprelu(r, theta).len())
            .sum();
        println!(
            "heldout_rows={} heldout_l0={}",
            held.rows(),
            active as f64 / held.rows() as f64
        );
    }
    Ok(())
}
