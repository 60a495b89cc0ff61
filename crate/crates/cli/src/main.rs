use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use nodulesat::attention::{Sat, SatConfig, SetLayout};
use nodulesat::config::{load_config, RunConfig};
use nodulesat::error::Error;
use nodulesat::eval::{auc, froc, FROC_TARGETS};
use nodulesat::experiment::{instance_auc, predict_all, Trainer};
use nodulesat::io::{
    format_predictions, format_report, join_predictions, load_dataset, read_candidates, read_checkpoint,
    read_manifest, read_predictions, write_checkpoint, write_dataset,
};
use nodulesat::mil::{InstanceBag, NoduleSat, Payload, TrainMode};
use nodulesat::norm::Mode;
use nodulesat::ops::{square, sum};
use nodulesat::rng::substream;
use nodulesat::synth::{analytic_positive_rate, generate_bags, PayloadMode, SynthSpec};
use nodulesat::verify::{run_suite, Suite, VerifyOptions};
use nodulesat::Tensor;

const CHECKPOINT_FILE: &str = "checkpoint.nsat";
const LOG_FILE: &str = "train_log.csv";
const PREDICTIONS_FILE: &str = "predictions.csv";

#[derive(Parser, Debug)]
#[command(name = "nodulesat", version, about = "Set-attention multiple-instance learning toolkit")]
struct Cli {
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run configuration (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads. Computation is single-threaded; only 1 is accepted.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic relational dataset.
    Synth(SynthArgs),
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Score predictions (auc) or candidates (cpm).
    Eval(EvalArgs),
    /// Gradient checks only.
    Gradcheck,
    /// Full invariant suite.
    Verify(VerifyArgs),
    /// Forward/backward timings of the set transformer.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    bags: usize,
    #[arg(long, default_value_t = 8)]
    keys: usize,
    #[arg(long, default_value_t = 1)]
    nmin: usize,
    #[arg(long, default_value_t = 23)]
    nmax: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Fraction of instances without a label.
    #[arg(long, default_value_t = 0.46)]
    mask: f64,
    #[arg(long, value_enum, default_value_t = PayloadArg::Feature)]
    payload: PayloadArg,
    /// Voxels per side of voxel payloads.
    #[arg(long, default_value_t = 8)]
    edge: usize,
    /// Seed of the key → payload map; share it between train and test sets.
    #[arg(long, default_value_t = 0)]
    codebook_seed: u64,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PayloadArg {
    Feature,
    Voxel,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Overrides train.mode.
    #[arg(long)]
    mode: Option<String>,
    /// Overrides train.epochs (total, including resumed epochs).
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from a checkpoint; defaults to init.checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum Metric {
    Auc,
    Cpm,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_enum)]
    metric: Metric,
    /// Predictions file (auc).
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Manifest holding the labels (auc).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Candidate file (cpm).
    #[arg(long)]
    candidates: Option<PathBuf>,
    /// Scan count for cpm; defaults to the distinct series in the file.
    #[arg(long)]
    scans: Option<usize>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Negative control: corrupt the channel shuffle of the SAT under test.
    #[arg(long, hide = true)]
    inject_shuffle_fault: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value = "8,32,128")]
    sizes: String,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
}

#[derive(Debug)]
enum Failure {
    Lib(Error),
    /// A check or refusal that is not a library error.
    Validation(String),
    /// Exit nonzero after printing the report.
    Checks(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::UndefinedMetric(_) => 2,
        Error::NumericDomain(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Checks(n)) => {
            eprintln!("{n} check(s) failed");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    if cli.threads != 1 {
        return Err(Failure::Validation(format!(
            "--threads {}: only single-threaded execution is supported",
            cli.threads
        )));
    }
    match &cli.command {
        Command::Synth(a) => cmd_synth(&cli, a),
        Command::Train(a) => cmd_train(&cli, a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck => cmd_verify(cli.seed.unwrap_or(0), Suite::Gradients, false),
        Command::Verify(a) => cmd_verify(cli.seed.unwrap_or(0), Suite::All, a.inject_shuffle_fault),
        Command::Bench(a) => cmd_bench(cli.seed.unwrap_or(0), a),
    }
}

/// Creates `dir`, refusing a non-empty one unless forced.
fn prepare_out(dir: &Path, force: bool) -> CmdResult {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() && !force {
        return Err(Failure::Validation(format!(
            "output directory {} is not empty (use --force to overwrite)",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> std::result::Result<&'a T, Failure> {
    v.as_ref().ok_or_else(|| Failure::Validation(format!("{flag} is required")))
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> CmdResult {
    let out = required(&cli.out, "--out")?;
    let spec = SynthSpec {
        bags: a.bags,
        n_min: a.nmin,
        n_max: a.nmax,
        keys: a.keys,
        width: a.width,
        noise: a.noise,
        mask_fraction: a.mask,
        payload: match a.payload {
            PayloadArg::Feature => PayloadMode::Feature,
            PayloadArg::Voxel => PayloadMode::Voxel,
        },
        seed: *required(&cli.seed, "--seed")?,
        codebook_seed: a.codebook_seed,
        patch_edge: a.edge,
    };
    spec.validate()?;
    prepare_out(out, cli.force)?;
    let bags = generate_bags(&spec)?;
    write_dataset(out, &bags)?;
    let instances: usize = bags.iter().map(|b| b.bag.len()).sum();
    let report = [
        ("bags".to_string(), bags.len() as f64),
        ("instances".to_string(), instances as f64),
        ("positive_rate".to_string(), analytic_positive_rate(spec.n_min, spec.n_max, spec.keys)),
    ];
    print!("{}", format_report(&report));
    Ok(())
}

fn data_width(bags: &[InstanceBag]) -> usize {
    bags.iter()
        .flat_map(|b| &b.instances)
        .find_map(|p| match p {
            Payload::Features(v) => Some(v.len()),
            Payload::Voxels(_) => None,
        })
        .unwrap_or(0)
}

fn load_run_config(cli: &Cli, a: &TrainArgs) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = load_config(required(&cli.config, "--config")?, cli.seed)?;
    if let Some(m) = &a.mode {
        cfg.mode = TrainMode::parse(m)?;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(r) = &a.resume {
        cfg.checkpoint = Some(r.clone());
    }
    cfg.check_paths()?;
    Ok(cfg)
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> CmdResult {
    let out = required(&cli.out, "--out")?;
    let cfg = load_run_config(cli, a)?;
    let train = load_dataset(&cfg.train)?;
    let test = cfg.test.as_deref().map(load_dataset).transpose()?;
    let model = NoduleSat::new(&mut substream(cfg.seed, "init"), cfg.model(data_width(&train)))?;
    let resuming = cfg.checkpoint.is_some();
    let mut trainer = match &cfg.checkpoint {
        Some(path) => Trainer::restore(model, &read_checkpoint(path)?)?,
        None => Trainer::new(model),
    };
    // resuming into the directory that holds the run's own log is expected
    let log_path = out.join(LOG_FILE);
    if !(resuming && log_path.exists()) {
        prepare_out(out, cli.force)?;
    }
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resuming)
        .write(true)
        .truncate(!resuming)
        .open(&log_path)?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let opts = cfg.train_options();
    let start_epoch = trainer.epoch;
    while trainer.epoch < opts.epochs {
        let entry = trainer.run_epoch(&train, &opts)?;
        writeln!(log, "{}", entry.line())?;
        println!("{}", entry.line());
        write_checkpoint(&ckpt_path, &trainer.checkpoint())?;
    }
    if trainer.epoch == start_epoch {
        write_checkpoint(&ckpt_path, &trainer.checkpoint())?;
    }
    let mut report = vec![("epochs".to_string(), trainer.epoch as f64)];
    if let Some(test) = test {
        let preds = predict_all(&mut trainer.model, &test, 64)?;
        fs::write(out.join(PREDICTIONS_FILE), format_predictions(&preds))?;
        match instance_auc(&preds, &test) {
            Ok(v) => report.push(("test_auc".to_string(), v)),
            Err(Error::UndefinedMetric(msg)) => eprintln!("test auc undefined: {msg}"),
            Err(e) => return Err(e.into()),
        }
    }
    print!("{}", format_report(&report));
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let report = match a.metric {
        Metric::Auc => {
            let preds_path = required(&a.predictions, "--predictions")?;
            let manifest_path = required(&a.manifest, "--manifest")?;
            let preds = read_predictions(preds_path)?;
            let manifest = read_manifest(manifest_path)?;
            let (scores, labels) = join_predictions(&preds, &manifest, manifest_path)?;
            let positives = labels.iter().filter(|&&l| l).count();
            vec![
                ("auc".to_string(), auc(&scores, &labels)?),
                ("instances".to_string(), labels.len() as f64),
                ("positives".to_string(), positives as f64),
            ]
        }
        Metric::Cpm => {
            let cands = read_candidates(required(&a.candidates, "--candidates")?)?;
            let scans = match a.scans {
                Some(s) => s,
                None => cands.iter().map(|c| c.series_id.as_str()).collect::<HashSet<_>>().len(),
            };
            let curve = froc(&cands, scans)?;
            let mut r = vec![("cpm".to_string(), curve.cpm)];
            for (t, s) in FROC_TARGETS.iter().zip(curve.sensitivities) {
                r.push((format!("sensitivity@{t}"), s));
            }
            r.push(("scans".to_string(), scans as f64));
            r.push(("nodules".to_string(), curve.nodules as f64));
            r
        }
    };
    print!("{}", format_report(&report));
    Ok(())
}

fn cmd_verify(seed: u64, suite: Suite, fault: bool) -> CmdResult {
    let checks = run_suite(VerifyOptions {
        seed,
        suite,
        shuffle_fault: fault,
    });
    for c in &checks {
        println!("{}", c.line());
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("summary passed={} failed={failed}", checks.len() - failed);
    if failed > 0 {
        return Err(Failure::Checks(failed));
    }
    Ok(())
}

fn cmd_bench(seed: u64, a: &BenchArgs) -> CmdResult {
    let sizes: Vec<usize> = a
        .sizes
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Failure::Validation(format!("bad --sizes {:?}", a.sizes)))?;
    if a.repeats == 0 || sizes.contains(&0) {
        return Err(Failure::Validation("sizes and repeats must be positive".into()));
    }
    let config = SatConfig::default();
    let mut sat = Sat::new(&mut substream(seed, "init"), config.clone())?;
    let mut report = Vec::new();
    for n in sizes {
        let data: Vec<f64> = (0..n * config.hidden).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
        let start = Instant::now();
        for _ in 0..a.repeats {
            let x = Tensor::param(data.clone(), &[n, config.hidden])?;
            let y = sat.forward(&x, &SetLayout::single(n)?, Mode::Train)?;
            sum(&square(&y)).backward()?;
        }
        let ms = start.elapsed().as_secs_f64() * 1e3 / a.repeats as f64;
        report.push((format!("sat_fwd_bwd_ms@n={n}"), ms));
    }
    print!("{}", format_report(&report));
    Ok(())
}
