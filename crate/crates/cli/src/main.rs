//! `shape-evade`: generate corpora, train the detector, attack images, fit
//! body models, run the evaluation experiments and plot their results.
//!
//! Exit status is 0 on success, 1 on a domain error and 2 on a usage
//! error. Failures print one JSON object to stderr.

mod config;
mod failure;
mod jobs;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shape_evade::attacks::{AttackKind, AttackMode, AttackSpec};
use shape_evade::bodymodel::Keypoint;
use shape_evade::eval::{default_flip_pairs, default_adversarial_specs};
use shape_evade::fitter::FitConfig;
use shape_evade::synth::{CorpusSpec, ImageFormat};

use config::{AttackSection, Config};
use failure::Failure;
use jobs::{
    AttackJob, EvalJob, Experiment, Figure, FitJob, GenJob, Job, KeypointSource, PlotJob, TrainJob,
};
use manifest::{unix_now, RunManifest};

const THREADS_VAR: &str = "SHAPE_EVADE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "shape-evade", version, about = "Adversarial evasion of keypoint-based body-shape estimation")]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic corpus with ground truth.
    Gen(GenArgs),
    /// Train the keypoint detector on a corpus.
    Train(TrainArgs),
    /// Perturb one corpus image to remove or swap keypoints.
    Attack(AttackArgs),
    /// Fit the body model to one corpus entry.
    Fit(FitArgs),
    /// Run an evaluation experiment over a corpus.
    Eval(EvalArgs),
    /// Draw an SVG chart from reports or attack traces.
    Plot(PlotArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
struct OutArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Number of subjects (shapes).
    #[arg(long)]
    count: Option<usize>,
    /// Poses per subject.
    #[arg(long)]
    poses: Option<usize>,
    /// Square image side in pixels.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, value_parser = parse_format)]
    format: Option<ImageFormat>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Corpus directory or its corpus.jsonl.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    foreground_weight: Option<f64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug, Default)]
struct AttackFlags {
    #[arg(long)]
    epsilon: Option<f64>,
    /// Step size per iteration.
    #[arg(long)]
    alpha: Option<f64>,
    /// Mask disk radius in pixels (local mode).
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    stop_rmse: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Stop at the first iteration where the attack succeeds.
    #[arg(long)]
    stop_on_success: Option<bool>,
    /// Re-centre the mask on the attacked map's current peak each step.
    #[arg(long)]
    recenter: Option<bool>,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Corpus entry id, e.g. s0003_p1.
    #[arg(long)]
    entry: String,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Keypoint to remove, or the first of a flipped pair.
    #[arg(long, value_parser = parse_keypoint)]
    keypoint: Keypoint,
    /// Swap `--keypoint` with this one instead of removing it.
    #[arg(long, value_parser = parse_keypoint)]
    flip_with: Option<Keypoint>,
    #[arg(long, value_parser = parse_mode, default_value = "local")]
    mode: AttackMode,
    #[command(flatten)]
    attack: AttackFlags,
    #[arg(long)]
    threshold: Option<f64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug, Default)]
struct FitFlags {
    #[arg(long)]
    sigma_gm: Option<f64>,
    #[arg(long)]
    lambda_shape: Option<f64>,
    #[arg(long)]
    lambda_pose: Option<f64>,
    #[arg(long)]
    prior_slack: Option<f64>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    max_outer_iters: Option<usize>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    entry: String,
    /// Detect keypoints with this checkpoint instead of using ground truth.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Image to detect on (e.g. an adversarial image); needs --checkpoint.
    #[arg(long, requires = "checkpoint")]
    image: Option<PathBuf>,
    /// Zero this keypoint's weight before fitting.
    #[arg(long, value_parser = parse_keypoint, conflicts_with = "flip")]
    remove: Option<Keypoint>,
    /// Swap two keypoints before fitting, as `a:b`.
    #[arg(long, value_parser = parse_pair)]
    flip: Option<(Keypoint, Keypoint)>,
    #[command(flatten)]
    fit: FitFlags,
    #[arg(long)]
    threshold: Option<f64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(value_enum)]
    experiment: Experiment,
    #[arg(long)]
    corpus: PathBuf,
    /// Use the first N subjects only.
    #[arg(long)]
    subjects: Option<usize>,
    /// Use the first K poses of each subject only.
    #[arg(long)]
    poses: Option<usize>,
    /// Flip pairs as comma-separated `a:b` items.
    #[arg(long, value_delimiter = ',', value_parser = parse_pair)]
    pairs: Option<Vec<(Keypoint, Keypoint)>>,
    /// Detector checkpoint (adversarial experiment).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode, default_value = "local")]
    mode: AttackMode,
    #[command(flatten)]
    attack: AttackFlags,
    #[command(flatten)]
    fit: FitFlags,
    #[arg(long)]
    threshold: Option<f64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(value_enum)]
    figure: Figure,
    /// Report JSON files (fig6, table1) or trace CSV files (fig8).
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    /// A run.json, or the directory holding one.
    manifest: PathBuf,
    #[command(flatten)]
    out: OutArgs,
}

fn parse_keypoint(s: &str) -> Result<Keypoint, String> {
    s.parse::<Keypoint>().map_err(|_| {
        let names: Vec<&str> = Keypoint::ALL.iter().map(|k| k.name()).collect();
        format!("unknown keypoint {s:?}; expected one of {}", names.join(", "))
    })
}

fn parse_pair(s: &str) -> Result<(Keypoint, Keypoint), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("pair {s:?} must look like a:b"))?;
    Ok((parse_keypoint(a)?, parse_keypoint(b)?))
}

fn parse_mode(s: &str) -> Result<AttackMode, String> {
    match s {
        "local" => Ok(AttackMode::Local),
        "global" => Ok(AttackMode::Global),
        _ => Err(format!("mode {s:?} must be local or global")),
    }
}

fn parse_format(s: &str) -> Result<ImageFormat, String> {
    match s {
        "float" => Ok(ImageFormat::Float),
        "pgm" => Ok(ImageFormat::Pgm),
        _ => Err(format!("format {s:?} must be float or pgm")),
    }
}

fn threads_from_env() -> Result<usize, Failure> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Failure::usage(format!("{THREADS_VAR}={v:?} must be a positive integer"))),
        },
        Err(_) => Ok(shape_evade::parallel::available_threads()),
    }
}

/// Absolute form of an input path so manifests replay from any directory.
fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn merge_fit(mut fit: FitConfig, flags: &FitFlags) -> FitConfig {
    if let Some(v) = flags.sigma_gm {
        fit.sigma_gm = v;
    }
    if let Some(v) = flags.lambda_shape {
        fit.lambda_shape = v;
    }
    if let Some(v) = flags.lambda_pose {
        fit.lambda_pose = v;
    }
    if let Some(v) = flags.prior_slack {
        fit.prior_slack = v;
    }
    if let Some(v) = flags.restarts {
        fit.restarts = v;
    }
    if let Some(v) = flags.max_outer_iters {
        fit.max_outer_iters = v;
    }
    fit
}

/// Builds a spec from the config section, then the flags. Attacks stop at
/// their first success by default only when `stop_default` is set.
fn merge_attack(kind: AttackKind, mode: AttackMode, section: &AttackSection, flags: &AttackFlags, stop_default: bool) -> AttackSpec {
    AttackSpec {
        epsilon: flags.epsilon.unwrap_or(section.epsilon),
        alpha: flags.alpha.unwrap_or(section.alpha),
        radius: flags.radius.unwrap_or(section.radius),
        stop_rmse: flags.stop_rmse.or(section.stop_rmse),
        max_iters: flags.max_iters.unwrap_or(section.max_iters),
        stop_on_success: flags.stop_on_success.or(section.stop_on_success).unwrap_or(stop_default),
        recenter: flags.recenter.unwrap_or(section.recenter),
        ..AttackSpec::new(kind, mode)
    }
}

/// Resolves a parsed command into a job and its output directory.
fn resolve(command: Command, cfg: &Config) -> Result<(Job, OutArgs), Failure> {
    let threshold = |flag: Option<f64>| flag.unwrap_or(cfg.detection_threshold);
    Ok(match command {
        Command::Gen(a) => {
            let g = &cfg.gen;
            let spec = CorpusSpec {
                seed: a.seed.unwrap_or(g.seed),
                subjects: a.count.unwrap_or(g.subjects),
                poses: a.poses.unwrap_or(g.poses),
                width: a.size.unwrap_or(g.width),
                height: a.size.unwrap_or(g.height),
            };
            (
                Job::Gen(GenJob {
                    spec,
                    format: a.format.unwrap_or(g.format),
                }),
                a.out,
            )
        }
        Command::Train(a) => {
            let mut config = cfg.train.clone();
            config.seed = a.seed.unwrap_or(config.seed);
            config.epochs = a.epochs.unwrap_or(config.epochs);
            config.learning_rate = a.learning_rate.unwrap_or(config.learning_rate);
            config.batch_size = a.batch_size.unwrap_or(config.batch_size);
            config.foreground_weight = a.foreground_weight.unwrap_or(config.foreground_weight);
            config.validate()?;
            (
                Job::Train(TrainJob {
                    corpus: absolute(&a.corpus),
                    config,
                }),
                a.out,
            )
        }
        Command::Attack(a) => {
            let kind = match a.flip_with {
                Some(b) => AttackKind::Flip { a: a.keypoint, b },
                None => AttackKind::Remove { keypoint: a.keypoint },
            };
            let spec = merge_attack(kind, a.mode, &cfg.attack, &a.attack, false);
            spec.validate()?;
            (
                Job::Attack(AttackJob {
                    corpus: absolute(&a.corpus),
                    entry: a.entry,
                    checkpoint: absolute(&a.checkpoint),
                    spec,
                    detection_threshold: threshold(a.threshold),
                }),
                a.out,
            )
        }
        Command::Fit(a) => {
            let source = match a.checkpoint {
                Some(c) => KeypointSource::Detector {
                    checkpoint: absolute(&c),
                    image: a.image.as_deref().map(absolute),
                },
                None => KeypointSource::GroundTruth,
            };
            let edit = match (a.remove, a.flip) {
                (Some(keypoint), _) => Some(AttackKind::Remove { keypoint }),
                (None, Some((x, y))) => Some(AttackKind::Flip { a: x, b: y }),
                (None, None) => None,
            };
            let fit = merge_fit(cfg.fit.clone(), &a.fit);
            fit.validate()?;
            (
                Job::Fit(FitJob {
                    corpus: absolute(&a.corpus),
                    entry: a.entry,
                    source,
                    edit,
                    fit,
                    detection_threshold: threshold(a.threshold),
                }),
                a.out,
            )
        }
        Command::Eval(a) => {
            let pairs = match (a.pairs, &cfg.eval.pairs) {
                (Some(p), _) => p,
                (None, Some(names)) => names.iter().map(|s| parse_pair(s)).collect::<Result<_, _>>().map_err(Failure::usage)?,
                (None, None) => default_flip_pairs(),
            };
            let fit = merge_fit(cfg.fit.clone(), &a.fit);
            fit.validate()?;
            let specs = if a.experiment == Experiment::Adversarial {
                if a.checkpoint.is_none() {
                    return Err(Failure::usage("eval adversarial needs --checkpoint"));
                }
                let removals = default_adversarial_specs().into_iter().map(|s| s.kind).filter(|k| matches!(k, AttackKind::Remove { .. }));
                let flips = pairs.iter().map(|&(x, y)| AttackKind::Flip { a: x, b: y });
                let specs: Vec<AttackSpec> = removals
                    .chain(flips)
                    .map(|k| merge_attack(k, a.mode, &cfg.attack, &a.attack, true))
                    .collect();
                for s in &specs {
                    s.validate()?;
                }
                specs
            } else {
                Vec::new()
            };
            (
                Job::Eval(EvalJob {
                    experiment: a.experiment,
                    corpus: absolute(&a.corpus),
                    subjects: a.subjects.or(cfg.eval.subjects),
                    poses: a.poses.or(cfg.eval.poses),
                    pairs,
                    checkpoint: a.checkpoint.as_deref().map(absolute),
                    specs,
                    fit,
                    detection_threshold: threshold(a.threshold),
                }),
                a.out,
            )
        }
        Command::Plot(a) => (
            Job::Plot(PlotJob {
                figure: a.figure,
                inputs: a.inputs.iter().map(|p| absolute(p)).collect(),
            }),
            a.out,
        ),
        Command::Replay(a) => (RunManifest::load(&a.manifest)?.job, a.out),
    })
}

fn prepare_out(out: &OutArgs) -> Result<(), Failure> {
    let dir = &out.out;
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Failure::other("output_exists", format!("{} is not a directory", dir.display())));
        }
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| shape_evade::Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !out.force {
            return Err(Failure::other(
                "output_exists",
                format!("{} is not empty; pass --force to write into it", dir.display()),
            ));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| shape_evade::Error::io(dir, e))?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let started = unix_now();
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let threads = threads_from_env()?;
    let (job, out) = resolve(cli.command, &cfg)?;
    prepare_out(&out)?;
    let outputs = job.run(&out.out, threads)?;
    RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: job.name().into(),
        seeds: job.seeds(),
        job,
        argv: std::env::args().collect(),
        threads,
        outputs,
        started_unix: started,
        finished_unix: unix_now(),
    }
    .write(&out.out)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                    ExitCode::from(2)
                } else {
                    ExitCode::SUCCESS
                };
            }
            let f = Failure::usage(e.to_string().trim().to_string());
            eprintln!("{}", f.to_json());
            return f.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.to_json());
            f.exit_code()
        }
    }
}
