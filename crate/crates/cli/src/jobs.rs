//! Fully resolved commands and their execution.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use shape_evade::attacks::{fgsm_global, masked_iterative, AttackKind, AttackMode, AttackSpec, Mask};
use shape_evade::bodymodel::Keypoint;
use shape_evade::detector::train::{peak_localization_rate, train, corpus_samples, TrainingConfig};
use shape_evade::detector::{forward, nms_keypoints, DetectorWeights, KeypointSet};
use shape_evade::eval::{
    apply_synthetic, clean_detections, run_adversarial, run_synthetic_flip, run_synthetic_removal, shape_error,
    EvalItem, EvalReport,
};
use shape_evade::fitter::{fit, FitConfig, FitResult};
use shape_evade::imaging::{load_image, perturbation_stats, Image};
use shape_evade::plot::{grouped_bars, line_chart, BarSeries, LineSeries};
use shape_evade::synth::{write_corpus, Corpus, CorpusSpec, ImageFormat, ManifestRecord, MANIFEST_NAME};
use shape_evade::Error;

use crate::failure::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Job {
    Gen(GenJob),
    Train(TrainJob),
    Attack(AttackJob),
    Fit(FitJob),
    Eval(EvalJob),
    Plot(PlotJob),
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Gen(_) => "gen",
            Job::Train(_) => "train",
            Job::Attack(_) => "attack",
            Job::Fit(_) => "fit",
            Job::Eval(_) => "eval",
            Job::Plot(_) => "plot",
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        match self {
            Job::Gen(j) => vec![j.spec.seed],
            Job::Train(j) => vec![j.config.seed],
            _ => Vec::new(),
        }
    }

    /// Runs the job into `out`, returning the files written (relative).
    pub fn run(&self, out: &Path, threads: usize) -> Result<Vec<String>, Failure> {
        match self {
            Job::Gen(j) => j.run(out),
            Job::Train(j) => j.run(out),
            Job::Attack(j) => j.run(out),
            Job::Fit(j) => j.run(out),
            Job::Eval(j) => j.run(out, threads),
            Job::Plot(j) => j.run(out),
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Accepts a corpus directory or its manifest file.
pub fn corpus_manifest(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    }
}

fn find_record<'a>(corpus: &'a Corpus, entry: &str) -> Result<&'a ManifestRecord, Failure> {
    corpus
        .records
        .iter()
        .find(|r| r.id == entry)
        .ok_or_else(|| Failure::domain(Error::InvalidArgument(format!("no entry {entry:?} in corpus"))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenJob {
    pub spec: CorpusSpec,
    pub format: ImageFormat,
}

impl GenJob {
    fn run(&self, out: &Path) -> Result<Vec<String>, Failure> {
        write_corpus(&self.spec, out, self.format)?;
        Ok(vec![MANIFEST_NAME.into(), "images/".into()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub corpus: PathBuf,
    pub config: TrainingConfig,
}

#[derive(Serialize)]
struct TrainingSummary<'a> {
    corpus_fingerprint: &'a str,
    initial_loss: f64,
    epoch_losses: &'a [f64],
    /// Share of corpus keypoints whose map peak lies within 4 px.
    localization_rate_4px: f64,
}

impl TrainJob {
    fn run(&self, out: &Path) -> Result<Vec<String>, Failure> {
        let corpus = Corpus::load(&corpus_manifest(&self.corpus))?;
        let samples = corpus_samples(&corpus)?;
        let (weights, log) = train(&samples, &self.config, &corpus.fingerprint, |epoch, loss| {
            println!("epoch {:>3}  loss {loss:.6}", epoch + 1);
        })?;
        weights.save(out.join("detector.bin"))?;
        write_json(
            &out.join("training_log.json"),
            &TrainingSummary {
                corpus_fingerprint: &corpus.fingerprint,
                initial_loss: log.initial_loss,
                epoch_losses: &log.epoch_losses,
                localization_rate_4px: peak_localization_rate(&weights, &samples, 4.0)?,
            },
        )?;
        Ok(vec!["detector.bin".into(), "training_log.json".into()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackJob {
    pub corpus: PathBuf,
    pub entry: String,
    pub checkpoint: PathBuf,
    pub spec: AttackSpec,
    pub detection_threshold: f64,
}

#[derive(Serialize)]
struct AttackOutput<'a> {
    entry: &'a str,
    result: &'a shape_evade::attacks::AttackResult,
    clean_keypoints: &'a KeypointSet,
    adversarial_keypoints: &'a KeypointSet,
    /// Pixels the attack may touch (all of them for a global attack).
    mask_pixels: usize,
    changed_pixels: usize,
}

fn detect(image: &Image, weights: &DetectorWeights, threshold: f64) -> Result<KeypointSet, Failure> {
    Ok(nms_keypoints(&forward(image, weights)?, threshold)?)
}

impl AttackJob {
    fn run(&self, out: &Path) -> Result<Vec<String>, Failure> {
        self.spec.validate()?;
        let corpus = Corpus::load(&corpus_manifest(&self.corpus))?;
        let record = find_record(&corpus, &self.entry)?;
        let image = corpus.image(record)?;
        let weights = DetectorWeights::load(&self.checkpoint)?;
        let clean = detect(&image, &weights, self.detection_threshold)?;
        let result = match self.spec.mode {
            AttackMode::Local => masked_iterative(&image, &weights, &clean, &self.spec)?,
            AttackMode::Global => fgsm_global(&image, &weights, &self.spec)?,
        };
        let adv = result.image();
        let adversarial = detect(adv, &weights, self.detection_threshold)?;
        let mask = match self.spec.mode {
            AttackMode::Local => Mask::disks(image.width(), image.height(), &result.centres, self.spec.radius),
            AttackMode::Global => Mask::full(image.width(), image.height()),
        };
        let changed = image.pixels().iter().zip(adv.pixels()).filter(|(a, b)| a != b).count();
        adv.save_float(out.join("adversarial.f32"))?;
        adv.save_pgm(out.join("adversarial.pgm"))?;
        // mid-grey is no change; black and white are -ε and +ε
        let eps = self.spec.epsilon as f32;
        let diff: Vec<f32> = image
            .pixels()
            .iter()
            .zip(adv.pixels())
            .map(|(a, b)| (0.5 + (b - a) / (2.0 * eps)).clamp(0.0, 1.0))
            .collect();
        Image::new(image.width(), image.height(), diff)?.save_pgm(out.join("perturbation.pgm"))?;
        result.write_trace_csv(out.join("trace.csv"))?;
        write_json(
            &out.join("attack.json"),
            &AttackOutput {
                entry: &self.entry,
                result: &result,
                clean_keypoints: &clean,
                adversarial_keypoints: &adversarial,
                mask_pixels: mask.count(),
                changed_pixels: changed,
            },
        )?;
        let stats = perturbation_stats(&image, adv)?;
        println!(
            "{} on {}: success {} after {} iterations, rmse {:.5}, linf {:.5}, {} pixels changed",
            self.spec.kind.label(),
            self.entry,
            result.success,
            result.iterations,
            stats.rmse(),
            stats.linf,
            changed
        );
        Ok(vec![
            "adversarial.f32".into(),
            "adversarial.pgm".into(),
            "perturbation.pgm".into(),
            "trace.csv".into(),
            "attack.json".into(),
        ])
    }
}

/// Where the fitted keypoints come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KeypointSource {
    /// Ground truth rounded to the pixel grid.
    GroundTruth,
    /// Detector output on the corpus image, or on `image` when given.
    Detector { checkpoint: PathBuf, image: Option<PathBuf> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitJob {
    pub corpus: PathBuf,
    pub entry: String,
    pub source: KeypointSource,
    /// Synthetic edit applied to the keypoints before fitting.
    pub edit: Option<AttackKind>,
    pub fit: FitConfig,
    pub detection_threshold: f64,
}

#[derive(Serialize)]
struct FitOutput<'a> {
    entry: &'a str,
    keypoints: &'a KeypointSet,
    result: &'a FitResult,
    beta_gt: [f64; 6],
    shape_error_cm: f64,
}

impl FitJob {
    fn run(&self, out: &Path) -> Result<Vec<String>, Failure> {
        let corpus = Corpus::load(&corpus_manifest(&self.corpus))?;
        let record = find_record(&corpus, &self.entry)?;
        let subject = record.subject();
        let mut keypoints = match &self.source {
            KeypointSource::GroundTruth => clean_detections(&subject)?,
            KeypointSource::Detector { checkpoint, image } => {
                let weights = DetectorWeights::load(checkpoint)?;
                let img = match image {
                    Some(p) => load_image(p)?,
                    None => corpus.image(record)?,
                };
                detect(&img, &weights, self.detection_threshold)?
            }
        };
        if let Some(edit) = &self.edit {
            keypoints = apply_synthetic(&keypoints, edit)?;
        }
        let result = fit(&keypoints, &subject.camera, &self.fit, None)?;
        let err = shape_error(&result.params.shape, &subject.beta_gt)?;
        write_json(
            &out.join("fit.json"),
            &FitOutput {
                entry: &self.entry,
                keypoints: &keypoints,
                result: &result,
                beta_gt: subject.beta_gt.beta,
                shape_error_cm: err,
            },
        )?;
        println!("{}: shape error {err:.4} cm, converged {}", self.entry, result.converged);
        Ok(vec!["fit.json".into()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    SyntheticRemoval,
    SyntheticFlip,
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalJob {
    pub experiment: Experiment,
    pub corpus: PathBuf,
    pub subjects: Option<usize>,
    pub poses: Option<usize>,
    pub pairs: Vec<(Keypoint, Keypoint)>,
    /// Adversarial experiment only.
    pub checkpoint: Option<PathBuf>,
    pub specs: Vec<AttackSpec>,
    pub fit: FitConfig,
    pub detection_threshold: f64,
}

impl EvalJob {
    fn run(&self, out: &Path, threads: usize) -> Result<Vec<String>, Failure> {
        let corpus = Corpus::load(&corpus_manifest(&self.corpus))?;
        let items: Vec<EvalItem> = EvalItem::from_corpus(&corpus)?
            .into_iter()
            .zip(&corpus.records)
            .filter(|(_, r)| self.subjects.is_none_or(|n| r.subject_index < n))
            .filter(|(_, r)| self.poses.is_none_or(|n| r.pose_index < n))
            .map(|(i, _)| i)
            .collect();
        let report: EvalReport = match self.experiment {
            Experiment::SyntheticRemoval => run_synthetic_removal(&items, &self.fit, threads)?,
            Experiment::SyntheticFlip => run_synthetic_flip(&items, &self.fit, &self.pairs, threads)?,
            Experiment::Adversarial => {
                let path = self
                    .checkpoint
                    .as_ref()
                    .ok_or_else(|| Failure::usage("eval adversarial needs --checkpoint"))?;
                let weights = DetectorWeights::load(path)?;
                run_adversarial(&items, &weights, &self.specs, &self.fit, self.detection_threshold, threads)?
            }
        };
        report.write(out, "report")?;
        print!("{}", report.summary_text());
        Ok(vec!["report.csv".into(), "report.json".into(), "report.txt".into()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Figure {
    /// Percent increase per flip pair (or per keypoint), one series per report row.
    Fig6,
    /// Attacked-map peak against perturbation RMSE, one curve per trace.
    Fig8,
    /// Mean error per keypoint in cm, one series per report row.
    Table1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotJob {
    pub figure: Figure,
    pub inputs: Vec<PathBuf>,
}

/// Reads `iteration,peak_..,loss,rmse,linf,success` rows into one series
/// per peak column.
pub fn read_trace(path: &Path) -> Result<Vec<LineSeries>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let rmse_col = header
        .iter()
        .position(|h| *h == "rmse")
        .ok_or_else(|| Failure::domain(Error::Parse(format!("{}: no rmse column", path.display()))))?;
    let peak_cols: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with("peak_")).collect();
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    let mut series: Vec<LineSeries> = peak_cols
        .iter()
        .map(|&c| LineSeries {
            name: if peak_cols.len() == 1 { stem.to_string() } else { format!("{stem} {}", &header[c][5..]) },
            points: vec![],
        })
        .collect();
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let num = |i: usize| -> Result<f64, Failure> {
            fields.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| {
                Failure::domain(Error::Parse(format!("{}:{}: bad field {i}", path.display(), n + 2)))
            })
        };
        let x = num(rmse_col)?;
        for (s, &c) in series.iter_mut().zip(&peak_cols) {
            s.points.push((x, num(c)?));
        }
    }
    Ok(series)
}

impl PlotJob {
    fn run(&self, out: &Path) -> Result<Vec<String>, Failure> {
        let svg = match self.figure {
            Figure::Fig8 => {
                let mut series = Vec::new();
                for p in &self.inputs {
                    series.extend(read_trace(p)?);
                }
                line_chart(
                    "Attacked keypoint activation against perturbation",
                    "perturbation RMSE",
                    "peak activation",
                    &series,
                    Some(shape_evade::detector::DEFAULT_DETECTION_THRESHOLD),
                )
            }
            Figure::Fig6 | Figure::Table1 => {
                let mut categories: Vec<String> = Vec::new();
                let mut rows = Vec::new();
                for p in &self.inputs {
                    let report = EvalReport::load(p)?;
                    for row in report.rows {
                        for c in &row.columns {
                            if !categories.contains(&c.label) {
                                categories.push(c.label.clone());
                            }
                        }
                        rows.push(row);
                    }
                }
                let series: Vec<BarSeries> = rows
                    .iter()
                    .map(|r| BarSeries {
                        name: r.name.clone(),
                        values: categories
                            .iter()
                            .map(|c| {
                                r.column(c).map(|col| {
                                    if self.figure == Figure::Fig6 {
                                        col.percent_increase
                                    } else {
                                        col.mean_error_cm
                                    }
                                })
                            })
                            .collect(),
                    })
                    .collect();
                if self.figure == Figure::Fig6 {
                    grouped_bars("Shape error increase per attack", "increase over baseline (%)", &categories, &series)
                } else {
                    grouped_bars("Shape error per attacked keypoint", "mean shape error (cm)", &categories, &series)
                }
            }
        };
        let name = format!("{}.svg", serde_json::to_value(self.figure)?.as_str().unwrap_or("figure"));
        let path = out.join(&name);
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        Ok(vec![name])
    }
}
