//! Shape-error metric and experiment drivers.
//!
//! The synthetic drivers edit clean detections directly; the adversarial
//! driver runs the whole image pipeline. All three share one measurement
//! loop: fit the unattacked input for a baseline, then fit each attacked
//! variant and record the rest-pose shape error of both.

mod procrustes;
mod report;

use std::collections::BTreeSet;

use serde::Serialize;

pub use procrustes::{align, procrustes_error, procrustes_points, shape_error, Similarity};
pub use report::{
    percent_increase, BudgetSummary, ColumnResult, EvalReport, FailureRecord, ReportRow, SampleRecord,
    REPORT_FOOTER,
};

use crate::attacks::{fgsm_global, masked_iterative, AttackKind, AttackMode, AttackSpec};
use crate::bodymodel::Keypoint;
use crate::detector::{forward, nms_keypoints, DetectorWeights, KeypointSet};
use crate::error::{Error, Result};
use crate::fitter::{fit, FitConfig};
use crate::imaging::{perturbation_stats, Image};
use crate::parallel::map_ordered;
use crate::synth::{fingerprint, render, Corpus, CorpusEntry, Subject};

/// One corpus image with its ground truth. Without a stored image the
/// subject is rendered on demand.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub id: String,
    pub subject_index: usize,
    pub subject: Subject,
    pub image: Option<Image>,
}

impl EvalItem {
    pub fn from_entry(entry: &CorpusEntry) -> Self {
        EvalItem {
            id: entry.id(),
            subject_index: entry.subject_index,
            subject: entry.subject.clone(),
            image: None,
        }
    }

    pub fn from_entries(entries: &[CorpusEntry]) -> Vec<Self> {
        entries.iter().map(Self::from_entry).collect()
    }

    /// Items for every record of an on-disk corpus, images loaded.
    pub fn from_corpus(corpus: &Corpus) -> Result<Vec<Self>> {
        corpus
            .records
            .iter()
            .map(|r| {
                Ok(EvalItem {
                    id: r.id.clone(),
                    subject_index: r.subject_index,
                    subject: r.subject(),
                    image: Some(corpus.image(r)?),
                })
            })
            .collect()
    }

    pub fn image(&self) -> Result<Image> {
        match &self.image {
            Some(img) => Ok(img.clone()),
            None => Ok(render(&self.subject)?.0),
        }
    }
}

/// Ground-truth keypoints as a perfect detector would report them: rounded
/// to the pixel grid, every point detected with confidence 1.
pub fn clean_detections(subject: &Subject) -> Result<KeypointSet> {
    let mut kp = subject.keypoints()?;
    for p in kp.points.iter_mut() {
        p.location = p.location.map(f64::round);
    }
    Ok(kp)
}

/// Keypoint edit used by the synthetic drivers: removal zeroes the weight,
/// a flip swaps the two locations.
pub fn apply_synthetic(keypoints: &KeypointSet, attack: &AttackKind) -> Result<KeypointSet> {
    match *attack {
        AttackKind::Remove { keypoint } => Ok(keypoints.with_removed(keypoint)),
        AttackKind::Flip { a, b } => keypoints.with_swapped(a, b),
    }
}

/// Flip pairs evaluated by default: head against each hip, elbow against
/// knee on both sides, and the left/right swaps of knees, ankles and wrists.
pub fn default_flip_pairs() -> Vec<(Keypoint, Keypoint)> {
    use Keypoint::*;
    vec![
        (HeadTop, RightHip),
        (HeadTop, LeftHip),
        (RightElbow, RightKnee),
        (LeftElbow, LeftKnee),
        (LeftKnee, RightKnee),
        (LeftAnkle, RightAnkle),
        (LeftWrist, RightWrist),
    ]
}

/// Column label: the keypoint name, or `a<->b` for a pair.
pub fn column_label(attack: &AttackKind) -> String {
    match attack {
        AttackKind::Remove { keypoint } => keypoint.name().to_string(),
        AttackKind::Flip { a, b } => format!("{a}<->{b}"),
    }
}

fn row_name(prefix: &str, attack: &AttackKind) -> String {
    match attack {
        AttackKind::Remove { .. } => format!("{prefix}_removal"),
        AttackKind::Flip { .. } => format!("{prefix}_flip"),
    }
}

fn check_flip_pairs(pairs: &[(Keypoint, Keypoint)]) -> Result<()> {
    for &(a, b) in pairs {
        if a == b {
            return Err(Error::InvalidArgument(format!("cannot flip {a} with itself")));
        }
    }
    Ok(())
}

/// Result of measuring one item: baseline plus attacked samples.
struct ItemOutcome {
    baseline: Option<f64>,
    samples: Vec<SampleRecord>,
    failures: Vec<FailureRecord>,
}

fn fitted_error(keypoints: &KeypointSet, subject: &Subject, config: &FitConfig) -> Result<f64> {
    let r = fit(keypoints, &subject.camera, config, None)?;
    shape_error(&r.params.shape, &subject.beta_gt)
}

fn corpus_fingerprint(items: &[EvalItem]) -> Result<String> {
    let keyed: Vec<(&str, &Subject)> = items.iter().map(|i| (i.id.as_str(), &i.subject)).collect();
    Ok(fingerprint(&serde_json::to_vec(&keyed)?))
}

fn config_fingerprint(config: &impl Serialize) -> Result<String> {
    Ok(fingerprint(&serde_json::to_vec(config)?))
}

fn assemble(
    experiment: &str,
    items: &[EvalItem],
    outcomes: Vec<ItemOutcome>,
    rows: &[(String, Vec<(String, AttackKind)>)],
    config_fingerprint: String,
) -> Result<EvalReport> {
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    let mut baselines = Vec::new();
    let mut subjects = BTreeSet::new();
    for (item, o) in items.iter().zip(outcomes) {
        if let Some(b) = o.baseline {
            baselines.push(b);
            subjects.insert(item.subject_index);
        }
        samples.extend(o.samples);
        failures.extend(o.failures);
    }
    if baselines.is_empty() {
        return Err(Error::FitFailure("no entry produced a baseline fit".into()));
    }
    let rows = rows.iter().map(|(name, cols)| report::build_row(name, cols, &samples)).collect();
    Ok(EvalReport {
        experiment: experiment.to_string(),
        subjects: subjects.len(),
        entries: baselines.len(),
        baseline_cm: baselines.iter().sum::<f64>() / baselines.len() as f64,
        rows,
        failures,
        samples,
        config_fingerprint,
        corpus_fingerprint: corpus_fingerprint(items)?,
        footer: REPORT_FOOTER.to_string(),
    })
}

/// Groups attacks into rows by kind, keeping first-seen order.
fn row_layout(prefix: &str, attacks: &[AttackKind]) -> Vec<(String, Vec<(String, AttackKind)>)> {
    let mut rows: Vec<(String, Vec<(String, AttackKind)>)> = Vec::new();
    for a in attacks {
        let name = row_name(prefix, a);
        let col = (column_label(a), *a);
        match rows.iter_mut().find(|(n, _)| *n == name) {
            Some((_, cols)) => cols.push(col),
            None => rows.push((name, vec![col])),
        }
    }
    rows
}

/// Fits clean detections and each synthetic edit of them.
pub fn run_synthetic(
    experiment: &str,
    items: &[EvalItem],
    attacks: &[AttackKind],
    config: &FitConfig,
    threads: usize,
) -> Result<EvalReport> {
    config.validate()?;
    if items.is_empty() {
        return Err(Error::InvalidArgument("no corpus entries to evaluate".into()));
    }
    let outcomes = map_ordered(items, threads, |item| {
        let mut o = ItemOutcome {
            baseline: None,
            samples: Vec::new(),
            failures: Vec::new(),
        };
        let clean = match clean_detections(&item.subject) {
            Ok(k) => k,
            Err(e) => {
                o.failures.push(FailureRecord::new(&item.id, None, &e));
                return o;
            }
        };
        let base = match fitted_error(&clean, &item.subject, config) {
            Ok(b) => b,
            Err(e) => {
                o.failures.push(FailureRecord::new(&item.id, None, &e));
                return o;
            }
        };
        o.baseline = Some(base);
        for a in attacks {
            let label = column_label(a);
            match apply_synthetic(&clean, a).and_then(|kp| fitted_error(&kp, &item.subject, config)) {
                Ok(err) => o.samples.push(SampleRecord {
                    entry: item.id.clone(),
                    row: row_name("synthetic", a),
                    column: label,
                    error_cm: err,
                    baseline_cm: base,
                    success: None,
                    mse: None,
                    linf: None,
                    iterations: None,
                }),
                Err(e) => o.failures.push(FailureRecord::new(&item.id, Some(&label), &e)),
            }
        }
        o
    });
    #[derive(Serialize)]
    struct Fingerprinted<'a> {
        experiment: &'a str,
        fit: &'a FitConfig,
        attacks: &'a [AttackKind],
    }
    let fp = config_fingerprint(&Fingerprinted {
        experiment,
        fit: config,
        attacks,
    })?;
    assemble(experiment, items, outcomes, &row_layout("synthetic", attacks), fp)
}

/// Removes each of the 13 keypoints in turn.
pub fn run_synthetic_removal(items: &[EvalItem], config: &FitConfig, threads: usize) -> Result<EvalReport> {
    let attacks: Vec<AttackKind> = Keypoint::ALL.iter().map(|&keypoint| AttackKind::Remove { keypoint }).collect();
    run_synthetic("synthetic_removal", items, &attacks, config, threads)
}

/// Swaps each pair of keypoint locations.
pub fn run_synthetic_flip(
    items: &[EvalItem],
    config: &FitConfig,
    pairs: &[(Keypoint, Keypoint)],
    threads: usize,
) -> Result<EvalReport> {
    check_flip_pairs(pairs)?;
    let attacks: Vec<AttackKind> = pairs.iter().map(|&(a, b)| AttackKind::Flip { a, b }).collect();
    run_synthetic("synthetic_flip", items, &attacks, config, threads)
}

/// Local attack specs matching the synthetic experiments: every removal
/// plus the default flip pairs.
pub fn default_adversarial_specs() -> Vec<AttackSpec> {
    let mut specs: Vec<AttackSpec> = Keypoint::ALL
        .iter()
        .map(|&k| AttackSpec {
            stop_on_success: true,
            ..AttackSpec::remove(k, AttackMode::Local)
        })
        .collect();
    specs.extend(default_flip_pairs().into_iter().map(|(a, b)| AttackSpec {
        stop_on_success: true,
        ..AttackSpec::flip(a, b, AttackMode::Local)
    }));
    specs
}

/// Full pipeline: detect on the clean image and fit for the baseline, then
/// for each spec attack the image, detect again, fit and measure. Local
/// attacks on keypoints the detector misses on the clean image are
/// recorded as failures and left out of that column.
pub fn run_adversarial(
    items: &[EvalItem],
    weights: &DetectorWeights,
    specs: &[AttackSpec],
    config: &FitConfig,
    threshold: f64,
    threads: usize,
) -> Result<EvalReport> {
    config.validate()?;
    for s in specs {
        s.validate()?;
    }
    if items.is_empty() {
        return Err(Error::InvalidArgument("no corpus entries to evaluate".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("detection threshold {threshold} outside (0, 1)")));
    }
    let detect = |img: &Image| -> Result<KeypointSet> { nms_keypoints(&forward(img, weights)?, threshold) };
    let outcomes = map_ordered(items, threads, |item| {
        let mut o = ItemOutcome {
            baseline: None,
            samples: Vec::new(),
            failures: Vec::new(),
        };
        let prepared = item.image().and_then(|img| {
            let clean = detect(&img)?;
            let base = fitted_error(&clean, &item.subject, config)?;
            Ok((img, clean, base))
        });
        let (image, clean, base) = match prepared {
            Ok(p) => p,
            Err(e) => {
                o.failures.push(FailureRecord::new(&item.id, None, &e));
                return o;
            }
        };
        o.baseline = Some(base);
        for spec in specs {
            let label = column_label(&spec.kind);
            let measured = (|| {
                let result = match spec.mode {
                    AttackMode::Local => masked_iterative(&image, weights, &clean, spec)?,
                    AttackMode::Global => fgsm_global(&image, weights, spec)?,
                };
                let adv = result.image();
                let stats = perturbation_stats(&image, adv)?;
                let err = fitted_error(&detect(adv)?, &item.subject, config)?;
                Ok(SampleRecord {
                    entry: item.id.clone(),
                    row: row_name("adversarial", &spec.kind),
                    column: label.clone(),
                    error_cm: err,
                    baseline_cm: base,
                    success: Some(result.success),
                    mse: Some(stats.mse),
                    linf: Some(stats.linf),
                    iterations: Some(result.iterations),
                })
            })();
            match measured {
                Ok(s) => o.samples.push(s),
                Err(e) => o.failures.push(FailureRecord::new(&item.id, Some(&label), &e)),
            }
        }
        o
    });
    #[derive(Serialize)]
    struct Fingerprinted<'a> {
        experiment: &'a str,
        fit: &'a FitConfig,
        specs: &'a [AttackSpec],
        threshold: f64,
        weights: String,
    }
    let fp = config_fingerprint(&Fingerprinted {
        experiment: "adversarial",
        fit: config,
        specs,
        threshold,
        weights: fingerprint(&weights.to_bytes()),
    })?;
    let kinds: Vec<AttackKind> = specs.iter().map(|s| s.kind).collect();
    assemble("adversarial", items, outcomes, &row_layout("adversarial", &kinds), fp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{sample_corpus, CorpusSpec};

    fn items(subjects: usize, poses: usize) -> Vec<EvalItem> {
        let spec = CorpusSpec {
            subjects,
            poses,
            ..CorpusSpec::default()
        };
        EvalItem::from_entries(&sample_corpus(&spec).unwrap())
    }

    #[test]
    fn clean_detections_sit_on_the_grid() {
        let it = &items(1, 1)[0];
        let kp = clean_detections(&it.subject).unwrap();
        let gt = it.subject.keypoints().unwrap();
        for (a, b) in kp.points.iter().zip(&gt.points) {
            assert!(a.detected && a.confidence == 1.0);
            assert_eq!(a.location, b.location.map(f64::round));
        }
    }

    #[test]
    fn removal_report_has_table_layout() {
        let r = run_synthetic_removal(&items(2, 1), &FitConfig::default(), 1).unwrap();
        assert_eq!(r.rows.len(), 1);
        let row = &r.rows[0];
        assert_eq!(row.name, "synthetic_removal");
        let labels: Vec<&str> = row.columns.iter().map(|c| c.label.as_str()).collect();
        let names: Vec<&str> = Keypoint::ALL.iter().map(|k| k.name()).collect();
        assert_eq!(labels, names);
        assert_eq!(labels[0], "right_ankle");
        assert_eq!(labels[12], "head_top");
        let header = r.to_csv().lines().next().unwrap().to_string();
        assert_eq!(header.split(',').count(), 13 + 3);
        assert_eq!((r.entries, r.subjects), (2, 2));
        for c in &row.columns {
            assert_eq!(c.baseline_cm, r.baseline_cm);
            assert_eq!(c.percent_increase, percent_increase(c.mean_error_cm, c.baseline_cm));
        }
        assert!(r.baseline_cm > 0.0);
    }

    #[test]
    fn no_op_edit_reproduces_the_baseline() {
        // removing a keypoint twice is the same edit as removing it once
        let its = items(2, 1);
        let cfg = FitConfig::default();
        for it in &its {
            let clean = clean_detections(&it.subject).unwrap();
            let once = clean.with_removed(Keypoint::LeftWrist);
            let twice = apply_synthetic(&once, &AttackKind::Remove { keypoint: Keypoint::LeftWrist }).unwrap();
            assert_eq!(
                fitted_error(&once, &it.subject, &cfg).unwrap(),
                fitted_error(&twice, &it.subject, &cfg).unwrap()
            );
        }
    }

    #[test]
    fn baseline_matches_across_synthetic_drivers() {
        let its = items(2, 1);
        let cfg = FitConfig::default();
        let rem = run_synthetic_removal(&its, &cfg, 1).unwrap();
        let flip = run_synthetic_flip(&its, &cfg, &default_flip_pairs(), 2).unwrap();
        assert_eq!(rem.baseline_cm, flip.baseline_cm);
        assert_eq!(rem.corpus_fingerprint, flip.corpus_fingerprint);
        assert_ne!(rem.config_fingerprint, flip.config_fingerprint);
        assert_eq!(flip.rows[0].columns.len(), default_flip_pairs().len());
    }

    #[test]
    fn self_flip_is_rejected() {
        let err = run_synthetic_flip(&items(1, 1), &FitConfig::default(), &[(Keypoint::LeftKnee, Keypoint::LeftKnee)], 1);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn thread_count_does_not_change_the_report() {
        let its = items(3, 1);
        let attacks = [AttackKind::Remove { keypoint: Keypoint::RightHip }];
        let a = run_synthetic("t", &its, &attacks, &FitConfig::default(), 1).unwrap();
        let b = run_synthetic("t", &its, &attacks, &FitConfig::default(), 3).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn adversarial_budgets_respect_epsilon() {
        // untrained weights still give a well-defined pipeline; undetected
        // targets surface as failures rather than aborting the run
        let its = items(1, 1);
        let w = DetectorWeights::initialize(3);
        let specs = vec![AttackSpec {
            max_iters: 3,
            ..AttackSpec::remove(Keypoint::HeadTop, AttackMode::Global)
        }];
        let r = run_adversarial(&its, &w, &specs, &FitConfig::default(), 0.3, 1);
        match r {
            Ok(r) => {
                for s in &r.samples {
                    assert!(s.linf.unwrap() <= specs[0].epsilon + 1e-6);
                }
                assert_eq!(r.rows[0].name, "adversarial_removal");
            }
            Err(e) => assert_eq!(e.kind(), "fit_failure"),
        }
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(run_synthetic_removal(&[], &FitConfig::default(), 1).is_err());
    }
}
