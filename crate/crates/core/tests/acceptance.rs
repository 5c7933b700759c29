//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! (written straight to stderr so it shows without `--nocapture`) and then
//! asserts the same verdict.
//!
//! The attack and adversarial checks use the detector checkpoint in
//! `tests/data/detector.bin`, trained by the CLI on a separate corpus
//! (seed 7, 600 subjects x 3 poses, 20 epochs).

use std::io::Write;
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shape_evade::attacks::{fgsm_global, masked_iterative, AttackKind, AttackMode, AttackSpec, Mask};
use shape_evade::bodymodel::{BodyParams, Keypoint, NUM_BETAS, NUM_PARAMS};
use shape_evade::detector::train::{rendered_samples, train, TrainingConfig};
use shape_evade::detector::{
    forward, forward_raw, input_gradient_raw, nms_keypoints, DetectorWeights, HeatmapSet, KeypointSet,
    DEFAULT_DETECTION_THRESHOLD,
};
use shape_evade::eval::{
    default_adversarial_specs, default_flip_pairs, procrustes_points, run_adversarial, run_synthetic_flip,
    run_synthetic_removal, shape_error, EvalItem, EvalReport,
};
use shape_evade::fitter::{fit, objective, objective_gradient, FitConfig};
use shape_evade::imaging::Image;
use shape_evade::parallel::available_threads;
use shape_evade::synth::{render, sample_corpus, write_corpus, CorpusSpec, ImageFormat};

fn verdict(criterion: u32, title: &str, pass: bool, detail: &str) {
    let line = format!(
        "acceptance {criterion:>2} {:<4} {title}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {criterion} ({title}) failed: {detail}");
}

fn checkpoint() -> DetectorWeights {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/detector.bin");
    DetectorWeights::load(path).expect("committed detector checkpoint")
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn first_pose_items(subjects: usize) -> Vec<EvalItem> {
    let spec = CorpusSpec {
        subjects,
        poses: 1,
        ..CorpusSpec::default()
    };
    EvalItem::from_entries(&sample_corpus(&spec).unwrap())
}

fn increase(report: &EvalReport, row: &str, label: &str) -> f64 {
    report.row(row).and_then(|r| r.column(label)).map(|c| c.percent_increase).unwrap_or(f64::NAN)
}

#[test]
fn c01_gradient_fidelity() {
    // detector: the trained network on a rendered corpus image
    let weights = checkpoint();
    let entry = &sample_corpus(&CorpusSpec { subjects: 1, poses: 1, ..CorpusSpec::default() }).unwrap()[0];
    let (img, _) = render(&entry.subject).unwrap();
    let (w, h) = (img.width(), img.height());
    let input = img.to_f64();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let target = HeatmapSet::from_values(w, h, (0..13 * w * h).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let grad = input_gradient_raw(&weights, w, h, &input, &target).unwrap();
    let eps = 1e-5;
    let mut det_worst = 0f64;
    let det_probes = 200;
    for _ in 0..det_probes {
        let k = rng.gen_range(0..w * h);
        let (mut plus, mut minus) = (input.clone(), input.clone());
        plus[k] += eps;
        minus[k] -= eps;
        let op = forward_raw(&weights, w, h, &plus).unwrap();
        let om = forward_raw(&weights, w, h, &minus).unwrap();
        let diff: f64 = op
            .values()
            .iter()
            .zip(om.values())
            .zip(target.values())
            .map(|((a, b), t)| (a - b) * (a + b - 2.0 * t))
            .sum();
        let fd = diff / op.values().len() as f64 / (2.0 * eps);
        det_worst = det_worst.max(rel_err(fd, grad.values[k], 1e-9));
    }

    // fitter: full objective gradient at random parameter points
    let subject = &entry.subject;
    let config = FitConfig::default();
    let mut fit_worst = 0f64;
    let fit_probes = 50;
    for _ in 0..fit_probes {
        let mut p = BodyParams::default();
        p.shape.beta = std::array::from_fn(|_| rng.gen_range(-2.0..2.0));
        for v in p.pose.theta.iter_mut() {
            *v = std::array::from_fn(|_| rng.gen_range(-0.5..0.5));
        }
        p.pose.global_rotation = std::array::from_fn(|_| rng.gen_range(-0.2..0.2));
        p.pose.global_translation = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(235.0..265.0)];
        let mut kp = subject.keypoints().unwrap();
        for q in kp.points.iter_mut() {
            q.location = [q.location[0] + rng.gen_range(-3.0..3.0), q.location[1] + rng.gen_range(-3.0..3.0)];
            q.confidence = rng.gen_range(0.4..1.0);
        }
        let (_, g) = objective_gradient(&p, &subject.camera, &kp, &config).unwrap();
        let v = p.to_vector();
        for k in 0..NUM_PARAMS {
            let h = 1e-6;
            let (mut a, mut b) = (v, v);
            a[k] += h;
            b[k] -= h;
            let fa = objective(&BodyParams::from_vector(&a), &subject.camera, &kp, &config).unwrap().total;
            let fb = objective(&BodyParams::from_vector(&b), &subject.camera, &kp, &config).unwrap().total;
            fit_worst = fit_worst.max(rel_err((fa - fb) / (2.0 * h), g[k], 1e-6));
        }
    }
    verdict(
        1,
        "gradient fidelity",
        det_worst <= 1e-4 && fit_worst <= 1e-4,
        &format!(
            "detector {det_probes} probes max rel-err {det_worst:.2e}; fitter {fit_probes} points x {NUM_PARAMS} params max rel-err {fit_worst:.2e}"
        ),
    );
}

#[test]
fn c02_fit_round_trip() {
    let items = first_pose_items(100);
    let config = FitConfig::default();
    let mut dbeta: Vec<Vec<f64>> = vec![Vec::new(); NUM_BETAS];
    let mut errors = Vec::new();
    for it in &items {
        let kp = it.subject.keypoints().unwrap();
        let r = fit(&kp, &it.subject.camera, &config, None).unwrap();
        for (c, d) in dbeta.iter_mut().enumerate() {
            d.push((r.params.shape.beta[c] - it.subject.beta_gt.beta[c]).abs());
        }
        errors.push(shape_error(&r.params.shape, &it.subject.beta_gt).unwrap());
    }
    let medians: Vec<f64> = dbeta.into_iter().map(median).collect();
    let worst = medians.iter().cloned().fold(0.0, f64::max);
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let med = median(errors);
    verdict(
        2,
        "fit round trip",
        worst <= 0.15 && med <= 2.0 && mean > 0.0,
        &format!(
            "{} subjects; median |dbeta| per component {:?} (max {worst:.3}); median shape error {med:.3} cm; mean {mean:.3} cm",
            items.len(),
            medians.iter().map(|m| (m * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    );
}

struct AttackRun {
    tried: usize,
    removed: usize,
    others_kept: usize,
    both: usize,
    local_cheaper: usize,
    locality_violations: usize,
    local_runs: usize,
}

/// One local and one global removal per subject; the attacked keypoint
/// cycles through all 13.
fn attack_run() -> &'static AttackRun {
    static RUN: std::sync::OnceLock<AttackRun> = std::sync::OnceLock::new();
    RUN.get_or_init(|| {
        let weights = checkpoint();
        let items = first_pose_items(100);
        let mut run = AttackRun {
            tried: 0,
            removed: 0,
            others_kept: 0,
            both: 0,
            local_cheaper: 0,
            locality_violations: 0,
            local_runs: 0,
        };
        let detect = |img: &Image| -> KeypointSet { nms_keypoints(&forward(img, &weights).unwrap(), DEFAULT_DETECTION_THRESHOLD).unwrap() };
        for (i, it) in items.iter().enumerate() {
            let img = it.image().unwrap();
            let clean: KeypointSet = detect(&img);
            let k = Keypoint::ALL[i % Keypoint::ALL.len()];
            if !clean.get(k).detected {
                continue;
            }
            run.tried += 1;
            let local = AttackSpec {
                stop_on_success: true,
                ..AttackSpec::remove(k, AttackMode::Local)
            };
            let r = masked_iterative(&img, &weights, &clean, &local).unwrap();
            run.local_runs += 1;
            let mask = Mask::disks(img.width(), img.height(), &r.centres, local.radius);
            for y in 0..img.height() {
                for x in 0..img.width() {
                    if !mask.contains(x, y) && r.image().get(x, y).to_bits() != img.get(x, y).to_bits() {
                        run.locality_violations += 1;
                    }
                }
            }
            let adv = detect(r.image());
            let kept = Keypoint::ALL.iter().filter(|&&o| o != k).all(|&o| {
                let (a, b) = (adv.get(o), clean.get(o));
                let d = ((a.location[0] - b.location[0]).powi(2) + (a.location[1] - b.location[1]).powi(2)).sqrt();
                !b.detected || (a.detected && d <= 4.0)
            });
            run.removed += r.success as usize;
            run.others_kept += kept as usize;

            let global = AttackSpec {
                stop_on_success: true,
                ..AttackSpec::remove(k, AttackMode::Global)
            };
            let g = fgsm_global(&img, &weights, &global).unwrap();
            if let (Some(lr), Some(gr)) = (r.success_rmse, g.success_rmse) {
                run.both += 1;
                // budgets at the first iteration where the peak fell below threshold
                run.local_cheaper += (lr * lr < gr * gr) as usize;
            }
        }
        run
    })
}

#[test]
fn c03_local_removal_success() {
    let run = attack_run();
    let success = run.removed as f64 / run.tried as f64;
    let kept = run.others_kept as f64 / run.tried as f64;
    verdict(
        3,
        "local removal success",
        success >= 0.8 && kept >= 0.9,
        &format!(
            "removed on {}/{} subjects ({:.1}%); other keypoints kept within 4 px on {}/{} ({:.1}%)",
            run.removed,
            run.tried,
            100.0 * success,
            run.others_kept,
            run.tried,
            100.0 * kept
        ),
    );
}

#[test]
fn c04_local_beats_global_budget() {
    let run = attack_run();
    let rate = run.local_cheaper as f64 / run.both.max(1) as f64;
    verdict(
        4,
        "local budget below global",
        run.both > 0 && rate >= 0.9,
        &format!(
            "local MSE at success below global on {}/{} subjects where both succeed ({:.1}%)",
            run.local_cheaper,
            run.both,
            100.0 * rate
        ),
    );
}

#[test]
fn c05_locality() {
    let run = attack_run();
    verdict(
        5,
        "locality",
        run.local_runs > 0 && run.locality_violations == 0,
        &format!("{} changed pixels outside the mask over {} local attacks", run.locality_violations, run.local_runs),
    );
}

#[test]
fn c06_synthetic_removal_ordering() {
    let items = EvalItem::from_entries(&sample_corpus(&CorpusSpec::default()).unwrap());
    let report = run_synthetic_removal(&items, &FitConfig::default(), available_threads()).unwrap();
    let mean = |a: &str, b: &str| 0.5 * (increase(&report, "synthetic_removal", a) + increase(&report, "synthetic_removal", b));
    let hip = mean("right_hip", "left_hip");
    let shoulder = mean("right_shoulder", "left_shoulder");
    let wrist = mean("right_wrist", "left_wrist");
    verdict(
        6,
        "synthetic removal ordering",
        hip > shoulder && shoulder > wrist,
        &format!(
            "{} entries, baseline {:.3} cm; hip {hip:+.2}% > shoulder {shoulder:+.2}% > wrist {wrist:+.2}%",
            report.entries, report.baseline_cm
        ),
    );
}

#[test]
fn c07_synthetic_flip_ordering() {
    let items = EvalItem::from_entries(&sample_corpus(&CorpusSpec::default()).unwrap());
    let report = run_synthetic_flip(&items, &FitConfig::default(), &default_flip_pairs(), available_threads()).unwrap();
    let inc = |l: &str| increase(&report, "synthetic_flip", l);
    let head_hip = 0.5 * (inc("head_top<->right_hip") + inc("head_top<->left_hip"));
    let elbow_knee = 0.5 * (inc("right_elbow<->right_knee") + inc("left_elbow<->left_knee"));
    let knees = inc("left_knee<->right_knee");
    verdict(
        7,
        "synthetic flip ordering",
        head_hip > elbow_knee && elbow_knee > knees && knees <= 5.0,
        &format!(
            "{} entries, baseline {:.3} cm; head<->hip {head_hip:+.2}%, elbow<->knee {elbow_knee:+.2}%, knee L<->R {knees:+.2}% (limit 5%)",
            report.entries, report.baseline_cm
        ),
    );
}

#[test]
fn c08_adversarial_rows() {
    let weights = checkpoint();
    let items = first_pose_items(ADVERSARIAL_SUBJECTS);
    let report = run_adversarial(
        &items,
        &weights,
        &default_adversarial_specs(),
        &FitConfig::default(),
        DEFAULT_DETECTION_THRESHOLD,
        available_threads(),
    )
    .unwrap();
    let (removal, flip) = (report.row("adversarial_removal"), report.row("adversarial_flip"));
    let csv = report.to_csv();
    let both_rows = removal.is_some()
        && flip.is_some()
        && csv.lines().any(|l| l.starts_with("adversarial_removal,"))
        && csv.lines().any(|l| l.starts_with("adversarial_flip,"));
    let r = removal.map(|r| r.average_increase).unwrap_or(f64::NAN);
    let f = flip.map(|r| r.average_increase).unwrap_or(f64::NAN);
    verdict(
        8,
        "adversarial removal vs flip",
        both_rows && r > 0.0 && r > f,
        &format!(
            "{} subjects, baseline {:.3} cm; removal {r:+.2}%, flip {f:+.2}%; both rows emitted: {both_rows}",
            report.entries, report.baseline_cm
        ),
    );
}

/// Adversarial evaluation costs roughly 20 attacks and 21 fits per entry,
/// so it runs on the first pose of a subset of subjects.
const ADVERSARIAL_SUBJECTS: usize = 30;

#[test]
fn c09_procrustes() {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let points = |rng: &mut ChaCha8Rng| -> Vec<Vector3<f64>> {
        (0..13)
            .map(|_| Vector3::new(rng.gen_range(-40.0..40.0), rng.gen_range(-90.0..90.0), rng.gen_range(-15.0..15.0)))
            .collect()
    };
    let mut copy_worst = 0f64;
    for _ in 0..100 {
        let p = points(&mut rng);
        let r = Rotation3::from_scaled_axis(Vector3::from_fn(|_, _| rng.gen_range(-3.0..3.0)));
        let s = rng.gen_range(0.2..5.0);
        let t = Vector3::from_fn(|_, _| rng.gen_range(-200.0..200.0));
        let q: Vec<_> = p.iter().map(|x| r * x * s + t).collect();
        copy_worst = copy_worst.max(procrustes_points(&p, &q).unwrap());
    }
    let mut oracle_worst = 0f64;
    for _ in 0..30 {
        let p = points(&mut rng);
        let q = points(&mut rng);
        let closed = procrustes_points(&p, &q).unwrap();
        oracle_worst = oracle_worst.max((closed - numerical_procrustes(&p, &q)).abs());
    }
    verdict(
        9,
        "procrustes",
        copy_worst <= 1e-9 && oracle_worst <= 1e-6,
        &format!("similarity copies max error {copy_worst:.2e} cm; max gap to numerical minimiser {oracle_worst:.2e} cm"),
    );
}

/// RMS residual after Levenberg-Marquardt over rotation (axis-angle),
/// log-scale and translation with finite-difference Jacobians, best of
/// several rotation starts.
fn numerical_procrustes(p: &[Vector3<f64>], q: &[Vector3<f64>]) -> f64 {
    let residuals = |x: &[f64; 7]| -> DVector<f64> {
        let r = Rotation3::from_scaled_axis(Vector3::new(x[0], x[1], x[2]));
        let s = x[3].exp();
        let t = Vector3::new(x[4], x[5], x[6]);
        DVector::from_iterator(3 * p.len(), p.iter().zip(q).flat_map(|(a, b)| {
            let d = r * a * s + t - b;
            [d.x, d.y, d.z]
        }))
    };
    let cost = |x: &[f64; 7]| residuals(x).norm_squared();
    let mut best = f64::INFINITY;
    for start in [[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 3.0], [1.8, 1.8, 1.8], [-1.8, 1.8, -1.8]] {
        let mut x = [start[0], start[1], start[2], 0.0, 0.0, 0.0, 0.0];
        let mut lambda = 1e-3;
        for _ in 0..500 {
            let r0 = residuals(&x);
            let mut jac = DMatrix::<f64>::zeros(r0.len(), 7);
            for k in 0..7 {
                let (mut a, mut b) = (x, x);
                a[k] += 1e-7;
                b[k] -= 1e-7;
                jac.set_column(k, &((residuals(&a) - residuals(&b)) / 2e-7));
            }
            let jtj = jac.transpose() * &jac;
            let jtr = jac.transpose() * &r0;
            let damped = &jtj + DMatrix::from_diagonal(&jtj.diagonal()) * lambda;
            let Some(step) = damped.lu().solve(&(-jtr)) else { break };
            let mut trial = x;
            for k in 0..7 {
                trial[k] += step[k];
            }
            if cost(&trial) < r0.norm_squared() {
                x = trial;
                lambda = (lambda * 0.3).max(1e-12);
                if step.norm() < 1e-13 {
                    break;
                }
            } else {
                lambda *= 10.0;
                if lambda > 1e8 {
                    break;
                }
            }
        }
        best = best.min((cost(&x) / p.len() as f64).sqrt());
    }
    best
}

#[test]
fn c10_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let spec = CorpusSpec {
        subjects: 3,
        poses: 2,
        ..CorpusSpec::default()
    };
    // gen: manifests and image bytes
    let read_corpus = |sub: &str| -> Vec<(String, Vec<u8>)> {
        let out = dir.path().join(sub);
        write_corpus(&spec, &out, ImageFormat::Float).unwrap();
        let mut files: Vec<_> = walk(&out).into_iter().map(|p| {
            let rel = p.strip_prefix(&out).unwrap().to_string_lossy().into_owned();
            (rel, std::fs::read(&p).unwrap())
        }).collect();
        files.sort();
        files
    };
    let gen_same = read_corpus("a") == read_corpus("b");

    // train: checkpoint bytes and loss log
    let samples = rendered_samples(&CorpusSpec { subjects: 4, poses: 1, ..spec }).unwrap();
    let cfg = TrainingConfig { epochs: 2, ..TrainingConfig::default() };
    let t1 = train(&samples, &cfg, "fp", |_, _| {}).unwrap();
    let t2 = train(&samples, &cfg, "fp", |_, _| {}).unwrap();
    let train_same = t1.0.to_bytes() == t2.0.to_bytes() && serde_json::to_string(&t1.1).unwrap() == serde_json::to_string(&t2.1).unwrap();

    // attack: adversarial image bits and the full result record
    let weights = checkpoint();
    let items = first_pose_items(2);
    let img = items[0].image().unwrap();
    let clean = nms_keypoints(&forward(&img, &weights).unwrap(), DEFAULT_DETECTION_THRESHOLD).unwrap();
    let spec_l = AttackSpec { max_iters: 60, ..AttackSpec::remove(Keypoint::RightHip, AttackMode::Local) };
    let a1 = masked_iterative(&img, &weights, &clean, &spec_l).unwrap();
    let a2 = masked_iterative(&img, &weights, &clean, &spec_l).unwrap();
    let bits = |r: &shape_evade::attacks::AttackResult| r.image().pixels().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let attack_same = bits(&a1) == bits(&a2) && serde_json::to_string(&a1).unwrap() == serde_json::to_string(&a2).unwrap();

    // eval: serialised reports, with different worker counts as well
    let specs = [
        AttackSpec { max_iters: 40, stop_on_success: true, ..AttackSpec::remove(Keypoint::LeftShoulder, AttackMode::Local) },
        AttackSpec { max_iters: 40, stop_on_success: true, ..AttackSpec::new(AttackKind::Flip { a: Keypoint::LeftKnee, b: Keypoint::RightKnee }, AttackMode::Local) },
    ];
    let cfg = FitConfig::default();
    let e1 = run_adversarial(&items, &weights, &specs, &cfg, DEFAULT_DETECTION_THRESHOLD, 1).unwrap();
    let e2 = run_adversarial(&items, &weights, &specs, &cfg, DEFAULT_DETECTION_THRESHOLD, 2).unwrap();
    let s1 = run_synthetic_removal(&items, &cfg, 1).unwrap();
    let s2 = run_synthetic_removal(&items, &cfg, 1).unwrap();
    let eval_same = serde_json::to_string(&e1).unwrap() == serde_json::to_string(&e2).unwrap()
        && e1.to_csv() == e2.to_csv()
        && serde_json::to_string(&s1).unwrap() == serde_json::to_string(&s2).unwrap();

    verdict(
        10,
        "determinism",
        gen_same && train_same && attack_same && eval_same,
        &format!("identical outputs: gen {gen_same}, train {train_same}, attack {attack_same}, eval {eval_same}"),
    );
}

fn walk(dir: &std::path::Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}
