use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_shape-evade"));
    c.env("SHAPE_EVADE_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn error_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr has a line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("stderr is not json: {text}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn checkpoint() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/detector.bin")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

/// Every file under `dir` except run manifests, with contents.
fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run.json" {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn gen_small(dir: &Path, count: &str) {
    ok(&["gen", "--seed", "42", "--count", count, "--poses", "1", "--out", s(dir)]);
}

#[test]
fn gen_is_deterministic_and_replayable() {
    let t = tempfile::tempdir().unwrap();
    let (a, b, c) = (t.path().join("a"), t.path().join("b"), t.path().join("c"));
    gen_small(&a, "3");
    gen_small(&b, "3");
    assert_eq!(tree(&a), tree(&b));
    assert_eq!(tree(&a).len(), 4);

    let manifest: Value = serde_json::from_slice(&std::fs::read(a.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen");
    assert_eq!(manifest["seeds"], serde_json::json!([42]));
    assert_eq!(manifest["job"]["spec"]["subjects"], 3);

    ok(&["replay", s(&a.join("run.json")), "--out", s(&c)]);
    assert_eq!(tree(&a), tree(&c));
}

#[test]
fn empty_corpus_is_fine() {
    let t = tempfile::tempdir().unwrap();
    let out = run(&["gen", "--count", "0", "--out", s(t.path())]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read(t.path().join("corpus.jsonl")).unwrap(), b"");
}

#[test]
fn non_empty_output_needs_force() {
    let t = tempfile::tempdir().unwrap();
    gen_small(t.path(), "1");
    let out = run(&["gen", "--count", "1", "--poses", "1", "--out", s(t.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"]["kind"], "output_exists");
    ok(&["gen", "--count", "1", "--poses", "1", "--out", s(t.path()), "--force"]);
}

#[test]
fn usage_errors_exit_two_with_json() {
    let out = run(&["attack", "--keypoint", "nose"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "usage");

    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    let t = tempfile::tempdir().unwrap();
    let out = bin()
        .env("SHAPE_EVADE_THREADS", "many")
        .args(["gen", "--count", "0", "--out", s(t.path())])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(error_json(&out)["error"]["message"].as_str().unwrap().contains("SHAPE_EVADE_THREADS"));
}

#[test]
fn domain_errors_exit_one_with_json() {
    let t = tempfile::tempdir().unwrap();
    let out = run(&["train", "--corpus", s(&t.path().join("missing")), "--out", s(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"]["kind"], "io");

    let corpus = t.path().join("c");
    gen_small(&corpus, "1");
    let out = run(&["fit", "--corpus", s(&corpus), "--entry", "nope", "--out", s(&t.path().join("f"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"]["kind"], "invalid_argument");

    let out = run(&[
        "fit", "--corpus", s(&corpus), "--entry", "s0000_p0", "--flip", "left_knee:left_knee", "--out",
        s(&t.path().join("g")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_then_flags() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"gen": {"subjects": 2, "poses": 2, "seed": 9}}"#).unwrap();
    let a = t.path().join("a");
    ok(&["--config", s(&cfg), "gen", "--count", "1", "--out", s(&a)]);
    let manifest: Value = serde_json::from_slice(&std::fs::read(a.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["job"]["spec"]["subjects"], 1);
    assert_eq!(manifest["job"]["spec"]["poses"], 2);
    assert_eq!(manifest["job"]["spec"]["seed"], 9);

    std::fs::write(&cfg, r#"{"gen": {"subject": 2}}"#).unwrap();
    let out = run(&["--config", s(&cfg), "gen", "--out", s(&t.path().join("b"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let corpus = t.path().join("c");
    gen_small(&corpus, "2");
    for name in ["a", "b"] {
        ok(&["train", "--corpus", s(&corpus), "--epochs", "1", "--out", s(&t.path().join(name))]);
    }
    assert_eq!(tree(&t.path().join("a")), tree(&t.path().join("b")));
    let log: Value = serde_json::from_slice(&std::fs::read(t.path().join("a/training_log.json")).unwrap()).unwrap();
    assert_eq!(log["epoch_losses"].as_array().unwrap().len(), 1);
}

fn read_f32(path: &Path) -> (usize, usize, Vec<f32>) {
    let img = shape_evade::imaging::load_image(path).unwrap();
    (img.width(), img.height(), img.pixels().to_vec())
}

#[test]
fn local_attack_stays_in_its_disk_and_repeats() {
    let t = tempfile::tempdir().unwrap();
    let corpus = t.path().join("c");
    gen_small(&corpus, "2");
    let attack = |name: &str| {
        let out = t.path().join(name);
        ok(&[
            "attack", "--corpus", s(&corpus), "--entry", "s0001_p0", "--checkpoint", s(&checkpoint()), "--mode", "local",
            "--keypoint", "right_hip", "--radius", "6", "--max-iters", "40", "--out", s(&out),
        ]);
        out
    };
    let (a, b) = (attack("a"), attack("b"));
    assert_eq!(tree(&a), tree(&b));

    let result: Value = serde_json::from_slice(&std::fs::read(a.join("attack.json")).unwrap()).unwrap();
    let centre = &result["result"]["centres"][0];
    let (cx, cy) = (centre[0].as_f64().unwrap(), centre[1].as_f64().unwrap());
    let (w, _, adv) = read_f32(&a.join("adversarial.f32"));
    let (_, _, orig) = read_f32(&corpus.join("images/s0001_p0.f32"));
    let mut changed = 0;
    for (i, (x, y)) in adv.iter().zip(&orig).enumerate() {
        if x != y {
            changed += 1;
            let (px, py) = ((i % w) as f64, (i / w) as f64);
            assert!((px - cx).powi(2) + (py - cy).powi(2) <= 36.0, "pixel {px},{py} outside the disk");
        }
    }
    assert!(changed > 0);
    assert_eq!(result["changed_pixels"], changed);
    let linf = result["result"]["final_stats"]["linf"].as_f64().unwrap();
    assert!(linf <= 0.035 + 1e-6);
}

#[test]
fn synthetic_eval_has_table_layout_and_repeats() {
    let t = tempfile::tempdir().unwrap();
    let corpus = t.path().join("c");
    gen_small(&corpus, "2");
    let eval = |name: &str, threads: &str| {
        let out = t.path().join(name);
        let o = bin()
            .env("SHAPE_EVADE_THREADS", threads)
            .args(["eval", "synthetic-removal", "--corpus", s(&corpus), "--out", s(&out)])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (eval("a", "1"), eval("b", "2"));
    assert_eq!(tree(&a), tree(&b));
    let csv = std::fs::read_to_string(a.join("report.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 1 + 1 + 13 + 1);
    assert_eq!(header[1], "baseline");
    assert_eq!(header[2], "right_ankle");
    assert_eq!(header[14], "head_top");
    assert_eq!(header[15], "average");
    let txt = std::fs::read_to_string(a.join("report.txt")).unwrap();
    assert!(txt.contains("not comparable"));

    let flip = t.path().join("f");
    ok(&[
        "eval", "synthetic-flip", "--corpus", s(&corpus), "--pairs", "head_top:left_hip,left_knee:right_knee", "--out",
        s(&flip),
    ]);
    let report: Value = serde_json::from_slice(&std::fs::read(flip.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"][0]["columns"].as_array().unwrap().len(), 2);
    let base_rem: Value = serde_json::from_slice(&std::fs::read(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["baseline_cm"], base_rem["baseline_cm"]);
}

#[test]
fn adversarial_eval_needs_a_checkpoint() {
    let t = tempfile::tempdir().unwrap();
    let out = run(&["eval", "adversarial", "--corpus", s(t.path()), "--out", s(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fit_reports_shape_error() {
    let t = tempfile::tempdir().unwrap();
    let corpus = t.path().join("c");
    gen_small(&corpus, "1");
    let out = t.path().join("f");
    ok(&["fit", "--corpus", s(&corpus), "--entry", "s0000_p0", "--remove", "right_hip", "--out", s(&out)]);
    let fit: Value = serde_json::from_slice(&std::fs::read(out.join("fit.json")).unwrap()).unwrap();
    assert!(fit["shape_error_cm"].as_f64().unwrap() >= 0.0);
    assert_eq!(fit["keypoints"]["points"][2]["detected"], false);
}

#[test]
fn fig8_matches_golden() {
    let t = tempfile::tempdir().unwrap();
    ok(&[
        "plot", "fig8", s(&fixture("local.csv")), s(&fixture("global.csv")), "--out", s(t.path()),
    ]);
    let svg = std::fs::read_to_string(t.path().join("fig8.svg")).unwrap();
    let golden = std::fs::read_to_string(fixture("fig8.golden.svg")).unwrap();
    assert_eq!(svg, golden);
}

#[test]
fn fig6_from_reports() {
    let t = tempfile::tempdir().unwrap();
    let corpus = t.path().join("c");
    gen_small(&corpus, "1");
    let flip = t.path().join("f");
    ok(&["eval", "synthetic-flip", "--corpus", s(&corpus), "--out", s(&flip)]);
    let plot = t.path().join("p");
    ok(&["plot", "fig6", s(&flip.join("report.json")), "--out", s(&plot)]);
    let svg = std::fs::read_to_string(plot.join("fig6.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(svg.contains("head_top&lt;-&gt;right_hip"));
}
