//! End-to-end tests that drive the compiled `sptx` binary through its
//! documented workflows: dataset synthesis, training, rendering, evaluation,
//! and checkpoint inspection, including exit codes for usage errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;

use sptx::img::Image;
use sptx::metrics;

fn sptx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sptx"))
        .args(args)
        .output()
        .expect("failed to launch sptx")
}

fn run_ok(args: &[&str]) -> String {
    let out = sptx(args);
    assert!(
        out.status.success(),
        "sptx {args:?} failed with {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("stdout not utf-8")
}

fn exit_code(args: &[&str]) -> (i32, String) {
    let out = sptx(args);
    (
        out.status.code().expect("no exit code"),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("non-utf8 temp path")
}

/// Parse the last stdout line as JSON (commands append a summary line).
fn last_json_line(stdout: &str) -> Value {
    let line = stdout.lines().last().expect("empty stdout");
    serde_json::from_str(line).expect("last stdout line is not JSON")
}

fn synth_quad(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    run_ok(&["synth", "textured-quad", "--out", path_str(&data), "--seed", "0"]);
    data
}

/// One shared dataset plus a 600-iteration training run. Six hundred
/// iterations passes the default texture start (iteration 500), so the
/// checkpoint carries a populated texture pool for render/eval/inspect tests
/// without each test paying for its own training run.
struct Trained {
    _dir: TempDir,
    data: PathBuf,
    run: PathBuf,
}

static TRAINED: OnceLock<Trained> = OnceLock::new();

fn trained() -> &'static Trained {
    TRAINED.get_or_init(|| {
        let dir = TempDir::new().expect("tempdir");
        let data = synth_quad(dir.path());
        let run = dir.path().join("run");
        run_ok(&[
            "train",
            path_str(&data),
            "--out",
            path_str(&run),
            "--iters",
            "600",
            "--seed",
            "4",
        ]);
        Trained { _dir: dir, data, run }
    })
}

// ---------------------------------------------------------------------------
// Argument surface

#[test]
fn help_lists_every_training_flag() {
    let top = run_ok(&["--help"]);
    for sub in ["synth", "train", "render", "eval", "inspect"] {
        assert!(top.contains(sub), "top-level help is missing `{sub}`");
    }
    let help = run_ok(&["train", "--help"]);
    for flag in [
        "--iters",
        "--lambda-ssim",
        "--lambda-texture",
        "--lambda-opacity",
        "--tau-ds",
        "--tau-tr-start",
        "--tau-tr-end",
        "--quantile",
        "--point-budget",
        "--seed",
        "--out",
        "--no-adapt",
    ] {
        assert!(help.contains(flag), "train help is missing `{flag}`");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let (code, _) = exit_code(&["train", "data", "--out", "x", "--frobnicate"]);
    assert_eq!(code, 2);
}

#[test]
fn unknown_scene_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("d");
    let (code, stderr) = exit_code(&["synth", "no-such-scene", "--out", path_str(&out)]);
    assert_eq!(code, 2);
    assert!(
        stderr.contains("usage error"),
        "stderr should flag the bad scene name: {stderr}"
    );
}

#[test]
fn render_extension_must_be_png_or_pfm() {
    let (code, stderr) = exit_code(&["render", "ck.sptx", "cams.json", "--view", "0", "--out", "x.jpg"]);
    assert_eq!(code, 2);
    assert!(stderr.contains(".png or .pfm"), "stderr: {stderr}");
}

// ---------------------------------------------------------------------------
// Synth

#[test]
fn synth_writes_the_documented_layout() {
    let dir = TempDir::new().unwrap();
    let data = synth_quad(dir.path());
    assert!(data.join("cameras.json").is_file());
    let images: Vec<_> = fs::read_dir(data.join("images"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(images.len(), 8);
    assert!(images.contains(&"view_000.pfm".to_string()));
    assert!(images.contains(&"view_007.pfm".to_string()));
}

// ---------------------------------------------------------------------------
// Train

#[test]
fn zero_iteration_train_emits_the_initialization() {
    let dir = TempDir::new().unwrap();
    let data = synth_quad(dir.path());
    let run = dir.path().join("run");
    run_ok(&["train", path_str(&data), "--out", path_str(&run), "--iters", "0"]);

    let summary = last_json_line(&run_ok(&[
        "inspect",
        path_str(&run.join("checkpoint.sptx")),
        "--json",
    ]));
    assert_eq!(summary["iteration"], 0);
    assert_eq!(summary["n_texels"], 0);
    assert!(summary["n_prims"].as_u64().unwrap() > 0);

    let metrics_log = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics_log.lines().count(), 1, "one record for the initial state");
    let mutations_log = fs::read_to_string(run.join("mutations.jsonl")).unwrap();
    assert!(mutations_log.is_empty(), "no mutations without optimization steps");
}

#[test]
fn training_is_deterministic_across_processes() {
    let dir = TempDir::new().unwrap();
    let data = synth_quad(dir.path());
    let (run_a, run_b) = (dir.path().join("a"), dir.path().join("b"));
    for run in [&run_a, &run_b] {
        run_ok(&[
            "train",
            path_str(&data),
            "--out",
            path_str(run),
            "--iters",
            "30",
            "--seed",
            "3",
        ]);
    }
    let ck_a = fs::read(run_a.join("checkpoint.sptx")).unwrap();
    let ck_b = fs::read(run_b.join("checkpoint.sptx")).unwrap();
    assert_eq!(ck_a, ck_b, "same seed must reproduce the checkpoint byte for byte");
    assert_eq!(
        fs::read_to_string(run_a.join("metrics.jsonl")).unwrap(),
        fs::read_to_string(run_b.join("metrics.jsonl")).unwrap(),
        "same seed must reproduce the metrics log"
    );
}

// ---------------------------------------------------------------------------
// Render

#[test]
fn png_and_pfm_renders_agree_up_to_quantization() {
    let t = trained();
    let ck = t.run.join("checkpoint.sptx");
    let png = t.run.join("view0.png");
    let pfm = t.run.join("view0.pfm");
    run_ok(&["render", path_str(&ck), path_str(&t.data), "--view", "0", "--out", path_str(&png)]);
    run_ok(&["render", path_str(&ck), path_str(&t.data), "--view", "0", "--out", path_str(&pfm)]);
    let a = Image::load(&png).unwrap();
    let b = Image::load(&pfm).unwrap();
    let tol = 0.5 / 255.0 + 1e-9; // 8-bit rounding error bound
    assert!(
        a.max_abs_diff(&b) <= tol,
        "png/pfm disagree beyond quantization: {}",
        a.max_abs_diff(&b)
    );
}

#[test]
fn unknown_camera_id_is_a_usage_error() {
    let t = trained();
    let ck = t.run.join("checkpoint.sptx");
    let out = t.run.join("nope.png");
    let (code, stderr) = exit_code(&[
        "render",
        path_str(&ck),
        path_str(&t.data),
        "--view",
        "99",
        "--out",
        path_str(&out),
    ]);
    assert_eq!(code, 2);
    assert!(stderr.contains("available"), "stderr should list valid ids: {stderr}");
}

// ---------------------------------------------------------------------------
// Eval

#[test]
fn eval_psnr_matches_an_independent_render() {
    let t = trained();
    let ck = t.run.join("checkpoint.sptx");
    let summary = last_json_line(&run_ok(&["eval", path_str(&ck), path_str(&t.data)]));
    assert_eq!(summary["split"], "test");
    assert_eq!(summary["n_views"], 1, "textured-quad holds out exactly view 0");
    assert!(summary["lpips"].is_null());
    assert!(summary["note"].as_str().unwrap().contains("lpips"));

    // Re-render the held-out view through the CLI and score it ourselves.
    let pfm = t.run.join("eval_check.pfm");
    run_ok(&["render", path_str(&ck), path_str(&t.data), "--view", "0", "--out", path_str(&pfm)]);
    let rendered = Image::load(&pfm).unwrap();
    let reference = Image::load(&t.data.join("images/view_000.pfm")).unwrap();
    let expected = metrics::psnr(&rendered, &reference);
    let got = summary["psnr"].as_f64().unwrap();
    assert!(
        (got - expected).abs() < 1e-3,
        "eval psnr {got} vs independently computed {expected}"
    );
}

#[test]
fn eval_fails_cleanly_on_an_empty_split() {
    let dir = TempDir::new().unwrap();
    let data = synth_quad(dir.path());
    let run = dir.path().join("run");
    run_ok(&["train", path_str(&data), "--out", path_str(&run), "--iters", "0"]);

    // Rewrite the split so every view is a training view.
    let cams_path = data.join("cameras.json");
    let mut cams: Value = serde_json::from_str(&fs::read_to_string(&cams_path).unwrap()).unwrap();
    let n = cams["cameras"].as_array().unwrap().len();
    cams["train"] = Value::from((0..n).collect::<Vec<_>>());
    cams["test"] = Value::from(Vec::<usize>::new());
    fs::write(&cams_path, serde_json::to_string_pretty(&cams).unwrap()).unwrap();

    let ck = run.join("checkpoint.sptx");
    let (code, stderr) = exit_code(&["eval", path_str(&ck), path_str(&data)]);
    assert_eq!(code, 1);
    assert!(stderr.contains("empty"), "stderr: {stderr}");
}

// ---------------------------------------------------------------------------
// Inspect

#[test]
fn inspect_histograms_add_up() {
    let t = trained();
    let stdout = run_ok(&["inspect", path_str(&t.run.join("checkpoint.sptx")), "--json"]);
    assert_eq!(stdout.lines().count(), 1, "--json emits exactly the summary line");
    let summary = last_json_line(&stdout);

    let n_prims = summary["n_prims"].as_u64().unwrap();
    let n_texels = summary["n_texels"].as_u64().unwrap();
    assert!(n_texels > 0, "600 iterations should have allocated textures");

    let exponent_total: u64 = summary["exponents"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["count"].as_u64().unwrap())
        .sum();
    assert_eq!(exponent_total, n_prims, "every primitive appears in the exponent histogram");

    let texel_total: u64 = summary["resolutions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["texels"].as_u64().unwrap())
        .sum();
    assert_eq!(texel_total, n_texels, "resolution histogram accounts for every texel");

    let textured: u64 = summary["resolutions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["count"].as_u64().unwrap())
        .sum();
    assert_eq!(textured, summary["textured"].as_u64().unwrap());

    // The human-readable layout keeps the same trailing summary line.
    let human = run_ok(&["inspect", path_str(&t.run.join("checkpoint.sptx"))]);
    assert!(human.lines().count() > 1);
    assert_eq!(last_json_line(&human), summary);
}
