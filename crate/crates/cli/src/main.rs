//! Command-line frontend for the textured-surfel trainer.
//!
//! Subcommands: `synth` writes a synthetic multi-view dataset, `train` fits a
//! scene and writes a checkpoint plus JSON-lines logs, `render` produces an
//! image from a checkpoint, `eval` reports metrics as JSON, and `inspect`
//! summarizes a checkpoint's texture layout. Exit codes: 0 on success, 1 on
//! runtime failure, 2 on usage errors (including unknown scene or camera
//! names). Every command is deterministic given `--seed`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use sptx::img::Image;
use sptx::metrics;
use sptx::renderer;
use sptx::scene_io::{
    load_cameras, load_checkpoint, load_dataset, make_synthetic, save_checkpoint, write_dataset,
    SyntheticSpec,
};
use sptx::trainer::{parameter_count, train, TrainConfig};

#[derive(Parser)]
#[command(name = "sptx", version, about = "Train, render, and inspect textured surfel scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-view dataset to a directory
    Synth(SynthArgs),
    /// Fit a scene to a dataset; writes checkpoint.sptx, metrics.jsonl, mutations.jsonl
    Train(TrainArgs),
    /// Render one camera view of a checkpoint to a PNG or PFM file
    Render(RenderArgs),
    /// Report PSNR/SSIM and parameter counts for a checkpoint as JSON
    Eval(EvalArgs),
    /// Summarize a checkpoint: counts plus exponent and resolution histograms
    Inspect(InspectArgs),
}

#[derive(clap::Args)]
struct SynthArgs {
    /// Scene name: textured-quad, two-quads-occlusion, half-flat-half-noise, box-room
    scene: String,
    /// Directory to create (cameras.json + images/)
    #[arg(long)]
    out: PathBuf,
    /// Generator seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Dataset directory (cameras.json + images/)
    data: PathBuf,
    /// Output directory for checkpoint.sptx, metrics.jsonl, mutations.jsonl
    #[arg(long)]
    out: PathBuf,
    /// Optimization iterations
    #[arg(long, default_value_t = 25_000)]
    iters: u64,
    /// SSIM weight in the image loss
    #[arg(long, default_value_t = 0.2)]
    lambda_ssim: f64,
    /// Texture sparsity weight
    #[arg(long, default_value_t = 1e-5)]
    lambda_texture: f64,
    /// Opacity regularizer weight
    #[arg(long, default_value_t = 0.01)]
    lambda_opacity: f64,
    /// Downscale threshold on the low-pass texture error
    #[arg(long, default_value_t = 0.01)]
    tau_ds: f64,
    /// Split resolution threshold at iteration 0
    #[arg(long, default_value_t = 64.0)]
    tau_tr_start: f64,
    /// Split resolution threshold after the ramp
    #[arg(long, default_value_t = 32.0)]
    tau_tr_end: f64,
    /// Error-rank cutoff for upscaling/splitting (0.9 = top decile)
    #[arg(long, default_value_t = 0.9)]
    quantile: f64,
    /// Hard cap on the primitive count; splits that would exceed it are skipped
    #[arg(long)]
    point_budget: Option<usize>,
    /// Seed for initialization and view shuffling
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disable texel-size adaptation (textures stay at the floor exponent)
    #[arg(long)]
    no_adapt: bool,
}

impl TrainArgs {
    fn to_config(&self) -> TrainConfig {
        let mut cfg = TrainConfig {
            iters: self.iters,
            lambda_ssim: self.lambda_ssim,
            lambda_texture: self.lambda_texture,
            lambda_opacity: self.lambda_opacity,
            point_budget: self.point_budget,
            adapt_enabled: !self.no_adapt,
            seed: self.seed,
            ..TrainConfig::default()
        };
        cfg.adaptation.tau_ds = self.tau_ds;
        cfg.adaptation.tau_tr_start = self.tau_tr_start;
        cfg.adaptation.tau_tr_end = self.tau_tr_end;
        cfg.adaptation.quantile = self.quantile;
        cfg.adapt_until = self.iters;
        cfg
    }
}

#[derive(clap::Args)]
struct RenderArgs {
    /// Checkpoint file (.sptx)
    checkpoint: PathBuf,
    /// cameras.json file, or a dataset directory containing one
    cameras: PathBuf,
    /// Camera id (the `id` field in cameras.json)
    #[arg(long)]
    view: u64,
    /// Output image path; format chosen by extension (.png or .pfm)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
    All,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Checkpoint file (.sptx)
    checkpoint: PathBuf,
    /// Dataset directory with reference images
    data: PathBuf,
    /// Which views to evaluate
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
}

#[derive(clap::Args)]
struct InspectArgs {
    /// Checkpoint file (.sptx)
    checkpoint: PathBuf,
    /// Print only the machine-readable JSON summary
    #[arg(long)]
    json: bool,
}

/// Failures after argument parsing: usage errors exit 2, runtime errors 1.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<sptx::Error> for Failure {
    fn from(e: sptx::Error) -> Failure {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Failure {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Failure {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<(), Failure> {
    let spec: SyntheticSpec = a.scene.parse().map_err(|e: sptx::Error| Failure::Usage(e.to_string()))?;
    let (dataset, _) = make_synthetic(spec, a.seed);
    write_dataset(&dataset, &a.out)?;
    println!(
        "wrote {}: {} cameras ({} train / {} test), {} seed points",
        a.out.display(),
        dataset.cameras.len(),
        dataset.train.len(),
        dataset.test.len(),
        dataset.points.len()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let dataset = load_dataset(&a.data)?;
    let cfg = a.to_config();
    let t0 = Instant::now();
    let report = train(&dataset, &cfg)?;
    let elapsed = t0.elapsed().as_secs_f64();

    fs::create_dir_all(&a.out)?;
    let ck_path = a.out.join("checkpoint.sptx");
    save_checkpoint(&report.checkpoint, &ck_path)?;

    let mut mf = BufWriter::new(fs::File::create(a.out.join("metrics.jsonl"))?);
    for m in &report.metrics {
        writeln!(mf, "{}", serde_json::to_string(m)?)?;
    }
    mf.flush()?;
    let mut uf = BufWriter::new(fs::File::create(a.out.join("mutations.jsonl"))?);
    for m in &report.mutations {
        writeln!(uf, "{}", serde_json::to_string(m)?)?;
    }
    uf.flush()?;

    let scene = report.scene();
    let (n_prims, n_texels, n_params) = parameter_count(scene);
    println!(
        "trained {} iterations in {:.1}s ({} mutations logged)",
        cfg.iters,
        elapsed,
        report.mutations.len()
    );
    println!("final: {n_prims} primitives, {n_texels} texels, {n_params} parameters");
    if let Some(p) = report.final_psnr_test() {
        println!("test-view psnr: {p:.3} dB");
    }
    println!("wrote {}", ck_path.display());
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<(), Failure> {
    match a.out.extension().and_then(|e| e.to_str()) {
        Some("png") | Some("pfm") => {}
        _ => {
            return Err(Failure::Usage(format!(
                "output {} must end in .png or .pfm",
                a.out.display()
            )))
        }
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    let cams = load_cameras(&a.cameras)?;
    let cam = cams
        .iter()
        .find(|(id, _)| *id == a.view)
        .map(|(_, c)| c)
        .ok_or_else(|| {
            let ids: Vec<String> = cams.iter().map(|(id, _)| id.to_string()).collect();
            Failure::Usage(format!(
                "unknown camera id {}; available: {}",
                a.view,
                ids.join(", ")
            ))
        })?;
    let out = renderer::render(&ck.scene, cam);
    out.image.save(&a.out)?;
    println!("wrote {} ({}x{})", a.out.display(), cam.width, cam.height);
    Ok(())
}

/// Per-view PSNR with the infinite (identical-image) case capped at 99 dB.
fn capped_psnr(a: &Image, b: &Image) -> f64 {
    let p = metrics::psnr(a, b);
    if p.is_finite() {
        p.min(99.0)
    } else {
        99.0
    }
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let dataset = load_dataset(&a.data)?;
    let (indices, label): (Vec<usize>, &str) = match a.split {
        Split::Train => (dataset.train.clone(), "train"),
        Split::Test => (dataset.test.clone(), "test"),
        Split::All => ((0..dataset.cameras.len()).collect(), "all"),
    };
    if indices.is_empty() {
        return Err(Failure::Runtime(format!("{label} split is empty")));
    }

    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for &i in &indices {
        let out = renderer::render(&ck.scene, &dataset.cameras[i]);
        psnr_sum += capped_psnr(&out.image, &dataset.images[i]);
        ssim_sum += metrics::ssim(&out.image, &dataset.images[i]);
    }
    let n = indices.len() as f64;
    let (n_prims, n_texels, n_params) = parameter_count(&ck.scene);
    let summary = json!({
        "psnr": psnr_sum / n,
        "ssim": ssim_sum / n,
        "lpips": null,
        "note": "lpips requires an external model and is not computed",
        "split": label,
        "n_views": indices.len(),
        "n_prims": n_prims,
        "n_texels": n_texels,
        "n_params": n_params,
    });
    println!("{summary}");
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<(), Failure> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let scene = &ck.scene;
    let (n_prims, n_texels, n_params) = parameter_count(scene);

    let mut exponents: BTreeMap<u32, usize> = BTreeMap::new();
    for p in &scene.prims {
        *exponents.entry(p.t2p_exponent).or_default() += 1;
    }
    // Resolution histogram over textured primitives: (w, h) -> (count, texels).
    let mut resolutions: BTreeMap<(u32, u32), (usize, usize)> = BTreeMap::new();
    let mut textured = 0usize;
    for i in 0..scene.n_prims() {
        let entry = scene.textures.entry(i);
        if entry.res != (0, 0) {
            textured += 1;
            let slot = resolutions.entry(entry.res).or_insert((0, 0));
            slot.0 += 1;
            slot.1 += (entry.res.0 * entry.res.1) as usize;
        }
    }

    if !a.json {
        println!("iteration {}  seed {}", ck.iteration, ck.seed);
        println!(
            "primitives {n_prims}  textured {textured}  texels {n_texels}  parameters {n_params}"
        );
        println!("texel-to-pixel exponents:");
        for (e, count) in &exponents {
            println!("  2^{e:<2}  x {count}");
        }
        if resolutions.is_empty() {
            println!("no texture grids allocated");
        } else {
            println!("texture resolutions:");
            for ((w, h), (count, texels)) in &resolutions {
                println!("  {w}x{h}  x {count}  ({texels} texels)");
            }
        }
    }

    let summary = json!({
        "iteration": ck.iteration,
        "seed": ck.seed,
        "n_prims": n_prims,
        "n_texels": n_texels,
        "n_params": n_params,
        "textured": textured,
        "exponents": exponents
            .iter()
            .map(|(e, count)| json!({"e": e, "count": count}))
            .collect::<Vec<_>>(),
        "resolutions": resolutions
            .iter()
            .map(|((w, h), (count, texels))| json!({"res": [w, h], "count": count, "texels": texels}))
            .collect::<Vec<_>>(),
    });
    println!("{summary}");
    Ok(())
}
