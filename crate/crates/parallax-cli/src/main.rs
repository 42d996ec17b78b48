//! Command-line front end: data conversion, refocusing, view selection,
//! gradient checks, toy training runs, and metric evaluation.
//!
//! Exit codes: 0 success, 1 check failure (a gradient check above tolerance,
//! a diverged training run), 2 usage or input error. A `key=value` config
//! file may supply any long flag; flags given on the command line win.

mod grids;
mod manifest;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use manifest::RunManifest;
use parallax::adapter::{
    adapter_forward_view, AdapterMode, AdapterNodes, AdapterParams, Representation, TokenSet,
};
use parallax::encoder::train::{train_toy, TrainOptions};
use parallax::encoder::{EncoderConfig, EncoderError, HeadKind};
use parallax::lightfield::{load_lfr, select_views, LightField, SelectionStrategy, ViewCoord};
use parallax::metrics::{format_report, mae, ConfusionMatrix};
use parallax::refocus::{build_stack, export_stack, sharpness};
use parallax::tensor::{grad_check, Tensor};
use parallax::seeds;
use rand::Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "parallax", version, about = "Light-field toolkit")]
struct Cli {
    /// key=value file supplying defaults for any long flag
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Write a JSON run manifest to this path (commands with --out always
    /// write one next to their outputs)
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a focal stack from a light field
    Refocus(RefocusArgs),
    /// Print the view coordinates chosen by a selection strategy
    Select(SelectArgs),
    /// Finite-difference check of the adapter's gradients
    Gradcheck(GradcheckArgs),
    /// Train adapters and head on the synthetic view-disparity task
    Train(TrainArgs),
    /// Score a prediction grid against ground truth
    Eval(EvalArgs),
    /// Generate a synthetic scene as an LFR file plus label grid
    Synth(SynthArgs),
    /// Export one sub-aperture view as a PNG image
    Export(ExportArgs),
}

#[derive(Args)]
struct RefocusArgs {
    /// Input LFR light field
    #[arg(long = "in")]
    input: PathBuf,
    /// Comma-separated slopes, strictly increasing (at most 12)
    #[arg(long, allow_hyphen_values = true)]
    slopes: String,
    /// Output directory for slices, sidecar, and manifest
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// corners-plus-center | sparse-max-divergence | min-angular-difference | fixed-five
    #[arg(long)]
    strategy: String,
    /// View count for the k-driven strategies
    #[arg(long, default_value_t = 5)]
    k: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Token width C
    #[arg(long = "c", default_value_t = 8)]
    channels: usize,
    /// Token count N
    #[arg(long = "n", default_value_t = 12)]
    tokens: usize,
    /// View count K
    #[arg(long = "k", default_value_t = 3)]
    views: usize,
    /// Batch size B
    #[arg(long = "b", default_value_t = 1)]
    batch: usize,
    /// shared | hard-per-view | consistency-only | difference-only
    #[arg(long, default_value = "shared")]
    mode: String,
    /// Maximum allowed relative error
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 17)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Only "synth" is available
    #[arg(long, default_value = "synth")]
    task: String,
    /// shared | hard-per-view | consistency-only | difference-only | none
    #[arg(long, default_value = "shared")]
    mode: String,
    #[arg(long, default_value = "min-angular-difference")]
    strategy: String,
    /// View count for k-driven strategies (forced strategies override it)
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 120)]
    steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    /// Model seed (weights)
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scene generator seed
    #[arg(long = "scene-seed", default_value_t = 1)]
    scene_seed: u64,
    /// segmentation | saliency
    #[arg(long, default_value = "segmentation")]
    head: String,
    #[arg(long, default_value_t = 3)]
    train_scenes: usize,
    #[arg(long, default_value_t = 2)]
    eval_scenes: usize,
    /// Output directory for report.csv, metrics.txt, and manifest
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Prediction grid (text rows)
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth grid (text rows)
    #[arg(long)]
    gt: PathBuf,
    /// miou | mae
    #[arg(long)]
    metric: String,
    /// Ground-truth label skipped during the miou tally
    #[arg(long = "ignore-label")]
    ignore_label: Option<u32>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// View coordinate "u,v"
    #[arg(long, default_value = "center")]
    view: String,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    /// Exit 1: a verification the command ran did not pass.
    Check(String),
    /// Exit 2: bad flags, unreadable input, module contract violations.
    Input(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let argv = match expand_config_args(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        // clap handles help/version (exit 0) and usage errors (exit 2)
        Err(e) => e.exit(),
    };
    let started = Instant::now();
    match run(&cli, &argv) {
        Ok(mut manifest) => {
            manifest.wall_clock_ms = started.elapsed().as_millis();
            if let Err(e) = manifest.write(cli.manifest.as_deref()) {
                eprintln!("error: {e:#}");
                return ExitCode::from(2);
            }
            ExitCode::SUCCESS
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Appends `--key value` pairs from the config file for flags not already on
/// the command line.
fn expand_config_args(mut argv: Vec<String>) -> Result<Vec<String>> {
    let mut config_path = None;
    for (i, a) in argv.iter().enumerate() {
        if a == "--config" {
            config_path = argv.get(i + 1).cloned();
            break;
        }
        if let Some(p) = a.strip_prefix("--config=") {
            config_path = Some(p.to_string());
            break;
        }
    }
    let Some(path) = config_path else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading config file {path}"))?;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{path}:{}: expected key=value", lineno + 1))?;
        let flag = format!("--{}", key.trim());
        let present = argv
            .iter()
            .any(|a| *a == flag || a.starts_with(&format!("{flag}=")));
        if !present {
            argv.push(flag);
            argv.push(value.trim().to_string());
        }
    }
    Ok(argv)
}

fn run(cli: &Cli, argv: &[String]) -> Result<RunManifest, Failure> {
    let args: Vec<String> = argv.iter().skip(1).cloned().collect();
    match &cli.command {
        Command::Refocus(a) => cmd_refocus(a, args),
        Command::Select(a) => cmd_select(a, args),
        Command::Gradcheck(a) => cmd_gradcheck(a, args),
        Command::Train(a) => cmd_train(a, args),
        Command::Eval(a) => cmd_eval(a, args),
        Command::Synth(a) => cmd_synth(a, args),
        Command::Export(a) => cmd_export(a, args),
    }
}

fn load_field(path: &Path) -> Result<LightField> {
    load_lfr(path).with_context(|| format!("loading light field {}", path.display()))
}

fn cmd_refocus(a: &RefocusArgs, args: Vec<String>) -> Result<RunManifest, Failure> {
    let lf = load_field(&a.input)?;
    let slopes: Vec<f64> = a
        .slopes
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .with_context(|| format!("bad slope '{s}'"))
        })
        .collect::<Result<_>>()?;
    let stack = build_stack(&lf, &slopes).context("building focal stack")?;
    let paths = export_stack(&stack, &a.out).context("writing focal stack")?;
    for (slice, path) in stack.slices().iter().zip(&paths) {
        let score = sharpness(&slice.image).context("scoring slice sharpness")?;
        println!(
            "{} slope={} sharpness={:.9}",
            path.file_name().unwrap_or_default().to_string_lossy(),
            slice.slope,
            score
        );
    }
    let mut manifest = RunManifest::new("refocus", args, None);
    manifest.inputs = vec![a.input.display().to_string()];
    manifest.outputs = paths.iter().map(|p| p.display().to_string()).collect();
    manifest.summary = format!("{} slices", stack.len());
    manifest.default_path = Some(a.out.join("manifest.json"));
    Ok(manifest)
}

fn cmd_select(a: &SelectArgs, args: Vec<String>) -> Result<RunManifest, Failure> {
    let lf = load_field(&a.input)?;
    let strategy =
        SelectionStrategy::from_str(&a.strategy).context("parsing selection strategy")?;
    let sel = select_views(&lf, strategy, a.k).context("selecting views")?;
    let line = sel
        .coords()
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(" ");
    println!("{line}");
    let mut manifest = RunManifest::new("select", args, None);
    manifest.inputs = vec![a.input.display().to_string()];
    manifest.summary = line;
    Ok(manifest)
}

fn cmd_gradcheck(a: &GradcheckArgs, args: Vec<String>) -> Result<RunManifest, Failure> {
    let mode = AdapterMode::from_str(&a.mode).context("parsing adapter mode")?;
    if a.channels == 0 || a.tokens == 0 || a.views == 0 || a.batch == 0 {
        return Err(Failure::Input(anyhow!("--c, --n, --k, --b must be positive")));
    }
    let mut rng = seeds::rng(a.seed, "gradcheck");
    let sets = mode.param_sets(a.views);
    let mut params = Vec::with_capacity(sets);
    for _ in 0..sets {
        let mut p = AdapterParams::init(a.channels, &mut rng).context("initializing adapter")?;
        // a zero up-projection would make half the gradients trivially zero
        for (_, block) in p.blocks_mut().iter_mut().skip(4) {
            for v in block.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        params.push(p);
    }
    let views: Vec<Tensor> = (0..a.views)
        .map(|_| Tensor::rand_uniform(&[a.batch, a.tokens, a.channels], -1.0, 1.0, &mut rng))
        .collect::<Result<_, _>>()
        .context("generating token views")?;
    let tokens = TokenSet::new(views, Representation::SubAperture).context("building token set")?;

    let mut named = Vec::new();
    let mut owned_names = Vec::new();
    for (si, set) in params.iter().enumerate() {
        for (block, tensor) in set.blocks() {
            owned_names.push(format!("set{si}.{block}"));
            named.push(tensor.clone());
        }
    }
    let named: Vec<(&str, Tensor)> = owned_names
        .iter()
        .map(|s| s.as_str())
        .zip(named)
        .collect();

    let report = grad_check(
        &named,
        |g, ids| {
            let mut total = None;
            for (vi, view) in tokens.views.iter().enumerate() {
                let set_index = if mode == AdapterMode::HardPerView { vi } else { 0 };
                let base = set_index * 6;
                let nodes = AdapterNodes {
                    w_q: ids[base],
                    b_q: ids[base + 1],
                    w_d: ids[base + 2],
                    b_d: ids[base + 3],
                    w_u: ids[base + 4],
                    b_u: ids[base + 5],
                    gamma: params[set_index].gamma(),
                };
                let x = g.constant(view.clone());
                let out = adapter_forward_view(g, x, &nodes, mode).map_err(|e| match e {
                    parallax::adapter::AdapterError::Tensor(t) => t,
                    other => parallax::tensor::TensorError::ShapeMismatch(other.to_string()),
                })?;
                let s = g.sum_all(out)?;
                total = Some(match total {
                    None => s,
                    Some(acc) => g.add(acc, s)?,
                });
            }
            Ok(total.expect("token set is non-empty"))
        },
        a.h,
        a.tol,
    )
    .context("running gradient check")?;

    print!("{report}");
    println!(
        "{} worst-rel-err={:.3e} tol={:.3e}",
        if report.passed() { "PASS" } else { "FAIL" },
        report.worst(),
        a.tol
    );
    let mut manifest = RunManifest::new("gradcheck", args, Some(a.seed));
    manifest.pass = report.passed();
    manifest.summary = format!("worst rel err {:.3e}", report.worst());
    if !report.passed() {
        // manifest still describes the run; the exit code carries the failure
        manifest.write(None).ok();
        return Err(Failure::Check(format!(
            "gradient check worst rel err {:.3e} exceeds tol {:.3e}",
            report.worst(),
            a.tol
        )));
    }
    Ok(manifest)
}

fn cmd_train(a: &TrainArgs, args: Vec<String>) -> Result<RunManifest, Failure> {
    if a.task != "synth" {
        return Err(Failure::Input(anyhow!(
            "unknown task '{}', only 'synth' is available",
            a.task
        )));
    }
    let strategy =
        SelectionStrategy::from_str(&a.strategy).context("parsing selection strategy")?;
    let head = match a.head.as_str() {
        "segmentation" => HeadKind::Segmentation,
        "saliency" => HeadKind::Saliency,
        other => return Err(Failure::Input(anyhow!("unknown head '{other}'"))),
    };
    // probe one scene so forced strategies (corners, fixed-five) set k
    let probe = parallax::encoder::synth::make_synthetic_task(seeds::derive(a.scene_seed, "train0"));
    let k = select_views(&probe.light_field, strategy, a.k)
        .context("probing view selection")?
        .k();

    let (mode, config) = match a.mode.as_str() {
        "none" => (AdapterMode::Shared, EncoderConfig::toy(k, a.seed).without_adapters()),
        other => (
            AdapterMode::from_str(other).context("parsing adapter mode")?,
            EncoderConfig::toy(k, a.seed),
        ),
    };
    let opts = TrainOptions {
        steps: a.steps,
        lr: a.lr,
        strategy,
        train_scenes: a.train_scenes,
        eval_scenes: a.eval_scenes,
    };
    let (_, report) = match train_toy(&config, mode, head, a.scene_seed, &opts) {
        Ok(r) => r,
        Err(EncoderError::DivergedLoss { step }) => {
            return Err(Failure::Check(format!("loss diverged at step {step}")))
        }
        Err(e) => return Err(Failure::Input(anyhow::Error::new(e).context("training"))),
    };

    std::fs::create_dir_all(&a.out).context("creating output directory")?;
    let csv_path = a.out.join("report.csv");
    std::fs::write(&csv_path, report.to_csv()).context("writing report.csv")?;
    let mut metric_pairs: Vec<(&str, f64)> = vec![("final_loss", report.final_loss())];
    for (name, value) in &report.final_metrics {
        metric_pairs.push((name.as_str(), *value));
    }
    let metrics_text = format_report(&metric_pairs);
    let metrics_path = a.out.join("metrics.txt");
    std::fs::write(&metrics_path, &metrics_text).context("writing metrics.txt")?;
    print!("{metrics_text}");

    if !report.backbone_unchanged() {
        return Err(Failure::Check("backbone fingerprint changed".into()));
    }
    let mut manifest = RunManifest::new("train", args, Some(a.seed));
    manifest.outputs = vec![
        csv_path.display().to_string(),
        metrics_path.display().to_string(),
    ];
    manifest.summary = format!(
        "mode={} k={k} steps={} final_loss={:.6}",
        a.mode, a.steps,
        report.final_loss()
    );
    manifest.default_path = Some(a.out.join("manifest.json"));
    Ok(manifest)
}

fn cmd_eval(a: &EvalArgs, args: Vec<String>) -> Result<RunManifest, Failure> {
    let report = match a.metric.as_str() {
        "miou" => {
            let gt = grids::read_label_grid(&a.gt)?;
            let pred = grids::read_label_grid(&a.pred)?;
            let classes = gt
                .data()
                .iter()
                .chain(pred.data())
                .filter(|&&l| Some(l) != a.ignore_label)
                .max()
                .map(|&m| m as usize + 1)
                .unwrap_or(1);
            let mut cm = ConfusionMatrix::new(classes);
            cm.accumulate(&gt, &pred, a.ignore_label)
                .context("tallying confusion matrix")?;
            let s = cm.scores().context("scoring confusion matrix")?;
            format_report(&[
                ("miou", s.mean_iou),
                ("macc", s.mean_acc),
                ("acc", s.pixel_acc),
            ])
        }
        "mae" => {
            let gt = grids::read_real_grid(&a.gt)?;
            let pred = grids::read_real_grid(&a.pred)?;
            let value = mae(&pred, &gt).context("computing mae")?;
            format_report(&[("mae", value)])
        }
        other => return Err(Failure::Input(anyhow!("unknown metric '{other}'"))),
    };
    print!("{report}");
    let mut manifest = RunManifest::new("eval", args, None);
    manifest.inputs = vec![a.pred.display().to_string(), a.gt.display().to_string()];
    manifest.summary = report.replace('\n', " ").trim().to_string();
    Ok(manifest)
}

fn cmd_synth(a: &SynthArgs, args: Vec<String>) -> Result<RunManifest, Failure> {
    let scene = parallax::encoder::synth::make_synthetic_task(a.seed);
    std::fs::create_dir_all(&a.out).context("creating output directory")?;
    let lfr_path = a.out.join("scene.lfr");
    parallax::lightfield::save_lfr(&scene.light_field, &lfr_path)
        .context("writing scene.lfr")?;
    let labels_path = a.out.join("labels.txt");
    grids::write_label_grid(&labels_path, &scene.pixel_labels)?;
    println!(
        "scene.lfr {}x{} views of {}x{} px, {} rectangles",
        scene.light_field.angular_rows(),
        scene.light_field.angular_cols(),
        scene.light_field.height(),
        scene.light_field.width(),
        scene.rects.len()
    );
    let mut manifest = RunManifest::new("synth", args, Some(a.seed));
    manifest.outputs = vec![
        lfr_path.display().to_string(),
        labels_path.display().to_string(),
    ];
    manifest.summary = format!("{} rectangles", scene.rects.len());
    manifest.default_path = Some(a.out.join("manifest.json"));
    Ok(manifest)
}

fn cmd_export(a: &ExportArgs, args: Vec<String>) -> Result<RunManifest, Failure> {
    let lf = load_field(&a.input)?;
    let coord = if a.view == "center" {
        lf.center()
    } else {
        let (u, v) = a
            .view
            .split_once(',')
            .ok_or_else(|| anyhow!("--view expects 'u,v' or 'center'"))?;
        ViewCoord::new(
            u.trim().parse().context("parsing view column u")?,
            v.trim().parse().context("parsing view row v")?,
        )
    };
    let img = lf.extract_view(coord).context("extracting view")?;
    let (h, w) = (img.height() as u32, img.width() as u32);
    let to_u8 = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    match img.channels() {
        1 => {
            let buf = image::GrayImage::from_fn(w, h, |x, y| {
                image::Luma([to_u8(img.at(y as usize, x as usize, 0))])
            });
            buf.save(&a.out).context("writing png")?;
        }
        3 => {
            let buf = image::RgbImage::from_fn(w, h, |x, y| {
                image::Rgb([
                    to_u8(img.at(y as usize, x as usize, 0)),
                    to_u8(img.at(y as usize, x as usize, 1)),
                    to_u8(img.at(y as usize, x as usize, 2)),
                ])
            });
            buf.save(&a.out).context("writing png")?;
        }
        c => {
            return Err(Failure::Input(anyhow!(
                "cannot export {c}-channel images as png"
            )))
        }
    }
    println!("{} view {} -> {}", a.input.display(), coord, a.out.display());
    let mut manifest = RunManifest::new("export", args, None);
    manifest.inputs = vec![a.input.display().to_string()];
    manifest.outputs = vec![a.out.display().to_string()];
    manifest.summary = format!("view {coord}");
    Ok(manifest)
}
