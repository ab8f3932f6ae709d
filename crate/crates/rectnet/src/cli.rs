//! Command-line front end: phantom synthesis, lung segmentation,
//! dataset building, training, detection, evaluation, architecture
//! summaries, and numerical self checks.
//!
//! Exit codes: 0 success, 1 argument errors, 2 runtime failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::detector::{detect, read_detection, write_detection, write_probability_pgms, DetectorConfig};
use crate::error::{Error, Result};
use crate::evaluator::{
    check_volume_ids, default_thresholds, froc_sweep, stored_operating_point,
    stratified_sensitivity, write_froc_csv, write_strata_csv, EvalPair, FrocPoint,
};
use crate::lung_seg::{segment_lungs, SegmentationConfig};
use crate::models::{
    load_model, save_model, CnnBaselineConfig, Model, ModelSpec, RectNetConfig, Stage,
};
use crate::neural::gradcheck::check_model;
use crate::neural::loss::nll;
use crate::sampler::{build_dataset, BuildConfig, PatchStack, VolumeRef};
use crate::trainer::{train_baseline, train_rectnet, write_log_csv, LoadedDataset, TrainOptions};
use crate::volume::{
    annotation_path, generate_phantom, read_annotations, read_mask, read_volume, write_annotations,
    write_mask, write_volume, PhantomSpec,
};

// ---------------------------------------------------------------------------
// Config file
// ---------------------------------------------------------------------------

/// Optional JSON config supplying defaults; explicit flags always win.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub segmentation: SegmentationSection,
    pub dataset: DatasetSection,
    pub train: TrainSection,
    pub detect: DetectSection,
    pub eval: EvalSection,
    /// Full architecture description; `--arch` overrides it.
    pub model: Option<ModelSpec>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationSection {
    pub threshold_hu: Option<i16>,
    pub dilate_radius: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub grid_multiplier: Option<f64>,
    pub pos_rate: Option<f64>,
    pub max_positives_per_nodule: Option<usize>,
    pub patch_size: Option<usize>,
    pub k: Option<usize>,
    pub augment: Option<bool>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub pretrain_epochs: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub val_fraction: Option<f64>,
    pub patience: Option<usize>,
    pub freeze_cnn: Option<bool>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    pub grid_multiplier: Option<f64>,
    pub prob_threshold: Option<f64>,
    pub bandwidth: Option<f64>,
    pub accept_p: Option<f64>,
    pub max_iters: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub max_fps: Option<f64>,
    pub agreement: Option<u8>,
    pub sweep: Option<String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn pick<T: Copy>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

// ---------------------------------------------------------------------------
// Argument grammar
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "rectnet", version, about = "Pulmonary nodule detection in chest CT")]
pub struct Cli {
    /// Run on a single worker thread.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads (also settable via RECTNET_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON config file supplying defaults; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic chest CT phantom with ground truth.
    Phantom(PhantomArgs),
    /// Segment the lung field of a volume.
    Segment(SegmentArgs),
    /// Sample a balanced patch-stack manifest from annotated volumes.
    BuildDataset(BuildDatasetArgs),
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Run nodule detection over one volume.
    Detect(DetectArgs),
    /// Score detection outputs against truth annotations.
    Eval(EvalArgs),
    /// Print an architecture summary.
    Describe(DescribeArgs),
    /// Run built-in gradient and determinism checks.
    Selftest,
}

#[derive(Debug, Args)]
struct PhantomArgs {
    /// Phantom description (JSON); defaults to the built-in spec.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output volume path; also writes <stem>.lungs.* and
    /// <stem>.nodules.json next to it.
    #[arg(long)]
    out: PathBuf,
    /// Noise seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    #[arg(long)]
    volume: PathBuf,
    /// Output mask path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threshold_hu: Option<i16>,
    #[arg(long)]
    dilate_radius: Option<usize>,
}

#[derive(Debug, Args)]
struct BuildDatasetArgs {
    /// Volume file; repeat for several. Annotations are discovered at
    /// <stem>.nodules.json and lung masks at <stem>.lungs.json.
    #[arg(long = "volume", required = true)]
    volumes: Vec<PathBuf>,
    /// Output manifest path (JSON lines).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    grid_multiplier: Option<f64>,
    #[arg(long)]
    pos_rate: Option<f64>,
    #[arg(long)]
    max_positives_per_nodule: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    augment: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threshold_hu: Option<i16>,
    #[arg(long)]
    dilate_radius: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// rectnet-desk, rectnet-paper, baseline-desk, or baseline-paper.
    #[arg(long)]
    arch: Option<String>,
    /// Output model checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-epoch CSV log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    freeze_cnn: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Output detection JSON.
    #[arg(long)]
    out: PathBuf,
    /// Lung mask; segmented on the fly when omitted.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    grid_multiplier: Option<f64>,
    #[arg(long)]
    prob_threshold: Option<f64>,
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long)]
    accept_p: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    threshold_hu: Option<i16>,
    #[arg(long)]
    dilate_radius: Option<usize>,
    /// Directory for per-slice PGM probability maps.
    #[arg(long)]
    pgm_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Detection JSON; repeat per scan, paired with --truth by order.
    #[arg(long = "detections", required = true)]
    detections: Vec<PathBuf>,
    /// Truth annotation JSON; repeat per scan.
    #[arg(long = "truth", required = true)]
    truth: Vec<PathBuf>,
    /// FROC sweep CSV output.
    #[arg(long)]
    froc: Option<PathBuf>,
    /// Stratified sensitivity CSV output.
    #[arg(long)]
    strata: Option<PathBuf>,
    /// Report the best sweep point at or below this FP/scan budget.
    #[arg(long)]
    max_fps: Option<f64>,
    /// Only count truth nodules with at least this agreement level.
    #[arg(long)]
    agreement: Option<u8>,
    /// Report an extra operating point replayed at this accept_p.
    #[arg(long)]
    operating_p: Option<f64>,
    /// Sweep thresholds as start:stop:step (inclusive).
    #[arg(long)]
    sweep: Option<String>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct DescribeArgs {
    /// rectnet-desk, rectnet-paper, baseline-desk, or baseline-paper.
    #[arg(long)]
    arch: Option<String>,
    /// Checkpoint to describe instead of a preset.
    #[arg(long)]
    model: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

/// Parse and execute. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    init_threads(&cli)?;
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Phantom(args) => cmd_phantom(args),
        Command::Segment(args) => cmd_segment(args, &config),
        Command::BuildDataset(args) => cmd_build_dataset(args, &config),
        Command::Train(args) => cmd_train(args, &config),
        Command::Detect(args) => cmd_detect(args, &config),
        Command::Eval(args) => cmd_eval(args, &config),
        Command::Describe(args) => cmd_describe(args),
        Command::Selftest => cmd_selftest(),
    }
}

/// Thread precedence: --deterministic, then --threads, then
/// RECTNET_THREADS, then the rayon default. All numeric results are
/// identical across thread counts; this only controls parallelism.
fn init_threads(cli: &Cli) -> Result<()> {
    let count = if cli.deterministic {
        Some(1)
    } else if let Some(n) = cli.threads {
        Some(n.max(1))
    } else if let Ok(v) = std::env::var("RECTNET_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("RECTNET_THREADS: bad value {v:?}")))?;
        Some(n.max(1))
    } else {
        None
    };
    if let Some(n) = count {
        // A failure here means a pool already exists (in-process reuse);
        // results do not depend on the pool size, so continue.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn resolve_segmentation(
    threshold_hu: Option<i16>,
    dilate_radius: Option<usize>,
    config: &RunConfig,
) -> SegmentationConfig {
    let d = SegmentationConfig::default();
    SegmentationConfig {
        threshold_hu: pick(threshold_hu, config.segmentation.threshold_hu, d.threshold_hu),
        dilate_radius: pick(dilate_radius, config.segmentation.dilate_radius, d.dilate_radius),
    }
}

fn volume_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".to_string())
}

/// Strip the `.nodules` tail of a truth file name to recover the
/// volume name it annotates.
fn truth_volume_name(path: &Path) -> String {
    let stem = volume_name(path);
    stem.strip_suffix(".nodules").map(str::to_string).unwrap_or(stem)
}

fn lungs_path(volume: &Path) -> PathBuf {
    volume.with_extension("lungs.json")
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_phantom(args: PhantomArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<PhantomSpec>(&text)
                .map_err(|e| Error::format(path, e.to_string()))?
        }
        None => PhantomSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let (volume, lung_mask, annotations) = generate_phantom(&spec)?;
    write_volume(&volume, &args.out)?;
    write_mask(&lung_mask, &lungs_path(&args.out))?;
    write_annotations(&annotations, &annotation_path(&args.out))?;
    let (nx, ny, nz) = volume.dims();
    println!(
        "phantom {}: {nx}x{ny}x{nz}, {} nodules, lung voxels {}",
        volume_name(&args.out),
        annotations.len(),
        lung_mask.count_true()
    );
    Ok(())
}

fn cmd_segment(args: SegmentArgs, config: &RunConfig) -> Result<()> {
    let seg = resolve_segmentation(args.threshold_hu, args.dilate_radius, config);
    eprintln!(
        "config: {}",
        json!({"command": "segment", "threshold_hu": seg.threshold_hu,
               "dilate_radius": seg.dilate_radius})
    );
    let volume = read_volume(&args.volume)?;
    let mask = segment_lungs(&volume, &seg)?;
    write_mask(&mask, &args.out)?;
    println!("segmented {}: {} lung voxels", volume_name(&args.volume), mask.count_true());
    Ok(())
}

fn cmd_build_dataset(args: BuildDatasetArgs, config: &RunConfig) -> Result<()> {
    let d = BuildConfig::default();
    let build = BuildConfig {
        grid_multiplier: pick(args.grid_multiplier, config.dataset.grid_multiplier, d.grid_multiplier),
        pos_rate: pick(args.pos_rate, config.dataset.pos_rate, d.pos_rate),
        max_positives_per_nodule: pick(
            args.max_positives_per_nodule,
            config.dataset.max_positives_per_nodule,
            d.max_positives_per_nodule,
        ),
        patch_size: pick(args.patch_size, config.dataset.patch_size, d.patch_size),
        k: pick(args.k, config.dataset.k, d.k),
        augment: pick(args.augment, config.dataset.augment, d.augment),
        seed: pick(args.seed, config.dataset.seed, d.seed),
        segmentation: resolve_segmentation(args.threshold_hu, args.dilate_radius, config),
    };
    eprintln!(
        "config: {}",
        json!({"command": "build-dataset", "grid_multiplier": build.grid_multiplier,
               "pos_rate": build.pos_rate,
               "max_positives_per_nodule": build.max_positives_per_nodule,
               "patch_size": build.patch_size, "k": build.k,
               "augment": build.augment, "seed": build.seed})
    );
    let refs: Vec<VolumeRef> = args
        .volumes
        .iter()
        .map(|p| {
            let ann = annotation_path(p);
            let lungs = lungs_path(p);
            VolumeRef {
                volume: p.to_string_lossy().into_owned(),
                annotations: ann.exists().then(|| ann.to_string_lossy().into_owned()),
                mask: lungs.exists().then(|| lungs.to_string_lossy().into_owned()),
            }
        })
        .collect();
    let manifest = build_dataset(&refs, &build)?;
    manifest.write(&args.out)?;
    let c = &manifest.header.class_counts;
    println!(
        "manifest {}: {} entries ({} positive, {} negative) over {} volumes",
        args.out.display(),
        manifest.entries.len(),
        c.positives,
        c.negatives,
        refs.len()
    );
    Ok(())
}

fn arch_spec(name: &str) -> Result<ModelSpec> {
    Ok(match name {
        "rectnet-desk" => ModelSpec::RectNet(RectNetConfig::desk()),
        "rectnet-paper" => ModelSpec::RectNet(RectNetConfig::paper()),
        "baseline-desk" => ModelSpec::CnnBaseline(CnnBaselineConfig::desk()),
        "baseline-paper" => ModelSpec::CnnBaseline(CnnBaselineConfig::paper()),
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown architecture {other:?}; expected rectnet-desk, \
                 rectnet-paper, baseline-desk, or baseline-paper"
            )))
        }
    })
}

fn cmd_train(args: TrainArgs, config: &RunConfig) -> Result<()> {
    let spec = match (&args.arch, &config.model) {
        (Some(name), _) => arch_spec(name)?,
        (None, Some(spec)) => spec.clone(),
        (None, None) => arch_spec("rectnet-desk")?,
    };
    let d = TrainOptions::default();
    let t = &config.train;
    let opts = TrainOptions {
        pretrain_epochs: pick(args.pretrain_epochs, t.pretrain_epochs, d.pretrain_epochs),
        epochs: pick(args.epochs, t.epochs, d.epochs),
        batch_size: pick(args.batch_size, t.batch_size, d.batch_size),
        lr: pick(args.learning_rate, t.learning_rate, d.lr),
        momentum: pick(args.momentum, t.momentum, d.momentum),
        val_fraction: pick(args.val_fraction, t.val_fraction, d.val_fraction),
        patience: pick(args.patience, t.patience, d.patience),
        freeze_cnn: pick(args.freeze_cnn, t.freeze_cnn, d.freeze_cnn),
        seed: pick(args.seed, t.seed, d.seed),
    };
    eprintln!(
        "config: {}",
        json!({"command": "train", "model": spec,
               "pretrain_epochs": opts.pretrain_epochs, "epochs": opts.epochs,
               "batch_size": opts.batch_size, "lr": opts.lr,
               "momentum": opts.momentum, "val_fraction": opts.val_fraction,
               "patience": opts.patience, "freeze_cnn": opts.freeze_cnn,
               "seed": opts.seed})
    );
    let data = LoadedDataset::load(&args.manifest)?;
    let (model, artifacts) = match &spec {
        ModelSpec::RectNet(c) => train_rectnet(&data, c, &opts)?,
        ModelSpec::CnnBaseline(c) => train_baseline(&data, c, &opts)?,
    };
    for row in &artifacts.log {
        println!(
            "{} epoch {:>3}  lr {:.5}  train {:.4}  val {:.4}  acc {:.4}",
            row.phase, row.epoch, row.lr, row.train_loss, row.val_loss, row.val_accuracy
        );
    }
    if let Some(log) = &args.log {
        write_log_csv(&artifacts.log, log)?;
    }
    save_model(&model, &args.out)?;
    println!(
        "saved {} ({} parameters): val loss {:.4}, val accuracy {:.4}",
        args.out.display(),
        model.param_count(),
        artifacts.final_val_loss,
        artifacts.final_val_accuracy
    );
    Ok(())
}

fn cmd_detect(args: DetectArgs, config: &RunConfig) -> Result<()> {
    let d = DetectorConfig::default();
    let s = &config.detect;
    let det = DetectorConfig {
        grid_multiplier: pick(args.grid_multiplier, s.grid_multiplier, d.grid_multiplier),
        prob_threshold: pick(args.prob_threshold, s.prob_threshold, d.prob_threshold),
        bandwidth: pick(args.bandwidth, s.bandwidth, d.bandwidth),
        accept_p: pick(args.accept_p, s.accept_p, d.accept_p),
        max_iters: pick(args.max_iters, s.max_iters, d.max_iters),
    };
    eprintln!(
        "config: {}",
        json!({"command": "detect", "grid_multiplier": det.grid_multiplier,
               "prob_threshold": det.prob_threshold, "bandwidth": det.bandwidth,
               "accept_p": det.accept_p, "max_iters": det.max_iters})
    );
    let volume = read_volume(&args.volume)?;
    let mask = match &args.mask {
        Some(p) => read_mask(p)?,
        None => {
            let seg = resolve_segmentation(args.threshold_hu, args.dilate_radius, config);
            segment_lungs(&volume, &seg)?
        }
    };
    let model = load_model(&args.model)?;
    let name = volume_name(&args.volume);
    let (output, map) = detect(&volume, &mask, &model, &det, &name)?;
    write_detection(&output, &args.out)?;
    if let Some(dir) = &args.pgm_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_probability_pgms(&map, dir, &name)?;
    }
    println!(
        "{name}: {} grid points, {} clusters, {} candidates",
        map.entries.len(),
        output.clusters.len(),
        output.candidates.len()
    );
    for c in &output.candidates {
        println!(
            "  candidate {} at ({}, {}, {}): score {:.3}, {} grid points",
            c.id, c.center_voxel[0], c.center_voxel[1], c.center_voxel[2], c.score,
            c.members.len()
        );
    }
    Ok(())
}

fn parse_sweep(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || Error::InvalidConfig(format!("sweep must be start:stop:step, got {text:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let (start, stop, step) = (nums[0], nums[1], nums[2]);
    if !(step > 0.0 && start <= stop && nums.iter().all(|v| v.is_finite())) {
        return Err(bad());
    }
    let count = ((stop - start) / step).floor() as usize + 1;
    Ok((0..count.min(10_000)).map(|i| start + step * i as f64).collect())
}

fn cmd_eval(args: EvalArgs, config: &RunConfig) -> Result<()> {
    if args.detections.len() != args.truth.len() {
        return Err(Error::InvalidConfig(format!(
            "{} detection files but {} truth files",
            args.detections.len(),
            args.truth.len()
        )));
    }
    let min_agreement = pick(args.agreement, config.eval.agreement, 0);
    let mut detections = Vec::new();
    let mut truths: Vec<Vec<_>> = Vec::new();
    for (dp, tp) in args.detections.iter().zip(args.truth.iter()) {
        let detection = read_detection(dp)?;
        check_volume_ids(&detection, &truth_volume_name(tp))?;
        detections.push(detection);
        truths.push(
            read_annotations(tp)?
                .into_iter()
                .filter(|n| n.agreement_level >= min_agreement)
                .collect(),
        );
    }
    let pairs: Vec<EvalPair<'_>> = detections
        .iter()
        .zip(truths.iter())
        .map(|(detection, nodules)| EvalPair {
            detection,
            nodules,
        })
        .collect();

    let total_nodules: usize = truths.iter().map(Vec::len).sum();
    println!("scans: {}, nodules: {total_nodules}", pairs.len());
    let op = stored_operating_point(&pairs)?;
    print_point("operating point", &op);
    if let Some(p) = args.operating_p {
        let replayed = froc_sweep(&pairs, &[p])?;
        print_point(&format!("operating point at accept_p {p}"), &replayed[0]);
    }

    let sweep_arg = args.sweep.clone().or_else(|| config.eval.sweep.clone());
    let thresholds = match &sweep_arg {
        Some(text) => parse_sweep(text)?,
        None => default_thresholds(),
    };
    let sweep = froc_sweep(&pairs, &thresholds)?;
    if let Some(path) = &args.froc {
        write_froc_csv(&sweep, path)?;
    }
    let max_fps = pick(args.max_fps, config.eval.max_fps, 8.0);
    match sweep
        .iter()
        .filter(|p| p.fps_per_scan <= max_fps)
        .max_by(|a, b| {
            a.sensitivity
                .total_cmp(&b.sensitivity)
                .then(b.fps_per_scan.total_cmp(&a.fps_per_scan))
        }) {
        Some(best) => print_point(&format!("best at <= {max_fps} fp/scan"), best),
        None => println!("best at <= {max_fps} fp/scan: none"),
    }

    let rows = stratified_sensitivity(&pairs)?;
    if let Some(path) = &args.strata {
        write_strata_csv(&rows, path)?;
    }
    for row in &rows {
        let s = match row.sensitivity {
            Some(v) => format!("{v:.4}"),
            None => "N/A".to_string(),
        };
        println!(
            "  {} {}: {}/{} ({s})",
            row.stratum, row.class, row.detected, row.nodules
        );
    }
    Ok(())
}

fn print_point(label: &str, p: &FrocPoint) {
    println!(
        "{label}: accept_p {:.3}, sensitivity {:.4} ({}/{}), {:.2} fp/scan",
        p.accept_p, p.sensitivity, p.true_positives, p.total_nodules, p.fps_per_scan
    );
}

fn cmd_describe(args: DescribeArgs) -> Result<()> {
    let spec = match (&args.arch, &args.model) {
        (Some(name), None) => arch_spec(name)?,
        (None, Some(path)) => load_model(path)?.spec(),
        _ => unreachable!("clap group enforces exactly one"),
    };
    print!("{}", spec.describe()?);
    Ok(())
}

// ---------------------------------------------------------------------------
// Self test
// ---------------------------------------------------------------------------

fn selftest_stack(size: usize, depth: usize, seed: u64) -> PatchStack {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    PatchStack {
        size,
        depth,
        data: (0..size * size * depth).map(|_| rng.gen_range(0.0..1.0)).collect(),
    }
}

fn report_check(name: &str, max_rel: f64, ok: bool) -> Result<()> {
    println!(
        "{name}: max relative error {max_rel:.2e} ... {}",
        if ok { "ok" } else { "FAILED" }
    );
    if ok {
        Ok(())
    } else {
        Err(Error::SelfTest(format!("{name}: max relative error {max_rel:.2e}")))
    }
}

/// Gradient checks in f64 on reduced architectures, plus a forward
/// reproducibility check.
fn cmd_selftest() -> Result<()> {
    use crate::models::{CnnBaseline, RectNet};

    let tol = 1e-4;
    let stack = selftest_stack(12, 3, 3);
    let label = 1;

    let config = RectNetConfig {
        input_size: 12,
        k: 1,
        stages: vec![Stage::Conv { kernel: 3, maps: 4 }, Stage::Pool],
        feature_dim: 8,
        lstm_units: 8,
        mlp: [12, 8],
    };
    let mut model = RectNet::<f64>::new(&config, 11)?;
    let (_, cache) = model.forward(&stack);
    let mut grads = model.zeros_like();
    model.backward(&cache, label, 1.0, &mut grads, false);
    let report = check_model(
        &mut model,
        &grads,
        |m| nll(&m.forward(&stack).0, label),
        48,
        7,
    );
    report_check("gradients, hybrid model", report.max_rel_err, report.passes(tol))?;

    let config = CnnBaselineConfig {
        input_size: 12,
        k: 1,
        stages: vec![Stage::Conv { kernel: 3, maps: 4 }, Stage::Pool],
        fc: [12, 8],
    };
    let mut model = CnnBaseline::<f64>::new(&config, 13)?;
    let (_, cache) = model.forward(&stack);
    let mut grads = model.zeros_like();
    model.backward(&cache, label, 1.0, &mut grads);
    let report = check_model(
        &mut model,
        &grads,
        |m| nll(&m.forward(&stack).0, label),
        48,
        9,
    );
    report_check("gradients, baseline model", report.max_rel_err, report.passes(tol))?;

    let spec = ModelSpec::RectNet(RectNetConfig::desk());
    let a = Model::<f32>::new(&spec, 5)?;
    let b = Model::<f32>::new(&spec, 5)?;
    let stack = selftest_stack(20, 7, 4);
    let pa = a.predict(&stack);
    let pb = b.predict(&stack);
    let same = pa == pb && pa.iter().all(|p| p.is_finite());
    println!("forward reproducibility: {}", if same { "ok" } else { "FAILED" });
    if !same {
        return Err(Error::SelfTest("forward pass not reproducible".into()));
    }
    println!("selftest ok");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_1_and_help_exits_0() {
        assert_eq!(run(["rectnet", "--no-such-flag"]), 1);
        assert_eq!(run(["rectnet", "frobnicate"]), 1);
        assert_eq!(run(["rectnet", "--help"]), 0);
        assert_eq!(run(["rectnet", "describe", "--arch"]), 1);
    }

    #[test]
    fn runtime_errors_exit_2() {
        assert_eq!(run(["rectnet", "describe", "--arch", "no-such-arch"]), 2);
        assert_eq!(
            run(["rectnet", "segment", "--volume", "/no/such/file", "--out", "/tmp/x"]),
            2
        );
    }

    #[test]
    fn describe_presets_succeed() {
        for arch in ["rectnet-desk", "rectnet-paper", "baseline-desk", "baseline-paper"] {
            assert_eq!(run(["rectnet", "describe", "--arch", arch]), 0, "{arch}");
        }
    }

    #[test]
    fn config_file_yields_to_flags() {
        let config = RunConfig {
            segmentation: SegmentationSection {
                threshold_hu: Some(-300),
                dilate_radius: Some(5),
            },
            ..RunConfig::default()
        };
        let merged = resolve_segmentation(Some(-400), None, &config);
        assert_eq!(merged.threshold_hu, -400);
        assert_eq!(merged.dilate_radius, 5);
        let merged = resolve_segmentation(None, None, &RunConfig::default());
        assert_eq!(merged.threshold_hu, SegmentationConfig::default().threshold_hu);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"train": {"learning_rate": 0.1, "lerning_rate": 2}}"#).unwrap();
        assert!(RunConfig::load(&path).is_err());
        std::fs::write(&path, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.train.learning_rate, Some(0.1));
    }

    #[test]
    fn truth_names_strip_the_nodules_tail() {
        assert_eq!(truth_volume_name(Path::new("/a/vol3.nodules.json")), "vol3");
        assert_eq!(truth_volume_name(Path::new("plain.json")), "plain");
    }

    #[test]
    fn arch_names_map_to_specs() {
        assert!(matches!(arch_spec("rectnet-paper"), Ok(ModelSpec::RectNet(_))));
        assert!(matches!(arch_spec("baseline-desk"), Ok(ModelSpec::CnnBaseline(_))));
        assert!(arch_spec("resnet").is_err());
    }

    #[test]
    fn selftest_passes() {
        assert_eq!(run(["rectnet", "selftest"]), 0);
    }

    #[test]
    fn sweep_strings_parse_inclusively() {
        let ts = parse_sweep("0.5:0.9:0.1").unwrap();
        assert_eq!(ts.len(), 5);
        assert!((ts[0] - 0.5).abs() < 1e-12 && (ts[4] - 0.9).abs() < 1e-12);
        assert_eq!(parse_sweep("0.6:0.6:0.1").unwrap(), vec![0.6]);
        for bad in ["0.5:0.9", "a:b:c", "0.9:0.5:0.1", "0.5:0.9:0", "0.5:0.9:-0.1"] {
            assert!(parse_sweep(bad).is_err(), "{bad} should be rejected");
        }
    }
}
