//! `chartfuse` command-line driver. Primary outputs are deterministic JSON
//! or CSV; wall-clock facts go to a separate `metadata.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use chartfuse::assoc::{evaluate, EvalReport, FrameEval};
use chartfuse::baselines::{distmatch_eval, raycast_eval, DistMatchParams};
use chartfuse::camera::Calibration;
use chartfuse::chartdb::{load_markers, select_markers, MarkerStore, SelectionParams};
use chartfuse::track::CalibrationState;
use chartfuse::datasetio::{
    generate_synthetic, load_dataset, AugmentPolicy, Dataset, DatasetSource, QueryNoise, SampleOptions, Split,
    SyntheticSceneSpec,
};
use chartfuse::experiment::fusion_eval;
use chartfuse::fusion::gradcheck::{gradcheck, random_samples, GradCheckConfig};
use chartfuse::fusion::train::{train, TrainConfig};
use chartfuse::fusion::{load_checkpoint, save_checkpoint, CrossAttentionKind, EmbeddingKind, FusionModel, ModelConfig};

#[derive(Parser)]
#[command(name = "chartfuse", version, about = "Chart and camera fusion for buoy association")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chart markers in view for each frame.
    Select(SelectArgs),
    /// Ray-casting baseline.
    Raycast(BaselineArgs),
    /// Distance-estimate baseline with tracking and online calibration.
    Distmatch(BaselineArgs),
    /// Train the fusion model.
    Train(TrainArgs),
    /// Evaluate one or more methods on the same frames.
    Eval(EvalArgs),
    /// Finite-difference check of the model gradients.
    Gradcheck(GradcheckArgs),
    /// Render a synthetic dataset.
    Synth(SynthArgs),
    /// Serve a dataset over HTTP for the labeling tool.
    Serve(ServeArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset root.
    #[arg(long)]
    dataset: PathBuf,
    /// Chart markers replacing the dataset's markers.csv.
    #[arg(long)]
    markers: Option<PathBuf>,
    /// Calibration replacing the dataset's calibration.txt.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Frames to use.
    #[arg(long, value_enum, default_value = "all")]
    split: SplitArg,
}

#[derive(Args, Clone, Copy)]
struct SelectionArgs {
    /// Half field of view for selection, degrees.
    #[arg(long = "fov-half")]
    fov_half: Option<f64>,
    /// Maximum marker distance, meters.
    #[arg(long)]
    dmax: Option<f64>,
    /// Minimum marker distance, meters.
    #[arg(long)]
    dmin: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq)]
enum SplitArg {
    All,
    Train,
    Val,
    Test,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq)]
enum EmbeddingArg {
    Mlp,
    Learned,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq)]
enum AttentionArg {
    Dense,
    Deformable,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq, Debug)]
enum Method {
    Fusion,
    Raycast,
    Distmatch,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Fusion => "fusion",
            Method::Raycast => "raycast",
            Method::Distmatch => "distmatch",
        }
    }
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    selection: SelectionArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    selection: SelectionArgs,
    /// Association gate, meters.
    #[arg(long, default_value_t = 50.0)]
    gate: f64,
    #[arg(long = "iou-thresh", default_value_t = 0.5)]
    iou_thresh: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone, Copy)]
struct ModelArgs {
    #[arg(long, value_enum)]
    embedding: Option<EmbeddingArg>,
    #[arg(long, value_enum)]
    attention: Option<AttentionArg>,
    /// Sampling points per head for deformable attention.
    #[arg(long = "sampling-points")]
    sampling_points: Option<usize>,
}

/// Optional sections of the `--config` JSON file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
    augment: Option<AugmentPolicy>,
    synth: Option<SyntheticSceneSpec>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    selection: SelectionArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// JSON file with `model`, `train` and `augment` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Probability of a horizontal flip per sample.
    #[arg(long)]
    hflip: Option<f64>,
    /// Perturb query distances by ±5% of dmax and bearings by ±2°.
    #[arg(long = "query-noise")]
    query_noise: bool,
    #[arg(long)]
    vthresh: Option<f64>,
    #[arg(long = "iou-thresh")]
    iou_thresh: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    selection: SelectionArgs,
    /// Methods to evaluate; repeat for several.
    #[arg(long = "method", value_enum, required = true)]
    methods: Vec<Method>,
    /// Checkpoint for the fusion method.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 50.0)]
    gate: f64,
    #[arg(long = "iou-thresh", default_value_t = 0.5)]
    iou_thresh: f64,
    #[arg(long, default_value_t = 0.5)]
    vthresh: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// JSON file with a `model` section.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Parameters to check.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Synthetic inputs in the batch.
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON file with a `synth` section.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the benchmark preset: pose jitter, 20% unmapped, 20% test.
    #[arg(long)]
    benchmark: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Directory of static files served outside /api.
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
}

/// Invalid flag combinations and values; reported with exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Select(a) => cmd_select(a),
        Command::Raycast(a) => cmd_baseline(a, Method::Raycast),
        Command::Distmatch(a) => cmd_baseline(a, Method::Distmatch),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn require_exists(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.exists() {
        return Err(usage(format!("{what} `{}` does not exist", path.display())));
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> anyhow::Result<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            require_exists(p, "config")?;
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", p.display())))
        }
    }
}

struct Loaded {
    dataset: Dataset,
    indices: Vec<usize>,
}

fn load_data(a: &DataArgs) -> anyhow::Result<Loaded> {
    require_exists(&a.dataset, "dataset")?;
    let mut dataset = load_dataset(&a.dataset)?;
    if let Some(m) = &a.markers {
        require_exists(m, "marker file")?;
        dataset.markers = load_markers(m)?;
    }
    if let Some(c) = &a.calib {
        require_exists(c, "calibration file")?;
        dataset.calibration = Calibration::load(c)?;
    }
    let indices = match a.split {
        SplitArg::All => (0..dataset.records.len()).collect(),
        SplitArg::Train => dataset.indices(Split::Train),
        SplitArg::Val => dataset.indices(Split::Val),
        SplitArg::Test => dataset.indices(Split::Test),
    };
    Ok(Loaded { dataset, indices })
}

fn selection(a: &SelectionArgs, calib: &Calibration) -> anyhow::Result<SelectionParams> {
    let d = SelectionParams::for_camera(calib.intrinsics.horizontal_fov());
    SelectionParams::new(
        a.fov_half.map_or(d.fov_half_angle, f64::to_radians),
        a.dmax.unwrap_or(d.d_max),
        a.dmin.unwrap_or(d.d_min),
    )
    .map_err(|e| usage(e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

#[derive(Serialize)]
struct Metadata {
    command: &'static str,
    version: &'static str,
    started_unix: f64,
    elapsed_s: f64,
}

/// Writes `metadata.json`, the only output that varies between runs.
fn write_metadata(out: &Path, command: &'static str, started: Instant, unix: f64) -> anyhow::Result<()> {
    write_json(
        &out.join("metadata.json"),
        &Metadata {
            command,
            version: env!("CARGO_PKG_VERSION"),
            started_unix: unix,
            elapsed_s: started.elapsed().as_secs_f64(),
        },
    )
}

fn unix_now() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

#[derive(Serialize)]
struct SelectedMarker<'a> {
    marker_id: &'a str,
    dist: f64,
    bearing: f64,
}

#[derive(Serialize)]
struct FrameSelection<'a> {
    frame_id: &'a str,
    markers: Vec<SelectedMarker<'a>>,
}

fn cmd_select(a: SelectArgs) -> anyhow::Result<ExitCode> {
    let (t0, unix) = (Instant::now(), unix_now());
    let l = load_data(&a.data)?;
    let sel = selection(&a.selection, &l.dataset.calibration)?;
    prepare_out(&a.out)?;
    let queries: Vec<_> = l
        .indices
        .iter()
        .map(|&i| (i, select_markers(&l.dataset.markers, &l.dataset.records[i].pose, &sel)))
        .collect();
    let frames: Vec<FrameSelection> = queries
        .iter()
        .map(|(i, q)| FrameSelection {
            frame_id: &l.dataset.records[*i].frame_id,
            markers: q
                .iter()
                .map(|b| SelectedMarker {
                    marker_id: &b.marker_id,
                    dist: b.polar.dist(),
                    bearing: b.polar.bearing(),
                })
                .collect(),
        })
        .collect();
    write_json(&a.out.join("selection.json"), &frames)?;
    write_metadata(&a.out, "select", t0, unix)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct FramePredictions<'a> {
    frame_id: &'a str,
    #[serde(flatten)]
    eval: &'a FrameEval,
}

fn write_method_outputs(
    out: &Path,
    method: Method,
    dataset: &Dataset,
    indices: &[usize],
    frames: &[FrameEval],
    iou_thresh: f64,
    d_max: f64,
) -> anyhow::Result<EvalReport> {
    let report = evaluate(frames, iou_thresh, d_max)?;
    let preds: Vec<FramePredictions> = indices
        .iter()
        .zip(frames)
        .map(|(&i, f)| FramePredictions {
            frame_id: &dataset.records[i].frame_id,
            eval: f,
        })
        .collect();
    let name = method.name();
    write_json(&out.join(format!("predictions_{name}.json")), &preds)?;
    fs::write(out.join(format!("report_{name}.json")), report.to_json()? + "\n")?;
    fs::write(out.join(format!("bins_{name}.csv")), report.bins_csv())?;
    Ok(report)
}

fn check_unit(name: &str, v: f64) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(usage(format!("--{name} {v} must be in [0, 1]")));
    }
    Ok(())
}

/// Baseline predictions; the distance baseline also returns its final
/// calibration state.
fn baseline_frames(
    method: Method,
    l: &Loaded,
    sel: &SelectionParams,
    gate: f64,
) -> anyhow::Result<(Vec<FrameEval>, Option<CalibrationState>)> {
    if !(gate > 0.0) {
        return Err(usage(format!("--gate {gate} must be positive")));
    }
    let records: Vec<_> = l.indices.iter().map(|&i| &l.dataset.records[i]).collect();
    let (cal, store): (&Calibration, &MarkerStore) = (&l.dataset.calibration, &l.dataset.markers);
    Ok(match method {
        Method::Raycast => (raycast_eval(&records, cal, store, sel, gate)?, None),
        Method::Distmatch => {
            let params = DistMatchParams::new(*sel, gate, cal.intrinsics.image_w);
            let (frames, state) = distmatch_eval(&records, cal, store, params)?;
            (frames, Some(state))
        }
        Method::Fusion => unreachable!("fusion is not a baseline"),
    })
}

fn cmd_baseline(a: BaselineArgs, method: Method) -> anyhow::Result<ExitCode> {
    let (t0, unix) = (Instant::now(), unix_now());
    check_unit("iou-thresh", a.iou_thresh)?;
    let l = load_data(&a.data)?;
    let sel = selection(&a.selection, &l.dataset.calibration)?;
    let (frames, state) = baseline_frames(method, &l, &sel, a.gate)?;
    prepare_out(&a.out)?;
    if let Some(state) = state {
        write_json(&a.out.join("calibration_state.json"), &state)?;
    }
    write_method_outputs(&a.out, method, &l.dataset, &l.indices, &frames, a.iou_thresh, sel.d_max)?;
    write_metadata(&a.out, method.name(), t0, unix)?;
    Ok(ExitCode::SUCCESS)
}

fn model_config(base: Option<ModelConfig>, a: &ModelArgs, image_hw: Option<(usize, usize)>) -> anyhow::Result<ModelConfig> {
    let mut cfg = match (base, image_hw) {
        (Some(c), _) => c,
        (None, Some((h, w))) => ModelConfig::for_image(h, w).map_err(|e| usage(e.to_string()))?,
        (None, None) => ModelConfig::default(),
    };
    if let Some(e) = a.embedding {
        cfg.embedding_kind = match e {
            EmbeddingArg::Mlp => EmbeddingKind::Mlp,
            EmbeddingArg::Learned => EmbeddingKind::LearnedDiscrete,
        };
    }
    if let Some(k) = a.attention {
        cfg.cross_attention_kind = match k {
            AttentionArg::Dense => CrossAttentionKind::Dense,
            AttentionArg::Deformable => CrossAttentionKind::Deformable,
        };
    }
    if let Some(k) = a.sampling_points {
        cfg.sampling_points = k;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    if let Some(hw) = image_hw {
        if cfg.image_hw != hw {
            return Err(usage(format!(
                "model expects {:?} images, dataset has {:?}",
                cfg.image_hw, hw
            )));
        }
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct ResolvedTraining<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    augment: &'a AugmentPolicy,
    selection: &'a SelectionParams,
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<ExitCode> {
    let (t0, unix) = (Instant::now(), unix_now());
    let file = load_config(a.config.as_deref())?;
    let l = load_data(&a.data)?;
    let intr = l.dataset.calibration.intrinsics;
    let hw = (intr.image_h as usize, intr.image_w as usize);
    let model_cfg = model_config(file.model, &a.model, Some(hw))?;
    let sel = selection(&a.selection, &l.dataset.calibration)?;
    let mut cfg = file.train.unwrap_or_default();
    cfg.d_max = sel.d_max;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(v) = a.vthresh {
        cfg.v_thresh = v;
    }
    if let Some(v) = a.iou_thresh {
        cfg.iou_thresh = v;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let mut policy = file.augment.unwrap_or_else(AugmentPolicy::none);
    if let Some(p) = a.hflip {
        check_unit("hflip", p)?;
        policy.hflip_prob = p;
    }
    if a.query_noise {
        policy.noise = Some(QueryNoise::for_range(sel.d_max));
    }
    if l.indices.is_empty() {
        bail!("no frames in the selected split");
    }
    prepare_out(&a.out)?;
    write_json(
        &a.out.join("resolved_config.json"),
        &ResolvedTraining {
            model: &model_cfg,
            train: &cfg,
            augment: &policy,
            selection: &sel,
        },
    )?;
    let opts = SampleOptions { selection: sel, d_max: sel.d_max };
    let source = DatasetSource::new(&l.dataset, l.indices.clone(), opts, policy)?;
    let mut model = FusionModel::new(model_cfg, cfg.seed)?;
    let mut log = Vec::new();
    train(&mut model, &source, &cfg, Some(&mut log))?;
    fs::write(a.out.join("train_log.jsonl"), log)?;
    save_checkpoint(&model, &a.out.join("model.ckpt"))?;
    write_metadata(&a.out, "train", t0, unix)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<ExitCode> {
    let (t0, unix) = (Instant::now(), unix_now());
    check_unit("iou-thresh", a.iou_thresh)?;
    check_unit("vthresh", a.vthresh)?;
    let l = load_data(&a.data)?;
    let sel = selection(&a.selection, &l.dataset.calibration)?;
    let model = match (a.methods.contains(&Method::Fusion), &a.checkpoint) {
        (true, Some(p)) => {
            require_exists(p, "checkpoint")?;
            Some(load_checkpoint(p)?)
        }
        (true, None) => return Err(usage("--method fusion needs --checkpoint")),
        (false, _) => None,
    };
    prepare_out(&a.out)?;
    let mut methods = a.methods.clone();
    methods.dedup();
    let mut summary = Vec::new();
    for m in methods {
        let frames = match m {
            Method::Fusion => {
                let opts = SampleOptions { selection: sel, d_max: sel.d_max };
                fusion_eval(model.as_ref().expect("checked"), &l.dataset, &l.indices, &opts, a.vthresh)?
            }
            _ => baseline_frames(m, &l, &sel, a.gate)?.0,
        };
        let r = write_method_outputs(&a.out, m, &l.dataset, &l.indices, &frames, a.iou_thresh, sel.d_max)?;
        summary.push(serde_json::json!({
            "method": m.name(),
            "precision": r.precision,
            "recall": r.recall,
            "f1": r.f1,
            "mean_iou": r.mean_iou,
        }));
    }
    write_json(&a.out.join("summary.json"), &summary)?;
    write_metadata(&a.out, "eval", t0, unix)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<ExitCode> {
    let (t0, unix) = (Instant::now(), unix_now());
    let file = load_config(a.config.as_deref())?;
    let cfg = model_config(file.model, &a.model, None)?;
    if a.samples == 0 || a.batch == 0 {
        return Err(usage("--samples and --batch must be positive"));
    }
    let model = FusionModel::new(cfg, a.seed)?;
    let samples = random_samples(&model, a.batch, a.seed.wrapping_add(1));
    let gc = GradCheckConfig {
        samples: a.samples,
        seed: a.seed,
        ..Default::default()
    };
    let report = gradcheck(&model, &samples, &gc)?;
    println!(
        "gradcheck: {} parameters, max relative error {:e}, {}",
        report.entries.len(),
        report.max_rel_err,
        if report.passed { "pass" } else { "FAIL" }
    );
    if let Some(out) = &a.out {
        prepare_out(out)?;
        write_json(&out.join("gradcheck.json"), &report)?;
        write_metadata(out, "gradcheck", t0, unix)?;
    }
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<ExitCode> {
    let (t0, unix) = (Instant::now(), unix_now());
    let file = load_config(a.config.as_deref())?;
    let mut spec = match (file.synth, a.benchmark) {
        (Some(_), true) => return Err(usage("--benchmark conflicts with a `synth` config section")),
        (Some(s), false) => s,
        (None, true) => chartfuse::experiment::benchmark_spec(0),
        (None, false) => chartfuse::experiment::overfit_spec(0),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;
    if a.frames == 0 {
        return Err(usage("--frames must be positive"));
    }
    prepare_out(&a.out)?;
    generate_synthetic(&spec, a.frames, &a.out)?;
    write_json(&a.out.join("synth_spec.json"), &spec)?;
    write_metadata(&a.out, "synth", t0, unix)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_serve(a: ServeArgs) -> anyhow::Result<ExitCode> {
    require_exists(&a.dataset, "dataset")?;
    let addr: std::net::SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| usage(format!("address {}:{}: {e}", a.host, a.port)))?;
    let rt = tokio::runtime::Runtime::new()?;
    eprintln!("serving {} on http://{addr}", a.dataset.display());
    rt.block_on(chartfuse_service::serve(&a.dataset, addr, a.static_dir.as_deref()))?;
    Ok(ExitCode::SUCCESS)
}
