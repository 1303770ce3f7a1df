//! Batch command-line front end: wires image I/O, scaling, the
//! differentiable and black-box pipelines, the attacks, the proxy, and the
//! defenses into reproducible workflows. Every invocation writes its
//! artifacts plus a `manifest.json` capturing the fully resolved
//! configuration; `rerun --manifest <path>` re-executes any recorded run.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, transfer_attack, AttackConfig, ClipMode, GradientOracle};
use crate::defense::{evaluate_defense, FilterKind, FilterWindow};
use crate::error::{Error, Result};
use crate::eval::{c_sweep, verdict, Predictor, SweepInstance, VerdictThresholds};
use crate::image::{load_raw, load_rgb, save_raw, save_rgb, RawImage, RgbImage};
use crate::isp::DifferentiableIsp;
use crate::proxy::{load_checkpoint, save_checkpoint, train_proxy, ProxyLossConfig, TrainSchedule};
use crate::scaling::{build_operator, scale_raw, scale_rgb, ScalingAlgorithm, ScalingOperator};
use crate::target_isp::{BlackBoxIsp, TargetIspConfig};

pub const TOOL_NAME: &str = env!("CARGO_PKG_NAME");
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "rawscale", version, about = "RAW-domain image-scaling attack toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Run a differentiable pipeline config over a RAW image.
    IspRun(IspRunArgs),
    /// Downscale an RGB (P6 PPM) or RAW (P5 PGM) image.
    Scale(ScaleArgs),
    /// Gradient-available attack against a differentiable pipeline.
    AttackDirect(AttackDirectArgs),
    /// Train the proxy network against the black-box target pipeline.
    TrainProxy(TrainProxyArgs),
    /// Proxy-gradient attack, replayed through the black-box target.
    AttackProxy(AttackProxyArgs),
    /// Evaluate average/median RAW filtering against an adversarial RAW.
    Defend(DefendArgs),
    /// Sweep the objective weight c over one attack instance.
    SweepC(SweepCArgs),
    /// Re-execute a recorded run from its manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct IspRunArgs {
    /// Input RAW image (16-bit P5 PGM with .meta.json sidecar).
    #[arg(long)]
    pub raw: PathBuf,
    /// Pipeline stages as JSON; defaults to bilinear demosaicing only.
    #[arg(long)]
    pub pipeline: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ScaleArgs {
    /// Input image: .ppm is treated as RGB, .pgm as RAW.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value = "bilinear")]
    pub algorithm: String,
    #[arg(long)]
    pub height: usize,
    #[arg(long)]
    pub width: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AttackDirectArgs {
    /// Source RAW S_R.
    #[arg(long)]
    pub raw: PathBuf,
    /// Target image T (P6 PPM) at the output size.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub pipeline: Option<PathBuf>,
    #[arg(long, default_value = "bilinear")]
    pub algorithm: String,
    #[arg(long, default_value_t = 2.5)]
    pub c: f64,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0.01)]
    pub learning_rate: f64,
    /// `every_step` or `final_only`.
    #[arg(long, default_value = "every_step")]
    pub clip_mode: String,
    /// Directory of labeled prototype PPMs (label = file stem).
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainProxyArgs {
    /// Directory of RAW training images (P5 PGM + sidecars).
    #[arg(long)]
    pub raw_dir: PathBuf,
    /// Black-box target pipeline parameters as JSON; defaults when omitted.
    #[arg(long)]
    pub target_isp: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Optional square patch size to tile the RAWs into.
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AttackProxyArgs {
    #[arg(long)]
    pub raw: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Trained proxy checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub target_isp: Option<PathBuf>,
    #[arg(long, default_value = "bilinear")]
    pub algorithm: String,
    #[arg(long, default_value_t = 2.5)]
    pub c: f64,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0.01)]
    pub learning_rate: f64,
    #[arg(long, default_value = "every_step")]
    pub clip_mode: String,
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DefendArgs {
    /// Clean source RAW.
    #[arg(long)]
    pub source_raw: PathBuf,
    /// Adversarial RAW to filter.
    #[arg(long)]
    pub adversarial_raw: PathBuf,
    /// Target image T used to judge attack success.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, default_value = "median")]
    pub filter: String,
    #[arg(long, default_value_t = 1)]
    pub radius: usize,
    #[arg(long)]
    pub pipeline: Option<PathBuf>,
    #[arg(long, default_value = "bilinear")]
    pub algorithm: String,
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepCArgs {
    #[arg(long)]
    pub raw: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub pipeline: Option<PathBuf>,
    #[arg(long, default_value = "bilinear")]
    pub algorithm: String,
    /// Comma-separated list of c values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub c_values: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0.01)]
    pub learning_rate: f64,
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RerunArgs {
    /// Manifest of a previous run.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Optional replacement output directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Written next to all artifacts; sufficient to reproduce the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    #[serde(flatten)]
    pub command: Command,
    /// Artifact file names inside the output directory.
    pub artifacts: Vec<String>,
    pub duration_seconds: f64,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn load_pipeline(path: &Option<PathBuf>) -> Result<DifferentiableIsp> {
    match path {
        Some(p) => DifferentiableIsp::from_json(&fs::read_to_string(p)?),
        None => Ok(DifferentiableIsp::demosaic_only()),
    }
}

fn load_target_isp(path: &Option<PathBuf>) -> Result<BlackBoxIsp> {
    match path {
        Some(p) => BlackBoxIsp::from_json(&fs::read_to_string(p)?),
        None => BlackBoxIsp::new(TargetIspConfig::default()),
    }
}

/// Loads a prototype gallery from a directory of P6 PPM files; the label is
/// the file stem. Entries are sorted by label for determinism.
pub fn load_gallery(dir: &Path) -> Result<Predictor> {
    let mut entries: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("ppm") {
            let label = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Config(format!("bad gallery file name: {path:?}")))?
                .to_string();
            entries.push((label, path));
        }
    }
    entries.sort();
    let mut prototypes = Vec::with_capacity(entries.len());
    for (label, path) in entries {
        prototypes.push((label, load_rgb(&path)?));
    }
    Predictor::gallery(prototypes)
}

fn parse_filter(s: &str) -> Result<FilterKind> {
    match s.to_ascii_lowercase().as_str() {
        "average" | "mean" => Ok(FilterKind::Average),
        "median" => Ok(FilterKind::Median),
        other => Err(Error::Config(format!("unknown filter kind: {other}"))),
    }
}

fn parse_clip(s: &str) -> Result<ClipMode> {
    match s.to_ascii_lowercase().as_str() {
        "every_step" | "every-step" => Ok(ClipMode::EveryStep),
        "final_only" | "final-only" => Ok(ClipMode::FinalOnly),
        other => Err(Error::Config(format!("unknown clip mode: {other}"))),
    }
}

fn operator_for(algorithm: &str, src: (usize, usize), dst: (usize, usize)) -> Result<ScalingOperator> {
    let alg: ScalingAlgorithm = algorithm.parse()?;
    build_operator(alg, src, dst)
}

fn write_trace_csv(path: &Path, trace: &[crate::attack::AttackObjectiveReport]) -> Result<()> {
    let mut out = String::from("iteration,raw_term,out_term,total\n");
    for (i, row) in trace.iter().enumerate() {
        out.push_str(&format!("{i},{:.17e},{:.17e},{:.17e}\n", row.raw_term, row.out_term, row.total));
    }
    write_atomic(path, out.as_bytes())
}

/// Executes one subcommand; returns the artifact names written to `out_dir`.
fn dispatch(command: &Command) -> Result<(PathBuf, Vec<String>)> {
    match command {
        Command::IspRun(a) => cmd_isp_run(a),
        Command::Scale(a) => cmd_scale(a),
        Command::AttackDirect(a) => cmd_attack_direct(a),
        Command::TrainProxy(a) => cmd_train_proxy(a),
        Command::AttackProxy(a) => cmd_attack_proxy(a),
        Command::Defend(a) => cmd_defend(a),
        Command::SweepC(a) => cmd_sweep_c(a),
        Command::Rerun(_) => unreachable!("rerun is resolved before dispatch"),
    }
}

/// Entry point used by the binary. Parses `cli`, executes, writes the
/// manifest, and returns the path of the manifest written.
pub fn run(cli: Cli) -> Result<PathBuf> {
    let mut command = cli.command;
    if let Command::Rerun(args) = &command {
        let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(&args.manifest)?)?;
        let mut inner = manifest.command;
        if let Some(dir) = &args.out_dir {
            set_out_dir(&mut inner, dir.clone());
        }
        command = inner;
    }
    let start = Instant::now();
    let (out_dir, artifacts) = dispatch(&command)?;
    let manifest = RunManifest {
        tool: TOOL_NAME.to_string(),
        version: TOOL_VERSION.to_string(),
        command,
        artifacts,
        duration_seconds: start.elapsed().as_secs_f64(),
    };
    let path = out_dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

fn set_out_dir(command: &mut Command, dir: PathBuf) {
    match command {
        Command::IspRun(a) => a.out_dir = dir,
        Command::Scale(a) => a.out_dir = dir,
        Command::AttackDirect(a) => a.out_dir = dir,
        Command::TrainProxy(a) => a.out_dir = dir,
        Command::AttackProxy(a) => a.out_dir = dir,
        Command::Defend(a) => a.out_dir = dir,
        Command::SweepC(a) => a.out_dir = dir,
        Command::Rerun(a) => a.out_dir = Some(dir),
    }
}

fn ensure_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn cmd_isp_run(a: &IspRunArgs) -> Result<(PathBuf, Vec<String>)> {
    let raw = load_raw(&a.raw)?;
    let isp = load_pipeline(&a.pipeline)?;
    let rgb = isp.forward(&raw)?;
    ensure_out_dir(&a.out_dir)?;
    save_rgb(&rgb, a.out_dir.join("output.ppm"))?;
    Ok((a.out_dir.clone(), vec!["output.ppm".into()]))
}

fn cmd_scale(a: &ScaleArgs) -> Result<(PathBuf, Vec<String>)> {
    let is_raw = a.image.extension().and_then(|e| e.to_str()) == Some("pgm");
    ensure_out_dir(&a.out_dir)?;
    let name = if is_raw {
        let raw = load_raw(&a.image)?;
        let op = operator_for(&a.algorithm, raw.data.dim(), (a.height, a.width))?;
        let scaled = scale_raw(&op, &raw)?;
        save_raw(&scaled, a.out_dir.join("scaled.pgm"))?;
        vec!["scaled.pgm".into(), "scaled.meta.json".into()]
    } else {
        let rgb = load_rgb(&a.image)?;
        let op = operator_for(&a.algorithm, (rgb.height(), rgb.width()), (a.height, a.width))?;
        let scaled = scale_rgb(&op, &rgb)?;
        save_rgb(&scaled, a.out_dir.join("scaled.ppm"))?;
        vec!["scaled.ppm".into()]
    };
    Ok((a.out_dir.clone(), name))
}

struct AttackArtifacts {
    artifacts: Vec<String>,
}

/// Shared tail of both attack subcommands: writes A_R, A, O, the trace, and
/// (when a gallery is available) the verdict.
#[allow(clippy::too_many_arguments)]
fn write_attack_artifacts(
    out_dir: &Path,
    s_r: &RawImage,
    a_r: &RawImage,
    s: &RgbImage,
    a_img: &RgbImage,
    t: &RgbImage,
    o: &RgbImage,
    trace: &[crate::attack::AttackObjectiveReport],
    predictor: Option<&Predictor>,
) -> Result<AttackArtifacts> {
    ensure_out_dir(out_dir)?;
    save_raw(a_r, out_dir.join("adversarial_raw.pgm"))?;
    save_rgb(a_img, out_dir.join("attack.ppm"))?;
    save_rgb(o, out_dir.join("output.ppm"))?;
    write_trace_csv(&out_dir.join("trace.csv"), trace)?;
    let mut artifacts: Vec<String> = vec![
        "adversarial_raw.pgm".into(),
        "adversarial_raw.meta.json".into(),
        "attack.ppm".into(),
        "output.ppm".into(),
        "trace.csv".into(),
    ];
    if let Some(pred) = predictor {
        let v = verdict(s_r, a_r, s, a_img, t, o, pred, &VerdictThresholds::default())?;
        write_json(&out_dir.join("verdict.json"), &v)?;
        artifacts.push("verdict.json".into());
    }
    Ok(AttackArtifacts { artifacts })
}

fn cmd_attack_direct(a: &AttackDirectArgs) -> Result<(PathBuf, Vec<String>)> {
    let s_r = load_raw(&a.raw)?;
    let t = load_rgb(&a.target)?;
    let isp = load_pipeline(&a.pipeline)?;
    let predictor = a.gallery.as_ref().map(|g| load_gallery(g)).transpose()?;
    let op = operator_for(&a.algorithm, s_r.data.dim(), (t.height(), t.width()))?;
    let cfg = AttackConfig {
        c: a.c,
        iterations: a.iterations,
        learning_rate: a.learning_rate,
        clip_mode: parse_clip(&a.clip_mode)?,
        ..AttackConfig::default()
    };
    let outcome = run_attack(&isp, &s_r, &t, &op, &cfg, a.seed)?;
    let a_r = &outcome.adversarial_raw;
    let s = isp.forward(&s_r)?;
    let a_img = isp.forward(a_r)?;
    let o = scale_rgb(&op, &a_img)?;
    let art = write_attack_artifacts(
        &a.out_dir, &s_r, a_r, &s, &a_img, &t, &o, &outcome.trace, predictor.as_ref(),
    )?;
    Ok((a.out_dir.clone(), art.artifacts))
}

fn cmd_train_proxy(a: &TrainProxyArgs) -> Result<(PathBuf, Vec<String>)> {
    let mut raw_paths: Vec<PathBuf> = fs::read_dir(&a.raw_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("pgm"))
        .collect();
    raw_paths.sort();
    if raw_paths.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut raws = Vec::with_capacity(raw_paths.len());
    for p in &raw_paths {
        raws.push(load_raw(p)?);
    }
    let raws = match a.patch_size {
        Some(size) => {
            // tile through the black-box pair generator's patch logic by
            // tiling the raws here so training sees uniform patch sizes
            let target = load_target_isp(&a.target_isp)?;
            crate::target_isp::generate_pairs(&target, &raws, Some(size))?
                .into_iter()
                .map(|(r, _)| r)
                .collect()
        }
        None => raws,
    };
    let target = load_target_isp(&a.target_isp)?;
    let cfg = ProxyLossConfig::default();
    let schedule = TrainSchedule { steps: a.steps, batch: a.batch, lr: a.lr };
    let (model, report) = train_proxy(&target, &raws, &cfg, &schedule, a.seed)?;
    ensure_out_dir(&a.out_dir)?;
    save_checkpoint(&model, &a.out_dir.join("proxy.ckpt"))?;
    let mut csv = String::from("step,total_loss\n");
    for (i, l) in report.history.iter().enumerate() {
        csv.push_str(&format!("{i},{l:.17e}\n"));
    }
    write_atomic(&a.out_dir.join("history.csv"), csv.as_bytes())?;
    write_json(&a.out_dir.join("training_report.json"), &report)?;
    Ok((
        a.out_dir.clone(),
        vec![
            "proxy.ckpt".into(),
            "proxy.ckpt.manifest.json".into(),
            "history.csv".into(),
            "training_report.json".into(),
        ],
    ))
}

fn cmd_attack_proxy(a: &AttackProxyArgs) -> Result<(PathBuf, Vec<String>)> {
    let s_r = load_raw(&a.raw)?;
    let t = load_rgb(&a.target)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let target = load_target_isp(&a.target_isp)?;
    let predictor = a.gallery.as_ref().map(|g| load_gallery(g)).transpose()?;
    let op = operator_for(&a.algorithm, s_r.data.dim(), (t.height(), t.width()))?;
    let cfg = AttackConfig {
        c: a.c,
        iterations: a.iterations,
        learning_rate: a.learning_rate,
        clip_mode: parse_clip(&a.clip_mode)?,
        ..AttackConfig::default()
    };
    let outcome = run_attack(&model, &s_r, &t, &op, &cfg, a.seed)?;
    let a_r = &outcome.adversarial_raw;
    // replay through the real black-box target
    let (a_img, o, metrics) = transfer_attack(&s_r, a_r, &target, &op, &t, predictor.as_ref())?;
    let s = target.query(&s_r)?;
    let mut art = write_attack_artifacts(
        &a.out_dir, &s_r, a_r, &s, &a_img, &t, &o, &outcome.trace, predictor.as_ref(),
    )?;
    write_json(&a.out_dir.join("transfer.json"), &metrics)?;
    art.artifacts.push("transfer.json".into());
    Ok((a.out_dir.clone(), art.artifacts))
}

fn cmd_defend(a: &DefendArgs) -> Result<(PathBuf, Vec<String>)> {
    let s_r = load_raw(&a.source_raw)?;
    let a_r = load_raw(&a.adversarial_raw)?;
    let t = load_rgb(&a.target)?;
    let isp = load_pipeline(&a.pipeline)?;
    let predictor = load_gallery(&a.gallery)?;
    let op = operator_for(&a.algorithm, s_r.data.dim(), (t.height(), t.width()))?;
    let window = FilterWindow::new(parse_filter(&a.filter)?, a.radius)?;
    let forward = |r: &RawImage| isp.forward(r);
    let report = evaluate_defense(&s_r, &a_r, &forward, &op, &t, &window, &predictor)?;
    let filtered = crate::defense::filter_raw(&a_r, &window)?;
    ensure_out_dir(&a.out_dir)?;
    save_raw(&filtered, a.out_dir.join("filtered_raw.pgm"))?;
    write_json(&a.out_dir.join("defense.json"), &report)?;
    Ok((
        a.out_dir.clone(),
        vec![
            "filtered_raw.pgm".into(),
            "filtered_raw.meta.json".into(),
            "defense.json".into(),
        ],
    ))
}

fn cmd_sweep_c(a: &SweepCArgs) -> Result<(PathBuf, Vec<String>)> {
    let s_r = load_raw(&a.raw)?;
    let t = load_rgb(&a.target)?;
    let isp = load_pipeline(&a.pipeline)?;
    let predictor = a.gallery.as_ref().map(|g| load_gallery(g)).transpose()?;
    let op = operator_for(&a.algorithm, s_r.data.dim(), (t.height(), t.width()))?;
    let base_config = AttackConfig {
        iterations: a.iterations,
        learning_rate: a.learning_rate,
        ..AttackConfig::default()
    };
    let oracle: &dyn GradientOracle = &isp;
    let instance = SweepInstance {
        oracle,
        source_raw: &s_r,
        target: &t,
        operator: &op,
        base_config,
        predictor: predictor.as_ref(),
    };
    let rows = c_sweep(&instance, &a.c_values, a.seed)?;
    ensure_out_dir(&a.out_dir)?;
    let mut csv = String::from("c,raw_term,out_term,objective1_met\n");
    for r in &rows {
        let o1 = r
            .objective1_met
            .map(|b| b.to_string())
            .unwrap_or_else(|| "n/a".into());
        csv.push_str(&format!("{},{:.17e},{:.17e},{}\n", r.c, r.raw_term, r.out_term, o1));
    }
    write_atomic(&a.out_dir.join("sweep.csv"), csv.as_bytes())?;
    write_json(&a.out_dir.join("sweep.json"), &rows)?;
    Ok((a.out_dir.clone(), vec!["sweep.csv".into(), "sweep.json".into()]))
}

/// Convenience for tests: run from an argument vector.
pub fn run_from<I, S>(args: I) -> Result<PathBuf>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    run(cli)
}
