//! `scenereplay`: segment GUI recordings, compare scenes with a device screen,
//! replay recordings on a device, and score the results.
//!
//! Exit codes: 0 success, 2 usage/input/config error, 3 replay budget
//! exhausted, 4 backend or device failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use scenereplay::comparison::{compare_state, select_roi};
use scenereplay::config::{RunConfig, API_KEY_ENV};
use scenereplay::eval::{
    comparison_eval, evaluate_segmentation, pool_segmentation, reproducibility, segmentation_table, ComparisonLabel,
    LabelEval, Reproducibility, DEFAULT_TOLERANCE,
};
use scenereplay::perception::{compose_dual_view, detect_regions};
use scenereplay::recording::{decode_image, load_recording, prepare, Recording};
use scenereplay::replay::{reproduce_scenes, Backends, ReplayTrace, TraceStatus};
use scenereplay::segmentation::{segment, SceneList, Segmentation};
use scenereplay::vlm::{account, UsageRecord};
use scenereplay::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_BUDGET: u8 = 3;
const EXIT_BACKEND: u8 = 4;

#[derive(Parser)]
#[command(name = "scenereplay", version, about = "Replay GUI screen recordings on a device")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (TOML or JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Zero wall-clock fields so outputs are byte-stable.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(short, long, global = true)]
    verbose: bool,
    /// Resample the recording to this frame rate; overrides `sample_fps`.
    #[arg(long, global = true)]
    fps: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Split a recording into action scenes.
    Segment {
        recording: PathBuf,
        /// Also write a before/after keyframe composite per scene.
        #[arg(long)]
        keyframes: bool,
    },
    /// Ask whether a device screenshot matches the state before one scene.
    Compare {
        recording: PathBuf,
        /// Device screenshot (PNG or JPEG).
        #[arg(long)]
        screen: PathBuf,
        /// Zero-based scene index.
        #[arg(long)]
        scene: usize,
    },
    /// Replay a recording on the configured device.
    Replay { recording: PathBuf },
    /// Score predictions against ground truth, matched by file name.
    Eval {
        predictions: PathBuf,
        truth: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: usize,
        /// Print text tables instead of JSON.
        #[arg(long)]
        table: bool,
    },
    /// Per-phase model usage, latency and cost over replay traces.
    Report {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        #[arg(long)]
        table: bool,
    },
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Backend { .. }
            | Error::Invocation { .. }
            | Error::Selection(_)
            | Error::Inference(_)
            | Error::Grounding { .. }
            | Error::Device(_) => EXIT_BACKEND,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<u8> {
    let g = &cli.global;
    match &cli.command {
        Command::Segment { recording, keyframes } => cmd_segment(g, recording, *keyframes),
        Command::Compare {
            recording,
            screen,
            scene,
        } => cmd_compare(g, recording, screen, *scene),
        Command::Replay { recording } => cmd_replay(g, recording),
        Command::Eval {
            predictions,
            truth,
            tolerance,
            table,
        } => cmd_eval(predictions, truth, *tolerance, *table),
        Command::Report { traces, table } => cmd_report(traces, *table),
    }
}

fn load_config(g: &Global) -> CliResult<RunConfig> {
    let mut config = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(fps) = g.fps {
        config.sample_fps = Some(fps);
    }
    if let Some(out) = &g.out {
        config.output_dir = Some(out.clone());
    }
    Ok(config)
}

fn api_key() -> Option<String> {
    std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty())
}

fn output_dir(config: &RunConfig) -> CliResult<PathBuf> {
    let dir = config
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("scenereplay-out"));
    fs::create_dir_all(&dir).map_err(|e| Failure::from(Error::io(&dir, e)))?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| Failure::from(Error::io(path, e)))
}

fn segment_recording(config: &RunConfig, path: &Path) -> CliResult<(Recording, Segmentation)> {
    let key = api_key();
    let embedding = config.build_embedding(key.clone())?;
    let ocr = config.build_ocr(key)?;
    let recording = load_recording(path, config.sample_fps)?;
    let embedded = prepare(&recording, embedding.as_ref())?;
    let seg = segment(&embedded, ocr.as_ref(), &config.segmentation)?;
    Ok((recording, seg))
}

fn cmd_segment(g: &Global, path: &Path, keyframes: bool) -> CliResult<u8> {
    let config = load_config(g)?;
    config.validate_offline()?;
    let (recording, seg) = segment_recording(&config, path)?;
    let out = output_dir(&config)?;
    let scenes = SceneList::from_scenes(&seg.scenes);
    let mut text = serde_json::to_string_pretty(&scenes).expect("scene list serializes");
    text.push('\n');
    write(&out.join("scenes.json"), text)?;
    write(&out.join("similarity.csv"), seg.series.to_csv())?;
    if keyframes {
        let detector = config.build_detector(api_key())?;
        let dir = out.join("keyframes");
        fs::create_dir_all(&dir).map_err(|e| Failure::from(Error::io(&dir, e)))?;
        for (i, scene) in seg.scenes.iter().enumerate() {
            let regions = detect_regions(&scene.first_frame, detector.as_ref(), &config.detection)?;
            let img = compose_dual_view(&scene.first_frame.pixels, &scene.last_frame.pixels, &regions)?;
            let file = dir.join(format!("scene_{i:03}.png"));
            img.save(&file)
                .map_err(|e| usage(format!("{}: {e}", file.display())))?;
        }
    }
    println!(
        "{} frames, {} scenes -> {}",
        recording.len(),
        seg.scenes.len(),
        out.join("scenes.json").display()
    );
    Ok(0)
}

fn cmd_compare(g: &Global, path: &Path, screen: &Path, index: usize) -> CliResult<u8> {
    let config = load_config(g)?;
    config.validate()?;
    let key = api_key();
    let detector = config.build_detector(key.clone())?;
    let client = config.build_vlm(key)?;
    let (_, seg) = segment_recording(&config, path)?;
    let scene = seg.scenes.get(index).ok_or_else(|| {
        usage(format!(
            "scene {index} does not exist; the recording has {} scene(s)",
            seg.scenes.len()
        ))
    })?;
    let pixels = decode_image(screen)?;
    let (roi, _) = select_roi(scene, index, detector.as_ref(), &client, &config.detection)?;
    let screen_id = screen
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (verdict, _) = compare_state(scene, &roi, Arc::new(pixels), &screen_id, &client, &config.compare)?;
    let calls = client.usage_log();
    let report = json!({
        "roi": {"region": roi.region, "candidates": roi.candidates.len(), "synthetic": roi.synthetic},
        "verdict": verdict,
        "usage": account(&calls).to_json(),
    });
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    let out = output_dir(&config)?;
    write(&out.join("compare.json"), &text)?;
    print!("{text}");
    Ok(0)
}

fn cmd_replay(g: &Global, path: &Path) -> CliResult<u8> {
    let config = load_config(g)?;
    config.validate()?;
    let key = api_key();
    let detector = config.build_detector(key.clone())?;
    let client = config.build_vlm(key.clone())?;
    let mut device = config.build_device()?;
    let embedding = config.build_embedding(key.clone())?;
    let ocr = config.build_ocr(key)?;
    let recording = load_recording(path, config.sample_fps)?;
    let embedded = prepare(&recording, embedding.as_ref())?;
    let seg = segment(&embedded, ocr.as_ref(), &config.segmentation)?;
    if seg.scenes.is_empty() {
        return Err(usage(format!("{}: no action scenes were detected", path.display())));
    }
    let backends = Backends {
        embedding: embedding.as_ref(),
        ocr: ocr.as_ref(),
        detector: detector.as_ref(),
        vlm: &client,
    };
    let options = config.replay_options(g.deterministic);
    let trace = reproduce_scenes(&seg.scenes, device.as_mut(), backends, &options);
    let out = output_dir(&config)?;
    let mut text = trace.to_json_pretty();
    text.push('\n');
    write(&out.join("trace.json"), text)?;
    println!(
        "{}: {} scenes, {} steps ({} explore) -> {}",
        trace.status.as_str(),
        trace.scenes,
        trace.steps.len(),
        trace.explore_steps(),
        out.join("trace.json").display()
    );
    match trace.status {
        TraceStatus::Reproduced => Ok(0),
        TraceStatus::BudgetExhausted => Ok(EXIT_BUDGET),
        TraceStatus::Error => Err(Failure {
            code: EXIT_BACKEND,
            message: trace.error.unwrap_or_else(|| "replay failed".into()),
        }),
    }
}

enum Prediction {
    Scenes(SceneList),
    Labels(Vec<ComparisonLabel>),
    Trace(Box<ReplayTrace>),
}

fn read_json(path: &Path) -> CliResult<Value> {
    let text = fs::read_to_string(path).map_err(|e| Failure::from(Error::io(path, e)))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn classify(path: &Path, value: Value) -> CliResult<Prediction> {
    let bad = |e: serde_json::Error| usage(format!("{}: {e}", path.display()));
    if value.is_array() {
        return serde_json::from_value(value).map(Prediction::Labels).map_err(bad);
    }
    if value.get("steps").is_some() && value.get("status").is_some() {
        return serde_json::from_value(value)
            .map(|t| Prediction::Trace(Box::new(t)))
            .map_err(bad);
    }
    if value.get("scenes").is_some() {
        return serde_json::from_value(value).map(Prediction::Scenes).map_err(bad);
    }
    Err(usage(format!(
        "{}: not a scene list, comparison label list or replay trace",
        path.display()
    )))
}

fn json_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Failure::from(Error::io(dir, e)))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    Ok(files)
}

/// Pairs labels by scene index; scenes missing from either side are errors.
fn align(path: &Path, predicted: &[ComparisonLabel], truth: &[ComparisonLabel]) -> CliResult<(Vec<bool>, Vec<bool>)> {
    let by_scene: BTreeMap<usize, bool> = predicted.iter().map(|l| (l.scene, l.consistent)).collect();
    let mut p = Vec::with_capacity(truth.len());
    let mut t = Vec::with_capacity(truth.len());
    for label in truth {
        let Some(&v) = by_scene.get(&label.scene) else {
            return Err(usage(format!("{}: no prediction for scene {}", path.display(), label.scene)));
        };
        p.push(v);
        t.push(label.consistent);
    }
    if by_scene.len() != truth.len() {
        return Err(usage(format!(
            "{}: {} predicted scenes for {} labeled scenes",
            path.display(),
            by_scene.len(),
            truth.len()
        )));
    }
    Ok((p, t))
}

fn cmd_eval(pred_dir: &Path, truth_dir: &Path, tolerance: usize, table: bool) -> CliResult<u8> {
    let files = json_files(pred_dir)?;
    if files.is_empty() {
        return Err(usage(format!("{}: no prediction files", pred_dir.display())));
    }
    let mut seg_rows = Vec::new();
    let (mut cmp_pred, mut cmp_truth) = (Vec::new(), Vec::new());
    let (mut traces, mut bugs) = (Vec::new(), Vec::new());
    for file in &files {
        let name = file.file_name().expect("listed file has a name");
        let truth_path = truth_dir.join(name);
        if !truth_path.exists() {
            return Err(usage(format!("{}: no ground truth file", truth_path.display())));
        }
        match classify(file, read_json(file)?)? {
            Prediction::Scenes(pred) => {
                let truth: SceneList = serde_json::from_value(read_json(&truth_path)?)
                    .map_err(|e| usage(format!("{}: {e}", truth_path.display())))?;
                let stem = Path::new(name).with_extension("");
                seg_rows.push((stem.display().to_string(), evaluate_segmentation(&pred, &truth, tolerance)));
            }
            Prediction::Labels(pred) => {
                let truth: Vec<ComparisonLabel> = serde_json::from_value(read_json(&truth_path)?)
                    .map_err(|e| usage(format!("{}: {e}", truth_path.display())))?;
                let (p, t) = align(file, &pred, &truth)?;
                cmp_pred.extend(p);
                cmp_truth.extend(t);
            }
            Prediction::Trace(trace) => {
                let truth = read_json(&truth_path)?;
                let bug = truth
                    .get("bug_reached")
                    .and_then(Value::as_bool)
                    .or(trace.bug_reached)
                    .ok_or_else(|| usage(format!("{}: missing \"bug_reached\"", truth_path.display())))?;
                traces.push(*trace);
                bugs.push(bug);
            }
        }
    }

    let mut report = serde_json::Map::new();
    let mut text = String::new();
    if !seg_rows.is_empty() {
        let pooled = pool_segmentation(seg_rows.iter().map(|(_, e)| e), tolerance);
        text.push_str(&segmentation_table(&seg_rows, &pooled));
        let recordings: serde_json::Map<String, Value> = seg_rows
            .iter()
            .map(|(n, e)| (n.clone(), serde_json::to_value(e).expect("eval serializes")))
            .collect();
        report.insert("segmentation".into(), json!({"recordings": recordings, "pooled": pooled}));
    }
    if !cmp_truth.is_empty() {
        let eval = comparison_eval(&cmp_pred, &cmp_truth, true)?;
        text.push_str(&comparison_table(&eval));
        report.insert("comparison".into(), serde_json::to_value(eval).expect("eval serializes"));
    }
    if !traces.is_empty() {
        let r = reproducibility(&traces, &bugs)?;
        text.push_str(&reproducibility_table(&r));
        report.insert("reproducibility".into(), serde_json::to_value(r).expect("eval serializes"));
    }
    if table {
        print!("{text}");
    } else {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    }
    Ok(0)
}

fn comparison_table(e: &LabelEval) -> String {
    format!(
        "\n{:>9}  {:>6}  {:>5}  {:>4}  {:>4}  {:>4}  {:>4}\n{:>9.2}  {:>6.2}  {:>5.2}  {:>4}  {:>4}  {:>4}  {:>4}\n",
        "precision", "recall", "f1", "tp", "fp", "fn", "tn", e.precision, e.recall, e.f1, e.tp, e.fp, e.fn_, e.tn
    )
}

fn reproducibility_table(r: &Reproducibility) -> String {
    format!(
        "\n{:>6}  {:>10}  {:>6}  {:>12}\n{:>6}  {:>10}  {:>5.1}%  {:>12.1}\n",
        "total",
        "reproduced",
        "rate",
        "mean time(s)",
        r.total,
        r.reproduced,
        r.rate * 100.0,
        r.mean_wall_time
    )
}

fn cmd_report(paths: &[PathBuf], table: bool) -> CliResult<u8> {
    let mut calls: Vec<UsageRecord> = Vec::new();
    for path in paths {
        let trace: ReplayTrace = serde_json::from_value(read_json(path)?)
            .map_err(|e| usage(format!("{}: not a replay trace: {e}", path.display())))?;
        calls.extend(trace.calls);
    }
    let report = account(&calls);
    if table {
        print!("{}", report.to_table());
    } else {
        println!("{}", serde_json::to_string_pretty(&report.to_json()).expect("report serializes"));
    }
    Ok(0)
}
