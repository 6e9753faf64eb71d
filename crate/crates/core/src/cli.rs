//! The `dmfnet` command line: data generation, training, evaluation and
//! single-shape completion.
//!
//! Exit codes: 0 on success, 2 for usage, configuration and shape errors,
//! 3 when training produces a non-finite value, 4 for file and format errors.

use std::ffi::OsString;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{NetConfig, Preset};
use crate::dataio::manifest::{DEFAULT_OCCLUSION, MANIFEST_FILE};
use crate::dataio::{
    gen_dataset, load_checkpoint, load_dataset, load_ply, load_ppm, save_checkpoint, save_ply, DatasetSpec,
    ShapeKind,
};
use crate::error::{Error, Result};
use crate::geometry::{fps, PointSet};
use crate::metrics::CD_DISPLAY_SCALE;
use crate::model::DmfNet;
use crate::training::{
    evaluate, evaluate_with, fit, AdamState, EvalReport, MetricMeans, TrainConfig, EVAL_TAU, LOG_HEADER,
};

/// Average L2-CD×10³ of the published model on ShapeNet-ViPC. Shown beside
/// evaluation tables for orientation only; synthetic runs are not expected to
/// approach it.
pub const PUBLISHED_AVG_L2_CD: f64 = 1.038;

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.dmfn";

#[derive(Debug, Parser)]
#[command(name = "dmfnet", version, about = "Image-guided point cloud completion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of occluded primitives with silhouettes.
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and print a metrics table.
    Eval(EvalArgs),
    /// Complete one partial cloud guided by one image.
    Complete(CompleteArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value = "toy")]
    pub preset: Preset,
    /// Total samples, cycling through sphere, box and cylinder.
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    /// Explicit per-shape counts such as `sphere=2,box=2`; replaces --count.
    #[arg(long)]
    pub counts: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_OCCLUSION)]
    pub occlusion: f64,
    /// Override a preset constant, e.g. `--set n=128`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest, or the directory holding it.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "toy")]
    pub preset: Preset,
    /// Override any network or training constant, e.g. `--set decay_every=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seed of the per-epoch shuffles.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed of the weight initialization.
    #[arg(long, default_value_t = 0)]
    pub net_seed: u64,
    /// Also checkpoint after every k-th epoch (0 keeps only the final one).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Continue from a checkpoint written by an earlier run into the same --out.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "gt_as_prediction")]
    pub checkpoint: Option<PathBuf>,
    /// Resolved run config; defaults to config.json beside the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for eval.txt, eval.csv and the config echo.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = EVAL_TAU)]
    pub tau: f64,
    /// Score the ground truth against itself (a pipeline sanity check).
    #[arg(long)]
    pub gt_as_prediction: bool,
}

#[derive(Debug, Args)]
pub struct CompleteArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Partial cloud in ASCII PLY.
    #[arg(long)]
    pub input: PathBuf,
    /// Guiding image in plain PPM.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the coarse, seed and intermediate clouds.
    #[arg(long)]
    pub stages: bool,
    /// Bring the input to the model's point count (FPS down, cyclic repeat up).
    #[arg(long)]
    pub resample: bool,
}

/// Everything needed to rebuild a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub net_seed: u64,
}

impl RunConfig {
    /// The preset with `key=value` overrides applied and validated.
    pub fn resolve(preset: Preset, sets: &[String]) -> Result<Self> {
        let mut rc = RunConfig {
            preset,
            net: NetConfig::preset(preset),
            train: TrainConfig::default(),
            net_seed: 0,
        };
        rc.apply(sets)?;
        Ok(rc)
    }

    /// Applies overrides by field name. Values are JSON, so arrays are written
    /// `k_pool=[16,6]` and optional values can be cleared with `clip_norm=null`.
    pub fn apply(&mut self, sets: &[String]) -> Result<()> {
        let mut net = to_value(&self.net)?;
        let mut train = to_value(&self.train)?;
        for s in sets {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {s:?} is not KEY=VALUE")))?;
            let key = key.trim();
            let value: Value = serde_json::from_str(raw.trim())
                .map_err(|e| Error::Config(format!("value of {key}: {e}")))?;
            let slot = [&mut net, &mut train]
                .into_iter()
                .find_map(|obj| obj.as_object_mut().and_then(|m| m.get_mut(key)))
                .ok_or_else(|| Error::Config(format!("unknown setting {key:?}")))?;
            *slot = value;
        }
        self.net = serde_json::from_value(net).map_err(|e| Error::Config(e.to_string()))?;
        self.train = serde_json::from_value(train).map_err(|e| Error::Config(e.to_string()))?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rc: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        rc.validate()?;
        Ok(rc)
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::Config(e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

/// Maps a library error to the process exit code.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Shape { .. } | Error::InvalidArgument { .. } | Error::Config(_) => 2,
        Error::NonFinite(_) => 3,
        Error::Parse { .. } | Error::Checkpoint(_) | Error::Manifest(_) | Error::Io { .. } => 4,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Messages go to stdout, errors to stderr.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code() as u8;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => {
            let (path, count) = cmd_gen_data(&a)?;
            println!("{}", path.display());
            println!("{count} samples");
        }
        Command::Train(a) => {
            let path = cmd_train(&a)?;
            println!("{}", path.display());
        }
        Command::Eval(a) => {
            let table = cmd_eval(&a)?;
            print!("{}", table.text);
        }
        Command::Complete(a) => {
            for p in cmd_complete(&a)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

// ---- gen-data -------------------------------------------------------------

#[derive(Debug, Serialize)]
struct GenerationEcho {
    preset: Preset,
    n: usize,
    image_size: usize,
    seed: u64,
    occlusion: f64,
    counts: Vec<(String, usize)>,
}

fn parse_counts(s: &str) -> Result<Vec<(ShapeKind, usize)>> {
    s.split(',')
        .map(|part| {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("count {part:?} is not SHAPE=COUNT")))?;
            let n = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("count {v:?} is not a number")))?;
            Ok((k.trim().parse()?, n))
        })
        .collect()
}

/// Writes the dataset and returns the manifest path and sample count.
pub fn cmd_gen_data(a: &GenDataArgs) -> Result<(PathBuf, usize)> {
    let rc = RunConfig::resolve(a.preset, &a.sets)?;
    let mut spec = DatasetSpec::balanced(a.count, rc.net.n, rc.net.image_size, a.seed);
    spec.occlusion = a.occlusion;
    if let Some(c) = &a.counts {
        spec.counts = parse_counts(c)?;
    }
    create_dir(&a.out)?;
    let manifest = gen_dataset(&spec, &a.out)?;
    let echo = GenerationEcho {
        preset: a.preset,
        n: spec.n,
        image_size: spec.image_size,
        seed: spec.seed,
        occlusion: spec.occlusion,
        counts: spec.counts.iter().map(|(k, c)| (k.name().to_string(), *c)).collect(),
    };
    write_json(&a.out.join("generation.json"), &echo)?;
    Ok((a.out.join(MANIFEST_FILE), manifest.samples.len()))
}

// ---- train ------------------------------------------------------------------

fn check_resolution(net: &NetConfig, n: usize, image_size: usize) -> Result<()> {
    if net.n != n || net.image_size != image_size {
        return Err(Error::Config(format!(
            "resolution mismatch: dataset has {n} points and {image_size}px images, model expects {} and {}",
            net.n, net.image_size
        )));
    }
    Ok(())
}

/// Keeps the header and the rows of epochs up to `upto` from an earlier log.
fn truncated_log(path: &Path, upto: usize) -> Result<String> {
    let old = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = format!("{LOG_HEADER}\n");
    for line in old.lines().skip(1) {
        let epoch: usize = line.split(',').next().and_then(|e| e.parse().ok()).unwrap_or(usize::MAX);
        if epoch <= upto {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Trains and returns the path of the final checkpoint.
pub fn cmd_train(a: &TrainArgs) -> Result<PathBuf> {
    let mut rc = RunConfig::resolve(a.preset, &a.sets)?;
    rc.net_seed = a.net_seed;
    if let Some(lr) = a.lr {
        rc.train.lr0 = lr;
    }
    if let Some(e) = a.epochs {
        rc.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        rc.train.batch_size = b;
    }
    if let Some(s) = a.seed {
        rc.train.seed = s;
    }
    rc.validate()?;

    let (manifest, data) = load_dataset(manifest_path(&a.data))?;
    check_resolution(&rc.net, manifest.n, manifest.image_size)?;
    if data.is_empty() {
        return Err(Error::Manifest("dataset has no samples".into()));
    }

    create_dir(&a.out)?;
    write_json(&a.out.join(CONFIG_FILE), &rc)?;
    let mut net = DmfNet::new(rc.net.clone(), rc.net_seed)?;
    let mut state = AdamState::new(&net.params);
    let start = match &a.resume {
        Some(p) => load_checkpoint(p, &mut net.params, &mut state)?,
        None => 0,
    };

    let log_path = a.out.join(LOG_FILE);
    let initial = if start == 0 {
        format!("{LOG_HEADER}\n")
    } else {
        truncated_log(&log_path, start)?
    };
    std::fs::write(&log_path, initial).map_err(|e| Error::io(&log_path, e))?;
    let mut log = File::options()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let final_path = a.out.join(FINAL_CHECKPOINT);
    let epochs = rc.train.epochs;
    let every = a.checkpoint_every;
    fit(&mut net, &mut state, &data, &rc.train, start, |entry, net, state| {
        writeln!(log, "{}", entry.csv_row())
            .and_then(|_| log.flush())
            .map_err(|e| Error::io(&log_path, e))?;
        println!(
            "epoch {:>4}  lr {:.3e}  total {:.6}",
            entry.epoch, entry.lr, entry.loss.total
        );
        let periodic = every > 0 && entry.epoch % every == 0;
        if periodic || entry.epoch == epochs {
            // training continues from exactly what the file holds, so a
            // resumed run follows the same trajectory as an uninterrupted one
            net.params.quantize_f32();
            state.quantize_f32();
            if periodic {
                let p = a.out.join(format!("ckpt_epoch{:04}.dmfn", entry.epoch));
                save_checkpoint(p, &net.params, state, entry.epoch)?;
            }
            if entry.epoch == epochs {
                save_checkpoint(&final_path, &net.params, state, entry.epoch)?;
            }
        }
        Ok(())
    })?;
    if start >= epochs {
        save_checkpoint(&final_path, &net.params, &state, start)?;
    }
    Ok(final_path)
}

// ---- eval ---------------------------------------------------------------------

fn load_model(checkpoint: &Path, config: Option<&Path>) -> Result<(RunConfig, DmfNet)> {
    let cfg_path = match config {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE),
    };
    let rc = RunConfig::load(&cfg_path)?;
    let mut net = DmfNet::new(rc.net.clone(), rc.net_seed)?;
    let mut state = AdamState::new(&net.params);
    load_checkpoint(checkpoint, &mut net.params, &mut state)?;
    Ok((rc, net))
}

/// An evaluation table in text and CSV form.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub text: String,
    pub csv: String,
}

/// Lays out `report` with the average column first, then one column per
/// category in name order. Chamfer values are shown ×10³.
pub fn metrics_table(report: &EvalReport) -> MetricsTable {
    let mut columns = vec![("Avg".to_string(), report.mean)];
    columns.extend(report.per_category.iter().map(|(k, v)| (k.clone(), *v)));
    let rows: [(String, String, fn(&MetricMeans) -> f64); 2] = [
        ("L2-CD x10^3".into(), "l2_cd_x1e3".into(), |m| m.cd_l2 * CD_DISPLAY_SCALE),
        (format!("F-Score@{}", report.tau), format!("f_score@{}", report.tau), |m| m.f_score),
    ];

    let label_w = 16;
    let widths: Vec<usize> = columns.iter().map(|(n, _)| n.len().max(8)).collect();
    let mut text = format!("{:<label_w$}", "Metric");
    for ((name, _), w) in columns.iter().zip(&widths) {
        text.push_str(&format!(" | {name:>w$}"));
    }
    text.push('\n');
    let mut csv = String::from("metric");
    for (name, _) in &columns {
        csv.push(',');
        csv.push_str(name);
    }
    csv.push('\n');

    for (label, key, f) in &rows {
        text.push_str(&format!("{label:<label_w$}"));
        csv.push_str(key);
        for ((_, m), w) in columns.iter().zip(&widths) {
            let v = f(m);
            text.push_str(&format!(" | {v:>w$.3}"));
            csv.push_str(&format!(",{v:.6}"));
        }
        text.push('\n');
        csv.push('\n');
    }
    let counts: Vec<String> = columns.iter().map(|(n, m)| format!("{n} {}", m.count)).collect();
    text.push_str(&format!("samples: {}\n", counts.join(", ")));
    text.push_str(&format!(
        "reference: the published model reports Avg L2-CD x10^3 = {PUBLISHED_AVG_L2_CD} on ShapeNet-ViPC; \
         synthetic runs are not comparable\n"
    ));
    MetricsTable { text, csv }
}

#[derive(Debug, Serialize)]
struct EvalEcho<'a> {
    checkpoint: Option<&'a Path>,
    data: &'a Path,
    tau: f64,
    gt_as_prediction: bool,
    run: Option<RunConfig>,
}

pub fn cmd_eval(a: &EvalArgs) -> Result<MetricsTable> {
    if !(a.tau > 0.0 && a.tau.is_finite()) {
        return Err(Error::Config(format!("tau must be positive, got {}", a.tau)));
    }
    let (manifest, data) = load_dataset(manifest_path(&a.data))?;
    let (report, run) = if a.gt_as_prediction {
        (evaluate_with(&data, a.tau, |s| Ok(s.gt.clone()))?, None)
    } else {
        let ck = a.checkpoint.as_deref().expect("clap requires --checkpoint here");
        let (rc, net) = load_model(ck, a.config.as_deref())?;
        check_resolution(&rc.net, manifest.n, manifest.image_size)?;
        (evaluate(&net, &data, a.tau)?, Some(rc))
    };
    let table = metrics_table(&report);
    if let Some(out) = &a.out {
        create_dir(out)?;
        for (name, body) in [("eval.txt", &table.text), ("eval.csv", &table.csv)] {
            let p = out.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        let echo = EvalEcho {
            checkpoint: a.checkpoint.as_deref(),
            data: &a.data,
            tau: a.tau,
            gt_as_prediction: a.gt_as_prediction,
            run,
        };
        write_json(&out.join("eval_config.json"), &echo)?;
    }
    Ok(table)
}

// ---- complete -------------------------------------------------------------------

/// Brings `cloud` to exactly `n` points: farthest point sampling when it has
/// more, cyclic repetition of its rows when it has fewer.
pub fn resample(cloud: &PointSet, n: usize) -> Result<PointSet> {
    if cloud.is_empty() || n == 0 {
        return Err(Error::invalid("resample", "empty cloud or target"));
    }
    if cloud.len() == n {
        return Ok(cloud.clone());
    }
    let idx: Vec<usize> = if cloud.len() > n {
        fps(cloud.coords(), n)?.data().to_vec()
    } else {
        (0..n).map(|i| i % cloud.len()).collect()
    };
    cloud.select(&idx)
}

#[derive(Debug, Serialize)]
struct CompleteEcho<'a> {
    checkpoint: &'a Path,
    input: &'a Path,
    image: &'a Path,
    input_points: usize,
    resampled: bool,
    run: &'a RunConfig,
}

fn stage_path(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_{suffix}.ply"))
}

/// Writes the completed cloud (and the stages when asked); returns every path written.
pub fn cmd_complete(a: &CompleteArgs) -> Result<Vec<PathBuf>> {
    let (rc, net) = load_model(&a.checkpoint, a.config.as_deref())?;
    let input = load_ply(&a.input)?;
    let image = load_ppm(&a.image)?;
    let partial = if input.len() == rc.net.n {
        input.clone()
    } else if a.resample {
        resample(&input, rc.net.n)?
    } else {
        return Err(Error::invalid(
            "complete",
            format!(
                "input has {} points, model expects {} (pass --resample to adapt it)",
                input.len(),
                rc.net.n
            ),
        ));
    };
    let mut g = net.inference_graph();
    let fw = net.forward(&mut g, &partial, &image)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut written = Vec::new();
    save_ply(&a.out, &PointSet::new(g.value(fw.pc).clone())?)?;
    written.push(a.out.clone());
    if a.stages {
        for (suffix, v) in [("p0", fw.p0), ("seed", fw.seed), ("p1", fw.p1)] {
            let p = stage_path(&a.out, suffix);
            save_ply(&p, &PointSet::new(g.value(v).clone())?)?;
            written.push(p);
        }
    }
    let echo = CompleteEcho {
        checkpoint: &a.checkpoint,
        input: &a.input,
        image: &a.image,
        input_points: input.len(),
        resampled: input.len() != rc.net.n,
        run: &rc,
    };
    let cfg = a.out.with_extension("config.json");
    write_json(&cfg, &echo)?;
    written.push(cfg);
    Ok(written)
}

