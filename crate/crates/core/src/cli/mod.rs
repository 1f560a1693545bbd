//! Command-line front end. [`run`] parses arguments, resolves the
//! [`RunConfig`] and dispatches to a subcommand.

mod config;
pub mod plot;

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

pub use config::{RunConfig, KEYS};

use crate::bench::{bench_report, bench_throughput_threaded, estimate_flops, InferencePlan, Mode};
use crate::data::{load_dataset, save_dataset, synth_dataset, Clip, DataFormat, MotionSpec, SequenceDataset, SynthConfig};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalEntry, EvalReport, Histogram, SkeletonSpec};
use crate::model::{load_checkpoint, save_checkpoint, MixSTE};
use crate::train::{evaluate_model, fit, StepRecord};
use crate::transformer::average_attention;

#[derive(Parser, Debug)]
#[command(name = "mixste", version, about = "Seq2seq 2D-to-3D pose lifting with mixed spatio-temporal attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset of camera-space motions and projections.
    Synth(Common),
    /// Train a model and write checkpoints plus a JSONL log to --out.
    Train(Common),
    /// Metrics report for --pred (or --checkpoint predictions) against --data.
    Eval(Common),
    /// Lift every clip of --data to 3D and write the result to --out.
    Infer(Common),
    /// Pass counts, FLOPs and throughput of seq2seq vs seq2frame inference.
    Bench(Common),
    /// Head- and token-averaged attention maps of one window, scaled to [0, 1].
    Attn(Common),
    /// Render a result file (log, report, attention maps or dataset) as SVG.
    Plot(PlotArgs),
}

/// Flags shared by every subcommand. Each maps onto a config key and
/// overrides the value from --config.
#[derive(Args, Debug, Default)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Total frames T: clip length for `synth`, sequence length for `bench`.
    #[arg(long = "seq-len", visible_alias = "T")]
    seq_len: Option<usize>,
    /// Window length t.
    #[arg(long, visible_alias = "t")]
    window: Option<usize>,
    #[arg(long)]
    interval: Option<usize>,
    /// Number of spatial/temporal loops.
    #[arg(long)]
    depth: Option<usize>,
    /// Feature width.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["seq2seq", "seq2frame"])]
    mode: Option<String>,
    #[arg(long, value_parser = ["json", "bin"])]
    format: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Predictions to evaluate.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Held-out dataset evaluated during training.
    #[arg(long = "eval-data")]
    eval_data: Option<PathBuf>,
    /// Padding δ.
    #[arg(long, visible_alias = "delta")]
    padding: Option<usize>,
    /// Any other config key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Clip index for `attn`.
    #[arg(long, default_value_t = 0)]
    clip: usize,
    /// First frame of the `attn` window.
    #[arg(long, default_value_t = 0)]
    start: usize,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Training log (.jsonl), eval report, attention file or dataset.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = ["auto", "loss", "hist", "attn", "skeleton"], default_value = "auto")]
    kind: String,
    /// Overlay for skeleton plots.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    clip: usize,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long)]
    format: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?),
            None => None,
        };
        let mut overrides: Vec<(&str, String)> = Vec::new();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let pairs: [(&str, Option<String>); 15] = [
            ("data", path(&self.data)),
            ("out", path(&self.out)),
            ("checkpoint", path(&self.checkpoint)),
            ("pred", path(&self.pred)),
            ("eval_data", path(&self.eval_data)),
            ("seq_len", self.seq_len.map(|v| v.to_string())),
            ("window", self.window.map(|v| v.to_string())),
            ("interval", self.interval.map(|v| v.to_string())),
            ("depth", self.depth.map(|v| v.to_string())),
            ("dim", self.dim.map(|v| v.to_string())),
            ("heads", self.heads.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("mode", self.mode.clone()),
            ("format", self.format.clone()),
            ("padding", self.padding.map(|v| v.to_string())),
        ];
        overrides.extend(pairs.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            overrides.push((k.trim(), v.trim().to_string()));
        }
        RunConfig::resolve(text.as_deref(), &overrides)
    }
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(c) => synth(&c.resolve()?),
        Command::Train(c) => train(&c.resolve()?),
        Command::Eval(c) => eval(&c.resolve()?),
        Command::Infer(c) => infer(&c.resolve()?),
        Command::Bench(c) => bench(&c.resolve()?),
        Command::Attn(c) => attn(&c.resolve()?, c.clip, c.start),
        Command::Plot(p) => plot_cmd(&p),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

fn format_for(cfg: &RunConfig, path: &Path) -> DataFormat {
    cfg.format.unwrap_or_else(|| DataFormat::infer(path))
}

fn load(cfg: &RunConfig, path: &Path) -> Result<SequenceDataset> {
    load_dataset(path, format_for(cfg, path))
}

/// `<out>.run.json` next to a file, or `run.json` inside a directory.
fn provenance_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("run.json")
    } else {
        let mut s = out.as_os_str().to_os_string();
        s.push(".run.json");
        PathBuf::from(s)
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn emit(cfg: &RunConfig, value: &serde_json::Value) -> Result<()> {
    match &cfg.out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let out = required(&cfg.out, "out")?;
    let sc = SynthConfig {
        clips: cfg.clips,
        frames: cfg.seq_len.unwrap_or(cfg.train.window),
        skeleton: cfg.skeleton.clone(),
        actions: cfg.actions,
        seed: cfg.seed,
        motion: MotionSpec {
            noise_sigma: cfg.noise,
            ..MotionSpec::default()
        },
    };
    let ds = synth_dataset(&sc)?;
    save_dataset(&ds, out, format_for(cfg, out))?;
    write_json(&provenance_path(out), &json!({ "command": "synth", "config": cfg.to_json() }))?;
    println!("wrote {} clips of {} frames to {}", ds.clips.len(), sc.frames, out.display());
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<()> {
    let data = load(cfg, required(&cfg.data, "data")?)?;
    let eval_data = match &cfg.eval_data {
        Some(p) => Some(load(cfg, p)?),
        None => None,
    };
    let out = required(&cfg.out, "out")?;
    fs::create_dir_all(out)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.joints = data.skeleton.len();
    model_cfg.frames = cfg.train.window;
    let mut model = MixSTE::<f32>::new(model_cfg, cfg.seed)?;
    write_json(&out.join("run.json"), &json!({ "command": "train", "config": cfg.to_json() }))?;
    let mut log = BufWriter::new(fs::File::create(out.join("train_log.jsonl"))?);
    let report = fit(&mut model, &data, eval_data.as_ref(), &cfg.train, &mut log, Some(out))?;
    log.flush()?;
    save_checkpoint(&model, &out.join("last.mxst"))?;
    let last = report.steps.last();
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "steps": report.steps.len(),
            "final_loss": last.map(|s| s.loss_total),
            "best_wmpjpe": report.best_wmpjpe,
            "best_checkpoint": report.best_checkpoint,
            "parameters": model.count_parameters(),
        }))?
    );
    Ok(())
}

fn eval_report(cfg: &RunConfig, gt: &SequenceDataset) -> Result<(EvalReport, f64)> {
    if let Some(pred_path) = &cfg.pred {
        let pred = load(cfg, pred_path)?;
        if pred.clips.len() != gt.clips.len() {
            return Err(Error::Schema(format!(
                "prediction file has {} clips, ground truth has {}",
                pred.clips.len(),
                gt.clips.len()
            )));
        }
        let mut entries = Vec::with_capacity(gt.clips.len());
        for (i, (p, g)) in pred.clips.iter().zip(&gt.clips).enumerate() {
            let missing = |what: &str| Error::Schema(format!("{what} clip {i} has no 3D poses"));
            let pp = p.poses.clone().ok_or_else(|| missing("predicted"))?;
            let gp = g.poses.clone().ok_or_else(|| missing("ground-truth"))?;
            pp.check_same_shape(&gp)?;
            entries.push(EvalEntry {
                action: g.action.clone(),
                pred: pp,
                gt: gp,
            });
        }
        Ok((evaluate(&entries, &gt.skeleton, &cfg.train.loss, cfg.histogram_bin)?, cfg.model.output_scale_mm))
    } else if let Some(ckpt) = &cfg.checkpoint {
        let model = load_checkpoint::<f32>(ckpt)?;
        let mut report = evaluate_model(&model, gt, model.config.frames, &cfg.train.loss, cfg.train.batch_size)?;
        if cfg.histogram_bin != 10.0 {
            report.histogram = rebinned(&report, cfg.histogram_bin)?;
        }
        Ok((report, model.config.output_scale_mm))
    } else {
        Err(Error::Config("eval needs --pred or --checkpoint".into()))
    }
}

fn rebinned(report: &EvalReport, bin: f64) -> Result<Histogram> {
    // reconstruct per-frame errors at bin centres; only the binning changes
    let mut values = Vec::new();
    for (i, &c) in report.histogram.counts.iter().enumerate() {
        let centre = (report.histogram.edges[i] + report.histogram.edges[i + 1]) / 2.0;
        values.extend(std::iter::repeat(centre).take(c));
    }
    Histogram::new(&values, bin)
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let gt = load(cfg, required(&cfg.data, "data")?)?;
    let (report, scale) = eval_report(cfg, &gt)?;
    print!("{}", report.to_text());
    let value = json!({
        "command": "eval",
        "config": cfg.to_json(),
        "output_scale_mm": scale,
        "wmpjpe_model_units": report.summary.wmpjpe / scale,
        "report": report,
    });
    if let Some(out) = &cfg.out {
        write_json(out, &value)?;
    }
    Ok(())
}

fn infer(cfg: &RunConfig) -> Result<()> {
    let model = load_checkpoint::<f32>(required(&cfg.checkpoint, "checkpoint")?)?;
    let data = load(cfg, required(&cfg.data, "data")?)?;
    let out = required(&cfg.out, "out")?;
    if data.skeleton.len() != model.config.joints {
        return Err(Error::Schema(format!(
            "dataset has {} joints, checkpoint expects {}",
            data.skeleton.len(),
            model.config.joints
        )));
    }
    let mut clips = Vec::with_capacity(data.clips.len());
    for clip in &data.clips {
        let poses = model.predict_long(&clip.keypoints, cfg.train.batch_size)?;
        clips.push(Clip {
            poses: Some(poses),
            ..clip.clone()
        });
    }
    let pred = SequenceDataset {
        skeleton: data.skeleton.clone(),
        clips,
    };
    save_dataset(&pred, out, format_for(cfg, out))?;
    write_json(
        &provenance_path(out),
        &json!({ "command": "infer", "config": cfg.to_json(), "model": model.config }),
    )?;
    println!("lifted {} clips to {}", pred.clips.len(), out.display());
    Ok(())
}

fn bench(cfg: &RunConfig) -> Result<()> {
    let window = cfg.train.window;
    let padding = cfg.padding.unwrap_or((window.max(1) - 1) / 2);
    let frames = cfg.seq_len.unwrap_or(243);
    let modes = match cfg.mode {
        Some(m) => vec![m],
        None => vec![Mode::Seq2Seq, Mode::Seq2Frame],
    };
    let model = match &cfg.checkpoint {
        Some(p) => Some(load_checkpoint::<f32>(p)?),
        None if cfg.iters > 0 => {
            let mc = crate::model::ModelConfig {
                frames: window.max(1 + 2 * padding),
                ..cfg.model.clone()
            };
            Some(MixSTE::<f32>::new(mc, cfg.seed)?)
        }
        None => None,
    };
    let flops_cfg = crate::model::ModelConfig {
        frames,
        ..model.as_ref().map_or_else(|| cfg.model.clone(), |m| m.config.clone())
    };
    let separated = estimate_flops(&flops_cfg, false);
    let fused = estimate_flops(&flops_cfg, true);
    let mut reports = Vec::new();
    let seq = match &model {
        Some(m) => {
            let skel = SkeletonSpec::chain(m.config.joints);
            let (_, kp) = crate::data::synth_motion(cfg.seed, &skel, frames, &MotionSpec::default())?;
            Some(kp)
        }
        None => None,
    };
    for mode in modes {
        let plan = InferencePlan {
            frames,
            window,
            padding,
            mode,
        };
        let throughput = match (&model, &seq) {
            (Some(m), Some(s)) if cfg.iters > 0 => {
                Some(bench_throughput_threaded(m, s, &plan, cfg.warmup, cfg.iters, cfg.threads)?)
            }
            _ => None,
        };
        let base = model.as_ref().map_or(&cfg.model, |m| &m.config);
        reports.push(bench_report(&plan, base, throughput.as_ref())?);
    }
    emit(
        cfg,
        &json!({
            "command": "bench",
            "config": cfg.to_json(),
            "reports": reports,
            "flops": {
                "separated": separated,
                "fused": fused,
                "fused_over_separated": fused.per_frame / separated.per_frame,
            },
        }),
    )
}

fn attn(cfg: &RunConfig, clip: usize, start: usize) -> Result<()> {
    let model = load_checkpoint::<f32>(required(&cfg.checkpoint, "checkpoint")?)?;
    let data = load(cfg, required(&cfg.data, "data")?)?;
    let c = data
        .clips
        .get(clip)
        .ok_or_else(|| Error::Param(format!("clip {clip} out of range ({} clips)", data.clips.len())))?;
    let window = c.keypoints.window(start, model.config.frames);
    let x = model.input_tensor(&[&window])?;
    let (_, probs) = model.run(&x, false, cfg.seed, true)?;
    let mut spatial = Vec::new();
    let mut temporal = Vec::new();
    for (i, p) in probs.iter().enumerate() {
        let map = average_attention(p)?;
        let n = map.mean.shape()[0];
        let entry = json!({
            "loop": i / 2,
            "size": n,
            "mean": map.mean.data(),
            "normalized": map.normalized.data(),
        });
        if i % 2 == 0 { &mut spatial } else { &mut temporal }.push(entry);
    }
    emit(
        cfg,
        &json!({
            "command": "attn",
            "config": cfg.to_json(),
            "clip": clip,
            "start": start,
            "frames": model.config.frames,
            "joints": data.skeleton.joints,
            "spatial": spatial,
            "temporal": temporal,
        }),
    )
}

fn read_jsonl_steps(text: &str) -> Vec<StepRecord> {
    text.lines().filter_map(|l| serde_json::from_str::<StepRecord>(l).ok()).collect()
}

fn plot_cmd(args: &PlotArgs) -> Result<()> {
    let kind = if args.kind == "auto" { detect_kind(&args.input)? } else { args.kind.clone() };
    let svg = match kind.as_str() {
        "loss" => {
            let steps = read_jsonl_steps(&fs::read_to_string(&args.input)?);
            if steps.is_empty() {
                return Err(Error::Schema(format!("{} has no step records", args.input.display())));
            }
            let series = |name: &str, f: fn(&StepRecord) -> f64| {
                (name.to_string(), steps.iter().map(|s| (s.step as f64, f(s))).collect())
            };
            plot::line_chart(
                "training loss",
                "step",
                "loss",
                &[
                    series("total", |s| s.loss_total),
                    series("wmpjpe", |s| s.loss_w),
                    series("t-loss", |s| s.loss_t + s.loss_m),
                ],
            )
        }
        "hist" => {
            let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&args.input)?)?;
            let h = v
                .pointer("/report/histogram")
                .or_else(|| v.get("histogram"))
                .ok_or_else(|| Error::Schema("no histogram in report".into()))?;
            let h: Histogram = serde_json::from_value(h.clone())?;
            plot::histogram_chart("per-frame MPJPE", "MPJPE (mm)", &h)
        }
        "attn" => {
            let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&args.input)?)?;
            let joints: Option<Vec<String>> = v.get("joints").and_then(|j| serde_json::from_value(j.clone()).ok());
            let mut parts = Vec::new();
            for (family, labels) in [("spatial", joints.as_deref()), ("temporal", None)] {
                for m in v.get(family).and_then(|a| a.as_array()).into_iter().flatten() {
                    let n = m["size"].as_u64().unwrap_or(0) as usize;
                    let vals: Vec<f64> = serde_json::from_value(m["normalized"].clone())?;
                    parts.push(plot::heatmap(&format!("{family} loop {}", m["loop"]), n, n, &vals, labels));
                }
            }
            if parts.is_empty() {
                return Err(Error::Schema("no attention maps in input".into()));
            }
            stack(&parts)
        }
        "skeleton" => {
            let fmt = match &args.format {
                Some(f) => f.parse()?,
                None => DataFormat::infer(&args.input),
            };
            let ds = load_dataset(&args.input, fmt)?;
            let mut poses = vec![("ground truth".to_string(), frame_of(&ds, args.clip, args.frame)?)];
            if let Some(p) = &args.pred {
                let pd = load_dataset(p, DataFormat::infer(p))?;
                poses.push(("prediction".to_string(), frame_of(&pd, args.clip, args.frame)?));
            }
            plot::skeleton_view(&format!("clip {} frame {}", args.clip, args.frame), &ds.skeleton, &poses)
        }
        other => return Err(Error::Config(format!("unknown plot kind {other:?}"))),
    };
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&args.out, svg)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn frame_of(ds: &SequenceDataset, clip: usize, frame: usize) -> Result<Vec<f64>> {
    let c = ds
        .clips
        .get(clip)
        .ok_or_else(|| Error::Param(format!("clip {clip} out of range")))?;
    let p = c.poses.as_ref().ok_or_else(|| Error::Schema(format!("clip {clip} has no 3D poses")))?;
    if frame >= p.frames {
        return Err(Error::Param(format!("frame {frame} out of range ({} frames)", p.frames)));
    }
    let n = p.joints * 3;
    Ok(p.coords[frame * n..(frame + 1) * n].to_vec())
}

/// Vertically stacks standalone SVG documents into one.
fn stack(parts: &[String]) -> String {
    let dims: Vec<(f64, f64)> = parts
        .iter()
        .map(|s| {
            let attr = |name: &str| {
                s.split(&format!(" {name}=\""))
                    .nth(1)
                    .and_then(|r| r.split('"').next())
                    .and_then(|v| v.parse().ok())
                    .unwrap_or(0.0)
            };
            (attr("width"), attr("height"))
        })
        .collect();
    let w = dims.iter().map(|d| d.0).fold(0.0, f64::max);
    let h: f64 = dims.iter().map(|d| d.1).sum();
    let mut out = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    out.push('\n');
    let mut y = 0.0;
    for (s, d) in parts.iter().zip(&dims) {
        out.push_str(&format!(r#"<g transform="translate(0 {y})">"#));
        out.push('\n');
        let inner = s.split_once('>').map_or("", |x| x.1);
        out.push_str(inner.trim_end().trim_end_matches("</svg>"));
        out.push_str("</g>\n");
        y += d.1;
    }
    out.push_str("</svg>\n");
    out
}

fn detect_kind(path: &Path) -> Result<String> {
    if path.is_dir() || DataFormat::infer(path) == DataFormat::Bin {
        return Ok("skeleton".into());
    }
    if path.extension().is_some_and(|e| e == "jsonl") {
        return Ok("loss".into());
    }
    let text = fs::read_to_string(path)?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    Ok(if v.get("spatial").is_some() {
        "attn"
    } else if v.pointer("/report/histogram").is_some() || v.get("histogram").is_some() {
        "hist"
    } else {
        "skeleton"
    }
    .into())
}
