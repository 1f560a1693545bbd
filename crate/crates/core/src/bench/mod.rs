//! Pass counting, the frame-evaluation gap between seq2seq and seq2frame
//! inference, an analytic cost model and wall-clock throughput.

use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KeypointSequence2D, MixSTE, ModelConfig};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Every frame of a `t`-frame window is predicted per pass.
    Seq2Seq,
    /// Only the centre frame of a `1 + 2δ`-frame window is kept per pass.
    Seq2Frame,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq2seq" => Ok(Mode::Seq2Seq),
            "seq2frame" => Ok(Mode::Seq2Frame),
            _ => Err(Error::Config(format!("unknown mode {s:?} (seq2seq or seq2frame)"))),
        }
    }
}

/// Windowing of a `frames`-long sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferencePlan {
    pub frames: usize,
    pub window: usize,
    pub padding: usize,
    pub mode: Mode,
}

impl InferencePlan {
    /// Frames per pass: `t` for seq2seq, `1 + 2δ` for seq2frame.
    pub fn pass_length(&self) -> usize {
        match self.mode {
            Mode::Seq2Seq => self.window,
            Mode::Seq2Frame => 1 + 2 * self.padding,
        }
    }
}

/// Forward passes needed to predict every frame.
pub fn count_passes(plan: &InferencePlan) -> usize {
    match plan.mode {
        Mode::Seq2Frame => plan.frames,
        Mode::Seq2Seq => plan.frames.div_ceil(plan.window.max(1)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    /// `T (1 + 2δ) / ((T + 2δ) / t)`.
    pub exact: f64,
    /// `(1 + 2δ) t`, the large-`T` limit.
    pub approx: f64,
    /// `approx - exact`.
    pub error: f64,
}

/// Ratio of frame evaluations between seq2frame and seq2seq inference.
pub fn frame_evaluations_gap(frames: usize, window: usize, padding: usize) -> Result<Gap> {
    if frames == 0 || window == 0 {
        return Err(Error::Param("frames and window must be positive".into()));
    }
    // T (1 + 2δ) t / (T + 2δ): integer numerator, one rounding at the end
    let span = 1 + 2 * padding as u128;
    let numerator = frames as u128 * span * window as u128;
    let exact = numerator as f64 / (frames as u128 + 2 * padding as u128) as f64;
    let approx = (span * window as u128) as f64;
    Ok(Gap {
        exact,
        approx,
        error: approx - exact,
    })
}

/// Floating-point operations charged per element by the cost model.
pub const SOFTMAX_PER_LOGIT: usize = 3;
pub const NORM_PER_ELEMENT: usize = 5;
pub const GELU_PER_ELEMENT: usize = 1;

/// Multiply-add counts of one encoder block family.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockFlops {
    /// Q/K/V/output projections.
    pub projections: usize,
    /// `Q K^T` and `A V` products plus scaling.
    pub attention: usize,
    pub softmax: usize,
    pub mlp: usize,
    /// Layer norms, GELU and residual additions.
    pub elementwise: usize,
}

impl BlockFlops {
    pub fn total(&self) -> usize {
        self.projections + self.attention + self.softmax + self.mlp + self.elementwise
    }

    fn scaled(self, k: usize) -> Self {
        BlockFlops {
            projections: self.projections * k,
            attention: self.attention * k,
            softmax: self.softmax * k,
            mlp: self.mlp * k,
            elementwise: self.elementwise * k,
        }
    }

    fn add(self, o: Self) -> Self {
        BlockFlops {
            projections: self.projections + o.projections,
            attention: self.attention + o.attention,
            softmax: self.softmax + o.softmax,
            mlp: self.mlp + o.mlp,
            elementwise: self.elementwise + o.elementwise,
        }
    }
}

/// Cost of one encoder block over `n` tokens of width `d`.
pub fn block_flops(n: usize, d: usize, heads: usize, ratio: usize) -> BlockFlops {
    let hidden = d * ratio;
    let logits = heads * n * n;
    BlockFlops {
        projections: 4 * (n * d * d + n * d),
        attention: 2 * n * n * d + logits,
        softmax: SOFTMAX_PER_LOGIT * logits,
        mlp: n * d * hidden + n * hidden + n * hidden * d + n * d,
        elementwise: 2 * NORM_PER_ELEMENT * n * d + GELU_PER_ELEMENT * n * hidden + 2 * n * d,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub fused_temporal_tokens: bool,
    pub embed: usize,
    pub spatial: BlockFlops,
    pub temporal: BlockFlops,
    pub head: usize,
    pub total: usize,
    /// `total / T`.
    pub per_frame: f64,
}

/// Analytic cost of one forward pass over `config.frames` frames. With
/// `fused_temporal_tokens`, a temporal token is a whole frame (width
/// `N * d_m`) instead of one joint's `d_m` features.
pub fn estimate_flops(config: &ModelConfig, fused_temporal_tokens: bool) -> FlopsBreakdown {
    let (n, t, d, h, r) = (config.joints, config.frames, config.dim, config.heads, config.mlp_ratio);
    let tokens = n * t;
    let embed = tokens * (2 * d + d) + tokens * d + NORM_PER_ELEMENT * tokens * d;
    let spatial_one = block_flops(n, d, h, r).scaled(t);
    let temporal_one = if fused_temporal_tokens {
        block_flops(t, n * d, h, r)
    } else {
        block_flops(t, d, h, r).scaled(n)
    };
    let spatial = spatial_one.scaled(config.depth);
    // the temporal embedding is added once
    let mut temporal = temporal_one.scaled(config.depth);
    if config.depth > 0 {
        temporal = temporal.add(BlockFlops {
            elementwise: tokens * d,
            ..BlockFlops::default()
        });
    }
    let head = NORM_PER_ELEMENT * tokens * d + tokens * (3 * d + 3);
    let total = embed + spatial.total() + temporal.total() + head;
    FlopsBreakdown {
        fused_temporal_tokens,
        embed,
        spatial,
        temporal,
        head,
        total,
        per_frame: total as f64 / t.max(1) as f64,
    }
}

/// Wall-clock frames per second of one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub mode: Mode,
    pub passes: usize,
    /// Frames per second of every timed iteration.
    pub fps: Vec<f64>,
    pub fps_min: f64,
    pub fps_median: f64,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.is_empty() {
        0.0
    } else if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    }
}

/// Predicts every frame of `seq` following `plan`, one pass at a time.
/// Returns the per-frame outputs in model units, frame-major.
pub fn run_plan<T: Scalar>(model: &MixSTE<T>, seq: &KeypointSequence2D, plan: &InferencePlan) -> Result<Vec<f64>> {
    let per_frame = seq.joints * 3;
    let mut out = Vec::with_capacity(seq.frames * per_frame);
    match plan.mode {
        Mode::Seq2Seq => {
            for pass in 0..count_passes(plan) {
                let start = pass * plan.window;
                let w = seq.window(start, plan.window);
                let x = model.input_tensor(&[&w])?;
                let (y, _) = model.run(&x, false, 0, false)?;
                let keep = plan.window.min(seq.frames - start);
                out.extend(y.data()[..keep * per_frame].iter().map(|v| v.f64()));
            }
        }
        Mode::Seq2Frame => out = run_frames(model, seq, plan.padding, 0..seq.frames)?,
    }
    Ok(out)
}

/// Seq2frame predictions for the frames in `range`, each from its own
/// edge-replicated `1 + 2δ` window.
fn run_frames<T: Scalar>(
    model: &MixSTE<T>,
    seq: &KeypointSequence2D,
    delta: usize,
    range: std::ops::Range<usize>,
) -> Result<Vec<f64>> {
    let per_frame = seq.joints * 3;
    let stride = seq.joints * 2;
    let mut out = Vec::with_capacity(range.len() * per_frame);
    for f in range {
        let idx = (0..1 + 2 * delta).map(|k| (f + k).saturating_sub(delta).min(seq.frames - 1));
        let mut coords = Vec::with_capacity((1 + 2 * delta) * stride);
        for i in idx {
            coords.extend_from_slice(&seq.coords[i * stride..(i + 1) * stride]);
        }
        let w = KeypointSequence2D::new(seq.joints, 1 + 2 * delta, coords, seq.skeleton.clone())?;
        let x = model.input_tensor(&[&w])?;
        let (y, _) = model.run(&x, false, 0, false)?;
        out.extend(y.data()[delta * per_frame..(delta + 1) * per_frame].iter().map(|v| v.f64()));
    }
    Ok(out)
}

/// Times [`run_plan`] `iters` times after `warmup` untimed runs.
pub fn bench_throughput<T: Scalar>(
    model: &MixSTE<T>,
    seq: &KeypointSequence2D,
    plan: &InferencePlan,
    warmup: usize,
    iters: usize,
) -> Result<Throughput> {
    if iters == 0 {
        return Err(Error::Param("at least one timed iteration is required".into()));
    }
    if plan.pass_length() > model.config.frames {
        return Err(Error::Config(format!(
            "pass length {} exceeds the model's {} frames",
            plan.pass_length(),
            model.config.frames
        )));
    }
    for _ in 0..warmup {
        run_plan(model, seq, plan)?;
    }
    let mut fps = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        run_plan(model, seq, plan)?;
        fps.push(seq.frames as f64 / t0.elapsed().as_secs_f64().max(1e-12));
    }
    Ok(Throughput {
        mode: plan.mode,
        passes: count_passes(plan),
        fps_min: fps.iter().copied().fold(f64::INFINITY, f64::min),
        fps_median: median(&fps),
        fps,
    })
}

/// Like [`bench_throughput`] with passes split over `threads` workers, each
/// holding its own copy of the model.
pub fn bench_throughput_threaded<T: Scalar>(
    model: &MixSTE<T>,
    seq: &KeypointSequence2D,
    plan: &InferencePlan,
    warmup: usize,
    iters: usize,
    threads: usize,
) -> Result<Throughput> {
    if threads <= 1 {
        return bench_throughput(model, seq, plan, warmup, iters);
    }
    if iters == 0 {
        return Err(Error::Param("at least one timed iteration is required".into()));
    }
    // chunks are aligned to whole seq2seq windows so every worker sees the
    // same pass boundaries as the sequential run
    let align = match plan.mode {
        Mode::Seq2Seq => plan.window.max(1),
        Mode::Seq2Frame => 1,
    };
    let units = seq.frames.div_ceil(align);
    let per = units.div_ceil(threads) * align;
    let snapshots: Vec<MixSTE<T>> = (0..threads).map(|_| model.clone()).collect();
    let run_all = || -> Result<()> {
        std::thread::scope(|s| {
            let handles: Vec<_> = snapshots
                .iter()
                .enumerate()
                .filter(|(i, _)| i * per < seq.frames)
                .map(|(i, m)| {
                    let start = i * per;
                    let len = per.min(seq.frames - start);
                    s.spawn(move || {
                        let part = if plan.mode == Mode::Seq2Frame {
                            seq.clone()
                        } else {
                            seq.window(start, len)
                        };
                        let mut sub = *plan;
                        sub.frames = part.frames;
                        match plan.mode {
                            Mode::Seq2Seq => run_plan(m, &part, &sub).map(|_| ()),
                            Mode::Seq2Frame => run_frames(m, &part, plan.padding, start..start + len).map(|_| ()),
                        }
                    })
                })
                .collect();
            handles.into_iter().try_for_each(|h| h.join().expect("bench worker panicked"))
        })
    };
    for _ in 0..warmup {
        run_all()?;
    }
    let mut fps = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        run_all()?;
        fps.push(seq.frames as f64 / t0.elapsed().as_secs_f64().max(1e-12));
    }
    Ok(Throughput {
        mode: plan.mode,
        passes: count_passes(plan),
        fps_min: fps.iter().copied().fold(f64::INFINITY, f64::min),
        fps_median: median(&fps),
        fps,
    })
}

/// One line of the bench report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: Mode,
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "t")]
    pub window: usize,
    pub delta: usize,
    pub passes: usize,
    /// Frames pushed through the network: passes times pass length.
    pub frame_evals: usize,
    pub gap_exact: f64,
    pub gap_approx: f64,
    pub flops_per_frame: f64,
    pub fps_median: Option<f64>,
}

/// Report for `plan`, with FLOPs from `config` and an optional throughput
/// measurement.
pub fn bench_report(plan: &InferencePlan, config: &ModelConfig, throughput: Option<&Throughput>) -> Result<BenchReport> {
    let gap = frame_evaluations_gap(plan.frames, plan.window, plan.padding)?;
    let passes = count_passes(plan);
    let cfg = ModelConfig {
        frames: plan.pass_length(),
        ..config.clone()
    };
    let flops = estimate_flops(&cfg, false);
    // each pass costs flops.total; divide by the frames it yields
    let flops_per_frame = flops.total as f64 * passes as f64 / plan.frames.max(1) as f64;
    Ok(BenchReport {
        mode: plan.mode,
        frames: plan.frames,
        window: plan.window,
        delta: plan.padding,
        passes,
        frame_evals: passes * plan.pass_length(),
        gap_exact: gap.exact,
        gap_approx: gap.approx,
        flops_per_frame,
        fps_median: throughput.map(|t| t.fps_median),
    })
}
