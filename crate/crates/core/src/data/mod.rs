//! Clip datasets, windowing, batching and the synthetic data generator.

mod io;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::{
    load_dataset, read_binary, read_json_clip, save_dataset, write_binary, write_json_clip, BinaryRecord, DataFormat,
};
pub use synth::{denormalize_2d, normalize_2d, rest_offsets, synth_motion, CameraModel, MotionSpec};

use crate::error::{Error, Result};
use crate::metrics::SkeletonSpec;
use crate::model::{KeypointSequence2D, PoseSequence3D};

/// One recorded sequence. 2D keypoints are normalized; 3D poses are
/// root-relative millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub subject: String,
    pub action: String,
    pub camera: String,
    pub fps: f64,
    /// Image `[width, height]` the 2D keypoints were normalized with.
    pub image_size: [f64; 2],
    pub keypoints: KeypointSequence2D,
    pub poses: Option<PoseSequence3D>,
}

impl Clip {
    pub fn frames(&self) -> usize {
        self.keypoints.frames
    }

    pub fn validate(&self, skeleton: &SkeletonSpec) -> Result<()> {
        let k = &self.keypoints;
        if k.joints != skeleton.len() {
            return Err(Error::Schema(format!(
                "clip {}/{} has {} joints, skeleton {} has {}",
                self.subject,
                self.action,
                k.joints,
                skeleton.name,
                skeleton.len()
            )));
        }
        if let Some(p) = &self.poses {
            if p.joints != k.joints || p.frames != k.frames {
                return Err(Error::Schema(format!(
                    "clip {}/{}: 2D is {}x{}, 3D is {}x{}",
                    self.subject, self.action, k.frames, k.joints, p.frames, p.joints
                )));
            }
        }
        Ok(())
    }

    /// Rounds every coordinate to the nearest 32-bit float, so the clip
    /// survives the binary format unchanged.
    pub fn quantize_f32(&mut self) {
        let q = |v: &mut f64| *v = *v as f32 as f64;
        self.keypoints.coords.iter_mut().for_each(q);
        if let Some(c) = self.keypoints.confidence.as_mut() {
            c.iter_mut().for_each(q);
        }
        if let Some(p) = self.poses.as_mut() {
            p.coords.iter_mut().for_each(q);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub skeleton: SkeletonSpec,
    pub clips: Vec<Clip>,
}

impl SequenceDataset {
    pub fn validate(&self) -> Result<()> {
        self.skeleton.validate()?;
        self.clips.iter().try_for_each(|c| c.validate(&self.skeleton))
    }
}

/// Settings for [`synth_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub clips: usize,
    pub frames: usize,
    pub skeleton: String,
    /// Number of distinct action labels; clip `i` gets label `i % actions`
    /// and a motion amplitude that grows with the label.
    pub actions: usize,
    pub seed: u64,
    pub motion: MotionSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            clips: 64,
            frames: 16,
            skeleton: "h36m17".into(),
            actions: 4,
            seed: 0,
            motion: MotionSpec::default(),
        }
    }
}

/// Builds a dataset of synthetic clips, quantized to 32-bit precision.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SequenceDataset> {
    let skeleton = SkeletonSpec::by_name(&cfg.skeleton)?;
    let actions = cfg.actions.max(1);
    let cam = cfg.motion.camera;
    let mut clips = Vec::with_capacity(cfg.clips);
    for i in 0..cfg.clips {
        let label = i % actions;
        let motion = MotionSpec {
            amplitude: cfg.motion.amplitude * (0.5 + label as f64 / actions as f64),
            ..cfg.motion.clone()
        };
        let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let (p3, p2) = synth_motion(seed, &skeleton, cfg.frames, &motion)?;
        let coords = p2
            .coords
            .chunks(2)
            .flat_map(|p| normalize_2d([p[0], p[1]], cam.width, cam.height))
            .collect();
        let mut clip = Clip {
            subject: format!("S{}", i / actions),
            action: format!("motion{label}"),
            camera: "synthetic".into(),
            fps: motion.fps,
            image_size: [cam.width, cam.height],
            keypoints: KeypointSequence2D::new(skeleton.len(), cfg.frames, coords, skeleton.name.clone())?,
            poses: Some(p3.root_relative(skeleton.root)),
        };
        clip.quantize_f32();
        clips.push(clip);
    }
    Ok(SequenceDataset { skeleton, clips })
}

/// A window of `len` frames starting at `start` in clip `clip`; frames past
/// `valid` replicate the clip's last frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Window {
    pub clip: usize,
    pub start: usize,
    pub valid: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowPlan {
    pub length: usize,
    pub interval: usize,
    pub padding: bool,
    pub windows: Vec<Window>,
    /// Clips shorter than the window that were skipped.
    pub skipped: Vec<usize>,
}

impl Window {
    pub fn padded(&self, length: usize) -> bool {
        self.valid < length
    }
}

/// Windows of `length` frames every `interval` frames. With `padding`, the
/// frames after the last full window get one edge-padded window and clips
/// shorter than `length` get a single padded window; otherwise such frames
/// and clips are dropped.
pub fn make_windows(dataset: &SequenceDataset, length: usize, interval: usize, padding: bool) -> Result<WindowPlan> {
    if length == 0 || interval == 0 {
        return Err(Error::Param("window length and interval must be positive".into()));
    }
    let mut windows = Vec::new();
    let mut skipped = Vec::new();
    for (ci, clip) in dataset.clips.iter().enumerate() {
        let total = clip.frames();
        if total == 0 {
            skipped.push(ci);
            continue;
        }
        if length > total {
            if padding {
                windows.push(Window { clip: ci, start: 0, valid: total });
            } else {
                log::warn!("clip {ci} has {total} frames, shorter than window {length}; skipped");
                skipped.push(ci);
            }
            continue;
        }
        let mut start = 0;
        let mut covered = 0;
        while start + length <= total {
            windows.push(Window { clip: ci, start, valid: length });
            covered = start + length;
            start += interval;
        }
        if padding && covered < total && start < total {
            windows.push(Window { clip: ci, start, valid: total - start });
        }
    }
    Ok(WindowPlan {
        length,
        interval,
        padding,
        windows,
        skipped,
    })
}

impl WindowPlan {
    /// Input and target of one window, edge-padded to the plan length.
    pub fn materialize(&self, dataset: &SequenceDataset, w: &Window) -> (KeypointSequence2D, Option<PoseSequence3D>) {
        let clip = &dataset.clips[w.clip];
        (
            clip.keypoints.window(w.start, self.length),
            clip.poses.as_ref().map(|p| p.window(w.start, self.length)),
        )
    }
}

/// Materialized windows of one batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub windows: Vec<Window>,
    pub inputs: Vec<KeypointSequence2D>,
    pub targets: Vec<Option<PoseSequence3D>>,
}

/// Batches of the plan's windows in plan order or, with a seed, in a
/// seeded shuffle. The last batch may be short.
pub fn batch_iterator<'a>(
    plan: &'a WindowPlan,
    dataset: &'a SequenceDataset,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<impl Iterator<Item = Batch> + 'a> {
    if batch_size == 0 {
        return Err(Error::Param("batch size must be positive".into()));
    }
    let mut order: Vec<Window> = plan.windows.clone();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let chunks: Vec<Vec<Window>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    Ok(chunks.into_iter().map(move |windows| {
        let (inputs, targets) = windows.iter().map(|w| plan.materialize(dataset, w)).unzip();
        Batch {
            windows,
            inputs,
            targets,
        }
    }))
}
