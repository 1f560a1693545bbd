//! Synthetic motion: forward kinematics over a skeleton with harmonic joint
//! angles, seen through a pinhole camera.

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::SkeletonSpec;
use crate::model::{KeypointSequence2D, PoseSequence3D};

/// Pinhole intrinsics and image size, pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        CameraModel {
            fx: 1145.0,
            fy: 1145.0,
            cx: 500.0,
            cy: 500.0,
            width: 1000.0,
            height: 1000.0,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if [self.fx, self.fy, self.width, self.height].iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("camera focal lengths and image size must be positive".into()));
        }
        Ok(())
    }

    /// Pixel coordinates of a camera-frame point (mm, z forward).
    pub fn project(&self, p: [f64; 3]) -> [f64; 2] {
        [self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy]
    }
}

/// Maps pixels to normalized units: `x` to `[-1, 1]` across the width, `y`
/// scaled by the same factor to keep the aspect ratio.
pub fn normalize_2d(p: [f64; 2], width: f64, height: f64) -> [f64; 2] {
    [2.0 * p[0] / width - 1.0, 2.0 * p[1] / width - height / width]
}

pub fn denormalize_2d(p: [f64; 2], width: f64, height: f64) -> [f64; 2] {
    [(p[0] + 1.0) * width / 2.0, (p[1] + height / width) * width / 2.0]
}

/// Parameters of the generated motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionSpec {
    /// Peak joint rotation per axis, radians.
    pub amplitude: f64,
    /// Range of joint-angle frequencies, Hz.
    pub min_frequency: f64,
    pub max_frequency: f64,
    pub fps: f64,
    /// Peak root sway, mm.
    pub root_sway: f64,
    /// Distance of the root from the camera, mm.
    pub depth: f64,
    /// Standard deviation of 2D keypoint noise, pixels.
    pub noise_sigma: f64,
    pub camera: CameraModel,
}

impl Default for MotionSpec {
    fn default() -> Self {
        MotionSpec {
            amplitude: 0.5,
            min_frequency: 0.2,
            max_frequency: 1.5,
            fps: 50.0,
            root_sway: 150.0,
            depth: 5000.0,
            noise_sigma: 0.0,
            camera: CameraModel::default(),
        }
    }
}

impl MotionSpec {
    /// No joint motion and no sway.
    pub fn still() -> Self {
        MotionSpec {
            amplitude: 0.0,
            root_sway: 0.0,
            ..MotionSpec::default()
        }
    }
}

/// Rest offset of each joint from its parent, mm, camera axes (y down).
pub fn rest_offsets(skeleton: &SkeletonSpec) -> Vec<[f64; 3]> {
    if skeleton.name == "h36m17" {
        return vec![
            [0.0, 0.0, 0.0],
            [-130.0, 0.0, 0.0],
            [0.0, 450.0, 0.0],
            [0.0, 440.0, 0.0],
            [130.0, 0.0, 0.0],
            [0.0, 450.0, 0.0],
            [0.0, 440.0, 0.0],
            [0.0, -230.0, 0.0],
            [0.0, -250.0, 0.0],
            [0.0, -100.0, 0.0],
            [0.0, -120.0, 30.0],
            [170.0, 0.0, 0.0],
            [0.0, 280.0, 0.0],
            [0.0, 250.0, 0.0],
            [-170.0, 0.0, 0.0],
            [0.0, 280.0, 0.0],
            [0.0, 250.0, 0.0],
        ];
    }
    (0..skeleton.len())
        .map(|i| if i == skeleton.root { [0.0; 3] } else { [0.0, -150.0, 20.0] })
        .collect()
}

struct Harmonic {
    amp: [f64; 3],
    freq: [f64; 3],
    phase: [f64; 3],
}

impl Harmonic {
    fn sample(rng: &mut ChaCha8Rng, spec: &MotionSpec, amp: f64) -> Self {
        let mut h = Harmonic {
            amp: [0.0; 3],
            freq: [0.0; 3],
            phase: [0.0; 3],
        };
        for k in 0..3 {
            h.amp[k] = amp * rng.gen_range(0.2..1.0);
            h.freq[k] = if spec.max_frequency > spec.min_frequency {
                rng.gen_range(spec.min_frequency..spec.max_frequency)
            } else {
                spec.min_frequency
            };
            h.phase[k] = rng.gen_range(0.0..std::f64::consts::TAU);
        }
        h
    }

    fn at(&self, time: f64) -> [f64; 3] {
        let mut v = [0.0; 3];
        for k in 0..3 {
            v[k] = self.amp[k] * (std::f64::consts::TAU * self.freq[k] * time + self.phase[k]).sin();
        }
        v
    }
}

/// Generates camera-frame 3D joints (mm) and their pixel projections for
/// `frames` frames. Bone lengths equal the rest offsets in every frame.
/// Gaussian noise of `spec.noise_sigma` pixels is added to the 2D output.
pub fn synth_motion(
    seed: u64,
    skeleton: &SkeletonSpec,
    frames: usize,
    spec: &MotionSpec,
) -> Result<(PoseSequence3D, KeypointSequence2D)> {
    skeleton.validate()?;
    spec.camera.validate()?;
    if !(spec.noise_sigma >= 0.0) || !(spec.fps > 0.0) || !(spec.depth > 0.0) {
        return Err(Error::Config("motion spec needs fps > 0, depth > 0, noise >= 0".into()));
    }
    let n = skeleton.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offsets = rest_offsets(skeleton);
    let joint_motion: Vec<Harmonic> = (0..n).map(|_| Harmonic::sample(&mut rng, spec, spec.amplitude)).collect();
    let sway = Harmonic::sample(&mut rng, spec, spec.root_sway);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut pts3 = Vec::with_capacity(frames * n * 3);
    let mut pts2 = Vec::with_capacity(frames * n * 2);
    let mut global = vec![Rotation3::identity(); n];
    let mut pos = vec![Vector3::zeros(); n];
    for f in 0..frames {
        let time = f as f64 / spec.fps;
        for j in 0..n {
            let a = joint_motion[j].at(time);
            let local = Rotation3::from_euler_angles(a[0], a[1], a[2]);
            match skeleton.parents[j] {
                None => {
                    let s = sway.at(time);
                    global[j] = local;
                    pos[j] = Vector3::new(s[0], s[1] * 0.3, spec.depth + s[2]);
                }
                Some(p) => {
                    global[j] = global[p] * local;
                    pos[j] = pos[p] + global[j] * Vector3::from(offsets[j]);
                }
            }
        }
        for p in &pos {
            pts3.extend([p.x, p.y, p.z]);
            let [u, v] = spec.camera.project([p.x, p.y, p.z]);
            if spec.noise_sigma > 0.0 {
                pts2.extend([u + noise.sample(&mut rng), v + noise.sample(&mut rng)]);
            } else {
                pts2.extend([u, v]);
            }
        }
    }
    Ok((
        PoseSequence3D::new(n, frames, pts3)?,
        KeypointSequence2D::new(n, frames, pts2, skeleton.name.clone())?,
    ))
}
