use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 2D keypoints of one clip, frame-major `[T][N][2]`, in normalized image
/// units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSequence2D {
    pub joints: usize,
    pub frames: usize,
    pub coords: Vec<f64>,
    pub skeleton: String,
    /// Optional detector confidence `[T][N]`; carried but not consumed by
    /// the model.
    pub confidence: Option<Vec<f64>>,
}

impl KeypointSequence2D {
    pub fn new(joints: usize, frames: usize, coords: Vec<f64>, skeleton: impl Into<String>) -> Result<Self> {
        check_block("2D keypoints", joints, frames, 2, &coords)?;
        Ok(KeypointSequence2D {
            joints,
            frames,
            coords,
            skeleton: skeleton.into(),
            confidence: None,
        })
    }

    pub fn with_confidence(mut self, confidence: Vec<f64>) -> Result<Self> {
        if confidence.len() != self.joints * self.frames {
            return Err(Error::shape("confidence", &[confidence.len()], &[self.frames, self.joints]));
        }
        if let Some(i) = confidence.iter().position(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Schema(format!(
                "confidence outside [0, 1] at frame {} joint {}",
                i / self.joints,
                i % self.joints
            )));
        }
        self.confidence = Some(confidence);
        Ok(self)
    }

    pub fn point(&self, frame: usize, joint: usize) -> [f64; 2] {
        let i = (frame * self.joints + joint) * 2;
        [self.coords[i], self.coords[i + 1]]
    }

    /// Frames `start..start + len`, replicating the last frame past the end.
    pub fn window(&self, start: usize, len: usize) -> Self {
        KeypointSequence2D {
            joints: self.joints,
            frames: len,
            coords: window_block(&self.coords, self.joints * 2, self.frames, start, len),
            skeleton: self.skeleton.clone(),
            confidence: self
                .confidence
                .as_ref()
                .map(|c| window_block(c, self.joints, self.frames, start, len)),
        }
    }
}

/// 3D joints of one clip, frame-major `[T][N][3]`, millimeters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSequence3D {
    pub joints: usize,
    pub frames: usize,
    pub coords: Vec<f64>,
}

impl PoseSequence3D {
    pub fn new(joints: usize, frames: usize, coords: Vec<f64>) -> Result<Self> {
        check_block("3D poses", joints, frames, 3, &coords)?;
        Ok(PoseSequence3D { joints, frames, coords })
    }

    pub fn zeros(joints: usize, frames: usize) -> Self {
        PoseSequence3D {
            joints,
            frames,
            coords: vec![0.0; joints * frames * 3],
        }
    }

    pub fn point(&self, frame: usize, joint: usize) -> [f64; 3] {
        let i = (frame * self.joints + joint) * 3;
        [self.coords[i], self.coords[i + 1], self.coords[i + 2]]
    }

    pub fn window(&self, start: usize, len: usize) -> Self {
        PoseSequence3D {
            joints: self.joints,
            frames: len,
            coords: window_block(&self.coords, self.joints * 3, self.frames, start, len),
        }
    }

    /// Subtracts the `root` joint from every joint, per frame.
    pub fn root_relative(&self, root: usize) -> Self {
        let mut out = self.clone();
        for frame in out.coords.chunks_mut(self.joints * 3) {
            let r = [frame[root * 3], frame[root * 3 + 1], frame[root * 3 + 2]];
            for p in frame.chunks_mut(3) {
                p.iter_mut().zip(r).for_each(|(v, o)| *v -= o);
            }
        }
        out
    }

    pub fn check_same_shape(&self, other: &PoseSequence3D) -> Result<()> {
        if self.joints != other.joints || self.frames != other.frames {
            return Err(Error::shape(
                "pose sequences",
                &[self.frames, self.joints, 3],
                &[other.frames, other.joints, 3],
            ));
        }
        Ok(())
    }
}

fn check_block(what: &'static str, joints: usize, frames: usize, channels: usize, coords: &[f64]) -> Result<()> {
    if coords.len() != joints * frames * channels {
        return Err(Error::shape(what, &[coords.len()], &[frames, joints, channels]));
    }
    if let Some(i) = coords.iter().position(|v| !v.is_finite()) {
        let per_frame = joints * channels;
        return Err(Error::Schema(format!(
            "non-finite {what} coordinate at frame {} joint {}",
            i / per_frame,
            (i % per_frame) / channels
        )));
    }
    Ok(())
}

fn window_block(data: &[f64], stride: usize, frames: usize, start: usize, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(stride * len);
    for f in start..start + len {
        let src = f.min(frames - 1);
        out.extend_from_slice(&data[src * stride..(src + 1) * stride]);
    }
    out
}
