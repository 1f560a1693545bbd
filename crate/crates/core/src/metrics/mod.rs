//! Training losses on the tape and evaluation metrics on plain `f64` pose
//! sequences.

mod losses;
mod procrustes;
mod report;
mod skeleton;

pub use losses::{mpjve_loss, tc_loss, total_loss, wmpjpe_loss, LossVars};
pub use procrustes::{align, Alignment};
pub use report::{evaluate, ActionRow, EvalEntry, EvalReport, Histogram, JointRow, Summary};
pub use skeleton::{GroupWeights, JointGroup, LossWeights, SkeletonSpec};

use crate::error::{Error, Result};
use crate::model::PoseSequence3D;

pub const PCK_THRESHOLD_MM: f64 = 150.0;

/// Thresholds 0, 5, .., 150 mm.
pub fn auc_grid() -> Vec<f64> {
    (0..=30).map(|i| i as f64 * 5.0).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Distance per (frame, joint), frame-major.
pub fn joint_distances(pred: &PoseSequence3D, gt: &PoseSequence3D) -> Result<Vec<f64>> {
    pred.check_same_shape(gt)?;
    Ok(pred.coords.chunks(3).zip(gt.coords.chunks(3)).map(|(a, b)| dist(a, b)).collect())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Population variance.
pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    mean(&v.iter().map(|x| (x - m) * (x - m)).collect::<Vec<_>>())
}

pub fn mpjpe(pred: &PoseSequence3D, gt: &PoseSequence3D) -> Result<f64> {
    Ok(mean(&joint_distances(pred, gt)?))
}

pub fn per_joint_mpjpe(pred: &PoseSequence3D, gt: &PoseSequence3D) -> Result<Vec<f64>> {
    let d = joint_distances(pred, gt)?;
    let n = pred.joints;
    let mut out = vec![0.0; n];
    for (i, v) in d.iter().enumerate() {
        out[i % n] += v;
    }
    out.iter_mut().for_each(|v| *v /= pred.frames.max(1) as f64);
    Ok(out)
}

/// Weighted mean per-joint error with one weight per joint.
pub fn wmpjpe(pred: &PoseSequence3D, gt: &PoseSequence3D, joint_weights: &[f64], squared: bool) -> Result<f64> {
    if joint_weights.len() != pred.joints {
        return Err(Error::shape("joint weights", &[joint_weights.len()], &[pred.joints]));
    }
    let d = joint_distances(pred, gt)?;
    let n = pred.joints;
    let w: Vec<f64> = d
        .iter()
        .enumerate()
        .map(|(i, v)| joint_weights[i % n] * if squared { v * v } else { *v })
        .collect();
    Ok(mean(&w))
}

fn velocities(p: &PoseSequence3D) -> Vec<f64> {
    let stride = p.joints * 3;
    (stride..p.coords.len()).map(|i| p.coords[i] - p.coords[i - stride]).collect()
}

/// Mean squared norm of consecutive-frame differences; 0 for one frame.
pub fn tc_loss_value(pred: &PoseSequence3D) -> f64 {
    mean(&velocities(pred).chunks(3).map(|v| v.iter().map(|x| x * x).sum()).collect::<Vec<_>>())
}

/// Mean per-joint velocity error; 0 for one frame.
pub fn mpjve(pred: &PoseSequence3D, gt: &PoseSequence3D) -> Result<f64> {
    pred.check_same_shape(gt)?;
    let (vp, vg) = (velocities(pred), velocities(gt));
    Ok(mean(&vp.chunks(3).zip(vg.chunks(3)).map(|(a, b)| dist(a, b)).collect::<Vec<_>>()))
}

/// Total loss and its terms evaluated without the tape:
/// `(total, wmpjpe, tc, mpjve)`.
pub fn total_loss_value(
    pred: &PoseSequence3D,
    gt: &PoseSequence3D,
    weights: &LossWeights,
    joint_weights: &[f64],
) -> Result<(f64, f64, f64, f64)> {
    let w = wmpjpe(pred, gt, joint_weights, weights.squared)?;
    let t = tc_loss_value(pred);
    let m = mpjve(pred, gt)?;
    Ok((w + weights.lambda_t * t + weights.lambda_m * m, w, t, m))
}

/// Per-frame aligned MPJPE.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedError {
    pub value: f64,
    /// Frames aligned by translation only.
    pub degenerate_frames: Vec<usize>,
}

/// MPJPE after per-frame similarity alignment of `pred` onto `gt`.
pub fn p_mpjpe(pred: &PoseSequence3D, gt: &PoseSequence3D) -> Result<AlignedError> {
    pred.check_same_shape(gt)?;
    let mut total = 0.0;
    let mut degenerate_frames = Vec::new();
    for f in 0..pred.frames {
        let p: Vec<[f64; 3]> = (0..pred.joints).map(|j| pred.point(f, j)).collect();
        let g: Vec<[f64; 3]> = (0..gt.joints).map(|j| gt.point(f, j)).collect();
        let a = align(&p, &g);
        if a.degenerate {
            degenerate_frames.push(f);
        }
        total += a.aligned.iter().zip(&g).map(|(x, y)| dist(x, y)).sum::<f64>();
    }
    let count = (pred.frames * pred.joints).max(1) as f64;
    Ok(AlignedError {
        value: total / count,
        degenerate_frames,
    })
}

/// PCK at `threshold` and its mean over `grid`, both in percent. A joint
/// counts as correct when its distance is at most the threshold.
pub fn pck_auc(pred: &PoseSequence3D, gt: &PoseSequence3D, threshold: f64, grid: &[f64]) -> Result<(f64, f64)> {
    if grid.is_empty() {
        return Err(Error::Param("empty PCK threshold grid".into()));
    }
    if !(threshold > 0.0) || grid.iter().any(|g| !(*g >= 0.0)) {
        return Err(Error::Param("PCK thresholds must be positive".into()));
    }
    let d = joint_distances(pred, gt)?;
    let pck = |th: f64| 100.0 * d.iter().filter(|&&v| v <= th).count() as f64 / d.len().max(1) as f64;
    let auc = grid.iter().map(|&g| pck(g)).sum::<f64>() / grid.len() as f64;
    Ok((pck(threshold), auc))
}

#[cfg(test)]
mod tests;
