use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{auc_grid, joint_distances, mpjve, p_mpjpe, pck_auc, variance, wmpjpe, LossWeights, SkeletonSpec, PCK_THRESHOLD_MM};
use crate::error::{Error, Result};
use crate::model::PoseSequence3D;

/// One evaluated clip.
#[derive(Debug, Clone)]
pub struct EvalEntry {
    pub action: String,
    pub pred: PoseSequence3D,
    pub gt: PoseSequence3D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mpjpe: f64,
    pub p_mpjpe: f64,
    pub wmpjpe: f64,
    pub mpjve: f64,
    pub pck: f64,
    pub auc: f64,
    pub frames: usize,
    pub degenerate_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRow {
    pub action: String,
    pub clips: usize,
    pub frames: usize,
    pub mpjpe: f64,
    pub p_mpjpe: f64,
    pub mpjve: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointRow {
    pub joint: String,
    pub mpjpe: f64,
}

/// Counts of per-frame MPJPE in bins `[edges[i], edges[i+1])`; the last bin
/// is closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], bin_width: f64) -> Result<Self> {
        if !(bin_width > 0.0) {
            return Err(Error::Param("histogram bin width must be positive".into()));
        }
        let hi = values.iter().copied().fold(0.0, f64::max);
        let bins = ((hi / bin_width).floor() as usize + 1).max(1);
        let mut counts = vec![0; bins];
        for &v in values {
            counts[((v / bin_width).floor() as usize).min(bins - 1)] += 1;
        }
        Ok(Histogram {
            edges: (0..=bins).map(|i| i as f64 * bin_width).collect(),
            counts,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: Summary,
    pub per_action: Vec<ActionRow>,
    pub per_joint: Vec<JointRow>,
    /// Variance of per-action MPJPE.
    pub action_variance: f64,
    /// Variance of per-joint MPJPE.
    pub joint_variance: f64,
    /// Distribution of per-frame MPJPE.
    pub histogram: Histogram,
}

#[derive(Default)]
struct Acc {
    clips: usize,
    frames: usize,
    dist: f64,
    aligned: f64,
    weighted: f64,
    steps: usize,
    velocity: f64,
    degenerate: usize,
}

impl Acc {
    fn add(&mut self, e: &EvalEntry, joint_weights: &[f64], weights: &LossWeights) -> Result<()> {
        let n = (e.gt.frames * e.gt.joints) as f64;
        let steps = e.gt.frames.saturating_sub(1) * e.gt.joints;
        let d: f64 = joint_distances(&e.pred, &e.gt)?.iter().sum();
        let pa = p_mpjpe(&e.pred, &e.gt)?;
        self.clips += 1;
        self.frames += e.gt.frames;
        self.dist += d;
        self.aligned += pa.value * n;
        self.weighted += wmpjpe(&e.pred, &e.gt, joint_weights, weights.squared)? * n;
        self.velocity += mpjve(&e.pred, &e.gt)? * steps as f64;
        self.steps += steps;
        self.degenerate += pa.degenerate_frames.len();
        Ok(())
    }

    fn points(&self, joints: usize) -> f64 {
        (self.frames * joints).max(1) as f64
    }
}

/// Aggregates metrics over clips, per action and per joint. Means are taken
/// over all (frame, joint) pairs.
pub fn evaluate(
    entries: &[EvalEntry],
    skeleton: &SkeletonSpec,
    weights: &LossWeights,
    histogram_bin: f64,
) -> Result<EvalReport> {
    let n = skeleton.len();
    if let Some(e) = entries.iter().find(|e| e.gt.joints != n) {
        return Err(Error::Schema(format!(
            "clip with {} joints evaluated against {}-joint skeleton",
            e.gt.joints, n
        )));
    }
    let jw = weights.joint_weights(skeleton);
    let mut all = Acc::default();
    let mut by_action: BTreeMap<&str, Acc> = BTreeMap::new();
    let mut joint_sum = vec![0.0; n];
    let mut frame_errors = Vec::new();
    let mut dists = Vec::new();
    for e in entries {
        all.add(e, &jw, weights)?;
        by_action.entry(&e.action).or_default().add(e, &jw, weights)?;
        let d = joint_distances(&e.pred, &e.gt)?;
        for frame in d.chunks(n) {
            frame.iter().enumerate().for_each(|(j, v)| joint_sum[j] += v);
            frame_errors.push(frame.iter().sum::<f64>() / n as f64);
        }
        dists.extend(d);
    }
    // PCK over the pooled distances
    let pooled = |v: &[f64]| PoseSequence3D {
        joints: 1,
        frames: v.len(),
        coords: v.iter().flat_map(|&d| [d, 0.0, 0.0]).collect(),
    };
    let (pck, auc) = if dists.is_empty() {
        (0.0, 0.0)
    } else {
        pck_auc(&pooled(&dists), &pooled(&vec![0.0; dists.len()]), PCK_THRESHOLD_MM, &auc_grid())?
    };
    let pts = all.points(n);
    let summary = Summary {
        mpjpe: all.dist / pts,
        p_mpjpe: all.aligned / pts,
        wmpjpe: all.weighted / pts,
        mpjve: all.velocity / all.steps.max(1) as f64,
        pck,
        auc,
        frames: all.frames,
        degenerate_frames: all.degenerate,
    };
    let per_action: Vec<ActionRow> = by_action
        .iter()
        .map(|(a, acc)| ActionRow {
            action: a.to_string(),
            clips: acc.clips,
            frames: acc.frames,
            mpjpe: acc.dist / acc.points(n),
            p_mpjpe: acc.aligned / acc.points(n),
            mpjve: acc.velocity / acc.steps.max(1) as f64,
        })
        .collect();
    let per_joint: Vec<JointRow> = skeleton
        .joints
        .iter()
        .zip(&joint_sum)
        .map(|(name, s)| JointRow {
            joint: name.clone(),
            mpjpe: s / all.frames.max(1) as f64,
        })
        .collect();
    Ok(EvalReport {
        action_variance: variance(&per_action.iter().map(|r| r.mpjpe).collect::<Vec<_>>()),
        joint_variance: variance(&per_joint.iter().map(|r| r.mpjpe).collect::<Vec<_>>()),
        histogram: Histogram::new(&frame_errors, histogram_bin)?,
        summary,
        per_action,
        per_joint,
    })
}

impl EvalReport {
    /// Aligned-column text tables.
    pub fn to_text(&self) -> String {
        let s = &self.summary;
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>10} {:>10} {:>10} {:>10} {:>8} {:>8}", "", "MPJPE", "P-MPJPE", "WMPJPE", "MPJVE", "PCK", "AUC");
        let _ = writeln!(
            out,
            "{:<12} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>8.2} {:>8.2}",
            "overall", s.mpjpe, s.p_mpjpe, s.wmpjpe, s.mpjve, s.pck, s.auc
        );
        let _ = writeln!(out, "frames {}  degenerate alignments {}", s.frames, s.degenerate_frames);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<20} {:>6} {:>8} {:>10} {:>10} {:>10}", "action", "clips", "frames", "MPJPE", "P-MPJPE", "MPJVE");
        for r in &self.per_action {
            let _ = writeln!(
                out,
                "{:<20} {:>6} {:>8} {:>10.3} {:>10.3} {:>10.3}",
                r.action, r.clips, r.frames, r.mpjpe, r.p_mpjpe, r.mpjve
            );
        }
        let _ = writeln!(out, "{:<20} {:>48.3}", "variance", self.action_variance);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<20} {:>10}", "joint", "MPJPE");
        for r in &self.per_joint {
            let _ = writeln!(out, "{:<20} {:>10.3}", r.joint, r.mpjpe);
        }
        let _ = writeln!(out, "{:<20} {:>10.3}", "variance", self.joint_variance);
        out
    }
}
