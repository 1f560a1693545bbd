//! Differentiable training losses over `[.., T, N, 3]` pose tensors.

use super::LossWeights;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// The total loss and its three terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub wmpjpe: Var,
    pub tc: Var,
    pub mpjve: Var,
}

fn check_poses<T: Scalar>(tape: &Tape<T>, pred: Var, gt: Var) -> Result<()> {
    let (sp, sg) = (tape.shape(pred), tape.shape(gt));
    if sp != sg || sp.len() < 3 || sp[sp.len() - 1] != 3 {
        return Err(Error::shape("pose loss", sp, sg));
    }
    Ok(())
}

/// Weighted mean of per-joint distances; `joint_weights` holds one weight
/// per joint. With `squared`, distances are squared.
pub fn wmpjpe_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: Var,
    joint_weights: &[f64],
    squared: bool,
) -> Result<Var> {
    check_poses(tape, pred, gt)?;
    let s = tape.shape(pred);
    let n = s[s.len() - 2];
    if joint_weights.len() != n {
        return Err(Error::shape("joint weights", &[joint_weights.len()], &[n]));
    }
    let w = tape.constant(Tensor::from_f64([n], joint_weights)?);
    let diff = tape.sub(pred, gt)?;
    let dist = if squared {
        let sq = tape.square(diff);
        tape.sum_last(sq)?
    } else {
        tape.norm_last(diff)?
    };
    let weighted = tape.mul(dist, w)?;
    Ok(tape.mean(weighted))
}

/// First-order differences along the frame axis, `[.., T-1, N, 3]`, or
/// `None` when there is a single frame.
fn velocity<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Option<Var>> {
    let s = tape.shape(x).to_vec();
    let axis = s.len() - 3;
    let t = s[axis];
    if t < 2 {
        return Ok(None);
    }
    let next = tape.narrow(x, axis, 1, t - 1)?;
    let prev = tape.narrow(x, axis, 0, t - 1)?;
    tape.sub(next, prev).map(Some)
}

/// Mean squared norm of consecutive-frame differences of the prediction.
pub fn tc_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var) -> Result<Var> {
    let s = tape.shape(pred);
    if s.len() < 3 || s[s.len() - 1] != 3 {
        return Err(Error::shape("tc_loss", s, &[3]));
    }
    match velocity(tape, pred)? {
        None => Ok(tape.constant(Tensor::scalar(T::zero()))),
        Some(v) => {
            let sq = tape.square(v);
            let per = tape.sum_last(sq)?;
            Ok(tape.mean(per))
        }
    }
}

/// Mean distance between predicted and true consecutive-frame differences.
pub fn mpjve_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    check_poses(tape, pred, gt)?;
    match (velocity(tape, pred)?, velocity(tape, gt)?) {
        (Some(vp), Some(vg)) => {
            let d = tape.sub(vp, vg)?;
            let n = tape.norm_last(d)?;
            Ok(tape.mean(n))
        }
        _ => Ok(tape.constant(Tensor::scalar(T::zero()))),
    }
}

/// `wmpjpe + lambda_t * tc + lambda_m * mpjve`.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: Var,
    weights: &LossWeights,
    joint_weights: &[f64],
) -> Result<LossVars> {
    let wmpjpe = wmpjpe_loss(tape, pred, gt, joint_weights, weights.squared)?;
    let tc = tc_loss(tape, pred)?;
    let mpjve = mpjve_loss(tape, pred, gt)?;
    let a = tape.scale(tc, weights.lambda_t);
    let b = tape.scale(mpjve, weights.lambda_m);
    let total = tape.add(wmpjpe, a)?;
    let total = tape.add(total, b)?;
    Ok(LossVars {
        total,
        wmpjpe,
        tc,
        mpjve,
    })
}
