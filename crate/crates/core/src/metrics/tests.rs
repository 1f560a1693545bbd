use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{finite_difference_check_many, Tape, Tensor};

fn pose(joints: usize, frames: usize, coords: &[f64]) -> PoseSequence3D {
    PoseSequence3D::new(joints, frames, coords.to_vec()).unwrap()
}

fn random_pose(rng: &mut ChaCha8Rng, joints: usize, frames: usize, scale: f64) -> PoseSequence3D {
    let c = (0..joints * frames * 3).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
    PoseSequence3D::new(joints, frames, c).unwrap()
}

fn map_points(p: &PoseSequence3D, f: impl Fn(Vector3<f64>) -> Vector3<f64>) -> PoseSequence3D {
    let coords = p
        .coords
        .chunks(3)
        .flat_map(|c| {
            let v = f(Vector3::new(c[0], c[1], c[2]));
            [v.x, v.y, v.z]
        })
        .collect();
    PoseSequence3D::new(p.joints, p.frames, coords).unwrap()
}

#[test]
fn h36m_skeleton_is_a_tree_with_one_group_per_joint() {
    let s = SkeletonSpec::h36m17();
    s.validate().unwrap();
    assert_eq!(s.len(), 17);
    assert_eq!(s.groups.len(), 17);
    let w = LossWeights::default().joint_weights(&s);
    assert_eq!(w[0], 1.0);
    assert_eq!(w[10], 1.5);
    assert_eq!(w[2], 2.5);
    assert_eq!(w[16], 4.0);
    assert_eq!(SkeletonSpec::by_name("chain5").unwrap().len(), 5);
    assert!(SkeletonSpec::by_name("nope").is_err());
}

#[test]
fn skeleton_validation_rejects_forests_and_cycles() {
    let mut s = SkeletonSpec::chain(4);
    s.parents[2] = None;
    assert!(s.validate().is_err());
    let mut s = SkeletonSpec::chain(4);
    s.parents[1] = Some(3);
    assert!(s.validate().is_err());
}

#[test]
fn loss_weight_validation() {
    assert!(LossWeights::default().validate().is_ok());
    let mut w = LossWeights::default();
    w.groups.head = 0.0;
    assert!(w.validate().is_err());
}

#[test]
fn wmpjpe_examples() {
    let gt = pose(1, 1, &[0.0, 0.0, 0.0]);
    let pred = pose(1, 1, &[3.0, 4.0, 0.0]);
    assert_eq!(wmpjpe(&gt, &gt, &[4.0], false).unwrap(), 0.0);
    assert_eq!(wmpjpe(&pred, &gt, &[4.0], false).unwrap(), 20.0);
    assert_eq!(wmpjpe(&pred, &gt, &[4.0], true).unwrap(), 100.0);
    assert!(wmpjpe(&pred, &gt, &[4.0, 1.0], false).is_err());
}

#[test]
fn unit_weights_reduce_to_mpjpe() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (p, g) = (random_pose(&mut rng, 17, 9, 100.0), random_pose(&mut rng, 17, 9, 100.0));
        let a = wmpjpe(&p, &g, &[1.0; 17], false).unwrap();
        let b = mpjpe(&p, &g).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn mpjpe_examples() {
    let gt = pose(1, 1, &[0.0, 0.0, 0.0]);
    assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
    assert_eq!(mpjpe(&pose(1, 1, &[3.0, 4.0, 0.0]), &gt).unwrap(), 5.0);
    assert!(mpjpe(&gt, &pose(1, 2, &[0.0; 6])).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (p, g) = (random_pose(&mut rng, 5, 7, 1.0), random_pose(&mut rng, 5, 7, 1.0));
    let per = per_joint_mpjpe(&p, &g).unwrap();
    assert!((per.iter().sum::<f64>() / 5.0 - mpjpe(&p, &g).unwrap()).abs() < 1e-12);
}

#[test]
fn tc_loss_examples() {
    let still = pose(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0].repeat(3));
    assert_eq!(tc_loss_value(&still), 0.0);
    assert_eq!(tc_loss_value(&pose(1, 2, &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0])), 1.0);
    assert_eq!(tc_loss_value(&pose(1, 1, &[5.0, 0.0, 0.0])), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random_pose(&mut rng, 4, 6, 1.0);
    let scaled = map_points(&p, |v| v * 3.0);
    assert!((tc_loss_value(&scaled) - 9.0 * tc_loss_value(&p)).abs() < 1e-12);
}

#[test]
fn mpjve_examples() {
    let gt = pose(1, 3, &[0.0; 9]);
    let pred = pose(1, 3, &[0.0, 0.0, 0.0, 0.3, 0.4, 0.0, 0.6, 0.8, 0.0]);
    assert!((mpjve(&pred, &gt).unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(mpjve(&gt, &gt).unwrap(), 0.0);
    assert_eq!(mpjve(&pose(1, 1, &[1.0, 0.0, 0.0]), &pose(1, 1, &[0.0; 3])).unwrap(), 0.0);
}

#[test]
fn total_loss_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (p, g) = (random_pose(&mut rng, 3, 5, 1.0), random_pose(&mut rng, 3, 5, 1.0));
    let jw = [1.0, 2.5, 4.0];
    let zero = LossWeights {
        lambda_t: 0.0,
        lambda_m: 0.0,
        ..LossWeights::default()
    };
    let (total, w, _, _) = total_loss_value(&p, &g, &zero, &jw).unwrap();
    assert_eq!(total, w);
    assert_eq!(total_loss_value(&g, &g, &zero, &jw).unwrap().0, 0.0);
}

/// Independent loop-based evaluation of the total loss.
fn total_by_loops(p: &PoseSequence3D, g: &PoseSequence3D, jw: &[f64], lt: f64, lm: f64) -> f64 {
    let (n, t) = (p.joints, p.frames);
    let d = |a: [f64; 3], b: [f64; 3]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let mut w = 0.0;
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..t {
            s += d(p.point(j, i), g.point(j, i));
        }
        w += jw[i] * s / t as f64;
    }
    w /= n as f64;
    let (mut tc, mut mv) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..t - 1 {
            let vp = sub(p.point(j + 1, i), p.point(j, i));
            let vg = sub(g.point(j + 1, i), g.point(j, i));
            tc += vp.iter().map(|x| x * x).sum::<f64>();
            mv += d(vp, vg);
        }
    }
    let m = (n * (t - 1)) as f64;
    w + lt * tc / m + lm * mv / m
}

#[test]
fn total_loss_matches_loop_oracle_and_tape() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let weights = LossWeights::default();
    for _ in 0..10 {
        let (p, g) = (random_pose(&mut rng, 4, 5, 1.0), random_pose(&mut rng, 4, 5, 1.0));
        let jw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.5..4.0)).collect();
        let oracle = total_by_loops(&p, &g, &jw, weights.lambda_t, weights.lambda_m);
        let (value, w, t, m) = total_loss_value(&p, &g, &weights, &jw).unwrap();
        assert!((value - oracle).abs() < 1e-12);
        let mut tape = Tape::<f64>::new();
        let pv = tape.leaf(Tensor::new(vec![5, 4, 3], p.coords.clone()).unwrap());
        let gv = tape.constant(Tensor::new(vec![5, 4, 3], g.coords.clone()).unwrap());
        let l = total_loss(&mut tape, pv, gv, &weights, &jw).unwrap();
        assert!((tape.value(l.total).item() - oracle).abs() < 1e-12);
        assert!((tape.value(l.wmpjpe).item() - w).abs() < 1e-12);
        assert!((tape.value(l.tc).item() - t).abs() < 1e-12);
        assert!((tape.value(l.mpjve).item() - m).abs() < 1e-12);
    }
}

#[test]
fn tape_losses_on_batches_and_single_frames() {
    let mut tape = Tape::<f64>::new();
    let p = tape.leaf(Tensor::from_f64([2, 1, 1, 3], &[3.0, 4.0, 0.0, 0.0, 0.0, 0.0]).unwrap().with_requires_grad(true));
    let g = tape.constant(Tensor::zeros([2, 1, 1, 3]));
    let l = total_loss(&mut tape, p, g, &LossWeights::default(), &[4.0]).unwrap();
    // mean over the batch of 20 and 0; one frame so the temporal terms vanish
    assert_eq!(tape.value(l.total).item(), 10.0);
    tape.backward(l.total).unwrap();
    assert!(tape.grad(p).is_some());
    let bad = tape.constant(Tensor::zeros([2, 1, 2, 3]));
    assert!(total_loss(&mut tape, p, bad, &LossWeights::default(), &[4.0]).is_err());
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = Tensor::new(vec![2, 4, 3, 3], (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let g = Tensor::new(vec![2, 4, 3, 3], (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    for squared in [false, true] {
        let weights = LossWeights {
            squared,
            ..LossWeights::default()
        };
        let err = finite_difference_check_many(
            |tape, v| Ok(total_loss(tape, v[0], v[1], &weights, &[1.0, 2.5, 4.0])?.total),
            &[p.clone(), g.clone()],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn similarity_transforms_align_to_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let gt = random_pose(&mut rng, 17, 3, 500.0);
        let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let r = Rotation3::from_scaled_axis(axis.normalize() * rng.gen_range(0.0..3.1));
        let t = Vector3::new(rng.gen_range(-1e3..1e3), rng.gen_range(-1e3..1e3), rng.gen_range(-1e3..1e3));
        let s = rng.gen_range(0.3..3.0);
        let pred = map_points(&gt, |v| s * (r * v) + t);
        let e = p_mpjpe(&pred, &gt).unwrap();
        assert!(e.value < 1e-6, "{}", e.value);
        assert!(e.degenerate_frames.is_empty());
    }
    let gt = random_pose(&mut rng, 17, 2, 500.0);
    assert!(p_mpjpe(&map_points(&gt, |v| 2.0 * v), &gt).unwrap().value < 1e-6);
}

/// Squared error of `pred` after rotation `r` and the best non-negative
/// scale and translation, plus the resulting mean distance.
fn error_at_rotation(p0: &[Vector3<f64>], g0: &[Vector3<f64>], r: &Rotation3<f64>) -> (f64, f64) {
    let rp: Vec<Vector3<f64>> = p0.iter().map(|v| r * v).collect();
    let num: f64 = rp.iter().zip(g0).map(|(a, b)| a.dot(b)).sum();
    let den: f64 = rp.iter().map(|a| a.norm_squared()).sum();
    let s = (num / den).max(0.0);
    let sse = rp.iter().zip(g0).map(|(a, b)| (s * a - b).norm_squared()).sum();
    let mean = rp.iter().zip(g0).map(|(a, b)| (s * a - b).norm()).sum::<f64>() / p0.len() as f64;
    (sse, mean)
}

/// Grid search over Euler angles followed by shrinking local refinement.
fn brute_force_aligned_error(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> f64 {
    let center = |p: &[Vector3<f64>]| {
        let c = p.iter().sum::<Vector3<f64>>() / p.len() as f64;
        p.iter().map(|v| v - c).collect::<Vec<_>>()
    };
    let (p0, g0) = (center(pred), center(gt));
    let eval = |a: [f64; 3]| error_at_rotation(&p0, &g0, &Rotation3::from_euler_angles(a[0], a[1], a[2]));
    let pi = std::f64::consts::PI;
    let mut best = ([0.0; 3], f64::INFINITY);
    let steps = 24;
    for i in 0..steps {
        for j in 0..steps / 2 {
            for k in 0..steps {
                let a = [
                    -pi + 2.0 * pi * i as f64 / steps as f64,
                    -pi / 2.0 + pi * j as f64 / (steps / 2) as f64,
                    -pi + 2.0 * pi * k as f64 / steps as f64,
                ];
                let e = eval(a).0;
                if e < best.1 {
                    best = (a, e);
                }
            }
        }
    }
    let mut step = 0.2;
    while step > 1e-10 {
        let mut improved = false;
        for axis in 0..3 {
            for sign in [-1.0, 1.0] {
                let mut a = best.0;
                a[axis] += sign * step;
                let e = eval(a).0;
                if e < best.1 {
                    best = (a, e);
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    eval(best.0).1
}

#[test]
fn reflections_are_not_aligned_away() {
    let gt = pose(4, 1, &[0.0, 0.0, 0.0, 100.0, 0.0, 0.0, 0.0, 200.0, 0.0, 30.0, 40.0, 300.0]);
    let pred = map_points(&gt, |v| Vector3::new(-v.x, v.y, v.z));
    let e = p_mpjpe(&pred, &gt).unwrap().value;
    assert!(e > 1.0, "reflection aligned to {e}");
    let pts = |p: &PoseSequence3D| (0..4).map(|j| Vector3::from(p.point(0, j))).collect::<Vec<_>>();
    let oracle = brute_force_aligned_error(&pts(&pred), &pts(&gt));
    assert!((e - oracle).abs() < 1e-4 * oracle.max(1.0), "svd {e} vs search {oracle}");
}

#[test]
fn degenerate_frames_fall_back_to_translation() {
    let gt = pose(3, 2, &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let mut c = gt.coords.clone();
    c[..9].copy_from_slice(&[5.0; 9]);
    let pred = PoseSequence3D::new(3, 2, c).unwrap();
    let e = p_mpjpe(&pred, &gt).unwrap();
    assert_eq!(e.degenerate_frames, vec![0]);
    // frame 0 collapses onto the gt centroid, frame 1 aligns exactly
    let centroid = [1.0 / 3.0, 1.0 / 3.0, 0.0];
    let want: f64 = (0..3)
        .map(|j| {
            let g = gt.point(0, j);
            ((g[0] - centroid[0]).powi(2) + (g[1] - centroid[1]).powi(2)).sqrt()
        })
        .sum::<f64>()
        / 6.0;
    assert!((e.value - want).abs() < 1e-9);
}

#[test]
fn pck_auc_examples() {
    let grid = auc_grid();
    assert_eq!(grid.len(), 31);
    let gt = pose(2, 1, &[0.0; 6]);
    assert_eq!(pck_auc(&gt, &gt, 150.0, &grid).unwrap(), (100.0, 100.0));
    let off = pose(2, 1, &[151.0, 0.0, 0.0, 0.0, 151.0, 0.0]);
    assert_eq!(pck_auc(&off, &gt, 150.0, &grid).unwrap().0, 0.0);
    let half = pose(4, 1, &[10.0, 0.0, 0.0, 0.0, 10.0, 0.0, 300.0, 0.0, 0.0, 0.0, 0.0, 300.0]);
    let gt4 = pose(4, 1, &[0.0; 12]);
    let (pck, auc) = pck_auc(&half, &gt4, 150.0, &grid).unwrap();
    assert_eq!(pck, 50.0);
    // 10 mm joints are inside from the 10 mm threshold on: 29 of 31 points
    assert!((auc - 50.0 * 29.0 / 31.0).abs() < 1e-12);
    assert!(matches!(pck_auc(&gt, &gt, 150.0, &[]), Err(Error::Param(_))));
    assert!(pck_auc(&gt, &gt, 0.0, &grid).is_err());
}

#[test]
fn histogram_bins() {
    let h = Histogram::new(&[0.0, 4.9, 5.0, 12.0], 5.0).unwrap();
    assert_eq!(h.edges, vec![0.0, 5.0, 10.0, 15.0]);
    assert_eq!(h.counts, vec![2, 1, 1]);
    assert!(Histogram::new(&[1.0], 0.0).is_err());
}

#[test]
fn report_on_perfect_predictions_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let skeleton = SkeletonSpec::h36m17();
    let entries: Vec<EvalEntry> = ["walk", "sit", "walk"]
        .iter()
        .map(|a| {
            let g = random_pose(&mut rng, 17, 5, 300.0);
            EvalEntry {
                action: a.to_string(),
                pred: g.clone(),
                gt: g,
            }
        })
        .collect();
    let r = evaluate(&entries, &skeleton, &LossWeights::default(), 10.0).unwrap();
    let s = &r.summary;
    assert_eq!((s.mpjpe, s.wmpjpe, s.mpjve), (0.0, 0.0, 0.0));
    assert!(s.p_mpjpe < 1e-9);
    assert_eq!((s.pck, s.auc, s.frames), (100.0, 100.0, 15));
    assert_eq!(r.per_action.len(), 2);
    assert_eq!(r.per_action[1].clips, 2);
    assert_eq!(r.per_joint.len(), 17);
    assert_eq!(r.histogram.counts, vec![15]);
    let text = r.to_text();
    assert!(text.contains("walk") && text.contains("right_wrist"));
    let json = serde_json::to_string(&r).unwrap();
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
}

#[test]
fn report_aggregates_match_direct_metrics() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let skeleton = SkeletonSpec::chain(4);
    let (p1, g1) = (random_pose(&mut rng, 4, 3, 10.0), random_pose(&mut rng, 4, 3, 10.0));
    let (p2, g2) = (random_pose(&mut rng, 4, 5, 10.0), random_pose(&mut rng, 4, 5, 10.0));
    let entries = vec![
        EvalEntry { action: "a".into(), pred: p1.clone(), gt: g1.clone() },
        EvalEntry { action: "b".into(), pred: p2.clone(), gt: g2.clone() },
    ];
    let r = evaluate(&entries, &skeleton, &LossWeights::default(), 1.0).unwrap();
    let want = (mpjpe(&p1, &g1).unwrap() * 3.0 + mpjpe(&p2, &g2).unwrap() * 5.0) / 8.0;
    assert!((r.summary.mpjpe - want).abs() < 1e-12);
    let a = mpjpe(&p1, &g1).unwrap();
    assert!((r.per_action[0].mpjpe - a).abs() < 1e-12);
    let joint_mean = r.per_joint.iter().map(|j| j.mpjpe).sum::<f64>() / 4.0;
    assert!((joint_mean - want).abs() < 1e-12);
    let wrong = SkeletonSpec::chain(5);
    assert!(evaluate(&entries, &wrong, &LossWeights::default(), 1.0).is_err());
}

fn pose_strategy(joints: usize, frames: usize) -> impl Strategy<Value = PoseSequence3D> {
    prop::collection::vec(-500.0f64..500.0, joints * frames * 3)
        .prop_map(move |c| PoseSequence3D::new(joints, frames, c).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn aligned_error_never_exceeds_mpjpe(p in pose_strategy(6, 2), g in pose_strategy(6, 2)) {
        let a = p_mpjpe(&p, &g).unwrap().value;
        let b = mpjpe(&p, &g).unwrap();
        prop_assert!(a <= b + 1e-9);
    }

    #[test]
    fn velocity_error_ignores_per_joint_offsets(
        p in pose_strategy(3, 4),
        offsets in prop::collection::vec(-100.0f64..100.0, 9),
    ) {
        let mut shifted = p.clone();
        for (i, v) in shifted.coords.iter_mut().enumerate() {
            *v += offsets[i % 9];
        }
        prop_assert!(mpjve(&shifted, &p).unwrap() < 1e-9);
    }

    #[test]
    fn losses_are_non_negative(p in pose_strategy(3, 3), g in pose_strategy(3, 3)) {
        let (total, w, t, m) = total_loss_value(&p, &g, &LossWeights::default(), &[1.0, 2.0, 3.0]).unwrap();
        prop_assert!(total >= 0.0 && w >= 0.0 && t >= 0.0 && m >= 0.0);
    }
}
