use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::finite_difference_check_many;
use crate::tensor::params::bind_existing;

fn config(joints: usize, frames: usize, dim: usize, depth: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        joints,
        frames,
        dim,
        depth,
        heads,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// Model whose every parameter (positional tables included) is random and
/// large enough that no block is close to the identity.
fn random_model(cfg: ModelConfig, seed: u64) -> MixSTE<f64> {
    let mut model = MixSTE::<f64>::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    for p in model.store.iter_mut() {
        let scale = if p.name.ends_with("gamma") { 0.5 } else { 0.4 };
        let offset = if p.name.ends_with("gamma") { 1.0 } else { 0.0 };
        p.tensor.data_mut().iter_mut().for_each(|v| *v = offset + scale * rng.gen_range(-1.0..1.0));
    }
    model
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_sequence(rng: &mut ChaCha8Rng, joints: usize, frames: usize) -> KeypointSequence2D {
    let coords = (0..joints * frames * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
    KeypointSequence2D::new(joints, frames, coords, "test").unwrap()
}

/// Evaluates `f` in eval mode on a no-grad tape with `x` as a constant.
fn eval<F>(model: &MixSTE<f64>, x: &Tensor<f64>, f: F) -> Tensor<f64>
where
    F: FnOnce(&mut Forward<'_, f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::no_grad();
    let bound = model.store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut fw = Forward {
        tape: &mut tape,
        params: &bound,
        rng: &mut rng,
        training: false,
        gelu: GeluMode::Exact,
        capture: None,
    };
    let y = f(&mut fw, xv).unwrap();
    tape.value(y).clone()
}

/// Copies `[N, T, d]` data with row `(joint, frame)` taken from
/// `(jmap[joint], fmap[frame])`.
fn remap(x: &Tensor<f64>, jmap: &[usize], fmap: &[usize]) -> Tensor<f64> {
    let (n, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::with_capacity(n * t * d);
    for &j in jmap {
        for &f in fmap {
            let i = (j * t + f) * d;
            out.extend_from_slice(&x.data()[i..i + d]);
        }
    }
    Tensor::new(vec![n, t, d], out).unwrap()
}

fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.gen_range(0..=i));
    }
    p
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    let bad = ModelConfig { heads: 3, ..ModelConfig::default() };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let bad = ModelConfig { joints: 0, ..ModelConfig::default() };
    assert!(bad.validate().is_err());
    let bad = ModelConfig { dropout: 1.0, ..ModelConfig::default() };
    assert!(bad.validate().is_err());
}

#[test]
fn default_model_shapes_and_size() {
    let model = MixSTE::<f32>::new(ModelConfig::default(), 0).unwrap();
    let count = model.count_parameters();
    assert_eq!(count, parameter_count(&ModelConfig::default()));
    let rel = (count as f64 - 33.7e6).abs() / 33.7e6;
    assert!(rel < 0.05, "{count} parameters");
    assert_eq!(model.params.blocks.len(), 8);
    let seq = KeypointSequence2D::new(17, 243, vec![0.1; 17 * 243 * 2], "h36m17").unwrap();
    let e = model.embed_inputs(&seq).unwrap();
    assert_eq!(e.shape(), &[17, 243, 512]);
}

#[test]
fn zero_depth_count_by_hand() {
    let cfg = config(17, 16, 8, 0, 2);
    // embed 2*8+8, embed norm 16, spatial 17*8, temporal 16*8, head norm 16, head 8*3+3
    let hand = 24 + 16 + 136 + 128 + 16 + 27;
    let model = MixSTE::<f64>::new(cfg.clone(), 0).unwrap();
    assert_eq!(model.count_parameters(), hand);
    assert_eq!(parameter_count(&cfg), hand);
}

#[test]
fn block_parameters_linear_in_depth() {
    let count = |depth| MixSTE::<f64>::new(config(5, 8, 16, depth, 4), 0).unwrap().count_parameters();
    let (base, one, two, four) = (count(0), count(1), count(2), count(4));
    assert_eq!(two - base, 2 * (one - base));
    assert_eq!(four - base, 4 * (one - base));
    // pre-norm block: 8 d^2 + 11 d at ratio 2, two blocks per loop
    assert_eq!(one - base, 2 * (8 * 16 * 16 + 11 * 16));
}

#[test]
fn wider_depth_matches_larger_published_size() {
    let cfg = ModelConfig { depth: 10, ..ModelConfig::default() };
    let rel = (parameter_count(&cfg) as f64 - 42.2e6).abs() / 42.2e6;
    assert!(rel < 0.01);
}

#[test]
fn zero_input_embeds_to_zero() {
    let model = MixSTE::<f64>::new(config(4, 3, 8, 1, 2), 0).unwrap();
    let seq = KeypointSequence2D::new(4, 3, vec![0.0; 24], "t").unwrap();
    let e = model.embed_inputs(&seq).unwrap();
    assert!(e.data().iter().all(|&v| v == 0.0));
}

#[test]
fn identical_frames_embed_identically() {
    let model = random_model(config(4, 3, 8, 1, 2), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let frame: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut coords = frame.clone();
    coords.extend((0..8).map(|_| rng.gen_range(-1.0..1.0)));
    coords.extend(&frame);
    let seq = KeypointSequence2D::new(4, 3, coords, "t").unwrap();
    let e = model.embed_inputs(&seq).unwrap();
    for j in 0..4 {
        for c in 0..8 {
            assert_eq!(e.get(&[j, 0, c]), e.get(&[j, 2, c]));
        }
    }
}

#[test]
fn embed_rejects_wrong_joint_count() {
    let model = MixSTE::<f64>::new(config(4, 3, 8, 1, 2), 0).unwrap();
    let seq = KeypointSequence2D::new(5, 3, vec![0.0; 30], "t").unwrap();
    assert!(matches!(model.embed_inputs(&seq), Err(Error::Shape { .. })));
}

#[test]
fn spatial_block_on_one_frame_is_plain_encoder() {
    let model = random_model(config(6, 4, 8, 1, 2), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&mut rng, &[6, 1, 8]);
    let stb = model.params.blocks[0].0;
    let a = eval(&model, &x, |fw, v| spatial_block_forward(fw, v, &stb));
    let flat = x.reshaped([6, 8]).unwrap();
    let b = eval(&model, &flat, |fw, v| encoder_block(fw, v, &stb));
    assert_eq!(a.data(), b.data());
}

#[test]
fn temporal_block_on_one_joint_is_plain_encoder() {
    let model = random_model(config(1, 5, 8, 1, 2), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&mut rng, &[1, 5, 8]);
    let ttb = model.params.blocks[0].1;
    let a = eval(&model, &x, |fw, v| temporal_block_forward(fw, v, &ttb));
    let flat = x.reshaped([5, 8]).unwrap();
    let b = eval(&model, &flat, |fw, v| encoder_block(fw, v, &ttb));
    assert_eq!(a.data(), b.data());
}

#[test]
fn spatial_block_is_frame_local() {
    let (n, t, d) = (5, 7, 8);
    let model = random_model(config(n, t, d, 1, 2), 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_tensor(&mut rng, &[n, t, d]);
    let stb = model.params.blocks[0].0;
    let base = eval(&model, &x, |fw, v| spatial_block_forward(fw, v, &stb));
    let mut y = x.clone();
    for j in 0..n {
        for c in 0..d {
            y.data_mut()[(j * t + 5) * d + c] += rng.gen_range(-1.0..1.0);
        }
    }
    let moved = eval(&model, &y, |fw, v| spatial_block_forward(fw, v, &stb));
    for j in 0..n {
        for f in 0..t {
            let diff: f64 = (0..d).map(|c| (base.get(&[j, f, c]) - moved.get(&[j, f, c])).abs()).sum();
            if f == 5 {
                assert!(diff > 1e-6);
            } else {
                assert_eq!(diff, 0.0);
            }
        }
    }
}

#[test]
fn temporal_block_is_joint_local() {
    let (n, t, d) = (5, 7, 8);
    let model = random_model(config(n, t, d, 1, 2), 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random_tensor(&mut rng, &[n, t, d]);
    let ttb = model.params.blocks[0].1;
    let base = eval(&model, &x, |fw, v| temporal_block_forward(fw, v, &ttb));
    let mut y = x.clone();
    for i in 3 * t * d..4 * t * d {
        y.data_mut()[i] += rng.gen_range(-1.0..1.0);
    }
    let moved = eval(&model, &y, |fw, v| temporal_block_forward(fw, v, &ttb));
    for j in 0..n {
        let diff: f64 = (j * t * d..(j + 1) * t * d).map(|i| (base.data()[i] - moved.data()[i]).abs()).sum();
        if j == 3 {
            assert!(diff > 1e-6);
        } else {
            assert_eq!(diff, 0.0);
        }
    }
}

#[test]
fn spatial_block_is_joint_permutation_equivariant() {
    let (n, t, d) = (6, 3, 8);
    let model = random_model(config(n, t, d, 1, 2), 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_tensor(&mut rng, &[n, t, d]);
    let stb = model.params.blocks[0].0;
    let frames: Vec<usize> = (0..t).collect();
    let base = eval(&model, &x, |fw, v| spatial_block_forward(fw, v, &stb));
    for _ in 0..5 {
        let perm = shuffled(&mut rng, n);
        let out = eval(&model, &remap(&x, &perm, &frames), |fw, v| spatial_block_forward(fw, v, &stb));
        assert!(out.max_abs_diff(&remap(&base, &perm, &frames)) < 1e-6);
    }
}

#[test]
fn temporal_block_is_frame_permutation_equivariant() {
    let (n, t, d) = (3, 6, 8);
    let model = random_model(config(n, t, d, 1, 2), 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random_tensor(&mut rng, &[n, t, d]);
    let ttb = model.params.blocks[0].1;
    let joints: Vec<usize> = (0..n).collect();
    let base = eval(&model, &x, |fw, v| temporal_block_forward(fw, v, &ttb));
    for _ in 0..5 {
        let perm = shuffled(&mut rng, t);
        let out = eval(&model, &remap(&x, &joints, &perm), |fw, v| temporal_block_forward(fw, v, &ttb));
        assert!(out.max_abs_diff(&remap(&base, &joints, &perm)) < 1e-6);
    }
}

/// Baseline where a temporal token is a whole frame (width `N * d`). Its
/// linear layers are block-diagonal copies of the separated block, so any
/// difference comes from the fused attention and normalization.
#[test]
fn fused_temporal_tokens_compute_a_different_function() {
    let (n, t, d) = (3, 5, 4);
    let model = random_model(config(n, t, d, 1, 2), 15);
    let ttb = model.params.blocks[0].1;
    let mut fused_store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let fused = EncoderBlockParams::init(&mut fused_store, "fused", n * d, 2, 2, 0.0, &mut rng).unwrap();
    let pairs = [
        (ttb.norm1.gamma, fused.norm1.gamma),
        (ttb.norm1.beta, fused.norm1.beta),
        (ttb.norm2.gamma, fused.norm2.gamma),
        (ttb.norm2.beta, fused.norm2.beta),
    ];
    for (src, dst) in pairs {
        let v = model.store.get(src).data().to_vec();
        let tiled: Vec<f64> = (0..n).flat_map(|_| v.clone()).collect();
        fused_store.get_mut(dst).data_mut().copy_from_slice(&tiled);
    }
    let a = (ttb.attention, fused.attention);
    for (src, dst) in [(a.0.query, a.1.query), (a.0.key, a.1.key), (a.0.value, a.1.value), (a.0.output, a.1.output), (ttb.fc1, fused.fc1), (ttb.fc2, fused.fc2)] {
        let w = model.store.get(src.weight);
        let (fi, fo) = (src.fan_in, src.fan_out);
        let dw = fused_store.get_mut(dst.weight).data_mut();
        dw.iter_mut().for_each(|v| *v = 0.0);
        for blk in 0..n {
            for r in 0..fi {
                for c in 0..fo {
                    dw[(blk * fi + r) * (n * fo) + blk * fo + c] = w.get(&[r, c]);
                }
            }
        }
        let b = model.store.get(src.bias).data().to_vec();
        let tiled: Vec<f64> = (0..n).flat_map(|_| b.clone()).collect();
        fused_store.get_mut(dst.bias).data_mut().copy_from_slice(&tiled);
    }
    let x = random_tensor(&mut rng, &[n, t, d]);
    let separated = eval(&model, &x, |fw, v| temporal_block_forward(fw, v, &ttb));
    // fused layout: [T, N*d]
    let mut fused_x = Vec::with_capacity(n * t * d);
    for f in 0..t {
        for j in 0..n {
            fused_x.extend_from_slice(&x.data()[(j * t + f) * d..(j * t + f + 1) * d]);
        }
    }
    let fused_model = MixSTE {
        config: model.config.clone(),
        store: fused_store,
        params: model.params.clone(),
    };
    let fused_out = eval(&fused_model, &Tensor::new(vec![t, n * d], fused_x).unwrap(), |fw, v| {
        encoder_block(fw, v, &fused)
    });
    let mut worst: f64 = 0.0;
    for f in 0..t {
        for j in 0..n {
            for c in 0..d {
                worst = worst.max((fused_out.get(&[f, j * d + c]) - separated.get(&[j, f, c])).abs());
            }
        }
    }
    assert!(worst > 1e-3, "fused and separated outputs agree ({worst})");
}

#[test]
fn forward_shape_and_sequence_helpers() {
    let model = MixSTE::<f32>::new(config(17, 243, 16, 1, 2), 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let seq = random_sequence(&mut rng, 17, 243);
    let out = model.predict(&seq).unwrap();
    assert_eq!((out.joints, out.frames, out.coords.len()), (17, 243, 17 * 243 * 3));
}

#[test]
fn eval_forward_is_deterministic() {
    let model = random_model(config(5, 6, 8, 2, 2), 19);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let seq = random_sequence(&mut rng, 5, 6);
    let a = model.predict(&seq).unwrap();
    let b = model.predict(&seq).unwrap();
    assert_eq!(a.coords, b.coords);
}

#[test]
fn dropout_only_acts_in_training() {
    let cfg = ModelConfig { dropout: 0.5, ..config(5, 6, 8, 2, 2) };
    let model = MixSTE::<f64>::new(cfg, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = model.input_tensor(&[&random_sequence(&mut rng, 5, 6)]).unwrap();
    let (a, _) = model.run(&x, false, 1, false).unwrap();
    let (b, _) = model.run(&x, false, 2, false).unwrap();
    assert_eq!(a, b);
    let (c, _) = model.run(&x, true, 1, false).unwrap();
    let (d, _) = model.run(&x, true, 2, false).unwrap();
    assert!(c.max_abs_diff(&d) > 0.0);
}

#[test]
fn shorter_sequences_use_temporal_prefix() {
    let model = random_model(config(4, 10, 8, 1, 2), 23);
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let short = random_sequence(&mut rng, 4, 6);
    assert_eq!(model.predict(&short).unwrap().frames, 6);
    let long = random_sequence(&mut rng, 4, 11);
    assert!(matches!(model.predict(&long), Err(Error::Config(_))));
}

#[test]
fn temporal_embedding_enters_once() {
    // a temporal table that differs only in row 0 changes the output
    let mut model = random_model(config(3, 4, 8, 2, 2), 25);
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let seq = random_sequence(&mut rng, 3, 4);
    let base = model.predict(&seq).unwrap();
    let id = model.params.temporal_pos.table;
    model.store.get_mut(id).data_mut()[0] += 0.5;
    let moved = model.predict(&seq).unwrap();
    assert_ne!(base.coords, moved.coords);
}

#[test]
fn attention_capture_per_block() {
    let model = random_model(config(5, 6, 8, 2, 2), 27);
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let x = model.input_tensor(&[&random_sequence(&mut rng, 5, 6)]).unwrap();
    let (_, probs) = model.run(&x, false, 0, true).unwrap();
    assert_eq!(probs.len(), 4);
    assert_eq!(probs[0].shape(), &[6, 2, 5, 5]);
    assert_eq!(probs[1].shape(), &[5, 2, 6, 6]);
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let model = random_model(config(5, 4, 8, 2, 2), 29);
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let x = random_tensor(&mut rng, &[1, 4, 5, 2]);
    let weights = random_tensor(&mut rng, &[1, 4, 5, 3]);
    let mut inputs = vec![x];
    inputs.extend(model.store.iter().map(|p| p.tensor.detached()));
    let params = model.params.clone();
    let err = finite_difference_check_many(
        |tape, vars| {
            let bound = bind_existing(&vars[1..]);
            let w = tape.constant(weights.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut fw = Forward {
                tape,
                params: &bound,
                rng: &mut rng,
                training: false,
                gelu: GeluMode::Exact,
                capture: None,
            };
            let y = forward(&mut fw, &params, vars[0])?;
            let y = fw.tape.mul(y, w)?;
            Ok(fw.tape.sum(y))
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mxst");
    let model = MixSTE::<f32>::new(config(5, 6, 8, 2, 2), 31).unwrap();
    save_checkpoint(&model, &path).unwrap();
    assert!(sidecar_path(&path).exists());
    let loaded = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(loaded.config, model.config);
    for (a, b) in model.store.iter().zip(loaded.store.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.tensor.data(), b.tensor.data());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let seq = random_sequence(&mut rng, 5, 6);
    assert_eq!(model.predict(&seq).unwrap(), loaded.predict(&seq).unwrap());
}

#[test]
fn checkpoint_byte_layout() {
    let entries = vec![CheckpointEntry {
        name: "ab".into(),
        shape: vec![2],
        data: vec![1.0, -2.0],
    }];
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &entries).unwrap();
    let mut want = b"MXST".to_vec();
    for v in [1u32, 1, 2] {
        want.extend(v.to_le_bytes());
    }
    want.extend(b"ab");
    for v in [1u32, 2] {
        want.extend(v.to_le_bytes());
    }
    want.extend(1f32.to_le_bytes());
    want.extend((-2f32).to_le_bytes());
    assert_eq!(buf, want);
    assert_eq!(read_checkpoint(&mut buf.as_slice()).unwrap(), entries);
    buf[0] = b'X';
    assert!(matches!(read_checkpoint(&mut buf.as_slice()), Err(Error::Parse(_))));
}

#[test]
fn checkpoint_rejects_mismatched_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mxst");
    let model = MixSTE::<f32>::new(config(5, 6, 8, 2, 2), 33).unwrap();
    save_checkpoint(&model, &path).unwrap();
    let other = MixSTE::<f32>::new(config(5, 6, 8, 1, 2), 33).unwrap();
    let side = sidecar_path(&path);
    let mut json: serde_json::Value = serde_json::from_slice(&std::fs::read(&side).unwrap()).unwrap();
    json["config"] = serde_json::to_value(&other.config).unwrap();
    std::fs::write(&side, json.to_string()).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Schema(_))));
}

#[test]
fn sequence_validation_and_windows() {
    let err = KeypointSequence2D::new(2, 2, vec![0.0, 0.0, 0.0, 0.0, f64::NAN, 0.0, 0.0, 0.0], "t").unwrap_err();
    assert!(err.to_string().contains("frame 1"));
    let p = PoseSequence3D::new(1, 3, vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0]).unwrap();
    let w = p.window(1, 4);
    assert_eq!(w.coords, vec![2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0]);
    let r = PoseSequence3D::new(2, 1, vec![1.0, 2.0, 3.0, 4.0, 6.0, 8.0]).unwrap().root_relative(0);
    assert_eq!(r.coords, vec![0.0, 0.0, 0.0, 3.0, 4.0, 5.0]);
    let k = KeypointSequence2D::new(1, 1, vec![0.0, 0.0], "t").unwrap();
    assert!(k.clone().with_confidence(vec![1.5]).is_err());
    assert!(k.with_confidence(vec![0.5]).is_ok());
}

#[test]
fn long_sequences_are_lifted_window_by_window() {
    let model = random_model(config(3, 4, 8, 1, 2), 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let seq = random_sequence(&mut rng, 3, 10);
    let long = model.predict_long(&seq, 2).unwrap();
    assert_eq!((long.frames, long.joints), (10, 3));
    for (w, start) in [0, 4, 8].into_iter().enumerate() {
        let part = model.predict(&seq.window(start, 4)).unwrap();
        let keep = 4.min(10 - start);
        // batching may switch the matmul kernel, so compare with a tolerance
        for (a, b) in long.coords[start * 9..(start + keep) * 9].iter().zip(&part.coords) {
            assert!((a - b).abs() < 1e-9, "window {w}: {a} vs {b}");
        }
    }
    let exact = random_sequence(&mut rng, 3, 4);
    assert_eq!(model.predict_long(&exact, 1).unwrap(), model.predict(&exact).unwrap());
}
