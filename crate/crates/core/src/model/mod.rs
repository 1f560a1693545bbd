//! The MixSTE network: input embedding, alternating spatial and temporal
//! encoder blocks, and the regression head.
//!
//! Batched activations are laid out `[B, T, N, d]` while a spatial block
//! runs and `[B, N, T, d]` while a temporal block runs; the single-sequence
//! helpers use `[N, T, d]`.

mod checkpoint;
mod sequence;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, sidecar_path, write_checkpoint, CheckpointEntry};
pub use sequence::{KeypointSequence2D, PoseSequence3D};

use crate::error::{Error, Result};
use crate::tensor::{BoundParams, GeluMode, ParamStore, Scalar, Tape, Tensor, Var};
use crate::transformer::{
    add_positional, check_heads, encoder_block, EncoderBlockParams, Forward, LayerNormParams, Linear,
    PositionalEmbedding,
};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Joint count `N`.
    pub joints: usize,
    /// Maximum sequence length `T`; rows of the temporal embedding.
    pub frames: usize,
    /// Model width `d_m`.
    pub dim: usize,
    /// Number of spatial/temporal block pairs `d_l`.
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    /// GELU variant; GELU is the only activation.
    pub activation: GeluMode,
    /// Millimeters per model output unit.
    pub output_scale_mm: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            joints: 17,
            frames: 243,
            dim: 512,
            depth: 8,
            heads: 8,
            mlp_ratio: 2,
            dropout: 0.1,
            activation: GeluMode::Exact,
            output_scale_mm: 1000.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("joints", self.joints),
            ("frames", self.frames),
            ("dim", self.dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        check_heads(self.dim, self.heads)?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.output_scale_mm.is_finite() && self.output_scale_mm > 0.0) {
            return Err(Error::Config("output_scale_mm must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter handles of the network.
#[derive(Debug, Clone)]
pub struct MixSTEParams {
    pub input_embed: Linear,
    pub embed_norm: LayerNormParams,
    pub spatial_pos: PositionalEmbedding,
    pub temporal_pos: PositionalEmbedding,
    /// `(spatial, temporal)` block per loop.
    pub blocks: Vec<(EncoderBlockParams, EncoderBlockParams)>,
    pub head_norm: LayerNormParams,
    pub head: Linear,
}

impl MixSTEParams {
    pub fn init<T: Scalar, R: rand::Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let input_embed = Linear::init(store, "embed", 2, d, rng);
        let embed_norm = LayerNormParams::init(store, "embed_norm", d);
        let spatial_pos = PositionalEmbedding::init(store, "pos_spatial", cfg.joints, d);
        let temporal_pos = PositionalEmbedding::init(store, "pos_temporal", cfg.frames, d);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let s = EncoderBlockParams::init(store, &format!("blocks.{i}.spatial"), d, cfg.heads, cfg.mlp_ratio, cfg.dropout, rng)?;
            let t = EncoderBlockParams::init(store, &format!("blocks.{i}.temporal"), d, cfg.heads, cfg.mlp_ratio, cfg.dropout, rng)?;
            blocks.push((s, t));
        }
        let head_norm = LayerNormParams::init(store, "head_norm", d);
        let head = Linear::init(store, "head", d, 3, rng);
        Ok(MixSTEParams {
            input_embed,
            embed_norm,
            spatial_pos,
            temporal_pos,
            blocks,
            head_norm,
            head,
        })
    }
}

/// A configured network with its parameters.
#[derive(Debug, Clone)]
pub struct MixSTE<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub params: MixSTEParams,
}

impl<T: Scalar> MixSTE<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = MixSTEParams::init(&mut store, &config, &mut rng)?;
        Ok(MixSTE { config, store, params })
    }

    pub fn count_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> MixSTE<U> {
        MixSTE {
            config: self.config.clone(),
            store: self.store.cast(),
            params: self.params.clone(),
        }
    }

    /// Stacks sequences into a `[B, T, N, 2]` input tensor.
    pub fn input_tensor(&self, seqs: &[&KeypointSequence2D]) -> Result<Tensor<T>> {
        let first = seqs.first().ok_or_else(|| Error::ShapeMsg("empty input batch".into()))?;
        let (n, t) = (first.joints, first.frames);
        if n != self.config.joints {
            return Err(Error::shape("model input joints", &[n], &[self.config.joints]));
        }
        let mut data = Vec::with_capacity(seqs.len() * t * n * 2);
        for s in seqs {
            if s.joints != n || s.frames != t {
                return Err(Error::shape("input batch", &[s.frames, s.joints], &[t, n]));
            }
            data.extend(s.coords.iter().map(|&v| T::c(v)));
        }
        Tensor::new(vec![seqs.len(), t, n, 2], data)
    }

    /// Predicts the 3D sequence (millimeters) for every input frame.
    pub fn predict(&self, seq: &KeypointSequence2D) -> Result<PoseSequence3D> {
        let out = self.predict_batch(&[seq])?;
        Ok(out.into_iter().next().expect("one sequence in, one out"))
    }

    pub fn predict_batch(&self, seqs: &[&KeypointSequence2D]) -> Result<Vec<PoseSequence3D>> {
        let x = self.input_tensor(seqs)?;
        let y = self.run(&x, false, 0, false)?.0;
        let (n, t) = (seqs[0].joints, seqs[0].frames);
        let per = n * t * 3;
        let scale = self.config.output_scale_mm;
        Ok(y.data()
            .chunks(per)
            .map(|c| PoseSequence3D {
                joints: n,
                frames: t,
                coords: c.iter().map(|v| v.f64() * scale).collect(),
            })
            .collect())
    }

    /// Lifts a sequence of any length with consecutive windows of the
    /// model's frame count, edge-padding the last one. Millimetres.
    pub fn predict_long(&self, seq: &KeypointSequence2D, batch_size: usize) -> Result<PoseSequence3D> {
        let t = self.config.frames;
        let windows: Vec<KeypointSequence2D> = (0..seq.frames.div_ceil(t)).map(|w| seq.window(w * t, t)).collect();
        let mut coords = Vec::with_capacity(windows.len() * t * seq.joints * 3);
        for chunk in windows.chunks(batch_size.max(1)) {
            let refs: Vec<&KeypointSequence2D> = chunk.iter().collect();
            for p in self.predict_batch(&refs)? {
                coords.extend(p.coords);
            }
        }
        coords.truncate(seq.frames * seq.joints * 3);
        PoseSequence3D::new(seq.joints, seq.frames, coords)
    }

    /// Runs the network on a detached tape. Returns `[B, T, N, 3]` model-unit
    /// output plus, when requested, every attention probability tensor in
    /// block order (spatial then temporal per loop).
    pub fn run(&self, x: &Tensor<T>, training: bool, seed: u64, capture: bool) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut tape = Tape::no_grad();
        let bound = self.store.bind(&mut tape);
        let xv = tape.constant(x.detached());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fw = Forward {
            tape: &mut tape,
            params: &bound,
            rng: &mut rng,
            training,
            gelu: self.config.activation,
            capture: capture.then(Vec::new),
        };
        let y = forward(&mut fw, &self.params, xv)?;
        let probs = fw.capture.take().unwrap_or_default();
        let probs = probs.into_iter().map(|p| tape.value(p).clone()).collect();
        Ok((tape.value(y).clone(), probs))
    }

    /// Embedded features `[N, T, d]` of one sequence.
    pub fn embed_inputs(&self, seq: &KeypointSequence2D) -> Result<Tensor<T>> {
        let x = self.input_tensor(&[seq])?;
        let mut tape = Tape::no_grad();
        let bound = self.store.bind(&mut tape);
        let xv = tape.constant(x);
        let e = embed(&mut tape, &bound, &self.params, xv)?;
        let e = swap_token_axes(&mut tape, e)?;
        let e = tape.reshape(e, &[seq.joints, seq.frames, self.config.dim])?;
        Ok(tape.value(e).clone())
    }
}

/// Permutes the two token axes, `[.., a, b, d] -> [.., b, a, d]`.
pub fn swap_token_axes<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let r = tape.shape(x).len();
    if r < 3 {
        return Err(Error::ShapeMsg(format!("token axes need rank >= 3, got {:?}", tape.shape(x))));
    }
    let mut axes: Vec<usize> = (0..r).collect();
    axes.swap(r - 3, r - 2);
    tape.permute(x, &axes)
}

/// `Norm(L_e(c) + E_spatial)` for input `[B, T, N, 2]`, giving `[B, T, N, d]`.
pub fn embed<T: Scalar>(tape: &mut Tape<T>, bound: &BoundParams, params: &MixSTEParams, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[3] != 2 || s[2] != params.spatial_pos.rows {
        return Err(Error::shape("embed_inputs", &s, &[0, 0, params.spatial_pos.rows, 2]));
    }
    let h = params.input_embed.forward(tape, bound, x)?;
    let h = add_positional(tape, h, bound.var(params.spatial_pos.table))?;
    params.embed_norm.forward(tape, bound, h)
}

/// Spatial block over `x: [.., N, T, d]`: each frame's joints attend to
/// each other.
pub fn spatial_block_forward<T: Scalar>(fw: &mut Forward<'_, T>, x: Var, stb: &EncoderBlockParams) -> Result<Var> {
    let x = swap_token_axes(fw.tape, x)?;
    let y = encoder_block(fw, x, stb)?;
    swap_token_axes(fw.tape, y)
}

/// Temporal block over `x: [.., N, T, d]`: each joint's frames attend to
/// each other, with tokens of width `d`.
pub fn temporal_block_forward<T: Scalar>(fw: &mut Forward<'_, T>, x: Var, ttb: &EncoderBlockParams) -> Result<Var> {
    encoder_block(fw, x, ttb)
}

/// Full network on `x: [B, T, N, 2]`, giving `[B, T, N, 3]`.
pub fn forward<T: Scalar>(fw: &mut Forward<'_, T>, params: &MixSTEParams, x: Var) -> Result<Var> {
    let frames = fw.tape.shape(x).get(1).copied().unwrap_or(0);
    if frames == 0 || frames > params.temporal_pos.rows {
        return Err(Error::Config(format!(
            "sequence length {frames} exceeds the temporal embedding ({} rows) or is empty",
            params.temporal_pos.rows
        )));
    }
    let bound = fw.params;
    let mut h = embed(fw.tape, bound, params, x)?;
    for (i, (stb, ttb)) in params.blocks.iter().enumerate() {
        h = encoder_block(fw, h, stb)?;
        h = swap_token_axes(fw.tape, h)?;
        if i == 0 {
            let table = fw.tape.narrow(bound.var(params.temporal_pos.table), 0, 0, frames)?;
            h = add_positional(fw.tape, h, table)?;
        }
        h = temporal_block_forward(fw, h, ttb)?;
        h = swap_token_axes(fw.tape, h)?;
    }
    let h = params.head_norm.forward(fw.tape, bound, h)?;
    params.head.forward(fw.tape, bound, h)
}

/// Parameter count of `cfg`, from the layer formulas.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    let d = cfg.dim;
    let hidden = d * cfg.mlp_ratio;
    let block = 2 * 2 * d + 4 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d);
    let embed = 2 * d + d + 2 * d + cfg.joints * d + cfg.frames * d;
    let head = 2 * d + 3 * d + 3;
    embed + head + 2 * cfg.depth * block
}

#[cfg(test)]
mod tests;
