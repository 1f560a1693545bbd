//! Attention, multi-head attention, positional embeddings and the pre-norm
//! residual encoder block, independent of whether tokens are joints or
//! frames.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{BoundParams, GeluMode, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

/// Zero-mean normal sample truncated at two standard deviations.
pub fn trunc_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::c(v);
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Dense layer `y = x W + b` with `W` of shape `[in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), trunc_normal(rng, &[fan_in, fan_out], INIT_STD));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([fan_out]));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &BoundParams, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        tape.add(y, p.var(self.bias))
    }
}

/// Affine pair of a layer normalization.
#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNormParams {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim])),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &BoundParams, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), LAYER_NORM_EPS)
    }
}

/// Query/key/value/output projections of a multi-head attention layer.
/// Head `i` reads columns `i*d_h..(i+1)*d_h` of the Q/K/V projections.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(AttentionParams {
            query: Linear::init(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::init(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::init(store, &format!("{name}.v"), dim, dim, rng),
            output: Linear::init(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

pub fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "head count {heads} must divide model width {dim}"
        )));
    }
    Ok(())
}

/// Pre-norm residual encoder block: attention sublayer then MLP sublayer.
#[derive(Debug, Clone, Copy)]
pub struct EncoderBlockParams {
    pub norm1: LayerNormParams,
    pub attention: AttentionParams,
    pub norm2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl EncoderBlockParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = dim * mlp_ratio;
        Ok(EncoderBlockParams {
            norm1: LayerNormParams::init(store, &format!("{name}.norm1"), dim),
            attention: AttentionParams::init(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNormParams::init(store, &format!("{name}.norm2"), dim),
            fc1: Linear::init(store, &format!("{name}.mlp.fc1"), dim, hidden, rng),
            fc2: Linear::init(store, &format!("{name}.mlp.fc2"), hidden, dim, rng),
            dropout,
        })
    }

    pub fn mlp_hidden(&self) -> usize {
        self.fc1.fan_out
    }
}

/// Learnable `[rows, dim]` table added to token features.
#[derive(Debug, Clone, Copy)]
pub struct PositionalEmbedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl PositionalEmbedding {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, rows: usize, dim: usize) -> Self {
        PositionalEmbedding {
            table: store.add(name.to_string(), Tensor::zeros([rows, dim])),
            rows,
            dim,
        }
    }
}

/// Per-pass state threaded through the forward functions.
pub struct Forward<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a BoundParams,
    pub rng: &'a mut dyn RngCore,
    pub training: bool,
    pub gelu: GeluMode,
    /// When set, every attention layer pushes its `[.., heads, n, n]`
    /// probability tensor here.
    pub capture: Option<Vec<Var>>,
}

/// `softmax(Q K^T / sqrt(d)) V` over the last two axes, `d` being the width
/// of the tensors passed in. Returns the output and the attention weights.
pub fn scaled_dot_product_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
) -> Result<(Var, Var)> {
    attention_core(tape, q, k, v, None)
}

fn attention_core<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    dropout: Option<(f64, &mut dyn RngCore, bool)>,
) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if sq.len() < 2 || sq != sk || sk[..sk.len() - 1] != sv[..sv.len() - 1] {
        return Err(Error::shape("attention", &sq, &sk));
    }
    let d = sq[sq.len() - 1];
    let logits = tape.matmul_nt(q, k)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let axis = tape.shape(logits).len() - 1;
    let probs = tape.softmax(logits, axis)?;
    let weights = match dropout {
        Some((rate, rng, training)) => tape.dropout(probs, rate, rng, training)?,
        None => probs,
    };
    let out = tape.matmul(weights, v)?;
    Ok((out, probs))
}

/// Multi-head self-attention over `x: [.., n, d]`, with dropout on the
/// attention weights when training.
pub fn multi_head_attention<T: Scalar>(
    fw: &mut Forward<'_, T>,
    x: Var,
    params: &AttentionParams,
    dropout: f64,
) -> Result<Var> {
    let (out, probs) = mha_with_probs(fw, x, params, dropout)?;
    if let Some(c) = fw.capture.as_mut() {
        c.push(probs);
    }
    Ok(out)
}

fn mha_with_probs<T: Scalar>(
    fw: &mut Forward<'_, T>,
    x: Var,
    params: &AttentionParams,
    dropout: f64,
) -> Result<(Var, Var)> {
    check_heads(params.dim, params.heads)?;
    let shape = fw.tape.shape(x).to_vec();
    if shape.len() < 2 || shape[shape.len() - 1] != params.dim {
        return Err(Error::shape("multi_head_attention", &shape, &[params.dim]));
    }
    let n = shape[shape.len() - 2];
    let groups: usize = shape[..shape.len() - 2].iter().product();
    let (h, dh) = (params.heads, params.head_dim());
    let heads_last = [groups, n, h, dh];
    let p = fw.params;
    let q = params.query.forward(fw.tape, p, x)?;
    let q = fw.tape.reshape(q, &heads_last)?;
    let k = params.key.forward(fw.tape, p, x)?;
    let k = fw.tape.reshape(k, &heads_last)?;
    let v = params.value.forward(fw.tape, p, x)?;
    let v = fw.tape.reshape(v, &heads_last)?;
    let (ctx, probs) = if fw.training && dropout > 0.0 {
        // Dropout on the weights needs them as a tape value of their own.
        let split = |tape: &mut Tape<T>, y: Var| tape.permute(y, &[0, 2, 1, 3]);
        let (q, k, v) = (split(fw.tape, q)?, split(fw.tape, k)?, split(fw.tape, v)?);
        let (ctx, probs) = attention_core(fw.tape, q, k, v, Some((dropout, &mut *fw.rng, true)))?;
        (fw.tape.permute(ctx, &[0, 2, 1, 3])?, probs)
    } else {
        fw.tape.attention(q, k, v)?
    };
    let ctx = fw.tape.reshape(ctx, &shape)?;
    let out = params.output.forward(fw.tape, p, ctx)?;
    Ok((out, probs))
}

/// `x + MSA(Norm(x))`, then `+ MLP(Norm(.))`. Output shape equals input.
pub fn encoder_block<T: Scalar>(fw: &mut Forward<'_, T>, x: Var, params: &EncoderBlockParams) -> Result<Var> {
    let p = fw.params;
    let h = params.norm1.forward(fw.tape, p, x)?;
    let (a, probs) = mha_with_probs(fw, h, &params.attention, params.dropout)?;
    if let Some(c) = fw.capture.as_mut() {
        c.push(probs);
    }
    let x = fw.tape.add(x, a)?;
    let h = params.norm2.forward(fw.tape, p, x)?;
    let h = params.fc1.forward(fw.tape, p, h)?;
    let h = fw.tape.gelu(h, fw.gelu);
    let h = params.fc2.forward(fw.tape, p, h)?;
    let h = fw.tape.dropout(h, params.dropout, &mut *fw.rng, fw.training)?;
    fw.tape.add(x, h)
}

/// Adds an `[n, d]` embedding to `x: [.., n, d]`.
pub fn add_positional<T: Scalar>(tape: &mut Tape<T>, x: Var, table: Var) -> Result<Var> {
    let (sx, se) = (tape.shape(x), tape.shape(table));
    if sx.len() < 2 || se.len() != 2 || sx[sx.len() - 2..] != *se {
        return Err(Error::shape("add_positional", sx, se));
    }
    tape.add(x, table)
}

/// Head-averaged attention of a single token set.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    /// Row-stochastic `[n, n]` mean over heads.
    pub mean: Tensor<f64>,
    /// `mean` min-max scaled to `[0, 1]`; all ones when every entry is equal.
    pub normalized: Tensor<f64>,
}

/// Averages `[.., heads, n, n]` attention probabilities over heads for the
/// group `group`, then min-max normalizes.
pub fn average_heads<T: Scalar>(probs: &Tensor<T>, group: usize) -> Result<AttentionMap> {
    let s = probs.shape();
    if s.len() < 3 {
        return Err(Error::ShapeMsg(format!("attention probabilities need rank >= 3, got {s:?}")));
    }
    let (h, n) = (s[s.len() - 3], s[s.len() - 1]);
    let groups = probs.len() / (h * n * n);
    if group >= groups {
        return Err(Error::Param(format!("attention group {group} out of range ({groups})")));
    }
    let base = group * h * n * n;
    let data = probs.data();
    let mut mean = vec![0.0; n * n];
    for head in 0..h {
        for (i, m) in mean.iter_mut().enumerate() {
            *m += data[base + head * n * n + i].f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= h as f64);
    Ok(attention_map(n, mean))
}

/// Averages `[.., heads, n, n]` attention probabilities over every leading
/// axis and the heads, then min-max normalizes.
pub fn average_attention<T: Scalar>(probs: &Tensor<T>) -> Result<AttentionMap> {
    let s = probs.shape();
    if s.len() < 3 {
        return Err(Error::ShapeMsg(format!("attention probabilities need rank >= 3, got {s:?}")));
    }
    let n = s[s.len() - 1];
    let mut mean = vec![0.0; n * n];
    for chunk in probs.data().chunks(n * n) {
        mean.iter_mut().zip(chunk).for_each(|(m, v)| *m += v.f64());
    }
    let count = (probs.len() / (n * n)).max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= count);
    Ok(attention_map(n, mean))
}

fn attention_map(n: usize, mean: Vec<f64>) -> AttentionMap {
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let normalized = if hi > lo {
        mean.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![1.0; n * n]
    };
    AttentionMap {
        mean: Tensor::from_parts(vec![n, n], mean),
        normalized: Tensor::from_parts(vec![n, n], normalized),
    }
}

/// Attention of `params` applied to `x: [n, d]`, averaged over heads.
pub fn mean_head_attention_map<T: Scalar>(
    store: &ParamStore<T>,
    params: &AttentionParams,
    x: &Tensor<T>,
) -> Result<AttentionMap> {
    let mut tape = Tape::no_grad();
    let bound = store.bind(&mut tape);
    let xv = tape.constant(x.detached());
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut fw = Forward {
        tape: &mut tape,
        params: &bound,
        rng: &mut rng,
        training: false,
        gelu: GeluMode::Exact,
        capture: None,
    };
    let (_, probs) = mha_with_probs(&mut fw, xv, params, 0.0)?;
    average_heads(tape.value(probs), 0)
}
