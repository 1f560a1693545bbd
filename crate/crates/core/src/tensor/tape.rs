//! Dynamic gradient tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for its adjoint. [`Tape::backward`] replays the adjoints in reverse
//! record order and adds the resulting gradients into the leaf tensors, so
//! repeated calls accumulate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gemm::{gemm, Mat};
use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// GELU variant. `Exact` is `x * Phi(x)`; `Tanh` is the usual tanh
/// approximation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeluMode {
    #[default]
    Exact,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// Right operand broadcast over the leading dims of the left one.
    Right(usize),
    /// Left operand broadcast over the leading dims of the right one.
    Left(usize),
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
        /// `None` means `b` is a single matrix and `a` was flattened to rows.
        pairs: Option<Vec<(usize, usize)>>,
    },
    Add {
        a: Var,
        b: Var,
        bc: Bcast,
    },
    Sub {
        a: Var,
        b: Var,
        bc: Bcast,
    },
    Mul {
        a: Var,
        b: Var,
        bc: Bcast,
    },
    Scale {
        a: Var,
        c: T,
    },
    SumAll {
        a: Var,
    },
    MeanAll {
        a: Var,
    },
    SumLast {
        a: Var,
    },
    NormLast {
        a: Var,
    },
    Softmax {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    /// Fused scaled dot-product attention; `probs` is the detached
    /// probability node recorded alongside the output.
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Var,
        scale: T,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        a: Var,
        /// Local derivative, taken during the forward pass.
        slope: Vec<T>,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of operations for reverse-mode differentiation.
///
/// A tape is single-threaded and meant to live for one forward/backward
/// pass. With gradients disabled ([`Tape::no_grad`]) nodes keep only their
/// values.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn is_grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It participates in differentiation iff the tensor has
    /// `requires_grad` set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled && tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        let t = tensor.with_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Clears the gradient accumulators of every leaf.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|&v| self.rg(v));
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ----------------------------------------------------------------- ops

    /// Matrix product over the last two axes with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let op_name = if trans_b { "matmul_nt" } else { "matmul" };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(op_name, &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(Error::shape(op_name, &sa, &sb));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let bmat = |off: usize| {
            let rows = if trans_b { n } else { k };
            let cols = if trans_b { k } else { n };
            let mt = Mat::new(&bv[off..off + k * n], rows, cols);
            if trans_b {
                mt.t()
            } else {
                mt
            }
        };
        let (out_shape, out, pairs) = if sb.len() == 2 {
            let rows = numel(&sa[..sa.len() - 1]);
            let mut out = vec![T::zero(); rows * n];
            gemm(Mat::new(av, rows, k), bmat(0), &mut out, false);
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            (shape, out, None)
        } else {
            let (batch, pairs) = broadcast_batch(&sa[..sa.len() - 2], &sb[..sb.len() - 2])
                .ok_or_else(|| Error::shape(op_name, &sa, &sb))?;
            let mut out = vec![T::zero(); pairs.len() * m * n];
            for (ib, &(ia, ibb)) in pairs.iter().enumerate() {
                gemm(
                    Mat::new(&av[ia * m * k..(ia + 1) * m * k], m, k),
                    bmat(ibb * k * n),
                    &mut out[ib * m * n..(ib + 1) * m * n],
                    false,
                );
            }
            let mut shape = batch;
            shape.extend([m, n]);
            (shape, out, Some(pairs))
        };
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                trans_b,
                m,
                k,
                n,
                pairs,
            },
            &[a, b],
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, Bcast)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let bc = suffix_broadcast(sa, sb).ok_or_else(|| Error::shape(name, sa, sb))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let (shape, out): (Vec<usize>, Vec<T>) = match bc {
            Bcast::Same => (
                sa.to_vec(),
                av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Bcast::Right(len) => {
                let mut out = Vec::with_capacity(av.len());
                for chunk in av.chunks(len) {
                    out.extend(chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)));
                }
                (sa.to_vec(), out)
            }
            Bcast::Left(len) => {
                let mut out = Vec::with_capacity(bv.len());
                for chunk in bv.chunks(len) {
                    out.extend(av.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
                }
                (sb.to_vec(), out)
            }
        };
        Ok((Tensor::from_parts(shape, out), bc))
    }

    /// Elementwise sum; the operand with fewer axes is broadcast when its
    /// shape is a suffix of the other's.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, bc) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add { a, b, bc }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, bc) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub { a, b, bc }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, bc) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul { a, b, bc }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::c(c);
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale { a, c }, &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s: T = x.data().iter().copied().sum();
        let n = T::c(x.len().max(1) as f64);
        self.push(Tensor::scalar(s / n), Op::MeanAll { a }, &[a])
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (shape, d) = split_last(x.shape()).ok_or_else(|| Error::shape("sum_last", x.shape(), &[]))?;
        let out = if d == 0 {
            vec![T::zero(); numel(&shape)]
        } else {
            x.data().chunks(d).map(|c| c.iter().copied().sum()).collect()
        };
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumLast { a }, &[a]))
    }

    /// Euclidean norm over the last axis. The subgradient at zero is zero.
    pub fn norm_last(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (shape, d) = split_last(x.shape()).ok_or_else(|| Error::shape("norm_last", x.shape(), &[]))?;
        let out = if d == 0 {
            vec![T::zero(); numel(&shape)]
        } else {
            x.data()
                .chunks(d)
                .map(|c| c.iter().map(|&v| v * v).sum::<T>().sqrt())
                .collect()
        };
        Ok(self.push(Tensor::from_parts(shape, out), Op::NormLast { a }, &[a]))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::ShapeMsg(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let data = x.data();
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let mut out = vec![T::zero(); data.len()];
        if inner == 1 {
            for (src, dst) in data.chunks(len.max(1)).zip(out.chunks_mut(len.max(1))) {
                softmax_row(src, dst);
            }
        } else {
            let mut buf = vec![T::zero(); len];
            let mut res = vec![T::zero(); len];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    for j in 0..len {
                        buf[j] = data[base + j * inner];
                    }
                    softmax_row(&buf, &mut res);
                    for j in 0..len {
                        out[base + j * inner] = res[j];
                    }
                }
            }
        }
        let v = Tensor::from_parts(shape, out);
        Ok(self.push(
            v,
            Op::Softmax {
                a,
                outer,
                len,
                inner,
            },
            &[a],
        ))
    }

    /// Scaled dot-product attention per head on `[groups, n, heads, d_h]`
    /// inputs, without materializing the head-major layout.
    ///
    /// Returns the context in the input layout and the attention
    /// probabilities `[groups, heads, n, n]`. The probabilities are recorded
    /// as a constant: gradients flow through the context only.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        let s = self.shape(q).to_vec();
        if s.len() != 4 || self.shape(k) != s || self.shape(v) != s {
            return Err(Error::shape("attention", &s, self.shape(k)));
        }
        let (groups, n, heads, dh) = (s[0], s[1], s[2], s[3]);
        let d = heads * dh;
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); groups * heads * n * n];
        let mut out = vec![T::zero(); qv.len()];
        let mut hb = HeadBufs::new(n, dh);
        for g in 0..groups {
            for h in 0..heads {
                let at = HeadAt { base: g * n * d + h * dh, stride: d, n, dh };
                at.gather(qv, &mut hb.q);
                at.gather(kv, &mut hb.k);
                at.gather(vv, &mut hb.v);
                let pg = &mut probs[(g * heads + h) * n * n..][..n * n];
                gemm(Mat::new(&hb.q, n, dh), Mat::new(&hb.k, n, dh).t(), &mut hb.s, false);
                if hb.s.iter().any(|l| l.is_nan()) {
                    return Err(Error::Numeric("attention logits contain NaN".into()));
                }
                hb.s.iter_mut().for_each(|l| *l = *l * scale);
                for (src, dst) in hb.s.chunks_exact(n).zip(pg.chunks_exact_mut(n)) {
                    softmax_row(src, dst);
                }
                gemm(Mat::new(pg, n, n), Mat::new(&hb.v, n, dh), &mut hb.o, false);
                at.scatter_add(&hb.o, &mut out);
            }
        }
        self.nodes.push(Node {
            value: Tensor::from_parts(vec![groups, heads, n, n], probs),
            op: Op::Leaf,
            requires_grad: false,
        });
        let pv = Var(self.nodes.len() - 1);
        let ctx = self.push(
            Tensor::from_parts(s, out),
            Op::Attention {
                q,
                k,
                v,
                probs: pv,
                scale,
            },
            &[q, k, v],
        );
        Ok((ctx, pv))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Param(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| Error::shape("layer_norm", &xs, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &xs, self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = if d == 0 { 0 } else { xv.len() / d };
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let inv_d = T::c(1.0 / d.max(1) as f64);
        let eps = T::c(eps);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            let xh = &mut xhat[r * d..(r + 1) * d];
            let o = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xh[j] = h;
                o[j] = g[j] * h + bt[j];
            }
        }
        let v = Tensor::from_parts(xs, out);
        let keep = self.grad_enabled;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: if keep { xhat } else { Vec::new() },
                rstd: if keep { rstd } else { Vec::new() },
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, a: Var, mode: GeluMode) -> Var {
        let x = self.value(a);
        if !(self.grad_enabled && self.rg(a)) {
            let v = x.map(|x| gelu_value(x, mode));
            return self.push(v, Op::Leaf, &[a]);
        }
        let mut values = Vec::with_capacity(x.len());
        let mut slope = Vec::with_capacity(x.len());
        for &v in x.data() {
            let (y, dy) = gelu_with_grad(v, mode);
            values.push(y);
            slope.push(dy);
        }
        let v = Tensor::from_parts(x.shape().to_vec(), values);
        self.push(v, Op::Gelu { a, slope }, &[a])
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Param(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = T::c(1.0 / (1.0 - rate));
        let x = self.value(a);
        let mask: Vec<T> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let out = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.push(v, Op::Dropout { a, mask }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshaped(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape { a }, &[a]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&ax| ax >= shape.len() || std::mem::replace(&mut seen[ax], true))
        {
            return Err(Error::shape("permute", shape, axes));
        }
        let (out_shape, out) = permute_data(x.data(), shape, axes);
        let v = Tensor::from_parts(out_shape, out);
        Ok(self.push(
            v,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            &[a],
        ))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::ShapeMsg(format!(
                "narrow({axis}, {start}, {len}) out of range for shape {shape:?}"
            )));
        }
        if start == 0 && len == shape[axis] {
            return Ok(a);
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let full = shape[axis];
        let data = x.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut os = shape;
        os[axis] = len;
        let v = Tensor::from_parts(os, out);
        Ok(self.push(v, Op::Narrow { a, axis, start }, &[a]))
    }

    // ------------------------------------------------------------ backward

    /// Reverse pass from a single-element `loss`, adding gradients into every
    /// reachable leaf that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(Error::ShapeMsg(format!(
                "backward requires a scalar loss, got shape {ls:?}"
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g)?;
                continue;
            }
            self.backprop_node(i, g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                trans_b,
                m,
                k,
                n,
                pairs,
            } => {
                let (m, k, n, tb) = (*m, *k, *n, *trans_b);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                fn bmat<T: Scalar>(s: &[T], k: usize, n: usize, tb: bool) -> Mat<'_, T> {
                    if tb {
                        Mat::new(s, n, k).t()
                    } else {
                        Mat::new(s, k, n)
                    }
                }
                match pairs {
                    None => {
                        let rows = av.len() / k.max(1);
                        if self.rg(*a) {
                            let da = slot(grads, a.0, av.len());
                            gemm(Mat::new(&g, rows, n), bmat(bv, k, n, tb).t(), da, true);
                        }
                        if self.rg(*b) {
                            let db = slot(grads, b.0, bv.len());
                            if tb {
                                gemm(Mat::new(&g, rows, n).t(), Mat::new(av, rows, k), db, true);
                            } else {
                                gemm(Mat::new(av, rows, k).t(), Mat::new(&g, rows, n), db, true);
                            }
                        }
                    }
                    Some(pairs) => {
                        if self.rg(*a) {
                            let da = slot(grads, a.0, av.len());
                            for (ic, &(ia, ib)) in pairs.iter().enumerate() {
                                gemm(
                                    Mat::new(&g[ic * m * n..(ic + 1) * m * n], m, n),
                                    bmat(&bv[ib * k * n..(ib + 1) * k * n], k, n, tb).t(),
                                    &mut da[ia * m * k..(ia + 1) * m * k],
                                    true,
                                );
                            }
                        }
                        if self.rg(*b) {
                            let db = slot(grads, b.0, bv.len());
                            for (ic, &(ia, ib)) in pairs.iter().enumerate() {
                                let gm = Mat::new(&g[ic * m * n..(ic + 1) * m * n], m, n);
                                let am = Mat::new(&av[ia * m * k..(ia + 1) * m * k], m, k);
                                let dst = &mut db[ib * k * n..(ib + 1) * k * n];
                                if tb {
                                    gemm(gm.t(), am, dst, true);
                                } else {
                                    gemm(am.t(), gm, dst, true);
                                }
                            }
                        }
                    }
                }
            }
            Op::Add { a, b, bc } => {
                self.bcast_grad(*a, *b, *bc, &g, grads, |gv, _, _| gv, |gv, _, _| gv);
            }
            Op::Sub { a, b, bc } => {
                self.bcast_grad(*a, *b, *bc, &g, grads, |gv, _, _| gv, |gv, _, _| -gv);
            }
            Op::Mul { a, b, bc } => {
                self.bcast_grad(*a, *b, *bc, &g, grads, |gv, _, y| gv * y, |gv, x, _| gv * x);
            }
            Op::Scale { a, c } => {
                let c = *c;
                add_into(grads, a.0, g.into_iter().map(|v| v * c).collect());
            }
            Op::SumAll { a } => {
                let len = self.value(*a).len();
                add_into(grads, a.0, vec![g[0]; len]);
            }
            Op::MeanAll { a } => {
                let len = self.value(*a).len();
                let v = g[0] / T::c(len.max(1) as f64);
                add_into(grads, a.0, vec![v; len]);
            }
            Op::SumLast { a } => {
                let x = self.value(*a);
                let d = *x.shape().last().unwrap_or(&1);
                let mut da = Vec::with_capacity(x.len());
                for &gv in &g {
                    da.extend(std::iter::repeat(gv).take(d));
                }
                add_into(grads, a.0, da);
            }
            Op::NormLast { a } => {
                let x = self.value(*a);
                let d = *x.shape().last().unwrap_or(&1);
                let mut da = vec![T::zero(); x.len()];
                if d > 0 {
                    for (r, (src, dst)) in x.data().chunks(d).zip(da.chunks_mut(d)).enumerate() {
                        let nrm = out[r];
                        if nrm > T::zero() {
                            let s = g[r] / nrm;
                            for (o, &v) in dst.iter_mut().zip(src) {
                                *o = v * s;
                            }
                        }
                    }
                }
                add_into(grads, a.0, da);
            }
            Op::Attention { q, k, v, probs, scale } => {
                let s = self.shape(*q);
                let (groups, n, heads, dh) = (s[0], s[1], s[2], s[3]);
                let d = heads * dh;
                let scale = *scale;
                let p = self.value(*probs).data();
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![T::zero(); qv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut dv = vec![T::zero(); vv.len()];
                let mut hb = HeadBufs::new(n, dh);
                let mut go = vec![T::zero(); n * dh];
                for gi in 0..groups {
                    for h in 0..heads {
                        let at = HeadAt { base: gi * n * d + h * dh, stride: d, n, dh };
                        let pg = &p[(gi * heads + h) * n * n..][..n * n];
                        at.gather(&g, &mut go);
                        at.gather(qv, &mut hb.q);
                        at.gather(kv, &mut hb.k);
                        at.gather(vv, &mut hb.v);
                        // dV = P^T dO
                        gemm(Mat::new(pg, n, n).t(), Mat::new(&go, n, dh), &mut hb.o, false);
                        at.scatter_add(&hb.o, &mut dv);
                        // dP = dO V^T, then through the softmax and the scale
                        gemm(Mat::new(&go, n, dh), Mat::new(&hb.v, n, dh).t(), &mut hb.s, false);
                        for (ds, pr) in hb.s.chunks_exact_mut(n).zip(pg.chunks_exact(n)) {
                            let mean = dot(ds, pr);
                            ds.iter_mut().zip(pr).for_each(|(x, &pij)| *x = pij * (*x - mean) * scale);
                        }
                        gemm(Mat::new(&hb.s, n, n), Mat::new(&hb.k, n, dh), &mut hb.o, false);
                        at.scatter_add(&hb.o, &mut dq);
                        gemm(Mat::new(&hb.s, n, n).t(), Mat::new(&hb.q, n, dh), &mut hb.o, false);
                        at.scatter_add(&hb.o, &mut dk);
                    }
                }
                for (var, dx) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.rg(var) {
                        add_into(grads, var.0, dx);
                    }
                }
            }
            Op::Softmax {
                a,
                outer,
                len,
                inner,
            } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let mut da = vec![T::zero(); out.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * len * inner + ii;
                        let mut dot = T::zero();
                        for j in 0..len {
                            let p = base + j * inner;
                            dot = dot + g[p] * out[p];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            da[p] = out[p] * (g[p] - dot);
                        }
                    }
                }
                add_into(grads, a.0, da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = self.value(*gamma).data();
                let d = gm.len();
                let rows = rstd.len();
                if self.rg(*gamma) {
                    let dg = slot(grads, gamma.0, d);
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] = dg[j] + g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.rg(*beta) {
                    let db = slot(grads, beta.0, d);
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] = db[j] + g[r * d + j];
                        }
                    }
                }
                if self.rg(*x) {
                    let inv_d = T::c(1.0 / d.max(1) as f64);
                    let dx = slot(grads, x.0, rows * d);
                    let mut dxh = vec![T::zero(); d];
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let v = g[r * d + j] * gm[j];
                            dxh[j] = v;
                            s1 = s1 + v;
                            s2 = s2 + v * xh[j];
                        }
                        let m1 = s1 * inv_d;
                        let m2 = s2 * inv_d;
                        let rs = rstd[r];
                        let dst = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            dst[j] = dst[j] + rs * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Gelu { a, slope } => {
                add_into(grads, a.0, g.iter().zip(slope).map(|(&gv, &s)| gv * s).collect());
            }
            Op::Dropout { a, mask } => {
                add_into(grads, a.0, g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect());
            }
            Op::Reshape { a } => add_into(grads, a.0, g),
            Op::Permute { a, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let (_, da) = permute_data(&g, node.value.shape(), &inv);
                add_into(grads, a.0, da);
            }
            Op::Narrow { a, axis, start } => {
                let xs = self.value(*a).shape();
                let outer = numel(&xs[..*axis]);
                let inner = numel(&xs[axis + 1..]);
                let full = xs[*axis];
                let len = node.value.shape()[*axis];
                let da = slot(grads, a.0, numel(xs));
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let base = (o * full + start) * inner;
                    for (d, &s) in da[base..base + len * inner].iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
    }

    /// Gradient routing for broadcast binary ops. `fa`/`fb` map
    /// `(upstream, a_val, b_val)` to the local contribution for each side.
    #[allow(clippy::too_many_arguments)]
    fn bcast_grad(
        &self,
        a: Var,
        b: Var,
        bc: Bcast,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        fa: impl Fn(T, T, T) -> T,
        fb: impl Fn(T, T, T) -> T,
    ) {
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if self.rg(a) {
            let da = slot(grads, a.0, av.len());
            visit_bcast(bc, g.len(), |p, ia, ib| da[ia] = da[ia] + fa(g[p], av[ia], bv[ib]));
        }
        if self.rg(b) {
            let db = slot(grads, b.0, bv.len());
            visit_bcast(bc, g.len(), |p, ia, ib| db[ib] = db[ib] + fb(g[p], av[ia], bv[ib]));
        }
    }
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
#[inline]
fn visit_bcast(bc: Bcast, total: usize, mut f: impl FnMut(usize, usize, usize)) {
    match bc {
        Bcast::Same => (0..total).for_each(|p| f(p, p, p)),
        Bcast::Right(len) => {
            for base in (0..total).step_by(len.max(1)) {
                for j in 0..len {
                    f(base + j, base + j, j);
                }
            }
        }
        Bcast::Left(len) => {
            for base in (0..total).step_by(len.max(1)) {
                for j in 0..len {
                    f(base + j, j, base + j);
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], idx: usize, len: usize) -> &mut [T] {
    grads[idx].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(grads: &mut [Option<Vec<T>>], idx: usize, g: Vec<T>) {
    match &mut grads[idx] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
        slot @ None => *slot = Some(g),
    }
}

fn split_last(shape: &[usize]) -> Option<(Vec<usize>, usize)> {
    let (&d, rest) = shape.split_last()?;
    Some((rest.to_vec(), d))
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> Option<Bcast> {
    if a == b {
        return Some(Bcast::Same);
    }
    if a.len() > b.len() && a.ends_with(b) {
        return Some(Bcast::Right(numel(b)));
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Some(Bcast::Left(numel(a)));
    }
    None
}

/// Numpy-style broadcast of batch shapes; returns the output batch shape and,
/// for each output batch index, the flat batch index into `a` and `b`.
fn broadcast_batch(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, Vec<(usize, usize)>)> {
    let r = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; r - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(r);
    for (&x, &y) in pa.iter().zip(&pb) {
        match (x, y) {
            _ if x == y => out.push(x),
            (1, y) => out.push(y),
            (x, 1) => out.push(x),
            _ => return None,
        }
    }
    let total = numel(&out);
    let mut pairs = Vec::with_capacity(total);
    let mut idx = vec![0usize; r];
    for _ in 0..total {
        let (mut fa, mut fb) = (0, 0);
        for d in 0..r {
            fa = fa * pa[d] + if pa[d] == 1 { 0 } else { idx[d] };
            fb = fb * pb[d] + if pb[d] == 1 { 0 } else { idx[d] };
        }
        pairs.push((fa, fb));
        for d in (0..r).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some((out, pairs))
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let r = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; r];
    for d in (0..r.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    // Trailing axes that stay in place are copied as contiguous blocks.
    let mut keep = 0;
    while keep < r && axes[r - 1 - keep] == r - 1 - keep {
        keep += 1;
    }
    let block: usize = shape[r - keep..].iter().product();
    let outer_axes = r - keep;
    let strides: Vec<usize> = axes[..outer_axes].iter().map(|&a| in_strides[a]).collect();
    let dims = &out_shape[..outer_axes];
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out_shape, out);
    }
    let count: usize = dims.iter().product();
    let mut idx = vec![0usize; outer_axes];
    let mut off = 0usize;
    for _ in 0..count {
        out.extend_from_slice(&data[off..off + block]);
        for d in (0..outer_axes).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < dims[d] {
                break;
            }
            off -= strides[d] * dims[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

/// Strided view of one head inside a `[n, heads * d_h]` token block.
struct HeadAt {
    base: usize,
    stride: usize,
    n: usize,
    dh: usize,
}

impl HeadAt {
    fn gather<T: Copy>(&self, src: &[T], dst: &mut [T]) {
        let rows = src[self.base..].chunks(self.stride).take(self.n);
        for (d, s) in dst.chunks_exact_mut(self.dh).zip(rows) {
            d.copy_from_slice(&s[..self.dh]);
        }
    }

    fn scatter_add<T: Scalar>(&self, src: &[T], dst: &mut [T]) {
        let rows = dst[self.base..].chunks_mut(self.stride).take(self.n);
        for (s, d) in src.chunks_exact(self.dh).zip(rows) {
            d[..self.dh].iter_mut().zip(s).for_each(|(d, &s)| *d = *d + s);
        }
    }
}

/// Per-head scratch: contiguous `q`, `k`, `v`, `[n, n]` scores and an
/// `[n, d_h]` product.
struct HeadBufs<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    s: Vec<T>,
    o: Vec<T>,
}

impl<T: Scalar> HeadBufs<T> {
    fn new(n: usize, dh: usize) -> Self {
        let z = || vec![T::zero(); n * dh];
        HeadBufs {
            q: z(),
            k: z(),
            v: z(),
            s: vec![T::zero(); n * n],
            o: z(),
        }
    }
}

fn softmax_row<T: Scalar>(src: &[T], dst: &mut [T]) {
    let mx = src.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for (d, &v) in dst.iter_mut().zip(src) {
        let e = (v - mx).exp();
        *d = e;
        s = s + e;
    }
    let inv = s.recip();
    dst.iter_mut().for_each(|d| *d = *d * inv);
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu_value<T: Scalar>(x: T, mode: GeluMode) -> T {
    let half = T::c(0.5);
    match mode {
        GeluMode::Exact => x * (half * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf())),
        GeluMode::Tanh => {
            let inner = T::c(SQRT_2_OVER_PI) * (x + T::c(0.044715) * x * x * x);
            half * x * (T::one() + inner.tanh())
        }
    }
}

/// GELU and its derivative at `x`.
fn gelu_with_grad<T: Scalar>(x: T, mode: GeluMode) -> (T, T) {
    let half = T::c(0.5);
    match mode {
        GeluMode::Exact => {
            let cdf = half * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf());
            let pdf = T::c(INV_SQRT_2PI) * (-half * x * x).exp();
            (x * cdf, cdf + x * pdf)
        }
        GeluMode::Tanh => {
            let c = T::c(SQRT_2_OVER_PI);
            let a = T::c(0.044715);
            let inner = c * (x + a * x * x * x);
            let t = inner.tanh();
            let grad = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::c(3.0) * a * x * x);
            (half * x * (T::one() + t), grad)
        }
    }
}
