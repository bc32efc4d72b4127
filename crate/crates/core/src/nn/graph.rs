//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of
//! a (sum-reduced) output with respect to every recorded node. Parameters are
//! pulled in from a [`ParamStore`] once per graph, so using a parameter in
//! several places (e.g. a batch and its flipped copy) accumulates into a
//! single gradient.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use super::params::{ParamId, ParamStore};
use super::pool::{l2pool_backward, l2pool_forward, pooled_extent, HammingKernel2D};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Running statistics handed to [`Graph::batch_norm`].
pub struct RunningStats<'a, T: Scalar> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: &'a Tensor<T>,
    pub var: &'a Tensor<T>,
}

enum Op<T: Scalar> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias {
        x: Var,
        bias: Var,
        axis: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<T>,
    },
    Relu(Var),
    Abs(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        batch_stats: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    EuclidNormalize {
        x: Var,
        eps: T,
        norms: Vec<T>,
    },
    L2Pool {
        x: Var,
        kernel: HammingKernel2D,
        stride: usize,
        energy: Vec<T>,
    },
    GlobalAvgPool(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

impl<T: Scalar> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Param => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Scale(x, _) | Relu(x) | Abs(x) | Softmax(x) | GlobalAvgPool(x) | Reshape(x)
            | Sum(x) | Mean(x) => vec![*x],
            AddBias { x, bias, .. } => vec![*x, *bias],
            Linear { x, w, b } | Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            BatchMatMul { a, b, .. } => vec![*a, *b],
            LayerNorm { x, gamma, beta, .. } | BatchNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Dropout { x, .. }
            | EuclidNormalize { x, .. }
            | L2Pool { x, .. }
            | Permute { x, .. }
            | Gather { x, .. } => vec![*x],
            Concat { parts, .. } => parts.clone(),
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    record: bool,
    rng: ChaCha8Rng,
    params: HashMap<ParamId, Var>,
    stat_updates: Vec<StatUpdate<T>>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn check_same(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operands {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Row-major permutation of `data` with `shape` by axis order `perm`.
fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl<T: Scalar> Graph<T> {
    /// A graph that records everything needed for [`Graph::backward`].
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            record: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: HashMap::new(),
            stat_updates: Vec::new(),
        }
    }

    /// Forward-only evaluation graph; no intermediate caches are kept.
    pub fn inference() -> Self {
        let mut g = Self::new(Mode::Eval, 0);
        g.record = false;
        g
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn stat_updates(&self) -> &[StatUpdate<T>] {
        &self.stat_updates
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = self.record
            && match &op {
                Op::Leaf => false,
                Op::Param => true,
                other => other.parents().iter().any(|p| self.nodes[p.0].needs_grad),
            };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// A differentiable leaf whose gradient can be read from [`Gradients`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let v = self.push(t, Op::Leaf);
        self.nodes[v.0].needs_grad = self.record;
        v
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).map(|v| v * c);
        self.push(y, Op::Scale(x, c))
    }

    /// Adds a vector along `axis` of `x` (broadcast over every other axis).
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias);
        if axis >= xs.len() || bs.len() != 1 || bs[0] != xs[axis] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {bs:?} does not match axis {axis} of {xs:?}"),
            ));
        }
        let inner: usize = xs[axis + 1..].iter().product();
        let n = xs[axis];
        let b = self.value(bias).data().to_vec();
        let mut y = self.value(x).clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v = *v + b[(i / inner) % n];
        }
        Ok(self.push(y, Op::AddBias { x, bias, axis }))
    }

    /// `x · w + b` over the last axis of `x`; `w` is `(in, out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let fan_in = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[0] != fan_in {
            return Err(Error::shape(
                "linear",
                format!("input last axis {fan_in} vs weight {ws:?} (axis 0)"),
            ));
        }
        let out = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} vs output width {out}", self.shape(b)),
                ));
            }
        }
        let rows = self.value(x).len() / fan_in;
        let mut y = vec![T::zero(); rows * out];
        T::gemm(
            rows,
            fan_in,
            out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut y,
            T::zero(),
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in y.chunks_mut(out) {
                for (v, &bb) in row.iter_mut().zip(bv) {
                    *v = *v + bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let y = Tensor::from_vec(&shape, y)?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    /// Batched matrix product over the last two axes; leading axes must match.
    /// With `trans_b`, `b` is stored as `(..., n, k)`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() < 2 || bs.len() != as_.len() || as_[..as_.len() - 2] != bs[..bs.len() - 2] {
            return Err(Error::shape(
                "batch_matmul",
                format!("leading axes of {as_:?} and {bs:?} differ"),
            ));
        }
        let r = as_.len();
        let (m, k) = (as_[r - 2], as_[r - 1]);
        let (kb, n) = if trans_b {
            (bs[r - 1], bs[r - 2])
        } else {
            (bs[r - 2], bs[r - 1])
        };
        if kb != k {
            return Err(Error::shape(
                "batch_matmul",
                format!("inner axes {k} (lhs last) vs {kb} (rhs)"),
            ));
        }
        let batch: usize = as_[..r - 2].iter().product();
        let mut y = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut y[i * m * n..(i + 1) * m * n],
                T::zero(),
            );
        }
        let mut shape = as_[..r - 2].to_vec();
        shape.extend([m, n]);
        let y = Tensor::from_vec(&shape, y)?;
        Ok(self.push(y, Op::BatchMatMul { a, b, trans_b }))
    }

    /// 2D convolution with zero padding; `w` is `(out, in, k, k)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (batch, c, h, wd) = self.value(x).dims4("conv2d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {c} (axis 1) vs weight {ws:?}"),
            ));
        }
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kernel: ws[2],
            stride,
            pad,
        };
        if !geom.valid() {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {} stride {stride} pad {pad} on {h}x{wd}", ws[2]),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} vs {} output channels", self.shape(b), ws[0]),
                ));
            }
        }
        let (out, cols) = conv2d_forward(
            self.value(x).data(),
            batch,
            self.value(w).data(),
            ws[0],
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let y = Tensor::from_vec(&[batch, ws[0], geom.out_height(), geom.out_width()], out)?;
        let keep = self.record && (self.needs(w) || self.needs(x));
        let cols = if keep { cols } else { Vec::new() };
        Ok(self.push(y, Op::Conv2d { x, w, b, geom, cols }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        self.push(y, Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.abs());
        self.push(y, Op::Abs(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap_or(&1);
        let mut y = xv.clone();
        for row in y.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        self.push(y, Op::Softmax(x))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap_or(&0);
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "affine {:?}/{:?} vs last axis {n}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let nt = T::of(n as f64);
        let mut xhat = xv.data().to_vec();
        let mut rstd = Vec::with_capacity(xv.len() / n);
        for row in xhat.chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let r = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut y = xhat.clone();
        for row in y.chunks_mut(n) {
            for (i, v) in row.iter_mut().enumerate() {
                *v = *v * g[i] + b[i];
            }
        }
        let y = Tensor::from_vec(xv.shape(), y)?;
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Per-channel normalization of `(b, c, h, w)`. Training mode normalizes
    /// with batch statistics and records a running-statistics update; evaluation
    /// mode uses the stored running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: RunningStats<'_, T>,
    ) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4("batch_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.mean.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("affine/statistics do not match {c} channels (axis 1)"),
            ));
        }
        let hw = h * w;
        let count = T::of((b * hw) as f64);
        let eps = T::of(BATCH_NORM_EPS);
        let xd = self.value(x).data();
        let batch_stats = self.mode == Mode::Train;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if batch_stats {
            for s in 0..b {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    mean[ch] = mean[ch] + xd[base..base + hw].iter().copied().sum::<T>();
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / count);
            for s in 0..b {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    let m = mean[ch];
                    var[ch] = var[ch]
                        + xd[base..base + hw]
                            .iter()
                            .map(|&v| (v - m) * (v - m))
                            .sum::<T>();
                }
            }
            var.iter_mut().for_each(|v| *v = *v / count);
        } else {
            mean.copy_from_slice(stats.mean.data());
            var.copy_from_slice(stats.var.data());
        }
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = xd.to_vec();
        for (i, v) in xhat.iter_mut().enumerate() {
            let ch = (i / hw) % c;
            *v = (*v - mean[ch]) * rstd[ch];
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let y: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / hw) % c;
                v * g[ch] + bt[ch]
            })
            .collect();
        let y = Tensor::from_vec(&[b, c, h, w], y)?;
        if batch_stats {
            let n = (b * hw) as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            self.stat_updates.push(StatUpdate {
                mean: stats.mean_id,
                var: stats.var_id,
                batch_mean: mean,
                batch_var: var.iter().map(|&v| v * T::of(unbiased)).collect(),
            });
        }
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                batch_stats,
            },
        ))
    }

    /// Inverted dropout; identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut y = self.value(x).clone();
        for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
            *v = *v * m;
        }
        Ok(self.push(y, Op::Dropout { x, mask }))
    }

    /// Divides every sample (leading axis) by `max(‖sample‖₂, eps)`.
    pub fn euclid_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Invalid(format!("eps must be positive, got {eps}")));
        }
        let xv = self.value(x);
        let b = xv.shape()[0];
        let per = xv.len() / b;
        let eps_t = T::of(eps);
        let mut y = xv.clone();
        let mut norms = Vec::with_capacity(b);
        for sample in y.data_mut().chunks_mut(per) {
            let n = sample.iter().map(|&v| v * v).sum::<T>().sqrt();
            let d = n.max(eps_t);
            sample.iter_mut().for_each(|v| *v = *v / d);
            norms.push(n);
        }
        Ok(self.push(
            y,
            Op::EuclidNormalize {
                x,
                eps: eps_t,
                norms,
            },
        ))
    }

    /// L2 pooling of `(b, c, h, w)` per channel with reflective padding.
    pub fn l2pool(&mut self, x: Var, kernel: &HammingKernel2D, stride: usize) -> Result<Var> {
        if stride < 1 {
            return Err(Error::Invalid("l2pool stride must be >= 1".into()));
        }
        let (b, c, h, w) = self.value(x).dims4("l2pool")?;
        let (out, energy) = l2pool_forward(self.value(x).data(), b * c, h, w, kernel, stride);
        let y = Tensor::from_vec(&[b, c, pooled_extent(h, stride), pooled_extent(w, stride)], out)?;
        Ok(self.push(
            y,
            Op::L2Pool {
                x,
                kernel: kernel.clone(),
                stride,
                energy,
            },
        ))
    }

    /// Spatial mean of `(b, c, h, w)` giving `(b, c)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4("global_avg_pool")?;
        let hw = h * w;
        let inv = T::of(1.0 / hw as f64);
        let y: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let y = Tensor::from_vec(&[b, c], y)?;
        Ok(self.push(y, Op::GlobalAvgPool(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let (data, out_shape) = permute_data(self.value(x).data(), &shape, perm);
        let y = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(
            y,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x)))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| {
            Error::Invalid("concat of zero tensors".into())
        })?)
        .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} vs {first:?} off axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let slab = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * slab..(o + 1) * slab]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let y = Tensor::from_vec(&shape, data)?;
        Ok(self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Picks flat elements into a 1D tensor.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", format!("index {bad} out of {n} elements")));
        }
        if indices.is_empty() {
            return Err(Error::Invalid("gather of zero indices".into()));
        }
        let d = self.value(x).data();
        let y: Vec<T> = indices.iter().map(|&i| d[i]).collect();
        let y = Tensor::from_vec(&[indices.len()], y)?;
        Ok(self.push(
            y,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let y = Tensor::scalar(v.sum() / T::of(v.len() as f64));
        self.push(y, Op::Mean(x))
    }

    /// Reverse pass from `out`. A non-scalar output is treated as its sum.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if !self.record {
            return Err(Error::Invalid(
                "backward on an inference graph".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.shape(out), T::one()));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(data) {
                    *a = *a + b;
                }
            }
            slot @ None => {
                let t = Tensor::from_vec(self.shape(v), data).expect("gradient matches value");
                *slot = Some(t);
            }
        }
    }

    fn backprop_node(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let d = dy.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, d.to_vec());
                self.acc(grads, *b, d.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, d.to_vec());
                self.acc(grads, *b, d.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, d.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                self.acc(grads, *b, d.iter().zip(av).map(|(&g, &x)| g * x).collect());
            }
            Op::Scale(x, c) => self.acc(grads, *x, d.iter().map(|&v| v * *c).collect()),
            Op::AddBias { x, bias, axis } => {
                self.acc(grads, *x, d.to_vec());
                if self.needs(*bias) {
                    let xs = self.shape(*x);
                    let inner: usize = xs[axis + 1..].iter().product();
                    let n = xs[*axis];
                    let mut db = vec![T::zero(); n];
                    for (i, &g) in d.iter().enumerate() {
                        let k = (i / inner) % n;
                        db[k] = db[k] + g;
                    }
                    self.acc(grads, *bias, db);
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (fan_in, out) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.len() / fan_in;
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); xv.len()];
                    T::gemm(rows, out, fan_in, d, false, wv.data(), true, &mut dx, T::zero());
                    self.acc(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); wv.len()];
                    T::gemm(fan_in, rows, out, xv.data(), true, d, false, &mut dw, T::zero());
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); out];
                    for row in d.chunks(out) {
                        for (a, &g) in db.iter_mut().zip(row) {
                            *a = *a + g;
                        }
                    }
                    self.acc(grads, *b, db);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let r = av.rank();
                let (m, k) = (av.shape()[r - 2], av.shape()[r - 1]);
                let n = node.value.shape()[r - 1];
                let batch = av.len() / (m * k);
                let mut da = vec![T::zero(); if self.needs(*a) { av.len() } else { 0 }];
                let mut db = vec![T::zero(); if self.needs(*b) { bv.len() } else { 0 }];
                for i in 0..batch {
                    let dyi = &d[i * m * n..(i + 1) * m * n];
                    let ai = &av.data()[i * m * k..(i + 1) * m * k];
                    let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                    if !da.is_empty() {
                        let dai = &mut da[i * m * k..(i + 1) * m * k];
                        T::gemm(m, n, k, dyi, false, bi, !trans_b, dai, T::zero());
                    }
                    if !db.is_empty() {
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            T::gemm(n, m, k, dyi, true, ai, false, dbi, T::zero());
                        } else {
                            T::gemm(k, m, n, ai, true, dyi, false, dbi, T::zero());
                        }
                    }
                }
                if !da.is_empty() {
                    self.acc(grads, *a, da);
                }
                if !db.is_empty() {
                    self.acc(grads, *b, db);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let batch = xv.shape()[0];
                let out_c = wv.shape()[0];
                let mut dx = if self.needs(*x) {
                    Some(vec![T::zero(); xv.len()])
                } else {
                    None
                };
                let mut dw = if self.needs(*w) {
                    Some(vec![T::zero(); wv.len()])
                } else {
                    None
                };
                let mut db = b.map(|_| vec![T::zero(); out_c]);
                conv2d_backward(
                    d,
                    cols,
                    batch,
                    wv.data(),
                    out_c,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.acc(grads, *b, db);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = d
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.acc(grads, *x, dx);
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                let dx = d
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| {
                        if v > T::zero() {
                            g
                        } else if v < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.acc(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(d.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yy * (gg - dot);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = *node.value.shape().last().unwrap_or(&1);
                let g = self.value(*gamma).data();
                let nt = T::of(n as f64);
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                let mut dx = vec![T::zero(); d.len()];
                for (row, ((gr, xr), dr)) in d
                    .chunks(n)
                    .zip(xhat.chunks(n))
                    .zip(dx.chunks_mut(n))
                    .enumerate()
                {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for i in 0..n {
                        dgamma[i] = dgamma[i] + gr[i] * xr[i];
                        dbeta[i] = dbeta[i] + gr[i];
                        let dh = gr[i] * g[i];
                        s1 = s1 + dh;
                        s2 = s2 + dh * xr[i];
                    }
                    let r = rstd[row];
                    for i in 0..n {
                        let dh = gr[i] * g[i];
                        dr[i] = r / nt * (nt * dh - s1 - xr[i] * s2);
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                batch_stats,
            } => {
                let (b, c, h, w) = node.value.dims4("batch_norm").expect("4d");
                let hw = h * w;
                let g = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (i, (&gg, &xh)) in d.iter().zip(xhat).enumerate() {
                    let ch = (i / hw) % c;
                    dgamma[ch] = dgamma[ch] + gg * xh;
                    dbeta[ch] = dbeta[ch] + gg;
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); d.len()];
                    if *batch_stats {
                        let m = T::of((b * hw) as f64);
                        for (i, o) in dx.iter_mut().enumerate() {
                            let ch = (i / hw) % c;
                            let dh = d[i] * g[ch];
                            // dgamma/g and dbeta/g carry the per-channel sums of dh·xhat and dh
                            *o = rstd[ch] / m
                                * (m * dh - dbeta[ch] * g[ch] - xhat[i] * dgamma[ch] * g[ch]);
                        }
                    } else {
                        for (i, o) in dx.iter_mut().enumerate() {
                            let ch = (i / hw) % c;
                            *o = d[i] * g[ch] * rstd[ch];
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::Dropout { x, mask } => {
                self.acc(grads, *x, d.iter().zip(mask).map(|(&g, &m)| g * m).collect())
            }
            Op::EuclidNormalize { x, eps, norms } => {
                let y = node.value.data();
                let per = y.len() / norms.len();
                let mut dx = vec![T::zero(); y.len()];
                for (s, &n) in norms.iter().enumerate() {
                    let r = s * per..(s + 1) * per;
                    if n > *eps {
                        // d(x/‖x‖) = (I - y yᵀ) / ‖x‖
                        let dot: T = y[r.clone()].iter().zip(&d[r.clone()]).map(|(&a, &b)| a * b).sum();
                        for i in r {
                            dx[i] = (d[i] - y[i] * dot) / n;
                        }
                    } else {
                        for i in r {
                            dx[i] = d[i] / *eps;
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::L2Pool {
                x,
                kernel,
                stride,
                energy,
            } => {
                let xv = self.value(*x);
                let (b, c, h, w) = xv.dims4("l2pool").expect("4d");
                let mut dx = vec![T::zero(); xv.len()];
                l2pool_backward(
                    xv.data(),
                    node.value.data(),
                    energy,
                    d,
                    b * c,
                    h,
                    w,
                    kernel,
                    *stride,
                    &mut dx,
                );
                self.acc(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let (_, _, h, w) = xv.dims4("global_avg_pool").expect("4d");
                let hw = h * w;
                let inv = T::of(1.0 / hw as f64);
                let dx = (0..xv.len()).map(|i| d[i / hw] * inv).collect();
                self.acc(grads, *x, dx);
            }
            Op::Permute { x, perm } => {
                let (dx, _) = permute_data(d, node.value.shape(), &inverse_perm(perm));
                self.acc(grads, *x, dx);
            }
            Op::Reshape(x) => self.acc(grads, *x, d.to_vec()),
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let slab = self.shape(p)[*axis] * inner;
                    let mut dp = Vec::with_capacity(outer * slab);
                    for o in 0..outer {
                        dp.extend_from_slice(&d[o * total + offset..o * total + offset + slab]);
                    }
                    offset += slab;
                    self.acc(grads, p, dp);
                }
            }
            Op::Gather { x, indices } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&i, &g) in indices.iter().zip(d) {
                    dx[i] = dx[i] + g;
                }
                self.acc(grads, *x, dx);
            }
            Op::Sum(x) => self.acc(grads, *x, vec![d[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, vec![d[0] / T::of(n as f64); n]);
            }
        }
    }

    /// Adds this pass's parameter gradients into `store`.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }

    /// Folds recorded batch statistics into the running buffers of `store`.
    pub fn apply_stat_updates(&self, store: &mut ParamStore<T>) {
        let mom = T::of(BATCH_NORM_MOMENTUM);
        for u in &self.stat_updates {
            for (id, batch) in [(u.mean, &u.batch_mean), (u.var, &u.batch_var)] {
                let buf = store.get_mut(id).value.data_mut();
                for (r, &bv) in buf.iter_mut().zip(batch) {
                    *r = (T::one() - mom) * *r + mom * bv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_round_trip() {
        let data: Vec<i32> = (0..24).collect();
        let (p, s) = permute_data(&data, &[2, 3, 4], &[2, 0, 1]);
        assert_eq!(s, vec![4, 2, 3]);
        // element (i,j,k) of the input lands at (k,i,j)
        assert_eq!(p[(3 * 2 + 1) * 3 + 2], data[(12) + 2 * 4 + 3]);
        let (back, s2) = permute_data(&p, &s, &inverse_perm(&[2, 0, 1]));
        assert_eq!(s2, vec![2, 3, 4]);
        assert_eq!(back, data);
    }

    #[test]
    fn shared_param_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let mut g = Graph::new(Mode::Train, 0);
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let s = g.add(a, b).unwrap();
        let out = g.sum(s);
        let grads = g.backward(out).unwrap();
        g.accumulate_param_grads(&grads, &mut store);
        assert_eq!(store.get(id).grad.data(), &[2.0, 2.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f32>::new(Mode::Eval, 0);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
        let w = g.constant(Tensor::zeros(&[4, 5]));
        let err = g.linear(a, w, None).unwrap_err().to_string();
        assert!(err.contains("linear") && err.contains("axis"), "{err}");
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut g = Graph::<f32>::new(Mode::Eval, 0);
        let a = g.constant(Tensor::full(&[4], 2.0));
        let d = g.dropout(a, 0.5).unwrap();
        assert_eq!(a, d);
    }
}
