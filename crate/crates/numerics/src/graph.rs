//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are borrowed from a
//! [`ParamStore`] rather than copied; [`Graph::backward`] walks the tape in reverse and returns
//! gradients for every trainable parameter and every leaf created with [`Graph::input`].

use crate::error::{NumericsError, Result};
use crate::kernels::{self, split_axis};
use crate::params::{GradStore, ParamId, ParamStore};
use crate::real::{gemm, MatView, Real};
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize, log: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, groups: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    LayerNorm { x: Var, gamma: Option<Var>, beta: Option<Var>, rstd: Vec<T> },
    BatchNorm { x: Var, gamma: Option<Var>, beta: Option<Var>, mean: Vec<T>, rstd: Vec<T>, batch_stats: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    SumAll(Var),
    MeanAll(Var),
    MeanTail { x: Var, from: usize },
    MaxTail { x: Var, argmax: Vec<usize> },
    Resize(Var),
    BceWithLogits { logits: Var, target: Tensor<T> },
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Whether batch normalization layers should use batch statistics and update running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct Graph<'s, T: Real> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    mode: Mode,
    buffer_updates: Vec<(ParamId, Tensor<T>)>,
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
    pub params: GradStore<T>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a leaf created with [`Graph::input`] (`None` if it did not influence the loss).
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id)
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() }
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self { store, nodes: Vec::new(), mode, buffer_updates: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Running-statistic updates recorded by batch normalization in training mode.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let requires_grad = self.store.get(id).trainable();
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id), requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            return self.value(a).zip_map(self.value(b), f);
        }
        let out_shape = kernels::broadcast_shape(&sa, &sb).ok_or_else(|| mismatch(name, &sa, &sb))?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); numel(&out_shape)];
        kernels::for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| out[o] = f(ad[i], bd[j]));
        Tensor::new(&out_shape, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "div", |x, y| x / y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(t, Op::MulScalar(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(kernels::gelu);
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(kernels::sigmoid);
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        if axis >= self.value(x).rank() {
            return Err(mismatch("softmax", self.shape(x), &[axis]));
        }
        let t = kernels::softmax_forward(self.value(x), axis, log);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x, axis, log }, rg))
    }

    /// 2-D cross-correlation of `x [N,Ci,H,W]` with `w [Co,Ci/groups,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let t = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad, groups)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(t, Op::Conv2d { x, w, b, stride, pad, groups }, rg))
    }

    /// `y = x · wᵀ + b` over the last axis of `x`, with `w [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (fan_in, fan_out) = match ws[..] {
            [o, i] if *xs.last().unwrap() == i => (i, o),
            _ => return Err(mismatch("linear", &xs, &ws)),
        };
        if let Some(b) = b {
            if self.value(b).numel() != fan_out {
                return Err(mismatch("linear bias", &ws, self.shape(b)));
            }
        }
        let rows = numel(&xs) / fan_in;
        let mut out = vec![T::zero(); rows * fan_out];
        gemm(
            MatView::new(self.value(x).data(), rows, fan_in),
            MatView::new(self.value(w).data(), fan_out, fan_in).t(),
            &mut out,
            T::one(),
            T::zero(),
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(fan_out) {
                for (v, &bv) in row.iter_mut().zip(bd) {
                    *v += bv;
                }
            }
        }
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = fan_out;
        let t = Tensor::new(&shape, out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    /// Batched matrix product over the last two axes: `op(a) [.., M, K] · op(b) [.., K, N]`,
    /// where `op` optionally transposes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let r = sa.len();
        let (ar, ac) = (sa[r - 2], sa[r - 1]);
        let (br, bc) = (sb[r - 2], sb[r - 1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let av = MatView::new(&ad[i * ar * ac..(i + 1) * ar * ac], ar, ac);
            let bv = MatView::new(&bd[i * br * bc..(i + 1) * br * bc], br, bc);
            gemm(
                if ta { av.t() } else { av },
                if tb { bv.t() } else { bv },
                &mut out[i * m * n..(i + 1) * m * n],
                T::one(),
                T::zero(),
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul { a, b, ta, tb }, rg))
    }

    /// Normalizes over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap();
        for p in [gamma, beta].into_iter().flatten() {
            if self.value(p).numel() != d {
                return Err(mismatch("layer_norm", &xs, self.shape(p)));
            }
        }
        let rows = numel(&xs) / d;
        let xd = self.value(x).data();
        let g = gamma.map(|g| self.value(g).data());
        let bt = beta.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); xd.len()];
        let mut rstds = Vec::with_capacity(rows);
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rstd = T::one() / (var + eps).sqrt();
            rstds.push(rstd);
            for j in 0..d {
                let mut v = (row[j] - mean) * rstd;
                if let Some(g) = g {
                    v *= g[j];
                }
                if let Some(b) = bt {
                    v += b[j];
                }
                out[r * d + j] = v;
            }
        }
        let t = Tensor::new(&xs, out)?;
        let mut deps = vec![x];
        deps.extend(gamma);
        deps.extend(beta);
        let rg = self.rg(&deps);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, rstd: rstds }, rg))
    }

    /// Per-channel normalization of `[N, C, H, W]`. In [`Mode::Train`] (and when the running
    /// buffers are not frozen) batch statistics are used and running statistics are updated with
    /// `momentum`; otherwise the running statistics are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        running_mean: ParamId,
        running_var: ParamId,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let batch_stats = self.mode == Mode::Train && !self.store.is_frozen(running_mean);
        let hw = h * w;
        let m = n * hw;
        let xd = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let mut pending = Vec::new();
        if batch_stats {
            let mn = T::lit(m as f64);
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    s += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
                }
                mean[ch] = s / mn;
                let mut v = T::zero();
                for b in 0..n {
                    v += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().map(|&x| (x - mean[ch]) * (x - mean[ch])).sum::<T>();
                }
                var[ch] = v / mn;
            }
            let mom = T::lit(momentum);
            let unbias = if m > 1 { T::lit(m as f64 / (m - 1) as f64) } else { T::one() };
            let rm = self.store.value(running_mean);
            let rv = self.store.value(running_var);
            let new_mean = Tensor::from_fn(&[c], |i| (T::one() - mom) * rm.data()[i] + mom * mean[i]);
            let new_var = Tensor::from_fn(&[c], |i| (T::one() - mom) * rv.data()[i] + mom * var[i] * unbias);
            pending.push((running_mean, new_mean));
            pending.push((running_var, new_var));
        } else {
            mean.copy_from_slice(self.store.value(running_mean).data());
            var.copy_from_slice(self.store.value(running_var).data());
        }
        let eps = T::lit(eps);
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = gamma.map(|g| self.value(g).data());
        let bt = beta.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let scale = rstd[ch] * g.map_or(T::one(), |g| g[ch]);
                let shift = bt.map_or(T::zero(), |b| b[ch]);
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    out[i] = (xd[i] - mean[ch]) * scale + shift;
                }
            }
        }
        let t = Tensor::new(&[n, c, h, w], out)?;
        self.buffer_updates.extend(pending);
        let mut deps = vec![x];
        deps.extend(gamma);
        deps.extend(beta);
        let rg = self.rg(&deps);
        Ok(self.push(t, Op::BatchNorm { x, gamma, beta, mean, rstd, batch_stats }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = kernels::permute(self.value(x), perm)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Permute(x, perm.to_vec()), rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| mismatch("concat", &[], &[]))?).to_vec();
        if axis >= first.len() {
            return Err(mismatch("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let d = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(xs);
        Ok(self.push(t, Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(mismatch("narrow", &s, &[axis, start, len]));
        }
        let (outer, d, inner) = split_axis(&s, axis);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * d + start) * inner..(o * d + start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Narrow { x, axis, start }, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(t, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / T::lit(v.numel() as f64));
        let rg = self.rg(&[x]);
        self.push(t, Op::MeanAll(x), rg)
    }

    /// Mean over all axes from `from` onwards; e.g. global average pooling with `from = 2`.
    pub fn mean_tail(&mut self, x: Var, from: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if from == 0 || from >= s.len() {
            return Err(mismatch("mean_tail", &s, &[from]));
        }
        let inner: usize = s[from..].iter().product();
        let xd = self.value(x).data();
        let scale = T::one() / T::lit(inner as f64);
        let out: Vec<T> = xd.chunks(inner).map(|c| c.iter().copied().sum::<T>() * scale).collect();
        let t = Tensor::new(&s[..from], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MeanTail { x, from }, rg))
    }

    /// Max over all axes from `from` onwards (first occurrence wins ties).
    pub fn max_tail(&mut self, x: Var, from: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if from == 0 || from >= s.len() {
            return Err(mismatch("max_tail", &s, &[from]));
        }
        let inner: usize = s[from..].iter().product();
        let xd = self.value(x).data();
        let mut argmax = Vec::new();
        let mut out = Vec::new();
        for (i, c) in xd.chunks(inner).enumerate() {
            let mut best = 0;
            for j in 1..inner {
                if c[j] > c[best] {
                    best = j;
                }
            }
            argmax.push(i * inner + best);
            out.push(c[best]);
        }
        let t = Tensor::new(&s[..from], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MaxTail { x, argmax }, rg))
    }

    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        if (h, w) == (oh, ow) {
            return Ok(x);
        }
        let t = kernels::resize_bilinear_forward(self.value(x), oh, ow)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Resize(x), rg))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and a constant target.
    pub fn bce_with_logits(&mut self, logits: Var, target: Tensor<T>) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != target.shape() {
            return Err(mismatch("bce_with_logits", z.shape(), target.shape()));
        }
        let n = T::lit(z.numel() as f64);
        let loss = z
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
            .sum::<T>()
            / n;
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits { logits, target }, rg))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let l = lv.data()[0];
        if !l.is_finite() {
            return Err(NumericsError::NonFiniteLoss(l.as_f64()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = GradStore::for_store(self.store);
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = (match node.op {
                Op::Leaf => None,
                _ => grads[idx].take(),
            }) else {
                continue;
            };
            self.backprop_node(idx, &dy, &mut grads, &mut params);
        }
        Ok(Gradients { leaves: grads, params })
    }

    fn backprop_node(&self, idx: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>], params: &mut GradStore<T>) {
        let mut acc = |v: Var, g: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            debug_assert_eq!(g.shape(), self.shape(v), "gradient shape for node {}", v.0);
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let y = self.value(Var(idx));
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Param(id) => params.accumulate(*id, dy),
            Op::Add(a, b) => {
                acc(*a, kernels::sum_to_shape(dy, self.shape(*a)));
                acc(*b, kernels::sum_to_shape(dy, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                acc(*a, kernels::sum_to_shape(dy, self.shape(*a)));
                let mut gb = kernels::sum_to_shape(dy, self.shape(*b));
                gb.scale(-T::one());
                acc(*b, gb);
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(self.nodes[idx].op, Op::Div(..));
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (ad, bd, gd) = (self.value(*a).data(), self.value(*b).data(), dy.data());
                if self.requires_grad(*a) {
                    let mut ga = Tensor::zeros(sa);
                    let gad = ga.data_mut();
                    kernels::for_each_broadcast(dy.shape(), sa, sb, |o, i, j| {
                        gad[i] += if is_div { gd[o] / bd[j] } else { gd[o] * bd[j] };
                    });
                    acc(*a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = Tensor::zeros(sb);
                    let gbd = gb.data_mut();
                    kernels::for_each_broadcast(dy.shape(), sa, sb, |o, i, j| {
                        gbd[j] += if is_div { -gd[o] * ad[i] / (bd[j] * bd[j]) } else { gd[o] * ad[i] };
                    });
                    acc(*b, gb);
                }
            }
            Op::AddScalar(a) => acc(*a, dy.clone()),
            Op::MulScalar(a, s) => acc(*a, dy.map(|g| g * *s)),
            Op::Relu(a) => {
                let g = dy.zip_map(self.value(*a), |g, x| if x > T::zero() { g } else { T::zero() }).unwrap();
                acc(*a, g);
            }
            Op::Gelu(a) => acc(*a, dy.zip_map(self.value(*a), |g, x| g * kernels::gelu_grad(x)).unwrap()),
            Op::Sigmoid(a) => acc(*a, dy.zip_map(y, |g, s| g * s * (T::one() - s)).unwrap()),
            Op::Softmax { x, axis, log } => acc(*x, kernels::softmax_backward(y, dy, *axis, *log)),
            Op::Conv2d { x, w, b, stride, pad, groups } => {
                let need = (self.requires_grad(*x), self.requires_grad(*w), b.is_some_and(|b| self.requires_grad(b)));
                let cg = kernels::conv2d_backward(self.value(*x), self.value(*w), dy, *stride, *pad, *groups, need);
                if let Some(g) = cg.dx {
                    acc(*x, g);
                }
                if let Some(g) = cg.dw {
                    acc(*w, g);
                }
                if let (Some(b), Some(g)) = (b, cg.db) {
                    acc(*b, g);
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (fan_out, fan_in) = (self.shape(*w)[0], self.shape(*w)[1]);
                let rows = numel(xs) / fan_in;
                let gv = MatView::new(dy.data(), rows, fan_out);
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); rows * fan_in];
                    gemm(gv, MatView::new(self.value(*w).data(), fan_out, fan_in), &mut dx, T::one(), T::zero());
                    acc(*x, Tensor::new(xs, dx).unwrap());
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![T::zero(); fan_out * fan_in];
                    gemm(gv.t(), MatView::new(self.value(*x).data(), rows, fan_in), &mut dw, T::one(), T::zero());
                    acc(*w, Tensor::new(&[fan_out, fan_in], dw).unwrap());
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let mut db = vec![T::zero(); fan_out];
                        for row in dy.data().chunks(fan_out) {
                            for (d, &g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        acc(*b, Tensor::new(self.shape(*b), db).unwrap());
                    }
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let r = sa.len();
                let (ar, ac, br, bc) = (sa[r - 2], sa[r - 1], sb[r - 2], sb[r - 1]);
                let (m, n) = (y.shape()[r - 2], y.shape()[r - 1]);
                let batch: usize = sa[..r - 2].iter().product();
                let (ad, bd, gd) = (self.value(*a).data(), self.value(*b).data(), dy.data());
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); ad.len()];
                    for i in 0..batch {
                        let gv = MatView::new(&gd[i * m * n..(i + 1) * m * n], m, n);
                        let bv = MatView::new(&bd[i * br * bc..(i + 1) * br * bc], br, bc);
                        let bop = if *tb { bv.t() } else { bv };
                        let out = &mut da[i * ar * ac..(i + 1) * ar * ac];
                        if *ta {
                            gemm(bop, gv.t(), out, T::one(), T::zero());
                        } else {
                            gemm(gv, bop.t(), out, T::one(), T::zero());
                        }
                    }
                    acc(*a, Tensor::new(sa, da).unwrap());
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); bd.len()];
                    for i in 0..batch {
                        let gv = MatView::new(&gd[i * m * n..(i + 1) * m * n], m, n);
                        let av = MatView::new(&ad[i * ar * ac..(i + 1) * ar * ac], ar, ac);
                        let aop = if *ta { av.t() } else { av };
                        let out = &mut db[i * br * bc..(i + 1) * br * bc];
                        if *tb {
                            gemm(gv.t(), aop, out, T::one(), T::zero());
                        } else {
                            gemm(aop.t(), gv, out, T::one(), T::zero());
                        }
                    }
                    acc(*b, Tensor::new(sb, db).unwrap());
                }
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let xs = self.shape(*x);
                let d = *xs.last().unwrap();
                let xd = self.value(*x).data();
                let g = gamma.map(|g| self.value(g).data());
                let gd = dy.data();
                let dn = T::lit(d as f64);
                let mut dx = vec![T::zero(); xd.len()];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let row = &xd[r * d..(r + 1) * d];
                    let mean = row.iter().copied().sum::<T>() / dn;
                    let xhat: Vec<T> = row.iter().map(|&v| (v - mean) * rs).collect();
                    let dxhat: Vec<T> = (0..d).map(|j| gd[r * d + j] * g.map_or(T::one(), |g| g[j])).collect();
                    let s1: T = dxhat.iter().copied().sum();
                    let s2: T = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = rs / dn * (dn * dxhat[j] - s1 - xhat[j] * s2);
                        dgamma[j] += gd[r * d + j] * xhat[j];
                        dbeta[j] += gd[r * d + j];
                    }
                }
                acc(*x, Tensor::new(xs, dx).unwrap());
                if let Some(gm) = gamma {
                    acc(*gm, Tensor::new(self.shape(*gm), dgamma).unwrap());
                }
                if let Some(bt) = beta {
                    acc(*bt, Tensor::new(self.shape(*bt), dbeta).unwrap());
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, rstd, batch_stats } => {
                let (n, c, h, w) = self.value(*x).dims4().unwrap();
                let hw = h * w;
                let mn = T::lit((n * hw) as f64);
                let xd = self.value(*x).data();
                let gd = dy.data();
                let g = gamma.map(|g| self.value(g).data());
                let mut dx = vec![T::zero(); xd.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s_dy = T::zero();
                    let mut s_dyx = T::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            s_dy += gd[i];
                            s_dyx += gd[i] * (xd[i] - mean[ch]) * rstd[ch];
                        }
                    }
                    dgamma[ch] = s_dyx;
                    dbeta[ch] = s_dy;
                    let gch = g.map_or(T::one(), |g| g[ch]);
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dx[i] = if *batch_stats {
                                let xhat = (xd[i] - mean[ch]) * rstd[ch];
                                gch * rstd[ch] / mn * (mn * gd[i] - s_dy - xhat * s_dyx)
                            } else {
                                gch * rstd[ch] * gd[i]
                            };
                        }
                    }
                }
                acc(*x, Tensor::new(self.shape(*x), dx).unwrap());
                if let Some(gm) = gamma {
                    acc(*gm, Tensor::new(self.shape(*gm), dgamma).unwrap());
                }
                if let Some(bt) = beta {
                    acc(*bt, Tensor::new(self.shape(*bt), dbeta).unwrap());
                }
            }
            Op::Reshape(x) => acc(*x, dy.clone().reshape(self.shape(*x)).unwrap()),
            Op::Permute(x, perm) => acc(*x, kernels::permute(dy, &kernels::inverse_permutation(perm)).unwrap()),
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(dy.shape(), *axis);
                let gd = dy.data();
                let mut offset = 0;
                for &v in xs {
                    let d = self.shape(v)[*axis];
                    if self.requires_grad(v) {
                        let mut out = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            out.extend_from_slice(&gd[(o * total + offset) * inner..(o * total + offset + d) * inner]);
                        }
                        acc(v, Tensor::new(self.shape(v), out).unwrap());
                    }
                    offset += d;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, d, inner) = split_axis(xs, *axis);
                let len = dy.shape()[*axis];
                let mut dx = vec![T::zero(); numel(xs)];
                let gd = dy.data();
                for o in 0..outer {
                    dx[(o * d + start) * inner..(o * d + start + len) * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, Tensor::new(xs, dx).unwrap());
            }
            Op::SumAll(x) => acc(*x, Tensor::full(self.shape(*x), dy.data()[0])),
            Op::MeanAll(x) => {
                let n = T::lit(self.value(*x).numel() as f64);
                acc(*x, Tensor::full(self.shape(*x), dy.data()[0] / n));
            }
            Op::MeanTail { x, from } => {
                let xs = self.shape(*x);
                let inner: usize = xs[*from..].iter().product();
                let scale = T::one() / T::lit(inner as f64);
                let gd = dy.data();
                acc(*x, Tensor::from_fn(xs, |i| gd[i / inner] * scale));
            }
            Op::MaxTail { x, argmax, .. } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                for (&pos, &g) in argmax.iter().zip(dy.data()) {
                    dx.data_mut()[pos] += g;
                }
                acc(*x, dx);
            }
            Op::Resize(x) => acc(*x, kernels::resize_bilinear_backward(self.shape(*x), dy)),
            Op::BceWithLogits { logits, target } => {
                let z = self.value(*logits);
                let n = T::lit(z.numel() as f64);
                let g0 = dy.data()[0];
                let g = z.zip_map(target, |z, t| (kernels::sigmoid(z) - t) * g0 / n).unwrap();
                acc(*logits, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    fn store_with(values: &[(&str, Tensor<f64>)]) -> (ParamStore<f64>, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values.iter().map(|(n, t)| s.push(n.to_string(), t.clone(), ParamKind::Weight)).collect();
        (s, ids)
    }

    #[test]
    fn linear_form_gradient_is_input() {
        let x = Tensor::new(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let (store, ids) = store_with(&[("w", Tensor::new(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap())]);
        let mut g = Graph::new(&store, Mode::Train);
        let w = g.param(ids[0]);
        let xv = g.constant(x.clone());
        let p = g.mul(w, xv).unwrap();
        let loss = g.sum_all(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(ids[0]).unwrap(), &x);
    }

    #[test]
    fn sigmoid_gradient_matches_closed_form() {
        let c = 2.5;
        for &w0 in &[-3.0, -0.2, 0.0, 1.7] {
            let (store, ids) = store_with(&[("w", Tensor::scalar(w0))]);
            let mut g = Graph::new(&store, Mode::Train);
            let w = g.param(ids[0]);
            let s = g.sigmoid(w);
            let loss = g.mul_scalar(s, c);
            let grads = g.backward(loss).unwrap();
            let sig = 1.0 / (1.0 + f64::exp(-w0));
            let want = c * sig * (1.0 - sig);
            assert!((grads.param(ids[0]).unwrap().data()[0] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.input(Tensor::scalar(f64::INFINITY));
        let l = g.mul_scalar(x, 1.0);
        assert!(matches!(g.backward(l), Err(NumericsError::NonFiniteLoss(_))));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let (mut store, ids) = store_with(&[("a", Tensor::scalar(1.0)), ("b", Tensor::scalar(2.0))]);
        store.get_mut(ids[0]).frozen = true;
        let mut g = Graph::new(&store, Mode::Train);
        let a = g.param(ids[0]);
        let b = g.param(ids[1]);
        let p = g.mul(a, b).unwrap();
        let grads = g.backward(p).unwrap();
        assert!(grads.param(ids[0]).is_none());
        assert_eq!(grads.param(ids[1]).unwrap().data(), &[1.0]);
    }

    #[test]
    fn reused_node_accumulates() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.input(Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[7.0]);
    }
}
