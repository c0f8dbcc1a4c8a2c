//! Forward and backward kernels on raw tensors. The graph in [`crate::graph`] wires these
//! together; they are also usable directly for fixed (non-trainable) filtering.
//!
//! Convolution here is cross-correlation: `out[y, x] = Σ w[ky, kx] · in[y·s + ky − p, x·s + kx − p]`.
//! Kernels are stored in exactly the orientation they are applied in, nothing is flipped.

use crate::error::{NumericsError, Result};
use crate::real::{gemm, MatView, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize, groups: usize) -> Result<Self> {
        let mismatch = || NumericsError::ShapeMismatch { op: "conv2d", lhs: x.to_vec(), rhs: w.to_vec() };
        let (&[n, ci, h, wd], &[co, cig, kh, kw]) = (x, w) else {
            return Err(mismatch());
        };
        if stride == 0 || groups == 0 || ci % groups != 0 || co % groups != 0 || cig * groups != ci {
            return Err(mismatch());
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(mismatch());
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        Ok(Self { n, ci, h, w: wd, co, kh, kw, stride, pad, groups, ho, wo })
    }

    fn cig(&self) -> usize {
        self.ci / self.groups
    }

    fn cog(&self) -> usize {
        self.co / self.groups
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.co, self.ho, self.wo]
    }
}

/// Unfolds `channels` input planes (each `h×w`) into a `[channels·kh·kw, ho·wo]` matrix.
fn im2col<T: Real>(input: &[T], channels: usize, g: &ConvGeom, cols: &mut [T]) {
    let hw_out = g.ho * g.wo;
    for c in 0..channels {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into input planes.
fn col2im_add<T: Real>(cols: &[T], channels: usize, g: &ConvGeom, input: &mut [T]) {
    let hw_out = g.ho * g.wo;
    for c in 0..channels {
        let plane = &mut input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad, groups)?;
    if let Some(b) = b {
        if b.numel() != g.co {
            return Err(NumericsError::ShapeMismatch { op: "conv2d bias", lhs: w.shape().to_vec(), rhs: b.shape().to_vec() });
        }
    }
    let (cig, cog) = (g.cig(), g.cog());
    let k = cig * g.kh * g.kw;
    let hw_in = g.h * g.w;
    let hw_out = g.ho * g.wo;
    let mut out = vec![T::zero(); g.n * g.co * hw_out];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * hw_out] };
    let xd = x.data();
    let wd = w.data();
    for n in 0..g.n {
        for grp in 0..g.groups {
            let in_block = &xd[(n * g.ci + grp * cig) * hw_in..(n * g.ci + (grp + 1) * cig) * hw_in];
            let w_block = &wd[grp * cog * k..(grp + 1) * cog * k];
            let out_block = &mut out[(n * g.co + grp * cog) * hw_out..(n * g.co + (grp + 1) * cog) * hw_out];
            let cols_view = if g.is_pointwise() {
                MatView::new(in_block, k, hw_out)
            } else {
                im2col(in_block, cig, &g, &mut cols);
                MatView::new(&cols, k, hw_out)
            };
            gemm(MatView::new(w_block, cog, k), cols_view, out_block, T::one(), T::zero());
        }
        if let Some(b) = b {
            for (c, &bv) in b.data().iter().enumerate() {
                for v in &mut out[(n * g.co + c) * hw_out..(n * g.co + c + 1) * hw_out] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(&g.out_shape(), out)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    groups: usize,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad, groups).expect("validated in forward");
    let (cig, cog) = (g.cig(), g.cog());
    let k = cig * g.kh * g.kw;
    let hw_in = g.h * g.w;
    let hw_out = g.ho * g.wo;
    let (need_dx, need_dw, need_db) = need;
    let mut dx = if need_dx { vec![T::zero(); x.numel()] } else { Vec::new() };
    let mut dw = if need_dw { vec![T::zero(); w.numel()] } else { Vec::new() };
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * hw_out] };
    let mut dcols = if g.is_pointwise() || !need_dx { Vec::new() } else { vec![T::zero(); k * hw_out] };
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    for n in 0..g.n {
        for grp in 0..g.groups {
            let in_range = (n * g.ci + grp * cig) * hw_in..(n * g.ci + (grp + 1) * cig) * hw_in;
            let w_range = grp * cog * k..(grp + 1) * cog * k;
            let dy_block = &dyd[(n * g.co + grp * cog) * hw_out..(n * g.co + (grp + 1) * cog) * hw_out];
            let dy_view = MatView::new(dy_block, cog, hw_out);
            if need_dw {
                let cols_view = if g.is_pointwise() {
                    MatView::new(&xd[in_range.clone()], k, hw_out)
                } else {
                    im2col(&xd[in_range.clone()], cig, &g, &mut cols);
                    MatView::new(&cols, k, hw_out)
                };
                gemm(dy_view, cols_view.t(), &mut dw[w_range.clone()], T::one(), T::one());
            }
            if need_dx {
                let w_view = MatView::new(&wd[w_range], cog, k).t();
                if g.is_pointwise() {
                    gemm(w_view, dy_view, &mut dx[in_range], T::one(), T::zero());
                } else {
                    gemm(w_view, dy_view, &mut dcols, T::one(), T::zero());
                    col2im_add(&dcols, cig, &g, &mut dx[in_range]);
                }
            }
        }
    }
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.co];
        for n in 0..g.n {
            for (c, acc) in db.iter_mut().enumerate() {
                *acc += dyd[(n * g.co + c) * hw_out..(n * g.co + c + 1) * hw_out].iter().copied().sum::<T>();
            }
        }
        Tensor::new(&[g.co], db).expect("bias shape")
    });
    ConvGrads {
        dx: need_dx.then(|| Tensor::new(x.shape(), dx).expect("dx shape")),
        dw: need_dw.then(|| Tensor::new(w.shape(), dw).expect("dw shape")),
        db,
    }
}

/// Fixed per-channel (depthwise) filtering with zero padding and stride 1, used for static
/// filters such as blur or high-pass residual kernels. `kernel` is `k×k` with `k` odd.
pub fn filter_planes<T: Real>(x: &Tensor<T>, kernel: &[T], k: usize) -> Result<Tensor<T>> {
    let (_, c, _, _) = x.dims4()?;
    if k % 2 == 0 || kernel.len() != k * k {
        return Err(NumericsError::InvalidShape { shape: vec![k, k], reason: "filter kernel must be square and odd-sized" });
    }
    let weights = Tensor::new(&[c, 1, k, k], (0..c).flat_map(|_| kernel.iter().copied()).collect())?;
    conv2d_forward(x, &weights, None, 1, k / 2, c)
}

/// Bilinear resampling with half-pixel centers (`align_corners = false`).
fn bilinear_taps(out: usize, inp: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn resize_bilinear_forward<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if oh == 0 || ow == 0 {
        return Err(NumericsError::InvalidShape { shape: vec![oh, ow], reason: "resize target must be non-empty" });
    }
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let plane = &xd[p * h * w..(p + 1) * h * w];
        for &(y0, y1, ly) in &ty {
            let ly = T::lit(ly);
            for &(x0, x1, lx) in &tx {
                let lx = T::lit(lx);
                let top = plane[y0 * w + x0] * (T::one() - lx) + plane[y0 * w + x1] * lx;
                let bot = plane[y1 * w + x0] * (T::one() - lx) + plane[y1 * w + x1] * lx;
                out.push(top * (T::one() - ly) + bot * ly);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub fn resize_bilinear_backward<T: Real>(in_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (_, _, oh, ow) = dy.dims4().expect("rank 4");
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut dx = vec![T::zero(); n * c * h * w];
    let dyd = dy.data();
    for p in 0..n * c {
        let plane = &mut dx[p * h * w..(p + 1) * h * w];
        let src = &dyd[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::lit(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::lit(lx);
                let g = src[oy * ow + ox];
                plane[y0 * w + x0] += g * (T::one() - ly) * (T::one() - lx);
                plane[y0 * w + x1] += g * (T::one() - ly) * lx;
                plane[y1 * w + x0] += g * ly * (T::one() - lx);
                plane[y1 * w + x1] += g * ly * lx;
            }
        }
    }
    Tensor::new(in_shape, dx).expect("shape")
}

/// Numpy-style broadcast of two shapes (right aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Element strides of `shape` viewed inside `out_shape` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output element with the matching linear offsets into `a` and `b`.
pub fn for_each_broadcast(out_shape: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let sa = broadcast_strides(a, out_shape);
    let sb = broadcast_strides(b, out_shape);
    let rank = out_shape.len();
    let total: usize = out_shape.iter().product();
    let inner = out_shape[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut pos = 0;
    while pos < total {
        let mut oa = 0;
        let mut ob = 0;
        for d in 0..rank - 1 {
            oa += idx[d] * sa[d];
            ob += idx[d] * sb[d];
        }
        for j in 0..inner {
            f(pos + j, oa + j * ia_step, ob + j * ib_step);
        }
        pos += inner;
        // advance the outer multi-index
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Sums `grad` (shaped like the broadcast output) down to `shape`.
pub fn sum_to_shape<T: Real>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(shape);
    let gd = grad.data();
    let od = out.data_mut();
    for_each_broadcast(grad.shape(), shape, shape, |o, i, _| od[i] += gd[o]);
    out
}

/// `(outer, dim, inner)` factorization of a shape around axis `axis`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_forward<T: Real>(x: &Tensor<T>, axis: usize, log: bool) -> Tensor<T> {
    let (outer, d, inner) = split_axis(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * d + k) * inner + i;
            let m = (0..d).map(|k| xd[at(k)]).fold(T::neg_infinity(), T::max);
            let z: T = (0..d).map(|k| (xd[at(k)] - m).exp()).sum();
            let lz = z.ln();
            for k in 0..d {
                out[at(k)] = if log { xd[at(k)] - m - lz } else { (xd[at(k)] - m).exp() / z };
            }
        }
    }
    Tensor::new(x.shape(), out).expect("shape")
}

pub fn softmax_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize, log: bool) -> Tensor<T> {
    let (outer, d, inner) = split_axis(y.shape(), axis);
    let (yd, gd) = (y.data(), dy.data());
    let mut dx = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * d + k) * inner + i;
            if log {
                let s: T = (0..d).map(|k| gd[at(k)]).sum();
                for k in 0..d {
                    dx[at(k)] = gd[at(k)] - yd[at(k)].exp() * s;
                }
            } else {
                let s: T = (0..d).map(|k| gd[at(k)] * yd[at(k)]).sum();
                for k in 0..d {
                    dx[at(k)] = yd[at(k)] * (gd[at(k)] - s);
                }
            }
        }
    }
    Tensor::new(y.shape(), dx).expect("shape")
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Generic axis permutation.
pub fn permute<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let shape = x.shape();
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(NumericsError::ShapeMismatch { op: "permute", lhs: shape.to_vec(), rhs: perm.to_vec() });
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let xd = x.data();
    let mut out = Vec::with_capacity(xd.len());
    let mut idx = vec![0usize; rank];
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let total = xd.len();
    while out.len() < total {
        let base: usize = (0..rank - 1).map(|d| idx[d] * strides[d]).sum();
        for j in 0..inner {
            out.push(xd[base + j * inner_stride]);
        }
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Quintuple-loop cross-correlation used as the oracle for the im2col path.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, s: usize, p: usize, groups: usize) -> Tensor<f64> {
        let (n, ci, h, wd) = x.dims4().unwrap();
        let (co, cig, kh, kw) = w.dims4().unwrap();
        let ho = (h + 2 * p - kh) / s + 1;
        let wo = (wd + 2 * p - kw) / s + 1;
        let cog = co / groups;
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        for b_ in 0..n {
            for o in 0..co {
                let grp = o / cog;
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = b.map(|b| b.data()[o]).unwrap_or(0.0);
                        for c in 0..cig {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (y * s + ky) as isize - p as isize;
                                    let ix = (xx * s + kx) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += w.at4(o, c, ky, kx) * x.at4(b_, grp * cig + c, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.set4(b_, o, y, xx, acc);
                    }
                }
            }
        }
        let _ = ci;
        out
    }

    fn lcg(seed: u64) -> impl FnMut(usize) -> f64 {
        let mut s = seed;
        move |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let w = Tensor::from_fn(&[1, 1, 3, 3], lcg(3));
        let y = conv2d_forward(&x, &w, None, 1, 1, 1).unwrap();
        assert_eq!(y, Tensor::zeros(&[1, 1, 4, 4]));
    }

    #[test]
    fn impulse_reproduces_flipped_kernel_under_cross_correlation() {
        // With cross-correlation an impulse at the centre sweeps the kernel in reverse order:
        // out[y, x] = w[2 - y, 2 - x] around the impulse.
        let mut x = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        x.set4(0, 0, 1, 1, 1.0);
        let w = Tensor::new(&[1, 1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let y = conv2d_forward(&x, &w, None, 1, 1, 1).unwrap();
        assert_eq!(y.data(), &[9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn im2col_path_matches_naive_oracle() {
        let x = Tensor::from_fn(&[2, 3, 8, 8], lcg(11));
        for &(co, k, s, p, groups) in &[(4, 3, 1, 1, 1), (6, 5, 2, 2, 3), (3, 1, 1, 0, 1), (3, 3, 1, 1, 3), (2, 7, 4, 3, 1)] {
            let w = Tensor::from_fn(&[co, 3 / groups, k, k], lcg(k as u64 + co as u64));
            let b = Tensor::from_fn(&[co], lcg(5));
            let got = conv2d_forward(&x, &w, Some(&b), s, p, groups).unwrap();
            let want = naive_conv(&x, &w, Some(&b), s, p, groups);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_rejects_mismatched_channels() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        let err = conv2d_forward(&x, &w, None, 1, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn output_size_formula() {
        let g = ConvGeom::new(&[1, 3, 64, 64], &[8, 3, 7, 7], 4, 3, 1).unwrap();
        assert_eq!((g.ho, g.wo), (16, 16));
        let g = ConvGeom::new(&[1, 3, 13, 9], &[8, 3, 3, 3], 2, 1, 1).unwrap();
        assert_eq!((g.ho, g.wo), ((13 + 2 - 3) / 2 + 1, (9 + 2 - 3) / 2 + 1));
    }

    #[test]
    fn resize_identity_and_constant() {
        let x = Tensor::from_fn(&[1, 2, 5, 7], lcg(2));
        let y = resize_bilinear_forward(&x, 5, 7).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-12);
        let c = Tensor::<f64>::full(&[1, 1, 4, 4], 0.3);
        let up = resize_bilinear_forward(&c, 16, 16).unwrap();
        assert!(up.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn broadcast_and_reduce() {
        assert_eq!(broadcast_shape(&[2, 3, 4, 4], &[2, 3, 1, 1]), Some(vec![2, 3, 4, 4]));
        assert_eq!(broadcast_shape(&[3], &[2, 1]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[4, 3]), None);
        let g = Tensor::<f64>::ones(&[2, 3, 4]);
        let r = sum_to_shape(&g, &[3, 1]);
        assert_eq!(r.data(), &[8.0, 8.0, 8.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let p = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.data()[1], x.data()[4]);
        let back = permute(&p, &inverse_permutation(&[2, 0, 1])).unwrap();
        assert_eq!(back, x);
    }
}
