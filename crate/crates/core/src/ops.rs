//! Forward kernels for the differentiable primitives, plus the backward
//! kernels that are too large to inline in the tape.
//!
//! Conventions: matrices are `rows × cols`; images and grid features are
//! `h × w × c`; convolution kernels are `kh × kw × cin × cout`; linear
//! weights are `cin × cout`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", format!("inner extents {k} vs {k2}")));
    }
    let mut out = vec![T::zero(); m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `out += a · b` over raw row-major buffers.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` where `b` is `n × k`.
pub(crate) fn matmul_bt_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out += aᵀ · b` where `a` is `k × m` and `b` is `k × n`.
pub(crate) fn matmul_at_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = x.dims2("softmax_rows")?;
    let mut out = x.data().to_vec();
    for i in 0..m {
        softmax_in_place(&mut out[i * n..(i + 1) * n]);
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Indices of the `k` largest entries of `row`, ties resolved toward the
/// lowest index, returned in ascending index order.
pub fn topk_indices<T: Scalar>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    if k < row.len() {
        let cmp = |&a: &usize, &b: &usize| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        };
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
        idx.sort_unstable();
    }
    idx
}

/// Row softmax restricted to each row's `k` largest logits; the remaining
/// entries are exactly zero. With `k >= cols` this is [`softmax_rows`].
pub fn softmax_topk_rows<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (m, n) = x.dims2("softmax_topk_rows")?;
    if k == 0 {
        return Err(Error::dim("softmax_topk_rows", "k must be at least 1"));
    }
    if k >= n {
        return softmax_rows(x);
    }
    let mut out = vec![T::zero(); m * n];
    let mut kept = Vec::with_capacity(k);
    for i in 0..m {
        let row = &x.data()[i * n..(i + 1) * n];
        let keep = topk_indices(row, k);
        kept.clear();
        kept.extend(keep.iter().map(|&j| row[j]));
        softmax_in_place(&mut kept);
        for (&j, &v) in keep.iter().zip(&kept) {
            out[i * n + j] = v;
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `out[p][q] = Σ_c (q[p][c] − k[q][c])²`, evaluated by direct differences
/// so that identical rows give exactly zero.
pub fn pairwise_sqdist<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, c) = q.dims2("pairwise_sqdist")?;
    let (n, c2) = k.dims2("pairwise_sqdist")?;
    if c != c2 {
        return Err(Error::dim("pairwise_sqdist", format!("feature extents {c} vs {c2}")));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let qi = &q.data()[i * c..(i + 1) * c];
        for j in 0..n {
            let kj = &k.data()[j * c..(j + 1) * c];
            let mut s = T::zero();
            for (&a, &b) in qi.iter().zip(kj) {
                let d = a - b;
                s += d * d;
            }
            out[i * n + j] = s;
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

fn check_bias<T: Scalar>(op: &'static str, b: &Tensor<T>, cout: usize) -> Result<()> {
    if b.len() != cout || b.rank() != 1 {
        return Err(Error::dim(op, format!("bias shape {:?}, expected [{cout}]", b.shape())));
    }
    Ok(())
}

/// Row-wise affine map `x · w + b`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, cin) = x.dims2("linear")?;
    let (cin2, cout) = w.dims2("linear")?;
    if cin != cin2 {
        return Err(Error::dim("linear", format!("input width {cin} vs weight rows {cin2}")));
    }
    check_bias("linear", b, cout)?;
    let mut out = Vec::with_capacity(m * cout);
    for _ in 0..m {
        out.extend_from_slice(b.data());
    }
    matmul_into(x.data(), w.data(), &mut out, m, cin, cout);
    Ok(Tensor::from_parts(vec![m, cout], out))
}

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let (h, w, cin) = x.dims3("conv2d")?;
        let (kh, kw, kcin, cout) = match kernel.shape() {
            &[a, b, c, d] => (a, b, c, d),
            s => return Err(Error::dim("conv2d", format!("kernel must be kh×kw×cin×cout, got {s:?}"))),
        };
        if kcin != cin {
            return Err(Error::dim("conv2d", format!("input channels {cin} vs kernel {kcin}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::dim("conv2d", format!("kernel extents must be odd, got {kh}×{kw}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be at least 1"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::dim("conv2d", format!("{h}×{w} input with pad {pad} is smaller than the kernel")));
        }
        Ok(ConvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Input coordinate for output coordinate `o` and tap `t`, if inside the image.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let s = (o * self.stride + t) as isize - self.pad as isize;
        (s >= 0 && (s as usize) < extent).then_some(s as usize)
    }
}

/// Zero-padded cross-correlation. The output extent is
/// `⌊(h + 2·pad − kh) / stride⌋ + 1` per axis.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, kernel, stride, pad)?;
    check_bias("conv2d", b, g.cout)?;
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = Vec::with_capacity(g.oh * g.ow * g.cout);
    for _ in 0..g.oh * g.ow {
        out.extend_from_slice(b.data());
    }
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o = &mut out[(oy * g.ow + ox) * g.cout..(oy * g.ow + ox + 1) * g.cout];
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xin = &xd[(iy * g.w + ix) * g.cin..(iy * g.w + ix + 1) * g.cin];
                    let kbase = (ky * g.kw + kx) * g.cin * g.cout;
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv == T::zero() {
                            continue;
                        }
                        let krow = &kd[kbase + ci * g.cout..kbase + (ci + 1) * g.cout];
                        for (ov, &kv) in o.iter_mut().zip(krow) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.oh, g.ow, g.cout], out))
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad: &Tensor<T>,
    g: ConvGeom,
    need_dx: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (xd, kd, gd) = (x.data(), kernel.data(), grad.data());
    let mut dx = vec![T::zero(); xd.len()];
    let mut dk = vec![T::zero(); kd.len()];
    let mut db = vec![T::zero(); g.cout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let go = &gd[(oy * g.ow + ox) * g.cout..(oy * g.ow + ox + 1) * g.cout];
            for (d, &v) in db.iter_mut().zip(go) {
                *d += v;
            }
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xoff = (iy * g.w + ix) * g.cin;
                    let kbase = (ky * g.kw + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        if need_dx {
                            let krow = &kd[kbase + ci * g.cout..kbase + (ci + 1) * g.cout];
                            let mut s = T::zero();
                            for (&kv, &gv) in krow.iter().zip(go) {
                                s += kv * gv;
                            }
                            dx[xoff + ci] += s;
                        }
                        let xv = xd[xoff + ci];
                        if xv != T::zero() {
                            let dkrow = &mut dk[kbase + ci * g.cout..kbase + (ci + 1) * g.cout];
                            for (dkv, &gv) in dkrow.iter_mut().zip(go) {
                                *dkv += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(kernel.shape().to_vec(), dk),
        Tensor::from_parts(vec![g.cout], db),
    )
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn zip_with<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn scale<T: Scalar>(x: &Tensor<T>, s: T) -> Tensor<T> {
    x.map(|v| v * s)
}

/// Concatenates along the last (channel) axis; all leading extents must agree.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::dim("concat_channels", "no inputs"))?;
    let lead = &first.shape()[..first.rank() - 1];
    let outer = first.outer();
    let mut total = 0;
    for p in parts {
        if p.rank() != first.rank() || &p.shape()[..p.rank() - 1] != lead {
            return Err(Error::dim(
                "concat_channels",
                format!("{:?} vs {:?}", p.shape(), first.shape()),
            ));
        }
        total += p.channels();
    }
    let mut out = Vec::with_capacity(outer * total);
    for i in 0..outer {
        for p in parts {
            let c = p.channels();
            out.extend_from_slice(&p.data()[i * c..(i + 1) * c]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok(Tensor::from_parts(shape, out))
}

/// Source taps of one output coordinate for align-corners-false
/// interpolation: `(i0, i1, weight of i1)`.
#[inline]
fn bilinear_taps(o: usize, factor: usize, extent: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
    let i0 = (libm::floor(src) as usize).min(extent - 1);
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear upsampling by an integer factor (align-corners false, edge clamped).
pub fn bilinear_upsample<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (h, w, c) = x.dims3("bilinear_upsample")?;
    if !(factor == 2 || factor == 4) {
        return Err(Error::dim("bilinear_upsample", format!("factor must be 2 or 4, got {factor}")));
    }
    let (oh, ow) = (h * factor, w * factor);
    let xd = x.data();
    let mut out = vec![T::zero(); oh * ow * c];
    for oy in 0..oh {
        let (y0, y1, wy) = bilinear_taps(oy, factor, h);
        let wy = T::from_f64(wy);
        for ox in 0..ow {
            let (x0, x1, wx) = bilinear_taps(ox, factor, w);
            let wx = T::from_f64(wx);
            let o = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for (ch, ov) in o.iter_mut().enumerate() {
                let v00 = xd[(y0 * w + x0) * c + ch];
                let v01 = xd[(y0 * w + x1) * c + ch];
                let v10 = xd[(y1 * w + x0) * c + ch];
                let v11 = xd[(y1 * w + x1) * c + ch];
                let top = v00 + (v01 - v00) * wx;
                let bot = v10 + (v11 - v10) * wx;
                *ov = top + (bot - top) * wy;
            }
        }
    }
    Ok(Tensor::from_parts(vec![oh, ow, c], out))
}

pub(crate) fn bilinear_upsample_backward<T: Scalar>(grad: &Tensor<T>, in_shape: &[usize], factor: usize) -> Tensor<T> {
    let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (h * factor, w * factor);
    let gd = grad.data();
    let mut dx = vec![T::zero(); h * w * c];
    for oy in 0..oh {
        let (y0, y1, wy) = bilinear_taps(oy, factor, h);
        let wy = T::from_f64(wy);
        for ox in 0..ow {
            let (x0, x1, wx) = bilinear_taps(ox, factor, w);
            let wx = T::from_f64(wx);
            let one = T::one();
            let w00 = (one - wy) * (one - wx);
            let w01 = (one - wy) * wx;
            let w10 = wy * (one - wx);
            let w11 = wy * wx;
            for ch in 0..c {
                let g = gd[(oy * ow + ox) * c + ch];
                dx[(y0 * w + x0) * c + ch] += w00 * g;
                dx[(y0 * w + x1) * c + ch] += w01 * g;
                dx[(y1 * w + x0) * c + ch] += w10 * g;
                dx[(y1 * w + x1) * c + ch] += w11 * g;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

/// Multiplies each row of `x` (`r × c`) by the matching entry of `w` (`r × 1`).
pub fn mul_rows<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2("mul_rows")?;
    if w.shape() != [r, 1] {
        return Err(Error::dim("mul_rows", format!("weights {:?} for {r} rows", w.shape())));
    }
    let mut out = x.data().to_vec();
    for i in 0..r {
        let s = w.data()[i];
        for v in &mut out[i * c..(i + 1) * c] {
            *v = *v * s;
        }
    }
    Ok(Tensor::from_parts(vec![r, c], out))
}

/// Per-row sum, `r × c → r × 1`.
pub fn sum_cols<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2("sum_cols")?;
    let data = (0..r).map(|i| x.data()[i * c..(i + 1) * c].iter().copied().sum()).collect();
    Ok(Tensor::from_parts(vec![r, 1], data))
}

/// Column means, `r × c → 1 × c`.
pub fn mean_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2("mean_rows")?;
    let mut out = vec![T::zero(); c];
    for i in 0..r {
        for (o, &v) in out.iter_mut().zip(&x.data()[i * c..(i + 1) * c]) {
            *o += v;
        }
    }
    let inv = T::one() / T::from_f64(r as f64);
    for o in &mut out {
        *o = *o * inv;
    }
    Ok(Tensor::from_parts(vec![1, c], out))
}
