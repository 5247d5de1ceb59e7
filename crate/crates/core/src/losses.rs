//! Training losses: bootstrapped binary cross-entropy on logits and the
//! soft mask IoU loss `1 − Σ min(P, G) / Σ max(P, G)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};
use crate::ops::sigmoid_scalar;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check_pair<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mask IoU loss. Returns 0 when both maps are identically zero.
pub fn miou_loss<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>) -> Result<T> {
    check_pair("miou_loss", p, g)?;
    let (inter, union) = soft_iou_terms(p.data(), g.data());
    if union == T::zero() {
        return Ok(T::zero());
    }
    Ok(T::one() - inter / union)
}

fn soft_iou_terms<T: Scalar>(p: &[T], g: &[T]) -> (T, T) {
    let mut inter = T::zero();
    let mut union = T::zero();
    for (&pv, &gv) in p.iter().zip(g) {
        inter += pv.min(gv);
        union += pv.max(gv);
    }
    (inter, union)
}

/// Gradient of [`miou_loss`] with respect to `p`, scaled by `upstream`.
/// Ties `p == g` split the subgradient evenly between min and max.
pub(crate) fn miou_loss_grad<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>, upstream: T) -> Tensor<T> {
    let (inter, union) = soft_iou_terms(p.data(), g.data());
    if union == T::zero() {
        return Tensor::zeros(p.shape());
    }
    let half = T::from_f64(0.5);
    let u2 = union * union;
    let data = p
        .data()
        .iter()
        .zip(g.data())
        .map(|(&pv, &gv)| {
            let (di, du) = match pv.partial_cmp(&gv) {
                Some(Ordering::Less) => (T::one(), T::zero()),
                Some(Ordering::Greater) => (T::zero(), T::one()),
                _ => (half, half),
            };
            -(di * union - inter * du) / u2 * upstream
        })
        .collect();
    Tensor::new(p.shape(), data).expect("shape preserved")
}

/// Per-pixel binary cross-entropy of `logit` against `target`, stable for
/// large magnitudes.
#[inline]
pub fn bce_with_logit<T: Scalar>(logit: T, target: T) -> T {
    let zero = T::zero();
    logit.max(zero) - logit * target + (T::one() + (-logit.abs()).exp()).ln()
}

/// Number of pixels kept by bootstrapping: `⌈frac·n⌉`, at least one.
pub fn bootstrap_count(frac: f64, n: usize) -> usize {
    let k = libm::ceil(frac * n as f64 - 1e-9) as usize;
    k.clamp(1, n)
}

/// Bootstrapped BCE: mean over the `⌈frac·|Ω|⌉` highest-loss pixels.
pub fn bce_bootstrap<T: Scalar>(logits: &Tensor<T>, g: &Tensor<T>, frac: f64) -> Result<T> {
    bce_bootstrap_select(logits, g, frac).map(|(l, _)| l)
}

/// Loss value plus the kept pixel indices (highest loss first, ties toward
/// the lower index).
pub(crate) fn bce_bootstrap_select<T: Scalar>(
    logits: &Tensor<T>,
    g: &Tensor<T>,
    frac: f64,
) -> Result<(T, Vec<usize>)> {
    check_pair("bce_bootstrap", logits, g)?;
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::Input(format!("bootstrap fraction must be in (0, 1], got {frac}")));
    }
    let per_pixel: Vec<T> = logits
        .data()
        .iter()
        .zip(g.data())
        .map(|(&z, &y)| bce_with_logit(z, y))
        .collect();
    let k = bootstrap_count(frac, per_pixel.len());
    let picked = if k == per_pixel.len() {
        (0..k).collect()
    } else {
        let mut idx: Vec<usize> = (0..per_pixel.len()).collect();
        idx.sort_by(|&a, &b| {
            per_pixel[b]
                .partial_cmp(&per_pixel[a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx.truncate(k);
        idx
    };
    let sum: T = picked.iter().map(|&i| per_pixel[i]).sum();
    Ok((sum / T::from_f64(k as f64), picked))
}

pub(crate) fn bce_bootstrap_grad<T: Scalar>(
    logits: &Tensor<T>,
    g: &Tensor<T>,
    picked: &[usize],
    upstream: T,
) -> Tensor<T> {
    let mut d = vec![T::zero(); logits.len()];
    let scale = upstream / T::from_f64(picked.len() as f64);
    for &i in picked {
        d[i] = (sigmoid_scalar(logits.data()[i]) - g.data()[i]) * scale;
    }
    Tensor::new(logits.shape(), d).expect("shape preserved")
}

/// Bootstrap fraction schedule: 1.0 for the first 20% of training, then
/// linear to 0.25 at the final iteration.
pub fn bootstrap_fraction(iteration: usize, total: usize) -> f64 {
    let warm = total / 5;
    if iteration < warm || total <= warm + 1 {
        return 1.0;
    }
    let t = (iteration - warm) as f64 / (total - 1 - warm) as f64;
    1.0 - 0.75 * t.min(1.0)
}
