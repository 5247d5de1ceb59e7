//! Region similarity J, boundary F and the emergent-region J.
//!
//! Masks are row-major `h × w` boolean slices.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

fn check(pred: &[bool], gt: &[bool], h: usize, w: usize) -> Result<()> {
    if pred.len() != h * w || gt.len() != h * w {
        return Err(Error::dim(
            "metric",
            alloc::format!("masks of {} and {} pixels for {h}×{w}", pred.len(), gt.len()),
        ));
    }
    Ok(())
}

/// Intersection over union; 1 when both masks are empty.
pub fn region_j(pred: &[bool], gt: &[bool], h: usize, w: usize) -> Result<f64> {
    check(pred, gt, h, w)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// J restricted to the pixels flagged in `region`. `None` when the region
/// is empty.
pub fn region_j_within(pred: &[bool], gt: &[bool], region: &[bool], h: usize, w: usize) -> Result<Option<f64>> {
    check(pred, gt, h, w)?;
    check(region, gt, h, w)?;
    if !region.iter().any(|&r| r) {
        return Ok(None);
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for ((&p, &g), _) in pred.iter().zip(gt).zip(region).filter(|(_, &r)| r) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(Some(if union == 0 { 1.0 } else { inter as f64 / union as f64 }))
}

/// Foreground pixels with at least one 4-connected neighbour outside the
/// mask (the image border counts as outside).
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize];
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1)) {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    out
}

/// Square (Chebyshev) dilation by `r` pixels.
pub fn dilate(mask: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    rows[y * w + xx] = true;
                }
            }
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if rows[y * w + x] {
                for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                    out[yy * w + x] = true;
                }
            }
        }
    }
    out
}

/// Boundary tolerance: `⌈0.008 · image diagonal⌉` pixels.
pub fn boundary_tolerance(h: usize, w: usize) -> usize {
    libm::ceil(0.008 * libm::sqrt((h * h + w * w) as f64)) as usize
}

/// Boundary F-measure with matching tolerance `tol`; 1 when both masks are
/// empty, 0 when exactly one is.
pub fn boundary_f(pred: &[bool], gt: &[bool], h: usize, w: usize, tol: usize) -> Result<f64> {
    check(pred, gt, h, w)?;
    let (bp, bg) = (boundary(pred, h, w), boundary(gt, h, w));
    let (np, ng) = (bp.iter().filter(|&&b| b).count(), bg.iter().filter(|&&b| b).count());
    match (np, ng) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let (dp, dg) = (dilate(&bp, h, w, tol), dilate(&bg, h, w, tol));
    let matched_p = bp.iter().zip(&dg).filter(|(&b, &d)| b && d).count();
    let matched_g = bg.iter().zip(&dp).filter(|(&b, &d)| b && d).count();
    let precision = matched_p as f64 / np as f64;
    let recall = matched_g as f64 / ng as f64;
    Ok(if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) })
}

pub fn jf_mean(j: f64, f: f64) -> f64 {
    (j + f) / 2.0
}

/// Per-frame scores of one object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameScore {
    pub j: f64,
    pub f: f64,
    pub j_emergent: Option<f64>,
}

pub fn score_frame(pred: &[bool], gt: &[bool], emergent: &[bool], h: usize, w: usize) -> Result<FrameScore> {
    Ok(FrameScore {
        j: region_j(pred, gt, h, w)?,
        f: boundary_f(pred, gt, h, w, boundary_tolerance(h, w))?,
        j_emergent: region_j_within(pred, gt, emergent, h, w)?,
    })
}

/// Means over a set of frame scores; J_emergent averages only the frames
/// that have emergent pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Summary {
    pub j: f64,
    pub f: f64,
    pub jf: f64,
    pub j_emergent: Option<f64>,
    pub frames: usize,
    pub emergent_frames: usize,
}

pub fn summarize<'a>(scores: impl IntoIterator<Item = &'a FrameScore>) -> Summary {
    let mut s = Summary::default();
    let mut je = 0.0;
    for sc in scores {
        s.j += sc.j;
        s.f += sc.f;
        s.frames += 1;
        if let Some(v) = sc.j_emergent {
            je += v;
            s.emergent_frames += 1;
        }
    }
    if s.frames > 0 {
        s.j /= s.frames as f64;
        s.f /= s.frames as f64;
        s.jf = jf_mean(s.j, s.f);
    }
    if s.emergent_frames > 0 {
        s.j_emergent = Some(je / s.emergent_frames as f64);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> Vec<bool> {
        (0..h * w).map(|i| (y0..y1).contains(&(i / w)) && (x0..x1).contains(&(i % w))).collect()
    }

    #[test]
    fn j_examples() {
        let gt = rect(4, 4, 0, 0, 2, 4);
        let pred = rect(4, 4, 0, 0, 4, 2);
        assert_eq!(region_j(&pred, &gt, 4, 4).unwrap(), 4.0 / 12.0);
        let empty = vec![false; 16];
        assert_eq!(region_j(&empty, &empty, 4, 4).unwrap(), 1.0);
        assert_eq!(region_j(&gt, &empty, 4, 4).unwrap(), 0.0);
        assert!(region_j(&gt[..15], &gt, 4, 4).is_err());
    }

    #[test]
    fn boundary_of_square_is_its_ring() {
        let m = rect(5, 5, 1, 1, 4, 4);
        let b = boundary(&m, 5, 5);
        assert_eq!(b.iter().filter(|&&v| v).count(), 8);
        assert!(!b[2 * 5 + 2]);
        let full = vec![true; 9];
        assert_eq!(boundary(&full, 3, 3).iter().filter(|&&v| v).count(), 8);
    }

    #[test]
    fn f_examples() {
        let m = rect(10, 10, 2, 2, 7, 7);
        assert_eq!(boundary_f(&m, &m, 10, 10, 1).unwrap(), 1.0);
        let empty = vec![false; 100];
        assert_eq!(boundary_f(&empty, &empty, 10, 10, 1).unwrap(), 1.0);
        assert_eq!(boundary_f(&m, &empty, 10, 10, 1).unwrap(), 0.0);
        // Shifted by one pixel: fully matched within tolerance 1, not 0.
        let shifted = rect(10, 10, 2, 3, 7, 8);
        assert_eq!(boundary_f(&m, &shifted, 10, 10, 1).unwrap(), 1.0);
        assert!(boundary_f(&m, &shifted, 10, 10, 0).unwrap() < 1.0);
    }

    #[test]
    fn tolerance_from_diagonal() {
        assert_eq!(boundary_tolerance(64, 64), 1);
        assert_eq!(boundary_tolerance(480, 854), 8);
    }

    #[test]
    fn emergent_j_and_summary() {
        let gt = rect(4, 4, 0, 0, 4, 2);
        let pred = rect(4, 4, 0, 0, 2, 2);
        let region = rect(4, 4, 2, 0, 4, 4);
        assert_eq!(region_j_within(&pred, &gt, &region, 4, 4).unwrap(), Some(0.0));
        assert_eq!(region_j_within(&pred, &gt, &[false; 16], 4, 4).unwrap(), None);
        let a = FrameScore { j: 1.0, f: 0.5, j_emergent: None };
        let b = FrameScore { j: 0.5, f: 0.5, j_emergent: Some(0.25) };
        let s = summarize(&[a, b]);
        assert_eq!((s.j, s.f, s.jf, s.j_emergent, s.emergent_frames), (0.75, 0.5, 0.625, Some(0.25), 1));
    }
}
