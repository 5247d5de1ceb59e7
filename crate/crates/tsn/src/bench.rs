//! Kernel throughput of the two streams and the division module for a
//! given memory size. Times are relative stream costs on this machine.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsn_core::instance_stream::{unpack_head, HEAD_PARAMS};
use tsn_core::{ops, Graph, Tensor};

use crate::error::{Result, TsnError};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub kernel: &'static str,
    pub stream: &'static str,
    pub micros: f64,
}

/// Mean time of `f` over enough repetitions to fill about 50 ms.
fn time(mut f: impl FnMut()) -> f64 {
    f();
    let mut reps = 1usize;
    loop {
        let start = Instant::now();
        for _ in 0..reps {
            f();
        }
        let s = start.elapsed().as_secs_f64();
        if s > 0.05 || reps >= 1 << 20 {
            return s * 1e6 / reps as f64;
        }
        reps *= 4;
    }
}

/// Times the per-query kernels for `hw` query positions against
/// `mem_frames` memory frames of `hw` positions each.
pub fn run_bench(mem_frames: usize, hw: usize, key_dim: usize, value_dim: usize, topk: usize) -> Result<Vec<BenchRow>> {
    if mem_frames == 0 || hw == 0 {
        return Err(TsnError::Input("bench needs at least one memory frame and one position".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut rand = |shape: &[usize]| Tensor::<f32>::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let n = mem_frames * hw;
    let (kq, km, vm) = (rand(&[hw, key_dim]), rand(&[n, key_dim]), rand(&[n, value_dim]));
    let feats = rand(&[hw, 10]);
    let thetas: Vec<Tensor<f32>> = (0..mem_frames).map(|_| rand(&[1, HEAD_PARAMS])).collect();
    let (fa, fb, wmap) = (rand(&[hw, value_dim]), rand(&[hw, value_dim]), rand(&[hw, 1]).map(|v| 0.5 + 0.4 * v));

    let mut rows = Vec::new();
    let mut add = |kernel, stream, micros| rows.push(BenchRow { kernel, stream, micros });
    let scale = -1.0 / key_dim as f32;
    let logits = |kq: &Tensor<f32>| -> tsn_core::Result<Tensor<f32>> { Ok(ops::scale(&ops::pairwise_sqdist(kq, &km)?, scale)) };
    let s = logits(&kq)?;
    let a = ops::softmax_rows(&s)?;
    let heads = thetas.iter().map(unpack_head).collect::<tsn_core::Result<Vec<_>>>()?;

    let mut err: Option<tsn_core::Error> = None;
    let mut keep = |r: tsn_core::Result<Tensor<f32>>| {
        if let Err(e) = r {
            err.get_or_insert(e);
        }
    };
    add("affinity (dense)", "pixel", time(|| keep(logits(&kq).and_then(|s| ops::softmax_rows(&s)))));
    add("affinity (top-k)", "pixel", time(|| keep(logits(&kq).and_then(|s| ops::softmax_topk_rows(&s, topk)))));
    add("read value", "pixel", time(|| keep(ops::matmul(&a, &vm))));
    add("aggregate key", "division", time(|| keep(ops::matmul(&a, &km))));
    add(
        "routing",
        "division",
        time(|| {
            keep(ops::matmul(&a, &km).and_then(|rk| {
                let r = ops::sub(&rk, &kq)?;
                let d = ops::sum_cols(&ops::mul(&r, &r)?)?;
                Ok(ops::sigmoid(&ops::scale(&d, 1.0 / key_dim as f32)))
            }))
        }),
    );
    add(
        "segmentation heads",
        "instance",
        time(|| {
            for h in &heads {
                keep(
                    ops::linear(&feats, &h.w1, &h.b1)
                        .and_then(|x| ops::linear(&ops::relu(&x), &h.w2, &h.b2))
                        .and_then(|x| ops::linear(&ops::relu(&x), &h.w3, &h.b3)),
                );
            }
        }),
    );
    add(
        "fuse",
        "fusion",
        time(|| {
            let mut g = Graph::new();
            let (w, x, y) = (g.constant(wmap.clone()), g.constant(fa.clone()), g.constant(fb.clone()));
            keep(g.fuse(w, x, y).map(|f| g.value(f).clone()));
        }),
    );
    match err {
        Some(e) => Err(e.into()),
        None => Ok(rows),
    }
}

/// Plain-text table with each kernel's share of the dense pixel stream.
pub fn format_table(rows: &[BenchRow], mem_frames: usize, hw: usize) -> String {
    let pixel: f64 = rows
        .iter()
        .filter(|r| r.kernel == "affinity (dense)" || r.kernel == "read value")
        .map(|r| r.micros)
        .sum();
    let mut s = format!("memory frames {mem_frames}, positions per frame {hw}\n");
    s += &format!("{:<22} {:<10} {:>12} {:>14}\n", "kernel", "stream", "µs/call", "vs pixel stream");
    for r in rows {
        s += &format!("{:<22} {:<10} {:>12.1} {:>13.2}x\n", r.kernel, r.stream, r.micros, r.micros / pixel.max(1e-9));
    }
    s
}
