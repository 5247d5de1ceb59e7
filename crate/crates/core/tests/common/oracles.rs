//! Direct loops over each kernel's defining formula. Every check runs
//! `INSTANCES` random f64 cases and returns the largest absolute deviation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsn_core::config::{FusionMode, RoutingForm};
use tsn_core::division_fusion::{aggregate_key, routing, RoutingParams};
use tsn_core::instance_stream::{apply_instance_memory, coord_map, HeadInput, HEAD_PARAMS};
use tsn_core::losses::miou_loss;
use tsn_core::params::{LinearLayer, ParamSet};
use tsn_core::pixel_stream::{affinity, read_topk, read_value, PixelMemory};
use tsn_core::{Graph, ModelConfig, Tensor};

pub const INSTANCES: usize = 120;
pub const TOL: f64 = 1e-10;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5))
}

fn naive_affinity(q: &Tensor<f64>, k: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (m, c) = (q.shape()[0], q.shape()[1]);
    let n = k.shape()[0];
    (0..m)
        .map(|i| {
            let d: Vec<f64> = (0..n)
                .map(|j| (0..c).map(|ch| (q.at2(i, ch) - k.at2(j, ch)).powi(2)).sum())
                .collect();
            let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let e: Vec<f64> = d.iter().map(|v| (-(v - dmin)).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

fn naive_matmul(a: &[Vec<f64>], b: &Tensor<f64>) -> Vec<Vec<f64>> {
    let c = b.shape()[1];
    a.iter()
        .map(|row| (0..c).map(|ch| row.iter().enumerate().map(|(j, w)| w * b.at2(j, ch)).sum()).collect())
        .collect()
}

fn max_diff(t: &Tensor<f64>, rows: &[Vec<f64>]) -> f64 {
    let c = t.shape()[1];
    rows.iter()
        .enumerate()
        .flat_map(|(i, r)| r.iter().enumerate().map(move |(j, v)| (i, j, *v)))
        .map(|(i, j, v)| (t.data()[i * c + j] - v).abs())
        .fold(0.0, f64::max)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Worst deviations of affinity, value read and key aggregation.
pub fn affinity_read_aggregate(seed: u64) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 3];
    for _ in 0..INSTANCES {
        let (m, n, ck, cv) = (rng.random_range(1..9), rng.random_range(1..13), rng.random_range(1..6), rng.random_range(1..6));
        let (q, k, v) = (rand_t(&mut rng, &[m, ck]), rand_t(&mut rng, &[n, ck]), rand_t(&mut rng, &[n, cv]));
        let want = naive_affinity(&q, &k);
        let a = affinity(&q, &k).unwrap();
        worst[0] = worst[0].max(max_diff(&a, &want));

        let rv = read_value(&a, &v).unwrap();
        worst[1] = worst[1].max(max_diff(&rv, &naive_matmul(&want, &v)));

        let mut g = Graph::new();
        let (av, kv) = (g.constant(a.clone()), g.constant(k.clone()));
        let rk = aggregate_key(&mut g, av, kv).unwrap();
        worst[2] = worst[2].max(max_diff(g.value(rk), &naive_matmul(&want, &k)));
    }
    worst
}

pub fn topk_read(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (m, n, c) = (rng.random_range(1..6), rng.random_range(2..15), rng.random_range(1..5));
        let kk = rng.random_range(1..n + 3);
        let (q, keys, vals) = (rand_t(&mut rng, &[m, c]), rand_t(&mut rng, &[n, c]), rand_t(&mut rng, &[n, 3]));
        let mem = PixelMemory::new(keys.clone(), vals.clone(), 1).unwrap();
        let (rv, rk) = read_topk(&q, &mem, kk).unwrap();
        let full = naive_affinity(&q, &keys);
        let trunc: Vec<Vec<f64>> = full
            .iter()
            .map(|row| {
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
                let kept = &order[..kk.min(n)];
                let s: f64 = kept.iter().map(|&j| row[j]).sum();
                (0..n).map(|j| if kept.contains(&j) { row[j] / s } else { 0.0 }).collect()
            })
            .collect();
        worst = worst.max(max_diff(&rv, &naive_matmul(&trunc, &vals)));
        worst = worst.max(max_diff(&rk, &naive_matmul(&trunc, &keys)));
    }
    worst
}

/// Alternates the scalar and channelwise forms.
pub fn routing_map(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let (m, c) = (rng.random_range(1..10), rng.random_range(1..7));
        let cfg = ModelConfig {
            key_dim: c,
            ..ModelConfig::default()
        };
        let mut ps = ParamSet::<f64>::new();
        let rp = RoutingParams::build(&mut ps, &cfg);
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let wc = rand_t(&mut rng, &[c, 1]);
        let bc = rng.random_range(-1.0..1.0);
        ps.set(rp.a, Tensor::full(&[1], a));
        ps.set(rp.b, Tensor::full(&[1], b));
        let chan_w = ps.find("route.chan.w").unwrap();
        let chan_b = ps.find("route.chan.b").unwrap();
        ps.set(chan_w, wc.clone());
        ps.set(chan_b, Tensor::full(&[1], bc));
        let (rk, kq) = (rand_t(&mut rng, &[m, c]), rand_t(&mut rng, &[m, c]));
        let form = if i % 2 == 0 { RoutingForm::Scalar } else { RoutingForm::Channelwise };

        let mut g = Graph::new();
        let p = ps.bind(&mut g);
        let (rkv, kqv) = (g.constant(rk.clone()), g.constant(kq.clone()));
        let w = routing(&mut g, &p, &rp, form, FusionMode::Routing, rkv, kqv).unwrap();
        let want: Vec<Vec<f64>> = (0..m)
            .map(|r| {
                let sq: Vec<f64> = (0..c).map(|ch| (rk.at2(r, ch) - kq.at2(r, ch)).powi(2)).collect();
                let z = match form {
                    RoutingForm::Scalar => a * sq.iter().sum::<f64>() + b,
                    RoutingForm::Channelwise => sq.iter().zip(wc.data()).map(|(s, w)| s * w).sum::<f64>() + bc,
                };
                vec![sigmoid(z)]
            })
            .collect();
        worst = worst.max(max_diff(g.value(w), &want));
    }
    worst
}

/// One dynamic head by hand: two ReLU layers of width 8 and a scalar output.
fn naive_head(theta: &[f64], x: &[f64]) -> f64 {
    let layer = |input: &[f64], w: usize, b: usize, cin: usize, cout: usize, relu: bool| -> Vec<f64> {
        (0..cout)
            .map(|o| {
                let s = theta[b + o] + (0..cin).map(|i| input[i] * theta[w + i * cout + o]).sum::<f64>();
                if relu {
                    s.max(0.0)
                } else {
                    s
                }
            })
            .collect()
    };
    let h1 = layer(x, 0, 80, 10, 8, true);
    let h2 = layer(&h1, 88, 152, 8, 8, true);
    layer(&h2, 160, 168, 8, 1, false)[0]
}

pub fn instance_memory(seed: u64) -> f64 {
    assert_eq!(HEAD_PARAMS, 169);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (gh, gw, c, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..4));
        let hw = gh * gw;
        let f_t = rand_t(&mut rng, &[hw, c]);
        let (wr, br) = (rand_t(&mut rng, &[c, 8]), rand_t(&mut rng, &[8]));
        let thetas: Vec<Tensor<f64>> = (0..n).map(|_| rand_t(&mut rng, &[1, HEAD_PARAMS])).collect();
        let cents: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(0.0..gh as f64), rng.random_range(0.0..gw as f64))).collect();

        let mut ps = ParamSet::<f64>::new();
        let reduce = LinearLayer::with_weights(&mut ps, "reduce", wr.clone(), br.clone());
        let mut g = Graph::new();
        let p = ps.bind(&mut g);
        let fv = g.constant(f_t.clone());
        let heads: Vec<HeadInput<f64>> = thetas
            .iter()
            .zip(&cents)
            .map(|(t, &cen)| HeadInput {
                theta: g.constant(t.clone()),
                position: coord_map(cen, gh, gw),
            })
            .collect();
        let o = apply_instance_memory(&mut g, &p, &reduce, fv, &heads).unwrap();

        let want: Vec<Vec<f64>> = (0..hw)
            .map(|pix| {
                let reduced: Vec<f64> = (0..8).map(|o| br.data()[o] + (0..c).map(|i| f_t.at2(pix, i) * wr.at2(i, o)).sum::<f64>()).collect();
                let (y, x) = ((pix / gw) as f64, (pix % gw) as f64);
                let total: f64 = thetas
                    .iter()
                    .zip(&cents)
                    .map(|(t, &(cy, cx))| {
                        let mut inp = reduced.clone();
                        inp.push((x - cx) / (gw as f64 / 2.0));
                        inp.push((y - cy) / (gh as f64 / 2.0));
                        naive_head(t.data(), &inp)
                    })
                    .sum();
                vec![total / n as f64]
            })
            .collect();
        worst = worst.max(max_diff(g.value(o), &want));
    }
    worst
}

pub fn miou(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let n = rng.random_range(1..40);
        let p = Tensor::<f64>::from_fn(&[n, 1], |_| rng.random_range(0.0..1.0));
        let g = Tensor::<f64>::from_fn(&[n, 1], |_| if rng.random_bool(0.4) { 1.0 } else { rng.random_range(0.0..1.0) });
        let (mut inter, mut union) = (0.0, 0.0);
        for (a, b) in p.data().iter().zip(g.data()) {
            inter += a.min(*b);
            union += a.max(*b);
        }
        let want = 1.0 - inter / union;
        worst = worst.max((miou_loss(&p, &g).unwrap() - want).abs());
    }
    worst
}
