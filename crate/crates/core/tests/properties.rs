use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsn_core::config::{FusionMode, RoutingForm};
use tsn_core::division_fusion::{routing, RoutingParams};
use tsn_core::instance_stream::{predict_theta, HEAD_PARAMS};
use tsn_core::losses::miou_loss;
use tsn_core::memory_bank::{ObjectEntry, VideoState};
use tsn_core::metrics::{boundary_f, boundary_tolerance, region_j};
use tsn_core::model::{aggregate_objects, Model};
use tsn_core::ops::{softmax_rows, softmax_topk_rows};
use tsn_core::params::ParamSet;
use tsn_core::synth::{gen_video, sample_frames, EmergenceMode, SynthConfig};
use tsn_core::{Graph, ModelConfig, Tensor};

fn matrix(max_rows: usize, max_cols: usize, mag: f64) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| {
        prop::collection::vec(-mag..mag, r * c).prop_map(move |d| Tensor::new(&[r, c], d).unwrap())
    })
}

fn bools(n: usize) -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), n)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in matrix(6, 12, 60.0), k in 1usize..14) {
        let (r, c) = (x.shape()[0], x.shape()[1]);
        for y in [softmax_rows(&x).unwrap(), softmax_topk_rows(&x, k).unwrap()] {
            for i in 0..r {
                let row = &y.data()[i * c..(i + 1) * c];
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
        let y32 = softmax_rows(&x.cast::<f32>()).unwrap();
        for i in 0..r {
            let s: f32 = y32.data()[i * c..(i + 1) * c].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
        let t = softmax_topk_rows(&x, k).unwrap();
        for i in 0..r {
            prop_assert!(t.data()[i * c..(i + 1) * c].iter().filter(|&&v| v > 0.0).count() <= k);
        }
    }

    #[test]
    fn fuse_is_convex(
        w in prop::collection::vec(0.0f64..=1.0, 5),
        a in prop::collection::vec(-5.0f64..5.0, 15),
        b in prop::collection::vec(-5.0f64..5.0, 15),
    ) {
        let mut g = Graph::new();
        let wv = g.constant(Tensor::new(&[5, 1], w.clone()).unwrap());
        let av = g.constant(Tensor::new(&[5, 3], a.clone()).unwrap());
        let bv = g.constant(Tensor::new(&[5, 3], b.clone()).unwrap());
        let f = g.fuse(wv, av, bv).unwrap();
        let zero = g.constant(Tensor::zeros(&[5, 1]));
        let one = g.constant(Tensor::ones(&[5, 1]));
        let f0 = g.fuse(zero, av, bv).unwrap();
        let f1 = g.fuse(one, av, bv).unwrap();
        for i in 0..15 {
            let v = g.value(f).data()[i];
            prop_assert!(a[i].min(b[i]) <= v && v <= a[i].max(b[i]));
        }
        prop_assert_eq!(g.value(f0).data(), &b[..]);
        prop_assert_eq!(g.value(f1).data(), &a[..]);
    }

    #[test]
    fn routing_is_strictly_inside_unit_interval(
        rk in prop::collection::vec(-2.0f64..2.0, 24),
        kq in prop::collection::vec(-2.0f64..2.0, 24),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        channelwise: bool,
    ) {
        let cfg = ModelConfig { key_dim: 4, ..ModelConfig::default() };
        let mut ps = ParamSet::<f64>::new();
        let rp = RoutingParams::build(&mut ps, &cfg);
        ps.set(rp.a, Tensor::full(&[1], a));
        ps.set(rp.b, Tensor::full(&[1], b));
        let mut g = Graph::new();
        let p = ps.bind(&mut g);
        let r = g.constant(Tensor::new(&[6, 4], rk).unwrap());
        let q = g.constant(Tensor::new(&[6, 4], kq).unwrap());
        let form = if channelwise { RoutingForm::Channelwise } else { RoutingForm::Scalar };
        let w = routing(&mut g, &p, &rp, form, FusionMode::Routing, r, q).unwrap();
        prop_assert!(g.value(w).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn miou_range_and_zero_iff_equal(p in prop::collection::vec(0.0f64..=1.0, 1..30), bits in bools(30)) {
        let n = p.len();
        let gt: Vec<f64> = bits[..n].iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let (pt, gt) = (Tensor::new(&[n, 1], p.clone()).unwrap(), Tensor::new(&[n, 1], gt).unwrap());
        let l = miou_loss(&pt, &gt).unwrap();
        prop_assert!((0.0..=1.0).contains(&l));
        prop_assert_eq!(l == 0.0, p == gt.data());
        // Moving P halfway toward G never increases the loss.
        let closer: Vec<f64> = p.iter().zip(gt.data()).map(|(a, b)| (a + b) / 2.0).collect();
        let l2 = miou_loss(&Tensor::new(&[n, 1], closer).unwrap(), &gt).unwrap();
        prop_assert!(l2 <= l + 1e-12);
    }

    #[test]
    fn region_and_boundary_are_symmetric(a in bools(64), b in bools(64)) {
        let tol = boundary_tolerance(8, 8);
        prop_assert_eq!(region_j(&a, &b, 8, 8).unwrap(), region_j(&b, &a, 8, 8).unwrap());
        prop_assert_eq!(boundary_f(&a, &b, 8, 8, tol).unwrap(), boundary_f(&b, &a, 8, 8, tol).unwrap());
        prop_assert_eq!(region_j(&a, &a, 8, 8).unwrap(), 1.0);
    }

    #[test]
    fn single_object_aggregation_thresholds_at_half(p in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let labels = aggregate_objects(&[p.clone()], &[3]).unwrap();
        for (l, v) in labels.iter().zip(&p) {
            prop_assert_eq!(*l == 3, *v > 0.5);
        }
    }

    #[test]
    fn memory_keeps_first_frame_within_capacity(cap in 1usize..6, writes in 1usize..20) {
        let mut s = VideoState::<f64>::new(vec![1], cap).unwrap();
        for f in 0..writes {
            let entry = ObjectEntry { values: Tensor::zeros(&[2, 3]), head: None };
            s.write_reference(f * 5, Tensor::zeros(&[2, 4]), vec![entry]).unwrap();
            prop_assert_eq!(s.memory_frames()[0], 0);
            prop_assert!(s.len() <= cap);
            prop_assert!(s.memory_frames().windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn sampled_frames_are_ordered_and_in_range(seed: u64, len in 3usize..40, gap in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [a, b, c] = sample_frames(&mut rng, len, gap).unwrap();
        prop_assert!(a < b && b < c && c < len);
        prop_assert!(c - a <= 2 * gap.max(1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_videos_satisfy_invariants(seed: u64, objects in 1usize..=2, mode in 0usize..4, big: bool) {
        let mode = [EmergenceMode::None, EmergenceMode::Occlusion, EmergenceMode::Border, EmergenceMode::Articulation][mode];
        let cfg = SynthConfig { frames: 6, size: if big { 64 } else { 32 }, objects, mode, reveal_frame: None };
        let v = gen_video(seed, &cfg).unwrap();
        prop_assert_eq!(&v, &gen_video(seed, &cfg).unwrap());
        prop_assert!(v.emergent[0].iter().all(|&e| !e));
        for t in 0..v.len() {
            for (e, &l) in v.emergent[t].iter().zip(&v.labels[t]) {
                prop_assert!(!e || l != 0);
            }
            for id in 1..=objects {
                prop_assert!(v.labels[t].iter().any(|&l| l as usize == id), "object {} missing at {}", id, t);
            }
            if mode == EmergenceMode::None {
                prop_assert!(v.emergent[t].iter().all(|&e| !e));
            }
        }
        // Reveals are monotone: what frame 0 did not show only grows.
        let unseen = v.unseen_since_first().unwrap();
        for t in 0..v.len() {
            prop_assert!(v.emergent[t].iter().zip(&unseen[t]).all(|(&e, &u)| !e || u));
        }
        prop_assert_eq!(v.is_monotone_emergence(), mode != EmergenceMode::None);
    }

    #[test]
    fn predictor_ignores_token_order(seed: u64, rows in 2usize..12) {
        let model = Model::<f64>::new(ModelConfig { image_size: 16, ..ModelConfig::default() }).unwrap();
        let c = model.config().value_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens: Tensor<f64> = Tensor::from_fn(&[rows, c], |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let mut order: Vec<usize> = (0..rows).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
        let permuted = Tensor::from_fn(&[rows, c], |i| tokens.data()[order[i / c] * c + i % c]);
        let theta = |t: &Tensor<f64>| {
            let mut g = Graph::new();
            let p = model.params().bind_frozen(&mut g);
            let v = g.constant(t.clone());
            let th = predict_theta(&mut g, &p, &model.layout().predictor, v).unwrap();
            g.value(th).clone()
        };
        let (a, b) = (theta(&tokens), theta(&permuted));
        prop_assert_eq!(a.shape(), &[1, HEAD_PARAMS]);
        prop_assert!(a.max_abs_diff(&b) < 1e-10);
    }
}
