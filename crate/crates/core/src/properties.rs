//! Randomized invariants across modules.

use proptest::prelude::*;
use proptest::test_runner::Config as RunnerConfig;

use crate::config::Config;
use crate::data::{build_protocol, decode, encode, DatasetManifest, Protocol};
use crate::nn::SirModel;
use crate::optim::{AdamConfig, AdamState};
use crate::persist::{Checkpoint, Entry};
use crate::rng;
use crate::scoring::{anomaly_maps, auroc, percentile, Label};
use crate::tensor::{
    bilinear_resize, conv2d, conv_transpose2d, cosine_distance_map, gaussian_smooth, Tape, Tensor, Var, COSINE_EPS,
};
use crate::viz::{jet, render_overlay, RenderSpec, JET_KNOTS};

fn tensor(shape: [usize; 4], lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(lo..hi, n).prop_map(move |d| Tensor::new(shape, d).unwrap())
}

/// Values with `|v| >= 0.05`, kept off the leaky-ReLU kink.
fn off_kink(shape: [usize; 4]) -> impl Strategy<Value = Tensor> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec((0.05..1.0f64, any::<bool>()), n)
        .prop_map(move |d| Tensor::new(shape, d.into_iter().map(|(v, s)| if s { v } else { -v }).collect()).unwrap())
}

fn inner(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Largest relative error between tape gradients and central differences of
/// `build` at `inputs`. The root contracts the output against a fixed random
/// probe (a convolution whose kernel spans the whole output), so every
/// element gets its own weight.
fn fd_check(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let run = |xs: &[Tensor], want_grads: bool| -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone().with_grad(true))).collect();
        let out = build(&mut tape, &vars);
        let [_, c, h, w] = tape.value(out).shape();
        let mut r = rng::stream(99, 0);
        let probe = tape.constant(Tensor::from_fn([1, c, h, w], |_, _, _, _| rand::Rng::random_range(&mut r, -1.0..1.0)));
        let zero = tape.constant(Tensor::zeros([1, 1, 1, 1]));
        let dot = tape.conv2d(out, probe, zero, 1, 0).unwrap();
        let root = tape.mean_all(dot).unwrap();
        let value = tape.value(root).data()[0];
        let grads = if want_grads {
            let g = tape.backward(root).unwrap();
            vars.iter().map(|&v| g.get(v).unwrap().clone()).collect()
        } else {
            Vec::new()
        };
        (value, grads)
    };
    let (_, analytic) = run(inputs, true);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += h;
            let up = run(&xs, false).0;
            xs[i].data_mut()[j] -= 2.0 * h;
            let down = run(&xs, false).0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    worst
}

proptest! {
    #![proptest_config(RunnerConfig::with_cases(24))]

    #[test]
    fn conv2d_gradients_match_differences(
        (x, w, b, stride, padding) in (1usize..=2, 1usize..=3, 1usize..=3, 3usize..=5, 1usize..=3, 1usize..=2, 0usize..=1)
            .prop_filter("kernel fits", |&(_, _, _, h, k, _, p)| h + 2 * p >= k)
            .prop_flat_map(|(n, ci, co, h, k, s, p)| {
                (tensor([n, ci, h, h], -1.0, 1.0), tensor([co, ci, k, k], -1.0, 1.0), tensor([1, co, 1, 1], -1.0, 1.0), Just(s), Just(p))
            })
    ) {
        let err = fd_check(&[x, w, b], &|t, v| t.conv2d(v[0], v[1], v[2], stride, padding).unwrap());
        prop_assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn conv_transpose2d_gradients_match_differences(
        (x, w, b, stride, padding) in (1usize..=2, 1usize..=3, 1usize..=3, 1usize..=4, 2usize..=4, 1usize..=2, 0usize..=1)
            .prop_filter("output is non-empty", |&(_, _, _, h, k, s, p)| (h - 1) * s + k > 2 * p)
            .prop_flat_map(|(n, ci, co, h, k, s, p)| {
                (tensor([n, ci, h, h], -1.0, 1.0), tensor([ci, co, k, k], -1.0, 1.0), tensor([1, co, 1, 1], -1.0, 1.0), Just(s), Just(p))
            })
    ) {
        let err = fd_check(&[x, w, b], &|t, v| t.conv_transpose2d(v[0], v[1], v[2], stride, padding).unwrap());
        prop_assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn leaky_relu_gradients_match_differences(
        x in (1usize..=2, 2usize..=3, 1usize..=5, 1usize..=5).prop_flat_map(|(n, c, h, w)| off_kink([n, c, h, w])),
        slope in 0.01..0.9f64,
    ) {
        let err = fd_check(&[x], &|t, v| t.leaky_relu(v[0], slope));
        prop_assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn cosine_add_scale_gradients_match_differences(
        (a, b) in (1usize..=2, 2usize..=5, 1usize..=4, 1usize..=4)
            .prop_flat_map(|(n, c, h, w)| (tensor([n, c, h, w], 0.2, 1.0), tensor([n, c, h, w], -1.0, 1.0))),
        factor in -2.0..2.0f64,
    ) {
        let err = fd_check(&[a.clone(), b.clone()], &|t, v| t.cosine_distance_map(v[0], v[1], COSINE_EPS).unwrap());
        prop_assert!(err < 1e-4, "cosine: max relative error {err}");
        let err = fd_check(&[a, b], &|t, v| {
            let s = t.scale(v[1], factor);
            t.add(v[0], s).unwrap()
        });
        prop_assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn mean_all_gradient_matches_differences(
        x in (1usize..=2, 1usize..=3, 1usize..=5, 1usize..=5).prop_flat_map(|(n, c, h, w)| tensor([n, c, h, w], -1.0, 1.0)),
    ) {
        let err = fd_check(&[x], &|t, v| t.mean_all(v[0]).unwrap());
        prop_assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn cosine_distance_stays_in_range(
        (a, b) in (1usize..=2, 1usize..=6, 1usize..=4, 1usize..=4)
            .prop_flat_map(|(n, c, h, w)| (tensor([n, c, h, w], -1e6, 1e6), tensor([n, c, h, w], -1e-6, 1e-6))),
        zero_a in any::<bool>(),
    ) {
        let a = if zero_a { Tensor::zeros(a.shape()) } else { a };
        for (x, y) in [(&a, &b), (&b, &a), (&a, &a), (&b, &b)] {
            let d = cosine_distance_map(x, y, COSINE_EPS).unwrap();
            prop_assert!(d.data().iter().all(|v| (0.0..=2.0).contains(v)), "{:?}", d.data());
        }
    }

    #[test]
    fn resampling_and_smoothing_respect_bounds(
        x in (1usize..=2, 1usize..=2, 1usize..=6, 1usize..=6).prop_flat_map(|(n, c, h, w)| tensor([n, c, h, w], -3.0, 3.0)),
        out in (1usize..=12, 1usize..=12),
        sigma in 0.3..5.0f64,
        constant in -5.0..5.0f64,
    ) {
        let (lo, hi) = (x.min(), x.max());
        let within = |t: &Tensor| t.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12);
        let up = bilinear_resize(&x, out.0, out.1).unwrap();
        prop_assert!(within(&up));
        let sm = gaussian_smooth(&x, sigma).unwrap();
        prop_assert!(within(&sm));
        prop_assert!(sm.max() <= hi + 1e-12);

        let c = Tensor::full(x.shape(), constant);
        let cu = bilinear_resize(&c, out.0, out.1).unwrap();
        let cs = gaussian_smooth(&c, sigma).unwrap();
        prop_assert!(cu.data().iter().chain(cs.data()).all(|v| (v - constant).abs() <= 1e-12));
    }

    #[test]
    fn conv_transpose_is_the_adjoint_of_conv(
        (x, w, y, stride, padding) in (1usize..=2, 1usize..=3, 1usize..=3, 1usize..=4, 1usize..=4, 1usize..=3, 0usize..=1)
            .prop_filter("input is non-empty", |&(_, _, _, ho, k, s, p)| (ho - 1) * s + k > 2 * p)
            .prop_flat_map(|(n, ci, co, ho, k, s, p)| {
                let h = (ho - 1) * s + k - 2 * p;
                (tensor([n, ci, h, h], -1.0, 1.0), tensor([co, ci, k, k], -1.0, 1.0), tensor([n, co, ho, ho], -1.0, 1.0), Just(s), Just(p))
            })
    ) {
        let [_, ci, _, _] = x.shape();
        let co = w.shape()[0];
        let fwd = conv2d(&x, &w, &Tensor::zeros([1, co, 1, 1]), stride, padding).unwrap();
        prop_assert_eq!(fwd.shape(), y.shape());
        let back = conv_transpose2d(&y, &w, &Tensor::zeros([1, ci, 1, 1]), stride, padding).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        let (lhs, rhs) = (inner(&fwd, &y), inner(&x, &back));
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");

        let again = conv2d(&x, &w, &Tensor::zeros([1, co, 1, 1]), stride, padding).unwrap();
        prop_assert_eq!(again, fwd);
    }

    #[test]
    fn auroc_flips_to_complement_and_ignores_monotone_transforms(
        pairs in prop::collection::vec((0u8..12, any::<bool>()), 2..60),
    ) {
        prop_assume!(pairs.iter().any(|p| p.1) && pairs.iter().any(|p| !p.1));
        let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let labels: Vec<Label> = pairs.iter().map(|p| if p.1 { Label::Anomalous } else { Label::Normal }).collect();
        let flipped: Vec<Label> = labels.iter().map(|l| l.flipped()).collect();
        let a = auroc(&scores, &labels).unwrap();
        prop_assert_eq!(a + auroc(&scores, &flipped).unwrap(), 1.0);
        // 2x³ + x + 5 is strictly increasing and exact on these integers.
        let warped: Vec<f64> = scores.iter().map(|s| 2.0 * s * s * s + s + 5.0).collect();
        prop_assert_eq!(auroc(&warped, &labels).unwrap(), a);
    }

    #[test]
    fn percentile_is_bounded_and_monotone(
        values in prop::collection::vec(-100.0..100.0f64, 1..40),
        p in 0.0..=100.0f64,
        q in 0.0..=100.0f64,
    ) {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (a, b) = (percentile(&values, p.min(q)).unwrap(), percentile(&values, p.max(q)).unwrap());
        prop_assert!(lo <= a && a <= b && b <= hi);
        prop_assert_eq!(percentile(&values, 0.0).unwrap(), lo);
        prop_assert_eq!(percentile(&values, 100.0).unwrap(), hi);
    }

    #[test]
    fn quantized_images_round_trip(
        (c, h, w, bytes) in (prop_oneof![Just(1usize), Just(3usize)], 1usize..=9, 1usize..=9)
            .prop_flat_map(|(c, h, w)| (Just(c), Just(h), Just(w), prop::collection::vec(any::<u8>(), c * h * w)))
    ) {
        let t = Tensor::new([1, c, h, w], bytes.iter().map(|&b| b as f64 / 255.0).collect()).unwrap();
        let encoded = encode(&t).unwrap();
        prop_assert_eq!(decode(&encoded).unwrap(), t);
    }

    #[test]
    fn overlays_are_pure_and_decode(
        (img, map) in (1usize..=8, 1usize..=8, prop_oneof![Just(1usize), Just(3usize)])
            .prop_flat_map(|(h, w, c)| (tensor([1, c, h, w], 0.0, 1.0), tensor([1, 1, h, w], 0.0, 1.0))),
        alpha in 0.0..=1.0f64,
    ) {
        let spec = RenderSpec { alpha, ..RenderSpec::default() };
        let bytes = render_overlay(&img, &map, &spec).unwrap();
        prop_assert_eq!(&render_overlay(&img, &map, &spec).unwrap(), &bytes);
        let back = decode(&bytes).unwrap();
        let [_, _, h, w] = img.shape();
        prop_assert_eq!(back.shape(), [1, 3, h, w]);
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        entries in prop::collection::btree_map(
            "[a-z]{1,6}(\\.[a-z0-9]{1,4}){0,2}",
            prop::collection::vec(1usize..=3, 0..=4).prop_flat_map(|shape| {
                let n = shape.iter().product::<usize>();
                (Just(shape), prop::collection::vec(prop::num::f64::ANY, n))
            }),
            0..6,
        )
    ) {
        let ck = Checkpoint {
            entries: entries.into_iter().map(|(k, (shape, data))| (k, Entry { shape, data })).collect(),
            meta: None,
            config: None,
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        for (name, e) in &ck.entries {
            let b = &back.entries[name];
            prop_assert_eq!(&b.shape, &e.shape);
            prop_assert!(b.data.iter().zip(&e.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn protocols_are_deterministic_and_never_train_on_anomalies(
        sizes in prop::collection::vec((1usize..6, 1usize..4, 1usize..4), 1..4),
        seed in any::<u64>(),
        shots in 1usize..=3,
    ) {
        let manifests: Vec<DatasetManifest> = sizes
            .iter()
            .enumerate()
            .map(|(d, &(tr, tn, ta))| DatasetManifest {
                domain: format!("d{d}"),
                train_normal: (0..tr).map(|i| format!("d{d}/train/n{i}.pgm").into()).collect(),
                test_normal: (0..tn).map(|i| format!("d{d}/test/n{i}.pgm").into()).collect(),
                test_anomalous: (0..ta).map(|i| format!("d{d}/test/a{i}.pgm").into()).collect(),
                base_dir: "/data".into(),
            })
            .collect();
        let min_train = sizes.iter().map(|s| s.0).min().unwrap();
        let protocols = [
            Protocol::OneShotUniversal,
            Protocol::FullShotUniversal,
            Protocol::FullShotSpecialized,
            Protocol::KShotUniversal { k: shots.min(min_train) },
            Protocol::OneShotSpecialized,
        ];
        for p in protocols {
            let a = build_protocol(&manifests, p, seed).unwrap();
            prop_assert_eq!(&build_protocol(&manifests, p, seed).unwrap(), &a);
            for split in &a {
                for s in &split.train {
                    for t in &split.tests {
                        prop_assert!(!t.anomalous.contains(&s.path));
                        prop_assert!(!t.normal.contains(&s.path));
                    }
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(RunnerConfig::with_cases(12))]

    #[test]
    fn loss_and_maps_obey_their_ranges(seed in any::<u64>(), loops in 1usize..=3) {
        let cfg = Config { seed, loops, ..Config::tiny() };
        let model = SirModel::new(&cfg, rng::STUDENT);
        let mut r = rng::stream(seed, 77);
        let x = Tensor::from_fn([2, 1, 32, 32], |_, _, _, _| rand::Rng::random::<f64>(&mut r));
        let loss = model.training_loss(&x).unwrap();
        // Each of the 2L terms is a mean cosine distance in [0, 2].
        let bound = 4.0 * loops as f64;
        prop_assert!((0.0..=bound).contains(&loss), "loss {loss}");

        let one = x.batch_item(0);
        let a = anomaly_maps(&model, &one, cfg.sigma_smooth).unwrap();
        prop_assert!(a.final_map.data().iter().all(|v| (0.0..=bound).contains(v)));

        // One more loop on the same weights only adds a nonnegative map.
        let longer = SirModel { loops: loops + 1, ..model.clone() };
        let b = anomaly_maps(&longer, &one, cfg.sigma_smooth).unwrap();
        prop_assert!(b.final_map.data().iter().zip(a.final_map.data()).all(|(x, y)| x >= y));
        prop_assert!(b.per_loop_maps.iter().all(|m| m.min() >= 0.0));

        // The recurrence is not vacuous.
        let teacher = longer.teacher_forward(&one).unwrap();
        let outs = longer.loop_forward(&teacher.phi).unwrap();
        prop_assert!(outs[1].phi.max_abs_diff(&outs[0].phi) > 0.0);
        prop_assert!(outs[1].f3.max_abs_diff(&outs[0].f3) > 0.0);
    }

    #[test]
    fn adam_respects_frozen_tensors_and_the_step_bound(
        (p, frozen, grads) in (1usize..=6).prop_flat_map(|n| (
            tensor([1, 1, 1, n], -2.0, 2.0),
            tensor([1, 1, 1, n], -2.0, 2.0),
            prop::collection::vec(tensor([1, 1, 1, n], -1e3, 1e3), 1..30),
        )),
    ) {
        let cfg = AdamConfig::default();
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let mut p = p.with_grad(true);
        let mut f = frozen.clone().with_grad(false);
        let mut state = AdamState::new(cfg, [&p, &f]);
        for (t, g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            // Cauchy–Schwarz on the bias-corrected moment weights a_i, b_i:
            // |m̂| ≤ sqrt(Σ a_i² / b_i) · sqrt(v̂).
            let ratio: f64 = (1..=t)
                .map(|i| {
                    let a = (1.0 - b1) * b1.powi(t - i) / (1.0 - b1.powi(t));
                    let b = (1.0 - b2) * b2.powi(t - i) / (1.0 - b2.powi(t));
                    a * a / b
                })
                .sum::<f64>()
                .sqrt();
            let before = p.clone();
            state.step(&mut [&mut p, &mut f], &[g.clone(), g.clone()]).unwrap();
            for (a, b) in p.data().iter().zip(before.data()) {
                prop_assert!((a - b).abs() <= cfg.lr * ratio * (1.0 + 1e-6));
            }
        }
        prop_assert_eq!(f.data(), frozen.data());
        prop_assert!(state.m[1].data().iter().chain(state.v[1].data()).all(|&v| v == 0.0));
    }

    #[test]
    fn adam_steps_stay_below_lr_under_steady_gradients(
        g in tensor([1, 1, 1, 6], -1e3, 1e3),
        steps in 1usize..200,
    ) {
        let cfg = AdamConfig::default();
        let mut p = Tensor::zeros([1, 1, 1, 6]).with_grad(true);
        let mut state = AdamState::new(cfg, [&p]);
        for _ in 0..steps {
            let before = p.clone();
            state.step(&mut [&mut p], std::slice::from_ref(&g)).unwrap();
            for (a, b) in p.data().iter().zip(before.data()) {
                prop_assert!((a - b).abs() <= cfg.lr * (1.0 + 1e-6));
            }
        }
    }

    #[test]
    fn jet_hue_order_is_monotone_on_the_knots(steps in 2usize..64) {
        // Hue order blue → cyan → green → yellow → red, read as the angle
        // around the color wheel measured from blue backwards.
        let hue = |c: [f64; 3]| {
            let [r, g, b] = c;
            let max = r.max(g).max(b);
            let min = r.min(g).min(b);
            if max - min < 1e-12 {
                return 240.0;
            }
            let h = if max == r {
                60.0 * ((g - b) / (max - min)).rem_euclid(6.0)
            } else if max == g {
                60.0 * ((b - r) / (max - min) + 2.0)
            } else {
                60.0 * ((r - g) / (max - min) + 4.0)
            };
            // Deep red past the top wraps to 0 degrees; keep it at the end.
            240.0 - h.min(240.0)
        };
        let mut last = f64::NEG_INFINITY;
        for &(v, _) in JET_KNOTS.iter() {
            let h = hue(jet(v));
            prop_assert!(h >= last - 1e-9, "knot {v}: hue {h} after {last}");
            last = h;
        }
        let mut last = f64::NEG_INFINITY;
        for i in 0..=steps {
            let h = hue(jet(i as f64 / steps as f64));
            prop_assert!(h >= last - 1e-9);
            last = h;
        }
    }
}
