use dynamic_isp::controller::{act_range, gate_values, init_controller, ControllerConfig};
use dynamic_isp::init_buffer::{InitBuffer, InitStrategy};
use dynamic_isp::io::{decode_image, encode_image, Config, ImageFormat};
use dynamic_isp::isp::{
    apply_ag, apply_dn, apply_gm, apply_pipeline_flat, apply_sn, apply_stage, dog, gaussian_filter,
    IspKind, ParamSpec, PipelineSpec, StageSpec,
};
use dynamic_isp::ndiff::{conv2d, fc, Adam, LrSchedule, Padding, Params, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const KINDS: [IspKind; 5] = [
    IspKind::Ag,
    IspKind::Dn,
    IspKind::Sn,
    IspKind::Gm,
    IspKind::Cs,
];

fn kind() -> impl Strategy<Value = IspKind> {
    (0..5usize).prop_map(|i| KINDS[i])
}

/// A parameter vector strictly inside the default bounds of `kind`.
fn params_for(kind: IspKind) -> impl Strategy<Value = Vec<f64>> {
    let specs = kind.default_specs();
    proptest::collection::vec(0.02f64..0.98, specs.len()).prop_map(move |u| {
        specs
            .iter()
            .zip(u)
            .map(|(s, t)| s.min + s.range() * t)
            .collect()
    })
}

fn image(c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(0.0f64..1.0, c * h * w)
        .prop_map(move |d| Tensor::new(vec![c, h, w], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn act_range_is_strictly_inside(x in -1e6f64..1e6, lo in -10.0f64..10.0, span in 1e-3f64..20.0) {
        let s = ParamSpec { name: "p".into(), min: lo, max: lo + span };
        let v = act_range(x, &s);
        prop_assert!(s.contains(v), "{v} outside ({}, {})", s.min, s.max);
    }

    #[test]
    fn ag_is_continuous_and_monotone(p in params_for(IspKind::Ag)) {
        let (w, h, x0) = (p[0], p[1], p[2]);
        let lo = x0 * (1.0 - w);
        let hi = lo + w;
        let f = |v: f64| apply_ag(&Tensor::scalar(v), w, h, x0).unwrap().output.data()[0];
        for b in [lo, hi] {
            prop_assert!((f(b - 1e-12) - f(b + 1e-12)).abs() < 1e-9);
        }
        prop_assert!(f(0.0).abs() < 1e-9);
        prop_assert!((f(1.0) - 1.0).abs() < 1e-9);
        let xs: Vec<f64> = (0..=200).map(|i| i as f64 / 200.0).collect();
        let ys = apply_ag(&Tensor::from_vec(xs), w, h, x0).unwrap().output;
        prop_assert!(ys.data().windows(2).all(|p| p[1] >= p[0]));
    }

    #[test]
    fn dn_and_sn_preserve_constants(c in 0.0f64..1.0, pd in params_for(IspKind::Dn), ps in params_for(IspKind::Sn)) {
        let x = Tensor::full(&[1, 7, 6], c);
        prop_assert_eq!(apply_dn(&x, pd[0], pd[1], pd[2]).unwrap().output, x.clone());
        prop_assert_eq!(apply_sn(&x, ps[0], ps[1]).unwrap().output, x);
    }

    #[test]
    fn gm_fixed_points(p in params_for(IspKind::Gm)) {
        let y = apply_gm(&Tensor::from_vec(vec![1.0, p[2]]), p[0], p[1], p[2]).unwrap().output;
        prop_assert!((y.data()[0] - 1.0).abs() < 1e-9);
        prop_assert!((y.data()[1] - p[2].powf(1.0 / p[0])).abs() < 1e-9);
    }

    #[test]
    fn dog_is_input_minus_blur(x in image(1, 6, 6), sigma in 0.1f64..3.0) {
        let d = dog(&x, sigma).unwrap();
        let blur = gaussian_filter(&x, sigma, 5).unwrap();
        prop_assert_eq!(gaussian_filter(&x, sigma, 1).unwrap(), x.clone());
        for ((&dv, &xv), &bv) in d.data().iter().zip(x.data()).zip(blur.data()) {
            prop_assert!((dv - (xv - bv)).abs() < 1e-12);
        }
    }

    #[test]
    fn pipeline_composition_is_associative(
        kinds in proptest::collection::vec(kind(), 2..5),
        split in 1usize..4,
        seed in any::<u64>(),
        x in image(1, 6, 6),
    ) {
        let split = split.min(kinds.len() - 1);
        let spec = PipelineSpec::from_kinds(&kinds);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat: Vec<f64> = spec
            .flat_specs()
            .iter()
            .map(|s| s.min + s.range() * rand::Rng::random_range(&mut rng, 0.05..0.95))
            .collect();
        let whole = apply_pipeline_flat(&x, &spec, &flat).unwrap().output;
        let a = PipelineSpec::from_kinds(&kinds[..split]);
        let b = PipelineSpec::from_kinds(&kinds[split..]);
        let n = a.total_params();
        let mid = apply_pipeline_flat(&x, &a, &flat[..n]).unwrap().output;
        let two = apply_pipeline_flat(&mid, &b, &flat[n..]).unwrap().output;
        for (u, v) in whole.data().iter().zip(two.data()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients(k in kind(), x in image(1, 5, 5), seed in any::<u64>()) {
        let stage = StageSpec::new(k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = stage
            .params
            .iter()
            .map(|s| s.min + s.range() * rand::Rng::random_range(&mut rng, 0.05..0.95))
            .collect();
        let rec = apply_stage(k, &x, &p).unwrap();
        for g in rec.backward(&Tensor::zeros(x.shape())) {
            prop_assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identity_layers_are_exact(x in image(2, 5, 4), v in proptest::collection::vec(-5.0f64..5.0, 6)) {
        let mut k = Tensor::zeros(&[2, 2, 3, 3]);
        for c in 0..2 {
            k.data_mut()[(c * 2 + c) * 9 + 4] = 1.0;
        }
        for pad in [Padding::Zero, Padding::Reflect] {
            prop_assert_eq!(conv2d(&x, &k, None, 1, pad).unwrap().output, x.clone());
        }
        let v = Tensor::from_vec(v);
        prop_assert_eq!(fc(&v, &Tensor::identity(6), &Tensor::zeros(&[6])).unwrap().output, v);
    }

    #[test]
    fn lr_schedule_stays_in_range(step in 0u64..10_000, warm in 0u64..500, total in 1u64..5000) {
        let s = LrSchedule { lr_max: 1e-3, lr_min: 1e-6, warmup_steps: warm, total_steps: total };
        let lr = s.lr_at(step);
        prop_assert!((1e-6..=1e-3).contains(&lr));
    }

    #[test]
    fn adam_with_zero_gradients_is_a_no_op(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        p.insert("a", Tensor::randn(&[3, 2], 1.0, &mut rng));
        p.insert("b", Tensor::randn(&[4], 1.0, &mut rng));
        let before = p.clone();
        let mut adam = Adam::new(LrSchedule { lr_max: 1e-2, lr_min: 1e-4, warmup_steps: 2, total_steps: 10 });
        let zeros = p.zeros_like();
        for _ in 0..3 {
            adam.step(&mut p, &zeros, |_| true).unwrap();
        }
        prop_assert_eq!(p, before);
    }

    #[test]
    fn gates_lie_in_open_interval(k in kind(), seed in any::<u64>()) {
        let spec = PipelineSpec::from_kinds(&[k, IspKind::Gm]);
        let cfg = ControllerConfig { latent_width: 16, sfb_conv_channels: 2, sfb_hidden: 8, update_hidden: 8, ..ControllerConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = init_controller(&cfg, &spec, 2, &mut rng);
        params.insert("ctrl.head0.upd2.b", Tensor::randn(&[16], 3.0, &mut rng));
        let stage = &spec.stages[0];
        let p = Tensor::from_vec(stage.params.iter().map(|s| s.midpoint()).collect());
        for g in gate_values(&params, 0, stage, &p).unwrap() {
            prop_assert!(g > 0.0 && g < 5.0);
        }
    }

    #[test]
    fn buffer_keeps_last_m_in_order(n in 0usize..40, m in 1usize..10, seed in any::<u64>()) {
        let specs = IspKind::Gm.default_specs();
        let mut buf = InitBuffer::new(specs.clone(), m, 0.99).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pushed: Vec<Vec<f64>> = (0..n)
            .map(|_| specs.iter().map(|s| s.min + s.range() * rand::Rng::random_range(&mut rng, 0.01..0.99)).collect())
            .collect();
        for v in &pushed {
            buf.push_params(v).unwrap();
        }
        let kept: Vec<Vec<f64>> = buf.entries().cloned().collect();
        prop_assert_eq!(&kept[..], &pushed[n.saturating_sub(m)..]);
        prop_assert!(buf.running_mean().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn samples_are_inside_bounds_and_reproducible(strategy in 0usize..4, pushes in 0usize..5, seed in any::<u64>()) {
        let strategy = [InitStrategy::None, InitStrategy::Uniform, InitStrategy::Gaussian, InitStrategy::Buffer][strategy];
        let specs = IspKind::Dn.default_specs();
        let mut buf = InitBuffer::new(specs.clone(), 8, 0.99).unwrap();
        for i in 0..pushes {
            let t = 0.1 + 0.2 * i as f64;
            buf.push_params(&specs.iter().map(|s| s.min + s.range() * t).collect::<Vec<_>>()).unwrap();
        }
        let static_point: Vec<f64> = specs.iter().map(|s| s.midpoint()).collect();
        let draw = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            (0..10).map(|_| buf.sample_initial(strategy, &static_point, &mut rng)).collect::<Vec<_>>()
        };
        let a = draw(seed);
        prop_assert_eq!(&a, &draw(seed));
        for v in &a {
            prop_assert!(v.iter().zip(&specs).all(|(x, s)| s.contains(*x)));
        }
    }

    #[test]
    fn gaussian_with_zero_variance_returns_mean(t in 0.05f64..0.95, n in 1usize..6, seed in any::<u64>()) {
        let specs = IspKind::Cs.default_specs();
        let mut buf = InitBuffer::new(specs.clone(), 4, 0.99).unwrap();
        let v: Vec<f64> = specs.iter().map(|s| s.min + s.range() * t).collect();
        for _ in 0..n {
            buf.push_params(&v).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = buf.sample_initial(InitStrategy::Gaussian, &[0.0, 0.0], &mut rng);
        prop_assert_eq!(s, buf.running_mean().to_vec());
    }

    #[test]
    fn rawf32_round_trip_is_bit_identical(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..c * h * w).map(|_| rand::Rng::random::<f32>(&mut rng) as f64).collect();
        let img = Tensor::new(vec![c, h, w], data).unwrap();
        let bytes = encode_image(&img, ImageFormat::Rawf32).unwrap();
        let back = decode_image(&bytes, ImageFormat::Rawf32).unwrap();
        prop_assert_eq!(&back, &img);
        prop_assert_eq!(encode_image(&back, ImageFormat::Rawf32).unwrap(), bytes);
    }

    #[test]
    fn config_round_trip_is_a_fixed_point(
        kinds in proptest::collection::vec(kind(), 1..5),
        lr in 1e-5f64..1e-1,
        seed in any::<u64>(),
        latent in 1usize..512,
    ) {
        let mut c = Config::default();
        c.pipeline = PipelineSpec::from_kinds(&kinds);
        c.trainer.lr_max = lr;
        c.trainer.lr_min = lr / 7.0;
        c.trainer.seed = seed;
        c.controller.latent_width = latent;
        let text = c.to_json();
        let again = Config::from_json(&text).unwrap();
        prop_assert_eq!(&again, &c);
        prop_assert_eq!(again.to_json(), text);
    }
}
