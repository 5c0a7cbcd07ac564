use rand::Rng;

use flowgen::convnet::{train, Network, NetworkSpec, TrainConfig, Weights};
use flowgen::featflow::{estimate_flow, FlowDefaults, FlowField};
use flowgen::genlearn::{fit_generator, fit_pca, synth_generator, FlowStack, GeneratorModel, PairRecord, Solver};
use flowgen::imageops::{apply_transform, make_dataset, read_pgm, translate, write_pgm, DatasetSpec, TransformKind, TransformSpec};
use flowgen::seeding;
use flowgen::tasks::{estimate_delta, train_augmented, AugmentConfig, Augmenter, Category, GeneratorChoice, ZeroShotConfig};
use flowgen::warp::apply_flow;

fn small_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        image_count: 5,
        image_size: 64,
        shape_area_fraction_range: (0.1, 0.3),
        angle_grid: vec![0.0, 90.0],
        delta_grid: vec![10.0, 20.0],
        scale_grid: vec![1.1],
        translate_grid: vec![4.0],
        seed,
    }
}

#[test]
fn dataset_images_survive_pgm() {
    for li in make_dataset(&small_spec(3)).unwrap() {
        let back = read_pgm(&write_pgm(&li.image).unwrap()).unwrap();
        let worst = li.image.pixels().iter().zip(back.pixels()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6, "{worst}");
    }
}

#[test]
fn translation_shows_up_as_first_tap_flow() {
    let net = Network::<f32>::init(NetworkSpec::toy_alex(), 11).unwrap();
    let image = &make_dataset(&small_spec(4)).unwrap()[2].image;
    let moved = translate(image, 4.0, 0.0).unwrap();
    let (src, dst) = (net.extract_features(image).unwrap(), net.extract_features(&moved).unwrap());
    let (_, a) = &src.layers[0];
    let (_, b) = &dst.layers[0];
    let field = estimate_flow(a, b, &FlowDefaults::with_radius(4).resolve(a)).unwrap();
    // c1 has stride 2, so 4 px is 2 cells; count cells that carry signal
    let (c, h, w) = a.dims();
    let (mut hits, mut active) = (0, 0);
    for y in 4..h - 4 {
        for x in 4..w - 4 {
            if (0..c).any(|ch| a.get(ch, y, x) > 0.0) {
                active += 1;
                hits += usize::from(field.at(y, x) == (2.0, 0.0));
            }
        }
    }
    assert!(active > 50);
    assert!(hits as f64 >= 0.9 * active as f64, "{hits}/{active}");
}

#[test]
fn warped_features_are_recovered_by_flow_estimation() {
    let mut rng = seeding::rng(5);
    let t = flowgen::Tensor3::from_vec(6, 20, 20, (0..6 * 400).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let field = FlowField::constant(20, 20, -2.0, 3.0);
    let moved = apply_flow(&t, &field).unwrap();
    let est = estimate_flow(&t, &moved, &FlowDefaults::with_radius(4).resolve(&t)).unwrap();
    for y in 5..15 {
        for x in 5..15 {
            assert_eq!(est.at(y, x), (-2.0, 3.0));
        }
    }
}

/// Flows following `V(delta) = (delta / 10) F + small per-pair noise`.
fn planted_pairs(seed: u64) -> (Vec<FlowStack>, Vec<PairRecord>) {
    let dims = vec![(6, 6), (3, 3)];
    let d = 2 * (36 + 9);
    let mut rng = seeding::rng(seed);
    let f: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut noisy = |scale: f32| -> FlowStack {
        FlowStack::new(dims.clone(), f.iter().map(|&x| scale * x + rng.gen_range(-0.01..0.01)).collect()).unwrap()
    };
    let reference: Vec<FlowStack> = (0..8).map(|_| noisy(1.0)).collect();
    let pairs = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0]
        .into_iter()
        .flat_map(|delta| (0..4).map(move |i| (i, delta)))
        .map(|(i, delta)| PairRecord {
            image_id: i,
            theta_init: 0.0,
            delta,
            flow: noisy((delta / 10.0) as f32),
        })
        .collect();
    (reference, pairs)
}

#[test]
fn fitted_generator_predicts_and_matches_amounts() {
    let (reference, pairs) = planted_pairs(6);
    let basis = fit_pca(&reference, 3).unwrap();
    let model = fit_generator(&pairs, &basis, TransformKind::Rotation, 10.0, Solver::Strict).unwrap();
    let bytes = model.to_bytes().unwrap();
    assert_eq!(GeneratorModel::read_from(bytes.as_slice()).unwrap(), model);

    let g35 = synth_generator(&model, 35.0).unwrap();
    let want = synth_generator(&model, 10.0).unwrap();
    for (a, b) in g35.data().iter().zip(want.data()) {
        assert!((a - 3.5 * b).abs() < 0.05, "{a} vs {}", 3.5 * b);
    }
    let cfg = ZeroShotConfig::default();
    for truth in [24.0, 80.0] {
        let observed = synth_generator(&model, truth).unwrap();
        let (est, residual) = estimate_delta(&observed, &model, &cfg).unwrap();
        assert_eq!(est, truth);
        assert!(residual < 1e-3);
        assert_eq!(Category::of(est, cfg.threshold), Category::of(truth, cfg.threshold));
    }
}

fn toy_samples() -> Vec<(flowgen::imageops::Image, usize)> {
    let spec = small_spec(8);
    make_dataset(&spec)
        .unwrap()
        .into_iter()
        .flat_map(|li| {
            [0.0, 90.0]
                .into_iter()
                .map(move |a| (apply_transform(&li.image, &TransformSpec::new(TransformKind::Rotation, a)).unwrap(), li.label))
        })
        .collect()
}

#[test]
fn augmentation_never_applied_is_plain_training() {
    let net = Network::<f32>::init(NetworkSpec::toy_alex(), 12).unwrap();
    let samples = toy_samples();
    let cfg = TrainConfig { epochs: 1, batch_size: 4, learning_rate: 0.01, momentum: 0.9, seed: 13 };
    let model = rotation_model_for(&NetworkSpec::toy_alex());
    let augment = |p: f64| {
        Augmenter::new(
            &AugmentConfig {
                generators: vec![GeneratorChoice { name: "r".into(), model: model.clone(), delta: 20.0 }],
                hook_layer: "c2".into(),
                selection_seed: 14,
                apply_probability: p,
            },
            net.spec(),
        )
        .unwrap()
    };
    let (plain, plain_stats) = train(&net, &samples, &cfg, None).unwrap();
    let (never, never_stats) = train_augmented(&net, &samples, &cfg, &augment(0.0)).unwrap();
    assert_eq!(plain.weights(), never.weights());
    assert_eq!(plain_stats, never_stats);
    let (always, stats) = train_augmented(&net, &samples, &cfg, &augment(1.0)).unwrap();
    assert_ne!(always.weights(), plain.weights());
    assert!(stats.iter().all(|s| s.loss.is_finite()));

    let bytes = always.weights().to_bytes();
    assert_eq!(Weights::<f32>::read_from(bytes.as_slice()).unwrap().tensors, always.weights().tensors);
}

/// A rotation model over the toy network's taps whose generator is a
/// constant one-cell shift per 10 degrees.
fn rotation_model_for(spec: &NetworkSpec) -> GeneratorModel {
    let dims = spec.flow_layer_dims().unwrap();
    let unit = |scale: f32| -> FlowStack {
        let fields: Vec<FlowField> = dims.iter().map(|&(h, w)| FlowField::constant(h, w, scale, 0.0)).collect();
        flowgen::genlearn::stack_flows(&fields)
    };
    let rows: Vec<FlowStack> = (0..4).map(|i| unit(1.0 + 0.01 * i as f32)).collect();
    let basis = fit_pca(&rows, 2).unwrap();
    let pairs: Vec<PairRecord> = [10.0, 20.0, 30.0]
        .into_iter()
        .map(|delta| PairRecord { image_id: 0, theta_init: 0.0, delta, flow: unit((delta / 10.0) as f32) })
        .collect();
    fit_generator(&pairs, &basis, TransformKind::Rotation, 10.0, Solver::MinimumNorm).unwrap()
}
