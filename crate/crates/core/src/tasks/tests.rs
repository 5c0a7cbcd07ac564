use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::convnet::{Network, NetworkSpec, TrainConfig};
use crate::error::Error;
use crate::featflow::FlowDefaults;
use crate::genlearn::{synth_generator, FlowBasis, FlowStack, GeneratorModel};
use crate::imageops::{Image, TransformKind};
use crate::seeding;

/// Orthonormal basis of coordinate vectors over the toy-alex tap dims.
fn coordinate_basis(k: usize) -> FlowBasis {
    let layer_dims = vec![(32, 32), (16, 16), (8, 8)];
    let d = 2688;
    let unit = |i: usize| {
        let mut v = vec![0.0f32; d];
        v[i] = 1.0;
        v
    };
    FlowBasis {
        layer_dims,
        mean: (0..d).map(|i| 0.1 * ((i % 7) as f32 - 3.0)).collect(),
        components: (0..k).map(|i| unit(2048 + 512 + 17 * i)).collect(),
        eigenvalues: (0..k).map(|i| 1.0 / (i + 1) as f32).collect(),
    }
}

/// A model whose generator grows with the amount: `G = 0.5 r M + r U_1 + 0.3 r^2 U_2`.
fn growing_model() -> GeneratorModel {
    let mut coefficients = vec![0.0f32; 12];
    coefficients[1] = 0.5;
    coefficients[4] = 1.0;
    coefficients[8] = 0.3;
    GeneratorModel {
        transform_kind: TransformKind::Rotation,
        reference_delta: 10.0,
        basis: coordinate_basis(3),
        coefficients,
    }
}

#[test]
fn exact_generator_matches_itself() {
    let model = growing_model();
    let cfg = ZeroShotConfig::default();
    let (d, r) = estimate_delta(&synth_generator(&model, 30.0).unwrap(), &model, &cfg).unwrap();
    assert_eq!(d, 30.0);
    assert!(r < 1e-4);
    assert_eq!(categorize(&synth_generator(&model, 30.0).unwrap(), &model, &cfg).unwrap(), Category::LessThanThreshold);
    assert_eq!(categorize(&synth_generator(&model, 80.0).unwrap(), &model, &cfg).unwrap(), Category::GreaterThanThreshold);
    assert_eq!(Category::of(60.0, 60.0), Category::GreaterThanThreshold);
}

#[test]
fn noisy_generator_is_located() {
    let model = growing_model();
    let matcher = DeltaMatcher::new(&model, &ZeroShotConfig::default()).unwrap();
    let g = synth_generator(&model, 80.0).unwrap();
    let sigma = 0.01 * g.norm() / (g.dimension() as f64).sqrt();
    let mut rng = seeding::rng(5);
    for _ in 0..50 {
        let noisy: Vec<f32> = g
            .data()
            .iter()
            .map(|&x| x + (sigma * rand_distr_normal(&mut rng)) as f32)
            .collect();
        let (d, _) = matcher.estimate(&FlowStack::new(g.layer_dims().to_vec(), noisy).unwrap()).unwrap();
        assert!((d - 80.0).abs() <= 4.0, "estimated {d}");
    }
}

/// Standard normal draw by Box-Muller.
fn rand_distr_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[test]
fn zero_flow_picks_the_smallest_amount() {
    let model = growing_model();
    let zero = FlowStack::zeros(model.basis.layer_dims.clone());
    let matcher = DeltaMatcher::new(&model, &ZeroShotConfig::default()).unwrap();
    let res = matcher.residuals(&zero).unwrap();
    assert!(res.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(matcher.estimate(&zero).unwrap().0, 0.0);
}

#[test]
fn returned_residual_is_minimal() {
    let model = growing_model();
    let matcher = DeltaMatcher::new(&model, &ZeroShotConfig::default()).unwrap();
    let mut rng = seeding::rng(6);
    let obs = FlowStack::new(model.basis.layer_dims.clone(), (0..2688).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let (_, best) = matcher.estimate(&obs).unwrap();
    assert!(matcher.residuals(&obs).unwrap().iter().all(|&r| best <= r));
}

#[test]
fn config_and_shape_errors() {
    let model = growing_model();
    let bad_grid = ZeroShotConfig { delta_grid_fine: vec![0.0, 10.0, 10.0, 70.0], threshold: 60.0 };
    assert!(DeltaMatcher::new(&model, &bad_grid).is_err());
    let one_sided = ZeroShotConfig { delta_grid_fine: vec![0.0, 10.0, 20.0], threshold: 60.0 };
    assert!(DeltaMatcher::new(&model, &one_sided).is_err());
    let other = FlowStack::zeros(vec![(4, 4)]);
    assert!(matches!(estimate_delta(&other, &model, &ZeroShotConfig::default()), Err(Error::Shape(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn category_ignores_common_scaling(scale in 0.1f32..10.0, delta in 0.0f64..120.0, seed in 0u64..1000) {
        let model = growing_model();
        let mut scaled = model.clone();
        scaled.coefficients.iter_mut().for_each(|c| *c *= scale);
        let mut rng = seeding::rng(seed);
        let g = synth_generator(&model, delta).unwrap();
        let obs: Vec<f32> = g.data().iter().map(|&x| x + rng.gen_range(-0.05..0.05)).collect();
        let obs_scaled: Vec<f32> = obs.iter().map(|&x| x * scale).collect();
        let dims = model.basis.layer_dims.clone();
        let cfg = ZeroShotConfig::default();
        let a = categorize(&FlowStack::new(dims.clone(), obs).unwrap(), &model, &cfg).unwrap();
        let b = categorize(&FlowStack::new(dims, obs_scaled).unwrap(), &scaled, &cfg).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn blob(seed: u64) -> Image {
    let mut rng = seeding::rng(seed);
    let (cx, cy) = (rng.gen_range(20.0..44.0), rng.gen_range(20.0..44.0));
    let px = (0..64 * 64)
        .map(|i| {
            let (x, y) = ((i % 64) as f64, (i / 64) as f64);
            (-((x - cx).powi(2) + (y - cy).powi(2)) / 60.0).exp() as f32
        })
        .collect();
    Image::new(64, 64, px).unwrap()
}

#[test]
fn identical_pairs_are_small_rotations() {
    let net = Network::<f32>::init(NetworkSpec::toy_alex(), 1).unwrap();
    let pairs: Vec<_> = (0..3).map(|i| (blob(i), blob(i), 0.0)).collect();
    let report = zero_shot_eval(&net, &growing_model(), &pairs, &ZeroShotConfig::default(), &FlowDefaults::toy_alex()).unwrap();
    assert_eq!(report.accuracy, 1.0);
    assert!(report.pairs.iter().all(|r| r.verdict == Category::LessThanThreshold && r.estimated_delta == 0.0));
    let again = zero_shot_eval(&net, &growing_model(), &pairs, &ZeroShotConfig::default(), &FlowDefaults::toy_alex()).unwrap();
    assert_eq!(report, again);
}

fn six_generators() -> AugmentConfig {
    let model = growing_model();
    AugmentConfig {
        generators: [10.0, -10.0, 20.0, 30.0, 5.0, -5.0]
            .iter()
            .enumerate()
            .map(|(i, &delta)| GeneratorChoice { name: format!("g{i}"), model: model.clone(), delta })
            .collect(),
        hook_layer: "c3".into(),
        selection_seed: 42,
        apply_probability: 1.0,
    }
}

#[test]
fn selection_is_uniform_and_reproducible() {
    let aug = Augmenter::new(&six_generators(), &NetworkSpec::toy_alex()).unwrap();
    let mut counts = [0usize; 6];
    for b in 0..6000 {
        counts[aug.select(b).unwrap()] += 1;
    }
    assert!(counts.iter().all(|&c| (900..=1100).contains(&c)), "{counts:?}");
    assert_eq!(aug.augment_hook(17), aug.augment_hook(17));
    assert_eq!(aug.augment_hook(17).0, "c3");
    assert_eq!((aug.fields()[0].height(), aug.fields()[0].width()), (8, 8));
    let other = Augmenter::new(&AugmentConfig { selection_seed: 43, ..six_generators() }, &NetworkSpec::toy_alex()).unwrap();
    assert!((0..50).any(|b| other.select(b) != aug.select(b)));
}

#[test]
fn zero_probability_never_warps() {
    let cfg = AugmentConfig { apply_probability: 0.0, ..six_generators() };
    let aug = Augmenter::new(&cfg, &NetworkSpec::toy_alex()).unwrap();
    for b in 0..200 {
        let (_, f) = aug.augment_hook(b);
        assert!(f.is_zero());
    }
    let bad = AugmentConfig { hook_layer: "c7".into(), ..six_generators() };
    assert!(Augmenter::new(&bad, &NetworkSpec::toy_alex()).is_err());
    let bad = AugmentConfig { apply_probability: 1.5, ..six_generators() };
    assert!(Augmenter::new(&bad, &NetworkSpec::toy_alex()).is_err());
}

#[test]
fn unused_augmenter_matches_plain_training() {
    let spec = NetworkSpec::toy_alex();
    let net = Network::<f32>::init(spec.clone(), 2).unwrap();
    let samples: Vec<_> = (0..10).map(|i| (blob(i), i as usize % 5)).collect();
    let config = TrainConfig { epochs: 2, batch_size: 4, learning_rate: 0.01, momentum: 0.9, seed: 3 };
    let aug = Augmenter::new(&AugmentConfig { apply_probability: 0.0, ..six_generators() }, &spec).unwrap();
    let plain = crate::convnet::train(&net, &samples, &config, None).unwrap();
    assert_eq!(train_augmented(&net, &samples, &config, &aug).unwrap(), plain);
    let warped = train_augmented(&net, &samples, &config, &Augmenter::new(&six_generators(), &spec).unwrap()).unwrap();
    assert!(warped.1.iter().all(|e| e.loss.is_finite()));
    assert_ne!(warped.0.weights(), plain.0.weights());
}
