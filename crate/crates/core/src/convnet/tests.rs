use rand::Rng;

use super::*;
use crate::error::Error;
use crate::featflow::FlowField;
use crate::imageops::Image;
use crate::seeding;
use crate::tensor::Tensor3;

fn random_input(n: usize, seed: u64) -> Tensor3<f64> {
    let mut rng = seeding::rng(seed);
    Tensor3::from_vec(1, n, n, (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn random_image(n: usize, seed: u64) -> Image {
    let mut rng = seeding::rng(seed);
    Image::new(n, n, (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn small_net() -> Network<f64> {
    let mut net = Network::<f64>::init(NetworkSpec::toy_small(3), 7).unwrap();
    // nonzero biases so the check also covers them
    let mut rng = seeding::rng(8);
    for t in net.weights_mut().tensors.iter_mut().skip(1).step_by(2) {
        t.data.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
    }
    net
}

/// Largest relative error between analytic and central-difference gradients
/// over `probes` random parameter entries. Probes whose +h and -h points sit
/// in a different activation pattern than the base point straddle a ReLU or
/// max-pool kink, where central differences are meaningless; those are
/// redrawn.
fn max_gradient_error(net: &Network<f64>, input: &Tensor3<f64>, label: usize, hook: Option<&WarpHook>, probes: usize) -> f64 {
    let (_, grads) = net.backward_tensor(input, label, hook).unwrap();
    let base = net.activation_pattern(input, hook).unwrap();
    let mut rng = seeding::rng(99);
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < probes {
        let t = rng.gen_range(0..grads.tensors.len());
        let i = rng.gen_range(0..grads.tensors[t].data.len());
        let mut plus = net.clone();
        plus.weights_mut().tensors[t].data[i] += h;
        let mut minus = net.clone();
        minus.weights_mut().tensors[t].data[i] -= h;
        if plus.activation_pattern(input, hook).unwrap() != base || minus.activation_pattern(input, hook).unwrap() != base {
            continue;
        }
        done += 1;
        let numeric = (plus.loss_tensor(input, label, hook).unwrap() - minus.loss_tensor(input, label, hook).unwrap()) / (2.0 * h);
        let analytic = grads.tensors[t].data[i];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    let net = small_net();
    for seed in 0..3 {
        let err = max_gradient_error(&net, &random_input(8, seed), seed as usize % 3, None, 50);
        assert!(err < 1e-3, "relative error {err}");
    }
}

#[test]
fn hooked_gradients_match_finite_differences() {
    let net = small_net();
    let hooks = [
        WarpHook { layer: "c1".into(), field: FlowField::constant(8, 8, 0.6, -1.3) },
        WarpHook { layer: "c2".into(), field: FlowField::constant(4, 4, -0.5, 0.25) },
    ];
    for (seed, hook) in hooks.iter().enumerate() {
        let err = max_gradient_error(&net, &random_input(8, 10 + seed as u64), 1, Some(hook), 50);
        assert!(err < 1e-3, "relative error {err} with hook at {}", hook.layer);
    }
}

#[test]
fn forward_is_deterministic_and_sized() {
    let net = Network::<f32>::init(NetworkSpec::toy_alex(), 3).unwrap();
    let image = random_image(64, 1);
    let (taps, scores) = net.forward(&image).unwrap();
    assert_eq!(scores.len(), 5);
    let dims: Vec<_> = taps.tensors().map(|t| t.dims()).collect();
    assert_eq!(dims, vec![(8, 32, 32), (16, 16, 16), (32, 8, 8)]);
    assert_eq!(net.forward(&image).unwrap(), (taps, scores));
    assert_eq!(Network::<f32>::init(NetworkSpec::toy_alex(), 3).unwrap(), net);
}

#[test]
fn zero_image_gives_zero_taps() {
    let net = Network::<f32>::init(NetworkSpec::toy_alex(), 4).unwrap();
    let taps = net.extract_features(&Image::blank(64, 64).unwrap()).unwrap();
    assert!(taps.tensors().all(|t| t.as_slice().iter().all(|&v| v == 0.0)));
}

#[test]
fn first_tap_is_translation_equivariant() {
    let net = small_net();
    let mut a = Tensor3::zeros(1, 8, 8);
    let mut b = Tensor3::zeros(1, 8, 8);
    let mut rng = seeding::rng(5);
    for y in 2..5 {
        for x in 2..5 {
            let v = rng.gen_range(0.0..1.0);
            a.set(0, y, x, v);
            b.set(0, y + 1, x + 1, v);
        }
    }
    let fa = net.forward_tensor(&a, None).unwrap().0;
    let fb = net.forward_tensor(&b, None).unwrap().0;
    let (ta, tb) = (fa.get("c1").unwrap(), fb.get("c1").unwrap());
    for c in 0..3 {
        for y in 0..7 {
            for x in 0..7 {
                assert!((ta.get(c, y, x) - tb.get(c, y + 1, x + 1)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn zero_hook_changes_nothing() {
    let net = Network::<f32>::init(NetworkSpec::toy_alex(), 5).unwrap();
    let image = random_image(64, 2);
    let hook = WarpHook { layer: "c3".into(), field: FlowField::zeros(8, 8) };
    assert_eq!(net.forward_hooked(&image, Some(&hook)).unwrap(), net.forward(&image).unwrap());
    assert_eq!(net.backward(&image, 2, Some(&hook)).unwrap(), net.backward(&image, 2, None).unwrap());
}

#[test]
fn hook_validation() {
    let net = Network::<f32>::init(NetworkSpec::toy_alex(), 5).unwrap();
    let image = random_image(64, 3);
    let wrong_size = WarpHook { layer: "c3".into(), field: FlowField::zeros(16, 16) };
    assert!(matches!(net.forward_hooked(&image, Some(&wrong_size)), Err(Error::Shape(_))));
    let unknown = WarpHook { layer: "c9".into(), field: FlowField::zeros(8, 8) };
    assert!(matches!(net.forward_hooked(&image, Some(&unknown)), Err(Error::InvalidArgument(_))));
    assert!(net.forward(&random_image(32, 3)).is_err());
    assert!(net.backward(&image, 5, None).is_err());
}

#[test]
fn initial_loss_is_near_uniform() {
    let net = Network::<f32>::init(NetworkSpec::toy_alex(), 6).unwrap();
    for seed in 0..4 {
        let loss = net.loss(&random_image(64, 20 + seed), seed as usize, None).unwrap();
        assert!((loss - 5f64.ln()).abs() < 0.5, "loss {loss}");
    }
}

#[test]
fn cnw1_round_trip() {
    let net = Network::<f32>::init(NetworkSpec::toy_alex(), 9).unwrap();
    let bytes = net.weights().to_bytes();
    assert_eq!(&bytes[..4], b"CNW1");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 5);
    let back = Weights::<f32>::read_from(bytes.as_slice()).unwrap();
    assert_eq!(back.tensors, net.weights().tensors);
    assert!(Network::new(NetworkSpec::toy_small(5), back).is_err());
}

/// Five classes of 16x16 images, each a bright bar in a class-specific
/// place plus noise.
fn bar_dataset(count: usize, seed: u64) -> Vec<(Image, usize)> {
    let mut rng = seeding::rng(seed);
    (0..count)
        .map(|i| {
            let label = i % 5;
            let mut px = vec![0.0f32; 256];
            for (j, p) in px.iter_mut().enumerate() {
                let (x, y) = (j % 16, j / 16);
                let on = match label {
                    0 => (6..10).contains(&x),
                    1 => (6..10).contains(&y),
                    2 => x == y || x + 1 == y,
                    3 => x < 4 && y < 4,
                    _ => x >= 12 && y >= 12,
                };
                *p = if on { 0.8 } else { 0.0 } + rng.gen_range(0.0..0.2);
            }
            (Image::new(16, 16, px).unwrap(), label)
        })
        .collect()
}

fn bar_spec() -> NetworkSpec {
    use LayerSpec::*;
    NetworkSpec {
        input_size: 16,
        class_count: 5,
        layers: vec![
            Conv { out_channels: 4, kernel: 3, stride: 1, pad: 1 },
            Relu,
            MaxPool { kernel: 2, stride: 2 },
            Conv { out_channels: 8, kernel: 3, stride: 1, pad: 1 },
            Relu,
            Flatten,
            FullyConnected { out_units: 5 },
        ],
        taps: vec![TapSpec { name: "c1".into(), after: 1 }, TapSpec { name: "c2".into(), after: 4 }],
    }
}

fn config(learning_rate: f64) -> TrainConfig {
    TrainConfig { epochs: 12, batch_size: 8, learning_rate, momentum: 0.9, seed: 11 }
}

#[test]
fn training_learns_a_separable_task() {
    let net = Network::<f32>::init(bar_spec(), 1).unwrap();
    let (trained, history) = train(&net, &bar_dataset(80, 2), &config(0.02), None).unwrap();
    assert_eq!(history.len(), 12);
    assert!(history.last().unwrap().loss < history[0].loss);
    let acc = accuracy(&trained, &bar_dataset(50, 3)).unwrap();
    assert!(acc > 0.9, "held-out accuracy {acc}");
}

#[test]
fn training_is_reproducible() {
    let net = Network::<f32>::init(bar_spec(), 1).unwrap();
    let data = bar_dataset(30, 4);
    let a = train(&net, &data, &config(0.02), None).unwrap();
    let b = train(&net, &data, &config(0.02), None).unwrap();
    assert_eq!(a, b);
    let (frozen, _) = train(&net, &data, &config(0.0), None).unwrap();
    assert_eq!(frozen.weights(), net.weights());
}

#[test]
fn training_rejects_bad_input() {
    let net = Network::<f32>::init(bar_spec(), 1).unwrap();
    assert!(train(&net, &[], &config(0.1), None).is_err());
    let mut data = bar_dataset(5, 4);
    data[0].1 = 7;
    assert!(train(&net, &data, &config(0.1), None).is_err());
    let mut bad = config(0.1);
    bad.batch_size = 0;
    assert!(train(&net, &bar_dataset(5, 4), &bad, None).is_err());
}

#[test]
fn divergence_is_reported() {
    let net = Network::<f32>::init(bar_spec(), 1).unwrap();
    let result = train(&net, &bar_dataset(20, 4), &config(1e30), None);
    assert!(matches!(result, Err(Error::TrainingDiverged { .. })), "{result:?}");
}
