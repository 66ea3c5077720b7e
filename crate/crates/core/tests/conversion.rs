mod common;

use common::rng;
use iirsnn::ann::{ann_forward, Mode};
use iirsnn::conversion::{
    collect_preactivations, nearest_rank, percentile_threshold, CalibrationMode, THRESHOLD_FLOOR,
};
use iirsnn::data::{synthetic_dataset, SplitConfig, SyntheticConfig};
use iirsnn::kernels::linear_forward;
use iirsnn::{
    convert, evaluate_ann, evaluate_snn, fuse_batchnorm, train_ann, AnnParams, AnnTrainConfig, ConversionConfig,
    NetworkSpec, Tensor,
};
use proptest::prelude::*;
use rand::Rng;

fn randomize_bn(params: &mut AnnParams, seed: u64) {
    let mut r = rng(seed);
    for bn in params.bn.iter_mut().flatten() {
        for t in [&mut bn.gamma, &mut bn.beta, &mut bn.running_mean] {
            t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-1.0..1.5));
        }
        bn.running_var
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = r.random_range(0.05..3.0));
    }
}

#[test]
fn fused_network_matches_batchnorm_network() {
    for (spec, seed) in [
        (NetworkSpec::conv_small([1, 8, 8], 4), 1),
        (NetworkSpec::vgg6_mini([3, 8, 8], 10), 2),
        (NetworkSpec::deep_mlp([1, 4, 4], 3, 4, 12), 3),
    ] {
        let mut ann = AnnParams::init(&spec, seed).unwrap();
        randomize_bn(&mut ann, seed + 10);
        let fused = fuse_batchnorm(&ann).unwrap();
        let mut r = rng(seed + 20);
        let shape: Vec<usize> = std::iter::once(100).chain(spec.input).collect();
        let x = Tensor::from_fn(&shape, |_| r.random_range(-2.0..2.0));
        let a = ann_forward(&ann, &x, Mode::Eval).unwrap();
        let b = fused.forward(&x).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-8, "{}: {}", spec.name, a.max_abs_diff(&b));
    }
}

fn trained_fixture() -> (iirsnn::DatasetHandle, AnnParams) {
    let data = synthetic_dataset(
        &SyntheticConfig {
            samples_per_class: 60,
            ..SyntheticConfig::default()
        },
        &SplitConfig::default(),
    )
    .unwrap();
    let cfg = AnnTrainConfig {
        epochs: 6,
        batch_size: 16,
        initial_lr: 0.05,
        ..AnnTrainConfig::default()
    };
    let ann = train_ann(&NetworkSpec::conv_small([1, 8, 8], 4), &cfg, &data)
        .unwrap()
        .params;
    (data, ann)
}

#[test]
fn converted_network_keeps_most_accuracy() {
    let (data, ann) = trained_fixture();
    let ann_acc = evaluate_ann(&ann, &data.test).unwrap();
    let cfg = ConversionConfig {
        timesteps: 5,
        ..ConversionConfig::default()
    };
    let snn = convert(&ann, &data.train.head(128).images, &cfg).unwrap();
    assert!(snn.thresholds.iter().all(|&v| v >= THRESHOLD_FLOOR));
    assert_eq!(snn.leaks, vec![1.0; snn.thresholds.len()]);
    let acc = evaluate_snn(&snn, &data.test, 5).unwrap().accuracy;
    assert!(acc > ann_acc - 0.3, "snn {acc} vs ann {ann_acc}");
}

#[test]
fn first_threshold_is_percentile_of_first_drive() {
    let (data, ann) = trained_fixture();
    let fused = fuse_batchnorm(&ann).unwrap();
    let calib = data.train.head(40).images;
    let cfg = ConversionConfig {
        timesteps: 3,
        ..ConversionConfig::default()
    };
    let stats = collect_preactivations(&fused, &calib, &cfg).unwrap();
    let spec = &fused.spec;
    let iirsnn::LayerSpec::Conv2d(c) = &spec.layers[0] else {
        panic!()
    };
    let drive = iirsnn::kernels::conv2d_forward(&calib, &fused.weights[0], &fused.biases[0], c).unwrap();
    // Direct encoding repeats the same drive every timestep.
    assert_eq!(stats.layers[0].values.len(), 3 * drive.len());
    let th = percentile_threshold(&stats, 90.0).unwrap();
    assert_eq!(th[0], nearest_rank(drive.data(), 90.0).unwrap());
}

#[test]
fn analog_mode_uses_relu_network_preactivations() {
    let spec = NetworkSpec::deep_mlp([1, 2, 2], 2, 2, 5);
    let mut ann = AnnParams::init(&spec, 7).unwrap();
    randomize_bn(&mut ann, 8);
    let fused = fuse_batchnorm(&ann).unwrap();
    let mut r = rng(9);
    let x = Tensor::from_fn(&[30, 1, 2, 2], |_| r.random_range(0.0..1.0));
    let cfg = ConversionConfig {
        mode: CalibrationMode::Analog,
        ..ConversionConfig::default()
    };
    let stats = collect_preactivations(&fused, &x, &cfg).unwrap();
    let z1 = linear_forward(&x, &fused.weights[0], &fused.biases[0]).unwrap();
    let z2 = linear_forward(&z1.map(|v| v.max(0.0)), &fused.weights[1], &fused.biases[1]).unwrap();
    assert_eq!(stats.layers[0].values, z1.data());
    assert_eq!(stats.layers[1].values, z2.data());
}

#[test]
fn reservoir_cap_bounds_memory() {
    let (data, ann) = trained_fixture();
    let fused = fuse_batchnorm(&ann).unwrap();
    let cfg = ConversionConfig {
        timesteps: 2,
        reservoir_cap: Some(500),
        ..ConversionConfig::default()
    };
    let stats = collect_preactivations(&fused, &data.train.head(64).images, &cfg).unwrap();
    for r in &stats.layers {
        assert!(r.values.len() <= 500);
        assert!(r.seen > 500);
    }
}

proptest! {
    #[test]
    fn percentile_ignores_order(mut xs in prop::collection::vec(-10.0f64..10.0, 1..200), p in 1.0f64..=100.0, seed in 0u64..100) {
        let a = nearest_rank(&xs, p).unwrap();
        let mut r = rng(seed);
        use rand::seq::SliceRandom;
        xs.shuffle(&mut r);
        prop_assert_eq!(a, nearest_rank(&xs, p).unwrap());
        prop_assert!(xs.contains(&a));
    }

    #[test]
    fn percentile_monotone(xs in prop::collection::vec(-10.0f64..10.0, 1..200), p in 1.0f64..100.0, q in 1.0f64..100.0) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        prop_assert!(nearest_rank(&xs, lo).unwrap() <= nearest_rank(&xs, hi).unwrap());
    }

    #[test]
    fn percentile_counts(xs in prop::collection::vec(-10.0f64..10.0, 1..200), p in 1.0f64..=100.0) {
        // At least p% of values are <= the result.
        let v = nearest_rank(&xs, p).unwrap();
        let below = xs.iter().filter(|&&x| x <= v).count() as f64;
        prop_assert!(below >= p / 100.0 * xs.len() as f64 - 1e-6);
    }
}
