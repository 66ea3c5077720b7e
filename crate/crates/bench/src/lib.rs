//! Deterministic fixtures shared by the benchmarks.

use iirsnn::{ConversionConfig, NetworkSpec, SnnParams, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// A converted `conv-small` network on 1x28x28 inputs with untrained weights.
pub fn conv_small_snn(seed: u64) -> SnnParams {
    let spec = NetworkSpec::conv_small([1, 28, 28], 10);
    let ann = iirsnn::AnnParams::init(&spec, seed).expect("valid spec");
    let calib = random_tensor(&[16, 1, 28, 28], seed + 1).map(f64::abs);
    let cfg = ConversionConfig {
        timesteps: 2,
        ..ConversionConfig::default()
    };
    iirsnn::convert(&ann, &calib, &cfg).expect("conversion")
}
