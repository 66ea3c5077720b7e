use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::network::LayerSpec;
use crate::tensor::Tensor;

/// He-normal weights, `N(0, sqrt(2 / fan_in))`, deterministic in `seed`.
pub fn he_init(layer: &LayerSpec, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    he_init_with(layer, &mut rng)
}

pub fn he_init_with(layer: &LayerSpec, rng: &mut impl rand::Rng) -> Result<Tensor> {
    let (fan_in, shape) = match (layer.fan_in(), layer.weight_shape()) {
        (Some(f), Some(s)) => (f, s),
        _ => return Err(Error::Config(format!("{} layers have no weights", layer.name()))),
    };
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite positive std");
    Ok(Tensor::from_fn(&shape, |_| normal.sample(rng)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_fan_in_sets_std() {
        let layer = LayerSpec::Linear { n_in: 100, n_out: 10 };
        assert_eq!(layer.fan_in(), Some(100));
        let w = he_init(&layer, 3).unwrap();
        assert_eq!(w.shape(), &[10, 100]);
    }

    #[test]
    fn same_seed_same_tensor() {
        let layer = LayerSpec::Linear { n_in: 7, n_out: 5 };
        assert_eq!(he_init(&layer, 11).unwrap(), he_init(&layer, 11).unwrap());
        assert_ne!(he_init(&layer, 11).unwrap(), he_init(&layer, 12).unwrap());
    }

    #[test]
    fn pooling_has_no_init() {
        assert!(he_init(&LayerSpec::Avgpool2x2, 0).is_err());
    }
}
