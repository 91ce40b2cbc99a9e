//! Poisson photon-noise corruption and the relative degradation metric.

use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::util::rng_from;

/// Poisson corruption settings. `peak` is the photon-count scale: a pixel
/// value of 1.0 maps to `peak` expected events.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub peak: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { peak: 255.0, seed: 0 }
    }
}

/// Applies signal-dependent Poisson noise once: per pixel `x`, draw
/// `k ~ Poisson(x * peak)` and output `min(k / peak, 1)`. Deterministic under
/// the seed; labels and shape are preserved.
pub fn poisson_corrupt<E: Scalar>(ds: &Dataset<E>, cfg: &NoiseConfig) -> Result<Dataset<E>> {
    if !(cfg.peak > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "noise peak must be positive, got {}",
            cfg.peak
        )));
    }
    let mut rng = rng_from(cfg.seed);
    let peak = cfg.peak;
    let data: Vec<E> = ds
        .images
        .data()
        .iter()
        .map(|&v| {
            let lambda = v.as_f64() * peak;
            let k = if lambda > 0.0 {
                Poisson::new(lambda).expect("positive lambda").sample(&mut rng)
            } else {
                0.0
            };
            E::from_f64((k / peak).min(1.0))
        })
        .collect();
    Dataset::new(
        Tensor::new(ds.images.shape().to_vec(), data)?,
        ds.labels.clone(),
        ds.class_names.clone(),
        ds.split,
    )
}

/// Relative accuracy drop under noise, in percent:
/// `(clean - noisy) / clean * 100`.
pub fn noise_degradation(acc_clean: f64, acc_noisy: f64) -> Result<f64> {
    if !(acc_clean > 0.0) {
        return Err(Error::Domain(format!(
            "clean accuracy must be positive, got {acc_clean}"
        )));
    }
    Ok((acc_clean - acc_noisy) / acc_clean * 100.0)
}
