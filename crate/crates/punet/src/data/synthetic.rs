//! Synthetic dataset: class-dependent oriented textures over class-tinted
//! backgrounds. Separable enough for smoke training, deterministic per seed.

use rand::Rng;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::util::rng_from;

/// Generates `classes * n_per_class` RGB images of side `size`.
///
/// Each class owns a texture orientation and a color tint; samples jitter
/// frequency, phase, and position, plus uniform pixel noise.
pub fn make_synthetic<E: Scalar>(
    classes: usize,
    n_per_class: usize,
    size: usize,
    seed: u64,
) -> Result<Dataset<E>> {
    if classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if n_per_class == 0 || size < 4 {
        return Err(Error::InvalidConfig(
            "n_per_class must be positive and size at least 4".into(),
        ));
    }
    let mut rng = rng_from(seed);
    let n = classes * n_per_class;
    let plane = size * size;
    let mut data = vec![0f64; n * 3 * plane];
    let mut labels = Vec::with_capacity(n);
    let tau = std::f64::consts::TAU;
    for img in 0..n {
        let class = img % classes;
        labels.push(class);
        let angle = std::f64::consts::PI * (class as f64 + 0.5) / classes as f64
            + rng.random_range(-0.08..0.08);
        let period = rng.random_range(4.0..7.0);
        let phase = rng.random_range(0.0..tau);
        let cx = size as f64 / 2.0 + rng.random_range(-(size as f64) / 6.0..size as f64 / 6.0);
        let cy = size as f64 / 2.0 + rng.random_range(-(size as f64) / 6.0..size as f64 / 6.0);
        let sigma = 0.36 * size as f64;
        let (sin_a, cos_a) = angle.sin_cos();
        // per-class base color on a ring through RGB space
        let base: [f64; 3] = std::array::from_fn(|ch| {
            0.32 + 0.36 * (0.5 + 0.5 * (tau * class as f64 / classes as f64 + ch as f64 * tau / 3.0).sin())
        });
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let along = dx * cos_a + dy * sin_a;
                let envelope = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                let texture = (tau * along / period + phase).cos() * envelope;
                for ch in 0..3 {
                    let noise = rng.random_range(-0.05..0.05);
                    let v = (base[ch] + 0.24 * texture + noise).clamp(0.0, 1.0);
                    data[((img * 3 + ch) * size + y) * size + x] = v;
                }
            }
        }
    }
    let images = Tensor::new(
        vec![n, 3, size, size],
        data.into_iter().map(E::from_f64).collect(),
    )?;
    let class_names = (0..classes).map(|c| format!("class_{c}")).collect();
    Dataset::new(images, labels, class_names, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn respects_class_and_sample_counts() {
        let ds: Dataset<f32> = make_synthetic(3, 5, 8, 0).unwrap();
        assert_eq!(ds.len(), 15);
        assert_eq!(ds.num_classes(), 3);
        for c in 0..3 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == c).count(), 5);
        }
    }

    #[test]
    fn identical_seeds_identical_datasets() {
        let a: Dataset<f32> = make_synthetic(4, 3, 12, 9).unwrap();
        let b: Dataset<f32> = make_synthetic(4, 3, 12, 9).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
        let c: Dataset<f32> = make_synthetic(4, 3, 12, 10).unwrap();
        assert_ne!(a.images.data(), c.images.data());
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let ds: Dataset<f64> = make_synthetic(10, 4, 32, 1).unwrap();
        assert!(ds.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn fewer_than_two_classes_is_rejected() {
        assert!(make_synthetic::<f32>(1, 5, 8, 0).is_err());
    }
}
