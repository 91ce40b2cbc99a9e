//! Dataset ingestion, normalization, augmentation, and noise corruption.

mod augment;
mod cifar;
mod folder;
mod noise;
mod split;
mod synthetic;

pub use augment::{augment, augment_epoch, AugmentConfig, ResizedCropConfig};
pub use cifar::{load_cifar10, write_cifar10_batch, CIFAR_CLASS_NAMES};
pub use folder::load_image_folder;
pub use noise::{noise_degradation, poisson_corrupt, NoiseConfig};
pub use split::stratified_split;
pub use synthetic::make_synthetic;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Labeled image set with pixels in `[0, 1]` before normalization.
#[derive(Debug, Clone)]
pub struct Dataset<E: Scalar> {
    /// `[N, C, H, W]` pixel tensor.
    pub images: Tensor<E>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl<E: Scalar> Dataset<E> {
    pub fn new(
        images: Tensor<E>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        split: Split,
    ) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "dataset images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        let n = images.shape()[0];
        if n == 0 || labels.len() != n {
            return Err(Error::InvalidConfig(format!(
                "dataset needs one label per image: {n} images, {} labels",
                labels.len()
            )));
        }
        let classes = class_names.len();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Domain(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if !images.all_finite() {
            return Err(Error::NumericalOverflow("dataset images contain non-finite pixels".into()));
        }
        Ok(Self {
            images,
            labels,
            class_names,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// (channels, height, width) of one image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    fn image_numel(&self) -> usize {
        let (c, h, w) = self.image_dims();
        c * h * w
    }

    /// Pixel slice of image `idx`.
    pub fn image(&self, idx: usize) -> &[E] {
        let sz = self.image_numel();
        &self.images.data()[idx * sz..(idx + 1) * sz]
    }

    /// New dataset holding the given rows in order.
    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidConfig("subset must not be empty".into()));
        }
        let sz = self.image_numel();
        let mut data = Vec::with_capacity(indices.len() * sz);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let (c, h, w) = self.image_dims();
        Self::new(
            Tensor::new(vec![indices.len(), c, h, w], data)?,
            labels,
            self.class_names.clone(),
            split,
        )
    }

    /// Concatenates two datasets with identical image dims and class lists.
    pub fn concat(&self, other: &Self, split: Split) -> Result<Self> {
        if self.image_dims() != other.image_dims() || self.class_names != other.class_names {
            return Err(Error::ShapeMismatch(
                "concat requires matching image dims and classes".into(),
            ));
        }
        let mut data = self.images.data().to_vec();
        data.extend_from_slice(other.images.data());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let (c, h, w) = self.image_dims();
        Self::new(
            Tensor::new(vec![self.len() + other.len(), c, h, w], data)?,
            labels,
            self.class_names.clone(),
            split,
        )
    }

    /// Gathers a batch of images (normalized) and labels.
    pub fn batch(&self, indices: &[usize], normalizer: &Normalizer<E>) -> (Tensor<E>, Vec<usize>) {
        let sz = self.image_numel();
        let (c, h, w) = self.image_dims();
        let mut data = Vec::with_capacity(indices.len() * sz);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let mut batch = Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape");
        normalizer.normalize_in_place(&mut batch);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (batch, labels)
    }
}

/// Per-channel affine normalization fitted on a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer<E: Scalar> {
    pub mean: Vec<E>,
    pub std: Vec<E>,
}

impl<E: Scalar> Normalizer<E> {
    /// Identity normalization (mean 0, std 1).
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![E::zero(); channels],
            std: vec![E::one(); channels],
        }
    }

    /// Computes per-channel mean and standard deviation over a dataset.
    pub fn fit(ds: &Dataset<E>) -> Self {
        let (c, h, w) = ds.image_dims();
        let plane = h * w;
        let count = E::from_f64((ds.len() * plane) as f64);
        let data = ds.images.data();
        let mut mean = vec![E::zero(); c];
        let mut std = vec![E::zero(); c];
        for img in 0..ds.len() {
            for ch in 0..c {
                let base = (img * c + ch) * plane;
                for &v in &data[base..base + plane] {
                    mean[ch] += v;
                }
            }
        }
        for m in &mut mean {
            *m = *m / count;
        }
        for img in 0..ds.len() {
            for ch in 0..c {
                let base = (img * c + ch) * plane;
                for &v in &data[base..base + plane] {
                    let d = v - mean[ch];
                    std[ch] += d * d;
                }
            }
        }
        let floor = E::from_f64(1e-8);
        for s in &mut std {
            *s = (*s / count).sqrt().max(floor);
        }
        Self { mean, std }
    }

    pub fn normalize_in_place(&self, batch: &mut Tensor<E>) {
        let s = batch.shape().to_vec();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        debug_assert_eq!(c, self.mean.len());
        let data = batch.make_mut();
        for img in 0..n {
            for ch in 0..c {
                let inv = self.std[ch].recip();
                let m = self.mean[ch];
                let base = (img * c + ch) * plane;
                for v in &mut data[base..base + plane] {
                    *v = (*v - m) * inv;
                }
            }
        }
    }

    pub fn denormalize_in_place(&self, batch: &mut Tensor<E>) {
        let s = batch.shape().to_vec();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let data = batch.make_mut();
        for img in 0..n {
            for ch in 0..c {
                let (m, sd) = (self.mean[ch], self.std[ch]);
                let base = (img * c + ch) * plane;
                for v in &mut data[base..base + plane] {
                    *v = *v * sd + m;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset<f64> {
        Dataset::new(
            Tensor::from_fn(&[4, 3, 2, 2], |i| (i % 7) as f64 / 7.0),
            vec![0, 1, 0, 1],
            vec!["a".into(), "b".into()],
            Split::Train,
        )
        .unwrap()
    }

    #[test]
    fn rejects_label_out_of_range() {
        let r = Dataset::new(
            Tensor::<f32>::zeros(&[1, 3, 2, 2]),
            vec![2],
            vec!["a".into(), "b".into()],
            Split::Train,
        );
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn normalize_then_denormalize_is_identity() {
        let ds = tiny();
        let norm = Normalizer::fit(&ds);
        let mut batch = ds.images.clone();
        norm.normalize_in_place(&mut batch);
        norm.denormalize_in_place(&mut batch);
        for (a, b) in batch.data().iter().zip(ds.images.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn fitted_stats_standardize_the_fit_set() {
        let ds = tiny();
        let norm = Normalizer::fit(&ds);
        let mut batch = ds.images.clone();
        norm.normalize_in_place(&mut batch);
        let plane = 4;
        let c = 3;
        for ch in 0..c {
            let mut sum = 0.0;
            for img in 0..4 {
                let base = (img * c + ch) * plane;
                for &v in &batch.data()[base..base + plane] {
                    sum += v;
                }
            }
            assert!(sum.abs() / 16.0 < 1e-10);
        }
    }

    #[test]
    fn subset_and_concat_roundtrip() {
        let ds = tiny();
        let a = ds.subset(&[0, 1], Split::Train).unwrap();
        let b = ds.subset(&[2, 3], Split::Train).unwrap();
        let joined = a.concat(&b, Split::Train).unwrap();
        assert_eq!(joined.images.data(), ds.images.data());
        assert_eq!(joined.labels, ds.labels);
    }
}
