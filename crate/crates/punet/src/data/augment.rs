//! Training-set augmentation: pad-crop, horizontal flip, rotation, and
//! random resized crop. Static mode emits original plus augmented copies,
//! doubling the set; per-epoch mode regenerates transformed samples.

use rand::rngs::StdRng;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::util::{derive_seed, rng_from};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResizedCropConfig {
    /// Area fraction range sampled per image.
    pub scale: (f64, f64),
    /// Aspect ratio range sampled per image.
    pub ratio: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Zero-pad by this margin, then crop back to the original size.
    pub crop_pad: Option<usize>,
    /// Probability of a horizontal flip.
    pub hflip_prob: f64,
    /// Rotation range in degrees (plus or minus).
    pub rotation_deg: Option<f64>,
    pub resized_crop: Option<ResizedCropConfig>,
    /// Pre-generate augmented samples once (original plus copy) instead of
    /// per-epoch resampling.
    pub static_mode: bool,
}

impl AugmentConfig {
    /// Rotation +/-20 degrees, flip 0.5, resized crop — the galaxy protocol.
    pub fn galaxy_static() -> Self {
        Self {
            crop_pad: None,
            hflip_prob: 0.5,
            rotation_deg: Some(20.0),
            resized_crop: Some(ResizedCropConfig {
                scale: (0.5, 1.0),
                ratio: (0.8, 1.25),
            }),
            static_mode: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::InvalidConfig(format!(
                "flip probability must lie in [0, 1], got {}",
                self.hflip_prob
            )));
        }
        if let Some(deg) = self.rotation_deg {
            if deg < 0.0 {
                return Err(Error::InvalidConfig("rotation range must be non-negative".into()));
            }
        }
        if let Some(rc) = &self.resized_crop {
            if rc.scale.0 <= 0.0 || rc.scale.0 > rc.scale.1 || rc.ratio.0 <= 0.0 || rc.ratio.0 > rc.ratio.1
            {
                return Err(Error::InvalidConfig("resized crop ranges are invalid".into()));
            }
        }
        Ok(())
    }
}

#[inline]
fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    if y <= -1.0 || x <= -1.0 || y >= h as f64 || x >= w as f64 {
        return 0.0;
    }
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let sample = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let v00 = sample(y0, x0);
    let v01 = sample(y0, x0 + 1.0);
    let v10 = sample(y0 + 1.0, x0);
    let v11 = sample(y0 + 1.0, x0 + 1.0);
    v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx
}

fn to_f64_planes<E: Scalar>(img: &[E]) -> Vec<f64> {
    img.iter().map(|v| v.as_f64()).collect()
}

fn hflip(img: &mut [f64], c: usize, h: usize, w: usize) {
    for plane in img.chunks_mut(h * w).take(c) {
        for row in plane.chunks_mut(w) {
            row.reverse();
        }
    }
}

fn rotate(img: &[f64], c: usize, h: usize, w: usize, degrees: f64) -> Vec<f64> {
    let theta = degrees.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                // inverse mapping: rotate destination back into the source
                let sy = cy + dy * cos_t + dx * sin_t;
                let sx = cx - dy * sin_t + dx * cos_t;
                dst[y * w + x] = bilinear(plane, h, w, sy, sx);
            }
        }
    }
    out
}

fn resize_crop(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    top: f64,
    left: f64,
    crop_h: f64,
    crop_w: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let sy = top + (y as f64 + 0.5) * crop_h / h as f64 - 0.5;
                let sx = left + (x as f64 + 0.5) * crop_w / w as f64 - 0.5;
                dst[y * w + x] = bilinear(plane, h, w, sy, sx);
            }
        }
    }
    out
}

fn pad_crop(img: &[f64], c: usize, h: usize, w: usize, pad: usize, dy: usize, dx: usize) -> Vec<f64> {
    // reading from a zero-padded image at offset (dy, dx) equals sampling the
    // original at (y + dy - pad, x + dx - pad) with zeros outside
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let sy = y as isize + dy as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + dx as isize - pad as isize;
                if sx >= 0 && sx < w as isize {
                    dst[y * w + x] = plane[sy as usize * w + sx as usize];
                }
            }
        }
    }
    out
}

fn transform_one(img: &mut Vec<f64>, c: usize, h: usize, w: usize, cfg: &AugmentConfig, rng: &mut StdRng) {
    if let Some(deg) = cfg.rotation_deg {
        let angle = rng.random_range(-deg..=deg);
        *img = rotate(img, c, h, w, angle);
    }
    if cfg.hflip_prob > 0.0 && rng.random_range(0.0..1.0) < cfg.hflip_prob {
        hflip(img, c, h, w);
    }
    if let Some(rc) = &cfg.resized_crop {
        let area = h as f64 * w as f64 * rng.random_range(rc.scale.0..=rc.scale.1);
        let ratio = rng.random_range(rc.ratio.0..=rc.ratio.1);
        let crop_w = (area * ratio).sqrt().min(w as f64);
        let crop_h = (area / ratio).sqrt().min(h as f64);
        let top = rng.random_range(0.0..=(h as f64 - crop_h));
        let left = rng.random_range(0.0..=(w as f64 - crop_w));
        *img = resize_crop(img, c, h, w, top, left, crop_h, crop_w);
    }
    if let Some(pad) = cfg.crop_pad {
        if pad > 0 {
            let dy = rng.random_range(0..=2 * pad);
            let dx = rng.random_range(0..=2 * pad);
            *img = pad_crop(img, c, h, w, pad, dy, dx);
        }
    }
}

fn augmented_copies<E: Scalar>(ds: &Dataset<E>, cfg: &AugmentConfig, seed: u64) -> Vec<E> {
    let (c, h, w) = ds.image_dims();
    let mut rng = rng_from(seed);
    let mut out = Vec::with_capacity(ds.images.numel());
    for i in 0..ds.len() {
        let mut img = to_f64_planes(ds.image(i));
        transform_one(&mut img, c, h, w, cfg, &mut rng);
        out.extend(img.into_iter().map(|v| E::from_f64(v.clamp(0.0, 1.0))));
    }
    out
}

/// Static augmentation: returns the originals followed by one transformed
/// copy of each, doubling the training set. Errors on non-train splits.
pub fn augment<E: Scalar>(ds: &Dataset<E>, cfg: &AugmentConfig, seed: u64) -> Result<Dataset<E>> {
    cfg.validate()?;
    if ds.split != Split::Train {
        return Err(Error::InvalidConfig(
            "augmentation applies to the training split only".into(),
        ));
    }
    let copies = augmented_copies(ds, cfg, seed);
    let mut data = ds.images.data().to_vec();
    data.extend(copies);
    let mut labels = ds.labels.clone();
    labels.extend_from_slice(&ds.labels);
    let (c, h, w) = ds.image_dims();
    Dataset::new(
        Tensor::new(vec![2 * ds.len(), c, h, w], data)?,
        labels,
        ds.class_names.clone(),
        Split::Train,
    )
}

/// Per-epoch augmentation: every sample freshly transformed, same size as the
/// input. The epoch index shifts the random stream deterministically.
pub fn augment_epoch<E: Scalar>(
    ds: &Dataset<E>,
    cfg: &AugmentConfig,
    seed: u64,
    epoch: usize,
) -> Result<Dataset<E>> {
    cfg.validate()?;
    if ds.split != Split::Train {
        return Err(Error::InvalidConfig(
            "augmentation applies to the training split only".into(),
        ));
    }
    let data = augmented_copies(ds, cfg, derive_seed(seed, 0xA06, epoch as u64));
    let (c, h, w) = ds.image_dims();
    Dataset::new(
        Tensor::new(vec![ds.len(), c, h, w], data)?,
        ds.labels.clone(),
        ds.class_names.clone(),
        Split::Train,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;

    #[test]
    fn static_mode_doubles_the_set() {
        let ds = make_synthetic::<f32>(3, 4, 8, 0).unwrap();
        let out = augment(&ds, &AugmentConfig::galaxy_static(), 1).unwrap();
        assert_eq!(out.len(), 2 * ds.len());
        assert_eq!(&out.labels[..ds.len()], &ds.labels[..]);
        assert_eq!(&out.labels[ds.len()..], &ds.labels[..]);
        // originals come first, untouched
        assert_eq!(&out.images.data()[..ds.images.numel()], ds.images.data());
    }

    #[test]
    fn no_op_config_copies_exactly() {
        let ds = make_synthetic::<f64>(2, 3, 8, 0).unwrap();
        let cfg = AugmentConfig::default();
        let out = augment(&ds, &cfg, 5).unwrap();
        assert_eq!(&out.images.data()[ds.images.numel()..], ds.images.data());
    }

    #[test]
    fn rejects_non_train_split() {
        let mut ds = make_synthetic::<f32>(2, 3, 8, 0).unwrap();
        ds.split = Split::Test;
        assert!(matches!(
            augment(&ds, &AugmentConfig::default(), 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn hflip_is_an_involution() {
        let ds = make_synthetic::<f64>(2, 2, 8, 3).unwrap();
        let mut img = to_f64_planes(ds.image(0));
        let original = img.clone();
        hflip(&mut img, 3, 8, 8);
        assert_ne!(img, original);
        hflip(&mut img, 3, 8, 8);
        assert_eq!(img, original);
    }

    #[test]
    fn pad_crop_with_centered_offset_is_identity() {
        let ds = make_synthetic::<f64>(2, 1, 8, 4).unwrap();
        let img = to_f64_planes(ds.image(0));
        let same = pad_crop(&img, 3, 8, 8, 2, 2, 2);
        assert_eq!(same, img);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let ds = make_synthetic::<f64>(2, 1, 8, 5).unwrap();
        let img = to_f64_planes(ds.image(0));
        let same = rotate(&img, 3, 8, 8, 0.0);
        for (a, b) in same.iter().zip(img.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn per_epoch_streams_differ_by_epoch() {
        let ds = make_synthetic::<f32>(2, 4, 8, 0).unwrap();
        let cfg = AugmentConfig {
            crop_pad: Some(2),
            hflip_prob: 0.5,
            ..Default::default()
        };
        let a = augment_epoch(&ds, &cfg, 9, 0).unwrap();
        let b = augment_epoch(&ds, &cfg, 9, 1).unwrap();
        let a2 = augment_epoch(&ds, &cfg, 9, 0).unwrap();
        assert_eq!(a.images.data(), a2.images.data());
        assert_ne!(a.images.data(), b.images.data());
        assert_eq!(a.len(), ds.len());
    }
}
