//! Generic image-folder loader: `root/<class_name>/<image files>`, 8-bit RGB.
//! Class index is the lexicographic rank of the class directory name.

use std::path::Path;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Loads every decodable image under `root/<class>/`. All images must share
/// one resolution. Files are visited in lexicographic order for determinism.
pub fn load_image_folder<E: Scalar>(root: impl AsRef<Path>) -> Result<Dataset<E>> {
    let root = root.as_ref();
    let mut class_dirs: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "image folder {} must contain at least two class directories",
            root.display()
        )));
    }
    let class_names: Vec<String> = class_dirs
        .iter()
        .map(|p| {
            p.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
        .collect();

    let mut pixels: Vec<E> = Vec::new();
    let mut labels = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    let scale = E::from_f64(1.0 / 255.0);
    for (class_idx, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let img = image::open(&file)
                .map_err(|e| Error::Format(format!("{}: {e}", file.display())))?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            match dims {
                None => dims = Some((h, w)),
                Some(expected) if expected != (h, w) => {
                    return Err(Error::Format(format!(
                        "{}: size {h}x{w} differs from the first image's {}x{}",
                        file.display(),
                        expected.0,
                        expected.1
                    )))
                }
                _ => {}
            }
            // HWC bytes to CHW planes
            let raw = img.as_raw();
            for ch in 0..3 {
                pixels.extend(
                    raw.chunks_exact(3)
                        .map(|px| E::from_f64(px[ch] as f64) * scale),
                );
            }
            labels.push(class_idx);
        }
    }
    let Some((h, w)) = dims else {
        return Err(Error::InvalidConfig(format!(
            "no images found under {}",
            root.display()
        )));
    };
    let n = labels.len();
    Dataset::new(
        Tensor::new(vec![n, 3, h, w], pixels)?,
        labels,
        class_names,
        Split::Train,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, w: u32, h: u32, shade: u8) {
        let img = image::RgbImage::from_fn(w, h, |x, y| {
            image::Rgb([shade, (x % 256) as u8, (y % 256) as u8])
        });
        img.save(path).unwrap();
    }

    #[test]
    fn loads_classes_in_lexicographic_order() {
        let dir = tempfile::tempdir().unwrap();
        for (class, shade) in [("zebra", 200u8), ("antelope", 10u8)] {
            let d = dir.path().join(class);
            std::fs::create_dir(&d).unwrap();
            write_png(&d.join("a.png"), 8, 8, shade);
            write_png(&d.join("b.png"), 8, 8, shade);
        }
        let ds: Dataset<f32> = load_image_folder(dir.path()).unwrap();
        assert_eq!(ds.class_names, vec!["antelope", "zebra"]);
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.labels, vec![0, 0, 1, 1]);
        // red channel of the first image comes from 'antelope' (shade 10)
        assert!((ds.image(0)[0] - 10.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn mixed_sizes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["a", "b"] {
            std::fs::create_dir(dir.path().join(class)).unwrap();
        }
        write_png(&dir.path().join("a/x.png"), 8, 8, 1);
        write_png(&dir.path().join("b/y.png"), 10, 8, 2);
        let r: Result<Dataset<f32>> = load_image_folder(dir.path());
        assert!(matches!(r, Err(Error::Format(_))));
    }
}
