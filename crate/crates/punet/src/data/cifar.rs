//! CIFAR-10 binary format loader.
//!
//! Each record is one label byte followed by 3072 pixel bytes (1024 red,
//! 1024 green, 1024 blue, row-major), 10,000 records per file.

use std::fs;
use std::path::Path;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CIFAR_CLASS_NAMES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

const RECORD_BYTES: usize = 1 + 3 * 1024;
const RECORDS_PER_FILE: usize = 10_000;
const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

fn parse_batch<E: Scalar>(
    bytes: &[u8],
    name: &str,
    pixels: &mut Vec<E>,
    labels: &mut Vec<usize>,
) -> Result<()> {
    if bytes.len() != RECORD_BYTES * RECORDS_PER_FILE {
        let whole_records = bytes.len() / RECORD_BYTES;
        return Err(Error::Format(format!(
            "{name}: expected {} bytes ({RECORDS_PER_FILE} records of {RECORD_BYTES}), got {}; \
             truncated at byte offset {}",
            RECORD_BYTES * RECORDS_PER_FILE,
            bytes.len(),
            whole_records * RECORD_BYTES,
        )));
    }
    let scale = E::from_f64(1.0 / 255.0);
    for record in bytes.chunks_exact(RECORD_BYTES) {
        let label = record[0] as usize;
        if label > 9 {
            return Err(Error::Format(format!(
                "{name}: label byte {label} out of range 0..=9"
            )));
        }
        labels.push(label);
        pixels.extend(record[1..].iter().map(|&b| E::from_f64(b as f64) * scale));
    }
    Ok(())
}

fn load_files<E: Scalar>(dir: &Path, files: &[&str], split: Split) -> Result<Dataset<E>> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        let path = dir.join(name);
        let bytes = fs::read(&path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        parse_batch(&bytes, name, &mut pixels, &mut labels)?;
    }
    let n = labels.len();
    Dataset::new(
        Tensor::new(vec![n, 3, 32, 32], pixels)?,
        labels,
        CIFAR_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        split,
    )
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_cifar10<E: Scalar>(dir: impl AsRef<Path>) -> Result<(Dataset<E>, Dataset<E>)> {
    let dir = dir.as_ref();
    let train = load_files(dir, &TRAIN_FILES, Split::Train)?;
    let test = load_files(dir, &[TEST_FILE], Split::Test)?;
    Ok((train, test))
}

/// Serializes images and labels back into the binary batch layout.
/// The inverse of parsing: pixels are rounded to bytes.
pub fn write_cifar10_batch<E: Scalar>(
    images: &Tensor<E>,
    labels: &[usize],
    path: impl AsRef<Path>,
) -> Result<()> {
    let n = images.shape()[0];
    if labels.len() != n {
        return Err(Error::InvalidConfig(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    let plane = 3 * 1024;
    let mut out = Vec::with_capacity(n * RECORD_BYTES);
    for (img, &label) in labels.iter().enumerate() {
        out.push(label as u8);
        let base = img * plane;
        for &v in &images.data()[base..base + plane] {
            out.push((v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_batch(seed: u64) -> Vec<u8> {
        use rand::Rng;
        let mut rng = crate::util::rng_from(seed);
        let mut bytes = Vec::with_capacity(RECORD_BYTES * RECORDS_PER_FILE);
        for _ in 0..RECORDS_PER_FILE {
            bytes.push(rng.random_range(0..10u8));
            for _ in 0..3072 {
                bytes.push(rng.random_range(0..=255u8));
            }
        }
        bytes
    }

    #[test]
    fn wellformed_file_yields_ten_thousand_samples() {
        let bytes = fake_batch(1);
        assert_eq!(bytes.len(), 30_730_000);
        let mut pixels: Vec<f32> = Vec::new();
        let mut labels = Vec::new();
        parse_batch(&bytes, "batch", &mut pixels, &mut labels).unwrap();
        assert_eq!(labels.len(), 10_000);
        assert_eq!(pixels.len(), 10_000 * 3072);
    }

    #[test]
    fn first_byte_is_first_label() {
        let mut bytes = fake_batch(2);
        bytes[0] = 7;
        let mut pixels: Vec<f32> = Vec::new();
        let mut labels = Vec::new();
        parse_batch(&bytes, "batch", &mut pixels, &mut labels).unwrap();
        assert_eq!(labels[0], 7);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let mut bytes = fake_batch(3);
        bytes.truncate(RECORD_BYTES * 42 + 100);
        let mut pixels: Vec<f32> = Vec::new();
        let mut labels = Vec::new();
        let err = parse_batch(&bytes, "batch", &mut pixels, &mut labels).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&format!("offset {}", RECORD_BYTES * 42)), "{msg}");
    }

    #[test]
    fn parse_then_write_reproduces_bytes_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let bytes = fake_batch(4);
        let path = dir.path().join("data_batch_1.bin");
        std::fs::write(&path, &bytes).unwrap();

        let mut pixels: Vec<f64> = Vec::new();
        let mut labels = Vec::new();
        parse_batch(&bytes, "batch", &mut pixels, &mut labels).unwrap();
        let images = Tensor::new(vec![RECORDS_PER_FILE, 3, 32, 32], pixels).unwrap();

        let out_path = dir.path().join("roundtrip.bin");
        write_cifar10_batch(&images, &labels, &out_path).unwrap();
        let roundtrip = std::fs::read(&out_path).unwrap();
        assert_eq!(roundtrip, bytes);
    }

    #[test]
    fn load_cifar10_wires_all_six_files() {
        let dir = tempfile::tempdir().unwrap();
        for name in TRAIN_FILES.iter().chain([TEST_FILE].iter()) {
            std::fs::write(dir.path().join(name), fake_batch(5)).unwrap();
        }
        let (train, test): (Dataset<f32>, Dataset<f32>) = load_cifar10(dir.path()).unwrap();
        assert_eq!(train.len(), 50_000);
        assert_eq!(test.len(), 10_000);
        assert_eq!(train.image_dims(), (3, 32, 32));
        assert!(train.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn missing_directory_is_io_error() {
        let r: Result<(Dataset<f32>, Dataset<f32>)> = load_cifar10("/nonexistent/cifar");
        assert!(matches!(r, Err(Error::Io(_))));
    }
}
