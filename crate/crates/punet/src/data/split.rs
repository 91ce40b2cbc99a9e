//! Stratified train/val/test splitting.

use rand::seq::SliceRandom;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::util::rng_from;

/// Splits a dataset per class in the given proportions.
///
/// Each class's samples are shuffled (seeded) and allocated by
/// `floor(n * fraction)`, with the remainder assigned by largest fractional
/// part (ties to the earlier split). Errors if any class would leave a split
/// empty.
pub fn stratified_split<E: Scalar>(
    ds: &Dataset<E>,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset<E>, Dataset<E>, Dataset<E>)> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|&f| f <= 0.0) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split fractions must be positive and sum to 1, got {fr:?}"
        )));
    }
    let mut rng = rng_from(seed);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, &label) in ds.labels.iter().enumerate() {
        per_class[label].push(i);
    }
    let mut buckets: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (class, indices) in per_class.iter_mut().enumerate() {
        if indices.is_empty() {
            continue;
        }
        indices.shuffle(&mut rng);
        let n = indices.len();
        let exact: Vec<f64> = fr.iter().map(|f| f * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
        let mut remainder = n - counts.iter().sum::<usize>();
        // largest fractional part first, ties to the earlier split
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let fa = exact[a] - exact[a].floor();
            let fb = exact[b] - exact[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for &slot in &order {
            if remainder == 0 {
                break;
            }
            counts[slot] += 1;
            remainder -= 1;
        }
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::InvalidConfig(format!(
                "class {class} has only {n} samples; some split would be empty under {fr:?}"
            )));
        }
        let mut cursor = 0;
        for (slot, &count) in counts.iter().enumerate() {
            buckets[slot].extend_from_slice(&indices[cursor..cursor + count]);
            cursor += count;
        }
    }
    for bucket in &mut buckets {
        bucket.sort_unstable();
    }
    Ok((
        ds.subset(&buckets[0], Split::Train)?,
        ds.subset(&buckets[1], Split::Val)?,
        ds.subset(&buckets[2], Split::Test)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;

    #[test]
    fn ninety_five_five_on_hundred_per_class() {
        let ds = make_synthetic::<f32>(4, 100, 8, 0).unwrap();
        let (train, val, test) = stratified_split(&ds, (0.9, 0.05, 0.05), 1).unwrap();
        assert_eq!(train.len(), 360);
        assert_eq!(val.len(), 20);
        assert_eq!(test.len(), 20);
        for c in 0..4 {
            assert_eq!(train.labels.iter().filter(|&&l| l == c).count(), 90);
            assert_eq!(val.labels.iter().filter(|&&l| l == c).count(), 5);
            assert_eq!(test.labels.iter().filter(|&&l| l == c).count(), 5);
        }
    }

    #[test]
    fn splits_partition_the_source() {
        let ds = make_synthetic::<f32>(3, 21, 8, 5).unwrap();
        let (train, val, test) = stratified_split(&ds, (0.7, 0.15, 0.15), 2).unwrap();
        assert_eq!(train.len() + val.len() + test.len(), ds.len());
        // disjointness and coverage: counted per pixel-signature of the image
        let mut seen = std::collections::HashSet::new();
        for part in [&train, &val, &test] {
            for i in 0..part.len() {
                let sig: Vec<u32> = part.image(i).iter().map(|v| v.to_bits()).collect();
                assert!(seen.insert(sig), "duplicate image across splits");
            }
        }
        assert_eq!(seen.len(), ds.len());
    }

    #[test]
    fn proportions_track_the_source_within_rounding() {
        let ds = make_synthetic::<f32>(5, 33, 8, 3).unwrap();
        let (train, _, _) = stratified_split(&ds, (0.6, 0.2, 0.2), 4).unwrap();
        for c in 0..5 {
            let count = train.labels.iter().filter(|&&l| l == c).count() as f64;
            assert!((count - 0.6 * 33.0).abs() <= 1.0);
        }
    }

    #[test]
    fn too_small_class_is_invalid() {
        let ds = make_synthetic::<f32>(3, 4, 8, 0).unwrap();
        let r = stratified_split(&ds, (0.9, 0.05, 0.05), 0);
        assert!(matches!(r, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn deterministic_under_seed() {
        let ds = make_synthetic::<f32>(3, 30, 8, 0).unwrap();
        let a = stratified_split(&ds, (0.8, 0.1, 0.1), 7).unwrap();
        let b = stratified_split(&ds, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(a.0.labels, b.0.labels);
        assert_eq!(a.0.images.data(), b.0.images.data());
    }
}
