//! In-memory labeled image sets and the deterministic selections the
//! training experiments need: per-class subsampling for the small-data runs
//! and stratified holdout splits for tuning.
//!
//! Selections derive their randomness from `(seed, purpose tag, class)`
//! streams, so the subset chosen for class 3 does not move when class 7
//! gains samples, and the same seed always yields the same subset.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::derive_stream;
use crate::tensor::Tensor;

const TAG_SUBSAMPLE: u64 = 0x7375_6273;
const TAG_HOLDOUT: u64 = 0x686f_6c64;

/// A set of images with class labels. Images are stored as one rank-4
/// tensor `[N, C, H, W]`; labels are class indices below `classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::ShapeMismatch {
                context: "dataset images",
                detail: format!("expected rank 4 [N, C, H, W], got rank {}", shape.len()),
            });
        }
        if labels.len() != shape[0] {
            return Err(Error::ShapeMismatch {
                context: "dataset labels",
                detail: format!("{} images but {} labels", shape[0], labels.len()),
            });
        }
        if classes == 0 {
            return Err(Error::InvalidConfig {
                detail: "a dataset needs at least one class".into(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidConfig {
                detail: format!("label {bad} out of range for {classes} classes"),
            });
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// Shape of a single sample, `[C, H, W]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Copies one sample out as a `[C, H, W]` tensor.
    pub fn image(&self, index: usize) -> Result<Tensor> {
        if index >= self.len() {
            return Err(Error::DomainError {
                detail: format!("sample {index} out of range for {} samples", self.len()),
            });
        }
        let [c, h, w] = self.sample_shape();
        let stride = c * h * w;
        Tensor::from_values(
            &[c, h, w],
            self.images.data()[index * stride..(index + 1) * stride].to_vec(),
        )
    }

    /// Builds a new dataset from the samples at `indices`, in that order.
    /// Indices may repeat.
    pub fn gather(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::DomainError {
                detail: "cannot gather an empty selection".into(),
            });
        }
        let [c, h, w] = self.sample_shape();
        let stride = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::DomainError {
                    detail: format!("sample {i} out of range for {} samples", self.len()),
                });
            }
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let images = Tensor::from_values(&[indices.len(), c, h, w], data)?;
        Ok(Dataset {
            images,
            labels,
            classes: self.classes,
        })
    }

    fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut pools = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            pools[l].push(i);
        }
        pools
    }

    /// Draws exactly `per_class` samples from every class, or fails with the
    /// offending class if one is too small. The chosen indices are returned
    /// in ascending order, so the result's sample order is a deterministic
    /// function of `(seed, per_class)` alone.
    pub fn subsample_per_class(&self, per_class: usize, seed: u64) -> Result<Dataset> {
        if per_class == 0 {
            return Err(Error::DomainError {
                detail: "per-class subsample size must be positive".into(),
            });
        }
        let mut chosen = Vec::with_capacity(per_class * self.classes);
        for (class, pool) in self.class_indices().into_iter().enumerate() {
            if pool.len() < per_class {
                return Err(Error::InsufficientClassSamples {
                    class,
                    have: pool.len(),
                    need: per_class,
                });
            }
            let mut rng = derive_stream(seed, &[TAG_SUBSAMPLE, class as u64]);
            let permuted = partial_shuffle(pool, per_class, &mut rng);
            chosen.extend_from_slice(&permuted[..per_class]);
        }
        chosen.sort_unstable();
        self.gather(&chosen)
    }

    /// Splits off a stratified holdout: each class contributes
    /// `round(fraction * count)` samples to the holdout set, at least one
    /// per class from each side so neither part degenerates. Returns
    /// `(retained, holdout)`.
    pub fn holdout_split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::DomainError {
                detail: format!("holdout fraction must be in (0, 1), got {fraction}"),
            });
        }
        let mut held = Vec::new();
        let mut kept = Vec::new();
        for (class, pool) in self.class_indices().into_iter().enumerate() {
            if pool.len() < 2 {
                return Err(Error::InsufficientClassSamples {
                    class,
                    have: pool.len(),
                    need: 2,
                });
            }
            let want = math::round(fraction * pool.len() as f64) as usize;
            let want = want.clamp(1, pool.len() - 1);
            let mut rng = derive_stream(seed, &[TAG_HOLDOUT, class as u64]);
            let permuted = partial_shuffle(pool, want, &mut rng);
            held.extend_from_slice(&permuted[..want]);
            kept.extend_from_slice(&permuted[want..]);
        }
        held.sort_unstable();
        kept.sort_unstable();
        Ok((self.gather(&kept)?, self.gather(&held)?))
    }
}

/// Fisher-Yates limited to the first `take` positions. The returned vector
/// is the whole pool rearranged: its first `take` entries are a uniform
/// draw without replacement, the rest are the complement.
fn partial_shuffle(mut pool: Vec<usize>, take: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = pool.len();
    for i in 0..take.min(n.saturating_sub(1)) {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 12 tiny 1x2x2 images over 3 classes, labels cycling 0,1,2,...
    fn toy() -> Dataset {
        let n = 12;
        let mut data = Vec::new();
        for i in 0..n {
            // Encode the sample index in every pixel so gather results are
            // checkable by value.
            data.extend_from_slice(&[i as f64; 4]);
        }
        let images = Tensor::from_values(&[n, 1, 2, 2], data).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        Dataset::new(images, labels, 3).unwrap()
    }

    #[test]
    fn construction_validates_shapes_and_labels() {
        let img3 = Tensor::zeros(&[2, 2, 2]).unwrap();
        assert!(matches!(
            Dataset::new(img3, vec![0, 0], 1),
            Err(Error::ShapeMismatch { .. })
        ));
        let img = Tensor::zeros(&[2, 1, 2, 2]).unwrap();
        assert!(matches!(
            Dataset::new(img.clone(), vec![0], 1),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            Dataset::new(img.clone(), vec![0, 3], 3),
            Err(Error::InvalidConfig { .. })
        ));
        assert!(Dataset::new(img, vec![0, 2], 3).is_ok());
    }

    #[test]
    fn image_extraction_returns_the_right_sample() {
        let d = toy();
        let img = d.image(5).unwrap();
        assert_eq!(img.shape(), &[1, 2, 2]);
        assert!(img.data().iter().all(|&x| x == 5.0));
        assert!(d.image(12).is_err());
    }

    #[test]
    fn gather_selects_in_order_with_repeats() {
        let d = toy();
        let g = d.gather(&[3, 3, 0, 7]).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g.labels(), &[0, 0, 0, 1]);
        assert_eq!(g.image(0).unwrap().data()[0], 3.0);
        assert_eq!(g.image(2).unwrap().data()[0], 0.0);
        assert_eq!(g.image(3).unwrap().data()[0], 7.0);
        assert!(d.gather(&[12]).is_err());
        assert!(d.gather(&[]).is_err());
    }

    #[test]
    fn subsample_draws_exact_per_class_counts() {
        let d = toy();
        let s = d.subsample_per_class(2, 99).unwrap();
        assert_eq!(s.len(), 6);
        for class in 0..3 {
            assert_eq!(
                s.labels().iter().filter(|&&l| l == class).count(),
                2,
                "class {class}"
            );
        }
        // Ascending original order means labels still cycle.
        let mut last_pixel = -1.0;
        for i in 0..s.len() {
            let p = s.image(i).unwrap().data()[0];
            assert!(p > last_pixel, "subsample must preserve original order");
            last_pixel = p;
        }
    }

    #[test]
    fn subsample_is_seed_deterministic() {
        let d = toy();
        let a = d.subsample_per_class(2, 5).unwrap();
        let b = d.subsample_per_class(2, 5).unwrap();
        assert_eq!(a, b);
        let c = d.subsample_per_class(2, 6).unwrap();
        assert_ne!(a, c, "a different seed should pick a different subset");
    }

    #[test]
    fn subsample_reports_the_starved_class() {
        let d = toy();
        match d.subsample_per_class(5, 1) {
            Err(Error::InsufficientClassSamples { class, have, need }) => {
                assert_eq!(class, 0);
                assert_eq!(have, 4);
                assert_eq!(need, 5);
            }
            other => panic!("expected InsufficientClassSamples, got {other:?}"),
        }
    }

    #[test]
    fn holdout_split_is_stratified_and_disjoint() {
        let d = toy();
        let (train, held) = d.holdout_split(0.25, 17).unwrap();
        assert_eq!(train.len() + held.len(), d.len());
        for class in 0..3 {
            // round(0.25 * 4) = 1 held out per class.
            assert_eq!(held.labels().iter().filter(|&&l| l == class).count(), 1);
            assert_eq!(train.labels().iter().filter(|&&l| l == class).count(), 3);
        }
        let mut seen: Vec<f64> = train
            .images()
            .data()
            .iter()
            .step_by(4)
            .chain(held.images().data().iter().step_by(4))
            .copied()
            .collect();
        seen.sort_by(f64::total_cmp);
        let expected: Vec<f64> = (0..12).map(|i| i as f64).collect();
        assert_eq!(seen, expected, "split parts must partition the dataset");
    }

    #[test]
    fn holdout_split_rejects_degenerate_fractions() {
        let d = toy();
        assert!(d.holdout_split(0.0, 1).is_err());
        assert!(d.holdout_split(1.0, 1).is_err());
        assert!(d.holdout_split(-0.2, 1).is_err());
    }

    #[test]
    fn holdout_split_is_seed_deterministic() {
        let d = toy();
        let (t1, h1) = d.holdout_split(0.25, 21).unwrap();
        let (t2, h2) = d.holdout_split(0.25, 21).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(h1, h2);
    }
}
