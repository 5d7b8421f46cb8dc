//! Seeded prototype-plus-noise classification task.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub channels: usize,
    pub size: [usize; 2],
    /// Standard deviation of the additive Gaussian pixel noise.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            classes: 10,
            train_per_class: 60,
            test_per_class: 30,
            channels: 1,
            size: [16, 16],
            sigma: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("synthetic task needs at least 2 classes".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("synthetic task needs samples in both splits".into()));
        }
        if self.channels == 0 || self.size.contains(&0) {
            return Err(Error::Config("synthetic image extents must be positive".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    /// `[classes, c, h, w]`, values in `[0, 1]`.
    pub prototypes: Tensor,
    pub train: Dataset,
    pub test: Dataset,
}

impl SyntheticTask {
    pub fn generate(spec: &SyntheticTaskSpec) -> Result<Self> {
        spec.validate()?;
        let pixels = spec.channels * spec.size[0] * spec.size[1];
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let prototypes = loop {
            let candidate: Vec<Vec<f64>> = (0..spec.classes)
                .map(|_| (0..pixels).map(|_| rng.random::<f64>()).collect())
                .collect();
            let distinct = candidate
                .iter()
                .enumerate()
                .all(|(i, p)| candidate[i + 1..].iter().all(|q| q != p));
            if distinct {
                break candidate;
            }
        };
        let shape = [spec.channels, spec.size[0], spec.size[1]];
        let noise = Normal::new(0.0, spec.sigma)
            .map_err(|e| Error::Config(format!("sigma: {e}")))?;
        let sample = |per_class: usize, stream: u64, split: Split| -> Result<Dataset> {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(stream);
            let n = per_class * spec.classes;
            let mut data = Vec::with_capacity(n * pixels);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let class = i % spec.classes;
                labels.push(class);
                data.extend(
                    prototypes[class]
                        .iter()
                        .map(|&p| (p + noise.sample(&mut rng)).clamp(0.0, 1.0)),
                );
            }
            let mut dims = vec![n];
            dims.extend_from_slice(&shape);
            Dataset::new(Tensor::new(dims, data)?, labels, spec.classes, split)
        };
        let train = sample(spec.train_per_class, 1, Split::Train)?;
        let test = sample(spec.test_per_class, 2, Split::Test)?;
        let mut dims = vec![spec.classes];
        dims.extend_from_slice(&shape);
        Ok(SyntheticTask {
            prototypes: Tensor::new(dims, prototypes.concat())?,
            train,
            test,
        })
    }
}

/// Train and test splits of the seeded task.
pub fn make_synthetic(spec: &SyntheticTaskSpec) -> Result<(Dataset, Dataset)> {
    let task = SyntheticTask::generate(spec)?;
    Ok((task.train, task.test))
}

/// Accuracy of assigning each image to its nearest prototype in Euclidean
/// distance.
pub fn nearest_prototype_accuracy(prototypes: &Tensor, d: &Dataset) -> f64 {
    let pixels = prototypes.numel() / prototypes.shape()[0];
    let protos: Vec<&[f64]> = prototypes.data().chunks(pixels).collect();
    let correct = d
        .images
        .data()
        .chunks(pixels)
        .zip(&d.labels)
        .filter(|(img, &label)| {
            let dist = |p: &[f64]| -> f64 { p.iter().zip(*img).map(|(a, b)| (a - b) * (a - b)).sum() };
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, p) in protos.iter().enumerate() {
                let dk = dist(p);
                if dk < best_d {
                    best = k;
                    best_d = dk;
                }
            }
            best == label
        })
        .count();
    correct as f64 / d.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_samples_equal_prototypes() {
        let spec = SyntheticTaskSpec {
            sigma: 0.0,
            train_per_class: 2,
            test_per_class: 2,
            ..Default::default()
        };
        let task = SyntheticTask::generate(&spec).unwrap();
        let pixels = 256;
        for (img, &l) in task.train.images.data().chunks(pixels).zip(&task.train.labels) {
            assert_eq!(img, &task.prototypes.data()[l * pixels..(l + 1) * pixels]);
        }
        assert_eq!(nearest_prototype_accuracy(&task.prototypes, &task.test), 1.0);
    }

    #[test]
    fn same_seed_same_data() {
        let spec = SyntheticTaskSpec::default();
        let (a, b) = make_synthetic(&spec).unwrap();
        let (c, d) = make_synthetic(&spec).unwrap();
        assert_eq!(a, c);
        assert_eq!(b, d);
        let (e, _) = make_synthetic(&SyntheticTaskSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a, e);
    }

    #[test]
    fn pixels_stay_in_unit_interval() {
        let spec = SyntheticTaskSpec {
            sigma: 2.0,
            ..Default::default()
        };
        let (train, test) = make_synthetic(&spec).unwrap();
        for d in [&train, &test] {
            assert!(d.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
