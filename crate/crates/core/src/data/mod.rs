//! Datasets, normalization and seeded mini-batching.
//!
//! Datasets are time-agnostic: the temporal (direct) encoding happens in the
//! network's forward pass.

mod idx;
mod synthetic;

pub use idx::{
    encode_idx_images, encode_idx_labels, load_idx, parse_idx_images, parse_idx_labels, IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
};
pub use synthetic::{make_synthetic, nearest_prototype_accuracy, SyntheticTask, SyntheticTaskSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, c, h, w]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::Input(format!(
                "dataset images must be [n, c, h, w], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    /// Height and width.
    pub fn image_size(&self) -> [usize; 2] {
        [self.images.shape()[2], self.images.shape()[3]]
    }

    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let images = self.images.select_rows(indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (images, labels)
    }
}

/// Affine input normalization `(x - mean) / std`, one entry per channel or a
/// single entry shared by all channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            mean: vec![0.0],
            std: vec![1.0],
        }
    }

    /// Statistics of a (training) split: one scalar pair for single-channel
    /// data, per-channel otherwise. Uses the population standard deviation.
    pub fn fit(d: &Dataset) -> Result<Self> {
        let c = d.channels();
        let plane = d.image_size()[0] * d.image_size()[1];
        let groups = if c == 1 { 1 } else { c };
        let mut mean = vec![0.0; groups];
        let mut std = vec![0.0; groups];
        for (grp, (mu, sd)) in mean.iter_mut().zip(std.iter_mut()).enumerate() {
            let values = || {
                d.images
                    .data()
                    .chunks(plane)
                    .enumerate()
                    .filter(move |(i, _)| groups == 1 || i % c == grp)
                    .flat_map(|(_, p)| p.iter().copied())
            };
            let count = values().count() as f64;
            *mu = values().sum::<f64>() / count;
            let var = values().map(|v| (v - *mu) * (v - *mu)).sum::<f64>() / count;
            *sd = var.sqrt();
            // Rounding leaves a few ulps of spread on constant data.
            if !(*sd > f64::EPSILON * mu.abs().max(1.0)) {
                return Err(Error::Input(format!(
                    "standard deviation of channel group {grp} is zero"
                )));
            }
        }
        Ok(Normalization { mean, std })
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != self.std.len() || !(self.mean.len() == 1 || self.mean.len() == channels) {
            return Err(Error::Input(format!(
                "normalization has {} entries for {channels} channels",
                self.mean.len()
            )));
        }
        if let Some(s) = self.std.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::Input(format!("normalization std must be positive, got {s}")));
        }
        Ok(())
    }

    pub fn apply(&self, d: &Dataset) -> Result<Dataset> {
        let c = d.channels();
        self.validate(c)?;
        let plane = d.image_size()[0] * d.image_size()[1];
        let mut images = d.images.clone();
        for (i, p) in images.data_mut().chunks_mut(plane).enumerate() {
            let k = if self.mean.len() == 1 { 0 } else { i % c };
            let (m, s) = (self.mean[k], self.std[k]);
            p.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(Dataset {
            images,
            ..d.clone()
        })
    }
}

/// `(x - mean) / std` elementwise; statistics are fitted on `d` when unset.
pub fn normalize(d: &Dataset, mean: Option<f64>, std: Option<f64>) -> Result<Dataset> {
    let norm = match (mean, std) {
        (Some(m), Some(s)) => Normalization {
            mean: vec![m],
            std: vec![s],
        },
        _ => {
            let fitted = Normalization::fit(d)?;
            Normalization {
                mean: mean.map(|m| vec![m]).unwrap_or(fitted.mean),
                std: std.map(|s| vec![s]).unwrap_or(fitted.std),
            }
        }
    };
    norm.apply(d)
}

/// Seeded permutation of `0..n` split into consecutive batches; the last
/// batch may be short.
pub fn batch_indices(n: usize, batch: usize, shuffle_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch == 0 {
        return Err(Error::Input("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    Ok(order.chunks(batch).map(<[usize]>::to_vec).collect())
}

/// One mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

pub struct Batches<'a> {
    data: &'a Dataset,
    plan: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let indices = self.plan.next()?;
        let (images, labels) = self.data.gather(&indices);
        Some(Batch {
            indices,
            images,
            labels,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.plan.size_hint()
    }
}

impl ExactSizeIterator for Batches<'_> {}

/// Mini-batches of `d` in a seeded random order.
pub fn batches(d: &Dataset, batch: usize, shuffle_seed: u64) -> Result<Batches<'_>> {
    Ok(Batches {
        data: d,
        plan: batch_indices(d.len(), batch, shuffle_seed)?.into_iter(),
    })
}

/// Shuffle seed for a given epoch of a run.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(epoch as u64)
        .rotate_left(17)
        ^ 0xD1B5_4A32_D192_ED03
}
