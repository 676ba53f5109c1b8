use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{augment, load_image, AugmentConfig, DataError, DatasetIndex};
use crate::runtime::{par, Activation};

/// Decoded, preprocessed images held in memory with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages {
    pub shape: [usize; 3],
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabeledImages {
    /// Decodes every image of the index at `size`x`size`. All undecodable
    /// files are reported together.
    pub fn load(index: &DatasetIndex, size: usize) -> Result<Self, DataError> {
        let results = par::map_range(index.len(), |i| load_image(&index.entries[i].0, size));
        let mut images = Vec::with_capacity(results.len());
        let mut failures = Vec::new();
        for r in results {
            match r {
                Ok(img) => images.push(img),
                Err(DataError::Decode(mut f)) => failures.append(&mut f),
                Err(e) => return Err(e),
            }
        }
        if !failures.is_empty() {
            return Err(DataError::Decode(failures));
        }
        Ok(LabeledImages {
            shape: [size, size, 3],
            images,
            labels: index.labels(),
            class_names: index.class_names.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// The first `n` samples (all of them if fewer).
    pub fn take(&self, n: usize) -> LabeledImages {
        let n = n.min(self.len());
        LabeledImages {
            shape: self.shape,
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            class_names: self.class_names.clone(),
        }
    }

    fn stack(&self, idx: &[usize], aug: Option<(&AugmentConfig, &mut ChaCha8Rng)>) -> Activation<f32> {
        let [h, w, c] = self.shape;
        let mut data = Vec::with_capacity(idx.len() * h * w * c);
        match aug {
            Some((cfg, rng)) => {
                for &i in idx {
                    data.extend(augment(&self.images[i], self.shape, cfg, rng));
                }
            }
            None => idx.iter().for_each(|&i| data.extend_from_slice(&self.images[i])),
        }
        Activation::new(vec![idx.len(), h, w, c], data)
    }

    /// Evaluation batches in index order, no augmentation.
    pub fn eval_batches(&self, batch_size: usize) -> Batches<'_> {
        Batches { set: self, order: (0..self.len()).collect(), pos: 0, batch_size, augment: None }
    }

    /// Training batches for one epoch: a permutation drawn from
    /// `(seed, epoch)` and per-sample augmentation from the same stream.
    pub fn train_batches(&self, batch_size: usize, seed: u64, epoch: usize, cfg: Option<&AugmentConfig>) -> Batches<'_> {
        let mut rng = epoch_rng(seed, epoch);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng);
        Batches { set: self, order, pos: 0, batch_size, augment: cfg.map(|c| (c.clone(), rng)) }
    }
}

pub(crate) fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Iterator of `(images, labels)`; the last batch may be partial.
pub struct Batches<'a> {
    set: &'a LabeledImages,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    augment: Option<(AugmentConfig, ChaCha8Rng)>,
}

impl Iterator for Batches<'_> {
    type Item = (Activation<f32>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() || self.batch_size == 0 {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let x = match &mut self.augment {
            Some((cfg, rng)) => self.set.stack(idx, Some((cfg, rng))),
            None => self.set.stack(idx, None),
        };
        Some((x, idx.iter().map(|&i| self.set.labels[i]).collect()))
    }
}
