use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::stack_images;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.samples_per_class
    }
}

/// A sampled batch: dataset indices, their labels and the stacked images.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    /// `B×H×W×C`.
    pub images: Tensor,
}

/// Class-balanced episodic sampler: each batch draws `classes_per_batch`
/// distinct classes, then `samples_per_class` distinct images of each.
///
/// Batch `k` depends only on `(seed, k)`, so a resumed run replays the same
/// stream from any step.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    config: SamplerConfig,
    /// Class id → dataset indices, classes in ascending order.
    by_class: Vec<(usize, Vec<usize>)>,
    step: u64,
}

impl BatchSampler {
    pub fn new(dataset: &Dataset, config: SamplerConfig) -> Result<Self> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in dataset.labels.iter().enumerate() {
            map.entry(l).or_default().push(i);
        }
        if config.classes_per_batch == 0 || config.samples_per_class == 0 {
            return Err(Error::Config("batch spec must be positive".into()));
        }
        if config.classes_per_batch > map.len() {
            return Err(Error::Config(format!(
                "classes_per_batch = {} exceeds the {} available classes",
                config.classes_per_batch,
                map.len()
            )));
        }
        if let Some((c, idx)) = map.iter().find(|(_, v)| v.len() < config.samples_per_class) {
            return Err(Error::Config(format!(
                "class {c} has {} images, fewer than samples_per_class = {}",
                idx.len(),
                config.samples_per_class
            )));
        }
        Ok(BatchSampler {
            config,
            by_class: map.into_iter().collect(),
            step: 0,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Dataset indices and labels of batch `step`.
    pub fn indices_at(&self, step: u64) -> (Vec<usize>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step);
        let classes = index::sample(&mut rng, self.by_class.len(), self.config.classes_per_batch);
        let mut indices = Vec::with_capacity(self.config.batch_size());
        let mut labels = Vec::with_capacity(self.config.batch_size());
        for ci in classes.iter() {
            let (label, members) = &self.by_class[ci];
            for k in index::sample(&mut rng, members.len(), self.config.samples_per_class).iter() {
                indices.push(members[k]);
                labels.push(*label);
            }
        }
        (indices, labels)
    }

    pub fn batch_at(&self, dataset: &Dataset, step: u64) -> Result<LabeledBatch> {
        let (indices, labels) = self.indices_at(step);
        let imgs: Vec<&Tensor> = indices.iter().map(|&i| &dataset.images[i]).collect();
        Ok(LabeledBatch {
            images: stack_images(&imgs)?,
            indices,
            labels,
        })
    }

    pub fn next_batch(&mut self, dataset: &Dataset) -> Result<LabeledBatch> {
        let b = self.batch_at(dataset, self.step)?;
        self.step += 1;
        Ok(b)
    }
}
