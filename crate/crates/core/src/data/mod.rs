//! Datasets, zero-shot class splits and the class-balanced batch sampler.

mod raster;
mod sampler;
mod synthetic;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use raster::{decode_pnm, encode_pnm, load_raster_dir, resize_bilinear};
pub use sampler::{BatchSampler, LabeledBatch, SamplerConfig};
pub use synthetic::{
    generate_synthetic, glyph_alphabet, write_dataset, SyntheticDataset, SyntheticSpec, GLYPH_SIZE, PARTS_PER_CLASS,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images in `[0, 1]` with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Each `S×S×C`.
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// Indexed by label id.
    pub class_names: Vec<String>,
    pub image_size: usize,
    pub channels: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    fn subset(&self, keep: impl Fn(usize) -> bool) -> Dataset {
        let (images, labels) = self
            .images
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| keep(l))
            .map(|(i, &l)| (i.clone(), l))
            .unzip();
        Dataset {
            images,
            labels,
            class_names: self.class_names.clone(),
            image_size: self.image_size,
            channels: self.channels,
        }
    }
}

/// Partitions the classes (not the images) into train and test sets: the
/// first `⌈fraction·n⌉` classes of a seeded shuffle go to train.
pub fn split_zero_shot(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let mut classes = dataset.classes();
    if classes.len() < 2 {
        return Err(Error::Config(format!(
            "a zero-shot split needs at least 2 classes, got {}",
            classes.len()
        )));
    }
    let n_train = (train_fraction * classes.len() as f64).ceil() as usize;
    if n_train >= classes.len() {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} leaves no test classes out of {}",
            classes.len()
        )));
    }
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_train = vec![false; dataset.class_names.len().max(classes.iter().max().map_or(0, |m| m + 1))];
    for &c in &classes[..n_train] {
        is_train[c] = true;
    }
    Ok((dataset.subset(|l| is_train[l]), dataset.subset(|l| !is_train[l])))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(classes: usize, per: usize) -> Dataset {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for k in 0..per {
                images.push(Tensor::full(&[2, 2, 1], (c * per + k) as f64));
                labels.push(c);
            }
        }
        Dataset {
            images,
            labels,
            class_names: (0..classes).map(|c| format!("c{c}")).collect(),
            image_size: 2,
            channels: 1,
        }
    }

    #[test]
    fn half_split_is_disjoint() {
        let d = toy(4, 3);
        let (tr, te) = split_zero_shot(&d, 0.5, 1).unwrap();
        assert_eq!(tr.classes().len(), 2);
        assert_eq!(te.classes().len(), 2);
        assert!(tr.classes().iter().all(|c| !te.classes().contains(c)));
        assert_eq!(split_zero_shot(&d, 0.5, 1).unwrap(), (tr, te));
    }

    #[test]
    fn split_preserves_every_image() {
        let d = toy(7, 4);
        let (tr, te) = split_zero_shot(&d, 0.3, 9).unwrap();
        let mut ids: Vec<i64> = tr
            .images
            .iter()
            .chain(&te.images)
            .map(|t| t.data()[0] as i64)
            .collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..28).collect::<Vec<_>>());
        assert_eq!(tr.classes().len(), 3); // ⌈0.3·7⌉
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let d = toy(4, 1);
        for f in [0.0, 1.0, -0.2, 1.5, 0.99] {
            assert!(matches!(split_zero_shot(&d, f, 0), Err(Error::Config(_))), "{f}");
        }
        assert!(split_zero_shot(&toy(1, 3), 0.5, 0).is_err());
    }
}
