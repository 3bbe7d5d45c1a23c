use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::augment::{
    strong_augment_with, weak_augment_with, StrongParams, StrongRecord, WeakParams, WeakRecord,
};
use super::{DatasetSplit, Scene};
use crate::config::ExperimentConfig;
use crate::error::{param_err, Result};
use crate::label::LabelMap;
use crate::rng::{self, TAG_SAMPLER};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u64,
    pub labelled: bool,
    pub weak: WeakRecord,
    pub strong: Option<StrongRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    /// Labelled samples first, then unlabelled.
    pub samples: Vec<SampleRecord>,
}

/// One training step's input: `h` labelled and `h` unlabelled images.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub step: u64,
    pub labelled_images: Tensor<f32>,
    pub labelled_labels: LabelMap,
    pub unlabelled_images: Tensor<f32>,
    pub record: AugmentationRecord,
}

impl Batch {
    pub fn labelled_ids(&self) -> Vec<u64> {
        self.record
            .samples
            .iter()
            .filter(|s| s.labelled)
            .map(|s| s.id)
            .collect()
    }

    pub fn unlabelled_ids(&self) -> Vec<u64> {
        self.record
            .samples
            .iter()
            .filter(|s| !s.labelled)
            .map(|s| s.id)
            .collect()
    }

    /// Per-pixel weights over the unlabelled half, zero inside cutout
    /// boxes, laid out `(h, H, W)`.
    pub fn unlabelled_cutout_weights(&self) -> Vec<f64> {
        let [n, _, hh, ww] = self.unlabelled_images.shape();
        let mut w = vec![1.0; n * hh * ww];
        let unl = self.record.samples.iter().filter(|s| !s.labelled);
        for (i, s) in unl.enumerate() {
            if let Some(b) = s.strong.and_then(|r| r.cutout) {
                for y in b.y0..b.y0 + b.h {
                    for x in b.x0..b.x0 + b.w {
                        w[i * hh * ww + y * ww + x] = 0.0;
                    }
                }
            }
        }
        w
    }
}

/// Steps needed to visit every unlabelled scene once.
pub fn steps_per_epoch(split: &DatasetSplit, batch_size: usize) -> usize {
    let h = (batch_size / 2).max(1);
    split.unlabelled.len().div_ceil(h).max(1)
}

fn permutation(seed: u64, tags: &[u64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, tags));
    idx
}

/// Assembles the batch for global `step`. Unlabelled scenes follow a
/// fresh permutation every epoch, so a batch never repeats one; the
/// labelled pool cycles through its own permutations independently.
/// Augmentation seeds depend only on `(seed, step, slot)`.
pub fn make_batch(
    split: &DatasetSplit,
    batch_size: usize,
    step: u64,
    cfg: &ExperimentConfig,
) -> Result<Batch> {
    if batch_size < 2 || !batch_size.is_multiple_of(2) {
        return param_err(
            "batch_size",
            format!("{batch_size} must be even and at least 2"),
        );
    }
    let h = batch_size / 2;
    let (nl, nu) = (split.labelled.len(), split.unlabelled.len());
    if nl == 0 {
        return param_err("labelled", "no labelled scenes");
    }
    if nu < h {
        return param_err(
            "batch_size",
            format!("half batch {h} exceeds {nu} unlabelled scenes"),
        );
    }
    let seed = cfg.seed;
    let spe = steps_per_epoch(split, batch_size) as u64;
    let epoch = step / spe;
    let uperm = permutation(seed, &[TAG_SAMPLER, 0, epoch], nu);
    let ustart = (step % spe) as usize * h;
    let unl: Vec<&Scene> = (0..h)
        .map(|j| &split.unlabelled[uperm[(ustart + j) % nu]])
        .collect();

    let mut lab = Vec::with_capacity(h);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for j in 0..h as u64 {
        let g = step * h as u64 + j;
        let cycle = g / nl as u64;
        if cached.as_ref().map(|c| c.0) != Some(cycle) {
            cached = Some((cycle, permutation(seed, &[TAG_SAMPLER, 1, cycle], nl)));
        }
        let perm = &cached.as_ref().expect("set").1;
        lab.push(&split.labelled[perm[(g % nl as u64) as usize]]);
    }

    let weak = WeakParams::from_config(cfg);
    let strong = if cfg.use_strong_aug {
        StrongParams::from_config(cfg)
    } else {
        StrongParams::disabled()
    };
    let mut record = AugmentationRecord::default();
    let mut limgs = Vec::with_capacity(h);
    let mut llabs = Vec::with_capacity(h);
    for (slot, s) in lab.iter().enumerate() {
        let (a, w) = weak_augment_with(s, &weak, rng::derive(seed, &[step, slot as u64]))?;
        record.samples.push(SampleRecord {
            id: s.id,
            labelled: true,
            weak: w,
            strong: None,
        });
        limgs.push(a.image);
        llabs.push(a.label);
    }
    let mut uimgs = Vec::with_capacity(h);
    for (j, s) in unl.iter().enumerate() {
        let slot = (h + j) as u64;
        let (a, w) = weak_augment_with(s, &weak, rng::derive(seed, &[step, slot]))?;
        let (img, sr) = if cfg.use_strong_aug {
            let (img, r) =
                strong_augment_with(&a.image, &strong, rng::derive(seed, &[step, slot, 1]))?;
            (img, Some(r))
        } else {
            (a.image, None)
        };
        record.samples.push(SampleRecord {
            id: s.id,
            labelled: false,
            weak: w,
            strong: sr,
        });
        uimgs.push(img);
    }
    Ok(Batch {
        step,
        labelled_images: Tensor::concat_batch(&limgs.iter().collect::<Vec<_>>())?,
        labelled_labels: LabelMap::concat_batch(&llabs.iter().collect::<Vec<_>>())?,
        unlabelled_images: Tensor::concat_batch(&uimgs.iter().collect::<Vec<_>>())?,
        record,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Fraction;
    use crate::datagen::{generate_corpus, split_dataset};
    use std::collections::HashSet;

    fn setup() -> (DatasetSplit, ExperimentConfig) {
        let cfg = ExperimentConfig {
            image_size: 16,
            ..Default::default()
        };
        let scenes = generate_corpus(0, 44, 4, 16).unwrap();
        (
            split_dataset(&scenes, Fraction::new(1, 11).unwrap(), 0).unwrap(),
            cfg,
        )
    }

    #[test]
    fn unlabelled_epoch_covers_pool_without_batch_duplicates() {
        let (split, cfg) = setup();
        let spe = steps_per_epoch(&split, 8) as u64;
        assert_eq!(spe, 10);
        let mut seen = HashSet::new();
        for step in 0..spe {
            let b = make_batch(&split, 8, step, &cfg).unwrap();
            let ids = b.unlabelled_ids();
            assert_eq!(ids.iter().collect::<HashSet<_>>().len(), ids.len());
            seen.extend(ids);
            assert_eq!(b.labelled_images.shape(), [4, 3, 16, 16]);
            assert_eq!(b.labelled_labels.shape(), [4, 16, 16]);
        }
        assert_eq!(seen.len(), 40);
    }

    #[test]
    fn deterministic_and_rejects_odd_batch() {
        let (split, cfg) = setup();
        assert_eq!(
            make_batch(&split, 4, 7, &cfg).unwrap(),
            make_batch(&split, 4, 7, &cfg).unwrap()
        );
        assert_ne!(
            make_batch(&split, 4, 7, &cfg).unwrap(),
            make_batch(&split, 4, 8, &cfg).unwrap()
        );
        assert!(make_batch(&split, 5, 0, &cfg).is_err());
    }

    #[test]
    fn cutout_weights_follow_records() {
        let (split, mut cfg) = setup();
        cfg.cutout_prob = 1.0;
        let b = make_batch(&split, 4, 0, &cfg).unwrap();
        let w = b.unlabelled_cutout_weights();
        let zeros = w.iter().filter(|v| **v == 0.0).count();
        let expected: usize = b
            .record
            .samples
            .iter()
            .filter_map(|s| s.strong.and_then(|r| r.cutout))
            .map(|c| c.h * c.w)
            .sum();
        assert_eq!(zeros, expected);
        assert!(expected > 0);
    }
}
