//! Segmentation metrics and analysis probes.

mod report;

pub use report::{report, ReportSummary};

use serde::{Deserialize, Serialize};

use crate::datagen::Scene;
use crate::error::{param_err, shape_err, CcvcError, Result};
use crate::label::{argmax_channels, LabelMap, IGNORE};
use crate::losses::{mean_cosine, ProbMap};
use crate::model::{BranchId, TwoBranchModel};
use crate::tensor::Tensor;

/// Pixel counts indexed `[truth][prediction]`; IGNORE pixels are skipped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.shape() != truth.shape() {
            return shape_err("confusion matrix", truth.shape(), pred.shape());
        }
        let y = self.num_classes;
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if t == IGNORE {
                continue;
            }
            if t as usize >= y || p as usize >= y {
                return param_err("labels", format!("id {} / {} out of {y} classes", t, p));
            }
            self.counts[t as usize * y + p as usize] += 1;
        }
        Ok(())
    }

    /// Per-class IoU; `None` for classes absent from both truth and
    /// prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let y = self.num_classes;
        (0..y)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..y).map(|k| self.get(c, k)).sum::<u64>() - tp;
                let fp: u64 = (0..y).map(|k| self.get(k, c)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(CcvcError::EmptyEvaluation);
        }
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        let hit: u64 = (0..self.num_classes).map(|c| self.get(c, c)).sum();
        (total > 0).then(|| hit as f64 / total as f64)
    }
}

/// Mean IoU over classes present in truth or prediction, plus the
/// per-class values.
pub fn miou(
    preds: &[LabelMap],
    labels: &[LabelMap],
    num_classes: usize,
) -> Result<(f64, Vec<Option<f64>>)> {
    if preds.len() != labels.len() {
        return shape_err("miou list length", labels.len(), preds.len());
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, t) in preds.iter().zip(labels) {
        cm.add(p, t)?;
    }
    Ok((cm.miou()?, cm.iou()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceStats {
    /// Share of non-ignore pixels whose max probability exceeds the threshold.
    pub confident_frac: f64,
    /// Pixel accuracy on those pixels; `None` when there are none.
    pub confident_acc: Option<f64>,
    pub confident_miou: Option<f64>,
}

pub fn confidence_stats(
    probs: &[ProbMap],
    labels: &[LabelMap],
    threshold: f64,
) -> Result<ConfidenceStats> {
    if !(0.0..=1.0).contains(&threshold) {
        return param_err("threshold", format!("{threshold} outside [0, 1]"));
    }
    if probs.len() != labels.len() {
        return shape_err("confidence_stats list length", labels.len(), probs.len());
    }
    let num_classes = probs.first().map_or(1, |p| p.channels());
    let mut cm = ConfusionMatrix::new(num_classes);
    let mut evaluated = 0u64;
    for (p, t) in probs.iter().zip(labels) {
        let [n, _, h, w] = p.shape();
        if t.shape() != [n, h, w] {
            return shape_err("confidence_stats labels", [n, h, w], t.shape());
        }
        let (ids, best) = argmax_channels(p);
        let mut masked = t.clone();
        for ((m, &b), &truth) in masked.data_mut().iter_mut().zip(best.data()).zip(t.data()) {
            if truth != IGNORE {
                evaluated += 1;
                if b.is_nan() || b <= threshold {
                    *m = IGNORE;
                }
            }
        }
        cm.add(&ids, &masked)?;
    }
    let confident = cm.total();
    Ok(ConfidenceStats {
        confident_frac: if evaluated == 0 {
            0.0
        } else {
            confident as f64 / evaluated as f64
        },
        confident_acc: cm.accuracy(),
        confident_miou: cm.miou().ok(),
    })
}

/// Mean per-pixel cosine between the two branches' raw features, eval mode.
pub fn feature_cosine_probe(model: &TwoBranchModel<f32>, images: &Tensor<f32>) -> Result<f64> {
    let f1 = model
        .forward_branch(BranchId::First, images, false)?
        .features
        .to_f64();
    let f2 = model
        .forward_branch(BranchId::Second, images, false)?
        .features
        .to_f64();
    mean_cosine(&f1, &f2)
}

/// As [`feature_cosine_probe`] with branch 2 passed through the mapping head.
pub fn mapped_cosine_probe(model: &TwoBranchModel<f32>, images: &Tensor<f32>) -> Result<f64> {
    let f1 = model
        .forward_branch(BranchId::First, images, false)?
        .features
        .to_f64();
    let f2 = model
        .forward_branch(BranchId::Second, images, false)?
        .features;
    let m = model.map_features(&f2, false, 0)?.to_f64();
    mean_cosine(&f1, &m)
}

/// Everything measured on one scene set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    pub confidence: ConfidenceStats,
    pub mean_cosine: f64,
    pub mapped_cosine: f64,
}

const EVAL_CHUNK: usize = 16;

/// Evaluates branch-1 predictions on `scenes` in eval mode. Probes are
/// averaged per pixel over all scenes.
pub fn evaluate(
    model: &TwoBranchModel<f32>,
    scenes: &[Scene],
    threshold: f64,
) -> Result<Evaluation> {
    if scenes.is_empty() {
        return Err(CcvcError::EmptyEvaluation);
    }
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let mut probs = Vec::new();
    let (mut cos, mut mcos, mut weight) = (0.0, 0.0, 0.0);
    for chunk in scenes.chunks(EVAL_CHUNK) {
        let images = Tensor::concat_batch(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let truth = LabelMap::concat_batch(&chunk.iter().map(|s| &s.label).collect::<Vec<_>>())?;
        let o1 = model.forward_branch(BranchId::First, &images, false)?;
        let o2 = model.forward_branch(BranchId::Second, &images, false)?;
        let p = o1.probs.to_f64();
        preds.push(argmax_channels(&p).0);
        probs.push(p);
        labels.push(truth);
        let f1 = o1.features.to_f64();
        let k = chunk.len() as f64;
        cos += k * mean_cosine(&f1, &o2.features.to_f64())?;
        let mapped = model.map_features(&o2.features, false, 0)?.to_f64();
        mcos += k * mean_cosine(&f1, &mapped)?;
        weight += k;
    }
    let (m, per_class) = miou(&preds, &labels, model.arch.num_classes)?;
    Ok(Evaluation {
        miou: m,
        per_class,
        confidence: confidence_stats(&probs, &labels, threshold)?,
        mean_cosine: cos / weight,
        mapped_cosine: mcos / weight,
    })
}

/// mIoU of branch-1 predictions only.
pub fn evaluate_miou(model: &TwoBranchModel<f32>, scenes: &[Scene]) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(model.arch.num_classes);
    for chunk in scenes.chunks(EVAL_CHUNK) {
        let images = Tensor::concat_batch(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let truth = LabelMap::concat_batch(&chunk.iter().map(|s| &s.label).collect::<Vec<_>>())?;
        cm.add(&model.predict(&images)?, &truth)?;
    }
    cm.miou()
}
