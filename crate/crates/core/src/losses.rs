//! Objective terms: feature discrepancy, supervised cross-entropy,
//! pseudo-labels, the conflict partition and the conflict-weighted
//! cross-consistency loss, plus their weighted total.
//!
//! Value functions take probability maps. The `*_grad` variants take
//! logits and also return the analytic gradient with respect to them
//! (or to the feature maps for the discrepancy loss); pseudo-labels and
//! masks are constants under differentiation.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, CcvcError, Result};
use crate::label::{argmax_channels, LabelMap, IGNORE};
use crate::tensor::{softmax_channels, Tensor};

/// Per-pixel class probabilities, `(batch, classes, height, width)`.
pub type ProbMap = Tensor<f64>;
/// Per-pixel feature vectors, `(batch, channels, height, width)`.
pub type FeatureMap = Tensor<f64>;

/// Lower bound on vector norms in L2 normalisation.
pub const NORM_EPS: f64 = 1e-8;

fn same_shape(context: &'static str, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(context, a.shape(), b.shape());
    }
    Ok(())
}

/// Mean over pixels of `1 + cos(f1, f2)` between channel vectors. Lies in
/// `[0, 2]`.
pub fn cosine_discrepancy_loss(f1: &FeatureMap, f2: &FeatureMap) -> Result<f64> {
    Ok(discrepancy(f1, f2, false)?.0)
}

/// Discrepancy loss and its gradients with respect to both inputs.
pub fn cosine_discrepancy_grad(
    f1: &FeatureMap,
    f2: &FeatureMap,
) -> Result<(f64, FeatureMap, FeatureMap)> {
    let (v, g) = discrepancy(f1, f2, true)?;
    let (g1, g2) = g.expect("gradients requested");
    Ok((v, g1, g2))
}

/// Mean per-pixel cosine similarity, in `[-1, 1]`.
pub fn mean_cosine(f1: &FeatureMap, f2: &FeatureMap) -> Result<f64> {
    Ok(cosine_discrepancy_loss(f1, f2)? - 1.0)
}

type GradPair = Option<(FeatureMap, FeatureMap)>;

fn discrepancy(f1: &FeatureMap, f2: &FeatureMap, want_grad: bool) -> Result<(f64, GradPair)> {
    same_shape("cosine_discrepancy_loss", f1, f2)?;
    let [n, c, h, w] = f1.shape();
    let plane = h * w;
    let pixels = n * plane;
    if pixels == 0 || c == 0 {
        return param_err("features", "empty feature map");
    }
    let mut total = 0.0;
    let mut grads = want_grad.then(|| (Tensor::zeros(f1.shape()), Tensor::zeros(f2.shape())));
    let inv_pixels = 1.0 / pixels as f64;
    for i in 0..n {
        let a = f1.item(i);
        let b = f2.item(i);
        for p in 0..plane {
            let mut na = 0.0;
            let mut nb = 0.0;
            let mut dot = 0.0;
            for k in 0..c {
                let (x, y) = (a[k * plane + p], b[k * plane + p]);
                na += x * x;
                nb += y * y;
                dot += x * y;
            }
            let (na, nb) = (na.sqrt(), nb.sqrt());
            let (da, db) = (na.max(NORM_EPS), nb.max(NORM_EPS));
            let cos = dot / (da * db);
            total += 1.0 + cos;
            if let Some((g1, g2)) = grads.as_mut() {
                // d cos / d a = (b/|b| - cos_a a/|a|) / |a| with the
                // projection term vanishing below the norm floor.
                let proj_a = if na > NORM_EPS { cos / da } else { 0.0 };
                let proj_b = if nb > NORM_EPS { cos / db } else { 0.0 };
                let ga = g1.item_mut(i);
                for k in 0..c {
                    let idx = k * plane + p;
                    ga[idx] = inv_pixels * (b[idx] / (da * db) - proj_a * a[idx] / da);
                }
                let gb = g2.item_mut(i);
                for k in 0..c {
                    let idx = k * plane + p;
                    gb[idx] = inv_pixels * (a[idx] / (da * db) - proj_b * b[idx] / db);
                }
            }
        }
    }
    Ok((total * inv_pixels, grads))
}

/// Value of the supervised term with diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedLoss {
    /// Average of the two branch losses.
    pub value: f64,
    pub per_branch: [f64; 2],
    /// Images whose labels are entirely IGNORE; they contribute 0.
    pub empty_images: usize,
    /// Set when every pixel of the batch is IGNORE.
    pub empty_supervision: bool,
}

/// Per-branch cross-entropy averaged over each image's non-ignore pixels
/// and then over images, followed by the average of the two branches.
pub fn supervised_loss(
    probs1: &ProbMap,
    probs2: &ProbMap,
    labels: &LabelMap,
) -> Result<SupervisedLoss> {
    same_shape("supervised_loss", probs1, probs2)?;
    let scales = supervised_scales(probs1, labels)?;
    let mut per_branch = [0.0; 2];
    for (b, probs) in [probs1, probs2].into_iter().enumerate() {
        let plane = probs.plane();
        let mut total = 0.0;
        for (i, &s) in scales.per_image.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            let lab = labels.item(i);
            let pr = probs.item(i);
            let mut sum = 0.0;
            for p in 0..plane {
                let t = lab[p];
                if t != IGNORE {
                    sum -= pr[t as usize * plane + p].ln();
                }
            }
            total += s * sum;
        }
        per_branch[b] = total;
    }
    Ok(SupervisedLoss {
        value: 0.5 * (per_branch[0] + per_branch[1]),
        per_branch,
        empty_images: scales.empty_images,
        empty_supervision: scales.empty_images == labels.batch(),
    })
}

/// Supervised loss from logits and its gradient with respect to each
/// branch's logits.
pub fn supervised_loss_grad(
    logits1: &Tensor<f64>,
    logits2: &Tensor<f64>,
    labels: &LabelMap,
) -> Result<(SupervisedLoss, [Tensor<f64>; 2])> {
    same_shape("supervised_loss_grad", logits1, logits2)?;
    let scales = supervised_scales(logits1, labels)?;
    let weights: Vec<f64> = labels
        .data()
        .iter()
        .map(|&t| if t == IGNORE { 0.0 } else { 1.0 })
        .collect();
    // Branch loss = 0.5 * its own term in the average.
    let half: Vec<f64> = scales.per_image.iter().map(|s| 0.5 * s).collect();
    let (v1, g1) = weighted_ce_grad(logits1, labels, &weights, &half);
    let (v2, g2) = weighted_ce_grad(logits2, labels, &weights, &half);
    let per_branch = [2.0 * v1, 2.0 * v2];
    Ok((
        SupervisedLoss {
            value: v1 + v2,
            per_branch,
            empty_images: scales.empty_images,
            empty_supervision: scales.empty_images == labels.batch(),
        },
        [g1, g2],
    ))
}

struct SupervisedScales {
    per_image: Vec<f64>,
    empty_images: usize,
}

fn check_labels(context: &'static str, scores: &Tensor<f64>, labels: &LabelMap) -> Result<()> {
    let [n, c, h, w] = scores.shape();
    if labels.shape() != [n, h, w] {
        return shape_err(context, [n, h, w], labels.shape());
    }
    if let Some(&bad) = labels
        .data()
        .iter()
        .find(|&&t| t != IGNORE && t as usize >= c)
    {
        return param_err("labels", format!("class id {bad} >= {c} classes"));
    }
    Ok(())
}

fn supervised_scales(scores: &Tensor<f64>, labels: &LabelMap) -> Result<SupervisedScales> {
    check_labels("supervised_loss labels", scores, labels)?;
    let n = labels.batch();
    if n == 0 {
        return param_err("labels", "empty batch");
    }
    let mut empty_images = 0;
    let per_image = (0..n)
        .map(|i| {
            let k = labels.item(i).iter().filter(|&&t| t != IGNORE).count();
            if k == 0 {
                empty_images += 1;
                0.0
            } else {
                1.0 / (n as f64 * k as f64)
            }
        })
        .collect();
    Ok(SupervisedScales {
        per_image,
        empty_images,
    })
}

/// `sum_m scale_m sum_n weight_mn * ce(softmax(logits)_mn, target_mn)` and
/// its gradient `scale_m * weight_mn * (p_mn - onehot(target_mn))`.
/// Pixels with a zero weight are skipped, so their targets may be IGNORE.
fn weighted_ce_grad(
    logits: &Tensor<f64>,
    targets: &LabelMap,
    weights: &[f64],
    per_image_scale: &[f64],
) -> (f64, Tensor<f64>) {
    let [n, c, h, w] = logits.shape();
    let plane = h * w;
    let probs = softmax_channels(logits);
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for i in 0..n {
        let s = per_image_scale[i];
        let z = logits.item(i);
        let pr = probs.item(i);
        let tg = targets.item(i);
        let g = grad.item_mut(i);
        for p in 0..plane {
            let wt = weights[i * plane + p] * s;
            if wt == 0.0 {
                continue;
            }
            let t = tg[p] as usize;
            let mut max = f64::NEG_INFINITY;
            for k in 0..c {
                max = max.max(z[k * plane + p]);
            }
            let lse = max
                + (0..c)
                    .map(|k| (z[k * plane + p] - max).exp())
                    .sum::<f64>()
                    .ln();
            total += wt * (lse - z[t * plane + p]);
            for k in 0..c {
                g[k * plane + p] = wt * pr[k * plane + p];
            }
            g[t * plane + p] -= wt;
        }
    }
    (total, grad)
}

/// Hard pseudo-labels (argmax, ties to the smaller id) and the per-pixel
/// maximum probability.
pub fn make_pseudo_labels(probs: &ProbMap) -> (LabelMap, Vec<f64>) {
    let (ids, best) = argmax_channels(probs);
    (ids, best.into_vec())
}

/// Which branch's confidence gates the conflict-and-confident mask of
/// branch `i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ConfidenceSource {
    /// Branch `i`'s own maximum probability.
    #[default]
    Own,
    /// The maximum probability of branch `3 - i`, which produced the
    /// pseudo-labels branch `i` learns from.
    Teacher,
}

/// Per-pixel masks for the two branches; all vectors are laid out like a
/// `(batch, height, width)` label map.
#[derive(Clone, Debug, PartialEq)]
pub struct ConflictPartition {
    pub shape: [usize; 3],
    /// 1 where the two branches' pseudo-labels disagree.
    pub conflict: Vec<u8>,
    /// Conflicting and confident pixels, per branch.
    pub cc: [Vec<u8>; 2],
    /// Complement of `cc`: agreeing or conflicting-but-unconfident pixels.
    pub e: [Vec<u8>; 2],
    /// Maximum class probability, per branch.
    pub confidence: [Vec<f64>; 2],
    /// Argmax pseudo-labels, per branch.
    pub pseudo: [LabelMap; 2],
}

impl ConflictPartition {
    pub fn pixels(&self) -> usize {
        self.conflict.len()
    }

    /// Fraction of pixels marked conflicting-and-confident, averaged over
    /// the two branches.
    pub fn cc_fraction(&self) -> f64 {
        let total: usize = self.cc.iter().flatten().map(|&v| v as usize).sum();
        total as f64 / (2 * self.pixels()).max(1) as f64
    }

    /// Swaps the roles of the two branches.
    pub fn swapped(&self) -> ConflictPartition {
        let [c1, c2] = self.cc.clone();
        let [e1, e2] = self.e.clone();
        let [f1, f2] = self.confidence.clone();
        let [p1, p2] = self.pseudo.clone();
        ConflictPartition {
            shape: self.shape,
            conflict: self.conflict.clone(),
            cc: [c2, c1],
            e: [e2, e1],
            confidence: [f2, f1],
            pseudo: [p2, p1],
        }
    }
}

pub fn conflict_partition(
    probs1: &ProbMap,
    probs2: &ProbMap,
    gamma: f64,
) -> Result<ConflictPartition> {
    conflict_partition_with(probs1, probs2, gamma, ConfidenceSource::Own)
}

/// Marks pixels where the branches' pseudo-labels disagree and, per
/// branch, those among them whose confidence is strictly above `gamma`.
pub fn conflict_partition_with(
    probs1: &ProbMap,
    probs2: &ProbMap,
    gamma: f64,
    source: ConfidenceSource,
) -> Result<ConflictPartition> {
    same_shape("conflict_partition", probs1, probs2)?;
    if !(0.0..=1.0).contains(&gamma) {
        return param_err("gamma", format!("{gamma} outside [0, 1]"));
    }
    let (l1, c1) = make_pseudo_labels(probs1);
    let (l2, c2) = make_pseudo_labels(probs2);
    let conflict: Vec<u8> = l1
        .data()
        .iter()
        .zip(l2.data())
        .map(|(a, b)| u8::from(a != b))
        .collect();
    let gate = |own: &[f64], other: &[f64]| -> Vec<u8> {
        let conf = match source {
            ConfidenceSource::Own => own,
            ConfidenceSource::Teacher => other,
        };
        conflict
            .iter()
            .zip(conf)
            .map(|(&d, &v)| u8::from(d == 1 && v > gamma))
            .collect()
    };
    let cc1 = gate(&c1, &c2);
    let cc2 = gate(&c2, &c1);
    let e1 = cc1.iter().map(|&v| 1 - v).collect();
    let e2 = cc2.iter().map(|&v| 1 - v).collect();
    Ok(ConflictPartition {
        shape: l1.shape(),
        conflict,
        cc: [cc1, cc2],
        e: [e1, e2],
        confidence: [c1, c2],
        pseudo: [l1, l2],
    })
}

/// Value of the cross-consistency term with its per-branch decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyLoss {
    /// Average of the two branch losses.
    pub value: f64,
    /// `omega_c * cc[i] + e[i]`.
    pub per_branch: [f64; 2],
    /// Conflicting-and-confident part, before weighting.
    pub cc: [f64; 2],
    /// Remaining part.
    pub e: [f64; 2],
}

fn check_partition(probs: &Tensor<f64>, partition: &ConflictPartition) -> Result<()> {
    let [n, _, h, w] = probs.shape();
    if partition.shape != [n, h, w] {
        return shape_err("consistency partition", [n, h, w], partition.shape);
    }
    Ok(())
}

/// Cross-entropy of each branch against the other branch's pseudo-labels,
/// split by the partition into a conflicting-and-confident sum and a
/// remainder. Both sums are divided by the full pixel count of each image
/// and averaged over images.
pub fn consistency_loss_cpl(
    probs1: &ProbMap,
    probs2: &ProbMap,
    partition: &ConflictPartition,
    omega_c: f64,
) -> Result<ConsistencyLoss> {
    same_shape("consistency_loss_cpl", probs1, probs2)?;
    check_partition(probs1, partition)?;
    let [n, _, h, w] = probs1.shape();
    let plane = h * w;
    let norm = 1.0 / (n * plane) as f64;
    let mut cc = [0.0; 2];
    let mut e = [0.0; 2];
    for (b, probs) in [probs1, probs2].into_iter().enumerate() {
        let target = &partition.pseudo[1 - b];
        for i in 0..n {
            let pr = probs.item(i);
            let tg = target.item(i);
            for p in 0..plane {
                let ce = -pr[tg[p] as usize * plane + p].ln();
                if partition.cc[b][i * plane + p] == 1 {
                    cc[b] += ce;
                } else {
                    e[b] += ce;
                }
            }
        }
        cc[b] *= norm;
        e[b] *= norm;
    }
    let per_branch = [omega_c * cc[0] + e[0], omega_c * cc[1] + e[1]];
    Ok(ConsistencyLoss {
        value: 0.5 * (per_branch[0] + per_branch[1]),
        per_branch,
        cc,
        e,
    })
}

/// Which part of the consistency objective to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConsistencyTerm {
    /// `0.5 * (L_1 + L_2)`.
    Average,
    /// Only the branch-`i` loss `L_i` (0-based index).
    Branch(usize),
}

/// Consistency loss from logits with gradients for both branches.
///
/// `pixel_weights`, when given, multiplies every pixel's cross-entropy (a
/// `(batch, height, width)` layout, e.g. zero inside cutout boxes).
/// Pseudo-labels in `partition` are constants, so the gradient of branch
/// `i`'s term with respect to the other branch's logits is exactly zero.
pub fn consistency_loss_cpl_grad(
    logits1: &Tensor<f64>,
    logits2: &Tensor<f64>,
    partition: &ConflictPartition,
    omega_c: f64,
    pixel_weights: Option<&[f64]>,
    term: ConsistencyTerm,
) -> Result<(ConsistencyLoss, [Tensor<f64>; 2])> {
    same_shape("consistency_loss_cpl_grad", logits1, logits2)?;
    check_partition(logits1, partition)?;
    let [n, _, h, w] = logits1.shape();
    let pixels = n * h * w;
    if let Some(pw) = pixel_weights {
        if pw.len() != pixels {
            return shape_err("consistency pixel weights", pixels, pw.len());
        }
    }
    let base = |k: usize| pixel_weights.map_or(1.0, |pw| pw[k]);
    let scale = vec![1.0 / pixels as f64; n];
    let mut cc = [0.0; 2];
    let mut e = [0.0; 2];
    let mut grads = [
        Tensor::zeros(logits1.shape()),
        Tensor::zeros(logits2.shape()),
    ];
    for (b, logits) in [logits1, logits2].into_iter().enumerate() {
        let target = &partition.pseudo[1 - b];
        let w_cc: Vec<f64> = (0..pixels)
            .map(|k| base(k) * f64::from(partition.cc[b][k]))
            .collect();
        let w_e: Vec<f64> = (0..pixels)
            .map(|k| base(k) * f64::from(partition.e[b][k]))
            .collect();
        let (v_cc, g_cc) = weighted_ce_grad(logits, target, &w_cc, &scale);
        let (v_e, g_e) = weighted_ce_grad(logits, target, &w_e, &scale);
        cc[b] = v_cc;
        e[b] = v_e;
        let coeff = match term {
            ConsistencyTerm::Average => 0.5,
            ConsistencyTerm::Branch(i) if i == b => 1.0,
            ConsistencyTerm::Branch(_) => 0.0,
        };
        if coeff != 0.0 {
            let g = &mut grads[b];
            for ((out, a), c) in g.data_mut().iter_mut().zip(g_cc.data()).zip(g_e.data()) {
                *out = coeff * (omega_c * a + c);
            }
        }
    }
    let per_branch = [omega_c * cc[0] + e[0], omega_c * cc[1] + e[1]];
    Ok((
        ConsistencyLoss {
            value: 0.5 * (per_branch[0] + per_branch[1]),
            per_branch,
            cc,
            e,
        },
        grads,
    ))
}

/// Trade-off weights of the three objective terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    /// The weighting used for the original (non-blended) VOC partitions.
    fn default() -> Self {
        Self {
            lambda1: 5.0,
            lambda2: 1.0,
            lambda3: 2.0,
        }
    }
}

/// Raw objective components before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub sup: f64,
    pub con: f64,
    pub con_cc: [f64; 2],
    pub con_e: [f64; 2],
    pub dis_l: f64,
    pub dis_u: f64,
    pub con_cc_frac: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup: f64,
    pub con: f64,
    pub con_cc: [f64; 2],
    pub con_e: [f64; 2],
    pub dis: f64,
    pub dis_l: f64,
    pub dis_u: f64,
    pub total: f64,
    /// Fraction of unlabelled pixels in the conflicting-and-confident set.
    pub con_cc_frac: f64,
}

/// `lambda1 * sup + lambda2 * con + lambda3 * dis`, with
/// `dis = 0.5 * (dis_l + dis_u)`.
pub fn total_loss(c: &LossComponents, weights: &LossWeights) -> Result<LossBreakdown> {
    let named = [
        ("sup", c.sup),
        ("con", c.con),
        ("con_cc[0]", c.con_cc[0]),
        ("con_cc[1]", c.con_cc[1]),
        ("con_e[0]", c.con_e[0]),
        ("con_e[1]", c.con_e[1]),
        ("dis_l", c.dis_l),
        ("dis_u", c.dis_u),
        ("lambda1", weights.lambda1),
        ("lambda2", weights.lambda2),
        ("lambda3", weights.lambda3),
    ];
    if let Some((name, value)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(CcvcError::NonFinite {
            component: (*name).to_string(),
            value: *value,
        });
    }
    let dis = 0.5 * (c.dis_l + c.dis_u);
    Ok(LossBreakdown {
        sup: c.sup,
        con: c.con,
        con_cc: c.con_cc,
        con_e: c.con_e,
        dis,
        dis_l: c.dis_l,
        dis_u: c.dis_u,
        total: weights.lambda1 * c.sup + weights.lambda2 * c.con + weights.lambda3 * dis,
        con_cc_frac: c.con_cc_frac,
    })
}
