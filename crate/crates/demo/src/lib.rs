//! WebAssembly bindings for the browser demo in `www/`.
//!
//! The exported operations are: drawing synthetic scenes, training a tiny
//! two-branch model in place while inspecting its conflict partition, and
//! evaluating the discrepancy loss and learning-rate schedule.

use wasm_bindgen::prelude::*;

use ccvc::config::{ExperimentConfig, Fraction};
use ccvc::datagen::{class_color, make_batch, prepare_data, PreparedData, Scene};
use ccvc::losses::{conflict_partition, cosine_discrepancy_loss, ConflictPartition};
use ccvc::model::BranchId;
use ccvc::tensor::Tensor;
use ccvc::trainer::{poly_lr, train_step, TrainState};
use ccvc::Result;

/// Colours of the partition view: agreement, conflict below the gate,
/// conflict above the gate in one branch, and in both.
pub const PARTITION_COLORS: [[u8; 3]; 4] =
    [[40, 40, 40], [90, 140, 230], [240, 170, 40], [230, 60, 60]];

/// Small enough to train interactively in a browser tab.
pub fn demo_config(seed: u64, use_dis: bool) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        use_dis,
        image_size: 32,
        base_width: 4,
        feature_channels: 16,
        num_classes: 4,
        scenes: 120,
        val_fraction: Fraction::new(1, 6).expect("valid"),
        labelled_fraction: Fraction::new(1, 5).expect("valid"),
        batch_size: 4,
        base_lr: 0.01,
        epochs: 20,
        ..Default::default()
    }
}

fn err(e: ccvc::CcvcError) -> JsError {
    JsError::new(&e.to_string())
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_rgba(image: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (image.height(), image.width());
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(to_byte(f64::from(image.at(0, c, y, x))));
            }
            out.push(255);
        }
    }
    out
}

fn labels_rgba(labels: &[u8], num_classes: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(labels.len() * 4);
    for &l in labels {
        let rgb = if (l as usize) < num_classes {
            class_color(l as usize, num_classes)
        } else {
            [1.0; 3]
        };
        out.extend(rgb.iter().map(|&v| to_byte(v)));
        out.push(255);
    }
    out
}

/// RGBA pixels of a scene image and of its label map.
pub fn scene_views(scene: &Scene, num_classes: usize) -> (Vec<u8>, Vec<u8>) {
    (
        image_rgba(&scene.image),
        labels_rgba(scene.label.data(), num_classes),
    )
}

/// Partition class per pixel, indexing `PARTITION_COLORS`.
pub fn partition_codes(p: &ConflictPartition) -> Vec<u8> {
    (0..p.pixels())
        .map(|i| match (p.conflict[i], p.cc[0][i] + p.cc[1][i]) {
            (0, _) => 0,
            (_, 0) => 1,
            (_, 1) => 2,
            _ => 3,
        })
        .collect()
}

/// Discrepancy loss between the unit vectors at angle 0 and `theta`.
#[wasm_bindgen]
pub fn discrepancy_at_angle(theta: f64) -> f64 {
    let f1 = Tensor::from_vec([1, 2, 1, 1], vec![1.0, 0.0]).expect("shape");
    let f2 = Tensor::from_vec([1, 2, 1, 1], vec![theta.cos(), theta.sin()]).expect("shape");
    cosine_discrepancy_loss(&f1, &f2).expect("nonzero vectors")
}

/// Learning rate at `points` evenly spaced steps of a poly schedule.
#[wasm_bindgen]
pub fn poly_schedule(
    base: f64,
    total: u32,
    power: f64,
    points: u32,
) -> std::result::Result<Vec<f64>, JsError> {
    let n = points.max(2) as u64;
    (0..n)
        .map(|i| poly_lr(base, i * total as u64 / (n - 1), total as u64, power).map_err(err))
        .collect()
}

/// A tiny two-branch model trained step by step on synthetic scenes.
#[wasm_bindgen]
pub struct Demo {
    cfg: ExperimentConfig,
    data: PreparedData,
    state: TrainState,
    view: usize,
    last_loss: f64,
}

impl Demo {
    pub fn create(seed: u64, use_dis: bool) -> Result<Demo> {
        let cfg = demo_config(seed, use_dis);
        let data = prepare_data(&cfg)?;
        let total =
            (cfg.epochs * ccvc::datagen::steps_per_epoch(&data.split, cfg.batch_size)) as u64;
        let state = TrainState::new(&cfg, total)?;
        Ok(Demo {
            cfg,
            data,
            state,
            view: 0,
            last_loss: f64::NAN,
        })
    }

    /// Runs up to `steps` updates, stopping at the end of the schedule.
    pub fn advance(&mut self, steps: u32) -> Result<f64> {
        for _ in 0..steps {
            if self.state.step >= self.state.total_steps {
                break;
            }
            let batch = make_batch(
                &self.data.split,
                self.cfg.batch_size,
                self.state.step,
                &self.cfg,
            )?;
            self.last_loss = train_step(&mut self.state, &batch)?.total;
        }
        Ok(self.last_loss)
    }

    fn scene(&self) -> &Scene {
        &self.data.val[self.view % self.data.val.len()]
    }

    /// Both branches' predictions, partition and feature cosine on the
    /// current view.
    pub fn inspect(&self, gamma: f64) -> Result<Inspection> {
        let model = &self.state.model;
        let img = &self.scene().image;
        let o1 = model.forward_branch(BranchId::First, img, false)?;
        let o2 = model.forward_branch(BranchId::Second, img, false)?;
        let (p1, p2) = (o1.probs.to_f64(), o2.probs.to_f64());
        let part = conflict_partition(&p1, &p2, gamma)?;
        let cosine = cosine_discrepancy_loss(&o1.features.to_f64(), &o2.features.to_f64())? - 1.0;
        let conflict = part.conflict.iter().map(|&v| v as f64).sum::<f64>() / part.pixels() as f64;
        Ok(Inspection {
            codes: partition_codes(&part),
            cc_fraction: part.cc_fraction(),
            conflict_fraction: conflict,
            cosine,
            preds: [
                part.pseudo[0].data().to_vec(),
                part.pseudo[1].data().to_vec(),
            ],
        })
    }
}

/// Result of [`Demo::inspect`].
pub struct Inspection {
    pub codes: Vec<u8>,
    pub preds: [Vec<u8>; 2],
    pub cc_fraction: f64,
    pub conflict_fraction: f64,
    pub cosine: f64,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, use_dis: bool) -> std::result::Result<Demo, JsError> {
        Demo::create(seed as u64, use_dis).map_err(err)
    }

    pub fn size(&self) -> usize {
        self.cfg.image_size
    }

    pub fn step(&self) -> u32 {
        self.state.step as u32
    }

    pub fn total_steps(&self) -> u32 {
        self.state.total_steps as u32
    }

    pub fn train(&mut self, steps: u32) -> std::result::Result<f64, JsError> {
        self.advance(steps).map_err(err)
    }

    /// Moves to another validation scene.
    pub fn show(&mut self, index: usize) {
        self.view = index;
    }

    pub fn scene_rgba(&self) -> Vec<u8> {
        scene_views(self.scene(), self.cfg.num_classes).0
    }

    pub fn label_rgba(&self) -> Vec<u8> {
        scene_views(self.scene(), self.cfg.num_classes).1
    }

    pub fn prediction_rgba(
        &self,
        branch: u32,
        gamma: f64,
    ) -> std::result::Result<Vec<u8>, JsError> {
        let i = self.inspect(gamma).map_err(err)?;
        Ok(labels_rgba(
            &i.preds[(branch as usize).min(1)],
            self.cfg.num_classes,
        ))
    }

    pub fn partition_rgba(&self, gamma: f64) -> std::result::Result<Vec<u8>, JsError> {
        let i = self.inspect(gamma).map_err(err)?;
        Ok(i.codes
            .iter()
            .flat_map(|&c| {
                let [r, g, b] = PARTITION_COLORS[c as usize];
                [r, g, b, 255]
            })
            .collect())
    }

    /// `{"cc_fraction", "conflict_fraction", "cosine", "loss"}` as JSON.
    pub fn stats(&self, gamma: f64) -> std::result::Result<String, JsError> {
        let i = self.inspect(gamma).map_err(err)?;
        let loss = if self.last_loss.is_finite() {
            Some(self.last_loss)
        } else {
            None
        };
        Ok(serde_json::json!({
            "cc_fraction": i.cc_fraction,
            "conflict_fraction": i.conflict_fraction,
            "cosine": i.cosine,
            "loss": loss,
        })
        .to_string())
    }
}
