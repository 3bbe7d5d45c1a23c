//! Synthetic scenes, labelled/unlabelled splitting, augmentation, batch
//! assembly and folder-dataset ingestion.

mod augment;
mod batch;
mod folder;

pub use augment::{
    hflip, strong_augment, strong_augment_with, weak_augment, weak_augment_with, CutoutBox,
    StrongParams, StrongRecord, WeakParams, WeakRecord,
};
pub use batch::{make_batch, steps_per_epoch, AugmentationRecord, Batch, SampleRecord};
pub use folder::{load_folder_dataset, save_folder_dataset};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{ExperimentConfig, Fraction};
use crate::error::{param_err, shape_err, Result};
use crate::label::{LabelMap, IGNORE};
use crate::rng::{self, TAG_SCENE, TAG_SPLIT};
use crate::tensor::Tensor;

/// One image with its per-pixel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// Identity within its corpus.
    pub id: u64,
    /// `(1, channels, height, width)`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `(1, height, width)`.
    pub label: LabelMap,
}

impl Scene {
    pub fn new(id: u64, image: Tensor<f32>, label: LabelMap) -> Result<Self> {
        if image.batch() != 1 || label.batch() != 1 {
            return shape_err("Scene batch", 1, (image.batch(), label.batch()));
        }
        if [image.height(), image.width()] != [label.height(), label.width()] {
            return shape_err(
                "Scene image/label size",
                [image.height(), image.width()],
                [label.height(), label.width()],
            );
        }
        Ok(Self { id, image, label })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.image.height(), self.image.width())
    }

    /// Same image with every label replaced by IGNORE.
    pub fn withheld(&self) -> Scene {
        Scene {
            id: self.id,
            image: self.image.clone(),
            label: LabelMap::filled(self.label.shape(), IGNORE),
        }
    }
}

/// Corpus split into scenes that keep their labels and scenes whose
/// labels are withheld.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub labelled: Vec<Scene>,
    pub unlabelled: Vec<Scene>,
    pub seed: u64,
}

/// Mean colour of each class in RGB. Foreground hues are spread evenly
/// around the colour wheel at moderate saturation; the background has no
/// fixed colour.
pub fn class_color(class: usize, num_classes: usize) -> [f64; 3] {
    if class == 0 {
        return [0.5, 0.5, 0.5];
    }
    let hue = (class - 1) as f64 / (num_classes - 1) as f64;
    hsv_to_rgb(hue, 0.55, 0.75)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disk { cy: f64, cx: f64, r: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Disk { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
            Shape::Triangle { pts } => {
                let sign = |(ay, ax): (f64, f64), (by, bx): (f64, f64)| {
                    (x - bx) * (ay - by) - (ax - bx) * (y - by)
                };
                let d1 = sign(pts[0], pts[1]);
                let d2 = sign(pts[1], pts[2]);
                let d3 = sign(pts[2], pts[0]);
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
        }
    }

    fn random<R: Rng>(size: f64, rng: &mut R) -> Shape {
        let cy = rng.gen_range(0.15..0.85) * size;
        let cx = rng.gen_range(0.15..0.85) * size;
        let r = rng.gen_range(0.12..0.24) * size;
        match rng.gen_range(0..3) {
            0 => Shape::Disk { cy, cx, r },
            1 => {
                let hy = r * rng.gen_range(0.6..1.3);
                let hx = r * rng.gen_range(0.6..1.3);
                Shape::Rect {
                    y0: cy - hy,
                    x0: cx - hx,
                    y1: cy + hy,
                    x1: cx + hx,
                }
            }
            _ => {
                let rot = rng.gen_range(0.0..std::f64::consts::TAU);
                let mut pts = [(0.0, 0.0); 3];
                for (k, p) in pts.iter_mut().enumerate() {
                    let a = rot + k as f64 * std::f64::consts::TAU / 3.0;
                    let rr = 1.3 * r * rng.gen_range(0.85..1.15);
                    *p = (cy + rr * a.sin(), cx + rr * a.cos());
                }
                Shape::Triangle { pts }
            }
        }
    }
}

/// Per-object colour jitter (standard deviation per channel).
const OBJECT_COLOR_STD: f64 = 0.10;
/// Per-pixel noise (standard deviation per channel).
const PIXEL_NOISE_STD: f64 = 0.06;

/// Draws a scene: a textured background (class 0) and one to three
/// objects (disk, rectangle or triangle), each of a distinct foreground
/// class with class-specific colour statistics, plus pixel noise.
pub fn generate_scene(seed: u64, num_classes: usize, size: usize) -> Result<Scene> {
    if !(2..=255).contains(&num_classes) {
        return param_err("num_classes", format!("{num_classes} not in 2..=255"));
    }
    if size < 16 {
        return param_err("size", format!("{size} < 16"));
    }
    let mut r = rng::stream(seed, &[TAG_SCENE]);
    let sz = size as f64;
    let plane = size * size;
    let mut img = vec![0f64; 3 * plane];

    // Background: random base colour and a few low-frequency waves.
    let base: [f64; 3] = std::array::from_fn(|_| r.gen_range(0.25..0.75));
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let fy = r.gen_range(0.5..3.0) * std::f64::consts::TAU / sz;
            let fx = r.gen_range(0.5..3.0) * std::f64::consts::TAU / sz;
            let ph = r.gen_range(0.0..std::f64::consts::TAU);
            let amp = std::array::from_fn(|_| r.gen_range(-0.12..0.12));
            (fy, fx, ph, amp)
        })
        .collect();
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                let mut v = base[c];
                for (fy, fx, ph, amp) in &waves {
                    v += amp[c] * (fy * y as f64 + fx * x as f64 + ph).sin();
                }
                img[c * plane + y * size + x] = v;
            }
        }
    }

    let mut label = vec![0u8; plane];
    let mut classes: Vec<usize> = (1..num_classes).collect();
    classes.shuffle(&mut r);
    let count = r.gen_range(1..=3usize).min(classes.len());
    for &class in &classes[..count] {
        let shape = Shape::random(sz, &mut r);
        let mean = class_color(class, num_classes);
        let color: [f64; 3] = std::array::from_fn(|c| {
            mean[c] + OBJECT_COLOR_STD * r.sample::<f64, _>(StandardNormal)
        });
        for y in 0..size {
            for x in 0..size {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    label[y * size + x] = class as u8;
                    for c in 0..3 {
                        img[c * plane + y * size + x] = color[c];
                    }
                }
            }
        }
    }

    let data = img
        .into_iter()
        .map(|v| (v + PIXEL_NOISE_STD * r.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0) as f32)
        .collect();
    Scene::new(
        seed,
        Tensor::from_vec([1, 3, size, size], data)?,
        LabelMap::from_vec([1, size, size], label)?,
    )
}

/// Scene `index` of the synthetic corpus keyed by `data_seed`.
pub fn corpus_scene(
    data_seed: u64,
    index: usize,
    num_classes: usize,
    size: usize,
) -> Result<Scene> {
    let mut s = generate_scene(rng::derive(data_seed, &[index as u64]), num_classes, size)?;
    s.id = index as u64;
    Ok(s)
}

pub fn generate_corpus(
    data_seed: u64,
    count: usize,
    num_classes: usize,
    size: usize,
) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| corpus_scene(data_seed, i, num_classes, size))
        .collect()
}

/// Shuffles `scenes` with `seed`, keeps labels on the first
/// `floor(fraction * total)` and withholds them on the rest.
pub fn split_dataset(
    scenes: &[Scene],
    labelled_fraction: Fraction,
    seed: u64,
) -> Result<DatasetSplit> {
    if scenes.is_empty() {
        return param_err("scenes", "empty scene list");
    }
    if !labelled_fraction.in_unit_interval() {
        return param_err(
            "labelled_fraction",
            format!("{labelled_fraction} not in (0, 1]"),
        );
    }
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[TAG_SPLIT]));
    let m = labelled_fraction.floor_of(scenes.len());
    let labelled = order[..m].iter().map(|&i| scenes[i].clone()).collect();
    let unlabelled = order[m..].iter().map(|&i| scenes[i].withheld()).collect();
    Ok(DatasetSplit {
        labelled,
        unlabelled,
        seed,
    })
}

/// Moves `floor(fraction * total)` scenes, chosen with `seed`, into a
/// held-out set. Returns `(remaining, held_out)`, both in original order.
pub fn carve_validation(
    scenes: Vec<Scene>,
    fraction: Fraction,
    seed: u64,
) -> (Vec<Scene>, Vec<Scene>) {
    let k = fraction.floor_of(scenes.len());
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[TAG_SPLIT, 1]));
    let mut held = vec![false; scenes.len()];
    for &i in &order[..k] {
        held[i] = true;
    }
    let mut rest = Vec::new();
    let mut val = Vec::new();
    for (s, h) in scenes.into_iter().zip(held) {
        if h {
            val.push(s);
        } else {
            rest.push(s);
        }
    }
    (rest, val)
}

/// Training split plus held-out validation scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub split: DatasetSplit,
    pub val: Vec<Scene>,
}

/// Builds the dataset a config describes: the synthetic corpus, or
/// `data_dir/images` with `data_dir/labels` when `data_dir` is set. A
/// validation share is carved off first, then the rest is split into
/// labelled and unlabelled scenes, both keyed by `data_seed`.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let scenes = match &cfg.data_dir {
        Some(dir) => {
            let dir = std::path::Path::new(dir);
            load_folder_dataset(&dir.join("images"), &dir.join("labels"), cfg.num_classes)?
        }
        None => generate_corpus(cfg.data_seed, cfg.scenes, cfg.num_classes, cfg.image_size)?,
    };
    let (rest, val) = carve_validation(scenes, cfg.val_fraction, cfg.data_seed);
    Ok(PreparedData {
        split: split_dataset(&rest, cfg.labelled_fraction, cfg.data_seed)?,
        val,
    })
}

/// Stacks scene images into one `(n, c, h, w)` tensor.
pub fn stack_images(scenes: &[Scene]) -> Result<Tensor<f32>> {
    Tensor::concat_batch(&scenes.iter().map(|s| &s.image).collect::<Vec<_>>())
}

pub fn stack_labels(scenes: &[Scene]) -> Result<LabelMap> {
    LabelMap::concat_batch(&scenes.iter().map(|s| &s.label).collect::<Vec<_>>())
}
