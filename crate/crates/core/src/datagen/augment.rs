use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Scene;
use crate::config::ExperimentConfig;
use crate::error::{param_err, shape_err, Result};
use crate::label::{LabelMap, IGNORE};
use crate::rng::{self, TAG_STRONG, TAG_WEAK};
use crate::tensor::Tensor;

/// Geometric augmentation shared by image and label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakParams {
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Output side length; `None` keeps the input size.
    pub crop_size: Option<usize>,
}

impl Default for WeakParams {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_min: 0.75,
            scale_max: 1.25,
            crop_size: None,
        }
    }
}

impl WeakParams {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            flip_prob: cfg.flip_prob,
            scale_min: cfg.scale_min,
            scale_max: cfg.scale_max,
            crop_size: Some(cfg.image_size),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return param_err("flip_prob", format!("{} outside [0, 1]", self.flip_prob));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return param_err("scale_min", "need 0 < scale_min <= scale_max");
        }
        if self.crop_size == Some(0) {
            return param_err("crop_size", "must be positive");
        }
        Ok(())
    }
}

/// The drawn geometric transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakRecord {
    pub flip: bool,
    pub scale: f64,
    pub scaled_hw: (usize, usize),
    /// Crop origin in the scaled frame; negative values mean padding.
    pub offset: (isize, isize),
    pub input_hw: (usize, usize),
    pub output_hw: (usize, usize),
}

impl WeakRecord {
    /// Source pixel whose label lands at output `(y, x)`, or `None` for
    /// padding. Nearest-neighbour on pixel centres.
    pub fn label_source(&self, y: usize, x: usize) -> Option<(usize, usize)> {
        let sy = y as isize + self.offset.0;
        let sx = x as isize + self.offset.1;
        if sy < 0 || sx < 0 || sy >= self.scaled_hw.0 as isize || sx >= self.scaled_hw.1 as isize {
            return None;
        }
        let (h, w) = self.input_hw;
        let ry = h as f64 / self.scaled_hw.0 as f64;
        let rx = w as f64 / self.scaled_hw.1 as f64;
        let iy = (((sy as f64 + 0.5) * ry) as usize).min(h - 1);
        let ix = (((sx as f64 + 0.5) * rx) as usize).min(w - 1);
        Some((iy, if self.flip { w - 1 - ix } else { ix }))
    }

    /// Continuous source coordinate (pixel-centre convention) for the
    /// image at output `(y, x)`, or `None` for padding.
    fn image_source(&self, y: usize, x: usize) -> Option<(f64, f64)> {
        let sy = y as isize + self.offset.0;
        let sx = x as isize + self.offset.1;
        if sy < 0 || sx < 0 || sy >= self.scaled_hw.0 as isize || sx >= self.scaled_hw.1 as isize {
            return None;
        }
        let (h, w) = self.input_hw;
        let fy = (sy as f64 + 0.5) * h as f64 / self.scaled_hw.0 as f64 - 0.5;
        let fx = (sx as f64 + 0.5) * w as f64 / self.scaled_hw.1 as f64 - 0.5;
        Some((fy, if self.flip { (w - 1) as f64 - fx } else { fx }))
    }
}

/// Mirrors image and label left-to-right.
pub fn hflip(scene: &Scene) -> Scene {
    let (h, w) = scene.size();
    let c = scene.image.channels();
    let mut img = scene.image.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                img.set(0, ch, y, x, scene.image.at(0, ch, y, w - 1 - x));
            }
        }
    }
    let lab: Vec<u8> = (0..h * w)
        .map(|i| scene.label.at(0, i / w, w - 1 - i % w))
        .collect();
    Scene {
        id: scene.id,
        image: img,
        label: LabelMap::from_vec([1, h, w], lab).expect("same size"),
    }
}

pub fn weak_augment(scene: &Scene, seed: u64) -> Result<Scene> {
    Ok(weak_augment_with(scene, &WeakParams::default(), seed)?.0)
}

/// Random horizontal flip, random rescale and a fixed-size crop. Labels
/// are resampled nearest-neighbour and padded with IGNORE; the image is
/// resampled bilinearly and padded with zeros.
pub fn weak_augment_with(
    scene: &Scene,
    params: &WeakParams,
    seed: u64,
) -> Result<(Scene, WeakRecord)> {
    params.validate()?;
    let (h, w) = scene.size();
    let mut r = rng::stream(seed, &[TAG_WEAK]);
    let flip = r.gen::<f64>() < params.flip_prob;
    let scale = if params.scale_min == params.scale_max {
        params.scale_min
    } else {
        r.gen_range(params.scale_min..params.scale_max)
    };
    let scaled_hw = (
        ((h as f64 * scale).round() as usize).max(1),
        ((w as f64 * scale).round() as usize).max(1),
    );
    let out = params.crop_size.unwrap_or(h.max(w));
    let pick = |r: &mut rand_chacha::ChaCha8Rng, scaled: usize| -> isize {
        let slack = scaled as isize - out as isize;
        if slack >= 0 {
            r.gen_range(0..=slack)
        } else {
            r.gen_range(slack..=0)
        }
    };
    let offset = (pick(&mut r, scaled_hw.0), pick(&mut r, scaled_hw.1));
    let record = WeakRecord {
        flip,
        scale,
        scaled_hw,
        offset,
        input_hw: (h, w),
        output_hw: (out, out),
    };
    Ok((apply_weak(scene, &record), record))
}

fn apply_weak(scene: &Scene, rec: &WeakRecord) -> Scene {
    let (h, w) = rec.input_hw;
    let (oh, ow) = rec.output_hw;
    let c = scene.image.channels();
    let identity = rec.scaled_hw == (h, w) && rec.offset == (0, 0) && (oh, ow) == (h, w);
    let mut img = Tensor::zeros([1, c, oh, ow]);
    let mut lab = vec![IGNORE; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            if let Some((iy, ix)) = rec.label_source(y, x) {
                lab[y * ow + x] = scene.label.at(0, iy, ix);
            }
            if identity {
                // Pure flip or no-op: copy exactly.
                let (iy, ix) = rec.label_source(y, x).expect("inside");
                for ch in 0..c {
                    img.set(0, ch, y, x, scene.image.at(0, ch, iy, ix));
                }
                continue;
            }
            let Some((fy, fx)) = rec.image_source(y, x) else {
                continue;
            };
            let fy = fy.clamp(0.0, (h - 1) as f64);
            let fx = fx.clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (ty, tx) = ((fy - y0 as f64) as f32, (fx - x0 as f64) as f32);
            for ch in 0..c {
                let a = scene.image.at(0, ch, y0, x0);
                let b = scene.image.at(0, ch, y0, x1);
                let d = scene.image.at(0, ch, y1, x0);
                let e = scene.image.at(0, ch, y1, x1);
                let top = a + (b - a) * tx;
                let bot = d + (e - d) * tx;
                img.set(0, ch, y, x, top + (bot - top) * ty);
            }
        }
    }
    Scene {
        id: scene.id,
        image: img,
        label: LabelMap::from_vec([1, oh, ow], lab).expect("sized"),
    }
}

/// Photometric augmentation plus cutout. No geometric change, so both
/// branches can share one strongly augmented view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrongParams {
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub cutout_prob: f64,
}

impl Default for StrongParams {
    fn default() -> Self {
        Self {
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            cutout_prob: 0.5,
        }
    }
}

impl StrongParams {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            jitter_prob: cfg.jitter_prob,
            grayscale_prob: cfg.grayscale_prob,
            blur_prob: cfg.blur_prob,
            cutout_prob: cfg.cutout_prob,
        }
    }

    pub fn disabled() -> Self {
        Self {
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            cutout_prob: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
            ("cutout_prob", self.cutout_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return param_err(name, format!("{p} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Axis-aligned box in pixel coordinates: rows `y0..y0 + h`, columns
/// `x0..x0 + w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutoutBox {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl CutoutBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y0 + self.h && x >= self.x0 && x < self.x0 + self.w
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StrongRecord {
    /// Brightness, contrast and saturation factors.
    pub jitter: Option<[f64; 3]>,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
    pub cutout: Option<CutoutBox>,
}

pub fn strong_augment(image: &Tensor<f32>, seed: u64) -> Result<Tensor<f32>> {
    Ok(strong_augment_with(image, &StrongParams::default(), seed)?.0)
}

/// Colour jitter, random grayscale, Gaussian blur and cutout, each
/// applied with its own probability. Output stays in `[0, 1]`.
pub fn strong_augment_with(
    image: &Tensor<f32>,
    params: &StrongParams,
    seed: u64,
) -> Result<(Tensor<f32>, StrongRecord)> {
    params.validate()?;
    let [n, c, h, w] = image.shape();
    if n != 1 || c != 3 {
        return shape_err("strong_augment image", "(1, 3, h, w)", image.shape());
    }
    let mut r = rng::stream(seed, &[TAG_STRONG]);
    let mut rec = StrongRecord::default();
    let mut px: Vec<[f64; 3]> = (0..h * w)
        .map(|i| std::array::from_fn(|ch| image.data()[ch * h * w + i] as f64))
        .collect();
    let gray = |p: &[f64; 3]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    let clamp = |p: &mut [f64; 3]| p.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    if r.gen::<f64>() < params.jitter_prob {
        let f: [f64; 3] = std::array::from_fn(|_| r.gen_range(0.5..1.5));
        rec.jitter = Some(f);
        for p in px.iter_mut() {
            p.iter_mut().for_each(|v| *v *= f[0]);
            clamp(p);
        }
        let mean = px.iter().map(gray).sum::<f64>() / px.len() as f64;
        for p in px.iter_mut() {
            p.iter_mut().for_each(|v| *v = (*v - mean) * f[1] + mean);
            clamp(p);
        }
        for p in px.iter_mut() {
            let g = gray(p);
            p.iter_mut().for_each(|v| *v = (*v - g) * f[2] + g);
            clamp(p);
        }
    }
    if r.gen::<f64>() < params.grayscale_prob {
        rec.grayscale = true;
        for p in px.iter_mut() {
            let g = gray(p).clamp(0.0, 1.0);
            *p = [g; 3];
        }
    }
    if r.gen::<f64>() < params.blur_prob {
        let sigma = r.gen_range(0.1..1.0);
        rec.blur_sigma = Some(sigma);
        px = gaussian_blur(&px, h, w, sigma);
    }
    if r.gen::<f64>() < params.cutout_prob {
        let area = (h * w) as f64 * r.gen_range(0.02..0.4);
        let ratio: f64 = r.gen_range(0.3..(1.0 / 0.3));
        let bh = ((area * ratio).sqrt().round() as usize).clamp(1, h);
        let bw = ((area / ratio).sqrt().round() as usize).clamp(1, w);
        let b = CutoutBox {
            y0: r.gen_range(0..=h - bh),
            x0: r.gen_range(0..=w - bw),
            h: bh,
            w: bw,
        };
        let fill: f64 = r.gen();
        for y in b.y0..b.y0 + b.h {
            for x in b.x0..b.x0 + b.w {
                px[y * w + x] = [fill; 3];
            }
        }
        rec.cutout = Some(b);
    }

    let mut out = Tensor::zeros(image.shape());
    for (i, p) in px.iter().enumerate() {
        for (ch, v) in p.iter().enumerate() {
            out.data_mut()[ch * h * w + i] = v.clamp(0.0, 1.0) as f32;
        }
    }
    if *params == StrongParams::disabled() {
        // Nothing was drawn; return the input bit-for-bit.
        return Ok((image.clone(), rec));
    }
    Ok((out, rec))
}

fn gaussian_blur(px: &[[f64; 3]], h: usize, w: usize, sigma: f64) -> Vec<[f64; 3]> {
    let radius = (2.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clampi = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = vec![[0.0; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (k, &kv) in kernel.iter().enumerate() {
                let sx = clampi(x as isize + k as isize - radius, w);
                for ch in 0..3 {
                    acc[ch] += kv * px[y * w + sx][ch];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![[0.0; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (k, &kv) in kernel.iter().enumerate() {
                let sy = clampi(y as isize + k as isize - radius, h);
                for ch in 0..3 {
                    acc[ch] += kv * tmp[sy * w + x][ch];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}
