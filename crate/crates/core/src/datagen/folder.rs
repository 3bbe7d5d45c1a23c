use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use super::Scene;
use crate::error::{param_err, shape_err, CcvcError, Result};
use crate::label::{LabelMap, IGNORE};
use crate::tensor::Tensor;

const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

fn files_by_stem(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !ext.is_some_and(|e| exts.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| CcvcError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an image folder and a parallel label folder, pairing files by
/// stem in sorted order. Labels are single-channel PNGs whose value is the
/// class id; 255 marks ignored pixels.
pub fn load_folder_dataset(
    images_dir: &Path,
    labels_dir: &Path,
    class_count: usize,
) -> Result<Vec<Scene>> {
    if !(2..=255).contains(&class_count) {
        return param_err("class_count", format!("{class_count} not in 2..=255"));
    }
    let images = files_by_stem(images_dir, &IMAGE_EXTS)?;
    let labels = files_by_stem(labels_dir, &["png"])?;
    let mut scenes = Vec::with_capacity(images.len());
    for (id, (stem, ipath)) in images.iter().enumerate() {
        let lpath = labels
            .get(stem)
            .ok_or_else(|| CcvcError::MissingLabel { stem: stem.clone() })?;
        let rgb = open(ipath)?.to_rgb8();
        let gray = open(lpath)?.to_luma8();
        if rgb.dimensions() != gray.dimensions() {
            return shape_err(
                "folder image/label size",
                rgb.dimensions(),
                gray.dimensions(),
            );
        }
        let (w, h) = rgb.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut data = vec![0f32; 3 * h * w];
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                data[c * h * w + y as usize * w + x as usize] = p[c] as f32 / 255.0;
            }
        }
        let mut lab = Vec::with_capacity(h * w);
        for &v in gray.as_raw() {
            if v != IGNORE && v as usize >= class_count {
                return Err(CcvcError::LabelOutOfRange {
                    path: lpath.clone(),
                    id: v,
                    class_count,
                });
            }
            lab.push(v);
        }
        scenes.push(Scene::new(
            id as u64,
            Tensor::from_vec([1, 3, h, w], data)?,
            LabelMap::from_vec([1, h, w], lab)?,
        )?);
    }
    Ok(scenes)
}

/// Writes scenes as `images_dir/NNNNN.png` and `labels_dir/NNNNN.png`.
pub fn save_folder_dataset(scenes: &[Scene], images_dir: &Path, labels_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(images_dir)?;
    std::fs::create_dir_all(labels_dir)?;
    for s in scenes {
        let (h, w) = s.size();
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb(std::array::from_fn(|c| {
                (s.image.at(0, c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8
            }))
        });
        let lab = GrayImage::from_raw(w as u32, h as u32, s.label.data().to_vec()).expect("sized");
        let name = format!("{:05}.png", s.id);
        let ip = images_dir.join(&name);
        let lp = labels_dir.join(&name);
        img.save(&ip)
            .map_err(|source| CcvcError::Image { path: ip, source })?;
        lab.save(&lp)
            .map_err(|source| CcvcError::Image { path: lp, source })?;
    }
    Ok(())
}
