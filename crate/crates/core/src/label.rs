use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

/// Label value excluded from every loss and metric.
pub const IGNORE: u8 = 255;

/// Per-pixel class ids in `(batch, height, width)` order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    shape: [usize; 3],
    data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(shape: [usize; 3], id: u8) -> Self {
        Self {
            shape,
            data: vec![id; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 3], data: Vec<u8>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return shape_err("LabelMap::from_vec", expected, data.len());
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[1]
    }

    pub fn width(&self) -> usize {
        self.shape[2]
    }

    pub fn plane(&self) -> usize {
        self.shape[1] * self.shape[2]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn item(&self, n: usize) -> &[u8] {
        let p = self.plane();
        &self.data[n * p..(n + 1) * p]
    }

    pub fn at(&self, n: usize, y: usize, x: usize) -> u8 {
        self.data[(n * self.shape[1] + y) * self.shape[2] + x]
    }

    pub fn slice_batch(&self, start: usize, end: usize) -> LabelMap {
        let p = self.plane();
        LabelMap {
            shape: [end - start, self.shape[1], self.shape[2]],
            data: self.data[start * p..end * p].to_vec(),
        }
    }

    pub fn concat_batch(parts: &[&LabelMap]) -> Result<LabelMap> {
        let Some(first) = parts.first() else {
            return shape_err("LabelMap::concat_batch", "at least one part", 0);
        };
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return shape_err("LabelMap::concat_batch", first.shape, p.shape);
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(LabelMap {
            shape: [n, first.shape[1], first.shape[2]],
            data,
        })
    }

    /// Sorted distinct ids present in the map.
    pub fn id_set(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=255u8).filter(|&v| seen[v as usize]).collect()
    }
}

/// Per-pixel argmax over channels with the max value; ties resolve to the
/// smaller class id.
pub fn argmax_channels<T: Real>(scores: &Tensor<T>) -> (LabelMap, Tensor<T>) {
    let [n, c, h, w] = scores.shape();
    let plane = h * w;
    let mut ids = Vec::with_capacity(n * plane);
    let mut best = Tensor::zeros([n, 1, h, w]);
    for i in 0..n {
        let s = scores.item(i);
        let b = best.item_mut(i);
        for p in 0..plane {
            let mut arg = 0usize;
            let mut max = s[p];
            for k in 1..c {
                let v = s[k * plane + p];
                if v > max {
                    max = v;
                    arg = k;
                }
            }
            ids.push(arg as u8);
            b[p] = max;
        }
    }
    (
        LabelMap {
            shape: [n, h, w],
            data: ids,
        },
        best,
    )
}
