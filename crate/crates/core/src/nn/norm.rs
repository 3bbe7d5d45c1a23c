use super::Param;
use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

/// Per-channel batch normalisation over `(batch, height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct NormTape<T> {
    train: bool,
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_mean: Vec<T>,
    batch_var_unbiased: Vec<T>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(vec![T::one(); channels]),
            beta: Param::new(vec![T::zero(); channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Training mode normalises with batch statistics; evaluation mode with
    /// the running estimates.
    pub fn forward(&self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, NormTape<T>)> {
        let [n, c, h, w] = x.shape();
        if c != self.channels() {
            return shape_err("BatchNorm2d::forward channels", self.channels(), c);
        }
        let plane = h * w;
        let count = n * plane;
        let eps = T::of(EPS);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let mut var_unbiased = vec![T::zero(); c];
        if train {
            for ch in 0..c {
                // Two-pass statistics in f64 keep f32 training stable.
                let mut s = 0.0;
                for i in 0..n {
                    s += x.item(i)[ch * plane..(ch + 1) * plane]
                        .iter()
                        .map(|v| v.f64())
                        .sum::<f64>();
                }
                let m = s / count as f64;
                let mut ss = 0.0;
                for i in 0..n {
                    ss += x.item(i)[ch * plane..(ch + 1) * plane]
                        .iter()
                        .map(|v| {
                            let d = v.f64() - m;
                            d * d
                        })
                        .sum::<f64>();
                }
                mean[ch] = T::of(m);
                var[ch] = T::of(ss / count as f64);
                var_unbiased[ch] = T::of(ss / (count.max(2) - 1) as f64);
            }
        } else {
            mean.clone_from(&self.running_mean);
            var.clone_from(&self.running_var);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for i in 0..n {
            let src = x.item(i);
            let xh = xhat.item_mut(i);
            for ch in 0..c {
                for p in ch * plane..(ch + 1) * plane {
                    xh[p] = (src[p] - mean[ch]) * inv_std[ch];
                }
            }
            let xh = xhat.item(i);
            let dst = y.item_mut(i);
            for ch in 0..c {
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                for p in ch * plane..(ch + 1) * plane {
                    dst[p] = g * xh[p] + b;
                }
            }
        }
        Ok((
            y,
            NormTape {
                train,
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var_unbiased: var_unbiased,
            },
        ))
    }

    /// Folds the batch statistics of a training-mode forward into the
    /// running estimates.
    pub fn update_running_stats(&mut self, tape: &NormTape<T>) {
        if !tape.train {
            return;
        }
        let m = T::of(MOMENTUM);
        let keep = T::one() - m;
        for ch in 0..self.channels() {
            self.running_mean[ch] = keep * self.running_mean[ch] + m * tape.batch_mean[ch];
            self.running_var[ch] = keep * self.running_var[ch] + m * tape.batch_var_unbiased[ch];
        }
    }

    pub fn backward(&mut self, tape: &NormTape<T>, dy: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = dy.shape();
        let plane = h * w;
        let count = T::of((n * plane) as f64);
        let mut dx = Tensor::zeros(dy.shape());
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for i in 0..n {
                let g = &dy.item(i)[ch * plane..(ch + 1) * plane];
                let xh = &tape.xhat.item(i)[ch * plane..(ch + 1) * plane];
                for (&gv, &xv) in g.iter().zip(xh) {
                    sum_dy = sum_dy + gv;
                    sum_dy_xhat = sum_dy_xhat + gv * xv;
                }
            }
            self.gamma.grad[ch] = self.gamma.grad[ch] + sum_dy_xhat;
            self.beta.grad[ch] = self.beta.grad[ch] + sum_dy;
            let gamma = self.gamma.value[ch];
            let inv_std = tape.inv_std[ch];
            for i in 0..n {
                let g = &dy.item(i)[ch * plane..(ch + 1) * plane];
                let xh = &tape.xhat.item(i)[ch * plane..(ch + 1) * plane];
                let out = &mut dx.item_mut(i)[ch * plane..(ch + 1) * plane];
                if tape.train {
                    let k = gamma * inv_std / count;
                    for p in 0..plane {
                        out[p] = k * (count * g[p] - sum_dy - xh[p] * sum_dy_xhat);
                    }
                } else {
                    for p in 0..plane {
                        out[p] = gamma * inv_std * g[p];
                    }
                }
            }
        }
        dx
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}
