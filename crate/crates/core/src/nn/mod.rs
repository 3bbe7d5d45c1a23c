//! Layers with explicit forward tapes and hand-written backward passes.

mod conv;
mod norm;

pub use conv::{Conv2d, ConvTape};
pub use norm::{BatchNorm2d, NormTape};

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// A trainable parameter vector and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Gradient of ReLU given its output.
pub fn relu_backward<T: Real>(out: &Tensor<T>, dy: &mut Tensor<T>) {
    for (g, &o) in dy.data_mut().iter_mut().zip(out.data()) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Convolution, batch normalisation and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnRelu<T> {
    pub conv: Conv2d<T>,
    pub norm: BatchNorm2d<T>,
}

#[derive(Clone, Debug)]
pub struct BlockTape<T> {
    conv: ConvTape<T>,
    norm: NormTape<T>,
    out: Tensor<T>,
}

impl<T: Real> ConvBnRelu<T> {
    pub fn new<R: Rng>(cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, kernel, stride, false, rng),
            norm: BatchNorm2d::new(cout),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, BlockTape<T>)> {
        let (z, conv) = self.conv.forward(x)?;
        let (mut y, norm) = self.norm.forward(&z, train)?;
        relu_inplace(&mut y);
        Ok((y.clone(), BlockTape { conv, norm, out: y }))
    }

    pub fn backward(
        &mut self,
        tape: &BlockTape<T>,
        mut dy: Tensor<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        relu_backward(&tape.out, &mut dy);
        let dz = self.norm.backward(&tape.norm, &dy);
        self.norm.update_running_stats(&tape.norm);
        self.conv.backward(&tape.conv, &dz, need_input_grad)
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.conv.visit_params(f);
        self.norm.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_params_mut(f);
        self.norm.visit_params_mut(f);
    }

    pub fn visit_buffers<'a>(&'a self, f: &mut dyn FnMut(&'a Vec<T>)) {
        f(&self.norm.running_mean);
        f(&self.norm.running_var);
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Vec<T>)) {
        f(&mut self.norm.running_mean);
        f(&mut self.norm.running_var);
    }
}

/// Source indices and blend weight for one output coordinate.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Half-pixel-centre linear interpolation taps (`align_corners = false`).
fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize of every channel plane to `out_h x out_w`.
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut y = Tensor::zeros([n, c, out_h, out_w]);
    let mut row = vec![T::zero(); out_w];
    for plane_idx in 0..n * c {
        let src = &x.data()[plane_idx * h * w..(plane_idx + 1) * h * w];
        let dst = &mut y.data_mut()[plane_idx * out_h * out_w..(plane_idx + 1) * out_h * out_w];
        for (oy, t) in ty.iter().enumerate() {
            let fy = T::of(t.frac);
            let (r0, r1) = (
                &src[t.lo * w..(t.lo + 1) * w],
                &src[t.hi * w..(t.hi + 1) * w],
            );
            for (ox, s) in tx.iter().enumerate() {
                let fx = T::of(s.frac);
                let top = r0[s.lo] + (r0[s.hi] - r0[s.lo]) * fx;
                let bot = r1[s.lo] + (r1[s.hi] - r1[s.lo]) * fx;
                row[ox] = top + (bot - top) * fy;
            }
            dst[oy * out_w..(oy + 1) * out_w].copy_from_slice(&row);
        }
    }
    y
}

/// Adjoint of [`bilinear_resize`].
pub fn bilinear_resize_backward<T: Real>(dy: &Tensor<T>, in_h: usize, in_w: usize) -> Tensor<T> {
    let [n, c, out_h, out_w] = dy.shape();
    if (in_h, in_w) == (out_h, out_w) {
        return dy.clone();
    }
    let ty = taps(in_h, out_h);
    let tx = taps(in_w, out_w);
    let mut dx = Tensor::zeros([n, c, in_h, in_w]);
    for plane_idx in 0..n * c {
        let g = &dy.data()[plane_idx * out_h * out_w..(plane_idx + 1) * out_h * out_w];
        let dst = &mut dx.data_mut()[plane_idx * in_h * in_w..(plane_idx + 1) * in_h * in_w];
        for (oy, t) in ty.iter().enumerate() {
            let fy = T::of(t.frac);
            for (ox, s) in tx.iter().enumerate() {
                let fx = T::of(s.frac);
                let v = g[oy * out_w + ox];
                let top = v * (T::one() - fy);
                let bot = v * fy;
                dst[t.lo * in_w + s.lo] = dst[t.lo * in_w + s.lo] + top * (T::one() - fx);
                dst[t.lo * in_w + s.hi] = dst[t.lo * in_w + s.hi] + top * fx;
                dst[t.hi * in_w + s.lo] = dst[t.hi * in_w + s.lo] + bot * (T::one() - fx);
                dst[t.hi * in_w + s.hi] = dst[t.hi * in_w + s.hi] + bot * fx;
            }
        }
    }
    dx
}

/// Channel dropout: zeroes whole `(item, channel)` planes with probability
/// `p` and rescales survivors by `1 / (1 - p)`. Returns the per-plane scale.
pub fn channel_dropout<T: Real, R: Rng>(x: &mut Tensor<T>, p: f64, rng: &mut R) -> Vec<T> {
    let [n, c, h, w] = x.shape();
    let plane = h * w;
    let keep_scale = T::of(1.0 / (1.0 - p));
    let scales: Vec<T> = (0..n * c)
        .map(|_| {
            if rng.gen::<f64>() < p {
                T::zero()
            } else {
                keep_scale
            }
        })
        .collect();
    for (k, &s) in scales.iter().enumerate() {
        for v in &mut x.data_mut()[k * plane..(k + 1) * plane] {
            *v = *v * s;
        }
    }
    scales
}

pub fn channel_dropout_backward<T: Real>(dy: &mut Tensor<T>, scales: &[T]) {
    let plane = dy.plane();
    for (k, &s) in scales.iter().enumerate() {
        for v in &mut dy.data_mut()[k * plane..(k + 1) * plane] {
            *v = *v * s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, &[]);
        let data = (0..shape.iter().product::<usize>())
            .map(|_| r.gen_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Weighted-sum probe: L = sum(y * probe).
    fn probe_loss(y: &Tensor<f64>, probe: &Tensor<f64>) -> f64 {
        y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    }

    fn central_diff(f: &mut dyn FnMut(f64) -> f64) -> f64 {
        let h = 1e-6;
        (f(h) - f(-h)) / (2.0 * h)
    }

    fn assert_close(analytic: f64, numeric: f64, what: &str) {
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(
            (analytic - numeric).abs() / denom < 1e-5,
            "{what}: analytic {analytic} vs numeric {numeric}"
        );
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for &(k, stride, bias) in &[(3, 1, false), (3, 2, true), (1, 1, true)] {
            let mut r = rng::stream(11, &[k as u64, stride as u64]);
            let mut conv = Conv2d::<f64>::new(2, 3, k, stride, bias, &mut r);
            let x = random_tensor([2, 2, 5, 6], 3);
            let (y, tape) = conv.forward(&x).unwrap();
            let probe = random_tensor(y.shape(), 4);
            let dx = conv.backward(&tape, &probe, true).unwrap();
            for idx in [0, 7, 31, x.len() - 1] {
                let num = central_diff(&mut |h| {
                    let mut xp = x.clone();
                    xp.data_mut()[idx] += h;
                    probe_loss(&conv.forward(&xp).unwrap().0, &probe)
                });
                assert_close(dx.data()[idx], num, "conv dx");
            }
            for idx in [0, 5, conv.weight.len() - 1] {
                let analytic = conv.weight.grad[idx];
                let num = central_diff(&mut |h| {
                    let mut c2 = conv.clone();
                    c2.weight.value[idx] += h;
                    probe_loss(&c2.forward(&x).unwrap().0, &probe)
                });
                assert_close(analytic, num, "conv dw");
            }
            if let Some(b) = &conv.bias {
                let analytic = b.grad[1];
                let num = central_diff(&mut |h| {
                    let mut c2 = conv.clone();
                    c2.bias.as_mut().unwrap().value[1] += h;
                    probe_loss(&c2.forward(&x).unwrap().0, &probe)
                });
                assert_close(analytic, num, "conv db");
            }
        }
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        for train in [true, false] {
            let mut bn = BatchNorm2d::<f64>::new(3);
            bn.gamma.value = vec![0.5, 1.5, -0.7];
            bn.beta.value = vec![0.1, -0.2, 0.3];
            bn.running_mean = vec![0.2, -0.1, 0.0];
            bn.running_var = vec![0.9, 1.3, 0.4];
            let x = random_tensor([2, 3, 3, 2], 9);
            let (y, tape) = bn.forward(&x, train).unwrap();
            let probe = random_tensor(y.shape(), 10);
            let dx = bn.backward(&tape, &probe);
            for idx in 0..x.len() {
                let num = central_diff(&mut |h| {
                    let mut xp = x.clone();
                    xp.data_mut()[idx] += h;
                    probe_loss(&bn.forward(&xp, train).unwrap().0, &probe)
                });
                assert_close(dx.data()[idx], num, "bn dx");
            }
            for ch in 0..3 {
                let num = central_diff(&mut |h| {
                    let mut b2 = bn.clone();
                    b2.gamma.value[ch] += h;
                    probe_loss(&b2.forward(&x, train).unwrap().0, &probe)
                });
                assert_close(bn.gamma.grad[ch], num, "bn dgamma");
            }
        }
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let x = random_tensor([1, 2, 4, 3], 1);
        let y = bilinear_resize(&x, 16, 12);
        let probe = random_tensor(y.shape(), 2);
        let dx = bilinear_resize_backward(&probe, 4, 3);
        let lhs = probe_loss(&y, &probe);
        let rhs = probe_loss(&x, &dx);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn resize_of_constant_plane_is_constant() {
        let x = Tensor::filled([1, 1, 4, 4], 0.25f64);
        let y = bilinear_resize(&x, 16, 16);
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn dropout_zeroes_whole_channels() {
        let mut x = Tensor::filled([2, 8, 3, 3], 1.0f64);
        let mut r = rng::stream(5, &[]);
        let scales = channel_dropout(&mut x, 0.5, &mut r);
        for (k, &s) in scales.iter().enumerate() {
            assert!(s == 0.0 || s == 2.0);
            assert!(x.data()[k * 9..(k + 1) * 9].iter().all(|&v| v == s));
        }
    }
}
