use rand::Rng;
use rand_distr::StandardNormal;

use super::Param;
use crate::error::{param_err, shape_err, Result};
use crate::tensor::{Real, Tensor};

/// 2-D convolution with square kernels, lowered to GEMM through im2col.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

/// Activations kept from the forward pass.
#[derive(Clone, Debug)]
pub struct ConvTape<T> {
    input_shape: [usize; 4],
    out_hw: (usize, usize),
    /// Per image `(C*k*k) x (Ho*Wo)` patch matrices, or the input itself
    /// for pointwise convolutions.
    cols: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    /// He-normal initialisation for ReLU networks; biases start at zero.
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = (0..out_channels * fan_in)
            .map(|_| T::of(rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
            weight: Param::new(weight),
            bias: with_bias.then(|| Param::new(vec![T::zero(); out_channels])),
        }
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, img: &[T], h: usize, w: usize, cols: &mut [T]) {
        let (ho, wo) = self.output_hw(h, w);
        let k = self.kernel;
        let plane_out = ho * wo;
        for c in 0..self.in_channels {
            let src = &img[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * plane_out..(row + 1) * plane_out];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src_line = &src[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src_line[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, img: &mut [T]) {
        let (ho, wo) = self.output_hw(h, w);
        let k = self.kernel;
        let plane_out = ho * wo;
        for c in 0..self.in_channels {
            let dst = &mut img[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * plane_out..(row + 1) * plane_out];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = iy as usize * w;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[base + ix as usize] =
                                    dst[base + ix as usize] + src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvTape<T>)> {
        let [n, c, h, w] = x.shape();
        if c != self.in_channels {
            return shape_err("Conv2d::forward channels", self.in_channels, c);
        }
        if h + 2 * self.pad < self.kernel || w + 2 * self.pad < self.kernel {
            return param_err("input", format!("{h}x{w} smaller than kernel"));
        }
        let (ho, wo) = self.output_hw(h, w);
        let plane_out = ho * wo;
        let pl = self.patch_len();
        let cols = if self.pointwise() {
            x.data().to_vec()
        } else {
            let mut cols = vec![T::zero(); n * pl * plane_out];
            for i in 0..n {
                self.im2col(
                    x.item(i),
                    h,
                    w,
                    &mut cols[i * pl * plane_out..(i + 1) * pl * plane_out],
                );
            }
            cols
        };
        let mut y = Tensor::zeros([n, self.out_channels, ho, wo]);
        for i in 0..n {
            let col = &cols[i * pl * plane_out..(i + 1) * pl * plane_out];
            let out = y.item_mut(i);
            T::gemm(
                self.out_channels,
                pl,
                plane_out,
                T::one(),
                &self.weight.value,
                pl as isize,
                1,
                col,
                plane_out as isize,
                1,
                T::zero(),
                out,
                plane_out as isize,
                1,
            );
            if let Some(b) = &self.bias {
                for (o, &bv) in b.value.iter().enumerate() {
                    for v in &mut out[o * plane_out..(o + 1) * plane_out] {
                        *v = *v + bv;
                    }
                }
            }
        }
        Ok((
            y,
            ConvTape {
                input_shape: x.shape(),
                out_hw: (ho, wo),
                cols,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(
        &mut self,
        tape: &ConvTape<T>,
        dy: &Tensor<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let [n, _, h, w] = tape.input_shape;
        let (ho, wo) = tape.out_hw;
        let plane_out = ho * wo;
        let pl = self.patch_len();
        assert_eq!(
            dy.shape(),
            [n, self.out_channels, ho, wo],
            "Conv2d::backward dy shape"
        );
        let mut dx = need_input_grad.then(|| Tensor::zeros(tape.input_shape));
        let mut dcols = if need_input_grad && !self.pointwise() {
            vec![T::zero(); pl * plane_out]
        } else {
            Vec::new()
        };
        for i in 0..n {
            let col = &tape.cols[i * pl * plane_out..(i + 1) * pl * plane_out];
            let g = dy.item(i);
            T::gemm(
                self.out_channels,
                plane_out,
                pl,
                T::one(),
                g,
                plane_out as isize,
                1,
                col,
                1,
                plane_out as isize,
                T::one(),
                &mut self.weight.grad,
                pl as isize,
                1,
            );
            if let Some(b) = &mut self.bias {
                for (o, gb) in b.grad.iter_mut().enumerate() {
                    *gb = *gb + g[o * plane_out..(o + 1) * plane_out].iter().copied().sum();
                }
            }
            if let Some(dx) = dx.as_mut() {
                if self.pointwise() {
                    T::gemm(
                        pl,
                        self.out_channels,
                        plane_out,
                        T::one(),
                        &self.weight.value,
                        1,
                        pl as isize,
                        g,
                        plane_out as isize,
                        1,
                        T::zero(),
                        dx.item_mut(i),
                        plane_out as isize,
                        1,
                    );
                } else {
                    T::gemm(
                        pl,
                        self.out_channels,
                        plane_out,
                        T::one(),
                        &self.weight.value,
                        1,
                        pl as isize,
                        g,
                        plane_out as isize,
                        1,
                        T::zero(),
                        &mut dcols,
                        plane_out as isize,
                        1,
                    );
                    self.col2im(&dcols, h, w, dx.item_mut(i));
                }
            }
        }
        dx
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}
