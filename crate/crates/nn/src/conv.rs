use rand::Rng;

use crate::layer::{Layer, Mode};
use crate::param::{join, Module, Param};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// 2-D convolution with square kernel, computed as im2col + GEMM.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in * k * k]`
    pub weight: Param<T>,
    pub bias: Param<T>,
    cols: Vec<Vec<T>>,
    in_shape: [usize; 4],
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = (3.0 / fan_in as f64).sqrt();
        let weight = (0..out_channels * fan_in)
            .map(|_| T::lit(rng.gen_range(-bound..bound)))
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::new(vec![out_channels, fan_in], weight),
            bias: Param::filled(vec![out_channels], T::zero()),
            cols: Vec::new(),
            in_shape: [0; 4],
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        let p = self.padding;
        let s = self.stride;
        assert!(h + 2 * p >= k && w + 2 * p >= k, "conv: input smaller than kernel");
        ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1)
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, ho: usize, wo: usize) -> Vec<T> {
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.padding as isize);
        let hw = ho * wo;
        let mut col = vec![T::zero(); self.in_channels * k * k * hw];
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * hw..(row + 1) * hw];
                    for oy in 0..ho {
                        let iy = oy as isize * s - p + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = ox as isize * s - p + kx as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[T], dx: &mut [T], h: usize, w: usize, ho: usize, wo: usize) {
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.padding as isize);
        let hw = ho * wo;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * hw..(row + 1) * hw];
                    for oy in 0..ho {
                        let iy = oy as isize * s - p + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = ox as isize * s - p + kx as isize;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] = drow[ix as usize] + src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn run(&self, x: &Tensor<T>, mut keep: Option<&mut Vec<Vec<T>>>) -> Tensor<T> {
        assert_eq!(x.c(), self.in_channels, "conv: channel mismatch");
        let (h, w) = (x.h(), x.w());
        let (ho, wo) = self.output_hw(h, w);
        let hw = ho * wo;
        let kdim = self.in_channels * self.kernel * self.kernel;
        let mut out = Tensor::zeros([x.n(), self.out_channels, ho, wo]);
        for i in 0..x.n() {
            let col = self.im2col(x.sample(i), h, w, ho, wo);
            let y = out.sample_mut(i);
            for (o, chunk) in y.chunks_mut(hw).enumerate() {
                chunk.iter_mut().for_each(|v| *v = self.bias.value[o]);
            }
            gemm(false, false, self.out_channels, hw, kdim, T::one(), &self.weight.value, &col, T::one(), y);
            if let Some(store) = keep.as_deref_mut() {
                store.push(col);
            }
        }
        out
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Tensor<T> {
        let mut cols = Vec::with_capacity(x.n());
        let y = self.run(x, Some(&mut cols));
        self.cols = cols;
        self.in_shape = x.shape();
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let [n, _, h, w] = self.in_shape;
        assert_eq!(dy.n(), n, "conv backward: batch mismatch");
        let (ho, wo) = (dy.h(), dy.w());
        let hw = ho * wo;
        let kdim = self.in_channels * self.kernel * self.kernel;
        let mut dx = Tensor::zeros(self.in_shape);
        let mut dcol = vec![T::zero(); kdim * hw];
        for i in 0..n {
            let g = dy.sample(i);
            let col = &self.cols[i];
            // dW += dY * col^T
            gemm(false, true, self.out_channels, kdim, hw, T::one(), g, col, T::one(), &mut self.weight.grad);
            for (o, chunk) in g.chunks(hw).enumerate() {
                self.bias.grad[o] = self.bias.grad[o] + chunk.iter().copied().sum::<T>();
            }
            // dcol = W^T * dY
            gemm(true, false, kdim, hw, self.out_channels, T::one(), &self.weight.value, g, T::zero(), &mut dcol);
            self.col2im(&dcol, dx.sample_mut(i), h, w, ho, wo);
        }
        dx
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x, None)
    }
}
