//! Parameter-free layers and the fully connected layer.

use rand::Rng;

use crate::layer::{Layer, Mode};
use crate::param::{join, Module, Param};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Leaky rectifier; `slope = 0` gives a plain ReLU.
#[derive(Debug, Clone)]
pub struct LeakyRelu<T> {
    pub slope: f64,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> LeakyRelu<T> {
    pub fn new(slope: f64) -> Self {
        Self { slope, input: None }
    }

    pub fn relu() -> Self {
        Self::new(0.0)
    }
}

impl<T: Scalar> Module<T> for LeakyRelu<T> {
    fn visit_params(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}
}

impl<T: Scalar> Layer<T> for LeakyRelu<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Tensor<T> {
        self.input = Some(x.clone());
        self.infer(x)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.as_ref().expect("activation backward before forward");
        let s = T::lit(self.slope);
        let data = dy
            .data()
            .iter()
            .zip(x.data())
            .map(|(&g, &v)| if v > T::zero() { g } else { g * s })
            .collect();
        Tensor::from_vec(dy.shape(), data)
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let s = T::lit(self.slope);
        x.map(|v| if v > T::zero() { v } else { v * s })
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sigmoid<T> {
    output: Option<Tensor<T>>,
}

impl<T: Scalar> Sigmoid<T> {
    pub fn new() -> Self {
        Self { output: None }
    }
}

impl<T: Scalar> Module<T> for Sigmoid<T> {
    fn visit_params(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}
}

impl<T: Scalar> Layer<T> for Sigmoid<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Tensor<T> {
        let y = self.infer(x);
        self.output = Some(y.clone());
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let y = self.output.as_ref().expect("sigmoid backward before forward");
        let data = dy
            .data()
            .iter()
            .zip(y.data())
            .map(|(&g, &s)| g * s * (T::one() - s))
            .collect();
        Tensor::from_vec(dy.shape(), data)
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        x.map(sigmoid)
    }
}

/// Nearest-neighbour 2x spatial upsampling.
#[derive(Debug, Clone, Default)]
pub struct Upsample2x;

impl<T: Scalar> Module<T> for Upsample2x {
    fn visit_params(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}
}

impl<T: Scalar> Layer<T> for Upsample2x {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Tensor<T> {
        self.infer(x)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (h, w) = (dy.h() / 2, dy.w() / 2);
        let mut dx = Tensor::zeros([dy.n(), dy.c(), h, w]);
        let (wo, planes) = (dy.w(), dy.n() * dy.c());
        let src = dy.data();
        let dst = dx.data_mut();
        for p in 0..planes {
            for y in 0..h {
                for x in 0..w {
                    let base = p * 4 * h * w + 2 * y * wo + 2 * x;
                    dst[(p * h + y) * w + x] = src[base] + src[base + 1] + src[base + wo] + src[base + wo + 1];
                }
            }
        }
        dx
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let (h, w) = (x.h(), x.w());
        let mut out = Tensor::zeros([x.n(), x.c(), 2 * h, 2 * w]);
        let planes = x.n() * x.c();
        let src = x.data();
        let dst = out.data_mut();
        for p in 0..planes {
            for y in 0..2 * h {
                for xo in 0..2 * w {
                    dst[(p * 2 * h + y) * 2 * w + xo] = src[(p * h + y / 2) * w + xo / 2];
                }
            }
        }
        out
    }
}

/// Fully connected layer over the flattened per-sample features.
///
/// Output shape is `[n, out, 1, 1]`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / in_features as f64).sqrt();
        let weight = (0..in_features * out_features)
            .map(|_| T::lit(rng.gen_range(-bound..bound)))
            .collect();
        Self {
            in_features,
            out_features,
            weight: Param::new(vec![out_features, in_features], weight),
            bias: Param::filled(vec![out_features], T::zero()),
            input: None,
        }
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl<T: Scalar> Layer<T> for Linear<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Tensor<T> {
        self.input = Some(x.clone());
        self.infer(x)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.as_ref().expect("linear backward before forward");
        let n = x.n();
        let (fi, fo) = (self.in_features, self.out_features);
        // dW += dY^T X ; db += sum dY ; dX = dY W
        gemm(true, false, fo, fi, n, T::one(), dy.data(), x.data(), T::one(), &mut self.weight.grad);
        for row in dy.data().chunks(fo) {
            for (b, &g) in self.bias.grad.iter_mut().zip(row) {
                *b = *b + g;
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        gemm(false, false, n, fi, fo, T::one(), dy.data(), &self.weight.value, T::zero(), dx.data_mut());
        dx
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.sample_len(), self.in_features, "linear: feature mismatch");
        let n = x.n();
        let mut y = Tensor::zeros([n, self.out_features, 1, 1]);
        for row in y.data_mut().chunks_mut(self.out_features) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(
            false,
            true,
            n,
            self.out_features,
            self.in_features,
            T::one(),
            x.data(),
            &self.weight.value,
            T::one(),
            y.data_mut(),
        );
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_backward_sums_blocks() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![1., 2., 3., 4.]);
        let mut up = Upsample2x;
        let y = Layer::<f64>::forward(&mut up, &x, Mode::Train);
        assert_eq!(y.shape(), [1, 1, 4, 4]);
        assert_eq!(y.at(0, 0, 1, 1), 1.0);
        assert_eq!(y.at(0, 0, 3, 2), 4.0);
        let g = Layer::<f64>::backward(&mut up, &Tensor::from_vec([1, 1, 4, 4], vec![1.0; 16]));
        assert_eq!(g.data(), &[4., 4., 4., 4.]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert!((sigmoid(0.0f32) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn leaky_relu_scales_negatives() {
        let act = LeakyRelu::<f64>::new(0.2);
        let y = act.infer(&Tensor::from_vec([1, 1, 1, 2], vec![-1.0, 2.0]));
        assert_eq!(y.data(), &[-0.2, 2.0]);
    }
}
