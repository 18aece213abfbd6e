use crate::layer::{Layer, Mode};
use crate::param::{join, Buffer, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel batch normalization over (N, H, W).
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
    cache: Option<Cache<T>>,
}

#[derive(Debug, Clone)]
struct Cache<T> {
    mode: Mode,
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            gamma: Param::filled(vec![channels], T::one()),
            beta: Param::filled(vec![channels], T::zero()),
            running_mean: Buffer { value: vec![T::zero(); channels] },
            running_var: Buffer { value: vec![T::one(); channels] },
            cache: None,
        }
    }

    fn batch_stats(&self, x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
        let hw = x.h() * x.w();
        let count = T::lit((x.n() * hw) as f64);
        let mut mean = vec![T::zero(); self.channels];
        let mut var = vec![T::zero(); self.channels];
        for c in 0..self.channels {
            let mut s = T::zero();
            for n in 0..x.n() {
                s = s + x.sample(n)[c * hw..(c + 1) * hw].iter().copied().sum::<T>();
            }
            let m = s / count;
            let mut v = T::zero();
            for n in 0..x.n() {
                for &e in &x.sample(n)[c * hw..(c + 1) * hw] {
                    v = v + (e - m) * (e - m);
                }
            }
            mean[c] = m;
            var[c] = v / count;
        }
        (mean, var)
    }

    fn normalize(&self, x: &Tensor<T>, mean: &[T], inv_std: &[T]) -> (Tensor<T>, Tensor<T>) {
        let hw = x.h() * x.w();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for n in 0..x.n() {
            let src = x.sample(n);
            let (dh, dy) = (xhat.sample_mut(n), y.sample_mut(n));
            for c in 0..self.channels {
                let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                for i in c * hw..(c + 1) * hw {
                    let v = (src[i] - mean[c]) * inv_std[c];
                    dh[i] = v;
                    dy[i] = g * v + b;
                }
            }
        }
        (xhat, y)
    }

    fn running_inv_std(&self) -> Vec<T> {
        let eps = T::lit(self.eps);
        self.running_var.value.iter().map(|&v| T::one() / (v + eps).sqrt()).collect()
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Buffer<T>)) {
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        assert_eq!(x.c(), self.channels, "batchnorm: channel mismatch");
        let (mean, inv_std) = match mode {
            Mode::Train => {
                let (mean, var) = self.batch_stats(x);
                let count = (x.n() * x.h() * x.w()) as f64;
                let m = T::lit(self.momentum);
                let unbias = T::lit(if count > 1.0 { count / (count - 1.0) } else { 1.0 });
                for c in 0..self.channels {
                    let rm = &mut self.running_mean.value[c];
                    *rm = (T::one() - m) * *rm + m * mean[c];
                    let rv = &mut self.running_var.value[c];
                    *rv = (T::one() - m) * *rv + m * var[c] * unbias;
                }
                let eps = T::lit(self.eps);
                let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv)
            }
            Mode::Eval => (self.running_mean.value.clone(), self.running_inv_std()),
        };
        let (xhat, y) = self.normalize(x, &mean, &inv_std);
        self.cache = Some(Cache { mode, xhat, inv_std });
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.as_ref().expect("batchnorm backward before forward");
        let xhat = &cache.xhat;
        let hw = dy.h() * dy.w();
        let count = T::lit((dy.n() * hw) as f64);
        let mut dx = Tensor::zeros(dy.shape());
        for c in 0..self.channels {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for n in 0..dy.n() {
                let g = &dy.sample(n)[c * hw..(c + 1) * hw];
                let xh = &xhat.sample(n)[c * hw..(c + 1) * hw];
                for (&gv, &xv) in g.iter().zip(xh) {
                    sum_dy = sum_dy + gv;
                    sum_dy_xhat = sum_dy_xhat + gv * xv;
                }
            }
            self.beta.grad[c] = self.beta.grad[c] + sum_dy;
            self.gamma.grad[c] = self.gamma.grad[c] + sum_dy_xhat;
            let scale = self.gamma.value[c] * cache.inv_std[c];
            for n in 0..dy.n() {
                let g = &dy.sample(n)[c * hw..(c + 1) * hw];
                let xh = &xhat.sample(n)[c * hw..(c + 1) * hw];
                let out = &mut dx.sample_mut(n)[c * hw..(c + 1) * hw];
                match cache.mode {
                    Mode::Train => {
                        for i in 0..hw {
                            out[i] = scale * (g[i] - sum_dy / count - xh[i] * sum_dy_xhat / count);
                        }
                    }
                    Mode::Eval => {
                        for i in 0..hw {
                            out[i] = scale * g[i];
                        }
                    }
                }
            }
        }
        dx
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.normalize(x, &self.running_mean.value, &self.running_inv_std()).1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_output_is_standardized_per_channel() {
        let x = Tensor::<f64>::from_vec([2, 2, 1, 2], vec![1., 2., 10., 20., 3., 4., 30., 40.]);
        let mut bn = BatchNorm2d::new(2);
        let y = bn.forward(&x, Mode::Train);
        for c in 0..2 {
            let vals: Vec<f64> = (0..2).flat_map(|n| (0..2).map(move |i| (n, i))).map(|(n, i)| y.at(n, c, 0, i)).collect();
            let mean: f64 = vals.iter().sum::<f64>() / 4.0;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
        // running mean moved 10% towards the batch mean of channel 0 (2.5)
        assert!((bn.running_mean.value[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn eval_uses_running_statistics() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        bn.running_mean.value[0] = 1.0;
        bn.running_var.value[0] = 4.0 - 1e-5;
        let x = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 5.0]);
        let y = bn.infer(&x);
        assert!((y.data()[0]).abs() < 1e-12);
        assert!((y.data()[1] - 2.0).abs() < 1e-9);
    }
}
