use rand::Rng;

use crate::conv::Conv2d;
use crate::layer::{Layer, Mode};
use crate::norm::BatchNorm2d;
use crate::param::{join, Buffer, Module, Param};
use crate::scalar::Scalar;
use crate::simple::LeakyRelu;
use crate::tensor::Tensor;

/// 3x3 convolution, optional batch normalization, leaky rectifier.
#[derive(Debug, Clone)]
pub struct ConvBnAct<T> {
    pub conv: Conv2d<T>,
    pub norm: Option<BatchNorm2d<T>>,
    pub act: LeakyRelu<T>,
}

impl<T: Scalar> ConvBnAct<T> {
    pub fn new(cin: usize, cout: usize, stride: usize, norm: bool, slope: f64, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, 3, stride, 1, rng),
            norm: norm.then(|| BatchNorm2d::new(cout)),
            act: LeakyRelu::new(slope),
        }
    }
}

impl<T: Scalar> Module<T> for ConvBnAct<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        if let Some(n) = &mut self.norm {
            n.visit_params(&join(prefix, "bn"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Buffer<T>)) {
        if let Some(n) = &mut self.norm {
            n.visit_buffers(&join(prefix, "bn"), f);
        }
    }
}

impl<T: Scalar> Layer<T> for ConvBnAct<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let mut y = self.conv.forward(x, mode);
        if let Some(n) = &mut self.norm {
            y = n.forward(&y, mode);
        }
        self.act.forward(&y, mode)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut g = self.act.backward(dy);
        if let Some(n) = &mut self.norm {
            g = n.backward(&g);
        }
        self.conv.backward(&g)
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = self.conv.infer(x);
        if let Some(n) = &self.norm {
            y = n.infer(&y);
        }
        self.act.infer(&y)
    }
}
