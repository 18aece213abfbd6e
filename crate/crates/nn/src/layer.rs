use crate::param::Module;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Training uses batch statistics in normalization layers; evaluation uses
/// running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A differentiable layer.
///
/// `forward` caches whatever `backward` needs; `backward` accumulates
/// parameter gradients and returns the gradient with respect to the input.
/// `infer` is a cache-free evaluation-mode pass usable through `&self`.
pub trait Layer<T: Scalar>: Module<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T>;
    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T>;
    fn infer(&self, x: &Tensor<T>) -> Tensor<T>;
}
