use rand::Rng;
use serde::{Deserialize, Serialize};
use usv_nn::{join, Buffer, Conv2d, ConvBnAct, Layer, Mode, Module, Param, Scalar, Tensor};

use super::assign::GridSpec;
use crate::error::{Error, Result};

/// Layer widths of the single-scale detection backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorArch {
    /// Full-resolution stem width.
    pub stem: usize,
    /// One stride-2 stage per entry; total stride is `2^len`.
    pub stages: Vec<usize>,
    pub neck: usize,
}

impl Default for DetectorArch {
    fn default() -> Self {
        Self { stem: 16, stages: vec![16, 32, 64], neck: 64 }
    }
}

impl DetectorArch {
    pub fn stride(&self) -> usize {
        1 << self.stages.len()
    }
}

/// Maps `[n, 3, H, W]` to raw head output `[n, M * (5 + C), k, k]`.
#[derive(Debug, Clone)]
pub struct DetectorNet<T> {
    pub arch: DetectorArch,
    pub grid: GridSpec,
    stem: ConvBnAct<T>,
    stages: Vec<ConvBnAct<T>>,
    neck: ConvBnAct<T>,
    head: Conv2d<T>,
}

/// Initial objectness logit: most slots are empty.
const CONF_PRIOR_LOGIT: f64 = -4.0;

impl<T: Scalar> DetectorNet<T> {
    pub fn new(arch: DetectorArch, grid: GridSpec, rng: &mut impl Rng) -> Result<Self> {
        grid.validate()?;
        if arch.stages.is_empty() || arch.stem == 0 || arch.neck == 0 || arch.stages.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid detector arch {arch:?}")));
        }
        let stem = ConvBnAct::new(3, arch.stem, 1, true, 0.1, rng);
        let mut stages = Vec::new();
        let mut cin = arch.stem;
        for &c in &arch.stages {
            stages.push(ConvBnAct::new(cin, c, 2, true, 0.1, rng));
            cin = c;
        }
        let neck = ConvBnAct::new(cin, arch.neck, 1, true, 0.1, rng);
        let mut head = Conv2d::new(arch.neck, grid.m() * grid.per_anchor(), 1, 1, 0, rng);
        for j in 0..grid.m() {
            head.bias.value[j * grid.per_anchor() + 4] = T::lit(CONF_PRIOR_LOGIT);
        }
        Ok(Self { arch, grid, stem, stages, neck, head })
    }

    /// Input side length that yields the configured grid.
    pub fn input_size(&self) -> usize {
        self.grid.k * self.arch.stride()
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.input_size();
        if x.c() != 3 || x.h() != s || x.w() != s {
            return Err(Error::InvalidArgument(format!(
                "detector expects [n, 3, {s}, {s}] input, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let mut y = self.stem.forward(x, mode);
        for s in &mut self.stages {
            y = s.forward(&y, mode);
        }
        y = self.neck.forward(&y, mode);
        self.head.forward(&y, mode)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) {
        let mut g = self.head.backward(dy);
        g = self.neck.backward(&g);
        for s in self.stages.iter_mut().rev() {
            g = s.backward(&g);
        }
        self.stem.backward(&g);
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = self.stem.infer(x);
        for s in &self.stages {
            y = s.infer(&y);
        }
        y = self.neck.infer(&y);
        self.head.infer(&y)
    }
}

impl<T: Scalar> Module<T> for DetectorNet<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem.visit_params(&join(prefix, "stem"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_params(&join(prefix, &format!("stage{i}")), f);
        }
        self.neck.visit_params(&join(prefix, "neck"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Buffer<T>)) {
        self.stem.visit_buffers(&join(prefix, "stem"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_buffers(&join(prefix, &format!("stage{i}")), f);
        }
        self.neck.visit_buffers(&join(prefix, "neck"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_shape_matches_grid() {
        let grid = GridSpec::new(8, vec![(0.1, 0.05), (0.3, 0.15)], 6, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = DetectorNet::<f32>::new(DetectorArch::default(), grid, &mut rng).unwrap();
        assert_eq!(net.input_size(), 64);
        let x = Tensor::zeros([2, 3, 64, 64]);
        let y = net.forward(&x, Mode::Train);
        assert_eq!(y.shape(), [2, 2 * 11, 8, 8]);
        assert_eq!(net.infer(&x).shape(), [2, 22, 8, 8]);
        assert!(net.check_input(&Tensor::zeros([1, 3, 32, 32])).is_err());
    }
}
