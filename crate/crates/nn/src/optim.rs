use crate::param::Module;
use crate::scalar::Scalar;

/// Adaptive-moment gradient descent.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update from the gradients accumulated in `module`, then
    /// clear them.
    pub fn step<M: Module<T> + ?Sized>(&mut self, module: &mut M) {
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powf(t));
        let c2 = T::lit(1.0 - self.beta2.powf(t));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        let moments = &mut self.moments;
        let mut idx = 0;
        module.visit_params("", &mut |_, p| {
            if moments.len() <= idx {
                moments.push((vec![T::zero(); p.len()], vec![T::zero(); p.len()]));
            }
            let (m, v) = &mut moments[idx];
            assert_eq!(m.len(), p.len(), "optimizer state does not match module");
            for i in 0..p.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p.value[i] = p.value[i] - lr * mhat / (vhat.sqrt() + eps);
                p.grad[i] = T::zero();
            }
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{Module, Param};

    struct Quad {
        p: Param<f64>,
    }

    impl Module<f64> for Quad {
        fn visit_params(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f("p", &mut self.p);
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut q = Quad { p: Param::new(vec![2], vec![3.0, -2.0]) };
        let mut opt = Adam::new(0.05, 0.9, 0.999);
        for _ in 0..2000 {
            let (a, b) = (q.p.value[0], q.p.value[1]);
            q.p.grad = vec![2.0 * (a - 1.0), 2.0 * (b + 0.5)];
            opt.step(&mut q);
        }
        assert!((q.p.value[0] - 1.0).abs() < 1e-3);
        assert!((q.p.value[1] + 0.5).abs() < 1e-3);
        assert_eq!(q.p.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut q = Quad { p: Param::new(vec![1], vec![0.0]) };
        q.p.grad = vec![123.0];
        let mut opt = Adam::new(0.01, 0.5, 0.999);
        opt.step(&mut q);
        assert!((q.p.value[0] + 0.01).abs() < 1e-9);
    }
}
