use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;

/// Probability clamp that keeps the logarithms finite.
pub const BCE_EPS: f64 = 1e-7;

fn check(pred: &ImageBuffer, truth: &ImageBuffer) -> Result<()> {
    if pred.dims() != truth.dims() {
        return Err(Error::DimensionMismatch { left: pred.dims(), right: truth.dims() });
    }
    Ok(())
}

/// Mean absolute difference over all elements.
pub fn l1_loss(pred: &ImageBuffer, truth: &ImageBuffer) -> Result<f64> {
    check(pred, truth)?;
    let n = pred.data().len() as f64;
    Ok(pred.data().iter().zip(truth.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

/// Mean squared difference over all elements, on the `[0, 1]` scale.
pub fn mse_loss(pred: &ImageBuffer, truth: &ImageBuffer) -> Result<f64> {
    check(pred, truth)?;
    let n = pred.data().len() as f64;
    Ok(pred.data().iter().zip(truth.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
}

/// Single binary cross-entropy term with the probability clamped to
/// `[eps, 1 - eps]`.
#[inline]
pub fn bce_term(p: f64, y: f64) -> f64 {
    let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
}

/// Derivative of [`bce_term`] with respect to `p`; zero where the clamp is active.
#[inline]
pub fn bce_term_grad(p: f64, y: f64) -> f64 {
    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
        0.0
    } else {
        -y / p + (1.0 - y) / (1.0 - p)
    }
}

/// Derivative of `bce_term(sigmoid(z), y)` with respect to the logit `z`.
#[inline]
pub fn bce_logit_grad(p: f64, y: f64) -> f64 {
    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
        0.0
    } else {
        p - y
    }
}

/// Mean binary cross-entropy over a batch of `(probability, label)` pairs.
pub fn bce_loss(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("bce_loss over an empty batch".into()));
    }
    Ok(pairs.iter().map(|&(p, y)| bce_term(p, y)).sum::<f64>() / pairs.len() as f64)
}

/// Loss weights of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub l1: f64,
    pub mse: f64,
    pub bce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 1.0, mse: 1.0, bce: 1.0 }
    }
}

impl LossWeights {
    pub fn combine(&self, l1: f64, mse: f64, adversarial: f64) -> f64 {
        self.l1 * l1 + self.mse * mse + self.bce * adversarial
    }
}

/// `w1 L1 + w_mse MSE + w_bce BCE(D(hazy, pred), 1)`.
pub fn generator_total_loss(pred: &ImageBuffer, truth: &ImageBuffer, disc_score: f64, w: &LossWeights) -> Result<f64> {
    Ok(w.combine(l1_loss(pred, truth)?, mse_loss(pred, truth)?, bce_term(disc_score, 1.0)))
}
