use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use usv_nn::{export_state, import_state, sigmoid, Adam, Mode, Module, Scalar, Tensor};

use super::loss::{bce_logit_grad, bce_term, LossWeights};
use super::net::{discriminator_forward, generator_forward, DiscriminatorArch, DiscriminatorNet, GeneratorArch, GeneratorNet};
use crate::checkpoint::{prefixed, CheckpointKind, RawCheckpoint};
use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub generator: GeneratorArch,
    pub discriminator: DiscriminatorArch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            lr_generator: 2e-4,
            lr_discriminator: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
            weights: LossWeights::default(),
            generator: GeneratorArch::default(),
            discriminator: DiscriminatorArch::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr_generator > 0.0 && self.lr_discriminator > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        let w = self.weights;
        if [w.l1, w.mse, w.bce].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub gen_loss: f64,
    pub disc_loss: f64,
}

pub const LOSS_CSV_HEADER: &str = "epoch,gen_loss,disc_loss";

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for r in records {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.gen_loss, r.disc_loss));
    }
    s
}

/// Components of the batch generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GenLoss {
    pub l1: f64,
    pub mse: f64,
    pub adversarial: f64,
    pub total: f64,
}

fn to_f64<T: Scalar>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Mean BCE of one discriminator pass against `label`; backpropagates
/// `scale * dLoss/dlogit` through `d` (parameter gradients accumulate).
fn disc_pass<T: Scalar>(d: &mut DiscriminatorNet<T>, pair: &Tensor<T>, label: f64, scale: f64) -> (f64, Tensor<T>) {
    let logits = d.forward(pair, Mode::Train);
    let n = logits.n();
    let mut sum = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for (g, &z) in grad.data_mut().iter_mut().zip(logits.data()) {
        let p = sigmoid(to_f64(z));
        sum += bce_term(p, label);
        *g = T::lit(scale * bce_logit_grad(p, label));
    }
    let dpair = d.backward(&grad);
    (sum / n as f64, dpair)
}

/// Discriminator objective: mean BCE over the `n` real pairs (label 1) and
/// `n` generated pairs (label 0). Accumulates gradients into `d`.
pub fn discriminator_objective<T: Scalar>(
    d: &mut DiscriminatorNet<T>,
    hazy: &Tensor<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
) -> f64 {
    let n = hazy.n() as f64;
    let (lr, _) = disc_pass(d, &Tensor::concat_channels(hazy, real), 1.0, 1.0 / (2.0 * n));
    let (lf, _) = disc_pass(d, &Tensor::concat_channels(hazy, fake), 0.0, 1.0 / (2.0 * n));
    0.5 * (lr + lf)
}

/// Batch generator objective `w1 L1 + w_mse MSE + w_bce BCE(D(hazy, fake), 1)`
/// and its gradient with respect to `fake`. Gradients also accumulate into
/// `d`; callers that do not update `d` should clear them.
pub fn generator_objective<T: Scalar>(
    d: &mut DiscriminatorNet<T>,
    hazy: &Tensor<T>,
    fake: &Tensor<T>,
    clear: &Tensor<T>,
    w: &LossWeights,
) -> (GenLoss, Tensor<T>) {
    let n = fake.len() as f64;
    let mut l1 = 0.0;
    let mut mse = 0.0;
    let mut grad = Tensor::zeros(fake.shape());
    for ((g, &f), &y) in grad.data_mut().iter_mut().zip(fake.data()).zip(clear.data()) {
        let diff = to_f64(f) - to_f64(y);
        l1 += diff.abs();
        mse += diff * diff;
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        *g = T::lit((w.l1 * sign + w.mse * 2.0 * diff) / n);
    }
    let batch = hazy.n() as f64;
    let (adversarial, dpair) = disc_pass(d, &Tensor::concat_channels(hazy, fake), 1.0, w.bce / batch);
    let (_, dfake) = dpair.split_channels(3);
    grad.add_assign(&dfake);
    let (l1, mse) = (l1 / n, mse / n);
    (GenLoss { l1, mse, adversarial, total: w.combine(l1, mse, adversarial) }, grad)
}

/// Trained generator/discriminator pair with its provenance.
#[derive(Debug, Clone)]
pub struct DehazeModel {
    pub generator: GeneratorNet<f32>,
    pub discriminator: DiscriminatorNet<f32>,
    pub config: TrainConfig,
    pub losses: Vec<LossRecord>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    losses: Vec<LossRecord>,
}

impl DehazeModel {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = GeneratorNet::new(config.generator.clone(), &mut rng)?;
        let discriminator = DiscriminatorNet::new(config.discriminator.clone(), &mut rng)?.at_chance();
        Ok(Self { generator, discriminator, config, losses: Vec::new() })
    }

    pub fn generator_params(&mut self) -> usize {
        self.generator.param_count()
    }

    pub fn dehaze(&self, hazy: &ImageBuffer) -> Result<ImageBuffer> {
        generator_forward(&self.generator, hazy)
    }

    /// Discriminator probability that `candidate` is the real clear frame for `hazy`.
    pub fn realness(&self, hazy: &ImageBuffer, candidate: &ImageBuffer) -> Result<f64> {
        discriminator_forward(&self.discriminator, hazy, candidate)
    }

    pub fn to_checkpoint(&mut self) -> Result<RawCheckpoint<f32>> {
        let meta = serde_json::to_string(&Meta { config: self.config.clone(), losses: self.losses.clone() })?;
        let mut arrays = prefixed("generator", export_state(&mut self.generator));
        arrays.extend(prefixed("discriminator", export_state(&mut self.discriminator)));
        Ok(RawCheckpoint { kind: CheckpointKind::Dehaze, meta, arrays })
    }

    pub fn from_checkpoint(ckpt: &RawCheckpoint<f32>) -> Result<Self> {
        if ckpt.kind != CheckpointKind::Dehaze {
            return Err(Error::Checkpoint("not a dehazing checkpoint".into()));
        }
        let meta: Meta = serde_json::from_str(&ckpt.meta)?;
        let mut model = Self::new(meta.config)?;
        model.losses = meta.losses;
        import_state(&mut model.generator, &ckpt.section("generator")).map_err(|e| Error::Checkpoint(e.to_string()))?;
        import_state(&mut model.discriminator, &ckpt.section("discriminator"))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(model)
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&RawCheckpoint::load(path)?)
    }
}

fn check_pairs(pairs: &[(ImageBuffer, ImageBuffer)], cfg: &TrainConfig) -> Result<()> {
    if pairs.len() < 2 {
        return Err(Error::Dataset(format!("GAN training needs at least 2 pairs, got {}", pairs.len())));
    }
    let dims = pairs[0].0.dims();
    for (i, (h, c)) in pairs.iter().enumerate() {
        if h.dims() != dims || c.dims() != dims {
            return Err(Error::Dataset(format!("pair {i}: dimensions differ from {dims:?}")));
        }
    }
    let m = cfg.generator.multiple();
    if !dims.0.is_multiple_of(m) || !dims.1.is_multiple_of(m) {
        return Err(Error::Dataset(format!("image size {dims:?} must be divisible by {m}")));
    }
    let s = cfg.discriminator.input_size;
    if dims != (s, s) {
        return Err(Error::Dataset(format!("discriminator is sized for {s}x{s}, dataset is {dims:?}")));
    }
    Ok(())
}

/// Alternating conditional-GAN training on `(hazy, clear)` pairs.
pub fn train(pairs: &[(ImageBuffer, ImageBuffer)], cfg: &TrainConfig) -> Result<DehazeModel> {
    cfg.validate()?;
    check_pairs(pairs, cfg)?;
    let mut model = DehazeModel::new(cfg.clone())?;
    let hazy: Vec<Tensor<f32>> = pairs.iter().map(|(h, _)| h.to_tensor()).collect();
    let clear: Vec<Tensor<f32>> = pairs.iter().map(|(_, c)| c.to_tensor()).collect();
    let mut opt_g = Adam::new(cfg.lr_generator, cfg.beta1, cfg.beta2);
    let mut opt_d = Adam::new(cfg.lr_discriminator, cfg.beta1, cfg.beta2);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e_ed0f_da7a);
    let (g, d) = (&mut model.generator, &mut model.discriminator);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let (mut gen_sum, mut disc_sum) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let x = Tensor::stack(&batch.iter().map(|&i| hazy[i].clone()).collect::<Vec<_>>());
            let y = Tensor::stack(&batch.iter().map(|&i| clear[i].clone()).collect::<Vec<_>>());
            let fake = g.forward(&x, Mode::Train);

            let dl = discriminator_objective(d, &x, &y, &fake);
            opt_d.step(d);

            let (gl, dfake) = generator_objective(d, &x, &fake, &y, &cfg.weights);
            d.zero_grad();
            g.backward(&dfake);
            opt_g.step(g);

            gen_sum += gl.total * batch.len() as f64;
            disc_sum += dl * batch.len() as f64;
        }
        let n = pairs.len() as f64;
        let rec = LossRecord { epoch, gen_loss: gen_sum / n, disc_loss: disc_sum / n };
        if !(rec.gen_loss.is_finite() && rec.disc_loss.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite loss at epoch {epoch}")));
        }
        log::info!("dehaze epoch {epoch}: gen {:.5} disc {:.5}", rec.gen_loss, rec.disc_loss);
        model.losses.push(rec);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            generator: GeneratorArch { base: 4, depth: 2, res_blocks: 1 },
            discriminator: DiscriminatorArch { base: 4, depth: 2, input_size: 8 },
            ..TrainConfig::default()
        }
    }

    fn pairs(n: usize) -> Vec<(ImageBuffer, ImageBuffer)> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..n)
            .map(|_| {
                let c = ImageBuffer::from_fn(8, 8, |_, _| [rng.gen(), rng.gen(), rng.gen()]).unwrap();
                let h = ImageBuffer::from_fn(8, 8, |y, x| {
                    let p = c.pixel(y, x);
                    [0.5 * p[0] + 0.45, 0.5 * p[1] + 0.45, 0.5 * p[2] + 0.45]
                })
                .unwrap();
                (h, c)
            })
            .collect()
    }

    #[test]
    fn one_epoch_bookkeeping_and_checkpoint_round_trip() {
        let mut m = train(&pairs(4), &tiny_config(1)).unwrap();
        assert_eq!(m.losses.len(), 1);
        assert_eq!(m.losses[0].epoch, 1);
        let bytes = m.to_checkpoint().unwrap().to_bytes().unwrap();
        let mut back = DehazeModel::from_checkpoint(&RawCheckpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.to_checkpoint().unwrap().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn training_is_deterministic() {
        let data = pairs(5);
        let mut a = train(&data, &tiny_config(2)).unwrap();
        let mut b = train(&data, &tiny_config(2)).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.to_checkpoint().unwrap().to_bytes().unwrap(), b.to_checkpoint().unwrap().to_bytes().unwrap());
    }

    #[test]
    fn rejects_bad_datasets() {
        assert!(train(&pairs(1), &tiny_config(1)).is_err());
        let mut data = pairs(3);
        data[1].0 = ImageBuffer::filled(16, 16, [0.5; 3]).unwrap();
        assert!(train(&data, &tiny_config(1)).is_err());
        let mut cfg = tiny_config(1);
        cfg.epochs = 0;
        assert!(train(&pairs(3), &cfg).is_err());
    }
}
