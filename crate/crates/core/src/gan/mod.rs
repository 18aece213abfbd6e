//! Conditional GAN dehazer: networks, objective and training loop.

pub mod loss;
pub mod net;
pub mod train;

pub use loss::{bce_loss, generator_total_loss, l1_loss, mse_loss, LossWeights, BCE_EPS};
pub use net::{
    discriminator_forward, generator_forward, DiscriminatorArch, DiscriminatorNet, GeneratorArch, GeneratorNet,
};
pub use train::{
    discriminator_objective, generator_objective, loss_csv, train, DehazeModel, GenLoss, LossRecord, TrainConfig,
    LOSS_CSV_HEADER,
};

use crate::error::Result;
use crate::imaging::ImageBuffer;

/// Anything that maps a hazy frame to a restored one.
pub trait Dehazer {
    fn dehaze_image(&self, hazy: &ImageBuffer) -> Result<ImageBuffer>;
}

impl Dehazer for DehazeModel {
    fn dehaze_image(&self, hazy: &ImageBuffer) -> Result<ImageBuffer> {
        self.dehaze(hazy)
    }
}

/// Pass-through baseline.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityDehazer;

impl Dehazer for IdentityDehazer {
    fn dehaze_image(&self, hazy: &ImageBuffer) -> Result<ImageBuffer> {
        Ok(hazy.clone())
    }
}
