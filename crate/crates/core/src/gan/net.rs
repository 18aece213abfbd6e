//! Encoder-decoder generator and pairwise discriminator.

use rand::Rng;
use serde::{Deserialize, Serialize};
use usv_nn::{
    join, sigmoid, BatchNorm2d, Buffer, Conv2d, ConvBnAct, Layer, Linear, Mode, Module, Param, Scalar,
    Sigmoid, Tensor, Upsample2x,
};

use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;

const LEAK: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorArch {
    /// Width of the first encoder stage; each further stage doubles it.
    pub base: usize,
    /// Number of stride-2 encoder stages (E).
    pub depth: usize,
    pub res_blocks: usize,
}

impl Default for GeneratorArch {
    fn default() -> Self {
        Self { base: 16, depth: 3, res_blocks: 1 }
    }
}

impl GeneratorArch {
    pub fn multiple(&self) -> usize {
        1 << self.depth
    }

    fn width(&self, stage: usize) -> usize {
        self.base << stage
    }

    fn validate(&self) -> Result<()> {
        if self.base == 0 || self.depth == 0 || self.depth > 6 {
            return Err(Error::InvalidArgument(format!("invalid generator arch {self:?}")));
        }
        Ok(())
    }
}

/// `x + BN(conv(relu(BN(conv(x)))))`
#[derive(Debug, Clone)]
struct ResBlock<T> {
    first: ConvBnAct<T>,
    conv: Conv2d<T>,
    norm: BatchNorm2d<T>,
}

impl<T: Scalar> ResBlock<T> {
    fn new(c: usize, rng: &mut impl Rng) -> Self {
        Self {
            first: ConvBnAct::new(c, c, 1, true, 0.0, rng),
            conv: Conv2d::new(c, c, 3, 1, 1, rng),
            norm: BatchNorm2d::new(c),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let y = self.first.forward(x, mode);
        let y = self.conv.forward(&y, mode);
        self.norm.forward(&y, mode).add(x)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let g = self.norm.backward(dy);
        let g = self.conv.backward(&g);
        self.first.backward(&g).add(dy)
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.first.infer(x);
        self.norm.infer(&self.conv.infer(&y)).add(x)
    }
}

impl<T: Scalar> Module<T> for ResBlock<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.first.visit_params(&join(prefix, "a"), f);
        self.conv.visit_params(&join(prefix, "b.conv"), f);
        self.norm.visit_params(&join(prefix, "b.bn"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Buffer<T>)) {
        self.first.visit_buffers(&join(prefix, "a"), f);
        self.norm.visit_buffers(&join(prefix, "b.bn"), f);
    }
}

/// U-Net style generator. Encoder stage `i` halves the resolution and has
/// `base * 2^i` channels; decoder stages upsample, concatenate the mirrored
/// encoder input and convolve back down. The last stage concatenates the raw
/// input and ends in a sigmoid.
#[derive(Debug, Clone)]
pub struct GeneratorNet<T> {
    pub arch: GeneratorArch,
    enc: Vec<ConvBnAct<T>>,
    res: Vec<ResBlock<T>>,
    dec: Vec<ConvBnAct<T>>,
    out: Conv2d<T>,
    out_act: Sigmoid<T>,
    up: Upsample2x,
    skip_channels: Vec<usize>,
}

impl<T: Scalar> GeneratorNet<T> {
    pub fn new(arch: GeneratorArch, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let e = arch.depth;
        let mut enc = Vec::new();
        let mut cin = 3;
        for i in 0..e {
            enc.push(ConvBnAct::new(cin, arch.width(i), 2, true, LEAK, rng));
            cin = arch.width(i);
        }
        let res = (0..arch.res_blocks).map(|_| ResBlock::new(cin, rng)).collect();
        // skip feeding decoder level l (resolution H / 2^l): input for l = 0,
        // encoder stage l - 1 output otherwise
        let skip_channels: Vec<usize> = (0..e).map(|l| if l == 0 { 3 } else { arch.width(l - 1) }).collect();
        let mut dec = Vec::new();
        for l in (1..e).rev() {
            let cout = arch.width(l - 1);
            dec.push(ConvBnAct::new(cin + skip_channels[l], cout, 1, true, 0.0, rng));
            cin = cout;
        }
        let out = Conv2d::new(cin + 3, 3, 3, 1, 1, rng);
        Ok(Self { arch, enc, res, dec, out, out_act: Sigmoid::new(), up: Upsample2x, skip_channels })
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let m = self.arch.multiple();
        if x.c() != 3 || !x.h().is_multiple_of(m) || !x.w().is_multiple_of(m) || x.h() == 0 || x.w() == 0 {
            return Err(Error::InvalidArgument(format!(
                "generator input {}x{} must have 3 channels and sides divisible by {m}",
                x.h(),
                x.w()
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let mut skips = vec![x.clone()];
        let mut y = x.clone();
        for (i, s) in self.enc.iter_mut().enumerate() {
            y = s.forward(&y, mode);
            if i + 1 < self.arch.depth {
                skips.push(y.clone());
            }
        }
        for r in &mut self.res {
            y = r.forward(&y, mode);
        }
        for (d, l) in self.dec.iter_mut().zip((1..self.arch.depth).rev()) {
            let u = Layer::<T>::forward(&mut self.up, &y, mode);
            y = d.forward(&Tensor::concat_channels(&u, &skips[l]), mode);
        }
        let u = Layer::<T>::forward(&mut self.up, &y, mode);
        let z = self.out.forward(&Tensor::concat_channels(&u, &skips[0]), mode);
        self.out_act.forward(&z, mode)
    }

    /// Returns the gradient with respect to the input image.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let e = self.arch.depth;
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; e];
        let g = self.out_act.backward(dy);
        let g = self.out.backward(&g);
        let (gu, gs) = g.split_channels(g.c() - self.skip_channels[0]);
        skip_grads[0] = Some(gs);
        let mut g = Layer::<T>::backward(&mut self.up, &gu);
        for (d, l) in self.dec.iter_mut().rev().zip(1..e) {
            let gd = d.backward(&g);
            let (gu, gs) = gd.split_channels(gd.c() - self.skip_channels[l]);
            skip_grads[l] = Some(gs);
            g = Layer::<T>::backward(&mut self.up, &gu);
        }
        for r in self.res.iter_mut().rev() {
            g = r.backward(&g);
        }
        for (i, s) in self.enc.iter_mut().enumerate().rev() {
            if i + 1 < e {
                g.add_assign(skip_grads[i + 1].as_ref().expect("skip gradient"));
            }
            g = s.backward(&g);
        }
        g.add_assign(skip_grads[0].as_ref().expect("input gradient"));
        g
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut skips = vec![x.clone()];
        let mut y = x.clone();
        for (i, s) in self.enc.iter().enumerate() {
            y = s.infer(&y);
            if i + 1 < self.arch.depth {
                skips.push(y.clone());
            }
        }
        for r in &self.res {
            y = r.infer(&y);
        }
        for (d, l) in self.dec.iter().zip((1..self.arch.depth).rev()) {
            let u = Layer::<T>::infer(&self.up, &y);
            y = d.infer(&Tensor::concat_channels(&u, &skips[l]));
        }
        let u = Layer::<T>::infer(&self.up, &y);
        self.out_act.infer(&self.out.infer(&Tensor::concat_channels(&u, &skips[0])))
    }
}

impl<T: Scalar> Module<T> for GeneratorNet<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, s) in self.enc.iter_mut().enumerate() {
            s.visit_params(&join(prefix, &format!("enc{i}")), f);
        }
        for (i, r) in self.res.iter_mut().enumerate() {
            r.visit_params(&join(prefix, &format!("res{i}")), f);
        }
        for (i, d) in self.dec.iter_mut().enumerate() {
            d.visit_params(&join(prefix, &format!("dec{i}")), f);
        }
        self.out.visit_params(&join(prefix, "out"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Buffer<T>)) {
        for (i, s) in self.enc.iter_mut().enumerate() {
            s.visit_buffers(&join(prefix, &format!("enc{i}")), f);
        }
        for (i, r) in self.res.iter_mut().enumerate() {
            r.visit_buffers(&join(prefix, &format!("res{i}")), f);
        }
        for (i, d) in self.dec.iter_mut().enumerate() {
            d.visit_buffers(&join(prefix, &format!("dec{i}")), f);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorArch {
    pub base: usize,
    pub depth: usize,
    /// Square input side the fully connected layer is sized for.
    pub input_size: usize,
}

impl Default for DiscriminatorArch {
    fn default() -> Self {
        Self { base: 8, depth: 3, input_size: 64 }
    }
}

/// Stride-2 conv/BN/LeakyReLU stages over the 6-channel `(hazy, candidate)`
/// pair, flattened into one logit.
#[derive(Debug, Clone)]
pub struct DiscriminatorNet<T> {
    pub arch: DiscriminatorArch,
    stages: Vec<ConvBnAct<T>>,
    fc: Linear<T>,
}

impl<T: Scalar> DiscriminatorNet<T> {
    pub fn new(arch: DiscriminatorArch, rng: &mut impl Rng) -> Result<Self> {
        let m = 1usize << arch.depth.min(16);
        if arch.base == 0 || arch.depth == 0 || arch.depth > 6 || !arch.input_size.is_multiple_of(m) || arch.input_size == 0 {
            return Err(Error::InvalidArgument(format!("invalid discriminator arch {arch:?}")));
        }
        let mut stages = Vec::new();
        let mut cin = 6;
        for i in 0..arch.depth {
            let c = arch.base << i;
            stages.push(ConvBnAct::new(cin, c, 2, true, LEAK, rng));
            cin = c;
        }
        let side = arch.input_size / m;
        let fc = Linear::new(cin * side * side, 1, rng);
        Ok(Self { arch, stages, fc })
    }

    /// Zeroes the output layer so every pair scores exactly 0.5.
    pub fn at_chance(mut self) -> Self {
        self.fc.weight.value.iter_mut().for_each(|w| *w = T::zero());
        self.fc.bias.value.iter_mut().for_each(|b| *b = T::zero());
        self
    }

    pub fn check_pair(&self, hazy: &Tensor<T>, candidate: &Tensor<T>) -> Result<()> {
        let s = self.arch.input_size;
        for t in [hazy, candidate] {
            if t.c() != 3 || t.h() != s || t.w() != s {
                return Err(Error::InvalidArgument(format!(
                    "discriminator expects [n, 3, {s}, {s}] images, got {:?}",
                    t.shape()
                )));
            }
        }
        if hazy.shape() != candidate.shape() {
            return Err(Error::InvalidArgument("discriminator pair shapes differ".into()));
        }
        Ok(())
    }

    /// Logits `[n, 1, 1, 1]` for the channel concatenation `(hazy, candidate)`.
    pub fn forward(&mut self, pair: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let mut y = pair.clone();
        for s in &mut self.stages {
            y = s.forward(&y, mode);
        }
        self.fc.forward(&y, mode)
    }

    /// Gradient with respect to the 6-channel pair.
    pub fn backward(&mut self, dlogit: &Tensor<T>) -> Tensor<T> {
        let mut g = self.fc.backward(dlogit);
        for s in self.stages.iter_mut().rev() {
            g = s.backward(&g);
        }
        g
    }

    pub fn infer(&self, pair: &Tensor<T>) -> Tensor<T> {
        let mut y = pair.clone();
        for s in &self.stages {
            y = s.infer(&y);
        }
        self.fc.infer(&y)
    }
}

impl<T: Scalar> Module<T> for DiscriminatorNet<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_params(&join(prefix, &format!("stage{i}")), f);
        }
        self.fc.visit_params(&join(prefix, "fc"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Buffer<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_buffers(&join(prefix, &format!("stage{i}")), f);
        }
    }
}

/// Dehaze one image with the generator in inference mode.
pub fn generator_forward<T: Scalar>(net: &GeneratorNet<T>, hazy: &ImageBuffer) -> Result<ImageBuffer> {
    let x = hazy.to_tensor::<T>();
    net.check_input(&x)?;
    ImageBuffer::from_tensor(&net.infer(&x), 0)
}

/// Probability that `candidate` is the real clear image for `hazy`.
pub fn discriminator_forward<T: Scalar>(
    net: &DiscriminatorNet<T>,
    hazy: &ImageBuffer,
    candidate: &ImageBuffer,
) -> Result<f64> {
    if hazy.dims() != candidate.dims() {
        return Err(Error::DimensionMismatch { left: hazy.dims(), right: candidate.dims() });
    }
    let (h, c) = (hazy.to_tensor::<T>(), candidate.to_tensor::<T>());
    net.check_pair(&h, &c)?;
    let logit = net.infer(&Tensor::concat_channels(&h, &c)).data()[0];
    Ok(sigmoid(logit.to_f64().unwrap_or(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, side: usize) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(side, side, |_, _| [rng.gen(), rng.gen(), rng.gen()]).unwrap()
    }

    #[test]
    fn generator_shape_range_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = GeneratorNet::<f32>::new(GeneratorArch::default(), &mut rng).unwrap();
        let img = random_image(2, 64);
        let a = generator_forward(&net, &img).unwrap();
        let b = generator_forward(&net, &img).unwrap();
        assert_eq!(a.dims(), (64, 64));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, b);
        let err = generator_forward(&net, &random_image(3, 60)).unwrap_err();
        assert!(err.to_string().contains('8'));
    }

    #[test]
    fn default_generator_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = GeneratorNet::<f32>::new(GeneratorArch::default(), &mut rng).unwrap();
        let n = net.param_count();
        assert!((80_000..200_000).contains(&n), "{n}");
    }

    #[test]
    fn discriminator_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = DiscriminatorNet::<f32>::new(DiscriminatorArch::default(), &mut rng).unwrap();
        let (h, c) = (random_image(5, 64), random_image(6, 64));
        let p = discriminator_forward(&net, &h, &c).unwrap();
        assert!(p > 0.0 && p < 1.0);
        assert_eq!(p, discriminator_forward(&net, &h, &c).unwrap());
        assert!(discriminator_forward(&net, &h, &random_image(7, 32)).is_err());
    }

    #[test]
    fn discriminator_at_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = DiscriminatorNet::<f32>::new(DiscriminatorArch::default(), &mut rng).unwrap().at_chance();
        let p = discriminator_forward(&net, &random_image(5, 64), &random_image(6, 64)).unwrap();
        assert!((p - 0.5).abs() < 1e-6);
    }
}
