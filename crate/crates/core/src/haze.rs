//! Homogeneous atmospheric scattering: `I = J t + A (1 - t)`, `t = exp(-beta d)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;
use crate::scene::DepthMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weather {
    #[default]
    Clear,
    FogLight,
    FogHeavy,
    SandLight,
    SandHeavy,
}

impl Weather {
    pub const ALL: [Weather; 5] = [
        Weather::Clear,
        Weather::FogLight,
        Weather::FogHeavy,
        Weather::SandLight,
        Weather::SandHeavy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Weather::Clear => "clear",
            Weather::FogLight => "fog_light",
            Weather::FogHeavy => "fog_heavy",
            Weather::SandLight => "sand_light",
            Weather::SandHeavy => "sand_heavy",
        }
    }

    pub fn is_sand(self) -> bool {
        matches!(self, Weather::SandLight | Weather::SandHeavy)
    }
}

impl std::str::FromStr for Weather {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Weather::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown weather preset `{s}`")))
    }
}

pub const FOG_AIRLIGHT: [f64; 3] = [0.92, 0.94, 0.97];
pub const SAND_AIRLIGHT: [f64; 3] = [0.82, 0.66, 0.42];
pub const SAND_GRAIN: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HazeParams {
    /// Extinction coefficient, 1/m.
    pub beta: f64,
    pub airlight: [f64; 3],
    pub preset: Weather,
    /// Half-width of the per-pixel uniform grain; zero disables it.
    pub noise_amplitude: f64,
}

impl HazeParams {
    pub fn preset(weather: Weather) -> Self {
        let (beta, airlight, noise) = match weather {
            Weather::Clear => (0.0, FOG_AIRLIGHT, 0.0),
            Weather::FogLight => (0.010, FOG_AIRLIGHT, 0.0),
            Weather::FogHeavy => (0.030, FOG_AIRLIGHT, 0.0),
            Weather::SandLight => (0.012, SAND_AIRLIGHT, SAND_GRAIN),
            Weather::SandHeavy => (0.035, SAND_AIRLIGHT, SAND_GRAIN),
        };
        Self { beta, airlight, preset: weather, noise_amplitude: noise }
    }

    pub fn without_noise(mut self) -> Self {
        self.noise_amplitude = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidArgument(format!("beta {} must be >= 0", self.beta)));
        }
        if self.airlight.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidArgument(format!("airlight {:?} outside [0, 1]", self.airlight)));
        }
        if self.preset == Weather::Clear && self.beta != 0.0 {
            return Err(Error::InvalidArgument("clear preset requires beta = 0".into()));
        }
        if !(0.0..=SAND_GRAIN).contains(&self.noise_amplitude) {
            return Err(Error::InvalidArgument(format!(
                "noise amplitude {} outside [0, {SAND_GRAIN}]",
                self.noise_amplitude
            )));
        }
        Ok(())
    }
}

/// Fraction of scene radiance reaching the camera over `depth` metres.
pub fn transmission(depth: f64, beta: f64) -> Result<f64> {
    if !(depth >= 0.0) || !(beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("transmission needs depth, beta >= 0 (got {depth}, {beta})")));
    }
    Ok((-beta * depth).exp())
}

/// Degrade a clear frame given its range map.
pub fn apply_haze(clear: &ImageBuffer, depth: &DepthMap, params: &HazeParams, seed: u64) -> Result<ImageBuffer> {
    params.validate()?;
    if (depth.height, depth.width) != clear.dims() {
        return Err(Error::DimensionMismatch { left: clear.dims(), right: (depth.height, depth.width) });
    }
    if params.beta == 0.0 && params.noise_amplitude == 0.0 {
        return Ok(clear.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amp = params.noise_amplitude;
    let (h, w) = clear.dims();
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let t = transmission(depth.at(y, x), params.beta)?;
            let grain = if amp > 0.0 { rng.gen_range(-amp..=amp) } else { 0.0 };
            let j = clear.pixel(y, x);
            for c in 0..3 {
                let v = j[c] * t + params.airlight[c] * (1.0 - t) + grain;
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    ImageBuffer::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_depth(h: usize, w: usize, d: f64) -> DepthMap {
        DepthMap { height: h, width: w, data: vec![d; h * w] }
    }

    #[test]
    fn transmission_cases() {
        assert_eq!(transmission(123.0, 0.0).unwrap(), 1.0);
        assert_eq!(transmission(0.0, 0.5).unwrap(), 1.0);
        assert!((transmission(10.0, 0.1).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert!(transmission(-1.0, 0.1).is_err());
        assert!(transmission(1.0, -0.1).is_err());
    }

    #[test]
    fn clear_preset_is_identity() {
        let img = ImageBuffer::from_fn(8, 8, |y, x| [y as f64 / 8.0, x as f64 / 8.0, 0.3]).unwrap();
        let out = apply_haze(&img, &flat_depth(8, 8, 50.0), &HazeParams::preset(Weather::Clear), 3).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn scalar_model_evaluation() {
        let img = ImageBuffer::filled(8, 8, [0.8; 3]).unwrap();
        let p = HazeParams { beta: 0.1, airlight: [1.0; 3], preset: Weather::FogLight, noise_amplitude: 0.0 };
        let out = apply_haze(&img, &flat_depth(8, 8, 10.0), &p, 0).unwrap();
        let t = (-1.0f64).exp();
        let want = 0.8 * t + (1.0 - t);
        assert!((out.pixel(4, 4)[1] - want).abs() < 1e-12);
        assert!((want - 0.9264).abs() < 1e-4);
    }

    #[test]
    fn dense_haze_converges_to_airlight() {
        let img = ImageBuffer::filled(8, 8, [0.1, 0.5, 0.9]).unwrap();
        let p = HazeParams { beta: 1.0, ..HazeParams::preset(Weather::SandHeavy) }.without_noise();
        let out = apply_haze(&img, &flat_depth(8, 8, 2000.0), &p, 0).unwrap();
        for px in out.data().chunks(3) {
            for c in 0..3 {
                assert!((px[c] - SAND_AIRLIGHT[c]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let img = ImageBuffer::filled(8, 8, [0.1; 3]).unwrap();
        let p = HazeParams::preset(Weather::FogHeavy);
        assert!(apply_haze(&img, &flat_depth(8, 9, 1.0), &p, 0).is_err());
    }

    #[test]
    fn sand_grain_is_seeded_and_bounded() {
        let img = ImageBuffer::filled(8, 8, [0.5; 3]).unwrap();
        let d = flat_depth(8, 8, 0.0);
        let p = HazeParams::preset(Weather::SandLight);
        let a = apply_haze(&img, &d, &p, 7).unwrap();
        assert_eq!(a, apply_haze(&img, &d, &p, 7).unwrap());
        assert_ne!(a, apply_haze(&img, &d, &p, 8).unwrap());
        assert!(a.data().iter().all(|v| (v - 0.5).abs() <= SAND_GRAIN + 1e-12));
    }

    #[test]
    fn presets_validate() {
        for w in Weather::ALL {
            HazeParams::preset(w).validate().unwrap();
            assert_eq!(w.name().parse::<Weather>().unwrap(), w);
        }
        assert_eq!(HazeParams::preset(Weather::Clear).beta, 0.0);
    }
}
