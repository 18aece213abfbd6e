//! Paired clear/hazy frames sampled along simulated approach trajectories.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mix_seed, write_json};
use crate::detector::{AnnotatedFrame, BoundingBox};
use crate::error::{Error, Result};
use crate::haze::{HazeParams, Weather};
use crate::imaging::{load_image, save_image, ImageBuffer};
use crate::scene::{render, step_kinematics, wrap_angle, CameraModel, MotionLimits, TargetVessel, UsvState, DEFAULT_CLASSES};
use crate::servo::perception_frames;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_frames: usize,
    /// Frames are spread evenly over this many approach runs.
    pub trajectories: usize,
    pub weather: Weather,
    /// Side of the stored frames.
    pub image_size: usize,
    /// Side of the rendered frames before box downsampling.
    pub render_size: usize,
    pub start_range_m: f64,
    pub end_range_m: f64,
    pub sim_hz: usize,
    pub sample_hz: usize,
    /// Initial bearings are drawn uniformly from +-this.
    pub max_bearing_deg: f64,
    /// Amplitude of the sinusoidal steering offset that sweeps the target across the frame.
    pub weave_deg: f64,
    pub n_classes: usize,
    pub focal_frac: f64,
    pub mount_height_m: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_frames: 600,
            trajectories: 8,
            weather: Weather::FogHeavy,
            image_size: 64,
            render_size: 128,
            start_range_m: 120.0,
            end_range_m: 15.0,
            sim_hz: 30,
            sample_hz: 2,
            max_bearing_deg: 20.0,
            weave_deg: 12.0,
            n_classes: DEFAULT_CLASSES,
            focal_frac: 0.75,
            mount_height_m: 3.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 || self.trajectories == 0 || self.trajectories > self.n_frames {
            return Err(Error::Config(format!(
                "need 1 <= trajectories ({}) <= n_frames ({})",
                self.trajectories, self.n_frames
            )));
        }
        if self.sample_hz == 0 || self.sim_hz == 0 || !self.sim_hz.is_multiple_of(self.sample_hz) {
            return Err(Error::Config(format!("sim_hz {} must be a multiple of sample_hz {}", self.sim_hz, self.sample_hz)));
        }
        if self.image_size < 8 || self.render_size < self.image_size {
            return Err(Error::Config("image_size must be >= 8 and <= render_size".into()));
        }
        let mut s = self.render_size;
        while s > self.image_size && s.is_multiple_of(2) {
            s /= 2;
        }
        if s != self.image_size {
            return Err(Error::Config(format!(
                "render_size {} must be image_size {} times a power of two",
                self.render_size, self.image_size
            )));
        }
        if !(self.end_range_m > 0.0 && self.start_range_m > self.end_range_m) {
            return Err(Error::Config("ranges must satisfy 0 < end_range_m < start_range_m".into()));
        }
        if self.n_classes == 0 || self.n_classes > DEFAULT_CLASSES {
            return Err(Error::Config(format!("n_classes {} outside [1, {DEFAULT_CLASSES}]", self.n_classes)));
        }
        if !(self.focal_frac > 0.0 && self.mount_height_m > 0.0) {
            return Err(Error::Config("focal_frac and mount_height_m must be positive".into()));
        }
        let half_fov = (0.5 / self.focal_frac).atan().to_degrees();
        if self.max_bearing_deg.abs() + self.weave_deg.abs() >= half_fov {
            return Err(Error::Config(format!(
                "max_bearing_deg + weave_deg must stay inside the {half_fov:.1} degree half field of view"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Normalized truth box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxRecord {
    pub fn bbox(&self) -> BoundingBox {
        BoundingBox { cx: self.cx, cy: self.cy, w: self.w, h: self.h }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: String,
    /// Relative to the dataset directory.
    pub clear_path: String,
    pub hazy_path: String,
    pub boxes: Vec<BoxRecord>,
    pub weather_params: HazeParams,
    pub split: Split,
    pub trajectory: usize,
    pub range_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: DatasetConfig,
    pub counts: SplitCounts,
    pub frames: Vec<FrameRecord>,
}

/// One loaded frame.
#[derive(Debug, Clone)]
pub struct LoadedFrame {
    pub frame_id: String,
    pub clear: ImageBuffer,
    pub hazy: ImageBuffer,
    pub boxes: Vec<(usize, BoundingBox)>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Dataset(format!(
                "{}: manifest format version {} is not supported (expected {MANIFEST_VERSION})",
                path.display(),
                m.format_version
            )));
        }
        Ok(m)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &FrameRecord> {
        self.frames.iter().filter(move |f| f.split == split)
    }

    /// Load every image of `split`, failing with the full list of missing files.
    pub fn load_split(&self, dir: &Path, split: Split) -> Result<Vec<LoadedFrame>> {
        let records: Vec<&FrameRecord> = self.split(split).collect();
        let missing: Vec<PathBuf> = records
            .iter()
            .flat_map(|r| [dir.join(&r.clear_path), dir.join(&r.hazy_path)])
            .filter(|p| !p.is_file())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingFiles(missing));
        }
        records
            .into_iter()
            .map(|r| {
                Ok(LoadedFrame {
                    frame_id: r.frame_id.clone(),
                    clear: load_image(&dir.join(&r.clear_path))?,
                    hazy: load_image(&dir.join(&r.hazy_path))?,
                    boxes: r.boxes.iter().map(|b| (b.class_id, b.bbox())).collect(),
                })
            })
            .collect()
    }
}

impl LoadedFrame {
    pub fn annotated_clear(&self) -> AnnotatedFrame {
        (self.clear.clone(), self.boxes.clone())
    }
}

/// Frame count of each trajectory: as even as possible, earlier runs take the remainder.
fn trajectory_lengths(n: usize, t: usize) -> Vec<usize> {
    (0..t).map(|i| n / t + usize::from(i < n % t)).collect()
}

struct Trajectory {
    class_id: usize,
    target: TargetVessel,
    speed: f64,
    weave_amp: f64,
    weave_period_s: f64,
    weave_phase: f64,
}

fn plan_trajectory(cfg: &DatasetConfig, index: usize, frames: usize, seed: u64) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index as u64));
    let class_id = index % cfg.n_classes;
    let bearing = rng.gen_range(-cfg.max_bearing_deg..=cfg.max_bearing_deg).to_radians();
    let aspect = rng.gen_range(30.0..=150.0_f64).to_radians();
    let forward = cfg.start_range_m;
    let target = TargetVessel::of_class(class_id, forward, forward * bearing.tan(), wrap_angle(bearing + aspect))?;
    let duration = (frames.max(2) - 1) as f64 / cfg.sample_hz as f64;
    Ok(Trajectory {
        class_id,
        target,
        speed: (cfg.start_range_m - cfg.end_range_m) / duration,
        weave_amp: cfg.weave_deg.to_radians() * rng.gen_range(0.3..=1.0),
        weave_period_s: rng.gen_range(8.0..=20.0),
        weave_phase: rng.gen_range(0.0..2.0 * PI),
    })
}

/// Render the dataset into `dir` and write its manifest.
pub fn gen_dataset(cfg: &DatasetConfig, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    for sub in ["clear", "hazy"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let haze = HazeParams::preset(cfg.weather);
    let cam = CameraModel::square(cfg.render_size, cfg.focal_frac, cfg.mount_height_m);
    let limits = MotionLimits::default();
    let dt = 1.0 / cfg.sim_hz as f64;
    let every = cfg.sim_hz / cfg.sample_hz;
    let mut frames = Vec::with_capacity(cfg.n_frames);

    for (ti, len) in trajectory_lengths(cfg.n_frames, cfg.trajectories).into_iter().enumerate() {
        let plan = plan_trajectory(cfg, ti, len, seed)?;
        let render_seed = mix_seed(seed, 0x7261_6a00 + ti as u64);
        let mut usv = UsvState { speed: plan.speed, ..UsvState::default() };
        let mut tick = 0usize;
        let mut taken = 0usize;
        while taken < len {
            let (dx, dy) = (plan.target.x - usv.x, plan.target.y - usv.y);
            let range = dx.hypot(dy);
            if tick.is_multiple_of(every) {
                let index = frames.len();
                let frame_id = format!("f{index:05}");
                let rendered = render(&usv, std::slice::from_ref(&plan.target), &cam, render_seed)?;
                let pf = perception_frames(rendered, &haze, mix_seed(seed, 0x6861_7a65_0000_0000 + index as u64), cfg.image_size)?;
                let clear_path = format!("clear/{frame_id}.png");
                let hazy_path = format!("hazy/{frame_id}.png");
                save_image(&pf.clear, &dir.join(&clear_path))?;
                save_image(&pf.hazy, &dir.join(&hazy_path))?;
                let boxes = pf
                    .render
                    .truth_boxes
                    .iter()
                    .map(|&(class_id, b)| BoxRecord { class_id, cx: b.cx, cy: b.cy, w: b.w, h: b.h })
                    .collect();
                frames.push(FrameRecord {
                    frame_id,
                    clear_path,
                    hazy_path,
                    boxes,
                    weather_params: haze,
                    split: if index % 2 == 0 { Split::Train } else { Split::Test },
                    trajectory: ti,
                    range_m: range,
                });
                taken += 1;
            }
            let t = tick as f64 * dt;
            let offset = plan.weave_amp * (2.0 * PI * t / plan.weave_period_s + plan.weave_phase).sin();
            let bearing = wrap_angle(dy.atan2(dx) - usv.heading);
            let yaw = (1.5 * (bearing - offset)).clamp(-0.3, 0.3);
            let v = if range > cfg.end_range_m * 0.8 { plan.speed } else { 0.0 };
            usv = step_kinematics(&usv, yaw, v, dt, &limits);
            tick += 1;
        }
        log::debug!("trajectory {ti}: class {} with {len} frames", plan.class_id);
    }

    let train = frames.iter().filter(|f| f.split == Split::Train).count();
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        seed,
        config: cfg.clone(),
        counts: SplitCounts { train, test: frames.len() - train },
        frames,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}
