//! Run configuration, dataset generation, evaluation, closed-loop runs and reports.

pub mod audit;
pub mod dataset;
pub mod eval;
pub mod report;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use audit::{audit_csv, audit_paper_tables, AuditRow, AUDIT_TOLERANCE_DB, PAPER_ROWS};
pub use dataset::{gen_dataset, BoxRecord, DatasetConfig, DatasetManifest, FrameRecord, LoadedFrame, Split, SplitCounts};
pub use eval::{
    detection_report_csv, discriminator_scores, eval_dehaze, eval_detector, DetectionReport, DetectionRow, DiscriminatorScores,
};
pub use report::report;

use crate::detector::DetectorTrainConfig;
use crate::error::{Error, Result};
use crate::gan::{Dehazer, TrainConfig};
use crate::haze::HazeParams;
use crate::imaging::SsimParams;
use crate::scene::{make_scenario, ScenarioConfig};
use crate::servo::{run_episode, EpisodeLog, FrameDump, ServoConfig, VesselDetector};

pub const CONFIG_VERSION: u32 = 1;
pub const RESOLVED_CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackConfig {
    /// Run the dehazing generator in the loop.
    pub dehaze: bool,
    /// Dump clear/hazy/dehazed frames every n ticks (0 disables).
    pub dump_every: usize,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self { dehaze: true, dump_every: 0 }
    }
}

/// Everything a command may need. Sub-config seeds are overwritten with `seed`
/// on resolution so one number controls a whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub dehaze: TrainConfig,
    pub detector: DetectorTrainConfig,
    pub scenario: ScenarioConfig,
    pub servo: ServoConfig,
    pub track: TrackConfig,
    pub ssim: SsimParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_VERSION,
            seed: 0,
            dataset: DatasetConfig::default(),
            dehaze: TrainConfig::default(),
            detector: DetectorTrainConfig::default(),
            scenario: ScenarioConfig { bearing_deg: 30.0, weather: crate::haze::Weather::FogHeavy, ..ScenarioConfig::default() },
            servo: ServoConfig::default(),
            track: TrackConfig::default(),
            ssim: SsimParams::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().replace('\n', " ")))?;
        if cfg.format_version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config format version {} is not supported (expected {CONFIG_VERSION})",
                cfg.format_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Apply a seed override and propagate the run seed into every sub-config.
    pub fn resolved(mut self, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.dehaze.seed = self.seed;
        self.detector.seed = self.seed;
        self.scenario.seed = self.seed;
        self.dataset.validate()?;
        self.dehaze.validate()?;
        self.detector.validate()?;
        self.servo.validate()?;
        Ok(self)
    }

    /// Create `dir` and store the exact configuration used there.
    pub fn write_to_run_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))
    }
}

/// SplitMix64 finalizer over a seed/stream pair.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSummary {
    pub stop_reason: String,
    pub ticks: usize,
    pub peak_abs_ex: f64,
    pub final50_within_5px: bool,
    pub dehaze: bool,
    pub line: String,
}

pub const EPISODE_FILE: &str = "episode.csv";

/// Closed-loop run of the configured scenario; writes the log, summary and frames into `out`.
pub fn track(
    cfg: &RunConfig,
    detector: &dyn VesselDetector,
    dehazer: Option<&dyn Dehazer>,
    out: &Path,
) -> Result<(EpisodeLog, TrackSummary)> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let scenario = make_scenario(&cfg.scenario)?;
    let haze = HazeParams::preset(cfg.scenario.weather);
    let dump = if cfg.track.dump_every > 0 {
        let dir = out.join("frames");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        FrameDump { dir: Some(dir), every: cfg.track.dump_every }
    } else {
        FrameDump::default()
    };
    let log = run_episode(&scenario, &haze, dehazer, detector, cfg.scenario.class_id, &cfg.servo, cfg.seed, &dump)?;
    let line = log.summary();
    let summary = TrackSummary {
        stop_reason: log.stop_reason().map(|s| s.name()).unwrap_or("none").into(),
        ticks: log.records.len().saturating_sub(1),
        peak_abs_ex: log.peak_abs_ex(),
        final50_within_5px: log.final_ticks_within(50, 5.0),
        dehaze: dehazer.is_some(),
        line: line.clone(),
    };
    write_text(&out.join(EPISODE_FILE), &log.to_csv())?;
    write_text(&out.join("summary.txt"), &format!("{line}\n"))?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok((log, summary))
}

/// Default run directory for a command when `--out` is not given.
pub fn default_run_dir(command: &str) -> PathBuf {
    PathBuf::from("runs").join(command)
}
