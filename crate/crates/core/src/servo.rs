//! Image-based visual servoing: pixel error, PID heading control, target
//! selection and the closed-loop episode runner.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::detector::{iou, DetectParams, Detection, DetectorModel};
use crate::error::{Error, Result};
use crate::gan::Dehazer;
use crate::haze::{apply_haze, HazeParams};
use crate::imaging::{save_image, ImageBuffer};
use crate::scene::{render, step_kinematics, MotionLimits, RenderOutput, Scenario, UsvState};

/// `F_d - F_o` in pixels, desired feature being the image centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisualError {
    pub ex: f64,
    pub ey: f64,
}

pub fn visual_error(det: &Detection, image_width: usize, image_height: usize) -> VisualError {
    let (w, h) = (image_width as f64, image_height as f64);
    VisualError { ex: w / 2.0 - det.bbox.cx * w, ey: h / 2.0 - det.bbox.cy * h }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self { kp: 0.004, ki: 0.0004, kd: 0.002 }
    }
}

impl PidGains {
    pub fn validate(&self) -> Result<()> {
        if [self.kp, self.ki, self.kd].iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::Config(format!("PID gains must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Integral anti-windup bound and output saturation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PidLimits {
    /// px s
    pub i_max: f64,
    /// rad/s
    pub omega_max: f64,
}

impl Default for PidLimits {
    fn default() -> Self {
        Self { i_max: 500.0, omega_max: 0.6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: f64,
    pub initialized: bool,
}

impl PidState {
    /// State that already holds a previous sample, so the next derivative is
    /// taken against `prev_error`.
    pub fn primed(prev_error: f64) -> Self {
        Self { integral: 0.0, prev_error, initialized: true }
    }
}

/// One discrete PID update: rectangular integral including the current
/// sample, backward-difference derivative (zero on an uninitialized state),
/// output clamped to `omega_max`.
pub fn pid_step(gains: &PidGains, state: &PidState, e: f64, dt: f64, limits: &PidLimits) -> (f64, PidState) {
    let integral = (state.integral + e * dt).clamp(-limits.i_max, limits.i_max);
    let derivative = if state.initialized { (e - state.prev_error) / dt } else { 0.0 };
    let raw = gains.kp * e + gains.ki * integral + gains.kd * derivative;
    let u = raw.clamp(-limits.omega_max, limits.omega_max);
    if u != raw {
        log::debug!("pid output {raw} clamped to {u}");
    }
    (u, PidState { integral, prev_error: e, initialized: true })
}

/// Most confident detection of `target_class`; ties go to the larger overlap
/// with `prev`, then the larger box.
pub fn select_target(dets: &[Detection], target_class: usize, prev: Option<&Detection>) -> Option<Detection> {
    let overlap = |d: &Detection| prev.map_or(0.0, |p| iou(&p.bbox, &d.bbox));
    dets.iter()
        .filter(|d| d.class_id == target_class)
        .copied()
        .reduce(|best, d| {
            let key = |x: &Detection| (x.confidence, overlap(x), x.bbox.area());
            let (a, b) = (key(&best), key(&d));
            if b.0 > a.0 || (b.0 == a.0 && (b.1 > a.1 || (b.1 == a.1 && b.2 > a.2))) {
                d
            } else {
                best
            }
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopCondition {
    /// Box pixel height over image height that counts as arrival.
    pub proximity_height_frac: f64,
    pub max_ticks: usize,
    pub lost_patience: usize,
}

impl Default for StopCondition {
    fn default() -> Self {
        Self { proximity_height_frac: 0.35, max_ticks: 2000, lost_patience: 30 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Proximity,
    MaxTicks,
    Lost,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::Proximity => "proximity",
            StopReason::MaxTicks => "max_ticks",
            StopReason::Lost => "lost",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServoConfig {
    pub gains: PidGains,
    pub limits: PidLimits,
    pub dt: f64,
    /// m/s
    pub cruise_speed: f64,
    /// Slowdown starts at this fraction of the proximity height.
    pub slowdown_start: f64,
    /// Speed floor near arrival, as a fraction of cruise.
    pub min_speed_frac: f64,
    pub deadband_px: f64,
    /// rad/s
    pub search_rate: f64,
    /// Side of the frames fed to dehazing and detection.
    pub perception_size: usize,
    pub detect: DetectParams,
    pub stop: StopCondition,
}

impl Default for ServoConfig {
    fn default() -> Self {
        Self {
            gains: PidGains::default(),
            limits: PidLimits::default(),
            dt: 0.1,
            cruise_speed: 3.0,
            slowdown_start: 0.5,
            min_speed_frac: 0.2,
            deadband_px: 2.0,
            search_rate: 0.3,
            perception_size: 64,
            detect: DetectParams::default(),
            stop: StopCondition::default(),
        }
    }
}

impl ServoConfig {
    pub fn validate(&self) -> Result<()> {
        self.gains.validate()?;
        let s = &self.stop;
        if !(s.proximity_height_frac > 0.0 && s.proximity_height_frac < 1.0) || s.max_ticks == 0 || s.lost_patience == 0
        {
            return Err(Error::Config(format!("invalid stop condition {s:?}")));
        }
        if !(self.dt > 0.0) || !(self.cruise_speed >= 0.0) || !(self.limits.omega_max > 0.0) || !(self.limits.i_max >= 0.0)
        {
            return Err(Error::Config("dt, omega_max must be positive; cruise_speed, i_max non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.slowdown_start) || !(0.0..=1.0).contains(&self.min_speed_frac) {
            return Err(Error::Config("slowdown_start must lie in [0, 1), min_speed_frac in [0, 1]".into()));
        }
        if self.perception_size < 8 || !self.perception_size.is_multiple_of(8) {
            return Err(Error::Config("perception_size must be a multiple of 8".into()));
        }
        Ok(())
    }

    /// Cruise speed, reduced linearly to `min_speed_frac * cruise` between
    /// `slowdown_start * proximity` and the proximity box height.
    pub fn speed_for(&self, height_frac: f64) -> f64 {
        let stop = self.stop.proximity_height_frac;
        let start = self.slowdown_start * stop;
        let s = ((height_frac - start) / (stop - start)).clamp(0.0, 1.0);
        self.cruise_speed * (1.0 - s * (1.0 - self.min_speed_frac))
    }
}

/// Source of detections for the episode runner.
pub trait VesselDetector {
    fn detect_frame(&self, image: &ImageBuffer, render: &RenderOutput) -> Result<Vec<Detection>>;
}

pub struct ModelDetector<'a> {
    pub model: &'a DetectorModel,
    pub params: DetectParams,
}

impl VesselDetector for ModelDetector<'_> {
    fn detect_frame(&self, image: &ImageBuffer, _: &RenderOutput) -> Result<Vec<Detection>> {
        self.model.detect(image, &self.params)
    }
}

/// Perfect detector reading the renderer's truth boxes.
#[derive(Debug, Clone, Copy, Default)]
pub struct TruthDetector;

impl VesselDetector for TruthDetector {
    fn detect_frame(&self, _: &ImageBuffer, render: &RenderOutput) -> Result<Vec<Detection>> {
        Ok(render.truth_boxes.iter().map(|&(class_id, bbox)| Detection { bbox, class_id, confidence: 1.0 }).collect())
    }
}

/// Camera frames as delivered to perception: rendered at full size, hazed and
/// quantized to 8 bits, then box-downsampled to `size` and quantized again.
#[derive(Debug, Clone)]
pub struct PerceptionFrames {
    pub render: RenderOutput,
    pub hazy_full: ImageBuffer,
    pub clear: ImageBuffer,
    pub hazy: ImageBuffer,
}

pub fn perception_frames(render: RenderOutput, haze: &HazeParams, haze_seed: u64, size: usize) -> Result<PerceptionFrames> {
    let hazy_full = apply_haze(&render.image, &render.depth, haze, haze_seed)?.quantized();
    let shrink = |img: &ImageBuffer| -> Result<ImageBuffer> {
        let mut out = img.clone();
        while out.height() > size {
            if !out.height().is_multiple_of(2) || !out.width().is_multiple_of(2) {
                return Err(Error::InvalidArgument(format!("cannot reduce {:?} to {size}", img.dims())));
            }
            out = out.downsample2()?;
        }
        if out.height() != size {
            return Err(Error::InvalidArgument(format!("cannot reduce {:?} to {size}", img.dims())));
        }
        Ok(out.quantized())
    };
    let clear = shrink(&render.image.quantized())?;
    let hazy = shrink(&hazy_full)?;
    Ok(PerceptionFrames { render, hazy_full, clear, hazy })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: usize,
    pub time_s: f64,
    /// Pose at which the frame was captured.
    pub state: UsvState,
    pub frame_id: String,
    pub detection: Option<Detection>,
    pub error: Option<VisualError>,
    pub yaw_rate: f64,
    pub speed_cmd: f64,
    pub stop_reason: Option<StopReason>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub records: Vec<TickRecord>,
}

pub const EPISODE_CSV_HEADER: &str = "tick,x,y,heading,speed,det_conf,det_cx,det_h,ex,u,stop_reason";

impl EpisodeLog {
    pub fn stop_reason(&self) -> Option<StopReason> {
        self.records.last().and_then(|r| r.stop_reason)
    }

    /// Largest |ex| over ticks with a detection.
    pub fn peak_abs_ex(&self) -> f64 {
        self.records.iter().filter_map(|r| r.error.map(|e| e.ex.abs())).fold(0.0, f64::max)
    }

    /// Whether each of the last `n` ticks has a detection with `|ex| <= tol`.
    pub fn final_ticks_within(&self, n: usize, tol: f64) -> bool {
        self.records.len() >= n
            && self.records[self.records.len() - n..].iter().all(|r| r.error.is_some_and(|e| e.ex.abs() <= tol))
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = format!("{EPISODE_CSV_HEADER}\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.tick,
                r.state.x,
                r.state.y,
                r.state.heading,
                r.state.speed,
                opt(r.detection.map(|d| d.confidence)),
                opt(r.detection.map(|d| d.bbox.cx)),
                opt(r.detection.map(|d| d.bbox.h)),
                opt(r.error.map(|e| e.ex)),
                r.yaw_rate,
                r.stop_reason.map(|s| s.name()).unwrap_or("")
            ));
        }
        s
    }

    /// One-line outcome summary.
    pub fn summary(&self) -> String {
        let reason = self.stop_reason().map(|s| s.name()).unwrap_or("none");
        let ticks = self.records.len().saturating_sub(1);
        let detected = self.records.iter().filter(|r| r.detection.is_some()).count();
        format!(
            "stop_reason={reason} ticks={ticks} peak_abs_ex={:.2} detections={detected}/{} final50_within_5px={}",
            self.peak_abs_ex(),
            self.records.len(),
            self.final_ticks_within(50, 5.0)
        )
    }
}

/// Optional per-tick image dumps.
#[derive(Debug, Clone, Default)]
pub struct FrameDump {
    pub dir: Option<PathBuf>,
    /// Dump every n-th tick (0 disables).
    pub every: usize,
}

fn tick_seed(seed: u64, tick: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (tick as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Closed loop: render, haze, optionally dehaze, detect, select, control.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    scenario: &Scenario,
    haze: &HazeParams,
    dehazer: Option<&dyn Dehazer>,
    detector: &dyn VesselDetector,
    target_class: usize,
    cfg: &ServoConfig,
    seed: u64,
    dump: &FrameDump,
) -> Result<EpisodeLog> {
    cfg.validate()?;
    haze.validate()?;
    let cam = scenario.camera;
    cam.validate()?;
    let limits = MotionLimits { omega_max: cfg.limits.omega_max, ..MotionLimits::default() };
    let (w, h) = (cam.image_width, cam.image_height);
    let mut state = scenario.usv;
    let mut pid = PidState::default();
    let mut prev: Option<Detection> = None;
    let mut last_u = 0.0;
    let mut last_v = cfg.cruise_speed;
    let mut last_sign = 1.0;
    let mut lost = 0usize;
    let mut log = EpisodeLog::default();

    for tick in 0..cfg.stop.max_ticks {
        let frame_id = format!("tick_{tick:05}");
        let rendered = render(&state, &scenario.targets, &cam, seed)?;
        let frames = perception_frames(rendered, haze, tick_seed(seed, tick), cfg.perception_size)?;
        let input = match dehazer {
            Some(d) => d.dehaze_image(&frames.hazy)?,
            None => frames.hazy.clone(),
        };
        if let Some(dir) = dump.dir.as_ref().filter(|_| dump.every > 0 && tick % dump.every == 0) {
            save_image(&frames.render.image, &dir.join(format!("{frame_id}_clear.png")))?;
            save_image(&frames.hazy_full, &dir.join(format!("{frame_id}_hazy.png")))?;
            if dehazer.is_some() {
                save_image(&input, &dir.join(format!("{frame_id}_dehazed.png")))?;
            }
        }
        let dets = detector.detect_frame(&input, &frames.render)?;
        let chosen = select_target(&dets, target_class, prev.as_ref());
        let mut rec = TickRecord {
            tick,
            time_s: tick as f64 * cfg.dt,
            state,
            frame_id,
            detection: chosen,
            error: chosen.map(|d| visual_error(&d, w, h)),
            yaw_rate: 0.0,
            speed_cmd: 0.0,
            stop_reason: None,
        };

        match chosen {
            Some(det) => {
                lost = 0;
                if det.bbox.h >= cfg.stop.proximity_height_frac {
                    rec.stop_reason = Some(StopReason::Proximity);
                    log.records.push(rec);
                    return Ok(log);
                }
                let ex = rec.error.map(|e| e.ex).unwrap_or(0.0);
                let e = if ex.abs() <= cfg.deadband_px { 0.0 } else { ex };
                let (u, next) = pid_step(&cfg.gains, &pid, e, cfg.dt, &cfg.limits);
                pid = next;
                rec.yaw_rate = u;
                rec.speed_cmd = cfg.speed_for(det.bbox.h);
                if ex != 0.0 {
                    last_sign = ex.signum();
                }
                prev = Some(det);
            }
            None => {
                lost += 1;
                pid.initialized = false;
                let patience = cfg.stop.lost_patience;
                if lost <= patience {
                    rec.yaw_rate = last_u;
                    rec.speed_cmd = last_v;
                } else if lost <= 2 * patience {
                    rec.yaw_rate = cfg.search_rate * last_sign;
                    rec.speed_cmd = 0.0;
                } else {
                    rec.stop_reason = Some(StopReason::Lost);
                    log.records.push(rec);
                    return Ok(log);
                }
            }
        }
        last_u = rec.yaw_rate;
        last_v = rec.speed_cmd;
        state = step_kinematics(&state, rec.yaw_rate, rec.speed_cmd, cfg.dt, &limits);
        if tick + 1 == cfg.stop.max_ticks {
            rec.stop_reason = Some(StopReason::MaxTicks);
        }
        log.records.push(rec);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::BoundingBox;
    use crate::haze::Weather;
    use crate::scene::{make_scenario, ScenarioConfig};

    fn det(cx: f64, conf: f64) -> Detection {
        Detection { bbox: BoundingBox::new(cx, 0.5, 0.1, 0.1).unwrap(), class_id: 0, confidence: conf }
    }

    #[test]
    fn visual_error_cases() {
        assert_eq!(visual_error(&det(0.5, 1.0), 640, 480).ex, 0.0);
        assert_eq!(visual_error(&det(0.625, 1.0), 640, 480).ex, -80.0);
        assert_eq!(visual_error(&det(0.25, 1.0), 128, 128).ex, 32.0);
    }

    #[test]
    fn pid_cases() {
        let wide = PidLimits { i_max: 1e9, omega_max: 1e9 };
        let zero = PidState::default();
        assert_eq!(pid_step(&PidGains::default(), &zero, 0.0, 0.1, &wide).0, 0.0);
        let p = PidGains { kp: 2.0, ki: 0.0, kd: 0.0 };
        assert_eq!(pid_step(&p, &zero, 1.0, 0.1, &wide).0, 2.0);
        let g = PidGains { kp: 1.0, ki: 0.5, kd: 0.1 };
        // a fresh state has no derivative term; one primed with e = 0 does
        assert!((pid_step(&g, &zero, 1.0, 1.0, &wide).0 - 1.5).abs() < 1e-12);
        assert!((pid_step(&g, &PidState::primed(0.0), 1.0, 1.0, &wide).0 - 1.6).abs() < 1e-12);
        // saturation and anti-windup
        let tight = PidLimits { i_max: 0.5, omega_max: 0.6 };
        let (u, s) = pid_step(&g, &zero, 10.0, 1.0, &tight);
        assert_eq!(u, 0.6);
        assert_eq!(s.integral, 0.5);
    }

    #[test]
    fn select_target_cases() {
        assert!(select_target(&[], 0, None).is_none());
        let best = select_target(&[det(0.3, 0.6), det(0.7, 0.9)], 0, None).unwrap();
        assert_eq!(best.confidence, 0.9);
        let (a, b) = (det(0.3, 0.8), det(0.7, 0.8));
        assert_eq!(select_target(&[a, b], 0, Some(&det(0.31, 0.5))).unwrap(), a);
        assert_eq!(select_target(&[a, b], 0, Some(&det(0.69, 0.5))).unwrap(), b);
        let other = Detection { class_id: 3, ..det(0.5, 0.99) };
        assert!(select_target(&[other], 0, None).is_none());
    }

    #[test]
    fn speed_law() {
        let c = ServoConfig::default();
        assert_eq!(c.speed_for(0.0), c.cruise_speed);
        assert!((c.speed_for(0.35) - c.cruise_speed * c.min_speed_frac).abs() < 1e-12);
        assert!(c.speed_for(0.3) < c.speed_for(0.2));
    }

    fn episode(cfg: &ScenarioConfig, servo: &ServoConfig) -> EpisodeLog {
        let sc = make_scenario(cfg).unwrap();
        let haze = HazeParams::preset(cfg.weather);
        run_episode(&sc, &haze, None, &TruthDetector, cfg.class_id, servo, cfg.seed, &FrameDump::default()).unwrap()
    }

    #[test]
    fn immediate_proximity_stop() {
        let cfg = ScenarioConfig { target_range_m: 15.0, ..Default::default() };
        let log = episode(&cfg, &ServoConfig::default());
        assert_eq!(log.records.len(), 1);
        assert_eq!(log.stop_reason(), Some(StopReason::Proximity));
    }

    #[test]
    fn max_ticks_stop() {
        let servo = ServoConfig { stop: StopCondition { max_ticks: 1, ..Default::default() }, ..Default::default() };
        let log = episode(&ScenarioConfig::default(), &servo);
        assert_eq!(log.records.len(), 1);
        assert_eq!(log.stop_reason(), Some(StopReason::MaxTicks));
    }

    #[test]
    fn sign_convention_turns_towards_target() {
        let cfg = ScenarioConfig { bearing_deg: 20.0, target_range_m: 80.0, ..Default::default() };
        let servo = ServoConfig { stop: StopCondition { max_ticks: 2, ..Default::default() }, ..Default::default() };
        let log = episode(&cfg, &servo);
        let first = &log.records[0];
        assert!(first.error.unwrap().ex > 0.0);
        assert!(first.yaw_rate > 0.0);
        assert!(log.records[1].state.heading > 0.0);
    }

    #[test]
    fn truth_tracking_reaches_proximity_and_is_deterministic() {
        let cfg = ScenarioConfig { bearing_deg: 30.0, weather: Weather::FogHeavy, ..Default::default() };
        let a = episode(&cfg, &ServoConfig::default());
        assert_eq!(a.stop_reason(), Some(StopReason::Proximity), "{}", a.summary());
        assert!(a.final_ticks_within(50, 5.0), "{}", a.summary());
        assert_eq!(a, episode(&cfg, &ServoConfig::default()));
    }
}
