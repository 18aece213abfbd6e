//! Procedural marine world: unicycle USV kinematics, billboard target
//! vessels, and a forward-mounted pinhole camera that renders a clear frame,
//! a per-pixel range map and tight ground-truth boxes.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::BoundingBox;
use crate::error::{Error, Result};
use crate::haze::Weather;
use crate::imaging::ImageBuffer;

pub const DEFAULT_CLASSES: usize = 6;

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UsvState {
    pub x: f64,
    pub y: f64,
    /// Radians, counter-clockwise from +x, in `(-pi, pi]`.
    pub heading: f64,
    pub speed: f64,
}

impl Default for UsvState {
    fn default() -> Self {
        Self { x: 0.0, y: 0.0, heading: 0.0, speed: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionLimits {
    pub v_max: f64,
    pub omega_max: f64,
}

impl Default for MotionLimits {
    fn default() -> Self {
        Self { v_max: 5.0, omega_max: 0.6 }
    }
}

/// One explicit Euler step of the unicycle model. Out-of-range commands are
/// clamped to `limits`.
pub fn step_kinematics(state: &UsvState, yaw_rate: f64, speed_cmd: f64, dt: f64, limits: &MotionLimits) -> UsvState {
    let w = yaw_rate.clamp(-limits.omega_max, limits.omega_max);
    let v = speed_cmd.clamp(0.0, limits.v_max);
    if w != yaw_rate || v != speed_cmd {
        log::debug!("kinematics clamp: yaw_rate {yaw_rate} -> {w}, speed {speed_cmd} -> {v}");
    }
    UsvState {
        x: state.x + v * state.heading.cos() * dt,
        y: state.y + v * state.heading.sin() * dt,
        heading: wrap_angle(state.heading + w * dt),
        speed: v,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VesselClass {
    pub hull_length: f64,
    pub hull_height: f64,
    pub color: [f64; 3],
    /// Superstructure span as fractions of the billboard width.
    pub cabin: [f64; 2],
    /// Fraction of the height taken by the hull below the superstructure.
    pub hull_frac: f64,
}

/// Six vessel types with distinct size, color and profile.
pub fn vessel_catalog() -> [VesselClass; DEFAULT_CLASSES] {
    [
        VesselClass { hull_length: 24.0, hull_height: 10.0, color: [0.22, 0.22, 0.25], cabin: [0.30, 0.65], hull_frac: 0.45 },
        VesselClass { hull_length: 20.0, hull_height: 8.0, color: [0.72, 0.14, 0.10], cabin: [0.10, 0.40], hull_frac: 0.50 },
        VesselClass { hull_length: 16.0, hull_height: 7.0, color: [0.92, 0.52, 0.08], cabin: [0.55, 0.90], hull_frac: 0.55 },
        VesselClass { hull_length: 30.0, hull_height: 12.0, color: [0.08, 0.10, 0.34], cabin: [0.20, 0.50], hull_frac: 0.35 },
        VesselClass { hull_length: 22.0, hull_height: 9.0, color: [0.12, 0.45, 0.18], cabin: [0.40, 0.80], hull_frac: 0.40 },
        VesselClass { hull_length: 18.0, hull_height: 11.0, color: [0.86, 0.76, 0.12], cabin: [0.25, 0.75], hull_frac: 0.30 },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetVessel {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub hull_length: f64,
    pub hull_height: f64,
    pub class_id: usize,
    pub silhouette_color: [f64; 3],
    pub cabin: [f64; 2],
    pub hull_frac: f64,
}

impl TargetVessel {
    pub fn of_class(class_id: usize, x: f64, y: f64, heading: f64) -> Result<Self> {
        let catalog = vessel_catalog();
        let c = catalog.get(class_id).ok_or_else(|| {
            Error::InvalidArgument(format!("class_id {class_id} outside [0, {}]", catalog.len() - 1))
        })?;
        Ok(Self {
            x,
            y,
            heading,
            hull_length: c.hull_length,
            hull_height: c.hull_height,
            class_id,
            silhouette_color: c.color,
            cabin: c.cabin,
            hull_frac: c.hull_frac,
        })
    }

    /// Whether the normalized billboard point (u across, v down) is solid.
    fn covers(&self, u: f64, v: f64) -> bool {
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return false;
        }
        let hull_top = 1.0 - self.hull_frac;
        if v >= hull_top {
            // bow rake: hull narrows towards the waterline at the right end
            let depth = (v - hull_top) / self.hull_frac.max(1e-9);
            u <= 1.0 - 0.25 * depth
        } else {
            u >= self.cabin[0] && u <= self.cabin[1]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub image_width: usize,
    pub image_height: usize,
    pub focal_px: f64,
    pub mount_height: f64,
    pub far_plane: f64,
}

impl CameraModel {
    /// Camera whose focal length is `focal_frac * image_width`.
    pub fn square(size: usize, focal_frac: f64, mount_height: f64) -> Self {
        Self {
            image_width: size,
            image_height: size,
            focal_px: focal_frac * size as f64,
            mount_height,
            far_plane: 2000.0,
        }
    }

    /// First image row below the horizon.
    pub fn horizon_row(&self) -> usize {
        self.image_height / 2
    }

    pub fn half_fov(&self) -> f64 {
        (self.image_width as f64 / 2.0 / self.focal_px).atan()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_px > 0.0) || !(self.mount_height > 0.0) || !(self.far_plane > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid camera {self:?}")));
        }
        if self.image_width < 8 || self.image_height < 8 {
            return Err(Error::InvalidArgument("camera image smaller than 8x8".into()));
        }
        Ok(())
    }
}

/// Per-pixel scene distance in metres.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub image: ImageBuffer,
    pub depth: DepthMap,
    pub truth_boxes: Vec<(usize, BoundingBox)>,
}

/// Target position in the camera frame: (forward, left) metres.
pub fn camera_frame(usv: &UsvState, tx: f64, ty: f64) -> (f64, f64) {
    let (dx, dy) = (tx - usv.x, ty - usv.y);
    let (s, c) = usv.heading.sin_cos();
    (dx * c + dy * s, -dx * s + dy * c)
}

const NEAR_PLANE: f64 = 1.0;

struct Projected<'a> {
    vessel: &'a TargetVessel,
    forward: f64,
    left: f64,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

fn project<'a>(usv: &UsvState, t: &'a TargetVessel, cam: &CameraModel) -> Option<Projected<'a>> {
    let (forward, left) = camera_frame(usv, t.x, t.y);
    if forward <= NEAR_PLANE {
        return None;
    }
    let f = cam.focal_px;
    let cx = cam.image_width as f64 / 2.0 - f * left / forward;
    let horizon = cam.image_height as f64 / 2.0;
    let waterline = horizon + f * cam.mount_height / forward;
    let top = waterline - f * t.hull_height / forward;
    // apparent length shrinks as the hull turns towards the line of sight
    let los = left.atan2(forward) + usv.heading;
    let aspect = 0.35 + 0.65 * (t.heading - los).sin().abs();
    let half = 0.5 * f * t.hull_length * aspect / forward;
    Some(Projected { vessel: t, forward, left, x0: cx - half, x1: cx + half, y0: top, y1: waterline })
}

fn sky_color(v: f64) -> [f64; 3] {
    // v: 0 at top, 1 at horizon
    let top = [0.42, 0.60, 0.84];
    let horizon = [0.76, 0.84, 0.92];
    [0, 1, 2].map(|c| top[c] + (horizon[c] - top[c]) * v)
}

/// Render the clear scene seen from `usv`.
pub fn render(usv: &UsvState, targets: &[TargetVessel], cam: &CameraModel, seed: u64) -> Result<RenderOutput> {
    cam.validate()?;
    let (w, h) = (cam.image_width, cam.image_height);
    let f = cam.focal_px;
    let (cx0, cy0) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|k| {
            let dir = rng.gen_range(0.0..PI);
            let wavelength = 3.0 + 4.0 * k as f64 + rng.gen_range(0.0..2.0);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let amp = 0.05 / (1.0 + 0.4 * k as f64);
            (dir, 2.0 * PI / wavelength, phase, amp)
        })
        .collect();
    let mut grain = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_9a1e);

    let mut pixels = vec![0.0; w * h * 3];
    let mut depth = vec![cam.far_plane; w * h];
    let (sin_h, cos_h) = usv.heading.sin_cos();
    for y in 0..h {
        let vy = y as f64 + 0.5 - cy0;
        for x in 0..w {
            let ux = x as f64 + 0.5 - cx0;
            let idx = y * w + x;
            let n: f64 = grain.gen_range(-0.01..0.01);
            let rgb = if vy <= 0.0 {
                sky_color((y as f64 + 0.5) / cy0)
            } else {
                let forward = f * cam.mount_height / vy;
                let ray = (1.0 + (ux / f).powi(2) + (vy / f).powi(2)).sqrt();
                let dist = (forward * ray).min(cam.far_plane);
                depth[idx] = dist;
                let lateral = -forward * ux / f;
                let gx = usv.x + forward * cos_h - lateral * sin_h;
                let gy = usv.y + forward * sin_h + lateral * cos_h;
                let fade = (-forward / 120.0).exp();
                let wave: f64 = waves
                    .iter()
                    .map(|&(dir, k, ph, a)| a * (k * (gx * dir.cos() + gy * dir.sin()) + ph).sin())
                    .sum::<f64>()
                    * fade;
                let near = (vy / cy0).min(1.0);
                let base = [0.30 - 0.16 * near, 0.46 - 0.16 * near, 0.58 - 0.14 * near];
                [base[0] + wave + n, base[1] + wave + n, base[2] + 0.8 * wave + n]
            };
            pixels[idx * 3..idx * 3 + 3].copy_from_slice(&rgb);
        }
    }

    // painter's order: far to near; owner tracks the final visible vessel
    let mut projected: Vec<Projected> = targets.iter().filter_map(|t| project(usv, t, cam)).collect();
    projected.sort_by(|a, b| b.forward.total_cmp(&a.forward));
    let mut owner: Vec<Option<usize>> = vec![None; w * h];
    for (pi, p) in projected.iter().enumerate() {
        let (bw, bh) = (p.x1 - p.x0, p.y1 - p.y0);
        let ys = (p.y0.floor().max(0.0) as usize).min(h);
        let ye = (p.y1.ceil().max(0.0) as usize).min(h);
        let xs = (p.x0.floor().max(0.0) as usize).min(w);
        let xe = (p.x1.ceil().max(0.0) as usize).min(w);
        let dist = p.forward.hypot(p.left);
        let mut drawn = 0;
        for y in ys..ye {
            for x in xs..xe {
                let u = (x as f64 + 0.5 - p.x0) / bw;
                let v = (y as f64 + 0.5 - p.y0) / bh;
                if p.vessel.covers(u, v) {
                    paint_vessel(&mut pixels, &mut depth, &mut owner, w, x, y, v, p, pi, dist);
                    drawn += 1;
                }
            }
        }
        if drawn == 0 {
            // sub-pixel silhouette: darken the pixel holding the billboard centre
            let x = ((p.x0 + p.x1) / 2.0).floor();
            let y = ((p.y0 + p.y1) / 2.0).floor();
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                paint_vessel(&mut pixels, &mut depth, &mut owner, w, x as usize, y as usize, 0.9, p, pi, dist);
            }
        }
    }

    let mut extents: Vec<Option<[usize; 4]>> = vec![None; projected.len()];
    for y in 0..h {
        for x in 0..w {
            if let Some(pi) = owner[y * w + x] {
                let e = extents[pi].get_or_insert([x, y, x, y]);
                e[0] = e[0].min(x);
                e[1] = e[1].min(y);
                e[2] = e[2].max(x);
                e[3] = e[3].max(y);
            }
        }
    }
    // report in the caller's target order
    let mut truth_boxes = Vec::new();
    for t in targets {
        if let Some(pi) = projected.iter().position(|p| std::ptr::eq(p.vessel, t)) {
            if let Some([x0, y0, x1, y1]) = extents[pi] {
                let bx = BoundingBox::from_corners(
                    x0 as f64 / w as f64,
                    y0 as f64 / h as f64,
                    (x1 + 1) as f64 / w as f64,
                    (y1 + 1) as f64 / h as f64,
                );
                truth_boxes.push((t.class_id, bx));
            }
        }
    }

    let image = ImageBuffer::new(h, w, pixels.into_iter().map(crate::imaging::clamp01).collect())?;
    Ok(RenderOutput { image, depth: DepthMap { height: h, width: w, data: depth }, truth_boxes })
}

#[allow(clippy::too_many_arguments)]
fn paint_vessel(
    pixels: &mut [f64],
    depth: &mut [f64],
    owner: &mut [Option<usize>],
    w: usize,
    x: usize,
    y: usize,
    v: f64,
    p: &Projected,
    pi: usize,
    dist: f64,
) {
    let idx = y * w + x;
    let hull_top = 1.0 - p.vessel.hull_frac;
    let shade = if v < hull_top { 1.25 } else { 1.0 - 0.2 * (v - hull_top) };
    let c = p.vessel.silhouette_color;
    pixels[idx * 3..idx * 3 + 3].copy_from_slice(&[0, 1, 2].map(|k| (c[k] * shade).min(1.0)));
    depth[idx] = dist;
    owner[idx] = Some(pi);
}

/// Key/value scenario description; every key has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub target_range_m: f64,
    pub bearing_deg: f64,
    pub class_id: usize,
    pub weather: Weather,
    pub seed: u64,
    pub image_size: usize,
    /// Target heading relative to the initial line of sight; 90 is broadside.
    pub target_aspect_deg: f64,
    pub n_classes: usize,
    pub focal_frac: f64,
    pub mount_height_m: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            target_range_m: 200.0,
            bearing_deg: 0.0,
            class_id: 0,
            weather: Weather::Clear,
            seed: 0,
            image_size: 128,
            target_aspect_deg: 90.0,
            n_classes: DEFAULT_CLASSES,
            focal_frac: 0.75,
            mount_height_m: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub usv: UsvState,
    pub targets: Vec<TargetVessel>,
    pub camera: CameraModel,
}

/// Build the initial world: USV at the origin heading along +x, one target at
/// the configured range and bearing (positive bearing is to the left).
pub fn make_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    if cfg.n_classes == 0 || cfg.n_classes > DEFAULT_CLASSES {
        return Err(Error::Config(format!("n_classes {} outside [1, {DEFAULT_CLASSES}]", cfg.n_classes)));
    }
    if cfg.class_id >= cfg.n_classes {
        return Err(Error::Config(format!("class_id {} outside [0, {}]", cfg.class_id, cfg.n_classes - 1)));
    }
    if cfg.image_size < 8 || !cfg.image_size.is_multiple_of(8) {
        return Err(Error::Config(format!("image_size {} must be a multiple of 8", cfg.image_size)));
    }
    if !(cfg.focal_frac > 0.0) || !(cfg.mount_height_m > 0.0) {
        return Err(Error::Config("focal_frac and mount_height_m must be positive".into()));
    }
    let camera = CameraModel::square(cfg.image_size, cfg.focal_frac, cfg.mount_height_m);
    if !(cfg.target_range_m > NEAR_PLANE && cfg.target_range_m < camera.far_plane) {
        return Err(Error::Config(format!(
            "target_range_m {} outside ({NEAR_PLANE}, {})",
            cfg.target_range_m, camera.far_plane
        )));
    }
    let bearing = cfg.bearing_deg.to_radians();
    if bearing.abs() >= camera.half_fov() {
        return Err(Error::Config(format!(
            "bearing_deg {} outside the {:.1} degree half field of view",
            cfg.bearing_deg,
            camera.half_fov().to_degrees()
        )));
    }
    // range is measured along the optical axis so apparent size is f*h/range
    let forward = cfg.target_range_m;
    let left = forward * bearing.tan();
    let heading = wrap_angle(bearing + cfg.target_aspect_deg.to_radians());
    let target = TargetVessel::of_class(cfg.class_id, forward, left, heading)?;
    Ok(Scenario { usv: UsvState::default(), targets: vec![target], camera })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn straight_line_step() {
        let s = UsvState { x: 0.0, y: 0.0, heading: 0.0, speed: 1.0 };
        let n = step_kinematics(&s, 0.0, 1.0, 1.0, &MotionLimits::default());
        assert_eq!(n, UsvState { x: 1.0, y: 0.0, heading: 0.0, speed: 1.0 });
    }

    #[test]
    fn heading_wraps_across_pi() {
        let s = UsvState { heading: PI - 0.1, ..UsvState::default() };
        let n = step_kinematics(&s, 0.2, 0.0, 1.0, &MotionLimits::default());
        assert!((n.heading - (-PI + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn commands_are_clamped() {
        let lim = MotionLimits { v_max: 2.0, omega_max: 0.5 };
        let n = step_kinematics(&UsvState::default(), 3.0, 9.0, 1.0, &lim);
        assert_eq!(n.speed, 2.0);
        assert!((n.heading - 0.5).abs() < 1e-12);
        let n = step_kinematics(&UsvState::default(), 0.0, -1.0, 1.0, &lim);
        assert_eq!(n.speed, 0.0);
    }

    #[test]
    fn default_scenario_has_one_target_200m_ahead() {
        let sc = make_scenario(&ScenarioConfig::default()).unwrap();
        assert_eq!(sc.targets.len(), 1);
        assert!((sc.targets[0].x - 200.0).abs() < 1e-12);
        assert!(sc.targets[0].y.abs() < 1e-12);
    }

    #[test]
    fn scenario_validation() {
        let bad_class = ScenarioConfig { class_id: 7, ..Default::default() };
        assert!(make_scenario(&bad_class).is_err());
        let bad_range = ScenarioConfig { target_range_m: -5.0, ..Default::default() };
        assert!(make_scenario(&bad_range).is_err());
        let bad_bearing = ScenarioConfig { bearing_deg: 60.0, ..Default::default() };
        assert!(make_scenario(&bad_bearing).is_err());
    }

    #[test]
    fn empty_scene_has_no_boxes_and_far_sky() {
        let cam = CameraModel::square(64, 0.75, 3.0);
        let out = render(&UsvState::default(), &[], &cam, 1).unwrap();
        assert!(out.truth_boxes.is_empty());
        assert!(out.depth.data.iter().all(|&d| d > 0.0));
        assert_eq!(out.depth.at(0, 10), cam.far_plane);
        assert!(out.depth.at(63, 10) < 10.0);
    }

    #[test]
    fn target_behind_camera_is_omitted() {
        let cam = CameraModel::square(64, 0.75, 3.0);
        let t = TargetVessel::of_class(0, -50.0, 0.0, 0.0).unwrap();
        let out = render(&UsvState::default(), &[t], &cam, 1).unwrap();
        assert!(out.truth_boxes.is_empty());
    }

    #[test]
    fn occluded_target_gets_no_box() {
        let cam = CameraModel::square(64, 0.75, 3.0);
        let near = TargetVessel::of_class(3, 25.0, 0.0, PI / 2.0).unwrap();
        let far = TargetVessel::of_class(2, 120.0, 0.0, PI / 2.0).unwrap();
        let out = render(&UsvState::default(), &[far, near], &cam, 1).unwrap();
        assert_eq!(out.truth_boxes.len(), 1);
        assert_eq!(out.truth_boxes[0].0, 3);
    }
}
