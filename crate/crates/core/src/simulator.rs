//! Synthetic worlds with exact ground truth.
//!
//! A camera drives a planar path made of constant-speed, constant-yaw-rate
//! segments. Static landmarks are scattered in front of the path and
//! rigid clusters of moving landmarks appear and disappear along it. Every
//! frame yields noisy stereo tracks, a rendered left image and, depending on
//! the requested density, a ground-truth position.
//!
//! The world frame is the camera frame of the first image: x right, y down,
//! z forward. Gravity therefore points along +y.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_dataset, Dataset, Frame, Observation, TimedImu};
use crate::error::{Error, Result};
use crate::geometry::{axis_angle_matrix, ImagePoint, ImuSample, Point3, Pose, RigCalibration, StereoCamera};
use crate::image::{from_f64, gaussian_blur_f64, GrayImage};
use crate::predictors::{blur_metric_with, flow_variance_score, image_terms_at, imu_magnitudes, FlowVector, ImuMagnitudes, PredictorConfig, PredictorVector};
use crate::seeds;

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSpec {
    pub f: f64,
    pub b: f64,
    pub cu: f64,
    pub cv: f64,
    pub image_width: u32,
    pub image_height: u32,
    /// IMU-to-camera rotation, row-major.
    pub c_cv: [f64; 9],
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            f: 400.0,
            b: 0.5,
            cu: 320.0,
            cv: 240.0,
            image_width: 640,
            image_height: 480,
            // IMU x forward, y left, z up
            c_cv: [0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0],
        }
    }
}

impl CameraSpec {
    pub fn camera(&self) -> Result<StereoCamera> {
        StereoCamera::new(self.f, self.b, self.cu, self.cv, self.image_width, self.image_height)
    }

    pub fn rig(&self) -> Result<RigCalibration> {
        RigCalibration::new(Matrix3::from_row_slice(&self.c_cv))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StaticSpec {
    pub count: usize,
    /// Depth range (m) in front of the camera at the moment each landmark
    /// is placed.
    pub depth: [f64; 2],
    /// Keep placed landmarks this far (px) from the image border.
    pub margin_px: f64,
}

impl Default for StaticSpec {
    fn default() -> Self {
        Self {
            count: 400,
            depth: [3.0, 12.0],
            margin_px: 8.0,
        }
    }
}

/// A rigid cluster of landmarks moving at constant velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MovingCluster {
    pub count: usize,
    /// World-frame velocity (m/s).
    pub velocity: [f64; 3],
    /// Cluster centre in the camera frame at the moment it appears (m).
    pub offset: [f64; 3],
    /// Full side lengths of the box the points are drawn from (m).
    pub extent: [f64; 3],
    /// First appearance (s from the start).
    pub appear: f64,
    /// How long each appearance lasts (s).
    pub duration: f64,
    /// Period of reappearance. Every appearance is a fresh set of points
    /// with fresh track ids.
    pub repeat_every: Option<f64>,
}

impl Default for MovingCluster {
    fn default() -> Self {
        Self {
            count: 30,
            velocity: [0.6, 0.0, 0.0],
            offset: [-0.5, 0.0, 5.5],
            extent: [2.0, 1.5, 1.5],
            appear: 0.0,
            duration: f64::INFINITY,
            repeat_every: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub static_landmarks: StaticSpec,
    pub moving: Vec<MovingCluster>,
    /// Landmarks outside this depth window (m) are not observed.
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            static_landmarks: StaticSpec::default(),
            moving: Vec::new(),
            min_depth: 0.5,
            max_depth: 40.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub duration: f64,
    /// Forward speed (m/s).
    pub speed: f64,
    /// Rate of turn about the camera's vertical axis (rad/s).
    pub yaw_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PathSpec {
    Line { speed: f64 },
    Arc { speed: f64, yaw_rate: f64 },
    /// One full circle that ends where it started.
    Loop { speed: f64 },
    /// Piecewise path. The last segment is extended if the sequence
    /// outlasts it.
    Segments { segments: Vec<Segment> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySpec {
    pub frames: usize,
    pub frame_rate: f64,
    pub imu_rate: f64,
    pub path: PathSpec,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            frames: 100,
            frame_rate: 10.0,
            imu_rate: 200.0,
            path: PathSpec::Line { speed: 1.0 },
        }
    }
}

impl TrajectorySpec {
    /// Time of the last frame.
    pub fn duration(&self) -> f64 {
        (self.frames.saturating_sub(1)) as f64 / self.frame_rate
    }

    fn segments(&self) -> Vec<Segment> {
        let forever = f64::INFINITY;
        match &self.path {
            PathSpec::Line { speed } => vec![Segment {
                duration: forever,
                speed: *speed,
                yaw_rate: 0.0,
            }],
            PathSpec::Arc { speed, yaw_rate } => vec![Segment {
                duration: forever,
                speed: *speed,
                yaw_rate: *yaw_rate,
            }],
            PathSpec::Loop { speed } => vec![Segment {
                duration: forever,
                speed: *speed,
                yaw_rate: 2.0 * std::f64::consts::PI / self.duration(),
            }],
            PathSpec::Segments { segments } => {
                let mut s = segments.clone();
                if let Some(last) = s.last_mut() {
                    last.duration = forever;
                }
                s
            }
        }
    }
}

/// Per-frame blur level in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BlurSchedule {
    #[default]
    None,
    Constant { level: f64 },
    /// `high` for the first half of every `period` frames, `low` after.
    Alternating { low: f64, high: f64, period: usize },
    /// Each frame independently `high` with probability `p_high`.
    Random { low: f64, high: f64, p_high: f64 },
    /// Explicit levels, repeated if shorter than the sequence.
    List { levels: Vec<f64> },
}

impl BlurSchedule {
    pub fn levels(&self, frames: usize, seed: u64) -> Vec<f64> {
        match self {
            BlurSchedule::None => vec![0.0; frames],
            BlurSchedule::Constant { level } => vec![*level; frames],
            BlurSchedule::Alternating { low, high, period } => (0..frames)
                .map(|k| if k % period < period.div_ceil(2) { *high } else { *low })
                .collect(),
            BlurSchedule::Random { low, high, p_high } => {
                let mut rng = seeds::stream(seed, "blur", 0);
                (0..frames).map(|_| if rng.random::<f64>() < *p_high { *high } else { *low }).collect()
            }
            BlurSchedule::List { levels } => (0..frames).map(|k| levels[k % levels.len()]).collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = match self {
            BlurSchedule::None => true,
            BlurSchedule::Constant { level } => in_unit(*level),
            BlurSchedule::Alternating { low, high, period } => in_unit(*low) && in_unit(*high) && *period > 0,
            BlurSchedule::Random { low, high, p_high } => in_unit(*low) && in_unit(*high) && in_unit(*p_high),
            BlurSchedule::List { levels } => !levels.is_empty() && levels.iter().all(|v| in_unit(*v)),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter("blur levels and probabilities must lie in [0, 1]".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub sigma_px: f64,
    pub gyro_sigma: f64,
    pub gyro_bias: [f64; 3],
    pub accel_sigma: f64,
    pub outlier_probability: f64,
    /// Range of the displacement (px) applied to a gross outlier.
    pub outlier_magnitude: [f64; 2],
    pub blur: BlurSchedule,
    /// Pixel noise is `sigma_px * (1 + blur_gain * blur)`.
    pub blur_gain: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            sigma_px: 0.5,
            gyro_sigma: 0.0,
            gyro_bias: [0.0; 3],
            accel_sigma: 0.0,
            outlier_probability: 0.0,
            outlier_magnitude: [20.0, 50.0],
            blur: BlurSchedule::None,
            blur_gain: 3.0,
        }
    }
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        Self {
            sigma_px: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSpec {
    pub enabled: bool,
    /// Patches are `2 * patch_half + 1` pixels square.
    pub patch_half: u32,
    /// Texture amplitude, as a fraction of full range, for each label.
    pub static_contrast: f64,
    pub moving_contrast: f64,
    /// Standard deviation of the background texture (grey levels).
    pub background_noise: f64,
    /// Gaussian blur sigma (px) at blur level 1.
    pub blur_sigma_max: f64,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            patch_half: 6,
            static_contrast: 0.8,
            moving_contrast: 0.05,
            background_noise: 3.0,
            blur_sigma_max: 3.0,
        }
    }
}

/// Which frames carry a ground-truth position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GroundTruthDensity {
    #[default]
    Every,
    EveryNth { n: usize },
    Endpoints,
    None,
}

impl GroundTruthDensity {
    fn includes(&self, k: usize, frames: usize) -> bool {
        match *self {
            GroundTruthDensity::Every => true,
            GroundTruthDensity::EveryNth { n } => k % n == 0 || k + 1 == frames,
            GroundTruthDensity::Endpoints => k == 0 || k + 1 == frames,
            GroundTruthDensity::None => false,
        }
    }
}

/// Everything needed to generate one dataset. In JSON the `world`,
/// `trajectory` and `noise` sections are required and everything else
/// falls back to defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub camera: CameraSpec,
    pub world: WorldSpec,
    pub trajectory: TrajectorySpec,
    pub noise: NoiseSpec,
    #[serde(default)]
    pub render: RenderSpec,
    #[serde(default)]
    pub groundtruth: GroundTruthDensity,
}

fn check(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidParameter(msg.into()))
    }
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        self.camera.camera()?;
        self.camera.rig()?;
        let t = &self.trajectory;
        check(t.frames >= 2, "trajectory needs at least two frames")?;
        check(t.frame_rate > 0.0 && t.frame_rate.is_finite(), "frame_rate must be positive")?;
        check(t.imu_rate >= t.frame_rate && t.imu_rate.is_finite(), "imu_rate must be at least frame_rate")?;
        match &t.path {
            PathSpec::Line { speed } | PathSpec::Loop { speed } => check(speed.is_finite(), "speed must be finite")?,
            PathSpec::Arc { speed, yaw_rate } => check(speed.is_finite() && yaw_rate.is_finite(), "arc parameters must be finite")?,
            PathSpec::Segments { segments } => {
                check(!segments.is_empty(), "segment list is empty")?;
                for s in segments {
                    check(s.duration > 0.0 && s.speed.is_finite() && s.yaw_rate.is_finite(), "segments need positive duration and finite rates")?;
                }
            }
        }
        let w = &self.world;
        check(w.static_landmarks.count > 0 || !w.moving.is_empty(), "world has no landmarks")?;
        let [d0, d1] = w.static_landmarks.depth;
        check(d0 > 0.0 && d1 > d0, "static depth range must be increasing and positive")?;
        check(w.static_landmarks.margin_px >= 0.0, "margin must be non-negative")?;
        check(w.min_depth > 0.0 && w.max_depth > w.min_depth, "visibility depth window is empty")?;
        for c in &w.moving {
            check(c.count > 0, "moving cluster needs landmarks")?;
            check(c.offset[2] > 0.0, "moving cluster must start in front of the camera")?;
            check(c.extent.iter().all(|e| *e >= 0.0), "cluster extent must be non-negative")?;
            check(c.duration > 0.0 && c.appear.is_finite(), "cluster timing invalid")?;
            if let Some(r) = c.repeat_every {
                check(r > 0.0, "repeat_every must be positive")?;
            }
        }
        let n = &self.noise;
        check(n.sigma_px >= 0.0 && n.gyro_sigma >= 0.0 && n.accel_sigma >= 0.0 && n.blur_gain >= 0.0, "noise levels must be non-negative")?;
        check((0.0..=1.0).contains(&n.outlier_probability), "outlier probability must lie in [0, 1]")?;
        check(n.outlier_magnitude[0] >= 0.0 && n.outlier_magnitude[1] >= n.outlier_magnitude[0], "outlier magnitude range invalid")?;
        n.blur.validate()?;
        if let GroundTruthDensity::EveryNth { n } = self.groundtruth {
            check(n > 0, "ground-truth stride must be positive")?;
        }
        check(self.render.blur_sigma_max >= 0.0 && self.render.background_noise >= 0.0, "render parameters must be non-negative")?;
        Ok(())
    }
}

/// Closed-form camera state along a planar path.
#[derive(Debug, Clone)]
pub struct Kinematics {
    segments: Vec<Segment>,
}

/// Camera state at one instant, in the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraState {
    pub yaw: f64,
    pub position: Point3,
    pub acceleration: Vector3<f64>,
}

impl CameraState {
    /// World-to-camera pose.
    pub fn pose(&self) -> Pose {
        Pose {
            rotation: axis_angle_matrix(&Vector3::new(0.0, self.yaw, 0.0)),
            translation: self.position,
        }
    }
}

fn heading(yaw: f64) -> Vector3<f64> {
    Vector3::new(yaw.sin(), 0.0, yaw.cos())
}

fn advance(yaw: f64, position: Point3, seg: &Segment, tau: f64) -> CameraState {
    let (v, w) = (seg.speed, seg.yaw_rate);
    let yaw_t = yaw + w * tau;
    let position_t = if w == 0.0 {
        position + v * tau * heading(yaw)
    } else {
        position + (v / w) * Vector3::new(yaw.cos() - yaw_t.cos(), 0.0, yaw_t.sin() - yaw.sin())
    };
    CameraState {
        yaw: yaw_t,
        position: position_t,
        acceleration: v * w * Vector3::new(yaw_t.cos(), 0.0, -yaw_t.sin()),
    }
}

impl Kinematics {
    pub fn new(traj: &TrajectorySpec) -> Self {
        Self { segments: traj.segments() }
    }

    pub fn state(&self, t: f64) -> CameraState {
        let (mut yaw, mut position, mut start) = (0.0, Point3::zeros(), 0.0);
        for (i, seg) in self.segments.iter().enumerate() {
            let end = start + seg.duration;
            if t < end || i + 1 == self.segments.len() {
                return advance(yaw, position, seg, t - start);
            }
            let s = advance(yaw, position, seg, seg.duration);
            (yaw, position, start) = (s.yaw, s.position, end);
        }
        unreachable!("segment list is never empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Static,
    Moving,
    Outlier,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Static => "static",
            Label::Moving => "moving",
            Label::Outlier => "outlier",
        }
    }
}

#[derive(Debug, Clone)]
struct Landmark {
    id: u64,
    position: Point3,
    velocity: Vector3<f64>,
    /// Visible during `[from, until)`.
    from: f64,
    until: f64,
    moving: bool,
}

impl Landmark {
    fn at(&self, t: f64) -> Option<Point3> {
        if !self.moving {
            return Some(self.position);
        }
        (t >= self.from - 1e-12 && t < self.until).then(|| self.position + self.velocity * (t - self.from))
    }
}

/// Generated dataset plus everything only the simulator knows.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub dataset: Dataset,
    pub labels: BTreeMap<(usize, u64), Label>,
    /// Exact world-to-camera pose of every frame.
    pub poses: Vec<Pose>,
    pub blur_levels: Vec<f64>,
    /// Noise-free image point of every observation.
    pub clean: BTreeMap<(usize, u64), ImagePoint>,
}

impl SimOutput {
    pub fn label(&self, frame: usize, track: u64) -> Option<Label> {
        self.labels.get(&(frame, track)).copied()
    }

    pub fn positions(&self) -> Vec<Point3> {
        self.poses.iter().map(|p| p.translation).collect()
    }
}

fn sample_landmarks(spec: &SimSpec, kin: &Kinematics) -> Vec<Landmark> {
    let cam = &spec.camera;
    let duration = spec.trajectory.duration();
    let st = &spec.world.static_landmarks;
    let mut rng = seeds::stream(spec.seed, "static", 0);
    let mut out = Vec::new();
    let to_world = |t: f64, p_c: Point3| {
        let pose = kin.state(t).pose();
        pose.rotation.transpose() * p_c + pose.translation
    };
    for i in 0..st.count {
        let t = rng.random::<f64>() * duration;
        let u = st.margin_px + rng.random::<f64>() * (cam.image_width as f64 - 2.0 * st.margin_px);
        let v = st.margin_px + rng.random::<f64>() * (cam.image_height as f64 - 2.0 * st.margin_px);
        let z = st.depth[0] + rng.random::<f64>() * (st.depth[1] - st.depth[0]);
        let p_c = Point3::new((u - cam.cu) * z / cam.f, (v - cam.cv) * z / cam.f, z);
        out.push(Landmark {
            id: i as u64,
            position: to_world(t, p_c),
            velocity: Vector3::zeros(),
            from: f64::NEG_INFINITY,
            until: f64::INFINITY,
            moving: false,
        });
    }

    let mut next_id = st.count as u64;
    for (c, cluster) in spec.world.moving.iter().enumerate() {
        let mut appearance = 0;
        loop {
            let start = cluster.appear + appearance as f64 * cluster.repeat_every.unwrap_or(0.0);
            if start > duration || (appearance > 0 && cluster.repeat_every.is_none()) {
                break;
            }
            let mut rng = seeds::stream(spec.seed, &format!("moving/{c}"), appearance);
            let centre = Vector3::from(cluster.offset);
            for _ in 0..cluster.count {
                let jitter = Vector3::from_fn(|i, _| (rng.random::<f64>() - 0.5) * cluster.extent[i]);
                out.push(Landmark {
                    id: next_id,
                    position: to_world(start, centre + jitter),
                    velocity: Vector3::from(cluster.velocity),
                    from: start,
                    until: start + cluster.duration,
                    moving: true,
                });
                next_id += 1;
            }
            appearance += 1;
        }
    }
    out
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn imu_stream(spec: &SimSpec, kin: &Kinematics, rig: &RigCalibration) -> Vec<TimedImu> {
    let dt = 1.0 / spec.trajectory.imu_rate;
    let n = (spec.trajectory.duration() * spec.trajectory.imu_rate).round() as usize + 1;
    let gravity = Vector3::new(0.0, GRAVITY, 0.0);
    let bias = Vector3::from(spec.noise.gyro_bias);
    let mut rng = seeds::stream(spec.seed, "imu", 0);
    let mut noise = |sigma: f64| Vector3::from_fn(|_, _| sigma * gauss(&mut rng));
    (0..n)
        .map(|j| {
            let t = j as f64 * dt;
            let (s0, s1) = (kin.state(t), kin.state(t + dt));
            // the mean rate over the tick integrates exactly to the yaw change
            let omega_c = Vector3::new(0.0, (s1.yaw - s0.yaw) / dt, 0.0);
            let specific_force = s0.pose().rotation * (s0.acceleration - gravity);
            TimedImu {
                t,
                sample: ImuSample {
                    omega: rig.c_cv.transpose() * omega_c + bias + noise(spec.noise.gyro_sigma),
                    accel: rig.c_cv.transpose() * specific_force + noise(spec.noise.accel_sigma),
                    dt,
                },
            }
        })
        .collect()
}

/// Draws the left image of one frame: a faint background texture with a
/// textured square at every observed feature, blurred by the frame's level.
pub fn render_patches(frame: &Frame, labels: &BTreeMap<(usize, u64), Label>, blur: f64, camera: &StereoCamera, render: &RenderSpec, seed: u64) -> GrayImage {
    let (w, h) = (camera.image_width as usize, camera.image_height as usize);
    let mut bg = seeds::stream(seed, "background", frame.index as u64);
    let mut data: Vec<f64> = (0..w * h)
        .map(|_| {
            128.0 + render.background_noise * gauss(&mut bg)
        })
        .collect();
    let half = render.patch_half as i64;
    for obs in &frame.observations {
        let contrast = match labels.get(&(frame.index, obs.track_id)) {
            Some(Label::Moving) => render.moving_contrast,
            _ => render.static_contrast,
        };
        // the same landmark wears the same texture in every frame
        let mut tex = seeds::stream(seed, "texture", obs.track_id);
        let (cx, cy) = (obs.point.ul.round() as i64, obs.point.vl.round() as i64);
        for dy in -half..=half {
            for dx in -half..=half {
                let value = 128.0 + contrast * 127.0 * (2.0 * tex.random::<f64>() - 1.0);
                let (x, y) = (cx + dx, cy + dy);
                if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                    data[y as usize * w + x as usize] = value;
                }
            }
        }
    }
    let blurred = gaussian_blur_f64(w, h, &data, blur * render.blur_sigma_max);
    from_f64(camera.image_width, camera.image_height, &blurred)
}

/// Generates the dataset described by `spec`.
pub fn generate(spec: &SimSpec) -> Result<SimOutput> {
    spec.validate()?;
    let camera = spec.camera.camera()?;
    let rig = spec.camera.rig()?;
    let traj = &spec.trajectory;
    let kin = Kinematics::new(traj);
    let landmarks = sample_landmarks(spec, &kin);
    let blur_levels = spec.noise.blur.levels(traj.frames, spec.seed);
    let min_disparity = 0.5;

    let mut frames = Vec::with_capacity(traj.frames);
    let mut poses = Vec::with_capacity(traj.frames);
    let mut labels = BTreeMap::new();
    let mut clean = BTreeMap::new();
    for k in 0..traj.frames {
        let t = k as f64 / traj.frame_rate;
        let pose = kin.state(t).pose();
        let sigma = spec.noise.sigma_px * (1.0 + spec.noise.blur_gain * blur_levels[k]);
        let mut rng = seeds::stream(spec.seed, "pixels", k as u64);
        let mut observations = Vec::new();
        for lm in &landmarks {
            let Some(p_w) = lm.at(t) else { continue };
            let p_c = pose.transform_point(&p_w);
            if p_c.z < spec.world.min_depth || p_c.z > spec.world.max_depth {
                continue;
            }
            let exact = camera.project(&p_c)?;
            if !camera.contains(&exact) {
                continue;
            }
            let mut n = || sigma * gauss(&mut rng);
            let mut y = ImagePoint::new(exact.ul + n(), exact.vl + n(), exact.ur + n(), exact.vr + n());
            let mut label = if lm.moving { Label::Moving } else { Label::Static };
            if spec.noise.outlier_probability > 0.0 && rng.random::<f64>() < spec.noise.outlier_probability {
                let [lo, hi] = spec.noise.outlier_magnitude;
                let m = lo + rng.random::<f64>() * (hi - lo);
                let phi = rng.random::<f64>() * std::f64::consts::TAU;
                let (du, dv) = (m * phi.cos(), m * phi.sin());
                y = ImagePoint::new(y.ul + du, y.vl + dv, y.ur + du, y.vr + dv);
                label = Label::Outlier;
            }
            if !camera.contains(&y) || y.disparity() < min_disparity {
                continue;
            }
            observations.push(Observation { track_id: lm.id, point: y });
            labels.insert((k, lm.id), label);
            clean.insert((k, lm.id), exact);
        }
        if observations.is_empty() {
            return Err(Error::NoVisibleLandmarks { frame: k });
        }
        observations.sort_by_key(|o| o.track_id);
        frames.push(Frame {
            index: k,
            t,
            observations,
            image: None,
            image_terms: BTreeMap::new(),
        });
        poses.push(pose);
    }

    if spec.render.enabled {
        for (k, frame) in frames.iter_mut().enumerate() {
            frame.image = Some(render_patches(frame, &labels, blur_levels[k], &camera, &spec.render, spec.seed));
        }
    }

    let groundtruth = match spec.groundtruth {
        GroundTruthDensity::None => None,
        density => Some(
            poses
                .iter()
                .enumerate()
                .map(|(k, p)| density.includes(k, traj.frames).then_some(p.translation))
                .collect(),
        ),
    };

    let dataset = Dataset {
        name: if spec.name.is_empty() { "simulated".into() } else { spec.name.clone() },
        camera,
        rig,
        frame_rate: traj.frame_rate,
        t0: 0.0,
        // the estimator needs a positive pixel sigma even for noiseless data
        sigma_px: if spec.noise.sigma_px > 0.0 { spec.noise.sigma_px } else { 0.5 },
        frames,
        imu: imu_stream(spec, &kin, &rig),
        groundtruth,
    };
    Ok(SimOutput {
        dataset,
        labels,
        poses,
        blur_levels,
        clean,
    })
}

/// Full predictor vector for every observation, computed from the rendered
/// images. The first frame has no predecessor, so its IMU and flow terms
/// are zero.
pub fn predictor_table(dataset: &Dataset, cfg: &PredictorConfig) -> Result<BTreeMap<(usize, u64), PredictorVector>> {
    let mut out = BTreeMap::new();
    for (k, frame) in dataset.frames.iter().enumerate() {
        let image = frame
            .image
            .as_ref()
            .ok_or_else(|| Error::Dataset(format!("frame {k} has no image to compute predictors from")))?;
        let blur = blur_metric_with(image, cfg.blur_kernel)?;
        let (imu, flows) = if k == 0 {
            (ImuMagnitudes::default(), Vec::new())
        } else {
            let prev = &dataset.frames[k - 1];
            let window = dataset.imu_window(prev.t, frame.t);
            let imu = if window.is_empty() { ImuMagnitudes::default() } else { imu_magnitudes(&window)? };
            let flows: Vec<FlowVector> = frame
                .observations
                .iter()
                .filter_map(|o| {
                    let i = prev.observations.binary_search_by_key(&o.track_id, |p| p.track_id).ok()?;
                    let before = prev.observations[i].point;
                    Some(FlowVector {
                        position: Vector2::new(o.point.ul, o.point.vl),
                        flow: Vector2::new(o.point.ul - before.ul, o.point.vl - before.vl),
                    })
                })
                .collect();
            (imu, flows)
        };
        for o in &frame.observations {
            let terms = image_terms_at(image, blur, o.point.ul, o.point.vl, cfg)?;
            let flow = flow_variance_score(&flows, &Vector2::new(o.point.ul, o.point.vl), cfg).score;
            out.insert((k, o.track_id), PredictorVector::assemble(imu, terms, flow));
        }
    }
    Ok(out)
}

/// Writes the simulation in the dataset layout plus `labels.csv` and
/// `poses_gt.csv`. With `images = false` the rendered images are replaced
/// by `predictors.csv`.
pub fn write_simulation(dir: &Path, out: &SimOutput, images: bool, cfg: &PredictorConfig) -> Result<()> {
    if images || !out.dataset.has_images() {
        write_dataset(dir, &out.dataset, None)?;
    } else {
        let table = predictor_table(&out.dataset, cfg)?;
        let mut stripped = out.dataset.clone();
        stripped.frames.iter_mut().for_each(|f| f.image = None);
        write_dataset(dir, &stripped, Some(&table))?;
    }

    let path = dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
    w.write_record(["frame_idx", "track_id", "label"]).map_err(|e| Error::csv(&path, e))?;
    for (&(frame, track), label) in &out.labels {
        w.write_record([frame.to_string(), track.to_string(), label.as_str().to_string()])
            .map_err(|e| Error::csv(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("poses_gt.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
    let mut header = vec!["t".to_string(), "x".into(), "y".into(), "z".into()];
    header.extend((0..9).map(|i| format!("r{}{}", i / 3, i % 3)));
    w.write_record(&header).map_err(|e| Error::csv(&path, e))?;
    for (k, pose) in out.poses.iter().enumerate() {
        let mut row = vec![out.dataset.frame_time(k), pose.translation.x, pose.translation.y, pose.translation.z];
        for r in 0..3 {
            for c in 0..3 {
                row.push(pose.rotation[(r, c)]);
            }
        }
        w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| Error::csv(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Reads a simulation spec from JSON.
pub fn read_spec(path: &Path) -> Result<SimSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: SimSpec = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    spec.validate()?;
    Ok(spec)
}
