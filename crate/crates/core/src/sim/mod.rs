//! Deterministic scenario generator: ground-truth trajectories, IMU
//! streams, and noisy relative object-pose measurements with a known
//! heteroscedastic noise law.
//!
//! The measurement model stands in for a camera plus pose-regression
//! network: per-axis noise grows affinely with the distance to the object
//! (`σ = a + b·d`, scaled per axis), optional bearing sectors occlude an
//! object entirely, and outliers are drawn as scale mixtures of the same
//! Gaussian. Everything is a pure function of `(spec, profile, seed)`.

pub mod dataset;
pub mod trajectory;

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{DiagCov3, GeometryError, Pose, UnitQuat};

pub use dataset::{generate_dataset, Dataset};
pub use trajectory::{generate_trajectory, KinematicState, TrajectoryModel};

/// World-frame gravity, z up.
pub const GRAVITY: f64 = 9.81;

/// Reference object diameter used for the apparent-size feature.
pub const APPARENT_SIZE_M: f64 = 0.3;

/// Floor applied to every generated measurement sigma so that downstream
/// covariances stay positive definite even for "noise-free" profiles.
pub const MIN_SIGMA: f64 = 1e-9;

pub fn gravity_vector() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -GRAVITY)
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid trajectory spec: {0}")]
    InvalidSpec(String),
    #[error("invalid object layout: {0}")]
    InvalidLayout(String),
    #[error("invalid noise profile: {0}")]
    InvalidProfile(String),
    #[error("geometry error: {0}")]
    Geometry(#[from] GeometryError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed dataset file {file}: {reason}")]
    Malformed { file: String, reason: String },
}

/// Orbit-style trajectory description. The camera rig circles the layout
/// centroid while yawing to face it; radius and height both follow
/// sinusoids at `height_frequency_hz` (in quadrature), the azimuth sweeps
/// `angular_span_deg` at a constant rate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub duration_s: f64,
    pub imu_rate_hz: f64,
    pub cam_rate_hz: f64,
    pub radius_min_m: f64,
    pub radius_max_m: f64,
    pub height_amplitude_m: f64,
    pub height_frequency_hz: f64,
    #[serde(default = "default_base_height")]
    pub base_height_m: f64,
    pub angular_span_deg: f64,
    pub seed: u64,
}

fn default_base_height() -> f64 {
    1.0
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec {
            duration_s: 60.0,
            imu_rate_hz: 200.0,
            cam_rate_hz: 15.0,
            radius_min_m: 2.7,
            radius_max_m: 3.4,
            height_amplitude_m: 0.2,
            height_frequency_hz: 0.05,
            base_height_m: 1.0,
            angular_span_deg: 360.0,
            seed: 0,
        }
    }
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.duration_s <= 0.0 || self.duration_s.is_nan() {
            return Err(SimError::InvalidSpec("duration must be positive".into()));
        }
        if !(self.imu_rate_hz > self.cam_rate_hz && self.cam_rate_hz > 0.0) {
            return Err(SimError::InvalidSpec(
                "rates must satisfy imu_rate > cam_rate > 0".into(),
            ));
        }
        if !(self.radius_min_m > 0.0 && self.radius_min_m <= self.radius_max_m) {
            return Err(SimError::InvalidSpec(
                "radius range must satisfy 0 < min <= max".into(),
            ));
        }
        if self.height_amplitude_m < 0.0 {
            return Err(SimError::InvalidSpec(
                "height amplitude must be >= 0".into(),
            ));
        }
        if self.height_frequency_hz < 0.0 {
            return Err(SimError::InvalidSpec(
                "height frequency must be >= 0".into(),
            ));
        }
        if self.height_frequency_hz == 0.0 && self.radius_min_m != self.radius_max_m {
            return Err(SimError::InvalidSpec(
                "a radius range needs a nonzero sweep frequency".into(),
            ));
        }
        let vals = [
            self.duration_s,
            self.imu_rate_hz,
            self.cam_rate_hz,
            self.radius_min_m,
            self.radius_max_m,
            self.height_amplitude_m,
            self.height_frequency_hz,
            self.base_height_m,
            self.angular_span_deg,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(SimError::InvalidSpec(
                "all spec values must be finite".into(),
            ));
        }
        Ok(())
    }

    pub fn imu_dt(&self) -> f64 {
        1.0 / self.imu_rate_hz
    }

    pub fn num_imu_samples(&self) -> usize {
        (self.duration_s * self.imu_rate_hz).round() as usize
    }

    pub fn num_cam_epochs(&self) -> usize {
        (self.duration_s * self.cam_rate_hz).round() as usize
    }

    /// Camera epochs snapped to the IMU grid so that measurement updates
    /// always coincide with a propagation boundary. Returns IMU sample
    /// indices into the truth grid.
    pub fn cam_epoch_indices(&self) -> Vec<usize> {
        let ratio = self.imu_rate_hz / self.cam_rate_hz;
        let n_imu = self.num_imu_samples();
        let mut out = Vec::with_capacity(self.num_cam_epochs());
        for j in 0..self.num_cam_epochs() {
            let idx = (j as f64 * ratio).round() as usize;
            if idx <= n_imu {
                out.push(idx);
            }
        }
        out.dedup();
        out
    }
}

/// A known object: its id and true pose in the world (`T_WO`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: u32,
    pub pose: Pose,
}

/// The object constellation plus the designated initial anchor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObjectLayout {
    pub objects: Vec<ObjectSpec>,
    pub anchor_id: u32,
}

impl ObjectLayout {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.objects.is_empty() {
            return Err(SimError::InvalidLayout(
                "layout needs at least one object".into(),
            ));
        }
        let mut ids: Vec<u32> = self.objects.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.objects.len() {
            return Err(SimError::InvalidLayout("object ids must be unique".into()));
        }
        if !self.objects.iter().any(|o| o.id == self.anchor_id) {
            return Err(SimError::InvalidLayout(format!(
                "anchor id {} not present in layout",
                self.anchor_id
            )));
        }
        Ok(())
    }

    /// Horizontal centroid of the object positions; the orbit center.
    pub fn centroid_xy(&self) -> (f64, f64) {
        let n = self.objects.len() as f64;
        let sum = self.objects.iter().fold((0.0, 0.0), |acc, o| {
            (acc.0 + o.pose.translation.x, acc.1 + o.pose.translation.y)
        });
        (sum.0 / n, sum.1 / n)
    }

    pub fn get(&self, id: u32) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Three objects spread around a central pole, anchor 0.
    pub fn default_pole() -> Self {
        let rot = |yaw: f64| UnitQuat::from_scaled_axis(&Vector3::new(0.0, 0.0, yaw));
        ObjectLayout {
            objects: vec![
                ObjectSpec {
                    id: 0,
                    pose: Pose::new(Vector3::new(0.0, 0.35, 1.0), rot(0.5)),
                },
                ObjectSpec {
                    id: 1,
                    pose: Pose::new(Vector3::new(-0.30, -0.18, 1.35), rot(2.6)),
                },
                ObjectSpec {
                    id: 2,
                    pose: Pose::new(Vector3::new(0.30, -0.18, 0.65), rot(-1.7)),
                },
            ],
            anchor_id: 0,
        }
    }
}

/// Per-object outlier override, replacing the profile-wide settings.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OutlierOverride {
    pub prob: f64,
    pub scale: f64,
}

/// Time-correlated outlier bursts: windows drawn as a Poisson process per
/// object, inside which outliers are drawn with elevated probability.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BurstConfig {
    pub rate_hz: f64,
    pub duration_s: f64,
    pub outlier_prob: f64,
    pub outlier_scale: f64,
}

/// Viewing-geometry-driven degradation: beyond `distance_m` the noise law
/// inflates by `sigma_scale` and outliers spike. Since an orbiting camera
/// crosses each object's far zone in contiguous arcs, this produces
/// time-correlated outlier bursts that are visible in the features (the
/// distance), the way viewpoint ambiguity degrades a real pose regressor.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FarDegradation {
    pub distance_m: f64,
    pub sigma_scale: f64,
    pub outlier_prob: f64,
    pub outlier_scale: f64,
}

/// Measurement and IMU noise description.
///
/// Measurement sigmas follow `σ_axis(d) = (base + slope·d) · axis_scale`
/// per axis, floored at [`MIN_SIGMA`]. IMU densities are continuous-time
/// (`x/√Hz`); the sampled white noise has std `density·√rate` and biases
/// random-walk with increment std `walk·√dt` per sample.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub trans_base_m: f64,
    pub trans_slope_per_m: f64,
    pub rot_base_rad: f64,
    pub rot_slope_per_m: f64,
    pub trans_axis_scale: [f64; 3],
    pub rot_axis_scale: [f64; 3],
    pub outlier_prob: f64,
    pub outlier_scale: f64,
    #[serde(default)]
    pub outlier_overrides: BTreeMap<u32, OutlierOverride>,
    #[serde(default)]
    pub bursts: Option<BurstConfig>,
    #[serde(default)]
    pub far_degradation: Option<FarDegradation>,
    /// Bearing intervals (radians, world azimuth of the camera as seen from
    /// the object) in which the object is not measurable. `lo > hi` wraps.
    #[serde(default)]
    pub occlusion_sectors: BTreeMap<u32, Vec<(f64, f64)>>,
    pub gyro_noise_density: f64,
    pub accel_noise_density: f64,
    pub gyro_bias_walk: f64,
    pub accel_bias_walk: f64,
    pub gyro_bias_init_std: f64,
    pub accel_bias_init_std: f64,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        NoiseProfile {
            trans_base_m: 0.008,
            trans_slope_per_m: 0.007,
            rot_base_rad: 0.012,
            rot_slope_per_m: 0.006,
            trans_axis_scale: [0.8, 0.8, 1.5],
            rot_axis_scale: [1.0, 1.0, 1.2],
            outlier_prob: 0.0,
            outlier_scale: 1.0,
            outlier_overrides: BTreeMap::new(),
            bursts: None,
            far_degradation: None,
            occlusion_sectors: BTreeMap::new(),
            gyro_noise_density: 2e-3,
            accel_noise_density: 2e-2,
            gyro_bias_walk: 1e-5,
            accel_bias_walk: 1e-4,
            gyro_bias_init_std: 2e-3,
            accel_bias_init_std: 2e-2,
        }
    }
}

impl NoiseProfile {
    /// Measurement noise switched off entirely; IMU noise untouched.
    pub fn noiseless_measurements(mut self) -> Self {
        self.trans_base_m = 0.0;
        self.trans_slope_per_m = 0.0;
        self.rot_base_rad = 0.0;
        self.rot_slope_per_m = 0.0;
        self.outlier_prob = 0.0;
        self.outlier_overrides.clear();
        self.bursts = None;
        self.far_degradation = None;
        self
    }

    /// All stochastic terms switched off.
    pub fn noiseless(mut self) -> Self {
        self = self.noiseless_measurements();
        self.gyro_noise_density = 0.0;
        self.accel_noise_density = 0.0;
        self.gyro_bias_walk = 0.0;
        self.accel_bias_walk = 0.0;
        self.gyro_bias_init_std = 0.0;
        self.accel_bias_init_std = 0.0;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let nonneg = [
            self.trans_base_m,
            self.trans_slope_per_m,
            self.rot_base_rad,
            self.rot_slope_per_m,
            self.gyro_noise_density,
            self.accel_noise_density,
            self.gyro_bias_walk,
            self.accel_bias_walk,
            self.gyro_bias_init_std,
            self.accel_bias_init_std,
        ];
        if nonneg.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SimError::InvalidProfile(
                "noise coefficients must be finite and non-negative".into(),
            ));
        }
        let scales = self
            .trans_axis_scale
            .iter()
            .chain(self.rot_axis_scale.iter());
        if scales.into_iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(SimError::InvalidProfile(
                "axis scales must be positive".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.outlier_prob) {
            return Err(SimError::InvalidProfile(
                "outlier probability must be in [0, 0.5)".into(),
            ));
        }
        if self.outlier_scale < 1.0 {
            return Err(SimError::InvalidProfile(
                "outlier scale must be >= 1".into(),
            ));
        }
        for (id, o) in &self.outlier_overrides {
            if !(0.0..0.5).contains(&o.prob) || o.scale < 1.0 {
                return Err(SimError::InvalidProfile(format!(
                    "outlier override for object {id} out of range"
                )));
            }
        }
        if let Some(b) = &self.bursts {
            if b.rate_hz < 0.0 || b.duration_s < 0.0 || !(0.0..=1.0).contains(&b.outlier_prob) {
                return Err(SimError::InvalidProfile("burst config out of range".into()));
            }
        }
        if let Some(f) = &self.far_degradation {
            if f.distance_m <= 0.0
                || f.sigma_scale < 1.0
                || !(0.0..=1.0).contains(&f.outlier_prob)
                || f.outlier_scale < 1.0
            {
                return Err(SimError::InvalidProfile(
                    "far degradation out of range".into(),
                ));
            }
        }
        Ok(())
    }

    fn far_scale(&self, distance: f64) -> f64 {
        match &self.far_degradation {
            Some(f) if distance > f.distance_m => f.sigma_scale,
            _ => 1.0,
        }
    }

    pub fn trans_sigmas(&self, distance: f64) -> Vector3<f64> {
        let base =
            (self.trans_base_m + self.trans_slope_per_m * distance) * self.far_scale(distance);
        Vector3::new(
            (base * self.trans_axis_scale[0]).max(MIN_SIGMA),
            (base * self.trans_axis_scale[1]).max(MIN_SIGMA),
            (base * self.trans_axis_scale[2]).max(MIN_SIGMA),
        )
    }

    pub fn rot_sigmas(&self, distance: f64) -> Vector3<f64> {
        let base = (self.rot_base_rad + self.rot_slope_per_m * distance) * self.far_scale(distance);
        Vector3::new(
            (base * self.rot_axis_scale[0]).max(MIN_SIGMA),
            (base * self.rot_axis_scale[1]).max(MIN_SIGMA),
            (base * self.rot_axis_scale[2]).max(MIN_SIGMA),
        )
    }

    pub fn is_occluded(&self, object_id: u32, bearing: f64) -> bool {
        match self.occlusion_sectors.get(&object_id) {
            Some(sectors) => sectors.iter().any(|&(lo, hi)| in_sector(bearing, lo, hi)),
            None => false,
        }
    }

    /// Precedence: per-object override, then the far-distance zone, then an
    /// active burst window, then the profile-wide settings.
    fn outlier_params(
        &self,
        object_id: u32,
        t: f64,
        distance: f64,
        burst_windows: &[(f64, f64)],
    ) -> (f64, f64) {
        if let Some(o) = self.outlier_overrides.get(&object_id) {
            return (o.prob, o.scale);
        }
        if let Some(f) = &self.far_degradation {
            if distance > f.distance_m {
                return (f.outlier_prob, f.outlier_scale);
            }
        }
        if let Some(b) = &self.bursts {
            if burst_windows.iter().any(|&(s, e)| t >= s && t < e) {
                return (b.outlier_prob, b.outlier_scale);
            }
        }
        (self.outlier_prob, self.outlier_scale)
    }
}

fn in_sector(bearing: f64, lo: f64, hi: f64) -> bool {
    if lo <= hi {
        bearing >= lo && bearing <= hi
    } else {
        bearing >= lo || bearing <= hi
    }
}

/// One inertial sample. The values represent the signal over the interval
/// ending at `t` (spacing `1/imu_rate`), evaluated at the interval
/// midpoint, like an integrating IMU.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

/// True (simulated) IMU bias values at a sample time; kept in memory for
/// consistency analysis, never written to disk.
#[derive(Clone, Copy, Debug)]
pub struct BiasSample {
    pub t: f64,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
}

/// Ground-truth pose and velocity of the IMU at one grid time.
#[derive(Clone, Copy, Debug)]
pub struct TruthSample {
    pub t: f64,
    pub pose: Pose,
    pub velocity: Vector3<f64>,
}

/// One simulated object-pose measurement: the noisy relative pose `T_CO`,
/// plus ground-truth annotations used for training and analysis.
#[derive(Clone, Debug)]
pub struct MeasurementRecord {
    pub t: f64,
    pub object_id: u32,
    pub measured: Pose,
    pub truth: Pose,
    pub true_trans_var: DiagCov3,
    pub true_rot_var: DiagCov3,
    pub features: [f64; 5],
    pub outlier: bool,
}

/// Geometric cues standing in for image-derived ones: distance, bearing
/// azimuth/elevation of the object in the camera frame, cosine of the
/// off-axis angle, and apparent angular size.
pub fn feature_vector(camera_t_wc: &Pose, object_t_wo: &Pose) -> [f64; 5] {
    let rel = camera_t_wc.inverse().compose(object_t_wo);
    let p = rel.translation;
    let d = p.norm().max(1e-12);
    let azimuth = p.x.atan2(p.z);
    let elevation = (-p.y).atan2((p.x * p.x + p.z * p.z).sqrt());
    let cos_off_axis = p.z / d;
    let angular_size = APPARENT_SIZE_M / d;
    [d, azimuth, elevation, cos_off_axis, angular_size]
}

fn standard_normal3<R: Rng>(rng: &mut R) -> Vector3<f64> {
    Vector3::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    )
}

/// Simulate one relative-pose measurement of `object` from the camera at
/// `camera_t_wc`, or `None` when the viewing bearing falls in an occlusion
/// sector.
///
/// Translation noise is added in the camera frame; rotation noise is a
/// right-multiplied `so3_exp` perturbation of the true rotation. Outliers
/// keep the draw direction and inflate its scale.
pub fn simulate_measurement<R: Rng>(
    camera_t_wc: &Pose,
    object: &ObjectSpec,
    profile: &NoiseProfile,
    t: f64,
    burst_windows: &[(f64, f64)],
    rng: &mut R,
) -> Option<MeasurementRecord> {
    let cam_p = camera_t_wc.translation;
    let obj_p = object.pose.translation;
    let bearing = (cam_p.y - obj_p.y).atan2(cam_p.x - obj_p.x);
    if profile.is_occluded(object.id, bearing) {
        return None;
    }

    let true_rel = camera_t_wc.inverse().compose(&object.pose);
    let distance = true_rel.translation.norm();
    let sig_t = profile.trans_sigmas(distance);
    let sig_r = profile.rot_sigmas(distance);

    let (outlier_prob, outlier_scale) =
        profile.outlier_params(object.id, t, distance, burst_windows);
    let is_outlier = rng.gen::<f64>() < outlier_prob;
    let scale = if is_outlier { outlier_scale } else { 1.0 };

    let noise_t = standard_normal3(rng).component_mul(&sig_t) * scale;
    let noise_r = standard_normal3(rng).component_mul(&sig_r) * scale;

    let measured = Pose::new(
        true_rel.translation + noise_t,
        true_rel
            .rotation
            .compose(&UnitQuat::from_scaled_axis(&noise_r)),
    );

    Some(MeasurementRecord {
        t,
        object_id: object.id,
        measured,
        truth: true_rel,
        true_trans_var: DiagCov3::from_sigmas(&sig_t)
            .expect("sigma floor keeps variances positive"),
        true_rot_var: DiagCov3::from_sigmas(&sig_r).expect("sigma floor keeps variances positive"),
        features: feature_vector(camera_t_wc, &object.pose),
        outlier: is_outlier,
    })
}

/// Synthesize the IMU stream for `model` (gravity included, biases and
/// white noise from `profile`). Returns the samples and the true bias
/// trajectory.
pub fn sample_imu<R: Rng>(
    model: &TrajectoryModel,
    spec: &TrajectorySpec,
    profile: &NoiseProfile,
    rng: &mut R,
) -> (Vec<ImuSample>, Vec<BiasSample>) {
    let dt = spec.imu_dt();
    let n = spec.num_imu_samples();
    let sqrt_dt = dt.sqrt();
    let gravity = gravity_vector();

    let mut gyro_bias = standard_normal3(rng) * profile.gyro_bias_init_std;
    let mut accel_bias = standard_normal3(rng) * profile.accel_bias_init_std;

    let mut samples = Vec::with_capacity(n);
    let mut biases = Vec::with_capacity(n);
    for k in 1..=n {
        let t = k as f64 * dt;
        let mid = model.state(t - dt / 2.0);
        gyro_bias += standard_normal3(rng) * (profile.gyro_bias_walk * sqrt_dt);
        accel_bias += standard_normal3(rng) * (profile.accel_bias_walk * sqrt_dt);

        let r_wi = mid.pose.rotation.rotation_matrix();
        let specific_force = r_wi.transpose().rotate(&(mid.accel_world - gravity));
        let gyro = mid.omega_body
            + gyro_bias
            + standard_normal3(rng) * (profile.gyro_noise_density / sqrt_dt);
        let accel = specific_force
            + accel_bias
            + standard_normal3(rng) * (profile.accel_noise_density / sqrt_dt);

        samples.push(ImuSample { t, gyro, accel });
        biases.push(BiasSample {
            t,
            gyro_bias,
            accel_bias,
        });
    }
    (samples, biases)
}

/// Draw Poisson-process burst windows over `[0, duration)`.
fn draw_burst_windows<R: Rng>(cfg: &BurstConfig, duration: f64, rng: &mut R) -> Vec<(f64, f64)> {
    let expected = cfg.rate_hz * duration;
    if expected <= 0.0 || cfg.duration_s <= 0.0 {
        return Vec::new();
    }
    let count = Poisson::new(expected).expect("positive rate").sample(rng) as usize;
    let mut windows: Vec<(f64, f64)> = (0..count)
        .map(|_| {
            let start = rng.gen::<f64>() * duration;
            (start, start + cfg.duration_s)
        })
        .collect();
    windows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    windows
}

pub(crate) fn burst_windows_for_objects<R: Rng>(
    profile: &NoiseProfile,
    layout: &ObjectLayout,
    duration: f64,
    rng: &mut R,
) -> BTreeMap<u32, Vec<(f64, f64)>> {
    let mut map = BTreeMap::new();
    if let Some(cfg) = &profile.bursts {
        let mut ids: Vec<u32> = layout.objects.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        for id in ids {
            map.insert(id, draw_burst_windows(cfg, duration, rng));
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;
    use approx::assert_relative_eq;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn static_camera(distance: f64) -> (Pose, ObjectSpec) {
        // Camera at origin with optical axis along world +x (rig convention
        // below), object straight ahead.
        let object = ObjectSpec {
            id: 0,
            pose: Pose::new(Vector3::new(distance, 0.0, 1.0), UnitQuat::identity()),
        };
        let cam = Pose::new(Vector3::new(0.0, 0.0, 1.0), camera_facing_x());
        (cam, object)
    }

    /// Rotation whose z (optical) axis is world +x, x axis is world -y,
    /// y axis is world -z.
    fn camera_facing_x() -> UnitQuat {
        let m = nalgebra::Matrix3::from_columns(&[
            Vector3::new(0.0, -1.0, 0.0),
            Vector3::new(0.0, 0.0, -1.0),
            Vector3::new(1.0, 0.0, 0.0),
        ]);
        UnitQuat::from_rotation_matrix(&crate::geometry::RotationMatrix::from_matrix(m).unwrap())
    }

    #[test]
    fn feature_vector_straight_ahead() {
        let (cam, object) = static_camera(3.0);
        let f = feature_vector(&cam, &object.pose);
        assert_relative_eq!(f[0], 3.0, epsilon = 1e-12);
        assert_relative_eq!(f[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(f[2], 0.0, epsilon = 1e-12);
        assert_relative_eq!(f[3], 1.0, epsilon = 1e-12);
        assert_relative_eq!(f[4], APPARENT_SIZE_M / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn feature_vector_size_halves_with_distance() {
        let (cam, obj_near) = static_camera(2.0);
        let (_, obj_far) = static_camera(4.0);
        let near = feature_vector(&cam, &obj_near.pose);
        let far = feature_vector(&cam, &obj_far.pose);
        assert_relative_eq!(near[4], 2.0 * far[4], epsilon = 1e-12);
    }

    #[test]
    fn feature_vector_matches_spherical_oracle() {
        let mut rng = rng_for(3, "test/features");
        for _ in 0..200 {
            let cam = Pose::new(
                standard_normal3(&mut rng) * 2.0,
                UnitQuat::from_scaled_axis(&(standard_normal3(&mut rng) * 0.8)),
            );
            let obj = Pose::new(
                standard_normal3(&mut rng) * 2.0 + Vector3::new(5.0, 0.0, 0.0),
                UnitQuat::from_scaled_axis(&(standard_normal3(&mut rng) * 0.8)),
            );
            let f = feature_vector(&cam, &obj);
            // Independent spherical-coordinate computation from the raw
            // rotation matrix and translation difference.
            let r_wc = cam.rotation.rotation_matrix();
            let p_c = r_wc
                .transpose()
                .rotate(&(obj.translation - cam.translation));
            let d = p_c.norm();
            assert!((f[0] - d).abs() < 1e-12);
            assert!((f[1] - p_c.x.atan2(p_c.z)).abs() < 1e-12);
            assert!((f[2] - (-p_c.y / d).asin()).abs() < 1e-9);
            assert!((f[3] - p_c.z / d).abs() < 1e-12);
            assert!((f[4] - APPARENT_SIZE_M / d).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_noise_measurement_is_exact() {
        let (cam, object) = static_camera(3.0);
        let profile = NoiseProfile::default().noiseless_measurements();
        let mut rng = rng_for(4, "test/meas");
        let rec = simulate_measurement(&cam, &object, &profile, 0.0, &[], &mut rng).unwrap();
        assert!((rec.measured.translation - rec.truth.translation).norm() < 1e-6);
        assert!(rec.measured.rotation.angle_to(&rec.truth.rotation) < 1e-6);
        assert!(!rec.outlier);
    }

    #[test]
    fn measurement_noise_scales_with_distance() {
        let profile = NoiseProfile {
            trans_base_m: 0.005,
            trans_slope_per_m: 0.01,
            trans_axis_scale: [1.0, 1.0, 1.5],
            ..NoiseProfile::default()
        };
        let mut rng = rng_for(5, "test/mc");
        let n = 100_000;
        for distance in [2.0, 4.0] {
            let (cam, object) = static_camera(distance);
            let expected = profile.trans_sigmas(distance);
            let mut sums = Vector3::zeros();
            for _ in 0..n {
                let rec =
                    simulate_measurement(&cam, &object, &profile, 0.0, &[], &mut rng).unwrap();
                let err = rec.measured.translation - rec.truth.translation;
                sums += err.component_mul(&err);
            }
            let empirical = (sums / n as f64).map(f64::sqrt);
            for axis in 0..3 {
                let rel = (empirical[axis] - expected[axis]).abs() / expected[axis];
                assert!(rel < 0.02, "axis {axis}: rel err {rel:.4}");
            }
        }
    }

    #[test]
    fn occluded_bearing_returns_none() {
        let mut profile = NoiseProfile::default();
        // Camera sits at bearing 0 from the object (cam.x > obj.x).
        profile.occlusion_sectors.insert(0, vec![(-0.1, 0.1)]);
        let object = ObjectSpec {
            id: 0,
            pose: Pose::new(Vector3::new(0.0, 0.0, 1.0), UnitQuat::identity()),
        };
        let cam = Pose::new(Vector3::new(3.0, 0.0, 1.0), camera_facing_x());
        let mut rng = rng_for(6, "test/occ");
        assert!(simulate_measurement(&cam, &object, &profile, 0.0, &[], &mut rng).is_none());
        // Opposite side is visible.
        let cam2 = Pose::new(Vector3::new(-3.0, 0.0, 1.0), camera_facing_x());
        assert!(simulate_measurement(&cam2, &object, &profile, 0.0, &[], &mut rng).is_some());
    }

    #[test]
    fn wrapping_sector_covers_pi() {
        assert!(in_sector(3.1, 3.0, -3.0));
        assert!(in_sector(-3.1, 3.0, -3.0));
        assert!(!in_sector(0.0, 3.0, -3.0));
    }

    #[test]
    fn noise_realizations_pass_chi_square() {
        // Pooled normalized squared errors over translation and rotation
        // axes follow a chi-square with 6n dof; two-sided test at 1%.
        let profile = NoiseProfile::default();
        let (cam, object) = static_camera(3.0);
        let mut rng = rng_for(7, "test/chi2");
        let n = 100_000usize;
        let mut stat = 0.0;
        for _ in 0..n {
            let rec = simulate_measurement(&cam, &object, &profile, 0.0, &[], &mut rng).unwrap();
            let et = rec.measured.translation - rec.truth.translation;
            let er = crate::geometry::so3_log(
                &rec.truth
                    .rotation
                    .rotation_matrix()
                    .transpose()
                    .compose(&rec.measured.rotation.rotation_matrix()),
            );
            let vt = rec.true_trans_var.variances();
            let vr = rec.true_rot_var.variances();
            for axis in 0..3 {
                stat += et[axis] * et[axis] / vt[axis];
                stat += er[axis] * er[axis] / vr[axis];
            }
        }
        let dof = (6 * n) as f64;
        let dist = ChiSquared::new(dof).unwrap();
        let lo = dist.inverse_cdf(0.005);
        let hi = dist.inverse_cdf(0.995);
        assert!(
            stat > lo && stat < hi,
            "chi2 stat {stat:.1} outside [{lo:.1}, {hi:.1}]"
        );
    }

    #[test]
    fn outlier_override_targets_single_object() {
        let mut profile = NoiseProfile::default();
        profile.outlier_overrides.insert(
            1,
            OutlierOverride {
                prob: 0.4,
                scale: 10.0,
            },
        );
        let mut rng = rng_for(8, "test/outlier");
        let obj0 = ObjectSpec {
            id: 0,
            pose: Pose::new(Vector3::new(3.0, 0.0, 1.0), UnitQuat::identity()),
        };
        let obj1 = ObjectSpec {
            id: 1,
            ..obj0.clone()
        };
        let cam = Pose::new(Vector3::new(0.0, 0.0, 1.0), camera_facing_x());
        let count = |obj: &ObjectSpec, rng: &mut rand_chacha::ChaCha12Rng| {
            (0..2000)
                .filter(|_| {
                    simulate_measurement(&cam, obj, &profile, 0.0, &[], rng)
                        .unwrap()
                        .outlier
                })
                .count()
        };
        assert_eq!(count(&obj0, &mut rng), 0);
        let hits = count(&obj1, &mut rng);
        assert!((600..1000).contains(&hits), "hits {hits}");
    }

    #[test]
    fn circular_orbit_imu_reads_centripetal_acceleration() {
        let spec = TrajectorySpec {
            duration_s: 4.0,
            radius_min_m: 3.0,
            radius_max_m: 3.0,
            height_amplitude_m: 0.0,
            height_frequency_hz: 0.0,
            ..TrajectorySpec::default()
        };
        let layout = ObjectLayout {
            objects: vec![ObjectSpec {
                id: 0,
                pose: Pose::new(Vector3::new(0.0, 0.0, 1.0), UnitQuat::identity()),
            }],
            anchor_id: 0,
        };
        let profile = NoiseProfile::default().noiseless();
        let model = TrajectoryModel::new(&spec, &layout).unwrap();
        let mut rng = rng_for(9, "test/imu-centripetal");
        let (samples, _) = sample_imu(&model, &spec, &profile, &mut rng);
        let speed = 3.0 * spec.angular_span_deg.to_radians() / spec.duration_s;
        for sample in samples.iter().step_by(100) {
            // Subtract the gravity reaction in body frame; what remains is
            // the centripetal term of magnitude v²/r.
            let t_mid = sample.t - spec.imu_dt() / 2.0;
            let rot = model.state(t_mid).pose.rotation.rotation_matrix();
            let gravity_body = rot.transpose().rotate(&Vector3::new(0.0, 0.0, GRAVITY));
            let centripetal = sample.accel - gravity_body;
            assert_relative_eq!(centripetal.norm(), speed * speed / 3.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = TrajectorySpec::default();
        spec.duration_s = 0.0;
        assert!(matches!(spec.validate(), Err(SimError::InvalidSpec(_))));
        let mut spec = TrajectorySpec::default();
        spec.cam_rate_hz = 300.0;
        assert!(spec.validate().is_err());
        let mut profile = NoiseProfile::default();
        profile.outlier_prob = 0.7;
        assert!(matches!(
            profile.validate(),
            Err(SimError::InvalidProfile(_))
        ));
        let mut layout = ObjectLayout::default_pole();
        layout.anchor_id = 99;
        assert!(matches!(layout.validate(), Err(SimError::InvalidLayout(_))));
    }
}
