//! Error-state Kalman filter for object-relative navigation.
//!
//! The nominal state holds the IMU pose/velocity, IMU biases, the
//! camera-IMU extrinsic, and one world pose per object; the error state is
//! minimal (3 rotation dofs per quaternion) with right-multiplicative
//! rotation errors, `R = R̂ · exp(δϑ)`.
//!
//! Object states are stored as the pose of the world frame with respect to
//! the object (`T_OW`), matching the inverted measurement model
//! `h(X) = T_OW ∘ T_WI ∘ T_IC`, the camera pose expressed in the object
//! frame. The anchor object's covariance block is held at exactly zero,
//! which pins the navigation frame to that object; anchor switching moves
//! the zero block and re-opens the previous anchor with a configured prior.

pub mod filter;
pub mod runner;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{DiagCov3, Pose, UnitQuat};
use crate::sim::{NoiseProfile, ObjectLayout};

pub use filter::{choose_anchor, ErrorStateFilter, CORE_DIM};
pub use runner::{run, EventCode, FilterMode, ResultRow, RunOptions, TrajectoryResult};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("anchor object {0} is not part of the layout")]
    UnknownAnchor(u32),
    #[error("object {0} is not part of the state")]
    UnknownObject(u32),
    #[error("non-monotonic time: filter at {last}, input at {got}")]
    NonMonotonicTime { last: f64, got: f64 },
    #[error("no measurements to select an anchor from")]
    NoMeasurements,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("geometry error: {0}")]
    Geometry(#[from] crate::geometry::GeometryError),
}

/// World pose of the navigation states for one object, stored inverted
/// (`T_OW`: the world frame with respect to the object frame).
#[derive(Clone, Copy, Debug)]
pub struct ObjectState {
    pub id: u32,
    pub p_ow: Vector3<f64>,
    pub q_ow: UnitQuat,
}

impl ObjectState {
    /// Build from the object's world pose `T_WO`.
    pub fn from_world_pose(id: u32, t_wo: &Pose) -> Self {
        let inv = t_wo.inverse();
        ObjectState {
            id,
            p_ow: inv.translation,
            q_ow: inv.rotation,
        }
    }

    pub fn t_ow(&self) -> Pose {
        Pose::new(self.p_ow, self.q_ow)
    }

    /// The object's pose in the world, `T_WO`.
    pub fn world_pose(&self) -> Pose {
        self.t_ow().inverse()
    }
}

/// Full nominal state.
#[derive(Clone, Debug)]
pub struct NavState {
    pub p_wi: Vector3<f64>,
    pub v_wi: Vector3<f64>,
    pub q_wi: UnitQuat,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
    pub p_ic: Vector3<f64>,
    pub q_ic: UnitQuat,
    pub objects: Vec<ObjectState>,
}

impl NavState {
    /// Assemble a state from an IMU pose/velocity, the camera extrinsic,
    /// and the object layout (objects sorted by id, biases zero).
    pub fn new(
        pose_wi: &Pose,
        velocity: Vector3<f64>,
        extrinsic: &Pose,
        layout: &ObjectLayout,
    ) -> Self {
        let mut objects: Vec<ObjectState> = layout
            .objects
            .iter()
            .map(|o| ObjectState::from_world_pose(o.id, &o.pose))
            .collect();
        objects.sort_by_key(|o| o.id);
        NavState {
            p_wi: pose_wi.translation,
            v_wi: velocity,
            q_wi: pose_wi.rotation,
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
            p_ic: extrinsic.translation,
            q_ic: extrinsic.rotation,
            objects,
        }
    }

    pub fn pose_wi(&self) -> Pose {
        Pose::new(self.p_wi, self.q_wi)
    }

    pub fn extrinsic(&self) -> Pose {
        Pose::new(self.p_ic, self.q_ic)
    }
}

/// One relative-pose measurement handed to the filter: the raw `T_CO`
/// observation plus the diagonal noise covariance to use (fixed or
/// predicted, decided by the caller).
#[derive(Clone, Debug)]
pub struct PoseUpdateInput {
    pub t: f64,
    pub object_id: u32,
    pub measured_t_co: Pose,
    pub trans_cov: DiagCov3,
    pub rot_cov: DiagCov3,
}

/// What happened to a measurement. Rejections leave state and covariance
/// untouched.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UpdateOutcome {
    Accepted,
    /// Predicted covariance exceeded the outlier-rejection thresholds.
    RejectedAor,
    /// Innovation failed the Mahalanobis chi-square gate.
    RejectedGate {
        chi2: f64,
    },
}

/// Uncertainty-based outlier rejection limits and the optional innovation
/// gate (chi-square threshold for 6 dof).
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct GatingConfig {
    pub aor_trans_trace: Option<f64>,
    pub aor_rot_trace: Option<f64>,
    pub mahalanobis_chi2: Option<f64>,
}

/// Anchor management policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    FixedAnchor,
    DynamicSwitching,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AnchorPolicy {
    pub mode: AnchorMode,
    /// A challenger must beat the current anchor's score by this factor.
    pub hysteresis_ratio: f64,
}

impl Default for AnchorPolicy {
    fn default() -> Self {
        AnchorPolicy {
            mode: AnchorMode::FixedAnchor,
            hysteresis_ratio: 1.2,
        }
    }
}

impl AnchorPolicy {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        if self.hysteresis_ratio < 1.0 || !self.hysteresis_ratio.is_finite() {
            return Err(EstimatorError::InvalidConfig(
                "hysteresis ratio must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Initial error-state variances, one scalar per 3-dof block.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PriorConfig {
    pub pos_var: f64,
    pub vel_var: f64,
    pub att_var: f64,
    pub gyro_bias_var: f64,
    pub accel_bias_var: f64,
    pub ext_pos_var: f64,
    pub ext_att_var: f64,
    /// Also used to re-open a demoted anchor after switching.
    pub object_pos_var: f64,
    pub object_att_var: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            pos_var: 0.01,
            vel_var: 0.01,
            att_var: 1e-4,
            gyro_bias_var: 4e-6,
            accel_bias_var: 4e-4,
            ext_pos_var: 0.0,
            ext_att_var: 0.0,
            object_pos_var: 0.1,
            object_att_var: 0.05,
        }
    }
}

impl PriorConfig {
    /// Bias priors matched to a simulation profile's initial bias draw.
    pub fn with_profile_biases(mut self, profile: &NoiseProfile) -> Self {
        self.gyro_bias_var = profile.gyro_bias_init_std * profile.gyro_bias_init_std;
        self.accel_bias_var = profile.accel_bias_init_std * profile.accel_bias_init_std;
        self
    }
}

/// Continuous-time IMU noise densities consumed by covariance propagation.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ImuNoiseParams {
    pub gyro_noise_density: f64,
    pub accel_noise_density: f64,
    pub gyro_bias_walk: f64,
    pub accel_bias_walk: f64,
}

impl ImuNoiseParams {
    pub fn from_profile(profile: &NoiseProfile) -> Self {
        ImuNoiseParams {
            gyro_noise_density: profile.gyro_noise_density,
            accel_noise_density: profile.accel_noise_density,
            gyro_bias_walk: profile.gyro_bias_walk,
            accel_bias_walk: profile.accel_bias_walk,
        }
    }
}
