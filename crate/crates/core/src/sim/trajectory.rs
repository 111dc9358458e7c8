//! Closed-form orbit trajectory around the object constellation.
//!
//! Position, velocity, acceleration, orientation, and body angular rate are
//! all analytic, so the synthesized IMU is exact rather than
//! finite-differenced. The rig orbits the layout centroid with the yaw
//! tracking it; since the radial direction is independent of the radius
//! oscillation, the bearing to the centroid equals the orbit azimuth plus π
//! and the yaw rate is exactly the (constant) azimuth sweep rate.

use nalgebra::Vector3;

use crate::geometry::{Pose, UnitQuat};

use super::{ObjectLayout, SimError, TrajectorySpec, TruthSample};

/// All kinematic quantities of the IMU body at one instant.
#[derive(Clone, Copy, Debug)]
pub struct KinematicState {
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub accel_world: Vector3<f64>,
    pub omega_body: Vector3<f64>,
}

/// Precomputed closed-form trajectory, C² smooth by construction.
#[derive(Clone, Debug)]
pub struct TrajectoryModel {
    center_x: f64,
    center_y: f64,
    radius_mid: f64,
    radius_amp: f64,
    sweep_omega: f64,
    height_omega: f64,
    height_amp: f64,
    base_height: f64,
    azimuth_rate: f64,
}

impl TrajectoryModel {
    pub fn new(spec: &TrajectorySpec, layout: &ObjectLayout) -> Result<Self, SimError> {
        spec.validate()?;
        layout.validate()?;
        let (center_x, center_y) = layout.centroid_xy();
        let two_pi = std::f64::consts::TAU;
        Ok(TrajectoryModel {
            center_x,
            center_y,
            radius_mid: 0.5 * (spec.radius_min_m + spec.radius_max_m),
            radius_amp: 0.5 * (spec.radius_max_m - spec.radius_min_m),
            sweep_omega: two_pi * spec.height_frequency_hz,
            height_omega: two_pi * spec.height_frequency_hz,
            height_amp: spec.height_amplitude_m,
            base_height: spec.base_height_m,
            azimuth_rate: spec.angular_span_deg.to_radians() / spec.duration_s,
        })
    }

    /// Horizontal distance to the orbit center at time `t`.
    pub fn radius(&self, t: f64) -> f64 {
        self.radius_mid - self.radius_amp * (self.sweep_omega * t).cos()
    }

    pub fn state(&self, t: f64) -> KinematicState {
        let phi = self.azimuth_rate * t;
        let (sin_phi, cos_phi) = phi.sin_cos();
        let wr = self.sweep_omega;
        let r = self.radius(t);
        let r_dot = self.radius_amp * wr * (wr * t).sin();
        let r_ddot = self.radius_amp * wr * wr * (wr * t).cos();

        let wh = self.height_omega;
        let z = self.base_height + self.height_amp * (wh * t).sin();
        let z_dot = self.height_amp * wh * (wh * t).cos();
        let z_ddot = -self.height_amp * wh * wh * (wh * t).sin();

        let position = Vector3::new(self.center_x + r * cos_phi, self.center_y + r * sin_phi, z);
        let pr = self.azimuth_rate;
        let velocity = Vector3::new(
            r_dot * cos_phi - r * pr * sin_phi,
            r_dot * sin_phi + r * pr * cos_phi,
            z_dot,
        );
        let accel_world = Vector3::new(
            r_ddot * cos_phi - 2.0 * r_dot * pr * sin_phi - r * pr * pr * cos_phi,
            r_ddot * sin_phi + 2.0 * r_dot * pr * cos_phi - r * pr * pr * sin_phi,
            z_ddot,
        );

        // Body x axis points horizontally at the centroid: yaw = phi + π.
        let yaw = phi + std::f64::consts::PI;
        let rotation = UnitQuat::from_scaled_axis(&Vector3::new(0.0, 0.0, yaw));
        let omega_body = Vector3::new(0.0, 0.0, pr);

        KinematicState {
            pose: Pose::new(position, rotation),
            velocity,
            accel_world,
            omega_body,
        }
    }
}

/// Sample the ground-truth trajectory on the IMU grid (including `t = 0`).
pub fn generate_trajectory(
    spec: &TrajectorySpec,
    layout: &ObjectLayout,
) -> Result<Vec<TruthSample>, SimError> {
    let model = TrajectoryModel::new(spec, layout)?;
    let dt = spec.imu_dt();
    let n = spec.num_imu_samples();
    Ok((0..=n)
        .map(|k| {
            let t = k as f64 * dt;
            let s = model.state(t);
            TruthSample {
                t,
                pose: s.pose,
                velocity: s.velocity,
            }
        })
        .collect())
}

/// Default camera-in-IMU extrinsic: optical axis along body x (toward the
/// orbit center), image x along body -y, image y along body -z, with a
/// small lever arm.
pub fn default_extrinsic() -> Pose {
    let columns = nalgebra::Matrix3::from_columns(&[
        Vector3::new(0.0, -1.0, 0.0),
        Vector3::new(0.0, 0.0, -1.0),
        Vector3::new(1.0, 0.0, 0.0),
    ]);
    Pose::new(
        Vector3::new(0.10, 0.0, -0.05),
        UnitQuat::from_rotation_matrix(
            &crate::geometry::RotationMatrix::from_matrix(columns).expect("orthonormal"),
        ),
    )
}
