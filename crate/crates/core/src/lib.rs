//! Object-relative visual-inertial state estimation with learned,
//! heteroscedastic measurement uncertainty.
//!
//! The crate is organized around one pipeline:
//!
//! 1. [`sim`] generates a deterministic ground-truth trajectory, an IMU
//!    stream, and noisy relative object-pose measurements whose noise obeys
//!    a known distance-dependent law.
//! 2. [`uncertainty`] trains a small perceptron on (feature, error) pairs
//!    with a diagonal-Gaussian negative-log-likelihood loss so that it
//!    predicts per-axis measurement variances, and provides calibration
//!    metrics (PICP, Q-Q exports).
//! 3. [`estimator`] runs an error-state Kalman filter over the IMU and the
//!    pose measurements, using either a fixed covariance or the predicted
//!    one, with dynamic anchor-object switching and uncertainty-based
//!    outlier rejection.
//! 4. [`eval`] computes RMSE/max-PE/coverage metrics and mode-comparison
//!    tables.
//!
//! All randomness flows from a single root seed through named sub-streams
//! (see [`seeding`]), so every artifact the pipeline writes is reproducible
//! byte for byte.

pub mod estimator;
pub mod eval;
pub mod geometry;
pub mod seeding;
pub mod sim;
pub mod uncertainty;
