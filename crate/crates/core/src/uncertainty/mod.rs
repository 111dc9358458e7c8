//! Aleatoric-uncertainty machinery: the diagonal-Gaussian negative
//! log-likelihood loss in log-variance form, a small trainable regressor
//! from measurement features to per-axis log-variances, and calibration
//! metrics (PICP, Q-Q exports).
//!
//! Log-variance parametrization: the regressor outputs `s_i = ln σ_i²`, so
//! any real output maps to a valid positive variance. The per-component
//! loss `½ (exp(-s) e² + s)` attains its minimum exactly at `s = ln e²`,
//! i.e. the predicted variance matches the squared error.

pub mod head;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::geometry::{so3_log, DiagCov3};
use crate::sim::{Dataset, MeasurementRecord};

pub use head::{
    batch_loss, batch_loss_gradient, train_head, TrainConfig, TrainingSummary, UncertaintyHead,
};

/// Confidence levels used by calibration reports.
pub const REPORT_ALPHAS: [f64; 4] = [0.68, 0.90, 0.95, 0.99];

/// Clamp range for predicted log-variances, bounding downstream condition
/// numbers.
pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("batch must not be empty")]
    EmptyBatch,
    #[error("length mismatch: {errors} errors vs {sigmas} sigmas")]
    LengthMismatch { errors: usize, sigmas: usize },
    #[error("confidence level must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("need at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("sample standard deviation is zero")]
    DegenerateSamples,
    #[error("training diverged at epoch {epoch}: loss became non-finite")]
    Divergence { epoch: usize },
    #[error("head file has format version {found}, supported version is {expected}")]
    UnsupportedFormat { found: u32, expected: u32 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Predicted diagonal measurement covariance: translation in m², rotation
/// tangent in rad², both in the camera frame.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PredictedCovariance {
    pub translation: DiagCov3,
    pub rotation: DiagCov3,
}

impl PredictedCovariance {
    /// Sum of all six variance components; the anchor-selection score.
    pub fn total(&self) -> f64 {
        self.translation.trace() + self.rotation.trace()
    }
}

/// Loss weights for the translation and rotation tasks.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub translation: f64,
    pub rotation: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            translation: 1.0,
            rotation: 1.0,
        }
    }
}

/// One training sample: measurement-minus-truth errors plus the feature
/// vector (and the object id, for the optional per-object output offset).
#[derive(Clone, Copy, Debug)]
pub struct ErrorSample {
    pub trans_error: Vector3<f64>,
    pub rot_error: Vector3<f64>,
    pub features: [f64; 5],
    pub object_id: u32,
}

impl ErrorSample {
    /// Translation error is measured minus true position; rotation error is
    /// the tangent vector `log(R_trueᵀ R_meas)`.
    pub fn from_measurement(m: &MeasurementRecord) -> Self {
        let rot_error = so3_log(
            &m.truth
                .rotation
                .rotation_matrix()
                .transpose()
                .compose(&m.measured.rotation.rotation_matrix()),
        );
        ErrorSample {
            trans_error: m.measured.translation - m.truth.translation,
            rot_error,
            features: m.features,
            object_id: m.object_id,
        }
    }
}

/// Extract all (feature, error) pairs of a dataset in measurement order.
pub fn error_samples(dataset: &Dataset) -> Vec<ErrorSample> {
    dataset
        .measurements
        .iter()
        .map(ErrorSample::from_measurement)
        .collect()
}

/// Deterministic seeded shuffle-split; `train_fraction` of the samples go
/// to the first returned set.
pub fn split_train_validation(
    samples: &[ErrorSample],
    train_fraction: f64,
    seed: u64,
) -> (Vec<ErrorSample>, Vec<ErrorSample>) {
    use rand::Rng;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = crate::seeding::rng_for(seed, "train/split");
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let cut = ((samples.len() as f64) * train_fraction).round() as usize;
    let cut = cut.min(samples.len());
    let train = order[..cut].iter().map(|&i| samples[i]).collect();
    let validation = order[cut..].iter().map(|&i| samples[i]).collect();
    (train, validation)
}

/// Per-component negative log likelihood of a diagonal Gaussian in
/// log-variance form: `½ Σ_i (exp(-s_i) e_i² + s_i)`.
pub fn nll_loss(error: &Vector3<f64>, log_var: &Vector3<f64>) -> f64 {
    let mut total = 0.0;
    for i in 0..3 {
        total += (-log_var[i]).exp() * error[i] * error[i] + log_var[i];
    }
    0.5 * total
}

/// Standard-normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

/// Prediction-interval coverage probability: the fraction of errors inside
/// the two-sided central interval `|e| <= z σ` with `z = Φ⁻¹((1+α)/2)`.
pub fn picp(errors: &[f64], sigmas: &[f64], alpha: f64) -> Result<f64, UncertaintyError> {
    if errors.len() != sigmas.len() {
        return Err(UncertaintyError::LengthMismatch {
            errors: errors.len(),
            sigmas: sigmas.len(),
        });
    }
    if errors.is_empty() {
        return Err(UncertaintyError::EmptyBatch);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(UncertaintyError::InvalidAlpha(alpha));
    }
    let z = normal_quantile((1.0 + alpha) / 2.0);
    let inside = errors
        .iter()
        .zip(sigmas)
        .filter(|(e, s)| e.abs() <= z * **s)
        .count();
    Ok(inside as f64 / errors.len() as f64)
}

/// Q-Q export against a Gaussian fitted by sample mean and standard
/// deviation: pairs of (theoretical quantile, sorted sample) at plotting
/// positions `(i - 0.5) / n`.
pub fn qq_export(errors: &[f64]) -> Result<Vec<(f64, f64)>, UncertaintyError> {
    let n = errors.len();
    if n < 2 {
        return Err(UncertaintyError::TooFewSamples(n));
    }
    let mean = errors.iter().sum::<f64>() / n as f64;
    let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n as f64 - 1.0);
    if var <= 0.0 {
        return Err(UncertaintyError::DegenerateSamples);
    }
    let std = var.sqrt();
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(sorted
        .iter()
        .enumerate()
        .map(|(i, sample)| {
            let p = (i as f64 + 0.5) / n as f64;
            (mean + std * normal_quantile(p), *sample)
        })
        .collect())
}

/// Per-component held-out PICP at each of [`REPORT_ALPHAS`]. Rows are the
/// six components (tx, ty, tz, r1, r2, r3).
pub fn calibration_matrix(
    head: &UncertaintyHead,
    samples: &[ErrorSample],
) -> Result<[[f64; REPORT_ALPHAS.len()]; 6], UncertaintyError> {
    if samples.is_empty() {
        return Err(UncertaintyError::EmptyBatch);
    }
    let mut errors: [Vec<f64>; 6] = Default::default();
    let mut sigmas: [Vec<f64>; 6] = Default::default();
    for sample in samples {
        let cov = head.predict(&sample.features, Some(sample.object_id));
        let st = cov.translation.sigmas();
        let sr = cov.rotation.sigmas();
        for axis in 0..3 {
            errors[axis].push(sample.trans_error[axis]);
            sigmas[axis].push(st[axis]);
            errors[3 + axis].push(sample.rot_error[axis]);
            sigmas[3 + axis].push(sr[axis]);
        }
    }
    let mut out = [[0.0; REPORT_ALPHAS.len()]; 6];
    for comp in 0..6 {
        for (ai, alpha) in REPORT_ALPHAS.iter().enumerate() {
            out[comp][ai] = picp(&errors[comp], &sigmas[comp], *alpha)?;
        }
    }
    Ok(out)
}

/// Empirical per-component standard deviations of the measurement errors;
/// the "tuned by hand on a validation set" baseline for fixed-covariance
/// filtering.
pub fn empirical_sigmas(samples: &[ErrorSample]) -> Option<([f64; 3], [f64; 3])> {
    if samples.is_empty() {
        return None;
    }
    let n = samples.len() as f64;
    let mut trans = [0.0; 3];
    let mut rot = [0.0; 3];
    for s in samples {
        for axis in 0..3 {
            trans[axis] += s.trans_error[axis] * s.trans_error[axis];
            rot[axis] += s.rot_error[axis] * s.rot_error[axis];
        }
    }
    for axis in 0..3 {
        trans[axis] = (trans[axis] / n).sqrt();
        rot[axis] = (rot[axis] / n).sqrt();
    }
    Some((trans, rot))
}
