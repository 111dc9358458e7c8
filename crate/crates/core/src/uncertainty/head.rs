//! The trainable uncertainty regressor and its gradient-descent trainer.
//!
//! Architecture: standardized features → dense(hidden, tanh) → dense(6),
//! plus an optional per-object additive output offset so that objects with
//! systematically different error statistics can be told apart. Outputs
//! are log-variances, clamped to `[LOG_VAR_MIN, LOG_VAR_MAX]`.
//!
//! Training is plain seeded mini-batch gradient descent with a fixed step;
//! gradients are analytic and checked against central finite differences
//! in the test suite. Trained heads are immutable and prediction is pure,
//! so heads can be shared freely across threads.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::DiagCov3;
use crate::seeding::rng_for;

use super::{
    ErrorSample, LossWeights, PredictedCovariance, UncertaintyError, LOG_VAR_MAX, LOG_VAR_MIN,
};

pub const HEAD_FORMAT_VERSION: u32 = 1;
pub const FEATURE_DIM: usize = 5;
pub const OUTPUT_DIM: usize = 6;

/// Feature → log-variance regressor. Weight matrices are stored row-major.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UncertaintyHead {
    pub format_version: u32,
    pub hidden_dim: usize,
    pub feature_mean: [f64; FEATURE_DIM],
    pub feature_std: [f64; FEATURE_DIM],
    /// hidden_dim × FEATURE_DIM
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// OUTPUT_DIM × hidden_dim
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// Ids with a learned output offset; empty disables the mechanism.
    pub object_ids: Vec<u32>,
    /// len(object_ids) × OUTPUT_DIM
    pub object_offsets: Vec<f64>,
    /// Outlier-rejection thresholds suggested at training time (nine times
    /// the median predicted trace over the training set).
    pub suggested_aor_trans_trace: Option<f64>,
    pub suggested_aor_rot_trace: Option<f64>,
}

impl UncertaintyHead {
    /// A head that ignores its input and always emits `log_vars`.
    pub fn constant(log_vars: [f64; OUTPUT_DIM]) -> Self {
        UncertaintyHead {
            format_version: HEAD_FORMAT_VERSION,
            hidden_dim: 1,
            feature_mean: [0.0; FEATURE_DIM],
            feature_std: [1.0; FEATURE_DIM],
            w1: vec![0.0; FEATURE_DIM],
            b1: vec![0.0],
            w2: vec![0.0; OUTPUT_DIM],
            b2: log_vars.to_vec(),
            object_ids: Vec::new(),
            object_offsets: Vec::new(),
            suggested_aor_trans_trace: None,
            suggested_aor_rot_trace: None,
        }
    }

    fn standardize(&self, features: &[f64; FEATURE_DIM]) -> [f64; FEATURE_DIM] {
        let mut out = [0.0; FEATURE_DIM];
        for i in 0..FEATURE_DIM {
            out[i] = (features[i] - self.feature_mean[i]) / self.feature_std[i];
        }
        out
    }

    fn object_index(&self, object_id: Option<u32>) -> Option<usize> {
        object_id.and_then(|id| self.object_ids.iter().position(|x| *x == id))
    }

    /// Forward pass returning hidden activations and the raw (unclamped)
    /// outputs; used by prediction and backprop alike.
    fn forward(
        &self,
        features: &[f64; FEATURE_DIM],
        obj: Option<usize>,
    ) -> (Vec<f64>, [f64; OUTPUT_DIM]) {
        let x = self.standardize(features);
        let h = self.hidden_dim;
        let mut hidden = vec![0.0; h];
        for j in 0..h {
            let mut pre = self.b1[j];
            for (k, xk) in x.iter().enumerate() {
                pre += self.w1[j * FEATURE_DIM + k] * xk;
            }
            hidden[j] = pre.tanh();
        }
        let mut raw = [0.0; OUTPUT_DIM];
        for (i, out) in raw.iter_mut().enumerate() {
            let mut acc = self.b2[i];
            for (j, hj) in hidden.iter().enumerate() {
                acc += self.w2[i * h + j] * hj;
            }
            if let Some(o) = obj {
                acc += self.object_offsets[o * OUTPUT_DIM + i];
            }
            *out = acc;
        }
        (hidden, raw)
    }

    /// Predicted log-variances, clamped. First three components are
    /// translational (m²), last three rotational (rad²).
    pub fn log_variances(
        &self,
        features: &[f64; FEATURE_DIM],
        object_id: Option<u32>,
    ) -> [f64; OUTPUT_DIM] {
        let (_, raw) = self.forward(features, self.object_index(object_id));
        raw.map(|s| s.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
    }

    /// Exponentiate the predicted log-variances into a covariance; positive
    /// definite by construction.
    pub fn predict(
        &self,
        features: &[f64; FEATURE_DIM],
        object_id: Option<u32>,
    ) -> PredictedCovariance {
        let s = self.log_variances(features, object_id);
        PredictedCovariance {
            translation: DiagCov3::new(s[0].exp(), s[1].exp(), s[2].exp())
                .expect("exp of clamped value is positive and finite"),
            rotation: DiagCov3::new(s[3].exp(), s[4].exp(), s[5].exp())
                .expect("exp of clamped value is positive and finite"),
        }
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), UncertaintyError> {
        let file = File::create(path)?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, UncertaintyError> {
        let head: UncertaintyHead = serde_json::from_reader(File::open(path)?)?;
        if head.format_version != HEAD_FORMAT_VERSION {
            return Err(UncertaintyError::UnsupportedFormat {
                found: head.format_version,
                expected: HEAD_FORMAT_VERSION,
            });
        }
        let consistent = head.w1.len() == head.hidden_dim * FEATURE_DIM
            && head.b1.len() == head.hidden_dim
            && head.w2.len() == OUTPUT_DIM * head.hidden_dim
            && head.b2.len() == OUTPUT_DIM
            && head.object_offsets.len() == head.object_ids.len() * OUTPUT_DIM;
        if !consistent {
            return Err(UncertaintyError::UnsupportedFormat {
                found: head.format_version,
                expected: HEAD_FORMAT_VERSION,
            });
        }
        Ok(head)
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.object_offsets.len()
    }

    /// Parameters flattened in a fixed order (w1, b1, w2, b2, offsets);
    /// used by the finite-difference gradient checks.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend(&self.w1);
        out.extend(&self.b1);
        out.extend(&self.w2);
        out.extend(&self.b2);
        out.extend(&self.object_offsets);
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut cursor = 0;
        for dst in [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.object_offsets,
        ] {
            let len = dst.len();
            dst.copy_from_slice(&flat[cursor..cursor + len]);
            cursor += len;
        }
    }
}

/// Training hyperparameters. Defaults match the crate-wide scenario scale.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Learn a per-object additive output offset.
    pub object_offsets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_dim: 32,
            learning_rate: 0.02,
            epochs: 300,
            batch_size: 64,
            seed: 0,
            weights: LossWeights::default(),
            object_offsets: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs_run: usize,
}

/// Mean weighted NLL over the batch:
/// `λ_t · mean(L_t) + λ_ϑ · mean(L_ϑ)`.
pub fn batch_loss(
    head: &UncertaintyHead,
    samples: &[ErrorSample],
    weights: &LossWeights,
) -> Result<f64, UncertaintyError> {
    if samples.is_empty() {
        return Err(UncertaintyError::EmptyBatch);
    }
    let mut trans = 0.0;
    let mut rot = 0.0;
    for sample in samples {
        let s = head.log_variances(&sample.features, Some(sample.object_id));
        trans += super::nll_loss(&sample.trans_error, &Vector3::new(s[0], s[1], s[2]));
        rot += super::nll_loss(&sample.rot_error, &Vector3::new(s[3], s[4], s[5]));
    }
    let n = samples.len() as f64;
    Ok(weights.translation * trans / n + weights.rotation * rot / n)
}

/// Loss and its analytic gradient with respect to every head parameter,
/// in `flatten_params` order.
pub fn batch_loss_gradient(
    head: &UncertaintyHead,
    samples: &[ErrorSample],
    weights: &LossWeights,
) -> Result<(f64, Vec<f64>), UncertaintyError> {
    if samples.is_empty() {
        return Err(UncertaintyError::EmptyBatch);
    }
    let h = head.hidden_dim;
    let mut grad_w1 = vec![0.0; head.w1.len()];
    let mut grad_b1 = vec![0.0; head.b1.len()];
    let mut grad_w2 = vec![0.0; head.w2.len()];
    let mut grad_b2 = vec![0.0; head.b2.len()];
    let mut grad_off = vec![0.0; head.object_offsets.len()];
    let n = samples.len() as f64;
    let mut loss = 0.0;

    for sample in samples {
        let obj = head.object_index(Some(sample.object_id));
        let (hidden, raw) = head.forward(&sample.features, obj);
        let x = head.standardize(&sample.features);

        // d(batch_loss)/ds_i = ½ λ (1 - exp(-s_i) e_i²) / n, zero where the
        // clamp is active.
        let mut ds = [0.0; OUTPUT_DIM];
        for i in 0..OUTPUT_DIM {
            let s = raw[i].clamp(LOG_VAR_MIN, LOG_VAR_MAX);
            let (err, lambda) = if i < 3 {
                (sample.trans_error[i], weights.translation)
            } else {
                (sample.rot_error[i - 3], weights.rotation)
            };
            loss += 0.5 * lambda * ((-s).exp() * err * err + s) / n;
            if raw[i] > LOG_VAR_MIN && raw[i] < LOG_VAR_MAX {
                ds[i] = 0.5 * lambda * (1.0 - (-s).exp() * err * err) / n;
            }
        }

        let mut dh = vec![0.0; h];
        for i in 0..OUTPUT_DIM {
            if ds[i] == 0.0 {
                continue;
            }
            grad_b2[i] += ds[i];
            if let Some(o) = obj {
                grad_off[o * OUTPUT_DIM + i] += ds[i];
            }
            for j in 0..h {
                grad_w2[i * h + j] += ds[i] * hidden[j];
                dh[j] += head.w2[i * h + j] * ds[i];
            }
        }
        for j in 0..h {
            let dpre = dh[j] * (1.0 - hidden[j] * hidden[j]);
            if dpre == 0.0 {
                continue;
            }
            grad_b1[j] += dpre;
            for (k, xk) in x.iter().enumerate() {
                grad_w1[j * FEATURE_DIM + k] += dpre * xk;
            }
        }
    }

    let mut grad = Vec::with_capacity(head.num_params());
    grad.extend(grad_w1);
    grad.extend(grad_b1);
    grad.extend(grad_w2);
    grad.extend(grad_b2);
    grad.extend(grad_off);
    Ok((loss, grad))
}

fn initialize_head(samples: &[ErrorSample], config: &TrainConfig) -> UncertaintyHead {
    let mut mean = [0.0; FEATURE_DIM];
    let mut std = [0.0; FEATURE_DIM];
    let n = samples.len() as f64;
    for sample in samples {
        for i in 0..FEATURE_DIM {
            mean[i] += sample.features[i] / n;
        }
    }
    for sample in samples {
        for i in 0..FEATURE_DIM {
            let d = sample.features[i] - mean[i];
            std[i] += d * d / n;
        }
    }
    for s in &mut std {
        *s = s.sqrt().max(1e-9);
    }

    let mut object_ids: Vec<u32> = if config.object_offsets {
        samples.iter().map(|s| s.object_id).collect()
    } else {
        Vec::new()
    };
    object_ids.sort_unstable();
    object_ids.dedup();

    let h = config.hidden_dim;
    let mut rng = rng_for(config.seed, "train/init");
    let mut xavier = |fan_in: usize, fan_out: usize, len: usize| -> Vec<f64> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        (0..len).map(|_| rng.gen_range(-limit..limit)).collect()
    };
    let w1 = xavier(FEATURE_DIM, h, h * FEATURE_DIM);
    let w2 = xavier(h, OUTPUT_DIM, OUTPUT_DIM * h);

    UncertaintyHead {
        format_version: HEAD_FORMAT_VERSION,
        hidden_dim: h,
        feature_mean: mean,
        feature_std: std,
        w1,
        b1: vec![0.0; h],
        w2,
        b2: vec![0.0; OUTPUT_DIM],
        object_offsets: vec![0.0; object_ids.len() * OUTPUT_DIM],
        object_ids,
        suggested_aor_trans_trace: None,
        suggested_aor_rot_trace: None,
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Train a head on `samples` by seeded mini-batch gradient descent with a
/// fixed step. Zero epochs returns the initialized head unchanged.
pub fn train_head(
    samples: &[ErrorSample],
    config: &TrainConfig,
) -> Result<(UncertaintyHead, TrainingSummary), UncertaintyError> {
    if samples.is_empty() {
        return Err(UncertaintyError::EmptyBatch);
    }
    let mut head = initialize_head(samples, config);
    let initial_loss = batch_loss(&head, samples, &config.weights)?;
    let mut rng = rng_for(config.seed, "train/shuffle");
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let batch = config.batch_size.max(1);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let minibatch: Vec<ErrorSample> = chunk.iter().map(|&i| samples[i]).collect();
            let (loss, grad) = batch_loss_gradient(&head, &minibatch, &config.weights)?;
            if !loss.is_finite() {
                return Err(UncertaintyError::Divergence { epoch });
            }
            let mut params = head.flatten_params();
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= config.learning_rate * g;
            }
            if params.iter().any(|p| !p.is_finite()) {
                return Err(UncertaintyError::Divergence { epoch });
            }
            head.set_params(&params);
        }
    }

    let final_loss = batch_loss(&head, samples, &config.weights)?;
    // Fixed-step descent must not end above where it started; the output
    // clamp can keep a runaway loss finite, so this is the divergence
    // signal for an oversized learning rate.
    let slack = 1e-9 + 0.01 * initial_loss.abs();
    if !final_loss.is_finite() || (config.epochs > 0 && final_loss > initial_loss + slack) {
        return Err(UncertaintyError::Divergence {
            epoch: config.epochs,
        });
    }

    let mut trans_traces: Vec<f64> = Vec::with_capacity(samples.len());
    let mut rot_traces: Vec<f64> = Vec::with_capacity(samples.len());
    for sample in samples {
        let cov = head.predict(&sample.features, Some(sample.object_id));
        trans_traces.push(cov.translation.trace());
        rot_traces.push(cov.rotation.trace());
    }
    head.suggested_aor_trans_trace = Some(9.0 * median(&mut trans_traces));
    head.suggested_aor_rot_trace = Some(9.0 * median(&mut rot_traces));

    Ok((
        head,
        TrainingSummary {
            initial_loss,
            final_loss,
            epochs_run: config.epochs,
        },
    ))
}
