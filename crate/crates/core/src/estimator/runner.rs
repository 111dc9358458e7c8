//! Drives a filter instance over a dataset's IMU and measurement streams.
//!
//! The four run modes mirror the experimental arms: a fixed measurement
//! covariance, the predicted (aleatoric) covariance, prediction plus
//! dynamic anchor switching, and prediction plus uncertainty-based outlier
//! rejection.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geometry::{DiagCov3, Pose, UnitQuat};
use crate::seeding::rng_for;
use crate::sim::dataset::fmt_f64;
use crate::sim::Dataset;
use crate::uncertainty::UncertaintyHead;

use super::{
    choose_anchor, AnchorPolicy, ErrorStateFilter, EstimatorError, GatingConfig, ImuNoiseParams,
    NavState, PoseUpdateInput, PriorConfig, UpdateOutcome,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    Fixed,
    Aleatoric,
    AleatoricSwitching,
    AleatoricAor,
}

impl FilterMode {
    pub fn uses_head(&self) -> bool {
        !matches!(self, FilterMode::Fixed)
    }

    pub fn all() -> [FilterMode; 4] {
        [
            FilterMode::Fixed,
            FilterMode::Aleatoric,
            FilterMode::AleatoricSwitching,
            FilterMode::AleatoricAor,
        ]
    }
}

impl std::fmt::Display for FilterMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            FilterMode::Fixed => "fixed",
            FilterMode::Aleatoric => "aleatoric",
            FilterMode::AleatoricSwitching => "aleatoric-switching",
            FilterMode::AleatoricAor => "aleatoric-aor",
        };
        write!(f, "{name}")
    }
}

impl std::str::FromStr for FilterMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fixed" => Ok(FilterMode::Fixed),
            "aleatoric" => Ok(FilterMode::Aleatoric),
            "aleatoric-switching" => Ok(FilterMode::AleatoricSwitching),
            "aleatoric-aor" => Ok(FilterMode::AleatoricAor),
            other => Err(format!(
                "unknown mode '{other}' (expected fixed | aleatoric | aleatoric-switching | aleatoric-aor)"
            )),
        }
    }
}

/// Everything a single filter run needs besides the dataset and head.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunOptions {
    pub mode: FilterMode,
    /// Per-axis measurement sigmas used in fixed mode (m, rad).
    pub fixed_trans_sigma: [f64; 3],
    pub fixed_rot_sigma: [f64; 3],
    pub gating: GatingConfig,
    pub anchor: AnchorPolicy,
    pub priors: PriorConfig,
    /// Seed for drawing the initial state error from the priors; `None`
    /// initializes exactly at ground truth.
    pub init_perturbation_seed: Option<u64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            mode: FilterMode::Fixed,
            fixed_trans_sigma: [0.03; 3],
            fixed_rot_sigma: [0.035; 3],
            gating: GatingConfig::default(),
            anchor: AnchorPolicy::default(),
            priors: PriorConfig::default(),
            init_perturbation_seed: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventCode {
    Ok,
    Aor,
    Gate,
}

impl std::fmt::Display for EventCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EventCode::Ok => "OK",
            EventCode::Aor => "AOR",
            EventCode::Gate => "GATE",
        };
        write!(f, "{s}")
    }
}

/// One log row: the estimate after processing the event at time `t`.
#[derive(Clone, Debug)]
pub struct ResultRow {
    pub t: f64,
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub cov_diag: Vec<f64>,
    pub anchor_id: u32,
    pub event: EventCode,
}

#[derive(Clone, Debug, Default)]
pub struct TrajectoryResult {
    pub rows: Vec<ResultRow>,
}

impl TrajectoryResult {
    pub fn anchor_switches(&self) -> u32 {
        self.rows
            .windows(2)
            .filter(|w| w[0].anchor_id != w[1].anchor_id)
            .count() as u32
    }

    pub fn rejection_counts(&self) -> (u32, u32) {
        let aor = self
            .rows
            .iter()
            .filter(|r| r.event == EventCode::Aor)
            .count() as u32;
        let gate = self
            .rows
            .iter()
            .filter(|r| r.event == EventCode::Gate)
            .count() as u32;
        (aor, gate)
    }

    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<(), EstimatorError> {
        let mut out = BufWriter::new(File::create(path)?);
        let dim = self.rows.first().map_or(0, |r| r.cov_diag.len());
        let mut header = vec![
            "t".to_string(),
            "px".into(),
            "py".into(),
            "pz".into(),
            "qx".into(),
            "qy".into(),
            "qz".into(),
            "qw".into(),
            "vx".into(),
            "vy".into(),
            "vz".into(),
        ];
        header.extend((0..dim).map(|i| format!("cov_{i}")));
        header.push("anchor_id".into());
        header.push("event".into());
        writeln!(out, "{}", header.join(","))?;
        for row in &self.rows {
            let mut fields = vec![fmt_f64(row.t)];
            fields.extend(row.pose.to_seven().iter().map(|v| fmt_f64(*v)));
            fields.extend(row.velocity.iter().map(|v| fmt_f64(*v)));
            fields.extend(row.cov_diag.iter().map(|v| fmt_f64(*v)));
            fields.push(row.anchor_id.to_string());
            fields.push(row.event.to_string());
            writeln!(out, "{}", fields.join(","))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<P: AsRef<Path>>(path: P) -> Result<Self, EstimatorError> {
        let mut reader = csv::Reader::from_path(path)?;
        let n_cols = reader.headers()?.len();
        let dim = n_cols - 13;
        let mut rows = Vec::new();
        for record in reader.records() {
            let r = record?;
            let num = |i: usize| -> Result<f64, EstimatorError> {
                r[i].parse::<f64>()
                    .map_err(|e| EstimatorError::InvalidConfig(format!("bad result csv: {e}")))
            };
            let mut seven = [0.0; 7];
            for (i, v) in seven.iter_mut().enumerate() {
                *v = num(1 + i)?;
            }
            let mut cov_diag = Vec::with_capacity(dim);
            for i in 0..dim {
                cov_diag.push(num(11 + i)?);
            }
            let event = match &r[n_cols - 1] {
                "OK" => EventCode::Ok,
                "AOR" => EventCode::Aor,
                "GATE" => EventCode::Gate,
                other => {
                    return Err(EstimatorError::InvalidConfig(format!(
                        "bad event code '{other}'"
                    )))
                }
            };
            rows.push(ResultRow {
                t: num(0)?,
                pose: Pose::from_seven(&seven)?,
                velocity: Vector3::new(num(8)?, num(9)?, num(10)?),
                cov_diag,
                anchor_id: r[n_cols - 2]
                    .parse()
                    .map_err(|e| EstimatorError::InvalidConfig(format!("bad anchor id: {e}")))?,
                event,
            });
        }
        Ok(TrajectoryResult { rows })
    }
}

fn standard_normal3<R: Rng>(rng: &mut R) -> Vector3<f64> {
    Vector3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    )
}

/// Initial state at ground truth, optionally perturbed by a draw from the
/// priors (the anchor object is never perturbed; it defines the frame).
fn initial_state(dataset: &Dataset, options: &RunOptions, anchor_id: u32) -> NavState {
    let t0 = &dataset.truth[0];
    let mut state = NavState::new(&t0.pose, t0.velocity, &dataset.extrinsic, &dataset.layout);
    if let Some(seed) = options.init_perturbation_seed {
        let mut rng = rng_for(seed, "run/init");
        let p = &options.priors;
        state.p_wi += standard_normal3(&mut rng) * p.pos_var.sqrt();
        state.v_wi += standard_normal3(&mut rng) * p.vel_var.sqrt();
        state.q_wi = state.q_wi.compose(&UnitQuat::from_scaled_axis(
            &(standard_normal3(&mut rng) * p.att_var.sqrt()),
        ));
        state.p_ic += standard_normal3(&mut rng) * p.ext_pos_var.sqrt();
        state.q_ic = state.q_ic.compose(&UnitQuat::from_scaled_axis(
            &(standard_normal3(&mut rng) * p.ext_att_var.sqrt()),
        ));
        for object in &mut state.objects {
            // Draw consistently for every object, then discard the anchor's
            // perturbation so run pairs with different anchors stay aligned.
            let dp = standard_normal3(&mut rng) * p.object_pos_var.sqrt();
            let dth = standard_normal3(&mut rng) * p.object_att_var.sqrt();
            if object.id != anchor_id {
                object.p_ow += dp;
                object.q_ow = object.q_ow.compose(&UnitQuat::from_scaled_axis(&dth));
            }
        }
    }
    state
}

/// Run the filter over the dataset in the given mode. Logs one row per
/// processed measurement, and one per measurement-free camera epoch.
pub fn run(
    dataset: &Dataset,
    options: &RunOptions,
    head: Option<&UncertaintyHead>,
) -> Result<TrajectoryResult, EstimatorError> {
    options.anchor.validate()?;
    if options.mode.uses_head() && head.is_none() {
        return Err(EstimatorError::InvalidConfig(format!(
            "mode {} requires a trained uncertainty head",
            options.mode
        )));
    }

    let aor_gating = |head: Option<&UncertaintyHead>| -> Result<GatingConfig, EstimatorError> {
        let head = head.expect("mode check above");
        let trans = options
            .gating
            .aor_trans_trace
            .or(head.suggested_aor_trans_trace);
        let rot = options
            .gating
            .aor_rot_trace
            .or(head.suggested_aor_rot_trace);
        if trans.is_none() && rot.is_none() {
            return Err(EstimatorError::InvalidConfig(
                "aleatoric-aor mode needs AOR thresholds (config or trained head)".into(),
            ));
        }
        Ok(GatingConfig {
            aor_trans_trace: trans,
            aor_rot_trace: rot,
            mahalanobis_chi2: options.gating.mahalanobis_chi2,
        })
    };
    let gating = match options.mode {
        FilterMode::AleatoricAor => aor_gating(head)?,
        _ => GatingConfig {
            aor_trans_trace: None,
            aor_rot_trace: None,
            mahalanobis_chi2: options.gating.mahalanobis_chi2,
        },
    };

    let anchor_id = dataset.layout.anchor_id;
    let state = initial_state(dataset, options, anchor_id);
    let mut filter = ErrorStateFilter::new(
        dataset.truth[0].t,
        state,
        anchor_id,
        &options.priors,
        ImuNoiseParams::from_profile(&dataset.noise),
    )?;

    let fixed_trans = DiagCov3::new(
        options.fixed_trans_sigma[0].powi(2).max(1e-18),
        options.fixed_trans_sigma[1].powi(2).max(1e-18),
        options.fixed_trans_sigma[2].powi(2).max(1e-18),
    )?;
    let fixed_rot = DiagCov3::new(
        options.fixed_rot_sigma[0].powi(2).max(1e-18),
        options.fixed_rot_sigma[1].powi(2).max(1e-18),
        options.fixed_rot_sigma[2].powi(2).max(1e-18),
    )?;

    // The run mode pins the anchor behavior so mode comparisons stay
    // clean; the policy carries the hysteresis ratio.
    let dynamic_switching = options.mode == FilterMode::AleatoricSwitching;

    let mut result = TrajectoryResult::default();
    let mut measurements = dataset.measurements.iter().peekable();
    let mut imu = dataset.imu.iter().peekable();

    for idx in dataset.trajectory.cam_epoch_indices() {
        let epoch_t = dataset.truth[idx].t;
        while let Some(sample) = imu.peek() {
            if sample.t <= epoch_t + 1e-12 {
                filter.propagate(sample)?;
                imu.next();
            } else {
                break;
            }
        }

        let mut epoch_records = Vec::new();
        while let Some(rec) = measurements.peek() {
            if rec.t == epoch_t {
                epoch_records.push(*rec);
                measurements.next();
            } else if rec.t < epoch_t {
                measurements.next();
            } else {
                break;
            }
        }

        let inputs: Vec<PoseUpdateInput> = epoch_records
            .iter()
            .map(|rec| {
                let (trans_cov, rot_cov) = if options.mode.uses_head() {
                    let cov = head
                        .expect("mode check above")
                        .predict(&rec.features, Some(rec.object_id));
                    (cov.translation, cov.rotation)
                } else {
                    (fixed_trans, fixed_rot)
                };
                PoseUpdateInput {
                    t: rec.t,
                    object_id: rec.object_id,
                    measured_t_co: rec.measured,
                    trans_cov,
                    rot_cov,
                }
            })
            .collect();

        if dynamic_switching && !inputs.is_empty() {
            let scores: Vec<(u32, f64)> = inputs
                .iter()
                .map(|m| (m.object_id, m.trans_cov.trace() + m.rot_cov.trace()))
                .collect();
            if let Some(choice) =
                choose_anchor(&scores, filter.anchor_id(), options.anchor.hysteresis_ratio)
            {
                if choice != filter.anchor_id() {
                    filter.switch_anchor(choice, &options.priors)?;
                }
            }
        }

        let log_row = |filter: &ErrorStateFilter, event: EventCode| ResultRow {
            t: epoch_t,
            pose: filter.state().pose_wi(),
            velocity: filter.state().v_wi,
            cov_diag: (0..filter.dim())
                .map(|i| filter.covariance()[(i, i)])
                .collect(),
            anchor_id: filter.anchor_id(),
            event,
        };

        if inputs.is_empty() {
            result.rows.push(log_row(&filter, EventCode::Ok));
            continue;
        }
        for input in &inputs {
            let outcome = filter.update_object_pose(input, &gating)?;
            let event = match outcome {
                UpdateOutcome::Accepted => EventCode::Ok,
                UpdateOutcome::RejectedAor => EventCode::Aor,
                UpdateOutcome::RejectedGate { .. } => EventCode::Gate,
            };
            result.rows.push(log_row(&filter, event));
        }
    }

    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::trajectory::default_extrinsic;
    use crate::sim::{generate_dataset, NoiseProfile, ObjectLayout, TrajectorySpec};
    use crate::uncertainty::{error_samples, train_head, TrainConfig};

    fn quick_dataset(seed: u64) -> Dataset {
        let spec = TrajectorySpec {
            duration_s: 3.0,
            ..TrajectorySpec::default()
        };
        generate_dataset(
            &spec,
            &ObjectLayout::default_pole(),
            &NoiseProfile::default(),
            &default_extrinsic(),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn empty_measurement_stream_dead_reckons() {
        let mut dataset = quick_dataset(1);
        dataset.measurements.clear();
        let result = run(&dataset, &RunOptions::default(), None).unwrap();
        assert_eq!(result.rows.len(), dataset.trajectory.num_cam_epochs());
        assert!(result.rows.iter().all(|r| r.event == EventCode::Ok));
        assert_eq!(result.anchor_switches(), 0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let dataset = quick_dataset(2);
        let options = RunOptions {
            init_perturbation_seed: Some(5),
            ..RunOptions::default()
        };
        let a = run(&dataset, &options, None).unwrap();
        let b = run(&dataset, &options, None).unwrap();
        assert_eq!(a.rows.len(), b.rows.len());
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.t.to_bits(), y.t.to_bits());
            assert_eq!(
                x.pose.to_seven().map(f64::to_bits),
                y.pose.to_seven().map(f64::to_bits)
            );
            let xa: Vec<u64> = x.cov_diag.iter().map(|v| v.to_bits()).collect();
            let ya: Vec<u64> = y.cov_diag.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xa, ya);
        }
    }

    #[test]
    fn aleatoric_mode_requires_head() {
        let dataset = quick_dataset(3);
        let options = RunOptions {
            mode: FilterMode::Aleatoric,
            ..RunOptions::default()
        };
        assert!(matches!(
            run(&dataset, &options, None),
            Err(EstimatorError::InvalidConfig(_))
        ));
    }

    #[test]
    fn aleatoric_run_tracks_truth_reasonably() {
        let dataset = quick_dataset(4);
        let samples = error_samples(&dataset);
        let (trained, _) = train_head(
            &samples,
            &TrainConfig {
                epochs: 60,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let options = RunOptions {
            mode: FilterMode::Aleatoric,
            ..RunOptions::default()
        };
        let result = run(&dataset, &options, Some(&trained)).unwrap();
        let last = result.rows.last().unwrap();
        let idx = (last.t * dataset.trajectory.imu_rate_hz).round() as usize;
        let truth = &dataset.truth[idx];
        assert!((last.pose.translation - truth.pose.translation).norm() < 0.3);
    }

    #[test]
    fn result_csv_round_trip() {
        let dataset = quick_dataset(6);
        let result = run(&dataset, &RunOptions::default(), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("result.csv");
        result.write_csv(&path).unwrap();
        let back = TrajectoryResult::read_csv(&path).unwrap();
        assert_eq!(result.rows.len(), back.rows.len());
        for (a, b) in result.rows.iter().zip(&back.rows) {
            assert_eq!(a.t, b.t);
            assert_eq!(a.pose.to_seven(), b.pose.to_seven());
            assert_eq!(a.cov_diag, b.cov_diag);
            assert_eq!(a.anchor_id, b.anchor_id);
            assert_eq!(a.event, b.event);
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for mode in FilterMode::all() {
            let s = mode.to_string();
            assert_eq!(s.parse::<FilterMode>().unwrap(), mode);
        }
        assert!("bogus".parse::<FilterMode>().is_err());
    }
}
