//! Dataset assembly and the on-disk format.
//!
//! A dataset directory contains:
//! - `imu.csv`: `t, wx, wy, wz, ax, ay, az`
//! - `meas.csv`: `t, object_id, measured pose (7), true pose (7),
//!   true variances (6), features (5), outlier flag`
//! - `truth.csv`: `t, pose (7), velocity (3)`
//! - `layout.json`, `spec.json`
//!
//! Poses are serialized as `px py pz qx qy qz qw`; every float is written
//! with 17 significant digits so parsing reproduces the exact bit pattern.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::{DiagCov3, Pose};
use crate::seeding::rng_for;

use super::trajectory::{default_extrinsic, TrajectoryModel};
use super::{
    burst_windows_for_objects, sample_imu, simulate_measurement, BiasSample, ImuSample,
    MeasurementRecord, NoiseProfile, ObjectLayout, SimError, TrajectorySpec, TruthSample,
};

/// A fully generated scenario, either produced in memory or read back from
/// a dataset directory. `bias_log` only survives in-memory generation.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub trajectory: TrajectorySpec,
    pub layout: ObjectLayout,
    pub noise: NoiseProfile,
    pub extrinsic: Pose,
    pub seed: u64,
    pub truth: Vec<TruthSample>,
    pub imu: Vec<ImuSample>,
    pub measurements: Vec<MeasurementRecord>,
    pub bias_log: Option<Vec<BiasSample>>,
}

/// Everything that parameterizes a dataset, as stored in `spec.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub trajectory: TrajectorySpec,
    pub noise: NoiseProfile,
    #[serde(default = "default_extrinsic")]
    pub extrinsic: Pose,
    pub seed: u64,
}

impl Dataset {
    /// Fraction of (epoch, object) pairs lost to occlusion.
    pub fn occlusion_fraction(&self) -> f64 {
        let possible = self.trajectory.num_cam_epochs() * self.layout.objects.len();
        if possible == 0 {
            return 0.0;
        }
        1.0 - self.measurements.len() as f64 / possible as f64
    }

    /// Measurements grouped by epoch time, preserving (t, object_id) order.
    pub fn measurement_epochs(&self) -> Vec<(f64, Vec<&MeasurementRecord>)> {
        let mut epochs: Vec<(f64, Vec<&MeasurementRecord>)> = Vec::new();
        for rec in &self.measurements {
            match epochs.last_mut() {
                Some((t, group)) if *t == rec.t => group.push(rec),
                _ => epochs.push((rec.t, vec![rec])),
            }
        }
        epochs
    }
}

/// Generate the full dataset for a scenario. Deterministic in every byte
/// for a fixed `(spec, layout, profile, extrinsic, seed)`.
pub fn generate_dataset(
    spec: &TrajectorySpec,
    layout: &ObjectLayout,
    profile: &NoiseProfile,
    extrinsic: &Pose,
    seed: u64,
) -> Result<Dataset, SimError> {
    spec.validate()?;
    layout.validate()?;
    profile.validate()?;

    let model = TrajectoryModel::new(spec, layout)?;
    let truth = super::generate_trajectory(spec, layout)?;

    let mut imu_rng = rng_for(seed, "sim/imu");
    let (imu, bias_log) = sample_imu(&model, spec, profile, &mut imu_rng);

    let mut burst_rng = rng_for(seed, "sim/bursts");
    let bursts = burst_windows_for_objects(profile, layout, spec.duration_s, &mut burst_rng);
    let empty: Vec<(f64, f64)> = Vec::new();

    let mut meas_rng = rng_for(seed, "sim/meas");
    let mut objects = layout.objects.clone();
    objects.sort_by_key(|o| o.id);

    let mut measurements = Vec::new();
    for idx in spec.cam_epoch_indices() {
        let sample = &truth[idx];
        let camera = sample.pose.compose(extrinsic);
        for object in &objects {
            let windows = bursts.get(&object.id).unwrap_or(&empty);
            if let Some(rec) =
                simulate_measurement(&camera, object, profile, sample.t, windows, &mut meas_rng)
            {
                measurements.push(rec);
            }
        }
    }

    Ok(Dataset {
        trajectory: spec.clone(),
        layout: layout.clone(),
        noise: profile.clone(),
        extrinsic: *extrinsic,
        seed,
        truth,
        imu,
        measurements,
        bias_log: Some(bias_log),
    })
}

/// 17 significant digits: enough to round-trip any f64 exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_csv<P: AsRef<Path>>(
    path: P,
    header: &[&str],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<(), SimError> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

impl Dataset {
    pub fn write_dir<P: AsRef<Path>>(&self, dir: P) -> Result<(), SimError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;

        write_csv(
            dir.join("imu.csv"),
            &["t", "wx", "wy", "wz", "ax", "ay", "az"],
            self.imu.iter().map(|s| {
                let mut row = vec![fmt_f64(s.t)];
                row.extend(s.gyro.iter().map(|v| fmt_f64(*v)));
                row.extend(s.accel.iter().map(|v| fmt_f64(*v)));
                row
            }),
        )?;

        write_csv(
            dir.join("truth.csv"),
            &[
                "t", "px", "py", "pz", "qx", "qy", "qz", "qw", "vx", "vy", "vz",
            ],
            self.truth.iter().map(|s| {
                let mut row = vec![fmt_f64(s.t)];
                row.extend(s.pose.to_seven().iter().map(|v| fmt_f64(*v)));
                row.extend(s.velocity.iter().map(|v| fmt_f64(*v)));
                row
            }),
        )?;

        let meas_header = [
            "t",
            "object_id",
            "mx",
            "my",
            "mz",
            "mqx",
            "mqy",
            "mqz",
            "mqw",
            "tx",
            "ty",
            "tz",
            "tqx",
            "tqy",
            "tqz",
            "tqw",
            "var_tx",
            "var_ty",
            "var_tz",
            "var_r1",
            "var_r2",
            "var_r3",
            "f_dist",
            "f_az",
            "f_el",
            "f_cos",
            "f_size",
            "outlier",
        ];
        write_csv(
            dir.join("meas.csv"),
            &meas_header,
            self.measurements.iter().map(|m| {
                let mut row = vec![fmt_f64(m.t), m.object_id.to_string()];
                row.extend(m.measured.to_seven().iter().map(|v| fmt_f64(*v)));
                row.extend(m.truth.to_seven().iter().map(|v| fmt_f64(*v)));
                row.extend(m.true_trans_var.variances().iter().map(|v| fmt_f64(*v)));
                row.extend(m.true_rot_var.variances().iter().map(|v| fmt_f64(*v)));
                row.extend(m.features.iter().map(|v| fmt_f64(*v)));
                row.push(if m.outlier { "1".into() } else { "0".into() });
                row
            }),
        )?;

        let layout_file = File::create(dir.join("layout.json"))?;
        serde_json::to_writer_pretty(BufWriter::new(layout_file), &self.layout)?;

        let spec = DatasetSpec {
            trajectory: self.trajectory.clone(),
            noise: self.noise.clone(),
            extrinsic: self.extrinsic,
            seed: self.seed,
        };
        let spec_file = File::create(dir.join("spec.json"))?;
        serde_json::to_writer_pretty(BufWriter::new(spec_file), &spec)?;
        Ok(())
    }

    pub fn read_dir<P: AsRef<Path>>(dir: P) -> Result<Dataset, SimError> {
        let dir = dir.as_ref();
        let spec: DatasetSpec = serde_json::from_reader(File::open(dir.join("spec.json"))?)?;
        let layout: ObjectLayout = serde_json::from_reader(File::open(dir.join("layout.json"))?)?;
        layout.validate()?;

        let parse = |file: &str, field: &str, s: &str| -> Result<f64, SimError> {
            s.parse::<f64>().map_err(|e| SimError::Malformed {
                file: file.into(),
                reason: format!("field {field}: {e}"),
            })
        };

        let mut imu = Vec::new();
        let mut reader = csv::Reader::from_path(dir.join("imu.csv"))?;
        for record in reader.records() {
            let r = record?;
            let v: Result<Vec<f64>, _> = (0..7).map(|i| parse("imu.csv", "col", &r[i])).collect();
            let v = v?;
            imu.push(ImuSample {
                t: v[0],
                gyro: Vector3::new(v[1], v[2], v[3]),
                accel: Vector3::new(v[4], v[5], v[6]),
            });
        }

        let mut truth = Vec::new();
        let mut reader = csv::Reader::from_path(dir.join("truth.csv"))?;
        for record in reader.records() {
            let r = record?;
            let v: Result<Vec<f64>, _> =
                (0..11).map(|i| parse("truth.csv", "col", &r[i])).collect();
            let v = v?;
            let pose = Pose::from_seven(&[v[1], v[2], v[3], v[4], v[5], v[6], v[7]])?;
            truth.push(TruthSample {
                t: v[0],
                pose,
                velocity: Vector3::new(v[8], v[9], v[10]),
            });
        }

        let mut measurements = Vec::new();
        let mut reader = csv::Reader::from_path(dir.join("meas.csv"))?;
        for record in reader.records() {
            let r = record?;
            let t = parse("meas.csv", "t", &r[0])?;
            let object_id: u32 = r[1].parse().map_err(|e| SimError::Malformed {
                file: "meas.csv".into(),
                reason: format!("object_id: {e}"),
            })?;
            let f: Result<Vec<f64>, _> = (2..27).map(|i| parse("meas.csv", "col", &r[i])).collect();
            let f = f?;
            let measured = Pose::from_seven(&[f[0], f[1], f[2], f[3], f[4], f[5], f[6]])?;
            let truth_pose = Pose::from_seven(&[f[7], f[8], f[9], f[10], f[11], f[12], f[13]])?;
            measurements.push(MeasurementRecord {
                t,
                object_id,
                measured,
                truth: truth_pose,
                true_trans_var: DiagCov3::new(f[14], f[15], f[16])?,
                true_rot_var: DiagCov3::new(f[17], f[18], f[19])?,
                features: [f[20], f[21], f[22], f[23], f[24]],
                outlier: &r[27] == "1",
            });
        }

        Ok(Dataset {
            trajectory: spec.trajectory,
            layout,
            noise: spec.noise,
            extrinsic: spec.extrinsic,
            seed: spec.seed,
            truth,
            imu,
            measurements,
            bias_log: None,
        })
    }
}
