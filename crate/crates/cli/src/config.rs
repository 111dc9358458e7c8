//! The single JSON configuration file consumed by every subcommand.
//!
//! One file describes a whole reproducible experiment: scenario, noise,
//! training, estimator settings, and the evaluation protocol. CLI flags
//! override individual keys; all randomness derives from `seed`.

use serde::{Deserialize, Serialize};

use relnav::estimator::{AnchorPolicy, FilterMode, GatingConfig, PriorConfig, RunOptions};
use relnav::geometry::Pose;
use relnav::sim::trajectory::default_extrinsic;
use relnav::sim::{NoiseProfile, ObjectLayout, TrajectorySpec};
use relnav::uncertainty::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorSection {
    pub fixed_trans_sigma: [f64; 3],
    pub fixed_rot_sigma: [f64; 3],
    pub gating: GatingConfig,
    pub anchor: AnchorPolicy,
    pub priors: PriorConfig,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        let defaults = RunOptions::default();
        EstimatorSection {
            fixed_trans_sigma: defaults.fixed_trans_sigma,
            fixed_rot_sigma: defaults.fixed_rot_sigma,
            gating: defaults.gating,
            anchor: defaults.anchor,
            priors: defaults.priors,
        }
    }
}

impl EstimatorSection {
    pub fn to_run_options(&self, mode: FilterMode) -> RunOptions {
        use relnav::estimator::AnchorMode;
        // Keep the stored policy consistent with what the mode enacts.
        let mut anchor = self.anchor;
        anchor.mode = if mode == FilterMode::AleatoricSwitching {
            AnchorMode::DynamicSwitching
        } else {
            AnchorMode::FixedAnchor
        };
        RunOptions {
            mode,
            fixed_trans_sigma: self.fixed_trans_sigma,
            fixed_rot_sigma: self.fixed_rot_sigma,
            gating: self.gating,
            anchor,
            priors: self.priors,
            init_perturbation_seed: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub modes: Vec<FilterMode>,
    pub num_seeds: usize,
    /// Worker threads for the (mode, seed) fan-out; `null` = all cores.
    pub jobs: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            modes: FilterMode::all().to_vec(),
            num_seeds: 10,
            jobs: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub trajectory: TrajectorySpec,
    pub layout: ObjectLayout,
    pub noise: NoiseProfile,
    pub extrinsic: Pose,
    pub train: TrainConfig,
    pub estimator: EstimatorSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            trajectory: TrajectorySpec::default(),
            layout: ObjectLayout::default_pole(),
            noise: NoiseProfile::default(),
            extrinsic: default_extrinsic(),
            train: TrainConfig::default(),
            estimator: EstimatorSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> anyhow::Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| anyhow::anyhow!("cannot open config {}: {e}", path.display()))?;
        let config: RunConfig = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| anyhow::anyhow!("cannot parse config {}: {e}", path.display()))?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.trajectory.validate()?;
        self.layout.validate()?;
        self.noise.validate()?;
        self.estimator.anchor.validate()?;
        Ok(())
    }
}
