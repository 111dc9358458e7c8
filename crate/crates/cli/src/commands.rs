//! Subcommand implementations.

use std::path::Path;

use anyhow::{bail, Context};

use relnav::estimator::{run, FilterMode, TrajectoryResult};
use relnav::eval::{compute_metrics, export_plot_data, run_experiment, Experiment};
use relnav::seeding::seed_for;
use relnav::sim::{generate_dataset, Dataset};
use relnav::uncertainty::{
    calibration_matrix, error_samples, split_train_validation, train_head, UncertaintyHead,
    REPORT_ALPHAS,
};

use crate::config::RunConfig;

/// Refuse to clobber an existing file unless `--force` was given.
fn ensure_file_writable(path: &Path, force: bool) -> anyhow::Result<()> {
    if path.exists() && !force {
        bail!(
            "output {} already exists; pass --force to overwrite",
            path.display()
        );
    }
    Ok(())
}

/// Refuse to write into a non-empty directory unless `--force` was given.
fn ensure_dir_writable(path: &Path, force: bool) -> anyhow::Result<()> {
    if path.exists() {
        let non_empty = std::fs::read_dir(path)
            .with_context(|| format!("cannot inspect {}", path.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            bail!(
                "output directory {} is not empty; pass --force to overwrite",
                path.display()
            );
        }
    }
    Ok(())
}

pub fn simulate(config: &RunConfig, out: &Path, force: bool) -> anyhow::Result<()> {
    config.validate()?;
    ensure_dir_writable(out, force)?;
    let dataset = generate_dataset(
        &config.trajectory,
        &config.layout,
        &config.noise,
        &config.extrinsic,
        seed_for(config.seed, "sim"),
    )?;
    dataset.write_dir(out)?;
    println!(
        "wrote dataset to {}: {:.1} s, {} imu samples, {} measurements over {} objects, occlusion fraction {:.3}",
        out.display(),
        dataset.trajectory.duration_s,
        dataset.imu.len(),
        dataset.measurements.len(),
        dataset.layout.objects.len(),
        dataset.occlusion_fraction()
    );
    Ok(())
}

pub fn cmd_train_head(
    config: &RunConfig,
    dataset_dir: &Path,
    out: &Path,
    report: Option<&Path>,
    force: bool,
) -> anyhow::Result<()> {
    ensure_file_writable(out, force)?;
    if let Some(report) = report {
        ensure_file_writable(report, force)?;
    }
    let dataset = Dataset::read_dir(dataset_dir)?;
    let samples = error_samples(&dataset);
    if samples.is_empty() {
        bail!("dataset {} contains no measurements", dataset_dir.display());
    }
    let (train, validation) = split_train_validation(&samples, 0.8, config.seed);
    let mut train_cfg = config.train.clone();
    train_cfg.seed = seed_for(config.seed, "train");
    let (head, summary) = train_head(&train, &train_cfg)?;
    head.save(out)?;
    println!(
        "trained head on {} samples ({} held out): loss {:.4} -> {:.4} over {} epochs; saved to {}",
        train.len(),
        validation.len(),
        summary.initial_loss,
        summary.final_loss,
        summary.epochs_run,
        out.display()
    );

    if let Some(report_path) = report {
        let matrix = calibration_matrix(&head, &validation)?;
        let mut text = String::from("component");
        for alpha in REPORT_ALPHAS {
            text.push_str(&format!(",picp_{alpha}"));
        }
        text.push('\n');
        let names = ["tx", "ty", "tz", "r1", "r2", "r3"];
        for (component, row) in names.iter().zip(matrix.iter()) {
            text.push_str(component);
            for value in row {
                text.push_str(&format!(",{value:.6}"));
            }
            text.push('\n');
        }
        std::fs::write(report_path, text)?;
        println!("wrote calibration report to {}", report_path.display());
    }
    Ok(())
}

pub fn run_filter(
    config: &RunConfig,
    dataset_dir: &Path,
    mode: FilterMode,
    head_path: Option<&Path>,
    out: &Path,
    force: bool,
) -> anyhow::Result<()> {
    ensure_file_writable(out, force)?;
    let dataset = Dataset::read_dir(dataset_dir)?;
    let head = match head_path {
        Some(path) => Some(
            UncertaintyHead::load(path)
                .with_context(|| format!("cannot load head {}", path.display()))?,
        ),
        None => None,
    };
    if mode.uses_head() && head.is_none() {
        bail!("mode {mode} needs --head <file> with a trained uncertainty head");
    }
    let options = config.estimator.to_run_options(mode);
    let result = run(&dataset, &options, head.as_ref())?;
    result.write_csv(out)?;
    let (aor, gate) = result.rejection_counts();
    println!(
        "ran {} on {}: {} rows, {} anchor switches, {} AOR / {} gate rejections; wrote {}",
        mode,
        dataset_dir.display(),
        result.rows.len(),
        result.anchor_switches(),
        aor,
        gate,
        out.display()
    );
    Ok(())
}

pub fn evaluate(
    config: &RunConfig,
    out_dir: &Path,
    head_path: Option<&Path>,
    modes: Option<Vec<FilterMode>>,
    num_seeds: Option<usize>,
    force: bool,
) -> anyhow::Result<()> {
    config.validate()?;
    ensure_dir_writable(out_dir, force)?;
    std::fs::create_dir_all(out_dir)?;

    let head = match head_path {
        Some(path) => Some(UncertaintyHead::load(path)?),
        None => None,
    };
    let experiment = Experiment {
        trajectory: config.trajectory.clone(),
        layout: config.layout.clone(),
        noise: config.noise.clone(),
        extrinsic: config.extrinsic,
        train: config.train.clone(),
        run_template: config.estimator.to_run_options(FilterMode::Fixed),
        modes: modes.unwrap_or_else(|| config.eval.modes.clone()),
        num_seeds: num_seeds.unwrap_or(config.eval.num_seeds),
        seed: config.seed,
        jobs: config.eval.jobs,
        head,
        fixed_sigmas: None,
    };
    let output = run_experiment(&experiment)?;

    output.comparison.to_csv(out_dir.join("comparison.csv"))?;
    let pretty = output.comparison.to_pretty_text();
    std::fs::write(out_dir.join("comparison.txt"), &pretty)?;
    output.head.save(out_dir.join("head.json"))?;
    let per_seed = serde_json::to_string_pretty(&output.comparison.per_seed)?;
    std::fs::write(out_dir.join("per_seed.json"), per_seed)?;
    println!(
        "fixed-mode sigmas from training realization: t = {:?} m, r = {:?} rad",
        output.fixed_trans_sigma, output.fixed_rot_sigma
    );
    print!("{pretty}");
    println!("wrote comparison artifacts to {}", out_dir.display());
    Ok(())
}

pub fn report(
    dataset_dir: &Path,
    result_path: &Path,
    head_path: Option<&Path>,
    out_dir: &Path,
    force: bool,
) -> anyhow::Result<()> {
    ensure_dir_writable(out_dir, force)?;
    std::fs::create_dir_all(out_dir)?;
    let dataset = Dataset::read_dir(dataset_dir)?;
    let result = TrajectoryResult::read_csv(result_path)?;
    let head = match head_path {
        Some(path) => Some(UncertaintyHead::load(path)?),
        None => None,
    };
    let tol = 0.5 / dataset.trajectory.imu_rate_hz;
    let metrics = compute_metrics(&result, &dataset.truth, tol)?;
    std::fs::write(
        out_dir.join("metrics.json"),
        serde_json::to_string_pretty(&metrics)?,
    )?;
    export_plot_data(&dataset, head.as_ref(), Some(&result), out_dir)?;
    println!(
        "RMSE position {:.4} m, RMSE orientation {:.3} deg, max PE {:.4} m ({} rows associated)",
        metrics.rmse_position_m,
        metrics.rmse_orientation_deg,
        metrics.max_position_error_m,
        metrics.associated_rows
    );
    println!("wrote metrics and plot data to {}", out_dir.display());
    Ok(())
}
