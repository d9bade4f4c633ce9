//! Subcommand implementations. Every successful run writes a `run.json`
//! with the resolved configuration, the seed, the artifact version, and
//! the wall time, so any result can be reproduced from its metadata.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use cascade_volcomp::error::{Error, Result};
use cascade_volcomp::eval::{
    fit_trajectories, psnr, scan_id, scan_trajectory_points, ssim3d, write_metrics_csv,
    write_trajectory_csv, write_trajectory_points_csv, MetricRow,
};
use cascade_volcomp::phantom::{generate_cohort, mask_missing, read_cohort_dir, write_cohort_dir};
use cascade_volcomp::pipeline::{complete_missing, train_stage};
use cascade_volcomp::volume::normalize_intensity;

use crate::config::RunConfig;

pub const VERSION_TAG: &str = concat!("cascade-volcomp-", env!("CARGO_PKG_VERSION"));

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    wall_seconds: f64,
    config: &'a RunConfig,
}

fn write_run_json(dir: &Path, command: &str, cfg: &RunConfig, started: Instant) -> Result<()> {
    let record = RunRecord {
        command,
        version: VERSION_TAG,
        seed: cfg.seed(),
        wall_seconds: started.elapsed().as_secs_f64(),
        config: cfg,
    };
    fs::create_dir_all(dir)?;
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    Ok(())
}

pub fn cmd_phantom(cfg: &RunConfig, force: bool) -> Result<()> {
    let started = Instant::now();
    let out_dir = cfg.require_out_dir()?;
    if out_dir.join("cohort.json").exists() && !force {
        return Err(Error::Format(format!(
            "{} already holds a cohort; pass --force to overwrite",
            out_dir.display()
        )));
    }
    let phantom_cfg = cfg.phantom_config()?;
    let law = cfg.growth_law();
    let missing = cfg.missing_fraction.unwrap_or(0.3);

    let (cohort, truth) = generate_cohort(&phantom_cfg, &law)?;
    let (train, held_out) = mask_missing(&cohort, missing, cfg.seed())?;
    write_cohort_dir(&out_dir, &train, &held_out, Some(&truth))?;
    log::info!(
        "wrote cohort: {} subjects, {} scans ({} held out) to {}",
        phantom_cfg.n_subjects,
        cohort.n_scans(),
        held_out.len(),
        out_dir.display()
    );
    write_run_json(&out_dir, "phantom", cfg, started)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let started = Instant::now();
    let out_dir = cfg.require_out_dir()?;
    let data_dir = cfg.require_data_dir()?;
    let train_cfg = cfg.train_config()?;
    let (cohort, _held_out, _) = read_cohort_dir(&data_dir)?;
    let out = train_stage(&cohort, &train_cfg, &out_dir)?;
    if let Some(last) = out.loss_log.last() {
        log::info!(
            "trained {:?}: {} steps, final loss {:.6}, checkpoint {}",
            train_cfg.stage,
            out.loss_log.len(),
            last.loss,
            out.checkpoint_path.display()
        );
    }
    write_run_json(&out_dir, "train", cfg, started)
}

pub fn cmd_complete(cfg: &RunConfig) -> Result<()> {
    let started = Instant::now();
    let out_dir = cfg.require_out_dir()?;
    let data_dir = cfg.require_data_dir()?;
    let gen_ckpt = cfg
        .gen_checkpoint
        .clone()
        .ok_or_else(|| Error::InvalidConfig("gen_checkpoint is required".into()))?;
    let sr_ckpt = cfg
        .sr_checkpoint
        .clone()
        .ok_or_else(|| Error::InvalidConfig("sr_checkpoint is required".into()))?;
    let (cohort, _held, manifest) = read_cohort_dir(&data_dir)?;

    // Default targets: the held-out (subject, age) pairs in the manifest,
    // optionally filtered to the named subjects or overridden ages.
    let subject_filter = cfg.subjects.clone();
    let keep = |s: &str| subject_filter.as_ref().map(|f| f.iter().any(|x| x == s)).unwrap_or(true);
    let targets: Vec<(String, f64)> = match &cfg.target_ages {
        Some(ages) => {
            let subjects: Vec<String> = match &subject_filter {
                Some(list) => list.clone(),
                None => cohort.subject_ids(),
            };
            subjects
                .iter()
                .flat_map(|s| ages.iter().map(move |&a| (s.clone(), a)))
                .collect()
        }
        None => manifest
            .scans
            .iter()
            .filter(|s| s.held_out && keep(&s.subject_id))
            .map(|s| (s.subject_id.clone(), s.age_months))
            .collect(),
    };
    if targets.is_empty() {
        return Err(Error::InvalidConfig(
            "nothing to complete: no held-out scans match (or give target_ages)".into(),
        ));
    }

    let policy = cfg.guidance_policy()?;
    let records = complete_missing(
        &gen_ckpt,
        &sr_ckpt,
        &cohort,
        &targets,
        &policy,
        cfg.sampling_steps(),
        cfg.seed(),
    )?;
    let empty = cascade_volcomp::volume::LongitudinalCohort::new(cohort.age_grid.clone());
    let mut out_cohort = empty;
    for r in &records {
        out_cohort.insert(r.clone())?;
    }
    write_cohort_dir(&out_dir, &out_cohort, &[], None)?;
    log::info!("completed {} scans into {}", records.len(), out_dir.display());
    write_run_json(&out_dir, "complete", cfg, started)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let started = Instant::now();
    let out_dir = cfg.require_out_dir()?;
    let data_dir = cfg.require_data_dir()?;
    let completed_dir = cfg
        .completed_dir
        .clone()
        .ok_or_else(|| Error::InvalidConfig("completed_dir is required".into()))?;
    let ssim_params = cfg.ssim_params()?;
    let variant = cfg.variant_name.clone().unwrap_or_else(|| "full".to_string());

    let (truth_train, truth_held, _) = read_cohort_dir(&data_dir)?;
    let (generated, gen_held, _) = read_cohort_dir(&completed_dir)?;
    let find_truth = |subject: &str, age: f64| {
        truth_held
            .iter()
            .find(|s| s.subject_id == subject && s.age_months() == age)
            .or_else(|| {
                truth_train
                    .scans_of(subject)
                    .and_then(|scans| scans.iter().find(|s| s.age_months() == age))
            })
    };

    let mut rows = Vec::new();
    for scan in generated.iter_scans().chain(gen_held.iter()) {
        let truth = find_truth(&scan.subject_id, scan.age_months()).ok_or_else(|| {
            Error::Format(format!(
                "no ground-truth scan for {} at {} months in {}",
                scan.subject_id,
                scan.age_months(),
                data_dir.display()
            ))
        })?;
        let reference = normalize_intensity(&truth.volume)?;
        rows.push(MetricRow {
            scan_id: scan_id(&scan.subject_id, scan.age_months()),
            variant: variant.clone(),
            psnr_db: psnr(&scan.volume, &reference, ssim_params.data_range)?,
            ssim: ssim3d(&scan.volume, &reference, &ssim_params)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::InvalidConfig("no generated scans to evaluate".into()));
    }
    fs::create_dir_all(&out_dir)?;
    write_metrics_csv(&out_dir.join("metrics.csv"), &rows)?;
    log::info!("scored {} scans into {}", rows.len(), out_dir.join("metrics.csv").display());
    write_run_json(&out_dir, "eval", cfg, started)
}

pub fn cmd_trajectory(cfg: &RunConfig) -> Result<()> {
    let started = Instant::now();
    let out_dir = cfg.require_out_dir()?;
    let data_dir = cfg.require_data_dir()?;
    let (bg_cut, thresholds) = cfg.segmentation()?;

    let (observed, _held, _) = read_cohort_dir(&data_dir)?;
    let mut points = Vec::new();
    for scan in observed.iter_scans() {
        points.extend(scan_trajectory_points(scan, bg_cut, thresholds)?);
    }
    if let Some(completed_dir) = &cfg.completed_dir {
        let (generated, gen_held, _) = read_cohort_dir(completed_dir)?;
        for scan in generated.iter_scans().chain(gen_held.iter()) {
            points.extend(scan_trajectory_points(scan, bg_cut, thresholds)?);
        }
    }
    let fits = fit_trajectories(&points)?;
    fs::create_dir_all(&out_dir)?;
    write_trajectory_points_csv(&out_dir.join("trajectory_points.csv"), &points)?;
    write_trajectory_csv(&out_dir.join("trajectory.csv"), &fits)?;
    for (class, fit) in &fits {
        log::info!(
            "{}: beta0 {:.2}, beta1 {:.2}, sb2 {:.2}, se2 {:.2}, converged {}",
            class.name(),
            fit.beta0,
            fit.beta1,
            fit.sigma_subject_sq,
            fit.sigma_noise_sq,
            fit.converged
        );
    }
    write_run_json(&out_dir, "trajectory", cfg, started)
}

/// Maps an error to the documented exit code: 1 usage, 2 data/format,
/// 3 numerical divergence.
pub fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) => 1,
        Error::Divergence(_) => 3,
        _ => 2,
    }
}
