//! Quantitative evaluation: volumetric PSNR and SSIM, the threshold
//! segmentation proxy with per-class volume measurement, the log-linear
//! random-intercept trajectory fit, and the ablation comparison harness.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{ClassVolumes, TissueClass};
use crate::pipeline::{complete_missing, GuidancePolicy};
use crate::volume::{normalize_intensity, LongitudinalCohort, Provenance, ScanRecord, Volume3D};

/// SSIM parameters: cubic window side, stabilization constants, data range.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 7, k1: 0.01, k2: 0.03, data_range: 1.0 }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "ssim window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0 && self.data_range > 0.0) {
            return Err(Error::InvalidConfig("ssim constants must be positive".into()));
        }
        Ok(())
    }
}

fn check_dims(a: &Volume3D, b: &Volume3D) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "volume dims {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB: `10 log10(range^2 / MSE)`. Identical
/// inputs return `f64::INFINITY` as the sentinel.
pub fn psnr(a: &Volume3D, b: &Volume3D, data_range: f64) -> Result<f64> {
    check_dims(a, b)?;
    if data_range <= 0.0 {
        return Err(Error::InvalidConfig(format!("data_range must be > 0, got {data_range}")));
    }
    let mut acc = 0.0f64;
    for (&x, &y) in a.voxels().iter().zip(b.voxels()) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    let mse = acc / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Mean structural similarity over all fully-contained cubic windows.
/// Window statistics use population (biased) variance.
pub fn ssim3d(a: &Volume3D, b: &Volume3D, p: &SsimParams) -> Result<f64> {
    check_dims(a, b)?;
    p.validate()?;
    let (nx, ny, nz) = a.dims();
    let w = p.window;
    if nx < w || ny < w || nz < w {
        return Err(Error::ShapeMismatch(format!(
            "volume {nx}x{ny}x{nz} smaller than ssim window {w}"
        )));
    }
    let c1 = (p.k1 * p.data_range).powi(2);
    let c2 = (p.k2 * p.data_range).powi(2);
    let n_win = (w * w * w) as f64;

    let mut total = 0.0f64;
    let mut count = 0usize;
    for z0 in 0..=(nz - w) {
        for y0 in 0..=(ny - w) {
            for x0 in 0..=(nx - w) {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dz in 0..w {
                    for dy in 0..w {
                        for dx in 0..w {
                            let va = a.at(x0 + dx, y0 + dy, z0 + dz) as f64;
                            let vb = b.at(x0 + dx, y0 + dy, z0 + dz) as f64;
                            sa += va;
                            sb += vb;
                            saa += va * va;
                            sbb += vb * vb;
                            sab += va * vb;
                        }
                    }
                }
                let mu_a = sa / n_win;
                let mu_b = sb / n_win;
                let var_a = saa / n_win - mu_a * mu_a;
                let var_b = sbb / n_win - mu_b * mu_b;
                let cov = sab / n_win - mu_a * mu_b;
                let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
                let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Three-bin label volume produced by the threshold segmentation proxy.
/// Label 0 covers both background and the CSF shell (they share the lowest
/// intensity bin), label 1 is the GM shell, label 2 the WM core.
#[derive(Debug, Clone)]
pub struct LabelVolume {
    pub dims: (usize, usize, usize),
    pub spacing: (f32, f32, f32),
    pub labels: Vec<u8>,
}

/// Intensity-bin segmentation at two strictly increasing cut points in (0,1).
pub fn segment_tissues(v: &Volume3D, thresholds: (f64, f64)) -> Result<LabelVolume> {
    let (t1, t2) = thresholds;
    if !(t1 < t2 && t1 > 0.0 && t2 < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "thresholds must be strictly increasing within (0, 1), got ({t1}, {t2})"
        )));
    }
    let labels = v
        .voxels()
        .iter()
        .map(|&x| {
            let x = x as f64;
            if x < t1 {
                0u8
            } else if x < t2 {
                1
            } else {
                2
            }
        })
        .collect();
    Ok(LabelVolume { dims: v.dims(), spacing: v.spacing(), labels })
}

/// Label counts times voxel volume. Bin 0 carries background plus the CSF
/// shell, so its value is only meaningful inside a brain mask; see
/// [`brain_class_volumes`] for the trajectory pipeline's CSF measurement.
pub fn tissue_volumes(labels: &LabelVolume) -> ClassVolumes {
    let voxvol = labels.spacing.0 as f64 * labels.spacing.1 as f64 * labels.spacing.2 as f64;
    let mut counts = [0usize; 3];
    for &l in &labels.labels {
        counts[l.min(2) as usize] += 1;
    }
    ClassVolumes {
        csf: counts[0] as f64 * voxvol,
        gm: counts[1] as f64 * voxvol,
        wm: counts[2] as f64 * voxvol,
    }
}

/// Default cut points separating CSF / GM / WM on phantom scans, valid both
/// raw and after min-max normalization.
pub const DEFAULT_SEG_THRESHOLDS: (f64, f64) = (0.47, 0.87);
/// Intensity below which a voxel counts as background rather than CSF.
pub const DEFAULT_BG_CUT: f64 = 0.15;

/// Per-class volumes with CSF isolated from the background by an extra
/// low-intensity cut. A two-threshold segmentation alone cannot separate
/// the two since they share the lowest bin.
pub fn brain_class_volumes(v: &Volume3D, bg_cut: f64, thresholds: (f64, f64)) -> Result<ClassVolumes> {
    let (t1, _t2) = thresholds;
    if !(bg_cut > 0.0 && bg_cut < t1) {
        return Err(Error::InvalidConfig(format!(
            "background cut must lie in (0, t1), got {bg_cut} with t1 = {t1}"
        )));
    }
    let seg = segment_tissues(v, thresholds)?;
    let voxvol = v.voxel_volume_mm3();
    let mut csf = 0usize;
    for (&x, &l) in v.voxels().iter().zip(&seg.labels) {
        if l == 0 && (x as f64) >= bg_cut {
            csf += 1;
        }
    }
    let all = tissue_volumes(&seg);
    Ok(ClassVolumes { csf: csf as f64 * voxvol, gm: all.gm, wm: all.wm })
}

/// One (subject, age, volume) observation for the trajectory fit.
#[derive(Debug, Clone)]
pub struct Observation {
    pub subject_id: String,
    pub age_months: f64,
    pub volume_mm3: f64,
}

/// Fitted log-linear random-intercept growth law
/// `V_ij = beta0 + beta1 ln(age_ij) + b_i + eps_ij`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryModel {
    pub beta0: f64,
    pub beta1: f64,
    pub sigma_subject_sq: f64,
    pub sigma_noise_sq: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub n_observations: usize,
    pub n_subjects: usize,
}

const LMM_MAX_ITER: usize = 500;
const LMM_LL_TOL: f64 = 1e-8;
const LMM_VAR_FLOOR: f64 = 1e-12;

/// Maximum-likelihood fit via expectation-maximization with the fixed
/// effects profiled out by generalized least squares at every step.
pub fn fit_lmm_loglinear(observations: &[Observation]) -> Result<TrajectoryModel> {
    if observations.len() < 3 {
        return Err(Error::Degenerate(format!(
            "need at least 3 observations, got {}",
            observations.len()
        )));
    }
    let mut ages: Vec<f64> = observations.iter().map(|o| o.age_months).collect();
    ages.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ages.dedup();
    if ages.len() < 2 {
        return Err(Error::Degenerate("all ages equal; slope is unidentifiable".into()));
    }
    for o in observations {
        if !(o.age_months > 0.0) || !o.volume_mm3.is_finite() {
            return Err(Error::Degenerate(format!(
                "bad observation for subject {}: age {}, volume {}",
                o.subject_id, o.age_months, o.volume_mm3
            )));
        }
    }

    // Group by subject: (ln age, volume) rows.
    let mut groups: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for o in observations {
        groups.entry(&o.subject_id).or_default().push((o.age_months.ln(), o.volume_mm3));
    }
    let m = groups.len();
    let n_total = observations.len();

    // OLS start for beta and the residual variance.
    let (mut beta0, mut beta1) = ols_fit(observations)?;
    let mut sigma_e = {
        let rss: f64 = observations
            .iter()
            .map(|o| {
                let r = o.volume_mm3 - beta0 - beta1 * o.age_months.ln();
                r * r
            })
            .sum();
        (rss / n_total as f64).max(LMM_VAR_FLOOR)
    };
    let mut sigma_b = (0.5 * sigma_e).max(LMM_VAR_FLOOR);

    let mut ll_prev = f64::NEG_INFINITY;
    let mut ll = ll_prev;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..LMM_MAX_ITER {
        iterations = iter + 1;
        let (b0_old, b1_old, se_old, sb_old) = (beta0, beta1, sigma_e, sigma_b);

        // GLS profile of the fixed effects under the current variances.
        // Sherman-Morrison on V_i = sigma_e I + sigma_b J gives
        // V^-1 = (I - c J) / sigma_e with c = sigma_b / (sigma_e + n sigma_b).
        let mut xtx = [[0.0f64; 2]; 2];
        let mut xty = [0.0f64; 2];
        for rows in groups.values() {
            let n_i = rows.len() as f64;
            let c = sigma_b / (sigma_e + n_i * sigma_b);
            let sum_x: f64 = rows.iter().map(|r| r.0).sum();
            let sum_y: f64 = rows.iter().map(|r| r.1).sum();
            for &(x, y) in rows {
                xtx[0][0] += (1.0 - c * n_i) / sigma_e;
                xtx[0][1] += (x - c * sum_x) / sigma_e;
                xtx[1][0] += (x - c * n_i * x) / sigma_e;
                xtx[1][1] += (x * x - c * x * sum_x) / sigma_e;
                xty[0] += (y - c * sum_y) / sigma_e;
                xty[1] += (x * y - c * x * sum_y) / sigma_e;
            }
        }
        // The two off-diagonal accumulations are algebraically equal;
        // averaging removes round-off drift.
        let off = 0.5 * (xtx[0][1] + xtx[1][0]);
        let det = xtx[0][0] * xtx[1][1] - off * off;
        if det.abs() < 1e-30 {
            return Err(Error::Degenerate("singular design in GLS step".into()));
        }
        beta0 = (xtx[1][1] * xty[0] - off * xty[1]) / det;
        beta1 = (-off * xty[0] + xtx[0][0] * xty[1]) / det;

        // E-step posterior intercepts, then M-step variance updates.
        let mut sum_b2 = 0.0;
        let mut sum_resid = 0.0;
        ll = 0.0;
        for rows in groups.values() {
            let n_i = rows.len() as f64;
            let denom = sigma_e + n_i * sigma_b;
            let resid: Vec<f64> = rows.iter().map(|&(x, y)| y - beta0 - beta1 * x).collect();
            let s_i: f64 = resid.iter().sum();
            let rr: f64 = resid.iter().map(|r| r * r).sum();
            let b_hat = sigma_b * s_i / denom;
            let v_post = sigma_b * sigma_e / denom;
            sum_b2 += b_hat * b_hat + v_post;
            let within: f64 = resid.iter().map(|r| (r - b_hat).powi(2)).sum();
            sum_resid += within + n_i * v_post;
            let logdet = (n_i - 1.0) * sigma_e.ln() + denom.ln();
            let quad = (rr - sigma_b / denom * s_i * s_i) / sigma_e;
            ll += -0.5 * (n_i * (2.0 * std::f64::consts::PI).ln() + logdet + quad);
        }
        sigma_b = (sum_b2 / m as f64).max(LMM_VAR_FLOOR);
        sigma_e = (sum_resid / n_total as f64).max(LMM_VAR_FLOOR);

        let param_delta = (beta0 - b0_old)
            .abs()
            .max((beta1 - b1_old).abs())
            .max((sigma_e - se_old).abs())
            .max((sigma_b - sb_old).abs());
        let ll_delta = if ll_prev.is_finite() {
            ((ll - ll_prev) / ll_prev.abs().max(1.0)).abs()
        } else {
            f64::INFINITY
        };
        ll_prev = ll;
        if ll_delta < LMM_LL_TOL || param_delta < 1e-12 {
            converged = true;
            break;
        }
    }

    Ok(TrajectoryModel {
        beta0,
        beta1,
        sigma_subject_sq: if sigma_b <= LMM_VAR_FLOOR { 0.0 } else { sigma_b },
        sigma_noise_sq: if sigma_e <= LMM_VAR_FLOOR { 0.0 } else { sigma_e },
        log_likelihood: ll,
        iterations,
        converged,
        n_observations: n_total,
        n_subjects: m,
    })
}

fn ols_fit(observations: &[Observation]) -> Result<(f64, f64)> {
    let n = observations.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for o in observations {
        let x = o.age_months.ln();
        sx += x;
        sy += o.volume_mm3;
        sxx += x * x;
        sxy += x * o.volume_mm3;
    }
    let det = n * sxx - sx * sx;
    if det.abs() < 1e-30 {
        return Err(Error::Degenerate("all ages equal; slope is unidentifiable".into()));
    }
    let beta1 = (n * sxy - sx * sy) / det;
    let beta0 = (sy - beta1 * sx) / n;
    Ok((beta0, beta1))
}

/// One scored completion in a metrics table.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub scan_id: String,
    pub variant: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "+inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

/// Writes `metrics.csv` with columns scan_id, variant, psnr_db, ssim.
pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut out = String::from("scan_id,variant,psnr_db,ssim\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{:.6}\n", r.scan_id, r.variant, fmt_psnr(r.psnr_db), r.ssim));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes `trajectory.csv` with one fitted law per tissue class.
pub fn write_trajectory_csv(path: &Path, fits: &BTreeMap<TissueClass, TrajectoryModel>) -> Result<()> {
    let mut out = String::from("class,beta0,beta1,sigma_b2,sigma_e2,n_obs\n");
    for (class, m) in fits {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{}\n",
            class.name(),
            m.beta0,
            m.beta1,
            m.sigma_subject_sq,
            m.sigma_noise_sq,
            m.n_observations
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// One plot-ready point for the real-vs-generated trajectory scatter.
#[derive(Debug, Clone)]
pub struct TrajectoryPoint {
    pub subject_id: String,
    pub age_months: f64,
    pub class: TissueClass,
    pub volume_mm3: f64,
    pub provenance: Provenance,
}

/// Writes `trajectory_points.csv` (subject, age, class, volume, provenance).
pub fn write_trajectory_points_csv(path: &Path, points: &[TrajectoryPoint]) -> Result<()> {
    let mut out = String::from("subject,age,class,volume,provenance\n");
    for p in points {
        let prov = match p.provenance {
            Provenance::Observed => "observed",
            Provenance::Generated => "generated",
        };
        out.push_str(&format!(
            "{},{},{},{:.6},{}\n",
            p.subject_id,
            p.age_months,
            p.class.name(),
            p.volume_mm3,
            prov
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Mean and sample standard deviation of per-scan metrics for one variant.
#[derive(Debug, Clone)]
pub struct VariantSummary {
    pub variant: String,
    pub mean_psnr: f64,
    pub std_psnr: f64,
    pub mean_ssim: f64,
    pub std_ssim: f64,
    pub n: usize,
}

/// Comparison table across denoiser variants, plus the full-scale reference
/// ordering that is displayed for context only.
#[derive(Debug, Clone)]
pub struct AblationReport {
    pub rows: Vec<MetricRow>,
    pub summaries: Vec<VariantSummary>,
}

/// Full-scale reference PSNR/SSIM pairs (context only, never asserted):
/// cGAN baseline, shared-encoder conditional model, dual-encoder conditional
/// model, full cascade.
pub const REFERENCE_FULL_SCALE: [(&str, f64, f64); 4] = [
    ("cgan", 17.76, 0.72),
    ("model-1", 22.33, 0.73),
    ("model-2", 23.22, 0.78),
    ("full", 24.15, 0.81),
];

impl AblationReport {
    pub fn from_rows(rows: Vec<MetricRow>) -> Self {
        let mut by_variant: BTreeMap<String, Vec<&MetricRow>> = BTreeMap::new();
        for r in &rows {
            by_variant.entry(r.variant.clone()).or_default().push(r);
        }
        let summaries = by_variant
            .into_iter()
            .map(|(variant, rs)| {
                let n = rs.len();
                let mp = rs.iter().map(|r| r.psnr_db).sum::<f64>() / n as f64;
                let ms = rs.iter().map(|r| r.ssim).sum::<f64>() / n as f64;
                let sd = |mu: f64, vals: Vec<f64>| {
                    if n < 2 {
                        0.0
                    } else {
                        (vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                    }
                };
                VariantSummary {
                    variant,
                    mean_psnr: mp,
                    std_psnr: sd(mp, rs.iter().map(|r| r.psnr_db).collect()),
                    mean_ssim: ms,
                    std_ssim: sd(ms, rs.iter().map(|r| r.ssim).collect()),
                    n,
                }
            })
            .collect();
        Self { rows, summaries }
    }

    pub fn summary(&self, variant: &str) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.variant == variant)
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "variant            psnr(dB) mean+-std     ssim mean+-std      n")?;
        for s in &self.summaries {
            writeln!(
                f,
                "{:<18} {:>8.3} +- {:<8.3} {:>6.4} +- {:<6.4} {:>4}",
                s.variant, s.mean_psnr, s.std_psnr, s.mean_ssim, s.std_ssim, s.n
            )?;
        }
        writeln!(f, "full-scale reference ordering (context only, not asserted):")?;
        for (name, p, s) in REFERENCE_FULL_SCALE {
            writeln!(f, "  {name:<10} psnr {p:.2}  ssim {s:.2}")?;
        }
        Ok(())
    }
}

/// Stable identifier of one (subject, age) scan in reports.
pub fn scan_id(subject_id: &str, age_months: f64) -> String {
    format!("{subject_id}@m{age_months:.1}")
}

/// Settings shared by every variant of one ablation run.
#[derive(Debug, Clone)]
pub struct AblationSettings {
    pub sampling_steps: usize,
    pub seed: u64,
    pub ssim: SsimParams,
    pub policy: GuidancePolicy,
}

/// Completes every held-out scan with each registered (generate, SR)
/// checkpoint pair and scores the results against the normalized ground
/// truth. Scoring runs whole-volume at the high resolution.
pub fn ablation_report(
    variants: &BTreeMap<String, (PathBuf, PathBuf)>,
    held_out: &[ScanRecord],
    cohort: &LongitudinalCohort,
    settings: &AblationSettings,
) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(variants.len() * held_out.len());
    let targets: Vec<(String, f64)> =
        held_out.iter().map(|s| (s.subject_id.clone(), s.age_months())).collect();
    for (name, (gen_ckpt, sr_ckpt)) in variants {
        let completed = complete_missing(
            gen_ckpt,
            sr_ckpt,
            cohort,
            &targets,
            &settings.policy,
            settings.sampling_steps,
            settings.seed,
        )?;
        for (truth, generated) in held_out.iter().zip(&completed) {
            let reference = normalize_intensity(&truth.volume)?;
            let psnr_db = psnr(&generated.volume, &reference, settings.ssim.data_range)?;
            let ssim = ssim3d(&generated.volume, &reference, &settings.ssim)?;
            rows.push(MetricRow {
                scan_id: scan_id(&truth.subject_id, truth.age_months()),
                variant: name.clone(),
                psnr_db,
                ssim,
            });
        }
    }
    Ok(AblationReport::from_rows(rows))
}

/// Segments one scan and returns its per-class trajectory points.
pub fn scan_trajectory_points(
    scan: &ScanRecord,
    bg_cut: f64,
    thresholds: (f64, f64),
) -> Result<Vec<TrajectoryPoint>> {
    let vols = brain_class_volumes(&scan.volume, bg_cut, thresholds)?;
    Ok(TissueClass::ALL
        .iter()
        .map(|&class| TrajectoryPoint {
            subject_id: scan.subject_id.clone(),
            age_months: scan.age_months(),
            class,
            volume_mm3: vols.get(class),
            provenance: scan.provenance(),
        })
        .collect())
}

/// Fits the log-linear random-intercept law per tissue class from a set of
/// trajectory points.
pub fn fit_trajectories(
    points: &[TrajectoryPoint],
) -> Result<BTreeMap<TissueClass, TrajectoryModel>> {
    let mut fits = BTreeMap::new();
    for class in TissueClass::ALL {
        let obs: Vec<Observation> = points
            .iter()
            .filter(|p| p.class == class)
            .map(|p| Observation {
                subject_id: p.subject_id.clone(),
                age_months: p.age_months,
                volume_mm3: p.volume_mm3,
            })
            .collect();
        fits.insert(class, fit_lmm_loglinear(&obs)?);
    }
    Ok(fits)
}
