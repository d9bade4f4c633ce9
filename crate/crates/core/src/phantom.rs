//! Deterministic synthetic longitudinal cohorts: nested-ellipsoid phantoms
//! whose per-class volumes follow a known log-linear mixed-effects growth
//! law, plus missing-timepoint masking and the on-disk cohort layout.
//!
//! Geometry: three nested axis-aligned ellipsoids centered in the volume.
//! The innermost core plays the role of white matter, the middle shell grey
//! matter, the outer shell cerebrospinal fluid. Semi-axes are solved so each
//! class's analytic volume matches the growth-law target for that subject
//! and age, which gives the downstream segmentation and trajectory fits an
//! exact oracle.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{
    read_volume, write_sidecar, write_volume, LongitudinalCohort, Provenance, ScanRecord,
    SidecarMeta, Volume3D,
};

/// Tissue classes carried through segmentation and trajectory fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TissueClass {
    Csf,
    Gm,
    Wm,
}

impl TissueClass {
    pub const ALL: [TissueClass; 3] = [TissueClass::Csf, TissueClass::Gm, TissueClass::Wm];

    pub fn name(self) -> &'static str {
        match self {
            TissueClass::Csf => "csf",
            TissueClass::Gm => "gm",
            TissueClass::Wm => "wm",
        }
    }
}

/// Per-class volume triple in mm^3.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassVolumes {
    pub csf: f64,
    pub gm: f64,
    pub wm: f64,
}

impl ClassVolumes {
    pub fn get(&self, class: TissueClass) -> f64 {
        match class {
            TissueClass::Csf => self.csf,
            TissueClass::Gm => self.gm,
            TissueClass::Wm => self.wm,
        }
    }
}

/// Intercept/slope pair of one class's log-linear law `V = b0 + b1 ln(age)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClassLaw {
    pub beta0: f64,
    pub beta1: f64,
}

/// Log-linear mixed-effects generating law for the three tissue classes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrowthLaw {
    pub csf: ClassLaw,
    pub gm: ClassLaw,
    pub wm: ClassLaw,
    /// Std of the per-subject random intercept (mm^3), shared by classes.
    pub sigma_subject: f64,
    /// Std of the per-scan, per-class volume jitter (mm^3).
    pub sigma_noise: f64,
}

impl Default for GrowthLaw {
    fn default() -> Self {
        Self {
            csf: ClassLaw { beta0: 60.0, beta1: 25.0 },
            gm: ClassLaw { beta0: 200.0, beta1: 150.0 },
            wm: ClassLaw { beta0: 120.0, beta1: 90.0 },
            sigma_subject: 8.0,
            sigma_noise: 4.0,
        }
    }
}

impl GrowthLaw {
    pub fn class(&self, class: TissueClass) -> ClassLaw {
        match class {
            TissueClass::Csf => self.csf,
            TissueClass::Gm => self.gm,
            TissueClass::Wm => self.wm,
        }
    }

    /// Noise-free target volume of one class at a given age.
    pub fn mean_volume(&self, class: TissueClass, age_months: f64) -> f64 {
        let law = self.class(class);
        law.beta0 + law.beta1 * age_months.ln()
    }
}

/// Per-class intensity as a function of age. WM and CSF stay fixed while GM
/// ramps linearly between a young and a mature setting, so the WM-GM
/// contrast grows with age but every scan shares the same intensity range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContrastLaw {
    pub csf: f64,
    pub wm: f64,
    pub gm_young: f64,
    pub gm_mature: f64,
    /// Age window (months) over which GM moves from young to mature.
    pub ramp: (f64, f64),
}

impl Default for ContrastLaw {
    fn default() -> Self {
        Self { csf: 0.30, wm: 0.90, gm_young: 0.75, gm_mature: 0.55, ramp: (3.0, 9.0) }
    }
}

impl ContrastLaw {
    pub fn intensity(&self, class: TissueClass, age_months: f64) -> f64 {
        match class {
            TissueClass::Csf => self.csf,
            TissueClass::Wm => self.wm,
            TissueClass::Gm => {
                let (a0, a1) = self.ramp;
                let frac = ((age_months - a0) / (a1 - a0)).clamp(0.0, 1.0);
                self.gm_young + (self.gm_mature - self.gm_young) * frac
            }
        }
    }

    /// Smallest pairwise gap among background (0) and the three classes over
    /// the given ages.
    pub fn min_gap(&self, ages: &[f64]) -> f64 {
        let mut min_gap = f64::INFINITY;
        for &age in ages {
            let mut levels = vec![0.0];
            for class in TissueClass::ALL {
                levels.push(self.intensity(class, age));
            }
            levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for w in levels.windows(2) {
                min_gap = min_gap.min(w[1] - w[0]);
            }
        }
        min_gap
    }
}

/// Configuration of one synthetic cohort.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub dims: (usize, usize, usize),
    pub spacing: (f32, f32, f32),
    pub n_subjects: usize,
    pub age_grid: Vec<f64>,
    pub contrast: ContrastLaw,
    pub seed: u64,
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let (nx, ny, nz) = self.dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::InvalidConfig("phantom dims must be positive".into()));
        }
        if self.n_subjects == 0 {
            return Err(Error::InvalidConfig("n_subjects must be positive".into()));
        }
        if self.age_grid.is_empty() {
            return Err(Error::InvalidConfig("age_grid must be non-empty".into()));
        }
        for &a in &self.age_grid {
            if !(a > 0.5 && a <= 26.0) {
                return Err(Error::InvalidConfig(format!(
                    "age grid values must lie in (0.5, 26], got {a}"
                )));
            }
        }
        let mut sorted = self.age_grid.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if sorted.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("age grid must be strictly increasing".into()));
        }
        let gap = self.contrast.min_gap(&self.age_grid);
        if gap < 0.1 {
            return Err(Error::InvalidConfig(format!(
                "contrast law violates separability: min pairwise intensity gap {gap:.3} < 0.1"
            )));
        }
        Ok(())
    }
}

/// One generated scan's bookkeeping: analytic law targets, the voxelized
/// label map in segmentation semantics (0 = background or CSF shell,
/// 1 = GM shell, 2 = WM core) and raw voxel counts per region.
#[derive(Debug, Clone)]
pub struct ScanTruth {
    pub subject_id: String,
    pub age_months: f64,
    /// Analytic per-class target volumes drawn from the law (mm^3).
    pub class_volumes_mm3: ClassVolumes,
    pub labels: Vec<u8>,
    pub voxel_counts: RegionCounts,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RegionCounts {
    pub background: usize,
    pub csf: usize,
    pub gm: usize,
    pub wm: usize,
}

/// Ground-truth side table for a generated cohort.
#[derive(Debug, Clone, Default)]
pub struct CohortTruth {
    pub scans: Vec<ScanTruth>,
}

impl CohortTruth {
    pub fn find(&self, subject_id: &str, age_months: f64) -> Option<&ScanTruth> {
        self.scans
            .iter()
            .find(|s| s.subject_id == subject_id && s.age_months == age_months)
    }
}

/// Voxel grid geometry shared by the ellipsoid routines.
struct Grid {
    dims: (usize, usize, usize),
    spacing: [f64; 3],
    center: [f64; 3],
}

impl Grid {
    fn new(dims: (usize, usize, usize), spacing: (f32, f32, f32)) -> Self {
        let spacing = [spacing.0 as f64, spacing.1 as f64, spacing.2 as f64];
        let extent = [
            dims.0 as f64 * spacing[0],
            dims.1 as f64 * spacing[1],
            dims.2 as f64 * spacing[2],
        ];
        // Slightly off-center so grid symmetries don't make voxel counts
        // jump in large increments during calibration.
        let center = [
            extent[0] / 2.0 + 0.137 * spacing[0],
            extent[1] / 2.0 + 0.211 * spacing[1],
            extent[2] / 2.0 + 0.173 * spacing[2],
        ];
        Grid { dims, spacing, center }
    }

    fn extent(&self) -> [f64; 3] {
        [
            self.dims.0 as f64 * self.spacing[0],
            self.dims.1 as f64 * self.spacing[1],
            self.dims.2 as f64 * self.spacing[2],
        ]
    }

    fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// Inclusive x-index range of voxel centers inside the ellipsoid on the
    /// row (iy, iz), or None if the row misses it.
    fn row_span(&self, axes: [f64; 3], iy: usize, iz: usize) -> Option<(usize, usize)> {
        let y = (iy as f64 + 0.5) * self.spacing[1];
        let z = (iz as f64 + 0.5) * self.spacing[2];
        let qy = (y - self.center[1]) / axes[1];
        let qz = (z - self.center[2]) / axes[2];
        let rem = 1.0 - qy * qy - qz * qz;
        if rem < 0.0 {
            return None;
        }
        let half = axes[0] * rem.sqrt();
        let x_lo = self.center[0] - half;
        let x_hi = self.center[0] + half;
        // Voxel centers at (i + 0.5) * sx within [x_lo, x_hi].
        let i_lo = ((x_lo / self.spacing[0] - 0.5).ceil().max(0.0)) as usize;
        let i_hi_f = x_hi / self.spacing[0] - 0.5;
        if i_hi_f < i_lo as f64 {
            return None;
        }
        let i_hi = (i_hi_f.floor() as usize).min(self.dims.0 - 1);
        if i_lo > i_hi {
            None
        } else {
            Some((i_lo, i_hi))
        }
    }

    fn count_inside(&self, axes: [f64; 3]) -> usize {
        let mut n = 0;
        for iz in 0..self.dims.2 {
            for iy in 0..self.dims.1 {
                if let Some((lo, hi)) = self.row_span(axes, iy, iz) {
                    n += hi - lo + 1;
                }
            }
        }
        n
    }

    /// Paints `value` over all voxels inside the ellipsoid.
    fn fill(&self, axes: [f64; 3], map: &mut [u8], value: u8) {
        let nx = self.dims.0;
        for iz in 0..self.dims.2 {
            for iy in 0..self.dims.1 {
                if let Some((lo, hi)) = self.row_span(axes, iy, iz) {
                    let base = nx * (iy + self.dims.1 * iz);
                    for v in &mut map[base + lo..=base + hi] {
                        *v = value;
                    }
                }
            }
        }
    }
}

/// Finds the ellipsoid scale whose voxel-center count matches the target
/// volume. Calibrating against the grid keeps counted volumes faithful to
/// the growth law even for shells thinner than a voxel.
fn calibrate_axes(grid: &Grid, ratios: [f64; 3], target_mm3: f64) -> Result<[f64; 3]> {
    let target_count = (target_mm3 / grid.voxel_volume()).round().max(1.0) as usize;
    let extent = grid.extent();
    let s_max = (0..3).map(|i| extent[i] / ratios[i]).fold(f64::INFINITY, f64::min);
    let axes_of = |s: f64| [s * ratios[0], s * ratios[1], s * ratios[2]];
    if grid.count_inside(axes_of(s_max)) < target_count {
        return Err(Error::InvalidConfig(format!(
            "target volume {target_mm3:.1} mm^3 does not fit the grid"
        )));
    }
    let (mut lo, mut hi) = (0.0f64, s_max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if grid.count_inside(axes_of(mid)) < target_count {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(axes_of(hi))
}

const MIN_SEMI_AXIS_VOXELS: f64 = 4.0;

/// Generates one scan per subject per grid age. Deterministic in the seed;
/// per-subject draws come from ChaCha substreams keyed by subject index.
pub fn generate_cohort(cfg: &PhantomConfig, law: &GrowthLaw) -> Result<(LongitudinalCohort, CohortTruth)> {
    cfg.validate()?;
    if law.sigma_subject < 0.0 || law.sigma_noise < 0.0 {
        return Err(Error::InvalidConfig("growth-law sigmas must be >= 0".into()));
    }

    let (nx, ny, nz) = cfg.dims;
    let grid = Grid::new(cfg.dims, cfg.spacing);
    let extent = grid.extent();
    let geo = (extent[0] * extent[1] * extent[2]).cbrt();
    let ratios = [extent[0] / geo, extent[1] / geo, extent[2] / geo];

    let mut cohort = LongitudinalCohort::new(Some(cfg.age_grid.clone()));
    let mut truth = CohortTruth::default();

    for subj in 0..cfg.n_subjects {
        let subject_id = format!("s{subj:03}");
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(subj as u64 + 1);
        let b_i: f64 = law.sigma_subject * rng.sample::<f64, _>(StandardNormal);

        for &age in &cfg.age_grid {
            // Per-class shell volume targets for this scan.
            let mut targets = [0.0f64; 3];
            for (k, class) in TissueClass::ALL.iter().enumerate() {
                let jitter: f64 = law.sigma_noise * rng.sample::<f64, _>(StandardNormal);
                targets[k] = law.mean_volume(*class, age) + b_i + jitter;
                if targets[k] <= 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "growth law yields non-positive {} volume ({:.2} mm^3) for {subject_id} at {age} months",
                        class.name(),
                        targets[k]
                    )));
                }
            }
            let (v_csf, v_gm, v_wm) = (targets[0], targets[1], targets[2]);

            // Cumulative volumes define the nested ellipsoids; each scale is
            // calibrated so its voxel count matches the cumulative target.
            let wm_axes = calibrate_axes(&grid, ratios, v_wm)?;
            let gm_axes = calibrate_axes(&grid, ratios, v_wm + v_gm)?;
            let csf_axes = calibrate_axes(&grid, ratios, v_wm + v_gm + v_csf)?;

            for (i, &ax) in wm_axes.iter().enumerate() {
                if ax / grid.spacing[i] < MIN_SEMI_AXIS_VOXELS {
                    return Err(Error::InvalidConfig(format!(
                        "dims too small to voxelize the core ellipsoid: semi-axis {} spans {:.2} voxels (< {MIN_SEMI_AXIS_VOXELS}) for {subject_id} at {age} months",
                        ["x", "y", "z"][i],
                        ax / grid.spacing[i]
                    )));
                }
            }
            for (i, &ax) in csf_axes.iter().enumerate() {
                if ax > extent[i] / 2.0 + grid.spacing[i] {
                    return Err(Error::InvalidConfig(format!(
                        "outer ellipsoid does not fit: semi-axis {} = {:.2} mm exceeds half extent {:.2} mm",
                        ["x", "y", "z"][i],
                        ax,
                        extent[i] / 2.0
                    )));
                }
            }

            // Internal map: 0 background, 1 CSF shell, 2 GM shell, 3 WM core.
            let mut region = vec![0u8; nx * ny * nz];
            grid.fill(csf_axes, &mut region, 1);
            grid.fill(gm_axes, &mut region, 2);
            grid.fill(wm_axes, &mut region, 3);

            let mut counts = RegionCounts::default();
            for &r in &region {
                match r {
                    0 => counts.background += 1,
                    1 => counts.csf += 1,
                    2 => counts.gm += 1,
                    _ => counts.wm += 1,
                }
            }

            let intensities = [
                0.0,
                cfg.contrast.intensity(TissueClass::Csf, age),
                cfg.contrast.intensity(TissueClass::Gm, age),
                cfg.contrast.intensity(TissueClass::Wm, age),
            ];
            let voxels: Vec<f32> = region.iter().map(|&r| intensities[r as usize] as f32).collect();
            // Segmentation semantics: background and CSF share label 0.
            let labels: Vec<u8> = region.iter().map(|&r| r.saturating_sub(1)).collect();

            let volume = Volume3D::new(cfg.dims, cfg.spacing, voxels)?;
            cohort.insert(ScanRecord::new(&subject_id, age, volume, Provenance::Observed)?)?;
            truth.scans.push(ScanTruth {
                subject_id: subject_id.clone(),
                age_months: age,
                class_volumes_mm3: ClassVolumes { csf: v_csf, gm: v_gm, wm: v_wm },
                labels,
                voxel_counts: counts,
            });
        }
    }
    Ok((cohort, truth))
}

/// Splits a cohort into a training part and a held-out part by removing a
/// uniform random selection of scans, with every subject retaining at least
/// one scan. Deterministic in the seed.
pub fn mask_missing(
    cohort: &LongitudinalCohort,
    missing_fraction: f64,
    seed: u64,
) -> Result<(LongitudinalCohort, Vec<ScanRecord>)> {
    if !(0.0..1.0).contains(&missing_fraction) {
        return Err(Error::InvalidConfig(format!(
            "missing_fraction must lie in [0, 1), got {missing_fraction}"
        )));
    }
    let total = cohort.n_scans();
    let n_subjects = cohort.n_subjects();
    let target = (missing_fraction * total as f64).round() as usize;
    if target > total.saturating_sub(n_subjects) {
        return Err(Error::Infeasible(format!(
            "cannot hold out {target} of {total} scans while every one of {n_subjects} subjects keeps a scan"
        )));
    }

    // Remaining scans per subject, keyed deterministically.
    let mut remaining: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (id, scans) in cohort.subjects() {
        remaining.insert(id.clone(), scans.iter().map(|s| s.age_months()).collect());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held: Vec<(String, f64)> = Vec::with_capacity(target);
    while held.len() < target {
        let eligible: Vec<(String, f64)> = remaining
            .iter()
            .filter(|(_, ages)| ages.len() >= 2)
            .flat_map(|(id, ages)| ages.iter().map(move |&a| (id.clone(), a)))
            .collect();
        if eligible.is_empty() {
            return Err(Error::Infeasible(
                "masking infeasible: no subject can spare another scan".into(),
            ));
        }
        let pick = eligible[rng.random_range(0..eligible.len())].clone();
        remaining.get_mut(&pick.0).unwrap().retain(|&a| a != pick.1);
        held.push(pick);
    }

    let mut train = LongitudinalCohort::new(cohort.age_grid.clone());
    let mut held_out = Vec::new();
    for (_, scans) in cohort.subjects() {
        for scan in scans {
            if held.iter().any(|(id, a)| id == &scan.subject_id && *a == scan.age_months()) {
                held_out.push(scan.clone());
            } else {
                train.insert(scan.clone())?;
            }
        }
    }
    Ok((train, held_out))
}

/// `cohort.json` schema for a cohort directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortManifest {
    pub version: u32,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub age_grid: Vec<f64>,
    pub scans: Vec<ManifestScan>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestScan {
    pub subject_id: String,
    pub age_months: f64,
    pub file: String,
    pub held_out: bool,
    pub provenance: Provenance,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth_volumes_mm3: Option<ClassVolumes>,
}

pub fn scan_file_name(subject_id: &str, age_months: f64) -> String {
    format!("{subject_id}_m{age_months:05.1}.vol3")
}

/// Writes a cohort as VOL3 + sidecar files plus `cohort.json`. Scans listed
/// in `held_out` are flagged in the manifest but their files are still
/// written so evaluators can compare against the originals.
pub fn write_cohort_dir(
    dir: &Path,
    cohort: &LongitudinalCohort,
    held_out: &[ScanRecord],
    truth: Option<&CohortTruth>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut scans = Vec::new();
    let mut all: Vec<(&ScanRecord, bool)> = cohort.iter_scans().map(|s| (s, false)).collect();
    all.extend(held_out.iter().map(|s| (s, true)));
    all.sort_by(|a, b| {
        (&a.0.subject_id, a.0.age_months())
            .partial_cmp(&(&b.0.subject_id, b.0.age_months()))
            .unwrap()
    });
    let mut dims = None;
    let mut spacing = None;
    for (scan, flagged) in all {
        let file = scan_file_name(&scan.subject_id, scan.age_months());
        let path = dir.join(&file);
        write_volume(&scan.volume, &path)?;
        write_sidecar(
            &SidecarMeta {
                subject_id: scan.subject_id.clone(),
                age_months: scan.age_months(),
                provenance: scan.provenance(),
            },
            &path,
        )?;
        dims.get_or_insert(scan.volume.dims());
        spacing.get_or_insert(scan.volume.spacing());
        let truth_volumes =
            truth.and_then(|t| t.find(&scan.subject_id, scan.age_months())).map(|t| t.class_volumes_mm3);
        scans.push(ManifestScan {
            subject_id: scan.subject_id.clone(),
            age_months: scan.age_months(),
            file,
            held_out: flagged,
            provenance: scan.provenance(),
            truth_volumes_mm3: truth_volumes,
        });
    }
    let dims = dims.ok_or_else(|| Error::InvalidConfig("cohort is empty".into()))?;
    let spacing = spacing.unwrap();
    let manifest = CohortManifest {
        version: 1,
        dims: [dims.0, dims.1, dims.2],
        spacing: [spacing.0, spacing.1, spacing.2],
        age_grid: cohort.age_grid.clone().unwrap_or_default(),
        scans,
    };
    fs::write(dir.join("cohort.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a cohort directory back. Returns the training cohort (scans not
/// flagged held-out), the held-out scans, and the manifest.
pub fn read_cohort_dir(dir: &Path) -> Result<(LongitudinalCohort, Vec<ScanRecord>, CohortManifest)> {
    let text = fs::read_to_string(dir.join("cohort.json"))
        .map_err(|e| Error::Format(format!("{}: cohort.json: {e}", dir.display())))?;
    let manifest: CohortManifest = serde_json::from_str(&text)?;
    if manifest.version != 1 {
        return Err(Error::Format(format!(
            "unsupported cohort manifest version {}",
            manifest.version
        )));
    }
    let age_grid = if manifest.age_grid.is_empty() { None } else { Some(manifest.age_grid.clone()) };
    let mut cohort = LongitudinalCohort::new(age_grid);
    let mut held_out = Vec::new();
    for entry in &manifest.scans {
        let volume = read_volume(&dir.join(&entry.file))?;
        let rec = ScanRecord::new(&entry.subject_id, entry.age_months, volume, entry.provenance)?;
        if entry.held_out {
            held_out.push(rec);
        } else {
            cohort.insert(rec)?;
        }
    }
    Ok((cohort, held_out, manifest))
}
