//! Training loops for both stages, guidance augmentation, and the
//! end-to-end completion procedure: given a subject's available scans and
//! a target age, produce the missing high-resolution scan.
//!
//! The cascade contract: cohort scans live on the high-resolution grid;
//! the generate stage works on their factor-2 downsampled views, the SR
//! stage maps low back to high.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{
    batch_loss_graph, init_denoiser_params, load_denoiser, save_denoiser, AsmmConfig,
    DenoiserVariant, GradCheckItem, GuidanceBundle, GuidedEpsModel, NetGuidedModel,
};
use crate::diffusion::{ddim_step, ddim_timesteps, make_linear_schedule, NoiseSchedule, ScheduleSpec};
use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Tensor};
use crate::nn::params::Adam;
use crate::nn::randn_tensor;
use crate::sr::{
    init_sr_params, load_sr, save_sr, sr_batch_loss_graph, sr_sample_with_model, CondEpsModel,
    NetSrModel, SrConfig, SrTrainItem,
};
use crate::volume::{
    normalize_intensity, resample_down2, tensor_to_volume, volume_to_tensor, LongitudinalCohort,
    Provenance, ScanRecord, Volume3D,
};

/// Which cascade stage a training run builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainStage {
    Generate,
    Sr,
}

/// All knobs of one training run. Schedule and learning-rate defaults are
/// per stage: generate (1e-4, 5e-3, 4000 steps), SR (1e-4, 2e-2, 1000
/// steps), Adam at 2e-4 for both.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: TrainStage,
    pub beta_start: f64,
    pub beta_end: f64,
    pub diffusion_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Emit `<stage>_step<N>.ckpt` every this many steps; 0 = final only.
    pub checkpoint_every: usize,
    pub augment: bool,
    pub augment_max_degrees: f64,
    pub base_channels: usize,
    pub channel_multipliers: [usize; 4],
    pub age_embed_dim: usize,
    pub time_embed_dim: usize,
    pub attention_heads: usize,
    pub variant: DenoiserVariant,
}

impl TrainConfig {
    pub fn generate_defaults() -> Self {
        Self {
            stage: TrainStage::Generate,
            beta_start: 1e-4,
            beta_end: 5e-3,
            diffusion_steps: 4000,
            learning_rate: 2e-4,
            batch_size: 2,
            max_steps: 2000,
            seed: 0,
            checkpoint_every: 0,
            augment: true,
            augment_max_degrees: 5.0,
            base_channels: 16,
            channel_multipliers: [1, 2, 4, 4],
            age_embed_dim: 32,
            time_embed_dim: 32,
            attention_heads: 4,
            variant: DenoiserVariant::Asmm,
        }
    }

    pub fn sr_defaults() -> Self {
        Self {
            stage: TrainStage::Sr,
            beta_start: 1e-4,
            beta_end: 2e-2,
            diffusion_steps: 1000,
            ..Self::generate_defaults()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(0.0..=5.0).contains(&self.augment_max_degrees) {
            return Err(Error::InvalidConfig(format!(
                "augment_max_degrees must lie in [0, 5], got {}",
                self.augment_max_degrees
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule_spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            steps: self.diffusion_steps,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.beta_start, self.beta_end, self.diffusion_steps)
    }
}

/// How the guidance scan is chosen at completion time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "age_months")]
pub enum GuidancePolicy {
    /// Closest observed age; ties go to the younger scan.
    NearestAge,
    /// Always the scan at this observed age.
    FixedScan(f64),
}

/// A completion order: which subject, which target ages, which guidance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub subject_id: String,
    pub target_ages: Vec<f64>,
    pub policy: GuidancePolicy,
}

/// Rotates a volume by independent per-axis angles drawn uniformly from
/// [0, max_degrees], with trilinear resampling and zero fill outside.
/// `max_degrees = 0` returns the input bit-exactly.
pub fn augment_guidance(v: &Volume3D, max_degrees: f64, seed: u64) -> Result<Volume3D> {
    if !(0.0..=5.0).contains(&max_degrees) {
        return Err(Error::InvalidConfig(format!(
            "max_degrees must lie in [0, 5], got {max_degrees}"
        )));
    }
    if max_degrees == 0.0 {
        return Ok(v.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let to_rad = std::f64::consts::PI / 180.0;
    let ax = rng.random_range(0.0..max_degrees) * to_rad;
    let ay = rng.random_range(0.0..max_degrees) * to_rad;
    let az = rng.random_range(0.0..max_degrees) * to_rad;

    // R = Rz * Ry * Rx; sampling applies the inverse (transpose).
    let (cx, sx_) = (ax.cos(), ax.sin());
    let (cy, sy_) = (ay.cos(), ay.sin());
    let (cz, sz_) = (az.cos(), az.sin());
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx_], [0.0, sx_, cx]];
    let ry = [[cy, 0.0, sy_], [0.0, 1.0, 0.0], [-sy_, 0.0, cy]];
    let rz = [[cz, -sz_, 0.0], [sz_, cz, 0.0], [0.0, 0.0, 1.0]];
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for (k, bk) in b.iter().enumerate() {
                    m[i][j] += a[i][k] * bk[j];
                }
            }
        }
        m
    };
    let r = mul(rz, mul(ry, rx));

    let (nx, ny, nz) = v.dims();
    let (sx, sy, sz) = v.spacing();
    let spacing = [sx as f64, sy as f64, sz as f64];
    let center = [
        nx as f64 * spacing[0] / 2.0,
        ny as f64 * spacing[1] / 2.0,
        nz as f64 * spacing[2] / 2.0,
    ];

    let mut out = vec![0.0f32; nx * ny * nz];
    for iz in 0..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                let p = [
                    (ix as f64 + 0.5) * spacing[0] - center[0],
                    (iy as f64 + 0.5) * spacing[1] - center[1],
                    (iz as f64 + 0.5) * spacing[2] - center[2],
                ];
                // Inverse rotation = transpose.
                let q = [
                    r[0][0] * p[0] + r[1][0] * p[1] + r[2][0] * p[2],
                    r[0][1] * p[0] + r[1][1] * p[1] + r[2][1] * p[2],
                    r[0][2] * p[0] + r[1][2] * p[1] + r[2][2] * p[2],
                ];
                // Back to voxel coordinates.
                let fx = (q[0] + center[0]) / spacing[0] - 0.5;
                let fy = (q[1] + center[1]) / spacing[1] - 0.5;
                let fz = (q[2] + center[2]) / spacing[2] - 0.5;
                out[ix + nx * (iy + ny * iz)] = trilinear_zero(v, fx, fy, fz) as f32;
            }
        }
    }
    Volume3D::new(v.dims(), v.spacing(), out)
}

/// Trilinear sample at fractional voxel coordinates; zero outside.
fn trilinear_zero(v: &Volume3D, fx: f64, fy: f64, fz: f64) -> f64 {
    let (nx, ny, nz) = v.dims();
    let x0 = fx.floor();
    let y0 = fy.floor();
    let z0 = fz.floor();
    let (tx, ty, tz) = (fx - x0, fy - y0, fz - z0);
    let mut acc = 0.0;
    for (dx, wx) in [(0i64, 1.0 - tx), (1, tx)] {
        for (dy, wy) in [(0i64, 1.0 - ty), (1, ty)] {
            for (dz, wz) in [(0i64, 1.0 - tz), (1, tz)] {
                let (xi, yi, zi) = (x0 as i64 + dx, y0 as i64 + dy, z0 as i64 + dz);
                let w = wx * wy * wz;
                if w == 0.0 {
                    continue;
                }
                if xi >= 0 && (xi as usize) < nx && yi >= 0 && (yi as usize) < ny && zi >= 0 && (zi as usize) < nz {
                    acc += w * v.at(xi as usize, yi as usize, zi as usize) as f64;
                }
            }
        }
    }
    acc
}

/// Picks (subject, target scan, guidance scan) for one training pair:
/// uniform over subjects with at least two scans, then an ordered pair of
/// distinct scans.
pub(crate) fn sample_pair_indices<R: Rng>(
    cohort: &LongitudinalCohort,
    rng: &mut R,
) -> Result<(String, usize, usize)> {
    let eligible: Vec<String> = cohort
        .subjects()
        .filter(|(_, scans)| scans.len() >= 2)
        .map(|(id, _)| id.clone())
        .collect();
    if eligible.is_empty() {
        return Err(Error::Infeasible(
            "training pairs need a subject with at least two scans".into(),
        ));
    }
    let subject = eligible[rng.random_range(0..eligible.len())].clone();
    let n = cohort.scans_of(&subject).unwrap().len();
    let target = rng.random_range(0..n);
    let mut guide = rng.random_range(0..n - 1);
    if guide >= target {
        guide += 1;
    }
    Ok((subject, target, guide))
}

/// Draws one training pair: a target scan (downsampled to the low grid)
/// and its guidance bundle (another scan of the same subject, augmented,
/// tagged with the target's age).
pub fn make_training_pair(
    cohort: &LongitudinalCohort,
    augment_max_degrees: f64,
    seed: u64,
) -> Result<(Volume3D, GuidanceBundle)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (subject, ti, gi) = sample_pair_indices(cohort, &mut rng)?;
    let scans = cohort.scans_of(&subject).unwrap();
    let target = &scans[ti];
    let guide = &scans[gi];
    let x0_low = resample_down2(&target.volume)?;
    let guide_low = resample_down2(&guide.volume)?;
    let aug_seed = rng.random::<u64>();
    let guide_low = augment_guidance(&guide_low, augment_max_degrees, aug_seed)?;
    let bundle = GuidanceBundle::new(guide_low, target.age_months())?;
    Ok((x0_low, bundle))
}

/// One row of the training loss log.
#[derive(Debug, Clone, Copy)]
pub struct LossEntry {
    pub step: usize,
    pub loss: f64,
    pub wall_seconds: f64,
}

/// Writes `loss_log.csv` (step, loss, wall_seconds).
pub fn write_loss_log(path: &Path, entries: &[LossEntry]) -> Result<()> {
    let mut out = String::from("step,loss,wall_seconds\n");
    for e in entries {
        out.push_str(&format!("{},{},{:.3}\n", e.step, e.loss, e.wall_seconds));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Result of one training run.
pub struct TrainOutput {
    pub checkpoint_path: PathBuf,
    pub loss_log_path: PathBuf,
    pub loss_log: Vec<LossEntry>,
}

fn low_dims_of(cohort: &LongitudinalCohort) -> Result<(usize, usize, usize)> {
    let scan = cohort
        .iter_scans()
        .next()
        .ok_or_else(|| Error::InvalidConfig("cohort is empty".into()))?;
    let (nx, ny, nz) = scan.volume.dims();
    if nx % 2 != 0 || ny % 2 != 0 || nz % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "cohort dims {nx}x{ny}x{nz} must be even for the cascade"
        )));
    }
    for s in cohort.iter_scans() {
        if s.volume.dims() != (nx, ny, nz) {
            return Err(Error::ShapeMismatch(format!(
                "cohort scans disagree on dims: {:?} vs {:?}",
                s.volume.dims(),
                (nx, ny, nz)
            )));
        }
    }
    Ok((nx / 2, ny / 2, nz / 2))
}

fn guard_finite(step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence(format!(
            "training loss became non-finite ({loss}) at step {step}"
        )));
    }
    Ok(())
}

/// Trains one cascade stage on the cohort and writes the checkpoint plus
/// the loss log into `out_dir`. Deterministic given the config seed.
pub fn train_stage(cohort: &LongitudinalCohort, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutput> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    match cfg.stage {
        TrainStage::Generate => train_generate(cohort, cfg, out_dir),
        TrainStage::Sr => train_sr(cohort, cfg, out_dir),
    }
}

fn train_generate(cohort: &LongitudinalCohort, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutput> {
    let low = low_dims_of(cohort)?;
    let model_cfg = AsmmConfig {
        in_dims: low,
        base_channels: cfg.base_channels,
        channel_multipliers: cfg.channel_multipliers,
        age_embed_dim: cfg.age_embed_dim,
        time_embed_dim: cfg.time_embed_dim,
        attention_heads: cfg.attention_heads,
    };
    let sched = cfg.schedule()?;
    let mut params = init_denoiser_params(&model_cfg, cfg.variant, cfg.seed)?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = Instant::now();
    let mut log = Vec::with_capacity(cfg.max_steps);
    let max_degrees = if cfg.augment { cfg.augment_max_degrees } else { 0.0 };

    let ckpt_name = match cfg.variant {
        DenoiserVariant::Asmm => "generate.ckpt",
        DenoiserVariant::SharedEncoder => "generate_shared.ckpt",
    };

    for step in 0..cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let pair_seed = rng.random::<u64>();
            let (x0_low, bundle) = make_training_pair(cohort, max_degrees, pair_seed)?;
            let t = rng.random_range(1..=sched.steps());
            let (lx, ly, lz) = low;
            let eps = randn_tensor(&[1, lx, ly, lz], &mut rng);
            batch.push(GradCheckItem {
                x0: volume_to_tensor(&x0_low),
                guide: volume_to_tensor(&bundle.guide_volume),
                age_months: bundle.target_age_months,
                t,
                eps,
            });
        }
        let mut g = Graph::new();
        let bind = params.bind(&mut g, true);
        let loss_id = batch_loss_graph(&mut g, &bind, &model_cfg, cfg.variant, &sched, &batch)?;
        let loss = g.value(loss_id)[[0]];
        guard_finite(step, loss)?;
        let mut grads_map = BTreeMap::new();
        let mut grads = g.backward(loss_id)?;
        for (name, id) in bind.iter() {
            if let Some(gt) = grads.take(*id) {
                grads_map.insert(name.clone(), gt);
            }
        }
        adam.step(&mut params, &grads_map);
        log.push(LossEntry { step, loss, wall_seconds: start.elapsed().as_secs_f64() });
        log::debug!("generate step {step}: loss {loss:.6}");

        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            let p = out_dir.join(format!("generate_step{:06}.ckpt", step + 1));
            save_denoiser(&p, &model_cfg, cfg.variant, &cfg.schedule_spec(), &params)?;
        }
    }

    let checkpoint_path = out_dir.join(ckpt_name);
    save_denoiser(&checkpoint_path, &model_cfg, cfg.variant, &cfg.schedule_spec(), &params)?;
    let loss_log_path = out_dir.join("loss_log.csv");
    write_loss_log(&loss_log_path, &log)?;
    Ok(TrainOutput { checkpoint_path, loss_log_path, loss_log: log })
}

fn train_sr(cohort: &LongitudinalCohort, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutput> {
    let low = low_dims_of(cohort)?;
    let scans: Vec<&ScanRecord> = cohort.iter_scans().collect();
    let first = scans
        .first()
        .ok_or_else(|| Error::InvalidConfig("cohort is empty".into()))?;
    let model_cfg = SrConfig {
        low_dims: low,
        high_dims: first.volume.dims(),
        base_channels: cfg.base_channels,
        channel_multipliers: cfg.channel_multipliers,
        time_embed_dim: cfg.time_embed_dim,
    };
    let sched = cfg.schedule()?;
    let mut params = init_sr_params(&model_cfg, cfg.seed)?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = Instant::now();
    let mut log = Vec::with_capacity(cfg.max_steps);

    // Teacher forcing: the conditioning is the downsampled target itself.
    let highs: Vec<Tensor> = scans.iter().map(|s| volume_to_tensor(&s.volume)).collect();
    let lows: Vec<Tensor> = scans
        .iter()
        .map(|s| resample_down2(&s.volume).map(|v| volume_to_tensor(&v)))
        .collect::<Result<_>>()?;

    for step in 0..cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let k = rng.random_range(0..scans.len());
            let t = rng.random_range(1..=sched.steps());
            let (hx, hy, hz) = model_cfg.high_dims;
            let eps = randn_tensor(&[1, hx, hy, hz], &mut rng);
            batch.push(SrTrainItem {
                x0_high: highs[k].clone(),
                z_low: lows[k].clone(),
                t,
                eps,
            });
        }
        let mut g = Graph::new();
        let bind = params.bind(&mut g, true);
        let loss_id = sr_batch_loss_graph(&mut g, &bind, &model_cfg, &sched, &batch)?;
        let loss = g.value(loss_id)[[0]];
        guard_finite(step, loss)?;
        let mut grads_map = BTreeMap::new();
        let mut grads = g.backward(loss_id)?;
        for (name, id) in bind.iter() {
            if let Some(gt) = grads.take(*id) {
                grads_map.insert(name.clone(), gt);
            }
        }
        adam.step(&mut params, &grads_map);
        log.push(LossEntry { step, loss, wall_seconds: start.elapsed().as_secs_f64() });
        log::debug!("sr step {step}: loss {loss:.6}");

        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            let p = out_dir.join(format!("sr_step{:06}.ckpt", step + 1));
            save_sr(&p, &model_cfg, &cfg.schedule_spec(), &params)?;
        }
    }

    let checkpoint_path = out_dir.join("sr.ckpt");
    save_sr(&checkpoint_path, &model_cfg, &cfg.schedule_spec(), &params)?;
    let loss_log_path = out_dir.join("loss_log.csv");
    write_loss_log(&loss_log_path, &log)?;
    Ok(TrainOutput { checkpoint_path, loss_log_path, loss_log: log })
}

/// How many DDIM steps the samplers take by default.
pub const DEFAULT_SAMPLING_STEPS: usize = 50;

/// Picks the guidance scan for a target age under the request's policy.
pub fn pick_guidance<'a>(
    cohort: &'a LongitudinalCohort,
    subject_id: &str,
    target_age: f64,
    policy: &GuidancePolicy,
) -> Result<&'a ScanRecord> {
    let scans = cohort
        .scans_of(subject_id)
        .ok_or_else(|| Error::UnknownSubject(subject_id.to_string()))?;
    if scans.is_empty() {
        return Err(Error::UnknownSubject(format!("{subject_id} has no observed scans")));
    }
    match policy {
        GuidancePolicy::NearestAge => Ok(cohort.nearest_scan(subject_id, target_age).unwrap()),
        GuidancePolicy::FixedScan(age) => scans
            .iter()
            .find(|s| s.age_months() == *age)
            .ok_or_else(|| Error::InvalidConfig(format!("{subject_id} has no scan at {age} months"))),
    }
}

/// Generates the low-resolution volume for one (guide, age) condition by
/// running the eta = 0 DDIM chain from seeded Gaussian noise.
pub fn generate_low_res(
    model: &dyn GuidedEpsModel,
    low_dims: (usize, usize, usize),
    guide_low: &Tensor,
    target_age: f64,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let (lx, ly, lz) = low_dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = randn_tensor(&[1, lx, ly, lz], &mut rng);
    let ts = ddim_timesteps(sched.steps(), steps)?;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
        let eps_hat = model.predict_eps(&x, t, guide_low, target_age)?;
        x = ddim_step(&x, &eps_hat, t, t_prev, sched, 0.0, None)?;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("generate-stage sampler produced non-finite values".into()));
    }
    Ok(x)
}

/// Everything the completion procedure needs besides the data: the two
/// stage models and their schedules.
pub struct CascadeModels<'a> {
    pub generate: &'a dyn GuidedEpsModel,
    pub generate_sched: &'a NoiseSchedule,
    pub low_dims: (usize, usize, usize),
    pub sr: &'a dyn CondEpsModel,
    pub sr_sched: &'a NoiseSchedule,
    pub sampling_steps: usize,
}

/// Completes one (subject, age): picks the guidance scan, generates at low
/// resolution, refines to high resolution, normalizes. The per-call seed
/// fully determines the result.
pub fn complete_one(
    models: &CascadeModels<'_>,
    cohort: &LongitudinalCohort,
    subject_id: &str,
    target_age: f64,
    policy: &GuidancePolicy,
    seed: u64,
) -> Result<ScanRecord> {
    let guide = pick_guidance(cohort, subject_id, target_age, policy)?;
    let guide_low_vol = resample_down2(&guide.volume)?;
    if guide_low_vol.dims() != models.low_dims {
        return Err(Error::ShapeMismatch(format!(
            "guidance low-res dims {:?} do not match the generate model's {:?}",
            guide_low_vol.dims(),
            models.low_dims
        )));
    }
    let (hx, hy, hz) = models.sr.high_dims();
    if (2 * models.low_dims.0, 2 * models.low_dims.1, 2 * models.low_dims.2) != (hx, hy, hz) {
        return Err(Error::ShapeMismatch(format!(
            "SR model high dims {:?} are not twice the generate dims {:?}",
            (hx, hy, hz),
            models.low_dims
        )));
    }
    let guide_low = volume_to_tensor(&guide_low_vol);

    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let gen_seed = seeds.random::<u64>();
    let sr_seed = seeds.random::<u64>();

    let z0 = generate_low_res(
        models.generate,
        models.low_dims,
        &guide_low,
        target_age,
        models.generate_sched,
        models.sampling_steps,
        gen_seed,
    )?;
    let high = sr_sample_with_model(models.sr, &z0, models.sr_sched, models.sampling_steps, sr_seed)?;
    let vol = tensor_to_volume(&high, guide.volume.spacing())?;
    let vol = normalize_intensity(&vol)
        .map_err(|e| Error::Divergence(format!("completion produced a degenerate volume: {e}")))?;
    ScanRecord::new(subject_id, target_age, vol, Provenance::Generated)
}

/// Completes every requested timepoint for one subject with checkpointed
/// models. Output order follows `target_ages`; per-age substreams make the
/// ages independent and the whole call deterministic in `seed`.
pub fn complete_subject(
    gen_ckpt: &Path,
    sr_ckpt: &Path,
    cohort: &LongitudinalCohort,
    req: &CompletionRequest,
    sampling_steps: usize,
    seed: u64,
) -> Result<Vec<ScanRecord>> {
    if cohort.scans_of(&req.subject_id).is_none() {
        return Err(Error::UnknownSubject(req.subject_id.clone()));
    }
    let targets: Vec<(String, f64)> = req
        .target_ages
        .iter()
        .map(|&a| (req.subject_id.clone(), a))
        .collect();
    complete_missing(gen_ckpt, sr_ckpt, cohort, &targets, &req.policy, sampling_steps, seed)
}

/// Completes a list of (subject, age) targets with checkpointed models.
/// Targets are independent: each gets its own deterministic noise stream
/// derived from (seed, index), so the output is bit-stable regardless of
/// how many worker threads rayon uses.
pub fn complete_missing(
    gen_ckpt: &Path,
    sr_ckpt: &Path,
    cohort: &LongitudinalCohort,
    targets: &[(String, f64)],
    policy: &GuidancePolicy,
    sampling_steps: usize,
    seed: u64,
) -> Result<Vec<ScanRecord>> {
    let (gen_cfg, variant, gen_spec, gen_params) = load_denoiser(gen_ckpt)?;
    let (sr_cfg, sr_spec, sr_params) = load_sr(sr_ckpt)?;
    let gen_sched = gen_spec.build()?;
    let sr_sched = sr_spec.build()?;
    let gen_model = NetGuidedModel { params: &gen_params, cfg: &gen_cfg, variant };
    let sr_model = NetSrModel { params: &sr_params, cfg: &sr_cfg };
    let models = CascadeModels {
        generate: &gen_model,
        generate_sched: &gen_sched,
        low_dims: gen_cfg.in_dims,
        sr: &sr_model,
        sr_sched: &sr_sched,
        sampling_steps,
    };
    use rayon::prelude::*;
    targets
        .par_iter()
        .enumerate()
        .map(|(k, (subject, age))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64 + 1);
            let age_seed = rng.random::<u64>();
            complete_one(&models, cohort, subject, *age, policy, age_seed)
        })
        .collect()
}
