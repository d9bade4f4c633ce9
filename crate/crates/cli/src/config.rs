//! Flat, strictly-parsed key-value run configuration. Unknown keys are
//! rejected so misspellings fail fast instead of silently defaulting.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cascade_volcomp::denoiser::DenoiserVariant;
use cascade_volcomp::error::{Error, Result};
use cascade_volcomp::eval::SsimParams;
use cascade_volcomp::phantom::{ClassLaw, ContrastLaw, GrowthLaw, PhantomConfig};
use cascade_volcomp::pipeline::{GuidancePolicy, TrainConfig, TrainStage, DEFAULT_SAMPLING_STEPS};

/// Every recognized key. All optional; each command resolves the subset it
/// needs against its defaults and records the resolved values in run.json.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    // Shared.
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub completed_dir: Option<PathBuf>,

    // Phantom generation.
    pub dims: Option<[usize; 3]>,
    pub spacing: Option<[f32; 3]>,
    pub n_subjects: Option<usize>,
    pub age_grid: Option<Vec<f64>>,
    pub missing_fraction: Option<f64>,
    pub law_csf: Option<[f64; 2]>,
    pub law_gm: Option<[f64; 2]>,
    pub law_wm: Option<[f64; 2]>,
    pub sigma_subject: Option<f64>,
    pub sigma_noise: Option<f64>,
    pub contrast_csf: Option<f64>,
    pub contrast_wm: Option<f64>,
    pub contrast_gm_young: Option<f64>,
    pub contrast_gm_mature: Option<f64>,
    pub contrast_ramp: Option<[f64; 2]>,

    // Training.
    pub stage: Option<TrainStage>,
    pub variant: Option<DenoiserVariant>,
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
    pub diffusion_steps: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_steps: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub augment: Option<bool>,
    pub augment_max_degrees: Option<f64>,
    pub base_channels: Option<usize>,
    pub channel_multipliers: Option<[usize; 4]>,
    pub age_embed_dim: Option<usize>,
    pub time_embed_dim: Option<usize>,
    pub attention_heads: Option<usize>,

    // Completion.
    pub gen_checkpoint: Option<PathBuf>,
    pub sr_checkpoint: Option<PathBuf>,
    pub subjects: Option<Vec<String>>,
    pub target_ages: Option<Vec<f64>>,
    pub guidance_policy: Option<String>,
    pub fixed_scan_age: Option<f64>,
    pub sampling_steps: Option<usize>,

    // Evaluation.
    pub ssim_window: Option<usize>,
    pub ssim_k1: Option<f64>,
    pub ssim_k2: Option<f64>,
    pub data_range: Option<f64>,
    pub variant_name: Option<String>,

    // Trajectory analysis.
    pub seg_bg_cut: Option<f64>,
    pub seg_thresholds: Option<[f64; 2]>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn require_out_dir(&self) -> Result<PathBuf> {
        self.out_dir
            .clone()
            .ok_or_else(|| Error::InvalidConfig("out_dir is required (config key or --out)".into()))
    }

    pub fn require_data_dir(&self) -> Result<PathBuf> {
        self.data_dir
            .clone()
            .ok_or_else(|| Error::InvalidConfig("data_dir is required".into()))
    }

    pub fn phantom_config(&self) -> Result<PhantomConfig> {
        let dims = self.dims.unwrap_or([40, 48, 40]);
        let spacing = self.spacing.unwrap_or([0.4, 0.4, 0.4]);
        let contrast_default = ContrastLaw::default();
        let cfg = PhantomConfig {
            dims: (dims[0], dims[1], dims[2]),
            spacing: (spacing[0], spacing[1], spacing[2]),
            n_subjects: self.n_subjects.unwrap_or(10),
            age_grid: self
                .age_grid
                .clone()
                .unwrap_or_else(|| vec![3.0, 6.0, 9.0, 12.0, 18.0, 24.0]),
            contrast: ContrastLaw {
                csf: self.contrast_csf.unwrap_or(contrast_default.csf),
                wm: self.contrast_wm.unwrap_or(contrast_default.wm),
                gm_young: self.contrast_gm_young.unwrap_or(contrast_default.gm_young),
                gm_mature: self.contrast_gm_mature.unwrap_or(contrast_default.gm_mature),
                ramp: self
                    .contrast_ramp
                    .map(|r| (r[0], r[1]))
                    .unwrap_or(contrast_default.ramp),
            },
            seed: self.seed(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn growth_law(&self) -> GrowthLaw {
        let d = GrowthLaw::default();
        let law = |v: Option<[f64; 2]>, fallback: ClassLaw| match v {
            Some([b0, b1]) => ClassLaw { beta0: b0, beta1: b1 },
            None => fallback,
        };
        GrowthLaw {
            csf: law(self.law_csf, d.csf),
            gm: law(self.law_gm, d.gm),
            wm: law(self.law_wm, d.wm),
            sigma_subject: self.sigma_subject.unwrap_or(d.sigma_subject),
            sigma_noise: self.sigma_noise.unwrap_or(d.sigma_noise),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let stage = self
            .stage
            .ok_or_else(|| Error::InvalidConfig("stage is required (generate | sr)".into()))?;
        let mut cfg = match stage {
            TrainStage::Generate => TrainConfig::generate_defaults(),
            TrainStage::Sr => TrainConfig::sr_defaults(),
        };
        cfg.seed = self.seed();
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            };
        }
        set!(variant);
        set!(beta_start);
        set!(beta_end);
        set!(diffusion_steps);
        set!(learning_rate);
        set!(batch_size);
        set!(max_steps);
        set!(checkpoint_every);
        set!(augment);
        set!(augment_max_degrees);
        set!(base_channels);
        set!(channel_multipliers);
        set!(age_embed_dim);
        set!(time_embed_dim);
        set!(attention_heads);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn guidance_policy(&self) -> Result<GuidancePolicy> {
        match self.guidance_policy.as_deref() {
            None | Some("nearest_age") => Ok(GuidancePolicy::NearestAge),
            Some("fixed_scan") => {
                let age = self.fixed_scan_age.ok_or_else(|| {
                    Error::InvalidConfig("fixed_scan policy requires fixed_scan_age".into())
                })?;
                Ok(GuidancePolicy::FixedScan(age))
            }
            Some(other) => Err(Error::InvalidConfig(format!(
                "unknown guidance_policy {other:?} (nearest_age | fixed_scan)"
            ))),
        }
    }

    pub fn sampling_steps(&self) -> usize {
        self.sampling_steps.unwrap_or(DEFAULT_SAMPLING_STEPS)
    }

    pub fn ssim_params(&self) -> Result<SsimParams> {
        let d = SsimParams::default();
        let p = SsimParams {
            window: self.ssim_window.unwrap_or(d.window),
            k1: self.ssim_k1.unwrap_or(d.k1),
            k2: self.ssim_k2.unwrap_or(d.k2),
            data_range: self.data_range.unwrap_or(d.data_range),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn segmentation(&self) -> Result<(f64, (f64, f64))> {
        let bg = self.seg_bg_cut.unwrap_or(cascade_volcomp::eval::DEFAULT_BG_CUT);
        let th = self
            .seg_thresholds
            .map(|t| (t[0], t[1]))
            .unwrap_or(cascade_volcomp::eval::DEFAULT_SEG_THRESHOLDS);
        if !(bg > 0.0 && bg < th.0 && th.0 < th.1 && th.1 < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "segmentation cuts must satisfy 0 < bg_cut < t1 < t2 < 1, got bg {bg}, t ({}, {})",
                th.0, th.1
            )));
        }
        Ok((bg, th))
    }
}
