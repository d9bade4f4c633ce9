//! Generate-stage denoising network with asynchronous multimodal
//! conditioning: the noisy volume and the guidance volume pass through
//! independent encoders, guidance features join every decoder skip
//! connection, the target age enters through cross-attention at the
//! bottleneck, and the timestep is injected into every residual block.
//! Decoder upsampling uses transposed convolutions.
//!
//! The shared-encoder variant (the ablation's "model-1") concatenates the
//! guidance as a second input channel of a single encoder instead.

use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeId, Tensor};
use crate::nn::layers::{
    apply_conv3d, apply_cross_attention, apply_group_norm, apply_mlp,
    apply_res_block, apply_tconv3d, init_conv3d, init_conv3d_zero, init_cross_attention,
    init_group_norm, init_mlp, init_res_block, init_tconv3d,
};
use crate::nn::params::{load_checkpoint, save_checkpoint, verify_manifest, Binding, ParamStore};
use crate::nn::{randn_tensor, sinusoidal_embedding};
use crate::volume::{volume_to_tensor, Volume3D};

/// Number of learned key/value tokens projected off the age embedding.
pub const AGE_TOKENS: usize = 4;

/// Architecture settings of the generate-stage denoiser.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsmmConfig {
    pub in_dims: (usize, usize, usize),
    pub base_channels: usize,
    /// One multiplier per resolution level; four levels, each followed by
    /// a factor-2 mean pooling in the encoders.
    pub channel_multipliers: [usize; 4],
    pub age_embed_dim: usize,
    pub time_embed_dim: usize,
    pub attention_heads: usize,
}

impl Default for AsmmConfig {
    fn default() -> Self {
        Self {
            in_dims: (20, 24, 20),
            base_channels: 16,
            channel_multipliers: [1, 2, 4, 4],
            age_embed_dim: 32,
            time_embed_dim: 32,
            attention_heads: 4,
        }
    }
}

impl AsmmConfig {
    pub fn channels(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for (i, m) in self.channel_multipliers.iter().enumerate() {
            c[i] = self.base_channels * m;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, ny, nz) = self.in_dims;
        if nx < 4 || ny < 4 || nz < 4 {
            return Err(Error::InvalidConfig(format!(
                "in_dims must be at least 4 per axis, got {nx}x{ny}x{nz}"
            )));
        }
        if self.base_channels < 2 {
            return Err(Error::InvalidConfig("base_channels must be >= 2".into()));
        }
        if self.channel_multipliers.iter().any(|&m| m == 0) {
            return Err(Error::InvalidConfig("channel multipliers must be positive".into()));
        }
        for (name, d) in [("age_embed_dim", self.age_embed_dim), ("time_embed_dim", self.time_embed_dim)] {
            if d < 4 || d % 2 != 0 {
                return Err(Error::InvalidConfig(format!("{name} must be even and >= 4, got {d}")));
            }
        }
        let c3 = self.channels()[3];
        if self.attention_heads == 0 || c3 % self.attention_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "attention_heads must divide the bottleneck channels {c3}"
            )));
        }
        Ok(())
    }
}

/// Which conditioning topology the network uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserVariant {
    /// Independent guidance encoder + skip concatenation (the full block).
    Asmm,
    /// Guidance concatenated as a second input channel, single encoder.
    SharedEncoder,
}

impl DenoiserVariant {
    pub fn kind_str(self) -> &'static str {
        match self {
            DenoiserVariant::Asmm => "generate/asmm",
            DenoiserVariant::SharedEncoder => "generate/shared_encoder",
        }
    }
}

/// The condition c = (guidance scan, target age in months).
#[derive(Debug, Clone)]
pub struct GuidanceBundle {
    pub guide_volume: Volume3D,
    pub target_age_months: f64,
}

impl GuidanceBundle {
    pub fn new(guide_volume: Volume3D, target_age_months: f64) -> Result<Self> {
        if !(target_age_months.is_finite() && target_age_months > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "target age must be positive and finite, got {target_age_months}"
            )));
        }
        Ok(Self { guide_volume, target_age_months })
    }
}

/// Sinusoidal timestep encoding before the learned MLP.
pub fn embed_time_base(t: usize, dim: usize) -> Vec<f64> {
    sinusoidal_embedding(t as f64, dim)
}

/// Sinusoidal age encoding before the learned MLP. Ages are months as-is;
/// fractional values are fine.
pub fn embed_age_base(age_months: f64, dim: usize) -> Result<Vec<f64>> {
    if !(age_months.is_finite() && age_months > 0.0) {
        return Err(Error::InvalidConfig(format!("age must be positive, got {age_months}")));
    }
    Ok(sinusoidal_embedding(age_months, dim))
}

fn leaf_row(g: &mut Graph, values: &[f64]) -> NodeId {
    g.leaf(
        Tensor::from_shape_vec(IxDyn(&[1, values.len()]), values.to_vec()).unwrap(),
        false,
    )
}

/// Full timestep embedding (sinusoid through the learned MLP).
pub fn embed_time(params: &ParamStore, cfg: &AsmmConfig, t: usize) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bind = params.bind(&mut g, false);
    let base = leaf_row(&mut g, &embed_time_base(t, cfg.time_embed_dim));
    let out = apply_mlp(&mut g, &bind, "time_mlp", base);
    Ok(g.value(out).iter().cloned().collect())
}

/// Full age embedding tau (sinusoid through the learned MLP).
pub fn embed_age(params: &ParamStore, cfg: &AsmmConfig, age_months: f64) -> Result<Vec<f64>> {
    let base = embed_age_base(age_months, cfg.age_embed_dim)?;
    let mut g = Graph::new();
    let bind = params.bind(&mut g, false);
    let base = leaf_row(&mut g, &base);
    let out = apply_mlp(&mut g, &bind, "age_mlp", base);
    Ok(g.value(out).iter().cloned().collect())
}

/// Initializes all weights for the given architecture. Convolutions use
/// fan-in-scaled uniform draws; the output convolution starts at zero so
/// the untrained network predicts zero noise.
pub fn init_denoiser_params(cfg: &AsmmConfig, variant: DenoiserVariant, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let c = cfg.channels();

    init_mlp(&mut store, &mut rng, "time_mlp", cfg.time_embed_dim, cfg.time_embed_dim);
    init_mlp(&mut store, &mut rng, "age_mlp", cfg.age_embed_dim, cfg.age_embed_dim);

    let stem_in = match variant {
        DenoiserVariant::Asmm => 1,
        DenoiserVariant::SharedEncoder => 2,
    };
    init_conv3d(&mut store, &mut rng, "enc_x.stem", stem_in, c[0], 3);
    let mut prev = c[0];
    for (i, &ci) in c.iter().enumerate() {
        init_res_block(&mut store, &mut rng, &format!("enc_x.block{i}"), prev, ci, cfg.time_embed_dim);
        prev = ci;
    }
    if variant == DenoiserVariant::Asmm {
        init_conv3d(&mut store, &mut rng, "enc_g.stem", 1, c[0], 3);
        let mut prev = c[0];
        for (i, &ci) in c.iter().enumerate() {
            init_res_block(&mut store, &mut rng, &format!("enc_g.block{i}"), prev, ci, cfg.time_embed_dim);
            prev = ci;
        }
    }

    init_res_block(&mut store, &mut rng, "mid.block", c[3], c[3], cfg.time_embed_dim);
    init_cross_attention(&mut store, &mut rng, "mid.attn", c[3], cfg.age_embed_dim, AGE_TOKENS);

    let skips_per_level = match variant {
        DenoiserVariant::Asmm => 2,
        DenoiserVariant::SharedEncoder => 1,
    };
    for i in (0..4).rev() {
        let up_in = c[(i + 1).min(3)];
        init_tconv3d(&mut store, &mut rng, &format!("dec.up{i}"), up_in, c[i], false);
        init_res_block(
            &mut store,
            &mut rng,
            &format!("dec.block{i}"),
            c[i] * (1 + skips_per_level),
            c[i],
            cfg.time_embed_dim,
        );
    }

    init_group_norm(&mut store, "out.norm", c[0]);
    init_conv3d_zero(&mut store, "out.conv", c[0], 1, 3);
    Ok(store)
}

/// Replaces the zero-initialized output convolution with random weights.
/// Useful for probing conditioning paths on an untrained network, whose
/// output would otherwise be identically zero.
pub fn randomize_output_conv(params: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if let Some(w) = params.get_mut("out.conv.weight") {
        let shape = w.shape().to_vec();
        let fan_in: usize = shape[1..].iter().product();
        *w = crate::nn::params::fan_in_uniform(&mut rng, &shape, fan_in);
    }
}

struct EncoderOut {
    bottleneck: NodeId,
    skips: Vec<NodeId>,
}

fn run_encoder(g: &mut Graph, bind: &Binding, prefix: &str, input: NodeId, temb: NodeId) -> EncoderOut {
    let mut h = apply_conv3d(g, bind, &format!("{prefix}.stem"), input);
    let mut skips = Vec::with_capacity(4);
    for i in 0..4 {
        h = apply_res_block(g, bind, &format!("{prefix}.block{i}"), h, temb);
        skips.push(h);
        h = g.mean_pool2(h);
    }
    EncoderOut { bottleneck: h, skips }
}

/// Appends the whole denoiser to the graph and returns the predicted noise
/// node. `x_t` and `guide` must be `[1, X, Y, Z]` leaves already on the
/// graph.
pub fn build_denoiser(
    g: &mut Graph,
    bind: &Binding,
    cfg: &AsmmConfig,
    variant: DenoiserVariant,
    x_t: NodeId,
    guide: NodeId,
    t: usize,
    age_months: f64,
) -> Result<NodeId> {
    let temb_base = leaf_row(g, &embed_time_base(t, cfg.time_embed_dim));
    let temb = apply_mlp(g, bind, "time_mlp", temb_base);
    let aemb_base = leaf_row(g, &embed_age_base(age_months, cfg.age_embed_dim)?);
    let aemb = apply_mlp(g, bind, "age_mlp", aemb_base);

    let (enc_x, enc_g) = match variant {
        DenoiserVariant::Asmm => {
            let ex = run_encoder(g, bind, "enc_x", x_t, temb);
            let eg = run_encoder(g, bind, "enc_g", guide, temb);
            (ex, Some(eg))
        }
        DenoiserVariant::SharedEncoder => {
            let stacked = g.concat_channels(&[x_t, guide]);
            let ex = run_encoder(g, bind, "enc_x", stacked, temb);
            (ex, None)
        }
    };

    let mut h = apply_res_block(g, bind, "mid.block", enc_x.bottleneck, temb);
    h = apply_cross_attention(g, bind, "mid.attn", h, aemb, cfg.attention_heads, AGE_TOKENS);

    for i in (0..4).rev() {
        h = apply_tconv3d(g, bind, &format!("dec.up{i}"), h);
        let skip_shape = g.shape(enc_x.skips[i]).to_vec();
        h = g.crop3(h, [skip_shape[1], skip_shape[2], skip_shape[3]]);
        let mut parts = vec![h, enc_x.skips[i]];
        if let Some(eg) = &enc_g {
            parts.push(eg.skips[i]);
        }
        h = g.concat_channels(&parts);
        h = apply_res_block(g, bind, &format!("dec.block{i}"), h, temb);
    }

    let h = apply_group_norm(g, bind, "out.norm", h);
    let h = g.silu(h);
    Ok(apply_conv3d(g, bind, "out.conv", h))
}

fn check_volume_tensor(name: &str, t: &Tensor, dims: (usize, usize, usize)) -> Result<()> {
    let want = [1, dims.0, dims.1, dims.2];
    if t.shape() != want {
        return Err(Error::ShapeMismatch(format!(
            "{name}: expected {want:?}, got {:?}",
            t.shape()
        )));
    }
    if t.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence(format!("{name} contains non-finite values")));
    }
    Ok(())
}

/// One forward pass on tensors; the lower-level sibling of
/// [`denoise_forward`].
pub fn forward_eps(
    params: &ParamStore,
    cfg: &AsmmConfig,
    variant: DenoiserVariant,
    x_t: &Tensor,
    t: usize,
    guide: &Tensor,
    age_months: f64,
) -> Result<Tensor> {
    cfg.validate()?;
    check_volume_tensor("x_t", x_t, cfg.in_dims)?;
    check_volume_tensor("guide", guide, cfg.in_dims)?;
    if !params.all_finite() {
        return Err(Error::Divergence("denoiser weights contain non-finite values".into()));
    }
    let mut g = Graph::new();
    let bind = params.bind(&mut g, false);
    let x_id = g.leaf(x_t.clone(), false);
    let g_id = g.leaf(guide.clone(), false);
    let eps = build_denoiser(&mut g, &bind, cfg, variant, x_id, g_id, t, age_months)?;
    Ok(g.value(eps).clone())
}

/// Predicts the noise for a noisy volume under the given guidance bundle.
pub fn denoise_forward(
    params: &ParamStore,
    cfg: &AsmmConfig,
    variant: DenoiserVariant,
    x_t: &Tensor,
    t: usize,
    guidance: &GuidanceBundle,
) -> Result<Tensor> {
    if guidance.guide_volume.dims() != cfg.in_dims {
        return Err(Error::ShapeMismatch(format!(
            "guidance volume dims {:?} do not match model in_dims {:?}",
            guidance.guide_volume.dims(),
            cfg.in_dims
        )));
    }
    let guide = volume_to_tensor(&guidance.guide_volume);
    forward_eps(params, cfg, variant, x_t, t, &guide, guidance.target_age_months)
}

/// Noise predictor abstraction used by the samplers; lets tests substitute
/// an analytic oracle for the network.
pub trait GuidedEpsModel: Sync {
    fn predict_eps(&self, x_t: &Tensor, t: usize, guide: &Tensor, age_months: f64) -> Result<Tensor>;
}

/// The trained network as a noise predictor.
pub struct NetGuidedModel<'a> {
    pub params: &'a ParamStore,
    pub cfg: &'a AsmmConfig,
    pub variant: DenoiserVariant,
}

impl GuidedEpsModel for NetGuidedModel<'_> {
    fn predict_eps(&self, x_t: &Tensor, t: usize, guide: &Tensor, age_months: f64) -> Result<Tensor> {
        forward_eps(self.params, self.cfg, self.variant, x_t, t, guide, age_months)
    }
}

/// Analytic oracle that knows the clean volume: the exact noise consistent
/// with `x_t = sqrt(ab) x0 + sqrt(1-ab) eps`.
pub struct OracleGuidedModel {
    pub x0: Tensor,
    pub sched: NoiseSchedule,
}

impl GuidedEpsModel for OracleGuidedModel {
    fn predict_eps(&self, x_t: &Tensor, t: usize, _guide: &Tensor, _age: f64) -> Result<Tensor> {
        let ab = self.sched.alpha_bar(t);
        Ok((x_t - &(&self.x0 * ab.sqrt())) / (1.0 - ab).sqrt())
    }
}

/// Saves a generate-stage checkpoint: architecture config, the training
/// noise schedule, the weight manifest, and the f32 payload.
pub fn save_denoiser(
    path: &std::path::Path,
    cfg: &AsmmConfig,
    variant: DenoiserVariant,
    schedule: &crate::diffusion::ScheduleSpec,
    params: &ParamStore,
) -> Result<()> {
    let config = serde_json::json!({ "arch": cfg, "schedule": schedule });
    save_checkpoint(path, variant.kind_str(), config, params)
}

/// Loads and validates a generate-stage checkpoint.
pub fn load_denoiser(
    path: &std::path::Path,
) -> Result<(AsmmConfig, DenoiserVariant, crate::diffusion::ScheduleSpec, ParamStore)> {
    let (kind, config, params) = load_checkpoint(path)?;
    let variant = match kind.as_str() {
        "generate/asmm" => DenoiserVariant::Asmm,
        "generate/shared_encoder" => DenoiserVariant::SharedEncoder,
        other => {
            return Err(Error::Checkpoint(format!(
                "checkpoint kind {other:?} is not a generate-stage denoiser"
            )))
        }
    };
    let cfg: AsmmConfig = serde_json::from_value(config["arch"].clone())
        .map_err(|e| Error::Checkpoint(format!("bad denoiser config: {e}")))?;
    let schedule: crate::diffusion::ScheduleSpec = serde_json::from_value(config["schedule"].clone())
        .map_err(|e| Error::Checkpoint(format!("bad schedule spec: {e}")))?;
    let expected = init_denoiser_params(&cfg, variant, 0)?.manifest();
    verify_manifest(&params.manifest(), &expected)?;
    Ok((cfg, variant, schedule, params))
}

/// One item of a gradient-check batch: everything needed to rebuild the
/// training loss deterministically.
pub struct GradCheckItem {
    pub x0: Tensor,
    pub guide: Tensor,
    pub age_months: f64,
    pub t: usize,
    pub eps: Tensor,
}

pub(crate) fn batch_loss_graph(
    g: &mut Graph,
    bind: &Binding,
    cfg: &AsmmConfig,
    variant: DenoiserVariant,
    sched: &NoiseSchedule,
    batch: &[GradCheckItem],
) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for item in batch {
        let x_t = q_sample(&item.x0, item.t, &item.eps, sched)?;
        let x_id = g.leaf(x_t, false);
        let g_id = g.leaf(item.guide.clone(), false);
        let eps_hat = build_denoiser(g, bind, cfg, variant, x_id, g_id, item.t, item.age_months)?;
        let eps_id = g.leaf(item.eps.clone(), false);
        let l = g.mse_loss(eps_hat, eps_id);
        acc = Some(match acc {
            None => l,
            Some(prev) => g.add(prev, l),
        });
    }
    let total = acc.ok_or_else(|| Error::InvalidConfig("gradient check needs a non-empty batch".into()))?;
    Ok(g.scale(total, 1.0 / batch.len() as f64))
}

/// Compares analytic gradients of the training loss against central finite
/// differences (h = 1e-3, f64 accumulation) on `probe_count` randomly
/// chosen weights. Returns the maximum relative error observed.
pub fn loss_gradient_check(
    params: &ParamStore,
    cfg: &AsmmConfig,
    variant: DenoiserVariant,
    sched: &NoiseSchedule,
    batch: &[GradCheckItem],
    probe_count: usize,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    let loss_of = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let bind = p.bind(&mut g, false);
        let loss = batch_loss_graph(&mut g, &bind, cfg, variant, sched, batch)?;
        Ok(g.value(loss)[[0]])
    };

    let mut g = Graph::new();
    let bind = params.bind(&mut g, true);
    let loss = batch_loss_graph(&mut g, &bind, cfg, variant, sched, batch)?;
    let grads = g.backward(loss)?;

    // Uniform probes over all scalar weights.
    let names: Vec<(String, usize)> =
        params.iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let total: usize = names.iter().map(|(_, n)| n).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-3;
    let mut max_rel: f64 = 0.0;
    for _ in 0..probe_count {
        let mut flat = rand::Rng::random_range(&mut rng, 0..total);
        let (name, idx) = names
            .iter()
            .find_map(|(n, len)| {
                if flat < *len {
                    Some((n.clone(), flat))
                } else {
                    flat -= len;
                    None
                }
            })
            .expect("probe index in range");
        let analytic = grads
            .get(bind.id(&name))
            .map(|t| t.as_slice().expect("contiguous")[idx])
            .unwrap_or(0.0);
        let mut plus = params.clone();
        plus.get_mut(&name).unwrap().as_slice_mut().unwrap()[idx] += h;
        let mut minus = params.clone();
        minus.get_mut(&name).unwrap().as_slice_mut().unwrap()[idx] -= h;
        let fd = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * h);
        let denom = analytic.abs().max(fd.abs());
        if denom < 1e-10 {
            continue; // Both sides agree the derivative vanishes.
        }
        let rel = (analytic - fd).abs() / denom;
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Builds a deterministic random gradient-check batch for a tiny
/// configuration.
pub fn make_gradcheck_batch(
    cfg: &AsmmConfig,
    sched: &NoiseSchedule,
    batch_size: usize,
    seed: u64,
) -> Vec<GradCheckItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nx, ny, nz) = cfg.in_dims;
    (0..batch_size)
        .map(|i| {
            let x0 = randn_tensor(&[1, nx, ny, nz], &mut rng);
            let guide = randn_tensor(&[1, nx, ny, nz], &mut rng);
            let eps = randn_tensor(&[1, nx, ny, nz], &mut rng);
            let t = 1 + (i * 37) % sched.steps();
            GradCheckItem { x0, guide, age_months: 3.0 + 2.5 * i as f64, t, eps }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_linear_schedule;

    fn tiny_cfg() -> AsmmConfig {
        AsmmConfig {
            in_dims: (8, 8, 8),
            base_channels: 4,
            channel_multipliers: [1, 2, 4, 4],
            age_embed_dim: 8,
            time_embed_dim: 8,
            attention_heads: 4,
        }
    }

    fn small_inputs(cfg: &AsmmConfig, seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nx, ny, nz) = cfg.in_dims;
        (
            randn_tensor(&[1, nx, ny, nz], &mut rng),
            randn_tensor(&[1, nx, ny, nz], &mut rng),
        )
    }

    #[test]
    fn config_validation() {
        assert!(AsmmConfig::default().validate().is_ok());
        let mut bad = tiny_cfg();
        bad.attention_heads = 5;
        assert!(bad.validate().is_err());
        let mut bad2 = tiny_cfg();
        bad2.time_embed_dim = 7;
        assert!(bad2.validate().is_err());
    }

    #[test]
    fn embed_time_matches_sinusoid_oracle() {
        let dim = 16;
        for t in [0usize, 1, 57, 4000] {
            let e = embed_time_base(t, dim);
            for i in 0..dim / 2 {
                let freq = 10000.0f64.powf(-((2 * i) as f64) / dim as f64);
                assert!((e[2 * i] - ((t as f64) * freq).sin()).abs() < 1e-6);
                assert!((e[2 * i + 1] - ((t as f64) * freq).cos()).abs() < 1e-6);
            }
        }
        // t = 0: even slots 0, odd slots 1.
        let e0 = embed_time_base(0, dim);
        assert!(e0.iter().step_by(2).all(|&v| v == 0.0));
        assert!(e0.iter().skip(1).step_by(2).all(|&v| v == 1.0));
        // Distinct steps embed distinctly.
        let a = embed_time_base(10, dim);
        let b = embed_time_base(11, dim);
        let d: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!(d > 0.0);
    }

    #[test]
    fn embed_age_deterministic_and_distinct() {
        let cfg = tiny_cfg();
        let params = init_denoiser_params(&cfg, DenoiserVariant::Asmm, 3).unwrap();
        let a1 = embed_age(&params, &cfg, 3.0).unwrap();
        let a2 = embed_age(&params, &cfg, 3.0).unwrap();
        assert_eq!(a1, a2);
        let b = embed_age(&params, &cfg, 24.0).unwrap();
        let d: f64 = a1.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!(d > 0.0);
        assert!(embed_age_base(-1.0, 8).is_err());
        // Pre-MLP sinusoid against the brute-force formula.
        let base = embed_age_base(7.5, 8).unwrap();
        for i in 0..4 {
            let freq = 10000.0f64.powf(-((2 * i) as f64) / 8.0);
            assert!((base[2 * i] - (7.5 * freq).sin()).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_shape_and_purity() {
        let cfg = tiny_cfg();
        let params = init_denoiser_params(&cfg, DenoiserVariant::Asmm, 1).unwrap();
        let (x, gd) = small_inputs(&cfg, 2);
        let y1 = forward_eps(&params, &cfg, DenoiserVariant::Asmm, &x, 5, &gd, 6.0).unwrap();
        assert_eq!(y1.shape(), x.shape());
        let y2 = forward_eps(&params, &cfg, DenoiserVariant::Asmm, &x, 5, &gd, 6.0).unwrap();
        assert_eq!(y1, y2, "repeated forward must be bit-stable");
        assert!(y1.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_shape_on_uneven_dims() {
        // Dims not divisible by 16 exercise clipped pooling + crop.
        let cfg = AsmmConfig {
            in_dims: (10, 12, 10),
            base_channels: 4,
            channel_multipliers: [1, 1, 2, 2],
            age_embed_dim: 8,
            time_embed_dim: 8,
            attention_heads: 2,
        };
        let mut params = init_denoiser_params(&cfg, DenoiserVariant::Asmm, 1).unwrap();
        randomize_output_conv(&mut params, 9);
        let (x, gd) = small_inputs(&cfg, 3);
        let y = forward_eps(&params, &cfg, DenoiserVariant::Asmm, &x, 3, &gd, 12.0).unwrap();
        assert_eq!(y.shape(), &[1, 10, 12, 10]);
    }

    #[test]
    fn zero_init_output_conv_predicts_zero() {
        let cfg = tiny_cfg();
        let params = init_denoiser_params(&cfg, DenoiserVariant::Asmm, 1).unwrap();
        let (x, gd) = small_inputs(&cfg, 4);
        let y = forward_eps(&params, &cfg, DenoiserVariant::Asmm, &x, 1, &gd, 3.0).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoders_are_genuinely_independent() {
        let cfg = tiny_cfg();
        let mut params = init_denoiser_params(&cfg, DenoiserVariant::Asmm, 5).unwrap();
        randomize_output_conv(&mut params, 6);
        let (x, gd) = small_inputs(&cfg, 7);
        let normal = forward_eps(&params, &cfg, DenoiserVariant::Asmm, &x, 4, &gd, 9.0).unwrap();
        let swapped = forward_eps(&params, &cfg, DenoiserVariant::Asmm, &gd, 4, &x, 9.0).unwrap();
        let d: f64 = normal.iter().zip(swapped.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!(d > 0.0, "swapping encoder inputs must change the output");
    }

    #[test]
    fn conditioning_paths_are_live() {
        let cfg = tiny_cfg();
        let mut params = init_denoiser_params(&cfg, DenoiserVariant::Asmm, 8).unwrap();
        randomize_output_conv(&mut params, 9);
        let (x, gd) = small_inputs(&cfg, 10);
        let base = forward_eps(&params, &cfg, DenoiserVariant::Asmm, &x, 4, &gd, 6.0).unwrap();

        // Age path.
        let other_age = forward_eps(&params, &cfg, DenoiserVariant::Asmm, &x, 4, &gd, 24.0).unwrap();
        let d_age: f64 = base.iter().zip(other_age.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!(d_age > 0.0, "age path is dead");

        // Guidance path.
        let gd2 = &gd * 0.5;
        let other_guide = forward_eps(&params, &cfg, DenoiserVariant::Asmm, &x, 4, &gd2, 6.0).unwrap();
        let d_guide: f64 = base.iter().zip(other_guide.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!(d_guide > 0.0, "guidance path is dead");

        // Timestep path.
        let other_t = forward_eps(&params, &cfg, DenoiserVariant::Asmm, &x, 5, &gd, 6.0).unwrap();
        let d_t: f64 = base.iter().zip(other_t.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!(d_t > 0.0, "timestep path is dead");
    }

    #[test]
    fn shared_encoder_variant_runs_and_differs() {
        let cfg = tiny_cfg();
        let mut params = init_denoiser_params(&cfg, DenoiserVariant::SharedEncoder, 11).unwrap();
        randomize_output_conv(&mut params, 12);
        let (x, gd) = small_inputs(&cfg, 13);
        let y = forward_eps(&params, &cfg, DenoiserVariant::SharedEncoder, &x, 2, &gd, 4.0).unwrap();
        assert_eq!(y.shape(), x.shape());
        // Guidance still matters through the stacked input channel.
        let gd2 = &gd * -1.0;
        let y2 = forward_eps(&params, &cfg, DenoiserVariant::SharedEncoder, &x, 2, &gd2, 4.0).unwrap();
        let d: f64 = y.iter().zip(y2.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!(d > 0.0);
    }

    #[test]
    fn checkpoint_roundtrip_and_kind_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.ckpt");
        let cfg = tiny_cfg();
        let params = init_denoiser_params(&cfg, DenoiserVariant::Asmm, 14).unwrap();
        let spec = crate::diffusion::ScheduleSpec { beta_start: 1e-4, beta_end: 5e-3, steps: 4000 };
        save_denoiser(&path, &cfg, DenoiserVariant::Asmm, &spec, &params).unwrap();
        let (cfg2, variant, spec2, loaded) = load_denoiser(&path).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(cfg2, cfg);
        assert_eq!(variant, DenoiserVariant::Asmm);
        assert_eq!(loaded.manifest(), params.manifest());

        // A checkpoint whose payload disagrees with its config is refused.
        let other_cfg = AsmmConfig { base_channels: 8, ..tiny_cfg() };
        crate::nn::params::save_checkpoint(
            &dir.path().join("bad.ckpt"),
            DenoiserVariant::Asmm.kind_str(),
            serde_json::json!({"arch": &other_cfg, "schedule": {"beta_start": 1e-4, "beta_end": 5e-3, "steps": 4000}}),
            &params,
        )
        .unwrap();
        assert!(load_denoiser(&dir.path().join("bad.ckpt")).is_err());
    }

    #[test]
    fn gradient_check_zero_network_zero_inputs() {
        let cfg = tiny_cfg();
        let sched = make_linear_schedule(1e-4, 2e-2, 10).unwrap();
        let mut params = init_denoiser_params(&cfg, DenoiserVariant::Asmm, 15).unwrap();
        // Zero every weight.
        let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        for n in names {
            let t = params.get_mut(&n).unwrap();
            t.fill(0.0);
        }
        let (nx, ny, nz) = cfg.in_dims;
        let batch = vec![GradCheckItem {
            x0: Tensor::zeros(IxDyn(&[1, nx, ny, nz])),
            guide: Tensor::zeros(IxDyn(&[1, nx, ny, nz])),
            age_months: 6.0,
            t: 5,
            eps: Tensor::zeros(IxDyn(&[1, nx, ny, nz])),
        }];
        let mut g = Graph::new();
        let bind = params.bind(&mut g, true);
        let loss = batch_loss_graph(&mut g, &bind, &cfg, DenoiserVariant::Asmm, &sched, &batch).unwrap();
        assert_eq!(g.value(loss)[[0]], 0.0);
        let grads = g.backward(loss).unwrap();
        for (name, _) in params.iter() {
            if let Some(gt) = grads.get(bind.id(name)) {
                assert!(gt.iter().all(|&v| v == 0.0), "{name} gradient not zero");
            }
        }
    }

    #[test]
    fn gradient_check_random_tiny_network() {
        let cfg = tiny_cfg();
        let sched = make_linear_schedule(1e-4, 2e-2, 100).unwrap();
        let mut params = init_denoiser_params(&cfg, DenoiserVariant::Asmm, 16).unwrap();
        randomize_output_conv(&mut params, 17);
        let batch = make_gradcheck_batch(&cfg, &sched, 2, 18);
        let max_rel =
            loss_gradient_check(&params, &cfg, DenoiserVariant::Asmm, &sched, &batch, 32, 19).unwrap();
        assert!(max_rel < 1e-3, "max relative gradient error {max_rel}");
    }

    #[test]
    fn doubling_loss_scale_doubles_gradients() {
        let cfg = tiny_cfg();
        let sched = make_linear_schedule(1e-4, 2e-2, 50).unwrap();
        let mut params = init_denoiser_params(&cfg, DenoiserVariant::Asmm, 20).unwrap();
        randomize_output_conv(&mut params, 21);
        let batch = make_gradcheck_batch(&cfg, &sched, 1, 22);

        let grads_at_scale = |k: f64| {
            let mut g = Graph::new();
            let bind = params.bind(&mut g, true);
            let loss =
                batch_loss_graph(&mut g, &bind, &cfg, DenoiserVariant::Asmm, &sched, &batch).unwrap();
            let scaled = g.scale(loss, k);
            let grads = g.backward(scaled).unwrap();
            let mut out = Vec::new();
            for (name, _) in params.iter() {
                if let Some(gt) = grads.get(bind.id(name)) {
                    out.extend(gt.iter().cloned());
                }
            }
            out
        };
        let g1 = grads_at_scale(1.0);
        let g2 = grads_at_scale(2.0);
        assert_eq!(g1.len(), g2.len());
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}
