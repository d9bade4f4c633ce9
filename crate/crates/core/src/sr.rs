//! Refine-stage conditional super-resolution diffusion model: the
//! low-resolution volume is upsampled by a learned stride-2 transposed
//! convolution and concatenated with the noisy high-resolution volume as a
//! second input channel of a single encoder-decoder denoiser.

use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_step, ddim_timesteps, q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeId, Tensor};
use crate::nn::layers::{
    apply_conv3d, apply_group_norm, apply_mlp, apply_res_block, apply_tconv3d, init_conv3d,
    init_conv3d_zero, init_group_norm, init_mlp, init_res_block, init_tconv3d,
};
use crate::nn::params::{load_checkpoint, save_checkpoint, verify_manifest, Binding, ParamStore};
use crate::nn::{randn_tensor, sinusoidal_embedding};
use crate::volume::Volume3D;

/// Architecture settings of the super-resolution denoiser.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SrConfig {
    pub low_dims: (usize, usize, usize),
    pub high_dims: (usize, usize, usize),
    pub base_channels: usize,
    pub channel_multipliers: [usize; 4],
    pub time_embed_dim: usize,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self {
            low_dims: (20, 24, 20),
            high_dims: (40, 48, 40),
            base_channels: 16,
            channel_multipliers: [1, 2, 4, 4],
            time_embed_dim: 32,
        }
    }
}

impl SrConfig {
    pub fn channels(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for (i, m) in self.channel_multipliers.iter().enumerate() {
            c[i] = self.base_channels * m;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let (lx, ly, lz) = self.low_dims;
        let (hx, hy, hz) = self.high_dims;
        if lx < 2 || ly < 2 || lz < 2 {
            return Err(Error::InvalidConfig("low_dims must be at least 2 per axis".into()));
        }
        if (hx, hy, hz) != (2 * lx, 2 * ly, 2 * lz) {
            return Err(Error::InvalidConfig(format!(
                "high_dims must be exactly twice low_dims per axis, got {:?} vs {:?}",
                self.high_dims, self.low_dims
            )));
        }
        if self.base_channels < 2 {
            return Err(Error::InvalidConfig("base_channels must be >= 2".into()));
        }
        if self.channel_multipliers.iter().any(|&m| m == 0) {
            return Err(Error::InvalidConfig("channel multipliers must be positive".into()));
        }
        if self.time_embed_dim < 4 || self.time_embed_dim % 2 != 0 {
            return Err(Error::InvalidConfig("time_embed_dim must be even and >= 4".into()));
        }
        Ok(())
    }
}

/// Initializes the SR weights. The conditioning upsampler starts at a
/// nearest-neighbor kernel; the output convolution starts at zero.
pub fn init_sr_params(cfg: &SrConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let c = cfg.channels();

    init_tconv3d(&mut store, &mut rng, "cond.up", 1, 1, true);
    init_mlp(&mut store, &mut rng, "time_mlp", cfg.time_embed_dim, cfg.time_embed_dim);

    init_conv3d(&mut store, &mut rng, "enc.stem", 2, c[0], 3);
    let mut prev = c[0];
    for (i, &ci) in c.iter().enumerate() {
        init_res_block(&mut store, &mut rng, &format!("enc.block{i}"), prev, ci, cfg.time_embed_dim);
        prev = ci;
    }
    init_res_block(&mut store, &mut rng, "mid.block", c[3], c[3], cfg.time_embed_dim);
    for i in (0..4).rev() {
        let up_in = c[(i + 1).min(3)];
        init_tconv3d(&mut store, &mut rng, &format!("dec.up{i}"), up_in, c[i], false);
        init_res_block(&mut store, &mut rng, &format!("dec.block{i}"), 2 * c[i], c[i], cfg.time_embed_dim);
    }
    init_group_norm(&mut store, "out.norm", c[0]);
    init_conv3d_zero(&mut store, "out.conv", c[0], 1, 3);
    Ok(store)
}

fn check_tensor(name: &str, t: &Tensor, dims: (usize, usize, usize)) -> Result<()> {
    let want = [1, dims.0, dims.1, dims.2];
    if t.shape() != want {
        return Err(Error::ShapeMismatch(format!(
            "{name}: expected {want:?}, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Learned stride-2 transposed-convolution upsampling of the conditioning
/// volume; `[1, low] -> [1, high]`, differentiable in the parameters.
pub fn upsample_cond(params: &ParamStore, cfg: &SrConfig, z: &Tensor) -> Result<Tensor> {
    cfg.validate()?;
    check_tensor("z", z, cfg.low_dims)?;
    let mut g = Graph::new();
    let bind = params.bind(&mut g, false);
    let z_id = g.leaf(z.clone(), false);
    let up = apply_tconv3d(&mut g, &bind, "cond.up", z_id);
    Ok(g.value(up).clone())
}

/// Appends the SR denoiser to the graph: upsample the condition, stack it
/// with the noisy input, run the encoder-decoder.
pub fn build_sr_denoiser(
    g: &mut Graph,
    bind: &Binding,
    cfg: &SrConfig,
    x_t: NodeId,
    z_low: NodeId,
    t: usize,
) -> NodeId {
    let temb_base = g.leaf(
        Tensor::from_shape_vec(
            IxDyn(&[1, cfg.time_embed_dim]),
            sinusoidal_embedding(t as f64, cfg.time_embed_dim),
        )
        .unwrap(),
        false,
    );
    let temb = apply_mlp(g, bind, "time_mlp", temb_base);

    let z_up = apply_tconv3d(g, bind, "cond.up", z_low);
    let stacked = g.concat_channels(&[x_t, z_up]);

    let mut h = apply_conv3d(g, bind, "enc.stem", stacked);
    let mut skips = Vec::with_capacity(4);
    for i in 0..4 {
        h = apply_res_block(g, bind, &format!("enc.block{i}"), h, temb);
        skips.push(h);
        h = g.mean_pool2(h);
    }
    h = apply_res_block(g, bind, "mid.block", h, temb);
    for i in (0..4).rev() {
        h = apply_tconv3d(g, bind, &format!("dec.up{i}"), h);
        let skip_shape = g.shape(skips[i]).to_vec();
        h = g.crop3(h, [skip_shape[1], skip_shape[2], skip_shape[3]]);
        h = g.concat_channels(&[h, skips[i]]);
        h = apply_res_block(g, bind, &format!("dec.block{i}"), h, temb);
    }
    let h = apply_group_norm(g, bind, "out.norm", h);
    let h = g.silu(h);
    apply_conv3d(g, bind, "out.conv", h)
}

/// One SR forward pass: predicts the noise in `x_t` given the low-res
/// conditioning volume.
pub fn sr_denoise_forward(
    params: &ParamStore,
    cfg: &SrConfig,
    x_t: &Tensor,
    t: usize,
    z_low: &Tensor,
) -> Result<Tensor> {
    cfg.validate()?;
    check_tensor("x_t", x_t, cfg.high_dims)?;
    check_tensor("z_low", z_low, cfg.low_dims)?;
    let mut g = Graph::new();
    let bind = params.bind(&mut g, false);
    let x_id = g.leaf(x_t.clone(), false);
    let z_id = g.leaf(z_low.clone(), false);
    let eps = build_sr_denoiser(&mut g, &bind, cfg, x_id, z_id, t);
    Ok(g.value(eps).clone())
}

/// Noise predictor abstraction for the SR sampler.
pub trait CondEpsModel: Sync {
    fn high_dims(&self) -> (usize, usize, usize);
    fn predict_eps(&self, x_t: &Tensor, t: usize, z_low: &Tensor) -> Result<Tensor>;
}

pub struct NetSrModel<'a> {
    pub params: &'a ParamStore,
    pub cfg: &'a SrConfig,
}

impl CondEpsModel for NetSrModel<'_> {
    fn high_dims(&self) -> (usize, usize, usize) {
        self.cfg.high_dims
    }

    fn predict_eps(&self, x_t: &Tensor, t: usize, z_low: &Tensor) -> Result<Tensor> {
        sr_denoise_forward(self.params, self.cfg, x_t, t, z_low)
    }
}

/// Analytic oracle that knows the clean high-resolution volume.
pub struct OracleSrModel {
    pub x0: Tensor,
    pub sched: NoiseSchedule,
}

impl CondEpsModel for OracleSrModel {
    fn high_dims(&self) -> (usize, usize, usize) {
        (self.x0.shape()[1], self.x0.shape()[2], self.x0.shape()[3])
    }

    fn predict_eps(&self, x_t: &Tensor, t: usize, _z: &Tensor) -> Result<Tensor> {
        let ab = self.sched.alpha_bar(t);
        Ok((x_t - &(&self.x0 * ab.sqrt())) / (1.0 - ab).sqrt())
    }
}

/// Runs the deterministic (eta = 0) DDIM chain from pure Gaussian noise at
/// the high resolution, conditioning every step on `z0`.
pub fn sr_sample_with_model(
    model: &dyn CondEpsModel,
    z0: &Tensor,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let (hx, hy, hz) = model.high_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = randn_tensor(&[1, hx, hy, hz], &mut rng);
    let ts = ddim_timesteps(sched.steps(), steps)?;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
        let eps_hat = model.predict_eps(&x, t, z0)?;
        x = ddim_step(&x, &eps_hat, t, t_prev, sched, 0.0, None)?;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("SR sampler produced non-finite values".into()));
    }
    Ok(x)
}

/// Network-backed [`sr_sample_with_model`].
pub fn sr_sample(
    params: &ParamStore,
    cfg: &SrConfig,
    z0: &Tensor,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    check_tensor("z0", z0, cfg.low_dims)?;
    let model = NetSrModel { params, cfg };
    sr_sample_with_model(&model, z0, sched, steps, seed)
}

/// Training item for the SR stage.
pub struct SrTrainItem {
    pub x0_high: Tensor,
    pub z_low: Tensor,
    pub t: usize,
    pub eps: Tensor,
}

/// Mean batch loss across SR items, appended to the graph.
pub(crate) fn sr_batch_loss_graph(
    g: &mut Graph,
    bind: &Binding,
    cfg: &SrConfig,
    sched: &NoiseSchedule,
    batch: &[SrTrainItem],
) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for item in batch {
        let x_t = q_sample(&item.x0_high, item.t, &item.eps, sched)?;
        let x_id = g.leaf(x_t, false);
        let z_id = g.leaf(item.z_low.clone(), false);
        let eps_hat = build_sr_denoiser(g, bind, cfg, x_id, z_id, item.t);
        let eps_id = g.leaf(item.eps.clone(), false);
        let l = g.mse_loss(eps_hat, eps_id);
        acc = Some(match acc {
            None => l,
            Some(prev) => g.add(prev, l),
        });
    }
    let total = acc.ok_or_else(|| Error::InvalidConfig("empty SR batch".into()))?;
    Ok(g.scale(total, 1.0 / batch.len() as f64))
}

/// Trilinear 2x upsampling, the evaluation baseline the SR stage has to
/// beat. Never used in the conditioning path.
pub fn trilinear_upsample2(v: &Volume3D) -> Volume3D {
    let (nx, ny, nz) = v.dims();
    let (ox, oy, oz) = (2 * nx, 2 * ny, 2 * nz);
    let sample = |fx: f64, fy: f64, fz: f64| -> f64 {
        // Clamp to the valid voxel-center range, then interpolate.
        let cx = fx.clamp(0.0, (nx - 1) as f64);
        let cy = fy.clamp(0.0, (ny - 1) as f64);
        let cz = fz.clamp(0.0, (nz - 1) as f64);
        let (x0, y0, z0) = (cx.floor() as usize, cy.floor() as usize, cz.floor() as usize);
        let (x1, y1, z1) = ((x0 + 1).min(nx - 1), (y0 + 1).min(ny - 1), (z0 + 1).min(nz - 1));
        let (tx, ty, tz) = (cx - x0 as f64, cy - y0 as f64, cz - z0 as f64);
        let mut acc = 0.0;
        for (xi, wx) in [(x0, 1.0 - tx), (x1, tx)] {
            for (yi, wy) in [(y0, 1.0 - ty), (y1, ty)] {
                for (zi, wz) in [(z0, 1.0 - tz), (z1, tz)] {
                    acc += wx * wy * wz * v.at(xi, yi, zi) as f64;
                }
            }
        }
        acc
    };
    let mut out = vec![0.0f32; ox * oy * oz];
    for iz in 0..oz {
        for iy in 0..oy {
            for ix in 0..ox {
                // Voxel-center alignment between the two grids.
                let fx = (ix as f64 + 0.5) / 2.0 - 0.5;
                let fy = (iy as f64 + 0.5) / 2.0 - 0.5;
                let fz = (iz as f64 + 0.5) / 2.0 - 0.5;
                out[ix + ox * (iy + oy * iz)] = sample(fx, fy, fz) as f32;
            }
        }
    }
    let (sx, sy, sz) = v.spacing();
    Volume3D::new((ox, oy, oz), (sx / 2.0, sy / 2.0, sz / 2.0), out).unwrap()
}

pub const SR_KIND: &str = "sr/cond";

pub fn save_sr(
    path: &std::path::Path,
    cfg: &SrConfig,
    schedule: &crate::diffusion::ScheduleSpec,
    params: &ParamStore,
) -> Result<()> {
    let config = serde_json::json!({ "arch": cfg, "schedule": schedule });
    save_checkpoint(path, SR_KIND, config, params)
}

pub fn load_sr(
    path: &std::path::Path,
) -> Result<(SrConfig, crate::diffusion::ScheduleSpec, ParamStore)> {
    let (kind, config, params) = load_checkpoint(path)?;
    if kind != SR_KIND {
        return Err(Error::Checkpoint(format!(
            "checkpoint kind {kind:?} is not an SR denoiser"
        )));
    }
    let cfg: SrConfig = serde_json::from_value(config["arch"].clone())
        .map_err(|e| Error::Checkpoint(format!("bad SR config: {e}")))?;
    let schedule: crate::diffusion::ScheduleSpec = serde_json::from_value(config["schedule"].clone())
        .map_err(|e| Error::Checkpoint(format!("bad schedule spec: {e}")))?;
    let expected = init_sr_params(&cfg, 0)?.manifest();
    verify_manifest(&params.manifest(), &expected)?;
    Ok((cfg, schedule, params))
}
