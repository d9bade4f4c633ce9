//! Named parameter store, Adam updates with global-norm clipping, and the
//! binary checkpoint container shared by both denoising networks.
//!
//! Checkpoint layout: magic `"VCKPT001"`, `u32` little-endian header
//! length, a JSON header `{kind, config, manifest}` where the manifest is
//! an ordered `[name, shape]` list, then the f32 little-endian payloads
//! concatenated in manifest order. Loading refuses any manifest mismatch.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeId, Tensor};

const CKPT_MAGIC: &[u8; 8] = b"VCKPT001";

/// Ordered name -> tensor map holding one network's weights.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(
            self.map.insert(name.clone(), value).is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    /// Ordered (name, shape) list identifying this store's layout.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.map.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Registers every tensor as a graph leaf; `trainable` controls whether
    /// gradients are tracked.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Binding {
        let ids = self
            .map
            .iter()
            .map(|(name, value)| (name.clone(), g.leaf(value.clone(), trainable)))
            .collect();
        Binding { ids }
    }
}

/// Name -> graph node map for one bound forward pass.
pub struct Binding {
    ids: BTreeMap<String, NodeId>,
}

impl Binding {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}

/// Fan-in-scaled uniform init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..bound))
}

pub fn zeros(shape: &[usize]) -> Tensor {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> Tensor {
    ArrayD::ones(IxDyn(shape))
}

/// Adam with optional global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_global_norm: Option<f64>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_global_norm: Some(1.0),
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    /// Applies one update. Gradients missing for a parameter are treated as
    /// zero. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> f64 {
        self.t += 1;
        let mut sq = 0.0;
        for g in grads.values() {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
        let norm = sq.sqrt();
        let clip_scale = match self.clip_global_norm {
            Some(max) if norm > max && norm > 0.0 => max / norm,
            _ => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let p = match params.get_mut(name) {
                Some(p) => p,
                None => continue,
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let pf = p.as_slice_mut().expect("contiguous");
            let gf = grad.as_slice().expect("contiguous");
            let mf = m.as_slice_mut().expect("contiguous");
            let vf = v.as_slice_mut().expect("contiguous");
            for i in 0..pf.len() {
                let gi = gf[i] * clip_scale;
                mf[i] = self.beta1 * mf[i] + (1.0 - self.beta1) * gi;
                vf[i] = self.beta2 * vf[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = mf[i] / bc1;
                let vhat = vf[i] / bc2;
                pf[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
        norm
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    kind: String,
    config: serde_json::Value,
    manifest: Vec<(String, Vec<usize>)>,
}

/// Writes a checkpoint; `kind` tags the network family and `config` its
/// serialized architecture settings.
pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    config: serde_json::Value,
    params: &ParamStore,
) -> Result<()> {
    let header = CheckpointHeader {
        version: 1,
        kind: kind.to_string(),
        config,
        manifest: params.manifest(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut f = fs::File::create(path)?;
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&(header_json.len() as u32).to_le_bytes())?;
    f.write_all(&header_json)?;
    let mut payload = Vec::with_capacity(params.n_scalars() * 4);
    for (_, tensor) in params.iter() {
        for &v in tensor.as_slice().expect("contiguous") {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    f.write_all(&payload)?;
    Ok(())
}

/// Loads a checkpoint, returning its kind, config JSON and weights. The
/// payload length must match the manifest and every value must be finite.
pub fn load_checkpoint(path: &Path) -> Result<(String, serde_json::Value, ParamStore)> {
    let mut f = fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[0..8] != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + hlen {
        return Err(Error::Checkpoint(format!("{}: truncated header", path.display())));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + hlen])
        .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
    if header.version != 1 {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            header.version
        )));
    }
    let total: usize = header.manifest.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let payload = &bytes[12 + hlen..];
    if payload.len() != total * 4 {
        return Err(Error::Checkpoint(format!(
            "{}: payload {} bytes, manifest expects {}",
            path.display(),
            payload.len(),
            total * 4
        )));
    }
    let mut params = ParamStore::new();
    let mut offset = 0;
    for (name, shape) in &header.manifest {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let o = (offset + i) * 4;
            let v = f32::from_le_bytes(payload[o..o + 4].try_into().unwrap()) as f64;
            if !v.is_finite() {
                return Err(Error::Checkpoint(format!(
                    "{}: non-finite weight in {name}",
                    path.display()
                )));
            }
            data.push(v);
        }
        offset += n;
        params.insert(name.clone(), ArrayD::from_shape_vec(IxDyn(shape), data).unwrap());
    }
    Ok((header.kind, header.config, params))
}

/// Compares a loaded manifest against the one a config implies.
pub fn verify_manifest(
    loaded: &[(String, Vec<usize>)],
    expected: &[(String, Vec<usize>)],
) -> Result<()> {
    if loaded != expected {
        let detail = loaded
            .iter()
            .zip(expected.iter())
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("first mismatch: got {a:?}, expected {b:?}"))
            .unwrap_or_else(|| format!("lengths {} vs {}", loaded.len(), expected.len()));
        return Err(Error::Checkpoint(format!("manifest mismatch: {detail}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_descends_a_quadratic() {
        // Minimize ||p - c||^2 by feeding Adam the analytic gradient.
        let mut params = ParamStore::new();
        params.insert("p", zeros(&[4]));
        let target = [0.5, -1.0, 2.0, 0.0];
        let mut opt = Adam::new(0.05);
        for _ in 0..500 {
            let p = params.get("p").unwrap();
            let grad: Tensor = ArrayD::from_shape_vec(
                IxDyn(&[4]),
                p.iter().zip(target.iter()).map(|(a, c)| 2.0 * (a - c)).collect(),
            )
            .unwrap();
            let mut grads = BTreeMap::new();
            grads.insert("p".to_string(), grad);
            opt.step(&mut params, &grads);
        }
        let p = params.get("p").unwrap();
        for (a, c) in p.iter().zip(target.iter()) {
            assert!((a - c).abs() < 1e-2, "{a} vs {c}");
        }
    }

    #[test]
    fn clipping_bounds_the_applied_norm() {
        let mut params = ParamStore::new();
        params.insert("p", zeros(&[2]));
        let mut opt = Adam::new(1e-3);
        opt.clip_global_norm = Some(1.0);
        let mut grads = BTreeMap::new();
        grads.insert(
            "p".to_string(),
            ArrayD::from_shape_vec(IxDyn(&[2]), vec![300.0, 400.0]).unwrap(),
        );
        let norm = opt.step(&mut params, &grads);
        assert!((norm - 500.0).abs() < 1e-9);
        // First Adam step magnitude is learning_rate per coordinate at most.
        let p = params.get("p").unwrap();
        assert!(p.iter().all(|v| v.abs() <= 1.1e-3));
    }

    #[test]
    fn checkpoint_roundtrip_and_mismatch_detection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamStore::new();
        params.insert("a.weight", fan_in_uniform(&mut rng, &[3, 2], 2));
        params.insert("a.bias", zeros(&[3]));
        save_checkpoint(&path, "test-net", serde_json::json!({"width": 3}), &params).unwrap();

        let (kind, config, loaded) = load_checkpoint(&path).unwrap();
        assert_eq!(kind, "test-net");
        assert_eq!(config["width"], 3);
        assert_eq!(loaded.manifest(), params.manifest());
        // f32 storage rounds; agreement to f32 precision.
        for (name, t) in params.iter() {
            let l = loaded.get(name).unwrap();
            for (a, b) in t.iter().zip(l.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }

        let other: Vec<(String, Vec<usize>)> = vec![("a.weight".into(), vec![3, 3])];
        assert!(verify_manifest(&loaded.manifest(), &other).is_err());

        std::fs::write(&path, b"VCKPT001garbage").unwrap();
        assert!(load_checkpoint(&path).is_err());
        std::fs::write(&path, b"NOTMAGIC").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
