//! Minimal reverse-mode autodiff over f64 tensors, plus the parameter
//! store, Adam, checkpoint container, and the layer builders shared by the
//! two denoising networks.

pub mod graph;
pub mod layers;
pub mod params;

pub use graph::{Graph, NodeId, Tensor};
pub use params::{Adam, ParamStore};

use rand::Rng;
use rand_distr::StandardNormal;

/// Standard-normal tensor drawn from the given generator.
pub fn randn_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Interleaved sinusoidal position encoding: even slots `sin(p * w_i)`, odd
/// slots `cos(p * w_i)` with `w_i = 10000^(-2i/dim)`. `dim` must be even.
pub fn sinusoidal_embedding(position: f64, dim: usize) -> Vec<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even and >= 2");
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000.0f64.ln()) * (2 * i) as f64 / dim as f64).exp();
        out[2 * i] = (position * freq).sin();
        out[2 * i + 1] = (position * freq).cos();
    }
    out
}
