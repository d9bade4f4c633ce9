//! Layer builders shared by the denoising networks. Every layer pairs an
//! `init_*` function that registers parameters with a [`ParamStore`] and an
//! `apply_*` function that appends the layer's ops to a [`Graph`] for one
//! bound forward pass.

use rand::Rng;

use crate::nn::graph::{Graph, NodeId};
use crate::nn::params::{fan_in_uniform, ones, zeros, Binding, ParamStore};

/// Group count for normalization: the largest divisor of `c` up to 8 that
/// keeps at least four channels per group. Small groups are bad twice
/// over: single-channel groups are shift-invariant per channel and would
/// swallow the additive step-embedding bias, and few-sample groups at the
/// coarsest resolutions make the normalization statistics razor thin.
pub fn norm_groups(c: usize) -> usize {
    if c < 8 {
        return 1;
    }
    (1..=8.min(c / 4)).rev().find(|g| c % g == 0).unwrap_or(1)
}

pub fn init_conv3d<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, cin: usize, cout: usize, k: usize) {
    let fan_in = cin * k * k * k;
    store.insert(format!("{prefix}.weight"), fan_in_uniform(rng, &[cout, cin, k, k, k], fan_in));
    store.insert(format!("{prefix}.bias"), zeros(&[cout]));
}

/// Zero-initialized convolution, used for the output projection so the
/// untrained network predicts zero noise.
pub fn init_conv3d_zero(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, k: usize) {
    store.insert(format!("{prefix}.weight"), zeros(&[cout, cin, k, k, k]));
    store.insert(format!("{prefix}.bias"), zeros(&[cout]));
}

pub fn apply_conv3d(g: &mut Graph, bind: &Binding, prefix: &str, x: NodeId) -> NodeId {
    let w = bind.id(&format!("{prefix}.weight"));
    let b = bind.id(&format!("{prefix}.bias"));
    g.conv3d(x, w, b)
}

/// Stride-2 transposed convolution (kernel 2). `nearest` initializes the
/// single-channel kernel at 1 so the block starts as nearest-neighbor
/// upsampling.
pub fn init_tconv3d<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    cin: usize,
    cout: usize,
    nearest: bool,
) {
    let w = if nearest {
        ones(&[cin, cout, 2, 2, 2])
    } else {
        fan_in_uniform(rng, &[cin, cout, 2, 2, 2], cin * 8)
    };
    store.insert(format!("{prefix}.weight"), w);
    store.insert(format!("{prefix}.bias"), zeros(&[cout]));
}

pub fn apply_tconv3d(g: &mut Graph, bind: &Binding, prefix: &str, x: NodeId) -> NodeId {
    let w = bind.id(&format!("{prefix}.weight"));
    let b = bind.id(&format!("{prefix}.bias"));
    g.conv_transpose3d(x, w, b)
}

pub fn init_group_norm(store: &mut ParamStore, prefix: &str, c: usize) {
    store.insert(format!("{prefix}.gamma"), ones(&[c]));
    store.insert(format!("{prefix}.beta"), zeros(&[c]));
}

pub fn apply_group_norm(g: &mut Graph, bind: &Binding, prefix: &str, x: NodeId) -> NodeId {
    let c = g.shape(x)[0];
    let gamma = bind.id(&format!("{prefix}.gamma"));
    let beta = bind.id(&format!("{prefix}.beta"));
    g.group_norm(x, gamma, beta, norm_groups(c))
}

pub fn init_linear<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, din: usize, dout: usize) {
    store.insert(format!("{prefix}.weight"), fan_in_uniform(rng, &[din, dout], din));
    store.insert(format!("{prefix}.bias"), zeros(&[dout]));
}

pub fn apply_linear(g: &mut Graph, bind: &Binding, prefix: &str, x: NodeId) -> NodeId {
    let w = bind.id(&format!("{prefix}.weight"));
    let b = bind.id(&format!("{prefix}.bias"));
    g.linear(x, w, b)
}

/// Two-layer MLP with SiLU in between, for the time and age embeddings.
pub fn init_mlp<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, din: usize, dout: usize) {
    init_linear(store, rng, &format!("{prefix}.l1"), din, dout);
    init_linear(store, rng, &format!("{prefix}.l2"), dout, dout);
}

pub fn apply_mlp(g: &mut Graph, bind: &Binding, prefix: &str, x: NodeId) -> NodeId {
    let h = apply_linear(g, bind, &format!("{prefix}.l1"), x);
    let h = g.silu(h);
    apply_linear(g, bind, &format!("{prefix}.l2"), h)
}

/// Residual block: norm-SiLU-conv, additive per-channel time bias,
/// norm-SiLU-conv, plus a (projected) skip.
pub fn init_res_block<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    cin: usize,
    cout: usize,
    temb_dim: usize,
) {
    init_group_norm(store, &format!("{prefix}.norm1"), cin);
    init_conv3d(store, rng, &format!("{prefix}.conv1"), cin, cout, 3);
    init_linear(store, rng, &format!("{prefix}.temb"), temb_dim, cout);
    init_group_norm(store, &format!("{prefix}.norm2"), cout);
    init_conv3d(store, rng, &format!("{prefix}.conv2"), cout, cout, 3);
    if cin != cout {
        init_conv3d(store, rng, &format!("{prefix}.skip"), cin, cout, 1);
    }
}

pub fn apply_res_block(
    g: &mut Graph,
    bind: &Binding,
    prefix: &str,
    x: NodeId,
    temb: NodeId,
) -> NodeId {
    let cin = g.shape(x)[0];
    let h = apply_group_norm(g, bind, &format!("{prefix}.norm1"), x);
    let h = g.silu(h);
    let h = apply_conv3d(g, bind, &format!("{prefix}.conv1"), h);
    let cout = g.shape(h)[0];
    let h = apply_group_norm(g, bind, &format!("{prefix}.norm2"), h);
    // Per-channel additive step-embedding bias, after the normalization so
    // it cannot be absorbed by the group statistics.
    let tb = apply_linear(g, bind, &format!("{prefix}.temb"), temb);
    let tb = g.reshape(tb, &[cout]);
    let h = g.add_channel_bias(h, tb);
    let h = g.silu(h);
    let h = apply_conv3d(g, bind, &format!("{prefix}.conv2"), h);
    let skip = if cin == cout {
        x
    } else {
        apply_conv3d(g, bind, &format!("{prefix}.skip"), x)
    };
    g.add(h, skip)
}

/// Multi-head cross-attention at the bottleneck: queries are the flattened
/// voxel features, keys and values come from learned tokens projected off
/// the conditioning vector, and the attention output is summed back onto
/// the features.
pub fn init_cross_attention<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    channels: usize,
    cond_dim: usize,
    n_tokens: usize,
) {
    init_linear(store, rng, &format!("{prefix}.tokens"), cond_dim, n_tokens * channels);
    store.insert(format!("{prefix}.q"), fan_in_uniform(rng, &[channels, channels], channels));
    store.insert(format!("{prefix}.k"), fan_in_uniform(rng, &[channels, channels], channels));
    store.insert(format!("{prefix}.v"), fan_in_uniform(rng, &[channels, channels], channels));
    init_linear(store, rng, &format!("{prefix}.out"), channels, channels);
}

pub fn apply_cross_attention(
    g: &mut Graph,
    bind: &Binding,
    prefix: &str,
    x: NodeId,
    cond: NodeId,
    heads: usize,
    n_tokens: usize,
) -> NodeId {
    let shape = g.shape(x).to_vec();
    let (c, sx, sy, sz) = (shape[0], shape[1], shape[2], shape[3]);
    let s = sx * sy * sz;
    assert!(c % heads == 0, "attention heads must divide channels");
    let dh = c / heads;

    let xf = g.reshape(x, &[c, s]);
    let xt = g.transpose2(xf); // [S, C]

    let tok = apply_linear(g, bind, &format!("{prefix}.tokens"), cond); // [1, T*C]
    let tokens = g.reshape(tok, &[n_tokens, c]);

    let q = g.matmul(xt, bind.id(&format!("{prefix}.q"))); // [S, C]
    let k = g.matmul(tokens, bind.id(&format!("{prefix}.k"))); // [T, C]
    let v = g.matmul(tokens, bind.id(&format!("{prefix}.v"))); // [T, C]

    let mut head_outputs = Vec::with_capacity(heads);
    let scale = 1.0 / (dh as f64).sqrt();
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, lo, hi); // [S, dh]
        let kh = g.slice_cols(k, lo, hi); // [T, dh]
        let vh = g.slice_cols(v, lo, hi); // [T, dh]
        let kt = g.transpose2(kh); // [dh, T]
        let scores = g.matmul(qh, kt); // [S, T]
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores);
        let oh = g.matmul(attn, vh); // [S, dh]
        head_outputs.push(g.transpose2(oh)); // [dh, S]
    }
    let merged = g.concat_channels(&head_outputs); // [C, S]
    let merged = g.transpose2(merged); // [S, C]
    let out = apply_linear(g, bind, &format!("{prefix}.out"), merged);
    let out = g.transpose2(out); // [C, S]
    let out = g.reshape(out, &[c, sx, sy, sz]);
    g.add(x, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Tensor;
    use crate::nn::randn_tensor;
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn norm_groups_divides_and_keeps_pairs() {
        for c in [1usize, 2, 3, 4, 6, 8, 12, 16, 32, 64] {
            let gr = norm_groups(c);
            assert!(gr >= 1 && gr <= 8 && c % gr == 0, "c={c} g={gr}");
            if c >= 8 {
                assert!(c / gr >= 4, "c={c} g={gr} leaves thin groups");
            }
        }
        assert_eq!(norm_groups(64), 8);
        assert_eq!(norm_groups(16), 4);
        assert_eq!(norm_groups(8), 2);
    }

    #[test]
    fn res_block_preserves_spatial_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        init_res_block(&mut store, &mut rng, "blk", 4, 8, 16);
        let mut g = Graph::new();
        let bind = store.bind(&mut g, false);
        let x = g.leaf(randn_tensor(&[4, 5, 6, 7], &mut rng), false);
        let temb = g.leaf(randn_tensor(&[1, 16], &mut rng), false);
        let y = apply_res_block(&mut g, &bind, "blk", x, temb);
        assert_eq!(g.shape(y), &[8, 5, 6, 7]);
    }

    #[test]
    fn res_block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        init_res_block(&mut store, &mut rng, "blk", 3, 6, 8);
        let x_val = randn_tensor(&[3, 4, 4, 4], &mut rng);
        let t_val = randn_tensor(&[1, 8], &mut rng);

        let loss_of = |store: &ParamStore| -> f64 {
            let mut g = Graph::new();
            let bind = store.bind(&mut g, true);
            let x = g.leaf(x_val.clone(), false);
            let temb = g.leaf(t_val.clone(), false);
            let y = apply_res_block(&mut g, &bind, "blk", x, temb);
            let t = g.leaf(Tensor::zeros(IxDyn(&[6, 4, 4, 4])), false);
            let l = g.mse_loss(y, t);
            g.value(l)[[0]]
        };

        let mut g = Graph::new();
        let bind = store.bind(&mut g, true);
        let x = g.leaf(x_val.clone(), false);
        let temb = g.leaf(t_val.clone(), false);
        let y = apply_res_block(&mut g, &bind, "blk", x, temb);
        let t = g.leaf(Tensor::zeros(IxDyn(&[6, 4, 4, 4])), false);
        let l = g.mse_loss(y, t);
        let mut grads = g.backward(l).unwrap();

        let h = 1e-5;
        for name in ["blk.conv1.weight", "blk.temb.weight", "blk.norm1.gamma", "blk.skip.weight"] {
            let analytic = grads.take(bind.id(name)).unwrap();
            let base = store.get(name).unwrap().clone();
            for idx in [0usize, base.len() / 2] {
                let mut plus = store.clone();
                plus.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] += h;
                let mut minus = store.clone();
                minus.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[idx];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-4, "{name}[{idx}]: analytic {an} fd {fd}");
            }
        }
    }

    #[test]
    fn cross_attention_output_shape_and_cond_sensitivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        init_cross_attention(&mut store, &mut rng, "attn", 8, 12, 4);
        let x_val = randn_tensor(&[8, 2, 3, 2], &mut rng);
        let run = |cond_val: &Tensor| {
            let mut g = Graph::new();
            let bind = store.bind(&mut g, false);
            let x = g.leaf(x_val.clone(), false);
            let cond = g.leaf(cond_val.clone(), false);
            let y = apply_cross_attention(&mut g, &bind, "attn", x, cond, 2, 4);
            assert_eq!(g.shape(y), &[8, 2, 3, 2]);
            g.value(y).clone()
        };
        let c1 = randn_tensor(&[1, 12], &mut rng);
        let c2 = randn_tensor(&[1, 12], &mut rng);
        let y1 = run(&c1);
        let y2 = run(&c2);
        let diff: f64 = y1.iter().zip(y2.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!(diff > 0.0, "attention must react to its conditioning vector");
    }

    #[test]
    fn cross_attention_gradients_flow_to_token_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        init_cross_attention(&mut store, &mut rng, "attn", 4, 6, 4);
        let mut g = Graph::new();
        let bind = store.bind(&mut g, true);
        let x = g.leaf(randn_tensor(&[4, 2, 2, 2], &mut rng), false);
        let cond = g.leaf(randn_tensor(&[1, 6], &mut rng), false);
        let y = apply_cross_attention(&mut g, &bind, "attn", x, cond, 2, 4);
        let t = g.leaf(Tensor::zeros(IxDyn(&[4, 2, 2, 2])), false);
        let l = g.mse_loss(y, t);
        let grads = g.backward(l).unwrap();
        let gtok = grads.get(bind.id("attn.tokens.weight")).unwrap();
        assert!(gtok.iter().any(|&v| v != 0.0));
    }
}
