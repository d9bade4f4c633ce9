//! Tape-based reverse-mode autodiff. A [`Graph`] owns every intermediate
//! tensor of one forward pass; ops append nodes eagerly and `backward`
//! walks the tape in reverse. All math is f64 and single-threaded, so
//! results are bit-stable across runs and thread counts.
//!
//! Tensor layout conventions:
//! - volumes are `[C, X, Y, Z]` in C order,
//! - matrices are `[rows, cols]`,
//! - 3x3x3 convolutions use padding 1, 1x1x1 none,
//! - transposed convolutions use kernel 2, stride 2 (non-overlapping).

use ndarray::{Array2, ArrayD, Ix2, IxDyn};

use crate::error::{Error, Result};

pub type Tensor = ArrayD<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

// Large enough that near-constant groups (2-4 samples at the coarsest
// resolutions) keep bounded curvature; negligible for healthy variances.
const GROUP_NORM_EPS: f64 = 1e-3;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Silu(NodeId),
    /// `[C, ...]` plus a `[C]` bias broadcast over the trailing axes.
    AddChannelBias { x: NodeId, bias: NodeId },
    /// `x [n,k] . w [k,m] + b [m]`.
    Linear { x: NodeId, w: NodeId, b: NodeId },
    MatMul(NodeId, NodeId),
    /// Row-wise softmax over the last axis of a 2-D tensor.
    Softmax(NodeId),
    /// `x [Cin,X,Y,Z]`, `w [Cout,Cin,k,k,k]` (k odd), `b [Cout]`.
    Conv3d { x: NodeId, w: NodeId, b: NodeId },
    /// `x [Cin,X,Y,Z]`, `w [Cin,Cout,2,2,2]`, `b [Cout]`, stride 2.
    ConvTranspose3d { x: NodeId, w: NodeId, b: NodeId },
    /// Factor-2 mean pooling with boundary-clipped windows.
    MeanPool2(NodeId),
    GroupNorm { x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, stats: Vec<(f64, f64)> },
    /// Channel-axis concatenation of `[Ci, ...]` tensors.
    Concat(Vec<NodeId>),
    /// Keep the leading `target` voxels per spatial axis.
    Crop3 { x: NodeId, target: [usize; 3] },
    Reshape { x: NodeId },
    Transpose2(NodeId),
    SliceCols { x: NodeId, start: usize, end: usize },
    /// Mean squared error between two same-shape tensors; scalar output.
    MseLoss { a: NodeId, b: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One forward pass's computation tape.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(256) }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        // Every stored tensor is C-contiguous so ops may flat-index freely.
        let value = standardize(value);
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = &self.nodes[a.0].value * s;
        let rg = self.requires(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * sigmoid(x));
        let rg = self.requires(a);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias);
        assert_eq!(bs.len(), 1, "bias must be a vector");
        assert_eq!(bs[0], xs[0], "bias length must match channels");
        let c = xs[0];
        let spatial: usize = xs[1..].iter().product();
        let mut v = self.nodes[x.0].value.clone();
        {
            let flat = v.as_slice_mut().expect("contiguous");
            let b = self.nodes[bias.0].value.as_slice().expect("contiguous");
            for ci in 0..c {
                for s in 0..spatial {
                    flat[ci * spatial + s] += b[ci];
                }
            }
        }
        let rg = self.requires(x) || self.requires(bias);
        self.push(v, Op::AddChannelBias { x, bias }, rg)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = as2(&self.nodes[x.0].value);
        let wv = as2(&self.nodes[w.0].value);
        assert_eq!(xv.ncols(), wv.nrows(), "linear inner dims");
        let bv = self.nodes[b.0].value.as_slice().expect("contiguous").to_vec();
        assert_eq!(bv.len(), wv.ncols(), "linear bias length");
        let mut y = xv.dot(&wv);
        for mut row in y.rows_mut() {
            for (j, e) in row.iter_mut().enumerate() {
                *e += bv[j];
            }
        }
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(y.into_dyn(), Op::Linear { x, w, b }, rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let y = av.dot(&bv).into_dyn();
        let rg = self.requires(a) || self.requires(b);
        self.push(y, Op::MatMul(a, b), rg)
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let av = as2(&self.nodes[a.0].value);
        let mut y = av.to_owned();
        for mut row in y.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                sum += *e;
            }
            for e in row.iter_mut() {
                *e /= sum;
            }
        }
        let rg = self.requires(a);
        self.push(y.into_dyn(), Op::Softmax(a), rg)
    }

    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            let bv = self.nodes[b.0].value.as_slice().expect("contiguous");
            conv3d_forward(xv, wv, bv)
        };
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(y, Op::Conv3d { x, w, b }, rg)
    }

    pub fn conv_transpose3d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            let bv = self.nodes[b.0].value.as_slice().expect("contiguous");
            conv_transpose3d_forward(xv, wv, bv)
        };
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(y, Op::ConvTranspose3d { x, w, b }, rg)
    }

    pub fn mean_pool2(&mut self, x: NodeId) -> NodeId {
        let y = mean_pool2_forward(&self.nodes[x.0].value);
        let rg = self.requires(x);
        self.push(y, Op::MeanPool2(x), rg)
    }

    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize) -> NodeId {
        let (y, stats) = {
            let xv = &self.nodes[x.0].value;
            let gv = self.nodes[gamma.0].value.as_slice().expect("contiguous");
            let bv = self.nodes[beta.0].value.as_slice().expect("contiguous");
            group_norm_forward(xv, gv, bv, groups)
        };
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(y, Op::GroupNorm { x, gamma, beta, groups, stats }, rg)
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let spatial = self.shape(parts[0])[1..].to_vec();
        let mut c_total = 0;
        for &p in parts {
            assert_eq!(&self.shape(p)[1..], &spatial[..], "concat spatial mismatch");
            c_total += self.shape(p)[0];
        }
        let mut shape = vec![c_total];
        shape.extend_from_slice(&spatial);
        let numel_sp: usize = spatial.iter().product();
        let mut data = Vec::with_capacity(c_total * numel_sp);
        for &p in parts {
            data.extend_from_slice(self.nodes[p.0].value.as_slice().expect("contiguous"));
        }
        let v = ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap();
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(v, Op::Concat(parts.to_vec()), rg)
    }

    pub fn crop3(&mut self, x: NodeId, target: [usize; 3]) -> NodeId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4);
        assert!(target[0] <= xs[1] && target[1] <= xs[2] && target[2] <= xs[3], "crop exceeds input");
        if [xs[1], xs[2], xs[3]] == target {
            // Still record the op so gradients flow through unchanged.
            let v = self.nodes[x.0].value.clone();
            let rg = self.requires(x);
            return self.push(v, Op::Crop3 { x, target }, rg);
        }
        let c = xs[0];
        let v = {
            let xv = &self.nodes[x.0].value;
            let mut out = ArrayD::zeros(IxDyn(&[c, target[0], target[1], target[2]]));
            for ci in 0..c {
                for ix in 0..target[0] {
                    for iy in 0..target[1] {
                        for iz in 0..target[2] {
                            out[[ci, ix, iy, iz]] = xv[[ci, ix, iy, iz]];
                        }
                    }
                }
            }
            out
        };
        let rg = self.requires(x);
        self.push(v, Op::Crop3 { x, target }, rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.nodes[x.0].value.len(), "reshape numel mismatch");
        let flat: Vec<f64> = self.nodes[x.0].value.iter().cloned().collect();
        let v = ArrayD::from_shape_vec(IxDyn(shape), flat).unwrap();
        let rg = self.requires(x);
        self.push(v, Op::Reshape { x }, rg)
    }

    pub fn transpose2(&mut self, x: NodeId) -> NodeId {
        let xv = as2(&self.nodes[x.0].value);
        let v = xv.t().to_owned().into_dyn();
        let rg = self.requires(x);
        self.push(v, Op::Transpose2(x), rg)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let xv = as2(&self.nodes[x.0].value);
        assert!(start < end && end <= xv.ncols());
        let v = xv.slice(ndarray::s![.., start..end]).to_owned().into_dyn();
        let rg = self.requires(x);
        self.push(v, Op::SliceCols { x, start, end }, rg)
    }

    pub fn mse_loss(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mse shape mismatch");
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let n = av.len() as f64;
        let sum: f64 = av.iter().zip(bv.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
        let v = ArrayD::from_elem(IxDyn(&[1]), sum / n);
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::MseLoss { a, b }, rg)
    }

    /// Reverse pass from a scalar node. Returns per-node gradients; entries
    /// are `None` for nodes that don't require or never received gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::ShapeMismatch("backward root must be scalar".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0));

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let gy = grads[idx].take().unwrap();
            // Reinsert so callers can read gradients of interior nodes too.
            grads[idx] = Some(gy.clone());
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(self, &mut grads, *a, gy.clone());
                    accumulate(self, &mut grads, *b, gy);
                }
                Op::Scale(a, s) => {
                    accumulate(self, &mut grads, *a, &gy * *s);
                }
                Op::Silu(a) => {
                    let xa = &self.nodes[a.0].value;
                    let gx = ndarray::Zip::from(&gy).and(xa).map_collect(|&g, &x| {
                        let s = sigmoid(x);
                        g * (s * (1.0 + x * (1.0 - s)))
                    });
                    accumulate(self, &mut grads, *a, gx);
                }
                Op::AddChannelBias { x, bias } => {
                    let (x, bias) = (*x, *bias);
                    if self.requires(bias) {
                        let c = self.shape(bias)[0];
                        let spatial: usize = self.shape(x)[1..].iter().product();
                        let gyf = gy.as_slice().expect("contiguous");
                        let mut gb = vec![0.0; c];
                        for ci in 0..c {
                            gb[ci] = gyf[ci * spatial..(ci + 1) * spatial].iter().sum();
                        }
                        accumulate(self, &mut grads, bias, ArrayD::from_shape_vec(IxDyn(&[c]), gb).unwrap());
                    }
                    accumulate(self, &mut grads, x, gy);
                }
                Op::Linear { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let gy2 = as2(&gy);
                    if self.requires(x) {
                        let wv = as2(&self.nodes[w.0].value);
                        let gx = gy2.dot(&wv.t()).into_dyn();
                        accumulate(self, &mut grads, x, gx);
                    }
                    if self.requires(w) {
                        let xv = as2(&self.nodes[x.0].value);
                        let gw = xv.t().dot(&gy2).into_dyn();
                        accumulate(self, &mut grads, w, gw);
                    }
                    if self.requires(b) {
                        let m = gy2.ncols();
                        let mut gb = vec![0.0; m];
                        for row in gy2.rows() {
                            for (j, &e) in row.iter().enumerate() {
                                gb[j] += e;
                            }
                        }
                        accumulate(self, &mut grads, b, ArrayD::from_shape_vec(IxDyn(&[m]), gb).unwrap());
                    }
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let gy2 = as2(&gy);
                    if self.requires(a) {
                        let bv = as2(&self.nodes[b.0].value);
                        accumulate(self, &mut grads, a, gy2.dot(&bv.t()).into_dyn());
                    }
                    if self.requires(b) {
                        let av = as2(&self.nodes[a.0].value);
                        accumulate(self, &mut grads, b, av.t().dot(&gy2).into_dyn());
                    }
                }
                Op::Softmax(a) => {
                    let a = *a;
                    let yv = as2(&self.nodes[idx].value);
                    let gy2 = as2(&gy);
                    let mut gx = yv.to_owned();
                    for (mut grow, (yrow, gyrow)) in
                        gx.rows_mut().into_iter().zip(yv.rows().into_iter().zip(gy2.rows()))
                    {
                        let dot: f64 = yrow.iter().zip(gyrow.iter()).map(|(y, g)| y * g).sum();
                        for ((e, &y), &g) in grow.iter_mut().zip(yrow.iter()).zip(gyrow.iter()) {
                            *e = y * (g - dot);
                        }
                    }
                    accumulate(self, &mut grads, a, gx.into_dyn());
                }
                Op::Conv3d { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let (gx, gw, gb) = conv3d_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        &gy,
                        self.requires(x),
                        self.requires(w),
                        self.requires(b),
                    );
                    if let Some(gx) = gx {
                        accumulate(self, &mut grads, x, gx);
                    }
                    if let Some(gw) = gw {
                        accumulate(self, &mut grads, w, gw);
                    }
                    if let Some(gb) = gb {
                        accumulate(self, &mut grads, b, gb);
                    }
                }
                Op::ConvTranspose3d { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let (gx, gw, gb) = conv_transpose3d_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        &gy,
                        self.requires(x),
                        self.requires(w),
                        self.requires(b),
                    );
                    if let Some(gx) = gx {
                        accumulate(self, &mut grads, x, gx);
                    }
                    if let Some(gw) = gw {
                        accumulate(self, &mut grads, w, gw);
                    }
                    if let Some(gb) = gb {
                        accumulate(self, &mut grads, b, gb);
                    }
                }
                Op::MeanPool2(x) => {
                    let x = *x;
                    let gx = mean_pool2_backward(&self.nodes[x.0].value, &gy);
                    accumulate(self, &mut grads, x, gx);
                }
                Op::GroupNorm { x, gamma, beta, groups, stats } => {
                    let (x, gamma, beta, groups) = (*x, *gamma, *beta, *groups);
                    let stats = stats.clone();
                    let (gx, gg, gb) = group_norm_backward(
                        &self.nodes[x.0].value,
                        self.nodes[gamma.0].value.as_slice().expect("contiguous"),
                        groups,
                        &stats,
                        &gy,
                    );
                    accumulate(self, &mut grads, x, gx);
                    if self.requires(gamma) {
                        accumulate(self, &mut grads, gamma, gg);
                    }
                    if self.requires(beta) {
                        accumulate(self, &mut grads, beta, gb);
                    }
                }
                Op::Concat(parts) => {
                    let parts = parts.clone();
                    let gyf = gy.as_slice().expect("contiguous");
                    let mut offset = 0;
                    for p in parts {
                        let ps = self.shape(p).to_vec();
                        let len: usize = ps.iter().product();
                        let gp = ArrayD::from_shape_vec(IxDyn(&ps), gyf[offset..offset + len].to_vec())
                            .unwrap();
                        offset += len;
                        accumulate(self, &mut grads, p, gp);
                    }
                }
                Op::Crop3 { x, target } => {
                    let (x, target) = (*x, *target);
                    let xs = self.shape(x).to_vec();
                    let mut gx = ArrayD::zeros(IxDyn(&xs));
                    for ci in 0..xs[0] {
                        for ix in 0..target[0] {
                            for iy in 0..target[1] {
                                for iz in 0..target[2] {
                                    gx[[ci, ix, iy, iz]] = gy[[ci, ix, iy, iz]];
                                }
                            }
                        }
                    }
                    accumulate(self, &mut grads, x, gx);
                }
                Op::Reshape { x } => {
                    let x = *x;
                    let xs = self.shape(x).to_vec();
                    let flat: Vec<f64> = gy.iter().cloned().collect();
                    accumulate(self, &mut grads, x, ArrayD::from_shape_vec(IxDyn(&xs), flat).unwrap());
                }
                Op::Transpose2(x) => {
                    let x = *x;
                    let gx = as2(&gy).t().to_owned().into_dyn();
                    accumulate(self, &mut grads, x, gx);
                }
                Op::SliceCols { x, start, end } => {
                    let (x, start, end) = (*x, *start, *end);
                    let xs = self.shape(x).to_vec();
                    let mut gx = Array2::<f64>::zeros((xs[0], xs[1]));
                    let gy2 = as2(&gy);
                    for i in 0..xs[0] {
                        for j in start..end {
                            gx[[i, j]] = gy2[[i, j - start]];
                        }
                    }
                    accumulate(self, &mut grads, x, gx.into_dyn());
                }
                Op::MseLoss { a, b } => {
                    let (a, b) = (*a, *b);
                    let scale = gy[[0]] * 2.0 / self.nodes[a.0].value.len() as f64;
                    let diff = (&self.nodes[a.0].value - &self.nodes[b.0].value) * scale;
                    if self.requires(a) {
                        accumulate(self, &mut grads, a, diff.clone());
                    }
                    if self.requires(b) {
                        accumulate(self, &mut grads, b, -diff);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn accumulate(g: &Graph, grads: &mut [Option<Tensor>], target: NodeId, delta: Tensor) {
    if !g.nodes[target.0].requires_grad {
        return;
    }
    match &mut grads[target.0] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(standardize(delta)),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Repacks into C order when a transpose or matmul shortcut left the array
/// in another memory layout.
fn standardize(t: Tensor) -> Tensor {
    if t.is_standard_layout() {
        t
    } else {
        let shape = t.shape().to_vec();
        let flat: Vec<f64> = t.iter().cloned().collect();
        ArrayD::from_shape_vec(IxDyn(&shape), flat).unwrap()
    }
}

fn as2(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("expected 2-D tensor")
}

// --- conv3d -----------------------------------------------------------

fn spatial_of(shape: &[usize]) -> (usize, usize, usize) {
    (shape[1], shape[2], shape[3])
}

/// Valid output range along one axis for a kernel offset `d` in {0,1,2}
/// with padding 1: output index o needs `o + d - 1` in `[0, n)`.
#[inline]
fn conv_axis_range(n: usize, d: usize) -> (usize, usize) {
    let lo = 1usize.saturating_sub(d);
    let hi = if d == 2 { n - 1 } else { n };
    (lo, hi)
}

/// Direct 3x3x3 convolution, padding 1. The inner loop runs contiguous
/// z-run AXPYs, which keeps memory traffic at the tensors themselves.
fn conv3d_forward(x: &Tensor, w: &Tensor, b: &[f64]) -> Tensor {
    let (cin, nx, ny, nz) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = w.shape()[0];
    let k = w.shape()[2];
    assert_eq!(w.shape()[1], cin, "conv weight in-channels");
    assert!(k == 1 || k == 3, "conv kernel must be 1 or 3");
    let s = nx * ny * nz;
    let xf = x.as_slice().expect("contiguous");
    let wf = w.as_slice().expect("contiguous");
    let mut out = vec![0.0f64; cout * s];

    if k == 1 {
        for co in 0..cout {
            let y = &mut out[co * s..(co + 1) * s];
            y.fill(b[co]);
            for ci in 0..cin {
                let wv = wf[co * cin + ci];
                let xs = &xf[ci * s..(ci + 1) * s];
                for (yv, xv) in y.iter_mut().zip(xs) {
                    *yv += wv * xv;
                }
            }
        }
    } else {
        for co in 0..cout {
            let y = &mut out[co * s..(co + 1) * s];
            y.fill(b[co]);
            for ci in 0..cin {
                let xs = &xf[ci * s..(ci + 1) * s];
                let wbase = (co * cin + ci) * 27;
                for dx in 0..3usize {
                    let (x_lo, x_hi) = conv_axis_range(nx, dx);
                    for dy in 0..3usize {
                        let (y_lo, y_hi) = conv_axis_range(ny, dy);
                        for dz in 0..3usize {
                            let (z_lo, z_hi) = conv_axis_range(nz, dz);
                            let wv = wf[wbase + (dx * 3 + dy) * 3 + dz];
                            if wv == 0.0 {
                                continue;
                            }
                            let len = z_hi - z_lo;
                            for ox in x_lo..x_hi {
                                let px = ox + dx - 1;
                                for oy in y_lo..y_hi {
                                    let py = oy + dy - 1;
                                    let yb = (ox * ny + oy) * nz + z_lo;
                                    let xb = (px * ny + py) * nz + z_lo + dz - 1;
                                    let yrun = &mut y[yb..yb + len];
                                    let xrun = &xs[xb..xb + len];
                                    for (yv, xv) in yrun.iter_mut().zip(xrun) {
                                        *yv += wv * xv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[cout, nx, ny, nz]), out).unwrap()
}

#[allow(clippy::type_complexity)]
fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (cin, nx, ny, nz) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = w.shape()[0];
    let k = w.shape()[2];
    let s = nx * ny * nz;
    let xf = x.as_slice().expect("contiguous");
    let wf = w.as_slice().expect("contiguous");
    let gyf = gy.as_slice().expect("contiguous");

    let gb = if need_b {
        let mut acc = vec![0.0f64; cout];
        for co in 0..cout {
            acc[co] = gyf[co * s..(co + 1) * s].iter().sum();
        }
        Some(ArrayD::from_shape_vec(IxDyn(&[cout]), acc).unwrap())
    } else {
        None
    };

    if k == 1 {
        let gx = if need_x {
            let mut gx = vec![0.0f64; cin * s];
            for ci in 0..cin {
                let gxi = &mut gx[ci * s..(ci + 1) * s];
                for co in 0..cout {
                    let wv = wf[co * cin + ci];
                    let gys = &gyf[co * s..(co + 1) * s];
                    for (g, u) in gxi.iter_mut().zip(gys) {
                        *g += wv * u;
                    }
                }
            }
            Some(ArrayD::from_shape_vec(IxDyn(&[cin, nx, ny, nz]), gx).unwrap())
        } else {
            None
        };
        let gw = if need_w {
            let mut gw = vec![0.0f64; cout * cin];
            for co in 0..cout {
                let gys = &gyf[co * s..(co + 1) * s];
                for ci in 0..cin {
                    let xs = &xf[ci * s..(ci + 1) * s];
                    gw[co * cin + ci] = gys.iter().zip(xs).map(|(a, b)| a * b).sum();
                }
            }
            Some(ArrayD::from_shape_vec(IxDyn(&[cout, cin, 1, 1, 1]), gw).unwrap())
        } else {
            None
        };
        return (gx, gw, gb);
    }

    // Gradient w.r.t. the input: correlate gy with the flipped kernel. For
    // each (dx,dy,dz) the output run y[o...] fed from x[o+d-1...] sends its
    // gradient back, so gx[p...] += w * gy[p-(d-1)...] over the same valid
    // ranges as the forward pass.
    let gx = if need_x {
        let mut gx = vec![0.0f64; cin * s];
        for ci in 0..cin {
            let gxi = &mut gx[ci * s..(ci + 1) * s];
            for co in 0..cout {
                let gys = &gyf[co * s..(co + 1) * s];
                let wbase = (co * cin + ci) * 27;
                for dx in 0..3usize {
                    let (x_lo, x_hi) = conv_axis_range(nx, dx);
                    for dy in 0..3usize {
                        let (y_lo, y_hi) = conv_axis_range(ny, dy);
                        for dz in 0..3usize {
                            let (z_lo, z_hi) = conv_axis_range(nz, dz);
                            let wv = wf[wbase + (dx * 3 + dy) * 3 + dz];
                            if wv == 0.0 {
                                continue;
                            }
                            let len = z_hi - z_lo;
                            for ox in x_lo..x_hi {
                                let px = ox + dx - 1;
                                for oy in y_lo..y_hi {
                                    let py = oy + dy - 1;
                                    let gyb = (ox * ny + oy) * nz + z_lo;
                                    let gxb = (px * ny + py) * nz + z_lo + dz - 1;
                                    let grun = &mut gxi[gxb..gxb + len];
                                    let urun = &gys[gyb..gyb + len];
                                    for (g, u) in grun.iter_mut().zip(urun) {
                                        *g += wv * u;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Some(ArrayD::from_shape_vec(IxDyn(&[cin, nx, ny, nz]), gx).unwrap())
    } else {
        None
    };

    let gw = if need_w {
        let mut gw = vec![0.0f64; cout * cin * 27];
        for co in 0..cout {
            let gys = &gyf[co * s..(co + 1) * s];
            for ci in 0..cin {
                let xs = &xf[ci * s..(ci + 1) * s];
                let wbase = (co * cin + ci) * 27;
                for dx in 0..3usize {
                    let (x_lo, x_hi) = conv_axis_range(nx, dx);
                    for dy in 0..3usize {
                        let (y_lo, y_hi) = conv_axis_range(ny, dy);
                        for dz in 0..3usize {
                            let (z_lo, z_hi) = conv_axis_range(nz, dz);
                            let len = z_hi - z_lo;
                            let mut acc = 0.0f64;
                            for ox in x_lo..x_hi {
                                let px = ox + dx - 1;
                                for oy in y_lo..y_hi {
                                    let py = oy + dy - 1;
                                    let gyb = (ox * ny + oy) * nz + z_lo;
                                    let xb = (px * ny + py) * nz + z_lo + dz - 1;
                                    let grun = &gys[gyb..gyb + len];
                                    let xrun = &xs[xb..xb + len];
                                    acc += grun.iter().zip(xrun).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                            gw[wbase + (dx * 3 + dy) * 3 + dz] = acc;
                        }
                    }
                }
            }
        }
        Some(ArrayD::from_shape_vec(IxDyn(&[cout, cin, 3, 3, 3]), gw).unwrap())
    } else {
        None
    };
    (gx, gw, gb)
}

// --- transposed conv (kernel 2, stride 2) ------------------------------

fn conv_transpose3d_forward(x: &Tensor, w: &Tensor, b: &[f64]) -> Tensor {
    let (cin, nx, ny, nz) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = w.shape()[1];
    assert_eq!(w.shape()[0], cin, "tconv weight in-channels");
    assert_eq!(&w.shape()[2..], &[2, 2, 2], "tconv kernel must be 2x2x2");
    let s = nx * ny * nz;
    // [S, Cin]
    let xf = x.as_slice().expect("contiguous");
    let mut x_mat = Array2::<f64>::zeros((s, cin));
    {
        let xm = x_mat.as_slice_mut().unwrap();
        for ci in 0..cin {
            for si in 0..s {
                xm[si * cin + ci] = xf[ci * s + si];
            }
        }
    }
    let w2v = w.view().into_shape_with_order(IxDyn(&[cin, cout * 8])).unwrap();
    let w2 = w2v.into_dimensionality::<Ix2>().unwrap();
    let blocks = x_mat.dot(&w2); // [S, Cout*8]
    let (ox, oy, oz) = (2 * nx, 2 * ny, 2 * nz);
    let so = ox * oy * oz;
    let mut out = vec![0.0f64; cout * so];
    for co in 0..cout {
        let dst = &mut out[co * so..(co + 1) * so];
        for e in dst.iter_mut() {
            *e = b[co];
        }
    }
    let bf = blocks.as_slice().unwrap();
    for ix in 0..nx {
        for iy in 0..ny {
            for iz in 0..nz {
                let si = (ix * ny + iy) * nz + iz;
                let row = si * cout * 8;
                for co in 0..cout {
                    for dx in 0..2usize {
                        for dy in 0..2usize {
                            for dz in 0..2usize {
                                let j = row + ((co * 2 + dx) * 2 + dy) * 2 + dz;
                                let o = ((2 * ix + dx) * oy + (2 * iy + dy)) * oz + (2 * iz + dz);
                                out[co * so + o] += bf[j];
                            }
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[cout, ox, oy, oz]), out).unwrap()
}

#[allow(clippy::type_complexity)]
fn conv_transpose3d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (cin, nx, ny, nz) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = w.shape()[1];
    let s = nx * ny * nz;
    let (oy, oz) = (2 * ny, 2 * nz);
    let so = 8 * s;
    let gyf = gy.as_slice().expect("contiguous");

    // Gather output gradient into block layout [S, Cout*8].
    let mut gblocks = Array2::<f64>::zeros((s, cout * 8));
    {
        let gb = gblocks.as_slice_mut().unwrap();
        for ix in 0..nx {
            for iy in 0..ny {
                for iz in 0..nz {
                    let si = (ix * ny + iy) * nz + iz;
                    let row = si * cout * 8;
                    for co in 0..cout {
                        for dx in 0..2usize {
                            for dy in 0..2usize {
                                for dz in 0..2usize {
                                    let j = row + ((co * 2 + dx) * 2 + dy) * 2 + dz;
                                    let o =
                                        ((2 * ix + dx) * oy + (2 * iy + dy)) * oz + (2 * iz + dz);
                                    gb[j] = gyf[co * so + o];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let gb_bias = if need_b {
        let mut acc = vec![0.0f64; cout];
        for co in 0..cout {
            acc[co] = gyf[co * so..(co + 1) * so].iter().sum();
        }
        Some(ArrayD::from_shape_vec(IxDyn(&[cout]), acc).unwrap())
    } else {
        None
    };

    let w2v = w.view().into_shape_with_order(IxDyn(&[cin, cout * 8])).unwrap();
    let w2 = w2v.into_dimensionality::<Ix2>().unwrap();

    let gx = if need_x {
        let gx_mat = gblocks.dot(&w2.t()); // [S, Cin]
        let gf = gx_mat.as_slice().unwrap();
        let mut gx = vec![0.0f64; cin * s];
        for si in 0..s {
            for ci in 0..cin {
                gx[ci * s + si] = gf[si * cin + ci];
            }
        }
        Some(ArrayD::from_shape_vec(IxDyn(&[cin, nx, ny, nz]), gx).unwrap())
    } else {
        None
    };

    let gw = if need_w {
        let xf = x.as_slice().expect("contiguous");
        let mut x_mat = Array2::<f64>::zeros((s, cin));
        {
            let xm = x_mat.as_slice_mut().unwrap();
            for ci in 0..cin {
                for si in 0..s {
                    xm[si * cin + ci] = xf[ci * s + si];
                }
            }
        }
        let gw2 = x_mat.t().dot(&gblocks); // [Cin, Cout*8]
        Some(
            ArrayD::from_shape_vec(IxDyn(&[cin, cout, 2, 2, 2]), gw2.iter().cloned().collect())
                .unwrap(),
        )
    } else {
        None
    };

    (gx, gw, gb_bias)
}

// --- pooling ------------------------------------------------------------

fn mean_pool2_forward(x: &Tensor) -> Tensor {
    let (c, nx, ny, nz) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ox, oy, oz) = (nx.div_ceil(2), ny.div_ceil(2), nz.div_ceil(2));
    let mut out = ArrayD::zeros(IxDyn(&[c, ox, oy, oz]));
    for ci in 0..c {
        for kx in 0..ox {
            for ky in 0..oy {
                for kz in 0..oz {
                    let mut acc = 0.0;
                    let mut n = 0.0;
                    for dx in 0..2usize {
                        let px = 2 * kx + dx;
                        if px >= nx {
                            continue;
                        }
                        for dy in 0..2usize {
                            let py = 2 * ky + dy;
                            if py >= ny {
                                continue;
                            }
                            for dz in 0..2usize {
                                let pz = 2 * kz + dz;
                                if pz >= nz {
                                    continue;
                                }
                                acc += x[[ci, px, py, pz]];
                                n += 1.0;
                            }
                        }
                    }
                    out[[ci, kx, ky, kz]] = acc / n;
                }
            }
        }
    }
    out
}

fn mean_pool2_backward(x: &Tensor, gy: &Tensor) -> Tensor {
    let (c, nx, ny, nz) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ox, oy, oz) = (nx.div_ceil(2), ny.div_ceil(2), nz.div_ceil(2));
    let mut gx = ArrayD::zeros(IxDyn(&[c, nx, ny, nz]));
    for ci in 0..c {
        for kx in 0..ox {
            for ky in 0..oy {
                for kz in 0..oz {
                    let wx = (nx - 2 * kx).min(2);
                    let wy = (ny - 2 * ky).min(2);
                    let wz = (nz - 2 * kz).min(2);
                    let share = gy[[ci, kx, ky, kz]] / (wx * wy * wz) as f64;
                    for dx in 0..wx {
                        for dy in 0..wy {
                            for dz in 0..wz {
                                gx[[ci, 2 * kx + dx, 2 * ky + dy, 2 * kz + dz]] += share;
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

// --- group norm ----------------------------------------------------------

fn group_norm_forward(x: &Tensor, gamma: &[f64], beta: &[f64], groups: usize) -> (Tensor, Vec<(f64, f64)>) {
    let c = x.shape()[0];
    assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
    let (nx, ny, nz) = spatial_of(x.shape());
    let s = nx * ny * nz;
    let per = c / groups;
    let xf = x.as_slice().expect("contiguous");
    let mut out = vec![0.0f64; c * s];
    let mut stats = Vec::with_capacity(groups);
    for gi in 0..groups {
        let lo = gi * per * s;
        let hi = (gi + 1) * per * s;
        let n = (hi - lo) as f64;
        let mean = xf[lo..hi].iter().sum::<f64>() / n;
        let var = xf[lo..hi].iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
        stats.push((mean, rstd));
        for ci in gi * per..(gi + 1) * per {
            for si in 0..s {
                let idx = ci * s + si;
                out[idx] = gamma[ci] * ((xf[idx] - mean) * rstd) + beta[ci];
            }
        }
    }
    (
        ArrayD::from_shape_vec(IxDyn(x.shape()), out).unwrap(),
        stats,
    )
}

fn group_norm_backward(
    x: &Tensor,
    gamma: &[f64],
    groups: usize,
    stats: &[(f64, f64)],
    gy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = x.shape()[0];
    let (nx, ny, nz) = spatial_of(x.shape());
    let s = nx * ny * nz;
    let per = c / groups;
    let xf = x.as_slice().expect("contiguous");
    let gyf = gy.as_slice().expect("contiguous");

    let mut gx = vec![0.0f64; c * s];
    let mut ggamma = vec![0.0f64; c];
    let mut gbeta = vec![0.0f64; c];

    for gi in 0..groups {
        let (mean, rstd) = stats[gi];
        let n = (per * s) as f64;
        // First pass: per-channel reductions plus group-level sums.
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for ci in gi * per..(gi + 1) * per {
            for si in 0..s {
                let idx = ci * s + si;
                let xhat = (xf[idx] - mean) * rstd;
                let gyv = gyf[idx];
                ggamma[ci] += gyv * xhat;
                gbeta[ci] += gyv;
                let dxhat = gyv * gamma[ci];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
        }
        for ci in gi * per..(gi + 1) * per {
            for si in 0..s {
                let idx = ci * s + si;
                let xhat = (xf[idx] - mean) * rstd;
                let dxhat = gyf[idx] * gamma[ci];
                gx[idx] = rstd * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
            }
        }
    }
    (
        ArrayD::from_shape_vec(IxDyn(x.shape()), gx).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&[c]), ggamma).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&[c]), gbeta).unwrap(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::nn::randn_tensor;

    /// Central finite-difference check of `d loss / d param` for every
    /// parameter leaf produced by `build`.
    fn fd_check<F>(shapes: &[Vec<usize>], build: F, tol: f64, seed: u64)
    where
        F: Fn(&mut Graph, &[NodeId]) -> NodeId,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: Vec<Tensor> = shapes.iter().map(|s| randn_tensor(s, &mut rng)).collect();

        let eval = |vals: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = vals.iter().map(|v| g.leaf(v.clone(), true)).collect();
            let loss = build(&mut g, &ids);
            g.value(loss)[[0]]
        };

        // Analytic gradients at the base point.
        let mut g = Graph::new();
        let ids: Vec<NodeId> = base.iter().map(|v| g.leaf(v.clone(), true)).collect();
        let loss = build(&mut g, &ids);
        let grads = g.backward(loss).unwrap();

        let h = 1e-5;
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        for (pi, shape) in shapes.iter().enumerate() {
            let numel: usize = shape.iter().product();
            let n_probe = numel.min(6);
            let analytic = grads.get(ids[pi]).expect("param gradient missing");
            for _ in 0..n_probe {
                let flat_idx = rand::Rng::random_range(&mut rng2, 0..numel);
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus[pi].as_slice_mut().unwrap()[flat_idx] += h;
                minus[pi].as_slice_mut().unwrap()[flat_idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[flat_idx];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                let rel = (an - fd).abs() / denom;
                assert!(rel < tol, "param {pi} idx {flat_idx}: analytic {an}, fd {fd}, rel {rel}");
            }
        }
    }

    #[test]
    fn grad_add_scale_silu() {
        fd_check(
            &[vec![3, 4], vec![3, 4]],
            |g, p| {
                let a = g.silu(p[0]);
                let s = g.scale(p[1], 1.7);
                let sum = g.add(a, s);
                let t = g.leaf(Tensor::zeros(IxDyn(&[3, 4])), false);
                g.mse_loss(sum, t)
            },
            1e-6,
            1,
        );
    }

    #[test]
    fn grad_linear_matmul_softmax() {
        fd_check(
            &[vec![4, 3], vec![3, 5], vec![5], vec![5, 2]],
            |g, p| {
                let y = g.linear(p[0], p[1], p[2]);
                let sm = g.softmax(y);
                let z = g.matmul(sm, p[3]);
                let t = g.leaf(Tensor::zeros(IxDyn(&[4, 2])), false);
                g.mse_loss(z, t)
            },
            1e-5,
            2,
        );
    }

    #[test]
    fn grad_conv3d() {
        fd_check(
            &[vec![2, 4, 3, 4], vec![3, 2, 3, 3, 3], vec![3]],
            |g, p| {
                let y = g.conv3d(p[0], p[1], p[2]);
                let t = g.leaf(Tensor::zeros(IxDyn(&[3, 4, 3, 4])), false);
                g.mse_loss(y, t)
            },
            1e-5,
            3,
        );
    }

    #[test]
    fn grad_conv3d_1x1() {
        fd_check(
            &[vec![3, 3, 3, 3], vec![2, 3, 1, 1, 1], vec![2]],
            |g, p| {
                let y = g.conv3d(p[0], p[1], p[2]);
                let t = g.leaf(Tensor::zeros(IxDyn(&[2, 3, 3, 3])), false);
                g.mse_loss(y, t)
            },
            1e-5,
            4,
        );
    }

    #[test]
    fn grad_conv_transpose3d() {
        fd_check(
            &[vec![2, 3, 2, 3], vec![2, 3, 2, 2, 2], vec![3]],
            |g, p| {
                let y = g.conv_transpose3d(p[0], p[1], p[2]);
                let t = g.leaf(Tensor::zeros(IxDyn(&[3, 6, 4, 6])), false);
                g.mse_loss(y, t)
            },
            1e-5,
            5,
        );
    }

    #[test]
    fn grad_pool_norm_bias() {
        fd_check(
            &[vec![4, 5, 4, 3], vec![4], vec![4], vec![4]],
            |g, p| {
                let gn = g.group_norm(p[0], p[1], p[2], 2);
                let biased = g.add_channel_bias(gn, p[3]);
                let pooled = g.mean_pool2(biased);
                let t = g.leaf(Tensor::zeros(IxDyn(&[4, 3, 2, 2])), false);
                g.mse_loss(pooled, t)
            },
            1e-5,
            6,
        );
    }

    #[test]
    fn grad_concat_crop_reshape_transpose_slice() {
        fd_check(
            &[vec![2, 3, 4, 3], vec![1, 3, 4, 3]],
            |g, p| {
                let cat = g.concat_channels(&[p[0], p[1]]);
                let cropped = g.crop3(cat, [2, 3, 2]);
                let flat = g.reshape(cropped, &[3, 12]);
                let tr = g.transpose2(flat);
                let sl = g.slice_cols(tr, 1, 3);
                let t = g.leaf(Tensor::zeros(IxDyn(&[12, 2])), false);
                g.mse_loss(sl, t)
            },
            1e-5,
            7,
        );
    }

    #[test]
    fn conv3d_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn_tensor(&[2, 4, 5, 3], &mut rng);
        let w = randn_tensor(&[3, 2, 3, 3, 3], &mut rng);
        let b = randn_tensor(&[3], &mut rng);
        let mut g = Graph::new();
        let xi = g.leaf(x.clone(), false);
        let wi = g.leaf(w.clone(), false);
        let bi = g.leaf(b.clone(), false);
        let y = g.conv3d(xi, wi, bi);
        let yv = g.value(y);

        for co in 0..3 {
            for ox in 0..4usize {
                for oy in 0..5usize {
                    for oz in 0..3usize {
                        let mut acc = b[[co]];
                        for ci in 0..2 {
                            for dx in 0..3usize {
                                for dy in 0..3usize {
                                    for dz in 0..3usize {
                                        let px = ox as isize + dx as isize - 1;
                                        let py = oy as isize + dy as isize - 1;
                                        let pz = oz as isize + dz as isize - 1;
                                        if px >= 0 && px < 4 && py >= 0 && py < 5 && pz >= 0 && pz < 3 {
                                            acc += x[[ci, px as usize, py as usize, pz as usize]]
                                                * w[[co, ci, dx, dy, dz]];
                                        }
                                    }
                                }
                            }
                        }
                        let got = yv[[co, ox, oy, oz]];
                        assert!((got - acc).abs() < 1e-10, "mismatch at {co},{ox},{oy},{oz}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv_transpose_impulse_places_kernel_at_stride2() {
        // A single-voxel impulse must paint exactly the 2x2x2 kernel block
        // at the doubled location.
        let mut x = Tensor::zeros(IxDyn(&[1, 3, 3, 3]));
        x[[0, 1, 2, 0]] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = randn_tensor(&[1, 2, 2, 2, 2], &mut rng);
        let b = Tensor::zeros(IxDyn(&[2]));
        let mut g = Graph::new();
        let xi = g.leaf(x, false);
        let wi = g.leaf(w.clone(), false);
        let bi = g.leaf(b, false);
        let y = g.conv_transpose3d(xi, wi, bi);
        let yv = g.value(y);
        assert_eq!(yv.shape(), &[2, 6, 6, 6]);
        let mut nonzero = 0;
        for co in 0..2 {
            for ix in 0..6usize {
                for iy in 0..6usize {
                    for iz in 0..6usize {
                        let v = yv[[co, ix, iy, iz]];
                        let in_block = (2..4).contains(&ix) && (4..6).contains(&iy) && iz < 2;
                        if in_block {
                            let want = w[[0, co, ix - 2, iy - 4, iz]];
                            assert!((v - want).abs() < 1e-12);
                            if v != 0.0 {
                                nonzero += 1;
                            }
                        } else {
                            assert_eq!(v, 0.0);
                        }
                    }
                }
            }
        }
        assert_eq!(nonzero, 16);
    }

    #[test]
    fn conv_transpose_zero_input_zero_bias_gives_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(IxDyn(&[2, 3, 3, 3])), false);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = g.leaf(randn_tensor(&[2, 1, 2, 2, 2], &mut rng), false);
        let b = g.leaf(Tensor::zeros(IxDyn(&[1])), false);
        let y = g.conv_transpose3d(x, w, b);
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_pool_handles_odd_dims() {
        let mut g = Graph::new();
        let mut x = Tensor::zeros(IxDyn(&[1, 5, 4, 3]));
        for (i, e) in x.iter_mut().enumerate() {
            *e = i as f64;
        }
        let xi = g.leaf(x.clone(), false);
        let y = g.mean_pool2(xi);
        assert_eq!(g.shape(y), &[1, 3, 2, 2]);
        // Edge voxel (2,_,_) pools a clipped 1x2x? window.
        let got = g.value(y)[[0, 2, 0, 0]];
        let want = (x[[0, 4, 0, 0]] + x[[0, 4, 0, 1]] + x[[0, 4, 1, 0]] + x[[0, 4, 1, 1]]) / 4.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn group_norm_normalizes_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = randn_tensor(&[4, 3, 3, 3], &mut rng);
        let mut g = Graph::new();
        let xi = g.leaf(x, false);
        let gamma = g.leaf(Tensor::ones(IxDyn(&[4])), false);
        let beta = g.leaf(Tensor::zeros(IxDyn(&[4])), false);
        let y = g.group_norm(xi, gamma, beta, 2);
        let yv = g.value(y);
        let s = 27;
        for gi in 0..2 {
            let vals: Vec<f64> =
                yv.as_slice().unwrap()[gi * 2 * s..(gi + 1) * 2 * s].to_vec();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10);
            // Unit variance up to the stabilizing epsilon.
            assert!((var - 1.0).abs() < 5e-3);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(IxDyn(&[2, 2])), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn forward_is_bit_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = randn_tensor(&[2, 4, 4, 4], &mut rng);
        let w = randn_tensor(&[2, 2, 3, 3, 3], &mut rng);
        let b = randn_tensor(&[2], &mut rng);
        let run = || {
            let mut g = Graph::new();
            let xi = g.leaf(x.clone(), false);
            let wi = g.leaf(w.clone(), false);
            let bi = g.leaf(b.clone(), false);
            let c = g.conv3d(xi, wi, bi);
            let y = g.silu(c);
            g.value(y).clone()
        };
        let a = run();
        let bv = run();
        assert_eq!(a, bv);
    }
}
