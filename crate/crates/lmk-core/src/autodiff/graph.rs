//! Define-by-run computation graph.
//!
//! Each training step builds a fresh [`Graph`]: parameters and batch data
//! enter as leaves, operation builders compute values eagerly and record a
//! node, and [`Graph::backward`] sweeps the tape in reverse. Gradients
//! accumulate into leaf tensors; intermediate gradients are cleared at the
//! start of every backward pass so repeated calls add one full gradient
//! each time.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use super::conv::ConvGeom;
use super::{conv, gemm};
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Graph execution mode. Dropout is active only in `Train`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One node of the computation graph: an n-dimensional value plus its
/// gradient, allocated on demand during backward.
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub id: NodeId,
    pub(crate) op: Op,
    pub(crate) inputs: Vec<NodeId>,
    pub(crate) needs_grad: bool,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.values.len()
    }

    fn is_leaf(&self) -> bool {
        matches!(self.op, Op::Leaf)
    }
}

pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Square,
    AbsDiff,
    Scale { factor: f64 },
    ScaleRows { weights: Vec<f64> },
    GatherRows { indices: Vec<usize> },
    Sum,
    SumSquares,
    Reshape,
    Relu,
    Dropout { mask: Vec<f64> },
    Dense,
    Conv2d { geom: ConvGeom },
    MaxPool2d { indices: Vec<u32> },
    SpatialSoftmax,
    SoftArgmax { beta: f64, probs: Vec<f64> },
    SoftmaxXent { labels: Vec<usize>, probs: Vec<f64> },
    SpatialXent { targets: Vec<usize>, probs: Vec<f64> },
    AffineCoords { mats: Vec<[f64; 6]> },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Square => "square",
            Op::AbsDiff => "abs_diff",
            Op::Scale { .. } => "scale",
            Op::ScaleRows { .. } => "scale_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::Sum => "sum",
            Op::SumSquares => "sum_squares",
            Op::Reshape => "reshape",
            Op::Relu => "relu",
            Op::Dropout { .. } => "dropout",
            Op::Dense => "dense",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::SpatialSoftmax => "spatial_softmax",
            Op::SoftArgmax { .. } => "soft_argmax",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
            Op::SpatialXent { .. } => "spatial_softmax_cross_entropy",
            Op::AffineCoords { .. } => "affine_coords",
        }
    }
}

pub struct Graph {
    pub(crate) nodes: Vec<Tensor>,
    pub(crate) mode: Mode,
    pub(crate) rng: ChaCha8Rng,
    op_counts: BTreeMap<&'static str, usize>,
    pub(crate) relu_backward_sign_flip: bool,
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self::with_seed(mode, 0)
    }

    /// The seed drives dropout masks; rebuilding with the same seed and the
    /// same op sequence reproduces them exactly (required by the gradient
    /// checker, which re-runs the forward pass under perturbation).
    pub fn with_seed(mode: Mode, seed: u64) -> Self {
        use rand::SeedableRng;
        Graph {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            op_counts: BTreeMap::new(),
            relu_backward_sign_flip: false,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Constant leaf (no gradient tracked).
    pub fn input(&mut self, shape: Vec<usize>, values: Vec<f64>) -> NodeId {
        assert_eq!(
            values.len(),
            shape.iter().product::<usize>(),
            "value count must match shape"
        );
        self.push(shape, values, Op::Leaf, vec![], false)
    }

    /// Trainable leaf: gradient is accumulated here by backward passes.
    pub fn param(&mut self, shape: Vec<usize>, values: Vec<f64>) -> NodeId {
        assert_eq!(
            values.len(),
            shape.iter().product::<usize>(),
            "value count must match shape"
        );
        self.push(shape, values, Op::Leaf, vec![], true)
    }

    pub(crate) fn push(
        &mut self,
        shape: Vec<usize>,
        values: Vec<f64>,
        op: Op,
        inputs: Vec<NodeId>,
        needs_grad_override: bool,
    ) -> NodeId {
        let needs_grad =
            needs_grad_override || inputs.iter().any(|&i| self.nodes[i].needs_grad);
        *self.op_counts.entry(op.name()).or_insert(0) += 1;
        let id = self.nodes.len();
        self.nodes.push(Tensor {
            shape,
            values,
            grad: None,
            id,
            op,
            inputs,
            needs_grad,
        });
        id
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].values
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        assert_eq!(self.nodes[id].numel(), 1, "scalar() on non-scalar node");
        self.nodes[id].values[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    /// How many nodes of each op kind this graph recorded. Used by tests to
    /// assert that disabled loss terms do no forward work.
    pub fn op_counts(&self) -> &BTreeMap<&'static str, usize> {
        &self.op_counts
    }

    /// First node (in creation order) containing a non-finite value, with
    /// its op name. Used for abort diagnostics.
    pub fn first_non_finite(&self) -> Option<(NodeId, &'static str)> {
        self.nodes
            .iter()
            .find(|t| t.values.iter().any(|v| !v.is_finite()))
            .map(|t| (t.id, t.op.name()))
    }

    /// Test hook: negates the relu gradient so the finite-difference suite
    /// can prove it catches a broken backward rule.
    #[doc(hidden)]
    pub fn tamper_relu_backward(&mut self) {
        self.relu_backward_sign_flip = true;
    }

    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.backward_with_barriers(loss, &[])
    }

    /// Backward pass that zeroes the gradient arriving at each barrier node,
    /// cutting every path that flows through it. Used to verify bottleneck
    /// structure and to implement stop-gradient variants.
    pub fn backward_with_barriers(&mut self, loss: NodeId, barriers: &[NodeId]) -> Result<()> {
        if self.nodes[loss].numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].shape
            )));
        }
        // Fresh intermediate gradients; leaf gradients persist (accumulate).
        for node in &mut self.nodes {
            if !node.is_leaf() {
                node.grad = None;
            }
        }
        self.nodes[loss].grad = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            if self.nodes[id].grad.is_none() {
                continue;
            }
            if barriers.contains(&id) {
                if let Some(g) = self.nodes[id].grad.as_mut() {
                    g.fill(0.0);
                }
                continue;
            }
            if self.nodes[id].is_leaf() {
                continue;
            }
            self.dispatch_vjp(id);
        }
        Ok(())
    }

    fn dispatch_vjp(&mut self, id: NodeId) {
        let flip_relu = self.relu_backward_sign_flip;
        let (before, rest) = self.nodes.split_at_mut(id);
        let node = &rest[0];
        let dy = node
            .grad
            .as_deref()
            .expect("dispatch_vjp called without upstream gradient");
        let input_ids = node.inputs.clone();

        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                for k in 0..2 {
                    if before[input_ids[k]].needs_grad {
                        let g = ensure_grad(&mut before[input_ids[k]]);
                        axpy(1.0, dy, g);
                    }
                }
            }
            Op::Sub => {
                if before[input_ids[0]].needs_grad {
                    axpy(1.0, dy, ensure_grad(&mut before[input_ids[0]]));
                }
                if before[input_ids[1]].needs_grad {
                    axpy(-1.0, dy, ensure_grad(&mut before[input_ids[1]]));
                }
            }
            Op::Square => {
                if before[input_ids[0]].needs_grad {
                    ensure_grad(&mut before[input_ids[0]]);
                    let x = std::mem::take(&mut before[input_ids[0]].values);
                    {
                        let g = before[input_ids[0]].grad.as_mut().unwrap();
                        for ((g, &x), &d) in g.iter_mut().zip(&x).zip(dy) {
                            *g += 2.0 * x * d;
                        }
                    }
                    before[input_ids[0]].values = x;
                }
            }
            Op::AbsDiff => {
                let sign: Vec<f64> = {
                    let a = &before[input_ids[0]].values;
                    let b = &before[input_ids[1]].values;
                    a.iter()
                        .zip(b.iter())
                        .map(|(&x, &y)| (x - y).signum() * f64::from((x - y) != 0.0))
                        .collect()
                };
                if before[input_ids[0]].needs_grad {
                    let g = ensure_grad(&mut before[input_ids[0]]);
                    for ((g, &s), &d) in g.iter_mut().zip(&sign).zip(dy) {
                        *g += s * d;
                    }
                }
                if before[input_ids[1]].needs_grad {
                    let g = ensure_grad(&mut before[input_ids[1]]);
                    for ((g, &s), &d) in g.iter_mut().zip(&sign).zip(dy) {
                        *g -= s * d;
                    }
                }
            }
            Op::Scale { factor } => {
                if before[input_ids[0]].needs_grad {
                    axpy(*factor, dy, ensure_grad(&mut before[input_ids[0]]));
                }
            }
            Op::ScaleRows { weights } => {
                if before[input_ids[0]].needs_grad {
                    let row = dy.len() / weights.len();
                    let g = ensure_grad(&mut before[input_ids[0]]);
                    for (r, &w) in weights.iter().enumerate() {
                        axpy(w, &dy[r * row..(r + 1) * row], &mut g[r * row..(r + 1) * row]);
                    }
                }
            }
            Op::GatherRows { indices } => {
                if before[input_ids[0]].needs_grad {
                    let row = dy.len() / indices.len().max(1);
                    let g = ensure_grad(&mut before[input_ids[0]]);
                    for (m, &src) in indices.iter().enumerate() {
                        axpy(1.0, &dy[m * row..(m + 1) * row], &mut g[src * row..(src + 1) * row]);
                    }
                }
            }
            Op::Sum => {
                if before[input_ids[0]].needs_grad {
                    let d = dy[0];
                    let g = ensure_grad(&mut before[input_ids[0]]);
                    for v in g.iter_mut() {
                        *v += d;
                    }
                }
            }
            Op::SumSquares => {
                if before[input_ids[0]].needs_grad {
                    let d = dy[0];
                    ensure_grad(&mut before[input_ids[0]]);
                    let x = std::mem::take(&mut before[input_ids[0]].values);
                    {
                        let g = before[input_ids[0]].grad.as_mut().unwrap();
                        for (g, &x) in g.iter_mut().zip(&x) {
                            *g += 2.0 * x * d;
                        }
                    }
                    before[input_ids[0]].values = x;
                }
            }
            Op::Reshape => {
                if before[input_ids[0]].needs_grad {
                    axpy(1.0, dy, ensure_grad(&mut before[input_ids[0]]));
                }
            }
            Op::Relu => {
                if before[input_ids[0]].needs_grad {
                    let slope = if flip_relu { -1.0 } else { 1.0 };
                    ensure_grad(&mut before[input_ids[0]]);
                    let x = std::mem::take(&mut before[input_ids[0]].values);
                    {
                        let g = before[input_ids[0]].grad.as_mut().unwrap();
                        for ((g, &x), &d) in g.iter_mut().zip(&x).zip(dy) {
                            if x > 0.0 {
                                *g += slope * d;
                            }
                        }
                    }
                    before[input_ids[0]].values = x;
                }
            }
            Op::Dropout { mask } => {
                if before[input_ids[0]].needs_grad {
                    let g = ensure_grad(&mut before[input_ids[0]]);
                    for ((g, &m), &d) in g.iter_mut().zip(mask).zip(dy) {
                        *g += m * d;
                    }
                }
            }
            Op::Dense => {
                let (x_id, w_id, b_id) = (input_ids[0], input_ids[1], input_ids[2]);
                let n = before[x_id].shape[0];
                let i = before[x_id].shape[1];
                let o = before[w_id].shape[0];
                if before[x_id].needs_grad {
                    let w = std::mem::take(&mut before[w_id].values);
                    {
                        let g = ensure_grad(&mut before[x_id]);
                        gemm::dgemm(n, o, i, 1.0, dy, &w, 1.0, g);
                    }
                    before[w_id].values = w;
                }
                if before[w_id].needs_grad {
                    let x = std::mem::take(&mut before[x_id].values);
                    {
                        let g = ensure_grad(&mut before[w_id]);
                        gemm::dgemm_at(o, n, i, 1.0, dy, &x, 1.0, g);
                    }
                    before[x_id].values = x;
                }
                if before[b_id].needs_grad {
                    let g = ensure_grad(&mut before[b_id]);
                    for r in 0..n {
                        axpy(1.0, &dy[r * o..(r + 1) * o], g);
                    }
                }
            }
            Op::Conv2d { geom } => {
                let geom = *geom;
                let (x_id, w_id, b_id) = (input_ids[0], input_ids[1], input_ids[2]);
                let x = std::mem::take(&mut before[x_id].values);
                let w = std::mem::take(&mut before[w_id].values);
                {
                    let want_dx = before[x_id].needs_grad;
                    let want_dw = before[w_id].needs_grad;
                    let want_db = before[b_id].needs_grad;
                    if want_dx {
                        ensure_grad(&mut before[x_id]);
                    }
                    if want_dw {
                        ensure_grad(&mut before[w_id]);
                    }
                    if want_db {
                        ensure_grad(&mut before[b_id]);
                    }
                    // Split the borrow: collect raw parts sequentially.
                    let mut dx = if want_dx {
                        Some(std::mem::take(before[x_id].grad.as_mut().unwrap()))
                    } else {
                        None
                    };
                    let mut dw = if want_dw {
                        Some(std::mem::take(before[w_id].grad.as_mut().unwrap()))
                    } else {
                        None
                    };
                    let mut db = if want_db {
                        Some(std::mem::take(before[b_id].grad.as_mut().unwrap()))
                    } else {
                        None
                    };
                    conv::conv2d_backward(
                        &geom,
                        &x,
                        &w,
                        dy,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    if let Some(v) = dx {
                        before[x_id].grad = Some(v);
                    }
                    if let Some(v) = dw {
                        before[w_id].grad = Some(v);
                    }
                    if let Some(v) = db {
                        before[b_id].grad = Some(v);
                    }
                }
                before[x_id].values = x;
                before[w_id].values = w;
            }
            Op::MaxPool2d { indices } => {
                if before[input_ids[0]].needs_grad {
                    let g = ensure_grad(&mut before[input_ids[0]]);
                    conv::maxpool2x2_backward(indices, dy, g);
                }
            }
            Op::SpatialSoftmax => {
                if before[input_ids[0]].needs_grad {
                    let y = &node.values;
                    let hw = node.shape[2] * node.shape[3];
                    let slices = node.shape[0] * node.shape[1];
                    let mut dx = vec![0.0; y.len()];
                    for s in 0..slices {
                        let y_s = &y[s * hw..(s + 1) * hw];
                        let dy_s = &dy[s * hw..(s + 1) * hw];
                        let dot: f64 = y_s.iter().zip(dy_s).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &dv) in
                            dx[s * hw..(s + 1) * hw].iter_mut().zip(y_s).zip(dy_s)
                        {
                            *d = yv * (dv - dot);
                        }
                    }
                    axpy(1.0, &dx, ensure_grad(&mut before[input_ids[0]]));
                }
            }
            Op::SoftArgmax { beta, probs } => {
                if before[input_ids[0]].needs_grad {
                    let (h, w) = {
                        let s = &before[input_ids[0]].shape;
                        (s[2], s[3])
                    };
                    let hw = h * w;
                    let slices = probs.len() / hw;
                    let beta = *beta;
                    let out = &node.values;
                    let mut dx = vec![0.0; probs.len()];
                    for s in 0..slices {
                        let p = &probs[s * hw..(s + 1) * hw];
                        let (gx, gy) = (dy[s * 2], dy[s * 2 + 1]);
                        let (mx, my) = (out[s * 2], out[s * 2 + 1]);
                        let d = &mut dx[s * hw..(s + 1) * hw];
                        for i in 0..h {
                            for j in 0..w {
                                d[i * w + j] = beta
                                    * p[i * w + j]
                                    * ((j as f64 - mx) * gx + (i as f64 - my) * gy);
                            }
                        }
                    }
                    axpy(1.0, &dx, ensure_grad(&mut before[input_ids[0]]));
                }
            }
            Op::SoftmaxXent { labels, probs } => {
                if before[input_ids[0]].needs_grad {
                    let classes = probs.len() / labels.len();
                    let mut dx = probs.clone();
                    for (n, &lab) in labels.iter().enumerate() {
                        let row = &mut dx[n * classes..(n + 1) * classes];
                        row[lab] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= dy[n];
                        }
                    }
                    axpy(1.0, &dx, ensure_grad(&mut before[input_ids[0]]));
                }
            }
            Op::SpatialXent { targets, probs } => {
                if before[input_ids[0]].needs_grad {
                    let hw = probs.len() / targets.len();
                    let mut dx = probs.clone();
                    for (s, &t) in targets.iter().enumerate() {
                        let row = &mut dx[s * hw..(s + 1) * hw];
                        row[t] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= dy[s];
                        }
                    }
                    axpy(1.0, &dx, ensure_grad(&mut before[input_ids[0]]));
                }
            }
            Op::AffineCoords { mats } => {
                if before[input_ids[0]].needs_grad {
                    let k = node.shape[1];
                    let g = ensure_grad(&mut before[input_ids[0]]);
                    for (n, m) in mats.iter().enumerate() {
                        let [a, b, _, c, d, _] = *m;
                        for kk in 0..k {
                            let o = (n * k + kk) * 2;
                            g[o] += a * dy[o] + c * dy[o + 1];
                            g[o + 1] += b * dy[o] + d * dy[o + 1];
                        }
                    }
                }
            }
        }
    }
}

// Sized from the shape, not `values`: several VJPs temporarily take the
// value buffer out of the tensor before requesting its gradient.
fn ensure_grad(t: &mut Tensor) -> &mut Vec<f64> {
    if t.grad.is_none() {
        t.grad = Some(vec![0.0; t.shape.iter().product()]);
    }
    t.grad.as_mut().unwrap()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (y, &x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}
