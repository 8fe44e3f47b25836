//! Forward builders: validate shapes, compute values eagerly, record a node.

use rand::Rng;

use super::conv::{self, ConvGeom, Padding};
use super::gemm;
use super::graph::{Graph, Mode, NodeId, Op};
use crate::error::{Error, Result};

impl Graph {
    /// Cross-correlation (no kernel flip) of NCHW input with FCKK kernel.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let geom = ConvGeom::resolve(
            &self.nodes[input].shape,
            &self.nodes[kernel].shape,
            stride,
            padding,
        )?;
        if self.nodes[bias].shape != [geom.f] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "bias shape {:?} does not match {} filters",
                    self.nodes[bias].shape, geom.f
                ),
            });
        }
        let mut out = vec![0.0; geom.n * geom.f * geom.out_h * geom.out_w];
        conv::conv2d_forward(
            &geom,
            &self.nodes[input].values,
            &self.nodes[kernel].values,
            &self.nodes[bias].values,
            &mut out,
        );
        Ok(self.push(
            geom.out_shape(),
            out,
            Op::Conv2d { geom },
            vec![input, kernel, bias],
            false,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let values = self.nodes[x].values.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.nodes[x].shape.clone();
        self.push(shape, values, Op::Relu, vec![x], false)
    }

    /// 2x2 stride-2 max pooling; gradient routes to the argmax element,
    /// ties broken by first (row-major) index.
    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.nodes[x].shape.clone();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::ShapeMismatch {
                op: "maxpool2d",
                detail: format!("expected NCHW with H,W >= 2, got {s:?}"),
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![0.0; n * c * (h / 2) * (w / 2)];
        let mut indices = Vec::new();
        conv::maxpool2x2_forward(n, c, h, w, &self.nodes[x].values, &mut out, &mut indices);
        Ok(self.push(
            vec![n, c, h / 2, w / 2],
            out,
            Op::MaxPool2d { indices },
            vec![x],
            false,
        ))
    }

    /// y = x . w^T + b with x: [N, In], w: [Out, In], b: [Out].
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws) = (&self.nodes[x].shape, &self.nodes[w].shape);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "fully_connected",
                detail: format!("input {xs:?} incompatible with weight {ws:?}"),
            });
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        if self.nodes[b].shape != [o] {
            return Err(Error::ShapeMismatch {
                op: "fully_connected",
                detail: format!("bias {:?} != [{o}]", self.nodes[b].shape),
            });
        }
        let mut out = vec![0.0; n * o];
        gemm::dgemm_bt(
            n,
            i,
            o,
            1.0,
            &self.nodes[x].values,
            &self.nodes[w].values,
            0.0,
            &mut out,
        );
        for r in 0..n {
            for (v, bv) in out[r * o..(r + 1) * o].iter_mut().zip(&self.nodes[b].values) {
                *v += bv;
            }
        }
        Ok(self.push(vec![n, o], out, Op::Dense, vec![x, w, b], false))
    }

    /// Inverted dropout: scales kept activations by 1/(1-p) at train time so
    /// evaluation is a no-op (the node is not even recorded in eval mode).
    pub fn dropout(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.nodes[x].numel())
            .map(|_| {
                if self.rng.gen_range(0.0..1.0) < p {
                    0.0
                } else {
                    scale
                }
            })
            .collect();
        let values = self.nodes[x]
            .values
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.nodes[x].shape.clone();
        Ok(self.push(shape, values, Op::Dropout { mask }, vec![x], false))
    }

    /// Per-(n,k) spatial softmax of an NKHW map stack, max-subtracted for
    /// stability. Every output slice sums to 1.
    pub fn spatial_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.nodes[x].shape.clone();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "spatial_softmax",
                detail: format!("expected NKHW, got {s:?}"),
            });
        }
        if self.nodes[x].values.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("spatial_softmax input".into()));
        }
        let hw = s[2] * s[3];
        let mut out = vec![0.0; self.nodes[x].numel()];
        for (slice, o) in self.nodes[x]
            .values
            .chunks_exact(hw)
            .zip(out.chunks_exact_mut(hw))
        {
            softmax_slice(slice, 1.0, o);
        }
        Ok(self.push(s, out, Op::SpatialSoftmax, vec![x], false))
    }

    /// Soft-argmax: expected pixel coordinate under softmax(beta * map), per
    /// map. Output is [N, K, 2] as (x, y) = (column, row), origin top-left,
    /// integer pixel centers. Always lands inside the map (it is a convex
    /// combination of pixel coordinates).
    pub fn soft_argmax(&mut self, x: NodeId, beta: f64) -> Result<NodeId> {
        if beta <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "soft_argmax temperature must be positive, got {beta}"
            )));
        }
        let s = self.nodes[x].shape.clone();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "soft_argmax",
                detail: format!("expected NKHW, got {s:?}"),
            });
        }
        let (n, k, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let mut probs = vec![0.0; self.nodes[x].numel()];
        for (slice, p) in self.nodes[x]
            .values
            .chunks_exact(hw)
            .zip(probs.chunks_exact_mut(hw))
        {
            softmax_slice(slice, beta, p);
        }
        let mut out = vec![0.0; n * k * 2];
        for (sl, p) in probs.chunks_exact(hw).enumerate() {
            let mut x_mean = 0.0;
            let mut y_mean = 0.0;
            for i in 0..h {
                for (j, &pv) in p[i * w..(i + 1) * w].iter().enumerate() {
                    x_mean += pv * j as f64;
                    y_mean += pv * i as f64;
                }
            }
            out[sl * 2] = x_mean;
            out[sl * 2 + 1] = y_mean;
        }
        Ok(self.push(
            vec![n, k, 2],
            out,
            Op::SoftArgmax { beta, probs },
            vec![x],
            false,
        ))
    }

    /// Per-sample cross-entropy of softmaxed logits: out[n] = -log p(label_n).
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.nodes[logits].shape.clone();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("logits {s:?} vs {} labels", labels.len()),
            });
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = vec![0.0; self.nodes[logits].numel()];
        let mut out = vec![0.0; labels.len()];
        for (n, (row, p)) in self.nodes[logits]
            .values
            .chunks_exact(classes)
            .zip(probs.chunks_exact_mut(classes))
            .enumerate()
        {
            let lse = softmax_slice(row, 1.0, p);
            out[n] = lse - row[labels[n]];
        }
        Ok(self.push(
            vec![labels.len()],
            out,
            Op::SoftmaxXent {
                labels: labels.to_vec(),
                probs,
            },
            vec![logits],
            false,
        ))
    }

    /// Per-map spatial softmax cross-entropy against a one-hot target pixel:
    /// out[n,k] = -log softmax(map_{n,k})[target_{n,k}].
    pub fn spatial_softmax_cross_entropy(
        &mut self,
        maps: NodeId,
        targets: &[usize],
    ) -> Result<NodeId> {
        let s = self.nodes[maps].shape.clone();
        if s.len() != 4 || s[0] * s[1] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "spatial_softmax_cross_entropy",
                detail: format!("maps {s:?} vs {} targets", targets.len()),
            });
        }
        let hw = s[2] * s[3];
        if let Some(&bad) = targets.iter().find(|&&t| t >= hw) {
            return Err(Error::InvalidArgument(format!(
                "target pixel {bad} out of range for {hw} pixels"
            )));
        }
        let mut probs = vec![0.0; self.nodes[maps].numel()];
        let mut out = vec![0.0; targets.len()];
        for (i, (slice, p)) in self.nodes[maps]
            .values
            .chunks_exact(hw)
            .zip(probs.chunks_exact_mut(hw))
            .enumerate()
        {
            let lse = softmax_slice(slice, 1.0, p);
            out[i] = lse - slice[targets[i]];
        }
        Ok(self.push(
            vec![s[0], s[1]],
            out,
            Op::SpatialXent {
                targets: targets.to_vec(),
                probs,
            },
            vec![maps],
            false,
        ))
    }

    /// Applies one 2x3 affine matrix per sample to [N, K, 2] (x, y) coords.
    /// Differentiable w.r.t. the coordinates (constant Jacobian).
    pub fn affine_coords(&mut self, coords: NodeId, mats: &[[f64; 6]]) -> Result<NodeId> {
        let s = self.nodes[coords].shape.clone();
        if s.len() != 3 || s[2] != 2 || s[0] != mats.len() {
            return Err(Error::ShapeMismatch {
                op: "affine_coords",
                detail: format!("coords {s:?} vs {} transforms", mats.len()),
            });
        }
        let k = s[1];
        let mut out = vec![0.0; self.nodes[coords].numel()];
        for (n, m) in mats.iter().enumerate() {
            let [a, b, tx, c, d, ty] = *m;
            for kk in 0..k {
                let o = (n * k + kk) * 2;
                let (x, y) = (self.nodes[coords].values[o], self.nodes[coords].values[o + 1]);
                out[o] = a * x + b * y + tx;
                out[o + 1] = c * x + d * y + ty;
            }
        }
        Ok(self.push(
            s,
            out,
            Op::AffineCoords {
                mats: mats.to_vec(),
            },
            vec![coords],
            false,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_pair("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_pair("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn abs_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_pair("abs_diff", a, b, Op::AbsDiff, |x, y| (x - y).abs())
    }

    fn elementwise_pair(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::ShapeMismatch {
                op: name,
                detail: format!(
                    "{:?} vs {:?}",
                    self.nodes[a].shape, self.nodes[b].shape
                ),
            });
        }
        let values = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(shape, values, op, vec![a, b], false))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let values = self.nodes[x].values.iter().map(|&v| v * v).collect();
        let shape = self.nodes[x].shape.clone();
        self.push(shape, values, Op::Square, vec![x], false)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let values = self.nodes[x].values.iter().map(|&v| v * factor).collect();
        let shape = self.nodes[x].shape.clone();
        self.push(shape, values, Op::Scale { factor }, vec![x], false)
    }

    /// Multiplies each leading-dimension row by its weight (broadcast over
    /// the remaining dimensions). Used for per-sample loss masks.
    pub fn scale_rows(&mut self, x: NodeId, weights: &[f64]) -> Result<NodeId> {
        let s = self.nodes[x].shape.clone();
        if s.is_empty() || s[0] != weights.len() {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                detail: format!("{s:?} vs {} weights", weights.len()),
            });
        }
        let row = self.nodes[x].numel() / weights.len();
        let mut values = self.nodes[x].values.clone();
        for (r, &w) in weights.iter().enumerate() {
            for v in &mut values[r * row..(r + 1) * row] {
                *v *= w;
            }
        }
        Ok(self.push(
            s,
            values,
            Op::ScaleRows {
                weights: weights.to_vec(),
            },
            vec![x],
            false,
        ))
    }

    /// Selects rows along the leading dimension.
    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let s = self.nodes[x].shape.clone();
        if s.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                detail: "input must have a leading dimension".into(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(Error::InvalidArgument(format!(
                "row index {bad} out of range for {} rows",
                s[0]
            )));
        }
        let row = self.nodes[x].numel() / s[0];
        let mut values = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            values.extend_from_slice(&self.nodes[x].values[i * row..(i + 1) * row]);
        }
        let mut shape = s.clone();
        shape[0] = indices.len();
        Ok(self.push(
            shape,
            values,
            Op::GatherRows {
                indices: indices.to_vec(),
            },
            vec![x],
            false,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.nodes[x].values.iter().sum();
        self.push(vec![1], vec![total], Op::Sum, vec![x], false)
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.nodes[x].values.iter().map(|&v| v * v).sum();
        self.push(vec![1], vec![total], Op::SumSquares, vec![x], false)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.nodes[x].numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.nodes[x].shape),
            });
        }
        let values = self.nodes[x].values.clone();
        Ok(self.push(shape, values, Op::Reshape, vec![x], false))
    }

    /// Mean over all elements, as a scalar node.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }
}

/// Writes softmax(scale * slice) into `out` (max-subtracted); returns
/// log-sum-exp(scale * slice) for cross-entropy use.
fn softmax_slice(slice: &[f64], scale: f64, out: &mut [f64]) -> f64 {
    let m = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max) * scale;
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(slice) {
        let e = (v * scale - m).exp();
        *o = e;
        z += e;
    }
    let inv = 1.0 / z;
    for o in out.iter_mut() {
        *o *= inv;
    }
    z.ln() + m
}
