//! Reverse-mode gradient tape.
//!
//! Operations append nodes to the tape and compute their outputs eagerly.
//! Node indices are topologically ordered by construction, so the backward
//! pass is a single reverse sweep. `stop_gradient` and the straight-through
//! estimator control where gradient flows: `stop_gradient` blocks it entirely,
//! `straight_through` forwards the quantized value while routing the incoming
//! gradient to the pre-quantization input bit-for-bit.

use ndarray::ArrayView2;

use super::ops;
use super::{AutodiffError, Scalar};

/// Handle to a tensor on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

enum Op<F: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    Sum(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        spec: ConvSpec,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        spec: ConvSpec,
    },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        /// (mean, 1/std) per (batch item, group), saved by the forward pass.
        stats: Vec<(F, F)>,
    },
    MseLoss {
        a: NodeId,
        b: NodeId,
    },
    StopGradient(NodeId),
    StraightThrough {
        ze: NodeId,
    },
    GatherLatents {
        table: NodeId,
        indices: Vec<usize>,
        batch: usize,
        h: usize,
        w: usize,
    },
}

struct Node<F: Scalar> {
    shape: Vec<usize>,
    values: Vec<F>,
    grad: Option<Vec<F>>,
    needs_grad: bool,
    op: Op<F>,
}

/// Define-by-run computation graph with reverse-mode differentiation.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn values(&self, id: NodeId) -> &[F] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient accumulated by the last `backward` call, if any reached `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<F, AutodiffError> {
        if numel(&self.nodes[id.0].shape) != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: self.nodes[id.0].shape.to_vec(),
            });
        }
        Ok(self.nodes[id.0].values[0])
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<F>, needs_grad: bool, op: Op<F>) -> NodeId {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(
        &mut self,
        values: Vec<F>,
        shape: &[usize],
        requires_grad: bool,
    ) -> Result<NodeId, AutodiffError> {
        if numel(shape) != values.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "leaf",
                detail: format!(
                    "shape {:?} holds {} elements but {} values were given",
                    shape,
                    numel(shape),
                    values.len()
                ),
            });
        }
        Ok(self.push(shape.to_vec(), values, requires_grad, Op::Leaf))
    }

    pub fn scalar(&mut self, value: F) -> NodeId {
        self.push(vec![1], vec![value], false, Op::Leaf)
    }

    fn expect_same_shape(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(), AutodiffError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa == sb {
            return Ok(());
        }
        if sa.len() == sb.len() {
            let dim = sa.iter().zip(sb.iter()).position(|(x, y)| x != y).unwrap();
            return Err(AutodiffError::DimMismatch {
                op,
                dim,
                detail: format!("left has extent {}, right has extent {}", sa[dim], sb[dim]),
            });
        }
        Err(AutodiffError::ShapeMismatch {
            op,
            what: "operands",
            expected: sa.to_vec(),
            got: sb.to_vec(),
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.expect_same_shape("add", a, b)?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(self.nodes[a.0].shape.clone(), values, needs, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.expect_same_shape("mul", a, b)?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(self.nodes[a.0].shape.clone(), values, needs, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, k: F) -> NodeId {
        let values = self.nodes[a.0].values.iter().map(|&x| x * k).collect();
        let needs = self.nodes[a.0].needs_grad;
        self.push(self.nodes[a.0].shape.clone(), values, needs, Op::Scale(a, k))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let mut acc = F::zero();
        for &v in &self.nodes[a.0].values {
            acc = acc + v;
        }
        let needs = self.nodes[a.0].needs_grad;
        self.push(vec![1], vec![acc], needs, Op::Sum(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let values = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| if x > F::zero() { x } else { F::zero() })
            .collect();
        let needs = self.nodes[a.0].needs_grad;
        self.push(self.nodes[a.0].shape.clone(), values, needs, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let one = F::one();
        let values = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| one / (one + (-x).exp()))
            .collect();
        let needs = self.nodes[a.0].needs_grad;
        self.push(self.nodes[a.0].shape.clone(), values, needs, Op::Sigmoid(a))
    }

    /// `y = x · wᵀ + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        let bs = self.nodes[b.0].shape.clone();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "linear",
                detail: format!("expected rank-2 input and weight, got {xs:?} and {ws:?}"),
            });
        }
        if xs[1] != ws[1] {
            return Err(AutodiffError::DimMismatch {
                op: "linear",
                dim: 1,
                detail: format!("input features {} vs weight features {}", xs[1], ws[1]),
            });
        }
        if bs != [ws[0]] {
            return Err(AutodiffError::ShapeMismatch {
                op: "linear",
                what: "bias",
                expected: vec![ws[0]],
                got: bs,
            });
        }
        let (n, out) = (xs[0], ws[0]);
        let x_m = ArrayView2::from_shape((n, xs[1]), &self.nodes[x.0].values).expect("x layout");
        let w_m = ArrayView2::from_shape((out, ws[1]), &self.nodes[w.0].values).expect("w layout");
        let mut y = x_m.dot(&w_m.t()).into_raw_vec_and_offset().0;
        for row in y.chunks_mut(out) {
            for (v, &bias) in row.iter_mut().zip(&self.nodes[b.0].values) {
                *v = *v + bias;
            }
        }
        let needs = self.nodes[x.0].needs_grad
            || self.nodes[w.0].needs_grad
            || self.nodes[b.0].needs_grad;
        Ok(self.push(vec![n, out], y, needs, Op::Linear { x, w, b }))
    }

    /// 2-D convolution, `x: [b, c, h, w]`, `w: [o, c, kh, kw]`, `b: [o]`,
    /// symmetric zero padding.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, AutodiffError> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(AutodiffError::InvalidArgument {
                op: "conv2d",
                detail: format!("expected rank-4 input and weight, got {xs:?} and {ws:?}"),
            });
        }
        if xs[1] != ws[1] {
            return Err(AutodiffError::DimMismatch {
                op: "conv2d",
                dim: 1,
                detail: format!("input channels {} vs weight channels {}", xs[1], ws[1]),
            });
        }
        if self.nodes[b.0].shape != [ws[0]] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                what: "bias",
                expected: vec![ws[0]],
                got: self.nodes[b.0].shape.clone(),
            });
        }
        let oh = ops::conv_out_extent(xs[2], ws[2], stride, pad);
        let ow = ops::conv_out_extent(xs[3], ws[3], stride, pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(AutodiffError::InvalidArgument {
                op: "conv2d",
                detail: format!(
                    "kernel {}x{} does not fit input {}x{} with stride {stride}, pad {pad}",
                    ws[2], ws[3], xs[2], xs[3]
                ),
            });
        };
        let spec = ConvSpec { stride, pad };
        let y = ops::conv2d_forward(
            &self.nodes[x.0].values,
            (xs[0], xs[1], xs[2], xs[3]),
            &self.nodes[w.0].values,
            (ws[0], ws[2], ws[3]),
            Some(&self.nodes[b.0].values),
            stride,
            pad,
            (oh, ow),
        );
        let needs = self.nodes[x.0].needs_grad
            || self.nodes[w.0].needs_grad
            || self.nodes[b.0].needs_grad;
        Ok(self.push(
            vec![xs[0], ws[0], oh, ow],
            y,
            needs,
            Op::Conv2d { x, w, b, spec },
        ))
    }

    /// Transpose convolution, the adjoint of [`Tape::conv2d`] with the same
    /// stride and padding. `x: [b, c_in, h, w]`, `w: [c_in, c_out, kh, kw]`.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, AutodiffError> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(AutodiffError::InvalidArgument {
                op: "conv_transpose2d",
                detail: format!("expected rank-4 input and weight, got {xs:?} and {ws:?}"),
            });
        }
        if xs[1] != ws[0] {
            return Err(AutodiffError::DimMismatch {
                op: "conv_transpose2d",
                dim: 1,
                detail: format!("input channels {} vs weight channels {}", xs[1], ws[0]),
            });
        }
        if self.nodes[b.0].shape != [ws[1]] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv_transpose2d",
                what: "bias",
                expected: vec![ws[1]],
                got: self.nodes[b.0].shape.clone(),
            });
        }
        let oh = ops::conv_transpose_out_extent(xs[2], ws[2], stride, pad);
        let ow = ops::conv_transpose_out_extent(xs[3], ws[3], stride, pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(AutodiffError::InvalidArgument {
                op: "conv_transpose2d",
                detail: format!(
                    "output extent empty for input {}x{} with kernel {}x{}, stride {stride}, pad {pad}",
                    xs[2], xs[3], ws[2], ws[3]
                ),
            });
        };
        let spec = ConvSpec { stride, pad };
        // Forward = input-gradient of a conv whose input is [b, c_out, oh, ow].
        let mut y = ops::conv2d_backward_data(
            &self.nodes[x.0].values,
            (xs[0], ws[1], oh, ow),
            &self.nodes[w.0].values,
            (ws[0], ws[2], ws[3]),
            stride,
            pad,
            (xs[2], xs[3]),
        );
        let span = oh * ow;
        for item in 0..xs[0] {
            for ch in 0..ws[1] {
                let bias = self.nodes[b.0].values[ch];
                let base = (item * ws[1] + ch) * span;
                for v in &mut y[base..base + span] {
                    *v = *v + bias;
                }
            }
        }
        let needs = self.nodes[x.0].needs_grad
            || self.nodes[w.0].needs_grad
            || self.nodes[b.0].needs_grad;
        Ok(self.push(
            vec![xs[0], ws[1], oh, ow],
            y,
            needs,
            Op::ConvTranspose2d { x, w, b, spec },
        ))
    }

    /// Group normalization over `x: [b, c, h, w]` with per-channel affine
    /// parameters. `groups` must divide the channel count.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: F,
    ) -> Result<NodeId, AutodiffError> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 {
            return Err(AutodiffError::InvalidArgument {
                op: "group_norm",
                detail: format!("expected rank-4 input, got {xs:?}"),
            });
        }
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if groups == 0 || c % groups != 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "group_norm",
                detail: format!("{groups} groups do not divide {c} channels"),
            });
        }
        if self.nodes[gamma.0].shape != [c] || self.nodes[beta.0].shape != [c] {
            return Err(AutodiffError::ShapeMismatch {
                op: "group_norm",
                what: "affine parameters",
                expected: vec![c],
                got: self.nodes[gamma.0].shape.clone(),
            });
        }
        let per_group = c / groups;
        let plane = h * w;
        let group_len = per_group * plane;
        let mut values = vec![F::zero(); bsz * c * plane];
        let mut stats = Vec::with_capacity(bsz * groups);
        let xv = &self.nodes[x.0].values;
        let gv = &self.nodes[gamma.0].values;
        let bv = &self.nodes[beta.0].values;
        let m = F::from_f64(group_len as f64);
        for item in 0..bsz {
            for g in 0..groups {
                let start = item * c * plane + g * group_len;
                let chunk = &xv[start..start + group_len];
                let mut mean = F::zero();
                for &v in chunk {
                    mean = mean + v;
                }
                mean = mean / m;
                let mut var = F::zero();
                for &v in chunk {
                    let d = v - mean;
                    var = var + d * d;
                }
                var = var / m;
                let rstd = F::one() / (var + eps).sqrt();
                stats.push((mean, rstd));
                for ch_off in 0..per_group {
                    let ch = g * per_group + ch_off;
                    let base = start + ch_off * plane;
                    for i in 0..plane {
                        let xhat = (xv[base + i] - mean) * rstd;
                        values[base + i] = gv[ch] * xhat + bv[ch];
                    }
                }
            }
        }
        let needs = self.nodes[x.0].needs_grad
            || self.nodes[gamma.0].needs_grad
            || self.nodes[beta.0].needs_grad;
        Ok(self.push(
            xs,
            values,
            needs,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
        ))
    }

    /// Mean squared error over all elements; returns a scalar node.
    pub fn mse_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.expect_same_shape("mse_loss", a, b)?;
        let n = F::from_f64(self.nodes[a.0].values.len() as f64);
        let mut acc = F::zero();
        for (&x, &y) in self.nodes[a.0].values.iter().zip(&self.nodes[b.0].values) {
            let d = x - y;
            acc = acc + d * d;
        }
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(vec![1], vec![acc / n], needs, Op::MseLoss { a, b }))
    }

    /// Forwards values unchanged and blocks all gradient flow into `a`.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let values = self.nodes[a.0].values.clone();
        self.push(
            self.nodes[a.0].shape.clone(),
            values,
            false,
            Op::StopGradient(a),
        )
    }

    /// Straight-through estimator: forward value is `zq`, the incoming
    /// gradient is copied to `ze` unchanged, and nothing reaches `zq`.
    pub fn straight_through(&mut self, ze: NodeId, zq: NodeId) -> Result<NodeId, AutodiffError> {
        self.expect_same_shape("straight_through", ze, zq)?;
        let values = self.nodes[zq.0].values.clone();
        let needs = self.nodes[ze.0].needs_grad;
        Ok(self.push(
            self.nodes[ze.0].shape.clone(),
            values,
            needs,
            Op::StraightThrough { ze },
        ))
    }

    /// Assemble `[b, d, h, w]` latents from codebook rows: position `(i, j)`
    /// of batch item `n` receives row `indices[(n*h + i)*w + j]` of `table`.
    /// The backward pass scatter-adds into the table rows.
    pub fn gather_latents(
        &mut self,
        table: NodeId,
        indices: &[usize],
        batch: usize,
        h: usize,
        w: usize,
    ) -> Result<NodeId, AutodiffError> {
        let ts = self.nodes[table.0].shape.clone();
        if ts.len() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_latents",
                detail: format!("expected rank-2 table, got {ts:?}"),
            });
        }
        if indices.len() != batch * h * w {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_latents",
                detail: format!(
                    "{} indices for {} spatial positions",
                    indices.len(),
                    batch * h * w
                ),
            });
        }
        let (k, d) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_latents",
                detail: format!("index {bad} out of range for {k} codebook rows"),
            });
        }
        let plane = h * w;
        let tv = &self.nodes[table.0].values;
        let mut values = vec![F::zero(); batch * d * plane];
        for n in 0..batch {
            for p in 0..plane {
                let row = indices[n * plane + p] * d;
                for ch in 0..d {
                    values[(n * d + ch) * plane + p] = tv[row + ch];
                }
            }
        }
        let needs = self.nodes[table.0].needs_grad;
        Ok(self.push(
            vec![batch, d, h, w],
            values,
            needs,
            Op::GatherLatents {
                table,
                indices: indices.to_vec(),
                batch,
                h,
                w,
            },
        ))
    }

    fn accumulate(&mut self, id: NodeId, contribution: Vec<F>) {
        match &mut self.nodes[id.0].grad {
            Some(g) => {
                for (dst, src) in g.iter_mut().zip(contribution) {
                    *dst = *dst + src;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Propagate gradients from a scalar `loss` to every node that needs
    /// them. `requires_grad` leaves unreachable from the loss receive zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), AutodiffError> {
        let loss_shape = &self.nodes[loss.0].shape;
        if numel(loss_shape) != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: loss_shape.to_vec(),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.clone() else {
                continue;
            };
            self.propagate(i, &g);
        }
        for node in &mut self.nodes {
            if node.needs_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![F::zero(); node.values.len()]);
            }
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[F]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].needs_grad {
                    self.accumulate(a, g.to_vec());
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].needs_grad {
                    let contrib = g
                        .iter()
                        .zip(&self.nodes[b.0].values)
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    self.accumulate(a, contrib);
                }
                if self.nodes[b.0].needs_grad {
                    let contrib = g
                        .iter()
                        .zip(&self.nodes[a.0].values)
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    self.accumulate(b, contrib);
                }
            }
            Op::Scale(a, k) => {
                let (a, k) = (*a, *k);
                if self.nodes[a.0].needs_grad {
                    let contrib = g.iter().map(|&gv| gv * k).collect();
                    self.accumulate(a, contrib);
                }
            }
            Op::Sum(a) => {
                let a = *a;
                if self.nodes[a.0].needs_grad {
                    let contrib = vec![g[0]; self.nodes[a.0].values.len()];
                    self.accumulate(a, contrib);
                }
            }
            Op::Relu(a) => {
                let a = *a;
                if self.nodes[a.0].needs_grad {
                    let contrib = g
                        .iter()
                        .zip(&self.nodes[a.0].values)
                        .map(|(&gv, &xv)| if xv > F::zero() { gv } else { F::zero() })
                        .collect();
                    self.accumulate(a, contrib);
                }
            }
            Op::Sigmoid(a) => {
                let a = *a;
                if self.nodes[a.0].needs_grad {
                    let contrib = g
                        .iter()
                        .zip(&self.nodes[i].values)
                        .map(|(&gv, &yv)| gv * yv * (F::one() - yv))
                        .collect();
                    self.accumulate(a, contrib);
                }
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let (n, out) = (self.nodes[x.0].shape[0], self.nodes[w.0].shape[0]);
                let feat = self.nodes[x.0].shape[1];
                let g_m = ArrayView2::from_shape((n, out), g).expect("grad layout");
                if self.nodes[x.0].needs_grad {
                    let w_m = ArrayView2::from_shape((out, feat), &self.nodes[w.0].values)
                        .expect("w layout");
                    let dx = g_m.dot(&w_m).into_raw_vec_and_offset().0;
                    self.accumulate(x, dx);
                }
                if self.nodes[w.0].needs_grad {
                    let x_m = ArrayView2::from_shape((n, feat), &self.nodes[x.0].values)
                        .expect("x layout");
                    let dw = g_m.t().dot(&x_m).into_raw_vec_and_offset().0;
                    self.accumulate(w, dw);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![F::zero(); out];
                    for row in g.chunks(out) {
                        for (dst, &gv) in db.iter_mut().zip(row) {
                            *dst = *dst + gv;
                        }
                    }
                    self.accumulate(b, db);
                }
            }
            Op::Conv2d { x, w, b, spec } => {
                let (x, w, b, spec) = (*x, *w, *b, *spec);
                let xs = self.nodes[x.0].shape.clone();
                let ws = self.nodes[w.0].shape.clone();
                let os = self.nodes[i].shape.clone();
                let dims = (xs[0], xs[1], xs[2], xs[3]);
                let wk = (ws[0], ws[2], ws[3]);
                let out_hw = (os[2], os[3]);
                if self.nodes[x.0].needs_grad {
                    let dx = ops::conv2d_backward_data(
                        g,
                        dims,
                        &self.nodes[w.0].values,
                        wk,
                        spec.stride,
                        spec.pad,
                        out_hw,
                    );
                    self.accumulate(x, dx);
                }
                if self.nodes[w.0].needs_grad || self.nodes[b.0].needs_grad {
                    let (dw, db) = ops::conv2d_backward_weight(
                        g,
                        &self.nodes[x.0].values,
                        dims,
                        wk,
                        spec.stride,
                        spec.pad,
                        out_hw,
                    );
                    if self.nodes[w.0].needs_grad {
                        self.accumulate(w, dw);
                    }
                    if self.nodes[b.0].needs_grad {
                        self.accumulate(b, db);
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, spec } => {
                let (x, w, b, spec) = (*x, *w, *b, *spec);
                let xs = self.nodes[x.0].shape.clone();
                let ws = self.nodes[w.0].shape.clone();
                let os = self.nodes[i].shape.clone();
                // Underlying conv maps [b, c_out, oh, ow] -> [b, c_in, h, w].
                let conv_dims = (os[0], os[1], os[2], os[3]);
                let wk = (ws[0], ws[2], ws[3]);
                let conv_out_hw = (xs[2], xs[3]);
                if self.nodes[x.0].needs_grad {
                    let dx = ops::conv2d_forward(
                        g,
                        conv_dims,
                        &self.nodes[w.0].values,
                        wk,
                        None,
                        spec.stride,
                        spec.pad,
                        conv_out_hw,
                    );
                    self.accumulate(x, dx);
                }
                if self.nodes[w.0].needs_grad {
                    let (dw, _) = ops::conv2d_backward_weight(
                        &self.nodes[x.0].values,
                        g,
                        conv_dims,
                        wk,
                        spec.stride,
                        spec.pad,
                        conv_out_hw,
                    );
                    self.accumulate(w, dw);
                }
                if self.nodes[b.0].needs_grad {
                    let span = os[2] * os[3];
                    let mut db = vec![F::zero(); os[1]];
                    for item in 0..os[0] {
                        for ch in 0..os[1] {
                            let base = (item * os[1] + ch) * span;
                            let mut acc = F::zero();
                            for &gv in &g[base..base + span] {
                                acc = acc + gv;
                            }
                            db[ch] = db[ch] + acc;
                        }
                    }
                    self.accumulate(b, db);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let (x, gamma, beta, groups) = (*x, *gamma, *beta, *groups);
                let stats = stats.clone();
                let xs = self.nodes[x.0].shape.clone();
                let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let per_group = c / groups;
                let plane = h * w;
                let group_len = per_group * plane;
                let m = F::from_f64(group_len as f64);
                let xv = &self.nodes[x.0].values;
                let gv_gamma = &self.nodes[gamma.0].values;
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![F::zero(); xv.len()];
                    for item in 0..bsz {
                        for grp in 0..groups {
                            let (mean, rstd) = stats[item * groups + grp];
                            let start = item * c * plane + grp * group_len;
                            let mut s1 = F::zero();
                            let mut s2 = F::zero();
                            for ch_off in 0..per_group {
                                let ch = grp * per_group + ch_off;
                                let base = start + ch_off * plane;
                                for idx in base..base + plane {
                                    let dxhat = g[idx] * gv_gamma[ch];
                                    let xhat = (xv[idx] - mean) * rstd;
                                    s1 = s1 + dxhat;
                                    s2 = s2 + dxhat * xhat;
                                }
                            }
                            let c1 = s1 / m;
                            let c2 = s2 / m;
                            for ch_off in 0..per_group {
                                let ch = grp * per_group + ch_off;
                                let base = start + ch_off * plane;
                                for idx in base..base + plane {
                                    let dxhat = g[idx] * gv_gamma[ch];
                                    let xhat = (xv[idx] - mean) * rstd;
                                    dx[idx] = rstd * (dxhat - c1 - xhat * c2);
                                }
                            }
                        }
                    }
                    self.accumulate(x, dx);
                }
                if self.nodes[gamma.0].needs_grad || self.nodes[beta.0].needs_grad {
                    let mut dgamma = vec![F::zero(); c];
                    let mut dbeta = vec![F::zero(); c];
                    for item in 0..bsz {
                        for grp in 0..groups {
                            let (mean, rstd) = stats[item * groups + grp];
                            for ch_off in 0..per_group {
                                let ch = grp * per_group + ch_off;
                                let base = item * c * plane + ch * plane;
                                for idx in base..base + plane {
                                    let xhat = (xv[idx] - mean) * rstd;
                                    dgamma[ch] = dgamma[ch] + g[idx] * xhat;
                                    dbeta[ch] = dbeta[ch] + g[idx];
                                }
                            }
                        }
                    }
                    if self.nodes[gamma.0].needs_grad {
                        self.accumulate(gamma, dgamma);
                    }
                    if self.nodes[beta.0].needs_grad {
                        self.accumulate(beta, dbeta);
                    }
                }
            }
            Op::MseLoss { a, b } => {
                let (a, b) = (*a, *b);
                let n = F::from_f64(self.nodes[a.0].values.len() as f64);
                let coeff = F::from_f64(2.0) / n * g[0];
                let diff: Vec<F> = self.nodes[a.0]
                    .values
                    .iter()
                    .zip(&self.nodes[b.0].values)
                    .map(|(&x, &y)| coeff * (x - y))
                    .collect();
                if self.nodes[a.0].needs_grad {
                    self.accumulate(a, diff.clone());
                }
                if self.nodes[b.0].needs_grad {
                    let neg = diff.iter().map(|&d| -d).collect();
                    self.accumulate(b, neg);
                }
            }
            Op::StopGradient(_) => {}
            Op::StraightThrough { ze } => {
                let ze = *ze;
                if self.nodes[ze.0].needs_grad {
                    self.accumulate(ze, g.to_vec());
                }
            }
            Op::GatherLatents {
                table,
                indices,
                batch,
                h,
                w,
            } => {
                let table = *table;
                let (batch, h, w) = (*batch, *h, *w);
                let indices = indices.clone();
                if self.nodes[table.0].needs_grad {
                    let d = self.nodes[table.0].shape[1];
                    let plane = h * w;
                    let mut dt = vec![F::zero(); self.nodes[table.0].values.len()];
                    for n in 0..batch {
                        for p in 0..plane {
                            let row = indices[n * plane + p] * d;
                            for ch in 0..d {
                                dt[row + ch] = dt[row + ch] + g[(n * d + ch) * plane + p];
                            }
                        }
                    }
                    self.accumulate(table, dt);
                }
            }
        }
    }
}
