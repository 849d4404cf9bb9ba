//! Matrix-valued reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and whatever the
//! backward rule needs. Nodes only reference earlier nodes, so a reverse
//! sweep over the node list is a valid topological order.

use super::kernels::{self, gemm};
use super::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddColBroadcast(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulConst(NodeId, Matrix),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    SoftmaxCols(NodeId),
    LayerNorm {
        input: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<NodeId>),
    SliceRows {
        input: NodeId,
        start: usize,
    },
    Sum(NodeId),
    Bce {
        z: NodeId,
        target: Matrix,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Clamp applied to posteriors inside binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Summed binary cross-entropy with the posterior clamped to
/// `[BCE_EPS, 1 - BCE_EPS]`.
pub fn bce_sum(z: &[f64], y: &[f64]) -> f64 {
    z.iter()
        .zip(y)
        .map(|(&z, &y)| {
            let z = z.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(y * z.ln() + (1.0 - y) * (1.0 - z).ln())
        })
        .sum()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// Registers a trainable leaf; `index` identifies it in [`Gradients::params`].
    pub fn param(&mut self, index: usize, value: Matrix) -> NodeId {
        self.push(value, Op::Param(index))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds an n×1 column node to every column of `a`.
    pub fn add_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let v = kernels::add_col_broadcast(self.value(a), self.value(col))?;
        Ok(self.push(v, Op::AddColBroadcast(a, col)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Elementwise product with a constant (e.g. a dropout mask).
    pub fn mul_const(&mut self, a: NodeId, c: Matrix) -> Result<NodeId> {
        let v = self.value(a).zip_map(&c, |x, y| x * y)?;
        Ok(self.push(v, Op::MulConst(a, c)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = kernels::sigmoid(self.value(a));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = kernels::tanh(self.value(a));
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = kernels::relu(self.value(a));
        self.push(v, Op::Relu(a))
    }

    pub fn softmax_cols(&mut self, a: NodeId) -> NodeId {
        let v = kernels::softmax_cols(self.value(a));
        self.push(v, Op::SoftmaxCols(a))
    }

    pub fn layer_norm(&mut self, input: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (v, xhat, inv_std) = kernels::layer_norm_saved(
            self.value(input),
            self.value(gain),
            self.value(bias),
            kernels::LAYER_NORM_EPS,
        )?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn concat_vertical(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.concat_rows(&[a, b])
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = kernels::concat_rows(&mats)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(input).slice_rows(start, len)?;
        Ok(self.push(v, Op::SliceRows { input, start }))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Summed clamped binary cross-entropy of posteriors `z` against a
    /// constant target of the same shape; yields a 1×1 node.
    pub fn bce(&mut self, z: NodeId, target: Matrix) -> Result<NodeId> {
        self.value(z).expect_same_shape(&target, "bce")?;
        let v = Matrix::scalar(bce_sum(self.value(z).data(), target.data()));
        Ok(self.push(v, Op::Bce { z, target }))
    }

    /// Adds several scalar nodes.
    pub fn add_all(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Contract("add_all of no terms".into()))?;
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse accumulation from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward seed must be 1x1, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant | Op::Param(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = slot(&mut grads, *a, va);
                    gemm(1.0, &g, false, vb, true, 1.0, ga);
                    let gb = slot(&mut grads, *b, vb);
                    gemm(1.0, va, true, &g, false, 1.0, gb);
                }
                Op::Transpose(a) => {
                    let t = g.transpose();
                    slot(&mut grads, *a, self.value(*a)).add_assign(&t);
                }
                Op::Add(a, b) => {
                    slot(&mut grads, *a, self.value(*a)).add_assign(&g);
                    slot(&mut grads, *b, self.value(*b)).add_assign(&g);
                }
                Op::AddColBroadcast(a, col) => {
                    slot(&mut grads, *a, self.value(*a)).add_assign(&g);
                    let gc = slot(&mut grads, *col, self.value(*col));
                    for r in 0..g.rows() {
                        gc.data_mut()[r] += g.row(r).iter().sum::<f64>();
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    accumulate_zip(slot(&mut grads, *a, va), &g, vb, |g, y| g * y);
                    accumulate_zip(slot(&mut grads, *b, vb), &g, va, |g, x| g * x);
                }
                Op::MulConst(a, c) => {
                    accumulate_zip(slot(&mut grads, *a, self.value(*a)), &g, c, |g, m| g * m);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    let ga = slot(&mut grads, *a, self.value(*a));
                    for (x, gv) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += gv * s;
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    accumulate_zip(slot(&mut grads, *a, self.value(*a)), &g, y, |g, y| {
                        g * y * (1.0 - y)
                    });
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    accumulate_zip(slot(&mut grads, *a, self.value(*a)), &g, y, |g, y| {
                        g * (1.0 - y * y)
                    });
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    accumulate_zip(slot(&mut grads, *a, x), &g, x, |g, x| {
                        if x > 0.0 {
                            g
                        } else {
                            0.0
                        }
                    });
                }
                Op::SoftmaxCols(a) => {
                    let y = &node.value;
                    let (rows, cols) = y.shape();
                    let mut dot = vec![0.0; cols];
                    for r in 0..rows {
                        for ((d, yv), gv) in dot.iter_mut().zip(y.row(r)).zip(g.row(r)) {
                            *d += yv * gv;
                        }
                    }
                    let ga = slot(&mut grads, *a, self.value(*a));
                    for r in 0..rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        for (c, out) in ga.row_mut(r).iter_mut().enumerate() {
                            *out += yr[c] * (gr[c] - dot[c]);
                        }
                    }
                }
                Op::LayerNorm {
                    input,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = xhat.shape();
                    let gain_v = self.value(*gain);
                    {
                        let gg = slot(&mut grads, *gain, gain_v);
                        for r in 0..rows {
                            gg.data_mut()[r] += g
                                .row(r)
                                .iter()
                                .zip(xhat.row(r))
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                    }
                    {
                        let gb = slot(&mut grads, *bias, self.value(*bias));
                        for r in 0..rows {
                            gb.data_mut()[r] += g.row(r).iter().sum::<f64>();
                        }
                    }
                    let n = rows as f64;
                    let mut mean_d = vec![0.0; cols];
                    let mut mean_dx = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = gain_v.data()[r];
                        for c in 0..cols {
                            let d = g[(r, c)] * gr;
                            mean_d[c] += d;
                            mean_dx[c] += d * xhat[(r, c)];
                        }
                    }
                    mean_d.iter_mut().for_each(|v| *v /= n);
                    mean_dx.iter_mut().for_each(|v| *v /= n);
                    let gi = slot(&mut grads, *input, self.value(*input));
                    for r in 0..rows {
                        let gr = gain_v.data()[r];
                        for c in 0..cols {
                            let d = g[(r, c)] * gr;
                            gi[(r, c)] +=
                                inv_std[c] * (d - mean_d[c] - xhat[(r, c)] * mean_dx[c]);
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let v = self.value(*p);
                        let n = v.len();
                        let gp = slot(&mut grads, *p, v);
                        for (x, gv) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + n])
                        {
                            *x += gv;
                        }
                        offset += n;
                    }
                }
                Op::SliceRows { input, start } => {
                    let v = self.value(*input);
                    let cols = v.cols();
                    let gi = slot(&mut grads, *input, v);
                    let off = start * cols;
                    for (x, gv) in gi.data_mut()[off..off + g.len()].iter_mut().zip(g.data()) {
                        *x += gv;
                    }
                }
                Op::Sum(a) => {
                    let s = g.item();
                    for x in slot(&mut grads, *a, self.value(*a)).data_mut() {
                        *x += s;
                    }
                }
                Op::Bce { z, target } => {
                    let s = g.item();
                    let zv = self.value(*z);
                    accumulate_zip(slot(&mut grads, *z, zv), zv, target, |z, y| {
                        if !(BCE_EPS..=1.0 - BCE_EPS).contains(&z) {
                            0.0
                        } else {
                            s * ((1.0 - y) / (1.0 - z) - y / z)
                        }
                    });
                }
            }
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((p, NodeId(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn slot<'a>(grads: &'a mut [Option<Matrix>], id: NodeId, like: &Matrix) -> &'a mut Matrix {
    grads[id.0].get_or_insert_with(|| Matrix::zeros(like.rows(), like.cols()))
}

fn accumulate_zip(dst: &mut Matrix, a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) {
    for ((d, &x), &y) in dst.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *d += f(x, y);
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(usize, NodeId)>,
}

impl Gradients {
    /// Gradient with respect to a recorded node, if it was reached.
    pub fn wrt(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter in `params`, indexed like the slice.
    /// Parameters never registered on the tape, or not reached by the
    /// backward sweep, get a zero gradient.
    pub fn params(&self, params: &[Matrix]) -> Vec<Matrix> {
        let mut out: Vec<Matrix> = params
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        for &(p, node) in &self.params {
            if let Some(g) = self.wrt(node) {
                out[p].add_assign(g);
            }
        }
        out
    }
}
