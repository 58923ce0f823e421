//! Reverse-mode differentiation over a small set of tensor primitives.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Node
//! values are computed eagerly; [`Graph::backward`] then walks the recorded
//! nodes in reverse and accumulates parameter gradients into a
//! [`ParamVector`] with the same layout as the bound parameters.

use super::kernels;
use super::params::ParamVector;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Input,
    Param(usize),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        means: Vec<f64>,
        rstds: Vec<f64>,
    },
    Gelu(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<f64>,
    },
    LogSoftmax(NodeId),
    MaskedNll {
        logits: NodeId,
        targets: Vec<(usize, usize, f64)>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::MatMul(..) => "affine",
            Op::AddBias(..) => "affine_bias",
            Op::Gather { .. } => "embedding",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Attention { .. } => "causal_attention",
            Op::LogSoftmax(_) => "log_softmax",
            Op::MaskedNll { .. } => "softmax_cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamVector,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamVector) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Binds the named parameter tensor as a differentiable leaf.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let pos = self
            .params
            .layout()
            .position(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        Ok(self.param_at(pos))
    }

    pub(crate) fn param_at(&mut self, entry: usize) -> NodeId {
        let shape = self.params.layout().entries()[entry].shape.clone();
        let data = self.params.entry_slice(entry).to_vec();
        let value = Tensor::new(shape, data).expect("layout shape matches slice");
        self.push(value, Op::Param(entry))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (x, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, alpha: f64) -> NodeId {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x *= alpha);
        self.push(out, Op::Scale(a, alpha))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// `a: m×k` times `b: k×n`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::invalid(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n, false);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let n = self.value(a).cols();
        if self.value(bias).numel() != n {
            return Err(Error::invalid("bias length does not match columns"));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..out.rows() {
            for (x, y) in out.row_mut(r).iter_mut().zip(&b) {
                *x += y;
            }
        }
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.dims2(table)?;
        if ids.is_empty() {
            return Err(Error::invalid("embedding lookup with no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::invalid(format!("embedding id {id} out of range {rows}")));
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let t = Tensor::matrix(ids.len(), cols, out)?;
        Ok(self.push(t, Op::Gather { table, ids: ids.to_vec() }))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let d = self.value(x).cols();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::invalid("layer norm parameter size mismatch"));
        }
        let mut out = vec![0.0; self.value(x).numel()];
        let (means, rstds) = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            &mut out,
            d,
        );
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                rstds,
            },
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = kernels::gelu(*v));
        self.push(out, Op::Gelu(x))
    }

    /// Causal scaled-dot-product attention over `t×d` query/key/value matrices.
    pub fn causal_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (t, d) = self.dims2(q)?;
        if self.dims2(k)? != (t, d) || self.dims2(v)? != (t, d) {
            return Err(Error::invalid("attention q/k/v shapes differ"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!("{heads} heads do not divide width {d}")));
        }
        let mut out = vec![0.0; t * d];
        let probs = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            &mut out,
            t,
            d,
            heads,
        );
        let tensor = Tensor::matrix(t, d, out)?;
        Ok(self.push(tensor, Op::Attention { q, k, v, heads, probs }))
    }

    /// Row-wise log-softmax of a matrix (or a single vector).
    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            kernels::log_softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::LogSoftmax(x))
    }

    /// `Σ w · (−log softmax(logits[row])[target])` over `(row, target, w)`.
    pub fn masked_nll(&mut self, logits: NodeId, targets: &[(usize, usize, f64)]) -> Result<NodeId> {
        let (rows, cols) = self.dims2(logits)?;
        let mut probs = Vec::with_capacity(targets.len() * cols);
        let mut total = 0.0;
        for &(r, tgt, w) in targets {
            if r >= rows || tgt >= cols {
                return Err(Error::invalid(format!("nll target ({r}, {tgt}) out of range")));
            }
            let mut row = self.value(logits).row(r).to_vec();
            kernels::log_softmax_in_place(&mut row);
            total -= w * row[tgt];
            probs.extend(row.iter().map(|v| v.exp()));
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::MaskedNll {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    fn dims2(&self, id: NodeId) -> Result<(usize, usize)> {
        match *self.value(id).shape() {
            [r, c] => Ok((r, c)),
            [c] => Ok((1, c)),
            ref s => Err(Error::invalid(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::invalid(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    /// First recorded primitive whose output contains a non-finite value.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.nodes.iter().find(|n| !n.value.is_finite()).map(|n| n.op.name())
    }

    /// Gradient of the scalar node `root` with respect to the bound parameters.
    pub fn backward(&self, root: NodeId) -> Result<ParamVector> {
        if self.value(root).numel() != 1 {
            return Err(Error::invalid("backward from a non-scalar node needs a seed"));
        }
        self.backward_with(root, Tensor::scalar(1.0))
    }

    /// Vector-Jacobian product seeded with `seed` at node `root`.
    pub fn backward_with(&self, root: NodeId, seed: Tensor) -> Result<ParamVector> {
        if seed.shape() != self.value(root).shape() {
            return Err(Error::invalid("seed shape does not match root"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(seed);
        let mut out = ParamVector::zeros(self.params.layout().clone());

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(entry) => {
                    for (o, v) in out.entry_slice_mut(*entry).iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, |t| t.add_assign(&g), self.value(*a).shape());
                    accumulate(&mut grads, *b, |t| t.add_assign(&g), self.value(*b).shape());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    accumulate(
                        &mut grads,
                        *a,
                        |t| {
                            for ((x, gi), y) in t.data_mut().iter_mut().zip(g.data()).zip(vb) {
                                *x += gi * y;
                            }
                        },
                        self.value(*a).shape(),
                    );
                    accumulate(
                        &mut grads,
                        *b,
                        |t| {
                            for ((x, gi), y) in t.data_mut().iter_mut().zip(g.data()).zip(va) {
                                *x += gi * y;
                            }
                        },
                        self.value(*b).shape(),
                    );
                }
                Op::Scale(a, alpha) => {
                    accumulate(
                        &mut grads,
                        *a,
                        |t| {
                            for (x, gi) in t.data_mut().iter_mut().zip(g.data()) {
                                *x += alpha * gi;
                            }
                        },
                        self.value(*a).shape(),
                    );
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    accumulate(
                        &mut grads,
                        *a,
                        |t| t.data_mut().iter_mut().for_each(|x| *x += s),
                        self.value(*a).shape(),
                    );
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims2(*a)?;
                    let n = self.dims2(*b)?.1;
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    // dA = dC Bᵀ ; dB = Aᵀ dC
                    accumulate(
                        &mut grads,
                        *a,
                        |t| kernels::matmul_nt(g.data(), vb, t.data_mut(), m, n, k, true),
                        self.value(*a).shape(),
                    );
                    accumulate(
                        &mut grads,
                        *b,
                        |t| kernels::matmul_tn(va, g.data(), t.data_mut(), k, m, n, true),
                        self.value(*b).shape(),
                    );
                }
                Op::AddBias(a, bias) => {
                    accumulate(&mut grads, *a, |t| t.add_assign(&g), self.value(*a).shape());
                    accumulate(
                        &mut grads,
                        *bias,
                        |t| {
                            for r in 0..g.rows() {
                                for (x, gi) in t.data_mut().iter_mut().zip(g.row(r)) {
                                    *x += gi;
                                }
                            }
                        },
                        self.value(*bias).shape(),
                    );
                }
                Op::Gather { table, ids } => {
                    accumulate(
                        &mut grads,
                        *table,
                        |t| {
                            for (i, &id) in ids.iter().enumerate() {
                                for (x, gi) in t.row_mut(id).iter_mut().zip(g.row(i)) {
                                    *x += gi;
                                }
                            }
                        },
                        self.value(*table).shape(),
                    );
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    means,
                    rstds,
                } => {
                    let d = self.value(*x).cols();
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    kernels::layer_norm_backward(
                        self.value(*x).data(),
                        self.value(*gain).data(),
                        means,
                        rstds,
                        g.data(),
                        dx.data_mut(),
                        &mut dgain,
                        &mut dbias,
                        d,
                    );
                    accumulate(&mut grads, *x, |t| t.add_assign(&dx), self.value(*x).shape());
                    add_slice(&mut grads, *gain, &dgain, self.value(*gain).shape());
                    add_slice(&mut grads, *bias, &dbias, self.value(*bias).shape());
                }
                Op::Gelu(x) => {
                    let vx = self.value(*x).data();
                    accumulate(
                        &mut grads,
                        *x,
                        |t| {
                            for ((o, gi), xi) in t.data_mut().iter_mut().zip(g.data()).zip(vx) {
                                *o += gi * kernels::gelu_grad(*xi);
                            }
                        },
                        self.value(*x).shape(),
                    );
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (t, d) = self.dims2(*q)?;
                    let mut dq = vec![0.0; t * d];
                    let mut dk = vec![0.0; t * d];
                    let mut dv = vec![0.0; t * d];
                    kernels::attention_backward(
                        self.value(*q).data(),
                        self.value(*k).data(),
                        self.value(*v).data(),
                        probs,
                        g.data(),
                        &mut dq,
                        &mut dk,
                        &mut dv,
                        t,
                        d,
                        *heads,
                    );
                    add_slice(&mut grads, *q, &dq, self.value(*q).shape());
                    add_slice(&mut grads, *k, &dk, self.value(*k).shape());
                    add_slice(&mut grads, *v, &dv, self.value(*v).shape());
                }
                Op::LogSoftmax(x) => {
                    // dx = g − softmax · Σ g   (row-wise)
                    let y = &node.value;
                    accumulate(
                        &mut grads,
                        *x,
                        |t| {
                            for r in 0..y.rows() {
                                let gs: f64 = g.row(r).iter().sum();
                                let (yr, gr) = (y.row(r), g.row(r));
                                for ((o, yi), gi) in t.row_mut(r).iter_mut().zip(yr).zip(gr) {
                                    *o += gi - yi.exp() * gs;
                                }
                            }
                        },
                        self.value(*x).shape(),
                    );
                }
                Op::MaskedNll { logits, targets, probs } => {
                    let s = g.data()[0];
                    let cols = self.value(*logits).cols();
                    accumulate(
                        &mut grads,
                        *logits,
                        |t| {
                            for (i, &(r, tgt, w)) in targets.iter().enumerate() {
                                let p = &probs[i * cols..(i + 1) * cols];
                                let row = t.row_mut(r);
                                for (o, pi) in row.iter_mut().zip(p) {
                                    *o += s * w * pi;
                                }
                                row[tgt] -= s * w;
                            }
                        },
                        self.value(*logits).shape(),
                    );
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, f: impl FnOnce(&mut Tensor), shape: &[usize]) {
    let slot = grads[id.0].get_or_insert_with(|| Tensor::zeros(shape));
    f(slot);
}

fn add_slice(grads: &mut [Option<Tensor>], id: NodeId, data: &[f64], shape: &[usize]) {
    accumulate(
        grads,
        id,
        |t| {
            for (x, v) in t.data_mut().iter_mut().zip(data) {
                *x += v;
            }
        },
        shape,
    );
}

/// Evaluates a scalar loss built on a [`Graph`] and returns its gradient.
pub fn value_and_grad<F>(params: &ParamVector, loss_fn: F) -> Result<(f64, ParamVector)>
where
    F: FnOnce(&mut Graph<'_>) -> Result<NodeId>,
{
    let mut graph = Graph::new(params);
    let root = loss_fn(&mut graph)?;
    let value = graph.value(root);
    if value.numel() != 1 {
        return Err(Error::invalid("loss function must return a scalar"));
    }
    let v = value.data()[0];
    if !v.is_finite() {
        let primitive = graph.first_non_finite().unwrap_or("loss");
        return Err(Error::numeric(primitive, format!("loss evaluated to {v}")));
    }
    let grad = graph.backward(root)?;
    Ok((v, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::Layout;

    fn params(values: Vec<f64>) -> ParamVector {
        let mut l = Layout::new();
        l.push("theta", &[values.len()]).unwrap();
        ParamVector::from_values(l, values).unwrap()
    }

    #[test]
    fn half_squared_norm() {
        let p = params(vec![3.0, -4.0]);
        let (v, g) = value_and_grad(&p, |g| {
            let t = g.param("theta")?;
            let sq = g.mul(t, t)?;
            let s = g.sum(sq);
            Ok(g.scale(s, 0.5))
        })
        .unwrap();
        assert_eq!(v, 12.5);
        assert_eq!(g.values(), &[3.0, -4.0]);
    }

    #[test]
    fn linear_loss_has_constant_gradient() {
        let coeffs = Tensor::vector(vec![0.5, -2.0, 1.5]);
        let grad_at = |theta: Vec<f64>| {
            let p = params(theta);
            value_and_grad(&p, |g| {
                let t = g.param("theta")?;
                let c = g.input(coeffs.clone());
                let prod = g.mul(t, c)?;
                Ok(g.sum(prod))
            })
            .unwrap()
            .1
        };
        let g1 = grad_at(vec![1.0, 2.0, 3.0]);
        let g2 = grad_at(vec![-7.0, 0.1, 100.0]);
        assert_eq!(g1.values(), g2.values());
        assert_eq!(g1.values(), coeffs.data());
    }

    #[test]
    fn non_finite_loss_names_the_primitive() {
        let p = params(vec![1e200, 1e200]);
        let err = value_and_grad(&p, |g| {
            let t = g.param("theta")?;
            let sq = g.mul(t, t)?;
            Ok(g.sum(sq))
        })
        .unwrap_err();
        match err {
            Error::NumericFailure { primitive, .. } => assert_eq!(primitive, "mul"),
            other => panic!("unexpected error {other}"),
        }
    }
}
