use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;

use super::kernels::{self, view};
use super::Tensor;
use crate::error::{Result, SimtsError};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        cols: Vec<T>,
        kernel: usize,
    },
    Conv1dLast {
        input: Var,
        weight: Var,
        bias: Var,
        tail: Vec<T>,
        kernel: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    MeanOver(Vec<Var>),
    NormalizeColumns {
        input: Var,
        norms: Vec<T>,
        clamped: Vec<bool>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Stack(Vec<Var>),
    LogSoftmaxColumns(Var),
    Select(Var, usize),
    Column(Var, usize),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Operation tape for one forward pass.
///
/// Nodes are appended in execution order, which is already a topological
/// order, so backward is a single reverse sweep. Methods take `&self` so that
/// calls can be nested (`g.relu(g.linear(x, w, b)?)`).
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<Vec<(String, Var)>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> SimtsError {
    SimtsError::shape(op, detail)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Borrow the value of a node. Do not hold the borrow across op calls.
    pub fn value_ref(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.value_ref(v).clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value_ref(v).shape().to_vec()
    }

    /// First element of a node's value; the loss value for scalar nodes.
    pub fn item(&self, v: Var) -> T {
        self.value_ref(v).data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf whose gradient is reported under `name`.
    pub fn param(&self, name: impl Into<String>, value: Tensor<T>) -> Var {
        let v = self.leaf(value, true);
        self.params.borrow_mut().push((name.into(), v));
        v
    }

    /// Same data, no history: nothing flows back through the result.
    pub fn detach(&self, x: Var) -> Var {
        let value = self.value(x);
        self.constant(value)
    }

    /// Causal 1-D convolution. `input` is `C_in × L`, `weight` is
    /// `C_out × C_in × k`, `bias` is `C_out`; the input is left-padded with
    /// `k − 1` zeros so the output is `C_out × L` and `out[:, t]` only sees
    /// `input[:, ..=t]`.
    pub fn conv1d(&self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (c_out, c_in, k, len) = self.conv_dims("conv1d", input, weight, bias)?;
        let out = {
            let nodes = self.nodes.borrow();
            let x = nodes[input.0].value.data();
            let w = nodes[weight.0].value.data();
            let b = nodes[bias.0].value.data();
            let cols = kernels::causal_im2col(x, c_in, len, k);
            let mut out = vec![T::zero(); c_out * len];
            for (o, row) in out.chunks_mut(len).enumerate() {
                row.fill(b[o]);
            }
            kernels::matmul_into(
                &mut out,
                view(w, c_out, c_in * k),
                view(&cols, c_in * k, len),
                true,
            );
            (out, cols)
        };
        let rg = self.needs_grad(&[input, weight, bias]);
        let value = Tensor::new(&[c_out, len], out.0)?;
        Ok(self.push(
            value,
            rg,
            Op::Conv1d {
                input,
                weight,
                bias,
                cols: if rg { out.1 } else { Vec::new() },
                kernel: k,
            },
        ))
    }

    /// Last output column of [`Graph::conv1d`], computed without the rest.
    /// Returns a `C_out` vector.
    pub fn conv1d_last(&self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (c_out, c_in, k, len) = self.conv_dims("conv1d_last", input, weight, bias)?;
        let (out, tail) = {
            let nodes = self.nodes.borrow();
            let x = nodes[input.0].value.data();
            let w = nodes[weight.0].value.data();
            let b = nodes[bias.0].value.data();
            let tail = kernels::causal_tail(x, c_in, len, k);
            let mut out = b.to_vec();
            kernels::matmul_into(
                &mut out,
                view(w, c_out, c_in * k),
                view(&tail, c_in * k, 1),
                true,
            );
            (out, tail)
        };
        let rg = self.needs_grad(&[input, weight, bias]);
        Ok(self.push(
            Tensor::vector(out),
            rg,
            Op::Conv1dLast {
                input,
                weight,
                bias,
                tail,
                kernel: k,
            },
        ))
    }

    fn conv_dims(
        &self,
        op: &'static str,
        input: Var,
        weight: Var,
        bias: Var,
    ) -> Result<(usize, usize, usize, usize)> {
        let nodes = self.nodes.borrow();
        let xs = nodes[input.0].value.shape();
        let ws = nodes[weight.0].value.shape();
        let bs = nodes[bias.0].value.shape();
        let (c_in, len) = match xs {
            [c, l] => (*c, *l),
            _ => return Err(shape_err(op, format!("input must be C_in×L, got {xs:?}"))),
        };
        let (c_out, wc_in, k) = match ws {
            [o, i, k] => (*o, *i, *k),
            _ => {
                return Err(shape_err(
                    op,
                    format!("weight must be C_out×C_in×k, got {ws:?}"),
                ))
            }
        };
        if wc_in != c_in {
            return Err(shape_err(
                op,
                format!("weight {ws:?} expects {wc_in} input channels but input has shape {xs:?}"),
            ));
        }
        if bs != [c_out] {
            return Err(shape_err(
                op,
                format!("bias {bs:?} does not match weight {ws:?}"),
            ));
        }
        Ok((c_out, c_in, k, len))
    }

    /// `weight · input + bias` for a vector input.
    pub fn linear(&self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, w, b) = (
                &nodes[input.0].value,
                &nodes[weight.0].value,
                &nodes[bias.0].value,
            );
            let (m, n) = match w.shape() {
                [m, n] => (*m, *n),
                s => return Err(shape_err("linear", format!("weight must be m×n, got {s:?}"))),
            };
            if x.shape() != [n] || b.shape() != [m] {
                return Err(shape_err(
                    "linear",
                    format!(
                        "weight {:?} incompatible with input {:?} / bias {:?}",
                        w.shape(),
                        x.shape(),
                        b.shape()
                    ),
                ));
            }
            let mut out = b.data().to_vec();
            kernels::matmul_into(&mut out, view(w.data(), m, n), view(x.data(), n, 1), true);
            out
        };
        let rg = self.needs_grad(&[input, weight, bias]);
        Ok(self.push(
            Tensor::vector(out),
            rg,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn relu(&self, x: Var) -> Var {
        let value = self.value_ref(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::Relu(x))
    }

    /// Elementwise arithmetic mean of equally shaped inputs.
    pub fn mean_over(&self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| SimtsError::InvalidArgument("mean_over of an empty list".into()))?;
        let value = {
            let nodes = self.nodes.borrow();
            let shape = nodes[first.0].value.shape().to_vec();
            let mut acc = vec![T::zero(); nodes[first.0].value.len()];
            for v in inputs {
                let t = &nodes[v.0].value;
                if t.shape() != shape.as_slice() {
                    return Err(shape_err(
                        "mean_over",
                        format!("{:?} vs {:?}", t.shape(), shape),
                    ));
                }
                kernels::add_into(&mut acc, t.data());
            }
            let inv = T::one() / T::of(inputs.len() as f64);
            acc.iter_mut().for_each(|a| *a *= inv);
            Tensor::new(&shape, acc)?
        };
        let rg = self.needs_grad(inputs);
        Ok(self.push(value, rg, Op::MeanOver(inputs.to_vec())))
    }

    /// Divides each column of a `d × n` matrix by `max(‖column‖₂, eps)`.
    pub fn l2_normalize_columns(&self, x: Var, eps: T) -> Result<Var> {
        if !(eps > T::zero()) {
            return Err(SimtsError::InvalidArgument(format!(
                "normalisation eps must be positive, got {eps}"
            )));
        }
        let (value, norms, clamped) = {
            let t = self.value_ref(x);
            let (d, n) = t.dims2()?;
            let mut norms = vec![T::zero(); n];
            for r in 0..d {
                for (c, acc) in norms.iter_mut().enumerate() {
                    let v = t.data()[r * n + c];
                    *acc += v * v;
                }
            }
            let clamped: Vec<bool> = norms.iter().map(|s| s.sqrt() < eps).collect();
            let norms: Vec<T> = norms.iter().map(|s| s.sqrt().max(eps)).collect();
            let mut out = t.data().to_vec();
            for row in out.chunks_mut(n) {
                for (v, &nrm) in row.iter_mut().zip(&norms) {
                    *v /= nrm;
                }
            }
            (Tensor::new(&[d, n], out)?, norms, clamped)
        };
        let rg = self.requires_grad(x);
        Ok(self.push(
            value,
            rg,
            Op::NormalizeColumns {
                input: x,
                norms,
                clamped,
            },
        ))
    }

    fn binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn scale(&self, x: Var, factor: T) -> Var {
        let value = self.value_ref(x).map(|v| v * factor);
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::Scale(x, factor))
    }

    pub fn sum(&self, x: Var) -> Var {
        let value = Tensor::scalar(self.value_ref(x).sum());
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::Sum(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let value = {
            let t = self.value_ref(x);
            Tensor::scalar(t.sum() / T::of(t.len() as f64))
        };
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::Mean(x))
    }

    /// Column sums of a `d × n` matrix, giving an `n` vector.
    pub fn sum_rows(&self, x: Var) -> Result<Var> {
        let value = {
            let t = self.value_ref(x);
            let (_, n) = t.dims2()?;
            let mut out = vec![T::zero(); n];
            for row in t.data().chunks(n) {
                kernels::add_into(&mut out, row);
            }
            Tensor::vector(out)
        };
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::SumRows(x)))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| SimtsError::InvalidArgument("stack of an empty list".into()))?;
        let value = {
            let nodes = self.nodes.borrow();
            let inner = nodes[first.0].value.shape().to_vec();
            let mut data = Vec::with_capacity(inputs.len() * nodes[first.0].value.len());
            for v in inputs {
                let t = &nodes[v.0].value;
                if t.shape() != inner.as_slice() {
                    return Err(shape_err("stack", format!("{:?} vs {:?}", t.shape(), inner)));
                }
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![inputs.len()];
            shape.extend(inner);
            Tensor::new(&shape, data)?
        };
        let rg = self.needs_grad(inputs);
        Ok(self.push(value, rg, Op::Stack(inputs.to_vec())))
    }

    /// Log-softmax over the rows of each column of an `N × n` matrix.
    pub fn log_softmax_columns(&self, x: Var) -> Result<Var> {
        let value = {
            let t = self.value_ref(x);
            let (rows, n) = t.dims2()?;
            let d = t.data();
            let mut out = d.to_vec();
            for c in 0..n {
                let max = (0..rows).map(|r| d[r * n + c]).fold(T::neg_infinity(), T::max);
                let lse = max
                    + (0..rows)
                        .map(|r| (d[r * n + c] - max).exp())
                        .sum::<T>()
                        .ln();
                for r in 0..rows {
                    out[r * n + c] = d[r * n + c] - lse;
                }
            }
            Tensor::new(&[rows, n], out)?
        };
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::LogSoftmaxColumns(x)))
    }

    /// Sub-tensor `x[index, ...]` along the leading axis.
    pub fn select(&self, x: Var, index: usize) -> Result<Var> {
        let value = {
            let t = self.value_ref(x);
            if t.rank() < 2 || index >= t.shape()[0] {
                return Err(shape_err(
                    "select",
                    format!("index {index} out of range for {:?}", t.shape()),
                ));
            }
            let inner = &t.shape()[1..];
            let step: usize = inner.iter().product();
            Tensor::new(inner, t.data()[index * step..(index + 1) * step].to_vec())?
        };
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Select(x, index)))
    }

    /// Column `col` of a `d × n` matrix as a `d` vector.
    pub fn column(&self, x: Var, col: usize) -> Result<Var> {
        let value = {
            let t = self.value_ref(x);
            let (_, n) = t.dims2()?;
            if col >= n {
                return Err(shape_err(
                    "column",
                    format!("column {col} out of range for {:?}", t.shape()),
                ));
            }
            Tensor::vector(t.column(col))
        };
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Column(x, col)))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// The graph is not consumed or mutated, so calling this twice yields
    /// identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.0].value.shape();
        if nodes[loss.0].value.len() != 1 {
            return Err(SimtsError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            params: self.params.borrow().clone(),
        })
    }
}

/// Adds `delta` into the gradient slot of `v` if `v` takes part in differentiation.
fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
    delta: impl FnOnce(&mut Vec<T>),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
    delta(slot);
}

fn backprop<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::Conv1d {
            input,
            weight,
            bias,
            cols,
            kernel,
        } => {
            let (c_out, len) = (node.value.shape()[0], node.value.shape()[1]);
            let c_in = nodes[input.0].value.shape()[0];
            let ck = c_in * kernel;
            accumulate(nodes, grads, *weight, |dw| {
                kernels::matmul_into(dw, view(g, c_out, len), view(cols, ck, len).t(), true);
            });
            accumulate(nodes, grads, *bias, |db| {
                for (o, row) in g.chunks(len).enumerate() {
                    db[o] += row.iter().copied().sum::<T>();
                }
            });
            accumulate(nodes, grads, *input, |dx| {
                let w = nodes[weight.0].value.data();
                let mut dcols = vec![T::zero(); ck * len];
                kernels::matmul_into(&mut dcols, view(w, c_out, ck).t(), view(g, c_out, len), false);
                kernels::causal_col2im(&dcols, dx, c_in, len, *kernel);
            });
        }
        Op::Conv1dLast {
            input,
            weight,
            bias,
            tail,
            kernel,
        } => {
            let c_out = g.len();
            let (c_in, len) = (nodes[input.0].value.shape()[0], nodes[input.0].value.shape()[1]);
            let ck = c_in * kernel;
            accumulate(nodes, grads, *weight, |dw| {
                for (o, row) in dw.chunks_mut(ck).enumerate() {
                    for (d, &t) in row.iter_mut().zip(tail) {
                        *d += g[o] * t;
                    }
                }
            });
            accumulate(nodes, grads, *bias, |db| kernels::add_into(db, g));
            accumulate(nodes, grads, *input, |dx| {
                let w = nodes[weight.0].value.data();
                let mut dtail = vec![T::zero(); ck];
                kernels::matmul_into(&mut dtail, view(w, c_out, ck).t(), view(g, c_out, 1), false);
                kernels::causal_tail_adjoint(&dtail, dx, c_in, len, *kernel);
            });
        }
        Op::Linear {
            input,
            weight,
            bias,
        } => {
            let m = g.len();
            let x = nodes[input.0].value.data();
            let n = x.len();
            accumulate(nodes, grads, *weight, |dw| {
                for (o, row) in dw.chunks_mut(n).enumerate() {
                    let go = g[o];
                    for (d, &xi) in row.iter_mut().zip(x) {
                        *d += go * xi;
                    }
                }
            });
            accumulate(nodes, grads, *bias, |db| kernels::add_into(db, g));
            accumulate(nodes, grads, *input, |dx| {
                let w = nodes[weight.0].value.data();
                kernels::matmul_into(dx, view(w, m, n).t(), view(g, m, 1), true);
            });
        }
        Op::Relu(x) => {
            let xv = nodes[x.0].value.data();
            accumulate(nodes, grads, *x, |dx| {
                for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                    if xi > T::zero() {
                        *d += gi;
                    }
                }
            });
        }
        Op::MeanOver(inputs) => {
            let inv = T::one() / T::of(inputs.len() as f64);
            for v in inputs {
                accumulate(nodes, grads, *v, |dx| {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi * inv;
                    }
                });
            }
        }
        Op::NormalizeColumns {
            input,
            norms,
            clamped,
        } => {
            let y = node.value.data();
            let n = norms.len();
            // per column: dx = (g − y ⟨y, g⟩) / ‖x‖, or g / eps when clamped
            let mut dots = vec![T::zero(); n];
            for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                for c in 0..n {
                    dots[c] += yr[c] * gr[c];
                }
            }
            accumulate(nodes, grads, *input, |dx| {
                for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    for c in 0..n {
                        dr[c] += if clamped[c] {
                            gr[c] / norms[c]
                        } else {
                            (gr[c] - yr[c] * dots[c]) / norms[c]
                        };
                    }
                }
            });
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |d| kernels::add_into(d, g));
            accumulate(nodes, grads, *b, |d| kernels::add_into(d, g));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            accumulate(nodes, grads, *a, |d| {
                for ((di, &gi), &bi) in d.iter_mut().zip(g).zip(bv) {
                    *di += gi * bi;
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for ((di, &gi), &ai) in d.iter_mut().zip(g).zip(av) {
                    *di += gi * ai;
                }
            });
        }
        Op::Scale(x, factor) => {
            accumulate(nodes, grads, *x, |d| {
                for (di, &gi) in d.iter_mut().zip(g) {
                    *di += gi * *factor;
                }
            });
        }
        Op::Sum(x) => {
            accumulate(nodes, grads, *x, |d| d.iter_mut().for_each(|di| *di += g[0]));
        }
        Op::Mean(x) => {
            let share = g[0] / T::of(nodes[x.0].value.len() as f64);
            accumulate(nodes, grads, *x, |d| d.iter_mut().for_each(|di| *di += share));
        }
        Op::SumRows(x) => {
            accumulate(nodes, grads, *x, |d| {
                for row in d.chunks_mut(g.len()) {
                    kernels::add_into(row, g);
                }
            });
        }
        Op::Stack(inputs) => {
            let step = g.len() / inputs.len();
            for (i, v) in inputs.iter().enumerate() {
                accumulate(nodes, grads, *v, |d| {
                    kernels::add_into(d, &g[i * step..(i + 1) * step])
                });
            }
        }
        Op::LogSoftmaxColumns(x) => {
            let (rows, n) = (node.value.shape()[0], node.value.shape()[1]);
            let y = node.value.data();
            accumulate(nodes, grads, *x, |d| {
                for c in 0..n {
                    let gsum: T = (0..rows).map(|r| g[r * n + c]).sum();
                    for r in 0..rows {
                        d[r * n + c] += g[r * n + c] - y[r * n + c].exp() * gsum;
                    }
                }
            });
        }
        Op::Select(x, index) => {
            let step = g.len();
            accumulate(nodes, grads, *x, |d| {
                kernels::add_into(&mut d[index * step..(index + 1) * step], g)
            });
        }
        Op::Column(x, col) => {
            let n = nodes[x.0].value.shape()[1];
            accumulate(nodes, grads, *x, |d| {
                for (r, &gi) in g.iter().enumerate() {
                    d[r * n + col] += gi;
                }
            });
        }
        Op::Reshape(x) => {
            accumulate(nodes, grads, *x, |d| kernels::add_into(d, g));
        }
    }
}

/// Result of [`Graph::backward`]: gradients of every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `v` is detached, constant, or not connected to the loss.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(&self.shapes[v.0], g.clone()).ok()
    }

    /// Like [`Gradients::get`] but with zeros in place of an absent gradient.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Gradients of all named parameters; unreached parameters get zeros.
    pub fn named(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, v)| (name.clone(), self.wrt(*v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(g: &Graph<f64>, data: &[f64], rg: bool) -> Var {
        g.leaf(Tensor::vector(data.to_vec()), rg)
    }

    #[test]
    fn conv1d_identity_kernel() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::matrix(1, 3, vec![3.0, -1.0, 4.0]).unwrap());
        let w = g.constant(Tensor::new(&[1, 1, 1], vec![1.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![0.0]));
        let y = g.conv1d(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, -1.0, 4.0]);
    }

    #[test]
    fn conv1d_causal_pair_kernel() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let w = g.constant(Tensor::new(&[1, 1, 2], vec![1.0, 1.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![0.0]));
        let y = g.conv1d(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn conv1d_input_gradient_matches_hand_derivation() {
        // d sum(out) / d input = [a + b, a + b, b] for kernel [a, b]
        let (a, b) = (0.7, -1.3);
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap(), true);
        let w = g.constant(Tensor::new(&[1, 1, 2], vec![a, b]).unwrap());
        let bias = g.constant(Tensor::vector(vec![0.0]));
        let y = g.conv1d(x, w, bias).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        let dx = grads.get(x).unwrap();
        for (got, want) in dx.data().iter().zip([a + b, a + b, b]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1d_reports_both_shapes_on_channel_mismatch() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3, 5]));
        let w = g.constant(Tensor::zeros(&[4, 2, 3]));
        let b = g.constant(Tensor::zeros(&[4]));
        let err = g.conv1d(x, w, b).unwrap_err().to_string();
        assert!(err.contains("[4, 2, 3]") && err.contains("[3, 5]"), "{err}");
    }

    #[test]
    fn conv1d_last_matches_last_column() {
        let g = Graph::<f64>::new();
        let data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.9).sin()).collect();
        let x = g.constant(Tensor::matrix(2, 6, data).unwrap());
        for k in [1, 2, 4, 8] {
            let wd: Vec<f64> = (0..3 * 2 * k).map(|i| (i as f64 * 0.31).cos()).collect();
            let w = g.constant(Tensor::new(&[3, 2, k], wd).unwrap());
            let b = g.constant(Tensor::vector(vec![0.1, -0.2, 0.3]));
            let full = g.value(g.conv1d(x, w, b).unwrap());
            let last = g.value(g.conv1d_last(x, w, b).unwrap());
            for (a, b) in full.column(5).iter().zip(last.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_forward_and_weight_gradient() {
        let g = Graph::<f64>::new();
        let x = vec1(&g, &[4.0, 5.0], false);
        let w = g.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap(), true);
        let b = vec1(&g, &[3.0], true);
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[17.0]);
        let grads = g.backward(g.sum(y)).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[4.0, 5.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0]);

        let id = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let zero = vec1(&g, &[0.0, 0.0], false);
        let x2 = vec1(&g, &[5.0, 7.0], false);
        assert_eq!(g.value(g.linear(x2, id, zero).unwrap()).data(), &[5.0, 7.0]);
    }

    #[test]
    fn relu_values_and_mask() {
        let g = Graph::<f64>::new();
        let x = vec1(&g, &[-1.0, 0.0, 2.0], true);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let dx = g.backward(g.sum(y)).unwrap().get(x).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 1.0]);
        let p = vec1(&g, &[0.5, 3.0], false);
        assert_eq!(g.value(g.relu(p)).data(), &[0.5, 3.0]);
    }

    #[test]
    fn mean_over_cases() {
        let g = Graph::<f64>::new();
        let a = vec1(&g, &[0.0], true);
        let b = vec1(&g, &[2.0], true);
        assert_eq!(g.value(g.mean_over(&[a]).unwrap()).data(), &[0.0]);
        let m = g.mean_over(&[a, b]).unwrap();
        assert_eq!(g.value(m).data(), &[1.0]);
        let grads = g.backward(g.sum(m)).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.5]);
        let cs: Vec<Var> = (0..4).map(|_| vec1(&g, &[1.5, -2.0], false)).collect();
        assert_eq!(g.value(g.mean_over(&cs).unwrap()).data(), &[1.5, -2.0]);
        assert!(g.mean_over(&[]).is_err());
    }

    #[test]
    fn normalize_columns_cases() {
        let g = Graph::<f64>::new();
        // columns: [3,4], [1,0], [0,0]
        let x = g.constant(Tensor::matrix(2, 3, vec![3.0, 1.0, 0.0, 4.0, 0.0, 0.0]).unwrap());
        let y = g.value(g.l2_normalize_columns(x, 1e-8).unwrap());
        let want = [0.6, 1.0, 0.0, 0.8, 0.0, 0.0];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(y.is_finite());
    }

    #[test]
    fn detach_blocks_gradient() {
        let g = Graph::<f64>::new();
        let x = vec1(&g, &[1.0, -2.0], true);
        let y = vec1(&g, &[3.0, 0.5], true);
        let dx = g.detach(x);
        let loss = g.sum(g.mul(dx, y).unwrap());
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.get(dx).is_none());
        assert_eq!(grads.get(y).unwrap().data(), &[1.0, -2.0]);
        let ddx = g.detach(dx);
        assert_eq!(g.value(ddx), g.value(dx));
        assert!(!g.requires_grad(ddx));
    }

    #[test]
    fn square_gradient_and_disconnected_leaf() {
        let g = Graph::<f64>::new();
        let x = vec1(&g, &[3.0], true);
        let unused = vec1(&g, &[1.0], true);
        let loss = g.mul(x, x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(unused).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let g = Graph::<f64>::new();
        let x = vec1(&g, &[1.0, 2.0], true);
        assert!(matches!(g.backward(x), Err(SimtsError::NonScalarLoss(_))));
    }

    #[test]
    fn backward_twice_is_identical() {
        let g = Graph::<f64>::new();
        let w = g.param("w", Tensor::new(&[2, 1, 3], vec![0.1, -0.4, 0.3, 0.9, 0.2, -0.5]).unwrap());
        let b = g.param("b", Tensor::vector(vec![0.05, -0.1]));
        let x = g.constant(Tensor::matrix(1, 4, vec![1.0, -1.0, 2.0, 0.5]).unwrap());
        let y = g.conv1d(x, w, b).unwrap();
        let n = g.l2_normalize_columns(y, 1e-8).unwrap();
        let loss = g.mean(g.mul(n, n).unwrap());
        let first = g.backward(loss).unwrap().named();
        let second = g.backward(loss).unwrap().named();
        assert_eq!(first, second);
        assert_eq!(first.keys().cloned().collect::<Vec<_>>(), vec!["b", "w"]);
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x) + sum(2x) -> grad 3
        let g = Graph::<f64>::new();
        let x = vec1(&g, &[1.0, 2.0], true);
        let loss = g.add(g.sum(x), g.sum(g.scale(x, 2.0))).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(x).unwrap().data(), &[3.0, 3.0]);
    }
}
