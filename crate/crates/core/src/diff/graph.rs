use rand::Rng;

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};
use crate::rng;

const NORM_EPS: f64 = 1e-5;

/// Training mode uses batch statistics and dropout; eval mode is a pure function
/// of inputs and parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(super) usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sin(Var),
    Cos(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    GatherRows {
        x: Var,
        indices: Vec<usize>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    LayerNorm {
        x: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    LayerScale {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    RowNorm(Var),
    RowNormalize {
        x: Var,
        norms: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<usize>,
    needs_grad: bool,
}

/// Running-statistic replacement produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferUpdate<T> {
    pub name: String,
    pub values: Vec<T>,
}

/// One forward record.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    seed: u64,
    step: u64,
    consumed: bool,
    buffer_updates: Vec<BufferUpdate<T>>,
}

/// Gradients of a scalar with respect to every recorded value.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(usize, usize)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(node, param) in &self.params {
            if let Some(g) = &self.grads[node] {
                let arr = store.array_mut(param);
                for (a, b) in arr.grad.iter_mut().zip(g) {
                    *a = *a + *b;
                }
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

impl<T: Real> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Graph::with_seed(mode, 0, 0)
    }

    /// `seed` and `step` key the dropout masks.
    pub fn with_seed(mode: Mode, seed: u64, step: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            seed,
            step,
            consumed: false,
            buffer_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Running-statistic updates collected by batch norms in training mode.
    pub fn take_buffer_updates(&mut self) -> Vec<BufferUpdate<T>> {
        std::mem::take(&mut self.buffer_updates)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        needs_grad: bool,
    ) -> Result<Var> {
        if !value.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(op_name));
        }
        self.nodes.push(Node {
            value,
            op,
            param: None,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// Differentiable input that is not a parameter.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("input", t, Op::Leaf, true)
    }

    /// Records a copy of parameter `name`; trainable arrays receive gradients.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        let arr = store.array(idx);
        let t = Tensor::new(arr.shape.clone(), arr.values.clone())?;
        let v = self.push("param", t, Op::Leaf, arr.trainable)?;
        self.nodes[v.0].param = Some(idx);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.data(a),
            (k, 1),
            self.data(b),
            (n, 1),
            T::zero(),
            &mut out,
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(
            "matmul",
            Tensor::new(vec![m, n], out)?,
            Op::MatMul(a, b),
            ng,
        )
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        let c = last_dim(&sx);
        if sb.len() != 1 || sb[0] != c {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let bias = self.data(b);
        let out: Vec<T> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % c])
            .collect();
        let ng = self.ng(x) || self.ng(b);
        self.push("add_bias", Tensor::new(sx, out)?, Op::AddBias(x, b), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(sa.to_vec())
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let shape = self.same_shape(op_name, a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(op_name, Tensor::new(shape, out)?, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, op_name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let ng = self.ng(x);
        self.push(op_name, Tensor::new(shape, out)?, op, ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.map("scale", x, |v| v * s, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(
            "relu",
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            Op::Relu(x),
        )
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.map("sin", x, |v| v.sin(), Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.map("cos", x, |v| v.cos(), Op::Cos(x))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape {
                op: "concat",
                lhs: base,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(
            "concat",
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: shape,
                rhs: vec![axis, start, len],
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        let ng = self.ng(x);
        self.push(
            "slice",
            Tensor::new(s, out)?,
            Op::Slice { x, axis, start },
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(x).to_vec();
        if shape.iter().product::<usize>() != from.iter().product::<usize>() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: from,
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        let ng = self.ng(x);
        self.push(
            "reshape",
            Tensor::new(shape.to_vec(), data)?,
            Op::Reshape(x),
            ng,
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: s,
                rhs: vec![2],
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.data(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.ng(x);
        self.push(
            "transpose",
            Tensor::new(vec![c, r], out)?,
            Op::Transpose(x),
            ng,
        )
    }

    /// Rows of a `[n, c]` tensor selected (with repetition) by `indices`.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || indices.iter().any(|&i| i >= s[0]) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: s,
                rhs: vec![indices.len()],
            });
        }
        let c = s[1];
        let src = self.data(x);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.ng(x);
        self.push(
            "gather_rows",
            Tensor::new(vec![indices.len(), c], out)?,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            ng,
        )
    }

    /// Maximum over `axis` (removed from the shape). Ties resolve to the lowest index,
    /// which receives the whole gradient.
    pub fn max_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Shape {
                op: "max_pool",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * n) * inner + i;
                for k in 1..n {
                    let idx = (o * n + k) * inner + i;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
        let mut s = shape;
        s.remove(axis);
        let ng = self.ng(x);
        self.push(
            "max_pool",
            Tensor::new(s, out)?,
            Op::MaxPool { x, argmax },
            ng,
        )
    }

    /// Mean over `axis` (removed from the shape).
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Shape {
                op: "mean",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let inv = T::one() / T::lit(n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src[(o * n + k) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let mut s = shape;
        s.remove(axis);
        let ng = self.ng(x);
        self.push("mean", Tensor::new(s, out)?, Op::Mean { x, axis }, ng)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: "softmax",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mx = (0..n).map(|k| src[at(k)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for k in 0..n {
                    let e = (src[at(k)] - mx).exp();
                    out[at(k)] = e;
                    sum = sum + e;
                }
                for k in 0..n {
                    out[at(k)] = out[at(k)] / sum;
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            "softmax",
            Tensor::new(shape, out)?,
            Op::Softmax { x, axis },
            ng,
        )
    }

    /// Batch normalization over every axis but the last. Parameters are read from
    /// `{prefix}.gamma`, `.beta`, `.running_mean`, `.running_var`. Training mode
    /// normalizes with batch statistics and queues running-average updates with
    /// momentum 0.9; eval mode uses the running statistics.
    pub fn batch_norm(&mut self, x: Var, store: &ParamStore<T>, prefix: &str) -> Result<Var> {
        let gamma = self.param(store, &format!("{prefix}.gamma"))?;
        let beta = self.param(store, &format!("{prefix}.beta"))?;
        let rm_name = format!("{prefix}.running_mean");
        let rv_name = format!("{prefix}.running_var");
        let lookup = |name: &str| {
            store
                .get(name)
                .map(|a| a.values.clone())
                .ok_or_else(|| Error::Config(format!("missing buffer `{name}`")))
        };
        let (running_mean, running_var) = (lookup(&rm_name)?, lookup(&rv_name)?);
        let shape = self.shape(x).to_vec();
        let c = last_dim(&shape);
        if self.shape(gamma) != [c] || running_mean.len() != c {
            return Err(Error::Shape {
                op: "batch_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let rows = self.value(x).numel() / c.max(1);
        if rows == 0 {
            return Err(Error::Shape {
                op: "batch_norm",
                lhs: shape,
                rhs: vec![c],
            });
        }
        let src = self.data(x);
        let eps = T::lit(NORM_EPS);
        let train = self.mode == Mode::Train;
        let (mean, inv_std) = if train {
            let n = T::lit(rows as f64);
            let mut mean = vec![T::zero(); c];
            for r in 0..rows {
                for j in 0..c {
                    mean[j] = mean[j] + src[r * c + j];
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / n);
            let mut var = vec![T::zero(); c];
            for r in 0..rows {
                for j in 0..c {
                    let d = src[r * c + j] - mean[j];
                    var[j] = var[j] + d * d;
                }
            }
            let biased: Vec<T> = var.iter().map(|v| *v / n).collect();
            let unbiased_scale = if rows > 1 {
                n / T::lit(rows as f64 - 1.0)
            } else {
                T::one()
            };
            let m = T::lit(0.9);
            let new_mean = running_mean
                .iter()
                .zip(&mean)
                .map(|(r, b)| m * *r + (T::one() - m) * *b)
                .collect();
            let new_var = running_var
                .iter()
                .zip(&biased)
                .map(|(r, b)| m * *r + (T::one() - m) * *b * unbiased_scale)
                .collect();
            self.buffer_updates.push(BufferUpdate {
                name: rm_name,
                values: new_mean,
            });
            self.buffer_updates.push(BufferUpdate {
                name: rv_name,
                values: new_var,
            });
            let inv_std = biased
                .iter()
                .map(|v| T::one() / (*v + eps).sqrt())
                .collect();
            (mean, inv_std)
        } else {
            let inv_std: Vec<T> = running_var
                .iter()
                .map(|v| T::one() / (*v + eps).sqrt())
                .collect();
            (running_mean, inv_std)
        };
        let src = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            for j in 0..c {
                let i = r * c + j;
                xhat[i] = (src[i] - mean[j]) * inv_std[j];
                out[i] = xhat[i] * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            "batch_norm",
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            ng,
        )
    }

    /// Normalizes each row (last axis) to zero mean and unit variance, without affine.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = last_dim(&shape);
        let rows = self.value(x).numel() / c.max(1);
        let src = self.data(x);
        let eps = T::lit(NORM_EPS);
        let n = T::lit(c as f64);
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                xhat[r * c + j] = (row[j] - mean) * is;
            }
        }
        let ng = self.ng(x);
        self.push(
            "layer_norm",
            Tensor::new(shape, xhat.clone())?,
            Op::LayerNorm { x, xhat, inv_std },
            ng,
        )
    }

    /// Per-channel affine map `x * gamma + beta` along the last axis.
    pub fn layer_scale(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = last_dim(&shape);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape {
                op: "layer_scale",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let out = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[i % c] + b[i % c])
            .collect();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            "layer_scale",
            Tensor::new(shape, out)?,
            Op::LayerScale { x, gamma, beta },
            ng,
        )
    }

    /// Inverted dropout in training mode, identity in eval mode. The mask is keyed
    /// by (graph seed, `layer_id`, graph step).
    pub fn dropout(&mut self, x: Var, rate: f64, layer_id: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let mut r = rng::stream(rng::mix(self.seed, layer_id), self.step);
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| {
                if r.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let out = self
            .data(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let ng = self.ng(x);
        self.push(
            "dropout",
            Tensor::new(shape, out)?,
            Op::Dropout { x, mask },
            ng,
        )
    }

    /// Euclidean norm over the last axis (removed). The subgradient at zero is zero.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = last_dim(&shape);
        let rows = self.value(x).numel() / c.max(1);
        let src = self.data(x);
        let out = (0..rows)
            .map(|r| {
                src[r * c..(r + 1) * c]
                    .iter()
                    .map(|v| *v * *v)
                    .sum::<T>()
                    .sqrt()
            })
            .collect();
        let mut s = shape;
        s.pop();
        let ng = self.ng(x);
        self.push("row_norm", Tensor::new(s, out)?, Op::RowNorm(x), ng)
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = last_dim(&shape);
        let rows = self.value(x).numel() / c.max(1);
        let src = self.data(x);
        let norms: Vec<T> = (0..rows)
            .map(|r| {
                src[r * c..(r + 1) * c]
                    .iter()
                    .map(|v| *v * *v)
                    .sum::<T>()
                    .sqrt()
            })
            .collect();
        if norms.iter().any(|n| n.as_f64() < 1e-9) {
            return Err(Error::DegenerateTransform(
                "row_normalize of a near-zero row".into(),
            ));
        }
        let out = src
            .iter()
            .enumerate()
            .map(|(i, &v)| v / norms[i / c])
            .collect();
        let ng = self.ng(x);
        self.push(
            "row_normalize",
            Tensor::new(shape, out)?,
            Op::RowNormalize { x, norms },
            ng,
        )
    }

    /// Reverse sweep from a single-element `loss`. A graph supports one sweep.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage(
                "backward called on a value outside this graph".into(),
            ));
        }
        if self.consumed {
            return Err(Error::Usage("backward already ran on this graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.shape(loss).to_vec(),
                rhs: vec![1],
            });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.filter(|_| n.needs_grad).map(|p| (i, p)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing
                    .iter_mut()
                    .zip(&contrib)
                    .for_each(|(a, b)| *a = *a + *b),
                slot => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.ng(*a) {
                    // dA = dC Bᵀ
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        g,
                        (n, 1),
                        self.data(*b),
                        (1, n),
                        T::zero(),
                        &mut da,
                    );
                    acc(*a, da);
                }
                if self.ng(*b) {
                    // dB = Aᵀ dC
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        self.data(*a),
                        (1, k),
                        g,
                        (n, 1),
                        T::zero(),
                        &mut db,
                    );
                    acc(*b, db);
                }
            }
            Op::AddBias(x, b) => {
                let c = self.value(*b).numel();
                let mut db = vec![T::zero(); c];
                for (i, v) in g.iter().enumerate() {
                    db[i % c] = db[i % c] + *v;
                }
                acc(*x, g.to_vec());
                acc(*b, db);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -*v).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, g.iter().zip(db).map(|(x, y)| *x * *y).collect());
                acc(*b, g.iter().zip(da).map(|(x, y)| *x * *y).collect());
            }
            Op::Scale(x, s) => acc(*x, g.iter().map(|v| *v * *s).collect()),
            Op::Relu(x) => {
                let src = self.data(*x);
                acc(
                    *x,
                    g.iter()
                        .zip(src)
                        .map(|(d, v)| if *v > T::zero() { *d } else { T::zero() })
                        .collect(),
                );
            }
            Op::Sin(x) => acc(
                *x,
                g.iter()
                    .zip(self.data(*x))
                    .map(|(d, v)| *d * v.cos())
                    .collect(),
            ),
            Op::Cos(x) => acc(
                *x,
                g.iter()
                    .zip(self.data(*x))
                    .map(|(d, v)| -*d * v.sin())
                    .collect(),
            ),
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    let mut dv = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        dv.extend_from_slice(&g[base..base + len * inner]);
                    }
                    acc(v, dv);
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let src_shape = self.shape(*x);
                let (outer, n, inner) = split_axis(src_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let srco = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[srco..srco + len * inner]);
                }
                acc(*x, dx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                acc(*x, dx);
            }
            Op::GatherRows { x, indices } => {
                let c = self.shape(*x)[1];
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] = dx[i * c + j] + g[k * c + j];
                    }
                }
                acc(*x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (k, &i) in argmax.iter().enumerate() {
                    dx[i] = dx[i] + g[k];
                }
                acc(*x, dx);
            }
            Op::Mean { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let inv = T::one() / T::lit(n as f64);
                let mut dx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            dx[(o * n + k) * inner + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let mut dx = vec![T::zero(); out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot = (0..n).map(|k| g[at(k)] * out[at(k)]).sum::<T>();
                        for k in 0..n {
                            dx[at(k)] = out[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let rows = xhat.len() / c;
                let gm = self.data(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        let i = r * c + j;
                        dgamma[j] = dgamma[j] + g[i] * xhat[i];
                        dbeta[j] = dbeta[j] + g[i];
                    }
                }
                if self.ng(*x) {
                    let mut dx = vec![T::zero(); xhat.len()];
                    if *train {
                        let n = T::lit(rows as f64);
                        for r in 0..rows {
                            for j in 0..c {
                                let i = r * c + j;
                                // dxhat = g * gamma; sum(dxhat) = gamma * dbeta; sum(dxhat xhat) = gamma * dgamma.
                                dx[i] = gm[j] * inv_std[j] / n
                                    * (n * g[i] - dbeta[j] - xhat[i] * dgamma[j]);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for j in 0..c {
                                let i = r * c + j;
                                dx[i] = g[i] * gm[j] * inv_std[j];
                            }
                        }
                    }
                    acc(*x, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let rows = inv_std.len();
                let c = xhat.len() / rows.max(1);
                let n = T::lit(c as f64);
                let mut dx = vec![T::zero(); xhat.len()];
                for r in 0..rows {
                    let gs = &g[r * c..(r + 1) * c];
                    let xs = &xhat[r * c..(r + 1) * c];
                    let sum_g = gs.iter().copied().sum::<T>();
                    let sum_gx = gs.iter().zip(xs).map(|(a, b)| *a * *b).sum::<T>();
                    for j in 0..c {
                        dx[r * c + j] = inv_std[r] / n * (n * gs[j] - sum_g - xs[j] * sum_gx);
                    }
                }
                acc(*x, dx);
            }
            Op::LayerScale { x, gamma, beta } => {
                let c = self.value(*gamma).numel();
                let (src, gm) = (self.data(*x), self.data(*gamma));
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); src.len()];
                for (i, d) in g.iter().enumerate() {
                    let j = i % c;
                    dgamma[j] = dgamma[j] + *d * src[i];
                    dbeta[j] = dbeta[j] + *d;
                    dx[i] = *d * gm[j];
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Dropout { x, mask } => acc(*x, g.iter().zip(mask).map(|(a, m)| *a * *m).collect()),
            Op::RowNorm(x) => {
                let src = self.data(*x);
                let c = last_dim(self.shape(*x));
                let dx = src
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let n = out[i / c];
                        if n > T::zero() {
                            g[i / c] * *v / n
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                acc(*x, dx);
            }
            Op::RowNormalize { x, norms } => {
                let c = last_dim(self.shape(*x));
                let mut dx = vec![T::zero(); out.len()];
                for (r, n) in norms.iter().enumerate() {
                    let ys = &out[r * c..(r + 1) * c];
                    let gs = &g[r * c..(r + 1) * c];
                    let dot = ys.iter().zip(gs).map(|(a, b)| *a * *b).sum::<T>();
                    for j in 0..c {
                        dx[r * c + j] = (gs[j] - ys[j] * dot) / *n;
                    }
                }
                acc(*x, dx);
            }
        }
    }
}
