use super::{gemm, strides, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    DivGuarded(Var, Var),
    Scale(Var, T),
    SqrtGuarded(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    Slice(Var, usize, usize),
    StopGradient(Var),
    Gelu(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv3d(Var, Var),
    Conv2d(Var, Var),
    AvgPool2(Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::DivGuarded(a, b)
            | Op::MatMul(a, b)
            | Op::Conv3d(a, b)
            | Op::Conv2d(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::SqrtGuarded(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumAxis(x, _)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::GatherRows(x, _)
            | Op::ScatterRows(x, _)
            | Op::Slice(x, _, _)
            | Op::StopGradient(x)
            | Op::Gelu(x)
            | Op::Softmax(x, _)
            | Op::AvgPool2(x) => vec![*x],
            Op::Concat(xs, _) => xs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Single-owner computation tape.
///
/// Nodes are appended in creation order, so the node list is always a
/// topological order of the DAG. `backward` may run once per graph; running it
/// again without `zero_grad` is an error.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

// tanh-approximation GELU constants: sqrt(2/pi) and the cubic coefficient.
const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044715;

/// `tanh` through one `exp`, several times cheaper than the libm `tanh`.
/// The absolute error stays within a few ulps of 1.
fn tanh_fast<T: Real>(z: T) -> T {
    let e = (-(z.abs() + z.abs())).exp();
    let t = (T::one() - e) / (T::one() + e);
    if z < T::zero() {
        -t
    } else {
        t
    }
}

/// Reference GELU, tanh approximation:
/// `0.5·x·(1 + tanh(sqrt(2/π)·(x + 0.044715·x³)))`.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::from_f64c(GELU_SQRT_2_OVER_PI);
    let a = T::from_f64c(GELU_CUBIC);
    let half = T::from_f64c(0.5);
    half * x * (T::one() + tanh_fast(c * (x + a * x * x * x)))
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64c(GELU_SQRT_2_OVER_PI);
    let a = T::from_f64c(GELU_CUBIC);
    let half = T::from_f64c(0.5);
    let three = T::from_f64c(3.0);
    let t = tanh_fast(c * (x + a * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat source offset for every element of `out_shape` when `in_shape` is
/// broadcast against it.
fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0usize; rank];
    for i in 0..rank {
        if i + in_shape.len() >= rank {
            let j = i + in_shape.len() - rank;
            if in_shape[j] != 1 {
                eff[i] = in_strides[j];
            }
        }
    }
    let n: usize = out_shape.iter().product();
    let mut offs = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offs.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offs
}

/// Source offset for every output element of an axis permutation.
fn permute_offsets(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = in_shape.iter().product();
    let rank = perm.len();
    let mut offs = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offs.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offs
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn grad_slot<'a, T: Real>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = match &op {
            Op::Leaf | Op::StopGradient(_) => false,
            other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a leaf that receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        v
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any
    /// contribution reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let value = if sa == sb {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            let data = da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect();
            Tensor { shape: sa, data }
        } else {
            let out = broadcast_shape(&sa, &sb).ok_or(TensorError::Shape {
                op: name,
                lhs: sa.clone(),
                rhs: sb.clone(),
            })?;
            let oa = broadcast_offsets(&out, &sa);
            let ob = broadcast_offsets(&out, &sb);
            let (da, db) = (self.value(a).data(), self.value(b).data());
            let data = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect();
            Tensor { shape: out, data }
        };
        Ok(self.push(value, make(a, b)))
    }

    /// Elementwise sum with NumPy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// `a / (b + eps)` with `eps = T::GUARD_EPS`; intended for non-negative
    /// denominators such as norms.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let eps = T::GUARD_EPS;
        self.binary("div", a, b, move |x, y| x / (y + eps), Op::DivGuarded)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let data = v.data.iter().map(|&e| e * c).collect();
        let value = Tensor {
            shape: v.shape.clone(),
            data,
        };
        self.push(value, Op::Scale(x, c))
    }

    /// Square root of a non-negative input. The backward pass divides by
    /// `2·(sqrt(x) + eps)`, so a zero input yields a finite gradient.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data.iter().map(|&e| e.max(T::zero()).sqrt()).collect();
        let value = Tensor {
            shape: v.shape.clone(),
            data,
        };
        self.push(value, Op::SqrtGuarded(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data.iter().map(|&e| gelu_scalar(e)).collect();
        let value = Tensor {
            shape: v.shape.clone(),
            data,
        };
        self.push(value, Op::Gelu(x))
    }

    /// Identity forward; blocks all gradient flow backward through this edge.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient(x))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(TensorError::EmptyAxis { op: "mean" });
        }
        let s = v.data.iter().copied().sum::<T>() / T::from_usize(v.len());
        Ok(self.push(Tensor::scalar(s), Op::Mean(x)))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "sum_axis",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = &self.value(x).data;
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(row) {
                    *d = *d + s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::SumAxis(x, axis),
        ))
    }

    // ---------------------------------------------------------------- linear algebra

    /// Matrix product over the last two axes. Either both operands carry the
    /// same batch dimensions, or one of them is a plain matrix shared across
    /// the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || TensorError::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch_shape = if bb.is_empty() {
            ba.to_vec()
        } else if ba.is_empty() || ba == bb {
            bb.to_vec()
        } else {
            return Err(err());
        };
        let batch: usize = batch_shape.iter().product();
        let mut out_shape = batch_shape;
        out_shape.extend([m, n]);
        let mut data = vec![T::zero(); batch * m * n];
        let (da, db) = (&self.value(a).data, &self.value(b).data);
        if bb.is_empty() {
            gemm(batch * m, k, n, da, false, db, false, &mut data, false);
        } else {
            let a_step = if ba.is_empty() { 0 } else { m * k };
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &da[i * a_step..],
                    false,
                    &db[i * k * n..],
                    false,
                    &mut data[i * m * n..],
                    false,
                );
            }
        }
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::MatMul(a, b),
        ))
    }

    // ---------------------------------------------------------------- shape ops

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            });
        }
        let offs = permute_offsets(&shape, perm);
        let src = &self.value(x).data;
        let data = offs.iter().map(|&o| src[o]).collect();
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Permute(x, perm.to_vec()),
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or(TensorError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (p, q))| i == axis || p == q);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let val = self.value(v);
                let block = val.shape[axis] * inner;
                data.extend_from_slice(&val.data[o * block..(o + 1) * block]);
            }
        }
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Concat(xs.to_vec(), axis),
        ))
    }

    /// Selects rows (axis 0) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: "scalar input".into(),
            });
        }
        let row: usize = shape[1..].iter().product();
        if let Some(&bad) = idx.iter().find(|&&i| i >= shape[0]) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {} rows", shape[0]),
            });
        }
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::GatherRows(x, idx.to_vec()),
        ))
    }

    /// Places row `i` of `x` at row `idx[i]` of a zero tensor with `rows`
    /// rows. Indices must be distinct.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || shape[0] != idx.len() {
            return Err(TensorError::Invalid {
                op: "scatter_rows",
                msg: format!("{} indices for input shape {shape:?}", idx.len()),
            });
        }
        let mut seen = vec![false; rows];
        for &i in idx {
            if i >= rows || std::mem::replace(&mut seen[i], true) {
                return Err(TensorError::Invalid {
                    op: "scatter_rows",
                    msg: format!("index {i} out of range or repeated (rows = {rows})"),
                });
            }
        }
        let row: usize = shape[1..].iter().product();
        let src = &self.value(x).data;
        let mut data = vec![T::zero(); rows * row];
        for (r, &i) in idx.iter().enumerate() {
            data[i * row..(i + 1) * row].copy_from_slice(&src[r * row..(r + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows;
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::ScatterRows(x, idx.to_vec()),
        ))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} on axis {axis} of {shape:?}"),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Slice(x, axis, start),
        ))
    }

    // ---------------------------------------------------------------- nn ops

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax" });
        }
        let src = &self.value(x).data;
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    mx = mx.max(src[at(j)]);
                }
                let mut z = T::zero();
                for j in 0..n {
                    let e = (src[at(j)] - mx).exp();
                    data[at(j)] = e;
                    z = z + e;
                }
                for j in 0..n {
                    data[at(j)] = data[at(j)] / z;
                }
            }
        }
        Ok(self.push(Tensor { shape, data }, Op::Softmax(x, axis)))
    }

    /// Normalizes the last axis to zero mean and unit variance (biased
    /// variance, `eps` added under the square root), then applies `gamma`
    /// and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(TensorError::EmptyAxis { op: "layer_norm" })?;
        if d == 0 {
            return Err(TensorError::EmptyAxis { op: "layer_norm" });
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let rows = self.value(x).len() / d;
        let src = &self.value(x).data;
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let dn = T::from_usize(d);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut data = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                data[r * d + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor { shape, data },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Zero-padded 3×3×3 cross-correlation (no kernel flip), stride 1.
    /// `x: [C, D, H, W]`, `kernels: [K, C, 3, 3, 3]` → `[K, D, H, W]`.
    pub fn conv3d(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernels).to_vec());
        if sx.len() != 4 || sk.len() != 5 || sk[1] != sx[0] || sk[2..] != [3, 3, 3] {
            return Err(TensorError::Shape {
                op: "conv3d",
                lhs: sx,
                rhs: sk,
            });
        }
        if sx[1..].iter().any(|&s| s == 0) {
            return Err(TensorError::Invalid {
                op: "conv3d",
                msg: format!("spatial dims must be at least 1, got {:?}", &sx[1..]),
            });
        }
        let (c, d, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let kn = sk[0];
        let (xs, ks) = (&self.value(x).data, &self.value(kernels).data);
        let mut data = vec![T::zero(); kn * d * h * w];
        for k in 0..kn {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = T::zero();
                        for ci in 0..c {
                            for dz in 0..3 {
                                let zz = z as isize + dz as isize - 1;
                                if zz < 0 || zz >= d as isize {
                                    continue;
                                }
                                for dy in 0..3 {
                                    let yy = y as isize + dy as isize - 1;
                                    if yy < 0 || yy >= h as isize {
                                        continue;
                                    }
                                    for dx in 0..3 {
                                        let xi = xx as isize + dx as isize - 1;
                                        if xi < 0 || xi >= w as isize {
                                            continue;
                                        }
                                        let src = ((ci * d + zz as usize) * h + yy as usize) * w
                                            + xi as usize;
                                        let kk = (((k * c + ci) * 3 + dz) * 3 + dy) * 3 + dx;
                                        acc = acc + xs[src] * ks[kk];
                                    }
                                }
                            }
                        }
                        data[((k * d + z) * h + y) * w + xx] = acc;
                    }
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![kn, d, h, w],
                data,
            },
            Op::Conv3d(x, kernels),
        ))
    }

    /// Zero-padded 3×3 cross-correlation applied independently to every
    /// slice. `x: [S, Cin, H, W]`, `weight: [Cout, Cin, 3, 3]` →
    /// `[S, Cout, H, W]`.
    pub fn conv2d(&mut self, x: Var, weight: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2..] != [3, 3] {
            return Err(TensorError::Shape {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (s, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let cout = sw[0];
        let (xs, ws) = (&self.value(x).data, &self.value(weight).data);
        let hw = h * w;
        let mut col = vec![T::zero(); cin * 9 * hw];
        let mut data = vec![T::zero(); s * cout * hw];
        for si in 0..s {
            im2col(&xs[si * cin * hw..(si + 1) * cin * hw], cin, h, w, &mut col);
            gemm(
                cout,
                cin * 9,
                hw,
                ws,
                false,
                &col,
                false,
                &mut data[si * cout * hw..],
                false,
            );
        }
        Ok(self.push(
            Tensor {
                shape: vec![s, cout, h, w],
                data,
            },
            Op::Conv2d(x, weight),
        ))
    }

    /// 2×2 average pooling over the last two axes of `[S, C, H, W]`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || sx[2] % 2 != 0 || sx[3] % 2 != 0 {
            return Err(TensorError::Invalid {
                op: "avg_pool2",
                msg: format!("needs [S, C, even H, even W], got {sx:?}"),
            });
        }
        let (planes, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / 2, w / 2);
        let src = &self.value(x).data;
        let quarter = T::from_f64c(0.25);
        let mut data = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    data[(p * oh + y) * ow + xx] =
                        (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * quarter;
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![sx[0], sx[1], oh, ow],
                data,
            },
            Op::AvgPool2(x),
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let loss_shape = self.shape(loss).to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::Rank(loss_shape));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if let Some(bad) = self.nodes[i].op.inputs().into_iter().find(|v| v.0 >= i) {
                self.grads[i] = Some(g);
                return Err(TensorError::Graph(format!(
                    "node {i} consumes node {} which is not earlier on the tape",
                    bad.0
                )));
            }
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        let Graph { nodes, grads, .. } = self;
        let nodes: &[Node<T>] = nodes;
        let node = &nodes[i];
        let out_shape = node.value.shape();
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::StopGradient(_) => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                for (v, s) in [(*a, T::one()), (*b, sign)] {
                    let shape = val(v).shape().to_vec();
                    if let Some(gv) = grad_slot(grads, nodes, v) {
                        if shape == out_shape {
                            for (d, &e) in gv.iter_mut().zip(g) {
                                *d = *d + s * e;
                            }
                        } else {
                            let offs = broadcast_offsets(out_shape, &shape);
                            for (&o, &e) in offs.iter().zip(g) {
                                gv[o] = gv[o] + s * e;
                            }
                        }
                    }
                }
            }
            Op::Mul(a, b) | Op::DivGuarded(a, b) => {
                let is_div = matches!(node.op, Op::DivGuarded(..));
                let eps = T::GUARD_EPS;
                let (va, vb) = (val(*a), val(*b));
                let same = va.shape() == out_shape && vb.shape() == out_shape;
                let (oa, ob) = if same {
                    (Vec::new(), Vec::new())
                } else {
                    (
                        broadcast_offsets(out_shape, va.shape()),
                        broadcast_offsets(out_shape, vb.shape()),
                    )
                };
                let ia = |o: usize| if same { o } else { oa[o] };
                let ib = |o: usize| if same { o } else { ob[o] };
                let (da, db) = (va.data(), vb.data());
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    for (o, &e) in g.iter().enumerate() {
                        let y = db[ib(o)];
                        let d = if is_div { e / (y + eps) } else { e * y };
                        ga[ia(o)] = ga[ia(o)] + d;
                    }
                }
                if let Some(gb) = grad_slot(grads, nodes, *b) {
                    for (o, &e) in g.iter().enumerate() {
                        let (x, y) = (da[ia(o)], db[ib(o)]);
                        let d = if is_div {
                            let den = y + eps;
                            -e * x / (den * den)
                        } else {
                            e * x
                        };
                        gb[ib(o)] = gb[ib(o)] + d;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for (d, &e) in gx.iter_mut().zip(g) {
                        *d = *d + e * *c;
                    }
                }
            }
            Op::SqrtGuarded(x) => {
                let y = node.value.data();
                let half = T::from_f64c(0.5);
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for ((d, &e), &yy) in gx.iter_mut().zip(g).zip(y) {
                        *d = *d + e * half / (yy + T::GUARD_EPS);
                    }
                }
            }
            Op::Gelu(x) => {
                let xs = val(*x).data();
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for ((d, &e), &xv) in gx.iter_mut().zip(g).zip(xs) {
                        *d = *d + e * gelu_grad(xv);
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                let n = val(*x).len();
                let e = if matches!(node.op, Op::Mean(_)) {
                    g[0] / T::from_usize(n)
                } else {
                    g[0]
                };
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    gx.iter_mut().for_each(|d| *d = *d + e);
                }
            }
            Op::SumAxis(x, axis) => {
                let shape = val(*x).shape().to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for o in 0..outer {
                        for j in 0..n {
                            let dst = &mut gx[(o * n + j) * inner..(o * n + j + 1) * inner];
                            for (d, &e) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d = *d + e;
                            }
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (sa, sb) = (va.shape(), vb.shape());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let a_batched = sa.len() > 2;
                let b_batched = sb.len() > 2;
                let (da, db) = (va.data(), vb.data());
                if !b_batched {
                    let rows = va.len() / k;
                    if let Some(ga) = grad_slot(grads, nodes, *a) {
                        gemm(rows, n, k, g, false, db, true, ga, true);
                    }
                    if let Some(gb) = grad_slot(grads, nodes, *b) {
                        gemm(k, rows, n, da, true, g, false, gb, true);
                    }
                } else {
                    let batch = vb.len() / (k * n);
                    let a_step = if a_batched { m * k } else { 0 };
                    if let Some(ga) = grad_slot(grads, nodes, *a) {
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..],
                                false,
                                &db[i * k * n..],
                                true,
                                &mut ga[i * a_step..],
                                true,
                            );
                        }
                    }
                    if let Some(gb) = grad_slot(grads, nodes, *b) {
                        for i in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &da[i * a_step..],
                                true,
                                &g[i * m * n..],
                                false,
                                &mut gb[i * k * n..],
                                true,
                            );
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for (d, &e) in gx.iter_mut().zip(g) {
                        *d = *d + e;
                    }
                }
            }
            Op::Permute(x, perm) => {
                let offs = permute_offsets(val(*x).shape(), perm);
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for (&o, &e) in offs.iter().zip(g) {
                        gx[o] = gx[o] + e;
                    }
                }
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut start = 0;
                for &v in xs {
                    let len = val(v).shape()[*axis];
                    if let Some(gx) = grad_slot(grads, nodes, v) {
                        let block = len * inner;
                        for o in 0..outer {
                            let src = &g[(o * total + start) * inner..][..block];
                            for (d, &e) in gx[o * block..(o + 1) * block].iter_mut().zip(src) {
                                *d = *d + e;
                            }
                        }
                    }
                    start += len;
                }
            }
            Op::GatherRows(x, idx) => {
                let row = if idx.is_empty() { 0 } else { g.len() / idx.len() };
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..row {
                            gx[i * row + j] = gx[i * row + j] + g[r * row + j];
                        }
                    }
                }
            }
            Op::ScatterRows(x, idx) => {
                let row = if idx.is_empty() { 0 } else { val(*x).len() / idx.len() };
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..row {
                            gx[r * row + j] = gx[r * row + j] + g[i * row + j];
                        }
                    }
                }
            }
            Op::Slice(x, axis, start) => {
                let in_shape = val(*x).shape().to_vec();
                let (outer, n, inner) = split_axis(&in_shape, *axis);
                let len = out_shape[*axis];
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for o in 0..outer {
                        let dst = &mut gx[(o * n + start) * inner..(o * n + start + len) * inner];
                        for (d, &e) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                            *d = *d + e;
                        }
                    }
                }
            }
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = split_axis(out_shape, *axis);
                let y = node.value.data();
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let mut dot = T::zero();
                            for j in 0..n {
                                dot = dot + g[at(j)] * y[at(j)];
                            }
                            for j in 0..n {
                                gx[at(j)] = gx[at(j)] + y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *out_shape.last().unwrap();
                let rows = rstd.len();
                let gam = val(*gamma).data();
                if let Some(gg) = grad_slot(grads, nodes, *gamma) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] = gg[j] + g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = grad_slot(grads, nodes, *beta) {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] = gb[j] + g[r * d + j];
                        }
                    }
                }
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    let dn = T::from_usize(d);
                    for r in 0..rows {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = g[r * d + j] * gam[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * xhat[r * d + j];
                        }
                        mean_dh = mean_dh / dn;
                        mean_dh_h = mean_dh_h / dn;
                        for j in 0..d {
                            let dh = g[r * d + j] * gam[j];
                            gx[r * d + j] = gx[r * d + j]
                                + rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Conv3d(x, kernels) => {
                let (vx, vk) = (val(*x), val(*kernels));
                let (c, d, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
                let kn = vk.shape()[0];
                let (xs, ks) = (vx.data(), vk.data());
                let want_x = nodes[x.0].requires_grad;
                let want_k = nodes[kernels.0].requires_grad;
                let mut gx_buf = if want_x { vec![T::zero(); xs.len()] } else { Vec::new() };
                let mut gk_buf = if want_k { vec![T::zero(); ks.len()] } else { Vec::new() };
                for k in 0..kn {
                    for z in 0..d {
                        for y in 0..h {
                            for xx in 0..w {
                                let e = g[((k * d + z) * h + y) * w + xx];
                                if e == T::zero() {
                                    continue;
                                }
                                for ci in 0..c {
                                    for dz in 0..3 {
                                        let zz = z as isize + dz as isize - 1;
                                        if zz < 0 || zz >= d as isize {
                                            continue;
                                        }
                                        for dy in 0..3 {
                                            let yy = y as isize + dy as isize - 1;
                                            if yy < 0 || yy >= h as isize {
                                                continue;
                                            }
                                            for dx in 0..3 {
                                                let xi = xx as isize + dx as isize - 1;
                                                if xi < 0 || xi >= w as isize {
                                                    continue;
                                                }
                                                let src = ((ci * d + zz as usize) * h + yy as usize)
                                                    * w
                                                    + xi as usize;
                                                let kk =
                                                    (((k * c + ci) * 3 + dz) * 3 + dy) * 3 + dx;
                                                if want_x {
                                                    gx_buf[src] = gx_buf[src] + e * ks[kk];
                                                }
                                                if want_k {
                                                    gk_buf[kk] = gk_buf[kk] + e * xs[src];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for (d, &e) in gx.iter_mut().zip(&gx_buf) {
                        *d = *d + e;
                    }
                }
                if let Some(gk) = grad_slot(grads, nodes, *kernels) {
                    for (d, &e) in gk.iter_mut().zip(&gk_buf) {
                        *d = *d + e;
                    }
                }
            }
            Op::Conv2d(x, weight) => {
                let (vx, vw) = (val(*x), val(*weight));
                let (s, cin, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
                let cout = vw.shape()[0];
                let hw = h * w;
                let (xs, ws) = (vx.data(), vw.data());
                let want_x = nodes[x.0].requires_grad;
                let want_w = nodes[weight.0].requires_grad;
                let mut col = vec![T::zero(); cin * 9 * hw];
                let mut gw_buf = if want_w { vec![T::zero(); ws.len()] } else { Vec::new() };
                let mut gx_buf = if want_x { vec![T::zero(); xs.len()] } else { Vec::new() };
                for si in 0..s {
                    let gs = &g[si * cout * hw..(si + 1) * cout * hw];
                    if want_w {
                        im2col(&xs[si * cin * hw..(si + 1) * cin * hw], cin, h, w, &mut col);
                        gemm(cout, hw, cin * 9, gs, false, &col, true, &mut gw_buf, true);
                    }
                    if want_x {
                        gemm(cin * 9, cout, hw, ws, true, gs, false, &mut col, false);
                        col2im_add(&col, cin, h, w, &mut gx_buf[si * cin * hw..(si + 1) * cin * hw]);
                    }
                }
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for (d, &e) in gx.iter_mut().zip(&gx_buf) {
                        *d = *d + e;
                    }
                }
                if let Some(gw) = grad_slot(grads, nodes, *weight) {
                    for (d, &e) in gw.iter_mut().zip(&gw_buf) {
                        *d = *d + e;
                    }
                }
            }
            Op::AvgPool2(x) => {
                let sx = val(*x).shape().to_vec();
                let (planes, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::from_f64c(0.25);
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for p in 0..planes {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let e = g[(p * oh + y) * ow + xx] * quarter;
                                let i = p * h * w + 2 * y * w + 2 * xx;
                                for j in [i, i + 1, i + w, i + w + 1] {
                                    gx[j] = gx[j] + e;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Valid output range `[lo, hi)` along an axis of length `n` for kernel
/// offset `k ∈ {0, 1, 2}` with padding 1.
fn conv_range(n: usize, k: usize) -> (usize, usize) {
    match k {
        0 => (1.min(n), n),
        1 => (0, n),
        _ => (0, n.saturating_sub(1)),
    }
}

/// Unfolds a `[cin, h, w]` plane stack into `[cin·9, h·w]` columns with zero
/// padding 1.
fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            let (y0, y1) = conv_range(h, ky);
            for kx in 0..3 {
                let (x0, x1) = conv_range(w, kx);
                let row = &mut col[((c * 3 + ky) * 3 + kx) * hw..][..hw];
                row.iter_mut().for_each(|v| *v = T::zero());
                for y in y0..y1 {
                    let sy = y + ky - 1;
                    let src = &plane[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                    row[y * w + x0..y * w + x1].copy_from_slice(src);
                }
            }
        }
    }
}

fn col2im_add<T: Real>(col: &[T], cin: usize, h: usize, w: usize, out: &mut [T]) {
    let hw = h * w;
    for c in 0..cin {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            let (y0, y1) = conv_range(h, ky);
            for kx in 0..3 {
                let (x0, x1) = conv_range(w, kx);
                let row = &col[((c * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in y0..y1 {
                    let sy = y + ky - 1;
                    let dst = &mut plane[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                    for (d, &v) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}
