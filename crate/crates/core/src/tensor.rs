//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable value plus, for results of differentiable
//! operations, the record needed to push gradients back to its inputs. The
//! record is owned by the output, so dropping the loss drops the graph.
//! Broadcasting is limited to a right-hand operand whose shape equals the
//! trailing dimensions of the left-hand one.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Record {
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    record: Option<Record>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn mismatch(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch(format!("{op}: {a:?} vs {b:?}"))
}

impl Tensor {
    fn make(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, record: Option<Record>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            record,
        }))
    }

    /// A constant (no gradient is tracked through it).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::make(shape.to_vec(), data, false, None))
    }

    /// A leaf whose gradient is populated by [`Tensor::backward`].
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(Self::make(t.0.shape.clone(), t.0.data.clone(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::make(shape.to_vec(), vec![0.0; numel(shape)], false, None)
    }

    pub fn scalar(v: f64) -> Self {
        Self::make(vec![], vec![v], false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> f64 {
        self.0.data[0]
    }

    /// Gradient accumulated by the last backward pass through this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    fn key(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    fn derived(
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: Vec<Tensor>,
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Self {
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let record = requires_grad.then(|| Record {
            inputs,
            backward: Box::new(backward),
        });
        Self::make(shape, data, requires_grad, record)
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(mismatch("add", self.shape(), other.shape()));
        }
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(Self::derived(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            |g| vec![Some(g.to_vec()), Some(g.to_vec())],
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(mismatch("sub", self.shape(), other.shape()));
        }
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(Self::derived(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            |g| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(mismatch("mul", self.shape(), other.shape()));
        }
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Self::derived(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                let ga = g.iter().zip(b.data()).map(|(g, b)| g * b).collect();
                let gb = g.iter().zip(a.data()).map(|(g, a)| g * a).collect();
                vec![Some(ga), Some(gb)]
            },
        ))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * s).collect();
        Self::derived(self.shape().to_vec(), data, vec![self.clone()], move |g| {
            vec![Some(g.iter().map(|v| v * s).collect())]
        })
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + s).collect();
        Self::derived(self.shape().to_vec(), data, vec![self.clone()], |g| {
            vec![Some(g.to_vec())]
        })
    }

    pub fn sqrt(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|v| v.sqrt()).collect();
        let out = data.clone();
        Self::derived(self.shape().to_vec(), data, vec![self.clone()], move |g| {
            vec![Some(g.iter().zip(&out).map(|(g, y)| 0.5 * g / y).collect())]
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
        let x = self.clone();
        let data = self
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (C * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        Self::derived(self.shape().to_vec(), data, vec![self.clone()], move |g| {
            let gx = g
                .iter()
                .zip(x.data())
                .map(|(g, &v)| {
                    let u = C * (v + 0.044715 * v * v * v);
                    let t = u.tanh();
                    let du = C * (1.0 + 3.0 * 0.044715 * v * v);
                    g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                })
                .collect();
            vec![Some(gx)]
        })
    }

    fn trailing_check(&self, other: &Tensor, op: &str) -> Result<usize> {
        let (a, b) = (self.shape(), other.shape());
        if b.len() > a.len() || a[a.len() - b.len()..] != *b {
            return Err(mismatch(op, a, b));
        }
        Ok(other.len().max(1))
    }

    /// `self + other` where `other`'s shape is a suffix of `self`'s.
    pub fn add_trailing(&self, other: &Tensor) -> Result<Tensor> {
        let n = self.trailing_check(other, "add_trailing")?;
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| a + other.data()[i % n])
            .collect();
        Ok(Self::derived(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                let mut gb = vec![0.0; n];
                for (i, v) in g.iter().enumerate() {
                    gb[i % n] += v;
                }
                vec![Some(g.to_vec()), Some(gb)]
            },
        ))
    }

    /// `self * other` where `other`'s shape is a suffix of `self`'s.
    pub fn mul_trailing(&self, other: &Tensor) -> Result<Tensor> {
        let n = self.trailing_check(other, "mul_trailing")?;
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| a * other.data()[i % n])
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Self::derived(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                let mut gb = vec![0.0; n];
                let mut ga = vec![0.0; g.len()];
                for (i, v) in g.iter().enumerate() {
                    gb[i % n] += v * a.data()[i];
                    ga[i] = v * b.data()[i % n];
                }
                vec![Some(ga), Some(gb)]
            },
        ))
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.len();
        Self::derived(vec![], vec![s], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    // ---- linear algebra ----------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(mismatch("matmul", a, b));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let data = gemm(self.data(), other.data(), m, k, n);
        let (x, y) = (self.clone(), other.clone());
        Ok(Self::derived(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                let ga = x.requires_grad().then(|| gemm_nt(g, y.data(), m, n, k));
                let gb = y.requires_grad().then(|| gemm_tn(x.data(), g, k, m, n));
                vec![ga, gb]
            },
        ))
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 3 || b.len() != 3 || a[0] != b[0] || a[2] != b[1] {
            return Err(mismatch("bmm", a, b));
        }
        let (bs, m, k, n) = (a[0], a[1], a[2], b[2]);
        let mut data = Vec::with_capacity(bs * m * n);
        for i in 0..bs {
            data.extend(gemm(
                &self.data()[i * m * k..(i + 1) * m * k],
                &other.data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let (x, y) = (self.clone(), other.clone());
        Ok(Self::derived(
            vec![bs, m, n],
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                let mut ga = vec![0.0; bs * m * k];
                let mut gb = vec![0.0; bs * k * n];
                for i in 0..bs {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let xi = &x.data()[i * m * k..(i + 1) * m * k];
                    let yi = &y.data()[i * k * n..(i + 1) * k * n];
                    ga[i * m * k..(i + 1) * m * k].copy_from_slice(&gemm_nt(gi, yi, m, n, k));
                    gb[i * k * n..(i + 1) * k * n].copy_from_slice(&gemm_tn(xi, gi, k, m, n));
                }
                vec![Some(ga), Some(gb)]
            },
        ))
    }

    // ---- shape -------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return Err(mismatch("reshape", self.shape(), shape));
        }
        Ok(Self::derived(
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        let nd = shape.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::ShapeMismatch(format!(
                "permute: axes {axes:?} for shape {shape:?}"
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let in_strides = strides(shape);
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let map = Rc::new(permutation_map(&out_shape, &src_strides));
        let data = map.iter().map(|&s| self.data()[s]).collect();
        let n = self.len();
        Ok(Self::derived(out_shape, data, vec![self.clone()], move |g| {
            let mut gi = vec![0.0; n];
            for (o, &s) in map.iter().enumerate() {
                gi[s] += g[o];
            }
            vec![Some(gi)]
        }))
    }

    /// Concatenates along `axis`.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("concat of zero tensors".into()))?;
        let nd = first.shape().len();
        if axis >= nd {
            return Err(Error::ShapeMismatch(format!("concat axis {axis} for rank {nd}")));
        }
        for p in parts {
            let s = p.shape();
            if s.len() != nd || (0..nd).any(|i| i != axis && s[i] != first.shape()[i]) {
                return Err(mismatch("concat", first.shape(), s));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let widths_bw = widths.clone();
        Ok(Self::derived(shape, data, parts.to_vec(), move |g| {
            let mut grads: Vec<Vec<f64>> = widths_bw.iter().map(|w| Vec::with_capacity(outer * w)).collect();
            for o in 0..outer {
                let mut off = o * total;
                for (gp, &w) in grads.iter_mut().zip(&widths_bw) {
                    gp.extend_from_slice(&g[off..off + w]);
                    off += w;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::ShapeMismatch(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let n = self.len();
        Ok(Self::derived(out_shape, data, vec![self.clone()], move |g| {
            let mut gi = vec![0.0; n];
            for o in 0..outer {
                let base = o * full + start * inner;
                gi[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gi)]
        }))
    }

    /// Splits along `axis` into pieces of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
        let total: usize = sizes.iter().sum();
        if axis >= self.shape().len() || total != self.shape()[axis] {
            return Err(Error::ShapeMismatch(format!(
                "split {sizes:?} on axis {axis} of {:?}",
                self.shape()
            )));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&s| {
                let t = self.slice(axis, start, s);
                start += s;
                t
            })
            .collect()
    }

    /// Selects rows along the first axis; rows may repeat. Doubles as an
    /// embedding lookup when `self` is a table.
    pub fn gather_rows(&self, rows: Rc<Vec<usize>>) -> Result<Tensor> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(Error::ShapeMismatch("gather_rows on a scalar".into()));
        }
        let n_rows = shape[0];
        let width: usize = shape[1..].iter().product();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n_rows) {
            return Err(Error::ShapeMismatch(format!(
                "gather_rows index {bad} out of {n_rows}"
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows.iter() {
            data.extend_from_slice(&self.data()[r * width..(r + 1) * width]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = rows.len();
        let n = self.len();
        Ok(Self::derived(out_shape, data, vec![self.clone()], move |g| {
            let mut gi = vec![0.0; n];
            for (o, &r) in rows.iter().enumerate() {
                for c in 0..width {
                    gi[r * width + c] += g[o * width + c];
                }
            }
            vec![Some(gi)]
        }))
    }

    /// Row `i` of the output is `scale * sum_t self[rows[i * k + t]]`.
    pub fn gather_mean(&self, rows: Rc<Vec<u32>>, k: usize) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 || k == 0 || !rows.len().is_multiple_of(k) {
            return Err(Error::ShapeMismatch(format!(
                "gather_mean on {shape:?} with {} indices, k = {k}",
                rows.len()
            )));
        }
        let (n_rows, width) = (shape[0], shape[1]);
        if rows.iter().any(|&r| r as usize >= n_rows) {
            return Err(Error::ShapeMismatch("gather_mean index out of range".into()));
        }
        let m = rows.len() / k;
        let w = 1.0 / k as f64;
        let mut data = vec![0.0; m * width];
        for i in 0..m {
            let o = &mut data[i * width..(i + 1) * width];
            for &r in &rows[i * k..(i + 1) * k] {
                let src = &self.data()[r as usize * width..(r as usize + 1) * width];
                for (a, b) in o.iter_mut().zip(src) {
                    *a += b;
                }
            }
            for a in o.iter_mut() {
                *a *= w;
            }
        }
        let n = self.len();
        Ok(Self::derived(vec![m, width], data, vec![self.clone()], move |g| {
            let mut gi = vec![0.0; n];
            for i in 0..m {
                let gr = &g[i * width..(i + 1) * width];
                for &r in &rows[i * k..(i + 1) * k] {
                    let dst = &mut gi[r as usize * width..(r as usize + 1) * width];
                    for (a, b) in dst.iter_mut().zip(gr) {
                        *a += w * b;
                    }
                }
            }
            vec![Some(gi)]
        }))
    }

    // ---- normalization -----------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor> {
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| Error::ShapeMismatch("softmax on a scalar".into()))?;
        let mut data = vec![0.0; self.len()];
        for (row, out) in self.data().chunks(d).zip(data.chunks_mut(d)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - mx).exp();
                s += *o;
            }
            for o in out.iter_mut() {
                *o /= s;
            }
        }
        let y = data.clone();
        Ok(Self::derived(self.shape().to_vec(), data, vec![self.clone()], move |g| {
            let mut gi = vec![0.0; g.len()];
            for ((gr, yr), out) in g.chunks(d).zip(y.chunks(d)).zip(gi.chunks_mut(d)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, &gg), &yy) in out.iter_mut().zip(gr).zip(yr) {
                    *o = yy * (gg - dot);
                }
            }
            vec![Some(gi)]
        }))
    }

    /// Zero-mean unit-variance normalization over the last axis (no affine).
    pub fn layer_norm(&self, eps: f64) -> Result<Tensor> {
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| Error::ShapeMismatch("layer_norm on a scalar".into()))?;
        let rows = self.len() / d.max(1);
        let mut data = vec![0.0; self.len()];
        let mut inv_std = vec![0.0; rows];
        for (r, (row, out)) in self.data().chunks(d).zip(data.chunks_mut(d)).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
        }
        let y = data.clone();
        Ok(Self::derived(self.shape().to_vec(), data, vec![self.clone()], move |g| {
            let mut gi = vec![0.0; g.len()];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let yr = &y[r * d..(r + 1) * d];
                let mg = gr.iter().sum::<f64>() / d as f64;
                let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    gi[r * d + j] = inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                }
            }
            vec![Some(gi)]
        }))
    }

    // ---- backward ----------------------------------------------------

    /// Populates `grad()` on every tensor that contributed to this scalar.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        // Iterative post-order DFS gives a topological order.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashMap<*const Node, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if visited.insert(t.key(), ()).is_some() || !t.requires_grad() {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(rec) = &t.0.record {
                for inp in rec.inputs.iter().rev() {
                    if inp.requires_grad() && !visited.contains_key(&inp.key()) {
                        stack.push((inp.clone(), false));
                    }
                }
            }
        }

        let mut grads: HashMap<*const Node, Vec<f64>> = HashMap::new();
        grads.insert(self.key(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.key()) else {
                continue;
            };
            if let Some(rec) = &t.0.record {
                let parts = (rec.backward)(&g);
                for (inp, part) in rec.inputs.iter().zip(parts) {
                    let Some(part) = part else { continue };
                    if !inp.requires_grad() {
                        continue;
                    }
                    match grads.get_mut(&inp.key()) {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&part) {
                                *a += b;
                            }
                        }
                        None => {
                            grads.insert(inp.key(), part);
                        }
                    }
                }
            }
            *t.0.grad.borrow_mut() = Some(g);
        }
        Ok(())
    }
}

/// Output-index to source-index table for a strided view.
fn permutation_map(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n = numel(out_shape);
    let nd = out_shape.len();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..n {
        map.push(src);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// `a [m, k] * b [k, n]`.
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            for (cv, bv) in ci.iter_mut().zip(bp) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `a [m, n] * b^T` with `b [k, n]`, giving `[m, k]`.
fn gemm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let ai = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let bj = &b[j * n..(j + 1) * n];
            c[i * k + j] = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `a^T * b` with `a [m, k]`, `b [m, n]`, giving `[k, n]`.
fn gemm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let bi = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let cp = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in cp.iter_mut().zip(bi) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// Central-difference gradient of a scalar function of one flat input.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over two gradient vectors.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Checks d(sum(w * f(x)))/dx against central differences, with a fixed
    /// random projection `w` so every output element matters.
    fn check_unary(shape: &[usize], seed: u64, f: impl Fn(&Tensor) -> Tensor) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = rand_vec(&mut rng, numel(shape));
        let probe_shape = f(&Tensor::new(shape, x0.clone()).unwrap()).shape().to_vec();
        let w = Tensor::new(&probe_shape, rand_vec(&mut rng, numel(&probe_shape))).unwrap();
        let x = Tensor::param(shape, x0.clone()).unwrap();
        let loss = f(&x).mul(&w).unwrap().sum();
        loss.backward().unwrap();
        let an = x.grad().unwrap();
        let num = numeric_gradient(&x0, 1e-5, |v| {
            f(&Tensor::new(shape, v.to_vec()).unwrap()).mul(&w).unwrap().sum().item()
        });
        max_relative_error(&an, &num, 1e-3)
    }

    fn check_binary(
        sa: &[usize],
        sb: &[usize],
        seed: u64,
        f: impl Fn(&Tensor, &Tensor) -> Tensor,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a0 = rand_vec(&mut rng, numel(sa));
        let b0 = rand_vec(&mut rng, numel(sb));
        let probe = f(
            &Tensor::new(sa, a0.clone()).unwrap(),
            &Tensor::new(sb, b0.clone()).unwrap(),
        );
        let w = Tensor::new(probe.shape(), rand_vec(&mut rng, probe.len())).unwrap();
        let a = Tensor::param(sa, a0.clone()).unwrap();
        let b = Tensor::param(sb, b0.clone()).unwrap();
        f(&a, &b).mul(&w).unwrap().sum().backward().unwrap();
        let bt = Tensor::new(sb, b0.clone()).unwrap();
        let na = numeric_gradient(&a0, 1e-5, |v| {
            f(&Tensor::new(sa, v.to_vec()).unwrap(), &bt).mul(&w).unwrap().sum().item()
        });
        let at = Tensor::new(sa, a0.clone()).unwrap();
        let nb = numeric_gradient(&b0, 1e-5, |v| {
            f(&at, &Tensor::new(sb, v.to_vec()).unwrap()).mul(&w).unwrap().sum().item()
        });
        max_relative_error(&a.grad().unwrap(), &na, 1e-3)
            .max(max_relative_error(&b.grad().unwrap(), &nb, 1e-3))
    }

    const TOL: f64 = 1e-6;

    #[test]
    fn identity_matmul() {
        let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let i = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(i.matmul(&a).unwrap().data(), a.data());
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn softmax_constant_is_uniform() {
        let x = Tensor::new(&[2, 5], vec![3.0; 10]).unwrap();
        assert!(x.softmax().unwrap().data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn simple_backward() {
        let x = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 3]);
        let x = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 1.0]);
        assert!(x.backward().is_err());
    }

    #[test]
    fn shape_errors_report_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        let msg = a.add(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
        assert!(a.reshape(&[4]).is_err());
        assert!(a.permute(&[0, 0]).is_err());
        assert!(a.slice(1, 2, 2).is_err());
        assert!(a.add_trailing(&Tensor::zeros(&[2])).is_err());
        assert!(Tensor::concat(&[a.clone(), b.clone()], 1).is_err());
        assert!(a.gather_rows(Rc::new(vec![2])).is_err());
    }

    #[test]
    fn elementwise_gradients() {
        assert!(check_binary(&[3, 4], &[3, 4], 1, |a, b| a.add(b).unwrap()) < TOL);
        assert!(check_binary(&[3, 4], &[3, 4], 2, |a, b| a.sub(b).unwrap()) < TOL);
        assert!(check_binary(&[3, 4], &[3, 4], 3, |a, b| a.mul(b).unwrap()) < TOL);
        assert!(check_unary(&[5, 2], 4, |a| a.scale(-1.7).add_scalar(0.3)) < TOL);
        assert!(check_unary(&[7], 5, |a| a.gelu()) < TOL);
        assert!(check_unary(&[6], 6, |a| a.mul(a).unwrap().add_scalar(0.5).sqrt()) < TOL);
        assert!(check_binary(&[2, 3, 4], &[3, 4], 7, |a, b| a.add_trailing(b).unwrap()) < TOL);
        assert!(check_binary(&[5, 4], &[4], 8, |a, b| a.mul_trailing(b).unwrap()) < TOL);
    }

    #[test]
    fn linear_algebra_gradients() {
        assert!(check_binary(&[4, 3], &[3, 5], 9, |a, b| a.matmul(b).unwrap()) < TOL);
        assert!(check_binary(&[2, 4, 3], &[2, 3, 5], 10, |a, b| a.bmm(b).unwrap()) < TOL);
    }

    #[test]
    fn shape_gradients() {
        assert!(check_unary(&[2, 3, 4], 11, |a| a.reshape(&[6, 4]).unwrap()) < TOL);
        assert!(check_unary(&[2, 3, 4], 12, |a| a.permute(&[2, 0, 1]).unwrap()) < TOL);
        assert!(check_unary(&[3, 5, 2], 13, |a| a.slice(1, 1, 3).unwrap()) < TOL);
        assert!(check_binary(&[3, 2, 4], &[3, 5, 4], 14, |a, b| {
            Tensor::concat(&[a.clone(), b.clone()], 1).unwrap()
        }) < TOL);
        assert!(check_unary(&[4, 6], 15, |a| {
            let parts = a.split(1, &[2, 4]).unwrap();
            parts[0].sum().add(&parts[1].mean().scale(3.0)).unwrap().reshape(&[1]).unwrap()
        }) < TOL);
        let rows = Rc::new(vec![3, 0, 3, 1]);
        assert!(check_unary(&[4, 3], 16, move |a| a.gather_rows(rows.clone()).unwrap()) < TOL);
        let idx = Rc::new(vec![0u32, 2, 2, 3, 1, 1]);
        assert!(check_unary(&[4, 3], 17, move |a| a.gather_mean(idx.clone(), 2).unwrap()) < TOL);
    }

    #[test]
    fn normalization_gradients() {
        assert!(check_unary(&[3, 6], 18, |a| a.softmax().unwrap()) < TOL);
        assert!(check_unary(&[4, 5], 19, |a| a.layer_norm(1e-5).unwrap()) < TOL);
        assert!(check_unary(&[4, 5], 20, |a| a.mean().reshape(&[1]).unwrap()) < TOL);
    }

    #[test]
    fn permute_values() {
        let a = Tensor::new(&[2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let t = a.permute(&[1, 0]).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let x = Tensor::param(&[2], vec![1.5, -0.5]).unwrap();
        let y = x.add(&x).unwrap().mul(&x).unwrap().sum();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0, -2.0]);
    }

    #[test]
    fn mlp_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::new(&[5, 4], rand_vec(&mut rng, 20)).unwrap();
        let shapes: [&[usize]; 6] = [&[4, 6], &[6], &[6, 6], &[6], &[6, 1], &[1]];
        let init: Vec<Vec<f64>> = shapes.iter().map(|s| rand_vec(&mut rng, numel(s))).collect();
        let run = |ps: &[Tensor]| -> Tensor {
            let h = x.matmul(&ps[0]).unwrap().add_trailing(&ps[1]).unwrap().gelu();
            let h = h.matmul(&ps[2]).unwrap().add_trailing(&ps[3]).unwrap().gelu();
            let o = h.matmul(&ps[4]).unwrap().add_trailing(&ps[5]).unwrap();
            o.mul(&o).unwrap().mean()
        };
        let params: Vec<Tensor> = shapes
            .iter()
            .zip(&init)
            .map(|(s, v)| Tensor::param(s, v.clone()).unwrap())
            .collect();
        run(&params).backward().unwrap();
        for i in 0..params.len() {
            let num = numeric_gradient(&init[i], 1e-5, |v| {
                let ps: Vec<Tensor> = shapes
                    .iter()
                    .enumerate()
                    .map(|(j, s)| Tensor::new(s, if i == j { v.to_vec() } else { init[j].clone() }).unwrap())
                    .collect();
                run(&ps).item()
            });
            assert!(max_relative_error(&params[i].grad().unwrap(), &num, 1e-3) < TOL);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let a = Tensor::new(&[8, 16], rand_vec(&mut rng, 128)).unwrap();
        let b = Tensor::new(&[16, 8], rand_vec(&mut rng, 128)).unwrap();
        let r1 = a.matmul(&b).unwrap().softmax().unwrap();
        let r2 = a.matmul(&b).unwrap().softmax().unwrap();
        assert!(r1.data().iter().zip(r2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    /// Random composite graphs built from the registered ops.
    fn random_graph(x: &Tensor, ops: &[u8], w: &Tensor) -> Tensor {
        let mut h = x.clone(); // [4, 4]
        for &op in ops {
            h = match op % 9 {
                0 => h.gelu(),
                1 => h.softmax().unwrap(),
                2 => h.layer_norm(1e-5).unwrap(),
                3 => h.matmul(w).unwrap(),
                4 => h.permute(&[1, 0]).unwrap(),
                5 => h.mul(&h).unwrap().scale(0.5),
                6 => h.add_trailing(&w.slice(0, 0, 1).unwrap().reshape(&[4]).unwrap()).unwrap(),
                7 => Tensor::concat(&[h.slice(1, 2, 2).unwrap(), h.slice(1, 0, 2).unwrap()], 1).unwrap(),
                _ => h.reshape(&[2, 8]).unwrap().reshape(&[4, 4]).unwrap().add(&h).unwrap(),
            };
        }
        h.mul(&h).unwrap().mean()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn random_compositions_match_finite_differences(
            seed in 0u64..10_000,
            ops in proptest::collection::vec(0u8..9, 1..6),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = rand_vec(&mut rng, 16);
            let w0 = rand_vec(&mut rng, 16);
            let w = Tensor::new(&[4, 4], w0.clone()).unwrap();
            let x = Tensor::param(&[4, 4], x0.clone()).unwrap();
            random_graph(&x, &ops, &w).backward().unwrap();
            let num = numeric_gradient(&x0, 1e-5, |v| {
                random_graph(&Tensor::new(&[4, 4], v.to_vec()).unwrap(), &ops, &w).item()
            });
            prop_assert!(max_relative_error(&x.grad().unwrap(), &num, 1e-3) < 1e-4);
        }
    }
}
