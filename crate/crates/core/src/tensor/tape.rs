//! Append-only operation tape with reverse-mode differentiation.
//!
//! Every op validates shapes, computes its value eagerly and records its
//! parents. Parents always precede children, so [`Tape::backward`] is a single
//! reverse sweep over the node list.
//!
//! Broadcasting is never implicit. The only leading-axis broadcasts are the
//! explicit [`Tape::add_bias`] and [`Tape::mul_leading`], plus the shared
//! right operand of a rank-2 [`Tape::matmul`].

use super::conv::ConvGeom;
use super::{row_major_strides, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Conv1d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    MulLeading {
        x: usize,
        w: usize,
    },
    AddBias {
        x: usize,
        b: usize,
    },
    Affine {
        a: usize,
        scale: T,
    },
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Square(usize),
    Abs(usize),
    Softmax(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Reshape(usize),
    Select {
        a: usize,
        axis: usize,
        index: usize,
    },
    Stack {
        parts: Vec<usize>,
        axis: usize,
    },
    Repeat {
        a: usize,
        axis: usize,
        times: usize,
    },
    SumAll(usize),
    MeanAll(usize),
    SumAxis {
        a: usize,
        axis: usize,
    },
    Mix {
        experts: Vec<usize>,
        gate: usize,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of a forward computation.
///
/// A tape belongs to one thread and one forward pass; build a fresh tape per
/// mini-batch.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// `(outer, extent, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. Leaves flagged `requires_grad` start with a zero gradient.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad();
        if needs_grad && tensor.grad.is_none() {
            tensor.grad = Some(vec![T::zero(); tensor.len()]);
        }
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf (zeros when it never received one).
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    fn push(&mut self, op_name: &str, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Result<Var> {
        if let Some(pos) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical(
                op_name,
                format!(
                    "non-finite output {} at flat index {pos} (shape {:?})",
                    value.data()[pos],
                    value.shape()
                ),
            ));
        }
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product over the two trailing axes.
    ///
    /// Leading axes of `a` and `b` must agree, except that a rank-2 `b` is
    /// shared by every leading index of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::dim(format!("matmul: cannot multiply {sa:?} by {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.val(a.0).data(), self.val(b.0).data());
            if shared_rhs {
                T::gemm(batch * m, k, n, T::one(), av, k, 1, bv, n, 1, T::zero(), &mut out, n, 1);
            } else {
                for i in 0..batch {
                    T::gemm(
                        m,
                        k,
                        n,
                        T::one(),
                        &av[i * m * k..],
                        k,
                        1,
                        &bv[i * k * n..],
                        n,
                        1,
                        T::zero(),
                        &mut out[i * m * n..],
                        n,
                        1,
                    );
                }
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let value = Tensor::new(&shape, out)?;
        self.push(
            "matmul",
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            &[a.0, b.0],
        )
    }

    /// `x · wᵀ (+ b)` on the trailing axis: `x [.., in]`, `w [out, in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let inp = *sx.last().unwrap();
        if sw.len() != 2 || sw[1] != inp {
            return Err(Error::dim(format!(
                "linear: input {sx:?} does not match weight {sw:?}"
            )));
        }
        let out_dim = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(Error::dim(format!(
                    "linear: bias {:?} should be [{out_dim}]",
                    self.shape(b)
                )));
            }
        }
        let rows = self.val(x.0).len() / inp;
        let mut out = vec![T::zero(); rows * out_dim];
        {
            let (xv, wv) = (self.val(x.0).data(), self.val(w.0).data());
            if let Some(b) = b {
                let bv = self.val(b.0).data();
                for r in 0..rows {
                    out[r * out_dim..(r + 1) * out_dim].copy_from_slice(bv);
                }
            }
            T::gemm(rows, inp, out_dim, T::one(), xv, inp, 1, wv, 1, inp, T::one(), &mut out, out_dim, 1);
        }
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = out_dim;
        let value = Tensor::new(&shape, out)?;
        let mut parents = vec![x.0, w.0];
        parents.extend(b.map(|b| b.0));
        self.push(
            "linear",
            value,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                rows,
                inp,
                out: out_dim,
            },
            &parents,
        )
    }

    /// Zero-padded "same" convolution along the zone axis.
    ///
    /// `x [.., N, F]`, `filters [K, F, L]`, optional `bias [K]`; returns `[.., N, K]`.
    /// `output[z,k] = Σ_{f,l} x[z + l - L/2, f] · filters[k,f,l] + bias[k]`.
    pub fn conv1d(&mut self, x: Var, filters: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(filters).to_vec();
        if sx.len() < 2 || sw.len() != 3 || sw[1] != sx[sx.len() - 1] {
            return Err(Error::dim(format!(
                "conv1d: input {sx:?} does not match filters {sw:?}"
            )));
        }
        let (zones, channels) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        let (filters_n, len) = (sw[0], sw[2]);
        if len % 2 == 0 {
            return Err(Error::config(format!("conv1d: filter length {len} must be odd")));
        }
        if len > 2 * zones - 1 {
            return Err(Error::config(format!(
                "conv1d: filter length {len} exceeds 2N-1 = {} for N = {zones}",
                2 * zones - 1
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [filters_n] {
                return Err(Error::dim(format!(
                    "conv1d: bias {:?} should be [{filters_n}]",
                    self.shape(b)
                )));
            }
        }
        let geom = ConvGeom {
            rows: self.val(x.0).len() / (zones * channels),
            zones,
            channels,
            filters: filters_n,
            len,
        };
        let cols = geom.im2col(self.val(x.0).data());
        let patch = geom.patch();
        let rn = geom.rows * zones;
        let mut out = vec![T::zero(); rn * filters_n];
        if let Some(b) = bias {
            let bv = self.val(b.0).data();
            for r in 0..rn {
                out[r * filters_n..(r + 1) * filters_n].copy_from_slice(bv);
            }
        }
        let wv = self.val(filters.0).data();
        T::gemm(rn, patch, filters_n, T::one(), &cols, patch, 1, wv, 1, patch, T::one(), &mut out, filters_n, 1);
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = filters_n;
        let value = Tensor::new(&shape, out)?;
        let mut parents = vec![x.0, filters.0];
        parents.extend(bias.map(|b| b.0));
        let needs = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.push(
            "conv1d",
            value,
            Op::Conv1d {
                x: x.0,
                w: filters.0,
                b: bias.map(|b| b.0),
                geom,
                cols: if needs { cols } else { Vec::new() },
            },
            &parents,
        )
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_with(&mut self, name: &str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .val(a.0)
            .data()
            .iter()
            .zip(self.val(b.0).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push(name, value, op, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    /// Elementwise product of identically shaped tensors.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("hadamard", a, b, |x, y| x * y, Op::Hadamard(a.0, b.0))
    }

    /// `x ⊙ w` with `w` repeated over the leading axes of `x` (shape of `w` is a suffix of `x`).
    pub fn mul_leading(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() > sx.len() || sx[sx.len() - sw.len()..] != sw[..] {
            return Err(Error::dim(format!(
                "mul_leading: {sw:?} is not a trailing block of {sx:?}"
            )));
        }
        let wv = self.val(w.0).data();
        let inner = wv.len();
        let data = self
            .val(x.0)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * wv[i % inner])
            .collect();
        let value = Tensor::new(&sx, data)?;
        self.push("mul_leading", value, Op::MulLeading { x: x.0, w: w.0 }, &[x.0, w.0])
    }

    /// Adds `b [K]` to every trailing-axis slice of `x [.., K]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sb.len() != 1 || sb[0] != *sx.last().unwrap() {
            return Err(Error::dim(format!("add_bias: bias {sb:?} does not fit {sx:?}")));
        }
        let bv = self.val(b.0).data();
        let k = bv.len();
        let data = self
            .val(x.0)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % k])
            .collect();
        let value = Tensor::new(&sx, data)?;
        self.push("add_bias", value, Op::AddBias { x: x.0, b: b.0 }, &[x.0, b.0])
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Result<Var> {
        let data = self.val(a.0).data().iter().map(|&v| scale * v + shift).collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push("affine", value, Op::Affine { a: a.0, scale }, &[a.0])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.affine(a, s, T::zero())
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        self.affine(a, -T::one(), T::one())
    }

    fn unary(&mut self, name: &str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let data = self.val(a.0).data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push(name, value, op, &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, |v| v.tanh(), Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(a.0))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |v| v * v, Op::Square(a.0))
    }

    /// Absolute value; the backward pass uses subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, |v| v.abs(), Op::Abs(a.0))
    }

    /// Softmax over the trailing axis, computed with max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let m = *shape.last().unwrap();
        let src = self.val(a.0).data();
        let mut data = vec![T::zero(); src.len()];
        for (row, out) in src.chunks(m).zip(data.chunks_mut(m)) {
            let max = row.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
            let mut total = T::zero();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                total = total + *o;
            }
            out.iter_mut().for_each(|o| *o = *o / total);
        }
        let value = Tensor::new(&shape, data)?;
        self.push("softmax", value, Op::Softmax(a.0), &[a.0])
    }

    // ---- structure -------------------------------------------------------

    /// Join tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::usage("concat: no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat: axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::dim(format!(
                    "concat: {s:?} does not agree with {base:?} off axis {axis}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.val(p.0);
                let ext = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat", value, Op::Concat { parts: ids.clone(), axis }, &ids)
    }

    /// Reorder axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if perm.len() != sa.len() || perm.iter().any(|&p| p >= sa.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!(
                "permute: {perm:?} is not a permutation of the axes of {sa:?}"
            )));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
        let src = self.val(a.0).data();
        let data = permute_gather(src, &sa, perm);
        let value = Tensor::new(&shape, data)?;
        self.push("permute", value, Op::Permute { a: a.0, perm: perm.to_vec() }, &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.val(a.0).reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(a.0), &[a.0])
    }

    /// Take index `index` of `axis`, dropping that axis.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || index >= sa[axis] || sa.len() < 2 {
            return Err(Error::dim(format!("select: index {index} of axis {axis} invalid for {sa:?}")));
        }
        let (outer, ext, inner) = split_axis(&sa, axis);
        let src = self.val(a.0).data();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * ext + index) * inner;
            data.extend_from_slice(&src[start..start + inner]);
        }
        let mut shape = sa;
        shape.remove(axis);
        let value = Tensor::new(&shape, data)?;
        self.push("select", value, Op::Select { a: a.0, axis, index }, &[a.0])
    }

    /// Stack equally shaped tensors along a new axis inserted at `axis`.
    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::usage("stack: no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis > base.len() {
            return Err(Error::dim(format!("stack: axis {axis} out of range for {base:?}")));
        }
        for p in parts {
            if self.shape(*p) != base.as_slice() {
                return Err(Error::dim(format!(
                    "stack: {:?} differs from {base:?}",
                    self.shape(*p)
                )));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * parts.len() * inner);
        for o in 0..outer {
            for p in parts {
                data.extend_from_slice(&self.val(p.0).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = base;
        shape.insert(axis, parts.len());
        let value = Tensor::new(&shape, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("stack", value, Op::Stack { parts: ids.clone(), axis }, &ids)
    }

    /// Insert a new axis of extent `times` at `axis`, copying the data along it.
    pub fn repeat(&mut self, a: Var, axis: usize, times: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis > sa.len() || times == 0 {
            return Err(Error::dim(format!("repeat: axis {axis} x{times} invalid for {sa:?}")));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis..].iter().product();
        let src = self.val(a.0).data();
        let mut data = Vec::with_capacity(outer * times * inner);
        for o in 0..outer {
            for _ in 0..times {
                data.extend_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = sa;
        shape.insert(axis, times);
        let value = Tensor::new(&shape, data)?;
        self.push("repeat", value, Op::Repeat { a: a.0, axis, times }, &[a.0])
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.val(a.0).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::SumAll(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.val(a.0);
        let s: T = v.data().iter().copied().sum::<T>() / T::from_usize(v.len()).unwrap();
        self.push("mean", Tensor::scalar(s), Op::MeanAll(a.0), &[a.0])
    }

    /// Sum over `axis`, dropping it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || sa.len() < 2 {
            return Err(Error::dim(format!("sum_axis: axis {axis} invalid for {sa:?}")));
        }
        let (outer, ext, inner) = split_axis(&sa, axis);
        let src = self.val(a.0).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..ext {
                let row = &src[(o * ext + j) * inner..(o * ext + j + 1) * inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
        }
        let mut shape = sa;
        shape.remove(axis);
        let value = Tensor::new(&shape, data)?;
        self.push("sum_axis", value, Op::SumAxis { a: a.0, axis }, &[a.0])
    }

    /// Mean over `axis`, dropping it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ext = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::dim(format!("mean_axis: axis {axis} out of range")))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, T::one() / T::from_usize(ext).unwrap())
    }

    // ---- mixtures --------------------------------------------------------

    /// Probability-weighted sum of expert outputs.
    ///
    /// Experts share a shape `[R, ..]` and `gate` is `[R, m]`; sample `r` of the
    /// result is `Σ_i gate[r,i] · expert_i[r, ..]`.
    pub fn mix(&mut self, experts: &[Var], gate: Var) -> Result<Var> {
        let first = *experts.first().ok_or_else(|| Error::usage("mix: no experts"))?;
        let es = self.shape(first).to_vec();
        for e in experts {
            if self.shape(*e) != es.as_slice() {
                return Err(Error::dim(format!(
                    "mix: expert output {:?} differs from {es:?}",
                    self.shape(*e)
                )));
            }
        }
        let gs = self.shape(gate).to_vec();
        if gs != [es[0], experts.len()] {
            return Err(Error::dim(format!(
                "mix: gate {gs:?} should be [{}, {}]",
                es[0],
                experts.len()
            )));
        }
        let rows = es[0];
        let inner = self.val(first.0).len() / rows;
        let m = experts.len();
        let gv = self.val(gate.0).data();
        let mut data = vec![T::zero(); rows * inner];
        for (i, e) in experts.iter().enumerate() {
            let ev = self.val(e.0).data();
            for r in 0..rows {
                let g = gv[r * m + i];
                for (d, &v) in data[r * inner..(r + 1) * inner]
                    .iter_mut()
                    .zip(&ev[r * inner..(r + 1) * inner])
                {
                    *d = *d + g * v;
                }
            }
        }
        let value = Tensor::new(&es, data)?;
        let mut ids: Vec<usize> = experts.iter().map(|e| e.0).collect();
        let op = Op::Mix {
            experts: ids.clone(),
            gate: gate.0,
        };
        ids.push(gate.0);
        self.push("mix", value, op, &ids)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`, accumulating into every reachable
    /// `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.val(loss.0).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Vec<T>>], p: usize, delta: Vec<T>| {
            match grads[p].as_mut() {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e = *e + *d),
                None => grads[p] = Some(delta),
            }
        };
        let zeros = |p: usize| vec![T::zero(); self.nodes[p].value.len()];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (a, b, batch, m, k, n) = (*a, *b, *batch, *m, *k, *n);
                let (av, bv) = (self.val(a).data(), self.val(b).data());
                if self.wants(a) {
                    let mut da = zeros(a);
                    if *shared_rhs {
                        T::gemm(batch * m, n, k, T::one(), g, n, 1, bv, 1, n, T::zero(), &mut da, k, 1);
                    } else {
                        for s in 0..batch {
                            T::gemm(m, n, k, T::one(), &g[s * m * n..], n, 1, &bv[s * k * n..], 1, n, T::zero(), &mut da[s * m * k..], k, 1);
                        }
                    }
                    acc(grads, a, da);
                }
                if self.wants(b) {
                    let mut db = zeros(b);
                    if *shared_rhs {
                        T::gemm(k, batch * m, n, T::one(), av, 1, k, g, n, 1, T::zero(), &mut db, n, 1);
                    } else {
                        for s in 0..batch {
                            T::gemm(k, m, n, T::one(), &av[s * m * k..], 1, k, &g[s * m * n..], n, 1, T::zero(), &mut db[s * k * n..], n, 1);
                        }
                    }
                    acc(grads, b, db);
                }
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            } => {
                let (x, w, rows, inp, out) = (*x, *w, *rows, *inp, *out);
                if self.wants(x) {
                    let mut dx = zeros(x);
                    T::gemm(rows, out, inp, T::one(), g, out, 1, self.val(w).data(), inp, 1, T::zero(), &mut dx, inp, 1);
                    acc(grads, x, dx);
                }
                if self.wants(w) {
                    let mut dw = zeros(w);
                    T::gemm(out, rows, inp, T::one(), g, 1, out, self.val(x).data(), inp, 1, T::zero(), &mut dw, inp, 1);
                    acc(grads, w, dw);
                }
                if let Some(b) = *b {
                    if self.wants(b) {
                        acc(grads, b, column_sums(g, out));
                    }
                }
            }
            Op::Conv1d { x, w, b, geom, cols } => {
                let (x, w) = (*x, *w);
                let rn = geom.rows * geom.zones;
                let (patch, k) = (geom.patch(), geom.filters);
                if self.wants(w) {
                    let mut dw = zeros(w);
                    T::gemm(k, rn, patch, T::one(), g, 1, k, cols, patch, 1, T::zero(), &mut dw, patch, 1);
                    acc(grads, w, dw);
                }
                if self.wants(x) {
                    let mut dcols = vec![T::zero(); rn * patch];
                    T::gemm(rn, k, patch, T::one(), g, k, 1, self.val(w).data(), patch, 1, T::zero(), &mut dcols, patch, 1);
                    let mut dx = zeros(x);
                    geom.col2im(&dcols, &mut dx);
                    acc(grads, x, dx);
                }
                if let Some(b) = *b {
                    if self.wants(b) {
                        acc(grads, b, column_sums(g, k));
                    }
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                if self.wants(*a) {
                    acc(grads, *a, g.iter().zip(bv).map(|(&d, &y)| d * y).collect());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.iter().zip(av).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::MulLeading { x, w } => {
                let (xv, wv) = (self.val(*x).data(), self.val(*w).data());
                let inner = wv.len();
                if self.wants(*x) {
                    acc(grads, *x, g.iter().enumerate().map(|(i, &d)| d * wv[i % inner]).collect());
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); inner];
                    for (i, (&d, &v)) in g.iter().zip(xv).enumerate() {
                        dw[i % inner] = dw[i % inner] + d * v;
                    }
                    acc(grads, *w, dw);
                }
            }
            Op::AddBias { x, b } => {
                if self.wants(*x) {
                    acc(grads, *x, g.to_vec());
                }
                if self.wants(*b) {
                    let k = self.val(*b).len();
                    acc(grads, *b, column_sums(g, k));
                }
            }
            Op::Affine { a, scale } => {
                acc(grads, *a, g.iter().map(|&d| d * *scale).collect());
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(grads, *a, g.iter().zip(y).map(|(&d, &s)| d * s * (T::one() - s)).collect());
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(grads, *a, g.iter().zip(y).map(|(&d, &t)| d * (T::one() - t * t)).collect());
            }
            Op::Relu(a) => {
                let y = node.value.data();
                acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(y)
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect(),
                );
            }
            Op::Square(a) => {
                let x = self.val(*a).data();
                let two = T::one() + T::one();
                acc(grads, *a, g.iter().zip(x).map(|(&d, &v)| two * v * d).collect());
            }
            Op::Abs(a) => {
                let x = self.val(*a).data();
                acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&d, &v)| {
                            if v > T::zero() {
                                d
                            } else if v < T::zero() {
                                -d
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                );
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let m = *node.value.shape().last().unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(m).zip(g.chunks(m)).zip(dx.chunks_mut(m)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &d)| p * d).sum();
                    for ((o, &p), &d) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = p * (d - dot);
                    }
                }
                acc(grads, *a, dx);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ext = self.val(p).shape()[*axis];
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            dp.extend_from_slice(&g[start..start + ext * inner]);
                        }
                        acc(grads, p, dp);
                    }
                    offset += ext;
                }
            }
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inverse[p] = d;
                }
                acc(grads, *a, permute_gather(g, node.value.shape(), &inverse));
            }
            Op::Reshape(a) => acc(grads, *a, g.to_vec()),
            Op::Select { a, axis, index } => {
                let (outer, ext, inner) = split_axis(self.val(*a).shape(), *axis);
                let mut da = zeros(*a);
                for o in 0..outer {
                    let start = (o * ext + index) * inner;
                    da[start..start + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
                acc(grads, *a, da);
            }
            Op::Stack { parts, axis } => {
                let base = self.val(parts[0]).shape();
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[*axis..].iter().product();
                let count = parts.len();
                for (j, &p) in parts.iter().enumerate() {
                    if !self.wants(p) {
                        continue;
                    }
                    let mut dp = Vec::with_capacity(outer * inner);
                    for o in 0..outer {
                        let start = (o * count + j) * inner;
                        dp.extend_from_slice(&g[start..start + inner]);
                    }
                    acc(grads, p, dp);
                }
            }
            Op::Repeat { a, axis, times } => {
                let sa = self.val(*a).shape();
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[*axis..].iter().product();
                let mut da = zeros(*a);
                for o in 0..outer {
                    for t in 0..*times {
                        let src = &g[(o * times + t) * inner..(o * times + t + 1) * inner];
                        for (d, &v) in da[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d = *d + v;
                        }
                    }
                }
                acc(grads, *a, da);
            }
            Op::SumAll(a) => acc(grads, *a, vec![g[0]; self.val(*a).len()]),
            Op::MeanAll(a) => {
                let n = self.val(*a).len();
                acc(grads, *a, vec![g[0] / T::from_usize(n).unwrap(); n]);
            }
            Op::SumAxis { a, axis } => {
                let (outer, ext, inner) = split_axis(self.val(*a).shape(), *axis);
                let mut da = Vec::with_capacity(outer * ext * inner);
                for o in 0..outer {
                    for _ in 0..ext {
                        da.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                acc(grads, *a, da);
            }
            Op::Mix { experts, gate } => {
                let gv = self.val(*gate).data();
                let m = experts.len();
                let rows = self.val(*gate).shape()[0];
                let inner = node.value.len() / rows;
                let mut dgate = vec![T::zero(); rows * m];
                for (i, &e) in experts.iter().enumerate() {
                    let ev = self.val(e).data();
                    for r in 0..rows {
                        let gr = &g[r * inner..(r + 1) * inner];
                        let er = &ev[r * inner..(r + 1) * inner];
                        dgate[r * m + i] = gr.iter().zip(er).map(|(&d, &v)| d * v).sum();
                    }
                    if self.wants(e) {
                        let mut de = vec![T::zero(); rows * inner];
                        for r in 0..rows {
                            let p = gv[r * m + i];
                            for (d, &v) in de[r * inner..(r + 1) * inner].iter_mut().zip(&g[r * inner..(r + 1) * inner]) {
                                *d = p * v;
                            }
                        }
                        acc(grads, e, de);
                    }
                }
                if self.wants(*gate) {
                    acc(grads, *gate, dgate);
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn column_sums<T: Scalar>(g: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k];
    for row in g.chunks(k) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    out
}

/// Gather `src` (shape `shape`) into the layout whose axis `d` is source axis `perm[d]`.
fn permute_gather<T: Scalar>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let strides = row_major_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let x = tape.constant(t(&[2, 1], &[5., 7.]));
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y).data(), &[5., 7.]);
        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let b = tape.constant(t(&[2, 1], &[3., 4.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.]);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("dimension"), "{err}");
    }

    #[test]
    fn hadamard_values() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[2., 3.]));
        let b = tape.constant(t(&[2], &[0., 5.]));
        let c = tape.hadamard(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[0., 15.]);
        let d = tape.constant(t(&[3], &[1., 1., 1.]));
        assert!(tape.hadamard(a, d).is_err());
    }

    #[test]
    fn conv1d_same_padding_by_hand() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 1], &[1., 2., 3.]));
        let w = tape.constant(t(&[1, 1, 3], &[1., 1., 1.]));
        let b = tape.constant(t(&[1], &[0.]));
        let y = tape.conv1d(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[3., 6., 5.]);
    }

    #[test]
    fn conv1d_rejects_bad_lengths() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3, 1]));
        let even = tape.constant(Tensor::zeros(&[1, 1, 2]));
        assert!(matches!(tape.conv1d(x, even, None), Err(Error::Config(_))));
        let long = tape.constant(Tensor::zeros(&[1, 1, 7]));
        assert!(matches!(tape.conv1d(x, long, None), Err(Error::Config(_))));
        let ok = tape.constant(Tensor::zeros(&[1, 1, 5]));
        assert!(tape.conv1d(x, ok, None).is_ok());
    }

    #[test]
    fn softmax_basics() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[0., 0.]));
        let s = tape.softmax(a).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
        let one = tape.constant(t(&[1], &[42.]));
        let s1 = tape.softmax(one).unwrap();
        assert_eq!(tape.value(s1).data(), &[1.0]);
        let big = tape.constant(Tensor::<f64>::from_f64(&[2], &[1000., 0.]).unwrap());
        let sb = tape.softmax(big).unwrap();
        let v = tape.value(sb).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] >= 0.0 && v[1] < 1e-300);
    }

    #[test]
    fn activations_at_reference_points() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0., -3., 3.]));
        let s = tape.sigmoid(x).unwrap();
        let th = tape.tanh(x).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.5);
        assert_eq!(tape.value(th).data()[0], 0.0);
        assert_eq!(tape.value(r).data(), &[0., 0., 3.]);
    }

    #[test]
    fn structural_helpers_follow_their_signatures() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[3, 1], &[1., 2., 3.]));
        let q = tape.constant(t(&[3, 1], &[4., 5., 6.]));
        let pq = tape.concat(&[p, q], 1).unwrap();
        assert_eq!(tape.shape(pq), &[3, 2]);
        assert_eq!(tape.value(pq).data(), &[1., 4., 2., 5., 3., 6.]);

        let v = tape.constant(Tensor::zeros(&[2, 3, 4]));
        let pv = tape.permute(v, &[1, 2, 0]).unwrap();
        assert_eq!(tape.shape(pv), &[3, 4, 2]);
        assert!(tape.permute(v, &[0, 0, 1]).is_err());

        let j = tape.constant(Tensor::zeros(&[5, 6]));
        let r = tape.reshape(j, &[5, 3, 2]).unwrap();
        assert_eq!(tape.shape(r), &[5, 3, 2]);
        assert!(tape.reshape(j, &[5, 4, 2]).is_err());
    }

    #[test]
    fn permute_moves_elements() {
        let mut tape = Tape::new();
        let v = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let p = tape.permute(v, &[1, 0]).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn quadratic_gradient_and_accumulation() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1., 2.]));
        let sq = tape.hadamard(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2., 4.]);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[4., 8.]);
        tape.zero_grad();
        assert_eq!(tape.grad(w).unwrap(), &[0., 0.]);
    }

    #[test]
    fn disconnected_leaf_keeps_zero_grad() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1., 2.]));
        let other = tape.param(t(&[1], &[3.]));
        let loss = tape.sum(w).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(other).unwrap(), &[0.]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1., 2.]));
        assert!(matches!(tape.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1], &[f64::MAX]));
        assert!(matches!(tape.affine(a, 10.0, 0.0), Err(Error::Numerical { .. })));
    }

    #[test]
    fn mix_collapses_on_one_hot_gate() {
        let mut tape = Tape::new();
        let e0 = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let e1 = tape.constant(t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]));
        let g = tape.constant(t(&[2, 2], &[0., 1., 0., 1.]));
        let y = tape.mix(&[e0, e1], g).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(e1).data());
    }
}
