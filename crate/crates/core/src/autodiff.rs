//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every op in execution order. Handles ([`Var`]) are
//! plain indices into that record, so graphs are built by calling methods on
//! the tape and differentiated with [`Tape::backward`], which replays the
//! record in reverse.
//!
//! Row-wise ops (`softmax_rows`, `l2_norm_rows`, `normalize_rows`) treat the
//! last axis as the row and flatten every leading axis. Spatial ops accept
//! either `H×W×C` or batched `B×H×W×C` tensors. There is no broadcasting
//! beyond the bias-add family.

use crate::error::{Error, Result};
use crate::kernels::{self, Layout};
use crate::tensor::{spatial_dims, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Hinge(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    L2NormRows(Var),
    NormalizeRows(Var),
    SoftmaxRows(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    BiasAdd(Var, Var),
    Conv1x1 { input: Var, weight: Var, bias: Var },
    Conv3x3 { input: Var, weight: Var, bias: Var },
    MeanPoolSpatial(Var),
    SliceRows { src: Var, start: usize },
    ConcatRows(Vec<Var>),
    PairDistance { emb: Var, pairs: Vec<(usize, usize)> },
    PairCosine { emb: Var, pairs: Vec<(usize, usize)> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Relu(_) => "relu",
            Op::Hinge(_) => "hinge",
            Op::Softplus(_) => "softplus",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::L2NormRows(_) => "l2_norm_rows",
            Op::NormalizeRows(_) => "normalize_rows",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::BiasAdd(..) => "bias_add",
            Op::Conv1x1 { .. } => "conv1x1",
            Op::Conv3x3 { .. } => "conv3x3_circular",
            Op::MeanPoolSpatial(_) => "mean_pool_spatial",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::PairDistance { .. } => "pair_distance",
            Op::PairCosine { .. } => "pair_cosine",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Norms below this are treated as degenerate by the normalizing ops.
pub const MIN_NORM: f64 = 1e-12;

/// Ordered record of executed ops and, after [`Tape::backward`], their
/// gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn last_dim(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().expect("rank >= 1");
    (shape.iter().product::<usize>() / c, c)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Records an input tensor. Trainable parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].value.shape(), g.clone()).expect("grad shape"))
    }

    // ---- elementwise -------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape(), data).expect("same shape");
        self.push_op(value, op, &[a])
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(x.shape(), data)?;
        Ok(self.push_op(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |p, q| p * q)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |v| c * v)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddConst(a), |v| v + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.map(a, Op::Log(a), f64::ln))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |v| v.max(0.0))
    }

    /// `[x]₊`; identical to relu, recorded separately so loss graphs read
    /// like their formulas.
    pub fn hinge(&mut self, a: Var) -> Var {
        self.map(a, Op::Hinge(a), |v| v.max(0.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, Op::Softplus(a), kernels::softplus)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.sum() / x.len() as f64;
        self.push_op(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    // ---- row-wise ----------------------------------------------------------

    /// Euclidean norm of every row; output has one entry per row.
    pub fn l2_norm_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = last_dim(x.shape());
        let data: Vec<f64> = (0..r).map(|i| norm(&x.data()[i * c..(i + 1) * c])).collect();
        let value = Tensor::new(&[r], data).expect("row count");
        self.push_op(value, Op::L2NormRows(a), &[a])
    }

    /// Scales every row to unit Euclidean norm. Rows with norm below
    /// [`MIN_NORM`] are a numeric error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = last_dim(x.shape());
        let mut data = x.data().to_vec();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let n = norm(row);
            if n < MIN_NORM {
                return Err(Error::Numeric(format!("row {i} has degenerate norm {n:e}; cannot normalize")));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        let value = Tensor::new(x.shape(), data)?;
        Ok(self.push_op(value, Op::NormalizeRows(a), &[a]))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = last_dim(x.shape());
        let mut data = x.data().to_vec();
        for i in 0..r {
            softmax_in_place(&mut data[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(x.shape(), data).expect("same shape");
        self.push_op(value, Op::SoftmaxRows(a), &[a])
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Normal,
            self.value(b).data(),
            Layout::Normal,
            &mut out,
            0.0,
        );
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push_op(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push_op(value, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push_op(value, Op::Reshape(a), &[a]))
    }

    /// Adds `bias` (length = last extent of `x`) to every row of `x`.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = last_dim(self.shape(x));
        if self.shape(bias) != [c] {
            return Err(Error::dim("bias_add", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            row.iter_mut().zip(&b).for_each(|(v, bb)| *v += bb);
        }
        let value = Tensor::new(self.shape(x), data)?;
        Ok(self.push_op(value, Op::BiasAdd(x, bias), &[x, bias]))
    }

    // ---- convolutions ------------------------------------------------------

    /// Per-position affine map `H×W×C → H×W×D` (batched inputs allowed).
    pub fn conv1x1(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let (_, _, _, c) =
            spatial_dims(&ishape).ok_or_else(|| Error::dim("conv1x1", &ishape, self.shape(weight)))?;
        let (wc, d) = self.value(weight).dims2()?;
        if wc != c || self.shape(bias) != [d] {
            return Err(Error::dim("conv1x1", &ishape, self.shape(weight)));
        }
        let rows = self.value(input).len() / c;
        let mut out = vec![0.0; rows * d];
        kernels::gemm(
            rows,
            c,
            d,
            self.value(input).data(),
            Layout::Normal,
            self.value(weight).data(),
            Layout::Normal,
            &mut out,
            0.0,
        );
        add_bias_rows(&mut out, self.value(bias).data());
        let mut oshape = ishape;
        *oshape.last_mut().expect("rank") = d;
        let value = Tensor::new(&oshape, out)?;
        Ok(self.push_op(value, Op::Conv1x1 { input, weight, bias }, &[input, weight, bias]))
    }

    /// 3×3 cross-correlation with wrap-around padding; `weight` is `3×3×C×D`.
    /// Spatial extents are preserved, and the op commutes with cyclic shifts.
    pub fn conv3x3_circular(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        let (b, h, w, c) = spatial_dims(&ishape).ok_or_else(|| Error::dim("conv3x3_circular", &ishape, &wshape))?;
        let d = match wshape.as_slice() {
            &[3, 3, wc, d] if wc == c => d,
            _ => return Err(Error::dim("conv3x3_circular", &ishape, &wshape)),
        };
        if self.shape(bias) != [d] {
            return Err(Error::dim("conv3x3_circular", &wshape, self.shape(bias)));
        }
        // One image at a time keeps the patch matrix small enough to stay
        // in cache.
        let hw = h * w;
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let mut out = vec![0.0; b * hw * d];
        for n in 0..b {
            let cols = kernels::im2col_circular(&x[n * hw * c..(n + 1) * hw * c], 1, h, w, c);
            let dst = &mut out[n * hw * d..(n + 1) * hw * d];
            kernels::gemm(hw, 9 * c, d, &cols, Layout::Normal, wt, Layout::Normal, dst, 0.0);
        }
        add_bias_rows(&mut out, self.value(bias).data());
        let mut oshape = ishape;
        *oshape.last_mut().expect("rank") = d;
        let value = Tensor::new(&oshape, out)?;
        Ok(self.push_op(
            value,
            Op::Conv3x3 { input, weight, bias },
            &[input, weight, bias],
        ))
    }

    /// Global average over the spatial positions: `B×H×W×C → B×C`
    /// (`H×W×C → 1×C`).
    pub fn mean_pool_spatial(&mut self, input: Var) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let (b, h, w, c) = spatial_dims(&ishape).ok_or_else(|| Error::dim("mean_pool_spatial", &ishape, &[]))?;
        let x = self.value(input).data();
        let hw = h * w;
        let mut out = vec![0.0; b * c];
        for n in 0..b {
            let acc = &mut out[n * c..(n + 1) * c];
            for p in 0..hw {
                let src = &x[(n * hw + p) * c..(n * hw + p + 1) * c];
                acc.iter_mut().zip(src).for_each(|(a, v)| *a += v);
            }
            acc.iter_mut().for_each(|a| *a /= hw as f64);
        }
        let value = Tensor::new(&[b, c], out)?;
        Ok(self.push_op(value, Op::MeanPoolSpatial(input), &[input]))
    }

    // ---- row plumbing ------------------------------------------------------

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(src).dims2()?;
        if len == 0 || start + len > r {
            return Err(Error::dim("slice_rows", &[r, c], &[start, len]));
        }
        let data = self.value(src).data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(&[len, c], data)?;
        Ok(self.push_op(value, Op::SliceRows { src, start }, &[src]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Usage("concat_rows of nothing".into()))?;
        let (_, c) = self.value(first).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.value(p).dims2()?;
            if pc != c {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(&[rows, c], data)?;
        Ok(self.push_op(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    // ---- pair measures -----------------------------------------------------

    fn check_pairs(&self, op: &'static str, emb: Var, pairs: &[(usize, usize)]) -> Result<(usize, usize)> {
        let (n, d) = self.value(emb).dims2()?;
        if pairs.is_empty() {
            return Err(Error::Usage(format!("{op}: empty pair list")));
        }
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= n || j >= n) {
            return Err(Error::dim(op, &[n, d], &[i, j]));
        }
        Ok((n, d))
    }

    /// Euclidean distance between rows `i` and `j` for every listed pair.
    pub fn pair_distance(&mut self, emb: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        self.check_pairs("pair_distance", emb, pairs)?;
        let e = self.value(emb);
        let data: Vec<f64> = pairs
            .iter()
            .map(|&(i, j)| {
                e.row(i)
                    .iter()
                    .zip(e.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let value = Tensor::new(&[pairs.len()], data)?;
        Ok(self.push_op(
            value,
            Op::PairDistance {
                emb,
                pairs: pairs.to_vec(),
            },
            &[emb],
        ))
    }

    /// Cosine similarity between rows `i` and `j` for every listed pair.
    pub fn pair_cosine(&mut self, emb: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        self.check_pairs("pair_cosine", emb, pairs)?;
        let e = self.value(emb);
        let mut data = Vec::with_capacity(pairs.len());
        for &(i, j) in pairs {
            let (ni, nj) = (norm(e.row(i)), norm(e.row(j)));
            if ni < MIN_NORM || nj < MIN_NORM {
                return Err(Error::Numeric(format!("pair_cosine: zero-norm row in pair ({i}, {j})")));
            }
            data.push(dot(e.row(i), e.row(j)) / (ni * nj));
        }
        let value = Tensor::new(&[pairs.len()], data)?;
        Ok(self.push_op(
            value,
            Op::PairCosine {
                emb,
                pairs: pairs.to_vec(),
            },
            &[emb],
        ))
    }

    // ---- diagnostics -------------------------------------------------------

    /// First recorded tensor holding a NaN or infinity, as `(index, op name)`.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Smallest `|x|` fed into any relu or hinge; finite-difference checks
    /// are only meaningful when this is well above the step size.
    pub fn min_kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) | Op::Hinge(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.nodes[a.0].value.data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    // ---- backward ----------------------------------------------------------

    /// Populates gradients of the scalar `loss` for every tensor that
    /// requires them. Previous gradients are discarded; contributions from
    /// multiple uses of one tensor add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("loss handle does not belong to this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient buffer for `v`, allocated on first touch; `None` when `v`
    /// does not require a gradient.
    fn acc<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !nodes[v.0].requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]))
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let out = &nodes[i].value;
        let val = |v: Var| nodes[v.0].value.data();
        macro_rules! with_grad {
            ($v:expr, |$ga:ident| $body:expr) => {
                if let Some($ga) = Self::acc(nodes, grads, $v) {
                    $body
                }
            };
        }
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                with_grad!(a, |ga| axpy(ga, 1.0, g));
                with_grad!(b, |gb| axpy(gb, 1.0, g));
            }
            &Op::Sub(a, b) => {
                with_grad!(a, |ga| axpy(ga, 1.0, g));
                with_grad!(b, |gb| axpy(gb, -1.0, g));
            }
            &Op::Mul(a, b) => {
                with_grad!(a, |ga| {
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(val(b)) {
                        *d += gi * y;
                    }
                });
                with_grad!(b, |gb| {
                    for ((d, gi), x) in gb.iter_mut().zip(g).zip(val(a)) {
                        *d += gi * x;
                    }
                });
            }
            &Op::Scale(a, c) => with_grad!(a, |ga| axpy(ga, c, g)),
            &Op::AddConst(a) | &Op::Reshape(a) => with_grad!(a, |ga| axpy(ga, 1.0, g)),
            &Op::Exp(a) => with_grad!(a, |ga| {
                for ((d, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *d += gi * y;
                }
            }),
            &Op::Log(a) => with_grad!(a, |ga| {
                for ((d, gi), x) in ga.iter_mut().zip(g).zip(val(a)) {
                    *d += gi / x;
                }
            }),
            &Op::Relu(a) | &Op::Hinge(a) => with_grad!(a, |ga| {
                for ((d, gi), x) in ga.iter_mut().zip(g).zip(val(a)) {
                    if *x > 0.0 {
                        *d += gi;
                    }
                }
            }),
            &Op::Softplus(a) => with_grad!(a, |ga| {
                for ((d, gi), x) in ga.iter_mut().zip(g).zip(val(a)) {
                    *d += gi * kernels::sigmoid(*x);
                }
            }),
            &Op::Sum(a) => with_grad!(a, |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            &Op::Mean(a) => with_grad!(a, |ga| {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|d| *d += s);
            }),
            &Op::L2NormRows(a) => with_grad!(a, |ga| {
                let (_, c) = last_dim(nodes[a.0].value.shape());
                let x = val(a);
                for (r, (&gr, &n)) in g.iter().zip(out.data()).enumerate() {
                    if n > 0.0 {
                        for j in r * c..(r + 1) * c {
                            ga[j] += gr * x[j] / n;
                        }
                    }
                }
            }),
            &Op::NormalizeRows(a) => with_grad!(a, |ga| {
                let (rows, c) = last_dim(out.shape());
                let x = val(a);
                for r in 0..rows {
                    let span = r * c..(r + 1) * c;
                    let y = &out.data()[span.clone()];
                    let gr = &g[span.clone()];
                    let n = norm(&x[span.clone()]);
                    let yg = dot(y, gr);
                    for (k, j) in span.enumerate() {
                        ga[j] += (gr[k] - y[k] * yg) / n;
                    }
                }
            }),
            &Op::SoftmaxRows(a) => with_grad!(a, |ga| {
                let (rows, c) = last_dim(out.shape());
                for r in 0..rows {
                    let span = r * c..(r + 1) * c;
                    let y = &out.data()[span.clone()];
                    let gr = &g[span.clone()];
                    let gy = dot(y, gr);
                    for (k, j) in span.enumerate() {
                        ga[j] += y[k] * (gr[k] - gy);
                    }
                }
            }),
            &Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().expect("matrix");
                let (_, n) = nodes[b.0].value.dims2().expect("matrix");
                with_grad!(a, |ga| kernels::gemm(m, n, k, g, Layout::Normal, val(b), Layout::Transposed, ga, 1.0));
                with_grad!(b, |gb| kernels::gemm(k, m, n, val(a), Layout::Transposed, g, Layout::Normal, gb, 1.0));
            }
            &Op::Transpose(a) => with_grad!(a, |ga| {
                let (r, c) = out.dims2().expect("matrix");
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] += g[i * c + j];
                    }
                }
            }),
            &Op::BiasAdd(x, b) => {
                with_grad!(x, |gx| axpy(gx, 1.0, g));
                with_grad!(b, |gb| column_sums_into(gb, g));
            }
            &Op::Conv1x1 { input, weight, bias } => {
                let (c, d) = nodes[weight.0].value.dims2().expect("matrix");
                let rows = out.len() / d;
                with_grad!(input, |gi| kernels::gemm(
                    rows,
                    d,
                    c,
                    g,
                    Layout::Normal,
                    val(weight),
                    Layout::Transposed,
                    gi,
                    1.0
                ));
                with_grad!(weight, |gw| kernels::gemm(
                    c,
                    rows,
                    d,
                    val(input),
                    Layout::Transposed,
                    g,
                    Layout::Normal,
                    gw,
                    1.0
                ));
                with_grad!(bias, |gb| column_sums_into(gb, g));
            }
            &Op::Conv3x3 { input, weight, bias } => {
                let (bn, h, w, c) = spatial_dims(nodes[input.0].value.shape()).expect("spatial");
                let d = *nodes[weight.0].value.shape().last().expect("rank");
                let hw = h * w;
                let x = nodes[input.0].value.data();
                if nodes[weight.0].requires_grad {
                    with_grad!(weight, |gw| for n in 0..bn {
                        let cols = kernels::im2col_circular(&x[n * hw * c..(n + 1) * hw * c], 1, h, w, c);
                        let gn = &g[n * hw * d..(n + 1) * hw * d];
                        kernels::gemm(9 * c, hw, d, &cols, Layout::Transposed, gn, Layout::Normal, gw, 1.0);
                    });
                }
                if nodes[input.0].requires_grad {
                    let wt = val(weight);
                    let mut gcols = vec![0.0; hw * 9 * c];
                    with_grad!(input, |gi| for n in 0..bn {
                        let gn = &g[n * hw * d..(n + 1) * hw * d];
                        kernels::gemm(hw, d, 9 * c, gn, Layout::Normal, wt, Layout::Transposed, &mut gcols, 0.0);
                        kernels::col2im_circular(&gcols, 1, h, w, c, &mut gi[n * hw * c..(n + 1) * hw * c]);
                    });
                }
                with_grad!(bias, |gb| column_sums_into(gb, g));
            }
            &Op::MeanPoolSpatial(a) => with_grad!(a, |ga| {
                let (bn, h, w, c) = spatial_dims(nodes[a.0].value.shape()).expect("spatial");
                let hw = h * w;
                for n in 0..bn {
                    let gn = &g[n * c..(n + 1) * c];
                    for p in 0..hw {
                        let dst = &mut ga[(n * hw + p) * c..(n * hw + p + 1) * c];
                        dst.iter_mut().zip(gn).for_each(|(d, gv)| *d += gv / hw as f64);
                    }
                }
            }),
            &Op::SliceRows { src, start } => with_grad!(src, |gs| {
                let (_, c) = out.dims2().expect("matrix");
                axpy(&mut gs[start * c..start * c + g.len()], 1.0, g);
            }),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    with_grad!(p, |gp| axpy(gp, 1.0, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::PairDistance { emb, pairs } => with_grad!(*emb, |ge| {
                let e = &nodes[emb.0].value;
                let (_, d) = e.dims2().expect("matrix");
                for (k, &(i, j)) in pairs.iter().enumerate() {
                    let dist = out.data()[k];
                    if dist <= 0.0 {
                        continue;
                    }
                    let s = g[k] / dist;
                    for t in 0..d {
                        let diff = e.row(i)[t] - e.row(j)[t];
                        ge[i * d + t] += s * diff;
                        ge[j * d + t] -= s * diff;
                    }
                }
            }),
            Op::PairCosine { emb, pairs } => with_grad!(*emb, |ge| {
                let e = &nodes[emb.0].value;
                let (_, d) = e.dims2().expect("matrix");
                for (k, &(i, j)) in pairs.iter().enumerate() {
                    let (ei, ej) = (e.row(i), e.row(j));
                    let (ni, nj) = (norm(ei), norm(ej));
                    let s = out.data()[k];
                    for t in 0..d {
                        ge[i * d + t] += g[k] * (ej[t] / (ni * nj) - s * ei[t] / (ni * ni));
                        ge[j * d + t] += g[k] * (ei[t] / (ni * nj) - s * ej[t] / (nj * nj));
                    }
                }
            }),
        }
    }
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += a * s);
}

fn add_bias_rows(data: &mut [f64], bias: &[f64]) {
    for row in data.chunks_mut(bias.len()) {
        row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
}

fn column_sums_into(dst: &mut [f64], g: &[f64]) {
    for row in g.chunks(dst.len()) {
        dst.iter_mut().zip(row).for_each(|(d, v)| *d += v);
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    row.iter_mut().for_each(|v| *v = (*v - max).exp());
    // Every term lies in [0, 1] and the largest is exactly 1. Summing them as
    // fixed-point integers with 96 fractional bits is associative, so the
    // normalizer, and with it every output, does not depend on the order of
    // the entries. Truncation costs less than `len · 2^-96` relative.
    let total = if max.is_finite() {
        const SCALE: f64 = (1u128 << 96) as f64;
        let fixed: i128 = row.iter().map(|&v| (v * SCALE) as i128).sum();
        fixed as f64 / SCALE
    } else {
        row.iter().sum()
    };
    row.iter_mut().for_each(|v| *v /= total);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_selection() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 2., 3., 4.]);

        let a = tape.constant(t(&[1, 2], &[1., 0.]));
        let b = tape.constant(t(&[2, 1], &[0., 5.]));
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(p).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 3], &[0., 0., 0., 1., 2., 3., 1000., 0., -5.]));
        let y = tape.softmax_rows(x);
        let v = tape.value(y).data().to_vec();
        for k in 0..3 {
            assert!((v[k] - 1.0 / 3.0).abs() < 1e-15);
        }
        let want = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for k in 0..3 {
            assert!((v[3 + k] - want[k]).abs() < 1e-12);
        }
        assert_eq!(v[6], 1.0);
        assert!(v.iter().all(|x| x.is_finite()));
        let s: f64 = v[6..9].iter().sum();
        assert_eq!(s, 1.0);
    }

    #[test]
    fn softmax_commutes_with_permutation_exactly() {
        let row: Vec<f64> = (0..257).map(|i| (i as f64 * 0.731).sin() * 7.0).collect();
        let mut rev: Vec<f64> = row.iter().rev().copied().collect();
        let mut fwd = row.clone();
        softmax_in_place(&mut fwd);
        softmax_in_place(&mut rev);
        rev.reverse();
        assert_eq!(fwd, rev);
        assert!((fwd.iter().sum::<f64>() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[-0.3]));
        let h = tape.hinge(x);
        assert_eq!(tape.value(h).data(), &[0.0]);
        let r = tape.constant(t(&[1, 2], &[3., 4.]));
        let n = tape.l2_norm_rows(r);
        assert_eq!(tape.value(n).data(), &[5.0]);
        let z = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.log(z), Err(Error::Domain { .. })));
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[1., -2., 3., 0.5, 0., 9.]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn hinge_subgradient_is_zero_at_kink() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let h = tape.hinge(x);
        let s = tape.sum(h);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.normalize_rows(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn conv1x1_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2], &[0.25, 1.5]));
        let w = tape.constant(t(&[2, 1], &[1., 1.]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv1x1(x, w, b).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[1.75]);
    }

    #[test]
    fn conv3x3_zero_weight_gives_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3, 4, 2], 0.7));
        let w = tape.constant(Tensor::zeros(&[3, 3, 2, 3]));
        let b = tape.constant(t(&[3], &[1., -2., 0.5]));
        let y = tape.conv3x3_circular(x, w, b).unwrap();
        assert_eq!(tape.shape(y), &[3, 4, 3]);
        for px in tape.value(y).data().chunks(3) {
            assert_eq!(px, &[1., -2., 0.5]);
        }
    }

    #[test]
    fn conv3x3_center_delta_is_identity() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let x = tape.constant(t(&[4, 5, 1], &data));
        let mut k = Tensor::zeros(&[3, 3, 1, 1]);
        k.set(&[1, 1, 0, 0], 1.0);
        let w = tape.constant(k);
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv3x3_circular(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        // loss = sum(x + x + 3x) → grad 5
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[0.3, -1.0]));
        let a = tape.add(x, x).unwrap();
        let b = tape.scale(x, 3.0);
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        let c = tape.constant(t(&[2], &[3., 4.]));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[3., 4.]);
    }
}
