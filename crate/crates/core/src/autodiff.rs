//! A reverse-mode autodiff tape over [`Tensor`] values.
//!
//! Every op appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients for every node
//! that transitively depends on a leaf created with `requires_grad`.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, numel, split_at_axis, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Precomputed rotary tables, `[tokens, pairs]` each.
#[derive(Clone, Debug)]
pub struct RopeTable {
    pub tokens: usize,
    pub pairs: usize,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Narrow(Var, usize, usize),
    Concat(Vec<Var>, usize),
    GatherRows(Var, Vec<usize>),
    Silu(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    Rope(Var, Rc<RopeTable>),
    L2Normalize(Var, Vec<f64>),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    fn check_suffix(&self, x: Var, y: Var) -> usize {
        let xs = self.shape(x);
        let ys = self.shape(y);
        assert!(
            ys.len() <= xs.len() && xs[xs.len() - ys.len()..] == *ys,
            "broadcast: {:?} is not a suffix of {:?}",
            ys,
            xs
        );
        numel(ys)
    }

    /// `x + y` where `y`'s shape is a trailing suffix of `x`'s.
    pub fn add_bcast(&mut self, x: Var, y: Var) -> Var {
        let inner = self.check_suffix(x, y);
        let mut v = self.value(x).clone();
        let yv = self.value(y).data();
        for chunk in v.data_mut().chunks_mut(inner) {
            for (a, b) in chunk.iter_mut().zip(yv) {
                *a += b;
            }
        }
        let ng = self.ng(x) || self.ng(y);
        self.push(v, Op::AddBcast(x, y), ng)
    }

    /// `x * y` where `y`'s shape is a trailing suffix of `x`'s.
    pub fn mul_bcast(&mut self, x: Var, y: Var) -> Var {
        let inner = self.check_suffix(x, y);
        let mut v = self.value(x).clone();
        let yv = self.value(y).data();
        for chunk in v.data_mut().chunks_mut(inner) {
            for (a, b) in chunk.iter_mut().zip(yv) {
                *a *= b;
            }
        }
        let ng = self.ng(x) || self.ng(y);
        self.push(v, Op::MulBcast(x, y), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a * c);
        let ng = self.ng(x);
        self.push(v, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a + c);
        let ng = self.ng(x);
        self.push(v, Op::AddScalar(x), ng)
    }

    /// Batched matrix product. `a` is `[..., m, k]`; `b` is either
    /// `[..., k, n]` with the same batch axes or a plain `[k, n]` shared
    /// across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (batch, m, k, n, shared) = matmul_dims(self.shape(a), self.shape(b));
        let mut out_shape = self.shape(a).to_vec();
        let r = out_shape.len();
        out_shape[r - 1] = n;
        let mut out = vec![0.0; batch * m * n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for bi in 0..batch {
            let bs = if shared { 0 } else { bi * k * n };
            gemm_nn(
                &av[bi * m * k..(bi + 1) * m * k],
                &bv[bs..bs + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&out_shape, out), Op::MatMul(a, b), ng)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let v = self.value(x).permute(perm);
        let ng = self.ng(x);
        self.push(v, Op::Permute(x, perm.to_vec()), ng)
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Var {
        let r = self.shape(x).len();
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape);
        let ng = self.ng(x);
        self.push(v, Op::Reshape(x), ng)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self.value(x).narrow(axis, start, len);
        let ng = self.ng(x);
        self.push(v, Op::Narrow(x, axis, start), ng)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        let parts: Vec<&Tensor> = xs.iter().map(|&x| self.value(x)).collect();
        let v = Tensor::concat(&parts, axis);
        let ng = xs.iter().any(|&x| self.ng(x));
        self.push(v, Op::Concat(xs.to_vec(), axis), ng)
    }

    /// Rows `idx` of a rank-2 tensor, in order (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 2, "gather_rows expects a matrix");
        let cols = xv.dim(1);
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            assert!(i < xv.dim(0), "gather_rows index {} out of range", i);
            data.extend_from_slice(&xv.data()[i * cols..(i + 1) * cols]);
        }
        let ng = self.ng(x);
        self.push(
            Tensor::new(&[idx.len(), cols], data),
            Op::GatherRows(x, idx.to_vec()),
            ng,
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * sigmoid(a));
        let ng = self.ng(x);
        self.push(v, Op::Silu(x), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = *xv.shape().last().expect("softmax of a scalar");
        let mut v = xv.clone();
        for row in v.data_mut().chunks_mut(cols) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for a in row.iter_mut() {
                *a = libm::exp(*a - mx);
                s += *a;
            }
            for a in row.iter_mut() {
                *a /= s;
            }
        }
        let ng = self.ng(x);
        self.push(v, Op::Softmax(x), ng)
    }

    /// Affine-free layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let cols = *xv.shape().last().expect("layer_norm of a scalar");
        let mut v = xv.clone();
        let mut inv_std = Vec::with_capacity(v.len() / cols);
        for row in v.data_mut().chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            for a in row.iter_mut() {
                *a = (*a - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(x);
        self.push(v, Op::LayerNorm(x, inv_std), ng)
    }

    /// Rotates interleaved pairs of the last axis of `[..., tokens, 2·pairs]`.
    pub fn rope(&mut self, x: Var, table: Rc<RopeTable>) -> Var {
        let xv = self.value(x);
        let r = xv.rank();
        assert!(r >= 2, "rope expects [..., tokens, dim]");
        assert_eq!(xv.dim(r - 2), table.tokens, "rope token count mismatch");
        assert!(
            xv.dim(r - 1) >= 2 * table.pairs,
            "rope table wider than head"
        );
        let mut v = xv.clone();
        rotate(v.data_mut(), xv.dim(r - 1), &table, false);
        let ng = self.ng(x);
        self.push(v, Op::Rope(x, table), ng)
    }

    /// Scales each last-axis row to unit L2 norm; all-zero rows map to zero.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = *xv.shape().last().expect("l2_normalize of a scalar");
        let mut v = xv.clone();
        let mut inv = Vec::with_capacity(v.len() / cols);
        for row in v.data_mut().chunks_mut(cols) {
            let n = libm::sqrt(row.iter().map(|a| a * a).sum::<f64>());
            if n > 0.0 {
                for a in row.iter_mut() {
                    *a /= n;
                }
                inv.push(1.0 / n);
            } else {
                row.fill(0.0);
                inv.push(0.0);
            }
        }
        let ng = self.ng(x);
        self.push(v, Op::L2Normalize(x, inv), ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(libm::fabs);
        let ng = self.ng(x);
        self.push(v, Op::Abs(x), ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a);
        let ng = self.ng(x);
        self.push(v, Op::Square(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(v, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let ng = self.ng(x);
        self.push(v, Op::Mean(x), ng)
    }

    /// Mean of `(a - b)²` over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let s = self.square(d);
        self.mean(s)
    }

    /// Reverse pass seeded with ones at `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(out.0 + 1, || None);
        grads[out.0] = Some(Tensor::ones(self.shape(out)));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, || g.clone());
                self.accum(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, || g.clone());
                self.accum(grads, *b, || g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                self.accum(grads, *a, || g.zip_map(self.value(*b), |x, y| x * y));
                self.accum(grads, *b, || g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::AddBcast(x, y) => {
                self.accum(grads, *x, || g.clone());
                let ys = self.shape(*y).to_vec();
                self.accum(grads, *y, || reduce_to_suffix(g.data(), &ys, |gv, _| gv));
            }
            Op::MulBcast(x, y) => {
                let yv = self.value(*y).data();
                let inner = yv.len();
                self.accum(grads, *x, || {
                    let mut out = g.clone();
                    for chunk in out.data_mut().chunks_mut(inner) {
                        for (a, b) in chunk.iter_mut().zip(yv) {
                            *a *= b;
                        }
                    }
                    out
                });
                let xv = self.value(*x).data();
                let ys = self.shape(*y).to_vec();
                self.accum(grads, *y, || {
                    reduce_to_suffix(g.data(), &ys, |gv, i| gv * xv[i])
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accum(grads, *x, || g.map(|a| a * c));
            }
            Op::AddScalar(x) => self.accum(grads, *x, || g.clone()),
            Op::MatMul(a, b) => {
                let (batch, m, k, n, shared) = matmul_dims(self.shape(*a), self.shape(*b));
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let gv = g.data();
                self.accum(grads, *a, || {
                    let mut ga = vec![0.0; batch * m * k];
                    for bi in 0..batch {
                        let bs = if shared { 0 } else { bi * k * n };
                        gemm_nt(
                            &gv[bi * m * n..(bi + 1) * m * n],
                            &bv[bs..bs + k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    Tensor::new(self.shape(*a), ga)
                });
                self.accum(grads, *b, || {
                    let mut gb = vec![0.0; if shared { k * n } else { batch * k * n }];
                    for bi in 0..batch {
                        let bs = if shared { 0 } else { bi * k * n };
                        gemm_tn(
                            &av[bi * m * k..(bi + 1) * m * k],
                            &gv[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bs..bs + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    Tensor::new(self.shape(*b), gb)
                });
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accum(grads, *x, || g.permute(&inv));
            }
            Op::Reshape(x) => {
                let s = self.shape(*x).to_vec();
                self.accum(grads, *x, || g.clone().reshape(&s));
            }
            Op::Narrow(x, axis, start) => {
                let xs = self.shape(*x).to_vec();
                let (outer, dim, inner) = split_at_axis(&xs, *axis);
                let len = g.shape()[*axis];
                self.accum(grads, *x, || {
                    let mut out = Tensor::zeros(&xs);
                    let od = out.data_mut();
                    for o in 0..outer {
                        let dst = (o * dim + start) * inner;
                        let src = o * len * inner;
                        od[dst..dst + len * inner]
                            .copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    out
                });
            }
            Op::Concat(xs, axis) => {
                let mut start = 0;
                for &x in xs {
                    let d = self.shape(x)[*axis];
                    self.accum(grads, x, || g.narrow(*axis, start, d));
                    start += d;
                }
            }
            Op::GatherRows(x, idx) => {
                let xs = self.shape(*x).to_vec();
                let cols = xs[1];
                self.accum(grads, *x, || {
                    let mut out = Tensor::zeros(&xs);
                    let od = out.data_mut();
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..cols {
                            od[i * cols + c] += g.data()[r * cols + c];
                        }
                    }
                    out
                });
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                self.accum(grads, *x, || {
                    g.zip_map(xv, |gv, a| {
                        let s = sigmoid(a);
                        gv * s * (1.0 + a * (1.0 - s))
                    })
                });
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let cols = *y.shape().last().unwrap();
                self.accum(grads, *x, || {
                    let mut out = g.clone();
                    for (orow, yrow) in out.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                        let dot: f64 = orow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for (o, &yv) in orow.iter_mut().zip(yrow) {
                            *o = yv * (*o - dot);
                        }
                    }
                    out
                });
            }
            Op::LayerNorm(x, inv_std) => {
                let y = &node.value;
                let cols = *y.shape().last().unwrap();
                self.accum(grads, *x, || {
                    let mut out = g.clone();
                    let rows = out.data_mut().chunks_mut(cols).zip(y.data().chunks(cols));
                    for ((orow, yrow), &is) in rows.zip(inv_std) {
                        let mg = orow.iter().sum::<f64>() / cols as f64;
                        let mgy =
                            orow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for (o, &yv) in orow.iter_mut().zip(yrow) {
                            *o = is * (*o - mg - yv * mgy);
                        }
                    }
                    out
                });
            }
            Op::Rope(x, table) => {
                let cols = *g.shape().last().unwrap();
                self.accum(grads, *x, || {
                    let mut out = g.clone();
                    rotate(out.data_mut(), cols, table, true);
                    out
                });
            }
            Op::L2Normalize(x, inv) => {
                let y = &node.value;
                let cols = *y.shape().last().unwrap();
                self.accum(grads, *x, || {
                    let mut out = g.clone();
                    let rows = out.data_mut().chunks_mut(cols).zip(y.data().chunks(cols));
                    for ((orow, yrow), &i) in rows.zip(inv) {
                        let dot: f64 = orow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for (o, &yv) in orow.iter_mut().zip(yrow) {
                            *o = i * (*o - yv * dot);
                        }
                    }
                    out
                });
            }
            Op::Abs(x) => {
                let xv = self.value(*x);
                self.accum(grads, *x, || g.zip_map(xv, |gv, a| gv * sign(a)));
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                self.accum(grads, *x, || g.zip_map(xv, |gv, a| 2.0 * gv * a));
            }
            Op::Sum(x) => {
                let s = self.shape(*x).to_vec();
                let gv = g.item();
                self.accum(grads, *x, || Tensor::full(&s, gv));
            }
            Op::Mean(x) => {
                let s = self.shape(*x).to_vec();
                let gv = g.item() / numel(&s) as f64;
                self.accum(grads, *x, || Tensor::full(&s, gv));
            }
        }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if !self.ng(v) {
            return;
        }
        let g = f();
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-a))
}

fn sign(a: f64) -> f64 {
    if a > 0.0 {
        1.0
    } else if a < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn matmul_dims(a: &[usize], b: &[usize]) -> (usize, usize, usize, usize, bool) {
    assert!(
        a.len() >= 2 && b.len() >= 2,
        "matmul needs matrices, got {:?} x {:?}",
        a,
        b
    );
    let m = a[a.len() - 2];
    let k = a[a.len() - 1];
    let kb = b[b.len() - 2];
    let n = b[b.len() - 1];
    assert_eq!(k, kb, "matmul inner dims differ: {:?} x {:?}", a, b);
    let batch = numel(&a[..a.len() - 2]);
    let shared = b.len() == 2;
    if !shared {
        assert_eq!(
            &a[..a.len() - 2],
            &b[..b.len() - 2],
            "matmul batch dims differ"
        );
    }
    (batch, m, k, n, shared)
}

fn reduce_to_suffix(g: &[f64], ys: &[usize], f: impl Fn(f64, usize) -> f64) -> Tensor {
    let inner = numel(ys);
    let mut out = vec![0.0; inner];
    for (i, &gv) in g.iter().enumerate() {
        out[i % inner] += f(gv, i);
    }
    Tensor::new(ys, out)
}

fn rotate(data: &mut [f64], cols: usize, table: &RopeTable, inverse: bool) {
    let s = if inverse { -1.0 } else { 1.0 };
    for (r, row) in data.chunks_mut(cols).enumerate() {
        let tok = r % table.tokens;
        let base = tok * table.pairs;
        for p in 0..table.pairs {
            let c = table.cos[base + p];
            let sn = s * table.sin[base + p];
            let a = row[2 * p];
            let b = row[2 * p + 1];
            row[2 * p] = a * c - b * sn;
            row[2 * p + 1] = a * sn + b * c;
        }
    }
}
