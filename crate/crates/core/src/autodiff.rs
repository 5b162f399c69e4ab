//! Tape-based reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are read from a
//! [`ParamStore`] without copying; nodes that do not depend on a trainable
//! parameter or a differentiable input are skipped during the backward sweep.

use crate::numerics::{matmul_nn, matmul_nt, matmul_tn, normalize_row, softmax_row_into, AdditiveMask, Tensor};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, F),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor<F>,
        inv_std: Vec<F>,
    },
    Softmax(Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<Option<usize>>),
    NormalizeRows(Var, Vec<F>),
    Max3(Var, Var, Var, Vec<u8>),
    Im2Col3(Var, usize),
    Sum(Var),
    Custom(Vec<Var>, Vec<Tensor<F>>),
}

struct Node<F> {
    value: Option<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<'s, F: Scalar> {
    store: &'s ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    node_grads: Vec<Option<Tensor<F>>>,
    param_grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn of(&self, v: Var) -> Option<&Tensor<F>> {
        self.node_grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.param_grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn into_param_grads(self) -> Vec<Option<Tensor<F>>> {
        self.param_grads
    }
}

fn gelu_parts<F: Scalar>(x: F) -> (F, F) {
    let k = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = F::lit(0.044715);
    let half = F::lit(0.5);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let y = half * x * (F::one() + t);
    let dy = half * (F::one() + t) + half * x * (F::one() - t * t) * k * (F::one() + F::lit(3.0) * c * x * x);
    (y, dy)
}

fn add_into<F: Scalar>(slot: &mut Option<Tensor<F>>, g: Tensor<F>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<'s, F: Scalar> Graph<'s, F> {
    pub fn new(store: &'s ParamStore<F>) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(512),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore<F> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (used to check gradients with respect to inputs).
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter leaf; memoized so every use shares one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: self.store.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b)).expect("matmul shapes");
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b)).expect("matmul_t shapes");
        self.push(out, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b)).expect("add shapes");
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).sub(self.value(b)).expect("sub shapes");
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        let c = av.cols();
        assert_eq!(rv.len(), c, "add_row width");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y).expect("mul shapes");
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Scales column j of `a` by `row[j]`, i.e. `a · diag(row)`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        assert_eq!(rv.len(), av.cols(), "mul_row width");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Var {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        let mut xhat = Tensor::zeros(&[rows, c]);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let (h, inv) = normalize_row(xv.row(r), eps);
            xhat.row_mut(r).copy_from_slice(&h);
            inv_std.push(inv);
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = xhat.clone();
        for r in 0..rows {
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = *o * g[j] + b[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    pub fn masked_softmax(&mut self, x: Var, mask: &AdditiveMask) -> Var {
        let xv = self.value(x);
        assert!(xv.rows() == mask.rows() && xv.cols() == mask.cols(), "softmax mask shape");
        let mut out = Tensor::zeros(&[xv.rows(), xv.cols()]);
        for r in 0..xv.rows() {
            softmax_row_into(xv.row(r), |c| mask.is_blocked(r, c), out.row_mut(r));
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| gelu_parts(x).0);
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Uses the subgradient 1 at exactly zero, so a path whose scale starts at zero
    /// still receives gradient.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(F::zero()));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| F::one() / (F::one() + (-x).exp()));
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        self.push(out, Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let mut data = Vec::with_capacity(av.rows() * len);
        for r in 0..av.rows() {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let out = Tensor::from_rows(av.rows(), len, data);
        self.push(out, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals).expect("concat_rows widths");
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::from_rows(rows, total, data);
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Row `i` of the output is `a[idx[i]]`, or zeros for `None`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<Option<usize>>) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut data = vec![F::zero(); idx.len() * c];
        for (i, src) in idx.iter().enumerate() {
            if let Some(s) = src {
                data[i * c..(i + 1) * c].copy_from_slice(av.row(*s));
            }
        }
        let out = Tensor::from_rows(idx.len(), c, data);
        self.push(out, Op::GatherRows(a, idx), &[a])
    }

    /// Zeroes every row whose `keep` flag is false.
    pub fn mask_rows(&mut self, a: Var, keep: &[bool]) -> Var {
        let idx = keep.iter().enumerate().map(|(i, &k)| k.then_some(i)).collect();
        self.gather_rows(a, idx)
    }

    /// Unit-normalizes every row; zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        let mut norms = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let n = av.row(r).iter().map(|&v| v * v).sum::<F>().sqrt();
            norms.push(n);
            if n > F::zero() {
                out.row_mut(r).iter_mut().for_each(|v| *v /= n);
            }
        }
        self.push(out, Op::NormalizeRows(a, norms), &[a])
    }

    /// Elementwise maximum of three same-shaped tensors (ties go to the first).
    pub fn max3(&mut self, a: Var, b: Var, c: Var) -> Var {
        let (av, bv, cv) = (self.value(a), self.value(b), self.value(c));
        let mut which = Vec::with_capacity(av.len());
        let mut data = Vec::with_capacity(av.len());
        for i in 0..av.len() {
            let (x, y, z) = (av.data()[i], bv.data()[i], cv.data()[i]);
            let (w, m) = if x >= y && x >= z {
                (0u8, x)
            } else if y >= z {
                (1, y)
            } else {
                (2, z)
            };
            which.push(w);
            data.push(m);
        }
        let out = Tensor::from_rows(av.rows(), av.cols(), data);
        self.push(out, Op::Max3(a, b, c, which), &[a, b, c])
    }

    /// 3×3 same-padded patch extraction on a `g×g` grid stored as `g²×c` rows.
    /// Output row layout is `[(ky*3+kx)*c + channel]`.
    pub fn im2col3(&mut self, a: Var, g: usize) -> Var {
        let av = self.value(a);
        let c = av.cols();
        assert_eq!(av.rows(), g * g, "im2col3 grid");
        let mut data = vec![F::zero(); g * g * 9 * c];
        for y in 0..g {
            for x in 0..g {
                let dst = (y * g + x) * 9 * c;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                        if sy < 0 || sx < 0 || sy >= g as isize || sx >= g as isize {
                            continue;
                        }
                        let src = av.row(sy as usize * g + sx as usize);
                        let off = dst + (ky * 3 + kx) * c;
                        data[off..off + c].copy_from_slice(src);
                    }
                }
            }
        }
        let out = Tensor::from_rows(g * g, 9 * c, data);
        self.push(out, Op::Im2Col3(a, g), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Scalar node with externally supplied local gradients (one per input).
    pub fn custom(&mut self, inputs: &[Var], value: F, grads: Vec<Tensor<F>>) -> Var {
        assert_eq!(inputs.len(), grads.len(), "custom arity");
        for (v, g) in inputs.iter().zip(&grads) {
            assert_eq!(self.value(*v).len(), g.len(), "custom gradient shape");
        }
        self.push(Tensor::scalar(value), Op::Custom(inputs.to_vec(), grads), inputs)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<F>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(F::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut param_grads: Vec<Option<Tensor<F>>> = (0..self.store.len()).map(|_| None).collect();
        for (pid, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                param_grads[pid] = grads[v.0].clone();
            }
        }
        Gradients {
            node_grads: grads,
            param_grads,
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, nn) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    let mut da = vec![F::zero(); m * k];
                    matmul_nt(g.data(), bv.data(), &mut da, m, nn, k);
                    add_into(&mut grads[a.0], Tensor::from_rows(m, k, da));
                }
                if self.rg(*b) {
                    let mut db = vec![F::zero(); k * nn];
                    matmul_tn(av.data(), g.data(), &mut db, m, k, nn);
                    add_into(&mut grads[b.0], Tensor::from_rows(k, nn, db));
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, nn) = (av.rows(), av.cols(), bv.rows());
                if self.rg(*a) {
                    let mut da = vec![F::zero(); m * k];
                    matmul_nn(g.data(), bv.data(), &mut da, m, nn, k);
                    add_into(&mut grads[a.0], Tensor::from_rows(m, k, da));
                }
                if self.rg(*b) {
                    let mut db = vec![F::zero(); nn * k];
                    matmul_tn(g.data(), av.data(), &mut db, m, nn, k);
                    add_into(&mut grads[b.0], Tensor::from_rows(nn, k, db));
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], g.scale(-F::one()));
                }
            }
            Op::AddRow(a, row) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if self.rg(*row) {
                    let rv = self.value(*row);
                    let mut acc = vec![F::zero(); g.cols()];
                    for r in 0..g.rows() {
                        for (s, &v) in acc.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    let t = Tensor::new(rv.dims().to_vec(), acc).expect("row dims");
                    add_into(&mut grads[row.0], t);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let t = g.zip_map(self.value(*b), |x, y| x * y).expect("mul grad");
                    add_into(&mut grads[a.0], t);
                }
                if self.rg(*b) {
                    let t = g.zip_map(self.value(*a), |x, y| x * y).expect("mul grad");
                    add_into(&mut grads[b.0], t);
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row);
                if self.rg(*a) {
                    let mut t = g.clone();
                    for r in 0..t.rows() {
                        for (o, &s) in t.row_mut(r).iter_mut().zip(rv.data()) {
                            *o *= s;
                        }
                    }
                    add_into(&mut grads[a.0], t);
                }
                if self.rg(*row) {
                    let av = self.value(*a);
                    let mut acc = vec![F::zero(); g.cols()];
                    for r in 0..g.rows() {
                        for ((s, &gv), &x) in acc.iter_mut().zip(g.row(r)).zip(av.row(r)) {
                            *s += gv * x;
                        }
                    }
                    let t = Tensor::new(rv.dims().to_vec(), acc).expect("row dims");
                    add_into(&mut grads[row.0], t);
                }
            }
            Op::Scale(a, s) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g.scale(*s));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let c = xhat.cols();
                let nf = F::from_usize_lossy(c);
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(&[xhat.rows(), c]);
                    for r in 0..xhat.rows() {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let dxhat: Vec<F> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let s1: F = dxhat.iter().copied().sum();
                        let s2: F = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                        let scale = inv_std[r] / nf;
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = scale * (nf * dxhat[j] - s1 - xr[j] * s2);
                        }
                    }
                    add_into(&mut grads[x.0], dx);
                }
                if self.rg(*gain) {
                    let mut dg = vec![F::zero(); c];
                    for r in 0..xhat.rows() {
                        for ((d, &a), &b) in dg.iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *d += a * b;
                        }
                    }
                    let dims = self.value(*gain).dims().to_vec();
                    add_into(&mut grads[gain.0], Tensor::new(dims, dg).expect("gain dims"));
                }
                if self.rg(*bias) {
                    let mut db = vec![F::zero(); c];
                    for r in 0..g.rows() {
                        for (d, &a) in db.iter_mut().zip(g.row(r)) {
                            *d += a;
                        }
                    }
                    let dims = self.value(*bias).dims().to_vec();
                    add_into(&mut grads[bias.0], Tensor::new(dims, db).expect("bias dims"));
                }
            }
            Op::Softmax(a) => {
                if self.rg(*a) {
                    let y = self.nodes[i].value.as_ref().expect("softmax value");
                    let mut dx = Tensor::zeros(&[y.rows(), y.cols()]);
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = yr[j] * (gr[j] - dot);
                        }
                    }
                    add_into(&mut grads[a.0], dx);
                }
            }
            Op::Gelu(a) => {
                if self.rg(*a) {
                    let t = self.value(*a).zip_map(g, |x, gv| gelu_parts(x).1 * gv).expect("gelu grad");
                    add_into(&mut grads[a.0], t);
                }
            }
            Op::Relu(a) => {
                if self.rg(*a) {
                    let t = self
                        .value(*a)
                        .zip_map(g, |x, gv| if x >= F::zero() { gv } else { F::zero() })
                        .expect("relu grad");
                    add_into(&mut grads[a.0], t);
                }
            }
            Op::Sigmoid(a) => {
                if self.rg(*a) {
                    let y = self.nodes[i].value.as_ref().expect("sigmoid value");
                    let t = y.zip_map(g, |s, gv| gv * s * (F::one() - s)).expect("sigmoid grad");
                    add_into(&mut grads[a.0], t);
                }
            }
            Op::SliceRows(a, start) => {
                if self.rg(*a) {
                    let av = self.value(*a);
                    let mut t = Tensor::zeros(&[av.rows(), av.cols()]);
                    let c = av.cols();
                    t.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    add_into(&mut grads[a.0], t);
                }
            }
            Op::SliceCols(a, start) => {
                if self.rg(*a) {
                    let av = self.value(*a);
                    let mut t = Tensor::zeros(&[av.rows(), av.cols()]);
                    let w = g.cols();
                    for r in 0..g.rows() {
                        t.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                    }
                    add_into(&mut grads[a.0], t);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if self.rg(*p) {
                        add_into(&mut grads[p.0], g.slice_rows(off, rows));
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let w = pv.cols();
                    if self.rg(*p) {
                        let mut data = Vec::with_capacity(g.rows() * w);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row(r)[off..off + w]);
                        }
                        add_into(&mut grads[p.0], Tensor::from_rows(g.rows(), w, data));
                    }
                    off += w;
                }
            }
            Op::GatherRows(a, idx) => {
                if self.rg(*a) {
                    let av = self.value(*a);
                    let mut t = Tensor::zeros(&[av.rows(), av.cols()]);
                    for (r, src) in idx.iter().enumerate() {
                        if let Some(s) = src {
                            for (o, &v) in t.row_mut(*s).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    }
                    add_into(&mut grads[a.0], t);
                }
            }
            Op::NormalizeRows(a, norms) => {
                if self.rg(*a) {
                    let y = self.nodes[i].value.as_ref().expect("normalize value");
                    let mut dx = Tensor::zeros(&[y.rows(), y.cols()]);
                    for r in 0..y.rows() {
                        if norms[r] == F::zero() {
                            continue;
                        }
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                    add_into(&mut grads[a.0], dx);
                }
            }
            Op::Max3(a, b, c, which) => {
                for (k, v) in [a, b, c].into_iter().enumerate() {
                    if self.rg(*v) {
                        let data = g
                            .data()
                            .iter()
                            .zip(which)
                            .map(|(&gv, &w)| if w as usize == k { gv } else { F::zero() })
                            .collect();
                        add_into(&mut grads[v.0], Tensor::from_rows(g.rows(), g.cols(), data));
                    }
                }
            }
            Op::Im2Col3(a, gsz) => {
                if self.rg(*a) {
                    let gsz = *gsz;
                    let av = self.value(*a);
                    let c = av.cols();
                    let mut t = Tensor::zeros(&[av.rows(), c]);
                    for y in 0..gsz {
                        for x in 0..gsz {
                            let srow = g.row(y * gsz + x);
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                    if sy < 0 || sx < 0 || sy >= gsz as isize || sx >= gsz as isize {
                                        continue;
                                    }
                                    let off = (ky * 3 + kx) * c;
                                    let dst = t.row_mut(sy as usize * gsz + sx as usize);
                                    for (o, &v) in dst.iter_mut().zip(&srow[off..off + c]) {
                                        *o += v;
                                    }
                                }
                            }
                        }
                    }
                    add_into(&mut grads[a.0], t);
                }
            }
            Op::Sum(a) => {
                if self.rg(*a) {
                    let av = self.value(*a);
                    add_into(&mut grads[a.0], Tensor::filled(av.dims(), g.data()[0]));
                }
            }
            Op::Custom(inputs, local) => {
                let s = g.data()[0];
                for (v, lg) in inputs.iter().zip(local) {
                    if self.rg(*v) {
                        let dims = self.value(*v).dims().to_vec();
                        let t = Tensor::new(dims, lg.data().iter().map(|&x| x * s).collect()).expect("custom dims");
                        add_into(&mut grads[v.0], t);
                    }
                }
            }
        }
    }
}
