//! Tape-based reverse-mode differentiation over small dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value. [`Tape::backward`] walks the nodes in reverse creation
//! order and accumulates adjoints; adjoints of parameter leaves are added into
//! a caller-supplied buffer, so several tapes (one per training example) can
//! feed the same gradient.
//!
//! Parameters are borrowed, not copied: a [`Var`] created with
//! [`Tape::param`] reads straight from the parameter slice.
//!
//! All tensors are row-major `rows x cols` matrices of `f64`. Scalars are
//! `1 x 1`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape mismatch");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Const,
    Param(usize),
    GatherRows { src: Var, rows: Vec<usize> },
    Add(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    CausalSoftmax { x: Var, scale: f64 },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    LogSoftmaxMasked { x: Var, mask: Vec<bool> },
    Softmax(Var),
    Exp(Var),
    WeightedSum { x: Var, terms: Vec<(usize, f64)> },
    GatherElems { x: Var, idx: Vec<usize> },
    Affine { x: Var, scale: f64 },
    Mul(Var, Var),
    Div(Var, Var),
    Abs(Var),
    CumProd(Var),
    Sum(Var),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == rows * cols);
        self.nodes.push(Node { rows, cols, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(i) => &self.params[i].data,
            _ => &self.nodes[v.0].value,
        }
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.shape(v), (1, 1));
        self.value(v)[0]
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        self.push(rows, cols, data, Op::Const)
    }

    pub fn param(&mut self, index: usize) -> Var {
        let t = &self.params[index];
        self.push(t.rows, t.cols, Vec::new(), Op::Param(index))
    }

    /// Rows `rows[i]` of `src`, stacked.
    pub fn gather_rows(&mut self, src: Var, rows: Vec<usize>) -> Var {
        let (_, cols) = self.shape(src);
        let s = self.value(src);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in &rows {
            out.extend_from_slice(&s[r * cols..(r + 1) * cols]);
        }
        let n = rows.len();
        self.push(n, cols, out, Op::GatherRows { src, rows })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let shape = self.shape(a);
        assert_eq!(shape, self.shape(b), "add: shape mismatch");
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(shape.0, shape.1, out, Op::Add(a, b))
    }

    /// `a[m, n] + b[1, n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(b), (1, n), "add_row: shape mismatch");
        let bv = self.value(b);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            for (o, x) in row.iter_mut().zip(bv) {
                *o += x;
            }
        }
        self.push(m, n, out, Op::AddRow(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul: inner dimension mismatch");
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, y) in orow.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        self.push(m, n, out, Op::MatMul(a, b))
    }

    /// `a[m, k] * b[n, k]^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_bt: inner dimension mismatch");
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = ar.iter().zip(&bv[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum();
            }
        }
        self.push(m, n, out, Op::MatMulBt(a, b))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let out = self
            .value(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + libm::tanh(GELU_C * (v + GELU_A * v * v * v))))
            .collect();
        self.push(m, n, out, Op::Gelu(x))
    }

    /// Row-wise layer normalisation with gain `gamma[1, n]` and shift `beta[1, n]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (m, n) = self.shape(x);
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / libm::sqrt(var + LN_EPS);
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        self.push(m, n, out, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Row softmax of `scale * x` restricted to the lower triangle; entries
    /// above the diagonal are exactly zero.
    pub fn causal_softmax(&mut self, x: Var, scale: f64) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(m, n, "causal_softmax expects a square score matrix");
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..=i * n + i];
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(scale * b));
            let mut sum = 0.0;
            for j in 0..=i {
                let e = libm::exp(scale * row[j] - max);
                out[i * n + j] = e;
                sum += e;
            }
            for o in &mut out[i * n..=i * n + i] {
                *o /= sum;
            }
        }
        self.push(m, n, out, Op::CausalSoftmax { x, scale })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(x);
        assert!(start + len <= n, "slice_cols out of range");
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        self.push(m, len, out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let m = self.shape(parts[0]).0;
        let n: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in &parts {
                let (pm, pn) = self.shape(p);
                assert_eq!(pm, m, "concat_cols: row mismatch");
                out.extend_from_slice(&self.value(p)[i * pn..(i + 1) * pn]);
            }
        }
        self.push(m, n, out, Op::ConcatCols(parts))
    }

    /// Row-wise log-softmax over entries where `mask` is true; masked-out
    /// entries are `-inf`. Every row needs at least one true entry.
    pub fn log_softmax_masked(&mut self, x: Var, mask: Vec<bool>) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(mask.len(), m * n, "mask shape mismatch");
        let xv = self.value(x);
        let mut out = vec![f64::NEG_INFINITY; m * n];
        for i in 0..m {
            let idx = i * n..(i + 1) * n;
            let max = xv[idx.clone()]
                .iter()
                .zip(&mask[idx.clone()])
                .filter(|(_, &ok)| ok)
                .fold(f64::NEG_INFINITY, |a, (&b, _)| a.max(b));
            assert!(max > f64::NEG_INFINITY, "row {i} has no legal entry");
            let sum: f64 = xv[idx.clone()]
                .iter()
                .zip(&mask[idx.clone()])
                .filter(|(_, &ok)| ok)
                .map(|(&v, _)| libm::exp(v - max))
                .sum();
            let lse = max + libm::log(sum);
            for j in idx {
                if mask[j] {
                    out[j] = xv[j] - lse;
                }
            }
        }
        self.push(m, n, out, Op::LogSoftmaxMasked { x, mask })
    }

    /// Unmasked row softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for j in 0..n {
                let e = libm::exp(row[j] - max);
                out[i * n + j] = e;
                sum += e;
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o /= sum;
            }
        }
        self.push(m, n, out, Op::Softmax(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let out = self.value(x).iter().map(|&v| libm::exp(v)).collect();
        self.push(m, n, out, Op::Exp(x))
    }

    /// Scalar `sum_k c_k * x[flat_k]`. Entries with a zero coefficient are
    /// never read, so `-inf` values in `x` are safe as long as they are not
    /// listed.
    pub fn weighted_sum(&mut self, x: Var, terms: Vec<(usize, f64)>) -> Var {
        let xv = self.value(x);
        let s = terms.iter().map(|&(i, c)| c * xv[i]).sum();
        self.push(1, 1, vec![s], Op::WeightedSum { x, terms })
    }

    /// Row vector of the listed flat entries of `x`.
    pub fn gather_elems(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let out: Vec<f64> = idx.iter().map(|&i| xv[i]).collect();
        let n = out.len();
        self.push(1, n, out, Op::GatherElems { x, idx })
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (m, n) = self.shape(x);
        let out = self.value(x).iter().map(|v| scale * v + shift).collect();
        self.push(m, n, out, Op::Affine { x, scale })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let shape = self.shape(a);
        assert_eq!(shape, self.shape(b), "mul: shape mismatch");
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push(shape.0, shape.1, out, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let shape = self.shape(a);
        assert_eq!(shape, self.shape(b), "div: shape mismatch");
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x / y).collect();
        self.push(shape.0, shape.1, out, Op::Div(a, b))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let out = self.value(x).iter().map(|v| libm::fabs(*v)).collect();
        self.push(m, n, out, Op::Abs(x))
    }

    /// Running product along a row vector.
    pub fn cumprod(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(m, 1, "cumprod expects a row vector");
        let mut acc = 1.0;
        let out = self
            .value(x)
            .iter()
            .map(|v| {
                acc *= v;
                acc
            })
            .collect();
        self.push(1, n, out, Op::CumProd(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(x))
    }

    /// Reverse sweep from the scalar `root`, adding parameter adjoints into
    /// `param_grads` (one buffer per parameter tensor, same layout).
    pub fn backward(&self, root: Var, param_grads: &mut [Vec<f64>]) {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let (m, n) = (node.rows, node.cols);
            match &node.op {
                Op::Const => {}
                Op::Param(i) => {
                    for (acc, v) in param_grads[*i].iter_mut().zip(&g) {
                        *acc += v;
                    }
                }
                Op::GatherRows { src, rows } => {
                    let d = self.acc(&mut grads, *src);
                    for (r_out, &r_src) in rows.iter().enumerate() {
                        for j in 0..n {
                            d[r_src * n + j] += g[r_out * n + j];
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(self.acc(&mut grads, *a), &g);
                    add_into(self.acc(&mut grads, *b), &g);
                }
                Op::AddRow(a, b) => {
                    add_into(self.acc(&mut grads, *a), &g);
                    let db = self.acc(&mut grads, *b);
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
                Op::MatMul(a, b) => {
                    let k = self.shape(*a).1;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = self.acc(&mut grads, *a);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            da[i * k + p] += grow.iter().zip(&bv[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                    let db = self.acc(&mut grads, *b);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (d, y) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += x * y;
                            }
                        }
                    }
                }
                Op::MatMulBt(a, b) => {
                    let k = self.shape(*a).1;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = self.acc(&mut grads, *a);
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for (d, y) in da[i * k..(i + 1) * k].iter_mut().zip(&bv[j * k..(j + 1) * k]) {
                                *d += gij * y;
                            }
                        }
                    }
                    let db = self.acc(&mut grads, *b);
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for (d, x) in db[j * k..(j + 1) * k].iter_mut().zip(&av[i * k..(i + 1) * k]) {
                                *d += gij * x;
                            }
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let d = self.acc(&mut grads, *x);
                    for ((d, &v), &gv) in d.iter_mut().zip(xv).zip(&g) {
                        let t = libm::tanh(GELU_C * (v + GELU_A * v * v * v));
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *d += gv * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let gam = self.value(*gamma);
                    let mut dx_all = vec![0.0; m * n];
                    let mut dgamma = vec![0.0; n];
                    let mut dbeta = vec![0.0; n];
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let hr = &xhat[i * n..(i + 1) * n];
                        let mut mean_g = 0.0;
                        let mut mean_gh = 0.0;
                        for j in 0..n {
                            let gh = gr[j] * gam[j];
                            mean_g += gh;
                            mean_gh += gh * hr[j];
                            dgamma[j] += gr[j] * hr[j];
                            dbeta[j] += gr[j];
                        }
                        mean_g /= n as f64;
                        mean_gh /= n as f64;
                        for j in 0..n {
                            dx_all[i * n + j] = rstd[i] * (gr[j] * gam[j] - mean_g - hr[j] * mean_gh);
                        }
                    }
                    add_into(self.acc(&mut grads, *x), &dx_all);
                    add_into(self.acc(&mut grads, *gamma), &dgamma);
                    add_into(self.acc(&mut grads, *beta), &dbeta);
                }
                Op::CausalSoftmax { x, scale } => {
                    let y = &node.value;
                    let d = self.acc(&mut grads, *x);
                    for i in 0..m {
                        let dot: f64 = (0..=i).map(|j| g[i * n + j] * y[i * n + j]).sum();
                        for j in 0..=i {
                            d[i * n + j] += scale * y[i * n + j] * (g[i * n + j] - dot);
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    let xn = self.shape(*x).1;
                    let d = self.acc(&mut grads, *x);
                    for i in 0..m {
                        add_into(&mut d[i * xn + start..i * xn + start + n], &g[i * n..(i + 1) * n]);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pn = self.shape(p).1;
                        let d = self.acc(&mut grads, p);
                        for i in 0..m {
                            add_into(&mut d[i * pn..(i + 1) * pn], &g[i * n + offset..i * n + offset + pn]);
                        }
                        offset += pn;
                    }
                }
                Op::LogSoftmaxMasked { x, mask } => {
                    let y = &node.value;
                    let d = self.acc(&mut grads, *x);
                    for i in 0..m {
                        let idx = i * n..(i + 1) * n;
                        let gsum: f64 = idx.clone().filter(|&j| mask[j]).map(|j| g[j]).sum();
                        for j in idx {
                            if mask[j] {
                                d[j] += g[j] - libm::exp(y[j]) * gsum;
                            }
                        }
                    }
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let d = self.acc(&mut grads, *x);
                    for i in 0..m {
                        let idx = i * n..(i + 1) * n;
                        let dot: f64 = idx.clone().map(|j| g[j] * y[j]).sum();
                        for j in idx {
                            d[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
                Op::Exp(x) => {
                    let y = &node.value;
                    let d = self.acc(&mut grads, *x);
                    for j in 0..y.len() {
                        if y[j] != 0.0 {
                            d[j] += g[j] * y[j];
                        }
                    }
                }
                Op::WeightedSum { x, terms } => {
                    let d = self.acc(&mut grads, *x);
                    for &(i, c) in terms {
                        d[i] += g[0] * c;
                    }
                }
                Op::GatherElems { x, idx } => {
                    let d = self.acc(&mut grads, *x);
                    for (k, &i) in idx.iter().enumerate() {
                        d[i] += g[k];
                    }
                }
                Op::Affine { x, scale } => {
                    let d = self.acc(&mut grads, *x);
                    for (d, gv) in d.iter_mut().zip(&g) {
                        *d += scale * gv;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                    let da = self.acc(&mut grads, *a);
                    for j in 0..g.len() {
                        da[j] += g[j] * bv[j];
                    }
                    let db = self.acc(&mut grads, *b);
                    for j in 0..g.len() {
                        db[j] += g[j] * av[j];
                    }
                }
                Op::Div(a, b) => {
                    let (av, bv) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                    let da = self.acc(&mut grads, *a);
                    for j in 0..g.len() {
                        da[j] += g[j] / bv[j];
                    }
                    let db = self.acc(&mut grads, *b);
                    for j in 0..g.len() {
                        db[j] -= g[j] * av[j] / (bv[j] * bv[j]);
                    }
                }
                Op::Abs(x) => {
                    let xv = self.value(*x).to_vec();
                    let d = self.acc(&mut grads, *x);
                    for j in 0..g.len() {
                        let s = if xv[j] > 0.0 {
                            1.0
                        } else if xv[j] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        d[j] += g[j] * s;
                    }
                }
                Op::CumProd(x) => {
                    let xv = self.value(*x).to_vec();
                    let d = self.acc(&mut grads, *x);
                    // d y_k / d x_j = prod_{i <= k, i != j} x_i, built without division.
                    for j in 0..n {
                        let before: f64 = xv[..j].iter().product();
                        let mut after = 1.0;
                        let mut total = 0.0;
                        for k in j..n {
                            if k > j {
                                after *= xv[k];
                            }
                            total += g[k] * before * after;
                        }
                        d[j] += total;
                    }
                }
                Op::Sum(x) => {
                    let d = self.acc(&mut grads, *x);
                    for v in d.iter_mut() {
                        *v += g[0];
                    }
                }
            }
        }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let len = self.nodes[v.0].rows * self.nodes[v.0].cols;
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of d(root)/d(param 0) for a graph built by `f`.
    fn check<F>(params: Vec<Tensor>, f: F)
    where
        F: Fn(&mut Tape<'_>) -> Var,
    {
        let mut grads: Vec<Vec<f64>> = params.iter().map(|t| vec![0.0; t.len()]).collect();
        {
            let mut tape = Tape::new(&params);
            let root = f(&mut tape);
            tape.backward(root, &mut grads);
        }
        let h = 1e-6;
        for (pi, t) in params.iter().enumerate() {
            for k in 0..t.len() {
                let eval = |delta: f64| {
                    let mut p = params.clone();
                    p[pi].data[k] += delta;
                    let mut tape = Tape::new(&p);
                    let r = f(&mut tape);
                    tape.scalar(r)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = grads[pi][k];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "param {pi}[{k}]: analytic {an} vs numeric {fd}"
                );
            }
        }
    }

    fn t(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut s = seed;
        let data = (0..rows * cols)
            .map(|_| {
                s = crate::rng::splitmix64(s);
                crate::rng::unit_from_hash(s) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(rows, cols, data)
    }

    #[test]
    fn matmul_variants() {
        check(vec![t(3, 4, 1), t(4, 2, 2), t(5, 2, 3)], |tp| {
            let (a, b, c) = (tp.param(0), tp.param(1), tp.param(2));
            let ab = tp.matmul(a, b);
            let s = tp.matmul_bt(ab, c);
            let w: Vec<_> = (0..15).map(|i| (i, 0.1 * i as f64 - 0.3)).collect();
            tp.weighted_sum(s, w)
        });
    }

    #[test]
    fn norm_gelu_and_softmaxes() {
        check(vec![t(4, 6, 4), t(1, 6, 5), t(1, 6, 6), t(6, 4, 7)], |tp| {
            let (x, g, b, w) = (tp.param(0), tp.param(1), tp.param(2), tp.param(3));
            let h = tp.layer_norm(x, g, b);
            let h = tp.gelu(h);
            let s = tp.matmul(h, w);
            let a = tp.causal_softmax(s, 0.7);
            let left = tp.slice_cols(a, 1, 2);
            let right = tp.slice_cols(a, 0, 1);
            let cat = tp.concat_cols(vec![left, right, a]);
            let sm = tp.softmax(cat);
            let w: Vec<_> = (0..28).map(|i| (i, (i % 5) as f64 - 2.0)).collect();
            tp.weighted_sum(sm, w)
        });
    }

    #[test]
    fn masked_log_softmax_and_scalar_ops() {
        check(vec![t(3, 7, 8), t(1, 7, 9)], |tp| {
            let (x, bias) = (tp.param(0), tp.param(1));
            let z = tp.add_row(x, bias);
            let mask: Vec<bool> = (0..21).map(|i| i % 3 != 1 || i % 7 == 6).collect();
            let lp = tp.log_softmax_masked(z, mask);
            let p = tp.exp(lp);
            let stops = tp.gather_elems(p, vec![6, 13, 20]);
            let cont = tp.affine(stops, -1.0, 1.0);
            let cp = tp.cumprod(cont);
            let e = tp.sum(cp);
            let shifted = tp.affine(e, 1.0, -2.5);
            let a = tp.abs(shifted);
            let tp_mass = tp.weighted_sum(p, vec![(0, 1.0), (2, 1.0), (9, 1.0)]);
            let num = tp.affine(tp_mass, 2.0, 1.0);
            let den = tp.affine(e, 1.0, 3.0);
            let q = tp.div(num, den);
            let prod = tp.mul(q, a);
            let ce = tp.weighted_sum(lp, vec![(6, -1.0), (14, -0.5)]);
            tp.add(prod, ce)
        });
    }

    #[test]
    fn gather_rows_accumulates_repeats() {
        check(vec![t(4, 3, 10)], |tp| {
            let table = tp.param(0);
            let g = tp.gather_rows(table, vec![2, 0, 2]);
            let sq = tp.mul(g, g);
            tp.sum(sq)
        });
    }

    #[test]
    fn causal_rows_ignore_future() {
        let p = vec![t(4, 4, 11)];
        let mut tape = Tape::new(&p);
        let x = tape.param(0);
        let a = tape.causal_softmax(x, 1.0);
        let v = tape.value(a).to_vec();
        for i in 0..4 {
            for j in 0..4 {
                if j > i {
                    assert_eq!(v[i * 4 + j], 0.0);
                }
            }
            let s: f64 = v[i * 4..i * 4 + 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
