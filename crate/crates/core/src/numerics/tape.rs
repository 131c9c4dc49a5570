//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every op appends one node holding its output value; `backward` walks the
//! tape in reverse and accumulates vector-Jacobian products into the inputs
//! that need them. A tape is single-threaded; separate tapes share nothing.

use crate::error::{Error, Result};
use crate::numerics::tensor::{numel, Tensor};

/// Additive mask value for disallowed attention positions.
pub const NEG_LARGE: f64 = -1e9;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    AddRow { x: Var, row: Var },
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Gelu(Var),
    Embedding { table: Var, indices: Vec<usize> },
    Softmax { x: Var, mask: Option<Var> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Mse { pred: Var, target: Var },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

// ── dense kernels ───────────────────────────────────────────────────

/// `out[m,n] = a[m,k] · b[k,n]`
fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    debug_assert!(a.len() >= m * k && b.len() >= k * n);
    // SAFETY: slices cover the strided extents passed to dgemm.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// `acc[m,k] += dc[m,n] · b[k,n]ᵀ`
fn gemm_nt_acc(dc: &[f64], b: &[f64], m: usize, k: usize, n: usize, acc: &mut [f64]) {
    assert!(dc.len() >= m * n && b.len() >= k * n && acc.len() >= m * k);
    // SAFETY: bounds asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            k,
            1.0,
            dc.as_ptr(),
            n as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            1.0,
            acc.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// `acc[k,n] += a[m,k]ᵀ · dc[m,n]`
fn gemm_tn_acc(a: &[f64], dc: &[f64], m: usize, k: usize, n: usize, acc: &mut [f64]) {
    assert!(a.len() >= m * k && dc.len() >= m * n && acc.len() >= k * n);
    // SAFETY: bounds asserted above.
    unsafe {
        matrixmultiply::dgemm(
            k,
            m,
            n,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            dc.as_ptr(),
            n as isize,
            1,
            1.0,
            acc.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = alpha·a·b + beta·c` on strided views `(slice, row_stride, col_stride)`
/// of an `m×k` and a `k×n` matrix.
#[allow(clippy::too_many_arguments)]
fn strided_gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    beta: f64,
    c: (&mut [f64], usize, usize),
) {
    let extent = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.0.len() >= extent(m, k, a.1, a.2));
    assert!(b.0.len() >= extent(k, n, b.1, b.2));
    assert!(c.0.len() >= extent(m, n, c.1, c.2));
    // SAFETY: every strided extent is bounds-checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.0.as_mut_ptr(),
            c.1 as isize,
            c.2 as isize,
        );
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn is_masked(m: f64) -> bool {
    m <= NEG_LARGE * 0.5
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: impl FnOnce(&mut [f64]), len: usize) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    contribution(slot);
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

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape node is well-formed")
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, parents: &[Var]) -> Result<Var> {
        debug_assert_eq!(numel(&shape), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { shape, data, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let out = gemm_nn(self.data(a), self.data(b), m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        self.push("add", self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Adds a length-`n` row to every row of `x` (last dimension `n`).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = *self.shape(x).last().expect("non-empty shape");
        if numel(self.shape(row)) != n {
            return Err(Error::shape(
                "add_row",
                format!("row {:?} does not match last dim of {:?}", self.shape(row), self.shape(x)),
            ));
        }
        let r = self.data(row);
        let out = self.data(x).chunks(n).flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| a + b)).collect();
        self.push("add_row", self.shape(x).to_vec(), out, Op::AddRow { x, row }, &[x, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        self.push("mul", self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v * s).collect();
        self.push("scale", self.shape(x).to_vec(), out, Op::Scale(x, s), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.is_empty() || shape.contains(&0) || numel(shape) != numel(self.shape(x)) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.data(x).to_vec();
        self.push("reshape", shape.to_vec(), out, Op::Reshape(x), &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.data(*p)[o * len..(o + 1) * len]);
            }
        }
        self.push("concat", shape, out, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src = self.shape(x).to_vec();
        if axis >= src.len() || len == 0 || start + len > src[axis] {
            return Err(Error::shape("slice", format!("[{start}, {}) on axis {axis} of {src:?}", start + len)));
        }
        let (outer, dim, inner) = split_axis(&src, axis);
        let mut shape = src.clone();
        shape[axis] = len;
        let data = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        self.push("slice", shape, out, Op::Slice { x, axis, start }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| gelu(v)).collect();
        self.push("gelu", self.shape(x).to_vec(), out, Op::Gelu(x), &[x])
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (vocab, d) = self.matrix_dims("embedding_lookup", table)?;
        if indices.is_empty() {
            return Err(Error::shape("embedding_lookup", "no indices"));
        }
        let data = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= vocab {
                return Err(Error::shape("embedding_lookup", format!("index {i} >= vocab {vocab}")));
            }
            out.extend_from_slice(&data[i * d..(i + 1) * d]);
        }
        self.push(
            "embedding_lookup",
            vec![indices.len(), d],
            out,
            Op::Embedding { table, indices: indices.to_vec() },
            &[table],
        )
    }

    /// Row-wise softmax of `x + mask`; masked entries are `NEG_LARGE`.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<Var>) -> Result<Var> {
        let (m, n) = self.matrix_dims("softmax_rows", x)?;
        if let Some(mk) = mask {
            self.same_shape("softmax_rows", x, mk)?;
        }
        let xs = self.data(x);
        let ms = mask.map(|mk| self.data(mk));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mrow = ms.map(|ms| &ms[i * n..(i + 1) * n]);
            if let Some(mrow) = mrow {
                if mrow.iter().all(|&v| is_masked(v)) {
                    return Err(Error::FullyMasked { row: i });
                }
            }
            let z = |j: usize| row[j] + mrow.map_or(0.0, |mr| mr[j]);
            let max = (0..n).map(z).fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for (j, oj) in o.iter_mut().enumerate() {
                *oj = (z(j) - max).exp();
                sum += *oj;
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        let parents: Vec<Var> = std::iter::once(x).chain(mask).collect();
        self.push("softmax_rows", vec![m, n], out, Op::Softmax { x, mask }, &parents)
    }

    /// Multi-head scaled dot-product attention over `[tokens, d]` inputs
    /// with a `[tokens, tokens]` additive mask (rows are queries).
    pub fn masked_attention(&mut self, q: Var, k: Var, v: Var, mask: Option<Var>, heads: usize) -> Result<Var> {
        let (nt, d) = self.matrix_dims("masked_attention", q)?;
        self.same_shape("masked_attention", q, k)?;
        self.same_shape("masked_attention", q, v)?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("masked_attention", format!("d={d} not divisible by heads={heads}")));
        }
        if let Some(mk) = mask {
            if self.shape(mk) != [nt, nt] {
                return Err(Error::shape("masked_attention", format!("mask {:?} for {nt} tokens", self.shape(mk))));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let md = mask.map(|mk| self.data(mk));
        let mut probs = vec![0.0; heads * nt * nt];
        let mut out = vec![0.0; nt * d];
        for h in 0..heads {
            let p = &mut probs[h * nt * nt..(h + 1) * nt * nt];
            // S = Q_h K_hᵀ · scale
            strided_gemm(nt, dh, nt, scale, (&qd[h * dh..], d, 1), (&kd[h * dh..], 1, d), 0.0, (p, nt, 1));
            for i in 0..nt {
                let row = &mut p[i * nt..(i + 1) * nt];
                let mut max = f64::NEG_INFINITY;
                for (j, pj) in row.iter_mut().enumerate() {
                    let mv = md.map_or(0.0, |m| m[i * nt + j]);
                    if is_masked(mv) {
                        *pj = f64::NEG_INFINITY;
                    } else {
                        *pj += mv;
                        max = max.max(*pj);
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::FullyMasked { row: i });
                }
                let mut sum = 0.0;
                for pj in row.iter_mut() {
                    *pj = if *pj == f64::NEG_INFINITY { 0.0 } else { (*pj - max).exp() };
                    sum += *pj;
                }
                row.iter_mut().for_each(|pj| *pj /= sum);
            }
            // O_h = P V_h
            strided_gemm(nt, nt, dh, 1.0, (p, nt, 1), (&vd[h * dh..], d, 1), 0.0, (&mut out[h * dh..], d, 1));
        }
        self.push("masked_attention", vec![nt, d], out, Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    /// Normalizes the last dimension to zero mean / unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().expect("non-empty shape");
        if d < 2 || numel(self.shape(gain)) != d || numel(self.shape(bias)) != d {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", self.shape(x), self.shape(gain), self.shape(bias)),
            ));
        }
        let xs = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        self.push(
            "layer_norm",
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            &[x, gain, bias],
        )
    }

    /// Mean squared error, returned as a one-element tensor.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse_loss", pred, target)?;
        let n = self.data(pred).len() as f64;
        let loss = self.data(pred).iter().zip(self.data(target)).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
        self.push("mse_loss", vec![1], vec![loss], Op::Mse { pred, target }, &[pred, target])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x), &[x])
    }

    /// Back-propagates from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*a) {
                    let bd = self.data(*b);
                    accumulate(grads, *a, |acc| gemm_nt_acc(g, bd, m, k, n, acc), m * k);
                }
                if self.wants(*b) {
                    let ad = self.data(*a);
                    accumulate(grads, *b, |acc| gemm_tn_acc(ad, g, m, k, n, acc), k * n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        accumulate(grads, v, |acc| acc.iter_mut().zip(g).for_each(|(o, gv)| *o += gv), g.len());
                    }
                }
            }
            Op::AddRow { x, row } => {
                if self.wants(*x) {
                    accumulate(grads, *x, |acc| acc.iter_mut().zip(g).for_each(|(o, gv)| *o += gv), g.len());
                }
                if self.wants(*row) {
                    let n = self.len_of(*row);
                    accumulate(
                        grads,
                        *row,
                        |acc| {
                            for chunk in g.chunks(n) {
                                acc.iter_mut().zip(chunk).for_each(|(o, gv)| *o += gv);
                            }
                        },
                        n,
                    );
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bd = self.data(*b);
                    accumulate(
                        grads,
                        *a,
                        |acc| {
                            for ((o, gv), bv) in acc.iter_mut().zip(g).zip(bd) {
                                *o += gv * bv;
                            }
                        },
                        g.len(),
                    );
                }
                if self.wants(*b) {
                    let ad = self.data(*a);
                    accumulate(
                        grads,
                        *b,
                        |acc| {
                            for ((o, gv), av) in acc.iter_mut().zip(g).zip(ad) {
                                *o += gv * av;
                            }
                        },
                        g.len(),
                    );
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    accumulate(grads, *x, |acc| acc.iter_mut().zip(g).for_each(|(o, gv)| *o += gv * s), g.len());
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    accumulate(grads, *x, |acc| acc.iter_mut().zip(g).for_each(|(o, gv)| *o += gv), g.len());
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for o in 0..outer {
                    for p in parts {
                        let len = self.shape(*p)[*axis] * inner;
                        if self.wants(*p) {
                            let src = &g[offset..offset + len];
                            accumulate(
                                grads,
                                *p,
                                |acc| acc[o * len..(o + 1) * len].iter_mut().zip(src).for_each(|(a, b)| *a += b),
                                self.len_of(*p),
                            );
                        }
                        offset += len;
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                if self.wants(*x) {
                    let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                    let len = node.shape[*axis];
                    accumulate(
                        grads,
                        *x,
                        |acc| {
                            for o in 0..outer {
                                let base = o * dim * inner + start * inner;
                                let src = &g[o * len * inner..(o + 1) * len * inner];
                                acc[base..base + len * inner].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                            }
                        },
                        self.len_of(*x),
                    );
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xd = self.data(*x);
                    accumulate(
                        grads,
                        *x,
                        |acc| {
                            for ((o, gv), xv) in acc.iter_mut().zip(g).zip(xd) {
                                *o += gv * gelu_grad(*xv);
                            }
                        },
                        g.len(),
                    );
                }
            }
            Op::Embedding { table, indices } => {
                if self.wants(*table) {
                    let d = self.shape(*table)[1];
                    accumulate(
                        grads,
                        *table,
                        |acc| {
                            for (r, &i) in indices.iter().enumerate() {
                                acc[i * d..(i + 1) * d]
                                    .iter_mut()
                                    .zip(&g[r * d..(r + 1) * d])
                                    .for_each(|(a, b)| *a += b);
                            }
                        },
                        self.len_of(*table),
                    );
                }
            }
            Op::Softmax { x, mask } => {
                let n = node.shape[1];
                let s = &node.data;
                let mut dx = vec![0.0; g.len()];
                for (i, (drow, srow)) in dx.chunks_mut(n).zip(s.chunks(n)).enumerate() {
                    let grow = &g[i * n..(i + 1) * n];
                    let inner = dot(grow, srow);
                    for j in 0..n {
                        drow[j] = srow[j] * (grow[j] - inner);
                    }
                }
                for v in std::iter::once(*x).chain(*mask) {
                    if self.wants(v) {
                        accumulate(grads, v, |acc| acc.iter_mut().zip(&dx).for_each(|(a, b)| *a += b), dx.len());
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.backprop_attention(*q, *k, *v, *heads, probs, g, grads);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = *node.shape.last().expect("non-empty");
                if self.wants(*gain) {
                    accumulate(
                        grads,
                        *gain,
                        |acc| {
                            for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                                for j in 0..d {
                                    acc[j] += gr[j] * xr[j];
                                }
                            }
                        },
                        d,
                    );
                }
                if self.wants(*bias) {
                    accumulate(
                        grads,
                        *bias,
                        |acc| {
                            for gr in g.chunks(d) {
                                acc.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                            }
                        },
                        d,
                    );
                }
                if self.wants(*x) {
                    let gain_d = self.data(*gain);
                    accumulate(
                        grads,
                        *x,
                        |acc| {
                            for (r, (gr, xr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                                let mut mean_dxh = 0.0;
                                let mut mean_dxh_xh = 0.0;
                                for j in 0..d {
                                    let dxh = gr[j] * gain_d[j];
                                    mean_dxh += dxh;
                                    mean_dxh_xh += dxh * xr[j];
                                }
                                mean_dxh /= d as f64;
                                mean_dxh_xh /= d as f64;
                                for j in 0..d {
                                    let dxh = gr[j] * gain_d[j];
                                    acc[r * d + j] += rstd[r] * (dxh - mean_dxh - xr[j] * mean_dxh_xh);
                                }
                            }
                        },
                        g.len(),
                    );
                }
            }
            Op::Mse { pred, target } => {
                let (pd, td) = (self.data(*pred), self.data(*target));
                let c = 2.0 * g[0] / pd.len() as f64;
                if self.wants(*pred) {
                    accumulate(
                        grads,
                        *pred,
                        |acc| {
                            for ((a, p), t) in acc.iter_mut().zip(pd).zip(td) {
                                *a += c * (p - t);
                            }
                        },
                        pd.len(),
                    );
                }
                if self.wants(*target) {
                    accumulate(
                        grads,
                        *target,
                        |acc| {
                            for ((a, p), t) in acc.iter_mut().zip(pd).zip(td) {
                                *a -= c * (p - t);
                            }
                        },
                        pd.len(),
                    );
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    accumulate(grads, *x, |acc| acc.iter_mut().for_each(|a| *a += g[0]), self.len_of(*x));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (nt, d) = (self.shape(q)[0], self.shape(q)[1]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut dq = vec![0.0; nt * d];
        let mut dk = vec![0.0; nt * d];
        let mut dv = vec![0.0; nt * d];
        let mut ds = vec![0.0; nt * nt];
        for h in 0..heads {
            let p = &probs[h * nt * nt..(h + 1) * nt * nt];
            // dP = gO_h V_hᵀ
            strided_gemm(nt, dh, nt, 1.0, (&g[h * dh..], d, 1), (&vd[h * dh..], 1, d), 0.0, (&mut ds, nt, 1));
            // dS = P ⊙ (dP − Σ_j dP⊙P) · scale; masked entries have P = 0
            for i in 0..nt {
                let (pr, dr) = (&p[i * nt..(i + 1) * nt], &mut ds[i * nt..(i + 1) * nt]);
                let inner: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (dj, pj) in dr.iter_mut().zip(pr) {
                    *dj = if *pj == 0.0 { 0.0 } else { pj * (*dj - inner) * scale };
                }
            }
            // dV_h += Pᵀ gO_h ; dQ_h += dS K_h ; dK_h += dSᵀ Q_h
            strided_gemm(nt, nt, dh, 1.0, (p, 1, nt), (&g[h * dh..], d, 1), 1.0, (&mut dv[h * dh..], d, 1));
            strided_gemm(nt, nt, dh, 1.0, (&ds, nt, 1), (&kd[h * dh..], d, 1), 1.0, (&mut dq[h * dh..], d, 1));
            strided_gemm(nt, nt, dh, 1.0, (&ds, 1, nt), (&qd[h * dh..], d, 1), 1.0, (&mut dk[h * dh..], d, 1));
        }
        for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(var) {
                accumulate(grads, var, |acc| acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b), grad.len());
            }
        }
    }
}
