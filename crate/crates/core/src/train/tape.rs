//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Every operation appends a node holding its forward value, the inputs it
//! read and whatever intermediates its backward rule needs. [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints into every node that
//! (transitively) depends on a trainable leaf.
//!
//! The fused Sinkhorn half-steps record the softmax weights of their
//! log-sum-exp so an unrolled solve differentiates exactly through the
//! iterations that were actually computed.

use crate::error::{shape_err, Error, Result};
use crate::numerics::{count_madds, logsumexp, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Patch geometry of a 3×3, stride-2, padding-1 convolution over a
/// token-major grid (`h·w` rows, `c` columns).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl ConvGeom {
    pub const KERNEL: usize = 3;
    pub const STRIDE: usize = 2;
    pub const PAD: usize = 1;

    pub fn out_h(&self) -> usize {
        (self.h + 2 * Self::PAD - Self::KERNEL) / Self::STRIDE + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * Self::PAD - Self::KERNEL) / Self::STRIDE + 1
    }

    pub fn patch_len(&self) -> usize {
        Self::KERNEL * Self::KERNEL * self.c
    }

    /// Source row for output pixel `(oy, ox)` and kernel tap `(ky, kx)`,
    /// or `None` when the tap lands in the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * Self::STRIDE + ky) as isize - Self::PAD as isize;
        let x = (ox * Self::STRIDE + kx) as isize - Self::PAD as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some(y as usize * self.w + x as usize)
        }
    }
}

pub fn im2col(input: &Matrix, geom: ConvGeom) -> Result<Matrix> {
    if input.shape() != (geom.h * geom.w, geom.c) {
        return Err(shape_err(format!(
            "im2col: input {:?} does not match grid {}x{}x{}",
            input.shape(),
            geom.h,
            geom.w,
            geom.c
        )));
    }
    let (oh, ow, c) = (geom.out_h(), geom.out_w(), geom.c);
    let mut out = Matrix::zeros(oh * ow, geom.patch_len());
    for oy in 0..oh {
        for ox in 0..ow {
            let row = out.row_mut(oy * ow + ox);
            for ky in 0..3 {
                for kx in 0..3 {
                    if let Some(src) = geom.source(oy, ox, ky, kx) {
                        let off = (ky * 3 + kx) * c;
                        row[off..off + c].copy_from_slice(input.row(src));
                    }
                }
            }
        }
    }
    Ok(out)
}

fn col2im(grad: &Matrix, geom: ConvGeom) -> Matrix {
    let (oh, ow, c) = (geom.out_h(), geom.out_w(), geom.c);
    let mut out = Matrix::zeros(geom.h * geom.w, c);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = grad.row(oy * ow + ox);
            for ky in 0..3 {
                for kx in 0..3 {
                    if let Some(src) = geom.source(oy, ox, ky, kx) {
                        let off = (ky * 3 + kx) * c;
                        for (o, g) in out.row_mut(src).iter_mut().zip(&row[off..off + c]) {
                            *o += g;
                        }
                    }
                }
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    MatMulTN(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Recip(Var),
    Gelu(Var),
    SumRows(Var),
    SumCols(Var),
    SumAll(Var),
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Im2Col(Var, ConvGeom),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    /// `f_i = ε log a_i − ε logΣ_j exp((φ_j − C_ij)/ε)`; saves the softmax.
    SinkhornRows {
        cost: Var,
        pot: Var,
        probs: Matrix,
    },
    /// `φ_j = ε log b_j − ε logΣ_i exp((f_i − C_ij)/ε)`; saves the softmax.
    SinkhornCols {
        cost: Var,
        pot: Var,
        probs: Matrix,
    },
    CrossEntropy {
        logits: Var,
        probs: Matrix,
        labels: Vec<usize>,
        smoothing: f64,
    },
    Mse {
        pred: Var,
        target: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Adjoints indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

macro_rules! same_shape {
    ($a:expr, $b:expr, $op:expr) => {
        if $a.shape() != $b.shape() {
            return Err(shape_err(format!("{}: {:?} vs {:?}", $op, $a.shape(), $b.shape())));
        }
    };
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

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    fn val(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).matmul(self.val(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).matmul_nt(self.val(b))?;
        Ok(self.push(out, Op::MatMulNT(a, b), &[a, b]))
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).matmul_tn(self.val(b))?;
        Ok(self.push(out, Op::MatMulTN(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).add(self.val(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).sub(self.val(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).hadamard(self.val(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    fn broadcast(&self, a: Var, b: Var, row: bool, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        let (am, bm) = (self.val(a), self.val(b));
        let ok = if row { bm.shape() == (1, am.cols()) } else { bm.shape() == (am.rows(), 1) };
        if !ok {
            return Err(shape_err(format!(
                "{} broadcast: {:?} with {:?}",
                if row { "row" } else { "column" },
                am.shape(),
                bm.shape()
            )));
        }
        let mut out = am.clone();
        for i in 0..am.rows() {
            let r = out.row_mut(i);
            for (j, v) in r.iter_mut().enumerate() {
                *v = f(*v, if row { bm.data()[j] } else { bm.data()[i] });
            }
        }
        count_madds(am.len() as u64);
        Ok(out)
    }

    /// `a + 1·row` for a `1×m` row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.broadcast(a, row, true, |x, y| x + y)?;
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    /// `a + col·1ᵀ` for an `n×1` column.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let out = self.broadcast(a, col, false, |x, y| x + y)?;
        Ok(self.push(out, Op::AddCol(a, col), &[a, col]))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.broadcast(a, row, true, |x, y| x * y)?;
        Ok(self.push(out, Op::MulRow(a, row), &[a, row]))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let out = self.broadcast(a, col, false, |x, y| x * y)?;
        Ok(self.push(out, Op::MulCol(a, col), &[a, col]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.val(a).scale(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.val(a).map(|v| v + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.val(a).map(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.val(a).map(f64::ln);
        self.push(out, Op::Ln(a), &[a])
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let out = self.val(a).map(|v| 1.0 / v);
        self.push(out, Op::Recip(a), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.val(a).map(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Row sums as an `n×1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let m = self.val(a);
        let out = Matrix::column(&m.row_sums());
        count_madds(m.len() as u64);
        self.push(out, Op::SumRows(a), &[a])
    }

    /// Column sums as a `1×m` row.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = self.val(a);
        let out = Matrix::row_vector(&m.col_sums());
        count_madds(m.len() as u64);
        self.push(out, Op::SumCols(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Matrix::filled(1, 1, self.val(a).sum());
        self.push(out, Op::SumAll(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.val(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > self.val(a).cols() {
            return Err(shape_err("slice_cols out of range"));
        }
        let out = self.val(a).slice_cols(start, len);
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.val(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.val(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut off = 0;
        for p in parts {
            let m = self.val(*p);
            if m.rows() != rows {
                return Err(shape_err("concat_cols: row mismatch"));
            }
            for i in 0..rows {
                out.row_mut(i)[off..off + m.cols()].copy_from_slice(m.row(i));
            }
            off += m.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn im2col(&mut self, a: Var, geom: ConvGeom) -> Result<Var> {
        let out = im2col(self.val(a), geom)?;
        Ok(self.push(out, Op::Im2Col(a, geom), &[a]))
    }

    /// `x_i / sqrt(‖x_i‖² + eps)` per row.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.val(a);
        let norms: Vec<f64> =
            (0..x.rows()).map(|i| (x.row(i).iter().map(|v| v * v).sum::<f64>() + eps).sqrt()).collect();
        let mut out = x.clone();
        for (i, r) in norms.iter().enumerate() {
            for v in out.row_mut(i) {
                *v /= r;
            }
        }
        count_madds(x.len() as u64);
        self.push(out, Op::NormalizeRows { x: a, norms }, &[a])
    }

    /// Per-row standardization `(x − mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.val(a);
        let c = x.cols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        count_madds(2 * x.len() as u64);
        self.push(out, Op::LayerNorm { x: a, inv_std }, &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.val(a);
        let mut out = x.clone();
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            let l = logsumexp(row);
            for v in row.iter_mut() {
                *v = (*v - l).exp();
            }
        }
        count_madds(x.len() as u64);
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    /// Row half-step of log-domain Sinkhorn: returns the `n×1` potential
    /// `f` given cost `C` (n×m) and column potential `φ` (1×m).
    pub fn sinkhorn_rows(&mut self, cost: Var, pot: Var, log_marg: &[f64], eps: f64) -> Result<Var> {
        let c = self.val(cost);
        let phi = self.val(pot);
        let (n, m) = c.shape();
        if phi.shape() != (1, m) || log_marg.len() != n {
            return Err(shape_err("sinkhorn_rows: potential or marginal shape"));
        }
        let mut probs = Matrix::zeros(n, m);
        let mut f = Matrix::zeros(n, 1);
        for i in 0..n {
            let row = probs.row_mut(i);
            for j in 0..m {
                row[j] = (phi.data()[j] - c[(i, j)]) / eps;
            }
            let l = logsumexp(row);
            for v in row.iter_mut() {
                *v = (*v - l).exp();
            }
            f[(i, 0)] = eps * log_marg[i] - eps * l;
        }
        count_madds((n * m) as u64);
        Ok(self.push(f, Op::SinkhornRows { cost, pot, probs }, &[cost, pot]))
    }

    /// Column half-step: returns the `1×m` potential `φ` given `C` and `f` (n×1).
    pub fn sinkhorn_cols(&mut self, cost: Var, pot: Var, log_marg: &[f64], eps: f64) -> Result<Var> {
        let c = self.val(cost);
        let f = self.val(pot);
        let (n, m) = c.shape();
        if f.shape() != (n, 1) || log_marg.len() != m {
            return Err(shape_err("sinkhorn_cols: potential or marginal shape"));
        }
        let mut probs = Matrix::zeros(n, m);
        let mut maxes = vec![f64::NEG_INFINITY; m];
        for i in 0..n {
            let row = probs.row_mut(i);
            for j in 0..m {
                let v = (f.data()[i] - c[(i, j)]) / eps;
                row[j] = v;
                if v > maxes[j] {
                    maxes[j] = v;
                }
            }
        }
        let mut sums = vec![0.0; m];
        for i in 0..n {
            let row = probs.row_mut(i);
            for j in 0..m {
                row[j] = (row[j] - maxes[j]).exp();
                sums[j] += row[j];
            }
        }
        for i in 0..n {
            for (v, s) in probs.row_mut(i).iter_mut().zip(&sums) {
                *v /= s;
            }
        }
        let phi: Vec<f64> = (0..m).map(|j| eps * log_marg[j] - eps * (maxes[j] + sums[j].ln())).collect();
        count_madds((n * m) as u64);
        Ok(self.push(Matrix::row_vector(&phi), Op::SinkhornCols { cost, pot, probs }, &[cost, pot]))
    }

    /// Mean cross-entropy of row-wise logits against integer labels (1×1),
    /// with the target mixed toward uniform by `smoothing`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        let z = self.val(logits);
        if z.rows() != labels.len() {
            return Err(shape_err("cross_entropy: one label per row"));
        }
        if labels.iter().any(|&l| l >= z.cols()) {
            return Err(Error::InvalidArgument("label out of range".into()));
        }
        let c = z.cols() as f64;
        let mut probs = z.clone();
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = probs.row_mut(i);
            let l = logsumexp(row);
            let mean = row.iter().sum::<f64>() / c;
            loss += l - (1.0 - smoothing) * row[y] - smoothing * mean;
            for v in row.iter_mut() {
                *v = (*v - l).exp();
            }
        }
        let out = Matrix::filled(1, 1, loss / labels.len() as f64);
        let op = Op::CrossEntropy { logits, probs, labels: labels.to_vec(), smoothing };
        Ok(self.push(out, op, &[logits]))
    }

    /// `(1/rows) Σ (pred − target)²` (1×1).
    pub fn mse(&mut self, pred: Var, target: Matrix) -> Result<Var> {
        let p = self.val(pred);
        same_shape!(p, target, "mse");
        let loss = p.sub(&target)?.data().iter().map(|v| v * v).sum::<f64>() / p.rows() as f64;
        Ok(self.push(Matrix::filled(1, 1, loss), Op::Mse { pred, target }, &[pred]))
    }

    /// Adjoints of `root` (which must be 1×1) with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.val(root).shape() != (1, 1) {
            return Err(shape_err("backward needs a scalar root"));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[idx];
        let acc = |v: Var, delta: Matrix, grads: &mut [Option<Matrix>]| -> Result<()> {
            if !self.needs(v) {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.matmul_nt(self.val(*b))?, grads)?;
                }
                if self.needs(*b) {
                    acc(*b, self.val(*a).matmul_tn(g)?, grads)?;
                }
            }
            Op::MatMulNT(a, b) => {
                // out = a bᵀ
                if self.needs(*a) {
                    acc(*a, g.matmul(self.val(*b))?, grads)?;
                }
                if self.needs(*b) {
                    acc(*b, g.matmul_tn(self.val(*a))?, grads)?;
                }
            }
            Op::MatMulTN(a, b) => {
                // out = aᵀ b
                if self.needs(*a) {
                    acc(*a, self.val(*b).matmul_nt(g)?, grads)?;
                }
                if self.needs(*b) {
                    acc(*b, self.val(*a).matmul(g)?, grads)?;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads)?;
                acc(*b, g.clone(), grads)?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads)?;
                acc(*b, g.scale(-1.0), grads)?;
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.hadamard(self.val(*b))?, grads)?;
                }
                if self.needs(*b) {
                    acc(*b, g.hadamard(self.val(*a))?, grads)?;
                }
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone(), grads)?;
                acc(*r, Matrix::row_vector(&g.col_sums()), grads)?;
            }
            Op::AddCol(a, c) => {
                acc(*a, g.clone(), grads)?;
                acc(*c, Matrix::column(&g.row_sums()), grads)?;
            }
            Op::MulRow(a, r) => {
                let av = self.val(*a);
                let rv = self.val(*r);
                if self.needs(*a) {
                    let d = Matrix::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * rv.data()[j]);
                    acc(*a, d, grads)?;
                }
                if self.needs(*r) {
                    acc(*r, Matrix::row_vector(&g.hadamard(av)?.col_sums()), grads)?;
                }
            }
            Op::MulCol(a, c) => {
                let av = self.val(*a);
                let cv = self.val(*c);
                if self.needs(*a) {
                    let d = Matrix::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * cv.data()[i]);
                    acc(*a, d, grads)?;
                }
                if self.needs(*c) {
                    acc(*c, Matrix::column(&g.hadamard(av)?.row_sums()), grads)?;
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s), grads)?,
            Op::AddScalar(a) => acc(*a, g.clone(), grads)?,
            Op::Exp(a) => acc(*a, g.hadamard(&node.value)?, grads)?,
            Op::Ln(a) => {
                let x = self.val(*a);
                acc(*a, Matrix::from_fn(x.rows(), x.cols(), |i, j| g[(i, j)] / x[(i, j)]), grads)?
            }
            Op::Recip(a) => {
                let y = &node.value;
                acc(*a, Matrix::from_fn(y.rows(), y.cols(), |i, j| -g[(i, j)] * y[(i, j)] * y[(i, j)]), grads)?
            }
            Op::Gelu(a) => {
                let x = self.val(*a);
                acc(*a, Matrix::from_fn(x.rows(), x.cols(), |i, j| g[(i, j)] * gelu_grad(x[(i, j)])), grads)?
            }
            Op::SumRows(a) => {
                let x = self.val(*a);
                acc(*a, Matrix::from_fn(x.rows(), x.cols(), |i, _| g[(i, 0)]), grads)?
            }
            Op::SumCols(a) => {
                let x = self.val(*a);
                acc(*a, Matrix::from_fn(x.rows(), x.cols(), |_, j| g[(0, j)]), grads)?
            }
            Op::SumAll(a) => {
                let x = self.val(*a);
                acc(*a, Matrix::filled(x.rows(), x.cols(), g[(0, 0)]), grads)?
            }
            Op::Transpose(a) => acc(*a, g.transpose(), grads)?,
            Op::SliceCols(a, start) => {
                let x = self.val(*a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(*a, d, grads)?
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.val(*p).cols();
                    if self.needs(*p) {
                        acc(*p, g.slice_cols(off, w), grads)?;
                    }
                    off += w;
                }
            }
            Op::Im2Col(a, geom) => acc(*a, col2im(g, *geom), grads)?,
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut d = g.clone();
                for (i, r) in norms.iter().enumerate() {
                    let yg: f64 = y.row(i).iter().zip(g.row(i)).map(|(a, b)| a * b).sum();
                    for (dv, yv) in d.row_mut(i).iter_mut().zip(y.row(i)) {
                        *dv = (*dv - yv * yg) / r;
                    }
                }
                acc(*x, d, grads)?
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let c = y.cols() as f64;
                let mut d = g.clone();
                for (i, is) in inv_std.iter().enumerate() {
                    let gm = g.row(i).iter().sum::<f64>() / c;
                    let gy = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum::<f64>() / c;
                    for (dv, yv) in d.row_mut(i).iter_mut().zip(y.row(i)) {
                        *dv = is * (*dv - gm - yv * gy);
                    }
                }
                acc(*x, d, grads)?
            }
            Op::SoftmaxRows(a) => {
                let p = &node.value;
                let mut d = g.clone();
                for i in 0..p.rows() {
                    let s: f64 = p.row(i).iter().zip(g.row(i)).map(|(a, b)| a * b).sum();
                    for (dv, pv) in d.row_mut(i).iter_mut().zip(p.row(i)) {
                        *dv = pv * (*dv - s);
                    }
                }
                acc(*a, d, grads)?
            }
            Op::SinkhornRows { cost, pot, probs } => {
                // ∂f_i/∂C_ij = p_ij, ∂f_i/∂φ_j = −p_ij
                let dc = Matrix::from_fn(probs.rows(), probs.cols(), |i, j| g[(i, 0)] * probs[(i, j)]);
                if self.needs(*pot) {
                    acc(*pot, Matrix::row_vector(&dc.col_sums()).scale(-1.0), grads)?;
                }
                acc(*cost, dc, grads)?;
            }
            Op::SinkhornCols { cost, pot, probs } => {
                let dc = Matrix::from_fn(probs.rows(), probs.cols(), |i, j| g[(0, j)] * probs[(i, j)]);
                if self.needs(*pot) {
                    acc(*pot, Matrix::column(&dc.row_sums()).scale(-1.0), grads)?;
                }
                acc(*cost, dc, grads)?;
            }
            Op::CrossEntropy { logits, probs, labels, smoothing } => {
                let b = labels.len() as f64;
                let uniform = smoothing / probs.cols() as f64;
                let mut d = probs.map(|p| p - uniform);
                for (i, &y) in labels.iter().enumerate() {
                    d[(i, y)] -= 1.0 - smoothing;
                }
                acc(*logits, d.scale(g[(0, 0)] / b), grads)?
            }
            Op::Mse { pred, target } => {
                let p = self.val(*pred);
                let s = 2.0 * g[(0, 0)] / p.rows() as f64;
                acc(*pred, p.sub(target)?.scale(s), grads)?
            }
        }
        Ok(())
    }
}
