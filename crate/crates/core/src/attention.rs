//! The SeT attention operator on plain matrices.
//!
//! Tokens are embedded with a Nyström map, transported onto a set of
//! reference rows with entropic OT, optionally damped by a positional
//! penalty, and then either pooled into the references
//! (`A_y(x) = m^{1/2} T̃ᵀ V`) or mixed back token-to-token through the
//! implicit matrix `diag(g)^{-1} T_y = n m T̃ T̃ᵀ` (the factored coupling
//! conditioned on the source token, so rows sum to one when no positional
//! penalty is applied). It is applied in factored form and never
//! materialized on the hot path.
//!
//! The softmax baseline (`dpsa_baseline`) lives here as well so both
//! mechanisms share the multiply-add accounting used by the benchmarks.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kernels::{cost_matrix, CostMode, KernelSpec};
use crate::numerics::{count_madds, Matrix};
use crate::nystrom::{embed, NystromMap, ReferenceSet};
use crate::sinkhorn::{sinkhorn, sinkhorn_fixed, Measure, SinkhornSettings, TransportPlan};

/// Row-normalization epsilon under the square root.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct PositionalPenalty {
    pub matrix: Matrix,
    pub tau: f64,
}

/// `M_ij = exp(−(i/n − j/m)² / τ²)` with 1-based `i`, `j`.
pub fn positional_matrix(n: usize, m: usize, tau: f64) -> Result<PositionalPenalty> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("positional matrix needs n, m >= 1".into()));
    }
    let inv = 1.0 / (tau * tau);
    let matrix = Matrix::from_fn(n, m, |i, j| {
        let a = (i + 1) as f64 / n as f64;
        let b = (j + 1) as f64 / m as f64;
        (-inv * (a - b) * (a - b)).exp()
    });
    Ok(PositionalPenalty { matrix, tau })
}

/// How many Sinkhorn sweeps a layer runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Iterations {
    /// Exactly this many sweeps, no early exit.
    Fixed(usize),
    /// Iterate until the marginal violation is below `tol`.
    Converge { tol: f64, max_iter: usize },
}

/// Transport settings shared by pooling, tokenwise attention and `K_y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransportSettings {
    pub epsilon: f64,
    pub iterations: Iterations,
    pub cost_mode: CostMode,
    /// `None` disables the positional penalty.
    pub tau: Option<f64>,
    /// Rescale rows of `M ⊙ T` back to the source marginal.
    pub renormalize: bool,
    /// Tolerance used to set `converged` under `Iterations::Fixed`.
    pub tol: f64,
}

impl Default for TransportSettings {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            iterations: Iterations::Converge { tol: 1e-6, max_iter: 1000 },
            cost_mode: CostMode::InducedSqDistance,
            tau: None,
            renormalize: false,
            tol: 1e-6,
        }
    }
}

/// Plan of `n` embedded rows onto `m` references and its weighted form
/// `T̃ = M ⊙ T`.
#[derive(Debug, Clone)]
pub struct Alignment {
    pub plan: TransportPlan,
    pub weighted: Matrix,
}

/// Cost on unit-normalized rows with the unit-bandwidth Gaussian kernel.
fn unit_cost(v_normalized: &Matrix, y_normalized: &Matrix, mode: CostMode) -> Result<Matrix> {
    cost_matrix(v_normalized, y_normalized, &KernelSpec::Gaussian { sigma: 1.0 }, mode)
}

/// Aligns already row-normalized embedded tokens with row-normalized
/// references.
pub fn align(v_normalized: &Matrix, y_normalized: &Matrix, settings: &TransportSettings) -> Result<Alignment> {
    let (n, m) = (v_normalized.rows(), y_normalized.rows());
    let cost = unit_cost(v_normalized, y_normalized, settings.cost_mode)?;
    let g = Measure::uniform(n)?;
    let h = Measure::uniform(m)?;
    let plan = match settings.iterations {
        Iterations::Fixed(it) => sinkhorn_fixed(&cost, &g, &h, settings.epsilon, it, settings.tol)?,
        Iterations::Converge { tol, max_iter } => {
            sinkhorn(&cost, &g, &h, &SinkhornSettings { epsilon: settings.epsilon, tol, max_iter })?
        }
    };
    let weighted = match settings.tau {
        None => plan.plan.clone(),
        Some(tau) => {
            let pen = positional_matrix(n, m, tau)?;
            let mut w = plan.plan.hadamard(&pen.matrix)?;
            if settings.renormalize {
                let target = 1.0 / n as f64;
                for i in 0..n {
                    let s: f64 = w.row(i).iter().sum();
                    if s > 0.0 {
                        for v in w.row_mut(i) {
                            *v *= target / s;
                        }
                    }
                }
                count_madds(w.len() as u64);
            }
            w
        }
    };
    Ok(Alignment { plan, weighted })
}

#[derive(Debug, Clone)]
pub enum AttentionValue {
    /// `A_y(x)`, one row per reference.
    Pooled(Matrix),
    /// One row per input token.
    Tokenwise(Matrix),
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub value: AttentionValue,
    /// One alignment per head.
    pub alignments: Vec<Alignment>,
}

impl AttentionOutput {
    pub fn matrix(&self) -> &Matrix {
        match &self.value {
            AttentionValue::Pooled(m) | AttentionValue::Tokenwise(m) => m,
        }
    }
}

/// `A_y(x) = m^{1/2} T̃ᵀ V` for embedded tokens `V` (n×k).
pub fn set_pool(v: &Matrix, refs: &ReferenceSet, settings: &TransportSettings) -> Result<AttentionOutput> {
    if v.cols() != refs.y.cols() {
        return Err(shape_err(format!("set_pool: tokens have {} columns, references {}", v.cols(), refs.y.cols())));
    }
    let al = align(&v.normalize_rows(NORM_EPS), &refs.y.normalize_rows(NORM_EPS), settings)?;
    let m = refs.m() as f64;
    let pooled = al.weighted.matmul_tn(v)?.scale(m.sqrt());
    pooled.ensure_finite("pooled attention output")?;
    Ok(AttentionOutput { value: AttentionValue::Pooled(pooled), alignments: vec![al] })
}

/// Parameters of one SeT attention layer with `heads` reference sets.
#[derive(Debug, Clone)]
pub struct SeTLayerParams {
    /// d × d_v
    pub value_proj: Matrix,
    pub value_bias: Vec<f64>,
    /// d_v × d
    pub out_proj: Matrix,
    pub out_bias: Vec<f64>,
    pub references: Vec<ReferenceSet>,
    pub transport: TransportSettings,
    /// L2-normalize token rows before the kernel embedding.
    pub normalize_inputs: bool,
}

impl SeTLayerParams {
    pub fn heads(&self) -> usize {
        self.references.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, dv) = self.value_proj.shape();
        if self.out_proj.shape() != (dv, d) {
            return Err(shape_err("output projection must be d_v x d"));
        }
        if self.value_bias.len() != dv || self.out_bias.len() != d {
            return Err(shape_err("bias length mismatch"));
        }
        if self.references.is_empty() || dv % self.references.len() != 0 {
            return Err(shape_err("value width must split evenly across heads"));
        }
        if !(self.transport.epsilon > 0.0) || self.transport.tau.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::InvalidArgument("epsilon and tau must be > 0".into()));
        }
        if !self.value_proj.is_finite() || !self.out_proj.is_finite() {
            return Err(Error::Numerical("non-finite projection".into()));
        }
        Ok(())
    }
}

/// A layer with its references normalized once, so per-call work is
/// proportional to the number of tokens.
#[derive(Debug, Clone)]
pub struct SeTLayer {
    pub params: SeTLayerParams,
    pub map: NystromMap,
    refs_normalized: Vec<Matrix>,
}

impl SeTLayer {
    pub fn new(params: SeTLayerParams, map: NystromMap) -> Result<Self> {
        params.validate()?;
        for r in &params.references {
            if r.y.cols() != map.dim() {
                return Err(shape_err("references must live in the embedding space"));
            }
        }
        let refs_normalized = params.references.iter().map(|r| r.y.normalize_rows(NORM_EPS)).collect();
        Ok(Self { params, map, refs_normalized })
    }
}

pub(crate) fn add_bias(m: &mut Matrix, bias: &[f64]) {
    for i in 0..m.rows() {
        for (v, b) in m.row_mut(i).iter_mut().zip(bias) {
            *v += b;
        }
    }
    count_madds(m.len() as u64);
}

/// Token-level SeT attention:
/// `out = P_o( concat_h  n m T̃_h (T̃_hᵀ (X P_v)_h) )`, cost `O(n (m + k) d)`.
pub fn set_attention_tokenwise(x: &Matrix, layer: &SeTLayer) -> Result<AttentionOutput> {
    let p = &layer.params;
    if x.cols() != p.value_proj.rows() {
        return Err(shape_err(format!("tokens have {} channels, layer expects {}", x.cols(), p.value_proj.rows())));
    }
    let xin = if p.normalize_inputs { x.normalize_rows(NORM_EPS) } else { x.clone() };
    let v = embed(&layer.map, &xin)?;
    let vn = v.normalize_rows(NORM_EPS);

    let mut values = x.matmul(&p.value_proj)?;
    add_bias(&mut values, &p.value_bias);
    let dv = values.cols();
    let dh = dv / p.heads();

    let mut mixed = Matrix::zeros(x.rows(), dv);
    let mut alignments = Vec::with_capacity(p.heads());
    for (h, yn) in layer.refs_normalized.iter().enumerate() {
        let al = align(&vn, yn, &p.transport)?;
        let nm = (x.rows() * yn.rows()) as f64;
        let vh = values.slice_cols(h * dh, dh);
        let pooled = al.weighted.matmul_tn(&vh)?;
        let back = al.weighted.matmul(&pooled)?.scale(nm);
        for i in 0..x.rows() {
            mixed.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(back.row(i));
        }
        alignments.push(al);
    }
    let mut out = mixed.matmul(&p.out_proj)?;
    add_bias(&mut out, &p.out_bias);
    out.ensure_finite("attention output")?;
    Ok(AttentionOutput { value: AttentionValue::Tokenwise(out), alignments })
}

/// Materialized `n m T̃ T̃ᵀ`; for inspection and tests only.
pub fn implicit_attention(weighted: &Matrix) -> Result<Matrix> {
    Ok(weighted.matmul_nt(weighted)?.scale(weighted.len() as f64))
}

/// Row sums of `n m T̃ T̃ᵀ` in `O(nm)`.
pub fn implicit_row_sums(weighted: &Matrix) -> Vec<f64> {
    let m = weighted.len() as f64;
    let cols = weighted.col_sums();
    (0..weighted.rows()).map(|i| m * weighted.row(i).iter().zip(&cols).map(|(a, b)| a * b).sum::<f64>()).collect()
}

/// `K_y(x, x′)` for every pair of embedded sets, computed as the Frobenius
/// inner product of pooled representations.
pub fn ky_gram(sets: &[Matrix], refs: &ReferenceSet, settings: &TransportSettings) -> Result<Matrix> {
    let pooled: Vec<Matrix> =
        sets.iter().map(|v| set_pool(v, refs, settings).map(|o| o.matrix().clone())).collect::<Result<_>>()?;
    let n = sets.len();
    let mut gram = Matrix::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            let v = pooled[a].frobenius_dot(&pooled[b])?;
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
    }
    Ok(gram)
}

/// `K_y(x, x′) = Σ_{ii′} T_y(x, x′)_{ii′} ⟨v_i, v′_{i′}⟩` evaluated literally,
/// with `T_y = m T̃ T̃′ᵀ`.
pub fn ky_direct(v: &Matrix, v2: &Matrix, refs: &ReferenceSet, settings: &TransportSettings) -> Result<f64> {
    let yn = refs.y.normalize_rows(NORM_EPS);
    let a = align(&v.normalize_rows(NORM_EPS), &yn, settings)?;
    let b = align(&v2.normalize_rows(NORM_EPS), &yn, settings)?;
    let m = refs.m() as f64;
    let (n, n2) = (v.rows(), v2.rows());
    let mut total = 0.0;
    for i in 0..n {
        for i2 in 0..n2 {
            let ty: f64 = m * a.weighted.row(i).iter().zip(b.weighted.row(i2)).map(|(p, q)| p * q).sum::<f64>();
            let k: f64 = v.row(i).iter().zip(v2.row(i2)).map(|(p, q)| p * q).sum();
            total += ty * k;
        }
    }
    Ok(total)
}

/// Softmax dot-product attention `D^{-1} exp(QKᵀ/√d) V`.
pub fn dpsa_baseline(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(shape_err(format!("dpsa: q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape())));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut s = q.matmul_nt(k)?;
    for i in 0..s.rows() {
        let row = s.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = ((*x - max) * scale).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    count_madds(s.len() as u64);
    s.matmul(v)
}

/// Shape of one tokenwise SeT call, for analytic multiply-add counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SetShape {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub m: usize,
    pub d_v: usize,
    pub heads: usize,
    pub iterations: usize,
    pub normalize_inputs: bool,
    pub positional: bool,
}

/// Multiply-adds of [`set_attention_tokenwise`] with fixed iterations and no
/// renormalization. Every term is proportional to `n`.
pub fn set_attention_madds(s: &SetShape) -> u64 {
    let (n, d, k, m, dv) = (s.n as u64, s.d as u64, s.k as u64, s.m as u64, s.d_v as u64);
    let h = s.heads as u64;
    let dh = dv / h;
    let mut total = 0;
    if s.normalize_inputs {
        total += n * d;
    }
    // embedding: distances, kernel, whitening, row normalization
    total += n * k * d + n * k + n * k * k + n * k;
    // value projection and bias
    total += n * d * dv + n * dv;
    let per_head = {
        // cost: distances, kernel, 2 - 2k
        let mut c = n * m * k + 2 * n * m;
        c += s.iterations as u64 * 2 * n * m + n * m;
        if s.positional {
            c += n * m;
        }
        // T̃ᵀV, T̃(·), scale by nm
        c += 2 * n * m * dh + n * dh;
        c
    };
    total += h * per_head;
    total += n * dv * d + n * d;
    total
}

/// Multiply-adds of [`dpsa_baseline`] for `n` tokens of width `d`.
pub fn dpsa_madds(n: usize, d: usize) -> u64 {
    let (n, d) = (n as u64, d as u64);
    2 * n * n * d + n * n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{count_multiply_adds, Rng};

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    #[test]
    fn positional_closed_forms() {
        let p = positional_matrix(4, 4, 0.3).unwrap();
        for i in 0..4 {
            assert_eq!(p.matrix[(i, i)], 1.0);
        }
        let p = positional_matrix(2, 2, 0.5).unwrap();
        assert!((p.matrix[(0, 1)] - (-1.0f64).exp()).abs() < 1e-15);
        assert!((p.matrix[(0, 1)] - 0.3678794).abs() < 1e-7);
        let p = positional_matrix(5, 3, 1e6).unwrap();
        assert!(p.matrix.data().iter().all(|&v| (v - 1.0).abs() < 1e-11));
        assert!(positional_matrix(2, 2, 0.0).is_err());
    }

    #[test]
    fn positional_entries_in_unit_interval_and_monotone() {
        let p = positional_matrix(7, 5, 0.4).unwrap();
        for i in 0..7 {
            for j in 0..5 {
                let v = p.matrix[(i, j)];
                assert!(v > 0.0 && v <= 1.0);
                let a = (i + 1) as f64 / 7.0;
                let b = (j + 1) as f64 / 5.0;
                assert_eq!(v == 1.0, a == b);
                // moving j away from a never increases M
                if j + 1 < 5 && b >= a {
                    assert!(p.matrix[(i, j + 1)] <= v);
                }
            }
        }
    }

    #[test]
    fn dpsa_trivial_cases() {
        let mut rng = Rng::new(1);
        let v = random(1, 3, &mut rng);
        let q = random(1, 4, &mut rng);
        let k = random(1, 4, &mut rng);
        assert!(dpsa_baseline(&q, &k, &v).unwrap().sub(&v).unwrap().max_abs() < 1e-15);

        let q = Matrix::from_rows(&[[1.0, 0.0], [2.0, 0.0]]);
        let k = Matrix::from_rows(&[[0.0, 1.0], [0.0, -3.0], [0.0, 2.0]]);
        let v = random(3, 2, &mut rng);
        let out = dpsa_baseline(&q, &k, &v).unwrap();
        let mean: Vec<f64> = v.col_sums().iter().map(|s| s / 3.0).collect();
        for i in 0..2 {
            for j in 0..2 {
                assert!((out[(i, j)] - mean[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dpsa_matches_naive_softmax() {
        let mut rng = Rng::new(2);
        let (q, k, v) = (random(3, 4, &mut rng), random(3, 4, &mut rng), random(3, 4, &mut rng));
        let out = dpsa_baseline(&q, &k, &v).unwrap();
        for i in 0..3 {
            let logits: Vec<f64> = (0..3).map(|j| (0..4).map(|c| q[(i, c)] * k[(j, c)]).sum::<f64>() / 2.0).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for c in 0..4 {
                let want: f64 = (0..3).map(|j| logits[j].exp() / z * v[(j, c)]).sum();
                assert!((out[(i, c)] - want).abs() < 1e-12);
            }
        }
        assert_eq!(dpsa_baseline(&q, &random(3, 2, &mut rng), &v).unwrap_err().code(), "shape");
    }

    #[test]
    fn pool_single_token_single_reference() {
        let v = Matrix::from_rows(&[[0.3, -0.2]]);
        let refs = ReferenceSet::new(Matrix::from_rows(&[[1.0, 1.0]]), false).unwrap();
        let s = TransportSettings { tau: Some(0.5), ..Default::default() };
        let out = set_pool(&v, &refs, &s).unwrap();
        assert!(out.matrix().sub(&v).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn pool_uniform_plan_gives_scaled_mean() {
        // identical references make the cost constant, so the plan is 1/(nm)
        let mut rng = Rng::new(3);
        let v = random(6, 3, &mut rng);
        let refs = ReferenceSet::new(Matrix::filled(4, 3, 0.5), false).unwrap();
        let s = TransportSettings { tau: Some(1e8), ..Default::default() };
        let out = set_pool(&v, &refs, &s).unwrap();
        let mean: Vec<f64> = v.col_sums().iter().map(|x| x / 6.0).collect();
        for j in 0..4 {
            for c in 0..3 {
                assert!((out.matrix()[(j, c)] - mean[c] / 2.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pool_self_matching_limit() {
        let mut rng = Rng::new(4);
        let v = random(5, 3, &mut rng);
        let refs = ReferenceSet::new(v.clone(), false).unwrap();
        let s = TransportSettings {
            epsilon: 1e-3,
            iterations: Iterations::Converge { tol: 1e-9, max_iter: 20_000 },
            ..Default::default()
        };
        let out = set_pool(&v, &refs, &s).unwrap();
        let want = v.scale(1.0 / 5f64.sqrt());
        assert!(out.matrix().sub(&want).unwrap().max_abs() < 1e-4);
    }

    fn toy_layer(d: usize, k: usize, m: usize, heads: usize, tau: Option<f64>, rng: &mut Rng) -> SeTLayer {
        let anchors = random(k, d, rng).normalize_rows(0.0);
        let map = NystromMap::from_anchors(anchors, KernelSpec::gaussian(0.8).unwrap(), 1e-6).unwrap();
        let references = (0..heads).map(|_| ReferenceSet::new(random(m, k, rng), true).unwrap()).collect();
        let params = SeTLayerParams {
            value_proj: random(d, d, rng).scale(0.3),
            value_bias: vec![0.1; d],
            out_proj: random(d, d, rng).scale(0.3),
            out_bias: vec![-0.05; d],
            references,
            transport: TransportSettings { epsilon: 0.2, iterations: Iterations::Fixed(50), tau, ..Default::default() },
            normalize_inputs: true,
        };
        SeTLayer::new(params, map).unwrap()
    }

    #[test]
    fn implicit_attention_rows_sum_to_one_and_are_nonnegative() {
        let mut rng = Rng::new(5);
        let layer = toy_layer(6, 5, 4, 2, None, &mut rng);
        let x = random(9, 6, &mut rng);
        let out = set_attention_tokenwise(&x, &layer).unwrap();
        for al in &out.alignments {
            assert!(al.weighted.min_value() >= 0.0);
            let w = implicit_attention(&al.weighted).unwrap();
            assert!(w.min_value() >= 0.0);
            let fast = implicit_row_sums(&al.weighted);
            for (i, s) in w.row_sums().iter().enumerate() {
                assert!((s - 1.0).abs() < 1e-6, "row {i}: {s}");
                assert!((fast[i] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tokenwise_single_token_single_reference() {
        let mut rng = Rng::new(6);
        let layer = toy_layer(4, 3, 1, 1, Some(0.5), &mut rng);
        let x = random(1, 4, &mut rng);
        let out = set_attention_tokenwise(&x, &layer).unwrap();
        let p = &layer.params;
        let mut want = x.matmul(&p.value_proj).unwrap();
        add_bias(&mut want, &p.value_bias);
        let mut want = want.matmul(&p.out_proj).unwrap();
        add_bias(&mut want, &p.out_bias);
        assert!(out.matrix().sub(&want).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn tokenwise_equivariant_without_positional() {
        let mut rng = Rng::new(7);
        let layer = toy_layer(5, 4, 3, 1, None, &mut rng);
        let x = random(7, 5, &mut rng);
        let perm = [6, 2, 0, 4, 1, 5, 3];
        let a = set_attention_tokenwise(&x.select_rows(&perm), &layer).unwrap();
        let b = set_attention_tokenwise(&x, &layer).unwrap();
        let b = b.matrix().select_rows(&perm);
        assert!(a.matrix().sub(&b).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn tokenwise_matches_materialized_attention() {
        let mut rng = Rng::new(8);
        let layer = toy_layer(5, 4, 3, 1, Some(0.6), &mut rng);
        let x = random(6, 5, &mut rng);
        let out = set_attention_tokenwise(&x, &layer).unwrap();
        let p = &layer.params;
        let w = implicit_attention(&out.alignments[0].weighted).unwrap();
        let mut vals = x.matmul(&p.value_proj).unwrap();
        add_bias(&mut vals, &p.value_bias);
        let mut want = w.matmul(&vals).unwrap().matmul(&p.out_proj).unwrap();
        add_bias(&mut want, &p.out_bias);
        assert!(out.matrix().sub(&want).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn analytic_counts_match_instrumentation() {
        let mut rng = Rng::new(9);
        for (heads, tau) in [(1, None), (2, Some(0.5))] {
            let layer = toy_layer(8, 6, 5, heads, tau, &mut rng);
            for n in [5, 10, 20] {
                let x = random(n, 8, &mut rng);
                let (_, counted) = count_multiply_adds(|| set_attention_tokenwise(&x, &layer).unwrap());
                let shape = SetShape {
                    n,
                    d: 8,
                    k: 6,
                    m: 5,
                    d_v: 8,
                    heads,
                    iterations: 50,
                    normalize_inputs: true,
                    positional: tau.is_some(),
                };
                assert_eq!(counted, set_attention_madds(&shape));
            }
        }
        let q = random(12, 4, &mut rng);
        let (_, counted) = count_multiply_adds(|| dpsa_baseline(&q, &q, &q).unwrap());
        assert_eq!(counted, dpsa_madds(12, 4));
    }

    #[test]
    fn ky_factorization_and_psd() {
        let mut rng = Rng::new(10);
        let refs = ReferenceSet::new(random(4, 5, &mut rng), false).unwrap();
        let s = TransportSettings { epsilon: 0.3, tau: Some(0.7), ..Default::default() };
        let sets: Vec<Matrix> = (0..4).map(|i| random(3 + i, 5, &mut rng)).collect();
        let gram = ky_gram(&sets, &refs, &s).unwrap();
        for a in 0..4 {
            assert!(gram[(a, a)] >= 0.0);
            for b in 0..4 {
                let direct = ky_direct(&sets[a], &sets[b], &refs, &s).unwrap();
                assert!((direct - gram[(a, b)]).abs() <= 1e-10 * direct.abs().max(1e-300));
            }
        }
    }
}
