//! Entropic optimal transport.
//!
//! Solves `min_{T ∈ U(g,h)} ⟨C, T⟩ + ε Σ_ij T_ij (log T_ij − 1)` by Sinkhorn
//! scaling carried out on the dual potentials in the log domain:
//!
//! ```text
//! f_i ← ε log g_i − ε logΣ_j exp((φ_j − C_ij) / ε)
//! φ_j ← ε log h_j − ε logΣ_i exp((f_i − C_ij) / ε)
//! T_ij = exp((f_i + φ_j − C_ij) / ε)
//! ```
//!
//! The module also carries the Wasserstein quantities built on the plans
//! (direct and reference-factored) and a brute-force permutation oracle for
//! small uniform problems.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kernels::{induced_sq_distance, KernelSpec};
use crate::numerics::{count_madds, logsumexp, Matrix};

/// Discrete probability weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Measure {
    weights: Vec<f64>,
}

impl Measure {
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("zero-mass measure: empty support".into()));
        }
        Ok(Self { weights: vec![1.0 / n as f64; n] })
    }

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("zero-mass measure: empty support".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument("measure weights must be positive and finite".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("measure mass {total} is not 1")));
        }
        Ok(Self { weights })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_uniform(&self) -> bool {
        let u = 1.0 / self.weights.len() as f64;
        self.weights.iter().all(|&w| w == u)
    }
}

/// A point cloud with weights, i.e. a discrete measure on `R^d`.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub points: Matrix,
    pub weights: Measure,
}

impl FeatureSet {
    pub fn uniform(points: Matrix) -> Result<Self> {
        let weights = Measure::uniform(points.rows())?;
        Ok(Self { points, weights })
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkhornSettings {
    pub epsilon: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SinkhornSettings {
    fn default() -> Self {
        Self { epsilon: 0.1, tol: 1e-6, max_iter: 1000 }
    }
}

impl SinkhornSettings {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self { epsilon, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be > 0 (use exact_ot_uniform for the unregularized problem), got {}",
                self.epsilon
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tol must be > 0, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Dual potentials `(f, φ)`; reusable as a warm start.
#[derive(Debug, Clone, PartialEq)]
pub struct Potentials {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub plan: Matrix,
    pub source: Measure,
    pub target: Measure,
    pub epsilon: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_marginal_violation: f64,
    pub potentials: Potentials,
}

impl TransportPlan {
    pub fn shape(&self) -> (usize, usize) {
        self.plan.shape()
    }
}

/// `max(‖T1 − g‖∞, ‖Tᵀ1 − h‖∞)`.
pub fn marginal_violation(plan: &Matrix, g: &[f64], h: &[f64]) -> f64 {
    let rows = plan.row_sums();
    let cols = plan.col_sums();
    let r = rows.iter().zip(g).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let c = cols.iter().zip(h).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    r.max(c)
}

/// Anything that produces an entropic transport plan. The verification
/// suites are generic over this so they can be pointed at a deliberately
/// broken solver.
pub trait OtSolver {
    fn solve(&self, cost: &Matrix, g: &Measure, h: &Measure, settings: &SinkhornSettings) -> Result<TransportPlan>;
}

/// The log-domain Sinkhorn solver.
#[derive(Debug, Clone, Copy, Default)]
pub struct LogSinkhorn;

impl OtSolver for LogSinkhorn {
    fn solve(&self, cost: &Matrix, g: &Measure, h: &Measure, settings: &SinkhornSettings) -> Result<TransportPlan> {
        sinkhorn(cost, g, h, settings)
    }
}

pub fn sinkhorn(cost: &Matrix, g: &Measure, h: &Measure, settings: &SinkhornSettings) -> Result<TransportPlan> {
    sinkhorn_warm(cost, g, h, settings, None)
}

/// Row update `f_i = ε log a_i − ε logΣ_j exp((φ_j − C_ij)/ε)`.
pub(crate) fn update_rows(cost: &Matrix, phi: &[f64], log_a: &[f64], eps: f64, f: &mut [f64]) {
    let m = cost.cols();
    let mut buf = vec![0.0; m];
    for (i, fi) in f.iter_mut().enumerate() {
        let row = cost.row(i);
        for j in 0..m {
            buf[j] = (phi[j] - row[j]) / eps;
        }
        *fi = eps * log_a[i] - eps * logsumexp(&buf);
    }
    count_madds((cost.rows() * m) as u64);
}

/// Column update `φ_j = ε log b_j − ε logΣ_i exp((f_i − C_ij)/ε)`.
pub(crate) fn update_cols(cost: &Matrix, f: &[f64], log_b: &[f64], eps: f64, phi: &mut [f64]) {
    let (n, m) = cost.shape();
    // stream rows once: running max and rescaled sums per column
    let mut maxes = vec![f64::NEG_INFINITY; m];
    for i in 0..n {
        let row = cost.row(i);
        for j in 0..m {
            let v = (f[i] - row[j]) / eps;
            if v > maxes[j] {
                maxes[j] = v;
            }
        }
    }
    let mut sums = vec![0.0; m];
    for i in 0..n {
        let row = cost.row(i);
        for j in 0..m {
            sums[j] += ((f[i] - row[j]) / eps - maxes[j]).exp();
        }
    }
    for j in 0..m {
        phi[j] = eps * log_b[j] - eps * (maxes[j] + sums[j].ln());
    }
    count_madds((n * m) as u64);
}

pub(crate) fn plan_from_potentials(cost: &Matrix, f: &[f64], phi: &[f64], eps: f64) -> Matrix {
    let (n, m) = cost.shape();
    let mut t = Matrix::zeros(n, m);
    for i in 0..n {
        let row = cost.row(i);
        let out = t.row_mut(i);
        for j in 0..m {
            out[j] = ((f[i] + phi[j] - row[j]) / eps).exp();
        }
    }
    count_madds((n * m) as u64);
    t
}

fn row_violation(cost: &Matrix, f: &[f64], phi: &[f64], a: &[f64], eps: f64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..cost.rows() {
        let row = cost.row(i);
        let s: f64 = row.iter().zip(phi).map(|(c, p)| ((f[i] + p - c) / eps).exp()).sum();
        worst = worst.max((s - a[i]).abs());
    }
    count_madds(cost.len() as u64);
    worst
}

fn check_problem(cost: &Matrix, g: &Measure, h: &Measure, settings: &SinkhornSettings) -> Result<()> {
    settings.validate()?;
    if cost.rows() != g.len() || cost.cols() != h.len() {
        return Err(shape_err(format!(
            "cost is {}x{} but measures have {} and {} atoms",
            cost.rows(),
            cost.cols(),
            g.len(),
            h.len()
        )));
    }
    if !cost.is_finite() {
        return Err(Error::Numerical("non-finite cost matrix".into()));
    }
    Ok(())
}

/// Sinkhorn with optional initial potentials. Starting potentials only
/// change the path, not the fixed point.
pub fn sinkhorn_warm(
    cost: &Matrix,
    g: &Measure,
    h: &Measure,
    settings: &SinkhornSettings,
    init: Option<&Potentials>,
) -> Result<TransportPlan> {
    check_problem(cost, g, h, settings)?;
    let (n, m) = cost.shape();
    let eps = settings.epsilon;
    let log_a: Vec<f64> = g.weights().iter().map(|w| w.ln()).collect();
    let log_b: Vec<f64> = h.weights().iter().map(|w| w.ln()).collect();

    let (mut f, mut phi) = match init {
        Some(p) if p.f.len() == n && p.g.len() == m => (p.f.clone(), p.g.clone()),
        _ => (vec![0.0; n], vec![0.0; m]),
    };

    let mut iterations = 0;
    while iterations < settings.max_iter {
        update_rows(cost, &phi, &log_a, eps, &mut f);
        update_cols(cost, &f, &log_b, eps, &mut phi);
        iterations += 1;
        // columns are exact after the φ update; only rows can be off
        if row_violation(cost, &f, &phi, g.weights(), eps) <= settings.tol {
            break;
        }
    }

    let plan = plan_from_potentials(cost, &f, &phi, eps);
    if !plan.is_finite() {
        return Err(Error::Numerical("sinkhorn produced a non-finite plan".into()));
    }
    let final_violation = marginal_violation(&plan, g.weights(), h.weights());
    let converged = final_violation <= settings.tol;
    Ok(TransportPlan {
        plan,
        source: g.clone(),
        target: h.clone(),
        epsilon: eps,
        iterations,
        converged,
        final_marginal_violation: final_violation,
        potentials: Potentials { f, g: phi },
    })
}

/// Runs exactly `iterations` Sinkhorn sweeps from zero potentials with no
/// early exit, so the result is a fixed function of the cost. `converged`
/// reports whether the final plan meets `tol`; a miss is not an error here.
pub fn sinkhorn_fixed(
    cost: &Matrix,
    g: &Measure,
    h: &Measure,
    epsilon: f64,
    iterations: usize,
    tol: f64,
) -> Result<TransportPlan> {
    let settings = SinkhornSettings { epsilon, tol, max_iter: iterations };
    check_problem(cost, g, h, &settings)?;
    if iterations == 0 {
        return Err(Error::InvalidArgument("sinkhorn_fixed needs at least one iteration".into()));
    }
    let (n, m) = cost.shape();
    let log_a: Vec<f64> = g.weights().iter().map(|w| w.ln()).collect();
    let log_b: Vec<f64> = h.weights().iter().map(|w| w.ln()).collect();
    let mut f = vec![0.0; n];
    let mut phi = vec![0.0; m];
    for _ in 0..iterations {
        update_rows(cost, &phi, &log_a, epsilon, &mut f);
        update_cols(cost, &f, &log_b, epsilon, &mut phi);
    }
    let plan = plan_from_potentials(cost, &f, &phi, epsilon);
    if !plan.is_finite() {
        return Err(Error::Numerical("sinkhorn produced a non-finite plan".into()));
    }
    let violation = marginal_violation(&plan, g.weights(), h.weights());
    Ok(TransportPlan {
        plan,
        source: g.clone(),
        target: h.clone(),
        epsilon,
        iterations,
        converged: violation <= tol,
        final_marginal_violation: violation,
        potentials: Potentials { f, g: phi },
    })
}

/// Last potentials of one layer, reused while the problem shape is unchanged.
#[derive(Debug, Default, Clone)]
pub struct WarmStartCache {
    last: Option<Potentials>,
}

impl WarmStartCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn solve(
        &mut self,
        cost: &Matrix,
        g: &Measure,
        h: &Measure,
        settings: &SinkhornSettings,
    ) -> Result<TransportPlan> {
        let init = self.last.as_ref().filter(|p| p.f.len() == cost.rows() && p.g.len() == cost.cols());
        let plan = sinkhorn_warm(cost, g, h, settings, init)?;
        self.last = Some(plan.potentials.clone());
        Ok(plan)
    }

    pub fn clear(&mut self) {
        self.last = None;
    }
}

/// Transport cost `⟨T, C⟩` and the entropic objective `⟨T, C⟩ + εH(T)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtCost {
    pub transport: f64,
    pub entropic: f64,
}

pub fn ot_cost(plan: &TransportPlan, cost: &Matrix) -> Result<OtCost> {
    let transport = plan.plan.frobenius_dot(cost)?;
    let entropy: f64 = plan.plan.data().iter().map(|&t| if t > 0.0 { t * (t.ln() - 1.0) } else { 0.0 }).sum();
    Ok(OtCost { transport, entropic: transport + plan.epsilon * entropy })
}

/// Unregularized optimum for uniform marginals on a square cost matrix by
/// enumerating all permutations (Heap's algorithm). Returns the cost
/// `(1/n) Σ_i C_{i,π(i)}` and the minimizing `π`.
pub fn exact_ot_uniform(cost: &Matrix) -> Result<(f64, Vec<usize>)> {
    let n = cost.rows();
    if cost.cols() != n {
        return Err(shape_err(format!("exact_ot_uniform needs a square cost, got {:?}", cost.shape())));
    }
    if n > 7 {
        return Err(Error::TooLargeForOracle(n));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty cost matrix".into()));
    }
    let eval = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum::<f64>();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = eval(&perm);
    let mut best_perm = perm.clone();
    let mut c = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let v = eval(&perm);
            if v < best {
                best = v;
                best_perm = perm.clone();
            }
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok((best / n as f64, best_perm))
}

/// `W(x, x′) = ⟨T, d_k²⟩^{1/2}` with `T` the entropic plan for cost `d_k²`.
pub fn wasserstein(x: &FeatureSet, x2: &FeatureSet, spec: &KernelSpec, settings: &SinkhornSettings) -> Result<f64> {
    wasserstein_with(&LogSinkhorn, x, x2, spec, settings)
}

pub fn wasserstein_with(
    solver: &dyn OtSolver,
    x: &FeatureSet,
    x2: &FeatureSet,
    spec: &KernelSpec,
    settings: &SinkhornSettings,
) -> Result<f64> {
    let cost = induced_sq_distance(&x.points, &x2.points, spec)?;
    let plan = solver.solve(&cost, &x.weights, &x2.weights, settings)?;
    Ok(ot_cost(&plan, &cost)?.transport.max(0.0).sqrt())
}

/// Glues two plans onto a shared reference: `T_y = T_x diag(1/h) T_x′ᵀ`,
/// which is `m · T_x T_x′ᵀ` for uniform reference weights.
///
/// For converged plans the result has row sums `g` and column sums `g′`.
pub fn transport_factored(tx: &TransportPlan, tx2: &TransportPlan) -> Result<Matrix> {
    if tx.plan.cols() != tx2.plan.cols() {
        return Err(shape_err(format!("reference-size mismatch: {} vs {}", tx.plan.cols(), tx2.plan.cols())));
    }
    let h = tx.target.weights();
    if h.iter().zip(tx2.target.weights()).any(|(a, b)| (a - b).abs() > 1e-15) {
        return Err(Error::Inconsistent("plans use different reference weights".into()));
    }
    let scaled = Matrix::from_fn(tx.plan.rows(), h.len(), |i, j| tx.plan[(i, j)] / h[j]);
    scaled.matmul_nt(&tx2.plan)
}

/// `W_y(x, x′) = ⟨T_y(x, x′), d_k²(x, x′)⟩^{1/2}` through the plans of both
/// sets onto the reference points `y` (uniform weights).
pub fn wasserstein_y(
    x: &FeatureSet,
    x2: &FeatureSet,
    y: &Matrix,
    spec: &KernelSpec,
    settings: &SinkhornSettings,
) -> Result<f64> {
    wasserstein_y_with(&LogSinkhorn, x, x2, y, spec, settings)
}

pub fn wasserstein_y_with(
    solver: &dyn OtSolver,
    x: &FeatureSet,
    x2: &FeatureSet,
    y: &Matrix,
    spec: &KernelSpec,
    settings: &SinkhornSettings,
) -> Result<f64> {
    let h = Measure::uniform(y.rows())?;
    let cx = induced_sq_distance(&x.points, y, spec)?;
    let cx2 = induced_sq_distance(&x2.points, y, spec)?;
    let tx = solver.solve(&cx, &x.weights, &h, settings)?;
    let tx2 = solver.solve(&cx2, &x2.weights, &h, settings)?;
    let ty = transport_factored(&tx, &tx2)?;
    let d = induced_sq_distance(&x.points, &x2.points, spec)?;
    Ok(ty.frobenius_dot(&d)?.max(0.0).sqrt())
}
