//! Property suites behind `set-transport verify`.
//!
//! Every suite draws its instances from a seeded generator and reports the
//! number of cases, failures and the worst observed value against its
//! tolerance. Suites that exercise the transport solver take it as a
//! `&dyn OtSolver`, so a deliberately broken solver can be substituted.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use set_transport::attention::{
    implicit_attention, ky_direct, ky_gram, set_attention_tokenwise, Iterations, SeTLayer, SeTLayerParams,
    TransportSettings,
};
use set_transport::kernels::{kernel_matrix, KernelSpec};
use set_transport::model::SeTformer;
use set_transport::model::SeTformerConfig;
use set_transport::numerics::{logsumexp, sym_eig};
use set_transport::nystrom::{embed, fit_nystrom, NystromMap, ReferenceSet};
use set_transport::sinkhorn::{
    exact_ot_uniform, marginal_violation, ot_cost, transport_factored, wasserstein_with, wasserstein_y_with,
    FeatureSet, Measure, OtSolver, Potentials, SinkhornSettings, TransportPlan,
};
use set_transport::train::gradient_check;
use set_transport::{Matrix, Result, Rng};

pub const SUITES: [&str; 8] = ["sinkhorn", "exact", "bound", "factored", "nystrom", "ky", "softmax", "gradient"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyReport {
    pub suite: &'static str,
    pub property: &'static str,
    pub passed: bool,
    pub cases: usize,
    pub failures: usize,
    /// Largest violation (or smallest margin, see `property`) seen.
    pub worst: f64,
    pub tolerance: f64,
    /// First failing case, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_failure: Option<String>,
}

struct Tally {
    suite: &'static str,
    property: &'static str,
    tolerance: f64,
    cases: usize,
    failures: usize,
    worst: f64,
    first_failure: Option<String>,
}

impl Tally {
    fn new(suite: &'static str, property: &'static str, tolerance: f64) -> Self {
        Self { suite, property, tolerance, cases: 0, failures: 0, worst: 0.0, first_failure: None }
    }

    /// Records one case whose violation is `value`; passes when
    /// `value <= tolerance`.
    fn check(&mut self, value: f64, describe: impl FnOnce() -> String) {
        if value > self.worst || value.is_nan() {
            self.worst = value;
        }
        if value <= self.tolerance {
            self.cases += 1;
        } else {
            self.fail(describe);
        }
    }

    fn fail(&mut self, describe: impl FnOnce() -> String) {
        self.cases += 1;
        self.failures += 1;
        if self.first_failure.is_none() {
            self.first_failure = Some(describe());
        }
    }

    fn error(&mut self, e: set_transport::Error) {
        self.worst = f64::INFINITY;
        self.fail(|| format!("error: {e}"));
    }

    fn finish(self) -> PropertyReport {
        PropertyReport {
            suite: self.suite,
            property: self.property,
            passed: self.failures == 0 && self.cases > 0,
            cases: self.cases,
            failures: self.failures,
            worst: self.worst,
            tolerance: self.tolerance,
            first_failure: self.first_failure,
        }
    }
}

/// Instance counts and seed shared by all suites.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSizes {
    pub seed: u64,
    pub sinkhorn_instances: usize,
    pub exact_instances: usize,
    pub bound_triples: usize,
    pub factored_pairs: usize,
    pub nystrom_seeds: usize,
    pub ky_pairs: usize,
    pub softmax_layers: usize,
    pub gradient_coords: usize,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        Self {
            seed: 0,
            sinkhorn_instances: 1000,
            exact_instances: 200,
            bound_triples: 100,
            factored_pairs: 100,
            nystrom_seeds: 20,
            ky_pairs: 50,
            softmax_layers: 20,
            gradient_coords: 50,
        }
    }
}

fn gaussian_points(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

fn random_measure(n: usize, rng: &mut Rng) -> Measure {
    let w: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.2, 1.0)).collect();
    let total: f64 = w.iter().sum();
    let mut w: Vec<f64> = w.iter().map(|x| x / total).collect();
    // absorb rounding so the mass is 1 to the last bit the checker cares about
    let drift: f64 = 1.0 - w.iter().sum::<f64>();
    w[0] += drift;
    Measure::new(w).expect("positive weights")
}

const UNIT: KernelSpec = KernelSpec::Gaussian { sigma: 1.0 };

/// Random problems with `n, m ≤ 64`, non-uniform marginals and
/// `ε ∈ {0.05, 0.1, 0.3, 0.5, 1}` must converge to marginal violation
/// `≤ 1e-6` within 1000 iterations.
pub fn sinkhorn_feasibility(solver: &dyn OtSolver, sizes: &SuiteSizes) -> Vec<PropertyReport> {
    const EPS: [f64; 5] = [0.05, 0.1, 0.3, 0.5, 1.0];
    let mut t = Tally::new("sinkhorn", "marginal violation after at most 1000 iterations", 1e-6);
    let root = Rng::new(sizes.seed);
    for c in 0..sizes.sinkhorn_instances {
        let mut rng = root.split(c as u64);
        let (n, m, d) = (1 + rng.below(64), 1 + rng.below(64), 2 + rng.below(7));
        let eps = EPS[c % EPS.len()];
        let (g, h) = (random_measure(n, &mut rng), random_measure(m, &mut rng));
        let cost = match set_transport::kernels::induced_sq_distance(
            &gaussian_points(n, d, &mut rng),
            &gaussian_points(m, d, &mut rng),
            &UNIT,
        ) {
            Ok(c) => c,
            Err(e) => {
                t.error(e);
                continue;
            }
        };
        let settings = SinkhornSettings { epsilon: eps, tol: 1e-6, max_iter: 1000 };
        match solver.solve(&cost, &g, &h, &settings) {
            Ok(p) => {
                let v = marginal_violation(&p.plan, g.weights(), h.weights());
                let v = if p.plan.min_value() < 0.0 || !v.is_finite() { f64::INFINITY } else { v };
                t.check(v, || {
                    format!("case {c}: n={n} m={m} eps={eps} violation {v:e} after {} iterations", p.iterations)
                });
            }
            Err(e) => t.error(e),
        }
    }
    vec![t.finish()]
}

/// Near-unregularized transport cost against permutation enumeration for
/// uniform square problems with `n ≤ 5`. Reported value is the error over
/// the allowed gap `max(1%·|opt|, 5ε·log n²)`, so the tolerance is 1.
pub fn exact_consistency(solver: &dyn OtSolver, sizes: &SuiteSizes) -> Vec<PropertyReport> {
    let eps = 1e-3;
    let mut t = Tally::new("exact", "|ot_cost - exact| / max(1%, 5 eps log n^2)", 1.0);
    let root = Rng::new(sizes.seed ^ 0x0e0e);
    for c in 0..sizes.exact_instances {
        let mut rng = root.split(c as u64);
        let n = 1 + rng.below(5);
        let cost = Matrix::from_fn(n, n, |_, _| rng.uniform());
        let result = (|| -> Result<(f64, f64)> {
            let (opt, _) = exact_ot_uniform(&cost)?;
            let u = Measure::uniform(n)?;
            let plan = solver.solve(&cost, &u, &u, &SinkhornSettings { epsilon: eps, tol: 1e-9, max_iter: 200_000 })?;
            Ok((ot_cost(&plan, &cost)?.transport, opt))
        })();
        match result {
            Ok((got, opt)) => {
                let allowed = (0.01 * opt.abs()).max(5.0 * eps * ((n * n) as f64).ln());
                let ratio = if allowed > 0.0 { (got - opt).abs() / allowed } else { (got - opt).abs() / 1e-12 };
                t.check(ratio, || format!("case {c}: n={n} sinkhorn {got} exact {opt}"));
            }
            Err(e) => t.error(e),
        }
    }
    vec![t.finish()]
}

fn ot_settings() -> SinkhornSettings {
    SinkhornSettings { epsilon: 0.05, tol: 1e-9, max_iter: 20_000 }
}

/// `|W(x,x′) − W_y(x,x′)| ≤ 2·min(W(x,y), W(x′,y)) + 1e-6`. Reported value
/// is the left side minus the right side, so the tolerance is 0.
pub fn wasserstein_bound(solver: &dyn OtSolver, sizes: &SuiteSizes) -> Vec<PropertyReport> {
    let mut t = Tally::new("bound", "|W - W_y| - 2 min(W(x,y), W(x',y)) - 1e-6", 0.0);
    t.worst = f64::NEG_INFINITY;
    let root = Rng::new(sizes.seed ^ 0xb0b0);
    let settings = ot_settings();
    for c in 0..sizes.bound_triples {
        let mut rng = root.split(c as u64);
        let d = 2 + rng.below(4);
        let (n, n2, m) = (2 + rng.below(9), 2 + rng.below(9), 2 + rng.below(7));
        let x = gaussian_points(n, d, &mut rng);
        let x2 = gaussian_points(n2, d, &mut rng);
        let y = gaussian_points(m, d, &mut rng);
        let result = (|| -> Result<f64> {
            let (fx, fx2, fy) =
                (FeatureSet::uniform(x.clone())?, FeatureSet::uniform(x2.clone())?, FeatureSet::uniform(y.clone())?);
            let w = wasserstein_with(solver, &fx, &fx2, &UNIT, &settings)?;
            let wy = wasserstein_y_with(solver, &fx, &fx2, &y, &UNIT, &settings)?;
            let a = wasserstein_with(solver, &fx, &fy, &UNIT, &settings)?;
            let b = wasserstein_with(solver, &fx2, &fy, &UNIT, &settings)?;
            Ok((w - wy).abs() - 2.0 * a.min(b) - 1e-6)
        })();
        match result {
            Ok(v) if v.is_finite() => t.check(v, || format!("case {c}: n={n} n'={n2} m={m} excess {v:e}")),
            Ok(v) => t.fail(|| format!("case {c}: non-finite excess {v}")),
            Err(e) => t.error(e),
        }
    }
    vec![t.finish()]
}

/// Row and column sums of the reference-factored plan match the two source
/// measures.
pub fn factored_coupling(solver: &dyn OtSolver, sizes: &SuiteSizes) -> Vec<PropertyReport> {
    let mut t = Tally::new("factored", "marginal violation of transport_factored", 1e-6);
    let root = Rng::new(sizes.seed ^ 0xfac7);
    let settings = ot_settings();
    for c in 0..sizes.factored_pairs {
        let mut rng = root.split(c as u64);
        let d = 2 + rng.below(4);
        let (n, n2, m) = (1 + rng.below(16), 1 + rng.below(16), 1 + rng.below(12));
        let (g, g2) = (random_measure(n, &mut rng), random_measure(n2, &mut rng));
        let x = gaussian_points(n, d, &mut rng);
        let x2 = gaussian_points(n2, d, &mut rng);
        let y = gaussian_points(m, d, &mut rng);
        let result = (|| -> Result<f64> {
            let h = Measure::uniform(m)?;
            let c1 = set_transport::kernels::induced_sq_distance(&x, &y, &UNIT)?;
            let c2 = set_transport::kernels::induced_sq_distance(&x2, &y, &UNIT)?;
            let t1 = solver.solve(&c1, &g, &h, &settings)?;
            let t2 = solver.solve(&c2, &g2, &h, &settings)?;
            let ty = transport_factored(&t1, &t2)?;
            Ok(marginal_violation(&ty, g.weights(), g2.weights()))
        })();
        match result {
            Ok(v) => t.check(if v.is_finite() { v } else { f64::INFINITY }, || format!("case {c}: violation {v:e}")),
            Err(e) => t.error(e),
        }
    }
    vec![t.finish()]
}

fn gram_error(map: &NystromMap, x: &Matrix) -> Result<f64> {
    let k = kernel_matrix(x, x, &map.spec)?;
    let v = embed(map, x)?;
    let approx = v.matmul_nt(&v)?;
    Ok(k.sub(&approx)?.frobenius_norm() / k.frobenius_norm())
}

/// Exact reconstruction with all points as anchors, and monotone mean
/// error across `k = 4, 8, 16, 32`.
pub fn nystrom_exactness(sizes: &SuiteSizes) -> Vec<PropertyReport> {
    let mut exact = Tally::new("nystrom", "relative Gram error with anchors = data, delta = 0", 1e-7);
    let mut mono = Tally::new("nystrom", "mean error increase from k to 2k (k = 4..32)", 0.0);
    mono.worst = f64::NEG_INFINITY;
    let spec = KernelSpec::Gaussian { sigma: 1.5 };
    const KS: [usize; 4] = [4, 8, 16, 32];
    let mut means = [0.0; 4];
    let root = Rng::new(sizes.seed ^ 0x4e59);
    for s in 0..sizes.nystrom_seeds {
        let mut rng = root.split(s as u64);
        let x = gaussian_points(12, 6, &mut rng);
        match NystromMap::from_anchors(x.clone(), spec, 0.0).and_then(|map| gram_error(&map, &x)) {
            Ok(e) => exact.check(e, || format!("seed {s}: error {e:e}")),
            Err(e) => exact.error(e),
        }
        // clustered data so that more anchors keep paying off up to k = 32
        let centers = gaussian_points(40, 3, &mut rng).scale(2.0);
        let data = Matrix::from_fn(240, 3, |i, j| centers[(i % 40, j)] + 0.3 * rng.normal());
        for (slot, &k) in KS.iter().enumerate() {
            match fit_nystrom(&data, k, 1e-9, spec, s as u64).and_then(|map| gram_error(&map, &data)) {
                Ok(e) => means[slot] += e / sizes.nystrom_seeds as f64,
                Err(e) => mono.error(e),
            }
        }
    }
    for w in 0..3 {
        let rise = means[w + 1] - means[w];
        // strict decrease: a rise of exactly 0 fails too
        let v = if rise >= 0.0 { rise.max(f64::MIN_POSITIVE) } else { rise };
        mono.check(v, || format!("k={} mean {:e} -> k={} mean {:e}", KS[w], means[w], KS[w + 1], means[w + 1]));
    }
    vec![exact.finish(), mono.finish()]
}

fn ky_settings() -> TransportSettings {
    TransportSettings {
        epsilon: 0.3,
        iterations: Iterations::Converge { tol: 1e-9, max_iter: 5000 },
        tau: Some(0.7),
        ..Default::default()
    }
}

/// The matching kernel evaluated directly agrees with its plan
/// factorization, and its Gram matrix is positive semi-definite.
pub fn ky_identities(sizes: &SuiteSizes) -> Vec<PropertyReport> {
    let mut ident = Tally::new("ky", "relative gap between direct and factored K_y", 1e-10);
    let mut psd = Tally::new("ky", "-min eigenvalue / max eigenvalue of an 8x8 K_y Gram", 1e-8);
    psd.worst = f64::NEG_INFINITY;
    let root = Rng::new(sizes.seed ^ 0x4b79);
    let s = ky_settings();
    for c in 0..sizes.ky_pairs {
        let mut rng = root.split(c as u64);
        let (k, m) = (2 + rng.below(6), 1 + rng.below(6));
        let refs = ReferenceSet::new(gaussian_points(m, k, &mut rng), false).expect("finite references");
        let a = gaussian_points(1 + rng.below(10), k, &mut rng);
        let b = gaussian_points(1 + rng.below(10), k, &mut rng);
        let res = (|| -> Result<f64> {
            let direct = ky_direct(&a, &b, &refs, &s)?;
            let gram = ky_gram(&[a.clone(), b.clone()], &refs, &s)?;
            Ok((direct - gram[(0, 1)]).abs() / direct.abs().max(f64::MIN_POSITIVE))
        })();
        match res {
            Ok(v) => ident.check(v, || format!("pair {c}: relative gap {v:e}")),
            Err(e) => ident.error(e),
        }
        if c % 5 == 0 {
            let sets: Vec<Matrix> = (0..8).map(|_| gaussian_points(1 + rng.below(8), k, &mut rng)).collect();
            let res = ky_gram(&sets, &refs, &s).and_then(|g| sym_eig(&g.add(&g.transpose())?.scale(0.5)));
            match res {
                Ok(e) => {
                    let max = e.values.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
                    let min = e.values.iter().fold(f64::INFINITY, |a, &b| a.min(b));
                    let v = -min / max;
                    psd.check(v, || format!("gram {c}: min {min:e} max {max:e}"));
                }
                Err(e) => psd.error(e),
            }
        }
    }
    vec![ident.finish(), psd.finish()]
}

fn toy_layer(d: usize, k: usize, m: usize, heads: usize, tau: Option<f64>, rng: &mut Rng) -> Result<SeTLayer> {
    let anchors = gaussian_points(k, d, rng).normalize_rows(0.0);
    let map = NystromMap::from_anchors(anchors, KernelSpec::gaussian(0.8)?, 1e-6)?;
    let references =
        (0..heads).map(|_| ReferenceSet::new(gaussian_points(m, k, rng), true)).collect::<Result<Vec<_>>>()?;
    let params = SeTLayerParams {
        value_proj: gaussian_points(d, d, rng).scale(0.3),
        value_bias: vec![0.0; d],
        out_proj: gaussian_points(d, d, rng).scale(0.3),
        out_bias: vec![0.0; d],
        references,
        transport: TransportSettings {
            epsilon: 0.2,
            iterations: Iterations::Converge { tol: 1e-10, max_iter: 5000 },
            tau,
            ..Default::default()
        },
        normalize_inputs: true,
    };
    SeTLayer::new(params, map)
}

/// Implicit attention weights are non-negative, and rows sum to one when
/// the positional penalty is off.
pub fn softmax_parity(sizes: &SuiteSizes) -> Vec<PropertyReport> {
    let mut nonneg = Tally::new("softmax", "-min implicit attention weight", 0.0);
    nonneg.worst = f64::NEG_INFINITY;
    let mut rows = Tally::new("softmax", "|row sum - 1| without positional penalty", 1e-6);
    let root = Rng::new(sizes.seed ^ 0x5f7a);
    for c in 0..sizes.softmax_layers {
        let mut rng = root.split(c as u64);
        let (d, k, m, n) = (2 * (2 + rng.below(3)), 3 + rng.below(6), 1 + rng.below(8), 1 + rng.below(24));
        for tau in [None, Some(0.5)] {
            let res = toy_layer(d, k, m, 2, tau, &mut rng).and_then(|layer| {
                let x = gaussian_points(n, d, &mut rng);
                set_attention_tokenwise(&x, &layer)
            });
            let out = match res {
                Ok(o) => o,
                Err(e) => {
                    nonneg.error(e);
                    continue;
                }
            };
            for al in &out.alignments {
                match implicit_attention(&al.weighted) {
                    Ok(w) => {
                        let v = -w.min_value().min(al.weighted.min_value());
                        nonneg.check(v, || format!("layer {c}: weight {:e}", -v));
                        if tau.is_none() {
                            let worst = w.row_sums().iter().fold(0.0f64, |a, s| a.max((s - 1.0).abs()));
                            rows.check(worst, || format!("layer {c}: row sum off by {worst:e}"));
                        }
                    }
                    Err(e) => nonneg.error(e),
                }
            }
        }
    }
    vec![nonneg.finish(), rows.finish()]
}

/// Finite differences against the tape on a one-block model with 8 tokens,
/// `m = 4` and 10 unrolled Sinkhorn iterations.
pub fn gradient_fidelity(sizes: &SuiteSizes) -> Vec<PropertyReport> {
    let mut t = Tally::new("gradient", "max relative error, central differences h = 1e-5", 1e-4);
    let res = (|| -> Result<f64> {
        let mut cfg = SeTformerConfig::sequence(8, 4, 3);
        cfg.base_channels = 8;
        cfg.m = vec![4];
        cfg.sinkhorn.iterations = 10;
        cfg.nystrom.k = 6;
        let mut model = SeTformer::build(cfg, sizes.seed)?;
        let mut rng = Rng::new(sizes.seed ^ 0x6ad);
        let xs: Vec<Matrix> = (0..3).map(|_| gaussian_points(8, 4, &mut rng)).collect();
        model.fit_features(&xs, sizes.seed)?;
        let inputs: Vec<&Matrix> = xs.iter().collect();
        let report = gradient_check(&model, &inputs, &[0, 1, 2], sizes.gradient_coords, 1e-5, 1e-7, sizes.seed)?;
        Ok(report.max_rel_error)
    })();
    match res {
        Ok(v) => {
            t.check(v, || format!("max relative error {v:e}"));
            t.cases = sizes.gradient_coords;
        }
        Err(e) => t.error(e),
    }
    vec![t.finish()]
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub suites: Vec<String>,
    pub sizes: SuiteSizes,
    pub properties: Vec<PropertyReport>,
}

/// Suites whose name contains `filter` (all when `None`).
pub fn select(filter: Option<&str>) -> Vec<&'static str> {
    SUITES.iter().copied().filter(|s| filter.is_none_or(|f| s.contains(f))).collect()
}

pub fn run_suite(name: &str, solver: &dyn OtSolver, sizes: &SuiteSizes) -> Vec<PropertyReport> {
    match name {
        "sinkhorn" => sinkhorn_feasibility(solver, sizes),
        "exact" => exact_consistency(solver, sizes),
        "bound" => wasserstein_bound(solver, sizes),
        "factored" => factored_coupling(solver, sizes),
        "nystrom" => nystrom_exactness(sizes),
        "ky" => ky_identities(sizes),
        "softmax" => softmax_parity(sizes),
        "gradient" => gradient_fidelity(sizes),
        other => panic!("unknown suite {other}"),
    }
}

/// Runs `suites` in order, printing one line per property.
pub fn run(suites: &[&str], solver: &dyn OtSolver, sizes: &SuiteSizes) -> VerifyReport {
    let mut properties = Vec::new();
    for &s in suites {
        let start = Instant::now();
        let reports = run_suite(s, solver, sizes);
        let secs = start.elapsed().as_secs_f64();
        for r in &reports {
            println!(
                "{} {:<9} {} ({} cases, {} failures, worst {:e}, tolerance {:e}, {secs:.1}s)",
                if r.passed { "PASS" } else { "FAIL" },
                r.suite,
                r.property,
                r.cases,
                r.failures,
                r.worst,
                r.tolerance
            );
        }
        properties.extend(reports);
    }
    VerifyReport {
        passed: properties.iter().all(|p| p.passed),
        suites: suites.iter().map(|s| s.to_string()).collect(),
        sizes: *sizes,
        properties,
    }
}

/// Log-domain Sinkhorn with the sign of the column potential update flipped.
/// Exists only as a mutation fixture: the suites must catch it.
#[derive(Debug, Clone, Copy, Default)]
pub struct SignFlipSinkhorn;

impl OtSolver for SignFlipSinkhorn {
    fn solve(&self, cost: &Matrix, g: &Measure, h: &Measure, settings: &SinkhornSettings) -> Result<TransportPlan> {
        let (n, m) = cost.shape();
        let eps = settings.epsilon;
        let (mut f, mut phi) = (vec![0.0; n], vec![0.0; m]);
        let mut buf = Vec::new();
        for _ in 0..settings.max_iter.min(200) {
            for i in 0..n {
                buf.clear();
                buf.extend((0..m).map(|j| (phi[j] - cost[(i, j)]) / eps));
                f[i] = eps * g.weights()[i].ln() - eps * logsumexp(&buf);
            }
            for j in 0..m {
                buf.clear();
                buf.extend((0..n).map(|i| (f[i] - cost[(i, j)]) / eps));
                // mutation: `+` where the solver has `-`
                phi[j] = eps * h.weights()[j].ln() + eps * logsumexp(&buf);
            }
        }
        let plan = Matrix::from_fn(n, m, |i, j| ((f[i] + phi[j] - cost[(i, j)]) / eps).exp());
        let violation = marginal_violation(&plan, g.weights(), h.weights());
        Ok(TransportPlan {
            plan,
            source: g.clone(),
            target: h.clone(),
            epsilon: eps,
            iterations: settings.max_iter.min(200),
            converged: violation <= settings.tol,
            final_marginal_violation: violation,
            potentials: Potentials { f, g: phi },
        })
    }
}
