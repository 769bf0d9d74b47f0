//! Wall-clock and multiply-add comparison of tokenwise SeT attention and
//! dot-product attention as the token count grows.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use set_transport::attention::{
    dpsa_baseline, dpsa_madds, set_attention_madds, set_attention_tokenwise, Iterations, SeTLayer, SeTLayerParams,
    SetShape, TransportSettings,
};
use set_transport::kernels::KernelSpec;
use set_transport::nystrom::{NystromMap, ReferenceSet};
use set_transport::{Matrix, Result, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub n: Vec<usize>,
    pub m: usize,
    pub d: usize,
    /// Nyström anchors of the SeT layer.
    pub k: usize,
    pub iterations: usize,
    pub reps: usize,
    /// Untimed runs before the timed ones.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { n: vec![1024, 2048, 4096], m: 64, d: 64, k: 64, iterations: 50, reps: 20, warmup: 1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub mechanism: &'static str,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub reps: usize,
    pub median_seconds: f64,
    /// Median absolute deviation of the timings.
    pub mads: f64,
    pub multiply_adds: u64,
}

pub const BENCH_HEADER: &str = "mechanism,n,m,d,reps,median_seconds,mads,multiply_adds";

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time(reps: usize, warmup: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64)> {
    for _ in 0..warmup {
        f()?;
    }
    let mut secs = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        secs.push(t.elapsed().as_secs_f64());
    }
    let med = median(&mut secs);
    let mut dev: Vec<f64> = secs.iter().map(|s| (s - med).abs()).collect();
    Ok((med, median(&mut dev)))
}

fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

fn bench_layer(cfg: &BenchConfig, rng: &mut Rng) -> Result<SeTLayer> {
    let (d, k) = (cfg.d, cfg.k);
    let map = NystromMap::from_anchors(gaussian(k, d, rng).normalize_rows(0.0), KernelSpec::gaussian(1.0)?, 1e-6)?;
    let params = SeTLayerParams {
        value_proj: gaussian(d, d, rng).scale((1.0 / d as f64).sqrt()),
        value_bias: vec![0.0; d],
        out_proj: gaussian(d, d, rng).scale((1.0 / d as f64).sqrt()),
        out_bias: vec![0.0; d],
        references: vec![ReferenceSet::new(gaussian(cfg.m, k, rng), false)?],
        transport: TransportSettings {
            epsilon: 0.1,
            iterations: Iterations::Fixed(cfg.iterations),
            tau: Some(0.5),
            ..Default::default()
        },
        normalize_inputs: true,
    };
    SeTLayer::new(params, map)
}

/// One SeT row and one DPSA row per `n`. Multiply-add counts are the
/// analytic formulas, not measurements.
pub fn run(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut rng = Rng::new(cfg.seed);
    let layer = bench_layer(cfg, &mut rng)?;
    let mut rows = Vec::new();
    for &n in &cfg.n {
        let x = gaussian(n, cfg.d, &mut rng);
        let (med, mad) = time(cfg.reps, cfg.warmup, || set_attention_tokenwise(&x, &layer).map(drop))?;
        let shape = SetShape {
            n,
            d: cfg.d,
            k: cfg.k,
            m: cfg.m,
            d_v: cfg.d,
            heads: 1,
            iterations: cfg.iterations,
            normalize_inputs: true,
            positional: true,
        };
        rows.push(BenchRow {
            mechanism: "set",
            n,
            m: cfg.m,
            d: cfg.d,
            reps: cfg.reps,
            median_seconds: med,
            mads: mad,
            multiply_adds: set_attention_madds(&shape),
        });
        let (q, k, v) = (gaussian(n, cfg.d, &mut rng), gaussian(n, cfg.d, &mut rng), gaussian(n, cfg.d, &mut rng));
        let (med, mad) = time(cfg.reps, cfg.warmup, || dpsa_baseline(&q, &k, &v).map(drop))?;
        rows.push(BenchRow {
            mechanism: "dpsa",
            n,
            m: cfg.m,
            d: cfg.d,
            reps: cfg.reps,
            median_seconds: med,
            mads: mad,
            multiply_adds: dpsa_madds(n, cfg.d),
        });
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:?},{:?},{}",
            r.mechanism, r.n, r.m, r.d, r.reps, r.median_seconds, r.mads, r.multiply_adds
        );
    }
    out
}

/// Where the timings were taken.
#[derive(Debug, Clone, Serialize)]
pub struct MachineInfo {
    pub os: &'static str,
    pub arch: &'static str,
    pub logical_cpus: usize,
}

impl MachineInfo {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}
