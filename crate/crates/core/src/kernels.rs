//! Gaussian kernel evaluation and the kernel-induced squared distance
//! `d_k²(x, y) = k(x,x) + k(y,y) − 2k(x,y)` used as the transport ground cost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{pairwise_sq_dists, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum KernelSpec {
    Gaussian { sigma: f64 },
}

impl KernelSpec {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        let spec = KernelSpec::Gaussian { sigma };
        spec.validate()?;
        Ok(spec)
    }

    pub fn sigma(&self) -> f64 {
        match *self {
            KernelSpec::Gaussian { sigma } => sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.sigma();
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::InvalidArgument(format!("kernel bandwidth must be > 0, got {s}")));
        }
        Ok(())
    }

    /// `k(x, x)`; constant for translation-invariant kernels.
    pub fn self_similarity(&self) -> f64 {
        1.0
    }

    /// Kernel value as a function of squared Euclidean distance.
    #[inline]
    pub fn from_sq_dist(&self, d2: f64) -> f64 {
        let s = self.sigma();
        (-d2 / (2.0 * s * s)).exp()
    }
}

/// Ground cost used by the transport layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// `d_k²(x, y)`
    #[default]
    InducedSqDistance,
    /// `1 − k(x, y)`
    NegativeSimilarity,
}

pub fn kernel_matrix(x: &Matrix, y: &Matrix, spec: &KernelSpec) -> Result<Matrix> {
    spec.validate()?;
    let d2 = pairwise_sq_dists(x, y)?;
    Ok(d2.map(|d| spec.from_sq_dist(d)))
}

pub fn induced_sq_distance(x: &Matrix, y: &Matrix, spec: &KernelSpec) -> Result<Matrix> {
    let k = kernel_matrix(x, y, spec)?;
    let kxx = spec.self_similarity();
    Ok(k.map(|v| (2.0 * kxx - 2.0 * v).max(0.0)))
}

pub fn cost_matrix(x: &Matrix, y: &Matrix, spec: &KernelSpec, mode: CostMode) -> Result<Matrix> {
    match mode {
        CostMode::InducedSqDistance => induced_sq_distance(x, y, spec),
        CostMode::NegativeSimilarity => Ok(kernel_matrix(x, y, spec)?.map(|v| 1.0 - v)),
    }
}

/// Median pairwise Euclidean distance over a seeded subsample of at most
/// `sample` rows. Falls back to 1.0 when all sampled rows coincide.
pub fn median_bandwidth(x: &Matrix, sample: usize, seed: u64) -> Result<f64> {
    if x.rows() < 2 {
        return Ok(1.0);
    }
    let idx = if x.rows() > sample {
        let mut idx = Rng::new(seed).sample_indices(x.rows(), sample);
        idx.sort_unstable();
        idx
    } else {
        (0..x.rows()).collect()
    };
    let sub = x.select_rows(&idx);
    let d2 = pairwise_sq_dists(&sub, &sub)?;
    let mut dists = Vec::with_capacity(idx.len() * (idx.len() - 1) / 2);
    for i in 0..idx.len() {
        for j in (i + 1)..idx.len() {
            dists.push(d2[(i, j)].sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let med = if dists.len() % 2 == 0 { 0.5 * (dists[mid - 1] + dists[mid]) } else { dists[mid] };
    Ok(if med > 1e-12 { med } else { 1.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sym_eig;

    fn unit() -> KernelSpec {
        KernelSpec::gaussian(1.0).unwrap()
    }

    #[test]
    fn closed_forms() {
        let x = Matrix::from_rows(&[[0.0]]);
        let y = Matrix::from_rows(&[[1.0]]);
        let k = kernel_matrix(&x, &y, &unit()).unwrap();
        assert!((k[(0, 0)] - 0.6065307).abs() < 1e-7);
        assert_eq!(kernel_matrix(&x, &x, &unit()).unwrap()[(0, 0)], 1.0);
        let d = induced_sq_distance(&x, &y, &unit()).unwrap();
        assert!((d[(0, 0)] - 0.7869387).abs() < 1e-7);
        assert_eq!(induced_sq_distance(&y, &y, &unit()).unwrap()[(0, 0)], 0.0);
        let a = cost_matrix(&x, &y, &unit(), CostMode::InducedSqDistance).unwrap()[(0, 0)];
        let b = cost_matrix(&x, &y, &unit(), CostMode::NegativeSimilarity).unwrap()[(0, 0)];
        assert!((a - 0.7869387).abs() < 1e-7);
        assert!((b - 0.3934693).abs() < 1e-7);
        assert_eq!(cost_matrix(&x, &x, &unit(), CostMode::NegativeSimilarity).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn flat_kernel_limit() {
        let mut rng = Rng::new(1);
        let x = Matrix::from_fn(5, 3, |_, _| rng.uniform());
        let k = kernel_matrix(&x, &x, &KernelSpec::gaussian(1e6).unwrap()).unwrap();
        assert!(k.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn invalid_inputs() {
        assert!(KernelSpec::gaussian(0.0).is_err());
        assert!(KernelSpec::gaussian(-1.0).is_err());
        let err = kernel_matrix(&Matrix::zeros(1, 2), &Matrix::zeros(1, 3), &unit()).unwrap_err();
        assert_eq!(err.code(), "shape");
    }

    /// `‖u(x) − u(y)‖²` through the Gram expansion of the three points
    /// `{x, y, w}`: evaluating the 3×3 Gram with the kernel directly and
    /// contracting it with the coefficient vector (1, −1, 0).
    #[test]
    fn induced_distance_matches_gram_expansion() {
        let mut rng = Rng::new(9);
        let spec = KernelSpec::gaussian(0.7).unwrap();
        for _ in 0..20 {
            let pts = Matrix::from_fn(3, 4, |_, _| rng.normal());
            let mut gram = Matrix::zeros(3, 3);
            for i in 0..3 {
                for j in 0..3 {
                    let d2: f64 = (0..4).map(|c| (pts[(i, c)] - pts[(j, c)]).powi(2)).sum();
                    gram[(i, j)] = (-d2 / (2.0 * 0.49)).exp();
                }
            }
            let coef = [1.0, -1.0, 0.0];
            let mut q = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    q += coef[i] * coef[j] * gram[(i, j)];
                }
            }
            let x = pts.select_rows(&[0]);
            let y = pts.select_rows(&[1]);
            let d = induced_sq_distance(&x, &y, &spec).unwrap()[(0, 0)];
            assert!((d - q).abs() < 1e-12);
        }
    }

    #[test]
    fn gram_is_positive_definite() {
        for seed in 0..10 {
            let mut rng = Rng::new(seed);
            let n = 8 + (seed as usize * 3) % 25;
            let x = Matrix::from_fn(n, 3, |_, _| rng.normal());
            let k = kernel_matrix(&x, &x, &unit()).unwrap();
            assert!(k.max_asymmetry() == 0.0);
            assert!(k.min_value() > 0.0);
            let e = sym_eig(&k).unwrap();
            let lmax = *e.values.last().unwrap();
            assert!(e.values[0] >= -1e-8 * lmax);
        }
    }

    #[test]
    fn induced_distance_is_a_metric_on_triples() {
        let mut rng = Rng::new(4);
        for _ in 0..200 {
            let p = Matrix::from_fn(3, 2, |_, _| rng.normal());
            let d = induced_sq_distance(&p, &p, &unit()).unwrap().map(f64::sqrt);
            assert!((d[(0, 1)] - d[(1, 0)]).abs() < 1e-15);
            assert!(d[(0, 2)] <= d[(0, 1)] + d[(1, 2)] + 1e-9);
            assert!(d.max_value() <= 2f64.sqrt() + 1e-12);
        }
    }

    #[test]
    fn median_bandwidth_simple() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [3.0]]);
        // distances 1, 3, 2 -> median 2
        assert_eq!(median_bandwidth(&x, 512, 0).unwrap(), 2.0);
        assert_eq!(median_bandwidth(&Matrix::zeros(4, 2), 512, 0).unwrap(), 1.0);
    }
}
