//! Dense linear algebra, stable reductions, seeded randomness and the
//! multiply-add counter shared by every other module.

mod linalg;
mod matrix;
mod rng;

use std::cell::Cell;

pub use linalg::{inv_sqrt_sym, sym_eig, SymEig};
pub use matrix::{dot, Matrix};
pub use rng::Rng;

use crate::error::{shape_err, Error, Result};

thread_local! {
    static MADDS: Cell<u64> = const { Cell::new(0) };
}

/// Adds `n` to the calling thread's multiply-add counter.
#[inline]
pub fn count_madds(n: u64) {
    MADDS.with(|c| c.set(c.get().wrapping_add(n)));
}

/// Multiply-adds recorded on this thread since the last reset.
pub fn multiply_adds() -> u64 {
    MADDS.with(|c| c.get())
}

pub fn reset_multiply_adds() {
    MADDS.with(|c| c.set(0));
}

/// Runs `f` and returns its result together with the multiply-adds it
/// performed on this thread.
pub fn count_multiply_adds<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = multiply_adds();
    let out = f();
    (out, multiply_adds().wrapping_sub(before))
}

/// Max-shifted `log Σ_j exp(x_j)` of a slice; `-inf` for all `-inf` input.
#[inline]
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let s: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

/// Row-wise log-sum-exp.
pub fn logsumexp_rows(m: &Matrix) -> Result<Vec<f64>> {
    if m.cols() == 0 {
        return Err(Error::EmptyReduction("logsumexp over a row with no entries".into()));
    }
    m.ensure_finite("logsumexp_rows input")?;
    count_madds(m.len() as u64);
    Ok((0..m.rows()).map(|i| logsumexp(m.row(i))).collect())
}

/// `out_ij = ‖x_i − y_j‖²`, clamped at zero.
pub fn pairwise_sq_dists(x: &Matrix, y: &Matrix) -> Result<Matrix> {
    if x.cols() != y.cols() {
        return Err(shape_err(format!("pairwise_sq_dists: {} vs {} columns", x.cols(), y.cols())));
    }
    let xn: Vec<f64> = (0..x.rows()).map(|i| dot(x.row(i), x.row(i))).collect();
    let yn: Vec<f64> = (0..y.rows()).map(|j| dot(y.row(j), y.row(j))).collect();
    let mut g = x.matmul_nt(y)?;
    for i in 0..x.rows() {
        let row = g.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = (xn[i] + yn[j] - 2.0 * *v).max(0.0);
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::Rng;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn logsumexp_trivial() {
        let v = logsumexp_rows(&Matrix::from_rows(&[[5.0]])).unwrap();
        assert_eq!(v, vec![5.0]);
        let v = logsumexp_rows(&Matrix::from_rows(&[[0.0, 0.0]])).unwrap();
        assert!((v[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn logsumexp_empty_row() {
        let err = logsumexp_rows(&Matrix::zeros(2, 0)).unwrap_err();
        assert_eq!(err.code(), "empty-reduction");
    }

    /// Extended-precision oracle: shifted terms summed in ascending order
    /// with Kahan compensation.
    fn oracle_lse(xs: &[f64]) -> f64 {
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut terms: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
        terms.sort_by(f64::total_cmp);
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for t in terms {
            let y = t - c;
            let u = s + y;
            c = (u - s) - y;
            s = u;
        }
        max + s.ln()
    }

    #[test]
    fn logsumexp_wide_range_matches_oracle() {
        let mut rng = Rng::new(11);
        for _ in 0..50 {
            let row: Vec<f64> = (0..8).map(|_| rng.uniform_range(-700.0, 700.0)).collect();
            let got = logsumexp_rows(&Matrix::row_vector(&row)).unwrap()[0];
            let want = oracle_lse(&row);
            assert!(((got - want) / want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn logsumexp_no_overflow_at_1e6() {
        let v = logsumexp_rows(&Matrix::from_rows(&[[1e6, 1e6], [-1e6, -1e6]])).unwrap();
        assert!((v[0] - (1e6 + 2f64.ln())).abs() < 1e-9);
        assert!((v[1] - (-1e6 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn pairwise_closed_forms() {
        let x = Matrix::from_rows(&[[0.0], [1.0]]);
        let d = pairwise_sq_dists(&x, &x).unwrap();
        assert_eq!(d, Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]));
        let d = pairwise_sq_dists(&Matrix::from_rows(&[[0.0, 0.0]]), &Matrix::from_rows(&[[3.0, 4.0]])).unwrap();
        assert_eq!(d[(0, 0)], 25.0);
        let err = pairwise_sq_dists(&Matrix::zeros(1, 2), &Matrix::zeros(1, 3)).unwrap_err();
        assert_eq!(err.code(), "shape");
    }

    #[test]
    fn pairwise_matches_naive_loop() {
        let mut rng = Rng::new(3);
        let x = Matrix::from_fn(4, 3, |_, _| rng.normal());
        let y = Matrix::from_fn(2, 3, |_, _| rng.normal());
        let d = pairwise_sq_dists(&x, &y).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let mut s = 0.0;
                for c in 0..3 {
                    let t = x[(i, c)] - y[(j, c)];
                    s += t * t;
                }
                assert!((d[(i, j)] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn counter_tracks_matmul() {
        let a = Matrix::zeros(3, 4);
        let b = Matrix::zeros(4, 5);
        let (_, n) = count_multiply_adds(|| a.matmul(&b).unwrap());
        assert_eq!(n, 60);
    }

    proptest! {
        #[test]
        fn logsumexp_shift_invariant(row in prop::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0) {
            let m = Matrix::row_vector(&row);
            let shifted = m.map(|v| v + c);
            let a = logsumexp_rows(&m).unwrap()[0];
            let b = logsumexp_rows(&shifted).unwrap()[0];
            prop_assert!((b - (a + c)).abs() <= 1e-12 * (1.0 + b.abs()));
        }

        #[test]
        fn pairwise_self_diagonal_is_zero(vals in prop::collection::vec(-1e3f64..1e3, 12)) {
            let x = Matrix::new(4, 3, vals).unwrap();
            let d = pairwise_sq_dists(&x, &x).unwrap();
            for i in 0..4 {
                prop_assert_eq!(d[(i, i)], 0.0);
            }
            prop_assert!(d.min_value() >= 0.0);
        }

        #[test]
        fn operations_are_pure(vals in prop::collection::vec(-10.0f64..10.0, 9)) {
            let x = Matrix::new(3, 3, vals).unwrap();
            let s = x.matmul_tn(&x).unwrap();
            let a = inv_sqrt_sym(&s, 1e-3).unwrap();
            let b = inv_sqrt_sym(&s, 1e-3).unwrap();
            prop_assert_eq!(a.data(), b.data());
        }
    }
}
