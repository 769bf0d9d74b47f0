//! K-means clustering, the Nyström embedding `v(x) = (k(z,z)+δI)^{-1/2} k(z,x)`
//! and construction of the reference set.

use crate::error::{shape_err, Error, Result};
use crate::kernels::{kernel_matrix, KernelSpec};
use crate::numerics::{inv_sqrt_sym, pairwise_sq_dists, Matrix, Rng};

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step, in order.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

const MOVE_TOL: f64 = 1e-8;

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(points: &Matrix, k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    let n = points.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("kmeans on an empty point set".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("kmeans needs k >= 1".into()));
    }
    if k > n {
        return Err(Error::KTooLarge { k, n });
    }
    points.ensure_finite("kmeans input")?;
    let mut rng = Rng::new(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng)?;

    let (mut assignments, mut dists) = assign(points, &centroids)?;
    let mut history = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let updated = update_centroids(points, &assignments, &dists, &centroids);
        let moved = max_row_shift(&centroids, &updated);
        centroids = updated;
        let (a, d) = assign(points, &centroids)?;
        assignments = a;
        dists = d;
        history.push(dists.iter().sum());
        if moved < MOVE_TOL {
            break;
        }
    }
    let inertia = *history.last().unwrap();
    Ok(KMeansResult { centroids, assignments, inertia, inertia_history: history, iterations })
}

fn plus_plus_init(points: &Matrix, k: usize, rng: &mut Rng) -> Result<Matrix> {
    let n = points.rows();
    let mut chosen = vec![rng.below(n)];
    let mut best = pairwise_sq_dists(points, &points.select_rows(&chosen))?.col(0);
    while chosen.len() < k {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut pick = n - 1;
            for (i, &d) in best.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            if best[pick] <= 0.0 {
                // rounding pushed us past the last positive weight
                pick = (0..n).rev().find(|&i| best[i] > 0.0).unwrap();
            }
            pick
        } else {
            // every point coincides with a chosen centroid
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        let d = pairwise_sq_dists(points, &points.select_rows(&[next]))?.col(0);
        for (b, v) in best.iter_mut().zip(d) {
            *b = b.min(v);
        }
    }
    Ok(points.select_rows(&chosen))
}

/// Nearest centroid per point (lowest index on ties) and its squared distance.
fn assign(points: &Matrix, centroids: &Matrix) -> Result<(Vec<usize>, Vec<f64>)> {
    let d = pairwise_sq_dists(points, centroids)?;
    let mut a = Vec::with_capacity(points.rows());
    let mut dist = Vec::with_capacity(points.rows());
    for i in 0..points.rows() {
        let row = d.row(i);
        let mut best = 0;
        for j in 1..row.len() {
            if row[j] < row[best] {
                best = j;
            }
        }
        a.push(best);
        dist.push(row[best]);
    }
    Ok((a, dist))
}

fn update_centroids(points: &Matrix, assignments: &[usize], dists: &[f64], prev: &Matrix) -> Matrix {
    let (k, d) = prev.shape();
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (i, &c) in assignments.iter().enumerate() {
        counts[c] += 1;
        for (s, v) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
            *s += v;
        }
    }
    let mut taken: Vec<usize> = Vec::new();
    for c in 0..k {
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            for s in sums.row_mut(c) {
                *s *= inv;
            }
        } else {
            // re-seed an empty cluster at the point farthest from its centroid
            let mut far = None;
            for i in 0..points.rows() {
                if taken.contains(&i) {
                    continue;
                }
                if far.map_or(true, |f: usize| dists[i] > dists[f]) {
                    far = Some(i);
                }
            }
            let far = far.unwrap_or(0);
            taken.push(far);
            sums.row_mut(c).copy_from_slice(points.row(far));
        }
    }
    sums
}

fn max_row_shift(a: &Matrix, b: &Matrix) -> f64 {
    (0..a.rows())
        .map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// Anchors `z` and the whitening matrix `(k(z,z) + δI)^{-1/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct NystromMap {
    pub anchors: Matrix,
    pub whitener: Matrix,
    pub spec: KernelSpec,
    pub delta: f64,
}

impl NystromMap {
    /// Builds the map for given anchors without clustering.
    pub fn from_anchors(anchors: Matrix, spec: KernelSpec, delta: f64) -> Result<Self> {
        let kzz = kernel_matrix(&anchors, &anchors, &spec)?;
        let whitener = inv_sqrt_sym(&kzz, delta)?;
        Ok(Self { anchors, whitener, spec, delta })
    }

    pub fn dim(&self) -> usize {
        self.anchors.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.anchors.cols()
    }
}

/// Anchors are K-means centroids of `x_train`.
pub fn fit_nystrom(x_train: &Matrix, k: usize, delta: f64, spec: KernelSpec, seed: u64) -> Result<NystromMap> {
    let km = kmeans(x_train, k, seed, 100)?;
    NystromMap::from_anchors(km.centroids, spec, delta)
}

/// `V = k(X, z) · W`; row `i` is the finite embedding of `x_i`.
pub fn embed(map: &NystromMap, x: &Matrix) -> Result<Matrix> {
    if x.cols() != map.input_dim() {
        return Err(shape_err(format!("embed: input has {} columns, anchors have {}", x.cols(), map.input_dim())));
    }
    kernel_matrix(x, &map.anchors, &map.spec)?.matmul(&map.whitener)
}

/// `m` reference rows living in the embedded space.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub y: Matrix,
    pub trainable: bool,
}

impl ReferenceSet {
    pub fn new(y: Matrix, trainable: bool) -> Result<Self> {
        if y.rows() == 0 {
            return Err(Error::InvalidArgument("reference set needs m >= 1".into()));
        }
        y.ensure_finite("references")?;
        Ok(Self { y, trainable })
    }

    pub fn m(&self) -> usize {
        self.y.rows()
    }
}

/// References are K-means centroids of the pooled embedded training rows.
pub fn fit_references(v_train: &Matrix, m: usize, seed: u64, trainable: bool) -> Result<ReferenceSet> {
    let km = kmeans(v_train, m, seed, 100)?;
    ReferenceSet::new(km.centroids, trainable)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> KernelSpec {
        KernelSpec::gaussian(1.0).unwrap()
    }

    #[test]
    fn k_equals_n_reproduces_points() {
        let mut rng = Rng::new(4);
        let x = Matrix::from_fn(6, 2, |_, _| rng.normal());
        let r = kmeans(&x, 6, 1, 50).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut rows: Vec<Vec<f64>> = (0..6).map(|i| r.centroids.row(i).to_vec()).collect();
        let mut want: Vec<Vec<f64>> = (0..6).map(|i| x.row(i).to_vec()).collect();
        rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
        want.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(rows, want);
    }

    #[test]
    fn separated_clusters() {
        let mut rng = Rng::new(12);
        let mut rows = Vec::new();
        for c in [0.0, 10.0] {
            for _ in 0..20 {
                rows.push(vec![c + rng.uniform_range(-0.01, 0.01), c + rng.uniform_range(-0.01, 0.01)]);
            }
        }
        let x = Matrix::from_rows(&rows);
        let r = kmeans(&x, 2, 3, 100).unwrap();
        for j in 0..2 {
            let c = r.centroids.row(j);
            let target = if c[0] < 5.0 { 0.0 } else { 10.0 };
            let members: Vec<usize> = (0..40).filter(|&i| r.assignments[i] == j).collect();
            let mean0 = members.iter().map(|&i| x[(i, 0)]).sum::<f64>() / members.len() as f64;
            assert!((c[0] - mean0).abs() < 1e-12);
            assert!((c[0] - target).abs() < 0.02 && (c[1] - target).abs() < 0.02);
        }
    }

    #[test]
    fn inertia_monotone_and_fixed_point() {
        for seed in 0..10 {
            let mut rng = Rng::new(100 + seed);
            let x = Matrix::from_fn(60, 3, |_, _| rng.normal());
            let r = kmeans(&x, 5, seed, 200).unwrap();
            for w in r.inertia_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{:?}", r.inertia_history);
            }
            let (again, _) = assign(&x, &r.centroids).unwrap();
            assert_eq!(again, r.assignments);
        }
    }

    #[test]
    fn kmeans_deterministic_and_validated() {
        let mut rng = Rng::new(5);
        let x = Matrix::from_fn(30, 4, |_, _| rng.normal());
        let a = kmeans(&x, 4, 9, 100).unwrap();
        let b = kmeans(&x, 4, 9, 100).unwrap();
        assert_eq!(a.centroids.data(), b.centroids.data());
        assert_eq!(kmeans(&x, 31, 0, 10).unwrap_err().code(), "k-too-large");
    }

    #[test]
    fn kmeans_with_duplicate_points() {
        let x = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [2.0, 2.0]]);
        let r = kmeans(&x, 3, 0, 10).unwrap();
        assert!(r.centroids.is_finite());
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn single_anchor_whitener_and_embedding() {
        let x = Matrix::from_rows(&[[0.5, -1.0], [2.0, 0.0]]);
        let delta = 1e-3;
        let map = fit_nystrom(&x, 1, delta, spec(), 0).unwrap();
        assert!((map.whitener[(0, 0)] - (1.0 + delta).powf(-0.5)).abs() < 1e-14);
        let probe = Matrix::from_fn(1, 2, |_, j| map.anchors[(0, j)] + if j == 0 { 0.3 } else { 0.0 });
        let v = embed(&map, &probe).unwrap();
        let want = (-0.09f64 / 2.0).exp() * (1.0 + delta).powf(-0.5);
        assert!((v[(0, 0)] - want).abs() < 1e-12);
    }

    #[test]
    fn full_rank_embedding_reproduces_gram() {
        let mut rng = Rng::new(31);
        let x = Matrix::from_fn(10, 3, |_, _| rng.normal());
        let map = NystromMap::from_anchors(x.clone(), spec(), 0.0).unwrap();
        let v = embed(&map, &x).unwrap();
        let gram = v.matmul_nt(&v).unwrap();
        let k = kernel_matrix(&x, &x, &spec()).unwrap();
        assert!(gram.sub(&k).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn whitener_reconstruction_with_ridge() {
        let mut rng = Rng::new(8);
        let x = Matrix::from_fn(40, 3, |_, _| rng.normal());
        let map = fit_nystrom(&x, 8, 1e-6, spec(), 2).unwrap();
        let mut kzz = kernel_matrix(&map.anchors, &map.anchors, &spec()).unwrap();
        for i in 0..8 {
            kzz[(i, i)] += 1e-6;
        }
        let w = &map.whitener;
        let id = w.matmul(&kzz).unwrap().matmul(w).unwrap();
        assert!(id.sub(&Matrix::identity(8)).unwrap().frobenius_norm() < 1e-8);
        assert!(w.max_asymmetry() < 1e-10);
    }

    #[test]
    fn embed_is_row_equivariant() {
        let mut rng = Rng::new(3);
        let x = Matrix::from_fn(12, 2, |_, _| rng.normal());
        let map = fit_nystrom(&x, 4, 1e-6, spec(), 0).unwrap();
        let perm = [3, 0, 11, 5, 2, 1, 4, 6, 7, 9, 8, 10];
        let a = embed(&map, &x.select_rows(&perm)).unwrap();
        let b = embed(&map, &x).unwrap().select_rows(&perm);
        assert_eq!(a.data(), b.data());
        assert_eq!(embed(&map, &Matrix::zeros(1, 3)).unwrap_err().code(), "shape");
    }

    #[test]
    fn references_from_embedded_rows() {
        let mut rng = Rng::new(6);
        let v = Matrix::from_fn(5, 3, |_, _| rng.normal());
        let r = fit_references(&v, 5, 0, true).unwrap();
        assert_eq!(r.m(), 5);
        assert!(r.trainable);
        assert_eq!(kmeans(&v, 5, 0, 100).unwrap().inertia, 0.0);
        let big = Matrix::from_fn(600, 4, |_, _| rng.normal());
        for m in [100, 300, 500] {
            assert_eq!(fit_references(&big, m, 1, false).unwrap().m(), m);
        }
    }
}
