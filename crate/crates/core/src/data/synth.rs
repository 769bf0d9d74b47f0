use super::{Dataset, InputKind, Split};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

pub const NEEDLE_MOTIF_LEN: usize = 3;

/// Stream id of the motif; samples use streams `1..`.
const MOTIF_STREAM: u64 = 0;

/// The fixed motif of the needle task for `seed`: three unit vectors.
pub fn needle_motif(vocab_dim: usize, seed: u64) -> Matrix {
    let mut rng = Rng::new(seed).split(MOTIF_STREAM);
    let rows: Vec<Vec<f64>> = (0..NEEDLE_MOTIF_LEN).map(|_| rng.unit_vector(vocab_dim)).collect();
    Matrix::from_rows(&rows)
}

/// Binary content-matching task. Every sequence is made of random unit
/// vectors and contains the three motif tokens. Positives (odd indices) hold
/// the motif consecutively and in order; negatives scatter the same tokens so
/// that no two of them are adjacent. Counting tokens therefore carries no
/// signal: the class is decided by which tokens sit next to each other.
pub fn synth_needle(n_samples: usize, seq_len: usize, vocab_dim: usize, seed: u64) -> Result<Dataset> {
    if seq_len < 8 {
        return Err(Error::InvalidArgument(format!("needle sequences need seq_len >= 8, got {seq_len}")));
    }
    if vocab_dim < 2 {
        return Err(Error::InvalidArgument("needle tokens need vocab_dim >= 2".into()));
    }
    let motif = needle_motif(vocab_dim, seed);
    let root = Rng::new(seed);
    let mut inputs = Vec::with_capacity(n_samples);
    let mut labels = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        let mut rng = root.split(s as u64 + 1);
        let label = s % 2;
        let mut x = Matrix::zeros(seq_len, vocab_dim);
        for i in 0..seq_len {
            x.row_mut(i).copy_from_slice(&rng.unit_vector(vocab_dim));
        }
        let positions: Vec<usize> = if label == 1 {
            let start = rng.below(seq_len - NEEDLE_MOTIF_LEN + 1);
            (start..start + NEEDLE_MOTIF_LEN).collect()
        } else {
            scattered_positions(seq_len, &mut rng)
        };
        for (t, &p) in positions.iter().enumerate() {
            x.row_mut(p).copy_from_slice(motif.row(t));
        }
        inputs.push(x);
        labels.push(label);
    }
    Ok(Dataset {
        inputs,
        labels,
        num_classes: 2,
        kind: InputKind::Sequence { len: seq_len, dim: vocab_dim },
        split: Split::All,
        provenance: format!("synth_needle(n={n_samples}, seq_len={seq_len}, dim={vocab_dim}, seed={seed})"),
    })
}

/// Three pairwise non-adjacent positions, in random order.
fn scattered_positions(len: usize, rng: &mut Rng) -> Vec<usize> {
    loop {
        let mut p = rng.sample_indices(len, NEEDLE_MOTIF_LEN);
        let mut sorted = p.clone();
        sorted.sort_unstable();
        if sorted.windows(2).all(|w| w[1] - w[0] >= 2) {
            rng.shuffle(&mut p);
            return p;
        }
    }
}

/// Exact solver for the needle task: 1 iff the motif occurs consecutively.
pub fn needle_detector(x: &Matrix, motif: &Matrix) -> usize {
    let n = x.rows();
    let matches = |i: usize, t: usize| x.row(i) == motif.row(t);
    (0..n.saturating_sub(NEEDLE_MOTIF_LEN - 1)).any(|s| (0..NEEDLE_MOTIF_LEN).all(|t| matches(s + t, t))).into()
}

const SHAPE_NOISE: f64 = 0.1;

/// Four-class single-channel image task: {small square, large square,
/// small disk, large disk} (labels 0..4) at a random position on a noisy
/// background. Shape pixels have intensity 1.
pub fn synth_shapes(n_samples: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    if image_size != 32 && image_size != 64 {
        return Err(Error::InvalidArgument(format!("image_size must be 32 or 64, got {image_size}")));
    }
    let small = image_size / 8;
    let large = image_size / 4;
    let root = Rng::new(seed);
    let mut inputs = Vec::with_capacity(n_samples);
    let mut labels = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        let mut rng = root.split(s as u64);
        let label = s % 4;
        let side = if label % 2 == 0 { small } else { large };
        let disk = label >= 2;
        let mut img = Matrix::from_fn(image_size * image_size, 1, |_, _| SHAPE_NOISE * rng.normal());
        let y0 = rng.below(image_size - side + 1);
        let x0 = rng.below(image_size - side + 1);
        let r = side as f64 / 2.0;
        let (cy, cx) = (y0 as f64 + r, x0 as f64 + r);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                let inside = if disk {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    dy * dy + dx * dx <= r * r
                } else {
                    true
                };
                if inside {
                    img[(y * image_size + x, 0)] += 1.0;
                }
            }
        }
        inputs.push(img);
        labels.push(label);
    }
    Ok(Dataset {
        inputs,
        labels,
        num_classes: 4,
        kind: InputKind::Image { channels: 1, height: image_size, width: image_size },
        split: Split::All,
        provenance: format!("synth_shapes(n={n_samples}, size={image_size}, seed={seed})"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn needle_is_balanced_and_deterministic() {
        let a = synth_needle(400, 16, 8, 3).unwrap();
        let b = synth_needle(400, 16, 8, 3).unwrap();
        assert_eq!(a, b);
        let pos = a.labels.iter().filter(|&&l| l == 1).count() as f64 / 400.0;
        assert!((pos - 0.5).abs() <= 0.02);
        a.validate().unwrap();
        assert!(synth_needle(4, 7, 8, 3).is_err());
    }

    #[test]
    fn needle_detector_is_exact() {
        let d = synth_needle(300, 12, 6, 9).unwrap();
        let motif = needle_motif(6, 9);
        for (x, &y) in d.inputs.iter().zip(&d.labels) {
            assert_eq!(needle_detector(x, &motif), y);
            for i in 0..x.rows() {
                let norm: f64 = x.row(i).iter().map(|v| v * v).sum();
                assert!((norm - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn needle_token_counts_carry_no_signal() {
        let d = synth_needle(100, 10, 4, 2).unwrap();
        let motif = needle_motif(4, 2);
        for x in &d.inputs {
            for t in 0..NEEDLE_MOTIF_LEN {
                let count = (0..x.rows()).filter(|&i| x.row(i) == motif.row(t)).count();
                assert_eq!(count, 1);
            }
        }
    }

    #[test]
    fn shapes_balanced_and_pixel_count_separates_size() {
        let d = synth_shapes(400, 32, 5).unwrap();
        assert_eq!(d.class_counts(), vec![100; 4]);
        assert_eq!(d, synth_shapes(400, 32, 5).unwrap());
        let mut correct = 0;
        for (x, &y) in d.inputs.iter().zip(&d.labels) {
            let bright = x.data().iter().filter(|&&v| v > 0.5).count();
            let large = bright > 30;
            if large == (y % 2 == 1) {
                correct += 1;
            }
        }
        assert!(correct as f64 / 400.0 >= 0.99);
        assert!(synth_shapes(1, 48, 0).is_err());
    }
}
