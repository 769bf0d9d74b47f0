//! Synthetic task generators and the IDX container loader.
//!
//! Images are stored token-major: an `H × W × C` image is a `(H·W) × C`
//! matrix whose row `y·W + x` holds the channels of pixel `(y, x)`.

mod idx;
mod synth;

use serde::{Deserialize, Serialize};

pub use idx::{load_idx, write_idx};
pub use synth::{needle_detector, needle_motif, synth_needle, synth_shapes, NEEDLE_MOTIF_LEN};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InputKind {
    Image { channels: usize, height: usize, width: usize },
    Sequence { len: usize, dim: usize },
}

impl InputKind {
    /// Matrix shape of one sample.
    pub fn sample_shape(&self) -> (usize, usize) {
        match *self {
            InputKind::Image { channels, height, width } => (height * width, channels),
            InputKind::Sequence { len, dim } => (len, dim),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Matrix>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub kind: InputKind,
    pub split: Split,
    /// Generator name and seed, or source path and checksum.
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.len() != self.labels.len() {
            return Err(Error::Inconsistent(format!("{} inputs but {} labels", self.inputs.len(), self.labels.len())));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::InvalidArgument(format!("label {l} outside [0, {})", self.num_classes)));
        }
        let shape = self.kind.sample_shape();
        for (i, x) in self.inputs.iter().enumerate() {
            if x.shape() != shape {
                return Err(Error::Inconsistent(format!("sample {i} has shape {:?}, expected {shape:?}", x.shape())));
            }
            x.ensure_finite("dataset input")?;
        }
        Ok(())
    }

    /// Moves the last `n_test` samples into a test split.
    pub fn split_off(mut self, n_test: usize) -> Result<(Dataset, Dataset)> {
        if n_test > self.len() {
            return Err(Error::InvalidArgument(format!("cannot hold out {n_test} of {} samples", self.len())));
        }
        let at = self.len() - n_test;
        let test = Dataset {
            inputs: self.inputs.split_off(at),
            labels: self.labels.split_off(at),
            num_classes: self.num_classes,
            kind: self.kind,
            split: Split::Test,
            provenance: format!("{} [test {at}..]", self.provenance),
        };
        self.split = Split::Train;
        self.provenance = format!("{} [train ..{at}]", self.provenance);
        Ok((self, test))
    }

    /// Samples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            kind: self.kind,
            split: self.split,
            provenance: format!("{} [subset of {}]", self.provenance, idx.len()),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}
