//! Run configuration: a JSON document with `model`, `training`, `data`,
//! `seed` and `out_dir` sections. A document may name a `preset`; its own
//! keys are then merged over the preset before parsing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use set_transport::data::{self, Dataset, InputKind};
use set_transport::model::{Mechanism, SeTformerConfig};
use set_transport::train::{AdamWConfig, TrainingConfig};
use set_transport::Error;

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Needle {
        train: usize,
        test: usize,
        seq_len: usize,
        vocab_dim: usize,
    },
    Shapes {
        train: usize,
        test: usize,
        image_size: usize,
    },
    /// IDX files; without a test pair the last `test` training samples are
    /// held out.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        #[serde(default)]
        test: usize,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Needle { train: 2000, test: 500, seq_len: 16, vocab_dim: 16 }
    }
}

impl DataConfig {
    /// Builds `(train, test)`. Synthetic data is generated once with `seed`
    /// and split, so train and test never share a sample.
    pub fn load(&self, seed: u64) -> set_transport::Result<(Dataset, Dataset)> {
        match self {
            DataConfig::Needle { train, test, seq_len, vocab_dim } => {
                data::synth_needle(train + test, *seq_len, *vocab_dim, seed)?.split_off(*test)
            }
            DataConfig::Shapes { train, test, image_size } => {
                data::synth_shapes(train + test, *image_size, seed)?.split_off(*test)
            }
            DataConfig::Idx { train_images, train_labels, test_images, test_labels, test } => {
                let tr = data::load_idx(train_images, train_labels)?;
                match (test_images, test_labels) {
                    (Some(ti), Some(tl)) => {
                        let mut te = data::load_idx(ti, tl)?;
                        te.num_classes = te.num_classes.max(tr.num_classes);
                        let mut tr = tr;
                        tr.num_classes = te.num_classes;
                        Ok((tr, te))
                    }
                    (None, None) => tr.split_off(*test),
                    _ => Err(Error::Config("/data: test_images and test_labels go together".into())),
                }
            }
        }
    }

    /// Input shape and class count, when known without reading files.
    fn expected(&self) -> Option<(InputKind, usize)> {
        match *self {
            DataConfig::Needle { seq_len, vocab_dim, .. } => {
                Some((InputKind::Sequence { len: seq_len, dim: vocab_dim }, 2))
            }
            DataConfig::Shapes { image_size, .. } => {
                Some((InputKind::Image { channels: 1, height: image_size, width: image_size }, 4))
            }
            DataConfig::Idx { .. } => None,
        }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Informational once loaded: the preset the document was merged over.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default)]
    pub model: SeTformerConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        preset("needle").expect("built-in preset")
    }
}

impl RunConfig {
    /// Parses a document, merging it over its `preset` if it names one.
    pub fn from_json(text: &str) -> set_transport::Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("/: {e}")))?;
        Self::from_value(doc)
    }

    pub fn from_value(doc: Value) -> set_transport::Result<Self> {
        let merged = match doc.get("preset") {
            Some(Value::String(name)) => {
                let mut base = serde_json::to_value(preset(name)?).expect("config serializes");
                merge(&mut base, doc.clone());
                base
            }
            Some(_) => return Err(Error::Config("/preset: expected a string".into())),
            None => doc,
        };
        let cfg: RunConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
            let pointer = json_pointer(e.path());
            Error::Config(format!("{pointer}: {}", e.inner()))
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> set_transport::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Semantic checks beyond what parsing enforces.
    pub fn validate(&self) -> set_transport::Result<()> {
        self.model.validate().map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("/model{msg}")),
            other => other,
        })?;
        self.training.validate()?;
        if let Some((kind, classes)) = self.data.expected() {
            if self.model.input != kind {
                return Err(Error::Config(format!(
                    "/model/input: data produces {kind:?}, model expects {:?}",
                    self.model.input
                )));
            }
            if self.model.num_classes != classes {
                return Err(Error::Config(format!(
                    "/model/num_classes: data has {classes} classes, model has {}",
                    self.model.num_classes
                )));
            }
        }
        match self.data {
            DataConfig::Needle { train, .. } | DataConfig::Shapes { train, .. } if train == 0 => {
                Err(Error::Config("/data/train: need at least one training sample".into()))
            }
            _ => Ok(()),
        }
    }

    /// Every default filled in, as written next to the outputs.
    pub fn effective(&self) -> set_transport::Result<Self> {
        let mut out = self.clone();
        out.model.materialize()?;
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

/// Deep-merges `patch` into `base`; objects merge key by key, anything else
/// replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

pub(crate) fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

pub const PRESETS: [&str; 6] = ["needle", "needle-dpsa", "shapes", "imagenet-like", "coco-like", "ade-like"];

fn needle() -> RunConfig {
    let (seq_len, vocab_dim) = (16, 16);
    let mut model = SeTformerConfig::sequence(seq_len, vocab_dim, 2);
    model.base_channels = 64;
    model.heads = vec![4];
    model.m = vec![16];
    model.epsilon = vec![0.5];
    model.tau = vec![0.1];
    RunConfig {
        preset: Some("needle".into()),
        model,
        training: TrainingConfig { steps: 2000, batch_size: 32, eval_every: 10, ..Default::default() },
        data: DataConfig::Needle { train: 2000, test: 500, seq_len, vocab_dim },
        seed: 0,
        out_dir: default_out(),
    }
}

fn shapes(name: &str, m: usize, epsilon: f64, tau: f64) -> RunConfig {
    let image_size = 32;
    let model = SeTformerConfig {
        variant: "custom".into(),
        blocks: Some(vec![1, 1]),
        base_channels: 16,
        heads: vec![1],
        m: vec![m],
        epsilon: vec![epsilon],
        tau: vec![tau],
        input: InputKind::Image { channels: 1, height: image_size, width: image_size },
        num_classes: 4,
        ..Default::default()
    };
    RunConfig {
        preset: Some(name.into()),
        model,
        training: TrainingConfig {
            steps: 2000,
            batch_size: 32,
            optimizer: AdamWConfig { lr: 6e-3, ..Default::default() },
            eval_every: 5,
            ..Default::default()
        },
        data: DataConfig::Shapes { train: 4000, test: 400, image_size },
        seed: 0,
        out_dir: default_out(),
    }
}

/// Named starting points. The `*-like` presets carry the large-benchmark
/// hyperparameters (m, ε, τ) on the desk-scale shapes task; `m` is clamped
/// to the token count of each stage.
pub fn preset(name: &str) -> set_transport::Result<RunConfig> {
    Ok(match name {
        "needle" => needle(),
        "needle-dpsa" => {
            let mut c = needle();
            c.preset = Some(name.into());
            c.model.mechanism = Mechanism::Dpsa;
            c
        }
        "shapes" => shapes(name, 16, 0.1, 0.5),
        "imagenet-like" => shapes(name, 500, 0.1, 0.5),
        "coco-like" => shapes(name, 750, 0.3, 0.8),
        "ade-like" => shapes(name, 800, 0.3, 0.8),
        other => return Err(Error::Config(format!("/preset: unknown preset {other:?}, expected one of {PRESETS:?}"))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESETS {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap();
            let back = RunConfig::from_json(&cfg.to_json()).unwrap();
            assert_eq!(back, cfg, "{name}");
        }
    }

    #[test]
    fn overrides_merge_over_preset() {
        let cfg = RunConfig::from_json(r#"{"preset": "needle", "model": {"m": [2]}, "seed": 4}"#).unwrap();
        assert_eq!(cfg.model.m, vec![2]);
        assert_eq!(cfg.model.base_channels, 64);
        assert_eq!(cfg.seed, 4);
    }

    #[test]
    fn errors_carry_json_pointers() {
        let err = RunConfig::from_json(r#"{"model": {"sinkhorn": {"iterations": "many"}}}"#).unwrap_err();
        assert!(err.to_string().starts_with("config: /model/sinkhorn/iterations:"), "{err}");
        let err = RunConfig::from_json(r#"{"training": {"stepz": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("/training"), "{err}");
        let err = RunConfig::from_json(r#"{"preset": "nope"}"#).unwrap_err();
        assert!(err.to_string().contains("/preset"));
        let mut cfg = preset("needle").unwrap();
        cfg.model.heads = vec![3];
        assert!(cfg.validate().unwrap_err().to_string().starts_with("config: /model/heads"));
        cfg = preset("needle").unwrap();
        cfg.model.num_classes = 5;
        assert!(cfg.validate().unwrap_err().to_string().contains("/model/num_classes"));
    }
}
