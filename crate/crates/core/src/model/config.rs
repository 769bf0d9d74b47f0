use serde::{Deserialize, Serialize};

use crate::data::InputKind;
use crate::error::{Error, Result};
use crate::kernels::CostMode;

/// Attention mechanism used inside every block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    #[default]
    Set,
    /// Softmax dot-product attention with the same block layout.
    Dpsa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornSection {
    /// Unrolled iterations inside every layer.
    pub iterations: usize,
    pub cost_mode: CostMode,
}

impl Default for SinkhornSection {
    fn default() -> Self {
        Self { iterations: 50, cost_mode: CostMode::InducedSqDistance }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NystromSection {
    /// Anchor count, clamped to the number of fitting rows.
    pub k: usize,
    pub delta: f64,
    /// L2-normalize tokens before the kernel embedding.
    pub normalize_inputs: bool,
    /// Gaussian bandwidth; `None` uses the median heuristic per layer.
    pub bandwidth: Option<f64>,
    /// Samples swept through the network when fitting anchors and references.
    pub fit_samples: usize,
    /// Cap on feature rows handed to K-means.
    pub max_fit_rows: usize,
}

impl Default for NystromSection {
    fn default() -> Self {
        Self { k: 64, delta: 1e-6, normalize_inputs: true, bandwidth: None, fit_samples: 256, max_fit_rows: 2048 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PositionalSection {
    pub enabled: bool,
    pub renormalize: bool,
}

impl Default for PositionalSection {
    fn default() -> Self {
        Self { enabled: true, renormalize: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceSection {
    pub trainable: bool,
}

impl Default for ReferenceSection {
    fn default() -> Self {
        Self { trainable: true }
    }
}

/// Architecture description. Per-stage lists (`heads`, `m`, `epsilon`,
/// `tau`) hold either one value per stage or a single value shared by all
/// stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeTformerConfig {
    /// `miny`, `tiny`, `small`, `base` or `custom`.
    pub variant: String,
    /// Blocks per stage; derived from `variant` when absent.
    pub blocks: Option<Vec<usize>>,
    pub base_channels: usize,
    pub mlp_ratio: usize,
    pub heads: Vec<usize>,
    pub m: Vec<usize>,
    pub epsilon: Vec<f64>,
    pub tau: Vec<f64>,
    pub mechanism: Mechanism,
    pub input: InputKind,
    pub num_classes: usize,
    /// Learned additive position table for sequence inputs.
    pub positional_embedding: bool,
    pub sinkhorn: SinkhornSection,
    pub nystrom: NystromSection,
    pub positional: PositionalSection,
    pub references: ReferenceSection,
}

impl Default for SeTformerConfig {
    fn default() -> Self {
        Self {
            variant: "miny".into(),
            blocks: None,
            base_channels: 48,
            mlp_ratio: 4,
            heads: vec![1],
            m: vec![16],
            epsilon: vec![0.1],
            tau: vec![0.5],
            mechanism: Mechanism::Set,
            input: InputKind::Image { channels: 3, height: 32, width: 32 },
            num_classes: 10,
            positional_embedding: true,
            sinkhorn: SinkhornSection::default(),
            nystrom: NystromSection::default(),
            positional: PositionalSection::default(),
            references: ReferenceSection::default(),
        }
    }
}

/// Block counts of the named variants.
pub fn variant_blocks(name: &str) -> Option<Vec<usize>> {
    match name {
        "miny" => Some(vec![3, 4, 6, 5]),
        "tiny" | "small" | "base" => Some(vec![3, 4, 18, 5]),
        _ => None,
    }
}

fn per_stage<T: Copy>(values: &[T], stage: usize) -> T {
    if values.len() == 1 {
        values[0]
    } else {
        values[stage]
    }
}

/// Resolved geometry of one stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageShape {
    pub blocks: usize,
    pub channels: usize,
    /// Token grid height and width (sequence inputs use `h = len`, `w = 1`).
    pub h: usize,
    pub w: usize,
    pub heads: usize,
    /// Reference count after clamping to the token count.
    pub m: usize,
    pub epsilon: f64,
    pub tau: f64,
}

impl StageShape {
    pub fn tokens(&self) -> usize {
        self.h * self.w
    }
}

impl SeTformerConfig {
    /// Default configuration for a flat sequence model.
    pub fn sequence(len: usize, dim: usize, num_classes: usize) -> Self {
        Self {
            variant: "custom".into(),
            blocks: Some(vec![1]),
            base_channels: 32,
            input: InputKind::Sequence { len, dim },
            num_classes,
            ..Self::default()
        }
    }

    pub fn blocks(&self) -> Result<Vec<usize>> {
        match (&self.blocks, variant_blocks(&self.variant)) {
            (Some(b), _) => Ok(b.clone()),
            (None, Some(b)) => Ok(b),
            (None, None) => {
                Err(Error::Config(format!("/variant: unknown variant {:?} and no explicit blocks", self.variant)))
            }
        }
    }

    /// Copies the derived block counts into `blocks` so the effective
    /// configuration is explicit.
    pub fn materialize(&mut self) -> Result<()> {
        self.blocks = Some(self.blocks()?);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let blocks = self.blocks()?;
        let stages = blocks.len();
        match self.input {
            InputKind::Image { channels, height, width } => {
                if !(1..=4).contains(&stages) {
                    return Err(Error::Config(format!("/blocks: image models take 1 to 4 stages, got {stages}")));
                }
                if channels == 0 || height == 0 || width == 0 {
                    return Err(Error::Config("/input: image dims must be positive".into()));
                }
                if height % 4 != 0 || width % 4 != 0 {
                    return Err(Error::Config(format!("/input: {height}x{width} not divisible by 4")));
                }
            }
            InputKind::Sequence { len, dim } => {
                if stages != 1 {
                    return Err(Error::Config("/blocks: sequence models have exactly one stage".into()));
                }
                if len == 0 || dim == 0 {
                    return Err(Error::Config("/input: sequence dims must be positive".into()));
                }
            }
        }
        if let Some(i) = blocks.iter().position(|&b| b == 0) {
            return Err(Error::Config(format!("/blocks/{i}: block counts must be >= 1")));
        }
        for (name, len) in
            [("heads", self.heads.len()), ("m", self.m.len()), ("epsilon", self.epsilon.len()), ("tau", self.tau.len())]
        {
            if len != 1 && len != stages {
                return Err(Error::Config(format!("/{name}: expected 1 or {stages} values, got {len}")));
            }
        }
        if let Some(i) = self.m.iter().position(|&m| m == 0) {
            return Err(Error::Config(format!("/m/{i}: reference count must be >= 1")));
        }
        if let Some(i) = self.epsilon.iter().position(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::Config(format!("/epsilon/{i}: must be > 0")));
        }
        if let Some(i) = self.tau.iter().position(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(Error::Config(format!("/tau/{i}: must be > 0")));
        }
        if self.base_channels == 0 || self.mlp_ratio == 0 || self.num_classes == 0 {
            return Err(Error::Config("/base_channels, /mlp_ratio and /num_classes must be >= 1".into()));
        }
        if let InputKind::Image { .. } = self.input {
            if self.base_channels % 2 != 0 {
                return Err(Error::Config("/base_channels: must be even for the two-layer patch embedding".into()));
            }
        }
        for s in 0..stages {
            let ch = self.base_channels << s;
            let h = per_stage(&self.heads, s);
            if h == 0 || ch % h != 0 {
                return Err(Error::Config(format!("/heads/{s}: {h} heads do not divide {ch} channels")));
            }
        }
        if self.sinkhorn.iterations == 0 {
            return Err(Error::Config("/sinkhorn/iterations: must be >= 1".into()));
        }
        if self.nystrom.k == 0 || !(self.nystrom.delta >= 0.0) {
            return Err(Error::Config("/nystrom: k must be >= 1 and delta >= 0".into()));
        }
        if self.nystrom.bandwidth.is_some_and(|b| !(b > 0.0)) {
            return Err(Error::Config("/nystrom/bandwidth: must be > 0".into()));
        }
        if self.nystrom.fit_samples == 0 || self.nystrom.max_fit_rows == 0 {
            return Err(Error::Config("/nystrom: fit_samples and max_fit_rows must be >= 1".into()));
        }
        let shapes = self.stage_shapes()?;
        for (s, prev) in shapes.iter().enumerate().take(shapes.len() - 1) {
            if prev.h < 2 || prev.w < 2 {
                return Err(Error::Config(format!(
                    "/blocks: stage {} would downsample a {}x{} grid",
                    s + 1,
                    prev.h,
                    prev.w
                )));
            }
        }
        Ok(())
    }

    pub fn stage_shapes(&self) -> Result<Vec<StageShape>> {
        let blocks = self.blocks()?;
        let (mut h, mut w) = match self.input {
            InputKind::Image { height, width, .. } => (height / 4, width / 4),
            InputKind::Sequence { len, .. } => (len, 1),
        };
        let mut out = Vec::with_capacity(blocks.len());
        for (s, &b) in blocks.iter().enumerate() {
            if s > 0 {
                h = h.div_ceil(2);
                w = w.div_ceil(2);
            }
            let n = h * w;
            out.push(StageShape {
                blocks: b,
                channels: self.base_channels << s,
                h,
                w,
                heads: per_stage(&self.heads, s),
                m: per_stage(&self.m, s).min(n),
                epsilon: per_stage(&self.epsilon, s),
                tau: per_stage(&self.tau, s),
            });
        }
        Ok(out)
    }

    pub fn total_blocks(&self) -> Result<usize> {
        Ok(self.blocks()?.iter().sum())
    }
}
