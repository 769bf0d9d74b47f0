//! Hierarchical SeTformer: convolutional patch embedding, stages of
//! pre-norm blocks whose attention is the SeT operator (or softmax attention
//! for the baseline), strided-conv downsamplers and a linear head.
//!
//! Every forward pass is recorded on a [`Tape`], so evaluation and training
//! share a single code path. Sinkhorn runs a fixed number of iterations inside
//! each layer and is differentiated by unrolling.

mod checkpoint;
mod config;
mod flops;

use std::collections::BTreeMap;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use config::{
    variant_blocks, Mechanism, NystromSection, PositionalSection, ReferenceSection, SeTformerConfig, SinkhornSection,
    StageShape,
};
pub use flops::{dpsa_attention_flops, flops_estimate, set_attention_flops};

use crate::attention::{positional_matrix, NORM_EPS};
use crate::data::InputKind;
use crate::error::{shape_err, Error, Result};
use crate::kernels::{median_bandwidth, CostMode, KernelSpec};
use crate::numerics::{Matrix, Rng};
use crate::nystrom::{embed, fit_nystrom, kmeans, NystromMap};
use crate::train::tape::{ConvGeom, Tape, Var};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// One named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub trainable: bool,
    /// Subject to decoupled weight decay.
    pub decay: bool,
}

/// Named tensors in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    entries: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ModelParams {
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix, trainable: bool, decay: bool) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.entries[i] = Param { name, value, trainable, decay };
            return i;
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param { name, value, trainable, decay });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index_of(name).map(|i| &self.entries[i])
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &Param {
        &self.entries[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.entries[i].value
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for p in &self.entries {
            if !p.value.is_finite() {
                return Err(Error::Numerical(format!("non-finite parameter {}", p.name)));
            }
        }
        Ok(())
    }
}

/// Frozen kernel embedding of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedLayer {
    pub map: NystromMap,
    anchor_sq: Matrix,
}

impl FittedLayer {
    pub fn new(map: NystromMap) -> Self {
        let a = &map.anchors;
        let sq: Vec<f64> = (0..a.rows()).map(|i| a.row(i).iter().map(|v| v * v).sum()).collect();
        Self { anchor_sq: Matrix::row_vector(&sq), map }
    }
}

/// Transport plan of one head, kept for inspection.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub layer: usize,
    pub head: usize,
    /// Sinkhorn plan `T` (n×m).
    pub plan: Matrix,
    /// `T̃ = M ⊙ T`.
    pub weighted: Matrix,
}

/// Tokens on a `h × w` grid, one row per position.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub tokens: Matrix,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone)]
pub struct SeTformer {
    pub config: SeTformerConfig,
    pub params: ModelParams,
    /// One entry per attention layer, filled by [`SeTformer::fit_features`].
    pub layers: Vec<Option<FittedLayer>>,
    stages: Vec<StageShape>,
    positional: Vec<Option<Matrix>>,
}

/// `(stage, block)` for every attention layer, in forward order.
fn layer_positions(stages: &[StageShape]) -> Vec<(usize, usize)> {
    stages.iter().enumerate().flat_map(|(s, st)| (0..st.blocks).map(move |b| (s, b))).collect()
}

fn block_prefix(stage: usize, block: usize) -> String {
    format!("stages.{stage}.blocks.{block}")
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(salt.wrapping_add(1))
}

impl SeTformer {
    /// Deterministic initialization: truncated normal (std 0.02) weights,
    /// zero biases, unit norm scales. Anchors and references are fitted later.
    pub fn build(config: SeTformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let stages = config.stage_shapes()?;
        let mut rng = Rng::new(seed);
        let mut p = ModelParams::default();
        let weight = |p: &mut ModelParams, name: String, r: usize, c: usize, rng: &mut Rng| {
            p.insert(name, Matrix::from_fn(r, c, |_, _| rng.truncated_normal(INIT_STD)), true, true);
        };
        let bias = |p: &mut ModelParams, name: String, c: usize| {
            p.insert(name, Matrix::zeros(1, c), true, false);
        };
        let linear = |p: &mut ModelParams, name: &str, r: usize, c: usize, rng: &mut Rng| {
            weight(p, format!("{name}.w"), r, c, rng);
            bias(p, format!("{name}.b"), c);
        };
        let norm = |p: &mut ModelParams, name: &str, c: usize| {
            p.insert(format!("{name}.g"), Matrix::filled(1, c, 1.0), true, false);
            p.insert(format!("{name}.b"), Matrix::zeros(1, c), true, false);
        };
        let base = config.base_channels;
        match config.input {
            InputKind::Image { channels, .. } => {
                linear(&mut p, "patch.conv1", 9 * channels, base / 2, &mut rng);
                linear(&mut p, "patch.conv2", 9 * (base / 2), base, &mut rng);
            }
            InputKind::Sequence { len, dim } => {
                linear(&mut p, "embed", dim, base, &mut rng);
                if config.positional_embedding {
                    let table = Matrix::from_fn(len, base, |_, _| rng.truncated_normal(INIT_STD));
                    p.insert("embed.pos", table, true, false);
                }
            }
        }
        for (s, st) in stages.iter().enumerate() {
            let c = st.channels;
            if s > 0 {
                linear(&mut p, &format!("down.{s}"), 9 * stages[s - 1].channels, c, &mut rng);
            }
            for b in 0..st.blocks {
                let pre = block_prefix(s, b);
                norm(&mut p, &format!("{pre}.norm1"), c);
                let proj: &[&str] = match config.mechanism {
                    Mechanism::Set => &["v", "o"],
                    Mechanism::Dpsa => &["q", "k", "v", "o"],
                };
                for name in proj {
                    linear(&mut p, &format!("{pre}.attn.{name}"), c, c, &mut rng);
                }
                norm(&mut p, &format!("{pre}.norm2"), c);
                let hidden = c * config.mlp_ratio;
                linear(&mut p, &format!("{pre}.mlp.fc1"), c, hidden, &mut rng);
                linear(&mut p, &format!("{pre}.mlp.fc2"), hidden, c, &mut rng);
            }
        }
        let last = stages.last().map(|s| s.channels).unwrap_or(base);
        norm(&mut p, "norm", last);
        linear(&mut p, "head", last, config.num_classes, &mut rng);

        let positional = stages
            .iter()
            .map(|st| {
                if config.positional.enabled && config.mechanism == Mechanism::Set {
                    positional_matrix(st.tokens(), st.m, st.tau).map(|pen| Some(pen.matrix))
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;
        let layers = vec![None; layer_positions(&stages).len()];
        Ok(Self { config, params: p, layers, stages, positional })
    }

    pub fn stages(&self) -> &[StageShape] {
        &self.stages
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// True when every layer that needs anchors and references has them.
    pub fn is_fitted(&self) -> bool {
        self.config.mechanism == Mechanism::Dpsa || self.layers.iter().all(Option::is_some)
    }

    pub(crate) fn set_layer(&mut self, layer: usize, fit: FittedLayer) {
        self.layers[layer] = Some(fit);
    }

    /// Reference parameter name for `head` of attention layer `layer`.
    pub fn reference_name(&self, layer: usize, head: usize) -> String {
        let (s, b) = layer_positions(&self.stages)[layer];
        format!("{}.attn.refs.{head}", block_prefix(s, b))
    }

    pub fn check_input(&self, x: &Matrix) -> Result<()> {
        let want = match self.config.input {
            InputKind::Image { channels, height, width } => (height * width, channels),
            InputKind::Sequence { len, dim } => (len, dim),
        };
        if x.shape() != want {
            return Err(shape_err(format!("input is {:?}, model expects {:?}", x.shape(), want)));
        }
        Ok(())
    }

    /// Logits for a batch, one row per input.
    pub fn forward(&self, inputs: &[Matrix]) -> Result<Matrix> {
        let classes = self.config.num_classes;
        let mut out = Matrix::zeros(inputs.len(), classes);
        for (i, x) in inputs.iter().enumerate() {
            let logits = self.forward_one(x)?;
            out.row_mut(i).copy_from_slice(logits.data());
        }
        Ok(out)
    }

    /// `1 × classes` logits of a single input.
    pub fn forward_one(&self, x: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new(self, false);
        let out = g.logits(x)?;
        Ok(g.tape.value(out).clone())
    }

    /// Logits plus every head's transport plan.
    pub fn forward_traced(&self, x: &Matrix) -> Result<(Matrix, Vec<LayerTrace>)> {
        let mut g = Graph::new(self, false);
        g.trace = Some(Vec::new());
        let out = g.logits(x)?;
        Ok((g.tape.value(out).clone(), g.trace.take().unwrap_or_default()))
    }

    /// Two stride-2 3×3 convolutions: `(H·W)×C` pixels to a `H/4 × W/4` grid
    /// of `base_channels` tokens.
    pub fn patch_embed(&self, image: &Matrix) -> Result<TokenGrid> {
        let InputKind::Image { height, width, .. } = self.config.input else {
            return Err(Error::InvalidArgument("patch_embed needs an image model".into()));
        };
        self.check_input(image)?;
        let tokens = self.run(image, |g, x| g.patch_embed(x))?;
        Ok(TokenGrid { tokens, h: height / 4, w: width / 4 })
    }

    /// Strided convolution into `stage` (≥ 1): halves the grid, doubles channels.
    pub fn downsample(&self, stage: usize, grid: &TokenGrid) -> Result<TokenGrid> {
        if stage == 0 || stage >= self.stages.len() {
            return Err(Error::InvalidArgument(format!("no downsampler into stage {stage}")));
        }
        let prev = self.stages[stage - 1];
        if grid.h < 2 || grid.w < 2 || grid.tokens.shape() != (grid.h * grid.w, prev.channels) {
            return Err(shape_err(format!(
                "downsample into stage {stage}: grid {}x{} with {:?} tokens",
                grid.h,
                grid.w,
                grid.tokens.shape()
            )));
        }
        let geom = ConvGeom { h: grid.h, w: grid.w, c: prev.channels };
        let tokens = self.run(&grid.tokens, |g, x| g.downsample(stage, geom, x))?;
        Ok(TokenGrid { tokens, h: geom.out_h(), w: geom.out_w() })
    }

    /// Evaluates `f` on a constant-only tape and returns the value.
    fn run(&self, x: &Matrix, f: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<Matrix> {
        let mut g = Graph::new(self, false);
        let xv = g.tape.constant(x.clone());
        let out = f(&mut g, xv)?;
        Ok(g.tape.value(out).clone())
    }

    /// Fits the Nyström anchors and K-means references of every unfitted
    /// layer, in forward order, from the activations each layer actually sees.
    pub fn fit_features(&mut self, inputs: &[Matrix], seed: u64) -> Result<()> {
        if self.is_fitted() {
            return Ok(());
        }
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("fit_features needs at least one input".into()));
        }
        for x in inputs {
            self.check_input(x)?;
        }
        let mut idx = Rng::new(mix_seed(seed, 0)).sample_indices(inputs.len(), self.config.nystrom.fit_samples);
        idx.sort_unstable();
        let mut acts: Vec<Matrix> =
            idx.iter().map(|&i| self.run(&inputs[i], |g, x| g.embed_input(x))).collect::<Result<_>>()?;
        let positions = layer_positions(&self.stages);
        for (layer, &(s, b)) in positions.iter().enumerate() {
            if b == 0 && s > 0 {
                let prev = self.stages[s - 1];
                let geom = ConvGeom { h: prev.h, w: prev.w, c: prev.channels };
                acts = acts.iter().map(|a| self.run(a, |g, x| g.downsample(s, geom, x))).collect::<Result<_>>()?;
            }
            if self.layers[layer].is_none() {
                self.fit_layer(layer, s, b, &acts, mix_seed(seed, layer as u64 + 1))?;
            }
            if self.is_fitted() {
                break;
            }
            acts = acts.iter().map(|a| self.run(a, |g, x| g.block(layer, s, b, x))).collect::<Result<_>>()?;
        }
        Ok(())
    }

    fn fit_layer(&mut self, layer: usize, s: usize, b: usize, acts: &[Matrix], seed: u64) -> Result<()> {
        let pre = block_prefix(s, b);
        let normed: Vec<Matrix> = acts
            .iter()
            .map(|a| self.run(a, |g, x| g.affine_norm(x, &format!("{pre}.norm1"))))
            .collect::<Result<_>>()?;
        let refs: Vec<&Matrix> = normed.iter().collect();
        let mut rows = Matrix::vstack(&refs)?;
        let cfg = &self.config.nystrom;
        if rows.rows() > cfg.max_fit_rows {
            let mut keep = Rng::new(seed).sample_indices(rows.rows(), cfg.max_fit_rows);
            keep.sort_unstable();
            rows = rows.select_rows(&keep);
        }
        if cfg.normalize_inputs {
            rows = rows.normalize_rows(NORM_EPS);
        }
        let sigma = match cfg.bandwidth {
            Some(bw) => bw,
            None => median_bandwidth(&rows, 512, seed)?,
        };
        let k = cfg.k.min(rows.rows());
        let map = fit_nystrom(&rows, k, cfg.delta, KernelSpec::gaussian(sigma)?, seed)?;
        let vn = embed(&map, &rows)?.normalize_rows(NORM_EPS);
        let st = self.stages[s];
        for h in 0..st.heads {
            let km = kmeans(&vn, st.m, mix_seed(seed, 1000 + h as u64), 100)?;
            let name = self.reference_name(layer, h);
            self.params.insert(name, km.centroids, self.config.references.trainable, false);
        }
        self.set_layer(layer, FittedLayer::new(map));
        Ok(())
    }
}

/// Forward recorder: lazily turns parameters into tape leaves.
pub(crate) struct Graph<'m> {
    model: &'m SeTformer,
    pub(crate) tape: Tape,
    /// Leaf per parameter index, created on first use.
    pub(crate) leaves: Vec<Option<Var>>,
    grad: bool,
    trace: Option<Vec<LayerTrace>>,
}

impl<'m> Graph<'m> {
    /// With `grad`, trainable parameters become differentiable leaves.
    pub(crate) fn new(model: &'m SeTformer, grad: bool) -> Self {
        Self { model, tape: Tape::new(), leaves: vec![None; model.params.len()], grad, trace: None }
    }

    fn p(&mut self, name: &str) -> Result<Var> {
        let idx =
            self.model.params.index_of(name).ok_or_else(|| Error::NotFitted(format!("parameter {name} is missing")))?;
        if let Some(v) = self.leaves[idx] {
            return Ok(v);
        }
        let param = self.model.params.entry(idx);
        let v = if self.grad && param.trainable {
            self.tape.param(param.value.clone())
        } else {
            self.tape.constant(param.value.clone())
        };
        self.leaves[idx] = Some(v);
        Ok(v)
    }

    fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_row(y, b)
    }

    fn affine_norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let g = self.p(&format!("{name}.g"))?;
        let b = self.p(&format!("{name}.b"))?;
        let y = self.tape.layer_norm(x, LN_EPS);
        let y = self.tape.mul_row(y, g)?;
        self.tape.add_row(y, b)
    }

    fn conv(&mut self, x: Var, geom: ConvGeom, name: &str) -> Result<Var> {
        let cols = self.tape.im2col(x, geom)?;
        self.linear(cols, name)
    }

    fn patch_embed(&mut self, x: Var) -> Result<Var> {
        let InputKind::Image { channels, height, width } = self.model.config.input else {
            return Err(Error::InvalidArgument("patch_embed needs an image model".into()));
        };
        if height % 4 != 0 || width % 4 != 0 {
            return Err(shape_err(format!("image {height}x{width} not divisible by 4")));
        }
        let half = self.model.config.base_channels / 2;
        let a = self.conv(x, ConvGeom { h: height, w: width, c: channels }, "patch.conv1")?;
        let a = self.tape.gelu(a);
        self.conv(a, ConvGeom { h: height / 2, w: width / 2, c: half }, "patch.conv2")
    }

    fn downsample(&mut self, stage: usize, geom: ConvGeom, x: Var) -> Result<Var> {
        self.conv(x, geom, &format!("down.{stage}"))
    }

    fn embed_input(&mut self, x: Var) -> Result<Var> {
        match self.model.config.input {
            InputKind::Image { .. } => self.patch_embed(x),
            InputKind::Sequence { .. } => {
                let e = self.linear(x, "embed")?;
                if self.model.config.positional_embedding {
                    let pos = self.p("embed.pos")?;
                    self.tape.add(e, pos)
                } else {
                    Ok(e)
                }
            }
        }
    }

    fn block(&mut self, layer: usize, s: usize, b: usize, x: Var) -> Result<Var> {
        let pre = block_prefix(s, b);
        let h = self.affine_norm(x, &format!("{pre}.norm1"))?;
        let a = match self.model.config.mechanism {
            Mechanism::Set => self.set_attention(layer, s, &pre, h)?,
            Mechanism::Dpsa => self.dpsa_attention(s, &pre, h)?,
        };
        let x = self.tape.add(x, a)?;
        let h = self.affine_norm(x, &format!("{pre}.norm2"))?;
        let h = self.linear(h, &format!("{pre}.mlp.fc1"))?;
        let h = self.tape.gelu(h);
        let h = self.linear(h, &format!("{pre}.mlp.fc2"))?;
        self.tape.add(x, h)
    }

    /// `P_o(concat_h  n m T̃_h (T̃_hᵀ (H P_v)_h))` with the whole Sinkhorn
    /// solve unrolled on the tape.
    fn set_attention(&mut self, layer: usize, s: usize, pre: &str, h: Var) -> Result<Var> {
        let model = self.model;
        let fit = model.layers[layer]
            .as_ref()
            .ok_or_else(|| Error::NotFitted(format!("layer {layer} has no anchors or references")))?;
        let cfg = &model.config;
        let st = model.stages[s];
        let t = &mut self.tape;
        let n = t.value(h).rows();

        let xin = if cfg.nystrom.normalize_inputs { t.normalize_rows(h, NORM_EPS) } else { h };
        let z = t.constant(fit.map.anchors.clone());
        let zsq = t.constant(fit.anchor_sq.clone());
        let wh = t.constant(fit.map.whitener.clone());
        let sigma = fit.map.spec.sigma();
        let d2 = sq_dists(t, xin, z, zsq)?;
        let kx = t.scale(d2, -1.0 / (2.0 * sigma * sigma));
        let kx = t.exp(kx);
        let v = t.matmul(kx, wh)?;
        let vn = t.normalize_rows(v, NORM_EPS);

        let values = self.linear(h, &format!("{pre}.attn.v"))?;
        let dh = st.channels / st.heads;
        let mut heads = Vec::with_capacity(st.heads);
        for head in 0..st.heads {
            let y = self.p(&model.reference_name(layer, head))?;
            let t = &mut self.tape;
            let yn = t.normalize_rows(y, NORM_EPS);
            let m = t.value(yn).rows();
            let ysq = t.mul(yn, yn)?;
            let ysq = t.sum_rows(ysq);
            let ysq = t.transpose(ysq);
            let d2 = sq_dists(t, vn, yn, ysq)?;
            let kc = t.scale(d2, -0.5);
            let kc = t.exp(kc);
            let cost = match cfg.sinkhorn.cost_mode {
                CostMode::InducedSqDistance => {
                    let c = t.scale(kc, -2.0);
                    t.add_scalar(c, 2.0)
                }
                CostMode::NegativeSimilarity => {
                    let c = t.scale(kc, -1.0);
                    t.add_scalar(c, 1.0)
                }
            };
            let eps = st.epsilon;
            let la = vec![-(n as f64).ln(); n];
            let lb = vec![-(m as f64).ln(); m];
            let mut phi = t.constant(Matrix::zeros(1, m));
            let mut f = t.constant(Matrix::zeros(n, 1));
            for _ in 0..cfg.sinkhorn.iterations {
                f = t.sinkhorn_rows(cost, phi, &la, eps)?;
                phi = t.sinkhorn_cols(cost, f, &lb, eps)?;
            }
            let e = t.scale(cost, -1.0);
            let e = t.add_col(e, f)?;
            let e = t.add_row(e, phi)?;
            let e = t.scale(e, 1.0 / eps);
            let plan = t.exp(e);
            let weighted = match &model.positional[s] {
                Some(pen) => {
                    let pen = t.constant(pen.clone());
                    let w = t.mul(plan, pen)?;
                    if cfg.positional.renormalize {
                        let rs = t.sum_rows(w);
                        let rs = t.scale(rs, n as f64);
                        let inv = t.recip(rs);
                        t.mul_col(w, inv)?
                    } else {
                        w
                    }
                }
                None => plan,
            };
            if let Some(trace) = self.trace.as_mut() {
                trace.push(LayerTrace {
                    layer,
                    head,
                    plan: t.value(plan).clone(),
                    weighted: t.value(weighted).clone(),
                });
            }
            let vh = t.slice_cols(values, head * dh, dh)?;
            let pooled = t.matmul_tn(weighted, vh)?;
            let back = t.matmul(weighted, pooled)?;
            heads.push(t.scale(back, (n * m) as f64));
        }
        let mixed = if heads.len() == 1 { heads[0] } else { self.tape.concat_cols(&heads)? };
        self.linear(mixed, &format!("{pre}.attn.o"))
    }

    fn dpsa_attention(&mut self, s: usize, pre: &str, h: Var) -> Result<Var> {
        let st = self.model.stages[s];
        let q = self.linear(h, &format!("{pre}.attn.q"))?;
        let k = self.linear(h, &format!("{pre}.attn.k"))?;
        let v = self.linear(h, &format!("{pre}.attn.v"))?;
        let dh = st.channels / st.heads;
        let t = &mut self.tape;
        let mut heads = Vec::with_capacity(st.heads);
        for head in 0..st.heads {
            let (qh, kh, vh) = if st.heads == 1 {
                (q, k, v)
            } else {
                (t.slice_cols(q, head * dh, dh)?, t.slice_cols(k, head * dh, dh)?, t.slice_cols(v, head * dh, dh)?)
            };
            let sc = t.matmul_nt(qh, kh)?;
            let sc = t.scale(sc, 1.0 / (dh as f64).sqrt());
            let pr = t.softmax_rows(sc);
            heads.push(t.matmul(pr, vh)?);
        }
        let mixed = if heads.len() == 1 { heads[0] } else { self.tape.concat_cols(&heads)? };
        self.linear(mixed, &format!("{pre}.attn.o"))
    }

    /// Full network: `1 × classes` logits.
    pub(crate) fn logits(&mut self, x: &Matrix) -> Result<Var> {
        self.model.check_input(x)?;
        let model = self.model;
        let xv = self.tape.constant(x.clone());
        let mut cur = self.embed_input(xv)?;
        for (layer, &(s, b)) in layer_positions(&model.stages).iter().enumerate() {
            if b == 0 && s > 0 {
                let prev = model.stages[s - 1];
                cur = self.downsample(s, ConvGeom { h: prev.h, w: prev.w, c: prev.channels }, cur)?;
            }
            cur = self.block(layer, s, b, cur)?;
        }
        let h = self.affine_norm(cur, "norm")?;
        let n = self.tape.value(h).rows();
        let pooled = self.tape.sum_cols(h);
        let pooled = self.tape.scale(pooled, 1.0 / n as f64);
        self.linear(pooled, "head")
    }
}

/// `‖a_i‖² + ‖b_j‖² − 2⟨a_i, b_j⟩` with `b_sq` given as a `1 × rows(b)` row.
fn sq_dists(t: &mut Tape, a: Var, b: Var, b_sq: Var) -> Result<Var> {
    let asq = t.mul(a, a)?;
    let asq = t.sum_rows(asq);
    let cross = t.matmul_nt(a, b)?;
    let cross = t.scale(cross, -2.0);
    let d = t.add_col(cross, asq)?;
    t.add_row(d, b_sq)
}

#[cfg(test)]
mod tests;
