use super::config::{Mechanism, SeTformerConfig, StageShape};
use crate::data::InputKind;
use crate::error::Result;

/// Analytic multiply-add counts of one forward pass, split so the part that
/// scales with token count is visible on its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlopsEstimate {
    /// Attention layers, every term proportional to the stage token count
    /// for SeT (quadratic for softmax attention).
    pub attention: u64,
    /// Per-call reference normalization, independent of the token count.
    pub reference_prep: u64,
    /// Embedding, norms, MLPs, downsamplers and head.
    pub other: u64,
}

impl FlopsEstimate {
    pub fn total(&self) -> u64 {
        self.attention + self.reference_prep + self.other
    }
}

fn linear(n: u64, a: u64, b: u64) -> u64 {
    n * a * b + n * b
}

fn norm(n: u64, c: u64) -> u64 {
    4 * n * c
}

fn sq_dists(n: u64, d: u64, m: u64) -> u64 {
    2 * n * d + n * d * m + 3 * n * m
}

/// SeT attention layer on `n` tokens of width `c` with `k` anchors.
#[allow(clippy::too_many_arguments)]
pub fn set_attention_flops(
    n: u64,
    c: u64,
    k: u64,
    m: u64,
    heads: u64,
    iterations: u64,
    normalize_inputs: bool,
    positional: bool,
    renormalize: bool,
) -> u64 {
    let dh = c / heads;
    let mut total = 0;
    if normalize_inputs {
        total += n * c;
    }
    total += sq_dists(n, c, k) + 2 * n * k + n * k * k + n * k;
    total += linear(n, c, c);
    let mut head = sq_dists(n, k, m) + 4 * n * m;
    head += iterations * 2 * n * m + 5 * n * m;
    if positional {
        head += n * m;
        if renormalize {
            head += 2 * n * m + 2 * n;
        }
    }
    head += 2 * n * m * dh + n * dh;
    total += heads * head;
    total + linear(n, c, c)
}

/// Softmax attention layer with q/k/v/o projections.
pub fn dpsa_attention_flops(n: u64, c: u64, heads: u64) -> u64 {
    let dh = c / heads;
    4 * linear(n, c, c) + heads * (2 * n * n * dh + 2 * n * n)
}

fn mlp_block(n: u64, c: u64, ratio: u64) -> u64 {
    let hidden = c * ratio;
    2 * norm(n, c) + 2 * n * c + linear(n, c, hidden) + n * hidden + linear(n, hidden, c)
}

/// Forward multiply-adds of the model described by `config`, assuming the
/// configured anchor count `nystrom.k` (fitting may clamp it to fewer rows).
pub fn flops_estimate(config: &SeTformerConfig) -> Result<FlopsEstimate> {
    config.validate()?;
    let stages = config.stage_shapes()?;
    let mut est = FlopsEstimate::default();
    let base = config.base_channels as u64;
    match config.input {
        InputKind::Image { channels, height, width } => {
            let half = base / 2;
            let n1 = ((height / 2) * (width / 2)) as u64;
            let n2 = ((height / 4) * (width / 4)) as u64;
            est.other += linear(n1, 9 * channels as u64, half) + n1 * half;
            est.other += linear(n2, 9 * half, base);
        }
        InputKind::Sequence { len, dim } => {
            est.other += linear(len as u64, dim as u64, base);
            if config.positional_embedding {
                est.other += len as u64 * base;
            }
        }
    }
    let k = config.nystrom.k as u64;
    let mut prev: Option<StageShape> = None;
    for st in &stages {
        let n = st.tokens() as u64;
        let c = st.channels as u64;
        if let Some(p) = prev {
            est.other += linear(n, 9 * p.channels as u64, c);
        }
        for _ in 0..st.blocks {
            est.other += mlp_block(n, c, config.mlp_ratio as u64);
            match config.mechanism {
                Mechanism::Set => {
                    let m = st.m as u64;
                    let k = k.min((n * config.nystrom.fit_samples as u64).min(config.nystrom.max_fit_rows as u64));
                    est.attention += set_attention_flops(
                        n,
                        c,
                        k,
                        m,
                        st.heads as u64,
                        config.sinkhorn.iterations as u64,
                        config.nystrom.normalize_inputs,
                        config.positional.enabled,
                        config.positional.renormalize,
                    );
                    est.reference_prep += st.heads as u64 * 3 * m * k;
                }
                Mechanism::Dpsa => est.attention += dpsa_attention_flops(n, c, st.heads as u64),
            }
        }
        prev = Some(*st);
    }
    let last = prev.expect("validated configs have stages");
    let (n, c) = (last.tokens() as u64, last.channels as u64);
    est.other += norm(n, c) + n * c + c + linear(1, c, config.num_classes as u64);
    Ok(est)
}
