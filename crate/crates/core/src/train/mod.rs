//! Gradients through the whole model, AdamW, the training loop and a
//! finite-difference gradient check.
//!
//! A batch is evaluated one sample per tape. Workers may compute samples in
//! parallel, but per-sample gradients are always summed in sample order, so
//! results do not depend on the thread count.

mod optim;
pub mod tape;

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use optim::{adamw_step, lr_at, AdamWConfig, OptimizerState};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Graph, SeTformer};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Loss {
    pub label_smoothing: f64,
    /// Multiplies the loss (and so every gradient).
    pub scale: f64,
}

impl Default for Loss {
    fn default() -> Self {
        Self { label_smoothing: 0.0, scale: 1.0 }
    }
}

/// Batch gradients aligned with `model.params`; `None` for parameters that
/// are frozen or did not take part in the forward pass.
#[derive(Debug, Clone)]
pub struct BatchGrad {
    /// Mean unscaled loss over the batch.
    pub loss: f64,
    pub correct: usize,
    pub grads: Vec<Option<Matrix>>,
}

struct SampleGrad {
    loss: f64,
    correct: bool,
    grads: Vec<Option<Matrix>>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_grad(model: &SeTformer, x: &Matrix, label: usize, loss: &Loss, weight: f64) -> Result<SampleGrad> {
    let mut g = Graph::new(model, true);
    let logits = g.logits(x)?;
    let correct = argmax(g.tape.value(logits).data()) == label;
    let l = g.tape.cross_entropy(logits, &[label], loss.label_smoothing)?;
    let value = g.tape.scalar(l);
    let root = g.tape.scale(l, loss.scale * weight);
    let mut adj = g.tape.backward(root)?;
    let grads = g
        .leaves
        .iter()
        .enumerate()
        .map(|(i, leaf)| match leaf {
            Some(v) if model.params.entry(i).trainable => adj.take(*v),
            _ => None,
        })
        .collect();
    Ok(SampleGrad { loss: value, correct, grads })
}

/// Runs `f` over `0..n`, splitting contiguous index ranges across up to
/// `threads` workers, and returns results in index order.
fn parallel_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = threads.max(1).min(n.max(1));
    if threads == 1 {
        return (0..n).map(&f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let range = (t * chunk).min(n)..((t + 1) * chunk).min(n);
                s.spawn(move || range.map(f).collect::<Result<Vec<T>>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn accumulate(total: &mut [Option<Matrix>], grads: Vec<Option<Matrix>>) -> Result<()> {
    for (t, g) in total.iter_mut().zip(grads) {
        match (t.as_mut(), g) {
            (Some(t), Some(g)) => t.add_assign(&g)?,
            (None, Some(g)) => *t = Some(g),
            (_, None) => {}
        }
    }
    Ok(())
}

/// Mean-loss gradients of a batch. The per-sample loss is weighted by
/// `1 / batch` so the result is the gradient of the batch mean.
pub fn grad(model: &SeTformer, inputs: &[&Matrix], labels: &[usize], loss: &Loss, threads: usize) -> Result<BatchGrad> {
    if inputs.len() != labels.len() || inputs.is_empty() {
        return Err(Error::InvalidArgument(format!("{} inputs, {} labels", inputs.len(), labels.len())));
    }
    if !model.is_fitted() {
        return Err(Error::NotFitted("call fit_features before computing gradients".into()));
    }
    let w = 1.0 / inputs.len() as f64;
    let mut total: Vec<Option<Matrix>> = vec![None; model.params.len()];
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let mut take = |s: SampleGrad| -> Result<()> {
        loss_sum += s.loss;
        correct += s.correct as usize;
        accumulate(&mut total, s.grads)
    };
    if threads <= 1 {
        for (x, &y) in inputs.iter().zip(labels) {
            take(sample_grad(model, x, y, loss, w)?)?;
        }
    } else {
        let samples = parallel_map(inputs.len(), threads, |i| sample_grad(model, inputs[i], labels[i], loss, w))?;
        for s in samples {
            take(s)?;
        }
    }
    for (i, g) in total.iter().enumerate() {
        if let Some(g) = g {
            if !g.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for {}", model.params.entry(i).name)));
            }
        }
    }
    Ok(BatchGrad { loss: loss_sum * w, correct, grads: total })
}

/// Mean cross-entropy and accuracy over a dataset.
pub fn evaluate(model: &SeTformer, data: &Dataset, threads: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty dataset".into()));
    }
    let per = parallel_map(data.len(), threads, |i| {
        let logits = model.forward_one(&data.inputs[i])?;
        let row = logits.data();
        let y = data.labels[i];
        let lse = crate::numerics::logsumexp(row);
        Ok((lse - row[y], argmax(row) == y))
    })?;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / data.len() as f64;
    let acc = per.iter().filter(|p| p.1).count() as f64 / data.len() as f64;
    Ok((loss, acc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub warmup_frac: f64,
    pub label_smoothing: f64,
    /// Evaluate the test split every this many epochs (and after the last step).
    pub eval_every: usize,
    /// Fill the `seconds` column with wall-clock time instead of zeros.
    pub record_time: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            warmup_frac: 0.05,
            label_smoothing: 0.0,
            eval_every: 1,
            record_time: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("/training: steps and batch_size must be >= 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(o.weight_decay >= 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2)
        {
            return Err(Error::Config("/training/optimizer: lr > 0, weight_decay >= 0, betas in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("/training: warmup_frac in [0, 1], label_smoothing in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "step,epoch,split,loss,accuracy,lr,seconds";

/// CSV with a header row and LF line endings.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:?},{:?},{:?},{:?}",
            r.step, r.epoch, r.split, r.loss, r.accuracy, r.lr, r.seconds
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub metrics: Vec<MetricRow>,
    /// Training loss of every step, in order.
    pub step_losses: Vec<f64>,
    pub final_test: Option<(f64, f64)>,
}

/// Runtime knobs that do not change results.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoopOptions {
    pub seed: u64,
    pub threads: usize,
}

/// Minibatch AdamW with linear warm-up and cosine decay. Each epoch visits a
/// seeded permutation of the training set; one `train` row is logged per
/// epoch and `test` rows every `eval_every` epochs and at the end.
pub fn train_loop(
    model: &mut SeTformer,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainingConfig,
    opts: LoopOptions,
) -> Result<TrainReport> {
    cfg.validate()?;
    train.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if !model.is_fitted() {
        return Err(Error::NotFitted("call fit_features before training".into()));
    }
    let start = Instant::now();
    let seconds = |start: &Instant| {
        if cfg.record_time {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        }
    };
    let loss = Loss { label_smoothing: cfg.label_smoothing, scale: 1.0 };
    let mut state = OptimizerState::new(&model.params, cfg.optimizer);
    let n = train.len();
    let bs = cfg.batch_size.min(n);
    let per_epoch = n.div_ceil(bs);
    let root = Rng::new(opts.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut metrics = Vec::new();
    let mut step_losses = Vec::with_capacity(cfg.steps);
    let (mut ep_loss, mut ep_correct, mut ep_seen) = (0.0, 0usize, 0usize);
    let mut final_test = None;
    for step in 0..cfg.steps {
        let epoch = step / per_epoch;
        let pos = step % per_epoch;
        if pos == 0 {
            order = (0..n).collect();
            root.split(epoch as u64).shuffle(&mut order);
        }
        let idx = &order[pos * bs..((pos + 1) * bs).min(n)];
        let inputs: Vec<&Matrix> = idx.iter().map(|&i| &train.inputs[i]).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let bg = grad(model, &inputs, &labels, &loss, opts.threads)?;
        let lr = lr_at(step, cfg.steps, cfg.optimizer.lr, cfg.warmup_frac);
        adamw_step(&mut state, &mut model.params, &bg.grads, lr)?;
        step_losses.push(bg.loss);
        ep_loss += bg.loss * idx.len() as f64;
        ep_correct += bg.correct;
        ep_seen += idx.len();

        let last = step + 1 == cfg.steps;
        if pos + 1 == per_epoch || last {
            metrics.push(MetricRow {
                step: step + 1,
                epoch: epoch + 1,
                split: "train",
                loss: ep_loss / ep_seen as f64,
                accuracy: ep_correct as f64 / ep_seen as f64,
                lr,
                seconds: seconds(&start),
            });
            (ep_loss, ep_correct, ep_seen) = (0.0, 0, 0);
            if let Some(test) = test {
                if last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) {
                    let (l, a) = evaluate(model, test, opts.threads)?;
                    metrics.push(MetricRow {
                        step: step + 1,
                        epoch: epoch + 1,
                        split: "test",
                        loss: l,
                        accuracy: a,
                        lr,
                        seconds: seconds(&start),
                    });
                    if last {
                        final_test = Some((l, a));
                    }
                }
            }
        }
    }
    model.params.ensure_finite()?;
    Ok(TrainReport { metrics, step_losses, final_test })
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(parameter, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares tape gradients of the batch-mean loss with central differences
/// (step `h`) at `coords` trainable coordinates drawn uniformly with `seed`.
pub fn gradient_check(
    model: &SeTformer,
    inputs: &[&Matrix],
    labels: &[usize],
    coords: usize,
    h: f64,
    floor: f64,
    seed: u64,
) -> Result<GradCheck> {
    let loss = Loss::default();
    let analytic = grad(model, inputs, labels, &loss, 1)?;
    let trainable: Vec<(usize, usize)> = model
        .params
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(i, p)| (0..p.value.len()).map(move |j| (i, j)))
        .collect();
    let mut rng = Rng::new(seed);
    let picks = rng.sample_indices(trainable.len(), coords);
    let eval = |m: &SeTformer| -> Result<f64> {
        let mut total = 0.0;
        for (x, &y) in inputs.iter().zip(labels) {
            let row = m.forward_one(x)?;
            total += crate::numerics::logsumexp(row.data()) - row.data()[y];
        }
        Ok(total / inputs.len() as f64)
    };
    let mut probe = model.clone();
    let mut report = GradCheck { checked: 0, max_rel_error: 0.0, worst: None };
    for k in picks {
        let (pi, j) = trainable[k];
        let orig = probe.params.entry(pi).value.data()[j];
        probe.params.value_mut(pi).data_mut()[j] = orig + h;
        let up = eval(&probe)?;
        probe.params.value_mut(pi).data_mut()[j] = orig - h;
        let down = eval(&probe)?;
        probe.params.value_mut(pi).data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.grads[pi].as_ref().map_or(0.0, |g| g.data()[j]);
        let err = relative_error(a, numeric, floor);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((model.params.entry(pi).name.clone(), j, a, numeric));
        }
    }
    Ok(report)
}
