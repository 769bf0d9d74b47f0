use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::model::ModelParams;
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, weight_decay: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
    pub config: AdamWConfig,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, config: AdamWConfig) -> Self {
        let zeros = || params.entries().iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        Self { m: zeros(), v: zeros(), step: 0, config }
    }
}

/// One AdamW update at learning rate `lr`. Weight decay is decoupled and only
/// touches parameters flagged `decay`; `None` gradients count as zero.
pub fn adamw_step(
    state: &mut OptimizerState,
    params: &mut ModelParams,
    grads: &[Option<Matrix>],
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(shape_err(format!(
            "adamw: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let param = params.entry(i);
        if !param.trainable {
            continue;
        }
        let decay = if param.decay { c.weight_decay } else { 0.0 };
        if state.m[i].shape() != param.value.shape() || g.as_ref().is_some_and(|g| g.shape() != param.value.shape()) {
            return Err(shape_err(format!("adamw: shape mismatch for {}", param.name)));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = params.value_mut(i);
        for j in 0..p.len() {
            let gj = g.as_ref().map_or(0.0, |g| g.data()[j]);
            let mj = &mut m.data_mut()[j];
            *mj = c.beta1 * *mj + (1.0 - c.beta1) * gj;
            let vj = &mut v.data_mut()[j];
            *vj = c.beta2 * *vj + (1.0 - c.beta2) * gj * gj;
            let mhat = m.data()[j] / bc1;
            let vhat = v.data()[j] / bc2;
            let w = &mut p.data_mut()[j];
            *w -= lr * decay * *w;
            *w -= lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(())
}

/// Linear warm-up over the first `warmup_frac` of `total` steps, then cosine
/// decay to zero. `step` is 0-based.
pub fn lr_at(step: usize, total: usize, base: f64, warmup_frac: f64) -> f64 {
    let warm = ((total as f64 * warmup_frac).ceil() as usize).min(total);
    if step < warm {
        return base * (step + 1) as f64 / warm as f64;
    }
    let span = (total - warm).max(1) as f64;
    let progress = ((step - warm) as f64 / span).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: Matrix, decay: bool) -> ModelParams {
        let mut p = ModelParams::default();
        p.insert("w", value, true, decay);
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let w = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]);
        let mut p = single(w.clone(), true);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut st = OptimizerState::new(&p, cfg);
        adamw_step(&mut st, &mut p, &[Some(Matrix::zeros(2, 2))], 1e-3).unwrap();
        assert_eq!(p.entry(0).value, w);
    }

    #[test]
    fn first_step_closed_form() {
        let w = Matrix::from_rows(&[[1.0, -2.0, 0.0]]);
        let g = Matrix::from_rows(&[[0.3, -1e-3, 4.0]]);
        let mut p = single(w.clone(), true);
        let cfg = AdamWConfig::default();
        let mut st = OptimizerState::new(&p, cfg);
        let lr = 0.01;
        adamw_step(&mut st, &mut p, &[Some(g.clone())], lr).unwrap();
        for j in 0..3 {
            let (w0, gj) = (w.data()[j], g.data()[j]);
            // m̂ = g, v̂ = g² after bias correction
            let want = w0 * (1.0 - lr * cfg.weight_decay) - lr * gj / (gj.abs() + cfg.eps);
            assert!((p.entry(0).value.data()[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn convex_quadratic_decreases() {
        // f(w) = Σ a_j (w_j − c_j)²
        let a = [1.0, 4.0, 0.25];
        let c = [0.5, -1.0, 2.0];
        let f = |w: &Matrix| (0..3).map(|j| a[j] * (w.data()[j] - c[j]).powi(2)).sum::<f64>();
        let mut p = single(Matrix::zeros(1, 3), false);
        let mut st = OptimizerState::new(&p, AdamWConfig::default());
        let mut prev = f(&p.entry(0).value);
        for step in 0..100 {
            let w = &p.entry(0).value;
            let g = Matrix::from_fn(1, 3, |_, j| 2.0 * a[j] * (w.data()[j] - c[j]));
            adamw_step(&mut st, &mut p, &[Some(g)], lr_at(step, 100, 0.005, 0.05)).unwrap();
            let cur = f(&p.entry(0).value);
            if step >= 5 {
                assert!(cur < prev, "step {step}: {cur} >= {prev}");
            }
            prev = cur;
        }
    }

    #[test]
    fn schedule_shape() {
        let total = 100;
        assert!((lr_at(0, total, 1.0, 0.05) - 0.2).abs() < 1e-15);
        assert!((lr_at(4, total, 1.0, 0.05) - 1.0).abs() < 1e-15);
        assert!(lr_at(50, total, 1.0, 0.05) < lr_at(10, total, 1.0, 0.05));
        assert!(lr_at(99, total, 1.0, 0.05) < 1e-3);
        assert_eq!(lr_at(0, 10, 1.0, 0.0), 1.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = single(Matrix::zeros(2, 2), false);
        let mut st = OptimizerState::new(&p, AdamWConfig::default());
        let err = adamw_step(&mut st, &mut p, &[Some(Matrix::zeros(1, 2))], 1e-3).unwrap_err();
        assert_eq!(err.code(), "shape");
    }
}
