//! `set-transport train`: fit the kernel maps and references, train, and
//! write the checkpoint, metrics and effective config.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use set_transport::model::{save_checkpoint, SeTformer};
use set_transport::train::{metrics_csv, train_loop, LoopOptions, TrainReport};
use set_transport::Result;

use crate::config::RunConfig;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.setf";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.json";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub train_provenance: String,
    pub test_provenance: String,
    pub train_samples: usize,
    pub test_samples: usize,
    pub parameters: usize,
    pub steps: usize,
    pub final_test_loss: Option<f64>,
    pub final_test_accuracy: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub summary: TrainSummary,
    pub report: TrainReport,
    pub model: SeTformer,
    pub out_dir: PathBuf,
}

impl TrainOutcome {
    pub fn metrics_path(&self) -> PathBuf {
        self.out_dir.join(METRICS_FILE)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join(CHECKPOINT_FILE)
    }
}

pub(crate) fn write_effective(out_dir: &Path, json: &str) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(EFFECTIVE_CONFIG_FILE), json)?;
    Ok(())
}

/// Runs one training job into `cfg.out_dir`.
pub fn run(cfg: &RunConfig, threads: usize) -> Result<TrainOutcome> {
    cfg.validate()?;
    let cfg = cfg.effective()?;
    let out_dir = cfg.out_dir.clone();
    write_effective(&out_dir, &cfg.to_json())?;

    let (train, test) = cfg.data.load(cfg.seed)?;
    let mut model = SeTformer::build(cfg.model.clone(), cfg.seed)?;
    model.fit_features(&train.inputs, cfg.seed)?;
    let report = train_loop(&mut model, &train, Some(&test), &cfg.training, LoopOptions { seed: cfg.seed, threads })?;

    fs::write(out_dir.join(METRICS_FILE), metrics_csv(&report.metrics))?;
    save_checkpoint(&model, out_dir.join(CHECKPOINT_FILE))?;
    let summary = TrainSummary {
        train_provenance: train.provenance.clone(),
        test_provenance: test.provenance.clone(),
        train_samples: train.len(),
        test_samples: test.len(),
        parameters: model.params.num_scalars(),
        steps: cfg.training.steps,
        final_test_loss: report.final_test.map(|t| t.0),
        final_test_accuracy: report.final_test.map(|t| t.1),
    };
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    fs::write(out_dir.join(SUMMARY_FILE), json)?;
    Ok(TrainOutcome { summary, report, model, out_dir })
}
