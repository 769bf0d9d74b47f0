//! Data generation through fitting, training and checkpointing.

use set_transport::attention::{
    implicit_attention, set_attention_tokenwise, Iterations, SeTLayer, SeTLayerParams, TransportSettings,
};
use set_transport::data::synth_needle;
use set_transport::kernels::KernelSpec;
use set_transport::model::{load_checkpoint, save_checkpoint, SeTformer, SeTformerConfig};
use set_transport::nystrom::{embed, fit_nystrom, fit_references};
use set_transport::train::{evaluate, metrics_csv, train_loop, LoopOptions, TrainingConfig};
use set_transport::{Matrix, Rng};

fn tiny_model(seed: u64) -> (SeTformer, set_transport::data::Dataset, set_transport::data::Dataset) {
    let data = synth_needle(120, 8, 4, seed).unwrap();
    let (train, test) = data.split_off(40).unwrap();
    let mut cfg = SeTformerConfig::sequence(8, 4, 2);
    cfg.base_channels = 8;
    cfg.m = vec![4];
    cfg.sinkhorn.iterations = 5;
    cfg.nystrom.k = 6;
    let mut model = SeTformer::build(cfg, seed).unwrap();
    model.fit_features(&train.inputs, seed).unwrap();
    (model, train, test)
}

#[test]
fn train_save_load_evaluates_identically() {
    let (mut model, train, test) = tiny_model(2);
    let cfg = TrainingConfig { steps: 12, batch_size: 8, eval_every: 2, ..Default::default() };
    let report = train_loop(&mut model, &train, Some(&test), &cfg, LoopOptions { seed: 2, threads: 2 }).unwrap();
    assert_eq!(report.step_losses.len(), 12);
    assert!(report.step_losses.iter().all(|l| l.is_finite()));
    assert!(metrics_csv(&report.metrics).lines().count() > 1);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.setf");
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(evaluate(&model, &test, 1).unwrap(), evaluate(&back, &test, 1).unwrap());
    assert_eq!(model.forward(&test.inputs).unwrap(), back.forward(&test.inputs).unwrap());
}

#[test]
fn reruns_are_bit_identical() {
    let run = || {
        let (mut model, train, test) = tiny_model(5);
        let cfg = TrainingConfig { steps: 6, batch_size: 8, ..Default::default() };
        let r = train_loop(&mut model, &train, Some(&test), &cfg, LoopOptions { seed: 5, threads: 3 }).unwrap();
        metrics_csv(&r.metrics)
    };
    assert_eq!(run(), run());
}

#[test]
fn fitted_layer_attention_is_a_convex_mixture() {
    let mut rng = Rng::new(11);
    let x = Matrix::from_fn(40, 6, |_, _| rng.normal());
    let map = fit_nystrom(&x, 8, 1e-6, KernelSpec::gaussian(1.0).unwrap(), 1).unwrap();
    let refs = fit_references(&embed(&map, &x).unwrap(), 5, 1, false).unwrap();
    let params = SeTLayerParams {
        value_proj: Matrix::identity(6),
        value_bias: vec![0.0; 6],
        out_proj: Matrix::identity(6),
        out_bias: vec![0.0; 6],
        references: vec![refs],
        transport: TransportSettings {
            epsilon: 0.2,
            iterations: Iterations::Converge { tol: 1e-9, max_iter: 5000 },
            ..Default::default()
        },
        normalize_inputs: false,
    };
    let layer = SeTLayer::new(params, map).unwrap();
    let out = set_attention_tokenwise(&x.select_rows(&(0..10).collect::<Vec<_>>()), &layer).unwrap();
    let a = implicit_attention(&out.alignments[0].weighted).unwrap();
    assert_eq!(a.shape(), (10, 10));
    assert!(a.min_value() >= 0.0);
    for s in a.row_sums() {
        assert!((s - 1.0).abs() < 1e-6, "{s}");
    }
}
