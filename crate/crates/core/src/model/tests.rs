use super::*;
use crate::numerics::count_multiply_adds;

fn small_image(blocks: Vec<usize>, size: usize) -> SeTformerConfig {
    SeTformerConfig {
        variant: "custom".into(),
        blocks: Some(blocks),
        base_channels: 8,
        m: vec![4],
        input: InputKind::Image { channels: 1, height: size, width: size },
        num_classes: 10,
        sinkhorn: SinkhornSection { iterations: 5, ..Default::default() },
        nystrom: NystromSection { k: 8, fit_samples: 16, ..Default::default() },
        ..Default::default()
    }
}

fn random_images(n: usize, size: usize, channels: usize, seed: u64) -> Vec<Matrix> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| Matrix::from_fn(size * size, channels, |_, _| rng.uniform())).collect()
}

fn seq_model(len: usize, m: usize, seed: u64) -> (SeTformer, Vec<Matrix>) {
    let mut cfg = SeTformerConfig::sequence(len, 6, 3);
    cfg.base_channels = 8;
    cfg.m = vec![m];
    cfg.sinkhorn.iterations = 4;
    cfg.nystrom.k = 6;
    let mut model = SeTformer::build(cfg, seed).unwrap();
    let mut rng = Rng::new(seed + 1);
    let xs: Vec<Matrix> = (0..6).map(|_| Matrix::from_fn(len, 6, |_, _| rng.normal())).collect();
    model.fit_features(&xs, 3).unwrap();
    (model, xs)
}

#[test]
fn build_is_deterministic() {
    let a = SeTformer::build(SeTformerConfig::default(), 7).unwrap();
    let b = SeTformer::build(SeTformerConfig::default(), 7).unwrap();
    let c = SeTformer::build(SeTformerConfig::default(), 8).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
    assert_eq!(a.num_layers(), 18);
    let w = &a.params.get("stages.0.blocks.0.attn.v.w").unwrap().value;
    assert!(w.data().iter().all(|v| v.abs() <= 0.04));
    assert!(a.params.get("stages.0.blocks.0.attn.v.b").unwrap().value.data().iter().all(|&v| v == 0.0));
    assert!(a.params.get("norm.g").unwrap().value.data().iter().all(|&v| v == 1.0));
}

#[test]
fn patch_embed_quarter_resolution() {
    let cfg = SeTformerConfig { input: InputKind::Image { channels: 3, height: 32, width: 32 }, ..Default::default() };
    let model = SeTformer::build(cfg, 0).unwrap();
    let img = random_images(1, 32, 3, 1).pop().unwrap();
    let g = model.patch_embed(&img).unwrap();
    assert_eq!((g.h, g.w, g.tokens.cols()), (8, 8, 48));

    let cfg = SeTformerConfig {
        blocks: Some(vec![1]),
        variant: "custom".into(),
        input: InputKind::Image { channels: 3, height: 224, width: 224 },
        ..Default::default()
    };
    let model = SeTformer::build(cfg, 0).unwrap();
    let g = model.patch_embed(&Matrix::zeros(224 * 224, 3)).unwrap();
    assert_eq!((g.h, g.w, g.tokens.cols()), (56, 56, 48));
    // zero bias at init, GELU(0) = 0
    assert!(g.tokens.data().iter().all(|&v| v == 0.0));
    assert_eq!(model.patch_embed(&Matrix::zeros(10, 3)).unwrap_err().code(), "shape");
}

#[test]
fn downsample_halves_and_doubles() {
    let model = SeTformer::build(SeTformerConfig::default(), 0).unwrap();
    let img = random_images(1, 32, 3, 2).pop().unwrap();
    let mut g = model.patch_embed(&img).unwrap();
    let mut res = vec![g.h];
    for s in 1..4 {
        g = model.downsample(s, &g).unwrap();
        res.push(g.h);
    }
    assert_eq!(res, vec![8, 4, 2, 1]);
    assert_eq!(g.tokens.cols(), 384);
    let zero = TokenGrid { tokens: Matrix::zeros(64, 48), h: 8, w: 8 };
    let out = model.downsample(1, &zero).unwrap();
    assert_eq!((out.h, out.w, out.tokens.cols()), (4, 4, 96));
    assert!(out.tokens.data().iter().all(|&v| v == 0.0));
    assert_eq!(
        model.downsample(1, &TokenGrid { tokens: Matrix::zeros(1, 48), h: 1, w: 1 }).unwrap_err().code(),
        "shape"
    );
}

#[test]
fn forward_requires_fit_and_is_per_sample() {
    let mut model = SeTformer::build(small_image(vec![1, 1], 16), 3).unwrap();
    let xs = random_images(4, 16, 1, 4);
    assert_eq!(model.forward(&xs).unwrap_err().code(), "not-fitted");
    model.fit_features(&xs, 9).unwrap();
    assert!(model.is_fitted());
    let logits = model.forward(&xs[..2]).unwrap();
    assert_eq!(logits.shape(), (2, 10));
    assert!(logits.is_finite());
    let dup = model.forward(&[xs[1].clone(), xs[1].clone()]).unwrap();
    assert_eq!(dup.row(0), dup.row(1));
    assert_eq!(dup.row(0), logits.row(1));
    // batch order does not change per-sample logits
    let rev = model.forward(&[xs[1].clone(), xs[0].clone()]).unwrap();
    assert_eq!(rev.row(1), logits.row(0));
}

#[test]
fn fitted_layers_have_expected_shapes() {
    let (model, _) = seq_model(10, 4, 1);
    let fit = model.layers[0].as_ref().unwrap();
    assert_eq!(fit.map.anchors.shape(), (6, 8));
    assert_eq!(fit.map.whitener.shape(), (6, 6));
    let refs = &model.params.get(&model.reference_name(0, 0)).unwrap().value;
    assert_eq!(refs.shape(), (4, 6));
}

#[test]
fn m_is_clamped_to_tokens() {
    let (model, xs) = seq_model(5, 64, 2);
    assert_eq!(model.stages()[0].m, 5);
    assert!(model.forward_one(&xs[0]).unwrap().is_finite());
}

#[test]
fn traced_plans_have_uniform_marginals() {
    let (mut model, xs) = seq_model(9, 4, 3);
    model.config.sinkhorn.iterations = 200;
    let (_, traces) = model.forward_traced(&xs[0]).unwrap();
    assert_eq!(traces.len(), 1);
    let t = &traces[0];
    for r in t.plan.row_sums() {
        assert!((r - 1.0 / 9.0).abs() < 1e-6);
    }
    for c in t.plan.col_sums() {
        assert!((c - 0.25).abs() < 1e-6);
    }
    assert!(t.weighted.min_value() >= 0.0);
}

#[test]
fn random_model_is_at_chance() {
    let mut model = SeTformer::build(small_image(vec![1], 8), 11).unwrap();
    let xs = random_images(200, 8, 1, 12);
    model.fit_features(&xs, 1).unwrap();
    let logits = model.forward(&xs).unwrap();
    let correct = (0..200)
        .filter(|&i| {
            let row = logits.row(i);
            let pred = (0..10).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            pred == i % 10
        })
        .count();
    let acc = correct as f64 / 200.0;
    assert!((acc - 0.1).abs() <= 0.05, "accuracy {acc}");
}

#[test]
fn flops_estimate_matches_instrumentation() {
    for mech in [Mechanism::Set, Mechanism::Dpsa] {
        let mut cfg = small_image(vec![1], 16);
        cfg.mechanism = mech;
        let mut model = SeTformer::build(cfg.clone(), 0).unwrap();
        let xs = random_images(4, 16, 1, 5);
        model.fit_features(&xs, 0).unwrap();
        let (_, counted) = count_multiply_adds(|| model.forward_one(&xs[0]).unwrap());
        let est = flops_estimate(&cfg).unwrap().total();
        let rel = (est as f64 - counted as f64).abs() / counted as f64;
        assert!(rel <= 0.05, "{mech:?}: estimate {est}, counted {counted}");
    }
}

#[test]
fn flops_attention_term_scales_with_tokens() {
    let at = |len: usize, mech: Mechanism| {
        let mut cfg = SeTformerConfig::sequence(len, 8, 2);
        cfg.m = vec![8];
        cfg.mechanism = mech;
        flops_estimate(&cfg).unwrap().attention
    };
    assert_eq!(at(64, Mechanism::Set), 2 * at(32, Mechanism::Set));
    // quadratic once n dominates the projection width
    let (a, b) = (at(512, Mechanism::Dpsa), at(1024, Mechanism::Dpsa));
    assert!(b > 3 * a && b < 4 * a);
    let mut cfg = SeTformerConfig::default();
    cfg.m = vec![0];
    assert!(flops_estimate(&cfg).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (model, xs) = seq_model(7, 3, 4);
    let mut buf = Vec::new();
    write_checkpoint(&model, &mut buf).unwrap();
    let back = read_checkpoint(&mut buf.as_slice()).unwrap();
    assert_eq!(back.params, model.params);
    assert_eq!(back.layers, model.layers);
    assert_eq!(back.config, model.config);
    let a = model.forward_one(&xs[0]).unwrap();
    let b = back.forward_one(&xs[0]).unwrap();
    assert_eq!(a.data(), b.data());
    let mut again = Vec::new();
    write_checkpoint(&back, &mut again).unwrap();
    assert_eq!(buf, again);

    let err = read_checkpoint(&mut &buf[..buf.len() - 3]).unwrap_err();
    assert_eq!(err.code(), "format");
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert_eq!(read_checkpoint(&mut bad.as_slice()).unwrap_err().code(), "format");
}

#[test]
fn dpsa_models_need_no_fit() {
    let mut cfg = SeTformerConfig::sequence(6, 4, 2);
    cfg.mechanism = Mechanism::Dpsa;
    cfg.heads = vec![2];
    let model = SeTformer::build(cfg, 0).unwrap();
    assert!(model.is_fitted());
    let x = Matrix::from_fn(6, 4, |i, j| (i + j) as f64 * 0.1);
    assert!(model.forward_one(&x).unwrap().is_finite());
}
