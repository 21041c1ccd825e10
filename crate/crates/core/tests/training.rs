mod common;

use common::{blobs, near_chance, shuffled_labels, toy_config, two_gaussians};
use hff_core::config::{FfAggregation, Mode, TrainConfig};
use hff_core::data::{gaussian_blobs, LabeledDataset};
use hff_core::layers::ProtoSet;
use hff_core::model::{AnyNetwork, Network};
use hff_core::objectives::LossKind;
use hff_core::train::{metrics_csv, prepare_splits, train};
use hff_core::HffError;

#[test]
fn one_layer_separates_two_gaussians() {
    let mut cfg = toy_config("16", 50);
    cfg.mode = Mode::Greedy;
    let (tr, va, _) = two_gaussians(&cfg);
    assert_eq!(tr.len() + va.len(), 200);
    let out = train(&cfg, &tr, &va).unwrap();
    assert!(out.reports.iter().any(|r| r.val_acc == 1.0), "never reached 100%: {}", metrics_csv(&out.reports));
}

#[test]
fn greedy_freezes_finished_layers() {
    let mut cfg = toy_config("16-16-16", 7);
    cfg.mode = Mode::Greedy;
    let (tr, va, _) = blobs(&cfg, 40, 4, 8, 0.2);
    let out = train(&cfg, &tr, &va).unwrap();
    assert_eq!(cfg.greedy_schedule(), [2, 2, 3]);
    let layers: Vec<usize> = out.reports.iter().map(|r| r.layer).collect();
    assert_eq!(layers, [0, 0, 1, 1, 2, 2, 2]);
    for l in 0..3 {
        let last_own = out.reports.iter().rposition(|r| r.layer == l).unwrap();
        let snapshot = out.reports[last_own].checksums[l];
        for r in &out.reports[last_own..] {
            assert_eq!(r.checksums[l], snapshot, "layer {l} moved after its turn");
        }
        let first_own = out.reports.iter().position(|r| r.layer == l).unwrap();
        for r in &out.reports[..first_own] {
            assert_eq!(r.checksums[l], out.reports[0].checksums[l], "layer {l} moved before its turn");
        }
    }
    assert_eq!(out.model.network.checksum(Some(0)), out.reports[1].checksums[0]);
}

#[test]
fn modes_coincide_for_one_layer() {
    let mut greedy = toy_config("12", 6);
    greedy.mode = Mode::Greedy;
    let mut local = greedy.clone();
    local.mode = Mode::PerBatchLocal;
    let (tr, va, _) = blobs(&greedy, 30, 3, 6, 0.2);
    let a = train(&greedy, &tr, &va).unwrap();
    let b = train(&local, &tr, &va).unwrap();
    assert_eq!(a.reports, b.reports);
    assert_eq!(a.model.network, b.model.network);
}

#[test]
fn greedy_and_per_batch_local_agree_on_toy_set() {
    let mut greedy = toy_config("16-16", 40);
    greedy.mode = Mode::Greedy;
    let mut local = greedy.clone();
    local.mode = Mode::PerBatchLocal;
    let (tr, va, te) = two_gaussians(&greedy);
    let a = train(&greedy, &tr, &va).unwrap().model.evaluate(&te).unwrap().accuracy;
    let b = train(&local, &tr, &va).unwrap().model.evaluate(&te).unwrap().accuracy;
    assert!((a - b).abs() <= 0.02, "greedy {a}, per-batch-local {b}");
}

#[test]
fn layer_losses_do_not_increase_on_separable_set() {
    for mode in [Mode::Greedy, Mode::PerBatchLocal] {
        let mut cfg = toy_config("16-16", 20);
        cfg.mode = mode;
        cfg.lr = 1e-3;
        let (tr, va, _) = two_gaussians(&cfg);
        let out = train(&cfg, &tr, &va).unwrap();
        for l in 0..2 {
            let losses: Vec<f64> = out.reports.iter().filter(|r| r.layer == l).map(|r| r.loss).collect();
            for w in losses.windows(2) {
                assert!(w[1] <= w[0] + 1e-3, "{mode:?} layer {l}: {losses:?}");
            }
        }
    }
}

#[test]
fn training_is_deterministic() {
    let cfg = toy_config("16-8", 4);
    let (tr, va, _) = blobs(&cfg, 30, 3, 6, 0.2);
    let a = train(&cfg, &tr, &va).unwrap();
    let b = train(&cfg, &tr, &va).unwrap();
    assert_eq!(metrics_csv(&a.reports), metrics_csv(&b.reports));
    assert_eq!(a.model.network.checksum(None), b.model.network.checksum(None));
    let mut other = cfg.clone();
    other.seed += 1;
    let c = train(&other, &tr, &va).unwrap();
    assert_ne!(a.model.network.checksum(None), c.model.network.checksum(None));
}

#[test]
fn prototypes_stay_on_sphere_every_epoch() {
    let mut cfg = toy_config("16-16", 6);
    cfg.protos_per_class = 3;
    let (tr, va, _) = blobs(&cfg, 30, 4, 8, 0.3);
    let out = train(&cfg, &tr, &va).unwrap();
    for r in &out.reports {
        assert!(r.proto_norm_error <= 1e-6, "epoch {}: {}", r.epoch, r.proto_norm_error);
    }
}

#[test]
fn early_stop_records_the_epoch_that_completes_the_streak() {
    let mut cfg = toy_config("16", 30);
    cfg.target_acc = Some(0.99);
    cfg.patience = 2;
    let (tr, va, _) = two_gaussians(&cfg);
    let out = train(&cfg, &tr, &va).unwrap();
    let hit = out.epochs_to_target.expect("target reached");
    assert_eq!(out.reports.last().unwrap().epoch, hit);
    let accs: Vec<f64> = out.reports.iter().map(|r| r.val_acc).collect();
    assert!(accs[hit - 2] >= 0.99 && accs[hit - 1] >= 0.99);
    assert!(hit == 2 || accs[hit - 3] < 0.99);
    assert!(out.model.metrics.contains(&format!("epochs_to_target = {hit}")));
}

#[test]
fn untrained_network_is_at_chance() {
    let cfg = toy_config("32-16", 1);
    let (_, _, te) = blobs(&cfg, 400, 10, 16, 0.2);
    let te = shuffled_labels(te, 3);
    for seed in 0..3 {
        let mut cfg = cfg.clone();
        cfg.seed = seed;
        let net = AnyNetwork::F32(Network::build(&cfg, &[16], 10).unwrap());
        let report = net.evaluate(&te, ProtoSet::Ema, 1).unwrap();
        for &acc in &report.per_layer {
            assert!(near_chance(acc, te.len(), 10, 4.0), "seed {seed}: {acc}");
        }
    }
}

#[test]
fn evaluate_is_pure_and_thread_independent() {
    let cfg = toy_config("16-8", 3);
    let (tr, va, te) = blobs(&cfg, 60, 4, 8, 0.3);
    let model = train(&cfg, &tr, &va).unwrap().model;
    let before = model.network.checksum(None);
    let a = model.network.evaluate(&te, ProtoSet::Ema, 1).unwrap();
    let b = model.network.evaluate(&te, ProtoSet::Ema, 1).unwrap();
    let c = model.network.evaluate(&te, ProtoSet::Ema, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_eq!(model.network.checksum(None), before);
    assert_eq!(a.accuracy, *a.per_layer.last().unwrap());
}

#[test]
fn f64_precision_trains_too() {
    let mut cfg = toy_config("16", 20);
    cfg.set("precision", "f64").unwrap();
    let (tr, va, te) = two_gaussians(&cfg);
    let model = train(&cfg, &tr, &va).unwrap().model;
    assert!(matches!(model.network, AnyNetwork::F64(_)));
    assert!(model.evaluate(&te).unwrap().accuracy >= 0.99);
}

#[test]
fn cross_entropy_and_pre_placement_learn() {
    for (key, value) in [("loss_kind", "ce"), ("loss_placement", "pre"), ("activation", "tanh")] {
        let mut cfg = toy_config("16-16", 10);
        cfg.set(key, value).unwrap();
        let (tr, va, te) = blobs(&cfg, 60, 4, 8, 0.2);
        let acc = train(&cfg, &tr, &va).unwrap().model.evaluate(&te).unwrap().accuracy;
        assert!(acc >= 0.9, "{key} = {value}: {acc}");
    }
}

#[test]
fn divergence_names_layer_and_epoch() {
    let mut cfg = toy_config("8", 3);
    cfg.lr = 1e300;
    cfg.set("scale_input", "true").unwrap();
    cfg.set("scale_sims", "true").unwrap();
    let (tr, va, _) = two_gaussians(&cfg);
    match train(&cfg, &tr, &va) {
        Err(HffError::Divergence(msg)) => assert!(msg.contains("layer 0") && msg.contains("epoch"), "{msg}"),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.reports.len())),
    }
}

/// `2 x 1 x 8 x 8` images: class 0 lights the top half, class 1 the bottom.
fn halves(n: usize, seed: u64) -> LabeledDataset {
    let mut ds = gaussian_blobs(n / 2, 2, 64, 0.15, seed);
    for (i, row) in ds.images.data_mut().chunks_mut(64).enumerate() {
        let y = ds.labels[i];
        for (p, v) in row.iter_mut().enumerate() {
            let top = p < 32;
            *v = if top == (y == 0) { (*v + 0.5).min(1.0) } else { *v * 0.3 };
        }
    }
    ds.unflatten(1, 8, 8).unwrap()
}

#[test]
fn conv_layers_learn_spatial_classes() {
    for mode in [Mode::Greedy, Mode::PerBatchLocal] {
        let mut cfg = TrainConfig::preset("mnist-cnn").unwrap();
        cfg.set("arch", "c4a6-c4").unwrap();
        cfg.epochs = 6;
        cfg.lr = 1e-2;
        cfg.batch_size = 16;
        cfg.mode = mode;
        cfg.record_seconds = false;
        let (tr, va, te) = prepare_splits(&cfg, halves(200, 1), halves(100, 2)).unwrap();
        let out = train(&cfg, &tr, &va).unwrap();
        let acc = out.model.evaluate(&te).unwrap().accuracy;
        assert!(acc >= 0.95, "{mode:?}: {acc}");
        assert!(out.reports.iter().all(|r| r.proto_norm_error <= 1e-6));
    }
}

fn ff_config(arch: &str, epochs: usize) -> TrainConfig {
    let mut cfg = toy_config(arch, epochs);
    cfg.loss_kind = LossKind::Ff;
    cfg.set("scale_input", "false").unwrap();
    cfg.set("scale_sims", "false").unwrap();
    cfg
}

/// Blobs mirrored so the class signal sits past the label slots FF overwrites.
fn ff_blobs(cfg: &TrainConfig) -> (LabeledDataset, LabeledDataset, LabeledDataset) {
    let mirror = |mut ds: LabeledDataset| {
        ds.images.data_mut().chunks_mut(20).for_each(|r| r.reverse());
        ds
    };
    let full = mirror(gaussian_blobs(100, 10, 20, 0.2, 7));
    let test = mirror(gaussian_blobs(51, 10, 20, 0.2, 8));
    prepare_splits(cfg, full, test).unwrap()
}

#[test]
fn ff_with_zero_lr_stays_at_chance() {
    let mut cfg = ff_config("32-32", 2);
    cfg.lr = 0.0;
    let (tr, va, te) = ff_blobs(&cfg);
    let out = train(&cfg, &tr, &va).unwrap();
    let AnyNetwork::F32(Network::Ff(ff)) = &out.model.network else { panic!("FF model expected") };
    let mut fresh = cfg.resolve(&tr);
    fresh.seed = cfg.seed;
    let AnyNetwork::F32(Network::Ff(init)) = AnyNetwork::F32(Network::build(&fresh, &[20], 10).unwrap()) else {
        unreachable!()
    };
    assert_eq!(ff.layers, init.layers);
    let te = shuffled_labels(te, 4);
    let acc = out.model.evaluate(&te).unwrap().accuracy;
    assert!(near_chance(acc, te.len(), 10, 4.0), "{acc}");
}

#[test]
fn ff_training_separates_goodness() {
    let cfg = ff_config("32-32-32", 8);
    let (tr, va, te) = ff_blobs(&cfg);
    let out = train(&cfg, &tr, &va).unwrap();
    let AnyNetwork::F32(Network::Ff(ff)) = &out.model.network else { panic!("FF model expected") };
    let wrong: Vec<usize> = te.labels.iter().map(|&y| (y + 1 + y % 9) % 10).collect();
    assert!(wrong.iter().zip(&te.labels).all(|(w, y)| w != y));
    let x = te.images.clone();
    for (l, (pos, neg)) in ff.goodness_gap(&x, &te.labels, &wrong).unwrap().into_iter().enumerate() {
        assert!(pos > neg, "layer {l}: positive {pos} vs negative {neg}");
    }
    let acc = out.model.evaluate(&te).unwrap().accuracy;
    assert!(acc >= 0.8, "FF accuracy {acc}");
}

#[test]
fn ff_rejects_conv_and_tiny_inputs() {
    let cfg = ff_config("c4", 1);
    let (tr, va, _) = prepare_splits(&cfg, halves(20, 1), halves(10, 2)).unwrap();
    assert!(matches!(train(&cfg, &tr, &va), Err(HffError::Config(_))));
    let mut cfg = ff_config("8", 1);
    cfg.ff_aggregation = FfAggregation::LastLayer;
    let (tr, va, _) = blobs(&cfg, 20, 4, 3, 0.2);
    assert!(matches!(train(&cfg, &tr, &va), Err(HffError::Config(_))));
}
