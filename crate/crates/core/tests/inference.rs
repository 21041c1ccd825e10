// Oracles index explicitly to stay independent of the iterator code under test.
#![allow(clippy::needless_range_loop)]

mod common;

use std::sync::atomic::AtomicU64;

use common::{blobs, toy_config};
use hff_core::bench::{benchmark, expected_passes, infer_ff_multipass, infer_single_pass, trunk_pair, BenchOptions};
use hff_core::config::{FfAggregation, TrainConfig};
use hff_core::layers::ProtoSet;
use hff_core::model::{AnyNetwork, FfNet, Network};
use hff_core::objectives::LossKind;
use hff_core::tensor::Tensor;
use hff_core::train::train;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn images(n: usize, width: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, width], |_| rng.random_range(-1.0..1.0))
}

#[test]
fn pass_counts_are_one_and_c() {
    let cfg = toy_config("64-32", 1);
    for classes in [2, 10, 100] {
        let (hff, ff) = trunk_pair(&cfg, 128, classes).unwrap();
        let x = images(3, 128, classes as u64);
        assert_eq!(infer_single_pass(&hff, &x, ProtoSet::Ema).unwrap().passes, 1);
        assert_eq!(infer_ff_multipass(&ff, &x).unwrap().passes, classes as u64);
        assert_eq!(expected_passes(&ff) / expected_passes(&hff), classes as u64);
        assert!(infer_single_pass(&ff, &x, ProtoSet::Ema).is_err());
        assert!(infer_ff_multipass(&hff, &x).is_err());
    }
}

#[test]
fn bench_reports_are_consistent() {
    let cfg = toy_config("64-32", 1);
    let (hff, ff) = trunk_pair(&cfg, 128, 10).unwrap();
    let x = images(40, 128, 1);
    let opts = BenchOptions { warmup: 5, ..BenchOptions::default() };
    for (net, name) in [(&hff, "hff"), (&ff, "ff")] {
        let r = benchmark(net, name, &x, ProtoSet::Ema, opts).unwrap();
        assert_eq!(r.passes_per_img, expected_passes(net));
        assert!((r.imgs_per_s * r.ms_per_img / 1000.0 - 1.0).abs() <= 0.05);
        assert_eq!(r.csv_row().split(',').count(), 7);
        assert!(r.csv_row().starts_with(name));
    }
    let bad = BenchOptions { warmup: 0, ..opts };
    assert!(benchmark(&hff, "hff", &x, ProtoSet::Ema, bad).is_err());
    let threaded = BenchOptions { threads: 2, batch: 4, ..opts };
    assert_eq!(benchmark(&ff, "ff", &x, ProtoSet::Ema, threaded).unwrap().passes_per_img, 10);
}

#[test]
fn single_pass_prediction_is_last_layer_argmax() {
    let cfg = toy_config("16-16", 4);
    let (tr, va, te) = blobs(&cfg, 60, 4, 8, 0.3);
    let model = train(&cfg, &tr, &va).unwrap().model;
    let inf = infer_single_pass(&model.network, &te.images, ProtoSet::Ema).unwrap();
    let tables = model.network.layer_scores(&te.images, ProtoSet::Ema).unwrap();
    for (i, row) in tables.last().unwrap().rows().enumerate() {
        let arg = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
        assert_eq!(inf.predictions[i], arg);
    }
    assert_eq!(inf.per_layer.len(), 2);
}

#[test]
fn batch_and_single_inference_agree() {
    for loss in ["sm", "ff"] {
        let mut cfg = toy_config("16-16", 3);
        cfg.set("loss_kind", loss).unwrap();
        let (tr, va, te) = blobs(&cfg, 60, 4, 8, 0.3);
        let model = train(&cfg, &tr, &va).unwrap().model;
        let batch = model.infer(&te.images).unwrap();
        for i in 0..te.len() {
            let one = Tensor::new(&[1, 8], te.images.row(i).to_vec()).unwrap();
            let single = model.infer(&one).unwrap();
            assert_eq!(single.predictions[0], batch.predictions[i], "{loss} sample {i}");
        }
    }
}

fn ff_net(aggregation: FfAggregation, seed: u64) -> FfNet<f64> {
    let mut cfg = TrainConfig::default();
    cfg.set("arch", "6-5-4").unwrap();
    cfg.loss_kind = LossKind::Ff;
    cfg.ff_label_value = Some(1.5);
    cfg.ff_aggregation = aggregation;
    cfg.seed = seed;
    match Network::<f64>::build(&cfg, &[8], 2).unwrap() {
        Network::Ff(n) => n,
        Network::Hff(_) => unreachable!(),
    }
}

/// Goodness of every layer for one label, by explicit loops.
fn oracle_goodness(net: &FfNet<f64>, x: &[f64], label: usize) -> Vec<f64> {
    let mut cur: Vec<f64> = x.to_vec();
    cur[0] = if label == 0 { 1.5 } else { 0.0 };
    cur[1] = if label == 1 { 1.5 } else { 0.0 };
    let mut out = Vec::new();
    for layer in &net.layers {
        let norm = cur.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (dout, din) = (layer.weight.dim(0), layer.weight.dim(1));
        let mut h = vec![0.0; dout];
        for o in 0..dout {
            let mut acc = layer.bias.data()[o];
            for i in 0..din {
                acc += layer.weight.data()[o * din + i] * cur[i] / norm;
            }
            h[o] = acc.max(0.0);
        }
        out.push(h.iter().map(|v| v * v).sum());
        cur = h;
    }
    out
}

#[test]
fn two_class_ff_matches_exhaustive_goodness_table() {
    let net = ff_net(FfAggregation::SumExceptFirst, 5);
    let x: Tensor<f64> = images(12, 8, 2).cast();
    let counter = AtomicU64::new(0);
    let (agg, per_layer) = net.class_goodness(&x, Some(&counter)).unwrap();
    assert_eq!(counter.into_inner(), 2);
    for (i, row) in x.rows().enumerate() {
        let table: Vec<Vec<f64>> = (0..2).map(|c| oracle_goodness(&net, row, c)).collect();
        for c in 0..2 {
            for l in 0..3 {
                assert!((per_layer[l].row(i)[c] - table[c][l]).abs() <= 1e-12);
            }
            let want = table[c][1] + table[c][2];
            assert!((agg.row(i)[c] - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn aggregation_modes_agree_when_first_layer_ignores_label() {
    let mut sum_all = ff_net(FfAggregation::SumAll, 9);
    // Cutting the label columns leaves the first layer's goodness class-free;
    // embedding never changes the input norm, so normalization cannot leak it.
    let w = sum_all.layers[0].weight.dim(1);
    for row in sum_all.layers[0].weight.data_mut().chunks_mut(w) {
        row[..2].fill(0.0);
    }
    let mut except_first = sum_all.clone();
    except_first.aggregation = FfAggregation::SumExceptFirst;
    let x: Tensor<f32> = images(200, 8, 3);
    let a = Network::Ff(sum_all).infer(&x, ProtoSet::Ema).unwrap();
    let b = Network::Ff(except_first).infer(&x, ProtoSet::Ema).unwrap();
    assert_eq!(a.predictions, b.predictions);
}

#[test]
fn inference_checks_input_width() {
    let cfg = toy_config("8", 1);
    let (hff, ff) = trunk_pair(&cfg, 16, 3).unwrap();
    let x = images(2, 15, 0);
    assert!(hff.infer(&x, ProtoSet::Ema).is_err());
    assert!(ff.infer(&x, ProtoSet::Ema).is_err());
    assert!(matches!(hff, AnyNetwork::F32(_)));
}
