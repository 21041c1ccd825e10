//! Layer-local training loops: greedy layer-by-layer, per-batch sweeps over
//! all layers, and the forward-forward baseline.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::Rng;

use crate::config::{Mode, Precision, TrainConfig};
use crate::data::{Augment, Batches, LabeledDataset};
use crate::error::{HffError, Result};
use crate::layers::{embed_labels, normalize_rows, ProtoSet};
use crate::model::{AnyNetwork, EvalReport, FfNet, HffLayer, HffNet, Model, Network};
use crate::objectives::{conv_backward, dense_backward, ff_backward, ff_pair_loss, LossKind};
use crate::optim::{proto_step, AdamState};
use crate::rng::{stream, Purpose};
use crate::tensor::{Scalar, Tensor};

/// One row of training metrics: layer `layer` after global epoch `epoch`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub layer: usize,
    /// 1-based, counted across the whole run.
    pub epoch: usize,
    /// Mean training loss of this layer over the epoch.
    pub loss: f64,
    /// Validation accuracy of this layer.
    pub val_acc: f64,
    /// Validation accuracy of every layer.
    pub per_layer_val: Vec<f64>,
    /// Wall-clock seconds since training started (0 when not recorded).
    pub seconds: f64,
    /// Largest unit-norm deviation over raw and EMA prototypes.
    pub proto_norm_error: f64,
    /// Parameter checksum of every layer at the end of the epoch.
    pub checksums: Vec<u64>,
}

pub const METRICS_HEADER: &str = "layer,epoch,loss,val_acc,seconds";

impl EpochReport {
    pub fn csv_row(&self) -> String {
        format!("{},{},{:.6},{:.6},{:.3}", self.layer, self.epoch, self.loss, self.val_acc, self.seconds)
    }
}

pub fn metrics_csv(reports: &[EpochReport]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub reports: Vec<EpochReport>,
    /// Global epoch at which the headline validation accuracy completed
    /// `patience` consecutive epochs at or above `target_acc`.
    pub epochs_to_target: Option<usize>,
}

/// Loads `cfg.dataset` from `root` and returns standardized
/// `(train, val, test)`; statistics come from the training part only.
pub fn load_splits(cfg: &TrainConfig, root: &Path) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let (full, test) = cfg.dataset.load(root)?;
    prepare_splits(cfg, full, test)
}

/// Applies `train_limit`, the seeded validation split and standardization.
pub fn prepare_splits(
    cfg: &TrainConfig,
    full: LabeledDataset,
    mut test: LabeledDataset,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let full = if cfg.train_limit > 0 && cfg.train_limit < full.len() {
        full.subset(&(0..cfg.train_limit).collect::<Vec<_>>())
    } else {
        full
    };
    let (mut train, mut val) = full.split(cfg.val_fraction, cfg.seed)?;
    let stats = train.channel_stats();
    train.standardize(&stats)?;
    val.standardize(&stats)?;
    test.standardize(&stats)?;
    Ok((train, val, test))
}

/// Trains the network `cfg` describes with the trainer its mode and loss select.
pub fn train(cfg: &TrainConfig, train: &LabeledDataset, val: &LabeledDataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    train.validate()?;
    let cfg = &cfg.resolve(train);
    match cfg.precision {
        Precision::F32 => run::<f32>(cfg, train, val, AnyNetwork::F32),
        Precision::F64 => run::<f64>(cfg, train, val, AnyNetwork::F64),
    }
}

fn run<T: Scalar>(
    cfg: &TrainConfig,
    train: &LabeledDataset,
    val: &LabeledDataset,
    wrap: fn(Network<T>) -> AnyNetwork,
) -> Result<TrainOutcome> {
    let (net, reports, epochs_to_target) = train_network::<T>(cfg, train, val)?;
    let model = Model { config: cfg.clone(), network: wrap(net), stats: train.stats.clone(), metrics: String::new() };
    let mut outcome = TrainOutcome { model, reports, epochs_to_target };
    outcome.model.metrics = summary_text(&outcome);
    Ok(outcome)
}

fn summary_text(o: &TrainOutcome) -> String {
    let mut s = String::new();
    if let Some(last) = o.reports.last() {
        let _ = writeln!(s, "epochs = {}", last.epoch);
        let _ = writeln!(s, "final_loss = {:.6}", last.loss);
        let _ = writeln!(s, "final_val_acc = {:.6}", last.val_acc);
    }
    let _ = writeln!(s, "epochs_to_target = {}", o.epochs_to_target.map_or_else(|| "none".into(), |e| e.to_string()));
    s
}

/// Trains a network of element type `T`, returning it with its reports.
pub fn train_network<T: Scalar>(
    cfg: &TrainConfig,
    train: &LabeledDataset,
    val: &LabeledDataset,
) -> Result<(Network<T>, Vec<EpochReport>, Option<usize>)> {
    cfg.validate()?;
    let cfg = &cfg.resolve(train);
    if train.class_count < 2 {
        return Err(HffError::config("training data must have at least 2 classes"));
    }
    let input_shape = &train.images.shape()[1..];
    let mut net = Network::<T>::build(cfg, input_shape, train.class_count)?;
    let mut tracker = Tracker::new(cfg, val);
    match (&net, cfg.mode) {
        (Network::Ff(_), _) => train_ff_baseline(cfg, &mut net, train, &mut tracker)?,
        (Network::Hff(_), Mode::Greedy) => train_greedy(cfg, &mut net, train, &mut tracker)?,
        (Network::Hff(_), Mode::PerBatchLocal) => train_per_batch_local(cfg, &mut net, train, &mut tracker)?,
    }
    Ok((net, tracker.reports, tracker.reached))
}

/// Evaluation, metric rows and early stopping shared by every loop.
pub struct Tracker<'a> {
    cfg: &'a TrainConfig,
    val: &'a LabeledDataset,
    start: Instant,
    reports: Vec<EpochReport>,
    streak: usize,
    reached: Option<usize>,
}

impl<'a> Tracker<'a> {
    pub fn new(cfg: &'a TrainConfig, val: &'a LabeledDataset) -> Self {
        Tracker { cfg, val, start: Instant::now(), reports: Vec::new(), streak: 0, reached: None }
    }

    fn evaluate<T: Scalar>(&self, net: &Network<T>) -> Result<EvalReport> {
        if self.val.is_empty() {
            return Ok(EvalReport { per_layer: vec![0.0; net.depth()], accuracy: 0.0 });
        }
        let set = if self.cfg.eval_with_ema { ProtoSet::Ema } else { ProtoSet::Raw };
        net.evaluate(self.val, set, self.cfg.threads)
    }

    /// Records rows for `layers` after `epoch`; returns true when training
    /// should stop. `headline` marks epochs whose last-layer accuracy
    /// counts toward the target.
    fn record<T: Scalar>(
        &mut self,
        net: &Network<T>,
        epoch: usize,
        layers: &[(usize, f64)],
        headline: bool,
    ) -> Result<bool> {
        let eval = self.evaluate(net)?;
        let seconds = if self.cfg.record_seconds { self.start.elapsed().as_secs_f64() } else { 0.0 };
        let proto_norm_error = net.proto_norm_error();
        let checksums: Vec<u64> = (0..net.depth()).map(|l| net.checksum(Some(l))).collect();
        for &(layer, loss) in layers {
            self.reports.push(EpochReport {
                layer,
                epoch,
                loss,
                val_acc: eval.per_layer[layer],
                per_layer_val: eval.per_layer.clone(),
                seconds,
                proto_norm_error,
                checksums: checksums.clone(),
            });
        }
        let Some(target) = self.cfg.target_acc else {
            return Ok(false);
        };
        if !headline || self.val.is_empty() {
            return Ok(false);
        }
        if eval.accuracy >= target {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        if self.streak >= self.cfg.patience && self.reached.is_none() {
            self.reached = Some(epoch);
            return Ok(true);
        }
        Ok(false)
    }
}

/// Adam state for one HFF layer: weights (kernel, bias, aux) and prototypes.
struct LayerOpt<T> {
    params: AdamState<T>,
    protos: AdamState<T>,
}

impl<T: Scalar> LayerOpt<T> {
    fn new(layer: &HffLayer<T>, lr: f64) -> Self {
        let params = match layer {
            HffLayer::Dense(l) => AdamState::new(lr, &[l.weight.shape(), l.bias.shape()]),
            HffLayer::Conv(l) => match &l.aux {
                Some(a) => AdamState::new(lr, &[l.kernel.shape(), l.bias.shape(), a.shape()]),
                None => AdamState::new(lr, &[l.kernel.shape(), l.bias.shape()]),
            },
        };
        LayerOpt { params, protos: AdamState::new(lr, &[layer.protos().shape()]) }
    }
}

fn divergence(layer: usize, epoch: usize, what: impl std::fmt::Display) -> HffError {
    HffError::Divergence(format!("layer {layer}, epoch {epoch}: {what}"))
}

/// Forward, local backward and one optimizer step for a single layer. The
/// returned next-layer input comes from the pre-update forward pass and
/// carries no gradient path back into this layer.
fn step_layer<T: Scalar>(
    layer: &mut HffLayer<T>,
    opt: &mut LayerOpt<T>,
    x: &Tensor<T>,
    labels: &[usize],
    kind: LossKind,
    at: (usize, usize),
) -> Result<(f64, Tensor<T>)> {
    let wrap = |e: HffError| match e {
        HffError::NonFinite(m) | HffError::Divergence(m) => divergence(at.0, at.1, m),
        other => other,
    };
    let (loss, next) = match layer {
        HffLayer::Dense(l) => {
            let fwd = l.forward(x, ProtoSet::Raw).map_err(wrap)?;
            let g = dense_backward(l, x, &fwd, labels, kind, ProtoSet::Raw)?;
            if !g.loss.is_finite() {
                return Err(divergence(at.0, at.1, format!("loss is {}", g.loss)));
            }
            opt.params
                .step(&mut [&mut l.weight, &mut l.bias], &[&g.d_weight, &g.d_bias], &["weight", "bias"])
                .map_err(wrap)?;
            let d_protos = g.d_protos.as_ref().expect("HFF heads have prototypes");
            proto_step(&mut l.protos, d_protos, &mut opt.protos, &mut l.ema).map_err(wrap)?;
            (g.loss, fwd.into_next_input(l.opts.scale_input))
        }
        HffLayer::Conv(l) => {
            let fwd = l.forward(x, ProtoSet::Raw).map_err(wrap)?;
            let g = conv_backward(l, x, &fwd, labels, kind, ProtoSet::Raw)?;
            if !g.loss.is_finite() {
                return Err(divergence(at.0, at.1, format!("loss is {}", g.loss)));
            }
            match (&mut l.aux, &g.d_aux) {
                (Some(a), Some(da)) => opt.params.step(
                    &mut [&mut l.kernel, &mut l.bias, a],
                    &[&g.d_weight, &g.d_bias, da],
                    &["kernel", "bias", "aux"],
                ),
                _ => opt.params.step(&mut [&mut l.kernel, &mut l.bias], &[&g.d_weight, &g.d_bias], &["kernel", "bias"]),
            }
            .map_err(wrap)?;
            let d_protos = g.d_protos.as_ref().expect("HFF heads have prototypes");
            proto_step(&mut l.protos, d_protos, &mut opt.protos, &mut l.ema).map_err(wrap)?;
            (g.loss, fwd.next_input(l.opts.scale_input)?)
        }
    };
    Ok((loss, next))
}

fn augment_for(cfg: &TrainConfig, ds: &LabeledDataset) -> Option<Augment> {
    (cfg.augment && ds.images.rank() == 4).then(|| Augment {
        pad: cfg.dataset.crop_pad(),
        flip: ds.flippable,
        seed: cfg.seed,
    })
}

fn epoch_batches<'a>(cfg: &TrainConfig, ds: &'a LabeledDataset, epoch: usize) -> Result<Batches<'a>> {
    Batches::new(ds, cfg.batch_size, Some(cfg.seed), augment_for(cfg, ds), epoch as u64)
}

fn prepare_input<T: Scalar>(net: &HffNet<T>, images: &Tensor<f32>) -> Result<Tensor<T>> {
    let mut shape = vec![images.dim(0)];
    shape.extend_from_slice(&net.input_shape);
    images.cast::<T>().reshape(&shape)
}

fn hff_mut<T>(net: &mut Network<T>) -> Result<&mut HffNet<T>> {
    match net {
        Network::Hff(h) => Ok(h),
        Network::Ff(_) => Err(HffError::config("this trainer needs an HFF network")),
    }
}

fn ff_mut<T>(net: &mut Network<T>) -> Result<&mut FfNet<T>> {
    match net {
        Network::Ff(f) => Ok(f),
        Network::Hff(_) => Err(HffError::config("this trainer needs an FF network")),
    }
}

/// Trains layers in order; layer `l` sees inputs from the frozen prefix
/// `0..l` and never reads later layers.
pub fn train_greedy<T: Scalar>(
    cfg: &TrainConfig,
    net: &mut Network<T>,
    train: &LabeledDataset,
    tracker: &mut Tracker<'_>,
) -> Result<()> {
    let schedule = cfg.greedy_schedule();
    let last = hff_mut(net)?.layers.len() - 1;
    let mut epoch = 0;
    for (l, &n_epochs) in schedule.iter().enumerate() {
        let mut opt = LayerOpt::new(&hff_mut(net)?.layers[l], cfg.lr);
        for _ in 0..n_epochs {
            let hff = hff_mut(net)?;
            let (mut sum, mut count) = (0.0, 0usize);
            for batch in epoch_batches(cfg, train, epoch)? {
                let x = prepare_input(hff, &batch.images)?;
                let input = hff.propagate(x, l, ProtoSet::Raw)?;
                let at = (l, epoch + 1);
                let (loss, _) = step_layer(&mut hff.layers[l], &mut opt, &input, &batch.labels, cfg.loss_kind, at)?;
                sum += loss * batch.labels.len() as f64;
                count += batch.labels.len();
            }
            epoch += 1;
            let mean = sum / count.max(1) as f64;
            if tracker.record(net, epoch, &[(l, mean)], l == last)? {
                return Ok(());
            }
        }
    }
    Ok(())
}

/// Every batch updates all layers in one sweep, each on the detached output
/// of the layer below.
pub fn train_per_batch_local<T: Scalar>(
    cfg: &TrainConfig,
    net: &mut Network<T>,
    train: &LabeledDataset,
    tracker: &mut Tracker<'_>,
) -> Result<()> {
    let depth = hff_mut(net)?.layers.len();
    let mut opts: Vec<LayerOpt<T>> = hff_mut(net)?.layers.iter().map(|l| LayerOpt::new(l, cfg.lr)).collect();
    for epoch in 0..cfg.epochs {
        let hff = hff_mut(net)?;
        let mut sums = vec![0.0; depth];
        let mut count = 0usize;
        for batch in epoch_batches(cfg, train, epoch)? {
            let mut x = prepare_input(hff, &batch.images)?;
            for (l, (layer, opt)) in hff.layers.iter_mut().zip(&mut opts).enumerate() {
                let input = layer.adapt_input(x)?;
                let (loss, next) = step_layer(layer, opt, &input, &batch.labels, cfg.loss_kind, (l, epoch + 1))?;
                sums[l] += loss * batch.labels.len() as f64;
                x = next;
            }
            count += batch.labels.len();
        }
        let rows: Vec<(usize, f64)> = sums.iter().enumerate().map(|(l, s)| (l, s / count.max(1) as f64)).collect();
        if tracker.record(net, epoch + 1, &rows, true)? {
            break;
        }
    }
    Ok(())
}

/// Forward-forward baseline: positive data carries the true label, negative
/// data a uniformly drawn wrong label (redrawn every epoch); each layer
/// pushes goodness above `theta` for positives and below it for negatives.
pub fn train_ff_baseline<T: Scalar>(
    cfg: &TrainConfig,
    net: &mut Network<T>,
    train: &LabeledDataset,
    tracker: &mut Tracker<'_>,
) -> Result<()> {
    let ff = ff_mut(net)?;
    let depth = ff.layers.len();
    let classes = ff.classes;
    let width = ff.input_len();
    let intensity = T::from_f64(ff.label_value);
    let mut opts: Vec<AdamState<T>> =
        ff.layers.iter().map(|l| AdamState::new(cfg.lr, &[l.weight.shape(), l.bias.shape()])).collect();
    let schedule: Vec<(usize, usize)> = match cfg.mode {
        Mode::PerBatchLocal => (0..cfg.epochs).map(|_| (0, depth)).collect(),
        Mode::Greedy => {
            cfg.greedy_schedule().iter().enumerate().flat_map(|(l, &n)| std::iter::repeat_n((l, l + 1), n)).collect()
        }
    };
    for (epoch, &(lo, hi)) in schedule.iter().enumerate() {
        let ff = ff_mut(net)?;
        let mut neg_rng = stream(cfg.seed, Purpose::Negatives, epoch as u64);
        let mut sums = vec![0.0; depth];
        let mut count = 0usize;
        for batch in epoch_batches(cfg, train, epoch)? {
            let b = batch.labels.len();
            let x: Tensor<T> = batch.images.cast::<T>().reshape(&[b, width])?;
            let wrong: Vec<usize> = batch
                .labels
                .iter()
                .map(|&y| {
                    let r = neg_rng.random_range(0..classes - 1);
                    if r >= y {
                        r + 1
                    } else {
                        r
                    }
                })
                .collect();
            let mut pos = embed_labels(&x, &batch.labels, classes, intensity)?;
            let mut neg = embed_labels(&x, &wrong, classes, intensity)?;
            normalize_rows(&mut pos);
            normalize_rows(&mut neg);
            for l in 0..hi {
                let layer = &mut ff.layers[l];
                let pf = layer.forward(&pos)?;
                let nf = layer.forward(&neg)?;
                if l >= lo {
                    let loss = ff_pair_loss(&pf, &nf, layer.theta);
                    if !loss.is_finite() {
                        return Err(divergence(l, epoch + 1, format!("loss is {loss}")));
                    }
                    let g = ff_backward(layer, &pos, &pf, &neg, &nf)?;
                    opts[l]
                        .step(&mut [&mut layer.weight, &mut layer.bias], &[&g.d_weight, &g.d_bias], &["weight", "bias"])
                        .map_err(|e| divergence(l, epoch + 1, e))?;
                    sums[l] += loss * b as f64;
                }
                pos = pf.next_input();
                neg = nf.next_input();
            }
            count += b;
        }
        let rows: Vec<(usize, f64)> = (lo..hi).map(|l| (l, sums[l] / count.max(1) as f64)).collect();
        let headline = hi == depth;
        if tracker.record(net, epoch + 1, &rows, headline)? {
            break;
        }
    }
    Ok(())
}
