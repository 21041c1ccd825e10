//! Inference latency and throughput with forward-pass accounting.

use std::time::Instant;

use crate::config::{Precision, TrainConfig};
use crate::error::{HffError, Result};
use crate::layers::ProtoSet;
use crate::model::{AnyNetwork, Inference, Network};
use crate::objectives::LossKind;
use crate::tensor::Tensor;

pub const BENCH_HEADER: &str = "method,seconds,imgs_per_s,ms_per_img,passes_per_img,batch,warmup";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub method: String,
    /// Median wall-clock seconds for one sweep over the images.
    pub seconds: f64,
    pub imgs_per_s: f64,
    pub ms_per_img: f64,
    /// Full traversals of the layer stack per image.
    pub passes_per_img: u64,
    pub batch: usize,
    pub warmup: usize,
}

impl BenchReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.3},{:.6},{},{},{}",
            self.method, self.seconds, self.imgs_per_s, self.ms_per_img, self.passes_per_img, self.batch, self.warmup
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchOptions {
    pub batch: usize,
    /// Images run before timing starts.
    pub warmup: usize,
    pub repeats: usize,
    /// Worker threads; 1 measures latency, more measures throughput.
    pub threads: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { batch: 1, warmup: 50, repeats: 5, threads: 1 }
    }
}

/// Untrained HFF and FF networks sharing `cfg`'s dense trunk, for
/// pass-count and latency comparisons at any class count.
pub fn trunk_pair(cfg: &TrainConfig, input_len: usize, classes: usize) -> Result<(AnyNetwork, AnyNetwork)> {
    let mut hff_cfg = cfg.clone();
    if hff_cfg.loss_kind == LossKind::Ff {
        hff_cfg.loss_kind = LossKind::SmoothMargin;
    }
    let mut ff_cfg = cfg.clone();
    ff_cfg.loss_kind = LossKind::Ff;
    ff_cfg.ff_label_value.get_or_insert(1.0);
    let shape = [input_len];
    Ok(match cfg.precision {
        Precision::F32 => (
            AnyNetwork::F32(Network::build(&hff_cfg, &shape, classes)?),
            AnyNetwork::F32(Network::build(&ff_cfg, &shape, classes)?),
        ),
        Precision::F64 => (
            AnyNetwork::F64(Network::build(&hff_cfg, &shape, classes)?),
            AnyNetwork::F64(Network::build(&ff_cfg, &shape, classes)?),
        ),
    })
}

/// Expected traversals per inference call: 1 for HFF, `C` for FF.
pub fn expected_passes(net: &AnyNetwork) -> u64 {
    if net.is_ff() {
        net.classes() as u64
    } else {
        1
    }
}

/// Single-pass HFF inference: every layer's scores come from one traversal.
pub fn infer_single_pass(net: &AnyNetwork, images: &Tensor<f32>, set: ProtoSet) -> Result<Inference> {
    if net.is_ff() {
        return Err(HffError::Usage("infer_single_pass needs an HFF model".into()));
    }
    net.infer(images, set)
}

/// Multi-pass FF inference: one label-embedded traversal per class.
pub fn infer_ff_multipass(net: &AnyNetwork, images: &Tensor<f32>) -> Result<Inference> {
    if !net.is_ff() {
        return Err(HffError::Usage("infer_ff_multipass needs an FF model".into()));
    }
    net.infer(images, ProtoSet::Ema)
}

fn slice_rows(images: &Tensor<f32>, start: usize, end: usize) -> Tensor<f32> {
    let w = images.row_len();
    let mut shape = images.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(&shape, images.data()[start * w..end * w].to_vec()).expect("row slice")
}

/// One timed sweep over `images`, checking the pass count of every call.
fn sweep(net: &AnyNetwork, images: &Tensor<f32>, set: ProtoSet, opts: &BenchOptions, count: usize) -> Result<f64> {
    let expect = expected_passes(net);
    let batches: Vec<Tensor<f32>> = (0..count)
        .step_by(opts.batch)
        .map(|s| slice_rows(images, s % images.dim(0), (s % images.dim(0) + opts.batch).min(images.dim(0))))
        .collect();
    let run = |chunk: &[Tensor<f32>]| -> Result<()> {
        for b in chunk {
            let inf = net.infer(b, set)?;
            if inf.passes != expect {
                return Err(HffError::Usage(format!("pass counter reported {}, expected {expect}", inf.passes)));
            }
        }
        Ok(())
    };
    let start = Instant::now();
    if opts.threads <= 1 {
        run(&batches)?;
    } else {
        let per = batches.len().div_ceil(opts.threads).max(1);
        std::thread::scope(|s| {
            let handles: Vec<_> = batches.chunks(per).map(|c| s.spawn(move || run(c))).collect();
            handles.into_iter().map(|h| h.join().expect("bench worker panicked")).collect::<Result<Vec<()>>>()
        })?;
    }
    Ok(start.elapsed().as_secs_f64())
}

/// Median over `repeats` sweeps of `images` after `warmup` untimed images.
pub fn benchmark(
    net: &AnyNetwork,
    method: &str,
    images: &Tensor<f32>,
    set: ProtoSet,
    opts: BenchOptions,
) -> Result<BenchReport> {
    if opts.warmup < 1 || opts.repeats < 1 || opts.batch < 1 || opts.threads < 1 {
        return Err(HffError::config("warmup, repeats, batch and threads must all be at least 1"));
    }
    let n = images.dim(0);
    if n == 0 {
        return Err(HffError::config("benchmark needs at least one image"));
    }
    sweep(net, images, set, &opts, opts.warmup)?;
    let mut times = (0..opts.repeats).map(|_| sweep(net, images, set, &opts, n)).collect::<Result<Vec<f64>>>()?;
    times.sort_by(f64::total_cmp);
    let seconds = median(&times);
    Ok(BenchReport {
        method: method.to_string(),
        seconds,
        imgs_per_s: n as f64 / seconds,
        ms_per_img: 1e3 * seconds / n as f64,
        passes_per_img: expected_passes(net),
        batch: opts.batch,
        warmup: opts.warmup,
    })
}

/// Median of sorted values.
fn median(sorted: &[f64]) -> f64 {
    let m = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[m]
    } else {
        0.5 * (sorted[m - 1] + sorted[m])
    }
}
