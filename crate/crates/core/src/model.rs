//! Layer stacks for HFF and the FF baseline, forward passes and evaluation.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::config::{FfAggregation, LayerSpec, TrainConfig};
use crate::data::{LabeledDataset, NormStats};
use crate::error::{HffError, Result};
use crate::layers::{argmax, embed_label, normalize_rows, ClassScores, ConvLayer, DenseLayer, FfLayer, ProtoSet};
use crate::rng::{stream, Purpose};
use crate::tensor::{Scalar, Tensor};

/// One layer of an HFF stack.
#[derive(Clone, Debug, PartialEq)]
pub enum HffLayer<T> {
    Dense(DenseLayer<T>),
    Conv(ConvLayer<T>),
}

impl<T: Scalar> HffLayer<T> {
    pub fn classes(&self) -> usize {
        match self {
            HffLayer::Dense(l) => l.classes(),
            HffLayer::Conv(l) => l.classes(),
        }
    }

    pub fn protos(&self) -> &Tensor<T> {
        match self {
            HffLayer::Dense(l) => &l.protos,
            HffLayer::Conv(l) => &l.protos,
        }
    }

    pub fn ema_protos(&self) -> &Tensor<T> {
        match self {
            HffLayer::Dense(l) => &l.ema.shadow,
            HffLayer::Conv(l) => &l.ema.shadow,
        }
    }

    /// Reshapes a conv output into the `B x D` layout a dense layer reads.
    pub fn adapt_input(&self, x: Tensor<T>) -> Result<Tensor<T>> {
        match self {
            HffLayer::Dense(_) if x.rank() != 2 => {
                let b = x.dim(0);
                let d = x.row_len();
                x.reshape(&[b, d])
            }
            _ => Ok(x),
        }
    }

    /// Scores for `x` (already adapted) and the detached input of the next layer.
    pub fn forward(&self, x: &Tensor<T>, set: ProtoSet) -> Result<(ClassScores<T>, Tensor<T>)> {
        match self {
            HffLayer::Dense(l) => {
                let fwd = l.forward(x, set)?;
                let scores = fwd.scores.clone();
                Ok((scores, fwd.into_next_input(l.opts.scale_input)))
            }
            HffLayer::Conv(l) => {
                let fwd = l.forward(x, set)?;
                let next = fwd.next_input(l.opts.scale_input)?;
                Ok((fwd.scores, next))
            }
        }
    }

    /// Named parameter tensors in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            HffLayer::Dense(l) => {
                vec![("weight", &l.weight), ("bias", &l.bias), ("protos", &l.protos), ("ema", &l.ema.shadow)]
            }
            HffLayer::Conv(l) => {
                let mut v = vec![("kernel", &l.kernel), ("bias", &l.bias)];
                if let Some(a) = &l.aux {
                    v.push(("aux", a));
                }
                v.push(("protos", &l.protos));
                v.push(("ema", &l.ema.shadow));
                v
            }
        }
    }
}

/// Per-sample input shape, without the batch axis.
pub type InputShape = Vec<usize>;

#[derive(Clone, Debug, PartialEq)]
pub struct HffNet<T> {
    pub layers: Vec<HffLayer<T>>,
    pub input_shape: InputShape,
}

impl<T: Scalar> HffNet<T> {
    /// Builds the stack described by `cfg` for `C x H x W` (or `D`) inputs.
    pub fn build(cfg: &TrainConfig, input_shape: &[usize], classes: usize) -> Result<Self> {
        let opts = cfg.head_options();
        let mut rng = stream(cfg.seed, Purpose::Init, 0);
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(cfg.arch.len());
        for spec in &cfg.arch {
            match *spec {
                LayerSpec::Conv { channels, aux, kernel, stride, pad } => {
                    if shape.len() != 3 {
                        return Err(HffError::config("conv layers need C x H x W inputs"));
                    }
                    let layer = ConvLayer::new(
                        shape[0],
                        channels,
                        kernel,
                        stride,
                        pad,
                        aux,
                        classes,
                        cfg.protos_per_class,
                        opts,
                        cfg.ema_decay,
                        &mut rng,
                    )?;
                    let (oh, ow) = layer.output_extent(shape[1], shape[2])?;
                    shape = if oh >= 2 && ow >= 2 { vec![channels, oh / 2, ow / 2] } else { vec![channels, oh, ow] };
                    layers.push(HffLayer::Conv(layer));
                }
                LayerSpec::Dense { width } => {
                    let din = shape.iter().product();
                    layers.push(HffLayer::Dense(DenseLayer::new(
                        din,
                        width,
                        classes,
                        cfg.protos_per_class,
                        opts,
                        cfg.ema_decay,
                        &mut rng,
                    )?));
                    shape = vec![width];
                }
            }
        }
        Ok(HffNet { layers, input_shape: input_shape.to_vec() })
    }

    pub fn classes(&self) -> usize {
        self.layers[0].classes()
    }

    /// Detached input of layer `upto` (frozen prefix only).
    pub fn propagate(&self, x: Tensor<T>, upto: usize, set: ProtoSet) -> Result<Tensor<T>> {
        let mut x = x;
        for layer in &self.layers[..upto] {
            let input = layer.adapt_input(x)?;
            x = layer.forward(&input, set)?.1;
        }
        self.layers[upto].adapt_input(x)
    }

    /// One traversal of the stack, returning every layer's scores.
    pub fn forward_all(&self, x: Tensor<T>, set: ProtoSet) -> Result<Vec<ClassScores<T>>> {
        let mut x = x;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = layer.adapt_input(x)?;
            let (scores, next) = layer.forward(&input, set)?;
            out.push(scores);
            x = next;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfNet<T> {
    pub layers: Vec<FfLayer<T>>,
    pub classes: usize,
    pub label_value: f64,
    pub aggregation: FfAggregation,
}

impl<T: Scalar> FfNet<T> {
    /// `cfg.ff_label_value` must be resolved (see [`TrainConfig::resolve`]).
    pub fn build(cfg: &TrainConfig, input_len: usize, classes: usize) -> Result<Self> {
        let label_value = cfg
            .ff_label_value
            .ok_or_else(|| HffError::config("ff_label_value must be resolved before building an FF network"))?;
        let mut rng = stream(cfg.seed, Purpose::Init, 0);
        let mut din = input_len;
        let mut layers = Vec::with_capacity(cfg.arch.len());
        for spec in &cfg.arch {
            let LayerSpec::Dense { width } = *spec else {
                return Err(HffError::config("the FF baseline supports dense architectures only"));
            };
            layers.push(FfLayer::new(din, width, cfg.ff_theta, &mut rng)?);
            din = width;
        }
        if classes < 2 || classes > input_len {
            return Err(HffError::config(format!(
                "FF needs 2 <= C <= input width, got C = {classes} for width {input_len}"
            )));
        }
        Ok(FfNet { layers, classes, label_value, aggregation: cfg.ff_aggregation })
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// Per-layer goodness (`L x B`) of one label-embedded pass.
    pub fn goodness(&self, x: &Tensor<T>) -> Result<Vec<Vec<T>>> {
        let mut cur = x.clone();
        normalize_rows(&mut cur);
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let fwd = layer.forward(&cur)?;
            out.push(fwd.goodness.clone());
            cur = fwd.next_input();
        }
        Ok(out)
    }

    /// Goodness of each layer that counts toward the prediction.
    fn aggregate(&self, per_layer: &[Vec<T>], i: usize) -> T {
        let from = match self.aggregation {
            FfAggregation::LastLayer => per_layer.len() - 1,
            FfAggregation::SumAll => 0,
            FfAggregation::SumExceptFirst => usize::from(per_layer.len() > 1),
        };
        per_layer[from..].iter().map(|g| g[i]).sum()
    }

    /// `C` label-embedded passes. Returns the aggregated goodness table
    /// (`B x C`) and the per-layer tables (`L` of `B x C`).
    pub fn class_goodness(&self, x: &Tensor<T>, counter: Option<&AtomicU64>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let b = x.dim(0);
        let c = self.classes;
        let mut agg = Tensor::zeros(&[b, c]);
        let mut per_layer = vec![Tensor::zeros(&[b, c]); self.layers.len()];
        let intensity = T::from_f64(self.label_value);
        for class in 0..c {
            let embedded = embed_label(x, class, c, intensity)?;
            let g = self.goodness(&embedded)?;
            if let Some(n) = counter {
                n.fetch_add(1, Ordering::Relaxed);
            }
            for i in 0..b {
                agg.row_mut(i)[class] = self.aggregate(&g, i);
                for (table, gl) in per_layer.iter_mut().zip(&g) {
                    table.row_mut(i)[class] = gl[i];
                }
            }
        }
        Ok((agg, per_layer))
    }

    /// Mean goodness of positive and negative data at each layer.
    pub fn goodness_gap(&self, x: &Tensor<T>, labels: &[usize], wrong: &[usize]) -> Result<Vec<(f64, f64)>> {
        let intensity = T::from_f64(self.label_value);
        let pos = self.goodness(&crate::layers::embed_labels(x, labels, self.classes, intensity)?)?;
        let neg = self.goodness(&crate::layers::embed_labels(x, wrong, self.classes, intensity)?)?;
        let mean = |g: &[T]| g.iter().map(|v| v.as_f64()).sum::<f64>() / g.len().max(1) as f64;
        Ok(pos.iter().zip(&neg).map(|(p, n)| (mean(p), mean(n))).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Network<T> {
    Hff(HffNet<T>),
    Ff(FfNet<T>),
}

/// Predictions from one inference call.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// Headline prediction per sample.
    pub predictions: Vec<usize>,
    /// `L x B` per-layer predictions.
    pub per_layer: Vec<Vec<usize>>,
    /// Full traversals of the layer stack this call made.
    pub passes: u64,
}

impl<T: Scalar> Network<T> {
    pub fn build(cfg: &TrainConfig, input_shape: &[usize], classes: usize) -> Result<Self> {
        Ok(if cfg.loss_kind == crate::objectives::LossKind::Ff {
            Network::Ff(FfNet::build(cfg, input_shape.iter().product(), classes)?)
        } else {
            Network::Hff(HffNet::build(cfg, input_shape, classes)?)
        })
    }

    pub fn classes(&self) -> usize {
        match self {
            Network::Hff(n) => n.classes(),
            Network::Ff(n) => n.classes,
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Network::Hff(n) => n.layers.len(),
            Network::Ff(n) => n.layers.len(),
        }
    }

    pub fn input_len(&self) -> usize {
        match self {
            Network::Hff(n) => n.input_shape.iter().product(),
            Network::Ff(n) => n.input_len(),
        }
    }

    /// Casts a batch of raw `B x ...` images to this network's input layout.
    pub fn prepare(&self, images: &Tensor<f32>) -> Result<Tensor<T>> {
        let b = images.dim(0);
        let x: Tensor<T> = images.cast();
        match self {
            Network::Hff(n) => {
                if images.row_len() != n.input_shape.iter().product::<usize>() {
                    return Err(HffError::dim(format!(
                        "input has {} values per sample, model expects {:?}",
                        images.row_len(),
                        n.input_shape
                    )));
                }
                let mut shape = vec![b];
                shape.extend_from_slice(&n.input_shape);
                x.reshape(&shape)
            }
            Network::Ff(n) => {
                if images.row_len() != n.input_len() {
                    return Err(HffError::dim(format!(
                        "input has {} values per sample, model expects {}",
                        images.row_len(),
                        n.input_len()
                    )));
                }
                x.reshape(&[b, n.input_len()])
            }
        }
    }

    /// HFF: one pass, every layer predicts, the last is the headline.
    /// FF: `C` label-embedded passes, prediction by aggregated goodness.
    pub fn infer(&self, images: &Tensor<f32>, set: ProtoSet) -> Result<Inference> {
        let x = self.prepare(images)?;
        match self {
            Network::Hff(n) => {
                let scores = n.forward_all(x, set)?;
                let per_layer: Vec<Vec<usize>> = scores.iter().map(|s| s.predictions()).collect();
                Ok(Inference { predictions: per_layer.last().cloned().unwrap_or_default(), per_layer, passes: 1 })
            }
            Network::Ff(n) => {
                let counter = AtomicU64::new(0);
                let (agg, per_layer) = n.class_goodness(&x, Some(&counter))?;
                Ok(Inference {
                    predictions: agg.rows().map(argmax).collect(),
                    per_layer: per_layer.iter().map(|t| t.rows().map(argmax).collect()).collect(),
                    passes: counter.into_inner(),
                })
            }
        }
    }

    /// Per-layer and headline accuracy over `ds`, split across `threads`
    /// workers. Pure: equal inputs give bitwise-equal reports.
    pub fn evaluate(&self, ds: &LabeledDataset, set: ProtoSet, threads: usize) -> Result<EvalReport> {
        const CHUNK: usize = 500;
        let n = ds.len();
        let depth = self.depth();
        let chunks = n.div_ceil(CHUNK);
        let workers = threads.clamp(1, chunks.max(1));
        let count_chunk = |k: usize| -> Result<(Vec<usize>, usize)> {
            let idx: Vec<usize> = (k * CHUNK..((k + 1) * CHUNK).min(n)).collect();
            let part = ds.subset(&idx);
            let inf = self.infer(&part.images, set)?;
            let mut hits = vec![0usize; depth];
            for (l, preds) in inf.per_layer.iter().enumerate() {
                hits[l] = preds.iter().zip(&part.labels).filter(|(p, y)| p == y).count();
            }
            let head = inf.predictions.iter().zip(&part.labels).filter(|(p, y)| p == y).count();
            Ok((hits, head))
        };
        let results: Vec<Result<(Vec<usize>, usize)>> = if workers == 1 {
            (0..chunks).map(count_chunk).collect()
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = (0..workers)
                    .map(|w| {
                        let f = &count_chunk;
                        s.spawn(move || (w..chunks).step_by(workers).map(f).collect::<Vec<_>>())
                    })
                    .collect();
                handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
            })
        };
        let mut hits = vec![0usize; depth];
        let mut head = 0usize;
        for r in results {
            let (h, c) = r?;
            hits.iter_mut().zip(h).for_each(|(a, b)| *a += b);
            head += c;
        }
        let denom = n.max(1) as f64;
        Ok(EvalReport { per_layer: hits.iter().map(|&h| h as f64 / denom).collect(), accuracy: head as f64 / denom })
    }

    /// Largest unit-norm deviation over raw and EMA prototypes of every layer.
    pub fn proto_norm_error(&self) -> f64 {
        match self {
            Network::Hff(n) => n
                .layers
                .iter()
                .flat_map(|l| [l.protos(), l.ema_protos()])
                .map(crate::layers::max_unit_norm_error)
                .fold(0.0, f64::max),
            Network::Ff(_) => 0.0,
        }
    }

    /// `(name, tensor)` pairs covering every parameter, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        match self {
            Network::Hff(n) => n
                .layers
                .iter()
                .enumerate()
                .flat_map(|(i, l)| l.params().into_iter().map(move |(k, t)| (format!("layer{i}.{k}"), t)))
                .collect(),
            Network::Ff(n) => n
                .layers
                .iter()
                .enumerate()
                .flat_map(|(i, l)| [(format!("layer{i}.weight"), &l.weight), (format!("layer{i}.bias"), &l.bias)])
                .collect(),
        }
    }

    /// FNV-1a over the bit patterns of every parameter of layer `l`
    /// (or of all layers when `l` is `None`).
    pub fn checksum(&self, l: Option<usize>) -> u64 {
        let prefix = l.map(|i| format!("layer{i}."));
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in self.named_params() {
            if prefix.as_ref().is_some_and(|p| !name.starts_with(p.as_str())) {
                continue;
            }
            for &v in t.data() {
                for byte in v.as_f64().to_bits().to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_layer: Vec<f64>,
    pub accuracy: f64,
}

/// A network in either precision.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyNetwork {
    F32(Network<f32>),
    F64(Network<f64>),
}

macro_rules! dispatch {
    ($self:expr, $n:ident => $body:expr) => {
        match $self {
            AnyNetwork::F32($n) => $body,
            AnyNetwork::F64($n) => $body,
        }
    };
}

impl AnyNetwork {
    pub fn classes(&self) -> usize {
        dispatch!(self, n => n.classes())
    }

    pub fn depth(&self) -> usize {
        dispatch!(self, n => n.depth())
    }

    pub fn input_len(&self) -> usize {
        dispatch!(self, n => n.input_len())
    }

    pub fn is_ff(&self) -> bool {
        dispatch!(self, n => matches!(n, Network::Ff(_)))
    }

    pub fn infer(&self, images: &Tensor<f32>, set: ProtoSet) -> Result<Inference> {
        dispatch!(self, n => n.infer(images, set))
    }

    pub fn evaluate(&self, ds: &LabeledDataset, set: ProtoSet, threads: usize) -> Result<EvalReport> {
        dispatch!(self, n => n.evaluate(ds, set, threads))
    }

    pub fn proto_norm_error(&self) -> f64 {
        dispatch!(self, n => n.proto_norm_error())
    }

    pub fn checksum(&self, layer: Option<usize>) -> u64 {
        dispatch!(self, n => n.checksum(layer))
    }

    /// Per-class scores of each layer for one batch (HFF), or the per-class
    /// goodness of each layer (FF), as `L` tables of `B x C` f64 values.
    pub fn layer_scores(&self, images: &Tensor<f32>, set: ProtoSet) -> Result<Vec<Tensor<f64>>> {
        dispatch!(self, n => {
            let x = n.prepare(images)?;
            match n {
                Network::Hff(h) => Ok(h.forward_all(x, set)?.iter().map(|s| s.scores.cast()).collect()),
                Network::Ff(f) => Ok(f.class_goodness(&x, None)?.1.iter().map(|t| t.cast()).collect()),
            }
        })
    }
}

/// A trained network with everything needed to reproduce and evaluate it.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub network: AnyNetwork,
    pub stats: Option<NormStats>,
    /// Final metrics as `key = value` text.
    pub metrics: String,
}

impl Model {
    pub fn proto_set(&self) -> ProtoSet {
        if self.config.eval_with_ema {
            ProtoSet::Ema
        } else {
            ProtoSet::Raw
        }
    }

    pub fn evaluate(&self, ds: &LabeledDataset) -> Result<EvalReport> {
        self.network.evaluate(ds, self.proto_set(), self.config.threads)
    }

    pub fn infer(&self, images: &Tensor<f32>) -> Result<Inference> {
        self.network.infer(images, self.proto_set())
    }

    /// `n` raw `[0, 1]` samples (channel-major rows of `input_len` values)
    /// standardized with the stored statistics, as an `n x input_len` tensor.
    pub fn prepare_raw(&self, pixels: &[f32], n: usize) -> Result<Tensor<f32>> {
        let width = self.network.input_len();
        if pixels.len() != n * width {
            return Err(HffError::dim(format!("{} values for {n} samples of width {width}", pixels.len())));
        }
        let mut x = Tensor::new(&[n, width], pixels.to_vec())?;
        if let Some(stats) = &self.stats {
            let channels = stats.mean.len().max(1);
            if !width.is_multiple_of(channels) {
                return Err(HffError::dim(format!("width {width} is not divisible into {channels} channels")));
            }
            let plane = width / channels;
            for row in x.data_mut().chunks_mut(width.max(1)) {
                for (i, v) in row.iter_mut().enumerate() {
                    let c = i / plane;
                    *v = ((f64::from(*v) - stats.mean[c]) / stats.std[c]) as f32;
                }
            }
        }
        Ok(x)
    }
}
