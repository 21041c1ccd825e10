//! `model.bin`: little-endian binary holding the config, metrics,
//! normalization statistics and every parameter tensor as raw f64.
//!
//! ```text
//! "HFF1" | u32 version
//! u32 len | config text      (key = value lines)
//! u32 len | metrics text
//! u32 count | count x tensor
//! tensor := u32 name_len | name | u32 rank | rank x u64 extent | f64 data
//! ```

use std::io::Write;
use std::path::Path;

use crate::config::{Precision, TrainConfig};
use crate::data::NormStats;
use crate::error::{HffError, Result};
use crate::layers::ConvLayer;
use crate::model::{AnyNetwork, HffLayer, Model, Network};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"HFF1";
pub const VERSION: u32 = 1;

fn art(msg: impl Into<String>) -> HffError {
    HffError::Artifact(msg.into())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }

    fn tensor(&mut self, name: &str, shape: &[usize], data: impl Iterator<Item = f64>) {
        self.bytes(name.as_bytes());
        self.u32(shape.len() as u32);
        for &d in shape {
            self.0.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| art(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| art("text block is not UTF-8"))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f64>)> {
        let name = self.text()?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(art(format!("tensor `{name}` has implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= (self.buf.len() - self.pos) / 8)
            .ok_or_else(|| art(format!("tensor `{name}` extents {shape:?} exceed the file")))?;
        let data = self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}

fn usize_tensor(v: &[usize]) -> Tensor<f64> {
    Tensor::new(&[v.len()], v.iter().map(|&x| x as f64).collect()).expect("vector shape")
}

/// Serializes `model` to bytes.
pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.bytes(model.config.to_text().as_bytes());
    w.bytes(model.metrics.as_bytes());
    let mut tensors: Vec<(String, Tensor<f64>)> = Vec::new();
    let (input_shape, classes) = match &model.network {
        AnyNetwork::F32(n) => (input_shape(n), n.classes()),
        AnyNetwork::F64(n) => (input_shape(n), n.classes()),
    };
    tensors.push(("meta.input_shape".into(), usize_tensor(&input_shape)));
    tensors.push(("meta.classes".into(), usize_tensor(&[classes])));
    if let Some(s) = &model.stats {
        tensors.push(("stats.mean".into(), Tensor::new(&[s.mean.len()], s.mean.clone()).expect("vector")));
        tensors.push(("stats.std".into(), Tensor::new(&[s.std.len()], s.std.clone()).expect("vector")));
    }
    w.u32((tensors.len() + param_count(&model.network)) as u32);
    for (name, t) in &tensors {
        w.tensor(name, t.shape(), t.data().iter().copied());
    }
    match &model.network {
        AnyNetwork::F32(n) => write_params(&mut w, n),
        AnyNetwork::F64(n) => write_params(&mut w, n),
    }
    w.0
}

fn input_shape<T: Scalar>(n: &Network<T>) -> Vec<usize> {
    match n {
        Network::Hff(h) => h.input_shape.clone(),
        Network::Ff(f) => vec![f.input_len()],
    }
}

fn param_count(n: &AnyNetwork) -> usize {
    match n {
        AnyNetwork::F32(n) => n.named_params().len(),
        AnyNetwork::F64(n) => n.named_params().len(),
    }
}

fn write_params<T: Scalar>(w: &mut Writer, n: &Network<T>) {
    for (name, t) in n.named_params() {
        w.tensor(&name, t.shape(), t.data().iter().map(|v| v.as_f64()));
    }
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model);
    let mut f = std::fs::File::create(path).map_err(|e| HffError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| HffError::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| HffError::io(path, e))?;
    from_bytes(&bytes)
}

/// Parses bytes written by [`to_bytes`], rejecting other versions.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(art("missing HFF1 magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(art(format!("unsupported version {version}; this build reads version {VERSION}")));
    }
    let config = TrainConfig::parse(&r.text()?)?;
    let metrics = r.text()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        tensors.push(r.tensor()?);
    }
    if r.pos != bytes.len() {
        return Err(art(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let get = |name: &str| -> Result<&Tensor<f64>> {
        tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t).ok_or_else(|| art(format!("missing tensor `{name}`")))
    };
    let as_usizes = |t: &Tensor<f64>| t.data().iter().map(|&v| v as usize).collect::<Vec<_>>();
    let input_shape = as_usizes(get("meta.input_shape")?);
    let classes = as_usizes(get("meta.classes")?)[0];
    let stats = match (get("stats.mean"), get("stats.std")) {
        (Ok(m), Ok(s)) => Some(NormStats { mean: m.data().to_vec(), std: s.data().to_vec() }),
        _ => None,
    };
    let params: Vec<&(String, Tensor<f64>)> = tensors.iter().filter(|(n, _)| n.starts_with("layer")).collect();
    let network = match config.precision {
        Precision::F32 => AnyNetwork::F32(restore(&config, &input_shape, classes, &params)?),
        Precision::F64 => AnyNetwork::F64(restore(&config, &input_shape, classes, &params)?),
    };
    Ok(Model { config, network, stats, metrics })
}

/// Rebuilds the architecture from the config, then overwrites every
/// parameter with the stored values.
fn restore<T: Scalar>(
    cfg: &TrainConfig,
    input_shape: &[usize],
    classes: usize,
    params: &[&(String, Tensor<f64>)],
) -> Result<Network<T>> {
    let mut net = Network::<T>::build(cfg, input_shape, classes)?;
    let expected: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
    let stored: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
    if expected != stored {
        return Err(art(format!("parameter list {stored:?} does not match the architecture {expected:?}")));
    }
    for (name, t) in params {
        set_param(&mut net, name, t.cast())?;
    }
    match &net {
        Network::Hff(h) => {
            for l in &h.layers {
                match l {
                    HffLayer::Dense(d) => d.validate()?,
                    HffLayer::Conv(c) => ConvLayer::validate(c)?,
                }
            }
        }
        Network::Ff(_) => {}
    }
    Ok(net)
}

fn set_param<T: Scalar>(net: &mut Network<T>, name: &str, t: Tensor<T>) -> Result<()> {
    let (layer, field) = name
        .strip_prefix("layer")
        .and_then(|s| s.split_once('.'))
        .and_then(|(i, f)| i.parse::<usize>().ok().map(|i| (i, f)))
        .ok_or_else(|| art(format!("bad parameter name `{name}`")))?;
    let slot: &mut Tensor<T> = match net {
        Network::Hff(h) => match (&mut h.layers[layer], field) {
            (HffLayer::Dense(d), "weight") => &mut d.weight,
            (HffLayer::Dense(d), "bias") => &mut d.bias,
            (HffLayer::Dense(d), "protos") => &mut d.protos,
            (HffLayer::Dense(d), "ema") => &mut d.ema.shadow,
            (HffLayer::Conv(c), "kernel") => &mut c.kernel,
            (HffLayer::Conv(c), "bias") => &mut c.bias,
            (HffLayer::Conv(c), "aux") => c.aux.as_mut().ok_or_else(|| art("unexpected aux tensor"))?,
            (HffLayer::Conv(c), "protos") => &mut c.protos,
            (HffLayer::Conv(c), "ema") => &mut c.ema.shadow,
            _ => return Err(art(format!("unknown parameter `{name}`"))),
        },
        Network::Ff(f) => match field {
            "weight" => &mut f.layers[layer].weight,
            "bias" => &mut f.layers[layer].bias,
            _ => return Err(art(format!("unknown parameter `{name}`"))),
        },
    };
    if slot.shape() != t.shape() {
        return Err(art(format!("`{name}` has shape {:?}, architecture expects {:?}", t.shape(), slot.shape())));
    }
    *slot = t;
    Ok(())
}
