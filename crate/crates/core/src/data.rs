//! IDX and CIFAR binary ingestion, per-channel standardization, seeded
//! splits, crop/flip augmentation and batch iteration.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{HffError, Result};
use crate::rng::{permutation, stream, Purpose};
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_PLANE: usize = 32 * 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_PLANE;

/// Per-channel mean and standard deviation of raw `[0, 1]` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LabeledDataset {
    /// `N x C x H x W` (or `N x D` once flattened).
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub name: String,
    /// Stats the images were standardized with, if any.
    pub stats: Option<NormStats>,
    /// Whether horizontal flips preserve the label (false for digits).
    pub flippable: bool,
}

fn format_err(path: &Path, offset: u64, reason: impl Into<String>) -> HffError {
    HffError::Format { path: path.to_path_buf(), offset, reason: reason.into() }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| HffError::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, offset as u64, "truncated header"))
}

/// `(count, rows, cols, pixels)` of an IDX image file.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES {
        return Err(format_err(path, 0, format!("bad magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let h = be_u32(bytes, 8, path)? as usize;
    let w = be_u32(bytes, 12, path)? as usize;
    let need = n * h * w;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(format_err(
            path,
            (16 + body.len()) as u64,
            format!("truncated: {n} images of {h}x{w} need {need} bytes, found {}", body.len()),
        ));
    }
    if body.len() > need {
        return Err(format_err(path, (16 + need) as u64, "trailing bytes after the last image"));
    }
    Ok((n, h, w, body.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS {
        return Err(format_err(path, 0, format!("bad magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(format_err(
            path,
            (8 + body.len().min(n)) as u64,
            format!("header declares {n} labels, file holds {}", body.len()),
        ));
    }
    Ok(body.to_vec())
}

/// Loads an IDX image/label pair with pixels scaled to `[0, 1]`. The class
/// count is one more than the largest label.
pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let (n, h, w, pixels) = parse_idx_images(&read(images)?, images)?;
    let raw_labels = parse_idx_labels(&read(labels)?, labels)?;
    if raw_labels.len() != n {
        return Err(format_err(
            labels,
            4,
            format!("{} labels for {n} images in {}", raw_labels.len(), images.display()),
        ));
    }
    if n == 0 {
        return Err(format_err(images, 4, "dataset is empty"));
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let class_count = labels.iter().max().map_or(0, |&m| m + 1);
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Ok(LabeledDataset {
        images: Tensor::new(&[n, 1, h, w], data)?,
        labels,
        class_count,
        name: images
            .parent()
            .and_then(|p| p.file_name())
            .map_or_else(|| "idx".into(), |s| s.to_string_lossy().into_owned()),
        stats: None,
        flippable: false,
    })
}

/// Writes an IDX image file (used for fixtures and tests).
pub fn write_idx_images(path: &Path, n: usize, h: usize, w: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != n * h * w {
        return Err(HffError::dim("pixel count does not match n*h*w"));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| HffError::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| HffError::io(path, e))
}

/// CIFAR record layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarKind {
    /// 1 label byte + 3072 pixels.
    Ten,
    /// Coarse and fine label bytes + 3072 pixels; `coarse` selects the
    /// 20 superclasses instead of the 100 fine classes.
    Hundred { coarse: bool },
}

impl CifarKind {
    fn record_len(self) -> usize {
        match self {
            CifarKind::Ten => 1 + CIFAR_PIXELS,
            CifarKind::Hundred { .. } => 2 + CIFAR_PIXELS,
        }
    }

    fn class_count(self) -> usize {
        match self {
            CifarKind::Ten => 10,
            CifarKind::Hundred { coarse: true } => 20,
            CifarKind::Hundred { coarse: false } => 100,
        }
    }
}

/// Loads and concatenates CIFAR binary batches.
pub fn load_cifar(paths: &[PathBuf], kind: CifarKind) -> Result<LabeledDataset> {
    let rec = kind.record_len();
    let classes = kind.class_count();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for path in paths {
        let bytes = read(path)?;
        if bytes.is_empty() || bytes.len() % rec != 0 {
            let offset = (bytes.len() / rec * rec) as u64;
            return Err(format_err(
                path,
                offset,
                format!("file length {} is not a multiple of the {rec}-byte record", bytes.len()),
            ));
        }
        for (i, r) in bytes.chunks(rec).enumerate() {
            let label = match kind {
                CifarKind::Ten => r[0],
                CifarKind::Hundred { coarse: true } => r[0],
                CifarKind::Hundred { coarse: false } => r[1],
            } as usize;
            if label >= classes {
                return Err(format_err(path, (i * rec) as u64, format!("label {label} out of range")));
            }
            labels.push(label);
            data.extend(r[rec - CIFAR_PIXELS..].iter().map(|&p| p as f32 / 255.0));
        }
    }
    let n = labels.len();
    if n == 0 {
        return Err(HffError::config("no CIFAR batch files given"));
    }
    Ok(LabeledDataset {
        images: Tensor::new(&[n, 3, 32, 32], data)?,
        labels,
        class_count: classes,
        name: match kind {
            CifarKind::Ten => "cifar10".into(),
            CifarKind::Hundred { .. } => "cifar100".into(),
        },
        stats: None,
        flippable: true,
    })
}

/// Built-in dataset layouts under a data root.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetName {
    Mnist,
    FashionMnist,
    Cifar10,
    Cifar100,
}

impl std::str::FromStr for DatasetName {
    type Err = HffError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetName::Mnist),
            "fashion-mnist" | "fmnist" => Ok(DatasetName::FashionMnist),
            "cifar10" => Ok(DatasetName::Cifar10),
            "cifar100" => Ok(DatasetName::Cifar100),
            _ => Err(HffError::config(format!("dataset `{s}`; expected mnist|fashion-mnist|cifar10|cifar100"))),
        }
    }
}

impl DatasetName {
    pub fn name(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::FashionMnist => "fashion-mnist",
            DatasetName::Cifar10 => "cifar10",
            DatasetName::Cifar100 => "cifar100",
        }
    }

    /// Crop padding used when augmenting.
    pub fn crop_pad(self) -> usize {
        match self {
            DatasetName::Mnist | DatasetName::FashionMnist => 2,
            DatasetName::Cifar10 | DatasetName::Cifar100 => 4,
        }
    }

    /// `(train, test)` from the conventional file names under `root`:
    /// `mnist/`, `fashion-mnist/` (IDX), `cifar-10-batches-bin/`,
    /// `cifar-100-binary/`.
    pub fn load(self, root: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
        let (mut train, mut test) = match self {
            DatasetName::Mnist | DatasetName::FashionMnist => {
                let dir = root.join(self.name());
                (
                    load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?,
                    load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?,
                )
            }
            DatasetName::Cifar10 => {
                let dir = root.join("cifar-10-batches-bin");
                let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
                (load_cifar(&train, CifarKind::Ten)?, load_cifar(&[dir.join("test_batch.bin")], CifarKind::Ten)?)
            }
            DatasetName::Cifar100 => {
                let dir = root.join("cifar-100-binary");
                let kind = CifarKind::Hundred { coarse: false };
                (load_cifar(&[dir.join("train.bin")], kind)?, load_cifar(&[dir.join("test.bin")], kind)?)
            }
        };
        let classes = train.class_count.max(test.class_count);
        for ds in [&mut train, &mut test] {
            ds.class_count = classes;
            ds.name = self.name().into();
        }
        Ok((train, test))
    }
}

/// `DATA_ROOT` if set, else `./data`.
pub fn data_root() -> PathBuf {
    std::env::var_os("DATA_ROOT").map_or_else(|| PathBuf::from("data"), PathBuf::from)
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Channel count for image-shaped data, 1 for flattened data.
    pub fn channels(&self) -> usize {
        if self.images.rank() == 4 {
            self.images.dim(1)
        } else {
            1
        }
    }

    pub fn sample_len(&self) -> usize {
        self.images.row_len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(HffError::config(format!("dataset {} is empty", self.name)));
        }
        if self.images.dim(0) != self.labels.len() {
            return Err(HffError::dim("image and label counts differ"));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.class_count) {
            return Err(HffError::config(format!("label {y} out of range for {} classes", self.class_count)));
        }
        if !self.images.is_finite() {
            return Err(HffError::NonFinite(format!("pixels of {}", self.name)));
        }
        Ok(())
    }

    /// Per-channel mean and population standard deviation.
    pub fn channel_stats(&self) -> NormStats {
        let c = self.channels();
        let plane = self.sample_len() / c.max(1);
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for row in self.images.rows() {
            for (k, ch) in row.chunks(plane.max(1)).enumerate() {
                for &v in ch {
                    sum[k] += v as f64;
                    sq[k] += (v as f64) * (v as f64);
                }
            }
        }
        let count = (self.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / count - m * m).max(0.0).sqrt().max(1e-12)).collect();
        NormStats { mean, std }
    }

    /// `(x - mean_c) / std_c`, recording `stats`.
    pub fn standardize(&mut self, stats: &NormStats) -> Result<()> {
        let c = self.channels();
        if stats.mean.len() != c {
            return Err(HffError::dim(format!("stats for {} channels, data has {c}", stats.mean.len())));
        }
        let plane = self.sample_len() / c;
        let n = self.len();
        let data = self.images.data_mut();
        for i in 0..n {
            for k in 0..c {
                let (m, s) = (stats.mean[k], stats.std[k]);
                let start = i * c * plane + k * plane;
                for v in &mut data[start..start + plane] {
                    *v = ((*v as f64 - m) / s) as f32;
                }
            }
        }
        self.stats = Some(stats.clone());
        Ok(())
    }

    /// Row-major flattening to `N x (C*H*W)`.
    pub fn flatten(mut self) -> Result<Self> {
        let n = self.len();
        let d = self.sample_len();
        self.images = self.images.reshape(&[n, d])?;
        Ok(self)
    }

    pub fn unflatten(mut self, c: usize, h: usize, w: usize) -> Result<Self> {
        let n = self.len();
        self.images = self.images.reshape(&[n, c, h, w])?;
        Ok(self)
    }

    /// Rows `idx` as a new dataset.
    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        let width = self.sample_len();
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(self.images.row(i));
        }
        LabeledDataset {
            images: Tensor::new(&shape, data).expect("subset keeps row width"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            name: self.name.clone(),
            stats: self.stats.clone(),
            flippable: self.flippable,
        }
    }

    /// `(train, val)`: the validation part is the last `val_fraction` of a
    /// seeded shuffle.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(HffError::config(format!("val_fraction must be in [0, 1), got {val_fraction}")));
        }
        let n = self.len();
        let n_val = (n as f64 * val_fraction).round() as usize;
        let perm = permutation(n, &mut stream(seed, Purpose::Split, 0));
        let (train, val) = perm.split_at(n - n_val);
        Ok((self.subset(train), self.subset(val)))
    }

    /// Number of samples per class.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        self.labels.iter().for_each(|&y| h[y] += 1);
        h
    }
}

/// Seeded toy set of `per_class` samples per class in `[0, 1]^dim`: class `k`
/// is centred on 0.3 with coordinate `k % dim` raised to 1.0, plus isotropic
/// Gaussian noise of standard deviation `spread`, clamped to `[0, 1]`.
pub fn gaussian_blobs(per_class: usize, classes: usize, dim: usize, spread: f64, seed: u64) -> LabeledDataset {
    let noise = Normal::new(0.0, spread.max(0.0)).expect("finite spread");
    let mut rng = stream(seed, Purpose::Synthetic, 0);
    let n = per_class * classes;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        for j in 0..dim {
            let centre = if j == k % dim { 1.0 } else { 0.3 };
            data.push((centre + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32);
        }
        labels.push(k);
    }
    LabeledDataset {
        images: Tensor::new(&[n, dim], data).expect("blob rows"),
        labels,
        class_count: classes,
        name: "blobs".into(),
        stats: None,
        flippable: false,
    }
}

/// Random crop with padding and optional horizontal flip. Padded borders take
/// the standardized value of a raw zero pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augment {
    pub pad: usize,
    pub flip: bool,
    pub seed: u64,
}

/// One mini-batch, images as `B x ...` in the dataset's layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Iterates a dataset in batches, optionally shuffled (Fisher-Yates on the
/// shuffle stream for `epoch`) and augmented.
pub struct Batches<'a> {
    ds: &'a LabeledDataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    augment: Option<(Augment, ChaCha8Rng, Vec<f32>)>,
}

impl<'a> Batches<'a> {
    pub fn new(
        ds: &'a LabeledDataset,
        batch_size: usize,
        shuffle_seed: Option<u64>,
        augment: Option<Augment>,
        epoch: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(HffError::config("batch_size must be at least 1"));
        }
        let order = match shuffle_seed {
            Some(seed) => permutation(ds.len(), &mut stream(seed, Purpose::Shuffle, epoch)),
            None => (0..ds.len()).collect(),
        };
        let augment = match augment {
            Some(a) if a.pad > 0 || a.flip => {
                if ds.images.rank() != 4 {
                    return Err(HffError::config("augmentation needs N x C x H x W images"));
                }
                let fill = match &ds.stats {
                    Some(s) => s.mean.iter().zip(&s.std).map(|(m, sd)| (-m / sd) as f32).collect(),
                    None => vec![0.0; ds.channels()],
                };
                Some((a, stream(a.seed, Purpose::Augment, epoch), fill))
            }
            _ => None,
        };
        Ok(Batches { ds, order, pos: 0, batch_size, augment })
    }

    pub fn batch_count(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let width = self.ds.sample_len();
        let mut shape = self.ds.images.shape().to_vec();
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            let src = self.ds.images.row(i);
            match &mut self.augment {
                Some((a, rng, fill)) => {
                    let dims = (shape[1], shape[2], shape[3]);
                    let dy = rng.random_range(0..=2 * a.pad);
                    let dx = rng.random_range(0..=2 * a.pad);
                    let flip = a.flip && self.ds.flippable && rng.random_bool(0.5);
                    crop_flip(src, dims, a.pad, (dy, dx), flip, fill, &mut data);
                }
                None => data.extend_from_slice(src),
            }
        }
        Some(Batch {
            images: Tensor::new(&shape, data).expect("batch keeps row width"),
            labels: idx.iter().map(|&i| self.ds.labels[i]).collect(),
        })
    }
}

/// Appends the `H x W` window at `(dy, dx)` of the image padded by `pad`
/// with `fill[c]`, mirrored left-right when `flip`.
fn crop_flip(
    src: &[f32],
    (c, h, w): (usize, usize, usize),
    pad: usize,
    (dy, dx): (usize, usize),
    flip: bool,
    fill: &[f32],
    out: &mut Vec<f32>,
) {
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            let y = (i + dy) as isize - pad as isize;
            for j in 0..w {
                let jj = if flip { w - 1 - j } else { j };
                let x = (jj + dx) as isize - pad as isize;
                let inside = y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w;
                out.push(if inside { plane[y as usize * w + x as usize] } else { fill[ch] });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, c: usize, h: usize, w: usize) -> LabeledDataset {
        LabeledDataset {
            images: Tensor::from_fn(&[n, c, h, w], |i| (i % 17) as f32 / 16.0),
            labels: (0..n).map(|i| i % 3).collect(),
            class_count: 3,
            name: "toy".into(),
            stats: None,
            flippable: true,
        }
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        let pixels: Vec<u8> = (0..2 * 3 * 2).map(|i| (i * 20) as u8).collect();
        write_idx_images(&ip, 2, 3, 2, &pixels).unwrap();
        write_idx_labels(&lp, &[1, 0]).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.images.shape(), &[2, 1, 3, 2]);
        assert_eq!(ds.labels, vec![1, 0]);
        for (&p, &v) in pixels.iter().zip(ds.images.data()) {
            assert_eq!((v * 255.0).round() as u8, p);
        }
    }

    #[test]
    fn corrupted_magic_names_offset_zero() {
        let mut bytes = vec![0u8, 0, 8, 4];
        bytes.extend_from_slice(&[0; 12]);
        match parse_idx_images(&bytes, Path::new("x")) {
            Err(HffError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_image_file() {
        let mut bytes = Vec::new();
        for v in [IDX_IMAGES, 2, 2, 2] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        bytes.extend_from_slice(&[1, 2, 3]);
        assert!(matches!(parse_idx_images(&bytes, Path::new("x")), Err(HffError::Format { offset: 19, .. })));
    }

    #[test]
    fn cifar_record_length_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        fs::write(&p, vec![0u8; 3074]).unwrap();
        assert!(matches!(load_cifar(std::slice::from_ref(&p), CifarKind::Ten), Err(HffError::Format { .. })));
        let ds = load_cifar(&[p], CifarKind::Hundred { coarse: false }).unwrap();
        assert_eq!(ds.class_count, 100);
        assert_eq!(ds.images.shape(), &[1, 3, 32, 32]);
    }

    #[test]
    fn standardized_stats() {
        let mut ds = toy(20, 2, 4, 4);
        let s = ds.channel_stats();
        ds.standardize(&s).unwrap();
        let after = ds.channel_stats();
        for k in 0..2 {
            assert!(after.mean[k].abs() <= 1e-6);
            assert!((after.std[k] - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn flatten_round_trip() {
        let ds = toy(5, 3, 2, 4);
        let before = ds.images.clone();
        let flat = ds.flatten().unwrap();
        assert_eq!(flat.images.shape(), &[5, 24]);
        assert_eq!(flat.unflatten(3, 2, 4).unwrap().images, before);
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let ds = toy(50, 1, 2, 2);
        let (a, b) = ds.split(0.1, 7).unwrap();
        let (a2, b2) = ds.split(0.1, 7).unwrap();
        assert_eq!((a.len(), b.len()), (45, 5));
        assert_eq!(a.images, a2.images);
        assert_eq!(b.labels, b2.labels);
    }

    #[test]
    fn unaugmented_batches_copy_source() {
        let ds = toy(7, 1, 3, 3);
        let batches: Vec<Batch> = Batches::new(&ds, 3, None, None, 0).unwrap().collect();
        assert_eq!(batches.len(), 3);
        let joined: Vec<f32> = batches.iter().flat_map(|b| b.images.data().to_vec()).collect();
        assert_eq!(joined, ds.images.data());
    }

    #[test]
    fn augmented_batches_are_seeded() {
        let ds = toy(9, 2, 4, 4);
        let aug = Augment { pad: 2, flip: true, seed: 5 };
        let run = || -> Vec<Batch> { Batches::new(&ds, 4, Some(1), Some(aug), 0).unwrap().collect() };
        assert_eq!(run(), run());
    }

    #[test]
    fn crop_at_center_without_flip_is_identity() {
        let src: Vec<f32> = (0..9).map(|v| v as f32).collect();
        let mut out = Vec::new();
        crop_flip(&src, (1, 3, 3), 1, (1, 1), false, &[-1.0], &mut out);
        assert_eq!(out, src);
        out.clear();
        crop_flip(&src, (1, 3, 3), 1, (0, 0), false, &[-1.0], &mut out);
        assert_eq!(out, vec![-1.0, -1.0, -1.0, -1.0, 0.0, 1.0, -1.0, 3.0, 4.0]);
    }
}
