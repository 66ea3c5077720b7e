//! Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches and a
//! synthetic Gaussian-blob generator.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;

/// Images `[N, C, H, W]` with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Gathers the samples at `indices` into a contiguous batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.images.per_sample();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.images.sample(i));
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("gathered batch shape"), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset {
            images,
            labels,
            classes: self.classes,
        }
    }

    /// The first `n` samples (all of them if `n >= len`).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Contiguous batches in storage order; the last one may be short.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = (Tensor, Vec<usize>)> + '_ {
        let n = self.len();
        let bs = batch_size.max(1);
        (0..n.div_ceil(bs)).map(move |b| {
            let idx: Vec<usize> = (b * bs..((b + 1) * bs).min(n)).collect();
            self.batch(&idx)
        })
    }
}

/// Train/validation/test splits with the per-channel statistics used to
/// normalize them (computed on the training split only).
#[derive(Clone, Debug)]
pub struct DatasetHandle {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Fraction of the training file held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            val_fraction: 0.1,
            seed: 0,
            train_limit: None,
            test_limit: None,
        }
    }
}

/// Per-channel mean and population standard deviation of `[N, C, H, W]`.
pub fn channel_stats(images: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = images.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for sample in images.data().chunks_exact(c * hw) {
        for (ch, plane) in sample.chunks_exact(hw).enumerate() {
            for &x in plane {
                sum[ch] += x;
                sq[ch] += x * x;
            }
        }
    }
    let count = (s[0] * hw) as f64;
    let mean: Vec<f64> = sum.iter().map(|v| v / count).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let var = (q / count - m * m).max(0.0);
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

pub fn normalize(images: &mut Tensor, mean: &[f64], std: &[f64]) {
    let s = images.shape().to_vec();
    let (c, hw) = (s[1], s[2] * s[3]);
    for sample in images.data_mut().chunks_exact_mut(c * hw) {
        for (ch, plane) in sample.chunks_exact_mut(hw).enumerate() {
            for x in plane {
                *x = (*x - mean[ch]) / std[ch];
            }
        }
    }
}

/// Holds out a validation split, then normalizes every split with the
/// training split's channel statistics.
pub fn build_handle(train_full: Dataset, test: Dataset, split: &SplitConfig) -> Result<DatasetHandle> {
    if train_full.is_empty() {
        return Err(Error::EmptyDataset("training split"));
    }
    if !(0.0..1.0).contains(&split.val_fraction) {
        return Err(Error::Config(format!(
            "val_fraction {} outside [0, 1)",
            split.val_fraction
        )));
    }
    let mut idx: Vec<usize> = (0..train_full.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(split.seed);
    idx.shuffle(&mut rng);
    if let Some(limit) = split.train_limit {
        idx.truncate(limit.min(idx.len()));
    }
    let n_val = ((idx.len() as f64) * split.val_fraction).round() as usize;
    let (train_idx, val_idx) = idx.split_at(idx.len() - n_val);
    let mut train = train_full.subset(train_idx);
    let mut val = train_full.subset(val_idx);
    let mut test = match split.test_limit {
        Some(limit) => test.head(limit),
        None => test,
    };
    let (mean, std) = channel_stats(&train.images);
    normalize(&mut train.images, &mean, &std);
    normalize(&mut val.images, &mean, &std);
    normalize(&mut test.images, &mean, &std);
    Ok(DatasetHandle {
        train,
        val,
        test,
        mean,
        std,
    })
}

fn parse_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            parse_err(
                path,
                bytes.len(),
                format!("file ends before the header field at byte {offset}"),
            )
        })
}

/// Reads an IDX3 image file, scaling pixels to `[0, 1]`. Returns `[N, 1, rows, cols]`.
pub fn read_idx_images(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(parse_err(
            path,
            0,
            format!("bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        ));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("truncated: header declares {n}x{rows}x{cols} pixels ({need} bytes)"),
        ));
    }
    let data = bytes[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(parse_err(
            path,
            0,
            format!("bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        ));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    if bytes.len() < 8 + n {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("truncated: header declares {n} labels"),
        ));
    }
    Ok(bytes[8..8 + n].iter().map(|&b| b as usize).collect())
}

/// Writes `[N, 1, rows, cols]` pixels in `[0, 1]` as an IDX3 file (rounded to bytes).
pub fn write_idx_images(path: &Path, images: &Tensor) -> Result<()> {
    let s = images.shape();
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IDX_IMAGES_MAGIC, s[0] as u32, s[2] as u32, s[3] as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(
        images
            .data()
            .iter()
            .map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct MnistPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistPaths {
    /// Standard file names (`train-images-idx3-ubyte`, ...) inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        MnistPaths {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        }
    }

    pub fn exist(&self) -> bool {
        [
            &self.train_images,
            &self.train_labels,
            &self.test_images,
            &self.test_labels,
        ]
        .iter()
        .all(|p| p.is_file())
    }
}

fn idx_dataset(images: &Path, labels: &Path) -> Result<Dataset> {
    let images_t = read_idx_images(images)?;
    let labels_v = read_idx_labels(labels)?;
    if images_t.batch() != labels_v.len() {
        return Err(parse_err(
            labels,
            4,
            format!("{} labels for {} images", labels_v.len(), images_t.batch()),
        ));
    }
    Ok(Dataset {
        images: images_t,
        classes: labels_v.iter().max().map_or(0, |m| m + 1).max(10),
        labels: labels_v,
    })
}

pub fn load_mnist_idx(paths: &MnistPaths, split: &SplitConfig) -> Result<DatasetHandle> {
    let train = idx_dataset(&paths.train_images, &paths.train_labels)?;
    let test = idx_dataset(&paths.test_images, &paths.test_labels)?;
    build_handle(train, test, split)
}

/// Parses concatenated CIFAR-10 binary records into `[N, 3, 32, 32]`.
pub fn read_cifar10_binary(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        let whole = bytes.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES;
        return Err(parse_err(
            path,
            whole,
            format!(
                "length {} is not a positive multiple of the {CIFAR_RECORD_BYTES}-byte record",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        if rec[0] > 9 {
            return Err(parse_err(
                path,
                i * CIFAR_RECORD_BYTES,
                format!("label {} out of range", rec[0]),
            ));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, 3, 32, 32], data)?,
        labels,
        classes: 10,
    })
}

#[derive(Clone, Debug)]
pub struct Cifar10Paths {
    pub train: Vec<PathBuf>,
    pub test: PathBuf,
}

impl Cifar10Paths {
    /// `data_batch_{1..5}.bin` and `test_batch.bin` inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Cifar10Paths {
            train: (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
            test: dir.join("test_batch.bin"),
        }
    }
}

pub fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let first = parts.first().ok_or(Error::EmptyDataset("no dataset parts"))?;
    let mut shape = first.images.shape().to_vec();
    let classes = first.classes;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        if p.images.shape()[1..] != shape[1..] {
            return Err(Error::shape("dataset parts have different sample shapes"));
        }
        labels.extend(p.labels);
        data.extend(p.images.into_data());
    }
    shape[0] = labels.len();
    Ok(Dataset {
        images: Tensor::new(shape, data)?,
        labels,
        classes,
    })
}

pub fn load_cifar10_binary(paths: &Cifar10Paths, split: &SplitConfig) -> Result<DatasetHandle> {
    let train = concat(
        paths
            .train
            .iter()
            .map(|p| read_cifar10_binary(p))
            .collect::<Result<_>>()?,
    )?;
    let test = read_cifar10_binary(&paths.test)?;
    build_handle(train, test, split)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    /// Side length of the square single-channel images.
    pub size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 4,
            samples_per_class: 100,
            size: 8,
            seed: 0,
        }
    }
}

fn blob_images(cfg: &SyntheticConfig, count: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let s = cfg.size;
    let noise = Normal::new(0.0, 0.15).expect("valid std");
    let sigma = (s as f64 / 6.0).max(0.75);
    let radius = s as f64 * 0.3;
    let centre = (s as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(count * s * s);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % cfg.classes;
        let angle = std::f64::consts::TAU * class as f64 / cfg.classes as f64;
        let cy = centre + radius * angle.sin() + rng.random_range(-0.5..0.5);
        let cx = centre + radius * angle.cos() + rng.random_range(-0.5..0.5);
        for y in 0..s {
            for x in 0..s {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                data.push((-d2 / (2.0 * sigma * sigma)).exp() + noise.sample(rng));
            }
        }
        labels.push(class);
    }
    Dataset {
        images: Tensor::new(vec![count, 1, s, s], data).expect("blob shape"),
        labels,
        classes: cfg.classes,
    }
}

/// One Gaussian blob per class placed on a ring, plus pixel noise. Class
/// counts are exactly balanced; the test split holds a quarter as many
/// samples per class as the training file.
pub fn synthetic_dataset(cfg: &SyntheticConfig, split: &SplitConfig) -> Result<DatasetHandle> {
    if cfg.classes < 2 || cfg.samples_per_class == 0 || cfg.size < 4 {
        return Err(Error::Config(format!(
            "synthetic dataset needs >= 2 classes, samples and size >= 4: {cfg:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = blob_images(cfg, cfg.classes * cfg.samples_per_class, &mut rng);
    let test = blob_images(cfg, cfg.classes * (cfg.samples_per_class / 4).max(1), &mut rng);
    build_handle(train, test, split)
}

/// Pad-by-4 random crop and a horizontal flip with probability 0.5, per sample.
pub fn augment_batch(batch: &mut Tensor, rng: &mut impl Rng) {
    const PAD: isize = 4;
    let s = batch.shape().to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut scratch = vec![0.0; c * h * w];
    for i in 0..s[0] {
        let dy = rng.random_range(-(PAD as i64)..=PAD as i64) as isize;
        let dx = rng.random_range(-(PAD as i64)..=PAD as i64) as isize;
        let flip = rng.random_bool(0.5);
        let sample = batch.sample_mut(i);
        scratch.copy_from_slice(sample);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = if flip { (w - 1 - x) as isize } else { x as isize };
                    let sx = sx0 + dx;
                    let v = if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        0.0
                    } else {
                        scratch[(ch * h + sy as usize) * w + sx as usize]
                    };
                    sample[(ch * h + y) * w + x] = v;
                }
            }
        }
    }
}
