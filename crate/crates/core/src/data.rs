//! Labeled datasets, batches and on-disk loaders.
//!
//! Two raw-binary directory layouts are understood:
//!
//! * `idx` — `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
//!   `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte` (the MNIST layout;
//!   single-channel `u8` images).
//! * `cifar` — `data_batch_1.bin` … `data_batch_5.bin` and `test_batch.bin`,
//!   each record a label byte followed by a 3×32×32 `u8` image.
//!
//! Pixels are scaled to `[0, 1]`; [`standardize`] then centers both splits
//! with the training statistics.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    name: String,
    split: Split,
    shape: [usize; 3],
    n_classes: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

/// Inputs stacked as `[n, c, h, w]` plus their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn from_samples<'a, I>(shape: [usize; 3], samples: I) -> Result<Batch>
    where
        I: IntoIterator<Item = (&'a [f64], usize)>,
    {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let d: usize = shape.iter().product();
        for (x, y) in samples {
            if x.len() != d {
                return Err(shape_err(format!(
                    "sample has {} values, expected {d}",
                    x.len()
                )));
            }
            data.extend_from_slice(x);
            labels.push(y);
        }
        let x = Tensor::from_vec(&[labels.len(), shape[0], shape[1], shape[2]], data)?;
        Ok(Batch { x, labels })
    }

    pub fn concat(a: &Batch, b: &Batch) -> Result<Batch> {
        let mut labels = a.labels.clone();
        labels.extend_from_slice(&b.labels);
        Ok(Batch {
            x: Tensor::concat(&[&a.x, &b.x])?,
            labels,
        })
    }
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        shape: [usize; 3],
        n_classes: usize,
        inputs: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let d: usize = shape.iter().product();
        if n_classes == 0 {
            return Err(config_err("dataset needs at least one class"));
        }
        if inputs.len() != d * labels.len() {
            return Err(shape_err(format!(
                "{} values do not hold {} inputs of shape {shape:?}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(config_err(format!(
                "label {bad} outside {n_classes} classes"
            )));
        }
        Ok(Self {
            name: name.into(),
            split,
            shape,
            n_classes,
            inputs,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let d = self.input_len();
        &self.inputs[i * d..(i + 1) * d]
    }

    pub fn input_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Indices of every sample of class `c`, in dataset order.
    pub fn class_indices(&self, c: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == c).collect()
    }

    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        Batch::from_samples(
            self.shape,
            indices.iter().map(|&i| (self.input(i), self.labels[i])),
        )
    }

    /// Average-pools every image by `factor` along both spatial axes.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor <= 1 {
            return Ok(self.clone());
        }
        let [c, h, w] = self.shape;
        if h % factor != 0 || w % factor != 0 {
            return Err(config_err(format!("cannot downsample {h}x{w} by {factor}")));
        }
        let (oh, ow) = (h / factor, w / factor);
        let mut out = Vec::with_capacity(self.len() * c * oh * ow);
        let norm = (factor * factor) as f64;
        for i in 0..self.len() {
            let img = self.input(i);
            for ch in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut s = 0.0;
                        for dy in 0..factor {
                            for dx in 0..factor {
                                s += img[(ch * h + y * factor + dy) * w + x * factor + dx];
                            }
                        }
                        out.push(s / norm);
                    }
                }
            }
        }
        Self::new(
            self.name.clone(),
            self.split,
            [c, oh, ow],
            self.n_classes,
            out,
            self.labels.clone(),
        )
    }

    fn mean_std(&self) -> (f64, f64) {
        let n = self.inputs.len().max(1) as f64;
        let mean = self.inputs.iter().sum::<f64>() / n;
        let var = self.inputs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt().max(1e-12))
    }

    fn apply_affine(&mut self, mean: f64, std: f64) {
        self.inputs.iter_mut().for_each(|v| *v = (*v - mean) / std);
    }

    /// Synthetic isotropic Gaussian clusters, one per class, with
    /// seed-derived centers. Train and test splits drawn with the same seed
    /// share their centers.
    pub fn gaussian_blobs(
        n_classes: usize,
        per_class: usize,
        shape: [usize; 3],
        spread: f64,
        seed: u64,
        split: Split,
    ) -> Result<Self> {
        let d: usize = shape.iter().product();
        let mut center_rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<Vec<f64>> = (0..n_classes)
            .map(|_| (0..d).map(|_| center_rng.random_range(-1.0..1.0)).collect())
            .collect();
        let stream = match split {
            Split::Train => 1,
            Split::Test => 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(stream));
        let noise = Normal::new(0.0, spread).map_err(|e| config_err(e.to_string()))?;
        let mut inputs = Vec::with_capacity(n_classes * per_class * d);
        let mut labels = Vec::with_capacity(n_classes * per_class);
        for i in 0..per_class {
            for (c, center) in centers.iter().enumerate() {
                let _ = i;
                inputs.extend(center.iter().map(|m| m + noise.sample(&mut rng)));
                labels.push(c);
            }
        }
        Self::new("blobs", split, shape, n_classes, inputs, labels)
    }
}

/// Centers and scales both splits with the training split's statistics.
pub fn standardize(train: &mut LabeledDataset, test: &mut LabeledDataset) {
    let (mean, std) = train.mean_std();
    train.apply_affine(mean, std);
    test.apply_affine(mean, std);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Idx,
    Cifar,
}

fn read_be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Parses an IDX image file (`u8`, 3 dimensions) and its label file.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<([usize; 3], Vec<f64>, Vec<usize>)> {
    if read_be_u32(images, 0)? != 0x0803 {
        return Err(Error::Format(
            "image file is not an 8-bit 3-D IDX file".into(),
        ));
    }
    if read_be_u32(labels, 0)? != 0x0801 {
        return Err(Error::Format(
            "label file is not an 8-bit 1-D IDX file".into(),
        ));
    }
    let n = read_be_u32(images, 4)? as usize;
    let h = read_be_u32(images, 8)? as usize;
    let w = read_be_u32(images, 12)? as usize;
    let nl = read_be_u32(labels, 4)? as usize;
    if n != nl {
        return Err(Error::Format(format!("{n} images but {nl} labels")));
    }
    let body = images
        .get(16..16 + n * h * w)
        .ok_or_else(|| Error::Format("truncated IDX image body".into()))?;
    let lab = labels
        .get(8..8 + n)
        .ok_or_else(|| Error::Format("truncated IDX label body".into()))?;
    Ok((
        [1, h, w],
        body.iter().map(|&b| b as f64 / 255.0).collect(),
        lab.iter().map(|&b| b as usize).collect(),
    ))
}

/// Parses concatenated CIFAR-10 binary records.
pub fn parse_cifar(bytes: &[u8]) -> Result<(Vec<f64>, Vec<usize>)> {
    const REC: usize = 1 + 3 * 32 * 32;
    if !bytes.len().is_multiple_of(REC) {
        return Err(Error::Format(
            "CIFAR batch length is not a whole number of records".into(),
        ));
    }
    let mut inputs = Vec::with_capacity(bytes.len() / REC * (REC - 1));
    let mut labels = Vec::with_capacity(bytes.len() / REC);
    for rec in bytes.chunks(REC) {
        labels.push(rec[0] as usize);
        inputs.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((inputs, labels))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

/// Loads the train and test splits stored under `dir`.
pub fn load_dir(
    dir: &Path,
    name: &str,
    format: DatasetFormat,
    n_classes: usize,
) -> Result<(LabeledDataset, LabeledDataset)> {
    match format {
        DatasetFormat::Idx => {
            let mut out = Vec::new();
            for (prefix, split) in [("train", Split::Train), ("t10k", Split::Test)] {
                let images = read(&dir.join(format!("{prefix}-images-idx3-ubyte")))?;
                let labels = read(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
                let (shape, x, y) = parse_idx(&images, &labels)?;
                out.push(LabeledDataset::new(name, split, shape, n_classes, x, y)?);
            }
            let test = out.pop().expect("two splits");
            let train = out.pop().expect("two splits");
            Ok((train, test))
        }
        DatasetFormat::Cifar => {
            let mut x = Vec::new();
            let mut y = Vec::new();
            for b in 1..=5 {
                let (bx, by) = parse_cifar(&read(&dir.join(format!("data_batch_{b}.bin")))?)?;
                x.extend(bx);
                y.extend(by);
            }
            let train = LabeledDataset::new(name, Split::Train, [3, 32, 32], n_classes, x, y)?;
            let (tx, ty) = parse_cifar(&read(&dir.join("test_batch.bin"))?)?;
            let test = LabeledDataset::new(name, Split::Test, [3, 32, 32], n_classes, tx, ty)?;
            Ok((train, test))
        }
    }
}
