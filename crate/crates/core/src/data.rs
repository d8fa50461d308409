//! Dataset loading and the synthetic toy benchmark.
//!
//! Three sources share one in-memory format:
//! - `toy_images`: generated class-template images plus noise, deterministic
//!   in the seed; no files involved.
//! - `csv_images`: a directory with `meta.toml` (channels/height/width/
//!   classes) and `train.csv` / `test.csv`, one sample per line:
//!   `label,v0,v1,...` with C*H*W row-major values.
//! - `kws_mfcc`: same layout for precomputed single-channel feature maps
//!   (e.g. MFCC time x coefficient grids).
//!
//! All loaders normalize per channel to zero mean / unit variance with
//! statistics computed on the training split only.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Dataset {
    /// Flat samples, n * channels * height * width, row-major.
    pub xs: Vec<f64>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Gather the given samples into one NCHW batch tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let stride = self.sample_numel();
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.xs[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let t = Tensor::from_vec(&[indices.len(), self.channels, self.height, self.width], data)
            .expect("batch shape");
        (t, labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let stride = self.sample_numel();
        let mut xs = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            xs.extend_from_slice(&self.xs[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        Dataset { xs, labels, ..*self }
    }

    /// Per-channel (mean, std) over all samples.
    pub fn channel_stats(&self) -> Vec<(f64, f64)> {
        let plane = self.height * self.width;
        let stride = self.sample_numel();
        let n = self.len();
        let mut stats = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for s in 0..n {
                let base = s * stride + c * plane;
                for v in &self.xs[base..base + plane] {
                    sum += v;
                    sumsq += v * v;
                }
            }
            let cnt = (n * plane) as f64;
            let mean = sum / cnt;
            let var = (sumsq / cnt - mean * mean).max(0.0);
            stats.push((mean, var.sqrt()));
        }
        stats
    }

    fn apply_affine(&mut self, stats: &[(f64, f64)]) {
        let plane = self.height * self.width;
        let stride = self.sample_numel();
        for s in 0..self.len() {
            for c in 0..self.channels {
                let (mean, std) = stats[c];
                let denom = if std > 0.0 { std } else { 1.0 };
                let base = s * stride + c * plane;
                for v in &mut self.xs[base..base + plane] {
                    *v = (*v - mean) / denom;
                }
            }
        }
    }
}

/// Normalize train and test with statistics computed on train only.
pub fn normalize_pair(train: &mut Dataset, test: &mut Dataset) -> Vec<(f64, f64)> {
    let stats = train.channel_stats();
    train.apply_affine(&stats);
    test.apply_affine(&stats);
    stats
}

pub const TOY_CLASSES: usize = 10;
pub const TOY_SIDE: usize = 16;
pub const TOY_TRAIN: usize = 512;
pub const TOY_TEST: usize = 256;

/// The default synthetic benchmark: 16x16x3 images, 10 classes.
pub fn toy_images(seed: u64) -> (Dataset, Dataset) {
    toy_images_sized(seed, 3, TOY_SIDE, TOY_SIDE, TOY_CLASSES, TOY_TRAIN, TOY_TEST)
}

/// Synthetic images: per class, a smooth random template (a coarse grid
/// upsampled bilinearly); each sample is its class template plus white
/// noise. Deterministic in the seed, balanced classes, normalized on train
/// statistics.
pub fn toy_images_sized(
    seed: u64,
    channels: usize,
    height: usize,
    width: usize,
    classes: usize,
    n_train: usize,
    n_test: usize,
) -> (Dataset, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let grid = 4usize;

    // class templates
    let mut templates = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut tpl = vec![0.0; channels * height * width];
        for c in 0..channels {
            let coarse: Vec<f64> = (0..grid * grid).map(|_| 1.3 * normal.sample(&mut rng)).collect();
            for y in 0..height {
                for x in 0..width {
                    let gy = y as f64 * (grid - 1) as f64 / (height - 1).max(1) as f64;
                    let gx = x as f64 * (grid - 1) as f64 / (width - 1).max(1) as f64;
                    let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(grid - 1), (x0 + 1).min(grid - 1));
                    let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
                    let v = coarse[y0 * grid + x0] * (1.0 - fy) * (1.0 - fx)
                        + coarse[y0 * grid + x1] * (1.0 - fy) * fx
                        + coarse[y1 * grid + x0] * fy * (1.0 - fx)
                        + coarse[y1 * grid + x1] * fy * fx;
                    tpl[(c * height + y) * width + x] = v;
                }
            }
        }
        templates.push(tpl);
    }

    let mut make = |n: usize| -> Dataset {
        let stride = channels * height * width;
        let mut xs = Vec::with_capacity(n * stride);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % classes;
            labels.push(class);
            let tpl = &templates[class];
            xs.extend(tpl.iter().map(|&t| t + 0.6 * normal.sample(&mut rng)));
        }
        Dataset { xs, labels, channels, height, width, classes }
    };
    let mut train = make(n_train);
    let mut test = make(n_test);
    normalize_pair(&mut train, &mut test);
    (train, test)
}

#[derive(Debug, Deserialize)]
struct DatasetMeta {
    channels: usize,
    height: usize,
    width: usize,
    classes: usize,
}

fn load_csv_split(path: &Path, meta: &DatasetMeta) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let stride = meta.channels * meta.height * meta.width;
    let mut xs = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("{}:{}: bad label", path.display(), lineno + 1)))?;
        if label >= meta.classes {
            return Err(Error::Data(format!(
                "{}:{}: label {label} out of range for {} classes",
                path.display(),
                lineno + 1,
                meta.classes
            )));
        }
        let mut count = 0usize;
        for f in fields {
            let v: f64 = f.trim().parse().map_err(|_| {
                Error::Data(format!("{}:{}: bad value `{f}`", path.display(), lineno + 1))
            })?;
            xs.push(v);
            count += 1;
        }
        if count != stride {
            return Err(Error::Data(format!(
                "{}:{}: expected {stride} values (C*H*W), got {count}",
                path.display(),
                lineno + 1
            )));
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Data(format!("{}: no samples", path.display())));
    }
    Ok(Dataset {
        xs,
        labels,
        channels: meta.channels,
        height: meta.height,
        width: meta.width,
        classes: meta.classes,
    })
}

fn load_csv_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let meta_text = std::fs::read_to_string(dir.join("meta.toml"))
        .map_err(|e| Error::Data(format!("{}/meta.toml: {e}", dir.display())))?;
    let meta: DatasetMeta =
        toml::from_str(&meta_text).map_err(|e| Error::Data(format!("meta.toml: {e}")))?;
    if meta.channels == 0 || meta.height == 0 || meta.width == 0 || meta.classes == 0 {
        return Err(Error::Data("meta.toml: all dimensions must be positive".into()));
    }
    let mut train = load_csv_split(&dir.join("train.csv"), &meta)?;
    let mut test = load_csv_split(&dir.join("test.csv"), &meta)?;
    normalize_pair(&mut train, &mut test);
    Ok((train, test))
}

/// Load one of the named dataset sources. `path` is required for the
/// file-backed ones; the seed only matters for `toy_images`.
pub fn load_dataset(name: &str, path: Option<&Path>, seed: u64) -> Result<(Dataset, Dataset)> {
    match name {
        "toy_images" => Ok(toy_images(seed)),
        "csv_images" => {
            let dir = path.ok_or_else(|| Error::Data("csv_images needs --data-path".into()))?;
            load_csv_dir(dir)
        }
        "kws_mfcc" => {
            let dir = path.ok_or_else(|| Error::Data("kws_mfcc needs --data-path".into()))?;
            let (train, test) = load_csv_dir(dir)?;
            if train.channels != 1 {
                return Err(Error::Data(format!(
                    "kws_mfcc expects single-channel feature maps, got {} channels",
                    train.channels
                )));
            }
            Ok((train, test))
        }
        other => Err(Error::Data(format!("unknown dataset `{other}`"))),
    }
}
