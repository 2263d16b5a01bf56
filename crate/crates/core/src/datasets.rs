//! Deterministic data ingestion: IDX files, synthetic Gaussian blobs, splits
//! and seeded batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Immutable image classification set; images are `[n, c, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::data(format!(
                "images must be [n, c, h, w], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::data(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::data(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if !images.is_finite() {
            return Err(Error::data("images contain non-finite values"));
        }
        Ok(Self {
            images,
            labels,
            class_count,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn sample(&self, n: usize) -> Result<Tensor> {
        self.images.slice_batch(n, n + 1)
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::data("empty subset"));
        }
        Ok(Self {
            images: self.images.gather_batch(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            class_count: self.class_count,
        })
    }

    /// Reinterprets the class count (labels must fit).
    pub fn with_class_count(self, class_count: usize) -> Result<Self> {
        Self::new(self.images, self.labels, class_count)
    }

    pub fn pixel_mean_std(&self) -> (f64, f64) {
        let d = self.images.data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d.len() as f64;
        (mean, var.sqrt())
    }

    /// `(x − mean) / std` on every pixel.
    pub fn standardize(&mut self, mean: f64, std: f64) -> Result<()> {
        if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
            return Err(Error::data(format!(
                "cannot standardize with mean {mean} and std {std}"
            )));
        }
        for v in self.images.data_mut() {
            *v = (*v - mean) / std;
        }
        Ok(())
    }
}

fn read_u32(bytes: &[u8], offset: usize, file: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            Error::format(
                file,
                bytes.len() as u64,
                format!("truncated header: needed bytes {offset}..{}", offset + 4),
            )
        })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX image file (`[n, rows, cols]` unsigned bytes) into
/// `[n, 1, rows, cols]` values scaled into `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], file: &str) -> Result<Tensor> {
    let magic = read_u32(bytes, 0, file)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            file,
            0,
            format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = read_u32(bytes, 4, file)? as usize;
    let rows = read_u32(bytes, 8, file)? as usize;
    let cols = read_u32(bytes, 12, file)? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::format(file, 4, "zero-sized dimension"));
    }
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(Error::format(
            file,
            bytes.len() as u64,
            format!("truncated pixel data: expected {need} bytes"),
        ));
    }
    let data = bytes[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8], file: &str) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0, file)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            file,
            0,
            format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n = read_u32(bytes, 4, file)? as usize;
    let need = 8 + n;
    if bytes.len() < need {
        return Err(Error::format(
            file,
            bytes.len() as u64,
            format!("truncated label data: expected {need} bytes"),
        ));
    }
    Ok(bytes[8..need].iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label pair. The class count is `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = parse_idx_images(&read_file(images_path)?, &images_path.display().to_string())?;
    let labels = parse_idx_labels(&read_file(labels_path)?, &labels_path.display().to_string())?;
    if images.shape()[0] != labels.len() {
        return Err(Error::data(format!(
            "{} holds {} images but {} holds {} labels",
            images_path.display(),
            images.shape()[0],
            labels_path.display(),
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(images, labels, classes)
}

/// Writes a single-channel dataset back to IDX (pixels rounded to bytes).
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let [c, h, w] = dataset.sample_shape();
    if c != 1 {
        return Err(Error::data("IDX export supports single-channel images only"));
    }
    if dataset.labels.iter().any(|&l| l > 255) {
        return Err(Error::data("IDX labels must fit in a byte"));
    }
    let mut img = Vec::with_capacity(16 + dataset.images.numel());
    for v in [IDX_IMAGES_MAGIC, dataset.len() as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(
        dataset
            .images
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut lab = Vec::with_capacity(8 + dataset.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    lab.extend(dataset.labels.iter().map(|&l| l as u8));
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

/// One Gaussian bump per class, centred on a ring around the image centre,
/// with per-sample jitter, amplitude variation and pixel noise. Samples are
/// interleaved by class (`label = i mod classes`).
pub fn synthetic_blobs(classes: usize, per_class: usize, image_side: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 || per_class == 0 || image_side < 2 {
        return Err(Error::config(format!(
            "synthetic blobs need classes ≥ 2, per_class ≥ 1, side ≥ 2 (got {classes}, {per_class}, {image_side})"
        )));
    }
    let side = image_side as f64;
    let mid = (side - 1.0) / 2.0;
    let radius = side / 3.0;
    let sigma = side / 7.0;
    let jitter = Normal::new(0.0, side / 20.0).expect("positive std");
    let noise = Normal::new(0.0, 0.05).expect("positive std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * image_side * image_side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let angle = std::f64::consts::TAU * class as f64 / classes as f64;
        let cy = mid + radius * angle.sin() + jitter.sample(&mut rng);
        let cx = mid + radius * angle.cos() + jitter.sample(&mut rng);
        let amp: f64 = rng.gen_range(0.7..1.0);
        for y in 0..image_side {
            for x in 0..image_side {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let v = amp * (-d2 / (2.0 * sigma * sigma)).exp() + noise.sample(&mut rng);
                data.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(class);
    }
    Dataset::new(
        Tensor::new(vec![n, 1, image_side, image_side], data)?,
        labels,
        classes,
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|v| !v.is_finite() || *v < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split fractions {f:?} must be nonnegative and sum to 1"
            )));
        }
        Ok(())
    }
}

/// Seeded shuffle, then contiguous train/val/test ranges with boundaries at
/// `round(train·n)` and `round((train + val)·n)`. A split whose fraction is
/// positive but whose size rounds to zero is an error; a zero-fraction split
/// comes back as `None`.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Option<Dataset>, Option<Dataset>, Option<Dataset>)> {
    spec.validate()?;
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let b1 = ((spec.train * n as f64).round() as usize).min(n);
    let b2 = (((spec.train + spec.val) * n as f64).round() as usize).clamp(b1, n);
    let part = |range: std::ops::Range<usize>, frac: f64, name: &str| -> Result<Option<Dataset>> {
        if range.is_empty() {
            if frac > 0.0 {
                return Err(Error::data(format!(
                    "{name} split is empty: {n} samples are too few for fraction {frac}"
                )));
            }
            return Ok(None);
        }
        dataset.subset(&order[range]).map(Some)
    };
    Ok((
        part(0..b1, spec.train, "train")?,
        part(b1..b2, spec.val, "val")?,
        part(b2..n, spec.test, "test")?,
    ))
}

/// Sample order for one epoch; depends only on `(shuffle_seed, epoch_index)`.
pub fn epoch_order(n: usize, shuffle_seed: u64, epoch_index: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    rng.set_stream(epoch_index);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Shuffled mini-batches; the last batch may be partial.
pub fn batches<'a>(
    dataset: &'a Dataset,
    batch_size: usize,
    shuffle_seed: u64,
    epoch_index: u64,
) -> Result<impl Iterator<Item = Result<(Tensor, Vec<usize>)>> + 'a> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let order = epoch_order(dataset.len(), shuffle_seed, epoch_index);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().map(move |rows| {
        let images = dataset.images.gather_batch(&rows)?;
        let labels = rows.iter().map(|&r| dataset.labels[r]).collect();
        Ok((images, labels))
    }))
}
