//! Datasets: MNIST IDX files, a seeded synthetic corpus, and batching.
//!
//! Pixels are stored as f32 in `[0, 1]` (bytes divided by 255, no further
//! standardization). Every [`ImageBatch`] checks that range on construction.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: truncated, expected {expected} bytes but found {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("pixel {index} has value {value}, outside [0, 1]")]
    PixelRange { index: usize, value: f32 },
    #[error("label {label} at index {index} is outside [0, {classes})")]
    LabelRange { index: usize, label: usize, classes: usize },
    #[error("batch size must be at least 1")]
    InvalidBatchSize,
    #[error("invalid synthetic dataset: {0}")]
    InvalidSynthetic(String),
    #[error("image buffer holds {actual} values, expected {expected}")]
    ImageBuffer { expected: usize, actual: usize },
    #[error("requested {requested} items but dataset holds {available}")]
    TooFew { requested: usize, available: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Mnist => "mnist",
            Source::Synthetic => "synthetic",
        })
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// A batch of `[n, c, h, w]` images in `[0, 1]` with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    images: Tensor,
    labels: Vec<usize>,
    indices: Vec<usize>,
}

impl ImageBatch {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self, DataError> {
        let indices = (0..labels.len()).collect();
        Self::with_indices(images, labels, indices)
    }

    /// Like [`ImageBatch::new`], recording which dataset items were drawn.
    pub fn with_indices(images: Tensor, labels: Vec<usize>, indices: Vec<usize>) -> Result<Self, DataError> {
        let n = images.shape().first().copied().unwrap_or(0);
        if n != labels.len() || indices.len() != labels.len() {
            return Err(DataError::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        check_pixels(images.data())?;
        Ok(Self {
            images,
            labels,
            indices,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Dataset positions of the items in this batch.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check_pixels(data: &[f32]) -> Result<(), DataError> {
    match data.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(index) => Err(DataError::PixelRange {
            index,
            value: data[index],
        }),
        None => Ok(()),
    }
}

/// An in-memory labelled image set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    source: Source,
    split: Split,
    item_shape: [usize; 3],
    classes: usize,
    images: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        source: Source,
        split: Split,
        item_shape: [usize; 3],
        classes: usize,
        images: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self, DataError> {
        let per: usize = item_shape.iter().product();
        if images.len() != per * labels.len() {
            return Err(DataError::ImageBuffer {
                expected: per * labels.len(),
                actual: images.len(),
            });
        }
        check_pixels(&images)?;
        if let Some(index) = labels.iter().position(|&l| l >= classes) {
            return Err(DataError::LabelRange {
                index,
                label: labels[index],
                classes,
            });
        }
        Ok(Self {
            source,
            split,
            item_shape,
            classes,
            images,
            labels,
        })
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Short identifier such as `mnist-test`.
    pub fn id(&self) -> String {
        format!("{}-{}", self.source, self.split)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn item_shape(&self) -> [usize; 3] {
        self.item_shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.item_len();
        &self.images[i * per..(i + 1) * per]
    }

    fn item_len(&self) -> usize {
        self.item_shape.iter().product()
    }

    /// Copies the listed items into one batch.
    pub fn gather(&self, indices: &[usize]) -> ImageBatch {
        let per = self.item_len();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.item_shape;
        let images = Tensor::new(vec![indices.len(), c, h, w], data).expect("gathered batch is non-empty");
        ImageBatch {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            indices: indices.to_vec(),
        }
    }

    /// The first `n` items as a new dataset.
    pub fn take(&self, n: usize) -> Result<Dataset, DataError> {
        if n > self.len() {
            return Err(DataError::TooFew {
                requested: n,
                available: self.len(),
            });
        }
        Ok(Dataset {
            images: self.images[..n * self.item_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone_header()
        })
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            source: self.source,
            split: self.split,
            item_shape: self.item_shape,
            classes: self.classes,
            images: Vec::new(),
            labels: Vec::new(),
        }
    }

    /// One epoch in a seeded random order, split into `batch_size` chunks;
    /// the final short batch is kept.
    pub fn batches(&self, batch_size: usize, seed: u64) -> Result<Batches<'_>, DataError> {
        let order = epoch_order(self.len(), seed);
        Batches::new(self, order, batch_size)
    }

    /// One pass in dataset order.
    pub fn ordered_batches(&self, batch_size: usize) -> Result<Batches<'_>, DataError> {
        Batches::new(self, (0..self.len()).collect(), batch_size)
    }
}

/// A seeded permutation of `0..n`.
pub fn epoch_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Iterator over the batches of one epoch.
#[derive(Debug)]
pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> Batches<'a> {
    fn new(data: &'a Dataset, order: Vec<usize>, batch_size: usize) -> Result<Self, DataError> {
        if batch_size == 0 {
            return Err(DataError::InvalidBatchSize);
        }
        Ok(Self {
            data,
            order,
            batch_size,
            pos: 0,
        })
    }

    /// The full item order of this epoch.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn batch_count(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = ImageBatch;

    fn next(&mut self) -> Option<ImageBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.data.gather(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Truncated {
            path: path.to_path_buf(),
            expected: at + 4,
            actual: bytes.len(),
        })
}

/// Raw contents of an IDX image file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols).max(1)
    }
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<IdxImages, DataError> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(IdxImages {
        rows,
        cols,
        pixels: bytes[16..expected].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>, DataError> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.count() as u32).to_be_bytes());
    out.extend_from_slice(&(images.rows as u32).to_be_bytes());
    out.extend_from_slice(&(images.cols as u32).to_be_bytes());
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a single-channel 10-class dataset from IDX bytes.
pub fn dataset_from_idx(images: &IdxImages, labels: &[u8], split: Split) -> Result<Dataset, DataError> {
    if images.count() != labels.len() {
        return Err(DataError::CountMismatch {
            images: images.count(),
            labels: labels.len(),
        });
    }
    let pixels = images.pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let labels = labels.iter().map(|&l| l as usize).collect();
    Dataset::new(Source::Mnist, split, [1, images.rows, images.cols], 10, pixels, labels)
}

/// Re-quantizes a dataset to IDX image and label bytes.
pub fn dataset_to_idx(ds: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let [_, rows, cols] = ds.item_shape();
    let pixels = ds.images.iter().map(|&v| (v * 255.0).round() as u8).collect();
    let labels: Vec<u8> = ds.labels.iter().map(|&l| l as u8).collect();
    (
        encode_idx_images(&IdxImages { rows, cols, pixels }),
        encode_idx_labels(&labels),
    )
}

/// Loads an MNIST-format image/label file pair.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset, DataError> {
    let images = parse_idx_images(&read_file(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_file(labels_path)?, labels_path)?;
    dataset_from_idx(&images, &labels, split)
}

/// Standard MNIST file names inside `dir`.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<Dataset, DataError> {
    let (images, labels) = mnist_paths(dir, split);
    load_mnist_idx(&images, &labels, split)
}

/// Amplitude of the uniform pixel noise added to synthetic templates.
pub const SYNTHETIC_NOISE: f32 = 0.1;

/// Placement `(top, left, size)` of class `class`'s bright square.
pub fn synthetic_square(class: usize, classes: usize, side: usize) -> (usize, usize, usize) {
    let grid = (classes as f64).sqrt().ceil() as usize;
    let cell = side / grid;
    let size = (cell / 2).max(2);
    let (row, col) = (class / grid, class % grid);
    let offset = (cell - size) / 2;
    (row * cell + offset, col * cell + offset, size)
}

/// `n` single-channel `side x side` images; class `c` is a bright square at a
/// class-specific grid position plus uniform noise in `[-0.1, 0.1]`, clamped
/// to `[0, 1]`. Labels cycle through the classes, so they are balanced.
pub fn make_synthetic(n: usize, classes: usize, side: usize, seed: u64, split: Split) -> Result<Dataset, DataError> {
    if classes < 2 {
        return Err(DataError::InvalidSynthetic(format!("need at least 2 classes, got {classes}")));
    }
    if n < classes {
        return Err(DataError::InvalidSynthetic(format!("{n} items cannot cover {classes} classes")));
    }
    if side < 8 {
        return Err(DataError::InvalidSynthetic(format!("side {side} is below 8")));
    }
    let grid = (classes as f64).sqrt().ceil() as usize;
    if side / grid < 2 {
        return Err(DataError::InvalidSynthetic(format!(
            "side {side} too small for {classes} class positions"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = side * side;
    let mut images = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let (top, left, size) = synthetic_square(c, classes, side);
        for y in 0..side {
            for x in 0..side {
                let inside = (top..top + size).contains(&y) && (left..left + size).contains(&x);
                let base = if inside { 1.0 } else { 0.0 };
                let noise: f32 = rng.gen_range(-SYNTHETIC_NOISE..=SYNTHETIC_NOISE);
                images.push((base + noise).clamp(0.0, 1.0));
            }
        }
        labels.push(c);
    }
    Dataset::new(Source::Synthetic, split, [1, side, side], classes, images, labels)
}
