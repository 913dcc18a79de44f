//! Dataset ingestion (MNIST IDX streams, CIFAR-10 binary batches, synthetic
//! generators), input preprocessing that establishes the certified input
//! bound, and seeded batching.

use crate::numerics::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const IDX_MAGIC_IMAGES: u32 = 2051;
pub const IDX_MAGIC_LABELS: u32 = 2049;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("idx parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// In-memory dataset with one-hot labels and a certified input-norm bound.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Vec<Tensor>,
    pub labels: Vec<Vec<f64>>,
    pub input_bound: f64,
    pub num_classes: usize,
}

impl Dataset {
    pub fn from_parts(
        features: Vec<Tensor>,
        label_indices: &[usize],
        num_classes: usize,
    ) -> Result<Self> {
        if features.len() != label_indices.len() {
            return Err(DataError::InvalidArgument(format!(
                "{} feature rows vs {} labels",
                features.len(),
                label_indices.len()
            )));
        }
        if num_classes == 0 {
            return Err(DataError::InvalidArgument("num_classes must be positive".into()));
        }
        let mut labels = Vec::with_capacity(label_indices.len());
        for &idx in label_indices {
            if idx >= num_classes {
                return Err(DataError::InvalidArgument(format!(
                    "label {idx} out of range for {num_classes} classes"
                )));
            }
            let mut row = vec![0.0; num_classes];
            row[idx] = 1.0;
            labels.push(row);
        }
        let mut bound: f64 = 0.0;
        for f in &features {
            bound = bound.max(f.norm());
        }
        Ok(Self {
            features,
            labels,
            input_bound: bound,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature_shape(&self) -> &[usize] {
        self.features
            .first()
            .map(|t| t.shape())
            .unwrap_or(&[])
    }

    /// Apply the preprocessing mode and set the certified input bound.
    pub fn preprocess(&mut self, mode: Preprocess) -> Result<PreprocessReport> {
        let report = preprocess(&mut self.features, mode)?;
        self.input_bound = report.input_bound;
        Ok(report)
    }
}

/// Input-norm preprocessing: projection onto the ball (norm clipping) or
/// onto the sphere (normalization).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "bound")]
pub enum Preprocess {
    Clip(f64),
    Normalize(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub input_bound: f64,
    /// Zero vectors cannot be pushed onto the sphere; they are left at zero
    /// and counted here.
    pub zero_vectors: usize,
}

pub fn preprocess(features: &mut [Tensor], mode: Preprocess) -> Result<PreprocessReport> {
    let bound = match mode {
        Preprocess::Clip(b) | Preprocess::Normalize(b) => b,
    };
    if bound <= 0.0 {
        return Err(DataError::InvalidArgument(format!(
            "preprocessing bound must be positive, got {bound}"
        )));
    }
    let mut zero_vectors = 0;
    for x in features.iter_mut() {
        let n = x.norm();
        if n == 0.0 {
            if matches!(mode, Preprocess::Normalize(_)) {
                zero_vectors += 1;
            }
            continue;
        }
        match mode {
            Preprocess::Clip(b) => {
                if n > b {
                    x.scale_in_place(b / n);
                }
            }
            Preprocess::Normalize(b) => {
                x.scale_in_place(b / n);
            }
        }
    }
    Ok(PreprocessReport {
        input_bound: bound,
        zero_vectors,
    })
}

/// Per-epoch shuffled fixed-size batches of sample indices; the remainder
/// is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return Err(DataError::InvalidArgument(format!(
            "batch size {batch_size} invalid for {n} samples"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect())
}

/// Poisson-sampled batches: each record participates independently with
/// probability `p`. Available for accounting-faithful experiments; not the
/// default loader.
pub fn poisson_batches(
    n: usize,
    p: f64,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(DataError::InvalidArgument(format!(
            "sampling probability must be in [0, 1], got {p}"
        )));
    }
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut batch = Vec::new();
        for i in 0..n {
            if rng.gen::<f64>() < p {
                batch.push(i);
            }
        }
        out.push(batch);
    }
    Ok(out)
}

/// Parse an IDX stream: magic 2051 gives an images tensor `N x rows x cols`
/// scaled to [0, 1]; magic 2049 gives a labels tensor `N` with raw class
/// values.
pub fn parse_idx(bytes: &[u8]) -> Result<Tensor> {
    let magic = read_u32(bytes, 0)?;
    match magic {
        IDX_MAGIC_IMAGES => {
            let n = read_u32(bytes, 4)? as usize;
            let rows = read_u32(bytes, 8)? as usize;
            let cols = read_u32(bytes, 12)? as usize;
            let expected = n
                .checked_mul(rows)
                .and_then(|v| v.checked_mul(cols))
                .ok_or(DataError::Parse {
                    offset: 4,
                    message: format!("image dims {n} x {rows} x {cols} overflow"),
                })?;
            let payload = bytes.get(16..).ok_or(DataError::Parse {
                offset: 16,
                message: "truncated image header".into(),
            })?;
            if payload.len() != expected {
                return Err(DataError::Parse {
                    offset: 16 + payload.len().min(expected),
                    message: format!(
                        "image payload has {} bytes, header promises {expected}",
                        payload.len()
                    ),
                });
            }
            let data: Vec<f64> = payload.iter().map(|&b| b as f64 / 255.0).collect();
            Tensor::new(vec![n, rows, cols], data).map_err(|e| DataError::Parse {
                offset: 16,
                message: e.to_string(),
            })
        }
        IDX_MAGIC_LABELS => {
            let n = read_u32(bytes, 4)? as usize;
            let payload = bytes.get(8..).ok_or(DataError::Parse {
                offset: 8,
                message: "truncated label header".into(),
            })?;
            if payload.len() != n {
                return Err(DataError::Parse {
                    offset: 8 + payload.len().min(n),
                    message: format!("label payload has {} bytes, header promises {n}", payload.len()),
                });
            }
            let data: Vec<f64> = payload.iter().map(|&b| b as f64).collect();
            Tensor::new(vec![n], data).map_err(|e| DataError::Parse {
                offset: 8,
                message: e.to_string(),
            })
        }
        other => Err(DataError::Parse {
            offset: 0,
            message: format!("unknown idx magic {other}, expected 2051 or 2049"),
        }),
    }
}

/// Inverse of `parse_idx` for valid fixtures: rank-3 tensors serialize as
/// image streams (values scaled back by 255), rank-1 tensors as labels.
pub fn serialize_idx(t: &Tensor) -> Result<Vec<u8>> {
    match t.shape().len() {
        3 => {
            let mut out = Vec::with_capacity(16 + t.len());
            out.extend_from_slice(&IDX_MAGIC_IMAGES.to_be_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u32).to_be_bytes());
            }
            for v in t.data() {
                out.push((v * 255.0).round() as u8);
            }
            Ok(out)
        }
        1 => {
            let mut out = Vec::with_capacity(8 + t.len());
            out.extend_from_slice(&IDX_MAGIC_LABELS.to_be_bytes());
            out.extend_from_slice(&(t.shape()[0] as u32).to_be_bytes());
            for v in t.data() {
                out.push(v.round() as u8);
            }
            Ok(out)
        }
        r => Err(DataError::InvalidArgument(format!(
            "cannot serialize rank-{r} tensor as idx"
        ))),
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let slice = bytes
        .get(offset..offset + 4)
        .ok_or(DataError::Parse {
            offset,
            message: "unexpected end of stream".into(),
        })?;
    Ok(u32::from_be_bytes([slice[0], slice[1], slice[2], slice[3]]))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Load the four MNIST IDX files from a directory. Images become
/// `28 x 28 x 1` tensors in [0, 1]; preprocessing is the caller's business.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let load_split = |images: &str, labels: &str| -> Result<Dataset> {
        let imgs = parse_idx(&read_file(&dir.join(images))?)?;
        let labs = parse_idx(&read_file(&dir.join(labels))?)?;
        idx_to_dataset(&imgs, &labs, 10)
    };
    let train = load_split("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let test = load_split("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    Ok((train, test))
}

fn idx_to_dataset(images: &Tensor, labels: &Tensor, num_classes: usize) -> Result<Dataset> {
    if images.shape().len() != 3 || labels.shape().len() != 1 {
        return Err(DataError::InvalidArgument(format!(
            "expected rank-3 images and rank-1 labels, got {:?} and {:?}",
            images.shape(),
            labels.shape()
        )));
    }
    let (n, rows, cols) = (images.shape()[0], images.shape()[1], images.shape()[2]);
    if labels.shape()[0] != n {
        return Err(DataError::InvalidArgument(format!(
            "{n} images vs {} labels",
            labels.shape()[0]
        )));
    }
    let per = rows * cols;
    let mut features = Vec::with_capacity(n);
    for i in 0..n {
        let slice = images.data()[i * per..(i + 1) * per].to_vec();
        features.push(
            Tensor::new(vec![rows, cols, 1], slice).map_err(|e| {
                DataError::InvalidArgument(e.to_string())
            })?,
        );
    }
    let label_indices: Vec<usize> = labels.data().iter().map(|&v| v as usize).collect();
    Dataset::from_parts(features, &label_indices, num_classes)
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;

/// Load CIFAR-10 binary batches (3073-byte records: label byte followed by
/// 3072 channel-major pixels) into `32 x 32 x 3` tensors scaled to [0, 1].
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train_feats = Vec::new();
    let mut train_labels = Vec::new();
    for i in 1..=5 {
        let bytes = read_file(&dir.join(format!("data_batch_{i}.bin")))?;
        parse_cifar_batch(&bytes, &mut train_feats, &mut train_labels)?;
    }
    let mut test_feats = Vec::new();
    let mut test_labels = Vec::new();
    let bytes = read_file(&dir.join("test_batch.bin"))?;
    parse_cifar_batch(&bytes, &mut test_feats, &mut test_labels)?;
    Ok((
        Dataset::from_parts(train_feats, &train_labels, 10)?,
        Dataset::from_parts(test_feats, &test_labels, 10)?,
    ))
}

pub fn parse_cifar_batch(
    bytes: &[u8],
    features: &mut Vec<Tensor>,
    labels: &mut Vec<usize>,
) -> Result<()> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(DataError::Parse {
            offset: bytes.len() - bytes.len() % CIFAR_RECORD,
            message: format!(
                "cifar batch length {} is not a multiple of {CIFAR_RECORD}",
                bytes.len()
            ),
        });
    }
    let pixels = CIFAR_SIDE * CIFAR_SIDE;
    for record in bytes.chunks_exact(CIFAR_RECORD) {
        let label = record[0] as usize;
        if label > 9 {
            return Err(DataError::Parse {
                offset: 0,
                message: format!("cifar label {label} out of range"),
            });
        }
        // Channel-major source: 1024 red, 1024 green, 1024 blue ->
        // row-major H x W x C.
        let mut data = vec![0.0; pixels * 3];
        for ch in 0..3 {
            for p in 0..pixels {
                data[p * 3 + ch] = record[1 + ch * pixels + p] as f64 / 255.0;
            }
        }
        features.push(
            Tensor::new(vec![CIFAR_SIDE, CIFAR_SIDE, 3], data)
                .map_err(|e| DataError::InvalidArgument(e.to_string()))?,
        );
        labels.push(label);
    }
    Ok(())
}

/// Two isotropic Gaussian clusters at +/- separation/2 along the first
/// axis, clipped to a reported input bound.
pub fn synthetic_two_gaussians(
    n_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if dim == 0 {
        return Err(DataError::InvalidArgument("dim must be at least 1".into()));
    }
    if n_per_class == 0 {
        return Err(DataError::InvalidArgument(
            "n_per_class must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = separation.abs() / 2.0 + 3.0 * (dim as f64).sqrt();
    let mut features = Vec::with_capacity(2 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for class in 0..2usize {
        let center = if class == 0 {
            -separation / 2.0
        } else {
            separation / 2.0
        };
        for _ in 0..n_per_class {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            v[0] += center;
            features.push(Tensor::from_vec(v));
            labels.push(class);
        }
    }
    let mut ds = Dataset::from_parts(features, &labels, 2)?;
    ds.preprocess(Preprocess::Clip(bound))?;
    Ok(ds)
}
