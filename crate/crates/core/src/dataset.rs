//! Design matrices for the samplers: CIFAR-10 binary batches and seeded
//! synthetic regression fixtures.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Bytes per CIFAR-10 record: one label byte plus a 32x32x3 image.
pub const CIFAR10_RECORD_BYTES: usize = 1 + CIFAR10_PIXELS;
/// Pixel bytes per CIFAR-10 record.
pub const CIFAR10_PIXELS: usize = 32 * 32 * 3;
/// Number of CIFAR-10 classes.
pub const CIFAR10_CLASSES: usize = 10;

/// Paired inputs (`n x m`) and targets (`n x k`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: DMatrix<f64>,
    targets: DMatrix<f64>,
    provenance: String,
}

impl Dataset {
    pub fn new(
        inputs: DMatrix<f64>,
        targets: DMatrix<f64>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if inputs.nrows() == 0 || inputs.ncols() == 0 || targets.ncols() == 0 {
            return Err(Error::Shape(format!(
                "dataset needs n, m, k >= 1 (got inputs {}x{}, targets {}x{})",
                inputs.nrows(),
                inputs.ncols(),
                targets.nrows(),
                targets.ncols()
            )));
        }
        if inputs.nrows() != targets.nrows() {
            return Err(Error::Shape(format!(
                "inputs have {} rows but targets have {}",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        if inputs.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("dataset contains non-finite entries".into()));
        }
        Ok(Self {
            inputs,
            targets,
            provenance: provenance.into(),
        })
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &DMatrix<f64> {
        &self.targets
    }

    /// Sample count.
    pub fn n(&self) -> usize {
        self.inputs.nrows()
    }

    /// Input dimension.
    pub fn m(&self) -> usize {
        self.inputs.ncols()
    }

    /// Output dimension.
    pub fn k(&self) -> usize {
        self.targets.ncols()
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }
}

/// Pixel byte to feature: `byte / 255 - 0.5`.
#[inline]
pub fn normalize_pixel(byte: u8) -> f64 {
    f64::from(byte) / 255.0 - 0.5
}

/// One-hot encoding shifted by `-1/10`, so each row sums to zero.
pub fn shifted_one_hot(label: u8) -> [f64; CIFAR10_CLASSES] {
    let mut row = [-1.0 / CIFAR10_CLASSES as f64; CIFAR10_CLASSES];
    row[usize::from(label)] += 1.0;
    row
}

/// Loads `n` records from a CIFAR-10 binary batch file, subsampled without
/// replacement by a seeded shuffle of record indices.
pub fn load_cifar10(path: impl AsRef<Path>, n: usize, seed: u64) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    cifar10_from_bytes(&bytes, n, seed, &path.display().to_string())
}

/// Same as [`load_cifar10`] on an in-memory batch.
pub fn cifar10_from_bytes(bytes: &[u8], n: usize, seed: u64, source: &str) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR10_RECORD_BYTES) {
        return Err(Error::Format(format!(
            "CIFAR-10 batch size {} is not a positive multiple of {CIFAR10_RECORD_BYTES}",
            bytes.len()
        )));
    }
    let records = bytes.len() / CIFAR10_RECORD_BYTES;
    if n == 0 || n > records {
        return Err(Error::Bounds {
            requested: n,
            available: records,
        });
    }
    for (index, record) in bytes.chunks_exact(CIFAR10_RECORD_BYTES).enumerate() {
        if usize::from(record[0]) >= CIFAR10_CLASSES {
            return Err(Error::CorruptRecord {
                index,
                reason: format!("label byte {} > 9", record[0]),
            });
        }
    }

    let chosen = subsample_indices(records, n, seed);
    let mut inputs = DMatrix::zeros(n, CIFAR10_PIXELS);
    let mut targets = DMatrix::zeros(n, CIFAR10_CLASSES);
    for (row, &idx) in chosen.iter().enumerate() {
        let record = &bytes[idx * CIFAR10_RECORD_BYTES..(idx + 1) * CIFAR10_RECORD_BYTES];
        for (col, &b) in record[1..].iter().enumerate() {
            inputs[(row, col)] = normalize_pixel(b);
        }
        for (col, v) in shifted_one_hot(record[0]).into_iter().enumerate() {
            targets[(row, col)] = v;
        }
    }
    Dataset::new(
        inputs,
        targets,
        format!("cifar10:{source}:n={n}:seed={seed}"),
    )
}

/// First `n` entries of a seeded shuffle of `0..records`.
pub fn subsample_indices(records: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..records).collect();
    idx.shuffle(&mut rng);
    idx.truncate(n);
    idx
}

/// Inputs and targets drawn iid standard normal, inputs first.
pub fn synthetic_regression(n: usize, m: usize, k: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || m == 0 || k == 0 {
        return Err(Error::Domain(format!(
            "synthetic dimensions must be positive (n={n}, m={m}, k={k})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(&mut rng));
    let targets = DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(&mut rng));
    Dataset::new(
        inputs,
        targets,
        format!("synthetic:n={n}:m={m}:k={k}:seed={seed}"),
    )
}

/// Inputs iid standard normal; targets are the output of a one-hidden-layer
/// GELU network of width `teacher_width`, drawn from the same NTK prior as
/// the samplers use, plus iid `N(0, noise_sd^2)` noise.
///
/// Unlike [`synthetic_regression`] the data are well specified for the
/// model class, which is what the wide-network limit is about.
pub fn teacher_regression(
    n: usize,
    m: usize,
    k: usize,
    teacher_width: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<Dataset> {
    use crate::network::{forward, Activation, FlatWeights, NetworkConfig};
    if n == 0 || m == 0 || k == 0 || teacher_width == 0 {
        return Err(Error::Domain(format!(
            "teacher dimensions must be positive (n={n}, m={m}, k={k}, width={teacher_width})"
        )));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::Domain(format!("noise sd must be non-negative, got {noise_sd}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(&mut rng));
    let config = NetworkConfig::wide_default(m, vec![teacher_width], k, Activation::Gelu)?;
    let theta = FlatWeights::prior_draw(config.layout(), &mut rng);
    let clean = forward(&config, &theta, &inputs)?.output;
    let targets = clean.map(|v| v + noise_sd * Distribution::<f64>::sample(&StandardNormal, &mut rng));
    Dataset::new(
        inputs,
        targets,
        format!("teacher:n={n}:m={m}:k={k}:width={teacher_width}:sd={noise_sd}:seed={seed}"),
    )
}
