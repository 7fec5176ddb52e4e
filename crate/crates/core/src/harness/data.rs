//! `HCDX` dataset files and the synthetic generators.
//!
//! Layout (little-endian): `"HCDX"`, u32 version, u32 N, C, H, W, K,
//! N*C*H*W f32 images, N u32 labels, u64 FNV-1a checksum of images and labels.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binfmt;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"HCDX";
pub const DATASET_VERSION: u32 = 1;
pub const DATASET_HEADER_BYTES: usize = 28;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dataset file: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error("dataset declares {declared} bytes but file has {actual}")]
    SizeMismatch { declared: usize, actual: usize },
    #[error("dataset checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub images: Vec<f32>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn new(
        shape: [usize; 4],
        k: usize,
        images: Vec<f32>,
        labels: Vec<u32>,
    ) -> Result<Self, DataError> {
        let [n, c, h, w] = shape;
        if images.len() != n * c * h * w || labels.len() != n {
            return Err(DataError::Invalid(format!(
                "{} image values and {} labels for shape {shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y as usize >= k) {
            return Err(DataError::Invalid(format!("label {y} not below K={k}")));
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("non-finite pixel".into()));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            k,
            images,
            labels,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn file_size(shape: [usize; 4]) -> usize {
        let [n, c, h, w] = shape;
        DATASET_HEADER_BYTES + 4 * n * c * h * w + 4 * n + 8
    }

    /// Images `[B, C, H, W]` and labels of the given samples.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let len = self.sample_len();
        let data = indices
            .iter()
            .flat_map(|&i| {
                self.images[i * len..(i + 1) * len]
                    .iter()
                    .map(|&v| v as f64)
            })
            .collect();
        let x = Tensor::new(vec![indices.len(), self.c, self.h, self.w], data).unwrap();
        (
            x,
            indices.iter().map(|&i| self.labels[i] as usize).collect(),
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(Self::file_size(self.shape()));
        buf.extend_from_slice(DATASET_MAGIC);
        for v in [
            DATASET_VERSION,
            self.n as u32,
            self.c as u32,
            self.h as u32,
            self.w as u32,
            self.k as u32,
        ] {
            binfmt::put_u32(&mut buf, v);
        }
        binfmt::put_f32s(&mut buf, &self.images);
        for &y in &self.labels {
            binfmt::put_u32(&mut buf, y);
        }
        let sum = binfmt::fnv1a(&buf[DATASET_HEADER_BYTES..]);
        buf.extend_from_slice(&sum.to_le_bytes());
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DataError> {
        if bytes.len() < 4 || &bytes[..4] != DATASET_MAGIC {
            let mut m = [0u8; 4];
            let len = bytes.len().min(4);
            m[..len].copy_from_slice(&bytes[..len]);
            return Err(DataError::BadMagic(m));
        }
        if bytes.len() < DATASET_HEADER_BYTES {
            return Err(DataError::SizeMismatch {
                declared: DATASET_HEADER_BYTES,
                actual: bytes.len(),
            });
        }
        let version = binfmt::u32_at(bytes, 4);
        if version != DATASET_VERSION {
            return Err(DataError::Version(version));
        }
        let [n, c, h, w, k] = [8, 12, 16, 20, 24].map(|o| binfmt::u32_at(bytes, o) as usize);
        let declared = Self::file_size([n, c, h, w]);
        if declared != bytes.len() {
            return Err(DataError::SizeMismatch {
                declared,
                actual: bytes.len(),
            });
        }
        let end = declared - 8;
        let stored = binfmt::u64_at(bytes, end);
        let computed = binfmt::fnv1a(&bytes[DATASET_HEADER_BYTES..end]);
        if stored != computed {
            return Err(DataError::Checksum { stored, computed });
        }
        let split = DATASET_HEADER_BYTES + 4 * n * c * h * w;
        Self::new(
            [n, c, h, w],
            k,
            binfmt::f32s(&bytes[DATASET_HEADER_BYTES..split]),
            binfmt::u32s(&bytes[split..end]),
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::decode(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Blobs,
    Bars,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Blobs => "blobs",
            DatasetKind::Bars => "bars",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "blobs" => Ok(DatasetKind::Blobs),
            "bars" => Ok(DatasetKind::Bars),
            _ => Err(format!(
                "unknown dataset kind {s:?} (expected blobs or bars)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenOptions {
    pub kind: DatasetKind,
    pub n: usize,
    pub k: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub seed: u64,
    /// Per-pixel Gaussian noise standard deviation.
    pub noise: f64,
}

impl GenOptions {
    /// Desk defaults: 3000 samples of 1x16x16 in 10 classes.
    pub fn desk(kind: DatasetKind, seed: u64) -> Self {
        Self {
            kind,
            n: 3000,
            k: 10,
            c: 1,
            h: 16,
            w: 16,
            seed,
            noise: match kind {
                DatasetKind::Blobs => 1.0,
                DatasetKind::Bars => BARS_NOISE,
            },
        }
    }
}

pub const BARS_NOISE: f64 = 2.5;

/// Balanced labels in a seeded random order.
fn balanced_labels(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut labels: Vec<u32> = (0..n).map(|i| (i % k) as u32).collect();
    labels.shuffle(rng);
    labels
}

/// Stripe orientation (0 = varies down rows, 1 = across columns) and
/// cycles per image of a bars class.
pub fn bars_pattern(class: usize) -> (usize, usize) {
    (class % 2, class / 2 + 1)
}

pub fn gen_dataset(opts: &GenOptions) -> Result<Dataset, DataError> {
    let GenOptions {
        n,
        k,
        c,
        h,
        w,
        seed,
        noise,
        kind,
    } = *opts;
    if k < 2 {
        return Err(DataError::Invalid(format!(
            "need at least 2 classes, got {k}"
        )));
    }
    if c == 0 || h == 0 || w == 0 || !(noise >= 0.0) {
        return Err(DataError::Invalid(
            "image dimensions must be positive and noise non-negative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = balanced_labels(n, k, &mut rng);
    let len = c * h * w;
    let mut images = Vec::with_capacity(n * len);
    match kind {
        DatasetKind::Blobs => {
            let means: Vec<f64> = (0..k * len)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            for &y in &labels {
                let mean = &means[y as usize * len..(y as usize + 1) * len];
                for &m in mean {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    images.push((m + noise * e) as f32);
                }
            }
        }
        DatasetKind::Bars => {
            let max_cycles = bars_pattern(k - 1).1;
            if 2 * max_cycles > h.min(w) {
                return Err(DataError::Invalid(format!(
                    "{k} bar classes need {max_cycles} cycles, more than a {h}x{w} image resolves"
                )));
            }
            for &y in &labels {
                let (orient, cycles) = bars_pattern(y as usize);
                let phase = rng.random_range(0.0..2.0 * PI);
                let amp = rng.random_range(0.6..1.4);
                let offset = rng.random_range(-0.5..0.5);
                for _ in 0..c {
                    for r in 0..h {
                        for col in 0..w {
                            let (t, span) = if orient == 0 { (r, h) } else { (col, w) };
                            let ang = 2.0 * PI * (cycles * t) as f64 / span as f64 + phase;
                            let e: f64 = StandardNormal.sample(&mut rng);
                            images.push((offset + amp * ang.cos() + noise * e) as f32);
                        }
                    }
                }
            }
        }
    }
    Dataset::new([n, c, h, w], k, images, labels)
}
