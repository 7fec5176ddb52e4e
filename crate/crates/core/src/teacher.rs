//! Frozen teacher outputs stored as an index-aligned `HCDT` dump.
//!
//! Layout (little-endian): `"HCDT"`, u32 version, u32 N, u32 d, u32 K,
//! N*d f32 features, N*K f32 logits, u64 FNV-1a checksum of the two payload
//! arrays.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::binfmt;
use crate::tensor::Tensor;

pub const DUMP_MAGIC: &[u8; 4] = b"HCDT";
pub const DUMP_VERSION: u32 = 1;
pub const DUMP_HEADER_BYTES: usize = 20;
pub const DEFAULT_MARGIN: f64 = 6.0;

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a teacher dump: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported teacher dump version {0}")]
    Version(u32),
    #[error("teacher dump declares {declared} bytes but file has {actual}")]
    SizeMismatch { declared: usize, actual: usize },
    #[error("teacher dump checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("invalid teacher dump: {0}")]
    Invalid(String),
    #[error("teacher dump has {what}={dump} but the experiment expects {what}={expected}")]
    Mismatch {
        what: &'static str,
        dump: usize,
        expected: usize,
    },
}

pub type Result<T> = std::result::Result<T, TeacherError>;

/// Teacher penultimate features (`N x d`) and logits (`N x K`), row `i`
/// belonging to dataset sample `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherDump {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub features: Vec<f32>,
    pub logits: Vec<f32>,
}

impl TeacherDump {
    pub fn new(n: usize, d: usize, k: usize, features: Vec<f32>, logits: Vec<f32>) -> Result<Self> {
        if features.len() != n * d || logits.len() != n * k {
            return Err(TeacherError::Invalid(format!(
                "expected {} features and {} logits for N={n}, d={d}, K={k}, got {} and {}",
                n * d,
                n * k,
                features.len(),
                logits.len()
            )));
        }
        let dump = Self {
            n,
            d,
            k,
            features,
            logits,
        };
        dump.validate()?;
        Ok(dump)
    }

    fn validate(&self) -> Result<()> {
        if let Some(i) = self
            .features
            .iter()
            .chain(&self.logits)
            .position(|v| !v.is_finite())
        {
            return Err(TeacherError::Invalid(format!(
                "non-finite value at flat index {i}"
            )));
        }
        if self.d > 0 {
            for (row, f) in self.features.chunks_exact(self.d).enumerate() {
                if f.iter().all(|&v| v == 0.0) {
                    return Err(TeacherError::Invalid(format!(
                        "feature row {row} has zero norm"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn file_size(n: usize, d: usize, k: usize) -> usize {
        DUMP_HEADER_BYTES + 4 * n * (d + k) + 8
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(Self::file_size(self.n, self.d, self.k));
        buf.extend_from_slice(DUMP_MAGIC);
        for v in [DUMP_VERSION, self.n as u32, self.d as u32, self.k as u32] {
            binfmt::put_u32(&mut buf, v);
        }
        binfmt::put_f32s(&mut buf, &self.features);
        binfmt::put_f32s(&mut buf, &self.logits);
        let sum = binfmt::fnv1a(&buf[DUMP_HEADER_BYTES..]);
        buf.extend_from_slice(&sum.to_le_bytes());
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != DUMP_MAGIC {
            let mut m = [0u8; 4];
            let len = bytes.len().min(4);
            m[..len].copy_from_slice(&bytes[..len]);
            return Err(TeacherError::BadMagic(m));
        }
        if bytes.len() < DUMP_HEADER_BYTES {
            return Err(TeacherError::SizeMismatch {
                declared: DUMP_HEADER_BYTES,
                actual: bytes.len(),
            });
        }
        let version = binfmt::u32_at(bytes, 4);
        if version != DUMP_VERSION {
            return Err(TeacherError::Version(version));
        }
        let [n, d, k] = [8, 12, 16].map(|o| binfmt::u32_at(bytes, o) as usize);
        let declared = Self::file_size(n, d, k);
        if declared != bytes.len() {
            return Err(TeacherError::SizeMismatch {
                declared,
                actual: bytes.len(),
            });
        }
        let payload_end = declared - 8;
        let stored = binfmt::u64_at(bytes, payload_end);
        let computed = binfmt::fnv1a(&bytes[DUMP_HEADER_BYTES..payload_end]);
        if stored != computed {
            return Err(TeacherError::Checksum { stored, computed });
        }
        let split = DUMP_HEADER_BYTES + 4 * n * d;
        let features = binfmt::f32s(&bytes[DUMP_HEADER_BYTES..split]);
        let logits = binfmt::f32s(&bytes[split..payload_end]);
        Self::new(n, d, k, features, logits)
    }

    /// Check the dump against the sizes an experiment expects.
    pub fn check_compat(&self, n: usize, d: usize, k: usize) -> Result<()> {
        for (what, dump, expected) in [("N", self.n, n), ("d", self.d, d), ("K", self.k, k)] {
            if dump != expected {
                return Err(TeacherError::Mismatch {
                    what,
                    dump,
                    expected,
                });
            }
        }
        Ok(())
    }

    /// Features `[B, d]` and logits `[B, K]` of the given samples, widened to f64.
    pub fn rows(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let gather = |src: &[f32], w: usize| -> Vec<f64> {
            indices
                .iter()
                .flat_map(|&i| src[i * w..(i + 1) * w].iter().map(|&v| v as f64))
                .collect()
        };
        let b = indices.len();
        (
            Tensor::new(vec![b, self.d], gather(&self.features, self.d)).unwrap(),
            Tensor::new(vec![b, self.k], gather(&self.logits, self.k)).unwrap(),
        )
    }

    /// Top-1 accuracy (percent) of the stored logits on `labels[range]`.
    pub fn accuracy(&self, labels: &[u32], range: std::ops::Range<usize>) -> f64 {
        let hits = range
            .clone()
            .filter(|&i| {
                let row = &self.logits[i * self.k..(i + 1) * self.k];
                crate::harness::argmax(row.iter().map(|&v| v as f64)) == labels[i] as usize
            })
            .count();
        100.0 * hits as f64 / range.len().max(1) as f64
    }
}

pub fn write_dump(path: &Path, dump: &TeacherDump) -> Result<()> {
    fs::write(path, dump.encode())?;
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<TeacherDump> {
    TeacherDump::decode(&fs::read(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthTeacherOptions {
    pub quality: f64,
    pub d: usize,
    pub margin: f64,
    /// Standard deviation of the logit noise before the `1 - quality` factor.
    pub noise: f64,
    pub seed: u64,
}

impl SynthTeacherOptions {
    pub fn new(quality: f64, d: usize, seed: u64) -> Self {
        Self {
            quality,
            d,
            margin: DEFAULT_MARGIN,
            noise: DEFAULT_MARGIN,
            seed,
        }
    }
}

const STAT_FREQS: usize = 4;

/// Whole-image statistics per channel: mean, standard deviation, and the
/// magnitude of the first few Fourier coefficients along each axis.
fn global_stats(img: &[f32], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(c * (2 + 2 * STAT_FREQS));
    let hw = (h * w) as f64;
    for ch in img.chunks_exact(h * w).take(c) {
        let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / hw;
        let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / hw;
        out.push(mean);
        out.push(var.sqrt());
        for (len, along_rows) in [(h, true), (w, false)] {
            for f in 1..=STAT_FREQS {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let t = if along_rows { y } else { x };
                        let ang = 2.0 * PI * (f * t) as f64 / len as f64;
                        let v = ch[y * w + x] as f64;
                        re += v * ang.cos();
                        im -= v * ang.sin();
                    }
                }
                out.push((re * re + im * im).sqrt() / hw);
            }
        }
    }
    out
}

/// Synthetic stand-in for a strong pretrained teacher.
///
/// Logits are `quality * margin * onehot(y) + (1 - quality) * noise * N(0, 1)`.
/// Features are a fixed random projection of [`global_stats`] of each image
/// plus `quality` times a random per-class embedding.
pub fn synth_teacher(
    images: &[f32],
    shape: [usize; 4],
    labels: &[u32],
    k: usize,
    opts: &SynthTeacherOptions,
) -> Result<TeacherDump> {
    let [n, c, h, w] = shape;
    if !(0.0..=1.0).contains(&opts.quality) {
        return Err(TeacherError::Invalid(format!(
            "quality must lie in [0, 1], got {}",
            opts.quality
        )));
    }
    if labels.len() != n || images.len() != n * c * h * w || opts.d == 0 || k == 0 {
        return Err(TeacherError::Invalid(
            "inconsistent dataset shape for teacher synthesis".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let s = c * (2 + 2 * STAT_FREQS);
    let proj: Vec<f64> = (0..opts.d * s)
        .map(|_| normal() / (s as f64).sqrt())
        .collect();
    let embed: Vec<f64> = (0..k * opts.d).map(|_| normal()).collect();

    let mut features = Vec::with_capacity(n * opts.d);
    let mut logits = Vec::with_capacity(n * k);
    let q = opts.quality;
    for (i, img) in images.chunks_exact(c * h * w).enumerate() {
        let y = labels[i] as usize;
        let stats = global_stats(img, c, h, w);
        for j in 0..opts.d {
            let p: f64 = proj[j * s..(j + 1) * s]
                .iter()
                .zip(&stats)
                .map(|(a, b)| a * b)
                .sum();
            features.push((p + q * embed[y * opts.d + j]) as f32);
        }
        for cls in 0..k {
            let signal = if cls == y { q * opts.margin } else { 0.0 };
            logits.push((signal + (1.0 - q) * opts.noise * normal()) as f32);
        }
    }
    TeacherDump::new(n, opts.d, k, features, logits)
}
