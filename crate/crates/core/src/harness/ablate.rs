use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use super::data::Dataset;
use super::train::train_to_dir;
use super::{HarnessError, Result};
use crate::hcd::FusionMode;
use crate::teacher::{self, TeacherDump};

pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_HEADER: &str = "axis,value,seed,final_test_acc,s_per_epoch";
pub const THREADS_ENV: &str = "HCD_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    N,
    Losses,
    Stages,
    Fusion,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::N => "n",
            Axis::Losses => "losses",
            Axis::Stages => "stages",
            Axis::Fusion => "fusion",
        })
    }
}

impl FromStr for Axis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n" => Ok(Axis::N),
            "losses" => Ok(Axis::Losses),
            "stages" => Ok(Axis::Stages),
            "fusion" => Ok(Axis::Fusion),
            _ => Err(HarnessError::Config(format!(
                "unknown ablation axis {s:?} (expected n, losses, stages or fusion)"
            ))),
        }
    }
}

impl Axis {
    /// The sweep used when no values are given.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Axis::N => &["1", "2", "4", "6", "8"],
            Axis::Losses => &["none", "kd", "kd+sub_kl", "kd+sub_kl+orth"],
            Axis::Stages => &["1", "1+2", "1+2+3", "1+2+3+4"],
            Axis::Fusion => &["add", "ratio:0.5:0.5", "weighted:1:1", "none"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Set this axis of `cfg` to `value`. Loss weights that are switched on
    /// keep the values already in `cfg`.
    pub fn apply(self, value: &str, cfg: &mut ExperimentConfig) -> Result<()> {
        let bad =
            || HarnessError::Config(format!("invalid value {value:?} for ablation axis {self}"));
        let h = &mut cfg.hcd;
        match self {
            Axis::N => h.n = value.trim().parse().map_err(|_| bad())?,
            Axis::Losses => {
                let (kd, sub, orth) = match value.trim() {
                    "none" => (false, false, false),
                    "kd" => (true, false, false),
                    "kd+sub_kl" => (true, true, false),
                    "kd+sub_kl+orth" => (true, true, true),
                    _ => return Err(bad()),
                };
                if !kd {
                    h.lambda = 0.0;
                }
                if !sub {
                    h.beta = 0.0;
                }
                if !orth {
                    h.omega = 0.0;
                }
            }
            Axis::Stages => {
                h.stages = value
                    .split('+')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad())?;
            }
            Axis::Fusion => h.fusion = value.parse::<FusionMode>()?,
        }
        cfg.method = Method::Hcd;
        cfg.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub final_test_acc: f64,
    pub s_per_epoch: f64,
}

fn cell_dir(root: &Path, axis: Axis, value: &str, seed: u64) -> PathBuf {
    let safe: String = value
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    root.join(format!("{axis}-{safe}"))
        .join(format!("seed{seed}"))
}

/// Worker count from `HCD_THREADS`, falling back to the available cores.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Run every (value, seed) cell, each into its own subdirectory of
/// `base.out_dir`, and write the aggregated `ablation.csv` there.
pub fn ablate_with(
    base: &ExperimentConfig,
    data: &Dataset,
    dump: Option<&TeacherDump>,
    axis: Axis,
    values: &[String],
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<AblationRow>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(HarnessError::Config(
            "ablation needs at least one value and one seed".into(),
        ));
    }
    let mut cells = Vec::with_capacity(values.len() * seeds.len());
    for value in values {
        for &seed in seeds {
            let mut cfg = base.clone();
            axis.apply(value, &mut cfg)?;
            cfg.seed = seed;
            cfg.out_dir = cell_dir(&base.out_dir, axis, value, seed);
            cells.push((value.clone(), cfg));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    let rows = pool.install(|| {
        cells
            .par_iter()
            .map(|(value, cfg)| {
                let out = train_to_dir(cfg, data, dump, None)?;
                Ok(AblationRow {
                    axis: axis.to_string(),
                    value: value.clone(),
                    seed: cfg.seed,
                    final_test_acc: out.final_test_acc(),
                    s_per_epoch: out.mean_epoch_seconds(),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    std::fs::create_dir_all(&base.out_dir)?;
    let mut w = csv::Writer::from_path(base.out_dir.join(ABLATION_FILE))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

/// [`ablate_with`] loading the dataset and teacher named in `base`.
pub fn ablate(
    base: &ExperimentConfig,
    axis: Axis,
    values: &[String],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let data = Dataset::load(&base.dataset)?;
    let path = base
        .teacher
        .as_ref()
        .ok_or_else(|| HarnessError::Config("ablations run hcd and need a teacher dump".into()))?;
    let dump = teacher::read_dump(path)?;
    ablate_with(
        base,
        &data,
        Some(&dump),
        axis,
        values,
        seeds,
        thread_count(),
    )
}

pub fn read_ablation(path: &Path) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
