use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::hcd::HcdConfig;
use crate::nn::SgdConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Cross-entropy only.
    Ce,
    /// Vanilla knowledge distillation.
    Kd,
    Hcd,
}

impl Method {
    pub fn needs_teacher(self) -> bool {
        !matches!(self, Method::Ce)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ce => "ce",
            Method::Kd => "kd",
            Method::Hcd => "hcd",
        })
    }
}

impl FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(Method::Ce),
            "kd" => Ok(Method::Kd),
            "hcd" => Ok(Method::Hcd),
            _ => Err(HarnessError::Config(format!(
                "unknown method {s:?} (expected ce, kd or hcd)"
            ))),
        }
    }
}

/// Everything one training run needs. Loadable from JSON; every field has a
/// default except where noted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub hcd: HcdConfig,
    pub sgd: SgdConfig,
    /// `HCDX` file. Required.
    pub dataset: PathBuf,
    /// `HCDT` file, index-aligned with the dataset. Required for kd and hcd.
    pub teacher: Option<PathBuf>,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// The last `test_count` samples of the dataset form the test split.
    pub test_count: usize,
    /// Output channels of the student stages.
    pub channels: Vec<usize>,
    /// Write measured epoch wall time to the `sec` column (0 otherwise).
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Hcd,
            hcd: HcdConfig::default(),
            sgd: SgdConfig::default(),
            dataset: PathBuf::new(),
            teacher: None,
            seed: 0,
            out_dir: PathBuf::from("runs"),
            test_count: 500,
            channels: vec![16, 32, 64, 64],
            record_timing: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("config JSON: {e}")))
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks that do not need the input files.
    pub fn validate(&self) -> Result<()> {
        if self.dataset.as_os_str().is_empty() {
            return Err(HarnessError::Config("no dataset path given".into()));
        }
        if self.method.needs_teacher() && self.teacher.is_none() {
            return Err(HarnessError::Config(format!(
                "method {} requires a teacher dump",
                self.method
            )));
        }
        if self.channels.is_empty() {
            return Err(HarnessError::Config(
                "student needs at least one stage".into(),
            ));
        }
        self.sgd.validate()?;
        if self.method == Method::Hcd {
            self.hcd.validate(self.channels.len())?;
        } else if self.method == Method::Kd {
            let h = &self.hcd;
            if !(0.0..=1.0).contains(&h.alpha) || !(h.tau > 0.0) {
                return Err(HarnessError::Config(format!(
                    "kd needs alpha in [0, 1] and tau > 0, got alpha={} tau={}",
                    h.alpha, h.tau
                )));
            }
        }
        Ok(())
    }
}
