use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{HcdError, Result};

/// How each sub-logit is combined with the teacher logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum FusionMode {
    /// `z + z_t`
    Add,
    /// `l1 z + l2 z_t` with `l1 + l2 = 1`
    Ratio {
        l1: f64,
        l2: f64,
    },
    /// `l3 z + l4 z_t` with `l3 = l4`
    Weighted {
        l3: f64,
        l4: f64,
    },
    None,
}

impl FusionMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            FusionMode::Ratio { l1, l2 } if !((l1 + l2 - 1.0).abs() <= 1e-12) => Err(
                HcdError::Config(format!("ratio fusion needs l1 + l2 = 1, got {l1} + {l2}")),
            ),
            FusionMode::Weighted { l3, l4 } if l3 != l4 || !l3.is_finite() => Err(
                HcdError::Config(format!("weighted fusion needs l3 = l4, got {l3} and {l4}")),
            ),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionMode::Add => write!(f, "add"),
            FusionMode::None => write!(f, "none"),
            FusionMode::Ratio { l1, l2 } => write!(f, "ratio:{l1}:{l2}"),
            FusionMode::Weighted { l3, l4 } => write!(f, "weighted:{l3}:{l4}"),
        }
    }
}

impl FromStr for FusionMode {
    type Err = HcdError;

    /// `add`, `none`, `ratio:L1:L2` or `weighted:L3:L4`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |t: &str| {
            t.parse::<f64>()
                .map_err(|_| HcdError::Config(format!("bad number {t:?} in fusion mode {s:?}")))
        };
        let mode = match parts.as_slice() {
            ["add"] => FusionMode::Add,
            ["none"] => FusionMode::None,
            ["ratio", a, b] => FusionMode::Ratio {
                l1: num(a)?,
                l2: num(b)?,
            },
            ["weighted", a, b] => FusionMode::Weighted {
                l3: num(a)?,
                l4: num(b)?,
            },
            _ => return Err(HcdError::Config(format!("unknown fusion mode {s:?}"))),
        };
        mode.validate()?;
        Ok(mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HcdConfig {
    /// Number of sub-logits per stage.
    pub n: usize,
    pub tau: f64,
    /// Orthogonality hinge threshold.
    pub theta: f64,
    /// Value written at the ground-truth position before the orthogonality loss.
    pub eps_mask: f64,
    pub lambda: f64,
    pub beta: f64,
    pub omega: f64,
    /// CE weight of the vanilla KD baseline.
    pub alpha: f64,
    /// 1-based student stages that feed a CFM head.
    pub stages: Vec<usize>,
    /// Pooled student feature width.
    pub m: usize,
    /// Teacher feature width.
    pub d: usize,
    pub fusion: FusionMode,
    /// Multiply every KL term by tau^2.
    pub kl_tau_squared: bool,
    /// Stop the gradient into the student logits inside the sub-logit KL.
    pub detach_student_in_sub_kd: bool,
}

impl Default for HcdConfig {
    fn default() -> Self {
        Self {
            n: 4,
            tau: 4.0,
            theta: 0.5,
            eps_mask: 1e-6,
            lambda: 1.0,
            beta: 8.0,
            omega: 10.0,
            alpha: 0.5,
            stages: vec![1, 2, 3, 4],
            m: 16,
            d: 32,
            fusion: FusionMode::Add,
            kl_tau_squared: true,
            detach_student_in_sub_kd: false,
        }
    }
}

impl HcdConfig {
    /// Check the invariants against a student with `num_stages` stages.
    pub fn validate(&self, num_stages: usize) -> Result<()> {
        let bad = |m: String| Err(HcdError::Config(m));
        if self.n == 0 {
            return bad("n must be >= 1".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return bad(format!("theta must lie in [0, 1], got {}", self.theta));
        }
        if !(self.eps_mask > 0.0 && self.eps_mask.is_finite()) {
            return bad(format!("eps_mask must be positive, got {}", self.eps_mask));
        }
        for (name, w) in [
            ("lambda", self.lambda),
            ("beta", self.beta),
            ("omega", self.omega),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!(
                    "{name} must be a finite non-negative weight, got {w}"
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if self.stages.is_empty() {
            return bad("at least one stage must be selected".into());
        }
        let mut seen = vec![false; num_stages + 1];
        for &s in &self.stages {
            if s == 0 || s > num_stages {
                return bad(format!("stage {s} outside 1..={num_stages}"));
            }
            if std::mem::replace(&mut seen[s], true) {
                return bad(format!("stage {s} listed twice"));
            }
        }
        if self.stages.windows(2).any(|w| w[0] > w[1]) {
            return bad(format!("stages must be ordered, got {:?}", self.stages));
        }
        if self.m == 0 || self.d == 0 {
            return bad("m and d must be >= 1".into());
        }
        self.fusion.validate()
    }

    /// Factor applied to KL terms.
    pub fn kl_scale(&self) -> f64 {
        if self.kl_tau_squared {
            self.tau * self.tau
        } else {
            1.0
        }
    }
}
