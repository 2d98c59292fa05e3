//! Hyperparameters shared by the centralized and federated trainers.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{QupelError, Result};
use crate::proxops::CenterPull;
use crate::quantizer::{QuantConfig, DEFAULT_C_MAX};

/// Regularization weight as a function of the step index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaSchedule {
    Constant { value: f64 },
    /// `min(slope * t, cap)`.
    Linear { slope: f64, cap: Option<f64> },
    /// Value of the last breakpoint `(step, value)` with `step <= t`; zero
    /// before the first.
    Piecewise { points: Vec<(usize, f64)> },
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        LambdaSchedule::Constant { value: 0.0 }
    }
}

impl LambdaSchedule {
    pub fn at(&self, t: usize) -> f64 {
        match self {
            LambdaSchedule::Constant { value } => *value,
            LambdaSchedule::Linear { slope, cap } => {
                let v = slope * t as f64;
                cap.map_or(v, |c| v.min(c))
            }
            LambdaSchedule::Piecewise { points } => piecewise_at(points, t, 0.0),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        let valid = match self {
            LambdaSchedule::Constant { value } => ok(*value),
            LambdaSchedule::Linear { slope, cap } => ok(*slope) && cap.is_none_or(ok),
            LambdaSchedule::Piecewise { points } => {
                points.windows(2).all(|w| w[0].0 < w[1].0) && points.iter().all(|p| ok(p.1))
            }
        };
        if valid {
            Ok(())
        } else {
            Err(QupelError::config("lambda", "schedule values must be finite and >= 0, breakpoints increasing"))
        }
    }
}

fn piecewise_at(points: &[(usize, f64)], t: usize, before: f64) -> f64 {
    points.iter().take_while(|p| p.0 <= t).last().map_or(before, |p| p.1)
}

fn default_eta3() -> f64 {
    1.0
}
fn default_tau() -> usize {
    1
}
fn default_c_max() -> f64 {
    DEFAULT_C_MAX
}
fn default_quant() -> QuantConfig {
    QuantConfig::hard()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    pub eta1: f64,
    /// Zero freezes the centers.
    pub eta2: f64,
    #[serde(default = "default_eta3")]
    pub eta3: f64,
    #[serde(default)]
    pub lambda: LambdaSchedule,
    #[serde(default)]
    pub lambda_p: f64,
    #[serde(default = "default_tau")]
    pub tau: usize,
    pub steps: usize,
    /// First step of the fine-tuning phase; `None` disables it.
    #[serde(default)]
    pub fine_tune_start: Option<usize>,
    /// Center step size during fine-tuning; defaults to `eta2`.
    #[serde(default)]
    pub fine_tune_eta2: Option<f64>,
    #[serde(default = "default_quant")]
    pub quant: QuantConfig,
    /// Piecewise multipliers `(step, factor)` applied to `eta2`.
    #[serde(default)]
    pub eta2_decay: Option<Vec<(usize, f64)>>,
    #[serde(default)]
    pub center_pull: CenterPull,
    #[serde(default = "default_c_max")]
    pub c_max: f64,
    /// Use `w - eta3 lambda_p (x - w)` for the local global-model update.
    #[serde(default)]
    pub w_update_away_from_x: bool,
    /// Minibatch size; `None` uses full gradients.
    #[serde(default)]
    pub minibatch: Option<usize>,
}

impl HyperParams {
    /// Full-gradient hard-limit defaults with the given steps.
    pub fn new(eta1: f64, eta2: f64, steps: usize) -> Self {
        HyperParams {
            eta1,
            eta2,
            eta3: default_eta3(),
            lambda: LambdaSchedule::default(),
            lambda_p: 0.0,
            tau: default_tau(),
            steps,
            fine_tune_start: None,
            fine_tune_eta2: None,
            quant: default_quant(),
            eta2_decay: None,
            center_pull: CenterPull::default(),
            c_max: default_c_max(),
            w_update_away_from_x: false,
            minibatch: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(QupelError::config(name, format!("must be > 0, got {v}")))
            }
        };
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(QupelError::config(name, format!("must be >= 0, got {v}")))
            }
        };
        positive("eta1", self.eta1)?;
        nonneg("eta2", self.eta2)?;
        positive("eta3", self.eta3)?;
        nonneg("lambda_p", self.lambda_p)?;
        positive("c_max", self.c_max)?;
        if let Some(e) = self.fine_tune_eta2 {
            nonneg("fine_tune_eta2", e)?;
        }
        self.lambda.validate()?;
        if self.tau == 0 {
            return Err(QupelError::config("tau", "must be >= 1"));
        }
        if let Some(f) = self.fine_tune_start {
            if f > self.steps {
                return Err(QupelError::config(
                    "fine_tune_start",
                    format!("{f} exceeds steps = {}", self.steps),
                ));
            }
        }
        if let Some(points) = &self.eta2_decay {
            if !points.windows(2).all(|w| w[0].0 < w[1].0) || points.iter().any(|p| !p.1.is_finite() || p.1 < 0.0) {
                return Err(QupelError::config("eta2_decay", "breakpoints must increase, factors >= 0"));
            }
        }
        if self.minibatch == Some(0) {
            return Err(QupelError::config("minibatch", "must be >= 1"));
        }
        self.quant.validate()
    }

    pub fn lambda_at(&self, t: usize) -> f64 {
        self.lambda.at(t)
    }

    pub fn eta2_at(&self, t: usize) -> f64 {
        match &self.eta2_decay {
            Some(points) => self.eta2 * piecewise_at(points, t, 1.0),
            None => self.eta2,
        }
    }

    pub fn in_fine_tune(&self, t: usize) -> bool {
        self.fine_tune_start.is_some_and(|f| t >= f)
    }

    /// Hex sha256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("hyperparameters serialize");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        assert_eq!(LambdaSchedule::Constant { value: 0.3 }.at(99), 0.3);
        let lin = LambdaSchedule::Linear { slope: 1e-4, cap: Some(2e-4) };
        assert_eq!(lin.at(0), 0.0);
        assert_eq!(lin.at(1), 1e-4);
        assert_eq!(lin.at(10), 2e-4);
        let pw = LambdaSchedule::Piecewise { points: vec![(5, 0.1), (10, 0.2)] };
        assert_eq!(pw.at(4), 0.0);
        assert_eq!(pw.at(5), 0.1);
        assert_eq!(pw.at(30), 0.2);
    }

    #[test]
    fn validation_names_fields() {
        let mut hp = HyperParams::new(0.1, 0.1, 10);
        assert!(hp.validate().is_ok());
        hp.eta1 = 0.0;
        assert!(hp.validate().unwrap_err().to_string().contains("eta1"));
        let mut hp = HyperParams::new(0.1, 0.1, 10);
        hp.fine_tune_start = Some(11);
        assert!(hp.validate().unwrap_err().to_string().contains("fine_tune_start"));
        hp.fine_tune_start = Some(10);
        assert!(hp.validate().is_ok());
    }

    #[test]
    fn eta2_decay_and_hash() {
        let mut hp = HyperParams::new(0.1, 0.2, 10);
        hp.eta2_decay = Some(vec![(3, 0.5)]);
        assert_eq!(hp.eta2_at(2), 0.2);
        assert_eq!(hp.eta2_at(3), 0.1);
        let h = hp.hash();
        assert_eq!(h.len(), 64);
        assert_eq!(h, hp.clone().hash());
        hp.eta1 = 0.3;
        assert_ne!(h, hp.hash());
    }

    #[test]
    fn json_round_trip() {
        let mut hp = HyperParams::new(0.1, 0.2, 10);
        hp.lambda = LambdaSchedule::Linear { slope: 0.01, cap: None };
        let s = serde_json::to_string(&hp).unwrap();
        let back: HyperParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, hp);
    }
}
