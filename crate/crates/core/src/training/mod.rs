//! Optimization, post-training (CMLM, TAPT, CSSL), fine-tuning and
//! checkpoints.

pub mod checkpoint;
mod fine_tune;
pub mod optim;
mod post_train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use fine_tune::{fine_tune, select_best, Evaluation, FineTuneConfig, FineTuneOutcome};
pub use optim::{adamw_step, clip_grad_norm, AdamState, AdamW};
pub use post_train::{post_train, PostTrainOutcome};

use crate::error::{Error, Result};
use crate::masking::{augmenter_for, Augmenter};
use crate::objectives::ClVariant;

/// What post-training optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Objective {
    /// MLM on `T^0` plus `α ·` CL over the CRM views.
    Cmlm,
    /// MLM on a DRM view only.
    Tapt,
    /// CL only, over view pairs from an augmenter.
    Cssl(Augmenter),
    /// No post-training (plain fine-tuning); spelled `ft` or `none`.
    None,
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cmlm" => Ok(Objective::Cmlm),
            "tapt" => Ok(Objective::Tapt),
            "ft" | "none" => Ok(Objective::None),
            "scl" => Err(Error::Unsupported("the SCL objective is not implemented".into())),
            _ => match s.strip_prefix("cssl:") {
                Some(aug) => Ok(Objective::Cssl(augmenter_for(aug)?)),
                None => Err(Error::invalid(format!(
                    "unknown objective {s:?}; expected ft, tapt, cmlm or cssl:<augmenter>"
                ))),
            },
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Objective::Cmlm => f.write_str("cmlm"),
            Objective::Tapt => f.write_str("tapt"),
            Objective::Cssl(a) => write!(f, "cssl:{}", a.name()),
            Objective::None => f.write_str("ft"),
        }
    }
}

impl TryFrom<String> for Objective {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Objective> for String {
    fn from(o: Objective) -> String {
        o.to_string()
    }
}

/// Post-training hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub p_m: f64,
    pub p_c: f64,
    pub k: usize,
    pub tau: f64,
    pub cl_variant: ClVariant,
    pub objective: Objective,
    pub seed: u64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub checkpoint_interval: usize,
    pub grad_clip: Option<f64>,
    pub eda_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            epochs: 5,
            batch_size: 8,
            alpha: 0.5,
            p_m: 0.15,
            p_c: 0.7,
            k: 1,
            tau: 0.1,
            cl_variant: ClVariant::SimSiam,
            objective: Objective::Cmlm,
            seed: 42,
            weight_decay: 0.01,
            dropout: 0.1,
            checkpoint_interval: 100,
            grad_clip: None,
            eda_rate: 0.1,
        }
    }
}

pub(crate) fn check_common(lr: f64, batch_size: usize, interval: usize, dropout: f64, wd: f64, clip: Option<f64>) -> Result<()> {
    let fail = |m: String| Err(Error::Config(m));
    if !(lr > 0.0) || !lr.is_finite() {
        return fail(format!("learning rate must be positive, got {lr}"));
    }
    if batch_size == 0 {
        return fail("batch size must be at least 1".into());
    }
    if interval == 0 {
        return fail("checkpoint interval must be at least 1".into());
    }
    if !(0.0..1.0).contains(&dropout) {
        return fail(format!("dropout must lie in [0, 1), got {dropout}"));
    }
    if !(wd >= 0.0) {
        return fail(format!("weight decay must be non-negative, got {wd}"));
    }
    if let Some(c) = clip {
        if !(c > 0.0) {
            return fail(format!("grad_clip must be positive, got {c}"));
        }
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(
            self.lr,
            self.batch_size,
            self.checkpoint_interval,
            self.dropout,
            self.weight_decay,
            self.grad_clip,
        )?;
        let fail = |m: String| Err(Error::Config(m));
        for (name, p) in [("p_m", self.p_m), ("p_c", self.p_c), ("eda_rate", self.eda_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.k == 0 {
            return fail("K must be at least 1".into());
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return fail(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW::new(self.lr, self.weight_decay)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn objective_names_round_trip() {
        for name in ["cmlm", "tapt", "ft", "cssl:crm-pair", "cssl:eda-pair", "cssl:drm-pair", "cssl:identity"] {
            let o: Objective = name.parse().unwrap();
            assert_eq!(o.to_string(), name);
            let json = serde_json::to_string(&o).unwrap();
            assert_eq!(serde_json::from_str::<Objective>(&json).unwrap(), o);
        }
        assert_eq!("none".parse::<Objective>().unwrap(), Objective::None);
        assert!(matches!("scl".parse::<Objective>(), Err(Error::Unsupported(_))));
        assert!(matches!("cssl:back-translation".parse::<Objective>(), Err(Error::Unsupported(_))));
        assert!("cssl:nope".parse::<Objective>().is_err());
        assert!("mlm".parse::<Objective>().is_err());
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { checkpoint_interval: 0, ..Default::default() },
            TrainConfig { p_c: 1.5, ..Default::default() },
            TrainConfig { k: 0, ..Default::default() },
            TrainConfig { tau: 0.0, ..Default::default() },
            TrainConfig { alpha: -1.0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }
}
