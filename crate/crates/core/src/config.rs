//! Flat run configuration shared by the CLI, the protocol runner and sweeps.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::experiment::metrics::Metric;
use crate::objectives::ClVariant;
use crate::training::{FineTuneConfig, Objective, TrainConfig};

/// Every tunable of a run. Unknown keys are rejected; absent keys take the
/// defaults below. Epoch counts left unset follow the subset-size schedule
/// (20 → 200/350, 100 → 50/100, 1000 → 5/10 post-train/fine-tune epochs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub layer_norm_eps: f64,
    pub max_vocab: usize,

    pub method: Objective,
    pub lr: f64,
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub alpha: f64,
    pub p_m: f64,
    pub p_c: f64,
    #[serde(alias = "K")]
    pub k: usize,
    pub tau: f64,
    pub cl_variant: ClVariant,
    pub seed: u64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub checkpoint_interval: usize,
    pub grad_clip: Option<f64>,
    pub eda_rate: f64,

    pub ft_lr: f64,
    pub ft_epochs: Option<usize>,
    pub ft_batch_size: usize,

    /// `separable`, `domain-shift` or `jsonl`.
    pub task: String,
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub unlabeled_data: Option<PathBuf>,
    pub subset_size: usize,
    pub num_subsets: usize,
    pub seeds: Vec<u64>,
    pub dev_size: usize,
    pub metric: Metric,
    /// Post-train on this many texts of the unlabeled pool instead of the
    /// subset's own texts.
    pub unlabeled_count: Option<usize>,
    pub pool_size: usize,
    pub eval_pool_size: usize,
    pub unlabeled_pool_size: usize,
    pub synth_vocab: usize,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::desk(0);
        let tc = TrainConfig::default();
        let ft = FineTuneConfig::default();
        Self {
            layers: enc.layers,
            heads: enc.heads,
            hidden: enc.hidden,
            ffn: enc.ffn,
            max_len: enc.max_len,
            layer_norm_eps: enc.layer_norm_eps,
            max_vocab: 5000,
            method: tc.objective,
            lr: tc.lr,
            epochs: None,
            batch_size: tc.batch_size,
            alpha: tc.alpha,
            p_m: tc.p_m,
            p_c: tc.p_c,
            k: tc.k,
            tau: tc.tau,
            cl_variant: tc.cl_variant,
            seed: tc.seed,
            weight_decay: tc.weight_decay,
            dropout: tc.dropout,
            checkpoint_interval: tc.checkpoint_interval,
            grad_clip: None,
            eda_rate: tc.eda_rate,
            ft_lr: ft.lr,
            ft_epochs: None,
            ft_batch_size: ft.batch_size,
            task: "separable".into(),
            train_data: None,
            eval_data: None,
            unlabeled_data: None,
            subset_size: 100,
            num_subsets: 5,
            seeds: vec![31, 42, 53],
            dev_size: 500,
            metric: Metric::Acc,
            unlabeled_count: None,
            pool_size: 1000,
            eval_pool_size: 1000,
            unlabeled_pool_size: 2500,
            synth_vocab: 60,
            jobs: 1,
        }
    }
}

pub const TASKS: [&str; 3] = ["separable", "domain-shift", "jsonl"];

fn schedule(subset_size: usize, post: bool) -> Option<usize> {
    match (subset_size, post) {
        (20, true) => Some(200),
        (100, true) => Some(50),
        (1000, true) => Some(5),
        (20, false) => Some(350),
        (100, false) => Some(100),
        (1000, false) => Some(10),
        _ => None,
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fills unset epoch counts and validates everything.
    pub fn resolve(mut self) -> Result<Self> {
        let missing = |key: &str| {
            Error::Config(format!(
                "{key} must be set explicitly for subset_size {} (the default schedule covers 20, 100 and 1000)",
                self.subset_size
            ))
        };
        if self.epochs.is_none() {
            self.epochs = Some(schedule(self.subset_size, true).ok_or_else(|| missing("epochs"))?);
        }
        if self.ft_epochs.is_none() {
            self.ft_epochs = Some(schedule(self.subset_size, false).ok_or_else(|| missing("ft_epochs"))?);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.encoder_config(self.max_vocab.max(crate::text::NUM_SPECIAL + 1))
            .validate()?;
        self.train_config(self.seed).validate()?;
        self.fine_tune_config().validate()?;
        if self.max_vocab <= crate::text::NUM_SPECIAL {
            return fail(format!("max_vocab must exceed {}", crate::text::NUM_SPECIAL));
        }
        if !TASKS.contains(&self.task.as_str()) {
            return fail(format!("task must be one of {TASKS:?}, got {:?}", self.task));
        }
        if self.task == "jsonl" && (self.train_data.is_none() || self.eval_data.is_none()) {
            return fail("task jsonl needs train_data and eval_data".into());
        }
        if self.task == "jsonl" && self.unlabeled_count.is_some() && self.unlabeled_data.is_none() {
            return fail("unlabeled_count with task jsonl needs unlabeled_data".into());
        }
        if self.subset_size == 0 || self.num_subsets == 0 {
            return fail("subset_size and num_subsets must be positive".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds must not be empty".into());
        }
        if self.unlabeled_count == Some(0) {
            return fail("unlabeled_count must be positive when set".into());
        }
        if self.jobs == 0 {
            return fail("jobs must be at least 1".into());
        }
        if self.synth_vocab < 12 {
            return fail(format!("synth_vocab must be at least 12, got {}", self.synth_vocab));
        }
        if self.epochs == Some(0) || self.ft_epochs == Some(0) {
            return fail("epoch counts must be positive".into());
        }
        Ok(())
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            heads: self.heads,
            hidden: self.hidden,
            ffn: self.ffn,
            vocab_size,
            max_len: self.max_len,
            dropout: self.dropout,
            layer_norm_eps: self.layer_norm_eps,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs.unwrap_or(1),
            batch_size: self.batch_size,
            alpha: self.alpha,
            p_m: self.p_m,
            p_c: self.p_c,
            k: self.k,
            tau: self.tau,
            cl_variant: self.cl_variant,
            objective: self.method,
            seed,
            weight_decay: self.weight_decay,
            dropout: self.dropout,
            checkpoint_interval: self.checkpoint_interval,
            grad_clip: self.grad_clip,
            eda_rate: self.eda_rate,
        }
    }

    pub fn fine_tune_config(&self) -> FineTuneConfig {
        FineTuneConfig {
            lr: self.ft_lr,
            epochs: self.ft_epochs.unwrap_or(1),
            batch_size: self.ft_batch_size,
            weight_decay: self.weight_decay,
            dropout: self.dropout,
            checkpoint_interval: self.checkpoint_interval,
            grad_clip: self.grad_clip,
            metric: self.metric,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        format!("{:x}", Sha256::digest(bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let c = RunConfig::default().resolve().unwrap();
        assert_eq!(c.epochs, Some(50));
        assert_eq!(c.ft_epochs, Some(100));
        assert_eq!(c.seeds, vec![31, 42, 53]);
        assert_eq!(c.dev_size, 500);
    }

    #[test]
    fn schedule_by_subset_size() {
        for (n, post, ft) in [(20, 200, 350), (100, 50, 100), (1000, 5, 10)] {
            let c = RunConfig {
                subset_size: n,
                ..Default::default()
            }
            .resolve()
            .unwrap();
            assert_eq!((c.epochs, c.ft_epochs), (Some(post), Some(ft)));
        }
        let odd = RunConfig {
            subset_size: 37,
            ..Default::default()
        };
        assert!(odd.clone().resolve().is_err());
        let explicit = RunConfig {
            epochs: Some(3),
            ft_epochs: Some(4),
            ..odd
        };
        assert!(explicit.resolve().is_ok());
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_json(r#"{"alhpa": 0.5}"#).unwrap_err();
        assert!(err.to_string().contains("alhpa"), "{err}");
        let c = RunConfig::from_json(r#"{"K": 3, "alpha": 0.1, "method": "cssl:eda-pair"}"#).unwrap();
        assert_eq!(c.k, 3);
        assert!(RunConfig::from_json(r#"{"method": "scl"}"#).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::from_json(r#"{"subset_size": 20, "p_c": 0.3}"#)
            .unwrap()
            .resolve()
            .unwrap();
        let echoed = serde_json::to_string(&c).unwrap();
        let back = RunConfig::from_json(&echoed).unwrap().resolve().unwrap();
        assert_eq!(back, c);
        assert_eq!(back.fingerprint(), c.fingerprint());
        let other = RunConfig { p_c: 0.5, ..c };
        assert_ne!(other.fingerprint(), back.fingerprint());
    }

    #[test]
    fn invalid_values() {
        for json in [
            r#"{"lr": 0}"#,
            r#"{"p_m": 2}"#,
            r#"{"task": "glue"}"#,
            r#"{"task": "jsonl"}"#,
            r#"{"seeds": []}"#,
            r#"{"jobs": 0}"#,
            r#"{"heads": 3}"#,
        ] {
            let c = RunConfig::from_json(json).unwrap();
            assert!(c.resolve().is_err(), "{json}");
        }
    }
}
