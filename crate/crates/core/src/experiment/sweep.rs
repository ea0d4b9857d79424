use serde::{Deserialize, Serialize};

use super::protocol::run_protocol;
use crate::config::RunConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "unlabeled_count")]
    UnlabeledCount,
    #[serde(rename = "K")]
    K,
    #[serde(rename = "alpha")]
    Alpha,
    #[serde(rename = "p_c")]
    PC,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::UnlabeledCount => "unlabeled_count",
            SweepAxis::K => "K",
            SweepAxis::Alpha => "alpha",
            SweepAxis::PC => "p_c",
        }
    }

    /// A copy of `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: f64) -> Result<RunConfig> {
        let count = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!("{} needs a positive integer, got {v}", self.name())))
            }
        };
        let mut c = base.clone();
        match self {
            SweepAxis::UnlabeledCount => c.unlabeled_count = Some(count(value)?),
            SweepAxis::K => c.k = count(value)?,
            SweepAxis::Alpha => c.alpha = value,
            SweepAxis::PC => c.p_c = value,
        }
        Ok(c)
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unlabeled_count" => Ok(SweepAxis::UnlabeledCount),
            "K" | "k" => Ok(SweepAxis::K),
            "alpha" => Ok(SweepAxis::Alpha),
            "p_c" => Ok(SweepAxis::PC),
            other => Err(Error::invalid(format!(
                "unknown sweep axis {other:?}; expected unlabeled_count, K, alpha or p_c"
            ))),
        }
    }
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub method: String,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
    pub config_fingerprint: String,
}

/// Runs the protocol once per value. Every config is validated before the
/// first run starts.
pub fn sweep(base: &RunConfig, axis: SweepAxis, values: &[f64], timestamp: &str) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Empty("sweep values".into()));
    }
    let configs = values
        .iter()
        .map(|&v| axis.apply(base, v)?.resolve())
        .collect::<Result<Vec<_>>>()?;
    values
        .iter()
        .zip(&configs)
        .map(|(&value, cfg)| {
            let r = run_protocol(cfg, timestamp)?;
            Ok(SweepRow {
                axis,
                value,
                method: r.method,
                mean: r.mean,
                std: r.std,
                runs: r.records.len(),
                config_fingerprint: r.config_fingerprint,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_application() {
        let base = RunConfig::default();
        assert_eq!(SweepAxis::K.apply(&base, 3.0).unwrap().k, 3);
        assert!(SweepAxis::K.apply(&base, 1.5).is_err());
        assert!(SweepAxis::UnlabeledCount.apply(&base, 0.0).is_err());
        assert_eq!(SweepAxis::Alpha.apply(&base, 0.3).unwrap().alpha, 0.3);
        assert_eq!(SweepAxis::PC.apply(&base, 0.9).unwrap().p_c, 0.9);
        assert_eq!("K".parse::<SweepAxis>().unwrap(), SweepAxis::K);
        assert!("tau".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn invalid_value_fails_before_running() {
        let base = RunConfig::default();
        assert!(sweep(&base, SweepAxis::PC, &[0.5, 1.5], "t").is_err());
        assert!(sweep(&base, SweepAxis::PC, &[], "t").is_err());
    }

    #[test]
    fn k_sweep_has_one_row_per_value() {
        let base = RunConfig {
            layers: 1,
            heads: 2,
            hidden: 8,
            ffn: 16,
            max_len: 16,
            lr: 1e-3,
            epochs: Some(1),
            ft_epochs: Some(1),
            subset_size: 6,
            num_subsets: 1,
            seeds: vec![1],
            dev_size: 10,
            pool_size: 20,
            eval_pool_size: 20,
            synth_vocab: 24,
            ..Default::default()
        };
        let rows = sweep(&base, SweepAxis::K, &[1.0, 2.0, 3.0], "t").unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.runs == 1));
        assert_ne!(rows[0].config_fingerprint, rows[1].config_fingerprint);
    }
}
