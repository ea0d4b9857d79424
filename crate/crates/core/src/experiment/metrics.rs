//! Classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Acc,
    Mcc,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Acc => "acc",
            Metric::Mcc => "mcc",
        }
    }

    pub fn compute(self, preds: &[usize], golds: &[usize]) -> Result<f64> {
        match self {
            Metric::Acc => accuracy(preds, golds),
            Metric::Mcc => mcc(preds, golds),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "acc" => Ok(Metric::Acc),
            "mcc" => Ok(Metric::Mcc),
            other => Err(Error::invalid(format!("unknown metric {other:?}; expected acc or mcc"))),
        }
    }
}

fn check(preds: &[usize], golds: &[usize]) -> Result<()> {
    if preds.len() != golds.len() {
        return Err(Error::ShapeMismatch {
            op: "metric",
            lhs: vec![preds.len()],
            rhs: vec![golds.len()],
        });
    }
    if preds.is_empty() {
        return Err(Error::Empty("metric over zero predictions".into()));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    check(preds, golds)?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Matthews correlation for binary labels; 0 when any marginal is empty.
pub fn mcc(preds: &[usize], golds: &[usize]) -> Result<f64> {
    check(preds, golds)?;
    if let Some(bad) = preds.iter().chain(golds).find(|&&x| x > 1) {
        return Err(Error::invalid(format!("mcc needs binary labels, found class {bad}")));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0f64, 0f64, 0f64, 0f64);
    for (&p, &g) in preds.iter().zip(golds) {
        match (p, g) {
            (1, 1) => tp += 1.0,
            (0, 0) => tn += 1.0,
            (1, 0) => fp += 1.0,
            _ => fn_ += 1.0,
        }
    }
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((tp * tn - fp * fn_) / denom.sqrt())
}
