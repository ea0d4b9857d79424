use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::check_common;
use super::optim::{adamw_step, clip_grad_norm, AdamState, AdamW};
use crate::autodiff::{Real, Tape};
use crate::encoder::{classifier_logits, encode_tokens, pool_first, stack, trim_padding, EncoderParams};
use crate::error::{Error, Result};
use crate::experiment::metrics::Metric;
use crate::par::Execution;
use crate::rng::{derive, Rng};
use crate::text::{TokenId, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub dropout: f64,
    pub checkpoint_interval: usize,
    pub grad_clip: Option<f64>,
    pub metric: Metric,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            epochs: 10,
            batch_size: 16,
            weight_decay: 0.01,
            dropout: 0.1,
            checkpoint_interval: 100,
            grad_clip: None,
            metric: Metric::Acc,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(
            self.lr,
            self.batch_size,
            self.checkpoint_interval,
            self.dropout,
            self.weight_decay,
            self.grad_clip,
        )
    }
}

/// Dev metric at one saved checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub step: u64,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneOutcome<T> {
    /// Parameters of the best checkpoint.
    pub params: EncoderParams<T>,
    pub best: Evaluation,
    pub evaluations: Vec<Evaluation>,
    pub trace: Vec<f64>,
}

/// Index of the largest value, earliest on ties.
pub fn select_best(metrics: &[f64]) -> Option<usize> {
    metrics
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &m)| match best {
            Some((_, b)) if m <= b => best,
            _ => Some((i, m)),
        })
        .map(|(i, _)| i)
}

fn frozen(name: &str) -> bool {
    name.starts_with("predictor.") || name == "mlm.bias"
}

/// Trains the encoder and its classification head with cross-entropy on the
/// first-token representation of uncorrupted sequences. The dev set is
/// scored every `checkpoint_interval` steps and after the last step; the
/// best-scoring parameters are returned.
///
/// The MLM bias and SimSiam predictor get no gradient here and are left
/// untouched.
pub fn fine_tune<T: Real>(
    init: &EncoderParams<T>,
    train: &[(TokenSequence, usize)],
    dev: &[(TokenSequence, usize)],
    cfg: &FineTuneConfig,
    rng: &mut Rng,
    exec: Execution,
) -> Result<FineTuneOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("fine-tuning train set".into()));
    }
    if dev.is_empty() {
        return Err(Error::Empty("fine-tuning dev set".into()));
    }
    let classes = init
        .num_classes()
        .ok_or_else(|| Error::invalid("fine_tune needs parameters with a classifier head"))?;
    if let Some((_, y)) = train.iter().chain(dev).find(|(_, y)| *y >= classes) {
        return Err(Error::invalid(format!("label {y} outside the {classes}-class head")));
    }

    let mut params = init.clone();
    params.set_dropout(cfg.dropout)?;
    let names = params.names().to_vec();
    let opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut state = AdamState::new(params.tensors());
    let dev_ids: Vec<Vec<TokenId>> = dev.iter().map(|(s, _)| s.ids().to_vec()).collect();
    let dev_gold: Vec<usize> = dev.iter().map(|(_, y)| *y).collect();
    let evaluate = |p: &EncoderParams<T>, step: u64| -> Result<Evaluation> {
        let preds = p.predict(&dev_ids, exec)?;
        Ok(Evaluation {
            step,
            metric: cfg.metric.compute(&preds, &dev_gold)?,
        })
    };

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let mut evaluations = Vec::new();
    let mut best: Option<(Evaluation, EncoderParams<T>)> = None;
    let mut record = |e: Evaluation, p: &EncoderParams<T>, evaluations: &mut Vec<Evaluation>| {
        evaluations.push(e);
        if best.as_ref().is_none_or(|(b, _)| e.metric > b.metric) {
            best = Some((e, p.clone()));
        }
    };

    let mut trace = Vec::with_capacity(total_steps as usize);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let step_seed = rng.next_u64();
            let mut tape = Tape::new();
            let bound = params.bind_with(&mut tape, |n| !frozen(n));
            let mut pooled = Vec::with_capacity(chunk.len());
            for (j, &i) in chunk.iter().enumerate() {
                let mut dr = derive(step_seed, &[j as u64]);
                let h = encode_tokens(&mut tape, &bound, trim_padding(train[i].0.ids()), Some(&mut dr))?;
                pooled.push(pool_first(&mut tape, h)?);
            }
            let rows = stack(&mut tape, &pooled)?;
            let logits = classifier_logits(&mut tape, &bound, rows)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| train[i].1).collect();
            let ce = tape.cross_entropy(logits, &targets)?;
            let loss = tape.mean(ce)?;
            let value = tape.value(loss).item().f64();
            if !value.is_finite() {
                return Err(Error::NonFinite("fine-tuning loss".into()));
            }
            let g = tape.backward(loss)?;
            let mut grads: Vec<_> = names
                .iter()
                .zip(bound.vars())
                .map(|(n, &v)| (!frozen(n)).then(|| g.wrt(v)))
                .collect();
            drop(bound);
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            adamw_step(params.tensors_mut(), &names, &grads, &mut state, &opt)?;
            trace.push(value);
            step += 1;
            if step.is_multiple_of(cfg.checkpoint_interval as u64) {
                record(evaluate(&params, step)?, &params, &mut evaluations);
            }
        }
    }
    if step == 0 || !step.is_multiple_of(cfg.checkpoint_interval as u64) {
        record(evaluate(&params, step)?, &params, &mut evaluations);
    }
    let (best, params) = best.expect("at least one evaluation");
    Ok(FineTuneOutcome {
        params,
        best,
        evaluations,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::rng::seeded;

    #[test]
    fn best_is_earliest_argmax() {
        assert_eq!(select_best(&[0.6, 0.9, 0.7]), Some(1));
        assert_eq!(select_best(&[0.5, 0.8, 0.8, 0.2]), Some(1));
        assert_eq!(select_best(&[]), None);
    }

    fn toy() -> (EncoderParams<f32>, Vec<(TokenSequence, usize)>) {
        let cfg = EncoderConfig {
            layers: 1,
            heads: 2,
            hidden: 8,
            ffn: 16,
            vocab_size: 12,
            max_len: 6,
            dropout: 0.0,
            layer_norm_eps: 1e-5,
        };
        let mut p = EncoderParams::init(&cfg, &mut seeded(1)).unwrap();
        p.set_classifier(2, &mut seeded(2)).unwrap();
        let data = (0..12)
            .map(|i| {
                let y = i % 2;
                let tok = if y == 0 { 5 + (i % 3) as u32 } else { 8 + (i % 3) as u32 };
                (TokenSequence::from_segments(&[tok, tok], None, 6).unwrap(), y)
            })
            .collect();
        (p, data)
    }

    fn cfg(epochs: usize, interval: usize) -> FineTuneConfig {
        FineTuneConfig {
            lr: 1e-2,
            epochs,
            batch_size: 4,
            dropout: 0.0,
            checkpoint_interval: interval,
            ..Default::default()
        }
    }

    #[test]
    fn single_evaluation_when_interval_exceeds_steps() {
        let (p, data) = toy();
        let out = fine_tune(&p, &data, &data, &cfg(2, 1000), &mut seeded(0), Execution::Sequential).unwrap();
        assert_eq!(out.evaluations.len(), 1);
        assert_eq!(out.evaluations[0].step, 6);
    }

    #[test]
    fn no_double_evaluation_at_aligned_end() {
        let (p, data) = toy();
        let out = fine_tune(&p, &data, &data, &cfg(2, 3), &mut seeded(0), Execution::Sequential).unwrap();
        let steps: Vec<u64> = out.evaluations.iter().map(|e| e.step).collect();
        assert_eq!(steps, vec![3, 6]);
    }

    #[test]
    fn returns_best_checkpoint_and_learns() {
        let (p, data) = toy();
        let out = fine_tune(&p, &data, &data, &cfg(30, 3), &mut seeded(0), Execution::Sequential).unwrap();
        for e in &out.evaluations {
            assert!(out.best.metric >= e.metric);
        }
        let metrics: Vec<f64> = out.evaluations.iter().map(|e| e.metric).collect();
        assert_eq!(out.evaluations[select_best(&metrics).unwrap()], out.best);
        let ids: Vec<Vec<u32>> = data.iter().map(|(s, _)| s.ids().to_vec()).collect();
        let preds = out.params.predict(&ids, Execution::Sequential).unwrap();
        let gold: Vec<usize> = data.iter().map(|(_, y)| *y).collect();
        assert_eq!(Metric::Acc.compute(&preds, &gold).unwrap(), out.best.metric);
        assert_eq!(out.best.metric, 1.0);
        assert_eq!(out.params.get("predictor.w1"), p.get("predictor.w1"));
    }

    #[test]
    fn errors() {
        let (p, data) = toy();
        let c = cfg(1, 10);
        assert!(fine_tune(&p, &[], &data, &c, &mut seeded(0), Execution::Sequential).is_err());
        assert!(fine_tune(&p, &data, &[], &c, &mut seeded(0), Execution::Sequential).is_err());
        let mut bad = data.clone();
        bad[0].1 = 5;
        assert!(fine_tune(&p, &bad, &data, &c, &mut seeded(0), Execution::Sequential).is_err());
    }
}
