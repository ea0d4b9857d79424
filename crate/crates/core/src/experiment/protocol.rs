use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synthetic::{make_synthetic_task, TaskKind, TaskSizes};
use crate::config::RunConfig;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::rng::{derive, derive_seed};
use crate::text::{build_vocab, encode, load_jsonl, sample_few_shot, FewShotSplit, LabeledExample, TokenSequence, Vocabulary};
use crate::training::{fine_tune, post_train, Objective};

// Stream labels under a run seed.
const STREAM_INIT: u64 = 1;
const STREAM_POST: u64 = 2;
const STREAM_HEAD: u64 = 3;
const STREAM_FINE_TUNE: u64 = 4;
// Stream labels under the config seed.
const STREAM_TASK: u64 = 10;
const STREAM_SPLIT: u64 = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub subset: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub task: String,
    pub method: String,
    pub subset_size: usize,
    pub records: Vec<RunRecord>,
    pub mean: f64,
    pub std: f64,
    pub std_kind: String,
    pub config_fingerprint: String,
    pub timestamp: String,
    /// Subsets (by index) lacking at least one class; kept, not resampled.
    pub missing_class_subsets: Vec<usize>,
    /// The fully resolved configuration that produced this report.
    pub config: RunConfig,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// A task ready for the protocol: vocabulary, pools and label names.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub name: String,
    pub vocab: Vocabulary,
    pub label_names: Vec<String>,
    pub train_pool: Vec<LabeledExample>,
    pub eval_pool: Vec<LabeledExample>,
    pub unlabeled: Vec<String>,
}

/// Reads `text_a` (and `text_b` when present) of every JSON line; labels are
/// ignored.
pub fn load_unlabeled(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let data_err = |message: String| Error::Data {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| data_err(e.to_string()))?;
        let a = v
            .get("text_a")
            .and_then(|x| x.as_str())
            .ok_or_else(|| data_err("missing string field text_a".into()))?;
        match v.get("text_b").and_then(|x| x.as_str()) {
            Some(b) => out.push(format!("{a} {b}")),
            None => out.push(a.to_string()),
        }
    }
    Ok(out)
}

impl TaskData {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        if cfg.task == "jsonl" {
            let train_path = cfg.train_data.as_deref().ok_or_else(|| Error::Config("train_data is required".into()))?;
            let eval_path = cfg.eval_data.as_deref().ok_or_else(|| Error::Config("eval_data is required".into()))?;
            let train = load_jsonl(train_path, &[])?;
            let eval = load_jsonl(eval_path, &train.label_names)?;
            let unlabeled = match &cfg.unlabeled_data {
                Some(p) => load_unlabeled(p)?,
                None => Vec::new(),
            };
            let mut corpus = train.texts();
            corpus.extend(unlabeled.iter().cloned());
            let vocab = build_vocab(&corpus, cfg.max_vocab)?;
            Ok(Self {
                name: train_path.display().to_string(),
                vocab,
                label_names: eval.label_names,
                train_pool: train.examples,
                eval_pool: eval.examples,
                unlabeled,
            })
        } else {
            let kind: TaskKind = cfg.task.parse()?;
            let sizes = TaskSizes {
                train_pool: cfg.pool_size,
                eval_pool: cfg.eval_pool_size,
                unlabeled: cfg.unlabeled_pool_size,
                words: cfg.synth_vocab,
            };
            let t = make_synthetic_task(kind, sizes, derive_seed(cfg.seed, &[STREAM_TASK]))?;
            Ok(Self {
                name: cfg.task.clone(),
                vocab: t.vocab,
                label_names: t.label_names,
                train_pool: t.train_pool,
                eval_pool: t.eval_pool,
                unlabeled: t.unlabeled,
            })
        }
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }
}

fn encode_all(examples: &[LabeledExample], vocab: &Vocabulary, max_len: usize) -> Result<Vec<(TokenSequence, usize)>> {
    examples
        .iter()
        .map(|e| Ok((encode(e, vocab, max_len)?, e.label)))
        .collect()
}

fn encode_texts(texts: &[String], vocab: &Vocabulary, max_len: usize) -> Result<Vec<TokenSequence>> {
    texts
        .iter()
        .map(|t| {
            let e = LabeledExample {
                text_a: t.clone(),
                text_b: None,
                label: 0,
            };
            encode(&e, vocab, max_len)
        })
        .collect()
}

/// One (subset, seed) run: optional post-training, fine-tuning on the
/// subset, then the test metric.
#[allow(clippy::too_many_arguments)]
fn single_run(
    cfg: &RunConfig,
    task: &TaskData,
    subset: &[(TokenSequence, usize)],
    subset_index: usize,
    unlabeled: &[TokenSequence],
    dev: &[(TokenSequence, usize)],
    test: &[(TokenSequence, usize)],
    seed: u64,
    exec: Execution,
) -> Result<f64> {
    let enc = cfg.encoder_config(task.vocab.len());
    let mut params = EncoderParams::<f32>::init(&enc, &mut derive(seed, &[STREAM_INIT]))?;
    let sub = subset_index as u64;
    if cfg.method != Objective::None {
        let own: Vec<TokenSequence>;
        let corpus = if cfg.unlabeled_count.is_some() {
            unlabeled
        } else {
            own = subset.iter().map(|(s, _)| s.clone()).collect();
            &own
        };
        post_train(
            &mut params,
            corpus,
            &cfg.train_config(seed),
            &mut derive(seed, &[STREAM_POST, sub]),
        )?;
    }
    params.set_classifier(task.num_classes(), &mut derive(seed, &[STREAM_HEAD, sub]))?;
    let out = fine_tune(
        &params,
        subset,
        dev,
        &cfg.fine_tune_config(),
        &mut derive(seed, &[STREAM_FINE_TUNE, sub]),
        exec,
    )?;
    let ids: Vec<Vec<u32>> = test.iter().map(|(s, _)| s.ids().to_vec()).collect();
    let gold: Vec<usize> = test.iter().map(|(_, y)| *y).collect();
    let preds = out.params.predict(&ids, exec)?;
    cfg.metric.compute(&preds, &gold)
}

/// Runs every (subset, seed) pair, post-training with `cfg.method` unless it
/// is `ft`, and aggregates the test metric. Runs execute on `cfg.jobs`
/// threads; records are always in (subset, seed) order. Any failed run fails
/// the whole report.
pub fn run_protocol(cfg: &RunConfig, timestamp: &str) -> Result<ExperimentReport> {
    let cfg = cfg.clone().resolve()?;
    let task = TaskData::from_config(&cfg)?;
    let split: FewShotSplit = sample_few_shot(
        &task.train_pool,
        &task.eval_pool,
        task.num_classes(),
        cfg.subset_size,
        cfg.num_subsets,
        cfg.dev_size,
        &mut derive(cfg.seed, &[STREAM_SPLIT]),
    )?;
    let dev = encode_all(&split.dev, &task.vocab, cfg.max_len)?;
    let test = encode_all(&split.test, &task.vocab, cfg.max_len)?;
    let subsets = split
        .subsets
        .iter()
        .map(|s| encode_all(s, &task.vocab, cfg.max_len))
        .collect::<Result<Vec<_>>>()?;
    let unlabeled = match cfg.unlabeled_count {
        Some(n) if n > task.unlabeled.len() => {
            return Err(Error::Config(format!(
                "unlabeled_count {n} exceeds the unlabeled pool of {}",
                task.unlabeled.len()
            )))
        }
        Some(n) => encode_texts(&task.unlabeled[..n], &task.vocab, cfg.max_len)?,
        None => Vec::new(),
    };

    let pairs: Vec<(usize, u64)> = (0..cfg.num_subsets)
        .flat_map(|i| cfg.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let values = Execution::with_jobs(cfg.jobs, |exec| {
        exec.map_slice(&pairs, |&(i, s)| {
            single_run(&cfg, &task, &subsets[i], i, &unlabeled, &dev, &test, s, exec)
        })
    });
    let mut records = Vec::with_capacity(pairs.len());
    for (&(subset, seed), v) in pairs.iter().zip(values) {
        records.push(RunRecord {
            seed,
            subset,
            metric: cfg.metric.name().to_string(),
            value: v?,
        });
    }
    let (mean, std) = mean_std(&records.iter().map(|r| r.value).collect::<Vec<_>>());
    Ok(ExperimentReport {
        task: task.name.clone(),
        method: cfg.method.to_string(),
        subset_size: cfg.subset_size,
        records,
        mean,
        std,
        std_kind: "population".into(),
        config_fingerprint: cfg.fingerprint(),
        timestamp: timestamp.to_string(),
        missing_class_subsets: split
            .missing_classes
            .iter()
            .enumerate()
            .filter(|(_, m)| !m.is_empty())
            .map(|(i, _)| i)
            .collect(),
        config: cfg,
    })
}
