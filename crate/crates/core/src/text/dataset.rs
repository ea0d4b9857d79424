use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: usize,
}

/// Labeled examples plus the label vocabulary (class id = index).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
    pub label_names: Vec<String>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// All raw texts (both segments), e.g. for vocabulary building.
    pub fn texts(&self) -> Vec<String> {
        self.examples
            .iter()
            .flat_map(|e| std::iter::once(e.text_a.clone()).chain(e.text_b.clone()))
            .collect()
    }
}

fn label_key(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) if n.is_i64() || n.is_u64() => Some(n.to_string()),
        _ => None,
    }
}

/// Parses JSON-lines text. Labels are appended to `known_labels` in
/// first-seen order; pass the training label list when parsing dev/test data
/// so ids line up.
pub fn parse_jsonl(text: &str, source: &Path, known_labels: &[String]) -> Result<Dataset> {
    let mut label_names = known_labels.to_vec();
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Data {
            path: source.to_path_buf(),
            line: line_no,
            message,
        };
        let obj: Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let obj = obj
            .as_object()
            .ok_or_else(|| err("expected a JSON object".into()))?;
        let text_a = obj
            .get("text_a")
            .and_then(Value::as_str)
            .ok_or_else(|| err("missing string field `text_a`".into()))?
            .to_string();
        let text_b = match obj.get("text_b") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(err("`text_b` must be a string".into())),
        };
        let key = obj
            .get("label")
            .and_then(label_key)
            .ok_or_else(|| err("missing string or integer field `label`".into()))?;
        let label = match label_names.iter().position(|l| *l == key) {
            Some(p) => p,
            None => {
                label_names.push(key);
                label_names.len() - 1
            }
        };
        examples.push(LabeledExample {
            text_a,
            text_b,
            label,
        });
    }
    Ok(Dataset {
        examples,
        label_names,
    })
}

pub fn load_jsonl(path: &Path, known_labels: &[String]) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, path, known_labels)
}

/// Few-shot training subsets sharing one dev and one test set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotSplit {
    pub subsets: Vec<Vec<LabeledExample>>,
    pub dev: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub subset_size: usize,
    pub subset_count: usize,
    /// Per subset, the classes that never occur in it. Such subsets are kept
    /// (not resampled) and surfaced in reports.
    pub missing_classes: Vec<Vec<usize>>,
}

/// Draws `num_subsets` training sets of `size` examples with replacement from
/// `train_pool`, and a dev set of `dev_size` examples (or the whole pool if
/// smaller) without replacement from `eval_pool`; the rest of `eval_pool` is
/// the test set.
pub fn sample_few_shot<R: Rng + ?Sized>(
    train_pool: &[LabeledExample],
    eval_pool: &[LabeledExample],
    num_classes: usize,
    size: usize,
    num_subsets: usize,
    dev_size: usize,
    rng: &mut R,
) -> Result<FewShotSplit> {
    if size == 0 {
        return Err(Error::invalid("few-shot subset size must be positive"));
    }
    if num_subsets == 0 {
        return Err(Error::invalid("subset count must be positive"));
    }
    if train_pool.len() < size {
        return Err(Error::invalid(format!(
            "training pool has {} examples, fewer than subset size {size}",
            train_pool.len()
        )));
    }
    let subsets: Vec<Vec<LabeledExample>> = (0..num_subsets)
        .map(|_| {
            (0..size)
                .map(|_| train_pool[rng.gen_range(0..train_pool.len())].clone())
                .collect()
        })
        .collect();

    let dev_n = dev_size.min(eval_pool.len());
    let mut in_dev = vec![false; eval_pool.len()];
    let dev_idx = index::sample(rng, eval_pool.len(), dev_n).into_vec();
    for &i in &dev_idx {
        in_dev[i] = true;
    }
    let dev: Vec<LabeledExample> = dev_idx.iter().map(|&i| eval_pool[i].clone()).collect();
    let test: Vec<LabeledExample> = eval_pool
        .iter()
        .zip(&in_dev)
        .filter(|(_, &d)| !d)
        .map(|(e, _)| e.clone())
        .collect();
    if test.is_empty() {
        return Err(Error::Empty(format!(
            "test set: evaluation pool of {} is exhausted by a dev set of {dev_size}",
            eval_pool.len()
        )));
    }
    let missing_classes = subsets
        .iter()
        .map(|s| {
            (0..num_classes)
                .filter(|c| !s.iter().any(|e| e.label == *c))
                .collect()
        })
        .collect();
    Ok(FewShotSplit {
        subsets,
        dev,
        test,
        subset_size: size,
        subset_count: num_subsets,
        missing_classes,
    })
}
