//! Generated two-class text tasks standing in for real benchmarks.
//!
//! The word list has three parts: cue words for class 0 (`a0`, `a1`, ...),
//! cue words for class 1 (`b0`, ...) and shared filler words (`n0`, ...).
//! An example of length 8 to 14 draws each word as a cue with probability
//! `cue_rate`, otherwise as filler.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive, Rng as StdRng};
use crate::text::{LabeledExample, Vocabulary, SPECIAL_TOKENS};

const MIN_LEN: usize = 8;
const MAX_LEN: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Each class has its own cue words and cues are frequent, so the first
    /// cue in a sequence gives the label.
    Separable,
    /// Cues are rare and 30% of them come from the other class. The
    /// unlabeled pool shares the vocabulary but favours the other half of
    /// the filler words.
    DomainShift,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separable" => Ok(TaskKind::Separable),
            "domain-shift" => Ok(TaskKind::DomainShift),
            other => Err(Error::invalid(format!(
                "unknown synthetic task {other:?}; expected separable or domain-shift"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSizes {
    pub train_pool: usize,
    pub eval_pool: usize,
    pub unlabeled: usize,
    /// Ordinary words (cues plus filler), at least 12.
    pub words: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub num_classes: usize,
    pub label_names: Vec<String>,
    pub vocab: Vocabulary,
    pub train_pool: Vec<LabeledExample>,
    pub eval_pool: Vec<LabeledExample>,
    /// Texts only.
    pub unlabeled: Vec<String>,
}

struct Generator {
    cues: [Vec<String>; 2],
    filler: Vec<String>,
    cue_rate: f64,
    cross_rate: f64,
    labeled_filler: WeightedIndex<f64>,
    unlabeled_filler: WeightedIndex<f64>,
}

impl Generator {
    fn new(kind: TaskKind, words: usize) -> Self {
        let per_class = words / 6;
        let cues = [
            (0..per_class).map(|i| format!("a{i}")).collect(),
            (0..per_class).map(|i| format!("b{i}")).collect(),
        ];
        let n_fill = words - 2 * per_class;
        let filler: Vec<String> = (0..n_fill).map(|i| format!("n{i}")).collect();
        let half = n_fill / 2;
        let (labeled, unlabeled): (Vec<f64>, Vec<f64>) = match kind {
            TaskKind::Separable => (vec![1.0; n_fill], vec![1.0; n_fill]),
            TaskKind::DomainShift => (0..n_fill)
                .map(|i| if i < half { (3.0, 1.0) } else { (1.0, 3.0) })
                .unzip(),
        };
        let (cue_rate, cross_rate) = match kind {
            TaskKind::Separable => (0.6, 0.0),
            TaskKind::DomainShift => (0.2, 0.3),
        };
        Self {
            cues,
            filler,
            cue_rate,
            cross_rate,
            labeled_filler: WeightedIndex::new(labeled).expect("positive weights"),
            unlabeled_filler: WeightedIndex::new(unlabeled).expect("positive weights"),
        }
    }

    fn text(&self, label: usize, unlabeled: bool, rng: &mut StdRng) -> String {
        let len = rng.gen_range(MIN_LEN..=MAX_LEN);
        let filler = if unlabeled {
            &self.unlabeled_filler
        } else {
            &self.labeled_filler
        };
        (0..len)
            .map(|_| {
                if rng.gen::<f64>() < self.cue_rate {
                    let class = if rng.gen::<f64>() < self.cross_rate { 1 - label } else { label };
                    let set = &self.cues[class];
                    set[rng.gen_range(0..set.len())].as_str()
                } else {
                    self.filler[filler.sample(rng)].as_str()
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn labeled(&self, n: usize, rng: &mut StdRng) -> Vec<LabeledExample> {
        (0..n)
            .map(|_| {
                let label = rng.gen_range(0..2);
                LabeledExample {
                    text_a: self.text(label, false, rng),
                    text_b: None,
                    label,
                }
            })
            .collect()
    }
}

/// Generates a task; each pool uses its own stream derived from `seed`.
pub fn make_synthetic_task(kind: TaskKind, sizes: TaskSizes, seed: u64) -> Result<SyntheticTask> {
    if sizes.words < 12 {
        return Err(Error::invalid(format!("synthetic tasks need at least 12 words, got {}", sizes.words)));
    }
    let g = Generator::new(kind, sizes.words);
    let tokens = SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(g.cues[0].iter().cloned())
        .chain(g.cues[1].iter().cloned())
        .chain(g.filler.iter().cloned())
        .collect();
    let vocab = Vocabulary::from_tokens(tokens)?;
    let train_pool = g.labeled(sizes.train_pool, &mut derive(seed, &[1]));
    let eval_pool = g.labeled(sizes.eval_pool, &mut derive(seed, &[2]));
    let mut r = derive(seed, &[3]);
    let unlabeled = (0..sizes.unlabeled)
        .map(|_| {
            let label = r.gen_range(0..2);
            g.text(label, true, &mut r)
        })
        .collect();
    Ok(SyntheticTask {
        kind,
        num_classes: 2,
        label_names: vec!["0".into(), "1".into()],
        vocab,
        train_pool,
        eval_pool,
        unlabeled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{tokenize, UNK};

    fn sizes() -> TaskSizes {
        TaskSizes {
            train_pool: 300,
            eval_pool: 200,
            unlabeled: 400,
            words: 60,
        }
    }

    /// Labels by the first cue word, as a Bayes-optimal rule for disjoint
    /// cue sets would.
    fn first_cue(text: &str) -> Option<usize> {
        tokenize(text).find_map(|w| match w.as_bytes()[0] {
            b'a' => Some(0),
            b'b' => Some(1),
            _ => None,
        })
    }

    #[test]
    fn separable_by_construction() {
        let t = make_synthetic_task(TaskKind::Separable, sizes(), 4).unwrap();
        let all: Vec<_> = t.train_pool.iter().chain(&t.eval_pool).collect();
        let hits = all.iter().filter(|e| first_cue(&e.text_a) == Some(e.label)).count();
        assert!(hits as f64 / all.len() as f64 >= 0.99);
        assert!(all.iter().all(|e| tokenize(&e.text_a).all(|w| t.vocab.id(&w) != UNK)));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = make_synthetic_task(TaskKind::DomainShift, sizes(), 9).unwrap();
        let b = make_synthetic_task(TaskKind::DomainShift, sizes(), 9).unwrap();
        let c = make_synthetic_task(TaskKind::DomainShift, sizes(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train_pool, c.train_pool);
    }

    #[test]
    fn domain_shift_pool_is_shifted() {
        let t = make_synthetic_task(TaskKind::DomainShift, sizes(), 1).unwrap();
        let share_low = |texts: &mut dyn Iterator<Item = &str>| {
            let (mut low, mut all) = (0usize, 0usize);
            for w in texts.flat_map(tokenize) {
                if let Some(i) = w.strip_prefix('n').and_then(|r| r.parse::<usize>().ok()) {
                    all += 1;
                    low += usize::from(i < 20);
                }
            }
            low as f64 / all as f64
        };
        let lab = share_low(&mut t.train_pool.iter().map(|e| e.text_a.as_str()));
        let unl = share_low(&mut t.unlabeled.iter().map(String::as_str));
        assert!(lab > 0.7 && unl < 0.3, "{lab} {unl}");
        assert_eq!(t.unlabeled.len(), 400);
    }
}
