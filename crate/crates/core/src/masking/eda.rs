//! Easy data augmentation on token ids: random deletion, random swap, random
//! insertion and synonym substitution. Special positions are never touched
//! and the sequence keeps its length (deleted slots become PAD, insertions
//! consume PAD slots).

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng;

use crate::text::{is_special, TokenId, TokenSequence};

/// Synonym candidates per token id. Defaults to empty, which makes synonym
/// substitution a no-op.
pub type SynonymTable = HashMap<TokenId, Vec<TokenId>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdaOp {
    Delete,
    Swap,
    Insert,
    Synonym,
}

impl EdaOp {
    pub const ALL: [EdaOp; 4] = [EdaOp::Delete, EdaOp::Swap, EdaOp::Insert, EdaOp::Synonym];
}

/// Applies one uniformly chosen EDA operation to `⌈rate · N_maskable⌉`
/// positions.
pub fn eda_augment<R: Rng + ?Sized>(
    seq: &TokenSequence,
    rate: f64,
    synonyms: &SynonymTable,
    rng: &mut R,
) -> TokenSequence {
    let maskable = seq.num_maskable();
    let count = (rate.clamp(0.0, 1.0) * maskable as f64).ceil() as usize;
    if count == 0 || maskable == 0 {
        return seq.clone();
    }
    let op = EdaOp::ALL[rng.gen_range(0..EdaOp::ALL.len())];
    apply_op(seq, op, count, synonyms, rng)
}

/// Applies a specific EDA operation `count` times (or to `count` positions).
pub fn apply_op<R: Rng + ?Sized>(
    seq: &TokenSequence,
    op: EdaOp,
    count: usize,
    synonyms: &SynonymTable,
    rng: &mut R,
) -> TokenSequence {
    let positions: Vec<usize> = (0..seq.len()).filter(|&i| seq.maskable()[i]).collect();
    if positions.is_empty() {
        return seq.clone();
    }
    match op {
        EdaOp::Delete => {
            // Always keep at least one content token.
            let n = count.min(positions.len() - 1);
            if n == 0 {
                return seq.clone();
            }
            let mut drop = vec![false; seq.len()];
            for i in index::sample(rng, positions.len(), n) {
                drop[positions[i]] = true;
            }
            relayout(seq, |pos, _| !drop[pos])
        }
        EdaOp::Swap => {
            if positions.len() < 2 {
                return seq.clone();
            }
            let mut ids = seq.ids().to_vec();
            for _ in 0..count {
                let pair = index::sample(rng, positions.len(), 2);
                ids.swap(positions[pair.index(0)], positions[pair.index(1)]);
            }
            rebuild(seq, ids)
        }
        EdaOp::Insert => {
            let (mut a, mut b) = seq.segments();
            let len = seq.len();
            for _ in 0..count {
                let used = 1 + a.len() + b.as_ref().map_or(0, |b| 1 + b.len());
                if used >= len {
                    break;
                }
                let tok = seq.ids()[positions[rng.gen_range(0..positions.len())]];
                let target = match b.as_mut() {
                    Some(b) if rng.gen_bool(0.5) => b,
                    _ => &mut a,
                };
                let at = rng.gen_range(0..=target.len());
                target.insert(at, tok);
            }
            TokenSequence::from_segments(&a, b.as_deref(), len).unwrap_or_else(|_| seq.clone())
        }
        EdaOp::Synonym => {
            if synonyms.is_empty() {
                return seq.clone();
            }
            let mut ids = seq.ids().to_vec();
            let n = count.min(positions.len());
            for i in index::sample(rng, positions.len(), n) {
                let pos = positions[i];
                let candidates: Vec<TokenId> = synonyms
                    .get(&ids[pos])
                    .map(|c| c.iter().copied().filter(|&t| !is_special(t)).collect())
                    .unwrap_or_default();
                if !candidates.is_empty() {
                    ids[pos] = candidates[rng.gen_range(0..candidates.len())];
                }
            }
            rebuild(seq, ids)
        }
    }
}

fn rebuild(seq: &TokenSequence, ids: Vec<TokenId>) -> TokenSequence {
    TokenSequence::from_ids(ids).unwrap_or_else(|_| seq.clone())
}

fn relayout(seq: &TokenSequence, keep: impl Fn(usize, TokenId) -> bool) -> TokenSequence {
    let content = seq.content_len();
    let sep = seq.ids()[..content]
        .iter()
        .position(|&t| t == crate::text::SEP);
    let collect = |range: std::ops::Range<usize>| -> Vec<TokenId> {
        range
            .filter(|&p| keep(p, seq.ids()[p]))
            .map(|p| seq.ids()[p])
            .collect()
    };
    let (a, b) = match sep {
        Some(s) => (collect(1..s), Some(collect(s + 1..content))),
        None => (collect(1..content), None),
    };
    TokenSequence::from_segments(&a, b.as_deref(), seq.len()).unwrap_or_else(|_| seq.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::text::{BOS, PAD, SEP};
    use proptest::prelude::*;

    fn sorted_content(s: &TokenSequence) -> Vec<TokenId> {
        let mut v: Vec<TokenId> = s
            .ids()
            .iter()
            .zip(s.maskable())
            .filter_map(|(&t, &m)| m.then_some(t))
            .collect();
        v.sort();
        v
    }

    #[test]
    fn rate_zero_is_identity() {
        let s = TokenSequence::from_segments(&[5, 6, 7], None, 6).unwrap();
        assert_eq!(eda_augment(&s, 0.0, &SynonymTable::new(), &mut seeded(1)), s);
    }

    #[test]
    fn deletion_repairs_layout() {
        let s = TokenSequence::from_ids(vec![BOS, 5, 6]).unwrap();
        let mut seen = std::collections::HashSet::new();
        for seed in 0..20 {
            let out = apply_op(&s, EdaOp::Delete, 1, &SynonymTable::new(), &mut seeded(seed));
            seen.insert(out.ids().to_vec());
        }
        assert!(seen.contains(&vec![BOS, 6, PAD]));
        assert!(seen.contains(&vec![BOS, 5, PAD]));
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn deletion_respects_segments() {
        let s = TokenSequence::from_segments(&[5, 6], Some(&[7, 8]), 7).unwrap();
        let out = apply_op(&s, EdaOp::Delete, 3, &SynonymTable::new(), &mut seeded(2));
        assert_eq!(out.len(), 7);
        assert_eq!(out.ids()[0], BOS);
        assert_eq!(out.ids().iter().filter(|&&t| t == SEP).count(), 1);
        assert_eq!(out.num_maskable(), 1);
    }

    #[test]
    fn insertion_uses_existing_tokens_and_pad_room() {
        let s = TokenSequence::from_segments(&[5, 6], None, 5).unwrap();
        let out = apply_op(&s, EdaOp::Insert, 5, &SynonymTable::new(), &mut seeded(3));
        assert_eq!(out.content_len(), 5);
        assert!(out.ids()[1..].iter().all(|&t| t == 5 || t == 6));
        let full = TokenSequence::from_segments(&[5, 6], None, 3).unwrap();
        assert_eq!(apply_op(&full, EdaOp::Insert, 2, &SynonymTable::new(), &mut seeded(3)), full);
    }

    #[test]
    fn synonym_substitution() {
        let s = TokenSequence::from_segments(&[5, 6], None, 4).unwrap();
        assert_eq!(apply_op(&s, EdaOp::Synonym, 2, &SynonymTable::new(), &mut seeded(0)), s);
        let table: SynonymTable = [(5, vec![9]), (6, vec![1, 10])].into_iter().collect();
        let out = apply_op(&s, EdaOp::Synonym, 2, &table, &mut seeded(0));
        assert_eq!(out.ids(), &[BOS, 9, 10, PAD]);
    }

    #[test]
    fn degenerate_sequence_unchanged() {
        let s = TokenSequence::from_ids(vec![BOS, PAD, PAD]).unwrap();
        for op in EdaOp::ALL {
            assert_eq!(apply_op(&s, op, 3, &SynonymTable::new(), &mut seeded(0)), s);
        }
    }

    proptest! {
        #[test]
        fn swap_preserves_multiset(seed in any::<u64>(), n in 1usize..6) {
            let s = TokenSequence::from_segments(&[5, 6, 7, 8], Some(&[9, 10]), 10).unwrap();
            let out = apply_op(&s, EdaOp::Swap, n, &SynonymTable::new(), &mut seeded(seed));
            prop_assert_eq!(sorted_content(&out), sorted_content(&s));
            prop_assert_eq!(out.maskable(), s.maskable());
        }

        #[test]
        fn specials_untouched_by_any_op(seed in any::<u64>(), rate in 0.0f64..1.0) {
            let s = TokenSequence::from_segments(&[5, 6, 7], Some(&[8, 9]), 10).unwrap();
            let table: SynonymTable = [(5, vec![11]), (8, vec![12])].into_iter().collect();
            let out = eda_augment(&s, rate, &table, &mut seeded(seed));
            prop_assert_eq!(out.len(), s.len());
            prop_assert_eq!(out.ids()[0], BOS);
            prop_assert_eq!(out.ids().iter().filter(|&&t| t == SEP).count(), 1);
            prop_assert!(TokenSequence::from_ids(out.ids().to_vec()).is_ok());
        }
    }
}
