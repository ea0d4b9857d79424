use serde::{Deserialize, Serialize};

use super::{tokenize, LabeledExample, TokenId, Vocabulary, BOS, PAD, SEP};
use crate::error::{Error, Result};

/// `[BOS, a…, (SEP, b…)?, PAD…]` with a per-position maskable flag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    maskable: Vec<bool>,
}

impl TokenSequence {
    /// Lays out one or two id segments and pads to `len`. The caller
    /// guarantees the layout fits.
    pub fn from_segments(a: &[TokenId], b: Option<&[TokenId]>, len: usize) -> Result<Self> {
        let needed = 1 + a.len() + b.map_or(0, |b| 1 + b.len());
        if needed > len {
            return Err(Error::invalid(format!(
                "segments need {needed} positions but length is {len}"
            )));
        }
        let mut ids = Vec::with_capacity(len);
        let mut maskable = Vec::with_capacity(len);
        ids.push(BOS);
        maskable.push(false);
        ids.extend_from_slice(a);
        maskable.extend(std::iter::repeat_n(true, a.len()));
        if let Some(b) = b {
            ids.push(SEP);
            maskable.push(false);
            ids.extend_from_slice(b);
            maskable.extend(std::iter::repeat_n(true, b.len()));
        }
        ids.resize(len, PAD);
        maskable.resize(len, false);
        Ok(Self { ids, maskable })
    }

    /// Builds a sequence from raw ids; maskable flags are derived from the
    /// special ids. Used for decoding stored or hand-written sequences.
    pub fn from_ids(ids: Vec<TokenId>) -> Result<Self> {
        if ids.first() != Some(&BOS) {
            return Err(Error::invalid("sequence must start with BOS"));
        }
        if ids.iter().filter(|&&t| t == SEP).count() > 1 {
            return Err(Error::invalid("at most one SEP allowed"));
        }
        if let Some(first_pad) = ids.iter().position(|&t| t == PAD) {
            if ids[first_pad..].iter().any(|&t| t != PAD) {
                return Err(Error::invalid("PAD must form a contiguous suffix"));
            }
        }
        let maskable = ids.iter().map(|&t| t != BOS && t != SEP && t != PAD).collect();
        Ok(Self { ids, maskable })
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn maskable(&self) -> &[bool] {
        &self.maskable
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Length without the PAD suffix.
    pub fn content_len(&self) -> usize {
        self.ids.iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1)
    }

    pub fn num_maskable(&self) -> usize {
        self.maskable.iter().filter(|&&m| m).count()
    }

    /// The two content segments (the second is `None` without a SEP).
    pub fn segments(&self) -> (Vec<TokenId>, Option<Vec<TokenId>>) {
        let content = &self.ids[1..self.content_len().max(1)];
        match content.iter().position(|&t| t == SEP) {
            Some(p) => (content[..p].to_vec(), Some(content[p + 1..].to_vec())),
            None => (content.to_vec(), None),
        }
    }
}

fn truncate_pair(a: &mut Vec<TokenId>, b: &mut Option<Vec<TokenId>>, budget: usize) {
    loop {
        let bl = b.as_ref().map_or(0, Vec::len);
        if a.len() + bl <= budget {
            return;
        }
        match b {
            Some(b) if b.len() >= a.len() => {
                b.pop();
            }
            _ => {
                a.pop();
            }
        }
    }
}

/// Encodes an example as `[BOS, a…, (SEP, b…)?, PAD…]` of exactly `max_len`
/// positions. Out-of-vocabulary words become UNK; when too long, tail tokens
/// of the longer segment are dropped first (the second segment on ties).
pub fn encode(example: &LabeledExample, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    if max_len < 3 {
        return Err(Error::invalid(format!("max_len must be at least 3, got {max_len}")));
    }
    let mut a: Vec<TokenId> = tokenize(&example.text_a).map(|t| vocab.id(&t)).collect();
    let mut b: Option<Vec<TokenId>> = example
        .text_b
        .as_ref()
        .map(|t| tokenize(t).map(|t| vocab.id(&t)).collect());
    let budget = max_len - 1 - usize::from(b.is_some());
    truncate_pair(&mut a, &mut b, budget);
    TokenSequence::from_segments(&a, b.as_deref(), max_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{build_vocab, UNK};
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        build_vocab(&["a b c d e"], 20).unwrap()
    }

    fn ex(a: &str, b: Option<&str>) -> LabeledExample {
        LabeledExample {
            text_a: a.into(),
            text_b: b.map(Into::into),
            label: 0,
        }
    }

    #[test]
    fn single_segment_layout() {
        let v = vocab();
        let s = encode(&ex("a b", None), &v, 5).unwrap();
        assert_eq!(s.ids(), &[BOS, v.id("a"), v.id("b"), PAD, PAD]);
        assert_eq!(s.maskable(), &[false, true, true, false, false]);
        assert_eq!(s.content_len(), 3);
    }

    #[test]
    fn two_segment_layout_and_unk() {
        let v = vocab();
        let s = encode(&ex("a", Some("b zebra")), &v, 8).unwrap();
        assert_eq!(&s.ids()[..5], &[BOS, v.id("a"), SEP, v.id("b"), UNK]);
        assert!(!s.maskable()[2]);
        assert_eq!(s.segments(), (vec![v.id("a")], Some(vec![v.id("b"), UNK])));
    }

    #[test]
    fn truncation_drops_longer_segment_first() {
        let v = vocab();
        let s = encode(&ex("a", Some("b c d e")), &v, 5).unwrap();
        assert_eq!(s.ids(), &[BOS, v.id("a"), SEP, v.id("b"), v.id("c")]);
        let s = encode(&ex("a b c d", None), &v, 3).unwrap();
        assert_eq!(s.ids(), &[BOS, v.id("a"), v.id("b")]);
        assert!(encode(&ex("a", None), &v, 2).is_err());
    }

    #[test]
    fn from_ids_validates_structure() {
        assert!(TokenSequence::from_ids(vec![BOS, 5, PAD, 6]).is_err());
        assert!(TokenSequence::from_ids(vec![5, BOS]).is_err());
        assert!(TokenSequence::from_ids(vec![BOS, SEP, 5, SEP]).is_err());
        let s = TokenSequence::from_ids(vec![BOS, 5, SEP, 6, PAD]).unwrap();
        assert_eq!(s.maskable(), &[false, true, false, true, false]);
    }

    proptest! {
        #[test]
        fn decode_of_content_reproduces_in_vocab_tokens(
            words in proptest::collection::vec(0usize..5, 0..10),
            extra in proptest::collection::vec(0usize..5, 0..10),
        ) {
            let names = ["a", "b", "c", "d", "e"];
            let v = vocab();
            let a: Vec<&str> = words.iter().map(|&i| names[i]).collect();
            let b: Vec<&str> = extra.iter().map(|&i| names[i]).collect();
            let e = ex(&a.join(" "), Some(&b.join(" ")));
            let s = encode(&e, &v, 32).unwrap();
            prop_assert_eq!(s.ids()[0], BOS);
            prop_assert_eq!(s.ids().iter().filter(|&&t| t == SEP).count(), 1);
            let (sa, sb) = s.segments();
            prop_assert_eq!(v.decode(&sa), a);
            prop_assert_eq!(v.decode(&sb.unwrap()), b);
        }
    }
}
