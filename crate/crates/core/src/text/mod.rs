//! Tokenization, vocabulary, dataset ingestion and few-shot sampling.

mod dataset;
mod sequence;
mod vocab;

pub use dataset::{load_jsonl, parse_jsonl, sample_few_shot, Dataset, FewShotSplit, LabeledExample};
pub use sequence::{encode, TokenSequence};
pub use vocab::{build_vocab, tokenize, TokenId, Vocabulary};

/// Sequence start (the `<s>` of RoBERTa-style inputs).
pub const BOS: TokenId = 0;
/// Segment separator.
pub const SEP: TokenId = 1;
pub const MASK: TokenId = 2;
pub const PAD: TokenId = 3;
pub const UNK: TokenId = 4;
/// Number of reserved ids; ordinary tokens start here.
pub const NUM_SPECIAL: usize = 5;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["<s>", "</s>", "<mask>", "<pad>", "<unk>"];

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_SPECIAL
}
