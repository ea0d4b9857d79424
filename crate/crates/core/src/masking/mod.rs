//! Dynamic random masking (DRM), complementary random masking (CRM) and the
//! 80/10/10 replacement rule.
//!
//! Selection happens first, position by position in index order, then the
//! replacement actions are drawn for the selected positions in index order,
//! all from the one rng passed to the call.

mod augment;
mod eda;

pub use augment::{augmenter_for, AugmentParams, Augmenter, ViewPair};
pub use eda::{eda_augment, EdaOp, SynonymTable};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{TokenId, TokenSequence, MASK, NUM_SPECIAL};

pub const MASK_PROB: f64 = 0.8;
pub const KEEP_PROB: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskAction {
    Mask,
    Keep,
    Random,
}

/// A drawn replacement for one selected position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Replacement {
    pub position: usize,
    pub action: MaskAction,
    /// The id written into the corrupted sequence.
    pub token: TokenId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPattern {
    pub selected: Vec<bool>,
    /// `Some` exactly at selected positions.
    pub actions: Vec<Option<MaskAction>>,
}

impl MaskPattern {
    pub fn num_selected(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    pub fn selected_positions(&self) -> Vec<usize> {
        self.selected
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSequence {
    pub corrupted: Vec<TokenId>,
    pub pattern: MaskPattern,
    /// Original id at selected positions, `None` elsewhere.
    pub labels: Vec<Option<TokenId>>,
}

impl MaskedSequence {
    /// A view with nothing selected.
    pub fn unmasked(seq: &TokenSequence) -> Self {
        let n = seq.len();
        Self {
            corrupted: seq.ids().to_vec(),
            pattern: MaskPattern {
                selected: vec![false; n],
                actions: vec![None; n],
            },
            labels: vec![None; n],
        }
    }

    pub fn len(&self) -> usize {
        self.corrupted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corrupted.is_empty()
    }

    fn assemble(seq: &TokenSequence, selected: Vec<bool>, replacements: &[Replacement]) -> Self {
        let n = seq.len();
        let mut corrupted = seq.ids().to_vec();
        let mut actions = vec![None; n];
        let mut labels = vec![None; n];
        for r in replacements {
            corrupted[r.position] = r.token;
            actions[r.position] = Some(r.action);
            labels[r.position] = Some(seq.ids()[r.position]);
        }
        Self {
            corrupted,
            pattern: MaskPattern { selected, actions },
            labels,
        }
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("{name} must lie in [0, 1], got {p}")));
    }
    Ok(())
}

fn check_vocab(vocab_size: usize) -> Result<()> {
    if vocab_size <= NUM_SPECIAL {
        return Err(Error::invalid(format!(
            "vocabulary of size {vocab_size} has no non-special tokens for random replacement"
        )));
    }
    Ok(())
}

/// Draws an action for every selected position: MASK with probability 0.8,
/// KEEP with 0.1, RANDOM (uniform over non-special ids) with 0.1.
pub fn apply_replacement<R: Rng + ?Sized>(
    source: &[TokenId],
    selected: &[bool],
    vocab_size: usize,
    rng: &mut R,
) -> Result<Vec<Replacement>> {
    check_vocab(vocab_size)?;
    if source.len() != selected.len() {
        return Err(Error::ShapeMismatch {
            op: "apply_replacement",
            lhs: vec![source.len()],
            rhs: vec![selected.len()],
        });
    }
    let mut out = Vec::new();
    for (position, _) in selected.iter().enumerate().filter(|(_, &s)| s) {
        let u: f64 = rng.gen();
        let (action, token) = if u < MASK_PROB {
            (MaskAction::Mask, MASK)
        } else if u < MASK_PROB + KEEP_PROB {
            (MaskAction::Keep, source[position])
        } else {
            let id = rng.gen_range(NUM_SPECIAL..vocab_size) as TokenId;
            (MaskAction::Random, id)
        };
        out.push(Replacement {
            position,
            action,
            token,
        });
    }
    Ok(out)
}

/// Dynamic random masking: each maskable position is selected independently
/// with probability `p_m`.
pub fn drm<R: Rng + ?Sized>(
    seq: &TokenSequence,
    p_m: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MaskedSequence> {
    check_prob("p_m", p_m)?;
    let selected: Vec<bool> = seq
        .maskable()
        .iter()
        .map(|&m| m && rng.gen::<f64>() < p_m)
        .collect();
    let replacements = apply_replacement(seq.ids(), &selected, vocab_size, rng)?;
    Ok(MaskedSequence::assemble(seq, selected, &replacements))
}

/// Complementary random masking: a position is selected with probability
/// `p_c` if it is maskable and was not selected in `base`, and never
/// otherwise. KEEP-action positions of `base` count as selected.
pub fn crm<R: Rng + ?Sized>(
    seq: &TokenSequence,
    base: &MaskPattern,
    p_c: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MaskedSequence> {
    check_prob("p_c", p_c)?;
    if base.selected.len() != seq.len() {
        return Err(Error::ShapeMismatch {
            op: "crm",
            lhs: vec![seq.len()],
            rhs: vec![base.selected.len()],
        });
    }
    let selected: Vec<bool> = seq
        .maskable()
        .iter()
        .zip(&base.selected)
        .map(|(&m, &taken)| m && !taken && rng.gen::<f64>() < p_c)
        .collect();
    let replacements = apply_replacement(seq.ids(), &selected, vocab_size, rng)?;
    Ok(MaskedSequence::assemble(seq, selected, &replacements))
}

/// The anchor view `T^0` and its `K` complementary views.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrmBatch {
    pub anchor: MaskedSequence,
    pub views: Vec<MaskedSequence>,
}

/// `T^0 = DRM(T)` followed by `K` independent `CRM(T, T^0)` draws, all from
/// one rng.
pub fn make_crm_batch<R: Rng + ?Sized>(
    seq: &TokenSequence,
    k: usize,
    p_m: f64,
    p_c: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Result<CrmBatch> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let anchor = drm(seq, p_m, vocab_size, rng)?;
    let views = (0..k)
        .map(|_| crm(seq, &anchor.pattern, p_c, vocab_size, rng))
        .collect::<Result<_>>()?;
    Ok(CrmBatch { anchor, views })
}
