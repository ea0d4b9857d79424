//! View-pair augmenters for the sequence-level contrastive baseline.

use rand::Rng;

use super::{crm, drm, eda_augment, MaskedSequence, SynonymTable};
use crate::error::{Error, Result};
use crate::text::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augmenter {
    /// `(DRM view, CRM view)` with disjoint selections.
    CrmPair,
    /// Two independent DRM views.
    DrmPair,
    /// Two independent EDA views.
    EdaPair,
    /// The sequence twice.
    Identity,
}

pub const AUGMENTER_NAMES: [&str; 4] = ["crm-pair", "drm-pair", "eda-pair", "identity"];

pub fn augmenter_for(name: &str) -> Result<Augmenter> {
    match name {
        "crm-pair" => Ok(Augmenter::CrmPair),
        "drm-pair" => Ok(Augmenter::DrmPair),
        "eda-pair" => Ok(Augmenter::EdaPair),
        "identity" => Ok(Augmenter::Identity),
        "back-translation" | "back" | "back-m" => Err(Error::Unsupported(format!(
            "augmenter {name:?} needs an external translation system"
        ))),
        other => Err(Error::invalid(format!(
            "unknown augmenter {other:?}; expected one of {AUGMENTER_NAMES:?}"
        ))),
    }
}

#[derive(Debug, Clone, Default)]
pub struct AugmentParams {
    pub p_m: f64,
    pub p_c: f64,
    pub eda_rate: f64,
    pub vocab_size: usize,
    pub synonyms: SynonymTable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewPair {
    pub first: MaskedSequence,
    pub second: MaskedSequence,
}

impl Augmenter {
    pub fn name(self) -> &'static str {
        match self {
            Augmenter::CrmPair => "crm-pair",
            Augmenter::DrmPair => "drm-pair",
            Augmenter::EdaPair => "eda-pair",
            Augmenter::Identity => "identity",
        }
    }

    pub fn views<R: Rng + ?Sized>(
        self,
        seq: &TokenSequence,
        params: &AugmentParams,
        rng: &mut R,
    ) -> Result<ViewPair> {
        let v = params.vocab_size;
        let (first, second) = match self {
            Augmenter::CrmPair => {
                let a = drm(seq, params.p_m, v, rng)?;
                let b = crm(seq, &a.pattern, params.p_c, v, rng)?;
                (a, b)
            }
            Augmenter::DrmPair => (drm(seq, params.p_m, v, rng)?, drm(seq, params.p_m, v, rng)?),
            Augmenter::EdaPair => {
                let a = eda_augment(seq, params.eda_rate, &params.synonyms, rng);
                let b = eda_augment(seq, params.eda_rate, &params.synonyms, rng);
                (MaskedSequence::unmasked(&a), MaskedSequence::unmasked(&b))
            }
            Augmenter::Identity => (MaskedSequence::unmasked(seq), MaskedSequence::unmasked(seq)),
        };
        Ok(ViewPair { first, second })
    }
}
