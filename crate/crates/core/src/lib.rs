//! Contrastive masked language modeling (CMLM) at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`text`]: whitespace vocabulary, sequence encoding, JSON-lines ingestion
//!   and few-shot subset sampling.
//! * [`masking`]: dynamic random masking (DRM), complementary random masking
//!   (CRM), the 80/10/10 replacement rule, EDA and view-pair augmenters.
//! * [`autodiff`]: dense tensors, a reverse-mode tape and a central
//!   finite-difference gradient checker.
//! * [`encoder`]: a small post-layer-norm transformer encoder.
//! * [`objectives`]: MLM, SimCLR, SimSiam, the combined CMLM loss and CSSL.
//! * [`training`]: AdamW, post-training, fine-tuning and checkpoints.
//! * [`experiment`]: metrics, synthetic tasks, the 5 × 3 few-shot protocol
//!   and hyper-parameter sweeps.
//!
//! Data-parallel loops (batch evaluation, Monte Carlo statistics, gradient
//! audits, independent protocol runs) go through [`par::Execution`], which is
//! backed by rayon when the `parallel` feature is enabled.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audit;
pub mod autodiff;
pub mod config;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod masking;
pub mod objectives;
pub mod par;
pub mod rng;
pub mod text;
pub mod training;

pub use error::{Error, Result};
