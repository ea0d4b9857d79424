//! Small post-layer-norm transformer encoder.
//!
//! Row-vector convention throughout: a projection is `x · W + b` with `W`
//! stored `[in × out]`. The MLM output projection is tied to the token
//! embedding. The SimSiam predictor weights `W1`, `W2` are `[d × d]` without
//! biases.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::rng::Rng;
use crate::text::{TokenId, PAD};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    /// Desk-scale default: 2 layers, 4 heads, hidden 64, ffn 256, max_len 64.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            heads: 4,
            hidden: 64,
            ffn: 256,
            vocab_size,
            max_len: 64,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 || self.ffn == 0 {
            return fail("layers, heads, hidden and ffn must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return fail(format!("hidden {} is not divisible by heads {}", self.hidden, self.heads));
        }
        if self.max_len < 3 {
            return fail(format!("max_len must be at least 3, got {}", self.max_len));
        }
        if self.vocab_size <= crate::text::NUM_SPECIAL {
            return fail(format!("vocab_size {} leaves no ordinary tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.layer_norm_eps > 0.0) {
            return fail("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Every parameter name and shape in storage order. The classifier head
    /// is present only when `num_classes` is given.
    pub fn param_shapes(&self, num_classes: Option<usize>) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (self.hidden, self.ffn, self.vocab_size);
        let mut out = vec![
            ("embeddings.token".to_string(), vec![v, d]),
            ("embeddings.position".to_string(), vec![self.max_len, d]),
        ];
        for l in 0..self.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            for proj in ["query", "key", "value", "output"] {
                out.push((p(&format!("attn.{proj}.weight")), vec![d, d]));
                out.push((p(&format!("attn.{proj}.bias")), vec![d]));
            }
            out.push((p("attn_norm.gain"), vec![d]));
            out.push((p("attn_norm.bias"), vec![d]));
            out.push((p("ffn.in.weight"), vec![d, f]));
            out.push((p("ffn.in.bias"), vec![f]));
            out.push((p("ffn.out.weight"), vec![f, d]));
            out.push((p("ffn.out.bias"), vec![d]));
            out.push((p("ffn_norm.gain"), vec![d]));
            out.push((p("ffn_norm.bias"), vec![d]));
        }
        out.push(("mlm.bias".to_string(), vec![v]));
        out.push(("predictor.w1".to_string(), vec![d, d]));
        out.push(("predictor.w2".to_string(), vec![d, d]));
        if let Some(c) = num_classes {
            out.push(("classifier.weight".to_string(), vec![d, c]));
            out.push(("classifier.bias".to_string(), vec![c]));
        }
        out
    }
}

fn init_tensor<T: Real>(name: &str, shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    if name.ends_with(".gain") {
        Tensor::full(shape, T::one())
    } else if name.ends_with("bias") {
        Tensor::zeros(shape)
    } else {
        Tensor::randn(shape, INIT_STD, rng)
    }
}

/// Named learnable tensors of the encoder and its heads.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    config: EncoderConfig,
    num_classes: Option<usize>,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> EncoderParams<T> {
    /// Weights ~ Normal(0, 0.02), biases 0, layer-norm gains 1.
    pub fn init(config: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let named = config
            .param_shapes(None)
            .into_iter()
            .map(|(name, shape)| {
                let t = init_tensor(&name, &shape, rng);
                (name, t)
            })
            .collect();
        Self::from_named(config.clone(), None, named)
    }

    /// Assembles parameters from named tensors, checking every name and shape
    /// against `config`.
    pub fn from_named(
        config: EncoderConfig,
        num_classes: Option<usize>,
        named: Vec<(String, Tensor<T>)>,
    ) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes(num_classes);
        if expected.len() != named.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for ((exp_name, exp_shape), (name, t)) in expected.into_iter().zip(named) {
            if exp_name != name {
                return Err(Error::invalid(format!("expected parameter {exp_name:?}, found {name:?}")));
            }
            if t.shape() != exp_shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "parameter",
                    lhs: exp_shape,
                    rhs: t.shape().to_vec(),
                });
            }
            names.push(name);
            tensors.push(t);
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self {
            config,
            num_classes,
            names,
            tensors,
            index,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Dropout rate used by train-mode forwards.
    pub fn set_dropout(&mut self, rate: f64) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.dropout = rate;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.num_classes
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Adds (or re-initializes) a classification head for `num_classes`.
    pub fn set_classifier(&mut self, num_classes: usize, rng: &mut Rng) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::invalid(format!("classifier needs at least 2 classes, got {num_classes}")));
        }
        let d = self.config.hidden;
        let mut named: Vec<(String, Tensor<T>)> = self
            .names
            .drain(..)
            .zip(self.tensors.drain(..))
            .filter(|(n, _)| !n.starts_with("classifier."))
            .collect();
        named.push(("classifier.weight".into(), Tensor::randn(&[d, num_classes], INIT_STD, rng)));
        named.push(("classifier.bias".into(), Tensor::zeros(&[num_classes])));
        *self = Self::from_named(self.config.clone(), Some(num_classes), named)?;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        EncoderParams {
            config: self.config.clone(),
            num_classes: self.num_classes,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Registers every tensor as a differentiable leaf of `tape`.
    pub fn bind<'a>(&'a self, tape: &mut Tape<T>) -> Bound<'a> {
        self.bind_with(tape, |_| true)
    }

    /// Like [`bind`](Self::bind) but registers tensors rejected by
    /// `trainable` as constants.
    pub fn bind_with<'a>(&'a self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound<'a> {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| {
                if trainable(n) {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound {
            vars,
            index: &self.index,
            config: &self.config,
        }
    }
}

impl<T> EncoderParams<T> {
    /// Binds already-registered vars, one per tensor in storage order. Used
    /// when the caller owns the leaves (e.g. a finite-difference audit).
    pub fn attach(&self, vars: Vec<Var>) -> Result<Bound<'_>> {
        if vars.len() != self.names.len() {
            return Err(Error::invalid(format!(
                "expected {} vars, got {}",
                self.names.len(),
                vars.len()
            )));
        }
        Ok(Bound {
            vars,
            index: &self.index,
            config: &self.config,
        })
    }
}

/// Parameters registered on one tape.
#[derive(Debug)]
pub struct Bound<'a> {
    vars: Vec<Var>,
    index: &'a HashMap<String, usize>,
    config: &'a EncoderConfig,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::invalid(format!("no parameter named {name:?}")))
    }

    /// Vars in parameter storage order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn config(&self) -> &EncoderConfig {
        self.config
    }

    pub fn predictor(&self) -> Result<Predictor> {
        Ok(Predictor {
            w1: self.var("predictor.w1")?,
            w2: self.var("predictor.w2")?,
        })
    }

    pub fn output_projection(&self) -> Result<OutputProjection> {
        Ok(OutputProjection {
            embedding: self.var("embeddings.token")?,
            bias: self.var("mlm.bias")?,
        })
    }
}

/// SimSiam predictor `z = gelu(h · W1) · W2`.
#[derive(Debug, Clone, Copy)]
pub struct Predictor {
    pub w1: Var,
    pub w2: Var,
}

/// Tied MLM output projection `logits = H · Eᵀ + b`.
#[derive(Debug, Clone, Copy)]
pub struct OutputProjection {
    pub embedding: Var,
    pub bias: Var,
}

impl OutputProjection {
    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, rows: Var) -> Result<Var> {
        let et = tape.transpose(self.embedding)?;
        let logits = tape.matmul(rows, et)?;
        tape.add_row(logits, self.bias)
    }
}

fn linear<T: Real>(tape: &mut Tape<T>, bound: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let w = bound.var(&format!("{prefix}.weight"))?;
    let b = bound.var(&format!("{prefix}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn norm<T: Real>(tape: &mut Tape<T>, bound: &Bound, x: Var, prefix: &str, eps: f64) -> Result<Var> {
    let n = tape.layer_norm(x, T::of(eps));
    let g = tape.mul_row(n, bound.var(&format!("{prefix}.gain"))?)?;
    tape.add_row(g, bound.var(&format!("{prefix}.bias"))?)
}

fn maybe_dropout<T: Real>(tape: &mut Tape<T>, x: Var, rate: f64, rng: &mut Option<&mut Rng>) -> Result<Var> {
    match rng {
        Some(r) if rate > 0.0 => tape.dropout(x, rate, &mut **r),
        _ => Ok(x),
    }
}

/// Runs the encoder on one sequence. Dropout is active iff `dropout_rng` is
/// given (train mode). Keys where `attend` is false (by default the PAD
/// positions of `ids`) get zero attention. When `attention` is given, every
/// head's attention matrix is appended to it.
pub fn encode_tokens_traced<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    ids: &[TokenId],
    attend: Option<&[bool]>,
    mut dropout_rng: Option<&mut Rng>,
    mut attention: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let cfg = bound.config();
    let n = ids.len();
    if n == 0 || n > cfg.max_len {
        return Err(Error::invalid(format!(
            "sequence length {n} outside 1..={}",
            cfg.max_len
        )));
    }
    let token_ids: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
    let allowed: Vec<bool> = match attend {
        Some(a) if a.len() == n => a.to_vec(),
        Some(a) => return Err(Error::ShapeMismatch {
            op: "attention mask",
            lhs: vec![n],
            rhs: vec![a.len()],
        }),
        None => ids.iter().map(|&t| t != PAD).collect(),
    };
    let positions: Vec<usize> = (0..n).collect();

    let tok = tape.embedding(bound.var("embeddings.token")?, &token_ids)?;
    let pos = tape.embedding(bound.var("embeddings.position")?, &positions)?;
    let mut x = tape.add(tok, pos)?;
    x = maybe_dropout(tape, x, cfg.dropout, &mut dropout_rng)?;

    let dh = cfg.head_dim();
    let inv_sqrt = T::of(1.0 / (dh as f64).sqrt());
    for l in 0..cfg.layers {
        let q = linear(tape, bound, x, &format!("layer{l}.attn.query"))?;
        let k = linear(tape, bound, x, &format!("layer{l}.attn.key"))?;
        let v = linear(tape, bound, x, &format!("layer{l}.attn.value"))?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, inv_sqrt);
            let probs = tape.masked_softmax(scores, Some(&allowed))?;
            if let Some(trace) = attention.as_deref_mut() {
                trace.push(probs);
            }
            heads.push(tape.matmul(probs, vh)?);
        }
        let merged = tape.concat_cols(&heads)?;
        let attn = linear(tape, bound, merged, &format!("layer{l}.attn.output"))?;
        let attn = maybe_dropout(tape, attn, cfg.dropout, &mut dropout_rng)?;
        let res = tape.add(x, attn)?;
        x = norm(tape, bound, res, &format!("layer{l}.attn_norm"), cfg.layer_norm_eps)?;

        let hidden = linear(tape, bound, x, &format!("layer{l}.ffn.in"))?;
        let hidden = tape.gelu(hidden);
        let out = linear(tape, bound, hidden, &format!("layer{l}.ffn.out"))?;
        let out = maybe_dropout(tape, out, cfg.dropout, &mut dropout_rng)?;
        let res = tape.add(x, out)?;
        x = norm(tape, bound, res, &format!("layer{l}.ffn_norm"), cfg.layer_norm_eps)?;
    }
    Ok(x)
}

/// Per-token representations `H [N × d]`.
pub fn encode_tokens<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    ids: &[TokenId],
    dropout_rng: Option<&mut Rng>,
) -> Result<Var> {
    encode_tokens_traced(tape, bound, ids, None, dropout_rng, None)
}

/// First-token representation `h [d]`.
pub fn pool_first<T: Real>(tape: &mut Tape<T>, hidden: Var) -> Result<Var> {
    let d = tape.value(hidden).cols();
    let row = tape.slice_rows(hidden, 0, 1)?;
    tape.reshape(row, &[d])
}

/// Stacks `[d]` vectors into a `[B × d]` matrix.
pub fn stack<T: Real>(tape: &mut Tape<T>, rows: &[Var]) -> Result<Var> {
    let parts = rows
        .iter()
        .map(|&r| {
            let d = tape.value(r).len();
            tape.reshape(r, &[1, d])
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat_rows(&parts)
}

/// Classifier logits `[B × C]` from pooled rows `[B × d]`.
pub fn classifier_logits<T: Real>(tape: &mut Tape<T>, bound: &Bound, pooled: Var) -> Result<Var> {
    linear(tape, bound, pooled, "classifier")
}

/// Drops the PAD suffix; outputs of the remaining rows are unchanged because
/// PAD keys are masked out of attention.
pub fn trim_padding(ids: &[TokenId]) -> &[TokenId] {
    let end = ids.iter().rposition(|&t| t != PAD).map_or(ids.len().min(1), |p| p + 1);
    &ids[..end]
}

impl<T: Real> EncoderParams<T> {
    /// Eval-mode hidden states for one sequence.
    pub fn hidden_states(&self, ids: &[TokenId]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind_with(&mut tape, |_| false);
        let h = encode_tokens(&mut tape, &bound, ids, None)?;
        Ok(tape.value(h).clone())
    }

    /// Eval-mode hidden states for many sequences, one tape each.
    pub fn hidden_states_batch(&self, batch: &[Vec<TokenId>], exec: Execution) -> Result<Vec<Tensor<T>>> {
        exec.map_slice(batch, |ids| self.hidden_states(ids))
            .into_iter()
            .collect()
    }

    /// Eval-mode classifier logits for one sequence.
    pub fn class_logits(&self, ids: &[TokenId]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = self.bind_with(&mut tape, |_| false);
        let h = encode_tokens(&mut tape, &bound, trim_padding(ids), None)?;
        let pooled = pool_first(&mut tape, h)?;
        let pooled = stack(&mut tape, &[pooled])?;
        let logits = classifier_logits(&mut tape, &bound, pooled)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Arg-max class per sequence, evaluated in parallel.
    pub fn predict(&self, batch: &[Vec<TokenId>], exec: Execution) -> Result<Vec<usize>> {
        exec.map_slice(batch, |ids| {
            let logits = self.class_logits(ids)?;
            Ok(logits
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0)
        })
        .into_iter()
        .collect()
    }
}
