//! Finite-difference audits of every tape primitive, every loss and the
//! encoder, in `f64`.
//!
//! Each audited function is reduced to a scalar by a fixed random weighting
//! `Σ w ⊙ y` with `|w| ∈ [0.5, 1.5]`, so no output element is ignored and
//! gradients stay away from zero. Paths through `stop_gradient` are not
//! finite-difference checkable; they get an exact-zero check instead.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_check, GradCheckReport, Tape, Tensor, Var, DEFAULT_STEP};
use crate::encoder::{encode_tokens, pool_first, stack, EncoderConfig, EncoderParams, OutputProjection, Predictor};
use crate::error::{Error, Result};
use crate::masking::make_crm_batch;
use crate::objectives::{
    cmlm_loss, mlm_loss, simclr_loss, simsiam_pair_values, ClVariant, CmlmTerms, ContrastiveBatch,
};
use crate::par::Execution;
use crate::rng::{derive, seeded, Rng};
use crate::text::{TokenId, TokenSequence, NUM_SPECIAL};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuditScope {
    Primitives,
    Objectives,
    Encoder,
}

impl AuditScope {
    pub const ALL: [AuditScope; 3] = [AuditScope::Primitives, AuditScope::Objectives, AuditScope::Encoder];

    pub fn tolerance(self) -> f64 {
        match self {
            AuditScope::Primitives => PRIMITIVE_TOLERANCE,
            _ => COMPOSITE_TOLERANCE,
        }
    }
}

impl std::str::FromStr for AuditScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "primitives" => Ok(AuditScope::Primitives),
            "objectives" => Ok(AuditScope::Objectives),
            "encoder" => Ok(AuditScope::Encoder),
            other => Err(Error::invalid(format!(
                "unknown audit scope {other:?}; expected primitives, objectives or encoder"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditResult {
    pub scope: AuditScope,
    pub name: String,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl AuditResult {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

/// Shapes used by the objective and encoder audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuditShape {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub k: usize,
}

impl Default for AuditShape {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            hidden: 8,
            vocab: 32,
            seq_len: 6,
            batch: 2,
            k: 1,
        }
    }
}

fn weights(shape: &[usize], salt: u64) -> Tensor<f64> {
    let mut r = seeded(0x5eed ^ salt);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = r.gen_range(0.5..1.5);
            if r.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// `Σ w ⊙ y` for a fixed weighting `w` of `y`'s shape.
fn weighted(tape: &mut Tape<f64>, y: Var, salt: u64) -> Result<Var> {
    let w = tape.constant(weights(tape.shape(y), salt));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type Scalar = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync>;
type Audit = (&'static str, Vec<Tensor<f64>>, Scalar);

fn primitive_audits(rng: &mut Rng) -> Vec<Audit> {
    let mut m = |r: usize, c: usize| Tensor::<f64>::randn(&[r, c], 1.0, rng);
    let a34 = m(3, 4);
    let b45 = m(4, 5);
    let b34 = m(3, 4);
    let x35 = m(3, 5);
    let a23 = m(2, 3);
    let a33 = m(3, 3);
    let a32 = m(3, 2);
    let table = m(6, 4);
    let row = m(1, 4).reshape(vec![4]).expect("4 elements");
    let positive = Tensor::new(vec![3, 4], a34.data().iter().map(|x| x.abs() + 0.5).collect()).expect("shape");

    fn unary(f: fn(&mut Tape<f64>, Var) -> Result<Var>) -> Scalar {
        Box::new(move |t, v| {
            let y = f(t, v[0])?;
            weighted(t, y, 1)
        })
    }
    fn binary(f: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Scalar {
        Box::new(move |t, v| {
            let y = f(t, v[0], v[1])?;
            weighted(t, y, 2)
        })
    }

    vec![
        ("matmul", vec![a34.clone(), b45], binary(|t, a, b| t.matmul(a, b))),
        ("transpose", vec![a34.clone()], unary(|t, x| t.transpose(x))),
        ("add", vec![a34.clone(), b34.clone()], binary(|t, a, b| t.add(a, b))),
        ("sub", vec![a34.clone(), b34.clone()], binary(|t, a, b| t.sub(a, b))),
        ("mul", vec![a34.clone(), b34.clone()], binary(|t, a, b| t.mul(a, b))),
        ("add_row", vec![a34.clone(), row.clone()], binary(|t, a, b| t.add_row(a, b))),
        ("mul_row", vec![a34.clone(), row], binary(|t, a, b| t.mul_row(a, b))),
        ("scale", vec![a34.clone()], unary(|t, x| Ok(t.scale(x, 1.7)))),
        ("exp", vec![a34.clone()], unary(|t, x| Ok(t.exp(x)))),
        ("log", vec![positive], unary(|t, x| t.log(x))),
        ("gelu", vec![x35.clone()], unary(|t, x| Ok(t.gelu(x)))),
        ("softmax", vec![x35.clone()], unary(|t, x| t.softmax(x))),
        (
            "masked_softmax",
            vec![x35.clone()],
            unary(|t, x| t.masked_softmax(x, Some(&[true, false, true, true, false]))),
        ),
        ("layer_norm", vec![x35.clone()], unary(|t, x| Ok(t.layer_norm(x, 1e-5)))),
        (
            "dropout",
            vec![x35.clone()],
            unary(|t, x| t.dropout(x, 0.3, &mut seeded(5))),
        ),
        (
            "embedding",
            vec![table],
            unary(|t, x| t.embedding(x, &[0, 3, 3, 5])),
        ),
        (
            "cross_entropy",
            vec![x35.clone()],
            unary(|t, x| t.cross_entropy(x, &[1, 0, 4])),
        ),
        ("l2_normalize", vec![a34.clone()], unary(|t, x| t.l2_normalize(x))),
        ("sum", vec![a34.clone()], unary(|t, x| Ok(t.sum(x)))),
        ("mean", vec![a34.clone()], unary(|t, x| t.mean(x))),
        ("sum_last", vec![a34.clone()], unary(|t, x| t.sum_last(x))),
        (
            "concat_rows",
            vec![a23, a33],
            binary(|t, a, b| t.concat_rows(&[a, b])),
        ),
        (
            "concat_cols",
            vec![a32, b34],
            binary(|t, a, b| t.concat_cols(&[a, b])),
        ),
        ("slice_rows", vec![x35.clone()], unary(|t, x| t.slice_rows(x, 1, 2))),
        ("slice_cols", vec![x35.clone()], unary(|t, x| t.slice_cols(x, 1, 3))),
        ("select_rows", vec![x35], unary(|t, x| t.select_rows(x, &[2, 0, 2]))),
        ("reshape", vec![a34], unary(|t, x| t.reshape(x, &[4, 3]))),
    ]
}

/// Gradient of `Σ w ⊙ stop_gradient(x)` must be exactly zero.
fn stop_gradient_audit(rng: &mut Rng) -> Result<AuditResult> {
    let x = Tensor::randn(&[3, 4], 1.0, rng);
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let y = tape.stop_gradient(v);
    let loss = weighted(&mut tape, y, 3)?;
    let g = tape.backward(loss)?.wrt(v);
    let nonzero = g.data().iter().position(|x| x.to_bits() != 0);
    Ok(AuditResult {
        scope: AuditScope::Primitives,
        name: "stop_gradient (exact zero)".into(),
        tolerance: PRIMITIVE_TOLERANCE,
        report: GradCheckReport {
            max_rel_error: if nonzero.is_some() { f64::INFINITY } else { 0.0 },
            checked: x.len(),
            worst: nonzero.map(|i| (0, i, g.data()[i], 0.0)),
        },
    })
}

fn random_labels(n: usize, vocab: usize, rng: &mut Rng) -> Vec<Option<TokenId>> {
    let mut labels: Vec<Option<TokenId>> = (0..n)
        .map(|i| (i > 0 && rng.gen_bool(0.4)).then(|| rng.gen_range(NUM_SPECIAL..vocab) as TokenId))
        .collect();
    if labels.iter().all(Option::is_none) {
        labels[1] = Some(NUM_SPECIAL as TokenId);
    }
    labels
}

fn objective_audits(shape: AuditShape, rng: &mut Rng) -> Vec<Audit> {
    let AuditShape {
        hidden: d,
        vocab: v,
        seq_len: n,
        batch: b,
        k,
        ..
    } = shape;
    let h: Vec<Tensor<f64>> = (0..b).map(|_| Tensor::randn(&[n, d], 1.0, rng)).collect();
    let emb = Tensor::randn(&[v, d], 0.5, rng);
    let bias = Tensor::randn(&[v], 0.5, rng);
    let w1 = Tensor::randn(&[d, d], 0.5, rng);
    let w2 = Tensor::randn(&[d, d], 0.5, rng);
    let views: Vec<Tensor<f64>> = (0..=k).map(|_| Tensor::randn(&[b, d], 1.0, rng)).collect();
    let labels: Vec<Vec<Option<TokenId>>> = (0..b).map(|_| random_labels(n, v, rng)).collect();

    let mlm_params: Vec<Tensor<f64>> = h.iter().cloned().chain([emb.clone(), bias.clone()]).collect();
    let labels_mlm = labels.clone();
    let mlm: Scalar = Box::new(move |t, vs| {
        let proj = OutputProjection {
            embedding: vs[b],
            bias: vs[b + 1],
        };
        let refs: Vec<&[Option<TokenId>]> = labels_mlm.iter().map(Vec::as_slice).collect();
        mlm_loss(t, &vs[..b], &refs, &proj)
    });

    let simclr: Scalar = Box::new(move |t, vs| {
        let batch = ContrastiveBatch::new(t, vs.to_vec())?;
        simclr_loss(t, &batch, 0.1)
    });

    // Online branch differentiable, target branch constant with equal values.
    let targets = views.clone();
    let simsiam_params: Vec<Tensor<f64>> = views.iter().cloned().chain([w1.clone(), w2.clone()]).collect();
    let simsiam: Scalar = Box::new(move |t, vs| {
        let online = ContrastiveBatch::new(t, vs[..=k].to_vec())?;
        let tv = targets.iter().map(|x| t.constant(x.clone())).collect();
        let target = ContrastiveBatch::new(t, tv)?;
        let pred = Predictor {
            w1: vs[k + 1],
            w2: vs[k + 2],
        };
        let pairs = simsiam_pair_values(t, &online, &target, &pred)?;
        weighted(t, pairs, 4)
    });

    let cmlm_with = |variant: ClVariant| -> (Vec<Tensor<f64>>, Scalar) {
        let labels = labels.clone();
        let views = views.clone();
        let params: Vec<Tensor<f64>> = h
            .iter()
            .cloned()
            .chain([emb.clone(), bias.clone(), w1.clone(), w2.clone()])
            .chain(if variant == ClVariant::SimClr { views.clone() } else { Vec::new() })
            .collect();
        let f: Scalar = Box::new(move |t, vs| {
            let proj = OutputProjection {
                embedding: vs[b],
                bias: vs[b + 1],
            };
            let pred = Predictor {
                w1: vs[b + 2],
                w2: vs[b + 3],
            };
            let view_vars = match variant {
                ClVariant::SimClr => vs[b + 4..].to_vec(),
                // The SimSiam target path is stop-gradient; keep views out of
                // the checked parameters.
                ClVariant::SimSiam => views.iter().map(|x| t.constant(x.clone())).collect(),
            };
            let batch = ContrastiveBatch::new(t, view_vars)?;
            let refs: Vec<&[Option<TokenId>]> = labels.iter().map(Vec::as_slice).collect();
            let terms = CmlmTerms {
                alpha: 0.5,
                variant,
                tau: 0.1,
                predictor: &pred,
                projection: &proj,
            };
            Ok(cmlm_loss(t, &vs[..b], &refs, &batch, terms)?.0)
        });
        (params, f)
    };
    let (cmlm_clr_params, cmlm_clr) = cmlm_with(ClVariant::SimClr);
    let (cmlm_siam_params, cmlm_siam) = cmlm_with(ClVariant::SimSiam);

    vec![
        ("mlm_loss", mlm_params, mlm),
        ("simclr_loss", views.clone(), simclr),
        ("simsiam_loss", simsiam_params, simsiam),
        ("cmlm_loss (simclr)", cmlm_clr_params, cmlm_clr),
        ("cmlm_loss (simsiam)", cmlm_siam_params, cmlm_siam),
    ]
}

/// Encoder parameters with O(1) entries so every gradient is well scaled.
fn audit_params(shape: AuditShape, rng: &mut Rng) -> Result<EncoderParams<f64>> {
    let cfg = EncoderConfig {
        layers: shape.layers,
        heads: shape.heads,
        hidden: shape.hidden,
        ffn: 2 * shape.hidden,
        vocab_size: shape.vocab,
        max_len: shape.seq_len,
        dropout: 0.0,
        layer_norm_eps: 1e-5,
    };
    let mut p = EncoderParams::<f64>::init(&cfg, rng)?;
    let names = p.names().to_vec();
    for (name, t) in names.iter().zip(p.tensors_mut()) {
        let fresh = Tensor::<f64>::randn(t.shape(), 0.3, rng);
        for (x, y) in t.data_mut().iter_mut().zip(fresh.data()) {
            *x = if name.ends_with(".gain") { 1.0 + y } else { *y };
        }
    }
    Ok(p)
}

fn random_sequence(shape: AuditShape, with_pad: bool, rng: &mut Rng) -> Result<TokenSequence> {
    let content = shape.seq_len - 1 - usize::from(with_pad);
    let a: Vec<TokenId> = (0..content)
        .map(|_| rng.gen_range(NUM_SPECIAL..shape.vocab) as TokenId)
        .collect();
    TokenSequence::from_segments(&a, None, shape.seq_len)
}

/// Attention key biases shift every score of a query row equally, so softmax
/// cancels them and their gradient is exactly zero. Numerically that zero is
/// round-off noise, so they are held constant instead of checked.
fn is_checked(name: &str) -> bool {
    !name.ends_with("attn.key.bias")
}

fn checked_tensors(params: &EncoderParams<f64>) -> Vec<Tensor<f64>> {
    params
        .named()
        .filter(|(n, _)| is_checked(n))
        .map(|(_, t)| t.clone())
        .collect()
}

/// Full parameter vars from the checked ones, with constants for the rest.
fn full_vars(tape: &mut Tape<f64>, params: &EncoderParams<f64>, checked: &[Var]) -> Vec<Var> {
    let mut it = checked.iter();
    params
        .named()
        .map(|(n, t)| {
            if is_checked(n) {
                *it.next().expect("one var per checked tensor")
            } else {
                tape.constant(t.clone())
            }
        })
        .collect()
}

fn encoder_audits(shape: AuditShape, rng: &mut Rng) -> Result<Vec<Audit>> {
    let params = audit_params(shape, rng)?;
    let seq = random_sequence(shape, true, rng)?;
    let tensors = checked_tensors(&params);

    let p1 = params.clone();
    let ids = seq.ids().to_vec();
    let pooled_norm: Scalar = Box::new(move |t, vs| {
        let bound = p1.attach(full_vars(t, &p1, vs))?;
        let h = encode_tokens(t, &bound, &ids, None)?;
        let pooled = pool_first(t, h)?;
        let sq = t.mul(pooled, pooled)?;
        Ok(t.sum(sq))
    });

    let p2 = params.clone();
    let ids = seq.ids().to_vec();
    let all_rows: Scalar = Box::new(move |t, vs| {
        let bound = p2.attach(full_vars(t, &p2, vs))?;
        let h = encode_tokens(t, &bound, &ids, None)?;
        weighted(t, h, 6)
    });

    // Full CMLM step with fixed masks and dropout off. SimCLR keeps every
    // path differentiable.
    let seqs = (0..shape.batch)
        .map(|_| random_sequence(shape, false, rng))
        .collect::<Result<Vec<_>>>()?;
    let mut mask_rng = derive(rng.gen(), &[]);
    let batches = seqs
        .iter()
        .map(|s| {
            let mut tries = 0;
            loop {
                let b = make_crm_batch(s, shape.k, 0.3, 0.7, shape.vocab, &mut mask_rng)?;
                tries += 1;
                if b.anchor.pattern.num_selected() > 0 || tries > 100 {
                    return Ok(b);
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let p3 = params.clone();
    let k = shape.k;
    let end_to_end: Scalar = Box::new(move |t, vs| {
        let bound = p3.attach(full_vars(t, &p3, vs))?;
        let mut hidden = Vec::new();
        let mut anchors = Vec::new();
        for b in &batches {
            let h = encode_tokens(t, &bound, &b.anchor.corrupted, None)?;
            anchors.push(pool_first(t, h)?);
            hidden.push(h);
        }
        let mut views = vec![stack(t, &anchors)?];
        for j in 0..k {
            let rows = batches
                .iter()
                .map(|b| {
                    let h = encode_tokens(t, &bound, &b.views[j].corrupted, None)?;
                    pool_first(t, h)
                })
                .collect::<Result<Vec<_>>>()?;
            views.push(stack(t, &rows)?);
        }
        let cb = ContrastiveBatch::new(t, views)?;
        let refs: Vec<&[Option<TokenId>]> = batches.iter().map(|b| b.anchor.labels.as_slice()).collect();
        let terms = CmlmTerms {
            alpha: 0.5,
            variant: ClVariant::SimClr,
            tau: 0.1,
            predictor: &bound.predictor()?,
            projection: &bound.output_projection()?,
        };
        Ok(cmlm_loss(t, &hidden, &refs, &cb, terms)?.0)
    });

    Ok(vec![
        ("encoder: |pool_first(H)|^2", tensors.clone(), pooled_norm),
        ("encoder: weighted H", tensors.clone(), all_rows),
        ("encoder + cmlm_loss", tensors, end_to_end),
    ])
}

/// Runs the audits of `scope` with inputs drawn from `seed`. Finite
/// differences over parameter elements run under `exec`.
pub fn run_audits(scope: AuditScope, shape: AuditShape, seed: u64, exec: Execution) -> Result<Vec<AuditResult>> {
    let mut rng = derive(seed, &[scope as u64]);
    let audits = match scope {
        AuditScope::Primitives => primitive_audits(&mut rng),
        AuditScope::Objectives => objective_audits(shape, &mut rng),
        AuditScope::Encoder => encoder_audits(shape, &mut rng)?,
    };
    let mut out = Vec::with_capacity(audits.len() + 1);
    for (name, params, f) in audits {
        let report = finite_diff_check(|t: &mut Tape<f64>, v: &[Var]| f(t, v), &params, DEFAULT_STEP, exec)?;
        out.push(AuditResult {
            scope,
            name: name.to_string(),
            tolerance: scope.tolerance(),
            report,
        });
    }
    if scope == AuditScope::Primitives {
        out.push(stop_gradient_audit(&mut rng)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_scope_passes() {
        for scope in AuditScope::ALL {
            for seed in [1, 2] {
                let results = run_audits(scope, AuditShape::default(), seed, Execution::default()).unwrap();
                for r in &results {
                    assert!(r.passed(), "{} seed {seed}: {:?}", r.name, r.report);
                    assert!(r.report.checked > 0);
                }
            }
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // d/dx of x·stop_gradient(x) is x on the tape but 2x numerically.
        let x = Tensor::randn(&[4], 1.0, &mut seeded(1));
        let r = finite_diff_check(
            |t, v| {
                let s = t.stop_gradient(v[0]);
                let p = t.mul(v[0], s)?;
                Ok(t.sum(p))
            },
            &[x],
            DEFAULT_STEP,
            Execution::Sequential,
        )
        .unwrap();
        assert!(!r.passes(COMPOSITE_TOLERANCE));
    }
}
