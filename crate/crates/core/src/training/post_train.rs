use rand::seq::SliceRandom;
use rand::RngCore;

use super::optim::{adamw_step, clip_grad_norm, AdamState};
use super::{Objective, TrainConfig};
use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::encoder::{encode_tokens, pool_first, stack, trim_padding, Bound, EncoderParams};
use crate::error::{Error, Result};
use crate::masking::{drm, make_crm_batch, AugmentParams, MaskedSequence};
use crate::objectives::{cmlm_loss, cssl_loss, mlm_loss, CmlmTerms, ContrastiveBatch, LossBreakdown};
use crate::rng::{derive, Rng};
use crate::text::TokenSequence;

// Sub-stream labels under each step seed.
const STREAM_MASK: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

/// Redraws of a batch whose anchors have no selected position before giving
/// up.
const MAX_REMASK: u64 = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct PostTrainOutcome {
    /// Total loss per step.
    pub trace: Vec<f64>,
    pub components: Vec<LossBreakdown>,
    pub steps: u64,
}

/// Post-trains `params` in place on unlabeled sequences.
///
/// The shuffle order and one seed per step come from `rng`; masking and
/// dropout for sequence `j` of a step use streams derived from that step
/// seed, so the anchor view and its dropout are the same under CMLM and TAPT.
pub fn post_train<T: Real>(
    params: &mut EncoderParams<T>,
    data: &[TokenSequence],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<PostTrainOutcome> {
    cfg.validate()?;
    if cfg.objective == Objective::None {
        return Err(Error::invalid("post_train needs an objective other than none"));
    }
    if data.is_empty() {
        return Err(Error::Empty("post-training corpus".into()));
    }
    params.set_dropout(cfg.dropout)?;
    let opt = cfg.optimizer();
    let mut state = AdamState::new(params.tensors());
    let mut out = PostTrainOutcome {
        trace: Vec::new(),
        components: Vec::new(),
        steps: 0,
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let step_seed = rng.next_u64();
            let batch: Vec<&TokenSequence> = chunk.iter().map(|&i| &data[i]).collect();
            let (breakdown, mut grads) = step(params, &batch, cfg, step_seed)?;
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            let names = params.names().to_vec();
            adamw_step(params.tensors_mut(), &names, &grads, &mut state, &opt)?;
            out.trace.push(breakdown.total);
            out.components.push(breakdown);
            out.steps += 1;
        }
    }
    Ok(out)
}

fn encode_view<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    view: &MaskedSequence,
    dropout: &mut Rng,
) -> Result<Var> {
    encode_tokens(tape, bound, trim_padding(&view.corrupted), Some(dropout))
}

fn step<T: Real>(
    params: &EncoderParams<T>,
    batch: &[&TokenSequence],
    cfg: &TrainConfig,
    step_seed: u64,
) -> Result<(LossBreakdown, Vec<Option<Tensor<T>>>)> {
    let vocab = params.config().vocab_size;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let dropout = |j: usize, view: usize| derive(step_seed, &[STREAM_DROPOUT, j as u64, view as u64]);

    let (loss, breakdown) = match cfg.objective {
        Objective::Cmlm | Objective::Tapt => {
            let mut drawn = None;
            for attempt in 0..MAX_REMASK {
                let views = batch
                    .iter()
                    .enumerate()
                    .map(|(j, seq)| {
                        let mut r = derive(step_seed, &[STREAM_MASK, attempt, j as u64]);
                        if cfg.objective == Objective::Tapt {
                            Ok((drm(seq, cfg.p_m, vocab, &mut r)?, Vec::new()))
                        } else {
                            let b = make_crm_batch(seq, cfg.k, cfg.p_m, cfg.p_c, vocab, &mut r)?;
                            Ok((b.anchor, b.views))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                if views.iter().any(|(a, _)| a.pattern.num_selected() > 0) {
                    drawn = Some(views);
                    break;
                }
            }
            let views = drawn.ok_or_else(|| {
                Error::Empty(format!("no maskable position selected after {MAX_REMASK} draws"))
            })?;

            let mut hidden = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for (j, (anchor, _)) in views.iter().enumerate() {
                let h = encode_view(&mut tape, &bound, anchor, &mut dropout(j, 0))?;
                labels.push(&anchor.labels[..tape.shape(h)[0]]);
                hidden.push(h);
            }
            let projection = bound.output_projection()?;
            if cfg.objective == Objective::Tapt {
                let mlm = mlm_loss(&mut tape, &hidden, &labels, &projection)?;
                let v = tape.value(mlm).item().f64();
                let b = LossBreakdown {
                    mlm: v,
                    cl: 0.0,
                    total: v,
                    alpha: 0.0,
                };
                (mlm, b)
            } else {
                let mut pooled = Vec::with_capacity(cfg.k + 1);
                let anchors = hidden
                    .iter()
                    .map(|&h| pool_first(&mut tape, h))
                    .collect::<Result<Vec<_>>>()?;
                pooled.push(stack(&mut tape, &anchors)?);
                for k in 0..cfg.k {
                    let rows = views
                        .iter()
                        .enumerate()
                        .map(|(j, (_, vs))| {
                            let h = encode_view(&mut tape, &bound, &vs[k], &mut dropout(j, k + 1))?;
                            pool_first(&mut tape, h)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    pooled.push(stack(&mut tape, &rows)?);
                }
                let cb = ContrastiveBatch::new(&tape, pooled)?;
                let predictor = bound.predictor()?;
                let terms = CmlmTerms {
                    alpha: cfg.alpha,
                    variant: cfg.cl_variant,
                    tau: cfg.tau,
                    predictor: &predictor,
                    projection: &projection,
                };
                cmlm_loss(&mut tape, &hidden, &labels, &cb, terms)?
            }
        }
        Objective::Cssl(augmenter) => {
            let aug = AugmentParams {
                p_m: cfg.p_m,
                p_c: cfg.p_c,
                eda_rate: cfg.eda_rate,
                vocab_size: vocab,
                synonyms: Default::default(),
            };
            let mut first = Vec::with_capacity(batch.len());
            let mut second = Vec::with_capacity(batch.len());
            for (j, seq) in batch.iter().enumerate() {
                let mut r = derive(step_seed, &[STREAM_MASK, 0, j as u64]);
                let pair = augmenter.views(seq, &aug, &mut r)?;
                let h = encode_view(&mut tape, &bound, &pair.first, &mut dropout(j, 0))?;
                first.push(pool_first(&mut tape, h)?);
                let h = encode_view(&mut tape, &bound, &pair.second, &mut dropout(j, 1))?;
                second.push(pool_first(&mut tape, h)?);
            }
            let v0 = stack(&mut tape, &first)?;
            let v1 = stack(&mut tape, &second)?;
            let cb = ContrastiveBatch::new(&tape, vec![v0, v1])?;
            let predictor = bound.predictor()?;
            let l = cssl_loss(&mut tape, &cb, cfg.cl_variant, cfg.tau, &predictor)?;
            let v = tape.value(l).item().f64();
            let b = LossBreakdown {
                mlm: 0.0,
                cl: v,
                total: v,
                alpha: 1.0,
            };
            (l, b)
        }
        Objective::None => unreachable!("rejected before the loop"),
    };

    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("post-training loss".into()));
    }
    let grads = tape.backward(loss)?;
    let grads = bound.vars().iter().map(|&v| Some(grads.wrt(v))).collect();
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::rng::seeded;
    use crate::text::NUM_SPECIAL;
    use rand::Rng as _;

    fn corpus(n: usize, vocab: usize, rng: &mut Rng) -> Vec<TokenSequence> {
        (0..n)
            .map(|_| {
                let len = rng.gen_range(3..8);
                let a: Vec<u32> = (0..len).map(|_| rng.gen_range(NUM_SPECIAL..vocab) as u32).collect();
                TokenSequence::from_segments(&a, None, 10).unwrap()
            })
            .collect()
    }

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            layers: 1,
            heads: 2,
            hidden: 8,
            ffn: 16,
            vocab_size: 20,
            max_len: 10,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
        }
    }

    fn cfg(objective: Objective, alpha: f64) -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            epochs: 2,
            batch_size: 3,
            alpha,
            objective,
            ..Default::default()
        }
    }

    fn run(c: &TrainConfig) -> (EncoderParams<f32>, PostTrainOutcome, Rng) {
        let data = corpus(7, 20, &mut seeded(1));
        let mut params = EncoderParams::<f32>::init(&tiny(), &mut seeded(2)).unwrap();
        let mut rng = seeded(3);
        let out = post_train(&mut params, &data, c, &mut rng).unwrap();
        (params, out, rng)
    }

    #[test]
    fn deterministic() {
        let c = cfg(Objective::Cmlm, 0.5);
        let (p1, o1, _) = run(&c);
        let (p2, o2, _) = run(&c);
        assert_eq!(o1, o2);
        assert_eq!(p1, p2);
        assert_eq!(o1.steps, 6);
    }

    #[test]
    fn tapt_equals_cmlm_alpha_zero() {
        let (pt, ot, rt) = run(&cfg(Objective::Tapt, 0.5));
        let (pc, oc, rc) = run(&cfg(Objective::Cmlm, 0.0));
        let bits = |t: &[f64]| t.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ot.trace), bits(&oc.trace));
        for (a, b) in pt.tensors().iter().zip(pc.tensors()) {
            let ab: Vec<u32> = a.data().iter().map(|x| x.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(rt, rc);
    }

    #[test]
    fn cssl_runs_for_every_augmenter() {
        for name in ["crm-pair", "drm-pair", "eda-pair", "identity"] {
            for variant in [crate::objectives::ClVariant::SimSiam, crate::objectives::ClVariant::SimClr] {
                let mut c = cfg(format!("cssl:{name}").parse().unwrap(), 1.0);
                c.cl_variant = variant;
                let (p, o, _) = run(&c);
                assert!(p.is_finite());
                assert!(o.trace.iter().all(|x| x.is_finite()));
            }
        }
    }

    #[test]
    fn rejects_empty_and_none() {
        let mut params = EncoderParams::<f32>::init(&tiny(), &mut seeded(2)).unwrap();
        let c = cfg(Objective::Cmlm, 0.5);
        assert!(matches!(post_train(&mut params, &[], &c, &mut seeded(0)), Err(Error::Empty(_))));
        let data = corpus(2, 20, &mut seeded(1));
        let c = cfg(Objective::None, 0.5);
        assert!(post_train(&mut params, &data, &c, &mut seeded(0)).is_err());
    }

    #[test]
    fn zero_mask_rate_fails_for_mlm() {
        let mut params = EncoderParams::<f32>::init(&tiny(), &mut seeded(2)).unwrap();
        let data = corpus(2, 20, &mut seeded(1));
        let mut c = cfg(Objective::Tapt, 0.0);
        c.p_m = 0.0;
        assert!(matches!(post_train(&mut params, &data, &c, &mut seeded(0)), Err(Error::Empty(_))));
    }
}
