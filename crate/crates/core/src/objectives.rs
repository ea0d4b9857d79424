//! Loss functions: token-level MLM, sequence-level SimCLR and SimSiam, their
//! CMLM combination and the CL-only CSSL objective.
//!
//! All functions build on a caller-owned [`Tape`]; the returned [`Var`] is a
//! scalar ready for `backward`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Var};
use crate::encoder::{OutputProjection, Predictor};
use crate::error::{Error, Result};
use crate::text::TokenId;

/// Default SimCLR temperature.
pub const DEFAULT_TAU: f64 = 0.1;
/// Default CL weight in the CMLM loss.
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClVariant {
    SimSiam,
    SimClr,
}

impl std::str::FromStr for ClVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simsiam" => Ok(ClVariant::SimSiam),
            "simclr" => Ok(ClVariant::SimClr),
            other => Err(Error::invalid(format!(
                "unknown contrastive variant {other:?}; expected simsiam or simclr"
            ))),
        }
    }
}

/// Pooled representations of `K + 1` views of a batch: `views[k]` is the
/// `[B × d]` matrix of `h_b^k`, with `views[0]` the anchor view.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub views: Vec<Var>,
}

impl ContrastiveBatch {
    pub fn new<T: Real>(tape: &Tape<T>, views: Vec<Var>) -> Result<Self> {
        if views.len() < 2 {
            return Err(Error::invalid(format!(
                "contrastive batch needs an anchor and at least one view, got {} views",
                views.len()
            )));
        }
        let shape = tape.shape(views[0]).to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::invalid(format!("views must be non-empty [B × d] matrices, got {shape:?}")));
        }
        for &v in &views {
            if tape.shape(v) != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "contrastive batch",
                    lhs: shape,
                    rhs: tape.shape(v).to_vec(),
                });
            }
            if !tape.value(v).is_finite() {
                return Err(Error::NonFinite("contrastive representation".into()));
            }
        }
        Ok(Self { views })
    }

    /// Number of non-anchor views.
    pub fn k(&self) -> usize {
        self.views.len() - 1
    }

    pub fn batch_size<T: Real>(&self, tape: &Tape<T>) -> usize {
        tape.shape(self.views[0])[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mlm: f64,
    pub cl: f64,
    pub total: f64,
    pub alpha: f64,
}

/// Mean of scalar vars.
fn mean_of<T: Real>(tape: &mut Tape<T>, scalars: &[Var]) -> Result<Var> {
    let parts = scalars
        .iter()
        .map(|&s| tape.reshape(s, &[1, 1]))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.concat_rows(&parts)?;
    tape.mean(stacked)
}

/// Cross-entropy at selected positions only, averaged within each sequence
/// and then across the sequences that have at least one selected position.
///
/// `hidden[b]` is `H_b^0 [N_b × d]` and `labels[b]` holds the original id at
/// each selected position of that sequence.
pub fn mlm_loss<T: Real>(
    tape: &mut Tape<T>,
    hidden: &[Var],
    labels: &[&[Option<TokenId>]],
    projection: &OutputProjection,
) -> Result<Var> {
    if hidden.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "mlm_loss",
            lhs: vec![hidden.len()],
            rhs: vec![labels.len()],
        });
    }
    let mut per_sequence = Vec::new();
    for (&h, lab) in hidden.iter().zip(labels) {
        if tape.shape(h)[0] != lab.len() {
            return Err(Error::ShapeMismatch {
                op: "mlm_loss",
                lhs: tape.shape(h).to_vec(),
                rhs: vec![lab.len()],
            });
        }
        let (positions, targets): (Vec<usize>, Vec<usize>) = lab
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|t| (i, t as usize)))
            .unzip();
        if positions.is_empty() {
            continue;
        }
        let rows = tape.select_rows(h, &positions)?;
        let logits = projection.logits(tape, rows)?;
        let ce = tape.cross_entropy(logits, &targets)?;
        per_sequence.push(tape.mean(ce)?);
    }
    if per_sequence.is_empty() {
        return Err(Error::Empty("mlm_loss: no selected positions in the batch".into()));
    }
    mean_of(tape, &per_sequence)
}

/// `(u / ‖u‖) · (v / ‖v‖)` for two `[d]` vectors.
pub fn cosine_sim<T: Real>(tape: &mut Tape<T>, u: Var, v: Var) -> Result<Var> {
    if tape.shape(u) != tape.shape(v) || tape.shape(u).len() != 1 {
        return Err(Error::ShapeMismatch {
            op: "cosine_sim",
            lhs: tape.shape(u).to_vec(),
            rhs: tape.shape(v).to_vec(),
        });
    }
    let d = tape.shape(u)[0];
    let u = tape.reshape(u, &[1, d])?;
    let v = tape.reshape(v, &[1, d])?;
    let un = tape.l2_normalize(u)?;
    let vn = tape.l2_normalize(v)?;
    let p = tape.mul(un, vn)?;
    Ok(tape.sum(p))
}

/// In-batch contrastive loss over each view `k ≥ 1` against the anchor:
///
/// `−1/(K·B) Σ_k Σ_b log( exp(sim(h_b^k, h_b^0)/τ) / Σ_i exp(sim(h_i^k, h_b^0)/τ) )`
///
/// The denominator ranges over the view-`k` representations of every
/// sequence (including `b` itself) against the anchor `h_b^0`.
pub fn simclr_loss<T: Real>(tape: &mut Tape<T>, batch: &ContrastiveBatch, tau: f64) -> Result<Var> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let b = batch.batch_size(tape);
    let anchors = tape.l2_normalize(batch.views[0])?;
    let targets: Vec<usize> = (0..b).collect();
    let mut terms = Vec::with_capacity(batch.k());
    for &view in &batch.views[1..] {
        let z = tape.l2_normalize(view)?;
        let zt = tape.transpose(z)?;
        // sims[b][i] = sim(h_i^k, h_b^0)
        let sims = tape.matmul(anchors, zt)?;
        if !tape.value(sims).is_finite() {
            return Err(Error::NonFinite("similarity".into()));
        }
        let logits = tape.scale(sims, T::of(1.0 / tau));
        let ce = tape.cross_entropy(logits, &targets)?;
        terms.push(tape.reshape(ce, &[b, 1])?);
    }
    let all = tape.concat_rows(&terms)?;
    tape.mean(all)
}

/// SimSiam per-pair values `exp(−½ (D(z_b^k, h_b^0) + D(z_b^0, h_b^k)))`
/// as a `[K·B]` vector, with `z = gelu(h · W1) · W2` computed from `online`
/// and `D(z, h) = sim(z, stop_gradient(h))` taking `h` from `target`.
///
/// [`simsiam_loss`] passes the same batch for both; separating them lets
/// callers check that the target path carries no gradient.
pub fn simsiam_pair_values<T: Real>(
    tape: &mut Tape<T>,
    online: &ContrastiveBatch,
    target: &ContrastiveBatch,
    predictor: &Predictor,
) -> Result<Var> {
    if online.views.len() != target.views.len() {
        return Err(Error::invalid("online and target batches differ in view count"));
    }
    let b = online.batch_size(tape);
    let mut z = Vec::with_capacity(online.views.len());
    let mut h = Vec::with_capacity(online.views.len());
    for (&on, &tg) in online.views.iter().zip(&target.views) {
        let a = tape.matmul(on, predictor.w1)?;
        let a = tape.gelu(a);
        let zk = tape.matmul(a, predictor.w2)?;
        z.push(tape.l2_normalize(zk)?);
        let hk = tape.stop_gradient(tg);
        h.push(tape.l2_normalize(hk)?);
    }
    let mut pairs = Vec::with_capacity(online.k());
    for k in 1..online.views.len() {
        let p1 = tape.mul(z[k], h[0])?;
        let d1 = tape.sum_last(p1)?;
        let p2 = tape.mul(z[0], h[k])?;
        let d2 = tape.sum_last(p2)?;
        let s = tape.add(d1, d2)?;
        let s = tape.scale(s, T::of(-0.5));
        let e = tape.exp(s);
        pairs.push(tape.reshape(e, &[b, 1])?);
    }
    let all = tape.concat_rows(&pairs)?;
    tape.reshape(all, &[online.k() * b])
}

/// Mean of [`simsiam_pair_values`]; each pair lies in `[e^{-1}, e]`.
pub fn simsiam_loss<T: Real>(tape: &mut Tape<T>, batch: &ContrastiveBatch, predictor: &Predictor) -> Result<Var> {
    let pairs = simsiam_pair_values(tape, batch, batch, predictor)?;
    tape.mean(pairs)
}

/// The configured sequence-level loss.
pub fn cl_loss<T: Real>(
    tape: &mut Tape<T>,
    batch: &ContrastiveBatch,
    variant: ClVariant,
    tau: f64,
    predictor: &Predictor,
) -> Result<Var> {
    match variant {
        ClVariant::SimClr => simclr_loss(tape, batch, tau),
        ClVariant::SimSiam => simsiam_loss(tape, batch, predictor),
    }
}

/// Inputs of the combined loss besides the tape.
#[derive(Debug, Clone, Copy)]
pub struct CmlmTerms<'a> {
    pub alpha: f64,
    pub variant: ClVariant,
    pub tau: f64,
    pub predictor: &'a Predictor,
    pub projection: &'a OutputProjection,
}

/// `L = L_MLM + α · L_CL`. With `α = 0` this is plain MLM post-training.
pub fn cmlm_loss<T: Real>(
    tape: &mut Tape<T>,
    anchor_hidden: &[Var],
    labels: &[&[Option<TokenId>]],
    batch: &ContrastiveBatch,
    terms: CmlmTerms<'_>,
) -> Result<(Var, LossBreakdown)> {
    if !(terms.alpha >= 0.0) {
        return Err(Error::invalid(format!("alpha must be non-negative, got {}", terms.alpha)));
    }
    let mlm = mlm_loss(tape, anchor_hidden, labels, terms.projection)?;
    let cl = cl_loss(tape, batch, terms.variant, terms.tau, terms.predictor)?;
    let weighted = tape.scale(cl, T::of(terms.alpha));
    let total = tape.add(mlm, weighted)?;
    let breakdown = LossBreakdown {
        mlm: tape.value(mlm).item().f64(),
        cl: tape.value(cl).item().f64(),
        total: tape.value(total).item().f64(),
        alpha: terms.alpha,
    };
    Ok((total, breakdown))
}

/// Contrastive loss alone over exactly two augmented views per sequence.
pub fn cssl_loss<T: Real>(
    tape: &mut Tape<T>,
    batch: &ContrastiveBatch,
    variant: ClVariant,
    tau: f64,
    predictor: &Predictor,
) -> Result<Var> {
    if batch.views.len() != 2 {
        return Err(Error::invalid(format!(
            "CSSL needs exactly 2 views per sequence, got {}",
            batch.views.len()
        )));
    }
    cl_loss(tape, batch, variant, tau, predictor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::rng::seeded;
    use std::f64::consts::E;

    fn leaf(tape: &mut Tape<f64>, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        tape.leaf(Tensor::matrix(rows, cols, data).unwrap())
    }

    fn identity_predictor(tape: &mut Tape<f64>, d: usize) -> Predictor {
        // gelu is monotone and positive for large inputs, so a large identity
        // W1 makes z ∝ h for positive h.
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        let w1 = tape.leaf(Tensor::matrix(d, d, eye.iter().map(|x| x * 50.0).collect()).unwrap());
        let w2 = tape.leaf(Tensor::matrix(d, d, eye).unwrap());
        Predictor { w1, w2 }
    }

    #[test]
    fn cosine_cases() {
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(Tensor::vector(vec![0.3, -1.2, 2.0]));
        let nv = tape.scale(v, -2.5);
        let e1 = tape.leaf(Tensor::vector(vec![1.0, 0.0, 0.0]));
        let e2 = tape.leaf(Tensor::vector(vec![0.0, 1.0, 0.0]));
        let zero = tape.leaf(Tensor::vector(vec![0.0; 3]));
        let s = cosine_sim(&mut tape, v, v).unwrap();
        assert!((tape.value(s).item() - 1.0).abs() < 1e-15);
        let s = cosine_sim(&mut tape, v, nv).unwrap();
        assert!((tape.value(s).item() + 1.0).abs() < 1e-15);
        let s = cosine_sim(&mut tape, e1, e2).unwrap();
        assert_eq!(tape.value(s).item(), 0.0);
        assert!(cosine_sim(&mut tape, v, zero).is_err());
    }

    #[test]
    fn simclr_b1_is_zero() {
        let mut tape = Tape::<f64>::new();
        let a = leaf(&mut tape, 1, 3, vec![0.1, 0.4, -0.2]);
        let b = leaf(&mut tape, 1, 3, vec![-0.5, 0.3, 0.9]);
        let batch = ContrastiveBatch::new(&tape, vec![a, b]).unwrap();
        let l = simclr_loss(&mut tape, &batch, 0.1).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn simclr_unit_vectors() {
        // sims are 1 (positive) and 0 (negative): −log(e / (e + 1)).
        let mut tape = Tape::<f64>::new();
        let a = leaf(&mut tape, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let b = leaf(&mut tape, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let batch = ContrastiveBatch::new(&tape, vec![a, b]).unwrap();
        let l = simclr_loss(&mut tape, &batch, 1.0).unwrap();
        let expected = -(E / (E + 1.0)).ln();
        assert!((tape.value(l).item() - expected).abs() < 1e-12);
        assert!((expected - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn simclr_identical_is_log_b() {
        for b in [2usize, 4, 8] {
            let mut tape = Tape::<f64>::new();
            let row = [0.2, -0.7, 1.1];
            let data: Vec<f64> = (0..b).flat_map(|_| row).collect();
            let v0 = leaf(&mut tape, b, 3, data.clone());
            let v1 = leaf(&mut tape, b, 3, data);
            let batch = ContrastiveBatch::new(&tape, vec![v0, v1]).unwrap();
            let l = simclr_loss(&mut tape, &batch, 0.1).unwrap();
            assert!((tape.value(l).item() - (b as f64).ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn simclr_bad_tau() {
        let mut tape = Tape::<f64>::new();
        let a = leaf(&mut tape, 1, 2, vec![1.0, 0.0]);
        let batch = ContrastiveBatch::new(&tape, vec![a, a]).unwrap();
        assert!(simclr_loss(&mut tape, &batch, 0.0).is_err());
    }

    #[test]
    fn simsiam_alignment_extremes() {
        let mut tape = Tape::<f64>::new();
        let pred = identity_predictor(&mut tape, 2);
        let h = leaf(&mut tape, 1, 2, vec![1.0, 2.0]);
        let batch = ContrastiveBatch::new(&tape, vec![h, h]).unwrap();
        let l = simsiam_loss(&mut tape, &batch, &pred).unwrap();
        assert!((tape.value(l).item() - (-1f64).exp()).abs() < 1e-6);

        // Flip the predictor so z ∝ −h: both D terms are −1.
        let mut tape = Tape::<f64>::new();
        let mut pred = identity_predictor(&mut tape, 2);
        pred.w2 = tape.leaf(Tensor::matrix(2, 2, vec![-1.0, 0.0, 0.0, -1.0]).unwrap());
        let h = leaf(&mut tape, 1, 2, vec![1.0, 2.0]);
        let batch = ContrastiveBatch::new(&tape, vec![h, h]).unwrap();
        let l = simsiam_loss(&mut tape, &batch, &pred).unwrap();
        assert!((tape.value(l).item() - E).abs() < 1e-6);
    }

    #[test]
    fn simsiam_target_path_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let mut rng = seeded(3);
        let w1 = tape.leaf(Tensor::randn(&[4, 4], 0.5, &mut rng));
        let w2 = tape.leaf(Tensor::randn(&[4, 4], 0.5, &mut rng));
        let on0 = tape.leaf(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let on1 = tape.leaf(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let tg0 = tape.leaf(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let tg1 = tape.leaf(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let online = ContrastiveBatch::new(&tape, vec![on0, on1]).unwrap();
        let target = ContrastiveBatch::new(&tape, vec![tg0, tg1]).unwrap();
        let pairs = simsiam_pair_values(&mut tape, &online, &target, &Predictor { w1, w2 }).unwrap();
        let l = tape.mean(pairs).unwrap();
        let g = tape.backward(l).unwrap();
        for v in [tg0, tg1] {
            assert!(g.wrt(v).data().iter().all(|x| x.to_bits() == 0));
        }
        assert!(g.wrt(on0).data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn cssl_requires_two_views() {
        let mut tape = Tape::<f64>::new();
        let mut rng = seeded(1);
        let pred = identity_predictor(&mut tape, 3);
        let views: Vec<Var> = (0..3).map(|_| tape.leaf(Tensor::randn(&[2, 3], 1.0, &mut rng))).collect();
        let batch = ContrastiveBatch::new(&tape, views).unwrap();
        assert!(cssl_loss(&mut tape, &batch, ClVariant::SimClr, 0.1, &pred).is_err());
        let one = ContrastiveBatch::new(&tape, vec![batch.views[0]]);
        assert!(one.is_err());
    }

    #[test]
    fn mlm_uniform_logits_is_log_v() {
        // Zero hidden states and zero bias give uniform logits.
        let v = 11;
        let mut tape = Tape::<f64>::new();
        let emb = tape.leaf(Tensor::randn(&[v, 4], 1.0, &mut seeded(2)));
        let bias = tape.leaf(Tensor::zeros(&[v]));
        let proj = OutputProjection { embedding: emb, bias };
        let h0 = tape.leaf(Tensor::zeros(&[5, 4]));
        let h1 = tape.leaf(Tensor::zeros(&[3, 4]));
        let l0 = [None, Some(6), None, Some(7), None];
        let l1 = [None, Some(9), None];
        let loss = mlm_loss(&mut tape, &[h0, h1], &[&l0, &l1], &proj).unwrap();
        assert!((tape.value(loss).item() - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn mlm_skips_empty_sequences_and_errors_when_all_empty() {
        let mut tape = Tape::<f64>::new();
        let emb = tape.leaf(Tensor::randn(&[8, 2], 1.0, &mut seeded(2)));
        let bias = tape.leaf(Tensor::zeros(&[8]));
        let proj = OutputProjection { embedding: emb, bias };
        let h = tape.leaf(Tensor::randn(&[3, 2], 1.0, &mut seeded(3)));
        let none = [None, None, None];
        assert!(matches!(mlm_loss(&mut tape, &[h], &[&none], &proj), Err(Error::Empty(_))));
        let some = [None, Some(5), None];
        let a = mlm_loss(&mut tape, &[h, h], &[&none, &some], &proj).unwrap();
        let b = mlm_loss(&mut tape, &[h], &[&some], &proj).unwrap();
        assert_eq!(tape.value(a).item(), tape.value(b).item());
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("simclr".parse::<ClVariant>().unwrap(), ClVariant::SimClr);
        assert_eq!("simsiam".parse::<ClVariant>().unwrap(), ClVariant::SimSiam);
        assert!("scl".parse::<ClVariant>().is_err());
        assert_eq!(serde_json::to_string(&ClVariant::SimSiam).unwrap(), "\"simsiam\"");
    }
}
