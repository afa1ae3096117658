//! Adversarial loss algebra.
//!
//! Discriminators emit logits `l`; the probability is `sigmoid(l)`. The
//! log-likelihood terms are evaluated in the stable forms
//! `-log D = softplus(-l)` and `-log(1 - D) = softplus(l)`.
//!
//! Stage indices in this module are 1-based, matching `i ∈ 1..=K`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use textmask_tensor::{Scalar, Tape, Tensor, Var};

use crate::netstack::{DiscLogits, DiscriminatorStage};
use crate::Error;

/// Where a patch came from and whether it carries gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub source_stage: usize,
    pub target_stage: usize,
    pub side: usize,
    pub top: usize,
    pub left: usize,
    pub detach: bool,
}

/// Uniform random `side x side` crop of a `[N, C, H, W]` image batch. The
/// same origin is used for the whole batch.
pub fn sample_patch<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    image: Var,
    side: usize,
    rng: &mut R,
    detach: bool,
) -> Result<(Var, PatchSpec), Error> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 4 {
        return Err(Error::Input(format!("patch source must be [N, C, H, W], got {shape:?}")));
    }
    let (h, w) = (shape[2], shape[3]);
    if side == 0 || side > h || side > w {
        return Err(Error::Input(format!("patch side {side} does not fit a {h}x{w} image")));
    }
    let top = rng.random_range(0..=h - side);
    let left = rng.random_range(0..=w - side);
    let src = if detach { tape.detach(image) } else { image };
    let patch = if side == h && side == w { src } else { tape.crop(src, top, left, side, side) };
    let spec = PatchSpec { source_stage: 0, target_stage: 0, side, top, left, detach };
    Ok((patch, spec))
}

/// `-mean(log D)` for logits of samples that should be judged real.
pub fn nll_real<T: Scalar>(tape: &mut Tape<'_, T>, logits: Var) -> Var {
    let neg = tape.scale(logits, -T::one());
    let sp = tape.softplus(neg);
    tape.mean(sp)
}

/// `-mean(log(1 - D))` for logits of samples that should be judged fake.
pub fn nll_fake<T: Scalar>(tape: &mut Tape<'_, T>, logits: Var) -> Var {
    let sp = tape.softplus(logits);
    tape.mean(sp)
}

fn zero<T: Scalar>(tape: &mut Tape<'_, T>) -> Var {
    tape.constant(Tensor::scalar(T::zero()))
}

fn sum_all<T: Scalar>(tape: &mut Tape<'_, T>, terms: &[Var]) -> Var {
    match terms.split_first() {
        None => zero(tape),
        Some((&first, rest)) => rest.iter().fold(first, |acc, &t| tape.add(acc, t)),
    }
}

/// A scalar loss node and the patches that went into it.
pub struct PatchLoss {
    pub loss: Var,
    pub patches: Vec<PatchSpec>,
}

/// Discriminator-side cross-stage loss for stage `i`: real and generated
/// images from every finer stage `k > i` are cropped to `D_i`'s input size,
/// and `D_i`'s unconditional head is trained to tell them apart.
///
/// `-Σ_{k=i+1..K} [ mean log D_i(P_k) + mean log(1 - D_i(P'_k)) ]`
///
/// Generated patches are detached. For `i = K` the sum is empty and the
/// loss is a constant zero.
pub fn refined_d_loss<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    i: usize,
    real: &[Var],
    fake: &[Var],
    d_i: &DiscriminatorStage,
    rng: &mut R,
) -> Result<PatchLoss, Error> {
    let k_max = real.len();
    if fake.len() != k_max || i == 0 || i > k_max {
        return Err(Error::Input(format!("stage {i} out of range for pyramids of depth {} and {}", k_max, fake.len())));
    }
    let side = d_i.resolution();
    let mut terms = Vec::new();
    let mut patches = Vec::new();
    for k in i + 1..=k_max {
        let (p_real, mut s_real) = sample_patch(tape, real[k - 1], side, rng, true)?;
        let (p_fake, mut s_fake) = sample_patch(tape, fake[k - 1], side, rng, true)?;
        let l_real = d_i.forward(tape, p_real, None)?.unconditional;
        let l_fake = d_i.forward(tape, p_fake, None)?.unconditional;
        terms.push(nll_real(tape, l_real));
        terms.push(nll_fake(tape, l_fake));
        for s in [&mut s_real, &mut s_fake] {
            s.source_stage = k;
            s.target_stage = i;
        }
        patches.extend([s_real, s_fake]);
    }
    Ok(PatchLoss { loss: sum_all(tape, &terms), patches })
}

/// Generator-side cross-stage loss for stage `i > 1`: the stage-`i` output
/// is cropped to each coarser discriminator's input size, and the generator
/// is rewarded when `D_k` judges the crop real.
///
/// `-Σ_{k=1..i-1} mean log D_k(P'_k)`
///
/// Patches keep their gradient path. Returns `None` for `i = 1`, where the
/// term does not exist.
pub fn refined_g_loss<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    i: usize,
    fake_i: Var,
    discriminators: &[DiscriminatorStage],
    rng: &mut R,
) -> Result<Option<PatchLoss>, Error> {
    if i == 0 || i > discriminators.len() {
        return Err(Error::Input(format!("stage {i} out of range for {} discriminators", discriminators.len())));
    }
    if i == 1 {
        return Ok(None);
    }
    let mut terms = Vec::new();
    let mut patches = Vec::new();
    for (k, d_k) in discriminators[..i - 1].iter().enumerate() {
        let (p, mut spec) = sample_patch(tape, fake_i, d_k.resolution(), rng, false)?;
        let l = d_k.forward(tape, p, None)?.unconditional;
        terms.push(nll_real(tape, l));
        spec.source_stage = i;
        spec.target_stage = k + 1;
        patches.push(spec);
    }
    Ok(Some(PatchLoss { loss: sum_all(tape, &terms), patches }))
}

/// Mixed images for the structure loss.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositePair<X> {
    /// Generated foreground on real background.
    pub x1: X,
    /// Real foreground on generated background.
    pub x2: X,
}

fn check_composite_shapes(real: &[usize], fake: &[usize], mask: &[usize]) -> Result<(), Error> {
    let ok = real.len() == 4
        && real == fake
        && mask.len() == 4
        && mask[0] == real[0]
        && mask[1] == 1
        && mask[2..] == real[2..];
    if ok {
        Ok(())
    } else {
        Err(Error::Input(format!("composite shapes differ: real {real:?}, fake {fake:?}, mask {mask:?}")))
    }
}

fn expand_mask<T: Scalar>(mask: &Tensor<T>, channels: usize) -> Tensor<T> {
    let (n, plane) = (mask.shape()[0], mask.shape()[2] * mask.shape()[3]);
    let mut out = Vec::with_capacity(n * channels * plane);
    for b in 0..n {
        let m = &mask.data()[b * plane..(b + 1) * plane];
        for _ in 0..channels {
            out.extend_from_slice(m);
        }
    }
    Tensor::new(&[n, channels, mask.shape()[2], mask.shape()[3]], out).expect("mask expansion")
}

/// `x1 = fake·m + real·(1-m)`, `x2 = real·m + fake·(1-m)` for concrete
/// `[N, C, H, W]` images and a binary `[N, 1, H, W]` mask.
pub fn make_composites<T: Scalar>(
    real: &Tensor<T>,
    fake: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<CompositePair<Tensor<T>>, Error> {
    check_composite_shapes(real.shape(), fake.shape(), mask.shape())?;
    let m = expand_mask(mask, real.shape()[1]);
    let mut x1 = Vec::with_capacity(real.numel());
    let mut x2 = Vec::with_capacity(real.numel());
    for ((&r, &f), &m) in real.data().iter().zip(fake.data()).zip(m.data()) {
        let inv = T::one() - m;
        x1.push(f * m + r * inv);
        x2.push(r * m + f * inv);
    }
    Ok(CompositePair { x1: Tensor::new(real.shape(), x1)?, x2: Tensor::new(real.shape(), x2)? })
}

/// Composites recorded on a tape; gradients flow into `fake` unless it was
/// detached by the caller.
pub fn composite_vars<T: Scalar>(
    tape: &mut Tape<'_, T>,
    real: Var,
    fake: Var,
    mask: &Tensor<T>,
) -> Result<CompositePair<Var>, Error> {
    check_composite_shapes(tape.shape(real), tape.shape(fake), mask.shape())?;
    let m = expand_mask(mask, tape.shape(real)[1]);
    let inv = m.map(|v| T::one() - v);
    let m = tape.constant(m);
    let inv = tape.constant(inv);
    let fm = tape.mul(fake, m);
    let ri = tape.mul(real, inv);
    let rm = tape.mul(real, m);
    let fi = tape.mul(fake, inv);
    let x1 = tape.add(fm, ri);
    let x2 = tape.add(rm, fi);
    Ok(CompositePair { x1, x2 })
}

/// `-[mean log(1 - D(x1)) + mean log(1 - D(x2))]` on the unconditional
/// head: both composites are fakes.
pub fn structure_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    d_i: &DiscriminatorStage,
    pair: &CompositePair<Var>,
) -> Result<Var, Error> {
    let l1 = d_i.forward(tape, pair.x1, None)?.unconditional;
    let l2 = d_i.forward(tape, pair.x2, None)?.unconditional;
    let a = nll_fake(tape, l1);
    let b = nll_fake(tape, l2);
    Ok(tape.add(a, b))
}

/// Generator counterpart of [`structure_loss`]: composites should pass as
/// real. Only used when the optional generator term is enabled.
pub fn structure_g_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    d_i: &DiscriminatorStage,
    pair: &CompositePair<Var>,
) -> Result<Var, Error> {
    let l1 = d_i.forward(tape, pair.x1, None)?.unconditional;
    let l2 = d_i.forward(tape, pair.x2, None)?.unconditional;
    let a = nll_real(tape, l1);
    let b = nll_real(tape, l2);
    Ok(tape.add(a, b))
}

/// Discriminator base loss from head logits.
///
/// Unconditional head: `-[log D(real) + log(1 - D(fake))]`. Conditional
/// head: `-log D(real, s)` plus the mean of `-log(1 - D(fake, s))` and
/// `-log(1 - D(real, s_mismatched))` when mismatched logits are given,
/// otherwise just `-log(1 - D(fake, s))`.
pub fn base_d_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    real: &DiscLogits,
    fake: &DiscLogits,
    mismatched: Option<Var>,
) -> Var {
    let ur = nll_real(tape, real.unconditional);
    let uf = nll_fake(tape, fake.unconditional);
    let mut total = tape.add(ur, uf);
    if let (Some(cr), Some(cf)) = (real.conditional, fake.conditional) {
        let cr = nll_real(tape, cr);
        let cf = nll_fake(tape, cf);
        let negatives = match mismatched {
            Some(cm) => {
                let cm = nll_fake(tape, cm);
                let s = tape.add(cf, cm);
                tape.scale(s, T::lit(0.5))
            }
            None => cf,
        };
        let cond = tape.add(cr, negatives);
        total = tape.add(total, cond);
    }
    total
}

/// Generator base loss: `-log D(fake)` over both heads.
pub fn base_g_loss<T: Scalar>(tape: &mut Tape<'_, T>, fake: &DiscLogits) -> Var {
    let mut total = nll_real(tape, fake.unconditional);
    if let Some(c) = fake.conditional {
        let c = nll_real(tape, c);
        total = tape.add(total, c);
    }
    total
}

/// Both base terms at one stage. The discriminator term sees `fake`
/// detached; the generator term keeps the gradient path.
pub fn base_adversarial_losses<T: Scalar>(
    tape: &mut Tape<'_, T>,
    d_i: &DiscriminatorStage,
    real: Var,
    fake: Var,
    sentence: Var,
    mismatched_sentence: Option<Var>,
) -> Result<(Var, Var), Error> {
    let real_logits = d_i.forward(tape, real, Some(sentence))?;
    let fake_detached = tape.detach(fake);
    let fake_logits_d = d_i.forward(tape, fake_detached, Some(sentence))?;
    let mismatched = match mismatched_sentence {
        Some(s) => d_i.forward(tape, real, Some(s))?.conditional,
        None => None,
    };
    let d_loss = base_d_loss(tape, &real_logits, &fake_logits_d, mismatched);
    let fake_logits_g = d_i.forward(tape, fake, Some(sentence))?;
    let g_loss = base_g_loss(tape, &fake_logits_g);
    Ok((d_loss, g_loss))
}

/// Symmetric contrastive loss between `[N, D]` image and sentence
/// embeddings: cosine similarities scaled by `scale`, softmax cross-entropy
/// with the matching pair as target in both directions.
pub fn text_match_loss<T: Scalar>(tape: &mut Tape<'_, T>, images: Var, sentences: Var, scale: f64) -> Var {
    let n = tape.shape(images)[0];
    let targets: Vec<usize> = (0..n).collect();
    let a = tape.l2_normalize_rows(images);
    let b = tape.l2_normalize_rows(sentences);
    let ab = tape.matmul_t(a, b);
    let ab = tape.scale(ab, T::lit(scale));
    let ba = tape.matmul_t(b, a);
    let ba = tape.scale(ba, T::lit(scale));
    let l1 = tape.softmax_cross_entropy(ab, &targets);
    let l2 = tape.softmax_cross_entropy(ba, &targets);
    let s = tape.add(l1, l2);
    tape.scale(s, T::lit(0.5))
}

/// Weights of the extra terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Cross-stage patch losses.
    pub refined: f64,
    /// Structure loss.
    pub structure: f64,
    /// Text-match loss.
    pub matching: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { refined: 1.0, structure: 1.0, matching: 1.0 }
    }
}

/// Scalar loss values at one stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLosses {
    /// 1-based.
    pub stage: usize,
    pub base_d: f64,
    pub base_g: f64,
    pub refined_d: f64,
    /// Absent at stage 1.
    pub refined_g: Option<f64>,
    pub structure: f64,
    /// Only the last stage carries the text-match term.
    pub text_match: Option<f64>,
}

impl StageLosses {
    /// `(name, value)` for every present term.
    pub fn terms(&self) -> Vec<(&'static str, f64)> {
        let mut t = vec![
            ("base_d", self.base_d),
            ("base_g", self.base_g),
            ("refined_d", self.refined_d),
            ("structure", self.structure),
        ];
        if let Some(v) = self.refined_g {
            t.push(("refined_g", v));
        }
        if let Some(v) = self.text_match {
            t.push(("text_match", v));
        }
        t
    }
}

/// Per-step record of every loss term.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub stages: Vec<StageLosses>,
    pub weights: Option<LossWeights>,
    /// Encoder matching loss on real pairs.
    pub encoder_match: f64,
}

#[derive(Serialize)]
struct LossLine<'a> {
    step: u64,
    stage: usize,
    term: &'a str,
    value: f64,
    weight: f64,
}

impl LossReport {
    pub fn weights(&self) -> LossWeights {
        self.weights.unwrap_or_default()
    }

    /// Fails with the first non-finite term.
    pub fn check_finite(&self) -> Result<(), Error> {
        for s in &self.stages {
            for (name, v) in s.terms() {
                if !v.is_finite() {
                    return Err(Error::NonFinite { term: name.to_string(), stage: s.stage });
                }
            }
        }
        if !self.encoder_match.is_finite() {
            return Err(Error::NonFinite { term: "encoder_match".into(), stage: 0 });
        }
        Ok(())
    }

    /// One JSON object per term.
    pub fn json_lines(&self) -> Vec<String> {
        let w = self.weights();
        let mut out = Vec::new();
        for s in &self.stages {
            for (term, value) in s.terms() {
                let weight = match term {
                    "refined_d" | "refined_g" => w.refined,
                    "structure" => w.structure,
                    "text_match" => w.matching,
                    _ => 1.0,
                };
                let line = LossLine { step: self.step, stage: s.stage, term, value, weight };
                out.push(serde_json::to_string(&line).expect("plain struct serializes"));
            }
        }
        let line =
            LossLine { step: self.step, stage: 0, term: "encoder_match", value: self.encoder_match, weight: 1.0 };
        out.push(serde_json::to_string(&line).expect("plain struct serializes"));
        out
    }

    /// Per-stage discriminator and generator totals.
    pub fn totals(&self) -> Result<(Vec<f64>, Vec<f64>), Error> {
        total_losses(&self.stages, &self.weights())
    }
}

/// `total_d_i = base_d + λ_refined·refined_d + λ_structure·structure` and
/// `total_g_i = base_g + λ_refined·refined_g + λ_matching·text_match`.
pub fn total_losses(stages: &[StageLosses], weights: &LossWeights) -> Result<(Vec<f64>, Vec<f64>), Error> {
    let mut d = Vec::with_capacity(stages.len());
    let mut g = Vec::with_capacity(stages.len());
    for s in stages {
        for (name, v) in s.terms() {
            if v.is_nan() {
                return Err(Error::NonFinite { term: name.to_string(), stage: s.stage });
            }
        }
        d.push(s.base_d + weights.refined * s.refined_d + weights.structure * s.structure);
        g.push(
            s.base_g + weights.refined * s.refined_g.unwrap_or(0.0) + weights.matching * s.text_match.unwrap_or(0.0),
        );
    }
    Ok((d, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netstack::StageSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use textmask_tensor::{ParamStore64, Tensor64};

    const LN2: f64 = std::f64::consts::LN_2;

    /// A discriminator whose weights are all zero outputs logit 0, i.e. D = 0.5.
    fn half_disc(store: &mut ParamStore64, name: &str, r: usize) -> DiscriminatorStage {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d =
            DiscriminatorStage::new(store, name, &StageSpec { resolution: r, hidden: 4, disc_width: 2 }, 4, &mut rng);
        for id in store.with_prefix(name) {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        d
    }

    #[test]
    fn patch_bounds_and_whole_image() {
        let store = ParamStore64::new();
        let mut tape = Tape::frozen(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = tape.constant(Tensor64::randn(&[2, 3, 32, 32], 1.0, &mut rng));
        for _ in 0..50 {
            let (p, s) = sample_patch(&mut tape, img, 8, &mut rng, false).unwrap();
            assert_eq!(tape.shape(p), [2, 3, 8, 8]);
            assert!(s.top <= 24 && s.left <= 24);
        }
        let (p, s) = sample_patch(&mut tape, img, 32, &mut rng, true).unwrap();
        assert_eq!((s.top, s.left), (0, 0));
        assert_eq!(tape.value(p), tape.value(img));
        assert!(sample_patch(&mut tape, img, 33, &mut rng, true).is_err());
    }

    #[test]
    fn half_probability_fixtures() {
        let mut store = ParamStore64::new();
        let d1 = half_disc(&mut store, "d1", 8);
        let d2 = half_disc(&mut store, "d2", 16);
        let mut tape = Tape::frozen(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let real = [
            tape.constant(Tensor64::randn(&[2, 3, 8, 8], 1.0, &mut rng)),
            tape.constant(Tensor64::randn(&[2, 3, 16, 16], 1.0, &mut rng)),
        ];
        let fake = [
            tape.constant(Tensor64::randn(&[2, 3, 8, 8], 1.0, &mut rng)),
            tape.constant(Tensor64::randn(&[2, 3, 16, 16], 1.0, &mut rng)),
        ];
        let zd = refined_d_loss(&mut tape, 1, &real, &fake, &d1, &mut rng).unwrap();
        assert!((tape.value(zd.loss).item() - 2.0 * LN2).abs() < 1e-12);
        let zd2 = refined_d_loss(&mut tape, 2, &real, &fake, &d2, &mut rng).unwrap();
        assert_eq!(tape.value(zd2.loss).item(), 0.0);
        assert!(zd2.patches.is_empty());

        let ds = [d1.clone(), d2.clone()];
        assert!(refined_g_loss(&mut tape, 1, fake[0], &ds, &mut rng).unwrap().is_none());
        let zg = refined_g_loss(&mut tape, 2, fake[1], &ds, &mut rng).unwrap().unwrap();
        assert!((tape.value(zg.loss).item() - LN2).abs() < 1e-12);

        let mask = half_mask(2, 8);
        let pair = composite_vars(&mut tape, real[0], fake[0], &mask).unwrap();
        let s = structure_loss(&mut tape, &d1, &pair).unwrap();
        assert!((tape.value(s).item() - 2.0 * LN2).abs() < 1e-12);

        let r = d1.forward(&mut tape, real[0], None).unwrap();
        let f = d1.forward(&mut tape, fake[0], None).unwrap();
        let b = base_d_loss(&mut tape, &r, &f, None);
        assert!((tape.value(b).item() - 2.0 * LN2).abs() < 1e-12);
    }

    /// Left half foreground.
    fn half_mask(n: usize, side: usize) -> Tensor64 {
        let mut t = Tensor64::zeros(&[n, 1, side, side]);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = if (i % side) < side / 2 { 1.0 } else { 0.0 };
        }
        t
    }

    #[test]
    fn composite_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let real = Tensor64::randn(&[1, 3, 4, 4], 1.0, &mut rng);
        let fake = Tensor64::randn(&[1, 3, 4, 4], 1.0, &mut rng);
        let ones = Tensor64::ones(&[1, 1, 4, 4]);
        let zeros = Tensor64::zeros(&[1, 1, 4, 4]);
        let p = make_composites(&real, &fake, &ones).unwrap();
        assert_eq!((&p.x1, &p.x2), (&fake, &real));
        let p = make_composites(&real, &fake, &zeros).unwrap();
        assert_eq!((&p.x1, &p.x2), (&real, &fake));
        let p = make_composites(&real, &real, &half_mask(1, 4)).unwrap();
        assert_eq!((&p.x1, &p.x2), (&real, &real));
        assert!(make_composites(&real, &fake, &Tensor64::ones(&[1, 1, 2, 2])).is_err());
    }

    #[test]
    fn totals_and_nan_reporting() {
        let s = StageLosses {
            stage: 2,
            base_d: 1.0,
            base_g: 1.0,
            refined_d: 1.0,
            refined_g: Some(1.0),
            structure: 1.0,
            text_match: Some(1.0),
        };
        let (d, g) = total_losses(std::slice::from_ref(&s), &LossWeights::default()).unwrap();
        assert_eq!((d[0], g[0]), (3.0, 3.0));
        let zero = LossWeights { refined: 0.0, structure: 0.0, matching: 0.0 };
        let (d, g) = total_losses(std::slice::from_ref(&s), &zero).unwrap();
        assert_eq!((d[0], g[0]), (1.0, 1.0));
        let bad = StageLosses { structure: f64::NAN, ..s };
        match total_losses(&[bad], &zero) {
            Err(Error::NonFinite { term, stage }) => assert_eq!((term.as_str(), stage), ("structure", 2)),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn report_lines_are_json() {
        let report = LossReport {
            step: 7,
            stages: vec![StageLosses { stage: 1, ..Default::default() }],
            weights: Some(LossWeights::default()),
            encoder_match: 0.5,
        };
        let lines = report.json_lines();
        assert_eq!(lines.len(), 5);
        let v: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
        assert_eq!(v["step"], 7);
        assert_eq!(v["term"], "base_d");
    }
}
