//! Fixtures and checks shared by the integration tests and the acceptance
//! runner. Every check returns a one-line summary or a failure message.
#![allow(dead_code)]

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textmask::data::{batch_stream, generate_shapeworld, Batch, Dataset, ShapeWorldConfig};
use textmask::eval::{inception_score, r_precision};
use textmask::losses::{
    base_adversarial_losses, composite_vars, make_composites, refined_d_loss, refined_g_loss, structure_loss,
};
use textmask::mask::acm_forward;
use textmask::model::{Model, ModelConfig};
use textmask::tensor::{ParamStore, Tape, Tensor, Var};
use textmask::text::{preprocess, CaptionOptions, LexiconTagger, PosTagger};
use textmask::train::{run, training_vocabulary, TrainConfig, TrainData, TrainState};
use textmask::{Acm, DiscriminatorStage, SegmentationMask, StagePlan, StageSpec, Vocabulary};

pub type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- losses

/// Discriminators, image pyramids, masks and sentences for one fixture.
pub struct LossFixture {
    pub store: ParamStore<f64>,
    pub discs: Vec<DiscriminatorStage>,
    pub reals: Vec<Tensor<f64>>,
    pub fakes: Vec<Tensor<f64>>,
    pub masks: Vec<Tensor<f64>>,
    pub sentence: Tensor<f64>,
    pub mismatched: Tensor<f64>,
}

pub const TEXT_DIM: usize = 6;

fn random_mask(n: usize, side: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let p: f64 = rng.random_range(0.0..1.0);
    let data = (0..n * side * side).map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[n, 1, side, side], data).unwrap()
}

pub fn loss_fixture(seed: u64) -> LossFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=3);
    let mut store = ParamStore::new();
    let discs: Vec<DiscriminatorStage> = [8, 16, 32]
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let spec = StageSpec { resolution: r, hidden: 4, disc_width: 4 };
            DiscriminatorStage::new(&mut store, &format!("discriminator/stage{}", i + 1), &spec, TEXT_DIM, &mut rng)
        })
        .collect();
    // widen the logit range beyond what a fresh initialisation gives
    let gain = rng.random_range(0.5..3.0);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get(id).map(|v| v * gain);
        *store.get_mut(id) = t;
    }
    let image = |r: usize, rng: &mut ChaCha8Rng| Tensor::uniform(&[n, 3, r, r], 1.0, rng);
    let reals = [8, 16, 32].iter().map(|&r| image(r, &mut rng)).collect();
    let fakes = [8, 16, 32].iter().map(|&r| image(r, &mut rng)).collect();
    let masks = [8, 16, 32].iter().map(|&r| random_mask(n, r, &mut rng)).collect();
    let sentence = Tensor::randn(&[n, TEXT_DIM], 1.0, &mut rng);
    let mismatched = Tensor::randn(&[n, TEXT_DIM], 1.0, &mut rng);
    LossFixture { store, discs, reals, fakes, masks, sentence, mismatched }
}

/// `[N, C, side, side]` window of `t` at `(top, left)`.
pub fn crop(t: &Tensor<f64>, top: usize, left: usize, side: usize) -> Tensor<f64> {
    let s = t.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(n * c * side * side);
    for b in 0..n {
        for ch in 0..c {
            for y in top..top + side {
                for x in left..left + side {
                    out.push(t.data()[((b * c + ch) * h + y) * w + x]);
                }
            }
        }
    }
    Tensor::new(&[n, c, side, side], out).unwrap()
}

fn neg_log_mean(p: &[f64]) -> f64 {
    p.iter().map(|v| -v.ln()).sum::<f64>() / p.len() as f64
}

fn neg_log_one_minus_mean(p: &[f64]) -> f64 {
    p.iter().map(|v| -(1.0 - v).ln()).sum::<f64>() / p.len() as f64
}

fn p_uncond(d: &DiscriminatorStage, store: &ParamStore<f64>, x: &Tensor<f64>) -> Vec<f64> {
    d.score(store, x, None).unwrap().unconditional
}

fn p_cond(d: &DiscriminatorStage, store: &ParamStore<f64>, x: &Tensor<f64>, s: &Tensor<f64>) -> Vec<f64> {
    d.score(store, x, Some(s)).unwrap().conditional.unwrap()
}

/// Composite pair computed element by element.
pub fn scalar_composites(real: &Tensor<f64>, fake: &Tensor<f64>, mask: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let s = real.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let mut x1 = real.clone();
    let mut x2 = real.clone();
    for b in 0..n {
        for ch in 0..c {
            for p in 0..plane {
                let idx = (b * c + ch) * plane + p;
                let m = mask.data()[b * plane + p];
                let (r, f) = (real.data()[idx], fake.data()[idx]);
                x1.data_mut()[idx] = if m == 1.0 { f } else { r };
                x2.data_mut()[idx] = if m == 1.0 { r } else { f };
            }
        }
    }
    (x1, x2)
}

/// Every loss term against a scalar recomputation from discriminator
/// probabilities, crops and composites.
pub fn check_loss_oracles(fixtures: u64) -> Check {
    let mut worst: f64 = 0.0;
    let mut vacuous = 0;
    for seed in 0..fixtures {
        let f = loss_fixture(seed);
        let k = f.discs.len();
        let mut tape = Tape::frozen(&f.store);
        let reals: Vec<Var> = f.reals.iter().map(|t| tape.constant(t.clone())).collect();
        let fakes: Vec<Var> = f.fakes.iter().map(|t| tape.constant(t.clone())).collect();
        let s = tape.constant(f.sentence.clone());
        let sm = tape.constant(f.mismatched.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
        for i in 1..=k {
            let d = &f.discs[i - 1];

            let z = refined_d_loss(&mut tape, i, &reals, &fakes, d, &mut rng).map_err(err)?;
            ensure(z.patches.len() == 2 * (k - i), || format!("stage {i}: {} discriminator patches", z.patches.len()))?;
            let mut oracle = 0.0;
            for pair in z.patches.chunks(2) {
                let (pr, pf) = (&pair[0], &pair[1]);
                ensure(pr.side == d.resolution() && pr.detach && pf.detach, || format!("bad patch {pr:?}"))?;
                let cr = crop(&f.reals[pr.source_stage - 1], pr.top, pr.left, pr.side);
                let cf = crop(&f.fakes[pf.source_stage - 1], pf.top, pf.left, pf.side);
                oracle +=
                    neg_log_mean(&p_uncond(d, &f.store, &cr)) + neg_log_one_minus_mean(&p_uncond(d, &f.store, &cf));
            }
            let got = tape.value(z.loss).item();
            if i == k {
                ensure(got == 0.0, || format!("vacuous discriminator term is {got}"))?;
                vacuous += 1;
            }
            worst = worst.max((got - oracle).abs());

            match refined_g_loss(&mut tape, i, fakes[i - 1], &f.discs, &mut rng).map_err(err)? {
                None => {
                    ensure(i == 1, || format!("generator patch term missing at stage {i}"))?;
                    vacuous += 1;
                }
                Some(zg) => {
                    ensure(i > 1 && zg.patches.len() == i - 1, || {
                        format!("stage {i}: {} generator patches", zg.patches.len())
                    })?;
                    let mut oracle = 0.0;
                    for p in &zg.patches {
                        let dk = &f.discs[p.target_stage - 1];
                        ensure(p.side == dk.resolution() && !p.detach, || format!("bad patch {p:?}"))?;
                        let c = crop(&f.fakes[i - 1], p.top, p.left, p.side);
                        oracle += neg_log_mean(&p_uncond(dk, &f.store, &c));
                    }
                    worst = worst.max((tape.value(zg.loss).item() - oracle).abs());
                }
            }

            let pair = composite_vars(&mut tape, reals[i - 1], fakes[i - 1], &f.masks[i - 1]).map_err(err)?;
            let sl = structure_loss(&mut tape, d, &pair).map_err(err)?;
            let (x1, x2) = scalar_composites(&f.reals[i - 1], &f.fakes[i - 1], &f.masks[i - 1]);
            let oracle = neg_log_one_minus_mean(&p_uncond(d, &f.store, &x1))
                + neg_log_one_minus_mean(&p_uncond(d, &f.store, &x2));
            worst = worst.max((tape.value(sl).item() - oracle).abs());

            let (dl, gl) =
                base_adversarial_losses(&mut tape, d, reals[i - 1], fakes[i - 1], s, Some(sm)).map_err(err)?;
            let (r, fk) = (&f.reals[i - 1], &f.fakes[i - 1]);
            let d_oracle = neg_log_mean(&p_uncond(d, &f.store, r))
                + neg_log_one_minus_mean(&p_uncond(d, &f.store, fk))
                + neg_log_mean(&p_cond(d, &f.store, r, &f.sentence))
                + 0.5
                    * (neg_log_one_minus_mean(&p_cond(d, &f.store, fk, &f.sentence))
                        + neg_log_one_minus_mean(&p_cond(d, &f.store, r, &f.mismatched)));
            let g_oracle =
                neg_log_mean(&p_uncond(d, &f.store, fk)) + neg_log_mean(&p_cond(d, &f.store, fk, &f.sentence));
            worst = worst.max((tape.value(dl).item() - d_oracle).abs());
            worst = worst.max((tape.value(gl).item() - g_oracle).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("max |Δ| = {worst:.3e} exceeds 1e-6"))?;
    Ok(format!("{fixtures} fixtures, {vacuous} vacuous cases, max |Δ| = {worst:.2e}"))
}

// ------------------------------------------------------------- gradients

pub fn tiny_model(seed: u64, stages: usize) -> Model<f64> {
    let resolutions: Vec<usize> = (0..stages).map(|i| 8 << i).collect();
    let plan = StagePlan::custom(&resolutions, &vec![6; stages], &vec![4; stages]);
    let config = ModelConfig { plan, embed_dim: 6, text_hidden: 3, image_encoder_width: 4, ..ModelConfig::default() };
    let vocab = Vocabulary::from_tokens(vec!["red".into(), "circle".into()]);
    Model::new(config, vocab, seed).unwrap()
}

struct GradInputs {
    noise: Tensor<f64>,
    sentence: Tensor<f64>,
    masks: Vec<Tensor<f64>>,
    reals: Vec<Tensor<f64>>,
}

fn grad_inputs(model: &Model<f64>, seed: u64) -> GradInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2;
    let plan = model.plan();
    GradInputs {
        noise: model.noise(n, &mut rng),
        sentence: model.sentence_features(&[vec![2, 3], vec![3]]),
        masks: (0..plan.k()).map(|i| random_mask(n, plan.fusion_resolution(i), &mut rng)).collect(),
        reals: plan.resolutions().iter().map(|&r| Tensor::uniform(&[n, 3, r, r], 1.0, &mut rng)).collect(),
    }
}

enum Term {
    RefinedD(usize),
    RefinedG(usize),
}

/// Records one cross-stage term with every generator and discriminator
/// parameter trainable.
fn record<'a>(
    tape: &mut Tape<'a, f64>,
    model: &Model<f64>,
    inputs: &GradInputs,
    term: &Term,
    seed: u64,
) -> Option<Var> {
    let z = tape.constant(inputs.noise.clone());
    let s = tape.constant(inputs.sentence.clone());
    let m: Vec<Var> = inputs.masks.iter().map(|t| tape.constant(t.clone())).collect();
    let out = model.generator.forward(tape, z, s, &m).unwrap();
    let reals: Vec<Var> = inputs.reals.iter().map(|t| tape.constant(t.clone())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match *term {
        Term::RefinedD(i) => {
            Some(refined_d_loss(tape, i, &reals, &out.images, &model.discriminators[i - 1], &mut rng).unwrap().loss)
        }
        Term::RefinedG(i) => {
            refined_g_loss(tape, i, out.images[i - 1], &model.discriminators, &mut rng).unwrap().map(|z| z.loss)
        }
    }
}

const FD_ENTRIES: usize = 24;
// a kink shifts the central difference by half the slope jump it causes
const KINK_TOLERANCE: f64 = 1e-3;

fn trainable(name: &str) -> bool {
    name.starts_with("generator/") || name.starts_with("discriminator/")
}

fn term_value(model: &Model<f64>, inputs: &GradInputs, term: &Term, seed: u64) -> f64 {
    let mut tape = Tape::new(&model.store, trainable);
    let v = record(&mut tape, model, inputs, term, seed).unwrap();
    tape.value(v).item()
}

/// Zero generator gradient through detached patches, non-zero gradient
/// through non-detached ones, and finite-difference agreement.
pub fn check_gradient_semantics(fixtures: u64) -> Check {
    let (mut fd_checked, mut kinks) = (0, 0);
    let mut worst_rel: f64 = 0.0;
    for seed in 0..fixtures {
        let mut model = tiny_model(seed, 3);
        let inputs = grad_inputs(&model, seed + 100);
        let k = model.plan().k();
        let gen_ids = model.store.with_prefix("generator/");

        for i in 1..=k {
            let mut tape = Tape::new(&model.store, trainable);
            let loss = record(&mut tape, &model, &inputs, &Term::RefinedD(i), seed).unwrap();
            let grads = tape.backward(loss);
            for &id in &gen_ids {
                if let Some(g) = grads.param(id) {
                    ensure(g.data().iter().all(|v| *v == 0.0), || {
                        format!("discriminator patch term reaches {} at stage {i}", model.store.name(id))
                    })?;
                }
            }
            if i < k {
                let d_ids = model.store.with_prefix(&format!("discriminator/stage{i}/"));
                let norm: f64 =
                    d_ids.iter().filter_map(|&id| grads.param(id)).flat_map(|g| g.data().to_vec()).map(|v| v * v).sum();
                ensure(norm > 0.0, || format!("discriminator {i} gets no gradient from its patch term"))?;
            }
        }

        for i in 2..=k {
            let stage_ids = model.store.with_prefix(&format!("generator/stage{i}/"));
            let grads = {
                let mut tape = Tape::new(&model.store, trainable);
                let loss = record(&mut tape, &model, &inputs, &Term::RefinedG(i), seed).unwrap();
                tape.backward(loss)
            };
            let entries: Vec<(textmask::tensor::ParamId, usize, f64)> = stage_ids
                .iter()
                .filter_map(|&id| grads.param(id).map(|g| (id, g)))
                .flat_map(|(id, g)| g.data().iter().enumerate().map(move |(j, &v)| (id, j, v)).collect::<Vec<_>>())
                .collect();
            let norm: f64 = entries.iter().map(|e| e.2 * e.2).sum();
            ensure(norm > 0.0, || format!("generator patch term has no gradient for stage {i}"))?;

            if i == k {
                let mut pick = ChaCha8Rng::seed_from_u64(seed + 900);
                let base = term_value(&model, &inputs, &Term::RefinedG(i), seed);
                let eps = 1e-4;
                for _ in 0..FD_ENTRIES {
                    let &(id, j, analytic) = entries.choose(&mut pick).unwrap();
                    let orig = model.store.get(id).data()[j];
                    model.store.get_mut(id).data_mut()[j] = orig + eps;
                    let plus = term_value(&model, &inputs, &Term::RefinedG(i), seed);
                    model.store.get_mut(id).data_mut()[j] = orig - eps;
                    let minus = term_value(&model, &inputs, &Term::RefinedG(i), seed);
                    model.store.get_mut(id).data_mut()[j] = orig;
                    let (forward, backward) = ((plus - base) / eps, (base - minus) / eps);
                    let scale = analytic.abs().max(forward.abs()).max(backward.abs()).max(1e-8);
                    if (forward - backward).abs() / scale > KINK_TOLERANCE {
                        kinks += 1;
                        continue;
                    }
                    let numeric = (plus - minus) / (2.0 * eps);
                    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                    worst_rel = worst_rel.max(rel);
                    fd_checked += 1;
                    ensure(rel <= 1e-3, || {
                        format!("{}[{j}]: analytic {analytic:.6e} vs numeric {numeric:.6e}", model.store.name(id))
                    })?;
                }
            }
        }
    }
    ensure(fd_checked >= fixtures as usize * FD_ENTRIES / 2, || {
        format!("only {fd_checked} entries were away from a kink")
    })?;
    Ok(format!(
        "{fixtures} models, {fd_checked} finite-difference entries (worst relative error {worst_rel:.2e}), {kinks} skipped at activation kinks"
    ))
}

// ------------------------------------------------------------ composites

fn composite_fixture(rng: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let n = rng.random_range(1..=3);
    let side = *[2usize, 4, 8].choose(rng).unwrap();
    let real = Tensor::uniform(&[n, 3, side, side], 1.0, rng);
    let fake = Tensor::uniform(&[n, 3, side, side], 1.0, rng);
    (real, fake, random_mask(n, side, rng))
}

pub fn check_composite_identities(fixtures: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..fixtures {
        let (real, fake, mask) = composite_fixture(&mut rng);
        let pair = make_composites(&real, &fake, &mask).map_err(err)?;
        for ((a, b), (r, f)) in pair.x1.data().iter().zip(pair.x2.data()).zip(real.data().iter().zip(fake.data())) {
            ensure(a + b == r + f, || format!("case {case}: x1 + x2 != real + fake"))?;
        }
        let same = make_composites(&real, &real, &mask).map_err(err)?;
        ensure(same.x1 == same.x2, || format!("case {case}: fake = real but x1 != x2"))?;
        let ones = mask.map(|_| 1.0);
        let zeros = mask.map(|_| 0.0);
        let all = make_composites(&real, &fake, &ones).map_err(err)?;
        ensure(all.x1 == fake && all.x2 == real, || format!("case {case}: all-ones mask"))?;
        let none = make_composites(&real, &fake, &zeros).map_err(err)?;
        ensure(none.x1 == real && none.x2 == fake, || format!("case {case}: all-zeros mask"))?;
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::frozen(&store);
        let (rv, fv) = (tape.constant(real.clone()), tape.constant(fake.clone()));
        let vars = composite_vars(&mut tape, rv, fv, &mask).map_err(err)?;
        ensure(*tape.value(vars.x1) == pair.x1 && *tape.value(vars.x2) == pair.x2, || {
            format!("case {case}: recorded composites differ")
        })?;
    }
    Ok(format!("{fixtures} random fixtures exact"))
}

// ------------------------------------------------------------------- ACM

pub fn randomised_acm(seed: u64, channels: usize) -> (ParamStore<f64>, Acm) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let acm = Acm::new(&mut store, "acm", channels, 5, &mut rng);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::randn(&shape, 0.5, &mut rng);
    }
    (store, acm)
}

pub fn random_segmentation(side: usize, rng: &mut ChaCha8Rng) -> SegmentationMask {
    let data = (0..side * side).map(|_| rng.random_range(0..2u8)).collect();
    SegmentationMask::new(side, data).unwrap()
}

pub fn check_acm_identities(fixtures: u64) -> Check {
    let mut worst_lin: f64 = 0.0;
    for seed in 0..fixtures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7000);
        let c = rng.random_range(1..=4);
        let side = *[2usize, 4, 8].choose(&mut rng).unwrap();
        let n = rng.random_range(1..=2);
        let h = Tensor::randn(&[n, c, side, side], 1.0, &mut rng);

        let w = Tensor::ones(h.shape());
        let b = Tensor::zeros(h.shape());
        let out = acm_forward(&h, &w, &b).map_err(err)?;
        ensure(out.max_abs_diff(&h) <= 1e-6, || "W = 1, b = 0 changed the features".into())?;

        let mut fresh_store = ParamStore::<f64>::new();
        let fresh = Acm::new(&mut fresh_store, "acm", c, 5, &mut rng);
        let mask = random_segmentation(side, &mut rng);
        let out = fresh.apply(&fresh_store, &h, &mask).map_err(err)?;
        ensure(out.max_abs_diff(&h) <= 1e-6, || "fresh module is not the identity".into())?;

        let (store, acm) = randomised_acm(seed, c);
        let (_, bias) = acm.modulation_tensors(&store, h.shape(), &mask).map_err(err)?;
        let zero = acm.apply(&store, &Tensor::zeros(h.shape()), &mask).map_err(err)?;
        ensure(zero.max_abs_diff(&bias) <= 1e-6, || "h = 0 did not give b(S)".into())?;

        let h2 = Tensor::randn(h.shape(), 1.0, &mut rng);
        let (alpha, beta) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mix = Tensor::new(h.shape(), h.data().iter().zip(h2.data()).map(|(a, b)| alpha * a + beta * b).collect())
            .unwrap();
        let f_mix = acm.apply(&store, &mix, &mask).map_err(err)?;
        let f1 = acm.apply(&store, &h, &mask).map_err(err)?;
        let f2 = acm.apply(&store, &h2, &mask).map_err(err)?;
        for (((fm, a), b), bb) in f_mix.data().iter().zip(f1.data()).zip(f2.data()).zip(bias.data()) {
            let expect = alpha * (a - bb) + beta * (b - bb) + bb;
            worst_lin = worst_lin.max((fm - expect).abs());
        }
    }
    ensure(worst_lin <= 1e-5, || format!("linearity error {worst_lin:.3e}"))?;
    Ok(format!("{fixtures} fixtures, linearity error {worst_lin:.2e}"))
}

// ------------------------------------------------------------ POS filter

pub const FILLER_WORDS: [&str; 30] = [
    "a",
    "to",
    "its",
    "the",
    "an",
    "red",
    "circle",
    "is",
    "on",
    "green",
    "background",
    "bird",
    "sits",
    "with",
    "small",
    "wings",
    "and",
    "of",
    "this",
    "very",
    "quickly",
    "flying",
    "blue",
    "in",
    "it",
    "has",
    "yellow",
    "beak",
    "zorbly",
    "glimmed",
];

pub fn random_caption(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(1..=20);
    let mut words: Vec<String> = (0..len).map(|_| FILLER_WORDS.choose(rng).unwrap().to_string()).collect();
    if rng.random_bool(0.3) {
        words.push("Its.".into());
    }
    words.join(" ")
}

const KEEP: [&str; 4] = ["NN", "IN", "VB", "JJ"];

pub fn check_pos_filter(captions: usize) -> Check {
    let tagger = LexiconTagger::bundled();
    let options = CaptionOptions { use_pos: true, drop_auxiliaries: false, max_len: usize::MAX };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut kept = 0;
    for _ in 0..captions {
        let text = random_caption(&mut rng);
        let (raw, tagged, filtered) = preprocess(&text, &tagger, &options).map_err(err)?;
        ensure(tagged.len() == raw.len(), || format!("{text:?}: tag count"))?;
        let expected: Vec<String> = tagged
            .iter()
            .filter(|t| KEEP.iter().any(|k| t.tag.as_str().starts_with(k)))
            .map(|t| t.text.clone())
            .collect();
        ensure(filtered == expected, || format!("{text:?}: kept {filtered:?}, keep-set gives {expected:?}"))?;
        let mut it = raw.iter();
        ensure(filtered.iter().all(|w| it.any(|r| r == w)), || format!("{text:?}: not a subsequence"))?;
        for w in ["a", "to", "its"] {
            ensure(!filtered.iter().any(|f| f == w), || format!("{text:?}: kept {w:?}"))?;
        }
        let retagged = tagger.tag(&raw).map_err(err)?;
        ensure(retagged == tagged, || format!("{text:?}: tagging is not pure"))?;
        kept += filtered.len();
    }
    Ok(format!("{captions} random captions, {kept} tokens kept"))
}

// ------------------------------------------------------- resolution law

pub fn check_resolution_law() -> Check {
    let mut seen = Vec::new();
    for k in 1..=3 {
        let plan = StagePlan::desk_with_stages(k);
        plan.validate().map_err(err)?;
        let config = ModelConfig { plan: plan.clone(), ..ModelConfig::default() };
        let vocab = Vocabulary::from_tokens(vec!["red".into()]);
        let model = Model::<f32>::new(config, vocab, 1).map_err(err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let masks = vec![SegmentationMask::full(plan.finest()), SegmentationMask::empty(plan.finest())];
        let images = model.generate(&model.noise(2, &mut rng), &[vec![2], vec![2]], &masks).map_err(err)?;
        ensure(images.len() == k, || format!("K = {k}: {} outputs", images.len()))?;
        let sides: Vec<usize> = images.iter().map(|t| t.shape()[2]).collect();
        for (i, t) in images.iter().enumerate() {
            ensure(t.shape() == [2, 3, sides[i], sides[i]], || {
                format!("K = {k}: stage {} shape {:?}", i + 1, t.shape())
            })?;
            ensure(t.data().iter().all(|v| (-1.0..=1.0).contains(v)), || format!("K = {k}: output outside [-1, 1]"))?;
        }
        for w in sides.windows(2) {
            ensure(w[1] == 2 * w[0] && w[1] * w[1] == 4 * w[0] * w[0], || format!("K = {k}: sides {sides:?}"))?;
        }
        ensure(sides == plan.resolutions(), || format!("K = {k}: sides {sides:?} differ from plan"))?;
        seen.push(format!("K={k}: {sides:?}"));
    }
    Ok(seen.join(", "))
}

// -------------------------------------------------------------- metrics

pub fn check_metric_sanity() -> Check {
    let uniform = vec![vec![0.25; 4]; 10];
    let (is, _) = inception_score(&uniform, 1).map_err(err)?;
    ensure((is - 1.0).abs() <= 1e-6, || format!("uniform IS = {is}"))?;
    for n in 1..=12 {
        let onehot: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let (is, _) = inception_score(&onehot, 1).map_err(err)?;
        ensure((is - n as f64).abs() <= 1e-9, || format!("{n} one-hot images give IS = {is}"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = 150;
    let basis: Vec<Vec<f64>> = (0..m).map(|i| (0..m).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let truth: Vec<usize> = (0..m).collect();
    let oracle = r_precision(&basis, &truth, &basis, 100, &mut rng).map_err(err)?;
    ensure(oracle == 100.0, || format!("oracle embedder R-precision {oracle}"))?;
    let single = r_precision(&basis, &truth, &basis, 1, &mut rng).map_err(err)?;
    ensure(single == 100.0, || format!("pool 1 R-precision {single}"))?;

    let trials = 1000;
    let dim = 16;
    let captions: Vec<Vec<f64>> = (0..500).map(|_| Tensor::<f64>::randn(&[dim], 1.0, &mut rng).into_data()).collect();
    let images: Vec<Vec<f64>> = (0..trials).map(|_| Tensor::<f64>::randn(&[dim], 1.0, &mut rng).into_data()).collect();
    let truth: Vec<usize> = (0..trials).map(|_| rng.random_range(0..captions.len())).collect();
    let random = r_precision(&images, &truth, &captions, 100, &mut rng).map_err(err)?;
    let sigma = 100.0 * (0.01 * 0.99 / trials as f64).sqrt();
    ensure((random - 1.0).abs() <= 3.0 * sigma, || {
        format!("random embedder R-precision {random:.2}% (3σ = {:.2})", 3.0 * sigma)
    })?;
    Ok(format!("uniform IS {is:.6}, oracle R {oracle}%, random R {random:.2}% (1% ± {:.2})", 3.0 * sigma))
}

// ------------------------------------------------------------- training

/// Generates the synthetic dataset under `dir` and loads it at 32 pixels.
pub fn shapes_dataset(dir: &Path, per_combination: usize) -> Dataset {
    let config = ShapeWorldConfig { per_combination, ..ShapeWorldConfig::default() };
    generate_shapeworld(&config, dir).unwrap();
    Dataset::load(dir, 32).unwrap()
}

/// A short run configuration over the desk plan.
pub fn short_config(steps: u64) -> TrainConfig {
    TrainConfig { epochs: 1000, batch_size: 4, max_steps: steps, ..TrainConfig::default() }
}

pub fn fresh_state(config: &TrainConfig, dataset: &Dataset) -> (TrainState<f32>, TrainData) {
    let vocab = training_vocabulary(dataset, config).unwrap();
    let data = TrainData::new(dataset, config, &vocab).unwrap();
    (TrainState::new(config.clone(), vocab).unwrap(), data)
}

/// Weighted per-step totals and the final parameter and optimiser arrays.
pub type Fingerprint = (Vec<(Vec<f64>, Vec<f64>)>, Vec<(String, Vec<f32>)>);

pub fn run_fingerprint(config: &TrainConfig, dataset: &Dataset) -> Fingerprint {
    let (mut state, data) = fresh_state(config, dataset);
    let reports = run(&mut state, &data, None).unwrap();
    let totals = reports.iter().map(|r| r.totals().unwrap()).collect();
    let arrays = state.to_checkpoint().tensors.into_iter().map(|(k, t)| (k, t.into_data())).collect();
    (totals, arrays)
}

pub fn check_ablation_equivalence(dataset: &Dataset, steps: u64) -> Check {
    let base = short_config(steps);
    let pairs = [
        (
            "use_refined=false",
            "lambda_refined=0",
            TrainConfig { use_refined: false, ..base.clone() },
            TrainConfig { lambda_refined: 0.0, ..base.clone() },
        ),
        (
            "use_structure_loss=false",
            "lambda_structure=0",
            TrainConfig { use_structure_loss: false, ..base.clone() },
            TrainConfig { lambda_structure: 0.0, ..base.clone() },
        ),
        (
            "both flags off",
            "both weights 0",
            TrainConfig { use_refined: false, use_structure_loss: false, ..base.clone() },
            TrainConfig { lambda_refined: 0.0, lambda_structure: 0.0, ..base.clone() },
        ),
    ];
    for (a_name, b_name, a, b) in pairs {
        let (ta, pa) = run_fingerprint(&a, dataset);
        let (tb, pb) = run_fingerprint(&b, dataset);
        ensure(ta.len() as u64 == steps, || format!("{a_name}: {} steps", ta.len()))?;
        ensure(ta == tb, || format!("{a_name} and {b_name}: step totals differ"))?;
        ensure(pa == pb, || format!("{a_name} and {b_name}: parameters differ"))?;
    }
    Ok(format!("flag and zero-weight runs bit-identical over {steps} steps"))
}

pub fn check_determinism_and_resume(dataset: &Dataset, dir: &Path) -> Check {
    let config = TrainConfig { epochs: 2, batch_size: 8, ..TrainConfig::default() };
    let (mut a, data) = fresh_state(&config, dataset);
    let ra = run(&mut a, &data, None).map_err(err)?;
    let (mut b, _) = fresh_state(&config, dataset);
    let rb = run(&mut b, &data, None).map_err(err)?;
    ensure(ra == rb, || "two runs with one seed produced different loss reports".into())?;
    let total = ra.len() as u64;

    let cut = total / 2 + 1;
    let (mut c, _) = fresh_state(&TrainConfig { max_steps: cut, ..config.clone() }, dataset);
    let first = run(&mut c, &data, None).map_err(err)?;
    let path = dir.join("resume.safetensors");
    c.save(&path).map_err(err)?;
    let mut resumed = TrainState::<f32>::load(&path).map_err(err)?;
    resumed.config.max_steps = 0;
    let second = run(&mut resumed, &data, None).map_err(err)?;
    let joined: Vec<_> = first.into_iter().chain(second).collect();
    ensure(joined == ra, || format!("resumed run diverges from the uninterrupted one after step {cut}"))?;
    ensure(resumed.to_checkpoint().tensors == a.to_checkpoint().tensors, || {
        "final parameters differ after resume".into()
    })?;
    Ok(format!("{total} steps reproduced exactly; resume at step {cut} matches"))
}

pub fn batches(state: &TrainState<f32>, data: &TrainData, epoch: u64) -> Vec<Batch<f32>> {
    let plan = state.model.plan();
    batch_stream(&data.caption_counts(), state.config.batch_size, state.config.seed, epoch)
        .unwrap()
        .iter()
        .map(|bp| data.dataset.batch(bp, &data.captions, &plan.resolutions(), &plan.mask_resolutions()).unwrap())
        .collect()
}

fn checksum(state: &TrainState<f32>, prefixes: &[&str]) -> u64 {
    let ids: Vec<_> = prefixes.iter().flat_map(|p| state.model.store.with_prefix(p)).collect();
    state.model.store.checksum(&ids)
}

/// The discriminator update touches only discriminator parameters, and a
/// full step leaves discriminators exactly where a lone discriminator
/// update does.
pub fn check_alternation_isolation(dataset: &Dataset) -> Check {
    let config = short_config(0);
    let (mut a, data) = fresh_state(&config, dataset);
    let (mut b, _) = fresh_state(&config, dataset);
    let mut steps = 0;
    for batch in batches(&a, &data, 0).iter().take(3) {
        let g0 = checksum(&a, &["generator/"]);
        let e0 = checksum(&a, &["text/", "image_encoder/"]);
        let d0 = checksum(&a, &["discriminator/"]);
        a.discriminator_step(batch).map_err(err)?;
        ensure(checksum(&a, &["generator/"]) == g0, || "discriminator update changed the generator".into())?;
        ensure(checksum(&a, &["text/", "image_encoder/"]) == e0, || {
            "discriminator update changed the encoders".into()
        })?;
        ensure(checksum(&a, &["discriminator/"]) != d0, || "discriminator update changed nothing".into())?;

        let g0 = checksum(&b, &["generator/"]);
        b.train_step(batch).map_err(err)?;
        ensure(checksum(&b, &["generator/"]) != g0, || "full step left the generator unchanged".into())?;
        ensure(checksum(&b, &["discriminator/"]) == checksum(&a, &["discriminator/"]), || {
            "discriminators after a full step differ from a lone discriminator update".into()
        })?;
        // keep both generators in sync for the next comparison
        for id in a
            .model
            .store
            .with_prefix("generator/")
            .into_iter()
            .chain(a.model.store.with_prefix("text/"))
            .chain(a.model.store.with_prefix("image_encoder/"))
        {
            *a.model.store.get_mut(id) = b.model.store.get(id).clone();
        }
        a.progress = b.progress;
        steps += 1;
    }
    Ok(format!("{steps} steps: generator and encoders untouched by discriminator updates, discriminators match"))
}

/// A discriminator update on a batch does not raise the discriminator
/// objective on that batch.
pub fn check_discriminator_descent(dataset: &Dataset, steps: usize) -> Check {
    let config = short_config(0);
    let (mut state, data) = fresh_state(&config, dataset);
    let all = batches(&state, &data, 0);
    let mut worst = f64::NEG_INFINITY;
    for batch in all.iter().cycle().take(steps) {
        let before = state.discriminator_loss(batch).map_err(err)?;
        let mut probe = TrainState::from_checkpoint(&state.to_checkpoint()).map_err(err)?;
        probe.discriminator_step(batch).map_err(err)?;
        let after = probe.discriminator_loss(batch).map_err(err)?;
        worst = worst.max(after - before);
        ensure(after <= before + 1e-6, || format!("step {}: {before:.6} -> {after:.6}", state.step()))?;
        state.train_step(batch).map_err(err)?;
    }
    Ok(format!("{steps} updates, largest change {worst:+.3e}"))
}
