//! Alternating optimisation of the stage pyramid.
//!
//! Every step draws its randomness from streams derived from
//! `(seed, step)`, so a run is reproducible from the configuration and the
//! step counter alone and resuming needs no generator state beyond them.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use textmask_tensor::{Adam, AdamConfig, Gradients, Scalar, Tape, Tensor, Var};

use crate::data::{batch_stream, epoch_seed, Batch, Dataset, Split};
use crate::losses::{
    base_d_loss, base_g_loss, composite_vars, refined_d_loss, refined_g_loss, structure_g_loss, structure_loss,
    text_match_loss, LossReport, LossWeights, StageLosses,
};
use crate::mask::FusionKind;
use crate::model::{
    discriminator_prefix, Checkpoint, Model, ModelConfig, GENERATOR_PREFIX, IMAGE_ENCODER_PREFIX, TEXT_PREFIX,
};
use crate::netstack::StagePlan;
use crate::text::{Caption, CaptionOptions, LexiconTagger};
use crate::Error;

/// Everything that controls a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub encoder_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_refined: f64,
    pub lambda_structure: f64,
    pub lambda_match: f64,
    /// Multiplier on cosine similarities in the text-match loss.
    pub match_scale: f64,
    pub seed: u64,
    /// `desk` or `full`.
    pub plan: String,
    pub stages: usize,
    /// Per-stage generator widths; empty keeps the preset.
    pub hidden: Vec<usize>,
    /// Per-stage discriminator base widths; empty keeps the preset.
    pub disc_widths: Vec<usize>,
    pub use_pos: bool,
    pub use_acm: bool,
    pub use_refined: bool,
    pub use_structure_loss: bool,
    /// Also train the generator to pass composites as real.
    pub structure_generator_term: bool,
    /// Epochs between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    /// Stop after this many steps in total; 0 means no limit.
    pub max_steps: u64,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            lr: 2e-4,
            encoder_lr: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            lambda_refined: 1.0,
            lambda_structure: 1.0,
            lambda_match: 1.0,
            match_scale: 10.0,
            seed: 0,
            plan: "desk".into(),
            stages: 3,
            hidden: Vec::new(),
            disc_widths: Vec::new(),
            use_pos: true,
            use_acm: true,
            use_refined: true,
            use_structure_loss: true,
            structure_generator_term: false,
            checkpoint_interval: 0,
            max_steps: 0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool, Error> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N, Error> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>, Error> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse_num(key, p.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl TrainConfig {
    pub const KEYS: [&'static str; 24] = [
        "epochs",
        "batch_size",
        "lr",
        "encoder_lr",
        "beta1",
        "beta2",
        "lambda_refined",
        "lambda_structure",
        "lambda_match",
        "match_scale",
        "seed",
        "plan",
        "stages",
        "hidden",
        "disc_widths",
        "use_pos",
        "use_acm",
        "use_refined",
        "use_structure_loss",
        "structure_generator_term",
        "checkpoint_interval",
        "max_steps",
        "out_dir",
        "deterministic",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), Error> {
        match key {
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "encoder_lr" => self.encoder_lr = parse_num(key, v)?,
            "beta1" => self.beta1 = parse_num(key, v)?,
            "beta2" => self.beta2 = parse_num(key, v)?,
            "lambda_refined" => self.lambda_refined = parse_num(key, v)?,
            "lambda_structure" => self.lambda_structure = parse_num(key, v)?,
            "lambda_match" => self.lambda_match = parse_num(key, v)?,
            "match_scale" => self.match_scale = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "plan" => self.plan = v.to_string(),
            "stages" => self.stages = parse_num(key, v)?,
            "hidden" => self.hidden = parse_list(key, v)?,
            "disc_widths" => self.disc_widths = parse_list(key, v)?,
            "use_pos" => self.use_pos = parse_bool(key, v)?,
            "use_acm" => self.use_acm = parse_bool(key, v)?,
            "use_refined" => self.use_refined = parse_bool(key, v)?,
            "use_structure_loss" => self.use_structure_loss = parse_bool(key, v)?,
            "structure_generator_term" => self.structure_generator_term = parse_bool(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = parse_num(key, v)?,
            "max_steps" => self.max_steps = parse_num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            // single-threaded execution is always deterministic
            "deterministic" => {
                parse_bool(key, v)?;
            }
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<(), Error> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, Error> {
        let mut c = Self::default();
        c.apply(&parse_key_values(&fs::read_to_string(path)?)?)?;
        Ok(c)
    }

    /// The configuration in `key = value` form.
    pub fn to_key_values(&self) -> String {
        let pairs: [(&str, String); 23] = [
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("encoder_lr", self.encoder_lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("lambda_refined", self.lambda_refined.to_string()),
            ("lambda_structure", self.lambda_structure.to_string()),
            ("lambda_match", self.lambda_match.to_string()),
            ("match_scale", self.match_scale.to_string()),
            ("seed", self.seed.to_string()),
            ("plan", self.plan.clone()),
            ("stages", self.stages.to_string()),
            ("hidden", join(&self.hidden)),
            ("disc_widths", join(&self.disc_widths)),
            ("use_pos", self.use_pos.to_string()),
            ("use_acm", self.use_acm.to_string()),
            ("use_refined", self.use_refined.to_string()),
            ("use_structure_loss", self.use_structure_loss.to_string()),
            ("structure_generator_term", self.structure_generator_term.to_string()),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
        ];
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.lr.is_nan() || self.lr <= 0.0 || self.encoder_lr.is_nan() || self.encoder_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam moment coefficients must lie in [0, 1)".into()));
        }
        for (name, w) in [
            ("lambda_refined", self.lambda_refined),
            ("lambda_structure", self.lambda_structure),
            ("lambda_match", self.lambda_match),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        self.stage_plan()?.validate()
    }

    pub fn stage_plan(&self) -> Result<StagePlan, Error> {
        let mut plan = match self.plan.as_str() {
            "desk" => StagePlan::desk_with_stages(self.stages),
            _ => StagePlan::by_name(&self.plan)?,
        };
        if plan.k() != self.stages {
            return Err(Error::Config(format!("plan {} has {} stages, not {}", self.plan, plan.k(), self.stages)));
        }
        for (list, name) in [(&self.hidden, "hidden"), (&self.disc_widths, "disc_widths")] {
            if !list.is_empty() && list.len() != plan.k() {
                return Err(Error::Config(format!("{name} needs {} entries", plan.k())));
            }
        }
        for (i, s) in plan.stages.iter_mut().enumerate() {
            if let Some(&h) = self.hidden.get(i) {
                s.hidden = h;
            }
            if let Some(&d) = self.disc_widths.get(i) {
                s.disc_width = d;
            }
        }
        Ok(plan)
    }

    pub fn caption_options(&self) -> CaptionOptions {
        CaptionOptions { use_pos: self.use_pos, ..CaptionOptions::default() }
    }

    pub fn model_config(&self) -> Result<ModelConfig, Error> {
        Ok(ModelConfig {
            plan: self.stage_plan()?,
            fusion: if self.use_acm { FusionKind::Acm } else { FusionKind::Concat },
            caption: self.caption_options(),
            ..ModelConfig::default()
        })
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { refined: self.lambda_refined, structure: self.lambda_structure, matching: self.lambda_match }
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }
}

/// Stream ids within one step.
const STREAM_NOISE: u64 = 0;
const STREAM_MISMATCH: u64 = 1;
const STREAM_PATCH_D: u64 = 2;
const STREAM_PATCH_G: u64 = 3;

fn step_rng(seed: u64, step: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed ^ 0x5EED_57E9, step));
    rng.set_stream(stream);
    rng
}

/// Position in the run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: u64,
    pub batch_in_epoch: usize,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct TrainMeta {
    config: TrainConfig,
    progress: Progress,
    generator_steps: u64,
    discriminator_steps: Vec<u64>,
    encoder_steps: u64,
}

/// Model, optimiser state, and run position.
pub struct TrainState<T: Scalar> {
    pub model: Model<T>,
    pub config: TrainConfig,
    pub generator_opt: Adam<T>,
    pub discriminator_opts: Vec<Adam<T>>,
    pub encoder_opt: Adam<T>,
    pub progress: Progress,
}

type GeneratorValues = (Vec<(f64, Option<f64>)>, f64);

/// Per-step inputs shared by the three half-steps.
struct StepInputs<T> {
    noise: Tensor<T>,
    sentences: Tensor<T>,
    mismatched: Option<Tensor<T>>,
    fusion_masks: Vec<Tensor<T>>,
}

struct DPass<T> {
    stages: Vec<(f64, f64, f64)>,
    total: f64,
    grads: Gradients<T>,
}

fn check(tape_value: f64, term: &str, stage: usize) -> Result<f64, Error> {
    if tape_value.is_finite() {
        Ok(tape_value)
    } else {
        Err(Error::NonFinite { term: term.to_string(), stage })
    }
}

impl<T: Scalar> TrainState<T> {
    pub fn new(config: TrainConfig, vocab: crate::text::Vocabulary) -> Result<Self, Error> {
        config.validate()?;
        let model = Model::new(config.model_config()?, vocab, config.seed)?;
        Ok(Self::with_model(model, config))
    }

    /// Fresh optimisers around an existing model.
    pub fn with_model(model: Model<T>, config: TrainConfig) -> Self {
        let store = &model.store;
        let generator_opt = Adam::new(store, store.with_prefix(GENERATOR_PREFIX), config.adam(config.lr));
        let discriminator_opts = (1..=model.plan().k())
            .map(|i| Adam::new(store, store.with_prefix(&discriminator_prefix(i)), config.adam(config.lr)))
            .collect();
        let mut enc = store.with_prefix(TEXT_PREFIX);
        enc.extend(store.with_prefix(IMAGE_ENCODER_PREFIX));
        let encoder_opt = Adam::new(store, enc, config.adam(config.encoder_lr));
        Self { model, config, generator_opt, discriminator_opts, encoder_opt, progress: Progress::default() }
    }

    pub fn step(&self) -> u64 {
        self.progress.step
    }

    fn inputs(&self, batch: &Batch<T>) -> Result<StepInputs<T>, Error> {
        let n = batch.len();
        let seed = self.config.seed;
        let step = self.progress.step;
        let noise = self.model.noise(n, &mut step_rng(seed, step, STREAM_NOISE));
        let sentences = self.model.sentence_features(&batch.caption_ids);
        let mismatched = if n > 1 {
            let shift = step_rng(seed, step, STREAM_MISMATCH).random_range(1..n);
            let d = sentences.shape()[1];
            let mut rolled = Vec::with_capacity(n * d);
            for b in 0..n {
                let src = (b + shift) % n;
                rolled.extend_from_slice(&sentences.data()[src * d..(src + 1) * d]);
            }
            Some(Tensor::new(&[n, d], rolled)?)
        } else {
            None
        };
        let plan = self.model.plan();
        let fusion_masks = (0..plan.k())
            .map(|i| {
                let r = plan.fusion_resolution(i);
                batch.masks.get(&r).cloned().ok_or_else(|| Error::Input(format!("batch lacks {r}x{r} masks")))
            })
            .collect::<Result<_, _>>()?;
        Ok(StepInputs { noise, sentences, mismatched, fusion_masks })
    }

    fn stage_mask(&self, batch: &Batch<T>, i: usize) -> Result<Tensor<T>, Error> {
        let r = self.model.plan().stages[i].resolution;
        batch.masks.get(&r).cloned().ok_or_else(|| Error::Input(format!("batch lacks {r}x{r} masks")))
    }

    fn d_pass(&self, batch: &Batch<T>, inputs: &StepInputs<T>) -> Result<DPass<T>, Error> {
        let model = &self.model;
        let cfg = &self.config;
        let k = model.plan().k();
        let mut tape = Tape::new(&model.store, |n| n.starts_with("discriminator/"));
        let z = tape.constant(inputs.noise.clone());
        let s = tape.constant(inputs.sentences.clone());
        let sm = inputs.mismatched.clone().map(|t| tape.constant(t));
        let masks: Vec<Var> = inputs.fusion_masks.iter().map(|t| tape.constant(t.clone())).collect();
        let out = model.generator.forward(&mut tape, z, s, &masks)?;
        let fakes: Vec<Var> = out.images.iter().map(|&v| tape.detach(v)).collect();
        let reals: Vec<Var> = batch.images.iter().map(|t| tape.constant(t.clone())).collect();
        let mut rng = step_rng(cfg.seed, self.progress.step, STREAM_PATCH_D);

        let mut stages = Vec::with_capacity(k);
        let mut total: Option<Var> = None;
        for (i, d) in model.discriminators.iter().enumerate() {
            let real_logits = d.forward(&mut tape, reals[i], Some(s))?;
            let fake_logits = d.forward(&mut tape, fakes[i], Some(s))?;
            let mismatched = match sm {
                Some(sm) => d.forward(&mut tape, reals[i], Some(sm))?.conditional,
                None => None,
            };
            let base = base_d_loss(&mut tape, &real_logits, &fake_logits, mismatched);
            let base_v = check(tape.value(base).item().as_f64(), "base_d", i + 1)?;
            let mut stage_total = base;
            let mut refined_v = 0.0;
            if cfg.use_refined {
                let z = refined_d_loss(&mut tape, i + 1, &reals, &fakes, d, &mut rng)?;
                refined_v = check(tape.value(z.loss).item().as_f64(), "refined_d", i + 1)?;
                if cfg.lambda_refined != 0.0 {
                    let w = tape.scale(z.loss, T::lit(cfg.lambda_refined));
                    stage_total = tape.add(stage_total, w);
                }
            }
            let mut structure_v = 0.0;
            if cfg.use_structure_loss {
                let mask = self.stage_mask(batch, i)?;
                let pair = composite_vars(&mut tape, reals[i], fakes[i], &mask)?;
                let l = structure_loss(&mut tape, d, &pair)?;
                structure_v = check(tape.value(l).item().as_f64(), "structure", i + 1)?;
                if cfg.lambda_structure != 0.0 {
                    let w = tape.scale(l, T::lit(cfg.lambda_structure));
                    stage_total = tape.add(stage_total, w);
                }
            }
            stages.push((base_v, refined_v, structure_v));
            total = Some(match total {
                None => stage_total,
                Some(t) => tape.add(t, stage_total),
            });
        }
        let total = total.expect("at least one stage");
        let total_v = check(tape.value(total).item().as_f64(), "total_d", 0)?;
        let grads = tape.backward(total);
        Ok(DPass { stages, total: total_v, grads })
    }

    /// Total discriminator objective on `batch` with the current
    /// parameters and this step's randomness. Changes nothing.
    pub fn discriminator_loss(&self, batch: &Batch<T>) -> Result<f64, Error> {
        let inputs = self.inputs(batch)?;
        Ok(self.d_pass(batch, &inputs)?.total)
    }

    /// One update of every discriminator; returns per-stage
    /// `(base_d, refined_d, structure)` before the update. Does not
    /// advance the step counter.
    pub fn discriminator_step(&mut self, batch: &Batch<T>) -> Result<Vec<(f64, f64, f64)>, Error> {
        let inputs = self.inputs(batch)?;
        self.discriminator_step_with(batch, &inputs)
    }

    fn discriminator_step_with(
        &mut self,
        batch: &Batch<T>,
        inputs: &StepInputs<T>,
    ) -> Result<Vec<(f64, f64, f64)>, Error> {
        let pass = self.d_pass(batch, inputs)?;
        for opt in &mut self.discriminator_opts {
            opt.step(&mut self.model.store, &pass.grads);
        }
        Ok(pass.stages)
    }

    /// Per stage `(base_g, refined_g)` and the text-match value.
    fn generator_step_with(&mut self, batch: &Batch<T>, inputs: &StepInputs<T>) -> Result<GeneratorValues, Error> {
        let model = &self.model;
        let cfg = &self.config;
        let k = model.plan().k();
        let mut tape = Tape::new(&model.store, |n| n.starts_with(GENERATOR_PREFIX));
        let z = tape.constant(inputs.noise.clone());
        let s = tape.constant(inputs.sentences.clone());
        let masks: Vec<Var> = inputs.fusion_masks.iter().map(|t| tape.constant(t.clone())).collect();
        let out = model.generator.forward(&mut tape, z, s, &masks)?;
        let mut rng = step_rng(cfg.seed, self.progress.step, STREAM_PATCH_G);

        let mut values = Vec::with_capacity(k);
        let mut terms = Vec::new();
        for (i, d) in model.discriminators.iter().enumerate() {
            let logits = d.forward(&mut tape, out.images[i], Some(s))?;
            let base = base_g_loss(&mut tape, &logits);
            let base_v = check(tape.value(base).item().as_f64(), "base_g", i + 1)?;
            terms.push(base);
            let mut refined_v = None;
            if cfg.use_refined {
                if let Some(zg) = refined_g_loss(&mut tape, i + 1, out.images[i], &model.discriminators, &mut rng)? {
                    refined_v = Some(check(tape.value(zg.loss).item().as_f64(), "refined_g", i + 1)?);
                    if cfg.lambda_refined != 0.0 {
                        terms.push(tape.scale(zg.loss, T::lit(cfg.lambda_refined)));
                    }
                }
            }
            if cfg.use_structure_loss && cfg.structure_generator_term && cfg.lambda_structure != 0.0 {
                let real = tape.constant(batch.images[i].clone());
                let mask = self.stage_mask(batch, i)?;
                let pair = composite_vars(&mut tape, real, out.images[i], &mask)?;
                let l = structure_g_loss(&mut tape, d, &pair)?;
                check(tape.value(l).item().as_f64(), "structure_g", i + 1)?;
                terms.push(tape.scale(l, T::lit(cfg.lambda_structure)));
            }
            values.push((base_v, refined_v));
        }
        let emb = model.image_encoder.forward(&mut tape, out.images[k - 1]);
        let tm = text_match_loss(&mut tape, emb, s, cfg.match_scale);
        let tm_v = check(tape.value(tm).item().as_f64(), "text_match", k)?;
        if cfg.lambda_match != 0.0 {
            terms.push(tape.scale(tm, T::lit(cfg.lambda_match)));
        }
        let total = terms[1..].iter().fold(terms[0], |acc, &t| tape.add(acc, t));
        check(tape.value(total).item().as_f64(), "total_g", 0)?;
        let grads = tape.backward(total);
        drop(tape);
        self.generator_opt.step(&mut self.model.store, &grads);
        Ok((values, tm_v))
    }

    fn encoder_step(&mut self, batch: &Batch<T>) -> Result<f64, Error> {
        let model = &self.model;
        let k = model.plan().k();
        let mut tape = Tape::new(&model.store, |n| n.starts_with(TEXT_PREFIX) || n.starts_with(IMAGE_ENCODER_PREFIX));
        let enc = model.text.forward(&mut tape, &batch.caption_ids);
        let real = tape.constant(batch.images[k - 1].clone());
        let emb = model.image_encoder.forward(&mut tape, real);
        let loss = text_match_loss(&mut tape, emb, enc.sentence, self.config.match_scale);
        let v = check(tape.value(loss).item().as_f64(), "encoder_match", 0)?;
        let grads = tape.backward(loss);
        drop(tape);
        self.encoder_opt.step(&mut self.model.store, &grads);
        Ok(v)
    }

    /// Discriminators, then generators, then the text and image encoders.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<LossReport, Error> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let inputs = self.inputs(batch)?;
        let d = self.discriminator_step_with(batch, &inputs)?;
        let (g, tm) = self.generator_step_with(batch, &inputs)?;
        let encoder_match = self.encoder_step(batch)?;
        let k = d.len();
        let stages = d
            .iter()
            .zip(&g)
            .enumerate()
            .map(|(i, (&(base_d, refined_d, structure), &(base_g, refined_g)))| StageLosses {
                stage: i + 1,
                base_d,
                base_g,
                refined_d,
                refined_g,
                structure,
                text_match: (i + 1 == k).then_some(tm),
            })
            .collect();
        let report =
            LossReport { step: self.progress.step, stages, weights: Some(self.config.weights()), encoder_match };
        report.check_finite()?;
        self.progress.step += 1;
        Ok(report)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut ckpt = self.model.to_checkpoint();
        let mut groups: Vec<(String, &Adam<T>)> = vec![("generator".into(), &self.generator_opt)];
        for (i, o) in self.discriminator_opts.iter().enumerate() {
            groups.push((format!("discriminator{}", i + 1), o));
        }
        groups.push(("encoder".into(), &self.encoder_opt));
        for (group, opt) in groups {
            let (m, v) = opt.moments();
            for ((&id, m), v) in opt.params().iter().zip(m).zip(v) {
                let name = self.model.store.name(id);
                ckpt.tensors.insert(format!("optim/{group}/m/{name}"), m.clone());
                ckpt.tensors.insert(format!("optim/{group}/v/{name}"), v.clone());
            }
        }
        let meta = TrainMeta {
            config: self.config.clone(),
            progress: self.progress,
            generator_steps: self.generator_opt.steps(),
            discriminator_steps: self.discriminator_opts.iter().map(Adam::steps).collect(),
            encoder_steps: self.encoder_opt.steps(),
        };
        ckpt.metadata.insert("train".into(), serde_json::to_string(&meta).expect("meta serializes"));
        ckpt
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        self.to_checkpoint().write(path)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self, Error> {
        let model = Model::from_checkpoint(ckpt)?;
        let meta: TrainMeta = serde_json::from_str(ckpt.meta("train")?)?;
        let mut state = Self::with_model(model, meta.config);
        state.progress = meta.progress;
        let restore = |opt: &mut Adam<T>, group: &str, steps: u64, store: &textmask_tensor::ParamStore<T>| {
            let mut ms = Vec::new();
            let mut vs = Vec::new();
            for &id in opt.params() {
                let name = store.name(id);
                let get = |kind: &str| {
                    ckpt.tensors
                        .get(&format!("optim/{group}/{kind}/{name}"))
                        .cloned()
                        .ok_or_else(|| Error::Checkpoint(format!("missing optimiser state for {name}")))
                };
                ms.push(get("m")?);
                vs.push(get("v")?);
            }
            opt.restore(ms, vs, steps);
            Ok::<(), Error>(())
        };
        let store = &state.model.store;
        restore(&mut state.generator_opt, "generator", meta.generator_steps, store)?;
        if meta.discriminator_steps.len() != state.discriminator_opts.len() {
            return Err(Error::Checkpoint("discriminator optimiser count differs from stage count".into()));
        }
        for (i, opt) in state.discriminator_opts.iter_mut().enumerate() {
            restore(opt, &format!("discriminator{}", i + 1), meta.discriminator_steps[i], store)?;
        }
        restore(&mut state.encoder_opt, "encoder", meta.encoder_steps, store)?;
        Ok(state)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}

/// Training split with processed captions.
pub struct TrainData {
    pub dataset: Dataset,
    pub captions: Vec<Vec<Caption>>,
}

impl TrainData {
    pub fn new(dataset: &Dataset, config: &TrainConfig, vocab: &crate::text::Vocabulary) -> Result<Self, Error> {
        let dataset = dataset.split(Split::Train);
        if dataset.is_empty() {
            return Err(Error::Dataset("training split is empty".into()));
        }
        let captions = dataset.prepare_captions(&LexiconTagger::bundled(), vocab, &config.caption_options())?;
        Ok(Self { dataset, captions })
    }

    pub fn caption_counts(&self) -> Vec<usize> {
        self.captions.iter().map(Vec::len).collect()
    }
}

/// Vocabulary of the training split under the run's caption options.
pub fn training_vocabulary(dataset: &Dataset, config: &TrainConfig) -> Result<crate::text::Vocabulary, Error> {
    dataset.split(Split::Train).build_vocabulary(&LexiconTagger::bundled(), &config.caption_options())
}

/// Runs steps until the configured epochs or `max_steps` are exhausted,
/// appending loss lines to `log` and writing interval checkpoints under
/// the output directory. Returns the reports of the steps taken.
pub fn run<T: Scalar>(
    state: &mut TrainState<T>,
    data: &TrainData,
    log: Option<&Path>,
) -> Result<Vec<LossReport>, Error> {
    let cfg = state.config.clone();
    let plan = state.model.plan().clone();
    let resolutions = plan.resolutions();
    let mask_resolutions = plan.mask_resolutions();
    let counts = data.caption_counts();
    let mut log_file = match log {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            Some(OpenOptions::new().create(true).append(true).open(p)?)
        }
        None => None,
    };
    let mut reports = Vec::new();
    while state.progress.epoch < cfg.epochs {
        let plans = batch_stream(&counts, cfg.batch_size, cfg.seed, state.progress.epoch)?;
        let mut sums: BTreeMap<&'static str, (f64, usize)> = BTreeMap::new();
        while state.progress.batch_in_epoch < plans.len() {
            if cfg.max_steps > 0 && state.progress.step >= cfg.max_steps {
                return Ok(reports);
            }
            let bp = &plans[state.progress.batch_in_epoch];
            let batch = data.dataset.batch::<T>(bp, &data.captions, &resolutions, &mask_resolutions)?;
            let report = state.train_step(&batch)?;
            if let Some(f) = log_file.as_mut() {
                for line in report.json_lines() {
                    writeln!(f, "{line}")?;
                }
            }
            for s in &report.stages {
                for (name, v) in s.terms() {
                    let e = sums.entry(name).or_default();
                    e.0 += v;
                    e.1 += 1;
                }
            }
            reports.push(report);
            state.progress.batch_in_epoch += 1;
        }
        state.progress.epoch += 1;
        state.progress.batch_in_epoch = 0;
        let summary: Vec<String> = sums.iter().map(|(k, (s, n))| format!("{k}={:.4}", s / *n as f64)).collect();
        log::info!("epoch {}/{} step {}: {}", state.progress.epoch, cfg.epochs, state.progress.step, summary.join(" "));
        if cfg.checkpoint_interval > 0 && state.progress.epoch.is_multiple_of(cfg.checkpoint_interval) {
            state.save(&cfg.out_dir.join(format!("checkpoint-epoch{}.safetensors", state.progress.epoch)))?;
        }
    }
    Ok(reports)
}

/// Trains from scratch on the training split of `dataset` and writes
/// `checkpoint.safetensors`, `losses.jsonl` and `config.txt` into the
/// output directory. Returns the final checkpoint path.
pub fn fit<T: Scalar>(config: &TrainConfig, dataset: &Dataset) -> Result<PathBuf, Error> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("dataset is empty".into()));
    }
    let vocab = training_vocabulary(dataset, config)?;
    let data = TrainData::new(dataset, config, &vocab)?;
    let mut state = TrainState::<T>::new(config.clone(), vocab)?;
    fs::create_dir_all(&config.out_dir)?;
    fs::write(config.out_dir.join("config.txt"), config.to_key_values())?;
    let log = config.out_dir.join("losses.jsonl");
    if log.exists() {
        fs::remove_file(&log)?;
    }
    run(&mut state, &data, Some(&log))?;
    let path = config.out_dir.join("checkpoint.safetensors");
    state.save(&path)?;
    Ok(path)
}

/// Continues a run from a training checkpoint. `epochs` and `max_steps`
/// may be raised through `overrides`.
pub fn resume<T: Scalar>(
    checkpoint: &Path,
    dataset: &Dataset,
    overrides: &[(String, String)],
) -> Result<PathBuf, Error> {
    let mut state = TrainState::<T>::load(checkpoint)?;
    state.config.apply(overrides)?;
    state.config.validate()?;
    let data = TrainData::new(dataset, &state.config, &state.model.vocab)?;
    let out = state.config.out_dir.clone();
    fs::create_dir_all(&out)?;
    run(&mut state, &data, Some(&out.join("losses.jsonl")))?;
    let path = out.join("checkpoint.safetensors");
    state.save(&path)?;
    Ok(path)
}
