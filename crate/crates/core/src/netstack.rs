//! The multi-stage generator and discriminator pyramid.
//!
//! Stage `i` takes the hidden stream at half its output resolution, fuses
//! the mask into it, refines it with a residual block, upsamples 2x, and
//! emits an image through a `tanh` head. Each stage has its own
//! discriminator with an unconditional and a sentence-conditional head.

use rand::Rng;
use serde::{Deserialize, Serialize};
use textmask_tensor::{Conv2d, Init, Linear, ParamStore, Scalar, Tape, Tensor, Var, LEAKY_SLOPE};

use crate::mask::{Fusion, FusionKind};
use crate::Error;

/// Spatial side of the discriminator feature map fed to its heads.
pub const HEAD_SIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    /// Output image side in pixels.
    pub resolution: usize,
    /// Channels of the hidden stream this stage emits.
    pub hidden: usize,
    /// Channels of the discriminator's first downsampling layer.
    pub disc_width: usize,
}

/// Stage count, per-stage resolutions and widths, and the shared latent sizes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<StageSpec>,
    pub noise_dim: usize,
    /// Hidden channels inside each mask-fusion module.
    pub fusion_hidden: usize,
}

impl StagePlan {
    /// Three stages at 8/16/32 pixels.
    pub fn desk() -> Self {
        Self::custom(&[8, 16, 32], &[64, 32, 16], &[16, 8, 8])
    }

    /// Three stages at 64/128/256 pixels.
    pub fn full_scale() -> Self {
        Self::custom(&[64, 128, 256], &[512, 256, 128], &[64, 64, 64])
    }

    /// The first `k` stages of the desk plan (`1 <= k <= 3`), or a longer
    /// doubling chain for larger `k`.
    pub fn desk_with_stages(k: usize) -> Self {
        let mut plan = Self::desk();
        while plan.stages.len() < k {
            let last = plan.stages.last().expect("non-empty").clone();
            plan.stages.push(StageSpec {
                resolution: last.resolution * 2,
                hidden: (last.hidden / 2).max(4),
                disc_width: last.disc_width,
            });
        }
        plan.stages.truncate(k);
        plan
    }

    pub fn custom(resolutions: &[usize], hidden: &[usize], disc: &[usize]) -> Self {
        let stages = resolutions
            .iter()
            .zip(hidden)
            .zip(disc)
            .map(|((&resolution, &hidden), &disc_width)| StageSpec { resolution, hidden, disc_width })
            .collect();
        Self { stages, noise_dim: 16, fusion_hidden: 16 }
    }

    pub fn by_name(name: &str) -> Result<Self, Error> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" | "full_scale" => Ok(Self::full_scale()),
            other => Err(Error::Config(format!("unknown stage plan preset {other:?}"))),
        }
    }

    pub fn k(&self) -> usize {
        self.stages.len()
    }

    pub fn resolutions(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.resolution).collect()
    }

    pub fn finest(&self) -> usize {
        self.stages.last().map_or(0, |s| s.resolution)
    }

    /// Side of the hidden stream entering stage `i` (0-based), where the
    /// mask is fused.
    pub fn fusion_resolution(&self, i: usize) -> usize {
        self.stages[i].resolution / 2
    }

    /// Every side a mask pyramid must provide: fusion sides and stage sides.
    pub fn mask_resolutions(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.stages.iter().flat_map(|s| [s.resolution / 2, s.resolution]).collect();
        r.sort_unstable();
        r.dedup();
        r
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.stages.is_empty() {
            return Err(Error::Config("stage plan needs at least one stage".into()));
        }
        let r1 = self.stages[0].resolution;
        if r1 < 2 * HEAD_SIDE || !r1.is_power_of_two() {
            return Err(Error::Config(format!("first resolution {r1} must be a power of two >= {}", 2 * HEAD_SIDE)));
        }
        for w in self.stages.windows(2) {
            if w[1].resolution != 2 * w[0].resolution {
                return Err(Error::Config(format!(
                    "resolution {} does not double to {}",
                    w[0].resolution, w[1].resolution
                )));
            }
        }
        if self.stages.iter().any(|s| s.hidden == 0 || s.disc_width == 0) || self.noise_dim == 0 {
            return Err(Error::Config("widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorStage {
    pub fusion: Fusion,
    res_a: Conv2d,
    res_b: Conv2d,
    up: Conv2d,
    to_image: Conv2d,
}

impl GeneratorStage {
    /// Returns `(hidden_out, image)`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, h: Var, mask: Var) -> (Var, Var) {
        let slope = T::lit(LEAKY_SLOPE);
        let h = self.fusion.forward(tape, h, mask);
        let r = self.res_a.forward(tape, h);
        let r = tape.leaky_relu(r, slope);
        let r = self.res_b.forward(tape, r);
        let h = tape.add(h, r);
        // attention over word features would be inserted here
        let h = tape.upsample2(h);
        let h = self.up.forward(tape, h);
        let h = tape.leaky_relu(h, slope);
        let img = self.to_image.forward(tape, h);
        let img = tape.tanh(img);
        (h, img)
    }
}

/// Per-stage outputs of a generator pass.
pub struct GeneratorOutput {
    /// `[N, 3, r_i, r_i]` per stage.
    pub images: Vec<Var>,
    /// `[N, hidden_i, r_i, r_i]` per stage.
    pub hidden: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    plan: StagePlan,
    text_dim: usize,
    input: Linear,
    pub stages: Vec<GeneratorStage>,
}

impl Generator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        plan: &StagePlan,
        text_dim: usize,
        fusion: FusionKind,
        rng: &mut R,
    ) -> Self {
        let c0 = plan.stages[0].hidden;
        let s0 = plan.fusion_resolution(0);
        let input =
            Linear::new(store, &format!("{prefix}/input"), plan.noise_dim + text_dim, c0 * s0 * s0, Init::FanIn, rng);
        let mut stages = Vec::with_capacity(plan.k());
        let mut c_in = c0;
        for (i, spec) in plan.stages.iter().enumerate() {
            let p = format!("{prefix}/stage{}", i + 1);
            stages.push(GeneratorStage {
                fusion: Fusion::new(fusion, store, &p, c_in, plan.fusion_hidden, rng),
                res_a: Conv2d::same3(store, &format!("{p}/res_a"), c_in, c_in, Init::FanIn, rng),
                res_b: Conv2d::same3(store, &format!("{p}/res_b"), c_in, c_in, Init::Scaled(0.5), rng),
                up: Conv2d::same3(store, &format!("{p}/up"), c_in, spec.hidden, Init::Scaled(1.5), rng),
                to_image: Conv2d::same3(store, &format!("{p}/to_image"), spec.hidden, 3, Init::FanIn, rng),
            });
            c_in = spec.hidden;
        }
        Self { plan: plan.clone(), text_dim, input, stages }
    }

    pub fn plan(&self) -> &StagePlan {
        &self.plan
    }

    /// `noise: [N, noise_dim]`, `sentence: [N, text_dim]`, one
    /// `[N, 1, r_i/2, r_i/2]` mask per stage.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        noise: Var,
        sentence: Var,
        fusion_masks: &[Var],
    ) -> Result<GeneratorOutput, Error> {
        if fusion_masks.len() != self.stages.len() {
            return Err(Error::Config(format!(
                "mask pyramid depth {} differs from stage count {}",
                fusion_masks.len(),
                self.stages.len()
            )));
        }
        let n = tape.shape(noise)[0];
        if tape.shape(noise) != [n, self.plan.noise_dim] || tape.shape(sentence) != [n, self.text_dim] {
            return Err(Error::Input(format!(
                "generator expects noise [N, {}] and sentence [N, {}], got {:?} and {:?}",
                self.plan.noise_dim,
                self.text_dim,
                tape.shape(noise),
                tape.shape(sentence)
            )));
        }
        for (i, &m) in fusion_masks.iter().enumerate() {
            let r = self.plan.fusion_resolution(i);
            if tape.shape(m) != [n, 1, r, r] {
                return Err(Error::Input(format!(
                    "stage {} mask must be [{n}, 1, {r}, {r}], got {:?}",
                    i + 1,
                    tape.shape(m)
                )));
            }
        }
        let c0 = self.plan.stages[0].hidden;
        let s0 = self.plan.fusion_resolution(0);
        let z = tape.concat1(&[noise, sentence]);
        let h = self.input.forward(tape, z);
        let h = tape.leaky_relu(h, T::lit(LEAKY_SLOPE));
        let mut h = tape.reshape(h, &[n, c0, s0, s0]);
        let mut images = Vec::with_capacity(self.stages.len());
        let mut hidden = Vec::with_capacity(self.stages.len());
        for (stage, &mask) in self.stages.iter().zip(fusion_masks) {
            let (next, img) = stage.forward(tape, h, mask);
            images.push(img);
            hidden.push(next);
            h = next;
        }
        Ok(GeneratorOutput { images, hidden })
    }
}

/// Logits of both discriminator heads.
#[derive(Clone, Copy, Debug)]
pub struct DiscLogits {
    /// `[N, 1]`
    pub unconditional: Var,
    /// `[N, 1]`, present iff a sentence was supplied.
    pub conditional: Option<Var>,
}

/// Probabilities from [`DiscriminatorStage::score`].
#[derive(Clone, Debug, PartialEq)]
pub struct DiscScores<T> {
    pub unconditional: Vec<T>,
    pub conditional: Option<Vec<T>>,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorStage {
    resolution: usize,
    text_dim: usize,
    downs: Vec<Conv2d>,
    uncond: Linear,
    cond_joint: Conv2d,
    cond: Linear,
}

impl DiscriminatorStage {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: &StageSpec,
        text_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut downs = Vec::new();
        let (mut side, mut c_in, mut c_out) = (spec.resolution, 3, spec.disc_width);
        while side > HEAD_SIDE {
            downs.push(Conv2d::down4(store, &format!("{prefix}/down{}", downs.len()), c_in, c_out, rng));
            side /= 2;
            c_in = c_out;
            c_out *= 2;
        }
        let feat = c_in * HEAD_SIDE * HEAD_SIDE;
        Self {
            resolution: spec.resolution,
            text_dim,
            uncond: Linear::new(store, &format!("{prefix}/uncond"), feat, 1, Init::FanIn, rng),
            cond_joint: Conv2d::same3(store, &format!("{prefix}/cond_joint"), c_in + text_dim, c_in, Init::FanIn, rng),
            cond: Linear::new(store, &format!("{prefix}/cond"), feat, 1, Init::FanIn, rng),
            downs,
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Rejects anything that is not `[N, 3, r, r]` for this stage's `r`.
    pub fn check_input(&self, shape: &[usize]) -> Result<(), Error> {
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.resolution || shape[3] != self.resolution {
            return Err(Error::Input(format!(
                "discriminator for {r}x{r} received input of shape {shape:?}",
                r = self.resolution
            )));
        }
        Ok(())
    }

    /// `[N, C, 4, 4]` features.
    pub fn features<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let mut f = x;
        for d in &self.downs {
            f = d.forward(tape, f);
            f = tape.leaky_relu(f, T::lit(LEAKY_SLOPE));
        }
        f
    }

    pub fn unconditional<T: Scalar>(&self, tape: &mut Tape<'_, T>, features: Var) -> Var {
        let n = tape.shape(features)[0];
        let numel = tape.value(features).numel() / n;
        let flat = tape.reshape(features, &[n, numel]);
        self.uncond.forward(tape, flat)
    }

    pub fn conditional<T: Scalar>(&self, tape: &mut Tape<'_, T>, features: Var, sentence: Var) -> Var {
        let n = tape.shape(features)[0];
        let s = tape.broadcast2d(sentence, HEAD_SIDE, HEAD_SIDE);
        let joint = tape.concat1(&[features, s]);
        let g = self.cond_joint.forward(tape, joint);
        let g = tape.leaky_relu(g, T::lit(LEAKY_SLOPE));
        let numel = tape.value(g).numel() / n;
        let flat = tape.reshape(g, &[n, numel]);
        self.cond.forward(tape, flat)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        sentence: Option<Var>,
    ) -> Result<DiscLogits, Error> {
        self.check_input(tape.shape(x))?;
        if let Some(s) = sentence {
            let n = tape.shape(x)[0];
            if tape.shape(s) != [n, self.text_dim] {
                return Err(Error::Input(format!(
                    "sentence must be [{n}, {}], got {:?}",
                    self.text_dim,
                    tape.shape(s)
                )));
            }
        }
        let f = self.features(tape, x);
        let unconditional = self.unconditional(tape, f);
        let conditional = sentence.map(|s| self.conditional(tape, f, s));
        Ok(DiscLogits { unconditional, conditional })
    }

    /// Probabilities in (0, 1) for concrete inputs.
    pub fn score<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        images: &Tensor<T>,
        sentence: Option<&Tensor<T>>,
    ) -> Result<DiscScores<T>, Error> {
        let mut tape = Tape::frozen(store);
        let x = tape.constant(images.clone());
        let s = sentence.map(|s| tape.constant(s.clone()));
        let logits = self.forward(&mut tape, x, s)?;
        let u = tape.sigmoid(logits.unconditional);
        let unconditional = tape.value(u).data().to_vec();
        let conditional = logits.conditional.map(|c| {
            let c = tape.sigmoid(c);
            tape.value(c).data().to_vec()
        });
        Ok(DiscScores { unconditional, conditional })
    }
}

/// Image → sentence-space embedding used by the text-matching loss and
/// retrieval metrics.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    resolution: usize,
    downs: Vec<Conv2d>,
    head: Linear,
}

impl ImageEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        resolution: usize,
        width: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut downs = Vec::new();
        let (mut side, mut c_in, mut c_out) = (resolution, 3, width);
        while side > HEAD_SIDE {
            downs.push(Conv2d::down4(store, &format!("{prefix}/down{}", downs.len()), c_in, c_out, rng));
            side /= 2;
            c_in = c_out;
            c_out *= 2;
        }
        let head =
            Linear::new(store, &format!("{prefix}/head"), c_in * HEAD_SIDE * HEAD_SIDE, out_dim, Init::FanIn, rng);
        Self { resolution, downs, head }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let mut f = x;
        for d in &self.downs {
            f = d.forward(tape, f);
            f = tape.leaky_relu(f, T::lit(LEAKY_SLOPE));
        }
        let n = tape.shape(f)[0];
        let numel = tape.value(f).numel() / n;
        let flat = tape.reshape(f, &[n, numel]);
        self.head.forward(tape, flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        StagePlan::desk().validate().unwrap();
        StagePlan::full_scale().validate().unwrap();
        for k in 1..=4 {
            let p = StagePlan::desk_with_stages(k);
            p.validate().unwrap();
            assert_eq!(p.k(), k);
        }
        assert_eq!(StagePlan::desk().mask_resolutions(), [4, 8, 16, 32]);
    }

    #[test]
    fn rejects_non_doubling_plan() {
        let p = StagePlan::custom(&[8, 24], &[8, 8], &[8, 8]);
        assert!(matches!(p.validate(), Err(Error::Config(_))));
        assert!(StagePlan::custom(&[6], &[8], &[8]).validate().is_err());
        assert!(StagePlan::custom(&[], &[], &[]).validate().is_err());
    }
}
