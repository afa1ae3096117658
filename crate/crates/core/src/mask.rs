//! Binary segmentation masks, their resolution pyramid, and the fusion of
//! mask information into hidden features.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use textmask_tensor::{Conv2d, Init, ParamStore, Scalar, Tape, Tensor, Var, LEAKY_SLOPE};

use crate::Error;

/// Grey levels strictly above this are foreground.
pub const MASK_THRESHOLD: u8 = 127;

/// Square binary grid, `1` = object, `0` = background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMask {
    side: usize,
    data: Vec<u8>,
}

impl SegmentationMask {
    pub fn new(side: usize, data: Vec<u8>) -> Result<Self, Error> {
        if data.len() != side * side {
            return Err(Error::Input(format!("mask of side {side} needs {} cells, got {}", side * side, data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Input("mask values must be 0 or 1".into()));
        }
        Ok(Self { side, data })
    }

    pub fn empty(side: usize) -> Self {
        Self { side, data: vec![0; side * side] }
    }

    pub fn full(side: usize) -> Self {
        Self { side, data: vec![1; side * side] }
    }

    /// Binarises grey levels with [`MASK_THRESHOLD`].
    pub fn from_gray(side: usize, gray: &[u8]) -> Result<Self, Error> {
        if gray.len() != side * side {
            return Err(Error::Input(format!("grey mask of side {side} has {} pixels", gray.len())));
        }
        Ok(Self { side, data: gray.iter().map(|&g| u8::from(g > MASK_THRESHOLD)).collect() })
    }

    /// Reads an 8-bit mask image, centre-cropping to a square and resizing
    /// (nearest) to `side` when needed.
    pub fn load(path: &Path, side: usize) -> Result<Self, Error> {
        let img = image::open(path)?.to_luma8();
        let s = img.width().min(img.height());
        let img = image::imageops::crop_imm(&img, (img.width() - s) / 2, (img.height() - s) / 2, s, s).to_image();
        let img = if img.width() as usize != side || img.height() as usize != side {
            image::imageops::resize(&img, side as u32, side as u32, image::imageops::FilterType::Nearest)
        } else {
            img
        };
        Self::from_gray(side, img.as_raw())
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let pixels: Vec<u8> = self.data.iter().map(|&v| v * 255).collect();
        let img = image::GrayImage::from_raw(self.side as u32, self.side as u32, pixels)
            .expect("mask buffer matches its side");
        img.save(path)?;
        Ok(())
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.side + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.side + x] = u8::from(v);
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    /// Max-pool to a coarser `side` that divides this one.
    pub fn downsample(&self, side: usize) -> Result<Self, Error> {
        if side == 0 || side > self.side || !self.side.is_multiple_of(side) {
            return Err(Error::Config(format!("cannot max-pool a {} mask to {side}", self.side)));
        }
        let f = self.side / side;
        let mut out = vec![0u8; side * side];
        for y in 0..self.side {
            for x in 0..self.side {
                if self.data[y * self.side + x] == 1 {
                    out[(y / f) * side + x / f] = 1;
                }
            }
        }
        Ok(Self { side, data: out })
    }

    /// Horizontal mirror.
    pub fn flipped(&self) -> Self {
        let s = self.side;
        let mut data = vec![0u8; s * s];
        for y in 0..s {
            for x in 0..s {
                data[y * s + x] = self.data[y * s + s - 1 - x];
            }
        }
        Self { side: s, data }
    }

    /// Elementwise union.
    pub fn union(&self, other: &Self) -> Result<Self, Error> {
        if self.side != other.side {
            return Err(Error::Input("mask union: sides differ".into()));
        }
        Ok(Self { side: self.side, data: self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect() })
    }

    /// `[1, 1, side, side]` tensor of zeros and ones.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| if v == 1 { T::one() } else { T::zero() }).collect();
        Tensor::new(&[1, 1, self.side, self.side], data).expect("mask shape")
    }
}

/// One binary grid per resolution, coarse to fine.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPyramid {
    levels: Vec<SegmentationMask>,
}

impl MaskPyramid {
    pub fn levels(&self) -> &[SegmentationMask] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// The level with the given side.
    pub fn at(&self, side: usize) -> Result<&SegmentationMask, Error> {
        self.levels
            .iter()
            .find(|m| m.side == side)
            .ok_or_else(|| Error::Config(format!("mask pyramid has no level of side {side}")))
    }
}

/// Max-pools `mask` to every entry of `resolutions`.
///
/// Resolutions must be strictly increasing, each must divide the next, and
/// the last must equal the mask side.
pub fn build_mask_pyramid(mask: &SegmentationMask, resolutions: &[usize]) -> Result<MaskPyramid, Error> {
    let Some(&finest) = resolutions.last() else {
        return Err(Error::Config("mask pyramid needs at least one resolution".into()));
    };
    if finest != mask.side {
        return Err(Error::Config(format!("finest resolution {finest} differs from mask side {}", mask.side)));
    }
    for w in resolutions.windows(2) {
        if w[0] == 0 || w[0] >= w[1] || w[1] % w[0] != 0 {
            return Err(Error::Config(format!("resolutions {resolutions:?} are not a divisor chain")));
        }
    }
    let levels = resolutions.iter().map(|&r| mask.downsample(r)).collect::<Result<_, _>>()?;
    Ok(MaskPyramid { levels })
}

/// `h ⊙ w + b`, elementwise. All three must share one shape.
pub fn acm_forward<T: Scalar>(h: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, Error> {
    for (name, t) in [("weights", w), ("biases", b)] {
        if t.shape() != h.shape() {
            return Err(Error::Input(format!(
                "ACM {name} shape {:?} differs from hidden shape {:?}",
                t.shape(),
                h.shape()
            )));
        }
    }
    let data = h.data().iter().zip(w.data()).zip(b.data()).map(|((&h, &w), &b)| h * w + b).collect();
    Ok(Tensor::new(h.shape(), data)?)
}

/// Affine combination module: two stacked 3x3 convolutions map the mask to
/// per-position, per-channel weights `W(S) = 1 + r(S)` and biases `b(S)`.
/// The output layers start at zero, so a fresh module is the identity.
#[derive(Clone, Debug)]
pub struct Acm {
    shared: Conv2d,
    weight_out: Conv2d,
    bias_out: Conv2d,
    channels: usize,
}

impl Acm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            shared: Conv2d::same3(store, &format!("{prefix}/shared"), 1, hidden, Init::FanIn, rng),
            weight_out: Conv2d::same3(store, &format!("{prefix}/weight_out"), hidden, channels, Init::Zero, rng),
            bias_out: Conv2d::same3(store, &format!("{prefix}/bias_out"), hidden, channels, Init::Zero, rng),
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(W(S), b(S))` for a `[N, 1, H, W]` mask, each `[N, C, H, W]`.
    pub fn modulation<T: Scalar>(&self, tape: &mut Tape<'_, T>, mask: Var) -> (Var, Var) {
        let s = self.shared.forward(tape, mask);
        let s = tape.leaky_relu(s, T::lit(LEAKY_SLOPE));
        let r = self.weight_out.forward(tape, s);
        let w = tape.add_scalar(r, T::one());
        let b = self.bias_out.forward(tape, s);
        (w, b)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, h: Var, mask: Var) -> Var {
        let (w, b) = self.modulation(tape, mask);
        let hw = tape.mul(h, w);
        tape.add(hw, b)
    }

    /// Evaluates the module on concrete tensors.
    pub fn apply<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        h: &Tensor<T>,
        mask: &SegmentationMask,
    ) -> Result<Tensor<T>, Error> {
        let (w, b) = self.modulation_tensors(store, h.shape(), mask)?;
        acm_forward(h, &w, &b)
    }

    /// `W(S)` and `b(S)` broadcast to the batch of `hidden_shape`.
    pub fn modulation_tensors<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        hidden_shape: &[usize],
        mask: &SegmentationMask,
    ) -> Result<(Tensor<T>, Tensor<T>), Error> {
        if hidden_shape.len() != 4 || hidden_shape[1] != self.channels {
            return Err(Error::Input(format!("ACM expects [N, {}, H, W], got {hidden_shape:?}", self.channels)));
        }
        if hidden_shape[2] != mask.side() || hidden_shape[3] != mask.side() {
            return Err(Error::Input(format!(
                "mask side {} does not match hidden size {}x{}",
                mask.side(),
                hidden_shape[2],
                hidden_shape[3]
            )));
        }
        let n = hidden_shape[0];
        let masks = Tensor::stack0(&vec![mask.to_tensor::<T>(); n])?;
        let mut tape = Tape::frozen(store);
        let m = tape.constant(masks);
        let (w, b) = self.modulation(&mut tape, m);
        Ok((tape.value(w).clone(), tape.value(b).clone()))
    }
}

/// Concatenate the mask as an extra channel, then a 3x3 convolution back to
/// `C` channels.
#[derive(Clone, Debug)]
pub struct ConcatFusion {
    conv: Conv2d,
}

impl ConcatFusion {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        Self { conv: Conv2d::same3(store, &format!("{prefix}/conv"), channels + 1, channels, Init::FanIn, rng) }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, h: Var, mask: Var) -> Var {
        let x = tape.concat1(&[h, mask]);
        let y = self.conv.forward(tape, x);
        tape.leaky_relu(y, T::lit(LEAKY_SLOPE))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Acm,
    Concat,
}

/// How a generator stage injects the mask into its hidden stream.
#[derive(Clone, Debug)]
pub enum Fusion {
    Acm(Acm),
    Concat(ConcatFusion),
}

impl Fusion {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        kind: FusionKind,
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        match kind {
            FusionKind::Acm => Fusion::Acm(Acm::new(store, &format!("{prefix}/acm"), channels, hidden, rng)),
            FusionKind::Concat => Fusion::Concat(ConcatFusion::new(store, &format!("{prefix}/concat"), channels, rng)),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, h: Var, mask: Var) -> Var {
        match self {
            Fusion::Acm(a) => a.forward(tape, h, mask),
            Fusion::Concat(c) => c.forward(tape, h, mask),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use textmask_tensor::{ParamStore64, Tensor64};

    #[test]
    fn pyramid_shapes_and_all_ones() {
        let full = SegmentationMask::full(32);
        let p = build_mask_pyramid(&full, &[8, 16, 32]).unwrap();
        let sides: Vec<usize> = p.levels().iter().map(|m| m.side()).collect();
        assert_eq!(sides, [8, 16, 32]);
        assert!(p.levels().iter().all(|m| m.count() == m.side() * m.side()));
    }

    #[test]
    fn single_pixel_survives_max_pool() {
        let mut m = SegmentationMask::empty(32);
        m.set(17, 30, true);
        let p = build_mask_pyramid(&m, &[8, 16, 32]).unwrap();
        let coarse = p.at(8).unwrap();
        assert_eq!(coarse.count(), 1);
        assert_eq!(coarse.get(17 / 4, 30 / 4), 1);
    }

    #[test]
    fn pyramid_rejects_bad_chains() {
        let m = SegmentationMask::empty(32);
        assert!(matches!(build_mask_pyramid(&m, &[12, 32]), Err(Error::Config(_))));
        assert!(build_mask_pyramid(&m, &[16, 8, 32]).is_err());
        assert!(build_mask_pyramid(&m, &[8, 16]).is_err());
        assert!(build_mask_pyramid(&m, &[]).is_err());
    }

    #[test]
    fn threshold_rule() {
        let m = SegmentationMask::from_gray(2, &[0, 127, 128, 200]).unwrap();
        assert_eq!(m.data(), &[0, 0, 1, 1]);
    }

    #[test]
    fn elementwise_oracle() {
        let h = Tensor64::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor64::new(&[1, 1, 2, 2], vec![2.0, 0.0, 1.0, 1.0]).unwrap();
        let b = Tensor64::new(&[1, 1, 2, 2], vec![0.5, 0.5, 0.0, 1.0]).unwrap();
        assert_eq!(acm_forward(&h, &w, &b).unwrap().data(), &[2.5, 0.5, 3.0, 5.0]);
        let bad = Tensor64::zeros(&[1, 1, 2, 3]);
        assert!(matches!(acm_forward(&h, &bad, &b), Err(Error::Input(_))));
    }

    #[test]
    fn fresh_acm_is_identity() {
        let mut store = ParamStore64::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let acm = Acm::new(&mut store, "acm", 4, 6, &mut rng);
        let h = Tensor64::randn(&[2, 4, 8, 8], 1.0, &mut rng);
        let mut mask = SegmentationMask::empty(8);
        mask.set(2, 3, true);
        assert_eq!(acm.apply(&store, &h, &mask).unwrap(), h);
        let wrong = SegmentationMask::empty(4);
        assert!(matches!(acm.apply(&store, &h, &wrong), Err(Error::Input(_))));
    }
}
