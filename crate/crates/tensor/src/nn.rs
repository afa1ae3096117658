//! Parameterised building blocks recorded onto a [`Tape`].

use rand::Rng;

use crate::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Slope used by every leaky ReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.2;

/// How a layer's weights are initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn,
    /// Uniform in `±gain/sqrt(fan_in)`.
    Scaled(f64),
    /// All zeros.
    Zero,
}

fn init_tensor<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, init: Init, rng: &mut R) -> Tensor<T> {
    match init {
        Init::FanIn => Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng),
        Init::Scaled(g) => Tensor::uniform(shape, g / (fan_in as f64).sqrt(), rng),
        Init::Zero => Tensor::zeros(shape),
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight =
            store.add(format!("{name}/weight"), init_tensor(&[out_ch, in_ch, kernel, kernel], fan_in, init, rng));
        let bias = store.add(format!("{name}/bias"), Tensor::zeros(&[out_ch]));
        Self { weight, bias, stride, pad }
    }

    /// 3x3, stride 1, same padding.
    pub fn same3<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, in_ch, out_ch, 3, 1, 1, init, rng)
    }

    /// 4x4, stride 2, padding 1: halves the spatial size.
    pub fn down4<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, in_ch, out_ch, 4, 2, 1, Init::FanIn, rng)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.conv2d(x, w, self.stride, self.pad);
        tape.channel_bias(y, b)
    }
}

/// `y = x Wᵀ + b` over `[N, in]` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}/weight"), init_tensor(&[outputs, inputs], inputs, init, rng));
        let bias = store.add(format!("{name}/bias"), Tensor::zeros(&[outputs]));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul_t(x, w);
        tape.channel_bias(y, b)
    }
}

/// Gated recurrent unit cell.
#[derive(Clone, Debug)]
pub struct GruCell {
    input: Linear,
    hidden: Linear,
    pub hidden_size: usize,
}

impl GruCell {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Self {
        let input = Linear::new(store, &format!("{name}/input"), input_size, 3 * hidden_size, Init::FanIn, rng);
        let hidden = Linear::new(store, &format!("{name}/hidden"), hidden_size, 3 * hidden_size, Init::FanIn, rng);
        Self { input, hidden, hidden_size }
    }

    /// One step. `x: [N, input]`, `h: [N, hidden]`.
    pub fn step<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, h: Var) -> Var {
        let hs = self.hidden_size;
        let gi = self.input.forward(tape, x);
        let gh = self.hidden.forward(tape, h);
        let (ir, iz, inn) = (tape.slice1(gi, 0, hs), tape.slice1(gi, hs, hs), tape.slice1(gi, 2 * hs, hs));
        let (hr, hz, hn) = (tape.slice1(gh, 0, hs), tape.slice1(gh, hs, hs), tape.slice1(gh, 2 * hs, hs));
        let r = tape.add(ir, hr);
        let r = tape.sigmoid(r);
        let z = tape.add(iz, hz);
        let z = tape.sigmoid(z);
        let rn = tape.mul(r, hn);
        let n = tape.add(inn, rn);
        let n = tape.tanh(n);
        // h' = n + z (h - n)
        let d = tape.sub(h, n);
        let zd = tape.mul(z, d);
        tape.add(n, zd)
    }
}
