//! CPU tensors with tape-based reverse-mode differentiation, generic over
//! `f32` and `f64`.

mod nn;
mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use nn::{Conv2d, GruCell, Init, Linear, LEAKY_SLOPE};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use scalar::{gemm, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: expected shape {expected:?}, got {got:?}")]
    Shape { op: &'static str, expected: Vec<usize>, got: Vec<usize> },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("empty input")]
    Empty,
}

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
