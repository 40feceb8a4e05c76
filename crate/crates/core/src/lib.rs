//! Temporo-spatial vision transformer for satellite image time series.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`autodiff`]), transformer blocks ([`nn`]), SITS tokenisation and
//! position encodings ([`embedding`]), the model itself ([`model`]),
//! training and evaluation ([`training`]) and the sample file format plus a
//! synthetic phenology dataset ([`data`]).

pub mod autodiff;
pub mod checkpoint;
pub mod data;

pub mod embedding;
pub mod error;
mod kernels;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Tape, Var};
pub use embedding::{DayIndex, PatchSize, SitsTensor};
pub use error::{Error, Result};
pub use model::{
    ClsInteractions, ClsMode, Factorization, InputNorm, PeMode, Task, TsvitConfig, TsvitModel,
};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::{Element, Tensor};
