//! DEFLECT: adapting an RGB-pretrained vision transformer to multispectral
//! imagery by untangled patch embedding, untangled attention and
//! norm-constrained embedding deflection, next to standard
//! parameter-efficient finetuning baselines.
//!
//! The crate is self-contained: it ships its own dense-tensor autodiff
//! engine, a configurable ViT encoder, synthetic multispectral data
//! generation, binary image/checkpoint formats, and a training/evaluation
//! harness with diagnostic suites for the algebraic identities and parameter
//! budgets the adapter design rests on.

pub mod adapter;
pub mod baselines;
pub mod budget;
pub mod diagnostics;
pub mod experiment;
pub mod data;
pub mod error;
pub mod hash;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;
pub mod upe;
pub mod vit;

pub use error::{Error, Result};
