//! Multimodal conversational emotion recognition at desk scale.

pub mod datagen;
pub mod distill;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradsuite;
pub mod graphnets;
pub mod losses;
pub mod numerics;
pub mod sync;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{finite_diff_check, CheckReport, ParamId, ParamStore, Parameter, RngStream, Tape, Tensor2, Var};
