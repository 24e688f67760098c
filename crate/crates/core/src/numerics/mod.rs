//! Dense tensors, a reverse-mode tape, a deterministic RNG, and a
//! central-difference gradient checker.

mod gradcheck;
mod layers;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, CheckReport};
pub use layers::{dropout, LayerNorm, Linear};
pub use rng::RngStream;
pub use tape::{KinkTrace, Tape, Var};
pub use tensor::{ParamId, ParamStore, Parameter, Tensor2};
