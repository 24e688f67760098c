use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, RngStream, Tape, Tensor2, Var};

/// `x W + b` with Glorot-initialised `W` and a zero bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut RngStream) -> Self {
        let weight = store.weight(format!("{name}.weight"), Tensor2::glorot(d_in, d_out, rng));
        let bias = bias.then(|| store.bias(format!("{name}.bias"), Tensor2::zeros(1, d_out)));
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Inverted dropout: kept entries are scaled by `1 / (1 - p)`.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, rng: &mut RngStream) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(format!("dropout rate {p} outside [0, 1)")));
    }
    if p == 0.0 {
        return Ok(x);
    }
    let n = tape.value(x).len();
    let keep = 1.0 / (1.0 - p);
    let mask = (0..n).map(|_| if rng.bernoulli(p) { 0.0 } else { keep }).collect();
    tape.mul_const(x, mask)
}

/// Row-wise layer normalisation with learned gain and bias (`1×d` each).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.bias(format!("{name}.gain"), Tensor2::filled(1, d, 1.0)),
            bias: store.bias(format!("{name}.bias"), Tensor2::zeros(1, d)),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let d = tape.shape(x).1 as f64;
        let sum = tape.row_sums(x)?;
        let mean = tape.scale(sum, 1.0 / d)?;
        let centered = tape.sub(x, mean)?;
        let sq = tape.square(centered)?;
        let ss = tape.row_sums(sq)?;
        let var = tape.affine(ss, 1.0 / d, self.eps)?;
        let sd = tape.sqrt(var)?;
        let normed = tape.div(centered, sd)?;
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let scaled = tape.mul(normed, g)?;
        tape.add(scaled, b)
    }
}
