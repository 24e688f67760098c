use crate::error::{Error, Result};
use crate::numerics::{Linear, ParamStore, RngStream, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub up: Linear,
    pub down: Linear,
}

/// Dense mixture of experts: every token visits every expert and the outputs
/// are mixed by a softmax gate.
#[derive(Debug, Clone, PartialEq)]
pub struct MoELayer {
    pub experts: Vec<Expert>,
    pub gate: Linear,
}

pub struct MoEOutput {
    pub out: Var,
    /// `tokens × experts`, rows sum to 1.
    pub routing: Var,
}

impl MoELayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, experts: usize, rng: &mut RngStream) -> Result<Self> {
        if experts == 0 {
            return Err(Error::Config("mixture of experts needs at least one expert".into()));
        }
        let gate = Linear::new(store, &format!("{name}.gate"), d, experts, true, rng);
        let experts = (0..experts)
            .map(|e| Expert {
                up: Linear::new(store, &format!("{name}.expert{e}.up"), d, hidden, true, rng),
                down: Linear::new(store, &format!("{name}.expert{e}.down"), hidden, d, true, rng),
            })
            .collect();
        Ok(Self { experts, gate })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<MoEOutput> {
        let logits = self.gate.forward(tape, store, x)?;
        let routing = tape.softmax_rows(logits, 1.0)?;
        let mut out: Option<Var> = None;
        for (e, ex) in self.experts.iter().enumerate() {
            let h = ex.up.forward(tape, store, x)?;
            let h = tape.relu(h)?;
            let y = ex.down.forward(tape, store, h)?;
            let g = tape.slice_cols(routing, e, 1)?;
            let term = tape.mul(y, g)?;
            out = Some(match out {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        Ok(MoEOutput {
            out: out.expect("at least one expert"),
            routing,
        })
    }
}
