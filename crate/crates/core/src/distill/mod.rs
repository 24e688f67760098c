//! Teacher to student distillation.
//!
//! The loss mixes hard-label cross-entropy with the temperature-scaled
//! divergence `KL(p_t || p_s)`, teacher in the numerator of the log. Teacher
//! logits always enter the tape detached.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{cross_entropy, kl_divergence};
use crate::numerics::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub alpha_dis: f64,
    pub tau_dis: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha_dis: 0.65,
            tau_dis: 2.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_dis) {
            return Err(Error::Config(format!("alpha_dis {} outside [0, 1]", self.alpha_dis)));
        }
        if !(self.tau_dis > 0.0) {
            return Err(Error::Config(format!("tau_dis must be positive, got {}", self.tau_dis)));
        }
        Ok(())
    }

    /// Configuration with the distillation term switched off.
    pub fn hard_labels_only(self) -> Self {
        Self { alpha_dis: 1.0, ..self }
    }
}

/// `α CE(s, y) + (1 − α) τ² KL(softmax(t/τ) || softmax(s/τ))`, batch mean.
pub fn kd_loss(tape: &mut Tape, student_logits: Var, teacher_logits: Var, labels: &[usize], cfg: &DistillConfig) -> Result<Var> {
    cfg.validate()?;
    let ss = tape.shape(student_logits);
    let ts = tape.shape(teacher_logits);
    if ss != ts {
        return Err(Error::dim("kd_loss", ss, ts));
    }
    let teacher = tape.detach(teacher_logits);
    let ce = cross_entropy(tape, student_logits, labels)?;
    let tau = cfg.tau_dis;
    let lt = tape.log_softmax_rows(teacher, tau)?;
    let ls = tape.log_softmax_rows(student_logits, tau)?;
    let kl = kl_divergence(tape, lt, ls)?;
    let a = tape.scale(ce, cfg.alpha_dis)?;
    let b = tape.scale(kl, (1.0 - cfg.alpha_dis) * tau * tau)?;
    tape.add(a, b)
}
