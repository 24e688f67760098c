//! Classification objectives: cross-entropy, poly loss, label smoothing,
//! supervised contrastive loss, the fusion objective and the total objective.
//!
//! Every loss is a mean over the batch and is built on the tape so it can be
//! differentiated and gradient-checked.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Linear, ParamStore, RngStream, Tape, Tensor2, Var};

/// Weights of the composite and total objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_poly: f64,
    pub gamma_poly: f64,
    pub alpha_comp: f64,
    pub lambda_cont: f64,
    pub tau_cont: f64,
    pub eps_smooth: f64,
    pub lambda_dis: f64,
    pub lambda_sync: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_poly: 1.2,
            gamma_poly: 1.2,
            alpha_comp: 0.8,
            lambda_cont: 0.1,
            tau_cont: 0.07,
            eps_smooth: 0.1,
            lambda_dis: 0.3,
            lambda_sync: 0.15,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.alpha_poly >= 0.0, "alpha_poly must be >= 0"),
            (self.gamma_poly > -1.0, "gamma_poly must be > -1"),
            ((0.0..=1.0).contains(&self.alpha_comp), "alpha_comp must lie in [0, 1]"),
            (self.lambda_cont >= 0.0, "lambda_cont must be >= 0"),
            (self.tau_cont > 0.0, "tau_cont must be > 0"),
            ((0.0..1.0).contains(&self.eps_smooth), "eps_smooth must lie in [0, 1)"),
            (self.lambda_dis >= 0.0, "lambda_dis must be >= 0"),
            (self.lambda_sync >= 0.0, "lambda_sync must be >= 0"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }
}

fn check_labels(tape: &Tape, logits: Var, labels: &[usize]) -> Result<(usize, usize)> {
    let (n, c) = tape.shape(logits);
    if labels.len() != n {
        return Err(Error::dim("labels", (n, c), (labels.len(), 1)));
    }
    if n == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
    }
    Ok((n, c))
}

/// `log p_y` per sample as an `N×1` column.
fn log_prob_of_label(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    check_labels(tape, logits, labels)?;
    let logp = tape.log_softmax_rows(logits, 1.0)?;
    let at: Vec<(usize, usize)> = labels.iter().enumerate().map(|(i, &y)| (i, y)).collect();
    tape.pick(logp, &at)
}

pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = log_prob_of_label(tape, logits, labels)?;
    let m = tape.mean_all(lp)?;
    tape.neg(m)
}

/// Mean of `CE_i + α (1 − p_{y_i})^{1+γ}`.
pub fn poly_loss(tape: &mut Tape, logits: Var, labels: &[usize], alpha: f64, gamma: f64) -> Result<Var> {
    if alpha < 0.0 || gamma <= -1.0 {
        return Err(Error::Parameter(format!(
            "poly loss needs alpha >= 0 and gamma > -1, got {alpha}, {gamma}"
        )));
    }
    let lp = log_prob_of_label(tape, logits, labels)?;
    let ce = tape.neg(lp)?;
    if alpha == 0.0 {
        return tape.mean_all(ce);
    }
    let p = tape.exp(lp)?;
    let miss = tape.affine(p, -1.0, 1.0)?;
    let focus = tape.powf(miss, 1.0 + gamma)?;
    let term = tape.scale(focus, alpha)?;
    let per_sample = tape.add(ce, term)?;
    tape.mean_all(per_sample)
}

/// `q_y = 1 − ε + ε/C`, `q_other = ε/C`.
pub fn smooth_targets(label: usize, classes: usize, eps: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Input(format!("eps_smooth {eps} outside [0, 1)")));
    }
    if label >= classes {
        return Err(Error::Input(format!("label {label} out of range for {classes} classes")));
    }
    let off = eps / classes as f64;
    let mut q = vec![off; classes];
    q[label] = 1.0 - eps + off;
    Ok(q)
}

pub fn label_smoothing_loss(tape: &mut Tape, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let (n, c) = check_labels(tape, logits, labels)?;
    let mut targets = Vec::with_capacity(n * c);
    for &y in labels {
        targets.extend(smooth_targets(y, c, eps)?);
    }
    let logp = tape.log_softmax_rows(logits, 1.0)?;
    let weighted = tape.mul_const(logp, targets)?;
    let s = tape.sum_all(weighted)?;
    tape.scale(s, -1.0 / n as f64)
}

/// Row-mean `Σ_c p_t log(p_t / p_s)` from log-probabilities. The teacher side
/// is read as a constant.
pub fn kl_divergence(tape: &mut Tape, teacher_log_probs: Var, student_log_probs: Var) -> Result<Var> {
    let ts = tape.shape(teacher_log_probs);
    let ss = tape.shape(student_log_probs);
    if ts != ss {
        return Err(Error::dim("kl_divergence", ts, ss));
    }
    let lt = tape.value(teacher_log_probs).data().to_vec();
    let pt: Vec<f64> = lt.iter().map(|v| v.exp()).collect();
    let self_term: f64 = pt.iter().zip(&lt).map(|(p, l)| if *p > 0.0 { p * l } else { 0.0 }).sum();
    let cross = tape.mul_const(student_log_probs, pt)?;
    let cross = tape.sum_all(cross)?;
    let n = ts.0 as f64;
    tape.affine(cross, -1.0 / n, self_term / n)
}

/// Two-layer MLP projection with ReLU, followed by row L2 normalisation
/// (`z / sqrt(|z|² + 1e-12)`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl ProjectionHead {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut RngStream) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), d_in, d_in, true, rng),
            out: Linear::new(store, &format!("{name}.out"), d_in, d_out, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, reps: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, reps)?;
        let h = tape.relu(h)?;
        let z = self.out.forward(tape, store, h)?;
        // smooth normalisation so an all-zero row stays finite
        let sq = tape.square(z)?;
        let ss = tape.row_sums(sq)?;
        let ss = tape.affine(ss, 1.0, 1e-12)?;
        let norm = tape.sqrt(ss)?;
        tape.div(z, norm)
    }
}

pub struct ContrastiveTerm {
    pub loss: Var,
    /// Anchors that found a positive and entered the mean.
    pub anchors: usize,
    /// Set when no anchor had a positive and the term fell back to zero.
    pub no_positive: bool,
}

/// For each index, the next index with the same label, wrapping around.
pub fn positive_indices(labels: &[usize]) -> Vec<Option<usize>> {
    let n = labels.len();
    (0..n).map(|i| (1..n).map(|k| (i + k) % n).find(|&j| labels[j] == labels[i])).collect()
}

/// Supervised contrastive loss over unit-norm projections `z` (`N×d`).
pub fn supcon_loss(tape: &mut Tape, z: Var, labels: &[usize], tau: f64) -> Result<ContrastiveTerm> {
    let (n, _) = tape.shape(z);
    if labels.len() != n {
        return Err(Error::dim("supcon labels", tape.shape(z), (labels.len(), 1)));
    }
    if n < 2 {
        return Err(Error::Input(format!("supervised contrastive loss needs at least 2 samples, got {n}")));
    }
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("tau_cont must be positive, got {tau}")));
    }
    let pairs: Vec<(usize, usize)> = positive_indices(labels)
        .into_iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|j| (i, j)))
        .collect();
    if pairs.is_empty() {
        let loss = tape.constant(Tensor2::scalar(0.0));
        return Ok(ContrastiveTerm {
            loss,
            anchors: 0,
            no_positive: true,
        });
    }
    let zt = tape.transpose(z)?;
    let sim = tape.matmul(z, zt)?;
    let mask: Vec<bool> = (0..n * n).map(|k| k / n != k % n).collect();
    let logp = tape.masked_log_softmax_rows(sim, tau, mask)?;
    let picked = tape.pick(logp, &pairs)?;
    let mean = tape.mean_all(picked)?;
    Ok(ContrastiveTerm {
        loss: tape.neg(mean)?,
        anchors: pairs.len(),
        no_positive: false,
    })
}

pub struct FusionLossParts {
    pub total: Var,
    pub comp: Var,
    pub smooth: Var,
    pub contrastive: Option<ContrastiveTerm>,
}

/// `α_comp L_poly + (1 − α_comp) L_smooth + λ_cont L_cont`. The contrastive
/// term is skipped when `z` is absent or `λ_cont = 0`.
pub fn fusion_loss(tape: &mut Tape, logits: Var, labels: &[usize], z: Option<Var>, w: &LossWeights) -> Result<FusionLossParts> {
    let comp = poly_loss(tape, logits, labels, w.alpha_poly, w.gamma_poly)?;
    let smooth = label_smoothing_loss(tape, logits, labels, w.eps_smooth)?;
    let a = tape.scale(comp, w.alpha_comp)?;
    let b = tape.scale(smooth, 1.0 - w.alpha_comp)?;
    let mut total = tape.add(a, b)?;
    let mut contrastive = None;
    if let (Some(z), true) = (z, w.lambda_cont > 0.0) {
        let term = supcon_loss(tape, z, labels, w.tau_cont)?;
        let c = tape.scale(term.loss, w.lambda_cont)?;
        total = tape.add(total, c)?;
        contrastive = Some(term);
    }
    Ok(FusionLossParts {
        total,
        comp,
        smooth,
        contrastive,
    })
}

/// `L_fusion + λ_dis L_dis + λ_sync L_sync` on the tape.
pub fn total_loss(tape: &mut Tape, fusion: Var, dis: Var, sync: Var, lambda_dis: f64, lambda_sync: f64) -> Result<Var> {
    for (name, v) in [("fusion", fusion), ("distillation", dis), ("sync", sync)] {
        let x = tape.scalar(v);
        if !x.is_finite() {
            return Err(Error::Training {
                step: 0,
                message: format!("{name} loss is {x}"),
            });
        }
    }
    let d = tape.scale(dis, lambda_dis)?;
    let s = tape.scale(sync, lambda_sync)?;
    let t = tape.add(fusion, d)?;
    tape.add(t, s)
}

/// Scalar form of [`total_loss`], used when the stage losses are constants.
pub fn total_loss_value(fusion: f64, dis: f64, sync: f64, lambda_dis: f64, lambda_sync: f64) -> Result<f64> {
    for (name, x) in [("fusion", fusion), ("distillation", dis), ("sync", sync)] {
        if !x.is_finite() {
            return Err(Error::Training {
                step: 0,
                message: format!("{name} loss is {x}"),
            });
        }
    }
    Ok(fusion + lambda_dis * dis + lambda_sync * sync)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(tape: &mut Tape, rows: &[&[f64]]) -> Var {
        tape.leaf(Tensor2::from_rows(rows).unwrap())
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut tape = Tape::new();
        let x = logits(&mut tape, &[&[0.0; 7]]);
        let l = cross_entropy(&mut tape, x, &[3]).unwrap();
        assert!((tape.scalar(l) - 7f64.ln()).abs() < 1e-12);

        let x = logits(&mut tape, &[&[2.0f64.ln(), 0.0, 0.0]]);
        let l = cross_entropy(&mut tape, x, &[0]).unwrap();
        assert!((tape.scalar(l) - 2f64.ln()).abs() < 1e-12);

        let x = logits(&mut tape, &[&[800.0, 0.0]]);
        let l = cross_entropy(&mut tape, x, &[0]).unwrap();
        assert_eq!(tape.scalar(l), 0.0);

        assert!(matches!(cross_entropy(&mut tape, x, &[2]), Err(Error::Input(_))));
    }

    #[test]
    fn poly_loss_at_half_probability() {
        let mut tape = Tape::new();
        let x = logits(&mut tape, &[&[0.0, 0.0]]);
        let l = poly_loss(&mut tape, x, &[1], 1.2, 1.2).unwrap();
        let expected = 2f64.ln() + 1.2 * 0.5f64.powf(2.2);
        assert!((tape.scalar(l) - expected).abs() < 1e-12);
        assert!((tape.scalar(l) - 0.9543).abs() < 1e-4);

        let ce = cross_entropy(&mut tape, x, &[1]).unwrap();
        let p0 = poly_loss(&mut tape, x, &[1], 0.0, 1.2).unwrap();
        assert_eq!(tape.scalar(ce), tape.scalar(p0));
    }

    #[test]
    fn smoothed_targets() {
        let q = smooth_targets(2, 7, 0.1).unwrap();
        assert!((q[2] - 0.914_285_714_285_714_3).abs() < 1e-12);
        assert!((q[0] - 0.014_285_714_285_714_285).abs() < 1e-12);
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(smooth_targets(0, 3, 0.0).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(smooth_targets(0, 3, 1.0).is_err());

        let mut tape = Tape::new();
        let x = logits(&mut tape, &[&[0.3, -1.0, 2.0], &[1.0, 1.0, 0.0]]);
        let ls = label_smoothing_loss(&mut tape, x, &[2, 0], 0.0).unwrap();
        let ce = cross_entropy(&mut tape, x, &[2, 0]).unwrap();
        assert!((tape.scalar(ls) - tape.scalar(ce)).abs() < 1e-15);
    }

    #[test]
    fn supcon_closed_forms() {
        let tau = 0.07;
        // anchor and its positive coincide, one orthogonal negative
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor2::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap());
        let term = supcon_loss(&mut tape, z, &[0, 0, 1], tau).unwrap();
        // anchors 0 and 1 have positives, anchor 2 is skipped
        assert_eq!(term.anchors, 2);
        let expected = -((1.0f64 / tau).exp() / ((1.0f64 / tau).exp() + 1.0)).ln();
        assert!((tape.scalar(term.loss) - expected).abs() < 1e-15);
        assert!((expected - 6.2e-7).abs() < 1e-8);

        let z = tape.leaf(Tensor2::filled(5, 3, 1.0 / 3f64.sqrt()));
        let term = supcon_loss(&mut tape, z, &[1, 1, 1, 1, 1], tau).unwrap();
        assert!((tape.scalar(term.loss) - 4f64.ln()).abs() < 1e-12);

        let z = tape.leaf(Tensor2::identity(3));
        let term = supcon_loss(&mut tape, z, &[0, 1, 2], tau).unwrap();
        assert!(term.no_positive);
        assert_eq!(tape.scalar(term.loss), 0.0);
    }

    #[test]
    fn positives_wrap_around() {
        assert_eq!(positive_indices(&[0, 1, 0, 2]), vec![Some(2), None, Some(0), None]);
    }

    #[test]
    fn fusion_loss_endpoints_and_hand_sum() {
        let mut tape = Tape::new();
        let x = logits(&mut tape, &[&[0.2, -0.4, 1.0], &[0.0, 0.5, 0.1], &[1.5, 0.0, -1.0], &[0.3, 0.3, 0.3]]);
        let y = [2, 1, 0, 1];
        let w = LossWeights {
            lambda_cont: 0.0,
            alpha_comp: 1.0,
            ..LossWeights::default()
        };
        let parts = fusion_loss(&mut tape, x, &y, None, &w).unwrap();
        let poly = poly_loss(&mut tape, x, &y, 1.2, 1.2).unwrap();
        assert_eq!(tape.scalar(parts.total), tape.scalar(poly));

        let z = tape.leaf(Tensor2::from_rows(&[[1.0, 0.0], [0.6, 0.8], [0.0, 1.0], [0.8, -0.6]]).unwrap());
        let w = LossWeights::default();
        let parts = fusion_loss(&mut tape, x, &y, Some(z), &w).unwrap();
        let poly = poly_loss(&mut tape, x, &y, 1.2, 1.2).unwrap();
        let smooth = label_smoothing_loss(&mut tape, x, &y, 0.1).unwrap();
        let cont = supcon_loss(&mut tape, z, &y, 0.07).unwrap();
        let hand = 0.8 * tape.scalar(poly) + 0.2 * tape.scalar(smooth) + 0.1 * tape.scalar(cont.loss);
        assert!((tape.scalar(parts.total) - hand).abs() < 1e-12);
    }

    #[test]
    fn total_objective_arithmetic() {
        assert!((total_loss_value(1.0, 2.0, 2.0, 0.3, 0.15).unwrap() - 1.9).abs() < 1e-12);
        assert_eq!(total_loss_value(1.25, 9.0, 9.0, 0.0, 0.0).unwrap(), 1.25);
        assert!(matches!(total_loss_value(f64::NAN, 0.0, 0.0, 0.3, 0.15), Err(Error::Training { .. })));
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor2::scalar(1.0));
        let d = tape.leaf(Tensor2::scalar(2.0));
        let s = tape.leaf(Tensor2::scalar(2.0));
        let t = total_loss(&mut tape, f, d, s, 0.3, 0.15).unwrap();
        assert!((tape.scalar(t) - 1.9).abs() < 1e-12);
    }

    #[test]
    fn kl_is_zero_for_identical_and_ln2_for_point_mass() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor2::from_rows(&[[0.1, 0.5, -0.2]]).unwrap());
        let la = tape.log_softmax_rows(a, 1.0).unwrap();
        let kl = kl_divergence(&mut tape, la, la).unwrap();
        assert!(tape.scalar(kl).abs() < 1e-15);

        let t = tape.constant(Tensor2::from_rows(&[[60.0, 0.0]]).unwrap());
        let lt = tape.log_softmax_rows(t, 1.0).unwrap();
        let s = tape.leaf(Tensor2::from_rows(&[[0.0, 0.0]]).unwrap());
        let ls = tape.log_softmax_rows(s, 1.0).unwrap();
        let kl = kl_divergence(&mut tape, lt, ls).unwrap();
        assert!((tape.scalar(kl) - 2f64.ln()).abs() < 1e-12);
    }
}
