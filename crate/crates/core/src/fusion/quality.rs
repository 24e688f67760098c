use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor2, Var};

pub const Q_MIN: f64 = 0.1;
pub const Q_MAX: f64 = 1.0;

/// Between-class over within-class variance of `features`.
///
/// Inter is the variance of the class means around their unweighted average,
/// intra the pooled within-class variance; both are averaged over
/// dimensions. Returns `None` when fewer than two classes are present.
pub fn quality_stats(features: &Tensor2, labels: &[usize], eps: f64) -> Result<Option<f64>> {
    let (n, d) = features.shape();
    if labels.len() != n {
        return Err(Error::dim("quality_stats", (labels.len(), 1), (n, d)));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut sums = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (r, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for (s, &x) in sums[y].iter_mut().zip(features.row(r)) {
            *s += x;
        }
    }
    let present: Vec<usize> = (0..classes).filter(|&c| counts[c] > 0).collect();
    if present.len() < 2 {
        return Ok(None);
    }
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|c| sums[c].iter().map(|s| if counts[c] > 0 { s / counts[c] as f64 } else { 0.0 }).collect())
        .collect();
    let k = present.len() as f64;
    let mut inter = 0.0;
    for j in 0..d {
        let grand = present.iter().map(|&c| means[c][j]).sum::<f64>() / k;
        inter += present.iter().map(|&c| (means[c][j] - grand).powi(2)).sum::<f64>() / k;
    }
    inter /= d as f64;
    let mut intra = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        intra += features.row(r).iter().zip(&means[y]).map(|(x, m)| (x - m).powi(2)).sum::<f64>();
    }
    intra /= (n * d) as f64;
    Ok(Some(inter / (intra + eps)))
}

/// Mean Shannon entropy (nats) of probability rows.
pub fn quality_entropy(probs: &Tensor2) -> Result<f64> {
    let (n, _) = probs.shape();
    if n == 0 {
        return Err(Error::Input("no probability rows".into()));
    }
    let mut total = 0.0;
    for r in 0..n {
        let row = probs.row(r);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
            return Err(Error::Input(format!("row {r} is not a distribution (sum {s})")));
        }
        total -= row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
    }
    Ok(total / n as f64)
}

/// `σ(mean(H) · w + b)` as a `1×1` value.
pub fn quality_neural(tape: &mut Tape, features: Var, w: Var, b: Var) -> Result<Var> {
    let mean = tape.mean_pool_rows(features)?;
    let s = tape.matmul(mean, w)?;
    let s = tape.add(s, b)?;
    tape.sigmoid(s)
}

/// `clamp(σ(indicators · W_q), 0.1, 1.0)` for a `1×3` indicator row.
pub fn quality_score(tape: &mut Tape, indicators: Var, w_q: Var) -> Result<Var> {
    if !tape.value(indicators).is_finite() {
        return Err(Error::Input("non-finite quality indicator".into()));
    }
    let s = tape.matmul(indicators, w_q)?;
    let s = tape.sigmoid(s)?;
    tape.clamp(s, Q_MIN, Q_MAX)
}

/// `Σ_m Q_m H_m / Σ_m Q_m` with `1×1` quality scores.
pub fn global_context(tape: &mut Tape, features: &[Var], quality: &[Var]) -> Result<Var> {
    if features.is_empty() || features.len() != quality.len() {
        return Err(Error::Input(format!("{} feature blocks for {} scores", features.len(), quality.len())));
    }
    let mut num = tape.mul(features[0], quality[0])?;
    let mut den = quality[0];
    for (&h, &q) in features.iter().zip(quality).skip(1) {
        let t = tape.mul(h, q)?;
        num = tape.add(num, t)?;
        den = tape.add(den, q)?;
    }
    tape.div(num, den)
}

/// `σ([H ; C] W_g) ⊙ H`.
pub fn gate(tape: &mut Tape, features: Var, context: Var, w_g: Var) -> Result<Var> {
    let cat = tape.concat_cols(&[features, context])?;
    let g = tape.matmul(cat, w_g)?;
    let g = tape.sigmoid(g)?;
    tape.mul(g, features)
}

/// Running per-modality `q_stats`, used when a batch cannot supply one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityEma {
    pub decay: f64,
    pub values: Vec<Option<f64>>,
}

impl QualityEma {
    pub fn new(modalities: usize, decay: f64) -> Self {
        Self {
            decay,
            values: vec![None; modalities],
        }
    }

    /// Folds in a batch statistic (initialising on the first one) and
    /// returns the value to feed the quality head: the batch value when
    /// present, otherwise the running one (0 before any observation).
    pub fn observe(&mut self, m: usize, batch: Option<f64>) -> f64 {
        match batch {
            Some(v) => {
                self.values[m] = Some(match self.values[m] {
                    Some(old) => self.decay * old + (1.0 - self.decay) * v,
                    None => v,
                });
                v
            }
            None => self.current(m),
        }
    }

    pub fn current(&self, m: usize) -> f64 {
        self.values[m].unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_examples() {
        let same = Tensor2::filled(4, 3, 0.5);
        assert_eq!(quality_stats(&same, &[0, 0, 1, 1], 1e-6).unwrap(), Some(0.0));
        let split = Tensor2::from_vec(4, 1, vec![-1.0, -1.0, 1.0, 1.0]).unwrap();
        let q = quality_stats(&split, &[0, 0, 1, 1], 1e-6).unwrap().unwrap();
        assert!((q - 1e6).abs() < 1e-6);
        let noisy = Tensor2::from_vec(4, 1, vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        assert_eq!(quality_stats(&noisy, &[0, 0, 1, 1], 1e-6).unwrap(), Some(0.0));
        assert_eq!(quality_stats(&split, &[2, 2, 2, 2], 1e-6).unwrap(), None);
    }

    #[test]
    fn entropy_examples() {
        let onehot = Tensor2::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(quality_entropy(&onehot).unwrap(), 0.0);
        let uniform = Tensor2::filled(3, 7, 1.0 / 7.0);
        assert!((quality_entropy(&uniform).unwrap() - 7f64.ln()).abs() < 1e-12);
        let half = Tensor2::filled(1, 2, 0.5);
        assert!((quality_entropy(&half).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(quality_entropy(&Tensor2::filled(1, 2, 0.6)).is_err());
    }

    #[test]
    fn neural_and_score_examples() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor2::from_rows(&[[1.0, 2.0], [3.0, -2.0]]).unwrap());
        let w = tape.constant(Tensor2::zeros(2, 1));
        let b = tape.constant(Tensor2::scalar(0.0));
        let q = quality_neural(&mut tape, h, w, b).unwrap();
        assert_eq!(tape.scalar(q), 0.5);
        let w = tape.constant(Tensor2::from_vec(2, 1, vec![0.5, -1.0]).unwrap());
        let b = tape.constant(Tensor2::scalar(0.2));
        let q = quality_neural(&mut tape, h, w, b).unwrap();
        let expected = 1.0 / (1.0 + (-(2.0 * 0.5 + 0.0 * -1.0 + 0.2f64)).exp());
        assert!((tape.scalar(q) - expected).abs() < 1e-15);

        let ind = tape.constant(Tensor2::row_vector(&[3.0, 1.0, 0.5]));
        let zero = tape.constant(Tensor2::zeros(3, 1));
        let q = quality_score(&mut tape, ind, zero).unwrap();
        assert_eq!(tape.scalar(q), 0.5);
        let neg = tape.constant(Tensor2::filled(3, 1, -100.0));
        let q = quality_score(&mut tape, ind, neg).unwrap();
        assert_eq!(tape.scalar(q), Q_MIN);
        let bad = tape.constant(Tensor2::row_vector(&[f64::NAN, 0.0, 0.0]));
        assert!(quality_score(&mut tape, bad, zero).is_err());
    }

    #[test]
    fn context_and_gate_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor2::row_vector(&[1.0, 0.0]));
        let b = tape.constant(Tensor2::row_vector(&[0.0, 1.0]));
        let c = tape.constant(Tensor2::row_vector(&[2.0, 2.0]));
        let q1 = tape.constant(Tensor2::scalar(1.0));
        let q01 = tape.constant(Tensor2::scalar(0.1));
        let ctx = global_context(&mut tape, &[a, b, c], &[q1, q01, q01]).unwrap();
        let v = tape.value(ctx).data().to_vec();
        assert!((v[0] - (1.0 + 0.2) / 1.2).abs() < 1e-15);
        assert!((v[1] - (0.1 + 0.2) / 1.2).abs() < 1e-15);
        let eq = global_context(&mut tape, &[a, b], &[q01, q01]).unwrap();
        assert_eq!(tape.value(eq).data(), &[0.5, 0.5]);

        let w0 = tape.constant(Tensor2::zeros(4, 2));
        let g = gate(&mut tape, c, a, w0).unwrap();
        assert_eq!(tape.value(g).data(), &[1.0, 1.0]);
        let w = tape.constant(Tensor2::from_rows(&[[1.0, 0.0], [0.0, -1.0], [0.5, 0.0], [0.0, 0.5]]).unwrap());
        let g = gate(&mut tape, a, b, w).unwrap();
        // [1, 0, 0, 1] · W = [1, 0.5]
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        assert_eq!(tape.value(g).data(), &[s(1.0), 0.0]);
    }

    #[test]
    fn ema_initialises_then_decays() {
        let mut ema = QualityEma::new(1, 0.99);
        assert_eq!(ema.observe(0, None), 0.0);
        assert_eq!(ema.observe(0, Some(2.0)), 2.0);
        assert_eq!(ema.observe(0, Some(1.0)), 1.0);
        assert!((ema.current(0) - (0.99 * 2.0 + 0.01)).abs() < 1e-15);
        assert_eq!(ema.observe(0, None), ema.current(0));
    }
}
