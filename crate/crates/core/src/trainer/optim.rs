use crate::error::{Error, Result};
use crate::numerics::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// AdamW with bias correction and decoupled weight decay applied only to
/// parameters with `decay_enabled`.
#[derive(Debug, Clone)]
pub struct AdamW {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, weight_decay: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Parameter(format!("learning rate must be positive, got {lr}")));
        }
        if self.m.len() != store.len() {
            return Err(Error::Parameter("optimizer state does not match the parameter store".into()));
        }
        if let Some(p) = store.params().iter().find(|p| !p.value.grad().iter().all(|g| g.is_finite())) {
            return Err(Error::Training {
                step: self.step + 1,
                message: format!("non-finite gradient in `{}`", p.name),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (k, p) in store.params_mut().iter_mut().enumerate() {
            let decay = if p.decay_enabled { lr * weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let grad = p.value.grad().to_vec();
            for (i, (theta, g)) in p.value.data_mut().iter_mut().zip(grad).enumerate() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *theta -= decay * *theta;
                *theta -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over every gradient in `stores`.
pub fn grad_norm(stores: &[&ParamStore]) -> f64 {
    stores
        .iter()
        .flat_map(|s| s.params())
        .flat_map(|p| p.value.grad())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the scale applied (1 when no clipping happened).
pub fn clip_grad_norm(stores: &mut [&mut ParamStore], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Parameter(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = {
        let refs: Vec<&ParamStore> = stores.iter().map(|s| &**s).collect();
        grad_norm(&refs)
    };
    if norm <= max_norm || norm == 0.0 {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    for s in stores.iter_mut() {
        for p in s.params_mut() {
            for g in p.value.grad_mut() {
                *g *= scale;
            }
        }
    }
    Ok(scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor2;

    fn scalar_store(value: f64, decay: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor2::scalar(value), decay).unwrap();
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut s = scalar_store(0.7, true);
        let mut opt = AdamW::new(&s);
        for _ in 0..5 {
            opt.step(&mut s, 1e-2, 0.0).unwrap();
        }
        assert_eq!(s.params()[0].value.data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = scalar_store(0.0, true);
        s.params_mut()[0].value.grad_mut()[0] = 1.0;
        let mut opt = AdamW::new(&s);
        opt.step(&mut s, 1e-3, 0.0).unwrap();
        let expected = -1e-3 / (1.0 + ADAM_EPS);
        assert!((s.params()[0].value.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn decay_only_shrinks_geometrically() {
        let mut s = scalar_store(2.0, true);
        let mut opt = AdamW::new(&s);
        for _ in 0..3 {
            opt.step(&mut s, 0.1, 0.01).unwrap();
        }
        let expected = 2.0 * (1.0 - 0.1 * 0.01f64).powi(3);
        assert!((s.params()[0].value.data()[0] - expected).abs() < 1e-15);

        let mut s = scalar_store(2.0, false);
        let mut opt = AdamW::new(&s);
        opt.step(&mut s, 0.1, 0.01).unwrap();
        assert_eq!(s.params()[0].value.data()[0], 2.0);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut s = scalar_store(0.0, true);
        s.params_mut()[0].value.grad_mut()[0] = f64::NAN;
        let mut opt = AdamW::new(&s);
        match opt.step(&mut s, 1e-3, 0.0) {
            Err(Error::Training { message, .. }) => assert!(message.contains("`w`")),
            other => panic!("expected training error, got {other:?}"),
        }
    }

    #[test]
    fn clipping_examples() {
        let mut s = ParamStore::new();
        s.add("a", Tensor2::zeros(1, 2), true).unwrap();
        s.params_mut()[0].value.grad_mut().copy_from_slice(&[0.3, 0.4]);
        assert_eq!(clip_grad_norm(&mut [&mut s], 1.0).unwrap(), 1.0);

        s.params_mut()[0].value.grad_mut().copy_from_slice(&[1.2, 1.6]);
        let scale = clip_grad_norm(&mut [&mut s], 1.0).unwrap();
        assert!((scale - 0.5).abs() < 1e-15);
        assert!((grad_norm(&[&s]) - 1.0).abs() < 1e-12);

        s.zero_grad();
        assert_eq!(clip_grad_norm(&mut [&mut s], 1.0).unwrap(), 1.0);
    }
}
