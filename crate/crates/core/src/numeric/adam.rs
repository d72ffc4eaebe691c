use super::{Matrix, Parameterized, Real};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for every trainable tensor of one model.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Matrix<T>>,
    second: Vec<Matrix<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One bias-corrected Adam update of `model` with `grads` (same structure).
    /// Nothing is modified if any gradient is non-finite.
    pub fn step<M: Parameterized<T>>(&mut self, model: &mut M, grads: &M) -> Result<()> {
        let named = grads.named_tensors(false);
        if let Some((name, _)) = named.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        let mut params = Vec::new();
        model.tensors_mut(false, &mut params);
        if params.len() != named.len() {
            return Err(Error::shape("adam_step", "parameter and gradient structures differ"));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
            self.second = self.first.clone();
        }
        for (p, (name, g)) in params.iter().zip(&named) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam_step", format!("gradient shape for `{name}`")));
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        for (((p, (_, g)), m), v) in params
            .into_iter()
            .zip(&named)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut());
            for (((w, &gv), mv), vv) in iter {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let m_hat = *mv * inv_bc1;
                let v_hat = *vv * inv_bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Linear;

    fn layer(w: &[f64]) -> Linear<f64> {
        Linear {
            weight: Matrix::from_vec(1, w.len(), w.to_vec()).unwrap(),
            bias: Matrix::zeros(1, 1),
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = layer(&[0.5, -1.5]);
        let before = p.clone();
        let g = layer(&[0.0, 0.0]);
        let mut s = AdamState::new(AdamConfig::default());
        s.step(&mut p, &g).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_is_normalized_gradient() {
        let g = [0.3, -2.0];
        let mut p = layer(&[1.0, 1.0]);
        let mut s = AdamState::new(AdamConfig::default());
        s.step(&mut p, &layer(&g)).unwrap();
        for (i, gv) in g.iter().enumerate() {
            let expected = 1.0 - 1e-3 * gv / (gv.abs() + 1e-8);
            assert!((p.weight.get(0, i) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = layer(&[1.0]);
        let mut g = layer(&[0.0]);
        g.bias.set(0, 0, f64::NAN);
        let mut s = AdamState::new(AdamConfig::default());
        match s.step(&mut p, &g) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "bias"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p, layer(&[1.0]));
    }
}
