//! Plain SGD and Adam. Both consume the gradient buffers and zero them
//! after the update, so a stale gradient can never leak into the next step.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn take_grad(p: &Tensor, idx: usize) -> Result<Vec<f64>> {
    p.grad().ok_or_else(|| Error::MissingGrad { what: format!("parameter #{idx}") })
}

/// `w <- w - lr * g` for every parameter, then zero the gradients.
pub fn sgd_step(params: &[Tensor], lr: f64) -> Result<()> {
    for (idx, p) in params.iter().enumerate() {
        let g = take_grad(p, idx)?;
        {
            let mut data = p.data_mut();
            for (w, gi) in data.iter_mut().zip(&g) {
                *w -= lr * gi;
            }
        }
        p.zero_grad();
    }
    Ok(())
}

/// Adam with bias correction (Kingma & Ba defaults). State is positional:
/// call `step` with the same parameter list, in the same order, every time.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Adam {
        Adam { lr, beta1, beta2, eps, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        assert_eq!(self.m.len(), params.len(), "Adam called with a different parameter list");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, p) in params.iter().enumerate() {
            let g = take_grad(p, idx)?;
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            {
                let mut data = p.data_mut();
                for i in 0..g.len() {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_basic_update() {
        let w = Tensor::param(&[1], vec![1.0]).unwrap();
        w.accum_grad(&[0.5]);
        sgd_step(&[w.clone()], 0.1).unwrap();
        assert_eq!(w.to_vec(), vec![0.95]);
        assert_eq!(w.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn sgd_zero_grad_leaves_parameter_unchanged() {
        let w = Tensor::param(&[2], vec![3.0, -1.0]).unwrap();
        sgd_step(&[w.clone()], 0.1).unwrap();
        assert_eq!(w.to_vec(), vec![3.0, -1.0]);
    }

    #[test]
    fn sgd_missing_grad_errors() {
        let w = Tensor::from_vec(&[1], vec![1.0]).unwrap(); // requires_grad = false
        match sgd_step(&[w], 0.1) {
            Err(Error::MissingGrad { .. }) => {}
            other => panic!("expected MissingGrad, got {:?}", other.err()),
        }
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // Closed form at t=1: m_hat = g, v_hat = g^2, so the update is
        // lr * g / (|g| + eps) ~= lr * sign(g) for any |g| >> eps.
        let lr = 0.01;
        for &g in &[0.003, 0.42, 17.0, -5.5] {
            let w = Tensor::param(&[1], vec![2.0]).unwrap();
            w.accum_grad(&[g]);
            let mut adam = Adam::new(lr);
            adam.step(&[w.clone()]).unwrap();
            let delta = (w.to_vec()[0] - 2.0).abs();
            let expected = lr * g.abs() / (g.abs() + 1e-8);
            assert!((delta - expected).abs() < 1e-15, "g={g} delta={delta}");
            assert!((delta - lr).abs() < 1e-5 * lr, "first-step magnitude should be ~lr");
        }
    }

    #[test]
    fn adam_zeroes_grads() {
        let w = Tensor::param(&[3], vec![0.0; 3]).unwrap();
        w.accum_grad(&[1.0, -2.0, 3.0]);
        let mut adam = Adam::new(0.1);
        adam.step(&[w.clone()]).unwrap();
        assert_eq!(w.grad().unwrap(), vec![0.0; 3]);
    }
}
