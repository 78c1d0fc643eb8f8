//! Adam and exponential moving averages over parameter lists.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
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
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::invalid("optimizer state does not match parameter list"));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].len() != p.len() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((x, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gr;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gr * gr;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `shadow <- decay * shadow + (1 - decay) * weights`.
pub fn ema_update(shadow: &mut [Tensor], weights: &[Tensor], decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::invalid(format!("ema decay must lie in [0, 1], got {decay}")));
    }
    if shadow.len() != weights.len() {
        return Err(Error::invalid("ema shadow and weights differ in length"));
    }
    for (s, w) in shadow.iter_mut().zip(weights) {
        if s.shape() != w.shape() {
            return Err(Error::ShapeMismatch {
                op: "ema",
                lhs: s.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        for (a, &b) in s.data_mut().iter_mut().zip(w.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()];
        let g = vec![Tensor::new(vec![2], vec![0.3, -5.0]).unwrap()];
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        opt.step(&mut p, &g).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = vec![Tensor::scalar(3.0)];
        let mut opt = Adam::new(0.05, 0.9, 0.999);
        for _ in 0..500 {
            let g = vec![Tensor::scalar(2.0 * p[0].item())];
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p[0].item().abs() < 1e-2);
    }

    #[test]
    fn ema_limits() {
        let w = vec![Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()];
        let mut s = vec![Tensor::zeros(&[2])];
        ema_update(&mut s, &w, 0.0).unwrap();
        assert_eq!(s, w);
        let mut s = vec![Tensor::zeros(&[2])];
        ema_update(&mut s, &w, 1.0).unwrap();
        assert_eq!(s[0].data(), &[0.0, 0.0]);
        assert!(ema_update(&mut s, &w, 1.5).is_err());
    }
}
