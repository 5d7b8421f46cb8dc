use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

/// AdamW (decoupled weight decay) or plain SGD with the same decay rule.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn check_state(&mut self, params: &ParamStore) -> Result<()> {
        if self.m.is_empty() && self.step == 0 {
            self.m = params.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
            self.v = self.m.clone();
            return Ok(());
        }
        let drift = self.m.len() != params.len()
            || self
                .m
                .iter()
                .zip(params.iter())
                .any(|(m, (_, p))| m.len() != p.value.numel());
        if drift {
            return Err(Error::State(
                "parameter set changed shape since the optimizer was created".into(),
            ));
        }
        Ok(())
    }

    /// Applies one update with learning rate `lr` using the accumulated grads.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        self.check_state(params)?;
        self.step += 1;
        let decay = 1.0 - lr * self.weight_decay;
        match self.kind {
            OptimizerKind::Sgd => {
                for p in params.iter_mut() {
                    for (w, g) in p.value.data_mut().iter_mut().zip(&p.grad) {
                        *w = *w * decay - lr * g;
                    }
                }
            }
            OptimizerKind::Adamw => {
                let (b1, b2) = (self.beta1, self.beta2);
                let bc1 = 1.0 - b1.powi(self.step as i32);
                let bc2 = 1.0 - b2.powi(self.step as i32);
                for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
                    let grads = &p.grad;
                    for (((w, g), m), v) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(grads)
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *w = *w * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(vec![values.len()], values.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_grads_no_decay_is_identity() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adamw] {
            let mut s = store(&[1.0, -2.0]);
            let mut opt = Optimizer::new(kind, 0.0);
            opt.step(&mut s, 0.1).unwrap();
            assert_eq!(s.get(crate::autodiff::ParamId(0)).value.data(), &[1.0, -2.0]);
        }
    }

    #[test]
    fn sgd_moves_by_lr_times_grad() {
        let mut s = store(&[1.0]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.0);
        for k in 1..=3 {
            s.iter_mut().next().unwrap().grad = vec![0.5];
            opt.step(&mut s, 0.25).unwrap();
            let want = 1.0 - 0.125 * k as f64;
            assert_eq!(s.iter().next().unwrap().1.value.data()[0], want);
        }
    }

    #[test]
    fn adamw_first_step() {
        let mut s = store(&[1.0]);
        s.iter_mut().next().unwrap().grad = vec![1.0];
        let mut opt = Optimizer::new(OptimizerKind::Adamw, 0.0);
        opt.step(&mut s, 0.1).unwrap();
        let p = s.iter().next().unwrap().1.value.data()[0];
        assert!((p - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_weight_decay() {
        let mut s = store(&[2.0]);
        let mut opt = Optimizer::new(OptimizerKind::Adamw, 0.5);
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value.data()[0], 2.0 * 0.95);
    }

    #[test]
    fn shape_drift_is_state_error() {
        let mut s = store(&[1.0]);
        let mut opt = Optimizer::new(OptimizerKind::Adamw, 0.0);
        opt.step(&mut s, 0.1).unwrap();
        s.add("q", Tensor::zeros(&[2]));
        assert!(matches!(opt.step(&mut s, 0.1), Err(Error::State(_))));
    }

    #[test]
    fn quadratic_loss_decreases() {
        // f(p) = sum (p - c)^2
        let c = [3.0, -1.0, 0.5];
        let mut s = store(&[0.0, 0.0, 0.0]);
        let mut opt = Optimizer::new(OptimizerKind::Adamw, 0.0);
        let loss = |s: &ParamStore| -> f64 {
            s.iter().next().unwrap().1.value.data().iter().zip(c).map(|(p, c)| (p - c) * (p - c)).sum()
        };
        let mut history = vec![loss(&s)];
        for _ in 0..100 {
            let p = s.iter_mut().next().unwrap();
            p.grad = p.value.data().iter().zip(c).map(|(p, c)| 2.0 * (p - c)).collect();
            opt.step(&mut s, 1e-3).unwrap();
            history.push(loss(&s));
        }
        assert!(history[100] < history[0]);
        for w in history[5..].windows(2) {
            assert!(w[1] <= w[0]);
        }
    }
}
