use std::collections::BTreeMap;

use super::{Grads, ParamSet, Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) -> Result<()> {
        let missing: Vec<&str> = params
            .names()
            .filter(|n| grads.get(n).is_none())
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(TensorError::MissingGradient(missing.join(", ")));
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("checked above").data();
            if g.len() != p.len() {
                return Err(TensorError::Shape {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * weight_decay * *w;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        params.bump_version();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn scalar_params(x: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(x));
        p
    }

    fn grads_of(value: f64) -> Grads {
        let mut g = Grads::new();
        g.insert("x".into(), Tensor::scalar(value));
        g
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = scalar_params(1.5);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut p, &grads_of(0.0)).unwrap();
        assert_eq!(p.get("x").unwrap().data(), &[1.5]);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = scalar_params(-0.25);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.0,
            ..Default::default()
        });
        for _ in 0..3 {
            opt.step(&mut p, &grads_of(2.0)).unwrap();
        }
        assert_eq!(p.get("x").unwrap().data(), &[-0.25]);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // m̂ = g, v̂ = g², so Δ = -lr · g / (|g| + eps)
        let (lr, eps, g) = (0.01, 1e-8, -3.0);
        let mut p = scalar_params(0.5);
        let mut opt = AdamW::new(AdamWConfig {
            lr,
            eps,
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut p, &grads_of(g)).unwrap();
        let want = 0.5 - lr * g / (g.abs() + eps);
        assert!((p.get("x").unwrap().data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut p = scalar_params(0.0);
        p.insert("other.w", Tensor::scalar(0.0));
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step(&mut p, &grads_of(1.0)).unwrap_err().to_string();
        assert!(err.contains("other.w"), "{err}");
    }

    #[test]
    fn minimizes_quadratic_bowl() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::new(vec![3], vec![2.0, -1.5, 0.7]).unwrap());
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..500 {
            let mut tape = Tape::new();
            let x = tape.param(&p, "x").unwrap();
            let sq = tape.mul(x, x).unwrap();
            let loss = tape.sum(sq);
            let g = tape.backward(loss).unwrap();
            opt.step(&mut p, &g).unwrap();
        }
        let norm = p.get("x").unwrap().data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-3, "|x| = {norm}");
    }
}
