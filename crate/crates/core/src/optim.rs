//! AdamW with decoupled weight decay.

use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::error::{config_err, Error, Result};
use crate::params::ParamTree;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    /// Learning rate and weight decay of the full-scale setup.
    pub const PAPER: AdamWConfig = AdamWConfig {
        lr: 1.3e-5,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 1e-6,
    };

    pub const DESK: AdamWConfig = AdamWConfig {
        lr: 1e-3,
        ..Self::PAPER
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return config_err("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return config_err("beta1", "must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return config_err("beta2", "must be in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return config_err("eps", "must be positive");
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return config_err("weight_decay", "must be >= 0");
        }
        Ok(())
    }
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self::DESK
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Starts an update: every gradient must be finite, else nothing changes.
    pub fn begin_step(&mut self, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { param: name.clone() });
        }
        self.step += 1;
        Ok(())
    }

    /// Updates every leaf of `tree` that has an entry in `grads`.
    ///
    /// Adam step with bias correction, then `p -= lr * wd * p`.
    pub fn apply<P: ParamTree<Tensor>>(&mut self, tree: &mut P, prefix: &str, grads: &BTreeMap<String, Tensor>) {
        let c = self.config;
        let t = self.step.max(1) as i32;
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        let moments = &mut self.moments;
        tree.visit_mut(prefix, &mut |name, p| {
            let Some(g) = grads.get(name) else { return };
            let mo = moments.entry(String::from(name)).or_insert_with(|| Moments {
                m: Tensor::zeros(p.rows(), p.cols()),
                v: Tensor::zeros(p.rows(), p.cols()),
            });
            let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
            for (i, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gv;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gv * gv;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *pv -= c.lr * m_hat / (libm::sqrt(v_hat) + c.eps);
                *pv -= c.lr * c.weight_decay * *pv;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::param_block;

    param_block! {
        struct One { w }
    }

    fn grads(g: Tensor) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert(String::from("w"), g);
        m
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::DESK
        };
        let mut opt = AdamW::new(cfg).unwrap();
        let mut p = One {
            w: Tensor::row_vector(alloc::vec![1.0, -2.0]),
        };
        let g = grads(Tensor::zeros(1, 2));
        opt.begin_step(&g).unwrap();
        opt.apply(&mut p, "", &g);
        assert_eq!(p.w.data(), &[1.0, -2.0]);
    }

    #[test]
    fn zero_gradient_with_decay_scales() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::DESK
        };
        let mut opt = AdamW::new(cfg).unwrap();
        let mut p = One {
            w: Tensor::row_vector(alloc::vec![1.0, -2.0]),
        };
        let g = grads(Tensor::zeros(1, 2));
        opt.begin_step(&g).unwrap();
        opt.apply(&mut p, "", &g);
        assert_eq!(p.w.data(), &[0.95, -1.9]);
    }

    #[test]
    fn first_step_hand_computed() {
        // m_hat = g, v_hat = g^2 after one step, so the Adam move is lr * g / (|g| + eps).
        let cfg = AdamWConfig {
            lr: 1e-3,
            weight_decay: 1e-2,
            ..AdamWConfig::DESK
        };
        let mut opt = AdamW::new(cfg).unwrap();
        let mut p = One {
            w: Tensor::row_vector(alloc::vec![0.5, -0.25]),
        };
        let g = grads(Tensor::row_vector(alloc::vec![0.2, -3.0]));
        opt.begin_step(&g).unwrap();
        opt.apply(&mut p, "", &g);
        let expect = |p0: f64, g0: f64| {
            let after_adam = p0 - 1e-3 * g0 / (g0.abs() + 1e-8);
            after_adam - 1e-3 * 1e-2 * after_adam
        };
        assert!((p.w.data()[0] - expect(0.5, 0.2)).abs() < 1e-12);
        assert!((p.w.data()[1] - expect(-0.25, -3.0)).abs() < 1e-12);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn nan_gradient_names_parameter_and_leaves_state() {
        let mut opt = AdamW::new(AdamWConfig::DESK).unwrap();
        let g = grads(Tensor::row_vector(alloc::vec![f64::NAN]));
        assert_eq!(
            opt.begin_step(&g),
            Err(Error::NonFiniteGradient {
                param: String::from("w")
            })
        );
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(AdamW::new(AdamWConfig {
            lr: 0.0,
            ..AdamWConfig::DESK
        })
        .is_err());
        assert!(AdamW::new(AdamWConfig {
            beta2: 1.0,
            ..AdamWConfig::DESK
        })
        .is_err());
    }
}
