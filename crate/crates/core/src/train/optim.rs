//! Poly learning-rate schedule and SGD with momentum.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Optimizer and schedule settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_iter: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.005,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            max_iter: 2000,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.power > 0.0 && self.power <= 1.0) {
            return Err(Error::Config(format!("power must lie in (0, 1], got {}", self.power)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be positive".into()));
        }
        Ok(())
    }
}

/// `base_lr * (1 - iter / max_iter)^power`.
pub fn poly_lr(iter: usize, cfg: &SgdConfig) -> Result<f64> {
    cfg.validate()?;
    if iter > cfg.max_iter {
        return Err(Error::Range(format!(
            "iteration {iter} beyond max_iter {}",
            cfg.max_iter
        )));
    }
    let frac = 1.0 - iter as f64 / cfg.max_iter as f64;
    Ok(cfg.base_lr * frac.powf(cfg.power))
}

/// One momentum step over parallel lists of parameters, gradients and
/// velocity buffers:
/// `v = momentum * v + g + weight_decay * p`, then `p = p - lr * v`.
/// Nothing is modified if any gradient is non-finite; the error names the
/// offending tensor and element.
pub fn sgd_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    velocity: &mut [Tensor<T>],
    lr: f64,
    cfg: &SgdConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Config(format!(
            "sgd_step got {} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(velocity.iter()).enumerate() {
        if p.dims() != g.dims() || p.dims() != v.dims() {
            return Err(Error::Dimension {
                op: "sgd_step",
                lhs: p.dims().to_vec(),
                rhs: g.dims().to_vec(),
            });
        }
        if let Some(j) = g.first_non_finite() {
            return Err(Error::Divergence {
                iter: 0,
                detail: format!("gradient of tensor {i} is non-finite at element {j}"),
            });
        }
    }
    let (lr, m, wd) = (T::from_f64(lr), T::from_f64(cfg.momentum), T::from_f64(cfg.weight_decay));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = m * *vv + gv + wd * *pv;
            *pv = *pv - lr * *vv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Tensor<f64> {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = SgdConfig::default();
        assert_eq!(poly_lr(0, &cfg).unwrap(), 0.005);
        assert_eq!(poly_lr(cfg.max_iter, &cfg).unwrap(), 0.0);
        // 0.5^0.9 = exp(0.9 ln 0.5) = 0.535886731...
        let half = poly_lr(1000, &cfg).unwrap();
        assert!((half - 2.679433656e-3).abs() < 1e-12);
        assert!(poly_lr(cfg.max_iter + 1, &cfg).is_err());
    }

    #[test]
    fn schedule_is_non_increasing() {
        let cfg = SgdConfig { max_iter: 137, ..SgdConfig::default() };
        let lrs: Vec<f64> = (0..=137).map(|i| poly_lr(i, &cfg).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn bad_schedules_rejected() {
        for cfg in [
            SgdConfig { base_lr: 0.0, ..SgdConfig::default() },
            SgdConfig { power: 0.0, ..SgdConfig::default() },
            SgdConfig { power: 1.5, ..SgdConfig::default() },
            SgdConfig { max_iter: 0, ..SgdConfig::default() },
        ] {
            assert!(poly_lr(0, &cfg).is_err());
        }
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = one(1.5);
        let g = one(3.0);
        let mut v = vec![one(0.0)];
        sgd_step(&mut [&mut p], &[&g], &mut v, 0.0, &SgdConfig::default()).unwrap();
        assert_eq!(p.data()[0], 1.5);
    }

    #[test]
    fn reduces_to_gradient_descent() {
        let cfg = SgdConfig { momentum: 0.0, weight_decay: 0.0, ..SgdConfig::default() };
        let mut p = one(1.0);
        let mut v = vec![one(0.0)];
        sgd_step(&mut [&mut p], &[&one(2.0)], &mut v, 0.1, &cfg).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn velocity_after_two_constant_steps() {
        let cfg = SgdConfig { weight_decay: 0.0, ..SgdConfig::default() };
        let mut p = one(0.0);
        let mut v = vec![one(0.0)];
        let g = one(0.25);
        for _ in 0..2 {
            sgd_step(&mut [&mut p], &[&g], &mut v, 0.01, &cfg).unwrap();
        }
        assert!((v[0].data()[0] - 0.25 * 1.9).abs() < 1e-15);
        // p = -lr (g + g(1 + m))
        assert!((p.data()[0] + 0.01 * (0.25 + 0.25 * 1.9)).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_enters_velocity() {
        let cfg = SgdConfig { momentum: 0.0, weight_decay: 0.5, ..SgdConfig::default() };
        let mut p = one(2.0);
        let mut v = vec![one(0.0)];
        sgd_step(&mut [&mut p], &[&one(0.0)], &mut v, 0.1, &cfg).unwrap();
        assert_eq!(v[0].data()[0], 1.0);
        assert!((p.data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_halts_without_update() {
        let mut a = one(1.0);
        let mut b = one(2.0);
        let mut v = vec![one(0.0), one(0.0)];
        let err = sgd_step(&mut [&mut a, &mut b], &[&one(1.0), &one(f64::NAN)], &mut v, 0.1, &SgdConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
        assert_eq!((a.data()[0], b.data()[0]), (1.0, 2.0));
    }
}
