//! Adam with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0)
        {
            return Err(Error::Config(
                "adam decay rates must lie in [0, 1) and eps must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Optimizer state: one pair of moment buffers per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    /// Zero moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &ModelParams<T>) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor<T>> = params
            .entries
            .iter()
            .map(|e| Tensor::zeros(e.tensor.shape()))
            .collect();
        Ok(Adam {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// Restores saved moments after checking them against `params`.
    pub fn from_state(
        config: AdamConfig,
        t: u64,
        m: Vec<Tensor<T>>,
        v: Vec<Tensor<T>>,
        params: &ModelParams<T>,
    ) -> Result<Self> {
        config.validate()?;
        for buf in [&m, &v] {
            let found: usize = buf.iter().map(Tensor::numel).sum();
            let shapes_ok = buf.len() == params.len()
                && buf
                    .iter()
                    .zip(&params.entries)
                    .all(|(b, e)| b.shape() == e.tensor.shape());
            if !shapes_ok {
                return Err(Error::ParamCountMismatch {
                    expected: params.scalar_count(),
                    found,
                });
            }
        }
        Ok(Adam { config, t, m, v })
    }

    /// Applies one update. `grads[i]` belongs to `params.entries[i]`; a
    /// `None` gradient is treated as zero.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &[Option<&[T]>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::ParamCountMismatch {
                expected: params.len(),
                found: grads.len(),
            });
        }
        for (e, g) in params.entries.iter().zip(grads) {
            if let Some(g) = g {
                if g.len() != e.tensor.numel() {
                    return Err(Error::SizeMismatch(format!(
                        "gradient for `{}` has {} elements",
                        e.name,
                        g.len()
                    )));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(e.name.clone()));
                }
            }
        }
        self.t += 1;
        let c = &self.config;
        let t = self.t as f64;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let correction1 = T::from_f64_lossy(1.0 - c.beta1.powf(t));
        let correction2 = T::from_f64_lossy(1.0 - c.beta2.powf(t));
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.eps);
        for (i, entry) in params.entries.iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for j in 0..m.len() {
                let g = grads[i].map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
            }
            for ((p, &m), &v) in entry
                .tensor
                .data_mut()
                .iter_mut()
                .zip(m.iter())
                .zip(v.iter())
            {
                *p = *p - lr * (m / correction1) / ((v / correction2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::UNetConfig;
    use crate::rng::{stream_rng, Stream};

    fn small() -> ModelParams<f64> {
        let cfg = UNetConfig {
            base_channels: 2,
            depth: 1,
            ..Default::default()
        };
        ModelParams::init(&cfg, &mut stream_rng(1, Stream::Init, 0)).unwrap()
    }

    fn grads_like(p: &ModelParams<f64>, f: impl Fn(usize) -> f64) -> Vec<Vec<f64>> {
        p.entries
            .iter()
            .map(|e| (0..e.tensor.numel()).map(&f).collect())
            .collect()
    }

    fn as_refs(g: &[Vec<f64>]) -> Vec<Option<&[f64]>> {
        g.iter().map(|v| Some(v.as_slice())).collect()
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = small();
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::default(), &p).unwrap();
        let g = grads_like(&p, |_| 0.0);
        for _ in 0..3 {
            opt.step(&mut p, &as_refs(&g)).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = small();
        let before = p.clone();
        let lr = 1e-3;
        let mut opt = Adam::new(
            AdamConfig {
                lr,
                ..Default::default()
            },
            &p,
        )
        .unwrap();
        let g = grads_like(&p, |i| if i % 2 == 0 { 0.3 + i as f64 } else { -2.0 });
        opt.step(&mut p, &as_refs(&g)).unwrap();
        for ((a, b), gi) in p.entries.iter().zip(&before.entries).zip(&g) {
            for ((x, y), gv) in a.tensor.data().iter().zip(b.tensor.data()).zip(gi) {
                let expected = -lr * gv.signum() * gv.abs() / (gv.abs() + 1e-8);
                assert!((x - y - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_gradient_sequences_stay_identical() {
        let (mut a, mut b) = (small(), small());
        let mut oa = Adam::new(AdamConfig::default(), &a).unwrap();
        let mut ob = Adam::new(AdamConfig::default(), &b).unwrap();
        for s in 0..5 {
            let g = grads_like(&a, |i| ((i * 7 + s) % 11) as f64 - 5.0);
            oa.step(&mut a, &as_refs(&g)).unwrap();
            ob.step(&mut b, &as_refs(&g)).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(oa, ob);
    }

    #[test]
    fn non_finite_gradient_names_the_tensor() {
        let mut p = small();
        let mut opt = Adam::new(AdamConfig::default(), &p).unwrap();
        let mut g = grads_like(&p, |_| 1.0);
        g[3][0] = f64::NAN;
        let err = opt.step(&mut p, &as_refs(&g)).unwrap_err();
        match err {
            Error::NonFiniteGradient(name) => assert_eq!(name, p.entries[3].name),
            other => panic!("unexpected {other}"),
        }
        assert_eq!(opt.t, 0);
    }

    #[test]
    fn rejects_bad_config() {
        let p = small();
        assert!(Adam::new(
            AdamConfig {
                lr: 0.0,
                ..Default::default()
            },
            &p
        )
        .is_err());
        assert!(Adam::new(
            AdamConfig {
                beta1: 1.0,
                ..Default::default()
            },
            &p
        )
        .is_err());
    }
}
