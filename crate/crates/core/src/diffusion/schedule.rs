use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Cumulative signal levels `ᾱ_t` for `t = 0..=num_steps`.
///
/// Level 0 is clean data (`ᾱ_0 = 1`), level `num_steps` is the noisiest point
/// of the inference chain. Values strictly decrease with `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<S> {
    alphas_cumprod: Vec<S>,
}

/// Linear-beta training schedule parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearBetaSchedule {
    pub beta_start: f64,
    pub beta_end: f64,
    pub train_timesteps: usize,
}

impl Default for LinearBetaSchedule {
    fn default() -> Self {
        Self {
            beta_start: 0.00085,
            beta_end: 0.012,
            train_timesteps: 1000,
        }
    }
}

pub const DEFAULT_INFERENCE_STEPS: usize = 50;

impl<S: Scalar> NoiseSchedule<S> {
    pub fn from_alphas_cumprod(alphas_cumprod: Vec<S>) -> Result<Self> {
        if alphas_cumprod.len() < 2 {
            return Err(Error::arg("schedule needs at least one denoising step"));
        }
        if alphas_cumprod[0] != S::one() {
            return Err(Error::arg(format!(
                "schedule must start at alpha_bar = 1, got {}",
                alphas_cumprod[0]
            )));
        }
        for (t, w) in alphas_cumprod.windows(2).enumerate() {
            if !(w[1] < w[0]) || !(w[1] > S::zero()) {
                return Err(Error::arg(format!(
                    "alpha_bar must strictly decrease within (0, 1]: step {} has {} after {}",
                    t + 1,
                    w[1],
                    w[0]
                )));
            }
        }
        Ok(Self { alphas_cumprod })
    }

    /// Subsamples a linear-beta training schedule at `num_steps` evenly spaced levels.
    pub fn linear(num_steps: usize, betas: LinearBetaSchedule) -> Result<Self> {
        if num_steps == 0 || num_steps > betas.train_timesteps {
            return Err(Error::arg(format!(
                "inference steps {num_steps} outside 1..={}",
                betas.train_timesteps
            )));
        }
        let n = betas.train_timesteps;
        let mut train = Vec::with_capacity(n);
        let mut acc = 1.0f64;
        for i in 0..n {
            let beta = if n == 1 {
                betas.beta_start
            } else {
                betas.beta_start + (betas.beta_end - betas.beta_start) * i as f64 / (n - 1) as f64
            };
            acc *= 1.0 - beta;
            train.push(acc);
        }
        let mut levels = vec![S::one()];
        for k in 1..=num_steps {
            let idx = (k * n).div_ceil(num_steps) - 1;
            levels.push(S::of(train[idx]));
        }
        Self::from_alphas_cumprod(levels)
    }

    pub fn num_steps(&self) -> usize {
        self.alphas_cumprod.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> S {
        self.alphas_cumprod[t]
    }

    pub fn alphas_cumprod(&self) -> &[S] {
        &self.alphas_cumprod
    }

    pub(crate) fn check_level(&self, t: usize) -> Result<()> {
        if t > self.num_steps() {
            return Err(Error::arg(format!(
                "timestep {t} outside 0..={}",
                self.num_steps()
            )));
        }
        Ok(())
    }
}

impl<S: Scalar> Default for NoiseSchedule<S> {
    fn default() -> Self {
        Self::linear(DEFAULT_INFERENCE_STEPS, LinearBetaSchedule::default())
            .expect("default schedule is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_shape() {
        let s = NoiseSchedule::<f64>::default();
        assert_eq!(s.num_steps(), 50);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alphas_cumprod().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(50) > 0.0 && s.alpha_bar(50) < 0.01);
    }

    #[test]
    fn rejects_non_monotone() {
        assert!(NoiseSchedule::from_alphas_cumprod(vec![1.0, 0.5, 0.6]).is_err());
        assert!(NoiseSchedule::from_alphas_cumprod(vec![0.9, 0.5]).is_err());
        assert!(NoiseSchedule::from_alphas_cumprod(vec![1.0, 0.5, 0.0]).is_err());
        assert!(NoiseSchedule::from_alphas_cumprod(vec![1.0f64]).is_err());
        assert!(NoiseSchedule::from_alphas_cumprod(vec![1.0, 0.5, 0.25]).is_ok());
    }
}
