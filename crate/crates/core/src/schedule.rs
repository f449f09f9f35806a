//! Linear DDPM noise schedule and closed-form forward diffusion.
//!
//! Timesteps are 1-based throughout: `t = 1` is the least noisy step.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::fill_standard_normal;

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Precomputed schedule arrays, stored in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_TIMESTEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule parameters are valid")
    }
}

impl NoiseSchedule {
    /// Betas linearly interpolated from `beta_start` at `t = 1` to `beta_end` at `t = T`.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::invalid("schedule needs at least one timestep"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar: Vec<f64> = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigma = alpha_bar.iter().map(|ab| (1.0 - ab).sqrt()).collect();
        Ok(Self {
            beta_start,
            beta_end,
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::invalid(format!(
                "timestep {t} outside 1..={}",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// Marginal noise scale `sqrt(1 - alpha_bar_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    /// Variance of the DDPM posterior `q(x_{t-1} | x_t, x_0)`; zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t <= 1 {
            0.0
        } else {
            self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
        }
    }

    /// `sqrt(alpha_bar_t) * x0 + sigma_t * eps`, written into `out`.
    pub fn diffuse_into(&self, x0: &[f32], t: usize, eps: &[f32], out: &mut [f32]) {
        let (a, s) = (self.alpha_bar(t).sqrt(), self.sigma(t));
        for ((o, &x), &e) in out.iter_mut().zip(x0).zip(eps) {
            *o = (a * x as f64 + s * e as f64) as f32;
        }
    }

    pub fn forward_diffuse(&self, x0: &[f32], t: usize, eps: &[f32]) -> Result<Vec<f32>> {
        self.check(t)?;
        if x0.len() != eps.len() {
            return Err(Error::shape(format!(
                "x0 has {} channels, eps has {}",
                x0.len(),
                eps.len()
            )));
        }
        let mut out = vec![0.0; x0.len()];
        self.diffuse_into(x0, t, eps, &mut out);
        Ok(out)
    }
}

/// `n` i.i.d. standard normal draws.
pub fn sample_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f32> {
    let mut v = vec![0.0; n];
    fill_standard_normal(rng, &mut v);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn first_steps_of_default_schedule() {
        let s = NoiseSchedule::default();
        assert_eq!(s.len(), 1000);
        assert!(rel(s.alpha_bar(1), 0.9999) < 1e-15);
        assert!(rel(s.sigma(1), 0.01) < 1e-12);
        // explicit cumulative product oracle
        let b1 = 1e-4f64;
        let b2 = 1e-4 + (0.02 - 1e-4) / 999.0;
        let oracle = (1.0 - b1) * (1.0 - b2);
        assert!(rel(s.alpha_bar(2), oracle) < 1e-15);
        assert!((s.alpha_bar(2) - 0.99978009).abs() < 1e-8);
        assert!(rel(s.beta(1000), 0.02) < 1e-12);
    }

    #[test]
    fn invariants_hold_everywhere() {
        let s = NoiseSchedule::default();
        for t in 1..=s.len() {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            assert!(rel(s.sigma(t).powi(2) + s.alpha_bar(t), 1.0) < 1e-12);
            if t >= 2 {
                assert!(s.beta(t) >= s.beta(t - 1));
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                assert!(rel(s.alpha_bar(t) / s.alpha_bar(t - 1), s.alpha(t)) < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
        assert!(NoiseSchedule::linear(1, 0.01, 0.01).is_ok());
    }

    #[test]
    fn zero_noise_and_zero_signal() {
        let s = NoiseSchedule::default();
        let x0 = [1.0f32, -2.0, 0.5];
        let out = s.forward_diffuse(&x0, 7, &[0.0; 3]).unwrap();
        let a = s.alpha_bar(7).sqrt() as f32;
        assert_eq!(out, x0.iter().map(|x| a * x).collect::<Vec<_>>());
        let eps = [0.3f32, -0.1, 2.0];
        let out = s.forward_diffuse(&[0.0; 3], 7, &eps).unwrap();
        let sg = s.sigma(7) as f32;
        assert_eq!(out, eps.iter().map(|e| sg * e).collect::<Vec<_>>());
    }

    #[test]
    fn forward_diffuse_errors() {
        let s = NoiseSchedule::default();
        assert!(s.forward_diffuse(&[0.0; 2], 0, &[0.0; 2]).is_err());
        assert!(s.forward_diffuse(&[0.0; 2], 1001, &[0.0; 2]).is_err());
        assert!(s.forward_diffuse(&[0.0; 2], 1, &[0.0; 3]).is_err());
    }

    #[test]
    fn monte_carlo_variance_of_xt() {
        let s = NoiseSchedule::default();
        let t = 300;
        let x0 = [0.7f32, -1.2];
        let n = 100_000;
        let mut rng = seeded(11);
        let mut sum = [0.0f64; 2];
        let mut sum2 = [0.0f64; 2];
        for _ in 0..n {
            let eps = sample_noise(2, &mut rng);
            let xt = s.forward_diffuse(&x0, t, &eps).unwrap();
            for c in 0..2 {
                sum[c] += xt[c] as f64;
                sum2[c] += (xt[c] as f64).powi(2);
            }
        }
        let target = 1.0 - s.alpha_bar(t);
        for c in 0..2 {
            let mean = sum[c] / n as f64;
            let var = sum2[c] / n as f64 - mean * mean;
            // standard error of a Gaussian sample variance: var * sqrt(2 / (n - 1))
            let se = target * (2.0 / (n as f64 - 1.0)).sqrt();
            assert!((var - target).abs() < 3.0 * se, "channel {c}: {var} vs {target}");
            let mean_se = (target / n as f64).sqrt();
            let expect = s.alpha_bar(t).sqrt() * x0[c] as f64;
            assert!((mean - expect).abs() < 3.0 * mean_se);
        }
    }

    #[test]
    fn noise_is_deterministic_and_standard() {
        let a = sample_noise(8, &mut seeded(3));
        let b = sample_noise(8, &mut seeded(3));
        let c = sample_noise(8, &mut seeded(4));
        assert_eq!(a, b);
        assert_ne!(a, c);

        let draws = sample_noise(1_000_000, &mut seeded(5));
        let n = draws.len() as f64;
        let mean = draws.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = draws.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01);
        assert!((0.99..=1.01).contains(&var));
    }

    proptest! {
        #[test]
        fn forward_diffuse_is_affine(
            a in -3.0f32..3.0, b in -3.0f32..3.0, t in 1usize..1000,
            x in prop::collection::vec(-2.0f32..2.0, 4),
            y in prop::collection::vec(-2.0f32..2.0, 4),
            e in prop::collection::vec(-2.0f32..2.0, 4),
            f in prop::collection::vec(-2.0f32..2.0, 4),
        ) {
            let s = NoiseSchedule::default();
            let comb = |u: &[f32], v: &[f32]| -> Vec<f32> {
                u.iter().zip(v).map(|(p, q)| a * p + b * q).collect()
            };
            let lhs = s.forward_diffuse(&comb(&x, &y), t, &comb(&e, &f)).unwrap();
            let fx = s.forward_diffuse(&x, t, &e).unwrap();
            let fy = s.forward_diffuse(&y, t, &f).unwrap();
            let rhs = comb(&fx, &fy);
            for (l, r) in lhs.iter().zip(&rhs) {
                prop_assert!((l - r).abs() < 1e-4);
            }
        }
    }
}
