//! Variance-preserving noise schedule on a discrete time grid.
//!
//! Noise level t runs over 0..=num_steps. Squared noise follows a logistic
//! curve in a linearly ramped log-SNR variable:
//!
//! ```text
//! gamma(t) = gamma_min + (gamma_max - gamma_min) * t / num_steps
//! sigma(t)^2 = 1 / (1 + exp(-gamma(t)))        alpha(t)^2 = 1 - sigma(t)^2
//! ```
//!
//! Computing `alpha^2` as `logistic(-gamma)` keeps `alpha^2 + sigma^2 = 1`
//! accurate to a couple of ulps at both ends of the ramp.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// Number of diffusion steps; the grid has `num_steps + 1` levels.
    pub num_steps: usize,
    pub gamma_min: f64,
    pub gamma_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        // Endpoints chosen so the grid is near-clean at t=0 (sigma_0 ~ 1e-3)
        // and near-noise at t=T (signal energy alpha_T^2 ~ 7e-3), while
        // 1/alpha stays small enough for stable clean-batch reconstruction
        // at the top levels.
        ScheduleConfig {
            num_steps: 200,
            gamma_min: -13.3,
            gamma_max: 5.0,
        }
    }
}

/// Precomputed per-level coefficients. `alpha` strictly decreases, `sigma`
/// strictly increases and `alpha[t]^2 + sigma[t]^2 = 1` for every level.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl NoiseSchedule {
    pub fn build(config: ScheduleConfig) -> Result<Self> {
        if config.num_steps < 2 {
            return Err(Error::Config(format!(
                "num_steps must be at least 2, got {}",
                config.num_steps
            )));
        }
        if !(config.gamma_min.is_finite() && config.gamma_max.is_finite()) {
            return Err(Error::Config("gamma endpoints must be finite".into()));
        }
        if config.gamma_min >= config.gamma_max {
            return Err(Error::Config(format!(
                "gamma_min ({}) must be below gamma_max ({})",
                config.gamma_min, config.gamma_max
            )));
        }
        let t_max = config.num_steps;
        let mut alpha = Vec::with_capacity(t_max + 1);
        let mut sigma = Vec::with_capacity(t_max + 1);
        for t in 0..=t_max {
            let gamma = config.gamma_min
                + (config.gamma_max - config.gamma_min) * (t as f64) / (t_max as f64);
            sigma.push(logistic(gamma).sqrt());
            alpha.push(logistic(-gamma).sqrt());
        }
        Ok(NoiseSchedule {
            config,
            alpha,
            sigma,
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    /// Highest level index (the grid is 0..=num_steps).
    pub fn num_steps(&self) -> usize {
        self.config.num_steps
    }

    /// Err unless `t` lies on the grid 0..=num_steps.
    pub fn validate_level(&self, t: usize) -> Result<()> {
        if t > self.num_steps() {
            return Err(Error::Argument(format!(
                "level {} out of range 0..={}",
                t,
                self.num_steps()
            )));
        }
        Ok(())
    }

    /// Signal coefficient at level t. Panics on out-of-range t; levels come
    /// from validated chain specs and loops bounded by `num_steps`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// Noise standard deviation at level t.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// Signal-to-noise ratio alpha(t)^2 / sigma(t)^2, strictly decreasing.
    pub fn snr(&self, t: usize) -> f64 {
        let a = self.alpha[t];
        let s = self.sigma[t];
        (a * a) / (s * s)
    }

    /// Coefficients of the transition from level s up to level t (s <= t):
    /// signal ratio `alpha(t)/alpha(s)` and transition variance
    /// `sigma(t)^2 - (alpha(t)/alpha(s))^2 * sigma(s)^2`.
    pub fn transition(&self, s: usize, t: usize) -> Result<(f64, f64)> {
        self.validate_level(t)?;
        if s > t {
            return Err(Error::Argument(format!(
                "transition requires s <= t, got s={s} t={t}"
            )));
        }
        let a_ts = self.alpha[t] / self.alpha[s];
        let var = self.sigma[t] * self.sigma[t] - a_ts * a_ts * self.sigma[s] * self.sigma[s];
        Ok((a_ts, var))
    }

    /// Variance of the reverse-transition posterior at (s, t), s < t:
    /// `sigma(t|s)^2 * sigma(s)^2 / sigma(t)^2`. Always below `sigma(s)^2`.
    pub fn posterior_variance(&self, s: usize, t: usize) -> Result<f64> {
        if s >= t {
            return Err(Error::Argument(format!(
                "posterior requires s < t, got s={s} t={t}"
            )));
        }
        let (_, var_ts) = self.transition(s, t)?;
        let sig_s2 = self.sigma[s] * self.sigma[s];
        let sig_t2 = self.sigma[t] * self.sigma[t];
        Ok(var_ts * sig_s2 / sig_t2)
    }

    /// Coefficients (on x_t and on x0) of the reverse-transition posterior
    /// mean at (s, t), s < t.
    pub fn posterior_mean_coeffs(&self, s: usize, t: usize) -> Result<(f64, f64)> {
        if s >= t {
            return Err(Error::Argument(format!(
                "posterior requires s < t, got s={s} t={t}"
            )));
        }
        let (a_ts, var_ts) = self.transition(s, t)?;
        let sig_s2 = self.sigma[s] * self.sigma[s];
        let sig_t2 = self.sigma[t] * self.sigma[t];
        Ok((a_ts * sig_s2 / sig_t2, self.alpha[s] * var_ts / sig_t2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::build(ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn rejects_degenerate_configs() {
        for bad in [
            ScheduleConfig {
                num_steps: 1,
                ..Default::default()
            },
            ScheduleConfig {
                num_steps: 0,
                ..Default::default()
            },
            ScheduleConfig {
                num_steps: 200,
                gamma_min: 2.0,
                gamma_max: 2.0,
            },
            ScheduleConfig {
                num_steps: 200,
                gamma_min: 3.0,
                gamma_max: -3.0,
            },
        ] {
            assert!(matches!(NoiseSchedule::build(bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn grid_has_expected_size_and_unit_energy() {
        let sch = default_schedule();
        assert_eq!(sch.num_steps(), 200);
        for t in 0..=200 {
            let total = sch.alpha(t) * sch.alpha(t) + sch.sigma(t) * sch.sigma(t);
            assert!(
                (total - 1.0).abs() <= 1e-12,
                "alpha^2 + sigma^2 drifted at t={t}: {total}"
            );
        }
    }

    #[test]
    fn midpoint_matches_logistic_of_ramp_midpoint() {
        // Independent recomputation: at t = 100 of a 200-step ramp over
        // [-13.3, 5.0] the log-SNR variable is -4.15 exactly.
        let sch = NoiseSchedule::build(ScheduleConfig {
            num_steps: 200,
            gamma_min: -13.3,
            gamma_max: 5.0,
        })
        .unwrap();
        let expected = 1.0 / (1.0 + 4.15f64.exp());
        let got = sch.sigma(100) * sch.sigma(100);
        assert!(
            ((got - expected) / expected).abs() < 1e-14,
            "sigma^2(100) = {got}, expected {expected}"
        );
    }

    #[test]
    fn endpoints_are_near_clean_and_near_noise() {
        // Noise amplitude is negligible at t=0 and the residual signal
        // energy is under 1% at t=T.
        let sch = default_schedule();
        assert!(sch.sigma(0) < 1e-2, "sigma(0) = {}", sch.sigma(0));
        let a_top = sch.alpha(sch.num_steps());
        assert!(a_top * a_top < 1e-2, "alpha(T)^2 = {}", a_top * a_top);
    }

    #[test]
    fn alpha_sigma_and_snr_are_strictly_monotone() {
        let sch = default_schedule();
        for t in 1..=sch.num_steps() {
            assert!(sch.alpha(t) < sch.alpha(t - 1), "alpha not strict at {t}");
            assert!(sch.sigma(t) > sch.sigma(t - 1), "sigma not strict at {t}");
            assert!(sch.snr(t) < sch.snr(t - 1), "snr not strict at {t}");
        }
    }

    #[test]
    fn transition_is_identity_at_equal_levels() {
        let sch = default_schedule();
        for t in [0, 1, 57, 200] {
            let (a, v) = sch.transition(t, t).unwrap();
            assert_eq!(a, 1.0);
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn transition_variance_positive_for_all_pairs() {
        let sch = default_schedule();
        for t in 1..=sch.num_steps() {
            for s in 0..t {
                let (_, var) = sch.transition(s, t).unwrap();
                assert!(var > 0.0, "nonpositive transition variance at ({s},{t})");
            }
        }
    }

    #[test]
    fn posterior_variance_below_marginal_variance() {
        let sch = default_schedule();
        for t in 1..=sch.num_steps() {
            for s in 0..t {
                let post = sch.posterior_variance(s, t).unwrap();
                let marginal = sch.sigma(s) * sch.sigma(s);
                assert!(post > 0.0);
                assert!(post < marginal, "posterior not contractive at ({s},{t})");
            }
        }
    }

    #[test]
    fn merged_noise_variance_recovers_marginal() {
        // The mean's noise coefficient squared plus the posterior variance
        // must reproduce sigma(s)^2; checked exhaustively over the grid.
        let sch = default_schedule();
        for t in 1..=sch.num_steps() {
            for s in 0..t {
                let (a_ts, _) = sch.transition(s, t).unwrap();
                let sig_s2 = sch.sigma(s) * sch.sigma(s);
                let noise_coeff = a_ts * sig_s2 / sch.sigma(t);
                let merged = noise_coeff * noise_coeff + sch.posterior_variance(s, t).unwrap();
                let rel = (merged - sig_s2).abs() / sig_s2;
                assert!(rel <= 1e-10, "merged variance off at ({s},{t}): rel={rel}");
            }
        }
    }

    #[test]
    fn posterior_mean_coeffs_sum_to_alpha_s() {
        // Substituting the noiseless x_t = alpha(t) x0 must give alpha(s) x0.
        let sch = default_schedule();
        for t in 1..=sch.num_steps() {
            for s in 0..t {
                let (c_xt, c_x0) = sch.posterior_mean_coeffs(s, t).unwrap();
                let lhs = c_xt * sch.alpha(t) + c_x0;
                let rel = (lhs - sch.alpha(s)).abs() / sch.alpha(s);
                assert!(rel <= 1e-12, "mean coeffs off at ({s},{t}): rel={rel}");
            }
        }
    }

    #[test]
    fn out_of_order_levels_are_rejected() {
        let sch = default_schedule();
        assert!(matches!(sch.transition(5, 3), Err(Error::Argument(_))));
        assert!(matches!(sch.transition(0, 201), Err(Error::Argument(_))));
        assert!(matches!(
            sch.posterior_variance(3, 3),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            sch.posterior_mean_coeffs(7, 2),
            Err(Error::Argument(_))
        ));
    }
}
