use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Linear β schedule over `T` noise levels.
///
/// Levels are numbered `1..=T`; level 0 is clean data with `ᾱ_0 = 1`. The
/// stored vectors hold levels `1..=T` at offsets `0..T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 49,
            beta_start: 1e-4,
            beta_end: 0.2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "schedule needs T > 0 and 0 < beta_start <= beta_end < 1, got T={steps}, [{beta_start}, {beta_end}]"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    /// Number of noise levels `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `ᾱ_t` for level `t ∈ 0..=T`, with `ᾱ_0 = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.steps() => Ok(self.alpha_bar[t - 1]),
            t => Err(Error::StepOutOfRange { t, max: self.steps() }),
        }
    }

    /// Whether the last level is close enough to pure noise for sampling
    /// from `N(0, I)`.
    pub fn reaches_noise(&self) -> bool {
        self.alpha_bar.last().is_some_and(|&a| a < 0.01)
    }
}

/// `√ᾱ_t · x0 + √(1 − ᾱ_t) · eps`
pub fn forward_diffuse(x0: &[f64], t: usize, sched: &NoiseSchedule, eps: &[f64]) -> Result<Vec<f64>> {
    check_dim("forward_diffuse eps", x0.len(), eps.len())?;
    let ab = sched.alpha_bar_at(t)?;
    Ok(diffuse_with(x0, ab, eps))
}

pub(crate) fn diffuse_with(x0: &[f64], alpha_bar: f64, eps: &[f64]) -> Vec<f64> {
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step() {
        let s = make_schedule(1, 0.1, 0.1).unwrap();
        assert_eq!(s.alpha_bar().len(), 1);
        assert!((s.alpha_bar()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_recomputed() {
        let s = ScheduleConfig::default().build().unwrap();
        assert_eq!(s.steps(), 49);
        // independent recomputation of the product
        let mut prod = 1.0f64;
        for i in 0..49 {
            let beta = 1e-4 + (0.2 - 1e-4) * (i as f64) / 48.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bar()[48] - prod).abs() < 1e-12);
        assert!(s.reaches_noise());
        assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar().iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn invalid_ranges() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn diffuse_limits_and_substitution() {
        let s = ScheduleConfig::default().build().unwrap();
        let x0 = [1.0, -2.0];
        let eps = [0.3, 0.7];
        assert_eq!(forward_diffuse(&x0, 0, &s, &eps).unwrap(), x0.to_vec());
        let noisy = diffuse_with(&x0, 1e-300, &eps);
        assert!((noisy[0] - 0.3).abs() < 1e-12 && (noisy[1] - 0.7).abs() < 1e-12);
        let v = diffuse_with(&[1.0, 0.0], 0.25, &[0.0, 1.0]);
        assert!((v[0] - 0.5).abs() < 1e-15 && (v[1] - 0.75f64.sqrt()).abs() < 1e-15);
        assert!(matches!(
            forward_diffuse(&x0, 50, &s, &eps),
            Err(Error::StepOutOfRange { .. })
        ));
    }
}
