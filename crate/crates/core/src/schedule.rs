//! Discrete diffusion time grid.
//!
//! Owns the per-step noise rates `β_t`, the cumulative products `ᾱ_t`, and
//! all derived noise-level arithmetic used by training, sampling, and the
//! noise-space/posterior-mean equivalence mapping. Steps are indexed
//! `t ∈ 1..=T`; `ᾱ_0 = 1` by convention so the final reverse step lands on
//! clean data.

use crate::error::{Error, Result};

/// Immutable linear-β diffusion schedule. Safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    beta_min: f64,
    beta_max: f64,
}

impl Schedule {
    /// Build a schedule with `t_count` steps and β linearly interpolated
    /// from `beta_min` to `beta_max` inclusive.
    pub fn linear(t_count: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if t_count < 2 {
            return Err(Error::InvalidRange(format!(
                "schedule needs at least 2 steps, got {t_count}"
            )));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let mut betas = Vec::with_capacity(t_count);
        let mut alpha_bars = Vec::with_capacity(t_count);
        let mut prod = 1.0;
        for i in 0..t_count {
            let frac = i as f64 / (t_count - 1) as f64;
            let beta = beta_min + (beta_max - beta_min) * frac;
            prod *= 1.0 - beta;
            betas.push(beta);
            alpha_bars.push(prod);
        }
        Ok(Self {
            betas,
            alpha_bars,
            beta_min,
            beta_max,
        })
    }

    /// Number of steps T.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_min, self.beta_max)
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.len() {
            return Err(Error::StepOutOfRange {
                t,
                t_max: self.len(),
            });
        }
        Ok(())
    }

    /// β_t for t in 1..=T.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.betas[t - 1])
    }

    /// ᾱ_t for t in 0..=T, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_step(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// Per-step ratio α_t = ᾱ_t / ᾱ_{t−1}.
    pub fn step_ratio(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alpha_bars[t - 1] / self.alpha_bar(t - 1)?)
    }

    /// Variance of the shared-variance reverse transition kernel between
    /// `t` and `t_prev`: (1−ᾱ_{t_prev})/(1−ᾱ_t) · (1 − ᾱ_t/ᾱ_{t_prev}).
    /// For adjacent steps this is the usual (1−ᾱ_{t−1})/(1−ᾱ_t)·β_t.
    pub fn posterior_var(&self, t: usize, t_prev: usize) -> Result<f64> {
        self.check_step(t)?;
        if t_prev >= t {
            return Err(Error::InvalidRange(format!(
                "posterior_var needs t_prev < t, got ({t}, {t_prev})"
            )));
        }
        let ab_t = self.alpha_bar(t)?;
        let ab_prev = self.alpha_bar(t_prev)?;
        Ok((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev))
    }

    /// Noise the clean point: √ᾱ_t·x0 + √(1−ᾱ_t)·noise.
    pub fn forward_sample(&self, x0: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
        self.check_step(t)?;
        if x0.len() != noise.len() {
            return Err(Error::ShapeMismatch(format!(
                "x0 has dim {}, noise has dim {}",
                x0.len(),
                noise.len()
            )));
        }
        let ab = self.alpha_bars[t - 1];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0
            .iter()
            .zip(noise)
            .map(|(x, n)| a * x + b * n)
            .collect())
    }

    /// Hash binding a model to the schedule it was trained against.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(&(self.len() as u64).to_le_bytes());
        for &b in &self.betas {
            eat(&b.to_bits().to_le_bytes());
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::GaussStream;

    #[test]
    fn five_hundred_step_schedule_builds() {
        let s = Schedule::linear(500, 1e-4, 0.02).unwrap();
        assert_eq!(s.len(), 500);
    }

    #[test]
    fn two_step_product() {
        let s = Schedule::linear(2, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1).unwrap() - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2).unwrap() - 0.81).abs() < 1e-15);
    }

    #[test]
    fn tail_alpha_bar_matches_independent_product() {
        // Frozen from a 60-digit Decimal evaluation of the same product.
        let s = Schedule::linear(500, 1e-4, 0.02).unwrap();
        let expected = 0.006352710797015050;
        let got = s.alpha_bar(500).unwrap();
        assert!(
            (got - expected).abs() / expected < 1e-12,
            "alpha_bar[500] = {got}"
        );
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(Schedule::linear(1, 1e-4, 0.02).is_err());
        assert!(Schedule::linear(10, 0.0, 0.02).is_err());
        assert!(Schedule::linear(10, 0.3, 0.2).is_err());
        assert!(Schedule::linear(10, 0.5, 1.0).is_err());
    }

    #[test]
    fn invariants_hold() {
        let s = Schedule::linear(500, 1e-4, 0.02).unwrap();
        for t in 1..=s.len() {
            let b = s.beta(t).unwrap();
            assert!(b > 0.0 && b < 1.0);
            let r = s.step_ratio(t).unwrap();
            assert!(r > 0.0 && r < 1.0, "step ratio {r} at t={t}");
            if t > 1 {
                assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
            }
            // step_ratio(t) * abar_{t-1} round-trips to abar_t.
            let back = r * s.alpha_bar(t - 1).unwrap();
            assert!((back - s.alpha_bar(t).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_sample_special_cases() {
        let s = Schedule::linear(2, 0.1, 0.1).unwrap();
        // x0 = 0 leaves only the scaled noise.
        let got = s.forward_sample(&[0.0, 0.0], 1, &[1.0, -2.0]).unwrap();
        let c = (1.0f64 - 0.9).sqrt();
        assert!((got[0] - c).abs() < 1e-15 && (got[1] + 2.0 * c).abs() < 1e-15);
        // noise = 0 gives the scaled mean.
        let got = s.forward_sample(&[1.0, 1.0], 2, &[0.0, 0.0]).unwrap();
        assert!((got[0] - 0.9).abs() < 1e-15 && (got[1] - 0.9).abs() < 1e-15);
        // abar = 0.81, x0 = (1,1), noise = (1,0): (0.9 + sqrt(0.19), 0.9).
        let got = s.forward_sample(&[1.0, 1.0], 2, &[1.0, 0.0]).unwrap();
        assert!((got[0] - 1.3358898943540674).abs() < 1e-15);
        assert!((got[1] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn forward_sample_errors() {
        let s = Schedule::linear(10, 1e-3, 0.02).unwrap();
        assert!(s.forward_sample(&[0.0], 0, &[0.0]).is_err());
        assert!(s.forward_sample(&[0.0], 11, &[0.0]).is_err());
        assert!(s.forward_sample(&[0.0, 0.0], 1, &[0.0]).is_err());
    }

    #[test]
    fn step_ratio_hand_value() {
        // abar_t = 0.8, abar_{t-1} = 0.9 happens for a two-step schedule with
        // beta = [0.1, 1/9].
        let s = Schedule::linear(2, 0.1, 1.0 / 9.0).unwrap();
        assert!((s.alpha_bar(2).unwrap() - 0.8).abs() < 1e-15);
        assert!((s.step_ratio(2).unwrap() - 0.888888888888889).abs() < 1e-12);
        // t = 1 reduces to abar_1 because abar_0 = 1.
        assert!((s.step_ratio(1).unwrap() - s.alpha_bar(1).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn posterior_var_adjacent_matches_beta_form() {
        let s = Schedule::linear(100, 1e-4, 0.02).unwrap();
        for t in 2..=100 {
            let direct = s.posterior_var(t, t - 1).unwrap();
            let beta_form = (1.0 - s.alpha_bar(t - 1).unwrap()) / (1.0 - s.alpha_bar(t).unwrap())
                * s.beta(t).unwrap();
            assert!(
                (direct - beta_form).abs() < 1e-15,
                "t={t}: {direct} vs {beta_form}"
            );
        }
    }

    #[test]
    fn forward_sample_moments() {
        // 1e4 draws at fixed x0 and t: mean within 4 sigma, variance within 10%.
        let s = Schedule::linear(500, 1e-4, 0.02).unwrap();
        let mut g = GaussStream::new(11);
        let x0 = [1.5, -0.5];
        let t = 250;
        let ab = s.alpha_bar(t).unwrap();
        let n = 10_000;
        let (mut sum, mut sq) = ([0.0f64; 2], [0.0f64; 2]);
        for _ in 0..n {
            let noise = [g.gauss(), g.gauss()];
            let x = s.forward_sample(&x0, t, &noise).unwrap();
            for d in 0..2 {
                sum[d] += x[d];
                sq[d] += x[d] * x[d];
            }
        }
        for d in 0..2 {
            let mean = sum[d] / n as f64;
            let var = sq[d] / n as f64 - mean * mean;
            let expect_mean = ab.sqrt() * x0[d];
            let se = ((1.0 - ab) / n as f64).sqrt();
            assert!(
                (mean - expect_mean).abs() < 4.0 * se,
                "dim {d}: mean {mean} vs {expect_mean}"
            );
            assert!(
                (var - (1.0 - ab)).abs() < 0.1 * (1.0 - ab),
                "dim {d}: var {var} vs {}",
                1.0 - ab
            );
        }
    }

    #[test]
    fn fingerprint_distinguishes_schedules() {
        let a = Schedule::linear(500, 1e-4, 0.02).unwrap();
        let b = Schedule::linear(500, 1e-4, 0.02).unwrap();
        let c = Schedule::linear(499, 1e-4, 0.02).unwrap();
        let d = Schedule::linear(500, 1e-4, 0.021).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_ne!(a.fingerprint(), d.fingerprint());
    }
}
