//! Deterministic DDIM reverse sampling.
//!
//! Two loop variants cover the two places a guidance scale can act:
//!
//! - `NoiseSpace`: the guided estimate is used for both the denoise and
//!   the renoise half of each DDIM step (the conventional formulation,
//!   constant scale ω).
//! - `PosteriorMean`: the guided estimate denoises but the *null*
//!   estimate renoises, with a per-step scale ρ_t in place of ω. With
//!   ρ_t = ω(1 − √α_t·√(1−ᾱ_{t−1})/√(1−ᾱ_t)) the two variants produce
//!   identical trajectories; [`rho_schedule`] computes exactly that.
//!
//! Chains are independent: each derives its own RNG stream from
//! (seed, chain index), draws only x_T from it, and owns its DNG state,
//! so chains can run in parallel and results are collected by index.

use crate::error::{Error, Result};
use crate::guidance::{self, DngState, GuidanceSpec};
use crate::model::{posterior_mean, Condition, EpsModel};
use crate::rng::{mix_seed, GaussStream};
use crate::schedule::Schedule;
use rayon::prelude::*;

/// Which loop formulation to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    NoiseSpace,
    PosteriorMean,
}

/// One sampling request.
#[derive(Debug, Clone)]
pub struct SampleRun {
    pub seed: u64,
    pub nfe: usize,
    pub record_trajectory: bool,
    pub spec: GuidanceSpec,
    pub cond: Condition,
    /// Second condition (the c⁻ role), required by `PosNeg`.
    pub cond2: Option<Condition>,
    pub variant: Variant,
}

/// Sampled points, plus per-chain state trajectories when requested
/// (x_T first, then the state after every step).
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub points: Vec<Vec<f64>>,
    pub trajectories: Option<Vec<Vec<Vec<f64>>>>,
}

/// RNG stream seed for one chain.
pub fn chain_seed(seed: u64, chain: usize) -> u64 {
    mix_seed(seed, chain as u64)
}

/// The reverse step subsequence for a given NFE: uniform stride, ending
/// at t_prev = 0. With nfe = T this is exactly T, T−1, …, 1.
pub fn step_pairs(schedule: &Schedule, nfe: usize) -> Result<Vec<(usize, usize)>> {
    let t_count = schedule.len();
    if nfe < 1 || nfe > t_count {
        return Err(Error::InvalidRange(format!(
            "nfe {nfe} outside 1..={t_count}"
        )));
    }
    if t_count % nfe != 0 {
        return Err(Error::InvalidRange(format!(
            "nfe {nfe} does not divide T={t_count} uniformly"
        )));
    }
    let stride = t_count / nfe;
    Ok((1..=nfe)
        .rev()
        .map(|i| (i * stride, (i - 1) * stride))
        .collect())
}

/// One deterministic DDIM step:
/// x_prev = √ᾱ_{t_prev}·x̂(guided) + √(1−ᾱ_{t_prev})·renoise.
pub fn ddim_step(
    schedule: &Schedule,
    t: usize,
    t_prev: usize,
    x_t: &[f64],
    guided_eps: &[f64],
    renoise_eps: &[f64],
) -> Result<Vec<f64>> {
    if t_prev >= t {
        return Err(Error::InvalidRange(format!(
            "ddim step needs t > t_prev, got ({t}, {t_prev})"
        )));
    }
    if x_t.len() != guided_eps.len() || x_t.len() != renoise_eps.len() {
        return Err(Error::ShapeMismatch("ddim step dims".into()));
    }
    let denoised = posterior_mean(schedule, x_t, t, guided_eps)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    let (a, b) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    Ok(denoised
        .iter()
        .zip(renoise_eps)
        .map(|(d, r)| a * d + b * r)
        .collect())
}

/// Per-step scale for one (t, t_prev) pair in the posterior-mean variant.
pub fn rho_t(omega: f64, schedule: &Schedule, t: usize, t_prev: usize) -> Result<f64> {
    let ab_t = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    if t == 0 || ab_t >= 1.0 {
        return Err(Error::InvalidRange(format!("degenerate alpha_bar at t={t}")));
    }
    let alpha_eff = ab_t / ab_prev;
    let rho = omega * (1.0 - alpha_eff.sqrt() * (1.0 - ab_prev).sqrt() / (1.0 - ab_t).sqrt());
    if !rho.is_finite() {
        return Err(Error::NonFinite("rho schedule".into()));
    }
    Ok(rho)
}

/// ρ_t over a whole step subsequence.
pub fn rho_schedule(omega: f64, schedule: &Schedule, steps: &[(usize, usize)]) -> Result<Vec<f64>> {
    steps
        .iter()
        .map(|&(t, t_prev)| rho_t(omega, schedule, t, t_prev))
        .collect()
}

struct ChainOutput {
    point: Vec<f64>,
    trajectory: Option<Vec<Vec<f64>>>,
}

fn run_chain(
    model: &EpsModel,
    schedule: &Schedule,
    run: &SampleRun,
    pairs: &[(usize, usize)],
    chain: usize,
) -> Result<ChainOutput> {
    let dim = model.data_dim();
    let mut rng = GaussStream::new(chain_seed(run.seed, chain));
    let mut x = rng.gauss_vec(dim);
    let mut trajectory = run.record_trajectory.then(|| vec![x.clone()]);

    let mut dng_state = match run.spec {
        GuidanceSpec::Dng { prior, .. } => Some(DngState::new(prior)?),
        _ => None,
    };

    for &(t, t_prev) in pairs {
        let eps_null = model.predict_eps(&x, t, Condition::Null)?;
        let eps_cond = match run.spec {
            GuidanceSpec::None => eps_null.clone(),
            _ => model.predict_eps(&x, t, run.cond)?,
        };
        let eps_cond2 = match run.cond2 {
            Some(c) if run.spec.needs_second_condition() => {
                Some(model.predict_eps(&x, t, c)?)
            }
            _ => None,
        };

        let x_next = match run.variant {
            Variant::NoiseSpace => {
                let out = guidance::guide(
                    &run.spec,
                    &eps_null,
                    &eps_cond,
                    eps_cond2.as_deref(),
                    dng_state.as_ref(),
                )?;
                ddim_step(schedule, t, t_prev, &x, &out.guided, &out.renoise)?
            }
            Variant::PosteriorMean => {
                let omega = match run.spec {
                    GuidanceSpec::CcfgPos { omega, .. } | GuidanceSpec::CcfgNeg { omega, .. } => {
                        omega
                    }
                    _ => {
                        return Err(Error::Unsupported(
                            "posterior-mean variant is defined for the contrastive strategies"
                                .into(),
                        ))
                    }
                };
                let rho = rho_t(omega, schedule, t, t_prev)?;
                let spec_t = run.spec.with_scale(rho)?;
                let out = guidance::guide(&spec_t, &eps_null, &eps_cond, None, None)?;
                ddim_step(schedule, t, t_prev, &x, &out.guided, &eps_null)?
            }
        };

        if x_next.iter().any(|v| !v.is_finite()) {
            return Err(Error::ChainDiverged { chain, t });
        }

        if let (Some(state), GuidanceSpec::Dng { tau_prime, delta, .. }) =
            (dng_state.as_ref(), run.spec)
        {
            // The last step has a zero-variance kernel and no further
            // decisions, so the tracker stops there.
            if t_prev > 0 {
                let mu_null = ddim_step(schedule, t, t_prev, &x, &eps_null, &eps_null)?;
                let mu_cond = ddim_step(schedule, t, t_prev, &x, &eps_cond, &eps_cond)?;
                let sigma_sq = schedule.posterior_var(t, t_prev)?;
                dng_state = Some(guidance::dng_update(
                    state, tau_prime, delta, &x_next, &mu_null, &mu_cond, sigma_sq,
                )?);
            }
        }

        x = x_next;
        if let Some(traj) = trajectory.as_mut() {
            traj.push(x.clone());
        }
    }

    Ok(ChainOutput {
        point: x,
        trajectory,
    })
}

/// Draw `n` points by reverse sampling. Deterministic given
/// (model, run, n); chains run in parallel and are collected by index.
pub fn sample(
    model: &EpsModel,
    schedule: &Schedule,
    run: &SampleRun,
    n: usize,
) -> Result<SampleSet> {
    model.check_schedule(schedule)?;
    run.spec.validate()?;
    if n < 1 {
        return Err(Error::InvalidRange("need at least one chain".into()));
    }
    if run.spec.needs_second_condition() && run.cond2.is_none() {
        return Err(Error::MissingInput("second condition"));
    }
    for cond in std::iter::once(run.cond).chain(run.cond2) {
        if let Condition::Class(id) = cond {
            if id >= model.num_classes() {
                return Err(Error::ClassOutOfRange {
                    id,
                    num_classes: model.num_classes(),
                });
            }
        }
    }
    let pairs = step_pairs(schedule, run.nfe)?;

    let chains: Result<Vec<ChainOutput>> = (0..n)
        .into_par_iter()
        .map(|chain| run_chain(model, schedule, run, &pairs, chain))
        .collect();
    let chains = chains?;

    let mut points = Vec::with_capacity(n);
    let mut trajectories = run.record_trajectory.then(|| Vec::with_capacity(n));
    for out in chains {
        points.push(out.point);
        if let (Some(all), Some(traj)) = (trajectories.as_mut(), out.trajectory) {
            all.push(traj);
        }
    }
    Ok(SampleSet {
        points,
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Mlp;
    use crate::rng::GaussStream;

    fn random_model(schedule: &Schedule, seed: u64) -> EpsModel {
        let mut rng = GaussStream::new(seed);
        let embed_dim = 3;
        let dims = [2 + crate::model::TIME_FEATURES + embed_dim, 16, 16, 2];
        let net = Mlp::new(&dims, &mut rng).unwrap();
        let embed: Vec<f64> = (0..2 * embed_dim).map(|_| rng.gauss() * 0.3).collect();
        EpsModel::from_parts(
            net,
            embed,
            embed_dim,
            2,
            2,
            1.0,
            schedule.len(),
            schedule.fingerprint(),
        )
        .unwrap()
    }

    fn run_with(spec: GuidanceSpec, variant: Variant) -> SampleRun {
        SampleRun {
            seed: 42,
            nfe: 25,
            record_trajectory: true,
            spec,
            cond: Condition::Class(1),
            cond2: None,
            variant,
        }
    }

    #[test]
    fn ddim_step_pure_rescale() {
        let s = Schedule::linear(2, 0.1, 1.0 / 9.0).unwrap();
        // guided = renoise = 0 rescales by sqrt(ab_prev/ab_t).
        let x = [1.0, -2.0];
        let out = ddim_step(&s, 2, 1, &x, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        let c = (0.9f64 / 0.8).sqrt();
        assert!((out[0] - c * 1.0).abs() < 1e-14);
        assert!((out[1] + c * 2.0).abs() < 1e-14);
    }

    #[test]
    fn ddim_step_lands_on_posterior_mean_at_zero() {
        let s = Schedule::linear(4, 0.05, 0.2).unwrap();
        let x = [0.4, 0.6];
        let eps = [0.2, -0.1];
        let out = ddim_step(&s, 1, 0, &x, &eps, &eps).unwrap();
        let pm = posterior_mean(&s, &x, 1, &eps).unwrap();
        assert_eq!(out, pm);
    }

    #[test]
    fn ddim_step_moves_along_forward_identity() {
        // x_t = forward(x0, t, eps) with guided = renoise = eps steps to
        // forward(x0, t_prev, eps) exactly.
        let s = Schedule::linear(100, 1e-3, 0.02).unwrap();
        let mut g = GaussStream::new(4);
        for _ in 0..50 {
            let x0 = [g.gauss() * 2.0, g.gauss() * 2.0];
            let eps = [g.gauss(), g.gauss()];
            let t = 2 + g.index(99);
            let t_prev = g.index(t);
            let x_t = s.forward_sample(&x0, t, &eps).unwrap();
            let stepped = ddim_step(&s, t, t_prev, &x_t, &eps, &eps).unwrap();
            let direct = if t_prev == 0 {
                x0.to_vec()
            } else {
                s.forward_sample(&x0, t_prev, &eps).unwrap()
            };
            for d in 0..2 {
                assert!(
                    (stepped[d] - direct[d]).abs() < 1e-12,
                    "t={t}->{t_prev}: {} vs {}",
                    stepped[d],
                    direct[d]
                );
            }
        }
    }

    #[test]
    fn ddim_step_index_errors() {
        let s = Schedule::linear(10, 1e-3, 0.02).unwrap();
        assert!(ddim_step(&s, 3, 3, &[0.0], &[0.0], &[0.0]).is_err());
        assert!(ddim_step(&s, 11, 1, &[0.0], &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn rho_hand_value() {
        // abar_t = 0.8, abar_prev = 0.9: rho = omega/3 exactly.
        let s = Schedule::linear(2, 0.1, 1.0 / 9.0).unwrap();
        let rho = rho_t(3.0, &s, 2, 1).unwrap();
        assert!((rho - 1.0).abs() < 1e-12, "{rho}");
        // t_prev = 0 gives rho = omega.
        let rho = rho_t(2.0, &s, 1, 0).unwrap();
        assert!((rho - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rho_below_omega_everywhere() {
        let s = Schedule::linear(500, 1e-4, 0.02).unwrap();
        let pairs = step_pairs(&s, 100).unwrap();
        let rhos = rho_schedule(7.5, &s, &pairs).unwrap();
        assert_eq!(rhos.len(), 100);
        for (&rho, &(t, t_prev)) in rhos.iter().zip(&pairs) {
            assert!(rho.is_finite() && rho > 0.0, "t={t}: {rho}");
            if t_prev > 0 {
                assert!(rho < 7.5, "t={t}: {rho}");
            } else {
                // The final step has abar_prev = 1, so the bracket is 1.
                assert!((rho - 7.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn step_pairs_full_and_strided() {
        let s = Schedule::linear(6, 1e-3, 0.02).unwrap();
        let full = step_pairs(&s, 6).unwrap();
        assert_eq!(full, vec![(6, 5), (5, 4), (4, 3), (3, 2), (2, 1), (1, 0)]);
        let strided = step_pairs(&s, 3).unwrap();
        assert_eq!(strided, vec![(6, 4), (4, 2), (2, 0)]);
        assert!(step_pairs(&s, 4).is_err());
        assert!(step_pairs(&s, 0).is_err());
        assert!(step_pairs(&s, 7).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = Schedule::linear(50, 1e-3, 0.02).unwrap();
        let m = random_model(&s, 1);
        let run = run_with(GuidanceSpec::CcfgNeg { omega: 2.0, tau: 0.2 }, Variant::NoiseSpace);
        let a = sample(&m, &s, &run, 8).unwrap();
        let b = sample(&m, &s, &run, 8).unwrap();
        for (p, q) in a.points.iter().zip(&b.points) {
            for (x, y) in p.iter().zip(q) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn zero_scale_matches_unconditional_bitwise() {
        let s = Schedule::linear(50, 1e-3, 0.02).unwrap();
        let m = random_model(&s, 2);
        let neg = run_with(GuidanceSpec::CcfgNeg { omega: 0.0, tau: 1e-8 }, Variant::NoiseSpace);
        let none = run_with(GuidanceSpec::None, Variant::NoiseSpace);
        let a = sample(&m, &s, &neg, 6).unwrap();
        let b = sample(&m, &s, &none, 6).unwrap();
        for (p, q) in a.points.iter().zip(&b.points) {
            for (x, y) in p.iter().zip(q) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn cfg_gamma_one_equals_direct_conditional_loop() {
        let s = Schedule::linear(50, 1e-3, 0.02).unwrap();
        let m = random_model(&s, 3);
        let run = run_with(GuidanceSpec::Cfg { gamma: 1.0 }, Variant::NoiseSpace);
        let got = sample(&m, &s, &run, 4).unwrap();
        // Independent loop: plain DDIM driven by the conditional estimate.
        let pairs = step_pairs(&s, run.nfe).unwrap();
        for chain in 0..4 {
            let mut rng = GaussStream::new(chain_seed(run.seed, chain));
            let mut x = rng.gauss_vec(2);
            for &(t, t_prev) in &pairs {
                let eps = m.predict_eps(&x, t, Condition::Class(1)).unwrap();
                x = ddim_step(&s, t, t_prev, &x, &eps, &eps).unwrap();
            }
            for d in 0..2 {
                assert!(
                    (x[d] - got.points[chain][d]).abs() <= 1e-12,
                    "chain {chain}: {} vs {}",
                    x[d],
                    got.points[chain][d]
                );
            }
        }
    }

    #[test]
    fn noise_space_and_posterior_mean_agree() {
        // Noise-space loop at constant omega versus posterior-mean loop
        // with the rho schedule, random-weight model, both modes.
        let s = Schedule::linear(100, 1e-3, 0.02).unwrap();
        let m = random_model(&s, 5);
        for spec in [
            GuidanceSpec::CcfgPos { omega: 7.5, tau: 0.2 },
            GuidanceSpec::CcfgNeg { omega: 7.5, tau: 0.2 },
        ] {
            let a = sample(&m, &s, &run_with(spec, Variant::NoiseSpace), 3).unwrap();
            let b = sample(&m, &s, &run_with(spec, Variant::PosteriorMean), 3).unwrap();
            let (ta, tb) = (a.trajectories.unwrap(), b.trajectories.unwrap());
            let mut max_dev = 0.0f64;
            for (pa, pb) in ta.iter().zip(&tb) {
                for (xa, xb) in pa.iter().zip(pb) {
                    for d in 0..2 {
                        max_dev = max_dev.max((xa[d] - xb[d]).abs());
                    }
                }
            }
            assert!(max_dev <= 1e-9, "{spec:?}: max deviation {max_dev}");
        }
    }

    #[test]
    fn posterior_mean_variant_rejects_other_strategies() {
        let s = Schedule::linear(50, 1e-3, 0.02).unwrap();
        let m = random_model(&s, 6);
        let run = run_with(GuidanceSpec::Cfg { gamma: 2.0 }, Variant::PosteriorMean);
        assert!(matches!(
            sample(&m, &s, &run, 1),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn sample_validations() {
        let s = Schedule::linear(50, 1e-3, 0.02).unwrap();
        let other = Schedule::linear(51, 1e-3, 0.02).unwrap();
        let m = random_model(&s, 7);
        let run = run_with(GuidanceSpec::None, Variant::NoiseSpace);
        assert!(matches!(
            sample(&m, &other, &run, 1),
            Err(Error::FingerprintMismatch)
        ));
        assert!(sample(&m, &s, &run, 0).is_err());
        let bad_cond = SampleRun {
            cond: Condition::Class(9),
            spec: GuidanceSpec::Cfg { gamma: 1.0 },
            ..run.clone()
        };
        assert!(matches!(
            sample(&m, &s, &bad_cond, 1),
            Err(Error::ClassOutOfRange { .. })
        ));
        let posneg = SampleRun {
            spec: GuidanceSpec::PosNeg { gamma: 1.0 },
            ..run
        };
        assert!(matches!(
            sample(&m, &s, &posneg, 1),
            Err(Error::MissingInput(_))
        ));
    }

    #[test]
    fn dng_divergence_aborts_loudly() {
        let s = Schedule::linear(50, 1e-3, 0.02).unwrap();
        let m = random_model(&s, 8);
        // An absurd scale blasts the state far enough that the tracker's
        // squared distances overflow (inf − inf) within a step or two.
        let run = run_with(
            GuidanceSpec::Dng {
                omega: 1e300,
                prior: 0.25,
                tau_prime: 0.25,
                delta: 0.0,
            },
            Variant::NoiseSpace,
        );
        match sample(&m, &s, &run, 2) {
            Err(Error::NonFinite(_)) | Err(Error::ChainDiverged { .. }) => {}
            other => panic!("expected loud divergence, got {other:?}"),
        }
    }
}
