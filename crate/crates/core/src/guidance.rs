//! Guidance strategies on the noise estimate.
//!
//! Every strategy maps the pair (ε̂_∅, ε̂_c) — plus per-run state for the
//! dynamic variants — to a guided noise estimate and the estimate used for
//! renoising:
//!
//! - `Cfg`: ε̂_∅ + γ(ε̂_c − ε̂_∅), sharpened posterior sampling.
//! - `CfgPP`: same direction at λ ∈ (0,1], but the sampler renoises with
//!   ε̂_∅ (denoised-space guidance).
//! - `NCfg`: negated CFG, ε̂_∅ − γ(ε̂_c − ε̂_∅); unbounded repulsion.
//! - `PosNeg`: ε̂_c⁺ + γ(ε̂_c⁺ − ε̂_c⁻), joint positive/negative prompt.
//! - `Dng`: negated CFG scaled by a tracked posterior odds p/(1−p).
//! - `CcfgPos`/`CcfgNeg`: contrastive CFG. The coefficient is the exact
//!   gradient step of an NCE loss between the conditional and
//!   unconditional transition kernels; it saturates at 2 for positive
//!   guidance and vanishes as exp(−τ‖Δ‖²) for negative guidance, so
//!   repulsion turns itself off once the sample is unrelated to the
//!   condition.

use crate::error::{Error, Result};
use crate::schedule::Schedule;

/// Strategy selector with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GuidanceSpec {
    None,
    Cfg { gamma: f64 },
    CfgPP { lambda: f64 },
    NCfg { gamma: f64 },
    PosNeg { gamma: f64 },
    Dng { omega: f64, prior: f64, tau_prime: f64, delta: f64 },
    CcfgPos { omega: f64, tau: f64 },
    CcfgNeg { omega: f64, tau: f64 },
}

impl GuidanceSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidRange(msg));
        match *self {
            GuidanceSpec::None => Ok(()),
            // Zero is admitted for every scalar scale: a shared sweep grid
            // includes 0, where all strategies collapse to unconditional
            // sampling.
            GuidanceSpec::Cfg { gamma } | GuidanceSpec::NCfg { gamma } | GuidanceSpec::PosNeg { gamma } => {
                if !(gamma.is_finite() && gamma >= 0.0) {
                    return bad(format!("gamma {gamma} must be >= 0"));
                }
                Ok(())
            }
            GuidanceSpec::CfgPP { lambda } => {
                if !(lambda.is_finite() && lambda > 0.0 && lambda <= 1.0) {
                    return bad(format!("lambda {lambda} outside (0,1]"));
                }
                Ok(())
            }
            GuidanceSpec::Dng { omega, prior, tau_prime, delta } => {
                if !(omega.is_finite() && omega >= 0.0) {
                    return bad(format!("omega {omega} must be >= 0"));
                }
                if !(prior > 0.0 && prior < 1.0) {
                    return bad(format!("prior {prior} outside (0,1)"));
                }
                if !(tau_prime.is_finite() && tau_prime >= 0.0) {
                    return bad(format!("tau' {tau_prime} must be >= 0"));
                }
                if !delta.is_finite() {
                    return bad(format!("delta {delta} must be finite"));
                }
                Ok(())
            }
            GuidanceSpec::CcfgPos { omega, tau } | GuidanceSpec::CcfgNeg { omega, tau } => {
                if !(omega.is_finite() && omega >= 0.0) {
                    return bad(format!("omega {omega} must be >= 0"));
                }
                if !(tau.is_finite() && tau > 0.0) {
                    return bad(format!("tau {tau} must be > 0"));
                }
                Ok(())
            }
        }
    }

    pub fn needs_second_condition(&self) -> bool {
        matches!(self, GuidanceSpec::PosNeg { .. })
    }

    pub fn needs_state(&self) -> bool {
        matches!(self, GuidanceSpec::Dng { .. })
    }

    /// Same strategy with its scalar scale replaced (used by the
    /// posterior-mean sampling variant to substitute ρ_t for ω).
    pub fn with_scale(&self, scale: f64) -> Result<GuidanceSpec> {
        match *self {
            GuidanceSpec::CcfgPos { tau, .. } => Ok(GuidanceSpec::CcfgPos { omega: scale, tau }),
            GuidanceSpec::CcfgNeg { tau, .. } => Ok(GuidanceSpec::CcfgNeg { omega: scale, tau }),
            _ => Err(Error::Unsupported(
                "per-step scale substitution is defined for the contrastive strategies".into(),
            )),
        }
    }

    pub fn method_name(&self) -> &'static str {
        match self {
            GuidanceSpec::None => "none",
            GuidanceSpec::Cfg { .. } => "cfg",
            GuidanceSpec::CfgPP { .. } => "cfg++",
            GuidanceSpec::NCfg { .. } => "ncfg",
            GuidanceSpec::PosNeg { .. } => "posneg",
            GuidanceSpec::Dng { .. } => "dng",
            GuidanceSpec::CcfgPos { .. } => "ccfg-pos",
            GuidanceSpec::CcfgNeg { .. } => "ccfg-neg",
        }
    }
}

/// Tracked log-odds of the negative condition along one sampling chain.
/// Chains never share state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DngState {
    log_odds: f64,
    clamp: f64,
}

pub const DEFAULT_DNG_CLAMP: f64 = 1e-4;

impl DngState {
    pub fn new(prior: f64) -> Result<Self> {
        Self::with_clamp(prior, DEFAULT_DNG_CLAMP)
    }

    pub fn with_clamp(prior: f64, clamp: f64) -> Result<Self> {
        if !(prior > 0.0 && prior < 1.0) {
            return Err(Error::InvalidRange(format!("prior {prior} outside (0,1)")));
        }
        if !(clamp > 0.0 && clamp < 0.5) {
            return Err(Error::InvalidRange(format!("clamp {clamp} outside (0,0.5)")));
        }
        let mut state = Self {
            log_odds: (prior / (1.0 - prior)).ln(),
            clamp,
        };
        state.clamp_in_place();
        Ok(state)
    }

    fn clamp_in_place(&mut self) {
        let lim = ((1.0 - self.clamp) / self.clamp).ln();
        self.log_odds = self.log_odds.clamp(-lim, lim);
    }

    /// Recovered posterior p(c⁻|x_t), always inside (clamp, 1−clamp).
    pub fn posterior(&self) -> f64 {
        1.0 / (1.0 + (-self.log_odds).exp())
    }

    /// Dynamic coefficient p/(1−p).
    pub fn guidance_scale(&self) -> f64 {
        self.log_odds.exp()
    }
}

/// Bayes update of the tracked log-odds from the observed transition:
/// log-odds += τ′·(‖x−μ_∅‖² − ‖x−μ_c‖²)/(2σ²) + δ, then posterior clamping.
pub fn dng_update(
    state: &DngState,
    tau_prime: f64,
    delta: f64,
    x_prev: &[f64],
    mu_null: &[f64],
    mu_cond: &[f64],
    sigma_sq: f64,
) -> Result<DngState> {
    if sigma_sq <= 0.0 {
        return Err(Error::InvalidRange(format!("sigma_sq {sigma_sq}")));
    }
    if x_prev.len() != mu_null.len() || x_prev.len() != mu_cond.len() {
        return Err(Error::ShapeMismatch("dng update dims".into()));
    }
    let d_null: f64 = x_prev
        .iter()
        .zip(mu_null)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let d_cond: f64 = x_prev
        .iter()
        .zip(mu_cond)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let increment = tau_prime * (d_null - d_cond) / (2.0 * sigma_sq) + delta;
    let log_odds = state.log_odds + increment;
    if !log_odds.is_finite() {
        return Err(Error::NonFinite("dng log-odds update".into()));
    }
    let mut next = DngState {
        log_odds,
        clamp: state.clamp,
    };
    next.clamp_in_place();
    Ok(next)
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Positive contrastive coefficient λ⁺ = 2/(1+e^{−τ d²}) ∈ [1, 2),
/// strictly increasing in d². In f64 the supremum is reached once
/// e^{−τ d²} drops below one ulp of 1 (τ·d² ≳ 36).
pub fn coef_ccfg_pos(tau: f64, dist_sq: f64) -> Result<f64> {
    if dist_sq < 0.0 {
        return Err(Error::InvalidRange(format!("dist_sq {dist_sq}")));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidRange(format!("tau {tau}")));
    }
    Ok(2.0 / (1.0 + (-tau * dist_sq).exp()))
}

/// Negative contrastive coefficient λ⁻ = −2e^{−τ d²}/(1+e^{−τ d²}) ∈ [−1, 0),
/// −1 at d² = 0, vanishing as d² grows.
pub fn coef_ccfg_neg(tau: f64, dist_sq: f64) -> Result<f64> {
    if dist_sq < 0.0 {
        return Err(Error::InvalidRange(format!("dist_sq {dist_sq}")));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidRange(format!("tau {tau}")));
    }
    let e = (-tau * dist_sq).exp();
    Ok(-2.0 * e / (1.0 + e))
}

/// Overflow-safe softplus log(1+e^x).
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn check_dims(eps: &[f64], eps_null: &[f64], eps_cond: &[f64]) -> Result<()> {
    if eps.len() != eps_null.len() || eps.len() != eps_cond.len() {
        return Err(Error::ShapeMismatch(format!(
            "eps dims {}/{}/{}",
            eps.len(),
            eps_null.len(),
            eps_cond.len()
        )));
    }
    Ok(())
}

/// NCE loss treating x_t as a sample from the conditional kernel:
/// ℓ⁺(ε) = softplus(τ(‖ε−ε̂_c‖² − ‖ε−ε̂_∅‖²)).
pub fn nce_loss_pos(eps: &[f64], eps_null: &[f64], eps_cond: &[f64], tau: f64) -> Result<f64> {
    check_dims(eps, eps_null, eps_cond)?;
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidRange(format!("tau {tau}")));
    }
    Ok(softplus(tau * (dist_sq(eps, eps_cond) - dist_sq(eps, eps_null))))
}

/// NCE loss treating x_t as a sample from the unconditional kernel:
/// ℓ⁻(ε) = softplus(τ(‖ε−ε̂_∅‖² − ‖ε−ε̂_c‖²)).
pub fn nce_loss_neg(eps: &[f64], eps_null: &[f64], eps_cond: &[f64], tau: f64) -> Result<f64> {
    check_dims(eps, eps_null, eps_cond)?;
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidRange(format!("tau {tau}")));
    }
    Ok(softplus(tau * (dist_sq(eps, eps_null) - dist_sq(eps, eps_cond))))
}

/// Score-distillation loss (ᾱ_t/(1−ᾱ_t))·‖x̂_c − x‖².
pub fn sds_loss(schedule: &Schedule, t: usize, x: &[f64], x_hat_c: &[f64]) -> Result<f64> {
    let ab = schedule.alpha_bar(t)?;
    if t == 0 {
        return Err(Error::StepOutOfRange {
            t,
            t_max: schedule.len(),
        });
    }
    if x.len() != x_hat_c.len() {
        return Err(Error::ShapeMismatch("sds_loss dims".into()));
    }
    Ok(ab / (1.0 - ab) * dist_sq(x, x_hat_c))
}

/// Result of one guidance evaluation: the guided noise estimate and the
/// estimate the sampler should renoise with.
#[derive(Debug, Clone)]
pub struct Guided {
    pub guided: Vec<f64>,
    pub renoise: Vec<f64>,
}

/// Dispatch one guidance step. `eps_cond2` is the c⁻ prediction and is
/// required only by `PosNeg`; `state` is required only by `Dng` (its
/// evolution happens separately in [`dng_update`]).
pub fn guide(
    spec: &GuidanceSpec,
    eps_null: &[f64],
    eps_cond: &[f64],
    eps_cond2: Option<&[f64]>,
    state: Option<&DngState>,
) -> Result<Guided> {
    spec.validate()?;
    check_dims(eps_null, eps_null, eps_cond)?;
    let along = |k: f64| -> Vec<f64> {
        eps_null
            .iter()
            .zip(eps_cond)
            .map(|(n, c)| n + k * (c - n))
            .collect()
    };
    let guided = match *spec {
        GuidanceSpec::None => eps_null.to_vec(),
        GuidanceSpec::Cfg { gamma } => along(gamma),
        GuidanceSpec::CfgPP { lambda } => along(lambda),
        GuidanceSpec::NCfg { gamma } => along(-gamma),
        GuidanceSpec::PosNeg { gamma } => {
            let neg = eps_cond2.ok_or(Error::MissingInput("second condition prediction"))?;
            check_dims(eps_null, eps_cond, neg)?;
            eps_cond
                .iter()
                .zip(neg)
                .map(|(p, m)| p + gamma * (p - m))
                .collect()
        }
        GuidanceSpec::Dng { omega, .. } => {
            let st = state.ok_or(Error::MissingInput("dng state"))?;
            along(-omega * st.guidance_scale())
        }
        GuidanceSpec::CcfgPos { omega, tau } => {
            along(omega * coef_ccfg_pos(tau, dist_sq(eps_null, eps_cond))?)
        }
        GuidanceSpec::CcfgNeg { omega, tau } => {
            along(omega * coef_ccfg_neg(tau, dist_sq(eps_null, eps_cond))?)
        }
    };
    if guided.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{} guided estimate",
            spec.method_name()
        )));
    }
    let renoise = match spec {
        GuidanceSpec::CfgPP { .. } => eps_null.to_vec(),
        _ => guided.clone(),
    };
    Ok(Guided { guided, renoise })
}

/// One row of the coefficient/loss curve table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub dist_sq: f64,
    pub coef_pos: f64,
    pub coef_neg: f64,
    /// ℓ⁺ evaluated at ε = ε̂_∅ with ‖ε̂_∅−ε̂_c‖² = dist_sq.
    pub loss_pos: f64,
    pub loss_neg: f64,
    pub cfg: f64,
    pub ncfg: f64,
}

/// Effective-coefficient and loss curves over a grid of ‖ε̂_∅−ε̂_c‖².
/// CFG and negated CFG appear as the constant ±ω reference lines.
pub fn emit_curves(tau: f64, omega: f64, dist_sq_grid: &[f64]) -> Result<Vec<CurveRow>> {
    for pair in dist_sq_grid.windows(2) {
        if pair[1] < pair[0] {
            return Err(Error::InvalidRange("curve grid must be sorted".into()));
        }
    }
    if dist_sq_grid.first().is_some_and(|&d| d < 0.0) {
        return Err(Error::InvalidRange("curve grid must be nonnegative".into()));
    }
    dist_sq_grid
        .iter()
        .map(|&d2| {
            Ok(CurveRow {
                dist_sq: d2,
                coef_pos: coef_ccfg_pos(tau, d2)?,
                coef_neg: coef_ccfg_neg(tau, d2)?,
                loss_pos: softplus(tau * d2),
                loss_neg: softplus(-tau * d2),
                cfg: omega,
                ncfg: -omega,
            })
        })
        .collect()
}

pub const CURVES_CSV_HEADER: &str = "dist_sq,coef_pos,coef_neg,loss_pos,loss_neg,cfg,ncfg";

impl CurveRow {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.dist_sq, self.coef_pos, self.coef_neg, self.loss_pos, self.loss_neg, self.cfg, self.ncfg
        )
    }
}
