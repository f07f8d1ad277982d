//! Client-level differential privacy: clipping, Gaussian noising and the
//! Gaussian-DP accountant for Poisson-subsampled composition.
//!
//! After `T` rounds with sampling probability `p` and noise multiplier `σ`
//! the mechanism is `μ`-GDP with `μ = p √T √(e^{1/σ²} − 1)`, which converts
//! to `δ(ε) = Φ(−ε/μ + μ/2) − e^ε Φ(−ε/μ − μ/2)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the per-element noise standard deviation is derived from `σ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sensitivity {
    /// `σ · C / K` with `K` the number of clients selected this round.
    Lemma,
    /// `σ · C`.
    Clip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrivacySpec {
    pub clip: f64,
    /// Noise multiplier; when absent it is calibrated from `epsilon` and
    /// `delta`.
    pub sigma: Option<f64>,
    pub epsilon: f64,
    pub delta: f64,
    pub sensitivity: Sensitivity,
}

impl Default for PrivacySpec {
    fn default() -> Self {
        Self { clip: 1.0, sigma: None, epsilon: 0.25, delta: 1e-5, sensitivity: Sensitivity::Lemma }
    }
}

impl PrivacySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::Config(format!("privacy: clip must be positive, got {}", self.clip)));
        }
        if let Some(s) = self.sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("privacy: sigma must be >= 0, got {s}")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("privacy: epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("privacy: delta must lie in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }

    /// The configured `σ`, or the one calibrated for `(ε, δ, p, T)`.
    pub fn resolve_sigma(&self, p: f64, rounds: u64) -> Result<f64> {
        match self.sigma {
            Some(s) => Ok(s),
            None => calibrate_sigma(self.epsilon, self.delta, p, rounds),
        }
    }
}

/// Budgets named in the experiments: tight, medium, relaxed.
pub const EPSILON_PRESETS: [f64; 3] = [0.25, 2.0, 8.0];

/// Scales `x` onto the ℓ₂ ball of radius `c` when it lies outside.
///
/// The rescaled norm is forced to `≤ c` despite rounding, which also makes
/// the operator exactly idempotent.
pub fn clip(x: &Tensor, c: f64) -> Tensor {
    let n = x.norm_l2();
    if n <= c {
        return x.clone();
    }
    let mut f = c / n;
    loop {
        let y = x.scale(f);
        if y.norm_l2() <= c {
            return y;
        }
        f *= 1.0 - f64::EPSILON;
    }
}

/// Adds i.i.d. `N(0, std²)` to every element.
pub fn noise<R: Rng + ?Sized>(x: &Tensor, std: f64, rng: &mut R) -> Tensor {
    if std == 0.0 {
        return x.clone();
    }
    let mut out = x.clone();
    for v in out.data_mut() {
        *v += std * rng.sample::<f64, _>(StandardNormal);
    }
    out
}

pub fn sensitivity(c: f64, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("sensitivity needs at least one client".into()));
    }
    if !(c > 0.0) {
        return Err(Error::InvalidArgument(format!("clip bound must be positive, got {c}")));
    }
    Ok(c / k as f64)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn check_pt(p: f64, rounds: u64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("sampling probability {p} not in (0, 1]")));
    }
    if rounds == 0 {
        return Err(Error::InvalidArgument("rounds must be at least 1".into()));
    }
    Ok(())
}

/// `μ = p √T √(e^{1/σ²} − 1)`; overflows to `+∞` for very small `σ`.
pub fn gdp_mu(p: f64, rounds: u64, sigma: f64) -> Result<f64> {
    check_pt(p, rounds)?;
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("noise multiplier must be positive, got {sigma}")));
    }
    Ok(p * (rounds as f64).sqrt() * (1.0 / (sigma * sigma)).exp_m1().sqrt())
}

/// `δ(ε)` of a `μ`-GDP mechanism. `μ = 0` gives 0 and `μ = ∞` gives 1.
pub fn gdp_delta(eps: f64, mu: f64) -> f64 {
    if mu == 0.0 {
        return 0.0;
    }
    if mu.is_infinite() {
        return 1.0;
    }
    let a = normal_cdf(-eps / mu + mu / 2.0);
    let b = normal_cdf(-eps / mu - mu / 2.0);
    let tail = if b > 0.0 { (eps + b.ln()).exp() } else { 0.0 };
    (a - tail).clamp(0.0, 1.0)
}

const SIGMA_LO: f64 = 1e-3;
const SIGMA_HI: f64 = 1e8;

/// Noise multiplier whose `δ(ε)` after `T` rounds at sampling rate `p`
/// equals `delta`, by bisection on `ln σ`.
pub fn calibrate_sigma(eps: f64, delta: f64, p: f64, rounds: u64) -> Result<f64> {
    check_pt(p, rounds)?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta {delta} not in (0, 1)")));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon {eps} must be finite and >= 0")));
    }
    let f = |s: f64| -> Result<f64> { Ok(gdp_delta(eps, gdp_mu(p, rounds, s)?)) };
    let mut lo = SIGMA_LO;
    if f(lo)? <= delta {
        return Err(Error::Infeasible(format!("delta {delta} already met at sigma {lo}")));
    }
    let mut hi = 1.0f64;
    while f(hi)? > delta {
        hi *= 2.0;
        if hi > SIGMA_HI {
            return Err(Error::Infeasible(format!(
                "no sigma below {SIGMA_HI:e} reaches delta {delta} at epsilon {eps}"
            )));
        }
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if f(mid)? > delta {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-14 {
            break;
        }
    }
    Ok(hi)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrivacySpend {
    pub mu: f64,
    pub delta: f64,
}

/// Spend after `rounds` rounds at sampling rate `p` and multiplier `sigma`.
pub fn spend(eps: f64, p: f64, rounds: u64, sigma: f64) -> Result<PrivacySpend> {
    let mu = gdp_mu(p, rounds, sigma)?;
    Ok(PrivacySpend { mu, delta: gdp_delta(eps, mu) })
}
