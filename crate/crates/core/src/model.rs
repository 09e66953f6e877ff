//! Shared domain types: channel/message parameters, transmitter moments,
//! receiver error covariance and per-step encoder coefficients.
//!
//! Cross terms (`sigma_uw`, `cov_uw`) are signed covariances. The moment
//! types are generic over [`Scalar`] so the solver can push dual numbers
//! through them; everything else in the crate uses the `f64` default.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Relative slack for Cauchy–Schwarz/PSD checks on values produced by
/// floating-point recursions.
pub(crate) const CS_REL_TOL: f64 = 1e-9;

/// Smallest transmitter variance the encoder will normalize.
pub const VARIANCE_FLOOR: f64 = 1e-300;

/// Message and channel statistics. `horizon` counts coded transmissions
/// after the uncoded slot 0, so an episode uses `horizon + 1` channel slots.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    sigma_w2: f64,
    power: f64,
    sigma_f2: f64,
    sigma_b2: f64,
    horizon: usize,
}

fn check_positive(name: &'static str, value: f64) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::NonFinite { name, value });
    }
    if value <= 0.0 {
        return Err(Error::NonPositiveVariance { name, value });
    }
    Ok(())
}

impl SystemParams {
    pub fn new(sigma_w2: f64, power: f64, sigma_f2: f64, sigma_b2: f64, horizon: usize) -> Result<Self> {
        validate(sigma_w2, power, sigma_f2, sigma_b2, horizon as i64)
    }

    pub fn sigma_w2(&self) -> f64 {
        self.sigma_w2
    }

    pub fn power(&self) -> f64 {
        self.power
    }

    pub fn sigma_f2(&self) -> f64 {
        self.sigma_f2
    }

    pub fn sigma_b2(&self) -> f64 {
        self.sigma_b2
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn with_horizon(self, horizon: usize) -> Self {
        Self { horizon, ..self }
    }

    pub fn ratios(&self) -> Ratios {
        derive_ratios(self)
    }

    /// Scale of the uncoded transmission, sqrt(P / σ_w²).
    pub fn gamma0(&self) -> f64 {
        (self.power / self.sigma_w2).sqrt()
    }
}

/// Validates raw numeric inputs.
pub fn validate(sigma_w2: f64, power: f64, sigma_f2: f64, sigma_b2: f64, horizon: i64) -> Result<SystemParams> {
    check_positive("sigma_w2", sigma_w2)?;
    check_positive("power", power)?;
    check_positive("sigma_f2", sigma_f2)?;
    if !sigma_b2.is_finite() {
        return Err(Error::NonFinite { name: "sigma_b2", value: sigma_b2 });
    }
    if sigma_b2 < 0.0 {
        return Err(Error::NegativeVariance { name: "sigma_b2", value: sigma_b2 });
    }
    if horizon < 0 {
        return Err(Error::NegativeHorizon(horizon));
    }
    Ok(SystemParams { sigma_w2, power, sigma_f2, sigma_b2, horizon: horizon as usize })
}

/// Forward SNR `s = P/σ_f²` and feedback-to-forward noise ratio `beta = σ_b²/σ_f²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub s: f64,
    pub beta: f64,
}

pub fn derive_ratios(params: &SystemParams) -> Ratios {
    Ratios { s: params.power / params.sigma_f2, beta: params.sigma_b2 / params.sigma_f2 }
}

/// Transmitter-side second moments: Var[u_t] and Cov[u_t, w].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TxMoments<S = f64> {
    sigma_u2: S,
    sigma_uw: S,
}

impl<S: Scalar> TxMoments<S> {
    /// Checks `sigma_u2 ≥ 0` and `sigma_uw² ≤ sigma_u2·σ_w²`.
    pub fn new(sigma_u2: S, sigma_uw: S, params: &SystemParams) -> Result<Self> {
        let (u2, uw) = (sigma_u2.re(), sigma_uw.re());
        if !u2.is_finite() || !uw.is_finite() {
            return Err(Error::InvalidMoments(format!("non-finite entries ({u2}, {uw})")));
        }
        if u2 < 0.0 {
            return Err(Error::InvalidMoments(format!("negative variance {u2}")));
        }
        let bound = u2 * params.sigma_w2;
        if uw * uw > bound * (1.0 + CS_REL_TOL) + f64::MIN_POSITIVE {
            return Err(Error::InvalidMoments(format!(
                "cross moment {uw} violates Cauchy-Schwarz (sigma_u2={u2}, sigma_w2={})",
                params.sigma_w2
            )));
        }
        Ok(Self { sigma_u2, sigma_uw })
    }

    /// Moments at slot 0, where `u_0 = w`.
    pub fn initial(params: &SystemParams) -> Self {
        let v = S::from_f64(params.sigma_w2);
        Self { sigma_u2: v, sigma_uw: v }
    }

    pub(crate) fn from_raw(sigma_u2: S, sigma_uw: S) -> Self {
        Self { sigma_u2, sigma_uw }
    }

    pub fn sigma_u2(&self) -> S {
        self.sigma_u2
    }

    pub fn sigma_uw(&self) -> S {
        self.sigma_uw
    }

    pub fn to_real(&self) -> TxMoments<f64> {
        TxMoments { sigma_u2: self.sigma_u2.re(), sigma_uw: self.sigma_uw.re() }
    }
}

impl TxMoments<f64> {
    pub fn lift<S: Scalar>(&self) -> TxMoments<S> {
        TxMoments { sigma_u2: S::from_f64(self.sigma_u2), sigma_uw: S::from_f64(self.sigma_uw) }
    }
}

/// Receiver-side error covariance of (w, u_t) given y_{0:t}.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RxErrorCov<S = f64> {
    var_w: S,
    var_u: S,
    cov_uw: S,
}

impl<S: Scalar> RxErrorCov<S> {
    pub fn new(var_w: S, var_u: S, cov_uw: S) -> Result<Self> {
        let (w, u, c) = (var_w.re(), var_u.re(), cov_uw.re());
        if !(w.is_finite() && u.is_finite() && c.is_finite()) {
            return Err(Error::InvalidCovariance(format!("non-finite entries ({w}, {u}, {c})")));
        }
        if w < 0.0 || u < 0.0 {
            return Err(Error::InvalidCovariance(format!("negative variance ({w}, {u})")));
        }
        if c * c > w * u * (1.0 + CS_REL_TOL) + f64::MIN_POSITIVE {
            return Err(Error::InvalidCovariance(format!("2x2 block not PSD: cov {c}, variances ({w}, {u})")));
        }
        Ok(Self { var_w, var_u, cov_uw })
    }

    pub(crate) fn from_raw(var_w: S, var_u: S, cov_uw: S) -> Self {
        Self { var_w, var_u, cov_uw }
    }

    pub fn var_w(&self) -> S {
        self.var_w
    }

    pub fn var_u(&self) -> S {
        self.var_u
    }

    pub fn cov_uw(&self) -> S {
        self.cov_uw
    }

    pub fn to_real(&self) -> RxErrorCov<f64> {
        RxErrorCov { var_w: self.var_w.re(), var_u: self.var_u.re(), cov_uw: self.cov_uw.re() }
    }
}

impl RxErrorCov<f64> {
    pub fn lift<S: Scalar>(&self) -> RxErrorCov<S> {
        RxErrorCov { var_w: S::from_f64(self.var_w), var_u: S::from_f64(self.var_u), cov_uw: S::from_f64(self.cov_uw) }
    }
}

/// Linear combination `u_{t+1} = a·w + b·u_t + c·z_t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gains<S = f64> {
    pub a: S,
    pub b: S,
    pub c: S,
}

impl<S: Scalar> Gains<S> {
    pub fn new(a: S, b: S, c: S) -> Self {
        Self { a, b, c }
    }

    /// `(0, 1, c)`: the restricted family used by every optimal schedule.
    pub fn feedback_only(c: S) -> Self {
        Self { a: S::zero(), b: S::one(), c }
    }
}

/// Gains for one coded step together with the power scale of the symbol
/// they produce (`gamma_next = sqrt(P / σ²_{u,t+1})`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepCoeffs<S = f64> {
    gains: Gains<S>,
    gamma_next: S,
}

impl<S: Scalar> StepCoeffs<S> {
    pub fn new(gains: Gains<S>, gamma_next: S) -> Result<Self> {
        let g = gamma_next.re();
        if !(g.is_finite() && g > 0.0) {
            return Err(Error::InvalidCoeffs(format!("gamma_next must be positive and finite, got {g}")));
        }
        let Gains { a, b, c } = gains;
        if !(a.re().is_finite() && b.re().is_finite() && c.re().is_finite()) {
            return Err(Error::InvalidCoeffs("non-finite gain".into()));
        }
        Ok(Self { gains, gamma_next })
    }

    pub fn gains(&self) -> Gains<S> {
        self.gains
    }

    pub fn a(&self) -> S {
        self.gains.a
    }

    pub fn b(&self) -> S {
        self.gains.b
    }

    pub fn c(&self) -> S {
        self.gains.c
    }

    pub fn gamma_next(&self) -> S {
        self.gamma_next
    }
}

/// MDP state: transmitter moments and receiver error covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MdpState<S = f64> {
    pub tx: TxMoments<S>,
    pub rx: RxErrorCov<S>,
}

impl<S: Scalar> MdpState<S> {
    pub fn to_real(&self) -> MdpState<f64> {
        MdpState { tx: self.tx.to_real(), rx: self.rx.to_real() }
    }

    /// Re-checks both component invariants.
    pub fn check(&self, params: &SystemParams) -> Result<()> {
        TxMoments::new(self.tx.sigma_u2, self.tx.sigma_uw, params)?;
        RxErrorCov::new(self.rx.var_w, self.rx.var_u, self.rx.cov_uw)?;
        Ok(())
    }
}

impl MdpState<f64> {
    pub fn lift<S: Scalar>(&self) -> MdpState<S> {
        MdpState { tx: self.tx.lift(), rx: self.rx.lift() }
    }
}
