//! Linear sequential encoder.
//!
//! The hidden state evolves as `u_{t+1} = a w + b u_t + c z_t` and is sent as
//! `x_t = γ_t u_t` with `γ_t = sqrt(P / σ²_{u,t})`, so every symbol carries
//! second moment exactly `P`. The transmitter tracks `σ²_{u,t}` and
//! `Cov[u_t, w]` analytically; both are data-independent.

use crate::error::{Error, Result};
use crate::model::{Gains, StepCoeffs, SystemParams, TxMoments, VARIANCE_FLOOR};
use crate::scalar::Scalar;

/// `sqrt(P / sigma_u2)`; fails when the variance has collapsed.
pub fn power_scale<S: Scalar>(sigma_u2: S, params: &SystemParams) -> Result<S> {
    let v = sigma_u2.re();
    if !(v > VARIANCE_FLOOR) {
        return Err(Error::DegenerateState { sigma_u2: v });
    }
    Ok((S::from_f64(params.power()) / sigma_u2).sqrt())
}

/// One step of the transmitter moment recursion.
///
/// The feedback is `z_t = γ_t u_t + w_f + w_b`, so `u_{t+1}` loads on `u_t`
/// with `b + γ_t c` and picks up `c²(σ_f² + σ_b²)` of channel noise.
/// `gamma_t` is the scale of the *current* symbol.
pub fn propagate_tx_moments<S: Scalar>(
    m: &TxMoments<S>,
    gains: &Gains<S>,
    gamma_t: S,
    params: &SystemParams,
) -> TxMoments<S> {
    let Gains { a, b, c } = *gains;
    let k = b + gamma_t * c;
    let sw2 = S::from_f64(params.sigma_w2());
    let noise = S::from_f64(params.sigma_f2() + params.sigma_b2());
    let two = S::from_f64(2.0);
    let sigma_u2 = a * a * sw2 + k * k * m.sigma_u2() + two * a * k * m.sigma_uw() + c * c * noise;
    let sigma_uw = a * sw2 + k * m.sigma_uw();
    TxMoments::from_raw(sigma_u2, sigma_uw)
}

/// Completes `gains` with the power scale of the symbol they produce.
pub fn complete_coeffs<S: Scalar>(
    m: &TxMoments<S>,
    gains: Gains<S>,
    gamma_t: S,
    params: &SystemParams,
) -> Result<(StepCoeffs<S>, TxMoments<S>)> {
    let next = propagate_tx_moments(m, &gains, gamma_t, params);
    let gamma_next = power_scale(next.sigma_u2(), params)?;
    Ok((StepCoeffs::new(gains, gamma_next)?, next))
}

/// Transmitter state: current `u_t`, its scale and analytic moments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderState {
    pub u: f64,
    pub t: usize,
    pub moments: TxMoments,
    pub gamma: f64,
}

/// Slot 0: `u_0 = w`, sent uncoded as `γ_0 w`.
pub fn init_encoder(w: f64, params: &SystemParams) -> (EncoderState, f64) {
    let gamma = params.gamma0();
    let state = EncoderState { u: w, t: 0, moments: TxMoments::initial(params), gamma };
    (state, gamma * w)
}

/// Relative mismatch tolerated between a table's `gamma_next` and the one
/// implied by the propagated moments.
const GAMMA_REL_TOL: f64 = 1e-9;

/// Advances the encoder one coded slot given the feedback `z` of the
/// previous channel output. Returns the new state and the symbol `x_{t+1}`.
pub fn encoder_step(
    state: &EncoderState,
    w: f64,
    z: f64,
    coeffs: &StepCoeffs,
    params: &SystemParams,
) -> Result<(EncoderState, f64)> {
    let moments = propagate_tx_moments(&state.moments, &coeffs.gains(), state.gamma, params);
    let gamma = power_scale(moments.sigma_u2(), params)?;
    let declared = coeffs.gamma_next();
    if (declared - gamma).abs() > GAMMA_REL_TOL * gamma {
        return Err(Error::InvalidCoeffs(format!(
            "gamma_next {declared} inconsistent with propagated moments (expected {gamma}) at t={}",
            state.t + 1
        )));
    }
    let u = coeffs.a() * w + coeffs.b() * state.u + coeffs.c() * z;
    let next = EncoderState { u, t: state.t + 1, moments, gamma: declared };
    Ok((next, declared * u))
}
