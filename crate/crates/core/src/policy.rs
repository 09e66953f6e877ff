//! Gain schedules: the closed-form optimal policy, its value function and
//! horizon formulas, and the Schalkwijk–Kailath baseline.
//!
//! All closed-form expressions are evaluated exactly as printed. Where they
//! disagree with the numeric oracle in [`crate::dp`] (only possible for
//! noisy feedback), [`oracle_calibrated`] supplies the oracle's schedule and
//! the per-step discrepancies.

use serde::{Deserialize, Serialize};

use crate::dp::{self, SearchSpec};
use crate::encoder::complete_coeffs;
use crate::error::{Error, Result};
use crate::model::{Gains, MdpState, Ratios, StepCoeffs, SystemParams, TxMoments};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EtaConstants {
    pub eta0: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    pub eta4: f64,
}

pub fn eta_constants(r: &Ratios) -> EtaConstants {
    let (s, b) = (r.s, r.beta);
    EtaConstants {
        eta0: (1.0 + s) * (1.0 + b),
        eta1: 1.0 + b + b,
        eta2: b,
        eta3: s * (1.0 + b) * (1.0 + s),
        eta4: 1.0 + b + s + 2.0 * s * b,
    }
}

pub fn k_one(r: &Ratios) -> f64 {
    let (s, b) = (r.s, r.beta);
    (1.0 + b + s * b) / ((1.0 + b) * s * (1.0 + s))
}

/// `K_1, K_2, …` with `K_n = f(K_{n−1})`.
#[derive(Clone, Debug, PartialEq)]
pub struct KSequence(Vec<f64>);

impl KSequence {
    /// `K_n`, 1-indexed.
    pub fn get(&self, n: usize) -> Option<f64> {
        n.checked_sub(1).and_then(|i| self.0.get(i)).copied()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn k_step(eta: &EtaConstants, k: f64) -> f64 {
    (eta.eta1 * k * k + eta.eta2 * k) / (eta.eta3 * k * k + eta.eta4 * k + eta.eta2)
}

pub fn k_sequence(r: &Ratios, n: usize) -> KSequence {
    let eta = eta_constants(r);
    let mut out = Vec::with_capacity(n);
    if n > 0 {
        out.push(k_one(r));
    }
    while out.len() < n {
        let prev = out[out.len() - 1];
        out.push(k_step(&eta, prev));
    }
    KSequence(out)
}

/// Closed-form gain: `a = 0, b = 1, c = −K√S (σ_u/σ_f) / (K η_0 + β)`,
/// completed with the scale of the resulting symbol.
pub fn optimal_gain(m: &TxMoments, k_n: f64, params: &SystemParams) -> Result<StepCoeffs> {
    let gamma_t = crate::encoder::power_scale(m.sigma_u2(), params)?;
    let r = params.ratios();
    let eta = eta_constants(&r);
    let c = -k_n * r.s.sqrt() * (m.sigma_u2().sqrt() / params.sigma_f2().sqrt()) / (k_n * eta.eta0 + r.beta);
    Ok(complete_coeffs(m, Gains::feedback_only(c), gamma_t, params)?.0)
}

/// Closed-form value function at `state` with `K_n`.
///
/// The quartic cross term is the squared covariance: the printed
/// `(σ^r_uw)⁴` squares a quantity that is itself written as a square.
pub fn value(state: &MdpState, k_n: f64) -> Result<f64> {
    let (var_w, var_u, cov) = (state.rx.var_w(), state.rx.var_u(), state.rx.cov_uw());
    let su2 = state.tx.sigma_u2();
    let den = k_n * su2 + var_u;
    if !(den > 0.0) {
        return Err(Error::DegenerateState { sigma_u2: su2 });
    }
    Ok((-cov * cov + k_n * var_w * su2 + var_w * var_u) / den)
}

/// Printed total reduction factor `ζ_T` and `V_0 = σ_w²/ζ_T`.
pub fn zeta(params: &SystemParams) -> Result<(f64, f64)> {
    let t = params.horizon();
    if t == 0 {
        return Err(Error::HorizonOutOfRange { got: 0, min: 1, max: usize::MAX });
    }
    let r = params.ratios();
    let (s, b) = (r.s, r.beta);
    let k = k_sequence(&r, t).get(t).expect("sequence has T entries");
    let z = (1.0 + k + s) * (k + b * (1.0 + k) + k * s * (1.0 + 2.0 * b)) / (k * (k + b + k * b + k * s * b));
    Ok((z, params.sigma_w2() / z))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ClosedForm,
    NumericDp,
    Sk,
    OracleCalibrated,
    Custom,
}

/// Per-step coefficients for coded slots `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTable {
    schedule: Vec<StepCoeffs>,
    provenance: Provenance,
}

impl PolicyTable {
    pub fn new(schedule: Vec<StepCoeffs>, provenance: Provenance, params: &SystemParams) -> Result<Self> {
        if schedule.len() != params.horizon() {
            return Err(Error::HorizonMismatch { expected: params.horizon(), got: schedule.len() });
        }
        Ok(Self { schedule, provenance })
    }

    /// Builds a table from raw gains, deriving each `gamma_next` by
    /// propagating the transmitter moments from slot 0.
    pub fn from_gains(gains: &[Gains], provenance: Provenance, params: &SystemParams) -> Result<Self> {
        if gains.len() != params.horizon() {
            return Err(Error::HorizonMismatch { expected: params.horizon(), got: gains.len() });
        }
        build_forward(params, provenance, |t, _| Ok(gains[t - 1]))
    }

    /// Feedback-only table from gains per unit transmitter std (`c = ĉ σ_u`).
    pub fn from_normalized(normalized: &[f64], provenance: Provenance, params: &SystemParams) -> Result<Self> {
        if normalized.len() != params.horizon() {
            return Err(Error::HorizonMismatch { expected: params.horizon(), got: normalized.len() });
        }
        build_forward(params, provenance, |t, m| Ok(Gains::feedback_only(normalized[t - 1] * m.sigma_u2().sqrt())))
    }

    pub fn schedule(&self) -> &[StepCoeffs] {
        &self.schedule
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.schedule.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schedule.is_empty()
    }

    /// Coefficients for coded slot `t` (1-indexed).
    pub fn step(&self, t: usize) -> Option<&StepCoeffs> {
        t.checked_sub(1).and_then(|i| self.schedule.get(i))
    }

    pub fn c_values(&self) -> Vec<f64> {
        self.schedule.iter().map(|s| s.c()).collect()
    }
}

/// Forward pass from slot 0, asking `rule(t, moments)` for the gains of
/// coded slot `t`.
fn build_forward<F>(params: &SystemParams, provenance: Provenance, mut rule: F) -> Result<PolicyTable>
where
    F: FnMut(usize, &TxMoments) -> Result<Gains>,
{
    let mut m = TxMoments::initial(params);
    let mut gamma = params.gamma0();
    let mut schedule = Vec::with_capacity(params.horizon());
    for t in 1..=params.horizon() {
        let gains = rule(t, &m)?;
        let (coeffs, next) = complete_coeffs(&m, gains, gamma, params)?;
        gamma = coeffs.gamma_next();
        m = next;
        schedule.push(coeffs);
    }
    PolicyTable::new(schedule, provenance, params)
}

/// SK baseline: `c_t = −√S σ_{u,t} / ((1+S) σ_f)`, i.e. subtract the MMSE
/// estimate of `u_t` from the latest output. Feedback noise is ignored.
pub fn sk_table(params: &SystemParams) -> Result<PolicyTable> {
    let s = params.ratios().s;
    let sigma_f = params.sigma_f2().sqrt();
    build_forward(params, Provenance::Sk, |_, m| {
        Ok(Gains::feedback_only(-s.sqrt() * m.sigma_u2().sqrt() / ((1.0 + s) * sigma_f)))
    })
}

/// Closed-form schedule; coded slot `t` uses `K_{T−t+1}`, so the last slot
/// uses `K_1`.
pub fn closed_form_table(params: &SystemParams) -> Result<PolicyTable> {
    let horizon = params.horizon();
    if horizon == 0 {
        return Err(Error::HorizonOutOfRange { got: 0, min: 1, max: usize::MAX });
    }
    let ks = k_sequence(&params.ratios(), horizon);
    build_forward(params, Provenance::ClosedForm, |t, m| {
        let k = ks.get(horizon - t + 1).expect("index within 1..=T");
        Ok(optimal_gain(m, k, params)?.gains())
    })
}

/// One row of the closed-form vs oracle gain comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GainComparison {
    pub s: f64,
    pub beta: f64,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub t: usize,
    pub c_closed_form: f64,
    pub c_oracle: f64,
    pub abs_diff: f64,
}

/// Schedule whose coefficients come from the numeric oracle, together with
/// the step-by-step comparison against the closed form.
pub fn oracle_calibrated(params: &SystemParams, spec: &SearchSpec) -> Result<(PolicyTable, Vec<GainComparison>)> {
    let closed = closed_form_table(params)?;
    let (oracle, _) = dp::backward_induction(params, spec)?;
    let report = compare_gains(params, &closed, &oracle);
    let table = PolicyTable { schedule: oracle.schedule, provenance: Provenance::OracleCalibrated };
    Ok((table, report))
}

pub fn compare_gains(params: &SystemParams, closed: &PolicyTable, oracle: &PolicyTable) -> Vec<GainComparison> {
    let r = params.ratios();
    closed
        .schedule()
        .iter()
        .zip(oracle.schedule())
        .enumerate()
        .map(|(i, (cf, or))| GainComparison {
            s: r.s,
            beta: r.beta,
            horizon: params.horizon(),
            t: i + 1,
            c_closed_form: cf.c(),
            c_oracle: or.c(),
            abs_diff: (cf.c() - or.c()).abs(),
        })
        .collect()
}
