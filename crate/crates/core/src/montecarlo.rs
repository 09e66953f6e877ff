//! End-to-end Monte Carlo simulation.
//!
//! A trial draws the message and all noise from its own pair of substreams,
//! so a run is a pure function of `(params, table, seed, trials)`. Trials are
//! grouped into fixed-size chunks; chunk statistics are computed in
//! parallel and merged in chunk order, which keeps results bit-identical
//! across thread counts.

use rayon::prelude::*;
use serde::Serialize;

use crate::channel::{feedback, transmit, Direction, GaussianSource, NoiseStream};
use crate::dp::trajectory;
use crate::encoder::{encoder_step, init_encoder};
use crate::error::{Error, Result};
use crate::kalman::{build_system, filter_step, initial_update};
use crate::model::SystemParams;
use crate::policy::PolicyTable;

pub const MIN_MSE_TRIALS: u64 = 100;
pub const MIN_COVARIANCE_TRIALS: u64 = 10_000;
const CHUNK: u64 = 1024;

/// What happened in one channel use.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SlotRecord {
    pub t: usize,
    /// Encoder hidden state `u_t`.
    pub u: f64,
    pub x: f64,
    pub y: f64,
    /// Feedback that produced this slot's symbol; `None` in slot 0.
    pub z: Option<f64>,
    pub w_hat: f64,
    pub u_hat: f64,
    /// Filter's error variance for `w` after this slot.
    pub var_w: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trace {
    pub w: f64,
    pub slots: Vec<SlotRecord>,
}

impl Trace {
    pub fn w_hat(&self) -> f64 {
        self.slots.last().expect("slot 0 always present").w_hat
    }

    pub fn error(&self) -> f64 {
        self.w - self.w_hat()
    }
}

/// Runs slots `0..=T` for a given message.
pub fn run_episode_with_message<F, B>(
    w: f64,
    params: &SystemParams,
    table: &PolicyTable,
    forward: &mut F,
    back: &mut B,
) -> Result<Trace>
where
    F: GaussianSource,
    B: GaussianSource,
{
    if table.len() != params.horizon() {
        return Err(Error::HorizonMismatch { expected: params.horizon(), got: table.len() });
    }
    let mut slots = Vec::with_capacity(table.len() + 1);
    let (mut enc, x0) = init_encoder(w, params);
    let mut y = transmit(x0, params, forward);
    let mut filt = initial_update(params, y);
    slots.push(SlotRecord {
        t: 0,
        u: enc.u,
        x: x0,
        y,
        z: None,
        w_hat: filt.w_hat(),
        u_hat: filt.u_hat(),
        var_w: filt.cov[0][0],
    });
    for (i, coeffs) in table.schedule().iter().enumerate() {
        let z = feedback(y, params, back);
        let (next, x) = encoder_step(&enc, w, z, coeffs, params)?;
        enc = next;
        y = transmit(x, params, forward);
        filt = filter_step(&filt, y, &build_system(coeffs, params))?;
        slots.push(SlotRecord {
            t: i + 1,
            u: enc.u,
            x,
            y,
            z: Some(z),
            w_hat: filt.w_hat(),
            u_hat: filt.u_hat(),
            var_w: filt.cov[0][0],
        });
    }
    Ok(Trace { w, slots })
}

/// Draws `w` as the first sample of the forward stream, then runs the episode.
pub fn run_episode<F, B>(params: &SystemParams, table: &PolicyTable, forward: &mut F, back: &mut B) -> Result<Trace>
where
    F: GaussianSource,
    B: GaussianSource,
{
    let w = params.sigma_w2().sqrt() * forward.standard_normal();
    run_episode_with_message(w, params, table, forward, back)
}

/// Trial `trial` of the run keyed by `seed`.
pub fn run_trial(params: &SystemParams, table: &PolicyTable, seed: u64, trial: u64) -> Result<Trace> {
    let mut fwd = NoiseStream::for_trial(seed, trial, Direction::Forward);
    let mut fb = NoiseStream::for_trial(seed, trial, Direction::Feedback);
    run_episode(params, table, &mut fwd, &mut fb)
}

/// Running mean and centered second moment, mergeable across chunks.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        self.mean += d * other.n as f64 / n as f64;
        self.m2 += other.m2 + d * d * self.n as f64 * other.n as f64 / n as f64;
        self.n = n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            return f64::NAN;
        }
        self.m2 / (self.n - 1) as f64
    }

    /// Standard error of the mean.
    pub fn std_err(&self) -> f64 {
        (self.variance() / self.n as f64).sqrt()
    }
}

/// Per-slot statistics of a simulation run.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationSummary {
    /// Squared estimation error `(w − ŵ_t)²` after each slot `t = 0..=T`.
    pub sq_err: Vec<Moments>,
    /// `(u_t − û_t)²`.
    pub sq_err_u: Vec<Moments>,
    /// `(w − ŵ_t)(u_t − û_t)`.
    pub cross_err: Vec<Moments>,
    /// Symbol energy `x_t²` for each slot.
    pub power: Vec<Moments>,
}

impl SimulationSummary {
    fn new(slots: usize) -> Self {
        let empty = vec![Moments::default(); slots];
        Self { sq_err: empty.clone(), sq_err_u: empty.clone(), cross_err: empty.clone(), power: empty }
    }

    fn merge(&mut self, other: &SimulationSummary) {
        let pairs = [
            (&mut self.sq_err, &other.sq_err),
            (&mut self.sq_err_u, &other.sq_err_u),
            (&mut self.cross_err, &other.cross_err),
            (&mut self.power, &other.power),
        ];
        for (mine, theirs) in pairs {
            for (a, b) in mine.iter_mut().zip(theirs) {
                a.merge(b);
            }
        }
    }
}

/// Runs trials `0..trials` and collects per-slot statistics.
pub fn simulate(params: &SystemParams, table: &PolicyTable, trials: u64, seed: u64) -> Result<SimulationSummary> {
    if table.len() != params.horizon() {
        return Err(Error::HorizonMismatch { expected: params.horizon(), got: table.len() });
    }
    let slots = table.len() + 1;
    let chunks = trials.div_ceil(CHUNK);
    let parts = (0..chunks)
        .into_par_iter()
        .map(|k| -> Result<SimulationSummary> {
            let mut acc = SimulationSummary::new(slots);
            for trial in k * CHUNK..((k + 1) * CHUNK).min(trials) {
                let trace = run_trial(params, table, seed, trial)?;
                for (i, s) in trace.slots.iter().enumerate() {
                    let e = trace.w - s.w_hat;
                    let eu = s.u - s.u_hat;
                    acc.sq_err[i].push(e * e);
                    acc.sq_err_u[i].push(eu * eu);
                    acc.cross_err[i].push(e * eu);
                    acc.power[i].push(s.x * s.x);
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = SimulationSummary::new(slots);
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}

/// Empirical `E[(w − ŵ_T)²]` with its standard error, next to the
/// filter-predicted value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MseEstimate {
    pub mean_sq_err: f64,
    pub std_err: f64,
    pub trials: u64,
    pub analytic: f64,
}

impl MseEstimate {
    /// `|empirical − analytic| ≤ k · std_err`.
    pub fn within(&self, k: f64) -> bool {
        (self.mean_sq_err - self.analytic).abs() <= k * self.std_err
    }
}

pub fn estimate_mse(params: &SystemParams, table: &PolicyTable, trials: u64, seed: u64) -> Result<MseEstimate> {
    if trials < MIN_MSE_TRIALS {
        return Err(Error::TooFewTrials { min: MIN_MSE_TRIALS, got: trials });
    }
    let analytic = trajectory(params, table)?.last().expect("slot 0 always present").rx.var_w();
    let summary = simulate(params, table, trials, seed)?;
    let last = summary.sq_err.last().expect("slot 0 always present");
    Ok(MseEstimate { mean_sq_err: last.mean(), std_err: last.std_err(), trials, analytic })
}

/// Empirical mean of one error moment next to its predicted value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EntryCheck {
    pub empirical: f64,
    pub std_err: f64,
    pub analytic: f64,
}

impl EntryCheck {
    fn new(m: &Moments, analytic: f64) -> Self {
        Self { empirical: m.mean(), std_err: m.std_err(), analytic }
    }

    pub fn within(&self, k: f64) -> bool {
        (self.empirical - self.analytic).abs() <= k * self.std_err
    }
}

/// One slot of the covariance validation: the three receiver error moments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SlotCheck {
    pub t: usize,
    pub var_w: EntryCheck,
    pub var_u: EntryCheck,
    pub cov_uw: EntryCheck,
}

impl SlotCheck {
    pub fn within(&self, k: f64) -> bool {
        self.var_w.within(k) && self.var_u.within(k) && self.cov_uw.within(k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CovarianceCheck {
    pub trials: u64,
    pub slots: Vec<SlotCheck>,
}

impl CovarianceCheck {
    /// Every entry at every slot lies within `k` standard errors of the
    /// filter's prediction.
    pub fn within(&self, k: f64) -> bool {
        self.slots.iter().all(|s| s.within(k))
    }
}

/// Compares sample second moments of `(w − ŵ_t, u_t − û_t)` with the
/// filter's error covariance at every slot.
pub fn validate_covariance(
    params: &SystemParams,
    table: &PolicyTable,
    trials: u64,
    seed: u64,
) -> Result<CovarianceCheck> {
    if trials < MIN_COVARIANCE_TRIALS {
        return Err(Error::TooFewTrials { min: MIN_COVARIANCE_TRIALS, got: trials });
    }
    let states = trajectory(params, table)?;
    let sum = simulate(params, table, trials, seed)?;
    let slots = states
        .iter()
        .enumerate()
        .map(|(t, st)| SlotCheck {
            t,
            var_w: EntryCheck::new(&sum.sq_err[t], st.rx.var_w()),
            var_u: EntryCheck::new(&sum.sq_err_u[t], st.rx.var_u()),
            cov_uw: EntryCheck::new(&sum.cross_err[t], st.rx.cov_uw()),
        })
        .collect();
    Ok(CovarianceCheck { trials, slots })
}

/// Empirical `E[x_t²]` per slot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PowerEstimate {
    pub t: usize,
    pub mean: f64,
    pub std_err: f64,
}

pub fn slot_power(params: &SystemParams, table: &PolicyTable, trials: u64, seed: u64) -> Result<Vec<PowerEstimate>> {
    if trials < MIN_MSE_TRIALS {
        return Err(Error::TooFewTrials { min: MIN_MSE_TRIALS, got: trials });
    }
    let summary = simulate(params, table, trials, seed)?;
    Ok(summary
        .power
        .iter()
        .enumerate()
        .map(|(t, m)| PowerEstimate { t, mean: m.mean(), std_err: m.std_err() })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ZeroNoise;
    use crate::dp::analytic_mse;
    use crate::model::Gains;
    use crate::policy::{sk_table, Provenance};

    fn params(s: f64, beta: f64, horizon: usize) -> SystemParams {
        SystemParams::new(1.0, s, 1.0, beta, horizon).unwrap()
    }

    #[test]
    fn zero_noise_double_single_step() {
        // Noise-free realizations through a filter tuned for noise: slot 0
        // shrinks by P/(P+σ_f²), slot 1 removes all but 1/(1+S)² of w.
        let p = params(10.0, 0.0, 1);
        let t = run_episode_with_message(0.8, &p, &sk_table(&p).unwrap(), &mut ZeroNoise, &mut ZeroNoise).unwrap();
        assert_eq!(t.slots.len(), 2);
        assert_eq!(t.slots[0].x, 10f64.sqrt() * 0.8);
        assert!((t.slots[0].w_hat - 0.8 * 10.0 / 11.0).abs() < 1e-15);
        assert!((t.slots[1].u - 0.8 / 11.0).abs() < 1e-15);
        assert!((t.w_hat() - 0.8 * 120.0 / 121.0).abs() < 1e-15);
        assert!((t.error() - 0.8 / 121.0).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_estimate_approaches_message_at_high_snr() {
        let p = SystemParams::new(1.0, 1e6, 1.0, 0.0, 1).unwrap();
        let t = run_episode_with_message(0.8, &p, &sk_table(&p).unwrap(), &mut ZeroNoise, &mut ZeroNoise).unwrap();
        assert!(t.error().abs() < 1e-11, "{}", t.error());
    }

    #[test]
    fn zero_message_zero_noise_gives_zero_estimate() {
        let p = params(10.0, 1.0, 3);
        let t = run_episode_with_message(0.0, &p, &sk_table(&p).unwrap(), &mut ZeroNoise, &mut ZeroNoise).unwrap();
        assert!(t.slots.iter().all(|s| s.x == 0.0 && s.w_hat == 0.0));
    }

    #[test]
    fn trials_are_reproducible() {
        let p = params(10.0, 0.5, 4);
        let table = sk_table(&p).unwrap();
        assert_eq!(run_trial(&p, &table, 7, 3).unwrap(), run_trial(&p, &table, 7, 3).unwrap());
        assert_ne!(run_trial(&p, &table, 7, 3).unwrap(), run_trial(&p, &table, 7, 4).unwrap());
        let a = estimate_mse(&p, &table, 3000, 11).unwrap();
        let b = estimate_mse(&p, &table, 3000, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn result_does_not_depend_on_thread_count() {
        let p = params(10.0, 0.5, 3);
        let table = sk_table(&p).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| simulate(&p, &table, 5000, 1).unwrap());
        let b = four.install(|| simulate(&p, &table, 5000, 1).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn filter_variance_is_data_independent() {
        let p = params(10.0, 0.5, 3);
        let table = sk_table(&p).unwrap();
        let a = run_trial(&p, &table, 1, 0).unwrap();
        let b = run_trial(&p, &table, 2, 5).unwrap();
        for (x, y) in a.slots.iter().zip(&b.slots) {
            assert_eq!(x.var_w, y.var_w);
        }
        assert_eq!(a.slots.last().unwrap().var_w, analytic_mse(&p, &table).unwrap());
    }

    #[test]
    fn sk_law_two_steps() {
        let p = params(10.0, 0.0, 2);
        let est = estimate_mse(&p, &sk_table(&p).unwrap(), 100_000, 6).unwrap();
        assert!((est.analytic - 1.0 / 1331.0).abs() < 1e-17);
        assert!((est.mean_sq_err - 1.0 / 1331.0).abs() <= 4.0 * est.std_err, "{est:?}");
    }

    #[test]
    fn slot_zero_error_variance() {
        let p = SystemParams::new(2.0, 10.0, 3.0, 0.5, 1).unwrap();
        let chk = validate_covariance(&p, &sk_table(&p).unwrap(), 20_000, 8).unwrap();
        let s0 = chk.slots[0].var_w;
        assert!((s0.analytic - 2.0 * 3.0 / 13.0).abs() < 1e-15);
        assert!(s0.within(4.0), "{s0:?}");
    }

    #[test]
    fn sk_law_noiseless_feedback() {
        let p = params(10.0, 0.0, 3);
        let est = estimate_mse(&p, &sk_table(&p).unwrap(), 200_000, 5).unwrap();
        assert!((est.analytic - 11f64.powi(-4)).abs() < 1e-16);
        assert!(est.within(4.0), "{est:?}");
    }

    #[test]
    fn covariance_matches_empirical_errors() {
        let p = params(10.0, 1.0, 4);
        let chk = validate_covariance(&p, &sk_table(&p).unwrap(), 20_000, 9).unwrap();
        assert_eq!(chk.slots.len(), 5);
        assert!(chk.within(4.0), "{chk:?}");
        let p = params(10.0, 0.0, 4);
        let chk = validate_covariance(&p, &sk_table(&p).unwrap(), 20_000, 10).unwrap();
        assert!(chk.within(4.0), "{chk:?}");
    }

    #[test]
    fn standard_error_shrinks_like_root_n() {
        let p = params(1.0, 0.1, 2);
        let table = sk_table(&p).unwrap();
        let a = estimate_mse(&p, &table, 100, 3).unwrap();
        let b = estimate_mse(&p, &table, 10_000, 3).unwrap();
        let ratio = a.std_err / b.std_err;
        assert!((7.0..13.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn ignoring_feedback_only_averages_repeats() {
        // c = 0 everywhere resends the message T times; the receiver then
        // sees T+1 looks at w at SNR S each.
        let p = params(10.0, 0.7, 3);
        let table = PolicyTable::from_gains(&[Gains::feedback_only(0.0); 3], Provenance::Custom, &p).unwrap();
        let v = analytic_mse(&p, &table).unwrap();
        assert!((v - 1.0 / (1.0 + 4.0 * 10.0)).abs() < 1e-15);
        let est = estimate_mse(&p, &table, 50_000, 2).unwrap();
        assert!(est.within(4.0), "{est:?}");
        let chk = validate_covariance(&p, &table, 20_000, 3).unwrap();
        assert!(chk.within(4.0), "{chk:?}");
        assert!(chk.slots.windows(2).all(|w| w[1].var_w.analytic < w[0].var_w.analytic));
    }

    #[test]
    fn slot_power_is_p() {
        let p = params(10.0, 1.0, 3);
        for est in slot_power(&p, &sk_table(&p).unwrap(), 100_000, 4).unwrap() {
            assert!((est.mean - 10.0).abs() <= 4.0 * est.std_err, "{est:?}");
        }
    }

    #[test]
    fn too_few_trials_rejected() {
        let p = params(10.0, 1.0, 1);
        let table = sk_table(&p).unwrap();
        assert_eq!(estimate_mse(&p, &table, 99, 0), Err(Error::TooFewTrials { min: 100, got: 99 }));
        assert!(validate_covariance(&p, &table, 9_999, 0).is_err());
    }

    #[test]
    fn moments_merge_equals_single_pass() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.1).collect();
        let mut all = Moments::default();
        xs.iter().for_each(|&x| all.push(x));
        let mut a = Moments::default();
        let mut b = Moments::default();
        xs[..313].iter().for_each(|&x| a.push(x));
        xs[313..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        assert_eq!(a.count(), 1000);
        assert!((a.mean() - all.mean()).abs() < 1e-12);
        assert!((a.variance() - all.variance()).abs() < 1e-10);
    }
}
