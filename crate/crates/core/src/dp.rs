//! Numeric dynamic-programming oracle.
//!
//! The MDP state is `(Σ^s_t, Σ^r_t)`: transmitter moments plus the
//! receiver's (w, u) error covariance. Its transition does not depend on
//! data, so with `a = 0, b = 1` the whole trajectory from the slot-0 state
//! is a deterministic function of the gain sequence. The solvers here
//! exploit that and optimize along reachable trajectories instead of
//! discretizing the continuous state space.
//!
//! Gains are searched per unit transmitter standard deviation: the search
//! variable `ĉ` maps to `c = ĉ · σ_{u,t}`. A [`SearchSpec`] bracket therefore
//! keeps the same meaning at every step even though `σ_{u,t}` shrinks
//! geometrically along good schedules.
//!
//! Every scalar minimization is a grid scan, then golden-section refinement
//! of the best cell, then a root polish of `dV/dĉ`. The derivative comes
//! from running the same transition code on [`Dual`] numbers. Value
//! comparisons alone stall around `sqrt(eps)` relative accuracy in the gain.

use rayon::prelude::*;

use crate::encoder::{complete_coeffs, power_scale, propagate_tx_moments};
use crate::error::{Error, Result};
use crate::kalman::{covariance_step, extract_rx, initial_update};
use crate::model::{Gains, MdpState, StepCoeffs, SystemParams, TxMoments, VARIANCE_FLOOR};
use crate::policy::{PolicyTable, Provenance};
use crate::scalar::{Dual, Scalar};

/// Bracket and resolution for the feedback-gain search (in units of
/// `c / σ_{u,t}`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchSpec {
    c_lo: f64,
    c_hi: f64,
    grid_points: usize,
    refine_tol: f64,
}

impl SearchSpec {
    pub fn new(c_lo: f64, c_hi: f64, grid_points: usize, refine_tol: f64) -> Result<Self> {
        if !(c_lo.is_finite() && c_hi.is_finite() && c_lo < c_hi) {
            return Err(Error::InvalidSearchSpec(format!("need finite c_lo < c_hi, got [{c_lo}, {c_hi}]")));
        }
        if grid_points < 3 {
            return Err(Error::InvalidSearchSpec(format!("grid_points must be at least 3, got {grid_points}")));
        }
        if !(refine_tol > 0.0 && refine_tol.is_finite()) {
            return Err(Error::InvalidSearchSpec(format!("refine_tol must be positive, got {refine_tol}")));
        }
        Ok(Self { c_lo, c_hi, grid_points, refine_tol })
    }

    /// `±10 √P / σ_f`, 2001 points, tolerance 1e-10.
    pub fn default_for(params: &SystemParams) -> Self {
        let half = 10.0 * params.power().sqrt() / params.sigma_f2().sqrt();
        Self { c_lo: -half, c_hi: half, grid_points: 2001, refine_tol: 1e-10 }
    }

    pub fn with_grid_points(self, grid_points: usize) -> Result<Self> {
        Self::new(self.c_lo, self.c_hi, grid_points, self.refine_tol)
    }

    pub fn with_refine_tol(self, refine_tol: f64) -> Result<Self> {
        Self::new(self.c_lo, self.c_hi, self.grid_points, refine_tol)
    }

    pub fn c_lo(&self) -> f64 {
        self.c_lo
    }

    pub fn c_hi(&self) -> f64 {
        self.c_hi
    }

    pub fn grid_points(&self) -> usize {
        self.grid_points
    }

    pub fn refine_tol(&self) -> f64 {
        self.refine_tol
    }

    /// Grid node `i`; symmetric brackets with an odd point count hit 0 exactly.
    pub fn node(&self, i: usize) -> f64 {
        let frac = i as f64 / (self.grid_points - 1) as f64;
        self.c_lo + (self.c_hi - self.c_lo) * frac
    }

    fn spacing(&self) -> f64 {
        (self.c_hi - self.c_lo) / (self.grid_points - 1) as f64
    }
}

/// Slot-0 state after conditioning on the uncoded output, and `γ_0`.
pub fn initial_state(params: &SystemParams) -> (MdpState, f64) {
    let rx = extract_rx(&initial_update(params, 0.0));
    (MdpState { tx: TxMoments::initial(params), rx }, params.gamma0())
}

/// State transition: transmitter moment step plus one Kalman
/// predict/update on the embedded receiver covariance.
pub fn transition<S: Scalar>(
    state: &MdpState<S>,
    coeffs: &StepCoeffs<S>,
    gamma_t: S,
    params: &SystemParams,
) -> Result<MdpState<S>> {
    let su2 = state.tx.sigma_u2().re();
    if !(su2 > VARIANCE_FLOOR) {
        return Err(Error::DegenerateState { sigma_u2: su2 });
    }
    let tx = propagate_tx_moments(&state.tx, &coeffs.gains(), gamma_t, params);
    let rx = covariance_step(&state.rx, coeffs, params)?;
    Ok(MdpState { tx, rx })
}

/// Transition under `gains`, deriving both power scales from the state.
pub fn step_with_gains<S: Scalar>(
    state: &MdpState<S>,
    gains: Gains<S>,
    params: &SystemParams,
) -> Result<(MdpState<S>, StepCoeffs<S>)> {
    let gamma_t = power_scale(state.tx.sigma_u2(), params)?;
    let (coeffs, _) = complete_coeffs(&state.tx, gains, gamma_t, params)?;
    Ok((transition(state, &coeffs, gamma_t, params)?, coeffs))
}

/// Value-to-go used as the objective of a one-step optimization.
///
/// `value_dual` returns `None` when no derivative is available; the
/// optimizer then skips its derivative polish.
pub trait ValueToGo: Sync {
    fn value(&self, state: &MdpState, params: &SystemParams) -> Result<f64>;

    fn value_dual(&self, _state: &MdpState<Dual>, _params: &SystemParams) -> Option<Result<Dual>> {
        None
    }
}

impl<F> ValueToGo for F
where
    F: Fn(&MdpState) -> f64 + Sync,
{
    fn value(&self, state: &MdpState, _params: &SystemParams) -> Result<f64> {
        Ok(self(state))
    }
}

/// Terminal cost: the receiver's message error variance.
#[derive(Clone, Copy, Debug, Default)]
pub struct TerminalVariance;

impl ValueToGo for TerminalVariance {
    fn value(&self, state: &MdpState, _params: &SystemParams) -> Result<f64> {
        Ok(state.rx.var_w())
    }

    fn value_dual(&self, state: &MdpState<Dual>, _params: &SystemParams) -> Option<Result<Dual>> {
        Some(Ok(state.rx.var_w()))
    }
}

/// Value of following a fixed feedback-only tail policy `c = ĉ_k σ_{u}` to
/// the end of the horizon.
#[derive(Clone, Debug)]
pub struct TailPolicy<'a> {
    pub normalized: &'a [f64],
}

impl TailPolicy<'_> {
    fn rollout<S: Scalar>(&self, state: &MdpState<S>, params: &SystemParams) -> Result<S> {
        let mut s = *state;
        for &g in self.normalized {
            let c = S::from_f64(g) * s.tx.sigma_u2().sqrt();
            s = step_with_gains(&s, Gains::feedback_only(c), params)?.0;
        }
        Ok(s.rx.var_w())
    }
}

impl ValueToGo for TailPolicy<'_> {
    fn value(&self, state: &MdpState, params: &SystemParams) -> Result<f64> {
        self.rollout(state, params)
    }

    fn value_dual(&self, state: &MdpState<Dual>, params: &SystemParams) -> Option<Result<Dual>> {
        Some(self.rollout(state, params))
    }
}

/// Exact Bellman value-to-go with `remaining` optimized steps left. Each
/// evaluation nests a full one-step optimization, so the cost is
/// exponential in `remaining`.
#[derive(Clone, Copy, Debug)]
pub struct NestedOptimal {
    pub remaining: usize,
    pub spec: SearchSpec,
}

impl NestedOptimal {
    fn inner(&self) -> NestedOptimal {
        NestedOptimal { remaining: self.remaining - 1, spec: self.spec }
    }
}

impl ValueToGo for NestedOptimal {
    fn value(&self, state: &MdpState, params: &SystemParams) -> Result<f64> {
        if self.remaining == 0 {
            return Ok(state.rx.var_w());
        }
        let gamma = power_scale(state.tx.sigma_u2(), params)?;
        Ok(one_step_optimize(state, &self.inner(), gamma, params, &self.spec)?.1)
    }

    // Envelope theorem: at the inner optimum the value is stationary in the
    // inner gain, so holding it fixed gives the exact outer derivative.
    fn value_dual(&self, state: &MdpState<Dual>, params: &SystemParams) -> Option<Result<Dual>> {
        if self.remaining == 0 {
            return Some(Ok(state.rx.var_w()));
        }
        let run = || -> Result<Dual> {
            let real = state.to_real();
            let gamma = power_scale(real.tx.sigma_u2(), params)?;
            let (c_star, _) = one_step_optimize(&real, &self.inner(), gamma, params, &self.spec)?;
            let (next, _) = step_with_gains(state, Gains::feedback_only(Dual::constant(c_star)), params)?;
            match self.inner().value_dual(&next, params) {
                Some(v) => v,
                None => unreachable!("nested values always provide derivatives"),
            }
        };
        Some(run())
    }
}

/// Objective of a scalar gain search at a fixed state.
struct GainObjective<'a, V> {
    state: &'a MdpState,
    gains: (f64, f64),
    sigma_u: f64,
    gamma_t: f64,
    value: &'a V,
    params: &'a SystemParams,
}

impl<V: ValueToGo> GainObjective<'_, V> {
    fn eval(&self, x: f64) -> Result<f64> {
        let g = Gains::new(self.gains.0, self.gains.1, x * self.sigma_u);
        let (coeffs, _) = complete_coeffs(&self.state.tx, g, self.gamma_t, self.params)?;
        let next = transition(self.state, &coeffs, self.gamma_t, self.params)?;
        self.value.value(&next, self.params)
    }

    /// Degenerate successors count as +∞ so the scan can step over them.
    fn eval_scan(&self, x: f64) -> Result<f64> {
        match self.eval(x) {
            Err(Error::DegenerateState { .. }) => Ok(f64::INFINITY),
            other => other.map(|v| if v.is_nan() { f64::INFINITY } else { v }),
        }
    }

    fn derivative(&self, x: f64) -> Option<Result<f64>> {
        let state = self.state.lift::<Dual>();
        let g = Gains::new(
            Dual::constant(self.gains.0),
            Dual::constant(self.gains.1),
            Dual::variable(x) * Dual::constant(self.sigma_u),
        );
        let gamma = Dual::constant(self.gamma_t);
        let next = complete_coeffs(&state.tx, g, gamma, self.params)
            .and_then(|(coeffs, _)| transition(&state, &coeffs, gamma, self.params));
        match next {
            Err(e) => Some(Err(e)),
            Ok(next) => self.value.value_dual(&next, self.params).map(|r| r.map(|d| d.eps)),
        }
    }
}

/// Golden-section minimization of `f` on `[lo, hi]` until the bracket is
/// narrower than `tol`. Returns the best point seen.
fn golden_section<F>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> Result<(f64, f64)>
where
    F: Fn(f64) -> Result<f64>,
{
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    let mut iters = 0;
    while hi - lo > tol && iters < 400 {
        iters += 1;
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2)?;
        }
    }
    Ok(if f1 <= f2 { (x1, f1) } else { (x2, f2) })
}

/// Root of `g` on `[lo, hi]` given `g(lo) < 0 < g(hi)`, by Illinois
/// false position with a bisection fallback.
fn derivative_root<G>(g: G, mut lo: f64, mut hi: f64, mut g_lo: f64, mut g_hi: f64) -> Result<f64>
where
    G: Fn(f64) -> Result<f64>,
{
    let mut side = 0i8;
    for _ in 0..200 {
        let width = hi - lo;
        if width <= 4.0 * f64::EPSILON * lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE) {
            break;
        }
        let mut x = (lo * g_hi - hi * g_lo) / (g_hi - g_lo);
        if !(x > lo && x < hi) {
            x = 0.5 * (lo + hi);
        }
        let gx = g(x)?;
        if gx == 0.0 {
            return Ok(x);
        }
        if gx < 0.0 {
            lo = x;
            g_lo = gx;
            if side == -1 {
                g_hi *= 0.5;
            }
            side = -1;
        } else {
            hi = x;
            g_hi = gx;
            if side == 1 {
                g_lo *= 0.5;
            }
            side = 1;
        }
    }
    Ok(if g_lo.abs() < g_hi.abs() { lo } else { hi })
}

/// Refines a minimum known to lie in `[lo, hi]` around the grid point
/// `(x0, f0)`. Golden-section first, then the derivative polish when the
/// objective provides derivatives.
fn refine<F, G>(f: &F, df: &G, lo: f64, hi: f64, x0: f64, f0: f64, tol: f64) -> Result<(f64, f64)>
where
    F: Fn(f64) -> Result<f64>,
    G: Fn(f64) -> Option<Result<f64>>,
{
    let (mut best_x, mut best_f) = (x0, f0);
    let (xg, fg) = golden_section(f, lo, hi, tol)?;
    if fg < best_f {
        best_x = xg;
        best_f = fg;
    }
    if let (Some(g_lo), Some(g_hi)) = (df(lo), df(hi)) {
        let (g_lo, g_hi) = (g_lo?, g_hi?);
        if g_lo < 0.0 && g_hi > 0.0 {
            let root = derivative_root(|x| df(x).expect("derivative available"), lo, hi, g_lo, g_hi)?;
            let fr = f(root)?;
            if fr <= best_f + 1e-12 * best_f.abs() {
                best_x = root;
                best_f = fr;
            }
        }
    }
    Ok((best_x, best_f))
}

/// Index of the smallest value; ties go to the node closest to zero, then
/// to the lower index.
fn argmin_grid(values: &[f64], spec: &SearchSpec) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        let b = values[best];
        if v < b || (v == b && spec.node(i).abs() < spec.node(best).abs()) {
            best = i;
        }
    }
    best
}

/// Minimizes `value(τ(state, (a, b, c)))` over the feedback gain with
/// `(a, b)` held fixed. Returns the absolute gain and the attained value.
pub fn optimize_gain<V: ValueToGo>(
    state: &MdpState,
    gains_ab: (f64, f64),
    value: &V,
    gamma_t: f64,
    params: &SystemParams,
    spec: &SearchSpec,
) -> Result<(f64, f64)> {
    let su2 = state.tx.sigma_u2();
    if !(su2 > VARIANCE_FLOOR) {
        return Err(Error::DegenerateState { sigma_u2: su2 });
    }
    let sigma_u = su2.sqrt();
    let obj = GainObjective { state, gains: gains_ab, sigma_u, gamma_t, value, params };

    let n = spec.grid_points;
    let values =
        (0..n).into_par_iter().with_min_len(32).map(|i| obj.eval_scan(spec.node(i))).collect::<Result<Vec<f64>>>()?;
    let i = argmin_grid(&values, spec);
    if !values[i].is_finite() {
        return Err(Error::DegenerateState { sigma_u2: su2 });
    }
    if i == 0 || i == n - 1 {
        return Err(Error::BracketTooNarrow {
            c: spec.node(i) * sigma_u,
            lo: spec.c_lo * sigma_u,
            hi: spec.c_hi * sigma_u,
        });
    }
    let f = |x: f64| obj.eval_scan(x);
    let df = |x: f64| obj.derivative(x);
    let (x, v) = refine(&f, &df, spec.node(i - 1), spec.node(i + 1), spec.node(i), values[i], spec.refine_tol)?;
    Ok((x * sigma_u, v))
}

/// Best feedback-only gain (`a = 0, b = 1`) for one step.
pub fn one_step_optimize<V: ValueToGo>(
    state: &MdpState,
    terminal_value: &V,
    gamma_t: f64,
    params: &SystemParams,
    spec: &SearchSpec,
) -> Result<(f64, f64)> {
    optimize_gain(state, (0.0, 1.0), terminal_value, gamma_t, params, spec)
}

/// States before each coded step (`s_0 .. s_{T−1}`) plus the final state,
/// under a feedback-only normalized schedule.
fn normalized_trajectory(params: &SystemParams, normalized: &[f64]) -> Result<Vec<MdpState>> {
    let (mut s, _) = initial_state(params);
    let mut out = Vec::with_capacity(normalized.len() + 1);
    out.push(s);
    for &g in normalized {
        s = step_with_gains(&s, Gains::feedback_only(g * s.tx.sigma_u2().sqrt()), params)?.0;
        out.push(s);
    }
    Ok(out)
}

/// Analytic MDP trajectory `s_0 ..= s_T` under a policy table.
pub fn trajectory(params: &SystemParams, table: &PolicyTable) -> Result<Vec<MdpState>> {
    if table.len() != params.horizon() {
        return Err(Error::HorizonMismatch { expected: params.horizon(), got: table.len() });
    }
    let (mut s, mut gamma) = initial_state(params);
    let mut out = Vec::with_capacity(table.len() + 1);
    out.push(s);
    for coeffs in table.schedule() {
        s = transition(&s, coeffs, gamma, params)?;
        gamma = coeffs.gamma_next();
        out.push(s);
    }
    Ok(out)
}

/// Final `(σ^r_{w,T})²` predicted by the covariance recursion for `table`.
pub fn analytic_mse(params: &SystemParams, table: &PolicyTable) -> Result<f64> {
    Ok(trajectory(params, table)?.last().expect("trajectory holds s_0").rx.var_w())
}

const MAX_SWEEPS: usize = 50;

/// Backward induction along the deterministic trajectory.
///
/// The schedule is a feedback law `c_t = ĉ_t σ_{u,t}`. Each sweep walks
/// `t = T, …, 1` and replaces `ĉ_t` by the one-step optimum at the state the
/// current schedule reaches, using the rollout of the (already improved)
/// tail as value-to-go. Sweeps repeat until no gain moves by more than
/// `refine_tol`. Returns the schedule and the predicted `(σ^r_{w,T})²`.
pub fn backward_induction(params: &SystemParams, spec: &SearchSpec) -> Result<(PolicyTable, f64)> {
    let horizon = params.horizon();
    if horizon == 0 {
        return Err(Error::HorizonOutOfRange { got: 0, min: 1, max: usize::MAX });
    }
    let mut normalized = vec![0.0; horizon];
    for _ in 0..MAX_SWEEPS {
        let states = normalized_trajectory(params, &normalized)?;
        let mut max_delta: f64 = 0.0;
        for t in (0..horizon).rev() {
            let tail = normalized[t + 1..].to_vec();
            let state = &states[t];
            let gamma = power_scale(state.tx.sigma_u2(), params)?;
            let (c, _) = one_step_optimize(state, &TailPolicy { normalized: &tail }, gamma, params, spec)?;
            let g = c / state.tx.sigma_u2().sqrt();
            max_delta = max_delta.max((g - normalized[t]).abs());
            normalized[t] = g;
        }
        if max_delta <= spec.refine_tol {
            break;
        }
    }
    let table = PolicyTable::from_normalized(&normalized, Provenance::NumericDp, params)?;
    let v = analytic_mse(params, &table)?;
    Ok((table, v))
}

/// Exact nested Bellman recursion; `T ≤ 3`. At each step the value-to-go is
/// itself the optimum over all later gains from the successor state.
pub fn nested_backward_induction(params: &SystemParams, spec: &SearchSpec) -> Result<(PolicyTable, f64)> {
    let horizon = params.horizon();
    if !(1..=3).contains(&horizon) {
        return Err(Error::HorizonOutOfRange { got: horizon, min: 1, max: 3 });
    }
    let (mut s, mut gamma) = initial_state(params);
    let mut gains = Vec::with_capacity(horizon);
    let mut v0 = f64::NAN;
    for t in 0..horizon {
        let value = NestedOptimal { remaining: horizon - t - 1, spec: *spec };
        let (c, v) = one_step_optimize(&s, &value, gamma, params, spec)?;
        if t == 0 {
            v0 = v;
        }
        let (next, coeffs) = step_with_gains(&s, Gains::feedback_only(c), params)?;
        gains.push(coeffs.gains());
        gamma = coeffs.gamma_next();
        s = next;
    }
    Ok((PolicyTable::from_gains(&gains, Provenance::NumericDp, params)?, v0))
}

fn rollout_normalized<S: Scalar>(params: &SystemParams, normalized: &[S]) -> Result<S> {
    let (s0, _) = initial_state(params);
    let mut s = s0.lift::<S>();
    for &g in normalized {
        s = step_with_gains(&s, Gains::feedback_only(g * s.tx.sigma_u2().sqrt()), params)?.0;
    }
    Ok(s.rx.var_w())
}

fn rollout_scan(params: &SystemParams, normalized: &[f64]) -> Result<f64> {
    match rollout_normalized(params, normalized) {
        Err(Error::DegenerateState { .. }) => Ok(f64::INFINITY),
        other => other,
    }
}

/// Brute-force global search over all gain sequences for `T ≤ 3`.
///
/// Every combination of grid gains is rolled out from the slot-0 state;
/// the best cell is then refined by cyclic coordinate descent. Cost is
/// `grid_points^T` rollouts. Returns the absolute gains and final variance.
pub fn exhaustive_rollout(params: &SystemParams, spec: &SearchSpec) -> Result<(Vec<f64>, f64)> {
    let horizon = params.horizon();
    if !(1..=3).contains(&horizon) {
        return Err(Error::HorizonOutOfRange { got: horizon, min: 1, max: 3 });
    }
    let (s0, gamma0) = initial_state(params);
    if horizon == 1 {
        let (c, v) = one_step_optimize(&s0, &TerminalVariance, gamma0, params, spec)?;
        return Ok((vec![c], v));
    }

    let n = spec.grid_points;
    let cells = n.pow(horizon as u32 - 1);
    // Parallel over the first gain; each task scans the remaining ones.
    let per_first: Vec<(f64, f64, usize)> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<(f64, f64, usize)> {
            let mut best = (f64::INFINITY, f64::INFINITY, 0usize);
            let mut g = vec![0.0; horizon];
            g[0] = spec.node(i);
            for rest in 0..cells {
                let mut r = rest;
                for k in (1..horizon).rev() {
                    g[k] = spec.node(r % n);
                    r /= n;
                }
                let v = rollout_scan(params, &g)?;
                let norm: f64 = g.iter().map(|x| x.abs()).sum();
                if v < best.0 || (v == best.0 && norm < best.1) {
                    best = (v, norm, i * cells + rest);
                }
            }
            Ok(best)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = per_first[0];
    for &cand in &per_first[1..] {
        if cand.0 < best.0 || (cand.0 == best.0 && cand.1 < best.1) {
            best = cand;
        }
    }
    if !best.0.is_finite() {
        return Err(Error::DegenerateState { sigma_u2: 0.0 });
    }
    let mut idx = vec![0usize; horizon];
    let mut r = best.2;
    for k in (0..horizon).rev() {
        idx[k] = r % n;
        r /= n;
    }
    let mut g: Vec<f64> = idx.iter().map(|&i| spec.node(i)).collect();
    if let Some(k) = idx.iter().position(|&i| i == 0 || i == n - 1) {
        return Err(Error::BracketTooNarrow { c: g[k], lo: spec.c_lo, hi: spec.c_hi });
    }

    let mut v = best.0;
    let h = spec.spacing();
    for _ in 0..500 {
        let mut moved: f64 = 0.0;
        for k in 0..horizon {
            let f = |x: f64| {
                let mut gg = g.clone();
                gg[k] = x;
                rollout_scan(params, &gg)
            };
            let df = |x: f64| {
                let gg: Vec<Dual> = g
                    .iter()
                    .enumerate()
                    .map(|(j, &y)| if j == k { Dual::variable(x) } else { Dual::constant(y) })
                    .collect();
                Some(rollout_normalized(params, &gg).map(|d| d.eps))
            };
            let (x, fx) = refine(&f, &df, g[k] - h, g[k] + h, g[k], v, spec.refine_tol)?;
            if fx <= v {
                moved = moved.max((x - g[k]).abs());
                g[k] = x;
                v = fx;
            }
        }
        if moved <= 1e-14 * g.iter().fold(1.0f64, |m, x| m.max(x.abs())) {
            break;
        }
    }

    let states = normalized_trajectory(params, &g)?;
    let absolute = g.iter().zip(&states).map(|(x, s)| x * s.tx.sigma_u2().sqrt()).collect();
    Ok((absolute, v))
}

/// Result of the unrestricted single-step search over `(a, b, c)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnrestrictedCheck {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub value: f64,
    /// Optimum within the restricted family `a = 0, b = 1`.
    pub restricted_value: f64,
}

/// For `T = 1`, also searches `(a, b)` on an `ab_points × ab_points` grid
/// over `[-2, 2]²`, optimizing `c` for each pair.
pub fn unrestricted_one_step(params: &SystemParams, spec: &SearchSpec, ab_points: usize) -> Result<UnrestrictedCheck> {
    if params.horizon() != 1 {
        return Err(Error::HorizonOutOfRange { got: params.horizon(), min: 1, max: 1 });
    }
    let ab = SearchSpec::new(-2.0, 2.0, ab_points, spec.refine_tol)?;
    let (s0, gamma0) = initial_state(params);
    let (_, restricted_value) = one_step_optimize(&s0, &TerminalVariance, gamma0, params, spec)?;
    let mut best = UnrestrictedCheck { a: 0.0, b: 1.0, c: f64::NAN, value: f64::INFINITY, restricted_value };
    for i in 0..ab_points {
        for j in 0..ab_points {
            let (a, b) = (ab.node(i), ab.node(j));
            match optimize_gain(&s0, (a, b), &TerminalVariance, gamma0, params, spec) {
                Ok((c, v)) if v < best.value => best = UnrestrictedCheck { a, b, c, value: v, restricted_value },
                Ok(_) | Err(Error::DegenerateState { .. }) | Err(Error::BracketTooNarrow { .. }) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman::{build_system, embed_rx, measurement_update, predict_cov, rx_from_cov};
    use crate::model::RxErrorCov;
    use crate::policy::{sk_table, value};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(s: f64, beta: f64, horizon: usize) -> SystemParams {
        SystemParams::new(1.0, s, 1.0, beta, horizon).unwrap()
    }

    fn spec(p: &SystemParams) -> SearchSpec {
        SearchSpec::default_for(p)
    }

    #[test]
    fn search_spec_validation() {
        assert!(SearchSpec::new(1.0, -1.0, 11, 1e-9).is_err());
        assert!(SearchSpec::new(-1.0, 1.0, 2, 1e-9).is_err());
        assert!(SearchSpec::new(-1.0, 1.0, 11, 0.0).is_err());
        let s = SearchSpec::new(-1.0, 1.0, 11, 1e-9).unwrap();
        assert_eq!(s.node(5), 0.0);
        assert_eq!((s.node(0), s.node(10)), (-1.0, 1.0));
    }

    #[test]
    fn initial_state_examples() {
        let (s, g0) = initial_state(&params(10.0, 0.0, 1));
        for v in [s.rx.var_w(), s.rx.var_u(), s.rx.cov_uw()] {
            assert!((v - 1.0 / 11.0).abs() < 1e-15);
        }
        assert!((g0 - 10f64.sqrt()).abs() < 1e-15);
        let p = SystemParams::new(4.0, 10.0, 1.0, 0.0, 1).unwrap();
        assert_eq!((initial_state(&p).0.tx.sigma_u2(), initial_state(&p).0.tx.sigma_uw()), (4.0, 4.0));
        let p = SystemParams::new(1.0, 10.0, 2.0, 0.0, 1).unwrap();
        let (s, _) = initial_state(&p);
        assert!((s.rx.var_w() - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn transition_identity_gains() {
        let p = params(10.0, 0.5, 1);
        let (s0, g0) = initial_state(&p);
        let (c, _) = complete_coeffs(&s0.tx, Gains::new(0.0, 1.0, 0.0), g0, &p).unwrap();
        let s1 = transition(&s0, &c, g0, &p).unwrap();
        assert_eq!(s1.tx, s0.tx);
        assert!(s1.rx.var_w() <= s0.rx.var_w());
        assert!(s1.rx.var_w() < s0.rx.var_w());
    }

    #[test]
    fn sk_gain_contracts_by_one_plus_s() {
        let p = params(10.0, 0.0, 4);
        let table = sk_table(&p).unwrap();
        let traj = trajectory(&p, &table).unwrap();
        for w in traj.windows(2) {
            let ratio = w[0].rx.var_w() / w[1].rx.var_w();
            assert!((ratio - 11.0).abs() < 1e-9, "{ratio}");
        }
    }

    /// Dense 3×3 reimplementation of the transition.
    fn dense_transition(
        s: &MdpState,
        a: f64,
        b: f64,
        c: f64,
        gamma: f64,
        p: &SystemParams,
    ) -> (f64, f64, [[f64; 3]; 3]) {
        let k = b + gamma * c;
        let su2 = a * a * p.sigma_w2()
            + k * k * s.tx.sigma_u2()
            + 2.0 * a * k * s.tx.sigma_uw()
            + c * c * (p.sigma_f2() + p.sigma_b2());
        let suw = a * p.sigma_w2() + k * s.tx.sigma_uw();
        let gn = (p.power() / su2).sqrt();
        let am = [[1.0, 0.0, 0.0], [a, b, c], [gn * a, gn * b, gn * c]];
        let jm = [[0.0, 0.0], [0.0, c], [1.0, gn * c]];
        let sig = [[s.rx.var_w(), s.rx.cov_uw(), 0.0], [s.rx.cov_uw(), s.rx.var_u(), 0.0], [0.0, 0.0, 0.0]];
        let mut pr = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for x in 0..3 {
                    for y in 0..3 {
                        acc += am[i][x] * sig[x][y] * am[j][y];
                    }
                }
                acc += jm[i][0] * p.sigma_f2() * jm[j][0] + jm[i][1] * p.sigma_b2() * jm[j][1];
                pr[i][j] = acc;
            }
        }
        let mut post = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                post[i][j] = pr[i][j] - pr[i][2] * pr[2][j] / pr[2][2];
            }
        }
        (su2, suw, post)
    }

    #[test]
    fn transition_matches_dense_oracle_and_module_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..500 {
            let p = SystemParams::new(
                rng.random_range(0.2..3.0),
                rng.random_range(0.5..20.0),
                rng.random_range(0.2..3.0),
                rng.random_range(0.0..2.0),
                1,
            )
            .unwrap();
            let su2: f64 = rng.random_range(0.05..3.0);
            let rho: f64 = rng.random_range(-1.0..1.0);
            let tx = TxMoments::new(su2, rho * (su2 * p.sigma_w2()).sqrt(), &p).unwrap();
            let (vw, vu): (f64, f64) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let rx = RxErrorCov::new(vw, vu, rng.random_range(-1.0..1.0) * (vw * vu).sqrt()).unwrap();
            let s = MdpState { tx, rx };
            let (a, b, c) = (rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
            let gamma = power_scale(su2, &p).unwrap();
            let (coeffs, _) = match complete_coeffs(&tx, Gains::new(a, b, c), gamma, &p) {
                Ok(x) => x,
                Err(_) => continue,
            };
            let out = transition(&s, &coeffs, gamma, &p).unwrap();
            let (su2n, suwn, post) = dense_transition(&s, a, b, c, gamma, &p);
            let tol = |x: f64| 1e-10 * (1.0 + x.abs());
            assert!((out.tx.sigma_u2() - su2n).abs() < tol(su2n));
            assert!((out.tx.sigma_uw() - suwn).abs() < tol(suwn));
            assert!((out.rx.var_w() - post[0][0]).abs() < tol(post[0][0]));
            assert!((out.rx.var_u() - post[1][1]).abs() < tol(post[1][1]));
            assert!((out.rx.cov_uw() - post[0][1]).abs() < tol(post[0][1]));

            // Exactly the composition of the encoder and kalman modules.
            let tx2 = propagate_tx_moments(&s.tx, &coeffs.gains(), gamma, &p);
            let sys = build_system(&coeffs, &p);
            let (_, cov) = measurement_update(&predict_cov(&embed_rx(&s.rx), &sys), &sys).unwrap();
            assert_eq!(out.tx, tx2);
            assert_eq!(out.rx, rx_from_cov(&cov));
            out.check(&p).unwrap();
        }
    }

    #[test]
    fn one_step_reproduces_sk_gain() {
        let p = params(10.0, 0.0, 1);
        let (s0, g0) = initial_state(&p);
        let (c, v) = one_step_optimize(&s0, &TerminalVariance, g0, &p, &spec(&p)).unwrap();
        assert!((c + 10f64.sqrt() / 11.0).abs() < 1e-10, "{c}");
        assert!((v - 1.0 / 121.0).abs() < 1e-15);
        // The closed-form value at K_1 equals this minimum.
        let k1 = crate::policy::k_one(&p.ratios());
        assert!((value(&s0, k1).unwrap() - v).abs() < 1e-15);
    }

    #[test]
    fn uncorrelated_errors_give_zero_gain() {
        let p = params(10.0, 0.3, 1);
        let tx = TxMoments::new(0.5, 0.2, &p).unwrap();
        let s = MdpState { tx, rx: RxErrorCov::new(0.1, 0.2, 0.0).unwrap() };
        let g = power_scale(0.5, &p).unwrap();
        let (c, v) = one_step_optimize(&s, &TerminalVariance, g, &p, &spec(&p)).unwrap();
        assert_eq!(c, 0.0);
        assert_eq!(v, 0.1);
    }

    #[test]
    fn optimizing_never_worse_than_ignoring_feedback() {
        let p = params(10.0, 1.0, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            // Reachable state: random gains for two steps.
            let (mut s, _) = initial_state(&p);
            for _ in 0..2 {
                let c = rng.random_range(-0.5..0.5) * s.tx.sigma_u2().sqrt();
                s = step_with_gains(&s, Gains::feedback_only(c), &p).unwrap().0;
            }
            let g = power_scale(s.tx.sigma_u2(), &p).unwrap();
            let (_, v) = one_step_optimize(&s, &TerminalVariance, g, &p, &spec(&p)).unwrap();
            let v0 = step_with_gains(&s, Gains::feedback_only(0.0), &p).unwrap().0.rx.var_w();
            assert!(v <= v0);
        }
    }

    #[test]
    fn narrow_bracket_is_reported() {
        let p = params(10.0, 0.0, 1);
        let (s0, g0) = initial_state(&p);
        let narrow = SearchSpec::new(0.0, 1.0, 101, 1e-10).unwrap();
        assert!(matches!(
            one_step_optimize(&s0, &TerminalVariance, g0, &p, &narrow),
            Err(Error::BracketTooNarrow { .. })
        ));
    }

    #[test]
    fn closures_work_as_terminal_values() {
        let p = params(10.0, 0.0, 1);
        let (s0, g0) = initial_state(&p);
        let f = |s: &MdpState| s.rx.var_w();
        let (c, _) = one_step_optimize(&s0, &f, g0, &p, &spec(&p)).unwrap();
        // No derivative polish: golden-section accuracy only.
        assert!((c + 10f64.sqrt() / 11.0).abs() < 1e-6);
    }

    #[test]
    fn backward_induction_sk_law() {
        let p = params(10.0, 0.0, 3);
        let (table, v0) = backward_induction(&p, &spec(&p)).unwrap();
        assert!((v0 - 11f64.powi(-4)).abs() < 1e-12 * 11f64.powi(-4) * 1e3);
        let sk = sk_table(&p).unwrap();
        for (a, b) in table.schedule().iter().zip(sk.schedule()) {
            assert!((a.c() - b.c()).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_induction_single_step_is_one_step() {
        let p = params(10.0, 1.0, 1);
        let (table, v0) = backward_induction(&p, &spec(&p)).unwrap();
        let (s0, g0) = initial_state(&p);
        let (c, v) = one_step_optimize(&s0, &TerminalVariance, g0, &p, &spec(&p)).unwrap();
        assert!((table.schedule()[0].c() - c).abs() < 1e-12);
        assert!((v0 - v).abs() < 1e-15);
    }

    #[test]
    fn nested_and_trajectory_solvers_agree() {
        for (s, beta) in [(10.0, 1.0), (1.0, 0.1)] {
            let p = params(s, beta, 2);
            let sp = spec(&p).with_grid_points(401).unwrap();
            let (t1, v1) = backward_induction(&p, &sp).unwrap();
            let (t2, v2) = nested_backward_induction(&p, &sp).unwrap();
            assert!((v1 - v2).abs() < 1e-12, "{v1} vs {v2}");
            for (a, b) in t1.schedule().iter().zip(t2.schedule()) {
                assert!((a.c() - b.c()).abs() < 1e-8, "{} vs {}", a.c(), b.c());
            }
        }
    }

    #[test]
    fn exhaustive_single_step_equals_one_step() {
        let p = params(10.0, 1.0, 1);
        let (s0, g0) = initial_state(&p);
        let sp = spec(&p);
        let (g, v) = exhaustive_rollout(&p, &sp).unwrap();
        assert_eq!((g[0], v), one_step_optimize(&s0, &TerminalVariance, g0, &p, &sp).unwrap());
    }

    #[test]
    fn exhaustive_sk_law_two_steps() {
        let p = params(10.0, 0.0, 2);
        let sp = spec(&p).with_grid_points(401).unwrap();
        let (_, v) = exhaustive_rollout(&p, &sp).unwrap();
        assert!((v - 11f64.powi(-3)).abs() < 1e-14, "{v}");
    }

    #[test]
    fn exhaustive_beats_mismatched_sk() {
        let p = params(10.0, 1.0, 2);
        let sp = spec(&p).with_grid_points(401).unwrap();
        let (_, v) = exhaustive_rollout(&p, &sp).unwrap();
        let sk = analytic_mse(&p, &sk_table(&p).unwrap()).unwrap();
        assert!(v <= sk, "{v} vs {sk}");
        let (_, v_bi) = backward_induction(&p, &sp).unwrap();
        assert!((v - v_bi).abs() <= 10.0 * sp.refine_tol(), "{v} vs {v_bi}");
    }

    #[test]
    fn exhaustive_three_steps_small_grid() {
        let p = params(10.0, 0.1, 3);
        let sp = spec(&p).with_grid_points(61).unwrap();
        let (_, v_ex) = exhaustive_rollout(&p, &sp).unwrap();
        let (_, v_bi) = backward_induction(&p, &spec(&p)).unwrap();
        assert!((v_ex - v_bi).abs() < 1e-12, "{v_ex} vs {v_bi}");
        assert!(exhaustive_rollout(&params(10.0, 0.1, 4), &sp).is_err());
    }

    #[test]
    fn restricted_family_is_not_beaten_at_one_step() {
        let p = params(10.0, 0.5, 1);
        let sp = spec(&p).with_grid_points(401).unwrap();
        let chk = unrestricted_one_step(&p, &sp, 21).unwrap();
        assert!(chk.value >= chk.restricted_value * (1.0 - 1e-9), "{chk:?}");
    }

    proptest::proptest! {
        #[test]
        fn reachable_states_stay_valid(
            s in 0.5f64..30.0,
            beta in 0.0f64..3.0,
            gains in proptest::collection::vec(-3.0f64..3.0, 1..10),
        ) {
            let p = params(s, beta, gains.len());
            let (mut st, _) = initial_state(&p);
            for g in gains {
                let c = g * st.tx.sigma_u2().sqrt();
                match step_with_gains(&st, Gains::feedback_only(c), &p) {
                    Ok((next, _)) => {
                        next.check(&p).unwrap();
                        proptest::prop_assert!(next.rx.var_w() <= st.rx.var_w() * (1.0 + 1e-12));
                        st = next;
                    }
                    Err(Error::DegenerateState { .. }) => break,
                    Err(e) => panic!("{e}"),
                }
            }
        }
    }
}
