//! Closed-form vs numeric-oracle comparison report.

use anyhow::Context;
use rayon::prelude::*;
use serde::Serialize;

use seqfb_core::dp::{analytic_mse, initial_state};
use seqfb_core::policy::{closed_form_table, k_sequence, oracle_calibrated, sk_table, value, zeta};
use seqfb_core::SystemParams;

use crate::config::ExperimentConfig;

/// One coded slot of one `(S, β, T)` cell. `v0_*` columns repeat the
/// cell-level final variances predicted under each schedule.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationRow {
    #[serde(rename = "S")]
    pub s: f64,
    pub beta: f64,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub t: usize,
    pub c_closed_form: f64,
    pub c_oracle: f64,
    pub abs_diff: f64,
    pub c_sk: f64,
    pub v0_closed_form: f64,
    pub v0_oracle: f64,
    pub v0_sk: f64,
    /// Closed-form value function at the slot-0 state with `K_T`.
    pub v0_value_fn: f64,
    /// `σ_w²/ζ_T` from the total reduction factor.
    pub v0_zeta: f64,
    pub v0_diff: f64,
    pub sigma_w2: f64,
    pub power: f64,
    pub sigma_f2: f64,
    pub sigma_b2: f64,
}

fn validate_cell(cfg: &ExperimentConfig, params: &SystemParams) -> anyhow::Result<Vec<ValidationRow>> {
    let closed = closed_form_table(params)?;
    let sk = sk_table(params)?;
    let (oracle, cmp) = oracle_calibrated(params, &cfg.search_spec(params)?)?;
    let v0_closed_form = analytic_mse(params, &closed)?;
    let v0_oracle = analytic_mse(params, &oracle)?;
    let v0_sk = analytic_mse(params, &sk)?;
    let v0_zeta = zeta(params)?.1;
    let k_t = k_sequence(&params.ratios(), params.horizon()).get(params.horizon()).expect("T >= 1");
    let v0_value_fn = value(&initial_state(params).0, k_t)?;
    Ok(cmp
        .iter()
        .zip(sk.schedule())
        .map(|(g, s)| ValidationRow {
            s: g.s,
            beta: g.beta,
            horizon: g.horizon,
            t: g.t,
            c_closed_form: g.c_closed_form,
            c_oracle: g.c_oracle,
            abs_diff: g.abs_diff,
            c_sk: s.c(),
            v0_closed_form,
            v0_oracle,
            v0_sk,
            v0_value_fn,
            v0_zeta,
            v0_diff: v0_closed_form - v0_oracle,
            sigma_w2: params.sigma_w2(),
            power: params.power(),
            sigma_f2: params.sigma_f2(),
            sigma_b2: params.sigma_b2(),
        })
        .collect())
}

/// Comparison rows for every cell with `T ≥ 1`, sorted by `(β, T, t)`.
pub fn run_validation(cfg: &ExperimentConfig) -> anyhow::Result<Vec<ValidationRow>> {
    let cells: Vec<SystemParams> = cfg.cells()?.into_iter().filter(|p| p.horizon() >= 1).collect();
    let per_cell = cells
        .par_iter()
        .map(|p| validate_cell(cfg, p).with_context(|| format!("cell sigma_b2={}, T={}", p.sigma_b2(), p.horizon())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut rows: Vec<ValidationRow> = per_cell.into_iter().flatten().collect();
    rows.sort_by(|a, b| a.beta.total_cmp(&b.beta).then(a.horizon.cmp(&b.horizon)).then(a.t.cmp(&b.t)));
    Ok(rows)
}
