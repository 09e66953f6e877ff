//! MSE-vs-horizon sweeps.

use std::io::Write;

use anyhow::Context;
use rayon::prelude::*;
use serde::Serialize;

use seqfb_core::dp::{analytic_mse, backward_induction};
use seqfb_core::montecarlo::estimate_mse;
use seqfb_core::policy::{closed_form_table, oracle_calibrated, sk_table, zeta};
use seqfb_core::{PolicyTable, Provenance, SystemParams};

use crate::config::{ExperimentConfig, PolicyKind};

/// One output row; `None` fields are written empty.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentRow {
    pub sigma_w2: f64,
    pub power: f64,
    pub sigma_f2: f64,
    pub sigma_b2: f64,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub policy: PolicyKind,
    pub analytic_mse: f64,
    pub closed_form_v0: Option<f64>,
    pub empirical_mse: Option<f64>,
    pub std_err: Option<f64>,
    /// `10·log10(analytic_mse)`.
    pub mse_db: f64,
}

/// Gain schedule of `policy` for one cell. `T = 0` has no coded slots.
pub fn build_table(policy: PolicyKind, params: &SystemParams, cfg: &ExperimentConfig) -> anyhow::Result<PolicyTable> {
    if params.horizon() == 0 {
        let provenance = match policy {
            PolicyKind::Optimal => Provenance::ClosedForm,
            PolicyKind::Sk => Provenance::Sk,
            PolicyKind::NumericDp => Provenance::NumericDp,
            PolicyKind::OracleCalibrated => Provenance::OracleCalibrated,
        };
        return Ok(PolicyTable::new(Vec::new(), provenance, params)?);
    }
    Ok(match policy {
        PolicyKind::Optimal => closed_form_table(params)?,
        PolicyKind::Sk => sk_table(params)?,
        PolicyKind::NumericDp => backward_induction(params, &cfg.search_spec(params)?)?.0,
        PolicyKind::OracleCalibrated => oracle_calibrated(params, &cfg.search_spec(params)?)?.0,
    })
}

fn run_cell(cfg: &ExperimentConfig, params: &SystemParams) -> anyhow::Result<ExperimentRow> {
    let table = build_table(cfg.policy, params, cfg)?;
    let analytic = analytic_mse(params, &table)?;
    let closed_form_v0 = if params.horizon() >= 1 { Some(zeta(params)?.1) } else { None };
    let (empirical_mse, std_err) = if cfg.trials > 0 {
        let est = estimate_mse(params, &table, cfg.trials, cfg.seed)?;
        (Some(est.mean_sq_err), Some(est.std_err))
    } else {
        (None, None)
    };
    Ok(ExperimentRow {
        sigma_w2: params.sigma_w2(),
        power: params.power(),
        sigma_f2: params.sigma_f2(),
        sigma_b2: params.sigma_b2(),
        horizon: params.horizon(),
        policy: cfg.policy,
        analytic_mse: analytic,
        closed_form_v0,
        empirical_mse,
        std_err,
        mse_db: 10.0 * analytic.log10(),
    })
}

/// Evaluates every `(sigma_b2, T)` cell; rows come back sorted by
/// `(sigma_b2, T, policy)`.
pub fn run_experiment(cfg: &ExperimentConfig) -> anyhow::Result<Vec<ExperimentRow>> {
    let cells = cfg.cells()?;
    let mut rows = cells
        .par_iter()
        .map(|p| run_cell(cfg, p).with_context(|| format!("cell sigma_b2={}, T={}", p.sigma_b2(), p.horizon())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        a.sigma_b2.total_cmp(&b.sigma_b2).then(a.horizon.cmp(&b.horizon)).then(a.policy.name().cmp(b.policy.name()))
    });
    Ok(rows)
}

pub fn write_csv<W: Write, R: Serialize>(rows: &[R], out: W) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
