//! Receiver-side MMSE decoder.
//!
//! The receiver tracks `p_t = [w, u_t, y_t]`, which evolves linearly:
//!
//! ```text
//! p_{t+1} = A_t p_t + J_t [w^f_{t+1}, w^b_t]ᵀ,      y_t = C p_t,  C = [0 0 1]
//! ```
//!
//! Because `y_t` is observed exactly, the filtered covariance always has a
//! zero third row and column; the informative part is the (w, u) block.
//! The covariance recursion does not depend on data, so it runs on its own
//! (analytic mode, used by the solver) or together with the mean recursion
//! (simulation mode). Both share [`predict`] and [`measurement_update`].

use crate::error::{Error, Result};
use crate::model::{RxErrorCov, StepCoeffs, SystemParams};
use crate::scalar::Scalar;

pub type Mat3<S = f64> = [[S; 3]; 3];
pub type Vec3<S = f64> = [S; 3];

/// Innovation variances at or below this are treated as singular. The
/// innovation is always at least σ_f², so hitting this means a bug.
pub const INNOVATION_FLOOR: f64 = 1e-300;

/// Time-varying model matrices for one coded step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SystemMatrices<S = f64> {
    pub a_mat: Mat3<S>,
    pub j_mat: [[S; 2]; 3],
    pub c_row: [f64; 3],
    /// Diagonal of Q: (σ_f², σ_b²).
    pub q_diag: [f64; 2],
}

pub fn build_system<S: Scalar>(coeffs: &StepCoeffs<S>, params: &SystemParams) -> SystemMatrices<S> {
    let (a, b, c) = (coeffs.a(), coeffs.b(), coeffs.c());
    let g = coeffs.gamma_next();
    let (zero, one) = (S::zero(), S::one());
    SystemMatrices {
        a_mat: [[one, zero, zero], [a, b, c], [g * a, g * b, g * c]],
        j_mat: [[zero, zero], [zero, c], [one, g * c]],
        c_row: [0.0, 0.0, 1.0],
        q_diag: [params.sigma_f2(), params.sigma_b2()],
    }
}

/// Conditional mean and error covariance of `p_t` given `y_{0:t}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterState<S = f64> {
    pub p_hat: Vec3<S>,
    pub cov: Mat3<S>,
    pub t: usize,
}

impl<S: Scalar> FilterState<S> {
    pub fn w_hat(&self) -> S {
        self.p_hat[0]
    }

    pub fn u_hat(&self) -> S {
        self.p_hat[1]
    }
}

/// Prior covariance of `p_0 = [w, w, γ_0 w + w^f_0]`.
pub fn prior_covariance(params: &SystemParams) -> Mat3 {
    let sw2 = params.sigma_w2();
    let g0 = params.gamma0();
    [[sw2, sw2, g0 * sw2], [sw2, sw2, g0 * sw2], [g0 * sw2, g0 * sw2, g0 * g0 * sw2 + params.sigma_f2()]]
}

/// Conditions the slot-0 prior on the uncoded observation `y0`.
pub fn initial_update(params: &SystemParams, y0: f64) -> FilterState {
    let prior = prior_covariance(params);
    let (gain, cov) = condition_on_y(&prior).expect("prior innovation is at least sigma_f2");
    // Prior mean is zero, so p̂_0 = L_0 y_0.
    let mut p_hat = gain.map(|l| l * y0);
    p_hat[2] = y0;
    FilterState { p_hat, cov, t: 0 }
}

/// `Σ_{t+1|t} = A Σ Aᵀ + J Q Jᵀ`.
pub fn predict<S: Scalar>(f: &FilterState<S>, sys: &SystemMatrices<S>) -> Mat3<S> {
    predict_cov(&f.cov, sys)
}

pub fn predict_cov<S: Scalar>(cov: &Mat3<S>, sys: &SystemMatrices<S>) -> Mat3<S> {
    let a = &sys.a_mat;
    let mut a_cov = [[S::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = S::zero();
            for k in 0..3 {
                acc = acc + a[i][k] * cov[k][j];
            }
            a_cov[i][j] = acc;
        }
    }
    let q = [S::from_f64(sys.q_diag[0]), S::from_f64(sys.q_diag[1])];
    let jm = &sys.j_mat;
    let mut out = [[S::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = S::zero();
            for k in 0..3 {
                acc = acc + a_cov[i][k] * a[j][k];
            }
            acc = acc + jm[i][0] * q[0] * jm[j][0] + jm[i][1] * q[1] * jm[j][1];
            out[i][j] = acc;
        }
    }
    out
}

/// Noise-free measurement of `y = C p`: returns the gain
/// `L = Σ Cᵀ / (C Σ Cᵀ)` and `(I − L C) Σ`, symmetrized.
pub fn measurement_update<S: Scalar>(pred: &Mat3<S>, sys: &SystemMatrices<S>) -> Result<(Vec3<S>, Mat3<S>)> {
    debug_assert_eq!(sys.c_row, [0.0, 0.0, 1.0]);
    condition_on_y(pred)
}

fn condition_on_y<S: Scalar>(pred: &Mat3<S>) -> Result<(Vec3<S>, Mat3<S>)> {
    let v = pred[2][2];
    if !(v.re() > INNOVATION_FLOOR) {
        return Err(Error::SingularInnovation(v.re()));
    }
    let gain = [pred[0][2] / v, pred[1][2] / v, S::one()];
    let mut cov = [[S::zero(); 3]; 3];
    for i in 0..2 {
        for j in 0..2 {
            cov[i][j] = pred[i][j] - gain[i] * pred[2][j];
        }
    }
    // Exact observation of y: the third row/column vanish identically.
    let half = S::from_f64(0.5);
    let off = (cov[0][1] + cov[1][0]) * half;
    cov[0][1] = off;
    cov[1][0] = off;
    Ok((gain, cov))
}

/// Full Kalman step on the observation `y_next`.
pub fn filter_step(f: &FilterState, y_next: f64, sys: &SystemMatrices) -> Result<FilterState> {
    let pred = predict(f, sys);
    let (gain, cov) = measurement_update(&pred, sys)?;
    let a = &sys.a_mat;
    let mut p_pred = [0.0; 3];
    for (i, row) in a.iter().enumerate() {
        p_pred[i] = row[0] * f.p_hat[0] + row[1] * f.p_hat[1] + row[2] * f.p_hat[2];
    }
    let innovation = y_next - p_pred[2];
    let mut p_hat = [0.0; 3];
    for i in 0..3 {
        p_hat[i] = p_pred[i] + gain[i] * innovation;
    }
    p_hat[2] = y_next;
    Ok(FilterState { p_hat, cov, t: f.t + 1 })
}

/// Reads the (w, u) block.
pub fn extract_rx<S: Scalar>(f: &FilterState<S>) -> RxErrorCov<S> {
    rx_from_cov(&f.cov)
}

pub fn rx_from_cov<S: Scalar>(cov: &Mat3<S>) -> RxErrorCov<S> {
    RxErrorCov::from_raw(cov[0][0], cov[1][1], cov[0][1])
}

/// Inverse of [`extract_rx`]: the (w, u) block with zero third row/column.
pub fn embed_rx<S: Scalar>(rx: &RxErrorCov<S>) -> Mat3<S> {
    let z = S::zero();
    [[rx.var_w(), rx.cov_uw(), z], [rx.cov_uw(), rx.var_u(), z], [z, z, z]]
}

/// Analytic covariance step: embed, predict, update, extract.
pub fn covariance_step<S: Scalar>(
    rx: &RxErrorCov<S>,
    coeffs: &StepCoeffs<S>,
    params: &SystemParams,
) -> Result<RxErrorCov<S>> {
    let sys = build_system(coeffs, params);
    let pred = predict_cov(&embed_rx(rx), &sys);
    let (_, cov) = measurement_update(&pred, &sys)?;
    Ok(rx_from_cov(&cov))
}

/// Eigenvalues of a symmetric 3×3 matrix (cyclic Jacobi), ascending.
pub fn symmetric_eigenvalues(m: &Mat3) -> [f64; 3] {
    let mut a = *m;
    for _ in 0..64 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        let scale = a[0][0].powi(2) + a[1][1].powi(2) + a[2][2].powi(2) + off;
        if off <= 1e-30 * scale || off == 0.0 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            // A ← Jᵀ A J for the rotation in the (p, q) plane.
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
        }
    }
    let mut ev = [a[0][0], a[1][1], a[2][2]];
    ev.sort_by(|x, y| x.total_cmp(y));
    ev
}
