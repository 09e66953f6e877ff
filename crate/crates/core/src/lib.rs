//! Linear sequential feedback codes for AWGN channels with noisy output
//! feedback.
//!
//! The transmitter sends the message once uncoded, then `T` coded symbols
//! `x_t = γ_t u_t` where `u_{t+1} = a_t w + b_t u_t + c_t z_t` mixes the
//! message, its own hidden state and the noisy feedback `z_t` of the last
//! channel output. The receiver is a Kalman filter over `p_t = [w, u_t, y_t]`.
//!
//! Modules:
//! - [`model`]: parameters and moment/covariance types
//! - [`channel`]: seeded AWGN forward/feedback links
//! - [`encoder`]: hidden-state recursion and transmitter moment propagation
//! - [`kalman`]: receiver covariance/mean recursions
//! - [`policy`]: closed-form gain schedule, value function, SK baseline
//! - [`dp`]: numeric dynamic-programming oracle on the deterministic MDP
//! - [`montecarlo`]: end-to-end simulation and statistical checks

// `!(x > floor)` also rejects NaN; small fixed-size matrix code reads best indexed.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod channel;
pub mod dp;
pub mod encoder;
mod error;
pub mod kalman;
pub mod model;
pub mod montecarlo;
pub mod policy;
pub mod scalar;

pub use error::{Error, Result};
pub use model::{Gains, MdpState, Ratios, RxErrorCov, StepCoeffs, SystemParams, TxMoments};
pub use policy::{PolicyTable, Provenance};
