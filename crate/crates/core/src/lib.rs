//! Drift-independent identification of control vector fields.
//!
//! For an input-affine system
//!
//! ```text
//! xdot(t) = f(x) + sum_k g_k(x) u_k(t)
//! ```
//!
//! the control fields `g_k` can be recovered *without knowing the drift `f`*
//! by repeating short-horizon experiments from identical initial conditions
//! under different constant inputs and differencing the measured derivatives:
//! with the same start state, `delta xdot(t0) = g(x(t0)) delta u(t0)` and the
//! drift cancels exactly. Expanding each entry of `g` in a truncated
//! orthonormal basis turns the pooled differences into per-output linear
//! regression problems whose design depends only on the applied inputs and
//! the chosen basis. Once `g` is known, the drift is recovered as a second,
//! ordinary regression stage on `xdot - g(x) u`.
//!
//! The crate is both the laboratory and the learner:
//!
//! - [`dynamics`] — ground-truth systems and a fixed-step RK4 integrator;
//! - [`experiment`] — the perturbation protocol and difference samples;
//! - [`basis`] — Fourier / Legendre / monomial feature families;
//! - [`regression`] — assembly and rank-revealing least-squares solving;
//! - [`recovery`] — the end-to-end pipeline, validation and noise studies;
//! - [`scenarios`] — the built-in linear, Bloch and phase-oscillator studies.
//!
//! The crate is `no_std` (with `alloc`); all file I/O and the command line
//! front end live in the companion `driftless-cli` crate.

#![no_std]
#![warn(missing_docs)]
// `!(x > 0.0)` rejects NaN along with nonpositive values; `x <= 0.0` would
// let NaN through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod basis;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod recovery;
pub mod regression;
pub mod scenarios;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;
