//! Asymptotic MMSE of noisy compressed sensing under exchangeable sparse
//! priors, together with the finite-n, random-matrix and state-evolution
//! references used to check it.
//!
//! The measurement model is `Y = H X + W` with `H` of size `k × n` and
//! i.i.d. `N(0, 1/n)` entries, `W ~ N(0, I/β)`, and `X_i = S_i U_i` with
//! `U_i ~ N(0, σ²)` and a support `S` drawn from `P_S(s) ∝ exp(n f(m_s))`.

pub mod cli;
pub mod error;
pub mod exact;
pub mod model;
pub mod numeric;
pub mod oracle;
pub mod quadrature;
pub mod replica;
pub mod rmt;
pub mod rng;
pub mod scalar;
pub mod solver;

pub use error::{Error, Result};
pub use model::{binary_entropy, ModelParams, SparsityPrior, SupportPattern};
pub use quadrature::{MixtureQ, QuadratureRule};
pub use scalar::ScalarContext;
pub use solver::{FixedPointSolution, MmseForm, SolverConfig};
