//! Dynamic cash-subadditive risk measures driven by backward equations on a
//! binomial lattice, and the capital allocation rules derived from them.
//!
//! The crate is organised bottom-up:
//!
//! - [`lattice`]: time grid, node and path layouts, conditional expectations, tilts;
//! - [`drivers`]: generators `g(t, y, z)`, scenarios and conjugates;
//! - [`bsde`]: backward induction and the risk measure `rho_t(X) = Y_t^{-X}`;
//! - [`bsvie`]: anchor-indexed Volterra equations;
//! - [`scenario`]: optimal scenarios, discounts, densities, penalties, duality checks;
//! - [`allocation`]: subdifferential, gradient, marginal, generalized marginal,
//!   Aumann–Shapley and cash-subadditive entropic allocation rules;
//! - [`properties`]: seeded random instances and axiom checks.

pub mod allocation;
pub mod bsde;
pub mod bsvie;
pub mod drivers;
pub mod error;
pub mod lattice;
pub mod properties;
pub mod quadrature;
pub mod scenario;

pub use error::{Error, Result};
