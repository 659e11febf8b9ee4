//! Driving-and-charging equilibrium of commuters, CSO charging prices and ENO
//! supply contracts, solved as a trilevel problem.
//!
//! * [`transport`]: road network, hubs, vehicle classes, path costs.
//! * [`wardrop`]: lower-level equilibrium (Beckmann potential, certified gap).
//! * [`charging`]: water-filling schedule and marginal price at a hub.
//! * [`grid`]: radial feeder power flow and the grid cost of charging.
//! * [`operators`]: supply contract and payoffs.
//! * [`trilevel`]: iterative bounding with Brent and simulated annealing.
//! * [`baselines`]: grid-LMP fixed-point reference methods.
//! * [`scenario`]: configuration, validation and nonflexible-load synthesis.
//! * [`experiments`]: sweeps, the baseline comparison and output files.

pub mod baselines;
pub mod charging;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod operators;
pub mod scenario;
pub mod transport;
pub mod trilevel;
pub mod wardrop;

pub use error::{Error, Result};
