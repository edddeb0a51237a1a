//! iqclab: numerics for incompressible elastic energies near the small-strain
//! regime.
//!
//! The crate is organized around one pipeline:
//!
//! * [`matcore`] — small dense matrix kernels (exp/log, eigenvalues, polar,
//!   distance to rotations) everything else is built on;
//! * [`densities`] — stored-energy models on volume-preserving deformations
//!   (single-well, multi-well, nematic-elastomer), their rescaled versions at
//!   loading scale `eps`, and their small-strain limits on traceless strains;
//! * [`envelopes`] — relaxation: closed-form envelopes for the nematic model
//!   and grid cell problems that relax arbitrary densities against gradient
//!   or divergence-free test fields, including a trace-penalty ladder;
//! * [`divfree`] — staggered-grid (MAC) vector fields: discrete divergence,
//!   divergence-removing correction, random solenoidal fields, and
//!   volume-preserving flow maps integrated with RK4;
//! * [`solver`] — end-to-end energy-minimization experiments comparing the
//!   rescaled functionals at finite `eps` against the relaxed small-strain
//!   functional, with convergence ladders;
//! * [`cli`] — config-file driven front end used by the `iqclab` binary.
//!
//! Determinism is a hard requirement throughout: every stochastic operation
//! takes an explicit seed and reruns are byte-identical.

pub mod cli;
pub mod densities;
pub mod divfree;
pub mod envelopes;
pub mod matcore;
pub mod optim;
pub mod sampling;
pub mod solver;
