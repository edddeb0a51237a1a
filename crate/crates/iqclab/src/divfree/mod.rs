//! Divergence-free vector fields on the unit cube: staggered grids, a
//! divergence-removing corrector, solenoidal extension to a larger box,
//! random solenoidal samples, and volume-preserving flow maps.
//!
//! Velocity components live on cell faces (the staggered "MAC" layout),
//! so the discrete divergence of a cell is the net flux through its six
//! (or four) faces divided by the cell volume. Fields built as discrete
//! curls of edge potentials have zero discrete divergence up to roundoff
//! by telescoping, with no solve involved; that construction is shared by
//! the random-field sampler and the cell problems.

mod correct;
mod flow;
pub(crate) mod grid;

pub use correct::{
    bogovskii_correct, extend_solenoidal, random_solenoidal, CorrectionReport, ExtensionReport,
};
pub use flow::{
    flow_map, flow_point, AnalyticSolenoidal, FlowReport, GridInterpolant, VelocityField,
    DET_PROBE_OFFSET, DOMAIN_MARGIN,
};
pub use grid::{discrete_div, div_l2_norm, mean_div, EdgePotential, GridField};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DivError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("grid mismatch: expected {expected}, got {got}")]
    GridMismatch { expected: String, got: String },
    #[error("mean divergence {0:.3e} is not compatible with a flux-free correction")]
    NonZeroMeanDivergence(f64),
    #[error("input field is not solenoidal: ||div|| = {0:.3e}")]
    NotSolenoidal(f64),
    #[error("pressure solve stalled at residual {residual:.3e} after {iterations} iterations")]
    SolverStalled { residual: f64, iterations: usize },
    #[error("trajectory left the field's domain at position {position:?}, time {time}")]
    DomainEscape { position: [f64; 3], time: f64 },
    #[error("malformed grid field: {0}")]
    BadField(String),
}
