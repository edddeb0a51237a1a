//! Relaxation of incompressible energy densities.
//!
//! Closed forms: for the nematic limit density the relaxation against
//! divergence-free test fields splits the strain space into four regions by
//! how the ordered principal strains sit relative to the preferred
//! log-stretches `rho`: a zero-energy region where microstructure absorbs
//! the strain, two edge regions where only the extreme principal strain
//! pays, and a middle region where no relaxation happens at all. The same
//! four-way split exists at finite loading scale for the nematic stored
//! energy ([`nematic_w_qc`]), and rescaling that envelope reproduces the
//! small-strain one ([`scaled_qc_limit`]).
//!
//! Numerical envelopes for arbitrary densities (grid cell problems over
//! gradient fields, divergence-free fields, and a trace-penalty ladder)
//! live in [`cell`] and are re-exported here.

pub(crate) mod cell;

pub use cell::{
    numerical_iqc, numerical_qc, penalized_iqc, CellDensity, CellProblem, CellProblemResult,
    FnDensity, NematicEnvelopeDensity, NematicLimitDensity, OptimizerOpts, PenalizedDensity,
    PenalizedRow, QuadraticDensity, DEFAULT_B_LADDER,
};

use crate::densities::{validate_rho, ExtendedEnergy, TRACE_TOL};
use crate::matcore::{matrix_exp, project_ils, singular_values, sym_eigenvalues, IlsMatrix, Matrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tie tolerance for the region comparisons on principal-strain
/// offsets. Adjacent regions agree on their shared boundary, so any
/// assignment within this band is value-consistent.
pub const TIE_TOL: f64 = 1e-9;

/// Unit-product tolerance for preferred stretches.
pub const GAMMA_PRODUCT_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvelopeError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("strain offsets {0:?} escaped every region; this is a bug")]
    RegionClassificationFailure([f64; 3]),
    #[error("optimizer diverged: {0}")]
    OptimizerDiverged(String),
    #[error("energy evaluated to a non-finite value")]
    NonFiniteEnergy,
}

/// Which of the four relaxation regions a strain falls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// Zero energy: microstructure accommodates the strain entirely.
    Soft = 1,
    /// Only the smallest principal strain is energetically active.
    SmallestActive = 2,
    /// No relaxation: the envelope equals the unrelaxed density.
    Full = 3,
    /// Only the largest principal strain is energetically active.
    LargestActive = 4,
}

impl Region {
    pub fn index(self) -> u8 {
        self as u8
    }
}

impl Serialize for Region {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.index())
    }
}

impl<'de> Deserialize<'de> for Region {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match u8::deserialize(d)? {
            1 => Ok(Region::Soft),
            2 => Ok(Region::SmallestActive),
            3 => Ok(Region::Full),
            4 => Ok(Region::LargestActive),
            other => Err(serde::de::Error::custom(format!("region out of range: {other}"))),
        }
    }
}

fn check_rho(rho: &[f64; 3]) -> Result<(), EnvelopeError> {
    validate_rho(rho).map_err(|e| EnvelopeError::InvalidParameter(e.to_string()))
}

/// Ordered principal strains of the symmetric traceless part of `z`, or
/// `None` when `z` is too far from traceless to have a finite envelope.
fn principal_strains(z: &Matrix) -> Option<[f64; 3]> {
    if z.trace().abs() > TRACE_TOL * (1.0 + z.norm()) {
        return None;
    }
    let zi = project_ils(z);
    let l = sym_eigenvalues(&crate::matcore::project_sym(zi.as_matrix()));
    Some([l[0], l[1], l[2]])
}

fn classify(d: &[f64; 3]) -> Result<Region, EnvelopeError> {
    // First match wins; the formulas agree on every shared boundary, so the
    // tie band cannot change the value by more than roundoff.
    if d[0] >= -TIE_TOL && d[2] <= TIE_TOL {
        Ok(Region::Soft)
    } else if d[0] <= TIE_TOL && d[2] - d[1] <= TIE_TOL {
        Ok(Region::SmallestActive)
    } else if d[0] - d[1] <= TIE_TOL && d[1] - d[2] <= TIE_TOL {
        Ok(Region::Full)
    } else if d[1] - d[0] <= TIE_TOL && d[2] >= -TIE_TOL {
        Ok(Region::LargestActive)
    } else {
        debug_assert!(false, "offsets {d:?} escaped every region");
        Err(EnvelopeError::RegionClassificationFailure(*d))
    }
}

/// Relaxation of the nematic limit density against divergence-free test
/// fields, in closed form, together with the region that fired.
///
/// `Infinite` (with no region) off the traceless matrices; otherwise the
/// value depends only on the ordered principal strains of the symmetric
/// part.
pub fn nematic_v_iqc_classified(
    rho: [f64; 3],
    z: &Matrix,
) -> Result<(ExtendedEnergy, Option<Region>), EnvelopeError> {
    check_rho(&rho)?;
    if z.dim() != 3 {
        return Err(EnvelopeError::InvalidParameter(format!(
            "nematic envelopes need 3x3 strains, got {0}x{0}",
            z.dim()
        )));
    }
    let Some(lambda) = principal_strains(z) else {
        return Ok((ExtendedEnergy::Infinite, None));
    };
    let d = [lambda[0] - rho[0], lambda[1] - rho[1], lambda[2] - rho[2]];
    let region = classify(&d)?;
    let value = match region {
        Region::Soft => 0.0,
        Region::SmallestActive => 3.0 * d[0] * d[0],
        Region::Full => 2.0 * (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]),
        Region::LargestActive => 3.0 * d[2] * d[2],
    };
    Ok((ExtendedEnergy::Finite(value), Some(region)))
}

/// [`nematic_v_iqc_classified`] without the region tag.
pub fn nematic_v_iqc(rho: [f64; 3], z: &Matrix) -> Result<ExtendedEnergy, EnvelopeError> {
    nematic_v_iqc_classified(rho, z).map(|(v, _)| v)
}

/// Same envelope written through averaged pair offsets instead of the
/// single-strain forms. Algebraically equal on traceless strains (the
/// offsets sum to zero); kept deliberately un-simplified so the two
/// routes stay independent checks of each other.
pub fn nematic_v_iqc_alt(rho: [f64; 3], z: &Matrix) -> Result<ExtendedEnergy, EnvelopeError> {
    check_rho(&rho)?;
    if z.dim() != 3 {
        return Err(EnvelopeError::InvalidParameter(format!(
            "nematic envelopes need 3x3 strains, got {0}x{0}",
            z.dim()
        )));
    }
    let Some(lambda) = principal_strains(z) else {
        return Ok(ExtendedEnergy::Infinite);
    };
    let d = [lambda[0] - rho[0], lambda[1] - rho[1], lambda[2] - rho[2]];
    let half_value = match classify(&d)? {
        Region::Soft => 0.0,
        Region::SmallestActive => {
            let pair = 0.5 * (d[1] + d[2]);
            d[0] * d[0] + 2.0 * pair * pair
        }
        Region::Full => d[0] * d[0] + d[1] * d[1] + d[2] * d[2],
        Region::LargestActive => {
            let pair = 0.5 * (d[0] + d[1]);
            2.0 * pair * pair + d[2] * d[2]
        }
    };
    Ok(ExtendedEnergy::Finite(2.0 * half_value))
}

/// Quasiconvex envelope of the nematic stored energy at fixed preferred
/// stretches `gamma` (ascending, unit product), evaluated at a deformation
/// gradient. `Infinite` off the unit-determinant surface.
pub fn nematic_w_qc(gamma: [f64; 3], x: &Matrix) -> Result<ExtendedEnergy, EnvelopeError> {
    nematic_w_qc_classified(gamma, x).map(|(v, _)| v)
}

/// [`nematic_w_qc`] with the branch that fired.
pub fn nematic_w_qc_classified(
    gamma: [f64; 3],
    x: &Matrix,
) -> Result<(ExtendedEnergy, Option<Region>), EnvelopeError> {
    if !(gamma[0] <= gamma[1] && gamma[1] <= gamma[2]) || gamma[0] <= 0.0 {
        return Err(EnvelopeError::InvalidParameter(format!(
            "preferred stretches must be positive ascending, got {gamma:?}"
        )));
    }
    let product: f64 = gamma.iter().product();
    if (product - 1.0).abs() > GAMMA_PRODUCT_TOL {
        return Err(EnvelopeError::InvalidParameter(format!(
            "preferred stretches must have unit product, got {product}"
        )));
    }
    if x.dim() != 3 {
        return Err(EnvelopeError::InvalidParameter(format!(
            "nematic envelopes need 3x3 gradients, got {0}x{0}",
            x.dim()
        )));
    }
    if (x.det() - 1.0).abs() > crate::densities::DET_TOL {
        return Ok((ExtendedEnergy::Infinite, None));
    }
    let sigma = singular_values(x);
    let s = [sigma[0] / gamma[0], sigma[1] / gamma[1], sigma[2] / gamma[2]];
    // Same first-match layout as the small-strain regions, with the
    // stretch ratios playing the role of the strain offsets around 1.
    let (region, value) = if s[0] >= 1.0 - TIE_TOL && s[2] <= 1.0 + TIE_TOL {
        (Region::Soft, 0.0)
    } else if s[0] <= 1.0 + TIE_TOL && s[2] - s[1] <= TIE_TOL {
        (Region::SmallestActive, s[0] * s[0] + 2.0 / s[0] - 3.0)
    } else if s[0] - s[1] <= TIE_TOL && s[1] - s[2] <= TIE_TOL {
        (
            Region::Full,
            s[0] * s[0] + s[1] * s[1] + s[2] * s[2] - 3.0,
        )
    } else if s[1] - s[0] <= TIE_TOL && s[2] >= 1.0 - TIE_TOL {
        (Region::LargestActive, s[2] * s[2] + 2.0 / s[2] - 3.0)
    } else {
        debug_assert!(false, "stretch ratios {s:?} escaped every branch");
        return Err(EnvelopeError::RegionClassificationFailure(s));
    };
    Ok((ExtendedEnergy::Finite(value), Some(region)))
}

/// One row of a scaled-envelope table.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ScaledRow {
    pub eps: f64,
    pub value: f64,
}

/// Rescaled finite-scale envelope table with its small-strain limit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaledQcTable {
    pub rows: Vec<ScaledRow>,
    pub limit: f64,
}

/// Evaluates `eps^-2 * Wqc(gamma(eps), exp(eps Z))` for each scale, where
/// `gamma_i(eps) = exp(eps rho_i)`, next to the closed-form small-strain
/// envelope it converges to.
pub fn scaled_qc_limit(
    rho: [f64; 3],
    z: &IlsMatrix,
    eps_list: &[f64],
) -> Result<ScaledQcTable, EnvelopeError> {
    check_rho(&rho)?;
    if eps_list.is_empty() || eps_list.iter().any(|e| !(*e > 0.0)) {
        return Err(EnvelopeError::InvalidParameter(
            "scales must be positive".into(),
        ));
    }
    let mut rows = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let gamma = [
            (eps * rho[0]).exp(),
            (eps * rho[1]).exp(),
            (eps * rho[2]).exp(),
        ];
        let x = matrix_exp(&z.scale(eps));
        let w = nematic_w_qc(gamma, &x)?;
        let value = match w {
            ExtendedEnergy::Finite(v) => v / (eps * eps),
            ExtendedEnergy::Infinite => {
                // exp of a traceless matrix has unit determinant, so this
                // cannot happen for valid inputs.
                return Err(EnvelopeError::NonFiniteEnergy);
            }
        };
        rows.push(ScaledRow { eps, value });
    }
    let limit = match nematic_v_iqc(rho, z.as_matrix())? {
        ExtendedEnergy::Finite(v) => v,
        ExtendedEnergy::Infinite => return Err(EnvelopeError::NonFiniteEnergy),
    };
    Ok(ScaledQcTable { rows, limit })
}
