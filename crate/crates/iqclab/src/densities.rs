//! Stored-energy models for incompressible materials and their small-strain
//! limits.
//!
//! A model assigns an energy `W(eps, X)` to deformation gradients `X` on the
//! unit-determinant surface (anything off it is `Infinite`), where `eps` is
//! the loading scale. The companion objects are
//!
//! * `eval_V_eps`: the rescaled energy `eps^-p * W(eps, exp(eps Z))` seen by
//!   a traceless exponent `Z`, and
//! * `eval_V`: its `eps -> 0` limit, a quadratic-type density on symmetric
//!   traceless strains.
//!
//! Three model families are supported: a generic single-well density given
//! by a callback (with an optional closed-form second derivative), a
//! multi-well quadratic family with wells moved to scale with `eps`, and the
//! nematic-elastomer energy whose preferred stretches `gamma_i = exp(eps
//! rho_i)` collapse onto prescribed traceless log-stretches `rho`.
//!
//! `check_condition_c` measures how fast `eval_V_eps` converges to a
//! reference limit, uniformly over a ball of traceless exponents, using a
//! deterministic low-discrepancy sweep.

use crate::matcore::{
    dist_so, matrix_exp, project_ils, singular_values, sqrt_spd, sym_eigenvalues, IlsMatrix,
    Matrix, SymMatrix,
};
use crate::sampling::halton_traceless;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

/// Incompressibility gate: energies are `Infinite` when `|det X - 1|`
/// exceeds this.
pub const DET_TOL: f64 = 1e-9;

/// Trace gate for limit densities: `eval_V` is `Infinite` when
/// `|tr Z| > TRACE_TOL * (1 + ||Z||)`.
pub const TRACE_TOL: f64 = 1e-9;

/// Step bounds accepted by [`eval_q_fd`].
pub const Q_FD_STEP_RANGE: (f64, f64) = (1e-5, 1e-2);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DensityError {
    #[error("model expects {expected}x{expected} matrices, got {got}x{got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("single-well model has no closed-form quadratic and the finite-difference fallback is disabled")]
    MissingQ,
    #[error("finite-difference probe hit an infinite energy")]
    NonFiniteSample,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

/// Energy value on the extended real line `[0, +inf]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtendedEnergy {
    Finite(f64),
    Infinite,
}

impl ExtendedEnergy {
    pub fn is_finite(&self) -> bool {
        matches!(self, ExtendedEnergy::Finite(_))
    }

    pub fn finite(&self) -> Option<f64> {
        match self {
            ExtendedEnergy::Finite(v) => Some(*v),
            ExtendedEnergy::Infinite => None,
        }
    }

    /// Collapse to `f64`, mapping `Infinite` to `f64::INFINITY`.
    pub fn as_f64(&self) -> f64 {
        match self {
            ExtendedEnergy::Finite(v) => *v,
            ExtendedEnergy::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for ExtendedEnergy {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        match self {
            ExtendedEnergy::Finite(v) => write!(f, "{v}"),
            ExtendedEnergy::Infinite => f.write_str("inf"),
        }
    }
}

type WFn = Arc<dyn Fn(&Matrix) -> ExtendedEnergy + Send + Sync>;
type QForm = Arc<dyn Fn(&IlsMatrix) -> f64 + Send + Sync>;
type RhoPath = Arc<dyn Fn(f64) -> [f64; 3] + Send + Sync>;

/// Generic single-well density given by a callback on deformation
/// gradients, with an optional closed-form quadratic `Q` (the second
/// t-derivative of `t -> W(exp(t Z))` at `t = 0`).
#[derive(Clone)]
pub struct SingleWell {
    name: Option<String>,
    n: usize,
    w: WFn,
    q_form: Option<QForm>,
    fd_fallback: bool,
}

impl SingleWell {
    pub fn new(n: usize, w: impl Fn(&Matrix) -> ExtendedEnergy + Send + Sync + 'static) -> Self {
        SingleWell {
            name: None,
            n,
            w: Arc::new(w),
            q_form: None,
            fd_fallback: true,
        }
    }

    /// `dist2-sl`: squared Frobenius distance to the rotations, restricted
    /// to unit-determinant gradients. Its quadratic is `Q(Z) = 2 ||Z||^2`
    /// on symmetric traceless `Z`.
    pub fn dist2_sl(n: usize) -> Self {
        let mut sw = SingleWell::new(n, |x: &Matrix| {
            let d = dist_so(x);
            ExtendedEnergy::Finite(d * d)
        });
        sw.name = Some("dist2-sl".into());
        sw.q_form = Some(Arc::new(|z: &IlsMatrix| 2.0 * z.norm() * z.norm()));
        sw
    }

    pub fn from_builtin(name: &str) -> Result<Self, DensityError> {
        match name {
            "dist2-sl" => Ok(SingleWell::dist2_sl(3)),
            other => Err(DensityError::InvalidModel(format!(
                "unknown builtin single-well density '{other}'"
            ))),
        }
    }

    pub fn with_q_form(mut self, q: impl Fn(&IlsMatrix) -> f64 + Send + Sync + 'static) -> Self {
        self.q_form = Some(Arc::new(q));
        self
    }

    /// Disable the finite-difference fallback: `eval_V` then requires a
    /// closed-form quadratic and errors with [`DensityError::MissingQ`].
    pub fn without_fd_fallback(mut self) -> Self {
        self.fd_fallback = false;
        self
    }

    pub fn builtin_name(&self) -> Option<&str> {
        self.name.as_deref()
    }
}

impl fmt::Debug for SingleWell {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.debug_struct("SingleWell")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("has_q_form", &self.q_form.is_some())
            .field("fd_fallback", &self.fd_fallback)
            .finish()
    }
}

/// One quadratic well: positive definite weight `a`, preferred strain `u`
/// (symmetric traceless), energy offset `w >= 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "WellRepr", into = "WellRepr")]
pub struct Well {
    a: SymMatrix,
    u: IlsMatrix,
    w: f64,
}

impl Well {
    pub fn new(a: SymMatrix, u: IlsMatrix, w: f64) -> Result<Self, DensityError> {
        if a.dim() != u.dim() {
            return Err(DensityError::DimensionMismatch {
                expected: a.dim(),
                got: u.dim(),
            });
        }
        let eigs = sym_eigenvalues(&a);
        if eigs[0] <= 0.0 {
            return Err(DensityError::InvalidModel(format!(
                "well weight must be positive definite (eigenvalue {:.3e})",
                eigs[0]
            )));
        }
        if !(w >= 0.0) {
            return Err(DensityError::InvalidModel(format!(
                "well offset must be nonnegative (got {w})"
            )));
        }
        Ok(Well { a, u, w })
    }

    pub fn weight(&self) -> &SymMatrix {
        &self.a
    }

    pub fn center(&self) -> &IlsMatrix {
        &self.u
    }

    pub fn offset(&self) -> f64 {
        self.w
    }

    /// `<a M, M> = tr(M^T a M)` for the well's weight.
    fn pairing(&self, m: &Matrix) -> f64 {
        (m.transpose() * *self.a.as_matrix() * *m).trace()
    }
}

#[derive(Serialize, Deserialize)]
struct WellRepr {
    a: Matrix,
    #[serde(rename = "U")]
    u: Matrix,
    #[serde(default)]
    w: f64,
}

impl TryFrom<WellRepr> for Well {
    type Error = DensityError;
    fn try_from(r: WellRepr) -> Result<Self, DensityError> {
        let a = SymMatrix::new(r.a)
            .map_err(|e| DensityError::InvalidModel(format!("well weight: {e}")))?;
        let u = IlsMatrix::new(r.u)
            .map_err(|e| DensityError::InvalidModel(format!("well center: {e}")))?;
        Well::new(a, u, r.w)
    }
}

impl From<Well> for WellRepr {
    fn from(w: Well) -> WellRepr {
        WellRepr {
            a: w.a.into_matrix(),
            u: w.u.into_matrix(),
            w: w.w,
        }
    }
}

/// Finitely many quadratic wells whose centers move to first order in
/// `eps`; the limit density is the lower envelope of the limiting
/// quadratics.
#[derive(Debug, Clone)]
pub struct MultiWell {
    wells: Vec<Well>,
}

impl MultiWell {
    pub fn new(wells: Vec<Well>) -> Result<Self, DensityError> {
        if wells.is_empty() {
            return Err(DensityError::InvalidModel("need at least one well".into()));
        }
        let n = wells[0].a.dim();
        for w in &wells {
            if w.a.dim() != n {
                return Err(DensityError::DimensionMismatch {
                    expected: n,
                    got: w.a.dim(),
                });
            }
        }
        Ok(MultiWell { wells })
    }

    pub fn wells(&self) -> &[Well] {
        &self.wells
    }
}

/// Nematic-elastomer energy with preferred log-stretches `rho` (ascending,
/// zero sum). An optional `rho_path` lets the stretches depend on the
/// loading scale; it must approach `rho` as `eps -> 0`.
#[derive(Clone)]
pub struct Nematic {
    rho: [f64; 3],
    rho_path: Option<RhoPath>,
}

impl Nematic {
    pub fn new(rho: [f64; 3]) -> Result<Self, DensityError> {
        validate_rho(&rho)?;
        Ok(Nematic { rho, rho_path: None })
    }

    pub fn with_path(
        rho: [f64; 3],
        path: impl Fn(f64) -> [f64; 3] + Send + Sync + 'static,
    ) -> Result<Self, DensityError> {
        validate_rho(&rho)?;
        Ok(Nematic {
            rho,
            rho_path: Some(Arc::new(path)),
        })
    }

    pub fn rho(&self) -> [f64; 3] {
        self.rho
    }

    /// Log-stretches at loading scale `eps` (the constant path unless one
    /// was supplied).
    pub fn rho_at(&self, eps: f64) -> [f64; 3] {
        match &self.rho_path {
            Some(p) => p(eps),
            None => self.rho,
        }
    }

    /// Preferred stretches `gamma_i = exp(eps * rho_i(eps))`; their product
    /// is 1 because the log-stretches sum to zero.
    pub fn gamma(&self, eps: f64) -> [f64; 3] {
        let r = self.rho_at(eps);
        [(eps * r[0]).exp(), (eps * r[1]).exp(), (eps * r[2]).exp()]
    }
}

impl fmt::Debug for Nematic {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.debug_struct("Nematic")
            .field("rho", &self.rho)
            .field("has_path", &self.rho_path.is_some())
            .finish()
    }
}

pub(crate) fn validate_rho(rho: &[f64; 3]) -> Result<(), DensityError> {
    if !(rho[0] <= rho[1] && rho[1] <= rho[2]) {
        return Err(DensityError::InvalidModel(format!(
            "log-stretches must be ascending, got {rho:?}"
        )));
    }
    let sum: f64 = rho.iter().sum();
    let scale = 1.0 + rho.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    if sum.abs() > 1e-9 * scale {
        return Err(DensityError::InvalidModel(format!(
            "log-stretches must sum to zero, got sum {sum:.3e}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub enum ModelKind {
    SingleWell(SingleWell),
    MultiWell(MultiWell),
    Nematic(Nematic),
}

/// A stored-energy model plus its growth exponent `p` (the rescaling power;
/// the provided model families are all quadratic, `p = 2`).
#[derive(Debug, Clone)]
pub struct DensityModel {
    pub kind: ModelKind,
    pub p: f64,
}

impl DensityModel {
    pub fn single_well(sw: SingleWell) -> Self {
        DensityModel {
            kind: ModelKind::SingleWell(sw),
            p: 2.0,
        }
    }

    pub fn multi_well(mw: MultiWell) -> Self {
        DensityModel {
            kind: ModelKind::MultiWell(mw),
            p: 2.0,
        }
    }

    pub fn nematic(nm: Nematic) -> Self {
        DensityModel {
            kind: ModelKind::Nematic(nm),
            p: 2.0,
        }
    }

    /// Matrix dimension the model acts on.
    pub fn dim(&self) -> usize {
        match &self.kind {
            ModelKind::SingleWell(sw) => sw.n,
            ModelKind::MultiWell(mw) => mw.wells[0].a.dim(),
            ModelKind::Nematic(_) => 3,
        }
    }

    fn check_dim(&self, got: usize) -> Result<(), DensityError> {
        let expected = self.dim();
        if expected != got {
            Err(DensityError::DimensionMismatch { expected, got })
        } else {
            Ok(())
        }
    }
}

// --- JSON representation ---------------------------------------------------

fn default_p() -> f64 {
    2.0
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "model")]
enum ModelRepr {
    #[serde(rename = "singlewell")]
    SingleWell {
        builtin: String,
        #[serde(default = "default_p")]
        p: f64,
    },
    #[serde(rename = "multiwell")]
    MultiWell {
        wells: Vec<Well>,
        #[serde(default = "default_p")]
        p: f64,
    },
    #[serde(rename = "nematic")]
    Nematic {
        rho: [f64; 3],
        #[serde(default = "default_p")]
        p: f64,
    },
}

impl TryFrom<ModelRepr> for DensityModel {
    type Error = DensityError;
    fn try_from(r: ModelRepr) -> Result<Self, DensityError> {
        match r {
            ModelRepr::SingleWell { builtin, p } => Ok(DensityModel {
                kind: ModelKind::SingleWell(SingleWell::from_builtin(&builtin)?),
                p,
            }),
            ModelRepr::MultiWell { wells, p } => Ok(DensityModel {
                kind: ModelKind::MultiWell(MultiWell::new(wells)?),
                p,
            }),
            ModelRepr::Nematic { rho, p } => Ok(DensityModel {
                kind: ModelKind::Nematic(Nematic::new(rho)?),
                p,
            }),
        }
    }
}

impl DensityModel {
    fn to_repr(&self) -> Result<ModelRepr, DensityError> {
        match &self.kind {
            ModelKind::SingleWell(sw) => match &sw.name {
                Some(name) => Ok(ModelRepr::SingleWell {
                    builtin: name.clone(),
                    p: self.p,
                }),
                None => Err(DensityError::InvalidModel(
                    "custom single-well callbacks have no JSON form".into(),
                )),
            },
            ModelKind::MultiWell(mw) => Ok(ModelRepr::MultiWell {
                wells: mw.wells.clone(),
                p: self.p,
            }),
            ModelKind::Nematic(nm) => Ok(ModelRepr::Nematic {
                rho: nm.rho,
                p: self.p,
            }),
        }
    }
}

impl Serialize for DensityModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_repr()
            .map_err(serde::ser::Error::custom)?
            .serialize(s)
    }
}

impl<'de> Deserialize<'de> for DensityModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = ModelRepr::deserialize(d)?;
        DensityModel::try_from(repr).map_err(serde::de::Error::custom)
    }
}

// --- Evaluation -------------------------------------------------------------

/// Stored energy at loading scale `eps`. `Infinite` exactly when the
/// incompressibility gate `|det X - 1| <= DET_TOL` fails (or the callback of
/// a custom single-well model says so).
pub fn eval_w(model: &DensityModel, eps: f64, x: &Matrix) -> Result<ExtendedEnergy, DensityError> {
    if !(eps > 0.0) {
        return Err(DensityError::InvalidParameter(format!(
            "loading scale must be positive, got {eps}"
        )));
    }
    model.check_dim(x.dim())?;
    if (x.det() - 1.0).abs() > DET_TOL {
        return Ok(ExtendedEnergy::Infinite);
    }
    Ok(eval_w_on_sl(model, eps, x))
}

/// Energy of a gradient already known (or forced) to be volume preserving;
/// skips the determinant gate. Used internally by the flow-based solver
/// where incompressibility is exact up to a separately reported residual.
pub(crate) fn eval_w_on_sl(model: &DensityModel, eps: f64, x: &Matrix) -> ExtendedEnergy {
    match &model.kind {
        ModelKind::SingleWell(sw) => (sw.w)(x),
        ModelKind::MultiWell(mw) => {
            let stretch = sqrt_spd(&crate::matcore::project_sym(&(x.transpose() * *x)));
            let mut best = f64::INFINITY;
            for well in &mw.wells {
                let moved = matrix_exp(&well.u.scale(eps));
                let diff = *stretch.as_matrix() - moved;
                let v = 0.5 * well.pairing(&diff) + eps * eps * well.w;
                best = best.min(v);
            }
            ExtendedEnergy::Finite(best)
        }
        ModelKind::Nematic(nm) => {
            let gamma = nm.gamma(eps);
            let sigma = singular_values(x);
            let mut acc = 0.0;
            for i in 0..3 {
                let s = sigma[i] / gamma[i];
                acc += s * s;
            }
            ExtendedEnergy::Finite(acc - 3.0)
        }
    }
}

/// Rescaled energy `eps^-p W(eps, exp(eps Z))` of a traceless exponent.
///
/// Panics if the model reports an infinite energy on the unit-determinant
/// surface: that would be an inconsistent model, not an input error.
pub fn eval_v_eps(model: &DensityModel, eps: f64, z: &crate::matcore::DevMatrix) -> Result<f64, DensityError> {
    let x = matrix_exp(&z.scale(eps));
    let w = eval_w(model, eps, &x)?;
    match w {
        ExtendedEnergy::Finite(v) => Ok(eps.powf(-model.p) * v),
        ExtendedEnergy::Infinite => panic!(
            "model returned an infinite energy on a volume-preserving gradient (eps={eps})"
        ),
    }
}

/// Small-strain limit density. `Infinite` off (a tolerance neighbourhood
/// of) the traceless matrices; on them the limit formula is applied to the
/// symmetric part, so antisymmetric perturbations do not matter.
pub fn eval_v(model: &DensityModel, z: &Matrix) -> Result<ExtendedEnergy, DensityError> {
    model.check_dim(z.dim())?;
    if z.trace().abs() > TRACE_TOL * (1.0 + z.norm()) {
        return Ok(ExtendedEnergy::Infinite);
    }
    let s = z.sym_part();
    match &model.kind {
        ModelKind::SingleWell(sw) => {
            let zi = project_ils(z);
            if let Some(q) = &sw.q_form {
                Ok(ExtendedEnergy::Finite(0.5 * q(&zi)))
            } else if sw.fd_fallback {
                let q = eval_q_fd(sw, &zi, 1e-3)?;
                Ok(ExtendedEnergy::Finite(0.5 * q))
            } else {
                Err(DensityError::MissingQ)
            }
        }
        ModelKind::MultiWell(mw) => {
            let mut best = f64::INFINITY;
            for well in &mw.wells {
                let diff = s - *well.u.as_matrix();
                best = best.min(0.5 * well.pairing(&diff) + well.w);
            }
            Ok(ExtendedEnergy::Finite(best))
        }
        ModelKind::Nematic(nm) => {
            let lambda = sym_eigenvalues(&crate::matcore::project_sym(&s));
            let rho = nm.rho;
            let mut acc = 0.0;
            for i in 0..3 {
                let d = lambda[i] - rho[i];
                acc += d * d;
            }
            Ok(ExtendedEnergy::Finite(2.0 * acc))
        }
    }
}

/// Second derivative of `t -> W(exp(t Z))` at `t = 0` by a central second
/// difference with one Richardson step (`t` and `t/2`).
pub fn eval_q_fd(sw: &SingleWell, z: &IlsMatrix, t: f64) -> Result<f64, DensityError> {
    if !(t >= Q_FD_STEP_RANGE.0 && t <= Q_FD_STEP_RANGE.1) {
        return Err(DensityError::InvalidParameter(format!(
            "probe step {t:.3e} outside [{:.0e}, {:.0e}]",
            Q_FD_STEP_RANGE.0, Q_FD_STEP_RANGE.1
        )));
    }
    let probe = |s: f64| -> Result<f64, DensityError> {
        let x = matrix_exp(&z.scale(s));
        match (sw.w)(&x) {
            ExtendedEnergy::Finite(v) => Ok(v),
            ExtendedEnergy::Infinite => Err(DensityError::NonFiniteSample),
        }
    };
    let w0 = probe(0.0)?;
    let second = |s: f64| -> Result<f64, DensityError> {
        Ok((probe(s)? - 2.0 * w0 + probe(-s)?) / (s * s))
    };
    let d_t = second(t)?;
    let d_half = second(0.5 * t)?;
    Ok((4.0 * d_half - d_t) / 3.0)
}

/// One row of a convergence table: loading scale and the measured uniform
/// deviation of the rescaled energy from the reference limit.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct DeviationRow {
    pub eps: f64,
    pub sup_deviation: f64,
}

/// Uniform-convergence estimate: for each `eps`, the maximum of
/// `|eval_v_eps - v_ref|` over a deterministic low-discrepancy sweep of
/// `samples` traceless matrices with `||Z|| <= r`.
///
/// The sweep is prefix stable: growing `samples` only adds new probe
/// points, so the estimate is monotone in the sample count for a fixed
/// seed.
pub fn check_condition_c(
    model: &DensityModel,
    v_ref: &dyn Fn(&Matrix) -> f64,
    r: f64,
    eps_list: &[f64],
    samples: usize,
    seed: u64,
) -> Result<Vec<DeviationRow>, DensityError> {
    if samples < 1000 {
        return Err(DensityError::InvalidParameter(format!(
            "need at least 1000 samples for a sup estimate, got {samples}"
        )));
    }
    if !(r >= 0.0) {
        return Err(DensityError::InvalidParameter(format!("radius {r} < 0")));
    }
    if eps_list.is_empty() || eps_list.iter().any(|e| !(*e > 0.0)) {
        return Err(DensityError::InvalidParameter(
            "loading scales must be positive".into(),
        ));
    }
    let n = model.dim();
    let mut rows = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let mut sup = 0.0f64;
        for k in 0..samples as u64 {
            let z = halton_traceless(seed, k, n, r);
            let zd = crate::matcore::project_dev(&z);
            let v_eps = eval_v_eps(model, eps, &zd)?;
            let dev = (v_eps - v_ref(&z)).abs();
            sup = sup.max(dev);
        }
        rows.push(DeviationRow {
            eps,
            sup_deviation: sup,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::{project_dev, project_sym, Matrix};
    use crate::sampling::{random_ils, random_rotation, random_sl};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn nematic_model(rho: [f64; 3]) -> DensityModel {
        DensityModel::nematic(Nematic::new(rho).unwrap())
    }

    fn one_well_model() -> DensityModel {
        let a = SymMatrix::new(Matrix::identity(3)).unwrap();
        let u = IlsMatrix::new(Matrix::zeros(3)).unwrap();
        DensityModel::multi_well(MultiWell::new(vec![Well::new(a, u, 0.0).unwrap()]).unwrap())
    }

    #[test]
    fn det_gate_and_dimension_checks() {
        let model = nematic_model([-1.0, 0.0, 1.0]);
        let off = Matrix::diag(&[1.1, 1.0, 1.0]);
        assert_eq!(eval_w(&model, 0.1, &off).unwrap(), ExtendedEnergy::Infinite);
        let wrong_dim = Matrix::identity(2);
        assert!(matches!(
            eval_w(&model, 0.1, &wrong_dim),
            Err(DensityError::DimensionMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn frame_indifference_all_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let models = [
            nematic_model([-1.0, 0.0, 1.0]),
            one_well_model(),
            DensityModel::single_well(SingleWell::dist2_sl(3)),
        ];
        for model in &models {
            for _ in 0..100 {
                let x = random_sl(&mut rng, 3, 0.4);
                let r = random_rotation(&mut rng, 3);
                let w = eval_w(model, 0.05, &x).unwrap().finite().unwrap();
                let wr = eval_w(model, 0.05, &(r * x)).unwrap().finite().unwrap();
                assert!(
                    (w - wr).abs() <= 1e-9 * (1.0 + w.abs()),
                    "rotation changed the energy: {w} vs {wr}"
                );
            }
        }
    }

    #[test]
    fn nematic_limit_at_zero_strain() {
        // V(0) = 2 sum rho_i^2: each stretch is pinned at distance rho_i.
        let model = nematic_model([-1.0, 0.0, 1.0]);
        let v = eval_v(&model, &Matrix::zeros(3)).unwrap().finite().unwrap();
        assert!((v - 4.0).abs() < 1e-14);
        // And the rescaled energies approach it linearly in eps.
        let z = crate::matcore::project_dev(&Matrix::zeros(3));
        let v01 = eval_v_eps(&model, 0.1, &z).unwrap();
        let v005 = eval_v_eps(&model, 0.05, &z).unwrap();
        assert!((v01 - 4.0).abs() < 0.5);
        assert!((v005 - 4.0).abs() < (v01 - 4.0).abs());
    }

    #[test]
    fn rescaled_energy_isotropic_reference() {
        // With all log-stretches zero the limit is 2||Z_sym||^2.
        let model = nematic_model([0.0, 0.0, 0.0]);
        let z = project_dev(&Matrix::diag(&[1.0, -1.0, 0.0]));
        let v = eval_v_eps(&model, 1e-3, &z).unwrap();
        assert!((v - 4.0).abs() <= 1e-2);
        let lim = eval_v(&model, &Matrix::diag(&[1.0, -1.0, 0.0]))
            .unwrap()
            .finite()
            .unwrap();
        assert!((lim - 4.0).abs() < 1e-14);
    }

    #[test]
    fn one_well_limit_is_half_squared_norm() {
        let model = one_well_model();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let z = random_ils(&mut rng, 3, 1.0);
            let v = eval_v(&model, z.as_matrix()).unwrap().finite().unwrap();
            let want = 0.5 * z.norm() * z.norm();
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn multiwell_picks_nearest_well_and_keeps_offset() {
        let a = SymMatrix::new(Matrix::identity(3)).unwrap();
        let u1 = IlsMatrix::new(Matrix::diag(&[0.5, -0.5, 0.0])).unwrap();
        let u2 = IlsMatrix::new(Matrix::diag(&[-0.5, 0.5, 0.0])).unwrap();
        let mw = MultiWell::new(vec![
            Well::new(a.clone(), u1.clone(), 0.3).unwrap(),
            Well::new(a, u2, 0.0).unwrap(),
        ])
        .unwrap();
        let model = DensityModel::multi_well(mw);
        // At u1 the first well costs just its offset; the second is far.
        let v = eval_v(&model, u1.as_matrix()).unwrap().finite().unwrap();
        assert!((v - 0.3).abs() < 1e-12);
        // At u2 the second well wins outright.
        let v2 = eval_v(&model, &Matrix::diag(&[-0.5, 0.5, 0.0]))
            .unwrap()
            .finite()
            .unwrap();
        assert!(v2.abs() < 1e-12);
    }

    #[test]
    fn multiwell_rescaled_converges_to_limit() {
        let a = SymMatrix::new(Matrix::diag(&[2.0, 1.0, 1.0])).unwrap();
        let u = IlsMatrix::new(Matrix::diag(&[0.4, -0.2, -0.2])).unwrap();
        let model = DensityModel::multi_well(
            MultiWell::new(vec![Well::new(a, u, 0.7).unwrap()]).unwrap(),
        );
        let z = project_dev(&Matrix::diag(&[0.2, 0.1, -0.3]));
        let lim = eval_v(&model, z.as_matrix()).unwrap().finite().unwrap();
        let mut prev = f64::INFINITY;
        for eps in [0.2, 0.1, 0.05, 0.025] {
            let dev = (eval_v_eps(&model, eps, &z).unwrap() - lim).abs();
            assert!(dev < prev, "deviation should shrink with eps");
            prev = dev;
        }
        assert!(prev < 5e-2);
    }

    #[test]
    fn limit_density_ignores_antisymmetric_parts_and_gates_trace() {
        let model = nematic_model([-1.0, 0.0, 1.0]);
        // Dyadic entries make the symmetrization exact in floating point,
        // so the value must not change by a single bit.
        let z = Matrix::from_rows3([
            [0.5, 0.125, -0.25],
            [0.125, -0.25, 0.375],
            [-0.25, 0.375, -0.25],
        ]);
        let mut anti = Matrix::zeros(3);
        anti[(0, 1)] = 0.25;
        anti[(1, 0)] = -0.25;
        anti[(1, 2)] = -0.5;
        anti[(2, 1)] = 0.5;
        let v = eval_v(&model, &z).unwrap().finite().unwrap();
        let va = eval_v(&model, &(z + anti)).unwrap().finite().unwrap();
        assert_eq!(v, va, "antisymmetric perturbation changed the limit");
        // Generic entries: equal up to symmetrization roundoff only.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..30 {
            let z = random_ils(&mut rng, 3, 1.5);
            let a = random_matrix_anti(&mut rng);
            let v = eval_v(&model, z.as_matrix()).unwrap().finite().unwrap();
            let va = eval_v(&model, &(*z.as_matrix() + a)).unwrap().finite().unwrap();
            assert!((v - va).abs() <= 1e-12 * (1.0 + v.abs()));
        }
        assert_eq!(
            eval_v(&model, &Matrix::identity(3)).unwrap(),
            ExtendedEnergy::Infinite
        );
    }

    fn random_matrix_anti(rng: &mut ChaCha8Rng) -> Matrix {
        let m = crate::sampling::random_matrix(rng, 3, 1.0);
        m.antisym_part()
    }

    #[test]
    fn q_fd_matches_closed_forms() {
        // dist2-sl: Q(Z) = 2 ||Z||^2 on symmetric traceless Z.
        let sw = SingleWell::dist2_sl(3);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let z = random_ils(&mut rng, 3, 1.0);
            let q = eval_q_fd(&sw, &z, 1e-3).unwrap();
            let want = 2.0 * z.norm() * z.norm();
            assert!((q - want).abs() <= 1e-6 * (1.0 + want));
        }
        // Isotropic nematic wrapped as a single well: Q(Z) = 4 ||Z_sym||^2.
        let nem = nematic_model([0.0, 0.0, 0.0]);
        let as_single = SingleWell::new(3, move |x| eval_w(&nem, 1.0, x).unwrap());
        let z = IlsMatrix::new(Matrix::diag(&[0.6, -0.1, -0.5])).unwrap();
        let q = eval_q_fd(&as_single, &z, 1e-3).unwrap();
        let want = 4.0 * z.norm() * z.norm();
        assert!((q - want).abs() <= 1e-5 * (1.0 + want));
    }

    #[test]
    fn q_fd_validates_and_reports_infinite_probes() {
        let sw = SingleWell::dist2_sl(3);
        let z = IlsMatrix::new(Matrix::diag(&[0.5, -0.5, 0.0])).unwrap();
        assert!(matches!(
            eval_q_fd(&sw, &z, 1e-8),
            Err(DensityError::InvalidParameter(_))
        ));
        let nowhere = SingleWell::new(3, |_| ExtendedEnergy::Infinite);
        assert!(matches!(
            eval_q_fd(&nowhere, &z, 1e-3),
            Err(DensityError::NonFiniteSample)
        ));
        // Without closed form and with the fallback disabled, the limit
        // density is unavailable.
        let bare = SingleWell::new(3, |x| ExtendedEnergy::Finite(dist_so(x).powi(2)))
            .without_fd_fallback();
        let model = DensityModel::single_well(bare);
        assert!(matches!(
            eval_v(&model, &Matrix::diag(&[0.5, -0.5, 0.0])),
            Err(DensityError::MissingQ)
        ));
    }

    #[test]
    fn nematic_growth_and_lipschitz_windows() {
        // Two-sided growth with alpha = 2, beta = 2 + 4 max rho_i^2 on a
        // bounded sample set, and local Lipschitz continuity with the same
        // beta on ||Z|| <= 5.
        let rho = [-1.0f64, 0.0, 1.0];
        let model = nematic_model(rho);
        let beta = 2.0 + 4.0 * rho.iter().fold(0.0f64, |m, r| m.max(r * r));
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for _ in 0..500 {
            let r = rng.gen_range(0.0..1.5);
            let z = crate::sampling::random_dev_with_norm(&mut rng, 3, r);
            let v = eval_v(&model, &z).unwrap().finite().unwrap();
            let zi = project_sym(&z.dev_part()).norm();
            assert!(2.0 * zi * zi - beta <= v + 1e-12, "lower growth failed");
            assert!(v <= beta * z.norm() * z.norm() + beta + 1e-12, "upper growth failed");
        }
        for _ in 0..200 {
            let r1 = rng.gen_range(0.0..5.0);
            let r2 = rng.gen_range(0.0..5.0);
            let z1 = crate::sampling::random_dev_with_norm(&mut rng, 3, r1);
            let z2 = crate::sampling::random_dev_with_norm(&mut rng, 3, r2);
            let v1 = eval_v(&model, &z1).unwrap().finite().unwrap();
            let v2 = eval_v(&model, &z2).unwrap().finite().unwrap();
            let bound = beta * (1.0 + z1.norm() + z2.norm()) * (z1 - z2).norm();
            assert!((v1 - v2).abs() <= bound + 1e-12, "Lipschitz window failed");
        }
    }

    #[test]
    fn nematic_coercivity_above_rotations() {
        // Chain valid for every unit-determinant X: the energy dominates
        // (1/(2 gamma_max^2)) dist(X, SO(3))^2 - C(eps) eps^2 where C comes
        // from the stretch offsets (gamma_i - 1).
        let model = nematic_model([-1.0, 0.0, 1.0]);
        let nm = match &model.kind {
            ModelKind::Nematic(n) => n.clone(),
            _ => unreachable!(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for &eps in &[0.2, 0.1, 0.05] {
            let gamma = nm.gamma(eps);
            let gmax2 = gamma.iter().fold(0.0f64, |m, g| m.max(g * g));
            let c_eps: f64 =
                gamma.iter().map(|g| (g - 1.0) * (g - 1.0)).sum::<f64>() / (gmax2 * eps * eps);
            for _ in 0..2000 {
                let x = random_sl(&mut rng, 3, 0.8);
                let w = eval_w(&model, eps, &x).unwrap().finite().unwrap();
                let d = dist_so(&x);
                let lower = 0.5 / gmax2 * d * d - c_eps * eps * eps;
                assert!(
                    w >= lower - 1e-10 * (1.0 + w.abs()),
                    "coercivity failed: W={w}, bound={lower}"
                );
            }
        }
    }

    #[test]
    fn condition_c_rates_and_determinism() {
        let model = nematic_model([-1.0, 0.0, 1.0]);
        let v_ref = |z: &Matrix| eval_v(&model, z).unwrap().finite().unwrap();
        let rows = check_condition_c(&model, &v_ref, 2.0, &[0.1, 0.05, 0.025], 2000, 9).unwrap();
        for pair in rows.windows(2) {
            let ratio = pair[0].sup_deviation / pair[1].sup_deviation;
            assert!(
                (1.5..=2.5).contains(&ratio),
                "halving the scale should roughly halve the deviation, got {ratio}"
            );
        }
        // Byte-identical rerun.
        let again = check_condition_c(&model, &v_ref, 2.0, &[0.1, 0.05, 0.025], 2000, 9).unwrap();
        assert_eq!(rows, again);
        // Prefix stability: more samples can only raise the sup.
        let more = check_condition_c(&model, &v_ref, 2.0, &[0.1], 4000, 9).unwrap();
        let fewer = check_condition_c(&model, &v_ref, 2.0, &[0.1], 2000, 9).unwrap();
        assert!(more[0].sup_deviation >= fewer[0].sup_deviation);
        // Degenerate sweep: radius zero probes only the origin.
        let origin = check_condition_c(&model, &v_ref, 0.0, &[0.1], 1000, 9).unwrap();
        let z0 = project_dev(&Matrix::zeros(3));
        let want = (eval_v_eps(&model, 0.1, &z0).unwrap() - 4.0).abs();
        assert!((origin[0].sup_deviation - want).abs() < 1e-14);
    }

    #[test]
    fn model_json_schema_roundtrip_and_validation() {
        let text = r#"{"model":"nematic","rho":[-1.0,0.0,1.0],"p":2.0}"#;
        let model: DensityModel = serde_json::from_str(text).unwrap();
        assert_eq!(model.dim(), 3);
        let back = serde_json::to_string(&model).unwrap();
        assert_eq!(back, text);

        let bad = r#"{"model":"nematic","rho":[1.0,0.0,-1.0]}"#;
        assert!(serde_json::from_str::<DensityModel>(bad).is_err());

        let mw = r#"{"model":"multiwell","wells":[{"a":[1,0,0,0,1,0,0,0,1],"U":[0.5,0,0,0,-0.5,0,0,0,0],"w":0.1}]}"#;
        let model: DensityModel = serde_json::from_str(mw).unwrap();
        assert_eq!(model.dim(), 3);
        assert_eq!(model.p, 2.0);

        let sw = r#"{"model":"singlewell","builtin":"dist2-sl"}"#;
        let model: DensityModel = serde_json::from_str(sw).unwrap();
        let v = eval_v(&model, &Matrix::diag(&[0.3, -0.3, 0.0]))
            .unwrap()
            .finite()
            .unwrap();
        assert!((v - 0.18).abs() < 1e-12);
    }

    #[test]
    fn rho_path_reaches_constant_limit() {
        // A scale-dependent stretch path converging to rho must reproduce
        // the same limit density. The path stays balanced (zero sum) so the
        // preferred stretches keep unit product at every scale.
        let nm = Nematic::with_path([-1.0, 0.0, 1.0], |eps| {
            [-1.0 - 0.5 * eps, eps, 1.0 - 0.5 * eps]
        })
        .unwrap();
        let model = DensityModel::nematic(nm);
        let z = project_dev(&Matrix::diag(&[0.5, 0.2, -0.7]));
        let lim = eval_v(&model, z.as_matrix()).unwrap().finite().unwrap();
        let mut prev = f64::INFINITY;
        for eps in [0.2, 0.1, 0.05] {
            let dev = (eval_v_eps(&model, eps, &z).unwrap() - lim).abs();
            assert!(dev < prev);
            prev = dev;
        }
    }
}
