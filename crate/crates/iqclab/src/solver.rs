//! Variational experiments on the unit box.
//!
//! Two functionals are minimized over matching admissible classes: the
//! small-strain relaxed energy over solenoidal displacements with affine
//! boundary values, and the finite-strain rescaled energy over exactly
//! incompressible deformations built from flow maps. Running both across a
//! ladder of loading scales produces the energy-gap evidence that the
//! finite-strain infima approach the relaxed minimum.

use crate::densities::{eval_v, eval_w_on_sl, DensityError, DensityModel, ExtendedEnergy, ModelKind};
use crate::divfree::grid::{for_each_index, lin};
use crate::divfree::{EdgePotential, GridField};
use crate::envelopes::cell::{
    cell_gradients, cell_gradients_transpose, run_multistart,
};
use crate::envelopes::{
    CellDensity, EnvelopeError, FnDensity, NematicEnvelopeDensity, OptimizerOpts,
    QuadraticDensity,
};
use crate::matcore::{matrix_exp, project_dev, Matrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest tolerated deviation of a probed deformation's Jacobian
/// determinant from 1. Energy evaluations reject (as infinite) any
/// coefficient vector whose flow violates this at a quadrature point, so
/// every accepted iterate is incompressible to this budget.
pub const DET_BUDGET: f64 = 1e-6;

/// Boundary matrices must be traceless to this absolute tolerance, or the
/// affine boundary deformation would not be volume preserving.
pub const BC_TRACE_TOL: f64 = 1e-12;

/// Loads must have zero net force and zero first moment to this tolerance
/// (relative to their largest entry).
pub const LOAD_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(
        "no closed-form relaxed density for a {0}-well model; set \
         `multiwell_upper_bound` to minimize the unrelaxed density as an \
         explicit upper bound"
    )]
    NoClosedFormEnvelope(usize),
    #[error(
        "flow determinant residual {residual:.3e} exceeds the {budget:.1e} \
         budget; raise flow_steps"
    )]
    DetResidualExceeded { residual: f64, budget: f64 },
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error(transparent)]
    Density(#[from] DensityError),
}

/// Which part of the boundary carries Dirichlet data. `All` pins the
/// affine values everywhere; `None` is the free-boundary gauge: walls stay
/// impermeable and tangentially pinned at grid scale, which fixes the
/// rigid-motion freedom, and the boundary matrix must be zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirichletPart {
    All,
    None,
}

fn default_dirichlet() -> DirichletPart {
    DirichletPart::All
}

fn default_eps_list() -> Vec<f64> {
    vec![0.2, 0.1, 0.05, 0.025]
}

fn default_flow_steps() -> usize {
    16
}

fn default_modes() -> usize {
    2
}

/// Everything one experiment needs. Deserializes from JSON with defaults
/// for all fields but the model and the resolution; [`ExperimentConfig::resolved`]
/// validates the invariants and materializes the seed into the optimizer
/// options, so a serialized resolved config is complete provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: DensityModel,
    /// Cells per axis of the unit box.
    pub m: usize,
    /// Slope of the affine boundary displacement, `None` meaning zero.
    /// Must be traceless within [`BC_TRACE_TOL`].
    #[serde(default)]
    pub z_bc: Option<Matrix>,
    #[serde(default = "default_dirichlet")]
    pub dirichlet: DirichletPart,
    /// Per-node load vectors in lexicographic node order, or `None`.
    #[serde(default)]
    pub load: Option<Vec<[f64; 3]>>,
    /// Loading scales for the finite-strain ladder.
    #[serde(default = "default_eps_list")]
    pub eps_list: Vec<f64>,
    #[serde(default)]
    pub opts: OptimizerOpts,
    #[serde(default)]
    pub seed: u64,
    /// Runge-Kutta steps per unit time in the flow parameterization.
    #[serde(default = "default_flow_steps")]
    pub flow_steps: usize,
    /// Sine modes per axis in the flow velocity basis.
    #[serde(default = "default_modes")]
    pub modes: usize,
    /// Opt-in for multi-well models: minimize the unrelaxed density and
    /// report it as an upper bound instead of refusing.
    #[serde(default)]
    pub multiwell_upper_bound: bool,
}

impl ExperimentConfig {
    pub fn new(model: DensityModel, m: usize) -> Self {
        ExperimentConfig {
            model,
            m,
            z_bc: None,
            dirichlet: DirichletPart::All,
            load: None,
            eps_list: default_eps_list(),
            opts: OptimizerOpts::default(),
            seed: 0,
            flow_steps: default_flow_steps(),
            modes: default_modes(),
            multiwell_upper_bound: false,
        }
    }

    /// The boundary slope as a matrix, zero when absent.
    pub fn z_bc_matrix(&self) -> Matrix {
        self.z_bc.unwrap_or_else(|| Matrix::zeros(self.model.dim()))
    }

    fn node_extent(&self) -> [usize; 3] {
        let n = self.model.dim();
        [
            self.m + 1,
            self.m + 1,
            if n == 3 { self.m + 1 } else { 1 },
        ]
    }

    fn node_count(&self) -> usize {
        let e = self.node_extent();
        e[0] * e[1] * e[2]
    }

    /// Validates every invariant and returns the defaults-expanded config
    /// with the experiment seed copied into the optimizer options.
    pub fn resolved(mut self) -> Result<Self, SolverError> {
        let n = self.model.dim();
        if n != 2 && n != 3 {
            return Err(SolverError::InvalidConfig(format!(
                "experiments run in 2 or 3 dimensions, model has {n}"
            )));
        }
        if self.m < 2 {
            return Err(SolverError::InvalidConfig(format!(
                "need at least 2 cells per axis, got {}",
                self.m
            )));
        }
        if let Some(z) = &self.z_bc {
            if z.dim() != n {
                return Err(SolverError::InvalidConfig(format!(
                    "boundary matrix is {}x{0}, model is {n}x{n}",
                    z.dim()
                )));
            }
            if z.entries().iter().any(|v| !v.is_finite()) {
                return Err(SolverError::InvalidConfig(
                    "boundary matrix must be finite".into(),
                ));
            }
            if z.trace().abs() > BC_TRACE_TOL {
                return Err(SolverError::InvalidConfig(format!(
                    "boundary matrix trace {:.3e} breaks volume preservation",
                    z.trace()
                )));
            }
            if self.dirichlet == DirichletPart::None && z.norm() > 0.0 {
                return Err(SolverError::InvalidConfig(
                    "free-boundary runs take no boundary matrix".into(),
                ));
            }
        }
        if self.eps_list.is_empty() {
            return Err(SolverError::InvalidConfig("empty loading ladder".into()));
        }
        if self.eps_list.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
            return Err(SolverError::InvalidConfig(
                "loading scales must be positive and finite".into(),
            ));
        }
        if self.flow_steps < 4 {
            return Err(SolverError::InvalidConfig(
                "need at least 4 flow steps".into(),
            ));
        }
        if self.modes == 0 || self.modes > MAX_MODES {
            return Err(SolverError::InvalidConfig(format!(
                "modes per axis must lie in 1..={MAX_MODES}"
            )));
        }
        if self.opts.max_iters == 0 {
            return Err(SolverError::InvalidConfig(
                "optimizer needs at least one iteration".into(),
            ));
        }
        self.validate_load()?;
        self.opts.seed = self.seed;
        Ok(self)
    }

    fn validate_load(&self) -> Result<(), SolverError> {
        let load = match &self.load {
            Some(l) => l,
            None => return Ok(()),
        };
        let n = self.model.dim();
        let nodes = self.node_count();
        if load.len() != nodes {
            return Err(SolverError::InvalidConfig(format!(
                "load has {} entries, the grid has {nodes} nodes",
                load.len()
            )));
        }
        let mut linf = 0.0f64;
        for l in load {
            for c in 0..3 {
                if !l[c].is_finite() {
                    return Err(SolverError::InvalidConfig(
                        "load entries must be finite".into(),
                    ));
                }
                if c >= n && l[c] != 0.0 {
                    return Err(SolverError::InvalidConfig(
                        "planar loads must have a zero out-of-plane component".into(),
                    ));
                }
                linf = linf.max(l[c].abs());
            }
        }
        let h = 1.0 / self.m as f64;
        let hn = h.powi(n as i32);
        let ext = self.node_extent();
        let mut force = [0.0f64; 3];
        let mut moment = [[0.0f64; 3]; 3];
        let mut nodes_list = Vec::new();
        for_each_index(ext, |idx| nodes_list.push(idx));
        for idx in nodes_list {
            let l = load[lin(idx, ext)];
            for c in 0..n {
                force[c] += l[c] * hn;
                for a in 0..n {
                    moment[c][a] += l[c] * (idx[a] as f64 * h) * hn;
                }
            }
        }
        let tol = LOAD_TOL * (1.0 + linf);
        for c in 0..n {
            if force[c].abs() > tol {
                return Err(SolverError::InvalidConfig(format!(
                    "net load force component {c} is {:.3e}",
                    force[c]
                )));
            }
            for a in 0..n {
                if moment[c][a].abs() > tol {
                    return Err(SolverError::InvalidConfig(format!(
                        "load first moment ({c},{a}) is {:.3e}",
                        moment[c][a]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The relaxed density matching a model: the closed-form envelope where one
/// is known, the density itself where it is already relaxed, and an
/// explicit refusal otherwise.
fn relaxed_density(config: &ExperimentConfig) -> Result<Box<dyn CellDensity>, SolverError> {
    let n = config.model.dim();
    match &config.model.kind {
        ModelKind::Nematic(nm) => Ok(Box::new(NematicEnvelopeDensity::new(nm.rho())?)),
        ModelKind::SingleWell(sw) if sw.builtin_name() == Some("dist2-sl") => {
            // Half the quadratic 2||Z||^2; convex, hence its own relaxation.
            Ok(Box::new(QuadraticDensity::new(n, 1.0)))
        }
        ModelKind::SingleWell(_) => {
            let model = config.model.clone();
            // Projecting out the trace keeps finite-difference probes (which
            // perturb single entries) inside the density's traceless domain.
            Ok(Box::new(FnDensity::new(n, move |x: &Matrix| {
                let z = project_dev(x).into_matrix();
                eval_v(&model, &z).map(|e| e.as_f64()).unwrap_or(f64::INFINITY)
            })))
        }
        ModelKind::MultiWell(mw) => {
            let wells = mw.wells().len();
            if wells >= 2 && !config.multiwell_upper_bound {
                return Err(SolverError::NoClosedFormEnvelope(wells));
            }
            // One well is a convex quadratic in the strain, hence already
            // relaxed; with several wells the caller asked for the
            // unrelaxed density as an upper bound.
            let model = config.model.clone();
            Ok(Box::new(FnDensity::new(n, move |x: &Matrix| {
                let z = project_dev(x).into_matrix();
                eval_v(&model, &z).map(|e| e.as_f64()).unwrap_or(f64::INFINITY)
            })))
        }
    }
}

/// Outcome of the relaxed minimization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelaxedSolution {
    /// Minimal relaxed energy including the load term.
    pub energy: f64,
    /// Energy of the bare affine displacement, an upper bound.
    pub affine_energy: f64,
    /// Total displacement (affine plus solenoidal correction) on faces.
    pub displacement: GridField,
    pub iterations: usize,
    pub converged: bool,
    pub starts: usize,
}

/// For each node and component, the adjacent faces of that component with
/// a uniform averaging weight (nearest faces at walls).
fn node_face_stencil(
    n: usize,
    m: usize,
    c: usize,
    node: [usize; 3],
) -> (Vec<[usize; 3]>, f64) {
    let mut faces = vec![[node[0], node[1], node[2]]];
    for a in 0..n {
        if a == c {
            continue;
        }
        let mut next = Vec::with_capacity(faces.len() * 2);
        for f in &faces {
            if node[a] > 0 {
                let mut lo = *f;
                lo[a] = node[a] - 1;
                next.push(lo);
            }
            if node[a] < m {
                next.push(*f);
            }
        }
        faces = next;
    }
    let w = 1.0 / faces.len() as f64;
    (faces, w)
}

/// Minimizes the relaxed energy over displacements `u = Z_bc x + curl psi`
/// with pinned boundary edges: candidates are discretely solenoidal and
/// carry the affine boundary values. The load term `- sum l . u h^n` uses
/// face-to-node averaged displacements.
pub fn minimize_f_rel(config: &ExperimentConfig) -> Result<RelaxedSolution, SolverError> {
    let config = config.clone().resolved()?;
    let density = relaxed_density(&config)?;
    let n = config.model.dim();
    let m = config.m;
    let h = 1.0 / m as f64;
    let hn = h.powi(n as i32);
    let cells = if n == 3 { m * m * m } else { m * m };
    let cext = [m, m, if n == 3 { m } else { 1 }];
    let node_ext = config.node_extent();
    let zbc = config.z_bc_matrix();

    let dofs = EdgePotential::interior_edges(n, m);
    let mut psi = EdgePotential::zeros(n, m);
    let mut grads = vec![Matrix::zeros(n); cells];
    let mut cots = vec![Matrix::zeros(n); cells];
    let mut face_adj = GridField::zeros(n, m);
    let mut node_idx = Vec::new();
    for_each_index(node_ext, |idx| node_idx.push(idx));

    let load = config.load.clone();
    let mut objective = |x: &[f64], g: &mut [f64]| -> f64 {
        for (k, (c, idx)) in dofs.iter().enumerate() {
            psi.set_value(*c, *idx, x[k]);
        }
        let field = psi.curl();
        cell_gradients(&field, &mut grads);
        let mut energy = 0.0;
        let mut finite = true;
        for (i, gx) in grads.iter().enumerate() {
            let x_total = zbc + *gx;
            let v = density.value(&x_total);
            if !v.is_finite() {
                finite = false;
                break;
            }
            energy += hn * v;
            cots[i] = density.grad(&x_total).scale(hn);
        }
        if !finite {
            g.fill(0.0);
            return f64::INFINITY;
        }
        cell_gradients_transpose(&cots, &mut face_adj);
        if let Some(l) = &load {
            for idx in &node_idx {
                let lv = l[lin(*idx, node_ext)];
                for c in 0..n {
                    if lv[c] == 0.0 {
                        continue;
                    }
                    let mut u = 0.0;
                    for a in 0..n {
                        u += zbc[(c, a)] * idx[a] as f64 * h;
                    }
                    let (faces, w) = node_face_stencil(n, m, c, *idx);
                    let e = field.extents(c);
                    for f in &faces {
                        u += w * field.face(c, *f);
                    }
                    energy -= hn * lv[c] * u;
                    // Adjoint of the averaged work term.
                    let comp = face_adj.component_mut(c);
                    for f in &faces {
                        comp[lin(*f, e)] -= hn * lv[c] * w;
                    }
                }
            }
        }
        let edge_adj = EdgePotential::curl_transpose(&face_adj);
        for (k, (c, idx)) in dofs.iter().enumerate() {
            g[k] = edge_adj.value(*c, *idx);
        }
        energy
    };

    let mut scratch = vec![0.0; dofs.len()];
    let affine_energy = objective(&vec![0.0; dofs.len()], &mut scratch);
    if !affine_energy.is_finite() {
        return Err(SolverError::InvalidConfig(
            "the affine boundary displacement already has infinite energy".into(),
        ));
    }
    let (best, runs) = run_multistart(dofs.len(), &config.opts, affine_energy, None, &mut objective)?;
    for (k, (c, idx)) in dofs.iter().enumerate() {
        psi.set_value(*c, *idx, best.x[k]);
    }
    let curl_part = psi.curl();
    let mut displacement = GridField::zeros(n, m);
    for c in 0..n {
        let mut faces = Vec::new();
        for_each_index(displacement.extents(c), |idx| faces.push(idx));
        for idx in faces {
            let x = displacement.face_center(c, idx);
            let mut affine = 0.0;
            for a in 0..n {
                affine += zbc[(c, a)] * x[a];
            }
            displacement.set_face(c, idx, affine + curl_part.face(c, idx));
        }
    }
    displacement.refresh_mask();
    let _ = cext;
    Ok(RelaxedSolution {
        energy: best.value,
        affine_energy,
        displacement,
        iterations: best.iterations,
        converged: best.converged,
        starts: runs,
    })
}

/// Upper bound on the mode count per axis; the basis size grows as its
/// n-th power, so this is a cost guard, not a capability limit.
pub const MAX_MODES: usize = 4;

/// Product-of-sines velocity potentials. Every factor vanishes at the
/// walls, so the curl velocity vanishes there identically: trajectories
/// cannot leave the box and the affine boundary values are exact.
struct ModeBasis {
    n: usize,
    kmax: usize,
}

impl ModeBasis {
    fn ncomp(&self) -> usize {
        if self.n == 3 {
            3
        } else {
            1
        }
    }

    fn kcount(&self) -> usize {
        self.kmax.pow(self.n as u32)
    }

    fn ncoeff(&self) -> usize {
        self.ncomp() * self.kcount()
    }

    /// `(f, f', f'')` of `sin(pi x) sin(pi k x)` for `k = 1..=kmax`.
    fn axis_table(x: f64, kmax: usize) -> [(f64, f64, f64); MAX_MODES] {
        let pi = std::f64::consts::PI;
        let (s1, c1) = (pi * x).sin_cos();
        let mut out = [(0.0, 0.0, 0.0); MAX_MODES];
        for k in 1..=kmax {
            let kf = k as f64;
            let (sk, ck) = (pi * kf * x).sin_cos();
            out[k - 1] = (
                s1 * sk,
                pi * (c1 * sk + kf * s1 * ck),
                pi * pi * (2.0 * kf * c1 * ck - (1.0 + kf * kf) * s1 * sk),
            );
        }
        out
    }

    /// Velocity and its spatial gradient at `y` for the given coefficients.
    fn velocity_and_grad(&self, coeffs: &[f64], y: [f64; 3]) -> ([f64; 3], Matrix) {
        let n = self.n;
        let mut tabs = [[(0.0f64, 0.0f64, 0.0f64); MAX_MODES]; 3];
        for (a, tab) in tabs.iter_mut().enumerate().take(n) {
            *tab = Self::axis_table(y[a], self.kmax);
        }
        let mut v = [0.0f64; 3];
        let mut gv = Matrix::zeros(n);
        let kc = self.kcount();
        for cc in 0..self.ncomp() {
            for kflat in 0..kc {
                let w = coeffs[cc * kc + kflat];
                if w == 0.0 {
                    continue;
                }
                let mut kidx = [0usize; 3];
                let mut rem = kflat;
                for k in kidx.iter_mut().take(n) {
                    *k = rem % self.kmax;
                    rem /= self.kmax;
                }
                // First and second partials of the potential mode.
                let mut d1 = [0.0f64; 3];
                let mut d2 = [[0.0f64; 3]; 3];
                for b in 0..n {
                    let mut p1 = w;
                    for a in 0..n {
                        let (f, f1, _) = tabs[a][kidx[a]];
                        p1 *= if a == b { f1 } else { f };
                    }
                    d1[b] = p1;
                    for e in 0..n {
                        let mut p2 = w;
                        for a in 0..n {
                            let (f, f1, f2) = tabs[a][kidx[a]];
                            p2 *= if a == b && a == e {
                                f2
                            } else if a == b || a == e {
                                f1
                            } else {
                                f
                            };
                        }
                        d2[e][b] = p2;
                    }
                }
                if n == 2 {
                    v[0] += d1[1];
                    v[1] -= d1[0];
                    for e in 0..2 {
                        gv[(0, e)] += d2[e][1];
                        gv[(1, e)] -= d2[e][0];
                    }
                } else {
                    let vp = (cc + 1) % 3;
                    let vm = (cc + 2) % 3;
                    v[vp] += d1[vm];
                    v[vm] -= d1[vp];
                    for e in 0..3 {
                        gv[(vp, e)] += d2[e][vm];
                        gv[(vm, e)] -= d2[e][vp];
                    }
                }
            }
        }
        (v, gv)
    }
}

/// One finite-strain minimization at a fixed loading scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpsSolution {
    pub eps: f64,
    /// Rescaled energy of the best deformation found (including loads).
    pub energy: f64,
    /// Worst `|det grad y - 1|` of the reported minimizer over quadrature
    /// points and grid nodes.
    pub det_residual: f64,
    /// Rescaled displacement `(y(x) - x) / eps` on the staggered faces.
    pub displacement: GridField,
    /// Velocity-potential coefficients of the minimizer.
    pub coefficients: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub starts: usize,
}

struct EpsProblem<'a> {
    model: &'a DensityModel,
    basis: ModeBasis,
    expz: Matrix,
    eps: f64,
    steps: usize,
    m: usize,
    load: Option<&'a [[f64; 3]]>,
    node_ext: [usize; 3],
}

impl EpsProblem<'_> {
    fn n(&self) -> usize {
        self.basis.n
    }

    /// Integrates the position and its Jacobian under the mode velocity:
    /// `dy = eps v(y) dt`, `dJ = eps grad v(y) J dt`, classical fourth
    /// order, unit time.
    fn flow_with_jacobian(&self, coeffs: &[f64], x0: [f64; 3]) -> ([f64; 3], Matrix) {
        let n = self.n();
        let dt = 1.0 / self.steps as f64;
        let mut y = x0;
        let mut jac = Matrix::identity(n);
        let deriv = |y: [f64; 3], jac: &Matrix| -> ([f64; 3], Matrix) {
            let (v, gv) = self.basis.velocity_and_grad(coeffs, y);
            (
                [self.eps * v[0], self.eps * v[1], self.eps * v[2]],
                (gv * *jac).scale(self.eps),
            )
        };
        let shift = |y: [f64; 3], dy: [f64; 3], s: f64| {
            let mut z = y;
            for a in 0..n {
                z[a] += s * dy[a];
            }
            z
        };
        for _ in 0..self.steps {
            let (k1, m1) = deriv(y, &jac);
            let (k2, m2) = deriv(shift(y, k1, 0.5 * dt), &(jac + m1.scale(0.5 * dt)));
            let (k3, m3) = deriv(shift(y, k2, 0.5 * dt), &(jac + m2.scale(0.5 * dt)));
            let (k4, m4) = deriv(shift(y, k3, dt), &(jac + m3.scale(dt)));
            for a in 0..n {
                y[a] += dt / 6.0 * (k1[a] + 2.0 * (k2[a] + k3[a]) + k4[a]);
            }
            jac = jac + (m1 + (m2 + m3).scale(2.0) + m4).scale(dt / 6.0);
        }
        (y, jac)
    }

    /// Rescaled energy and the worst determinant residual over quadrature
    /// points; infinite when any point breaks the budget or the density.
    fn energy(&self, coeffs: &[f64]) -> (f64, f64) {
        let n = self.n();
        let m = self.m;
        let h = 1.0 / m as f64;
        let hn = h.powi(n as i32);
        let cext = [m, m, if n == 3 { m } else { 1 }];
        let mut centers = Vec::new();
        for_each_index(cext, |idx| centers.push(idx));
        let mut acc = 0.0;
        let mut worst = 0.0f64;
        for idx in centers {
            let mut x = [0.0; 3];
            for a in 0..n {
                x[a] = (idx[a] as f64 + 0.5) * h;
            }
            let (_, jac) = self.flow_with_jacobian(coeffs, x);
            let f = self.expz * jac;
            let det = f.det();
            let r = (det - 1.0).abs();
            worst = worst.max(r);
            if r > DET_BUDGET {
                return (f64::INFINITY, worst);
            }
            // The flow keeps the determinant within the budget; the exact
            // unit-determinant representative absorbs the residual so the
            // density's own (much tighter) incompressibility gate cannot
            // trip on integrator noise.
            let fhat = f.scale(det.powf(-1.0 / n as f64));
            match eval_w_on_sl(self.model, self.eps, &fhat) {
                ExtendedEnergy::Finite(w) => acc += hn * w,
                ExtendedEnergy::Infinite => return (f64::INFINITY, worst),
            }
        }
        let mut e = acc / self.eps.powf(self.model.p);
        if let Some(l) = self.load {
            let mut nodes = Vec::new();
            for_each_index(self.node_ext, |idx| nodes.push(idx));
            for idx in nodes {
                let lv = l[lin(idx, self.node_ext)];
                if lv[..n].iter().all(|v| *v == 0.0) {
                    continue;
                }
                let mut x = [0.0; 3];
                for a in 0..n {
                    x[a] = idx[a] as f64 * h;
                }
                let (yf, _) = self.flow_with_jacobian(coeffs, x);
                let y = self.expz.apply(&yf[..n]);
                for c in 0..n {
                    e -= hn * lv[c] * (y[c] - x[c]) / self.eps;
                }
            }
        }
        (e, worst)
    }

    /// Residual probe over the grid nodes (the quadrature points are
    /// already covered by [`EpsProblem::energy`]).
    fn node_residual(&self, coeffs: &[f64]) -> f64 {
        let n = self.n();
        let h = 1.0 / self.m as f64;
        let mut nodes = Vec::new();
        for_each_index(self.node_ext, |idx| nodes.push(idx));
        let mut worst = 0.0f64;
        for idx in nodes {
            let mut x = [0.0; 3];
            for a in 0..n {
                x[a] = idx[a] as f64 * h;
            }
            let (_, jac) = self.flow_with_jacobian(coeffs, x);
            worst = worst.max(((self.expz * jac).det() - 1.0).abs());
        }
        worst
    }

    fn displacement(&self, coeffs: &[f64]) -> GridField {
        let n = self.n();
        let mut disp = GridField::zeros(n, self.m);
        for c in 0..n {
            let mut faces = Vec::new();
            for_each_index(disp.extents(c), |idx| faces.push(idx));
            for idx in faces {
                let x = disp.face_center(c, idx);
                let (yf, _) = self.flow_with_jacobian(coeffs, x);
                let y = self.expz.apply(&yf[..n]);
                disp.set_face(c, idx, (y[c] - x[c]) / self.eps);
            }
        }
        disp.refresh_mask();
        disp
    }
}

/// Minimizes the rescaled finite-strain energy at one loading scale over
/// exactly incompressible deformations `y = exp(eps Z_bc) . flow(x)`: the
/// flow factor is the unit-time map of an optimizable solenoidal velocity
/// that vanishes on the walls, so the boundary values are affine and the
/// Jacobian determinant stays within [`DET_BUDGET`] by construction.
/// Gradients over the mode coefficients are central finite differences.
pub fn minimize_f_eps(config: &ExperimentConfig, eps: f64) -> Result<EpsSolution, SolverError> {
    let config = config.clone().resolved()?;
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(SolverError::InvalidConfig(format!(
            "loading scale must be positive and finite, got {eps}"
        )));
    }
    let n = config.model.dim();
    let problem = EpsProblem {
        model: &config.model,
        basis: ModeBasis {
            n,
            kmax: config.modes,
        },
        expz: matrix_exp(&config.z_bc_matrix().scale(eps)),
        eps,
        steps: config.flow_steps,
        m: config.m,
        load: config.load.as_deref(),
        node_ext: config.node_extent(),
    };
    let ncoeff = problem.basis.ncoeff();

    let mut objective = |a: &[f64], g: &mut [f64]| -> f64 {
        let (v0, _) = problem.energy(a);
        if !v0.is_finite() {
            g.fill(0.0);
            return f64::INFINITY;
        }
        let mut probe = a.to_vec();
        for j in 0..a.len() {
            let step = 1e-5 * (1.0 + a[j].abs());
            probe[j] = a[j] + step;
            let (vp, _) = problem.energy(&probe);
            probe[j] = a[j] - step;
            let (vm, _) = problem.energy(&probe);
            probe[j] = a[j];
            g[j] = if vp.is_finite() && vm.is_finite() {
                (vp - vm) / (2.0 * step)
            } else if vp.is_finite() {
                (vp - v0) / step
            } else if vm.is_finite() {
                (v0 - vm) / step
            } else {
                0.0
            };
        }
        v0
    };

    let (base_value, _) = problem.energy(&vec![0.0; ncoeff]);
    if !base_value.is_finite() {
        return Err(SolverError::DetResidualExceeded {
            residual: problem.energy(&vec![0.0; ncoeff]).1,
            budget: DET_BUDGET,
        });
    }
    let (best, runs) = run_multistart(ncoeff, &config.opts, base_value, None, &mut objective)?;
    let (energy, cell_residual) = problem.energy(&best.x);
    let det_residual = cell_residual.max(problem.node_residual(&best.x));
    if det_residual > DET_BUDGET {
        return Err(SolverError::DetResidualExceeded {
            residual: det_residual,
            budget: DET_BUDGET,
        });
    }
    Ok(EpsSolution {
        eps,
        energy,
        det_residual,
        displacement: problem.displacement(&best.x),
        coefficients: best.x,
        iterations: best.iterations,
        converged: best.converged,
        starts: runs,
    })
}

/// One comparison row of the convergence ladder. The gap is signed and
/// never clamped: finite-scale infima may sit on either side of the
/// relaxed minimum.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EnergyRow {
    pub eps: f64,
    pub e_eps: f64,
    pub e_rel: f64,
    pub gap: f64,
}

/// Full ladder outcome: the relaxed minimum, one finite-strain solution
/// per loading scale, the gap table, and a least-squares estimate of the
/// gap's decay order in the loading scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyReport {
    pub relaxed: RelaxedSolution,
    pub rows: Vec<EnergyRow>,
    pub scaled: Vec<EpsSolution>,
    pub fitted_order: Option<f64>,
}

fn fit_order(rows: &[EnergyRow]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.gap.abs() > 1e-14)
        .map(|r| (r.eps.ln(), r.gap.abs().ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-12 {
        return None;
    }
    Some((n * sxy - sx * sy) / denom)
}

/// Runs the relaxed minimization once and the finite-strain minimization
/// at every scale in the config's ladder, reporting the signed gaps and
/// their fitted decay order.
pub fn convergence_experiment(config: &ExperimentConfig) -> Result<EnergyReport, SolverError> {
    let config = config.clone().resolved()?;
    let relaxed = minimize_f_rel(&config)?;
    let mut rows = Vec::with_capacity(config.eps_list.len());
    let mut scaled = Vec::with_capacity(config.eps_list.len());
    for &eps in &config.eps_list {
        let sol = minimize_f_eps(&config, eps)?;
        rows.push(EnergyRow {
            eps,
            e_eps: sol.energy,
            e_rel: relaxed.energy,
            gap: sol.energy - relaxed.energy,
        });
        scaled.push(sol);
    }
    let fitted_order = fit_order(&rows);
    Ok(EnergyReport {
        relaxed,
        rows,
        scaled,
        fitted_order,
    })
}
