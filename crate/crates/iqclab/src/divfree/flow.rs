//! Volume-preserving flow maps of solenoidal velocity fields.

use super::grid::{for_each_index, lin, GridField};
use super::DivError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Half-width of the central-difference stencil used to probe the flow
/// map's Jacobian. Small enough that the finite-difference truncation
/// error sits near 1e-9 for order-one third derivatives, while staying
/// far above the roundoff floor.
pub const DET_PROBE_OFFSET: f64 = 1e-5;

/// Trajectories may overshoot a bounded field's domain by this much
/// before the integration is abandoned.
pub const DOMAIN_MARGIN: f64 = 1e-3;

/// A velocity field the integrator can sample anywhere (or anywhere in a
/// declared box).
pub trait VelocityField {
    fn dim(&self) -> usize;
    /// Velocity at `x`; the third coordinate is ignored (and the third
    /// output zero) in two dimensions.
    fn eval(&self, x: [f64; 3]) -> [f64; 3];
    /// Per-coordinate domain, or `None` for fields defined everywhere.
    fn domain_bounds(&self) -> Option<(f64, f64)> {
        None
    }
}

/// Component-wise multilinear interpolation of a staggered grid field.
/// Sample positions are clamped to the box, so querying within the
/// overshoot margin is safe.
pub struct GridInterpolant<'a> {
    field: &'a GridField,
}

impl<'a> GridInterpolant<'a> {
    pub fn new(field: &'a GridField) -> Self {
        GridInterpolant { field }
    }

    fn sample_component(&self, c: usize, x: [f64; 3]) -> f64 {
        let n = self.field.dim();
        let h = self.field.spacing();
        let e = self.field.extents(c);
        // Base index and weight along each axis of the component's own
        // lattice: face positions along axis c, cell centers elsewhere.
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..n {
            let t = if a == c { x[a] / h } else { x[a] / h - 0.5 };
            let max_base = e[a] - 2;
            let fl = t.floor();
            let mut i = fl as isize;
            let mut w = t - fl;
            if i < 0 {
                i = 0;
                w = 0.0;
            } else if i as usize > max_base {
                i = max_base as isize;
                w = 1.0;
            }
            base[a] = i as usize;
            frac[a] = w;
        }
        let comp = self.field.component(c);
        let mut acc = 0.0;
        let corners = 1usize << n;
        for corner in 0..corners {
            let mut idx = base;
            let mut weight = 1.0;
            for a in 0..n {
                if corner >> a & 1 == 1 {
                    idx[a] += 1;
                    weight *= frac[a];
                } else {
                    weight *= 1.0 - frac[a];
                }
            }
            acc += weight * comp[lin(idx, e)];
        }
        acc
    }
}

impl VelocityField for GridInterpolant<'_> {
    fn dim(&self) -> usize {
        self.field.dim()
    }

    fn eval(&self, x: [f64; 3]) -> [f64; 3] {
        let n = self.field.dim();
        let mut xc = x;
        for a in 0..n {
            xc[a] = xc[a].clamp(0.0, 1.0);
        }
        let mut u = [0.0; 3];
        for c in 0..n {
            u[c] = self.sample_component(c, xc);
        }
        u
    }

    fn domain_bounds(&self) -> Option<(f64, f64)> {
        Some((0.0, 1.0))
    }
}

struct SineTerm {
    amp: f64,
    k: [f64; 3],
    phase: [f64; 3],
}

impl SineTerm {
    fn partial(&self, n: usize, b: usize, x: [f64; 3]) -> f64 {
        let mut prod = self.amp;
        for a in 0..n {
            let th = std::f64::consts::PI * self.k[a] * x[a] + self.phase[a];
            prod *= if a == b {
                std::f64::consts::PI * self.k[a] * th.cos()
            } else {
                th.sin()
            };
        }
        prod
    }
}

/// Smooth random solenoidal field defined on all of space: the exact curl
/// of a band-limited random potential, so its divergence vanishes as an
/// identity rather than to grid accuracy.
pub struct AnalyticSolenoidal {
    n: usize,
    series: Vec<Vec<SineTerm>>,
}

impl AnalyticSolenoidal {
    /// `modes` per axis, amplitudes damped by `||k||^-smoothness` and
    /// scaled by `amplitude`.
    pub fn new(n: usize, modes: usize, smoothness: f64, amplitude: f64, seed: u64) -> Self {
        assert!(n == 2 || n == 3, "only 2- and 3-dimensional fields exist");
        assert!(modes >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ncomp = if n == 3 { 3 } else { 1 };
        let mut series = Vec::with_capacity(ncomp);
        for _ in 0..ncomp {
            let mut terms = Vec::new();
            let mut push = |k: [usize; 3], rng: &mut ChaCha8Rng| {
                let knorm = ((k[0] * k[0] + k[1] * k[1] + k[2] * k[2]) as f64).sqrt();
                terms.push(SineTerm {
                    amp: amplitude * rng.gen_range(-1.0..1.0) / knorm.powf(smoothness),
                    k: [k[0] as f64, k[1] as f64, k[2] as f64],
                    phase: [
                        rng.gen_range(0.0..std::f64::consts::TAU),
                        rng.gen_range(0.0..std::f64::consts::TAU),
                        rng.gen_range(0.0..std::f64::consts::TAU),
                    ],
                });
            };
            if n == 2 {
                for k0 in 1..=modes {
                    for k1 in 1..=modes {
                        push([k0, k1, 0], &mut rng);
                    }
                }
            } else {
                for k0 in 1..=modes {
                    for k1 in 1..=modes {
                        for k2 in 1..=modes {
                            push([k0, k1, k2], &mut rng);
                        }
                    }
                }
            }
            series.push(terms);
        }
        AnalyticSolenoidal { n, series }
    }
}

impl VelocityField for AnalyticSolenoidal {
    fn dim(&self) -> usize {
        self.n
    }

    fn eval(&self, x: [f64; 3]) -> [f64; 3] {
        let mut u = [0.0; 3];
        if self.n == 2 {
            // (u0, u1) = (d psi / d x1, -d psi / d x0).
            for t in &self.series[0] {
                u[0] += t.partial(2, 1, x);
                u[1] -= t.partial(2, 0, x);
            }
            return u;
        }
        for a in 0..3 {
            let (b, c) = ((a + 1) % 3, (a + 2) % 3);
            let mut acc = 0.0;
            for t in &self.series[c] {
                acc += t.partial(3, b, x);
            }
            for t in &self.series[b] {
                acc -= t.partial(3, c, x);
            }
            u[a] = acc;
        }
        u
    }
}

fn check_domain(
    u: &dyn VelocityField,
    y: [f64; 3],
    time: f64,
) -> Result<(), DivError> {
    if let Some((lo, hi)) = u.domain_bounds() {
        for a in 0..u.dim() {
            if y[a] < lo - DOMAIN_MARGIN || y[a] > hi + DOMAIN_MARGIN {
                return Err(DivError::DomainEscape { position: y, time });
            }
        }
    }
    Ok(())
}

/// Integrates `dy/dt = eps * u(y)` from `x` over unit time with `steps`
/// classical Runge-Kutta steps.
pub fn flow_point(
    u: &dyn VelocityField,
    eps: f64,
    steps: usize,
    x: [f64; 3],
) -> Result<[f64; 3], DivError> {
    if steps == 0 {
        return Err(DivError::InvalidParameter("need at least one step".into()));
    }
    if !eps.is_finite() {
        return Err(DivError::InvalidParameter("scale must be finite".into()));
    }
    let n = u.dim();
    let dt = 1.0 / steps as f64;
    let mut y = x;
    check_domain(u, y, 0.0)?;
    let scaled = |v: [f64; 3]| [eps * v[0], eps * v[1], eps * v[2]];
    let at = |y: [f64; 3], k: [f64; 3], s: f64| {
        let mut z = y;
        for a in 0..n {
            z[a] += s * k[a];
        }
        z
    };
    for step in 0..steps {
        let k1 = scaled(u.eval(y));
        let k2 = scaled(u.eval(at(y, k1, 0.5 * dt)));
        let k3 = scaled(u.eval(at(y, k2, 0.5 * dt)));
        let k4 = scaled(u.eval(at(y, k3, dt)));
        for a in 0..n {
            y[a] += dt / 6.0 * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a]);
        }
        check_domain(u, y, (step + 1) as f64 * dt)?;
    }
    Ok(y)
}

/// A flow map sampled on a grid.
#[derive(Debug, Clone, serde::Serialize)]
pub struct FlowReport {
    pub eps: f64,
    pub steps: usize,
    /// Rescaled displacement `(flow(x) - x) / eps` on the staggered grid.
    pub displacement: GridField,
    /// Worst deviation of the flow's Jacobian determinant from 1, probed
    /// by central differences of width [`DET_PROBE_OFFSET`] at every grid
    /// node.
    pub det_residual: f64,
}

/// Flows every face center and grid node of an `m`-cell grid, returning
/// the rescaled displacement field and the worst volume distortion.
pub fn flow_map(
    u: &dyn VelocityField,
    eps: f64,
    steps: usize,
    m: usize,
) -> Result<FlowReport, DivError> {
    if eps == 0.0 {
        return Err(DivError::InvalidParameter("scale must be nonzero".into()));
    }
    if m < 2 {
        return Err(DivError::InvalidParameter("need at least 2 cells".into()));
    }
    let n = u.dim();
    let h = 1.0 / m as f64;

    let mut displacement = GridField::zeros(n, m);
    for c in 0..n {
        let e = displacement.extents(c);
        let mut faces = Vec::new();
        for_each_index(e, |idx| faces.push(idx));
        for idx in faces {
            let x = displacement.face_center(c, idx);
            let y = flow_point(u, eps, steps, x)?;
            displacement.set_face(c, idx, (y[c] - x[c]) / eps);
        }
    }
    displacement.refresh_mask();

    let mut det_residual = 0.0f64;
    let node_ext = [m + 1, m + 1, if n == 3 { m + 1 } else { 1 }];
    let mut nodes = Vec::new();
    for_each_index(node_ext, |idx| nodes.push(idx));
    // Probe stencils stay inside a declared domain (one-sided at walls);
    // a clamped outside probe would halve the reported normal derivative.
    let (lo, hi) = u.domain_bounds().unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
    for idx in nodes {
        let mut x = [0.0; 3];
        for a in 0..n {
            x[a] = idx[a] as f64 * h;
        }
        let mut jac = [[0.0f64; 3]; 3];
        for a in 0..n {
            let mut xp = x;
            xp[a] = (x[a] + DET_PROBE_OFFSET).min(hi);
            let mut xm = x;
            xm[a] = (x[a] - DET_PROBE_OFFSET).max(lo);
            let yp = flow_point(u, eps, steps, xp)?;
            let ym = flow_point(u, eps, steps, xm)?;
            for r in 0..n {
                jac[r][a] = (yp[r] - ym[r]) / (xp[a] - xm[a]);
            }
        }
        let det = if n == 2 {
            jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0]
        } else {
            jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1])
                - jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0])
                + jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0])
        };
        det_residual = det_residual.max((det - 1.0).abs());
    }

    Ok(FlowReport {
        eps,
        steps,
        displacement,
        det_residual,
    })
}
