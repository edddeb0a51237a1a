//! Divergence removal, solenoidal extension, and random solenoidal
//! samples.

use super::grid::{discrete_div, div_l2_norm, for_each_index, lin, EdgePotential, GridField};
use super::DivError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Result of subtracting a gradient to remove divergence.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CorrectionReport {
    /// Corrected field: same wall values, divergence at solver tolerance.
    pub field: GridField,
    /// `h^(n/2)`-weighted norm of the input's divergence.
    pub input_div: f64,
    /// Divergence norm left after the correction.
    pub residual_div: f64,
    /// Norm of the correction itself, `||g - f||`.
    pub correction_norm: f64,
    /// `correction_norm / input_div`: the observed stability constant of
    /// the correction operator (0 when the input was already solenoidal).
    pub stability_ratio: f64,
    pub cg_iterations: usize,
}

/// Result of extending a solenoidal field to a larger concentric box.
#[derive(Debug, Clone)]
pub struct ExtensionReport {
    /// Field on the larger grid (its own unit cube with `outer_m` cells).
    pub field: GridField,
    /// The input occupies the centered block starting at this cell offset
    /// along every axis; on the block's faces the values agree bitwise.
    pub offset: usize,
    pub inner_m: usize,
    pub residual_div: f64,
    pub cg_iterations: usize,
}

/// Applies the cell-centered Neumann Laplacian `L = -div grad` restricted
/// to `active` cells; faces touching an inactive cell or the wall carry no
/// flux.
fn apply_laplacian(
    n: usize,
    m: usize,
    active: &[bool],
    p: &[f64],
    out: &mut [f64],
) {
    let cext = [m, m, if n == 3 { m } else { 1 }];
    let h2 = (m * m) as f64; // 1/h^2
    out.fill(0.0);
    for_each_index(cext, |idx| {
        let i = lin(idx, cext);
        if !active[i] {
            return;
        }
        let mut acc = 0.0;
        for c in 0..n {
            if idx[c] > 0 {
                let mut nb = idx;
                nb[c] -= 1;
                let j = lin(nb, cext);
                if active[j] {
                    acc += p[i] - p[j];
                }
            }
            if idx[c] + 1 < m {
                let mut nb = idx;
                nb[c] += 1;
                let j = lin(nb, cext);
                if active[j] {
                    acc += p[i] - p[j];
                }
            }
        }
        out[i] = acc * h2;
    });
}

/// Conjugate gradients on the singular Neumann system `L p = b` over the
/// active cells. `b` is projected onto mean zero (the solvable subspace)
/// before iterating; the returned `p` is mean-free over active cells.
fn solve_neumann_poisson(
    n: usize,
    m: usize,
    active: &[bool],
    b: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<(Vec<f64>, usize), DivError> {
    let count = active.iter().filter(|a| **a).count();
    if count == 0 {
        return Ok((vec![0.0; b.len()], 0));
    }
    let project = |v: &mut [f64]| {
        let mean: f64 = v
            .iter()
            .zip(active)
            .filter(|(_, a)| **a)
            .map(|(x, _)| *x)
            .sum::<f64>()
            / count as f64;
        for (x, a) in v.iter_mut().zip(active) {
            if *a {
                *x -= mean;
            } else {
                *x = 0.0;
            }
        }
    };
    let mut rhs = b.to_vec();
    project(&mut rhs);

    let nrm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let stop = tol * (1.0 + nrm(&rhs));

    let mut p_sol = vec![0.0; b.len()];
    let mut r = rhs;
    let mut d = r.clone();
    let mut ap = vec![0.0; b.len()];
    let mut rr: f64 = r.iter().map(|x| x * x).sum();
    let mut iters = 0;
    while rr.sqrt() > stop && iters < max_iters {
        apply_laplacian(n, m, active, &d, &mut ap);
        let dad: f64 = d.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if dad <= 0.0 {
            // Direction fell into the kernel (constants); project it away.
            project(&mut d);
            let dd: f64 = d.iter().map(|x| x * x).sum();
            if dd == 0.0 {
                break;
            }
            iters += 1;
            continue;
        }
        let alpha = rr / dad;
        for i in 0..p_sol.len() {
            p_sol[i] += alpha * d[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new: f64 = r.iter().map(|x| x * x).sum();
        let beta = rr_new / rr;
        for i in 0..d.len() {
            d[i] = r[i] + beta * d[i];
        }
        rr = rr_new;
        iters += 1;
        if iters % 64 == 0 {
            // Keep roundoff from drifting the iterate along the kernel.
            project(&mut p_sol);
        }
    }
    if rr.sqrt() > stop {
        return Err(DivError::SolverStalled {
            residual: rr.sqrt(),
            iterations: iters,
        });
    }
    project(&mut p_sol);
    Ok((p_sol, iters))
}

const CG_TOL: f64 = 1e-11;

fn cg_budget(n: usize, m: usize) -> usize {
    200 + 60 * m * if n == 3 { 2 } else { 1 }
}

/// Removes the divergence of `f` by subtracting a discrete gradient
/// supported on interior faces, leaving every wall value untouched.
///
/// The input must carry no net flux through the walls (mean divergence at
/// roundoff scale); otherwise no flux-free correction exists and
/// [`DivError::NonZeroMeanDivergence`] is returned.
pub fn bogovskii_correct(f: &GridField) -> Result<CorrectionReport, DivError> {
    let n = f.dim();
    let m = f.cells();
    let h = f.spacing();
    let total = super::grid::mean_div(f);
    if total.abs() > 1e-10 * (1.0 + f.l2_norm()) {
        return Err(DivError::NonZeroMeanDivergence(total));
    }
    let input_div = div_l2_norm(f);
    // The solver applies L = -div grad, so removing div f means solving
    // L p = -div f and subtracting grad p.
    let rhs: Vec<f64> = discrete_div(f).iter().map(|v| -v).collect();
    let active = vec![true; rhs.len()];
    let (p, cg_iterations) =
        solve_neumann_poisson(n, m, &active, &rhs, CG_TOL, cg_budget(n, m))?;

    let mut g = f.clone();
    let cext = [m, m, if n == 3 { m } else { 1 }];
    let mut correction_sq = 0.0;
    for c in 0..n {
        let e = g.extents(c);
        for_each_index(e, |idx| {
            if idx[c] == 0 || idx[c] == m {
                return; // wall faces carry f's original values
            }
            let mut lo = idx;
            lo[c] -= 1;
            let grad = (p[lin(idx, cext)] - p[lin(lo, cext)]) / h;
            let v = g.face(c, idx) - grad;
            g.set_face(c, idx, v);
            correction_sq += grad * grad;
        });
    }
    g.refresh_mask();
    let hn = h.powi(n as i32);
    let correction_norm = (correction_sq * hn).sqrt();
    let residual_div = div_l2_norm(&g);
    let stability_ratio = if input_div > 0.0 {
        correction_norm / input_div
    } else {
        0.0
    };
    Ok(CorrectionReport {
        field: g,
        input_div,
        residual_div,
        correction_norm,
        stability_ratio,
        cg_iterations,
    })
}

/// Embeds a solenoidal field in a larger box (same cell size, centered)
/// and repairs the divergence created at the interface by a pressure
/// solve confined to the padding region, so the original block is
/// reproduced bitwise and the extension is solenoidal with no wall flux.
pub fn extend_solenoidal(f: &GridField, outer_m: usize) -> Result<ExtensionReport, DivError> {
    let n = f.dim();
    let m = f.cells();
    if outer_m <= m || (outer_m - m) % 2 != 0 {
        return Err(DivError::InvalidParameter(format!(
            "outer grid must exceed {m} by a positive even count, got {outer_m}"
        )));
    }
    let input_div = div_l2_norm(f);
    if input_div > 1e-8 * (1.0 + f.l2_norm()) {
        return Err(DivError::NotSolenoidal(input_div));
    }
    let offset = (outer_m - m) / 2;
    let mut g = GridField::zeros(n, outer_m);
    for c in 0..n {
        let ie = f.extents(c);
        let oe = g.extents(c);
        let src = f.component(c).to_vec();
        let dst = g.component_mut(c);
        for_each_index(ie, |idx| {
            let mut out_idx = idx;
            for a in 0..n {
                out_idx[a] += offset;
            }
            dst[lin(out_idx, oe)] = src[lin(idx, ie)];
        });
    }

    // Padding cells form the active region; the block keeps its values.
    let cext = [outer_m, outer_m, if n == 3 { outer_m } else { 1 }];
    let mut active = vec![false; cext[0] * cext[1] * cext[2]];
    for_each_index(cext, |idx| {
        let inside_block = (0..n).all(|a| idx[a] >= offset && idx[a] < offset + m);
        if !inside_block {
            active[lin(idx, cext)] = true;
        }
    });
    let rhs: Vec<f64> = discrete_div(&g).iter().map(|v| -v).collect();
    let (p, cg_iterations) = solve_neumann_poisson(
        n,
        outer_m,
        &active,
        &rhs,
        CG_TOL,
        cg_budget(n, outer_m),
    )?;

    let h = g.spacing();
    for c in 0..n {
        let e = g.extents(c);
        let mut updates = Vec::new();
        for_each_index(e, |idx| {
            if idx[c] == 0 || idx[c] == outer_m {
                return;
            }
            let mut lo = idx;
            lo[c] -= 1;
            let (i_hi, i_lo) = (lin(idx, cext), lin(lo, cext));
            // Only faces between two padding cells move; faces touching
            // the block (or separating it from the padding) are pinned.
            if active[i_hi] && active[i_lo] {
                let grad = (p[i_hi] - p[i_lo]) / h;
                updates.push((idx, grad));
            }
        });
        for (idx, grad) in updates {
            let v = g.face(c, idx) - grad;
            g.set_face(c, idx, v);
        }
    }
    g.refresh_mask();
    let residual_div = div_l2_norm(&g);
    Ok(ExtensionReport {
        field: g,
        offset,
        inner_m: m,
        residual_div,
        cg_iterations,
    })
}

/// Draws a smooth random solenoidal field with no wall flux: a random
/// band-limited potential is sampled on the interior edges (boundary
/// edges stay zero) and curled onto the faces, then scaled to unit norm.
/// Larger `smoothness` damps the high modes harder.
///
/// The potential is a sine series vanishing on the walls, so pinning the
/// boundary edges truncates values that were already near zero; the
/// sampled field stays smooth uniformly in `m` instead of developing a
/// boundary kink of size `1/h`.
pub fn random_solenoidal(n: usize, m: usize, smoothness: f64, seed: u64) -> GridField {
    assert!(n == 2 || n == 3, "only 2- and 3-dimensional grids exist");
    assert!(m >= 3, "need at least 3 cells for an interior");
    assert!(smoothness.is_finite() && smoothness >= 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const K: usize = 3;

    struct Term {
        amp: f64,
        k: [f64; 3],
    }
    let ncomp = if n == 3 { 3 } else { 1 };
    let mut series: Vec<Vec<Term>> = Vec::with_capacity(ncomp);
    for _ in 0..ncomp {
        let mut terms = Vec::new();
        let kmax = if n == 3 { K } else { K + 1 };
        let mut push = |k: [usize; 3], rng: &mut ChaCha8Rng| {
            let knorm = ((k[0] * k[0] + k[1] * k[1] + k[2] * k[2]) as f64).sqrt();
            terms.push(Term {
                amp: rng.gen_range(-1.0..1.0) / knorm.powf(smoothness),
                k: [k[0] as f64, k[1] as f64, k[2] as f64],
            });
        };
        if n == 2 {
            for k0 in 1..=kmax {
                for k1 in 1..=kmax {
                    push([k0, k1, 0], &mut rng);
                }
            }
        } else {
            for k0 in 1..=kmax {
                for k1 in 1..=kmax {
                    for k2 in 1..=kmax {
                        push([k0, k1, k2], &mut rng);
                    }
                }
            }
        }
        series.push(terms);
    }

    let mut psi = EdgePotential::zeros(n, m);
    for (c, idx) in EdgePotential::interior_edges(n, m) {
        let x = psi.edge_center(c, idx);
        let mut v = 0.0;
        for t in &series[c] {
            let mut prod = t.amp;
            for a in 0..n {
                prod *= (std::f64::consts::PI * t.k[a] * x[a]).sin();
            }
            v += prod;
        }
        psi.set_value(c, idx, v);
    }
    let mut field = psi.curl();
    let norm = field.l2_norm();
    if norm > 0.0 {
        for c in 0..n {
            for v in field.component_mut(c) {
                *v /= norm;
            }
        }
    }
    field.refresh_mask();
    field
}
