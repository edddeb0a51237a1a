//! Staggered velocity fields and edge potentials on the unit cube.

use serde::de::Error as _;
use serde::{Deserialize, Serialize};

/// Linear index into a row-major array with the given extents (third
/// extent is 1 in two dimensions).
#[inline]
pub(crate) fn lin(idx: [usize; 3], ext: [usize; 3]) -> usize {
    (idx[0] * ext[1] + idx[1]) * ext[2] + idx[2]
}

/// Visits every index of a row-major box in a fixed deterministic order.
pub(crate) fn for_each_index(ext: [usize; 3], mut body: impl FnMut([usize; 3])) {
    for i0 in 0..ext[0] {
        for i1 in 0..ext[1] {
            for i2 in 0..ext[2] {
                body([i0, i1, i2]);
            }
        }
    }
}

/// Staggered velocity field on `[0,1]^n`, `n` in {2, 3}, with `m` cells
/// per axis. Component `c` is stored at the centers of faces whose normal
/// is axis `c`: extent `m + 1` along axis `c` and `m` along the others.
///
/// `masked` records a promise that every boundary-normal face is exactly
/// zero, i.e. no flux crosses the walls of the box; deserialization
/// re-checks it.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    n: usize,
    m: usize,
    masked: bool,
    comps: Vec<Vec<f64>>,
}

impl GridField {
    pub fn zeros(n: usize, m: usize) -> Self {
        assert!(n == 2 || n == 3, "only 2- and 3-dimensional grids exist");
        assert!(m >= 2, "need at least 2 cells per axis");
        let comps = (0..n)
            .map(|c| {
                let e = Self::extents_for(n, m, c);
                vec![0.0; e[0] * e[1] * e[2]]
            })
            .collect();
        GridField {
            n,
            m,
            masked: true,
            comps,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Cells per axis.
    pub fn cells(&self) -> usize {
        self.m
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.m as f64
    }

    pub fn is_masked(&self) -> bool {
        self.masked
    }

    fn extents_for(n: usize, m: usize, c: usize) -> [usize; 3] {
        let mut e = [m, m, if n == 3 { m } else { 1 }];
        e[c] += 1;
        e
    }

    /// Storage extents of component `c` (third entry is 1 in 2-d).
    pub fn extents(&self, c: usize) -> [usize; 3] {
        Self::extents_for(self.n, self.m, c)
    }

    pub fn component(&self, c: usize) -> &[f64] {
        &self.comps[c]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [f64] {
        self.masked = false;
        &mut self.comps[c]
    }

    pub fn face(&self, c: usize, idx: [usize; 3]) -> f64 {
        self.comps[c][lin(idx, self.extents(c))]
    }

    pub fn set_face(&mut self, c: usize, idx: [usize; 3], v: f64) {
        let e = self.extents(c);
        self.masked = false;
        self.comps[c][lin(idx, e)] = v;
    }

    /// Center of the face holding `component(c)[idx]`; the third coordinate
    /// is 0 in two dimensions.
    pub fn face_center(&self, c: usize, idx: [usize; 3]) -> [f64; 3] {
        let h = self.spacing();
        let mut x = [0.0; 3];
        for a in 0..self.n {
            x[a] = if a == c {
                idx[a] as f64 * h
            } else {
                (idx[a] as f64 + 0.5) * h
            };
        }
        x
    }

    /// Checks whether every boundary-normal face is exactly zero, and
    /// records the answer in the `masked` flag.
    pub fn refresh_mask(&mut self) -> bool {
        let mut ok = true;
        for c in 0..self.n {
            let e = self.extents(c);
            for_each_index(e, |idx| {
                if idx[c] == 0 || idx[c] == self.m {
                    if self.comps[c][lin(idx, e)] != 0.0 {
                        ok = false;
                    }
                }
            });
        }
        self.masked = ok;
        ok
    }

    /// `sqrt( sum over faces of v^2 h^n )`.
    pub fn l2_norm(&self) -> f64 {
        let hn = self.spacing().powi(self.n as i32);
        let ss: f64 = self
            .comps
            .iter()
            .flat_map(|c| c.iter())
            .map(|v| v * v)
            .sum();
        (ss * hn).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.comps
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Serialize, Deserialize)]
struct GridFieldRepr {
    n: usize,
    m: usize,
    layout: String,
    masked: bool,
    components: Vec<Vec<f64>>,
}

impl Serialize for GridField {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        GridFieldRepr {
            n: self.n,
            m: self.m,
            layout: "mac".into(),
            masked: self.masked,
            components: self.comps.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GridField {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = GridFieldRepr::deserialize(d)?;
        if r.layout != "mac" {
            return Err(D::Error::custom(format!("unknown layout {:?}", r.layout)));
        }
        if !(r.n == 2 || r.n == 3) || r.m < 2 {
            return Err(D::Error::custom(format!(
                "unsupported grid: n = {}, m = {}",
                r.n, r.m
            )));
        }
        if r.components.len() != r.n {
            return Err(D::Error::custom(format!(
                "expected {} components, got {}",
                r.n,
                r.components.len()
            )));
        }
        for (c, comp) in r.components.iter().enumerate() {
            let e = GridField::extents_for(r.n, r.m, c);
            let want = e[0] * e[1] * e[2];
            if comp.len() != want {
                return Err(D::Error::custom(format!(
                    "component {c} has {} values, expected {want}",
                    comp.len()
                )));
            }
            if comp.iter().any(|v| !v.is_finite()) {
                return Err(D::Error::custom(format!("component {c} has non-finite values")));
            }
        }
        let mut field = GridField {
            n: r.n,
            m: r.m,
            masked: false,
            comps: r.components,
        };
        let zero_walls = field.refresh_mask();
        if r.masked && !zero_walls {
            return Err(D::Error::custom(
                "field is flagged masked but has nonzero boundary-normal faces",
            ));
        }
        field.masked = r.masked && zero_walls;
        Ok(field)
    }
}

/// Per-cell discrete divergence: net outward flux divided by cell volume,
/// in row-major cell order (`m^n` values).
pub fn discrete_div(f: &GridField) -> Vec<f64> {
    let m = f.cells();
    let n = f.dim();
    let h = f.spacing();
    let cext = [m, m, if n == 3 { m } else { 1 }];
    let mut out = vec![0.0; cext[0] * cext[1] * cext[2]];
    for c in 0..n {
        let e = f.extents(c);
        let comp = f.component(c);
        for_each_index(cext, |idx| {
            let mut hi = idx;
            hi[c] += 1;
            let d = (comp[lin(hi, e)] - comp[lin(idx, e)]) / h;
            out[lin(idx, cext)] += d;
        });
    }
    out
}

/// `sqrt( sum over cells of div^2 h^n )`.
pub fn div_l2_norm(f: &GridField) -> f64 {
    let hn = f.spacing().powi(f.dim() as i32);
    let ss: f64 = discrete_div(f).iter().map(|d| d * d).sum();
    (ss * hn).sqrt()
}

/// Volume-weighted total divergence, i.e. the net flux through the walls.
pub fn mean_div(f: &GridField) -> f64 {
    let hn = f.spacing().powi(f.dim() as i32);
    discrete_div(f).iter().sum::<f64>() * hn
}

/// Edge-based potential whose discrete curl is a [`GridField`] with zero
/// discrete divergence by telescoping.
///
/// In three dimensions, component `c` sits on edges parallel to axis `c`
/// (extent `m` along `c`, `m + 1` along the others). In two dimensions the
/// potential is a single scalar stream function on the `(m+1)^2` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgePotential {
    n: usize,
    m: usize,
    comps: Vec<Vec<f64>>,
}

impl EdgePotential {
    pub fn zeros(n: usize, m: usize) -> Self {
        assert!(n == 2 || n == 3, "only 2- and 3-dimensional grids exist");
        assert!(m >= 2, "need at least 2 cells per axis");
        let ncomp = if n == 3 { 3 } else { 1 };
        let comps = (0..ncomp)
            .map(|c| {
                let e = Self::extents_for(n, m, c);
                vec![0.0; e[0] * e[1] * e[2]]
            })
            .collect();
        EdgePotential { n, m, comps }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn cells(&self) -> usize {
        self.m
    }

    pub fn components(&self) -> usize {
        self.comps.len()
    }

    fn extents_for(n: usize, m: usize, c: usize) -> [usize; 3] {
        if n == 2 {
            [m + 1, m + 1, 1]
        } else {
            let mut e = [m + 1, m + 1, m + 1];
            e[c] = m;
            e
        }
    }

    pub fn extents(&self, c: usize) -> [usize; 3] {
        Self::extents_for(self.n, self.m, c)
    }

    pub fn value(&self, c: usize, idx: [usize; 3]) -> f64 {
        self.comps[c][lin(idx, self.extents(c))]
    }

    pub fn set_value(&mut self, c: usize, idx: [usize; 3], v: f64) {
        let e = self.extents(c);
        self.comps[c][lin(idx, e)] = v;
    }

    pub fn component(&self, c: usize) -> &[f64] {
        &self.comps[c]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.comps[c]
    }

    /// Midpoint of the edge holding `component(c)[idx]` (the node itself
    /// in two dimensions).
    pub fn edge_center(&self, c: usize, idx: [usize; 3]) -> [f64; 3] {
        let h = 1.0 / self.m as f64;
        let mut x = [0.0; 3];
        for a in 0..self.n {
            x[a] = if self.n == 3 && a == c {
                (idx[a] as f64 + 0.5) * h
            } else {
                idx[a] as f64 * h
            };
        }
        x
    }

    /// Degrees of freedom whose edges touch no boundary node: `(component,
    /// index)` pairs in deterministic order. Zeroing everything else makes
    /// the curl vanish identically on all boundary-normal faces.
    pub fn interior_edges(n: usize, m: usize) -> Vec<(usize, [usize; 3])> {
        let mut out = Vec::new();
        if n == 2 {
            for i0 in 1..m {
                for i1 in 1..m {
                    out.push((0, [i0, i1, 0]));
                }
            }
            return out;
        }
        for c in 0..3 {
            let e = Self::extents_for(n, m, c);
            for_each_index(e, |idx| {
                let interior = (0..3).all(|a| {
                    if a == c {
                        idx[a] >= 1 && idx[a] + 1 <= m - 1
                    } else {
                        idx[a] >= 1 && idx[a] <= m - 1
                    }
                });
                if interior {
                    out.push((c, idx));
                }
            });
        }
        out
    }

    /// Discrete curl onto the staggered face grid. Exactly divergence-free
    /// up to roundoff: every edge value feeds two faces of any given cell
    /// with opposite signs.
    pub fn curl(&self) -> GridField {
        let mut out = GridField::zeros(self.n, self.m);
        let h = 1.0 / self.m as f64;
        if self.n == 2 {
            let psi = &self.comps[0];
            let pe = self.extents(0);
            // u0 = d(psi)/dx1, u1 = -d(psi)/dx0.
            let e0 = out.extents(0);
            for_each_index(e0, |f| {
                let a = psi[lin([f[0], f[1] + 1, 0], pe)] - psi[lin([f[0], f[1], 0], pe)];
                out.comps[0][lin(f, e0)] = a / h;
            });
            let e1 = out.extents(1);
            for_each_index(e1, |f| {
                let a = psi[lin([f[0] + 1, f[1], 0], pe)] - psi[lin([f[0], f[1], 0], pe)];
                out.comps[1][lin(f, e1)] = -a / h;
            });
            out.refresh_mask();
            return out;
        }
        for a in 0..3 {
            let (b, c) = ((a + 1) % 3, (a + 2) % 3);
            let fe = out.extents(a);
            let pb = self.extents(b);
            let pc = self.extents(c);
            for_each_index(fe, |f| {
                let mut up = f;
                up[b] += 1;
                let dc = self.comps[c][lin(up, pc)] - self.comps[c][lin(f, pc)];
                let mut up = f;
                up[c] += 1;
                let db = self.comps[b][lin(up, pb)] - self.comps[b][lin(f, pb)];
                out.comps[a][lin(f, fe)] = (dc - db) / h;
            });
        }
        out.refresh_mask();
        out
    }

    /// Adjoint of [`curl`](Self::curl): pulls a face-based cotangent back
    /// to edge space, so that `<curl(psi), w> = <psi, curl_transpose(w)>`
    /// as plain Euclidean pairings.
    pub fn curl_transpose(w: &GridField) -> EdgePotential {
        let n = w.dim();
        let m = w.cells();
        let h = w.spacing();
        let mut out = EdgePotential::zeros(n, m);
        if n == 2 {
            let pe = out.extents(0);
            let e0 = w.extents(0);
            for_each_index(e0, |f| {
                let wv = w.comps[0][lin(f, e0)] / h;
                out.comps[0][lin([f[0], f[1] + 1, 0], pe)] += wv;
                out.comps[0][lin([f[0], f[1], 0], pe)] -= wv;
            });
            let e1 = w.extents(1);
            for_each_index(e1, |f| {
                let wv = w.comps[1][lin(f, e1)] / h;
                out.comps[0][lin([f[0] + 1, f[1], 0], pe)] -= wv;
                out.comps[0][lin([f[0], f[1], 0], pe)] += wv;
            });
            return out;
        }
        for a in 0..3 {
            let (b, c) = ((a + 1) % 3, (a + 2) % 3);
            let fe = w.extents(a);
            let pb = out.extents(b);
            let pc = out.extents(c);
            for_each_index(fe, |f| {
                let wv = w.comps[a][lin(f, fe)] / h;
                let mut up = f;
                up[b] += 1;
                out.comps[c][lin(up, pc)] += wv;
                out.comps[c][lin(f, pc)] -= wv;
                let mut up = f;
                up[c] += 1;
                out.comps[b][lin(up, pb)] -= wv;
                out.comps[b][lin(f, pb)] += wv;
            });
        }
        out
    }
}
