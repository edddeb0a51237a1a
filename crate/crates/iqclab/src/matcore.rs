//! Small dense-matrix kernels for 2x2 and 3x3 real matrices.
//!
//! Everything downstream (energy densities, envelopes, flow maps) works with
//! matrices of a fixed small dimension, so this module keeps a single stack
//! allocated carrier type plus the handful of decompositions the rest of the
//! crate needs: symmetric eigenvalues, matrix exponential/logarithm, singular
//! values, distance to the rotation group and polar factors.
//!
//! Structured matrices (symmetric / traceless / both) get thin newtype
//! wrappers whose constructors validate the defining identity to a relative
//! tolerance, so downstream code can take `&IlsMatrix` and forget about it.

use serde::de::{SeqAccess, Visitor};
use serde::ser::SerializeSeq;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};
use thiserror::Error;

/// Relative tolerance for structural invariants (symmetry, zero trace).
/// Scaled by `1 + ||X||_F` so the check is meaningful for both tiny and
/// large matrices.
pub const STRUCT_TOL: f64 = 1e-12;

/// Eigenvalue domain accepted by [`matrix_log_spd`]. Outside this window the
/// truncated-series accuracy contract is not honoured, so we refuse.
pub const LOG_DOMAIN: (f64, f64) = (0.1, 10.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatError {
    #[error("matrix is not symmetric positive definite (eigenvalue {0:.6e})")]
    NotSpd(f64),
    #[error("eigenvalue {0:.6e} outside supported domain ({1}, {2})")]
    OutOfDomain(f64, f64, f64),
    #[error("deformation gradient is not orientation preserving (det = {0:.6e})")]
    NotOrientationPreserving(f64),
    #[error("dimension mismatch: {0}x{0} vs {1}x{1}")]
    DimensionMismatch(usize, usize),
    #[error("expected 4 or 9 row-major entries, got {0}")]
    BadLength(usize),
    #[error("matrix is not symmetric (defect {0:.3e} exceeds tolerance)")]
    NotSymmetric(f64),
    #[error("matrix is not traceless (trace {0:.3e} exceeds tolerance)")]
    NotTraceless(f64),
}

/// Dense row-major n x n matrix, n in {2, 3}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Matrix {
    n: usize,
    a: [f64; 9],
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        assert!(n == 2 || n == 3, "only 2x2 and 3x3 supported");
        Matrix { n, a: [0.0; 9] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Build from row-major entries; the length (4 or 9) fixes the dimension.
    pub fn from_slice(entries: &[f64]) -> Result<Self, MatError> {
        let n = match entries.len() {
            4 => 2,
            9 => 3,
            l => return Err(MatError::BadLength(l)),
        };
        let mut m = Matrix::zeros(n);
        m.a[..entries.len()].copy_from_slice(entries);
        Ok(m)
    }

    pub fn from_rows3(r: [[f64; 3]; 3]) -> Self {
        let mut m = Matrix::zeros(3);
        for i in 0..3 {
            for j in 0..3 {
                m[(i, j)] = r[i][j];
            }
        }
        m
    }

    pub fn from_rows2(r: [[f64; 2]; 2]) -> Self {
        let mut m = Matrix::zeros(2);
        for i in 0..2 {
            for j in 0..2 {
                m[(i, j)] = r[i][j];
            }
        }
        m
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Matrix::zeros(d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Row-major entries (length n*n).
    pub fn entries(&self) -> &[f64] {
        &self.a[..self.n * self.n]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t[(i, j)] = self[(j, i)];
            }
        }
        t
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self[(i, i)]).sum()
    }

    pub fn det(&self) -> f64 {
        match self.n {
            2 => self[(0, 0)] * self[(1, 1)] - self[(0, 1)] * self[(1, 0)],
            _ => {
                self[(0, 0)] * (self[(1, 1)] * self[(2, 2)] - self[(1, 2)] * self[(2, 1)])
                    - self[(0, 1)] * (self[(1, 0)] * self[(2, 2)] - self[(1, 2)] * self[(2, 0)])
                    + self[(0, 2)] * (self[(1, 0)] * self[(2, 1)] - self[(1, 1)] * self[(2, 0)])
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.entries().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Matrix) -> f64 {
        assert_eq!(self.n, other.n);
        self.entries()
            .iter()
            .zip(other.entries())
            .map(|(x, y)| x * y)
            .sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries().iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn scale(&self, s: f64) -> Matrix {
        let mut m = *self;
        for x in m.a[..self.n * self.n].iter_mut() {
            *x *= s;
        }
        m
    }

    /// Matrix-vector product; `v.len() == n`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n);
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self[(i, j)] * v[j]).sum())
            .collect()
    }

    pub fn sym_part(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                m[(i, j)] = 0.5 * (self[(i, j)] + self[(j, i)]);
            }
        }
        m
    }

    pub fn antisym_part(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                m[(i, j)] = 0.5 * (self[(i, j)] - self[(j, i)]);
            }
        }
        m
    }

    pub fn dev_part(&self) -> Matrix {
        let mut m = *self;
        let t = self.trace() / self.n as f64;
        for i in 0..self.n {
            m[(i, i)] -= t;
        }
        m
    }

    fn is_symmetric(&self) -> Result<(), MatError> {
        let defect = (*self - self.transpose()).norm();
        if defect <= STRUCT_TOL * (1.0 + self.norm()) {
            Ok(())
        } else {
            Err(MatError::NotSymmetric(defect))
        }
    }

    fn is_traceless(&self) -> Result<(), MatError> {
        let t = self.trace();
        if t.abs() <= STRUCT_TOL * (1.0 + self.norm()) {
            Ok(())
        } else {
            Err(MatError::NotTraceless(t))
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.a[i * self.n + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.a[i * self.n + j]
    }
}

impl Add for Matrix {
    type Output = Matrix;
    fn add(self, rhs: Matrix) -> Matrix {
        assert_eq!(self.n, rhs.n);
        let mut m = self;
        for (x, y) in m.a[..self.n * self.n].iter_mut().zip(rhs.entries()) {
            *x += y;
        }
        m
    }
}

impl Sub for Matrix {
    type Output = Matrix;
    fn sub(self, rhs: Matrix) -> Matrix {
        assert_eq!(self.n, rhs.n);
        let mut m = self;
        for (x, y) in m.a[..self.n * self.n].iter_mut().zip(rhs.entries()) {
            *x -= y;
        }
        m
    }
}

impl Neg for Matrix {
    type Output = Matrix;
    fn neg(self) -> Matrix {
        self.scale(-1.0)
    }
}

impl Mul for Matrix {
    type Output = Matrix;
    fn mul(self, rhs: Matrix) -> Matrix {
        assert_eq!(self.n, rhs.n);
        let n = self.n;
        let mut m = Matrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += self[(i, k)] * rhs[(k, j)];
                }
                m[(i, j)] = s;
            }
        }
        m
    }
}

// Matrices serialize as flat row-major arrays; the length (4 or 9) carries
// the dimension, so the JSON stays compact and order independent of any
// struct field naming.
impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.n * self.n))?;
        for v in self.entries() {
            seq.serialize_element(v)?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct MatVisitor;
        impl<'de> Visitor<'de> for MatVisitor {
            type Value = Matrix;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a row-major array of 4 or 9 numbers")
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Matrix, A::Error> {
                let mut v = Vec::with_capacity(9);
                while let Some(x) = seq.next_element::<f64>()? {
                    v.push(x);
                }
                Matrix::from_slice(&v).map_err(serde::de::Error::custom)
            }
        }
        deserializer.deserialize_seq(MatVisitor)
    }
}

macro_rules! structured_matrix {
    ($(#[$doc:meta])* $name:ident, $check:expr) => {
        $(#[$doc])*
        #[derive(Debug, Clone, Copy, PartialEq, Serialize)]
        #[serde(transparent)]
        pub struct $name(Matrix);

        impl $name {
            /// Validates the structural invariant; rejects raw data that
            /// does not satisfy it to within [`STRUCT_TOL`].
            pub fn new(m: Matrix) -> Result<Self, MatError> {
                let check: fn(&Matrix) -> Result<(), MatError> = $check;
                check(&m)?;
                Ok($name(m))
            }

            pub fn as_matrix(&self) -> &Matrix {
                &self.0
            }

            pub fn into_matrix(self) -> Matrix {
                self.0
            }

            pub fn dim(&self) -> usize {
                self.0.dim()
            }
        }

        impl std::ops::Deref for $name {
            type Target = Matrix;
            fn deref(&self) -> &Matrix {
                &self.0
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let m = Matrix::deserialize(d)?;
                $name::new(m).map_err(serde::de::Error::custom)
            }
        }
    };
}

structured_matrix!(
    /// Symmetric matrix: `X == X^T` within tolerance.
    SymMatrix,
    |m| m.is_symmetric()
);
structured_matrix!(
    /// Traceless (deviatoric) matrix: `tr X == 0` within tolerance.
    DevMatrix,
    |m| m.is_traceless()
);
structured_matrix!(
    /// Infinitesimally-incompressible strain: symmetric and traceless.
    IlsMatrix,
    |m| {
        m.is_symmetric()?;
        m.is_traceless()
    }
);

/// Orthogonal projection onto symmetric matrices.
pub fn project_sym(x: &Matrix) -> SymMatrix {
    SymMatrix(x.sym_part())
}

/// Orthogonal projection onto traceless matrices.
pub fn project_dev(x: &Matrix) -> DevMatrix {
    DevMatrix(x.dev_part())
}

/// Orthogonal projection onto symmetric traceless matrices.
pub fn project_ils(x: &Matrix) -> IlsMatrix {
    IlsMatrix(x.sym_part().dev_part())
}

/// Matrix exponential by scaling and squaring with a truncated Taylor
/// series. Relative accuracy is ~1e-13 for `||Z|| <= 10`, which covers every
/// rescaled strain this crate produces.
pub fn matrix_exp(z: &Matrix) -> Matrix {
    let norm = z.norm();
    let s = if norm > 0.25 {
        (norm / 0.25).log2().ceil() as u32
    } else {
        0
    };
    let b = z.scale(0.5f64.powi(s as i32));
    // Taylor series of exp(B) with ||B|| <= 0.25: terms decay faster than
    // 4^-k / k!, so 16 terms are far below double precision.
    let mut acc = Matrix::identity(z.dim());
    let mut term = Matrix::identity(z.dim());
    for k in 1..=20 {
        term = (term * b).scale(1.0 / k as f64);
        acc = acc + term;
        if term.max_abs() < 1e-20 {
            break;
        }
    }
    for _ in 0..s {
        acc = acc * acc;
    }
    acc
}

/// Symmetric eigen-decomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching orthonormal
/// eigenvectors as columns. Robust for degenerate spectra, hence also the
/// fallback inside [`sym_eigenvalues`].
pub fn jacobi_eigen(s: &SymMatrix, max_sweeps: usize) -> (Vec<f64>, Matrix) {
    let n = s.dim();
    let mut a = *s.as_matrix();
    let mut v = Matrix::identity(n);
    let scale = a.norm().max(f64::MIN_POSITIVE);
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| a[(i, i)].partial_cmp(&a[(j, j)]).unwrap());
    let vals: Vec<f64> = idx.iter().map(|&i| a[(i, i)]).collect();
    let mut vecs = Matrix::zeros(n);
    for (newcol, &oldcol) in idx.iter().enumerate() {
        for r in 0..n {
            vecs[(r, newcol)] = v[(r, oldcol)];
        }
    }
    (vals, vecs)
}

/// Eigenvalues of a symmetric matrix in ascending order.
///
/// 2x2 uses the quadratic formula. 3x3 uses the trigonometric closed form,
/// except near-degenerate spectra (eigenvalue-gap product below
/// `1e-12 * ||S||^3`) where it falls back to Jacobi iteration, which does
/// not lose accuracy at multiple eigenvalues.
pub fn sym_eigenvalues(s: &SymMatrix) -> Vec<f64> {
    let m = s.as_matrix();
    match s.dim() {
        2 => {
            let half_tr = 0.5 * (m[(0, 0)] + m[(1, 1)]);
            let off = 0.5 * (m[(0, 0)] - m[(1, 1)]);
            let r = (off * off + m[(0, 1)] * m[(0, 1)]).sqrt();
            vec![half_tr - r, half_tr + r]
        }
        _ => {
            let p1 = m[(0, 1)].powi(2) + m[(0, 2)].powi(2) + m[(1, 2)].powi(2);
            let q = m.trace() / 3.0;
            let p2 = (m[(0, 0)] - q).powi(2)
                + (m[(1, 1)] - q).powi(2)
                + (m[(2, 2)] - q).powi(2)
                + 2.0 * p1;
            if p2 <= 0.0 {
                return vec![q, q, q];
            }
            let p = (p2 / 6.0).sqrt();
            let mut b = *m;
            for i in 0..3 {
                b[(i, i)] -= q;
            }
            let b = b.scale(1.0 / p);
            let r = (0.5 * b.det()).clamp(-1.0, 1.0);
            let phi = r.acos() / 3.0;
            // phi lies in [0, pi/3], so cos(phi) gives the largest root and
            // cos(phi + 2pi/3) the smallest.
            let e3 = q + 2.0 * p * phi.cos();
            let e1 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3).cos();
            let e2 = 3.0 * q - e1 - e3;
            let gap_product = ((e2 - e1) * (e3 - e2) * (e3 - e1)).abs();
            let scale = m.norm();
            if gap_product < 1e-12 * scale.powi(3) {
                return jacobi_eigen(s, 50).0;
            }
            vec![e1, e2, e3]
        }
    }
}

/// Principal logarithm of a symmetric positive definite matrix.
///
/// Domain guard: all eigenvalues must lie in [`LOG_DOMAIN`]; this is the
/// range over which the callers' accuracy expectations were checked.
pub fn matrix_log_spd(x: &SymMatrix) -> Result<SymMatrix, MatError> {
    let (vals, vecs) = jacobi_eigen(x, 50);
    for &l in &vals {
        if l <= 0.0 {
            return Err(MatError::NotSpd(l));
        }
    }
    for &l in &vals {
        if l <= LOG_DOMAIN.0 || l >= LOG_DOMAIN.1 {
            return Err(MatError::OutOfDomain(l, LOG_DOMAIN.0, LOG_DOMAIN.1));
        }
    }
    let n = x.dim();
    let mut log = Matrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += vecs[(i, k)] * vals[k].ln() * vecs[(j, k)];
            }
            log[(i, j)] = s;
        }
    }
    // Symmetrize away the last bits of rotation roundoff before wrapping.
    Ok(SymMatrix(log.sym_part()))
}

/// Square root of a symmetric positive semi-definite matrix (eigenvalues
/// clamped at zero to absorb roundoff).
pub fn sqrt_spd(x: &SymMatrix) -> SymMatrix {
    let (vals, vecs) = jacobi_eigen(x, 50);
    let n = x.dim();
    let mut root = Matrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += vecs[(i, k)] * vals[k].max(0.0).sqrt() * vecs[(j, k)];
            }
            root[(i, j)] = s;
        }
    }
    SymMatrix(root.sym_part())
}

/// Singular values in ascending order, via the eigenvalues of `F^T F`.
pub fn singular_values(f: &Matrix) -> Vec<f64> {
    let ftf = SymMatrix((f.transpose() * *f).sym_part());
    sym_eigenvalues(&ftf)
        .into_iter()
        .map(|l| l.max(0.0).sqrt())
        .collect()
}

/// Frobenius distance from `F` to the rotation group SO(n).
///
/// For `det F > 0` this is `sqrt(sum (sigma_i - 1)^2)`. For `det F <= 0`
/// the nearest rotation flips the smallest singular direction, giving
/// `sqrt((sigma_min + 1)^2 + sum_{i>min} (sigma_i - 1)^2)`.
pub fn dist_so(f: &Matrix) -> f64 {
    let sig = singular_values(f);
    if f.det() > 0.0 {
        sig.iter().map(|s| (s - 1.0) * (s - 1.0)).sum::<f64>().sqrt()
    } else {
        let mut acc = (sig[0] + 1.0) * (sig[0] + 1.0);
        for s in &sig[1..] {
            acc += (s - 1.0) * (s - 1.0);
        }
        acc.sqrt()
    }
}

/// Polar decomposition `F = R U` with `R` a rotation and `U` symmetric
/// positive definite. Requires `det F > 0`.
pub fn polar_decompose(f: &Matrix) -> Result<(Matrix, SymMatrix), MatError> {
    let d = f.det();
    if d <= 0.0 {
        return Err(MatError::NotOrientationPreserving(d));
    }
    let ftf = SymMatrix((f.transpose() * *f).sym_part());
    let (vals, vecs) = jacobi_eigen(&ftf, 50);
    let n = f.dim();
    let mut u = Matrix::zeros(n);
    let mut u_inv = Matrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            let mut si = 0.0;
            for k in 0..n {
                let root = vals[k].max(0.0).sqrt();
                s += vecs[(i, k)] * root * vecs[(j, k)];
                si += vecs[(i, k)] / root * vecs[(j, k)];
            }
            u[(i, j)] = s;
            u_inv[(i, j)] = si;
        }
    }
    let r = *f * u_inv;
    Ok((r, SymMatrix(u.sym_part())))
}
