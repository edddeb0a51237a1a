//! Deterministic sample generators: seeded pseudo-random matrices and
//! rotations, plus a prefix-stable Halton sequence for low-discrepancy
//! sweeps over traceless matrices.
//!
//! Everything here is reproducible: the pseudo-random helpers take a caller
//! owned ChaCha RNG, and the Halton-based sweeps depend only on (seed,
//! sample index), so enlarging a sweep never changes the samples already
//! drawn.

use crate::matcore::{matrix_exp, IlsMatrix, Matrix, SymMatrix};
use rand::Rng;

/// k-th element of the van der Corput sequence in the given base.
pub fn van_der_corput(mut k: u64, base: u64) -> f64 {
    let mut denom = 1.0;
    let mut out = 0.0;
    while k > 0 {
        denom *= base as f64;
        out += (k % base) as f64 / denom;
        k /= base;
    }
    out
}

const HALTON_BASES: [u64; 9] = [2, 3, 5, 7, 11, 13, 17, 19, 23];

/// k-th Halton point in `dim` dimensions (dim <= 9).
pub fn halton(k: u64, dim: usize) -> Vec<f64> {
    HALTON_BASES[..dim]
        .iter()
        .map(|&b| van_der_corput(k, b))
        .collect()
}

/// Frobenius-orthonormal basis of the traceless n x n matrices
/// (n^2 - 1 elements).
pub fn dev_basis(n: usize) -> Vec<Matrix> {
    let mut basis = Vec::new();
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    match n {
        2 => {
            basis.push(Matrix::diag(&[inv_sqrt2, -inv_sqrt2]));
        }
        3 => {
            basis.push(Matrix::diag(&[inv_sqrt2, -inv_sqrt2, 0.0]));
            let s6 = 1.0 / 6.0f64.sqrt();
            basis.push(Matrix::diag(&[s6, s6, -2.0 * s6]));
        }
        _ => panic!("only n = 2, 3 supported"),
    }
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let mut e = Matrix::zeros(n);
                e[(i, j)] = 1.0;
                basis.push(e);
            }
        }
    }
    basis
}

/// Deterministic traceless sample inside the Frobenius ball of radius `r`:
/// the `k`-th point of a seeded Halton sweep. Prefix stable in `k`.
pub fn halton_traceless(seed: u64, k: u64, n: usize, r: f64) -> Matrix {
    let d = n * n - 1;
    let offset = 1 + seed % 1_000_003;
    let h = halton(offset + k, d + 1);
    let basis = dev_basis(n);
    let mut z = Matrix::zeros(n);
    for (i, b) in basis.iter().enumerate() {
        z = z + b.scale(2.0 * h[i] - 1.0);
    }
    let norm = z.norm();
    if norm < 1e-14 {
        return Matrix::zeros(n);
    }
    z.scale(r * h[d] / norm)
}

/// Matrix with i.i.d. uniform entries in `[-scale, scale]`.
pub fn random_matrix<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Matrix {
    let mut m = Matrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = rng.gen_range(-scale..scale);
        }
    }
    m
}

/// Random symmetric matrix (symmetrized uniform entries).
pub fn random_sym<R: Rng>(rng: &mut R, n: usize, scale: f64) -> SymMatrix {
    crate::matcore::project_sym(&random_matrix(rng, n, scale))
}

/// Random traceless matrix with Frobenius norm exactly `r`.
pub fn random_dev_with_norm<R: Rng>(rng: &mut R, n: usize, r: f64) -> Matrix {
    loop {
        let z = random_matrix(rng, n, 1.0).dev_part();
        let norm = z.norm();
        if norm > 1e-9 {
            return z.scale(r / norm);
        }
    }
}

/// Random symmetric traceless matrix with norm at most `scale`.
pub fn random_ils<R: Rng>(rng: &mut R, n: usize, scale: f64) -> IlsMatrix {
    let z = random_matrix(rng, n, scale);
    crate::matcore::project_ils(&z)
}

/// Haar-ish random rotation: uniformly random axis, uniform angle.
/// Full support on SO(n), which is all the callers need.
pub fn random_rotation<R: Rng>(rng: &mut R, n: usize) -> Matrix {
    match n {
        2 => {
            let t = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            Matrix::from_rows2([[t.cos(), -t.sin()], [t.sin(), t.cos()]])
        }
        3 => {
            // Random axis by normalizing a cube sample away from zero.
            let axis = loop {
                let v: [f64; 3] = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ];
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if norm > 1e-3 {
                    break [v[0] / norm, v[1] / norm, v[2] / norm];
                }
            };
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let mut gen = Matrix::zeros(3);
            gen[(0, 1)] = -axis[2];
            gen[(1, 0)] = axis[2];
            gen[(0, 2)] = axis[1];
            gen[(2, 0)] = -axis[1];
            gen[(1, 2)] = -axis[0];
            gen[(2, 1)] = axis[0];
            matrix_exp(&gen.scale(angle))
        }
        _ => panic!("only n = 2, 3 supported"),
    }
}

/// Random matrix with determinant exactly one (exponential of a traceless
/// matrix, so the determinant identity holds to machine precision).
pub fn random_sl<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Matrix {
    matrix_exp(&random_matrix(rng, n, scale).dev_part())
}
