//! Projecting a noisy vector field onto the discretely divergence-free
//! subspace. The correction solves a Poisson problem for a pressure-like
//! potential, subtracts its gradient, and reports a stability ratio: the
//! size of the correction against the size of the divergence it removed.
//!
//!     cargo run --release --example divergence_correction

use iqclab::divfree::{bogovskii_correct, div_l2_norm, mean_div, GridField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random interior velocities with walls pinned to zero; generally far
/// from divergence free, but mean-zero in divergence by construction.
fn noisy_field(n: usize, m: usize, seed: u64) -> GridField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = GridField::zeros(n, m);
    for axis in 0..n {
        let ext = f.extents(axis);
        for i in 0..ext[0] {
            for j in 0..ext[1] {
                for k in 0..ext[2] {
                    let idx = [i, j, k];
                    // Keep boundary-normal faces pinned so no flux crosses
                    // the walls; only interior faces get noise.
                    if idx[axis] == 0 || idx[axis] + 1 == ext[axis] {
                        continue;
                    }
                    f.set_face(axis, idx, rng.gen_range(-1.0..1.0));
                }
            }
        }
    }
    f.refresh_mask();
    f
}

fn main() {
    println!("  {:>4}  {:>12}  {:>12}  {:>12}  {:>9}  {:>5}", "m", "div before", "div after", "correction", "stability", "iters");
    for m in [8, 16, 24] {
        let f = noisy_field(3, m, 100 + m as u64);
        let before = div_l2_norm(&f);
        let report = bogovskii_correct(&f).unwrap();
        println!(
            "  {m:>4}  {before:>12.4e}  {:>12.4e}  {:>12.4e}  {:>9.3}  {:>5}",
            div_l2_norm(&report.field),
            report.correction_norm,
            report.stability_ratio,
            report.cg_iterations
        );
        assert!(mean_div(&f).abs() < 1e-12);
    }
    println!("\nThe corrected fields are divergence free to solver tolerance,");
    println!("and the correction is proportional to the divergence removed —");
    println!("the stability constant stays bounded as the grid refines. Fields");
    println!("whose divergence has nonzero mean are rejected: no velocity with");
    println!("impermeable walls can balance a net source.");
}
