//! Integrating the flow of a divergence-free velocity field produces a
//! volume-preserving deformation. The determinant residual of the
//! discrete flow map falls at fourth order in the step count, the
//! classical Runge-Kutta rate.
//!
//!     cargo run --release --example volume_preserving_flow

use iqclab::divfree::{flow_map, random_solenoidal, AnalyticSolenoidal, GridInterpolant};

fn main() {
    let field = AnalyticSolenoidal::new(3, 1, 2.0, 1.5, 7);
    println!("analytic solenoidal field, eps = 0.5, probes on a 16^3 grid");
    let mut prev: Option<f64> = None;
    for steps in [2, 4, 8, 16] {
        let report = flow_map(&field, 0.5, steps, 16).unwrap();
        let ratio = prev.map(|p| p / report.det_residual).unwrap_or(f64::NAN);
        println!(
            "  steps = {steps:>2}   max |det grad - 1| = {:.3e}   improvement = {:>6.1}x   |u| = {:.4}",
            report.det_residual,
            ratio,
            report.displacement.l2_norm()
        );
        prev = Some(report.det_residual);
    }
    println!("  (doubling the steps buys roughly 16x, i.e. fourth order,");
    println!("   until the determinant probe's own finite-difference floor)");

    // Grid-sampled fields work too, through a trilinear interpolant. The
    // interpolant is only discretely divergence free, not pointwise, so
    // the flow picks up a volume error that more time steps cannot fix.
    let sampled = random_solenoidal(3, 16, 2.0, 11);
    let interp = GridInterpolant::new(&sampled);
    println!("\ninterpolated grid sample (16^3 faces), eps = 0.1:");
    for steps in [4, 16] {
        let report = flow_map(&interp, 0.1, steps, 16).unwrap();
        println!(
            "  steps = {steps:>2}   max |det grad - 1| = {:.3e}",
            report.det_residual
        );
    }
    println!("  (flat in the step count: the floor is interpolation error,");
    println!("   so sharp volume control needs an analytic velocity field)");

    println!("\nExact incompressibility of the velocity field turns into");
    println!("near-exact volume preservation of the time-t map; the only");
    println!("obstruction is quadrature, and it vanishes at a known rate.");
}
