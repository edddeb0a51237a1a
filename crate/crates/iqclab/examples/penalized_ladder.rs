//! Replacing the divergence-free constraint with a trace penalty
//! b |tr X|^2 and climbing a ladder of stiffnesses b. The penalized
//! minima are nondecreasing in b and land near the constrained minimum
//! as the penalty stiffens.
//!
//!     cargo run --release --example penalized_ladder

use iqclab::envelopes::{
    numerical_iqc, CellProblem, NematicLimitDensity, OptimizerOpts, penalized_iqc,
    DEFAULT_B_LADDER,
};
use iqclab::matcore::Matrix;

fn main() {
    let density = NematicLimitDensity::new([-1.0, 0.0, 1.0]).unwrap();
    let opts = OptimizerOpts {
        max_iters: 400,
        gradient_tol: 1e-7,
        restarts: 1,
        seed: 0,
        amplitude: 0.1,
    };
    let problem = CellProblem {
        density: &density,
        base: Matrix::zeros(3),
        m: 6,
        opts,
    };

    let constrained = numerical_iqc(&problem).unwrap();
    println!(
        "constrained cell problem (curl fields only): {:.6}\n",
        constrained.value
    );

    let rows = penalized_iqc(&problem, &DEFAULT_B_LADDER, 2.0).unwrap();
    println!("  {:>6}  {:>12}  {:>6}  converged", "b", "value", "iters");
    for row in &rows {
        println!(
            "  {:>6}  {:>12.6}  {:>6}  {}",
            row.b, row.value, row.iterations, row.converged
        );
    }
    let last = rows.last().unwrap();
    println!(
        "\nladder top sits {:+.3e} from the constrained value",
        last.value - constrained.value
    );
    println!("Each rung warm-starts from the previous minimizer, then a");
    println!("backward polish re-scores every rung so the reported ladder");
    println!("honors the monotonicity the exact minima have. The two routes");
    println!("discretize differently — unconstrained nodal fields against");
    println!("curls of edge potentials — so at a fixed grid they differ by a");
    println!("few percent; the agreement tightens under refinement. Since the");
    println!("penalized route needs no divergence-free machinery at all, it");
    println!("is a useful independent cross-check on the constrained solver.");
}
