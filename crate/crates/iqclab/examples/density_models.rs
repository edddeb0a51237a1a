//! The three stored-energy models, their small-strain limits, and the
//! rescaling that connects them: eps^-2 W(exp(eps Z)) -> V(Z).
//!
//!     cargo run --release --example density_models

use iqclab::densities::{
    eval_v, eval_v_eps, eval_w, DensityModel, MultiWell, Nematic, SingleWell, Well,
};
use iqclab::matcore::{project_dev, IlsMatrix, Matrix, SymMatrix};

fn main() {
    let a = SymMatrix::new(Matrix::identity(3)).unwrap();
    let u1 = IlsMatrix::new(Matrix::diag(&[0.1, -0.1, 0.0])).unwrap();
    let u2 = IlsMatrix::new(Matrix::diag(&[-0.1, 0.0, 0.1])).unwrap();
    let models = [
        (
            "single-well (squared distance to rotations)",
            DensityModel::single_well(SingleWell::dist2_sl(3)),
        ),
        (
            "two-well (quadratic wells at moving centers)",
            DensityModel::multi_well(
                MultiWell::new(vec![
                    Well::new(a, u1, 0.0).unwrap(),
                    Well::new(a, u2, 0.05).unwrap(),
                ])
                .unwrap(),
            ),
        ),
        (
            "nematic (singular values vs. anchor spectrum)",
            DensityModel::nematic(Nematic::new([-1.0, 0.0, 1.0]).unwrap()),
        ),
    ];

    let z = Matrix::diag(&[0.3, -0.1, -0.2]);
    let zdev = project_dev(&z);
    println!("strain Z = diag(0.3, -0.1, -0.2), traceless\n");
    for (name, model) in &models {
        println!("{name}");
        let v = eval_v(model, &z).unwrap().as_f64();
        println!("  limit density          V(Z)                = {v:.8}");
        for eps in [0.2, 0.1, 0.05, 0.025] {
            let scaled = eval_v_eps(model, eps, &zdev).unwrap();
            println!(
                "  rescaled stored energy eps^-2 W(exp(eps Z)) = {scaled:.8}   (eps = {eps}, gap {:+.2e})",
                scaled - v
            );
        }
        // The stored energy itself acts on volume-preserving gradients.
        let f = iqclab::matcore::matrix_exp(&z.scale(0.1));
        let w = eval_w(model, 0.1, &f).unwrap().as_f64();
        println!("  stored energy          W_eps(exp(0.1 Z))    = {w:.8}\n");
    }
    println!("The rescaled energies close in on the limit density at first");
    println!("order in eps for every model.");
}
