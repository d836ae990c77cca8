//! The dual active-set solver on a small program, with its multipliers and
//! KKT certificate, followed by an infeasible variant.

use incrementa::solver::{solve_dense_qp, SolveOptions};
use nalgebra::{dmatrix, dvector};

fn main() -> incrementa::Result<()> {
    // min ½‖β‖² − (2, 1)·β  s.t.  β₁ + β₂ ≤ 1,  β₁ − β₂ ≤ 0.5
    let h = dmatrix![1.0, 0.0; 0.0, 1.0];
    let c = dvector![2.0, 1.0];
    let cmat = dmatrix![1.0, 1.0; 1.0, -1.0];
    let d = dvector![1.0, 0.5];
    let sol = solve_dense_qp(&h, &c, &cmat, &d, &SolveOptions::default())?;
    println!("status     {:?}", sol.status);
    println!("beta       {:?}", sol.beta);
    println!("gamma      {:?}", sol.gamma);
    println!("active     {:?}", sol.active);
    println!("kkt        {:.2e}", sol.kkt_residual);
    println!("iterations {}", sol.iterations);

    // β₁ ≤ −1 together with −β₁ ≤ −1 has no solution
    let bad = solve_dense_qp(&h, &c, &dmatrix![1.0, 0.0; -1.0, 0.0], &dvector![-1.0, -1.0], &SolveOptions::default())?;
    println!("\ninfeasible variant: {:?}, least violation {:?}", bad.status, bad.infeasibility);
    Ok(())
}
