//! Sandwich and bootstrap standard errors for a parity-constrained fit.

use incrementa::data::SeedSpec;
use incrementa::experiments::{gen_simulation, RmseStudyConfig, SimulationDgp};
use incrementa::incremental::{pseudo_outcomes, Increment};
use incrementa::inference::{bootstrap, sandwich_linear};
use incrementa::nuisance::{corrupted_oracle_nuisances, NoiseMode, OutcomeTransform, DEFAULT_CLIP};
use incrementa::program::{build_l2_program, ConstraintSpec};
use incrementa::solver::{solve, SolveOptions};

fn main() -> incrementa::Result<()> {
    let id = OutcomeTransform::Identity;
    let data = gen_simulation(2000, SeedSpec::new(5, 0))?;
    let nuis = corrupted_oracle_nuisances(&data, &SimulationDgp, &[id], 0.45, SeedSpec::new(5, 1), NoiseMode::Shared, DEFAULT_CLIP)?;
    let phi = pseudo_outcomes(&data, &nuis, Increment::new(0.1)?, id)?;
    let basis = RmseStudyConfig::basis();
    let cons = [ConstraintSpec::StatisticalParity { eps: 0.1 }];
    let prog = build_l2_program(&data, &phi, None, &basis, &cons, 0.0)?;
    let sol = solve(&prog, &SolveOptions::default())?;
    println!("active rows {:?}, multipliers {:?}", sol.active, sol.gamma);

    let sandwich = sandwich_linear(&prog, &sol, 0.95)?;
    let boot = bootstrap(
        data.n(),
        &sol.beta,
        |idx| {
            let p = build_l2_program(&data.select_rows(idx), &phi.select_rows(idx), None, &basis, &cons, 0.0)?;
            let s = solve(&p, &SolveOptions::default())?;
            s.require_optimal()?;
            Ok(s.beta)
        },
        500,
        SeedSpec::new(5, 2),
        0.95,
    )?;
    println!("{:>12} {:>9} {:>9} {:>9} {:>22} {:>22}", "coef", "beta", "se", "boot se", "wald 95%", "percentile 95%");
    for (j, name) in ["(intercept)", "x1", "x2"].iter().enumerate() {
        println!(
            "{:>12} {:>9.4} {:>9.4} {:>9.4} {:>22} {:>22}",
            name,
            sol.beta[j],
            sandwich.se[j],
            boot.se[j],
            format!("[{:.3}, {:.3}]", sandwich.ci_lower[j], sandwich.ci_upper[j]),
            format!("[{:.3}, {:.3}]", boot.ci_lower[j], boot.ci_upper[j])
        );
    }
    Ok(())
}
