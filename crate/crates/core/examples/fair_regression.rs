//! Parity-constrained counterfactual regression on the simulation process,
//! tracing how the coefficients and the group gap move as the parity
//! threshold tightens.

use incrementa::data::SeedSpec;
use incrementa::experiments::{gen_simulation, RmseStudyConfig};
use incrementa::incremental::{pseudo_outcomes, Increment};
use incrementa::nuisance::{fit_nuisances, NuisanceConfig, OutcomeTransform};
use incrementa::program::{build_l2_program, build_parity_rows, risk_estimate, ConstraintSpec};
use incrementa::solver::{solve, SolveOptions};

fn main() -> incrementa::Result<()> {
    let data = gen_simulation(5000, SeedSpec::new(3, 0))?;
    let basis = RmseStudyConfig::basis();
    let cfg = NuisanceConfig {
        propensity_design: basis.clone(),
        outcome_design: basis.clone(),
        transforms: vec![OutcomeTransform::Identity, OutcomeTransform::Square],
        ..NuisanceConfig::default()
    };
    let nuis = fit_nuisances(&data, &cfg, SeedSpec::new(3, 1))?;
    let delta = Increment::new(0.1)?;
    let phi = pseudo_outcomes(&data, &nuis, delta, OutcomeTransform::Identity)?;
    let phi2 = pseudo_outcomes(&data, &nuis, delta, OutcomeTransform::Square)?;
    let row = build_parity_rows(&data, &basis, None)?;

    println!("{:>6} {:>30} {:>8} {:>9} {:>6}", "eps", "beta", "gap", "risk", "active");
    for eps in [f64::INFINITY, 1.0, 0.5, 0.1, 0.0] {
        let cons: Vec<ConstraintSpec> =
            if eps.is_finite() { vec![ConstraintSpec::StatisticalParity { eps }] } else { vec![] };
        let prog = build_l2_program(&data, &phi, Some(&phi2), &basis, &cons, 0.0)?;
        let sol = solve(&prog, &SolveOptions::default())?;
        sol.require_optimal()?;
        let beta = sol.beta_vector();
        println!(
            "{:>6} {:>30} {:>8.4} {:>9.3} {:>6}",
            eps,
            format!("{:.3?}", sol.beta),
            row.dot(&beta),
            risk_estimate(&prog, &beta)?,
            sol.active.len()
        );
    }
    Ok(())
}
