//! Pipeline invariants on random draws of the simulation process.

use std::collections::BTreeMap;

use incrementa::data::SeedSpec;
use incrementa::experiments::{gen_simulation, RmseStudyConfig, SimulationDgp};
use incrementa::incremental::{mean_effect, pseudo_outcomes, Increment};
use incrementa::nuisance::{exact_nuisances, NuisanceFit, OutcomeTransform, DEFAULT_CLIP};
use incrementa::program::{build_l2_program, build_parity_rows, ConstraintSpec};
use incrementa::solver::{solve, SolveOptions};
use proptest::prelude::*;

const ID: OutcomeTransform = OutcomeTransform::Identity;

fn fit(seed: u64, n: usize) -> (incrementa::data::Dataset, NuisanceFit) {
    let data = gen_simulation(n, SeedSpec::new(seed, 0)).unwrap();
    let nuis = exact_nuisances(&data, &SimulationDgp, &[ID], DEFAULT_CLIP).unwrap();
    (data, nuis)
}

fn solve_parity(
    data: &incrementa::data::Dataset,
    nuis: &NuisanceFit,
    delta: f64,
    eps: Option<f64>,
) -> (Vec<f64>, f64) {
    let phi = pseudo_outcomes(data, nuis, Increment::new(delta).unwrap(), ID).unwrap();
    let cons: Vec<ConstraintSpec> = eps.map(|eps| ConstraintSpec::StatisticalParity { eps }).into_iter().collect();
    let prog = build_l2_program(data, &phi, None, &RmseStudyConfig::basis(), &cons, 0.0).unwrap();
    let sol = solve(&prog, &SolveOptions::default()).unwrap();
    sol.require_optimal().unwrap();
    (sol.beta.clone(), sol.objective)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn parity_bound_holds(seed in 0u64..1000, delta in 0.01f64..20.0, eps in 0.0f64..0.5) {
        let (data, nuis) = fit(seed, 400);
        let (beta, _) = solve_parity(&data, &nuis, delta, Some(eps));
        let row = build_parity_rows(&data, &RmseStudyConfig::basis(), None).unwrap();
        let gap: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
        prop_assert!(gap.abs() <= eps + 1e-8);
    }

    #[test]
    fn relaxing_parity_never_hurts(seed in 0u64..1000, delta in 0.01f64..20.0, e1 in 0.0f64..0.5, e2 in 0.0f64..0.5) {
        let (data, nuis) = fit(seed, 400);
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let (_, tight) = solve_parity(&data, &nuis, delta, Some(lo));
        let (_, loose) = solve_parity(&data, &nuis, delta, Some(hi));
        let (_, free) = solve_parity(&data, &nuis, delta, None);
        prop_assert!(loose <= tight + 1e-10);
        prop_assert!(free <= loose + 1e-10);
    }

    #[test]
    fn outcome_shift_moves_intercept(seed in 0u64..1000, delta in 0.01f64..20.0, shift in -10.0f64..10.0) {
        let (data, nuis) = fit(seed, 300);
        let shifted_data = incrementa::data::Dataset::new(
            data.y().iter().map(|y| y + shift).collect(),
            data.a().to_vec(),
            data.x().clone(),
            data.names().to_vec(),
        ).unwrap().with_sensitive("f").unwrap();
        let (m0, m1) = nuis.mu(ID).unwrap();
        let mu = BTreeMap::from([(ID, (
            m0.iter().map(|v| v + shift).collect(),
            m1.iter().map(|v| v + shift).collect(),
        ))]);
        let shifted = NuisanceFit::new(nuis.pi1().to_vec(), mu, nuis.fold_of().to_vec(), DEFAULT_CLIP).unwrap();
        let d = Increment::new(delta).unwrap();
        let before = mean_effect(&data, &nuis, d, ID).unwrap();
        let after = mean_effect(&shifted_data, &shifted, d, ID).unwrap();
        prop_assert!((after.eif - before.eif - shift).abs() < 1e-9);
        prop_assert!((after.eif_se - before.eif_se).abs() < 1e-9);
        let (b0, _) = solve_parity(&data, &nuis, delta, None);
        let (b1, _) = solve_parity(&shifted_data, &shifted, delta, None);
        prop_assert!((b1[0] - b0[0] - shift).abs() < 1e-7);
        prop_assert!((b1[1] - b0[1]).abs() < 1e-7 && (b1[2] - b0[2]).abs() < 1e-7);
    }

    #[test]
    fn row_order_is_irrelevant(seed in 0u64..1000, delta in 0.01f64..20.0, eps in 0.0f64..0.3) {
        let (data, nuis) = fit(seed, 300);
        let mut rows: Vec<usize> = (0..data.n()).collect();
        rows.reverse();
        rows.rotate_left((seed as usize) % data.n());
        let (b0, _) = solve_parity(&data, &nuis, delta, Some(eps));
        let (b1, _) = solve_parity(&data.select_rows(&rows), &nuis.select_rows(&rows), delta, Some(eps));
        for (a, b) in b0.iter().zip(&b1) {
            prop_assert!((a - b).abs() < 1e-8);
        }
    }
}
