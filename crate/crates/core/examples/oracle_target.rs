//! Large-sample oracle coefficients for the simulation process under
//! statistical parity, with the two-draw agreement gap.

use incrementa::data::SeedSpec;
use incrementa::experiments::{oracle_beta, RmseStudyConfig, SimulationDgp, ORACLE_N};
use incrementa::incremental::Increment;
use incrementa::program::{ConstraintSpec, Loss};

fn main() -> incrementa::Result<()> {
    let basis = RmseStudyConfig::basis();
    let parity = [ConstraintSpec::StatisticalParity { eps: 0.1 }];
    for delta in [0.1, 0.01] {
        let delta = Increment::new(delta)?;
        let o = oracle_beta(&SimulationDgp, Loss::L2, &basis, &parity, delta, ORACLE_N, SeedSpec::new(7, 0))?;
        println!("delta={delta} beta*={:?} gap={:.2e}", o.beta, o.gap);
    }
    Ok(())
}
