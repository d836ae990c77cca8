//! Counterfactual mean outcome under a range of increments on the
//! illustration process, comparing the three estimators with the exact value.

use incrementa::basis::BasisSpec;
use incrementa::data::SeedSpec;
use incrementa::experiments::{gen_illustration, IllustrationDgp};
use incrementa::incremental::{mean_effect, Increment};
use incrementa::nuisance::{fit_nuisances, NuisanceConfig, OutcomeTransform};

fn main() -> incrementa::Result<()> {
    let data = gen_illustration(20_000, SeedSpec::new(1, 0))?;
    let cfg = NuisanceConfig {
        outcome_design: BasisSpec::polynomial(2, None),
        ..NuisanceConfig::default()
    };
    let nuis = fit_nuisances(&data, &cfg, SeedSpec::new(1, 1))?;
    let dgp = IllustrationDgp::default();
    println!("{:>6} {:>9} {:>9} {:>9} {:>7} {:>9}", "delta", "plugin", "ipw", "eif", "se", "truth");
    for d in ["0", "0.01", "0.1", "0.5", "1", "2", "10", "inf"] {
        let delta = Increment::parse(d)?;
        let m = mean_effect(&data, &nuis, delta, OutcomeTransform::Identity)?;
        println!(
            "{:>6} {:>9.4} {:>9.4} {:>9.4} {:>7.4} {:>9.4}",
            d,
            m.plugin,
            m.ipw,
            m.eif,
            m.eif_se,
            dgp.incremental_mean(delta)
        );
    }
    Ok(())
}
