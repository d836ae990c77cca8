//! Factual versus counterfactual prediction when the deployment population
//! is shifted by an incremental intervention.

use incrementa::experiments::{run_illustration, IllustrationConfig};

fn main() -> incrementa::Result<()> {
    let study = run_illustration(&IllustrationConfig::default())?;
    println!("training treated fraction {:.3}", study.train_treated_fraction);
    for r in &study.results {
        println!(
            "delta {:>5}: test treated {:.3}, mse factual {:>8.2}, counterfactual {:>8.2}, ratio {:.2}",
            r.delta.to_string(),
            r.test_treated_fraction,
            r.mse_factual,
            r.mse_counterfactual,
            r.mse_factual / r.mse_counterfactual
        );
    }
    let h = &study.results[0].hist_test_outcome;
    let peak = h.counts.iter().copied().max().unwrap_or(1).max(1);
    println!("\ntest outcomes at delta {}:", study.results[0].delta);
    for (i, &c) in h.counts.iter().enumerate().step_by(2) {
        println!("{:>7.1} {}", h.edges[i], "#".repeat(c * 50 / peak));
    }
    Ok(())
}
