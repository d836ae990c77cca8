//! A reduced RMSE study: error against the oracle target shrinks with the
//! corruption exponent and with the sample size. Pass `--full` for the
//! complete grid (slow).

use incrementa::experiments::{run_rmse_study, RmseStudyConfig};
use incrementa::incremental::Increment;

fn main() -> incrementa::Result<()> {
    let full = std::env::args().any(|a| a == "--full");
    let cfg = if full {
        RmseStudyConfig::default()
    } else {
        RmseStudyConfig {
            n_set: vec![500, 5000],
            deltas: vec![Increment::new(0.1)?],
            r_grid: vec![0.05, 0.15, 0.25, 0.35, 0.45],
            reps: 50,
            ..RmseStudyConfig::default()
        }
    };
    let study = run_rmse_study(&cfg)?;
    for o in &study.oracles {
        println!("oracle delta={}: {:?} (two-draw gap {:.1e})", o.delta, o.oracle.beta, o.oracle.gap);
    }
    println!("{:>6} {:>6} {:>6} {:>8}", "n", "delta", "r", "rmse");
    for row in &study.rows {
        println!("{:>6} {:>6} {:>6.3} {:>8.4}", row.n, row.delta.to_string(), row.r, row.rmse);
    }
    Ok(())
}
