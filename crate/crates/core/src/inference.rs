//! Uncertainty quantification for solved programs.
//!
//! [`sandwich_linear`] differentiates the KKT conditions of a quadratic
//! program through its active set, including the sampling variability of
//! data-dependent constraint rows. [`sandwich_fixed`] treats the constraints
//! as fixed and only propagates gradient noise. [`bootstrap`] resamples rows
//! and re-solves the program through a caller-supplied refit, typically with
//! the nuisance predictions of the resampled rows held fixed.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::SeedSpec;
use crate::error::{Error, Result};
use crate::program::{ApproxProgram, ProgramKind};
use crate::solver::SolveResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMethod {
    SandwichLinear,
    SandwichFixed,
    Bootstrap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub method: InferenceMethod,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub level: f64,
    /// Wald intervals for sandwich methods, percentile intervals for the
    /// bootstrap.
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub n: usize,
    /// Bootstrap replicates discarded as infeasible.
    pub dropped: usize,
}

fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Argument(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(std.inverse_cdf(0.5 + level / 2.0))
}

fn wald(method: InferenceMethod, beta: &[f64], cov: DMatrix<f64>, n: usize, level: f64) -> Result<InferenceResult> {
    let z = normal_quantile(level)?;
    let k = beta.len();
    let se: Vec<f64> = (0..k).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    Ok(InferenceResult {
        method,
        beta: beta.to_vec(),
        ci_lower: (0..k).map(|j| beta[j] - z * se[j]).collect(),
        ci_upper: (0..k).map(|j| beta[j] + z * se[j]).collect(),
        se,
        cov: cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
        level,
        n,
        dropped: 0,
    })
}

/// First `k` rows of the inverse of `[H, Aᵀ; A, 0]`.
pub fn bordered_rows(h: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = h.nrows();
    let q = a.nrows();
    let mut kkt = DMatrix::zeros(k + q, k + q);
    kkt.view_mut((0, 0), (k, k)).copy_from(h);
    if q > 0 {
        kkt.view_mut((k, 0), (q, k)).copy_from(a);
        kkt.view_mut((0, k), (k, q)).copy_from(&a.transpose());
    }
    let inv = kkt
        .try_inverse()
        .ok_or_else(|| Error::Singular("bordered KKT matrix is singular".into()))?;
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("bordered KKT matrix is singular".into()));
    }
    Ok(inv.rows(0, k).into_owned())
}

fn check_solution(result: &SolveResult) -> Result<()> {
    result.require_optimal()?;
    if !result.sc_flags.is_empty() {
        return Err(Error::StrictComplementarity(result.sc_flags.clone()));
    }
    if !result.licq {
        return Err(Error::Licq("active constraint rows are linearly dependent".into()));
    }
    Ok(())
}

fn active_rows(program: &ApproxProgram, active: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(active.len(), program.k(), |a, i| program.cmat[(active[a], i)])
}

fn hessian_at(program: &ApproxProgram, beta: &DVector<f64>) -> DMatrix<f64> {
    match (&program.kind, &program.smooth) {
        (ProgramKind::SmoothConvex, Some(s)) => s.evaluate(beta).2,
        _ => program.hessian(),
    }
}

fn centered_columns(mut g: DMatrix<f64>) -> DMatrix<f64> {
    let n = g.nrows() as f64;
    for mut col in g.column_iter_mut() {
        let m = col.sum() / n;
        col.add_scalar_mut(-m);
    }
    g
}

/// Per-observation estimating-function values `Uᵢ` (rows) for the active
/// KKT system: the centred gradient plus multiplier-weighted row influence,
/// stacked with the influence of each active constraint evaluated at `β̂`.
pub fn kkt_influence(program: &ApproxProgram, result: &SolveResult) -> Result<DMatrix<f64>> {
    let beta = result.beta_vector();
    let k = program.k();
    let q = result.active.len();
    let grads = centered_columns(program.observation_gradients(&beta)?);
    let n = grads.nrows();
    let mut u = DMatrix::zeros(n, k + q);
    u.view_mut((0, 0), (n, k)).copy_from(&grads);
    for (a, &j) in result.active.iter().enumerate() {
        if let Some(inf) = program.row_influence(j)? {
            let gamma = result.gamma[j];
            for i in 0..n {
                let mut dot = 0.0;
                for c in 0..k {
                    u[(i, c)] += gamma * inf[(i, c)];
                    dot += inf[(i, c)] * beta[c];
                }
                u[(i, k + a)] = dot;
            }
        }
    }
    Ok(u)
}

/// Sandwich covariance through the active-set KKT system, accounting for
/// estimated constraint rows: `cov = M Σ_U Mᵀ / n` with `M` the first `k`
/// rows of the bordered inverse.
pub fn sandwich_linear(program: &ApproxProgram, result: &SolveResult, level: f64) -> Result<InferenceResult> {
    check_solution(result)?;
    let beta = result.beta_vector();
    let m = bordered_rows(&hessian_at(program, &beta), &active_rows(program, &result.active))?;
    let u = kkt_influence(program, result)?;
    let n = u.nrows();
    let sigma = u.tr_mul(&u) / n as f64;
    let cov = &m * sigma * m.transpose() / n as f64;
    wald(InferenceMethod::SandwichLinear, &result.beta, cov, n, level)
}

/// Sandwich covariance with the constraints held fixed:
/// `cov = P Σ_g Pᵀ / n` where `P` is the top-left block of the bordered
/// inverse and `Σ_g` the covariance of per-observation gradients.
pub fn sandwich_fixed(program: &ApproxProgram, result: &SolveResult, level: f64) -> Result<InferenceResult> {
    check_solution(result)?;
    let beta = result.beta_vector();
    let k = program.k();
    let m = bordered_rows(&hessian_at(program, &beta), &active_rows(program, &result.active))?;
    let p = m.columns(0, k).into_owned();
    let g = centered_columns(program.observation_gradients(&beta)?);
    let n = g.nrows();
    let grad_cov = g.tr_mul(&g) / n as f64;
    let cov = &p * grad_cov * p.transpose() / n as f64;
    wald(InferenceMethod::SandwichFixed, &result.beta, cov, n, level)
}

/// Nonparametric bootstrap. `refit` receives resampled row indices and
/// returns the refitted coefficients, or an error for a replicate that
/// cannot be solved. Replicates run in parallel; each draws from its own
/// substream of `seed`, so results do not depend on the thread count.
/// More than 10% failed replicates is an error.
pub fn bootstrap<F>(
    n: usize,
    beta_hat: &[f64],
    refit: F,
    replicates: usize,
    seed: SeedSpec,
    level: f64,
) -> Result<InferenceResult>
where
    F: Fn(&[usize]) -> Result<Vec<f64>> + Sync,
{
    if replicates < 100 {
        return Err(Error::Argument(format!("bootstrap needs at least 100 replicates, got {replicates}")));
    }
    if n == 0 {
        return Err(Error::EmptyInput("bootstrap over zero rows".into()));
    }
    normal_quantile(level)?;
    let draws: Vec<Option<Vec<f64>>> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = seed.substream(b as u64).rng();
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            match refit(&idx) {
                Ok(beta) => Some(beta),
                Err(e) => {
                    log::debug!("bootstrap replicate {b} dropped: {e}");
                    None
                }
            }
        })
        .collect();
    let kept: Vec<Vec<f64>> = draws.into_iter().flatten().collect();
    let dropped = replicates - kept.len();
    if dropped * 10 > replicates {
        return Err(Error::Bootstrap {
            dropped,
            total: replicates,
        });
    }
    let k = beta_hat.len();
    if kept.iter().any(|b| b.len() != k) {
        return Err(Error::Argument("bootstrap refit returned a coefficient vector of the wrong length".into()));
    }
    let m = kept.len() as f64;
    let means: Vec<f64> = (0..k).map(|j| kept.iter().map(|b| b[j]).sum::<f64>() / m).collect();
    let cov = DMatrix::from_fn(k, k, |a, c| {
        kept.iter().map(|b| (b[a] - means[a]) * (b[c] - means[c])).sum::<f64>() / (m - 1.0)
    });
    let alpha = (1.0 - level) / 2.0;
    let quantile = |j: usize, p: f64| {
        let mut v: Vec<f64> = kept.iter().map(|b| b[j]).collect();
        v.sort_by(f64::total_cmp);
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Ok(InferenceResult {
        method: InferenceMethod::Bootstrap,
        beta: beta_hat.to_vec(),
        se: (0..k).map(|j| cov[(j, j)].sqrt()).collect(),
        cov: cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
        level,
        ci_lower: (0..k).map(|j| quantile(j, alpha)).collect(),
        ci_upper: (0..k).map(|j| quantile(j, 1.0 - alpha)).collect(),
        n,
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSpec;
    use crate::data::Dataset;
    use crate::incremental::{Increment, PseudoOutcomes};
    use crate::nuisance::OutcomeTransform;
    use crate::program::{build_l2_program, build_l2_program_weighted, ConstraintSpec};
    use crate::solver::{solve_qp, SolveOptions};
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn bordered_inverse_by_hand() {
        // H = I, one active row (1, 1): rows are [I − aaᵀ/2, a/2]
        let m = bordered_rows(&DMatrix::identity(2, 2), &DMatrix::from_row_slice(1, 2, &[1.0, 1.0])).unwrap();
        let want = DMatrix::from_row_slice(2, 3, &[0.5, -0.5, 0.5, -0.5, 0.5, 0.5]);
        assert!((m - want).amax() < 1e-14);
        let m = bordered_rows(&DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]), &DMatrix::zeros(0, 2)).unwrap();
        assert!((m - DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.25])).amax() < 1e-14);
    }

    #[test]
    fn quantile_matches_table() {
        assert!((normal_quantile(0.95).unwrap() - 1.959963984540054).abs() < 1e-9);
        assert!(normal_quantile(1.0).is_err());
    }

    fn parity_fixture(n: usize, seed: u64) -> (Dataset, PseudoOutcomes) {
        let mut rng = SeedSpec::new(seed, 0).rng();
        let mut xs = Vec::with_capacity(2 * n);
        let mut fs = Vec::with_capacity(n);
        let mut phi = Vec::with_capacity(n);
        for _ in 0..n {
            let f = u8::from(rng.random::<f64>() < 0.4);
            let x: f64 = rng.random::<f64>() * 4.0 + f as f64;
            let e: f64 = StandardNormal.sample(&mut rng);
            xs.push(x);
            fs.push(f);
            phi.push(1.0 + 2.0 * x + e);
        }
        let mut cols = xs.clone();
        cols.truncate(n);
        cols.extend(fs.iter().map(|&v| v as f64));
        let x = DMatrix::from_column_slice(n, 2, &cols);
        let data = Dataset::new(vec![0.0; n], vec![0; n], x, vec!["x".into(), "f".into()])
            .unwrap()
            .with_sensitive("f")
            .unwrap();
        let p = PseudoOutcomes {
            phi,
            delta: Increment::ONE,
            tag: OutcomeTransform::Identity,
        };
        (data, p)
    }

    #[test]
    fn unconstrained_matches_ols_sandwich() {
        let (data, p) = parity_fixture(400, 3);
        let basis = BasisSpec::raw(Some(vec!["x".into()]));
        let prog = build_l2_program(&data, &p, None, &basis, &[], 0.0).unwrap();
        let sol = solve_qp(&prog, &SolveOptions::default());
        let inf = sandwich_linear(&prog, &sol, 0.95).unwrap();
        // heteroskedasticity-robust OLS covariance (no small-sample factor)
        let b = basis.design(&data).unwrap();
        let n = b.nrows() as f64;
        let beta = sol.beta_vector();
        let resid = DVector::from_column_slice(&p.phi) - &b * &beta;
        let bread = (b.tr_mul(&b) / n).try_inverse().unwrap();
        let mut meat = DMatrix::zeros(2, 2);
        for i in 0..b.nrows() {
            let bi = b.row(i).transpose();
            meat += &bi * bi.transpose() * resid[i].powi(2);
        }
        let hc0 = &bread * (meat / n) * &bread / n;
        for j in 0..2 {
            assert!((inf.cov[j][j] - hc0[(j, j)]).abs() < 1e-10 * hc0[(j, j)].max(1.0));
        }
        let fixed = sandwich_fixed(&prog, &sol, 0.95).unwrap();
        assert!((fixed.se[0] - inf.se[0]).abs() < 1e-12);
    }

    #[test]
    fn influence_matches_weighted_perturbation() {
        let (data, p) = parity_fixture(300, 11);
        let basis = BasisSpec::raw(Some(vec!["x".into()]));
        let cons = [ConstraintSpec::StatisticalParity { eps: 0.05 }];
        let prog = build_l2_program(&data, &p, None, &basis, &cons, 0.0).unwrap();
        let sol = solve_qp(&prog, &SolveOptions::default());
        assert_eq!(sol.active.len(), 1, "parity should bind");
        let beta = sol.beta_vector();
        let m = bordered_rows(&prog.hessian(), &active_rows(&prog, &sol.active)).unwrap();
        let u = kkt_influence(&prog, &sol).unwrap();
        let n = data.n();
        let t = 1e-5;
        for i in [0usize, 17, 123, 250] {
            let mut w = vec![1.0; n];
            w[i] += t;
            let pw = build_l2_program_weighted(&data, &p, &basis, &cons, 0.0, &w).unwrap();
            let sw = solve_qp(&pw, &SolveOptions::default());
            assert_eq!(sw.active, sol.active);
            let fd = (sw.beta_vector() - &beta) * (n as f64 / t);
            let analytic = -(&m * u.row(i).transpose());
            let scale = analytic.amax().max(1.0);
            assert!((&fd - &analytic).amax() < 1e-3 * scale, "row {i}: {fd} vs {analytic}");
        }
    }

    #[test]
    fn bootstrap_agrees_with_sandwich() {
        let (data, p) = parity_fixture(2000, 5);
        let basis = BasisSpec::raw(Some(vec!["x".into()]));
        let cons = [ConstraintSpec::StatisticalParity { eps: 0.05 }];
        let prog = build_l2_program(&data, &p, None, &basis, &cons, 0.0).unwrap();
        let sol = solve_qp(&prog, &SolveOptions::default());
        let sand = sandwich_linear(&prog, &sol, 0.95).unwrap();
        let boot = bootstrap(
            data.n(),
            &sol.beta,
            |idx| {
                let prog = build_l2_program(&data.select_rows(idx), &p.select_rows(idx), None, &basis, &cons, 0.0)?;
                let s = solve_qp(&prog, &SolveOptions::default());
                s.require_optimal()?;
                Ok(s.beta)
            },
            300,
            SeedSpec::new(9, 0),
            0.95,
        )
        .unwrap();
        for j in 0..2 {
            let ratio = boot.se[j] / sand.se[j];
            assert!((0.8..1.25).contains(&ratio), "coordinate {j}: ratio {ratio}");
        }
    }

    #[test]
    fn bootstrap_rejects_too_many_failures_and_is_deterministic() {
        let f = |idx: &[usize]| -> Result<Vec<f64>> {
            if idx[0] % 2 == 0 {
                Err(Error::Solver("infeasible".into()))
            } else {
                Ok(vec![idx[1] as f64])
            }
        };
        assert!(matches!(
            bootstrap(10, &[0.0], f, 100, SeedSpec::new(1, 0), 0.95),
            Err(Error::Bootstrap { .. })
        ));
        let g = |idx: &[usize]| -> Result<Vec<f64>> { Ok(vec![idx.iter().sum::<usize>() as f64]) };
        let a = bootstrap(50, &[0.0], g, 120, SeedSpec::new(1, 0), 0.9).unwrap();
        let b = bootstrap(50, &[0.0], g, 120, SeedSpec::new(1, 0), 0.9).unwrap();
        assert_eq!(a, b);
        assert!(bootstrap(50, &[0.0], g, 99, SeedSpec::new(1, 0), 0.9).is_err());
    }

    #[test]
    fn degenerate_multiplier_refuses_inference() {
        let (data, p) = parity_fixture(50, 2);
        let basis = BasisSpec::raw(Some(vec!["x".into()]));
        let prog = build_l2_program(&data, &p, None, &basis, &[], 0.0).unwrap();
        let mut sol = solve_qp(&prog, &SolveOptions::default());
        sol.sc_flags = vec![0];
        assert!(matches!(sandwich_linear(&prog, &sol, 0.95), Err(Error::StrictComplementarity(_))));
    }
}
