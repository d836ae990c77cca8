//! Synthetic studies: the motivating illustration, the RMSE-versus-rate
//! simulation, and large-sample oracle targets.
//!
//! Illustration process:
//!
//! ```text
//! X ~ U[0, 10]
//! A ~ Bern(expit(2.8 − 0.3X))
//! Y ~ N(1 + 0.75X + 0.5X² − 10A, X)      (variance X)
//! ```
//!
//! Simulation process:
//!
//! ```text
//! F  ~ Bern(0.5)
//! X₁ ~ U[0, 10]
//! X₂ ~ N(4F − 2, 2)                      (variance 2)
//! A  ~ Bern(expit(2.5 − 0.3X₁ − F·X₂))
//! Y  = 0.5√X₁ + 2X₂ − 5A + N(0, 1)
//! ```

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::data::{Dataset, SeedSpec};
use crate::error::{Error, Result};
use crate::incremental::{pseudo_outcomes, q_shift, Increment, PseudoOutcomes};
use crate::nuisance::{
    corrupted_oracle_nuisances, expit, fit_nuisances, fit_propensity_logistic, NoiseMode, NuisanceConfig,
    OracleNuisance, OutcomeTransform, DEFAULT_CLIP,
};
use crate::program::{
    build_crossentropy_program, build_l2_program, build_msle_program, ApproxProgram, ConstraintSpec, Loss,
};
use crate::solver::{solve, SolveOptions};

/// A data-generating process with closed-form nuisances.
pub trait Dgp: OracleNuisance {
    fn name(&self) -> &'static str;
    /// Draws `n` rows; `delta = Some(δ)` draws treatment from the shifted
    /// propensity instead of the observational one.
    fn generate_under(&self, n: usize, seed: SeedSpec, delta: Option<Increment>) -> Result<Dataset>;

    fn generate(&self, n: usize, seed: SeedSpec) -> Result<Dataset> {
        self.generate_under(n, seed, None)
    }
}

/// How the second argument of `N(m, X)` is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadReading {
    #[default]
    Variance,
    StdDev,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IllustrationDgp {
    pub spread: SpreadReading,
}

impl IllustrationDgp {
    fn mean(x: f64, a: u8) -> f64 {
        1.0 + 0.75 * x + 0.5 * x * x - 10.0 * a as f64
    }

    fn variance(&self, x: f64) -> f64 {
        match self.spread {
            SpreadReading::Variance => x,
            SpreadReading::StdDev => x * x,
        }
    }

    /// `E{Y^{Q(δ)}}` by composite Simpson quadrature over `X ~ U[0, 10]`.
    pub fn incremental_mean(&self, delta: Increment) -> f64 {
        let panels = 20_000;
        let h = 10.0 / panels as f64;
        let f = |x: f64| {
            let q = q_shift(self.pi1(&[x]), delta).expect("propensity is interior");
            q * Self::mean(x, 1) + (1.0 - q) * Self::mean(x, 0)
        };
        let mut acc = f(0.0) + f(10.0);
        for i in 1..panels {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(i as f64 * h);
        }
        acc * h / 3.0 / 10.0
    }

    /// Marginal treated fraction `E{expit(2.8 − 0.3X)}` in closed form.
    pub fn treated_fraction() -> f64 {
        let softplus = |t: f64| t.exp().ln_1p();
        (softplus(2.8) - softplus(-0.2)) / 0.3 / 10.0
    }
}

impl OracleNuisance for IllustrationDgp {
    fn pi1(&self, x: &[f64]) -> f64 {
        expit(2.8 - 0.3 * x[0])
    }

    fn mu(&self, t: OutcomeTransform, arm: u8, x: &[f64]) -> Option<f64> {
        let m = Self::mean(x[0], arm);
        match t {
            OutcomeTransform::Identity => Some(m),
            OutcomeTransform::Square => Some(m * m + self.variance(x[0])),
            _ => None,
        }
    }
}

impl Dgp for IllustrationDgp {
    fn name(&self) -> &'static str {
        "illustration"
    }

    fn generate_under(&self, n: usize, seed: SeedSpec, delta: Option<Increment>) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::Argument("sample size must be >= 1".into()));
        }
        let mut rng = seed.rng();
        let mut xs = Vec::with_capacity(n);
        let mut a = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let x = 10.0 * rng.random::<f64>();
            let mut p = self.pi1(&[x]);
            if let Some(d) = delta {
                p = q_shift(p, d)?;
            }
            let ai = u8::from(rng.random::<f64>() < p);
            let z: f64 = StandardNormal.sample(&mut rng);
            xs.push(x);
            a.push(ai);
            y.push(Self::mean(x, ai) + self.variance(x).sqrt() * z);
        }
        Dataset::new(y, a, DMatrix::from_column_slice(n, 1, &xs), vec!["x".into()])
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SimulationDgp;

impl SimulationDgp {
    fn mean(x1: f64, x2: f64, a: u8) -> f64 {
        0.5 * x1.sqrt() + 2.0 * x2 - 5.0 * a as f64
    }
}

impl OracleNuisance for SimulationDgp {
    /// Covariate order is `(x1, x2, f)`.
    fn pi1(&self, x: &[f64]) -> f64 {
        expit(2.5 - 0.3 * x[0] - x[2] * x[1])
    }

    fn mu(&self, t: OutcomeTransform, arm: u8, x: &[f64]) -> Option<f64> {
        let m = Self::mean(x[0], x[1], arm);
        match t {
            OutcomeTransform::Identity => Some(m),
            OutcomeTransform::Square => Some(m * m + 1.0),
            _ => None,
        }
    }
}

impl Dgp for SimulationDgp {
    fn name(&self) -> &'static str {
        "simulation"
    }

    fn generate_under(&self, n: usize, seed: SeedSpec, delta: Option<Increment>) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::Argument("sample size must be >= 1".into()));
        }
        let mut rng = seed.rng();
        let sd2 = 2.0f64.sqrt();
        let mut cols = vec![Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
        let mut a = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let f = u8::from(rng.random::<f64>() < 0.5) as f64;
            let x1 = 10.0 * rng.random::<f64>();
            let z2: f64 = StandardNormal.sample(&mut rng);
            let x2 = 4.0 * f - 2.0 + sd2 * z2;
            let mut p = self.pi1(&[x1, x2, f]);
            if let Some(d) = delta {
                p = q_shift(p, d)?;
            }
            let ai = u8::from(rng.random::<f64>() < p);
            let e: f64 = StandardNormal.sample(&mut rng);
            cols[0].push(x1);
            cols[1].push(x2);
            cols[2].push(f);
            a.push(ai);
            y.push(Self::mean(x1, x2, ai) + e);
        }
        let flat: Vec<f64> = cols.concat();
        Dataset::new(y, a, DMatrix::from_column_slice(n, 3, &flat), vec!["x1".into(), "x2".into(), "f".into()])?
            .with_sensitive("f")
    }
}

pub fn gen_illustration(n: usize, seed: SeedSpec) -> Result<Dataset> {
    IllustrationDgp::default().generate(n, seed)
}

pub fn gen_simulation(n: usize, seed: SeedSpec) -> Result<Dataset> {
    SimulationDgp.generate(n, seed)
}

/// Which study a run belongs to, with its scalar settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub name: String,
    pub n: usize,
    pub delta: Increment,
    pub r: Option<f64>,
    pub seed: SeedSpec,
}

/// Large-sample oracle target with its two-draw certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleBeta {
    pub beta: Vec<f64>,
    /// Second independent draw.
    pub replicate: Vec<f64>,
    /// Largest coordinate-wise disagreement between the two draws.
    pub gap: f64,
    pub n_oracle: usize,
}

/// Default oracle draw size. Parity-constrained targets on the simulation
/// process need far more than 10⁶ rows for two draws to agree within
/// [`ORACLE_TOL`].
pub const ORACLE_N: usize = 50_000_000;
pub const ORACLE_TOL: f64 = 5e-3;

fn build_program(
    loss: Loss,
    data: &Dataset,
    pseudo: &PseudoOutcomes,
    basis: &BasisSpec,
    constraints: &[ConstraintSpec],
    lambda: f64,
) -> Result<ApproxProgram> {
    match loss {
        Loss::L2 => build_l2_program(data, pseudo, None, basis, constraints, lambda),
        Loss::Msle => build_msle_program(data, pseudo, None, basis, constraints, lambda),
        Loss::CrossEntropy => build_crossentropy_program(data, pseudo, basis, constraints, lambda, true),
    }
}

/// Rows per independently seeded oracle chunk.
const ORACLE_CHUNK: usize = 100_000;

fn conditional_target(dgp: &dyn Dgp, data: &Dataset, tag: OutcomeTransform, delta: Increment) -> Result<Vec<f64>> {
    // exact E{t(Y^Q) | X}; same population program as the pseudo-outcomes,
    // with far less Monte Carlo noise
    let mut row = vec![0.0; data.p()];
    let mut target = Vec::with_capacity(data.n());
    let missing = || Error::Config(format!("oracle has no closed form for `{}`", tag.tag()));
    for i in 0..data.n() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = data.x()[(i, j)];
        }
        let q = q_shift(dgp.pi1(&row), delta)?;
        let m1 = dgp.mu(tag, 1, &row).ok_or_else(missing)?;
        let m0 = dgp.mu(tag, 0, &row).ok_or_else(missing)?;
        target.push(q * m1 + (1.0 - q) * m0);
    }
    Ok(target)
}

/// Sufficient statistics of one chunk for a quadratic oracle program.
struct ChunkMoments {
    n: f64,
    bb: DMatrix<f64>,
    tb: DVector<f64>,
    /// Per parity constraint: (Σ b over group 0, count, Σ b over group 1, count).
    groups: Vec<(DVector<f64>, f64, DVector<f64>, f64)>,
}

fn parity_level(spec: &ConstraintSpec) -> Option<Option<i64>> {
    match spec {
        ConstraintSpec::StatisticalParity { .. } => Some(None),
        ConstraintSpec::ConditionalParity { level, .. } => Some(Some(*level)),
        _ => None,
    }
}

#[allow(clippy::too_many_arguments)]
fn chunk_moments(
    dgp: &dyn Dgp,
    tag: OutcomeTransform,
    basis: &BasisSpec,
    constraints: &[ConstraintSpec],
    delta: Increment,
    len: usize,
    seed: SeedSpec,
) -> Result<ChunkMoments> {
    let data = dgp.generate(len, seed)?;
    let target = conditional_target(dgp, &data, tag, delta)?;
    let b = basis.design(&data)?;
    let k = b.ncols();
    let mut groups = Vec::new();
    for spec in constraints {
        let Some(level) = parity_level(spec) else { continue };
        let f = data
            .f()
            .ok_or_else(|| Error::Config("parity oracle needs a sensitive feature".into()))?;
        let l = data.l();
        if level.is_some() && l.is_none() {
            return Err(Error::Config("conditional parity oracle needs a legitimate factor".into()));
        }
        let (mut s0, mut c0, mut s1, mut c1) = (DVector::zeros(k), 0.0, DVector::zeros(k), 0.0);
        for i in 0..len {
            if level.is_some_and(|lv| l.expect("checked")[i] != lv) {
                continue;
            }
            if f[i] == 0 {
                s0 += b.row(i).transpose();
                c0 += 1.0;
            } else {
                s1 += b.row(i).transpose();
                c1 += 1.0;
            }
        }
        groups.push((s0, c0, s1, c1));
    }
    Ok(ChunkMoments {
        n: len as f64,
        bb: b.tr_mul(&b),
        tb: b.tr_mul(&DVector::from_column_slice(&target)),
        groups,
    })
}

fn oracle_draw(
    dgp: &dyn Dgp,
    loss: Loss,
    basis: &BasisSpec,
    constraints: &[ConstraintSpec],
    delta: Increment,
    n: usize,
    seed: SeedSpec,
) -> Result<Vec<f64>> {
    let tag = loss.target_transform();
    let program = if loss == Loss::CrossEntropy {
        let data = dgp.generate(n, seed)?;
        let pseudo = PseudoOutcomes {
            phi: conditional_target(dgp, &data, tag, delta)?,
            delta,
            tag,
        };
        build_program(loss, &data, &pseudo, basis, constraints, 0.0)?
    } else {
        let chunks = n.div_ceil(ORACLE_CHUNK);
        let parts: Vec<Result<ChunkMoments>> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let len = ORACLE_CHUNK.min(n - c * ORACLE_CHUNK);
                chunk_moments(dgp, tag, basis, constraints, delta, len, seed.substream(c as u64))
            })
            .collect();
        let mut total: Option<ChunkMoments> = None;
        for p in parts {
            let p = p?;
            total = Some(match total {
                None => p,
                Some(mut t) => {
                    t.n += p.n;
                    t.bb += p.bb;
                    t.tb += p.tb;
                    for (g, h) in t.groups.iter_mut().zip(p.groups) {
                        g.0 += h.0;
                        g.1 += h.1;
                        g.2 += h.2;
                        g.3 += h.3;
                    }
                    t
                }
            });
        }
        let t = total.ok_or_else(|| Error::Argument("oracle sample size must be >= 1".into()))?;
        let k = t.tb.len();
        let mut rows: Vec<DVector<f64>> = Vec::new();
        let mut d = Vec::new();
        let mut groups = t.groups.iter();
        for spec in constraints {
            match spec {
                ConstraintSpec::Linear { c, d: dd } => {
                    for j in 0..c.nrows() {
                        rows.push(c.row(j).transpose());
                        d.push(dd[j]);
                    }
                }
                ConstraintSpec::StatisticalParity { eps } | ConstraintSpec::ConditionalParity { eps, .. } => {
                    let (s0, c0, s1, c1) = groups.next().expect("one entry per parity spec");
                    if *c0 == 0.0 || *c1 == 0.0 {
                        return Err(Error::DegenerateGroup("oracle draw has an empty parity group".into()));
                    }
                    let row = s0 / *c0 - s1 / *c1;
                    rows.push(row.clone());
                    rows.push(-row);
                    d.extend([*eps, *eps]);
                }
                ConstraintSpec::PositiveClassBalance { .. } => unreachable!("rejected by the caller"),
            }
        }
        let cmat = DMatrix::from_fn(rows.len(), k, |i, j| rows[i][j]);
        ApproxProgram::quadratic(t.bb / t.n, t.tb / t.n, 0.0, cmat, DVector::from_vec(d))?
    };
    let sol = solve(&program, &SolveOptions::default())?;
    sol.require_optimal()?;
    Ok(sol.beta)
}

/// Solves the population program on two independent draws of `n_oracle`
/// rows and certifies that they agree within [`ORACLE_TOL`].
pub fn oracle_beta(
    dgp: &dyn Dgp,
    loss: Loss,
    basis: &BasisSpec,
    constraints: &[ConstraintSpec],
    delta: Increment,
    n_oracle: usize,
    seed: SeedSpec,
) -> Result<OracleBeta> {
    if constraints.iter().any(|c| matches!(c, ConstraintSpec::PositiveClassBalance { .. })) {
        return Err(Error::Config("oracle targets do not support positive-class balance".into()));
    }
    let (a, b) = rayon::join(
        || oracle_draw(dgp, loss, basis, constraints, delta, n_oracle, seed.substream(0x0a)),
        || oracle_draw(dgp, loss, basis, constraints, delta, n_oracle, seed.substream(0x0b)),
    );
    let (a, b) = (a?, b?);
    let gap = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    if gap > ORACLE_TOL {
        return Err(Error::OraclePrecision { gap, tol: ORACLE_TOL });
    }
    Ok(OracleBeta {
        beta: a,
        replicate: b,
        gap,
        n_oracle,
    })
}

/// Equal-width histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            if v >= lo && v <= hi {
                let b = (((v - lo) / width) as usize).min(bins - 1);
                counts[b] += 1;
            }
        }
        Self { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IllustrationConfig {
    pub n: usize,
    pub deltas: Vec<Increment>,
    pub folds: usize,
    pub bins: usize,
    pub spread: SpreadReading,
    pub seed: SeedSpec,
}

impl Default for IllustrationConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            deltas: vec![Increment::new(0.1).unwrap(), Increment::new(0.01).unwrap()],
            folds: 2,
            bins: 40,
            spread: SpreadReading::Variance,
            seed: SeedSpec::new(0, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IllustrationResult {
    pub delta: Increment,
    pub mse_factual: f64,
    pub mse_counterfactual: f64,
    pub counterfactual_beta: Vec<f64>,
    pub test_treated_fraction: f64,
    pub hist_test_outcome: Histogram,
    pub hist_factual: Histogram,
    pub hist_counterfactual: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IllustrationStudy {
    pub config: IllustrationConfig,
    pub train_treated_fraction: f64,
    pub factual_beta: Vec<f64>,
    pub results: Vec<IllustrationResult>,
    #[serde(skip)]
    pub elapsed_seconds: f64,
}

fn least_squares(x: &DMatrix<f64>, y: &[f64]) -> Result<DVector<f64>> {
    let xtx = x.tr_mul(x);
    let xty = x.tr_mul(&DVector::from_column_slice(y));
    xtx.cholesky()
        .map(|c| c.solve(&xty))
        .ok_or_else(|| Error::Singular("factual design is rank deficient".into()))
}

fn mse(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter().zip(y).map(|(p, v)| (p - v).powi(2)).sum::<f64>() / y.len() as f64
}

/// Factual versus counterfactual prediction on a test set drawn under each
/// shifted policy.
///
/// The factual model is least squares on `(1, X, X², A)` with `A` replaced by
/// the estimated propensity at prediction time. The counterfactual model is
/// the unconstrained squared-error program on `(1, X, X²)` with cross-fitted
/// logistic and quadratic nuisances.
pub fn run_illustration(cfg: &IllustrationConfig) -> Result<IllustrationStudy> {
    let start = Instant::now();
    let dgp = IllustrationDgp { spread: cfg.spread };
    let train = dgp.generate(cfg.n, cfg.seed.substream(1))?;
    let x_only = Some(vec!["x".to_string()]);
    let quad = BasisSpec::polynomial(2, x_only.clone());

    let mut design = DMatrix::zeros(cfg.n, 4);
    let qb = quad.design(&train)?;
    design.view_mut((0, 0), (cfg.n, 3)).copy_from(&qb);
    for i in 0..cfg.n {
        design[(i, 3)] = train.a()[i] as f64;
    }
    let factual = least_squares(&design, train.y())?;
    let prop = fit_propensity_logistic(&train, &BasisSpec::raw(x_only.clone()), &vec![0; cfg.n])?;
    let prop_beta = prop.coefficients[0].clone();

    let nuis_cfg = NuisanceConfig {
        propensity_design: BasisSpec::raw(x_only.clone()),
        outcome_design: quad.clone(),
        transforms: vec![OutcomeTransform::Identity],
        folds: cfg.folds,
        clip: DEFAULT_CLIP,
    };
    let nuis = fit_nuisances(&train, &nuis_cfg, cfg.seed.substream(2))?;

    let mut results = Vec::with_capacity(cfg.deltas.len());
    for (idx, &delta) in cfg.deltas.iter().enumerate() {
        let test = dgp.generate_under(cfg.n, cfg.seed.substream(100 + idx as u64), Some(delta))?;
        let tq = quad.design(&test)?;
        let tlin = BasisSpec::raw(x_only.clone()).design(&test)?;
        let pi_hat: Vec<f64> = (tlin * &prop_beta).iter().map(|&e| expit(e)).collect();
        let fact_pred: Vec<f64> = (0..cfg.n)
            .map(|i| (0..3).map(|j| tq[(i, j)] * factual[j]).sum::<f64>() + factual[3] * pi_hat[i])
            .collect();

        let pseudo = pseudo_outcomes(&train, &nuis, delta, OutcomeTransform::Identity)?;
        let program = build_l2_program(&train, &pseudo, None, &quad, &[], 0.0)?;
        let sol = solve(&program, &SolveOptions::default())?;
        sol.require_optimal()?;
        let cf_pred: Vec<f64> = (&tq * sol.beta_vector()).iter().copied().collect();

        let y = test.y();
        let lo = y.iter().chain(&fact_pred).chain(&cf_pred).copied().fold(f64::INFINITY, f64::min);
        let hi = y.iter().chain(&fact_pred).chain(&cf_pred).copied().fold(f64::NEG_INFINITY, f64::max);
        results.push(IllustrationResult {
            delta,
            mse_factual: mse(&fact_pred, y),
            mse_counterfactual: mse(&cf_pred, y),
            counterfactual_beta: sol.beta,
            test_treated_fraction: test.a().iter().map(|&v| v as f64).sum::<f64>() / cfg.n as f64,
            hist_test_outcome: Histogram::new(y, lo, hi, cfg.bins),
            hist_factual: Histogram::new(&fact_pred, lo, hi, cfg.bins),
            hist_counterfactual: Histogram::new(&cf_pred, lo, hi, cfg.bins),
        });
    }
    Ok(IllustrationStudy {
        config: cfg.clone(),
        train_treated_fraction: train.a().iter().map(|&v| v as f64).sum::<f64>() / cfg.n as f64,
        factual_beta: factual.iter().copied().collect(),
        results,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}

impl IllustrationStudy {
    /// One row per `(δ, bin)` with the three histogram counts.
    pub fn write_histogram_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("delta,bin_lo,bin_hi,test_outcome,factual,counterfactual\n");
        for r in &self.results {
            for b in 0..r.hist_test_outcome.counts.len() {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.delta,
                    r.hist_test_outcome.edges[b],
                    r.hist_test_outcome.edges[b + 1],
                    r.hist_test_outcome.counts[b],
                    r.hist_factual.counts[b],
                    r.hist_counterfactual.counts[b]
                ));
            }
        }
        write_file(path, &out)
    }

    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("delta,mse_factual,mse_counterfactual,ratio,test_treated_fraction\n");
        for r in &self.results {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.delta,
                r.mse_factual,
                r.mse_counterfactual,
                r.mse_factual / r.mse_counterfactual,
                r.test_treated_fraction
            ));
        }
        write_file(path, &out)
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseStudyConfig {
    pub n_set: Vec<usize>,
    pub deltas: Vec<Increment>,
    pub r_grid: Vec<f64>,
    pub reps: usize,
    pub eps: f64,
    pub lambda: f64,
    pub n_oracle: usize,
    pub noise: NoiseMode,
    pub seed: SeedSpec,
}

impl Default for RmseStudyConfig {
    fn default() -> Self {
        Self {
            n_set: vec![500, 1000, 5000],
            deltas: vec![Increment::new(0.1).unwrap(), Increment::new(0.01).unwrap()],
            r_grid: (0..=18).map(|k| 0.05 + 0.025 * k as f64).collect(),
            reps: 500,
            eps: 0.1,
            lambda: 0.0,
            n_oracle: ORACLE_N,
            noise: NoiseMode::Shared,
            seed: SeedSpec::new(0, 0),
        }
    }
}

impl RmseStudyConfig {
    /// Basis `(1, X₁, X₂)`.
    pub fn basis() -> BasisSpec {
        BasisSpec::raw(Some(vec!["x1".into(), "x2".into()]))
    }

    fn constraints(&self) -> Vec<ConstraintSpec> {
        vec![ConstraintSpec::StatisticalParity { eps: self.eps }]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub n: usize,
    pub delta: Increment,
    pub r: f64,
    pub rep: usize,
    /// `None` when the replicate failed to solve.
    pub beta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub n: usize,
    pub delta: Increment,
    pub r: f64,
    pub reps: usize,
    pub failed: usize,
    /// `sqrt(mean over replicates of ‖β̂ − β*‖²)`.
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub delta: Increment,
    pub oracle: OracleBeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseStudy {
    pub config: RmseStudyConfig,
    pub basis: Vec<String>,
    pub oracles: Vec<OracleRecord>,
    pub rows: Vec<RmseRow>,
    pub replicates: Vec<ReplicateRecord>,
    #[serde(skip)]
    pub elapsed_seconds: f64,
}

fn replicate(
    cfg: &RmseStudyConfig,
    n: usize,
    rep: usize,
    basis: &BasisSpec,
    constraints: &[ConstraintSpec],
) -> Result<Vec<ReplicateRecord>> {
    // one dataset and one standardized corruption draw per (n, rep), shared
    // across δ and r
    let stream = SeedSpec::new(cfg.seed.master_seed, cfg.seed.stream_index)
        .substream(n as u64)
        .substream(rep as u64);
    let data = gen_simulation(n, stream.substream(1))?;
    let mut out = Vec::with_capacity(cfg.deltas.len() * cfg.r_grid.len());
    for &delta in &cfg.deltas {
        for &r in &cfg.r_grid {
            let nuis = corrupted_oracle_nuisances(
                &data,
                &SimulationDgp,
                &[OutcomeTransform::Identity],
                r,
                stream.substream(2),
                cfg.noise,
                DEFAULT_CLIP,
            )?;
            let beta = pseudo_outcomes(&data, &nuis, delta, OutcomeTransform::Identity)
                .and_then(|p| build_l2_program(&data, &p, None, basis, constraints, cfg.lambda))
                .and_then(|prog| solve(&prog, &SolveOptions::default()))
                .and_then(|s| s.require_optimal().map(|_| s.beta));
            let beta = match beta {
                Ok(b) => Some(b),
                Err(e @ (Error::Solver(_) | Error::DegenerateGroup(_))) => {
                    log::warn!("replicate n={n} δ={delta} r={r} rep={rep} skipped: {e}");
                    None
                }
                Err(e) => return Err(e),
            };
            out.push(ReplicateRecord { n, delta, r, rep, beta });
        }
    }
    Ok(out)
}

/// RMSE of the parity-constrained squared-error program against its oracle
/// target, over a grid of sample sizes, increments and corruption rates.
pub fn run_rmse_study(cfg: &RmseStudyConfig) -> Result<RmseStudy> {
    let start = Instant::now();
    if cfg.reps == 0 || cfg.n_set.is_empty() || cfg.deltas.is_empty() || cfg.r_grid.is_empty() {
        return Err(Error::Argument("study grid is empty".into()));
    }
    if let Some(r) = cfg.r_grid.iter().find(|r| !(**r > 0.0 && **r < 0.5)) {
        return Err(Error::Argument(format!("rate exponent must lie in (0, 0.5), got {r}")));
    }
    if cfg.deltas.iter().any(|d| d.is_zero() || d.is_infinite()) {
        return Err(Error::Argument("study increments must be finite and positive".into()));
    }
    let basis = RmseStudyConfig::basis();
    let constraints = cfg.constraints();
    let mut oracles = Vec::with_capacity(cfg.deltas.len());
    for (i, &delta) in cfg.deltas.iter().enumerate() {
        log::info!("oracle target for δ={delta}");
        let oracle = oracle_beta(
            &SimulationDgp,
            Loss::L2,
            &basis,
            &constraints,
            delta,
            cfg.n_oracle,
            cfg.seed.substream(0x07ac1e_u64 ^ i as u64),
        )?;
        oracles.push(OracleRecord { delta, oracle });
    }

    let tasks: Vec<(usize, usize)> =
        cfg.n_set.iter().flat_map(|&n| (0..cfg.reps).map(move |rep| (n, rep))).collect();
    let chunks: Vec<Result<Vec<ReplicateRecord>>> = tasks
        .par_iter()
        .map(|&(n, rep)| replicate(cfg, n, rep, &basis, &constraints))
        .collect();
    let mut replicates = Vec::with_capacity(tasks.len() * cfg.deltas.len() * cfg.r_grid.len());
    for c in chunks {
        replicates.extend(c?);
    }
    replicates.sort_by(|a, b| {
        (a.n, a.delta.value(), a.r, a.rep)
            .partial_cmp(&(b.n, b.delta.value(), b.r, b.rep))
            .expect("finite keys")
    });

    let mut rows = Vec::new();
    for &n in &cfg.n_set {
        for (di, &delta) in cfg.deltas.iter().enumerate() {
            let target = &oracles[di].oracle.beta;
            for &r in &cfg.r_grid {
                let cell: Vec<&ReplicateRecord> = replicates
                    .iter()
                    .filter(|x| x.n == n && x.delta == delta && x.r == r)
                    .collect();
                let ok: Vec<&Vec<f64>> = cell.iter().filter_map(|x| x.beta.as_ref()).collect();
                let sq: f64 = ok
                    .iter()
                    .map(|b| b.iter().zip(target).map(|(u, v)| (u - v).powi(2)).sum::<f64>())
                    .sum();
                rows.push(RmseRow {
                    n,
                    delta,
                    r,
                    reps: cell.len(),
                    failed: cell.len() - ok.len(),
                    rmse: if ok.is_empty() { f64::NAN } else { (sq / ok.len() as f64).sqrt() },
                });
            }
        }
    }
    let basis_labels = vec!["(intercept)".to_string(), "x1".to_string(), "x2".to_string()];
    Ok(RmseStudy {
        config: cfg.clone(),
        basis: basis_labels,
        oracles,
        rows,
        replicates,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}

impl RmseStudy {
    pub fn rmse(&self, n: usize, delta: Increment, r: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|row| row.n == n && row.delta == delta && (row.r - r).abs() < 1e-12)
            .map(|row| row.rmse)
    }

    /// Columns `n,delta,r,reps,failed,rmse`.
    pub fn write_rmse_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("n,delta,r,reps,failed,rmse\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.n, row.delta, row.r, row.reps, row.failed, row.rmse
            ));
        }
        write_file(path, &out)
    }

    /// Columns `n,delta,r,rep,status,beta_0,…`.
    pub fn write_replicates_csv(&self, path: &Path) -> Result<()> {
        let k = self.basis.len();
        let mut out = String::from("n,delta,r,rep,status");
        for j in 0..k {
            out.push_str(&format!(",beta_{j}"));
        }
        out.push('\n');
        for rec in &self.replicates {
            out.push_str(&format!("{},{},{},{}", rec.n, rec.delta, rec.r, rec.rep));
            match &rec.beta {
                Some(b) => {
                    out.push_str(",ok");
                    for v in b {
                        out.push_str(&format!(",{v}"));
                    }
                }
                None => {
                    out.push_str(",failed");
                    for _ in 0..k {
                        out.push(',');
                    }
                }
            }
            out.push('\n');
        }
        write_file(path, &out)
    }
}
