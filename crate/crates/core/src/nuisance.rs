//! Nuisance estimation: propensity `π₁(X)` and arm-wise outcome regressions
//! `μₐ(X) = E[t(Y) | X, A=a]` for each outcome transform `t`.
//!
//! Built-in learners are logistic regression (damped IRLS) and polynomial
//! least squares. Predictions are out-of-fold whenever more than one fold is
//! used. For rate experiments, [`corrupted_oracle_nuisances`] perturbs known
//! nuisance functions by noise of order `n^{-r}`.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::data::{split_folds, Dataset, SeedSpec};
use crate::error::{Error, Result};

pub const DEFAULT_CLIP: f64 = 1e-3;

pub fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Outcome transform applied before regression and pseudo-outcome
/// construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeTransform {
    Identity,
    Square,
    Log1p,
    Log1pSquare,
    PositiveIndicator,
}

impl OutcomeTransform {
    pub const ALL: [OutcomeTransform; 5] = [
        OutcomeTransform::Identity,
        OutcomeTransform::Square,
        OutcomeTransform::Log1p,
        OutcomeTransform::Log1pSquare,
        OutcomeTransform::PositiveIndicator,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            OutcomeTransform::Identity => "identity",
            OutcomeTransform::Square => "square",
            OutcomeTransform::Log1p => "log1p",
            OutcomeTransform::Log1pSquare => "log1p_square",
            OutcomeTransform::PositiveIndicator => "positive_indicator",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.tag() == tag)
    }

    pub fn apply(self, y: f64) -> f64 {
        match self {
            OutcomeTransform::Identity => y,
            OutcomeTransform::Square => y * y,
            OutcomeTransform::Log1p => y.ln_1p(),
            OutcomeTransform::Log1pSquare => {
                let l = y.ln_1p();
                l * l
            }
            OutcomeTransform::PositiveIndicator => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Transforms an outcome column, rejecting values outside the domain.
    pub fn apply_all(self, ys: &[f64]) -> Result<Vec<f64>> {
        if matches!(self, OutcomeTransform::Log1p | OutcomeTransform::Log1pSquare) {
            if let Some(i) = ys.iter().position(|&y| y <= -1.0) {
                return Err(Error::Domain(format!(
                    "{} requires Y > -1 (row {} has {})",
                    self.tag(),
                    i + 1,
                    ys[i]
                )));
            }
        }
        Ok(ys.iter().map(|&y| self.apply(y)).collect())
    }
}

/// Per-observation nuisance estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceFit {
    pi1: Vec<f64>,
    mu: BTreeMap<OutcomeTransform, (Vec<f64>, Vec<f64>)>,
    fold_of: Vec<usize>,
    clip: f64,
    pub warnings: Vec<String>,
}

impl NuisanceFit {
    /// Assembles a fit; `pi1` is clipped into `[clip, 1 - clip]`.
    pub fn new(
        pi1: Vec<f64>,
        mu: BTreeMap<OutcomeTransform, (Vec<f64>, Vec<f64>)>,
        fold_of: Vec<usize>,
        clip: f64,
    ) -> Result<Self> {
        if !(clip > 0.0 && clip < 0.5) {
            return Err(Error::Argument(format!("clip must lie in (0, 0.5), got {clip}")));
        }
        let n = pi1.len();
        if fold_of.len() != n {
            return Err(Error::Schema("fold assignment length differs from pi1".into()));
        }
        for (tag, (m0, m1)) in &mu {
            if m0.len() != n || m1.len() != n {
                return Err(Error::Schema(format!("mu_{} length differs from n", tag.tag())));
            }
            if m0.iter().chain(m1).any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("non-finite mu_{}", tag.tag())));
            }
        }
        if pi1.iter().any(|p| !p.is_finite()) {
            return Err(Error::Domain("non-finite propensity".into()));
        }
        let pi1 = pi1.into_iter().map(|p| p.clamp(clip, 1.0 - clip)).collect();
        Ok(Self {
            pi1,
            mu,
            fold_of,
            clip,
            warnings: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.pi1.len()
    }

    pub fn pi1(&self) -> &[f64] {
        &self.pi1
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    pub fn fold_of(&self) -> &[usize] {
        &self.fold_of
    }

    pub fn transforms(&self) -> impl Iterator<Item = OutcomeTransform> + '_ {
        self.mu.keys().copied()
    }

    /// `(μ̂₀, μ̂₁)` for a transform.
    pub fn mu(&self, tag: OutcomeTransform) -> Result<(&[f64], &[f64])> {
        self.mu
            .get(&tag)
            .map(|(m0, m1)| (m0.as_slice(), m1.as_slice()))
            .ok_or_else(|| {
                Error::Config(format!("nuisance fit has no outcome model for `{}`", tag.tag()))
            })
    }

    /// Row subset, keeping fold tags.
    pub fn select_rows(&self, rows: &[usize]) -> NuisanceFit {
        let pick = |v: &[f64]| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        NuisanceFit {
            pi1: pick(&self.pi1),
            mu: self
                .mu
                .iter()
                .map(|(t, (m0, m1))| (*t, (pick(m0), pick(m1))))
                .collect(),
            fold_of: rows.iter().map(|&i| self.fold_of[i]).collect(),
            clip: self.clip,
            warnings: self.warnings.clone(),
        }
    }

    /// Writes `pi1, mu0_<tag>, mu1_<tag>` columns in row order.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["pi1".to_string()];
        for t in self.mu.keys() {
            header.push(format!("mu0_{}", t.tag()));
            header.push(format!("mu1_{}", t.tag()));
        }
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![format!("{:?}", self.pi1[i])];
            for (m0, m1) in self.mu.values() {
                rec.push(format!("{:?}", m0[i]));
                rec.push(format!("{:?}", m1[i]));
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Imports externally fitted nuisances from a CSV aligned with the
    /// dataset row order.
    pub fn read_csv(path: &Path, n: usize, clip: f64) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let pi_col = headers
            .iter()
            .position(|h| h == "pi1")
            .ok_or_else(|| Error::Schema("nuisance file lacks `pi1`".into()))?;
        let mut tags: Vec<(OutcomeTransform, usize, usize)> = Vec::new();
        for (j, h) in headers.iter().enumerate() {
            if let Some(tag) = h.strip_prefix("mu0_") {
                let t = OutcomeTransform::from_tag(tag)
                    .ok_or_else(|| Error::Schema(format!("unknown transform tag `{tag}`")))?;
                let j1 = headers
                    .iter()
                    .position(|h| h == &format!("mu1_{tag}"))
                    .ok_or_else(|| Error::Schema(format!("`{h}` has no matching mu1_{tag}")))?;
                tags.push((t, j, j1));
            }
        }
        let mut pi1 = Vec::with_capacity(n);
        let mut mu: BTreeMap<OutcomeTransform, (Vec<f64>, Vec<f64>)> =
            tags.iter().map(|&(t, _, _)| (t, (Vec::new(), Vec::new()))).collect();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let cell = |j: usize| -> Result<f64> {
                rec.get(j)
                    .and_then(|s| s.parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        row: row + 1,
                        column: headers[j].clone(),
                        message: "expected a finite number".into(),
                    })
            };
            pi1.push(cell(pi_col)?);
            for &(t, j0, j1) in &tags {
                let e = mu.get_mut(&t).expect("tag registered");
                e.0.push(cell(j0)?);
                e.1.push(cell(j1)?);
            }
        }
        if pi1.len() != n {
            return Err(Error::Schema(format!(
                "nuisance file has {} rows, dataset has {n}",
                pi1.len()
            )));
        }
        if let Some(i) = pi1.iter().position(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::Parse {
                row: i + 1,
                column: "pi1".into(),
                message: "propensity must lie in (0, 1)".into(),
            });
        }
        NuisanceFit::new(pi1, mu, vec![0; n], clip)
    }
}

fn fold_count(folds: &[usize]) -> usize {
    folds.iter().copied().max().map_or(1, |m| m + 1)
}

/// Training/prediction row split for fold `j`. With a single fold the model
/// is trained and evaluated on all rows.
fn fold_rows(folds: &[usize], j: usize) -> (Vec<usize>, Vec<usize>) {
    let k = fold_count(folds);
    let eval: Vec<usize> = (0..folds.len()).filter(|&i| folds[i] == j).collect();
    let train = if k == 1 {
        eval.clone()
    } else {
        (0..folds.len()).filter(|&i| folds[i] != j).collect()
    };
    (train, eval)
}

fn gram(x: &DMatrix<f64>, rows: &[usize], w: Option<&[f64]>) -> DMatrix<f64> {
    let m = x.ncols();
    let mut g = DMatrix::zeros(m, m);
    for (t, &i) in rows.iter().enumerate() {
        let wi = w.map_or(1.0, |w| w[t]);
        for a in 0..m {
            let xa = x[(i, a)] * wi;
            for b in a..m {
                g[(a, b)] += xa * x[(i, b)];
            }
        }
    }
    for a in 0..m {
        for b in 0..a {
            g[(a, b)] = g[(b, a)];
        }
    }
    g
}

fn condition_ok(g: &DMatrix<f64>) -> bool {
    let eig = g.clone().symmetric_eigen().eigenvalues;
    let max = eig.iter().cloned().fold(0.0_f64, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    max > 0.0 && min > 1e-12 * max
}

/// Result of a cross-fitted logistic regression.
#[derive(Debug, Clone)]
pub struct PropensityFit {
    /// Out-of-fold `π̂₁(Xᵢ)`, unclipped.
    pub pi1: Vec<f64>,
    /// Coefficients per fold.
    pub coefficients: Vec<DVector<f64>>,
    pub warnings: Vec<String>,
}

fn log_likelihood(x: &DMatrix<f64>, a: &[u8], rows: &[usize], beta: &DVector<f64>) -> f64 {
    rows.iter()
        .map(|&i| {
            let eta = x.row(i).transpose().dot(beta);
            // log(1 + e^eta) computed stably
            let softplus = if eta > 0.0 {
                eta + (-eta).exp().ln_1p()
            } else {
                eta.exp().ln_1p()
            };
            a[i] as f64 * eta - softplus
        })
        .sum()
}

/// Damped Newton (IRLS) for logistic regression on the given rows.
fn irls(
    x: &DMatrix<f64>,
    a: &[u8],
    rows: &[usize],
) -> Result<(DVector<f64>, Option<String>)> {
    let m = x.ncols();
    let n = rows.len() as f64;
    if !condition_ok(&gram(x, rows, None)) {
        return Err(Error::Singular(
            "propensity design is rank deficient on a training fold".into(),
        ));
    }
    let mut beta = DVector::zeros(m);
    let mut ll = log_likelihood(x, a, rows, &beta);
    for _ in 0..200 {
        let mut grad = DVector::zeros(m);
        let mut w = Vec::with_capacity(rows.len());
        for &i in rows {
            let p = expit(x.row(i).transpose().dot(&beta));
            grad += x.row(i).transpose() * (a[i] as f64 - p);
            w.push(p * (1.0 - p));
        }
        grad /= n;
        if grad.amax() <= 1e-8 {
            break;
        }
        let mut hess = gram(x, rows, Some(&w)) / n;
        // a vanishing weight matrix means fitted probabilities at 0/1
        let floor = 1e-12 * hess.trace().max(1e-300);
        for d in 0..m {
            hess[(d, d)] += floor;
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => grad.clone(),
        };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..60 {
            let cand = &beta + &step * t;
            let cand_ll = log_likelihood(x, a, rows, &cand);
            if cand_ll >= ll - 1e-12 * ll.abs() {
                beta = cand;
                ll = cand_ll;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved || beta.norm() > 1e4 {
            break;
        }
    }
    let max_eta = rows
        .iter()
        .map(|&i| x.row(i).transpose().dot(&beta).abs())
        .fold(0.0, f64::max);
    let warning = (beta.norm() > 1e4 || max_eta > 30.0).then(|| {
        format!(
            "possible perfect separation in propensity model (|beta|={:.3e}); predictions will be clipped",
            beta.norm()
        )
    });
    Ok((beta, warning))
}

/// Cross-fitted logistic regression of `A` on `b(X)`.
pub fn fit_propensity_logistic(
    data: &Dataset,
    design: &BasisSpec,
    folds: &[usize],
) -> Result<PropensityFit> {
    if folds.len() != data.n() {
        return Err(Error::Argument("fold assignment length differs from n".into()));
    }
    let x = design.design(data)?;
    let mut pi1 = vec![0.0; data.n()];
    let mut coefficients = Vec::new();
    let mut warnings = Vec::new();
    for j in 0..fold_count(folds) {
        let (train, eval) = fold_rows(folds, j);
        let (beta, warning) = irls(&x, data.a(), &train)?;
        if let Some(w) = warning {
            warn!("{w}");
            warnings.push(w);
        }
        for &i in &eval {
            pi1[i] = expit(x.row(i).transpose().dot(&beta));
        }
        coefficients.push(beta);
    }
    Ok(PropensityFit {
        pi1,
        coefficients,
        warnings,
    })
}

/// Result of a cross-fitted arm-wise least-squares fit.
#[derive(Debug, Clone)]
pub struct OutcomeFit {
    /// Out-of-fold `μ̂ₐ(Xᵢ)` for every row (both arms).
    pub prediction: Vec<f64>,
    pub coefficients: Vec<DVector<f64>>,
    pub warnings: Vec<String>,
}

/// Least squares of `t(Y)` on `b(X)` using rows with `A = arm`.
pub fn fit_outcome_ls(
    data: &Dataset,
    transform: OutcomeTransform,
    arm: u8,
    design: &BasisSpec,
    folds: &[usize],
) -> Result<OutcomeFit> {
    if arm > 1 {
        return Err(Error::Argument(format!("arm must be 0 or 1, got {arm}")));
    }
    if folds.len() != data.n() {
        return Err(Error::Argument("fold assignment length differs from n".into()));
    }
    let x = design.design(data)?;
    let z = transform.apply_all(data.y())?;
    let m = x.ncols();
    let mut prediction = vec![0.0; data.n()];
    let mut coefficients = Vec::new();
    let mut warnings = Vec::new();
    for j in 0..fold_count(folds) {
        let (train, eval) = fold_rows(folds, j);
        let arm_rows: Vec<usize> = train.into_iter().filter(|&i| data.a()[i] == arm).collect();
        if arm_rows.len() < m {
            return Err(Error::InsufficientArmData {
                arm,
                fold: j,
                have: arm_rows.len(),
                need: m,
            });
        }
        let mut g = gram(&x, &arm_rows, None);
        let mut rhs = DVector::zeros(m);
        for &i in &arm_rows {
            rhs += x.row(i).transpose() * z[i];
        }
        if !condition_ok(&g) {
            let ridge = 1e-8 * g.trace();
            let w = format!(
                "outcome design for arm {arm} (fold {j}) is rank deficient; ridge {ridge:.3e} added"
            );
            warn!("{w}");
            warnings.push(w);
            for d in 0..m {
                g[(d, d)] += ridge;
            }
        }
        let ch = g
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular("outcome normal equations".into()))?;
        let mut beta = ch.solve(&rhs);
        // one round of iterative refinement keeps the relative residual tiny
        let resid = &rhs - &g * &beta;
        beta += ch.solve(&resid);
        for &i in &eval {
            prediction[i] = x.row(i).transpose().dot(&beta);
        }
        coefficients.push(beta);
    }
    Ok(OutcomeFit {
        prediction,
        coefficients,
        warnings,
    })
}

/// Settings for [`fit_nuisances`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceConfig {
    pub propensity_design: BasisSpec,
    pub outcome_design: BasisSpec,
    pub transforms: Vec<OutcomeTransform>,
    pub folds: usize,
    pub clip: f64,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self {
            propensity_design: BasisSpec::raw(None),
            outcome_design: BasisSpec::raw(None),
            transforms: vec![OutcomeTransform::Identity],
            folds: 2,
            clip: DEFAULT_CLIP,
        }
    }
}

/// Fits the propensity and every requested outcome model on a shared fold
/// assignment.
pub fn fit_nuisances(data: &Dataset, cfg: &NuisanceConfig, seed: SeedSpec) -> Result<NuisanceFit> {
    let folds = split_folds(data.n(), cfg.folds, seed)?;
    let prop = fit_propensity_logistic(data, &cfg.propensity_design, &folds)?;
    let mut warnings = prop.warnings;
    let mut mu = BTreeMap::new();
    for &t in &cfg.transforms {
        let m0 = fit_outcome_ls(data, t, 0, &cfg.outcome_design, &folds)?;
        let m1 = fit_outcome_ls(data, t, 1, &cfg.outcome_design, &folds)?;
        warnings.extend(m0.warnings);
        warnings.extend(m1.warnings);
        mu.insert(t, (m0.prediction, m1.prediction));
    }
    let mut fit = NuisanceFit::new(prop.pi1, mu, folds, cfg.clip)?;
    fit.warnings = warnings;
    Ok(fit)
}

/// Closed-form nuisance functions of a known data-generating process.
pub trait OracleNuisance: Sync {
    /// `π₁(x)` for one covariate row.
    fn pi1(&self, x: &[f64]) -> f64;
    /// `E[t(Y) | X=x, A=arm]`, or `None` when no closed form exists for `t`.
    fn mu(&self, transform: OutcomeTransform, arm: u8, x: &[f64]) -> Option<f64>;
}

fn oracle_columns(
    data: &Dataset,
    truth: &dyn OracleNuisance,
    transforms: &[OutcomeTransform],
) -> Result<(Vec<f64>, BTreeMap<OutcomeTransform, (Vec<f64>, Vec<f64>)>)> {
    let n = data.n();
    let mut row = vec![0.0; data.p()];
    let mut pi1 = Vec::with_capacity(n);
    let mut mu: BTreeMap<OutcomeTransform, (Vec<f64>, Vec<f64>)> = transforms
        .iter()
        .map(|&t| (t, (Vec::with_capacity(n), Vec::with_capacity(n))))
        .collect();
    for i in 0..n {
        for (j, v) in row.iter_mut().enumerate() {
            *v = data.x()[(i, j)];
        }
        pi1.push(truth.pi1(&row));
        for (&t, (m0, m1)) in mu.iter_mut() {
            let missing = || Error::Config(format!("oracle has no closed form for `{}`", t.tag()));
            m0.push(truth.mu(t, 0, &row).ok_or_else(missing)?);
            m1.push(truth.mu(t, 1, &row).ok_or_else(missing)?);
        }
    }
    Ok((pi1, mu))
}

/// Exact nuisances from a known process (clipping still applies).
pub fn exact_nuisances(
    data: &Dataset,
    truth: &dyn OracleNuisance,
    transforms: &[OutcomeTransform],
    clip: f64,
) -> Result<NuisanceFit> {
    let (pi1, mu) = oracle_columns(data, truth, transforms)?;
    NuisanceFit::new(pi1, mu, vec![0; data.n()], clip)
}

/// How the corruption noise is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// One `ε_π` and one `ε_μ` per replication, added to every observation.
    #[default]
    Shared,
    /// Independent draws per observation.
    PerObservation,
}

/// Oracle nuisances perturbed at rate `n^{-r}`:
/// `π̂ = expit(logit π + ε_π)`, `μ̂ₐ = μₐ + ε_μ`, with
/// `ε ~ N(n^{-r}, n^{-2r})`.
pub fn corrupted_oracle_nuisances(
    data: &Dataset,
    truth: &dyn OracleNuisance,
    transforms: &[OutcomeTransform],
    r: f64,
    seed: SeedSpec,
    mode: NoiseMode,
    clip: f64,
) -> Result<NuisanceFit> {
    if !(r > 0.0 && r < 0.5) {
        return Err(Error::Argument(format!("rate exponent must lie in (0, 0.5), got {r}")));
    }
    let n = data.n();
    let scale = (n as f64).powf(-r);
    let noise = Normal::new(scale, scale).expect("positive scale");
    let mut rng = seed.rng();
    let (pi1, mut mu) = oracle_columns(data, truth, transforms)?;
    let pi1 = match mode {
        NoiseMode::Shared => {
            let e = noise.sample(&mut rng);
            pi1.into_iter().map(|p| expit(logit(p) + e)).collect::<Vec<_>>()
        }
        NoiseMode::PerObservation => pi1
            .into_iter()
            .map(|p| expit(logit(p) + noise.sample(&mut rng)))
            .collect(),
    };
    match mode {
        NoiseMode::Shared => {
            let e = noise.sample(&mut rng);
            for (m0, m1) in mu.values_mut() {
                m0.iter_mut().chain(m1.iter_mut()).for_each(|v| *v += e);
            }
        }
        NoiseMode::PerObservation => {
            for (m0, m1) in mu.values_mut() {
                for i in 0..n {
                    let e = noise.sample(&mut rng);
                    m0[i] += e;
                    m1[i] += e;
                }
            }
        }
    }
    NuisanceFit::new(pi1, mu, vec![0; n], clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Bernoulli, Uniform};

    fn intercept_data(a: Vec<u8>, y: Vec<f64>) -> Dataset {
        let n = a.len();
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64);
        Dataset::new(y, a, x, vec!["x".into()]).unwrap()
    }

    #[test]
    fn intercept_only_propensity() {
        let d = intercept_data(vec![1, 0, 1, 0], vec![0.0; 4]);
        let fit = fit_propensity_logistic(&d, &BasisSpec::intercept_only(), &[0; 4]).unwrap();
        assert!(fit.pi1.iter().all(|p| (p - 0.5).abs() < 1e-10));

        let d = intercept_data(vec![1, 1, 1, 0], vec![0.0; 4]);
        let fit = fit_propensity_logistic(&d, &BasisSpec::intercept_only(), &[0; 4]).unwrap();
        assert!(fit.pi1.iter().all(|p| (p - 0.75).abs() < 1e-9));
        assert!((fit.coefficients[0][0] - logit(0.75)).abs() < 1e-8);
    }

    #[test]
    fn logistic_matches_grid_search() {
        let a: Vec<u8> = (0..37).map(|i| u8::from(i % 3 != 0)).collect();
        let d = intercept_data(a.clone(), vec![0.0; 37]);
        let fit = fit_propensity_logistic(&d, &BasisSpec::intercept_only(), &[0; 37]).unwrap();
        let ll = |b: f64| {
            a.iter()
                .map(|&ai| ai as f64 * b - (1.0 + b.exp()).ln())
                .sum::<f64>()
        };
        let (mut best, mut best_ll) = (0.0, f64::NEG_INFINITY);
        let mut b = -5.0;
        while b <= 5.0 {
            if ll(b) > best_ll {
                best_ll = ll(b);
                best = b;
            }
            b += 1e-5;
        }
        assert!((fit.coefficients[0][0] - best).abs() < 1e-4);
    }

    #[test]
    fn rank_deficient_propensity_is_singular() {
        let x = DMatrix::from_fn(6, 2, |i, j| if j == 0 { i as f64 } else { 2.0 * i as f64 });
        let d = Dataset::new(vec![0.0; 6], vec![0, 1, 0, 1, 1, 0], x, vec!["u".into(), "v".into()])
            .unwrap();
        let r = fit_propensity_logistic(&d, &BasisSpec::raw(None), &[0; 6]);
        assert!(matches!(r, Err(Error::Singular(_))));
    }

    #[test]
    fn separation_warns_and_stays_finite() {
        let x = DMatrix::from_fn(6, 1, |i, _| i as f64);
        let d = Dataset::new(vec![0.0; 6], vec![0, 0, 0, 1, 1, 1], x, vec!["x".into()]).unwrap();
        let fit = fit_propensity_logistic(&d, &BasisSpec::raw(None), &[0; 6]).unwrap();
        assert!(!fit.warnings.is_empty());
        assert!(fit.pi1.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn simulated_logistic_recovers_coefficients() {
        let mut rng = SeedSpec::new(11, 0).rng();
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.sample(Uniform::new(0.0, 10.0).unwrap())).collect();
        let a: Vec<u8> = xs
            .iter()
            .map(|&x| u8::from(rng.sample(Bernoulli::new(expit(2.8 - 0.3 * x)).unwrap())))
            .collect();
        let d = Dataset::new(vec![0.0; n], a, DMatrix::from_vec(n, 1, xs), vec!["x".into()])
            .unwrap();
        let fit = fit_propensity_logistic(&d, &BasisSpec::raw(None), &vec![0; n]).unwrap();
        let b = &fit.coefficients[0];
        assert!((b[0] - 2.8).abs() < 0.05, "intercept {}", b[0]);
        assert!((b[1] + 0.3).abs() < 0.05, "slope {}", b[1]);
    }

    #[test]
    fn outcome_ls_basic_cases() {
        let d = intercept_data(vec![1, 0, 1, 1], vec![2.0, 7.0, 2.0, 2.0]);
        let fit =
            fit_outcome_ls(&d, OutcomeTransform::Identity, 1, &BasisSpec::intercept_only(), &[0; 4])
                .unwrap();
        assert!(fit.prediction.iter().all(|v| (v - 2.0).abs() < 1e-12));
        let fit =
            fit_outcome_ls(&d, OutcomeTransform::Square, 1, &BasisSpec::intercept_only(), &[0; 4])
                .unwrap();
        assert!(fit.prediction.iter().all(|v| (v - 4.0).abs() < 1e-12));
        let r = fit_outcome_ls(&d, OutcomeTransform::Identity, 0, &BasisSpec::raw(None), &[0; 4]);
        assert!(matches!(r, Err(Error::InsufficientArmData { arm: 0, .. })));
    }

    #[test]
    fn outcome_ls_ridge_fallback_on_collinear_design() {
        let x = DMatrix::from_fn(8, 2, |i, j| (i as f64) * (j as f64 + 1.0));
        let y: Vec<f64> = (0..8).map(|i| 1.0 + i as f64).collect();
        let d = Dataset::new(y, vec![1; 8], x, vec!["u".into(), "v".into()]).unwrap();
        let fit =
            fit_outcome_ls(&d, OutcomeTransform::Identity, 1, &BasisSpec::raw(None), &[0; 8])
                .unwrap();
        assert_eq!(fit.warnings.len(), 1);
        for (i, p) in fit.prediction.iter().enumerate() {
            assert!((p - (1.0 + i as f64)).abs() < 1e-4);
        }
    }

    #[test]
    fn simulated_outcome_regression_recovers_mean_function() {
        let mut rng = SeedSpec::new(12, 0).rng();
        let n = 100_000;
        let unif = Uniform::new(0.0, 10.0).unwrap();
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x: f64 = rng.sample(unif);
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            xs.push(x);
            ys.push(1.0 + 0.75 * x + 0.5 * x * x + x.sqrt() * e);
        }
        let d = Dataset::new(ys, vec![0; n], DMatrix::from_vec(n, 1, xs), vec!["x".into()])
            .unwrap();
        let fit = fit_outcome_ls(
            &d,
            OutcomeTransform::Identity,
            0,
            &BasisSpec::polynomial(2, None),
            &vec![0; n],
        )
        .unwrap();
        let b = &fit.coefficients[0];
        for (got, want) in b.iter().zip([1.0, 0.75, 0.5]) {
            assert!((got - want).abs() < 0.05, "{got} vs {want}");
        }
    }

    #[test]
    fn predictions_are_out_of_fold() {
        let n = 20;
        let x = DMatrix::from_fn(n, 1, |i, _| (i as f64 * 0.37).sin());
        let y: Vec<f64> = (0..n).map(|i| (i as f64 * 1.3).cos()).collect();
        let a: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 0 || i % 5 == 0)).collect();
        let d = Dataset::new(y.clone(), a.clone(), x.clone(), vec!["x".into()]).unwrap();
        let folds = split_folds(n, 2, SeedSpec::new(3, 0)).unwrap();
        let design = BasisSpec::raw(None);
        let base = fit_outcome_ls(&d, OutcomeTransform::Identity, 1, &design, &folds).unwrap();
        let pbase = fit_propensity_logistic(&d, &design, &folds).unwrap();
        for i in 0..n {
            let mut y2 = y.clone();
            y2[i] += 100.0;
            let mut a2 = a.clone();
            a2[i] = 1 - a2[i];
            let d2 = Dataset::new(y2, a.clone(), x.clone(), vec!["x".into()]).unwrap();
            let fit = fit_outcome_ls(&d2, OutcomeTransform::Identity, 1, &design, &folds).unwrap();
            assert!((fit.prediction[i] - base.prediction[i]).abs() < 1e-9);
            let d3 = Dataset::new(y.clone(), a2, x.clone(), vec!["x".into()]).unwrap();
            let p = fit_propensity_logistic(&d3, &design, &folds).unwrap();
            assert!((p.pi1[i] - pbase.pi1[i]).abs() < 1e-9);
        }
    }

    struct Flat;
    impl OracleNuisance for Flat {
        fn pi1(&self, _: &[f64]) -> f64 {
            0.3
        }
        fn mu(&self, t: OutcomeTransform, arm: u8, _: &[f64]) -> Option<f64> {
            (t == OutcomeTransform::Identity).then_some(arm as f64 * 2.0)
        }
    }

    #[test]
    fn corruption_scale_and_determinism() {
        assert!(((500.0f64).powf(-0.05) - 0.733).abs() < 1e-3);
        let n = 1_000_000;
        let d = Dataset::new(
            vec![0.0; n],
            vec![0; n],
            DMatrix::zeros(n, 1),
            vec!["x".into()],
        )
        .unwrap();
        let seed = SeedSpec::new(5, 1);
        let tags = [OutcomeTransform::Identity];
        let fit = corrupted_oracle_nuisances(&d, &Flat, &tags, 0.45, seed, NoiseMode::Shared, 1e-3)
            .unwrap();
        let gap_pi = fit.pi1().iter().map(|p| (p - 0.3).abs()).fold(0.0, f64::max);
        let (m0, m1) = fit.mu(OutcomeTransform::Identity).unwrap();
        let gap_mu = m0
            .iter()
            .map(|v| v.abs())
            .chain(m1.iter().map(|v| (v - 2.0).abs()))
            .fold(0.0, f64::max);
        // the noise is centred at n^{-r} ≈ 2.0e-3, so μ moves by a few multiples of that
        let scale = (n as f64).powf(-0.45);
        assert!(gap_pi < 1e-3, "{gap_pi}");
        assert!(gap_mu < 5.0 * scale, "{gap_mu}");
        let again =
            corrupted_oracle_nuisances(&d, &Flat, &tags, 0.45, seed, NoiseMode::Shared, 1e-3)
                .unwrap();
        assert_eq!(fit, again);
        assert!(
            corrupted_oracle_nuisances(&d, &Flat, &tags, 0.5, seed, NoiseMode::Shared, 1e-3)
                .is_err()
        );
        assert!(matches!(
            exact_nuisances(&d, &Flat, &[OutcomeTransform::Square], 1e-3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn clipping_bounds_propensity() {
        let fit = NuisanceFit::new(vec![0.0, 1e-9, 0.5, 1.0], BTreeMap::new(), vec![0; 4], 1e-3)
            .unwrap();
        assert!(fit.pi1().iter().all(|&p| (1e-3..=1.0 - 1e-3).contains(&p)));
        assert!(matches!(fit.mu(OutcomeTransform::Identity), Err(Error::Config(_))));
    }

    #[test]
    fn nuisance_csv_round_trip() {
        let mut mu = BTreeMap::new();
        mu.insert(OutcomeTransform::Identity, (vec![0.1, 0.2], vec![1.5, -2.0]));
        mu.insert(OutcomeTransform::Square, (vec![1.0, 4.0], vec![9.0, 16.0]));
        let fit = NuisanceFit::new(vec![0.25, 0.75], mu, vec![0, 0], 1e-3).unwrap();
        let tmp = tempfile::NamedTempFile::new().unwrap();
        fit.write_csv(tmp.path()).unwrap();
        let back = NuisanceFit::read_csv(tmp.path(), 2, 1e-3).unwrap();
        assert_eq!(fit, back);
        assert!(NuisanceFit::read_csv(tmp.path(), 3, 1e-3).is_err());
    }
}
