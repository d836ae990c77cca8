//! Approximating programs.
//!
//! Each builder turns pseudo-outcomes and a basis `b(X)` into a solver-ready
//! program
//!
//! ```text
//! minimize   objective(β) + λ‖β‖²
//! subject to Cβ ≤ d
//! ```
//!
//! For the squared-error and squared-log losses the objective is the
//! quadratic `½βᵀQβ − cᵀβ` with `Q = Pₙ{bbᵀ}` and `c = Pₙ{φ b}`. For the
//! cross-entropy loss it is a smooth convex function evaluated through
//! [`SmoothObjective`]. Fairness constraints `|row·β| ≤ ε` are expanded into
//! the two rows `+row·β ≤ ε` and `−row·β ≤ ε`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use crate::basis::{BasisKind, BasisSpec, Term};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::incremental::{pseudo_outcomes, Increment, PseudoOutcomes};
use crate::nuisance::{expit, NuisanceFit, OutcomeTransform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    L2,
    CrossEntropy,
    Msle,
}

impl Loss {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(Loss::L2),
            "xent" => Ok(Loss::CrossEntropy),
            "msle" => Ok(Loss::Msle),
            _ => Err(Error::Argument(format!("unknown loss `{s}` (expected l2, xent, msle)"))),
        }
    }

    /// Outcome transform whose pseudo-outcomes enter the linear term.
    pub fn target_transform(self) -> OutcomeTransform {
        match self {
            Loss::L2 | Loss::CrossEntropy => OutcomeTransform::Identity,
            Loss::Msle => OutcomeTransform::Log1p,
        }
    }

    /// Transform whose pseudo-outcome mean is the additive risk constant.
    pub fn constant_transform(self) -> Option<OutcomeTransform> {
        match self {
            Loss::L2 => Some(OutcomeTransform::Square),
            Loss::Msle => Some(OutcomeTransform::Log1pSquare),
            Loss::CrossEntropy => None,
        }
    }

    /// Maps a linear predictor `b(X)ᵀβ` to the outcome scale.
    pub fn predict(self, eta: f64) -> f64 {
        match self {
            Loss::L2 => eta,
            Loss::Msle => eta.exp() - 1.0,
            Loss::CrossEntropy => expit(eta),
        }
    }
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Loss::L2 => "l2",
            Loss::CrossEntropy => "xent",
            Loss::Msle => "msle",
        })
    }
}

/// Requested constraint family.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintSpec {
    /// Deterministic rows `Cβ ≤ d`.
    Linear { c: DMatrix<f64>, d: DVector<f64> },
    /// `|E{f | F=0} − E{f | F=1}| ≤ ε`.
    StatisticalParity { eps: f64 },
    /// Parity within the stratum `L = level`.
    ConditionalParity { eps: f64, level: i64 },
    /// Parity among units whose counterfactual outcome is positive, with the
    /// indicator replaced by its pseudo-outcome weights.
    PositiveClassBalance { eps: f64, weights: Vec<f64> },
}

impl ConstraintSpec {
    /// Positive-class balance with weights `φ_Q(Z; 1{Y>0}, δ)`.
    pub fn positive_balance(
        data: &Dataset,
        nuis: &NuisanceFit,
        delta: Increment,
        eps: f64,
    ) -> Result<Self> {
        let w = pseudo_outcomes(data, nuis, delta, OutcomeTransform::PositiveIndicator)?;
        Ok(ConstraintSpec::PositiveClassBalance { eps, weights: w.phi })
    }

    fn eps(&self) -> Option<f64> {
        match self {
            ConstraintSpec::Linear { .. } => None,
            ConstraintSpec::StatisticalParity { eps }
            | ConstraintSpec::ConditionalParity { eps, .. }
            | ConstraintSpec::PositiveClassBalance { eps, .. } => Some(*eps),
        }
    }
}

/// Where a constraint row came from; drives per-observation influence.
#[derive(Debug, Clone, PartialEq)]
enum RowSource {
    Fixed,
    Parity {
        g0: Vec<f64>,
        g1: Vec<f64>,
        sign: f64,
    },
    Balance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintLabel {
    pub kind: String,
    pub sign: i8,
    pub eps: Option<f64>,
}

/// Objective callback for smooth programs.
pub trait SmoothObjective: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    /// Objective value, gradient and Hessian at `beta`, including the ridge.
    fn evaluate(&self, beta: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>);
    fn value(&self, beta: &DVector<f64>) -> f64 {
        self.evaluate(beta).0
    }
}

/// `−Pₙ{φ log f + (1−φ) log(1−f)} + λ‖β‖²` with `f = expit(bᵀβ)`.
#[derive(Debug, Clone)]
pub struct CrossEntropyObjective {
    basis: DMatrix<f64>,
    target: Vec<f64>,
    lambda: f64,
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

impl CrossEntropyObjective {
    pub fn new(basis: DMatrix<f64>, target: Vec<f64>, lambda: f64) -> Self {
        Self {
            basis,
            target,
            lambda,
        }
    }

    /// Per-observation gradient rows `(fᵢ − φᵢ) bᵢ` (ridge excluded).
    pub fn observation_gradients(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        let eta = &self.basis * beta;
        let mut g = self.basis.clone();
        for i in 0..g.nrows() {
            let s = expit(eta[i]) - self.target[i];
            g.row_mut(i).scale_mut(s);
        }
        g
    }
}

impl SmoothObjective for CrossEntropyObjective {
    fn dim(&self) -> usize {
        self.basis.ncols()
    }

    fn evaluate(&self, beta: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let n = self.basis.nrows() as f64;
        let k = self.dim();
        let eta = &self.basis * beta;
        let mut value = 0.0;
        let mut resid = DVector::zeros(eta.len());
        let mut w = DVector::zeros(eta.len());
        for i in 0..eta.len() {
            let phi = self.target[i];
            // -log f = softplus(-η), -log(1-f) = softplus(η)
            value += phi * softplus(-eta[i]) + (1.0 - phi) * softplus(eta[i]);
            let f = expit(eta[i]);
            resid[i] = f - phi;
            w[i] = f * (1.0 - f);
        }
        value = value / n + self.lambda * beta.norm_squared();
        let grad = self.basis.tr_mul(&resid) / n + beta * (2.0 * self.lambda);
        let mut wb = self.basis.clone();
        for i in 0..wb.nrows() {
            wb.row_mut(i).scale_mut(w[i]);
        }
        let mut hess = self.basis.tr_mul(&wb) / n;
        for d in 0..k {
            hess[(d, d)] += 2.0 * self.lambda;
        }
        (value, grad, hess)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProgramKind {
    Quadratic,
    SmoothConvex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramMeta {
    pub loss: Loss,
    pub delta: Option<Increment>,
    pub basis: Vec<String>,
    /// `Pₙ` of the squared-outcome pseudo-values, when supplied.
    pub risk_constant: Option<f64>,
    pub experimental: bool,
    pub warnings: Vec<String>,
}

/// Solver-ready approximating program.
#[derive(Debug, Clone)]
pub struct ApproxProgram {
    pub kind: ProgramKind,
    /// `Pₙ{bbᵀ}` (quadratic kind); zero for smooth programs.
    pub q: DMatrix<f64>,
    /// `Pₙ{φ b}`.
    pub c: DVector<f64>,
    pub lambda: f64,
    pub cmat: DMatrix<f64>,
    pub d: DVector<f64>,
    pub labels: Vec<ConstraintLabel>,
    pub meta: ProgramMeta,
    pub smooth: Option<Arc<dyn SmoothObjective>>,
    basis_matrix: Option<DMatrix<f64>>,
    target: Option<Vec<f64>>,
    sources: Vec<RowSource>,
}

impl ApproxProgram {
    pub fn k(&self) -> usize {
        self.c.len()
    }

    pub fn r(&self) -> usize {
        self.d.len()
    }

    pub fn n(&self) -> usize {
        self.basis_matrix.as_ref().map_or(0, |b| b.nrows())
    }

    /// Effective Hessian `Q + 2λI` of a quadratic program.
    pub fn hessian(&self) -> DMatrix<f64> {
        let mut h = self.q.clone();
        for i in 0..self.k() {
            h[(i, i)] += 2.0 * self.lambda;
        }
        h
    }

    /// Program with only deterministic rows `Cβ ≤ d`, as read from a dump.
    pub fn quadratic(
        q: DMatrix<f64>,
        c: DVector<f64>,
        lambda: f64,
        cmat: DMatrix<f64>,
        d: DVector<f64>,
    ) -> Result<Self> {
        let k = c.len();
        if q.nrows() != k || q.ncols() != k {
            return Err(Error::Argument(format!("Q must be {k}x{k}")));
        }
        if cmat.ncols() != k || cmat.nrows() != d.len() {
            return Err(Error::Argument("constraint matrix shape mismatch".into()));
        }
        if lambda < 0.0 {
            return Err(Error::Argument("lambda must be nonnegative".into()));
        }
        let r = d.len();
        Ok(Self {
            kind: ProgramKind::Quadratic,
            q,
            c,
            lambda,
            cmat,
            d,
            labels: vec![
                ConstraintLabel {
                    kind: "linear".into(),
                    sign: 1,
                    eps: None
                };
                r
            ],
            meta: ProgramMeta {
                loss: Loss::L2,
                delta: None,
                basis: (0..k).map(|j| format!("b{j}")).collect(),
                risk_constant: None,
                experimental: false,
                warnings: Vec::new(),
            },
            smooth: None,
            basis_matrix: None,
            target: None,
            sources: vec![RowSource::Fixed; r],
        })
    }

    /// Basis rows used to build the program.
    pub fn basis_matrix(&self) -> Option<&DMatrix<f64>> {
        self.basis_matrix.as_ref()
    }

    /// Pseudo-outcome targets (after clipping, for cross-entropy).
    pub fn target(&self) -> Option<&[f64]> {
        self.target.as_deref()
    }

    /// Objective including the ridge term.
    pub fn objective(&self, beta: &DVector<f64>) -> f64 {
        match (&self.kind, &self.smooth) {
            (ProgramKind::SmoothConvex, Some(s)) => s.value(beta),
            _ => 0.5 * beta.dot(&(&self.q * beta)) - self.c.dot(beta) + self.lambda * beta.norm_squared(),
        }
    }

    /// Per-observation gradient contributions at `beta` (ridge excluded), an
    /// `n × k` matrix whose column means give the objective gradient.
    pub fn observation_gradients(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let b = self
            .basis_matrix
            .as_ref()
            .ok_or_else(|| Error::Config("program carries no per-observation data".into()))?;
        let t = self.target.as_ref().expect("target stored with basis");
        match self.meta.loss {
            Loss::L2 | Loss::Msle => {
                let eta = b * beta;
                let mut g = b.clone();
                for i in 0..g.nrows() {
                    let s = eta[i] - t[i];
                    g.row_mut(i).scale_mut(s);
                }
                Ok(g)
            }
            Loss::CrossEntropy => {
                Ok(CrossEntropyObjective::new(b.clone(), t.clone(), self.lambda).observation_gradients(beta))
            }
        }
    }

    /// Per-observation influence of constraint row `j`, an `n × k` matrix,
    /// or `None` when the row is deterministic. Balance rows are plug-in only
    /// and have no influence representation.
    pub fn row_influence(&self, j: usize) -> Result<Option<DMatrix<f64>>> {
        match &self.sources[j] {
            RowSource::Fixed => Ok(None),
            RowSource::Balance => Err(Error::Config(
                "positive-class balance rows carry no inference guarantees".into(),
            )),
            RowSource::Parity { g0, g1, sign } => {
                let b = self.basis_matrix.as_ref().expect("parity rows need data");
                let n = b.nrows();
                let k = b.ncols();
                let p0 = g0.iter().sum::<f64>() / n as f64;
                let p1 = g1.iter().sum::<f64>() / n as f64;
                let m0 = group_mean(b, g0);
                let m1 = group_mean(b, g1);
                Ok(Some(DMatrix::from_fn(n, k, |i, c| {
                    sign * (g0[i] * (b[(i, c)] - m0[c]) / p0 - g1[i] * (b[(i, c)] - m1[c]) / p1)
                })))
            }
        }
    }

    /// JSON-friendly snapshot (`Q, c, C, d, λ, meta`).
    pub fn dump(&self) -> ProgramDump {
        ProgramDump {
            schema_version: 1,
            kind: self.kind,
            q: rows_of(&self.q),
            c: self.c.iter().copied().collect(),
            cmat: rows_of(&self.cmat),
            d: self.d.iter().copied().collect(),
            lambda: self.lambda,
            labels: self.labels.clone(),
            meta: Some(self.meta.clone()),
        }
    }
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Serialized quadratic program, also accepted as solver input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramDump {
    #[serde(default = "one")]
    pub schema_version: u32,
    #[serde(default = "quadratic_kind")]
    pub kind: ProgramKind,
    pub q: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    #[serde(default)]
    pub cmat: Vec<Vec<f64>>,
    #[serde(default)]
    pub d: Vec<f64>,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub labels: Vec<ConstraintLabel>,
    #[serde(default)]
    pub meta: Option<ProgramMeta>,
}

fn one() -> u32 {
    1
}

fn quadratic_kind() -> ProgramKind {
    ProgramKind::Quadratic
}

impl ProgramDump {
    pub fn into_program(self) -> Result<ApproxProgram> {
        if self.kind != ProgramKind::Quadratic {
            return Err(Error::Argument("only quadratic programs can be loaded from a dump".into()));
        }
        let k = self.c.len();
        if k == 0 {
            return Err(Error::Argument("program has dimension 0".into()));
        }
        let flat = |rows: &[Vec<f64>], width: usize, what: &str| -> Result<Vec<f64>> {
            if rows.iter().any(|r| r.len() != width) {
                return Err(Error::Argument(format!("every row of {what} must have length {width}")));
            }
            Ok(rows.iter().flatten().copied().collect())
        };
        if self.q.len() != k {
            return Err(Error::Argument(format!("Q must have {k} rows")));
        }
        let q = DMatrix::from_row_slice(k, k, &flat(&self.q, k, "Q")?);
        let r = self.cmat.len();
        let cmat = DMatrix::from_row_slice(r, k, &flat(&self.cmat, k, "C")?);
        let mut p = ApproxProgram::quadratic(q, DVector::from_vec(self.c), self.lambda, cmat, DVector::from_vec(self.d))?;
        if let Some(meta) = self.meta {
            p.meta = meta;
        }
        if self.labels.len() == r {
            p.labels = self.labels;
        }
        Ok(p)
    }
}

fn group_mean(b: &DMatrix<f64>, g: &[f64]) -> DVector<f64> {
    let total: f64 = g.iter().sum();
    let mut m = DVector::zeros(b.ncols());
    for i in 0..b.nrows() {
        if g[i] != 0.0 {
            m += b.row(i).transpose() * g[i];
        }
    }
    m / total
}

fn parity_groups(data: &Dataset, level: Option<i64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let f = data
        .f()
        .ok_or_else(|| Error::Config("sensitive feature required for parity constraints".into()))?;
    let within: Vec<bool> = match level {
        None => vec![true; data.n()],
        Some(l) => {
            let lv = data.l().ok_or_else(|| {
                Error::Config("legitimate factor required for conditional parity".into())
            })?;
            lv.iter().map(|&v| v == l).collect()
        }
    };
    let g0: Vec<f64> = (0..data.n()).map(|i| f64::from(u8::from(within[i] && f[i] == 0))).collect();
    let g1: Vec<f64> = (0..data.n()).map(|i| f64::from(u8::from(within[i] && f[i] == 1))).collect();
    let what = match level {
        None => String::new(),
        Some(l) => format!(" within L={l}"),
    };
    if g0.iter().sum::<f64>() == 0.0 {
        return Err(Error::DegenerateGroup(format!("no rows with F=0{what}")));
    }
    if g1.iter().sum::<f64>() == 0.0 {
        return Err(Error::DegenerateGroup(format!("no rows with F=1{what}")));
    }
    Ok((g0, g1))
}

/// Parity row `(group-0 mean of b) − (group-1 mean of b)` before the `|·|`
/// expansion. `level = Some(l)` restricts both groups to `L = l`.
pub fn build_parity_rows(data: &Dataset, basis: &BasisSpec, level: Option<i64>) -> Result<DVector<f64>> {
    let b = basis.design(data)?;
    let (g0, g1) = parity_groups(data, level)?;
    Ok(group_mean(&b, &g0) - group_mean(&b, &g1))
}

fn balance_row(b: &DMatrix<f64>, f: &[u8], w: &[f64]) -> Result<DVector<f64>> {
    let w0: Vec<f64> = (0..b.nrows()).map(|i| if f[i] == 0 { w[i] } else { 0.0 }).collect();
    let w1: Vec<f64> = (0..b.nrows()).map(|i| if f[i] == 1 { w[i] } else { 0.0 }).collect();
    let (s0, s1) = (w0.iter().sum::<f64>(), w1.iter().sum::<f64>());
    if s0 <= 0.0 || s1 <= 0.0 {
        return Err(Error::UnstableBalance(format!(
            "pseudo-weight normalizers are ({s0:.3e}, {s1:.3e}); use a larger sample or clip the weights to [0, 1]"
        )));
    }
    Ok(group_mean(b, &w0) - group_mean(b, &w1))
}

/// Positive-class balance row with pseudo-outcome weights
/// `wᵢ = φ_Q(Zᵢ; 1{Y>0}, δ)`.
pub fn build_positive_balance_rows(
    data: &Dataset,
    nuis: &NuisanceFit,
    delta: Increment,
    basis: &BasisSpec,
) -> Result<DVector<f64>> {
    let f = data
        .f()
        .ok_or_else(|| Error::Config("sensitive feature required for positive-class balance".into()))?;
    let w = pseudo_outcomes(data, nuis, delta, OutcomeTransform::PositiveIndicator)?;
    balance_row(&basis.design(data)?, f, &w.phi)
}

struct Assembled {
    cmat: DMatrix<f64>,
    d: DVector<f64>,
    labels: Vec<ConstraintLabel>,
    sources: Vec<RowSource>,
    experimental: bool,
}

fn assemble_constraints(
    data: &Dataset,
    b: &DMatrix<f64>,
    weights: Option<&[f64]>,
    specs: &[ConstraintSpec],
) -> Result<Assembled> {
    let k = b.ncols();
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut d = Vec::new();
    let mut labels = Vec::new();
    let mut sources = Vec::new();
    let mut experimental = false;
    let scale = |g: Vec<f64>| -> Vec<f64> {
        match weights {
            Some(w) => g.iter().zip(w).map(|(a, b)| a * b).collect(),
            None => g,
        }
    };
    for spec in specs {
        if let Some(eps) = spec.eps() {
            if !(eps >= 0.0) {
                return Err(Error::Argument(format!("fairness threshold must be >= 0, got {eps}")));
            }
        }
        match spec {
            ConstraintSpec::Linear { c, d: dd } => {
                if c.ncols() != k || c.nrows() != dd.len() {
                    return Err(Error::Argument(format!(
                        "linear constraint block is {}x{} with {} bounds; basis dimension is {k}",
                        c.nrows(),
                        c.ncols(),
                        dd.len()
                    )));
                }
                for j in 0..c.nrows() {
                    rows.push(c.row(j).transpose());
                    d.push(dd[j]);
                    labels.push(ConstraintLabel {
                        kind: "linear".into(),
                        sign: 1,
                        eps: None,
                    });
                    sources.push(RowSource::Fixed);
                }
            }
            ConstraintSpec::StatisticalParity { eps } | ConstraintSpec::ConditionalParity { eps, .. } => {
                let (level, kind) = match spec {
                    ConstraintSpec::ConditionalParity { level, .. } => (Some(*level), format!("conditional_parity[{level}]")),
                    _ => (None, "statistical_parity".to_string()),
                };
                let (g0, g1) = parity_groups(data, level)?;
                let (g0, g1) = (scale(g0), scale(g1));
                let row = group_mean(b, &g0) - group_mean(b, &g1);
                for sign in [1.0, -1.0] {
                    rows.push(&row * sign);
                    d.push(*eps);
                    labels.push(ConstraintLabel {
                        kind: kind.clone(),
                        sign: sign as i8,
                        eps: Some(*eps),
                    });
                    sources.push(RowSource::Parity {
                        g0: g0.clone(),
                        g1: g1.clone(),
                        sign,
                    });
                }
            }
            ConstraintSpec::PositiveClassBalance { eps, weights: w } => {
                let f = data.f().ok_or_else(|| {
                    Error::Config("sensitive feature required for positive-class balance".into())
                })?;
                if w.len() != data.n() {
                    return Err(Error::Argument("balance weights length differs from n".into()));
                }
                let w = scale(w.clone());
                let row = balance_row(b, f, &w)?;
                experimental = true;
                for sign in [1.0, -1.0] {
                    rows.push(&row * sign);
                    d.push(*eps);
                    labels.push(ConstraintLabel {
                        kind: "positive_class_balance".into(),
                        sign: sign as i8,
                        eps: Some(*eps),
                    });
                    sources.push(RowSource::Balance);
                }
            }
        }
    }
    let r = rows.len();
    let cmat = DMatrix::from_fn(r, k, |i, j| rows[i][j]);
    if cmat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("constraint rows contain non-finite values".into()));
    }
    Ok(Assembled {
        cmat,
        d: DVector::from_vec(d),
        labels,
        sources,
        experimental,
    })
}

fn check_pseudo(data: &Dataset, pseudo: &PseudoOutcomes, want: OutcomeTransform) -> Result<()> {
    if pseudo.n() != data.n() {
        return Err(Error::Argument("pseudo-outcome length differs from n".into()));
    }
    if pseudo.tag != want {
        return Err(Error::Config(format!(
            "expected `{}` pseudo-outcomes, got `{}`",
            want.tag(),
            pseudo.tag.tag()
        )));
    }
    Ok(())
}

/// Normalized observation weights; `None` means uniform.
fn weighted_moments(b: &DMatrix<f64>, t: &[f64], w: Option<&[f64]>) -> (DMatrix<f64>, DVector<f64>) {
    let n = b.nrows();
    let k = b.ncols();
    let total = w.map_or(n as f64, |w| w.iter().sum());
    let mut q = DMatrix::zeros(k, k);
    let mut c = DVector::zeros(k);
    for i in 0..n {
        let wi = w.map_or(1.0, |w| w[i]);
        if wi == 0.0 {
            continue;
        }
        for a in 0..k {
            let ba = b[(i, a)] * wi;
            c[a] += ba * t[i];
            for bb in a..k {
                q[(a, bb)] += ba * b[(i, bb)];
            }
        }
    }
    for a in 0..k {
        for bb in 0..a {
            q[(a, bb)] = q[(bb, a)];
        }
    }
    (q / total, c / total)
}

#[allow(clippy::too_many_arguments)]
fn build_quadratic(
    loss: Loss,
    data: &Dataset,
    pseudo: &PseudoOutcomes,
    constant: Option<&PseudoOutcomes>,
    basis: &BasisSpec,
    constraints: &[ConstraintSpec],
    lambda: f64,
    weights: Option<&[f64]>,
) -> Result<ApproxProgram> {
    check_pseudo(data, pseudo, loss.target_transform())?;
    if !(lambda >= 0.0) {
        return Err(Error::Argument(format!("lambda must be >= 0, got {lambda}")));
    }
    let b = basis.design(data)?;
    let (n, k) = (b.nrows(), b.ncols());
    if k > n {
        return Err(Error::OverParameterized { k, n });
    }
    if let Some(w) = weights {
        if w.len() != n || w.iter().any(|&v| !(v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Argument("weights must be nonnegative with a positive sum".into()));
        }
    }
    let (q, c) = weighted_moments(&b, &pseudo.phi, weights);
    let risk_constant = match constant {
        Some(p) => {
            let want = loss.constant_transform().expect("quadratic loss");
            check_pseudo(data, p, want)?;
            Some(match weights {
                Some(w) => p.phi.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / w.iter().sum::<f64>(),
                None => p.mean(),
            })
        }
        None => None,
    };
    let asm = assemble_constraints(data, &b, weights, constraints)?;
    Ok(ApproxProgram {
        kind: ProgramKind::Quadratic,
        q,
        c,
        lambda,
        cmat: asm.cmat,
        d: asm.d,
        labels: asm.labels,
        meta: ProgramMeta {
            loss,
            delta: Some(pseudo.delta),
            basis: basis.labels(data)?,
            risk_constant,
            experimental: asm.experimental,
            warnings: Vec::new(),
        },
        smooth: None,
        basis_matrix: Some(b),
        target: Some(pseudo.phi.clone()),
        sources: asm.sources,
    })
}

/// Squared-error program `½βᵀPₙ{bbᵀ}β − βᵀPₙ{φ_Q b} + λ‖β‖²`.
///
/// `pseudo_square`, the pseudo-outcomes of `Y²`, only feeds the risk
/// constant reported by [`risk_estimate`]; the minimizer does not depend
/// on it.
pub fn build_l2_program(
    data: &Dataset,
    pseudo: &PseudoOutcomes,
    pseudo_square: Option<&PseudoOutcomes>,
    basis: &BasisSpec,
    constraints: &[ConstraintSpec],
    lambda: f64,
) -> Result<ApproxProgram> {
    build_quadratic(Loss::L2, data, pseudo, pseudo_square, basis, constraints, lambda, None)
}

/// As [`build_l2_program`], with every empirical average weighted by
/// `weights`. Used for resampling and influence checks.
pub fn build_l2_program_weighted(
    data: &Dataset,
    pseudo: &PseudoOutcomes,
    basis: &BasisSpec,
    constraints: &[ConstraintSpec],
    lambda: f64,
    weights: &[f64],
) -> Result<ApproxProgram> {
    build_quadratic(Loss::L2, data, pseudo, None, basis, constraints, lambda, Some(weights))
}

/// Squared-log program with the log link `f = exp(bᵀβ) − 1`, which makes
/// `log(f + 1) = bᵀβ` and the program exactly quadratic with
/// `c = Pₙ{φ′ b}` where `φ′` are pseudo-outcomes of `log(1+Y)`.
pub fn build_msle_program(
    data: &Dataset,
    pseudo_log: &PseudoOutcomes,
    pseudo_log_square: Option<&PseudoOutcomes>,
    basis: &BasisSpec,
    constraints: &[ConstraintSpec],
    lambda: f64,
) -> Result<ApproxProgram> {
    build_quadratic(Loss::Msle, data, pseudo_log, pseudo_log_square, basis, constraints, lambda, None)
}

/// Cross-entropy program for `f = expit(bᵀβ)`.
///
/// With `clip01` the pseudo-outcomes are clipped to `[0, 1]` first.
pub fn build_crossentropy_program(
    data: &Dataset,
    pseudo: &PseudoOutcomes,
    basis: &BasisSpec,
    constraints: &[ConstraintSpec],
    lambda: f64,
    clip01: bool,
) -> Result<ApproxProgram> {
    check_pseudo(data, pseudo, OutcomeTransform::Identity)?;
    if !(lambda >= 0.0) {
        return Err(Error::Argument(format!("lambda must be >= 0, got {lambda}")));
    }
    let b = basis.design(data)?;
    let (n, k) = (b.nrows(), b.ncols());
    if k > n {
        return Err(Error::OverParameterized { k, n });
    }
    let mut warnings = Vec::new();
    let target: Vec<f64> = if clip01 {
        pseudo.phi.iter().map(|p| p.clamp(0.0, 1.0)).collect()
    } else {
        if pseudo.phi.iter().any(|&p| !(-0.5..=1.5).contains(&p)) {
            let w = "pseudo-outcomes leave [-0.5, 1.5]; the cross-entropy objective may be unbounded below".to_string();
            log::warn!("{w}");
            warnings.push(w);
        }
        pseudo.phi.clone()
    };
    let c = b.tr_mul(&DVector::from_column_slice(&target)) / n as f64;
    let asm = assemble_constraints(data, &b, None, constraints)?;
    let objective = CrossEntropyObjective::new(b.clone(), target.clone(), lambda);
    Ok(ApproxProgram {
        kind: ProgramKind::SmoothConvex,
        q: DMatrix::zeros(k, k),
        c,
        lambda,
        cmat: asm.cmat,
        d: asm.d,
        labels: asm.labels,
        meta: ProgramMeta {
            loss: Loss::CrossEntropy,
            delta: Some(pseudo.delta),
            basis: basis.labels(data)?,
            risk_constant: None,
            experimental: asm.experimental,
            warnings,
        },
        smooth: Some(Arc::new(objective)),
        basis_matrix: Some(b),
        target: Some(target),
        sources: asm.sources,
    })
}

/// One-step risk estimate `Pₙ{φ_R(Z; η̂, δ, β)}` (penalty excluded).
///
/// For the quadratic losses `Pₙ{φ_R} = const + βᵀQβ − 2cᵀβ`, i.e. twice the
/// unpenalized quadratic objective plus the recorded constant.
pub fn risk_estimate(program: &ApproxProgram, beta: &DVector<f64>) -> Result<f64> {
    if beta.len() != program.k() {
        return Err(Error::Argument(format!(
            "beta has length {}, program dimension is {}",
            beta.len(),
            program.k()
        )));
    }
    match program.kind {
        ProgramKind::Quadratic => {
            let constant = program.meta.risk_constant.ok_or_else(|| {
                Error::Config("risk constant unavailable: build the program with the squared-outcome pseudo-values".into())
            })?;
            Ok(constant + beta.dot(&(&program.q * beta)) - 2.0 * program.c.dot(beta))
        }
        ProgramKind::SmoothConvex => {
            let s = program.smooth.as_ref().expect("smooth program has an objective");
            Ok(s.value(beta) - program.lambda * beta.norm_squared())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    use crate::incremental::pseudo_outcomes;
    use crate::solver::{solve_qp, SolveOptions};

    fn dataset(y: Vec<f64>, a: Vec<u8>, xs: Vec<f64>, f: Option<Vec<u8>>) -> Dataset {
        let n = y.len();
        let mut cols = xs;
        let mut names = vec!["x".to_string()];
        if let Some(f) = &f {
            cols.extend(f.iter().map(|&v| v as f64));
            names.push("f".into());
        }
        let x = DMatrix::from_column_slice(n, names.len(), &cols);
        let d = Dataset::new(y, a, x, names).unwrap();
        if f.is_some() {
            d.with_sensitive("f").unwrap()
        } else {
            d
        }
    }

    fn pseudo(phi: Vec<f64>, tag: OutcomeTransform) -> PseudoOutcomes {
        PseudoOutcomes {
            phi,
            delta: Increment::ONE,
            tag,
        }
    }

    fn x_only() -> BasisSpec {
        BasisSpec::raw(Some(vec!["x".into()]))
    }

    #[test]
    fn intercept_only_reductions() {
        let d = dataset(vec![0.0; 4], vec![0; 4], vec![1.0, 2.0, 3.0, 4.0], None);
        let p = pseudo(vec![1.0, 2.0, 4.0, 9.0], OutcomeTransform::Identity);
        let prog = build_l2_program(&d, &p, None, &BasisSpec::intercept_only(), &[], 0.0).unwrap();
        let sol = solve_qp(&prog, &SolveOptions::default());
        assert!((sol.beta[0] - 4.0).abs() < 1e-12);

        let lam = 0.75;
        let prog = build_l2_program(&d, &p, None, &BasisSpec::intercept_only(), &[], lam).unwrap();
        let sol = solve_qp(&prog, &SolveOptions::default());
        assert!((sol.beta[0] - 4.0 / (1.0 + 2.0 * lam)).abs() < 1e-12);
    }

    #[test]
    fn orthonormal_basis_is_componentwise() {
        // columns (1,1,1,1) and (1,-1,1,-1): Pₙ{bbᵀ} = I
        let d = dataset(vec![0.0; 4], vec![0; 4], vec![1.0, -1.0, 1.0, -1.0], None);
        let b = BasisSpec::raw(Some(vec!["x".into()]));
        let phi = vec![3.0, -1.0, 0.5, 2.0];
        let p = pseudo(phi.clone(), OutcomeTransform::Identity);
        let prog = build_l2_program(&d, &p, None, &b, &[], 0.0).unwrap();
        assert!((prog.q.clone() - DMatrix::identity(2, 2)).amax() < 1e-15);
        let sol = solve_qp(&prog, &SolveOptions::default());
        let c0 = phi.iter().sum::<f64>() / 4.0;
        let c1 = (3.0 + 1.0 + 0.5 - 2.0) / 4.0;
        assert!((sol.beta[0] - c0).abs() < 1e-12 && (sol.beta[1] - c1).abs() < 1e-12);

        let lp = pseudo(phi, OutcomeTransform::Log1p);
        let prog = build_msle_program(&d, &lp, None, &b, &[], 0.0).unwrap();
        let sol = solve_qp(&prog, &SolveOptions::default());
        assert!((sol.beta[0] - c0).abs() < 1e-12 && (sol.beta[1] - c1).abs() < 1e-12);
    }

    #[test]
    fn msle_constant_outcome() {
        // Y ≡ e − 1 with exact nuisances at δ = 1: φ′ ≡ 1, β = 1, prediction e − 1
        let n = 5;
        let y = vec![std::f64::consts::E - 1.0; n];
        let a = vec![1, 0, 1, 1, 0];
        let d = dataset(y, a, vec![0.0; n], None);
        let mut mu = BTreeMap::new();
        mu.insert(OutcomeTransform::Log1p, (vec![1.0; n], vec![1.0; n]));
        let nuis = NuisanceFit::new(vec![0.4; n], mu, vec![0; n], 1e-3).unwrap();
        let p = pseudo_outcomes(&d, &nuis, Increment::ONE, OutcomeTransform::Log1p).unwrap();
        assert!(p.phi.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let prog = build_msle_program(&d, &p, None, &BasisSpec::intercept_only(), &[], 0.0).unwrap();
        let sol = solve_qp(&prog, &SolveOptions::default());
        assert!((sol.beta[0] - 1.0).abs() < 1e-12);
        assert!((Loss::Msle.predict(sol.beta[0]) - (std::f64::consts::E - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn parity_row_examples() {
        let xs = vec![1.0, 3.0, 5.0, 5.0, 4.0, 6.0];
        let f = vec![0, 0, 1, 1, 1, 1];
        let d = dataset(vec![0.0; 6], vec![0; 6], xs, Some(f));
        let row = build_parity_rows(&d, &x_only(), None).unwrap();
        assert!((row[0]).abs() < 1e-15);
        assert!((row[1] + 3.0).abs() < 1e-15);

        let d = dataset(vec![0.0; 4], vec![0; 4], vec![1.0, 2.0, 2.0, 1.0], Some(vec![0, 0, 1, 1]));
        let row = build_parity_rows(&d, &x_only(), None).unwrap();
        assert!(row.amax() < 1e-15);

        let d = dataset(vec![0.0; 3], vec![0; 3], vec![1.0, 2.0, 3.0], Some(vec![1, 1, 1]));
        assert!(matches!(build_parity_rows(&d, &x_only(), None), Err(Error::DegenerateGroup(_))));

        let d = dataset(vec![0.0; 3], vec![0; 3], vec![1.0, 2.0, 3.0], None);
        let p = pseudo(vec![0.0; 3], OutcomeTransform::Identity);
        let r = build_l2_program(&d, &p, None, &x_only(), &[ConstraintSpec::StatisticalParity { eps: 0.1 }], 0.0);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn conditional_parity_uses_level() {
        let x = DMatrix::from_row_slice(6, 3, &[
            1.0, 0.0, 0.0, //
            3.0, 1.0, 0.0, //
            10.0, 0.0, 1.0, //
            20.0, 1.0, 1.0, //
            2.0, 0.0, 0.0, //
            9.0, 1.0, 0.0, //
        ]);
        let d = Dataset::new(vec![0.0; 6], vec![0; 6], x, vec!["x".into(), "f".into(), "l".into()])
            .unwrap()
            .with_sensitive("f")
            .unwrap()
            .with_legitimate("l")
            .unwrap();
        let row = build_parity_rows(&d, &x_only(), Some(0)).unwrap();
        assert!((row[1] - (1.5 - 6.0)).abs() < 1e-12);
        let row = build_parity_rows(&d, &x_only(), Some(1)).unwrap();
        assert!((row[1] + 10.0).abs() < 1e-12);
        assert!(matches!(build_parity_rows(&d, &x_only(), Some(5)), Err(Error::DegenerateGroup(_))));
    }

    #[test]
    fn parity_expands_to_two_feasible_rows() {
        let d = dataset(vec![0.0; 4], vec![0; 4], vec![1.0, 2.0, 5.0, 7.0], Some(vec![0, 0, 1, 1]));
        let p = pseudo(vec![1.0, 2.0, 3.0, 4.0], OutcomeTransform::Identity);
        let eps = 0.0;
        let prog = build_l2_program(&d, &p, None, &x_only(), &[ConstraintSpec::StatisticalParity { eps }], 0.0).unwrap();
        assert_eq!(prog.r(), 2);
        assert!((prog.cmat.row(0) + prog.cmat.row(1)).amax() < 1e-15);
        let zero = DVector::zeros(2);
        assert!((&prog.cmat * &zero - &prog.d).max() <= 0.0);
    }

    #[test]
    fn positive_balance_examples() {
        // hand weights, n = 6
        let xs = vec![1.0, 2.0, 4.0, 3.0, 5.0, 8.0];
        let f = vec![0, 0, 0, 1, 1, 1];
        let d = dataset(vec![1.0; 6], vec![0, 1, 0, 1, 0, 1], xs.clone(), Some(f.clone()));
        let w = vec![0.5, 1.0, 0.5, 2.0, 1.0, 1.0];
        let b = x_only().design(&d).unwrap();
        let row = balance_row(&b, &f, &w).unwrap();
        let m0 = (0.5 * 1.0 + 1.0 * 2.0 + 0.5 * 4.0) / 2.0;
        let m1 = (2.0 * 3.0 + 5.0 + 8.0) / 4.0;
        assert!((row[0]).abs() < 1e-15);
        assert!((row[1] - (m0 - m1)).abs() < 1e-12);

        // Y > 0 everywhere with exact nuisances at δ = 1 gives w ≡ 1
        let n = 6;
        let mut mu = BTreeMap::new();
        mu.insert(OutcomeTransform::PositiveIndicator, (vec![1.0; n], vec![1.0; n]));
        let nuis = NuisanceFit::new(vec![0.3; n], mu, vec![0; n], 1e-3).unwrap();
        let bal = build_positive_balance_rows(&d, &nuis, Increment::ONE, &x_only()).unwrap();
        let par = build_parity_rows(&d, &x_only(), None).unwrap();
        assert!((bal - par).amax() < 1e-12);

        let neg = vec![-1.0, -1.0, -1.0, 1.0, 1.0, 1.0];
        assert!(matches!(balance_row(&b, &f, &neg), Err(Error::UnstableBalance(_))));

        let sym = dataset(vec![1.0; 4], vec![0; 4], vec![1.0, 3.0, 3.0, 1.0], Some(vec![0, 0, 1, 1]));
        let bs = x_only().design(&sym).unwrap();
        let row = balance_row(&bs, sym.f().unwrap(), &[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(row.amax() < 1e-15);
    }

    #[test]
    fn crossentropy_stationary_points() {
        let d = dataset(vec![0.0; 4], vec![0; 4], vec![0.0; 4], None);
        let p = pseudo(vec![0.5; 4], OutcomeTransform::Identity);
        let prog = build_crossentropy_program(&d, &p, &BasisSpec::intercept_only(), &[], 0.0, true).unwrap();
        let (_, g, _) = prog.smooth.as_ref().unwrap().evaluate(&DVector::zeros(1));
        assert!(g.amax() < 1e-15);

        let p = pseudo(vec![0.8; 4], OutcomeTransform::Identity);
        let prog = build_crossentropy_program(&d, &p, &BasisSpec::intercept_only(), &[], 0.0, true).unwrap();
        let beta = DVector::from_element(1, (0.8f64 / 0.2).ln());
        let (_, g, _) = prog.smooth.as_ref().unwrap().evaluate(&beta);
        assert!(g.amax() < 1e-12);

        let p = pseudo(vec![2.0, -1.0, 0.5, 0.5], OutcomeTransform::Identity);
        let prog = build_crossentropy_program(&d, &p, &BasisSpec::intercept_only(), &[], 0.0, false).unwrap();
        assert_eq!(prog.meta.warnings.len(), 1);
        let prog = build_crossentropy_program(&d, &p, &BasisSpec::intercept_only(), &[], 0.0, true).unwrap();
        assert!(prog.meta.warnings.is_empty());
        assert_eq!(prog.target().unwrap(), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn risk_matches_direct_summation() {
        // hand data, n = 5, basis (1, x)
        let xs = vec![0.5, -1.0, 2.0, 1.5, 0.0];
        let phi = vec![1.2, -0.4, 3.1, 2.2, 0.7];
        let phi_sq = vec![2.0, 0.5, 9.0, 5.1, 0.9];
        let d = dataset(vec![0.0; 5], vec![0; 5], xs.clone(), None);
        let prog = build_l2_program(
            &d,
            &pseudo(phi.clone(), OutcomeTransform::Identity),
            Some(&pseudo(phi_sq.clone(), OutcomeTransform::Square)),
            &x_only(),
            &[],
            0.0,
        )
        .unwrap();
        let beta = DVector::from_vec(vec![0.3, -0.8]);
        let direct: f64 = (0..5)
            .map(|i| {
                let fx = beta[0] + beta[1] * xs[i];
                phi_sq[i] - 2.0 * fx * phi[i] + fx * fx
            })
            .sum::<f64>()
            / 5.0;
        assert!((risk_estimate(&prog, &beta).unwrap() - direct).abs() < 1e-12);
        let zero = DVector::zeros(2);
        let mean_sq = phi_sq.iter().sum::<f64>() / 5.0;
        assert!((risk_estimate(&prog, &zero).unwrap() - mean_sq).abs() < 1e-12);
        let quad = 0.5 * beta.dot(&(&prog.q * &beta)) - prog.c.dot(&beta);
        let diff = risk_estimate(&prog, &beta).unwrap() - risk_estimate(&prog, &zero).unwrap();
        assert!((diff - 2.0 * quad).abs() < 1e-12);
        assert!(risk_estimate(&prog, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn over_parameterized_and_wrong_tag() {
        let d = dataset(vec![0.0; 2], vec![0; 2], vec![1.0, 2.0], None);
        let p = pseudo(vec![0.0; 2], OutcomeTransform::Identity);
        let b = BasisSpec::polynomial(2, Some(vec!["x".into()]));
        assert!(matches!(build_l2_program(&d, &p, None, &b, &[], 0.0), Err(Error::OverParameterized { k: 3, n: 2 })));
        let lp = pseudo(vec![0.0; 2], OutcomeTransform::Log1p);
        assert!(matches!(build_l2_program(&d, &lp, None, &x_only(), &[], 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn dump_round_trip() {
        let d = dataset(vec![0.0; 4], vec![0; 4], vec![1.0, 2.0, 5.0, 7.0], Some(vec![0, 0, 1, 1]));
        let p = pseudo(vec![1.0, 2.0, 3.0, 4.0], OutcomeTransform::Identity);
        let prog = build_l2_program(&d, &p, None, &x_only(), &[ConstraintSpec::StatisticalParity { eps: 0.2 }], 0.1).unwrap();
        let json = serde_json::to_string(&prog.dump()).unwrap();
        let back: ProgramDump = serde_json::from_str(&json).unwrap();
        let loaded = back.into_program().unwrap();
        assert_eq!(loaded.q, prog.q);
        assert_eq!(loaded.cmat, prog.cmat);
        assert_eq!(loaded.d, prog.d);
        assert_eq!(loaded.lambda, prog.lambda);
    }
}
