//! Feature maps `b(X)` shared by nuisance designs and program bases.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// One custom feature: a product of covariate powers, e.g. `x1^2*x2`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    pub factors: Vec<(String, u32)>,
}

impl Term {
    pub fn parse(s: &str) -> Result<Self> {
        let mut factors = Vec::new();
        for part in s.split('*') {
            let part = part.trim();
            let (name, pow) = match part.split_once('^') {
                Some((n, p)) => (
                    n.trim(),
                    p.trim()
                        .parse::<u32>()
                        .map_err(|_| Error::Argument(format!("bad exponent in term `{s}`")))?,
                ),
                None => (part, 1),
            };
            if name.is_empty() {
                return Err(Error::Argument(format!("empty factor in term `{s}`")));
            }
            factors.push((name.to_string(), pow));
        }
        Ok(Self { factors })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    /// Selected covariates as-is.
    Raw,
    /// Powers `1..=degree` of each selected covariate (no cross terms).
    Polynomial(u32),
    /// Explicit list of product terms.
    Custom(Vec<Term>),
}

/// Describes `b(X)`: optional intercept followed by features built from a
/// covariate subset. The subset supports predicting from `V ⊆ X` only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub include_intercept: bool,
    /// Covariate names; `None` means every covariate column.
    pub columns: Option<Vec<String>>,
}

impl BasisSpec {
    pub fn intercept_only() -> Self {
        Self {
            kind: BasisKind::Raw,
            include_intercept: true,
            columns: Some(Vec::new()),
        }
    }

    pub fn raw(columns: Option<Vec<String>>) -> Self {
        Self {
            kind: BasisKind::Raw,
            include_intercept: true,
            columns,
        }
    }

    pub fn polynomial(degree: u32, columns: Option<Vec<String>>) -> Self {
        Self {
            kind: BasisKind::Polynomial(degree),
            include_intercept: true,
            columns,
        }
    }

    /// Parses `intercept`, `raw` or `poly:<deg>`.
    pub fn parse(s: &str, columns: Option<Vec<String>>) -> Result<Self> {
        match s {
            "intercept" => Ok(Self::intercept_only()),
            "raw" => Ok(Self::raw(columns)),
            _ => match s.strip_prefix("poly:") {
                Some(d) => {
                    let deg: u32 = d
                        .parse()
                        .map_err(|_| Error::Argument(format!("bad polynomial degree `{d}`")))?;
                    if deg == 0 {
                        return Err(Error::Argument("polynomial degree must be >= 1".into()));
                    }
                    Ok(Self::polynomial(deg, columns))
                }
                None => Err(Error::Argument(format!(
                    "unknown basis `{s}` (expected intercept, raw or poly:<deg>)"
                ))),
            },
        }
    }

    fn resolve(&self, data: &Dataset) -> Result<Vec<usize>> {
        match &self.columns {
            Some(cols) => cols.iter().map(|c| data.column_index(c)).collect(),
            None => Ok((0..data.p()).collect()),
        }
    }

    /// Human-readable feature labels, in column order.
    pub fn labels(&self, data: &Dataset) -> Result<Vec<String>> {
        let cols = self.resolve(data)?;
        let mut out = Vec::new();
        if self.include_intercept {
            out.push("(intercept)".to_string());
        }
        match &self.kind {
            BasisKind::Raw => out.extend(cols.iter().map(|&j| data.names()[j].clone())),
            BasisKind::Polynomial(deg) => {
                for &j in &cols {
                    for d in 1..=*deg {
                        let name = &data.names()[j];
                        out.push(if d == 1 { name.clone() } else { format!("{name}^{d}") });
                    }
                }
            }
            BasisKind::Custom(terms) => {
                for t in terms {
                    let parts: Vec<String> = t
                        .factors
                        .iter()
                        .map(|(n, p)| if *p == 1 { n.clone() } else { format!("{n}^{p}") })
                        .collect();
                    out.push(parts.join("*"));
                }
            }
        }
        Ok(out)
    }

    /// Evaluates `b(X_i)` for every row, giving an `n × k` matrix.
    pub fn design(&self, data: &Dataset) -> Result<DMatrix<f64>> {
        let cols = self.resolve(data)?;
        let x = data.x();
        let n = data.n();
        let mut features: Vec<Vec<f64>> = Vec::new();
        if self.include_intercept {
            features.push(vec![1.0; n]);
        }
        match &self.kind {
            BasisKind::Raw => {
                for &j in &cols {
                    features.push(x.column(j).iter().copied().collect());
                }
            }
            BasisKind::Polynomial(deg) => {
                for &j in &cols {
                    for d in 1..=*deg {
                        features.push(x.column(j).iter().map(|v| v.powi(d as i32)).collect());
                    }
                }
            }
            BasisKind::Custom(terms) => {
                for t in terms {
                    let idx: Vec<(usize, u32)> = t
                        .factors
                        .iter()
                        .map(|(name, p)| Ok((data.column_index(name)?, *p)))
                        .collect::<Result<_>>()?;
                    features.push(
                        (0..n)
                            .map(|i| idx.iter().map(|&(j, p)| x[(i, j)].powi(p as i32)).product())
                            .collect(),
                    );
                }
            }
        }
        if features.is_empty() {
            return Err(Error::Config("basis has dimension 0".into()));
        }
        let k = features.len();
        let m = DMatrix::from_fn(n, k, |i, j| features[j][i]);
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("basis evaluation produced non-finite values".into()));
        }
        Ok(m)
    }
}
