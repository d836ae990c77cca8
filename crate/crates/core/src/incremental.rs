//! Incremental propensity-score interventions.
//!
//! An increment `δ` multiplies each unit's odds of treatment, replacing the
//! propensity `π` by `q(X; δ, π) = δπ / (δπ + 1 − π)`. This module evaluates
//! the shift, the identified counterfactual mean under it (plug-in, IPW and
//! one-step estimators), and the per-observation uncentered efficient
//! influence function values that stand in for the unobserved outcome
//! `Y^{Q(δ)}` when programs are built.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nuisance::{NuisanceFit, OutcomeTransform};

/// Odds multiplier `δ ∈ [0, ∞]`.
///
/// The endpoints correspond to the deterministic policies `A = 0` and
/// `A = 1`. They need positivity, which holds here mechanically because
/// every [`NuisanceFit`] clips `π̂₁` away from 0 and 1.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Increment(f64);

// JSON has no infinity, so `δ = ∞` travels as the string "inf".
impl Serialize for Increment {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Increment {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        let out = match Raw::deserialize(d)? {
            Raw::Num(v) => Increment::new(v),
            Raw::Text(t) => Increment::parse(&t),
        };
        out.map_err(serde::de::Error::custom)
    }
}

impl Increment {
    pub const ZERO: Increment = Increment(0.0);
    pub const ONE: Increment = Increment(1.0);
    pub const INFINITY: Increment = Increment(f64::INFINITY);

    pub fn new(delta: f64) -> Result<Self> {
        if delta.is_nan() || delta < 0.0 {
            return Err(Error::Argument(format!("increment must lie in [0, inf], got {delta}")));
        }
        Ok(Self(delta))
    }

    /// Parses a number, `inf` or `infinity`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let v = match s.to_ascii_lowercase().as_str() {
            "inf" | "infinity" => f64::INFINITY,
            _ => s
                .parse::<f64>()
                .map_err(|_| Error::Argument(format!("bad increment `{s}`")))?,
        };
        Self::new(v)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0.0
    }

    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }
}

impl fmt::Display for Increment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_infinite() {
            write!(f, "inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

/// Shifted treatment probability `q(X; δ, π)`.
pub fn q_shift(pi1: f64, delta: Increment) -> Result<f64> {
    if !(pi1 > 0.0 && pi1 < 1.0) {
        return Err(Error::Domain(format!("propensity must lie in (0, 1), got {pi1}")));
    }
    Ok(q_unchecked(pi1, delta))
}

fn q_unchecked(pi1: f64, delta: Increment) -> f64 {
    if delta.is_zero() {
        0.0
    } else if delta.is_infinite() {
        1.0
    } else {
        let d = delta.value();
        d * pi1 / (d * pi1 + 1.0 - pi1)
    }
}

/// `q(Xᵢ; δ, π̂)` for every row.
pub fn shifted_propensity(nuis: &NuisanceFit, delta: Increment) -> Vec<f64> {
    nuis.pi1().iter().map(|&p| q_unchecked(p, delta)).collect()
}

/// Per-observation uncentered influence values for `E{t(Y)^{Q(δ)}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoOutcomes {
    pub phi: Vec<f64>,
    pub delta: Increment,
    pub tag: OutcomeTransform,
}

impl PseudoOutcomes {
    pub fn n(&self) -> usize {
        self.phi.len()
    }

    /// One-step estimate of the counterfactual mean.
    pub fn mean(&self) -> f64 {
        mean(&self.phi)
    }

    /// `sd(φ)/√n`, computed with the `n − 1` denominator.
    pub fn std_error(&self) -> f64 {
        std_error(&self.phi)
    }

    pub fn select_rows(&self, rows: &[usize]) -> PseudoOutcomes {
        PseudoOutcomes {
            phi: rows.iter().map(|&i| self.phi[i]).collect(),
            delta: self.delta,
            tag: self.tag,
        }
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub(crate) fn std_error(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

fn check_lengths(data: &Dataset, nuis: &NuisanceFit) -> Result<()> {
    if data.n() != nuis.n() {
        return Err(Error::Argument(format!(
            "dataset has {} rows but nuisance fit has {}",
            data.n(),
            nuis.n()
        )));
    }
    Ok(())
}

/// Evaluates the uncentered efficient influence function
///
/// `φ_Q = [δπ₁φ₁ + π₀φ₀]/[δπ₁ + π₀] + δ(μ₁ − μ₀)(A − π₁)/[δπ₁ + π₀]²`,
/// `φₐ = 1(A=a)/πₐ · (t(Y) − μₐ) + μₐ`,
///
/// with `t(Y)` in place of `Y`. At `δ = 0` and `δ = ∞` the arm-specific
/// AIPW values `φ₀` and `φ₁` are returned directly.
pub fn pseudo_outcomes(
    data: &Dataset,
    nuis: &NuisanceFit,
    delta: Increment,
    tag: OutcomeTransform,
) -> Result<PseudoOutcomes> {
    check_lengths(data, nuis)?;
    let z = tag.apply_all(data.y())?;
    let (m0, m1) = nuis.mu(tag)?;
    let phi = (0..data.n())
        .map(|i| {
            let p1 = nuis.pi1()[i];
            let p0 = 1.0 - p1;
            let a = data.a()[i] as f64;
            let phi1 = a / p1 * (z[i] - m1[i]) + m1[i];
            let phi0 = (1.0 - a) / p0 * (z[i] - m0[i]) + m0[i];
            if delta.is_zero() {
                phi0
            } else if delta.is_infinite() {
                phi1
            } else {
                let d = delta.value();
                let den = d * p1 + p0;
                (d * p1 * phi1 + p0 * phi0) / den + d * (m1[i] - m0[i]) * (a - p1) / (den * den)
            }
        })
        .collect();
    Ok(PseudoOutcomes { phi, delta, tag })
}

fn plugin_terms(nuis: &NuisanceFit, delta: Increment, tag: OutcomeTransform) -> Result<Vec<f64>> {
    let (m0, m1) = nuis.mu(tag)?;
    Ok(nuis
        .pi1()
        .iter()
        .zip(m0.iter().zip(m1))
        .map(|(&p, (&a0, &a1))| {
            let q = q_unchecked(p, delta);
            q * a1 + (1.0 - q) * a0
        })
        .collect())
}

fn ipw_terms(data: &Dataset, nuis: &NuisanceFit, delta: Increment, tag: OutcomeTransform) -> Result<Vec<f64>> {
    let z = tag.apply_all(data.y())?;
    Ok((0..data.n())
        .map(|i| {
            let p = nuis.pi1()[i];
            let a = data.a()[i] as f64;
            if delta.is_zero() {
                (1.0 - a) * z[i] / (1.0 - p)
            } else if delta.is_infinite() {
                a * z[i] / p
            } else {
                let d = delta.value();
                z[i] * (d * a + 1.0 - a) / (d * p + 1.0 - p)
            }
        })
        .collect())
}

/// Plug-in estimate `Pₙ[(δπ̂μ̂₁ + (1−π̂)μ̂₀)/(δπ̂ + 1 − π̂)]`.
pub fn mean_plugin(data: &Dataset, nuis: &NuisanceFit, delta: Increment, tag: OutcomeTransform) -> Result<f64> {
    check_lengths(data, nuis)?;
    Ok(mean(&plugin_terms(nuis, delta, tag)?))
}

/// Weighting estimate `Pₙ[t(Y)(δA + 1 − A)/(δπ̂ + 1 − π̂)]`.
pub fn mean_ipw(data: &Dataset, nuis: &NuisanceFit, delta: Increment, tag: OutcomeTransform) -> Result<f64> {
    check_lengths(data, nuis)?;
    Ok(mean(&ipw_terms(data, nuis, delta, tag)?))
}

/// All three estimates of the counterfactual mean, with standard errors
/// from the sample spread of each estimator's per-observation terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanEffect {
    pub delta: Increment,
    pub tag: OutcomeTransform,
    pub plugin: f64,
    pub plugin_se: f64,
    pub ipw: f64,
    pub ipw_se: f64,
    pub eif: f64,
    pub eif_se: f64,
    pub eif_ci: [f64; 2],
}

pub fn mean_effect(data: &Dataset, nuis: &NuisanceFit, delta: Increment, tag: OutcomeTransform) -> Result<MeanEffect> {
    check_lengths(data, nuis)?;
    let plug = plugin_terms(nuis, delta, tag)?;
    let ipw = ipw_terms(data, nuis, delta, tag)?;
    let phi = pseudo_outcomes(data, nuis, delta, tag)?;
    let (eif, eif_se) = (phi.mean(), phi.std_error());
    Ok(MeanEffect {
        delta,
        tag,
        plugin: mean(&plug),
        plugin_se: std_error(&plug),
        ipw: mean(&ipw),
        ipw_se: std_error(&ipw),
        eif,
        eif_se,
        eif_ci: [eif - 1.96 * eif_se, eif + 1.96 * eif_se],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn increment_json() {
        for d in [Increment::ZERO, Increment::new(0.25).unwrap(), Increment::INFINITY] {
            let s = serde_json::to_string(&d).unwrap();
            assert_eq!(serde_json::from_str::<Increment>(&s).unwrap(), d);
        }
        assert_eq!(serde_json::to_string(&Increment::INFINITY).unwrap(), "\"inf\"");
        assert!(serde_json::from_str::<Increment>("-1.0").is_err());
    }
    use std::collections::BTreeMap;

    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::Rng;

    fn fit_from(pi: Vec<f64>, m0: Vec<f64>, m1: Vec<f64>) -> NuisanceFit {
        let n = pi.len();
        let mut mu = BTreeMap::new();
        mu.insert(OutcomeTransform::Identity, (m0, m1));
        NuisanceFit::new(pi, mu, vec![0; n], 1e-3).unwrap()
    }

    fn data_from(y: Vec<f64>, a: Vec<u8>) -> Dataset {
        let n = y.len();
        Dataset::new(y, a, DMatrix::zeros(n, 1), vec!["x".into()]).unwrap()
    }

    #[test]
    fn q_shift_examples() {
        assert_eq!(q_shift(0.5, Increment::ONE).unwrap(), 0.5);
        let q = q_shift(0.75, Increment::new(0.1).unwrap()).unwrap();
        assert!((q - 0.075 / 0.325).abs() < 1e-15);
        assert_eq!(q_shift(0.2, Increment::INFINITY).unwrap(), 1.0);
        assert_eq!(q_shift(0.2, Increment::ZERO).unwrap(), 0.0);
        assert!(q_shift(1.0, Increment::ONE).is_err());
        assert!(q_shift(0.0, Increment::ONE).is_err());
        assert!(Increment::new(-1.0).is_err());
        assert!(Increment::parse("inf").unwrap().is_infinite());
    }

    proptest! {
        #[test]
        fn q_shift_monotone_in_delta(p in 0.001f64..0.999, d1 in 0.0f64..50.0, d2 in 0.0f64..50.0) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let ql = q_shift(p, Increment::new(lo).unwrap()).unwrap();
            let qh = q_shift(p, Increment::new(hi).unwrap()).unwrap();
            prop_assert!(ql <= qh + 1e-15);
            prop_assert!((0.0..=1.0).contains(&ql));
        }

        #[test]
        fn delta_one_recovers_outcome(
            rows in proptest::collection::vec((-50.0f64..50.0, 0u8..2, 0.01f64..0.99, -20.0f64..20.0, -20.0f64..20.0), 1..40)
        ) {
            let d = data_from(rows.iter().map(|r| r.0).collect(), rows.iter().map(|r| r.1).collect());
            let nuis = fit_from(
                rows.iter().map(|r| r.2).collect(),
                rows.iter().map(|r| r.3).collect(),
                rows.iter().map(|r| r.4).collect(),
            );
            let phi = pseudo_outcomes(&d, &nuis, Increment::ONE, OutcomeTransform::Identity).unwrap();
            for (p, y) in phi.phi.iter().zip(d.y()) {
                prop_assert!((p - y).abs() <= 1e-12 * (1.0 + y.abs()) * 10.0);
            }
        }
    }

    #[test]
    fn endpoints_are_arm_specific_aipw() {
        let d = data_from(vec![1.0, 3.0, -2.0], vec![1, 0, 0]);
        let nuis = fit_from(vec![0.2, 0.6, 0.9], vec![0.5, 1.0, -1.0], vec![2.0, 0.0, 4.0]);
        let phi0 = pseudo_outcomes(&d, &nuis, Increment::ZERO, OutcomeTransform::Identity).unwrap();
        let want0 = [0.5, 1.0 / 0.4 * (3.0 - 1.0) + 1.0, 1.0 / 0.1 * (-2.0 + 1.0) - 1.0];
        for (g, w) in phi0.phi.iter().zip(want0) {
            assert!((g - w).abs() < 1e-12);
        }
        let phi1 = pseudo_outcomes(&d, &nuis, Increment::INFINITY, OutcomeTransform::Identity).unwrap();
        let want1 = [1.0 / 0.2 * (1.0 - 2.0) + 2.0, 0.0, 4.0];
        for (g, w) in phi1.phi.iter().zip(want1) {
            assert!((g - w).abs() < 1e-12);
        }
        // continuity of the interior formula towards the endpoints
        let near0 = pseudo_outcomes(&d, &nuis, Increment::new(1e-12).unwrap(), OutcomeTransform::Identity).unwrap();
        for (g, w) in near0.phi.iter().zip(want0) {
            assert!((g - w).abs() < 1e-9);
        }
    }

    #[test]
    fn delta_continuity_near_one() {
        let mut rng = crate::data::SeedSpec::new(4, 0).rng();
        let n = 200;
        let d = data_from((0..n).map(|_| rng.random_range(-5.0..5.0)).collect(), (0..n).map(|_| rng.random_range(0..2)).collect());
        let nuis = fit_from(
            (0..n).map(|_| rng.random_range(0.05..0.95)).collect(),
            (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
            (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
        );
        let at = |delta: f64| pseudo_outcomes(&d, &nuis, Increment::new(delta).unwrap(), OutcomeTransform::Identity).unwrap().phi;
        let base = at(1.0);
        for delta in [1.0 - 1e-9, 1.0 + 1e-9] {
            for (g, w) in at(delta).iter().zip(&base) {
                assert!((g - w).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn constant_design_mean_matches_closed_form() {
        // π ≡ 0.5, μ₁ ≡ 1, μ₀ ≡ 0, Y = A deterministic; closed form δ/(δ+1)
        let n = 20_000;
        let mut rng = crate::data::SeedSpec::new(8, 0).rng();
        let a: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let y: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        let d = data_from(y, a);
        let nuis = fit_from(vec![0.5; n], vec![0.0; n], vec![1.0; n]);
        for delta in [0.1, 0.5, 1.0, 3.0] {
            let inc = Increment::new(delta).unwrap();
            let truth = delta / (delta + 1.0);
            let eff = mean_effect(&d, &nuis, inc, OutcomeTransform::Identity).unwrap();
            assert!((eff.plugin - truth).abs() < 1e-12);
            assert!((eff.eif - truth).abs() <= 3.0 * eff.eif_se.max(1e-12));
            assert!((eff.ipw - truth).abs() <= 3.0 * eff.ipw_se);
        }
    }

    #[test]
    fn simple_estimator_identities() {
        let d = data_from(vec![1.0, 2.0, 4.0], vec![1, 0, 1]);
        let nuis = fit_from(vec![0.3, 0.6, 0.5], vec![1.0, 2.0, 3.0], vec![1.5, 1.0, 0.0]);
        let ipw1 = mean_ipw(&d, &nuis, Increment::ONE, OutcomeTransform::Identity).unwrap();
        assert!((ipw1 - 7.0 / 3.0).abs() < 1e-12);
        let plug1 = mean_plugin(&d, &nuis, Increment::ONE, OutcomeTransform::Identity).unwrap();
        let want = (0.3 * 1.5 + 0.7 * 1.0 + 0.6 * 1.0 + 0.4 * 2.0 + 0.0 + 0.5 * 3.0) / 3.0;
        assert!((plug1 - want).abs() < 1e-12);

        let d = data_from(vec![1.0, 2.0, 6.0], vec![1, 1, 1]);
        let nuis = fit_from(vec![0.5; 3], vec![0.0; 3], vec![0.0; 3]);
        let ipw = mean_ipw(&d, &nuis, Increment::new(2.0).unwrap(), OutcomeTransform::Identity).unwrap();
        assert!((ipw - 4.0 / 3.0 * 3.0).abs() < 1e-12);

        let nuis = fit_from(vec![0.2, 0.7, 0.4], vec![2.5; 3], vec![2.5; 3]);
        for delta in [0.0, 0.3, 7.0, f64::INFINITY] {
            let m = mean_plugin(&d, &nuis, Increment::new(delta).unwrap(), OutcomeTransform::Identity).unwrap();
            assert!((m - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_is_monotone_when_treatment_helps() {
        let n = 100_000;
        let mut rng = crate::data::SeedSpec::new(9, 0).rng();
        let pi: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..0.9)).collect();
        let m0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m1: Vec<f64> = m0.iter().map(|v| v + rng.random_range(0.1..2.0)).collect();
        let a: Vec<u8> = pi.iter().map(|&p| u8::from(rng.random::<f64>() < p)).collect();
        let y: Vec<f64> = (0..n).map(|i| if a[i] == 1 { m1[i] } else { m0[i] }).collect();
        let d = data_from(y, a);
        let nuis = fit_from(pi, m0, m1);
        let mut prev = f64::NEG_INFINITY;
        for delta in [0.0, 0.01, 0.1, 0.5, 1.0, 2.0, 10.0, 100.0, f64::INFINITY] {
            let m = pseudo_outcomes(&d, &nuis, Increment::new(delta).unwrap(), OutcomeTransform::Identity).unwrap().mean();
            assert!(m >= prev - 1e-12, "delta {delta}: {m} < {prev}");
            prev = m;
        }
    }

    #[test]
    fn missing_transform_is_config_error() {
        let d = data_from(vec![1.0], vec![1]);
        let nuis = fit_from(vec![0.5], vec![0.0], vec![0.0]);
        assert!(matches!(
            pseudo_outcomes(&d, &nuis, Increment::ONE, OutcomeTransform::Square),
            Err(Error::Config(_))
        ));
    }
}
