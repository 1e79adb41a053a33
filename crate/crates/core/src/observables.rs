//! Cylindrical test functions `φ(x) = Σ aᵢ trig(⟨x, hᵢ⟩)`, the Kolmogorov
//! operator on them, the closed-form Ornstein–Uhlenbeck semigroup, and Monte
//! Carlo estimates of the transition semigroup.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::drift::{drift_eval, DriftSpec};
use crate::engine::{par_endpoints, IntegratorConfig};
use crate::error::{invalid, Error, Result};
use crate::spectral::{SpectralModel, StateVector};
use crate::stats::mean_se;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrigKind {
    Sin,
    Cos,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CylTerm {
    pub amplitude: f64,
    pub kind: TrigKind,
    /// Frequency coefficients; modes past the end are zero.
    pub freq: StateVector,
}

impl CylTerm {
    fn phase(&self, x: &[f64]) -> f64 {
        self.freq.iter().zip(x).map(|(h, v)| h * v).sum()
    }

    fn trig(&self, p: f64) -> f64 {
        match self.kind {
            TrigKind::Sin => p.sin(),
            TrigKind::Cos => p.cos(),
        }
    }

    fn trig_prime(&self, p: f64) -> f64 {
        match self.kind {
            TrigKind::Sin => p.cos(),
            TrigKind::Cos => -p.sin(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<CylTerm>", into = "Vec<CylTerm>")]
pub struct CylFunc {
    terms: Vec<CylTerm>,
}

impl TryFrom<Vec<CylTerm>> for CylFunc {
    type Error = Error;
    fn try_from(terms: Vec<CylTerm>) -> Result<Self> {
        Self::new(terms)
    }
}

impl From<CylFunc> for Vec<CylTerm> {
    fn from(f: CylFunc) -> Self {
        f.terms
    }
}

impl CylFunc {
    pub fn new(terms: Vec<CylTerm>) -> Result<Self> {
        if terms.is_empty() {
            return Err(invalid("terms", "a cylindrical function needs at least one term"));
        }
        if terms.iter().any(|t| !t.amplitude.is_finite()) {
            return Err(Error::NonFinite {
                context: "cylindrical function amplitude".into(),
            });
        }
        Ok(Self { terms })
    }

    pub fn sin(amplitude: f64, freq: Vec<f64>) -> Result<Self> {
        Self::single(amplitude, TrigKind::Sin, freq)
    }

    pub fn cos(amplitude: f64, freq: Vec<f64>) -> Result<Self> {
        Self::single(amplitude, TrigKind::Cos, freq)
    }

    /// The constant `a`, written as `a·cos⟨·,0⟩`.
    pub fn constant(amplitude: f64) -> Result<Self> {
        Self::single(amplitude, TrigKind::Cos, Vec::new())
    }

    fn single(amplitude: f64, kind: TrigKind, freq: Vec<f64>) -> Result<Self> {
        Self::new(vec![CylTerm {
            amplitude,
            kind,
            freq: StateVector::new(freq)?,
        }])
    }

    pub fn terms(&self) -> &[CylTerm] {
        &self.terms
    }

    /// `a·φ + b·ψ` as a single cylindrical function.
    pub fn linear_combination(a: f64, phi: &CylFunc, b: f64, psi: &CylFunc) -> Self {
        let scaled = |c: f64, f: &CylFunc| -> Vec<CylTerm> {
            f.terms
                .iter()
                .map(|t| CylTerm {
                    amplitude: c * t.amplitude,
                    ..t.clone()
                })
                .collect()
        };
        let mut terms = scaled(a, phi);
        terms.extend(scaled(b, psi));
        Self { terms }
    }

    /// `Σ|aᵢ|`, a bound on `sup|φ|`.
    pub fn sup_bound(&self) -> f64 {
        self.terms.iter().map(|t| t.amplitude.abs()).sum()
    }

    /// Largest active mode index plus one.
    pub fn support_len(&self) -> usize {
        self.terms
            .iter()
            .map(|t| t.freq.iter().rposition(|h| *h != 0.0).map_or(0, |k| k + 1))
            .max()
            .unwrap_or(0)
    }

    pub fn check_model(&self, model: &SpectralModel) -> Result<()> {
        if self.support_len() > model.n_modes() {
            return Err(invalid(
                "observable",
                format!(
                    "frequency uses mode {} but the model has {} modes",
                    self.support_len() - 1,
                    model.n_modes()
                ),
            ));
        }
        Ok(())
    }

    /// Parses `a*sin(h= k:c, ...) + b*cos(...)`; mode indices are 0-based
    /// and must be below `n_modes`. `cos(h=)` is the constant 1.
    pub fn parse(s: &str, n_modes: usize) -> Result<Self> {
        let err = |msg: String| Error::Parse(format!("observable `{s}`: {msg}"));
        let mut terms = Vec::new();
        let mut rest = s.trim();
        let mut first = true;
        while !rest.is_empty() {
            let mut sign = 1.0;
            if let Some(r) = rest.strip_prefix('+') {
                rest = r.trim_start();
            } else if let Some(r) = rest.strip_prefix('-') {
                sign = -1.0;
                rest = r.trim_start();
            } else if !first {
                return Err(err(format!("expected `+` or `-` before `{rest}`")));
            }
            first = false;
            let amplitude = if rest.starts_with("sin(") || rest.starts_with("cos(") {
                1.0
            } else {
                let star = rest.find('*').ok_or_else(|| err("expected `amplitude*sin(...)`".into()))?;
                let a: f64 = rest[..star]
                    .trim()
                    .parse()
                    .map_err(|_| err(format!("bad amplitude `{}`", rest[..star].trim())))?;
                rest = rest[star + 1..].trim_start();
                a
            };
            let kind = if rest.starts_with("sin(") {
                TrigKind::Sin
            } else if rest.starts_with("cos(") {
                TrigKind::Cos
            } else {
                return Err(err(format!("expected sin( or cos( at `{rest}`")));
            };
            let close = rest.find(')').ok_or_else(|| err("missing `)`".into()))?;
            let inner = rest[4..close].trim();
            let inner = inner.strip_prefix("h").map(str::trim_start).unwrap_or(inner);
            let inner = inner.strip_prefix('=').unwrap_or(inner).trim();
            let mut freq = vec![0.0; n_modes];
            for entry in inner.split(',').map(str::trim).filter(|e| !e.is_empty()) {
                let (k, c) = entry
                    .split_once(':')
                    .ok_or_else(|| err(format!("expected `mode:coeff`, got `{entry}`")))?;
                let k: usize = k.trim().parse().map_err(|_| err(format!("bad mode index `{k}`")))?;
                let c: f64 = c.trim().parse().map_err(|_| err(format!("bad coefficient `{c}`")))?;
                if k >= n_modes {
                    return Err(err(format!("mode {k} out of range for {n_modes} modes")));
                }
                freq[k] += c;
            }
            terms.push(CylTerm {
                amplitude: sign * amplitude,
                kind,
                freq: StateVector::new(freq)?,
            });
            rest = rest[close + 1..].trim_start();
        }
        Self::new(terms)
    }
}

impl fmt::Display for CylFunc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.terms.iter().enumerate() {
            if i > 0 {
                write!(f, " + ")?;
            }
            let kind = match t.kind {
                TrigKind::Sin => "sin",
                TrigKind::Cos => "cos",
            };
            write!(f, "{:?}*{kind}(h=", t.amplitude)?;
            let mut sep = "";
            for (k, h) in t.freq.iter().enumerate().filter(|(_, h)| **h != 0.0) {
                write!(f, "{sep}{k}:{h:?}")?;
                sep = ",";
            }
            write!(f, ")")?;
        }
        Ok(())
    }
}

pub fn cyl_eval(phi: &CylFunc, x: &[f64]) -> f64 {
    phi.terms.iter().map(|t| t.amplitude * t.trig(t.phase(x))).sum()
}

pub fn cyl_grad(model: &SpectralModel, phi: &CylFunc, x: &[f64]) -> StateVector {
    let mut g = vec![0.0; model.n_modes()];
    for t in &phi.terms {
        let c = t.amplitude * t.trig_prime(t.phase(x));
        for (gk, hk) in g.iter_mut().zip(t.freq.iter()) {
            *gk += c * hk;
        }
    }
    StateVector::from_vec_unchecked(g)
}

/// `‖C^{1/2}∇φ(x)‖²`.
pub fn carre_du_champ(model: &SpectralModel, phi: &CylFunc, x: &[f64]) -> f64 {
    cyl_grad(model, phi, x)
        .iter()
        .zip(model.noise_coeffs())
        .map(|(g, c)| c * g * g)
        .sum()
}

/// `N₀φ(x) = ½Tr[C∇²φ(x)] + ⟨x, A∇φ(x)⟩ + ⟨F(x), ∇φ(x)⟩`.
pub fn apply_n0(model: &SpectralModel, drift: &DriftSpec, phi: &CylFunc, x: &[f64]) -> Result<f64> {
    model.check_state(x)?;
    phi.check_model(model)?;
    let f = if drift.is_zero() {
        None
    } else {
        Some(drift_eval(model, drift, x)?)
    };
    Ok(n0_with_drift(model, phi, x, f.as_deref()))
}

pub(crate) fn n0_with_drift(model: &SpectralModel, phi: &CylFunc, x: &[f64], f: Option<&[f64]>) -> f64 {
    let a = model.eigenvalues();
    let c = model.noise_coeffs();
    let mut total = 0.0;
    for t in &phi.terms {
        let p = t.phase(x);
        let mut trace = 0.0;
        let mut first = 0.0;
        for (k, hk) in t.freq.iter().enumerate() {
            if *hk == 0.0 {
                continue;
            }
            trace += c[k] * hk * hk;
            first += a[k] * x[k] * hk;
            if let Some(f) = f {
                first += f[k] * hk;
            }
        }
        // ∇²φ = -aᵢ·trig(p)·h⊗h for both kinds.
        total += t.amplitude * (-0.5 * trace * t.trig(p) + first * t.trig_prime(p));
    }
    total
}

/// The cylindrical function `T(t)φ` for the Ornstein–Uhlenbeck semigroup:
/// each frequency becomes `e^{tA}h` and each amplitude picks up the
/// characteristic-function factor `e^{-½⟨Q_t h, h⟩}`. `t` may be infinite.
pub fn ou_mehler_transform(model: &SpectralModel, phi: &CylFunc, t: f64) -> Result<CylFunc> {
    phi.check_model(model)?;
    let q = model.covariance_qt(t)?;
    let a = model.eigenvalues();
    let terms = phi
        .terms
        .iter()
        .map(|term| {
            let mut quad = 0.0;
            let freq: Vec<f64> = term
                .freq
                .iter()
                .enumerate()
                .map(|(k, h)| {
                    quad += q.variances[k] * h * h;
                    if *h == 0.0 || t.is_infinite() {
                        0.0
                    } else {
                        (a[k] * t).exp() * h
                    }
                })
                .collect();
            CylTerm {
                amplitude: term.amplitude * (-0.5 * quad).exp(),
                kind: term.kind,
                freq: StateVector::from_vec_unchecked(freq),
            }
        })
        .collect();
    Ok(CylFunc { terms })
}

/// `T(t)φ(x) = ∫φ(e^{tA}x + y) N(0, Q_t)(dy)` in closed form.
pub fn ou_mehler_exact(model: &SpectralModel, drift: &DriftSpec, phi: &CylFunc, x: &[f64], t: f64) -> Result<f64> {
    if !drift.is_zero() {
        return Err(invalid("drift", "the closed-form Mehler semigroup requires a zero drift"));
    }
    model.check_state(x)?;
    Ok(cyl_eval(&ou_mehler_transform(model, phi, t)?, x))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemigroupEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub t: f64,
    /// Paths dropped after crossing the divergence threshold.
    pub n_discarded: usize,
}

/// Monte Carlo `P(t)φ(x) = E[φ(X(t, x))]`.
#[allow(clippy::too_many_arguments)]
pub fn semigroup_mc(
    model: &SpectralModel,
    drift: &DriftSpec,
    cfg: &IntegratorConfig,
    phi: &CylFunc,
    x: &[f64],
    t: f64,
    n_paths: usize,
    seed: u64,
) -> Result<SemigroupEstimate> {
    semigroup_mc_multi(model, drift, cfg, std::slice::from_ref(phi), x, t, n_paths, seed).map(|mut v| v.remove(0))
}

/// [`semigroup_mc`] for several observables on the same paths.
#[allow(clippy::too_many_arguments)]
pub fn semigroup_mc_multi(
    model: &SpectralModel,
    drift: &DriftSpec,
    cfg: &IntegratorConfig,
    phis: &[CylFunc],
    x: &[f64],
    t: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<SemigroupEstimate>> {
    cfg.validate()?;
    model.check_state(x)?;
    for phi in phis {
        phi.check_model(model)?;
    }
    if n_paths < 2 {
        return Err(invalid("n_paths", "need at least two paths"));
    }
    if t == 0.0 {
        return Ok(phis
            .iter()
            .map(|phi| SemigroupEstimate {
                value: cyl_eval(phi, x),
                stderr: 0.0,
                n_paths,
                t,
                n_discarded: 0,
            })
            .collect());
    }
    let ends: Vec<Vec<f64>> = par_endpoints(model, drift, cfg, x, t, n_paths, seed)?
        .into_iter()
        .filter_map(|r| r.ok())
        .collect();
    if ends.is_empty() {
        return Err(Error::EmptyEnsemble("every path diverged".into()));
    }
    Ok(phis
        .iter()
        .map(|phi| {
            let values: Vec<f64> = ends.iter().map(|e| cyl_eval(phi, e)).collect();
            let m = mean_se(&values);
            SemigroupEstimate {
                value: m.mean,
                stderr: m.se,
                n_paths: values.len(),
                t,
                n_discarded: n_paths - values.len(),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffQuotient {
    pub t: f64,
    /// `(P(t)φ(x) - φ(x))/t`.
    pub quotient: f64,
    pub quotient_se: f64,
    pub n0_value: f64,
}

impl DiffQuotient {
    pub fn gap(&self) -> f64 {
        (self.quotient - self.n0_value).abs()
    }
}

#[allow(clippy::too_many_arguments)]
pub fn generator_diff_quotient(
    model: &SpectralModel,
    drift: &DriftSpec,
    cfg: &IntegratorConfig,
    phi: &CylFunc,
    x: &[f64],
    t_small: f64,
    n_paths: usize,
    seed: u64,
) -> Result<DiffQuotient> {
    if !(t_small > 0.0) {
        return Err(invalid("t_small", "must be positive"));
    }
    let est = semigroup_mc(model, drift, cfg, phi, x, t_small, n_paths, seed)?;
    Ok(DiffQuotient {
        t: t_small,
        quotient: (est.value - cyl_eval(phi, x)) / t_small,
        quotient_se: est.stderr / t_small,
        n0_value: apply_n0(model, drift, phi, x)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::DriftVariant;
    use crate::rng::NoiseStream;
    use crate::spectral::ModelSpec;
    use proptest::prelude::*;

    fn ou1() -> SpectralModel {
        SpectralModel::custom(vec![-1.0], vec![2.0], 2).unwrap()
    }

    fn heat(n: usize) -> SpectralModel {
        SpectralModel::build(&ModelSpec::HeatDirichlet { noise_scale: 1.0 }, n, 3 * n).unwrap()
    }

    fn cubic(m: &SpectralModel) -> DriftSpec {
        DriftSpec::nemytskii(m, vec![0.0, 0.0, 0.0, 1.0], 0.0).unwrap()
    }

    fn sample_phi() -> CylFunc {
        CylFunc::parse("0.7*sin(h=0:1.0,2:-0.5) - 0.4*cos(h=1:2.0) + cos(h=3:0.3)", 4).unwrap()
    }

    fn gaussian_point(n: usize, seed: u64) -> Vec<f64> {
        let mut z = vec![0.0; n];
        NoiseStream::new(seed, 0).fill_standard_normal(&mut z);
        z
    }

    #[test]
    fn trivial_values_at_origin() {
        let m = heat(3);
        let s = CylFunc::sin(1.0, vec![0.5, -1.0, 2.0]).unwrap();
        assert_eq!(cyl_eval(&s, &[0.0; 3]), 0.0);
        assert_eq!(cyl_grad(&m, &s, &[0.0; 3]).to_vec(), vec![0.5, -1.0, 2.0]);
        let c = CylFunc::cos(1.0, vec![0.5, -1.0, 2.0]).unwrap();
        assert_eq!(cyl_eval(&c, &[0.0; 3]), 1.0);
        assert!(cyl_grad(&m, &c, &[0.0; 3]).iter().all(|g| *g == 0.0));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let m = heat(4);
        let phi = sample_phi();
        for seed in 0..5 {
            let x = gaussian_point(4, seed);
            let g = cyl_grad(&m, &phi, &x);
            let h = 1e-5;
            for k in 0..4 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let fd = (cyl_eval(&phi, &xp) - cyl_eval(&phi, &xm)) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn parser_round_trip_and_errors() {
        let phi = sample_phi();
        assert_eq!(phi.terms().len(), 3);
        assert_eq!(phi.terms()[1].amplitude, -0.4);
        assert_eq!(phi.terms()[2].amplitude, 1.0);
        assert_eq!(phi.terms()[0].freq.to_vec(), vec![1.0, 0.0, -0.5, 0.0]);
        let again = CylFunc::parse(&phi.to_string(), 4).unwrap();
        assert_eq!(again, phi);
        let one = CylFunc::parse("2.5*cos(h=)", 4).unwrap();
        assert_eq!(cyl_eval(&one, &[3.0, 1.0, 2.0, 0.0]), 2.5);
        assert!(CylFunc::parse("sin(h=4:1)", 4).is_err());
        assert!(CylFunc::parse("tan(h=0:1)", 4).is_err());
        assert!(CylFunc::parse("sin(h=0:1) cos(h=1:1)", 4).is_err());
        assert!(CylFunc::parse("", 4).is_err());
        assert!(CylFunc::parse("1e-3*sin(h=0:-2.5e-1)", 4).is_ok());
    }

    #[test]
    fn serde_round_trip() {
        let phi = sample_phi();
        let s = serde_json::to_string(&phi).unwrap();
        assert_eq!(serde_json::from_str::<CylFunc>(&s).unwrap(), phi);
        assert!(serde_json::from_str::<CylFunc>("[]").is_err());
    }

    #[test]
    fn n0_trivial_cases() {
        let m = heat(4);
        let d = cubic(&m);
        let s = CylFunc::sin(1.0, vec![1.0, 0.5, 0.0, 0.0]).unwrap();
        assert_eq!(apply_n0(&m, &d, &s, &[0.0; 4]).unwrap(), 0.0);
        let o = ou1();
        let c = CylFunc::cos(1.0, vec![1.0]).unwrap();
        assert!((apply_n0(&o, &DriftSpec::zero(&o), &c, &[0.0]).unwrap() + 1.0).abs() < 1e-15);
        let z = CylFunc::sin(0.0, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(apply_n0(&m, &d, &z, &[0.3, 0.1, 0.0, 0.2]).unwrap(), 0.0);
    }

    #[test]
    fn n0_is_linear() {
        let m = heat(4);
        let d = cubic(&m);
        let phi = sample_phi();
        let psi = CylFunc::parse("cos(h=0:0.2,1:0.4) - 2*sin(h=3:1)", 4).unwrap();
        let combo = CylFunc::linear_combination(0.3, &phi, -1.7, &psi);
        for seed in 0..5 {
            let x = gaussian_point(4, seed + 10);
            let lhs = apply_n0(&m, &d, &combo, &x).unwrap();
            let rhs = 0.3 * apply_n0(&m, &d, &phi, &x).unwrap() - 1.7 * apply_n0(&m, &d, &psi, &x).unwrap();
            assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn n0_matches_finite_difference_operator() {
        // ½Σ c_k ∂²φ/∂x_k² + Σ (a_k x_k + F_k) ∂φ/∂x_k by central differences.
        let m = heat(4);
        let d = cubic(&m);
        let phi = sample_phi();
        for seed in 0..4 {
            let x: Vec<f64> = gaussian_point(4, seed + 20).iter().map(|v| 0.3 * v).collect();
            let f = drift_eval(&m, &d, &x).unwrap();
            let h = 1e-4;
            let mut fd = 0.0;
            for k in 0..4 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let (p, c, mm) = (cyl_eval(&phi, &xp), cyl_eval(&phi, &x), cyl_eval(&phi, &xm));
                fd += 0.5 * m.noise_coeffs()[k] * (p - 2.0 * c + mm) / (h * h);
                fd += (m.eigenvalues()[k] * x[k] + f[k]) * (p - mm) / (2.0 * h);
            }
            let n0 = apply_n0(&m, &d, &phi, &x).unwrap();
            assert!((n0 - fd).abs() < 1e-6 * (1.0 + n0.abs()), "{n0} vs {fd}");
        }
    }

    #[test]
    fn mehler_trivial_limits() {
        let o = ou1();
        let z = DriftSpec::zero(&o);
        let c = CylFunc::cos(1.0, vec![1.0]).unwrap();
        let s = CylFunc::sin(1.0, vec![1.0]).unwrap();
        assert_eq!(ou_mehler_exact(&o, &z, &c, &[0.7], 0.0).unwrap(), 0.7f64.cos());
        let inf = ou_mehler_exact(&o, &z, &c, &[0.7], f64::INFINITY).unwrap();
        assert!((inf - (-0.5f64).exp()).abs() < 1e-15);
        assert!((inf - 0.606531).abs() < 1e-6);
        assert_eq!(ou_mehler_exact(&o, &z, &s, &[3.0], f64::INFINITY).unwrap(), 0.0);
        let lin = DriftSpec::linear(&o, 0.1).unwrap();
        assert!(ou_mehler_exact(&o, &lin, &c, &[0.0], 1.0).is_err());
    }

    #[test]
    fn mehler_derivative_at_zero_is_n0() {
        let m = heat(4);
        let z = DriftSpec::zero(&m);
        let phi = sample_phi();
        let x = gaussian_point(4, 3);
        let h = 1e-6;
        let d = (ou_mehler_exact(&m, &z, &phi, &x, h).unwrap() - cyl_eval(&phi, &x)) / h;
        let n0 = apply_n0(&m, &z, &phi, &x).unwrap();
        assert!((d - n0).abs() < 1e-3 * (1.0 + n0.abs()), "{d} vs {n0}");
    }

    proptest! {
        #[test]
        fn mehler_semigroup_property(t in 0.0f64..2.0, s in 0.0f64..2.0, x0 in -2.0f64..2.0, x1 in -2.0f64..2.0) {
            let m = heat(4);
            let z = DriftSpec::zero(&m);
            let phi = sample_phi();
            let x = [x0, x1, 0.5, -0.25];
            let once = ou_mehler_exact(&m, &z, &phi, &x, t + s).unwrap();
            let inner = ou_mehler_transform(&m, &phi, s).unwrap();
            let twice = ou_mehler_exact(&m, &z, &inner, &x, t).unwrap();
            prop_assert!((once - twice).abs() < 1e-12);
        }

        #[test]
        fn cyl_eval_is_bounded(x0 in -50.0f64..50.0, x1 in -50.0f64..50.0, x2 in -50.0f64..50.0, x3 in -50.0f64..50.0) {
            let phi = sample_phi();
            prop_assert!(cyl_eval(&phi, &[x0, x1, x2, x3]).abs() <= phi.sup_bound() + 1e-15);
        }
    }

    #[test]
    fn semigroup_mc_at_zero_time() {
        let m = heat(4);
        let d = cubic(&m);
        let cfg = IntegratorConfig::new(1e-3, 1.0).unwrap();
        let phi = sample_phi();
        let x = [0.2, -0.1, 0.3, 0.0];
        let e = semigroup_mc(&m, &d, &cfg, &phi, &x, 0.0, 10, 0).unwrap();
        assert_eq!(e.value, cyl_eval(&phi, &x));
        assert_eq!(e.stderr, 0.0);
        assert!(semigroup_mc(&m, &d, &cfg, &phi, &x, 0.1, 1, 0).is_err());
    }

    #[test]
    fn semigroup_mc_matches_mehler_for_ou() {
        let m = heat(4);
        let z = DriftSpec::zero(&m);
        let cfg = IntegratorConfig::new(0.05, 1.0).unwrap();
        let phi = sample_phi();
        let x = [0.5, 0.2, -0.4, 1.0];
        for t in [0.1, 0.5] {
            let e = semigroup_mc(&m, &z, &cfg, &phi, &x, t, 10_000, 11).unwrap();
            let exact = ou_mehler_exact(&m, &z, &phi, &x, t).unwrap();
            assert!((e.value - exact).abs() <= 3.0 * e.stderr, "t={t}: {} vs {exact}", e.value);
            assert!(e.value.abs() <= phi.sup_bound());
            assert_eq!(e.n_discarded, 0);
        }
    }

    #[test]
    fn semigroup_mc_counts_discarded_paths() {
        let m = SpectralModel::custom(vec![-1.0], vec![0.0], 2).unwrap();
        let bad = DriftSpec::unchecked(
            &m,
            DriftVariant::NemytskiiGradient {
                phi_prime: vec![0.0, 0.0, 0.0, -50.0],
            },
            0.0,
        );
        let cfg = IntegratorConfig::new(0.01, 5.0).unwrap();
        let phi = CylFunc::constant(1.0).unwrap();
        assert!(matches!(
            semigroup_mc(&m, &bad, &cfg, &phi, &[3.0], 5.0, 4, 0),
            Err(Error::EmptyEnsemble(_))
        ));
    }

    #[test]
    fn diff_quotient_cases() {
        let o = ou1();
        let z = DriftSpec::zero(&o);
        let cfg = IntegratorConfig::new(1e-4, 1.0).unwrap();
        let c = CylFunc::cos(1.0, vec![1.0]).unwrap();
        let q = generator_diff_quotient(&o, &z, &cfg, &c, &[0.5], 1e-3, 20_000, 2).unwrap();
        // Exact d/dt of the Mehler formula at t = 0.
        let exact = -0.5 * 2.0 * 0.5f64.cos() + 0.5 * 0.5f64.sin();
        assert!((q.n0_value - exact).abs() < 1e-14);
        assert!(q.gap() <= 3.0 * q.quotient_se + 0.01, "{q:?}");

        let zero = CylFunc::sin(0.0, vec![1.0]).unwrap();
        let q0 = generator_diff_quotient(&o, &z, &cfg, &zero, &[0.5], 1e-3, 10, 2).unwrap();
        assert_eq!((q0.quotient, q0.n0_value), (0.0, 0.0));
        assert!(generator_diff_quotient(&o, &z, &cfg, &c, &[0.5], 0.0, 10, 2).is_err());
    }
}
