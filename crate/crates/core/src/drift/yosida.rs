//! Yosida approximants `F_δ(x) = F(x_δ)` where `x_δ - δ(F(x_δ) - ζ₂x_δ) = x`,
//! and their Gaussian (Mehler) smoothing `F_{δ,s}`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{drift_eval, one_sided_lipschitz, sample_pair, DriftSpec, DriftVariant};
use crate::error::{invalid, Error, Result};
use crate::rng::NoiseStream;
use crate::spectral::{dot, norm, DiagCovariance, SpectralModel, StateVector};
use crate::stats::{mean_se, pairwise_sum};

const RESIDUAL_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 200;
/// Slack allowed on every sampled Yosida inequality.
const PROPERTY_SLACK: f64 = 1e-8;

fn check_delta(delta: f64) -> Result<()> {
    if delta.is_finite() && delta > 0.0 {
        Ok(())
    } else {
        Err(invalid("delta", "must be positive"))
    }
}

/// `G(y) = F(y) - ζ₂ y`.
fn g_eval(model: &SpectralModel, drift: &DriftSpec, y: &[f64]) -> Result<Vec<f64>> {
    let f = drift_eval(model, drift, y)?;
    Ok(f.iter().zip(y).map(|(fk, yk)| fk - drift.zeta2() * yk).collect())
}

fn residual(model: &SpectralModel, drift: &DriftSpec, delta: f64, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let g = g_eval(model, drift, y)?;
    Ok(y.iter()
        .zip(&g)
        .zip(x)
        .map(|((yk, gk), xk)| yk - delta * gk - xk)
        .collect())
}

/// Solves `y - δ(F(y) - ζ₂y) = x` starting from `x`.
pub fn yosida_resolve(model: &SpectralModel, drift: &DriftSpec, delta: f64, x: &[f64]) -> Result<StateVector> {
    yosida_resolve_from(model, drift, delta, x, x)
}

/// Same as [`yosida_resolve`] with an explicit initial iterate.
///
/// Damped Newton on the residual. `I - δ DG(y)` has spectrum in `[1, ∞)`
/// whenever `G` is dissipative, so every Newton step is well posed and
/// backtracking on the residual norm converges globally.
pub fn yosida_resolve_from(
    model: &SpectralModel,
    drift: &DriftSpec,
    delta: f64,
    x: &[f64],
    init: &[f64],
) -> Result<StateVector> {
    check_delta(delta)?;
    model.check_state(x)?;
    model.check_state(init)?;
    if matches!(drift.variant(), DriftVariant::Zero | DriftVariant::Linear) {
        return Ok(StateVector::from_vec_unchecked(x.to_vec()));
    }
    let n = model.n_modes();
    let target = RESIDUAL_TOL * (1.0 + norm(x));
    let mut y = init.to_vec();
    let mut r = residual(model, drift, delta, x, &y)?;
    let mut rn = norm(&r);
    for _ in 0..NEWTON_MAX_ITER {
        if rn <= 1e-3 * target {
            break;
        }
        let dg = drift.jacobian(model, &y)? - DMatrix::<f64>::identity(n, n) * drift.zeta2();
        let jac = DMatrix::<f64>::identity(n, n) - dg * delta;
        let rhs = -DVector::from_column_slice(&r);
        let Some(step) = jac.lu().solve(&rhs) else {
            break;
        };
        let mut lambda = 1.0;
        let mut improved = false;
        while lambda > 1e-12 {
            let trial: Vec<f64> = y.iter().zip(step.iter()).map(|(a, d)| a + lambda * d).collect();
            if let Ok(rt) = residual(model, drift, delta, x, &trial) {
                let rtn = norm(&rt);
                if rtn < (1.0 - 1e-4 * lambda) * rn || (rtn <= target && rtn < rn) {
                    y = trial;
                    r = rt;
                    rn = rtn;
                    improved = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !improved {
            break;
        }
    }
    if rn <= target {
        Ok(StateVector::from_vec_unchecked(y))
    } else {
        Err(Error::NonConvergence {
            iterations: NEWTON_MAX_ITER,
            residual: rn,
        })
    }
}

/// `F_δ(x) = F(x_δ)`.
pub fn yosida_f(model: &SpectralModel, drift: &DriftSpec, delta: f64, x: &[f64]) -> Result<StateVector> {
    let xd = yosida_resolve(model, drift, delta, x)?;
    drift_eval(model, drift, &xd)
}

/// `G_δ(x) = G(x_δ)`.
pub fn yosida_g(model: &SpectralModel, drift: &DriftSpec, delta: f64, x: &[f64]) -> Result<StateVector> {
    let xd = yosida_resolve(model, drift, delta, x)?;
    Ok(StateVector::from_vec_unchecked(g_eval(model, drift, &xd)?))
}

/// `‖F_δ(x) - F(x)‖` for each δ in the ladder.
pub fn yosida_ladder(model: &SpectralModel, drift: &DriftSpec, deltas: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let f = drift_eval(model, drift, x)?;
    deltas
        .iter()
        .map(|&d| {
            let fd = yosida_f(model, drift, d, x)?;
            Ok(norm(&fd.iter().zip(f.iter()).map(|(a, b)| a - b).collect::<Vec<_>>()))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct YosidaReport {
    pub delta: f64,
    pub n_pairs: usize,
    /// Largest `‖G_δ(x)-G_δ(z)‖ / ‖x-z‖`; must not exceed `2/δ`.
    pub lipschitz_ratio: f64,
    pub lipschitz_bound: f64,
    /// Largest `⟨G_δ(x)-G_δ(z), x-z⟩ / ‖x-z‖²`; must not exceed 0.
    pub monotonicity: f64,
    /// Largest `‖G_δ(x)‖ - ‖G(x)‖`; must not exceed 0.
    pub norm_excess: f64,
    /// Largest sampled one-sided Lipschitz quotient of `F_δ`; must not exceed `ζ₂`.
    pub f_delta_dissipativity: f64,
    pub zeta2: f64,
    pub pass: bool,
    pub witness: Option<String>,
}

/// Samples pairs and checks the Lipschitz, monotonicity, norm-reduction and
/// dissipativity properties of the Yosida approximants.
pub fn yosida_property_check(
    model: &SpectralModel,
    drift: &DriftSpec,
    delta: f64,
    n_pairs: usize,
    seed: u64,
) -> Result<YosidaReport> {
    check_delta(delta)?;
    if n_pairs == 0 {
        return Err(invalid("n_pairs", "need at least one pair"));
    }
    let n = model.n_modes();
    struct PairStats {
        lip: f64,
        mono: f64,
        excess: f64,
        x: Vec<f64>,
        z: Vec<f64>,
    }
    let rows: Vec<PairStats> = (0..n_pairs)
        .into_par_iter()
        .map(|i| {
            let (x, z) = sample_pair(n, seed, i);
            let gx = yosida_g(model, drift, delta, &x)?;
            let gz = yosida_g(model, drift, delta, &z)?;
            let g_plain = g_eval(model, drift, &x)?;
            let d: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a - b).collect();
            let dg: Vec<f64> = gx.iter().zip(gz.iter()).map(|(a, b)| a - b).collect();
            let dn = norm(&d);
            Ok(PairStats {
                lip: norm(&dg) / dn,
                mono: dot(&dg, &d) / (dn * dn),
                excess: (gx.norm() - norm(&g_plain)) / (1.0 + norm(&g_plain)),
                x,
                z,
            })
        })
        .collect::<Result<_>>()?;

    let lipschitz_bound = 2.0 / delta;
    let mut report = YosidaReport {
        delta,
        n_pairs,
        lipschitz_ratio: f64::NEG_INFINITY,
        lipschitz_bound,
        monotonicity: f64::NEG_INFINITY,
        norm_excess: f64::NEG_INFINITY,
        f_delta_dissipativity: f64::NEG_INFINITY,
        zeta2: drift.zeta2(),
        pass: true,
        witness: None,
    };
    for r in &rows {
        report.lipschitz_ratio = report.lipschitz_ratio.max(r.lip);
        report.monotonicity = report.monotonicity.max(r.mono);
        report.norm_excess = report.norm_excess.max(r.excess);
        let violation = if r.lip > lipschitz_bound + PROPERTY_SLACK {
            Some("lipschitz")
        } else if r.mono > PROPERTY_SLACK {
            Some("monotonicity")
        } else if r.excess > PROPERTY_SLACK {
            Some("norm reduction")
        } else {
            None
        };
        if let (Some(kind), None) = (violation, &report.witness) {
            report.pass = false;
            report.witness = Some(format!("{kind} violated at x = {:?}, z = {:?}", r.x, r.z));
        }
    }
    let fd = one_sided_lipschitz(model, n_pairs, seed, |x| yosida_f(model, drift, delta, x))?;
    report.f_delta_dissipativity = fd.zeta2_hat;
    if fd.zeta2_hat > drift.zeta2() + PROPERTY_SLACK {
        report.pass = false;
        if report.witness.is_none() {
            let (x, z) = fd.max_violation_pair;
            report.witness = Some(format!(
                "F_delta dissipativity violated at x = {:?}, z = {:?}",
                x.into_inner(),
                z.into_inner()
            ));
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MehlerEstimate {
    pub value: StateVector,
    /// Per-mode Monte Carlo standard errors.
    pub stderr: Vec<f64>,
    pub n_samples: usize,
}

/// Monte Carlo `F_{δ,s}(x) = ∫ F_δ(y) N(e^{-(s/2)Q⁻¹}x, Q(I - e^{-sQ⁻¹}))(dy)`.
pub fn mehler_smooth(
    model: &SpectralModel,
    drift: &DriftSpec,
    delta: f64,
    s: f64,
    smoothing_cov: &DiagCovariance,
    x: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<StateVector> {
    mehler_smooth_estimate(model, drift, delta, s, smoothing_cov, x, n_samples, seed).map(|e| e.value)
}

/// [`mehler_smooth`] together with per-mode standard errors. Sample `i` uses
/// the standard normals of stream `(seed, i)`, so estimates at different `s`
/// share their randomness.
#[allow(clippy::too_many_arguments)]
pub fn mehler_smooth_estimate(
    model: &SpectralModel,
    drift: &DriftSpec,
    delta: f64,
    s: f64,
    smoothing_cov: &DiagCovariance,
    x: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<MehlerEstimate> {
    check_delta(delta)?;
    model.check_state(x)?;
    if !(s.is_finite() && s > 0.0) {
        return Err(invalid("s", "smoothing time must be positive"));
    }
    if n_samples == 0 {
        return Err(invalid("n_samples", "need at least one sample"));
    }
    if smoothing_cov.variances.len() != model.n_modes() || !smoothing_cov.is_strictly_positive() {
        return Err(invalid(
            "smoothing_cov",
            "smoothing covariance must be strictly positive in every mode",
        ));
    }
    let (scale, sd): (Vec<f64>, Vec<f64>) = smoothing_cov
        .variances
        .iter()
        .map(|q| ((-s / (2.0 * q)).exp(), (-q * (-s / q).exp_m1()).sqrt()))
        .unzip();
    let n = model.n_modes();
    let samples: Vec<StateVector> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut z = vec![0.0; n];
            NoiseStream::new(seed, i as u64).fill_standard_normal(&mut z);
            let y: Vec<f64> = (0..n).map(|k| scale[k] * x[k] + sd[k] * z[k]).collect();
            yosida_f(model, drift, delta, &y)
        })
        .collect::<Result<_>>()?;
    let mut value = vec![0.0; n];
    let mut stderr = vec![0.0; n];
    for k in 0..n {
        let col: Vec<f64> = samples.iter().map(|v| v[k]).collect();
        let m = mean_se(&col);
        value[k] = m.mean;
        stderr[k] = m.se;
    }
    debug_assert!(pairwise_sum(&value).is_finite());
    Ok(MehlerEstimate {
        value: StateVector::from_vec_unchecked(value),
        stderr,
        n_samples,
    })
}
