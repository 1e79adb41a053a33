//! Invariant-measure estimation and measure-level identity checks.

use std::ops::ControlFlow;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drift::{first_decrease, poly_antiderivative, poly_derivative, poly_eval, DriftSpec};
use crate::engine::{endpoint, par_endpoints, IntegratorConfig, Stepper};
use crate::error::{invalid, Error, Result};
use crate::observables::{carre_du_champ, cyl_eval, n0_with_drift, CylFunc};
use crate::rng::{derive_seed, NoiseStream};
use crate::spectral::{norm, SpectralModel, StateVector};
use crate::stats::{mean_se, mean_se_correlated, pairwise_sum, weighted_quantile, MeanSe};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    LongRun,
    LargeTimeEnsemble,
    #[serde(rename = "PCN")]
    Pcn,
    ClosedFormGaussian,
}

impl Provenance {
    /// Samples form a Markov chain in storage order.
    fn is_correlated(self) -> bool {
        matches!(self, Provenance::LongRun | Provenance::Pcn)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureEnsemble {
    samples: Vec<StateVector>,
    weights: Vec<f64>,
    provenance: Provenance,
    uniform: bool,
}

impl MeasureEnsemble {
    pub fn new(samples: Vec<StateVector>, weights: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyEnsemble("no samples".into()));
        }
        if weights.len() != samples.len() {
            return Err(Error::SizeMismatch {
                what: "ensemble weights",
                expected: samples.len(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid("weights", "must be finite and nonnegative"));
        }
        if (pairwise_sum(&weights) - 1.0).abs() > 1e-12 {
            return Err(invalid("weights", "must sum to 1"));
        }
        let uniform = weights.iter().all(|w| *w == weights[0]);
        Ok(Self {
            samples,
            weights,
            provenance,
            uniform,
        })
    }

    pub fn uniform(samples: Vec<StateVector>, provenance: Provenance) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyEnsemble("no samples".into()));
        }
        let w = 1.0 / samples.len() as f64;
        Ok(Self {
            weights: vec![w; samples.len()],
            samples,
            provenance,
            uniform: true,
        })
    }

    /// Normalizes nonnegative weights.
    pub fn weighted(samples: Vec<StateVector>, weights: Vec<f64>, provenance: Provenance) -> Result<Self> {
        let total = pairwise_sum(&weights);
        if !(total > 0.0 && total.is_finite()) {
            return Err(invalid("weights", "total weight must be positive and finite"));
        }
        Self::new(samples, weights.iter().map(|w| w / total).collect(), provenance)
    }

    pub fn point_mass(x: StateVector) -> Self {
        Self {
            samples: vec![x],
            weights: vec![1.0],
            provenance: Provenance::LargeTimeEnsemble,
            uniform: true,
        }
    }

    pub fn samples(&self) -> &[StateVector] {
        &self.samples
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `1/Σwᵢ²`; the raw sample count for uniform weights.
    pub fn weight_ess(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Weighted mean of per-sample values with a standard error that accounts
    /// for chain autocorrelation (uniform chains) or weight degeneracy.
    pub fn mean_se(&self, values: &[f64]) -> MeanSe {
        assert_eq!(values.len(), self.len());
        if self.uniform {
            return if self.provenance.is_correlated() {
                mean_se_correlated(values)
            } else {
                mean_se(values)
            };
        }
        let prods: Vec<f64> = values.iter().zip(&self.weights).map(|(v, w)| v * w).collect();
        let mean = pairwise_sum(&prods);
        let dev: Vec<f64> = values
            .iter()
            .zip(&self.weights)
            .map(|(v, w)| (w * (v - mean)).powi(2))
            .collect();
        MeanSe {
            mean,
            se: pairwise_sum(&dev).sqrt(),
            ess: self.weight_ess(),
            n: values.len(),
        }
    }

    fn check_model(&self, model: &SpectralModel) -> Result<()> {
        model.check_state(&self.samples[0])
    }
}

/// Convex part `φ` (coefficients in increasing degree) and quadratic
/// coefficient of the potential `U(f) = ∫ φ(f) + (ζ₂/2) f²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSpec {
    pub phi_coeffs: Vec<f64>,
    pub zeta2: f64,
}

impl PotentialSpec {
    pub fn new(phi_coeffs: Vec<f64>, zeta2: f64) -> Result<Self> {
        if phi_coeffs.iter().any(|c| !c.is_finite()) || !zeta2.is_finite() {
            return Err(invalid("potential", "coefficients must be finite"));
        }
        if let Some(y) = first_decrease(&poly_derivative(&phi_coeffs)) {
            return Err(invalid(
                "phi",
                format!("phi' must be nondecreasing; it decreases near y = {y}"),
            ));
        }
        Ok(Self { phi_coeffs, zeta2 })
    }

    /// Potential whose convex part has derivative `φ′` with `φ(0) = 0`.
    pub fn from_phi_prime(phi_prime: &[f64], zeta2: f64) -> Result<Self> {
        Self::new(poly_antiderivative(phi_prime), zeta2)
    }

    pub fn zero() -> Self {
        Self {
            phi_coeffs: Vec::new(),
            zeta2: 0.0,
        }
    }

    /// `U(x)` by grid quadrature.
    pub fn value(&self, model: &SpectralModel, x: &[f64]) -> f64 {
        let mut grid = vec![0.0; model.grid_size()];
        self.value_with_grid(model, x, &mut grid)
    }

    fn value_with_grid(&self, model: &SpectralModel, x: &[f64], grid: &mut [f64]) -> f64 {
        model.synthesize_into(x, grid);
        let terms: Vec<f64> = grid
            .iter()
            .map(|f| poly_eval(&self.phi_coeffs, *f) + 0.5 * self.zeta2 * f * f)
            .collect();
        model.quadrature_weight() * pairwise_sum(&terms)
    }

    /// The gradient drift `F = -C∇U` for scalar noise `C = cI`, written as a
    /// Nemytskii drift `-cφ′(f) + (-cζ₂) f`.
    pub fn to_drift(&self, model: &SpectralModel) -> Result<DriftSpec> {
        let c = model
            .scalar_noise()
            .ok_or_else(|| invalid("model", "gradient systems need a noise covariance proportional to the identity"))?;
        let phi_prime: Vec<f64> = poly_derivative(&self.phi_coeffs).iter().map(|p| c * p).collect();
        DriftSpec::nemytskii(model, phi_prime, -c * self.zeta2)
    }
}

/// `8/|ζ|`, a large time for the ensemble estimator.
pub fn default_t_large(drift: &DriftSpec) -> f64 {
    8.0 / drift.zeta().abs()
}

/// States of one trajectory from 0 on `[burn_in, cfg.t_final]`, one every
/// `thin` steps, at most `n_keep` of them.
#[allow(clippy::too_many_arguments)]
pub fn estimate_longrun(
    model: &SpectralModel,
    drift: &DriftSpec,
    cfg: &IntegratorConfig,
    burn_in: f64,
    thin: usize,
    n_keep: usize,
    seed: u64,
) -> Result<MeasureEnsemble> {
    cfg.validate()?;
    if !(burn_in >= 0.0 && burn_in.is_finite()) {
        return Err(invalid("burn_in", "must be finite and nonnegative"));
    }
    if thin == 0 {
        return Err(invalid("thin", "must be at least 1"));
    }
    let (n_steps, dt) = cfg.steps_for(cfg.t_final)?;
    let burn_steps = (burn_in / dt - 1e-9).ceil().max(0.0) as u64;
    if burn_steps >= n_steps || n_keep == 0 {
        return Err(Error::EmptyEnsemble("burn-in covers the whole run".into()));
    }
    let mut stepper = Stepper::new(model, drift, cfg.scheme, dt)?;
    let mut x = vec![0.0; model.n_modes()];
    let mut kept = Vec::with_capacity(n_keep.min(((n_steps - burn_steps) / thin as u64 + 1) as usize));
    let thin = thin as u64;
    stepper.run(&mut x, seed, 0, 0, n_steps, |i, state| {
        if i > burn_steps && (i - burn_steps) % thin == 0 {
            kept.push(StateVector::from_vec_unchecked(state.to_vec()));
            if kept.len() == n_keep {
                return ControlFlow::Break(());
            }
        }
        ControlFlow::Continue(())
    })?;
    MeasureEnsemble::uniform(kept, Provenance::LongRun)
}

/// Endpoints `X(t_large, x0)` of independent paths.
#[allow(clippy::too_many_arguments)]
pub fn estimate_ensemble(
    model: &SpectralModel,
    drift: &DriftSpec,
    cfg: &IntegratorConfig,
    x0: &[f64],
    t_large: f64,
    n_paths: usize,
    seed: u64,
) -> Result<MeasureEnsemble> {
    cfg.validate()?;
    model.check_state(x0)?;
    if n_paths == 0 {
        return Err(Error::EmptyEnsemble("no paths requested".into()));
    }
    let samples = par_endpoints(model, drift, cfg, x0, t_large, n_paths, seed)?
        .into_iter()
        .map(|r| r.map(StateVector::from_vec_unchecked))
        .collect::<Result<Vec<_>>>()?;
    MeasureEnsemble::uniform(samples, Provenance::LargeTimeEnsemble)
}

/// Draw `i` of `N(0, Q∞)`.
fn gaussian_draw(sd: &[f64], seed: u64, i: u64, out: &mut [f64]) {
    NoiseStream::new(seed, i).fill_standard_normal(out);
    for (o, s) in out.iter_mut().zip(sd) {
        *o *= s;
    }
}

/// Independent samples of the reference Gaussian `μ = N(0, Q∞)`.
pub fn sample_gaussian_measure(model: &SpectralModel, n: usize, seed: u64) -> Result<MeasureEnsemble> {
    let sd: Vec<f64> = model.covariance_qinf().variances.iter().map(|v| v.sqrt()).collect();
    let samples = (0..n as u64)
        .map(|i| {
            let mut x = vec![0.0; sd.len()];
            gaussian_draw(&sd, seed, i, &mut x);
            StateVector::from_vec_unchecked(x)
        })
        .collect();
    MeasureEnsemble::uniform(samples, Provenance::ClosedFormGaussian)
}

/// `μ` samples reweighted by `e^{-2U}`: an importance-sampling
/// representation of `ν = e^{-2U}μ / B`.
pub fn weighted_gaussian_ensemble(
    model: &SpectralModel,
    potential: &PotentialSpec,
    n: usize,
    seed: u64,
) -> Result<MeasureEnsemble> {
    let base = sample_gaussian_measure(model, n, seed)?;
    let mut grid = vec![0.0; model.grid_size()];
    let log_w: Vec<f64> = base
        .samples
        .iter()
        .map(|x| -2.0 * potential.value_with_grid(model, x, &mut grid))
        .collect();
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    MeasureEnsemble::weighted(base.samples, w, Provenance::ClosedFormGaussian)
}

/// Monte Carlo `B = ∫e^{-2U} dμ`. Diagnostic only.
pub fn normalization_constant(model: &SpectralModel, potential: &PotentialSpec, n: usize, seed: u64) -> Result<MeanSe> {
    let base = sample_gaussian_measure(model, n, seed)?;
    let mut grid = vec![0.0; model.grid_size()];
    let vals: Vec<f64> = base
        .samples
        .iter()
        .map(|x| (-2.0 * potential.value_with_grid(model, x, &mut grid)).exp())
        .collect();
    Ok(mean_se(&vals))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcnConfig {
    pub n_steps: usize,
    pub step_size: f64,
    #[serde(default)]
    pub burn_in: usize,
    #[serde(default = "one")]
    pub thin: usize,
}

fn one() -> usize {
    1
}

impl PcnConfig {
    pub fn new(n_steps: usize, step_size: f64) -> Self {
        Self {
            n_steps,
            step_size,
            burn_in: 0,
            thin: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcnRun {
    pub ensemble: MeasureEnsemble,
    pub acceptance_rate: f64,
    /// Set when the acceptance rate is outside `[0.05, 0.95]`.
    pub warning: Option<String>,
}

/// Preconditioned Crank–Nicolson chain targeting `e^{-2U}μ`, started from a
/// draw of `μ`.
pub fn pcn_sample(model: &SpectralModel, potential: &PotentialSpec, cfg: &PcnConfig, seed: u64) -> Result<PcnRun> {
    model
        .scalar_noise()
        .ok_or_else(|| invalid("model", "gradient systems need a noise covariance proportional to the identity"))?;
    let s = cfg.step_size;
    if !(s > 0.0 && s < 1.0) {
        return Err(invalid("step_size", "must lie in (0, 1)"));
    }
    if cfg.thin == 0 {
        return Err(invalid("thin", "must be at least 1"));
    }
    if cfg.burn_in >= cfg.n_steps {
        return Err(Error::EmptyEnsemble("burn-in covers the whole chain".into()));
    }
    let sd: Vec<f64> = model.covariance_qinf().variances.iter().map(|v| v.sqrt()).collect();
    let rho = (1.0 - s * s).sqrt();
    let n = model.n_modes();
    let mut grid = vec![0.0; model.grid_size()];
    let mut x = vec![0.0; n];
    gaussian_draw(&sd, seed, 0, &mut x);
    let mut u = potential.value_with_grid(model, &x, &mut grid);
    let mut prop = vec![0.0; n];
    let mut xi = vec![0.0; n];
    let mut accepted = 0usize;
    let mut samples = Vec::with_capacity((cfg.n_steps - cfg.burn_in) / cfg.thin + 1);
    let chain = NoiseStream::new(seed, 1);
    for step in 0..cfg.n_steps {
        let stream = chain.at(step as u64);
        stream.fill_standard_normal(&mut xi);
        for k in 0..n {
            prop[k] = rho * x[k] + s * sd[k] * xi[k];
        }
        let u_prop = potential.value_with_grid(model, &prop, &mut grid);
        let log_alpha = -2.0 * (u_prop - u);
        let uniform: f64 = stream.rng_lane(1).random();
        if log_alpha >= 0.0 || uniform < log_alpha.exp() {
            std::mem::swap(&mut x, &mut prop);
            u = u_prop;
            accepted += 1;
        }
        let done = step + 1;
        if done > cfg.burn_in && (done - cfg.burn_in) % cfg.thin == 0 {
            samples.push(StateVector::from_vec_unchecked(x.clone()));
        }
    }
    let acceptance_rate = accepted as f64 / cfg.n_steps as f64;
    let warning = (!(0.05..=0.95).contains(&acceptance_rate)).then(|| {
        format!("pCN acceptance rate {acceptance_rate:.3} is outside [0.05, 0.95]; adjust step_size")
    });
    Ok(PcnRun {
        ensemble: MeasureEnsemble::uniform(samples, Provenance::Pcn)?,
        acceptance_rate,
        warning,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub test: String,
    pub value_lhs: f64,
    pub value_rhs: f64,
    pub stderr: f64,
    pub pass: bool,
}

impl IdentityReport {
    fn from_paired(ens: &MeasureEnsemble, test: String, lhs: &[f64], rhs: &[f64], allowance: f64) -> Self {
        let diff: Vec<f64> = lhs.iter().zip(rhs).map(|(a, b)| a - b).collect();
        let d = ens.mean_se(&diff);
        let value_lhs = ens.mean_se(lhs).mean;
        let value_rhs = ens.mean_se(rhs).mean;
        Self {
            test,
            value_lhs,
            value_rhs,
            stderr: d.se,
            pass: d.mean.abs() <= 3.0 * d.se + allowance,
        }
    }
}

fn check_phis(model: &SpectralModel, phis: &[CylFunc]) -> Result<()> {
    phis.iter().try_for_each(|p| p.check_model(model))
}

/// Per-sample Monte Carlo `P(t)φ(xᵢ)` for every observable: row `i` holds
/// the means over `n_paths` paths started at sample `i` under a seed derived
/// from `(seed, i)`.
#[allow(clippy::too_many_arguments)]
pub fn propagated_means(
    ensemble: &MeasureEnsemble,
    model: &SpectralModel,
    drift: &DriftSpec,
    cfg: &IntegratorConfig,
    phis: &[CylFunc],
    t: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    ensemble.check_model(model)?;
    check_phis(model, phis)?;
    if n_paths == 0 {
        return Err(invalid("n_paths", "need at least one path per sample"));
    }
    let (n_steps, dt) = cfg.steps_for(t)?;
    Stepper::new(model, drift, cfg.scheme, dt)?;
    ensemble
        .samples
        .par_iter()
        .enumerate()
        .map_init(
            || Stepper::new(model, drift, cfg.scheme, dt).expect("validated step"),
            |stepper, (i, x)| {
                if n_steps == 0 {
                    return Ok(phis.iter().map(|p| cyl_eval(p, x)).collect());
                }
                let sample_seed = derive_seed(seed, i as u64);
                let mut vals = vec![Vec::with_capacity(n_paths); phis.len()];
                for path in 0..n_paths as u64 {
                    let end = endpoint(stepper, x, n_steps, sample_seed, path)?;
                    for (v, p) in vals.iter_mut().zip(phis) {
                        v.push(cyl_eval(p, &end));
                    }
                }
                Ok(vals.iter().map(|v| pairwise_sum(v) / n_paths as f64).collect())
            },
        )
        .collect()
}

/// `∫P(t)φ dν` against `∫φ dν`, paired sample by sample.
#[allow(clippy::too_many_arguments)]
pub fn invariance_test(
    ensemble: &MeasureEnsemble,
    model: &SpectralModel,
    drift: &DriftSpec,
    cfg: &IntegratorConfig,
    phis: &[CylFunc],
    t: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<IdentityReport>> {
    let propagated = propagated_means(ensemble, model, drift, cfg, phis, t, n_paths, seed)?;
    Ok(phis
        .iter()
        .enumerate()
        .map(|(j, phi)| {
            let lhs: Vec<f64> = propagated.iter().map(|v| v[j]).collect();
            let rhs: Vec<f64> = ensemble.samples.iter().map(|x| cyl_eval(phi, x)).collect();
            IdentityReport::from_paired(ensemble, format!("invariance[{phi}]"), &lhs, &rhs, 0.0)
        })
        .collect())
}

fn drift_values(ensemble: &MeasureEnsemble, model: &SpectralModel, drift: &DriftSpec) -> Result<Vec<Option<Vec<f64>>>> {
    if drift.is_zero() {
        return Ok(vec![None; ensemble.len()]);
    }
    ensemble
        .samples
        .par_iter()
        .map(|x| crate::drift::drift_eval(model, drift, x).map(|f| Some(f.into_inner())))
        .collect()
}

/// `∫N₀φ dν = 0`, with `allowance` added to the `3·SE` acceptance band.
pub fn generator_mean_zero_test(
    ensemble: &MeasureEnsemble,
    model: &SpectralModel,
    drift: &DriftSpec,
    phis: &[CylFunc],
    allowance: f64,
) -> Result<Vec<IdentityReport>> {
    ensemble.check_model(model)?;
    check_phis(model, phis)?;
    let fs = drift_values(ensemble, model, drift)?;
    let zeros = vec![0.0; ensemble.len()];
    Ok(phis
        .iter()
        .map(|phi| {
            let n0: Vec<f64> = ensemble
                .samples
                .iter()
                .zip(&fs)
                .map(|(x, f)| n0_with_drift(model, phi, x, f.as_deref()))
                .collect();
            IdentityReport::from_paired(ensemble, format!("generator_mean_zero[{phi}]"), &n0, &zeros, allowance)
        })
        .collect())
}

/// `∫(N₀φ)φ dν = -½∫‖C^{1/2}∇φ‖² dν`, both sides on the same samples.
pub fn dirichlet_form_test(
    ensemble: &MeasureEnsemble,
    model: &SpectralModel,
    drift: &DriftSpec,
    phis: &[CylFunc],
) -> Result<Vec<IdentityReport>> {
    ensemble.check_model(model)?;
    check_phis(model, phis)?;
    let fs = drift_values(ensemble, model, drift)?;
    Ok(phis
        .iter()
        .map(|phi| {
            let (lhs, rhs): (Vec<f64>, Vec<f64>) = ensemble
                .samples
                .iter()
                .zip(&fs)
                .map(|(x, f)| {
                    (
                        n0_with_drift(model, phi, x, f.as_deref()) * cyl_eval(phi, x),
                        -0.5 * carre_du_champ(model, phi, x),
                    )
                })
                .unzip();
            IdentityReport::from_paired(ensemble, format!("dirichlet_form[{phi}]"), &lhs, &rhs, 0.0)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMoment {
    pub p: f64,
    pub estimate: f64,
    pub stderr: f64,
}

/// Weighted `E‖X‖^p` for each `p`.
pub fn moment_report(ensemble: &MeasureEnsemble, p_list: &[f64]) -> Result<Vec<EnsembleMoment>> {
    if p_list.iter().any(|p| !(1.0..=8.0).contains(p)) {
        return Err(invalid("p_list", "moments are supported for 1 <= p <= 8"));
    }
    let norms: Vec<f64> = ensemble.samples.iter().map(|x| norm(x)).collect();
    Ok(p_list
        .iter()
        .map(|&p| {
            let vals: Vec<f64> = norms.iter().map(|n| n.powf(p)).collect();
            let m = ensemble.mean_se(&vals);
            EnsembleMoment {
                p,
                estimate: m.mean,
                stderr: m.se,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EConcentration {
    pub sup_p95: f64,
    pub h1_p95: f64,
    /// Weighted share of samples whose norms are all finite.
    pub finite_fraction: f64,
}

pub fn e_concentration(ensemble: &MeasureEnsemble, model: &SpectralModel) -> Result<EConcentration> {
    ensemble.check_model(model)?;
    let norms: Vec<_> = ensemble
        .samples
        .par_iter()
        .map(|x| model.norms(x))
        .collect::<Result<_>>()?;
    let mut sup = Vec::new();
    let mut h1 = Vec::new();
    let mut w = Vec::new();
    for (n, wi) in norms.iter().zip(&ensemble.weights) {
        if n.l2.is_finite() && n.sup_grid.is_finite() && n.h1.is_finite() {
            sup.push(n.sup_grid);
            h1.push(n.h1);
            w.push(*wi);
        }
    }
    Ok(EConcentration {
        sup_p95: weighted_quantile(&sup, &w, 0.95),
        h1_p95: weighted_quantile(&h1, &w, 0.95),
        finite_fraction: pairwise_sum(&w) / pairwise_sum(&ensemble.weights),
    })
}
