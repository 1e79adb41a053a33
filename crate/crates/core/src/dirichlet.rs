//! Killed (Dirichlet) semigroups on open sets: hard killing at the first
//! monitored exit, and soft Feynman–Kac killing with a boundary-layer
//! potential `V_ε`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drift::DriftSpec;
use crate::engine::{IntegratorConfig, Stepper, DIVERGENCE_THRESHOLD};
use crate::error::{invalid, Error, Result};
use crate::invariant::MeasureEnsemble;
use crate::observables::{cyl_eval, CylFunc};
use crate::rng::{derive_seed, NoiseStream};
use crate::spectral::{norm, SpectralModel};
use crate::stats::{mean_se, pairwise_sum, weighted_quantile};

/// An open set in coefficient space. Vectors shorter than the state are
/// padded with zeros.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", deny_unknown_fields)]
pub enum DomainSpec {
    /// `{x : ‖x - center‖ < radius}`.
    Ball {
        radius: f64,
        #[serde(default)]
        center: Vec<f64>,
    },
    /// `{x : ⟨x, normal⟩ < offset}`.
    HalfSpace { normal: Vec<f64>, offset: f64 },
}

impl DomainSpec {
    pub fn ball(radius: f64, center: Vec<f64>) -> Result<Self> {
        let d = DomainSpec::Ball { radius, center };
        d.validate()?;
        Ok(d)
    }

    pub fn half_space(normal: Vec<f64>, offset: f64) -> Result<Self> {
        let d = DomainSpec::HalfSpace { normal, offset };
        d.validate()?;
        Ok(d)
    }

    /// Ball about the origin whose radius is the weighted `q`-quantile of
    /// `‖x‖` under `ensemble`.
    pub fn ball_at_quantile(ensemble: &MeasureEnsemble, q: f64) -> Result<Self> {
        let norms: Vec<f64> = ensemble.samples().iter().map(|x| norm(x)).collect();
        Self::ball(weighted_quantile(&norms, ensemble.weights(), q), Vec::new())
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DomainSpec::Ball { radius, center } => {
                if !(radius.is_finite() && *radius > 0.0) {
                    return Err(invalid("radius", "must be positive"));
                }
                if center.iter().any(|c| !c.is_finite()) {
                    return Err(invalid("center", "must be finite"));
                }
            }
            DomainSpec::HalfSpace { normal, offset } => {
                if !offset.is_finite() || normal.iter().any(|c| !c.is_finite()) {
                    return Err(invalid("half_space", "must be finite"));
                }
                if norm(normal) == 0.0 {
                    return Err(invalid("normal", "must be nonzero"));
                }
            }
        }
        Ok(())
    }

    pub fn check_model(&self, model: &SpectralModel) -> Result<()> {
        self.validate()?;
        let len = match self {
            DomainSpec::Ball { center, .. } => center.len(),
            DomainSpec::HalfSpace { normal, .. } => normal.len(),
        };
        if len > model.n_modes() {
            return Err(Error::SizeMismatch {
                what: "domain vector",
                expected: model.n_modes(),
                got: len,
            });
        }
        Ok(())
    }

    /// Distance to the boundary, positive inside and nonpositive outside.
    fn signed_distance(&self, x: &[f64]) -> f64 {
        match self {
            DomainSpec::Ball { radius, center } => {
                let ss: f64 = x
                    .iter()
                    .enumerate()
                    .map(|(k, v)| (v - center.get(k).copied().unwrap_or(0.0)).powi(2))
                    .sum();
                radius - ss.sqrt()
            }
            DomainSpec::HalfSpace { normal, offset } => {
                let proj: f64 = normal.iter().zip(x).map(|(h, v)| h * v).sum();
                (offset - proj) / norm(normal)
            }
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.signed_distance(x) > 0.0
    }

    /// `d(x, Oᶜ)` in the coefficient norm.
    pub fn distance_to_complement(&self, x: &[f64]) -> f64 {
        self.signed_distance(x).max(0.0)
    }

    /// `V_ε(x) = min(d(x, O_ε)/ε, 1)` with `O_ε = {d(·, Oᶜ) > ε}`.
    pub fn v_eps(&self, eps: f64, x: &[f64]) -> f64 {
        ((eps - self.signed_distance(x)).max(0.0) / eps).min(1.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Monitoring {
    #[default]
    GridExit,
    FeynmanKac,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KillingConfig {
    pub epsilon: f64,
    #[serde(default)]
    pub monitoring: Monitoring,
}

impl KillingConfig {
    pub fn validate(&self, domain: &DomainSpec) -> Result<()> {
        check_eps(domain, self.epsilon)
    }
}

fn check_eps(domain: &DomainSpec, eps: f64) -> Result<()> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(invalid("epsilon", "must be positive"));
    }
    if let DomainSpec::Ball { radius, .. } = domain {
        if eps >= *radius {
            return Err(invalid("epsilon", "must be smaller than the ball radius"));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KilledEstimate {
    pub value: f64,
    pub stderr: f64,
    pub survival_fraction: f64,
    pub n_paths: usize,
}

/// One path's contribution: the exit-killed value and, per `ε`, the
/// Feynman–Kac weight and weighted value.
struct PathOutcome {
    survived: bool,
    phi_end: f64,
    fk_weights: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn walk(
    stepper: &mut Stepper,
    domain: &DomainSpec,
    eps_list: &[f64],
    phi: &CylFunc,
    x0: &[f64],
    n_steps: u64,
    seed: u64,
    path_id: u64,
) -> Result<PathOutcome> {
    let dt = stepper.dt();
    let base = NoiseStream::new(seed, path_id);
    let mut x = x0.to_vec();
    let mut survived = true;
    let mut log_w = vec![0.0; eps_list.len()];
    for i in 0..n_steps {
        // Left-endpoint quadrature of ∫V_ε ds.
        if !eps_list.is_empty() {
            let s = domain.signed_distance(&x);
            for (lw, eps) in log_w.iter_mut().zip(eps_list) {
                *lw -= dt * ((eps - s).max(0.0) / eps).min(1.0) / eps;
            }
        }
        let ss = stepper.advance(&mut x, base.at(i));
        if !(ss <= DIVERGENCE_THRESHOLD * DIVERGENCE_THRESHOLD) {
            return Err(Error::Divergence {
                path_id,
                step: i + 1,
                norm: ss.sqrt(),
            });
        }
        if survived && !domain.contains(&x) {
            survived = false;
            if eps_list.is_empty() {
                break;
            }
        }
    }
    Ok(PathOutcome {
        survived,
        phi_end: cyl_eval(phi, &x),
        fk_weights: log_w.into_iter().map(f64::exp).collect(),
    })
}

#[allow(clippy::too_many_arguments)]
fn walk_all(
    model: &SpectralModel,
    drift: &DriftSpec,
    cfg: &IntegratorConfig,
    domain: &DomainSpec,
    eps_list: &[f64],
    phi: &CylFunc,
    x: &[f64],
    t: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<PathOutcome>> {
    cfg.validate()?;
    model.check_state(x)?;
    domain.check_model(model)?;
    phi.check_model(model)?;
    for eps in eps_list {
        check_eps(domain, *eps)?;
    }
    if !domain.contains(x) {
        return Err(invalid("x", "the starting point must lie in the open set"));
    }
    if n_paths < 2 {
        return Err(invalid("n_paths", "need at least two paths"));
    }
    let (n_steps, dt) = cfg.steps_for(t)?;
    Stepper::new(model, drift, cfg.scheme, dt)?;
    (0..n_paths as u64)
        .into_par_iter()
        .map_init(
            || Stepper::new(model, drift, cfg.scheme, dt).expect("validated step"),
            |stepper, path| walk(stepper, domain, eps_list, phi, x, n_steps, seed, path),
        )
        .collect()
}

fn exit_values(outcomes: &[PathOutcome]) -> Vec<f64> {
    outcomes
        .iter()
        .map(|o| if o.survived { o.phi_end } else { 0.0 })
        .collect()
}

/// `E[φ(X(t,x)) 1{τ > t}]` with exits detected at the time steps.
#[allow(clippy::too_many_arguments)]
pub fn killed_exit(
    model: &SpectralModel,
    drift: &DriftSpec,
    cfg: &IntegratorConfig,
    domain: &DomainSpec,
    phi: &CylFunc,
    x: &[f64],
    t: f64,
    n_paths: usize,
    seed: u64,
) -> Result<KilledEstimate> {
    let outcomes = walk_all(model, drift, cfg, domain, &[], phi, x, t, n_paths, seed)?;
    let m = mean_se(&exit_values(&outcomes));
    let alive = outcomes.iter().filter(|o| o.survived).count();
    Ok(KilledEstimate {
        value: m.mean,
        stderr: m.se,
        survival_fraction: alive as f64 / n_paths as f64,
        n_paths,
    })
}

/// `E[φ(X(t,x)) exp(-(1/ε)∫₀ᵗ V_ε(X(s)) ds)]`.
#[allow(clippy::too_many_arguments)]
pub fn killed_fk(
    model: &SpectralModel,
    drift: &DriftSpec,
    cfg: &IntegratorConfig,
    domain: &DomainSpec,
    eps: f64,
    phi: &CylFunc,
    x: &[f64],
    t: f64,
    n_paths: usize,
    seed: u64,
) -> Result<KilledEstimate> {
    let outcomes = walk_all(model, drift, cfg, domain, &[eps], phi, x, t, n_paths, seed)?;
    let vals: Vec<f64> = outcomes.iter().map(|o| o.fk_weights[0] * o.phi_end).collect();
    let w: Vec<f64> = outcomes.iter().map(|o| o.fk_weights[0]).collect();
    let m = mean_se(&vals);
    Ok(KilledEstimate {
        value: m.mean,
        stderr: m.se,
        survival_fraction: pairwise_sum(&w) / n_paths as f64,
        n_paths,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FkScanRow {
    pub eps: f64,
    pub value: f64,
    pub stderr: f64,
    /// Feynman–Kac value minus the exit-killed value on the same paths.
    pub gap: f64,
    pub gap_se: f64,
}

/// Feynman–Kac estimates along a decreasing `ε` ladder, all on the same
/// paths as the exit-killed reference.
#[allow(clippy::too_many_arguments)]
pub fn fk_convergence_scan(
    model: &SpectralModel,
    drift: &DriftSpec,
    cfg: &IntegratorConfig,
    domain: &DomainSpec,
    phi: &CylFunc,
    x: &[f64],
    t: f64,
    eps_list: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<Vec<FkScanRow>> {
    if eps_list.is_empty() {
        return Err(invalid("eps_list", "must not be empty"));
    }
    if eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(invalid("eps_list", "must be strictly decreasing"));
    }
    let outcomes = walk_all(model, drift, cfg, domain, eps_list, phi, x, t, n_paths, seed)?;
    let exit = exit_values(&outcomes);
    Ok(eps_list
        .iter()
        .enumerate()
        .map(|(j, &eps)| {
            let fk: Vec<f64> = outcomes.iter().map(|o| o.fk_weights[j] * o.phi_end).collect();
            let diff: Vec<f64> = fk.iter().zip(&exit).map(|(a, b)| a - b).collect();
            let m = mean_se(&fk);
            let d = mean_se(&diff);
            FkScanRow {
                eps,
                value: m.mean,
                stderr: m.se,
                gap: d.mean,
                gap_se: d.se,
            }
        })
        .collect())
}

/// `|gap|` never grows along the ladder by more than `k_se` combined
/// standard errors.
pub fn gaps_shrink(rows: &[FkScanRow], k_se: f64) -> bool {
    rows.windows(2)
        .all(|w| w[1].gap.abs() <= w[0].gap.abs() + k_se * w[0].gap_se.hypot(w[1].gap_se))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubinvarianceReport {
    pub test: String,
    pub lhs: f64,
    pub rhs: f64,
    pub stderr: f64,
    pub pass: bool,
}

/// `∫_O (P^O(t)φ)² dν ≤ ∫_O φ² dν`. For each sample in `O` the square is
/// estimated without bias as the product of the exit-killed means over two
/// disjoint halves of `n_paths` paths.
#[allow(clippy::too_many_arguments)]
pub fn subinvariance_test(
    ensemble: &MeasureEnsemble,
    model: &SpectralModel,
    drift: &DriftSpec,
    cfg: &IntegratorConfig,
    domain: &DomainSpec,
    phi: &CylFunc,
    t: f64,
    n_paths: usize,
    seed: u64,
) -> Result<SubinvarianceReport> {
    cfg.validate()?;
    domain.check_model(model)?;
    phi.check_model(model)?;
    if n_paths < 2 {
        return Err(invalid("n_paths", "need at least two paths per sample"));
    }
    let (n_steps, dt) = cfg.steps_for(t)?;
    Stepper::new(model, drift, cfg.scheme, dt)?;
    let half = n_paths / 2;
    let pairs: Vec<(f64, f64)> = ensemble
        .samples()
        .par_iter()
        .enumerate()
        .map_init(
            || Stepper::new(model, drift, cfg.scheme, dt).expect("validated step"),
            |stepper, (i, x)| {
                if !domain.contains(x) {
                    return Ok((0.0, 0.0));
                }
                let rhs = cyl_eval(phi, x).powi(2);
                if n_steps == 0 {
                    return Ok((rhs, rhs));
                }
                let sample_seed = derive_seed(seed, i as u64);
                let mut halves = [Vec::with_capacity(half), Vec::with_capacity(half)];
                for path in 0..2 * half as u64 {
                    let o = walk(stepper, domain, &[], phi, x, n_steps, sample_seed, path)?;
                    halves[(path % 2) as usize].push(if o.survived { o.phi_end } else { 0.0 });
                }
                let a = pairwise_sum(&halves[0]) / half as f64;
                let b = pairwise_sum(&halves[1]) / half as f64;
                Ok((a * b, rhs))
            },
        )
        .collect::<Result<_>>()?;
    let (lhs, rhs): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let diff: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
    let d = ensemble.mean_se(&diff);
    Ok(SubinvarianceReport {
        test: format!("subinvariance[{phi}]"),
        lhs: ensemble.mean_se(&lhs).mean,
        rhs: ensemble.mean_se(&rhs).mean,
        stderr: d.se,
        pass: d.mean <= 3.0 * d.se,
    })
}
