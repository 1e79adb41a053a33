//! Time stepping of the mild formulation.
//!
//! The linear part is integrated exactly and the stochastic convolution over
//! one step is drawn from its exact Gaussian law `N(0, Q_dt)`; only the drift
//! is approximated. Noise for step `n` of path `p` comes from the stream
//! `(master_seed, p, n)`, which makes coupled and replayed paths share their
//! increments exactly.

use std::ops::ControlFlow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drift::DriftSpec;
use crate::error::{invalid, Error, Result};
use crate::rng::NoiseStream;
use crate::spectral::{norm, Norms, SpectralModel, StateVector};
use crate::stats::{mean_se, ols_slope};

/// Any state whose L² norm exceeds this aborts the path.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    #[default]
    ExponentialEuler,
    SemiImplicit,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub t_final: f64,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default = "one")]
    pub record_every: usize,
}

fn one() -> usize {
    1
}

impl IntegratorConfig {
    pub fn new(dt: f64, t_final: f64) -> Result<Self> {
        let cfg = Self {
            dt,
            t_final,
            scheme: Scheme::ExponentialEuler,
            record_every: 1,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_record_every(mut self, record_every: usize) -> Self {
        self.record_every = record_every;
        self
    }

    pub fn with_t_final(mut self, t_final: f64) -> Self {
        self.t_final = t_final;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(invalid("dt", "time step must be positive"));
        }
        if !(self.t_final.is_finite() && self.t_final >= 0.0) {
            return Err(invalid("t_final", "must be finite and nonnegative"));
        }
        if self.t_final > 0.0 && self.dt > self.t_final * (1.0 + 1e-12) {
            return Err(invalid("dt", "time step exceeds t_final"));
        }
        if self.record_every == 0 {
            return Err(invalid("record_every", "must be at least 1"));
        }
        Ok(())
    }

    /// Number of steps needed to reach `t` and the uniform step that lands on
    /// it exactly (never larger than `dt`).
    pub fn steps_for(&self, t: f64) -> Result<(u64, f64)> {
        if !(t.is_finite() && t >= 0.0) {
            return Err(invalid("t", "must be finite and nonnegative"));
        }
        if t == 0.0 {
            return Ok((0, self.dt));
        }
        let n = (t / self.dt - 1e-9).ceil().max(1.0) as u64;
        Ok((n, t / n as f64))
    }

    /// Slot count for `t`, which must be a multiple of `dt`.
    pub(crate) fn exact_steps(&self, t: f64) -> Result<u64> {
        let n = (t / self.dt).round();
        if (n * self.dt - t).abs() > 1e-9 * t.max(self.dt) {
            return Err(invalid("t", format!("{t} is not a multiple of dt = {}", self.dt)));
        }
        Ok(n as u64)
    }
}

/// Precomputed per-mode factors for a fixed step size.
#[derive(Clone, Debug)]
pub struct Stepper<'a> {
    model: &'a SpectralModel,
    drift: &'a DriftSpec,
    scheme: Scheme,
    dt: f64,
    decay: Vec<f64>,
    drift_factor: Vec<f64>,
    noise_sd: Vec<f64>,
    has_noise: bool,
    f: Vec<f64>,
    z: Vec<f64>,
    grid: Vec<f64>,
}

/// `φ₁(z)·dt` with `φ₁(z) = (e^z - 1)/z`, written as `expm1(a dt)/a`.
fn phi1_dt(a: f64, dt: f64) -> f64 {
    let z = a * dt;
    if z == 0.0 {
        dt
    } else {
        z.exp_m1() / a
    }
}

impl<'a> Stepper<'a> {
    pub fn new(model: &'a SpectralModel, drift: &'a DriftSpec, scheme: Scheme, dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(invalid("dt", "time step must be positive"));
        }
        let a = model.eigenvalues();
        let (decay, drift_factor) = match scheme {
            Scheme::ExponentialEuler => (
                a.iter().map(|ak| (ak * dt).exp()).collect(),
                a.iter().map(|ak| phi1_dt(*ak, dt)).collect(),
            ),
            Scheme::SemiImplicit => {
                let inv: Vec<f64> = a.iter().map(|ak| 1.0 / (1.0 - dt * ak)).collect();
                (inv.clone(), inv.iter().map(|i| i * dt).collect())
            }
        };
        let noise_sd: Vec<f64> = model
            .covariance_qt(dt)?
            .variances
            .into_iter()
            .map(f64::sqrt)
            .collect();
        let n = model.n_modes();
        Ok(Self {
            model,
            drift,
            scheme,
            dt,
            decay,
            drift_factor,
            has_noise: noise_sd.iter().any(|s| *s > 0.0),
            noise_sd,
            f: vec![0.0; n],
            z: vec![0.0; n],
            grid: Vec::with_capacity(model.grid_size()),
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Advances `x` by one step using the increment of `stream`. Returns the
    /// squared L² norm of the new state.
    pub fn advance(&mut self, x: &mut [f64], stream: NoiseStream) -> f64 {
        if self.drift.is_zero() {
            self.f.iter_mut().for_each(|v| *v = 0.0);
        } else {
            self.drift.eval_into(self.model, x, &mut self.f, &mut self.grid);
        }
        if self.has_noise {
            stream.fill_standard_normal(&mut self.z);
        }
        let mut ss = 0.0;
        for k in 0..x.len() {
            let mut v = self.decay[k] * x[k] + self.drift_factor[k] * self.f[k];
            if self.has_noise {
                v += self.noise_sd[k] * self.z[k];
            }
            x[k] = v;
            ss += v * v;
        }
        ss
    }

    /// Runs `n_steps` steps using stream slots `first_slot..first_slot+n_steps`.
    /// `observe` sees the number of completed steps and the state after each
    /// step and may stop the path early.
    pub(crate) fn run<F>(
        &mut self,
        x: &mut [f64],
        master_seed: u64,
        path_id: u64,
        first_slot: u64,
        n_steps: u64,
        mut observe: F,
    ) -> Result<()>
    where
        F: FnMut(u64, &[f64]) -> ControlFlow<()>,
    {
        let base = NoiseStream::new(master_seed, path_id);
        for i in 0..n_steps {
            let ss = self.advance(x, base.at(first_slot + i));
            if !(ss <= DIVERGENCE_THRESHOLD * DIVERGENCE_THRESHOLD) {
                return Err(Error::Divergence {
                    path_id,
                    step: i + 1,
                    norm: ss.sqrt(),
                });
            }
            if observe(i + 1, x).is_break() {
                break;
            }
        }
        Ok(())
    }
}

/// Exact one-step stochastic convolution increment, `N(0, Q_dt)`.
pub fn ou_increment(model: &SpectralModel, dt: f64, stream: NoiseStream) -> Result<StateVector> {
    let q = model.covariance_qt(dt)?;
    let mut z = vec![0.0; model.n_modes()];
    stream.fill_standard_normal(&mut z);
    Ok(StateVector::from_vec_unchecked(
        q.variances.iter().zip(&z).map(|(v, zk)| v.sqrt() * zk).collect(),
    ))
}

/// One step of the configured scheme from `x`.
pub fn step(
    model: &SpectralModel,
    drift: &DriftSpec,
    cfg: &IntegratorConfig,
    x: &[f64],
    stream: NoiseStream,
) -> Result<StateVector> {
    cfg.validate()?;
    model.check_state(x)?;
    let mut stepper = Stepper::new(model, drift, cfg.scheme, cfg.dt)?;
    let mut y = x.to_vec();
    let ss = stepper.advance(&mut y, stream);
    if !(ss <= DIVERGENCE_THRESHOLD * DIVERGENCE_THRESHOLD) {
        return Err(Error::Divergence {
            path_id: stream.path_id,
            step: stream.step_counter,
            norm: ss.sqrt(),
        });
    }
    Ok(StateVector::from_vec_unchecked(y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
    pub norms_trace: Vec<Norms>,
}

/// Simulates one path to `cfg.t_final`, recording every `record_every` steps
/// (and the final state).
pub fn simulate_path(
    model: &SpectralModel,
    drift: &DriftSpec,
    cfg: &IntegratorConfig,
    x0: &[f64],
    master_seed: u64,
    path_id: u64,
) -> Result<Trajectory> {
    cfg.validate()?;
    model.check_state(x0)?;
    let (n_steps, dt) = cfg.steps_for(cfg.t_final)?;
    let mut stepper = Stepper::new(model, drift, cfg.scheme, dt)?;
    let mut x = x0.to_vec();
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![StateVector::from_vec_unchecked(x.clone())],
        norms_trace: vec![model.norms(&x)?],
    };
    let record_every = cfg.record_every as u64;
    let mut grid = vec![0.0; model.grid_size()];
    stepper.run(&mut x, master_seed, path_id, 0, n_steps, |i, state| {
        if i % record_every == 0 || i == n_steps {
            model.synthesize_into(state, &mut grid);
            traj.times.push(i as f64 * dt);
            traj.states.push(StateVector::from_vec_unchecked(state.to_vec()));
            traj.norms_trace.push(model.norms_with_grid(state, &grid));
        }
        ControlFlow::Continue(())
    })?;
    Ok(traj)
}

/// Endpoint of one path after `n_steps` steps of size `stepper.dt()`.
pub(crate) fn endpoint(
    stepper: &mut Stepper,
    x0: &[f64],
    n_steps: u64,
    master_seed: u64,
    path_id: u64,
) -> Result<Vec<f64>> {
    let mut x = x0.to_vec();
    stepper.run(&mut x, master_seed, path_id, 0, n_steps, |_, _| ControlFlow::Continue(()))?;
    Ok(x)
}

/// Endpoints `X(t, x0)` of paths `0..n_paths` under master seed `seed`, in
/// path order. A path fails only by divergence.
pub(crate) fn par_endpoints(
    model: &SpectralModel,
    drift: &DriftSpec,
    cfg: &IntegratorConfig,
    x0: &[f64],
    t: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<Result<Vec<f64>>>> {
    let (n_steps, dt) = cfg.steps_for(t)?;
    Stepper::new(model, drift, cfg.scheme, dt)?;
    Ok((0..n_paths as u64)
        .into_par_iter()
        .map_init(
            || Stepper::new(model, drift, cfg.scheme, dt).expect("validated step"),
            |stepper, path| endpoint(stepper, x0, n_steps, seed, path),
        )
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupledPairResult {
    pub times: Vec<f64>,
    pub separation: Vec<f64>,
    /// `η = ζ + ½`.
    pub rate_bound: f64,
    /// Smallest `η` with `separation(t) ≤ e^{ηt}‖x0-y0‖` at every recorded
    /// `t > 0`; `None` when the initial data coincide.
    pub empirical_rate: Option<f64>,
}

impl CoupledPairResult {
    /// Whether `separation(t) ≤ e^{ηt}‖x0-y0‖·(1+tol)` at every recorded time.
    pub fn within_bound(&self, tol: f64) -> bool {
        let s0 = self.separation[0];
        self.times
            .iter()
            .zip(&self.separation)
            .all(|(t, s)| *s <= (self.rate_bound * t).exp() * s0 * (1.0 + tol))
    }
}

/// Two paths from `x0` and `y0` driven by identical increments.
pub fn simulate_coupled(
    model: &SpectralModel,
    drift: &DriftSpec,
    cfg: &IntegratorConfig,
    x0: &[f64],
    y0: &[f64],
    master_seed: u64,
    path_id: u64,
) -> Result<CoupledPairResult> {
    cfg.validate()?;
    model.check_state(x0)?;
    model.check_state(y0)?;
    let (n_steps, dt) = cfg.steps_for(cfg.t_final)?;
    let mut stepper = Stepper::new(model, drift, cfg.scheme, dt)?;
    let mut x = x0.to_vec();
    let mut y = y0.to_vec();
    let sep = |x: &[f64], y: &[f64]| norm(&x.iter().zip(y).map(|(a, b)| a - b).collect::<Vec<_>>());
    let mut times = vec![0.0];
    let mut separation = vec![sep(&x, &y)];
    let base = NoiseStream::new(master_seed, path_id);
    let limit = DIVERGENCE_THRESHOLD * DIVERGENCE_THRESHOLD;
    for i in 0..n_steps {
        let stream = base.at(i);
        let sx = stepper.advance(&mut x, stream);
        let sy = stepper.advance(&mut y, stream);
        if !(sx <= limit && sy <= limit) {
            return Err(Error::Divergence {
                path_id,
                step: i + 1,
                norm: sx.max(sy).sqrt(),
            });
        }
        let done = i + 1;
        if done % cfg.record_every as u64 == 0 || done == n_steps {
            times.push(done as f64 * dt);
            separation.push(sep(&x, &y));
        }
    }
    let s0 = separation[0];
    let empirical_rate = (s0 > 0.0 && times.len() > 1).then(|| {
        times
            .iter()
            .zip(&separation)
            .skip(1)
            .map(|(t, s)| (s / s0).ln() / t)
            .fold(f64::NEG_INFINITY, f64::max)
    });
    Ok(CoupledPairResult {
        times,
        separation,
        rate_bound: drift.zeta() + 0.5,
        empirical_rate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub p: f64,
    pub t: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub n_paths: usize,
}

/// Monte Carlo `E‖X(t,x0)‖^p` on a grid of `p` and `t`. Rows are ordered by
/// `p` then `t`.
#[allow(clippy::too_many_arguments)]
pub fn moment_scan(
    model: &SpectralModel,
    drift: &DriftSpec,
    cfg: &IntegratorConfig,
    x0: &[f64],
    p_list: &[f64],
    t_list: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<Vec<MomentRow>> {
    cfg.validate()?;
    model.check_state(x0)?;
    if p_list.iter().any(|p| !(1.0..=8.0).contains(p)) {
        return Err(invalid("p_list", "moments are supported for 1 <= p <= 8"));
    }
    if n_paths < 100 {
        return Err(invalid("n_paths", "moment scans need at least 100 paths"));
    }
    let slots: Vec<u64> = t_list.iter().map(|t| cfg.exact_steps(*t)).collect::<Result<_>>()?;
    let max_slot = slots.iter().copied().max().unwrap_or(0);
    let norms: Vec<Vec<f64>> = (0..n_paths as u64)
        .into_par_iter()
        .map_init(
            || Stepper::new(model, drift, cfg.scheme, cfg.dt),
            |stepper, path| {
                let stepper = stepper.as_mut().map_err(|e| invalid("dt", e.to_string()))?;
                let mut x = x0.to_vec();
                let mut out = vec![0.0; slots.len()];
                for (o, s) in out.iter_mut().zip(&slots) {
                    if *s == 0 {
                        *o = norm(x0);
                    }
                }
                stepper.run(&mut x, seed, path, 0, max_slot, |i, state| {
                    for (o, s) in out.iter_mut().zip(&slots) {
                        if *s == i {
                            *o = norm(state);
                        }
                    }
                    ControlFlow::Continue(())
                })?;
                Ok(out)
            },
        )
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(p_list.len() * t_list.len());
    for &p in p_list {
        for (ti, &t) in t_list.iter().enumerate() {
            let vals: Vec<f64> = norms.iter().map(|n| n[ti].powf(p)).collect();
            let m = mean_se(&vals);
            rows.push(MomentRow {
                p,
                t,
                estimate: m.mean,
                stderr: m.se,
                n_paths,
            });
        }
    }
    Ok(rows)
}

/// For every `p`, no estimate exceeds an earlier-time estimate by more than
/// `k_se` combined standard errors. Rows must be ordered by `t` within `p`.
pub fn no_upward_trend(rows: &[MomentRow], k_se: f64) -> bool {
    rows.iter().enumerate().all(|(i, a)| {
        rows[i + 1..]
            .iter()
            .filter(|b| b.p == a.p && b.t > a.t)
            .all(|b| b.estimate - a.estimate <= k_se * (a.stderr.hypot(b.stderr)))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoSidedRow {
    pub s: f64,
    pub h: f64,
    /// `E‖X(0,-s,x) - X(0,-h,x)‖²`.
    pub mean_sq_diff: f64,
    pub stderr: f64,
    pub n_paths: usize,
}

/// Solutions started at `-s` and `-h` and driven by one noise realization on
/// `[-s_max, 0]`; the later start replays the suffix of the earlier one.
#[allow(clippy::too_many_arguments)]
pub fn two_sided_decay(
    model: &SpectralModel,
    drift: &DriftSpec,
    cfg: &IntegratorConfig,
    x0: &[f64],
    s_pairs: &[(f64, f64)],
    n_paths: usize,
    seed: u64,
) -> Result<Vec<TwoSidedRow>> {
    cfg.validate()?;
    model.check_state(x0)?;
    if n_paths < 2 {
        return Err(invalid("n_paths", "need at least two paths"));
    }
    let mut slot_pairs = Vec::with_capacity(s_pairs.len());
    for &(s, h) in s_pairs {
        if !(s >= h && h >= 0.0) {
            return Err(invalid("s_pairs", format!("need s >= h >= 0, got ({s}, {h})")));
        }
        slot_pairs.push((cfg.exact_steps(s)?, cfg.exact_steps(h)?));
    }
    let total = slot_pairs.iter().map(|p| p.0).max().unwrap_or(0);
    let per_path: Vec<Vec<f64>> = (0..n_paths as u64)
        .into_par_iter()
        .map_init(
            || Stepper::new(model, drift, cfg.scheme, cfg.dt),
            |stepper, path| {
                let stepper = stepper.as_mut().map_err(|e| invalid("dt", e.to_string()))?;
                let mut out = Vec::with_capacity(slot_pairs.len());
                for &(s_slots, h_slots) in &slot_pairs {
                    // Slot j covers [-total·dt + j·dt, -total·dt + (j+1)·dt].
                    let start_s = total - s_slots;
                    let start_h = total - h_slots;
                    let mut early = x0.to_vec();
                    stepper.run(&mut early, seed, path, start_s, start_h - start_s, |_, _| {
                        ControlFlow::Continue(())
                    })?;
                    let mut late = x0.to_vec();
                    stepper.run(&mut early, seed, path, start_h, h_slots, |_, _| ControlFlow::Continue(()))?;
                    stepper.run(&mut late, seed, path, start_h, h_slots, |_, _| ControlFlow::Continue(()))?;
                    let d: f64 = early.iter().zip(&late).map(|(a, b)| (a - b).powi(2)).sum();
                    out.push(d);
                }
                Ok(out)
            },
        )
        .collect::<Result<_>>()?;
    Ok(s_pairs
        .iter()
        .enumerate()
        .map(|(i, &(s, h))| {
            let vals: Vec<f64> = per_path.iter().map(|v| v[i]).collect();
            let m = mean_se(&vals);
            TwoSidedRow {
                s,
                h,
                mean_sq_diff: m.mean,
                stderr: m.se,
                n_paths,
            }
        })
        .collect())
}

/// Least-squares slope of `ln E‖·‖²` against `h` over rows with a positive
/// mean; negative means exponential decay.
pub fn two_sided_decay_rate(rows: &[TwoSidedRow]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.mean_sq_diff > 0.0)
        .map(|r| (r.h, r.mean_sq_diff.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let (h, l): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    Some(ols_slope(&h, &l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::ModelSpec;

    fn ou1() -> SpectralModel {
        SpectralModel::custom(vec![-1.0], vec![2.0], 2).unwrap()
    }

    fn heat(n: usize, noise: f64) -> SpectralModel {
        SpectralModel::build(&ModelSpec::HeatDirichlet { noise_scale: noise }, n, 3 * n).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(IntegratorConfig::new(0.0, 1.0).is_err());
        assert!(IntegratorConfig::new(2.0, 1.0).is_err());
        assert!(IntegratorConfig::new(1e-3, 0.0).is_ok());
        let cfg = IntegratorConfig::new(0.3, 1.0).unwrap();
        let (n, dt) = cfg.steps_for(1.0).unwrap();
        assert_eq!(n, 4);
        assert!((dt - 0.25).abs() < 1e-15);
        assert_eq!(cfg.steps_for(0.0).unwrap().0, 0);
        assert!(cfg.exact_steps(0.5).is_err());
        assert_eq!(cfg.exact_steps(0.9).unwrap(), 3);
    }

    #[test]
    fn phi1_limits() {
        assert_eq!(phi1_dt(0.0, 0.1), 0.1);
        assert!((phi1_dt(-1e-12, 0.1) - 0.1).abs() < 1e-13);
        assert!((phi1_dt(-2.0, 0.5) - (1.0 - (-1f64).exp()) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn increment_is_deterministic_and_vanishes_with_dt() {
        let m = heat(4, 1.0);
        let s = NoiseStream::new(1, 2).at(3);
        assert_eq!(ou_increment(&m, 0.01, s).unwrap(), ou_increment(&m, 0.01, s).unwrap());
        let tiny = ou_increment(&m, 1e-14, s).unwrap();
        assert!(tiny.norm() < 1e-6);
    }

    #[test]
    fn increment_variance_matches_qt() {
        let m = ou1();
        let n = 100_000u64;
        let draws: Vec<f64> = (0..n)
            .map(|i| ou_increment(&m, 1.0, NoiseStream::new(8, i)).unwrap()[0].powi(2))
            .collect();
        let est = mean_se(&draws);
        let exact = 1.0 - (-2f64).exp();
        assert!((est.mean - exact).abs() <= 3.0 * est.se, "{} vs {exact}", est.mean);
    }

    #[test]
    fn noiseless_zero_drift_step_is_the_semigroup() {
        let m = heat(4, 0.0);
        let d = DriftSpec::zero(&m);
        let cfg = IntegratorConfig::new(0.01, 1.0).unwrap();
        let x = [1.0, -0.5, 0.25, 2.0];
        let y = step(&m, &d, &cfg, &x, NoiseStream::new(0, 0)).unwrap();
        assert_eq!(y, m.semigroup_apply(0.01, &x).unwrap());
    }

    #[test]
    fn zero_drift_increment_is_additive() {
        let m = heat(4, 1.0);
        let d = DriftSpec::zero(&m);
        let cfg = IntegratorConfig::new(0.01, 1.0).unwrap();
        let x = [1.0, -0.5, 0.25, 2.0];
        let s = NoiseStream::new(4, 1).at(7);
        let y = step(&m, &d, &cfg, &x, s).unwrap();
        let lin = m.semigroup_apply(0.01, &x).unwrap();
        let inc = ou_increment(&m, 0.01, s).unwrap();
        for k in 0..4 {
            assert!((y[k] - lin[k] - inc[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_drift_exponential_euler_is_second_order_locally() {
        let m = SpectralModel::custom(vec![-1.0], vec![0.0], 2).unwrap();
        let zeta2 = 0.4;
        let d = DriftSpec::linear(&m, zeta2).unwrap();
        let mut errs = Vec::new();
        for dt in [0.1, 0.05, 0.025] {
            let cfg = IntegratorConfig::new(dt, dt).unwrap();
            let y = step(&m, &d, &cfg, &[1.0], NoiseStream::new(0, 0)).unwrap()[0];
            errs.push((y - ((-1.0 + zeta2) * dt).exp()).abs());
        }
        // Local error O(dt²): halving dt divides it by about 4.
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn semi_implicit_step_formula() {
        let m = SpectralModel::custom(vec![-2.0], vec![0.0], 2).unwrap();
        let d = DriftSpec::linear(&m, 0.5).unwrap();
        let cfg = IntegratorConfig::new(0.1, 1.0).unwrap().with_scheme(Scheme::SemiImplicit);
        let y = step(&m, &d, &cfg, &[1.0], NoiseStream::new(0, 0)).unwrap()[0];
        assert!((y - (1.0 + 0.1 * 0.5) / (1.0 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn trajectory_shapes_and_determinism() {
        let m = heat(4, 1.0);
        let d = DriftSpec::nemytskii(&m, vec![0.0, 0.0, 0.0, 1.0], 0.0).unwrap();
        let x0 = [0.5, 0.0, -0.2, 0.1];
        let cfg0 = IntegratorConfig::new(1e-3, 0.0).unwrap();
        let t0 = simulate_path(&m, &d, &cfg0, &x0, 0, 0).unwrap();
        assert_eq!(t0.times, vec![0.0]);
        assert_eq!(t0.states[0].to_vec(), x0.to_vec());

        let cfg = IntegratorConfig::new(1e-3, 0.1).unwrap().with_record_every(10);
        let a = simulate_path(&m, &d, &cfg, &x0, 3, 9).unwrap();
        let b = simulate_path(&m, &d, &cfg, &x0, 3, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.times.len(), 11);
        assert!(a.times.windows(2).all(|w| w[1] > w[0]));
        let c = simulate_path(&m, &d, &cfg, &x0, 3, 10).unwrap();
        assert_ne!(a.states.last(), c.states.last());
    }

    #[test]
    fn noiseless_heat_decays_mode_wise() {
        let m = heat(4, 0.0);
        let d = DriftSpec::zero(&m);
        let cfg = IntegratorConfig::new(1e-3, 0.05).unwrap().with_record_every(5);
        let x0 = [1.0, 1.0, -1.0, 0.5];
        let tr = simulate_path(&m, &d, &cfg, &x0, 0, 0).unwrap();
        for (t, s) in tr.times.iter().zip(&tr.states) {
            for k in 0..4 {
                let exact = (m.eigenvalues()[k] * t).exp() * x0[k];
                assert!((s[k] - exact).abs() <= 1e-12 * (1.0 + exact.abs()));
            }
        }
    }

    #[test]
    fn divergence_is_flagged_with_step() {
        // An anti-dissipative drift blows up quickly.
        let m = SpectralModel::custom(vec![-1.0], vec![0.0], 2).unwrap();
        let bad = DriftSpec::unchecked(
            &m,
            crate::drift::DriftVariant::NemytskiiGradient {
                phi_prime: vec![0.0, 0.0, 0.0, -50.0],
            },
            0.0,
        );
        let cfg = IntegratorConfig::new(0.01, 5.0).unwrap();
        let err = simulate_path(&m, &bad, &cfg, &[3.0], 0, 4).unwrap_err();
        match err {
            Error::Divergence { path_id, step, .. } => {
                assert_eq!(path_id, 4);
                assert!(step >= 1);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn coupled_identical_starts_never_separate() {
        let m = heat(4, 1.0);
        let d = DriftSpec::nemytskii(&m, vec![0.0, 0.0, 0.0, 1.0], 0.0).unwrap();
        let cfg = IntegratorConfig::new(1e-3, 0.2).unwrap().with_record_every(20);
        let x0 = [0.3, 0.1, 0.0, -0.2];
        let r = simulate_coupled(&m, &d, &cfg, &x0, &x0, 1, 1).unwrap();
        assert!(r.separation.iter().all(|s| *s == 0.0));
        assert_eq!(r.empirical_rate, None);
    }

    #[test]
    fn coupled_linear_separation_is_deterministic() {
        let m = heat(3, 1.0);
        let zeta2 = 0.5;
        let d = DriftSpec::linear(&m, zeta2).unwrap();
        let cfg = IntegratorConfig::new(1e-3, 0.3).unwrap().with_record_every(50);
        let x0 = [1.0, 0.5, -0.3];
        let y0 = [0.2, 0.1, 0.4];
        let runs: Vec<CoupledPairResult> = (0..5)
            .map(|p| simulate_coupled(&m, &d, &cfg, &x0, &y0, 7, p).unwrap())
            .collect();
        for r in &runs[1..] {
            for (a, b) in r.separation.iter().zip(&runs[0].separation) {
                assert!((a - b).abs() <= 1e-12 * b.max(1e-300));
            }
        }
        // Matches the affine flow up to the O(dt) quadrature error of the drift.
        for (t, s) in runs[0].times.iter().zip(&runs[0].separation) {
            let exact: f64 = (0..3)
                .map(|k| (((m.eigenvalues()[k] + zeta2) * t).exp() * (x0[k] - y0[k])).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((s - exact).abs() <= 1e-3 * exact, "{s} vs {exact}");
        }
        assert!(runs[0].within_bound(0.0));
    }

    #[test]
    fn moment_scan_validates_and_starts_at_x0() {
        let m = ou1();
        let d = DriftSpec::zero(&m);
        let cfg = IntegratorConfig::new(0.01, 1.0).unwrap();
        assert!(moment_scan(&m, &d, &cfg, &[0.0], &[9.0], &[1.0], 100, 0).is_err());
        assert!(moment_scan(&m, &d, &cfg, &[0.0], &[2.0], &[1.0], 50, 0).is_err());
        let rows = moment_scan(&m, &d, &cfg, &[0.0], &[2.0], &[0.0, 1.0], 100, 0).unwrap();
        assert_eq!(rows[0].estimate, 0.0);
        assert_eq!(rows[0].stderr, 0.0);
    }

    #[test]
    fn moment_scan_ou_stationary_variance() {
        let m = ou1();
        let d = DriftSpec::zero(&m);
        let cfg = IntegratorConfig::new(0.5, 1.0).unwrap();
        let rows = moment_scan(&m, &d, &cfg, &[0.0], &[2.0], &[10.0], 20_000, 5).unwrap();
        let r = rows[0];
        assert!((r.estimate - 1.0).abs() <= 3.0 * r.stderr, "{r:?}");
    }

    #[test]
    fn trend_detector() {
        let row = |t, e| MomentRow {
            p: 2.0,
            t,
            estimate: e,
            stderr: 0.01,
            n_paths: 100,
        };
        assert!(no_upward_trend(&[row(1.0, 1.0), row(2.0, 0.99), row(4.0, 1.02)], 3.0));
        assert!(!no_upward_trend(&[row(1.0, 1.0), row(2.0, 1.2)], 3.0));
    }

    #[test]
    fn two_sided_equal_starts_are_zero() {
        let m = heat(3, 1.0);
        let d = DriftSpec::zero(&m);
        let cfg = IntegratorConfig::new(0.01, 1.0).unwrap();
        let rows = two_sided_decay(&m, &d, &cfg, &[0.5, 0.0, 0.0], &[(0.5, 0.5)], 10, 0).unwrap();
        assert_eq!(rows[0].mean_sq_diff, 0.0);
    }

    #[test]
    fn two_sided_ou_closed_form() {
        // F = 0: X(0,-s,x) - X(0,-h,x) = e^{hA}(X(-h,-s,x) - x), so
        // E‖·‖² = Σ e^{2a h}[(e^{a(s-h)} - 1)² x² + Q_{s-h}].
        let m = SpectralModel::custom(vec![-1.0, -2.0], vec![1.0, 0.5], 4).unwrap();
        let d = DriftSpec::zero(&m);
        let cfg = IntegratorConfig::new(0.05, 1.0).unwrap();
        let x0 = [1.0, -0.5];
        let pairs = [(2.0, 0.0), (2.0, 0.5), (2.0, 1.0), (2.0, 1.5)];
        let rows = two_sided_decay(&m, &d, &cfg, &x0, &pairs, 20_000, 3).unwrap();
        for r in &rows {
            let q = m.covariance_qt(r.s - r.h).unwrap();
            let exact: f64 = (0..2)
                .map(|k| {
                    let a = m.eigenvalues()[k];
                    (2.0 * a * r.h).exp()
                        * (((a * (r.s - r.h)).exp() - 1.0).powi(2) * x0[k] * x0[k] + q.variances[k])
                })
                .sum();
            assert!((r.mean_sq_diff - exact).abs() <= 3.0 * r.stderr, "{r:?} vs {exact}");
        }
        assert!(two_sided_decay_rate(&rows).unwrap() < 0.0);
    }
}
