//! End-to-end verification suite.
//!
//! Each check runs one property of the model at desk scale (16 modes on a
//! 48-point grid, `dt = 1e-3` unless stated) and reduces it to a single
//! `lhs <= rhs` comparison. Checks are collected, never fail-fast: an error
//! inside a check becomes a failing record carrying the error message.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dirichlet::{fk_convergence_scan, subinvariance_test, DomainSpec};
use crate::drift::{
    dissipativity_estimate, drift_eval, mehler_smooth_estimate, yosida_f, yosida_ladder, yosida_property_check,
    yosida_resolve, DriftSpec, KernelSpec,
};
use crate::engine::{moment_scan, simulate_coupled, IntegratorConfig, MomentRow};
use crate::error::Result;
use crate::invariant::{
    dirichlet_form_test, estimate_ensemble, estimate_longrun, generator_mean_zero_test, invariance_test,
    moment_report, pcn_sample, propagated_means, sample_gaussian_measure, e_concentration, default_t_large,
    MeasureEnsemble, PcnConfig, PotentialSpec,
};
use crate::observables::{
    apply_n0, carre_du_champ, cyl_eval, generator_diff_quotient, ou_mehler_exact, semigroup_mc_multi, CylFunc,
};
use crate::rng::derive_seed;
use crate::spectral::{GridField, ModelSpec, SpectralModel};

const DESK_MODES: usize = 16;
const DESK_DT: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    #[default]
    Fast,
    Full,
}

impl Suite {
    fn pick(self, full: usize, fast: usize) -> usize {
        match self {
            Suite::Full => full,
            Suite::Fast => fast,
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Suite::Fast),
            "full" => Ok(Suite::Full),
            _ => Err(crate::error::invalid("suite", format!("expected `fast` or `full`, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub check_id: String,
    /// Name of the mathematical property exercised, or `plumbing`.
    pub anchor: String,
    pub pass: bool,
    pub lhs: f64,
    pub rhs: f64,
    pub tolerance: f64,
    pub detail: String,
    /// Wall-clock time; excluded from the serialized report so that reports
    /// are byte-identical across runs.
    #[serde(skip)]
    pub runtime_ms: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suite: Suite,
    pub master_seed: u64,
    pub checks: Vec<CheckRecord>,
    pub all_pass: bool,
}

impl VerifyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRecord> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

/// Result of one check before bookkeeping.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub pass: bool,
    pub lhs: f64,
    pub rhs: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Outcome {
    /// Passes iff `lhs <= rhs`.
    fn at_most(lhs: f64, rhs: f64, tolerance: f64, detail: String) -> Self {
        Self {
            pass: lhs <= rhs,
            lhs,
            rhs,
            tolerance,
            detail,
        }
    }
}

/// Identifier, anchor and body of every model check, in suite order.
pub const CHECKS: [(&str, &str, fn(Suite, u64) -> Result<Outcome>); 14] = [
    ("01-ou-exactness", "ou-mehler-formula", check_ou_exactness),
    ("02-contraction", "pathwise-contraction", check_contraction),
    ("03-moment-bounds", "uniform-moment-bounds", check_moment_bounds),
    ("04-invariant-cross-validation", "gradient-invariant-measure", check_invariant_cross_validation),
    ("05-invariance", "invariance-identity", check_invariance),
    ("06-generator-mean-zero", "generator-mean-zero", check_generator_mean_zero),
    ("07-dirichlet-form", "dirichlet-form-identity", check_dirichlet_form),
    ("08-yosida", "yosida-approximants", check_yosida),
    ("09-mehler-smoothing", "mehler-smoothing", check_mehler_smoothing),
    ("10-difference-quotient", "generator-core-identification", check_difference_quotient),
    ("11-feynman-kac", "feynman-kac-killing", check_feynman_kac),
    ("12-sub-invariance", "sub-invariance", check_sub_invariance),
    ("13-e-concentration", "sobolev-concentration", check_e_concentration),
    ("14-determinism", "plumbing", check_determinism),
];

fn record(id: &str, anchor: &str, f: impl FnOnce() -> Result<Outcome>) -> CheckRecord {
    let start = Instant::now();
    let out = f();
    let runtime_ms = start.elapsed().as_millis();
    match out {
        Ok(o) => CheckRecord {
            check_id: id.into(),
            anchor: anchor.into(),
            pass: o.pass,
            lhs: o.lhs,
            rhs: o.rhs,
            tolerance: o.tolerance,
            detail: o.detail,
            runtime_ms,
        },
        Err(e) => CheckRecord {
            check_id: id.into(),
            anchor: anchor.into(),
            pass: false,
            lhs: f64::NAN,
            rhs: f64::NAN,
            tolerance: f64::NAN,
            detail: format!("error: {e}"),
            runtime_ms,
        },
    }
}

/// Runs a single model check by index into [`CHECKS`].
pub fn run_check(index: usize, suite: Suite, master_seed: u64) -> CheckRecord {
    let (id, anchor, f) = CHECKS[index];
    record(id, anchor, || f(suite, derive_seed(master_seed, index as u64 + 1)))
}

/// Runs every model check.
pub fn run_suite(suite: Suite, master_seed: u64) -> VerifyReport {
    finish(suite, master_seed, Vec::new())
}

/// Runs the dissipativity check on a user-supplied model and drift, then
/// every model check.
pub fn run_suite_with(suite: Suite, master_seed: u64, model: &SpectralModel, drift: &DriftSpec) -> VerifyReport {
    let pairs = suite.pick(4000, 1000);
    let first = record("00-config-dissipativity", "one-sided-lipschitz", || {
        check_config_dissipativity(model, drift, pairs, derive_seed(master_seed, 0))
    });
    finish(suite, master_seed, vec![first])
}

fn finish(suite: Suite, master_seed: u64, mut checks: Vec<CheckRecord>) -> VerifyReport {
    checks.extend((0..CHECKS.len()).map(|i| run_check(i, suite, master_seed)));
    let all_pass = checks.iter().all(|c| c.pass);
    VerifyReport {
        suite,
        master_seed,
        checks,
        all_pass,
    }
}

/// `sup ⟨F(x)-F(y), x-y⟩/‖x-y‖²` must not exceed the declared `ζ₂`.
pub fn check_config_dissipativity(
    model: &SpectralModel,
    drift: &DriftSpec,
    n_pairs: usize,
    seed: u64,
) -> Result<Outcome> {
    let rep = dissipativity_estimate(model, drift, n_pairs, seed)?;
    let tol = 1e-8;
    let mut out = Outcome::at_most(
        rep.zeta2_hat,
        drift.zeta2() + tol,
        tol,
        format!("estimated zeta2 {:e} over {} pairs, declared {:e}", rep.zeta2_hat, n_pairs, drift.zeta2()),
    );
    if !out.pass {
        let (x, y) = &rep.max_violation_pair;
        out.detail.push_str(&format!("; witness x={:?} y={:?}", &x[..], &y[..]));
    }
    Ok(out)
}

fn heat(noise_scale: f64, n: usize) -> Result<SpectralModel> {
    SpectralModel::build(&ModelSpec::HeatDirichlet { noise_scale }, n, 3 * n)
}

fn h1_preset(n: usize) -> Result<(SpectralModel, DriftSpec)> {
    let m = SpectralModel::build(&ModelSpec::ScaledIdentityHOneNoise { beta: 3.0 }, n, 3 * n)?;
    let k = KernelSpec::rank_one(GridField::constant(m.grid_size(), 1.0));
    let d = DriftSpec::kernel_cubic(&m, k, 0.0)?;
    Ok((m, d))
}

fn one_mode_ou() -> Result<SpectralModel> {
    SpectralModel::custom(vec![-1.0], vec![2.0], 2)
}

fn cubic(model: &SpectralModel) -> Result<DriftSpec> {
    DriftSpec::nemytskii(model, vec![0.0, 0.0, 0.0, 1.0], 0.0)
}

fn cfg(dt: f64, t_final: f64) -> Result<IntegratorConfig> {
    IntegratorConfig::new(dt, t_final)
}

/// Five cylindrical test functions on the first modes.
fn desk_phis(n_modes: usize) -> Result<Vec<CylFunc>> {
    [
        "sin(h=0:2)",
        "cos(h=0:1.5,1:1)",
        "0.5*sin(h=1:2,2:-1) + 0.5*cos(h=0:-1)",
        "cos(h=2:3)",
        "sin(h=0:1,3:2) - 0.3*cos(h=4:2)",
    ]
    .iter()
    .map(|s| CylFunc::parse(s, n_modes))
    .collect()
}

fn ref_state(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            sign * 0.4 / (k + 1) as f64
        })
        .collect()
}

/// Largest `|a - b| / se` over `(a, b, se)` triples; zero when empty.
fn max_z(items: impl IntoIterator<Item = (f64, f64, f64)>) -> f64 {
    items
        .into_iter()
        .map(|(a, b, se)| {
            let d = (a - b).abs();
            if d == 0.0 {
                0.0
            } else {
                d / se
            }
        })
        .fold(0.0, f64::max)
}

/// Largest normalized rise `(later - earlier)/hypot(se)` over all ordered
/// pairs of moment rows with equal `p`.
fn max_upward_z(rows: &[MomentRow]) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for (i, a) in rows.iter().enumerate() {
        for b in &rows[i + 1..] {
            if a.p == b.p && b.t > a.t {
                let se = a.stderr.hypot(b.stderr);
                let rise = b.estimate - a.estimate;
                worst = worst.max(rise / se.max(f64::MIN_POSITIVE));
            }
        }
    }
    worst
}

/// Largest normalized step `(next - prev)/hypot(se)` along a ladder of
/// `(value, se)` that should be nonincreasing.
fn max_rise_z(ladder: &[(f64, f64)]) -> f64 {
    ladder
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) / w[0].1.hypot(w[1].1).max(f64::MIN_POSITIVE))
        .fold(f64::NEG_INFINITY, f64::max)
}

fn check_ou_exactness(suite: Suite, seed: u64) -> Result<Outcome> {
    let m = heat(1.0, DESK_MODES)?;
    let d = DriftSpec::zero(&m);
    let phis = desk_phis(m.n_modes())?;
    let x = ref_state(m.n_modes());
    let n_paths = suite.pick(10_000, 2000);
    let c = cfg(DESK_DT, 4.0)?;
    let mut triples = Vec::new();
    for (ti, t) in [0.1, 1.0, 4.0].into_iter().enumerate() {
        let est = semigroup_mc_multi(&m, &d, &c, &phis, &x, t, n_paths, derive_seed(seed, ti as u64))?;
        for (e, phi) in est.iter().zip(&phis) {
            triples.push((e.value, ou_mehler_exact(&m, &d, phi, &x, t)?, e.stderr));
        }
    }
    let z = max_z(triples);
    Ok(Outcome::at_most(
        z,
        3.0,
        3.0,
        format!("max |MC - Mehler|/SE over 5 observables x 3 times, {n_paths} paths"),
    ))
}

fn check_contraction(suite: Suite, seed: u64) -> Result<Outcome> {
    let m = heat(1.0, DESK_MODES)?;
    let d = cubic(&m)?;
    let n_pairs = suite.pick(32, 8);
    let c = cfg(DESK_DT, 2.0)?.with_record_every(10);
    let starts = sample_gaussian_measure(&m, 2 * n_pairs, seed)?;
    let rate = m.max_eigenvalue() + 0.5;
    let mut worst = 0.0f64;
    for i in 0..n_pairs {
        let x0: Vec<f64> = starts.samples()[2 * i].iter().map(|v| 3.0 * v).collect();
        let y0: Vec<f64> = starts.samples()[2 * i + 1].iter().map(|v| 3.0 * v).collect();
        let r = simulate_coupled(&m, &d, &c, &x0, &y0, derive_seed(seed, 1), i as u64)?;
        let s0 = r.separation[0];
        for (t, s) in r.times.iter().zip(&r.separation) {
            worst = worst.max(s / ((rate * t).exp() * s0));
        }
    }
    Ok(Outcome::at_most(
        worst,
        1.02,
        0.02,
        format!("max separation(t)/(e^((max a + 1/2)t)|x0-y0|) over {n_pairs} pairs up to t=2"),
    ))
}

fn check_moment_bounds(suite: Suite, seed: u64) -> Result<Outcome> {
    let n_paths = suite.pick(2000, 300);
    let p_list = [2.0, 4.0];
    let t_list = [1.0, 2.0, 4.0, 8.0];
    let heat_m = heat(1.0, DESK_MODES)?;
    let (h1_m, h1_d) = h1_preset(DESK_MODES)?;
    let presets = [
        ("ou", heat_m.clone(), DriftSpec::zero(&heat_m)),
        ("cubic", heat_m.clone(), cubic(&heat_m)?),
        ("h1-kernel", h1_m, h1_d),
    ];
    let c = cfg(DESK_DT, 8.0)?;
    let mut worst = f64::NEG_INFINITY;
    let mut parts = Vec::new();
    for (i, (name, m, d)) in presets.iter().enumerate() {
        let x0: Vec<f64> = ref_state(m.n_modes()).iter().map(|v| 2.0 * v).collect();
        let rows = moment_scan(m, d, &c, &x0, &p_list, &t_list, n_paths, derive_seed(seed, i as u64))?;
        let z = max_upward_z(&rows);
        parts.push(format!("{name}: {z:.3}"));
        worst = worst.max(z);
    }
    Ok(Outcome::at_most(
        worst,
        3.0,
        3.0,
        format!("max upward moment drift in SE units, {n_paths} paths ({})", parts.join(", ")),
    ))
}

fn check_invariant_cross_validation(suite: Suite, seed: u64) -> Result<Outcome> {
    let m = heat(1.0, DESK_MODES)?;
    let p_list = [1.0, 2.0, 4.0];
    let t_long = suite.pick(1000, 100) as f64;
    let n_paths = suite.pick(10_000, 1000);
    let pcn_steps = suite.pick(400_000, 50_000);
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (i, zeta2) in [0.0, 0.5].into_iter().enumerate() {
        let s = derive_seed(seed, i as u64);
        let pot = PotentialSpec::from_phi_prime(&[0.0, 0.0, 0.0, 1.0], zeta2)?;
        let d = pot.to_drift(&m)?;
        let longrun = estimate_longrun(&m, &d, &cfg(DESK_DT, t_long)?, 1.0, 10, usize::MAX, derive_seed(s, 0))?;
        let zero = vec![0.0; m.n_modes()];
        let ens = estimate_ensemble(
            &m,
            &d,
            &cfg(DESK_DT, 1.0)?,
            &zero,
            default_t_large(&d),
            n_paths,
            derive_seed(s, 1),
        )?;
        let pcn_cfg = PcnConfig {
            n_steps: pcn_steps,
            step_size: 0.9,
            burn_in: 1000,
            thin: 1,
        };
        let pcn = pcn_sample(&m, &pot, &pcn_cfg, derive_seed(s, 2))?;
        let reports = [
            moment_report(&longrun, &p_list)?,
            moment_report(&ens, &p_list)?,
            moment_report(&pcn.ensemble, &p_list)?,
        ];
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let z = max_z(
                reports[a]
                    .iter()
                    .zip(&reports[b])
                    .map(|(ra, rb)| (ra.estimate, rb.estimate, ra.stderr.hypot(rb.stderr))),
            );
            worst = worst.max(z);
        }
        parts.push(format!(
            "zeta2={zeta2}: E|X|^2 longrun {:.5} ensemble {:.5} pcn {:.5} (acceptance {:.3})",
            reports[0][1].estimate, reports[1][1].estimate, reports[2][1].estimate, pcn.acceptance_rate
        ));
    }
    Ok(Outcome::at_most(
        worst,
        3.0,
        3.0,
        format!("max pairwise moment disagreement in combined SE units; {}", parts.join("; ")),
    ))
}

fn check_invariance(suite: Suite, seed: u64) -> Result<Outcome> {
    let m = heat(1.0, DESK_MODES)?;
    let phis = desk_phis(m.n_modes())?;
    let n_samples = suite.pick(4000, 800);
    let c = cfg(DESK_DT, 1.0)?;

    let ou = DriftSpec::zero(&m);
    let gauss = sample_gaussian_measure(&m, n_samples, derive_seed(seed, 0))?;
    let ou_reports = invariance_test(&gauss, &m, &ou, &c, &phis, 1.0, 1, derive_seed(seed, 1))?;

    let cub = cubic(&m)?;
    let longrun = estimate_longrun(
        &m,
        &cub,
        &cfg(DESK_DT, 1.0 + 0.05 * n_samples as f64)?,
        1.0,
        50,
        n_samples,
        derive_seed(seed, 2),
    )?;
    let cubic_reports = invariance_test(&longrun, &m, &cub, &c, &phis, 1.0, 1, derive_seed(seed, 3))?;

    let z_ou = max_z(ou_reports.iter().map(|r| (r.value_lhs, r.value_rhs, r.stderr)));
    let z_cubic = max_z(cubic_reports.iter().map(|r| (r.value_lhs, r.value_rhs, r.stderr)));

    let m1 = one_mode_ou()?;
    let d1 = DriftSpec::zero(&m1);
    let g1 = sample_gaussian_measure(&m1, n_samples, derive_seed(seed, 4))?;
    let cos = CylFunc::cos(1.0, vec![1.0])?;
    let lhs: Vec<f64> = propagated_means(&g1, &m1, &d1, &c, std::slice::from_ref(&cos), 1.0, 1, derive_seed(seed, 5))?
        .into_iter()
        .map(|v| v[0])
        .collect();
    let est = g1.mean_se(&lhs);
    let exact = (-0.5f64).exp();
    let z1 = max_z([(est.mean, exact, est.se)]);
    Ok(Outcome::at_most(
        z_ou.max(z_cubic).max(z1),
        3.0,
        3.0,
        format!(
            "max invariance discrepancy in SE units, {n_samples} samples: OU {z_ou:.3}, cubic {z_cubic:.3}; one-mode OU gives {:.6} +- {:.6} vs {exact:.6}",
            est.mean, est.se
        ),
    ))
}

fn gradient_pcn(suite: Suite, seed: u64) -> Result<(SpectralModel, DriftSpec, MeasureEnsemble)> {
    let m = heat(1.0, DESK_MODES)?;
    let pot = PotentialSpec::from_phi_prime(&[0.0, 0.0, 0.0, 1.0], 0.0)?;
    let d = pot.to_drift(&m)?;
    let pcn_cfg = PcnConfig {
        n_steps: suite.pick(200_000, 40_000),
        step_size: 0.9,
        burn_in: 1000,
        thin: 5,
    };
    let run = pcn_sample(&m, &pot, &pcn_cfg, seed)?;
    Ok((m, d, run.ensemble))
}

fn check_generator_mean_zero(suite: Suite, seed: u64) -> Result<Outcome> {
    let (m, d, ens) = gradient_pcn(suite, seed)?;
    let phis = desk_phis(m.n_modes())?;
    let reports = generator_mean_zero_test(&ens, &m, &d, &phis, 0.0)?;
    let z = max_z(reports.iter().map(|r| (r.value_lhs, 0.0, r.stderr)));
    Ok(Outcome::at_most(
        z,
        3.0,
        3.0,
        format!("max |mean N0 phi|/SE over 5 observables on {} pCN samples", ens.len()),
    ))
}

fn check_dirichlet_form(suite: Suite, seed: u64) -> Result<Outcome> {
    let (m, d, ens) = gradient_pcn(suite, derive_seed(seed, 0))?;
    let phis = desk_phis(m.n_modes())?;
    let reports = dirichlet_form_test(&ens, &m, &d, &phis)?;
    let z = max_z(reports.iter().map(|r| (r.value_lhs, r.value_rhs, r.stderr)));

    let m1 = one_mode_ou()?;
    let d1 = DriftSpec::zero(&m1);
    let g1 = sample_gaussian_measure(&m1, suite.pick(100_000, 20_000), derive_seed(seed, 1))?;
    let sin = CylFunc::sin(1.0, vec![1.0])?;
    let mut lhs = Vec::with_capacity(g1.len());
    let mut rhs = Vec::with_capacity(g1.len());
    for x in g1.samples() {
        lhs.push(apply_n0(&m1, &d1, &sin, x)? * cyl_eval(&sin, x));
        rhs.push(-0.5 * carre_du_champ(&m1, &sin, x));
    }
    let exact = -(1.0 + (-2.0f64).exp()) / 2.0;
    let (l, r) = (g1.mean_se(&lhs), g1.mean_se(&rhs));
    let z1 = max_z([(l.mean, exact, l.se), (r.mean, exact, r.se)]);
    Ok(Outcome::at_most(
        z.max(z1),
        3.0,
        3.0,
        format!(
            "max Dirichlet-form discrepancy in SE units on {} pCN samples; one-mode OU sides {:.6}, {:.6} vs {exact:.6}",
            ens.len(),
            l.mean,
            r.mean
        ),
    ))
}

/// Root of `y + δy³ = x` on `[0, x]` by bisection.
fn bisect_cubic_resolvent(x: f64, delta: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, x);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid + delta * mid.powi(3) < x {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn check_yosida(suite: Suite, seed: u64) -> Result<Outcome> {
    let m = heat(1.0, DESK_MODES)?;
    let d = cubic(&m)?;
    let deltas = [1.0, 0.1, 0.01];
    let n_pairs = suite.pick(1000, 200);
    let mut slack = f64::NEG_INFINITY;
    let mut props_pass = true;
    for (i, &delta) in deltas.iter().enumerate() {
        let r = yosida_property_check(&m, &d, delta, n_pairs, derive_seed(seed, i as u64))?;
        props_pass &= r.pass;
        slack = slack
            .max(r.lipschitz_ratio - r.lipschitz_bound)
            .max(r.monotonicity)
            .max(r.norm_excess)
            .max(r.f_delta_dissipativity - r.zeta2);
    }

    let points = sample_gaussian_measure(&m, 10, derive_seed(seed, 10))?;
    let mut ladder_pass = true;
    for x in points.samples() {
        let x3: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        let errs = yosida_ladder(&m, &d, &deltas, &x3)?;
        ladder_pass &= errs.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    }

    let m1 = one_mode_ou()?;
    let d1 = DriftSpec::kernel_cubic(&m1, KernelSpec::rank_one_from_state(&m1, &[1.0])?, 0.0)?;
    let y = yosida_resolve(&m1, &d1, 1.0, &[2.0])?[0];
    let oracle = bisect_cubic_resolvent(2.0, 1.0);
    let mut residual = (y - 1.0).abs().max((y - oracle).abs());
    let mut prev_err = f64::INFINITY;
    for &delta in &deltas {
        let f = yosida_f(&m1, &d1, delta, &[2.0])?[0];
        let y_delta = bisect_cubic_resolvent(2.0, delta);
        residual = residual.max((f + y_delta.powi(3)).abs());
        let err = (f + 8.0).abs();
        ladder_pass &= err < prev_err;
        prev_err = err;
    }
    let witness_pass = residual <= 1e-10;

    let tol = 1e-8;
    Ok(Outcome {
        pass: props_pass && slack <= tol && ladder_pass && witness_pass,
        lhs: slack,
        rhs: tol,
        tolerance: tol,
        detail: format!(
            "worst property slack {slack:e} over {n_pairs} pairs x 3 deltas; ladder monotone: {ladder_pass}; scalar witness x_delta={y:.15}, max residual against bisection {residual:e}"
        ),
    })
}

fn check_mehler_smoothing(suite: Suite, seed: u64) -> Result<Outcome> {
    let m = heat(1.0, DESK_MODES)?;
    let d = cubic(&m)?;
    let delta = 0.1;
    let cov = m.covariance_qinf();
    let n_samples = suite.pick(1000, 200);
    let points = sample_gaussian_measure(&m, 10, derive_seed(seed, 0))?;
    let mut worst = f64::NEG_INFINITY;
    let mut overall_decrease = true;
    for (i, x) in points.samples().iter().enumerate() {
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let target = yosida_f(&m, &d, delta, &x2)?;
        let mut ladder = Vec::new();
        for s in [1.0, 0.1, 0.01] {
            let e = mehler_smooth_estimate(&m, &d, delta, s, &cov, &x2, n_samples, derive_seed(seed, 1 + i as u64))?;
            let err = e.value.iter().zip(target.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let noise = e.stderr.iter().map(|s| s * s).sum::<f64>().sqrt();
            ladder.push((err, noise));
        }
        worst = worst.max(max_rise_z(&ladder));
        overall_decrease &= ladder[2].0 < ladder[0].0;
    }
    let mut out = Outcome::at_most(
        worst,
        3.0,
        3.0,
        format!("max rise of |F_(delta,s)(x) - F_delta(x)| along s in noise units at 10 points; overall decrease: {overall_decrease}"),
    );
    out.pass &= overall_decrease;
    Ok(out)
}

fn check_difference_quotient(suite: Suite, seed: u64) -> Result<Outcome> {
    let m = heat(1.0, DESK_MODES)?;
    let phi = CylFunc::parse("sin(h=0:1,1:0.5) + 0.5*cos(h=2:1)", m.n_modes())?;
    let x: Vec<f64> = ref_state(m.n_modes()).iter().map(|v| 2.0 * v).collect();
    let n_paths = suite.pick(50_000, 10_000);
    let c = cfg(DESK_DT, 0.1)?;
    let ou = DriftSpec::zero(&m);

    let h = 1e-5;
    let fwd = |h: f64| -> Result<f64> { Ok((ou_mehler_exact(&m, &ou, &phi, &x, h)? - cyl_eval(&phi, &x)) / h) };
    let mehler_deriv = 2.0 * fwd(h / 2.0)? - fwd(h)?;
    let n0 = apply_n0(&m, &ou, &phi, &x)?;
    let deriv_gap = (mehler_deriv - n0).abs() / n0.abs().max(1.0);

    let mut worst = f64::NEG_INFINITY;
    let mut parts = Vec::new();
    for (i, d) in [ou, cubic(&m)?].iter().enumerate() {
        let mut ladder = Vec::new();
        for t in [0.1, 0.03, 0.01] {
            let q = generator_diff_quotient(&m, d, &c, &phi, &x, t, n_paths, derive_seed(seed, i as u64))?;
            ladder.push((q.gap(), q.quotient_se));
        }
        parts.push(format!(
            "{}: gaps {:.4}, {:.4}, {:.4}",
            if i == 0 { "ou" } else { "cubic" },
            ladder[0].0,
            ladder[1].0,
            ladder[2].0
        ));
        worst = worst.max(max_rise_z(&ladder));
    }
    let mut out = Outcome::at_most(
        worst,
        3.0,
        3.0,
        format!(
            "max rise of the quotient gap in SE units, {n_paths} paths; {}; N0 vs Mehler derivative rel. gap {deriv_gap:.2e}",
            parts.join("; ")
        ),
    );
    out.pass &= deriv_gap <= 1e-4;
    Ok(out)
}

fn check_feynman_kac(suite: Suite, seed: u64) -> Result<Outcome> {
    let m = heat(4.0, DESK_MODES)?;
    let d = DriftSpec::zero(&m);
    let domain = DomainSpec::ball(1.0, Vec::new())?;
    let phi = CylFunc::parse("cos(h=) + 0.5*sin(h=0:1)", m.n_modes())?;
    let x = vec![0.0; m.n_modes()];
    let n_paths = suite.pick(10_000, 1000);
    let c = cfg(1e-4, 0.5)?;
    let rows = fk_convergence_scan(&m, &d, &c, &domain, &phi, &x, 0.5, &[0.2, 0.1, 0.05, 0.025], n_paths, seed)?;
    let ladder: Vec<(f64, f64)> = rows.iter().map(|r| (r.gap, r.gap_se)).collect();
    let z = max_rise_z(&ladder);
    let gaps: Vec<String> = rows.iter().map(|r| format!("{:.4}", r.gap)).collect();
    Ok(Outcome::at_most(
        z,
        3.0,
        3.0,
        format!("max rise of the killing gap in SE units, {n_paths} paths; gaps {}", gaps.join(", ")),
    ))
}

fn check_sub_invariance(suite: Suite, seed: u64) -> Result<Outcome> {
    let m = heat(1.0, DESK_MODES)?;
    let d = cubic(&m)?;
    let n_samples = suite.pick(2000, 300);
    let n_paths = suite.pick(16, 4);
    let ens = estimate_longrun(
        &m,
        &d,
        &cfg(DESK_DT, 1.0 + 0.05 * n_samples as f64)?,
        1.0,
        50,
        n_samples,
        derive_seed(seed, 0),
    )?;
    let domain = DomainSpec::ball_at_quantile(&ens, 0.5)?;
    let phis = [
        CylFunc::constant(1.0)?,
        CylFunc::parse("sin(h=0:2)", m.n_modes())?,
        CylFunc::parse("0.5*sin(h=1:2,2:-1) + 0.5*cos(h=0:-1)", m.n_modes())?,
    ];
    let c = cfg(DESK_DT, 1.0)?;
    let mut worst = f64::NEG_INFINITY;
    let mut all_pass = true;
    let mut k = 1;
    for phi in &phis {
        for t in [0.5, 1.0] {
            let r = subinvariance_test(&ens, &m, &d, &c, &domain, phi, t, n_paths, derive_seed(seed, k))?;
            k += 1;
            all_pass &= r.pass;
            worst = worst.max((r.lhs - r.rhs) / r.stderr.max(f64::MIN_POSITIVE));
        }
    }
    let mut out = Outcome::at_most(
        worst,
        3.0,
        3.0,
        format!("max (LHS - RHS)/SE over 3 observables x 2 times, {n_samples} samples, median-radius ball"),
    );
    out.pass &= all_pass;
    Ok(out)
}

fn check_e_concentration(suite: Suite, seed: u64) -> Result<Outcome> {
    let n_paths = suite.pick(2000, 400);
    let mut stats = Vec::new();
    for (i, n) in [DESK_MODES, 2 * DESK_MODES].into_iter().enumerate() {
        let (m, d) = h1_preset(n)?;
        let zero = vec![0.0; n];
        let c = cfg(1e-2, 1.0)?;
        let ens = estimate_ensemble(&m, &d, &c, &zero, default_t_large(&d), n_paths, derive_seed(seed, i as u64))?;
        stats.push(e_concentration(&ens, &m)?);
    }
    let ratio = stats[1].h1_p95 / stats[0].h1_p95;
    let finite = stats.iter().all(|s| s.finite_fraction == 1.0);
    let bound = 1.25f64.ln();
    let mut out = Outcome::at_most(
        ratio.ln().abs(),
        bound,
        bound,
        format!(
            "|ln(h1_p95(2N)/h1_p95(N))| with ratio {ratio:.4}; finite fractions {}, {}",
            stats[0].finite_fraction, stats[1].finite_fraction
        ),
    );
    out.pass &= finite;
    Ok(out)
}

/// Small Monte Carlo workload whose serialized output must not depend on the
/// worker count.
fn determinism_probe(seed: u64) -> Result<String> {
    let m = heat(1.0, DESK_MODES)?;
    let d = cubic(&m)?;
    let phis = desk_phis(m.n_modes())?;
    let x = ref_state(m.n_modes());
    let c = cfg(DESK_DT, 0.2)?;
    let est = semigroup_mc_multi(&m, &d, &c, &phis, &x, 0.2, 64, seed)?;
    let rows = moment_scan(&m, &d, &c, &x, &[2.0], &[0.1, 0.2], 100, derive_seed(seed, 1))?;
    let f = drift_eval(&m, &d, &x)?;
    Ok(serde_json::to_string(&(est, rows, f)).expect("probe serializes"))
}

fn check_determinism(_suite: Suite, seed: u64) -> Result<Outcome> {
    let mut outputs = Vec::new();
    for threads in [1, 3] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| crate::error::invalid("threads", e.to_string()))?;
        outputs.push(pool.install(|| determinism_probe(seed))?);
    }
    outputs.push(determinism_probe(seed)?);
    let mismatches = outputs.windows(2).filter(|w| w[0] != w[1]).count() as f64;
    Ok(Outcome::at_most(
        mismatches,
        0.0,
        0.0,
        "byte mismatches between probe outputs at 1 worker, 3 workers and the ambient pool".into(),
    ))
}
