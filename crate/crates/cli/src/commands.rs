//! Subcommand bodies. Each writes its outputs under the experiment's output
//! directory and returns the paths it wrote.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use spdelab::dirichlet::{fk_convergence_scan, killed_exit};
use spdelab::drift::yosida_property_check;
use spdelab::engine::simulate_path;
use spdelab::invariant::{
    default_t_large, dirichlet_form_test, e_concentration, estimate_ensemble, estimate_longrun,
    generator_mean_zero_test, invariance_test, moment_report, pcn_sample, sample_gaussian_measure,
    weighted_gaussian_ensemble, MeasureEnsemble, PcnConfig,
};
use spdelab::io::{fmt_f64, write_ensemble_csv, write_fk_scan_csv, write_rows_csv, write_trajectory_csv};
use spdelab::observables::{ou_mehler_exact, semigroup_mc_multi};
use spdelab::rng::derive_seed;
use spdelab::verify::{run_suite_with, Suite, VerifyReport};

use crate::config::{Experiment, Format, InvariantMethod};

struct Outputs<'a> {
    exp: &'a Experiment,
    written: Vec<PathBuf>,
}

impl<'a> Outputs<'a> {
    fn new(exp: &'a Experiment) -> Result<Self> {
        fs::create_dir_all(&exp.out_dir)
            .with_context(|| format!("cannot create output directory {}", exp.out_dir.display()))?;
        Ok(Self {
            exp,
            written: Vec::new(),
        })
    }

    fn csv(&mut self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> spdelab::Result<()>) -> Result<()> {
        if !self.exp.wants(Format::Csv) {
            return Ok(());
        }
        self.write(name, |w| body(w).map_err(Into::into))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        if !self.exp.wants(Format::Json) {
            return Ok(());
        }
        let doc = json!({ "master_seed": self.exp.seed, "data": value });
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, &doc)?;
            w.write_all(b"\n")?;
            Ok(())
        })
    }

    fn write(&mut self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let path = self.exp.out_dir.join(name);
        let mut w = BufWriter::new(File::create(&path).with_context(|| format!("cannot create {}", path.display()))?);
        body(&mut w)?;
        w.flush()?;
        self.written.push(path);
        Ok(())
    }
}

fn require_valid_drift(exp: &Experiment) -> Result<()> {
    match &exp.drift_error {
        Some(e) => bail!("{e}"),
        None => Ok(()),
    }
}

/// One trajectory CSV per path id `0..n_paths`.
pub fn cmd_simulate(exp: &Experiment) -> Result<Vec<PathBuf>> {
    require_valid_drift(exp)?;
    let mut out = Outputs::new(exp)?;
    let n = exp.config.mc.n_paths;
    let width = n.saturating_sub(1).to_string().len().max(4);
    for path_id in 0..n as u64 {
        let traj = simulate_path(&exp.model, &exp.drift, &exp.integrator, &exp.x0, exp.seed, path_id)?;
        out.csv(&format!("trajectory_path{path_id:0width$}.csv"), |w| {
            write_trajectory_csv(w, &traj, exp.seed)
        })?;
    }
    Ok(out.written)
}

/// Monte Carlo `P(t)φ(x0)` for each observable and time, with the exact
/// Mehler value alongside when the drift is zero.
pub fn cmd_semigroup(exp: &Experiment) -> Result<Vec<PathBuf>> {
    require_valid_drift(exp)?;
    let mut out = Outputs::new(exp)?;
    let phis = exp.observables_or_one();
    let times = if exp.config.semigroup.times.is_empty() {
        vec![exp.integrator.t_final]
    } else {
        exp.config.semigroup.times.clone()
    };
    let exact = exp.drift.is_zero();
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for (ti, &t) in times.iter().enumerate() {
        let ests = semigroup_mc_multi(
            &exp.model,
            &exp.drift,
            &exp.integrator,
            &phis,
            &exp.x0,
            t,
            exp.config.mc.n_paths.max(2),
            derive_seed(exp.seed, ti as u64),
        )?;
        for (j, (e, phi)) in ests.iter().zip(&phis).enumerate() {
            let mut row = vec![
                j.to_string(),
                fmt_f64(t),
                fmt_f64(e.value),
                fmt_f64(e.stderr),
                e.n_paths.to_string(),
                e.n_discarded.to_string(),
            ];
            let mehler = if exact {
                let v = ou_mehler_exact(&exp.model, &exp.drift, phi, &exp.x0, t)?;
                row.push(fmt_f64(v));
                Some(v)
            } else {
                None
            };
            rows.push(row);
            records.push(json!({
                "observable": phi.to_string(),
                "estimate": e,
                "mehler_exact": mehler,
            }));
        }
    }
    let mut header = vec!["observable", "t", "mc_value", "mc_stderr", "n_paths", "n_discarded"];
    if exact {
        header.push("mehler_exact");
    }
    out.csv("semigroup.csv", |w| write_rows_csv(w, &header, &rows, exp.seed))?;
    let labels: Vec<String> = phis.iter().map(|p| p.to_string()).collect();
    out.json("semigroup.json", &json!({ "observables": labels, "rows": records }))?;
    Ok(out.written)
}

fn invariant_ensemble(exp: &Experiment) -> Result<(MeasureEnsemble, serde_json::Value)> {
    let sec = &exp.config.invariant;
    let seed = derive_seed(exp.seed, 0);
    let potential = || {
        exp.potential
            .as_ref()
            .ok_or_else(|| anyhow!("config: the `{:?}` method needs a `potential` section", sec.method))
    };
    Ok(match sec.method {
        InvariantMethod::Longrun => (
            estimate_longrun(&exp.model, &exp.drift, &exp.integrator, sec.burn_in, sec.thin, sec.n_samples, seed)?,
            json!({ "method": "longrun" }),
        ),
        InvariantMethod::Ensemble => {
            let t_large = sec.t_large.unwrap_or_else(|| default_t_large(&exp.drift));
            (
                estimate_ensemble(
                    &exp.model,
                    &exp.drift,
                    &exp.integrator,
                    &exp.x0,
                    t_large,
                    exp.config.mc.n_paths,
                    seed,
                )?,
                json!({ "method": "ensemble", "t_large": t_large }),
            )
        }
        InvariantMethod::Pcn => {
            let cfg = sec.pcn.unwrap_or_else(|| PcnConfig::new(10 * sec.n_samples, 0.5));
            let run = pcn_sample(&exp.model, potential()?, &cfg, seed)?;
            (
                run.ensemble,
                json!({ "method": "pcn", "acceptance_rate": run.acceptance_rate, "warning": run.warning }),
            )
        }
        InvariantMethod::Gaussian => (
            sample_gaussian_measure(&exp.model, sec.n_samples, seed)?,
            json!({ "method": "gaussian" }),
        ),
        InvariantMethod::WeightedGaussian => {
            let ens = weighted_gaussian_ensemble(&exp.model, potential()?, sec.n_samples, seed)?;
            let ess = ens.weight_ess();
            (ens, json!({ "method": "weighted_gaussian", "weight_ess": ess }))
        }
    })
}

/// Invariant-measure ensemble, its moments, and the identity tests on the
/// configured observables.
pub fn cmd_invariant(exp: &Experiment) -> Result<Vec<PathBuf>> {
    require_valid_drift(exp)?;
    let mut out = Outputs::new(exp)?;
    let sec = &exp.config.invariant;
    let (ens, info) = invariant_ensemble(exp)?;
    out.csv("ensemble.csv", |w| write_ensemble_csv(w, &ens, exp.seed))?;

    let moments = moment_report(&ens, &sec.p_list)?;
    let rows: Vec<Vec<String>> = moments
        .iter()
        .map(|m| vec![fmt_f64(m.p), fmt_f64(m.estimate), fmt_f64(m.stderr)])
        .collect();
    out.csv("moments.csv", |w| write_rows_csv(w, &["p", "estimate", "stderr"], &rows, exp.seed))?;

    let phis = &exp.observables;
    let (invariance, mean_zero, dirichlet_form) = if phis.is_empty() {
        (Vec::new(), Vec::new(), Vec::new())
    } else {
        (
            invariance_test(
                &ens,
                &exp.model,
                &exp.drift,
                &exp.integrator,
                phis,
                sec.identity_t,
                1,
                derive_seed(exp.seed, 1),
            )?,
            generator_mean_zero_test(&ens, &exp.model, &exp.drift, phis, 0.0)?,
            dirichlet_form_test(&ens, &exp.model, &exp.drift, phis)?,
        )
    };
    let conc = e_concentration(&ens, &exp.model)?;
    out.json(
        "invariant.json",
        &json!({
            "ensemble": info,
            "n_samples": ens.len(),
            "moments": moments,
            "e_concentration": conc,
            "invariance": invariance,
            "generator_mean_zero": mean_zero,
            "dirichlet_form": dirichlet_form,
        }),
    )?;
    Ok(out.written)
}

/// Killed-semigroup estimate at `x0`, `t = t_final`, and the Feynman-Kac
/// ε-ladder scan, one table per observable.
pub fn cmd_dirichlet(exp: &Experiment) -> Result<Vec<PathBuf>> {
    require_valid_drift(exp)?;
    let domain = exp.domain()?;
    let mut out = Outputs::new(exp)?;
    let t = exp.integrator.t_final;
    let n_paths = exp.config.mc.n_paths;
    let mut records = Vec::new();
    let mut exit_rows = Vec::new();
    for (j, phi) in exp.observables_or_one().iter().enumerate() {
        let seed = derive_seed(exp.seed, j as u64);
        let exit = killed_exit(&exp.model, &exp.drift, &exp.integrator, &domain.spec, phi, &exp.x0, t, n_paths, seed)?;
        let scan = fk_convergence_scan(
            &exp.model,
            &exp.drift,
            &exp.integrator,
            &domain.spec,
            phi,
            &exp.x0,
            t,
            &domain.eps_ladder,
            n_paths,
            seed,
        )?;
        out.csv(&format!("fk_scan_obs{j}.csv"), |w| write_fk_scan_csv(w, &scan, exp.seed))?;
        exit_rows.push(vec![
            j.to_string(),
            fmt_f64(exit.value),
            fmt_f64(exit.stderr),
            fmt_f64(exit.survival_fraction),
            exit.n_paths.to_string(),
        ]);
        records.push(json!({ "observable": phi.to_string(), "killed_exit": exit, "fk_scan": scan }));
    }
    out.csv("killed_exit.csv", |w| {
        write_rows_csv(
            w,
            &["observable", "value", "stderr", "survival_fraction", "n_paths"],
            &exit_rows,
            exp.seed,
        )
    })?;
    out.json("dirichlet.json", &json!({ "t": t, "domain": domain.spec, "rows": records }))?;
    Ok(out.written)
}

/// Lipschitz, monotonicity, norm-reduction and dissipativity checks of the
/// Yosida approximants, one row per δ.
pub fn cmd_yosida(exp: &Experiment) -> Result<Vec<PathBuf>> {
    require_valid_drift(exp)?;
    let mut out = Outputs::new(exp)?;
    let sec = &exp.config.yosida;
    let reports = sec
        .deltas
        .iter()
        .enumerate()
        .map(|(i, &d)| yosida_property_check(&exp.model, &exp.drift, d, sec.n_pairs, derive_seed(exp.seed, i as u64)))
        .collect::<spdelab::Result<Vec<_>>>()?;
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                fmt_f64(r.delta),
                r.n_pairs.to_string(),
                fmt_f64(r.lipschitz_ratio),
                fmt_f64(r.lipschitz_bound),
                fmt_f64(r.monotonicity),
                fmt_f64(r.norm_excess),
                fmt_f64(r.f_delta_dissipativity),
                fmt_f64(r.zeta2),
                r.pass.to_string(),
            ]
        })
        .collect();
    out.csv("yosida_checks.csv", |w| {
        write_rows_csv(
            w,
            &[
                "delta",
                "n_pairs",
                "lipschitz_ratio",
                "lipschitz_bound",
                "monotonicity",
                "norm_excess",
                "f_delta_dissipativity",
                "zeta2",
                "pass",
            ],
            &rows,
            exp.seed,
        )
    })?;
    out.json("yosida_checks.json", &reports)?;
    Ok(out.written)
}

/// Runs the verification suite; the report is always written as JSON and
/// wall-clock timings go to a separate CSV.
pub fn cmd_verify(exp: &Experiment, suite: Suite) -> Result<(VerifyReport, Vec<PathBuf>)> {
    let mut out = Outputs::new(exp)?;
    let report = run_suite_with(suite, exp.seed, &exp.model, &exp.drift);
    out.write("verify_report.json", |w| {
        w.write_all(report.to_json().as_bytes())?;
        w.write_all(b"\n")?;
        Ok(())
    })?;
    out.write("verify_timings.csv", |w| {
        let rows: Vec<Vec<String>> = report
            .checks
            .iter()
            .map(|c| vec![c.check_id.clone(), c.runtime_ms.to_string()])
            .collect();
        write_rows_csv(w, &["check_id", "runtime_ms"], &rows, exp.seed).map_err(Into::into)
    })?;
    Ok((report, out.written))
}
