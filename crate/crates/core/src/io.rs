//! CSV import and export.
//!
//! Every file starts with a `# master_seed=<u64>` line, then a header row.
//! Floats are written in scientific notation with 17 significant digits and
//! lines end in `\n`.

use std::io::{BufRead, Write};

use crate::dirichlet::FkScanRow;
use crate::engine::{MomentRow, Trajectory};
use crate::error::{Error, Result};
use crate::invariant::{MeasureEnsemble, Provenance};
use crate::spectral::StateVector;

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_seed_line<W: Write>(w: &mut W, seed: u64) -> Result<()> {
    writeln!(w, "# master_seed={seed}")?;
    Ok(())
}

fn write_row<W: Write>(w: &mut W, cells: impl IntoIterator<Item = String>) -> Result<()> {
    let line: Vec<String> = cells.into_iter().collect();
    w.write_all(line.join(",").as_bytes())?;
    w.write_all(b"\n")?;
    Ok(())
}

fn mode_headers(n: usize) -> impl Iterator<Item = String> {
    (0..n).map(|k| format!("mode_{k}"))
}

/// `t,mode_0,...,mode_{N-1},l2,sup,h1`.
pub fn write_trajectory_csv<W: Write>(w: &mut W, traj: &Trajectory, seed: u64) -> Result<()> {
    let n = traj.states.first().map_or(0, |s| s.len());
    write_seed_line(w, seed)?;
    write_row(
        w,
        std::iter::once("t".to_string())
            .chain(mode_headers(n))
            .chain(["l2", "sup", "h1"].map(String::from)),
    )?;
    for ((t, s), nm) in traj.times.iter().zip(&traj.states).zip(&traj.norms_trace) {
        write_row(
            w,
            std::iter::once(fmt_f64(*t))
                .chain(s.iter().map(|v| fmt_f64(*v)))
                .chain([nm.l2, nm.sup_grid, nm.h1].map(fmt_f64)),
        )?;
    }
    Ok(())
}

/// `p,t,estimate,stderr,n_paths`.
pub fn write_moment_csv<W: Write>(w: &mut W, rows: &[MomentRow], seed: u64) -> Result<()> {
    write_seed_line(w, seed)?;
    write_row(w, ["p", "t", "estimate", "stderr", "n_paths"].map(String::from))?;
    for r in rows {
        write_row(
            w,
            [
                fmt_f64(r.p),
                fmt_f64(r.t),
                fmt_f64(r.estimate),
                fmt_f64(r.stderr),
                r.n_paths.to_string(),
            ],
        )?;
    }
    Ok(())
}

/// `eps,value,stderr,gap,gap_se`.
pub fn write_fk_scan_csv<W: Write>(w: &mut W, rows: &[FkScanRow], seed: u64) -> Result<()> {
    write_seed_line(w, seed)?;
    write_row(w, ["eps", "value", "stderr", "gap", "gap_se"].map(String::from))?;
    for r in rows {
        write_row(w, [r.eps, r.value, r.stderr, r.gap, r.gap_se].map(fmt_f64))?;
    }
    Ok(())
}

/// `weight,mode_0,...,mode_{N-1}`.
pub fn write_ensemble_csv<W: Write>(w: &mut W, ens: &MeasureEnsemble, seed: u64) -> Result<()> {
    let n = ens.samples()[0].len();
    write_seed_line(w, seed)?;
    write_row(w, std::iter::once("weight".to_string()).chain(mode_headers(n)))?;
    for (x, wt) in ens.samples().iter().zip(ens.weights()) {
        write_row(w, std::iter::once(fmt_f64(*wt)).chain(x.iter().map(|v| fmt_f64(*v))))?;
    }
    Ok(())
}

/// Generic numeric table with a caller-supplied header.
pub fn write_table_csv<W: Write>(w: &mut W, header: &[&str], rows: &[Vec<f64>], seed: u64) -> Result<()> {
    let cells: Vec<Vec<String>> = rows.iter().map(|r| r.iter().map(|v| fmt_f64(*v)).collect()).collect();
    write_rows_csv(w, header, &cells, seed)
}

/// Table of preformatted cells; floats should go through [`fmt_f64`].
pub fn write_rows_csv<W: Write>(w: &mut W, header: &[&str], rows: &[Vec<String>], seed: u64) -> Result<()> {
    write_seed_line(w, seed)?;
    write_row(w, header.iter().map(|h| h.to_string()))?;
    for r in rows {
        if r.len() != header.len() {
            return Err(Error::SizeMismatch {
                what: "csv row",
                expected: header.len(),
                got: r.len(),
            });
        }
        write_row(w, r.iter().cloned())?;
    }
    Ok(())
}

/// Numeric rows of a CSV, skipping `#` comments, blank lines, and a header
/// row if the first cell of the first data line is not a number.
fn read_numeric_rows<R: BufRead>(r: R, what: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    let mut seen_first = false;
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: std::result::Result<Vec<f64>, _> = cells.iter().map(|c| c.parse::<f64>()).collect();
        match parsed {
            Ok(v) => rows.push(v),
            Err(_) if !seen_first => {}
            Err(_) => {
                return Err(Error::Parse(format!("{what}: line {}: non-numeric cell", lineno + 1)));
            }
        }
        seen_first = true;
    }
    Ok(rows)
}

/// Two-column spectrum `a_k,c_k`, one mode per row.
pub fn read_spectrum_csv<R: BufRead>(r: R) -> Result<(Vec<f64>, Vec<f64>)> {
    let rows = read_numeric_rows(r, "spectrum")?;
    if rows.is_empty() {
        return Err(Error::Parse("spectrum: no rows".into()));
    }
    let mut a = Vec::with_capacity(rows.len());
    let mut c = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        if row.len() != 2 {
            return Err(Error::Parse(format!(
                "spectrum: row {} has {} columns, expected 2",
                i + 1,
                row.len()
            )));
        }
        a.push(row[0]);
        c.push(row[1]);
    }
    Ok((a, c))
}

pub fn read_ensemble_csv<R: BufRead>(r: R, provenance: Provenance) -> Result<MeasureEnsemble> {
    let rows = read_numeric_rows(r, "ensemble")?;
    let mut weights = Vec::with_capacity(rows.len());
    let mut samples = Vec::with_capacity(rows.len());
    for row in rows {
        if row.len() < 2 {
            return Err(Error::Parse("ensemble: rows need a weight and at least one mode".into()));
        }
        weights.push(row[0]);
        samples.push(StateVector::new(row[1..].to_vec())?);
    }
    MeasureEnsemble::new(samples, weights, provenance)
}
