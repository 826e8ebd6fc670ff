//! CSV and JSON files read and written by the command-line tool.
//!
//! Floats are written with 17 significant digits, so every value read back
//! is bit-identical to the one written.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::adjoint::{Component, FdReport};
use crate::data_gen::{Combine, MeasurementSet, NoiseSpec};
use crate::error::{Error, Result};
use crate::experiments::{LCurveStudy, SensitivityReport};
use crate::model::Grid1D;
use crate::optimizer::OptTrace;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

/// Writes equal-length numeric columns under `headers`.
pub fn write_columns(path: &Path, headers: &[&str], columns: &[&[f64]]) -> Result<()> {
    let rows = columns.first().map_or(0, |c| c.len());
    if headers.len() != columns.len() || columns.iter().any(|c| c.len() != rows) {
        return Err(Error::invalid(
            "columns must match headers and have equal length",
        ));
    }
    let mut w = writer(path)?;
    w.write_record(headers)?;
    for r in 0..rows {
        w.write_record(columns.iter().map(|c| fmt_f64(c[r])))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads numeric columns, checking the header names.
pub fn read_columns(path: &Path, headers: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let found: Vec<String> = r.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if found != headers {
        return Err(Error::Config(format!(
            "{}: expected columns {:?}, found {:?}",
            path.display(),
            headers,
            found
        )));
    }
    let mut cols = vec![Vec::new(); headers.len()];
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Config(format!(
                    "{}: row {} has non-numeric value `{field}`",
                    path.display(),
                    line + 2
                ))
            })?;
            cols[c].push(v);
        }
    }
    Ok(cols)
}

/// Grid implied by a node column; the spacing must be uniform.
pub fn grid_from_nodes(x: &[f64]) -> Result<Grid1D> {
    if x.len() < 3 {
        return Err(Error::Config(format!(
            "profile needs at least 3 nodes, got {}",
            x.len()
        )));
    }
    let grid = Grid1D::new(x[0], x[x.len() - 1], x.len())?;
    let tol = 1e-9 * grid.dx();
    if x.iter()
        .enumerate()
        .any(|(i, xi)| (xi - grid.x(i)).abs() > tol)
    {
        return Err(Error::Config(
            "profile nodes are not uniformly spaced".into(),
        ));
    }
    Ok(grid)
}

pub fn write_profile(path: &Path, grid: &Grid1D, z: &[f64]) -> Result<()> {
    write_columns(path, &["x", "z"], &[&grid.nodes(), z])
}

/// Profile and the grid implied by its `x` column.
pub fn read_profile(path: &Path) -> Result<(Grid1D, Vec<f64>)> {
    let mut cols = read_columns(path, &["x", "z"])?;
    let z = cols.pop().expect("two columns");
    Ok((grid_from_nodes(&cols[0])?, z))
}

pub fn write_etch(path: &Path, grid: &Grid1D, e: &[f64]) -> Result<()> {
    write_columns(path, &["x", "e"], &[&grid.nodes(), e])
}

pub fn read_etch(path: &Path) -> Result<(Grid1D, Vec<f64>)> {
    let mut cols = read_columns(path, &["x", "e"])?;
    let e = cols.pop().expect("two columns");
    Ok((grid_from_nodes(&cols[0])?, e))
}

pub fn write_trace(path: &Path, trace: &OptTrace) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["iter", "misfit", "reg", "total", "gradnorm", "step"])?;
    for r in &trace.records {
        w.write_record([
            r.iter.to_string(),
            fmt_f64(r.cost.misfit),
            fmt_f64(r.cost.regularization),
            fmt_f64(r.cost.total),
            fmt_f64(r.grad_norm),
            fmt_f64(r.step),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn component_label(c: Component) -> String {
    match c {
        Component::A => "a".into(),
        Component::K => "k".into(),
        Component::E(i) => format!("e[{i}]"),
    }
}

pub fn write_fd_report(path: &Path, report: &FdReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["component", "adjoint", "fd", "rel_error"])?;
    for e in &report.entries {
        w.write_record([
            component_label(e.component),
            fmt_f64(e.adjoint),
            fmt_f64(e.fd),
            fmt_f64(e.rel_error),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_lcurve(path: &Path, study: &LCurveStudy) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "alpha",
        "misfit",
        "regnorm",
        "trench_error",
        "iterations",
        "corner",
    ])?;
    let corner = study.corner.as_ref().map(|c| c.alpha);
    for (p, err) in study.sweep.points.iter().zip(&study.trench_errors) {
        w.write_record([
            fmt_f64(p.alpha),
            fmt_f64(p.misfit_norm),
            fmt_f64(p.reg_norm),
            fmt_f64(*err),
            p.iterations.to_string(),
            u8::from(corner == Some(p.alpha)).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn level_label(l: f64) -> String {
    format!("{l}%")
}

/// Mean errors with variants as rows and noise levels as columns.
pub fn write_table1(path: &Path, report: &SensitivityReport) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["trenches".to_string()];
    header.extend(report.noise_levels.iter().map(|&l| level_label(l)));
    w.write_record(&header)?;
    for &v in &report.variants {
        let mut row = vec![v.name().to_string()];
        row.extend(
            report
                .noise_levels
                .iter()
                .map(|&l| fmt_f64(report.summary(v, l).mean)),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per variant and noise level: mean, spread and success count.
pub fn write_sensitivity_summary(path: &Path, report: &SensitivityReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["variant", "noise", "mean", "spread", "successes"])?;
    for &v in &report.variants {
        for &l in &report.noise_levels {
            let s = report.summary(v, l);
            w.write_record([
                v.name().to_string(),
                fmt_f64(l),
                fmt_f64(s.mean),
                fmt_f64(s.spread),
                s.successes.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One row per run.
pub fn write_sensitivity_long(path: &Path, report: &SensitivityReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "variant",
        "noise",
        "replicate",
        "seed",
        "error",
        "iterations",
        "failure",
    ])?;
    for c in &report.cells {
        w.write_record([
            c.variant.name().to_string(),
            fmt_f64(c.noise),
            c.replicate.to_string(),
            c.seed.to_string(),
            c.trench_error.map(fmt_f64).unwrap_or_default(),
            c.iterations.map(|i| i.to_string()).unwrap_or_default(),
            c.failure.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Sidecar describing a measurement set on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementManifest {
    pub grid: Grid1D,
    pub combine: Combine,
    /// Profile files relative to the manifest.
    pub files: Vec<String>,
    pub noise: Option<NoiseSpec>,
}

/// Writes `measurement_<i>.csv` files and `measurements.json` into `dir`.
/// Returns the manifest path.
pub fn write_measurement_set(
    dir: &Path,
    meas: &MeasurementSet,
    noise: Option<NoiseSpec>,
) -> Result<PathBuf> {
    let mut files = Vec::new();
    for (i, z) in meas.profiles().iter().enumerate() {
        let name = format!("measurement_{i}.csv");
        write_profile(&dir.join(&name), meas.grid(), z)?;
        files.push(name);
    }
    let manifest = MeasurementManifest {
        grid: *meas.grid(),
        combine: meas.combine(),
        files,
        noise,
    };
    let path = dir.join("measurements.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn read_measurement_set(manifest: &Path) -> Result<MeasurementSet> {
    let m: MeasurementManifest = read_json(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut profiles = Vec::with_capacity(m.files.len());
    for f in &m.files {
        let (grid, z) = read_profile(&base.join(f))?;
        if grid.n() != m.grid.n() || (grid.dx() - m.grid.dx()).abs() > 1e-9 * m.grid.dx() {
            return Err(Error::Config(format!(
                "{f}: grid differs from the manifest"
            )));
        }
        profiles.push(z);
    }
    MeasurementSet::new(m.grid, profiles, m.combine)
}

/// Creates `dir` if needed. An existing non-empty directory is only
/// accepted with `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::Config(format!(
                "{} exists and is not a directory",
                dir.display()
            )));
        }
        if !force && fs::read_dir(dir)?.next().is_some() {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    } else {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Record of one command invocation, enough to rerun it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub preset: Option<String>,
    pub preset_version: Option<u32>,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn profile_round_trip_is_exact(z in prop::collection::vec(-1e3f64..1e3, 3..40)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("p.csv");
            let grid = Grid1D::symmetric(0.55, z.len()).unwrap();
            write_profile(&p, &grid, &z).unwrap();
            let (g2, z2) = read_profile(&p).unwrap();
            prop_assert_eq!(z2, z);
            prop_assert_eq!(g2.n(), grid.n());
        }
    }

    #[test]
    fn tiny_values_survive() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        let grid = Grid1D::new(0.0, 1.0, 3).unwrap();
        let e = [5e-324, 1.0 / 3.0, f64::MAX];
        write_etch(&p, &grid, &e).unwrap();
        assert_eq!(read_etch(&p).unwrap().1, e);
    }

    #[test]
    fn wrong_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        fs::write(&p, "x,depth\n0,0\n1,0\n2,0\n").unwrap();
        assert!(matches!(read_profile(&p), Err(Error::Config(_))));
    }

    #[test]
    fn uneven_nodes_are_rejected() {
        assert!(grid_from_nodes(&[0.0, 0.5, 0.7, 1.0]).is_err());
        assert!(grid_from_nodes(&[0.0, 0.5, 1.0]).is_ok());
    }

    #[test]
    fn out_dir_needs_force_when_not_empty() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        prepare_out_dir(&out, false).unwrap();
        prepare_out_dir(&out, false).unwrap();
        fs::write(out.join("x"), "1").unwrap();
        assert!(prepare_out_dir(&out, false).is_err());
        prepare_out_dir(&out, true).unwrap();
    }

    #[test]
    fn measurement_set_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid1D::symmetric(1.0, 5).unwrap();
        let m = MeasurementSet::new(
            grid,
            vec![vec![0.0, 0.1, 0.2, 0.1, 0.0], vec![0.0, 0.2, 0.3, 0.2, 0.0]],
            Combine::Superposed,
        )
        .unwrap();
        let path =
            write_measurement_set(dir.path(), &m, Some(NoiseSpec::post_hoc(5.0, 3))).unwrap();
        let back = read_measurement_set(&path).unwrap();
        assert_eq!(back.profiles(), m.profiles());
        assert_eq!(back.combine(), Combine::Superposed);
    }
}
