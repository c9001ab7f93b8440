//! Plain CSV output for fields, trajectories and residual reports.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::diagnostics::ResidualReport;
use crate::error::{Error, Result};
use crate::flow::TrajectoryRow;
use crate::grid::{Grid, ScalarField};
use crate::metric::JkoTrajectory;

fn write(path: &Path, s: &str) -> Result<()> {
    fs::write(path, s).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn csv_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

fn to_csv<R: serde::Serialize>(header: &[&str], rows: impl IntoIterator<Item = R>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

/// `# <grid>` comment line, then `x[,y],value` rows.
pub fn field_csv(field: &ScalarField) -> String {
    let grid = field.grid();
    let body = if grid.dim() == 1 {
        to_csv(&["x", "value"], grid.coords().zip(field.values()).map(|(x, v)| (x[0], *v)))
    } else {
        to_csv(&["x", "y", "value"], grid.coords().zip(field.values()).map(|(x, v)| (x[0], x[1], *v)))
    };
    format!("# {grid}\n{body}")
}

pub fn write_field_csv(path: &Path, field: &ScalarField) -> Result<()> {
    write(path, &field_csv(field))
}

/// Reads the value column of a field CSV onto `grid`; the node count must match.
pub fn read_field_csv(path: &Path, grid: &Arc<Grid>) -> Result<ScalarField> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut values = Vec::with_capacity(grid.len());
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let last = record.iter().next_back().unwrap_or("");
        let v: f64 = last
            .parse()
            .map_err(|_| Error::Config(format!("{}: bad value '{last}'", path.display())))?;
        values.push(v);
    }
    if values.len() != grid.len() {
        return Err(Error::Config(format!(
            "{}: {} values for a grid of {} nodes",
            path.display(),
            values.len(),
            grid.len()
        )));
    }
    ScalarField::new(grid.clone(), values)
}

pub const TRAJECTORY_COLUMNS: [&str; 8] = ["t", "E_total", "L", "M", "sobolev", "xi_norm", "mass", "dt"];

pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    to_csv(
        &TRAJECTORY_COLUMNS,
        rows.iter().map(|r| {
            let e = &r.energy;
            [r.t, e.total, e.l, e.mass, e.sobolev, r.xi_norm, r.mass, r.dt]
        }),
    )
}

pub fn write_trajectory_csv(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    write(path, &trajectory_csv(rows))
}

/// Flow columns plus `dw_increment` (zero on the initial row).
pub fn jko_csv(traj: &JkoTrajectory) -> String {
    let mut header = TRAJECTORY_COLUMNS.to_vec();
    header.push("dw_increment");
    to_csv(
        &header,
        traj.times.iter().zip(&traj.energies).enumerate().map(|(k, (t, e))| {
            let (xi, dt, inc) = if k == 0 {
                (traj.initial_xi_norm, 0.0, 0.0)
            } else {
                let st = &traj.steps[k - 1];
                (st.xi_norm, t - traj.times[k - 1], st.dw_increment)
            };
            [*t, e.total, e.l, e.mass, e.sobolev, xi, e.mass, dt, inc]
        }),
    )
}

pub fn write_jko_csv(path: &Path, traj: &JkoTrajectory) -> Result<()> {
    write(path, &jko_csv(traj))
}

pub const RESIDUAL_COLUMNS: [&str; 4] = ["pde_residual", "eikonal_excess", "stationarity", "complementarity"];

pub fn residual_values(r: &ResidualReport) -> [f64; 4] {
    [r.pde_residual, r.eikonal_excess, r.stationarity, r.complementarity]
}

pub fn write_residual_csv(path: &Path, r: &ResidualReport) -> Result<()> {
    write(path, &to_csv(&RESIDUAL_COLUMNS, [residual_values(r)]))
}

/// Header plus rows of serializable records.
pub fn write_table<R: serde::Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<()> {
    write(path, &to_csv(header, rows))
}
