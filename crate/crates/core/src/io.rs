//! CSV and legacy-VTK artifacts.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::fem::{ScalarField, TriMesh};
use crate::magnetics::{ControlMode, Point};
use crate::objective::ControlTrajectory;
use crate::optimize::IterationRecord;
use crate::transport::Diagnostics;

fn secondary_prefix(mode: ControlMode) -> &'static str {
    match mode {
        ControlMode::Direction => "theta",
        ControlMode::Position => "phi",
    }
}

/// Shortest-roundtrip-safe scientific formatting (17 significant digits).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write `t, α_1.., θ_1..` (or `φ_1..`) rows.
pub fn write_controls_csv<W: Write>(mut w: W, traj: &ControlTrajectory, mode: ControlMode) -> Result<()> {
    let np = traj.num_dipoles();
    let mut header = vec!["t".to_string()];
    header.extend((1..=np).map(|i| format!("alpha_{i}")));
    header.extend((1..=np).map(|i| format!("{}_{i}", secondary_prefix(mode))));
    writeln!(w, "{}", header.join(","))?;
    for (n, row) in traj.rows().iter().enumerate() {
        let mut fields = vec![fmt_f64(traj.time(n))];
        fields.extend(row.iter().map(|v| fmt_f64(*v)));
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Parse a controls file written by [`write_controls_csv`].
pub fn read_controls_csv<R: BufRead>(r: R, mode: ControlMode) -> Result<ControlTrajectory> {
    let mut lines = r.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line?,
        None => return Err(Error::Coverage("the controls file is empty".into())),
    };
    let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    let np = cols.iter().filter(|c| c.starts_with("alpha_")).count();
    let mut expected = vec!["t".to_string()];
    expected.extend((1..=np).map(|i| format!("alpha_{i}")));
    expected.extend((1..=np).map(|i| format!("{}_{i}", secondary_prefix(mode))));
    if np == 0 || cols != expected {
        return Err(Error::Scenario(format!(
            "controls header must be `{}`, found `{}`",
            expected.join(","),
            header.trim()
        )));
    }
    let mut times = Vec::new();
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Scenario(format!("controls line {}: {e}", i + 1)))?;
        if vals.len() != 1 + 2 * np {
            return Err(Error::Scenario(format!(
                "controls line {}: expected {} fields, found {}",
                i + 1,
                1 + 2 * np,
                vals.len()
            )));
        }
        times.push(vals[0]);
        rows.push(vals[1..].to_vec());
    }
    if rows.len() < 2 {
        return Err(Error::Coverage(format!(
            "the controls file has {} time nodes; at least two are needed",
            rows.len()
        )));
    }
    let n = rows.len() - 1;
    let tau = times[n] / n as f64;
    if times[0].abs() > 1e-12 * tau.abs().max(1.0) {
        return Err(Error::Coverage(format!(
            "controls start at t = {} instead of 0",
            times[0]
        )));
    }
    for (k, t) in times.iter().enumerate() {
        if (t - k as f64 * tau).abs() > 1e-9 * tau {
            return Err(Error::Scenario(format!(
                "control times must be uniform; node {k} is at {t}"
            )));
        }
    }
    ControlTrajectory::new(tau, rows)
}

pub fn write_iteration_header<W: Write>(mut w: W) -> Result<()> {
    writeln!(w, "iter,J,J1,J2,J3,projected_gradient_norm,step")?;
    Ok(())
}

pub fn write_iteration<W: Write>(mut w: W, rec: &IterationRecord) -> Result<()> {
    writeln!(
        w,
        "{},{},{},{},{},{},{}",
        rec.iteration,
        fmt_f64(rec.value),
        fmt_f64(rec.components[0]),
        fmt_f64(rec.components[1]),
        fmt_f64(rec.components[2]),
        fmt_f64(rec.projected_gradient_norm),
        fmt_f64(rec.step)
    )?;
    Ok(())
}

pub fn write_diagnostics_csv<W: Write>(mut w: W, diags: &[Diagnostics]) -> Result<()> {
    writeln!(w, "t,mass,min,max,com_x,com_y")?;
    for d in diags {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            fmt_f64(d.time),
            fmt_f64(d.mass),
            fmt_f64(d.min),
            fmt_f64(d.max),
            fmt_f64(d.center_of_mass.x),
            fmt_f64(d.center_of_mass.y)
        )?;
    }
    Ok(())
}

/// One row of a force-field sample grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForceSample {
    pub time: f64,
    pub x: Point,
    pub h: Point,
    pub kelvin: Point,
}

pub fn write_force_csv<W: Write>(mut w: W, samples: &[ForceSample]) -> Result<()> {
    writeln!(w, "t,x,y,h_x,h_y,kelvin_x,kelvin_y")?;
    for s in samples {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            fmt_f64(s.time),
            fmt_f64(s.x.x),
            fmt_f64(s.x.y),
            fmt_f64(s.h.x),
            fmt_f64(s.h.y),
            fmt_f64(s.kelvin.x),
            fmt_f64(s.kelvin.y)
        )?;
    }
    Ok(())
}

/// Legacy-VTK unstructured grid with the field as point data `concentration`.
pub fn write_vtk<W: Write>(mut w: W, mesh: &TriMesh, field: &ScalarField) -> Result<()> {
    if field.values.len() != mesh.num_vertices() {
        return Err(Error::DimensionMismatch {
            what: "snapshot values",
            expected: mesh.num_vertices(),
            found: field.values.len(),
        });
    }
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "concentration t={}", fmt_f64(field.time))?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(w, "POINTS {} double", mesh.num_vertices())?;
    for p in mesh.vertices() {
        writeln!(w, "{} {} 0", fmt_f64(p.x), fmt_f64(p.y))?;
    }
    let nt = mesh.num_triangles();
    writeln!(w, "CELLS {} {}", nt, 4 * nt)?;
    for t in mesh.triangles() {
        writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?;
    }
    writeln!(w, "CELL_TYPES {nt}")?;
    for _ in 0..nt {
        writeln!(w, "5")?;
    }
    writeln!(w, "POINT_DATA {}", mesh.num_vertices())?;
    writeln!(w, "SCALARS concentration double 1")?;
    writeln!(w, "LOOKUP_TABLE default")?;
    for v in &field.values {
        writeln!(w, "{}", fmt_f64(*v))?;
    }
    Ok(())
}
