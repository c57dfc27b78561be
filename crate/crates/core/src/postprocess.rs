//! Crack metrology, derived fields, and on-disk exports (legacy ASCII VTK for field
//! maps, CSV for per-step traces). Everything here is a pure reader of snapshots; all
//! values entering and leaving are SI.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::mesh::Mesh;
use crate::Real;

/// Extent of the broken region (phi below `threshold`), measured along the crack axis
/// (length) and across it at x = 0 (thickness).
#[derive(Debug, Clone, Copy)]
pub struct CrackMetrics {
    pub length: Real,
    pub thickness: Real,
    pub threshold: Real,
}

pub const DEFAULT_CRACK_THRESHOLD: Real = 0.5;

/// Measure the crack by walking the mesh's axis grid lines and locating the
/// phi = threshold crossings with sub-element linear interpolation. A mesh without
/// nodes on an axis line cannot be measured and is reported as an error; a mesh with no
/// broken region measures zero.
pub fn crack_metrics(mesh: &Mesh, phi: &[Real], threshold: Real) -> Result<CrackMetrics> {
    if phi.len() != mesh.node_coords.len() {
        return Err(CoreError::Mesh("phi field length does not match node count".into()));
    }
    let length = line_extent(mesh, phi, threshold, 0)?;
    let thickness = line_extent(mesh, phi, threshold, 1)?;
    Ok(CrackMetrics { length, thickness, threshold })
}

/// Extent of the sub-threshold region along coordinate `axis` on the grid line where the
/// other coordinate is zero.
fn line_extent(mesh: &Mesh, phi: &[Real], threshold: Real, axis: usize) -> Result<Real> {
    let other = 1 - axis;
    let span = mesh
        .node_coords
        .iter()
        .flat_map(|p| p.iter())
        .fold(0.0 as Real, |m, &v| m.max(v.abs()));
    let tol = 1e-9 * span;
    let mut line: Vec<(Real, Real)> = mesh
        .node_coords
        .iter()
        .enumerate()
        .filter(|(_, p)| p[other].abs() <= tol)
        .map(|(i, p)| (p[axis], phi[i]))
        .collect();
    if line.len() < 2 {
        return Err(CoreError::Mesh(format!(
            "mesh has no grid line along axis {axis}; crack metrics need one"
        )));
    }
    line.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut lo = Real::INFINITY;
    let mut hi = Real::NEG_INFINITY;
    let mut include = |s: Real| {
        lo = lo.min(s);
        hi = hi.max(s);
    };
    for w in line.windows(2) {
        let (s0, p0) = w[0];
        let (s1, p1) = w[1];
        if p0 < threshold {
            include(s0);
        }
        if (p0 < threshold) != (p1 < threshold) && p1 != p0 {
            include(s0 + (threshold - p0) / (p1 - p0) * (s1 - s0));
        }
    }
    if let Some(&(s, p)) = line.last() {
        if p < threshold {
            include(s);
        }
    }
    Ok(if hi >= lo { hi - lo } else { 0.0 })
}

/// Deformed bounding-box extents of the boundary.
#[derive(Debug, Clone, Copy)]
pub struct ExpansionLengths {
    pub l_x: Real,
    pub l_y: Real,
}

pub fn expansion_lengths(mesh: &Mesh, u: &[[Real; 2]]) -> ExpansionLengths {
    let mut min = [Real::INFINITY; 2];
    let mut max = [Real::NEG_INFINITY; 2];
    for &b in &mesh.boundary_nodes {
        let p = mesh.node_coords[b as usize];
        let d = u[b as usize];
        for k in 0..2 {
            let v = p[k] + d[k];
            min[k] = min[k].min(v);
            max[k] = max[k].max(v);
        }
    }
    ExpansionLengths { l_x: max[0] - min[0], l_y: max[1] - min[1] }
}

/// One exported field state, SI units throughout.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub t: Real,
    /// Displacements, m.
    pub u: Vec<[Real; 2]>,
    /// Concentration, mol/m^3.
    pub c: Vec<Real>,
    pub phi: Vec<Real>,
    /// Degraded hydrostatic stress g(phi) sigma_p, Pa, nodal-averaged.
    pub sigma_p_degraded: Vec<Real>,
}

/// One per-step trace row, SI units; `residual` is the final Newton norm in the solver's
/// internal scaling (a convergence diagnostic, not a physical quantity).
#[derive(Debug, Clone, Copy)]
pub struct TraceRecord {
    pub t: Real,
    pub newton_iters: usize,
    pub residual: Real,
    pub crack_length: Real,
    pub crack_thickness: Real,
    pub total_li: Real,
    pub sigma_p_min: Real,
    pub sigma_p_max: Real,
}

pub const TRACE_HEADER: &str =
    "t,newton_iters,residual,crack_length,crack_thickness,total_li,sigma_p_min,sigma_p_max";

impl TraceRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{:e},{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.t,
            self.newton_iters,
            self.residual,
            self.crack_length,
            self.crack_thickness,
            self.total_li,
            self.sigma_p_min,
            self.sigma_p_max
        )
    }
}

/// Write a whole trace as CSV (header always present, LF-terminated rows, full double
/// precision).
pub fn export_trace(records: &[TraceRecord], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_with_path(e, path))
}

/// Write one snapshot as a legacy ASCII VTK unstructured grid: POINTS, quad CELLS,
/// POINT_DATA with scalars c / phi / sigma_p_degraded and the displacement VECTORS u.
pub fn export_fields(mesh: &Mesh, snap: &Snapshot, path: &Path) -> Result<()> {
    let n = mesh.node_coords.len();
    if snap.c.len() != n || snap.phi.len() != n || snap.u.len() != n || snap.sigma_p_degraded.len() != n
    {
        return Err(CoreError::Mesh("snapshot field lengths do not match node count".into()));
    }
    let m = mesh.quads.len();
    let mut s = String::with_capacity(80 * n);
    s.push_str("# vtk DataFile Version 3.0\n");
    let _ = writeln!(s, "electrode fields at t={:e} s", snap.t);
    s.push_str("ASCII\nDATASET UNSTRUCTURED_GRID\n");
    let _ = writeln!(s, "POINTS {n} double");
    for p in &mesh.node_coords {
        let _ = writeln!(s, "{:e} {:e} 0e0", p[0], p[1]);
    }
    let _ = writeln!(s, "CELLS {m} {}", 5 * m);
    for q in &mesh.quads {
        let _ = writeln!(s, "4 {} {} {} {}", q[0], q[1], q[2], q[3]);
    }
    let _ = writeln!(s, "CELL_TYPES {m}");
    for _ in 0..m {
        s.push_str("9\n");
    }
    let _ = writeln!(s, "POINT_DATA {n}");
    for (name, field) in [
        ("c", &snap.c),
        ("phi", &snap.phi),
        ("sigma_p_degraded", &snap.sigma_p_degraded),
    ] {
        let _ = writeln!(s, "SCALARS {name} double 1");
        s.push_str("LOOKUP_TABLE default\n");
        for v in field.iter() {
            let _ = writeln!(s, "{v:e}");
        }
    }
    s.push_str("VECTORS u double\n");
    for d in &snap.u {
        let _ = writeln!(s, "{:e} {:e} 0e0", d[0], d[1]);
    }
    std::fs::write(path, s).map_err(|e| io_with_path(e, path))
}

fn io_with_path(e: std::io::Error, path: &Path) -> CoreError {
    CoreError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Minimal reader for the VTK files `export_fields` writes (not a general VTK parser):
/// returns the points, the named scalar fields, and the `u` vectors.
pub fn read_own_vtk(path: &Path) -> Result<(Vec<[Real; 2]>, Vec<(String, Vec<Real>)>, Vec<[Real; 2]>)> {
    let text = std::fs::read_to_string(path).map_err(|e| io_with_path(e, path))?;
    let mut tokens = text.split_whitespace().peekable();
    let mut points = Vec::new();
    let mut scalars: Vec<(String, Vec<Real>)> = Vec::new();
    let mut vectors = Vec::new();
    let mut n_points = 0usize;
    let bad = |what: &str| CoreError::Mesh(format!("unreadable VTK ({what})"));
    while let Some(tok) = tokens.next() {
        match tok {
            "POINTS" => {
                n_points = tokens.next().ok_or_else(|| bad("POINTS count"))?.parse().map_err(|_| bad("POINTS count"))?;
                tokens.next(); // dtype
                for _ in 0..n_points {
                    let x: Real = tokens.next().ok_or_else(|| bad("point"))?.parse().map_err(|_| bad("point"))?;
                    let y: Real = tokens.next().ok_or_else(|| bad("point"))?.parse().map_err(|_| bad("point"))?;
                    tokens.next(); // z
                    points.push([x, y]);
                }
            }
            "SCALARS" => {
                let name = tokens.next().ok_or_else(|| bad("SCALARS name"))?.to_string();
                tokens.next(); // dtype
                tokens.next(); // components
                tokens.next(); // LOOKUP_TABLE
                tokens.next(); // default
                let mut field = Vec::with_capacity(n_points);
                for _ in 0..n_points {
                    field.push(
                        tokens.next().ok_or_else(|| bad("scalar"))?.parse().map_err(|_| bad("scalar"))?,
                    );
                }
                scalars.push((name, field));
            }
            "VECTORS" => {
                tokens.next(); // name
                tokens.next(); // dtype
                for _ in 0..n_points {
                    let x: Real = tokens.next().ok_or_else(|| bad("vector"))?.parse().map_err(|_| bad("vector"))?;
                    let y: Real = tokens.next().ok_or_else(|| bad("vector"))?.parse().map_err(|_| bad("vector"))?;
                    tokens.next(); // z
                    vectors.push([x, y]);
                }
            }
            _ => {}
        }
    }
    Ok((points, scalars, vectors))
}
