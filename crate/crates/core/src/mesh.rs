//! Structured all-quad disk meshes with a refined horizontal crack band, and the
//! plain-text mesh file format.
//!
//! Coordinates are SI meters throughout this module; the solver rescales once at setup.
//!
//! The generator lays a tensor-product grid on the square [-R, R]^2 (spacings mirrored
//! about zero, so x = 0 and y = 0 are always grid lines) and maps it onto the disk with
//!   X = x sqrt(1 - (y/R)^2 / 2),   Y = y sqrt(1 - (x/R)^2 / 2).
//! The map sends the square boundary exactly onto the circle, never stretches (its
//! jacobian determinant is 1 - (x^2+y^2)/(2 R^2) > 0 away from the four diagonal
//! corners), and preserves the mirror symmetries of the grid bitwise.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::element::{gauss_rule, ElementGeometry};
use crate::error::{CoreError, Result};
use crate::Real;

/// Conforming all-quad mesh. `boundary_nodes` is sorted and duplicate-free.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    /// Node coordinates in meters.
    pub node_coords: Vec<[Real; 2]>,
    /// Counter-clockwise quad connectivity.
    pub quads: Vec<[u32; 4]>,
    /// Nodes on the outer circle, sorted ascending.
    pub boundary_nodes: Vec<u32>,
    /// Per-element diameter (largest vertex distance) in meters; derived data, not stored
    /// in mesh files.
    pub characteristic_sizes: Vec<Real>,
}

/// Initial through-thickness crack, centered at the origin along +x.
///
/// `length` is the full tip-to-tip extent; nodes with |x| <= length/2 and
/// |y| <= half_width are seeded broken (phi = 0). The mesh generator refines a strip of
/// three half-widths either side of the axis so the seed and its diffuse halo are
/// resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrackSeed {
    pub length: Real,
    pub half_width: Real,
}

impl CrackSeed {
    pub fn none() -> Self {
        CrackSeed { length: 0.0, half_width: 0.0 }
    }

    pub fn is_active(&self) -> bool {
        self.length > 0.0 && self.half_width > 0.0
    }
}

/// Mirror a strictly increasing half-axis [0, ..., r] into a symmetric full axis.
fn mirror_axis(half: &[Real]) -> Vec<Real> {
    let mut full = Vec::with_capacity(2 * half.len() - 1);
    for &v in half.iter().skip(1).rev() {
        full.push(-v);
    }
    full.extend_from_slice(half);
    full
}

/// Half-axis node positions on [0, r]: uniform `pitch_fine` up to `fine_extent`, then
/// geometric growth (ratio 1.3) capped at `pitch_far`, rescaled so the last node lands
/// exactly on r.
fn graded_half_axis(r: Real, fine_extent: Real, pitch_fine: Real, pitch_far: Real) -> Vec<Real> {
    const RATIO: Real = 1.3;
    let mut intervals: Vec<Real> = Vec::new();
    let fine_extent = fine_extent.min(r);
    if fine_extent > 0.0 {
        let n = ((fine_extent / pitch_fine) - 1e-9).ceil().max(1.0) as usize;
        let h = fine_extent / n as Real;
        intervals.extend(std::iter::repeat(h).take(n));
    }
    let fine_n = intervals.len();
    let mut pos: Real = fine_extent;
    if pos < r {
        let mut h = if fine_n > 0 { intervals[fine_n - 1] } else { pitch_far };
        let mut grown: Vec<Real> = Vec::new();
        while pos < r {
            h = (h * RATIO).min(pitch_far);
            grown.push(h);
            pos += h;
        }
        // shrink the grown section uniformly so it ends exactly on r
        let span: Real = grown.iter().sum();
        let scale = (r - fine_extent) / span;
        intervals.extend(grown.iter().map(|h| h * scale));
    }
    let mut nodes = Vec::with_capacity(intervals.len() + 1);
    let mut acc = 0.0;
    nodes.push(0.0);
    for (i, h) in intervals.iter().enumerate() {
        acc += h;
        if i + 1 == intervals.len() {
            acc = r; // exact endpoint
        }
        nodes.push(acc);
    }
    nodes
}

/// Structured disk mesh of radius `r` with element size `h_near` inside the refined
/// crack strip and `h_far` in the far field.
///
/// Uniform meshes (no active crack) choose their pitch so the element count tracks
/// pi r^2 / h_far^2; refined meshes use `h_near` directly as the pitch so every element
/// edge inside the strip |y| <= 3 * half_width stays at or below `h_near`.
pub fn generate_disk_mesh(
    r: Real,
    crack: &CrackSeed,
    h_near: Real,
    h_far: Real,
) -> Result<Mesh> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(CoreError::Mesh(format!("radius must be positive, got {r}")));
    }
    if !(h_near > 0.0) || !(h_far > 0.0) || h_near > h_far {
        return Err(CoreError::Mesh(format!(
            "element sizes must satisfy 0 < h_near <= h_far, got h_near={h_near}, h_far={h_far}"
        )));
    }
    if h_far >= r {
        return Err(CoreError::Mesh(format!("h_far={h_far} too coarse for radius {r}")));
    }
    if crack.length < 0.0 || crack.length >= 2.0 * r {
        return Err(CoreError::Mesh(format!(
            "crack length {} must lie in [0, 2r)", crack.length
        )));
    }
    if crack.half_width < 0.0 {
        return Err(CoreError::Mesh("crack half_width must be nonnegative".into()));
    }

    let band = if crack.is_active() { 3.0 * crack.half_width } else { 0.0 };
    // The map compresses y by up to 1/sqrt(2); widen the refined grid strip so the
    // physical strip |Y| <= band stays inside it everywhere.
    let grid_band = (band * Real::sqrt(2.0) * 1.0001).min(r);
    // Uniform pitch 2h/sqrt(pi) makes the average element area h^2 on the mapped disk.
    let uniform_pitch = 2.0 * h_far / Real::sqrt(std::f64::consts::PI);

    let (x_half, y_half) = if crack.is_active() {
        let x = graded_half_axis(r, r, h_near, h_near);
        let y = graded_half_axis(r, grid_band, h_near, h_far);
        (x, y)
    } else {
        let u = graded_half_axis(r, 0.0, uniform_pitch, uniform_pitch);
        (u.clone(), u)
    };
    let xs = mirror_axis(&x_half);
    let ys = mirror_axis(&y_half);
    let nx = xs.len();
    let ny = ys.len();

    let mut node_coords = Vec::with_capacity(nx * ny);
    for &yg in &ys {
        let fy = (1.0 - 0.5 * (yg / r) * (yg / r)).sqrt();
        for &xg in &xs {
            let fx = (1.0 - 0.5 * (xg / r) * (xg / r)).sqrt();
            node_coords.push([xg * fy, yg * fx]);
        }
    }

    let idx = |i: usize, j: usize| (j * nx + i) as u32;
    let mut quads = Vec::with_capacity((nx - 1) * (ny - 1));
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            quads.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }

    let mut boundary_nodes = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            if i == 0 || i == nx - 1 || j == 0 || j == ny - 1 {
                boundary_nodes.push(idx(i, j));
            }
        }
    }
    // snap boundary nodes onto the circle (they are already there to roundoff)
    for &b in &boundary_nodes {
        let p = &mut node_coords[b as usize];
        let rr = (p[0] * p[0] + p[1] * p[1]).sqrt();
        debug_assert!((rr - r).abs() <= 1e-9 * r);
        let s = r / rr;
        p[0] *= s;
        p[1] *= s;
    }

    let characteristic_sizes = quad_diameters(&node_coords, &quads);
    let mesh = Mesh { node_coords, quads, boundary_nodes, characteristic_sizes };

    // post-conditions: admissible elements, refined strip actually refined
    let gps = gauss_rule::<Real>(2)?;
    for (e, q) in mesh.quads.iter().enumerate() {
        let geom = ElementGeometry::new([
            mesh.node_coords[q[0] as usize],
            mesh.node_coords[q[1] as usize],
            mesh.node_coords[q[2] as usize],
            mesh.node_coords[q[3] as usize],
        ]);
        for &gp in &gps {
            geom.operator_matrices(gp).map_err(|err| {
                CoreError::Mesh(format!("generated element {e} is inadmissible: {err}"))
            })?;
        }
    }
    if band > 0.0 {
        let max_edge = max_edge_in_band(&mesh, band);
        if max_edge > h_near * (1.0 + 1e-9) {
            return Err(CoreError::Mesh(format!(
                "refinement failed: edge {max_edge:.3e} exceeds h_near {h_near:.3e} in crack band"
            )));
        }
    }
    Ok(mesh)
}

fn quad_diameters(coords: &[[Real; 2]], quads: &[[u32; 4]]) -> Vec<Real> {
    quads
        .iter()
        .map(|q| {
            let mut d: Real = 0.0;
            for a in 0..4 {
                for b in a + 1..4 {
                    let pa = coords[q[a] as usize];
                    let pb = coords[q[b] as usize];
                    d = d.max(((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt());
                }
            }
            d
        })
        .collect()
}

/// Structured nx-by-ny quad mesh of the rectangle [0, w] x [0, h], node (i, j) at
/// (i*w/nx, j*h/ny). Mostly a verification-problem workhorse (patch tests, diffusion
/// oracles on the unit square).
pub fn structured_rectangle(nx: usize, ny: usize, w: Real, h: Real) -> Result<Mesh> {
    if nx == 0 || ny == 0 || !(w > 0.0) || !(h > 0.0) {
        return Err(CoreError::Mesh("rectangle mesh needs nx, ny >= 1 and positive extent".into()));
    }
    let mut node_coords = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            node_coords.push([w * i as Real / nx as Real, h * j as Real / ny as Real]);
        }
    }
    let idx = |i: usize, j: usize| (j * (nx + 1) + i) as u32;
    let mut quads = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            quads.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    let mut boundary_nodes: Vec<u32> = (0..=ny)
        .flat_map(|j| (0..=nx).map(move |i| (i, j)))
        .filter(|&(i, j)| i == 0 || j == 0 || i == nx || j == ny)
        .map(|(i, j)| idx(i, j))
        .collect();
    boundary_nodes.sort_unstable();
    let characteristic_sizes = quad_diameters(&node_coords, &quads);
    let mesh = Mesh { node_coords, quads, boundary_nodes, characteristic_sizes };
    validate_mesh(&mesh)?;
    Ok(mesh)
}

/// Longest element edge among elements intersecting the strip |y| <= band.
pub fn max_edge_in_band(mesh: &Mesh, band: Real) -> Real {
    let mut worst: Real = 0.0;
    for q in &mesh.quads {
        let pts: Vec<[Real; 2]> = q.iter().map(|&n| mesh.node_coords[n as usize]).collect();
        if pts.iter().all(|p| p[1].abs() > band) {
            continue;
        }
        for a in 0..4 {
            let b = (a + 1) % 4;
            let len = ((pts[a][0] - pts[b][0]).powi(2) + (pts[a][1] - pts[b][1]).powi(2)).sqrt();
            worst = worst.max(len);
        }
    }
    worst
}

/// Total mesh area by the shoelace formula (positive for CCW quads).
pub fn mesh_area(mesh: &Mesh) -> Real {
    mesh.quads.iter().map(|q| quad_area(mesh, q)).sum()
}

fn quad_area(mesh: &Mesh, q: &[u32; 4]) -> Real {
    let mut a = 0.0;
    for k in 0..4 {
        let p = mesh.node_coords[q[k] as usize];
        let n = mesh.node_coords[q[(k + 1) % 4] as usize];
        a += p[0] * n[1] - n[0] * p[1];
    }
    0.5 * a
}

/// Structural validation shared by the loader and by consumers of hand-built meshes.
pub fn validate_mesh(mesh: &Mesh) -> Result<()> {
    let n = mesh.node_coords.len();
    if mesh.quads.is_empty() {
        return Err(CoreError::Mesh("mesh has no elements".into()));
    }
    for (i, p) in mesh.node_coords.iter().enumerate() {
        if !p[0].is_finite() || !p[1].is_finite() {
            return Err(CoreError::Mesh(format!("node {i} has non-finite coordinates")));
        }
    }
    for (e, q) in mesh.quads.iter().enumerate() {
        for &v in q {
            if v as usize >= n {
                return Err(CoreError::Mesh(format!("element {e} references node {v} out of range")));
            }
        }
        if quad_area(mesh, q) <= 0.0 {
            return Err(CoreError::Mesh(format!("element {e} has non-positive area")));
        }
    }
    for &b in &mesh.boundary_nodes {
        if b as usize >= n {
            return Err(CoreError::Mesh(format!("boundary node {b} out of range")));
        }
    }
    if mesh.boundary_nodes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CoreError::Mesh("boundary node list must be sorted and unique".into()));
    }
    Ok(())
}

const MESH_MAGIC: &str = "PFE-MESH 1";

/// Write the plain-text mesh format:
/// magic line, node count, one `x y` line per node (full-precision scientific), element
/// count, one `n0 n1 n2 n3` line per element, `BOUNDARY`, one node id per line. LF line
/// endings.
pub fn save_mesh(mesh: &Mesh, path: &Path) -> Result<()> {
    validate_mesh(mesh)?;
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{MESH_MAGIC}")?;
    writeln!(w, "{}", mesh.node_coords.len())?;
    for p in &mesh.node_coords {
        writeln!(w, "{:e} {:e}", p[0], p[1])?;
    }
    writeln!(w, "{}", mesh.quads.len())?;
    for q in &mesh.quads {
        writeln!(w, "{} {} {} {}", q[0], q[1], q[2], q[3])?;
    }
    writeln!(w, "BOUNDARY")?;
    for b in &mesh.boundary_nodes {
        writeln!(w, "{b}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_mesh(path: &Path) -> Result<Mesh> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let mut next_line = |expect: &str| -> Result<(usize, String)> {
        loop {
            match lines.next() {
                Some((i, Ok(l))) => {
                    if !l.trim().is_empty() {
                        return Ok((i + 1, l));
                    }
                }
                Some((i, Err(e))) => {
                    return Err(CoreError::MeshParse { line: i + 1, msg: e.to_string() })
                }
                None => {
                    return Err(CoreError::MeshParse {
                        line: 0,
                        msg: format!("unexpected end of file, expected {expect}"),
                    })
                }
            }
        }
    };

    let (ln, magic) = next_line("magic")?;
    if magic.trim() != MESH_MAGIC {
        return Err(CoreError::MeshParse { line: ln, msg: format!("bad magic {magic:?}") });
    }
    let (ln, nstr) = next_line("node count")?;
    let n_nodes: usize = nstr
        .trim()
        .parse()
        .map_err(|e| CoreError::MeshParse { line: ln, msg: format!("node count: {e}") })?;
    let mut node_coords = Vec::with_capacity(n_nodes);
    for _ in 0..n_nodes {
        let (ln, l) = next_line("node coordinates")?;
        let mut it = l.split_whitespace();
        let parse = |tok: Option<&str>, ln: usize| -> Result<Real> {
            tok.ok_or_else(|| CoreError::MeshParse { line: ln, msg: "missing coordinate".into() })?
                .parse::<Real>()
                .map_err(|e| CoreError::MeshParse { line: ln, msg: format!("coordinate: {e}") })
        };
        let x = parse(it.next(), ln)?;
        let y = parse(it.next(), ln)?;
        if it.next().is_some() {
            return Err(CoreError::MeshParse { line: ln, msg: "trailing tokens on node line".into() });
        }
        node_coords.push([x, y]);
    }
    let (ln, estr) = next_line("element count")?;
    let n_elems: usize = estr
        .trim()
        .parse()
        .map_err(|e| CoreError::MeshParse { line: ln, msg: format!("element count: {e}") })?;
    let mut quads = Vec::with_capacity(n_elems);
    for _ in 0..n_elems {
        let (ln, l) = next_line("element connectivity")?;
        let ids: Vec<u32> = l
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|e| CoreError::MeshParse { line: ln, msg: format!("node id: {e}") })
            })
            .collect::<Result<_>>()?;
        if ids.len() != 4 {
            return Err(CoreError::MeshParse {
                line: ln,
                msg: format!("expected 4 node ids, got {}", ids.len()),
            });
        }
        quads.push([ids[0], ids[1], ids[2], ids[3]]);
    }
    let (ln, bmark) = next_line("BOUNDARY marker")?;
    if bmark.trim() != "BOUNDARY" {
        return Err(CoreError::MeshParse { line: ln, msg: format!("expected BOUNDARY, got {bmark:?}") });
    }
    let mut boundary_nodes = Vec::new();
    for (i, l) in lines {
        let l = l.map_err(|e| CoreError::MeshParse { line: i + 1, msg: e.to_string() })?;
        for tok in l.split_whitespace() {
            let id: u32 = tok
                .parse()
                .map_err(|e| CoreError::MeshParse { line: i + 1, msg: format!("boundary id: {e}") })?;
            boundary_nodes.push(id);
        }
    }
    let characteristic_sizes = quad_diameters(&node_coords, &quads);
    let mesh = Mesh { node_coords, quads, boundary_nodes, characteristic_sizes };
    validate_mesh(&mesh)?;
    Ok(mesh)
}
