//! Conforming triangulations and structured generators.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::magnetics::Point;

/// Mesh edge with its (one or two) adjacent triangles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub vertices: [usize; 2],
    pub triangles: [usize; 2],
    /// Number of valid entries in `triangles` (1 on the boundary).
    pub count: u8,
}

impl Edge {
    pub fn is_boundary(&self) -> bool {
        self.count == 1
    }
}

/// Two-dimensional conforming triangulation.
#[derive(Clone, Debug)]
pub struct TriMesh {
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    boundary: Vec<bool>,
    edges: Vec<Edge>,
}

impl TriMesh {
    /// Build a mesh, orienting every triangle counter-clockwise and marking
    /// the vertices of single-triangle edges as boundary vertices.
    pub fn new(vertices: Vec<Point>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let mut mesh = Self::build(vertices, triangles)?;
        mesh.boundary = vec![false; mesh.vertices.len()];
        for e in &mesh.edges {
            if e.is_boundary() {
                mesh.boundary[e.vertices[0]] = true;
                mesh.boundary[e.vertices[1]] = true;
            }
        }
        Ok(mesh)
    }

    /// Build a mesh with caller-supplied boundary markers.
    pub fn with_boundary(
        vertices: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        boundary_vertices: &[usize],
    ) -> Result<Self> {
        let mut mesh = Self::build(vertices, triangles)?;
        mesh.boundary = vec![false; mesh.vertices.len()];
        for &b in boundary_vertices {
            if b >= mesh.vertices.len() {
                return Err(Error::InvalidConfig(format!("boundary marker {b} out of range")));
            }
            mesh.boundary[b] = true;
        }
        Ok(mesh)
    }

    fn build(vertices: Vec<Point>, mut triangles: Vec<[usize; 3]>) -> Result<Self> {
        let nv = vertices.len();
        let scale = vertices
            .iter()
            .fold(0.0_f64, |m, p| m.max(p.x.abs()).max(p.y.abs()))
            .max(1e-300);
        for (t, tri) in triangles.iter_mut().enumerate() {
            if tri.iter().any(|&v| v >= nv) {
                return Err(Error::InvalidConfig(format!(
                    "triangle {t} references a missing vertex"
                )));
            }
            let a = signed_area(&vertices[tri[0]], &vertices[tri[1]], &vertices[tri[2]]);
            if a.abs() <= 1e-14 * scale * scale {
                return Err(Error::DegenerateTriangle { index: t, area: a });
            }
            if a < 0.0 {
                tri.swap(1, 2);
            }
        }
        let mut index: HashMap<(usize, usize), usize> = HashMap::new();
        let mut edges: Vec<Edge> = Vec::new();
        for (t, tri) in triangles.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                match index.get(&key) {
                    Some(&e) => {
                        let edge = &mut edges[e];
                        if edge.count >= 2 {
                            return Err(Error::InvalidConfig(format!(
                                "edge {key:?} is shared by more than two triangles"
                            )));
                        }
                        edge.triangles[1] = t;
                        edge.count = 2;
                    }
                    None => {
                        index.insert(key, edges.len());
                        edges.push(Edge {
                            vertices: [key.0, key.1],
                            triangles: [t, usize::MAX],
                            count: 1,
                        });
                    }
                }
            }
        }
        Ok(Self {
            vertices,
            triangles,
            boundary: Vec::new(),
            edges,
        })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn is_boundary(&self, v: usize) -> bool {
        self.boundary[v]
    }

    pub fn boundary_markers(&self) -> &[bool] {
        &self.boundary
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn triangle_points(&self, t: usize) -> [Point; 3] {
        let tri = self.triangles[t];
        [self.vertices[tri[0]], self.vertices[tri[1]], self.vertices[tri[2]]]
    }

    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_points(t);
        signed_area(&a, &b, &c)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.num_triangles()).map(|t| self.area(t)).sum()
    }

    /// Largest edge length.
    pub fn max_edge_length(&self) -> f64 {
        self.edges
            .iter()
            .map(|e| (self.vertices[e.vertices[0]] - self.vertices[e.vertices[1]]).norm())
            .fold(0.0, f64::max)
    }

    /// Whether every interior angle is at most 90 degrees (up to round-off).
    pub fn is_nonobtuse(&self) -> bool {
        (0..self.num_triangles()).all(|t| {
            let p = self.triangle_points(t);
            (0..3).all(|k| {
                let a = p[(k + 1) % 3] - p[k];
                let b = p[(k + 2) % 3] - p[k];
                a.dot(&b) >= -1e-12 * a.norm() * b.norm()
            })
        })
    }

    /// Write the plain-text mesh format (see the README for the layout).
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", self.vertices.len())?;
        for p in &self.vertices {
            writeln!(w, "{:.17e} {:.17e}", p.x, p.y)?;
        }
        writeln!(w, "{}", self.triangles.len())?;
        for t in &self.triangles {
            writeln!(w, "{} {} {}", t[0], t[1], t[2])?;
        }
        let marked: Vec<String> = (0..self.vertices.len())
            .filter(|&v| self.boundary[v])
            .map(|v| v.to_string())
            .collect();
        write!(w, "{}", marked.len())?;
        for m in &marked {
            write!(w, " {m}")?;
        }
        writeln!(w)?;
        Ok(())
    }

    /// Read the plain-text mesh format.
    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true));
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((n, Ok(l))) => Ok((n, l)),
                Some((_, Err(e))) => Err(e.into()),
                None => Err(Error::MeshFormat {
                    line: 0,
                    message: format!("unexpected end of file, expected {what}"),
                }),
            }
        };
        fn parse<T: std::str::FromStr>(line: usize, tok: &str) -> Result<T> {
            tok.parse().map_err(|_| Error::MeshFormat {
                line,
                message: format!("cannot parse {tok:?}"),
            })
        }
        let (ln, l) = next("vertex count")?;
        let nv: usize = parse(ln, l.trim())?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (ln, l) = next("vertex")?;
            let tok: Vec<&str> = l.split_whitespace().collect();
            if tok.len() != 2 {
                return Err(Error::MeshFormat {
                    line: ln,
                    message: "expected two coordinates".into(),
                });
            }
            vertices.push(Point::new(parse(ln, tok[0])?, parse(ln, tok[1])?));
        }
        let (ln, l) = next("triangle count")?;
        let nt: usize = parse(ln, l.trim())?;
        let mut triangles = Vec::with_capacity(nt);
        for _ in 0..nt {
            let (ln, l) = next("triangle")?;
            let tok: Vec<&str> = l.split_whitespace().collect();
            if tok.len() != 3 {
                return Err(Error::MeshFormat {
                    line: ln,
                    message: "expected three vertex indices".into(),
                });
            }
            triangles.push([parse(ln, tok[0])?, parse(ln, tok[1])?, parse(ln, tok[2])?]);
        }
        let (ln, l) = next("boundary marker line")?;
        let tok: Vec<&str> = l.split_whitespace().collect();
        let nb: usize = parse(ln, tok.first().copied().unwrap_or(""))?;
        if tok.len() != nb + 1 {
            return Err(Error::MeshFormat {
                line: ln,
                message: format!("expected {nb} boundary indices, found {}", tok.len() - 1),
            });
        }
        let marks = tok[1..].iter().map(|t| parse(ln, t)).collect::<Result<Vec<usize>>>()?;
        Self::with_boundary(vertices, triangles, &marks)
    }
}

pub fn signed_area(a: &Point, b: &Point, c: &Point) -> f64 {
    0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y))
}

/// Geometry of a computational domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainSpec {
    Disk {
        center: [f64; 2],
        radius: f64,
    },
    Rectangle {
        min: [f64; 2],
        max: [f64; 2],
    },
    /// `[-width/2, width/2] x [-height/2, height/2]` rotated counter-clockwise
    /// by `angle` and moved to `center`.
    RotatedRect {
        #[serde(default)]
        center: [f64; 2],
        width: f64,
        height: f64,
        angle: f64,
    },
    /// `[-half_width, half_width]^2` minus the rectangle `slot_min..slot_max`.
    SquareMinusSlot {
        half_width: f64,
        slot_min: [f64; 2],
        slot_max: [f64; 2],
    },
}

impl DomainSpec {
    /// Exact area of the continuous domain.
    pub fn area(&self) -> f64 {
        match *self {
            DomainSpec::Disk { radius, .. } => std::f64::consts::PI * radius * radius,
            DomainSpec::Rectangle { min, max } => (max[0] - min[0]) * (max[1] - min[1]),
            DomainSpec::RotatedRect { width, height, .. } => width * height,
            DomainSpec::SquareMinusSlot {
                half_width,
                slot_min,
                slot_max,
            } => 4.0 * half_width * half_width - (slot_max[0] - slot_min[0]) * (slot_max[1] - slot_min[1]),
        }
    }
}

/// Structured mesh of `spec` with target mesh size `h`.
pub fn generate_mesh(spec: &DomainSpec, h: f64) -> Result<TriMesh> {
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("mesh size must be positive, got {h}")));
    }
    match *spec {
        DomainSpec::Disk { center, radius } => {
            if !(radius > 0.0) {
                return Err(Error::InvalidConfig("disk radius must be positive".into()));
            }
            let levels = ((radius / h).log2().ceil().max(0.0) as u32 + 1).max(1);
            disk_triangulation(Point::from(center), radius, levels)
        }
        DomainSpec::Rectangle { min, max } => {
            let (w, ht) = (max[0] - min[0], max[1] - min[1]);
            if !(w > 0.0 && ht > 0.0) {
                return Err(Error::InvalidConfig("empty rectangle".into()));
            }
            let nx = cells(w, h);
            let ny = cells(ht, h);
            let (v, t) = lattice(Point::from(min), w / nx as f64, ht / ny as f64, nx, ny, |_, _| true);
            TriMesh::new(v, t)
        }
        DomainSpec::RotatedRect {
            center,
            width,
            height,
            angle,
        } => {
            if !(width > 0.0 && height > 0.0) {
                return Err(Error::InvalidConfig("empty rectangle".into()));
            }
            let nx = cells(width, h);
            let ny = cells(height, h);
            let (mut v, t) = lattice(
                Point::new(-0.5 * width, -0.5 * height),
                width / nx as f64,
                height / ny as f64,
                nx,
                ny,
                |_, _| true,
            );
            let rot = nalgebra::Rotation2::new(angle);
            let c = Point::from(center);
            for p in &mut v {
                *p = rot * *p + c;
            }
            TriMesh::new(v, t)
        }
        DomainSpec::SquareMinusSlot {
            half_width,
            slot_min,
            slot_max,
        } => {
            let a = half_width;
            let contained = slot_min[0] >= -a
                && slot_min[1] >= -a
                && slot_max[0] <= a
                && slot_max[1] <= a
                && slot_min[0] < slot_max[0]
                && slot_min[1] < slot_max[1];
            if !(a > 0.0) || !contained {
                return Err(Error::InvalidConfig("slot is not contained in the outer square".into()));
            }
            // smallest lattice with spacing <= h on which the slot edges fall
            let mut n = cells(2.0 * a, h);
            let on_lattice = |n: usize, x: f64| {
                let s = (x + a) / (2.0 * a) * n as f64;
                (s - s.round()).abs() < 1e-8
            };
            let limit = n * 64 + 64;
            while !(on_lattice(n, slot_min[0])
                && on_lattice(n, slot_max[0])
                && on_lattice(n, slot_min[1])
                && on_lattice(n, slot_max[1]))
            {
                n += 1;
                if n > limit {
                    return Err(Error::InvalidConfig(
                        "slot corners do not align with any structured lattice near the requested size".into(),
                    ));
                }
            }
            let s = 2.0 * a / n as f64;
            let keep = |i: usize, j: usize| {
                let cx = -a + (i as f64 + 0.5) * s;
                let cy = -a + (j as f64 + 0.5) * s;
                !(cx > slot_min[0] && cx < slot_max[0] && cy > slot_min[1] && cy < slot_max[1])
            };
            let (v, t) = lattice(Point::new(-a, -a), s, s, n, n, keep);
            let (v, t) = compact(v, t);
            TriMesh::new(v, t)
        }
    }
}

fn cells(len: f64, h: f64) -> usize {
    ((len / h) - 1e-9).ceil().max(1.0) as usize
}

/// Right-triangle lattice; cell `(i, j)` is kept when `keep(i, j)`.
fn lattice(
    origin: Point,
    dx: f64,
    dy: f64,
    nx: usize,
    ny: usize,
    keep: impl Fn(usize, usize) -> bool,
) -> (Vec<Point>, Vec<[usize; 3]>) {
    let mut v = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            v.push(origin + Point::new(i as f64 * dx, j as f64 * dy));
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut t = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            if !keep(i, j) {
                continue;
            }
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            t.push([a, b, c]);
            t.push([a, c, d]);
        }
    }
    (v, t)
}

/// Drop unreferenced vertices and renumber.
fn compact(v: Vec<Point>, t: Vec<[usize; 3]>) -> (Vec<Point>, Vec<[usize; 3]>) {
    let mut map = vec![usize::MAX; v.len()];
    let mut out = Vec::new();
    for tri in &t {
        for &k in tri {
            if map[k] == usize::MAX {
                map[k] = out.len();
                out.push(v[k]);
            }
        }
    }
    let t = t
        .into_iter()
        .map(|tri| [map[tri[0]], map[tri[1]], map[tri[2]]])
        .collect();
    (out, t)
}

/// Twelve-sector fan refined `levels - 1` times by edge bisection, with new
/// boundary vertices projected radially onto the circle.
///
/// Level `L` has `12 * 4^(L-1)` triangles.
pub fn disk_triangulation(center: Point, radius: f64, levels: u32) -> Result<TriMesh> {
    const SECTORS: usize = 12;
    let mut v = vec![Point::zeros()];
    let mut on_circle = vec![false];
    for k in 0..SECTORS {
        let a = 2.0 * std::f64::consts::PI * k as f64 / SECTORS as f64;
        v.push(Point::new(a.cos(), a.sin()));
        on_circle.push(true);
    }
    let mut t: Vec<[usize; 3]> = (0..SECTORS).map(|k| [0, 1 + k, 1 + (k + 1) % SECTORS]).collect();
    for _ in 1..levels.max(1) {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, v: &mut Vec<Point>, oc: &mut Vec<bool>| {
            let key = (a.min(b), a.max(b));
            *mid.entry(key).or_insert_with(|| {
                let mut p = (v[a] + v[b]) * 0.5;
                let boundary = oc[a] && oc[b];
                if boundary {
                    p /= p.norm();
                }
                v.push(p);
                oc.push(boundary);
                v.len() - 1
            })
        };
        let mut next = Vec::with_capacity(4 * t.len());
        for &[a, b, c] in &t {
            let ab = midpoint(a, b, &mut v, &mut on_circle);
            let bc = midpoint(b, c, &mut v, &mut on_circle);
            let ca = midpoint(c, a, &mut v, &mut on_circle);
            next.push([a, ab, ca]);
            next.push([ab, b, bc]);
            next.push([ca, bc, c]);
            next.push([ab, bc, ca]);
        }
        t = next;
    }
    for p in &mut v {
        *p = center + *p * radius;
    }
    TriMesh::new(v, t)
}
