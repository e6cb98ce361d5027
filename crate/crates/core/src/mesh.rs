//! Closed triangle meshes and their harmonic maps onto the unit sphere.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geom::{corner_angle, corner_cot, triangle_area, Vec3};

/// Triangle mesh with counter-clockwise faces seen from outside.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Self {
        TriMesh { vertices, faces }
    }

    pub fn face_points(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Signed enclosed volume; positive for outward orientation.
    pub fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|&[a, b, c]| {
                self.vertices[a].dot(self.vertices[b].cross(self.vertices[c]))
            })
            .sum::<f64>()
            / 6.0
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.face_points(f);
                triangle_area(a, b, c)
            })
            .sum()
    }

    pub fn centroid(&self) -> Vec3 {
        let sum = self.vertices.iter().fold(Vec3::ZERO, |acc, &v| acc + v);
        sum / self.vertices.len().max(1) as f64
    }

    /// Same surface with every face reversed.
    pub fn flipped(&self) -> TriMesh {
        TriMesh {
            vertices: self.vertices.clone(),
            faces: self.faces.iter().map(|&[a, b, c]| [a, c, b]).collect(),
        }
    }

    /// Unique undirected edges as `(min, max)` pairs, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self
            .faces
            .iter()
            .flat_map(|&[a, b, c]| [(a, b), (b, c), (c, a)])
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    /// Sorted neighbour lists per vertex.
    pub fn vertex_neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![Vec::new(); self.vertices.len()];
        for (a, b) in self.edges() {
            nb[a].push(b);
            nb[b].push(a);
        }
        for n in &mut nb {
            n.sort_unstable();
        }
        nb
    }

    pub fn max_edge_length(&self) -> f64 {
        self.edges()
            .iter()
            .map(|&(a, b)| self.vertices[a].distance(self.vertices[b]))
            .fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.vertices.len() * 48 + self.faces.len() * 24);
        write_polys(&mut s, &self.vertices, self.faces.iter().map(|f| &f[..]));
        s
    }

    pub fn from_text(text: &str) -> Result<TriMesh> {
        let (vertices, polys) = parse_polys(text, &[3])?;
        let faces = polys.into_iter().map(|p| [p[0], p[1], p[2]]).collect();
        Ok(TriMesh { vertices, faces })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_text())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<TriMesh> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TriMesh::from_text(&text)
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Writes `v x y z` and 1-based `f i j k ...` records. Coordinates use the
/// shortest representation that round-trips exactly.
pub(crate) fn write_polys<'a>(
    out: &mut String,
    vertices: &[Vec3],
    polys: impl Iterator<Item = &'a [usize]>,
) {
    use std::fmt::Write as _;
    for v in vertices {
        let _ = writeln!(out, "v {:?} {:?} {:?}", v.x, v.y, v.z);
    }
    for p in polys {
        out.push('f');
        for &i in p {
            let _ = write!(out, " {}", i + 1);
        }
        out.push('\n');
    }
}

/// Parses the text mesh format. `arities` lists the accepted face sizes.
pub(crate) fn parse_polys(text: &str, arities: &[usize]) -> Result<(Vec<Vec3>, Vec<Vec<usize>>)> {
    let mut vertices = Vec::new();
    let mut polys = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let tag = it.next().unwrap_or_default();
        let perr = |message: String| Error::Parse {
            line: ln + 1,
            message,
        };
        match tag {
            "v" => {
                let xs: Vec<f64> = it
                    .map(|t| t.parse::<f64>().map_err(|e| perr(format!("bad coordinate {t:?}: {e}"))))
                    .collect::<Result<_>>()?;
                if xs.len() != 3 {
                    return Err(perr(format!("vertex needs 3 coordinates, got {}", xs.len())));
                }
                vertices.push(Vec3::new(xs[0], xs[1], xs[2]));
            }
            "f" => {
                let idx: Vec<usize> = it
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or(t);
                        match head.parse::<usize>() {
                            Ok(i) if i >= 1 => Ok(i - 1),
                            _ => Err(perr(format!("bad face index {t:?}"))),
                        }
                    })
                    .collect::<Result<_>>()?;
                if !arities.contains(&idx.len()) {
                    return Err(perr(format!(
                        "face with {} vertices not accepted (expected {:?})",
                        idx.len(),
                        arities
                    )));
                }
                polys.push(idx);
            }
            _ => return Err(perr(format!("unknown record {tag:?}"))),
        }
    }
    for (n, p) in polys.iter().enumerate() {
        if let Some(&bad) = p.iter().find(|&&i| i >= vertices.len()) {
            return Err(Error::Parse {
                line: 0,
                message: format!(
                    "face {n} references vertex {} but mesh has {} vertices",
                    bad + 1,
                    vertices.len()
                ),
            });
        }
    }
    Ok((vertices, polys))
}

/// Subdivided icosahedron on the unit sphere; `10 * 4^level + 2` vertices.
pub fn icosphere(level: u32) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalized())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *mid.entry(key).or_insert_with(|| {
                verts.push((verts[a] + verts[b]).normalized());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    TriMesh { vertices, faces }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    IndexOutOfRange { face: usize, index: usize },
    RepeatedVertex { face: usize },
    BoundaryEdge { a: usize, b: usize },
    NonManifoldEdge { a: usize, b: usize, faces: usize },
    InconsistentOrientation { a: usize, b: usize },
    Disconnected { components: usize },
    EulerCharacteristic { chi: i64 },
    InwardOrientation { signed_volume: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::IndexOutOfRange { face, index } => {
                write!(f, "index out of range: face {face} references vertex {index}")
            }
            Violation::RepeatedVertex { face } => write!(f, "repeated vertex in face {face}"),
            Violation::BoundaryEdge { a, b } => write!(f, "boundary edge ({a}, {b})"),
            Violation::NonManifoldEdge { a, b, faces } => {
                write!(f, "non-manifold edge ({a}, {b}) shared by {faces} faces")
            }
            Violation::InconsistentOrientation { a, b } => {
                write!(f, "inconsistent orientation across edge ({a}, {b})")
            }
            Violation::Disconnected { components } => {
                write!(f, "disconnected: {components} components")
            }
            Violation::EulerCharacteristic { chi } => {
                write!(f, "euler characteristic {chi} != 2")
            }
            Violation::InwardOrientation { signed_volume } => {
                write!(f, "inward orientation: signed volume {signed_volume}")
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub vertices: usize,
    pub edges: usize,
    pub faces: usize,
    pub euler: i64,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn summary(&self) -> String {
        if self.violations.is_empty() {
            return "ok".into();
        }
        let mut parts: Vec<String> = self.violations.iter().take(5).map(|v| v.to_string()).collect();
        if self.violations.len() > 5 {
            parts.push(format!("... {} more", self.violations.len() - 5));
        }
        parts.join("; ")
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Checks that `m` is a closed, connected, consistently and outwardly
/// oriented surface with Euler characteristic 2.
pub fn validate_closed_genus0(m: &TriMesh) -> ValidationReport {
    let nv = m.vertices.len();
    let mut violations = Vec::new();
    for (fi, f) in m.faces.iter().enumerate() {
        for &i in f {
            if i >= nv {
                violations.push(Violation::IndexOutOfRange { face: fi, index: i });
            }
        }
        if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
            violations.push(Violation::RepeatedVertex { face: fi });
        }
    }
    if !violations.is_empty() {
        return ValidationReport {
            vertices: nv,
            edges: 0,
            faces: m.faces.len(),
            euler: 0,
            violations,
        };
    }

    // undirected edge -> (uses as a->b with a<b, uses as b->a)
    let mut edges: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
    let mut parent: Vec<usize> = (0..nv).collect();
    for &[a, b, c] in &m.faces {
        for (u, v) in [(a, b), (b, c), (c, a)] {
            let e = edges.entry((u.min(v), u.max(v))).or_default();
            if u < v {
                e.0 += 1;
            } else {
                e.1 += 1;
            }
            let (ru, rv) = (find(&mut parent, u), find(&mut parent, v));
            if ru != rv {
                parent[ru.max(rv)] = ru.min(rv);
            }
        }
    }
    let mut sorted: Vec<_> = edges.iter().collect();
    sorted.sort_unstable_by_key(|(k, _)| **k);
    for (&(a, b), &(fwd, bwd)) in sorted {
        match fwd + bwd {
            1 => violations.push(Violation::BoundaryEdge { a, b }),
            2 if fwd != 1 => violations.push(Violation::InconsistentOrientation { a, b }),
            2 => {}
            n => violations.push(Violation::NonManifoldEdge { a, b, faces: n }),
        }
    }
    let components = (0..nv).filter(|&v| find(&mut parent, v) == v).count();
    if components != 1 {
        violations.push(Violation::Disconnected { components });
    }
    let euler = nv as i64 - edges.len() as i64 + m.faces.len() as i64;
    if euler != 2 {
        violations.push(Violation::EulerCharacteristic { chi: euler });
    }
    let vol = m.signed_volume();
    if !(vol > 0.0) {
        violations.push(Violation::InwardOrientation { signed_volume: vol });
    }
    ValidationReport {
        vertices: nv,
        edges: edges.len(),
        faces: m.faces.len(),
        euler,
        violations,
    }
}

/// Angle-weighted unit vertex normals.
pub fn vertex_normals(m: &TriMesh) -> Result<Vec<Vec3>> {
    let mut normals = vec![Vec3::ZERO; m.vertices.len()];
    for (fi, &[a, b, c]) in m.faces.iter().enumerate() {
        let (pa, pb, pc) = (m.vertices[a], m.vertices[b], m.vertices[c]);
        let n = (pb - pa).cross(pc - pa);
        let scale = (pb - pa).norm_squared().max((pc - pa).norm_squared());
        if !(n.norm() > 1e-14 * scale) {
            return Err(Error::DegenerateFace { face: fi });
        }
        let n = n.normalized();
        normals[a] += n * corner_angle(pa, pb, pc);
        normals[b] += n * corner_angle(pb, pc, pa);
        normals[c] += n * corner_angle(pc, pa, pb);
    }
    Ok(normals.into_iter().map(Vec3::normalized).collect())
}

/// Taubin lambda/mu smoothing with uniform Laplacian weights.
pub fn taubin_smooth(m: &TriMesh, iterations: usize, lambda: f64, mu: f64) -> TriMesh {
    let nb = m.vertex_neighbors();
    let mut pos = m.vertices.clone();
    let step = |pos: &[Vec3], factor: f64| -> Vec<Vec3> {
        pos.iter()
            .enumerate()
            .map(|(i, &p)| {
                if nb[i].is_empty() {
                    return p;
                }
                let avg = nb[i].iter().fold(Vec3::ZERO, |acc, &j| acc + pos[j]) / nb[i].len() as f64;
                p + (avg - p) * factor
            })
            .collect()
    };
    for _ in 0..iterations {
        pos = step(&pos, lambda);
        pos = step(&pos, mu);
    }
    TriMesh {
        vertices: pos,
        faces: m.faces.clone(),
    }
}

/// Per-vertex image of a mesh on the unit sphere, sharing its faces.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereMap {
    pub faces: Vec<[usize; 3]>,
    pub positions: Vec<Vec3>,
}

impl SphereMap {
    /// Faces whose spherical orientation is not positive.
    pub fn flipped_faces(&self) -> Vec<usize> {
        self.faces
            .iter()
            .enumerate()
            .filter(|(_, &[a, b, c])| {
                let (pa, pb, pc) = (self.positions[a], self.positions[b], self.positions[c]);
                !(pa.dot(pb.cross(pc)) > 0.0)
            })
            .map(|(i, _)| i)
            .collect()
    }

    pub fn max_norm_error(&self) -> f64 {
        self.positions
            .iter()
            .map(|p| (p.norm() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn as_mesh(&self) -> TriMesh {
        TriMesh {
            vertices: self.positions.clone(),
            faces: self.faces.clone(),
        }
    }

    /// Wraps positions loaded from disk; they are re-projected to the sphere.
    pub fn from_mesh(m: TriMesh) -> SphereMap {
        SphereMap {
            positions: m.vertices.into_iter().map(Vec3::normalized).collect(),
            faces: m.faces,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, serde::Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct HarmonicOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for HarmonicOptions {
    fn default() -> Self {
        HarmonicOptions {
            damping: 0.5,
            tol: 1e-6,
            max_iters: 5000,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HarmonicReport {
    pub iterations: usize,
    pub converged: bool,
    pub clamped_weights: usize,
    pub final_displacement: f64,
    /// Harmonic energy of the initial map followed by one entry per
    /// accepted iteration.
    pub energies: Vec<f64>,
    pub backtracks: usize,
}

/// Cotangent edge weights in compressed adjacency form.
struct CotWeights {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    weights: Vec<f64>,
    edges: Vec<(usize, usize, f64)>,
    clamped: usize,
}

fn cot_weights(m: &TriMesh) -> CotWeights {
    let mut w: HashMap<(usize, usize), f64> = HashMap::new();
    for &[a, b, c] in &m.faces {
        let (pa, pb, pc) = (m.vertices[a], m.vertices[b], m.vertices[c]);
        for (i, j, pi, pj, po) in [(a, b, pa, pb, pc), (b, c, pb, pc, pa), (c, a, pc, pa, pb)] {
            *w.entry((i.min(j), i.max(j))).or_default() += 0.5 * corner_cot(po, pi, pj);
        }
    }
    let mut edges: Vec<(usize, usize, f64)> = w.into_iter().map(|((i, j), w)| (i, j, w)).collect();
    edges.sort_unstable_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
    let mut clamped = 0;
    for e in &mut edges {
        if e.2 < 0.0 {
            e.2 = 0.0;
            clamped += 1;
        }
    }
    let n = m.vertices.len();
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for &(i, j, w) in &edges {
        adj[i].push((j, w));
        adj[j].push((i, w));
    }
    let mut offsets = Vec::with_capacity(n + 1);
    let mut neighbors = Vec::new();
    let mut weights = Vec::new();
    offsets.push(0);
    for list in adj {
        for (j, w) in list {
            neighbors.push(j);
            weights.push(w);
        }
        offsets.push(neighbors.len());
    }
    CotWeights {
        offsets,
        neighbors,
        weights,
        edges,
        clamped,
    }
}

fn harmonic_energy(edges: &[(usize, usize, f64)], phi: &[Vec3]) -> f64 {
    edges
        .iter()
        .map(|&(i, j, w)| w * (phi[i] - phi[j]).norm_squared())
        .sum()
}

/// Subtracts the area-weighted centre of the mapped surface and re-projects.
fn recenter(faces: &[[usize; 3]], phi: &mut [Vec3]) {
    let mut area = vec![0.0; phi.len()];
    for &[a, b, c] in faces {
        let t = triangle_area(phi[a], phi[b], phi[c]) / 3.0;
        area[a] += t;
        area[b] += t;
        area[c] += t;
    }
    let total: f64 = area.iter().sum();
    if !(total > 0.0) {
        return;
    }
    let center = phi
        .iter()
        .zip(&area)
        .fold(Vec3::ZERO, |acc, (&p, &w)| acc + p * w)
        / total;
    for p in phi.iter_mut() {
        *p = (*p - center).normalized();
    }
}

/// Maps a closed genus-0 mesh to the unit sphere by relaxing the cotangent
/// harmonic energy.
///
/// Starts from the radial projection about the vertex centroid. Each step
/// moves every vertex along the tangential part of its normalized
/// cotangent Laplacian (Jacobi update), re-projects onto the sphere and
/// re-centres. A step that would raise the energy is retried with half the
/// step size, so the recorded energies never increase.
pub fn harmonic_sphere_map(m: &TriMesh, opts: &HarmonicOptions) -> Result<(SphereMap, HarmonicReport)> {
    let report = validate_closed_genus0(m);
    if !report.is_valid() {
        return Err(Error::InvalidMesh(report.summary()));
    }
    if !(opts.damping > 0.0) || !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument("damping and tol must be > 0".into()));
    }
    let cw = cot_weights(m);
    let c = m.centroid();
    let mut phi: Vec<Vec3> = m.vertices.iter().map(|&v| (v - c).normalized()).collect();
    recenter(&m.faces, &mut phi);
    let mut energy = harmonic_energy(&cw.edges, &phi);
    let mut energies = vec![energy];
    let mut step = opts.damping;
    let mut converged = false;
    let mut iterations = 0;
    let mut backtracks = 0;
    let mut final_displacement = f64::INFINITY;
    let mut tangent = vec![Vec3::ZERO; phi.len()];
    let mut trial = phi.clone();

    while iterations < opts.max_iters {
        for (i, t) in tangent.iter_mut().enumerate() {
            let range = cw.offsets[i]..cw.offsets[i + 1];
            let wsum: f64 = cw.weights[range.clone()].iter().sum();
            if wsum <= 0.0 {
                *t = Vec3::ZERO;
                continue;
            }
            let mut lap = Vec3::ZERO;
            for k in range {
                lap += (phi[cw.neighbors[k]] - phi[i]) * cw.weights[k];
            }
            let lap = lap / wsum;
            *t = lap - phi[i] * lap.dot(phi[i]);
        }
        let mut accepted = false;
        while step > 1e-12 {
            for ((t, &p), &d) in trial.iter_mut().zip(&phi).zip(&tangent) {
                *t = (p + d * step).normalized();
            }
            recenter(&m.faces, &mut trial);
            let e = harmonic_energy(&cw.edges, &trial);
            if e <= energy {
                energy = e;
                accepted = true;
                break;
            }
            step *= 0.5;
            backtracks += 1;
        }
        if !accepted {
            // no descent direction left at machine precision
            converged = true;
            final_displacement = 0.0;
            break;
        }
        iterations += 1;
        energies.push(energy);
        final_displacement = trial
            .iter()
            .zip(&phi)
            .map(|(a, b)| a.distance(*b))
            .fold(0.0, f64::max);
        std::mem::swap(&mut phi, &mut trial);
        step = (step * 2.0).min(opts.damping);
        if final_displacement < opts.tol {
            converged = true;
            break;
        }
    }

    let map = SphereMap {
        faces: m.faces.clone(),
        positions: phi,
    };
    let flipped = map.flipped_faces().len();
    if flipped > 0 {
        return Err(Error::FlippedTriangles {
            count: flipped,
            iterations,
        });
    }
    Ok((
        map,
        HarmonicReport {
            iterations,
            converged,
            clamped_weights: cw.clamped,
            final_displacement,
            energies,
            backtracks,
        },
    ))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    fn tetrahedron() -> TriMesh {
        TriMesh::new(
            vec![
                Vec3::new(1.0, 1.0, 1.0),
                Vec3::new(1.0, -1.0, -1.0),
                Vec3::new(-1.0, 1.0, -1.0),
                Vec3::new(-1.0, -1.0, 1.0),
            ],
            vec![[0, 1, 2], [0, 2, 3], [0, 3, 1], [1, 3, 2]],
        )
    }

    /// Unit cube [0,1]^3 split into 12 outward triangles.
    pub(crate) fn cube() -> TriMesh {
        let v: Vec<Vec3> = (0..8)
            .map(|i| Vec3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64))
            .collect();
        let quads = [
            [0, 2, 3, 1], // z=0, normal -z
            [4, 5, 7, 6], // z=1
            [0, 1, 5, 4], // y=0
            [2, 6, 7, 3], // y=1
            [0, 4, 6, 2], // x=0
            [1, 3, 7, 5], // x=1
        ];
        let faces = quads
            .iter()
            .flat_map(|&[a, b, c, d]| [[a, b, c], [a, c, d]])
            .collect();
        TriMesh::new(v, faces)
    }

    #[test]
    fn tetrahedron_round_trip() {
        let t = tetrahedron();
        let back = TriMesh::from_text(&t.to_text()).unwrap();
        assert_eq!(back.faces, t.faces);
        assert_eq!(back.vertices, t.vertices);
    }

    #[test]
    fn icosphere_file_round_trip() {
        let m = icosphere(3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ico.obj");
        m.save(&p).unwrap();
        let back = TriMesh::load(&p).unwrap();
        assert_eq!(back.faces, m.faces);
        for (a, b) in back.vertices.iter().zip(&m.vertices) {
            assert!(a.distance(*b) < 1e-6);
        }
    }

    #[test]
    fn loader_rejects_bad_faces() {
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 2 99\n";
        assert!(TriMesh::from_text(text).is_err());
        let quad = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 2 3 4\n";
        assert!(TriMesh::from_text(quad).is_err());
        assert!(TriMesh::from_text("v 1 2\n").is_err());
    }

    #[test]
    fn icosahedron_is_valid() {
        let r = validate_closed_genus0(&icosphere(0));
        assert_eq!((r.vertices, r.edges, r.faces), (12, 30, 20));
        assert_eq!(r.euler, 2);
        assert!(r.is_valid(), "{}", r.summary());
        assert!(validate_closed_genus0(&icosphere(3)).is_valid());
    }

    #[test]
    fn missing_face_reports_boundary() {
        let mut m = icosphere(0);
        m.faces.pop();
        let r = validate_closed_genus0(&m);
        assert!(!r.is_valid());
        assert!(r.summary().contains("boundary edge"));
    }

    #[test]
    fn disjoint_tetrahedra_are_disconnected() {
        let t = tetrahedron();
        let mut m = t.clone();
        m.vertices.extend(t.vertices.iter().map(|&v| v + Vec3::new(10.0, 0.0, 0.0)));
        m.faces.extend(t.faces.iter().map(|f| [f[0] + 4, f[1] + 4, f[2] + 4]));
        let r = validate_closed_genus0(&m);
        assert!(r
            .violations
            .iter()
            .any(|v| matches!(v, Violation::Disconnected { components: 2 })));
        assert!(r.summary().contains("disconnected"));
    }

    #[test]
    fn flipped_face_is_inconsistent() {
        let mut m = icosphere(1);
        m.faces[3].swap(1, 2);
        let r = validate_closed_genus0(&m);
        assert!(r
            .violations
            .iter()
            .any(|v| matches!(v, Violation::InconsistentOrientation { .. })));
        let inward = validate_closed_genus0(&icosphere(1).flipped());
        assert!(inward
            .violations
            .iter()
            .any(|v| matches!(v, Violation::InwardOrientation { .. })));
    }

    #[test]
    fn validation_is_permutation_invariant() {
        let m = icosphere(2);
        let n = m.vertices.len();
        // reverse the vertex order
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut vertices = vec![Vec3::ZERO; n];
        for (old, &new) in perm.iter().enumerate() {
            vertices[new] = m.vertices[old];
        }
        let faces = m.faces.iter().map(|f| [perm[f[0]], perm[f[1]], perm[f[2]]]).collect();
        let p = TriMesh::new(vertices, faces);
        let (a, b) = (validate_closed_genus0(&m), validate_closed_genus0(&p));
        assert_eq!(a.is_valid(), b.is_valid());
        assert_eq!((a.vertices, a.edges, a.faces), (b.vertices, b.edges, b.faces));
    }

    #[test]
    fn icosphere_normals_are_radial() {
        // angle-weighted normals converge at first order in edge length
        let m = icosphere(6);
        let n = vertex_normals(&m).unwrap();
        for (v, n) in m.vertices.iter().zip(&n) {
            assert!(v.distance(*n) < 1e-3);
        }
    }

    #[test]
    fn cube_corner_normal_is_diagonal() {
        let m = cube();
        assert!(validate_closed_genus0(&m).is_valid());
        let n = vertex_normals(&m).unwrap();
        let expected = Vec3::splat(1.0 / 3f64.sqrt());
        assert!(n[7].distance(expected) < 1e-12, "{:?}", n[7]);
        assert!(n[0].distance(-expected) < 1e-12, "{:?}", n[0]);
    }

    #[test]
    fn flipped_mesh_negates_normals() {
        let m = icosphere(2);
        let a = vertex_normals(&m).unwrap();
        let b = vertex_normals(&m.flipped()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((*x + *y).norm() < 1e-12);
        }
    }

    #[test]
    fn degenerate_face_is_named() {
        let mut m = tetrahedron();
        m.vertices[3] = m.vertices[0];
        m.faces = vec![[0, 1, 2], [0, 2, 3], [0, 3, 1], [1, 3, 2]];
        match vertex_normals(&m) {
            Err(Error::DegenerateFace { face }) => assert!(face == 1 || face == 2),
            other => panic!("expected degenerate face, got {other:?}"),
        }
    }

    fn radii(m: &TriMesh) -> Vec<f64> {
        m.vertices.iter().map(|v| v.norm()).collect()
    }

    #[test]
    fn taubin_identity_and_volume_preservation() {
        let m = icosphere(3);
        assert_eq!(taubin_smooth(&m, 0, 0.5, -0.53), m);
        let s = taubin_smooth(&m, 10, 0.5, -0.53);
        assert_eq!(s.faces, m.faces);
        let mean = |r: Vec<f64>| r.iter().sum::<f64>() / r.len() as f64;
        let before = mean(radii(&m));
        let after = mean(radii(&s));
        assert!((after - before).abs() / before < 0.01, "{before} -> {after}");
    }

    #[test]
    fn taubin_reduces_radial_noise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut m = icosphere(3);
        for v in &mut m.vertices {
            let r = 1.0 + 0.05 * (rng.random::<f64>() * 2.0 - 1.0) * 3f64.sqrt();
            *v = *v * r;
        }
        let var = |r: Vec<f64>| {
            let mean = r.iter().sum::<f64>() / r.len() as f64;
            r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / r.len() as f64
        };
        let s = taubin_smooth(&m, 10, 0.5, -0.53);
        assert!(var(radii(&s)) < var(radii(&m)));
    }

    #[test]
    fn harmonic_map_of_unit_icosphere_is_near_identity() {
        let m = icosphere(3);
        let (map, report) = harmonic_sphere_map(&m, &HarmonicOptions::default()).unwrap();
        let worst = map
            .positions
            .iter()
            .zip(&m.vertices)
            .map(|(a, b)| a.distance(*b))
            .fold(0.0, f64::max);
        assert!(worst < 1e-3, "worst {worst}, report {:?}", report.iterations);
        assert!(map.max_norm_error() < 1e-6);
    }

    #[test]
    fn harmonic_map_of_ellipsoid() {
        let mut m = icosphere(3);
        for v in &mut m.vertices {
            *v = Vec3::new(25.0 * v.x, 22.0 * v.y, 25.0 * v.z);
        }
        let (map, report) = harmonic_sphere_map(&m, &HarmonicOptions::default()).unwrap();
        assert!(map.flipped_faces().is_empty());
        assert!(map.max_norm_error() <= 1e-6);
        for w in report.energies.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn harmonic_map_rejects_open_mesh() {
        let mut m = icosphere(1);
        m.faces.pop();
        assert!(matches!(
            harmonic_sphere_map(&m, &HarmonicOptions::default()),
            Err(Error::InvalidMesh(_))
        ));
    }
}
