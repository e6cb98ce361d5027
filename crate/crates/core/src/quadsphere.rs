//! Cube-sphere quad parameterization of the unit sphere, point location on
//! a spherical triangle mesh, and transfer of the quad grid onto the
//! pre-segmentation surface.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::mesh::{parse_polys, vertex_normals, write_file, write_polys, SphereMap, TriMesh};

pub const MAX_LEVEL: u32 = 8;

/// Integer frame of a cube face: outward normal and the two in-face axes,
/// with `u x v = normal`.
#[derive(Debug, Clone, Copy)]
struct FaceFrame {
    normal: [i64; 3],
    u: [i64; 3],
    v: [i64; 3],
}

const FACES: [FaceFrame; 6] = [
    FaceFrame { normal: [1, 0, 0], u: [0, 1, 0], v: [0, 0, 1] },
    FaceFrame { normal: [-1, 0, 0], u: [0, 0, 1], v: [0, 1, 0] },
    FaceFrame { normal: [0, 1, 0], u: [0, 0, 1], v: [1, 0, 0] },
    FaceFrame { normal: [0, -1, 0], u: [1, 0, 0], v: [0, 0, 1] },
    FaceFrame { normal: [0, 0, 1], u: [1, 0, 0], v: [0, 1, 0] },
    FaceFrame { normal: [0, 0, -1], u: [0, 1, 0], v: [1, 0, 0] },
];

fn axis_of(v: [i64; 3]) -> usize {
    v.iter().position(|&c| c != 0).expect("unit axis")
}

/// Position of a grid slot on one of the six faces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSlot {
    pub face: usize,
    pub i: usize,
    pub j: usize,
}

#[derive(Debug, Clone)]
pub struct QuadSphere {
    level: u32,
    n: usize,
    grids: [Vec<usize>; 6],
    vertices: Vec<Vec3>,
    quads: Vec<[usize; 4]>,
    owner: Vec<GridSlot>,
    lattice: HashMap<[i64; 3], usize>,
}

impl QuadSphere {
    /// Recursively subdivided inscribed cube. Each level splits every quad
    /// into four, pushing edge midpoints and face centres onto the sphere.
    pub fn build(level: u32) -> Result<QuadSphere> {
        if level > MAX_LEVEL {
            return Err(Error::InvalidArgument(format!(
                "recursion level {level} exceeds {MAX_LEVEL}"
            )));
        }
        let n = 1usize << level;
        let side = n + 1;
        let mut vertices = Vec::with_capacity(6 * n * n + 2);
        let mut owner = Vec::with_capacity(6 * n * n + 2);
        let mut lattice = HashMap::with_capacity(6 * n * n + 2);
        let mut grids: [Vec<usize>; 6] = Default::default();
        for (f, frame) in FACES.iter().enumerate() {
            let pos = subdivide_face(frame, level);
            let mut grid = vec![0usize; side * side];
            for j in 0..side {
                for i in 0..side {
                    let key = lattice_key(frame, n, i as i64, j as i64);
                    let id = *lattice.entry(key).or_insert_with(|| {
                        vertices.push(pos[i + j * side]);
                        owner.push(GridSlot { face: f, i, j });
                        vertices.len() - 1
                    });
                    grid[i + j * side] = id;
                }
            }
            grids[f] = grid;
        }
        let mut quads = Vec::with_capacity(6 * n * n);
        for grid in &grids {
            for j in 0..n {
                for i in 0..n {
                    quads.push([
                        grid[i + j * side],
                        grid[i + 1 + j * side],
                        grid[i + 1 + (j + 1) * side],
                        grid[i + (j + 1) * side],
                    ]);
                }
            }
        }
        Ok(QuadSphere {
            level,
            n,
            grids,
            vertices,
            quads,
            owner,
            lattice,
        })
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    /// Quads per face edge, `2^level`.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Grid slots per face edge, `n + 1`.
    pub fn side(&self) -> usize {
        self.n + 1
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn quads(&self) -> &[[usize; 4]] {
        &self.quads
    }

    pub fn grid(&self, face: usize) -> &[usize] {
        &self.grids[face]
    }

    /// Global vertex id at slot `(i, j)` of `face`.
    pub fn vertex_at(&self, face: usize, i: usize, j: usize) -> usize {
        self.grids[face][i + j * self.side()]
    }

    /// The lowest-id face slot of each vertex.
    pub fn owner(&self, vertex: usize) -> GridSlot {
        self.owner[vertex]
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self
            .quads
            .iter()
            .flat_map(|q| (0..4).map(move |k| (q[k], q[(k + 1) % 4])))
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.vertices.len()];
        for (a, b) in self.edges() {
            d[a] += 1;
            d[b] += 1;
        }
        d
    }

    /// Vertex at grid coordinates that may extend past the face border.
    /// Out-of-face coordinates are folded over the cube edges onto the
    /// neighbouring faces. Valid for overhangs of at most `n` slots.
    pub fn vertex_at_extended(&self, face: usize, i: isize, j: isize) -> Option<usize> {
        let n = self.n as i64;
        let frame = &FACES[face];
        let mut p = lattice_key(frame, self.n, i as i64, j as i64);
        let mut face_axis = axis_of(frame.normal);
        for dir_axis in [axis_of(frame.u), axis_of(frame.v)] {
            let c = p[dir_axis];
            if c.abs() > n {
                let e = c.abs() - n;
                p[dir_axis] = c.signum() * n;
                p[face_axis] = p[face_axis].signum() * (n - e);
                face_axis = dir_axis;
            }
        }
        self.lattice.get(&p).copied()
    }
}

fn lattice_key(frame: &FaceFrame, n: usize, i: i64, j: i64) -> [i64; 3] {
    let n = n as i64;
    let (a, b) = (2 * i - n, 2 * j - n);
    let mut k = [0i64; 3];
    for ax in 0..3 {
        k[ax] = frame.normal[ax] * n + frame.u[ax] * a + frame.v[ax] * b;
    }
    k
}

fn to_vec(v: [i64; 3]) -> Vec3 {
    Vec3::new(v[0] as f64, v[1] as f64, v[2] as f64)
}

/// Positions of one face grid after `level` recursive subdivisions.
fn subdivide_face(frame: &FaceFrame, level: u32) -> Vec<Vec3> {
    let (nrm, u, v) = (to_vec(frame.normal), to_vec(frame.u), to_vec(frame.v));
    let mut m = 1usize;
    let mut grid: Vec<Vec3> = vec![
        (nrm - u - v).normalized(),
        (nrm + u - v).normalized(),
        (nrm - u + v).normalized(),
        (nrm + u + v).normalized(),
    ];
    for _ in 0..level {
        let old_side = m + 1;
        let new_side = 2 * m + 1;
        let at = |i: usize, j: usize| grid[i + j * old_side];
        let mut next = vec![Vec3::ZERO; new_side * new_side];
        for j in 0..new_side {
            for i in 0..new_side {
                let (hi, hj) = (i / 2, j / 2);
                next[i + j * new_side] = match (i % 2, j % 2) {
                    (0, 0) => at(hi, hj),
                    (1, 0) => (at(hi, hj) + at(hi + 1, hj)).normalized(),
                    (0, 1) => (at(hi, hj) + at(hi, hj + 1)).normalized(),
                    _ => (at(hi, hj) + at(hi + 1, hj) + at(hi, hj + 1) + at(hi + 1, hj + 1)).normalized(),
                };
            }
        }
        grid = next;
        m *= 2;
    }
    grid
}

/// A point expressed on a triangle of the source mesh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaryRecord {
    pub triangle: usize,
    pub t: [f64; 3],
}

/// Gnomonic point location on a spherical triangle mesh.
pub struct SphereLocator<'a> {
    map: &'a SphereMap,
    normals: Vec<Vec3>,
    centers: Vec<Vec3>,
    cos_radius: Vec<f64>,
}

const LOCATE_EPS: f64 = 1e-12;
const LOCATE_FALLBACK_EPS: f64 = 1e-9;

impl<'a> SphereLocator<'a> {
    pub fn new(map: &'a SphereMap) -> Self {
        let mut normals = Vec::with_capacity(map.faces.len());
        let mut centers = Vec::with_capacity(map.faces.len());
        let mut cos_radius = Vec::with_capacity(map.faces.len());
        for &[a, b, c] in &map.faces {
            let (pa, pb, pc) = (map.positions[a], map.positions[b], map.positions[c]);
            normals.push((pb - pa).cross(pc - pa));
            let center = (pa + pb + pc).normalized();
            let cr = [pa, pb, pc]
                .iter()
                .map(|p| p.normalized().dot(center))
                .fold(1.0, f64::min);
            centers.push(center);
            cos_radius.push(cr);
        }
        SphereLocator {
            map,
            normals,
            centers,
            cos_radius,
        }
    }

    fn barycentric(&self, f: usize, q: Vec3) -> Option<[f64; 3]> {
        let nrm = self.normals[f];
        let denom = nrm.dot(q);
        if !(denom > 0.0) {
            return None;
        }
        let [a, b, c] = self.map.faces[f];
        let (pa, pb, pc) = (self.map.positions[a], self.map.positions[b], self.map.positions[c]);
        let p = q * (nrm.dot(pa) / denom);
        let n2 = nrm.norm_squared();
        let t1 = (pb - p).cross(pc - p).dot(nrm) / n2;
        let t2 = (pc - p).cross(pa - p).dot(nrm) / n2;
        let t3 = 1.0 - t1 - t2;
        Some([t1, t2, t3])
    }

    /// Triangle whose central projection contains `q` and the planar
    /// barycentric coordinates of the ray/triangle intersection. Shared
    /// edges resolve to the lowest triangle id.
    pub fn locate(&self, q: Vec3) -> Result<BaryRecord> {
        let q = q.normalized();
        let mut best: Option<(f64, usize, [f64; 3])> = None;
        for f in 0..self.map.faces.len() {
            if q.dot(self.centers[f]) < self.cos_radius[f] - 1e-9 {
                continue;
            }
            let Some(t) = self.barycentric(f, q) else {
                continue;
            };
            let worst = t[0].min(t[1]).min(t[2]);
            if worst >= -LOCATE_EPS {
                return Ok(clean(f, t));
            }
            if best.map_or(true, |(w, _, _)| worst > w) {
                best = Some((worst, f, t));
            }
        }
        match best {
            Some((w, f, t)) if w >= -LOCATE_FALLBACK_EPS => Ok(clean(f, t)),
            _ => Err(Error::PointNotLocated { point: q.to_array() }),
        }
    }
}

fn clean(triangle: usize, t: [f64; 3]) -> BaryRecord {
    let t = t.map(|x| x.max(0.0));
    let s = t[0] + t[1] + t[2];
    BaryRecord {
        triangle,
        t: t.map(|x| x / s),
    }
}

/// Convenience wrapper building a throwaway locator.
pub fn locate_on_sphere(q: Vec3, map: &SphereMap) -> Result<BaryRecord> {
    SphereLocator::new(map).locate(q)
}

/// The quad grid transferred onto the pre-segmentation surface.
#[derive(Debug, Clone)]
pub struct QuadMesh {
    pub sphere: QuadSphere,
    pub positions: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub bary: Vec<BaryRecord>,
}

#[derive(Serialize, Deserialize)]
struct QuadSidecar {
    level: u32,
    normals: Vec<Vec3>,
    bary: Vec<BaryRecord>,
}

impl QuadMesh {
    pub fn quads(&self) -> &[[usize; 4]] {
        self.sphere.quads()
    }

    /// Two triangles per quad, split along the `(0, 2)` diagonal.
    pub fn to_tri_mesh(&self) -> TriMesh {
        quads_to_tri_mesh(&self.positions, self.sphere.quads())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        write_polys(&mut s, &self.positions, self.quads().iter().map(|q| &q[..]));
        s
    }

    /// Writes the quad mesh text file and a JSON sidecar (`<path>.json`)
    /// with per-vertex normals and barycentric records.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_file(path, &self.to_text())?;
        let side = QuadSidecar {
            level: self.sphere.level(),
            normals: self.normals.clone(),
            bary: self.bary.clone(),
        };
        write_file(&sidecar_path(path), &serde_json::to_string(&side)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<QuadMesh> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (positions, polys) = parse_polys(&text, &[4])?;
        let sc = sidecar_path(path);
        let side: QuadSidecar = serde_json::from_str(&fs::read_to_string(&sc).map_err(|e| Error::io(&sc, e))?)?;
        let sphere = QuadSphere::build(side.level)?;
        if positions.len() != sphere.vertices().len()
            || side.normals.len() != positions.len()
            || side.bary.len() != positions.len()
        {
            return Err(Error::ShapeMismatch(format!(
                "quad mesh has {} vertices, level {} expects {}",
                positions.len(),
                side.level,
                sphere.vertices().len()
            )));
        }
        if polys.iter().zip(sphere.quads()).any(|(p, q)| p[..] != q[..]) || polys.len() != sphere.quads().len() {
            return Err(Error::ShapeMismatch("quad connectivity differs from the cube sphere".into()));
        }
        Ok(QuadMesh {
            sphere,
            positions,
            normals: side.normals,
            bary: side.bary,
        })
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub fn quads_to_tri_mesh(positions: &[Vec3], quads: &[[usize; 4]]) -> TriMesh {
    TriMesh {
        vertices: positions.to_vec(),
        faces: quads
            .iter()
            .flat_map(|&[a, b, c, d]| [[a, b, c], [a, c, d]])
            .collect(),
    }
}

/// Transfers the quad sphere onto `m` through its sphere map.
pub fn remesh(m: &TriMesh, s: &SphereMap, qs: &QuadSphere) -> Result<QuadMesh> {
    if s.positions.len() != m.vertices.len() || s.faces != m.faces {
        return Err(Error::ShapeMismatch("sphere map does not belong to the mesh".into()));
    }
    let vn = vertex_normals(m)?;
    let locator = SphereLocator::new(s);
    let mut positions = Vec::with_capacity(qs.vertices().len());
    let mut normals = Vec::with_capacity(qs.vertices().len());
    let mut bary = Vec::with_capacity(qs.vertices().len());
    for &q in qs.vertices() {
        let rec = locator.locate(q)?;
        let [a, b, c] = m.faces[rec.triangle];
        let [t1, t2, t3] = rec.t;
        positions.push(m.vertices[a] * t1 + m.vertices[b] * t2 + m.vertices[c] * t3);
        normals.push((vn[a] * t1 + vn[b] * t2 + vn[c] * t3).normalized());
        bary.push(rec);
    }
    Ok(QuadMesh {
        sphere: qs.clone(),
        positions,
        normals,
        bary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{harmonic_sphere_map, icosphere, HarmonicOptions};

    #[test]
    fn base_case_is_a_cube() {
        let qs = QuadSphere::build(0).unwrap();
        assert_eq!(qs.vertices().len(), 8);
        assert_eq!(qs.quads().len(), 6);
        assert!(qs.degrees().iter().all(|&d| d == 3));
        for v in qs.vertices() {
            assert!((v.norm() - 1.0).abs() < 1e-12);
            assert!((v.x.abs() - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn counts_for_every_level() {
        for r in 0..=6 {
            let qs = QuadSphere::build(r).unwrap();
            let n = 1usize << r;
            let (v, f, e) = (qs.vertices().len(), qs.quads().len(), qs.edges().len());
            assert_eq!(v, 6 * n * n + 2);
            assert_eq!(f, 6 * n * n);
            assert_eq!(e, 12 * n * n);
            assert_eq!(v as i64 - e as i64 + f as i64, 2);
            let deg = qs.degrees();
            assert_eq!(deg.iter().filter(|&&d| d == 3).count(), 8);
            assert!(deg.iter().all(|&d| d == 3 || d == 4));
            assert!(qs.vertices().iter().all(|p| (p.norm() - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn level_five_grids() {
        let qs = QuadSphere::build(5).unwrap();
        assert_eq!(qs.vertices().len(), 6146);
        assert_eq!(qs.quads().len(), 6144);
        for f in 0..6 {
            assert_eq!(qs.grid(f).len(), 33 * 33);
        }
    }

    #[test]
    fn quads_face_outward() {
        let qs = QuadSphere::build(3).unwrap();
        let tri = quads_to_tri_mesh(qs.vertices(), qs.quads());
        let report = crate::mesh::validate_closed_genus0(&tri);
        assert!(report.is_valid(), "{}", report.summary());
    }

    #[test]
    fn owner_is_lowest_face() {
        let qs = QuadSphere::build(2).unwrap();
        for f in 0..6 {
            for (slot, &v) in qs.grid(f).iter().enumerate() {
                assert!(qs.owner(v).face <= f, "slot {slot}");
            }
        }
    }

    #[test]
    fn extended_lookup_reaches_neighbours() {
        let qs = QuadSphere::build(3).unwrap();
        let n = qs.n() as isize;
        for f in 0..6 {
            for j in 0..=n {
                for i in 0..=n {
                    assert_eq!(qs.vertex_at_extended(f, i, j), Some(qs.vertex_at(f, i as usize, j as usize)));
                }
            }
            // one step past each border lands next to the border vertex
            for k in 1..n {
                for (inside, outside) in [((0, k), (-1, k)), ((n, k), (n + 1, k)), ((k, 0), (k, -1)), ((k, n), (k, n + 1))] {
                    let a = qs.vertex_at(f, inside.0 as usize, inside.1 as usize);
                    let b = qs.vertex_at_extended(f, outside.0, outside.1).unwrap();
                    let d = qs.vertices()[a].distance(qs.vertices()[b]);
                    let step = qs.vertices()[a].distance(qs.vertices()[qs.vertex_at(f, 1, 1)].normalized()) ;
                    assert!(d < 0.5, "f {f} {inside:?} {outside:?} d {d} {step}");
                    assert!(qs.edges().contains(&(a.min(b), a.max(b))), "not adjacent");
                }
            }
        }
    }

    fn unit_map(level: u32) -> (TriMesh, SphereMap) {
        let m = icosphere(level);
        let s = SphereMap {
            faces: m.faces.clone(),
            positions: m.vertices.clone(),
        };
        (m, s)
    }

    #[test]
    fn locate_vertex_gives_unit_coordinate() {
        let (_, s) = unit_map(2);
        let loc = SphereLocator::new(&s);
        for v in [0, 5, 17, 100] {
            let rec = loc.locate(s.positions[v]).unwrap();
            let k = s.faces[rec.triangle].iter().position(|&x| x == v).unwrap();
            assert!((rec.t[k] - 1.0).abs() < 1e-9, "{rec:?}");
        }
    }

    #[test]
    fn locate_edge_midpoint() {
        let (_, s) = unit_map(2);
        let [a, b, _] = s.faces[7];
        let q = (s.positions[a] + s.positions[b]).normalized();
        let rec = locate_on_sphere(q, &s).unwrap();
        let f = s.faces[rec.triangle];
        let ta = rec.t[f.iter().position(|&x| x == a).unwrap()];
        let tb = rec.t[f.iter().position(|&x| x == b).unwrap()];
        assert!((ta - 0.5).abs() < 1e-9 && (tb - 0.5).abs() < 1e-9, "{rec:?}");
    }

    #[test]
    fn locate_interior_reconstructs_ray() {
        let (_, s) = unit_map(2);
        let loc = SphereLocator::new(&s);
        for f in [0, 33, 101, 250] {
            let [a, b, c] = s.faces[f];
            let q = (s.positions[a] * 0.2 + s.positions[b] * 0.3 + s.positions[c] * 0.5).normalized();
            let rec = loc.locate(q).unwrap();
            assert_eq!(rec.triangle, f);
            let [x, y, z] = s.faces[rec.triangle];
            let p = s.positions[x] * rec.t[0] + s.positions[y] * rec.t[1] + s.positions[z] * rec.t[2];
            assert!(p.normalized().distance(q) < 1e-9);
        }
    }

    #[test]
    fn remesh_unit_sphere() {
        let (m, s) = unit_map(3);
        let qs = QuadSphere::build(3).unwrap();
        let qm = remesh(&m, &s, &qs).unwrap();
        for (p, n) in qm.positions.iter().zip(&qm.normals) {
            assert!((p.norm() - 1.0).abs() < 5e-3);
            assert!((n.norm() - 1.0).abs() < 1e-9);
        }
        for b in &qm.bary {
            assert!((b.t.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(b.t.iter().all(|&t| t >= -1e-9));
        }
    }

    #[test]
    fn remesh_ellipsoid_stays_on_surface() {
        let mut m = icosphere(3);
        let axes = [25.0, 22.0, 25.0];
        for v in &mut m.vertices {
            *v = Vec3::new(axes[0] * v.x, axes[1] * v.y, axes[2] * v.z);
        }
        let (s, _) = harmonic_sphere_map(&m, &HarmonicOptions::default()).unwrap();
        let qs = QuadSphere::build(3).unwrap();
        let qm = remesh(&m, &s, &qs).unwrap();
        for p in &qm.positions {
            let f = (p.x / axes[0]).powi(2) + (p.y / axes[1]).powi(2) + (p.z / axes[2]).powi(2);
            assert!((f - 1.0).abs() < 0.02, "implicit {f}");
        }
    }

    #[test]
    fn quad_mesh_file_round_trip() {
        let (m, s) = unit_map(2);
        let qs = QuadSphere::build(2).unwrap();
        let qm = remesh(&m, &s, &qs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("quad.obj");
        qm.save(&p).unwrap();
        let back = QuadMesh::load(&p).unwrap();
        assert_eq!(back.positions, qm.positions);
        assert_eq!(back.normals, qm.normals);
        assert_eq!(back.bary, qm.bary);
    }
}
