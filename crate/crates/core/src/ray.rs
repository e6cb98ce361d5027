//! Watertight line/triangle intersection.
//!
//! The line is sheared so that it becomes the origin of a 2-D plane, and
//! each triangle edge is tested with an edge function that is exactly
//! antisymmetric under edge reversal. Zero edge functions are resolved by a
//! fixed symbolic perturbation of the line, so a line through a shared edge
//! or vertex is counted by exactly one side of every edge. Parity counts
//! are therefore exact on closed meshes.

use crate::geom::Vec3;
use crate::mesh::TriMesh;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Line parameter: the hit point is `origin + t * dir`.
    pub t: f64,
    pub face: usize,
    /// Barycentric weights of the face's three vertices.
    pub bary: [f64; 3],
}

#[derive(Debug, Clone, Copy)]
pub struct LineCaster {
    origin: Vec3,
    dir: Vec3,
    kx: usize,
    ky: usize,
    kz: usize,
    sx: f64,
    sy: f64,
    sz: f64,
}

impl LineCaster {
    pub fn new(origin: Vec3, dir: Vec3) -> Self {
        let kz = dir.max_abs_axis();
        let mut kx = (kz + 1) % 3;
        let mut ky = (kx + 1) % 3;
        if dir[kz] < 0.0 {
            std::mem::swap(&mut kx, &mut ky);
        }
        LineCaster {
            origin,
            dir,
            kx,
            ky,
            kz,
            sx: dir[kx] / dir[kz],
            sy: dir[ky] / dir[kz],
            sz: 1.0 / dir[kz],
        }
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn dir(&self) -> Vec3 {
        self.dir
    }

    #[inline]
    fn project(&self, p: Vec3) -> (f64, f64, f64) {
        let q = p - self.origin;
        (q[self.kx] - self.sx * q[self.kz], q[self.ky] - self.sy * q[self.kz], self.sz * q[self.kz])
    }

    /// Intersection with triangle `(a, b, c)`, either winding.
    #[inline]
    pub fn intersect(&self, a: Vec3, b: Vec3, c: Vec3) -> Option<(f64, [f64; 3])> {
        let pa = self.project(a);
        let pb = self.project(b);
        let pc = self.project(c);
        let u = edge_sign(pb, pc)?;
        let v = edge_sign(pc, pa)?;
        let w = edge_sign(pa, pb)?;
        let pos = u.1 && v.1 && w.1;
        let neg = !u.1 && !v.1 && !w.1;
        if !pos && !neg {
            return None;
        }
        let det = u.0 + v.0 + w.0;
        if det == 0.0 {
            return None;
        }
        let t = (u.0 * pa.2 + v.0 * pb.2 + w.0 * pc.2) / det;
        Some((t, [u.0 / det, v.0 / det, w.0 / det]))
    }

    /// All intersections of the infinite line with `mesh`, in face order.
    pub fn hits(&self, mesh: &TriMesh) -> Vec<Hit> {
        self.hits_among(mesh, 0..mesh.faces.len())
    }

    pub fn hits_among(&self, mesh: &TriMesh, faces: impl IntoIterator<Item = usize>) -> Vec<Hit> {
        faces
            .into_iter()
            .filter_map(|f| {
                let [a, b, c] = mesh.face_points(f);
                self.intersect(a, b, c).map(|(t, bary)| Hit { t, face: f, bary })
            })
            .collect()
    }
}

/// Edge function of the directed 2-D edge `p -> q` at the origin, with the
/// sign it takes under the symbolic perturbation when it is exactly zero.
/// `None` for a degenerate (zero-length) edge.
#[inline]
fn edge_sign(p: (f64, f64, f64), q: (f64, f64, f64)) -> Option<(f64, bool)> {
    let e = p.0 * q.1 - p.1 * q.0;
    if e != 0.0 {
        return Some((e, e > 0.0));
    }
    let dx = q.0 - p.0;
    if dx != 0.0 {
        return Some((e, dx > 0.0));
    }
    let dy = q.1 - p.1;
    if dy != 0.0 {
        return Some((e, dy > 0.0));
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::icosphere;

    #[test]
    fn hits_triangle_interior() {
        let c = LineCaster::new(Vec3::new(0.2, 0.2, -1.0), Vec3::Z);
        let (t, bary) = c.intersect(Vec3::ZERO, Vec3::X, Vec3::Y).unwrap();
        assert!((t - 1.0).abs() < 1e-15);
        assert!((bary.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(c.intersect(Vec3::new(2.0, 0.0, 0.0), Vec3::new(3.0, 0.0, 0.0), Vec3::new(2.0, 1.0, 0.0)).is_none());
    }

    #[test]
    fn shared_edge_counted_once() {
        // square split along its diagonal; line through the diagonal
        let (a, b, c, d) = (Vec3::ZERO, Vec3::X, Vec3::new(1.0, 1.0, 0.0), Vec3::Y);
        let caster = LineCaster::new(Vec3::new(0.5, 0.5, -1.0), Vec3::Z);
        let n = [caster.intersect(a, b, c), caster.intersect(a, c, d)]
            .iter()
            .filter(|h| h.is_some())
            .count();
        assert_eq!(n, 1);
    }

    #[test]
    fn shared_vertex_counted_once() {
        let m = icosphere(0);
        let v = m.vertices[0];
        for dir in [Vec3::X, Vec3::Y, Vec3::Z, Vec3::new(1.0, 2.0, 3.0).normalized()] {
            let caster = LineCaster::new(v - dir * 3.0, dir);
            let hits = caster.hits(&m);
            assert_eq!(hits.len() % 2, 0, "dir {dir:?}: {} hits", hits.len());
        }
    }

    #[test]
    fn closed_mesh_has_even_crossings() {
        let m = icosphere(2);
        for k in 0..50 {
            let o = Vec3::new(0.013 * k as f64 - 0.3, 0.1, -0.2);
            let caster = LineCaster::new(o, Vec3::new(0.3, -0.2, 1.0).normalized());
            let hits = caster.hits(&m);
            assert_eq!(hits.len(), 2);
            assert!(hits[0].t * hits[1].t < 0.0);
        }
    }
}

/// Mesh with per-face bounding spheres for culling arbitrary lines.
pub struct BoundedMesh<'a> {
    mesh: &'a TriMesh,
    centers: Vec<Vec3>,
    radii: Vec<f64>,
}

impl<'a> BoundedMesh<'a> {
    pub fn new(mesh: &'a TriMesh) -> Self {
        let mut centers = Vec::with_capacity(mesh.faces.len());
        let mut radii = Vec::with_capacity(mesh.faces.len());
        for f in 0..mesh.faces.len() {
            let [a, b, c] = mesh.face_points(f);
            let center = (a + b + c) / 3.0;
            let r = [a, b, c].iter().map(|p| p.distance(center)).fold(0.0, f64::max);
            centers.push(center);
            radii.push(r * (1.0 + 1e-9) + 1e-12);
        }
        BoundedMesh { mesh, centers, radii }
    }

    pub fn mesh(&self) -> &TriMesh {
        self.mesh
    }

    /// All intersections of the line `origin + t * dir` (any `t`).
    pub fn line_hits(&self, origin: Vec3, dir: Vec3) -> Vec<Hit> {
        let caster = LineCaster::new(origin, dir);
        let unit = dir.normalized();
        let candidates = (0..self.mesh.faces.len()).filter(|&f| {
            let rel = self.centers[f] - origin;
            rel.cross(unit).norm_squared() <= self.radii[f] * self.radii[f]
        });
        caster.hits_among(self.mesh, candidates)
    }
}
