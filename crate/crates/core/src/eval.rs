//! Overlap and surface-distance metrics, plus closed-mesh voxelization.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::mesh::{validate_closed_genus0, write_file, TriMesh, Violation};
use crate::ray::LineCaster;
use crate::volume::Volume;

/// Rejects meshes with open or non-manifold edges; parity counting is only
/// meaningful on closed surfaces.
pub fn check_closed(m: &TriMesh) -> Result<()> {
    let report = validate_closed_genus0(m);
    let bad = report.violations.iter().find(|v| {
        matches!(
            v,
            Violation::IndexOutOfRange { .. } | Violation::BoundaryEdge { .. } | Violation::NonManifoldEdge { .. }
        )
    });
    match bad {
        Some(v) => Err(Error::InvalidMesh(format!("mesh is not closed: {v}"))),
        None => Ok(()),
    }
}

/// Binary volume on the lattice of `template`: a voxel is 1 iff its centre
/// is inside `m` by parity of watertight crossings along the +z line.
pub fn voxelize(m: &TriMesh, template: &Volume) -> Result<Volume> {
    check_closed(m)?;
    let [nx, ny, nz] = template.dims();
    let sp = template.spacing();
    let org = template.origin();
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); nx * ny];
    let index_range = |lo: f64, hi: f64, axis: usize, n: usize| {
        let a = ((lo - org[axis]) / sp[axis]).ceil().max(0.0);
        let b = ((hi - org[axis]) / sp[axis]).floor().min(n as f64 - 1.0);
        if a > b {
            None
        } else {
            Some((a as usize, b as usize))
        }
    };
    for f in 0..m.faces.len() {
        let [a, b, c] = m.face_points(f);
        let (Some((i0, i1)), Some((j0, j1))) = (
            index_range(a.x.min(b.x).min(c.x), a.x.max(b.x).max(c.x), 0, nx),
            index_range(a.y.min(b.y).min(c.y), a.y.max(b.y).max(c.y), 1, ny),
        ) else {
            continue;
        };
        for j in j0..=j1 {
            for i in i0..=i1 {
                bins[i + nx * j].push(f);
            }
        }
    }
    let mut out = template.like(0.0);
    for j in 0..ny {
        for i in 0..nx {
            let faces = &bins[i + nx * j];
            if faces.is_empty() {
                continue;
            }
            let base = template.voxel_center(i, j, 0);
            let caster = LineCaster::new(Vec3::new(base.x, base.y, 0.0), Vec3::Z);
            let mut ts: Vec<f64> = caster.hits_among(m, faces.iter().copied()).iter().map(|h| h.t).collect();
            ts.sort_by(f64::total_cmp);
            let mut below = 0usize;
            for k in 0..nz {
                let zc = org[2] + k as f64 * sp[2];
                while below < ts.len() && ts[below] < zc {
                    below += 1;
                }
                if below % 2 == 1 {
                    out.set(i, j, k, 1.0);
                }
            }
        }
    }
    Ok(out)
}

pub fn voxel_count(v: &Volume) -> usize {
    v.data().iter().filter(|&&x| x > 0.5).count()
}

/// Dice overlap of two binary volumes; both empty gives 1.
pub fn dsc(a: &Volume, b: &Volume) -> Result<f64> {
    if !a.same_geometry(b) {
        return Err(Error::ShapeMismatch(format!(
            "volumes differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x > 0.5, y > 0.5);
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// A point set with an exact nearest-neighbour index: a median-split
/// bounding-box tree searched depth-first, nearer child first.
pub struct PointSet {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

const LEAF_SIZE: usize = 16;

struct Node {
    lo: Vec3,
    hi: Vec3,
    /// Leaves cover `order[start..end]`; inner nodes have `left`/`right`.
    start: usize,
    end: usize,
    children: Option<(usize, usize)>,
}

impl Node {
    fn dist2(&self, p: Vec3) -> f64 {
        let mut d = 0.0;
        for a in 0..3 {
            let excess = (self.lo[a] - p[a]).max(p[a] - self.hi[a]).max(0.0);
            d += excess * excess;
        }
        d
    }
}

impl PointSet {
    pub fn new(points: Vec<Vec3>) -> Result<PointSet> {
        if points.is_empty() {
            return Err(Error::EmptyPointSet);
        }
        let mut set = PointSet {
            order: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
        };
        set.build(0, set.points.len());
        Ok(set)
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let mut lo = Vec3::splat(f64::INFINITY);
        let mut hi = Vec3::splat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            let p = self.points[i];
            lo = Vec3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
            hi = Vec3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
        }
        let id = self.nodes.len();
        self.nodes.push(Node { lo, hi, start, end, children: None });
        if end - start > LEAF_SIZE {
            let axis = (hi - lo).max_abs_axis();
            let mid = (start + end) / 2;
            let points = &self.points;
            self.order[start..end]
                .select_nth_unstable_by(mid - start, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
            let left = self.build(start, mid);
            let right = self.build(mid, end);
            self.nodes[id].children = Some((left, right));
        }
        id
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `min_{s' in S} |s - s'|`.
    pub fn distance(&self, s: Vec3) -> f64 {
        self.nearest_below(s, f64::INFINITY).sqrt()
    }

    /// Smallest squared distance from `s` if it is below `bound2`,
    /// otherwise some value `>= bound2`.
    fn nearest_below(&self, s: Vec3, bound2: f64) -> f64 {
        let mut best = bound2;
        let mut stack = vec![(self.nodes[0].dist2(s), 0usize)];
        while let Some((d2, n)) = stack.pop() {
            if d2 >= best {
                continue;
            }
            let node = &self.nodes[n];
            match node.children {
                Some((l, r)) => {
                    let (dl, dr) = (self.nodes[l].dist2(s), self.nodes[r].dist2(s));
                    // push the farther child first so the nearer is searched first
                    if dl <= dr {
                        stack.push((dr, r));
                        stack.push((dl, l));
                    } else {
                        stack.push((dl, l));
                        stack.push((dr, r));
                    }
                }
                None => {
                    for &i in &self.order[node.start..node.end] {
                        best = best.min((self.points[i] - s).norm_squared());
                    }
                }
            }
        }
        best
    }

    /// `true` if some point lies strictly closer than `sqrt(bound2)`.
    fn any_within(&self, s: Vec3, bound2: f64) -> bool {
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if node.dist2(s) >= bound2 {
                continue;
            }
            match node.children {
                Some((l, r)) => {
                    stack.push(r);
                    stack.push(l);
                }
                None => {
                    if self.order[node.start..node.end]
                        .iter()
                        .any(|&i| (self.points[i] - s).norm_squared() < bound2)
                    {
                        return true;
                    }
                }
            }
        }
        false
    }

    /// `max_{a in self} min_{b in other} |a - b|`, skipping every point
    /// that has a neighbour closer than the running maximum.
    pub fn directed_hausdorff(&self, other: &PointSet) -> f64 {
        let mut cmax2 = 0.0f64;
        for &p in &self.points {
            if cmax2 > 0.0 && other.any_within(p, cmax2) {
                continue;
            }
            cmax2 = cmax2.max(other.nearest_below(p, f64::INFINITY));
        }
        cmax2.sqrt()
    }

    fn directed<'a>(&'a self, other: &'a PointSet) -> impl Iterator<Item = f64> + 'a {
        self.points.iter().map(move |&p| other.distance(p))
    }
}

pub fn point_surface_distance(s: Vec3, set: &PointSet) -> f64 {
    set.distance(s)
}

/// Symmetric Hausdorff distance: the larger directed maximum.
pub fn hd(a: &PointSet, b: &PointSet) -> f64 {
    a.directed_hausdorff(b).max(b.directed_hausdorff(a))
}

/// Sum of both directed distance sets over the total number of points.
pub fn asd(a: &PointSet, b: &PointSet) -> f64 {
    let sum: f64 = a.directed(b).sum::<f64>() + b.directed(a).sum::<f64>();
    sum / (a.len() + b.len()) as f64
}

const MAX_SUBDIVISION_DEPTH: u32 = 12;

/// Mesh vertices plus centroids of faces split 1-to-4 until every edge is
/// at most `max_edge`.
pub fn surface_samples(m: &TriMesh, max_edge: f64) -> Vec<Vec3> {
    fn split(a: Vec3, b: Vec3, c: Vec3, max_edge: f64, depth: u32, out: &mut Vec<Vec3>) {
        let longest = a.distance(b).max(b.distance(c)).max(c.distance(a));
        if longest <= max_edge || depth >= MAX_SUBDIVISION_DEPTH {
            out.push((a + b + c) / 3.0);
            return;
        }
        let (ab, bc, ca) = ((a + b) * 0.5, (b + c) * 0.5, (c + a) * 0.5);
        split(a, ab, ca, max_edge, depth + 1, out);
        split(ab, b, bc, max_edge, depth + 1, out);
        split(ca, bc, c, max_edge, depth + 1, out);
        split(ab, bc, ca, max_edge, depth + 1, out);
    }
    let mut out = m.vertices.clone();
    for f in 0..m.faces.len() {
        let [a, b, c] = m.face_points(f);
        split(a, b, c, max_edge, 0, &mut out);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dsc: f64,
    pub hd_mm: f64,
    pub asd_mm: f64,
    pub predicted_voxels: usize,
    pub reference_voxels: usize,
}

impl MetricsReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &(serde_json::to_string_pretty(self)? + "\n"))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<MetricsReport> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Compares a predicted surface with a reference. The prediction is
/// voxelized on the reference label lattice; surfaces are sampled so that
/// no sub-triangle edge exceeds half the smallest voxel spacing.
pub fn evaluate(predicted: &TriMesh, reference: &TriMesh, reference_labels: &Volume) -> Result<MetricsReport> {
    let labels = voxelize(predicted, reference_labels)?;
    let max_edge = 0.5 * reference_labels.spacing().iter().copied().fold(f64::INFINITY, f64::min);
    let a = PointSet::new(surface_samples(predicted, max_edge))?;
    let b = PointSet::new(surface_samples(reference, max_edge))?;
    Ok(MetricsReport {
        dsc: dsc(&labels, reference_labels)?,
        hd_mm: hd(&a, &b),
        asd_mm: asd(&a, &b),
        predicted_voxels: voxel_count(&labels),
        reference_voxels: voxel_count(reference_labels),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::icosphere;
    use crate::volume::{PhantomSpec, PhantomShape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sphere(r: f64, level: u32, center: Vec3) -> TriMesh {
        let mut m = icosphere(level);
        m.vertices.iter_mut().for_each(|v| *v = *v * r + center);
        m
    }

    fn lattice(n: usize) -> Volume {
        let o = -(n as f64 - 1.0) / 2.0;
        Volume::filled([n; 3], [1.0; 3], [o; 3], 0.0).unwrap()
    }

    fn box_mesh(lo: Vec3, hi: Vec3) -> TriMesh {
        let c = crate::mesh::tests::cube();
        let v = c
            .vertices
            .iter()
            .map(|p| Vec3::new(
                lo.x + (hi.x - lo.x) * p.x,
                lo.y + (hi.y - lo.y) * p.y,
                lo.z + (hi.z - lo.z) * p.z,
            ))
            .collect();
        TriMesh::new(v, c.faces)
    }

    #[test]
    fn cube_volume() {
        let t = lattice(24);
        let m = box_mesh(Vec3::splat(-4.9), Vec3::splat(5.1));
        let n = voxel_count(&voxelize(&m, &t).unwrap()) as f64;
        assert!((n - 1000.0).abs() <= 50.0, "{n}");
    }

    #[test]
    fn cube_on_voxel_planes_is_exact() {
        // faces exactly on voxel centres exercise the tie rules
        let t = lattice(24);
        let m = box_mesh(Vec3::splat(-4.5), Vec3::splat(5.5));
        let n = voxel_count(&voxelize(&m, &t).unwrap());
        assert!((900..=1331).contains(&n), "{n}");
    }

    #[test]
    fn sphere_volume() {
        let t = lattice(40);
        for r in [10.0, 12.5] {
            let m = sphere(r, 5, Vec3::new(0.21, -0.13, 0.07));
            let n = voxel_count(&voxelize(&m, &t).unwrap()) as f64;
            let want = 4.0 / 3.0 * std::f64::consts::PI * r * r * r;
            assert!((n - want).abs() / want < 0.05, "{n} vs {want}");
        }
    }

    #[test]
    fn outside_mesh_is_empty() {
        let t = lattice(16);
        let m = sphere(3.0, 2, Vec3::new(100.0, 0.0, 0.0));
        assert_eq!(voxel_count(&voxelize(&m, &t).unwrap()), 0);
    }

    #[test]
    fn open_mesh_rejected() {
        let mut m = icosphere(1);
        m.faces.pop();
        assert!(matches!(voxelize(&m, &lattice(8)), Err(Error::InvalidMesh(_))));
    }

    #[test]
    fn dsc_examples() {
        let mut a = lattice(4);
        a.data_mut()[..32].iter_mut().for_each(|v| *v = 1.0);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        let mut b = lattice(4);
        b.data_mut()[32..].iter_mut().for_each(|v| *v = 1.0);
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);
        let mut c = lattice(4);
        c.data_mut()[16..48].iter_mut().for_each(|v| *v = 1.0);
        assert_eq!(dsc(&a, &c).unwrap(), 0.5);
        assert_eq!(dsc(&lattice(4), &lattice(4)).unwrap(), 1.0);
        assert_eq!(dsc(&a, &lattice(4)).unwrap(), 0.0);
        assert!(matches!(dsc(&a, &lattice(5)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn dsc_symmetric_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = lattice(6);
        let mut b = lattice(6);
        a.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0..2) as f32);
        b.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0..2) as f32);
        let d = dsc(&a, &b).unwrap();
        assert_eq!(d, dsc(&b, &a).unwrap());
        let perm: Vec<usize> = (0..a.len()).rev().collect();
        let mut pa = a.clone();
        let mut pb = b.clone();
        for (i, &p) in perm.iter().enumerate() {
            pa.data_mut()[i] = a.data()[p];
            pb.data_mut()[i] = b.data()[p];
        }
        assert_eq!(dsc(&pa, &pb).unwrap(), d);
    }

    #[test]
    fn nearest_neighbour_examples() {
        let s = PointSet::new(vec![Vec3::ZERO]).unwrap();
        assert_eq!(s.distance(Vec3::new(3.0, 4.0, 0.0)), 5.0);
        assert_eq!(s.distance(Vec3::ZERO), 0.0);
        assert!(matches!(PointSet::new(vec![]), Err(Error::EmptyPointSet)));
    }

    #[test]
    fn nearest_neighbour_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.random_range(1..200);
            // coarse coordinates produce many exact coordinate repeats
            let pts: Vec<Vec3> = (0..n)
                .map(|_| Vec3::new(
                    rng.random_range(-5..5) as f64,
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-2..2) as f64,
                ))
                .collect();
            let set = PointSet::new(pts.clone()).unwrap();
            for _ in 0..10 {
                let q = Vec3::new(rng.random_range(-7.0..7.0), rng.random_range(-7.0..7.0), rng.random_range(-7.0..7.0));
                let brute = pts.iter().map(|p| p.distance(q)).fold(f64::INFINITY, f64::min);
                assert!((set.distance(q) - brute).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn hausdorff_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let gen = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec3> {
                (0..n)
                    .map(|_| Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0)))
                    .collect()
            };
            let (na, nb) = (rng.random_range(1..120), rng.random_range(1..120));
            let a = gen(&mut rng, na);
            let b = gen(&mut rng, nb);
            let directed = |x: &[Vec3], y: &[Vec3]| {
                x.iter()
                    .map(|p| y.iter().map(|q| p.distance(*q)).fold(f64::INFINITY, f64::min))
                    .fold(0.0, f64::max)
            };
            let want = directed(&a, &b).max(directed(&b, &a));
            let got = hd(&PointSet::new(a).unwrap(), &PointSet::new(b).unwrap());
            assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn concentric_spheres() {
        let a = PointSet::new(surface_samples(&sphere(20.0, 4, Vec3::ZERO), 0.5)).unwrap();
        let b = PointSet::new(surface_samples(&sphere(22.0, 4, Vec3::ZERO), 0.5)).unwrap();
        let h = hd(&a, &b);
        let s = asd(&a, &b);
        assert!((h - 2.0).abs() <= 0.2, "{h}");
        assert!((s - 2.0).abs() <= 0.2, "{s}");
        assert_eq!(h, hd(&b, &a));
        assert!((s - asd(&b, &a)).abs() < 1e-12);
        assert!(s <= h);
        assert_eq!(hd(&a, &a), 0.0);
        assert_eq!(asd(&a, &a), 0.0);
    }

    #[test]
    fn samples_respect_edge_bound() {
        let m = sphere(10.0, 1, Vec3::ZERO);
        let pts = surface_samples(&m, 0.5);
        assert!(pts.len() > m.vertices.len() + m.faces.len());
        // every centroid lies within the original triangle plane bound
        assert!(pts.iter().all(|p| p.norm() <= 10.0 + 1e-9));
    }

    #[test]
    fn phantom_mesh_voxelizes_close_to_labels() {
        let spec = PhantomSpec {
            shape: PhantomShape::Ellipsoid { semi_axes: [25.0, 22.0, 25.0] },
            mesh_level: 5,
            ..PhantomSpec::default()
        };
        let labels = spec.labels().unwrap();
        let mesh = spec.shape.boundary_mesh(5);
        let vox = voxelize(&mesh, &labels).unwrap();
        assert!(dsc(&vox, &labels).unwrap() >= 0.98);
    }

    #[test]
    fn report_round_trip() {
        let r = MetricsReport { dsc: 0.9, hd_mm: 2.5, asd_mm: 0.4, predicted_voxels: 10, reference_voxels: 11 };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        r.save(&p).unwrap();
        assert_eq!(MetricsReport::load(&p).unwrap(), r);
    }
}
