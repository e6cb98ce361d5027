//! Column sampling along quad-mesh normals, per-column ground truth and
//! back-projection of surface labelings.
//!
//! Each of the six cube faces yields a patch of `(n + 1 + 2p)^2` columns:
//! the face grid plus `p` rings of padding borrowed from the neighbouring
//! faces. Every quad vertex is *owned* by exactly one column, the one on
//! the lowest-id face that contains it. Other columns showing the same
//! vertex (seam duplicates and padding) are linked copies.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::mesh::{write_file, TriMesh};
use crate::quadsphere::{quads_to_tri_mesh, QuadMesh, QuadSphere};
use crate::ray::BoundedMesh;
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub vertex: usize,
    /// Patch grid coordinates, pads included (0-based).
    pub x: usize,
    pub y: usize,
    /// Outside the face grid.
    pub pad: bool,
    /// The single column that represents `vertex`.
    pub owned: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub face: usize,
    pub width: usize,
    pub columns: Vec<Column>,
    /// `columns.len() * column_length` samples, column after column.
    pub samples: Vec<f64>,
}

impl Patch {
    pub fn column_samples(&self, col: usize, z: usize) -> &[f64] {
        &self.samples[col * z..(col + 1) * z]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub level: u32,
    pub pad: usize,
    pub column_length: usize,
    /// Column sample spacing in mm.
    pub resolution: f64,
    /// Sample index that sits on the pre-segmentation surface.
    pub center: usize,
    /// Base point of each vertex's column.
    pub bases: Vec<Vec3>,
    /// Unit sampling direction of each vertex's column.
    pub dirs: Vec<Vec3>,
    pub quads: Vec<[usize; 4]>,
    pub patches: Vec<Patch>,
    /// `(patch, column)` owning each vertex.
    pub owners: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColumnSpec {
    /// Samples per column.
    pub length: usize,
    /// Spacing between samples in mm.
    pub resolution: f64,
    /// Rings of padding columns borrowed from adjacent faces.
    pub pad: usize,
}

impl Default for ColumnSpec {
    fn default() -> Self {
        ColumnSpec {
            length: 32,
            resolution: 0.5,
            pad: 3,
        }
    }
}

impl ColumnSpec {
    pub fn center(&self) -> usize {
        self.length / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.length < 2 || !(self.resolution > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "column length must be >= 2 and resolution > 0, got {} / {}",
                self.length, self.resolution
            )));
        }
        Ok(())
    }
}

impl PatchSet {
    pub fn num_vertices(&self) -> usize {
        self.bases.len()
    }

    /// World point of sample `i` of `vertex`'s column.
    pub fn sample_point(&self, vertex: usize, i: f64) -> Vec3 {
        self.bases[vertex] + self.dirs[vertex] * ((i - self.center as f64) * self.resolution)
    }

    /// Copies a per-vertex field onto every column of every patch.
    pub fn split<T: Clone>(&self, per_vertex: &[T]) -> Vec<Vec<T>> {
        assert_eq!(per_vertex.len(), self.num_vertices());
        self.patches
            .iter()
            .map(|p| p.columns.iter().map(|c| per_vertex[c.vertex].clone()).collect())
            .collect()
    }

    /// Collects a per-column field back to vertices from owning columns.
    pub fn merge<T: Clone>(&self, per_column: &[Vec<T>]) -> Vec<T> {
        self.owners
            .iter()
            .map(|&(p, c)| per_column[p][c].clone())
            .collect()
    }

    /// Back-projects per-vertex surface indices to world positions.
    pub fn labeling_to_world(&self, labels: &[usize]) -> QuadSurface {
        assert_eq!(labels.len(), self.num_vertices());
        QuadSurface {
            positions: labels
                .iter()
                .enumerate()
                .map(|(v, &n)| self.sample_point(v, n as f64))
                .collect(),
            quads: self.quads.clone(),
        }
    }

    /// Writes one `.svol` per patch plus `patches.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let z = self.column_length;
        for p in &self.patches {
            let w = p.width;
            let mut data = vec![0f32; w * w * z];
            for (ci, col) in p.columns.iter().enumerate() {
                for k in 0..z {
                    data[col.x + w * (col.y + w * k)] = p.samples[ci * z + k] as f32;
                }
            }
            let vol = Volume::new([w, w, z], [1.0, 1.0, self.resolution], [0.0; 3], data)?;
            vol.save_svol(dir.join(format!("patch_{}.svol", p.face)))?;
        }
        let side = PatchSidecar {
            level: self.level,
            pad: self.pad,
            column_length: self.column_length,
            resolution: self.resolution,
            center: self.center,
            bases: self.bases.clone(),
            dirs: self.dirs.clone(),
            patches: self
                .patches
                .iter()
                .map(|p| PatchMeta {
                    face: p.face,
                    width: p.width,
                    columns: p.columns.clone(),
                })
                .collect(),
        };
        write_file(&dir.join("patches.json"), &serde_json::to_string(&side)?)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<PatchSet> {
        let dir = dir.as_ref();
        let meta_path = dir.join("patches.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let side: PatchSidecar = serde_json::from_str(&text)?;
        let qs = QuadSphere::build(side.level)?;
        let z = side.column_length;
        let mut patches = Vec::with_capacity(side.patches.len());
        for meta in side.patches {
            let vol = Volume::load_svol(dir.join(format!("patch_{}.svol", meta.face)))?;
            let w = meta.width;
            if vol.dims() != [w, w, z] {
                return Err(Error::ShapeMismatch(format!(
                    "patch {} has dims {:?}, expected {:?}",
                    meta.face,
                    vol.dims(),
                    [w, w, z]
                )));
            }
            let mut samples = vec![0.0; meta.columns.len() * z];
            for (ci, col) in meta.columns.iter().enumerate() {
                for k in 0..z {
                    samples[ci * z + k] = vol.get(col.x, col.y, k) as f64;
                }
            }
            patches.push(Patch {
                face: meta.face,
                width: w,
                columns: meta.columns,
                samples,
            });
        }
        let owners = owners_of(&patches, side.bases.len())?;
        Ok(PatchSet {
            level: side.level,
            pad: side.pad,
            column_length: z,
            resolution: side.resolution,
            center: side.center,
            bases: side.bases,
            dirs: side.dirs,
            quads: qs.quads().to_vec(),
            patches,
            owners,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct PatchMeta {
    face: usize,
    width: usize,
    columns: Vec<Column>,
}

#[derive(Serialize, Deserialize)]
struct PatchSidecar {
    level: u32,
    pad: usize,
    column_length: usize,
    resolution: f64,
    center: usize,
    bases: Vec<Vec3>,
    dirs: Vec<Vec3>,
    patches: Vec<PatchMeta>,
}

fn owners_of(patches: &[Patch], num_vertices: usize) -> Result<Vec<(usize, usize)>> {
    let mut owners: Vec<Option<(usize, usize)>> = vec![None; num_vertices];
    for (pi, p) in patches.iter().enumerate() {
        for (ci, c) in p.columns.iter().enumerate() {
            if !c.owned {
                continue;
            }
            if c.vertex >= num_vertices {
                return Err(Error::ShapeMismatch(format!("column references vertex {}", c.vertex)));
            }
            if let Some(prev) = owners[c.vertex] {
                return Err(Error::ShapeMismatch(format!(
                    "vertex {} owned by both {prev:?} and {:?}",
                    c.vertex,
                    (pi, ci)
                )));
            }
            owners[c.vertex] = Some((pi, ci));
        }
    }
    owners
        .into_iter()
        .enumerate()
        .map(|(v, o)| o.ok_or_else(|| Error::ShapeMismatch(format!("vertex {v} has no owning column"))))
        .collect()
}

/// Column geometry only: the patch layout for `qm` without sampling.
pub fn patch_layout(qm: &QuadMesh, spec: &ColumnSpec) -> Result<PatchSet> {
    spec.validate()?;
    let qs = &qm.sphere;
    let n = qs.n();
    if spec.pad > n {
        return Err(Error::InvalidArgument(format!(
            "pad width {} exceeds face size {n}",
            spec.pad
        )));
    }
    let p = spec.pad as isize;
    let width = n + 1 + 2 * spec.pad;
    let mut patches = Vec::with_capacity(6);
    for face in 0..6 {
        let mut columns = Vec::with_capacity(width * width);
        for y in 0..width {
            for x in 0..width {
                let (i, j) = (x as isize - p, y as isize - p);
                let pad = i < 0 || j < 0 || i > n as isize || j > n as isize;
                let vertex = qs.vertex_at_extended(face, i, j).ok_or_else(|| {
                    Error::InvalidArgument(format!("no vertex at padded slot ({i}, {j}) of face {face}"))
                })?;
                let owned = !pad && qs.owner(vertex).face == face;
                columns.push(Column {
                    vertex,
                    x,
                    y,
                    pad,
                    owned,
                });
            }
        }
        patches.push(Patch {
            face,
            width,
            columns,
            samples: Vec::new(),
        });
    }
    let owners = owners_of(&patches, qs.vertices().len())?;
    Ok(PatchSet {
        level: qs.level(),
        pad: spec.pad,
        column_length: spec.length,
        resolution: spec.resolution,
        center: spec.center(),
        bases: qm.positions.clone(),
        dirs: qm.normals.clone(),
        quads: qs.quads().to_vec(),
        patches,
        owners,
    })
}

/// Samples every column of every patch from `vol` by trilinear
/// interpolation.
pub fn sample_columns(vol: &Volume, qm: &QuadMesh, spec: &ColumnSpec) -> Result<PatchSet> {
    let mut ps = patch_layout(qm, spec)?;
    let z = ps.column_length;
    let per_vertex: Vec<Vec<f64>> = (0..ps.num_vertices())
        .map(|v| (0..z).map(|k| vol.trilinear_sample(ps.sample_point(v, k as f64))).collect())
        .collect();
    for patch in &mut ps.patches {
        patch.samples = patch
            .columns
            .iter()
            .flat_map(|c| per_vertex[c.vertex].iter().copied())
            .collect();
    }
    Ok(ps)
}

/// Surface index of the reference surface on each vertex's column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub column_length: usize,
    pub labels: Vec<usize>,
    pub valid: Vec<bool>,
}

impl GroundTruth {
    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &serde_json::to_string(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<GroundTruth> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Intersects each column line with `reference` and keeps the hit nearest
/// to the base point (ties go to the inward side). The label is that
/// offset rounded to the nearest sample, clamped to the column.
pub fn ground_truth(ps: &PatchSet, reference: &TriMesh) -> GroundTruth {
    let bounded = BoundedMesh::new(reference);
    let z = ps.column_length;
    let mut labels = Vec::with_capacity(ps.num_vertices());
    let mut valid = Vec::with_capacity(ps.num_vertices());
    for v in 0..ps.num_vertices() {
        let hits = bounded.line_hits(ps.bases[v], ps.dirs[v]);
        let nearest = hits
            .iter()
            .map(|h| h.t)
            .min_by(|a, b| a.abs().total_cmp(&b.abs()).then(a.total_cmp(b)));
        match nearest {
            Some(t) => {
                let g = (t / ps.resolution).round() + ps.center as f64;
                labels.push(g.clamp(0.0, (z - 1) as f64) as usize);
                valid.push(true);
            }
            None => {
                labels.push(ps.center);
                valid.push(false);
            }
        }
    }
    GroundTruth {
        column_length: z,
        labels,
        valid,
    }
}

/// A closed quad surface sharing the cube-sphere connectivity.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadSurface {
    pub positions: Vec<Vec3>,
    pub quads: Vec<[usize; 4]>,
}

impl QuadSurface {
    pub fn to_tri_mesh(&self) -> TriMesh {
        quads_to_tri_mesh(&self.positions, &self.quads)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = String::new();
        crate::mesh::write_polys(&mut s, &self.positions, self.quads.iter().map(|q| &q[..]));
        write_file(path.as_ref(), &s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<QuadSurface> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (positions, polys) = crate::mesh::parse_polys(&text, &[4])?;
        Ok(QuadSurface {
            positions,
            quads: polys.into_iter().map(|p| [p[0], p[1], p[2], p[3]]).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{icosphere, SphereMap};
    use crate::quadsphere::remesh;

    fn sphere_quad_mesh(radius: f64, tri_level: u32, quad_level: u32) -> (TriMesh, QuadMesh) {
        let unit = icosphere(tri_level);
        let map = SphereMap {
            faces: unit.faces.clone(),
            positions: unit.vertices.clone(),
        };
        let mut m = unit.clone();
        for v in &mut m.vertices {
            *v = *v * radius;
        }
        let qm = remesh(&m, &map, &QuadSphere::build(quad_level).unwrap()).unwrap();
        (m, qm)
    }

    fn test_volume(f: impl Fn(Vec3) -> f64) -> Volume {
        let dims = [48, 48, 48];
        let mut v = Volume::filled(dims, [1.0; 3], [-23.5; 3], 0.0).unwrap();
        for k in 0..48 {
            for j in 0..48 {
                for i in 0..48 {
                    let p = v.voxel_center(i, j, k);
                    v.set(i, j, k, f(p) as f32);
                }
            }
        }
        v
    }

    #[test]
    fn constant_volume_gives_constant_samples() {
        let (_, qm) = sphere_quad_mesh(10.0, 3, 2);
        let vol = test_volume(|_| 2.5);
        let ps = sample_columns(&vol, &qm, &ColumnSpec { length: 8, resolution: 1.0, pad: 1 }).unwrap();
        assert!(ps.patches.iter().all(|p| p.samples.iter().all(|&s| (s - 2.5).abs() < 1e-12)));
        assert_eq!(ps.patches.len(), 6);
        assert_eq!(ps.patches[0].width, 4 + 1 + 2);
    }

    #[test]
    fn column_geometry_identity() {
        let (_, qm) = sphere_quad_mesh(10.0, 3, 3);
        let spec = ColumnSpec { length: 64, resolution: 0.625, pad: 2 };
        let ps = patch_layout(&qm, &spec).unwrap();
        assert_eq!(ps.center, 32);
        for v in 0..ps.num_vertices() {
            assert_eq!(ps.sample_point(v, 32.0), qm.positions[v]);
            let p = ps.sample_point(v, 40.0);
            let expected = qm.positions[v] + qm.normals[v] * (8.0 * 0.625);
            assert!(p.distance(expected) < 1e-12);
        }
    }

    #[test]
    fn linear_field_gives_affine_columns() {
        let (_, qm) = sphere_quad_mesh(10.0, 3, 2);
        let a = 0.7;
        let vol = test_volume(|p| a * p.z);
        let spec = ColumnSpec { length: 10, resolution: 0.5, pad: 0 };
        let ps = sample_columns(&vol, &qm, &spec).unwrap();
        for patch in &ps.patches {
            for (ci, col) in patch.columns.iter().enumerate() {
                let s = patch.column_samples(ci, 10);
                let slope = a * 0.5 * ps.dirs[col.vertex].z;
                for k in 1..10 {
                    assert!((s[k] - s[k - 1] - slope).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn ownership_is_a_bijection() {
        let (_, qm) = sphere_quad_mesh(10.0, 2, 3);
        let ps = patch_layout(&qm, &ColumnSpec { length: 4, resolution: 1.0, pad: 3 }).unwrap();
        let mut count = vec![0; ps.num_vertices()];
        for p in &ps.patches {
            for c in &p.columns {
                if c.owned {
                    assert!(!c.pad);
                    count[c.vertex] += 1;
                }
            }
        }
        assert!(count.iter().all(|&c| c == 1));
        let field: Vec<usize> = (0..ps.num_vertices()).map(|v| v * 7 + 1).collect();
        assert_eq!(ps.merge(&ps.split(&field)), field);
    }

    #[test]
    fn pads_never_reach_merged_output() {
        let (_, qm) = sphere_quad_mesh(10.0, 2, 2);
        let ps = patch_layout(&qm, &ColumnSpec { length: 4, resolution: 1.0, pad: 2 }).unwrap();
        let mut per_col = ps.split(&vec![0i64; ps.num_vertices()]);
        for (p, patch) in ps.patches.iter().enumerate() {
            for (c, col) in patch.columns.iter().enumerate() {
                if !col.owned {
                    per_col[p][c] = -1;
                }
            }
        }
        assert!(ps.merge(&per_col).iter().all(|&x| x == 0));
    }

    #[test]
    fn pads_are_grid_neighbours() {
        let (_, qm) = sphere_quad_mesh(10.0, 3, 3);
        let ps = patch_layout(&qm, &ColumnSpec { length: 4, resolution: 1.0, pad: 1 }).unwrap();
        let edges = qm.sphere.edges();
        for patch in &ps.patches {
            let w = patch.width;
            for c in &patch.columns {
                // a pad in the middle of a border row touches the face grid
                if c.pad && c.x > 1 && c.x < w - 2 && c.y == 0 {
                    let inner = patch.columns[c.x + w].vertex;
                    let e = (inner.min(c.vertex), inner.max(c.vertex));
                    assert!(edges.binary_search(&e).is_ok());
                }
            }
        }
    }

    #[test]
    fn ground_truth_of_same_surface_is_center() {
        let (m, qm) = sphere_quad_mesh(10.0, 3, 3);
        let ps = patch_layout(&qm, &ColumnSpec { length: 16, resolution: 0.5, pad: 0 }).unwrap();
        let gt = ground_truth(&ps, &m);
        assert_eq!(gt.num_valid(), ps.num_vertices());
        assert!(gt.labels.iter().all(|&g| g == 8));
    }

    #[test]
    fn ground_truth_of_inflated_sphere() {
        let delta = 0.5;
        let (unit, _) = sphere_quad_mesh(1.0, 5, 3);
        // preseg: a fine sphere of radius 10; reference inflated by 2 delta
        let qm = {
            let map = SphereMap { faces: unit.faces.clone(), positions: unit.vertices.clone() };
            let mut m = unit.clone();
            m.vertices.iter_mut().for_each(|v| *v = *v * 10.0);
            remesh(&m, &map, &QuadSphere::build(3).unwrap()).unwrap()
        };
        let mut reference = unit.clone();
        reference.vertices.iter_mut().for_each(|v| *v = *v * (10.0 + 2.0 * delta));
        let ps = patch_layout(&qm, &ColumnSpec { length: 16, resolution: delta, pad: 0 }).unwrap();
        let gt = ground_truth(&ps, &reference);
        assert!(gt.labels.iter().all(|&g| g == 10), "{:?}", &gt.labels[..10]);
    }

    #[test]
    fn ground_truth_picks_nearest_crossing() {
        // two parallel sheets on either side of the base point
        let near = TriMesh::new(
            vec![
                Vec3::new(-5.0, -5.0, 1.0),
                Vec3::new(5.0, -5.0, 1.0),
                Vec3::new(0.0, 5.0, 1.0),
                Vec3::new(-5.0, -5.0, -3.0),
                Vec3::new(5.0, -5.0, -3.0),
                Vec3::new(0.0, 5.0, -3.0),
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        );
        let (_, qm) = sphere_quad_mesh(1.0, 1, 0);
        let mut ps = patch_layout(&qm, &ColumnSpec { length: 16, resolution: 1.0, pad: 0 }).unwrap();
        ps.bases = vec![Vec3::ZERO; ps.num_vertices()];
        ps.dirs = vec![Vec3::Z; ps.num_vertices()];
        let gt = ground_truth(&ps, &near);
        assert!(gt.labels.iter().all(|&g| g == 9));
        ps.dirs = vec![Vec3::new(1.0, 0.0, 0.0); ps.num_vertices()];
        let gt = ground_truth(&ps, &near);
        assert_eq!(gt.num_valid(), 0);
    }

    #[test]
    fn labeling_round_trip() {
        let (_, qm) = sphere_quad_mesh(10.0, 4, 3);
        let ps = patch_layout(&qm, &ColumnSpec { length: 16, resolution: 0.5, pad: 1 }).unwrap();
        let same = ps.labeling_to_world(&vec![8; ps.num_vertices()]);
        assert_eq!(same.positions, qm.positions);
        let up = ps.labeling_to_world(&vec![9; ps.num_vertices()]);
        for (v, p) in up.positions.iter().enumerate() {
            assert!((p.distance(qm.positions[v]) - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn patch_set_save_load() {
        let (_, qm) = sphere_quad_mesh(10.0, 3, 2);
        let vol = test_volume(|p| p.x + 2.0 * p.y);
        let ps = sample_columns(&vol, &qm, &ColumnSpec { length: 6, resolution: 0.5, pad: 2 }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ps.save(dir.path()).unwrap();
        let back = PatchSet::load(dir.path()).unwrap();
        assert_eq!(back.owners, ps.owners);
        assert_eq!(back.bases, ps.bases);
        for (a, b) in back.patches.iter().zip(&ps.patches) {
            assert_eq!(a.columns, b.columns);
            for (x, y) in a.samples.iter().zip(&b.samples) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }
}
