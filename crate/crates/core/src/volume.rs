//! Scalar volumes: `.svol` I/O, trilinear sampling, isotropic resampling,
//! intensity standardization and synthetic phantoms.
//!
//! Layout is x fastest, z slowest. `origin` is the world position (mm) of
//! the centre of voxel `(0, 0, 0)`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::mesh::{icosphere, TriMesh};

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SvolHeader {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dtype: String,
}

const SVOL_DTYPE: &str = "f32le";

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("spacing must be > 0, got {spacing:?}")));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                found: data.len(),
            });
        }
        Ok(Volume {
            dims,
            spacing,
            origin,
            data,
        })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3], value: f32) -> Result<Self> {
        let n = dims.iter().product();
        Volume::new(dims, spacing, origin, vec![value; n])
    }

    /// Volume of the same geometry with every voxel set to `value`.
    pub fn like(&self, value: f32) -> Volume {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            data: vec![value; self.data.len()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f32) {
        let idx = self.index(i, j, k);
        self.data[idx] = v;
    }

    /// World position of the centre of voxel `(i, j, k)`.
    #[inline]
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        Vec3::new(
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        )
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn same_geometry(&self, other: &Volume) -> bool {
        self.dims == other.dims && self.spacing == other.spacing && self.origin == other.origin
    }

    /// Trilinear interpolation of the voxel-centre lattice at world point
    /// `p`. Coordinates outside the lattice clamp to the border.
    pub fn trilinear_sample(&self, p: Vec3) -> f64 {
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let u = ((p[a] - self.origin[a]) / self.spacing[a]).clamp(0.0, (n - 1) as f64);
            if n == 1 {
                base[a] = 0;
                frac[a] = 0.0;
                continue;
            }
            let i0 = (u.floor() as usize).min(n - 2);
            base[a] = i0;
            frac[a] = u - i0 as f64;
        }
        let step = [
            usize::from(self.dims[0] > 1),
            usize::from(self.dims[1] > 1),
            usize::from(self.dims[2] > 1),
        ];
        let mut acc = 0.0;
        for dz in 0..2 {
            let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
            if wz == 0.0 {
                continue;
            }
            for dy in 0..2 {
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                if wy == 0.0 {
                    continue;
                }
                for dx in 0..2 {
                    let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                    if wx == 0.0 {
                        continue;
                    }
                    let v = self.get(
                        base[0] + dx * step[0],
                        base[1] + dy * step[1],
                        base[2] + dz * step[2],
                    );
                    acc += wx * wy * wz * v as f64;
                }
            }
        }
        acc
    }

    /// Resample onto an isotropic lattice with the same origin. The output
    /// covers the input voxel-centre extent to within one output voxel.
    pub fn resample_isotropic(&self, target_spacing: f64) -> Result<Volume> {
        if !(target_spacing > 0.0) || !target_spacing.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "target spacing must be > 0, got {target_spacing}"
            )));
        }
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let extent = (self.dims[a] - 1) as f64 * self.spacing[a];
            dims[a] = (extent / target_spacing).round() as usize + 1;
        }
        let mut out = Volume::filled(dims, [target_spacing; 3], self.origin, 0.0)?;
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let p = out.voxel_center(i, j, k);
                    let v = self.trilinear_sample(p);
                    out.set(i, j, k, v as f32);
                }
            }
        }
        Ok(out)
    }

    /// Mean and population variance, accumulated in f64.
    pub fn moments(&self) -> (f64, f64) {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self
            .data
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        (mean, var)
    }

    /// Zero-mean, unit-variance copy.
    pub fn normalize(&self) -> Result<Volume> {
        let (mean, var) = self.moments();
        if !(var > 1e-20) {
            return Err(Error::ZeroVariance);
        }
        let std = var.sqrt();
        let data = self
            .data
            .iter()
            .map(|&v| ((v as f64 - mean) / std) as f32)
            .collect();
        Ok(Volume { data, ..self.clone() })
    }

    pub fn write_svol<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = SvolHeader {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            dtype: SVOL_DTYPE.to_string(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        w.flush()
    }

    pub fn read_svol<R: Read>(r: R) -> Result<Volume> {
        let mut r = BufReader::new(r);
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)
            .map_err(|e| Error::Header(e.to_string()))?;
        if line.last() != Some(&b'\n') {
            return Err(Error::Header("missing header line".into()));
        }
        let header: SvolHeader =
            serde_json::from_slice(&line).map_err(|e| Error::Header(e.to_string()))?;
        if header.dtype != SVOL_DTYPE {
            return Err(Error::Header(format!("unsupported dtype {:?}", header.dtype)));
        }
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)
            .map_err(|e| Error::Header(e.to_string()))?;
        let expected = header.dims.iter().product::<usize>();
        if raw.len() % 4 != 0 || raw.len() / 4 != expected {
            return Err(Error::LengthMismatch {
                expected,
                found: raw.len() / 4,
            });
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Volume::new(header.dims, header.spacing, header.origin, data)
    }

    pub fn save_svol(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_svol(BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_svol(path: impl AsRef<Path>) -> Result<Volume> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Volume::read_svol(f)
    }

    /// Separable Gaussian blur with `sigma_mm` in world units. Borders clamp.
    pub fn gaussian_blur(&self, sigma_mm: f64) -> Volume {
        if !(sigma_mm > 0.0) {
            return self.clone();
        }
        let mut cur: Vec<f64> = self.data.iter().map(|&v| v as f64).collect();
        let mut next = vec![0.0; cur.len()];
        let strides = [1, self.dims[0], self.dims[0] * self.dims[1]];
        for axis in 0..3 {
            let n = self.dims[axis];
            if n == 1 {
                continue;
            }
            let sigma = sigma_mm / self.spacing[axis];
            let radius = (3.0 * sigma).ceil() as isize;
            let mut weights: Vec<f64> = (-radius..=radius)
                .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            let stride = strides[axis];
            for (idx, out) in next.iter_mut().enumerate() {
                let pos = (idx / stride) % n;
                let line_start = idx - pos * stride;
                let mut acc = 0.0;
                for (w, d) in weights.iter().zip(-radius..=radius) {
                    let q = (pos as isize + d).clamp(0, n as isize - 1) as usize;
                    acc += w * cur[line_start + q * stride];
                }
                *out = acc;
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Volume {
            data: cur.into_iter().map(|v| v as f32).collect(),
            ..self.clone()
        }
    }
}

/// Analytic shape of a phantom, centred at the world origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PhantomShape {
    Ellipsoid {
        semi_axes: [f64; 3],
    },
    /// Sphere with radius `radius + amplitude * b(u)` along unit direction
    /// `u`, where `b(u) = sin(f pi u_x) sin(f pi u_y) sin(f pi u_z)`.
    BumpySphere {
        radius: f64,
        amplitude: f64,
        frequency: f64,
    },
}

impl PhantomShape {
    /// Radius of the boundary along unit direction `u`.
    pub fn boundary_radius(&self, u: Vec3) -> f64 {
        match *self {
            PhantomShape::Ellipsoid { semi_axes: [a, b, c] } => {
                1.0 / ((u.x / a).powi(2) + (u.y / b).powi(2) + (u.z / c).powi(2)).sqrt()
            }
            PhantomShape::BumpySphere {
                radius,
                amplitude,
                frequency,
            } => radius + amplitude * bump(u, frequency),
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        match *self {
            PhantomShape::Ellipsoid { semi_axes: [a, b, c] } => {
                (p.x / a).powi(2) + (p.y / b).powi(2) + (p.z / c).powi(2) <= 1.0
            }
            PhantomShape::BumpySphere { .. } => {
                let r = p.norm();
                r == 0.0 || r <= self.boundary_radius(p / r)
            }
        }
    }

    /// Half-extent along each axis of an axis-aligned box enclosing the shape.
    pub fn half_extent(&self) -> [f64; 3] {
        match *self {
            PhantomShape::Ellipsoid { semi_axes } => semi_axes,
            PhantomShape::BumpySphere {
                radius, amplitude, ..
            } => [radius + amplitude.abs(); 3],
        }
    }

    /// Boundary surface: an icosphere of the given level pushed onto the shape.
    pub fn boundary_mesh(&self, level: u32) -> TriMesh {
        let mut m = icosphere(level);
        for v in &mut m.vertices {
            let u = v.normalized();
            *v = match *self {
                PhantomShape::Ellipsoid { semi_axes: [a, b, c] } => Vec3::new(a * u.x, b * u.y, c * u.z),
                PhantomShape::BumpySphere { .. } => u * self.boundary_radius(u),
            };
        }
        m
    }

    fn validate(&self) -> Result<()> {
        match *self {
            PhantomShape::Ellipsoid { semi_axes } => {
                if semi_axes.iter().any(|&s| !(s > 0.0)) {
                    return Err(Error::InvalidArgument(format!(
                        "ellipsoid semi-axes must be > 0, got {semi_axes:?}"
                    )));
                }
            }
            PhantomShape::BumpySphere {
                radius, amplitude, ..
            } => {
                if !(radius > 0.0) || !(amplitude.abs() < radius) {
                    return Err(Error::InvalidArgument(format!(
                        "bumpy sphere needs radius > |amplitude|, got radius {radius}, amplitude {amplitude}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn bump(u: Vec3, frequency: f64) -> f64 {
    let w = frequency * std::f64::consts::PI;
    (w * u.x).sin() * (w * u.y).sin() * (w * u.z).sin()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub shape: PhantomShape,
    pub inside: f64,
    pub outside: f64,
    pub noise_sigma: f64,
    /// Gaussian blur sigma in mm; 0 disables blurring.
    pub blur_sigma: f64,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Noise seed. Not part of the serialized spec: runs derive it from
    /// their single top-level seed.
    #[serde(skip)]
    pub seed: u64,
    /// Icosphere subdivision level of the returned boundary mesh.
    pub mesh_level: u32,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: PhantomShape::Ellipsoid {
                semi_axes: [25.0, 22.0, 25.0],
            },
            inside: 1.0,
            outside: 0.0,
            noise_sigma: 0.3,
            blur_sigma: 1.0,
            dims: [64, 64, 64],
            spacing: [1.0, 1.0, 1.0],
            seed: 0,
            mesh_level: 4,
        }
    }
}

/// Minimum distance, in voxels, between the shape and the volume border.
pub const PHANTOM_MARGIN_VOXELS: f64 = 4.0;

impl PhantomSpec {
    /// Origin that centres the voxel lattice on the world origin.
    pub fn origin(&self) -> [f64; 3] {
        let mut o = [0.0; 3];
        for a in 0..3 {
            o[a] = -((self.dims[a] - 1) as f64) * self.spacing[a] / 2.0;
        }
        o
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) || self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "phantom dims {:?} / spacing {:?} invalid",
                self.dims, self.spacing
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(self.blur_sigma >= 0.0) {
            return Err(Error::InvalidArgument("noise and blur sigma must be >= 0".into()));
        }
        self.shape.validate()?;
        let ext = self.shape.half_extent();
        for a in 0..3 {
            let half = (self.dims[a] - 1) as f64 * self.spacing[a] / 2.0;
            let need = ext[a] + PHANTOM_MARGIN_VOXELS * self.spacing[a];
            if need > half {
                return Err(Error::ShapeDoesNotFit(format!(
                    "axis {a}: shape half-extent {:.3} mm plus margin needs {need:.3} mm, volume offers {half:.3} mm",
                    ext[a]
                )));
            }
        }
        Ok(())
    }

    /// Noise-free binary indicator of the analytic shape at voxel centres.
    pub fn labels(&self) -> Result<Volume> {
        self.validate()?;
        let mut vol = Volume::filled(self.dims, self.spacing, self.origin(), 0.0)?;
        for k in 0..self.dims[2] {
            for j in 0..self.dims[1] {
                for i in 0..self.dims[0] {
                    if self.shape.contains(vol.voxel_center(i, j, k)) {
                        vol.set(i, j, k, 1.0);
                    }
                }
            }
        }
        Ok(vol)
    }
}

/// Blurred two-level image of the shape plus seeded Gaussian noise, and the
/// analytic boundary mesh.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(Volume, TriMesh)> {
    let labels = spec.labels()?;
    let mut vol = labels.clone();
    for v in vol.data_mut() {
        *v = if *v > 0.5 { spec.inside as f32 } else { spec.outside as f32 };
    }
    let mut vol = vol.gaussian_blur(spec.blur_sigma);
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in vol.data_mut() {
            *v = (*v as f64 + normal.sample(&mut rng)) as f32;
        }
    }
    Ok((vol, spec.shape.boundary_mesh(spec.mesh_level)))
}
