//! Surface CRF over column grids.
//!
//! Labels index positions along a column, so a labeling is a height map
//! over each patch grid. Unary potentials are negative log-softmax of
//! per-sample surface logits. Pairwise potentials are `μ(|n_i - n_j|) k_ij`
//! where `k` is a sum of two Gaussian kernels over grid displacement and
//! column features, and `μ(d) = -exp(-d²/θc²)`.
//!
//! Storage conventions: a field over a grid is a flat `Vec<f64>` indexed
//! `column * z + label`, with `column = x + y * width`. A field over the
//! whole surface is one such vector per grid.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::write_file;
use crate::patches::PatchSet;
use crate::volume::Volume;

/// Logits are clamped to `±LOGIT_CLAMP` so potentials stay finite.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Per-column variance below which a gradient column is treated as flat.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// One field per grid, indexed `column * z + label`.
pub type GridField = Vec<Vec<f64>>;

/// A rectangular grid of columns. Columns with `owned == false` (padding or
/// seam duplicates) are read as neighbours but take their marginals from
/// the owning column of the same vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub vertex: Vec<usize>,
    pub owned: Vec<bool>,
    pub logits: Vec<f64>,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn neighbor(&self, col: usize, (ox, oy): (isize, isize)) -> Option<usize> {
        let x = (col % self.width) as isize + ox;
        let y = (col / self.width) as isize + oy;
        if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
            None
        } else {
            Some(x as usize + y as usize * self.width)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnaryField {
    pub column_length: usize,
    pub grids: Vec<Grid>,
    /// `(grid, column)` owning each vertex.
    pub owners: Vec<(usize, usize)>,
}

pub fn clamp_logit(x: f64) -> f64 {
    x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

/// Numerically stable softmax of `x` into `out`.
pub fn softmax_into(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    softmax_into(x, &mut out);
    out
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

impl UnaryField {
    /// A standalone grid where every column is its own vertex.
    pub fn from_grid(width: usize, height: usize, z: usize, logits: Vec<f64>) -> Result<Self> {
        let n = width * height;
        let grid = Grid {
            width,
            height,
            vertex: (0..n).collect(),
            owned: vec![true; n],
            logits,
        };
        UnaryField::new(z, vec![grid], (0..n).map(|c| (0, c)).collect())
    }

    /// Logits laid out like the patches of `ps`.
    pub fn from_patches(ps: &PatchSet, logits: Vec<Vec<f64>>) -> Result<Self> {
        if logits.len() != ps.patches.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} logit grids for {} patches",
                logits.len(),
                ps.patches.len()
            )));
        }
        let grids = ps
            .patches
            .iter()
            .zip(logits)
            .map(|(p, l)| Grid {
                width: p.width,
                height: p.width,
                vertex: p.columns.iter().map(|c| c.vertex).collect(),
                owned: p.columns.iter().map(|c| c.owned).collect(),
                logits: l,
            })
            .collect();
        UnaryField::new(ps.column_length, grids, ps.owners.clone())
    }

    pub fn new(z: usize, mut grids: Vec<Grid>, owners: Vec<(usize, usize)>) -> Result<Self> {
        if z == 0 {
            return Err(Error::InvalidArgument("column length must be positive".into()));
        }
        for (g, grid) in grids.iter_mut().enumerate() {
            let n = grid.len();
            if grid.vertex.len() != n || grid.owned.len() != n || grid.logits.len() != n * z {
                return Err(Error::ShapeMismatch(format!(
                    "grid {g}: {}x{} columns of length {z} need {} logits, got {}",
                    grid.width,
                    grid.height,
                    n * z,
                    grid.logits.len()
                )));
            }
            if let Some(bad) = grid.logits.iter().position(|v| v.is_nan()) {
                return Err(Error::NonFinite(format!("logit {bad} of grid {g} is NaN")));
            }
            grid.logits.iter_mut().for_each(|v| *v = clamp_logit(*v));
            if let Some(&v) = grid.vertex.iter().find(|&&v| v >= owners.len()) {
                return Err(Error::ShapeMismatch(format!("grid {g} references vertex {v}")));
            }
        }
        for (v, &(g, c)) in owners.iter().enumerate() {
            let ok = g < grids.len() && c < grids[g].len() && grids[g].owned[c] && grids[g].vertex[c] == v;
            if !ok {
                return Err(Error::ShapeMismatch(format!("bad owner ({g}, {c}) for vertex {v}")));
            }
        }
        Ok(UnaryField {
            column_length: z,
            grids,
            owners,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.owners.len()
    }

    pub fn column_logits(&self, grid: usize, col: usize) -> &[f64] {
        let z = self.column_length;
        &self.grids[grid].logits[col * z..(col + 1) * z]
    }

    pub fn vertex_logits(&self, v: usize) -> &[f64] {
        let (g, c) = self.owners[v];
        self.column_logits(g, c)
    }

    /// `ψ_u(l) = -log softmax(logits)(l)` for vertex `v`.
    pub fn psi(&self, v: usize, l: usize) -> f64 {
        let logits = self.vertex_logits(v);
        log_sum_exp(logits) - logits[l]
    }

    /// Per-vertex argmax of the logits.
    pub fn argmax_labels(&self) -> Vec<usize> {
        (0..self.num_vertices()).map(|v| argmax(self.vertex_logits(v))).collect()
    }

    /// Logits multiplied by `s`, clamped again.
    pub fn scaled(&self, s: f64) -> UnaryField {
        let mut out = self.clone();
        for g in &mut out.grids {
            g.logits.iter_mut().for_each(|v| *v = clamp_logit(*v * s));
        }
        out
    }

    /// Writes `unary_<g>.svol` grids of shape `(width, height, z)` and
    /// `unary.json` describing the layout.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let z = self.column_length;
        for (g, grid) in self.grids.iter().enumerate() {
            grid_volume(grid.width, grid.height, z, &grid.logits)?.save_svol(dir.join(format!("unary_{g}.svol")))?;
        }
        let layout = UnaryLayout {
            column_length: z,
            grids: self
                .grids
                .iter()
                .map(|g| GridLayout {
                    width: g.width,
                    height: g.height,
                    vertex: g.vertex.clone(),
                    owned: g.owned.clone(),
                })
                .collect(),
            owners: self.owners.clone(),
        };
        write_file(&dir.join("unary.json"), &serde_json::to_string(&layout)?)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<UnaryField> {
        let dir = dir.as_ref();
        let path = dir.join("unary.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let layout: UnaryLayout = serde_json::from_str(&text)?;
        let z = layout.column_length;
        let mut grids = Vec::with_capacity(layout.grids.len());
        for (g, gl) in layout.grids.into_iter().enumerate() {
            let vol = Volume::load_svol(dir.join(format!("unary_{g}.svol")))?;
            let logits = grid_from_volume(&vol, gl.width, gl.height, z)?;
            grids.push(Grid {
                width: gl.width,
                height: gl.height,
                vertex: gl.vertex,
                owned: gl.owned,
                logits,
            });
        }
        UnaryField::new(z, grids, layout.owners)
    }
}

#[derive(Serialize, Deserialize)]
struct GridLayout {
    width: usize,
    height: usize,
    vertex: Vec<usize>,
    owned: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct UnaryLayout {
    column_length: usize,
    grids: Vec<GridLayout>,
    owners: Vec<(usize, usize)>,
}

/// Packs a `column * z + l` field into a `(width, height, z)` volume.
pub fn grid_volume(width: usize, height: usize, z: usize, field: &[f64]) -> Result<Volume> {
    let mut data = vec![0f32; width * height * z];
    for col in 0..width * height {
        for l in 0..z {
            data[col + width * height * l] = field[col * z + l] as f32;
        }
    }
    Volume::new([width, height, z], [1.0; 3], [0.0; 3], data)
}

/// Inverse of [`grid_volume`].
pub fn grid_from_volume(vol: &Volume, width: usize, height: usize, z: usize) -> Result<Vec<f64>> {
    if vol.dims() != [width, height, z] {
        return Err(Error::ShapeMismatch(format!(
            "expected a {width}x{height}x{z} grid, got {:?}",
            vol.dims()
        )));
    }
    let mut out = vec![0.0; width * height * z];
    for col in 0..width * height {
        for l in 0..z {
            out[col * z + l] = vol.data()[col + width * height * l] as f64;
        }
    }
    Ok(out)
}

/// Surface-minus-background logit per sample.
pub fn channel_reduce(surface: &[f64], background: &[f64]) -> Result<Vec<f64>> {
    if surface.len() != background.len() {
        return Err(Error::ShapeMismatch(format!(
            "surface channel has {} values, background {}",
            surface.len(),
            background.len()
        )));
    }
    Ok(surface.iter().zip(background).map(|(s, b)| s - b).collect())
}

/// Builds a unary field from per-patch two-channel logit volumes of shape
/// `(width, width, z)`.
pub fn channel_reduce_patches(ps: &PatchSet, surface: &[Volume], background: &[Volume]) -> Result<UnaryField> {
    if surface.len() != ps.patches.len() || background.len() != ps.patches.len() {
        return Err(Error::ShapeMismatch(format!(
            "need {} volumes per channel, got {} and {}",
            ps.patches.len(),
            surface.len(),
            background.len()
        )));
    }
    let z = ps.column_length;
    let mut logits = Vec::with_capacity(ps.patches.len());
    for (p, (s, b)) in ps.patches.iter().zip(surface.iter().zip(background)) {
        let s = grid_from_volume(s, p.width, p.width, z)?;
        let b = grid_from_volume(b, p.width, p.width, z)?;
        logits.push(channel_reduce(&s, &b)?);
    }
    UnaryField::from_patches(ps, logits)
}

/// Which intensity transition marks the surface, walking along the column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    DarkToBright,
    BrightToDark,
    Magnitude,
}

/// Standardized derivative of one column. Central differences inside,
/// one-sided at the two ends.
pub fn column_gradient_logits(samples: &[f64], polarity: Polarity) -> Vec<f64> {
    let z = samples.len();
    let mut d: Vec<f64> = (0..z)
        .map(|i| {
            let g = if i == 0 {
                samples[1] - samples[0]
            } else if i == z - 1 {
                samples[z - 1] - samples[z - 2]
            } else {
                0.5 * (samples[i + 1] - samples[i - 1])
            };
            match polarity {
                Polarity::DarkToBright => g,
                Polarity::BrightToDark => -g,
                Polarity::Magnitude => g.abs(),
            }
        })
        .collect();
    let mean = d.iter().sum::<f64>() / z as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / z as f64;
    if var <= VARIANCE_FLOOR {
        d.iter_mut().for_each(|v| *v = 0.0);
    } else {
        let sd = var.sqrt();
        d.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
    d
}

/// Hand-crafted unary: standardized intensity derivative along each column.
pub fn gradient_unary(ps: &PatchSet, polarity: Polarity) -> Result<UnaryField> {
    let z = ps.column_length;
    if z < 3 {
        return Err(Error::InvalidArgument(format!("gradient unary needs columns of length >= 3, got {z}")));
    }
    let per_vertex: Vec<Vec<f64>> = ps
        .owners
        .iter()
        .map(|&(p, c)| column_gradient_logits(ps.patches[p].column_samples(c, z), polarity))
        .collect();
    let logits = ps
        .patches
        .iter()
        .map(|p| p.columns.iter().flat_map(|c| per_vertex[c.vertex].iter().copied()).collect())
        .collect();
    UnaryField::from_patches(ps, logits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelVariant {
    /// Appearance features are the initial softmax probabilities.
    Probability,
    /// Appearance features are the raw column intensities.
    Intensity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrfParams {
    pub w_p: f64,
    pub w1: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub theta3: f64,
    pub theta_comp: f64,
    /// Chebyshev radius of the message-passing window, in columns.
    pub window_radius: usize,
    pub iterations: usize,
    pub kernel: KernelVariant,
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams::prostate()
    }
}

impl CrfParams {
    pub fn prostate() -> Self {
        CrfParams {
            w_p: 1.0,
            w1: 3.0,
            theta1: 5.0,
            theta2: 0.2,
            theta3: 5.0,
            theta_comp: 5.0,
            window_radius: 3,
            iterations: 5,
            kernel: KernelVariant::Probability,
        }
    }

    pub fn spleen() -> Self {
        CrfParams {
            w_p: 0.3,
            w1: 0.2,
            ..CrfParams::prostate()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [self.theta1, self.theta2, self.theta3, self.theta_comp];
        if widths.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidArgument(format!("kernel widths must be positive, got {widths:?}")));
        }
        if !self.w_p.is_finite() || !self.w1.is_finite() {
            return Err(Error::InvalidArgument("kernel weights must be finite".into()));
        }
        if self.window_radius < 1 || self.iterations < 1 {
            return Err(Error::InvalidArgument(format!(
                "window radius and iterations must be >= 1, got {} and {}",
                self.window_radius, self.iterations
            )));
        }
        Ok(())
    }
}

/// `μ(d) = -exp(-d²/θc²)`.
pub fn compatibility(d: f64, theta_comp: f64) -> f64 {
    -(-(d * d) / (theta_comp * theta_comp)).exp()
}

/// `μ(0..z)`.
pub fn compat_table(z: usize, theta_comp: f64) -> Vec<f64> {
    (0..z).map(|d| compatibility(d as f64, theta_comp)).collect()
}

/// Kernel weight for squared grid distance `d2` and squared feature
/// distance `f2`.
pub fn kernel_value(p: &CrfParams, d2: f64, f2: f64) -> f64 {
    let appearance = (-d2 / (2.0 * p.theta1 * p.theta1) - f2 / (2.0 * p.theta2 * p.theta2)).exp();
    let smoothness = p.w1 * (-d2 / (2.0 * p.theta3 * p.theta3)).exp();
    appearance + smoothness
}

/// Window offsets within Chebyshev radius `r`, centre excluded.
pub fn window_offsets(r: usize) -> Vec<(isize, isize)> {
    let r = r as isize;
    let mut out = Vec::with_capacity(((2 * r + 1) * (2 * r + 1) - 1) as usize);
    for oy in -r..=r {
        for ox in -r..=r {
            if (ox, oy) != (0, 0) {
                out.push((ox, oy));
            }
        }
    }
    out
}

/// Kernel weights of every column towards its window neighbours. Offsets
/// that leave the grid carry weight 0.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelField {
    pub offsets: Vec<(isize, isize)>,
    /// Per grid, `column * offsets.len() + o`.
    pub weights: GridField,
    /// Squared feature distance per weight, kept so the field can be
    /// re-weighted for new parameters without recomputing features.
    pub feature_dist2: GridField,
}

impl KernelField {
    pub fn num_offsets(&self) -> usize {
        self.offsets.len()
    }

    pub fn weight(&self, grid: usize, col: usize, o: usize) -> f64 {
        self.weights[grid][col * self.offsets.len() + o]
    }

    /// Same window and features, weights recomputed for `params`.
    pub fn reweighted(&self, u: &UnaryField, params: &CrfParams) -> KernelField {
        let no = self.offsets.len();
        let mut out = self.clone();
        for (g, grid) in u.grids.iter().enumerate() {
            for col in 0..grid.len() {
                for (o, &off) in self.offsets.iter().enumerate() {
                    if grid.neighbor(col, off).is_some() {
                        let d2 = (off.0 * off.0 + off.1 * off.1) as f64;
                        out.weights[g][col * no + o] = kernel_value(params, d2, self.feature_dist2[g][col * no + o]);
                    }
                }
            }
        }
        out
    }
}

/// Softmax of the logits per column, seam and pad columns copied from
/// their owner.
pub fn initial_marginals(u: &UnaryField) -> GridField {
    let z = u.column_length;
    let mut q: GridField = u
        .grids
        .iter()
        .map(|g| {
            let mut out = vec![0.0; g.logits.len()];
            for (src, dst) in g.logits.chunks(z).zip(out.chunks_mut(z)) {
                softmax_into(src, dst);
            }
            out
        })
        .collect();
    refresh_links(u, &mut q);
    q
}

/// Copies every vertex's owned marginal onto its linked columns.
pub fn refresh_links(u: &UnaryField, q: &mut GridField) {
    let z = u.column_length;
    for g in 0..u.grids.len() {
        for c in 0..u.grids[g].len() {
            if u.grids[g].owned[c] {
                continue;
            }
            let (og, oc) = u.owners[u.grids[g].vertex[c]];
            if og == g {
                q[g].copy_within(oc * z..(oc + 1) * z, c * z);
            } else {
                let (dst, src) = split_two(q, g, og);
                dst[c * z..(c + 1) * z].copy_from_slice(&src[oc * z..(oc + 1) * z]);
            }
        }
    }
}

fn split_two(v: &mut [Vec<f64>], a: usize, b: usize) -> (&mut Vec<f64>, &Vec<f64>) {
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &lo[b])
    }
}

/// Per-grid feature vectors: initial softmax probabilities.
pub fn probability_features(u: &UnaryField) -> (GridField, usize) {
    (initial_marginals(u), u.column_length)
}

/// Per-grid feature vectors: raw column samples of `ps`.
pub fn intensity_features(u: &UnaryField, ps: &PatchSet) -> Result<(GridField, usize)> {
    let same = ps.patches.len() == u.grids.len()
        && ps.column_length == u.column_length
        && ps
            .patches
            .iter()
            .zip(&u.grids)
            .all(|(p, g)| p.columns.len() == g.len() && p.columns.iter().zip(&g.vertex).all(|(c, &v)| c.vertex == v));
    if !same {
        return Err(Error::ShapeMismatch("patch set does not match the unary layout".into()));
    }
    Ok((ps.patches.iter().map(|p| p.samples.clone()).collect(), ps.column_length))
}

/// Kernel field from fixed per-column features of dimension `dim`.
pub fn kernel_from_features(u: &UnaryField, features: &GridField, dim: usize, params: &CrfParams) -> KernelField {
    let offsets = window_offsets(params.window_radius);
    let no = offsets.len();
    let mut weights = Vec::with_capacity(u.grids.len());
    let mut dist2 = Vec::with_capacity(u.grids.len());
    for (g, grid) in u.grids.iter().enumerate() {
        let f = &features[g];
        let mut w = vec![0.0; grid.len() * no];
        let mut fd = vec![0.0; grid.len() * no];
        for col in 0..grid.len() {
            let fi = &f[col * dim..(col + 1) * dim];
            for (o, &off) in offsets.iter().enumerate() {
                if let Some(j) = grid.neighbor(col, off) {
                    let fj = &f[j * dim..(j + 1) * dim];
                    let f2: f64 = fi.iter().zip(fj).map(|(a, b)| (a - b) * (a - b)).sum();
                    let d2 = (off.0 * off.0 + off.1 * off.1) as f64;
                    w[col * no + o] = kernel_value(params, d2, f2);
                    fd[col * no + o] = f2;
                }
            }
        }
        weights.push(w);
        dist2.push(fd);
    }
    KernelField {
        offsets,
        weights,
        feature_dist2: dist2,
    }
}

/// Kernel field for `params.kernel`; the intensity variant needs the
/// sampled patches.
pub fn compute_kernel(u: &UnaryField, ps: Option<&PatchSet>, params: &CrfParams) -> Result<KernelField> {
    params.validate()?;
    let (features, dim) = match params.kernel {
        KernelVariant::Probability => probability_features(u),
        KernelVariant::Intensity => {
            let ps = ps.ok_or_else(|| {
                Error::InvalidArgument("the intensity kernel needs the sampled patches".into())
            })?;
            intensity_features(u, ps)?
        }
    };
    Ok(kernel_from_features(u, &features, dim, params))
}

/// `Q̃_i(l) = Σ_{j ∈ window(i)} k_ij Q_j(l)` for owned columns; linked
/// columns are left at zero.
pub fn message_pass(u: &UnaryField, kf: &KernelField, q: &GridField) -> GridField {
    let z = u.column_length;
    let no = kf.num_offsets();
    u.grids
        .iter()
        .enumerate()
        .map(|(g, grid)| {
            let mut out = vec![0.0; grid.len() * z];
            for col in 0..grid.len() {
                if !grid.owned[col] {
                    continue;
                }
                let acc = &mut out[col * z..(col + 1) * z];
                for (o, &off) in kf.offsets.iter().enumerate() {
                    let w = kf.weights[g][col * no + o];
                    if w == 0.0 {
                        continue;
                    }
                    if let Some(j) = grid.neighbor(col, off) {
                        for (a, &qj) in acc.iter_mut().zip(&q[g][j * z..(j + 1) * z]) {
                            *a += w * qj;
                        }
                    }
                }
            }
            out
        })
        .collect()
}

/// `Q̂_i(l) = Σ_{l'} μ(|l - l'|) Q̃_i(l')` on one flat field.
pub fn compat_transform_flat(qt: &[f64], z: usize, mu: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; qt.len()];
    for (src, dst) in qt.chunks(z).zip(out.chunks_mut(z)) {
        for (l, d) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (lp, &s) in src.iter().enumerate() {
                acc += mu[l.abs_diff(lp)] * s;
            }
            *d = acc;
        }
    }
    out
}

pub fn compat_transform(qt: &GridField, z: usize, theta_comp: f64) -> GridField {
    let mu = compat_table(z, theta_comp);
    qt.iter().map(|f| compat_transform_flat(f, z, &mu)).collect()
}

/// One Jacobi update `Q^t = softmax(logits - w_p Q̂)` on owned columns,
/// followed by a link refresh.
pub fn meanfield_step(u: &UnaryField, kf: &KernelField, params: &CrfParams, q: &GridField) -> Result<GridField> {
    let z = u.column_length;
    let qt = message_pass(u, kf, q);
    let qh = compat_transform(&qt, z, params.theta_comp);
    let mut next: GridField = Vec::with_capacity(u.grids.len());
    let mut a = vec![0.0; z];
    for (g, grid) in u.grids.iter().enumerate() {
        let mut out = vec![0.0; grid.len() * z];
        for col in 0..grid.len() {
            if !grid.owned[col] {
                continue;
            }
            let r = col * z..(col + 1) * z;
            for ((a, &l), &h) in a.iter_mut().zip(&grid.logits[r.clone()]).zip(&qh[g][r.clone()]) {
                *a = l - params.w_p * h;
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("mean-field activation in grid {g}, column {col}")));
            }
            softmax_into(&a, &mut out[r]);
        }
        next.push(out);
    }
    refresh_links(u, &mut next);
    Ok(next)
}

/// All marginals `Q^0..Q^T` of the unrolled mean-field iteration.
pub fn meanfield_trace(u: &UnaryField, kf: &KernelField, params: &CrfParams) -> Result<Vec<GridField>> {
    let mut trace = Vec::with_capacity(params.iterations + 1);
    trace.push(initial_marginals(u));
    for _ in 0..params.iterations {
        let next = meanfield_step(u, kf, params, trace.last().expect("non-empty"))?;
        trace.push(next);
    }
    Ok(trace)
}

/// Per-vertex surface index and marginal distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceLabeling {
    pub column_length: usize,
    pub labels: Vec<usize>,
    /// `vertex * column_length + l`.
    pub marginals: Vec<f64>,
}

impl SurfaceLabeling {
    pub fn from_marginals(u: &UnaryField, q: &GridField) -> SurfaceLabeling {
        let z = u.column_length;
        let mut marginals = Vec::with_capacity(u.num_vertices() * z);
        let mut labels = Vec::with_capacity(u.num_vertices());
        for &(g, c) in &u.owners {
            let row = &q[g][c * z..(c + 1) * z];
            labels.push(argmax(row));
            marginals.extend_from_slice(row);
        }
        SurfaceLabeling {
            column_length: z,
            labels,
            marginals,
        }
    }

    /// Labeling that puts all mass on the logit argmax.
    pub fn from_unary_argmax(u: &UnaryField) -> SurfaceLabeling {
        let q = initial_marginals(u);
        let mut lab = SurfaceLabeling::from_marginals(u, &q);
        lab.labels = u.argmax_labels();
        lab
    }

    pub fn marginal(&self, v: usize) -> &[f64] {
        &self.marginals[v * self.column_length..(v + 1) * self.column_length]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &serde_json::to_string(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SurfaceLabeling> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn meanfield_infer(u: &UnaryField, kf: &KernelField, params: &CrfParams) -> Result<SurfaceLabeling> {
    params.validate()?;
    let mut q = initial_marginals(u);
    for _ in 0..params.iterations {
        q = meanfield_step(u, kf, params, &q)?;
    }
    Ok(SurfaceLabeling::from_marginals(u, &q))
}

/// Kernel construction followed by mean-field inference.
pub fn infer(u: &UnaryField, ps: Option<&PatchSet>, params: &CrfParams) -> Result<SurfaceLabeling> {
    let kf = compute_kernel(u, ps, params)?;
    meanfield_infer(u, &kf, params)
}

/// `Σ_v ψ_u(n_v) + w_p · ½ Σ_{owned i} Σ_{j ∈ window(i)} μ(|n_i - n_j|) k_ij`.
/// On a single grid the half sum equals the sum over unordered pairs.
pub fn energy(labels: &[usize], u: &UnaryField, kf: &KernelField, params: &CrfParams) -> f64 {
    let mut unary = 0.0;
    for (v, &n) in labels.iter().enumerate() {
        unary += u.psi(v, n);
    }
    let no = kf.num_offsets();
    let mut pair = 0.0;
    for (g, grid) in u.grids.iter().enumerate() {
        for col in 0..grid.len() {
            if !grid.owned[col] {
                continue;
            }
            let ni = labels[grid.vertex[col]];
            for (o, &off) in kf.offsets.iter().enumerate() {
                if let Some(j) = grid.neighbor(col, off) {
                    let nj = labels[grid.vertex[j]];
                    pair += compatibility(ni.abs_diff(nj) as f64, params.theta_comp) * kf.weights[g][col * no + o];
                }
            }
        }
    }
    unary + params.w_p * (0.5 * pair)
}
