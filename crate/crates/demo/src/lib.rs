//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each export has a plain Rust counterpart (no `JsValue`) so the logic is
//! testable natively.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use wasm_bindgen::prelude::*;

use surfcrf::crf::{compatibility, infer, kernel_value, CrfParams, UnaryField};
use surfcrf::quadsphere::QuadSphere;

/// Cube-sphere vertices (xyz interleaved), quads, the face of each quad and
/// the eight degree-3 corner vertices.
#[wasm_bindgen]
pub struct SphereGeometry {
    positions: Vec<f64>,
    quads: Vec<u32>,
    faces: Vec<u32>,
    corners: Vec<u32>,
}

#[wasm_bindgen]
impl SphereGeometry {
    #[wasm_bindgen(getter)]
    pub fn positions(&self) -> Vec<f64> {
        self.positions.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn quads(&self) -> Vec<u32> {
        self.quads.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn faces(&self) -> Vec<u32> {
        self.faces.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn corners(&self) -> Vec<u32> {
        self.corners.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn vertex_count(&self) -> usize {
        self.positions.len() / 3
    }
    #[wasm_bindgen(getter)]
    pub fn quad_count(&self) -> usize {
        self.quads.len() / 4
    }
}

/// Levels above 6 are refused to keep the page responsive.
pub fn sphere_geometry(level: u32) -> Result<SphereGeometry, String> {
    if level > 6 {
        return Err(format!("level {level} is too fine for the demo (max 6)"));
    }
    let qs = QuadSphere::build(level).map_err(|e| e.to_string())?;
    let per_face = qs.quads().len() / 6;
    let corners = qs
        .degrees()
        .iter()
        .enumerate()
        .filter(|(_, &d)| d == 3)
        .map(|(v, _)| v as u32)
        .collect();
    Ok(SphereGeometry {
        positions: qs.vertices().iter().flat_map(|v| [v.x, v.y, v.z]).collect(),
        quads: qs.quads().iter().flatten().map(|&i| i as u32).collect(),
        faces: (0..qs.quads().len()).map(|q| (q / per_face) as u32).collect(),
        corners,
    })
}

#[wasm_bindgen]
pub fn quad_sphere(level: u32) -> Result<SphereGeometry, JsError> {
    sphere_geometry(level).map_err(|e| JsError::new(&e))
}

/// Label maps of the terrain demo, row-major `width × height`.
#[wasm_bindgen]
pub struct TerrainResult {
    truth: Vec<u32>,
    baseline: Vec<u32>,
    crf: Vec<u32>,
    pub baseline_mae: f64,
    pub crf_mae: f64,
}

#[wasm_bindgen]
impl TerrainResult {
    #[wasm_bindgen(getter)]
    pub fn truth(&self) -> Vec<u32> {
        self.truth.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn baseline(&self) -> Vec<u32> {
        self.baseline.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn crf(&self) -> Vec<u32> {
        self.crf.clone()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TerrainSpec {
    pub width: usize,
    pub height: usize,
    pub z: usize,
    /// Std of the Gaussian noise added to every logit.
    pub noise: f64,
    /// Fraction of columns whose evidence peaks at a random height.
    pub outliers: f64,
    pub seed: u64,
}

/// A smooth height field, noisy per-column evidence for it, and the
/// argmax and CRF reconstructions.
pub fn denoise_terrain(spec: &TerrainSpec, params: &CrfParams) -> Result<TerrainResult, String> {
    let TerrainSpec { width, height, z, .. } = *spec;
    if width == 0 || height == 0 || z < 2 || width * height > 128 * 128 || z > 128 {
        return Err("grid must be at most 128x128 with 2..=128 labels".into());
    }
    if !(spec.noise >= 0.0) || !(0.0..=1.0).contains(&spec.outliers) {
        return Err("noise must be >= 0 and the outlier fraction in [0, 1]".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (fx, fy) = (rng.random_range(0.6..1.6), rng.random_range(0.6..1.6));
    let mid = (z - 1) as f64 / 2.0;
    let truth: Vec<u32> = (0..width * height)
        .map(|i| {
            let x = (i % width) as f64 / width as f64;
            let y = (i / width) as f64 / height as f64;
            let h = mid + 0.35 * mid * ((std::f64::consts::TAU * fx * x).sin() + (std::f64::consts::TAU * fy * y).cos());
            h.round().clamp(0.0, (z - 1) as f64) as u32
        })
        .collect();
    let sharpness = 2.0;
    let mut logits = Vec::with_capacity(width * height * z);
    for &t in &truth {
        let peak = if rng.random::<f64>() < spec.outliers {
            rng.random_range(0..z) as f64
        } else {
            t as f64
        };
        for l in 0..z {
            let d = l as f64 - peak;
            let n: f64 = StandardNormal.sample(&mut rng);
            logits.push(-d * d / (2.0 * sharpness * sharpness) + spec.noise * n);
        }
    }
    let u = UnaryField::from_grid(width, height, z, logits).map_err(|e| e.to_string())?;
    let lab = infer(&u, None, params).map_err(|e| e.to_string())?;
    let baseline: Vec<u32> = u.argmax_labels().into_iter().map(|l| l as u32).collect();
    let crf: Vec<u32> = lab.labels.into_iter().map(|l| l as u32).collect();
    let mae = |a: &[u32]| a.iter().zip(&truth).map(|(&p, &t)| p.abs_diff(t) as f64).sum::<f64>() / truth.len() as f64;
    Ok(TerrainResult {
        baseline_mae: mae(&baseline),
        crf_mae: mae(&crf),
        truth,
        baseline,
        crf,
    })
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn terrain_denoise(
    width: usize,
    height: usize,
    z: usize,
    noise: f64,
    outliers: f64,
    w_p: f64,
    theta_comp: f64,
    iterations: usize,
    seed: u64,
) -> Result<TerrainResult, JsError> {
    let spec = TerrainSpec {
        width,
        height,
        z,
        noise,
        outliers,
        seed,
    };
    let params = CrfParams {
        w_p,
        theta_comp,
        iterations,
        ..CrfParams::prostate()
    };
    denoise_terrain(&spec, &params).map_err(|e| JsError::new(&e))
}

/// `μ(d)` for label distances `0..z`.
#[wasm_bindgen]
pub fn compatibility_curve(theta_comp: f64, z: usize) -> Vec<f64> {
    (0..z).map(|d| compatibility(d as f64, theta_comp)).collect()
}

/// Kernel weight along one grid axis for offsets `0..=radius`, at feature
/// distance `feature_distance`.
#[wasm_bindgen]
pub fn kernel_curve(w1: f64, theta1: f64, theta2: f64, theta3: f64, feature_distance: f64, radius: usize) -> Vec<f64> {
    let p = CrfParams {
        w1,
        theta1,
        theta2,
        theta3,
        ..CrfParams::prostate()
    };
    (0..=radius)
        .map(|d| kernel_value(&p, (d * d) as f64, feature_distance * feature_distance))
        .collect()
}
