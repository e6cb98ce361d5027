//! End-to-end stages: phantom, simulated pre-segmentation, spherical map,
//! quad remesh, column sampling, unary, CRF segmentation and metrics.
//!
//! Every stage is a plain function of its inputs and the [`RunConfig`]; all
//! randomness derives from `RunConfig::seed`.

use std::f64::consts::PI;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crf::{compute_kernel, meanfield_infer, CrfParams, Polarity, SurfaceLabeling, UnaryField};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::geom::Vec3;
use crate::mesh::{harmonic_sphere_map, taubin_smooth, HarmonicOptions, HarmonicReport, SphereMap, TriMesh};
use crate::patches::{ground_truth, sample_columns, ColumnSpec, GroundTruth, PatchSet, QuadSurface};
use crate::quadsphere::{remesh, QuadMesh, QuadSphere};
use crate::train::{fit, FitConfig, FitResult, Instance, Scalars};
use crate::volume::{make_phantom, PhantomSpec, Volume};

/// How the phantom's true boundary is degraded into a pre-segmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PresegConfig {
    /// Largest radial displacement, in voxels of the smallest spacing.
    pub amplitude_voxels: f64,
    /// Taubin smoothing passes applied before the displacement.
    pub smooth_iterations: usize,
    /// Number of random plane waves in the displacement field.
    pub components: usize,
    /// Highest wave frequency, in cycles across the unit sphere.
    pub max_frequency: f64,
}

impl Default for PresegConfig {
    fn default() -> Self {
        PresegConfig {
            amplitude_voxels: 3.0,
            smooth_iterations: 10,
            components: 6,
            max_frequency: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnaryConfig {
    pub polarity: Polarity,
    /// Multiplies the standardized gradient logits.
    pub scale: f64,
}

impl Default for UnaryConfig {
    fn default() -> Self {
        UnaryConfig {
            polarity: Polarity::BrightToDark,
            scale: 1.0,
        }
    }
}

/// Every parameter of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub preseg: PresegConfig,
    pub harmonic: HarmonicOptions,
    /// Quad-sphere recursion level.
    pub level: u32,
    pub columns: ColumnSpec,
    pub unary: UnaryConfig,
    pub crf: CrfParams,
    pub fit: FitConfig,
    /// Size of the synthetic training set used by `fit`.
    pub fit_phantoms: usize,
    pub output: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            phantom: PhantomSpec::default(),
            preseg: PresegConfig::default(),
            harmonic: HarmonicOptions::default(),
            level: 5,
            columns: ColumnSpec::default(),
            unary: UnaryConfig::default(),
            crf: CrfParams::prostate(),
            fit: FitConfig::default(),
            fit_phantoms: 10,
            output: "out".into(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom_spec(self.seed).validate()?;
        self.columns.validate()?;
        self.crf.validate()?;
        self.fit.validate()?;
        QuadSphere::build(self.level)?;
        if self.columns.pad > 1usize << self.level {
            return Err(Error::Config(format!(
                "pad {} exceeds the face size {} at level {}",
                self.columns.pad,
                1usize << self.level,
                self.level
            )));
        }
        if !(self.preseg.amplitude_voxels >= 0.0) || !(self.preseg.max_frequency > 0.0) {
            return Err(Error::Config("preseg amplitude must be >= 0 and frequency > 0".into()));
        }
        if !self.unary.scale.is_finite() {
            return Err(Error::Config("unary scale must be finite".into()));
        }
        Ok(())
    }

    pub fn phantom_spec(&self, seed: u64) -> PhantomSpec {
        PhantomSpec {
            seed,
            ..self.phantom.clone()
        }
    }

    /// Smallest voxel spacing of the phantom; the pre-segmentation amplitude unit.
    pub fn min_spacing(&self) -> f64 {
        self.phantom.spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Stream 0 drives phantom noise, stream 1 the pre-segmentation field.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Noisy volume, analytic boundary mesh and noiseless label volume.
pub fn build_phantom(cfg: &RunConfig, seed: u64) -> Result<(Volume, TriMesh, Volume)> {
    let spec = cfg.phantom_spec(seed);
    let (vol, mesh) = make_phantom(&spec)?;
    let labels = spec.labels()?;
    Ok((vol, mesh, labels))
}

/// Smooths `truth` and displaces every vertex radially (from the centroid)
/// by a seeded sum of plane waves over the direction sphere, scaled so the
/// largest displacement equals the configured amplitude.
pub fn presegment(truth: &TriMesh, cfg: &PresegConfig, voxel: f64, seed: u64) -> TriMesh {
    let mut m = taubin_smooth(truth, cfg.smooth_iterations, 0.5, -0.53);
    let mut rng = stream_rng(seed, 1);
    let waves: Vec<(Vec3, f64, f64, f64)> = (0..cfg.components)
        .map(|_| {
            let d = loop {
                let v = Vec3::new(
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                );
                if v.norm() > 1e-6 {
                    break v.normalized();
                }
            };
            let freq = rng.random_range(0.5..=cfg.max_frequency);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp: f64 = StandardNormal.sample(&mut rng);
            (d, freq, phase, amp)
        })
        .collect();
    let c = m.centroid();
    let field: Vec<f64> = m
        .vertices
        .iter()
        .map(|&p| {
            let u = (p - c).normalized();
            waves.iter().map(|&(d, f, ph, a)| a * (PI * f * d.dot(u) + ph).sin()).sum()
        })
        .collect();
    let peak = field.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let target = cfg.amplitude_voxels * voxel;
    if peak > 0.0 && target > 0.0 {
        for (p, f) in m.vertices.iter_mut().zip(&field) {
            let u = (*p - c).normalized();
            *p += u * (f / peak * target);
        }
    }
    m
}

pub fn sphere_map(preseg: &TriMesh, opts: &HarmonicOptions) -> Result<(SphereMap, HarmonicReport)> {
    harmonic_sphere_map(preseg, opts)
}

pub fn quad_remesh(preseg: &TriMesh, map: &SphereMap, level: u32) -> Result<QuadMesh> {
    remesh(preseg, map, &QuadSphere::build(level)?)
}

pub fn unary_field(ps: &PatchSet, cfg: &UnaryConfig) -> Result<UnaryField> {
    let u = crate::crf::gradient_unary(ps, cfg.polarity)?;
    Ok(if cfg.scale == 1.0 { u } else { u.scaled(cfg.scale) })
}

/// Kernel, mean-field inference and back-projection.
pub fn segment(u: &UnaryField, ps: &PatchSet, params: &CrfParams) -> Result<(SurfaceLabeling, QuadSurface)> {
    let kf = compute_kernel(u, Some(ps), params)?;
    let lab = meanfield_infer(u, &kf, params)?;
    let surface = ps.labeling_to_world(&lab.labels);
    Ok((lab, surface))
}

/// Per-column unary argmax, back-projected.
pub fn unary_baseline(u: &UnaryField, ps: &PatchSet) -> (SurfaceLabeling, QuadSurface) {
    let lab = SurfaceLabeling::from_unary_argmax(u);
    let surface = ps.labeling_to_world(&lab.labels);
    (lab, surface)
}

pub fn metrics(predicted: &QuadSurface, truth_mesh: &TriMesh, truth_labels: &Volume) -> Result<MetricsReport> {
    evaluate(&predicted.to_tri_mesh(), truth_mesh, truth_labels)
}

/// Everything up to the unary for one synthetic phantom.
#[derive(Debug, Clone)]
pub struct SyntheticCase {
    pub volume: Volume,
    pub truth_mesh: TriMesh,
    pub truth_labels: Volume,
    pub preseg: TriMesh,
    pub sphere: SphereMap,
    pub harmonic: HarmonicReport,
    pub quad: QuadMesh,
    pub patches: PatchSet,
    pub truth_columns: GroundTruth,
    pub unary: UnaryField,
}

pub fn synthetic_case(cfg: &RunConfig, seed: u64) -> Result<SyntheticCase> {
    let (volume, truth_mesh, truth_labels) = build_phantom(cfg, seed)?;
    let preseg = presegment(&truth_mesh, &cfg.preseg, cfg.min_spacing(), seed);
    let (sphere, harmonic) = sphere_map(&preseg, &cfg.harmonic)?;
    let quad = quad_remesh(&preseg, &sphere, cfg.level)?;
    let patches = sample_columns(&volume, &quad, &cfg.columns)?;
    let truth_columns = ground_truth(&patches, &truth_mesh);
    let unary = unary_field(&patches, &cfg.unary)?;
    Ok(SyntheticCase {
        volume,
        truth_mesh,
        truth_labels,
        preseg,
        sphere,
        harmonic,
        quad,
        patches,
        truth_columns,
        unary,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub case: SyntheticCase,
    pub labeling: SurfaceLabeling,
    pub prediction: QuadSurface,
    pub prediction_labels: Volume,
    pub metrics: MetricsReport,
    pub wall_time: Duration,
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineResult> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let case = synthetic_case(cfg, cfg.seed)?;
    let (labeling, prediction) = segment(&case.unary, &case.patches, &cfg.crf)?;
    let prediction_labels = crate::eval::voxelize(&prediction.to_tri_mesh(), &case.truth_labels)?;
    let metrics = metrics(&prediction, &case.truth_mesh, &case.truth_labels)?;
    Ok(PipelineResult {
        case,
        labeling,
        prediction,
        prediction_labels,
        metrics,
        wall_time: start.elapsed(),
    })
}

/// Seeds of the synthetic training set: `seed, seed + 1, ...`.
pub fn training_set(cfg: &RunConfig) -> Result<Vec<Instance>> {
    (0..cfg.fit_phantoms as u64)
        .map(|k| {
            let case = synthetic_case(cfg, cfg.seed.wrapping_add(k))?;
            Ok(Instance {
                unary: case.unary,
                truth: case.truth_columns,
                patches: Some(case.patches),
            })
        })
        .collect()
}

pub fn fit_synthetic(cfg: &RunConfig) -> Result<FitResult> {
    cfg.validate()?;
    let data = training_set(cfg)?;
    let fit_cfg = FitConfig { seed: cfg.seed, ..cfg.fit };
    fit(&data, &Scalars::new(cfg.crf), &fit_cfg)
}
