//! `surfcrf` command-line tool.
//!
//! Every subcommand reads its inputs from and writes its outputs to one
//! working directory (`--out`, default taken from the config). Stage outputs
//! are deterministic for a given config; timing lives only under
//! `provenance/`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use surfcrf::crf::UnaryField;
use surfcrf::eval::voxelize;
use surfcrf::mesh::{SphereMap, TriMesh};
use surfcrf::patches::{ground_truth, sample_columns, GroundTruth, PatchSet, QuadSurface};
use surfcrf::pipeline::{
    build_phantom, fit_synthetic, metrics, presegment, quad_remesh, segment, sphere_map, unary_baseline, unary_field,
    RunConfig,
};
use surfcrf::quadsphere::QuadMesh;
use surfcrf::train::{fit, FitConfig, FitResult, Instance, Scalars};
use surfcrf::volume::Volume;
use surfcrf::Error;

const VOLUME: &str = "volume.svol";
const TRUTH_MESH: &str = "truth.obj";
const TRUTH_LABELS: &str = "truth_labels.svol";
const PRESEG: &str = "preseg.obj";
const SPHERE: &str = "sphere.obj";
const HARMONIC: &str = "harmonic.json";
const QUAD: &str = "quad.obj";
const PATCHES: &str = "patches";
const TRUTH_COLUMNS: &str = "truth_columns.json";
const UNARY: &str = "unary";
const BASELINE_LABELING: &str = "baseline_labeling.json";
const BASELINE: &str = "baseline.obj";
const LABELING: &str = "labeling.json";
const PREDICTION: &str = "prediction.obj";
const PREDICTION_LABELS: &str = "prediction_labels.svol";
const METRICS: &str = "metrics.json";
const FIT: &str = "fit.json";
const CONFIG: &str = "config.json";

#[derive(Parser)]
#[command(name = "surfcrf", version, about = "Surface segmentation with a column CRF on a quad-remeshed pre-segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a noisy ellipsoid volume with its true boundary.
    Phantom(Overrides),
    /// Perturb the true boundary into a pre-segmentation mesh.
    Presegment(Overrides),
    /// Harmonic map of the pre-segmentation onto the unit sphere.
    Spheremap(Overrides),
    /// Quad remesh of the pre-segmentation through the sphere map.
    Remesh(Overrides),
    /// Sample intensity columns along the quad mesh normals.
    Patches(Overrides),
    /// Gradient unary logits and the per-column argmax baseline.
    Unary(Overrides),
    /// Mean-field CRF inference and back-projection to a surface.
    Segment(Overrides),
    /// Fit CRF parameters by gradient descent on column cross-entropy.
    Fit(FitArgs),
    /// Compare the predicted surface against the truth.
    Metrics(Overrides),
    /// Run every stage from phantom to metrics.
    Pipeline(Overrides),
    /// Print the resolved configuration.
    Config(Overrides),
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// JSON run configuration; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Working directory for inputs and outputs.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    level: Option<u32>,
    #[arg(long)]
    column_length: Option<usize>,
    #[arg(long)]
    column_resolution: Option<f64>,
    #[arg(long)]
    pad: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    w_p: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    w1: Option<f64>,
    #[arg(long)]
    theta1: Option<f64>,
    #[arg(long)]
    theta2: Option<f64>,
    #[arg(long)]
    theta3: Option<f64>,
    #[arg(long)]
    theta_comp: Option<f64>,
    #[arg(long)]
    window_radius: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// `probability` or `intensity`.
    #[arg(long)]
    kernel: Option<String>,
    /// `dark-to-bright`, `bright-to-dark` or `magnitude`.
    #[arg(long)]
    polarity: Option<String>,
    #[arg(long)]
    unary_scale: Option<f64>,
    #[arg(long)]
    preseg_amplitude: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    fit_phantoms: Option<usize>,
    /// Any config key as a dotted path, e.g. `phantom.noise_sigma=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Clone)]
struct FitArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// JSON list of `{"patches", "unary", "truth"}` entries (paths relative
    /// to the manifest). Without it, a synthetic set is generated.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug)]
struct CliError {
    kind: &'static str,
    message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        kind: "usage",
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn set_path(root: &mut Value, key: &str, value: Value) -> CliResult<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(usage(format!("config key {key} does not name an object path")));
        }
        node = node
            .as_object_mut()
            .expect("checked object")
            .entry(part.to_string())
            .or_insert_with(|| json!({}));
    }
    match node.as_object_mut() {
        Some(obj) => {
            obj.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(usage(format!("config key {key} does not name an object path"))),
    }
}

impl Overrides {
    fn pairs(&self) -> CliResult<Vec<(String, Value)>> {
        let mut v: Vec<(String, Value)> = Vec::new();
        let mut add = |k: &str, val: Option<Value>| {
            if let Some(val) = val {
                v.push((k.to_string(), val));
            }
        };
        add("seed", self.seed.map(Value::from));
        add("level", self.level.map(Value::from));
        add("columns.length", self.column_length.map(Value::from));
        add("columns.resolution", self.column_resolution.map(Value::from));
        add("columns.pad", self.pad.map(Value::from));
        add("crf.w_p", self.w_p.map(Value::from));
        add("crf.w1", self.w1.map(Value::from));
        add("crf.theta1", self.theta1.map(Value::from));
        add("crf.theta2", self.theta2.map(Value::from));
        add("crf.theta3", self.theta3.map(Value::from));
        add("crf.theta_comp", self.theta_comp.map(Value::from));
        add("crf.window_radius", self.window_radius.map(Value::from));
        add("crf.iterations", self.iterations.map(Value::from));
        add("crf.kernel", self.kernel.clone().map(Value::from));
        add("unary.polarity", self.polarity.clone().map(Value::from));
        add("unary.scale", self.unary_scale.map(Value::from));
        add("preseg.amplitude_voxels", self.preseg_amplitude.map(Value::from));
        add("fit.epochs", self.epochs.map(Value::from));
        add("fit.learning_rate", self.learning_rate.map(Value::from));
        add("fit_phantoms", self.fit_phantoms.map(Value::from));
        add("output", self.out.as_ref().map(|p| Value::from(p.to_string_lossy().into_owned())));
        for s in &self.set {
            let (k, raw) = s
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {s}")))?;
            let val = serde_json::from_str(raw).unwrap_or_else(|_| Value::from(raw));
            v.push((k.trim().to_string(), val));
        }
        Ok(v)
    }

    /// Defaults, then the config file, then flags.
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut root = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::from(Error::Io {
                    path: p.clone(),
                    source: e,
                }))?;
                serde_json::from_str(&text).map_err(|e| CliError {
                    kind: "config",
                    message: format!("{}: {e}", p.display()),
                })?
            }
            None => json!({}),
        };
        for (k, v) in self.pairs()? {
            set_path(&mut root, &k, v)?;
        }
        let cfg: RunConfig = serde_json::from_value(root).map_err(|e| CliError {
            kind: "config",
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Tracks what a command writes so a failure can remove partial outputs.
struct Workspace {
    dir: PathBuf,
    created_dir: bool,
    outputs: Vec<PathBuf>,
    inputs: Vec<String>,
}

impl Workspace {
    fn open(cfg: &RunConfig) -> CliResult<Workspace> {
        let dir = PathBuf::from(&cfg.output);
        let created_dir = !dir.exists();
        fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        Ok(Workspace {
            dir,
            created_dir,
            outputs: Vec::new(),
            inputs: Vec::new(),
        })
    }

    fn input(&mut self, name: &str) -> PathBuf {
        if !self.inputs.iter().any(|n| n == name) {
            self.inputs.push(name.to_string());
        }
        self.dir.join(name)
    }

    fn output(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        if !self.outputs.contains(&p) {
            self.outputs.push(p.clone());
        }
        p
    }

    fn write_text(&mut self, name: &str, text: &str) -> CliResult<()> {
        let p = self.output(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::Io {
                path: parent.to_path_buf(),
                source: e,
            })?;
        }
        fs::write(&p, text).map_err(|e| Error::Io { path: p, source: e }.into())
    }

    fn write_json(&mut self, name: &str, v: &impl serde::Serialize) -> CliResult<()> {
        let text = serde_json::to_string_pretty(v).map_err(Error::from)? + "\n";
        self.write_text(name, &text)
    }

    fn cleanup(&self) {
        for p in &self.outputs {
            if p.is_dir() {
                let _ = fs::remove_dir_all(p);
            } else {
                let _ = fs::remove_file(p);
                let mut side = p.as_os_str().to_owned();
                side.push(".json");
                let _ = fs::remove_file(PathBuf::from(side));
            }
        }
        if self.created_dir {
            let _ = fs::remove_dir_all(self.dir.join("provenance"));
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

fn stage_phantom(ws: &mut Workspace, cfg: &RunConfig) -> CliResult<()> {
    let (vol, mesh, labels) = build_phantom(cfg, cfg.seed)?;
    vol.save_svol(ws.output(VOLUME))?;
    mesh.save(ws.output(TRUTH_MESH))?;
    labels.save_svol(ws.output(TRUTH_LABELS))?;
    Ok(())
}

fn stage_presegment(ws: &mut Workspace, cfg: &RunConfig) -> CliResult<()> {
    let truth = TriMesh::load(ws.input(TRUTH_MESH))?;
    let pre = presegment(&truth, &cfg.preseg, cfg.min_spacing(), cfg.seed);
    pre.save(ws.output(PRESEG))?;
    Ok(())
}

fn stage_spheremap(ws: &mut Workspace, cfg: &RunConfig) -> CliResult<()> {
    let pre = TriMesh::load(ws.input(PRESEG))?;
    let (map, report) = sphere_map(&pre, &cfg.harmonic)?;
    map.as_mesh().save(ws.output(SPHERE))?;
    ws.write_json(HARMONIC, &report)
}

fn stage_remesh(ws: &mut Workspace, cfg: &RunConfig) -> CliResult<()> {
    let pre = TriMesh::load(ws.input(PRESEG))?;
    let map = SphereMap::from_mesh(TriMesh::load(ws.input(SPHERE))?);
    let qm = quad_remesh(&pre, &map, cfg.level)?;
    qm.save(ws.output(QUAD))?;
    Ok(())
}

fn stage_patches(ws: &mut Workspace, cfg: &RunConfig) -> CliResult<()> {
    let vol = Volume::load_svol(ws.input(VOLUME))?;
    let qm = QuadMesh::load(ws.input(QUAD))?;
    let ps = sample_columns(&vol, &qm, &cfg.columns)?;
    ps.save(ws.output(PATCHES))?;
    if ws.dir.join(TRUTH_MESH).exists() {
        let truth = TriMesh::load(ws.input(TRUTH_MESH))?;
        ground_truth(&ps, &truth).save(ws.output(TRUTH_COLUMNS))?;
    }
    Ok(())
}

fn stage_unary(ws: &mut Workspace, cfg: &RunConfig) -> CliResult<()> {
    let ps = PatchSet::load(ws.input(PATCHES))?;
    let u = unary_field(&ps, &cfg.unary)?;
    u.save(ws.output(UNARY))?;
    let (lab, surface) = unary_baseline(&u, &ps);
    lab.save(ws.output(BASELINE_LABELING))?;
    surface.save(ws.output(BASELINE))?;
    Ok(())
}

fn stage_segment(ws: &mut Workspace, cfg: &RunConfig) -> CliResult<()> {
    let ps = PatchSet::load(ws.input(PATCHES))?;
    let u = UnaryField::load(ws.input(UNARY))?;
    let (lab, surface) = segment(&u, &ps, &cfg.crf)?;
    lab.save(ws.output(LABELING))?;
    surface.save(ws.output(PREDICTION))?;
    Ok(())
}

fn stage_metrics(ws: &mut Workspace, _cfg: &RunConfig) -> CliResult<()> {
    let pred = QuadSurface::load(ws.input(PREDICTION))?;
    let truth = TriMesh::load(ws.input(TRUTH_MESH))?;
    let labels = Volume::load_svol(ws.input(TRUTH_LABELS))?;
    let report = metrics(&pred, &truth, &labels)?;
    voxelize(&pred.to_tri_mesh(), &labels)?.save_svol(ws.output(PREDICTION_LABELS))?;
    report.save(ws.output(METRICS))?;
    Ok(())
}

fn load_manifest(path: &Path) -> CliResult<Vec<Instance>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let entries: Vec<Value> = serde_json::from_str(&text).map_err(|e| CliError {
        kind: "config",
        message: format!("{}: {e}", path.display()),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let field = |k: &str| -> CliResult<PathBuf> {
                e.get(k)
                    .and_then(Value::as_str)
                    .map(|s| base.join(s))
                    .ok_or_else(|| usage(format!("manifest entry {i} lacks a string \"{k}\"")))
            };
            let patches = PatchSet::load(field("patches")?)?;
            Ok(Instance {
                unary: UnaryField::load(field("unary")?)?,
                truth: GroundTruth::load(field("truth")?)?,
                patches: Some(patches),
            })
        })
        .collect()
}

fn stage_fit(ws: &mut Workspace, cfg: &RunConfig, manifest: Option<&Path>) -> CliResult<()> {
    let result: FitResult = match manifest {
        Some(m) => {
            let data = load_manifest(m)?;
            ws.inputs.push(m.display().to_string());
            let fit_cfg = FitConfig { seed: cfg.seed, ..cfg.fit };
            fit(&data, &Scalars::new(cfg.crf), &fit_cfg)?
        }
        None => fit_synthetic(cfg)?,
    };
    ws.write_json(FIT, &result)
}

fn run(command: &Command) -> CliResult<()> {
    let (name, ov, manifest) = match command {
        Command::Phantom(o) => ("phantom", o, None),
        Command::Presegment(o) => ("presegment", o, None),
        Command::Spheremap(o) => ("spheremap", o, None),
        Command::Remesh(o) => ("remesh", o, None),
        Command::Patches(o) => ("patches", o, None),
        Command::Unary(o) => ("unary", o, None),
        Command::Segment(o) => ("segment", o, None),
        Command::Fit(f) => ("fit", &f.overrides, f.manifest.as_deref()),
        Command::Metrics(o) => ("metrics", o, None),
        Command::Pipeline(o) => ("pipeline", o, None),
        Command::Config(o) => {
            print!("{}", o.resolve()?.to_json());
            return Ok(());
        }
    };
    let cfg = ov.resolve()?;
    let mut ws = Workspace::open(&cfg)?;
    let start = Instant::now();
    let outcome = (|| -> CliResult<()> {
        type Stage = fn(&mut Workspace, &RunConfig) -> CliResult<()>;
        let stages: Vec<Stage> = match name {
            "phantom" => vec![stage_phantom],
            "presegment" => vec![stage_presegment],
            "spheremap" => vec![stage_spheremap],
            "remesh" => vec![stage_remesh],
            "patches" => vec![stage_patches],
            "unary" => vec![stage_unary],
            "segment" => vec![stage_segment],
            "metrics" => vec![stage_metrics],
            "pipeline" => vec![
                stage_phantom,
                stage_presegment,
                stage_spheremap,
                stage_remesh,
                stage_patches,
                stage_unary,
                stage_segment,
                stage_metrics,
            ],
            "fit" => return stage_fit(&mut ws, &cfg, manifest),
            _ => unreachable!("every subcommand is listed"),
        };
        for stage in stages {
            stage(&mut ws, &cfg)?;
        }
        Ok(())
    })()
    .and_then(|()| ws.write_text(CONFIG, &cfg.to_json()));
    if let Err(e) = outcome {
        ws.cleanup();
        return Err(e);
    }
    // Pipeline inputs are its own outputs; only external inputs are listed.
    let outputs: Vec<String> = ws
        .outputs
        .iter()
        .filter_map(|p| p.strip_prefix(&ws.dir).ok())
        .map(|p| p.display().to_string())
        .collect();
    let inputs: Vec<&String> = ws.inputs.iter().filter(|i| !outputs.contains(i)).collect();
    let record = json!({
        "command": name,
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "inputs": inputs,
        "outputs": outputs,
        "wall_time_s": start.elapsed().as_secs_f64(),
    });
    ws.write_json(&format!("provenance/{name}.json"), &record)?;
    if name == "pipeline" || name == "metrics" {
        if let Ok(text) = fs::read_to_string(ws.dir.join(METRICS)) {
            print!("{text}");
        }
    }
    if name == "fit" {
        if let Ok(text) = fs::read_to_string(ws.dir.join(FIT)) {
            let v: Value = serde_json::from_str(&text).unwrap_or(Value::Null);
            println!("{}", json!({"scalars": v["scalars"], "final_loss": v["final_loss"]}));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("{}", json!({"error": "usage", "message": first}));
            return ExitCode::from(2);
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind, "message": e.message}));
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_set_creates_nested_objects() {
        let mut v = json!({"crf": {"w1": 3.0}});
        set_path(&mut v, "crf.w_p", json!(0.5)).unwrap();
        set_path(&mut v, "phantom.noise_sigma", json!(0.1)).unwrap();
        assert_eq!(v, json!({"crf": {"w1": 3.0, "w_p": 0.5}, "phantom": {"noise_sigma": 0.1}}));
        assert!(set_path(&mut v, "crf.w1.x", json!(1)).is_err());
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"seed": 4, "crf": {"w_p": 2.0}}"#).unwrap();
        let ov = Overrides {
            config: Some(p),
            w_p: Some(0.0),
            set: vec!["level=4".into()],
            ..Default::default()
        };
        let cfg = ov.resolve().unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.crf.w_p, 0.0);
        assert_eq!(cfg.level, 4);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let ov = Overrides {
            set: vec!["crf.bogus=1".into()],
            ..Default::default()
        };
        assert_eq!(ov.resolve().unwrap_err().kind, "config");
    }
}
