//! Losses, exact gradients through unrolled mean-field, finite-difference
//! checks and gradient-descent fitting of the CRF scalars.
//!
//! Kernel features are held fixed (no gradient flows through them). During
//! fitting they are recomputed from the current scaled unary at every
//! gradient evaluation; the finite-difference harness keeps them frozen at
//! the evaluation point so both routes differentiate the same function.

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::crf::{
    clamp_logit, compat_table, compat_transform_flat, compute_kernel, initial_marginals, log_sum_exp, message_pass,
    softmax_into, CrfParams, GridField, KernelField, SurfaceLabeling, UnaryField, LOGIT_CLAMP,
};
use crate::error::{Error, Result};
use crate::patches::{GroundTruth, PatchSet};

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Weighted binary cross-entropy over voxels:
/// mean of `-[w m log σ(ℓ) + (1 - m) log(1 - σ(ℓ))]`.
pub fn wbce_loss(logits: &[f64], mask: &[bool], weight: f64) -> Result<f64> {
    if logits.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logits for {} mask voxels",
            logits.len(),
            mask.len()
        )));
    }
    if !(weight > 0.0) {
        return Err(Error::InvalidArgument(format!("weight must be positive, got {weight}")));
    }
    if logits.is_empty() {
        return Err(Error::InvalidArgument("empty input".into()));
    }
    let total: f64 = logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| {
            let l = clamp_logit(l);
            if m {
                weight * softplus(-l)
            } else {
                softplus(l)
            }
        })
        .sum();
    Ok(total / logits.len() as f64)
}

/// Mean over valid columns of `-log Q_v(g_v)`.
pub fn mce_loss(lab: &SurfaceLabeling, gt: &GroundTruth) -> Result<f64> {
    check_truth(gt, lab.labels.len(), lab.column_length)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in 0..lab.labels.len() {
        if gt.valid[v] {
            sum -= lab.marginal(v)[gt.labels[v]].max(f64::MIN_POSITIVE).ln();
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

fn check_truth(gt: &GroundTruth, vertices: usize, z: usize) -> Result<()> {
    if gt.labels.len() != vertices || gt.valid.len() != vertices {
        return Err(Error::ShapeMismatch(format!(
            "ground truth covers {} vertices, field has {vertices}",
            gt.labels.len()
        )));
    }
    if gt.column_length != z {
        return Err(Error::ShapeMismatch(format!(
            "ground truth column length {} vs {z}",
            gt.column_length
        )));
    }
    if gt.num_valid() == 0 {
        return Err(Error::NoValidColumns);
    }
    Ok(())
}

/// Gradients with respect to every trainable scalar.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamGrads {
    pub w_p: f64,
    pub w1: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub theta3: f64,
    pub theta_comp: f64,
    pub unary_scale: f64,
}

pub const SCALAR_NAMES: [&str; 7] = ["w_p", "w1", "theta1", "theta2", "theta3", "theta_comp", "unary_scale"];

impl ParamGrads {
    pub fn to_array(&self) -> [f64; 7] {
        [
            self.w_p,
            self.w1,
            self.theta1,
            self.theta2,
            self.theta3,
            self.theta_comp,
            self.unary_scale,
        ]
    }

    fn from_array(a: [f64; 7]) -> Self {
        ParamGrads {
            w_p: a[0],
            w1: a[1],
            theta1: a[2],
            theta2: a[3],
            theta3: a[4],
            theta_comp: a[5],
            unary_scale: a[6],
        }
    }
}

/// CRF parameters plus the global unary scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scalars {
    pub params: CrfParams,
    pub unary_scale: f64,
}

impl Scalars {
    pub fn new(params: CrfParams) -> Self {
        Scalars {
            params,
            unary_scale: 1.0,
        }
    }

    pub fn to_array(&self) -> [f64; 7] {
        let p = &self.params;
        [p.w_p, p.w1, p.theta1, p.theta2, p.theta3, p.theta_comp, self.unary_scale]
    }

    pub fn with_array(&self, a: [f64; 7]) -> Scalars {
        Scalars {
            params: CrfParams {
                w_p: a[0],
                w1: a[1],
                theta1: a[2],
                theta2: a[3],
                theta3: a[4],
                theta_comp: a[5],
                ..self.params
            },
            unary_scale: a[6],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub grads: ParamGrads,
    /// Gradient with respect to the unscaled input logits, laid out like
    /// the unary grids. Linked columns receive zero.
    pub logit_grads: GridField,
}

struct Trace {
    q: Vec<GridField>,
    q_tilde: Vec<GridField>,
    q_hat: Vec<GridField>,
    /// Activations of the last update (the effective logits when T = 0).
    last_activation: GridField,
}

fn forward(u: &UnaryField, kf: &KernelField, p: &CrfParams) -> Result<Trace> {
    let z = u.column_length;
    let mu = compat_table(z, p.theta_comp);
    let mut q = vec![initial_marginals(u)];
    let mut q_tilde = Vec::with_capacity(p.iterations);
    let mut q_hat = Vec::with_capacity(p.iterations);
    let mut last_activation: GridField = u.grids.iter().map(|g| g.logits.clone()).collect();
    for _ in 0..p.iterations {
        let qt = message_pass(u, kf, q.last().expect("non-empty"));
        let qh: GridField = qt.iter().map(|f| compat_transform_flat(f, z, &mu)).collect();
        let mut act: GridField = Vec::with_capacity(u.grids.len());
        let mut next: GridField = Vec::with_capacity(u.grids.len());
        for (g, grid) in u.grids.iter().enumerate() {
            let mut a = vec![0.0; grid.logits.len()];
            let mut out = vec![0.0; grid.logits.len()];
            for col in 0..grid.len() {
                if !grid.owned[col] {
                    continue;
                }
                let r = col * z..(col + 1) * z;
                for l in r.clone() {
                    a[l] = grid.logits[l] - p.w_p * qh[g][l];
                }
                if a[r.clone()].iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("activation in grid {g}, column {col}")));
                }
                softmax_into(&a[r.clone()], &mut out[r]);
            }
            act.push(a);
            next.push(out);
        }
        crate::crf::refresh_links(u, &mut next);
        q.push(next);
        q_tilde.push(qt);
        q_hat.push(qh);
        last_activation = act;
    }
    Ok(Trace {
        q,
        q_tilde,
        q_hat,
        last_activation,
    })
}

fn mce_from_activation(u: &UnaryField, act: &GridField, gt: &GroundTruth) -> f64 {
    let z = u.column_length;
    let mut sum = 0.0;
    for (v, &(g, c)) in u.owners.iter().enumerate() {
        if gt.valid[v] {
            let a = &act[g][c * z..(c + 1) * z];
            sum += log_sum_exp(a) - a[gt.labels[v]];
        }
    }
    sum / gt.num_valid() as f64
}

/// Adds the gradients of linked columns onto their owners.
fn fold_links(u: &UnaryField, grad: &mut GridField) {
    let z = u.column_length;
    for g in 0..u.grids.len() {
        for c in 0..u.grids[g].len() {
            if u.grids[g].owned[c] {
                continue;
            }
            let (og, oc) = u.owners[u.grids[g].vertex[c]];
            for l in 0..z {
                let v = std::mem::take(&mut grad[g][c * z + l]);
                grad[og][oc * z + l] += v;
            }
        }
    }
}

fn softmax_backward(u: &UnaryField, q: &GridField, gq: &GridField) -> GridField {
    let z = u.column_length;
    u.grids
        .iter()
        .enumerate()
        .map(|(g, grid)| {
            let mut out = vec![0.0; grid.logits.len()];
            for col in 0..grid.len() {
                if !grid.owned[col] {
                    continue;
                }
                let r = col * z..(col + 1) * z;
                let dot: f64 = q[g][r.clone()].iter().zip(&gq[g][r.clone()]).map(|(a, b)| a * b).sum();
                for l in r {
                    out[l] = q[g][l] * (gq[g][l] - dot);
                }
            }
            out
        })
        .collect()
}

/// MCE loss of the unrolled mean-field marginals `Q^T` with the kernel
/// features of `kf` held fixed. `u` holds the unscaled logits.
pub fn loss_fixed_features(u: &UnaryField, kf: &KernelField, s: &Scalars, gt: &GroundTruth) -> Result<f64> {
    check_truth(gt, u.num_vertices(), u.column_length)?;
    let ue = u.scaled(s.unary_scale);
    let kf = kf.reweighted(u, &s.params);
    let trace = forward(&ue, &kf, &s.params)?;
    Ok(mce_from_activation(&ue, &trace.last_activation, gt))
}

/// Exact reverse-mode gradient of [`loss_fixed_features`].
pub fn meanfield_grad(u: &UnaryField, kf: &KernelField, s: &Scalars, gt: &GroundTruth) -> Result<LossReport> {
    check_truth(gt, u.num_vertices(), u.column_length)?;
    let p = &s.params;
    let z = u.column_length;
    let no = kf.num_offsets();
    let ue = u.scaled(s.unary_scale);
    let kf = kf.reweighted(u, p);
    let trace = forward(&ue, &kf, p)?;
    let loss = mce_from_activation(&ue, &trace.last_activation, gt);

    let n_valid = gt.num_valid() as f64;
    let t_max = p.iterations;
    let mut g_act: GridField = ue.grids.iter().map(|g| vec![0.0; g.logits.len()]).collect();
    for (v, &(g, c)) in ue.owners.iter().enumerate() {
        if gt.valid[v] {
            for l in 0..z {
                let onehot = if l == gt.labels[v] { 1.0 } else { 0.0 };
                g_act[g][c * z + l] = (trace.q[t_max][g][c * z + l] - onehot) / n_valid;
            }
        }
    }

    let mu = compat_table(z, p.theta_comp);
    let dmu: Vec<f64> = (0..z)
        .map(|d| {
            let d2 = (d * d) as f64;
            -(-d2 / (p.theta_comp * p.theta_comp)).exp() * 2.0 * d2 / p.theta_comp.powi(3)
        })
        .collect();
    let mut g_logits_eff: GridField = ue.grids.iter().map(|g| vec![0.0; g.logits.len()]).collect();
    let mut gr = [0.0f64; 7];

    for t in (1..=t_max).rev() {
        let q_prev = &trace.q[t - 1];
        let qt = &trace.q_tilde[t - 1];
        let qh = &trace.q_hat[t - 1];
        let mut g_prev: GridField = ue.grids.iter().map(|g| vec![0.0; g.logits.len()]).collect();
        for (g, grid) in ue.grids.iter().enumerate() {
            let mut g_qt = vec![0.0; z];
            for col in 0..grid.len() {
                if !grid.owned[col] {
                    continue;
                }
                let r = col * z..(col + 1) * z;
                let ga = &g_act[g][r.clone()];
                for (gl, &a) in g_logits_eff[g][r.clone()].iter_mut().zip(ga) {
                    *gl += a;
                }
                gr[0] -= ga.iter().zip(&qh[g][r.clone()]).map(|(a, h)| a * h).sum::<f64>();
                // Q̂ = M Q̃ with symmetric M, so dQ̃ = M dQ̂ and dQ̂ = -w_p dA
                for l in 0..z {
                    let mut acc = 0.0;
                    let mut acc_theta = 0.0;
                    for lp in 0..z {
                        acc += mu[l.abs_diff(lp)] * ga[lp];
                        acc_theta += dmu[l.abs_diff(lp)] * qt[g][col * z + lp] * ga[l];
                    }
                    g_qt[l] = -p.w_p * acc;
                    gr[5] += -p.w_p * acc_theta;
                }
                for (o, &off) in kf.offsets.iter().enumerate() {
                    let Some(j) = grid.neighbor(col, off) else { continue };
                    let qj = &q_prev[g][j * z..(j + 1) * z];
                    let g_k: f64 = g_qt.iter().zip(qj).map(|(a, b)| a * b).sum();
                    let k = kf.weights[g][col * no + o];
                    for (gp, &a) in g_prev[g][j * z..(j + 1) * z].iter_mut().zip(&g_qt) {
                        *gp += k * a;
                    }
                    let d2 = (off.0 * off.0 + off.1 * off.1) as f64;
                    let f2 = kf.feature_dist2[g][col * no + o];
                    let e1 = (-d2 / (2.0 * p.theta1 * p.theta1) - f2 / (2.0 * p.theta2 * p.theta2)).exp();
                    let e3 = (-d2 / (2.0 * p.theta3 * p.theta3)).exp();
                    gr[1] += g_k * e3;
                    gr[2] += g_k * e1 * d2 / p.theta1.powi(3);
                    gr[3] += g_k * e1 * f2 / p.theta2.powi(3);
                    gr[4] += g_k * p.w1 * e3 * d2 / p.theta3.powi(3);
                }
            }
        }
        fold_links(&ue, &mut g_prev);
        g_act = softmax_backward(&ue, q_prev, &g_prev);
    }
    for (gl, ga) in g_logits_eff.iter_mut().zip(&g_act) {
        for (a, b) in gl.iter_mut().zip(ga) {
            *a += b;
        }
    }

    // effective logits are clamp(s * l)
    let mut logit_grads: GridField = Vec::with_capacity(u.grids.len());
    for (g, grid) in u.grids.iter().enumerate() {
        let mut out = vec![0.0; grid.logits.len()];
        for (i, &l) in grid.logits.iter().enumerate() {
            if (s.unary_scale * l).abs() < LOGIT_CLAMP {
                out[i] = g_logits_eff[g][i] * s.unary_scale;
                gr[6] += g_logits_eff[g][i] * l;
            }
        }
        logit_grads.push(out);
    }
    if gr.iter().any(|v| !v.is_finite()) || logit_grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok(LossReport {
        loss,
        grads: ParamGrads::from_array(gr),
        logit_grads,
    })
}

/// Central difference of `f` along coordinate `i`.
pub fn central_difference(f: &impl Fn(&[f64]) -> Result<f64>, x: &[f64], i: usize, step: f64) -> Result<f64> {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += step;
    xm[i] -= step;
    Ok((f(&xp)? - f(&xm)?) / (2.0 * step))
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst relative error between `grad` and central differences of `f` on
/// the listed coordinates.
pub fn fd_compare(
    f: &impl Fn(&[f64]) -> Result<f64>,
    grad: &[f64],
    x: &[f64],
    coords: &[usize],
    step: f64,
    floor: f64,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for &i in coords {
        let fd = central_difference(f, x, i, step)?;
        worst = worst.max(relative_error(grad[i], fd, floor));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    /// Per scalar: (name, analytic, finite difference, relative error).
    pub scalars: Vec<(String, f64, f64, f64)>,
    pub max_scalar_error: f64,
    /// Logit errors are normalized by the largest analytic logit gradient.
    pub max_logit_error: f64,
    pub logits_checked: usize,
}

impl FdReport {
    pub fn max_error(&self) -> f64 {
        self.max_scalar_error.max(self.max_logit_error)
    }
}

/// Compares analytic gradients with central differences: `scalar_step` on
/// each scalar, `logit_step` on up to `max_logits` owned logits chosen with
/// `seed`. Features are frozen at the evaluation point.
pub fn fd_check(
    u: &UnaryField,
    s: &Scalars,
    gt: &GroundTruth,
    scalar_step: f64,
    logit_step: f64,
    max_logits: usize,
    seed: u64,
) -> Result<FdReport> {
    let kf = compute_kernel(&u.scaled(s.unary_scale), None, &s.params)?;
    let report = meanfield_grad(u, &kf, s, gt)?;
    let analytic = report.grads.to_array();
    let base = s.to_array();
    let mut scalars = Vec::with_capacity(7);
    let mut max_scalar = 0.0f64;
    let f_scalar = |x: &[f64]| {
        let a: [f64; 7] = x.try_into().expect("seven scalars");
        loss_fixed_features(u, &kf, &s.with_array(a), gt)
    };
    for (i, name) in SCALAR_NAMES.iter().enumerate() {
        let fd = central_difference(&f_scalar, &base, i, scalar_step)?;
        let err = relative_error(analytic[i], fd, 1e-8);
        max_scalar = max_scalar.max(err);
        scalars.push((name.to_string(), analytic[i], fd, err));
    }

    let mut owned: Vec<(usize, usize)> = Vec::new();
    for (g, grid) in u.grids.iter().enumerate() {
        for c in 0..grid.len() {
            if grid.owned[c] {
                owned.extend((0..u.column_length).map(|l| (g, c * u.column_length + l)));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    owned.shuffle(&mut rng);
    owned.truncate(max_logits);
    let scale = report
        .logit_grads
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    let mut max_logit = 0.0f64;
    for &(g, i) in &owned {
        let x0 = u.grids[g].logits[i];
        let f = |x: &[f64]| {
            let mut uu = u.clone();
            uu.grids[g].logits[i] = x[0];
            loss_fixed_features(&uu, &kf, s, gt)
        };
        let fd = central_difference(&f, &[x0], 0, logit_step)?;
        max_logit = max_logit.max((report.logit_grads[g][i] - fd).abs() / scale);
    }
    Ok(FdReport {
        scalars,
        max_scalar_error: max_scalar,
        max_logit_error: max_logit,
        logits_checked: owned.len(),
    })
}

/// Which scalars `fit` updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Trainable {
    pub w_p: bool,
    pub w1: bool,
    pub theta1: bool,
    pub theta2: bool,
    pub theta3: bool,
    pub theta_comp: bool,
    pub unary_scale: bool,
}

impl Default for Trainable {
    fn default() -> Self {
        Trainable {
            w_p: true,
            w1: true,
            theta1: true,
            theta2: true,
            theta3: true,
            theta_comp: true,
            unary_scale: true,
        }
    }
}

impl Trainable {
    fn mask(&self) -> [bool; 7] {
        [
            self.w_p,
            self.w1,
            self.theta1,
            self.theta2,
            self.theta3,
            self.theta_comp,
            self.unary_scale,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Orders instances into mini-batches; unused when `batch_size` is 0.
    /// Not serialized: runs derive it from their top-level seed.
    #[serde(skip)]
    pub seed: u64,
    /// Instances per update; 0 means the whole dataset.
    pub batch_size: usize,
    /// Heavy-ball coefficient; 0 gives plain gradient descent.
    pub momentum: f64,
    pub trainable: Trainable,
    pub gradient: GradientMode,
    pub fd_step: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            learning_rate: 0.01,
            epochs: 100,
            seed: 0,
            batch_size: 0,
            momentum: 0.9,
            trainable: Trainable::default(),
            gradient: GradientMode::Analytic,
            fd_step: 1e-4,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
        }
        Ok(())
    }
}

/// One training example.
#[derive(Debug, Clone)]
pub struct Instance {
    pub unary: UnaryField,
    pub truth: GroundTruth,
    /// Needed only for the intensity kernel.
    pub patches: Option<PatchSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub scalars: Scalars,
    /// Mean MCE over the dataset before each epoch's updates.
    pub losses: Vec<f64>,
    pub final_loss: f64,
}

fn instance_kernel(inst: &Instance, s: &Scalars) -> Result<KernelField> {
    compute_kernel(&inst.unary.scaled(s.unary_scale), inst.patches.as_ref(), &s.params)
}

/// Mean loss and gradient over `batch`.
fn batch_loss_grad(data: &[Instance], batch: &[usize], s: &Scalars, cfg: &FitConfig) -> Result<(f64, [f64; 7])> {
    let mut loss = 0.0;
    let mut grad = [0.0; 7];
    for &i in batch {
        let inst = &data[i];
        let kf = instance_kernel(inst, s)?;
        let (l, g) = match cfg.gradient {
            GradientMode::Analytic => {
                let r = meanfield_grad(&inst.unary, &kf, s, &inst.truth)?;
                (r.loss, r.grads.to_array())
            }
            GradientMode::FiniteDifference => {
                let x = s.to_array();
                let f = |x: &[f64]| {
                    let a: [f64; 7] = x.try_into().expect("seven scalars");
                    loss_fixed_features(&inst.unary, &kf, &s.with_array(a), &inst.truth)
                };
                let mut g = [0.0; 7];
                for (k, gk) in g.iter_mut().enumerate() {
                    *gk = central_difference(&f, &x, k, cfg.fd_step)?;
                }
                (f(&x)?, g)
            }
        };
        loss += l;
        for k in 0..7 {
            grad[k] += g[k];
        }
    }
    let n = batch.len() as f64;
    Ok((loss / n, grad.map(|g| g / n)))
}

/// Mean MCE of the dataset at `s`.
pub fn dataset_loss(data: &[Instance], s: &Scalars) -> Result<f64> {
    let mut total = 0.0;
    for inst in data {
        let kf = instance_kernel(inst, s)?;
        total += loss_fixed_features(&inst.unary, &kf, s, &inst.truth)?;
    }
    Ok(total / data.len() as f64)
}

const LOG_SPACE: [bool; 7] = [false, false, true, true, true, true, false];

/// Gradient descent with optional momentum. Widths are updated in log
/// space so they stay positive.
pub fn fit(data: &[Instance], init: &Scalars, cfg: &FitConfig) -> Result<FitResult> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    cfg.validate()?;
    init.params.validate()?;
    let mask = cfg.trainable.mask();
    let mut s = *init;
    let mut velocity = [0.0f64; 7];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = if cfg.batch_size == 0 { data.len() } else { cfg.batch_size.min(data.len()) };
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if cfg.batch_size != 0 {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        let mut chunks = 0usize;
        for chunk in order.chunks(batch) {
            let (loss, grad) = batch_loss_grad(data, chunk, &s, cfg)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            epoch_loss += loss;
            chunks += 1;
            let mut x = s.to_array();
            for k in 0..7 {
                if !mask[k] {
                    continue;
                }
                let g = if LOG_SPACE[k] { grad[k] * x[k] } else { grad[k] };
                velocity[k] = cfg.momentum * velocity[k] - cfg.learning_rate * g;
                if LOG_SPACE[k] {
                    x[k] = (x[k].ln() + velocity[k]).exp();
                } else {
                    x[k] += velocity[k];
                }
            }
            s = s.with_array(x);
            if s.params.validate().is_err() || s.to_array().iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
        }
        losses.push(epoch_loss / chunks as f64);
    }
    let final_loss = dataset_loss(data, &s)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged { epoch: cfg.epochs });
    }
    Ok(FitResult {
        scalars: s,
        losses,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crf::{argmax, infer, meanfield_infer};
    use rand::Rng;

    fn instance(seed: u64, w: usize, h: usize, z: usize) -> (UnaryField, GroundTruth) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = (0..w * h * z).map(|_| rng.random_range(-2.0..2.0)).collect();
        let u = UnaryField::from_grid(w, h, z, logits).unwrap();
        let n = w * h;
        let gt = GroundTruth {
            column_length: z,
            labels: (0..n).map(|_| rng.random_range(0..z)).collect(),
            valid: (0..n).map(|i| i % 5 != 3).collect(),
        };
        (u, gt)
    }

    fn small_params(t: usize) -> CrfParams {
        CrfParams {
            theta2: 0.5,
            window_radius: 2,
            iterations: t,
            ..CrfParams::prostate()
        }
    }

    #[test]
    fn wbce_examples() {
        assert!((wbce_loss(&[0.0], &[true], 1.0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(wbce_loss(&[40.0, -40.0], &[true, false], 64.0).unwrap() < 1e-11);
        let l = wbce_loss(&[0.3, -1.2], &[true, false], 64.0).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let want = (-(64.0 * sig(0.3).ln()) - (1.0 - sig(-1.2)).ln()) / 2.0;
        assert!((l - want).abs() < 1e-12);
        assert!(wbce_loss(&[0.0], &[true], 0.0).is_err());
    }

    #[test]
    fn mce_examples() {
        let z = 64;
        let gt = GroundTruth {
            column_length: z,
            labels: vec![3, 10],
            valid: vec![true, true],
        };
        let uniform = SurfaceLabeling {
            column_length: z,
            labels: vec![0, 0],
            marginals: vec![1.0 / z as f64; 2 * z],
        };
        assert!((mce_loss(&uniform, &gt).unwrap() - (z as f64).ln()).abs() < 1e-12);
        let mut onehot = vec![0.0; 2 * z];
        onehot[3] = 1.0;
        onehot[z + 10] = 1.0;
        let lab = SurfaceLabeling {
            column_length: z,
            labels: vec![3, 10],
            marginals: onehot,
        };
        assert_eq!(mce_loss(&lab, &gt).unwrap(), 0.0);

        let gt2 = GroundTruth {
            column_length: 2,
            labels: vec![0, 1],
            valid: vec![true, true],
        };
        let lab2 = SurfaceLabeling {
            column_length: 2,
            labels: vec![0, 0],
            marginals: vec![0.8, 0.2, 0.6, 0.4],
        };
        let want = -(0.8f64.ln() + 0.4f64.ln()) / 2.0;
        assert!((mce_loss(&lab2, &gt2).unwrap() - want).abs() < 1e-15);
        let none = GroundTruth { valid: vec![false, false], ..gt2 };
        assert!(matches!(mce_loss(&lab2, &none), Err(Error::NoValidColumns)));
    }

    #[test]
    fn forward_loss_matches_inference_marginals() {
        let (u, gt) = instance(1, 4, 4, 8);
        let p = small_params(3);
        let s = Scalars::new(p);
        let kf = compute_kernel(&u, None, &p).unwrap();
        let lab = meanfield_infer(&u, &kf, &p).unwrap();
        let a = loss_fixed_features(&u, &kf, &s, &gt).unwrap();
        assert!((a - mce_loss(&lab, &gt).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn decoupled_gradient_is_softmax_cross_entropy() {
        let (u, gt) = instance(2, 3, 3, 6);
        let p = CrfParams { w_p: 0.0, ..small_params(3) };
        let s = Scalars::new(p);
        let kf = compute_kernel(&u, None, &p).unwrap();
        let r = meanfield_grad(&u, &kf, &s, &gt).unwrap();
        let n = gt.num_valid() as f64;
        for v in 0..9 {
            let q = crate::crf::softmax(u.vertex_logits(v));
            for l in 0..6 {
                let want = if gt.valid[v] {
                    (q[l] - if l == gt.labels[v] { 1.0 } else { 0.0 }) / n
                } else {
                    0.0
                };
                assert!((r.logit_grads[0][v * 6 + l] - want).abs() < 1e-15);
            }
        }
        assert_eq!(r.grads.theta1, 0.0);
    }

    #[test]
    fn flat_compatibility_has_vanishing_width_gradient() {
        let (u, gt) = instance(3, 3, 3, 6);
        let mut prev = f64::INFINITY;
        for theta in [10.0, 100.0, 1000.0] {
            let p = CrfParams { theta_comp: theta, ..small_params(2) };
            let kf = compute_kernel(&u, None, &p).unwrap();
            let g = meanfield_grad(&u, &kf, &Scalars::new(p), &gt).unwrap().grads.theta_comp.abs();
            assert!(g < prev);
            prev = g;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, t) in [(0, 2), (1, 2), (2, 5), (3, 5)] {
            let (u, gt) = instance(seed, 4, 4, 8);
            let s = Scalars {
                params: small_params(t),
                unary_scale: 1.3,
            };
            let rep = fd_check(&u, &s, &gt, 1e-3, 1e-2, 100, seed).unwrap();
            assert!(rep.max_error() <= 1e-3, "{rep:?}");
            assert_eq!(rep.logits_checked, 100);
        }
    }

    #[test]
    fn gradients_cross_linked_columns() {
        // a 3-wide strip where the last column is a copy of the first
        let z = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits: Vec<f64> = (0..4 * z).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut logits = logits;
        let first: Vec<f64> = logits[..z].to_vec();
        logits[3 * z..].copy_from_slice(&first);
        let grid = crate::crf::Grid {
            width: 4,
            height: 1,
            vertex: vec![0, 1, 2, 0],
            owned: vec![true, true, true, false],
            logits,
        };
        let u = UnaryField::new(z, vec![grid], vec![(0, 0), (0, 1), (0, 2)]).unwrap();
        let gt = GroundTruth {
            column_length: z,
            labels: vec![1, 3, 0],
            valid: vec![true; 3],
        };
        let s = Scalars::new(CrfParams { theta2: 0.5, window_radius: 1, iterations: 3, ..CrfParams::prostate() });
        let rep = fd_check(&u, &s, &gt, 1e-3, 1e-2, 100, 0).unwrap();
        assert!(rep.max_error() <= 1e-3, "{rep:?}");
    }

    #[test]
    fn harness_is_exact_on_quadratics() {
        let f = |x: &[f64]| Ok(3.0 * x[0] * x[0] - 2.0 * x[0] * x[1] + 0.5 * x[1] * x[1] + x[1]);
        let x = [0.7, -1.3];
        let grad = [6.0 * x[0] - 2.0 * x[1], -2.0 * x[0] + x[1] + 1.0];
        assert!(fd_compare(&f, &grad, &x, &[0, 1], 1e-3, 1e-12).unwrap() <= 1e-10);
    }

    #[test]
    fn large_steps_degrade_the_check() {
        let (u, gt) = instance(4, 4, 4, 8);
        let s = Scalars::new(small_params(2));
        let fine = fd_check(&u, &s, &gt, 1e-3, 1e-2, 30, 0).unwrap();
        let coarse = fd_check(&u, &s, &gt, 0.5, 0.5, 30, 0).unwrap();
        assert!(coarse.max_error() > fine.max_error());
    }

    #[test]
    fn fit_zero_epochs_returns_init() {
        let (u, gt) = instance(5, 3, 3, 6);
        let data = vec![Instance { unary: u, truth: gt, patches: None }];
        let init = Scalars::new(small_params(2));
        let cfg = FitConfig { epochs: 0, ..FitConfig::default() };
        let r = fit(&data, &init, &cfg).unwrap();
        assert_eq!(r.scalars, init);
        assert!(r.losses.is_empty());
    }

    #[test]
    fn fit_first_step_does_not_increase_loss() {
        let (u, _) = instance(6, 4, 4, 8);
        let truth = GroundTruth {
            column_length: 8,
            labels: u.argmax_labels(),
            valid: vec![true; 16],
        };
        let data = vec![Instance { unary: u, truth, patches: None }];
        let init = Scalars::new(small_params(2));
        let cfg = FitConfig { epochs: 1, learning_rate: 1e-3, momentum: 0.0, ..FitConfig::default() };
        let r = fit(&data, &init, &cfg).unwrap();
        assert!(r.final_loss <= r.losses[0]);
    }

    #[test]
    fn fit_keeps_widths_positive_and_is_deterministic() {
        let data: Vec<Instance> = (0..3)
            .map(|k| {
                let (unary, truth) = instance(10 + k, 3, 3, 6);
                Instance { unary, truth, patches: None }
            })
            .collect();
        let init = Scalars::new(small_params(2));
        let cfg = FitConfig { epochs: 15, learning_rate: 0.5, batch_size: 2, ..FitConfig::default() };
        let a = fit(&data, &init, &cfg).unwrap();
        let b = fit(&data, &init, &cfg).unwrap();
        assert_eq!(a, b);
        let p = a.scalars.params;
        assert!(p.theta1 > 0.0 && p.theta2 > 0.0 && p.theta3 > 0.0 && p.theta_comp > 0.0);
    }

    #[test]
    fn finite_difference_mode_tracks_analytic_mode() {
        let (unary, truth) = instance(20, 3, 3, 6);
        let data = vec![Instance { unary, truth, patches: None }];
        let init = Scalars::new(small_params(2));
        let cfg = FitConfig { epochs: 3, learning_rate: 0.05, ..FitConfig::default() };
        let a = fit(&data, &init, &cfg).unwrap();
        let f = fit(&data, &init, &FitConfig { gradient: GradientMode::FiniteDifference, ..cfg }).unwrap();
        for (x, y) in a.scalars.to_array().iter().zip(f.scalars.to_array()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn frozen_scalars_do_not_move() {
        let (unary, truth) = instance(21, 3, 3, 6);
        let data = vec![Instance { unary, truth, patches: None }];
        let init = Scalars::new(small_params(2));
        let trainable = Trainable { w_p: false, theta2: false, ..Trainable::default() };
        let cfg = FitConfig { epochs: 3, trainable, ..FitConfig::default() };
        let r = fit(&data, &init, &cfg).unwrap();
        assert_eq!(r.scalars.params.w_p, init.params.w_p);
        assert_eq!(r.scalars.params.theta2, init.params.theta2);
        assert_ne!(r.scalars.params.theta1, init.params.theta1);
    }

    #[test]
    fn labeling_argmax_consistent() {
        let (u, _) = instance(8, 3, 3, 5);
        let lab = infer(&u, None, &small_params(2)).unwrap();
        for v in 0..9 {
            assert_eq!(lab.labels[v], argmax(lab.marginal(v)));
        }
    }
}
