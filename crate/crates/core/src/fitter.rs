//! Robust body-model fitting to 2D keypoints.
//!
//! The objective is a confidence-weighted Geman-McClure reprojection term
//! plus quadratic shape and pose priors with hinge penalties at the knee and
//! elbow limits. It is minimised by iteratively reweighted Gauss-Newton with
//! Levenberg damping and a backtracking step, from several global-rotation
//! starts.

use nalgebra::{SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::bodymodel::{
    hinge_limits, pose_joints, pose_joints_with_jacobian, rest_joints, BodyParams, Camera, Keypoint, PoseParams,
    ShapeParams, BETA_LIMIT, NUM_ARTICULATIONS, MOTION_RANGE, NUM_BETAS, NUM_PARAMS, ROTATION_OFFSET, THETA_OFFSET,
    TRANSLATION_OFFSET, VIEW_RANGE,
};
use crate::detector::KeypointSet;
use crate::error::{Error, Result};

type Mat = SMatrix<f64, NUM_PARAMS, NUM_PARAMS>;
type Vec42 = SVector<f64, NUM_PARAMS>;

/// Robust penalty applied to each keypoint's squared reprojection distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataLoss {
    #[default]
    GemanMcclure,
    /// `e² / σ²`: the small-residual limit of Geman-McClure, without saturation.
    Squared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Geman-McClure scale, pixels.
    pub sigma_gm: f64,
    pub lambda_shape: f64,
    pub lambda_pose: f64,
    pub max_outer_iters: usize,
    /// Stop when an accepted step lowers the objective by less than this
    /// fraction of its value.
    pub convergence_tol: f64,
    pub restarts: usize,
    pub loss: DataLoss,
    /// Fraction of each motion range's half-width, about its centre, on
    /// which the pose prior is flat. 0 gives a plain Gaussian.
    pub prior_slack: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            sigma_gm: 1.5,
            lambda_shape: 1e-4,
            lambda_pose: 0.05,
            max_outer_iters: 200,
            convergence_tol: 1e-10,
            restarts: 4,
            loss: DataLoss::GemanMcclure,
            prior_slack: 0.5,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_gm > 0.0 && self.sigma_gm.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma_gm {} must be positive", self.sigma_gm)));
        }
        if !(self.lambda_shape >= 0.0 && self.lambda_pose >= 0.0) {
            return Err(Error::InvalidArgument("prior weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.prior_slack) {
            return Err(Error::InvalidArgument("prior_slack must lie in [0, 1]".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidArgument("at least one restart is required".into()));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::InvalidArgument("convergence_tol must be non-negative".into()));
        }
        Ok(())
    }
}

/// `e² / (e² + σ²)`.
pub fn geman_mcclure(residual: f64, sigma: f64) -> f64 {
    let s = residual * residual;
    s / (s + sigma * sigma)
}

/// Penalty and its derivative as functions of the squared residual `s`.
fn rho(loss: DataLoss, s: f64, sigma2: f64) -> (f64, f64) {
    match loss {
        DataLoss::GemanMcclure => {
            let d = s + sigma2;
            (s / d, sigma2 / (d * d))
        }
        DataLoss::Squared => (s / sigma2, 1.0 / sigma2),
    }
}

/// Objective value split into its terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub data: f64,
    pub shape_prior: f64,
    pub pose_prior: f64,
    pub total: f64,
}

fn hinge_violation(articulation: usize, x: f64) -> f64 {
    match hinge_limits(articulation) {
        Some((_, hi)) if x > hi => x - hi,
        Some((lo, _)) if x < lo => x - lo,
        _ => 0.0,
    }
}

fn shape_prior(shape: &ShapeParams) -> f64 {
    shape.beta.iter().map(|b| b * b).sum()
}

/// Floor on the pose prior's per-component scale, radians.
pub const MIN_PRIOR_SCALE: f64 = 0.02;

/// Mean and scale of the diagonal Gaussian pose prior: the centre and the
/// standard deviation of each [`MOTION_RANGE`] interval.
pub fn pose_prior_moments() -> ([[f64; 3]; NUM_ARTICULATIONS], [[f64; 3]; NUM_ARTICULATIONS]) {
    let mean = MOTION_RANGE.map(|axes| axes.map(|(lo, hi)| 0.5 * (lo + hi)));
    let scale = MOTION_RANGE.map(|axes| axes.map(|(lo, hi)| ((hi - lo) / 12f64.sqrt()).max(MIN_PRIOR_SCALE)));
    (mean, scale)
}

/// Mean and scale of the view prior on the global rotation, from [`VIEW_RANGE`].
pub fn view_prior_moments() -> ([f64; 3], [f64; 3]) {
    (
        VIEW_RANGE.map(|(lo, hi)| 0.5 * (lo + hi)),
        VIEW_RANGE.map(|(lo, hi)| ((hi - lo) / 12f64.sqrt()).max(MIN_PRIOR_SCALE)),
    )
}

/// Deviation from `mean` beyond the flat band of half-width `band`.
fn excess(v: f64, mean: f64, band: f64) -> f64 {
    let d = v - mean;
    d.signum() * (d.abs() - band).max(0.0)
}

/// Per-coordinate pose prior terms: (parameter index, normalised excess, 1/scale).
fn pose_prior_residuals(pose: &PoseParams, slack: f64) -> Vec<(usize, f64, f64)> {
    let (mean, scale) = pose_prior_moments();
    let mut out = Vec::with_capacity(3 * NUM_ARTICULATIONS + NUM_ARTICULATIONS + 3);
    for (a, v) in pose.theta.iter().enumerate() {
        for c in 0..3 {
            let (lo, hi) = MOTION_RANGE[a][c];
            let e = excess(v[c], mean[a][c], slack * 0.5 * (hi - lo));
            out.push((THETA_OFFSET + 3 * a + c, e / scale[a][c], 1.0 / scale[a][c]));
        }
        let viol = hinge_violation(a, v[0]);
        if viol != 0.0 {
            out.push((THETA_OFFSET + 3 * a, viol / MIN_PRIOR_SCALE, 1.0 / MIN_PRIOR_SCALE));
        }
    }
    let (vmean, vscale) = view_prior_moments();
    for c in 0..3 {
        let (lo, hi) = VIEW_RANGE[c];
        let e = excess(pose.global_rotation[c], vmean[c], slack * 0.5 * (hi - lo));
        out.push((ROTATION_OFFSET + c, e / vscale[c], 1.0 / vscale[c]));
    }
    out
}

fn pose_prior(pose: &PoseParams, slack: f64) -> f64 {
    pose_prior_residuals(pose, slack).iter().map(|(_, r, _)| r * r).sum()
}

/// Evaluates the objective at `params`.
pub fn objective(params: &BodyParams, camera: &Camera, keypoints: &KeypointSet, config: &FitConfig) -> Result<ObjectiveTerms> {
    let joints = pose_joints(&params.shape, &params.pose);
    let sigma2 = config.sigma_gm * config.sigma_gm;
    let mut data = 0.0;
    for (i, kp) in keypoints.points.iter().enumerate() {
        let p = joints.points[i];
        let uv = camera.project_point(&p).ok_or(Error::DegenerateView {
            joint: Keypoint::ALL[i].name(),
            depth: p.z,
        })?;
        let s = (uv[0] - kp.location[0]).powi(2) + (uv[1] - kp.location[1]).powi(2);
        data += kp.weight() * rho(config.loss, s, sigma2).0;
    }
    let shape = config.lambda_shape * shape_prior(&params.shape);
    let pose = config.lambda_pose * pose_prior(&params.pose, config.prior_slack);
    Ok(ObjectiveTerms {
        data,
        shape_prior: shape,
        pose_prior: pose,
        total: data + shape + pose,
    })
}

/// Linearisation of the objective in IRLS form: `H ≈ JᵀWJ`, `g = ½∇E`.
struct Linearisation {
    terms: ObjectiveTerms,
    hessian: Mat,
    half_gradient: Vec42,
}

fn linearise(params: &BodyParams, camera: &Camera, keypoints: &KeypointSet, config: &FitConfig) -> Result<Linearisation> {
    let (joints, jac) = pose_joints_with_jacobian(params);
    let sigma2 = config.sigma_gm * config.sigma_gm;
    let mut h = Mat::zeros();
    let mut g = Vec42::zeros();
    let mut data = 0.0;
    for (i, kp) in keypoints.points.iter().enumerate() {
        let p = joints.points[i];
        let uv = camera.project_point(&p).ok_or(Error::DegenerateView {
            joint: Keypoint::ALL[i].name(),
            depth: p.z,
        })?;
        let r = nalgebra::Vector2::new(uv[0] - kp.location[0], uv[1] - kp.location[1]);
        let (value, slope) = rho(config.loss, r.norm_squared(), sigma2);
        data += kp.weight() * value;
        let weight = kp.weight() * slope;
        if weight == 0.0 {
            continue;
        }
        let j = camera.projection_jacobian(&p) * jac[i];
        h += j.transpose() * j * weight;
        g += j.transpose() * r * weight;
    }
    for k in 0..NUM_BETAS {
        h[(k, k)] += config.lambda_shape;
        g[k] += config.lambda_shape * params.shape.beta[k];
    }
    for (idx, r, inv_scale) in pose_prior_residuals(&params.pose, config.prior_slack) {
        if r != 0.0 {
            h[(idx, idx)] += config.lambda_pose * inv_scale * inv_scale;
            g[idx] += config.lambda_pose * r * inv_scale;
        }
    }
    let shape = config.lambda_shape * shape_prior(&params.shape);
    let pose = config.lambda_pose * pose_prior(&params.pose, config.prior_slack);
    Ok(Linearisation {
        terms: ObjectiveTerms {
            data,
            shape_prior: shape,
            pose_prior: pose,
            total: data + shape + pose,
        },
        hessian: h,
        half_gradient: g,
    })
}

/// Objective and its exact gradient in the [`BodyParams::to_vector`] layout.
pub fn objective_gradient(
    params: &BodyParams,
    camera: &Camera,
    keypoints: &KeypointSet,
    config: &FitConfig,
) -> Result<(f64, SVector<f64, NUM_PARAMS>)> {
    let lin = linearise(params, camera, keypoints, config)?;
    Ok((lin.terms.total, lin.half_gradient * 2.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: BodyParams,
    pub final_objective: f64,
    pub data_term: f64,
    pub terms: ObjectiveTerms,
    pub converged: bool,
    /// Index of the start that produced the returned fit.
    pub best_restart: usize,
    pub restarts_used: usize,
    pub iterations: usize,
    /// Objective at the chosen start's initialisation.
    pub initial_objective: f64,
}

/// Restart yaw angles: facing the camera, both profiles, facing away.
const RESTART_YAWS: [f64; 4] = [0.0, std::f64::consts::FRAC_PI_2, -std::f64::consts::FRAC_PI_2, std::f64::consts::PI];

fn detected_mean(keypoints: &KeypointSet, which: &[Keypoint]) -> Option<[f64; 2]> {
    let pts: Vec<[f64; 2]> = which
        .iter()
        .map(|&k| keypoints.get(k))
        .filter(|p| p.detected)
        .map(|p| p.location)
        .collect();
    if pts.is_empty() {
        return None;
    }
    let n = pts.len() as f64;
    Some([pts.iter().map(|p| p[0]).sum::<f64>() / n, pts.iter().map(|p| p[1]).sum::<f64>() / n])
}

/// Depth and pelvis translation from detected torso keypoints.
pub fn initial_translation(keypoints: &KeypointSet, camera: &Camera, shape: &ShapeParams) -> [f64; 3] {
    let rest = rest_joints(shape);
    let hips = [Keypoint::RightHip, Keypoint::LeftHip];
    let shoulders = [Keypoint::RightShoulder, Keypoint::LeftShoulder];
    let mid = |j: &[Keypoint]| j.iter().map(|&k| rest.get(k)).sum::<Vector3<f64>>() / j.len() as f64;
    let torso_3d = (mid(&shoulders) - mid(&hips)).norm();

    let hip_2d = detected_mean(keypoints, &hips);
    let shoulder_2d = detected_mean(keypoints, &shoulders);
    let depth = match (camera.known_depth, hip_2d, shoulder_2d) {
        (Some(d), _, _) => d,
        (None, Some(a), Some(b)) => {
            let torso_2d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt().max(1.0);
            camera.focal * torso_3d / torso_2d
        }
        _ => camera.focal * 170.0 / camera.image_size[1] as f64 * 1.2,
    };
    let all: Vec<Keypoint> = Keypoint::ALL.to_vec();
    let center = hip_2d.or_else(|| detected_mean(keypoints, &all)).unwrap_or(camera.principal_point);
    [
        (center[0] - camera.principal_point[0]) * depth / camera.focal,
        (center[1] - camera.principal_point[1]) * depth / camera.focal,
        depth,
    ]
}

fn wrap_rotation(v: &mut [f64; 3]) {
    let n = Vector3::from(*v).norm();
    if n > std::f64::consts::PI {
        let scale = (n - 2.0 * std::f64::consts::PI) / n;
        for c in v.iter_mut() {
            *c *= scale;
        }
    }
}

fn apply_step(params: &BodyParams, step: &Vec42, scale: f64) -> BodyParams {
    let mut v = params.to_vector();
    for k in 0..NUM_PARAMS {
        v[k] += scale * step[k];
    }
    let mut out = BodyParams::from_vector(&v);
    for b in out.shape.beta.iter_mut() {
        *b = b.clamp(-BETA_LIMIT, BETA_LIMIT);
    }
    for t in out.pose.theta.iter_mut() {
        wrap_rotation(t);
    }
    wrap_rotation(&mut out.pose.global_rotation);
    out
}

struct Descent {
    params: BodyParams,
    terms: ObjectiveTerms,
    iterations: usize,
    converged: bool,
}

/// Damped IRLS Gauss-Newton from one start. Accepted steps never increase
/// the objective.
fn descend(
    start: BodyParams,
    camera: &Camera,
    keypoints: &KeypointSet,
    config: &FitConfig,
    fixed_depth: bool,
) -> Result<Descent> {
    let mut params = start;
    let mut lin = linearise(&params, camera, keypoints, config)?;
    let mut damping = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    let tz = TRANSLATION_OFFSET + 2;

    while iterations < config.max_outer_iters {
        iterations += 1;
        let mut accepted = None;
        while damping <= 1e12 {
            let mut a = lin.hessian;
            for k in 0..NUM_PARAMS {
                a[(k, k)] += damping * (lin.hessian[(k, k)] + 1e-6);
            }
            let mut rhs = -lin.half_gradient;
            if fixed_depth {
                a.row_mut(tz).fill(0.0);
                a.column_mut(tz).fill(0.0);
                a[(tz, tz)] = 1.0;
                rhs[tz] = 0.0;
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&rhs)) else {
                damping *= 10.0;
                continue;
            };
            // backtracking along the damped direction
            let mut scale = 1.0;
            for _ in 0..4 {
                let trial = apply_step(&params, &step, scale);
                if let Ok(t) = objective(&trial, camera, keypoints, config) {
                    if t.total.is_finite() && t.total < lin.terms.total {
                        accepted = Some((trial, t));
                        break;
                    }
                }
                scale *= 0.5;
            }
            if accepted.is_some() {
                damping = (damping * 0.5).max(1e-12);
                break;
            }
            damping *= 10.0;
        }
        let Some((trial, t)) = accepted else {
            // no descent direction left: a stationary point to working precision
            converged = true;
            break;
        };
        let decrease = lin.terms.total - t.total;
        params = trial;
        lin = linearise(&params, camera, keypoints, config)?;
        if decrease <= config.convergence_tol * lin.terms.total.max(1e-12) {
            converged = true;
            break;
        }
    }
    Ok(Descent {
        params,
        terms: lin.terms,
        iterations,
        converged,
    })
}

/// Fits shape and pose to `keypoints`. Uses `init` as the first start if
/// given, otherwise the rest pose at a torso-based depth estimate; further
/// starts rotate it about the vertical axis.
pub fn fit(keypoints: &KeypointSet, camera: &Camera, config: &FitConfig, init: Option<&BodyParams>) -> Result<FitResult> {
    config.validate()?;
    camera.validate()?;
    let base = match init {
        Some(p) => *p,
        None => {
            let mut p = BodyParams::default();
            p.pose.global_translation = initial_translation(keypoints, camera, &p.shape);
            p
        }
    };
    let mut base = base;
    if let Some(d) = camera.known_depth {
        base.pose.global_translation[2] = d;
    }

    if keypoints.detected_count() < 4 {
        let terms = objective(&base, camera, keypoints, config)?;
        return Ok(FitResult {
            params: base,
            final_objective: terms.total,
            data_term: terms.data,
            terms,
            converged: false,
            best_restart: 0,
            restarts_used: 0,
            iterations: 0,
            initial_objective: terms.total,
        });
    }

    let mut best: Option<(usize, Descent, f64)> = None;
    let mut failures = Vec::new();
    let starts = config.restarts.min(RESTART_YAWS.len());
    for (r, &yaw) in RESTART_YAWS.iter().take(starts).enumerate() {
        let mut start = base;
        if r > 0 {
            let rot = nalgebra::Rotation3::from_scaled_axis(Vector3::y() * yaw)
                * nalgebra::Rotation3::from_scaled_axis(Vector3::from(base.pose.global_rotation));
            start.pose.global_rotation = rot.scaled_axis().into();
        }
        let initial = match objective(&start, camera, keypoints, config) {
            Ok(t) => t.total,
            Err(e) => {
                failures.push(format!("start {r}: {e}"));
                continue;
            }
        };
        match descend(start, camera, keypoints, config, camera.known_depth.is_some()) {
            Ok(d) => {
                let better = best.as_ref().is_none_or(|(_, b, _)| d.terms.total < b.terms.total);
                if better {
                    best = Some((r, d, initial));
                }
            }
            Err(e) => failures.push(format!("start {r}: {e}")),
        }
    }
    let Some((r, d, initial)) = best else {
        return Err(Error::FitFailure(failures.join("; ")));
    };
    Ok(FitResult {
        params: d.params,
        final_objective: d.terms.total,
        data_term: d.terms.data,
        terms: d.terms,
        converged: d.converged,
        best_restart: r,
        restarts_used: starts,
        iterations: d.iterations,
        initial_objective: initial,
    })
}
