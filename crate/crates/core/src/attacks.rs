//! Targeted perturbations of detector inputs: keypoint removal and swaps,
//! over the whole image or restricted to disks around the attacked points.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bodymodel::{Keypoint, NUM_KEYPOINTS};
use crate::detector::{
    forward, input_gradient_with_loss, nms_keypoints, DetectorWeights, HeatmapSet, KeypointSet,
    DEFAULT_DETECTION_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::imaging::{clip_pixel, perturbation_stats, Image, PerturbationStats};

/// Pixel distance within which a swapped keypoint counts as landed.
pub const FLIP_TOLERANCE_PX: f64 = 4.0;
/// Iterations over which the plateau test looks back.
pub const PLATEAU_WINDOW: usize = 20;
/// Minimum loss improvement over [`PLATEAU_WINDOW`] iterations.
pub const PLATEAU_DELTA: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum AttackKind {
    Remove { keypoint: Keypoint },
    Flip { a: Keypoint, b: Keypoint },
}

impl AttackKind {
    pub fn keypoints(&self) -> Vec<Keypoint> {
        match *self {
            AttackKind::Remove { keypoint } => vec![keypoint],
            AttackKind::Flip { a, b } => vec![a, b],
        }
    }

    pub fn label(&self) -> String {
        match self {
            AttackKind::Remove { keypoint } => format!("remove {keypoint}"),
            AttackKind::Flip { a, b } => format!("flip {a}<->{b}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Global,
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub mode: AttackMode,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// Perturbation RMSE at which the attack stops; mode default when absent.
    #[serde(default)]
    pub stop_rmse: Option<f64>,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Move the mask to the attacked map's current peak every iteration.
    #[serde(default)]
    pub recenter: bool,
    /// Step up the loss gradient instead of down it.
    #[serde(default)]
    pub untargeted_ascent: bool,
    /// Stop as soon as the attack succeeds.
    #[serde(default)]
    pub stop_on_success: bool,
}

fn default_epsilon() -> f64 {
    0.035
}
fn default_alpha() -> f64 {
    1.0 / 255.0
}
fn default_radius() -> f64 {
    12.0
}
fn default_max_iters() -> usize {
    300
}

impl AttackSpec {
    pub fn new(kind: AttackKind, mode: AttackMode) -> Self {
        AttackSpec {
            kind,
            mode,
            epsilon: default_epsilon(),
            alpha: default_alpha(),
            radius: default_radius(),
            stop_rmse: None,
            max_iters: default_max_iters(),
            recenter: false,
            untargeted_ascent: false,
            stop_on_success: false,
        }
    }

    pub fn remove(keypoint: Keypoint, mode: AttackMode) -> Self {
        Self::new(AttackKind::Remove { keypoint }, mode)
    }

    pub fn flip(a: Keypoint, b: Keypoint, mode: AttackMode) -> Self {
        Self::new(AttackKind::Flip { a, b }, mode)
    }

    pub fn effective_stop_rmse(&self) -> f64 {
        self.stop_rmse.unwrap_or(match self.mode {
            AttackMode::Local => 0.02,
            AttackMode::Global => 0.04,
        })
    }

    /// Checks ranges. A stop RMSE above ε can never be reached, since
    /// every pixel moves by at most ε; such specs are rejected.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::InvalidArgument(format!("epsilon {} outside (0, 1]", self.epsilon)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha {} must be positive", self.alpha)));
        }
        if !(self.radius >= 1.0 && self.radius.is_finite()) {
            return Err(Error::InvalidArgument(format!("radius {} must be at least 1", self.radius)));
        }
        let stop = self.effective_stop_rmse();
        if !(stop > 0.0 && stop <= 2.0 * self.epsilon) {
            return Err(Error::InvalidArgument(format!(
                "stop_rmse {stop} must lie in (0, 2·epsilon]"
            )));
        }
        if let AttackKind::Flip { a, b } = self.kind {
            if a == b {
                return Err(Error::InvalidArgument(format!("cannot flip {a} with itself")));
            }
        }
        Ok(())
    }
}

/// Copy of `maps` with map `i` zeroed.
pub fn target_remove(maps: &HeatmapSet, i: usize) -> Result<HeatmapSet> {
    check_index(i)?;
    let mut out = maps.clone();
    out.map_mut(i).fill(0.0);
    Ok(out)
}

/// Copy of `maps` with maps `i` and `j` exchanged.
pub fn target_flip(maps: &HeatmapSet, i: usize, j: usize) -> Result<HeatmapSet> {
    check_index(i)?;
    check_index(j)?;
    if i == j {
        return Err(Error::InvalidArgument(format!("flip needs two distinct maps, got {i} twice")));
    }
    let mut out = maps.clone();
    let mi = maps.map(i).to_vec();
    out.map_mut(i).copy_from_slice(maps.map(j));
    out.map_mut(j).copy_from_slice(&mi);
    Ok(out)
}

fn check_index(i: usize) -> Result<()> {
    if i >= NUM_KEYPOINTS {
        return Err(Error::InvalidArgument(format!("keypoint index {i} out of range")));
    }
    Ok(())
}

/// Target maps for `kind` given the clean maps.
pub fn target_for(kind: &AttackKind, clean: &HeatmapSet) -> Result<HeatmapSet> {
    match *kind {
        AttackKind::Remove { keypoint } => target_remove(clean, keypoint.index()),
        AttackKind::Flip { a, b } => target_flip(clean, a.index(), b.index()),
    }
}

/// Binary pixel mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<bool>,
}

impl Mask {
    pub fn full(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            values: vec![true; width * height],
        }
    }

    /// Union of filled disks `‖x − c‖ ≤ r` over pixel centres.
    pub fn disks(width: usize, height: usize, centres: &[[f64; 2]], radius: f64) -> Self {
        let mut values = vec![false; width * height];
        for y in 0..height {
            for x in 0..width {
                values[y * width + x] = centres.iter().any(|c| {
                    let (dx, dy) = (x as f64 - c[0], y as f64 - c[1]);
                    dx * dx + dy * dy <= radius * radius
                });
            }
        }
        Mask { width, height, values }
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x]
    }
}

/// State after one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    /// Peak value of each attacked map, in [`AttackKind::keypoints`] order.
    pub peaks: Vec<f64>,
    pub loss: f64,
    pub rmse: f64,
    pub linf: f64,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    #[serde(skip)]
    pub adversarial: Option<Image>,
    pub spec: AttackSpec,
    pub iterations: usize,
    pub final_stats: PerturbationStats,
    pub activation_trace: Vec<TraceEntry>,
    pub success: bool,
    /// RMSE at the first successful iteration.
    pub success_rmse: Option<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub stop_reason: StopReason,
    /// Mask centres at the start of the attack.
    pub centres: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    Budget,
    Plateau,
    Success,
}

impl AttackResult {
    pub fn image(&self) -> &Image {
        self.adversarial.as_ref().expect("attack result carries its image")
    }

    /// Writes `iteration,peak_<k>...,loss,rmse,linf,success` rows.
    pub fn write_trace_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        let names: Vec<String> = self.spec.kind.keypoints().iter().map(|k| format!("peak_{k}")).collect();
        writeln!(out, "iteration,{},loss,rmse,linf,success", names.join(",")).unwrap();
        for e in &self.activation_trace {
            let peaks: Vec<String> = e.peaks.iter().map(|p| format!("{p}")).collect();
            writeln!(out, "{},{},{},{},{},{}", e.iteration, peaks.join(","), e.loss, e.rmse, e.linf, e.success as u8)
                .unwrap();
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn peak_of(maps: &HeatmapSet, k: Keypoint) -> (usize, usize, f64) {
    maps.peak(k.index())
}

/// Whether `maps` realise the attack relative to the clean detections.
pub fn attack_succeeded(kind: &AttackKind, maps: &HeatmapSet, clean: &KeypointSet, threshold: f64) -> bool {
    match *kind {
        AttackKind::Remove { keypoint } => peak_of(maps, keypoint).2 < threshold,
        AttackKind::Flip { a, b } => {
            let landed = |from: Keypoint, to: Keypoint| {
                let (x, y, v) = peak_of(maps, from);
                let t = clean.get(to).location;
                v >= threshold && ((x as f64 - t[0]).powi(2) + (y as f64 - t[1]).powi(2)).sqrt() <= FLIP_TOLERANCE_PX
            };
            landed(a, b) && landed(b, a)
        }
    }
}

/// Iterated signed-gradient attack over the whole image.
pub fn fgsm_global(image: &Image, weights: &DetectorWeights, spec: &AttackSpec) -> Result<AttackResult> {
    if spec.mode != AttackMode::Global {
        return Err(Error::InvalidArgument("fgsm_global needs a global spec".into()));
    }
    let clean_maps = forward(image, weights)?;
    let clean = nms_keypoints(&clean_maps, DEFAULT_DETECTION_THRESHOLD)?;
    run(image, weights, spec, &clean_maps, &clean, Vec::new())
}

/// Iterated signed-gradient attack restricted to disks around the attacked
/// keypoints, as located in `keypoints` (normally the clean detections).
pub fn masked_iterative(
    image: &Image,
    weights: &DetectorWeights,
    keypoints: &KeypointSet,
    spec: &AttackSpec,
) -> Result<AttackResult> {
    if spec.mode != AttackMode::Local {
        return Err(Error::InvalidArgument("masked_iterative needs a local spec".into()));
    }
    let attacked = spec.kind.keypoints();
    for &k in &attacked {
        if !keypoints.get(k).detected {
            return Err(Error::NothingToAttack(k.name()));
        }
    }
    let centres = attacked.iter().map(|&k| keypoints.get(k).location).collect();
    let clean_maps = forward(image, weights)?;
    run(image, weights, spec, &clean_maps, keypoints, centres)
}

/// Dispatches on the spec's mode, detecting keypoints on the clean image.
pub fn attack(image: &Image, weights: &DetectorWeights, spec: &AttackSpec) -> Result<AttackResult> {
    match spec.mode {
        AttackMode::Global => fgsm_global(image, weights, spec),
        AttackMode::Local => {
            let clean = nms_keypoints(&forward(image, weights)?, DEFAULT_DETECTION_THRESHOLD)?;
            masked_iterative(image, weights, &clean, spec)
        }
    }
}

fn run(
    image: &Image,
    weights: &DetectorWeights,
    spec: &AttackSpec,
    clean_maps: &HeatmapSet,
    clean: &KeypointSet,
    centres: Vec<[f64; 2]>,
) -> Result<AttackResult> {
    spec.validate()?;
    let (w, h) = (image.width(), image.height());
    let target = target_for(&spec.kind, clean_maps)?;
    let attacked = spec.kind.keypoints();
    let mut mask = match spec.mode {
        AttackMode::Global => Mask::full(w, h),
        AttackMode::Local => Mask::disks(w, h, &centres, spec.radius),
    };
    let alpha = spec.alpha as f32;
    let eps = spec.epsilon as f32;
    let direction = if spec.untargeted_ascent { 1.0f32 } else { -1.0 };
    let stop_rmse = spec.effective_stop_rmse();

    let mut adv = image.clone();
    let mut trace = Vec::new();
    let mut losses = Vec::new();
    let mut success_rmse = None;
    let mut reason = StopReason::MaxIters;
    let (mut grad, initial_loss, mut maps) = input_gradient_with_loss(&adv, weights, &target)?;
    let mut current_loss = initial_loss;
    losses.push(initial_loss);

    for iteration in 1..=spec.max_iters {
        for (idx, g) in grad.values.iter().enumerate() {
            if !mask.values[idx] || *g == 0.0 {
                continue;
            }
            let step = direction * alpha * g.signum() as f32;
            let px = &mut adv.pixels_mut()[idx];
            *px = clip_pixel(*px + step, image.pixels()[idx], eps);
        }
        let (g, l, m) = input_gradient_with_loss(&adv, weights, &target)?;
        grad = g;
        maps = m;
        current_loss = l;
        losses.push(l);
        let stats = perturbation_stats(image, &adv)?;
        let success = attack_succeeded(&spec.kind, &maps, clean, clean.threshold);
        if success && success_rmse.is_none() {
            success_rmse = Some(stats.rmse());
        }
        trace.push(TraceEntry {
            iteration,
            peaks: attacked.iter().map(|&k| peak_of(&maps, k).2).collect(),
            loss: l,
            rmse: stats.rmse(),
            linf: stats.linf,
            success,
        });
        if spec.recenter && spec.mode == AttackMode::Local {
            let c: Vec<[f64; 2]> = attacked
                .iter()
                .map(|&k| {
                    let (x, y, _) = peak_of(&maps, k);
                    [x as f64, y as f64]
                })
                .collect();
            mask = Mask::disks(w, h, &c, spec.radius);
        }
        if success && spec.stop_on_success {
            reason = StopReason::Success;
            break;
        }
        if stats.rmse() >= stop_rmse {
            reason = StopReason::Budget;
            break;
        }
        if iteration >= PLATEAU_WINDOW {
            let before = losses[iteration - PLATEAU_WINDOW];
            let gain = if spec.untargeted_ascent { l - before } else { before - l };
            if gain < PLATEAU_DELTA {
                reason = StopReason::Plateau;
                break;
            }
        }
    }
    let final_stats = perturbation_stats(image, &adv)?;
    let success = attack_succeeded(&spec.kind, &maps, clean, clean.threshold);
    Ok(AttackResult {
        adversarial: Some(adv),
        spec: spec.clone(),
        iterations: trace.len(),
        final_stats,
        activation_trace: trace,
        success,
        success_rmse,
        initial_loss,
        final_loss: current_loss,
        stop_reason: reason,
        centres,
    })
}
