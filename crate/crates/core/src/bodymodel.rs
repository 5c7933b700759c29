//! Analytic parametric skeleton: shape-dependent rest joints, forward
//! kinematics over a fixed tree, and pinhole projection, each with an
//! analytic Jacobian.
//!
//! Coordinates are camera-aligned: `+x` is the subject's left (image right
//! for a subject facing the camera), `+y` points toward the feet and `+z`
//! points away from the camera. Lengths are centimetres, angles radians.
//!
//! Template rest pose (A-pose), bone vectors relative to the parent node:
//!
//! | node            | parent     | bone (cm)                    | shape group     |
//! |-----------------|------------|------------------------------|-----------------|
//! | right/left hip  | pelvis     | (∓9.5, 0, 0)                 | hip width       |
//! | right/left knee | hip        | (0, 41, 0)                   | leg length      |
//! | right/left ankle| knee       | (0, 39, 0)                   | leg length      |
//! | neck            | pelvis     | (0, −54, 0)                  | torso length    |
//! | head top        | neck       | (0, −28, 0)                  | none            |
//! | r/l shoulder    | neck       | (∓18, 0, 0)                  | shoulder width  |
//! | r/l elbow       | shoulder   | 30·(∓sin 25°, cos 25°, 0)    | arm length      |
//! | r/l wrist       | elbow      | 25·(∓sin 25°, cos 25°, 0)    | arm length      |
//!
//! The template stands on a ground plane 88 cm below the pelvis, so its
//! head top is 170 cm above ground. Every bone is multiplied by
//! `1 + 0.1·β_height` and, if it belongs to a group, by `1 + 0.1·β_group`.

use nalgebra::{Matrix2x3, Matrix3, Rotation3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const NUM_KEYPOINTS: usize = 13;
/// Observable keypoints plus the pelvis root and the neck branch node.
pub const NUM_NODES: usize = 15;
pub const PELVIS: usize = 13;
pub const NECK: usize = 14;
pub const NUM_BETAS: usize = 6;
pub const NUM_ARTICULATIONS: usize = 10;
/// Layout of [`BodyParams::to_vector`]: betas, articulations, global rotation, translation.
pub const NUM_PARAMS: usize = NUM_BETAS + 3 * NUM_ARTICULATIONS + 6;
pub const THETA_OFFSET: usize = NUM_BETAS;
pub const ROTATION_OFFSET: usize = NUM_BETAS + 3 * NUM_ARTICULATIONS;
pub const TRANSLATION_OFFSET: usize = ROTATION_OFFSET + 3;

pub const TEMPLATE_HEIGHT: f64 = 170.0;
/// Ground plane depth below the pelvis in the template, along `+y`.
pub const TEMPLATE_GROUND_Y: f64 = 88.0;
/// Per-unit multiplicative effect of every beta component.
pub const BETA_STEP: f64 = 0.1;
pub const BETA_LIMIT: f64 = 3.0;
/// Cameras refuse to project joints closer than this (cm).
pub const NEAR_PLANE: f64 = 10.0;

/// The thirteen evaluated keypoints, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Keypoint {
    RightAnkle,
    RightKnee,
    RightHip,
    LeftHip,
    LeftKnee,
    LeftAnkle,
    RightWrist,
    RightElbow,
    RightShoulder,
    LeftShoulder,
    LeftElbow,
    LeftWrist,
    HeadTop,
}

impl Keypoint {
    pub const ALL: [Keypoint; NUM_KEYPOINTS] = [
        Keypoint::RightAnkle,
        Keypoint::RightKnee,
        Keypoint::RightHip,
        Keypoint::LeftHip,
        Keypoint::LeftKnee,
        Keypoint::LeftAnkle,
        Keypoint::RightWrist,
        Keypoint::RightElbow,
        Keypoint::RightShoulder,
        Keypoint::LeftShoulder,
        Keypoint::LeftElbow,
        Keypoint::LeftWrist,
        Keypoint::HeadTop,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Keypoint> {
        Keypoint::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Keypoint::RightAnkle => "right_ankle",
            Keypoint::RightKnee => "right_knee",
            Keypoint::RightHip => "right_hip",
            Keypoint::LeftHip => "left_hip",
            Keypoint::LeftKnee => "left_knee",
            Keypoint::LeftAnkle => "left_ankle",
            Keypoint::RightWrist => "right_wrist",
            Keypoint::RightElbow => "right_elbow",
            Keypoint::RightShoulder => "right_shoulder",
            Keypoint::LeftShoulder => "left_shoulder",
            Keypoint::LeftElbow => "left_elbow",
            Keypoint::LeftWrist => "left_wrist",
            Keypoint::HeadTop => "head_top",
        }
    }

    /// Column header used in reports ("Right ankle", ...).
    pub fn title(self) -> &'static str {
        match self {
            Keypoint::RightAnkle => "Right ankle",
            Keypoint::RightKnee => "Right knee",
            Keypoint::RightHip => "Right hip",
            Keypoint::LeftHip => "Left hip",
            Keypoint::LeftKnee => "Left knee",
            Keypoint::LeftAnkle => "Left ankle",
            Keypoint::RightWrist => "Right wrist",
            Keypoint::RightElbow => "Right elbow",
            Keypoint::RightShoulder => "Right shoulder",
            Keypoint::LeftShoulder => "Left shoulder",
            Keypoint::LeftElbow => "Left elbow",
            Keypoint::LeftWrist => "Left wrist",
            Keypoint::HeadTop => "Head top",
        }
    }

    pub fn from_name(name: &str) -> Option<Keypoint> {
        Keypoint::ALL.into_iter().find(|k| k.name() == name)
    }

    /// The same joint on the other body side.
    pub fn mirror(self) -> Keypoint {
        match self {
            Keypoint::RightAnkle => Keypoint::LeftAnkle,
            Keypoint::RightKnee => Keypoint::LeftKnee,
            Keypoint::RightHip => Keypoint::LeftHip,
            Keypoint::LeftHip => Keypoint::RightHip,
            Keypoint::LeftKnee => Keypoint::RightKnee,
            Keypoint::LeftAnkle => Keypoint::RightAnkle,
            Keypoint::RightWrist => Keypoint::LeftWrist,
            Keypoint::RightElbow => Keypoint::LeftElbow,
            Keypoint::RightShoulder => Keypoint::LeftShoulder,
            Keypoint::LeftShoulder => Keypoint::RightShoulder,
            Keypoint::LeftElbow => Keypoint::RightElbow,
            Keypoint::LeftWrist => Keypoint::RightWrist,
            Keypoint::HeadTop => Keypoint::HeadTop,
        }
    }
}

impl std::fmt::Display for Keypoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Keypoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Keypoint::from_name(s).ok_or_else(|| Error::Parse(format!("unknown keypoint {s:?}")))
    }
}

pub fn node_name(node: usize) -> &'static str {
    match node {
        PELVIS => "pelvis",
        NECK => "neck",
        _ => Keypoint::ALL[node].name(),
    }
}

fn mirror_node(node: usize) -> usize {
    match node {
        PELVIS | NECK => node,
        _ => Keypoint::ALL[node].mirror().index(),
    }
}

/// Named shape components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeComponent {
    Height = 0,
    LegLength = 1,
    ArmLength = 2,
    ShoulderWidth = 3,
    HipWidth = 4,
    TorsoLength = 5,
}

pub const BETA_NAMES: [&str; NUM_BETAS] = [
    "height",
    "leg_length",
    "arm_length",
    "shoulder_width",
    "hip_width",
    "torso_length",
];

/// Rotational degrees of freedom below the root.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Articulation {
    Spine = 0,
    Neck = 1,
    RightHip = 2,
    LeftHip = 3,
    RightKnee = 4,
    LeftKnee = 5,
    RightShoulder = 6,
    LeftShoulder = 7,
    RightElbow = 8,
    LeftElbow = 9,
}

pub const ARTICULATION_NAMES: [&str; NUM_ARTICULATIONS] = [
    "spine",
    "neck",
    "right_hip",
    "left_hip",
    "right_knee",
    "left_knee",
    "right_shoulder",
    "left_shoulder",
    "right_elbow",
    "left_elbow",
];

const ARTICULATION_MIRROR: [usize; NUM_ARTICULATIONS] = [0, 1, 3, 2, 5, 4, 7, 6, 9, 8];

/// Rotation frames: the root frame and one per articulation.
const GLOBAL_FRAME: usize = NUM_ARTICULATIONS;

/// Parent frame of each articulation frame.
const FRAME_PARENT: [usize; NUM_ARTICULATIONS] = [
    GLOBAL_FRAME, // spine
    0,            // neck hangs off the spine
    GLOBAL_FRAME, // right hip
    GLOBAL_FRAME, // left hip
    2,            // right knee
    3,            // left knee
    0,            // right shoulder
    0,            // left shoulder
    6,            // right elbow
    7,            // left elbow
];

/// Node where each articulation pivots.
const FRAME_PIVOT: [usize; NUM_ARTICULATIONS] = [
    PELVIS,
    NECK,
    Keypoint::RightHip as usize,
    Keypoint::LeftHip as usize,
    Keypoint::RightKnee as usize,
    Keypoint::LeftKnee as usize,
    Keypoint::RightShoulder as usize,
    Keypoint::LeftShoulder as usize,
    Keypoint::RightElbow as usize,
    Keypoint::LeftElbow as usize,
];

struct Bone {
    node: usize,
    parent: usize,
    /// Frame whose world rotation orients this bone.
    frame: usize,
    template: [f64; 3],
    group: Option<ShapeComponent>,
}

const SIN25: f64 = 0.422_618_261_740_699_4;
const COS25: f64 = 0.906_307_787_036_649_9;

/// Bones in topological order (parents first).
const BONES: [Bone; NUM_NODES - 1] = [
    Bone {
        node: Keypoint::RightHip as usize,
        parent: PELVIS,
        frame: GLOBAL_FRAME,
        template: [-9.5, 0.0, 0.0],
        group: Some(ShapeComponent::HipWidth),
    },
    Bone {
        node: Keypoint::LeftHip as usize,
        parent: PELVIS,
        frame: GLOBAL_FRAME,
        template: [9.5, 0.0, 0.0],
        group: Some(ShapeComponent::HipWidth),
    },
    Bone {
        node: NECK,
        parent: PELVIS,
        frame: Articulation::Spine as usize,
        template: [0.0, -54.0, 0.0],
        group: Some(ShapeComponent::TorsoLength),
    },
    Bone {
        node: Keypoint::HeadTop as usize,
        parent: NECK,
        frame: Articulation::Neck as usize,
        template: [0.0, -28.0, 0.0],
        group: None,
    },
    Bone {
        node: Keypoint::RightShoulder as usize,
        parent: NECK,
        frame: Articulation::Spine as usize,
        template: [-18.0, 0.0, 0.0],
        group: Some(ShapeComponent::ShoulderWidth),
    },
    Bone {
        node: Keypoint::LeftShoulder as usize,
        parent: NECK,
        frame: Articulation::Spine as usize,
        template: [18.0, 0.0, 0.0],
        group: Some(ShapeComponent::ShoulderWidth),
    },
    Bone {
        node: Keypoint::RightKnee as usize,
        parent: Keypoint::RightHip as usize,
        frame: Articulation::RightHip as usize,
        template: [0.0, 41.0, 0.0],
        group: Some(ShapeComponent::LegLength),
    },
    Bone {
        node: Keypoint::LeftKnee as usize,
        parent: Keypoint::LeftHip as usize,
        frame: Articulation::LeftHip as usize,
        template: [0.0, 41.0, 0.0],
        group: Some(ShapeComponent::LegLength),
    },
    Bone {
        node: Keypoint::RightAnkle as usize,
        parent: Keypoint::RightKnee as usize,
        frame: Articulation::RightKnee as usize,
        template: [0.0, 39.0, 0.0],
        group: Some(ShapeComponent::LegLength),
    },
    Bone {
        node: Keypoint::LeftAnkle as usize,
        parent: Keypoint::LeftKnee as usize,
        frame: Articulation::LeftKnee as usize,
        template: [0.0, 39.0, 0.0],
        group: Some(ShapeComponent::LegLength),
    },
    Bone {
        node: Keypoint::RightElbow as usize,
        parent: Keypoint::RightShoulder as usize,
        frame: Articulation::RightShoulder as usize,
        template: [-30.0 * SIN25, 30.0 * COS25, 0.0],
        group: Some(ShapeComponent::ArmLength),
    },
    Bone {
        node: Keypoint::LeftElbow as usize,
        parent: Keypoint::LeftShoulder as usize,
        frame: Articulation::LeftShoulder as usize,
        template: [30.0 * SIN25, 30.0 * COS25, 0.0],
        group: Some(ShapeComponent::ArmLength),
    },
    Bone {
        node: Keypoint::RightWrist as usize,
        parent: Keypoint::RightElbow as usize,
        frame: Articulation::RightElbow as usize,
        template: [-25.0 * SIN25, 25.0 * COS25, 0.0],
        group: Some(ShapeComponent::ArmLength),
    },
    Bone {
        node: Keypoint::LeftWrist as usize,
        parent: Keypoint::LeftElbow as usize,
        frame: Articulation::LeftElbow as usize,
        template: [25.0 * SIN25, 25.0 * COS25, 0.0],
        group: Some(ShapeComponent::ArmLength),
    },
];

/// Limb segments drawn by the renderer and checked for rigidity: (from, to).
pub const LIMBS: [(usize, usize); 14] = [
    (PELVIS, Keypoint::RightHip as usize),
    (PELVIS, Keypoint::LeftHip as usize),
    (PELVIS, NECK),
    (NECK, Keypoint::HeadTop as usize),
    (NECK, Keypoint::RightShoulder as usize),
    (NECK, Keypoint::LeftShoulder as usize),
    (Keypoint::RightHip as usize, Keypoint::RightKnee as usize),
    (Keypoint::LeftHip as usize, Keypoint::LeftKnee as usize),
    (Keypoint::RightKnee as usize, Keypoint::RightAnkle as usize),
    (Keypoint::LeftKnee as usize, Keypoint::LeftAnkle as usize),
    (Keypoint::RightShoulder as usize, Keypoint::RightElbow as usize),
    (Keypoint::LeftShoulder as usize, Keypoint::LeftElbow as usize),
    (Keypoint::RightElbow as usize, Keypoint::RightWrist as usize),
    (Keypoint::LeftElbow as usize, Keypoint::LeftWrist as usize),
];

/// Knee hinge (x-axis component) limits; positive bends the shin backward.
pub const KNEE_HINGE: (f64, f64) = (-0.1, 2.6);
/// Elbow hinge (x-axis component) limits; negative bends the forearm forward.
pub const ELBOW_HINGE: (f64, f64) = (-2.6, 0.1);

/// Hinge limits per articulation, on the x component of its axis-angle.
pub fn hinge_limits(articulation: usize) -> Option<(f64, f64)> {
    match articulation {
        4 | 5 => Some(KNEE_HINGE),
        8 | 9 => Some(ELBOW_HINGE),
        _ => None,
    }
}

/// Typical range of motion per articulation: `(lo, hi)` for each axis-angle
/// component. In-plane (z) motion is wide; components that tilt bones
/// toward or away from a frontal camera are narrow. The left side mirrors
/// the right (y and z negated).
pub const MOTION_RANGE: [[(f64, f64); 3]; NUM_ARTICULATIONS] = [
    [(-0.03, 0.03), (-0.03, 0.03), (-0.12, 0.12)], // spine
    [(-0.03, 0.03), (-0.03, 0.03), (-0.15, 0.15)], // neck
    [(-0.04, 0.04), (-0.03, 0.03), (0.0, 0.3)],    // right hip
    [(-0.04, 0.04), (-0.03, 0.03), (-0.3, 0.0)],   // left hip
    [(0.0, 0.06), (0.0, 0.0), (0.0, 0.0)],         // right knee
    [(0.0, 0.06), (0.0, 0.0), (0.0, 0.0)],         // left knee
    [(-0.04, 0.04), (-0.03, 0.03), (-0.2, 0.9)],   // right shoulder
    [(-0.04, 0.04), (-0.03, 0.03), (-0.9, 0.2)],   // left shoulder
    [(-0.06, 0.0), (0.0, 0.0), (0.0, 0.0)],        // right elbow
    [(-0.06, 0.0), (0.0, 0.0), (0.0, 0.0)],        // left elbow
];

/// Global rotation range for generated subjects (near-frontal views).
pub const VIEW_RANGE: [(f64, f64); 3] = [(-0.05, 0.05), (-0.1, 0.1), (-0.05, 0.05)];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ShapeParams {
    pub beta: [f64; NUM_BETAS],
}

impl ShapeParams {
    pub fn new(beta: [f64; NUM_BETAS]) -> Result<Self> {
        let shape = ShapeParams { beta };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, &b) in BETA_NAMES.iter().zip(&self.beta) {
            if !b.is_finite() {
                return Err(Error::InvalidArgument(format!("beta {name} is not finite")));
            }
            if 1.0 + BETA_STEP * b <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "beta {name} = {b} collapses its limb group"
                )));
            }
        }
        let height = 1.0 + BETA_STEP * self.beta[0];
        for (name, &b) in BETA_NAMES.iter().zip(&self.beta).skip(1) {
            if height * (1.0 + BETA_STEP * b) <= 0.0 {
                return Err(Error::InvalidArgument(format!("limb length for {name} is not positive")));
            }
        }
        Ok(())
    }

    fn bone_scale(&self, group: Option<ShapeComponent>) -> f64 {
        let h = 1.0 + BETA_STEP * self.beta[0];
        match group {
            Some(g) => h * (1.0 + BETA_STEP * self.beta[g as usize]),
            None => h,
        }
    }

    /// `∂ bone_scale / ∂ β_k`.
    fn bone_scale_gradient(&self, group: Option<ShapeComponent>) -> [f64; NUM_BETAS] {
        let mut g = [0.0; NUM_BETAS];
        let h = 1.0 + BETA_STEP * self.beta[0];
        match group {
            Some(c) => {
                let s = 1.0 + BETA_STEP * self.beta[c as usize];
                g[0] = BETA_STEP * s;
                g[c as usize] = BETA_STEP * h;
            }
            None => g[0] = BETA_STEP,
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseParams {
    /// Axis-angle per articulation, indexed by [`Articulation`].
    pub theta: [[f64; 3]; NUM_ARTICULATIONS],
    pub global_rotation: [f64; 3],
    /// Pelvis position in camera coordinates (cm).
    pub global_translation: [f64; 3],
}

impl PoseParams {
    pub fn identity() -> Self {
        PoseParams::default()
    }

    /// True when every rotation is at most π and the hinges are within limits.
    pub fn is_valid(&self) -> bool {
        let norms_ok = self
            .theta
            .iter()
            .chain(std::iter::once(&self.global_rotation))
            .all(|v| {
                v.iter().all(|c| c.is_finite()) && Vector3::from(*v).norm() <= std::f64::consts::PI
            });
        let hinges_ok = (0..NUM_ARTICULATIONS).all(|a| match hinge_limits(a) {
            Some((lo, hi)) => (lo..=hi).contains(&self.theta[a][0]),
            None => true,
        });
        norms_ok && hinges_ok && self.global_translation.iter().all(|c| c.is_finite())
    }

    pub fn mirrored(&self) -> PoseParams {
        let flip = |v: [f64; 3]| [v[0], -v[1], -v[2]];
        let mut theta = [[0.0; 3]; NUM_ARTICULATIONS];
        for (a, slot) in theta.iter_mut().enumerate() {
            *slot = flip(self.theta[ARTICULATION_MIRROR[a]]);
        }
        let t = self.global_translation;
        PoseParams {
            theta,
            global_rotation: flip(self.global_rotation),
            global_translation: [-t[0], t[1], t[2]],
        }
    }
}

/// Shape plus pose: everything the fitter estimates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BodyParams {
    pub shape: ShapeParams,
    pub pose: PoseParams,
}

impl BodyParams {
    pub fn to_vector(&self) -> SVector<f64, NUM_PARAMS> {
        let mut v = SVector::<f64, NUM_PARAMS>::zeros();
        for k in 0..NUM_BETAS {
            v[k] = self.shape.beta[k];
        }
        for a in 0..NUM_ARTICULATIONS {
            for c in 0..3 {
                v[THETA_OFFSET + 3 * a + c] = self.pose.theta[a][c];
            }
        }
        for c in 0..3 {
            v[ROTATION_OFFSET + c] = self.pose.global_rotation[c];
            v[TRANSLATION_OFFSET + c] = self.pose.global_translation[c];
        }
        v
    }

    pub fn from_vector(v: &SVector<f64, NUM_PARAMS>) -> BodyParams {
        let mut p = BodyParams::default();
        for k in 0..NUM_BETAS {
            p.shape.beta[k] = v[k];
        }
        for a in 0..NUM_ARTICULATIONS {
            for c in 0..3 {
                p.pose.theta[a][c] = v[THETA_OFFSET + 3 * a + c];
            }
        }
        for c in 0..3 {
            p.pose.global_rotation[c] = v[ROTATION_OFFSET + c];
            p.pose.global_translation[c] = v[TRANSLATION_OFFSET + c];
        }
        p
    }

    /// Key-value text form: one `key = values` line per field, `#` comments.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# body parameters: lengths in cm, angles in rad (axis-angle)\n");
        for (name, b) in BETA_NAMES.iter().zip(&self.shape.beta) {
            let _ = writeln!(out, "beta.{name} = {b}");
        }
        for (name, v) in ARTICULATION_NAMES.iter().zip(&self.pose.theta) {
            let _ = writeln!(out, "theta.{name} = {} {} {}", v[0], v[1], v[2]);
        }
        let r = self.pose.global_rotation;
        let t = self.pose.global_translation;
        let _ = writeln!(out, "global_rotation = {} {} {}", r[0], r[1], r[2]);
        let _ = writeln!(out, "global_translation = {} {} {}", t[0], t[1], t[2]);
        out
    }

    pub fn from_text(text: &str) -> Result<BodyParams> {
        let mut p = BodyParams::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            let values: Vec<f64> = value
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
            let want = |n: usize| -> Result<()> {
                if values.len() == n {
                    Ok(())
                } else {
                    Err(Error::Parse(format!(
                        "line {}: {key} takes {n} value(s), got {}",
                        lineno + 1,
                        values.len()
                    )))
                }
            };
            if let Some(name) = key.strip_prefix("beta.") {
                let k = BETA_NAMES
                    .iter()
                    .position(|n| *n == name)
                    .ok_or_else(|| Error::Parse(format!("unknown shape component {name:?}")))?;
                want(1)?;
                p.shape.beta[k] = values[0];
            } else if let Some(name) = key.strip_prefix("theta.") {
                let a = ARTICULATION_NAMES
                    .iter()
                    .position(|n| *n == name)
                    .ok_or_else(|| Error::Parse(format!("unknown articulation {name:?}")))?;
                want(3)?;
                p.pose.theta[a] = [values[0], values[1], values[2]];
            } else if key == "global_rotation" {
                want(3)?;
                p.pose.global_rotation = [values[0], values[1], values[2]];
            } else if key == "global_translation" {
                want(3)?;
                p.pose.global_translation = [values[0], values[1], values[2]];
            } else {
                return Err(Error::Parse(format!("unknown key {key:?}")));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse(format!("duplicate key {key:?}")));
            }
        }
        p.shape.validate()?;
        Ok(p)
    }
}

/// Pinhole camera looking down `+z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub principal_point: [f64; 2],
    /// `[width, height]` in pixels.
    pub image_size: [usize; 2],
    /// Pelvis distance along the optical axis when the capture rig measures it.
    /// The fitter holds the depth fixed at this value when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub known_depth: Option<f64>,
}

impl Camera {
    pub fn new(focal: f64, principal_point: [f64; 2], image_size: [usize; 2]) -> Result<Camera> {
        let cam = Camera {
            focal,
            principal_point,
            image_size,
            known_depth: None,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Centred camera with the given focal length.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Camera> {
        Camera::new(focal, [width as f64 / 2.0, height as f64 / 2.0], [width, height])
    }

    pub fn validate(&self) -> Result<()> {
        let [w, h] = self.image_size;
        let [cx, cy] = self.principal_point;
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::InvalidArgument(format!("focal {} must be positive", self.focal)));
        }
        if !(cx >= 0.0 && cx <= w as f64 && cy >= 0.0 && cy <= h as f64) {
            return Err(Error::InvalidArgument(format!(
                "principal point ({cx}, {cy}) outside {w}x{h}"
            )));
        }
        if let Some(d) = self.known_depth {
            if !(d > NEAR_PLANE) {
                return Err(Error::InvalidArgument(format!("known depth {d} is not in front of the camera")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0
            && p[1] >= 0.0
            && p[0] <= (self.image_size[0] - 1) as f64
            && p[1] <= (self.image_size[1] - 1) as f64
    }

    /// Mirror about the vertical line through the image centre's principal axis.
    pub fn mirrored(&self) -> Camera {
        Camera {
            principal_point: [
                self.image_size[0] as f64 - 1.0 - self.principal_point[0],
                self.principal_point[1],
            ],
            ..*self
        }
    }

    pub fn project_point(&self, p: &Vector3<f64>) -> Option<[f64; 2]> {
        if !(p.z > NEAR_PLANE) {
            return None;
        }
        Some([
            self.focal * p.x / p.z + self.principal_point[0],
            self.focal * p.y / p.z + self.principal_point[1],
        ])
    }

    /// `∂(u, v) / ∂(x, y, z)` at `p`.
    pub fn projection_jacobian(&self, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let f = self.focal;
        Matrix2x3::new(
            f * iz,
            0.0,
            -f * p.x * iz * iz,
            0.0,
            f * iz,
            -f * p.y * iz * iz,
        )
    }
}

/// All skeleton nodes in 3D; the first [`NUM_KEYPOINTS`] are the observable ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Joints3D {
    pub points: [Vector3<f64>; NUM_NODES],
}

impl Joints3D {
    pub fn observable(&self) -> &[Vector3<f64>] {
        &self.points[..NUM_KEYPOINTS]
    }

    pub fn get(&self, k: Keypoint) -> Vector3<f64> {
        self.points[k.index()]
    }

    pub fn mirrored(&self) -> Joints3D {
        let mut points = [Vector3::zeros(); NUM_NODES];
        for (n, slot) in points.iter_mut().enumerate() {
            let p = self.points[mirror_node(n)];
            *slot = Vector3::new(-p.x, p.y, p.z);
        }
        Joints3D { points }
    }
}

/// Projected observable keypoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joints2D {
    pub points: [[f64; 2]; NUM_KEYPOINTS],
    /// Whether each point lands inside the image.
    pub in_bounds: [bool; NUM_KEYPOINTS],
}

impl Joints2D {
    pub fn all_in_bounds(&self) -> bool {
        self.in_bounds.iter().all(|&b| b)
    }
}

pub fn rest_joints(shape: &ShapeParams) -> Joints3D {
    let mut points = [Vector3::zeros(); NUM_NODES];
    for bone in &BONES {
        points[bone.node] = points[bone.parent] + Vector3::from(bone.template) * shape.bone_scale(bone.group);
    }
    Joints3D { points }
}

/// `∂ rest_joints / ∂ β`: per node, one column per shape component.
pub fn rest_joints_jacobian(shape: &ShapeParams) -> [SMatrix<f64, 3, NUM_BETAS>; NUM_NODES] {
    let mut jac = [SMatrix::<f64, 3, NUM_BETAS>::zeros(); NUM_NODES];
    for bone in &BONES {
        let grad = shape.bone_scale_gradient(bone.group);
        let mut j = jac[bone.parent];
        let t = Vector3::from(bone.template);
        for (k, g) in grad.iter().enumerate() {
            let col = j.column(k) + t * *g;
            j.set_column(k, &col);
        }
        jac[bone.node] = j;
    }
    jac
}

fn rotation(v: &[f64; 3]) -> Matrix3<f64> {
    Rotation3::from_scaled_axis(Vector3::from(*v)).into_inner()
}

/// Left-trivialized derivative generators of the axis-angle map:
/// `∂R/∂v_k = [s_k]× R`.
fn rotation_generators(v: &[f64; 3], r: &Matrix3<f64>) -> [Vector3<f64>; 3] {
    let v = Vector3::from(*v);
    let n2 = v.norm_squared();
    let mut out = [Vector3::x(), Vector3::y(), Vector3::z()];
    if n2 < 1e-16 {
        return out;
    }
    let i_minus_r = Matrix3::identity() - r;
    for (k, slot) in out.iter_mut().enumerate() {
        let ek = Vector3::ith(k, 1.0);
        *slot = (v * v[k] + v.cross(&(i_minus_r * ek))) / n2;
    }
    out
}

struct Frames {
    world: [Matrix3<f64>; NUM_ARTICULATIONS + 1],
    local: [Matrix3<f64>; NUM_ARTICULATIONS + 1],
}

fn frames(pose: &PoseParams) -> Frames {
    let mut world = [Matrix3::identity(); NUM_ARTICULATIONS + 1];
    let mut local = [Matrix3::identity(); NUM_ARTICULATIONS + 1];
    local[GLOBAL_FRAME] = rotation(&pose.global_rotation);
    world[GLOBAL_FRAME] = local[GLOBAL_FRAME];
    // FRAME_PARENT lists parents before children
    for a in 0..NUM_ARTICULATIONS {
        local[a] = rotation(&pose.theta[a]);
        world[a] = world[FRAME_PARENT[a]] * local[a];
    }
    Frames { world, local }
}

fn frame_is_ancestor_or_self(ancestor: usize, mut frame: usize) -> bool {
    loop {
        if frame == ancestor {
            return true;
        }
        if frame == GLOBAL_FRAME {
            return false;
        }
        frame = FRAME_PARENT[frame];
    }
}

fn bone_frame(node: usize) -> Option<usize> {
    BONES.iter().find(|b| b.node == node).map(|b| b.frame)
}

/// Forward kinematics: joints in camera coordinates.
pub fn pose_joints(shape: &ShapeParams, pose: &PoseParams) -> Joints3D {
    let fr = frames(pose);
    let mut points = [Vector3::zeros(); NUM_NODES];
    points[PELVIS] = Vector3::from(pose.global_translation);
    for bone in &BONES {
        points[bone.node] = points[bone.parent]
            + fr.world[bone.frame] * (Vector3::from(bone.template) * shape.bone_scale(bone.group));
    }
    Joints3D { points }
}

/// Per node, `∂ position / ∂ params` in the [`BodyParams::to_vector`] layout.
pub type PoseJacobian = [SMatrix<f64, 3, NUM_PARAMS>; NUM_NODES];

pub fn pose_joints_with_jacobian(params: &BodyParams) -> (Joints3D, Box<PoseJacobian>) {
    let shape = &params.shape;
    let pose = &params.pose;
    let fr = frames(pose);
    let joints = pose_joints(shape, pose);
    let mut jac: Box<PoseJacobian> = Box::new([SMatrix::zeros(); NUM_NODES]);

    // shape: each bone contributes R_frame · template · ∂scale/∂β
    for bone in &BONES {
        let grad = shape.bone_scale_gradient(bone.group);
        let dir = fr.world[bone.frame] * Vector3::from(bone.template);
        let mut j = jac[bone.parent];
        for (k, g) in grad.iter().enumerate() {
            if *g != 0.0 {
                let col = j.fixed_view::<3, 1>(0, k) + dir * *g;
                j.fixed_view_mut::<3, 1>(0, k).copy_from(&col);
            }
        }
        jac[bone.node].fixed_view_mut::<3, NUM_BETAS>(0, 0).copy_from(&j.fixed_view::<3, NUM_BETAS>(0, 0));
    }

    // articulations: ∂p/∂v_k = R_parent (s_k × R_parentᵀ (p − pivot))
    for a in 0..NUM_ARTICULATIONS {
        let gens = rotation_generators(&pose.theta[a], &fr.local[a]);
        let parent = fr.world[FRAME_PARENT[a]];
        let pivot = joints.points[FRAME_PIVOT[a]];
        for node in 0..NUM_NODES {
            let Some(f) = bone_frame(node) else { continue };
            if !frame_is_ancestor_or_self(a, f) {
                continue;
            }
            let local = parent.transpose() * (joints.points[node] - pivot);
            for (k, s) in gens.iter().enumerate() {
                let d = parent * s.cross(&local);
                jac[node].fixed_view_mut::<3, 1>(0, THETA_OFFSET + 3 * a + k).copy_from(&d);
            }
        }
    }

    // global rotation about the pelvis, and translation
    let gens = rotation_generators(&pose.global_rotation, &fr.local[GLOBAL_FRAME]);
    let root = joints.points[PELVIS];
    for node in 0..NUM_NODES {
        let rel = joints.points[node] - root;
        for (k, s) in gens.iter().enumerate() {
            let d = s.cross(&rel);
            jac[node].fixed_view_mut::<3, 1>(0, ROTATION_OFFSET + k).copy_from(&d);
        }
        jac[node].fixed_view_mut::<3, 3>(0, TRANSLATION_OFFSET).copy_from(&Matrix3::identity());
    }
    (joints, jac)
}

pub fn project(camera: &Camera, joints: &Joints3D) -> Result<Joints2D> {
    let mut points = [[0.0; 2]; NUM_KEYPOINTS];
    let mut in_bounds = [false; NUM_KEYPOINTS];
    for (i, p) in joints.observable().iter().enumerate() {
        let uv = camera.project_point(p).ok_or(Error::DegenerateView {
            joint: node_name(i),
            depth: p.z,
        })?;
        points[i] = uv;
        in_bounds[i] = camera.contains(uv);
    }
    Ok(Joints2D { points, in_bounds })
}

/// Rest-pose bone lengths keyed by [`LIMBS`].
pub fn limb_lengths(joints: &Joints3D) -> [f64; LIMBS.len()] {
    let mut out = [0.0; LIMBS.len()];
    for (slot, &(a, b)) in out.iter_mut().zip(&LIMBS) {
        *slot = (joints.points[a] - joints.points[b]).norm();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_shape(rng: &mut impl Rng) -> ShapeParams {
        ShapeParams {
            beta: std::array::from_fn(|_| rng.gen_range(-3.0..3.0)),
        }
    }

    fn random_pose(rng: &mut impl Rng) -> PoseParams {
        let mut pose = PoseParams::identity();
        for v in pose.theta.iter_mut() {
            *v = std::array::from_fn(|_| rng.gen_range(-0.8..0.8));
        }
        pose.global_rotation = std::array::from_fn(|_| rng.gen_range(-1.5..1.5));
        pose.global_translation = [rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0), rng.gen_range(250.0..400.0)];
        pose
    }

    #[test]
    fn keypoint_names_round_trip() {
        for k in Keypoint::ALL {
            assert_eq!(Keypoint::from_name(k.name()), Some(k));
            assert_eq!(k.mirror().mirror(), k);
            assert_eq!(Keypoint::from_index(k.index()), Some(k));
        }
        assert_eq!(Keypoint::ALL[0].name(), "right_ankle");
        assert_eq!(Keypoint::ALL[12].name(), "head_top");
        assert!("left_toe".parse::<Keypoint>().is_err());
    }

    #[test]
    fn template_is_170_cm_tall() {
        let j = rest_joints(&ShapeParams::default());
        assert_eq!(j.points[PELVIS], Vector3::zeros());
        let head = j.get(Keypoint::HeadTop);
        assert!((TEMPLATE_GROUND_Y - head.y - TEMPLATE_HEIGHT).abs() < 1e-12);
        // feet stand 8 cm above the ground plane (ankle height)
        assert!((TEMPLATE_GROUND_Y - j.get(Keypoint::LeftAnkle).y - 8.0).abs() < 1e-12);
    }

    #[test]
    fn height_component_scales_about_pelvis() {
        let template = rest_joints(&ShapeParams::default());
        for b in [0.7, 1.4, -2.0] {
            let mut shape = ShapeParams::default();
            shape.beta[ShapeComponent::Height as usize] = b;
            let j = rest_joints(&shape);
            let s = 1.0 + BETA_STEP * b;
            for n in 0..NUM_NODES {
                assert!((j.points[n] - template.points[n] * s).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn rest_jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let shape = random_shape(&mut rng);
            let jac = rest_joints_jacobian(&shape);
            let h = 1e-6;
            for k in 0..NUM_BETAS {
                let mut plus = shape;
                let mut minus = shape;
                plus.beta[k] += h;
                minus.beta[k] -= h;
                let jp = rest_joints(&plus);
                let jm = rest_joints(&minus);
                for n in 0..NUM_NODES {
                    let fd = (jp.points[n] - jm.points[n]) / (2.0 * h);
                    let an = jac[n].column(k).into_owned();
                    let scale = fd.norm().max(an.norm()).max(1e-3);
                    assert!((fd - an).norm() / scale <= 1e-5, "node {n} beta {k}");
                }
            }
        }
    }

    #[test]
    fn identity_pose_is_rest_plus_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = random_shape(&mut rng);
        let rest = rest_joints(&shape);
        assert_eq!(pose_joints(&shape, &PoseParams::identity()), rest);
        let mut pose = PoseParams::identity();
        pose.global_translation = [3.0, -4.0, 300.0];
        let posed = pose_joints(&shape, &pose);
        for n in 0..NUM_NODES {
            assert!((posed.points[n] - rest.points[n] - Vector3::new(3.0, -4.0, 300.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn global_rotation_is_rigid_and_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let shape = random_shape(&mut rng);
            let mut pose = random_pose(&mut rng);
            pose.global_translation = [0.0; 3];
            let base = pose_joints(&shape, &pose);
            let extra: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let extra_r = rotation(&extra);
            let composed = Rotation3::from_matrix_unchecked(extra_r * rotation(&pose.global_rotation));
            let mut rotated = pose;
            rotated.global_rotation = composed.scaled_axis().into();
            let out = pose_joints(&shape, &rotated);
            for a in 0..NUM_NODES {
                assert!((out.points[a] - extra_r * base.points[a]).norm() < 1e-9);
                for b in 0..NUM_NODES {
                    let d0 = (base.points[a] - base.points[b]).norm();
                    let d1 = (out.points[a] - out.points[b]).norm();
                    assert!((d0 - d1).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn bone_lengths_survive_posing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let shape = random_shape(&mut rng);
            let pose = random_pose(&mut rng);
            let rest = limb_lengths(&rest_joints(&shape));
            let posed = limb_lengths(&pose_joints(&shape, &pose));
            for (r, p) in rest.iter().zip(&posed) {
                assert!((r - p).abs() / r <= 1e-9);
            }
        }
    }

    #[test]
    fn mirrored_inputs_give_mirrored_joints() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut shape = random_shape(&mut rng);
            shape.beta.iter_mut().for_each(|b| *b = b.clamp(-2.5, 2.5));
            let pose = random_pose(&mut rng);
            let j = pose_joints(&shape, &pose);
            let m = pose_joints(&shape, &pose.mirrored());
            let expected = j.mirrored();
            for n in 0..NUM_NODES {
                assert!((m.points[n] - expected.points[n]).norm() < 1e-9, "node {}", node_name(n));
            }
        }
    }

    #[test]
    fn pose_jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..30 {
            let mut params = BodyParams {
                shape: random_shape(&mut rng),
                pose: random_pose(&mut rng),
            };
            if trial == 0 {
                // exercise the small-angle branch of the generators
                params.pose = PoseParams::identity();
                params.pose.global_translation = [0.0, 0.0, 300.0];
            }
            let (_, jac) = pose_joints_with_jacobian(&params);
            let x0 = params.to_vector();
            let h = 1e-6;
            for k in 0..NUM_PARAMS {
                let mut xp = x0;
                let mut xm = x0;
                xp[k] += h;
                xm[k] -= h;
                let pp = BodyParams::from_vector(&xp);
                let pm = BodyParams::from_vector(&xm);
                let jp = pose_joints(&pp.shape, &pp.pose);
                let jm = pose_joints(&pm.shape, &pm.pose);
                for n in 0..NUM_NODES {
                    let fd = (jp.points[n] - jm.points[n]) / (2.0 * h);
                    let an = jac[n].column(k).into_owned();
                    let scale = fd.norm().max(an.norm()).max(1e-2);
                    assert!(
                        (fd - an).norm() / scale <= 1e-5,
                        "trial {trial} node {} param {k}: fd {fd:?} analytic {an:?}",
                        node_name(n)
                    );
                }
            }
        }
    }

    #[test]
    fn projection_examples() {
        let cam = Camera::centered(64.0, 64, 64).unwrap();
        for z in [20.0, 150.0, 900.0] {
            assert_eq!(cam.project_point(&Vector3::new(0.0, 0.0, z)), Some([32.0, 32.0]));
        }
        let near = cam.project_point(&Vector3::new(10.0, -6.0, 200.0)).unwrap();
        let far = cam.project_point(&Vector3::new(10.0, -6.0, 400.0)).unwrap();
        assert!(((far[0] - 32.0) * 2.0 - (near[0] - 32.0)).abs() < 1e-12);
        assert!(((far[1] - 32.0) * 2.0 - (near[1] - 32.0)).abs() < 1e-12);
        assert!(cam.project_point(&Vector3::new(0.0, 0.0, 5.0)).is_none());

        let mut joints = rest_joints(&ShapeParams::default());
        joints.points.iter_mut().for_each(|p| p.z = 300.0);
        assert!(project(&cam, &joints).is_ok());
        joints.points[3].z = -50.0;
        assert!(matches!(project(&cam, &joints), Err(Error::DegenerateView { joint: "left_hip", .. })));
    }

    #[test]
    fn projection_jacobian_matches_central_differences() {
        let cam = Camera::new(70.0, [31.0, 33.5], [64, 64]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let p = Vector3::new(rng.gen_range(-80.0..80.0), rng.gen_range(-90.0..90.0), rng.gen_range(50.0..500.0));
            let jac = cam.projection_jacobian(&p);
            for k in 0..3 {
                let h = 1e-5;
                let mut pp = p;
                let mut pm = p;
                pp[k] += h;
                pm[k] -= h;
                let a = cam.project_point(&pp).unwrap();
                let b = cam.project_point(&pm).unwrap();
                for r in 0..2 {
                    let fd = (a[r] - b[r]) / (2.0 * h);
                    let an = jac[(r, k)];
                    assert!((fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-3));
                }
            }
        }
    }

    #[test]
    fn camera_validation() {
        assert!(Camera::new(0.0, [32.0, 32.0], [64, 64]).is_err());
        assert!(Camera::new(50.0, [70.0, 32.0], [64, 64]).is_err());
        let mut cam = Camera::centered(50.0, 64, 64).unwrap();
        cam.known_depth = Some(-3.0);
        assert!(cam.validate().is_err());
    }

    #[test]
    fn shape_validation() {
        assert!(ShapeParams::new([0.0, -10.0, 0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(ShapeParams::new([f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(ShapeParams::new([3.0, -3.0, 3.0, -3.0, 3.0, -3.0]).is_ok());
    }

    #[test]
    fn pose_validity_flags_hinges() {
        let mut pose = PoseParams::identity();
        assert!(pose.is_valid());
        pose.theta[Articulation::LeftKnee as usize][0] = 1.0;
        pose.theta[Articulation::RightElbow as usize][0] = -1.0;
        assert!(pose.is_valid());
        pose.theta[Articulation::LeftKnee as usize][0] = -0.5;
        assert!(!pose.is_valid());
        pose.theta[Articulation::LeftKnee as usize] = [0.0, 0.0, 3.5];
        assert!(!pose.is_valid());
    }

    #[test]
    fn text_format_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = BodyParams {
            shape: random_shape(&mut rng),
            pose: random_pose(&mut rng),
        };
        let text = params.to_text();
        assert!(text.contains("beta.hip_width = "));
        assert!(text.contains("theta.left_elbow = "));
        assert_eq!(BodyParams::from_text(&text).unwrap(), params);
        assert!(BodyParams::from_text("beta.wingspan = 1").is_err());
        assert!(BodyParams::from_text("theta.spine = 1 2").is_err());
        assert!(BodyParams::from_text("beta.height = 1\nbeta.height = 2").is_err());
        // omitted keys default to zero
        let partial = BodyParams::from_text("global_translation = 0 0 300\n").unwrap();
        assert_eq!(partial.pose.global_translation, [0.0, 0.0, 300.0]);
    }
}
