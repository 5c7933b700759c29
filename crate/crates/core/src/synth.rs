//! Synthetic subjects and a stick-figure renderer: the stand-in for a
//! motion-capture dataset with ground-truth shape.
//!
//! Limb intensities (background noise sits in `[0.10, 0.20]`). Contrast is
//! deliberately low so that small pixel budgets can move the detector:
//!
//! | segment            | intensity | radius (cm) |
//! |--------------------|-----------|-------------|
//! | torso              | 0.254     | 11          |
//! | hip bar            | 0.246     | 6           |
//! | shoulder bar       | 0.251     | 5           |
//! | head               | 0.310     | 9           |
//! | right thigh / shin | 0.228 / 0.239 | 6.5 / 5 |
//! | left thigh / shin  | 0.282 / 0.293 | 6.5 / 5 |
//! | right upper / fore arm | 0.218 / 0.211 | 4.5 / 4 |
//! | left upper / fore arm  | 0.270 / 0.262 | 4.5 / 4 |

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bodymodel::{
    pose_joints, project, BodyParams, Camera, Joints3D, Keypoint, PoseParams, ShapeParams, LIMBS,
    MOTION_RANGE, NUM_BETAS, VIEW_RANGE, NUM_KEYPOINTS,
};
use crate::detector::KeypointSet;
use crate::error::{Error, Result};
use crate::imaging::{load_image, Image, MIN_SIDE};

/// Rejection-sampling budget before a configuration is declared infeasible.
pub const MAX_ATTEMPTS: usize = 1000;
/// Keypoints must land at least this many pixels inside the border.
pub const BORDER_MARGIN: f64 = 3.0;
/// Default square image side.
pub const DEFAULT_SIZE: usize = 64;

const BACKGROUND_BASE: f64 = 0.15;
const BACKGROUND_AMPLITUDE: f64 = 0.1;
const NOISE_CELL: f64 = 8.0;

/// Ground truth for one rendered image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub beta_gt: ShapeParams,
    pub pose_gt: PoseParams,
    pub camera: Camera,
    pub seed: u64,
}

impl Subject {
    pub fn params(&self) -> BodyParams {
        BodyParams {
            shape: self.beta_gt,
            pose: self.pose_gt,
        }
    }

    pub fn joints(&self) -> Joints3D {
        pose_joints(&self.beta_gt, &self.pose_gt)
    }

    /// Projected ground-truth keypoints, confidence 1.
    pub fn keypoints(&self) -> Result<KeypointSet> {
        let j2 = project(&self.camera, &self.joints())?;
        Ok(KeypointSet::certain(j2.points))
    }

    fn visible(&self) -> bool {
        let Ok(j2) = project(&self.camera, &self.joints()) else {
            return false;
        };
        let [w, h] = self.camera.image_size;
        j2.points.iter().all(|&[x, y]| {
            x >= BORDER_MARGIN
                && y >= BORDER_MARGIN
                && x <= w as f64 - 1.0 - BORDER_MARGIN
                && y <= h as f64 - 1.0 - BORDER_MARGIN
        })
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..=hi)
}

/// Shape coefficients, each uniform in `[-2, 2]`.
pub fn sample_shape(rng: &mut ChaCha8Rng) -> ShapeParams {
    ShapeParams {
        beta: std::array::from_fn(|_| uniform(rng, -2.0, 2.0)),
    }
}

/// Pose drawn uniformly from [`MOTION_RANGE`] and [`VIEW_RANGE`].
fn sample_pose(rng: &mut ChaCha8Rng, depth: f64) -> PoseParams {
    let theta = MOTION_RANGE.map(|axes| axes.map(|(lo, hi)| if lo < hi { uniform(rng, lo, hi) } else { lo }));
    PoseParams {
        theta,
        global_rotation: VIEW_RANGE.map(|(lo, hi)| uniform(rng, lo, hi)),
        global_translation: [uniform(rng, -12.0, 12.0), uniform(rng, -8.0, 8.0), depth],
    }
}

fn camera_for(size: [usize; 2], depth: f64) -> Result<Camera> {
    let mut camera = Camera::centered(1.1 * size[1] as f64, size[0], size[1])?;
    camera.known_depth = Some(depth);
    Ok(camera)
}

fn check_size(size: [usize; 2]) -> Result<()> {
    if size[0] < MIN_SIDE || size[1] < MIN_SIDE {
        return Err(Error::TooSmall {
            width: size[0],
            height: size[1],
            min: MIN_SIDE,
        });
    }
    Ok(())
}

/// Draws a subject whose keypoints all land inside the image.
pub fn sample_subject(seed: u64, size: [usize; 2]) -> Result<Subject> {
    check_size(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = sample_shape(&mut rng);
    sample_posed(&mut rng, seed, shape, size)
}

/// Draws a pose (and camera) for a given shape.
pub fn sample_subject_with_shape(seed: u64, shape: ShapeParams, size: [usize; 2]) -> Result<Subject> {
    check_size(size)?;
    shape.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_posed(&mut rng, seed, shape, size)
}

fn sample_posed(rng: &mut ChaCha8Rng, seed: u64, shape: ShapeParams, size: [usize; 2]) -> Result<Subject> {
    for attempt in 0..MAX_ATTEMPTS {
        // very tall shapes may not fit at the usual distance; back off
        let depth = if attempt < MAX_ATTEMPTS / 2 {
            uniform(rng, 235.0, 265.0)
        } else {
            uniform(rng, 265.0, 320.0)
        };
        let subject = Subject {
            beta_gt: shape,
            pose_gt: sample_pose(rng, depth),
            camera: camera_for(size, depth)?,
            seed,
        };
        if subject.pose_gt.is_valid() && subject.visible() {
            return Ok(subject);
        }
    }
    Err(Error::Infeasible(MAX_ATTEMPTS))
}

struct Segment {
    from: usize,
    to: usize,
    intensity: f64,
    radius_cm: f64,
}

fn segment_style(from: usize, to: usize) -> (f64, f64) {
    use crate::bodymodel::{NECK, PELVIS};
    let k = |kp: Keypoint| kp as usize;
    match (from, to) {
        (PELVIS, NECK) => (0.254, 11.0),
        (PELVIS, _) => (0.246, 6.0),
        (NECK, t) if t == k(Keypoint::HeadTop) => (0.310, 9.0),
        (NECK, _) => (0.251, 5.0),
        (f, _) if f == k(Keypoint::RightHip) => (0.228, 6.5),
        (f, _) if f == k(Keypoint::RightKnee) => (0.239, 5.0),
        (f, _) if f == k(Keypoint::LeftHip) => (0.282, 6.5),
        (f, _) if f == k(Keypoint::LeftKnee) => (0.293, 5.0),
        (f, _) if f == k(Keypoint::RightShoulder) => (0.218, 4.5),
        (f, _) if f == k(Keypoint::RightElbow) => (0.211, 4.0),
        (f, _) if f == k(Keypoint::LeftShoulder) => (0.270, 4.5),
        (f, _) if f == k(Keypoint::LeftElbow) => (0.262, 4.0),
        _ => (0.239, 5.0),
    }
}

fn segments() -> Vec<Segment> {
    LIMBS
        .iter()
        .map(|&(from, to)| {
            let (intensity, radius_cm) = segment_style(from, to);
            Segment {
                from,
                to,
                intensity,
                radius_cm,
            }
        })
        .collect()
}

/// Seeded value noise in `[0, 1]`: random lattice values, smoothstep-blended.
fn value_noise(seed: u64, width: usize, height: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b5e_55ed_ba5e);
    let gw = (width as f64 / NOISE_CELL).ceil() as usize + 2;
    let gh = (height as f64 / NOISE_CELL).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.gen::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let fy = y as f64 / NOISE_CELL;
        let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..width {
            let fx = x as f64 / NOISE_CELL;
            let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let v = |i: usize, j: usize| lattice[j * gw + i];
            let top = v(ix, iy) * (1.0 - tx) + v(ix + 1, iy) * tx;
            let bottom = v(ix, iy + 1) * (1.0 - tx) + v(ix + 1, iy + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn distance_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (qx * qx + qy * qy).sqrt()
}

/// Renders the subject over value noise; limbs are anti-aliased capsules
/// painted far to near.
pub fn render(subject: &Subject) -> Result<(Image, KeypointSet)> {
    let camera = &subject.camera;
    let [w, h] = camera.image_size;
    let joints = subject.joints();
    let noise = value_noise(subject.seed, w, h);
    let mut canvas: Vec<f64> = noise
        .iter()
        .map(|n| BACKGROUND_BASE + BACKGROUND_AMPLITUDE * (n - 0.5))
        .collect();

    let mut segs: Vec<(f64, [f64; 2], [f64; 2], f64, f64)> = Vec::new();
    for s in segments() {
        let (pa, pb): (Vector3<f64>, Vector3<f64>) = (joints.points[s.from], joints.points[s.to]);
        let (Some(a), Some(b)) = (camera.project_point(&pa), camera.project_point(&pb)) else {
            return Err(Error::DegenerateView {
                joint: crate::bodymodel::node_name(s.from),
                depth: pa.z.min(pb.z),
            });
        };
        let mid_z = 0.5 * (pa.z + pb.z);
        let radius_px = camera.focal * s.radius_cm / mid_z;
        segs.push((mid_z, a, b, radius_px, s.intensity));
    }
    // far first; stable sort keeps the table order on ties
    segs.sort_by(|x, y| y.0.total_cmp(&x.0));

    for &(_, a, b, r, intensity) in &segs {
        let x0 = (a[0].min(b[0]) - r - 1.0).floor().max(0.0) as usize;
        let x1 = ((a[0].max(b[0]) + r + 1.0).ceil().max(0.0) as usize).min(w - 1);
        let y0 = (a[1].min(b[1]) - r - 1.0).floor().max(0.0) as usize;
        let y1 = ((a[1].max(b[1]) + r + 1.0).ceil().max(0.0) as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = distance_to_segment([x as f64, y as f64], a, b);
                let coverage = (r + 0.5 - d).clamp(0.0, 1.0);
                if coverage > 0.0 {
                    let px = &mut canvas[y * w + x];
                    *px = *px * (1.0 - coverage) + intensity * coverage;
                }
            }
        }
    }
    let image = Image::new(w, h, canvas.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect())?;
    Ok((image, subject.keypoints()?))
}

/// Stable per-entry seed derived from the corpus seed and indices.
pub fn entry_seed(corpus_seed: u64, subject: u64, pose: u64) -> u64 {
    // splitmix64 finaliser over a packed key
    let mut z = corpus_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(subject.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(pose.wrapping_mul(0x94d0_49bb_1331_11eb))
        .wrapping_add(1);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Corpus layout: `subjects` shapes, each seen in `poses` poses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub subjects: usize,
    pub poses: usize,
    pub width: usize,
    pub height: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 42,
            subjects: 100,
            poses: 3,
            width: DEFAULT_SIZE,
            height: DEFAULT_SIZE,
        }
    }
}

/// One corpus entry: identifiers plus its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub subject_index: usize,
    pub pose_index: usize,
    pub subject: Subject,
}

impl CorpusEntry {
    pub fn id(&self) -> String {
        format!("s{:04}_p{}", self.subject_index, self.pose_index)
    }
}

/// Samples every entry of the corpus in memory (no images).
pub fn sample_corpus(spec: &CorpusSpec) -> Result<Vec<CorpusEntry>> {
    let size = [spec.width, spec.height];
    check_size(size)?;
    let mut out = Vec::with_capacity(spec.subjects * spec.poses);
    for s in 0..spec.subjects {
        let mut rng = ChaCha8Rng::seed_from_u64(entry_seed(spec.seed, s as u64, u64::MAX));
        let shape = sample_shape(&mut rng);
        for p in 0..spec.poses {
            let seed = entry_seed(spec.seed, s as u64, p as u64);
            out.push(CorpusEntry {
                subject_index: s,
                pose_index: p,
                subject: sample_subject_with_shape(seed, shape, size)?,
            });
        }
    }
    Ok(out)
}

/// Image storage format for corpus files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    #[default]
    Float,
    Pgm,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Float => "f32",
            ImageFormat::Pgm => "pgm",
        }
    }
}

/// One line of the corpus manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub subject_index: usize,
    pub pose_index: usize,
    pub seed: u64,
    pub beta: [f64; NUM_BETAS],
    pub pose: PoseParams,
    pub camera: Camera,
    /// Relative to the manifest's directory.
    pub image: String,
    pub keypoints: [[f64; 2]; NUM_KEYPOINTS],
}

impl ManifestRecord {
    pub fn subject(&self) -> Subject {
        Subject {
            beta_gt: ShapeParams { beta: self.beta },
            pose_gt: self.pose,
            camera: self.camera,
            seed: self.seed,
        }
    }
}

pub const MANIFEST_NAME: &str = "corpus.jsonl";

/// Renders the corpus into `dir` and writes `corpus.jsonl`; returns the manifest path.
pub fn write_corpus(spec: &CorpusSpec, dir: &Path, format: ImageFormat) -> Result<PathBuf> {
    let entries = sample_corpus(spec)?;
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let manifest = dir.join(MANIFEST_NAME);
    let mut out = Vec::new();
    for entry in &entries {
        let (image, kp) = render(&entry.subject)?;
        let rel = format!("images/{}.{}", entry.id(), format.extension());
        let path = dir.join(&rel);
        match format {
            ImageFormat::Float => image.save_float(&path)?,
            ImageFormat::Pgm => image.save_pgm(&path)?,
        }
        let record = ManifestRecord {
            id: entry.id(),
            subject_index: entry.subject_index,
            pose_index: entry.pose_index,
            seed: entry.subject.seed,
            beta: entry.subject.beta_gt.beta,
            pose: entry.subject.pose_gt,
            camera: entry.subject.camera,
            image: rel,
            keypoints: kp.locations(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    file.write_all(&out).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// A loaded corpus: records plus the directory images are relative to.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
    /// Hex digest of the manifest bytes.
    pub fingerprint: String,
}

impl Corpus {
    pub fn load(manifest: &Path) -> Result<Corpus> {
        let bytes = std::fs::read(manifest).map_err(|e| Error::io(manifest, e))?;
        let mut records = Vec::new();
        for (n, line) in bytes.lines().enumerate() {
            let line = line.map_err(|e| Error::io(manifest, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("{}:{}: {e}", manifest.display(), n + 1)))?;
            records.push(record);
        }
        Ok(Corpus {
            root: manifest.parent().unwrap_or(Path::new(".")).to_path_buf(),
            records,
            fingerprint: fingerprint(&bytes),
        })
    }

    pub fn image(&self, record: &ManifestRecord) -> Result<Image> {
        load_image(self.root.join(&record.image))
    }
}

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn fingerprint(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..8].iter().map(|b| format!("{b:02x}")).collect()
}
