//! Keypoint heatmap detector: forward pass, exact input gradient, NMS
//! keypoint extraction, checkpoint I/O and training.

mod network;
pub mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bodymodel::{Keypoint, NUM_KEYPOINTS};
use crate::error::{Error, Result};
use crate::imaging::Image;

pub use network::{ConvLayer, CHANNELS, KERNEL};
use network::{
    conv_backward_input, conv_backward_params, conv_forward, pad_into, sigmoid, softplus, Plane, WideLayer, PAD,
};

/// Peak value at or above which a keypoint counts as detected.
pub const DEFAULT_DETECTION_THRESHOLD: f64 = 0.3;

const CHECKPOINT_MAGIC: &[u8; 8] = b"SEVDET01";
const ARCHITECTURE: &str = "norm(0.2,10)/conv5x5-same/1-8-16-13/softplus,softplus,sigmoid";

/// Inputs enter the network as `(x - INPUT_OFFSET) * INPUT_GAIN`; padding
/// is zero after this shift.
pub const INPUT_OFFSET: f64 = 0.2;
pub const INPUT_GAIN: f64 = 10.0;

/// 64-bit digest of the architecture description stored in checkpoints.
pub fn architecture_hash() -> u64 {
    let digest = Sha256::digest(ARCHITECTURE.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Parameters of the fixed three-layer network plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorWeights {
    pub layers: [ConvLayer; 3],
    pub seed: u64,
    pub corpus_fingerprint: String,
}

impl DetectorWeights {
    /// All-zero parameters; every output map is then `sigmoid(0) = 0.5`.
    pub fn zeros() -> Self {
        DetectorWeights {
            layers: [
                ConvLayer::zeros(CHANNELS[0], CHANNELS[1]),
                ConvLayer::zeros(CHANNELS[1], CHANNELS[2]),
                ConvLayer::zeros(CHANNELS[2], CHANNELS[3]),
            ],
            seed: 0,
            corpus_fingerprint: String::new(),
        }
    }

    /// He-style random initialisation; the head bias starts low because
    /// target maps are mostly zero.
    pub fn initialize(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = DetectorWeights::zeros();
        weights.seed = seed;
        for layer in weights.layers.iter_mut() {
            let fan_in = (layer.in_channels * KERNEL * KERNEL) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
            for w in layer.weights.iter_mut() {
                *w = normal.sample(&mut rng) as f32;
            }
        }
        weights.layers[2].bias.fill(-4.0);
        weights
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub(crate) fn widened(&self) -> [WideLayer; 3] {
        [
            self.layers[0].widened(),
            self.layers[1].widened(),
            self.layers[2].widened(),
        ]
    }

    /// Little-endian checkpoint: magic, architecture hash, seed, corpus
    /// fingerprint, then per layer `in`, `out`, weights and biases as `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 4 * self.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&architecture_hash().to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.corpus_fingerprint.len() as u32).to_le_bytes());
        out.extend_from_slice(self.corpus_fingerprint.as_bytes());
        for layer in &self.layers {
            out.extend_from_slice(&(layer.in_channels as u32).to_le_bytes());
            out.extend_from_slice(&(layer.out_channels as u32).to_le_bytes());
            for v in layer.weights.iter().chain(&layer.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let hash = r.u64()?;
        if hash != architecture_hash() {
            return Err(Error::Checkpoint(format!("architecture hash {hash:#x} does not match")));
        }
        let seed = r.u64()?;
        let n = r.u32()? as usize;
        let corpus_fingerprint = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("fingerprint is not utf-8".into()))?;
        let mut weights = DetectorWeights::zeros();
        weights.seed = seed;
        weights.corpus_fingerprint = corpus_fingerprint;
        for layer in weights.layers.iter_mut() {
            let (i, o) = (r.u32()? as usize, r.u32()? as usize);
            if (i, o) != (layer.in_channels, layer.out_channels) {
                return Err(Error::Checkpoint(format!("layer shape {i}->{o} does not match")));
            }
            for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *v = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        if !weights.all_finite() {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        DetectorWeights::from_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// One confidence map per keypoint, canonical order, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapSet {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl HeatmapSet {
    pub fn zeros(width: usize, height: usize) -> Self {
        HeatmapSet {
            width,
            height,
            values: vec![0.0; NUM_KEYPOINTS * width * height],
        }
    }

    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != NUM_KEYPOINTS * width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {NUM_KEYPOINTS} maps of {width}x{height}",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("heatmap values must lie in [0, 1]".into()));
        }
        Ok(HeatmapSet { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn map(&self, i: usize) -> &[f64] {
        let a = self.width * self.height;
        &self.values[i * a..(i + 1) * a]
    }

    pub fn map_mut(&mut self, i: usize) -> &mut [f64] {
        let a = self.width * self.height;
        &mut self.values[i * a..(i + 1) * a]
    }

    /// Row-major first global maximum of map `i`: `(x, y, value)`.
    pub fn peak(&self, i: usize) -> (usize, usize, f64) {
        let map = self.map(i);
        let mut best = 0;
        for (k, &v) in map.iter().enumerate() {
            if v > map[best] {
                best = k;
            }
        }
        (best % self.width, best / self.width, map[best])
    }

    pub fn same_shape(&self, other: &HeatmapSet) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch(format!(
                "heatmaps {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Gaussian blobs of unit peak at each in-bounds location.
    pub fn gaussian_targets(width: usize, height: usize, locations: &[[f64; 2]; NUM_KEYPOINTS], sigma: f64) -> Self {
        let mut set = HeatmapSet::zeros(width, height);
        let inv = 1.0 / (2.0 * sigma * sigma);
        for (i, &[cx, cy]) in locations.iter().enumerate() {
            if !(cx >= 0.0 && cy >= 0.0 && cx <= (width - 1) as f64 && cy <= (height - 1) as f64) {
                continue;
            }
            let map = set.map_mut(i);
            for y in 0..height {
                let dy = y as f64 - cy;
                for x in 0..width {
                    let dx = x as f64 - cx;
                    map[y * width + x] = (-(dx * dx + dy * dy) * inv).exp();
                }
            }
        }
        set
    }
}

/// One extracted keypoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointDetection {
    /// `[x, y]` in pixels.
    pub location: [f64; 2],
    pub confidence: f64,
    pub detected: bool,
}

impl KeypointDetection {
    /// Data-term weight: the confidence when detected, otherwise zero.
    pub fn weight(&self) -> f64 {
        if self.detected {
            self.confidence
        } else {
            0.0
        }
    }
}

/// Detected (or ground-truth) 2D keypoints in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub points: [KeypointDetection; NUM_KEYPOINTS],
    pub threshold: f64,
}

impl KeypointSet {
    /// Ground-truth style set: every point detected with confidence 1.
    pub fn certain(locations: [[f64; 2]; NUM_KEYPOINTS]) -> Self {
        KeypointSet {
            points: locations.map(|location| KeypointDetection {
                location,
                confidence: 1.0,
                detected: true,
            }),
            threshold: DEFAULT_DETECTION_THRESHOLD,
        }
    }

    pub fn get(&self, k: Keypoint) -> &KeypointDetection {
        &self.points[k.index()]
    }

    pub fn locations(&self) -> [[f64; 2]; NUM_KEYPOINTS] {
        self.points.map(|p| p.location)
    }

    pub fn detected_count(&self) -> usize {
        self.points.iter().filter(|p| p.detected).count()
    }

    /// Marks keypoint `k` as missing: confidence 0, undetected, location kept.
    pub fn with_removed(&self, k: Keypoint) -> KeypointSet {
        let mut out = self.clone();
        out.points[k.index()].confidence = 0.0;
        out.points[k.index()].detected = false;
        out
    }

    /// Swaps the locations of two keypoints; confidences stay with their slot.
    pub fn with_swapped(&self, a: Keypoint, b: Keypoint) -> Result<KeypointSet> {
        if a == b {
            return Err(Error::InvalidArgument(format!("cannot swap {a} with itself")));
        }
        let mut out = self.clone();
        let (la, lb) = (self.points[a.index()].location, self.points[b.index()].location);
        out.points[a.index()].location = lb;
        out.points[b.index()].location = la;
        Ok(out)
    }
}

/// Extracts one keypoint per map at its row-major first global maximum.
pub fn nms_keypoints(maps: &HeatmapSet, threshold: f64) -> Result<KeypointSet> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("detection threshold {threshold} outside (0, 1)")));
    }
    let points = std::array::from_fn(|i| {
        let (x, y, v) = maps.peak(i);
        KeypointDetection {
            location: [x as f64, y as f64],
            confidence: v,
            detected: v >= threshold,
        }
    });
    Ok(KeypointSet { points, threshold })
}

/// Mean squared error over all `P·H·W` values.
pub fn loss(output: &HeatmapSet, target: &HeatmapSet) -> Result<f64> {
    output.same_shape(target)?;
    let n = output.values.len() as f64;
    let sum: f64 = output
        .values
        .iter()
        .zip(&target.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n)
}

/// Cached activations of one forward pass.
pub(crate) struct Trace {
    plane: Plane,
    input_padded: Vec<f64>,
    pre: [Vec<f64>; 3],
    hidden_padded: [Vec<f64>; 2],
    pub output: Vec<f64>,
}

pub(crate) fn forward_trace(layers: &[WideLayer; 3], width: usize, height: usize, input: &[f64]) -> Result<Trace> {
    let plane = Plane { width, height };
    let normalized: Vec<f64> = input.iter().map(|&x| (x - INPUT_OFFSET) * INPUT_GAIN).collect();
    let mut input_padded = Vec::new();
    pad_into(plane, 1, &normalized, &mut input_padded);
    let mut pre: [Vec<f64>; 3] = Default::default();
    let mut hidden_padded: [Vec<f64>; 2] = Default::default();
    let mut act = Vec::new();

    conv_forward(&layers[0], plane, &input_padded, &mut pre[0]);
    act.clear();
    act.extend(pre[0].iter().map(|&z| softplus(z)));
    pad_into(plane, CHANNELS[1], &act, &mut hidden_padded[0]);

    conv_forward(&layers[1], plane, &hidden_padded[0], &mut pre[1]);
    act.clear();
    act.extend(pre[1].iter().map(|&z| softplus(z)));
    pad_into(plane, CHANNELS[2], &act, &mut hidden_padded[1]);

    conv_forward(&layers[2], plane, &hidden_padded[1], &mut pre[2]);
    let output: Vec<f64> = pre[2].iter().map(|&z| sigmoid(z)).collect();
    if output.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure("detector forward pass"));
    }
    Ok(Trace {
        plane,
        input_padded,
        pre,
        hidden_padded,
        output,
    })
}

/// Per-layer parameter gradients, `[weights, bias]` at 64-bit.
pub(crate) struct ParamGrads {
    pub weights: [Vec<f64>; 3],
    pub bias: [Vec<f64>; 3],
}

impl ParamGrads {
    pub fn zeros(layers: &[WideLayer; 3]) -> Self {
        ParamGrads {
            weights: std::array::from_fn(|l| vec![0.0; layers[l].weights.len()]),
            bias: std::array::from_fn(|l| vec![0.0; layers[l].bias.len()]),
        }
    }
}

/// Reverse pass from `∂L/∂logits` of the head. Returns `∂L/∂input`
/// (unpadded) and accumulates parameter gradients when requested.
pub(crate) fn backward_from_logits(
    layers: &[WideLayer; 3],
    trace: &Trace,
    grad_logits: &[f64],
    mut params: Option<&mut ParamGrads>,
) -> Vec<f64> {
    let plane = trace.plane;
    let mut scratch = Vec::new();
    let mut grad_hidden = Vec::new();
    let mut grad_pre = grad_logits.to_vec();

    for l in (0..3).rev() {
        let input_padded = if l == 0 { &trace.input_padded } else { &trace.hidden_padded[l - 1] };
        if let Some(p) = params.as_deref_mut() {
            conv_backward_params(
                &layers[l],
                plane,
                input_padded,
                &grad_pre,
                &mut p.weights[l],
                &mut p.bias[l],
                &mut scratch,
            );
        }
        conv_backward_input(&layers[l], plane, &grad_pre, &mut grad_hidden);
        let channels = layers[l].in_channels;
        let mut next = Vec::with_capacity(channels * plane.area());
        let pw = plane.padded_width();
        for c in 0..channels {
            for y in 0..plane.height {
                let row = &grad_hidden[c * plane.padded_area() + (y + PAD) * pw + PAD..][..plane.width];
                next.extend_from_slice(row);
            }
        }
        if l > 0 {
            // softplus' = sigmoid of the pre-activation
            for (g, &z) in next.iter_mut().zip(&trace.pre[l - 1]) {
                *g *= sigmoid(z);
            }
        }
        grad_pre = next;
    }
    for g in grad_pre.iter_mut() {
        *g *= INPUT_GAIN;
    }
    grad_pre
}

/// `∂L/∂logits` for the MSE loss against `target`.
pub(crate) fn mse_logit_gradient(output: &[f64], target: &[f64]) -> Vec<f64> {
    let scale = 2.0 / output.len() as f64;
    output
        .iter()
        .zip(target)
        .map(|(&s, &t)| scale * (s - t) * s * (1.0 - s))
        .collect()
}

fn check_image(image: &Image) -> Result<()> {
    if image.width() < crate::imaging::MIN_SIDE || image.height() < crate::imaging::MIN_SIDE {
        return Err(Error::TooSmall {
            width: image.width(),
            height: image.height(),
            min: crate::imaging::MIN_SIDE,
        });
    }
    Ok(())
}

/// Confidence maps for `image`, same resolution as the input.
pub fn forward(image: &Image, weights: &DetectorWeights) -> Result<HeatmapSet> {
    check_image(image)?;
    let layers = weights.widened();
    let trace = forward_trace(&layers, image.width(), image.height(), &image.to_f64())?;
    Ok(HeatmapSet {
        width: image.width(),
        height: image.height(),
        values: trace.output,
    })
}

/// Gradient of an input-shaped quantity, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGradient {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

/// Exact `∂ loss(forward(image), target) / ∂ image`, with the loss value.
pub fn input_gradient_with_loss(
    image: &Image,
    weights: &DetectorWeights,
    target: &HeatmapSet,
) -> Result<(InputGradient, f64, HeatmapSet)> {
    check_image(image)?;
    let layers = weights.widened();
    input_gradient_f64(&layers, image.width(), image.height(), &image.to_f64(), target)
}

pub(crate) fn input_gradient_f64(
    layers: &[WideLayer; 3],
    width: usize,
    height: usize,
    input: &[f64],
    target: &HeatmapSet,
) -> Result<(InputGradient, f64, HeatmapSet)> {
    if target.width != width || target.height != height {
        return Err(Error::DimensionMismatch(format!(
            "target {}x{} for a {width}x{height} image",
            target.width, target.height
        )));
    }
    let trace = forward_trace(layers, width, height, input)?;
    let output = HeatmapSet {
        width,
        height,
        values: trace.output.clone(),
    };
    let value = loss(&output, target)?;
    let grad_logits = mse_logit_gradient(&trace.output, &target.values);
    let values = backward_from_logits(layers, &trace, &grad_logits, None);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure("detector input gradient"));
    }
    Ok((InputGradient { width, height, values }, value, output))
}

pub fn input_gradient(image: &Image, weights: &DetectorWeights, target: &HeatmapSet) -> Result<InputGradient> {
    input_gradient_with_loss(image, weights, target).map(|(g, _, _)| g)
}

/// Forward pass on a raw 64-bit input, bypassing `f32` image storage.
/// Exposed for finite-difference checks.
pub fn forward_raw(weights: &DetectorWeights, width: usize, height: usize, input: &[f64]) -> Result<HeatmapSet> {
    if input.len() != width * height {
        return Err(Error::DimensionMismatch("raw input length".into()));
    }
    let trace = forward_trace(&weights.widened(), width, height, input)?;
    Ok(HeatmapSet {
        width,
        height,
        values: trace.output,
    })
}

/// Input gradient on a raw 64-bit input; see [`forward_raw`].
pub fn input_gradient_raw(
    weights: &DetectorWeights,
    width: usize,
    height: usize,
    input: &[f64],
    target: &HeatmapSet,
) -> Result<InputGradient> {
    if input.len() != width * height {
        return Err(Error::DimensionMismatch("raw input length".into()));
    }
    input_gradient_f64(&weights.widened(), width, height, input, target).map(|(g, _, _)| g)
}
