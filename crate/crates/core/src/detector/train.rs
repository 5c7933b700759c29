//! Minibatch Adam training against Gaussian-blob target maps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{backward_from_logits, forward_trace, DetectorWeights, HeatmapSet, KeypointSet, ParamGrads};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::synth::{render, sample_corpus, Corpus, CorpusSpec};

/// Blob width of the training targets, pixels.
pub const BLOB_SIGMA: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Extra weight on squared errors where the target exceeds 0.1.
    /// 1 gives the plain mean squared error.
    pub foreground_weight: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            seed: 7,
            epochs: 30,
            learning_rate: 3e-3,
            batch_size: 8,
            foreground_weight: 1.0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        if !(self.foreground_weight >= 1.0 && self.foreground_weight.is_finite()) {
            return Err(Error::InvalidArgument("foreground_weight must be at least 1".into()));
        }
        Ok(())
    }
}

/// One labelled training image.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub image: Image,
    pub keypoints: KeypointSet,
}

/// Loss history of a training run, one entry per epoch (mean over samples).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn flatten(g: &ParamGrads) -> Vec<f64> {
    let mut out = Vec::new();
    for l in 0..3 {
        out.extend_from_slice(&g.weights[l]);
        out.extend_from_slice(&g.bias[l]);
    }
    out
}

fn params_mut(weights: &mut DetectorWeights) -> impl Iterator<Item = &mut f32> {
    weights
        .layers
        .iter_mut()
        .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
}

/// Weighted squared error and its gradient w.r.t. the head logits.
fn weighted_loss(output: &[f64], target: &[f64], fg: f64) -> (f64, Vec<f64>) {
    let n = output.len() as f64;
    let mut total = 0.0;
    let grad = output
        .iter()
        .zip(target)
        .map(|(&s, &t)| {
            let w = if t > 0.1 { fg } else { 1.0 };
            let r = s - t;
            total += w * r * r;
            2.0 * w * r * s * (1.0 - s) / n
        })
        .collect();
    (total / n, grad)
}

fn targets_for(sample: &TrainingSample) -> HeatmapSet {
    HeatmapSet::gaussian_targets(
        sample.image.width(),
        sample.image.height(),
        &sample.keypoints.locations(),
        BLOB_SIGMA,
    )
}

/// Mean training loss over `samples` under `config`'s weighting.
pub fn evaluate_loss(weights: &DetectorWeights, samples: &[TrainingSample], config: &TrainingConfig) -> Result<f64> {
    let layers = weights.widened();
    let mut sum = 0.0;
    for s in samples {
        let trace = forward_trace(&layers, s.image.width(), s.image.height(), &s.image.to_f64())?;
        sum += weighted_loss(&trace.output, targets_for(s).values(), config.foreground_weight).0;
    }
    Ok(sum / samples.len().max(1) as f64)
}

/// Trains from a seeded initialisation. Deterministic given the samples
/// and config; the visiting order is reshuffled each epoch from the seed.
pub fn train(
    samples: &[TrainingSample],
    config: &TrainingConfig,
    corpus_fingerprint: &str,
    mut progress: impl FnMut(usize, f64),
) -> Result<(DetectorWeights, TrainingLog)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let mut weights = DetectorWeights::initialize(config.seed);
    weights.corpus_fingerprint = corpus_fingerprint.to_owned();
    let targets: Vec<HeatmapSet> = samples.iter().map(targets_for).collect();
    let inputs: Vec<Vec<f64>> = samples.iter().map(|s| s.image.to_f64()).collect();

    let mut log = TrainingLog {
        initial_loss: evaluate_loss(&weights, samples, config)?,
        epoch_losses: Vec::with_capacity(config.epochs),
    };
    let n_params = weights.param_count();
    let mut adam = Adam {
        m: vec![0.0; n_params],
        v: vec![0.0; n_params],
        t: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7a1b);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let layers = weights.widened();
            let mut grads = ParamGrads::zeros(&layers);
            for &k in batch {
                let img = &samples[k].image;
                let trace = forward_trace(&layers, img.width(), img.height(), &inputs[k])?;
                let (l, g) = weighted_loss(&trace.output, targets[k].values(), config.foreground_weight);
                epoch_loss += l;
                backward_from_logits(&layers, &trace, &g, Some(&mut grads));
            }
            let scale = 1.0 / batch.len() as f64;
            let flat = flatten(&grads);
            if flat.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingFailure {
                    step,
                    loss: f64::NAN,
                });
            }
            adam.t += 1;
            let bc1 = 1.0 - BETA1.powi(adam.t);
            let bc2 = 1.0 - BETA2.powi(adam.t);
            for (((p, g), m), v) in params_mut(&mut weights).zip(&flat).zip(&mut adam.m).zip(&mut adam.v) {
                let g = g * scale;
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let update = config.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                *p = (f64::from(*p) - update) as f32;
            }
            step += 1;
        }
        let mean = epoch_loss / samples.len() as f64;
        if !mean.is_finite() || !weights.all_finite() {
            return Err(Error::TrainingFailure { step, loss: mean });
        }
        log.epoch_losses.push(mean);
        progress(epoch, mean);
    }
    Ok((weights, log))
}

/// Training samples for every record of a corpus on disk.
pub fn corpus_samples(corpus: &Corpus) -> Result<Vec<TrainingSample>> {
    corpus
        .records
        .iter()
        .map(|r| {
            Ok(TrainingSample {
                image: corpus.image(r)?,
                keypoints: KeypointSet::certain(r.keypoints),
            })
        })
        .collect()
}

/// Renders a corpus in memory into training samples.
pub fn rendered_samples(spec: &CorpusSpec) -> Result<Vec<TrainingSample>> {
    sample_corpus(spec)?
        .iter()
        .map(|e| {
            let (image, keypoints) = render(&e.subject)?;
            Ok(TrainingSample { image, keypoints })
        })
        .collect()
}

/// Trains on a corpus on disk, stamping the checkpoint with its fingerprint.
pub fn train_on_corpus(
    corpus: &Corpus,
    config: &TrainingConfig,
    progress: impl FnMut(usize, f64),
) -> Result<(DetectorWeights, TrainingLog)> {
    train(&corpus_samples(corpus)?, config, &corpus.fingerprint, progress)
}

/// Fraction of ground-truth keypoints whose map peak lies within `radius`
/// pixels of the true location.
pub fn peak_localization_rate(weights: &DetectorWeights, samples: &[TrainingSample], radius: f64) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for s in samples {
        let maps = super::forward(&s.image, weights)?;
        for (i, gt) in s.keypoints.points.iter().enumerate() {
            let (x, y, _) = maps.peak(i);
            let d = ((x as f64 - gt.location[0]).powi(2) + (y as f64 - gt.location[1]).powi(2)).sqrt();
            hits += (d <= radius) as usize;
            total += 1;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}
