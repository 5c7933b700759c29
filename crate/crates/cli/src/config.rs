//! JSON configuration file. Every section is optional; command-line flags
//! override whatever the file sets.

use std::path::Path;

use serde::{Deserialize, Serialize};
use shape_evade::detector::train::TrainingConfig;
use shape_evade::detector::DEFAULT_DETECTION_THRESHOLD;
use shape_evade::fitter::FitConfig;
use shape_evade::synth::{CorpusSpec, ImageFormat};

use crate::failure::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub seed: u64,
    pub subjects: usize,
    pub poses: usize,
    pub width: usize,
    pub height: usize,
    pub format: ImageFormat,
}

impl Default for GenSection {
    fn default() -> Self {
        let spec = CorpusSpec::default();
        GenSection {
            seed: spec.seed,
            subjects: spec.subjects,
            poses: spec.poses,
            width: spec.width,
            height: spec.height,
            format: ImageFormat::Float,
        }
    }
}

/// Attack parameters shared by `attack` and `eval adversarial`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub epsilon: f64,
    pub alpha: f64,
    pub radius: f64,
    pub stop_rmse: Option<f64>,
    pub max_iters: usize,
    /// Off for `attack`, on for `eval adversarial` when unset.
    pub stop_on_success: Option<bool>,
    pub recenter: bool,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            epsilon: 0.035,
            alpha: 1.0 / 255.0,
            radius: 12.0,
            stop_rmse: None,
            max_iters: 300,
            stop_on_success: None,
            recenter: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Use only the first `subjects` subjects of the corpus.
    pub subjects: Option<usize>,
    /// Use only the first `poses` poses of each subject.
    pub poses: Option<usize>,
    /// Flip pairs as `a:b` names; the built-in list when absent.
    pub pairs: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub gen: GenSection,
    pub train: TrainingConfig,
    pub fit: FitConfig,
    pub attack: AttackSection,
    pub eval: EvalSection,
    pub detection_threshold: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            gen: GenSection::default(),
            train: TrainingConfig::default(),
            fit: FitConfig::default(),
            attack: AttackSection::default(),
            eval: EvalSection::default(),
            detection_threshold: DEFAULT_DETECTION_THRESHOLD,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, Failure> {
        let bytes = std::fs::read(path).map_err(|e| Failure::domain(shape_evade::Error::io(path, e)))?;
        serde_json::from_slice(&bytes).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))
    }
}
