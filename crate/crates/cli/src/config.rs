//! Job configuration: a JSON file whose every field has a default, with
//! command-line overrides applied on top.

use std::path::{Path, PathBuf};

use morphforge_core::blend::{OuterSource, DEFAULT_ALPHA};
use morphforge_core::dataset::{Regime, DEFAULT_SPLIT_RATIOS};
use morphforge_core::partial::RegionSet;
use morphforge_core::warp::WarpMethod;
use morphforge_learn::attack::{DEFAULT_EPSILONS, DEFAULT_LAMBDA};
use morphforge_learn::lrp::{DEFAULT_GATE, EPSILON_VISUAL};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, IoContext, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JobConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core. Outputs do not depend on it.
    pub workers: usize,
    pub out_dir: PathBuf,
    /// Face manifest; defaults to the one `synth` writes under `out_dir`.
    pub manifest: Option<PathBuf>,
    pub synth: SynthConfig,
    pub morph: MorphConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
    pub attack: AttackConfig,
    pub lrp: LrpConfig,
}

impl Default for JobConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            workers: 0,
            out_dir: PathBuf::from("out"),
            manifest: None,
            synth: SynthConfig::default(),
            morph: MorphConfig::default(),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
            attack: AttackConfig::default(),
            lrp: LrpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub size: usize,
    /// Faces are spread round-robin over this many databases.
    pub databases: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 400,
            size: 160,
            databases: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MorphConfig {
    /// `a<TAB>b` id pairs for the `morph` command.
    pub pairs: Option<PathBuf>,
    pub method: WarpMethod,
    pub alpha: f64,
    pub outer_source: OuterSource,
    /// Regions for partial morphs as `LRNM` flags (`-` for absent); the
    /// empty set `----` renders complete morphs.
    pub regions: RegionSet,
}

impl Default for MorphConfig {
    fn default() -> Self {
        Self {
            pairs: None,
            method: WarpMethod::Triangle,
            alpha: DEFAULT_ALPHA,
            outer_source: OuterSource::A,
            regions: RegionSet::EMPTY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub regime: Regime,
    pub ratios: [f64; 3],
    /// Training samples before augmentation.
    pub train_total: usize,
    /// Morph pairs drawn per genuine training image.
    pub pairs_per_image: f64,
    /// Samples of the substitute seed set drawn from the validation split.
    pub val_total: usize,
    /// Expand every training sample into its five corrupted versions.
    pub augment: bool,
    /// Redraw an integer crop shift every epoch.
    pub shift: bool,
    pub crop_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Naive,
            ratios: DEFAULT_SPLIT_RATIOS,
            train_total: 400,
            pairs_per_image: 1.0,
            val_total: 40,
            augment: true,
            shift: true,
            crop_size: 48,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub blocks: usize,
    pub width: usize,
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 3,
            width: 8,
            hidden: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Linear learning-rate decay target as a fraction of the start rate.
    pub final_lr_fraction: f64,
    /// Batch gradient norm cap; absent means no clipping.
    pub max_grad_norm: Option<f64>,
    /// Head retraining of the multi-label net.
    pub head_lr: f64,
    pub head_lr_second: Option<f64>,
    pub head_epochs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            epochs: 20,
            batch_size: 16,
            final_lr_fraction: 0.1,
            max_grad_norm: Some(1.0),
            head_lr: 0.01,
            head_lr_second: None,
            head_epochs: 10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Explicit threshold sweep; by default every distinct score.
    pub thresholds: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Intensity changes on the 0..255 scale.
    pub epsilons: Vec<f64>,
    pub lambda: f64,
    pub rounds: usize,
    pub substitute: ModelConfig,
    pub substitute_lr: f64,
    pub substitute_epochs: usize,
    /// Also attack the detector with its own gradients.
    pub whitebox: bool,
    /// Write every adversarial image as PNG.
    pub dump: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilons: DEFAULT_EPSILONS.to_vec(),
            lambda: DEFAULT_LAMBDA,
            rounds: 2,
            substitute: ModelConfig {
                blocks: 2,
                width: 8,
                hidden: 64,
            },
            substitute_lr: 0.01,
            substitute_epochs: 10,
            whitebox: true,
            dump: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrpConfig {
    pub epsilon: f64,
    /// Minimum morph-class output; `null` disables the gate.
    pub gate: Option<f64>,
    /// Layers below this index use the flat rule when they are convolutions;
    /// `null` means the layers before the first pooling layer.
    pub flat_until: Option<usize>,
    /// Write a heatmap PNG per explained sample.
    pub heatmaps: bool,
}

impl Default for LrpConfig {
    fn default() -> Self {
        Self {
            epsilon: EPSILON_VISUAL,
            gate: Some(DEFAULT_GATE),
            flat_until: None,
            heatmaps: true,
        }
    }
}

/// Sets `dotted.key` in a JSON object. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn set_key(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::config(format!("{key}: {part:?} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(CliError::config("empty override key"))
}

impl JobConfig {
    /// Reads a config file (or the defaults) and applies `key=value`
    /// overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).at(p)?;
                serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(JobConfig::default()).expect("defaults serialize"),
        };
        for (k, v) in overrides {
            set_key(&mut root, k, v)?;
        }
        let cfg: JobConfig = serde_json::from_value(root).map_err(|e| CliError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CliError::config(m.to_string()));
        if self.synth.size < 32 {
            return bad("synth.size must be at least 32");
        }
        if self.dataset.crop_size < 8 {
            return bad("dataset.crop_size must be at least 8");
        }
        if self.dataset.crop_size % (1 << self.model.blocks) != 0 {
            return bad("dataset.crop_size must be divisible by 2^model.blocks");
        }
        if !(self.dataset.pairs_per_image > 0.0) {
            return bad("dataset.pairs_per_image must be positive");
        }
        if self.train.batch_size == 0 || self.model.width == 0 || self.model.hidden == 0 {
            return bad("batch size and layer widths must be positive");
        }
        if !(0.0..=1.0).contains(&self.morph.alpha) {
            return bad("morph.alpha must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.out_dir.join("faces").join("manifest.tsv"))
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.out_dir.join("dataset")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.out_dir.join("model")
    }
}
