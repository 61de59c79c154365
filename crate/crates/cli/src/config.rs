//! Experiment configuration: one TOML file with a section per command.

use std::path::{Path, PathBuf};

use attrib_core::decay::DecaySchedule;
use attrib_core::eval::Metric;
use attrib_core::netzoo::{OptimizerKind, PatchConfig};
use attrib_core::{InputShape, NetworkSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Reference printed by `attrib --help`.
pub const REFERENCE: &str = r#"CONFIGURATION
  The --config file is TOML. Relative paths are resolved against the file's
  directory. Command-line flags override the top-level keys.

  seed = 0                  # network init, shuffling, noise draws
  workers = <cpu count>     # worker threads for per-image work
  out = "runs"              # parent of the timestamped run folders

  [data]                    # exactly one of:
  manifest = "data.toml"    #   IDX manifest: [train]/[test] images+labels
  [data.patch]              #   synthetic patch dataset
  size = 16                 #     image side
  classes = 4               #     one class per grid region
  channels = 1
  background = 0.3          #     background noise amplitude
  train = 1000              #     train images
  test = 200                #     test images
  seed = 0                  #     dataset seed (test split uses seed + 1)

  [model]                   # train only
  arch = "vgg-mini"         # vgg-mini | resnet-mini | linear | mlp
  bias = true               # ignored by resnet-mini (batchnorm carries biases)
  hidden = [64]             # mlp hidden widths
  init_bias_std = 0.0       # Gaussian bias initialization

  [train]
  epochs = 10
  batch_size = 32
  optimizer = "adam"        # adam | sgd
  lr = 0.001

  [explain]
  checkpoint = "..."        # required
  methods = ["gradient"]    # gradient, gxi, activity:<l>, bias:<l>,
                            # fullgrad:per-feature, fullgrad:per-layer,
                            # agg:<l0>, gradcam:<l>, oracle,
                            # shuffled-oracle, random[:<seed>]
  images = [0]              # test-split indices
  overlay = false           # blend heatmaps over the input image

  [evaluate]
  checkpoint = "..."        # required
  methods = [...]           # required, at least two
  images = <all>            # first n test images; n < 5 exits with 3
  noise_draws = 10          # reference maps per image and direction
  metrics = ["de_minus", "de_plus", "de_delta"]
  [evaluate.perturb]
  step_fraction = 0.01      # pixels removed per step
  removal_value = 0.0
  max_fraction = 1.0

  [decay]
  checkpoint = "..."        # required; also the distillation teacher
  eval_images = <all>       # test images scored after every rescale
  [decay.schedule]
  kind = "linear"           # linear | exponential
  decay_steps = 200
  train_steps = 200         # fine-tuning steps after each rescale
  post_zero_steps = 0
  ratio = 0.95              # exponential factor per step
  [decay.distill]
  temperature = 100.0
  optimizer = "adam"
  lr = 5e-6
  batch_size = 64

  [robustness]
  checkpoint = "..."        # required
  scales = [0.001, 0.1, 1.0, 10.0, 1000.0]
  shifts = [0.0]

EXIT CODES
  0 success, 1 internal error, 2 configuration error, 3 insufficient data"#;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub data: Option<DataSection>,
    pub model: Option<ModelSection>,
    pub train: Option<TrainSection>,
    pub explain: Option<ExplainSection>,
    pub evaluate: Option<EvaluateSection>,
    pub decay: Option<DecaySection>,
    pub robustness: Option<RobustnessSection>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    pub patch: Option<PatchSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSection {
    #[serde(default = "patch_size")]
    pub size: usize,
    #[serde(default = "patch_classes")]
    pub classes: usize,
    #[serde(default = "one")]
    pub channels: usize,
    #[serde(default = "background")]
    pub background: f64,
    #[serde(default = "patch_train")]
    pub train: usize,
    #[serde(default = "patch_test")]
    pub test: usize,
    #[serde(default)]
    pub seed: u64,
}

impl PatchSection {
    pub fn patch_config(&self) -> PatchConfig {
        PatchConfig {
            size: self.size,
            classes: self.classes,
            channels: self.channels,
            background: self.background,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    VggMini,
    ResnetMini,
    Linear,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Arch,
    #[serde(default = "yes")]
    pub bias: bool,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub init_bias_std: f64,
}

impl ModelSection {
    pub fn spec(&self, input: InputShape, classes: usize) -> NetworkSpec {
        match self.arch {
            Arch::VggMini => NetworkSpec::vgg_mini(input, classes, self.bias),
            Arch::ResnetMini => NetworkSpec::resnet_mini(input, classes),
            Arch::Linear => NetworkSpec::linear(input, classes, self.bias),
            Arch::Mlp => NetworkSpec::mlp(input, &self.hidden, classes, self.bias),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "epochs")]
    pub epochs: usize,
    #[serde(default = "batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "train_lr")]
    pub lr: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: epochs(),
            batch_size: batch(),
            optimizer: OptimizerKind::Adam,
            lr: train_lr(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainSection {
    pub checkpoint: PathBuf,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    #[serde(default = "first_image")]
    pub images: Vec<usize>,
    #[serde(default)]
    pub overlay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub checkpoint: PathBuf,
    pub methods: Vec<String>,
    pub images: Option<usize>,
    #[serde(default = "draws")]
    pub noise_draws: usize,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    #[serde(default)]
    pub perturb: PerturbSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSection {
    #[serde(default = "step")]
    pub step_fraction: f64,
    #[serde(default)]
    pub removal_value: f64,
    #[serde(default = "max_fraction")]
    pub max_fraction: f64,
}

impl Default for PerturbSection {
    fn default() -> Self {
        Self {
            step_fraction: step(),
            removal_value: 0.0,
            max_fraction: max_fraction(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecaySection {
    pub checkpoint: PathBuf,
    pub eval_images: Option<usize>,
    #[serde(default)]
    pub schedule: DecaySchedule,
    #[serde(default)]
    pub distill: DistillSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    #[serde(default = "temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "distill_lr")]
    pub lr: f64,
    #[serde(default = "distill_batch")]
    pub batch_size: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            temperature: temperature(),
            optimizer: OptimizerKind::Adam,
            lr: distill_lr(),
            batch_size: distill_batch(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessSection {
    pub checkpoint: PathBuf,
    #[serde(default = "scales")]
    pub scales: Vec<f64>,
    #[serde(default = "shifts")]
    pub shifts: Vec<f64>,
}

fn patch_size() -> usize {
    16
}
fn patch_classes() -> usize {
    4
}
fn one() -> usize {
    1
}
fn background() -> f64 {
    0.3
}
fn patch_train() -> usize {
    1000
}
fn patch_test() -> usize {
    200
}
fn yes() -> bool {
    true
}
fn epochs() -> usize {
    10
}
fn batch() -> usize {
    32
}
fn train_lr() -> f64 {
    1e-3
}
fn default_methods() -> Vec<String> {
    vec!["gradient".into()]
}
fn first_image() -> Vec<usize> {
    vec![0]
}
fn draws() -> usize {
    10
}
fn default_metrics() -> Vec<Metric> {
    vec![Metric::DeMinus, Metric::DePlus, Metric::DeDelta]
}
fn step() -> f64 {
    0.01
}
fn max_fraction() -> f64 {
    1.0
}
fn temperature() -> f64 {
    100.0
}
fn distill_lr() -> f64 {
    5e-6
}
fn distill_batch() -> usize {
    64
}
fn scales() -> Vec<f64> {
    vec![0.001, 0.1, 1.0, 10.0, 1000.0]
}
fn shifts() -> Vec<f64> {
    vec![0.0]
}

fn absolutize(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl Config {
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: Config = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("--config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = std::path::absolute(base).unwrap_or_else(|_| base.to_path_buf());
        Self::parse(&text, &base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let Some(out) = &mut self.out {
            absolutize(base, out);
        }
        if let Some(m) = self.data.as_mut().and_then(|d| d.manifest.as_mut()) {
            absolutize(base, m);
        }
        for p in [
            self.explain.as_mut().map(|s| &mut s.checkpoint),
            self.evaluate.as_mut().map(|s| &mut s.checkpoint),
            self.decay.as_mut().map(|s| &mut s.checkpoint),
            self.robustness.as_mut().map(|s| &mut s.checkpoint),
        ]
        .into_iter()
        .flatten()
        {
            absolutize(base, p);
        }
    }
}

/// Fails with the dotted name of a missing section or key.
pub fn require<'a, T>(value: Option<&'a T>, key: &str) -> Result<&'a T, CliError> {
    value.ok_or_else(|| CliError::Config(format!("missing `{key}` in the configuration")))
}

/// Fails unless `path` (the value of `key`) names an existing file.
pub fn existing(path: &Path, key: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{key}: no such file {}", path.display())))
    }
}
