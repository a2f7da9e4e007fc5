//! Run configuration: one TOML file with a section per stage. Unknown keys
//! are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use regimelab::adaptloop::{DeploymentConfig, TrainingPhaseConfig};
use regimelab::dataset::{BuildConfig, SplitRatios};
use regimelab::featurize::IndicatorConfig;
use regimelab::igtools::{IgTask, PipelineConfig};
use regimelab::market_sim::{OhlcvConfig, RegimeParams, RegimeSpec};
use regimelab::models::FeatureSpec;

use crate::Failure;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
    pub out: PathBuf,
    pub simulate: SimulateConfig,
    pub dataset: DatasetConfig,
    pub features: FeatureSpec,
    pub train: TrainingPhaseConfig,
    pub deploy: DeployConfig,
    pub eval: EvalConfig,
    pub ig: IgConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: FORMAT_VERSION,
            seed: 0,
            out: PathBuf::from("out"),
            simulate: SimulateConfig::default(),
            dataset: DatasetConfig::default(),
            features: FeatureSpec::default(),
            train: TrainingPhaseConfig::default(),
            deploy: DeployConfig::default(),
            eval: EvalConfig::default(),
            ig: IgConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    /// First day simulated under the new parameters.
    pub at: usize,
    pub params: Vec<RegimeParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    /// Trading days; examples start on day 2.
    pub horizon: usize,
    pub init_price: f64,
    pub spec: RegimeSpec,
    pub shift: Option<ShiftConfig>,
    pub ohlcv: OhlcvConfig,
    pub indicators: IndicatorConfig,
}

/// A calm regime and a volatile one, both persistent.
pub fn default_spec() -> RegimeSpec {
    RegimeSpec::new(
        vec![RegimeParams::new(0.05, 0.1, 0.6), RegimeParams::new(-0.05, 0.2, 1.2)],
        vec![vec![0.98, 0.02], vec![0.04, 0.96]],
        vec![0.5, 0.5],
    )
    .expect("default spec is valid")
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            horizon: 2113,
            init_price: 100.0,
            spec: default_spec(),
            shift: None,
            ohlcv: OhlcvConfig::default(),
            indicators: IndicatorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub build: BuildConfig,
    pub split: SplitRatios,
    pub shuffle: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    #[default]
    Test,
    Eval,
}

impl SplitName {
    pub fn file(self) -> &'static str {
        match self {
            SplitName::Train => "train.jsonl",
            SplitName::Test => "test.jsonl",
            SplitName::Eval => "eval.jsonl",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Test => "test",
            SplitName::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeployConfig {
    /// Split replayed as the deployment stream.
    pub split: SplitName,
    pub adapt: DeploymentConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PolicyStage {
    Sft,
    #[default]
    Rlmf,
}

impl PolicyStage {
    pub fn checkpoint(self) -> &'static str {
        match self {
            PolicyStage::Sft => "sft.ckpt",
            PolicyStage::Rlmf => "rlmf.ckpt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: SplitName,
    pub checkpoint: PolicyStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IgConfig {
    /// Embedding files, `.csv` or binary; relative paths resolve against
    /// the config file's directory.
    pub inputs: Vec<PathBuf>,
    pub tasks: Vec<IgTask>,
    pub pipeline: PipelineConfig,
}

impl Default for IgConfig {
    fn default() -> Self {
        Self { inputs: Vec::new(), tasks: vec![IgTask::Categorical], pipeline: PipelineConfig::default() }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for input in &mut cfg.ig.inputs {
            if input.is_relative() {
                *input = base.join(&*input);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        if self.version != FORMAT_VERSION {
            return Err(Failure::config(format!("unsupported config version {}", self.version)));
        }
        if self.simulate.horizon < 3 {
            return Err(Failure::config(format!(
                "simulate.horizon must be at least 3, got {}",
                self.simulate.horizon
            )));
        }
        if let Some(s) = &self.simulate.shift {
            if s.at == 0 || s.at >= self.simulate.horizon {
                return Err(Failure::config(format!("simulate.shift.at {} is outside the horizon", s.at)));
            }
        }
        if self.features.news_dim != self.dataset.build.news.dim {
            return Err(Failure::config(format!(
                "features.news_dim ({}) must equal dataset.build.news.dim ({})",
                self.features.news_dim, self.dataset.build.news.dim
            )));
        }
        if self.features.depth == 0 || self.dataset.build.depth == 0 {
            return Err(Failure::config("context depth must be at least 1".into()));
        }
        for t in [&self.train.sft, &self.train.reward, &self.train.rl] {
            t.validate().map_err(Failure::from)?;
        }
        self.deploy.adapt.validate().map_err(Failure::from)?;
        for input in &self.ig.inputs {
            if !input.is_file() {
                return Err(Failure::config(format!("ig input {} does not exist", input.display())));
            }
        }
        Ok(())
    }
}
