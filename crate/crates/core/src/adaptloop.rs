//! Training phase (SFT, reward model, PPO) and the windowed deployment loop
//! that keeps adapting the executing policy to market feedback.
//!
//! Deployment timing: steps run `0..len`. Before predicting at step `t` with
//! `t > 0 && t % window == 0`, the just-finished window is used to update the
//! reward model and the student, and the student becomes the teacher. Swaps
//! therefore land on `{T, 2T, ...}` strictly inside the stream, and a trailing
//! partial window is never trained on.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{random_rejection, Example, Label, PreferencePair};
use crate::error::{Error, Result};
use crate::models::{
    exact_kl, save_policy, save_reward_model, Architecture, FeatureSpec, FeatureVector, Labeled,
    Policy, PreferenceSample, ReferencePolicy, RewardModel,
};
use crate::rng::{self, derive_seed};
use crate::trainer::{
    accuracy, collect_rollouts, ranking_accuracy, rlmf_update, save_metrics_csv, train_reward_model,
    train_rl, train_sft, MetricsRow, RolloutTuple, RunningMean, TrainConfig,
};

pub fn labeled_examples(examples: &[Example], spec: &FeatureSpec) -> Result<Vec<Labeled>> {
    examples
        .iter()
        .map(|e| {
            Ok(Labeled {
                features: spec.encode(e)?,
                label: e.response,
            })
        })
        .collect()
}

pub fn preference_samples(
    pairs: &[PreferencePair<'_>],
    spec: &FeatureSpec,
) -> Result<Vec<PreferenceSample>> {
    pairs
        .iter()
        .map(|p| {
            Ok(PreferenceSample {
                features: spec.encode(p.prompt)?,
                chosen: p.chosen,
                rejected: p.rejected,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingPhaseConfig {
    pub architecture: Architecture,
    pub reward_hidden: usize,
    pub sft: TrainConfig,
    pub reward: TrainConfig,
    pub rl: TrainConfig,
    /// Stop after the reward model; the teacher is then the SFT policy.
    pub skip_rl: bool,
    pub seed: u64,
}

impl Default for TrainingPhaseConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Mlp { hidden: 32 },
            reward_hidden: 32,
            sft: TrainConfig::default(),
            reward: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
            // weaker anchoring lets PPO drift away from the SFT policy
            rl: TrainConfig {
                beta: 1.0,
                ..TrainConfig::default()
            },
            skip_rl: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPhaseOutput {
    pub sft: Policy,
    pub teacher: Policy,
    pub reward_model: RewardModel,
    pub sft_curve: Vec<MetricsRow>,
    pub reward_curve: Vec<MetricsRow>,
    pub rl_curve: Vec<MetricsRow>,
}

/// Where intermediate checkpoints and metrics go, if anywhere.
#[derive(Debug, Clone, Default)]
pub struct CheckpointDir(pub Option<PathBuf>);

impl CheckpointDir {
    fn persist(&self, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        match &self.0 {
            Some(dir) => f(dir),
            None => Ok(()),
        }
    }
}

fn staged<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::stage(stage, e))
}

pub fn sft_stage(cfg: &TrainingPhaseConfig, data: &[Labeled]) -> Result<(Policy, Vec<MetricsRow>)> {
    let dim = data
        .first()
        .map(|s| s.features.len())
        .ok_or_else(|| Error::stage("sft", Error::InvalidInput("no training examples".into())))?;
    let init = Policy::new(cfg.architecture, dim, derive_seed(cfg.seed, 0));
    let sft_cfg = TrainConfig { seed: derive_seed(cfg.seed, 1), ..cfg.sft.clone() };
    staged("sft", train_sft(&init, data, &sft_cfg))
}

/// Reward model whose encoder starts from the SFT policy.
pub fn reward_stage(
    cfg: &TrainingPhaseConfig,
    sft: &Policy,
    preferences: &[PreferenceSample],
) -> Result<(RewardModel, Vec<MetricsRow>)> {
    let rm_init = RewardModel::from_policy(sft, cfg.reward_hidden, derive_seed(cfg.seed, 2));
    let rm_cfg = TrainConfig { seed: derive_seed(cfg.seed, 3), ..cfg.reward.clone() };
    staged("reward", train_reward_model(&rm_init, preferences, &rm_cfg))
}

/// KL-anchored PPO against the frozen SFT policy; a copy of the SFT policy
/// when `skip_rl` is set.
pub fn rl_stage(
    cfg: &TrainingPhaseConfig,
    sft: &Policy,
    reward_model: &RewardModel,
    data: &[Labeled],
) -> Result<(Policy, Vec<MetricsRow>)> {
    if cfg.skip_rl {
        return Ok((sft.clone(), Vec::new()));
    }
    let reference = ReferencePolicy::snapshot(sft);
    let rl_cfg = TrainConfig { seed: derive_seed(cfg.seed, 4), ..cfg.rl.clone() };
    let out = staged("rl", train_rl(sft, &reference, reward_model, data, &rl_cfg, false))?;
    staged("rl", reference.verify())?;
    Ok(out)
}

/// The three stages in order, persisting `{sft,rm,rlmf}.ckpt` and their
/// metrics when `out` names a directory.
pub fn run_training_phase(
    cfg: &TrainingPhaseConfig,
    data: &[Labeled],
    preferences: &[PreferenceSample],
    out: &CheckpointDir,
) -> Result<TrainingPhaseOutput> {
    let (sft, sft_curve) = sft_stage(cfg, data)?;
    staged("sft", out.persist(|d| {
        save_policy(&d.join("sft.ckpt"), &sft)?;
        save_metrics_csv(&d.join("sft_metrics.csv"), &sft_curve)
    }))?;
    let (reward_model, reward_curve) = reward_stage(cfg, &sft, preferences)?;
    staged("reward", out.persist(|d| {
        save_reward_model(&d.join("rm.ckpt"), &reward_model)?;
        save_metrics_csv(&d.join("rm_metrics.csv"), &reward_curve)
    }))?;
    let (teacher, rl_curve) = rl_stage(cfg, &sft, &reward_model, data)?;
    staged("rl", out.persist(|d| {
        save_policy(&d.join("rlmf.ckpt"), &teacher)?;
        save_metrics_csv(&d.join("rlmf_metrics.csv"), &rl_curve)
    }))?;
    Ok(TrainingPhaseOutput {
        sft,
        teacher,
        reward_model,
        sft_curve,
        reward_curve,
        rl_curve,
    })
}

/// Chosen is the realized label; rejected is the prediction when it was
/// wrong, otherwise a seeded draw from the other three vocabulary labels.
pub fn derive_preferences_from_feedback(
    rollouts: &[RolloutTuple],
    seed: u64,
) -> Vec<PreferenceSample> {
    let mut rng = rng::seeded(seed);
    rollouts
        .iter()
        .map(|r| PreferenceSample {
            features: r.features.clone(),
            chosen: r.realized,
            rejected: if r.sampled != r.realized {
                r.sampled
            } else {
                random_rejection(r.realized, &mut rng)
            },
        })
        .collect()
}

/// One element of a deployment stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamItem {
    pub features: FeatureVector,
    pub label: Label,
    pub regime: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub step: usize,
    pub features: FeatureVector,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feedback {
    pub label: Label,
    pub regime: Option<usize>,
}

/// Time-ordered stream that hands out features and realized labels through
/// separate calls: `observe` for step `t` must be followed by `reveal` for
/// step `t` before step `t + 1` can be observed.
#[derive(Debug, Clone)]
pub struct FeedbackStream {
    items: Vec<StreamItem>,
    cursor: usize,
    pending: bool,
}

impl FeedbackStream {
    pub fn new(items: Vec<StreamItem>) -> Self {
        Self {
            items,
            cursor: 0,
            pending: false,
        }
    }

    pub fn from_labeled(data: Vec<Labeled>) -> Self {
        Self::new(
            data.into_iter()
                .map(|s| StreamItem {
                    features: s.features,
                    label: s.label,
                    regime: None,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Features for the next step, or `None` when exhausted.
    pub fn observe(&mut self) -> Result<Option<Observation>> {
        if self.pending {
            return Err(Error::Stream(format!(
                "step {} observed twice before its label was revealed",
                self.cursor
            )));
        }
        let Some(item) = self.items.get(self.cursor) else {
            return Ok(None);
        };
        self.pending = true;
        Ok(Some(Observation {
            step: self.cursor,
            features: item.features.clone(),
        }))
    }

    pub fn reveal(&mut self) -> Result<Feedback> {
        if !self.pending {
            return Err(Error::Stream(format!(
                "label for step {} requested before its features were observed",
                self.cursor
            )));
        }
        let item = &self.items[self.cursor];
        self.pending = false;
        self.cursor += 1;
        Ok(Feedback {
            label: item.label,
            regime: item.regime,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlReference {
    /// The teacher as it stood when the window began.
    WindowStart,
    /// The teacher handed to the deployment loop.
    Original,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeploymentConfig {
    /// Steps between swaps (T).
    pub window: usize,
    pub rm_epochs: usize,
    /// Inner policy epochs per window; 0 disables policy updates.
    pub rlmf_epochs: usize,
    /// Sampled labels per prompt when collecting market feedback.
    pub rollouts_per_prompt: usize,
    pub kl_reference: KlReference,
    /// Train the reward model on all pairs seen so far instead of the
    /// latest window only.
    pub rm_replay: bool,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for DeploymentConfig {
    fn default() -> Self {
        Self {
            window: 10,
            rm_epochs: 5,
            rlmf_epochs: 4,
            rollouts_per_prompt: 8,
            kl_reference: KlReference::WindowStart,
            rm_replay: false,
            // A window holds few samples, so updates are full-batch and
            // large; momentum would carry stale directions across windows.
            train: TrainConfig {
                rl_learning_rate: 0.5,
                learning_rate: 0.05,
                batch_size: 256,
                gamma: 5.0,
                momentum: 0.0,
                ..TrainConfig::default()
            },
            seed: 0,
        }
    }
}

impl DeploymentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::InvalidSpec("window must be at least 1".into()));
        }
        if self.rollouts_per_prompt == 0 {
            return Err(Error::InvalidSpec("rollouts_per_prompt must be positive".into()));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub window: usize,
    pub regime: Option<usize>,
    pub pred: Label,
    pub truth: Label,
    pub correct: bool,
    /// The teacher was replaced just before this step.
    pub swap: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub window: usize,
    pub rm_accuracy: f64,
    pub kl_to_reference: f64,
    pub kl_to_original: f64,
    pub post_update_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeploymentLog {
    pub window: usize,
    pub steps: Vec<StepRecord>,
    pub windows: Vec<WindowRecord>,
    pub swaps: Vec<usize>,
}

pub const DEPLOYMENT_CSV_HEADER: &str = "step,window,pred,truth,correct,swap";

impl DeploymentLog {
    pub fn accuracy(&self) -> Option<f64> {
        self.accuracy_over(0, self.steps.len())
    }

    /// Accuracy over steps `from..to`.
    pub fn accuracy_over(&self, from: usize, to: usize) -> Option<f64> {
        let slice = self.steps.get(from..to.min(self.steps.len()))?;
        if slice.is_empty() {
            return None;
        }
        Some(slice.iter().filter(|s| s.correct).count() as f64 / slice.len() as f64)
    }

    pub fn predictions(&self) -> Vec<Label> {
        self.steps.iter().map(|s| s.pred).collect()
    }

    pub fn truths(&self) -> Vec<Label> {
        self.steps.iter().map(|s| s.truth).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{DEPLOYMENT_CSV_HEADER}")?;
        for s in &self.steps {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                s.step, s.window, s.pred, s.truth, s.correct as u8, s.swap as u8
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentSummary {
    pub steps: usize,
    pub window: usize,
    pub swaps: Vec<usize>,
    pub windows: Vec<WindowRecord>,
    pub adaptive_accuracy: Option<f64>,
    pub frozen_accuracy: Option<f64>,
    /// Adaptive minus frozen accuracy.
    pub accuracy_delta: Option<f64>,
}

impl DeploymentSummary {
    pub fn new(adaptive: &DeploymentLog, frozen: Option<&DeploymentLog>) -> Self {
        let adaptive_accuracy = adaptive.accuracy();
        let frozen_accuracy = frozen.and_then(DeploymentLog::accuracy);
        Self {
            steps: adaptive.steps.len(),
            window: adaptive.window,
            swaps: adaptive.swaps.clone(),
            windows: adaptive.windows.clone(),
            adaptive_accuracy,
            frozen_accuracy,
            accuracy_delta: adaptive_accuracy.zip(frozen_accuracy).map(|(a, f)| a - f),
        }
    }
}

struct Seen {
    features: FeatureVector,
    truth: Label,
}

fn mean_kl(policy: &Policy, reference: &ReferencePolicy, seen: &[Seen]) -> Result<f64> {
    let mut total = 0.0;
    for s in seen {
        total += exact_kl(policy, reference, &s.features)?;
    }
    Ok(total / seen.len().max(1) as f64)
}

struct Adapter<'a> {
    cfg: &'a DeploymentConfig,
    original: ReferencePolicy,
    rm: RewardModel,
    replay: Vec<PreferenceSample>,
    baseline: RunningMean,
}

impl Adapter<'_> {
    /// Updates the reward model and a student copy of `teacher` from one
    /// finished window; returns the new teacher.
    fn update(&mut self, teacher: &Policy, seen: &[Seen], window: usize) -> Result<(Policy, WindowRecord)> {
        let cfg = self.cfg;
        let seed = derive_seed(cfg.seed, window as u64);
        let prompts: Vec<Labeled> = seen
            .iter()
            .flat_map(|s| {
                std::iter::repeat_n(
                    Labeled {
                        features: s.features.clone(),
                        label: s.truth,
                    },
                    cfg.rollouts_per_prompt,
                )
            })
            .collect();
        let mut rollouts = collect_rollouts(teacher, &self.rm, &prompts, prompts.len(), derive_seed(seed, 0))?;

        let pairs = derive_preferences_from_feedback(&rollouts, derive_seed(seed, 1));
        if cfg.rm_replay {
            self.replay.extend(pairs.iter().cloned());
        } else {
            self.replay = pairs;
        }
        let rm_cfg = TrainConfig {
            epochs: cfg.rm_epochs,
            seed: derive_seed(seed, 2),
            ..cfg.train.clone()
        };
        self.rm = train_reward_model(&self.rm, &self.replay, &rm_cfg)?.0;
        for r in &mut rollouts {
            r.reward = self.rm.score(&r.features, r.sampled)?;
        }

        let reference = match cfg.kl_reference {
            KlReference::WindowStart => ReferencePolicy::snapshot(teacher),
            KlReference::Original => self.original.clone(),
        };
        let pol_cfg = TrainConfig {
            ppo_epochs: cfg.rlmf_epochs,
            seed: derive_seed(seed, 3),
            ..cfg.train.clone()
        };
        let (student, _) = rlmf_update(teacher, &reference, &rollouts, &pol_cfg, &mut self.baseline)?;
        reference.verify()?;
        let window_data: Vec<Labeled> = seen
            .iter()
            .map(|s| Labeled {
                features: s.features.clone(),
                label: s.truth,
            })
            .collect();
        let record = WindowRecord {
            window,
            rm_accuracy: ranking_accuracy(&self.rm, &self.replay)?,
            kl_to_reference: mean_kl(&student, &reference, seen)?,
            kl_to_original: mean_kl(&student, &self.original, seen)?,
            post_update_accuracy: accuracy(&student, &window_data)?,
        };
        Ok((student, record))
    }
}

fn traverse(
    teacher: &Policy,
    stream: &mut FeedbackStream,
    window: usize,
    mut adapter: Option<Adapter<'_>>,
) -> Result<DeploymentLog> {
    let mut log = DeploymentLog {
        window,
        ..Default::default()
    };
    let mut teacher = teacher.clone();
    let mut seen: Vec<Seen> = Vec::with_capacity(window);
    while let Some(obs) = stream.observe()? {
        let t = obs.step;
        let mut swap = false;
        if t > 0 && t % window == 0 {
            if let Some(a) = adapter.as_mut() {
                let (student, record) = a.update(&teacher, &seen, t / window - 1)?;
                teacher = student;
                log.windows.push(record);
                log.swaps.push(t);
                swap = true;
            }
            seen.clear();
        }
        let pred = teacher.predict(&obs.features)?;
        let fb = stream.reveal()?;
        log.steps.push(StepRecord {
            step: t,
            window: t / window,
            regime: fb.regime,
            pred,
            truth: fb.label,
            correct: pred == fb.label,
            swap,
        });
        seen.push(Seen {
            features: obs.features,
            truth: fb.label,
        });
    }
    Ok(log)
}

/// Executes the teacher over the stream, adapting after every full window.
pub fn run_deployment(
    teacher: &Policy,
    rm: &RewardModel,
    stream: &mut FeedbackStream,
    cfg: &DeploymentConfig,
) -> Result<DeploymentLog> {
    cfg.validate()?;
    let adapter = Adapter {
        cfg,
        original: ReferencePolicy::snapshot(teacher),
        rm: rm.clone(),
        replay: Vec::new(),
        baseline: RunningMean::default(),
    };
    traverse(teacher, stream, cfg.window, Some(adapter))
}

/// Same traversal and log schema with no updates.
pub fn run_frozen_baseline(
    teacher: &Policy,
    stream: &mut FeedbackStream,
    window: usize,
) -> Result<DeploymentLog> {
    if window == 0 {
        return Err(Error::InvalidSpec("window must be at least 1".into()));
    }
    traverse(teacher, stream, window, None)
}
