//! Optimization loops: supervised fine-tuning, reward-model fitting, and the
//! clipped policy-gradient update with optional market-feedback term.
//!
//! RL episodes are single-step bandits: one sampled label per prompt. The
//! per-sample objective is `r(f, a) - beta * log(pi_old(a|f) / pi_ref(a|f))`
//! and the market-feedback Brier loss enters as `- gamma * L_MF`, i.e. the
//! update maximizes `L_RL - gamma * L_MF`.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::models::{
    exact_kl, mf_loss_and_grad, ppo_surrogate_and_grad, rm_loss_and_grad, sft_loss_and_grad,
    FeatureVector, Labeled, Policy, PreferenceSample, ReferencePolicy, RewardModel,
    SurrogateSample,
};
use crate::rng::{self, derive_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    RunningMean,
    None,
}

/// Hyperparameters shared by every loop. `beta` and `gamma` default to 0.1
/// and 1.0; PPO internals (clip 0.2, 4 inner epochs, grad-norm clip 1.0) and
/// the optimizer settings are our own choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Step size for the policy-gradient updates.
    pub rl_learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_eps: f64,
    pub beta: f64,
    pub gamma: f64,
    pub rollout_size: usize,
    pub rl_iterations: usize,
    pub ppo_epochs: usize,
    pub baseline: BaselineMode,
    pub seed: u64,
    pub grad_clip: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            rl_learning_rate: 0.01,
            batch_size: 32,
            epochs: 100,
            clip_eps: 0.2,
            beta: 0.1,
            gamma: 1.0,
            rollout_size: 256,
            rl_iterations: 20,
            ppo_epochs: 4,
            baseline: BaselineMode::RunningMean,
            seed: 0,
            grad_clip: 1.0,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        for lr in [self.learning_rate, self.rl_learning_rate] {
            if !(lr.is_finite() && lr >= 0.0) {
                return bad("learning rates must be finite and non-negative");
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta must be finite and non-negative");
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return bad("gamma must be finite and non-negative");
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return bad("grad_clip must be finite and non-negative (0 disables)");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        Ok(())
    }
}

/// SGD with momentum, or Adam.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, lr: f64, n_params: usize) -> Self {
        Self {
            kind: cfg.optimizer,
            lr,
            momentum: cfg.momentum,
            first: vec![0.0; n_params],
            second: match cfg.optimizer {
                OptimizerKind::Adam => vec![0.0; n_params],
                OptimizerKind::Sgd => Vec::new(),
            },
            steps: 0,
        }
    }

    /// Descends along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for ((p, g), v) in params.iter_mut().zip(grad).zip(&mut self.first) {
                    *v = self.momentum * *v + g;
                    *p -= self.lr * *v;
                }
            }
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                let c1 = 1.0 - B1.powi(self.steps);
                let c2 = 1.0 - B2.powi(self.steps);
                for (i, (p, g)) in params.iter_mut().zip(grad).enumerate() {
                    self.first[i] = B1 * self.first[i] + (1.0 - B1) * g;
                    self.second[i] = B2 * self.second[i] + (1.0 - B2) * g * g;
                    *p -= self.lr * (self.first[i] / c1) / ((self.second[i] / c2).sqrt() + EPS);
                }
            }
        }
    }
}

/// Rescales `grad` in place so its L2 norm is at most `max_norm` (0 = off).
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

fn ensure_finite(stage: &str, loss: f64, grad: &[f64], step: usize) -> Result<()> {
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{stage} diverged at step {step} (loss {loss})"
        )));
    }
    Ok(())
}

/// One line of a run's metrics CSV. Columns that do not apply are left empty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: Option<f64>,
    pub reward_mean: Option<f64>,
    pub kl_mean: Option<f64>,
    pub clip_frac: Option<f64>,
    pub acc: Option<f64>,
}

pub const METRICS_CSV_HEADER: &str = "step,loss,reward_mean,kl_mean,clip_frac,acc";

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricsRow]) -> Result<()> {
    writeln!(w, "{METRICS_CSV_HEADER}")?;
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.10}")).unwrap_or_default();
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.step,
            cell(r.loss),
            cell(r.reward_mean),
            cell(r.kl_mean),
            cell(r.clip_frac),
            cell(r.acc)
        )?;
    }
    Ok(())
}

pub fn save_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    crate::fsutil::write_atomic(path, |w| write_metrics_csv(w, rows))
}

/// Fraction of `data` where the policy's argmax equals the label.
pub fn accuracy(policy: &Policy, data: &[Labeled]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidInput("accuracy of an empty set".into()));
    }
    let mut hits = 0usize;
    for s in data {
        if policy.predict(&s.features)? == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Fraction of pairs scored chosen > rejected; ties count one half.
pub fn ranking_accuracy(rm: &RewardModel, pairs: &[PreferenceSample]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("ranking accuracy of an empty set".into()));
    }
    let mut score = 0.0;
    for p in pairs {
        let w = rm.score(&p.features, p.chosen)?;
        let l = rm.score(&p.features, p.rejected)?;
        score += if w > l {
            1.0
        } else if w == l {
            0.5
        } else {
            0.0
        };
    }
    Ok(score / pairs.len() as f64)
}

/// Shuffled mini-batch index lists for one epoch.
fn batches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Mini-batch cross-entropy descent. Row 0 of the curve is the initial
/// full-data loss; each later row is the full-data loss after an epoch.
pub fn train_sft(
    policy: &Policy,
    data: &[Labeled],
    cfg: &TrainConfig,
) -> Result<(Policy, Vec<MetricsRow>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("no training examples".into()));
    }
    let mut policy = policy.clone();
    let mut opt = Optimizer::new(cfg, cfg.learning_rate, policy.params().len());
    let mut rng = rng::seeded(cfg.seed);
    let eval = |p: &Policy, step| -> Result<MetricsRow> {
        Ok(MetricsRow {
            step,
            loss: Some(sft_loss_and_grad(p, data)?.0),
            acc: Some(accuracy(p, data)?),
            ..Default::default()
        })
    };
    let mut curve = vec![eval(&policy, 0)?];
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        for batch in batches(data.len(), cfg.batch_size, &mut rng) {
            let picked: Vec<Labeled> = batch.iter().map(|&i| data[i].clone()).collect();
            let (loss, mut grad) = sft_loss_and_grad(&policy, &picked)?;
            step += 1;
            ensure_finite("sft", loss, &grad, step)?;
            clip_grad_norm(&mut grad, cfg.grad_clip);
            opt.step(policy.params_mut(), &grad);
        }
        curve.push(eval(&policy, epoch)?);
    }
    Ok((policy, curve))
}

/// Mini-batch pairwise-logistic descent; `acc` is training ranking accuracy.
pub fn train_reward_model(
    rm: &RewardModel,
    pairs: &[PreferenceSample],
    cfg: &TrainConfig,
) -> Result<(RewardModel, Vec<MetricsRow>)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no preference pairs".into()));
    }
    let mut rm = rm.clone();
    let mut opt = Optimizer::new(cfg, cfg.learning_rate, rm.params().len());
    let mut rng = rng::seeded(cfg.seed);
    let eval = |r: &RewardModel, step| -> Result<MetricsRow> {
        Ok(MetricsRow {
            step,
            loss: Some(rm_loss_and_grad(r, pairs)?.0),
            acc: Some(ranking_accuracy(r, pairs)?),
            ..Default::default()
        })
    };
    let mut curve = vec![eval(&rm, 0)?];
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        for batch in batches(pairs.len(), cfg.batch_size, &mut rng) {
            let picked: Vec<PreferenceSample> = batch.iter().map(|&i| pairs[i].clone()).collect();
            let (loss, mut grad) = rm_loss_and_grad(&rm, &picked)?;
            step += 1;
            ensure_finite("reward model", loss, &grad, step)?;
            clip_grad_norm(&mut grad, cfg.grad_clip);
            opt.step(rm.params_mut(), &grad);
        }
        curve.push(eval(&rm, epoch)?);
    }
    Ok((rm, curve))
}

/// One bandit episode collected from the acting policy.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTuple {
    pub features: FeatureVector,
    pub sampled: Label,
    pub log_prob: f64,
    pub realized: Label,
    pub reward: f64,
}

/// Draws an index from a probability vector with one uniform variate.
pub fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Samples one label per prompt for `n` prompts chosen without replacement
/// (in random order) and scores each with the reward model.
pub fn collect_rollouts(
    policy: &Policy,
    rm: &RewardModel,
    examples: &[Labeled],
    n: usize,
    seed: u64,
) -> Result<Vec<RolloutTuple>> {
    if n > examples.len() {
        return Err(Error::InvalidInput(format!(
            "asked for {n} rollouts from {} examples",
            examples.len()
        )));
    }
    let mut pick_rng = rng::seeded(derive_seed(seed, 0));
    let mut act_rng = rng::seeded(derive_seed(seed, 1));
    let chosen = rand::seq::index::sample(&mut pick_rng, examples.len(), n);
    let mut out = Vec::with_capacity(n);
    for i in chosen.iter() {
        let ex = &examples[i];
        let logp = policy.log_probs(&ex.features)?;
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let a = sample_index(&probs, &mut act_rng);
        let sampled = Label::POLICY[a];
        out.push(RolloutTuple {
            features: ex.features.clone(),
            sampled,
            log_prob: logp[a],
            realized: ex.label,
            reward: rm.score(&ex.features, sampled)?,
        });
    }
    Ok(out)
}

/// Running mean of shaped rewards across update calls.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningMean {
    sum: f64,
    count: usize,
}

impl RunningMean {
    pub fn push(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateDiagnostics {
    pub loss: f64,
    pub reward_mean: f64,
    /// Mean exact `KL(pi || ref)` over the rollout prompts after the update.
    pub kl_mean: f64,
    pub clip_frac: f64,
}

impl UpdateDiagnostics {
    pub fn row(&self, step: usize, acc: Option<f64>) -> MetricsRow {
        MetricsRow {
            step,
            loss: Some(self.loss),
            reward_mean: Some(self.reward_mean),
            kl_mean: Some(self.kl_mean),
            clip_frac: Some(self.clip_frac),
            acc,
        }
    }
}

fn policy_update(
    policy: &Policy,
    reference: &ReferencePolicy,
    rollouts: &[RolloutTuple],
    cfg: &TrainConfig,
    gamma: f64,
    baseline: &mut RunningMean,
) -> Result<(Policy, UpdateDiagnostics)> {
    cfg.validate()?;
    if rollouts.is_empty() {
        return Err(Error::InvalidInput("no rollouts".into()));
    }
    let mut shaped = Vec::with_capacity(rollouts.len());
    for r in rollouts {
        if !r.log_prob.is_finite() {
            return Err(Error::NonFinite("rollout log-probability".into()));
        }
        let ref_lp = reference.policy().log_probs(&r.features)?[r.sampled.policy_index()?];
        let v = r.reward - cfg.beta * (r.log_prob - ref_lp);
        shaped.push(v);
        if cfg.baseline == BaselineMode::RunningMean {
            baseline.push(v);
        }
    }
    let b = match cfg.baseline {
        BaselineMode::RunningMean => baseline.mean(),
        BaselineMode::None => 0.0,
    };
    let samples: Vec<SurrogateSample<'_>> = rollouts
        .iter()
        .zip(&shaped)
        .map(|(r, v)| SurrogateSample {
            features: &r.features,
            action: r.sampled,
            old_log_prob: r.log_prob,
            advantage: v - b,
        })
        .collect();
    let truths: Vec<Labeled> = if gamma > 0.0 {
        rollouts
            .iter()
            .map(|r| Labeled {
                features: r.features.clone(),
                label: r.realized,
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut policy = policy.clone();
    let mut opt = Optimizer::new(cfg, cfg.rl_learning_rate, policy.params().len());
    let mut rng = rng::seeded(cfg.seed);
    let (mut loss_sum, mut clip_sum, mut steps) = (0.0, 0.0, 0usize);
    for _ in 0..cfg.ppo_epochs {
        reference.verify()?;
        for batch in batches(samples.len(), cfg.batch_size, &mut rng) {
            let picked: Vec<SurrogateSample<'_>> =
                batch.iter().map(|&i| samples[i].clone()).collect();
            let (mut loss, mut grad, clip_frac) =
                ppo_surrogate_and_grad(&policy, &picked, cfg.clip_eps)?;
            if gamma > 0.0 {
                let mf_batch: Vec<Labeled> = batch.iter().map(|&i| truths[i].clone()).collect();
                let (mf, mf_grad) = mf_loss_and_grad(&policy, &mf_batch)?;
                loss += gamma * mf;
                grad.iter_mut().zip(&mf_grad).for_each(|(g, m)| *g += gamma * m);
            }
            steps += 1;
            ensure_finite("policy update", loss, &grad, steps)?;
            clip_grad_norm(&mut grad, cfg.grad_clip);
            opt.step(policy.params_mut(), &grad);
            loss_sum += loss;
            clip_sum += clip_frac;
        }
    }
    let mut kl = 0.0;
    for r in rollouts {
        kl += exact_kl(&policy, reference, &r.features)?;
    }
    let n = rollouts.len() as f64;
    let diag = UpdateDiagnostics {
        loss: if steps > 0 { loss_sum / steps as f64 } else { 0.0 },
        reward_mean: rollouts.iter().map(|r| r.reward).sum::<f64>() / n,
        kl_mean: kl / n,
        clip_frac: if steps > 0 { clip_sum / steps as f64 } else { 0.0 },
    };
    Ok((policy, diag))
}

/// Clipped-surrogate update on KL-shaped rewards.
pub fn ppo_update(
    policy: &Policy,
    reference: &ReferencePolicy,
    rollouts: &[RolloutTuple],
    cfg: &TrainConfig,
    baseline: &mut RunningMean,
) -> Result<(Policy, UpdateDiagnostics)> {
    policy_update(policy, reference, rollouts, cfg, 0.0, baseline)
}

/// [`ppo_update`] plus `cfg.gamma` times the Brier market-feedback loss on
/// the realized labels. With `gamma == 0` the two are bit-identical.
pub fn rlmf_update(
    policy: &Policy,
    reference: &ReferencePolicy,
    rollouts: &[RolloutTuple],
    cfg: &TrainConfig,
    baseline: &mut RunningMean,
) -> Result<(Policy, UpdateDiagnostics)> {
    policy_update(policy, reference, rollouts, cfg, cfg.gamma, baseline)
}

/// `rl_iterations` rounds of collect-then-update against a fixed reward
/// model. Uses [`rlmf_update`] when `with_feedback`, else [`ppo_update`].
pub fn train_rl(
    policy: &Policy,
    reference: &ReferencePolicy,
    rm: &RewardModel,
    data: &[Labeled],
    cfg: &TrainConfig,
    with_feedback: bool,
) -> Result<(Policy, Vec<MetricsRow>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("no prompts for RL".into()));
    }
    let mut policy = policy.clone();
    let mut baseline = RunningMean::default();
    let mut curve = Vec::with_capacity(cfg.rl_iterations);
    let n = cfg.rollout_size.min(data.len());
    for it in 0..cfg.rl_iterations {
        let rollouts = collect_rollouts(&policy, rm, data, n, derive_seed(cfg.seed, 2 * it as u64))?;
        let step_cfg = TrainConfig {
            seed: derive_seed(cfg.seed, 2 * it as u64 + 1),
            ..cfg.clone()
        };
        let (next, diag) = if with_feedback {
            rlmf_update(&policy, reference, &rollouts, &step_cfg, &mut baseline)?
        } else {
            ppo_update(&policy, reference, &rollouts, &step_cfg, &mut baseline)?
        };
        policy = next;
        curve.push(diag.row(it + 1, Some(accuracy(&policy, data)?)));
    }
    Ok((policy, curve))
}
