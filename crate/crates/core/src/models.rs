//! Small differentiable models: a categorical movement policy, its frozen
//! reference snapshot, and a scalar reward model over (features, label).
//!
//! Parameters live in one flat `Vec<f64>` per network so optimizers,
//! finite-difference checks and checkpoints all see the same layout:
//!
//! * `Linear`: `W[out][in]` row-major, then `b[out]`.
//! * `Mlp { hidden }`: `W1[hidden][in]`, `b1[hidden]`, `W2[out][hidden]`,
//!   `b2[out]`, with a tanh hidden layer.
//!
//! Every loss below returns its value together with the exact gradient with
//! respect to the flat parameter vector.

use std::fmt;
use std::io::{Read, Write};
use std::ops::Deref;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Example, Label};
use crate::error::{Error, Result};
use crate::market_sim::hex_digest;
use crate::rng;

pub const POLICY_OUTPUTS: usize = 3;
pub const RM_VOCAB: usize = 4;
const INIT_STD: f64 = 0.02;

/// Dense real input to the policy and reward model.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature {i} is {}", values[i])));
        }
        Ok(Self(values))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for FeatureVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// How an [`Example`] is flattened into a [`FeatureVector`].
///
/// Each of the last `depth` context days contributes eight normalized
/// columns (missing days and absent indicators read 0), followed by the
/// news embedding when `news_dim > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSpec {
    pub depth: usize,
    pub news_dim: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            depth: 10,
            news_dim: 8,
        }
    }
}

pub const COLUMNS_PER_DAY: usize = 8;

impl FeatureSpec {
    pub fn dim(&self) -> usize {
        self.depth * COLUMNS_PER_DAY + self.news_dim
    }

    pub fn encode(&self, example: &Example) -> Result<FeatureVector> {
        let mut out = vec![0.0; self.dim()];
        let rows = &example.context.rows;
        let used = rows.len().min(self.depth);
        let offset = self.depth - used;
        for (slot, row) in rows[rows.len() - used..].iter().enumerate() {
            let c = row.close;
            let cols = [
                row.pct_change.unwrap_or(0.0),
                row.macd.map_or(0.0, |m| m / c * 100.0),
                match (row.boll_up, row.boll_low) {
                    (Some(u), Some(l)) if u > l => (c - (u + l) / 2.0) / ((u - l) / 2.0),
                    _ => 0.0,
                },
                row.rsi30.map_or(0.0, |r| (r - 50.0) / 50.0),
                row.cci30.map_or(0.0, |v| v / 100.0),
                row.dx30.map_or(0.0, |v| v / 100.0),
                row.sma30.map_or(0.0, |s| (c - s) / s * 100.0),
                row.sma60.map_or(0.0, |s| (c - s) / s * 100.0),
            ];
            let base = (offset + slot) * COLUMNS_PER_DAY;
            out[base..base + COLUMNS_PER_DAY].copy_from_slice(&cols);
        }
        if self.news_dim > 0 {
            let news = example.news_embedding.as_ref().ok_or_else(|| {
                Error::InvalidInput(format!("{} has no news embedding", example.id))
            })?;
            if news.len() != self.news_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.news_dim,
                    got: news.len(),
                });
            }
            out[self.depth * COLUMNS_PER_DAY..].copy_from_slice(news);
        }
        FeatureVector::new(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    Linear,
    Mlp { hidden: usize },
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Linear => write!(f, "linear"),
            Architecture::Mlp { hidden } => write!(f, "mlp hidden={hidden}"),
        }
    }
}

/// Feed-forward network over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Architecture,
    input_dim: usize,
    output_dim: usize,
    params: Vec<f64>,
}

struct Activations {
    hidden: Vec<f64>,
    output: Vec<f64>,
}

impl Network {
    pub fn param_count(arch: Architecture, input_dim: usize, output_dim: usize) -> usize {
        match arch {
            Architecture::Linear => output_dim * input_dim + output_dim,
            Architecture::Mlp { hidden } => {
                hidden * input_dim + hidden + output_dim * hidden + output_dim
            }
        }
    }

    pub fn zeros(arch: Architecture, input_dim: usize, output_dim: usize) -> Self {
        Self {
            arch,
            input_dim,
            output_dim,
            params: vec![0.0; Self::param_count(arch, input_dim, output_dim)],
        }
    }

    /// Weights ~ N(0, 0.02^2), biases 0.
    pub fn init(arch: Architecture, input_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut net = Self::zeros(arch, input_dim, output_dim);
        let mut rng = rng::seeded(seed);
        for range in net.weight_ranges() {
            for w in &mut net.params[range] {
                *w = INIT_STD * rng.sample::<f64, _>(StandardNormal);
            }
        }
        net
    }

    pub fn from_params(
        arch: Architecture,
        input_dim: usize,
        output_dim: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let expected = Self::param_count(arch, input_dim, output_dim);
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: params.len(),
            });
        }
        Ok(Self {
            arch,
            input_dim,
            output_dim,
            params,
        })
    }

    #[allow(clippy::single_range_in_vec_init)]
    fn weight_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let (i, o) = (self.input_dim, self.output_dim);
        match self.arch {
            Architecture::Linear => vec![0..o * i],
            Architecture::Mlp { hidden: h } => {
                let w2 = h * i + h;
                vec![0..h * i, w2..w2 + o * h]
            }
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
        b.iter()
            .enumerate()
            .map(|(r, bias)| {
                let row = &w[r * x.len()..(r + 1) * x.len()];
                bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    fn activations(&self, x: &[f64]) -> Activations {
        let (i, o) = (self.input_dim, self.output_dim);
        let p = &self.params;
        match self.arch {
            Architecture::Linear => Activations {
                hidden: Vec::new(),
                output: Self::affine(&p[..o * i], &p[o * i..o * i + o], x),
            },
            Architecture::Mlp { hidden: h } => {
                let b1 = h * i;
                let w2 = b1 + h;
                let b2 = w2 + o * h;
                let hidden: Vec<f64> = Self::affine(&p[..b1], &p[b1..w2], x)
                    .into_iter()
                    .map(f64::tanh)
                    .collect();
                let output = Self::affine(&p[w2..b2], &p[b2..b2 + o], &hidden);
                Activations { hidden, output }
            }
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.activations(x).output)
    }

    /// Adds `d loss / d params` to `grad` given `d loss / d output`.
    fn backward(&self, x: &[f64], act: &Activations, d_out: &[f64], grad: &mut [f64]) {
        let (i, o) = (self.input_dim, self.output_dim);
        match self.arch {
            Architecture::Linear => {
                for r in 0..o {
                    for (g, xv) in grad[r * i..(r + 1) * i].iter_mut().zip(x) {
                        *g += d_out[r] * xv;
                    }
                    grad[o * i + r] += d_out[r];
                }
            }
            Architecture::Mlp { hidden: h } => {
                let b1 = h * i;
                let w2 = b1 + h;
                let b2 = w2 + o * h;
                let mut d_hidden = vec![0.0; h];
                for r in 0..o {
                    for j in 0..h {
                        grad[w2 + r * h + j] += d_out[r] * act.hidden[j];
                        d_hidden[j] += d_out[r] * self.params[w2 + r * h + j];
                    }
                    grad[b2 + r] += d_out[r];
                }
                for j in 0..h {
                    let dz = d_hidden[j] * (1.0 - act.hidden[j] * act.hidden[j]);
                    for (g, xv) in grad[j * i..(j + 1) * i].iter_mut().zip(x) {
                        *g += dz * xv;
                    }
                    grad[b1 + j] += dz;
                }
            }
        }
    }

    fn descriptor(&self, kind: &str) -> String {
        format!(
            "kind={kind} arch={} input={} output={} params={}",
            match self.arch {
                Architecture::Linear => "linear".to_string(),
                Architecture::Mlp { hidden } => format!("mlp:{hidden}"),
            },
            self.input_dim,
            self.output_dim,
            self.params.len()
        )
    }

    fn hash(&self, kind: &str) -> String {
        let mut bytes = self.descriptor(kind).into_bytes();
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        hex_digest(&bytes)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Categorical policy over the three movement labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    net: Network,
}

impl Policy {
    pub fn new(arch: Architecture, input_dim: usize, seed: u64) -> Self {
        Self {
            net: Network::init(arch, input_dim, POLICY_OUTPUTS, seed),
        }
    }

    pub fn zeros(arch: Architecture, input_dim: usize) -> Self {
        Self {
            net: Network::zeros(arch, input_dim, POLICY_OUTPUTS),
        }
    }

    pub fn from_network(net: Network) -> Result<Self> {
        if net.output_dim != POLICY_OUTPUTS {
            return Err(Error::DimensionMismatch {
                expected: POLICY_OUTPUTS,
                got: net.output_dim,
            });
        }
        Ok(Self { net })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim
    }

    pub fn logits(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(f)
    }

    /// `pi(. | f)` in [`Label::POLICY`] order.
    pub fn probs(&self, f: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(f)?))
    }

    pub fn log_probs(&self, f: &[f64]) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.logits(f)?))
    }

    /// Most probable label; ties go to the earlier label.
    pub fn predict(&self, f: &[f64]) -> Result<Label> {
        let logits = self.logits(f)?;
        let mut best = 0;
        for (i, l) in logits.iter().enumerate() {
            if *l > logits[best] {
                best = i;
            }
        }
        Ok(Label::POLICY[best])
    }

    pub fn content_hash(&self) -> String {
        self.net.hash("policy")
    }
}

/// Frozen snapshot of a policy. There is no mutable access to the wrapped
/// parameters; [`ReferencePolicy::verify`] re-hashes them.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolicy {
    policy: Policy,
    hash: String,
}

impl ReferencePolicy {
    pub fn snapshot(policy: &Policy) -> Self {
        Self {
            hash: policy.content_hash(),
            policy: policy.clone(),
        }
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn verify(&self) -> Result<()> {
        if self.policy.content_hash() != self.hash {
            return Err(Error::InvalidInput("reference policy was mutated".into()));
        }
        Ok(())
    }
}

/// Scalar scorer `r(f, label)` over the four-label vocabulary. The input is
/// the feature vector followed by a one-hot label.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    net: Network,
}

impl RewardModel {
    pub fn new(arch: Architecture, feature_dim: usize, seed: u64) -> Self {
        Self {
            net: Network::init(arch, feature_dim + RM_VOCAB, 1, seed),
        }
    }

    pub fn zeros(arch: Architecture, feature_dim: usize) -> Self {
        Self {
            net: Network::zeros(arch, feature_dim + RM_VOCAB, 1),
        }
    }

    /// A one-hidden-layer reward model of width `hidden`. A linear scorer
    /// would rank labels the same way for every input, so the reward model is
    /// always an MLP. When the policy is an MLP of the same width, its
    /// hidden-layer weights for the feature inputs (and their biases) are
    /// copied; label inputs and the scalar head start fresh.
    pub fn from_policy(policy: &Policy, hidden: usize, seed: u64) -> Self {
        let d = policy.input_dim();
        let mut rm = Self::new(Architecture::Mlp { hidden }, d, seed);
        if policy.net.arch == (Architecture::Mlp { hidden }) {
            let h = hidden;
            let src = policy.params();
            let dst = rm.net.params_mut();
            let rm_in = d + RM_VOCAB;
            for j in 0..h {
                dst[j * rm_in..j * rm_in + d].copy_from_slice(&src[j * d..(j + 1) * d]);
            }
            dst[h * rm_in..h * rm_in + h].copy_from_slice(&src[h * d..h * d + h]);
        }
        rm
    }

    pub fn from_network(net: Network) -> Result<Self> {
        if net.output_dim != 1 || net.input_dim < RM_VOCAB {
            return Err(Error::InvalidInput(
                "reward network must map features+4 inputs to one output".into(),
            ));
        }
        Ok(Self { net })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }

    pub fn feature_dim(&self) -> usize {
        self.net.input_dim - RM_VOCAB
    }

    fn input(&self, f: &[f64], label: Label) -> Result<Vec<f64>> {
        if f.len() != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim(),
                got: f.len(),
            });
        }
        let mut x = Vec::with_capacity(self.net.input_dim);
        x.extend_from_slice(f);
        x.extend((0..RM_VOCAB).map(|i| if i == label.index() { 1.0 } else { 0.0 }));
        Ok(x)
    }

    pub fn score(&self, f: &[f64], label: Label) -> Result<f64> {
        let x = self.input(f, label)?;
        Ok(self.net.activations(&x).output[0])
    }

    pub fn content_hash(&self) -> String {
        self.net.hash("reward")
    }
}

/// A feature vector with its realized label.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeled {
    pub features: FeatureVector,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceSample {
    pub features: FeatureVector,
    pub chosen: Label,
    pub rejected: Label,
}

/// One term of the clipped surrogate: an action taken at collection time,
/// its log-probability then, and its advantage.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateSample<'a> {
    pub features: &'a [f64],
    pub action: Label,
    pub old_log_prob: f64,
    pub advantage: f64,
}

fn non_empty<T>(batch: &[T]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    Ok(())
}

/// Mean of `-log pi(label | f)`.
pub fn sft_loss_and_grad(policy: &Policy, batch: &[Labeled]) -> Result<(f64, Vec<f64>)> {
    non_empty(batch)?;
    let mut grad = vec![0.0; policy.params().len()];
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for s in batch {
        let y = s.label.policy_index()?;
        policy.net.check_input(&s.features)?;
        let act = policy.net.activations(&s.features);
        let logp = log_softmax(&act.output);
        loss -= logp[y];
        let d_out: Vec<f64> = logp
            .iter()
            .enumerate()
            .map(|(k, lp)| scale * (lp.exp() - if k == y { 1.0 } else { 0.0 }))
            .collect();
        policy.net.backward(&s.features, &act, &d_out, &mut grad);
    }
    Ok((loss * scale, grad))
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean of `-log sigmoid(r(f, chosen) - r(f, rejected))`.
pub fn rm_loss_and_grad(rm: &RewardModel, batch: &[PreferenceSample]) -> Result<(f64, Vec<f64>)> {
    non_empty(batch)?;
    let mut grad = vec![0.0; rm.params().len()];
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for s in batch {
        if s.chosen == s.rejected {
            return Err(Error::InvalidInput(format!(
                "degenerate preference pair ({} vs {})",
                s.chosen, s.rejected
            )));
        }
        let xw = rm.input(&s.features, s.chosen)?;
        let xl = rm.input(&s.features, s.rejected)?;
        let aw = rm.net.activations(&xw);
        let al = rm.net.activations(&xl);
        let margin = aw.output[0] - al.output[0];
        loss += softplus(-margin);
        // d/dmargin of softplus(-margin) = -sigmoid(-margin)
        let g = -sigmoid(-margin) * scale;
        rm.net.backward(&xw, &aw, &[g], &mut grad);
        rm.net.backward(&xl, &al, &[-g], &mut grad);
    }
    Ok((loss * scale, grad))
}

/// Mean squared distance between `pi(. | f)` and the one-hot truth.
pub fn mf_loss_and_grad(policy: &Policy, batch: &[Labeled]) -> Result<(f64, Vec<f64>)> {
    non_empty(batch)?;
    let mut grad = vec![0.0; policy.params().len()];
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for s in batch {
        let y = s.label.policy_index()?;
        policy.net.check_input(&s.features)?;
        let act = policy.net.activations(&s.features);
        let p = softmax(&act.output);
        let g: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(k, pk)| 2.0 * (pk - if k == y { 1.0 } else { 0.0 }))
            .collect();
        loss += g.iter().map(|v| v * v / 4.0).sum::<f64>();
        // softmax Jacobian: dL/dz_i = p_i (g_i - sum_j p_j g_j)
        let pg: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
        let d_out: Vec<f64> = p
            .iter()
            .zip(&g)
            .map(|(pi, gi)| scale * pi * (gi - pg))
            .collect();
        policy.net.backward(&s.features, &act, &d_out, &mut grad);
    }
    Ok((loss * scale, grad))
}

/// Mean squared distance between the argmax one-hot prediction and the
/// truth: 0 when correct, 2 when wrong. Not differentiable.
pub fn mf_loss_hard(policy: &Policy, batch: &[Labeled]) -> Result<f64> {
    non_empty(batch)?;
    let mut wrong = 0usize;
    for s in batch {
        s.label.policy_index()?;
        if policy.predict(&s.features)? != s.label {
            wrong += 1;
        }
    }
    Ok(2.0 * wrong as f64 / batch.len() as f64)
}

/// `log pi(label | f) - log pi_ref(label | f)`.
pub fn kl_term(policy: &Policy, reference: &ReferencePolicy, f: &[f64], label: Label) -> Result<f64> {
    let k = label.policy_index()?;
    Ok(policy.log_probs(f)?[k] - reference.policy().log_probs(f)?[k])
}

/// `KL(p || q)` for strictly positive categorical distributions.
pub fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

/// Exact `KL(pi(. | f) || pi_ref(. | f))`.
pub fn exact_kl(policy: &Policy, reference: &ReferencePolicy, f: &[f64]) -> Result<f64> {
    Ok(categorical_kl(&policy.probs(f)?, &reference.policy().probs(f)?))
}

/// Negative mean clipped surrogate `min(rho A, clip(rho, 1-eps, 1+eps) A)`
/// with `rho = pi(a|f) / pi_old(a|f)`, plus the fraction of samples whose
/// clipped branch is active.
pub fn ppo_surrogate_and_grad(
    policy: &Policy,
    batch: &[SurrogateSample<'_>],
    clip_eps: f64,
) -> Result<(f64, Vec<f64>, f64)> {
    non_empty(batch)?;
    let mut grad = vec![0.0; policy.params().len()];
    let mut objective = 0.0;
    let mut clipped = 0usize;
    let scale = 1.0 / batch.len() as f64;
    for s in batch {
        let a = s.action.policy_index()?;
        policy.net.check_input(s.features)?;
        let act = policy.net.activations(s.features);
        let logp = log_softmax(&act.output);
        let ratio = (logp[a] - s.old_log_prob).exp();
        let unclipped = ratio * s.advantage;
        let bounded = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * s.advantage;
        if bounded < unclipped {
            objective += bounded;
            clipped += 1;
            continue;
        }
        objective += unclipped;
        // d(-rho A)/dz_k = -A rho (1[k = a] - p_k)
        let coef = -s.advantage * ratio * scale;
        let d_out: Vec<f64> = logp
            .iter()
            .enumerate()
            .map(|(k, lp)| coef * (if k == a { 1.0 } else { 0.0 } - lp.exp()))
            .collect();
        policy.net.backward(s.features, &act, &d_out, &mut grad);
    }
    Ok((-objective * scale, grad, clipped as f64 * scale))
}

const CKPT_MAGIC: &str = "REGIMELAB-CKPT";
const CKPT_VERSION: u32 = 1;

/// What a checkpoint holds.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Policy(Policy),
    Reward(RewardModel),
}

impl Checkpoint {
    fn parts(&self) -> (&'static str, &Network) {
        match self {
            Checkpoint::Policy(p) => ("policy", &p.net),
            Checkpoint::Reward(r) => ("reward", &r.net),
        }
    }

    /// Header lines `magic`, `version N`, descriptor; then the parameters as
    /// little-endian f64 in layout order.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let (kind, net) = self.parts();
        writeln!(w, "{CKPT_MAGIC}")?;
        writeln!(w, "version {CKPT_VERSION}")?;
        writeln!(w, "{}", net.descriptor(kind))?;
        for p in &net.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cursor = 0;
        let mut next_line = || -> Result<String> {
            let end = bytes[cursor..]
                .iter()
                .position(|b| *b == b'\n')
                .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
            let line = std::str::from_utf8(&bytes[cursor..cursor + end])
                .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?
                .to_string();
            cursor += end + 1;
            Ok(line)
        };
        if next_line()? != CKPT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = next_line()?;
        if version != format!("version {CKPT_VERSION}") {
            return Err(Error::Checkpoint(format!("unsupported {version:?}")));
        }
        let descriptor = next_line()?;
        let mut kind = None;
        let mut arch = None;
        let mut input = None;
        let mut output = None;
        let mut count = None;
        for field in descriptor.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad descriptor field {field:?}")))?;
            let num = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::Checkpoint(format!("bad number {v:?}")))
            };
            match k {
                "kind" => kind = Some(v.to_string()),
                "arch" => {
                    arch = Some(match v.split_once(':') {
                        None if v == "linear" => Architecture::Linear,
                        Some(("mlp", h)) => Architecture::Mlp { hidden: num(h)? },
                        _ => return Err(Error::Checkpoint(format!("unknown arch {v:?}"))),
                    })
                }
                "input" => input = Some(num(v)?),
                "output" => output = Some(num(v)?),
                "params" => count = Some(num(v)?),
                _ => return Err(Error::Checkpoint(format!("unknown field {k:?}"))),
            }
        }
        let missing = || Error::Checkpoint("incomplete descriptor".into());
        let (kind, arch) = (kind.ok_or_else(missing)?, arch.ok_or_else(missing)?);
        let (input, output, count) = (
            input.ok_or_else(missing)?,
            output.ok_or_else(missing)?,
            count.ok_or_else(missing)?,
        );
        let expected = Network::param_count(arch, input, output);
        if count != expected {
            return Err(Error::Checkpoint(format!(
                "descriptor claims {count} params, architecture needs {expected}"
            )));
        }
        let body = &bytes[cursor..];
        if body.len() != count * 8 {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                count * 8,
                body.len()
            )));
        }
        let params = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let net = Network::from_params(arch, input, output, params)?;
        match kind.as_str() {
            "policy" => Ok(Checkpoint::Policy(
                Policy::from_network(net).map_err(|e| Error::Checkpoint(e.to_string()))?,
            )),
            "reward" => Ok(Checkpoint::Reward(
                RewardModel::from_network(net).map_err(|e| Error::Checkpoint(e.to_string()))?,
            )),
            other => Err(Error::Checkpoint(format!("unknown model kind {other:?}"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, |w| self.write_to(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Loads a policy checkpoint, optionally insisting on an input dimension.
pub fn load_policy(path: &Path, input_dim: Option<usize>) -> Result<Policy> {
    match Checkpoint::load(path)? {
        Checkpoint::Policy(p) => {
            if let Some(d) = input_dim.filter(|d| *d != p.input_dim()) {
                return Err(Error::Checkpoint(format!(
                    "policy expects {} features, configuration produces {d}",
                    p.input_dim()
                )));
            }
            Ok(p)
        }
        Checkpoint::Reward(_) => Err(Error::Checkpoint(format!(
            "{} holds a reward model, not a policy",
            path.display()
        ))),
    }
}

pub fn load_reward_model(path: &Path, feature_dim: Option<usize>) -> Result<RewardModel> {
    match Checkpoint::load(path)? {
        Checkpoint::Reward(r) => {
            if let Some(d) = feature_dim.filter(|d| *d != r.feature_dim()) {
                return Err(Error::Checkpoint(format!(
                    "reward model expects {} features, configuration produces {d}",
                    r.feature_dim()
                )));
            }
            Ok(r)
        }
        Checkpoint::Policy(_) => Err(Error::Checkpoint(format!(
            "{} holds a policy, not a reward model",
            path.display()
        ))),
    }
}

pub fn save_policy(path: &Path, policy: &Policy) -> Result<()> {
    Checkpoint::Policy(policy.clone()).save(path)
}

pub fn save_reward_model(path: &Path, rm: &RewardModel) -> Result<()> {
    Checkpoint::Reward(rm.clone()).save(path)
}
