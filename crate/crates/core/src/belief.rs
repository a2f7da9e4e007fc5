//! Exact Bayesian belief filtering over a finite POMDP, plus a regime
//! filter that reads discretized simulator returns as observations.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_sim::RegimeSpec;

const TOL: f64 = 1e-12;

fn check_distribution(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidSpec(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > TOL {
        return Err(Error::InvalidSpec(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPomdp {
    transition: Vec<Vec<Vec<f64>>>,
    observation: Vec<Vec<f64>>,
    reward: Vec<f64>,
    discount: f64,
    initial: Vec<f64>,
}

/// `transition[s][a][s']`, `observation[s'][o]`. Sizes are implied by the
/// tensors and checked on construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPomdp")]
pub struct PomdpSpec {
    transition: Vec<Vec<Vec<f64>>>,
    observation: Vec<Vec<f64>>,
    reward: Vec<f64>,
    discount: f64,
    initial: Vec<f64>,
}

impl TryFrom<RawPomdp> for PomdpSpec {
    type Error = Error;

    fn try_from(r: RawPomdp) -> Result<Self> {
        PomdpSpec::new(r.transition, r.observation, r.reward, r.discount, r.initial)
    }
}

impl PomdpSpec {
    pub fn new(
        transition: Vec<Vec<Vec<f64>>>,
        observation: Vec<Vec<f64>>,
        reward: Vec<f64>,
        discount: f64,
        initial: Vec<f64>,
    ) -> Result<Self> {
        let s = transition.len();
        if s == 0 {
            return Err(Error::InvalidSpec("POMDP needs at least one state".into()));
        }
        let a = transition[0].len();
        if a == 0 {
            return Err(Error::InvalidSpec("POMDP needs at least one action".into()));
        }
        for (i, per_state) in transition.iter().enumerate() {
            if per_state.len() != a {
                return Err(Error::InvalidSpec(format!("state {i} has {} actions, expected {a}", per_state.len())));
            }
            for (j, row) in per_state.iter().enumerate() {
                if row.len() != s {
                    return Err(Error::DimensionMismatch { expected: s, got: row.len() });
                }
                check_distribution(row, &format!("transition[{i}][{j}]"))?;
            }
        }
        if observation.len() != s {
            return Err(Error::DimensionMismatch { expected: s, got: observation.len() });
        }
        let o = observation[0].len();
        if o == 0 {
            return Err(Error::InvalidSpec("POMDP needs at least one observation".into()));
        }
        for (i, row) in observation.iter().enumerate() {
            if row.len() != o {
                return Err(Error::DimensionMismatch { expected: o, got: row.len() });
            }
            check_distribution(row, &format!("observation[{i}]"))?;
        }
        if reward.len() != s {
            return Err(Error::DimensionMismatch { expected: s, got: reward.len() });
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidSpec("reward must be finite".into()));
        }
        if !(0.0..=1.0).contains(&discount) {
            return Err(Error::InvalidSpec(format!("discount {discount} outside [0, 1]")));
        }
        if initial.len() != s {
            return Err(Error::DimensionMismatch { expected: s, got: initial.len() });
        }
        check_distribution(&initial, "initial")?;
        Ok(Self { transition, observation, reward, discount, initial })
    }

    pub fn num_states(&self) -> usize {
        self.transition.len()
    }

    pub fn num_actions(&self) -> usize {
        self.transition[0].len()
    }

    pub fn num_observations(&self) -> usize {
        self.observation[0].len()
    }

    pub fn transition(&self) -> &[Vec<Vec<f64>>] {
        &self.transition
    }

    pub fn observation(&self) -> &[Vec<f64>] {
        &self.observation
    }

    pub fn reward(&self) -> &[f64] {
        &self.reward
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn initial_belief(&self) -> Belief {
        Belief(self.initial.clone())
    }

    fn check_indices(&self, b: &Belief, action: usize, obs: usize) -> Result<()> {
        if b.0.len() != self.num_states() {
            return Err(Error::DimensionMismatch { expected: self.num_states(), got: b.0.len() });
        }
        if action >= self.num_actions() {
            return Err(Error::InvalidInput(format!("action {action} out of range")));
        }
        if obs >= self.num_observations() {
            return Err(Error::InvalidInput(format!("observation {obs} out of range")));
        }
        Ok(())
    }

    /// Unnormalized posterior `omega(s', o) * sum_s T(s, a, s') b(s)`.
    fn joint(&self, b: &Belief, action: usize, obs: usize) -> Vec<f64> {
        (0..self.num_states())
            .map(|next| {
                let prior: f64 = b.0.iter().enumerate().map(|(s, &p)| self.transition[s][action][next] * p).sum();
                self.observation[next][obs] * prior
            })
            .collect()
    }

    /// `P(o | b, a)`.
    pub fn obs_likelihood(&self, b: &Belief, action: usize, obs: usize) -> Result<f64> {
        self.check_indices(b, action, obs)?;
        Ok(self.joint(b, action, obs).iter().sum())
    }

    pub fn update(&self, b: &Belief, action: usize, obs: usize) -> Result<Belief> {
        self.check_indices(b, action, obs)?;
        let joint = self.joint(b, action, obs);
        let z: f64 = joint.iter().sum();
        if z <= 0.0 || !z.is_finite() {
            return Err(Error::ZeroProbability(format!("observation {obs} under action {action}")));
        }
        Ok(Belief(joint.into_iter().map(|p| p / z).collect()))
    }
}

/// A probability vector over states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Belief(Vec<f64>);

impl Belief {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        check_distribution(&p, "belief")?;
        Ok(Self(p))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

pub fn obs_likelihood(b: &Belief, action: usize, obs: usize, spec: &PomdpSpec) -> Result<f64> {
    spec.obs_likelihood(b, action, obs)
}

pub fn belief_update(b: &Belief, action: usize, obs: usize, spec: &PomdpSpec) -> Result<Belief> {
    spec.update(b, action, obs)
}

pub fn write_beliefs_csv<W: Write>(beliefs: &[Belief], mut w: W) -> Result<()> {
    let k = beliefs.first().map_or(0, |b| b.0.len());
    let header: Vec<String> = std::iter::once("step".to_string()).chain((0..k).map(|s| format!("b{s}"))).collect();
    writeln!(w, "{}", header.join(","))?;
    for (t, b) in beliefs.iter().enumerate() {
        let row: Vec<String> = b.0.iter().map(|p| format!("{p:.12}")).collect();
        writeln!(w, "{t},{}", row.join(","))?;
    }
    Ok(())
}

fn normal_cdf(x: f64, mean: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return if x >= mean { 1.0 } else { 0.0 };
    }
    0.5 * (1.0 + libm::erf((x - mean) / (sd * std::f64::consts::SQRT_2)))
}

/// Regime filter over a simulator spec. Each return is binned by `edges`;
/// the observation model uses each regime's stationary Gaussian marginal,
/// so serial correlation within a regime is ignored.
#[derive(Debug, Clone)]
pub struct RegimeFilter {
    pomdp: PomdpSpec,
    edges: Vec<f64>,
}

/// Floor on bin probabilities so that a tail draw never zeroes the belief.
const OBS_FLOOR: f64 = 1e-9;

impl RegimeFilter {
    pub fn new(spec: &RegimeSpec, edges: Vec<f64>) -> Result<Self> {
        if edges.windows(2).any(|w| w[0] >= w[1]) || edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidSpec("bin edges must be finite and strictly increasing".into()));
        }
        let observation: Vec<Vec<f64>> = spec
            .params()
            .iter()
            .map(|p| {
                let mean = p.mu / (1.0 - p.phi);
                let sd = p.sigma / (1.0 - p.phi * p.phi).sqrt();
                let mut cuts = vec![0.0];
                cuts.extend(edges.iter().map(|&e| normal_cdf(e, mean, sd)));
                cuts.push(1.0);
                let raw: Vec<f64> = cuts.windows(2).map(|w| (w[1] - w[0]).max(0.0) + OBS_FLOOR).collect();
                let z: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / z).collect()
            })
            .collect();
        let transition = spec.transition().iter().map(|row| vec![row.clone()]).collect();
        let k = spec.num_regimes();
        let pomdp = PomdpSpec::new(transition, observation, vec![0.0; k], 0.0, spec.initial().to_vec())?;
        Ok(Self { pomdp, edges })
    }

    /// `bins` equal-width bins spanning three stationary deviations around
    /// the extreme regime means.
    pub fn with_bins(spec: &RegimeSpec, bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::InvalidSpec("need at least two bins".into()));
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in spec.params() {
            let mean = p.mu / (1.0 - p.phi);
            let sd = p.sigma / (1.0 - p.phi * p.phi).sqrt();
            lo = lo.min(mean - 3.0 * sd);
            hi = hi.max(mean + 3.0 * sd);
        }
        if hi <= lo {
            hi = lo + 1.0;
        }
        let edges = (1..bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
        Self::new(spec, edges)
    }

    pub fn pomdp(&self) -> &PomdpSpec {
        &self.pomdp
    }

    pub fn bin(&self, x: f64) -> usize {
        self.edges.partition_point(|&e| e <= x)
    }

    /// Posterior after each return. The first update starts from the
    /// prior pushed one step through the chain.
    pub fn filter(&self, returns: &[f64]) -> Result<Vec<Belief>> {
        let mut b = self.pomdp.initial_belief();
        returns
            .iter()
            .map(|&r| {
                b = self.pomdp.update(&b, 0, self.bin(r))?;
                Ok(b.clone())
            })
            .collect()
    }

    /// Mean posterior mass on the true regime after `burn_in` steps.
    pub fn mass_on_truth(&self, returns: &[f64], truth: &[usize], burn_in: usize) -> Result<f64> {
        if returns.len() != truth.len() {
            return Err(Error::DimensionMismatch { expected: returns.len(), got: truth.len() });
        }
        if burn_in >= returns.len() {
            return Err(Error::InvalidInput("burn-in covers the whole trajectory".into()));
        }
        let beliefs = self.filter(returns)?;
        let mass: f64 = beliefs[burn_in..].iter().zip(&truth[burn_in..]).map(|(b, &s)| b.0[s]).sum();
        Ok(mass / (returns.len() - burn_in) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state(omega: [[f64; 2]; 2]) -> PomdpSpec {
        PomdpSpec::new(
            vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]],
            omega.iter().map(|r| r.to_vec()).collect(),
            vec![0.0, 0.0],
            0.9,
            vec![0.5, 0.5],
        )
        .unwrap()
    }

    #[test]
    fn hand_case() {
        let spec = two_state([[0.9, 0.1], [0.2, 0.8]]);
        let b = spec.update(&Belief::uniform(2), 0, 0).unwrap();
        assert!((b.probs()[0] - 0.9 / 1.1).abs() < 1e-12);
        assert!((b.probs()[1] - 0.2 / 1.1).abs() < 1e-12);
        assert!((spec.obs_likelihood(&Belief::uniform(2), 0, 0).unwrap() - 0.55).abs() < 1e-12);
    }

    #[test]
    fn impossible_observation_is_an_error() {
        let spec = two_state([[1.0, 0.0], [1.0, 0.0]]);
        let err = spec.update(&Belief::uniform(2), 0, 1).unwrap_err();
        assert!(matches!(err, Error::ZeroProbability(_)));
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let r = PomdpSpec::new(vec![vec![vec![0.5, 0.4]], vec![vec![0.0, 1.0]]], vec![vec![1.0], vec![1.0]], vec![0.0; 2], 0.5, vec![0.5, 0.5]);
        assert!(r.is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = two_state([[0.9, 0.1], [0.2, 0.8]]);
        let text = serde_json::to_string(&spec).unwrap();
        let back: PomdpSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(spec, back);
        assert!(serde_json::from_str::<PomdpSpec>(&text.replace("0.9,", "0.8,")).is_err());
    }

    #[test]
    fn binning() {
        let spec = RegimeSpec::single(crate::market_sim::RegimeParams::new(0.0, 0.0, 1.0)).unwrap();
        let f = RegimeFilter::new(&spec, vec![-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(f.bin(-5.0), 0);
        assert_eq!(f.bin(-1.0), 1);
        assert_eq!(f.bin(0.5), 2);
        assert_eq!(f.bin(3.0), 3);
    }
}
