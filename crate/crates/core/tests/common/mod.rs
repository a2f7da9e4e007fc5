//! Constructed worlds shared by integration and acceptance tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regimelab::dataset::Label;
use regimelab::models::{Architecture, FeatureVector, Labeled, Network, PreferenceSample, RewardModel};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn fv(v: Vec<f64>) -> FeatureVector {
    FeatureVector::new(v).unwrap()
}

/// Three classes in the plane, labeled by the nearest of three directions
/// 120 degrees apart, with a margin band removed.
pub fn separable_points(n: usize, seed: u64) -> Vec<Labeled> {
    let mut r = rng(seed);
    let dirs: Vec<(f64, f64)> = (0..3)
        .map(|k| {
            let a = k as f64 * 2.0 * std::f64::consts::PI / 3.0;
            (a.cos(), a.sin())
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x = (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let mut scores: Vec<(f64, usize)> =
            dirs.iter().enumerate().map(|(k, d)| (d.0 * x.0 + d.1 * x.1, k)).collect();
        scores.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        if scores[0].0 - scores[1].0 < 0.2 {
            continue;
        }
        out.push(Labeled { features: fv(vec![x.0, x.1]), label: Label::POLICY[scores[0].1] });
    }
    out
}

/// Chosen is Rise when the first coordinate is positive, else Fall; the
/// rejected label is any other vocabulary entry.
pub fn separable_preferences(n: usize, dim: usize, seed: u64) -> Vec<PreferenceSample> {
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        if x[0].abs() < 0.05 {
            continue;
        }
        let chosen = if x[0] > 0.0 { Label::Rise } else { Label::Fall };
        let mut rejected = chosen;
        while rejected == chosen {
            rejected = Label::ALL[r.random_range(0..4)];
        }
        out.push(PreferenceSample { features: fv(x), chosen, rejected });
    }
    out
}

/// Balanced random pairs with no structure.
pub fn random_preferences(n: usize, dim: usize, seed: u64) -> Vec<PreferenceSample> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let chosen = Label::ALL[r.random_range(0..4)];
            let mut rejected = chosen;
            while rejected == chosen {
                rejected = Label::ALL[r.random_range(0..4)];
            }
            PreferenceSample {
                features: fv((0..dim).map(|_| r.random_range(-1.0..1.0)).collect()),
                chosen,
                rejected,
            }
        })
        .collect()
}

/// Linear reward model paying `bonus` for one label and 0 otherwise.
pub fn label_reward(feature_dim: usize, label: Label, bonus: f64) -> RewardModel {
    let input = feature_dim + 4;
    let mut params = vec![0.0; input + 1];
    params[feature_dim + label.index()] = bonus;
    RewardModel::from_network(Network::from_params(Architecture::Linear, input, 1, params).unwrap()).unwrap()
}

pub mod flip {
    use regimelab::adaptloop::*;
    use regimelab::dataset::{build_examples, make_preference_pairs, BuildConfig, NewsChannel};
    use regimelab::featurize::{compute_indicators, IndicatorConfig};
    use regimelab::market_sim::{inject_regime_shift, returns_to_ohlcv, RegimeParams, RegimeSpec};
    use regimelab::models::{Architecture, FeatureSpec};
    use regimelab::rng::derive_seed;

    pub const TRAIN_DAYS: usize = 1500;
    pub const DEPLOY_STEPS: usize = 400;
    pub const SHIFT_AT: usize = DEPLOY_STEPS / 2;
    pub const WINDOW: usize = 10;

    pub struct Outcome {
        pub adaptive: DeploymentLog,
        pub frozen: DeploymentLog,
    }

    pub struct World {
        pub teacher: regimelab::models::Policy,
        pub sft: regimelab::models::Policy,
        pub reward_model: regimelab::models::RewardModel,
        pub items: Vec<StreamItem>,
    }

    pub const DEPTH: usize = 1;

    /// Two persistent, noisy regimes with positive autocorrelation; halfway
    /// through deployment both autocorrelations change sign. A linear
    /// teacher is trained on the first `TRAIN_DAYS` examples.
    pub fn world(seed: u64) -> World {
        let depth = DEPTH;
        let phase = TrainingPhaseConfig { architecture: Architecture::Linear, ..Default::default() };
        let (calm, wild) = ((0.6, 1.0), (0.5, 1.5));
        let regimes = |sign: f64| {
            vec![RegimeParams::new(0.0, sign * calm.0, calm.1), RegimeParams::new(0.0, sign * wild.0, wild.1)]
        };
        let spec = RegimeSpec::new(
            regimes(1.0),
            vec![vec![0.99, 0.01], vec![0.02, 0.98]],
            vec![0.5, 0.5],
        )
        .unwrap();
        // examples start at day 2
        let horizon = TRAIN_DAYS + DEPLOY_STEPS + 2;
        let schedule = inject_regime_shift(&spec, 2 + TRAIN_DAYS + SHIFT_AT, regimes(-1.0)).unwrap();
        let sim = schedule.simulate(horizon, derive_seed(seed, 0)).unwrap();
        let series = returns_to_ohlcv(&sim.returns, 100.0, derive_seed(seed, 1)).unwrap();
        let ind = compute_indicators(&series, &IndicatorConfig::default()).unwrap();
        let build = BuildConfig { depth, news: NewsChannel { dim: 0, ..Default::default() } };
        let examples = build_examples(&series, &ind, Some(&sim.path), &build, derive_seed(seed, 2)).unwrap();
        let spec = FeatureSpec { depth, news_dim: 0 };
        let (train, deploy) = examples.split_at(TRAIN_DAYS);

        let data = labeled_examples(train, &spec).unwrap();
        let prefs = preference_samples(&make_preference_pairs(train, derive_seed(seed, 3)), &spec).unwrap();
        let phase = TrainingPhaseConfig { seed: derive_seed(seed, 4), ..phase };
        let out = run_training_phase(&phase, &data, &prefs, &CheckpointDir::default()).unwrap();
        let items: Vec<StreamItem> = deploy
            .iter()
            .enumerate()
            .map(|(i, e)| StreamItem {
                features: spec.encode(e).unwrap(),
                label: e.response,
                regime: Some(sim.path.states[i + TRAIN_DAYS + 2]),
            })
            .collect();
        World { teacher: out.teacher, sft: out.sft, reward_model: out.reward_model, items }
    }

    pub fn deploy(w: &World, cfg: &DeploymentConfig) -> Outcome {
        let cfg = &DeploymentConfig { window: WINDOW, ..cfg.clone() };
        let adaptive = run_deployment(&w.teacher, &w.reward_model, &mut FeedbackStream::new(w.items.clone()), cfg).unwrap();
        let frozen = run_frozen_baseline(&w.teacher, &mut FeedbackStream::new(w.items.clone()), cfg.window).unwrap();
        Outcome { adaptive, frozen }
    }
}

pub mod flip_report {
    use super::flip::*;
    use regimelab::adaptloop::DeploymentConfig;

    #[derive(Debug, Clone, Default)]
    pub struct FlipReport {
        pub pre_adaptive: f64,
        pub pre_frozen: f64,
        pub post_adaptive: f64,
        pub post_frozen: f64,
        /// Adaptive accuracy from the third post-shift window onward.
        pub settled_adaptive: f64,
        pub windows_adaptive: Vec<f64>,
        pub windows_frozen: Vec<f64>,
    }

    impl FlipReport {
        pub fn gap(&self) -> f64 {
            self.post_adaptive - self.post_frozen
        }

        /// Settled accuracy relative to the adaptive arm's own pre-shift accuracy.
        pub fn recovery(&self) -> f64 {
            self.settled_adaptive / self.pre_adaptive
        }
    }

    /// Runs both arms on each seed's world and averages.
    pub fn run(seeds: &[u64], cfg: &DeploymentConfig) -> FlipReport {
        let n = seeds.len() as f64;
        let windows = (DEPLOY_STEPS - SHIFT_AT) / WINDOW;
        let mut r = FlipReport {
            windows_adaptive: vec![0.0; windows],
            windows_frozen: vec![0.0; windows],
            ..Default::default()
        };
        for &seed in seeds {
            let w = world(seed);
            let o = deploy(&w, &DeploymentConfig { seed, ..cfg.clone() });
            let (a, f) = (&o.adaptive, &o.frozen);
            r.pre_adaptive += a.accuracy_over(0, SHIFT_AT).unwrap() / n;
            r.pre_frozen += f.accuracy_over(0, SHIFT_AT).unwrap() / n;
            r.post_adaptive += a.accuracy_over(SHIFT_AT, DEPLOY_STEPS).unwrap() / n;
            r.post_frozen += f.accuracy_over(SHIFT_AT, DEPLOY_STEPS).unwrap() / n;
            r.settled_adaptive += a.accuracy_over(SHIFT_AT + 3 * WINDOW, DEPLOY_STEPS).unwrap() / n;
            for k in 0..windows {
                let (lo, hi) = (SHIFT_AT + k * WINDOW, SHIFT_AT + (k + 1) * WINDOW);
                r.windows_adaptive[k] += a.accuracy_over(lo, hi).unwrap() / n;
                r.windows_frozen[k] += f.accuracy_over(lo, hi).unwrap() / n;
            }
        }
        r
    }
}

/// `k` isotropic Gaussian blobs in `d` dimensions with unit spread whose
/// centers sit `sep` apart along distinct axes. Returns rows and blob ids.
pub fn blobs(k: usize, per_blob: usize, d: usize, sep: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    use rand_distr::StandardNormal;
    let mut r = rng(seed);
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    for b in 0..k {
        for _ in 0..per_blob {
            let mut x: Vec<f64> = (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            x[b % d] += sep;
            rows.push(x);
            ids.push(b);
        }
    }
    (rows, ids)
}
