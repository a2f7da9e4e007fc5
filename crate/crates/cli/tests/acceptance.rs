//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the report is always printed.

#[path = "../../core/tests/common/mod.rs"]
mod common;
mod support;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use common::*;
use regimelab::adaptloop::DeploymentConfig;
use regimelab::belief::*;
use regimelab::dataset::*;
use regimelab::featurize::{compute_indicators, IndicatorConfig};
use regimelab::igtools::*;
use regimelab::market_sim::*;
use regimelab::metrics::{accuracy_indices, f1_indices, mcc_indices, ConfusionMatrix, F1Average};
use regimelab::models::*;
use regimelab::trainer::*;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let took = start.elapsed();
    ensure!(took <= limit, "took {took:.1?}, limit {limit:?}");
    Ok(took)
}

// ---- gradients ----

const STEP: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Errors of one instance: the relative error of the whole gradient vector,
/// and the worst single component.
#[derive(Clone, Copy, Default)]
struct FdError {
    vector: f64,
    component: f64,
}

impl FdError {
    fn max(self, o: FdError) -> FdError {
        FdError { vector: self.vector.max(o.vector), component: self.component.max(o.component) }
    }
}

fn fd_error<F: FnMut(&[f64]) -> f64>(params: &[f64], grad: &[f64], mut loss: F) -> FdError {
    let mut p = params.to_vec();
    let mut component: f64 = 0.0;
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + STEP;
        let up = loss(&p);
        p[i] = orig - STEP;
        let down = loss(&p);
        p[i] = orig;
        let num = (up - down) / (2.0 * STEP);
        component = component.max(rel_err(grad[i], num));
        diff += (grad[i] - num).powi(2);
        na += grad[i].powi(2);
        nn += num.powi(2);
    }
    let scale = na.sqrt().max(nn.sqrt()).max(1e-12);
    FdError { vector: diff.sqrt() / scale, component }
}

fn random_net(r: &mut ChaCha8Rng, input: usize, output: usize) -> Network {
    let arch = if r.random_bool(0.3) { Architecture::Linear } else { Architecture::Mlp { hidden: r.random_range(1..=16) } };
    let n = Network::param_count(arch, input, output);
    Network::from_params(arch, input, output, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_features(r: &mut ChaCha8Rng, dim: usize) -> FeatureVector {
    fv((0..dim).map(|_| r.random_range(-2.0..2.0)).collect())
}

fn policy_with(policy: &Policy, p: &[f64]) -> Policy {
    let net = policy.network();
    Policy::from_network(Network::from_params(net.architecture(), net.input_dim(), 3, p.to_vec()).unwrap()).unwrap()
}

fn random_batch(r: &mut ChaCha8Rng, dim: usize) -> Vec<Labeled> {
    (0..r.random_range(1..6))
        .map(|_| Labeled { features: random_features(r, dim), label: Label::POLICY[r.random_range(0..3)] })
        .collect()
}

fn gradients() -> Check {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst = [FdError::default(); 4];
    for _ in 0..50 {
        let dim = r.random_range(1..=64);
        let policy = Policy::from_network(random_net(&mut r, dim, 3)).unwrap();
        let batch = random_batch(&mut r, dim);
        let (_, g) = sft_loss_and_grad(&policy, &batch).unwrap();
        worst[0] = worst[0].max(fd_error(policy.params(), &g, |p| sft_loss_and_grad(&policy_with(&policy, p), &batch).unwrap().0));
        let (_, g) = mf_loss_and_grad(&policy, &batch).unwrap();
        worst[2] = worst[2].max(fd_error(policy.params(), &g, |p| mf_loss_and_grad(&policy_with(&policy, p), &batch).unwrap().0));
    }
    for _ in 0..50 {
        // the reward input appends a 4-way label one-hot
        let dim = r.random_range(1..=60);
        let rm = RewardModel::from_network(random_net(&mut r, dim + 4, 1)).unwrap();
        let batch: Vec<PreferenceSample> = (0..r.random_range(1..6))
            .map(|_| {
                let chosen = Label::ALL[r.random_range(0..4)];
                PreferenceSample { features: random_features(&mut r, dim), chosen, rejected: random_rejection(chosen, &mut r) }
            })
            .collect();
        let (_, g) = rm_loss_and_grad(&rm, &batch).unwrap();
        let net = rm.network();
        worst[1] = worst[1].max(fd_error(rm.params(), &g, |p| {
            let n = Network::from_params(net.architecture(), net.input_dim(), 1, p.to_vec()).unwrap();
            rm_loss_and_grad(&RewardModel::from_network(n).unwrap(), &batch).unwrap().0
        }));
    }
    let eps = 0.2;
    let mut done = 0;
    while done < 50 {
        let dim = r.random_range(1..=64);
        let policy = Policy::from_network(random_net(&mut r, dim, 3)).unwrap();
        let feats: Vec<FeatureVector> = (0..r.random_range(1..6)).map(|_| random_features(&mut r, dim)).collect();
        let batch: Vec<SurrogateSample> = feats
            .iter()
            .map(|f| {
                let action = Label::POLICY[r.random_range(0..3)];
                let lp = policy.log_probs(f).unwrap()[action.index()];
                SurrogateSample { features: f, action, old_log_prob: lp + r.random_range(-0.4..0.4), advantage: r.random_range(-2.0..2.0) }
            })
            .collect();
        // central differences straddling a clip kink are not a derivative
        let near_kink = batch.iter().any(|s| {
            let ratio = (policy.log_probs(s.features).unwrap()[s.action.index()] - s.old_log_prob).exp();
            (ratio - (1.0 - eps)).abs() < 1e-3 || (ratio - (1.0 + eps)).abs() < 1e-3
        });
        if near_kink {
            continue;
        }
        let (_, g, _) = ppo_surrogate_and_grad(&policy, &batch, eps).unwrap();
        worst[3] = worst[3].max(fd_error(policy.params(), &g, |p| ppo_surrogate_and_grad(&policy_with(&policy, p), &batch, eps).unwrap().0));
        done += 1;
    }
    let took = within(Duration::from_secs(30), start)?;
    let names = ["sft", "rm", "mf", "ppo"];
    let parts: Vec<String> = names
        .iter()
        .zip(&worst)
        .map(|(n, e)| format!("{n} {:.1e} (component {:.1e})", e.vector, e.component))
        .collect();
    let detail = format!("max relative error {} in {took:.1?}", parts.join(", "));
    ensure!(worst.iter().all(|e| e.vector <= 1e-4), "{detail}");
    Ok(detail)
}

// ---- simulator ----

fn simulator() -> Check {
    let spec = RegimeSpec::new(
        vec![RegimeParams::new(0.1, 0.3, 1.0), RegimeParams::new(-0.2, -0.5, 2.0)],
        vec![vec![0.9, 0.1], vec![0.3, 0.7]],
        vec![0.5, 0.5],
    )
    .unwrap();
    let sim = RegimeSchedule::constant(spec.clone()).simulate(5000, 11).unwrap();
    let mut prev = 0.0;
    let mut worst: f64 = 0.0;
    for t in 0..sim.returns.len() {
        let p = spec.params()[sim.path.states[t]];
        worst = worst.max(((sim.returns[t] - p.mu - p.phi * prev) / p.sigma - sim.shocks[t]).abs());
        prev = sim.returns[t];
    }
    ensure!(worst <= 1e-12, "shock residual {worst:e}");
    let path = sample_regime_path(&spec, 10_000, 5).unwrap();
    let occ = path.states.iter().filter(|&&s| s == 0).count() as f64 / path.len() as f64;
    ensure!((occ - 0.75).abs() <= 0.03, "occupancy {occ} vs 0.75");
    Ok(format!("shock residual {worst:.1e}, occupancy {occ:.4} vs 0.75"))
}

// ---- labels ----

fn labels() -> Check {
    use Label::*;
    let got: Vec<Label> = [-0.6, -0.5, -0.49, 0.0, 0.49, 0.5, 0.6].iter().map(|&p| assign_label(p).unwrap()).collect();
    ensure!(got == vec![Fall, Neutral, Neutral, Neutral, Neutral, Neutral, Rise], "{got:?}");
    Ok(format!("{got:?}"))
}

// ---- reward model ----

fn reward_model() -> Check {
    let start = Instant::now();
    let train = separable_preferences(2000, 4, 2);
    let held_out = separable_preferences(1000, 4, 3);
    let rm0 = RewardModel::new(Architecture::Mlp { hidden: 16 }, 4, 9);
    let chance = ranking_accuracy(&rm0, &random_preferences(2000, 4, 5)).unwrap();
    let (rm, _) = train_reward_model(&rm0, &train, &TrainConfig { epochs: 30, ..Default::default() }).unwrap();
    let acc = ranking_accuracy(&rm, &held_out).unwrap();
    let took = within(Duration::from_secs(20), start)?;
    let detail = format!("untrained {chance:.3}, trained {acc:.4} in {took:.1?}");
    ensure!((chance - 0.5).abs() <= 0.05 && acc >= 0.95, "{detail}");
    Ok(detail)
}

// ---- KL anchoring ----

fn sft_teacher(data: &[Labeled]) -> Policy {
    let p0 = Policy::new(Architecture::Mlp { hidden: 16 }, 2, 7);
    train_sft(&p0, data, &TrainConfig { epochs: 100, ..Default::default() }).unwrap().0
}

fn kl_anchor() -> Check {
    let data = separable_points(600, 1);
    let teacher = sft_teacher(&data);
    let reference = ReferencePolicy::snapshot(&teacher);
    let adversary = label_reward(2, Label::Fall, 1.0);
    let kls: Vec<f64> = [0.01, 0.1, 1.0, 100.0]
        .iter()
        .map(|&beta| {
            let cfg = TrainConfig { beta, rl_learning_rate: 0.002, rl_iterations: 60, ..Default::default() };
            let (p, _) = train_rl(&teacher, &reference, &adversary, &data, &cfg, false).unwrap();
            data.iter().map(|s| exact_kl(&p, &reference, &s.features).unwrap()).sum::<f64>() / data.len() as f64
        })
        .collect();
    let detail = format!("KL at beta 0.01/0.1/1/100: {:.4} {:.4} {:.4} {:.1e}", kls[0], kls[1], kls[2], kls[3]);
    ensure!(kls[0] > kls[1] && kls[1] > kls[2] && kls[3] <= 1e-3, "{detail}");
    Ok(detail)
}

// ---- market feedback ----

fn market_feedback() -> Check {
    let data = separable_points(300, 8);
    let teacher = sft_teacher(&data);
    let reference = ReferencePolicy::snapshot(&teacher);
    let rm = label_reward(2, Label::Neutral, 1.0);
    let cfg = TrainConfig { gamma: 0.0, rl_iterations: 5, ..Default::default() };
    let (a, ca) = train_rl(&teacher, &reference, &rm, &data, &cfg, false).unwrap();
    let (b, cb) = train_rl(&teacher, &reference, &rm, &data, &cfg, true).unwrap();
    let same = a.params().iter().zip(b.params()).all(|(x, y)| x.to_bits() == y.to_bits()) && ca == cb;
    ensure!(same, "gamma 0 diverged from plain PPO");

    let data = separable_points(400, 9);
    let p0 = Policy::new(Architecture::Mlp { hidden: 16 }, 2, 2);
    let reference = ReferencePolicy::snapshot(&p0);
    let cfg = TrainConfig { beta: 0.0, gamma: 1.0, rl_iterations: 150, rl_learning_rate: 0.05, ..Default::default() };
    let (p, _) = train_rl(&p0, &reference, &RewardModel::zeros(Architecture::Linear, 2), &data, &cfg, true).unwrap();
    let acc = accuracy(&p, &data).unwrap();
    ensure!(acc >= 0.99, "market-only accuracy {acc}");
    Ok(format!("gamma 0 bit-identical to PPO; market-only accuracy {acc:.4}"))
}

// ---- adaptive deployment ----

fn adaptation() -> Check {
    let start = Instant::now();
    let r = flip_report::run(&[0, 1, 2, 3, 4], &DeploymentConfig::default());
    let took = within(Duration::from_secs(180), start)?;
    // judged against the better pre-shift arm
    let pre = r.pre_adaptive.max(r.pre_frozen);
    let recovery = r.settled_adaptive / pre;
    let detail = format!(
        "post-shift adaptive {:.3} frozen {:.3} (gap {:.3}); third window {:.3}, from then on {:.3} = {:.0}% of pre-shift {:.3}; {took:.1?}",
        r.post_adaptive,
        r.post_frozen,
        r.gap(),
        r.windows_adaptive[2],
        r.settled_adaptive,
        100.0 * recovery,
        pre
    );
    ensure!(r.gap() >= 0.15 && recovery >= 0.8, "{detail}");
    Ok(detail)
}

// ---- information gain ----

fn information() -> Check {
    let h = |v: &[u8]| entropy(v).unwrap();
    let cases = [h(&[1, 1, 1, 1]), h(&[0, 1, 0, 1]), h(&[0, 0, 1, 1, 1, 1, 2, 2])];
    ensure!(cases[0] == 0.0 && (cases[1] - 1.0).abs() < 1e-12 && (cases[2] - 1.5).abs() < 1e-12, "entropies {cases:?}");

    let tags = [0u8, 0, 1, 1, 1, 2, 2, 2, 2];
    let pure = Partition::new(tags.iter().map(|&t| t as i64).collect()).unwrap();
    let full = information_gain(&tags, &pure).unwrap();
    let none = information_gain(&tags, &Partition::single(tags.len())).unwrap();
    ensure!((full - h(&tags)).abs() < 1e-12 && none.abs() < 1e-12, "pure {full} single {none}");

    let mut r = rng(77);
    let mut min_rv = f64::INFINITY;
    for _ in 0..1000 {
        let n = r.random_range(1..200);
        let vals: Vec<f64> = (0..n).map(|_| r.random_range(-100.0..100.0)).collect();
        let ids: Vec<i64> = (0..n).map(|_| r.random_range(-1..10)).collect();
        min_rv = min_rv.min(variance_reduction(&vals, &Partition::new(ids).unwrap()).unwrap().reduction);
    }
    ensure!(min_rv >= 0.0, "negative reduction {min_rv}");

    let (rows, ids) = blobs(2, 100, 16, 12.0, 2);
    let set = EmbeddingSet::new("blobs", rows, Some(ids.iter().map(|b| format!("t{b}")).collect()), None).unwrap();
    let cfg = PipelineConfig::default();
    let rep = ig_report(&set, IgTask::Categorical, &cfg).unwrap();
    let (base, gain) = (rep.scores.base_entropy.unwrap(), rep.scores.information_gain.unwrap());
    let mut shuffled = set.clone();
    shuffled.tags.as_mut().unwrap().shuffle(&mut rng(9));
    let null = ig_report(&shuffled, IgTask::Categorical, &cfg).unwrap().scores.information_gain.unwrap();
    let detail = format!("blob IG {gain:.3} of H {base:.3}, shuffled {null:.3} bits, min RV {min_rv:.2e}");
    ensure!(gain >= 0.9 * base && null <= 0.1, "{detail}");
    Ok(detail)
}

// ---- belief ----

fn belief() -> Check {
    let spec = PomdpSpec::new(
        vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]],
        vec![vec![0.9, 0.1], vec![0.2, 0.8]],
        vec![0.0; 2],
        0.9,
        vec![0.5, 0.5],
    )
    .unwrap();
    let b = belief_update(&Belief::uniform(2), 0, 0, &spec).unwrap();
    let p = b.probs();
    ensure!(
        (p[0] * 1e4).round() == 8182.0 && (p[1] * 1e4).round() == 1818.0,
        "posterior {p:?}"
    );

    let mut r = rng(8);
    let simplex = |r: &mut ChaCha8Rng, k: usize| {
        let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.01..1.0)).collect();
        let z: f64 = raw.iter().sum();
        let mut v: Vec<f64> = raw.iter().map(|x| x / z).collect();
        let s: f64 = v.iter().sum();
        v[0] += 1.0 - s;
        v
    };
    let transition = (0..4).map(|_| (0..3).map(|_| simplex(&mut r, 4)).collect()).collect();
    let observation = (0..4).map(|_| simplex(&mut r, 5)).collect();
    let initial = simplex(&mut r, 4);
    let random = PomdpSpec::new(transition, observation, vec![0.0; 4], 0.95, initial).unwrap();
    let mut b = random.initial_belief();
    let mut drift: f64 = 0.0;
    for _ in 0..10_000 {
        b = belief_update(&b, r.random_range(0..3), r.random_range(0..5), &random).unwrap();
        drift = drift.max((b.probs().iter().sum::<f64>() - 1.0).abs());
    }
    ensure!(drift <= 1e-12, "normalization drift {drift:e}");

    let regimes = RegimeSpec::new(
        vec![RegimeParams::new(-2.0, 0.0, 0.5), RegimeParams::new(2.0, 0.0, 0.5)],
        vec![vec![0.98, 0.02], vec![0.02, 0.98]],
        vec![0.5, 0.5],
    )
    .unwrap();
    let sim = RegimeSchedule::constant(regimes.clone()).simulate(2000, 3).unwrap();
    let mass = RegimeFilter::with_bins(&regimes, 12).unwrap().mass_on_truth(&sim.returns, &sim.path.states, 50).unwrap();
    ensure!(mass >= 0.9, "filter mass {mass}");
    Ok(format!("posterior ({:.4}, {:.4}), drift {drift:.1e}, filter mass {mass:.3}", p[0], p[1]))
}

// ---- dataset ----

fn dataset() -> Check {
    let items: Vec<usize> = (0..2111).collect();
    let s = split_dataset(&items, SplitRatios::nifty(), 0, false).unwrap();
    let sizes = (s.train.len(), s.test.len(), s.eval.len());
    ensure!(sizes == (1477, 317, 317), "split {sizes:?}");

    let spec = RegimeSpec::single(RegimeParams::new(0.0, 0.1, 1.0)).unwrap();
    let sim = RegimeSchedule::constant(spec).simulate(150, 4).unwrap();
    let series = returns_to_ohlcv(&sim.returns, 100.0, 5).unwrap();
    let ind = compute_indicators(&series, &IndicatorConfig::default()).unwrap();
    let ex = build_examples(&series, &ind, Some(&sim.path), &BuildConfig::default(), 6).unwrap();
    let mut first = Vec::new();
    write_examples_to(&ex, &mut first).unwrap();
    let back = read_examples_from(&first[..], std::path::Path::new("mem.jsonl")).unwrap();
    let mut second = Vec::new();
    write_examples_to(&back, &mut second).unwrap();
    ensure!(back == ex && first == second, "JSONL round trip changed bytes");

    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for chosen in Label::POLICY {
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[random_rejection(chosen, &mut r).index()] += 1;
        }
        ensure!(counts[chosen.index()] == 0, "rejected the chosen label");
        for (k, &c) in counts.iter().enumerate() {
            if k != chosen.index() {
                worst = worst.max((c as f64 / 1e4 - 1.0 / 3.0).abs());
            }
        }
    }
    ensure!(worst <= 0.03, "rejection deviation {worst}");
    Ok(format!("split {sizes:?}, {} examples round-trip, rejection deviation {worst:.4}", ex.len()))
}

// ---- metrics ----

fn metrics() -> Check {
    let truths = [1, 1, 1, 1, 1, 1, 0, 0, 0, 0];
    let preds = [1, 1, 1, 1, 0, 0, 0, 0, 0, 1];
    let acc = accuracy_indices(&preds, &truths, 2).unwrap();
    let m = mcc_indices(&preds, &truths, 2).unwrap();
    let f = ConfusionMatrix::from_indices(&[1, 1, 0, 0], &[1, 0, 0, 0], 2).unwrap().class_f1(1).unwrap();
    let r4 = |x: f64| (x * 1e4).round();
    ensure!(r4(acc) == 7000.0 && r4(f) == r4(2.0 / 3.0) && r4(m) == 4082.0, "acc {acc} f1 {f} mcc {m}");

    let mut r = rng(3);
    for _ in 0..1000 {
        let n = r.random_range(1..100);
        let p: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        let t: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        let cm = ConfusionMatrix::from_indices(&p, &t, 3).unwrap();
        let same = cm.accuracy().unwrap().to_bits() == accuracy_indices(&p, &t, 3).unwrap().to_bits()
            && cm.mcc().unwrap().to_bits() == mcc_indices(&p, &t, 3).unwrap().to_bits()
            && [F1Average::Weighted, F1Average::Macro]
                .iter()
                .all(|&a| cm.f1(a).unwrap().to_bits() == f1_indices(&p, &t, 3, a).unwrap().to_bits());
        ensure!(same, "paths disagree on {p:?} vs {t:?}");
    }
    Ok(format!("acc {acc:.4}, F1 {f:.4}, MCC {m:.4}; 1000 random cases agree exactly"))
}

// ---- CLI determinism ----

fn determinism() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let emb = dir.path().join("blobs.csv");
    support::write_blob_embeddings(&emb);
    let out = dir.path().join("run");
    let logs = support::run_all(&out, &emb);
    let first = support::snapshot(&out);
    let again = support::run_all(&out, &emb);
    let second = support::snapshot(&out);
    ensure!(logs == again, "stdout differs between runs");
    let differing: Vec<&String> = first.keys().filter(|k| second.get(*k) != first.get(*k)).collect();
    ensure!(first.len() == second.len() && differing.is_empty(), "files differ: {differing:?}");
    Ok(format!("{} commands, {} artifacts byte-identical", support::PIPELINE.len() + 1, first.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("gradients match finite differences", gradients),
        ("simulator shocks and occupancy", simulator),
        ("label boundaries", labels),
        ("reward model ranking", reward_model),
        ("KL anchoring", kl_anchor),
        ("market feedback term", market_feedback),
        ("adaptive deployment under a regime flip", adaptation),
        ("information gain suite", information),
        ("belief filter", belief),
        ("dataset splits and serialization", dataset),
        ("metrics", metrics),
        ("CLI determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(d) => println!("criterion {:>2} PASS  {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {d}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
