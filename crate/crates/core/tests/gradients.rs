use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regimelab::dataset::Label;
use regimelab::models::*;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Max relative error between `grad` and central differences of `loss`.
fn check<F: FnMut(&[f64]) -> f64>(params: &[f64], grad: &[f64], mut loss: F) -> f64 {
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + STEP;
        let up = loss(&p);
        p[i] = orig - STEP;
        let down = loss(&p);
        p[i] = orig;
        worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * STEP)));
    }
    worst
}

fn random_arch(rng: &mut ChaCha8Rng) -> Architecture {
    if rng.random_bool(0.3) {
        Architecture::Linear
    } else {
        Architecture::Mlp { hidden: rng.random_range(1..=16) }
    }
}

fn random_net(rng: &mut ChaCha8Rng, arch: Architecture, input: usize, output: usize) -> Network {
    let n = Network::param_count(arch, input, output);
    let params = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Network::from_params(arch, input, output, params).unwrap()
}

fn random_features(rng: &mut ChaCha8Rng, dim: usize) -> FeatureVector {
    FeatureVector::new((0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn random_policy_label(rng: &mut ChaCha8Rng) -> Label {
    Label::POLICY[rng.random_range(0..3)]
}

fn with_params(policy: &Policy, p: &[f64]) -> Policy {
    let net = policy.network();
    Policy::from_network(
        Network::from_params(net.architecture(), net.input_dim(), net.output_dim(), p.to_vec()).unwrap(),
    )
    .unwrap()
}

#[test]
fn sft_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let dim = rng.random_range(1..=64);
        let arch = random_arch(&mut rng);
        let policy = Policy::from_network(random_net(&mut rng, arch, dim, 3)).unwrap();
        let batch: Vec<Labeled> = (0..rng.random_range(1..6))
            .map(|_| Labeled { features: random_features(&mut rng, dim), label: random_policy_label(&mut rng) })
            .collect();
        let (_, grad) = sft_loss_and_grad(&policy, &batch).unwrap();
        let err = check(policy.params(), &grad, |p| sft_loss_and_grad(&with_params(&policy, p), &batch).unwrap().0);
        assert!(err <= TOL, "sft rel err {err}");
    }
}

#[test]
fn mf_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let dim = rng.random_range(1..=64);
        let arch = random_arch(&mut rng);
        let policy = Policy::from_network(random_net(&mut rng, arch, dim, 3)).unwrap();
        let batch: Vec<Labeled> = (0..rng.random_range(1..6))
            .map(|_| Labeled { features: random_features(&mut rng, dim), label: random_policy_label(&mut rng) })
            .collect();
        let (loss, grad) = mf_loss_and_grad(&policy, &batch).unwrap();
        assert!((0.0..=2.0).contains(&loss));
        let err = check(policy.params(), &grad, |p| mf_loss_and_grad(&with_params(&policy, p), &batch).unwrap().0);
        assert!(err <= TOL, "mf rel err {err}");
    }
}

#[test]
fn rm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let dim = rng.random_range(1..=60);
        let arch = random_arch(&mut rng);
        let rm = RewardModel::from_network(random_net(&mut rng, arch, dim + 4, 1)).unwrap();
        let batch: Vec<PreferenceSample> = (0..rng.random_range(1..6))
            .map(|_| {
                let chosen = Label::ALL[rng.random_range(0..4)];
                let mut rejected = chosen;
                while rejected == chosen {
                    rejected = Label::ALL[rng.random_range(0..4)];
                }
                PreferenceSample { features: random_features(&mut rng, dim), chosen, rejected }
            })
            .collect();
        let (_, grad) = rm_loss_and_grad(&rm, &batch).unwrap();
        let net = rm.network();
        let err = check(rm.params(), &grad, |p| {
            let n = Network::from_params(net.architecture(), net.input_dim(), 1, p.to_vec()).unwrap();
            rm_loss_and_grad(&RewardModel::from_network(n).unwrap(), &batch).unwrap().0
        });
        assert!(err <= TOL, "rm rel err {err}");
    }
}

#[test]
fn ppo_surrogate_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let eps = 0.2;
    let mut checked = 0;
    while checked < 50 {
        let dim = rng.random_range(1..=64);
        let arch = random_arch(&mut rng);
        let policy = Policy::from_network(random_net(&mut rng, arch, dim, 3)).unwrap();
        let feats: Vec<FeatureVector> = (0..rng.random_range(1..6)).map(|_| random_features(&mut rng, dim)).collect();
        let batch: Vec<SurrogateSample> = feats
            .iter()
            .map(|f| {
                let action = random_policy_label(&mut rng);
                let lp = policy.log_probs(f).unwrap()[action.index()];
                SurrogateSample {
                    features: f,
                    action,
                    // old policy differs so some ratios land in the clipped region
                    old_log_prob: lp + rng.random_range(-0.4..0.4),
                    advantage: rng.random_range(-2.0..2.0),
                }
            })
            .collect();
        // central differences are meaningless across a clip kink
        let near_kink = batch.iter().any(|s| {
            let r = (policy.log_probs(s.features).unwrap()[s.action.index()] - s.old_log_prob).exp();
            ((r - (1.0 - eps)).abs() < 1e-3) || ((r - (1.0 + eps)).abs() < 1e-3)
        });
        if near_kink {
            continue;
        }
        let (_, grad, clip_frac) = ppo_surrogate_and_grad(&policy, &batch, eps).unwrap();
        assert!((0.0..=1.0).contains(&clip_frac));
        let err = check(policy.params(), &grad, |p| ppo_surrogate_and_grad(&with_params(&policy, p), &batch, eps).unwrap().0);
        assert!(err <= TOL, "ppo rel err {err}");
        checked += 1;
    }
}
