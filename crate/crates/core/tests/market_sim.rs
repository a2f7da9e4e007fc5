use proptest::prelude::*;
use regimelab::market_sim::*;

fn two_state(a: f64, b: f64) -> RegimeSpec {
    RegimeSpec::new(
        vec![RegimeParams::new(0.1, 0.3, 1.0), RegimeParams::new(-0.2, -0.5, 2.0)],
        vec![vec![1.0 - a, a], vec![b, 1.0 - b]],
        vec![0.5, 0.5],
    )
    .unwrap()
}

#[test]
fn residuals_recover_shocks_exactly() {
    let spec = two_state(0.05, 0.1);
    let sim = RegimeSchedule::constant(spec.clone()).simulate(5000, 11).unwrap();
    let mut prev = 0.0;
    for t in 0..sim.returns.len() {
        let p = spec.params()[sim.path.states[t]];
        let eps = (sim.returns[t] - p.mu - p.phi * prev) / p.sigma;
        assert!((eps - sim.shocks[t]).abs() <= 1e-12, "t={t}");
        prev = sim.returns[t];
    }
}

#[test]
fn occupancy_approaches_stationary() {
    // stationary mass on state 0 is b / (a + b) = 0.75
    let path = sample_regime_path(&two_state(0.1, 0.3), 10_000, 5).unwrap();
    let frac = path.states.iter().filter(|&&s| s == 0).count() as f64 / path.len() as f64;
    assert!((frac - 0.75).abs() <= 0.03, "{frac}");
}

fn random_spec() -> impl Strategy<Value = RegimeSpec> {
    (2usize..4).prop_flat_map(|k| {
        (
            prop::collection::vec((-1.0f64..1.0, -0.95f64..0.95, 0.01f64..3.0), k),
            prop::collection::vec(prop::collection::vec(0.05f64..1.0, k), k),
        )
            .prop_map(move |(params, rows)| {
                let norm = |r: &Vec<f64>| {
                    let z: f64 = r.iter().sum();
                    let mut v: Vec<f64> = r.iter().map(|x| x / z).collect();
                    let s: f64 = v.iter().sum();
                    v[0] += 1.0 - s;
                    v
                };
                RegimeSpec::new(
                    params.into_iter().map(|(m, p, s)| RegimeParams::new(m, p, s)).collect(),
                    rows.iter().map(norm).collect(),
                    vec![1.0 / k as f64; k],
                )
                .unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn simulation_is_deterministic(spec in random_spec(), seed in any::<u64>()) {
        let s = RegimeSchedule::constant(spec);
        let a = s.simulate(200, seed).unwrap();
        let b = s.simulate(200, seed).unwrap();
        prop_assert_eq!(a.path, b.path);
        prop_assert!(a.returns.iter().zip(&b.returns).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn generated_bars_are_well_formed(spec in random_spec(), seed in any::<u64>()) {
        let sim = RegimeSchedule::constant(spec).simulate(300, seed).unwrap();
        let series = returns_to_ohlcv(&sim.returns, 100.0, seed ^ 1).unwrap();
        prop_assert!(series.validate().is_ok());
        prop_assert_eq!(series.len(), 300);
    }

    #[test]
    fn spec_hash_tracks_content(spec in random_spec(), bump in 0.01f64..0.5) {
        let mut params = spec.params().to_vec();
        params[0].sigma += bump;
        let other = spec.with_params(params).unwrap();
        prop_assert_eq!(spec.content_hash(), spec.clone().content_hash());
        prop_assert_ne!(spec.content_hash(), other.content_hash());
    }
}
