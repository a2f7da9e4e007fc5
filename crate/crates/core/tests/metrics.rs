use proptest::prelude::*;
use regimelab::dataset::Label;
use regimelab::metrics::*;

fn pairs() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1usize..80).prop_flat_map(|n| (prop::collection::vec(0usize..3, n), prop::collection::vec(0usize..3, n)))
}

#[test]
fn trivial_cases() {
    let t = [Label::Rise, Label::Fall, Label::Neutral, Label::Rise];
    assert_eq!(accuracy(&t, &t).unwrap(), 1.0);
    assert_eq!(f1(&t, &t, F1Average::Weighted).unwrap(), 1.0);
    assert_eq!(mcc(&t, &t).unwrap(), 1.0);
    let wrong = [Label::Fall, Label::Neutral, Label::Rise, Label::Fall];
    assert_eq!(accuracy(&wrong, &t).unwrap(), 0.0);
    assert_eq!(mcc(&[Label::Rise; 4], &t).unwrap(), 0.0);
}

#[test]
fn report_matches_direct_calls() {
    let p = [Label::Rise, Label::Rise, Label::Fall, Label::Neutral, Label::Fall];
    let t = [Label::Rise, Label::Fall, Label::Fall, Label::Neutral, Label::Neutral];
    let r = MetricsReport::from_labels(&p, &t).unwrap();
    assert_eq!(r.acc, accuracy(&p, &t).unwrap());
    assert_eq!(r.f1_weighted, f1(&p, &t, F1Average::Weighted).unwrap());
    assert_eq!(r.f1_macro, f1(&p, &t, F1Average::Macro).unwrap());
    assert_eq!(r.mcc, mcc(&p, &t).unwrap());
    let json = serde_json::to_value(&r).unwrap();
    for key in ["acc", "f1_weighted", "f1_macro", "mcc", "confusion"] {
        assert!(json.get(key).is_some());
    }
}

proptest! {
    #[test]
    fn raw_and_matrix_paths_agree((p, t) in pairs()) {
        let m = ConfusionMatrix::from_indices(&p, &t, 3).unwrap();
        prop_assert_eq!(m.total(), p.len() as u64);
        prop_assert_eq!(m.accuracy().unwrap().to_bits(), accuracy_indices(&p, &t, 3).unwrap().to_bits());
        for avg in [F1Average::Weighted, F1Average::Macro] {
            prop_assert_eq!(m.f1(avg).unwrap().to_bits(), f1_indices(&p, &t, 3, avg).unwrap().to_bits());
        }
        prop_assert_eq!(m.mcc().unwrap().to_bits(), mcc_indices(&p, &t, 3).unwrap().to_bits());
        let trace: u64 = (0..3).map(|c| m.get(c, c)).sum();
        prop_assert_eq!(m.accuracy().unwrap(), trace as f64 / p.len() as f64);
    }

    #[test]
    fn scores_stay_in_range((p, t) in pairs()) {
        let acc = accuracy_indices(&p, &t, 3).unwrap();
        let f = f1_indices(&p, &t, 3, F1Average::Weighted).unwrap();
        let g = f1_indices(&p, &t, 3, F1Average::Macro).unwrap();
        let m = mcc_indices(&p, &t, 3).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc) && (0.0..=1.0).contains(&f) && (0.0..=1.0).contains(&g));
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&m));
    }

    #[test]
    fn pair_order_does_not_matter((p, t) in pairs(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut idx: Vec<usize> = (0..p.len()).collect();
        idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let p2: Vec<usize> = idx.iter().map(|&i| p[i]).collect();
        let t2: Vec<usize> = idx.iter().map(|&i| t[i]).collect();
        prop_assert_eq!(ConfusionMatrix::from_indices(&p, &t, 3).unwrap(), ConfusionMatrix::from_indices(&p2, &t2, 3).unwrap());
        prop_assert_eq!(mcc_indices(&p, &t, 3).unwrap(), mcc_indices(&p2, &t2, 3).unwrap());
        prop_assert_eq!(f1_indices(&p, &t, 3, F1Average::Macro).unwrap(), f1_indices(&p2, &t2, 3, F1Average::Macro).unwrap());
    }
}
