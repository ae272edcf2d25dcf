use impostor_core::adversary::{
    infer_real, restrict_to_days, split_days, EfficacyReport, Harness, Method, UserProfile,
};
use impostor_core::city::{generate_synthetic_city, SyntheticCity, SyntheticCitySpec};
use impostor_core::config::{AttackerKnowledge, EvalParams, ModelParams};
use impostor_core::offline::{OfflineModel, StationSource};
use impostor_core::synth::{FakeRecordStore, QueryContext};
use impostor_core::{GridMap, TimeScheme};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

/// City plus a model built on the training days only.
fn fixture() -> &'static (SyntheticCity, OfflineModel) {
    static CELL: OnceLock<(SyntheticCity, OfflineModel)> = OnceLock::new();
    CELL.get_or_init(|| {
        let map = GridMap::default();
        let city = generate_synthetic_city(&SyntheticCitySpec::new(map.clone(), 500, 20, 1)).unwrap();
        let (train, _) = split_days(&city.traces, 0.7);
        let (model, _) = OfflineModel::build(
            &restrict_to_days(&city.traces, &train),
            &map,
            &TimeScheme::default(),
            &ModelParams::default(),
            StationSource::Parking,
        )
        .unwrap();
        (city, model)
    })
}

fn run(method: Method, n: usize) -> EfficacyReport {
    let (city, model) = fixture();
    Harness::new(model, EvalParams::default(), 7).evaluate(&city.traces, method, n).unwrap()
}

#[test]
fn impostors_beat_random_walks_and_grow_with_n() {
    let curve: Vec<f64> = [1, 4, 7, 10].iter().map(|&n| run(Method::Impostor, n).efficacy).collect();
    assert!(curve.windows(2).all(|w| w[1] >= w[0]), "{curve:?}");
    let walk = run(Method::RandomWalk, 10).efficacy;
    assert!(curve[3] - walk >= 0.15, "impostor {} walk {walk}", curve[3]);
}

#[test]
fn random_walk_dummies_are_mostly_caught() {
    let r = run(Method::RandomWalk, 10);
    assert!(r.n_sets >= 200);
    assert!(1.0 - r.efficacy >= 0.6, "attacker accuracy {}", 1.0 - r.efficacy);
}

#[test]
fn identical_copies_hit_the_tie_rate() {
    let r = run(Method::IdenticalCopies, 10);
    let expect = 10.0 / 11.0;
    let sigma = (expect * (1.0 - expect) / r.n_sets as f64).sqrt();
    assert!((r.efficacy - expect).abs() <= 3.0 * sigma, "{}", r.efficacy);
}

#[test]
fn no_impostors_means_no_protection() {
    let r = run(Method::Impostor, 0);
    assert!(r.n_sets > 0);
    assert_eq!(r.errors, 0);
    assert_eq!(r.efficacy, 0.0);
}

#[test]
fn reports_are_reproducible() {
    assert_eq!(run(Method::Impostor, 4), run(Method::Impostor, 4));
    assert_eq!(run(Method::RandomWalk, 4), run(Method::RandomWalk, 4));
}

#[test]
fn real_history_attacker_runs() {
    let (city, model) = fixture();
    let params = EvalParams {
        knowledge: AttackerKnowledge::RealHistory,
        ..EvalParams::default()
    };
    let r = Harness::new(model, params, 7).evaluate(&city.traces, Method::Impostor, 4).unwrap();
    assert!((0.0..=1.0).contains(&r.efficacy));
    assert!(r.n_sets > 0);
}

/// Guesses scored against a label drawn independently of the traces land
/// at chance.
#[test]
fn shuffled_labels_give_chance_accuracy() {
    let (city, model) = fixture();
    let harness = Harness::new(model, EvalParams::default(), 7);
    let n = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let window = (model.params.window_hours * 3600.0) as i64;
    let (mut hits, mut total) = (0usize, 0usize);
    for trace in harness.users(&city.traces) {
        let mut store = FakeRecordStore::in_memory(model.scheme.n_user);
        let mut profile = UserProfile::new(model.map.n_regions(), model.params.epsilon);
        for target in harness.queries(trace).unwrap() {
            let ctx = QueryContext::around(trace, target, window, n);
            let obs = harness.observe(Method::Impostor, &ctx, &mut store, &mut rng).unwrap();
            let guess = infer_real(&obs.traces, &profile, &mut rng);
            let label = rng.random_range(0..=n);
            hits += usize::from(guess == label);
            total += 1;
            obs.traces.iter().for_each(|s| profile.add(s));
        }
    }
    let p = 1.0 / (n + 1) as f64;
    let sigma = (p * (1.0 - p) / total as f64).sqrt();
    let acc = hits as f64 / total as f64;
    assert!((acc - p).abs() <= 3.0 * sigma, "accuracy {acc} over {total}");
}
