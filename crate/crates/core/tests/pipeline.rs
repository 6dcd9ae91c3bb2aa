use pier::data::{from_jsonl, generate_synthetic_dataset, to_examples, to_jsonl, WorldConfig};
use pier::eval::checkpoint::{from_bytes, to_bytes};
use pier::fpsm::bottom_k;
use pier::permgen::{enumerate_permutations, permutation_count, BehaviorSequence};
use pier::training::{sample_unselected, ModelConfig, PierModel, TrainConfig, Trainer};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_world(n_requests: usize) -> WorldConfig {
    WorldConfig {
        n_requests,
        n_o: 6,
        n_d: 2,
        vocab_sizes: vec![40, 4, 3],
        n_users: 40,
        burn_in: 300,
        ..WorldConfig::default()
    }
}

#[test]
fn click_rate_matches_world_probabilities() {
    // clicks are Bernoulli draws from the hidden model, so the empirical
    // rate over ~50k displayed slots must sit near the mean probability
    let data = generate_synthetic_dataset(&WorldConfig {
        n_requests: 26_000,
        burn_in: 500,
        ..small_world(0)
    })
    .unwrap();
    let (mut clicks, mut probs, mut n) = (0.0, 0.0, 0usize);
    for r in &data.records {
        let shown: Vec<Vec<u32>> = r.displayed.iter().map(|&i| r.items[i].features.clone()).collect();
        let p = data.truth.click_probs(r.user_id, r.request_id, &shown).unwrap();
        probs += p.iter().sum::<f64>();
        clicks += r.clicks.iter().map(|&c| c as f64).sum::<f64>();
        n += p.len();
    }
    assert!(n >= 50_000);
    let (empirical, expected) = (clicks / n as f64, probs / n as f64);
    assert!((empirical - expected).abs() < 0.02, "{empirical} vs {expected}");
}

#[test]
fn jsonl_round_trip_is_lossless() {
    let data = generate_synthetic_dataset(&small_world(200)).unwrap();
    let text = to_jsonl(&data.records);
    let back = from_jsonl(&text, &data.schema()).unwrap();
    assert_eq!(back, data.records);
    assert_eq!(to_jsonl(&back), text);
}

#[test]
fn checkpoint_preserves_predictions() {
    let world = small_world(200);
    let data = generate_synthetic_dataset(&world).unwrap();
    let mut model = PierModel::new(ModelConfig::new(world.vocab_sizes.clone(), 8, world.n_d)).unwrap();
    let examples = to_examples(&data.records).unwrap();
    let mut t = Trainer::new(TrainConfig {
        batch_size: 32,
        ..TrainConfig::default()
    })
    .unwrap();
    t.pretrain_epoch(&mut model, &examples).unwrap();

    let bytes = to_bytes(&model);
    let restored = from_bytes(&bytes).unwrap();
    assert_eq!(to_bytes(&restored), bytes);
    let perms = enumerate_permutations(world.n_o, world.n_d).unwrap();
    for ex in examples.iter().take(5) {
        let a = model.predict(&ex.candidate_set, &perms, &ex.behaviors).unwrap();
        let b = restored.predict(&ex.candidate_set, &perms, &ex.behaviors).unwrap();
        // the payload is f32
        for (pa, pb) in a.iter().zip(&b) {
            for (x, y) in pa.0.iter().zip(&pb.0) {
                assert!((x - y).abs() < 1e-6, "{x} vs {y}");
            }
        }
    }
}

#[test]
fn pretraining_loss_trends_down() {
    let world = small_world(3_000);
    let data = generate_synthetic_dataset(&world).unwrap();
    let examples = to_examples(&data.records).unwrap();
    let mut model = PierModel::new(ModelConfig::new(world.vocab_sizes.clone(), 8, world.n_d)).unwrap();
    let mut t = Trainer::new(TrainConfig {
        batch_size: 64,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    })
    .unwrap();
    for _ in 0..3 {
        t.pretrain_epoch(&mut model, &examples).unwrap();
    }
    let losses = t.curve.losses();
    let quarter = losses.len() / 4;
    let means: Vec<f64> = losses.chunks(quarter).take(4).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    assert!(means[3] < means[0] && means[3] <= means[1] + 0.01, "{means:?}");
}

#[test]
fn empty_history_gives_every_permutation_the_same_distance() {
    let world = small_world(50);
    let data = generate_synthetic_dataset(&world).unwrap();
    let model = PierModel::new(ModelConfig::new(world.vocab_sizes.clone(), 8, world.n_d)).unwrap();
    let cands = data.records[0].candidate_set().unwrap();
    let perms = enumerate_permutations(world.n_o, world.n_d).unwrap();
    let d = model
        .fpsm
        .score(&cands, &perms, &BehaviorSequence::default(), &model.table, &model.store, false)
        .unwrap();
    assert!(d.iter().all(|&x| x == 24.0));
    let top = model
        .fpsm
        .select_top_k_indices(&cands, &perms, 4, &BehaviorSequence::default(), &model.table, &model.store, false)
        .unwrap();
    assert_eq!(top, vec![0, 1, 2, 3]);
}

proptest! {
    #[test]
    fn bottom_k_matches_a_full_sort(values in prop::collection::vec(0u8..20, 0..200), k in 0usize..220) {
        let values: Vec<f64> = values.into_iter().map(f64::from).collect();
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
        order.truncate(k);
        prop_assert_eq!(bottom_k(&values, k), order);
    }

    #[test]
    fn unselected_draws_are_distinct_and_disjoint(n in 1usize..80, frac in 0.0f64..1.0, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let selected: Vec<usize> = (0..n).filter(|i| i % 3 == 0).collect();
        let free = n - selected.len();
        let k = (free as f64 * frac) as usize;
        let drawn = sample_unselected(n, &selected, k, &mut rng).unwrap();
        prop_assert_eq!(drawn.len(), k);
        let mut sorted = drawn.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k);
        prop_assert!(drawn.iter().all(|&i| i < n && i % 3 != 0));
    }

    #[test]
    fn enumeration_is_complete_and_distinct(n_o in 1usize..8, n_d in 1usize..5) {
        prop_assume!(n_d <= n_o);
        let perms = enumerate_permutations(n_o, n_d).unwrap();
        prop_assert_eq!(perms.len() as u128, permutation_count(n_o, n_d));
        let mut seen = std::collections::HashSet::new();
        for p in &perms {
            prop_assert!(p.validate(n_o, n_d).is_ok());
            prop_assert!(seen.insert(p.indices().to_vec()));
        }
    }
}
