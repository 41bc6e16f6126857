mod common;

use proptest::prelude::*;
use rand::Rng;
use wavedino::knn::{classify, evaluate, extract_features, FeatureBank, KnnConfig};
use wavedino::model::ModelNetwork;
use wavedino::tfm::TimeFrequencyMap;

/// Unit 2-vector at cosine `c` from the x axis.
fn at_cosine(c: f64) -> [f32; 2] {
    [c as f32, (1.0 - c * c).sqrt() as f32]
}

#[test]
fn temperature_overrides_the_count_vote() {
    let mut vectors = Vec::new();
    for c in [0.9, 0.8, 0.8] {
        vectors.extend(at_cosine(c));
    }
    let bank = FeatureBank::new(2, vectors, vec![0, 1, 1]).unwrap();
    let query = [1.0f32, 0.0];
    let count = classify(&query, &bank, &KnnConfig { n_neighbors: 3, temperature: None }).unwrap();
    assert_eq!(count.class, 1);
    let tau = 0.04;
    let tempered = classify(&query, &bank, &KnnConfig { n_neighbors: 3, temperature: Some(tau) }).unwrap();
    assert_eq!(tempered.class, 0);
    // direct 64-bit evaluation on the f32-rounded similarities
    let sims: Vec<f64> = (0..3)
        .map(|i| {
            let v = bank.vector(i);
            (v[0] as f64) / ((v[0] as f64).powi(2) + (v[1] as f64).powi(2)).sqrt()
        })
        .collect();
    let oracle = [(sims[0] / tau).exp(), (sims[1] / tau).exp() + (sims[2] / tau).exp()];
    assert!(oracle[0] > oracle[1]);
    for (class, score) in &tempered.scores {
        let expect = oracle[*class as usize];
        assert!((score - expect).abs() <= 1e-9 * expect, "class {class}: {score} vs {expect}");
    }
}

#[test]
fn batched_features_match_single_encodes() {
    let (net, params) = ModelNetwork::init::<f32>(&common::tiny_model(), 5).unwrap();
    let mut r = common::rng(3);
    let maps: Vec<TimeFrequencyMap> = (0..7)
        .map(|_| TimeFrequencyMap::new(8, 8, 3, (0..192).map(|_| r.random_range(0.0f32..1.0)).collect(), "").unwrap())
        .collect();
    let refs: Vec<_> = maps.iter().collect();
    let labels = vec![0u16; 7];
    let bank = extract_features(&net.encoder, &params, &refs, &labels, 3).unwrap();
    assert_eq!(bank.len(), 7);
    for (i, map) in maps.iter().enumerate() {
        let single = net.encoder.encode(&params, &[map]).unwrap();
        for (a, b) in bank.vector(i).iter().zip(single.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

fn random_bank(r: &mut impl Rng, n: usize, d: usize, classes: u16) -> FeatureBank {
    let vectors = (0..n * d).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    FeatureBank::new(d, vectors, labels).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_match_direct_top_k_sum(seed in any::<u64>(), k in 1usize..6, tau in proptest::option::of(0.02f64..1.0)) {
        let mut r = common::rng(seed);
        let bank = random_bank(&mut r, 12, 4, 3);
        let query: Vec<f32> = (0..4).map(|_| r.random_range(-1.0f32..1.0)).collect();
        let pred = classify(&query, &bank, &KnnConfig { n_neighbors: k, temperature: tau }).unwrap();
        let norm = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let mut sims: Vec<(f64, usize)> = (0..bank.len())
            .map(|i| {
                let v = bank.vector(i);
                let dot: f64 = v.iter().zip(&query).map(|(&a, &b)| a as f64 * b as f64).sum();
                (dot / (norm(v) * norm(&query)), i)
            })
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut oracle = [0.0f64; 3];
        for &(s, i) in &sims[..k] {
            oracle[bank.labels()[i] as usize] += tau.map_or(1.0, |t| (s / t).exp());
        }
        for (class, score) in &pred.scores {
            let expect = oracle[*class as usize];
            prop_assert!((score - expect).abs() <= 1e-6 * expect.max(1.0));
        }
        let best = oracle.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((oracle[pred.class as usize] - best).abs() <= 1e-6 * best.max(1.0));
    }

    #[test]
    fn confusion_rows_sum_to_one_hundred(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let bank = random_bank(&mut r, 10, 3, 3);
        let test = random_bank(&mut r, 15, 3, 4);
        let report = evaluate(&test, &bank, &KnnConfig { n_neighbors: 3, temperature: Some(0.07) }).unwrap();
        prop_assert!((0.0..=1.0).contains(&report.accuracy));
        for row in &report.confusion {
            prop_assert!((row.iter().sum::<f64>() - 100.0).abs() < 0.1);
        }
    }
}
