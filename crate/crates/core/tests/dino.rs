mod common;

use proptest::prelude::*;
use rand::Rng;
use wavedino::dino::{
    cross_entropy, diagnostics, dino_loss, ema_update_teacher, entropy, kl_divergence, teacher_momentum,
    tempered_softmax, Center,
};
use wavedino::model::ModelNetwork;

fn random_distribution(k: usize, r: &mut impl Rng) -> Vec<f64> {
    let logits: Vec<f64> = (0..k).map(|_| r.random_range(-4.0..4.0)).collect();
    tempered_softmax(&logits, r.random_range(0.05..2.0)).unwrap()
}

#[test]
fn softmax_at_teacher_temperature_matches_pairwise_oracle() {
    let logits = [0.31, -0.2, 0.95, 0.94, -1.0];
    let tau = 0.04;
    let p = tempered_softmax(&logits, tau).unwrap();
    for (i, &qi) in logits.iter().enumerate() {
        let oracle = 1.0 / logits.iter().map(|&qj| ((qj - qi) / tau).exp()).sum::<f64>();
        assert!((p[i] - oracle).abs() < 1e-15, "{i}: {} vs {oracle}", p[i]);
    }
}

#[test]
fn loss_averages_every_cross_view_pair() {
    let mut r = common::rng(1);
    let teacher: Vec<Vec<f64>> = (0..2).map(|_| random_distribution(6, &mut r)).collect();
    let student: Vec<Vec<f64>> = (0..5).map(|_| random_distribution(6, &mut r)).collect();
    // (t, s) pairs with s ≠ t: 2·5 − 2 = 8
    let mut total = 0.0;
    let mut pairs = 0;
    for t in 0..2 {
        for s in 0..5 {
            if s != t {
                total -= (0..6).map(|k| teacher[t][k] * student[s][k].ln()).sum::<f64>();
                pairs += 1;
            }
        }
    }
    assert_eq!(pairs, 8);
    assert!((dino_loss(&student, &teacher).unwrap() - total / 8.0).abs() < 1e-12);
}

#[test]
fn teacher_ema_follows_closed_form() {
    let cfg = common::tiny_model();
    let (_, mut teacher) = ModelNetwork::init::<f64>(&cfg, 1).unwrap();
    let (_, student) = ModelNetwork::init::<f64>(&cfg, 2).unwrap();
    let start = teacher.clone();
    let (m, steps) = (0.9, 7);
    for _ in 0..steps {
        ema_update_teacher(&mut teacher, &student, m).unwrap();
    }
    let w = m.powi(steps);
    for ((t, t0), s) in teacher.tensors().iter().zip(start.tensors()).zip(student.tensors()) {
        for ((a, b), c) in t.data().iter().zip(t0.data()).zip(s.data()) {
            assert!((a - (w * b + (1.0 - w) * c)).abs() < 1e-12);
        }
    }
    let mut frozen = start.clone();
    ema_update_teacher(&mut frozen, &student, 1.0).unwrap();
    assert_eq!(frozen, start);
    ema_update_teacher(&mut frozen, &student, 0.0).unwrap();
    assert_eq!(frozen, student);
}

#[test]
fn center_follows_closed_form_for_a_fixed_batch() {
    let batch = vec![vec![1.0, -2.0, 0.5], vec![3.0, 0.0, 0.5]];
    let mean = [2.0, -1.0, 0.5];
    let mut c = Center::zeros(3, 0.9);
    for _ in 0..5 {
        c.apply_and_update(&batch).unwrap();
    }
    for (v, m) in c.values.iter().zip(mean) {
        assert!((v - (1.0 - 0.9f64.powi(5)) * m).abs() < 1e-12);
    }
    let mut still = Center::zeros(3, 1.0);
    still.apply_and_update(&batch).unwrap();
    assert_eq!(still.values, vec![0.0; 3]);
    let mut snap = Center::zeros(3, 0.0);
    let centered = snap.apply_and_update(&batch).unwrap();
    assert_eq!(centered, batch);
    assert_eq!(snap.values, mean.to_vec());
}

#[test]
fn center_matches_hand_unrolled_recurrence() {
    let batches = [
        vec![vec![1.0, 0.0], vec![3.0, 2.0]],
        vec![vec![-1.0, 4.0]],
        vec![vec![0.5, 0.5], vec![1.5, -0.5], vec![1.0, 3.0]],
    ];
    let means = [[2.0, 1.0], [-1.0, 4.0], [1.0, 1.0]];
    let mut c = Center::zeros(2, 0.9);
    for b in &batches {
        c.apply_and_update(b).unwrap();
    }
    for k in 0..2 {
        let c1 = 0.1 * means[0][k];
        let c2 = 0.9 * c1 + 0.1 * means[1][k];
        let c3 = 0.9 * c2 + 0.1 * means[2][k];
        assert!((c.values[k] - c3).abs() < 1e-9);
    }
}

#[test]
fn momentum_schedule_endpoints() {
    assert_eq!(teacher_momentum(0, 100, 0.996), 0.996);
    assert_eq!(teacher_momentum(100, 100, 0.996), 1.0);
    assert!((teacher_momentum(50, 100, 0.996) - 0.998).abs() < 1e-12);
}

proptest! {
    #[test]
    fn cross_entropy_splits_into_kl_and_entropy(seed in any::<u64>(), k in prop::sample::select(vec![2usize, 16, 64])) {
        let mut r = common::rng(seed);
        let (p_t, p_s) = (random_distribution(k, &mut r), random_distribution(k, &mut r));
        let gap = cross_entropy(&p_t, &p_s) - kl_divergence(&p_t, &p_s) - entropy(&p_t);
        prop_assert!(gap.abs() < 1e-9);
    }

    #[test]
    fn entropy_is_bounded(seed in any::<u64>(), k in 2usize..80) {
        let p = random_distribution(k, &mut common::rng(seed));
        let h = entropy(&p);
        prop_assert!(h >= 0.0 && h <= (k as f64).ln() + 1e-12);
    }

    #[test]
    fn diagnostics_decompose_the_loss(seed in any::<u64>(), n_local in 0usize..4) {
        let mut r = common::rng(seed);
        let teacher: Vec<Vec<f64>> = (0..2).map(|_| random_distribution(8, &mut r)).collect();
        let student: Vec<Vec<f64>> = (0..2 + n_local).map(|_| random_distribution(8, &mut r)).collect();
        let d = diagnostics(&student, &teacher).unwrap();
        prop_assert!((d.target_entropy - d.kl - d.entropy).abs() < 1e-9);
    }
}
