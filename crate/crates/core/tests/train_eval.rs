use std::collections::BTreeMap;

use bvqa_core::eval::{coral_distance, ensemble, evaluate_scores, spearman, sweep_kappa};
use bvqa_core::train::{finetune, predict, Adam, AdamConfig};
use bvqa_core::{
    HeadConfig, HeadParams, LabeledVideo, LogisticParams, ModelParams, PoolingConfig, Scored, Tensor,
    TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn adam_trajectory(seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Tensor::vector((0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
    let mut b = Tensor::vector(vec![0.5, -0.5]);
    let mut adam = Adam::new(AdamConfig {
        weight_decay: 1e-3,
        ..AdamConfig::default()
    })
    .unwrap();
    for _ in 0..10 {
        let gw = Tensor::vector((0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
        let gb = Tensor::vector(vec![rng.random_range(-1.0..1.0), 0.0]);
        adam.step(1e-2, vec![("w".into(), &mut w), ("b".into(), &mut b)], &[gw, gb]).unwrap();
    }
    assert_eq!(adam.steps(), 10);
    vec![w, b]
}

#[test]
fn adam_ten_steps_are_reproducible() {
    let a = adam_trajectory(17);
    let b = adam_trajectory(17);
    let bits = |ts: &[Tensor]| ts.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&adam_trajectory(18)));
}

fn items(db: &str, pred: &[f64], mos: &[f64]) -> Vec<Scored> {
    pred.iter()
        .zip(mos)
        .map(|(&p, &m)| Scored {
            database_id: db.into(),
            prediction: p,
            mos: m,
        })
        .collect()
}

#[test]
fn monotone_predictions_rank_perfectly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mos: Vec<f64> = (0..60).map(|_| rng.random_range(1.0..5.0)).collect();
    let pred: Vec<f64> = mos.iter().map(|m| (m * 0.7).exp() - 3.0).collect();
    let report = evaluate_scores(&items("k", &pred, &mos)).unwrap();
    let db = report.database("k").unwrap();
    assert!((db.srcc.unwrap() - 1.0).abs() < 1e-12);
    assert!(db.plcc.unwrap() > 0.99);
}

#[test]
fn random_predictions_show_no_rank_correlation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mos: Vec<f64> = (0..1000).map(|_| rng.random_range(1.0..5.0)).collect();
    let pred: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..1.0)).collect();
    let srcc = spearman(&pred, &mos).unwrap();
    assert!(srcc.abs() < 0.1, "srcc {srcc}");
}

#[test]
fn weighted_average_uses_database_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut all = Vec::new();
    for (db, n) in [("a", 10), ("b", 30), ("c", 7)] {
        let mos: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..5.0)).collect();
        let pred: Vec<f64> = mos.iter().map(|m| m + rng.random_range(-1.0..1.0)).collect();
        all.extend(items(db, &pred, &mos));
    }
    let report = evaluate_scores(&all).unwrap();
    let total: f64 = report.databases.iter().map(|d| d.n as f64).sum();
    let want: f64 = report.databases.iter().map(|d| d.n as f64 * d.srcc.unwrap()).sum::<f64>() / total;
    assert!((report.weighted_srcc.unwrap() - want).abs() < 1e-12);
    let weights: f64 = report.databases.iter().map(|d| d.weight).sum();
    assert!((weights - 1.0).abs() < 1e-12);
}

fn rotate(rows: &[f64], n: usize, angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    let mut out = rows.to_vec();
    for i in 0..n {
        let (x, y) = (rows[i * 3], rows[i * 3 + 1]);
        out[i * 3] = c * x - s * y;
        out[i * 3 + 1] = s * x + c * y;
    }
    out
}

#[test]
fn coral_is_symmetric_and_rotating_one_side_changes_it() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut draw = |n: usize, scale: [f64; 3]| -> Vec<f64> {
        (0..n * 3)
            .map(|k| scale[k % 3] * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect()
    };
    let a = draw(40, [2.0, 0.5, 1.0]);
    let b = draw(25, [1.0, 1.5, 0.3]);
    let base = coral_distance(&a, 40, &b, 25, 3).unwrap();
    assert_eq!(base, coral_distance(&b, 25, &a, 40, 3).unwrap());
    assert_eq!(coral_distance(&a, 40, &a, 40, 3).unwrap(), 0.0);

    let both = coral_distance(&rotate(&a, 40, 0.7), 40, &rotate(&b, 25, 0.7), 25, 3).unwrap();
    assert!((both - base).abs() < 1e-10);
    let one = coral_distance(&rotate(&a, 40, 0.7), 40, &b, 25, 3).unwrap();
    assert!((one - base).abs() > 1e-6, "one-sided rotation left the distance at {one}");
}

#[test]
fn ensemble_endpoints_and_midpoint() {
    let a = [1.0, 3.0];
    let b = [3.0, 1.0];
    assert_eq!(ensemble(&a, &b, 1.0).unwrap(), a);
    assert_eq!(ensemble(&a, &b, 0.0).unwrap(), b);
    assert_eq!(ensemble(&a, &b, 0.5).unwrap(), vec![2.0, 2.0]);
    assert!(ensemble(&a, &b[..1], 0.5).is_err());
    assert!(ensemble(&a, &b, 1.5).is_err());
}

#[test]
fn sweep_covers_the_hundredth_grid() {
    let mos: Vec<f64> = (0..20).map(|i| i as f64).collect();
    let noise: Vec<f64> = (0..20).map(|i| ((i * 7) % 20) as f64).collect();
    let ids = vec!["db".to_string(); 20];
    let result = sweep_kappa(&mos, &noise, &mos, &ids).unwrap();
    assert_eq!(result.points.len(), 101);
    assert_eq!(result.points[37].kappa, 0.37);
    assert!(result.best_kappa > 0.5);
}

fn small_head() -> HeadConfig {
    HeadConfig {
        input_dim: 6,
        reduced_dim: 4,
        hidden: 3,
    }
}

#[test]
fn model_params_round_trip_through_json() {
    let head = HeadParams::init(&small_head(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut logistic = BTreeMap::new();
    logistic.insert("db".to_string(), LogisticParams { gamma: [1.5, 0.1, 2.0, -0.3] });
    let model = ModelParams {
        head,
        pooling: PoolingConfig { tau: 5, beta: 0.25 },
        logistic,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    model.save(&path).unwrap();
    assert_eq!(ModelParams::load(&path).unwrap(), model);
}

fn videos(db: &str, n: usize, seed: u64) -> Vec<LabeledVideo> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let q: f64 = rng.random_range(-1.0..1.0);
            let data = (0..5 * 6).map(|k| if k % 6 == 0 { q } else { 0.0 } + rng.random_range(-0.3..0.3)).collect();
            LabeledVideo {
                video_id: format!("{db}{i}"),
                database_id: db.into(),
                mos: 3.0 + q,
                features: Tensor::matrix(5, 6, data).unwrap(),
            }
        })
        .collect()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        epochs: 3,
        lr: 1e-2,
        seed: 5,
        head: small_head(),
        ..TrainConfig::default()
    }
}

#[test]
fn finetune_needs_a_full_list_per_database() {
    let mut train = videos("a", 16, 1);
    train.extend(videos("b", 5, 2));
    let err = finetune(&train, &videos("a", 6, 3), &small_cfg(), 1).unwrap_err();
    assert!(err.to_string().contains('b'), "{err}");
}

#[test]
fn single_database_training_is_reproducible() {
    let train = videos("a", 24, 1);
    let val = videos("a", 10, 2);
    let first = finetune(&train, &val, &small_cfg(), 1).unwrap();
    let second = finetune(&train, &val, &small_cfg(), 2).unwrap();
    assert_eq!(first.params, second.params);
    assert_eq!(first.history, second.history);
    assert_eq!(first.history.len(), 3);
    assert!(first.params.logistic.contains_key("a"));
    let p1 = predict(&first.params, &val, 1).unwrap();
    let p2 = predict(&first.params, &val, 3).unwrap();
    assert_eq!(p1, p2);
}
