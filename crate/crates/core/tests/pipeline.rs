use proptest::prelude::*;
use tempfile::TempDir;

use crm::conformal::{empirical_quantile, thr_set_from_scores};
use crm::data::{gen_gmm, split_dataset};
use crm::eval::{evaluate, reference_linear_model};
use crm::trainer::{train, TrainConfig};
use crm::{ConformalConfig, Dataset, EstimatorKind, GmmSpec, Model, ScoreKind};

fn mixture(n: usize, seed: u64) -> (Dataset, Dataset, Dataset) {
    let spec = GmmSpec {
        num_samples: n,
        seed,
        ..GmmSpec::default()
    };
    split_dataset(gen_gmm(&spec).unwrap(), (n / 2, n / 4, n / 4), seed).unwrap()
}

fn cfg(estimator: EstimatorKind) -> TrainConfig {
    TrainConfig {
        batch_size: 100,
        epochs: 4,
        estimator,
        conformal: ConformalConfig {
            alpha: 0.1,
            ..Default::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn trained_model_survives_a_checkpoint_and_keeps_coverage() {
    let (tr, cal, te) = mixture(4000, 1);
    let model = Model::init(Model::linear_topology(2, 3), 0).unwrap();
    let (trained, history) = train(model, &tr, &cal, &te, &cfg(EstimatorKind::MRanking { m: 6 })).unwrap();
    assert_eq!(history.records.len(), 4);
    assert!(history.records.iter().all(|r| r.train_loss.is_finite()));

    let dir = TempDir::new().unwrap();
    let path = dir.path().join("m.crml");
    trained.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back, trained);

    let report = evaluate(&back, &cal, &te, 0.1, 20, 0, ScoreKind::LogProbability).unwrap();
    assert!((report.coverage - 0.9).abs() < 0.05, "coverage {}", report.coverage);
    assert!(report.avg_set_size >= 1.0 && report.avg_set_size <= 3.0);
}

#[test]
fn naive_and_ranked_runs_differ_but_each_repeats() {
    let (tr, cal, te) = mixture(2000, 2);
    let init = Model::init(Model::mlp_topology(2, &[8], 3), 5).unwrap();
    let run = |k| train(init.clone(), &tr, &cal, &te, &cfg(k)).unwrap();
    let (a, ha) = run(EstimatorKind::Naive);
    let (b, _) = run(EstimatorKind::Naive);
    let (c, hc) = run(EstimatorKind::MRanking { m: 6 });
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(ha.records.iter().all(|r| r.mean_selected == 1.0));
    assert!(hc.records.iter().all(|r| r.mean_selected > 1.0));
}

#[test]
fn dataset_cache_round_trips() {
    let ds = gen_gmm(&GmmSpec {
        num_samples: 300,
        ..GmmSpec::default()
    })
    .unwrap();
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("g.crmd");
    ds.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(back.examples, ds.examples);
    assert_eq!((back.num_classes, back.feature_dim), (3, 2));
}

#[test]
fn reference_model_calibrates_on_fresh_draws() {
    let (_, cal, te) = mixture(8000, 3);
    let report = evaluate(&reference_linear_model(), &cal, &te, 0.05, 50, 1, ScoreKind::Probability).unwrap();
    assert!((report.coverage - 0.95).abs() < 0.03, "coverage {}", report.coverage);
}

proptest! {
    #[test]
    fn calibrated_threshold_covers_its_own_scores(
        scores in prop::collection::vec(-20.0f64..20.0, 1..200),
        alpha in 0.001f64..0.999,
    ) {
        let q = empirical_quantile(&scores, alpha).unwrap();
        let n = scores.len();
        let covered = scores.iter().filter(|s| **s >= q.tau).count();
        prop_assert!(covered as f64 >= (1.0 - alpha) * n as f64 - 1e-9);
        prop_assert!(thr_set_from_scores(&scores, q.tau).labels().contains(&q.rank_index));
    }
}
