use neat_core::eval::{compare, evaluate, spearman};
use neat_core::lm::{ModelConfig, ModelParams};
use neat_core::prefdata::{Dataset, Split};
use neat_core::reward::score;
use neat_core::synth::{ReferenceTask, TaskConfig};
use proptest::prelude::*;

fn task() -> ReferenceTask {
    ReferenceTask::generate(TaskConfig {
        corpus_size: 0,
        ..TaskConfig::default()
    })
    .unwrap()
}

#[test]
fn uniform_model_perplexity_is_vocab_size() {
    let t = task();
    let m = evaluate(&ModelParams::zeros(ModelConfig::default()), &t.test, &t.spec).unwrap();
    assert!((m.ppl - 32.0).abs() < 1e-9);
    assert!(m.avg_reward.is_finite());
}

#[test]
fn stored_best_responses_score_as_stored() {
    let t = task();
    let stored: f64 = t.test.records().iter().map(|r| r.best().reward).sum::<f64>() / t.test.len() as f64;
    let rescored: f64 = t
        .test
        .records()
        .iter()
        .map(|r| score(&t.spec, &r.query, &r.best().response).unwrap())
        .sum::<f64>()
        / t.test.len() as f64;
    assert_eq!(stored, rescored);
}

#[test]
fn empty_test_split_is_rejected() {
    let t = task();
    let empty = Dataset::empty(&t.spec, Split::Test);
    assert!(evaluate(&ModelParams::zeros(ModelConfig::default()), &empty, &t.spec).is_err());
}

#[test]
fn self_comparison_and_infinite_margin_tie() {
    let t = task();
    let a = ModelParams::init_with_std(ModelConfig::default(), 1, 0.5);
    let b = ModelParams::init_with_std(ModelConfig::default(), 2, 0.5);
    let c = compare(&a, &a, &t.test, &t.spec, 0.5).unwrap();
    assert_eq!((c.win, c.lose, c.tie), (0, 0, t.test.len()));
    let c = compare(&a, &b, &t.test, &t.spec, f64::INFINITY).unwrap();
    assert_eq!(c.tie, t.test.len());
    assert!(compare(&a, &b, &t.test, &t.spec, -1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn comparison_is_antisymmetric(sa in 0u64..1000, sb in 0u64..1000, margin in 0.0f64..3.0) {
        let t = task();
        let a = ModelParams::init_with_std(ModelConfig::default(), sa, 0.8);
        let b = ModelParams::init_with_std(ModelConfig::default(), sb, 0.8);
        let ab = compare(&a, &b, &t.test, &t.spec, margin).unwrap();
        let ba = compare(&b, &a, &t.test, &t.spec, margin).unwrap();
        prop_assert_eq!((ab.win, ab.lose, ab.tie), (ba.lose, ba.win, ba.tie));
        prop_assert_eq!(ab.total(), t.test.len());
    }

    #[test]
    fn spearman_is_bounded(xs in prop::collection::vec(-5.0f64..5.0, 2..40)) {
        let steps: Vec<f64> = (0..xs.len()).map(|i| i as f64).collect();
        let rho = spearman(&steps, &xs).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&rho));
    }
}
