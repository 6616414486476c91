mod common;

use common::{resp, toy_spec, zeros, V};
use neat_core::lm::{sample_response, ModelConfig, ModelParams};
use neat_core::reward::{
    enumerate_responses, exact_expectation, exact_expected_reward, score, RewardSpec,
};
use neat_core::tokens::{query_context, TokenSeq};
use neat_core::NeatError;
use proptest::prelude::*;

fn query() -> TokenSeq {
    TokenSeq::new(vec![11, 12, 19])
}

/// Expected reward of the uniform policy: the body length is geometric in
/// the EOS probability, and each drawn token is uniform over the V - 1
/// non-EOS tokens.
fn uniform_expected_reward(spec: &RewardSpec, good: usize) -> f64 {
    let v = V as f64;
    let stop = 1.0 / v;
    let per_token = (spec.w_good * good as f64 + spec.w_bad * spec.bad.len() as f64) / (v - 1.0);
    let m = spec.max_len;
    let mut total = 0.0;
    for k in 0..=m {
        let p = if k < m {
            (1.0 - stop).powi(k as i32) * stop
        } else {
            (1.0 - stop).powi(m as i32)
        };
        let excess = (k + 1).saturating_sub(spec.target_len) as f64;
        let mut r = k as f64 * per_token + spec.w_len * excess;
        if k == m {
            r += spec.w_trunc;
        }
        total += p * r;
    }
    total
}

#[test]
fn uniform_policy_closed_form() {
    for target_len in [1, 2, 6] {
        let spec = RewardSpec {
            target_len,
            ..toy_spec()
        };
        let exact = exact_expected_reward(&zeros(), &spec, &query(), spec.max_len).unwrap();
        let closed = uniform_expected_reward(&spec, 4);
        assert!((exact - closed).abs() < 1e-6, "{exact} vs {closed}");
    }
}

#[test]
fn zero_weights_give_zero_expectation() {
    let spec = RewardSpec {
        w_good: 0.0,
        w_bad: 0.0,
        w_len: 0.0,
        w_trunc: 0.0,
        ..toy_spec()
    };
    let p = ModelParams::init_with_std(ModelConfig::default(), 2, 0.4);
    let e = exact_expectation(&p, &query(), 3, |r| score(&spec, &query(), r)).unwrap();
    assert_eq!(e.value, 0.0);
}

#[test]
fn hand_scored_response() {
    let spec = RewardSpec {
        w_len: 0.0,
        max_len: 6,
        ..toy_spec()
    };
    assert_eq!(score(&spec, &query(), &resp(&[3, 4, 28, 5])).unwrap(), 1.0);
    assert_eq!(score(&spec, &query(), &resp(&[14, 15])).unwrap(), 0.0);
}

#[test]
fn monte_carlo_agrees_with_enumeration() {
    let spec = toy_spec();
    let p = ModelParams::init_with_std(ModelConfig::default(), 11, 0.5);
    let q = query();
    let exact = exact_expected_reward(&p, &spec, &q, 3).unwrap();
    let ctx = TokenSeq::new(query_context(&q));
    let n = 100_000;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for seed in 0..n {
        let r = score(&spec, &q, &sample_response(&p, &ctx, 1.0, 3, seed).unwrap()).unwrap();
        sum += r;
        sq += r * r;
    }
    let mean = sum / n as f64;
    let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
    assert!((mean - exact).abs() < 3.0 * se, "mc {mean} exact {exact} se {se}");
}

#[test]
fn enumeration_guard() {
    let err = enumerate_responses(&zeros(), &query(), 8, |_, _| {}).unwrap_err();
    assert!(matches!(err, NeatError::Capacity { .. }));
    let spec = toy_spec();
    assert!(exact_expected_reward(&zeros(), &spec, &query(), 4).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn enumeration_probabilities_sum_to_one(seed in 0u64..10_000, std in 0.05f64..1.5) {
        let p = ModelParams::init_with_std(ModelConfig::default(), seed, std);
        let e = exact_expectation(&p, &query(), 3, |_| Ok(1.0)).unwrap();
        prop_assert!((e.total_prob - 1.0).abs() < 1e-6);
        prop_assert_eq!(e.sequences, 1 + 31 + 31 * 31 + 31 * 31 * 31);
    }
}

proptest! {
    #[test]
    fn reward_ignores_token_order(body in prop::collection::vec(3u32..32, 0..4), seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        let spec = RewardSpec { max_len: 4, ..toy_spec() };
        let mut shuffled = body.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(
            score(&spec, &query(), &resp(&body)).unwrap(),
            score(&spec, &query(), &resp(&shuffled)).unwrap()
        );
    }
}

/// Independent re-implementation of the scoring rule.
fn rescore(spec: &RewardSpec, query: &TokenSeq, response: &TokenSeq) -> f64 {
    let family = spec.families.iter().find(|f| query.tokens().starts_with(&f.key)).unwrap();
    let body = &response.tokens()[..response.len() - 1];
    let mut r = 0.0;
    for t in body {
        if family.good.contains(t) {
            r += spec.w_good;
        }
        if spec.bad.contains(t) {
            r += spec.w_bad;
        }
    }
    if response.len() > spec.target_len {
        r += spec.w_len * (response.len() - spec.target_len) as f64;
    }
    if body.len() == spec.max_len {
        r += spec.w_trunc;
    }
    r
}

#[test]
fn enumeration_agrees_with_an_independent_scorer() {
    let spec = RewardSpec { target_len: 2, ..toy_spec() };
    let p = ModelParams::init_with_std(ModelConfig::default(), 21, 0.7);
    let q = query();
    let a = exact_expected_reward(&p, &spec, &q, 3).unwrap();
    let b = exact_expectation(&p, &q, 3, |r| Ok(rescore(&spec, &q, r))).unwrap().value;
    assert!((a - b).abs() < 1e-12);
}

proptest! {
    #[test]
    fn rewards_are_bounded(body in prop::collection::vec(0u32..32, 0..4).prop_filter("no EOS", |b| !b.contains(&1))) {
        let spec = RewardSpec { target_len: 1, ..toy_spec() };
        let r = score(&spec, &query(), &resp(&body)).unwrap();
        let m = spec.max_len as f64;
        let bound = m * spec.w_good.abs().max(spec.w_bad.abs()) + spec.w_trunc.abs() + (m + 1.0) * spec.w_len.abs();
        prop_assert!(r.abs() <= bound);
        prop_assert_eq!(r, rescore(&spec, &query(), &resp(&body)));
    }
}
