#![allow(dead_code)]

use neat_core::lm::{ModelConfig, ModelParams};
use neat_core::reward::{Family, Origin, RewardSpec, ScoredResponse, REWARD_SPEC_VERSION};
use neat_core::tokens::{TokenId, TokenSeq, EOS};

pub const V: usize = 32;

pub fn small_config() -> ModelConfig {
    ModelConfig {
        vocab: 8,
        d_model: 8,
        max_len: 12,
        n_blocks: 1,
        n_heads: 2,
    }
}

pub fn zeros() -> ModelParams {
    ModelParams::zeros(ModelConfig::default())
}

/// Two families keyed on the first two query tokens.
pub fn toy_spec() -> RewardSpec {
    RewardSpec {
        v: REWARD_SPEC_VERSION,
        families: vec![
            Family {
                id: "a".into(),
                key: vec![11, 12],
                good: vec![3, 4, 5, 6],
            },
            Family {
                id: "b".into(),
                key: vec![11, 13],
                good: vec![20, 21, 22, 23],
            },
        ],
        bad: vec![28, 29, 30, 31],
        w_good: 1.0,
        w_bad: -2.0,
        w_len: -0.05,
        w_trunc: -1.0,
        target_len: 6,
        max_len: 3,
    }
}

pub fn resp(body: &[TokenId]) -> TokenSeq {
    let mut t = body.to_vec();
    t.push(EOS);
    TokenSeq::new(t)
}

pub fn scored(body: &[TokenId], reward: f64) -> ScoredResponse {
    ScoredResponse {
        response: resp(body),
        reward,
        origin: Origin::Dataset,
    }
}
