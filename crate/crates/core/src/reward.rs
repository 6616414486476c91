//! Deterministic programmatic reward model and exact expectation of any
//! response functional under the model's sampling distribution.
//!
//! A response earns `w_good` per occurrence of a token from its query
//! family's good set, `w_bad` per occurrence of a globally bad token,
//! `w_len` per token beyond the target length and `w_trunc` once when it
//! was cut at `max_len`. Truncation is visible from the tokens alone: a
//! truncated response carries `max_len` drawn tokens plus the appended EOS.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NeatError, Result};
use crate::lm::{log_softmax, ModelParams, Transformer};
use crate::tokens::{is_special, query_context, TokenId, TokenSeq, EOS};

pub const REWARD_SPEC_VERSION: u32 = 1;

/// Upper bound on the number of responses an exact enumeration may visit.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// A query family: queries starting with `key` are scored against `good`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Family {
    pub id: String,
    pub key: Vec<TokenId>,
    pub good: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub v: u32,
    pub families: Vec<Family>,
    pub bad: Vec<TokenId>,
    pub w_good: f64,
    pub w_bad: f64,
    pub w_len: f64,
    pub w_trunc: f64,
    pub target_len: usize,
    pub max_len: usize,
}

/// Where a scored response came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Dataset,
    PositivePrompt,
    NegativePrompt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredResponse {
    #[serde(rename = "tokens")]
    pub response: TokenSeq,
    pub reward: f64,
    pub origin: Origin,
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        if self.v != REWARD_SPEC_VERSION {
            return Err(NeatError::Format(format!(
                "reward spec version {} is not supported",
                self.v
            )));
        }
        let bad_weights = !(self.w_good > 0.0)
            || !(self.w_bad < 0.0)
            || !(self.w_len <= 0.0)
            || !(self.w_trunc <= 0.0)
            || ![self.w_good, self.w_bad, self.w_len, self.w_trunc]
                .iter()
                .all(|w| w.is_finite());
        if bad_weights {
            return Err(NeatError::Domain(
                "reward weights need w_good > 0, w_bad < 0, w_len <= 0, w_trunc <= 0".into(),
            ));
        }
        if self.max_len == 0 || self.target_len == 0 {
            return Err(NeatError::Domain("max_len and target_len must be positive".into()));
        }
        let bad: BTreeSet<_> = self.bad.iter().collect();
        if self.bad.iter().any(|&t| is_special(t)) {
            return Err(NeatError::Domain("bad tokens may not be special".into()));
        }
        let mut ids = BTreeSet::new();
        for f in &self.families {
            if !ids.insert(&f.id) {
                return Err(NeatError::Domain(format!("duplicate family id {}", f.id)));
            }
            if f.good.iter().any(|t| is_special(*t) || bad.contains(t)) {
                return Err(NeatError::Domain(format!(
                    "family {} has special or bad tokens in its good set",
                    f.id
                )));
            }
            if f.key.is_empty() || f.key.iter().any(|&t| is_special(t)) {
                return Err(NeatError::Domain(format!("family {} has an invalid key", f.id)));
            }
        }
        for (i, a) in self.families.iter().enumerate() {
            for b in &self.families[i + 1..] {
                if a.key.starts_with(&b.key) || b.key.starts_with(&a.key) {
                    return Err(NeatError::Domain(format!(
                        "family keys of {} and {} overlap",
                        a.id, b.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn family_of(&self, query: &TokenSeq) -> Result<&Family> {
        self.families
            .iter()
            .find(|f| query.tokens().starts_with(&f.key))
            .ok_or_else(|| NeatError::Lookup(format!("no reward family matches query {query}")))
    }

    pub fn family_by_id(&self, id: &str) -> Result<&Family> {
        self.families
            .iter()
            .find(|f| f.id == id)
            .ok_or_else(|| NeatError::Lookup(format!("unknown family {id}")))
    }

    pub fn is_bad(&self, token: TokenId) -> bool {
        self.bad.contains(&token)
    }

    /// Largest possible |reward| for responses of at most `max_len` drawn
    /// tokens.
    pub fn reward_bound(&self) -> f64 {
        let m = self.max_len as f64;
        m * self.w_good.abs().max(self.w_bad.abs()) + self.w_trunc.abs() + m * self.w_len.abs()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: RewardSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::lm::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NeatError::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Oracle reward of `response` to `query`.
pub fn score(spec: &RewardSpec, query: &TokenSeq, response: &TokenSeq) -> Result<f64> {
    response.validate_response()?;
    let body = response.body();
    if body.len() > spec.max_len {
        return Err(NeatError::Structure(format!(
            "response {response} has more than {} drawn tokens",
            spec.max_len
        )));
    }
    let family = spec.family_of(query)?;
    let good = body.iter().filter(|t| family.good.contains(t)).count() as f64;
    let bad = body.iter().filter(|t| spec.bad.contains(t)).count() as f64;
    let excess = response.len().saturating_sub(spec.target_len) as f64;
    let truncated = body.len() == spec.max_len;
    let mut r = spec.w_good * good + spec.w_bad * bad + spec.w_len * excess;
    if truncated {
        r += spec.w_trunc;
    }
    Ok(r)
}

pub fn score_response(
    spec: &RewardSpec,
    query: &TokenSeq,
    response: TokenSeq,
    origin: Origin,
) -> Result<ScoredResponse> {
    let reward = score(spec, query, &response)?;
    Ok(ScoredResponse {
        response,
        reward,
        origin,
    })
}

/// Number of distinct responses with at most `max_len` drawn tokens over a
/// vocabulary of `vocab` tokens (EOS-terminated strings plus truncated
/// strings of exactly `max_len` tokens).
pub fn response_space_size(vocab: usize, max_len: usize) -> u128 {
    let c = (vocab - 1) as u128;
    let mut total: u128 = 0;
    let mut pow: u128 = 1;
    for _ in 0..max_len {
        total = total.saturating_add(pow);
        pow = pow.saturating_mul(c);
    }
    total.saturating_add(pow)
}

/// Exact expectation of a response functional under the sampling
/// distribution at temperature 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Expectation {
    pub value: f64,
    /// Probability mass visited; one up to rounding.
    pub total_prob: f64,
    pub sequences: u64,
}

/// Visits every response of at most `max_len` drawn tokens with its exact
/// model probability.
pub fn enumerate_responses(
    params: &ModelParams,
    query: &TokenSeq,
    max_len: usize,
    mut visit: impl FnMut(&TokenSeq, f64),
) -> Result<u64> {
    params.check_finite()?;
    let cfg = params.config();
    let requested = response_space_size(cfg.vocab, max_len);
    if requested > ENUMERATION_LIMIT {
        return Err(NeatError::Capacity {
            requested,
            limit: ENUMERATION_LIMIT,
        });
    }
    let ctx = query_context(query);
    if ctx.len() + max_len > cfg.max_len {
        return Err(NeatError::Length(format!(
            "context of {} tokens plus {max_len} response tokens exceeds {}",
            ctx.len(),
            cfg.max_len
        )));
    }
    let tf = Transformer::new(params);
    let (cache, logits) = tf.prime(&ctx)?;
    let mut body = Vec::with_capacity(max_len + 1);
    let mut count = 0u64;
    walk(&tf, cache, &logits, 0.0, &mut body, max_len, &mut visit, &mut count)?;
    Ok(count)
}

#[allow(clippy::too_many_arguments)]
fn walk(
    tf: &Transformer<'_>,
    cache: crate::lm::KvCache,
    logits: &[f64],
    logp: f64,
    body: &mut Vec<TokenId>,
    max_len: usize,
    visit: &mut impl FnMut(&TokenSeq, f64),
    count: &mut u64,
) -> Result<()> {
    let lp = log_softmax(logits);
    let depth = body.len();
    for tok in 0..lp.len() as TokenId {
        let child_logp = logp + lp[tok as usize];
        body.push(tok);
        if tok == EOS {
            visit(&TokenSeq::new(body.clone()), child_logp.exp());
            *count += 1;
        } else if depth + 1 == max_len {
            let mut r = body.clone();
            r.push(EOS);
            visit(&TokenSeq::new(r), child_logp.exp());
            *count += 1;
        } else {
            let mut child = cache.clone();
            let child_logits = tf.step(tok, &mut child)?;
            walk(tf, child, &child_logits, child_logp, body, max_len, visit, count)?;
        }
        body.pop();
    }
    Ok(())
}

/// `E[f(y)]` over responses to `query`, computed exactly by enumeration.
pub fn exact_expectation(
    params: &ModelParams,
    query: &TokenSeq,
    max_len: usize,
    mut f: impl FnMut(&TokenSeq) -> Result<f64>,
) -> Result<Expectation> {
    let mut value = 0.0;
    let mut total_prob = 0.0;
    let mut err = None;
    let sequences = enumerate_responses(params, query, max_len, |resp, p| {
        total_prob += p;
        if err.is_none() {
            match f(resp) {
                Ok(v) => value += p * v,
                Err(e) => err = Some(e),
            }
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    Ok(Expectation {
        value,
        total_prob,
        sequences,
    })
}

/// Exact expected oracle reward of the model's responses to `query`.
pub fn exact_expected_reward(
    params: &ModelParams,
    spec: &RewardSpec,
    query: &TokenSeq,
    max_len: usize,
) -> Result<f64> {
    if max_len > spec.max_len {
        return Err(NeatError::Domain(format!(
            "enumeration horizon {max_len} exceeds the reward spec's max_len {}",
            spec.max_len
        )));
    }
    Ok(exact_expectation(params, query, max_len, |r| score(spec, query, r))?.value)
}

/// Exact probability that a response to `query` holds at least one bad token.
pub fn exact_bad_mass(
    params: &ModelParams,
    spec: &RewardSpec,
    query: &TokenSeq,
    max_len: usize,
) -> Result<f64> {
    let e = exact_expectation(params, query, max_len, |r| {
        Ok(if r.body().iter().any(|&t| spec.is_bad(t)) { 1.0 } else { 0.0 })
    })?;
    Ok(e.value)
}
