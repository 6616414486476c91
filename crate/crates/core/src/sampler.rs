//! Prompt-driven online sampling.
//!
//! A template prefix is placed between BOS and the query; the response is
//! sampled from that prompted context but always scored against the plain
//! query.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NeatError, Result};
use crate::lm::{sample_response, ModelParams};
use crate::reward::{score, Origin, RewardSpec, ScoredResponse};
use crate::tokens::{is_special, TokenId, TokenSeq, BOS, SEP};

/// Sampling temperature used for online sampling.
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Positive,
    Negative,
}

impl PromptKind {
    pub fn origin(self) -> Origin {
        match self {
            PromptKind::Positive => Origin::PositivePrompt,
            PromptKind::Negative => Origin::NegativePrompt,
        }
    }

    fn tag(self) -> u64 {
        match self {
            PromptKind::Positive => 1,
            PromptKind::Negative => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub kind: PromptKind,
    pub prefix: TokenSeq,
}

impl PromptTemplate {
    pub fn new(kind: PromptKind, prefix: Vec<TokenId>) -> Result<Self> {
        let t = PromptTemplate {
            kind,
            prefix: TokenSeq::new(prefix),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prefix.tokens().iter().any(|&t| is_special(t)) {
            return Err(NeatError::Structure(format!(
                "prompt prefix {} contains special tokens",
                self.prefix
            )));
        }
        Ok(())
    }

    /// `[BOS, prefix, query, SEP]`; the response follows SEP.
    pub fn render(&self, query: &TokenSeq) -> TokenSeq {
        let mut out = Vec::with_capacity(self.prefix.len() + query.len() + 2);
        out.push(BOS);
        out.extend_from_slice(self.prefix.tokens());
        out.extend_from_slice(query.tokens());
        out.push(SEP);
        TokenSeq::new(out)
    }
}

/// Checked [`PromptTemplate::render`]: the rendered context plus
/// `response_budget` new tokens must fit in `context_len`.
pub fn render(
    template: &PromptTemplate,
    query: &TokenSeq,
    context_len: usize,
    response_budget: usize,
) -> Result<TokenSeq> {
    let out = template.render(query);
    if out.len() + response_budget > context_len {
        return Err(NeatError::Length(format!(
            "prompted context of {} tokens leaves no room for {response_budget} response tokens in {context_len}",
            out.len()
        )));
    }
    Ok(out)
}

/// The prompt set P: templates in the order they are applied.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptSet(pub Vec<PromptTemplate>);

impl PromptSet {
    pub fn templates(&self) -> &[PromptTemplate] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, kind: PromptKind) -> Option<&PromptTemplate> {
        self.0.iter().find(|t| t.kind == kind)
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.0 {
            t.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: PromptSet = serde_json::from_str(text)?;
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::lm::write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NeatError::io(path, e))?;
        Self::from_json(&text)
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a list of words into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6a09_e667_f3bc_c909, |h, &p| mix(h ^ mix(p)))
}

/// Seed of one online sample; a pure function of its coordinates, so the
/// sample does not depend on the order in which samples are drawn.
pub fn sample_seed(run_seed: u64, step: u64, query_id: u64, kind: PromptKind) -> u64 {
    derive_seed(&[run_seed, step, query_id, kind.tag()])
}

/// Samples from the prompted context and scores against the plain query.
#[allow(clippy::too_many_arguments)]
pub fn sample_prompt_driven(
    params: &ModelParams,
    template: &PromptTemplate,
    query: &TokenSeq,
    spec: &RewardSpec,
    lambda: f64,
    max_len: usize,
    rng_seed: u64,
) -> Result<ScoredResponse> {
    if !(lambda > 0.0) {
        return Err(NeatError::Domain(format!(
            "sampling temperature must be positive, got {lambda}"
        )));
    }
    let context = render(template, query, params.config().max_len, max_len)?;
    let response = sample_response(params, &context, lambda, max_len, rng_seed)?;
    let reward = score(spec, query, &response)?;
    Ok(ScoredResponse {
        response,
        reward,
        origin: template.kind.origin(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_prefix_renders_plain_context() {
        let t = PromptTemplate::new(PromptKind::Positive, vec![]).unwrap();
        let q = TokenSeq::new(vec![11, 12, 19]);
        assert_eq!(t.render(&q), TokenSeq::new(vec![BOS, 11, 12, 19, SEP]));
    }

    #[test]
    fn render_length() {
        let t = PromptTemplate::new(PromptKind::Negative, vec![7, 8, 9, 10]).unwrap();
        let q = TokenSeq::new(vec![11, 12, 19]);
        assert_eq!(t.render(&q).len(), 1 + 4 + 3 + 1);
        assert!(render(&t, &q, 10, 2).is_err());
        assert!(render(&t, &q, 11, 2).is_ok());
    }

    #[test]
    fn prefix_may_not_hold_specials() {
        assert!(PromptTemplate::new(PromptKind::Positive, vec![3, SEP]).is_err());
    }

    #[test]
    fn seeds_differ_by_coordinate() {
        let base = sample_seed(1, 2, 3, PromptKind::Positive);
        assert_eq!(base, sample_seed(1, 2, 3, PromptKind::Positive));
        assert_ne!(base, sample_seed(1, 2, 3, PromptKind::Negative));
        assert_ne!(base, sample_seed(1, 2, 4, PromptKind::Positive));
        assert_ne!(base, sample_seed(1, 3, 3, PromptKind::Positive));
        assert_ne!(base, sample_seed(2, 2, 3, PromptKind::Positive));
    }

    #[test]
    fn prompt_set_json() {
        let set = PromptSet(vec![
            PromptTemplate::new(PromptKind::Positive, vec![3, 4]).unwrap(),
            PromptTemplate::new(PromptKind::Negative, vec![5, 6]).unwrap(),
        ]);
        let text = serde_json::to_string(&set).unwrap();
        assert_eq!(
            text,
            r#"[{"kind":"positive","prefix":[3,4]},{"kind":"negative","prefix":[5,6]}]"#
        );
        assert_eq!(PromptSet::from_json(&text).unwrap(), set);
    }
}
