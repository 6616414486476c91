//! Synthetic reference task.
//!
//! Token layout for the 32-token vocabulary:
//!
//! ```text
//! 0..=2    BOS, EOS, SEP
//! 3..=6    positive prompt prefix
//! 7..=10   negative prompt prefix
//! 11..=18  family key tokens; a query is [key_a, key_b, filler]
//! 19..=21  fillers used by training queries
//! 22..=24  fillers used by held-out queries
//! 28..=31  globally bad tokens
//! ```
//!
//! Good sets are drawn per family from the content tokens `3..=27`. In the
//! pretraining corpus the positive prefix co-occurs with good tokens and
//! the negative prefix with bad tokens, so prompts steer the base model.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NeatError, Result};
use crate::prefdata::{Dataset, Split};
use crate::reward::{Family, RewardSpec, REWARD_SPEC_VERSION};
use crate::sampler::{derive_seed, PromptKind, PromptSet, PromptTemplate};
use crate::tokens::{TokenId, TokenSeq, BOS, EOS, SEP};

pub const POSITIVE_PREFIX: [TokenId; 4] = [3, 4, 5, 6];
pub const NEGATIVE_PREFIX: [TokenId; 4] = [7, 8, 9, 10];
pub const KEY_TOKENS: [TokenId; 8] = [11, 12, 13, 14, 15, 16, 17, 18];
pub const TRAIN_FILLERS: [TokenId; 3] = [19, 20, 21];
pub const TEST_FILLERS: [TokenId; 3] = [22, 23, 24];
pub const BAD_TOKENS: [TokenId; 4] = [28, 29, 30, 31];
const GOOD_POOL: std::ops::RangeInclusive<TokenId> = 3..=27;
const CONTENT: std::ops::RangeInclusive<TokenId> = 3..=31;

/// Response horizon of the reference task; see [`TaskConfig::max_len`].
pub const REFERENCE_MAX_LEN: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub seed: u64,
    pub n_families: usize,
    pub good_per_family: usize,
    /// Drawn-token budget of a response. Kept small enough that the
    /// response space can be enumerated exactly.
    pub max_len: usize,
    pub corpus_size: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            seed: 0,
            n_families: 64,
            good_per_family: 4,
            max_len: REFERENCE_MAX_LEN,
            corpus_size: 20_000,
        }
    }
}

/// One pretraining example: a rendered context and the response after it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusExample {
    pub context: TokenSeq,
    pub response: TokenSeq,
}

#[derive(Clone, Debug)]
pub struct ReferenceTask {
    pub config: TaskConfig,
    pub spec: RewardSpec,
    pub prompts: PromptSet,
    pub train: Dataset,
    pub test: Dataset,
}

pub fn default_prompts() -> PromptSet {
    PromptSet(vec![
        PromptTemplate {
            kind: PromptKind::Positive,
            prefix: TokenSeq::new(POSITIVE_PREFIX.to_vec()),
        },
        PromptTemplate {
            kind: PromptKind::Negative,
            prefix: TokenSeq::new(NEGATIVE_PREFIX.to_vec()),
        },
    ])
}

fn rng_for(seed: u64, purpose: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(&[seed, purpose]))
}

/// Default reward spec with seeded per-family good sets.
pub fn reference_spec(cfg: &TaskConfig) -> Result<RewardSpec> {
    let max_families = KEY_TOKENS.len() * KEY_TOKENS.len();
    if cfg.n_families == 0 || cfg.n_families > max_families {
        return Err(NeatError::Domain(format!(
            "between 1 and {max_families} families are supported"
        )));
    }
    let mut rng = rng_for(cfg.seed, 1);
    let pool: Vec<TokenId> = GOOD_POOL.collect();
    let families = (0..cfg.n_families)
        .map(|i| {
            let key = vec![KEY_TOKENS[i / KEY_TOKENS.len()], KEY_TOKENS[i % KEY_TOKENS.len()]];
            let mut good: Vec<TokenId> = pool
                .choose_multiple(&mut rng, cfg.good_per_family)
                .cloned()
                .collect();
            good.sort_unstable();
            Family {
                id: format!("f{i:02}"),
                key,
                good,
            }
        })
        .collect();
    let spec = RewardSpec {
        v: REWARD_SPEC_VERSION,
        families,
        bad: BAD_TOKENS.to_vec(),
        w_good: 1.0,
        w_bad: -2.0,
        w_len: -0.05,
        w_trunc: -1.0,
        target_len: 6,
        max_len: cfg.max_len,
    };
    spec.validate()?;
    Ok(spec)
}

fn query_for(family: &Family, filler: TokenId) -> TokenSeq {
    let mut q = family.key.clone();
    q.push(filler);
    TokenSeq::new(q)
}

fn neutral_tokens(spec: &RewardSpec, family: &Family) -> Vec<TokenId> {
    CONTENT
        .filter(|t| !family.good.contains(t) && !spec.is_bad(*t))
        .collect()
}

/// Four responses per query: one high (good + neutral), one mid (two
/// neutral), two low (neutral + bad, two bad).
fn preference_responses(spec: &RewardSpec, family: &Family, rng: &mut ChaCha8Rng) -> Vec<TokenSeq> {
    let neutral = neutral_tokens(spec, family);
    let pick = |set: &[TokenId], rng: &mut ChaCha8Rng| *set.choose(rng).expect("non-empty set");
    let pair = |a: TokenId, b: TokenId, rng: &mut ChaCha8Rng| {
        let mut body = vec![a, b];
        body.shuffle(rng);
        body.push(EOS);
        TokenSeq::new(body)
    };
    let high = {
        let (a, b) = (pick(&family.good, rng), pick(&neutral, rng));
        pair(a, b, rng)
    };
    let mid = {
        let (a, b) = (pick(&neutral, rng), pick(&neutral, rng));
        pair(a, b, rng)
    };
    let low = {
        let (a, b) = (pick(&neutral, rng), pick(&spec.bad, rng));
        pair(a, b, rng)
    };
    let lowest = {
        let (a, b) = (pick(&spec.bad, rng), pick(&spec.bad, rng));
        pair(a, b, rng)
    };
    // Shuffle so stored order comes from the ranking step, not generation.
    let mut out = vec![high, mid, low, lowest];
    out.shuffle(rng);
    out
}

fn split_raw(spec: &RewardSpec, fillers: &[TokenId], rng: &mut ChaCha8Rng) -> Vec<(TokenSeq, Vec<TokenSeq>)> {
    spec.families
        .iter()
        .map(|f| {
            let q = query_for(f, *fillers.choose(rng).expect("fillers"));
            (q, preference_responses(spec, f, rng))
        })
        .collect()
}

impl ReferenceTask {
    pub fn generate(cfg: TaskConfig) -> Result<Self> {
        let spec = reference_spec(&cfg)?;
        let mut rng = rng_for(cfg.seed, 2);
        let train_raw = split_raw(&spec, &TRAIN_FILLERS, &mut rng);
        let test_raw = split_raw(&spec, &TEST_FILLERS, &mut rng);
        Ok(ReferenceTask {
            config: cfg,
            train: Dataset::prepare(&train_raw, &spec, Split::Train)?,
            test: Dataset::prepare(&test_raw, &spec, Split::Test)?,
            prompts: default_prompts(),
            spec,
        })
    }

    /// Pretraining examples where prompt prefixes correlate with good or
    /// bad response tokens. Queries use every filler, so held-out queries
    /// are in-distribution for the base model.
    pub fn pretraining_corpus(&self) -> Vec<CorpusExample> {
        let mut rng = rng_for(self.config.seed, 3);
        let fillers: Vec<TokenId> = TRAIN_FILLERS.iter().chain(&TEST_FILLERS).cloned().collect();
        (0..self.config.corpus_size)
            .map(|_| {
                let family = self.spec.families.choose(&mut rng).expect("families");
                let query = query_for(family, *fillers.choose(&mut rng).expect("fillers"));
                let u: f64 = rng.gen();
                let (prefix, probs): (&[TokenId], [f64; 3]) = if u < 0.5 {
                    (&[], [0.35, 0.45, 0.20])
                } else if u < 0.75 {
                    (&POSITIVE_PREFIX, [0.75, 0.25, 0.0])
                } else {
                    (&NEGATIVE_PREFIX, [0.0, 0.25, 0.75])
                };
                let neutral = neutral_tokens(&self.spec, family);
                let n_content = if rng.gen::<f64>() < 0.3 { 1 } else { 2 };
                let mut body: Vec<TokenId> = (0..n_content)
                    .map(|_| {
                        let c: f64 = rng.gen();
                        let set: &[TokenId] = if c < probs[0] {
                            &family.good
                        } else if c < probs[0] + probs[1] {
                            &neutral
                        } else {
                            &self.spec.bad
                        };
                        *set.choose(&mut rng).expect("non-empty set")
                    })
                    .collect();
                body.push(EOS);
                let mut context = vec![BOS];
                context.extend_from_slice(prefix);
                context.extend_from_slice(query.tokens());
                context.push(SEP);
                CorpusExample {
                    context: TokenSeq::new(context),
                    response: TokenSeq::new(body),
                }
            })
            .collect()
    }
}

pub fn save_corpus(path: &Path, corpus: &[CorpusExample]) -> Result<()> {
    let mut out = String::new();
    for ex in corpus {
        out.push_str(&serde_json::to_string(ex)?);
        out.push('\n');
    }
    crate::lm::write_atomic(path, out.as_bytes())
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| NeatError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let ex: CorpusExample = serde_json::from_str(l).map_err(|e| NeatError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if ex.context.tokens().first() != Some(&BOS) || ex.context.tokens().last() != Some(&SEP) {
                return Err(NeatError::Parse {
                    line: i + 1,
                    message: "context must be [BOS .. SEP]".into(),
                });
            }
            ex.response.validate_response().map_err(|e| NeatError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            Ok(ex)
        })
        .collect()
}
