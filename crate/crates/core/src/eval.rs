//! Held-out metrics and oracle-judged pairwise comparison.

use serde::{Deserialize, Serialize};

use crate::error::{NeatError, Result};
use crate::lm::{greedy_response, perplexity, ModelParams};
use crate::prefdata::Dataset;
use crate::reward::{exact_bad_mass, score, RewardSpec};
use crate::tokens::{query_context, TokenSeq};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ppl: f64,
    pub avg_reward: f64,
}

/// Win/lose/tie counts of model A against model B, judged by the reward
/// oracle rather than an external judge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comparison {
    pub win: usize,
    pub lose: usize,
    pub tie: usize,
}

impl Comparison {
    pub fn total(&self) -> usize {
        self.win + self.lose + self.tie
    }
}

/// Greedy response to the plain query, limited to the spec's horizon.
pub fn greedy(params: &ModelParams, spec: &RewardSpec, query: &TokenSeq) -> Result<TokenSeq> {
    greedy_response(params, &TokenSeq::new(query_context(query)), spec.max_len)
}

pub fn evaluate(params: &ModelParams, test: &Dataset, spec: &RewardSpec) -> Result<Metrics> {
    if test.is_empty() {
        return Err(NeatError::Domain("evaluation needs a non-empty test split".into()));
    }
    let corpus: Vec<(TokenSeq, TokenSeq)> = test
        .records()
        .iter()
        .map(|r| (r.query.clone(), r.best().response.clone()))
        .collect();
    let ppl = perplexity(params, &corpus)?;
    let mut total = 0.0;
    for r in test.records() {
        let y = greedy(params, spec, &r.query)?;
        total += score(spec, &r.query, &y)?;
    }
    Ok(Metrics {
        ppl,
        avg_reward: total / test.len() as f64,
    })
}

/// A wins a query when its greedy reward exceeds B's by more than `margin`.
pub fn compare(
    a: &ModelParams,
    b: &ModelParams,
    test: &Dataset,
    spec: &RewardSpec,
    margin: f64,
) -> Result<Comparison> {
    if margin.is_nan() || margin < 0.0 {
        return Err(NeatError::Domain(format!("margin must be non-negative, got {margin}")));
    }
    let mut out = Comparison::default();
    for r in test.records() {
        let ra = score(spec, &r.query, &greedy(a, spec, &r.query)?)?;
        let rb = score(spec, &r.query, &greedy(b, spec, &r.query)?)?;
        if ra > rb + margin {
            out.win += 1;
        } else if rb > ra + margin {
            out.lose += 1;
        } else {
            out.tie += 1;
        }
    }
    Ok(out)
}

/// Mean exact probability of responses holding a bad token.
pub fn mean_bad_mass(params: &ModelParams, spec: &RewardSpec, test: &Dataset, max_len: usize) -> Result<f64> {
    if test.is_empty() {
        return Err(NeatError::Domain("no queries to evaluate".into()));
    }
    let mut total = 0.0;
    for r in test.records() {
        total += exact_bad_mass(params, spec, &r.query, max_len)?;
    }
    Ok(total / test.len() as f64)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // Ties share the mean of their 1-based ranks.
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(NeatError::Length(format!(
            "spearman needs two equal series of at least 2 points, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}
