//! The alignment objective over one query's response pool.
//!
//! `total = sft + α·ranking − β·penalty`, where `sft` is the NLL of the
//! highest-reward response, `ranking` is a zero-margin hinge over every
//! pair whose length-normalized log-probabilities disagree with the reward
//! order, and `penalty` is the NLL of the lowest-reward response with each
//! per-token term clipped at τ. Without the clip the penalty term is
//! unbounded below.
//!
//! Every term is a function of per-token log-probabilities, so the gradient
//! is one weighted reverse pass per response. Hinge and clip kinks take
//! subgradient zero.

use serde::{Deserialize, Serialize};

use crate::error::{NeatError, Result};
use crate::lm::{
    backward_token_log_probs, render_pair, token_log_probs, GradVector, ModelParams, Objective,
    Transformer,
};
use crate::reward::ScoredResponse;
use crate::tokens::TokenSeq;

/// Term weights of the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.1,
            tau: 8.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(NeatError::Domain(format!(
                "alpha and beta must be non-negative, got {} and {}",
                self.alpha, self.beta
            )));
        }
        check_tau(self.tau)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(NeatError::Domain(format!("tau must be positive, got {tau}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sft: f64,
    pub ranking: f64,
    /// Clipped penalty, the quantity subtracted in `total`.
    pub penalty: f64,
    pub total: f64,
    pub best_index: usize,
    pub worst_index: usize,
    pub clipped: bool,
}

/// Index of the highest and the lowest reward; ties go to the lowest index.
/// When every reward is equal the worst falls back to the last index so the
/// two stay distinct.
pub fn select_extremes(responses: &[ScoredResponse]) -> Result<(usize, usize)> {
    let rewards: Vec<f64> = responses.iter().map(|r| r.reward).collect();
    select_extremes_by_reward(&rewards)
}

pub fn select_extremes_by_reward(rewards: &[f64]) -> Result<(usize, usize)> {
    if rewards.len() < 2 {
        return Err(NeatError::Structure(format!(
            "extreme selection needs at least two responses, got {}",
            rewards.len()
        )));
    }
    let mut best = 0;
    let mut worst = 0;
    for (i, &r) in rewards.iter().enumerate() {
        if r > rewards[best] {
            best = i;
        }
        if r < rewards[worst] {
            worst = i;
        }
    }
    if best == worst {
        worst = rewards.len() - 1;
    }
    Ok((best, worst))
}

/// `Σ_{r_i < r_j} max(0, p_i − p_j)` over normalized log-probabilities `p`.
pub fn pairwise_hinge(p: &[f64], rewards: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..p.len() {
        for j in 0..p.len() {
            if rewards[i] < rewards[j] && p[i] > p[j] {
                total += p[i] - p[j];
            }
        }
    }
    total
}

/// Subgradient of [`pairwise_hinge`] with respect to each `p_i`.
fn pairwise_hinge_grad(p: &[f64], rewards: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; p.len()];
    for i in 0..p.len() {
        for j in 0..p.len() {
            if rewards[i] < rewards[j] && p[i] > p[j] {
                g[i] += 1.0;
                g[j] -= 1.0;
            }
        }
    }
    g
}

/// `Σ_t min(τ, nll_t)` and whether any term reached τ.
pub fn clipped_nll(token_log_probs: &[f64], tau: f64) -> (f64, bool) {
    let mut clipped = false;
    let value = token_log_probs
        .iter()
        .map(|&lp| {
            let nll = -lp;
            if nll >= tau {
                clipped = true;
                tau
            } else {
                nll
            }
        })
        .sum();
    (value, clipped)
}

/// Linear combination of the three terms over one response pool.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TermWeights {
    pub sft: f64,
    pub ranking: f64,
    pub penalty: f64,
    pub tau: f64,
}

impl TermWeights {
    pub fn total(w: &LossWeights) -> Self {
        TermWeights {
            sft: 1.0,
            ranking: w.alpha,
            penalty: -w.beta,
            tau: w.tau,
        }
    }

    pub fn sft_only() -> Self {
        TermWeights {
            sft: 1.0,
            ranking: 0.0,
            penalty: 0.0,
            tau: f64::INFINITY,
        }
    }

    pub fn ranking_only() -> Self {
        TermWeights {
            sft: 0.0,
            ranking: 1.0,
            penalty: 0.0,
            tau: f64::INFINITY,
        }
    }

    pub fn penalty_only(tau: f64) -> Self {
        TermWeights {
            sft: 0.0,
            ranking: 0.0,
            penalty: 1.0,
            tau,
        }
    }
}

/// Evaluated pool: breakdown plus (optionally) the gradient of
/// `sft·w_sft + ranking·w_rank + penalty·w_pen`.
pub struct PoolEvaluation {
    pub breakdown: LossBreakdown,
    pub value: f64,
    pub grad: Option<GradVector>,
}

/// Evaluates every term on `responses` to `query` and, when `want_grad`, the
/// gradient of the weighted combination.
pub fn evaluate_pool(
    params: &ModelParams,
    query: &TokenSeq,
    responses: &[ScoredResponse],
    weights: TermWeights,
    want_grad: bool,
) -> Result<PoolEvaluation> {
    check_tau(weights.tau)?;
    let (best, worst) = select_extremes(responses)?;
    let tf = Transformer::new(params);
    let rewards: Vec<f64> = responses.iter().map(|r| r.reward).collect();

    let mut rendered = Vec::with_capacity(responses.len());
    for r in responses {
        if r.response.is_empty() {
            return Err(NeatError::Structure("empty response in pool".into()));
        }
        let (tokens, from) = render_pair(query, &r.response);
        let (trace, lp) = token_log_probs(&tf, &tokens, from)?;
        rendered.push((tokens, from, trace, lp));
    }

    let norm: Vec<f64> = rendered
        .iter()
        .map(|(_, _, _, lp)| lp.iter().sum::<f64>() / lp.len() as f64)
        .collect();
    let sft = -rendered[best].3.iter().sum::<f64>();
    let ranking = pairwise_hinge(&norm, &rewards);
    let (penalty, clipped) = clipped_nll(&rendered[worst].3, weights.tau);
    let value = weights.sft * sft + weights.ranking * ranking + weights.penalty * penalty;
    let breakdown = LossBreakdown {
        sft,
        ranking,
        penalty,
        total: value,
        best_index: best,
        worst_index: worst,
        clipped,
    };

    let grad = if want_grad {
        let hinge = pairwise_hinge_grad(&norm, &rewards);
        let mut g = GradVector::zeros(params.len());
        for (i, (tokens, from, trace, lp)) in rendered.iter().enumerate() {
            // d value / d log ρ(y_t)
            let n = lp.len() as f64;
            let mut w = vec![weights.ranking * hinge[i] / n; lp.len()];
            if i == best {
                for x in &mut w {
                    *x -= weights.sft;
                }
            }
            if i == worst {
                for (x, &l) in w.iter_mut().zip(lp) {
                    if -l < weights.tau {
                        *x -= weights.penalty;
                    }
                }
            }
            backward_token_log_probs(&tf, trace, tokens, *from, &w, g.as_mut_slice());
        }
        Some(g)
    } else {
        None
    };
    Ok(PoolEvaluation {
        breakdown,
        value,
        grad,
    })
}

/// Pairwise ranking hinge over the pool.
pub fn ranking_loss(params: &ModelParams, query: &TokenSeq, responses: &[ScoredResponse]) -> Result<f64> {
    Ok(evaluate_pool(params, query, responses, TermWeights::ranking_only(), false)?
        .breakdown
        .ranking)
}

/// Unnormalized NLL of the best response.
pub fn sft_loss(params: &ModelParams, query: &TokenSeq, responses: &[ScoredResponse]) -> Result<f64> {
    if responses.len() == 1 {
        let lp = crate::lm::response_token_log_probs(params, query, &responses[0].response)?;
        return Ok(-lp.iter().sum::<f64>());
    }
    Ok(evaluate_pool(params, query, responses, TermWeights::sft_only(), false)?
        .breakdown
        .sft)
}

/// Per-token-clipped NLL of the worst response and whether the clip engaged.
pub fn penalty_loss(
    params: &ModelParams,
    query: &TokenSeq,
    responses: &[ScoredResponse],
    tau: f64,
) -> Result<(f64, bool)> {
    check_tau(tau)?;
    let b = evaluate_pool(params, query, responses, TermWeights::penalty_only(tau), false)?.breakdown;
    Ok((b.penalty, b.clipped))
}

pub fn total_loss(
    params: &ModelParams,
    query: &TokenSeq,
    responses: &[ScoredResponse],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    Ok(evaluate_pool(params, query, responses, TermWeights::total(weights), false)?.breakdown)
}

/// A pool loss usable with [`crate::lm::grad`].
pub struct PoolObjective {
    pub query: TokenSeq,
    pub responses: Vec<ScoredResponse>,
    pub weights: TermWeights,
}

impl Objective for PoolObjective {
    fn value(&self, params: &ModelParams) -> Result<f64> {
        Ok(evaluate_pool(params, &self.query, &self.responses, self.weights, false)?.value)
    }

    fn value_and_grad(&self, params: &ModelParams) -> Result<(f64, GradVector)> {
        let e = evaluate_pool(params, &self.query, &self.responses, self.weights, true)?;
        Ok((e.value, e.grad.expect("gradient requested")))
    }
}

/// Mean of per-record pool objectives, as used for one training batch.
pub struct BatchObjective {
    pub pools: Vec<PoolObjective>,
}

impl Objective for BatchObjective {
    fn value(&self, params: &ModelParams) -> Result<f64> {
        let mut total = 0.0;
        for p in &self.pools {
            total += p.value(params)?;
        }
        Ok(total / self.pools.len() as f64)
    }

    fn value_and_grad(&self, params: &ModelParams) -> Result<(f64, GradVector)> {
        let mut total = 0.0;
        let mut g = GradVector::zeros(params.len());
        for p in &self.pools {
            let (v, pg) = p.value_and_grad(params)?;
            total += v;
            g.add_scaled(&pg, 1.0);
        }
        let n = self.pools.len() as f64;
        g.scale(1.0 / n);
        Ok((total / n, g))
    }
}
