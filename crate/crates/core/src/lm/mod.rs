//! The tiny autoregressive language model: logits, sequence and
//! length-normalized conditional log-probabilities, temperature sampling,
//! perplexity, and reverse-mode gradients for all of them.

mod grad;
mod params;
mod transformer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use grad::{finite_difference, grad, Constant, GradVector, Objective, SequenceNll, SquaredNorm};
pub use params::{BlockLayout, Layout, ModelConfig, ModelParams, CHECKPOINT_VERSION};
pub(crate) use params::write_atomic;
pub use transformer::{KvCache, Trace, Transformer};

use crate::error::{NeatError, Result};
use crate::tokens::{query_context, TokenId, TokenSeq, BOS, EOS};

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Next-token scores after `context`, which must start with BOS.
pub fn logits(params: &ModelParams, context: &TokenSeq) -> Result<Vec<f64>> {
    params.check_finite()?;
    if context.tokens().first() != Some(&BOS) {
        return Err(NeatError::Structure("context must begin with BOS".into()));
    }
    Transformer::new(params).last_logits(context.tokens())
}

/// Forward pass over `tokens` returning the trace and the log-probability
/// of every token at index `>= from` given its prefix.
pub fn token_log_probs(
    tf: &Transformer<'_>,
    tokens: &[TokenId],
    from: usize,
) -> Result<(Trace, Vec<f64>)> {
    if from == 0 || from > tokens.len() {
        return Err(NeatError::Length(format!(
            "scored span starts at {from} in a sequence of {}",
            tokens.len()
        )));
    }
    let trace = tf.forward(tokens)?;
    let lp = (from..tokens.len())
        .map(|p| log_softmax(&trace.logits()[p - 1])[tokens[p] as usize])
        .collect();
    Ok((trace, lp))
}

/// Accumulates `Σ_p weights[p - from] · ∂ log ρ(tokens[p] | prefix) / ∂w`
/// into `grad`.
pub fn backward_token_log_probs(
    tf: &Transformer<'_>,
    trace: &Trace,
    tokens: &[TokenId],
    from: usize,
    weights: &[f64],
    grad: &mut [f64],
) {
    debug_assert_eq!(weights.len(), tokens.len() - from);
    if weights.iter().all(|&w| w == 0.0) {
        return;
    }
    let mut dlogits = vec![Vec::new(); tokens.len()];
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let p = from + i;
        let probs = softmax(&trace.logits()[p - 1]);
        let mut row: Vec<f64> = probs.iter().map(|q| -w * q).collect();
        row[tokens[p] as usize] += w;
        dlogits[p - 1] = row;
    }
    tf.backward(trace, &dlogits, grad);
}

/// `log ρ(s)`: the summed log-probability of every token after BOS.
pub fn sequence_log_prob(params: &ModelParams, seq: &TokenSeq) -> Result<f64> {
    params.check_finite()?;
    let t = seq.tokens();
    if t.first() != Some(&BOS) || t.len() < 2 {
        return Err(NeatError::Structure(
            "sequence must begin with BOS and hold at least one more token".into(),
        ));
    }
    let (_, lp) = token_log_probs(&Transformer::new(params), t, 1)?;
    Ok(lp.iter().sum())
}

/// Renders `[BOS, query, SEP, response]` and returns it with the index of
/// the first response token.
pub fn render_pair(query: &TokenSeq, response: &TokenSeq) -> (Vec<TokenId>, usize) {
    let mut tokens = query_context(query);
    let from = tokens.len();
    tokens.extend_from_slice(response.tokens());
    (tokens, from)
}

/// Per-token conditional log-probabilities of `response` given `query`.
pub fn response_token_log_probs(
    params: &ModelParams,
    query: &TokenSeq,
    response: &TokenSeq,
) -> Result<Vec<f64>> {
    if response.is_empty() {
        return Err(NeatError::Structure("empty response".into()));
    }
    let (tokens, from) = render_pair(query, response);
    let (_, lp) = token_log_probs(&Transformer::new(params), &tokens, from)?;
    Ok(lp)
}

/// Length-normalized conditional log-probability: the summed log-probability
/// of the response tokens (EOS included) divided by the response length.
pub fn cond_log_prob_norm(params: &ModelParams, query: &TokenSeq, response: &TokenSeq) -> Result<f64> {
    params.check_finite()?;
    let lp = response_token_log_probs(params, query, response)?;
    Ok(lp.iter().sum::<f64>() / lp.len() as f64)
}

/// Draws one index from `softmax(logits / temperature)` using `u` uniform
/// in `[0, 1)`.
pub fn sample_index(logits: &[f64], temperature: f64, u: f64) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let probs = softmax(&scaled);
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `u` above the accumulated mass: take the last token with
    // non-zero probability.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Autoregressive sampling after `context` until EOS or `max_len` drawn
/// tokens; a response cut at `max_len` gets EOS appended.
pub fn sample_response(
    params: &ModelParams,
    context: &TokenSeq,
    temperature: f64,
    max_len: usize,
    rng_seed: u64,
) -> Result<TokenSeq> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(NeatError::Domain(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    decode(params, context, max_len, |logits| {
        sample_index(logits, temperature, rng.gen::<f64>())
    })
}

/// Greedy decoding: always the highest-scoring token.
pub fn greedy_response(params: &ModelParams, context: &TokenSeq, max_len: usize) -> Result<TokenSeq> {
    decode(params, context, max_len, argmax)
}

fn decode(
    params: &ModelParams,
    context: &TokenSeq,
    max_len: usize,
    mut pick: impl FnMut(&[f64]) -> usize,
) -> Result<TokenSeq> {
    params.check_finite()?;
    if max_len == 0 {
        return Err(NeatError::Domain("max_len must be at least 1".into()));
    }
    if context.tokens().first() != Some(&BOS) {
        return Err(NeatError::Structure("context must begin with BOS".into()));
    }
    let t_max = params.config().max_len;
    if context.len() + max_len > t_max {
        return Err(NeatError::Length(format!(
            "context of {} tokens plus {max_len} new tokens exceeds {t_max}",
            context.len()
        )));
    }
    let tf = Transformer::new(params);
    let (mut cache, mut logits) = tf.prime(context.tokens())?;
    let mut out = Vec::with_capacity(max_len + 1);
    for i in 0..max_len {
        let tok = pick(&logits) as TokenId;
        out.push(tok);
        if tok == EOS {
            return Ok(TokenSeq::new(out));
        }
        if i + 1 < max_len {
            logits = tf.step(tok, &mut cache)?;
        }
    }
    out.push(EOS);
    Ok(TokenSeq::new(out))
}

/// Pooled perplexity over all response tokens of a corpus.
pub fn perplexity(params: &ModelParams, corpus: &[(TokenSeq, TokenSeq)]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(NeatError::Domain("perplexity of an empty corpus".into()));
    }
    params.check_finite()?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (q, r) in corpus {
        let lp = response_token_log_probs(params, q, r)?;
        total += lp.iter().sum::<f64>();
        count += lp.len();
    }
    Ok((-total / count as f64).exp())
}
