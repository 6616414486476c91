use super::{backward_token_log_probs, token_log_probs, ModelParams, Transformer};
use crate::error::{NeatError, Result};
use crate::tokens::TokenSeq;

/// One partial derivative per parameter, in canonical parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradVector(pub Vec<f64>);

impl GradVector {
    pub fn zeros(len: usize) -> Self {
        GradVector(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &GradVector, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.0 {
            *a *= s;
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// A scalar function of the model parameters with an exact reverse-mode
/// gradient.
pub trait Objective {
    fn value(&self, params: &ModelParams) -> Result<f64>;

    fn value_and_grad(&self, params: &ModelParams) -> Result<(f64, GradVector)>;
}

/// Reverse-mode gradient of `loss` at `params`.
pub fn grad(params: &ModelParams, loss: &dyn Objective) -> Result<GradVector> {
    params.check_finite()?;
    let (value, g) = loss.value_and_grad(params)?;
    if !value.is_finite() {
        return Err(NeatError::Numeric(format!("loss evaluated to {value}")));
    }
    if !g.is_finite() {
        return Err(NeatError::Numeric("gradient has non-finite entries".into()));
    }
    Ok(g)
}

/// Central finite-difference derivative of `loss` along the coordinates in
/// `indices`.
pub fn finite_difference(
    params: &ModelParams,
    loss: &dyn Objective,
    indices: &[usize],
    step: f64,
) -> Result<Vec<f64>> {
    let mut work = params.clone();
    indices
        .iter()
        .map(|&i| {
            let x = params.as_slice()[i];
            work.as_mut_slice()[i] = x + step;
            let up = loss.value(&work)?;
            work.as_mut_slice()[i] = x - step;
            let down = loss.value(&work)?;
            work.as_mut_slice()[i] = x;
            Ok((up - down) / (2.0 * step))
        })
        .collect()
}

/// A loss that ignores the parameters.
pub struct Constant(pub f64);

impl Objective for Constant {
    fn value(&self, _: &ModelParams) -> Result<f64> {
        Ok(self.0)
    }

    fn value_and_grad(&self, params: &ModelParams) -> Result<(f64, GradVector)> {
        Ok((self.0, GradVector::zeros(params.len())))
    }
}

/// `Σ w²` over every parameter.
pub struct SquaredNorm;

impl Objective for SquaredNorm {
    fn value(&self, params: &ModelParams) -> Result<f64> {
        Ok(params.as_slice().iter().map(|x| x * x).sum())
    }

    fn value_and_grad(&self, params: &ModelParams) -> Result<(f64, GradVector)> {
        let g = params.as_slice().iter().map(|x| 2.0 * x).collect();
        Ok((self.value(params)?, GradVector(g)))
    }
}

/// Negative log-likelihood of every token after BOS in a full sequence.
pub struct SequenceNll(pub TokenSeq);

impl Objective for SequenceNll {
    fn value(&self, params: &ModelParams) -> Result<f64> {
        Ok(-super::sequence_log_prob(params, &self.0)?)
    }

    fn value_and_grad(&self, params: &ModelParams) -> Result<(f64, GradVector)> {
        let tf = Transformer::new(params);
        let toks = self.0.tokens();
        let (trace, lp) = token_log_probs(&tf, toks, 1)?;
        let mut g = GradVector::zeros(params.len());
        backward_token_log_probs(&tf, &trace, toks, 1, &vec![-1.0; lp.len()], g.as_mut_slice());
        Ok((-lp.iter().sum::<f64>(), g))
    }
}
