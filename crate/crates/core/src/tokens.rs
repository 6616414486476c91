//! Token identifiers and sequences.
//!
//! The vocabulary reserves three special ids at the bottom of the range:
//! [`BOS`] opens every rendered context, [`EOS`] terminates every response
//! and [`SEP`] separates the query from the response. Every other id is a
//! content token.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{NeatError, Result};

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const SEP: TokenId = 2;
pub const NUM_SPECIAL: u32 = 3;

pub fn is_special(token: TokenId) -> bool {
    token < NUM_SPECIAL
}

/// An ordered list of token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        TokenSeq(tokens)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks every id lies inside a vocabulary of `vocab` tokens.
    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t as usize >= vocab) {
            Some(t) => Err(NeatError::Domain(format!(
                "token {t} outside vocabulary of size {vocab}"
            ))),
            None => Ok(()),
        }
    }

    /// A query holds neither EOS nor SEP.
    pub fn validate_query(&self) -> Result<()> {
        if self.0.iter().any(|&t| t == EOS || t == SEP) {
            return Err(NeatError::Structure(format!(
                "query {self} contains EOS or SEP"
            )));
        }
        Ok(())
    }

    /// A response holds exactly one EOS, at its final position.
    pub fn validate_response(&self) -> Result<()> {
        match self.0.split_last() {
            Some((&EOS, body)) if !body.contains(&EOS) => Ok(()),
            _ => Err(NeatError::Structure(format!(
                "response {self} must end with its only EOS"
            ))),
        }
    }

    /// Content of a response with the trailing EOS removed.
    pub fn body(&self) -> &[TokenId] {
        match self.0.split_last() {
            Some((&EOS, body)) => body,
            _ => &self.0,
        }
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(tokens: Vec<TokenId>) -> Self {
        TokenSeq(tokens)
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            match *t {
                BOS => write!(f, "<bos>")?,
                EOS => write!(f, "<eos>")?,
                SEP => write!(f, "<sep>")?,
                t => write!(f, "{t}")?,
            }
        }
        write!(f, "]")
    }
}

/// Renders the conditioning context `[BOS, query, SEP]`.
pub fn query_context(query: &TokenSeq) -> Vec<TokenId> {
    let mut ctx = Vec::with_capacity(query.len() + 2);
    ctx.push(BOS);
    ctx.extend_from_slice(query.tokens());
    ctx.push(SEP);
    ctx
}
