//! Gloss vocabularies, sequences and greedy CTC decoding.

use std::fmt;

use crate::error::{shape_err, Error, Result};
use crate::model::ctc::collapse_path;
use crate::tensor::{Scalar, Tensor};

/// Index reserved for the CTC blank.
pub const BLANK: usize = 0;

/// Gloss names; gloss `i` has class index `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    glosses: Vec<String>,
}

impl Vocabulary {
    pub fn new(glosses: Vec<String>) -> Result<Self> {
        for (i, g) in glosses.iter().enumerate() {
            if g.is_empty() || g.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("gloss {g:?} must be a nonempty word")));
            }
            if glosses[..i].contains(g) {
                return Err(Error::InvalidArgument(format!("duplicate gloss {g:?}")));
            }
        }
        Ok(Self { glosses })
    }

    /// Number of glosses, excluding blank.
    pub fn len(&self) -> usize {
        self.glosses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glosses.is_empty()
    }

    pub fn glosses(&self) -> &[String] {
        &self.glosses
    }

    pub fn name(&self, token: usize) -> Option<&str> {
        token.checked_sub(1).and_then(|i| self.glosses.get(i)).map(String::as_str)
    }

    pub fn token(&self, name: &str) -> Option<usize> {
        self.glosses.iter().position(|g| g == name).map(|i| i + 1)
    }

    /// Parses whitespace-separated gloss names.
    pub fn encode(&self, text: &str) -> Result<GlossSequence> {
        let tokens = text
            .split_whitespace()
            .map(|w| self.token(w).ok_or_else(|| Error::InvalidArgument(format!("unknown gloss {w:?}"))))
            .collect::<Result<Vec<_>>>()?;
        GlossSequence::new(tokens)
    }

    pub fn render(&self, seq: &GlossSequence) -> String {
        seq.tokens.iter().map(|&t| self.name(t).unwrap_or("<unk>")).collect::<Vec<_>>().join(" ")
    }
}

/// Sequence of gloss class indices, never containing [`BLANK`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct GlossSequence {
    tokens: Vec<usize>,
}

impl GlossSequence {
    pub fn new(tokens: Vec<usize>) -> Result<Self> {
        if tokens.contains(&BLANK) {
            return Err(Error::InvalidArgument("gloss sequence contains the blank token".into()));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl fmt::Display for GlossSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.tokens.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(" "))
    }
}

/// Per-step argmax with ties resolved toward the lowest class index.
pub fn best_path<S: Scalar>(logits: &Tensor<S>) -> Result<Vec<usize>> {
    let k = match logits.shape() {
        &[_, k] if k > 0 => k,
        s => return Err(shape_err("greedy_decode", format!("logits must be [T', V+1], got {s:?}"))),
    };
    Ok(logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

/// Argmax path, merge repeats, drop blanks.
pub fn greedy_decode<S: Scalar>(logits: &Tensor<S>) -> Result<GlossSequence> {
    GlossSequence::new(collapse_path(&best_path(logits)?, BLANK))
}
