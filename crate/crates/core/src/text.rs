//! Toy instruction encoder: words hash into a fixed vocabulary, each id has
//! a learned embedding, and the mean of the token embeddings is the pooled
//! start-of-target representation. An empty or dropped instruction becomes
//! the single learned null token, which is also the unconditional branch
//! for classifier-free guidance.

use crate::rng::fnv1a;
use ndarray::{Array1, Array2};

pub const MAX_TEXT_TOKENS: usize = 16;

/// One token's provenance: a vocabulary row or the learned null vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextTokenId {
    Vocab(usize),
    Null,
}

/// Hash an instruction into vocabulary ids. Lowercased alphanumeric words,
/// FNV-1a modulo the vocabulary size, capped at [`MAX_TEXT_TOKENS`].
pub fn tokenize(instruction: &str, vocab_size: usize) -> Vec<usize> {
    instruction
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .take(MAX_TEXT_TOKENS)
        .map(|w| (fnv1a(w.to_lowercase().as_bytes()) % vocab_size as u64) as usize)
        .collect()
}

/// Instruction condition fed to the transformer: per-token embeddings for
/// cross-attention plus their pooled mean for the start token.
#[derive(Debug, Clone)]
pub struct TextCondition {
    pub ids: Vec<TextTokenId>,
    /// L x text_width, L >= 1.
    pub embeddings: Array2<f64>,
    /// Mean of the rows.
    pub pooled: Array1<f64>,
}

impl TextCondition {
    /// Encode an instruction against an embedding table (vocab x text_width)
    /// and the learned null row. Empty instructions fall back to the null
    /// token.
    pub fn encode(instruction: &str, table: &Array2<f64>, null_row: &Array1<f64>) -> TextCondition {
        let token_ids = tokenize(instruction, table.nrows());
        if token_ids.is_empty() {
            return TextCondition::null(table.ncols(), null_row);
        }
        let mut embeddings = Array2::zeros((token_ids.len(), table.ncols()));
        for (r, &id) in token_ids.iter().enumerate() {
            embeddings.row_mut(r).assign(&table.row(id));
        }
        let pooled = embeddings.mean_axis(ndarray::Axis(0)).unwrap();
        TextCondition {
            ids: token_ids.into_iter().map(TextTokenId::Vocab).collect(),
            embeddings,
            pooled,
        }
    }

    /// The unconditional branch: the single null token.
    pub fn null(text_width: usize, null_row: &Array1<f64>) -> TextCondition {
        let mut embeddings = Array2::zeros((1, text_width));
        embeddings.row_mut(0).assign(null_row);
        TextCondition {
            ids: vec![TextTokenId::Null],
            embeddings,
            pooled: null_row.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false // L >= 1 by construction
    }
}
