//! Frozen token embeddings of referring expressions.
//!
//! Embeddings are produced offline and stored in the TEB container:
//!
//! ```text
//! "TEB1" | N: u32 LE | d: u32 LE | L: u32 LE | L bytes UTF-8 expression | N*d f32 LE, row-major
//! ```
//!
//! [`toy_embed`] provides a deterministic stand-in for self-contained runs.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::seeded_rng;
use crate::tensor::Tensor;

pub const TEB_MAGIC: &[u8; 4] = b"TEB1";
pub const DEFAULT_DIM: usize = 32;

/// Fixed salt mixed into every token hash by [`toy_embed`].
const TOY_SEED: u64 = 0x5249_5346_5553_4531;

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    expression: String,
    tokens: usize,
    dim: usize,
    matrix: Vec<f32>,
}

impl TextEmbedding {
    pub fn new(expression: impl Into<String>, tokens: usize, dim: usize, matrix: Vec<f32>) -> Result<Self> {
        if tokens == 0 || dim == 0 {
            return Err(Error::invalid(format!(
                "embedding needs at least one token and dimension, got {tokens}x{dim}"
            )));
        }
        if matrix.len() != tokens * dim {
            return Err(Error::Shape {
                op: "embedding",
                lhs: vec![tokens, dim],
                rhs: vec![matrix.len()],
            });
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding contains a non-finite value"));
        }
        for (r, row) in matrix.chunks(dim).enumerate() {
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::invalid(format!("embedding row {r} has zero norm")));
            }
        }
        Ok(TextEmbedding {
            expression: expression.into(),
            tokens,
            dim,
            matrix,
        })
    }

    pub fn expression(&self) -> &str {
        &self.expression
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    /// `[N, d]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.tokens, self.dim],
            self.matrix.iter().map(|&v| v as f64).collect(),
        )
    }

    /// Mean over token rows, `[1, d]`.
    pub fn mean_pooled(&self) -> Tensor {
        let mut out = vec![0.0; self.dim];
        for row in self.matrix.chunks(self.dim) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v as f64;
            }
        }
        out.iter_mut().for_each(|o| *o /= self.tokens as f64);
        Tensor::from_parts(vec![1, self.dim], out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let expr = self.expression.as_bytes();
        let mut out = Vec::with_capacity(16 + expr.len() + 4 * self.matrix.len());
        out.extend_from_slice(TEB_MAGIC);
        out.extend_from_slice(&(self.tokens as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(expr.len() as u32).to_le_bytes());
        out.extend_from_slice(expr);
        for v in &self.matrix {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != TEB_MAGIC {
            return Err(Error::format("TEB: bad magic"));
        }
        if bytes.len() < 16 {
            return Err(Error::format("TEB: truncated header"));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let (tokens, dim, expr_len) = (word(4), word(8), word(12));
        let values = tokens
            .checked_mul(dim)
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::format(format!("TEB: dimension overflow ({tokens}x{dim})")))?;
        let expr_end = 16 + expr_len;
        let expected = expr_end + 4 * values;
        if bytes.len() < expected {
            return Err(Error::format(format!(
                "TEB: truncated payload, expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        if bytes.len() > expected {
            return Err(Error::format("TEB: trailing bytes after matrix"));
        }
        let expression = std::str::from_utf8(&bytes[16..expr_end])
            .map_err(|_| Error::format("TEB: expression is not valid UTF-8"))?;
        let matrix = bytes[expr_end..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        TextEmbedding::new(expression, tokens, dim, matrix)
    }
}

pub fn load_embedding(path: impl AsRef<Path>) -> Result<TextEmbedding> {
    TextEmbedding::from_bytes(&fs::read(path)?)
}

pub fn save_embedding(emb: &TextEmbedding, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, emb.to_bytes())?;
    Ok(())
}

fn token_seed(token: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(TOY_SEED.to_le_bytes());
    hasher.update(token.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// One row per whitespace token; each row is a pseudo-random vector in
/// `[-1, 1]^dim` keyed only by the token text.
pub fn toy_embed(expression: &str, dim: usize) -> Result<TextEmbedding> {
    let tokens: Vec<&str> = expression.split_whitespace().collect();
    if tokens.is_empty() {
        return Err(Error::invalid("cannot embed an empty expression"));
    }
    let mut matrix = Vec::with_capacity(tokens.len() * dim);
    for token in &tokens {
        let mut rng = seeded_rng(token_seed(token));
        matrix.extend((0..dim).map(|_| rng.random_range(-1.0f32..=1.0)));
    }
    TextEmbedding::new(expression, tokens.len(), dim, matrix)
}
