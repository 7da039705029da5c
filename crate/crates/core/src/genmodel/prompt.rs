use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::GenError;
use crate::nn::Tensor;
use crate::rng::normal_vec;

/// `K x E` token matrix; rows past the prompt length are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub values: Tensor,
    pub tokens: usize,
    /// The prompt had more than `K` tokens and was cut.
    pub truncated: bool,
}

impl PromptEmbedding {
    /// Mean over all `K` rows, padding included.
    pub fn pooled(&self) -> Vec<f32> {
        let (k, e) = (self.values.shape()[0], self.values.shape()[1]);
        let mut out = vec![0.0f32; e];
        for r in 0..k {
            for (o, v) in out.iter_mut().zip(self.values.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= k as f32);
        out
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

fn token_vector(token: &str, dim: usize) -> Vec<f32> {
    let digest = Sha256::digest(format!("meg-token:{token}").as_bytes());
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut v = normal_vec(&mut ChaCha8Rng::seed_from_u64(seed), dim);
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Hashes each token to a fixed unit vector.
pub fn embed_prompt(text: &str, max_tokens: usize, dim: usize) -> Result<PromptEmbedding, GenError> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(GenError::Argument("prompt is empty".into()));
    }
    if max_tokens == 0 || dim == 0 {
        return Err(GenError::Argument("embedding size must be positive".into()));
    }
    let truncated = tokens.len() > max_tokens;
    let used = tokens.len().min(max_tokens);
    let mut data = vec![0.0f32; max_tokens * dim];
    for (i, tok) in tokens.iter().take(used).enumerate() {
        data[i * dim..(i + 1) * dim].copy_from_slice(&token_vector(tok, dim));
    }
    Ok(PromptEmbedding { values: Tensor::matrix(max_tokens, dim, data)?, tokens: used, truncated })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        assert_eq!(embed_prompt("bright circle", 8, 32).unwrap(), embed_prompt("bright circle", 8, 32).unwrap());
    }

    #[test]
    fn blank_prompt_rejected() {
        assert!(embed_prompt("   \t ", 8, 32).is_err());
    }

    #[test]
    fn rows_are_unit_and_padding_zero() {
        let e = embed_prompt("a b c", 5, 16).unwrap();
        for r in 0..3 {
            let n: f32 = e.values.row(r).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-5);
        }
        assert!(e.values.row(3).iter().chain(e.values.row(4)).all(|&v| v == 0.0));
        assert!(!e.truncated);
    }

    #[test]
    fn distinct_words_are_not_parallel() {
        let a = embed_prompt("circle", 1, 32).unwrap();
        let b = embed_prompt("square", 1, 32).unwrap();
        // oracle: independent hashing of the two words
        let (va, vb) = (token_vector("circle", 32), token_vector("square", 32));
        assert_eq!(a.values.row(0), va.as_slice());
        let cos: f32 = va.iter().zip(&vb).map(|(x, y)| x * y).sum();
        let got: f32 = a.values.row(0).iter().zip(b.values.row(0)).map(|(x, y)| x * y).sum();
        assert!((cos - got).abs() < 1e-6);
        assert!(got < 0.999);
    }

    #[test]
    fn overlong_prompt_is_flagged() {
        let e = embed_prompt("one two three four", 2, 8).unwrap();
        assert!(e.truncated);
        assert_eq!(e.tokens, 2);
    }

    #[test]
    fn case_insensitive() {
        assert_eq!(embed_prompt("Bright", 2, 8).unwrap(), embed_prompt("bright", 2, 8).unwrap());
    }
}
