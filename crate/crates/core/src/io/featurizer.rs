//! Text featurizers: a deterministic hashing surrogate for an external text
//! encoder, and a lookup table for precomputed text embeddings.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Maps a prompt string to a text feature vector.
pub trait TextFeaturizer: Sync {
    fn dim(&self) -> usize;
    fn featurize(&self, text: &str) -> Result<Array1<f64>>;
}

/// Bag-of-tokens hashing featurizer.
///
/// Text is lowercased and split on anything that is not alphanumeric. Each
/// token seeds a ChaCha stream through SHA-256 of `seed (u64 LE) || token`,
/// which yields a Gaussian direction; the output is the normalized sum of
/// the token directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurrogateFeaturizer {
    pub dim: usize,
    pub seed: u64,
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl SurrogateFeaturizer {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("featurizer dimension must be at least 1".into()));
        }
        Ok(SurrogateFeaturizer { dim, seed })
    }

    fn token_vector(&self, token: &str) -> Array1<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(key);
        let v: Array1<f64> = Array1::from_shape_fn(self.dim, |_| StandardNormal.sample(&mut rng));
        let norm = v.dot(&v).sqrt();
        v / norm
    }
}

impl TextFeaturizer for SurrogateFeaturizer {
    fn dim(&self) -> usize {
        self.dim
    }

    fn featurize(&self, text: &str) -> Result<Array1<f64>> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::Validation(format!("text `{text}` has no featurizable tokens")));
        }
        let mut sum = Array1::zeros(self.dim);
        for t in &tokens {
            sum += &self.token_vector(t);
        }
        let norm = sum.dot(&sum).sqrt();
        if norm == 0.0 {
            return Err(Error::numerical(format!("text `{text}` featurizes to the zero vector")));
        }
        Ok(sum / norm)
    }
}

/// Exact-string lookup into precomputed text features.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupFeaturizer {
    dim: usize,
    table: HashMap<String, Array1<f64>>,
}

impl LookupFeaturizer {
    pub fn new(dim: usize) -> Self {
        LookupFeaturizer {
            dim,
            table: HashMap::new(),
        }
    }

    /// Pairs each prompt with the row of `features` at the same position.
    pub fn from_rows(prompts: &[String], features: &Array2<f64>) -> Result<Self> {
        if prompts.len() != features.nrows() {
            return Err(Error::shape(format!(
                "{} prompts for {} feature rows",
                prompts.len(),
                features.nrows()
            )));
        }
        let mut out = LookupFeaturizer::new(features.ncols());
        for (p, row) in prompts.iter().zip(features.axis_iter(Axis(0))) {
            out.insert(p.clone(), row.to_owned())?;
        }
        Ok(out)
    }

    pub fn insert(&mut self, prompt: String, feature: Array1<f64>) -> Result<()> {
        if feature.len() != self.dim {
            return Err(Error::shape(format!(
                "feature for `{prompt}` has length {} instead of {}",
                feature.len(),
                self.dim
            )));
        }
        if self.table.insert(prompt.clone(), feature).is_some() {
            return Err(Error::Validation(format!("duplicate prompt `{prompt}` in text table")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    /// Prompts in sorted order with their features as rows.
    pub fn to_rows(&self) -> (Vec<String>, Array2<f64>) {
        let mut prompts: Vec<String> = self.table.keys().cloned().collect();
        prompts.sort();
        let mut rows = Array2::zeros((prompts.len(), self.dim));
        for (mut row, p) in rows.axis_iter_mut(Axis(0)).zip(&prompts) {
            row.assign(&self.table[p]);
        }
        (prompts, rows)
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl TextFeaturizer for LookupFeaturizer {
    fn dim(&self) -> usize {
        self.dim
    }

    fn featurize(&self, text: &str) -> Result<Array1<f64>> {
        self.table.get(text).cloned().ok_or_else(|| Error::Lookup {
            kind: "prompt in text table",
            name: text.to_string(),
        })
    }
}
