//! Fixed seeded text-feature surrogate for attribute descriptions.
//!
//! Tokens (comma-separated attribute names) drive a seeded recurrence; the
//! final state is the embedding, mirroring a last-token sentence summary.

use crate::linalg;
use crate::seeds;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextFeaturizer {
    pub d_out: usize,
    pub seed: u64,
    recur: Array2<f64>,
    input_map: Array2<f64>,
    start: Array1<f64>,
}

impl TextFeaturizer {
    pub fn new(d_out: usize, seed: u64) -> Self {
        let mut rng = seeds::child_rng(seed, "text_featurizer", 0);
        let scale = 1.0 / (d_out as f64).sqrt();
        TextFeaturizer {
            d_out,
            seed,
            recur: linalg::gaussian_matrix(&mut rng, d_out, d_out, scale),
            input_map: linalg::gaussian_matrix(&mut rng, d_out, d_out, scale),
            start: linalg::gaussian_vector(&mut rng, d_out, 0.5),
        }
    }

    fn token_vector(&self, token: &str) -> Array1<f64> {
        // FNV-1a over the token selects a reproducible embedding stream
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in token.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        let mut rng = seeds::child_rng(self.seed, "text_token", h);
        linalg::gaussian_vector(&mut rng, self.d_out, 1.0)
    }

    /// Last-state summary of the token sequence:
    /// s_t = tanh(R s_{t-1} + M x_t), embedding = s_last.
    pub fn embed(&self, attribute_text: &str) -> Vec<f64> {
        let mut state = self.start.clone();
        for token in attribute_text.split(',') {
            let token = token.trim();
            if token.is_empty() {
                continue;
            }
            let x = self.token_vector(token);
            let rs = self.recur.dot(&state);
            let mx = self.input_map.dot(&x);
            state = (&rs + &mx).mapv(f64::tanh);
        }
        state.to_vec()
    }
}
