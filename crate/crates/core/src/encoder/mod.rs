//! Surrogate layered sequence encoder.
//!
//! Stands in for the multimodal backbone: (history, query, candidate) is
//! tokenized into fixed blocks, embedded, and passed through a stack of
//! tanh layers with causal prefix-mean mixing, so the appended terminal
//! token acts as a sequence summary. Exposes every layer's activations for
//! probing.

mod prefdisc;

pub use prefdisc::{evaluate, train_prefdisc, PrefDiscModel, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::linalg;
use crate::seeds;
use crate::synth::{FeatureImage, PreferenceHistory, PreferenceRecord};
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

/// Surrogate encoder geometry.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    /// Transformer-depth analogue; the reference backbone has 32 layers.
    pub n_layers: usize,
    pub d_model: usize,
    /// Tokens per rendered item (history records and the candidate).
    pub n_tokens_per_item: usize,
    /// Feature dimension of incoming items.
    pub d_img: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 8,
            d_model: 64,
            n_tokens_per_item: 2,
            d_img: 16,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::validation("encoder needs n_layers >= 2"));
        }
        if self.d_model < 8 {
            return Err(Error::validation("encoder needs d_model >= 8"));
        }
        if self.n_tokens_per_item == 0 || self.d_img == 0 {
            return Err(Error::validation("token block and feature dims must be positive"));
        }
        Ok(())
    }

    /// Sequence length for a history of `n` records:
    /// n*k item tokens + 1 query token + k candidate tokens + 1 terminal.
    pub fn seq_len(&self, history_len: usize) -> usize {
        history_len * self.n_tokens_per_item + 1 + self.n_tokens_per_item + 1
    }
}

/// Per-layer, per-token activations, including the input embedding as
/// layer 0 (shape (n_layers + 1, T, d_model)).
#[derive(Debug, Clone)]
pub struct LayerActivations {
    pub activations: Array3<f64>,
    pub token_mask: Vec<bool>,
}

impl LayerActivations {
    pub fn n_layers(&self) -> usize {
        self.activations.shape()[0] - 1
    }

    pub fn seq_len(&self) -> usize {
        self.activations.shape()[1]
    }

    pub fn d_model(&self) -> usize {
        self.activations.shape()[2]
    }

    /// View of one layer (0 = input embedding, 1..=n_layers = stack).
    pub fn layer(&self, l: usize) -> ndarray::ArrayView2<'_, f64> {
        self.activations.index_axis(ndarray::Axis(0), l)
    }

    pub fn is_finite(&self) -> bool {
        self.activations.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerParams {
    pub w: Array2<f64>,
    pub u: Array2<f64>,
    pub b: Array1<f64>,
}

/// Frozen input-embedding maps plus the trainable layer stack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderParams {
    /// Item-feature projection per block position, d_model x d_img.
    pub item_proj: Vec<Array2<f64>>,
    pub label_offset: [Array1<f64>; 2],
    pub candidate_marker: Array1<f64>,
    pub query_base: Array1<f64>,
    pub terminal_embed: Array1<f64>,
    /// Candidate-history interaction maps: projections of the candidate
    /// features gated elementwise by the mean liked / mean disliked history
    /// features. The cross-attention a full backbone would compute between
    /// candidate and history reduces to these fixed product features here.
    pub like_interaction: Array2<f64>,
    pub dislike_interaction: Array2<f64>,
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    pub fn init(config: &EncoderConfig) -> Self {
        let d = config.d_model;
        let mut rng = seeds::child_rng(config.seed, "encoder_embed", 0);
        let item_proj = (0..config.n_tokens_per_item)
            .map(|_| linalg::gaussian_matrix(&mut rng, d, config.d_img, 1.0 / (config.d_img as f64).sqrt()))
            .collect();
        let label_offset = [
            linalg::gaussian_vector(&mut rng, d, 0.5),
            linalg::gaussian_vector(&mut rng, d, 0.5),
        ];
        let candidate_marker = linalg::gaussian_vector(&mut rng, d, 0.5);
        let query_base = linalg::gaussian_vector(&mut rng, d, 0.5);
        let terminal_embed = linalg::gaussian_vector(&mut rng, d, 0.5);
        let inter_scale = 1.0 / (config.d_img as f64).sqrt();
        let like_interaction = linalg::gaussian_matrix(&mut rng, d, config.d_img, inter_scale);
        let dislike_interaction = linalg::gaussian_matrix(&mut rng, d, config.d_img, inter_scale);

        let mut layer_rng = seeds::child_rng(config.seed, "encoder_layers", 0);
        let scale = 1.2 / (d as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                w: linalg::gaussian_matrix(&mut layer_rng, d, d, scale),
                u: linalg::gaussian_matrix(&mut layer_rng, d, d, scale),
                b: Array1::zeros(d),
            })
            .collect();
        EncoderParams {
            item_proj,
            label_offset,
            candidate_marker,
            query_base,
            terminal_embed,
            like_interaction,
            dislike_interaction,
            layers,
        }
    }

    pub fn layer_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.len() + l.u.len() + l.b.len())
            .sum()
    }
}

fn hash_query(query: &str) -> u64 {
    // FNV-1a; stable across platforms
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in query.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Embed (history, query, candidate) into the layer-0 token sequence.
fn embed_tokens(
    params: &EncoderParams,
    config: &EncoderConfig,
    history: &PreferenceHistory,
    query: &str,
    candidate: &FeatureImage,
) -> Result<Array2<f64>> {
    let k = config.n_tokens_per_item;
    let t_total = config.seq_len(history.records.len());
    let mut tokens = Array2::zeros((t_total, config.d_model));
    let mut row = 0;

    let check_dim = |features: &Vec<f64>| -> Result<()> {
        if features.len() != config.d_img {
            return Err(Error::dimension(config.d_img, features.len(), "item features"));
        }
        Ok(())
    };

    for rec in &history.records {
        check_dim(&rec.item.features)?;
        for r in 0..k {
            let base = linalg::matvec(&params.item_proj[r].view(), &rec.item.features);
            let offset = &params.label_offset[rec.label as usize];
            for (j, v) in base.iter().enumerate() {
                tokens[[row, j]] = v + offset[j];
            }
            row += 1;
        }
    }
    let mut qrng = seeds::rng(hash_query(query));
    let qnoise = linalg::gaussian_vector(&mut qrng, config.d_model, 0.1);
    for j in 0..config.d_model {
        tokens[[row, j]] = params.query_base[j] + qnoise[j];
    }
    row += 1;

    // per-label mean history features, gating the candidate tokens
    let label_mean = |label: u8| -> Vec<f64> {
        let items: Vec<&PreferenceRecord> = history
            .records
            .iter()
            .filter(|r| r.label == label)
            .collect();
        let mut mean = vec![0.0; config.d_img];
        if items.is_empty() {
            return mean;
        }
        for it in &items {
            for (m, f) in mean.iter_mut().zip(&it.item.features) {
                *m += f;
            }
        }
        mean.iter_mut().for_each(|m| *m /= items.len() as f64);
        mean
    };
    let mean_liked = label_mean(1);
    let mean_disliked = label_mean(0);
    let gate = |mean: &[f64]| -> Vec<f64> {
        candidate
            .features
            .iter()
            .zip(mean)
            .map(|(c, m)| c * m)
            .collect()
    };

    check_dim(&candidate.features)?;
    let like_feat = linalg::matvec(&params.like_interaction.view(), &gate(&mean_liked));
    let dis_feat = linalg::matvec(&params.dislike_interaction.view(), &gate(&mean_disliked));
    for r in 0..k {
        let base = linalg::matvec(&params.item_proj[r].view(), &candidate.features);
        for (j, v) in base.iter().enumerate() {
            tokens[[row, j]] = v + params.candidate_marker[j] + like_feat[j] + dis_feat[j];
        }
        row += 1;
    }
    for j in 0..config.d_model {
        tokens[[row, j]] = params.terminal_embed[j];
    }
    Ok(tokens)
}

/// Forward pass: h_l[t] = tanh(W_l h_{l-1}[t] + U_l c_{l-1}[t] + b_l) where
/// c is the inclusive causal prefix mean. Deterministic given inputs and
/// parameters.
pub fn encode(
    params: &EncoderParams,
    config: &EncoderConfig,
    history: &PreferenceHistory,
    query: &str,
    candidate: &FeatureImage,
) -> Result<LayerActivations> {
    config.validate()?;
    let tokens = embed_tokens(params, config, history, query, candidate)?;
    let t_total = tokens.nrows();
    let d = config.d_model;
    let mut acts = Array3::zeros((config.n_layers + 1, t_total, d));
    acts.index_axis_mut(ndarray::Axis(0), 0).assign(&tokens);

    let mut prev = tokens;
    for (l, layer) in params.layers.iter().enumerate() {
        let mut next = Array2::zeros((t_total, d));
        let mut prefix_sum = vec![0.0; d];
        for t in 0..t_total {
            for j in 0..d {
                prefix_sum[j] += prev[[t, j]];
            }
            let inv = 1.0 / (t + 1) as f64;
            let h_t = prev.row(t);
            let h_slice = h_t.as_slice().expect("contiguous");
            for i in 0..d {
                let wrow = layer.w.row(i);
                let urow = layer.u.row(i);
                let mut a = layer.b[i];
                a += linalg::dot(wrow.as_slice().expect("contiguous"), h_slice);
                let u_slice = urow.as_slice().expect("contiguous");
                let mut cu = 0.0;
                for j in 0..d {
                    cu += u_slice[j] * prefix_sum[j];
                }
                a += cu * inv;
                next[[t, i]] = a.tanh();
            }
        }
        acts.index_axis_mut(ndarray::Axis(0), l + 1).assign(&next);
        prev = next;
    }
    Ok(LayerActivations {
        activations: acts,
        token_mask: vec![true; t_total],
    })
}
