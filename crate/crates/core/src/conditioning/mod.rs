//! Unified user representation and its injection into the toy conditional
//! denoiser: core-embedding projection, the liked-image anchor, fusion
//! strategies (Concat / Attn / Res-Attn), component swapping, and the
//! decoupled cross-attention branch.

mod attention;
mod denoiser;

pub use attention::{
    decoupled_cross_attention, AttnCache, BranchProjections, DecoupledAttentionParams,
};
pub use denoiser::{
    denoise_loss_and_grads, generate, train_generator, Denoiser, DenoiserConfig, GenTrainConfig,
    GenTrainSample, NoiseSchedule,
};

pub use attention::attention_backward;

use crate::error::{Error, Result};
use crate::linalg;
use crate::seeds;
use crate::synth::PreferenceRecord;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

/// Single affine map from the encoder's d_model into k context tokens of
/// width d_attn, each token standardized after the reshape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionModel {
    pub k: usize,
    pub d_attn: usize,
    w: Array2<f64>, // (k * d_attn, d_model)
    b: Array1<f64>,
}

impl ProjectionModel {
    pub fn new(d_model: usize, k: usize, d_attn: usize, seed: u64) -> Self {
        let mut rng = seeds::child_rng(seed, "core_projection", 0);
        ProjectionModel {
            k,
            d_attn,
            w: linalg::gaussian_matrix(&mut rng, k * d_attn, d_model, 1.0 / (d_model as f64).sqrt()),
            b: Array1::zeros(k * d_attn),
        }
    }

    /// Affine map, reshape to (k, d_attn), then per-token normalization.
    pub fn project(&self, e_core: &[f64]) -> Result<Array2<f64>> {
        if e_core.len() != self.w.ncols() {
            return Err(Error::dimension(self.w.ncols(), e_core.len(), "core projection input"));
        }
        let mut flat = linalg::matvec(&self.w.view(), e_core);
        for (f, b) in flat.iter_mut().zip(self.b.iter()) {
            *f += b;
        }
        let mut out = Array2::zeros((self.k, self.d_attn));
        for t in 0..self.k {
            let row = &mut flat[t * self.d_attn..(t + 1) * self.d_attn];
            linalg::layer_norm(row, 0.0);
            for j in 0..self.d_attn {
                out[[t, j]] = row[j];
            }
        }
        Ok(out)
    }
}

/// Lifts a prompt's planted semantic factor into text-context tokens for
/// the denoiser, one fixed seeded map per token position.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptEncoder {
    maps: Vec<Array2<f64>>, // each (d_ctx, d_img)
}

impl PromptEncoder {
    pub fn new(d_img: usize, d_ctx: usize, n_tokens: usize, seed: u64) -> Self {
        let mut rng = seeds::child_rng(seed, "prompt_encoder", 0);
        PromptEncoder {
            maps: (0..n_tokens.max(1))
                .map(|_| linalg::gaussian_matrix(&mut rng, d_ctx, d_img, 1.0 / (d_img as f64).sqrt()))
                .collect(),
        }
    }

    pub fn encode(&self, semantic_factor: &[f64]) -> Result<Array2<f64>> {
        if semantic_factor.len() != self.maps[0].ncols() {
            return Err(Error::dimension(
                self.maps[0].ncols(),
                semantic_factor.len(),
                "prompt encoder input",
            ));
        }
        let d_ctx = self.maps[0].nrows();
        let mut out = Array2::zeros((self.maps.len(), d_ctx));
        for (t, m) in self.maps.iter().enumerate() {
            let row = linalg::matvec(&m.view(), semantic_factor);
            for (j, v) in row.iter().enumerate() {
                out[[t, j]] = *v;
            }
        }
        Ok(out)
    }
}

/// Fixed seeded affine map standing in for the image encoder; anchors the
/// user representation in one liked image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEmbedder {
    w: Array2<f64>, // (d_attn, d_img)
    b: Array1<f64>,
}

impl ImageEmbedder {
    pub fn new(d_img: usize, d_attn: usize, seed: u64) -> Self {
        let mut rng = seeds::child_rng(seed, "image_embed", 0);
        ImageEmbedder {
            w: linalg::gaussian_matrix(&mut rng, d_attn, d_img, 1.0 / (d_img as f64).sqrt()),
            b: linalg::gaussian_vector(&mut rng, d_attn, 0.1),
        }
    }

    /// Embed a liked record's features; a disliked record is a contract
    /// violation (the anchor must be a liked image).
    pub fn embed_image(&self, liked: &PreferenceRecord) -> Result<Vec<f64>> {
        if liked.label != 1 {
            return Err(Error::validation(
                "visual anchor must be a liked image (label 1)",
            ));
        }
        if liked.item.features.len() != self.w.ncols() {
            return Err(Error::dimension(
                self.w.ncols(),
                liked.item.features.len(),
                "image embedding input",
            ));
        }
        let mut out = linalg::matvec(&self.w.view(), &liked.item.features);
        for (o, b) in out.iter_mut().zip(self.b.iter()) {
            *o += b;
        }
        Ok(out)
    }
}

/// The three-component user bundle prior to fusion.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UserEmbedding {
    pub e_sem_hat: Vec<f64>,
    pub e_core_tokens: Array2<f64>,
    pub e_img: Vec<f64>,
}

impl UserEmbedding {
    pub fn d_attn(&self) -> usize {
        self.e_sem_hat.len()
    }

    pub fn is_finite(&self) -> bool {
        self.e_sem_hat.iter().all(|v| v.is_finite())
            && self.e_core_tokens.iter().all(|v| v.is_finite())
            && self.e_img.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionStrategy {
    Concat,
    Attn,
    ResAttn,
}

/// Fusion parameters: only Res-Attn carries state, a residual projection
/// that starts at zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionConfig {
    pub strategy: FusionStrategy,
    pub res_proj: Array2<f64>,
}

impl FusionConfig {
    pub fn new(strategy: FusionStrategy, d_attn: usize) -> Self {
        FusionConfig {
            strategy,
            res_proj: Array2::zeros((d_attn, d_attn)),
        }
    }
}

fn fusion_attention(query: &[f64], kv: &Array2<f64>) -> Vec<f64> {
    let d = query.len() as f64;
    let scale = 1.0 / d.sqrt();
    let logits: Vec<f64> = kv
        .rows()
        .into_iter()
        .map(|k| linalg::dot(query, k.as_slice().expect("contiguous")) * scale)
        .collect();
    let weights = linalg::softmax(&logits);
    let mut out = vec![0.0; query.len()];
    for (w, v) in weights.iter().zip(kv.rows()) {
        for (o, vj) in out.iter_mut().zip(v.iter()) {
            *o += w * vj;
        }
    }
    out
}

/// Build the fused user token sequence e_u.
///
/// Concat: rows [e_sem_hat; e_core_tokens; e_img] in that fixed order.
/// Attn: e_img queries (e_sem_hat, e_core_tokens) as keys/values.
/// ResAttn: Attn plus a zero-initialized projection of the query, then
/// layer normalization.
pub fn fuse(user: &UserEmbedding, config: &FusionConfig) -> Result<Array2<f64>> {
    let d = user.e_sem_hat.len();
    if user.e_img.len() != d || user.e_core_tokens.ncols() != d {
        return Err(Error::dimension(d, user.e_img.len().min(user.e_core_tokens.ncols()), "fusion inputs"));
    }
    let k = user.e_core_tokens.nrows();
    match config.strategy {
        FusionStrategy::Concat => {
            let mut out = Array2::zeros((k + 2, d));
            for j in 0..d {
                out[[0, j]] = user.e_sem_hat[j];
            }
            for t in 0..k {
                for j in 0..d {
                    out[[t + 1, j]] = user.e_core_tokens[[t, j]];
                }
            }
            for j in 0..d {
                out[[k + 1, j]] = user.e_img[j];
            }
            Ok(out)
        }
        FusionStrategy::Attn | FusionStrategy::ResAttn => {
            let mut kv = Array2::zeros((k + 1, d));
            for j in 0..d {
                kv[[0, j]] = user.e_sem_hat[j];
            }
            for t in 0..k {
                for j in 0..d {
                    kv[[t + 1, j]] = user.e_core_tokens[[t, j]];
                }
            }
            let mut out = fusion_attention(&user.e_img, &kv);
            if config.strategy == FusionStrategy::ResAttn {
                if config.res_proj.nrows() != d || config.res_proj.ncols() != d {
                    return Err(Error::dimension(d, config.res_proj.nrows(), "residual projection"));
                }
                let res = linalg::matvec(&config.res_proj.view(), &user.e_img);
                for (o, r) in out.iter_mut().zip(&res) {
                    *o += r;
                }
                linalg::layer_norm(&mut out, 1e-5);
            }
            let mut m = Array2::zeros((1, d));
            for j in 0..d {
                m[[0, j]] = out[j];
            }
            Ok(m)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SwapComponent {
    Sem,
    Img,
    Core,
}

impl std::str::FromStr for SwapComponent {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sem" => Ok(SwapComponent::Sem),
            "img" => Ok(SwapComponent::Img),
            "core" => Ok(SwapComponent::Core),
            other => Err(Error::validation(format!(
                "unknown swap component '{other}' (expected sem | img | core)"
            ))),
        }
    }
}

/// Replace one named component of `user_a` with `user_b`'s; the other two
/// stay bit-identical.
pub fn swap_components(
    user_a: &UserEmbedding,
    user_b: &UserEmbedding,
    component: SwapComponent,
) -> Result<UserEmbedding> {
    if user_a.d_attn() != user_b.d_attn()
        || user_a.e_core_tokens.dim() != user_b.e_core_tokens.dim()
    {
        return Err(Error::validation("swap requires matching component dims"));
    }
    let mut out = user_a.clone();
    match component {
        SwapComponent::Sem => out.e_sem_hat = user_b.e_sem_hat.clone(),
        SwapComponent::Img => out.e_img = user_b.e_img.clone(),
        SwapComponent::Core => out.e_core_tokens = user_b.e_core_tokens.clone(),
    }
    Ok(out)
}
