//! Feature-space image rendering and the annotation oracle.
//!
//! An "image" is a dense feature vector: the sum of a prompt-derived semantic
//! factor, an attribute-derived style factor, and seeded Gaussian noise. The
//! clean factors are kept on the record so evaluation can score style and
//! semantics against planted ground truth.

use crate::error::{Error, Result};
use crate::linalg;
use crate::seeds;
use crate::synth::profile::UserProfile;
use crate::synth::taxonomy::AttributeTaxonomy;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Geometry and noise of the simulated image space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldConfig {
    /// Feature dimension of rendered items.
    pub d_img: usize,
    /// Stddev of the additive Gaussian noise.
    pub noise_sigma: f64,
    /// Number of distinct prompts in the world.
    pub n_prompts: usize,
    /// Per-item attribute subset size range (inclusive).
    pub attrs_per_item: (usize, usize),
    /// Root seed for the fixed factor matrices.
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            d_img: 16,
            noise_sigma: 0.1,
            n_prompts: 32,
            attrs_per_item: (3, 8),
            seed: 0,
        }
    }
}

/// A rendered item: noisy features plus the clean planted factors.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeatureImage {
    pub features: Vec<f64>,
    pub prompt_id: u64,
    pub active_attributes: BTreeSet<String>,
    pub style_factor: Vec<f64>,
    pub semantic_factor: Vec<f64>,
}

/// The simulated world: a taxonomy plus the fixed seeded factor matrices.
/// Columns of the semantic and style maps are derived lazily per index, so
/// two worlds with the same config render bit-identical items.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct World {
    pub taxonomy: AttributeTaxonomy,
    pub config: WorldConfig,
}

impl World {
    pub fn new(taxonomy: AttributeTaxonomy, config: WorldConfig) -> Self {
        World { taxonomy, config }
    }

    /// Column of the semantic map for one prompt (clean content component).
    pub fn semantic_factor(&self, prompt_id: u64) -> Vec<f64> {
        let mut rng = seeds::child_rng(self.config.seed, "m_sem", prompt_id);
        let scale = 1.0 / (self.config.d_img as f64).sqrt();
        linalg::gaussian_vector(&mut rng, self.config.d_img, scale).to_vec()
    }

    /// Column of the style map for one attribute (clean style direction).
    pub fn style_direction(&self, attr_index: usize) -> Vec<f64> {
        let mut rng = seeds::child_rng(self.config.seed, "m_sty", attr_index as u64);
        let scale = 1.0 / (self.config.d_img as f64).sqrt();
        linalg::gaussian_vector(&mut rng, self.config.d_img, scale).to_vec()
    }

    /// Sum of style directions over an attribute subset (the multi-hot map).
    pub fn style_factor(&self, attrs: &BTreeSet<String>) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.config.d_img];
        for attr in attrs {
            let idx = self.taxonomy.attribute_index(attr).ok_or_else(|| {
                Error::validation(format!("attribute '{attr}' not in taxonomy"))
            })?;
            let dir = self.style_direction(idx);
            for (o, d) in out.iter_mut().zip(&dir) {
                *o += d;
            }
        }
        Ok(out)
    }

    /// Render one item: semantic factor + style factor + sigma * noise.
    /// Deterministic given (config, prompt, attributes, item_seed).
    pub fn render_item(
        &self,
        prompt_id: u64,
        attribute_subset: &BTreeSet<String>,
        item_seed: u64,
    ) -> Result<FeatureImage> {
        if attribute_subset.is_empty() {
            return Err(Error::validation("render_item needs a non-empty attribute subset"));
        }
        let semantic = self.semantic_factor(prompt_id);
        let style = self.style_factor(attribute_subset)?;
        let mut rng = seeds::child_rng(item_seed, "render_noise", prompt_id);
        let noise =
            linalg::gaussian_vector(&mut rng, self.config.d_img, self.config.noise_sigma);
        let features: Vec<f64> = semantic
            .iter()
            .zip(&style)
            .zip(noise.iter())
            .map(|((s, t), n)| s + t + n)
            .collect();
        debug_assert!(linalg::all_finite(&features));
        Ok(FeatureImage {
            features,
            prompt_id,
            active_attributes: attribute_subset.clone(),
            style_factor: style,
            semantic_factor: semantic,
        })
    }
}

/// Annotation oracle: liked iff the item's attributes overlap the profile's
/// liked set strictly more than its disliked set. Ties resolve to dislike.
pub fn annotate(profile: &UserProfile, item: &FeatureImage) -> u8 {
    let liked_overlap = item
        .active_attributes
        .iter()
        .filter(|a| profile.liked.contains(*a))
        .count();
    let disliked_overlap = item
        .active_attributes
        .iter()
        .filter(|a| profile.disliked.contains(*a))
        .count();
    u8::from(liked_overlap > disliked_overlap)
}

/// Signed annotation margin: liked-overlap minus disliked-overlap. Used to
/// rank which liked image anchors the visual embedding.
pub fn annotate_margin(profile: &UserProfile, item: &FeatureImage) -> i64 {
    let liked_overlap = item
        .active_attributes
        .iter()
        .filter(|a| profile.liked.contains(*a))
        .count() as i64;
    let disliked_overlap = item
        .active_attributes
        .iter()
        .filter(|a| profile.disliked.contains(*a))
        .count() as i64;
    liked_overlap - disliked_overlap
}
