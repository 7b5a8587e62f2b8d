//! Simulated user profiles: a liked/disliked partition of sampled attributes.

use crate::error::{Error, Result};
use crate::seeds;
use crate::synth::taxonomy::AttributeTaxonomy;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// A simulated user's ground-truth taste: which attributes they like and
/// which they dislike. Drives annotation and every downstream evaluation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct UserProfile {
    pub user_id: String,
    pub liked: BTreeSet<String>,
    pub disliked: BTreeSet<String>,
    pub rng_seed: u64,
}

impl UserProfile {
    pub fn attribute_count(&self) -> usize {
        self.liked.len() + self.disliked.len()
    }

    pub fn knows(&self, attr: &str) -> bool {
        self.liked.contains(attr) || self.disliked.contains(attr)
    }
}

/// Sample a user profile: a random `attr_count`-subset of the taxonomy split
/// into liked and disliked, both guaranteed non-empty. Same seed, same
/// profile.
pub fn sample_user_profile(
    taxonomy: &AttributeTaxonomy,
    seed: u64,
    attr_count: usize,
) -> Result<UserProfile> {
    if attr_count > taxonomy.len() {
        return Err(Error::validation(format!(
            "attr_count {} exceeds taxonomy size {}",
            attr_count,
            taxonomy.len()
        )));
    }
    if attr_count < 2 {
        return Err(Error::validation(
            "attr_count must be >= 2 so liked and disliked are both non-empty",
        ));
    }
    let mut rng = seeds::child_rng(seed, "profile", 0);
    let mut pool: Vec<&String> = taxonomy.all_attributes().iter().collect();
    pool.shuffle(&mut rng);
    let chosen = &pool[..attr_count];

    let mut liked = BTreeSet::new();
    let mut disliked = BTreeSet::new();
    for attr in chosen {
        if rng.gen_bool(0.5) {
            liked.insert((*attr).clone());
        } else {
            disliked.insert((*attr).clone());
        }
    }
    // both sides must be inhabited; move one element if a coin run emptied one
    if liked.is_empty() {
        let moved = disliked.iter().next().expect("attr_count >= 2").clone();
        disliked.remove(&moved);
        liked.insert(moved);
    }
    if disliked.is_empty() {
        let moved = liked.iter().next().expect("attr_count >= 2").clone();
        liked.remove(&moved);
        disliked.insert(moved);
    }
    Ok(UserProfile {
        user_id: format!("user-{seed:016x}"),
        liked,
        disliked,
        rng_seed: seed,
    })
}
