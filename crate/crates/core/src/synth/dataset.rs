//! Preference-oriented VQA dataset construction, user-disjoint splits, and
//! the held-out evaluation benchmark.

use crate::error::{Error, Result};
use crate::seeds;
use crate::synth::profile::{sample_user_profile, UserProfile};
use crate::synth::render::{annotate, FeatureImage, World};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// One labeled item: 1 = liked, 0 = disliked.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PreferenceRecord {
    pub item: FeatureImage,
    pub label: u8,
}

/// The sparse preference set conditioning all downstream extraction.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PreferenceHistory {
    pub user_id: String,
    pub records: Vec<PreferenceRecord>,
}

impl PreferenceHistory {
    pub fn has_both_labels(&self) -> bool {
        self.records.iter().any(|r| r.label == 1) && self.records.iter().any(|r| r.label == 0)
    }
}

/// One preference-VQA sample: does this user like this candidate, and which
/// profile attributes drove the call.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VQARecord {
    pub history: PreferenceHistory,
    pub query: String,
    pub candidate: FeatureImage,
    pub answer: u8,
    pub attributes: Vec<String>,
    pub attribute_text: String,
}

/// All VQA samples for one simulated user, plus the ground-truth profile.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserDataset {
    pub profile: UserProfile,
    pub records: Vec<VQARecord>,
}

/// User-disjoint train/val/test split.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub ratios: (f64, f64, f64),
}

impl DatasetSplit {
    pub fn is_disjoint(&self) -> bool {
        let t: BTreeSet<&String> = self.train.iter().collect();
        let v: BTreeSet<&String> = self.val.iter().collect();
        let s: BTreeSet<&String> = self.test.iter().collect();
        t.is_disjoint(&v) && t.is_disjoint(&s) && v.is_disjoint(&s)
    }
}

/// History length range used when slicing per-record histories.
pub const HISTORY_LEN_RANGE: (usize, usize) = (6, 14);

const USER_RESAMPLE_BOUND: usize = 24;

fn attribute_text(attrs: &[String]) -> String {
    attrs.join(", ")
}

/// Sample an item's attribute subset from the user's own profile attributes.
/// Sizes are uniform over the configured range (clamped to the pool).
fn sample_item_attributes<R: Rng>(
    rng: &mut R,
    profile: &UserProfile,
    range: (usize, usize),
) -> BTreeSet<String> {
    let pool: Vec<&String> = profile.liked.iter().chain(profile.disliked.iter()).collect();
    let lo = range.0.max(1).min(pool.len());
    let hi = range.1.max(lo).min(pool.len());
    let count = rng.gen_range(lo..=hi);
    let mut shuffled = pool;
    shuffled.shuffle(rng);
    shuffled[..count].iter().map(|s| (*s).clone()).collect()
}

/// Generate one user's labeled item pool; retry the whole pool while it is
/// single-label, up to a bound.
fn generate_user_pool(
    world: &World,
    profile: &UserProfile,
    items: usize,
    user_seed: u64,
) -> Result<Vec<PreferenceRecord>> {
    for attempt in 0..USER_RESAMPLE_BOUND {
        let mut rng = seeds::child_rng(user_seed, "items", attempt as u64);
        let mut pool = Vec::with_capacity(items);
        for j in 0..items {
            let prompt_id = rng.gen_range(0..world.config.n_prompts as u64);
            let attrs = sample_item_attributes(&mut rng, profile, world.config.attrs_per_item);
            let item_seed = seeds::child_seed(user_seed, "item", (attempt * items + j) as u64);
            let item = world.render_item(prompt_id, &attrs, item_seed)?;
            let label = annotate(profile, &item);
            pool.push(PreferenceRecord { item, label });
        }
        // >= 2 of each label so every history (pool minus the candidate)
        // can still carry both labels
        let liked = pool.iter().filter(|r| r.label == 1).count();
        if liked >= 2 && pool.len() - liked >= 2 {
            return Ok(pool);
        }
    }
    Err(Error::validation(format!(
        "user {} produced a single-label pool after {USER_RESAMPLE_BOUND} resamples",
        profile.user_id
    )))
}

/// Slice a history for one candidate: the other pool items, sampled to the
/// configured length, always containing both labels.
fn slice_history<R: Rng>(
    rng: &mut R,
    profile: &UserProfile,
    pool: &[PreferenceRecord],
    candidate_idx: usize,
) -> PreferenceHistory {
    let mut others: Vec<usize> = (0..pool.len()).filter(|&i| i != candidate_idx).collect();
    others.shuffle(rng);
    let lo = HISTORY_LEN_RANGE.0.min(others.len());
    let hi = HISTORY_LEN_RANGE.1.min(others.len());
    let len = if lo >= hi { hi } else { rng.gen_range(lo..=hi) };
    let mut chosen: Vec<usize> = others[..len].to_vec();
    // guarantee both labels: swap in a missing-label record when needed
    for needed in [0u8, 1u8] {
        if !chosen.iter().any(|&i| pool[i].label == needed) {
            if let Some(&fix) = others[len..].iter().find(|&&i| pool[i].label == needed) {
                chosen[0] = fix;
            }
        }
    }
    chosen.sort_unstable();
    PreferenceHistory {
        user_id: profile.user_id.clone(),
        records: chosen.iter().map(|&i| pool[i].clone()).collect(),
    }
}

/// Build the preference-VQA dataset: `n_users` simulated users, each with
/// `items_per_user` annotated candidates and per-candidate histories.
pub fn build_pref_dataset(
    world: &World,
    n_users: usize,
    items_per_user: usize,
    attr_count: usize,
    seed: u64,
) -> Result<Vec<UserDataset>> {
    if items_per_user < 8 {
        return Err(Error::validation(
            "items_per_user must be >= 8 so histories retain both labels",
        ));
    }
    let mut out = Vec::with_capacity(n_users);
    for u in 0..n_users {
        let user_seed = seeds::child_seed(seed, "user", u as u64);
        let profile = sample_user_profile(&world.taxonomy, user_seed, attr_count)?;
        let pool = generate_user_pool(world, &profile, items_per_user, user_seed)?;
        let mut records = Vec::with_capacity(items_per_user);
        let mut rng = seeds::child_rng(user_seed, "history", 0);
        for (j, rec) in pool.iter().enumerate() {
            let history = slice_history(&mut rng, &profile, &pool, j);
            let drivers: Vec<String> = rec
                .item
                .active_attributes
                .iter()
                .filter(|a| profile.knows(a))
                .cloned()
                .collect();
            records.push(VQARecord {
                history,
                query: format!("Would user {} like this image?", profile.user_id),
                candidate: rec.item.clone(),
                answer: rec.label,
                attribute_text: attribute_text(&drivers),
                attributes: drivers,
            });
        }
        out.push(UserDataset { profile, records });
    }
    Ok(out)
}

/// User-disjoint split. Val/test sizes floor; the remainder goes to train.
pub fn split_by_user(
    user_ids: &[String],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!("split ratios sum to {sum}, not 1")));
    }
    if ratios.0 < 0.0 || ratios.1 < 0.0 || ratios.2 < 0.0 {
        return Err(Error::validation("split ratios must be non-negative"));
    }
    let n = user_ids.len();
    if n < 3 {
        return Err(Error::validation(format!("need >= 3 users to split, got {n}")));
    }
    let mut order: Vec<String> = user_ids.to_vec();
    let mut rng = seeds::child_rng(seed, "split", 0);
    order.shuffle(&mut rng);

    let n_val = (ratios.1 * n as f64).floor() as usize;
    let n_test = (ratios.2 * n as f64).floor() as usize;
    let n_train = n - n_val - n_test;
    Ok(DatasetSplit {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
        ratios,
    })
}

/// One benchmark query: a history plus a (preferred, non-preferred) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchQuery {
    pub user_id: String,
    pub history: PreferenceHistory,
    pub positive: FeatureImage,
    pub negative: FeatureImage,
}

/// Per-user benchmark slice: the profile and its paired queries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchUser {
    pub profile: UserProfile,
    pub queries: Vec<BenchQuery>,
}

/// Sample `users_k` held-out users, each contributing queries built from
/// `images_per_user` annotated images. Users without enough images (or
/// without both labels among them) are skipped and replaced; exhausting the
/// pool is an error.
pub fn build_prefbench(
    dataset: &[UserDataset],
    test_users: &[String],
    users_k: usize,
    images_per_user: usize,
    seed: u64,
) -> Result<Vec<BenchUser>> {
    if images_per_user == 0 {
        return Err(Error::validation("images_per_user must be >= 1"));
    }
    if users_k > test_users.len() {
        return Err(Error::validation(format!(
            "users_k {} exceeds test-user pool {}",
            users_k,
            test_users.len()
        )));
    }
    let mut order: Vec<&String> = test_users.iter().collect();
    let mut rng = seeds::child_rng(seed, "prefbench", 0);
    order.shuffle(&mut rng);

    let mut bench = Vec::with_capacity(users_k);
    for uid in order {
        if bench.len() == users_k {
            break;
        }
        let Some(user) = dataset.iter().find(|u| &u.profile.user_id == uid) else {
            continue;
        };
        // candidates double as the annotated image pool
        let pool: Vec<PreferenceRecord> = user
            .records
            .iter()
            .map(|r| PreferenceRecord {
                item: r.candidate.clone(),
                label: r.answer,
            })
            .collect();
        if pool.len() < images_per_user {
            continue;
        }
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.shuffle(&mut rng);
        let chosen = &idx[..images_per_user];
        let liked: Vec<usize> = chosen.iter().copied().filter(|&i| pool[i].label == 1).collect();
        let disliked: Vec<usize> =
            chosen.iter().copied().filter(|&i| pool[i].label == 0).collect();
        if liked.is_empty() || disliked.is_empty() {
            continue;
        }
        let n_pairs = liked.len().min(disliked.len());
        let mut queries = Vec::with_capacity(n_pairs);
        for p in 0..n_pairs {
            let pos = pool[liked[p]].item.clone();
            let neg = pool[disliked[p]].item.clone();
            let hist_records: Vec<PreferenceRecord> = chosen
                .iter()
                .filter(|&&i| i != liked[p] && i != disliked[p])
                .map(|&i| pool[i].clone())
                .collect();
            queries.push(BenchQuery {
                user_id: user.profile.user_id.clone(),
                history: PreferenceHistory {
                    user_id: user.profile.user_id.clone(),
                    records: hist_records,
                },
                positive: pos,
                negative: neg,
            });
        }
        bench.push(BenchUser {
            profile: user.profile.clone(),
            queries,
        });
    }
    if bench.len() < users_k {
        return Err(Error::validation(format!(
            "only {} of {} requested benchmark users had enough usable images",
            bench.len(),
            users_k
        )));
    }
    Ok(bench)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::render::WorldConfig;
    use crate::synth::taxonomy::{build_taxonomy, TaxonomyConfig};

    fn world() -> World {
        let tax = build_taxonomy(&TaxonomyConfig::default()).unwrap();
        World::new(tax, WorldConfig::default())
    }

    #[test]
    fn every_user_history_has_both_labels() {
        let w = world();
        let data = build_pref_dataset(&w, 50, 12, 50, 3).unwrap();
        assert_eq!(data.len(), 50);
        for user in &data {
            assert!(user.records.iter().any(|r| r.answer == 1));
            assert!(user.records.iter().any(|r| r.answer == 0));
            for rec in &user.records {
                assert!(rec.history.has_both_labels(), "history must keep both labels");
                assert!(rec
                    .attributes
                    .iter()
                    .all(|a| user.profile.knows(a)));
            }
        }
    }

    #[test]
    fn single_user_record_count() {
        let w = world();
        let data = build_pref_dataset(&w, 1, 8, 50, 5).unwrap();
        assert_eq!(data[0].records.len(), 8);
    }

    #[test]
    fn attribute_text_is_comma_joined() {
        let w = world();
        let data = build_pref_dataset(&w, 1, 8, 50, 5).unwrap();
        let rec = &data[0].records[0];
        assert_eq!(rec.attribute_text, rec.attributes.join(", "));
    }

    #[test]
    fn generation_is_bit_reproducible() {
        let w = world();
        let a = build_pref_dataset(&w, 4, 10, 50, 9).unwrap();
        let b = build_pref_dataset(&w, 4, 10, 50, 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.profile, y.profile);
            assert_eq!(x.records, y.records);
        }
    }

    #[test]
    fn split_ten_users_is_8_1_1() {
        let ids: Vec<String> = (0..10).map(|i| format!("u{i}")).collect();
        let s = split_by_user(&ids, (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        assert!(s.is_disjoint());
    }

    #[test]
    fn split_paper_scale_counts() {
        let ids: Vec<String> = (0..50_153).map(|i| format!("u{i}")).collect();
        let s = split_by_user(&ids, (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (40_123, 5_015, 5_015));
    }

    #[test]
    fn split_requires_three_users() {
        let ids: Vec<String> = vec!["a".into(), "b".into()];
        assert!(split_by_user(&ids, (0.8, 0.1, 0.1), 1).is_err());
    }

    #[test]
    fn split_union_covers_population() {
        let ids: Vec<String> = (0..37).map(|i| format!("u{i}")).collect();
        let s = split_by_user(&ids, (0.8, 0.1, 0.1), 4).unwrap();
        let mut all: Vec<String> = s
            .train
            .iter()
            .chain(s.val.iter())
            .chain(s.test.iter())
            .cloned()
            .collect();
        all.sort();
        let mut expect = ids.clone();
        expect.sort();
        assert_eq!(all, expect);
    }

    #[test]
    fn prefbench_desk_default_builds_query_groups() {
        let w = world();
        let data = build_pref_dataset(&w, 24, 12, 50, 7).unwrap();
        let ids: Vec<String> = data.iter().map(|u| u.profile.user_id.clone()).collect();
        let bench = build_prefbench(&data, &ids, 16, 10, 1).unwrap();
        assert_eq!(bench.len(), 16);
        for user in &bench {
            assert!(!user.queries.is_empty());
            for q in &user.queries {
                assert_eq!(q.history.records.len(), 8);
            }
        }
    }

    #[test]
    fn prefbench_zero_images_errors() {
        let w = world();
        let data = build_pref_dataset(&w, 3, 8, 50, 7).unwrap();
        let ids: Vec<String> = data.iter().map(|u| u.profile.user_id.clone()).collect();
        assert!(build_prefbench(&data, &ids, 2, 0, 1).is_err());
    }
}
