//! Simulated preference universe: attribute taxonomy, user profiles,
//! feature-space items, the annotation oracle, VQA dataset construction,
//! user-disjoint splits, the held-out benchmark, and real-pair filtering.

pub mod dataset;
pub mod filter;
pub mod profile;
pub mod render;
pub mod taxonomy;

pub use dataset::{
    build_pref_dataset, build_prefbench, split_by_user, BenchQuery, BenchUser, DatasetSplit,
    PreferenceHistory, PreferenceRecord, UserDataset, VQARecord,
};
pub use filter::{dbscan, filter_real_pairs, RealPairRecord, ScoreThresholds};
pub use profile::{sample_user_profile, UserProfile};
pub use render::{annotate, annotate_margin, FeatureImage, World, WorldConfig};
pub use taxonomy::{build_taxonomy, AttributeTaxonomy, TaxonomyConfig};
