//! Real-pair curation: DBSCAN outlier removal over prompt embeddings
//! followed by score-threshold pruning.

use crate::error::{Error, Result};
use crate::linalg::squared_distance;
use serde::{Deserialize, Serialize};

/// An (image, prompt) pair with its quality scores, as curated sources
/// provide them.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RealPairRecord {
    pub prompt_embedding: Vec<f64>,
    pub image_embedding: Vec<f64>,
    pub alignment_score: f64,
    pub preference_score: f64,
}

/// Minimum score thresholds applied after clustering.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScoreThresholds {
    pub alignment: f64,
    pub preference: f64,
}

pub const OUTLIER: isize = -1;

/// Plain DBSCAN over points with Euclidean distance. The neighborhood count
/// includes the point itself, so a core point satisfies
/// |N_eps(p)| >= min_pts. Returns -1 for outliers, else 0-based cluster ids
/// assigned in scan order.
pub fn dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Result<Vec<isize>> {
    if eps <= 0.0 {
        return Err(Error::validation(format!("dbscan eps must be > 0, got {eps}")));
    }
    if min_pts < 1 {
        return Err(Error::validation("dbscan min_pts must be >= 1"));
    }
    let n = points.len();
    let eps2 = eps * eps;
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| squared_distance(&points[i], &points[j]) <= eps2)
                .collect()
        })
        .collect();

    const UNVISITED: isize = -2;
    let mut labels = vec![UNVISITED; n];
    let mut cluster: isize = 0;
    for i in 0..n {
        if labels[i] != UNVISITED {
            continue;
        }
        if neighbors[i].len() < min_pts {
            labels[i] = OUTLIER;
            continue;
        }
        labels[i] = cluster;
        let mut frontier: Vec<usize> = neighbors[i].clone();
        let mut k = 0;
        while k < frontier.len() {
            let q = frontier[k];
            k += 1;
            if labels[q] == OUTLIER {
                labels[q] = cluster; // border point
            }
            if labels[q] != UNVISITED {
                continue;
            }
            labels[q] = cluster;
            if neighbors[q].len() >= min_pts {
                frontier.extend(neighbors[q].iter().copied());
            }
        }
        cluster += 1;
    }
    Ok(labels)
}

/// Default eps: half the median pairwise distance between prompt embeddings.
pub fn default_eps(points: &[Vec<f64>]) -> f64 {
    crate::linalg::median_pairwise_distance(points, &[]) * 0.5
}

pub const DEFAULT_MIN_PTS: usize = 4;

/// Curate real pairs in three stages: (1) drop DBSCAN outliers over the
/// prompt embeddings, (2) drop records below the alignment threshold,
/// (3) drop records below the preference threshold.
pub fn filter_real_pairs(
    records: &[RealPairRecord],
    dbscan_eps: f64,
    dbscan_min_pts: usize,
    thresholds: ScoreThresholds,
) -> Result<Vec<RealPairRecord>> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let prompt_dim = records[0].prompt_embedding.len();
    let image_dim = records[0].image_embedding.len();
    for (i, r) in records.iter().enumerate() {
        if r.prompt_embedding.len() != prompt_dim {
            return Err(Error::dimension(
                prompt_dim,
                r.prompt_embedding.len(),
                format!("prompt embedding of record {i}"),
            ));
        }
        if r.image_embedding.len() != image_dim {
            return Err(Error::dimension(
                image_dim,
                r.image_embedding.len(),
                format!("image embedding of record {i}"),
            ));
        }
    }
    let prompts: Vec<Vec<f64>> = records.iter().map(|r| r.prompt_embedding.clone()).collect();
    let labels = dbscan(&prompts, dbscan_eps, dbscan_min_pts)?;
    Ok(records
        .iter()
        .zip(&labels)
        .filter(|(_, &l)| l != OUTLIER)
        .map(|(r, _)| r)
        .filter(|r| r.alignment_score >= thresholds.alignment)
        .filter(|r| r.preference_score >= thresholds.preference)
        .cloned()
        .collect())
}
