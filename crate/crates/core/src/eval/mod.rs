//! Metric suite: Fréchet distance on surrogate features, CMMD, cosine image
//! similarity, pairwise discriminator accuracy, planted-factor style and
//! semantic proxies, and the K-means clustering report.

mod clustering;

pub use clustering::{clustering_eval, kmeans, ClusteringReport};

use crate::alignment::{mmd_value, KernelConfig};
use crate::encoder::PrefDiscModel;
use crate::error::{Error, Result};
use crate::linalg;
use crate::synth::{BenchQuery, UserProfile, World};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// A set of embedding rows with a provenance tag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSet {
    pub rows: Array2<f64>,
    pub tag: String,
}

impl FeatureSet {
    pub fn new(rows: Vec<Vec<f64>>, tag: impl Into<String>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::validation("feature set needs at least one row"));
        }
        let d = rows[0].len();
        let mut m = Array2::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(Error::dimension(d, r.len(), format!("feature row {i}")));
            }
            if !linalg::all_finite(r) {
                return Err(Error::numerical(format!("non-finite entry in feature row {i}")));
            }
            for (j, v) in r.iter().enumerate() {
                m[[i, j]] = *v;
            }
        }
        Ok(FeatureSet {
            rows: m,
            tag: tag.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn to_vecs(&self) -> Vec<Vec<f64>> {
        self.rows.rows().into_iter().map(|r| r.to_vec()).collect()
    }
}

const COV_REG_EPS: f64 = 1e-6;
/// Negative-eigenvalue mass beyond this (relative) aborts the square root.
const SQRT_NEG_TOL: f64 = 1e-6;

/// Symmetric PSD square root via eigendecomposition; eigenvalues slightly
/// below zero (numerical noise) clamp to zero, larger negatives error.
fn psd_sqrt(m: &Array2<f64>) -> Result<Array2<f64>> {
    let (eig, vecs) = linalg::symmetric_eigen(&m.view())?;
    let scale = eig.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
    let n = eig.len();
    let mut out = Array2::zeros((n, n));
    let mut roots = vec![0.0; n];
    for (i, &l) in eig.iter().enumerate() {
        if l < -SQRT_NEG_TOL * scale {
            return Err(Error::numerical(format!(
                "matrix square root: eigenvalue {l} below tolerance"
            )));
        }
        roots[i] = l.max(0.0).sqrt();
    }
    for i in 0..n {
        for j in 0..n {
            out[[i, j]] = (0..n).map(|k| vecs[[i, k]] * roots[k] * vecs[[j, k]]).sum();
        }
    }
    Ok(out)
}

/// trace((A B)^{1/2}) computed as trace((A^{1/2} B A^{1/2})^{1/2}), which is
/// symmetric PSD whenever A and B are.
fn trace_sqrt_product(cov_a: &Array2<f64>, cov_b: &Array2<f64>) -> Result<f64> {
    let root_a = psd_sqrt(cov_a)?;
    let inner = root_a.dot(cov_b).dot(&root_a);
    let (eig, _) = linalg::symmetric_eigen(&inner.view())?;
    let scale = eig.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
    let mut tr = 0.0;
    for &l in &eig {
        if l < -SQRT_NEG_TOL * scale {
            return Err(Error::numerical(format!(
                "matrix square root: eigenvalue {l} below tolerance"
            )));
        }
        tr += l.max(0.0).sqrt();
    }
    Ok(tr)
}

/// ||mu_A - mu_B||^2 + tr(S_A + S_B - 2 (S_A S_B)^{1/2}) on surrogate
/// features. Covariances are regularized by eps*I when a set has fewer than
/// d + 1 rows.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dimension(a.dim(), b.dim(), "Fréchet feature sets"));
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::validation("Fréchet distance needs >= 2 rows per set"));
    }
    let d = a.dim();
    let mu_a = linalg::row_mean(&a.rows.view());
    let mu_b = linalg::row_mean(&b.rows.view());
    let mut cov_a = linalg::covariance(&a.rows.view());
    let mut cov_b = linalg::covariance(&b.rows.view());
    if a.len() < d + 1 {
        for i in 0..d {
            cov_a[[i, i]] += COV_REG_EPS;
        }
    }
    if b.len() < d + 1 {
        for i in 0..d {
            cov_b[[i, i]] += COV_REG_EPS;
        }
    }
    let mean_term: f64 = mu_a
        .iter()
        .zip(mu_b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let tr_a: f64 = (0..d).map(|i| cov_a[[i, i]]).sum();
    let tr_b: f64 = (0..d).map(|i| cov_b[[i, i]]).sum();
    let cross = trace_sqrt_product(&cov_a, &cov_b)?;
    Ok(mean_term + tr_a + tr_b - 2.0 * cross)
}

/// CMMD: the MMD two-sample statistic evaluated on embedding sets. This is
/// the same computation the alignment loss uses, through the same code path.
pub fn cmmd(a: &FeatureSet, b: &FeatureSet, kernel: &KernelConfig) -> Result<f64> {
    mmd_value(&a.to_vecs(), &b.to_vecs(), kernel)
}

/// Mean pairwise cosine similarity between generated rows and
/// preferred-reference rows; in [-1, 1].
pub fn clip_img_score(generated: &FeatureSet, preferred_refs: &FeatureSet) -> Result<f64> {
    if generated.dim() != preferred_refs.dim() {
        return Err(Error::dimension(generated.dim(), preferred_refs.dim(), "cosine feature sets"));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for g in generated.rows.rows() {
        for r in preferred_refs.rows.rows() {
            acc += linalg::cosine(
                g.as_slice().expect("contiguous"),
                r.as_slice().expect("contiguous"),
            )?;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Per-pair outcome of the pairwise preference evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairDecision {
    pub user_id: String,
    pub p_positive: f64,
    pub p_negative: f64,
    /// 1.0 correct, 0.5 tie, 0.0 wrong.
    pub credit: f64,
}

/// Pairwise discriminator accuracy: the fraction of benchmark pairs where
/// the model scores the preferred candidate higher; ties earn half credit.
pub fn prefdisc_accuracy(
    model: &PrefDiscModel,
    pairs: &[BenchQuery],
) -> Result<(f64, Vec<PairDecision>)> {
    if pairs.is_empty() {
        return Err(Error::validation("pairwise evaluation needs pairs"));
    }
    let mut decisions = Vec::with_capacity(pairs.len());
    let mut credit_sum = 0.0;
    for q in pairs {
        let query = format!("Would user {} like this image?", q.user_id);
        let p_pos = model.predict_preference(&q.history, &query, &q.positive)?;
        let p_neg = model.predict_preference(&q.history, &query, &q.negative)?;
        let credit = if p_pos > p_neg {
            1.0
        } else if p_pos == p_neg {
            0.5
        } else {
            0.0
        };
        credit_sum += credit;
        decisions.push(PairDecision {
            user_id: q.user_id.clone(),
            p_positive: p_pos,
            p_negative: p_neg,
            credit,
        });
    }
    Ok((credit_sum / pairs.len() as f64, decisions))
}

/// Cosine of generated rows against the planted style direction of the
/// user's liked attributes and the planted semantic direction of the
/// prompt. Both directions are recoverable because the world stores clean
/// factors.
pub fn style_semantic_proxy(
    generated: &FeatureSet,
    world: &World,
    profile: &UserProfile,
    prompt_id: u64,
) -> Result<(f64, f64)> {
    let style_dir = world.style_factor(&profile.liked)?;
    let sem_dir = world.semantic_factor(prompt_id);
    if generated.dim() != style_dir.len() {
        return Err(Error::dimension(style_dir.len(), generated.dim(), "proxy feature dim"));
    }
    let mut style_acc = 0.0;
    let mut sem_acc = 0.0;
    let n = generated.len() as f64;
    for row in generated.rows.rows() {
        let r = row.as_slice().expect("contiguous");
        style_acc += linalg::cosine(r, &style_dir)?;
        sem_acc += linalg::cosine(r, &sem_dir)?;
    }
    Ok((style_acc / n, sem_acc / n))
}
