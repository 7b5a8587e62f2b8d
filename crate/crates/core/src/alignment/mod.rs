//! Distribution alignment of semantic preference embeddings into the
//! text-feature space: multi-bandwidth Gaussian-kernel MMD, point-wise
//! baselines (MSE + cosine), the combined objective, the 6-layer MLP
//! adapter, and collapse diagnostics for the loss ablation.

mod adapter;
mod text;
mod train;

pub use adapter::{AdapterConfig, MLPAdapter};
pub use text::TextFeaturizer;
pub use train::{
    loss_ablation_probe,
    collapse_diagnostic, train_alignment, AlignTrainConfig, AlignmentRun, CollapseFlag,
    CollapseReport, StepDiagnostics, DISTANCE_COLLAPSE_FRACTION, VAR_COLLAPSE_THRESHOLD,
};

use crate::error::{Error, Result};
use crate::linalg;
use serde::{Deserialize, Serialize};

/// Whether empirical expectations include same-index kernel terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MmdEstimator {
    /// Includes diagonal terms; exactly 0 on identical multisets and
    /// well-defined from one sample per side.
    Biased,
    /// Excludes diagonal terms; unbiased for the population MMD^2.
    Unbiased,
}

/// Gaussian kernel family with a sum over bandwidths, normalized by count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelConfig {
    pub bandwidths: Vec<f64>,
    pub estimator: MmdEstimator,
}

impl KernelConfig {
    pub fn single(h: f64) -> Self {
        KernelConfig {
            bandwidths: vec![h],
            estimator: MmdEstimator::Biased,
        }
    }

    /// Median-heuristic base bandwidth over the union of two sample sets,
    /// scaled by {0.5, 1, 2}.
    pub fn median_heuristic(a: &[Vec<f64>], b: &[Vec<f64>]) -> Self {
        let base = linalg::median_pairwise_distance(a, b);
        KernelConfig {
            bandwidths: vec![0.5 * base, base, 2.0 * base],
            estimator: MmdEstimator::Biased,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidths.is_empty() {
            return Err(Error::validation("kernel needs at least one bandwidth"));
        }
        for &h in &self.bandwidths {
            if !(h > 0.0) {
                return Err(Error::validation(format!("kernel bandwidth must be > 0, got {h}")));
            }
        }
        Ok(())
    }
}

/// k(x, y) = (1/|H|) sum_h exp(-||x - y||^2 / (2 h^2)).
pub fn gaussian_kernel(x: &[f64], y: &[f64], config: &KernelConfig) -> Result<f64> {
    config.validate()?;
    if x.len() != y.len() {
        return Err(Error::dimension(x.len(), y.len(), "kernel arguments"));
    }
    let d2 = linalg::squared_distance(x, y);
    Ok(kernel_from_sqdist(d2, &config.bandwidths))
}

#[inline]
fn kernel_from_sqdist(d2: f64, bandwidths: &[f64]) -> f64 {
    let mut k = 0.0;
    for &h in bandwidths {
        k += (-d2 / (2.0 * h * h)).exp();
    }
    k / bandwidths.len() as f64
}

/// d/dx of the multi-bandwidth kernel, as a scale on (x - y):
/// grad = coefficient_from_sqdist(d2) * (x - y).
#[inline]
fn kernel_grad_coeff(d2: f64, bandwidths: &[f64]) -> f64 {
    let mut c = 0.0;
    for &h in bandwidths {
        let h2 = h * h;
        c += (-d2 / (2.0 * h2)).exp() * (-1.0 / h2);
    }
    c / bandwidths.len() as f64
}

/// Lexicographic order over flattened sample sets (total order on f64 bits).
fn lex_le(a: &[Vec<f64>], b: &[Vec<f64>]) -> bool {
    let flat = |s: &[Vec<f64>]| s.iter().flatten().copied().collect::<Vec<f64>>();
    let (fa, fb) = (flat(a), flat(b));
    for (x, y) in fa.iter().zip(&fb) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    fa.len() <= fb.len()
}

fn check_mmd_sizes(m: usize, n: usize, estimator: MmdEstimator) -> Result<()> {
    let min = match estimator {
        MmdEstimator::Biased => 1,
        MmdEstimator::Unbiased => 2,
    };
    if m < min || n < min {
        return Err(Error::validation(format!(
            "MMD needs at least {min} sample(s) per side for this estimator, got {m} and {n}"
        )));
    }
    Ok(())
}

/// Empirical squared MMD between two sample sets.
pub fn mmd_value(a: &[Vec<f64>], b: &[Vec<f64>], config: &KernelConfig) -> Result<f64> {
    config.validate()?;
    check_mmd_sizes(a.len(), b.len(), config.estimator)?;
    let d = a[0].len();
    for v in a.iter().chain(b.iter()) {
        if v.len() != d {
            return Err(Error::dimension(d, v.len(), "MMD sample"));
        }
    }
    let h = &config.bandwidths;
    let (m, n) = (a.len() as f64, b.len() as f64);
    let mut kaa = 0.0;
    let mut kbb = 0.0;
    let mut kab = 0.0;
    match config.estimator {
        MmdEstimator::Biased => {
            for i in 0..a.len() {
                kaa += kernel_from_sqdist(0.0, h); // diagonal
                for j in (i + 1)..a.len() {
                    kaa += 2.0 * kernel_from_sqdist(linalg::squared_distance(&a[i], &a[j]), h);
                }
            }
            for i in 0..b.len() {
                kbb += kernel_from_sqdist(0.0, h);
                for j in (i + 1)..b.len() {
                    kbb += 2.0 * kernel_from_sqdist(linalg::squared_distance(&b[i], &b[j]), h);
                }
            }
            kaa /= m * m;
            kbb /= n * n;
        }
        MmdEstimator::Unbiased => {
            for i in 0..a.len() {
                for j in (i + 1)..a.len() {
                    kaa += 2.0 * kernel_from_sqdist(linalg::squared_distance(&a[i], &a[j]), h);
                }
            }
            for i in 0..b.len() {
                for j in (i + 1)..b.len() {
                    kbb += 2.0 * kernel_from_sqdist(linalg::squared_distance(&b[i], &b[j]), h);
                }
            }
            kaa /= m * (m - 1.0);
            kbb /= n * (n - 1.0);
        }
    }
    // canonical iteration order makes the cross sum, and so the whole
    // statistic, bit-exactly symmetric in its arguments
    let (outer, inner) = if lex_le(a, b) { (a, b) } else { (b, a) };
    for oi in outer {
        for ij in inner {
            kab += kernel_from_sqdist(linalg::squared_distance(oi, ij), h);
        }
    }
    kab /= m * n;
    Ok(kaa + kbb - 2.0 * kab)
}

/// Squared MMD plus its gradient with respect to every row of `a`.
pub fn mmd_loss(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    config: &KernelConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let value = mmd_value(a, b, config)?;
    let d = a[0].len();
    let h = &config.bandwidths;
    let (m, n) = (a.len() as f64, b.len() as f64);
    let self_weight = match config.estimator {
        MmdEstimator::Biased => 2.0 / (m * m),
        MmdEstimator::Unbiased => 2.0 / (m * (m - 1.0)),
    };
    let mut grads = vec![vec![0.0; d]; a.len()];
    for i in 0..a.len() {
        for j in 0..a.len() {
            if i == j {
                continue; // k(x,x) has zero gradient anyway
            }
            let d2 = linalg::squared_distance(&a[i], &a[j]);
            let coeff = self_weight * kernel_grad_coeff(d2, h);
            for t in 0..d {
                grads[i][t] += coeff * (a[i][t] - a[j][t]);
            }
        }
        for bj in b {
            let d2 = linalg::squared_distance(&a[i], bj);
            let coeff = -(2.0 / (m * n)) * kernel_grad_coeff(d2, h);
            for t in 0..d {
                grads[i][t] += coeff * (a[i][t] - bj[t]);
            }
        }
    }
    Ok((value, grads))
}

/// Point-wise alignment: mean squared error plus (1 - cosine similarity).
pub fn pointwise_loss(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dimension(a.len(), b.len(), "pointwise loss"));
    }
    let d = a.len() as f64;
    let mse = linalg::squared_distance(a, b) / d;
    let cos = linalg::cosine(a, b)?;
    Ok(mse + (1.0 - cos))
}

/// Point-wise loss and its gradient with respect to `a`.
pub fn pointwise_loss_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    let loss = pointwise_loss(a, b)?;
    let d = a.len() as f64;
    let na = linalg::norm(a);
    let nb = linalg::norm(b);
    let dot = linalg::dot(a, b);
    let mut grad = vec![0.0; a.len()];
    for t in 0..a.len() {
        let mse_g = 2.0 * (a[t] - b[t]) / d;
        // d(1 - cos)/da = -(b/(|a||b|) - dot * a / (|a|^3 |b|))
        let cos_g = -(b[t] / (na * nb) - dot * a[t] / (na * na * na * nb));
        grad[t] = mse_g + cos_g;
    }
    Ok((loss, grad))
}

/// Which alignment objective is in force: alpha on the point-wise term,
/// beta on the MMD term.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossSpec {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossSpec {
    /// MMD-only, the configuration the ablation selects.
    fn default() -> Self {
        LossSpec { alpha: 0.0, beta: 1.0 }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::validation("loss weights must be non-negative"));
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::validation("loss weights cannot both be zero"));
        }
        Ok(())
    }
}

/// alpha * mean point-wise over index-paired batches + beta * MMD.
pub fn combined_loss(
    batch_a: &[Vec<f64>],
    batch_b: &[Vec<f64>],
    spec: &LossSpec,
    config: &KernelConfig,
) -> Result<f64> {
    let (loss, _) = combined_loss_with_grad(batch_a, batch_b, spec, config)?;
    Ok(loss)
}

/// Combined loss plus gradient with respect to every row of `batch_a`.
pub fn combined_loss_with_grad(
    batch_a: &[Vec<f64>],
    batch_b: &[Vec<f64>],
    spec: &LossSpec,
    config: &KernelConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    spec.validate()?;
    if batch_a.len() != batch_b.len() {
        return Err(Error::dimension(batch_a.len(), batch_b.len(), "paired batches"));
    }
    if batch_a.is_empty() {
        return Err(Error::validation("combined loss needs a non-empty batch"));
    }
    let d = batch_a[0].len();
    let n = batch_a.len() as f64;
    let mut loss = 0.0;
    let mut grads = vec![vec![0.0; d]; batch_a.len()];
    if spec.alpha > 0.0 {
        for (i, (a, b)) in batch_a.iter().zip(batch_b).enumerate() {
            let (pl, pg) = pointwise_loss_with_grad(a, b)?;
            loss += spec.alpha * pl / n;
            for t in 0..d {
                grads[i][t] += spec.alpha * pg[t] / n;
            }
        }
    }
    if spec.beta > 0.0 {
        let (mv, mg) = mmd_loss(batch_a, batch_b, config)?;
        loss += spec.beta * mv;
        for i in 0..batch_a.len() {
            for t in 0..d {
                grads[i][t] += spec.beta * mg[i][t];
            }
        }
    }
    Ok((loss, grads))
}
