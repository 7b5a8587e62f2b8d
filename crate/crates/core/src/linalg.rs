//! Small dense linear-algebra helpers shared across modules.
//!
//! Everything here is plain `f64` on `ndarray` containers. The symmetric
//! eigensolver is a cyclic Jacobi sweep, which is ample for the matrix sizes
//! this crate touches (d <= 64) and avoids an external LAPACK link.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cosine similarity; errors on a zero-norm input.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::numerical("cosine of zero-norm vector"));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Numerically shifted softmax. Rows sum to 1 exactly up to fp rounding.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// In-place standardization to zero mean / unit variance across features.
/// Uses population variance; `eps` guards constant inputs.
pub fn layer_norm(x: &mut [f64], eps: f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    for v in x.iter_mut() {
        *v = (*v - mean) / denom;
    }
}

pub fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|v| v.is_finite())
}

/// Seeded Gaussian matrix with entries N(0, scale^2).
pub fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * scale
    })
}

pub fn gaussian_vector<R: Rng>(rng: &mut R, len: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * scale
    })
}

/// Column mean of a sample matrix (rows = samples).
pub fn row_mean(x: &ArrayView2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).expect("non-empty sample matrix")
}

/// Sample covariance with 1/(n-1) normalization (rows = samples).
pub fn covariance(x: &ArrayView2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let d = x.ncols();
    let mean = row_mean(x);
    let mut cov = Array2::zeros((d, d));
    if n < 2 {
        return cov;
    }
    for row in x.rows() {
        let c: Array1<f64> = &row - &mean;
        for i in 0..d {
            for j in i..d {
                cov[[i, j]] += c[i] * c[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[[i, j]] /= denom;
            cov[[j, i]] = cov[[i, j]];
        }
    }
    cov
}

/// Eigendecomposition of a symmetric matrix via cyclic Jacobi rotations.
///
/// Returns (eigenvalues ascending, eigenvectors as columns in the same
/// order). Errors if the input is not square/symmetric or the sweep fails
/// to converge.
pub fn symmetric_eigen(a: &ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::dimension(n, a.ncols(), "symmetric eigensolver"));
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[[i, j]] - a[[j, i]]).abs() > 1e-8 * scale {
                return Err(Error::numerical(format!(
                    "matrix not symmetric at ({i},{j}): {} vs {}",
                    a[[i, j]],
                    a[[j, i]]
                )));
            }
        }
    }
    let mut m = a.to_owned();
    // symmetrize away fp noise
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[[i, j]] + m[[j, i]]);
            m[[i, j]] = avg;
            m[[j, i]] = avg;
        }
    }
    let mut vectors: Array2<f64> = Array2::eye(n);
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off.sqrt() <= 1e-14 * scale * n as f64 {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&x, &y| {
                m[[x, x]].partial_cmp(&m[[y, y]]).expect("finite eigenvalues")
            });
            let eig: Vec<f64> = order.iter().map(|&i| m[[i, i]]).collect();
            let mut sorted_vecs = Array2::zeros((n, n));
            for (new_col, &old_col) in order.iter().enumerate() {
                for r in 0..n {
                    sorted_vecs[[r, new_col]] = vectors[[r, old_col]];
                }
            }
            return Ok((eig, sorted_vecs));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = vectors[[k, p]];
                    let vkq = vectors[[k, q]];
                    vectors[[k, p]] = c * vkp - s * vkq;
                    vectors[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(Error::numerical("Jacobi eigensolver did not converge"))
}

/// Eigenvalues only, ascending.
pub fn symmetric_eigenvalues(a: &ArrayView2<f64>) -> Result<Vec<f64>> {
    Ok(symmetric_eigen(a)?.0)
}

/// Mean over sample rows of the per-dimension variance (population form).
pub fn batch_variance(rows: &[Vec<f64>]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut total = 0.0;
    for j in 0..d {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        total += rows.iter().map(|r| (r[j] - mean) * (r[j] - mean)).sum::<f64>() / n;
    }
    total / d as f64
}

/// Mean pairwise Euclidean distance over sample rows; 0 for < 2 rows.
pub fn mean_pairwise_distance(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += squared_distance(&rows[i], &rows[j]).sqrt();
            count += 1;
        }
    }
    sum / count as f64
}

/// Median of pairwise Euclidean distances over the union of two sample sets.
/// Falls back to 1.0 when every distance is zero.
pub fn median_pairwise_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let all: Vec<&Vec<f64>> = a.iter().chain(b.iter()).collect();
    let n = all.len();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(squared_distance(all[i], all[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|x, y| x.partial_cmp(y).expect("finite distances"));
    let mid = dists.len() / 2;
    let med = if dists.len() % 2 == 0 {
        0.5 * (dists[mid - 1] + dists[mid])
    } else {
        dists[mid]
    };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

pub fn matvec(m: &ArrayView2<f64>, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.nrows()];
    for (i, row) in m.rows().into_iter().enumerate() {
        out[i] = dot(row.as_slice().expect("contiguous row"), v);
    }
    out
}

pub fn view1(v: &[f64]) -> ArrayView1<'_, f64> {
    ArrayView1::from(v)
}
