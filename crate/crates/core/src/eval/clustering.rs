//! K-means with k-means++ seeding and the external clustering metrics
//! (ARI, NMI, AMI, homogeneity, completeness, V-measure) against
//! ground-truth labels.

use super::FeatureSet;
use crate::error::{Error, Result};
use crate::linalg::squared_distance;
use crate::seeds;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub ari: f64,
    pub nmi: f64,
    pub ami: f64,
    pub homogeneity: f64,
    pub completeness: f64,
    pub v_measure: f64,
}

impl ClusteringReport {
    /// Count of the six metrics on which `self` is strictly greater.
    pub fn dominates(&self, other: &ClusteringReport) -> usize {
        [
            (self.ari, other.ari),
            (self.nmi, other.nmi),
            (self.ami, other.ami),
            (self.homogeneity, other.homogeneity),
            (self.completeness, other.completeness),
            (self.v_measure, other.v_measure),
        ]
        .iter()
        .filter(|(a, b)| a > b)
        .count()
    }
}

const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITERS: usize = 300;
const KMEANS_TOL: f64 = 1e-6;

fn kmeans_once(data: &[Vec<f64>], k: usize, seed: u64) -> (Vec<usize>, f64) {
    let n = data.len();
    let d = data[0].len();
    let mut rng = seeds::child_rng(seed, "kmeanspp", 0);

    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(data[rng.gen_range(0..n)].clone());
    let mut dist2: Vec<f64> = data
        .iter()
        .map(|x| squared_distance(x, &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = dist2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut draw = rng.gen_range(0.0..total);
            let mut picked = n - 1;
            for (i, &w) in dist2.iter().enumerate() {
                if draw < w {
                    picked = i;
                    break;
                }
                draw -= w;
            }
            picked
        };
        centers.push(data[next].clone());
        for (i, x) in data.iter().enumerate() {
            dist2[i] = dist2[i].min(squared_distance(x, centers.last().expect("pushed")));
        }
    }

    let mut assign = vec![0usize; n];
    let mut inertia = f64::INFINITY;
    for _ in 0..KMEANS_MAX_ITERS {
        let mut new_inertia = 0.0;
        for (i, x) in data.iter().enumerate() {
            let (best, best_d) = centers
                .iter()
                .enumerate()
                .map(|(c, ctr)| (c, squared_distance(x, ctr)))
                .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite"))
                .expect("k >= 1");
            assign[i] = best;
            new_inertia += best_d;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, x) in data.iter().enumerate() {
            counts[assign[i]] += 1;
            for j in 0..d {
                sums[assign[i]][j] += x[j];
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed an empty cluster at the farthest point
                let far = (0..n)
                    .max_by(|&a, &b| {
                        squared_distance(&data[a], &centers[assign[a]])
                            .partial_cmp(&squared_distance(&data[b], &centers[assign[b]]))
                            .expect("finite")
                    })
                    .expect("non-empty data");
                centers[c] = data[far].clone();
            } else {
                for j in 0..d {
                    centers[c][j] = sums[c][j] / counts[c] as f64;
                }
            }
        }
        if (inertia - new_inertia).abs() <= KMEANS_TOL * inertia.max(1.0) {
            inertia = new_inertia;
            break;
        }
        inertia = new_inertia;
    }
    (assign, inertia)
}

/// K-means with k-means++ seeding, 10 restarts, best inertia kept.
pub fn kmeans(data: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 1 {
        return Err(Error::validation("k must be >= 1"));
    }
    if k > data.len() {
        return Err(Error::validation(format!(
            "k = {k} exceeds sample count {}",
            data.len()
        )));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for r in 0..KMEANS_RESTARTS {
        let (assign, inertia) = kmeans_once(data, k, seeds::child_seed(seed, "restart", r as u64));
        if best.as_ref().map_or(true, |(_, b)| inertia < *b) {
            best = Some((assign, inertia));
        }
    }
    Ok(best.expect("at least one restart").0)
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, n = 9
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn ln_factorial(n: usize) -> f64 {
    ln_gamma(n as f64 + 1.0)
}

struct Contingency {
    table: Vec<Vec<usize>>, // true x pred
    row_sums: Vec<usize>,
    col_sums: Vec<usize>,
    n: usize,
}

fn contingency(truth: &[usize], pred: &[usize]) -> Contingency {
    let r = truth.iter().max().map_or(0, |m| m + 1);
    let c = pred.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; c]; r];
    for (&t, &p) in truth.iter().zip(pred) {
        table[t][p] += 1;
    }
    let row_sums: Vec<usize> = table.iter().map(|row| row.iter().sum()).collect();
    let col_sums: Vec<usize> = (0..c).map(|j| table.iter().map(|row| row[j]).sum()).collect();
    Contingency {
        table,
        row_sums,
        col_sums,
        n: truth.len(),
    }
}

fn comb2(n: usize) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

fn adjusted_rand(ct: &Contingency) -> f64 {
    let sum_ij: f64 = ct.table.iter().flatten().map(|&v| comb2(v)).sum();
    let sum_a: f64 = ct.row_sums.iter().map(|&v| comb2(v)).sum();
    let sum_b: f64 = ct.col_sums.iter().map(|&v| comb2(v)).sum();
    let total = comb2(ct.n);
    if total == 0.0 {
        return 1.0;
    }
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    if (max_index - expected).abs() < 1e-15 {
        return 1.0;
    }
    (sum_ij - expected) / (max_index - expected)
}

fn entropy(sums: &[usize], n: usize) -> f64 {
    let n = n as f64;
    sums.iter()
        .filter(|&&s| s > 0)
        .map(|&s| {
            let p = s as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn mutual_information(ct: &Contingency) -> f64 {
    let n = ct.n as f64;
    let mut mi = 0.0;
    for (i, row) in ct.table.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v == 0 {
                continue;
            }
            let p = v as f64 / n;
            mi += p * ((n * v as f64) / (ct.row_sums[i] as f64 * ct.col_sums[j] as f64)).ln();
        }
    }
    mi.max(0.0)
}

/// Expected mutual information under the permutation model
/// (hypergeometric sum over feasible cell counts).
fn expected_mutual_information(ct: &Contingency) -> f64 {
    let n = ct.n;
    let nf = n as f64;
    let mut emi = 0.0;
    for &a in &ct.row_sums {
        for &b in &ct.col_sums {
            if a == 0 || b == 0 {
                continue;
            }
            // nij = 0 contributes nothing to the sum
            let lo = 1usize.max((a + b).saturating_sub(n));
            let hi = a.min(b);
            for nij in lo..=hi {
                let term = (nij as f64 / nf) * ((nf * nij as f64) / (a as f64 * b as f64)).ln();
                let ln_weight = ln_factorial(a) + ln_factorial(b) + ln_factorial(n - a)
                    + ln_factorial(n - b)
                    - ln_factorial(n)
                    - ln_factorial(nij)
                    - ln_factorial(a - nij)
                    - ln_factorial(b - nij)
                    - ln_factorial(n - a - b + nij);
                emi += term * ln_weight.exp();
            }
        }
    }
    emi
}

fn report_from_labels(truth: &[usize], pred: &[usize]) -> ClusteringReport {
    let ct = contingency(truth, pred);
    let h_true = entropy(&ct.row_sums, ct.n);
    let h_pred = entropy(&ct.col_sums, ct.n);
    let mi = mutual_information(&ct);

    let homogeneity = if h_true == 0.0 { 1.0 } else { mi / h_true };
    let completeness = if h_pred == 0.0 { 1.0 } else { mi / h_pred };
    let v_measure = if homogeneity + completeness == 0.0 {
        0.0
    } else {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    };
    let mean_h = 0.5 * (h_true + h_pred);
    let nmi = if mean_h == 0.0 { 1.0 } else { mi / mean_h };
    let emi = expected_mutual_information(&ct);
    let denom = mean_h - emi;
    let ami = if denom.abs() < 1e-12 {
        if (mi - emi).abs() < 1e-12 {
            1.0
        } else {
            0.0
        }
    } else {
        (mi - emi) / denom
    };
    ClusteringReport {
        ari: adjusted_rand(&ct),
        nmi,
        ami,
        homogeneity,
        completeness,
        v_measure,
    }
}

/// Run K-means over the embeddings (k defaults to the number of distinct
/// users) and score the assignment against the ground-truth user labels.
pub fn clustering_eval(
    embeddings: &FeatureSet,
    labels: &[String],
    k: usize,
    seed: u64,
) -> Result<ClusteringReport> {
    if labels.len() != embeddings.len() {
        return Err(Error::dimension(embeddings.len(), labels.len(), "cluster labels"));
    }
    if k < 2 {
        return Err(Error::validation("clustering needs k >= 2"));
    }
    let mut class_of = BTreeMap::new();
    for l in labels {
        let next = class_of.len();
        class_of.entry(l.clone()).or_insert(next);
    }
    let truth: Vec<usize> = labels.iter().map(|l| class_of[l]).collect();
    let data = embeddings.to_vecs();
    let pred = kmeans(&data, k, seed)?;
    Ok(report_from_labels(&truth, &pred))
}
