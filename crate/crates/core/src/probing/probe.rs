//! Linear probes over frozen embeddings: a binary preference probe and a
//! U-way user-identification probe, both trained with full-batch gradient
//! descent on the cross-entropy objective.

use crate::error::{Error, Result};
use crate::linalg;
use crate::seeds;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// A (preferred, non-preferred) embedding pair sharing a prompt. Pairs never
/// straddle the train/eval split.
#[derive(Debug, Clone)]
pub struct EmbeddingPair {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// Full-batch GD settings: fixed iteration cap, gradient-norm tolerance.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub max_iterations: usize,
    pub grad_tolerance: f64,
    pub l2_reg: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            max_iterations: 10_000,
            grad_tolerance: 1e-8,
            l2_reg: 0.0,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Feature standardization fitted on the training portion. Constant features
/// are zeroed rather than divided by ~0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(rows: &[&[f64]]) -> Self {
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for j in 0..d {
                mean[j] += r[j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for j in 0..d {
                let c = r[j] - mean[j];
                var[j] += c * c;
            }
        }
        let scale = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    1.0 / s
                } else {
                    0.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(x, (m, s))| (x - m) * s)
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn bce_from_logit(logit: f64, y: f64) -> f64 {
    let softplus = if logit > 0.0 {
        logit + (-logit).exp().ln_1p()
    } else {
        logit.exp().ln_1p()
    };
    softplus - y * logit
}

/// Binary logistic probe over a d-dimensional embedding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinaryProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
    standardizer: Standardizer,
}

impl BinaryProbe {
    pub fn decision(&self, embedding: &[f64]) -> f64 {
        let x = self.standardizer.apply(embedding);
        sigmoid(linalg::dot(&self.weights, &x) + self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct BinaryProbeResult {
    pub probe: BinaryProbe,
    pub holdout_accuracy: f64,
    pub train_loss: f64,
    pub iterations: usize,
}

/// Mean binary cross-entropy and its gradient for raw (already standardized
/// or otherwise fixed) features. Exposed for finite-difference audits.
pub fn binary_probe_loss_and_grads(
    weights: &[f64],
    bias: f64,
    xs: &[Vec<f64>],
    ys: &[f64],
    l2_reg: f64,
) -> (f64, Vec<f64>, f64) {
    let n = xs.len() as f64;
    let d = weights.len();
    let mut loss = 0.0;
    let mut gw = vec![0.0; d];
    let mut gb = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let logit = linalg::dot(weights, x) + bias;
        loss += bce_from_logit(logit, y);
        let delta = sigmoid(logit) - y;
        for j in 0..d {
            gw[j] += delta * x[j];
        }
        gb += delta;
    }
    loss /= n;
    gw.iter_mut().for_each(|g| *g /= n);
    gb /= n;
    if l2_reg > 0.0 {
        for j in 0..d {
            loss += 0.5 * l2_reg * weights[j] * weights[j];
            gw[j] += l2_reg * weights[j];
        }
    }
    (loss, gw, gb)
}

/// GD with a Lipschitz-bound learning rate until the gradient norm drops
/// below tolerance or the iteration cap is hit.
fn fit_logistic(
    xs: &[Vec<f64>],
    ys: &[f64],
    init_w: Vec<f64>,
    init_b: f64,
    config: &ProbeConfig,
) -> (Vec<f64>, f64, f64, usize) {
    let n = xs.len() as f64;
    let sq_sum: f64 = xs.iter().map(|x| linalg::dot(x, x)).sum();
    let lipschitz = sq_sum / (4.0 * n) + config.l2_reg + 1e-12;
    let lr = 1.0 / lipschitz;
    let mut w = init_w;
    let mut b = init_b;
    let mut loss = 0.0;
    let mut iters = 0;
    for it in 0..config.max_iterations {
        let (l, gw, gb) = binary_probe_loss_and_grads(&w, b, xs, ys, config.l2_reg);
        loss = l;
        iters = it + 1;
        let gnorm = (linalg::dot(&gw, &gw) + gb * gb).sqrt();
        if gnorm < config.grad_tolerance {
            break;
        }
        for j in 0..w.len() {
            w[j] -= lr * gw[j];
        }
        b -= lr * gb;
    }
    (w, b, loss, iters)
}

/// Eq.-1 style probe: logistic regression over embeddings built from
/// liked/disliked pairs, with held-out accuracy from an 80/20 pair split.
pub fn train_binary_probe(
    pairs: &[EmbeddingPair],
    config: &ProbeConfig,
) -> Result<BinaryProbeResult> {
    if pairs.len() < 2 {
        return Err(Error::validation("binary probe needs at least 2 pairs"));
    }
    let d = pairs[0].positive.len();
    for p in pairs {
        if p.positive.len() != d || p.negative.len() != d {
            return Err(Error::dimension(d, p.positive.len().min(p.negative.len()), "pair embedding"));
        }
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = seeds::child_rng(config.seed, "binary_probe_split", 0);
    order.shuffle(&mut rng);
    let n_holdout = ((pairs.len() as f64 * config.holdout_fraction).round() as usize)
        .clamp(1, pairs.len() - 1);
    let (eval_idx, train_idx) = order.split_at(n_holdout);

    let train_rows: Vec<&[f64]> = train_idx
        .iter()
        .flat_map(|&i| [pairs[i].positive.as_slice(), pairs[i].negative.as_slice()])
        .collect();
    let standardizer = Standardizer::fit(&train_rows);
    let mut xs = Vec::with_capacity(train_rows.len());
    let mut ys = Vec::with_capacity(train_rows.len());
    for &i in train_idx {
        xs.push(standardizer.apply(&pairs[i].positive));
        ys.push(1.0);
        xs.push(standardizer.apply(&pairs[i].negative));
        ys.push(0.0);
    }
    let (w, b, loss, iters) = fit_logistic(&xs, &ys, vec![0.0; d], 0.0, config);
    let probe = BinaryProbe {
        weights: w,
        bias: b,
        standardizer,
    };
    let mut correct = 0usize;
    let mut total = 0usize;
    for &i in eval_idx {
        if probe.decision(&pairs[i].positive) > 0.5 {
            correct += 1;
        }
        if probe.decision(&pairs[i].negative) <= 0.5 {
            correct += 1;
        }
        total += 2;
    }
    Ok(BinaryProbeResult {
        probe,
        holdout_accuracy: correct as f64 / total as f64,
        train_loss: loss,
        iterations: iters,
    })
}

/// U-way softmax probe for user identification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiUserProbe {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    pub users: Vec<String>,
    standardizer: Standardizer,
}

impl MultiUserProbe {
    /// Probability simplex over the known users.
    pub fn probabilities(&self, embedding: &[f64]) -> Vec<f64> {
        let x = self.standardizer.apply(embedding);
        let logits: Vec<f64> = (0..self.users.len())
            .map(|u| {
                linalg::dot(self.weights.row(u).as_slice().expect("contiguous"), &x)
                    + self.biases[u]
            })
            .collect();
        linalg::softmax(&logits)
    }

    pub fn predict(&self, embedding: &[f64]) -> usize {
        let p = self.probabilities(embedding);
        p.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
            .map(|(i, _)| i)
            .expect("non-empty simplex")
    }
}

#[derive(Debug, Clone)]
pub struct MultiUserProbeResult {
    pub probe: MultiUserProbe,
    pub holdout_accuracy: f64,
    pub random_baseline: f64,
    pub train_loss: f64,
}

/// Mean softmax cross-entropy and gradients for fixed features; `labels`
/// are class indices. Exposed for finite-difference audits.
pub fn multiuser_probe_loss_and_grads(
    weights: &Array2<f64>,
    biases: &Array1<f64>,
    xs: &[Vec<f64>],
    labels: &[usize],
    l2_reg: f64,
) -> (f64, Array2<f64>, Array1<f64>) {
    let (u, d) = (weights.nrows(), weights.ncols());
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut gw = Array2::zeros((u, d));
    let mut gb = Array1::zeros(u);
    for (x, &y) in xs.iter().zip(labels) {
        let logits: Vec<f64> = (0..u)
            .map(|c| linalg::dot(weights.row(c).as_slice().expect("contiguous"), x) + biases[c])
            .collect();
        let probs = linalg::softmax(&logits);
        loss -= probs[y].max(1e-300).ln();
        for c in 0..u {
            let delta = probs[c] - f64::from(c == y);
            gb[c] += delta;
            for j in 0..d {
                gw[[c, j]] += delta * x[j];
            }
        }
    }
    loss /= n;
    gw /= n;
    gb /= n;
    if l2_reg > 0.0 {
        for c in 0..u {
            for j in 0..d {
                loss += 0.5 * l2_reg * weights[[c, j]] * weights[[c, j]];
                gw[[c, j]] += l2_reg * weights[[c, j]];
            }
        }
    }
    (loss, gw, gb)
}

/// Eq.-2 style probe: U-way softmax classifier with a stratified 80/20
/// holdout per user; reports accuracy next to the 1/U random baseline.
pub fn train_multiuser_probe(
    embeddings: &[Vec<f64>],
    user_ids: &[String],
    config: &ProbeConfig,
) -> Result<MultiUserProbeResult> {
    if embeddings.len() != user_ids.len() {
        return Err(Error::dimension(embeddings.len(), user_ids.len(), "user labels"));
    }
    let mut by_user: BTreeMap<&String, Vec<usize>> = BTreeMap::new();
    for (i, uid) in user_ids.iter().enumerate() {
        by_user.entry(uid).or_default().push(i);
    }
    if by_user.len() < 2 {
        return Err(Error::validation("multi-user probe needs >= 2 users"));
    }
    for (uid, idx) in &by_user {
        if idx.len() < 2 {
            return Err(Error::validation(format!(
                "user {uid} has {} sample(s); need >= 2 for a stratified split",
                idx.len()
            )));
        }
    }
    let users: Vec<String> = by_user.keys().map(|s| (*s).clone()).collect();
    let class_of: BTreeMap<String, usize> = users
        .iter()
        .enumerate()
        .map(|(c, u)| (u.clone(), c))
        .collect();

    let mut rng = seeds::child_rng(config.seed, "multiuser_probe_split", 0);
    let mut train_idx = Vec::new();
    let mut eval_idx = Vec::new();
    for idx in by_user.values() {
        let mut shuffled = idx.clone();
        shuffled.shuffle(&mut rng);
        let n_holdout = ((idx.len() as f64 * config.holdout_fraction).round() as usize)
            .clamp(1, idx.len() - 1);
        eval_idx.extend_from_slice(&shuffled[..n_holdout]);
        train_idx.extend_from_slice(&shuffled[n_holdout..]);
    }
    train_idx.sort_unstable();
    eval_idx.sort_unstable();

    let train_rows: Vec<&[f64]> = train_idx.iter().map(|&i| embeddings[i].as_slice()).collect();
    let standardizer = Standardizer::fit(&train_rows);
    let xs: Vec<Vec<f64>> = train_idx
        .iter()
        .map(|&i| standardizer.apply(&embeddings[i]))
        .collect();
    let labels: Vec<usize> = train_idx.iter().map(|&i| class_of[&user_ids[i]]).collect();

    let (u_count, d) = (users.len(), embeddings[0].len());
    let n = xs.len() as f64;
    let sq_sum: f64 = xs.iter().map(|x| linalg::dot(x, x)).sum();
    let lipschitz = sq_sum / (2.0 * n) + config.l2_reg + 1e-12;
    let lr = 1.0 / lipschitz;

    let mut weights: Array2<f64> = Array2::zeros((u_count, d));
    let mut biases: Array1<f64> = Array1::zeros(u_count);
    let mut train_loss = 0.0;
    for _ in 0..config.max_iterations {
        let (loss, gw, gb) =
            multiuser_probe_loss_and_grads(&weights, &biases, &xs, &labels, config.l2_reg);
        train_loss = loss;
        let gnorm = (gw.iter().map(|g| g * g).sum::<f64>()
            + gb.iter().map(|g| g * g).sum::<f64>())
        .sqrt();
        if gnorm < config.grad_tolerance {
            break;
        }
        weights.zip_mut_with(&gw, |p, g| *p -= lr * g);
        biases.zip_mut_with(&gb, |p, g| *p -= lr * g);
    }
    let probe = MultiUserProbe {
        weights,
        biases,
        users,
        standardizer,
    };
    let mut correct = 0usize;
    for &i in &eval_idx {
        if probe.predict(&embeddings[i]) == class_of[&user_ids[i]] {
            correct += 1;
        }
    }
    Ok(MultiUserProbeResult {
        random_baseline: 1.0 / u_count as f64,
        holdout_accuracy: correct as f64 / eval_idx.len() as f64,
        probe,
        train_loss,
    })
}
