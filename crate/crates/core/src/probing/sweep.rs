//! The probing sweep: every (layer spec x pooling strategy) cell evaluated
//! on both probe tasks over a balanced per-user subset.

use super::probe::{train_binary_probe, train_multiuser_probe, EmbeddingPair, ProbeConfig};
use super::{aggregate_layers, LayerSpec, PoolingStrategy};
use crate::encoder::LayerActivations;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepTask {
    Binary,
    MultiUser,
}

impl SweepTask {
    pub fn name(&self) -> &'static str {
        match self {
            SweepTask::Binary => "binary",
            SweepTask::MultiUser => "multi_user",
        }
    }
}

/// One probing sample: full per-layer activations plus its labels.
/// `pair_id` groups the liked/disliked example sharing a prompt.
#[derive(Debug, Clone)]
pub struct SweepSample {
    pub acts: LayerActivations,
    pub label: u8,
    pub user_id: String,
    pub pair_id: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer_spec: String,
    pub strategy: String,
    pub task: String,
    pub accuracy: f64,
    pub best: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ProbeSweepResult {
    pub rows: Vec<SweepRow>,
}

impl ProbeSweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer_spec,strategy,task,accuracy,best\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{}\n",
                r.layer_spec, r.strategy, r.task, r.accuracy, r.best
            ));
        }
        out
    }

    /// Plain-text summary table.
    pub fn render(&self) -> String {
        let mut out = String::from("probe sweep (accuracy, * = best per task)\n");
        out.push_str(&format!(
            "{:<14} {:<15} {:<11} {:>9}\n",
            "layer_spec", "strategy", "task", "accuracy"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<14} {:<15} {:<11} {:>9.4}{}\n",
                r.layer_spec,
                r.strategy,
                r.task,
                r.accuracy,
                if r.best { " *" } else { "" }
            ));
        }
        out
    }

    pub fn accuracy(&self, layer_spec: &str, strategy: &str, task: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.layer_spec == layer_spec && r.strategy == strategy && r.task == task)
            .map(|r| r.accuracy)
    }
}

fn check_balance(samples: &[SweepSample]) -> Result<()> {
    let mut counts: BTreeMap<&String, (usize, usize)> = BTreeMap::new();
    for s in samples {
        let e = counts.entry(&s.user_id).or_default();
        if s.label == 1 {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
    }
    for (uid, (liked, disliked)) in counts {
        if liked != disliked {
            return Err(Error::validation(format!(
                "unbalanced subset: user {uid} has {liked} liked vs {disliked} disliked"
            )));
        }
    }
    Ok(())
}

fn build_pairs(samples: &[SweepSample], embeddings: &[Vec<f64>]) -> Result<Vec<EmbeddingPair>> {
    let mut by_pair: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_pair.entry(s.pair_id).or_default().push(i);
    }
    let mut pairs = Vec::with_capacity(by_pair.len());
    for (pid, members) in by_pair {
        if members.len() != 2 {
            return Err(Error::validation(format!(
                "pair {pid} has {} members; expected a liked/disliked pair",
                members.len()
            )));
        }
        let (a, b) = (members[0], members[1]);
        let (pos, neg) = match (samples[a].label, samples[b].label) {
            (1, 0) => (a, b),
            (0, 1) => (b, a),
            _ => {
                return Err(Error::validation(format!(
                    "pair {pid} does not hold one liked and one disliked sample"
                )))
            }
        };
        pairs.push(EmbeddingPair {
            positive: embeddings[pos].clone(),
            negative: embeddings[neg].clone(),
        });
    }
    Ok(pairs)
}

/// Evaluate the full cross-product of layer specs and pooling strategies on
/// both tasks. Deterministic under the probe config seed; errors on an
/// unbalanced subset.
pub fn probe_sweep(
    samples: &[SweepSample],
    layer_specs: &[LayerSpec],
    strategies: &[PoolingStrategy],
    config: &ProbeConfig,
) -> Result<ProbeSweepResult> {
    if samples.is_empty() {
        return Err(Error::validation("probe sweep needs samples"));
    }
    check_balance(samples)?;
    let user_ids: Vec<String> = samples.iter().map(|s| s.user_id.clone()).collect();

    let mut rows = Vec::new();
    for spec in layer_specs {
        for &strategy in strategies {
            let embeddings: Vec<Vec<f64>> = samples
                .iter()
                .map(|s| aggregate_layers(&s.acts, *spec, strategy))
                .collect::<Result<_>>()?;

            let pairs = build_pairs(samples, &embeddings)?;
            let binary = train_binary_probe(&pairs, config)?;
            rows.push(SweepRow {
                layer_spec: spec.label(),
                strategy: strategy.name().to_string(),
                task: SweepTask::Binary.name().to_string(),
                accuracy: binary.holdout_accuracy,
                best: false,
            });

            let multi = train_multiuser_probe(&embeddings, &user_ids, config)?;
            rows.push(SweepRow {
                layer_spec: spec.label(),
                strategy: strategy.name().to_string(),
                task: SweepTask::MultiUser.name().to_string(),
                accuracy: multi.holdout_accuracy,
                best: false,
            });
        }
    }
    for task in [SweepTask::Binary, SweepTask::MultiUser] {
        let best = rows
            .iter()
            .filter(|r| r.task == task.name())
            .map(|r| r.accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        for r in rows.iter_mut() {
            if r.task == task.name() && r.accuracy == best {
                r.best = true;
            }
        }
    }
    Ok(ProbeSweepResult { rows })
}
