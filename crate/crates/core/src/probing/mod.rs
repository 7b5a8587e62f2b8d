//! Layer-wise probing: pooling strategies, layer-range aggregation, linear
//! probes for preference and identity signals, the accuracy sweep, and
//! extraction of the semantic (e_sem) and core-identity (e_core) embeddings.

mod probe;
mod sweep;

pub use probe::{
    binary_probe_loss_and_grads, multiuser_probe_loss_and_grads, train_binary_probe,
    train_multiuser_probe, BinaryProbe, BinaryProbeResult, EmbeddingPair, MultiUserProbe,
    MultiUserProbeResult, ProbeConfig,
};
pub use sweep::{probe_sweep, ProbeSweepResult, SweepRow, SweepSample, SweepTask};

use crate::encoder::LayerActivations;
use crate::error::{Error, Result};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

/// The five token-reduction strategies compared by the probing study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolingStrategy {
    LastToken,
    Max,
    Mean,
    MaxPlusMean,
    MaxPlus2Mean,
}

impl PoolingStrategy {
    pub const ALL: [PoolingStrategy; 5] = [
        PoolingStrategy::LastToken,
        PoolingStrategy::Max,
        PoolingStrategy::Mean,
        PoolingStrategy::MaxPlusMean,
        PoolingStrategy::MaxPlus2Mean,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PoolingStrategy::LastToken => "last_token",
            PoolingStrategy::Max => "max",
            PoolingStrategy::Mean => "mean",
            PoolingStrategy::MaxPlusMean => "max_plus_mean",
            PoolingStrategy::MaxPlus2Mean => "max_plus_2mean",
        }
    }
}

/// Reduce one layer's (T, d) token activations to a single d-vector.
pub fn pool(
    activations_at_layer: &ArrayView2<f64>,
    mask: &[bool],
    strategy: PoolingStrategy,
) -> Result<Vec<f64>> {
    let t_total = activations_at_layer.nrows();
    let d = activations_at_layer.ncols();
    if mask.len() != t_total {
        return Err(Error::dimension(t_total, mask.len(), "token mask"));
    }
    let valid: Vec<usize> = (0..t_total).filter(|&t| mask[t]).collect();
    if valid.is_empty() {
        return Err(Error::validation("pooling needs at least one valid token"));
    }
    let max_vec = || -> Vec<f64> {
        let mut out = vec![f64::NEG_INFINITY; d];
        for &t in &valid {
            for j in 0..d {
                out[j] = out[j].max(activations_at_layer[[t, j]]);
            }
        }
        out
    };
    let mean_vec = || -> Vec<f64> {
        let mut out = vec![0.0; d];
        for &t in &valid {
            for j in 0..d {
                out[j] += activations_at_layer[[t, j]];
            }
        }
        let inv = 1.0 / valid.len() as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    };
    Ok(match strategy {
        PoolingStrategy::LastToken => {
            let last = *valid.last().expect("non-empty");
            activations_at_layer.row(last).to_vec()
        }
        PoolingStrategy::Max => max_vec(),
        PoolingStrategy::Mean => mean_vec(),
        PoolingStrategy::MaxPlusMean => {
            let (mx, mn) = (max_vec(), mean_vec());
            mx.iter().zip(&mn).map(|(a, b)| a + b).collect()
        }
        PoolingStrategy::MaxPlus2Mean => {
            let (mx, mn) = (max_vec(), mean_vec());
            mx.iter().zip(&mn).map(|(a, b)| a + 2.0 * b).collect()
        }
    })
}

/// Which layers feed an embedding. Indices are 1-based over the transformer
/// stack (layer 0 is the input embedding and is never selected).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    TopLayer,
    TopK(usize),
    /// Inclusive on both ends, 1-indexed.
    Range(usize, usize),
    All,
}

impl LayerSpec {
    /// Resolve to concrete 1-based layer indices for a stack of `n_layers`.
    pub fn resolve(&self, n_layers: usize) -> Result<Vec<usize>> {
        let check = |lo: usize, hi: usize| -> Result<()> {
            if lo < 1 || hi > n_layers || lo > hi {
                return Err(Error::validation(format!(
                    "layer range [{lo}, {hi}] out of bounds for {n_layers} layers"
                )));
            }
            Ok(())
        };
        match *self {
            LayerSpec::TopLayer => Ok(vec![n_layers]),
            LayerSpec::TopK(k) => {
                if k < 1 || k > n_layers {
                    return Err(Error::validation(format!(
                        "top-k of {k} out of bounds for {n_layers} layers"
                    )));
                }
                Ok(((n_layers - k + 1)..=n_layers).collect())
            }
            LayerSpec::Range(lo, hi) => {
                check(lo, hi)?;
                Ok((lo..=hi).collect())
            }
            LayerSpec::All => Ok((1..=n_layers).collect()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            LayerSpec::TopLayer => "top_layer".to_string(),
            LayerSpec::TopK(k) => format!("top_{k}"),
            LayerSpec::Range(lo, hi) => format!("layers_{lo}-{hi}"),
            LayerSpec::All => "all_layers".to_string(),
        }
    }
}

/// Map a layer index of the reference 32-layer backbone onto a shallower
/// stack, proportionally, clamped to [1, n_layers].
pub fn proportional_layer(paper_layer: usize, paper_depth: usize, n_layers: usize) -> usize {
    let scaled = (paper_layer as f64 * n_layers as f64 / paper_depth as f64).round() as usize;
    scaled.clamp(1, n_layers)
}

/// Reference depth of the backbone the layer conventions come from.
pub const PAPER_DEPTH: usize = 32;
/// e_sem sums the top four layers of the reference stack.
pub const PAPER_SEM_TOP_K: usize = 4;
/// e_core sums layers 8-20 (inclusive, 1-indexed) of the reference stack.
pub const PAPER_CORE_RANGE: (usize, usize) = (8, 20);

/// The top-k spec for e_sem, proportional to top-4-of-32.
pub fn sem_layer_spec(n_layers: usize) -> LayerSpec {
    let k = proportional_layer(PAPER_SEM_TOP_K, PAPER_DEPTH, n_layers);
    LayerSpec::TopK(k.max(1))
}

/// The mid-range spec for e_core, proportional to layers 8-20 of 32.
pub fn core_layer_spec(n_layers: usize) -> LayerSpec {
    let lo = proportional_layer(PAPER_CORE_RANGE.0, PAPER_DEPTH, n_layers);
    let hi = proportional_layer(PAPER_CORE_RANGE.1, PAPER_DEPTH, n_layers);
    LayerSpec::Range(lo.min(hi), hi.max(lo))
}

/// Pool each selected layer, then sum the pooled vectors.
pub fn aggregate_layers(
    acts: &LayerActivations,
    spec: LayerSpec,
    strategy: PoolingStrategy,
) -> Result<Vec<f64>> {
    let layers = spec.resolve(acts.n_layers())?;
    let d = acts.d_model();
    let mut out = vec![0.0; d];
    for l in layers {
        let pooled = pool(&acts.layer(l), &acts.token_mask, strategy)?;
        for (o, p) in out.iter_mut().zip(&pooled) {
            *o += p;
        }
    }
    Ok(out)
}

/// Semantic preference embedding: last-token pooling summed over the top
/// layer block (proportional analogue of top-4-of-32).
pub fn extract_e_sem(acts: &LayerActivations) -> Result<Vec<f64>> {
    aggregate_layers(acts, sem_layer_spec(acts.n_layers()), PoolingStrategy::LastToken)
}

/// Core identity embedding: last-token pooling summed over the mid-layer
/// range (proportional analogue of layers 8-20 of 32).
pub fn extract_e_core(acts: &LayerActivations) -> Result<Vec<f64>> {
    aggregate_layers(acts, core_layer_spec(acts.n_layers()), PoolingStrategy::LastToken)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    fn acts_from_layers(layers: Vec<ndarray::Array2<f64>>) -> LayerActivations {
        let t = layers[0].nrows();
        let d = layers[0].ncols();
        let mut a = Array3::zeros((layers.len(), t, d));
        for (l, m) in layers.iter().enumerate() {
            a.index_axis_mut(ndarray::Axis(0), l).assign(m);
        }
        LayerActivations {
            activations: a,
            token_mask: vec![true; t],
        }
    }

    #[test]
    fn pooling_arithmetic_on_two_tokens() {
        let m = array![[1.0, 0.0], [0.0, 1.0]];
        let mask = vec![true, true];
        assert_eq!(pool(&m.view(), &mask, PoolingStrategy::Max).unwrap(), vec![1.0, 1.0]);
        assert_eq!(pool(&m.view(), &mask, PoolingStrategy::Mean).unwrap(), vec![0.5, 0.5]);
        assert_eq!(
            pool(&m.view(), &mask, PoolingStrategy::MaxPlusMean).unwrap(),
            vec![1.5, 1.5]
        );
        assert_eq!(
            pool(&m.view(), &mask, PoolingStrategy::MaxPlus2Mean).unwrap(),
            vec![2.0, 2.0]
        );
        assert_eq!(
            pool(&m.view(), &mask, PoolingStrategy::LastToken).unwrap(),
            vec![0.0, 1.0]
        );
    }

    #[test]
    fn single_token_collapses_strategies() {
        let m = array![[2.0, -1.0, 0.5]];
        let mask = vec![true];
        let token = vec![2.0, -1.0, 0.5];
        for s in [
            PoolingStrategy::LastToken,
            PoolingStrategy::Max,
            PoolingStrategy::Mean,
        ] {
            assert_eq!(pool(&m.view(), &mask, s).unwrap(), token);
        }
        assert_eq!(
            pool(&m.view(), &mask, PoolingStrategy::MaxPlusMean).unwrap(),
            vec![4.0, -2.0, 1.0]
        );
        assert_eq!(
            pool(&m.view(), &mask, PoolingStrategy::MaxPlus2Mean).unwrap(),
            vec![6.0, -3.0, 1.5]
        );
    }

    #[test]
    fn empty_mask_errors() {
        let m = array![[1.0], [2.0]];
        assert!(pool(&m.view(), &[false, false], PoolingStrategy::Mean).is_err());
    }

    #[test]
    fn pooling_algebra_holds_on_random_inputs() {
        use rand::Rng;
        let mut rng = crate::seeds::rng(3);
        for _ in 0..50 {
            let t = rng.gen_range(1..12);
            let d = rng.gen_range(1..6);
            let m = ndarray::Array2::from_shape_fn((t, d), |_| rng.gen_range(-2.0..2.0));
            let mask: Vec<bool> = (0..t).map(|i| i == 0 || rng.gen_bool(0.7)).collect();
            let mx = pool(&m.view(), &mask, PoolingStrategy::Max).unwrap();
            let mn = pool(&m.view(), &mask, PoolingStrategy::Mean).unwrap();
            let mpm = pool(&m.view(), &mask, PoolingStrategy::MaxPlusMean).unwrap();
            let mp2m = pool(&m.view(), &mask, PoolingStrategy::MaxPlus2Mean).unwrap();
            for j in 0..d {
                assert_eq!(mpm[j], mx[j] + mn[j]);
                assert_eq!(mp2m[j], mx[j] + 2.0 * mn[j]);
            }
        }
    }

    #[test]
    fn layer_spec_resolution() {
        assert_eq!(LayerSpec::TopLayer.resolve(8).unwrap(), vec![8]);
        assert_eq!(LayerSpec::TopK(1).resolve(8).unwrap(), vec![8]);
        assert_eq!(LayerSpec::TopK(2).resolve(8).unwrap(), vec![7, 8]);
        assert_eq!(LayerSpec::Range(2, 5).resolve(8).unwrap(), vec![2, 3, 4, 5]);
        assert_eq!(LayerSpec::All.resolve(3).unwrap(), vec![1, 2, 3]);
        assert!(LayerSpec::Range(0, 2).resolve(8).is_err());
        assert!(LayerSpec::Range(2, 9).resolve(8).is_err());
        assert!(LayerSpec::TopK(9).resolve(8).is_err());
    }

    #[test]
    fn top_k_2_sums_top_two_layers() {
        let l0 = array![[0.0, 0.0]];
        let l1 = array![[1.0, 2.0]];
        let l2 = array![[10.0, 20.0]];
        let acts = acts_from_layers(vec![l0, l1, l2]);
        let got = aggregate_layers(&acts, LayerSpec::TopK(2), PoolingStrategy::LastToken).unwrap();
        assert_eq!(got, vec![11.0, 22.0]);
        let top = aggregate_layers(&acts, LayerSpec::TopLayer, PoolingStrategy::LastToken).unwrap();
        let top1 = aggregate_layers(&acts, LayerSpec::TopK(1), PoolingStrategy::LastToken).unwrap();
        assert_eq!(top, top1);
    }

    #[test]
    fn zero_layer_contributes_nothing_under_all() {
        let l0 = array![[5.0, 5.0]];
        let l1 = array![[0.0, 0.0]];
        let l2 = array![[3.0, 4.0]];
        let acts = acts_from_layers(vec![l0, l1, l2]);
        let with_zero = aggregate_layers(&acts, LayerSpec::All, PoolingStrategy::Mean).unwrap();
        let only_top = aggregate_layers(&acts, LayerSpec::Range(2, 2), PoolingStrategy::Mean).unwrap();
        assert_eq!(with_zero, only_top);
    }

    #[test]
    fn proportional_mapping_for_eight_layers() {
        assert_eq!(sem_layer_spec(8), LayerSpec::TopK(1));
        assert_eq!(core_layer_spec(8), LayerSpec::Range(2, 5));
        // 32-layer configuration recovers the absolute reference indices
        assert_eq!(sem_layer_spec(32), LayerSpec::TopK(4));
        assert_eq!(core_layer_spec(32), LayerSpec::Range(8, 20));
    }

    #[test]
    fn sem_and_core_ranges_are_disjoint_under_defaults() {
        let n = 8;
        let sem = sem_layer_spec(n).resolve(n).unwrap();
        let core = core_layer_spec(n).resolve(n).unwrap();
        for l in &sem {
            assert!(!core.contains(l), "layer {l} in both e_sem and e_core");
        }
    }

    #[test]
    fn extraction_matches_aggregate_definition_and_linearity() {
        let mut rng = crate::seeds::rng(9);
        use rand::Rng;
        let layers: Vec<ndarray::Array2<f64>> = (0..9)
            .map(|_| ndarray::Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let acts = acts_from_layers(layers);
        let sem = extract_e_sem(&acts).unwrap();
        let expect =
            aggregate_layers(&acts, sem_layer_spec(8), PoolingStrategy::LastToken).unwrap();
        assert_eq!(sem, expect);
        assert_eq!(sem.len(), acts.d_model());

        let core = extract_e_core(&acts).unwrap();
        let expect =
            aggregate_layers(&acts, core_layer_spec(8), PoolingStrategy::LastToken).unwrap();
        assert_eq!(core, expect);

        let zero = acts_from_layers((0..9).map(|_| ndarray::Array2::zeros((4, 6))).collect());
        assert_eq!(extract_e_sem(&zero).unwrap(), vec![0.0; 6]);
        assert_eq!(extract_e_core(&zero).unwrap(), vec![0.0; 6]);
    }
}
