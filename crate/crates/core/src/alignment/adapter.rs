//! Six-layer MLP adapter mapping semantic embeddings into the text-feature
//! space. Blocks 1-5 are linear -> LayerNorm -> GELU -> dropout(0.1); the
//! final layer is a plain affine map. The reference instance is
//! 4096 -> 4096 -> 2048 x 4 -> 2048.

use crate::error::{Error, Result};
use crate::linalg;
use crate::seeds;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl AdapterConfig {
    pub fn desk(d_in: usize, d_hidden: usize, d_out: usize, seed: u64) -> Self {
        AdapterConfig {
            d_in,
            d_hidden,
            d_out,
            dropout: 0.1,
            seed,
        }
    }

    /// Layer dimensions: d_in -> d_in -> 4 x d_hidden -> d_out.
    fn dims(&self) -> [(usize, usize); 6] {
        [
            (self.d_in, self.d_in),
            (self.d_in, self.d_hidden),
            (self.d_hidden, self.d_hidden),
            (self.d_hidden, self.d_hidden),
            (self.d_hidden, self.d_hidden),
            (self.d_hidden, self.d_out),
        ]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Linear {
    w: Array2<f64>, // (out, in)
    b: Array1<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Norm {
    gamma: Array1<f64>,
    beta: Array1<f64>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Per-sample forward cache for one block.
#[derive(Debug, Clone)]
struct BlockCache {
    input: Vec<f64>,
    x_hat: Vec<f64>,
    sigma: f64,
    y: Vec<f64>,
    mask: Option<Vec<f64>>,
}

/// Forward cache for one sample through all blocks.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    last_input: Vec<f64>,
}

/// Parameter gradients in the same layout as the adapter.
#[derive(Debug, Clone)]
pub struct AdapterGrads {
    w: Vec<Array2<f64>>,
    b: Vec<Array1<f64>>,
    gamma: Vec<Array1<f64>>,
    beta: Vec<Array1<f64>>,
}

impl AdapterGrads {
    fn zeros(adapter: &MLPAdapter) -> Self {
        AdapterGrads {
            w: adapter.layers.iter().map(|l| Array2::zeros(l.w.dim())).collect(),
            b: adapter.layers.iter().map(|l| Array1::zeros(l.b.len())).collect(),
            gamma: adapter.norms.iter().map(|n| Array1::zeros(n.gamma.len())).collect(),
            beta: adapter.norms.iter().map(|n| Array1::zeros(n.beta.len())).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for m in &mut self.w {
            *m *= s;
        }
        for v in self.b.iter_mut().chain(&mut self.gamma).chain(&mut self.beta) {
            *v *= s;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MLPAdapter {
    pub config: AdapterConfig,
    layers: Vec<Linear>,
    norms: Vec<Norm>,
}

impl MLPAdapter {
    pub fn new(config: AdapterConfig) -> Self {
        let mut rng = seeds::child_rng(config.seed, "adapter_init", 0);
        let layers = config
            .dims()
            .iter()
            .map(|&(d_in, d_out)| Linear {
                w: linalg::gaussian_matrix(&mut rng, d_out, d_in, 1.0 / (d_in as f64).sqrt()),
                b: Array1::zeros(d_out),
            })
            .collect();
        let norms = config.dims()[..5]
            .iter()
            .map(|&(_, d_out)| Norm {
                gamma: Array1::ones(d_out),
                beta: Array1::zeros(d_out),
            })
            .collect();
        MLPAdapter {
            config,
            layers,
            norms,
        }
    }

    pub fn d_out(&self) -> usize {
        self.config.d_out
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum::<usize>()
            + self.norms.iter().map(|n| n.gamma.len() + n.beta.len()).sum::<usize>()
    }

    /// Dropout masks for one sample: entries are 0 or 1/(1-p).
    pub fn sample_masks(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let p = self.config.dropout;
        self.config.dims()[..5]
            .iter()
            .map(|&(_, d_out)| {
                (0..d_out)
                    .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) })
                    .collect()
            })
            .collect()
    }

    fn forward_inner(
        &self,
        x: &[f64],
        masks: Option<&[Vec<f64>]>,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        if x.len() != self.config.d_in {
            return Err(Error::dimension(self.config.d_in, x.len(), "adapter input"));
        }
        let mut h = x.to_vec();
        let mut blocks = Vec::with_capacity(5);
        for l in 0..5 {
            let lin = &self.layers[l];
            let norm = &self.norms[l];
            let z = {
                let mut z = linalg::matvec(&lin.w.view(), &h);
                for (zi, bi) in z.iter_mut().zip(lin.b.iter()) {
                    *zi += bi;
                }
                z
            };
            let d = z.len() as f64;
            let mean = z.iter().sum::<f64>() / d;
            let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let sigma = (var + LN_EPS).sqrt();
            let x_hat: Vec<f64> = z.iter().map(|v| (v - mean) / sigma).collect();
            let y: Vec<f64> = x_hat
                .iter()
                .zip(norm.gamma.iter().zip(norm.beta.iter()))
                .map(|(xh, (g, b))| g * xh + b)
                .collect();
            let mut g: Vec<f64> = y.iter().map(|&v| gelu(v)).collect();
            let mask = masks.map(|m| m[l].clone());
            if let Some(m) = &mask {
                for (gi, mi) in g.iter_mut().zip(m) {
                    *gi *= mi;
                }
            }
            blocks.push(BlockCache {
                input: h,
                x_hat,
                sigma,
                y,
                mask,
            });
            h = g;
        }
        let last = &self.layers[5];
        let mut out = linalg::matvec(&last.w.view(), &h);
        for (oi, bi) in out.iter_mut().zip(last.b.iter()) {
            *oi += bi;
        }
        Ok((
            out,
            ForwardCache {
                blocks,
                last_input: h,
            },
        ))
    }

    /// Deterministic forward pass with dropout inactive.
    pub fn forward_eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_inner(x, None)?.0)
    }

    /// Training-mode forward with explicit dropout masks (see
    /// [`MLPAdapter::sample_masks`]); returns the cache for backprop.
    pub fn forward_train(&self, x: &[f64], masks: &[Vec<f64>]) -> Result<(Vec<f64>, ForwardCache)> {
        self.forward_inner(x, Some(masks))
    }

    /// Backprop one sample's output gradient into parameter grads,
    /// accumulating into `grads`.
    pub fn backward(&self, cache: &ForwardCache, d_out: &[f64], grads: &mut AdapterGrads) {
        let last = &self.layers[5];
        for (i, &g) in d_out.iter().enumerate() {
            grads.b[5][i] += g;
            for (j, &hj) in cache.last_input.iter().enumerate() {
                grads.w[5][[i, j]] += g * hj;
            }
        }
        let mut delta: Vec<f64> = (0..cache.last_input.len())
            .map(|j| (0..d_out.len()).map(|i| last.w[[i, j]] * d_out[i]).sum())
            .collect();

        for l in (0..5).rev() {
            let block = &cache.blocks[l];
            let lin = &self.layers[l];
            let norm = &self.norms[l];
            let d = block.y.len();
            // dropout backward
            let mut dg = delta;
            if let Some(m) = &block.mask {
                for (v, mi) in dg.iter_mut().zip(m) {
                    *v *= mi;
                }
            }
            // gelu backward
            let dy: Vec<f64> = dg
                .iter()
                .zip(&block.y)
                .map(|(v, &y)| v * gelu_prime(y))
                .collect();
            // layer-norm backward
            let g_vec: Vec<f64> = dy
                .iter()
                .zip(norm.gamma.iter())
                .map(|(dyi, g)| dyi * g)
                .collect();
            let mean_g = g_vec.iter().sum::<f64>() / d as f64;
            let mean_gx = g_vec
                .iter()
                .zip(&block.x_hat)
                .map(|(g, xh)| g * xh)
                .sum::<f64>()
                / d as f64;
            let dz: Vec<f64> = (0..d)
                .map(|i| (g_vec[i] - mean_g - block.x_hat[i] * mean_gx) / block.sigma)
                .collect();
            for i in 0..d {
                grads.gamma[l][i] += dy[i] * block.x_hat[i];
                grads.beta[l][i] += dy[i];
            }
            // linear backward
            for i in 0..d {
                grads.b[l][i] += dz[i];
                for (j, &hj) in block.input.iter().enumerate() {
                    grads.w[l][[i, j]] += dz[i] * hj;
                }
            }
            delta = (0..block.input.len())
                .map(|j| (0..d).map(|i| lin.w[[i, j]] * dz[i]).sum())
                .collect();
        }
    }

    pub fn zero_grads(&self) -> AdapterGrads {
        AdapterGrads::zeros(self)
    }

    /// Flatten parameters for the optimizer; inverse of
    /// [`MLPAdapter::load_flat`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        for n in &self.norms {
            out.extend(n.gamma.iter());
            out.extend(n.beta.iter());
        }
        out
    }

    pub fn flatten_grads(&self, grads: &AdapterGrads) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in grads.w.iter().zip(&grads.b) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        for (g, b) in grads.gamma.iter().zip(&grads.beta) {
            out.extend(g.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for v in l.w.iter_mut() {
                *v = it.next().expect("flat length matches");
            }
            for v in l.b.iter_mut() {
                *v = it.next().expect("flat length matches");
            }
        }
        for n in &mut self.norms {
            for v in n.gamma.iter_mut() {
                *v = it.next().expect("flat length matches");
            }
            for v in n.beta.iter_mut() {
                *v = it.next().expect("flat length matches");
            }
        }
        assert!(it.next().is_none(), "flat vector too long");
    }

    /// Zero all linear weights and biases, keeping norm parameters; used by
    /// tests to expose the bias path.
    pub fn zero_linear(&mut self) {
        for l in &mut self.layers {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
    }

    pub fn set_final_bias(&mut self, bias: &[f64]) {
        for (b, v) in self.layers[5].b.iter_mut().zip(bias) {
            *b = *v;
        }
    }
}
