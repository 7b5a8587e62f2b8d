//! Toy conditional denoiser: two residual blocks over a small latent, each
//! with a text cross-attention and a parallel user branch. The base network
//! is frozen at its seeded initialization; training updates only the
//! user-branch projections and the output head.

use super::attention::{
    attention_backward, decoupled_cross_attention, AttnCache, DecoupledAttentionParams,
};
use crate::error::{Error, Result};
use crate::linalg;
use crate::optim::{AdamState, AdamWConfig};
use crate::seeds;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Variance-preserving cosine schedule over discrete training timesteps.
/// z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>, // index 0..=T, alpha_bar[0] = 1
}

impl NoiseSchedule {
    pub fn cosine(timesteps: usize) -> Self {
        let s = 0.008;
        let f = |u: f64| {
            let x = (u + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0.0);
        let alpha_bar = (0..=timesteps)
            .map(|t| (f(t as f64 / timesteps as f64) / f0).clamp(1e-5, 1.0))
            .collect();
        NoiseSchedule { alpha_bar }
    }

    pub fn timesteps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// (sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t)); squares sum to 1.
    pub fn mix_coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    pub fn mix(&self, z0: &[f64], eps: &[f64], t: usize) -> Vec<f64> {
        let (c0, c1) = self.mix_coefficients(t);
        z0.iter().zip(eps).map(|(z, e)| c0 * z + c1 * e).collect()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_dim: usize,
    pub timesteps: usize,
    pub sampling_steps: usize,
    pub guidance_scale: f64,
    /// Width of prompt and user context tokens (d_attn).
    pub d_ctx: usize,
    pub d_k: usize,
    pub hidden: usize,
    pub n_blocks: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_dim: 16,
            timesteps: 100,
            sampling_steps: 30,
            guidance_scale: 0.6,
            d_ctx: 32,
            d_k: 16,
            hidden: 32,
            n_blocks: 2,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.d_ctx == 0 || self.d_k == 0 || self.hidden == 0 {
            return Err(Error::validation("denoiser dims must be positive"));
        }
        if self.n_blocks == 0 || self.timesteps < 2 {
            return Err(Error::validation("denoiser needs blocks and >= 2 timesteps"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DenoiserBlock {
    w1: Array2<f64>, // (hidden, d_z)
    p: Array2<f64>,  // (hidden, d_z) timestep path
    b1: Array1<f64>, // (hidden)
    w2: Array2<f64>, // (d_z, hidden)
    b2: Array1<f64>, // (d_z)
    attn: DecoupledAttentionParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub schedule: NoiseSchedule,
    blocks: Vec<DenoiserBlock>,
    w_out: Array2<f64>, // (d_z, d_z), zero-initialized
    b_out: Array1<f64>,
}

fn time_embedding(t: usize, d: usize) -> Vec<f64> {
    let half = (d / 2).max(1);
    let mut out = vec![0.0; d];
    for i in 0..half {
        let freq = 10_000f64.powf(-(i as f64) / half as f64);
        let angle = t as f64 * freq;
        out[2 * i] = angle.sin();
        if 2 * i + 1 < d {
            out[2 * i + 1] = angle.cos();
        }
    }
    out
}

#[derive(Debug, Clone)]
struct BlockCache {
    u: Vec<f64>,
    attn: AttnCache,
}

#[derive(Debug, Clone)]
pub struct DenoiseCache {
    blocks: Vec<BlockCache>,
    h_final: Vec<f64>,
}

/// Gradients for the trainable subset: per-block user projections plus the
/// output head.
#[derive(Debug, Clone)]
pub struct TrainGrads {
    pub user_k: Vec<Array2<f64>>,
    pub user_v: Vec<Array2<f64>>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let d = config.latent_dim;
        let mut rng = seeds::child_rng(config.seed, "denoiser_init", 0);
        let blocks = (0..config.n_blocks)
            .map(|b| DenoiserBlock {
                w1: linalg::gaussian_matrix(&mut rng, config.hidden, d, 1.0 / (d as f64).sqrt()),
                p: linalg::gaussian_matrix(&mut rng, config.hidden, d, 1.0 / (d as f64).sqrt()),
                b1: Array1::zeros(config.hidden),
                w2: linalg::gaussian_matrix(&mut rng, d, config.hidden, 1.0 / (config.hidden as f64).sqrt()),
                b2: Array1::zeros(d),
                attn: DecoupledAttentionParams::seeded(
                    d,
                    config.d_ctx,
                    config.d_k,
                    d,
                    seeds::child_seed(config.seed, "denoiser_attn", b as u64),
                ),
            })
            .collect();
        Ok(Denoiser {
            schedule: NoiseSchedule::cosine(config.timesteps),
            blocks,
            // zero-initialized head: the untrained model predicts zero noise
            w_out: Array2::zeros((d, d)),
            b_out: Array1::zeros(d),
            config,
        })
    }

    /// Predict the injected noise from (z_t, t, prompt context, user tokens).
    pub fn forward(
        &self,
        z_t: &[f64],
        t: usize,
        text_ctx: &Array2<f64>,
        user_ctx: &Array2<f64>,
        user_scale: f64,
    ) -> Result<(Vec<f64>, DenoiseCache)> {
        let d = self.config.latent_dim;
        if z_t.len() != d {
            return Err(Error::dimension(d, z_t.len(), "latent"));
        }
        if text_ctx.nrows() == 0 || user_ctx.nrows() == 0 {
            return Err(Error::validation("denoiser context must be non-empty"));
        }
        let t_emb = time_embedding(t, d);
        let mut h = z_t.to_vec();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let mut a = linalg::matvec(&block.w1.view(), &h);
            let pt = linalg::matvec(&block.p.view(), &t_emb);
            for i in 0..a.len() {
                a[i] += pt[i] + block.b1[i];
            }
            let u: Vec<f64> = a.iter().map(|v| v.tanh()).collect();
            let wu = linalg::matvec(&block.w2.view(), &u);
            let h_mid: Vec<f64> = h
                .iter()
                .zip(wu.iter().zip(block.b2.iter()))
                .map(|(hi, (w, b))| hi + w + b)
                .collect();
            let q = Array2::from_shape_vec((1, d), h_mid.clone()).expect("shape");
            let (attn_out, attn_cache) = decoupled_cross_attention(
                &q.view(),
                &text_ctx.view(),
                &user_ctx.view(),
                &block.attn,
                user_scale,
            )?;
            h = h_mid
                .iter()
                .zip(attn_out.row(0).iter())
                .map(|(m, a)| m + a)
                .collect();
            caches.push(BlockCache {
                u,
                attn: attn_cache,
            });
        }
        let mut eps_hat = linalg::matvec(&self.w_out.view(), &h);
        for (e, b) in eps_hat.iter_mut().zip(self.b_out.iter()) {
            *e += b;
        }
        Ok((
            eps_hat,
            DenoiseCache {
                blocks: caches,
                h_final: h,
            },
        ))
    }

    pub fn zero_train_grads(&self) -> TrainGrads {
        TrainGrads {
            user_k: self
                .blocks
                .iter()
                .map(|b| Array2::zeros(b.attn.user.w_k.dim()))
                .collect(),
            user_v: self
                .blocks
                .iter()
                .map(|b| Array2::zeros(b.attn.user.w_v.dim()))
                .collect(),
            w_out: Array2::zeros(self.w_out.dim()),
            b_out: Array1::zeros(self.b_out.len()),
        }
    }

    /// Backprop d(loss)/d(eps_hat) into the trainable parameter grads.
    pub fn backward(&self, cache: &DenoiseCache, d_eps: &[f64], grads: &mut TrainGrads) {
        let d = self.config.latent_dim;
        for i in 0..d {
            grads.b_out[i] += d_eps[i];
            for j in 0..d {
                grads.w_out[[i, j]] += d_eps[i] * cache.h_final[j];
            }
        }
        let mut delta: Vec<f64> = (0..d)
            .map(|j| (0..d).map(|i| self.w_out[[i, j]] * d_eps[i]).sum())
            .collect();
        for (bi, block) in self.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[bi];
            // h_out = h_mid + attn(h_mid): attention output receives delta
            let d_attn_out =
                Array2::from_shape_vec((1, d), delta.clone()).expect("shape");
            let dq = attention_backward(
                &bc.attn,
                &block.attn,
                &d_attn_out,
                &mut grads.user_k[bi],
                &mut grads.user_v[bi],
            );
            let mut d_h_mid = delta.clone();
            for j in 0..d {
                d_h_mid[j] += dq[[0, j]];
            }
            // h_mid = h_in + W2 tanh(W1 h_in + P t + b1) + b2
            let hidden = block.w1.nrows();
            let mut d_u = vec![0.0; hidden];
            for i in 0..hidden {
                d_u[i] = (0..d).map(|j| block.w2[[j, i]] * d_h_mid[j]).sum();
            }
            let d_a: Vec<f64> = d_u
                .iter()
                .zip(&bc.u)
                .map(|(du, u)| du * (1.0 - u * u))
                .collect();
            let mut d_h_in = d_h_mid;
            for j in 0..d {
                d_h_in[j] += (0..hidden).map(|i| block.w1[[i, j]] * d_a[i]).sum::<f64>();
            }
            delta = d_h_in;
        }
    }

    fn flatten_trainable(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend(b.attn.user.w_k.iter());
            out.extend(b.attn.user.w_v.iter());
        }
        out.extend(self.w_out.iter());
        out.extend(self.b_out.iter());
        out
    }

    fn flatten_grads(&self, grads: &TrainGrads) -> Vec<f64> {
        let mut out = Vec::new();
        for (k, v) in grads.user_k.iter().zip(&grads.user_v) {
            out.extend(k.iter());
            out.extend(v.iter());
        }
        out.extend(grads.w_out.iter());
        out.extend(grads.b_out.iter());
        out
    }

    fn load_trainable(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for b in &mut self.blocks {
            for v in b.attn.user.w_k.iter_mut() {
                *v = it.next().expect("length");
            }
            for v in b.attn.user.w_v.iter_mut() {
                *v = it.next().expect("length");
            }
        }
        for v in self.w_out.iter_mut() {
            *v = it.next().expect("length");
        }
        for v in self.b_out.iter_mut() {
            *v = it.next().expect("length");
        }
        assert!(it.next().is_none());
    }

    /// SHA-256 over the frozen base parameters (residual blocks, query and
    /// text-branch projections). Training must not move these.
    pub fn frozen_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let mut push = |xs: &mut dyn Iterator<Item = &f64>| {
            for x in xs {
                hasher.update(x.to_le_bytes());
            }
        };
        for b in &self.blocks {
            push(&mut b.w1.iter());
            push(&mut b.p.iter());
            push(&mut b.b1.iter());
            push(&mut b.w2.iter());
            push(&mut b.b2.iter());
            push(&mut b.attn.w_q.iter());
            push(&mut b.attn.text.w_k.iter());
            push(&mut b.attn.text.w_v.iter());
        }
        hex::encode(hasher.finalize())
    }

    /// Test hook: zero the user-branch value projections so the user
    /// contribution vanishes identically.
    pub fn zero_user_values(&mut self) {
        for b in &mut self.blocks {
            b.attn.user.w_v.fill(0.0);
        }
    }

    /// Mutable access to a block's user-branch (key, value) projections.
    pub fn user_projections_mut(&mut self, block: usize) -> (&mut Array2<f64>, &mut Array2<f64>) {
        let b = &mut self.blocks[block];
        (&mut b.attn.user.w_k, &mut b.attn.user.w_v)
    }

    /// Mutable access to the output head.
    pub fn head_mut(&mut self) -> (&mut Array2<f64>, &mut Array1<f64>) {
        (&mut self.w_out, &mut self.b_out)
    }
}

/// One training example: prompt context tokens, the user token sequence,
/// and the liked-image latent that supervises Eq.-4 training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenTrainSample {
    pub prompt_ctx: Array2<f64>,
    pub e_u: Array2<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GenTrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// User-branch multiplier during training (guidance applies at sampling).
    pub train_user_scale: f64,
}

impl Default for GenTrainConfig {
    fn default() -> Self {
        GenTrainConfig {
            lr: 1e-2,
            weight_decay: 0.0,
            batch_size: 8,
            train_user_scale: 1.0,
        }
    }
}

/// Squared-error denoising loss ||eps - eps_hat||^2 for one sample at one
/// timestep, with gradients for the trainable parameters. Exposed for the
/// finite-difference audit.
pub fn denoise_loss_and_grads(
    denoiser: &Denoiser,
    sample: &GenTrainSample,
    t: usize,
    eps: &[f64],
    user_scale: f64,
) -> Result<(f64, TrainGrads)> {
    let z_t = denoiser.schedule.mix(&sample.target, eps, t);
    let (eps_hat, cache) =
        denoiser.forward(&z_t, t, &sample.prompt_ctx, &sample.e_u, user_scale)?;
    let loss: f64 = eps
        .iter()
        .zip(&eps_hat)
        .map(|(e, p)| (e - p) * (e - p))
        .sum();
    let d_eps: Vec<f64> = eps_hat.iter().zip(eps).map(|(p, e)| 2.0 * (p - e)).collect();
    let mut grads = denoiser.zero_train_grads();
    denoiser.backward(&cache, &d_eps, &mut grads);
    Ok((loss, grads))
}

/// Train the user branch and output head with uniform timestep sampling;
/// the frozen base is untouched. Returns the loss curve alongside the model.
pub fn train_generator(
    denoiser: &Denoiser,
    samples: &[GenTrainSample],
    config: &GenTrainConfig,
    steps: usize,
    seed: u64,
) -> Result<(Denoiser, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::validation("generator training needs samples"));
    }
    let mut model = denoiser.clone();
    let opt_cfg = AdamWConfig::new(config.lr, config.weight_decay);
    let mut opt_state = AdamState::zeros(model.flatten_trainable().len());
    let mut rng = seeds::child_rng(seed, "gen_train", 0);
    let d = model.config.latent_dim;
    let t_max = model.schedule.timesteps();
    let mut losses = Vec::with_capacity(steps);
    for step in 1..=steps {
        let mut grads = model.zero_train_grads();
        let mut loss_acc = 0.0;
        let batch = config.batch_size.min(samples.len());
        for _ in 0..batch {
            let idx = rng.gen_range(0..samples.len());
            let t = rng.gen_range(1..=t_max);
            let eps: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let sample = &samples[idx];
            let z_t = model.schedule.mix(&sample.target, &eps, t);
            let (eps_hat, cache) = model.forward(
                &z_t,
                t,
                &sample.prompt_ctx,
                &sample.e_u,
                config.train_user_scale,
            )?;
            let loss: f64 = eps
                .iter()
                .zip(&eps_hat)
                .map(|(e, p)| (e - p) * (e - p))
                .sum();
            loss_acc += loss;
            let scale = 1.0 / batch as f64;
            let d_eps: Vec<f64> = eps_hat
                .iter()
                .zip(&eps)
                .map(|(p, e)| 2.0 * (p - e) * scale)
                .collect();
            model.backward(&cache, &d_eps, &mut grads);
        }
        let loss = loss_acc / batch as f64;
        if !loss.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite denoising loss at step {step}"
            )));
        }
        losses.push(loss);
        let mut flat = model.flatten_trainable();
        let flat_g = model.flatten_grads(&grads);
        opt_state.step(&mut flat, &flat_g, step, &opt_cfg);
        model.load_trainable(&flat);
    }
    Ok((model, losses))
}

/// Bound on the clean-latent estimate during sampling.
const Z0_CLAMP: f64 = 4.0;

/// Deterministic DDIM-style sampling from a seeded Gaussian latent over a
/// strided timestep ladder; the user branch is scaled by the guidance value.
pub fn generate(
    denoiser: &Denoiser,
    prompt_ctx: &Array2<f64>,
    e_u: &Array2<f64>,
    guidance: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let steps = denoiser.config.sampling_steps;
    if steps < 1 {
        return Err(Error::validation("sampling needs at least 1 step"));
    }
    let t_max = denoiser.schedule.timesteps();
    let d = denoiser.config.latent_dim;
    let mut rng = seeds::child_rng(seed, "generate", 0);
    let mut z: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();

    // strided ladder T = t_0 > t_1 > ... > t_steps = 0
    let ladder: Vec<usize> = (0..=steps)
        .map(|i| t_max - i * t_max / steps)
        .collect();
    for w in ladder.windows(2) {
        let (t_cur, t_next) = (w[0], w[1]);
        let (eps_hat, _) = denoiser.forward(&z, t_cur, prompt_ctx, e_u, guidance)?;
        let (c0, c1) = denoiser.schedule.mix_coefficients(t_cur);
        // static thresholding on the clean estimate keeps the 1/sqrt(ab)
        // amplification at deep timesteps from blowing up the trajectory
        let z0_hat: Vec<f64> = z
            .iter()
            .zip(&eps_hat)
            .map(|(zt, e)| ((zt - c1 * e) / c0).clamp(-Z0_CLAMP, Z0_CLAMP))
            .collect();
        let (n0, n1) = denoiser.schedule.mix_coefficients(t_next);
        z = z0_hat
            .iter()
            .zip(&eps_hat)
            .map(|(z0, e)| n0 * z0 + n1 * e)
            .collect();
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = seeds::rng(seed);
        Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0))
    }

    fn small_config() -> DenoiserConfig {
        DenoiserConfig {
            latent_dim: 8,
            timesteps: 50,
            sampling_steps: 10,
            guidance_scale: 0.6,
            d_ctx: 10,
            d_k: 6,
            hidden: 12,
            n_blocks: 2,
            seed: 3,
        }
    }

    fn toy_samples(n: usize, cfg: &DenoiserConfig, seed: u64) -> Vec<GenTrainSample> {
        let mut rng = seeds::rng(seed);
        (0..n)
            .map(|i| GenTrainSample {
                prompt_ctx: ctx(2, cfg.d_ctx, seed * 100 + i as u64),
                e_u: ctx(3, cfg.d_ctx, seed * 200 + i as u64),
                target: (0..cfg.latent_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            })
            .collect()
    }

    #[test]
    fn schedule_is_variance_preserving_and_monotone() {
        let s = NoiseSchedule::cosine(100);
        assert_eq!(s.timesteps(), 100);
        for t in 0..=100 {
            let (c0, c1) = s.mix_coefficients(t);
            assert!((c0 * c0 + c1 * c1 - 1.0).abs() < 1e-12, "t = {t}");
            if t > 0 {
                assert!(s.alpha_bar(t) <= s.alpha_bar(t - 1), "alpha_bar must decay");
            }
        }
        assert!((s.alpha_bar(0) - 1.0).abs() < 1e-12);
        assert!(s.alpha_bar(100) < 0.01);
    }

    #[test]
    fn zero_head_loss_baseline_is_the_latent_dim() {
        let cfg = small_config();
        let denoiser = Denoiser::new(cfg).unwrap();
        let samples = toy_samples(4, &cfg, 1);
        let mut rng = seeds::rng(9);
        let mut acc = 0.0;
        let n = 400;
        for i in 0..n {
            let eps: Vec<f64> = (0..cfg.latent_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let t = rng.gen_range(1..=denoiser.schedule.timesteps());
            let (loss, _) =
                denoise_loss_and_grads(&denoiser, &samples[i % 4], t, &eps, 1.0).unwrap();
            acc += loss / n as f64;
        }
        let expect = cfg.latent_dim as f64;
        assert!(
            (acc - expect).abs() < 0.6,
            "zero-head baseline {acc} should be near {expect}"
        );
    }

    #[test]
    fn training_descends_and_freezes_the_base() {
        let cfg = small_config();
        let denoiser = Denoiser::new(cfg).unwrap();
        let samples = toy_samples(6, &cfg, 2);
        let checksum_before = denoiser.frozen_checksum();
        let (trained, losses) =
            train_generator(&denoiser, &samples, &GenTrainConfig::default(), 500, 0).unwrap();
        assert_eq!(trained.frozen_checksum(), checksum_before);
        let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(
            tail < head * 0.8,
            "smoothed loss should drop >= 20%: {head} -> {tail}"
        );
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let cfg = small_config();
        let denoiser = Denoiser::new(cfg).unwrap();
        let p = ctx(2, cfg.d_ctx, 5);
        let u = ctx(3, cfg.d_ctx, 6);
        let a = generate(&denoiser, &p, &u, 0.6, 42).unwrap();
        let b = generate(&denoiser, &p, &u, 0.6, 42).unwrap();
        assert_eq!(a, b);
        let c = generate(&denoiser, &p, &u, 0.6, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_guidance_makes_generation_user_independent() {
        let cfg = small_config();
        let denoiser = Denoiser::new(cfg).unwrap();
        let p = ctx(2, cfg.d_ctx, 7);
        let u1 = ctx(3, cfg.d_ctx, 8);
        let u2 = ctx(3, cfg.d_ctx, 9);
        let a = generate(&denoiser, &p, &u1, 0.0, 11).unwrap();
        let b = generate(&denoiser, &p, &u2, 0.0, 11).unwrap();
        assert_eq!(a, b, "guidance 0 must ignore the user tokens exactly");
    }

    #[test]
    fn trained_generator_distinguishes_users() {
        let cfg = small_config();
        let denoiser = Denoiser::new(cfg).unwrap();
        // two users with very different targets under the same prompts
        let prompt = ctx(2, cfg.d_ctx, 12);
        let user_a = ctx(3, cfg.d_ctx, 13);
        let user_b = ctx(3, cfg.d_ctx, 14);
        let mut samples = Vec::new();
        for i in 0..4 {
            samples.push(GenTrainSample {
                prompt_ctx: prompt.clone(),
                e_u: user_a.clone(),
                target: (0..cfg.latent_dim).map(|j| f64::from(j as u16) * 0.1 + i as f64 * 0.01).collect(),
            });
            samples.push(GenTrainSample {
                prompt_ctx: prompt.clone(),
                e_u: user_b.clone(),
                target: (0..cfg.latent_dim).map(|j| -(f64::from(j as u16) * 0.1) - i as f64 * 0.01).collect(),
            });
        }
        let (trained, _) =
            train_generator(&denoiser, &samples, &GenTrainConfig::default(), 400, 1).unwrap();
        let ga = generate(&trained, &prompt, &user_a, 0.6, 5).unwrap();
        let gb = generate(&trained, &prompt, &user_b, 0.6, 5).unwrap();
        let diff: f64 = ga
            .iter()
            .zip(&gb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(diff > 0.0, "distinct users must generate distinct samples");
    }

    #[test]
    fn trainable_gradients_match_central_differences() {
        let cfg = small_config();
        let mut denoiser = Denoiser::new(cfg).unwrap();
        // non-zero head so its gradient path is informative
        let mut rng = seeds::rng(31);
        for v in denoiser.w_out.iter_mut() {
            *v = rng.gen_range(-0.2..0.2);
        }
        let sample = &toy_samples(1, &cfg, 3)[0];
        let t = 17;
        let eps: Vec<f64> = (0..cfg.latent_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let (_, grads) = denoise_loss_and_grads(&denoiser, sample, t, &eps, 0.6).unwrap();
        let loss_of = |d: &Denoiser| {
            denoise_loss_and_grads(d, sample, t, &eps, 0.6).unwrap().0
        };
        let e = 1e-6;
        // user-branch K and V slices in both blocks, plus the head
        for (block, r, c) in [(0usize, 0usize, 0usize), (0, 3, 2), (1, 5, 1), (1, 2, 4)] {
            let mut up = denoiser.clone();
            let mut dn = denoiser.clone();
            up.blocks[block].attn.user.w_k[[r, c]] += e;
            dn.blocks[block].attn.user.w_k[[r, c]] -= e;
            let num = (loss_of(&up) - loss_of(&dn)) / (2.0 * e);
            let got = grads.user_k[block][[r, c]];
            assert!(
                (got - num).abs() / got.abs().max(num.abs()).max(1e-8) < 1e-4,
                "user_k[{block}][{r},{c}]: {got} vs {num}"
            );
            let mut up = denoiser.clone();
            let mut dn = denoiser.clone();
            up.blocks[block].attn.user.w_v[[r, c]] += e;
            dn.blocks[block].attn.user.w_v[[r, c]] -= e;
            let num = (loss_of(&up) - loss_of(&dn)) / (2.0 * e);
            let got = grads.user_v[block][[r, c]];
            assert!(
                (got - num).abs() / got.abs().max(num.abs()).max(1e-8) < 1e-4,
                "user_v[{block}][{r},{c}]: {got} vs {num}"
            );
        }
        for (r, c) in [(0usize, 0usize), (3, 5), (7, 2)] {
            let mut up = denoiser.clone();
            let mut dn = denoiser.clone();
            up.w_out[[r, c]] += e;
            dn.w_out[[r, c]] -= e;
            let num = (loss_of(&up) - loss_of(&dn)) / (2.0 * e);
            let got = grads.w_out[[r, c]];
            assert!(
                (got - num).abs() / got.abs().max(num.abs()).max(1e-8) < 1e-4,
                "w_out[{r},{c}]: {got} vs {num}"
            );
        }
    }
}
