//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! Every tolerance here is pinned in code. Oracles (closed-form MMD, Fréchet
//! analytics, bootstrap standard errors) are computed inside the tests,
//! independent of the implementation paths they check.

use ndarray::Array2;
use prefcond_core::alignment::{
    collapse_diagnostic, loss_ablation_probe, mmd_loss, mmd_value, pointwise_loss,
    pointwise_loss_with_grad, KernelConfig, LossSpec, MmdEstimator,
};
use prefcond_core::conditioning::{
    decoupled_cross_attention, denoise_loss_and_grads, fuse, generate, train_generator,
    DecoupledAttentionParams, Denoiser, DenoiserConfig, FusionConfig, FusionStrategy,
    GenTrainConfig, GenTrainSample, UserEmbedding,
};
use prefcond_core::encoder::LayerActivations;
use prefcond_core::eval::{clustering_eval, cmmd, frechet_distance, FeatureSet};
use prefcond_core::linalg;
use prefcond_core::pipeline::{run_pipeline, verify_run, RunConfig, Step};
use prefcond_core::probing::{
    aggregate_layers, binary_probe_loss_and_grads, extract_e_core, extract_e_sem,
    multiuser_probe_loss_and_grads, train_binary_probe, train_multiuser_probe, EmbeddingPair,
    LayerSpec, PoolingStrategy, ProbeConfig,
};
use prefcond_core::seeds;
use rand::Rng;
use rand_distr::StandardNormal;

fn gaussian_batch(n: usize, d: usize, mean: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeds::rng(seed);
    (0..n)
        .map(|_| {
            (0..d)
                .map(|_| rng.sample::<f64, _>(StandardNormal) + mean)
                .collect()
        })
        .collect()
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

// ---------------------------------------------------------------------------
// 1. MMD exactness: self-distance, symmetry, non-negativity
// ---------------------------------------------------------------------------

#[test]
fn acceptance_01_mmd_exactness() {
    let kernel = KernelConfig {
        bandwidths: vec![0.5, 1.0, 2.0],
        estimator: MmdEstimator::Biased,
    };
    let s = gaussian_batch(16, 3, 0.3, 101);
    let self_mmd = mmd_value(&s, &s, &kernel).unwrap();
    assert!(self_mmd.abs() <= 1e-12, "MMD(S,S) = {self_mmd}");

    for seed in 0..1000u64 {
        let a = gaussian_batch(6, 2, 0.0, 2 * seed + 1);
        let b = gaussian_batch(5, 2, 0.4, 2 * seed + 2);
        let ab = mmd_value(&a, &b, &kernel).unwrap();
        let ba = mmd_value(&b, &a, &kernel).unwrap();
        assert_eq!(ab.to_bits(), ba.to_bits(), "seed {seed}: symmetry must be exact");
        assert!(ab >= -1e-12, "seed {seed}: MMD {ab} below -1e-12");
    }
    println!("ACCEPTANCE 01 (MMD exactness): PASS");
}

// ---------------------------------------------------------------------------
// 2. MMD Gaussian oracle at n = 5000 within 3 bootstrap standard errors
// ---------------------------------------------------------------------------

#[test]
fn acceptance_02_mmd_gaussian_oracle() {
    let (mu, h): (f64, f64) = (2.0, 1.5);
    // population MMD^2 for N(0,1) vs N(mu,1) under a Gaussian kernel:
    // 2 sqrt(h^2/(h^2+2)) (1 - exp(-mu^2 / (2 (h^2+2))))
    let closed_form = 2.0 * (h * h / (h * h + 2.0)).sqrt()
        * (1.0 - (-mu * mu / (2.0 * (h * h + 2.0))).exp());

    let n = 5000;
    let kernel = KernelConfig::single(h);
    let x = gaussian_batch(n, 1, 0.0, 201);
    let y = gaussian_batch(n, 1, mu, 202);
    let estimate = mmd_value(&x, &y, &kernel).unwrap();

    // m-out-of-n bootstrap: SE at subsample size m rescales by sqrt(m/n)
    let (m, b_reps) = (1000usize, 30usize);
    let mut rng = seeds::rng(203);
    let mut reps = Vec::with_capacity(b_reps);
    for _ in 0..b_reps {
        let xs: Vec<Vec<f64>> = (0..m).map(|_| x[rng.gen_range(0..n)].clone()).collect();
        let ys: Vec<Vec<f64>> = (0..m).map(|_| y[rng.gen_range(0..n)].clone()).collect();
        reps.push(mmd_value(&xs, &ys, &kernel).unwrap());
    }
    let mean = reps.iter().sum::<f64>() / b_reps as f64;
    let var = reps.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (b_reps - 1) as f64;
    let se = var.sqrt() * (m as f64 / n as f64).sqrt();

    let delta = (estimate - closed_form).abs();
    assert!(
        delta < 3.0 * se,
        "empirical {estimate} vs closed form {closed_form}: |delta| {delta} >= 3 SE {}",
        3.0 * se
    );
    println!(
        "ACCEPTANCE 02 (MMD Gaussian oracle): PASS (est {estimate:.5}, oracle {closed_form:.5}, 3SE {:.5})",
        3.0 * se
    );
}

// ---------------------------------------------------------------------------
// 3. Gradient checks: MMD, pointwise, probe cross-entropies, denoising loss
// ---------------------------------------------------------------------------

#[test]
fn acceptance_03_gradient_checks() {
    let eps = 1e-6;

    // MMD gradient on batches of size 4, dim 3
    for estimator in [MmdEstimator::Biased, MmdEstimator::Unbiased] {
        let kernel = KernelConfig {
            bandwidths: vec![0.8, 1.6],
            estimator,
        };
        let a = gaussian_batch(4, 3, 0.0, 301);
        let b = gaussian_batch(4, 3, 0.5, 302);
        let (_, grads) = mmd_loss(&a, &b, &kernel).unwrap();
        for i in 0..4 {
            for t in 0..3 {
                let mut up = a.clone();
                let mut dn = a.clone();
                up[i][t] += eps;
                dn[i][t] -= eps;
                let num = (mmd_value(&up, &b, &kernel).unwrap()
                    - mmd_value(&dn, &b, &kernel).unwrap())
                    / (2.0 * eps);
                assert!(
                    rel_err(grads[i][t], num) < 1e-4,
                    "MMD {estimator:?} grad[{i}][{t}]"
                );
            }
        }
    }

    // pointwise (MSE + cosine) gradient
    let mut rng = seeds::rng(303);
    let a: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0) + 0.2).collect();
    let b: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0) + 0.2).collect();
    let (_, pg) = pointwise_loss_with_grad(&a, &b).unwrap();
    for t in 0..5 {
        let mut up = a.clone();
        let mut dn = a.clone();
        up[t] += eps;
        dn[t] -= eps;
        let num =
            (pointwise_loss(&up, &b).unwrap() - pointwise_loss(&dn, &b).unwrap()) / (2.0 * eps);
        assert!(rel_err(pg[t], num) < 1e-4, "pointwise grad[{t}]");
    }

    // binary probe cross-entropy
    let xs: Vec<Vec<f64>> = gaussian_batch(12, 4, 0.0, 304);
    let ys: Vec<f64> = (0..12).map(|i| f64::from(i % 2 == 0)).collect();
    let w: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let (_, gw, gb) = binary_probe_loss_and_grads(&w, 0.1, &xs, &ys, 0.0);
    for j in 0..4 {
        let mut up = w.clone();
        let mut dn = w.clone();
        up[j] += eps;
        dn[j] -= eps;
        let (lu, _, _) = binary_probe_loss_and_grads(&up, 0.1, &xs, &ys, 0.0);
        let (ld, _, _) = binary_probe_loss_and_grads(&dn, 0.1, &xs, &ys, 0.0);
        assert!(rel_err(gw[j], (lu - ld) / (2.0 * eps)) < 1e-4, "binary CE grad[{j}]");
    }
    let (lu, _, _) = binary_probe_loss_and_grads(&w, 0.1 + eps, &xs, &ys, 0.0);
    let (ld, _, _) = binary_probe_loss_and_grads(&w, 0.1 - eps, &xs, &ys, 0.0);
    assert!(rel_err(gb, (lu - ld) / (2.0 * eps)) < 1e-4, "binary CE bias grad");

    // multi-user probe cross-entropy
    let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let weights = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-0.5..0.5));
    let biases = ndarray::Array1::from_shape_fn(3, |_| rng.gen_range(-0.2..0.2));
    let (_, gw, _) = multiuser_probe_loss_and_grads(&weights, &biases, &xs, &labels, 0.0);
    for c in 0..3 {
        for j in 0..4 {
            let mut up = weights.clone();
            let mut dn = weights.clone();
            up[[c, j]] += eps;
            dn[[c, j]] -= eps;
            let (lu, _, _) = multiuser_probe_loss_and_grads(&up, &biases, &xs, &labels, 0.0);
            let (ld, _, _) = multiuser_probe_loss_and_grads(&dn, &biases, &xs, &labels, 0.0);
            assert!(
                rel_err(gw[[c, j]], (lu - ld) / (2.0 * eps)) < 1e-4,
                "multiuser CE grad[{c},{j}]"
            );
        }
    }

    // denoising loss gradients on the trainable slice
    let cfg = DenoiserConfig {
        latent_dim: 8,
        timesteps: 50,
        sampling_steps: 10,
        guidance_scale: 0.6,
        d_ctx: 10,
        d_k: 6,
        hidden: 12,
        n_blocks: 2,
        seed: 305,
    };
    let mut denoiser = Denoiser::new(cfg).unwrap();
    // non-zero head so its path is informative
    {
        let (w_out, _) = denoiser.head_mut();
        for v in w_out.iter_mut() {
            *v = rng.gen_range(-0.2..0.2);
        }
    }
    let sample = GenTrainSample {
        prompt_ctx: Array2::from_shape_fn((2, 10), |_| rng.gen_range(-1.0..1.0)),
        e_u: Array2::from_shape_fn((3, 10), |_| rng.gen_range(-1.0..1.0)),
        target: (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };
    let noise: Vec<f64> = (0..8).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let (_, grads) = denoise_loss_and_grads(&denoiser, &sample, 17, &noise, 0.6).unwrap();
    let loss_of =
        |d: &Denoiser| denoise_loss_and_grads(d, &sample, 17, &noise, 0.6).unwrap().0;
    for (block, r, c) in [(0usize, 0usize, 0usize), (0, 4, 3), (1, 7, 1)] {
        for which in ["k", "v"] {
            let mut up = denoiser.clone();
            let mut dn = denoiser.clone();
            let got = if which == "k" {
                up.user_projections_mut(block).0[[r, c]] += eps;
                dn.user_projections_mut(block).0[[r, c]] -= eps;
                grads.user_k[block][[r, c]]
            } else {
                up.user_projections_mut(block).1[[r, c]] += eps;
                dn.user_projections_mut(block).1[[r, c]] -= eps;
                grads.user_v[block][[r, c]]
            };
            let num = (loss_of(&up) - loss_of(&dn)) / (2.0 * eps);
            assert!(
                rel_err(got, num) < 1e-4,
                "denoise user-{which}[{block}][{r},{c}]: {got} vs {num}"
            );
        }
    }
    // output head slice
    let (_, head_grads) = denoise_loss_and_grads(&denoiser, &sample, 17, &noise, 0.6).unwrap();
    for (r, c) in [(0usize, 0usize), (3, 5), (7, 2)] {
        let mut up = denoiser.clone();
        let mut dn = denoiser.clone();
        up.head_mut().0[[r, c]] += eps;
        dn.head_mut().0[[r, c]] -= eps;
        let num = (loss_of(&up) - loss_of(&dn)) / (2.0 * eps);
        assert!(
            rel_err(head_grads.w_out[[r, c]], num) < 1e-4,
            "denoise head grad[{r},{c}]"
        );
    }
    println!("ACCEPTANCE 03 (gradient checks): PASS");
}

// ---------------------------------------------------------------------------
// 4. Probing protocol: planted accuracy, permutation baselines, pooling order
// ---------------------------------------------------------------------------

fn planted_pairs(n: usize, d: usize, sigma: f64, seed: u64) -> Vec<EmbeddingPair> {
    let mut rng = seeds::rng(seed);
    let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    (0..n)
        .map(|_| {
            let noise = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
                (0..d)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * sigma)
                    .collect()
            };
            let positive: Vec<f64> = v.iter().zip(noise(&mut rng)).map(|(a, b)| a + b).collect();
            EmbeddingPair {
                positive,
                negative: noise(&mut rng),
            }
        })
        .collect()
}

/// Activation stacks where only the terminal token of the top layer carries
/// the label direction.
fn terminal_only_samples(
    pairs: usize,
    t_len: usize,
    d: usize,
    n_layers: usize,
    seed: u64,
) -> Vec<(LayerActivations, u8)> {
    let mut rng = seeds::rng(seed);
    let dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut out = Vec::new();
    for _ in 0..pairs {
        for label in [1u8, 0u8] {
            let mut acts = ndarray::Array3::zeros((n_layers + 1, t_len, d));
            for l in 0..=n_layers {
                for t in 0..t_len {
                    for j in 0..d {
                        acts[[l, t, j]] = rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
            for j in 0..d {
                acts[[n_layers, t_len - 1, j]] +=
                    if label == 1 { dir[j] } else { -dir[j] };
            }
            out.push((
                LayerActivations {
                    activations: acts,
                    token_mask: vec![true; t_len],
                },
                label,
            ));
        }
    }
    out
}

#[test]
fn acceptance_04_probing_protocol() {
    // planted-signal probe
    let pairs = planted_pairs(200, 16, 0.1, 401);
    let res = train_binary_probe(&pairs, &ProbeConfig::default()).unwrap();
    assert!(res.holdout_accuracy >= 0.98, "planted accuracy {}", res.holdout_accuracy);

    // permutation baseline: both sides pure noise
    let mut rng = seeds::rng(402);
    let noise_pairs: Vec<EmbeddingPair> = (0..200)
        .map(|_| EmbeddingPair {
            positive: (0..16).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
            negative: (0..16).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        })
        .collect();
    let res = train_binary_probe(&noise_pairs, &ProbeConfig::default()).unwrap();
    assert!(
        (res.holdout_accuracy - 0.5).abs() <= 0.07,
        "shuffled-label accuracy {}",
        res.holdout_accuracy
    );

    // 10-cluster user identification
    let mut xs = Vec::new();
    let mut ids = Vec::new();
    for u in 0..10 {
        let center: Vec<f64> = (0..8)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0)
            .collect();
        for _ in 0..20 {
            xs.push(
                center
                    .iter()
                    .map(|c| c + rng.sample::<f64, _>(StandardNormal) * 0.1)
                    .collect::<Vec<f64>>(),
            );
            ids.push(format!("u{u}"));
        }
    }
    let res = train_multiuser_probe(&xs, &ids, &ProbeConfig::default()).unwrap();
    assert!(res.holdout_accuracy >= 0.95, "cluster identification {}", res.holdout_accuracy);

    // random-embedding baseline near 1/U
    let xs: Vec<Vec<f64>> = gaussian_batch(400, 8, 0.0, 403);
    let ids: Vec<String> = (0..400).map(|i| format!("u{}", i % 10)).collect();
    let res = train_multiuser_probe(&xs, &ids, &ProbeConfig::default()).unwrap();
    assert!(
        (res.holdout_accuracy - 0.1).abs() <= 0.05,
        "random baseline {} vs 1/U = 0.1",
        res.holdout_accuracy
    );

    // last-token pooling strictly beats mean pooling at T = 32, 5 seeds
    for seed in [411u64, 412, 413, 414, 415] {
        let samples = terminal_only_samples(40, 32, 8, 4, seed);
        let embed = |strategy: PoolingStrategy| -> Vec<EmbeddingPair> {
            samples
                .chunks(2)
                .map(|pair| {
                    let pos =
                        aggregate_layers(&pair[0].0, LayerSpec::TopLayer, strategy).unwrap();
                    let neg =
                        aggregate_layers(&pair[1].0, LayerSpec::TopLayer, strategy).unwrap();
                    EmbeddingPair {
                        positive: pos,
                        negative: neg,
                    }
                })
                .collect()
        };
        let config = ProbeConfig {
            seed,
            ..ProbeConfig::default()
        };
        let last = train_binary_probe(&embed(PoolingStrategy::LastToken), &config)
            .unwrap()
            .holdout_accuracy;
        let mean = train_binary_probe(&embed(PoolingStrategy::Mean), &config)
            .unwrap()
            .holdout_accuracy;
        assert!(
            last > mean,
            "seed {seed}: last-token {last} must strictly beat mean {mean} at T = 32"
        );
    }
    println!("ACCEPTANCE 04 (probing protocol): PASS");
}

// ---------------------------------------------------------------------------
// 5. Decoupled attention identities
// ---------------------------------------------------------------------------

#[test]
fn acceptance_05_decoupled_attention_identities() {
    let mut rng = seeds::rng(501);
    let params = DecoupledAttentionParams::seeded(5, 7, 6, 5, 502);
    let q = Array2::from_shape_fn((3, 5), |_| rng.gen_range(-1.0..1.0));
    let text = Array2::from_shape_fn((4, 7), |_| rng.gen_range(-1.0..1.0));
    let user = Array2::from_shape_fn((3, 7), |_| rng.gen_range(-1.0..1.0));
    let gamma = 0.6;

    // zero user-value projection reduces to text-only attention exactly
    let mut zeroed = params.clone();
    zeroed.user.w_v.fill(0.0);
    let (with_user, _) =
        decoupled_cross_attention(&q.view(), &text.view(), &user.view(), &zeroed, gamma).unwrap();
    let (text_only, _) =
        decoupled_cross_attention(&q.view(), &text.view(), &user.view(), &zeroed, 0.0).unwrap();
    assert_eq!(with_user, text_only, "zero V' must equal text-only output exactly");

    // additive decomposition into independently computed branches
    let (full, cache) =
        decoupled_cross_attention(&q.view(), &text.view(), &user.view(), &params, gamma).unwrap();
    let mut text_branch_params = params.clone();
    text_branch_params.user.w_v.fill(0.0);
    let (text_branch, _) = decoupled_cross_attention(
        &q.view(),
        &text.view(),
        &user.view(),
        &text_branch_params,
        gamma,
    )
    .unwrap();
    let mut user_branch_params = params.clone();
    user_branch_params.text.w_v.fill(0.0);
    let (user_branch, _) = decoupled_cross_attention(
        &q.view(),
        &text.view(),
        &user.view(),
        &user_branch_params,
        gamma,
    )
    .unwrap();
    let recomposed = &text_branch + &user_branch;
    assert_eq!(full, recomposed, "output must decompose additively into branches");

    // per-branch softmax rows sum to 1 within 1e-12
    for i in 0..q.nrows() {
        assert!((cache.text_weights.row(i).sum() - 1.0).abs() < 1e-12);
        assert!((cache.user_weights.row(i).sum() - 1.0).abs() < 1e-12);
    }
    println!("ACCEPTANCE 05 (decoupled attention identities): PASS");
}

// ---------------------------------------------------------------------------
// 6. Fusion contracts
// ---------------------------------------------------------------------------

#[test]
fn acceptance_06_fusion_contracts() {
    let mut rng = seeds::rng(601);
    let d = 12;
    let k = 2;
    let user = UserEmbedding {
        e_sem_hat: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        e_core_tokens: Array2::from_shape_fn((k, d), |_| rng.gen_range(-1.0..1.0)),
        e_img: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };

    // concat layout slicing recovers inputs bit-exactly
    let concat = fuse(&user, &FusionConfig::new(FusionStrategy::Concat, d)).unwrap();
    assert_eq!(concat.nrows(), k + 2);
    assert_eq!(concat.row(0).to_vec(), user.e_sem_hat);
    for t in 0..k {
        assert_eq!(concat.row(1 + t).to_vec(), user.e_core_tokens.row(t).to_vec());
    }
    assert_eq!(concat.row(k + 1).to_vec(), user.e_img);

    // Res-Attn at init: zero residual contribution
    let attn = fuse(&user, &FusionConfig::new(FusionStrategy::Attn, d)).unwrap();
    let res = fuse(&user, &FusionConfig::new(FusionStrategy::ResAttn, d)).unwrap();
    let mut normalized = attn.row(0).to_vec();
    linalg::layer_norm(&mut normalized, 1e-5);
    for (r, e) in res.row(0).iter().zip(&normalized) {
        assert!(
            (r - e).abs() < 1e-12,
            "Res-Attn at init must equal normalized Attn output"
        );
    }

    // determinism across repeated calls
    for strategy in [FusionStrategy::Concat, FusionStrategy::Attn, FusionStrategy::ResAttn] {
        let cfg = FusionConfig::new(strategy, d);
        assert_eq!(fuse(&user, &cfg).unwrap(), fuse(&user, &cfg).unwrap());
    }
    println!("ACCEPTANCE 06 (fusion contracts): PASS");
}

// ---------------------------------------------------------------------------
// 7. Fréchet oracle
// ---------------------------------------------------------------------------

#[test]
fn acceptance_07_frechet_oracle() {
    // self-distance
    let s = FeatureSet::new(gaussian_batch(64, 6, 0.2, 701), "s").unwrap();
    let fd = frechet_distance(&s, &s).unwrap();
    assert!(fd.abs() <= 1e-8, "FD(S,S) = {fd}");

    // mean shift in 8 dimensions: FD -> ||mu||^2
    let d = 8;
    let mu: Vec<f64> = (0..d).map(|i| 0.3 * (i as f64 + 1.0)).collect();
    let norm2: f64 = mu.iter().map(|v| v * v).sum();
    let mut rng = seeds::rng(702);
    let a = FeatureSet::new(gaussian_batch(10_000, d, 0.0, 703), "a").unwrap();
    let b_rows: Vec<Vec<f64>> = (0..10_000)
        .map(|_| {
            (0..d)
                .map(|j| rng.sample::<f64, _>(StandardNormal) + mu[j])
                .collect()
        })
        .collect();
    let b = FeatureSet::new(b_rows, "b").unwrap();
    let fd = frechet_distance(&a, &b).unwrap();
    assert!(
        (fd - norm2).abs() / norm2 < 0.05,
        "FD {fd} vs analytic ||mu||^2 = {norm2}"
    );

    // 1-D unequal variance: N(0,1) vs N(0,4) has FD = (1-2)^2 = 1
    let a = FeatureSet::new(gaussian_batch(20_000, 1, 0.0, 704), "a").unwrap();
    let b_rows: Vec<Vec<f64>> = gaussian_batch(20_000, 1, 0.0, 705)
        .into_iter()
        .map(|r| vec![2.0 * r[0]])
        .collect();
    let b = FeatureSet::new(b_rows, "b").unwrap();
    let fd = frechet_distance(&a, &b).unwrap();
    assert!((fd - 1.0).abs() < 0.1, "1-D FD {fd} vs analytic 1.0");
    println!("ACCEPTANCE 07 (Fréchet oracle): PASS");
}

// ---------------------------------------------------------------------------
// 8 & 9. End-to-end toy conditioning and swap-direction reproduction
// ---------------------------------------------------------------------------

/// Planted-factor conditioning setup: orthonormal style and semantic
/// directions, bundles whose e_img carries style and e_sem_hat carries
/// semantics, and a cross-product training set that makes the factor
/// assignment identifiable.
struct PlantedWorld {
    trained: Denoiser,
    losses: Vec<f64>,
    fusion: FusionConfig,
    prompt_ctx: Array2<f64>,
    s_a: Vec<f64>,
    m_a: Vec<f64>,
    bundles: PlantedBundles,
}

struct PlantedBundles {
    none: UserEmbedding,
    img_swapped: UserEmbedding,
    sem_swapped: UserEmbedding,
    user_b: UserEmbedding,
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = linalg::norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn orthogonalize(v: &mut [f64], against: &[&Vec<f64>]) {
    for u in against {
        let p = linalg::dot(v, u);
        for (x, y) in v.iter_mut().zip(u.iter()) {
            *x -= p * y;
        }
    }
}

fn lift(dir: &[f64], d_ctx: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeds::rng(seed);
    let m = linalg::gaussian_matrix(&mut rng, d_ctx, dir.len(), 1.0 / (dir.len() as f64).sqrt());
    linalg::matvec(&m.view(), dir)
}

fn build_planted_world(trial_seed: u64, steps: usize) -> PlantedWorld {
    let d = 16usize;
    let d_ctx = 24usize;
    let mut rng = seeds::rng(1000 + trial_seed);
    let s_a = unit((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
    let mut s_b: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    orthogonalize(&mut s_b, &[&s_a]);
    let s_b = unit(s_b);
    let mut m_a: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    orthogonalize(&mut m_a, &[&s_a, &s_b]);
    let m_a = unit(m_a);
    let mut m_b: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    orthogonalize(&mut m_b, &[&s_a, &s_b, &m_a]);
    let m_b = unit(m_b);

    // e_img carries style, e_sem carries semantics, shared lift maps
    let e_img_a = lift(&s_a, d_ctx, 7);
    let e_img_b = lift(&s_b, d_ctx, 7);
    let e_sem_a = lift(&m_a, d_ctx, 8);
    let e_sem_b = lift(&m_b, d_ctx, 8);
    let core = vec![0.1; d_ctx];
    let bundle = |img: &Vec<f64>, sem: &Vec<f64>| UserEmbedding {
        e_sem_hat: sem.clone(),
        e_core_tokens: Array2::from_shape_fn((1, d_ctx), |(_, j)| core[j]),
        e_img: img.clone(),
    };
    let fusion = FusionConfig::new(FusionStrategy::Concat, d_ctx);
    let prompt_ctx = {
        let mut r = seeds::rng(55);
        Array2::from_shape_fn((2, d_ctx), |_| r.gen_range(-0.5..0.5))
    };

    // cross product of image and semantic factors, 6 samples each
    let combos = [
        (&e_img_a, &e_sem_a, &s_a, &m_a),
        (&e_img_a, &e_sem_b, &s_a, &m_b),
        (&e_img_b, &e_sem_a, &s_b, &m_a),
        (&e_img_b, &e_sem_b, &s_b, &m_b),
    ];
    let mut nrng = seeds::rng(2000 + trial_seed);
    let mut samples = Vec::new();
    for (img, sem, style, sema) in combos {
        for _ in 0..6 {
            let target: Vec<f64> = (0..d)
                .map(|i| {
                    2.0 * style[i] + 2.0 * sema[i] + 0.05 * nrng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            samples.push(GenTrainSample {
                prompt_ctx: prompt_ctx.clone(),
                e_u: fuse(&bundle(img, sem), &fusion).unwrap(),
                target,
            });
        }
    }
    let denoiser = Denoiser::new(DenoiserConfig {
        latent_dim: d,
        timesteps: 100,
        sampling_steps: 30,
        guidance_scale: 0.6,
        d_ctx,
        d_k: 12,
        hidden: 24,
        n_blocks: 2,
        seed: 99 + trial_seed,
    })
    .unwrap();
    let (trained, losses) = train_generator(
        &denoiser,
        &samples,
        &GenTrainConfig {
            lr: 1e-2,
            weight_decay: 0.0,
            batch_size: 8,
            train_user_scale: 1.0,
        },
        steps,
        trial_seed,
    )
    .unwrap();
    PlantedWorld {
        trained,
        losses,
        fusion,
        prompt_ctx,
        s_a,
        m_a,
        bundles: PlantedBundles {
            none: bundle(&e_img_a, &e_sem_a),
            img_swapped: bundle(&e_img_b, &e_sem_a),
            sem_swapped: bundle(&e_img_a, &e_sem_b),
            user_b: bundle(&e_img_b, &e_sem_b),
        },
    }
}

fn gen_set(world: &PlantedWorld, b: &UserEmbedding, base: u64, n: u64) -> FeatureSet {
    let e_u = fuse(b, &world.fusion).unwrap();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| generate(&world.trained, &world.prompt_ctx, &e_u, 1.0, base + i).unwrap())
        .collect();
    FeatureSet::new(rows, "gen").unwrap()
}

fn direction_score(set: &FeatureSet, dir: &[f64]) -> f64 {
    set.rows
        .rows()
        .into_iter()
        .map(|r| linalg::cosine(r.as_slice().unwrap(), dir).unwrap())
        .sum::<f64>()
        / set.len() as f64
}

#[test]
fn acceptance_08_end_to_end_toy_conditioning() {
    let mut sign_successes = 0;
    for trial_seed in [1u64, 2, 3, 4, 5] {
        let world = build_planted_world(trial_seed, 800);

        // (a) loss after 500 steps down >= 20% from the step-0 baseline
        let baseline: f64 = world.losses[..10].iter().sum::<f64>() / 10.0;
        let at_500: f64 = world.losses[480..500].iter().sum::<f64>() / 20.0;
        assert!(
            at_500 <= 0.8 * baseline,
            "seed {trial_seed}: loss {baseline:.2} -> {at_500:.2} is not a 20% drop by step 500"
        );

        // (b) guidance 0 is exactly e_u-independent
        let e_u_a = fuse(&world.bundles.none, &world.fusion).unwrap();
        let e_u_b = fuse(&world.bundles.user_b, &world.fusion).unwrap();
        let ga = generate(&world.trained, &world.prompt_ctx, &e_u_a, 0.0, 77).unwrap();
        let gb = generate(&world.trained, &world.prompt_ctx, &e_u_b, 0.0, 77).unwrap();
        assert_eq!(ga, gb, "seed {trial_seed}: guidance 0 must ignore e_u exactly");

        // (c) cross-user CMMD > same-user reseed CMMD
        let g_a1 = gen_set(&world, &world.bundles.none, 100 + trial_seed * 31, 16);
        let g_a2 = gen_set(&world, &world.bundles.none, 500 + trial_seed * 31, 16);
        let g_b = gen_set(&world, &world.bundles.user_b, 100 + trial_seed * 31, 16);
        let kernel = KernelConfig::median_heuristic(&g_a1.to_vecs(), &g_b.to_vecs());
        let cross = cmmd(&g_a1, &g_b, &kernel).unwrap();
        let same = cmmd(&g_a1, &g_a2, &kernel).unwrap();
        if cross > same {
            sign_successes += 1;
        }
    }
    // one-sided sign test: 5/5 successes gives p = 2^-5 = 0.03125 < 0.05
    assert!(
        sign_successes == 5,
        "cross-user CMMD exceeded same-user reseed CMMD on {sign_successes}/5 seeds; need 5/5 for p < 0.05"
    );
    println!("ACCEPTANCE 08 (end-to-end toy conditioning): PASS");
}

#[test]
fn acceptance_09_swap_direction_reproduction() {
    let mut agree = 0;
    for trial_seed in [1u64, 2, 3, 4, 5] {
        let world = build_planted_world(trial_seed, 800);
        let g_none = gen_set(&world, &world.bundles.none, 10, 12);
        let g_img = gen_set(&world, &world.bundles.img_swapped, 10, 12);
        let g_sem = gen_set(&world, &world.bundles.sem_swapped, 10, 12);

        let style_drop_img =
            direction_score(&g_none, &world.s_a) - direction_score(&g_img, &world.s_a);
        let style_drop_sem =
            direction_score(&g_none, &world.s_a) - direction_score(&g_sem, &world.s_a);
        let sem_drop_img =
            direction_score(&g_none, &world.m_a) - direction_score(&g_img, &world.m_a);
        let sem_drop_sem =
            direction_score(&g_none, &world.m_a) - direction_score(&g_sem, &world.m_a);

        if style_drop_img > style_drop_sem && sem_drop_sem > sem_drop_img {
            agree += 1;
        }
    }
    assert!(
        agree >= 3,
        "swap directions agreed on only {agree}/5 seeds; need a majority"
    );
    println!("ACCEPTANCE 09 (swap-direction reproduction): PASS ({agree}/5 seeds)");
}

// ---------------------------------------------------------------------------
// 10. Clustering direction: e_core dominates e_sem on planted identities
// ---------------------------------------------------------------------------

#[test]
fn acceptance_10_clustering_direction() {
    // 17 planted users; mid layers carry clean identity, the top layer is
    // swamped by context noise
    let users = 17;
    let per_user = 10;
    let d = 12;
    let n_layers = 8;
    let mut rng = seeds::rng(1001);
    let centers: Vec<Vec<f64>> = (0..users)
        .map(|_| {
            (0..d)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0)
                .collect()
        })
        .collect();
    let core_range = prefcond_core::probing::core_layer_spec(n_layers)
        .resolve(n_layers)
        .unwrap();
    let mut core_rows = Vec::new();
    let mut sem_rows = Vec::new();
    let mut labels = Vec::new();
    for (u, center) in centers.iter().enumerate() {
        for _ in 0..per_user {
            let t_len = 6;
            let mut acts = ndarray::Array3::zeros((n_layers + 1, t_len, d));
            for l in 0..=n_layers {
                for t in 0..t_len {
                    for j in 0..d {
                        acts[[l, t, j]] = rng.sample::<f64, _>(StandardNormal) * 0.3;
                    }
                }
            }
            // identity plant: clean in the mid layers, noisy at the top
            for &l in &core_range {
                for j in 0..d {
                    acts[[l, t_len - 1, j]] += center[j] + rng.sample::<f64, _>(StandardNormal) * 0.1;
                }
            }
            for j in 0..d {
                acts[[n_layers, t_len - 1, j]] +=
                    center[j] + rng.sample::<f64, _>(StandardNormal) * 3.0;
            }
            let acts = LayerActivations {
                activations: acts,
                token_mask: vec![true; t_len],
            };
            core_rows.push(extract_e_core(&acts).unwrap());
            sem_rows.push(extract_e_sem(&acts).unwrap());
            labels.push(format!("u{u}"));
        }
    }
    let core_set = FeatureSet::new(core_rows, "e_core").unwrap();
    let sem_set = FeatureSet::new(sem_rows, "e_sem").unwrap();
    let core_report = clustering_eval(&core_set, &labels, users, 1002).unwrap();
    let sem_report = clustering_eval(&sem_set, &labels, users, 1003).unwrap();
    let dominance = core_report.dominates(&sem_report);
    assert!(
        dominance >= 4,
        "e_core dominates e_sem on only {dominance}/6 metrics\ncore: {core_report:?}\nsem: {sem_report:?}"
    );
    println!("ACCEPTANCE 10 (clustering direction): PASS ({dominance}/6 metrics)");
}

// ---------------------------------------------------------------------------
// 11. Pipeline determinism and split disjointness
// ---------------------------------------------------------------------------

fn trimmed_config(out_dir: &str) -> RunConfig {
    let mut config = RunConfig::desk_default(out_dir, 7);
    config.dataset.users = 12;
    config.dataset.items_per_user = 10;
    config.dataset.prefbench_users = 1;
    config.encoder.epochs = 8;
    config.encoder.max_records = 80;
    config.probe.users = 5;
    config.probe.pairs_per_user = 2;
    config.probe.max_iterations = 600;
    config.probe.layer_specs = vec!["sem".into(), "core".into()];
    config.alignment.steps = 60;
    config.alignment.max_pairs = 60;
    config.conditioning.train_steps = 60;
    config.metrics.gen_users = 2;
    config.metrics.gen_prompts = 1;
    config.metrics.gen_seeds = vec![1, 2, 3];
    config
}

#[test]
fn acceptance_11_pipeline_determinism() {
    let base = tempfile::tempdir().unwrap();
    let config = trimmed_config(base.path().to_str().unwrap());

    let run_a = run_pipeline(&config).unwrap();
    let run_b = run_pipeline(&config).unwrap();
    verify_run(&run_a).unwrap();
    verify_run(&run_b).unwrap();

    // byte-identical metric reports
    for file in ["metrics.json", "swap.json", "ablation_table.json", "cluster.json", "report.txt"]
    {
        let a = std::fs::read(run_a.step_dir(Step::Eval).join(file)).unwrap();
        let b = std::fs::read(run_b.step_dir(Step::Eval).join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical-config runs");
    }

    // user-disjoint splits in every run
    for run in [&run_a, &run_b] {
        let split: prefcond_core::synth::DatasetSplit =
            prefcond_core::io::read_json(&run.step_dir(Step::GenData).join("split.json"))
                .unwrap();
        assert!(split.is_disjoint(), "split must be user-disjoint");
        let total = split.train.len() + split.val.len() + split.test.len();
        assert_eq!(total, config.dataset.users);
    }
    println!("ACCEPTANCE 11 (pipeline determinism): PASS");
}

// ---------------------------------------------------------------------------
// 12. Loss-ablation collapse diagnostic
// ---------------------------------------------------------------------------

#[test]
fn acceptance_12_loss_ablation_diagnostic() {
    // beta = 0 (point-wise only) on the pre-registered small-data run
    let point_run = loss_ablation_probe::run(&LossSpec { alpha: 1.0, beta: 0.0 }).unwrap();
    let point_report = collapse_diagnostic(&point_run.diagnostics).unwrap();
    assert!(
        point_report.collapsed(),
        "point-wise-only run must emit at least one collapse flag"
    );

    // beta = 1, alpha = 0 on the same data emits none
    let mmd_run = loss_ablation_probe::run(&LossSpec { alpha: 0.0, beta: 1.0 }).unwrap();
    let mmd_report = collapse_diagnostic(&mmd_run.diagnostics).unwrap();
    assert!(
        !mmd_report.collapsed(),
        "MMD-only run flagged {} steps; expected none",
        mmd_report.flags.len()
    );
    println!(
        "ACCEPTANCE 12 (loss-ablation diagnostic): PASS ({} point-wise flags, 0 MMD flags)",
        point_report.flags.len()
    );
}
