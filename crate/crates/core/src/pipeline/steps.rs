//! The six pipeline step implementations.

use super::{RunConfig, RunPaths, Step};
use crate::alignment::{
    collapse_diagnostic, loss_ablation_probe, train_alignment, AdapterConfig, AlignTrainConfig,
    KernelConfig, LossSpec, MLPAdapter, TextFeaturizer,
};
use crate::conditioning::{
    fuse, generate, swap_components, train_generator, Denoiser, DenoiserConfig, FusionConfig,
    FusionStrategy, GenTrainConfig, GenTrainSample, ImageEmbedder, ProjectionModel, PromptEncoder,
    SwapComponent, UserEmbedding,
};
use crate::encoder::{train_prefdisc, EncoderConfig, PrefDiscModel, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{
    clip_img_score, clustering_eval, cmmd, frechet_distance, prefdisc_accuracy,
    style_semantic_proxy, ClusteringReport, FeatureSet,
};
use crate::io::{self, Manifest};
use crate::probing::{
    extract_e_core, extract_e_sem, probe_sweep, core_layer_spec, sem_layer_spec, LayerSpec,
    PoolingStrategy, ProbeConfig, SweepSample,
};
use crate::seeds;
use crate::synth::{
    build_pref_dataset, build_prefbench, build_taxonomy, split_by_user, DatasetSplit,
    PreferenceRecord, TaxonomyConfig, UserDataset, VQARecord, World, WorldConfig,
};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

const CKPT_VERSION: u32 = 1;

fn canonical_query(user_id: &str) -> String {
    format!("Would user {user_id} like this image?")
}

/// Parse a grid entry: "top_layer" | "top_k:K" | "range:LO-HI" | "all",
/// plus the derived labels "sem" and "core".
fn parse_layer_spec(s: &str, n_layers: usize) -> Result<LayerSpec> {
    match s {
        "top_layer" => Ok(LayerSpec::TopLayer),
        "all" | "all_layers" => Ok(LayerSpec::All),
        "sem" => Ok(sem_layer_spec(n_layers)),
        "core" => Ok(core_layer_spec(n_layers)),
        other => {
            if let Some(k) = other.strip_prefix("top_k:") {
                let k: usize = k
                    .parse()
                    .map_err(|_| Error::validation(format!("bad top_k spec '{other}'")))?;
                Ok(LayerSpec::TopK(k))
            } else if let Some(r) = other.strip_prefix("range:") {
                let (lo, hi) = r
                    .split_once('-')
                    .ok_or_else(|| Error::validation(format!("bad range spec '{other}'")))?;
                let lo: usize = lo
                    .parse()
                    .map_err(|_| Error::validation(format!("bad range spec '{other}'")))?;
                let hi: usize = hi
                    .parse()
                    .map_err(|_| Error::validation(format!("bad range spec '{other}'")))?;
                Ok(LayerSpec::Range(lo, hi))
            } else {
                Err(Error::validation(format!("unknown layer spec '{other}'")))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// step 1: gen-data
// ---------------------------------------------------------------------------

pub fn gen_data(config: &RunConfig, paths: &RunPaths) -> Result<()> {
    let dir = paths.step_dir(Step::GenData);
    std::fs::create_dir_all(&dir)?;
    let seed = config.seed;
    let taxonomy = build_taxonomy(&TaxonomyConfig::default())?;
    let world = World::new(
        taxonomy,
        WorldConfig {
            d_img: config.dataset.d_img,
            noise_sigma: config.dataset.noise_sigma,
            n_prompts: config.dataset.n_prompts,
            attrs_per_item: (config.dataset.attrs_min, config.dataset.attrs_max),
            seed: seeds::child_seed(seed, "world", 0),
        },
    );
    let dataset = build_pref_dataset(
        &world,
        config.dataset.users,
        config.dataset.items_per_user,
        config.dataset.attr_count,
        seeds::child_seed(seed, "dataset", 0),
    )?;
    let ids: Vec<String> = dataset.iter().map(|u| u.profile.user_id.clone()).collect();
    let split = split_by_user(&ids, config.dataset.split_ratios, seeds::child_seed(seed, "split", 0))?;
    let bench = build_prefbench(
        &dataset,
        &split.test,
        config.dataset.prefbench_users.min(split.test.len()),
        config.dataset.prefbench_images,
        seeds::child_seed(seed, "bench", 0),
    )?;

    io::write_json(&dir.join("world.json"), &world)?;
    io::write_jsonl(&dir.join("dataset.jsonl"), &dataset)?;
    io::write_json(&dir.join("split.json"), &split)?;
    io::write_jsonl(&dir.join("prefbench.jsonl"), &bench)?;
    io::write_json(&dir.join("run_config.json"), config)?;

    let mut m = Manifest::new(Step::GenData.name(), seed, &config.config_hash());
    m.count("users", dataset.len() as u64);
    m.count(
        "records",
        dataset.iter().map(|u| u.records.len() as u64).sum(),
    );
    m.count("bench_users", bench.len() as u64);
    for f in [
        "world.json",
        "dataset.jsonl",
        "split.json",
        "prefbench.jsonl",
        "run_config.json",
    ] {
        m.record(&dir, f)?;
    }
    m.write(&dir)?;
    Ok(())
}

fn load_world(paths: &RunPaths) -> Result<World> {
    io::read_json(&paths.step_dir(Step::GenData).join("world.json"))
}

fn load_dataset(paths: &RunPaths) -> Result<Vec<UserDataset>> {
    io::read_jsonl(&paths.step_dir(Step::GenData).join("dataset.jsonl"))
}

fn load_split(paths: &RunPaths) -> Result<DatasetSplit> {
    io::read_json(&paths.step_dir(Step::GenData).join("split.json"))
}

// ---------------------------------------------------------------------------
// step 2: train-disc
// ---------------------------------------------------------------------------

pub fn train_disc(config: &RunConfig, paths: &RunPaths) -> Result<()> {
    paths.require_step(Step::GenData)?;
    let dir = paths.step_dir(Step::TrainDisc);
    std::fs::create_dir_all(&dir)?;
    let dataset = load_dataset(paths)?;
    let split = load_split(paths)?;
    let train_ids: BTreeSet<&String> = split.train.iter().collect();
    let mut records: Vec<VQARecord> = dataset
        .iter()
        .filter(|u| train_ids.contains(&u.profile.user_id))
        .flat_map(|u| u.records.iter().cloned())
        .collect();
    records.truncate(config.encoder.max_records);

    let enc_config = EncoderConfig {
        n_layers: config.encoder.n_layers,
        d_model: config.encoder.d_model,
        n_tokens_per_item: config.encoder.n_tokens_per_item,
        d_img: config.dataset.d_img,
        seed: seeds::child_seed(config.seed, "encoder", 0),
    };
    let model = PrefDiscModel::new(
        enc_config,
        TrainConfig {
            lr: config.encoder.lr,
            weight_decay: config.encoder.weight_decay,
            ..TrainConfig::default()
        },
    )?;
    let (trained, report) = train_prefdisc(
        &model,
        &records,
        config.encoder.epochs,
        seeds::child_seed(config.seed, "disc_train", 0),
    )?;

    io::save_checkpoint(&dir.join("prefdisc.ckpt"), "prefdisc", CKPT_VERSION, &trained)?;
    io::write_json(&dir.join("train_report.json"), &report)?;

    let mut m = Manifest::new(Step::TrainDisc.name(), config.seed, &config.config_hash());
    m.count("train_records", records.len() as u64);
    m.count("epochs", config.encoder.epochs as u64);
    m.record(&dir, "prefdisc.ckpt")?;
    m.record(&dir, "train_report.json")?;
    m.write(&dir)?;
    Ok(())
}

fn load_prefdisc(paths: &RunPaths) -> Result<PrefDiscModel> {
    io::load_checkpoint(
        &paths.step_dir(Step::TrainDisc).join("prefdisc.ckpt"),
        "prefdisc",
        CKPT_VERSION,
    )
}

// ---------------------------------------------------------------------------
// step 3: probe-sweep
// ---------------------------------------------------------------------------

/// Per-record embedding extraction persisted for the later steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub user_id: String,
    pub record_index: usize,
    pub split: String,
    pub e_sem: Vec<f64>,
    pub e_core: Vec<f64>,
    pub attribute_text: String,
    pub prompt_id: u64,
    pub answer: u8,
}

pub fn probe_sweep_step(config: &RunConfig, paths: &RunPaths) -> Result<()> {
    paths.require_step(Step::GenData)?;
    paths.require_step(Step::TrainDisc)?;
    let dir = paths.step_dir(Step::ProbeSweep);
    std::fs::create_dir_all(&dir)?;
    let world = load_world(paths)?;
    let dataset = load_dataset(paths)?;
    let split = load_split(paths)?;
    let model = load_prefdisc(paths)?;
    let seed = config.seed;

    // balanced prompt-matched pairs for the sweep subset
    let mut rng = seeds::child_rng(seed, "sweep_pairs", 0);
    let train_users: Vec<&UserDataset> = split
        .train
        .iter()
        .filter_map(|id| dataset.iter().find(|u| &u.profile.user_id == id))
        .take(config.probe.users)
        .collect();
    let mut samples = Vec::new();
    let mut pair_id = 0usize;
    for user in &train_users {
        let profile = &user.profile;
        let history = &user.records[0].history;
        let query = canonical_query(&profile.user_id);
        for _ in 0..config.probe.pairs_per_user {
            let prompt = rng.gen_range(0..world.config.n_prompts as u64);
            let pick = |pool: &BTreeSet<String>, rng: &mut rand_chacha::ChaCha8Rng| {
                let mut v: Vec<&String> = pool.iter().collect();
                v.shuffle(rng);
                let count = rng.gen_range(3..=6usize).min(v.len()).max(1);
                v[..count].iter().map(|s| (*s).clone()).collect::<BTreeSet<String>>()
            };
            let pos_attrs = pick(&profile.liked, &mut rng);
            let neg_attrs = pick(&profile.disliked, &mut rng);
            let pos = world.render_item(prompt, &pos_attrs, seeds::child_seed(seed, "sweep_pos", pair_id as u64))?;
            let neg = world.render_item(prompt, &neg_attrs, seeds::child_seed(seed, "sweep_neg", pair_id as u64))?;
            for (item, label) in [(pos, 1u8), (neg, 0u8)] {
                let acts = model.encode(history, &query, &item)?;
                samples.push(SweepSample {
                    acts,
                    label,
                    user_id: profile.user_id.clone(),
                    pair_id,
                });
            }
            pair_id += 1;
        }
    }
    let layer_specs: Vec<LayerSpec> = config
        .probe
        .layer_specs
        .iter()
        .map(|s| parse_layer_spec(s, config.encoder.n_layers))
        .collect::<Result<_>>()?;
    let probe_config = ProbeConfig {
        max_iterations: config.probe.max_iterations,
        seed: seeds::child_seed(seed, "probe", 0),
        ..ProbeConfig::default()
    };
    let sweep = probe_sweep(&samples, &layer_specs, &PoolingStrategy::ALL, &probe_config)?;
    std::fs::write(dir.join("sweep.csv"), sweep.to_csv())?;
    io::write_json(&dir.join("sweep.json"), &sweep)?;

    // per-record e_sem / e_core extraction for alignment, generation, and
    // clustering
    let split_of = |id: &String| -> &'static str {
        if split.train.contains(id) {
            "train"
        } else if split.val.contains(id) {
            "val"
        } else {
            "test"
        }
    };
    let mut embeddings = Vec::new();
    for user in &dataset {
        let query = canonical_query(&user.profile.user_id);
        for (i, rec) in user.records.iter().enumerate() {
            let acts = model.encode(&rec.history, &query, &rec.candidate)?;
            embeddings.push(EmbeddingRecord {
                user_id: user.profile.user_id.clone(),
                record_index: i,
                split: split_of(&user.profile.user_id).to_string(),
                e_sem: extract_e_sem(&acts)?,
                e_core: extract_e_core(&acts)?,
                attribute_text: rec.attribute_text.clone(),
                prompt_id: rec.candidate.prompt_id,
                answer: rec.answer,
            });
        }
    }
    io::write_jsonl(&dir.join("embeddings.jsonl"), &embeddings)?;

    let mut m = Manifest::new(Step::ProbeSweep.name(), seed, &config.config_hash());
    m.count("sweep_samples", samples.len() as u64);
    m.count("sweep_rows", sweep.rows.len() as u64);
    m.count("embedding_records", embeddings.len() as u64);
    for f in ["sweep.csv", "sweep.json", "embeddings.jsonl"] {
        m.record(&dir, f)?;
    }
    m.write(&dir)?;
    Ok(())
}

fn load_embeddings(paths: &RunPaths) -> Result<Vec<EmbeddingRecord>> {
    io::read_jsonl(&paths.step_dir(Step::ProbeSweep).join("embeddings.jsonl"))
}

// ---------------------------------------------------------------------------
// step 4: train-align
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationDiagnostics {
    pub pointwise_flags: usize,
    pub mmd_flags: usize,
}

pub fn train_align(config: &RunConfig, paths: &RunPaths) -> Result<()> {
    paths.require_step(Step::ProbeSweep)?;
    let dir = paths.step_dir(Step::TrainAlign);
    std::fs::create_dir_all(&dir)?;
    let seed = config.seed;
    let embeddings = load_embeddings(paths)?;
    let featurizer = TextFeaturizer::new(config.alignment.d_attn, seeds::child_seed(seed, "text", 0));
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = embeddings
        .iter()
        .filter(|e| e.split == "train" && !e.attribute_text.is_empty())
        .take(config.alignment.max_pairs)
        .map(|e| (e.e_sem.clone(), featurizer.embed(&e.attribute_text)))
        .collect();
    if pairs.len() < 2 {
        return Err(Error::validation("not enough alignment pairs in the train split"));
    }

    let adapter_cfg = AdapterConfig::desk(
        config.encoder.d_model,
        config.alignment.d_hidden,
        config.alignment.d_attn,
        seeds::child_seed(seed, "adapter", 0),
    );
    let adapter = MLPAdapter::new(adapter_cfg);
    let init_outputs: Vec<Vec<f64>> = pairs
        .iter()
        .map(|(x, _)| adapter.forward_eval(x))
        .collect::<Result<_>>()?;
    let targets: Vec<Vec<f64>> = pairs.iter().map(|(_, t)| t.clone()).collect();
    let kernel = KernelConfig::median_heuristic(&init_outputs, &targets);
    let train_cfg = AlignTrainConfig {
        lr: config.alignment.lr,
        weight_decay: 0.0,
        batch_size: config.alignment.batch_size,
    };
    let spec = LossSpec {
        alpha: config.alignment.alpha,
        beta: config.alignment.beta,
    };
    let main_run = train_alignment(
        &pairs,
        &spec,
        &kernel,
        &train_cfg,
        &adapter,
        config.alignment.steps,
        seeds::child_seed(seed, "align_main", 0),
    )?;
    // point-wise variant for the ablation table
    let point_run = train_alignment(
        &pairs,
        &LossSpec { alpha: 1.0, beta: 0.0 },
        &kernel,
        &train_cfg,
        &adapter,
        config.alignment.steps,
        seeds::child_seed(seed, "align_point", 0),
    )?;

    // the pre-registered small-data loss-ablation probe
    let probe_point = loss_ablation_probe::run(&LossSpec { alpha: 1.0, beta: 0.0 })?;
    let probe_mmd = loss_ablation_probe::run(&LossSpec { alpha: 0.0, beta: 1.0 })?;
    let ablation = AblationDiagnostics {
        pointwise_flags: collapse_diagnostic(&probe_point.diagnostics)?.flags.len(),
        mmd_flags: collapse_diagnostic(&probe_mmd.diagnostics)?.flags.len(),
    };

    io::save_checkpoint(&dir.join("adapter.ckpt"), "adapter", CKPT_VERSION, &main_run.adapter)?;
    io::save_checkpoint(
        &dir.join("adapter_point.ckpt"),
        "adapter",
        CKPT_VERSION,
        &point_run.adapter,
    )?;
    io::save_checkpoint(
        &dir.join("adapter_init.ckpt"),
        "adapter",
        CKPT_VERSION,
        &adapter,
    )?;
    io::write_jsonl(&dir.join("diagnostics.jsonl"), &main_run.diagnostics)?;
    io::write_json(&dir.join("kernel.json"), &kernel)?;
    io::write_json(&dir.join("ablation.json"), &ablation)?;

    let mut m = Manifest::new(Step::TrainAlign.name(), seed, &config.config_hash());
    m.count("pairs", pairs.len() as u64);
    m.count("steps", config.alignment.steps as u64);
    for f in [
        "adapter.ckpt",
        "adapter_point.ckpt",
        "adapter_init.ckpt",
        "diagnostics.jsonl",
        "kernel.json",
        "ablation.json",
    ] {
        m.record(&dir, f)?;
    }
    m.write(&dir)?;
    Ok(())
}

fn load_adapter(paths: &RunPaths, name: &str) -> Result<MLPAdapter> {
    io::load_checkpoint(
        &paths.step_dir(Step::TrainAlign).join(name),
        "adapter",
        CKPT_VERSION,
    )
}

// ---------------------------------------------------------------------------
// step 5: train-gen
// ---------------------------------------------------------------------------

/// One user's conditioning bundle, persisted for generation and swapping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserEmbeddingRecord {
    pub user_id: String,
    pub split: String,
    pub e_sem: Vec<f64>,
    pub e_core: Vec<f64>,
    pub bundle: UserEmbedding,
}

/// Mean of a set of vectors.
fn mean_vec(rows: &[&Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut out = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            out[j] += r[j];
        }
    }
    let inv = 1.0 / rows.len() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

/// Conditioning components derived from the run seed; persisted so the CLI
/// can rebuild bundles outside the pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditioningComponents {
    pub projection: ProjectionModel,
    pub image_embedder: ImageEmbedder,
    pub prompt_encoder: PromptEncoder,
    pub fusion: FusionConfig,
}

pub fn build_components(config: &RunConfig) -> ConditioningComponents {
    let seed = config.seed;
    ConditioningComponents {
        projection: ProjectionModel::new(
            config.encoder.d_model,
            config.conditioning.core_tokens,
            config.alignment.d_attn,
            seeds::child_seed(seed, "core_proj", 0),
        ),
        image_embedder: ImageEmbedder::new(
            config.dataset.d_img,
            config.alignment.d_attn,
            seeds::child_seed(seed, "img_embed", 0),
        ),
        prompt_encoder: PromptEncoder::new(
            config.dataset.d_img,
            config.alignment.d_attn,
            config.conditioning.prompt_tokens,
            seeds::child_seed(seed, "prompt_enc", 0),
        ),
        fusion: FusionConfig::new(FusionStrategy::Concat, config.alignment.d_attn),
    }
}

/// Build one user's bundle from their embedding records and liked anchor.
fn build_bundle(
    components: &ConditioningComponents,
    adapter: &MLPAdapter,
    user: &UserDataset,
    records: &[&EmbeddingRecord],
) -> Result<UserEmbeddingRecord> {
    let e_sem = mean_vec(&records.iter().map(|r| &r.e_sem).collect::<Vec<_>>());
    let e_core = mean_vec(&records.iter().map(|r| &r.e_core).collect::<Vec<_>>());
    let e_sem_hat = adapter.forward_eval(&e_sem)?;
    let e_core_tokens = components.projection.project(&e_core)?;
    // anchor: the liked record with the highest annotation margin
    let anchor = user
        .records
        .iter()
        .filter(|r| r.answer == 1)
        .max_by_key(|r| crate::synth::annotate_margin(&user.profile, &r.candidate))
        .ok_or_else(|| Error::validation(format!("user {} has no liked record", user.profile.user_id)))?;
    let e_img = components.image_embedder.embed_image(&PreferenceRecord {
        item: anchor.candidate.clone(),
        label: 1,
    })?;
    Ok(UserEmbeddingRecord {
        user_id: user.profile.user_id.clone(),
        split: records[0].split.clone(),
        e_sem,
        e_core,
        bundle: UserEmbedding {
            e_sem_hat,
            e_core_tokens,
            e_img,
        },
    })
}

pub fn train_gen(config: &RunConfig, paths: &RunPaths) -> Result<()> {
    paths.require_step(Step::TrainAlign)?;
    let dir = paths.step_dir(Step::TrainGen);
    std::fs::create_dir_all(&dir)?;
    let seed = config.seed;
    let world = load_world(paths)?;
    let dataset = load_dataset(paths)?;
    let embeddings = load_embeddings(paths)?;
    let adapter = load_adapter(paths, "adapter.ckpt")?;
    let components = build_components(config);

    let mut user_records = Vec::new();
    for user in &dataset {
        let recs: Vec<&EmbeddingRecord> = embeddings
            .iter()
            .filter(|e| e.user_id == user.profile.user_id)
            .collect();
        if recs.is_empty() {
            continue;
        }
        user_records.push(build_bundle(&components, &adapter, user, &recs)?);
    }

    // training samples: liked records of train users, supervised by the
    // liked image's features
    let mut samples = Vec::new();
    for ur in user_records.iter().filter(|u| u.split == "train") {
        let user = dataset
            .iter()
            .find(|u| u.profile.user_id == ur.user_id)
            .expect("bundle built from dataset");
        let e_u = fuse(&ur.bundle, &components.fusion)?;
        for rec in user.records.iter().filter(|r| r.answer == 1) {
            let prompt_ctx = components
                .prompt_encoder
                .encode(&world.semantic_factor(rec.candidate.prompt_id))?;
            samples.push(GenTrainSample {
                prompt_ctx,
                e_u: e_u.clone(),
                target: rec.candidate.features.clone(),
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::validation("no liked training samples for the generator"));
    }

    let denoiser_cfg = DenoiserConfig {
        latent_dim: config.dataset.d_img,
        timesteps: config.conditioning.timesteps,
        sampling_steps: config.conditioning.sampling_steps,
        guidance_scale: config.conditioning.guidance_scale,
        d_ctx: config.alignment.d_attn,
        d_k: config.conditioning.d_k,
        hidden: config.conditioning.hidden,
        n_blocks: config.conditioning.n_blocks,
        seed: seeds::child_seed(seed, "denoiser", 0),
    };
    let denoiser = Denoiser::new(denoiser_cfg)?;
    let (trained, losses) = train_generator(
        &denoiser,
        &samples,
        &GenTrainConfig {
            lr: config.conditioning.lr,
            weight_decay: 0.0,
            batch_size: config.conditioning.batch_size,
            train_user_scale: 1.0,
        },
        config.conditioning.train_steps,
        seeds::child_seed(seed, "gen_train", 0),
    )?;

    io::save_checkpoint(&dir.join("denoiser.ckpt"), "denoiser", CKPT_VERSION, &trained)?;
    io::write_json(&dir.join("gen_losses.json"), &losses)?;
    io::write_jsonl(&dir.join("user_embeddings.jsonl"), &user_records)?;
    io::write_json(&dir.join("components.json"), &components)?;

    let mut m = Manifest::new(Step::TrainGen.name(), seed, &config.config_hash());
    m.count("train_samples", samples.len() as u64);
    m.count("user_bundles", user_records.len() as u64);
    for f in [
        "denoiser.ckpt",
        "gen_losses.json",
        "user_embeddings.jsonl",
        "components.json",
    ] {
        m.record(&dir, f)?;
    }
    m.write(&dir)?;
    Ok(())
}

pub fn load_denoiser(paths: &RunPaths) -> Result<Denoiser> {
    io::load_checkpoint(
        &paths.step_dir(Step::TrainGen).join("denoiser.ckpt"),
        "denoiser",
        CKPT_VERSION,
    )
}

pub fn load_user_embeddings(paths: &RunPaths) -> Result<Vec<UserEmbeddingRecord>> {
    io::read_jsonl(&paths.step_dir(Step::TrainGen).join("user_embeddings.jsonl"))
}

pub fn load_components(paths: &RunPaths) -> Result<ConditioningComponents> {
    io::read_json(&paths.step_dir(Step::TrainGen).join("components.json"))
}

// ---------------------------------------------------------------------------
// step 6: eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SwapTableRow {
    pub swapped: String,
    pub style: f64,
    pub semantic: f64,
    pub cmmd: f64,
    pub clip: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTableRow {
    pub e_img: bool,
    pub e_sem: bool,
    pub e_core: bool,
    pub loss: String,
    pub cmmd: Option<f64>,
    pub clip: Option<f64>,
    pub style: Option<f64>,
    pub semantic: Option<f64>,
    pub prefdisc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterComparison {
    pub e_core: ClusteringReport,
    pub e_sem: ClusteringReport,
    pub core_dominates_on: usize,
}

struct EvalContext {
    world: World,
    dataset: Vec<UserDataset>,
    model: PrefDiscModel,
    denoiser: Denoiser,
    components: ConditioningComponents,
    user_records: Vec<UserEmbeddingRecord>,
    gen_users: Vec<String>,
    prompts: Vec<u64>,
    seeds: Vec<u64>,
    guidance: f64,
}

impl EvalContext {
    fn user_record(&self, id: &str) -> Result<&UserEmbeddingRecord> {
        self.user_records
            .iter()
            .find(|u| u.user_id == id)
            .ok_or_else(|| Error::validation(format!("no embedding bundle for user {id}")))
    }

    fn user_dataset(&self, id: &str) -> Result<&UserDataset> {
        self.dataset
            .iter()
            .find(|u| u.profile.user_id == id)
            .ok_or_else(|| Error::validation(format!("no dataset entry for user {id}")))
    }

    /// Generate latents for a bundle over this context's prompts and seeds.
    fn generate_set(&self, bundle: &UserEmbedding, tag: &str) -> Result<FeatureSet> {
        let e_u = fuse(bundle, &self.components.fusion)?;
        let mut rows = Vec::new();
        for &prompt in &self.prompts {
            let prompt_ctx = self
                .components
                .prompt_encoder
                .encode(&self.world.semantic_factor(prompt))?;
            for &s in &self.seeds {
                rows.push(generate(&self.denoiser, &prompt_ctx, &e_u, self.guidance, s)?);
            }
        }
        FeatureSet::new(rows, tag)
    }

    /// Liked-reference features for a set of users.
    fn liked_references(&self, users: &[String], tag: &str) -> Result<FeatureSet> {
        let mut rows = Vec::new();
        for id in users {
            let user = self.user_dataset(id)?;
            for rec in user.records.iter().filter(|r| r.answer == 1) {
                rows.push(rec.candidate.features.clone());
            }
        }
        FeatureSet::new(rows, tag)
    }

    /// Pairwise discrimination of generated latents against disliked
    /// references, via the trained discriminator.
    fn prefdisc_on_generated(&self, user_id: &str, gens: &FeatureSet) -> Result<f64> {
        let user = self.user_dataset(user_id)?;
        let query = canonical_query(user_id);
        let history = &user.records[0].history;
        let disliked: Vec<&VQARecord> =
            user.records.iter().filter(|r| r.answer == 0).collect();
        if disliked.is_empty() {
            return Err(Error::validation("no disliked references"));
        }
        let mut wins = 0.0;
        let mut total = 0.0;
        for row in gens.rows.rows() {
            let candidate = crate::synth::FeatureImage {
                features: row.to_vec(),
                prompt_id: 0,
                active_attributes: BTreeSet::new(),
                style_factor: vec![0.0; row.len()],
                semantic_factor: vec![0.0; row.len()],
            };
            let p_gen = self.model.predict_preference(history, &query, &candidate)?;
            for neg in &disliked {
                let p_neg = self
                    .model
                    .predict_preference(history, &query, &neg.candidate)?;
                wins += if p_gen > p_neg {
                    1.0
                } else if p_gen == p_neg {
                    0.5
                } else {
                    0.0
                };
                total += 1.0;
            }
        }
        Ok(wins / total)
    }
}

/// Zero out de-selected components of a bundle (layout is preserved so the
/// concat geometry stays fixed across ablation rows).
fn mask_bundle(bundle: &UserEmbedding, img: bool, sem: bool, core: bool) -> UserEmbedding {
    let mut out = bundle.clone();
    if !img {
        out.e_img.iter_mut().for_each(|v| *v = 0.0);
    }
    if !sem {
        out.e_sem_hat.iter_mut().for_each(|v| *v = 0.0);
    }
    if !core {
        out.e_core_tokens.fill(0.0);
    }
    out
}

pub fn eval_step(config: &RunConfig, paths: &RunPaths) -> Result<()> {
    paths.require_step(Step::TrainGen)?;
    let dir = paths.step_dir(Step::Eval);
    std::fs::create_dir_all(&dir)?;
    let seed = config.seed;
    let split = load_split(paths)?;
    let embeddings = load_embeddings(paths)?;
    let adapter = load_adapter(paths, "adapter.ckpt")?;
    let adapter_point = load_adapter(paths, "adapter_point.ckpt")?;
    let adapter_init = load_adapter(paths, "adapter_init.ckpt")?;

    let user_records = load_user_embeddings(paths)?;
    // generation users: test split first, then val, then train, in split
    // order, up to the configured count
    let ordered: Vec<String> = split
        .test
        .iter()
        .chain(split.val.iter())
        .chain(split.train.iter())
        .cloned()
        .collect();
    let gen_users: Vec<String> = ordered
        .iter()
        .filter(|id| user_records.iter().any(|u| &u.user_id == *id))
        .take(config.metrics.gen_users)
        .cloned()
        .collect();
    if gen_users.len() < 2 {
        return Err(Error::validation("evaluation needs at least 2 users with bundles"));
    }
    let ctx = EvalContext {
        world: load_world(paths)?,
        dataset: load_dataset(paths)?,
        model: load_prefdisc(paths)?,
        denoiser: load_denoiser(paths)?,
        components: load_components(paths)?,
        user_records,
        prompts: (0..config.metrics.gen_prompts as u64).collect(),
        seeds: config.metrics.gen_seeds.clone(),
        guidance: config.conditioning.guidance_scale,
        gen_users,
    };

    let want = |name: &str| config.metrics.list.iter().any(|m| m == name);
    let mut metric_rows: Vec<MetricRow> = Vec::new();
    let push = |rows: &mut Vec<MetricRow>, method: &str, metric: &str, value: f64| {
        rows.push(MetricRow {
            method: method.to_string(),
            metric: metric.to_string(),
            value,
            seed,
        });
    };

    // headline generation metrics
    let mut gen_rows = Vec::new();
    for id in &ctx.gen_users {
        let ur = ctx.user_record(id)?;
        let set = ctx.generate_set(&ur.bundle, &format!("gen-{id}"))?;
        gen_rows.extend(set.to_vecs());
    }
    let generated = FeatureSet::new(gen_rows, "generated")?;
    let references = ctx.liked_references(&ctx.gen_users.clone(), "liked-refs")?;
    let eval_kernel = KernelConfig::median_heuristic(&generated.to_vecs(), &references.to_vecs());

    if want("fid") {
        push(&mut metric_rows, "prefgen", "fid", frechet_distance(&generated, &references)?);
    }
    if want("cmmd") {
        push(&mut metric_rows, "prefgen", "cmmd", cmmd(&generated, &references, &eval_kernel)?);
    }
    if want("clip") {
        push(&mut metric_rows, "prefgen", "clip_img", clip_img_score(&generated, &references)?);
    }
    if want("prefdisc") {
        let bench: Vec<crate::synth::BenchUser> =
            io::read_jsonl(&paths.step_dir(Step::GenData).join("prefbench.jsonl"))?;
        let queries: Vec<crate::synth::BenchQuery> =
            bench.into_iter().flat_map(|b| b.queries).collect();
        let (acc, _) = prefdisc_accuracy(&ctx.model, &queries)?;
        push(&mut metric_rows, "prefgen", "prefdisc", acc);
        // pointwise accuracy over all held-out records; steadier than the
        // handful of benchmark pairs a desk-scale test split yields
        let test_records: Vec<VQARecord> = ctx
            .dataset
            .iter()
            .filter(|u| split.test.contains(&u.profile.user_id))
            .flat_map(|u| u.records.iter().cloned())
            .collect();
        if test_records.iter().any(|r| r.answer == 1)
            && test_records.iter().any(|r| r.answer == 0)
        {
            let (_, acc) = crate::encoder::evaluate(&ctx.model, &test_records)?;
            push(&mut metric_rows, "prefgen", "prefdisc_pointwise", acc);
        }
    }

    // clustering comparison: e_core vs e_sem over all users' records
    let mut cluster_cmp = None;
    if want("cluster") {
        let labels: Vec<String> = embeddings.iter().map(|e| e.user_id.clone()).collect();
        let k = labels.iter().collect::<BTreeSet<_>>().len();
        let core_set = FeatureSet::new(
            embeddings.iter().map(|e| e.e_core.clone()).collect(),
            "e_core",
        )?;
        let sem_set = FeatureSet::new(
            embeddings.iter().map(|e| e.e_sem.clone()).collect(),
            "e_sem",
        )?;
        let core_report = clustering_eval(&core_set, &labels, k, seeds::child_seed(seed, "cluster", 0))?;
        let sem_report = clustering_eval(&sem_set, &labels, k, seeds::child_seed(seed, "cluster", 1))?;
        push(&mut metric_rows, "e_core", "cluster_ari", core_report.ari);
        push(&mut metric_rows, "e_sem", "cluster_ari", sem_report.ari);
        cluster_cmp = Some(ClusterComparison {
            core_dominates_on: core_report.dominates(&sem_report),
            e_core: core_report,
            e_sem: sem_report,
        });
    }

    // swap table over the first two generation users
    let user_a = ctx.user_record(&ctx.gen_users[0])?.clone();
    let user_b = ctx.user_record(&ctx.gen_users[1])?.clone();
    let profile_a = ctx.user_dataset(&user_a.user_id)?.profile.clone();
    let refs_a = ctx.liked_references(&[user_a.user_id.clone()], "refs-a")?;
    let mut swap_rows = Vec::new();
    for (label, bundle) in [
        ("none", user_a.bundle.clone()),
        ("sem", swap_components(&user_a.bundle, &user_b.bundle, SwapComponent::Sem)?),
        ("img", swap_components(&user_a.bundle, &user_b.bundle, SwapComponent::Img)?),
        ("core", swap_components(&user_a.bundle, &user_b.bundle, SwapComponent::Core)?),
    ] {
        let set = ctx.generate_set(&bundle, &format!("swap-{label}"))?;
        let (mut style, mut semantic) = (0.0, 0.0);
        for &p in &ctx.prompts {
            let (s, m) = style_semantic_proxy(&set, &ctx.world, &profile_a, p)?;
            style += s / ctx.prompts.len() as f64;
            semantic += m / ctx.prompts.len() as f64;
        }
        swap_rows.push(SwapTableRow {
            swapped: label.to_string(),
            style,
            semantic,
            cmmd: cmmd(&set, &refs_a, &eval_kernel)?,
            clip: clip_img_score(&set, &refs_a)?,
        });
    }

    // ablation table (component and loss grid)
    let grid: [(bool, bool, bool, &str, &MLPAdapter); 6] = [
        (true, false, false, "-", &adapter_init),
        (true, true, true, "-", &adapter_init),
        (false, true, false, "mmd", &adapter),
        (false, true, true, "mmd", &adapter),
        (true, true, true, "mse+cos", &adapter_point),
        (true, true, true, "mmd", &adapter),
    ];
    let mut ablation_rows = Vec::new();
    for (img, sem, core, loss, row_adapter) in grid {
        let mut rows = Vec::new();
        let mut style_acc = 0.0;
        let mut sem_acc = 0.0;
        let mut pref_acc = 0.0;
        for id in &ctx.gen_users {
            let ur = ctx.user_record(id)?;
            let mut bundle = ur.bundle.clone();
            bundle.e_sem_hat = row_adapter.forward_eval(&ur.e_sem)?;
            let bundle = mask_bundle(&bundle, img, sem, core);
            let set = ctx.generate_set(&bundle, "ablation")?;
            let profile = ctx.user_dataset(id)?.profile.clone();
            let (s, m) = style_semantic_proxy(&set, &ctx.world, &profile, ctx.prompts[0])?;
            style_acc += s / ctx.gen_users.len() as f64;
            sem_acc += m / ctx.gen_users.len() as f64;
            pref_acc += ctx.prefdisc_on_generated(id, &set)? / ctx.gen_users.len() as f64;
            rows.extend(set.to_vecs());
        }
        let set = FeatureSet::new(rows, "ablation")?;
        ablation_rows.push(AblationTableRow {
            e_img: img,
            e_sem: sem,
            e_core: core,
            loss: loss.to_string(),
            cmmd: Some(cmmd(&set, &references, &eval_kernel)?),
            clip: Some(clip_img_score(&set, &references)?),
            style: Some(style_acc),
            semantic: Some(sem_acc),
            prefdisc: Some(pref_acc),
        });
    }

    io::write_json(&dir.join("metrics.json"), &metric_rows)?;
    io::write_json(&dir.join("swap.json"), &swap_rows)?;
    io::write_json(&dir.join("ablation_table.json"), &ablation_rows)?;
    if let Some(c) = &cluster_cmp {
        io::write_json(&dir.join("cluster.json"), c)?;
    }
    let report_text = super::report::render_report_parts(
        &metric_rows,
        &swap_rows,
        &ablation_rows,
        cluster_cmp.as_ref(),
        paths,
    )?;
    std::fs::write(dir.join("report.txt"), &report_text)?;

    let mut m = Manifest::new(Step::Eval.name(), seed, &config.config_hash());
    m.count("metric_rows", metric_rows.len() as u64);
    m.count("generated", generated.len() as u64);
    m.record(&dir, "metrics.json")?;
    m.record(&dir, "swap.json")?;
    m.record(&dir, "ablation_table.json")?;
    if cluster_cmp.is_some() {
        m.record(&dir, "cluster.json")?;
    }
    m.record(&dir, "report.txt")?;
    m.write(&dir)?;
    Ok(())
}
