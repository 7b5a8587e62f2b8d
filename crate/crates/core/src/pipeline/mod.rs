//! Pipeline orchestration: a single run config drives data generation,
//! discriminator training, the probe sweep, alignment, generator training,
//! and evaluation, each persisting artifacts plus a manifest into its own
//! step directory under an append-only run directory.

mod report;
pub mod steps;

pub use report::{render_report, report};
pub use steps::{ConditioningComponents, UserEmbeddingRecord};

use crate::error::{Error, Result};
use crate::io;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetParams {
    pub users: usize,
    pub items_per_user: usize,
    pub attr_count: usize,
    pub d_img: usize,
    pub noise_sigma: f64,
    pub n_prompts: usize,
    pub attrs_min: usize,
    pub attrs_max: usize,
    pub split_ratios: (f64, f64, f64),
    pub prefbench_users: usize,
    pub prefbench_images: usize,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            users: 40,
            items_per_user: 12,
            attr_count: 50,
            d_img: 16,
            noise_sigma: 0.1,
            n_prompts: 24,
            attrs_min: 3,
            attrs_max: 8,
            split_ratios: (0.8, 0.1, 0.1),
            prefbench_users: 4,
            prefbench_images: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderParams {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_tokens_per_item: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Cap on training records (speed guard for desk runs).
    pub max_records: usize,
}

impl Default for EncoderParams {
    fn default() -> Self {
        EncoderParams {
            n_layers: 6,
            d_model: 32,
            n_tokens_per_item: 2,
            epochs: 50,
            lr: 1e-2,
            weight_decay: 1e-2,
            max_records: 240,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeParams {
    /// Users in the balanced sweep subset.
    pub users: usize,
    pub pairs_per_user: usize,
    /// Grid entries: "top_layer", "top_k:K", "range:LO-HI", "all".
    pub layer_specs: Vec<String>,
    pub max_iterations: usize,
}

impl Default for ProbeParams {
    fn default() -> Self {
        ProbeParams {
            users: 10,
            pairs_per_user: 3,
            layer_specs: vec![
                "top_layer".into(),
                "sem".into(),
                "core".into(),
                "all".into(),
            ],
            max_iterations: 2000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentParams {
    pub alpha: f64,
    pub beta: f64,
    pub d_attn: usize,
    pub d_hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_pairs: usize,
}

impl Default for AlignmentParams {
    fn default() -> Self {
        AlignmentParams {
            alpha: 0.0,
            beta: 1.0,
            d_attn: 32,
            d_hidden: 16,
            steps: 200,
            lr: 1e-3,
            batch_size: 64,
            max_pairs: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditioningParams {
    pub core_tokens: usize,
    pub d_k: usize,
    pub hidden: usize,
    pub n_blocks: usize,
    pub timesteps: usize,
    pub sampling_steps: usize,
    pub guidance_scale: f64,
    pub train_steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub prompt_tokens: usize,
}

impl Default for ConditioningParams {
    fn default() -> Self {
        ConditioningParams {
            core_tokens: 1,
            d_k: 16,
            hidden: 32,
            n_blocks: 2,
            timesteps: 100,
            sampling_steps: 30,
            guidance_scale: 0.6,
            train_steps: 300,
            lr: 1e-2,
            batch_size: 8,
            prompt_tokens: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricParams {
    pub list: Vec<String>,
    /// Users included in generation-based metrics.
    pub gen_users: usize,
    pub gen_prompts: usize,
    pub gen_seeds: Vec<u64>,
}

impl Default for MetricParams {
    fn default() -> Self {
        MetricParams {
            list: vec![
                "fid".into(),
                "cmmd".into(),
                "clip".into(),
                "prefdisc".into(),
                "cluster".into(),
            ],
            gen_users: 4,
            gen_prompts: 2,
            gen_seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

/// The single structured config that reproduces a full run.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub dataset: DatasetParams,
    pub encoder: EncoderParams,
    pub probe: ProbeParams,
    pub alignment: AlignmentParams,
    pub conditioning: ConditioningParams,
    pub metrics: MetricParams,
}

impl RunConfig {
    pub fn desk_default(out_dir: &str, seed: u64) -> Self {
        RunConfig {
            seed,
            out_dir: out_dir.to_string(),
            ..RunConfig::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::validation(format!("config parse error: {e}")))
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Seed precedence: explicit flag > PREFCOND_SEED env > config value.
    pub fn effective_seed(&self, flag: Option<u64>) -> u64 {
        if let Some(s) = flag {
            return s;
        }
        if let Ok(v) = std::env::var("PREFCOND_SEED") {
            if let Ok(parsed) = v.parse::<u64>() {
                return parsed;
            }
        }
        self.seed
    }

    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex::encode(&hasher.finalize()[..8])
    }
}

/// Pipeline steps in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Step {
    GenData,
    TrainDisc,
    ProbeSweep,
    TrainAlign,
    TrainGen,
    Eval,
}

impl Step {
    pub const ALL: [Step; 6] = [
        Step::GenData,
        Step::TrainDisc,
        Step::ProbeSweep,
        Step::TrainAlign,
        Step::TrainGen,
        Step::Eval,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Step::GenData => "gen-data",
            Step::TrainDisc => "train-disc",
            Step::ProbeSweep => "probe-sweep",
            Step::TrainAlign => "train-align",
            Step::TrainGen => "train-gen",
            Step::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Result<Step> {
        Step::ALL
            .iter()
            .find(|step| step.name() == s)
            .copied()
            .ok_or_else(|| Error::validation(format!("unknown step '{s}'")))
    }
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn step_dir(&self, step: Step) -> PathBuf {
        self.root.join(step.name())
    }

    pub fn manifest(&self, step: Step) -> PathBuf {
        self.step_dir(step).join("manifest.json")
    }

    /// Error unless the step has completed (its manifest exists).
    pub fn require_step(&self, step: Step) -> Result<()> {
        if !self.manifest(step).exists() {
            return Err(Error::MissingDependency(format!(
                "{} artifacts missing",
                step.name()
            )));
        }
        Ok(())
    }
}

/// Allocate a fresh run directory under the configured output root.
/// Run directories are append-only: reruns get a new timestamped name with
/// a sequence suffix against collisions.
pub fn allocate_run_dir(config: &RunConfig) -> Result<RunPaths> {
    let base = PathBuf::from(&config.out_dir);
    std::fs::create_dir_all(&base)?;
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    for seq in 0..10_000u32 {
        let name = format!("run-{stamp}-{seq:04}");
        let candidate = base.join(&name);
        if !candidate.exists() {
            std::fs::create_dir_all(&candidate)?;
            return Ok(RunPaths::new(candidate));
        }
    }
    Err(Error::validation("could not allocate a fresh run directory"))
}

/// Execute the pipeline from `from` onward into an existing run directory,
/// verifying that all earlier steps have left their artifacts.
pub fn run_pipeline_from(config: &RunConfig, paths: &RunPaths, from: Step) -> Result<()> {
    for step in Step::ALL.iter().take_while(|s| **s < from) {
        paths.require_step(*step)?;
    }
    for step in Step::ALL.iter().filter(|s| **s >= from) {
        match step {
            Step::GenData => steps::gen_data(config, paths)?,
            Step::TrainDisc => steps::train_disc(config, paths)?,
            Step::ProbeSweep => steps::probe_sweep_step(config, paths)?,
            Step::TrainAlign => steps::train_align(config, paths)?,
            Step::TrainGen => steps::train_gen(config, paths)?,
            Step::Eval => steps::eval_step(config, paths)?,
        }
    }
    Ok(())
}

/// Fresh end-to-end run; returns the run directory.
pub fn run_pipeline(config: &RunConfig) -> Result<RunPaths> {
    let paths = allocate_run_dir(config)?;
    run_pipeline_from(config, &paths, Step::GenData)?;
    Ok(paths)
}

/// Verify every step manifest in a run directory.
pub fn verify_run(paths: &RunPaths) -> Result<()> {
    for step in Step::ALL {
        paths.require_step(step)?;
        io::verify_manifest(&paths.step_dir(step))?;
    }
    Ok(())
}
