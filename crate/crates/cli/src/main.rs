//! `prefcond`: pipeline driver for preference-conditioned generation on
//! surrogate models. Steps can run end to end from one config or be invoked
//! individually against an existing run directory.

use clap::{Parser, Subcommand};
use prefcond_core::conditioning::{fuse, generate, swap_components, SwapComponent};
use prefcond_core::error::Error;
use prefcond_core::pipeline::{
    self, run_pipeline_from, RunConfig, RunPaths, Step, UserEmbeddingRecord,
};
use serde_json::json;
use std::path::PathBuf;
use std::str::FromStr;

#[derive(Parser)]
#[command(name = "prefcond", version, about = "preference-conditioned generation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the simulated preference dataset, splits, and benchmark.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune the preference discriminator on the train split.
    TrainDisc {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the pooling-by-layer probe sweep and extract embeddings.
    ProbeSweep {
        #[arg(long)]
        data: PathBuf,
        /// Optional extra copy of the sweep table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the distribution-alignment adapter.
    TrainAlign {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the conditional denoiser's user branch.
    TrainGen {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compute the metric suite and render the report.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Comma-separated subset of fid,cmmd,clip,prefdisc,cluster.
        #[arg(long)]
        metrics: Option<String>,
    },
    /// Sample a latent for one user and prompt.
    Generate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(long)]
        prompt: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Generate with one component of user A replaced by user B's.
    Swap {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        #[arg(long)]
        component: String,
        #[arg(long, default_value_t = 0)]
        prompt: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Execute the full pipeline from a config file.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from this step inside an existing run directory.
        #[arg(long)]
        from: Option<String>,
        /// Existing run directory (required with --from).
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Re-render the tables for an existing run.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn load_run_config(run_dir: &PathBuf) -> Result<RunConfig, Error> {
    prefcond_core::io::read_json(&run_dir.join("gen-data").join("run_config.json"))
}

fn find_user<'a>(
    records: &'a [UserEmbeddingRecord],
    user: &str,
) -> Result<&'a UserEmbeddingRecord, Error> {
    records
        .iter()
        .find(|u| u.user_id == user)
        .or_else(|| user.parse::<usize>().ok().and_then(|i| records.get(i)))
        .ok_or_else(|| Error::validation(format!("unknown user '{user}'")))
}

fn emit_latent(
    run: &PathBuf,
    user_label: &str,
    prompt: u64,
    seed: u64,
    bundle: &prefcond_core::conditioning::UserEmbedding,
) -> Result<(), Error> {
    let paths = RunPaths::new(run.clone());
    let config = load_run_config(run)?;
    let world: prefcond_core::synth::World =
        prefcond_core::io::read_json(&paths.step_dir(Step::GenData).join("world.json"))?;
    let components: prefcond_core::pipeline::steps::ConditioningComponents =
        prefcond_core::io::read_json(&paths.step_dir(Step::TrainGen).join("components.json"))?;
    let denoiser = prefcond_core::io::load_checkpoint(
        &paths.step_dir(Step::TrainGen).join("denoiser.ckpt"),
        "denoiser",
        1,
    )?;
    let prompt_ctx = components.prompt_encoder.encode(&world.semantic_factor(prompt))?;
    let e_u = fuse(bundle, &components.fusion)?;
    let latent = generate(
        &denoiser,
        &prompt_ctx,
        &e_u,
        config.conditioning.guidance_scale,
        seed,
    )?;
    let record = json!({
        "user": user_label,
        "prompt": prompt,
        "seed": seed,
        "config_hash": config.config_hash(),
        "latent": latent,
    });
    println!("{record}");
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { out, users, items, seed } => {
            let mut config = RunConfig::desk_default(
                out.parent().and_then(|p| p.to_str()).unwrap_or("."),
                seed.unwrap_or(0),
            );
            if let Some(u) = users {
                config.dataset.users = u;
            }
            if let Some(i) = items {
                config.dataset.items_per_user = i;
            }
            config.seed = config.effective_seed(seed);
            std::fs::create_dir_all(&out)?;
            let paths = RunPaths::new(out);
            run_pipeline_from(&config, &paths, Step::GenData)?;
            // only the first step was requested
            println!("gen-data complete at {}", paths.root.display());
            Ok(())
        }
        Command::TrainDisc { data, epochs, seed } => {
            let mut config = load_run_config(&data)?;
            if let Some(e) = epochs {
                config.encoder.epochs = e;
            }
            if let Some(s) = seed {
                config.seed = s;
            }
            pipeline::steps::train_disc(&config, &RunPaths::new(data))?;
            println!("train-disc complete");
            Ok(())
        }
        Command::ProbeSweep { data, out } => {
            let config = load_run_config(&data)?;
            let paths = RunPaths::new(data);
            pipeline::steps::probe_sweep_step(&config, &paths)?;
            let csv_path = paths.step_dir(Step::ProbeSweep).join("sweep.csv");
            if let Some(out) = out {
                std::fs::copy(&csv_path, &out)?;
            }
            println!("probe-sweep complete ({})", csv_path.display());
            Ok(())
        }
        Command::TrainAlign { data, alpha, beta, steps } => {
            let mut config = load_run_config(&data)?;
            if let Some(a) = alpha {
                config.alignment.alpha = a;
            }
            if let Some(b) = beta {
                config.alignment.beta = b;
            }
            if let Some(s) = steps {
                config.alignment.steps = s;
            }
            pipeline::steps::train_align(&config, &RunPaths::new(data))?;
            println!("train-align complete");
            Ok(())
        }
        Command::TrainGen { data, steps } => {
            let mut config = load_run_config(&data)?;
            if let Some(s) = steps {
                config.conditioning.train_steps = s;
            }
            pipeline::steps::train_gen(&config, &RunPaths::new(data))?;
            println!("train-gen complete");
            Ok(())
        }
        Command::Eval { run, metrics } => {
            let mut config = load_run_config(&run)?;
            if let Some(m) = metrics {
                config.metrics.list = m.split(',').map(|s| s.trim().to_string()).collect();
            }
            let paths = RunPaths::new(run);
            pipeline::steps::eval_step(&config, &paths)?;
            let report = pipeline::report(&paths.root)?;
            println!("{report}");
            Ok(())
        }
        Command::Generate { run, user, prompt, seed } => {
            let paths = RunPaths::new(run.clone());
            let records: Vec<UserEmbeddingRecord> = prefcond_core::io::read_jsonl(
                &paths.step_dir(Step::TrainGen).join("user_embeddings.jsonl"),
            )?;
            let rec = find_user(&records, &user)?;
            emit_latent(&run, &rec.user_id.clone(), prompt, seed, &rec.bundle)
        }
        Command::Swap { run, a, b, component, prompt, seed } => {
            let paths = RunPaths::new(run.clone());
            let records: Vec<UserEmbeddingRecord> = prefcond_core::io::read_jsonl(
                &paths.step_dir(Step::TrainGen).join("user_embeddings.jsonl"),
            )?;
            let rec_a = find_user(&records, &a)?;
            let rec_b = find_user(&records, &b)?;
            let comp = SwapComponent::from_str(&component)?;
            let swapped = swap_components(&rec_a.bundle, &rec_b.bundle, comp)?;
            let label = format!("{}<-{}:{}", rec_a.user_id, rec_b.user_id, component);
            emit_latent(&run, &label, prompt, seed, &swapped)
        }
        Command::Run { config, out, seed, from, run_dir } => {
            let mut cfg = match config {
                Some(path) => RunConfig::from_toml_file(&path)?,
                None => RunConfig::default(),
            };
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if cfg.out_dir.is_empty() {
                cfg.out_dir = "runs".to_string();
            }
            cfg.seed = cfg.effective_seed(seed);
            match from {
                Some(step_name) => {
                    let step = Step::parse(&step_name)?;
                    let dir = run_dir.ok_or_else(|| {
                        Error::validation("--from requires --run-dir pointing at an existing run")
                    })?;
                    let paths = RunPaths::new(dir);
                    run_pipeline_from(&cfg, &paths, step)?;
                    println!("pipeline resumed at {} in {}", step.name(), paths.root.display());
                }
                None => {
                    let paths = pipeline::run_pipeline(&cfg)?;
                    println!("pipeline complete: {}", paths.root.display());
                    println!("{}", pipeline::report(&paths.root)?);
                }
            }
            Ok(())
        }
        Command::Report { run } => {
            let report = pipeline::report(&run)?;
            println!("{report}");
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
