// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};

use lmm_sae::config::RunConfig;
use lmm_sae::error::{Error, Result};
use lmm_sae::pipeline::{self, DemoOptions, StageOutcome};
use lmm_sae::service;

/// TopK sparse autoencoders for multimodal model activations.
#[derive(Parser, Debug)]
#[command(name = "lmm-sae", version, about)]
struct Cli {
    /// Run configuration (TOML); paths inside are relative to its directory.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set train.steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Cap on worker threads (0 keeps the config value).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the host over the image manifest and write activation shards.
    CacheActivations,
    /// Train the SAE on the activation shards.
    Train,
    /// Encode every shard token into the sparse feature cache.
    EncodeCache,
    /// Build per-feature evidence records from the cache.
    TopImages,
    /// Ask the explainer about every unexplained feature.
    Explain,
    /// Condense explanations into short labels.
    Refine,
    /// File refined labels under the six concept kinds.
    Categorize,
    /// Score labels with IoU and CLIP-style similarity plus baselines.
    Evaluate,
    /// Judge whether explanations hold on held-out images.
    Consistency,
    /// Compare greedy generations with and without a clamped feature.
    Steer,
    /// Attribute a logit difference to (token, feature) pairs.
    Attribute,
    /// Rank the features active on one image.
    Probe,
    /// Serve the run over HTTP.
    Serve {
        /// Listen address; overrides `serve.addr`.
        #[arg(long)]
        addr: Option<String>,
    },
    /// Generate a planted-concept world and run the whole pipeline on it.
    DemoSynthetic {
        /// Output directory.
        #[arg(long, default_value = "demo-run")]
        out: PathBuf,
    },
}

fn load(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("this subcommand needs `--config <file>`".into()))?;
    let mut cfg = RunConfig::load(path, &cli.overrides)?;
    if cli.threads > 0 {
        cfg.threads = cli.threads;
    }
    pipeline::init_threads(cfg.threads);
    Ok(cfg)
}

fn report(stage: &str, outcome: StageOutcome) {
    match outcome {
        StageOutcome::Ran => info!("{stage}: done"),
        StageOutcome::UpToDate => info!("{stage}: inputs unchanged, nothing to do"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::CacheActivations => report("cache-activations", pipeline::cache_activations(&load(&cli)?)?),
        Command::Train => report("train", pipeline::train(&load(&cli)?, |_| {})?),
        Command::EncodeCache => report("encode-cache", pipeline::encode_cache(&load(&cli)?)?),
        Command::TopImages => report("top-images", pipeline::top_images(&load(&cli)?)?),
        Command::Explain => report("explain", pipeline::explain(&load(&cli)?)?),
        Command::Refine => report("refine", pipeline::refine(&load(&cli)?)?),
        Command::Categorize => report("categorize", pipeline::categorize(&load(&cli)?)?),
        Command::Evaluate => {
            let cfg = load(&cli)?;
            report("evaluate", pipeline::evaluate(&cfg)?);
            let scores = cfg.path("scores")?;
            let text = std::fs::read_to_string(&scores).map_err(|source| Error::PathIo {
                path: scores.clone(),
                source,
            })?;
            eprint!("{text}");
        }
        Command::Consistency => report("consistency", pipeline::consistency(&load(&cli)?)?),
        Command::Steer => {
            let r = pipeline::steer(&load(&cli)?)?;
            eprintln!("unsteered: {}", r.unsteered.text);
            eprintln!("steered (feature {} = {}): {}", r.feature, r.value, r.steered.text);
        }
        Command::Attribute => {
            let r = pipeline::attribute(&load(&cli)?)?;
            eprintln!(
                "{:?} attribution of v_c={} vs v_b={}: d = {:.6}, {} entries",
                r.result.method,
                r.result.v_c,
                r.result.v_b,
                r.result.baseline,
                r.result.entries.len()
            );
            for m in &r.maps {
                let top: Vec<String> = m.ranking.iter().map(|(j, v)| format!("{j}:{v:.4}")).collect();
                eprintln!("  {:?}: {}", m.label, top.join(" "));
            }
        }
        Command::Probe => {
            for c in pipeline::probe(&load(&cli)?)? {
                eprintln!(
                    "feature {:>6}  mean {:.4}  {}",
                    c.feature,
                    c.mean_activation,
                    c.refined_label.as_deref().unwrap_or("-")
                );
            }
        }
        Command::Serve { addr } => {
            let mut cfg = load(&cli)?;
            if let Some(a) = addr {
                cfg.serve.addr = a.clone();
            }
            service::serve(&cfg)?;
        }
        Command::DemoSynthetic { out } => {
            let opts = DemoOptions {
                threads: cli.threads,
                ..Default::default()
            };
            pipeline::init_threads(opts.threads);
            let r = pipeline::demo_synthetic(out, &opts)?;
            eprintln!("recovered {}/{} planted concepts", r.concepts_recovered, r.n_concepts);
            for m in &r.matches {
                eprintln!(
                    "feature {:>4}  {:<14} cos {:.3}  explanation {:<14} iou {}",
                    m.feature,
                    m.concept,
                    m.cosine,
                    m.explanation.as_deref().unwrap_or("-"),
                    m.iou.map_or("-".into(), |v| format!("{v:.3}"))
                );
            }
            eprintln!("config: {}", r.config.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
