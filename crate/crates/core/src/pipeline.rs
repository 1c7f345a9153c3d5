// SPDX-License-Identifier: MIT OR Apache-2.0

//! The stages behind each subcommand, a content-hashed stage manifest and
//! the synthetic end-to-end demo.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{self, AttributionResult, Method, RangeMap, Scope};
use crate::config::{HostKind, RunConfig, SaeConfig, SourceSpec};
use crate::error::{Error, Result};
use crate::evaluate::{
    self, EmbeddingSource, FileEmbeddings, FileGrounding, GroundingSource, HttpEmbeddings, HttpGrounding, ScoreTable,
};
use crate::exchange::ExchangeHost;
use crate::host::{self, HostInput, HostModel, ToyHost, ToyVocab};
use crate::interpret::client::{Archive, ChatClient};
use crate::interpret::prompts::PromptSet;
use crate::interpret::{self, DirImageSource, FeatureRecord};
use crate::sae::{SaeParams, SteerSpec};
use crate::store::{self, ActivationShard, Grid, SparseFeatureCache};
use crate::toyworld::{ToyWorld, ToyWorldConfig, WorldSummary};
use crate::trainer::{self, TrainConfig, TrainMetrics};

const STAGE_MANIFEST: &str = "stages.json";
const USED_CONFIG: &str = "config.used.toml";
const SHARD_PREFIX: &str = "activations_";

/// Caps the global worker pool; 0 keeps the default. Only the first call
/// has an effect.
pub fn init_threads(n: usize) {
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn create_parent(p: &Path) -> Result<()> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).map_err(Error::at_path(d))?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    create_parent(path)?;
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(Error::at_path(path))
}

/// Activation shard files (`*.act`) of a directory, sorted by name.
pub fn list_shards(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(Error::at_path(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "act"))
        .collect();
    out.sort();
    Ok(out)
}

pub fn read_shards(dir: &Path) -> Result<Vec<ActivationShard>> {
    list_shards(dir)?.iter().map(store::read_shard).collect()
}

/// Reads a toy host description and registers the images of
/// `image_shards` with its front end.
pub fn load_toy_host(spec: &Path, image_shards: Option<&Path>) -> Result<ToyHost> {
    let text = std::fs::read_to_string(spec).map_err(Error::at_path(spec))?;
    let mut host: ToyHost = serde_json::from_str(&text)?;
    if let Some(dir) = image_shards {
        host.front_mut().add_images(&read_shards(dir)?)?;
    }
    Ok(host)
}

fn host_config_check(cfg: &RunConfig) -> Result<()> {
    match cfg.host.kind {
        HostKind::ToyLinear | HostKind::ToyMlp => {
            let spec = cfg
                .host
                .spec
                .as_deref()
                .ok_or_else(|| Error::Config("missing config key `host.spec`".into()))?;
            if !cfg.resolve(spec).exists() {
                return Err(Error::Config(format!(
                    "`host.spec` points to missing {}",
                    cfg.resolve(spec).display()
                )));
            }
        }
        HostKind::Exchange => {
            if cfg.host.addr.is_none() && cfg.host.command.is_empty() {
                return Err(Error::Config("missing config key `host.addr` or `host.command`".into()));
            }
        }
    }
    Ok(())
}

/// The host selected by `host.kind`.
pub fn build_host(cfg: &RunConfig) -> Result<Arc<dyn HostModel>> {
    host_config_check(cfg)?;
    match cfg.host.kind {
        HostKind::ToyLinear | HostKind::ToyMlp => {
            let spec = cfg.resolve(cfg.host.spec.as_deref().unwrap_or(Path::new("")));
            let shards = cfg.host.image_shards.as_deref().map(|p| cfg.resolve(p));
            let h = load_toy_host(&spec, shards.as_deref())?;
            let want_mlp = cfg.host.kind == HostKind::ToyMlp;
            if matches!(h, ToyHost::Mlp(_)) != want_mlp {
                return Err(Error::Config(format!(
                    "host.kind is {:?} but {} describes a different toy host",
                    cfg.host.kind,
                    spec.display()
                )));
            }
            Ok(Arc::new(h))
        }
        HostKind::Exchange => {
            if let Some(addr) = &cfg.host.addr {
                Ok(Arc::new(ExchangeHost::connect(addr.as_str())?))
            } else {
                let mut cmd = Command::new(&cfg.host.command[0]);
                cmd.args(&cfg.host.command[1..]).current_dir(&cfg.base_dir);
                Ok(Arc::new(ExchangeHost::spawn(&mut cmd)?))
            }
        }
    }
}

fn prompts(cfg: &RunConfig) -> Result<PromptSet> {
    match cfg.optional_path("prompts") {
        Some(dir) => PromptSet::load_dir(dir),
        None => Ok(PromptSet::default()),
    }
}

fn archive(cfg: &RunConfig) -> Result<Archive> {
    match cfg.optional_path("archive") {
        Some(p) => Archive::open(p),
        None => Ok(Archive::disabled()),
    }
}

/// Outcome of a stage with respect to the manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    UpToDate,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Input hash before the stage last ran.
    pub before: String,
    /// Input hash right after it finished (stages may rewrite inputs).
    pub after: String,
    pub outputs: Vec<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stages: BTreeMap<String, StageRecord>,
}

fn hash_path(h: &mut Sha256, p: &Path) -> Result<()> {
    h.update(p.to_string_lossy().as_bytes());
    if p.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(Error::at_path(p))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for e in entries {
            hash_path(h, &e)?;
        }
    } else if p.is_file() {
        let mut f = std::fs::File::open(p).map_err(Error::at_path(p))?;
        let mut buf = [0u8; 1 << 16];
        loop {
            let n = f.read(&mut buf).map_err(Error::at_path(p))?;
            if n == 0 {
                break;
            }
            h.update(&buf[..n]);
        }
    } else {
        h.update(b"<absent>");
    }
    Ok(())
}

fn hash_inputs(settings: &serde_json::Value, inputs: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(settings)?);
    for p in inputs {
        hash_path(&mut h, p)?;
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Runs `body` unless the stage already ran on identical inputs and its
/// outputs still exist. Records the input hashes and copies the config
/// next to the outputs.
fn run_stage(
    cfg: &RunConfig,
    name: &str,
    settings: serde_json::Value,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
    body: impl FnOnce() -> Result<()>,
) -> Result<StageOutcome> {
    let out_dir = cfg.out_dir();
    let mpath = out_dir.join(STAGE_MANIFEST);
    let mut manifest: StageManifest = if mpath.exists() {
        let text = std::fs::read_to_string(&mpath).map_err(Error::at_path(&mpath))?;
        serde_json::from_str(&text).unwrap_or_default()
    } else {
        StageManifest::default()
    };
    let before = hash_inputs(&settings, inputs)?;
    if let Some(rec) = manifest.stages.get(name) {
        if (rec.before == before || rec.after == before) && outputs.iter().all(|o| o.exists()) {
            info!("{name}: up to date");
            return Ok(StageOutcome::UpToDate);
        }
    }
    body()?;
    let after = hash_inputs(&settings, inputs)?;
    manifest.stages.insert(
        name.to_string(),
        StageRecord {
            before,
            after,
            outputs: outputs.to_vec(),
        },
    );
    write_json(&mpath, &manifest)?;
    std::fs::write(out_dir.join(USED_CONFIG), cfg.to_toml()?).map_err(Error::at_path(out_dir.join(USED_CONFIG)))?;
    Ok(StageOutcome::Ran)
}

fn settings(v: &impl Serialize) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

/// Runs the host on every image of the manifest and writes the image-token
/// activations as shards into `paths.shards`.
pub fn cache_activations(cfg: &RunConfig) -> Result<StageOutcome> {
    let manifest = cfg.existing_path("images")?;
    let out = cfg.path("shards")?;
    host_config_check(cfg)?;
    if let Some(src) = &cfg.host.image_shards {
        if cfg.resolve(src) == out {
            return Err(Error::Config(
                "`paths.shards` must differ from `host.image_shards`".into(),
            ));
        }
    }
    let mut inputs = vec![manifest.clone()];
    inputs.extend(cfg.host.spec.as_deref().map(|p| cfg.resolve(p)));
    inputs.extend(cfg.host.image_shards.as_deref().map(|p| cfg.resolve(p)));
    run_stage(
        cfg,
        "cache-activations",
        settings(&cfg.host)?,
        &inputs,
        std::slice::from_ref(&out),
        || {
            let host = build_host(cfg)?;
            let entries = store::read_image_manifest(&manifest)?;
            std::fs::create_dir_all(&out).map_err(Error::at_path(&out))?;
            for old in list_shards(&out)? {
                if old
                    .file_name()
                    .is_some_and(|n| n.to_string_lossy().starts_with(SHARD_PREFIX))
                {
                    std::fs::remove_file(&old).map_err(Error::at_path(&old))?;
                }
            }
            let per_shard = 1024;
            for (si, chunk) in entries.chunks(per_shard).enumerate() {
                let mut ids = Vec::new();
                let mut data = Vec::new();
                let mut grid = None;
                for e in chunk {
                    let input = HostInput {
                        image: Some(e.image_id.clone()),
                        text: Vec::new(),
                    };
                    let ranges = host.token_ranges(&input)?;
                    let img = ranges
                        .iter()
                        .find(|r| r.is_image())
                        .ok_or_else(|| Error::Protocol(format!("host reports no image tokens for {}", e.image_id)))?;
                    let g = match img.kind {
                        host::RangeKind::Image { rows, cols } => Grid::new(rows, cols)?,
                        host::RangeKind::Text => unreachable!(),
                    };
                    if *grid.get_or_insert(g) != g {
                        return Err(Error::Protocol("host changed its token grid between images".into()));
                    }
                    let acts = host.run(&input)?;
                    data.extend_from_slice(&acts.data[img.start * acts.d_l..img.end * acts.d_l]);
                    ids.push(e.image_id.clone());
                }
                let grid = grid.unwrap_or(Grid { rows: 1, cols: 1 });
                let shard = ActivationShard::new(ids, grid, host.d_model(), data)?;
                store::write_shard(&shard, out.join(format!("{SHARD_PREFIX}{si:03}.act")))?;
            }
            info!("cache-activations: {} images", entries.len());
            Ok(())
        },
    )
}

/// Trains the SAE on `paths.shards`; `steps = 0` writes the initialisation.
pub fn train(cfg: &RunConfig, mut on_step: impl FnMut(&TrainMetrics)) -> Result<StageOutcome> {
    let shards_dir = cfg.existing_path("shards")?;
    let sae = cfg.sae()?.clone();
    let params_path = cfg.path("params")?;
    let mut outputs = vec![params_path.clone()];
    outputs.extend(cfg.optional_path("checkpoint"));
    outputs.extend(cfg.optional_path("metrics"));
    let s = settings(&(&sae, &cfg.train))?;
    run_stage(cfg, "train", s, std::slice::from_ref(&shards_dir), &outputs, || {
        let shards = read_shards(&shards_dir)?;
        let every = (cfg.train.steps / 20).max(1);
        let out = trainer::train(&shards, sae.d_s, sae.k, &cfg.train, |m| {
            if m.step % every == 0 {
                info!(
                    "train step {}: recon {:.5} aux {:.5} dead {}",
                    m.step, m.recon_loss, m.aux_loss, m.dead_count
                );
            }
            on_step(m);
        })?;
        create_parent(&params_path)?;
        out.params().save(&params_path)?;
        if let Some(p) = cfg.optional_path("checkpoint") {
            create_parent(&p)?;
            out.trainer.save_checkpoint(&p)?;
        }
        if let Some(p) = cfg.optional_path("metrics") {
            create_parent(&p)?;
            let f = std::fs::File::create(&p).map_err(Error::at_path(&p))?;
            trainer::write_metrics(&out.metrics, std::io::BufWriter::new(f))?;
        }
        Ok(())
    })
}

/// Encodes every shard token into the sparse cache, taking image sources
/// from the image manifest when one is configured.
pub fn encode_cache(cfg: &RunConfig) -> Result<StageOutcome> {
    let shards_dir = cfg.existing_path("shards")?;
    let params_path = cfg.existing_path("params")?;
    let cache_path = cfg.path("cache")?;
    let manifest = cfg.optional_path("images");
    let mut inputs = vec![shards_dir.clone(), params_path.clone()];
    inputs.extend(manifest.clone());
    let outputs = [cache_path.clone(), SparseFeatureCache::manifest_path(&cache_path)];
    run_stage(cfg, "encode-cache", serde_json::Value::Null, &inputs, &outputs, || {
        let params = SaeParams::load(&params_path)?;
        let shards = read_shards(&shards_dir)?;
        let mut cache = store::build_sparse_cache(&shards, &params)?;
        if let Some(m) = &manifest {
            let map = store::read_image_manifest(m)?
                .into_iter()
                .map(|e| (e.image_id, e.source))
                .collect();
            cache.set_sources(&map);
        }
        create_parent(&cache_path)?;
        cache.save(&cache_path)?;
        info!(
            "encode-cache: {} images, d_s={}, k={}",
            cache.n_images(),
            cache.d_sae(),
            cache.k()
        );
        Ok(())
    })
}

fn load_records_or_empty(path: &Path) -> Result<Vec<FeatureRecord>> {
    if path.exists() {
        interpret::read_records(path)
    } else {
        Ok(Vec::new())
    }
}

/// Builds one evidence record per feature, keeping interpretation results
/// of records whose evidence is unchanged.
pub fn top_images(cfg: &RunConfig) -> Result<StageOutcome> {
    let cache_path = cfg.existing_path("cache")?;
    let records_path = cfg.path("records")?;
    let ic = &cfg.interpret;
    let s = settings(&(ic.n_top, ic.binarize, &ic.features))?;
    let inputs = [cache_path.clone(), SparseFeatureCache::manifest_path(&cache_path)];
    run_stage(
        cfg,
        "top-images",
        s,
        &inputs,
        std::slice::from_ref(&records_path),
        || {
            let cache = SparseFeatureCache::load(&cache_path)?;
            let old: BTreeMap<usize, FeatureRecord> = load_records_or_empty(&records_path)?
                .into_iter()
                .map(|r| (r.feature_index, r))
                .collect();
            let features: Vec<usize> = if ic.features.is_empty() {
                let index = cache.feature_index();
                (0..cache.d_sae()).filter(|&j| !index[j].is_empty()).collect()
            } else {
                ic.features.clone()
            };
            let mut records: Vec<FeatureRecord> = features
                .par_iter()
                .map(|&j| interpret::build_record(&cache, j, ic.n_top, ic.binarize))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .filter(|r| !r.top_images.is_empty())
                .collect();
            for r in &mut records {
                if let Some(o) = old.get(&r.feature_index) {
                    r.adopt(o);
                }
            }
            create_parent(&records_path)?;
            interpret::write_records(&records_path, &records)?;
            info!("top-images: {} feature records", records.len());
            Ok(())
        },
    )
}

/// Applies `work` to every record selected by `todo`, `concurrency` at a
/// time. Per-feature failures are stored on the record; the first client
/// or transport failure is returned after the records are saved.
fn update_records(
    path: &Path,
    concurrency: usize,
    todo: impl Fn(&FeatureRecord) -> bool + Sync,
    work: impl Fn(&mut FeatureRecord) -> Result<()> + Sync,
) -> Result<usize> {
    let mut records = interpret::read_records(path)?;
    let first_fatal: Mutex<Option<Error>> = Mutex::new(None);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency)
        .build()
        .map_err(|e| Error::invalid(format!("cannot build worker pool: {e}")))?;
    let touched = pool.install(|| {
        records
            .par_iter_mut()
            .filter(|r| todo(r))
            .map(|r| {
                match work(r) {
                    Ok(()) => r.error = None,
                    Err(e) => {
                        r.error = Some(e.to_string());
                        if e.exit_code() == 2 {
                            let mut f = first_fatal.lock().unwrap_or_else(|p| p.into_inner());
                            f.get_or_insert(e);
                        } else {
                            warn!("feature {}: {e}", r.feature_index);
                        }
                    }
                }
                1usize
            })
            .sum::<usize>()
    });
    interpret::write_records(path, &records)?;
    match first_fatal.into_inner().unwrap_or_else(|p| p.into_inner()) {
        Some(e) => Err(e),
        None => Ok(touched),
    }
}

fn client_stage(
    cfg: &RunConfig,
    name: &str,
    role: &str,
    extra_inputs: &[PathBuf],
    todo: impl Fn(&FeatureRecord) -> bool + Sync,
    work: impl Fn(&mut FeatureRecord, &dyn ChatClient, &PromptSet, &Archive) -> Result<()> + Sync,
) -> Result<StageOutcome> {
    let records_path = cfg.existing_path("records")?;
    let spec = cfg.client(role)?.clone();
    let prompts_dir = cfg.optional_path("prompts");
    let prompts = prompts(cfg)?;
    let mut inputs = vec![records_path.clone()];
    inputs.extend(prompts_dir);
    inputs.extend_from_slice(extra_inputs);
    let s = settings(&(&spec, &cfg.interpret))?;
    run_stage(cfg, name, s, &inputs, std::slice::from_ref(&records_path), || {
        let client = spec.build()?;
        let archive = archive(cfg)?;
        let n = update_records(&records_path, cfg.interpret.concurrency, todo, |r| {
            work(r, client.as_ref(), &prompts, &archive)
        })?;
        info!("{name}: {n} features processed");
        Ok(())
    })
}

fn image_source(cfg: &RunConfig) -> Result<DirImageSource> {
    Ok(DirImageSource {
        root: cfg.image_root()?,
    })
}

/// Asks the explainer about every record that has no explanation yet.
pub fn explain(cfg: &RunConfig) -> Result<StageOutcome> {
    let images = image_source(cfg)?;
    let manifest: Vec<PathBuf> = cfg.optional_path("images").into_iter().collect();
    client_stage(
        cfg,
        "explain",
        "explainer",
        &manifest,
        |r| r.explanation.is_none() && !r.top_images.is_empty(),
        |r, client, prompts, archive| {
            let masked = interpret::masked_images(r, &images)?;
            r.explanation = Some(interpret::explain_feature(
                &masked,
                client,
                prompts,
                archive,
                r.feature_index,
            )?);
            Ok(())
        },
    )
}

/// Condenses explanations into short labels.
pub fn refine(cfg: &RunConfig) -> Result<StageOutcome> {
    client_stage(
        cfg,
        "refine",
        "refiner",
        &[],
        |r| r.explanation.is_some() && !r.is_sentinel() && r.refined_label.is_none(),
        |r, client, prompts, archive| {
            let exp = r.explanation.clone().unwrap_or_default();
            let refined = interpret::refine_label(&exp, client, prompts, archive, r.feature_index)?;
            r.refined_label = Some(refined.label);
            r.refine_attempts = refined.attempts;
            Ok(())
        },
    )
}

/// Files refined labels under the six concepts.
pub fn categorize(cfg: &RunConfig) -> Result<StageOutcome> {
    client_stage(
        cfg,
        "categorize",
        "categorizer",
        &[],
        |r| r.refined_label.is_some() && r.concept.is_none(),
        |r, client, prompts, archive| {
            let label = r.refined_label.clone().unwrap_or_default();
            r.concept = Some(interpret::categorize(
                &label,
                client,
                prompts,
                archive,
                r.feature_index,
            )?);
            Ok(())
        },
    )
}

/// Asks the judge whether each explanation matches its masked images.
pub fn consistency(cfg: &RunConfig) -> Result<StageOutcome> {
    let images = image_source(cfg)?;
    let n = cfg.interpret.judge_samples;
    client_stage(
        cfg,
        "consistency",
        "judge",
        &[],
        |r| r.explanation.is_some() && !r.is_sentinel() && r.scores.consistency.is_none(),
        |r, client, prompts, archive| {
            let masked = interpret::masked_images(r, &images)?;
            let exp = r.explanation.clone().unwrap_or_default();
            r.scores.consistency = Some(interpret::consistency_judge(
                &exp,
                &masked,
                client,
                prompts,
                archive,
                r.feature_index,
                n,
            )?);
            Ok(())
        },
    )
}

fn grounding_source(cfg: &RunConfig) -> Result<Option<Box<dyn GroundingSource>>> {
    Ok(match &cfg.eval.grounding {
        SourceSpec::Files => cfg
            .optional_path("masks")
            .map(|p| Box::new(FileGrounding::new(p)) as Box<dyn GroundingSource>),
        SourceSpec::Http(c) => Some(Box::new(HttpGrounding::new(c.clone())?)),
    })
}

fn embedding_source(cfg: &RunConfig) -> Result<Option<Box<dyn EmbeddingSource>>> {
    Ok(match &cfg.eval.embeddings {
        SourceSpec::Files => match cfg.optional_path("embeddings") {
            Some(p) => Some(Box::new(FileEmbeddings::load(p)?)),
            None => None,
        },
        SourceSpec::Http(c) => Some(Box::new(HttpEmbeddings::new(c.clone())?)),
    })
}

fn unavailable_to_none(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::ScoreUnavailable(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Path of the JSON copy of the score table.
pub fn scores_json_path(scores: &Path) -> PathBuf {
    scores.with_extension("json")
}

/// Scores every refined record, aggregates per concept with random-image
/// baselines and writes the score table.
pub fn evaluate(cfg: &RunConfig) -> Result<StageOutcome> {
    let records_path = cfg.existing_path("records")?;
    let cache_path = cfg.existing_path("cache")?;
    let scores_path = cfg.path("scores")?;
    if matches!(cfg.eval.grounding, SourceSpec::Files) {
        if let Some(p) = cfg.optional_path("masks") {
            if !p.is_dir() {
                return Err(Error::Config(format!(
                    "`paths.masks` points to missing {}",
                    p.display()
                )));
            }
        }
    }
    if matches!(cfg.eval.embeddings, SourceSpec::Files) && cfg.optional_path("embeddings").is_some() {
        cfg.existing_path("embeddings")?;
    }
    let mut inputs = vec![records_path.clone(), cache_path.clone()];
    inputs.extend(cfg.optional_path("masks"));
    inputs.extend(cfg.optional_path("embeddings"));
    let outputs = [
        records_path.clone(),
        scores_path.clone(),
        scores_json_path(&scores_path),
    ];
    run_stage(cfg, "evaluate", settings(&cfg.eval)?, &inputs, &outputs, || {
        let table = evaluate_records(cfg, &records_path, &cache_path)?;
        create_parent(&scores_path)?;
        std::fs::write(&scores_path, table.to_tsv()).map_err(Error::at_path(&scores_path))?;
        write_json(&scores_json_path(&scores_path), &table)?;
        if table.skipped > 0 {
            warn!(
                "evaluate: {} records without a refined label or concept were skipped",
                table.skipped
            );
        }
        Ok(())
    })
}

fn evaluate_records(cfg: &RunConfig, records_path: &Path, cache_path: &Path) -> Result<ScoreTable> {
    let grounding = grounding_source(cfg)?;
    let embeddings = embedding_source(cfg)?;
    let cache = SparseFeatureCache::load(cache_path)?;
    let mut records = interpret::read_records(records_path)?;
    for r in records.iter_mut() {
        let Some(label) = r.refined_label.clone() else {
            continue;
        };
        if let Some(g) = &grounding {
            r.scores.iou = unavailable_to_none(evaluate::feature_iou(r, g.as_ref()))?;
        }
        if let Some(e) = &embeddings {
            let ids: Vec<&str> = r.top_images.iter().map(|t| t.image_id.as_str()).collect();
            r.scores.clip = unavailable_to_none(evaluate::clip_score(&label, &ids, e.as_ref()))?;
        }
    }
    let mut table = evaluate::aggregate(&records);
    let ec = &cfg.eval;
    let ids = cache.image_ids();
    let iou_on = |r: &FeatureRecord, imgs: &[usize]| -> Result<f64> {
        let (Some(g), Some(label)) = (&grounding, &r.refined_label) else {
            return Err(Error::ScoreUnavailable("no grounding".into()));
        };
        let mut v = Vec::new();
        for &i in imgs {
            let hm = store::token_heatmap(&cache, &ids[i], r.feature_index)?;
            let m = interpret::binarize_with(&hm, r.binarize)?;
            if let Some(s) = evaluate::image_iou(g.as_ref(), &ids[i], label, &m)? {
                v.push(s);
            }
        }
        if v.is_empty() {
            return Err(Error::ScoreUnavailable("no grounded random image".into()));
        }
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    };
    let clip_on = |r: &FeatureRecord, imgs: &[usize]| -> Result<f64> {
        let (Some(e), Some(label)) = (&embeddings, &r.refined_label) else {
            return Err(Error::ScoreUnavailable("no embeddings".into()));
        };
        let chosen: Vec<&str> = imgs.iter().map(|&i| ids[i].as_str()).collect();
        evaluate::clip_score(label, &chosen, e.as_ref())
    };
    let iou_runs = if grounding.is_some() { ec.iou_runs } else { 0 };
    let clip_runs = if embeddings.is_some() { ec.clip_runs } else { 0 };
    table.baseline = evaluate::baseline_rows(
        &records,
        cache.n_images(),
        ec.sample,
        iou_runs,
        clip_runs,
        ec.seed,
        iou_on,
        clip_on,
    )?;
    interpret::write_records(records_path, &records)?;
    Ok(table)
}

fn toy_vocab() -> ToyVocab {
    ToyVocab::default()
}

/// One generated continuation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteerReport {
    pub prompt: String,
    pub image: Option<String>,
    pub feature: usize,
    pub value: f32,
    pub unsteered: Generation,
    pub steered: Generation,
}

/// Greedy generations with and without clamping `feature` to `value`.
#[allow(clippy::too_many_arguments)]
pub fn steer_compare(
    host: &dyn HostModel,
    params: &SaeParams,
    prompt: &str,
    image: Option<String>,
    feature: usize,
    value: f32,
    tokens: &[usize],
    max_len: usize,
) -> Result<SteerReport> {
    let vocab = toy_vocab();
    let input = HostInput {
        image: image.clone(),
        text: vocab.encode(prompt),
    };
    let spec = if tokens.is_empty() {
        SteerSpec::all_tokens(feature, value)
    } else {
        SteerSpec::on_tokens(tokens.iter().copied(), feature, value)
    };
    let plain = host::generate_steered(host, &input, params, &[], max_len)?;
    let steered = host::generate_steered(host, &input, params, &[spec], max_len)?;
    Ok(SteerReport {
        prompt: prompt.to_string(),
        image,
        feature,
        value,
        unsteered: Generation {
            text: vocab.decode(&plain),
            tokens: plain,
        },
        steered: Generation {
            text: vocab.decode(&steered),
            tokens: steered,
        },
    })
}

/// Runs the `[steer]` section and writes `steer.json` to the output dir.
pub fn steer(cfg: &RunConfig) -> Result<SteerReport> {
    let params_path = cfg.existing_path("params")?;
    let sc = &cfg.steer;
    let feature = sc
        .feature
        .ok_or_else(|| Error::Config("missing config key `steer.feature`".into()))?;
    let host = build_host(cfg)?;
    let params = SaeParams::load(&params_path)?;
    let report = steer_compare(
        host.as_ref(),
        &params,
        &sc.prompt,
        sc.image.clone(),
        feature,
        sc.value,
        &sc.tokens,
        sc.max_len,
    )?;
    write_json(&cfg.out_dir().join("steer.json"), &report)?;
    Ok(report)
}

/// Resolves a token given as a word of the toy vocabulary or a numeric id.
pub fn token_id(s: &str) -> Result<usize> {
    if let Ok(n) = s.parse::<usize>() {
        return Ok(n);
    }
    toy_vocab()
        .id(s)
        .map(|v| v as usize)
        .ok_or_else(|| Error::invalid(format!("unknown token {s:?}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub result: AttributionResult,
    pub maps: Vec<RangeMap>,
}

/// Attribution of `v_c` against `v_b` (`v_c` defaults to the argmax).
#[allow(clippy::too_many_arguments)]
pub fn attribute_prompt(
    host: &dyn HostModel,
    params: &SaeParams,
    prompt: &str,
    image: Option<String>,
    v_c: Option<usize>,
    v_b: usize,
    method: Method,
    top_n: usize,
) -> Result<AttributionReport> {
    let input = HostInput {
        image,
        text: toy_vocab().encode(prompt),
    };
    let v_c = match v_c {
        Some(v) => v,
        None => host::argmax(&host::hooked_forward(host, &input, params, &[])?.logits),
    };
    let result = match method {
        Method::Exact => attribution::exact_attribution(host, &input, params, v_c, v_b, &Scope::Active)?,
        Method::Approx => attribution::approx_attribution(host, &input, params, v_c, v_b)?,
    };
    let maps = attribution::attribution_maps(&result, top_n);
    Ok(AttributionReport { result, maps })
}

/// Path of the per-range map file written next to the attribution entries.
pub fn maps_path(attribution: &Path) -> PathBuf {
    attribution.with_extension("maps.json")
}

/// Runs the `[attribute]` section; writes entries and maps.
pub fn attribute(cfg: &RunConfig) -> Result<AttributionReport> {
    let params_path = cfg.existing_path("params")?;
    let out = cfg.path("attribution")?;
    let ac = &cfg.attribute;
    let v_b = ac
        .v_b
        .as_deref()
        .ok_or_else(|| Error::Config("missing config key `attribute.v_b`".into()))
        .and_then(token_id)?;
    let v_c = ac.v_c.as_deref().map(token_id).transpose()?;
    let host = build_host(cfg)?;
    let params = SaeParams::load(&params_path)?;
    let report = attribute_prompt(
        host.as_ref(),
        &params,
        &ac.prompt,
        ac.image.clone(),
        v_c,
        v_b,
        ac.method,
        ac.top_n,
    )?;
    create_parent(&out)?;
    let f = std::fs::File::create(&out).map_err(Error::at_path(&out))?;
    report.result.write_jsonl(std::io::BufWriter::new(f))?;
    write_json(&maps_path(&out), &report.maps)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeCandidate {
    pub feature: usize,
    pub mean_activation: f32,
    pub refined_label: Option<String>,
}

/// Features of `[probe].image` ranked by mean activation, with labels from
/// the records file when present.
pub fn probe(cfg: &RunConfig) -> Result<Vec<ProbeCandidate>> {
    let cache = SparseFeatureCache::load(cfg.existing_path("cache")?)?;
    let pc = &cfg.probe;
    let image = pc
        .image
        .as_deref()
        .ok_or_else(|| Error::Config("missing config key `probe.image`".into()))?;
    let labels: BTreeMap<usize, Option<String>> = match cfg.optional_path("records").filter(|p| p.exists()) {
        Some(p) => interpret::read_records(p)?
            .into_iter()
            .map(|r| (r.feature_index, r.refined_label))
            .collect(),
        None => BTreeMap::new(),
    };
    let out: Vec<ProbeCandidate> = attribution::probe_features(&cache, image, pc.k_top, pc.skip)?
        .into_iter()
        .map(|(feature, mean_activation)| ProbeCandidate {
            feature,
            mean_activation,
            refined_label: labels.get(&feature).cloned().flatten(),
        })
        .collect();
    write_json(&cfg.out_dir().join("probe.json"), &out)?;
    Ok(out)
}

/// SAE and training settings of the synthetic demo.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoOptions {
    pub world: ToyWorldConfig,
    pub sae: SaeConfig,
    pub train: TrainConfig,
    pub host_seed: u64,
    pub threads: usize,
}

impl Default for DemoOptions {
    fn default() -> Self {
        let k = 1;
        Self {
            world: ToyWorldConfig::default(),
            sae: SaeConfig { d_s: 32, k },
            train: TrainConfig {
                lr: 1e-3,
                batch_size: 16,
                grad_accum_steps: 1,
                steps: 4000,
                aux_k: 2 * k,
                dead_token_threshold: 20_000,
                seed: 1,
                ..TrainConfig::default()
            },
            host_seed: 11,
            threads: 0,
        }
    }
}

/// A feature whose decoder column matches a planted concept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoMatch {
    pub feature: usize,
    pub concept: String,
    pub cosine: f64,
    pub explanation: Option<String>,
    pub refined_label: Option<String>,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub config: PathBuf,
    pub n_concepts: usize,
    pub concepts_recovered: usize,
    pub matches: Vec<DemoMatch>,
    pub scores: ScoreTable,
}

/// Cosine above which a decoder column counts as a planted concept.
pub const DEMO_MATCH_COSINE: f64 = 0.9;

/// Writes the toy world under `dir/world` and a run config `dir/demo.toml`
/// wired to mock clients that know the world's palette.
pub fn demo_config(dir: &Path, opts: &DemoOptions) -> Result<RunConfig> {
    let world_dir = dir.join("world");
    let world = ToyWorld::generate(opts.world.clone())?;
    let files = world.write(&world_dir, opts.host_seed)?;
    let palette = world.palette();
    let w = |p: &Path| PathBuf::from("world").join(p);
    let mut cfg = RunConfig {
        base_dir: dir.to_path_buf(),
        sae: Some(opts.sae.clone()),
        train: opts.train.clone(),
        threads: opts.threads,
        toyworld: opts.world.clone(),
        ..RunConfig::default()
    };
    let p = &mut cfg.paths;
    p.images = Some(w(&files.images));
    p.shards = Some("out/shards".into());
    p.params = Some("out/sae.prm".into());
    p.checkpoint = Some("out/sae.ckpt".into());
    p.metrics = Some("out/metrics.tsv".into());
    p.cache = Some("out/cache.spc".into());
    p.records = Some("out/records.jsonl".into());
    p.masks = Some(w(&files.grounding));
    p.embeddings = Some(w(&files.embeddings));
    p.scores = Some("out/scores.tsv".into());
    p.archive = Some("out/archive.jsonl".into());
    p.attribution = Some("out/attribution.jsonl".into());
    p.out_dir = Some("out".into());
    cfg.host.spec = Some(w(&files.host));
    cfg.host.image_shards = Some(w(Path::new("shards")));
    cfg.clients.explainer = Some(crate::config::ClientSpec::Palette {
        palette: palette.clone(),
        tolerance: None,
        min_share: None,
    });
    cfg.clients.judge = Some(crate::config::ClientSpec::PaletteJudge {
        palette,
        tolerance: None,
        min_share: None,
    });
    cfg.clients.refiner = Some(crate::config::ClientSpec::Keyed {
        entries: world.refiner().entries,
        default: None,
    });
    cfg.clients.categorizer = Some(crate::config::ClientSpec::Keyed {
        entries: world.categorizer().entries,
        default: None,
    });
    cfg.steer.prompt = "what is your feeling right now ?".into();
    cfg.steer.image = world.images.first().map(|i| i.id.clone());
    cfg.attribute.prompt = cfg.steer.prompt.clone();
    cfg.attribute.image = cfg.steer.image.clone();
    cfg.attribute.v_b = Some("no".into());
    cfg.probe.image = cfg.steer.image.clone();
    cfg.probe.k_top = opts.sae.k;
    cfg.validate()?;
    let text = cfg.to_toml()?;
    std::fs::write(dir.join("demo.toml"), text).map_err(Error::at_path(dir.join("demo.toml")))?;
    Ok(cfg)
}

/// Runs every file-producing stage of `cfg` in order.
pub fn run_all(cfg: &RunConfig) -> Result<()> {
    cache_activations(cfg)?;
    train(cfg, |_| {})?;
    encode_cache(cfg)?;
    top_images(cfg)?;
    explain(cfg)?;
    refine(cfg)?;
    categorize(cfg)?;
    evaluate(cfg)?;
    consistency(cfg)?;
    Ok(())
}

/// Generates a planted-concept world under `dir`, runs the full pipeline
/// with mock clients and reports how planted concepts were recovered.
pub fn demo_synthetic(dir: &Path, opts: &DemoOptions) -> Result<DemoReport> {
    std::fs::create_dir_all(dir).map_err(Error::at_path(dir))?;
    let cfg = demo_config(dir, opts)?;
    run_all(&cfg)?;
    let report = demo_report(&cfg)?;
    write_json(&cfg.out_dir().join("demo_report.json"), &report)?;
    Ok(report)
}

/// Matches learned decoder columns to the planted concepts of the demo
/// world and collects their records.
pub fn demo_report(cfg: &RunConfig) -> Result<DemoReport> {
    let world_path = cfg.resolve(Path::new("world/world.json"));
    let world = WorldSummary::load(&world_path)?;
    let params = SaeParams::load(cfg.existing_path("params")?)?;
    let records: BTreeMap<usize, FeatureRecord> = interpret::read_records(cfg.existing_path("records")?)?
        .into_iter()
        .map(|r| (r.feature_index, r))
        .collect();
    let mut matches = Vec::new();
    let mut recovered = std::collections::BTreeSet::new();
    for j in 0..params.d_sae() {
        if let Some((c, cos)) = world.matching_concept(&params, j, DEMO_MATCH_COSINE) {
            recovered.insert(c);
            let r = records.get(&j);
            matches.push(DemoMatch {
                feature: j,
                concept: world.concepts[c].name.clone(),
                cosine: cos,
                explanation: r.and_then(|r| r.explanation.clone()),
                refined_label: r.and_then(|r| r.refined_label.clone()),
                iou: r.and_then(|r| r.scores.iou),
            });
        }
    }
    let scores_path = scores_json_path(&cfg.path("scores")?);
    let text = std::fs::read_to_string(&scores_path).map_err(Error::at_path(&scores_path))?;
    Ok(DemoReport {
        config: cfg.base_dir.join("demo.toml"),
        n_concepts: world.concepts.len(),
        concepts_recovered: recovered.len(),
        matches,
        scores: serde_json::from_str(&text)?,
    })
}
