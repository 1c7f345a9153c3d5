// SPDX-License-Identifier: MIT OR Apache-2.0

//! Builds evidence records for a few features and runs them through the
//! explain, refine and categorize steps with the toy world's mock clients.
//!
//! `cargo run --release --example interpret_features [dir]`

use std::collections::HashMap;
use std::path::PathBuf;

use lmm_sae::interpret::{
    build_record, categorize, explain_feature, masked_images, refine_label, Archive, BinarizeMode, DirImageSource,
    PromptSet,
};
use lmm_sae::store::{self, build_sparse_cache};
use lmm_sae::toyworld::{ToyWorld, ToyWorldConfig};
use lmm_sae::trainer::{train, TrainConfig};

fn main() -> lmm_sae::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "interpret-run".into()));
    let world = ToyWorld::generate(ToyWorldConfig {
        n_images: 200,
        ..ToyWorldConfig::default()
    })?;
    let files = world.write(&dir, 1)?;
    let cfg = TrainConfig {
        steps: 3000,
        batch_size: 16,
        ..TrainConfig::for_k(1)
    };
    let params = train(&world.shards, 32, 1, &cfg, |_| {})?.trainer.params;
    let mut cache = build_sparse_cache(&world.shards, &params)?;
    let sources: HashMap<String, String> = store::read_image_manifest(dir.join(&files.images))?
        .into_iter()
        .map(|e| (e.image_id, e.source))
        .collect();
    cache.set_sources(&sources);

    let images = DirImageSource { root: dir.clone() };
    let prompts = PromptSet::default();
    let archive = Archive::disabled();
    let (explainer, refiner, categorizer) = (world.explainer(), world.refiner(), world.categorizer());
    let mut shown = 0;
    for j in 0..cache.d_sae() {
        let record = build_record(&cache, j, 5, BinarizeMode::default())?;
        if record.top_images.is_empty() {
            continue;
        }
        let masked = masked_images(&record, &images)?;
        let explanation = explain_feature(&masked, &explainer, &prompts, &archive, j)?;
        if explanation == lmm_sae::interpret::SENTINEL {
            continue;
        }
        let refined = refine_label(&explanation, &refiner, &prompts, &archive, j)?;
        let concept = categorize(&refined.label, &categorizer, &prompts, &archive, j)?;
        println!(
            "feature {j:>3}: {:<14} -> {:<14} [{concept}]  top image {}",
            explanation, refined.label, record.top_images[0].image_id
        );
        shown += 1;
        if shown == 6 {
            break;
        }
    }
    Ok(())
}
