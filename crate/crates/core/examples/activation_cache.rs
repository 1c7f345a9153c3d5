// SPDX-License-Identifier: MIT OR Apache-2.0

//! Writes activation shards, trains a small SAE on them, encodes the
//! sparse feature cache and reads top images and heatmaps back out.
//!
//! `cargo run --release --example activation_cache [dir]`

use std::path::PathBuf;

use lmm_sae::store::{self, build_sparse_cache, read_shard, write_shard, SparseFeatureCache};
use lmm_sae::toyworld::{ToyWorld, ToyWorldConfig};
use lmm_sae::trainer::{train, TrainConfig};

fn main() -> lmm_sae::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "cache-run".into()));
    std::fs::create_dir_all(&dir)?;
    let world = ToyWorld::generate(ToyWorldConfig {
        n_images: 120,
        images_per_shard: 50,
        ..ToyWorldConfig::default()
    })?;

    let mut shards = Vec::new();
    for (i, s) in world.shards.iter().enumerate() {
        let p = dir.join(format!("shard_{i:03}.act"));
        write_shard(s, &p)?;
        shards.push(read_shard(&p)?);
    }
    println!(
        "{} shards, {} images, d_l={}",
        shards.len(),
        world.images.len(),
        shards[0].d_l
    );

    let cfg = TrainConfig {
        steps: 1500,
        batch_size: 16,
        ..TrainConfig::for_k(1)
    };
    let params = train(&shards, 32, 1, &cfg, |_| {})?.trainer.params;
    let cache = build_sparse_cache(&shards, &params)?;
    let path = dir.join("cache.spc");
    cache.save(&path)?;
    let cache = SparseFeatureCache::load(&path)?;
    println!(
        "cache: {} images x {} tokens, k={}",
        cache.n_images(),
        cache.tokens_per_image(),
        cache.k()
    );

    let index = cache.feature_index();
    let j = (0..cache.d_sae()).max_by_key(|&j| index[j].len()).unwrap_or(0);
    let top = store::top_images(&cache, j, 3)?;
    println!("feature {j} fires on {} images; top:", index[j].len());
    for t in &top.top_images {
        let hm = store::token_heatmap(&cache, &t.image_id, j)?;
        println!("  {} mean {:.3}", t.image_id, t.mean);
        for r in 0..hm.rows {
            let row: Vec<String> = (0..hm.cols).map(|c| format!("{:5.2}", hm.at(r, c))).collect();
            println!("    {}", row.join(" "));
        }
    }
    Ok(())
}
