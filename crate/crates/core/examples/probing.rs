// SPDX-License-Identifier: MIT OR Apache-2.0

//! Lists the features most active on one image together with their labels,
//! the starting point for picking features to steer.
//!
//! `cargo run --release --example probing [dir]`

use std::path::PathBuf;

use lmm_sae::attribution::probe_features;
use lmm_sae::interpret::read_records;
use lmm_sae::pipeline::{self, DemoOptions};
use lmm_sae::store::SparseFeatureCache;

fn main() -> lmm_sae::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "probe-run".into()));
    let report = pipeline::demo_synthetic(&dir, &DemoOptions::default())?;
    let cfg = lmm_sae::config::RunConfig::load(&report.config, &[])?;
    let cache = SparseFeatureCache::load(cfg.path("cache")?)?;
    let records = read_records(cfg.path("records")?)?;
    for image in ["img00000", "img00001", "img00002"] {
        println!("{image}:");
        for (j, mean) in probe_features(&cache, image, 5, 0)? {
            let label = records
                .iter()
                .find(|r| r.feature_index == j)
                .and_then(|r| r.refined_label.clone())
                .unwrap_or_else(|| "-".into());
            println!("  feature {j:>3}  mean {mean:.3}  {label}");
        }
    }
    Ok(())
}
