// SPDX-License-Identifier: MIT OR Apache-2.0

//! Runs the planted-concept pipeline end to end with mock clients.
//!
//! `cargo run --release --example synthetic_demo [out_dir]`

use lmm_sae::pipeline::{demo_synthetic, DemoOptions};

fn main() -> lmm_sae::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let dir = std::env::args().nth(1).unwrap_or_else(|| "demo-run".into());
    let t0 = std::time::Instant::now();
    let report = demo_synthetic(std::path::Path::new(&dir), &DemoOptions::default())?;
    println!(
        "recovered {}/{} planted concepts in {:.1?}",
        report.concepts_recovered,
        report.n_concepts,
        t0.elapsed()
    );
    for m in &report.matches {
        println!(
            "feature {:>3}  {:<14} cos {:.3}  explanation {:<16} iou {}",
            m.feature,
            m.concept,
            m.cosine,
            m.explanation.as_deref().unwrap_or("-"),
            m.iou.map_or("-".to_string(), |v| format!("{v:.3}"))
        );
    }
    print!("{}", report.scores.to_tsv());
    Ok(())
}
