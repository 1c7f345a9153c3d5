// SPDX-License-Identifier: MIT OR Apache-2.0

//! Clamps each recovered concept feature on the toy host and compares the
//! greedy continuation with the unsteered one.
//!
//! `cargo run --release --example steering [dir]`

use std::path::PathBuf;

use lmm_sae::host::{self, HostInput, ToyVocab};
use lmm_sae::pipeline::{self, DemoOptions};
use lmm_sae::sae::SaeParams;

fn main() -> lmm_sae::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "steer-run".into()));
    let report = pipeline::demo_synthetic(&dir, &DemoOptions::default())?;
    let cfg = lmm_sae::config::RunConfig::load(&report.config, &[])?;
    let host = pipeline::build_host(&cfg)?;
    let params = SaeParams::load(cfg.path("params")?)?;
    let prompt = "what is your feeling right now ?";
    let image = Some("img00000".to_string());

    let input = HostInput {
        image: image.clone(),
        text: ToyVocab::default().encode(prompt),
    };
    let plain = host::hooked_forward(host.as_ref(), &input, &params, &[])?;
    println!(
        "unsteered argmax: {}",
        ToyVocab::default().decode(&[host::argmax(&plain.logits) as u32])
    );

    for m in report.matches.iter().take(4) {
        let r = pipeline::steer_compare(host.as_ref(), &params, prompt, image.clone(), m.feature, 10.0, &[], 4)?;
        println!(
            "feature {:>3} ({:<13}) clamped to 10: {:<24} | unsteered: {}",
            m.feature, m.concept, r.steered.text, r.unsteered.text
        );
    }
    Ok(())
}
