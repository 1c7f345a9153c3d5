// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trains a TopK SAE on a planted sparse dictionary and reports how well
//! the learned decoder columns line up with the true atoms.
//!
//! `cargo run --release --example dictionary_recovery -- [steps] [batch]`

use std::time::Instant;

use lmm_sae::synth::{mean_max_cosine, synth_gen, SynthConfig};
use lmm_sae::trainer::{train, TrainConfig};

fn main() -> lmm_sae::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let corpus = synth_gen(&SynthConfig::new(64, 512, 8, 200_000, 0.01, 7))?;
    let config = TrainConfig {
        steps,
        dead_token_threshold: 20_000,
        lr: 1e-3,
        batch_size: std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(32),
        grad_accum_steps: 4,
        ..TrainConfig::for_k(8)
    };
    let start = Instant::now();
    let out = train(&corpus.shards, 512, 8, &config, |m| {
        if m.step % 200 == 0 {
            println!(
                "step {:5}  recon {:.4}  aux {:.4}  dead {}",
                m.step, m.recon_loss, m.aux_loss, m.dead_count
            );
        }
    })?;
    let cos = mean_max_cosine(&corpus.dictionary, corpus.d_l, out.params());
    println!("mean max cosine {cos:.4} after {steps} steps ({:.1?})", start.elapsed());
    Ok(())
}
