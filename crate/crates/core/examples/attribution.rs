// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exact ablation attribution against the one-pass gradient approximation
//! on a linear toy host where no feature gets re-selected.
//!
//! `cargo run --example attribution`

use lmm_sae::attribution::{approx_attribution, attribution_maps, exact_attribution, Scope};
use lmm_sae::host::{HostInput, ToyLinearHost, ToyVocab};
use lmm_sae::sae::SaeParams;
use lmm_sae::store::Grid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> lmm_sae::Result<()> {
    let (d_l, d_s) = (8, 12);
    let vocab = ToyVocab::default();
    let host = ToyLinearHost::random(d_l, vocab.len(), Grid::new(2, 2)?, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = |n: usize| (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
    // k = d_s: every positive pre-activation is already selected
    let mut params = SaeParams::new(d_l, d_s, d_s, g(d_s * d_l), g(d_l), g(d_s), g(d_l * d_s), g(d_l))?;
    params.b_enc_mut().fill(-0.2);

    let input = HostInput::text(vocab.encode("tell me a story about the image"));
    let (v_c, v_b) = (vocab.id("yes").unwrap() as usize, vocab.id("no").unwrap() as usize);
    let exact = exact_attribution(&host, &input, &params, v_c, v_b, &Scope::Active)?;
    let approx = approx_attribution(&host, &input, &params, v_c, v_b)?;
    println!(
        "d(yes, no) = {:.5}; {} active (token, feature) pairs",
        exact.baseline,
        exact.entries.len()
    );
    let mut worst = 0f64;
    for e in &exact.entries {
        let a = approx.get(e.token, e.feature).expect("same scope");
        worst = worst.max((e.influence - a.influence).abs() / e.influence.abs().max(1e-12));
    }
    println!("largest relative gap between exact and approx: {worst:.2e}");
    for m in attribution_maps(&exact, 5) {
        let top: Vec<String> = m.ranking.iter().map(|(j, v)| format!("f{j}:{v:.4}")).collect();
        println!(
            "{:?} tokens {}..{}: {}",
            m.label,
            m.range.start,
            m.range.end,
            top.join(" ")
        );
    }
    Ok(())
}
