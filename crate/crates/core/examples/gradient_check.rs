// SPDX-License-Identifier: MIT OR Apache-2.0

//! Compares the analytic reconstruction gradient with central finite
//! differences on a few random encoder and decoder weights.
//!
//! `cargo run --release --example gradient_check`

use lmm_sae::sae::SaeParams;
use lmm_sae::trainer::{loss_and_grads, total_loss};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> lmm_sae::Result<()> {
    let (d_l, d_s, k, aux_k, aux_coef) = (6, 10, 3, 4, 1.0 / 32.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = |n: usize| (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
    let p = SaeParams::new(d_l, d_s, k, g(d_s * d_l), g(d_l), g(d_s), g(d_l * d_s), g(d_l))?;
    let x = g(8 * d_l);
    let dead = vec![false; d_s];

    let (_, grads) = loss_and_grads(&x, &p, &dead, aux_k, aux_coef)?;
    let loss = |q: &SaeParams| -> f64 {
        let parts = total_loss(&x, q, &dead, aux_k).unwrap();
        parts.total(aux_coef)
    };
    let h = 1e-3f32;
    for (i, j) in [(0usize, 0usize), (3, 2), (7, 5)] {
        let mut plus = p.clone();
        plus.encoder_row_mut(i)[j] += h;
        let mut minus = p.clone();
        minus.encoder_row_mut(i)[j] -= h;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h as f64);
        println!(
            "d/dW_enc[{i},{j}]  analytic {:+.6}  numeric {:+.6}",
            grads.w_enc[i * d_l + j],
            fd
        );

        let mut plus = p.clone();
        plus.decoder_column_mut(i)[j] += h;
        let mut minus = p.clone();
        minus.decoder_column_mut(i)[j] -= h;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h as f64);
        println!(
            "d/dW_dec[{j},{i}]  analytic {:+.6}  numeric {:+.6}",
            grads.w_dec[i * d_l + j],
            fd
        );
    }
    Ok(())
}
