// SPDX-License-Identifier: MIT OR Apache-2.0

//! Encodes a token with a hand-built SAE, reconstructs it, and clamps a
//! feature before TopK selection.
//!
//! `cargo run --example sae_basics`

use lmm_sae::sae::{decode, encode, pre_activations, steer, SaeParams, SteerSpec};

fn main() -> lmm_sae::Result<()> {
    let (d_l, d_s, k) = (3, 4, 2);
    let mut p = SaeParams::zeros(d_l, d_s, k)?;
    let atoms = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.6, 0.8, 0.0]];
    for (j, a) in atoms.iter().enumerate() {
        p.encoder_row_mut(j).copy_from_slice(a);
        p.decoder_column_mut(j).copy_from_slice(a);
    }

    let x = [0.9, 0.3, 0.1];
    let z_pre = pre_activations(&x, &p)?;
    let state = encode(&x, &p)?;
    println!("pre-activations {z_pre:?}");
    println!("active {:?} values {:?}", state.active, state.values);
    println!("reconstruction {:?}", decode(&state, &p)?);

    let clamped = steer(&z_pre, &SteerSpec::all_tokens(2, 5.0), k)?;
    println!(
        "feature 2 clamped to 5: active {:?} values {:?}",
        clamped.active, clamped.values
    );
    println!("steered reconstruction {:?}", decode(&clamped, &p)?);

    let path = std::env::temp_dir().join("sae_basics.prm");
    p.save(&path)?;
    assert_eq!(SaeParams::load(&path)?, p);
    println!("saved and reloaded {}", path.display());
    Ok(())
}
