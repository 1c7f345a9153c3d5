// SPDX-License-Identifier: MIT OR Apache-2.0

//! Serves a toy host over the line-oriented exchange protocol on a local
//! socket and drives it from the client side as an ordinary host.
//!
//! `cargo run --example exchange_host`

use std::net::TcpListener;

use lmm_sae::exchange::{serve_tcp, ExchangeHost};
use lmm_sae::host::{HostInput, HostModel, ToyLinearHost, ToyVocab};
use lmm_sae::store::Grid;

fn main() -> lmm_sae::Result<()> {
    let vocab = ToyVocab::default();
    let local = ToyLinearHost::random(8, vocab.len(), Grid::new(2, 2)?, 5);
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let served = local.clone();
    std::thread::spawn(move || serve_tcp(&served, 16, listener));

    let remote = ExchangeHost::connect(addr)?;
    println!(
        "connected to {addr}: d_l={} vocab={} max tokens={}",
        remote.d_model(),
        remote.vocab(),
        remote.tokens()
    );
    let input = HostInput::text(vocab.encode("what is your feeling right now ?"));
    let x = remote.run(&input)?;
    let u_remote = remote.complete(&x)?;
    let u_local = local.complete(&local.run(&input)?)?;
    let gap = u_remote
        .iter()
        .zip(&u_local)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!(
        "{} tokens, largest logit gap between remote and local: {gap:.2e}",
        x.tokens
    );
    Ok(())
}
