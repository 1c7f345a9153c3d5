// SPDX-License-Identifier: MIT OR Apache-2.0

//! Runs the synthetic demo and serves it over HTTP.
//!
//! `cargo run --release --example serve_run [dir] [addr]`, then for example
//! `curl 'http://127.0.0.1:8080/api/v1/features?sort=iou'`.

use std::path::PathBuf;

use lmm_sae::config::RunConfig;
use lmm_sae::pipeline::{self, DemoOptions};
use lmm_sae::service;

fn main() -> lmm_sae::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "serve-run".into()));
    let addr = args.next().unwrap_or_else(|| "127.0.0.1:8080".into());
    let report = pipeline::demo_synthetic(&dir, &DemoOptions::default())?;
    let mut cfg = RunConfig::load(&report.config, &[])?;
    cfg.serve.addr = addr;
    service::serve(&cfg)
}
