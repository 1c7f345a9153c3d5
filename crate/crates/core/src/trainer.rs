// SPDX-License-Identifier: MIT OR Apache-2.0

//! SAE training: reconstruction loss plus the dead-latent auxiliary loss,
//! analytic gradients, Adam with bias correction, gradient accumulation and
//! dead-feature tracking.
//!
//! Losses are a mean over tokens of a sum over dimensions. The auxiliary
//! term reconstructs the (detached) residual `x - x_hat` from the `aux_k`
//! largest pre-activations among currently dead latents, without the
//! decoder bias.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{self, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::linalg;
use crate::sae::{self, SaeParams};
use crate::store::ActivationShard;

const OPT_MAGIC: &[u8; 8] = b"SAEOPT1\0";
const OPT_VERSION: u32 = 1;

/// Optimiser and loss settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Images per micro-batch (each image contributes `T` tokens).
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub steps: usize,
    pub aux_coef: f64,
    pub aux_k: usize,
    /// Tokens without activation after which a latent counts as dead.
    pub dead_token_threshold: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            grad_accum_steps: 4,
            steps: 1000,
            aux_coef: 1.0 / 32.0,
            aux_k: 512,
            dead_token_threshold: 100_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults with `aux_k = 2k`.
    pub fn for_k(k: usize) -> Self {
        Self {
            aux_k: 2 * k,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be positive"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("adam_eps must be positive"));
        }
        if self.batch_size < 1 || self.grad_accum_steps < 1 || self.aux_k < 1 {
            return Err(Error::invalid(
                "batch_size, grad_accum_steps and aux_k must be at least 1",
            ));
        }
        if !(self.aux_coef >= 0.0) {
            return Err(Error::invalid("aux_coef must be non-negative"));
        }
        Ok(())
    }
}

/// One line of the metrics series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub step: usize,
    pub recon_loss: f64,
    pub aux_loss: f64,
    pub dead_count: usize,
    /// Mean over tokens of `|active| / d_s`.
    pub fraction_active_mean: f64,
}

/// Reconstruction and auxiliary parts of the loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub recon: f64,
    pub aux: f64,
}

impl LossParts {
    pub fn total(&self, aux_coef: f64) -> f64 {
        self.recon + aux_coef * self.aux
    }
}

/// Gradients with the same layout as [`SaeParams`]; `w_dec` is stored as
/// atoms (`d_s` rows of length `d_l`).
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub w_enc: Vec<f64>,
    pub b_pre: Vec<f64>,
    pub b_enc: Vec<f64>,
    pub w_dec: Vec<f64>,
    pub b_dec: Vec<f64>,
}

impl Grads {
    pub fn zeros(d_l: usize, d_s: usize) -> Self {
        Self {
            w_enc: vec![0.0; d_s * d_l],
            b_pre: vec![0.0; d_l],
            b_enc: vec![0.0; d_s],
            w_dec: vec![0.0; d_s * d_l],
            b_dec: vec![0.0; d_l],
        }
    }

    fn scale(&mut self, s: f64) {
        for g in self.groups_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    fn groups_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [
            &mut self.w_enc,
            &mut self.b_pre,
            &mut self.b_enc,
            &mut self.w_dec,
            &mut self.b_dec,
        ]
    }

    fn groups(&self) -> [&Vec<f64>; 5] {
        [&self.w_enc, &self.b_pre, &self.b_enc, &self.w_dec, &self.b_dec]
    }
}

fn param_groups_mut(p: &mut SaeParams) -> [&mut Vec<f32>; 5] {
    [&mut p.w_enc, &mut p.b_pre, &mut p.b_enc, &mut p.atoms, &mut p.b_dec]
}

struct TokenForward {
    centered: Vec<f32>,
    state: sae::LatentState,
    xhat: Vec<f32>,
}

fn forward_token(x: &[f32], params: &SaeParams) -> Result<TokenForward> {
    let centered: Vec<f32> = x.iter().zip(params.b_pre()).map(|(a, b)| a - b).collect();
    let state = sae::encode(x, params)?;
    let xhat = sae::decode(&state, params)?;
    Ok(TokenForward { centered, state, xhat })
}

/// Top `aux_k` strictly positive pre-activations among dead latents.
fn dead_topk(z_pre: &[f32], dead: &[bool], aux_k: usize) -> Vec<usize> {
    let mut cand: Vec<usize> = (0..z_pre.len()).filter(|&j| dead[j] && z_pre[j] > 0.0).collect();
    if cand.len() > aux_k {
        cand.select_nth_unstable_by(aux_k - 1, |&a, &b| z_pre[b].total_cmp(&z_pre[a]).then(a.cmp(&b)));
        cand.truncate(aux_k);
    }
    cand.sort_unstable();
    cand
}

/// Backpropagates `dL/dz_j` into encoder row `j`, `b_enc[j]` and `b_pre`.
fn encoder_backward(g: &mut Grads, params: &SaeParams, j: usize, dz: f64, centered: &[f32]) {
    let d_l = params.d_model();
    linalg::axpy(&mut g.w_enc[j * d_l..(j + 1) * d_l], dz, centered);
    g.b_enc[j] += dz;
    linalg::axpy(&mut g.b_pre, -dz, params.encoder_row(j));
}

/// Accumulates the token's loss gradient (unnormalised) and returns its
/// `(recon, aux)` contributions.
fn backward_token(
    x: &[f32],
    fwd: &TokenForward,
    params: &SaeParams,
    dead: &[bool],
    aux_k: usize,
    aux_coef: f64,
    g: &mut Grads,
) -> (f64, f64) {
    let d_l = params.d_model();
    let resid: Vec<f64> = fwd.xhat.iter().zip(x).map(|(h, x)| *h as f64 - *x as f64).collect();
    let recon: f64 = resid.iter().map(|r| r * r).sum();
    let g_xhat: Vec<f64> = resid.iter().map(|r| 2.0 * r).collect();
    for (a, b) in g.b_dec.iter_mut().zip(&g_xhat) {
        *a += b;
    }
    for (&j, &z) in fwd.state.active.iter().zip(&fwd.state.values) {
        let atom_g = &mut g.w_dec[j * d_l..(j + 1) * d_l];
        for (a, b) in atom_g.iter_mut().zip(&g_xhat) {
            *a += z as f64 * b;
        }
        let dz = dot64(params.decoder_column(j), &g_xhat);
        encoder_backward(g, params, j, dz, &fwd.centered);
    }

    let mut aux = 0.0;
    if dead.iter().any(|&d| d) {
        let chosen = dead_topk(&fwd.state.z_pre, dead, aux_k);
        if !chosen.is_empty() {
            let mut ehat = vec![0f64; d_l];
            for &j in &chosen {
                linalg::axpy(&mut ehat, fwd.state.z_pre[j] as f64, params.decoder_column(j));
            }
            // residual e = x - x_hat = -resid, treated as a constant target
            let q: Vec<f64> = ehat.iter().zip(&resid).map(|(eh, r)| eh + r).collect();
            aux = q.iter().map(|v| v * v).sum();
            if aux_coef > 0.0 {
                let h: Vec<f64> = q.iter().map(|v| 2.0 * aux_coef * v).collect();
                for &j in &chosen {
                    let z = fwd.state.z_pre[j] as f64;
                    let atom_g = &mut g.w_dec[j * d_l..(j + 1) * d_l];
                    for (a, b) in atom_g.iter_mut().zip(&h) {
                        *a += z * b;
                    }
                    let dz = dot64(params.decoder_column(j), &h);
                    encoder_backward(g, params, j, dz, &fwd.centered);
                }
            }
        }
    }
    (recon, aux)
}

#[inline]
fn dot64(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * y).sum()
}

fn check_batch(x: &[f32], params: &SaeParams, dead: &[bool]) -> Result<usize> {
    let d_l = params.d_model();
    if x.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if !x.len().is_multiple_of(d_l) {
        return Err(Error::invalid(format!(
            "batch length {} is not a multiple of d_l={d_l}",
            x.len()
        )));
    }
    if dead.len() != params.d_sae() {
        return Err(Error::invalid("dead mask length differs from d_s"));
    }
    Ok(x.len() / d_l)
}

/// Mean reconstruction and auxiliary losses of a token batch (`n x d_l`).
pub fn total_loss(x: &[f32], params: &SaeParams, dead: &[bool], aux_k: usize) -> Result<LossParts> {
    let (parts, _) = loss_and_grads(x, params, dead, aux_k, 0.0)?;
    Ok(parts)
}

/// Mean losses and the gradient of `recon + aux_coef * aux`.
pub fn loss_and_grads(
    x: &[f32],
    params: &SaeParams,
    dead: &[bool],
    aux_k: usize,
    aux_coef: f64,
) -> Result<(LossParts, Grads)> {
    let n = check_batch(x, params, dead)?;
    let mut g = Grads::zeros(params.d_model(), params.d_sae());
    let (r, a, _) = accumulate(x, params, dead, aux_k, aux_coef, &mut g)?;
    g.scale(1.0 / n as f64);
    Ok((
        LossParts {
            recon: r / n as f64,
            aux: a / n as f64,
        },
        g,
    ))
}

/// Adds the unnormalised gradient of a batch into `g`; returns summed
/// recon, summed aux and each token's active set.
fn accumulate(
    x: &[f32],
    params: &SaeParams,
    dead: &[bool],
    aux_k: usize,
    aux_coef: f64,
    g: &mut Grads,
) -> Result<(f64, f64, Vec<Vec<usize>>)> {
    let d_l = params.d_model();
    let fwd: Vec<TokenForward> = x
        .par_chunks(d_l)
        .map(|tok| forward_token(tok, params))
        .collect::<Result<_>>()?;
    let mut recon = 0.0;
    let mut aux = 0.0;
    let mut actives = Vec::with_capacity(fwd.len());
    for (tok, f) in x.chunks_exact(d_l).zip(fwd) {
        let (r, a) = backward_token(tok, &f, params, dead, aux_k, aux_coef, g);
        recon += r;
        aux += a;
        actives.push(f.state.active);
    }
    Ok((recon, aux, actives))
}

/// Adam moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamMoments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update at step `t >= 1`.
pub fn adam_step(
    theta: &mut [f32],
    grad: &[f64],
    moments: &mut AdamMoments,
    config: &TrainConfig,
    t: u64,
) -> Result<()> {
    if t < 1 {
        return Err(Error::invalid("adam step counter starts at 1"));
    }
    if theta.len() != grad.len() || moments.m.len() != grad.len() || moments.v.len() != grad.len() {
        return Err(Error::invalid("adam shapes differ"));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::TrainingDiverged(format!("non-finite gradient at index {i}")));
    }
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for ((p, &g), (m, v)) in theta
        .iter_mut()
        .zip(grad)
        .zip(moments.m.iter_mut().zip(moments.v.iter_mut()))
    {
        let m1 = b1 * *m as f64 + (1.0 - b1) * g;
        let v1 = b2 * *v as f64 + (1.0 - b2) * g * g;
        *m = m1 as f32;
        *v = v1 as f32;
        let step = config.lr * (m1 / bc1) / ((v1 / bc2).sqrt() + config.adam_eps);
        *p = (*p as f64 - step) as f32;
    }
    Ok(())
}

/// Updates per-feature "tokens since last active" counters with one batch
/// and returns the dead set.
///
/// Features active anywhere in the batch reset to 0; all others grow by the
/// batch's token count. A feature is dead once its counter reaches
/// `threshold`.
pub fn track_dead(actives: &[Vec<usize>], counters: &mut [u64], threshold: u64) -> Vec<usize> {
    let mut seen = vec![false; counters.len()];
    for a in actives {
        for &j in a {
            seen[j] = true;
        }
    }
    let n = actives.len() as u64;
    for (c, s) in counters.iter_mut().zip(&seen) {
        *c = if *s { 0 } else { c.saturating_add(n) };
    }
    counters
        .iter()
        .enumerate()
        .filter(|(_, &c)| c >= threshold)
        .map(|(j, _)| j)
        .collect()
}

/// Initial parameters: Gaussian encoder scaled by `1/sqrt(d_l)`, decoder
/// equal to its transpose, `b_pre` the mean of `calibration`, other biases 0.
pub fn init_params(d_l: usize, d_s: usize, k: usize, calibration: &[f32], seed: u64) -> Result<SaeParams> {
    let mut p = SaeParams::zeros(d_l, d_s, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (d_l as f64).sqrt();
    for w in p.w_enc.iter_mut() {
        let s: f64 = StandardNormal.sample(&mut rng);
        *w = (s * scale) as f32;
    }
    p.atoms.copy_from_slice(&p.w_enc);
    if !calibration.is_empty() {
        if !calibration.len().is_multiple_of(d_l) {
            return Err(Error::invalid("calibration batch is not a multiple of d_l"));
        }
        let n = calibration.len() / d_l;
        let mut mean = vec![0f64; d_l];
        for tok in calibration.chunks_exact(d_l) {
            linalg::axpy(&mut mean, 1.0, tok);
        }
        for (b, m) in p.b_pre.iter_mut().zip(mean) {
            *b = (m / n as f64) as f32;
        }
    }
    Ok(p)
}

/// Parameters, Adam moments and dead counters of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: SaeParams,
    moments: Vec<AdamMoments>,
    counters: Vec<u64>,
    t: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, params: SaeParams) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        let sizes = [
            params.w_enc.len(),
            params.b_pre.len(),
            params.b_enc.len(),
            params.atoms.len(),
            params.b_dec.len(),
        ];
        let d_s = params.d_sae();
        Ok(Self {
            config,
            params,
            moments: sizes.iter().map(|&n| AdamMoments::zeros(n)).collect(),
            counters: vec![0; d_s],
            t: 0,
        })
    }

    /// Optimiser steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn dead_counters(&self) -> &[u64] {
        &self.counters
    }

    pub fn dead_mask(&self) -> Vec<bool> {
        self.counters
            .iter()
            .map(|&c| c >= self.config.dead_token_threshold)
            .collect()
    }

    /// One optimiser step over several micro-batches (`n_i x d_l` each).
    ///
    /// Gradients are summed over all tokens and divided by the total token
    /// count, so accumulating micro-batches equals one step on their
    /// concatenation. The dead set is fixed for the whole step.
    pub fn step(&mut self, micro_batches: &[&[f32]]) -> Result<TrainMetrics> {
        let d_l = self.params.d_model();
        let d_s = self.params.d_sae();
        let dead = self.dead_mask();
        let mut g = Grads::zeros(d_l, d_s);
        let mut recon = 0.0;
        let mut aux = 0.0;
        let mut actives = Vec::new();
        let mut n = 0usize;
        for mb in micro_batches {
            n += check_batch(mb, &self.params, &dead)?;
            let (r, a, act) = accumulate(mb, &self.params, &dead, self.config.aux_k, self.config.aux_coef, &mut g)?;
            recon += r;
            aux += a;
            actives.extend(act);
        }
        if n == 0 {
            return Err(Error::invalid("empty step"));
        }
        let recon = recon / n as f64;
        let aux = aux / n as f64;
        if !recon.is_finite() || !aux.is_finite() {
            return Err(Error::TrainingDiverged(format!(
                "loss became non-finite at step {}",
                self.t + 1
            )));
        }
        g.scale(1.0 / n as f64);
        self.t += 1;
        let t = self.t;
        let groups = g.groups();
        for ((theta, grad), mom) in param_groups_mut(&mut self.params)
            .into_iter()
            .zip(groups)
            .zip(self.moments.iter_mut())
        {
            adam_step(theta, grad, mom, &self.config, t)?;
        }
        let active_total: usize = actives.iter().map(Vec::len).sum();
        let dead_now = track_dead(&actives, &mut self.counters, self.config.dead_token_threshold);
        Ok(TrainMetrics {
            step: t as usize,
            recon_loss: recon,
            aux_loss: aux,
            dead_count: dead_now.len(),
            fraction_active_mean: active_total as f64 / (actives.len() * d_s) as f64,
        })
    }

    /// Serialises the optimiser state (moments, dead counters, step).
    pub fn optimizer_state_bytes(&self) -> Result<Vec<u8>> {
        let p = &self.params;
        let mut w = ByteWriter::with_capacity(64 + 16 * p.w_enc.len());
        w.bytes(OPT_MAGIC);
        w.u32(OPT_VERSION);
        w.u32(binio::to_u32(p.d_model(), "d_l")?);
        w.u32(binio::to_u32(p.d_sae(), "d_s")?);
        w.u32(binio::to_u32(p.k(), "k")?);
        w.u64(self.t);
        w.end_header();
        for m in &self.moments {
            w.f32s(&m.m);
            w.f32s(&m.v);
        }
        for &c in &self.counters {
            w.u64(c);
        }
        Ok(w.finish())
    }

    /// Writes `params` to `path` and the optimiser sidecar to `path.opt`.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.params.save(path)?;
        binio::write_file(&sidecar_path(path), &self.optimizer_state_bytes()?)
    }

    /// Restores a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn resume(config: TrainConfig, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let params = SaeParams::load(path)?;
        let mut tr = Self::new(config, params)?;
        let buf = binio::read_file(&sidecar_path(path))?;
        let mut r = ByteReader::new(&buf, "optimizer state");
        r.preamble(OPT_MAGIC, OPT_VERSION)?;
        let dims = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        if dims != (tr.params.d_model(), tr.params.d_sae(), tr.params.k()) {
            return Err(Error::format(12, "optimizer state shape differs from parameters"));
        }
        let t = r.u64()?;
        let floats: usize = tr.moments.iter().map(|m| 2 * m.m.len()).sum();
        r.expect_body_and_trailer((floats * 4 + tr.counters.len() * 8) as u64)?;
        for m in tr.moments.iter_mut() {
            let n = m.m.len();
            m.m = r.f32s(n)?;
            m.v = r.f32s(n)?;
        }
        for c in tr.counters.iter_mut() {
            *c = r.u64()?;
        }
        tr.t = t;
        Ok(tr)
    }
}

/// Sidecar path holding optimiser state next to a parameter file.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".opt");
    std::path::PathBuf::from(s)
}

/// Result of [`train`].
#[derive(Debug)]
pub struct TrainOutput {
    pub trainer: Trainer,
    pub metrics: Vec<TrainMetrics>,
}

impl TrainOutput {
    pub fn params(&self) -> &SaeParams {
        &self.trainer.params
    }
}

const CALIBRATION_TOKENS: usize = 4096;

/// Trains a fresh SAE with `d_s` latents and sparsity `k` on `shards`.
///
/// Images are visited in a seeded shuffled order, reshuffled every epoch.
/// `on_step` observes each step's metrics as they are produced.
pub fn train(
    shards: &[ActivationShard],
    d_s: usize,
    k: usize,
    config: &TrainConfig,
    mut on_step: impl FnMut(&TrainMetrics),
) -> Result<TrainOutput> {
    config.validate()?;
    let first = shards
        .iter()
        .find(|s| s.n_images() > 0)
        .ok_or_else(|| Error::invalid("training needs at least one image"))?;
    let d_l = first.d_l;
    for (i, s) in shards.iter().enumerate() {
        if s.d_l != d_l {
            return Err(Error::invalid(format!("shard {i} has d_l={}, expected {d_l}", s.d_l)));
        }
    }
    let images: Vec<(usize, usize)> = shards
        .iter()
        .enumerate()
        .flat_map(|(si, s)| (0..s.n_images()).map(move |i| (si, i)))
        .collect();

    let mut order = images.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
    order.shuffle(&mut rng);

    let mut calib = Vec::new();
    for &(si, i) in &order {
        if calib.len() >= CALIBRATION_TOKENS * d_l {
            break;
        }
        calib.extend_from_slice(shards[si].image(i));
    }
    let params = init_params(d_l, d_s, k, &calib, config.seed)?;
    let mut trainer = Trainer::new(config.clone(), params)?;

    let mut cursor = 0usize;
    let mut metrics = Vec::with_capacity(config.steps);
    let mut bufs: Vec<Vec<f32>> = vec![Vec::new(); config.grad_accum_steps];
    for _ in 0..config.steps {
        for buf in bufs.iter_mut() {
            buf.clear();
            for _ in 0..config.batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let (si, i) = order[cursor];
                cursor += 1;
                buf.extend_from_slice(shards[si].image(i));
            }
        }
        let views: Vec<&[f32]> = bufs.iter().map(Vec::as_slice).collect();
        let m = trainer.step(&views)?;
        on_step(&m);
        metrics.push(m);
    }
    Ok(TrainOutput { trainer, metrics })
}

/// Writes the metrics series as a tab-separated table with a header row.
pub fn write_metrics(metrics: &[TrainMetrics], mut out: impl Write) -> Result<()> {
    writeln!(out, "step\trecon_loss\taux_loss\tdead_count\tfraction_active_mean")?;
    for m in metrics {
        writeln!(
            out,
            "{}\t{:.9e}\t{:.9e}\t{}\t{:.9e}",
            m.step, m.recon_loss, m.aux_loss, m.dead_count, m.fraction_active_mean
        )?;
    }
    Ok(())
}

/// Parses a table written by [`write_metrics`].
pub fn read_metrics(text: &str) -> Result<Vec<TrainMetrics>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Parse(format!("metrics line {}: {line:?}", n + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        out.push(TrainMetrics {
            step: f[0].parse().map_err(|_| bad())?,
            recon_loss: f[1].parse().map_err(|_| bad())?,
            aux_loss: f[2].parse().map_err(|_| bad())?,
            dead_count: f[3].parse().map_err(|_| bad())?,
            fraction_active_mean: f[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::LatentState;
    use rand::Rng;

    fn random_params(d_l: usize, d_s: usize, k: usize, seed: u64) -> SaeParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = |n: usize| (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
        SaeParams::new(d_l, d_s, k, g(d_s * d_l), g(d_l), g(d_s), g(d_l * d_s), g(d_l)).unwrap()
    }

    // Scalar-by-scalar re-implementation with plain loops.
    fn loss_oracle(x: &[f32], p: &SaeParams, dead: &[bool], aux_k: usize) -> (f64, f64) {
        let d_l = p.d_model();
        let d_s = p.d_sae();
        let w2 = p.w_dec_row_major();
        let n = x.len() / d_l;
        let (mut recon, mut aux) = (0.0, 0.0);
        for t in 0..n {
            let xt = &x[t * d_l..(t + 1) * d_l];
            let mut pre = vec![0f32; d_s];
            for j in 0..d_s {
                let mut acc = 0f64;
                for i in 0..d_l {
                    acc += p.w_enc[j * d_l + i] as f64 * (xt[i] - p.b_pre[i]) as f64;
                }
                pre[j] = ((acc + p.b_enc[j] as f64) as f32).max(0.0);
            }
            let st = LatentState::from_pre(pre.clone(), p.k()).unwrap();
            let z = st.dense();
            let mut xhat = vec![0f64; d_l];
            for r in 0..d_l {
                xhat[r] = p.b_dec[r] as f64;
                for c in 0..d_s {
                    xhat[r] += w2[r * d_s + c] as f64 * z[c] as f64;
                }
                recon += (xt[r] as f64 - xhat[r]).powi(2);
            }
            let mut dz: Vec<(usize, f32)> = (0..d_s)
                .filter(|&j| dead[j] && pre[j] > 0.0)
                .map(|j| (j, pre[j]))
                .collect();
            if dz.is_empty() {
                continue;
            }
            dz.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            dz.truncate(aux_k);
            for r in 0..d_l {
                let e = xt[r] as f64 - xhat[r];
                let mut eh = 0f64;
                for &(j, v) in &dz {
                    eh += w2[r * d_s + j] as f64 * v as f64;
                }
                aux += (e - eh).powi(2);
            }
        }
        (recon / n as f64, aux / n as f64)
    }

    #[test]
    fn perfect_reconstruction_has_zero_recon() {
        // identity encoder/decoder on a 2-d input with positive coordinates
        let p = SaeParams::new(
            2,
            2,
            2,
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0; 2],
            vec![0.0; 2],
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0; 2],
        )
        .unwrap();
        let x = [0.5, 2.0, 1.0, 3.0];
        let l = total_loss(&x, &p, &[false, false], 4).unwrap();
        assert_eq!(l.recon, 0.0);
        assert_eq!(l.aux, 0.0);
    }

    #[test]
    fn loss_matches_loop_oracle() {
        let p = random_params(3, 4, 2, 17);
        let x = [0.3, -1.2, 0.8, 1.5, 0.2, -0.4];
        let dead = [false, true, true, false];
        let got = total_loss(&x, &p, &dead, 2).unwrap();
        let (r, a) = loss_oracle(&x, &p, &dead, 2);
        assert!((got.recon - r).abs() < 1e-6 * r.max(1.0));
        assert!((got.aux - a).abs() < 1e-6 * a.max(1.0));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let p = random_params(3, 4, 2, 1);
        assert!(matches!(
            total_loss(&[], &p, &[false; 4], 2),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn adam_examples() {
        let cfg = TrainConfig {
            lr: 0.1,
            ..TrainConfig::default()
        };
        let mut th = [1.0f32];
        let mut m = AdamMoments::zeros(1);
        adam_step(&mut th, &[1.0], &mut m, &cfg, 1).unwrap();
        assert!((th[0] - 0.9).abs() < 1e-6);

        let mut th = [1.0f32, -2.0];
        let mut m = AdamMoments::zeros(2);
        adam_step(&mut th, &[0.0, 0.0], &mut m, &cfg, 1).unwrap();
        assert_eq!(th, [1.0, -2.0]);

        let err = adam_step(&mut th, &[f64::NAN, 0.0], &mut m, &cfg, 2).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged(_)));
    }

    #[test]
    fn track_dead_examples() {
        let mut c = vec![5u64, 5];
        let dead = track_dead(&[vec![0]], &mut c, 10);
        assert_eq!(c, vec![0, 6]);
        assert!(dead.is_empty());

        let mut c = vec![0u64; 2];
        let dead = track_dead(&vec![vec![1]; 10], &mut c, 10);
        assert_eq!(dead, vec![0]);
    }

    #[test]
    fn track_dead_matches_history_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let d_s = 12;
        let threshold = 25;
        let mut counters = vec![0u64; d_s];
        let mut history: Vec<Vec<Vec<usize>>> = Vec::new();
        for _ in 0..60 {
            let n_tok = rng.random_range(1..6);
            let batch: Vec<Vec<usize>> = (0..n_tok)
                .map(|_| {
                    let mut a: Vec<usize> = (0..d_s).filter(|_| rng.random_bool(0.08)).collect();
                    a.sort();
                    a
                })
                .collect();
            history.push(batch.clone());
            let got = track_dead(&batch, &mut counters, threshold);
            // replay: tokens in batches after the last batch where j fired
            let want: Vec<usize> = (0..d_s)
                .filter(|&j| {
                    let mut since = 0u64;
                    for b in history.iter().rev() {
                        if b.iter().any(|a| a.contains(&j)) {
                            break;
                        }
                        since += b.len() as u64;
                    }
                    since >= threshold
                })
                .collect();
            assert_eq!(got, want);
            for a in &batch {
                for j in a {
                    assert!(!got.contains(j));
                }
            }
        }
    }

    #[test]
    fn steps_zero_returns_initialisation() {
        let grid = crate::store::Grid::new(1, 2).unwrap();
        let shard = ActivationShard::new(vec!["a".into()], grid, 3, vec![1.0, 2.0, 3.0, 3.0, 2.0, 1.0]).unwrap();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::for_k(2)
        };
        let out = train(std::slice::from_ref(&shard), 4, 2, &cfg, |_| {}).unwrap();
        let init = init_params(3, 4, 2, shard.image(0), cfg.seed).unwrap();
        assert_eq!(out.params(), &init);
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = random_params(3, 5, 2, 8);
        let mut tr = Trainer::new(TrainConfig::for_k(2), p).unwrap();
        let x: Vec<f32> = (0..12).map(|i| (i as f32 * 0.37).sin()).collect();
        tr.step(&[&x]).unwrap();
        let path = dir.path().join("ck.sae");
        tr.save_checkpoint(&path).unwrap();
        let back = Trainer::resume(TrainConfig::for_k(2), &path).unwrap();
        assert_eq!(back.params, tr.params);
        assert_eq!(back.moments, tr.moments);
        assert_eq!(back.step_count(), 1);
        assert_eq!(
            back.optimizer_state_bytes().unwrap(),
            tr.optimizer_state_bytes().unwrap()
        );
    }

    #[test]
    fn metrics_table_roundtrip() {
        let m = vec![TrainMetrics {
            step: 1,
            recon_loss: 0.25,
            aux_loss: 0.0,
            dead_count: 3,
            fraction_active_mean: 0.125,
        }];
        let mut buf = Vec::new();
        write_metrics(&m, &mut buf).unwrap();
        assert_eq!(read_metrics(std::str::from_utf8(&buf).unwrap()).unwrap(), m);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            lr: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            adam_beta1: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            aux_k: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn recon_gradient_matches_central_differences() {
        let p = random_params(5, 7, 2, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x: Vec<f32> = (0..3 * 5).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let dead = vec![false; 7];
        let (_, g) = loss_and_grads(&x, &p, &dead, 4, 0.0).unwrap();
        let base_active: Vec<Vec<usize>> = x.chunks(5).map(|t| sae::encode(t, &p).unwrap().active).collect();
        let h = 1e-2f32;
        let grads = g.groups();
        for gi in 0..5 {
            for i in 0..grads[gi].len() {
                let eval = |delta: f32| {
                    let mut q = p.clone();
                    param_groups_mut(&mut q)[gi][i] += delta;
                    let same = x
                        .chunks(5)
                        .zip(&base_active)
                        .all(|(t, a)| sae::encode(t, &q).unwrap().active == *a);
                    (total_loss(&x, &q, &dead, 4).unwrap().recon, same)
                };
                let (up, s1) = eval(h);
                let (dn, s2) = eval(-h);
                if !(s1 && s2) {
                    continue;
                }
                let fd = (up - dn) / (2.0 * h as f64);
                let an = grads[gi][i];
                assert!(
                    (fd - an).abs() <= 1e-3 * an.abs().max(1e-2),
                    "group {gi} index {i}: fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn determinism_under_fixed_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..40 * 4 * 6).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let ids = (0..40).map(|i| format!("im{i}")).collect();
        let shard = ActivationShard::new(ids, crate::store::Grid { rows: 2, cols: 2 }, 6, data).unwrap();
        let cfg = TrainConfig {
            steps: 12,
            batch_size: 3,
            grad_accum_steps: 2,
            dead_token_threshold: 8,
            ..TrainConfig::for_k(2)
        };
        let a = train(std::slice::from_ref(&shard), 10, 2, &cfg, |_| {}).unwrap();
        let b = train(std::slice::from_ref(&shard), 10, 2, &cfg, |_| {}).unwrap();
        assert_eq!(a.params().to_bytes().unwrap(), b.params().to_bytes().unwrap());
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn loss_decreases_on_planted_data() {
        let corpus = crate::synth::synth_gen(&crate::synth::SynthConfig::new(16, 24, 2, 4096, 0.01, 9)).unwrap();
        let cfg = TrainConfig {
            steps: 300,
            lr: 3e-3,
            ..TrainConfig::for_k(2)
        };
        let out = train(&corpus.shards, 24, 2, &cfg, |_| {}).unwrap();
        let mean = |r: &[TrainMetrics]| r.iter().map(|m| m.recon_loss).sum::<f64>() / r.len() as f64;
        let first = mean(&out.metrics[..20]);
        let last = mean(&out.metrics[280..]);
        assert!(last < 0.5 * first, "first {first} last {last}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn accumulation_equals_concatenated_step(
            seed in 0u64..1000,
            micro in 1usize..4,
            per in 1usize..4,
        ) {
            let p = random_params(4, 6, 2, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let x: Vec<f32> = (0..micro * per * 4).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let cfg = TrainConfig { dead_token_threshold: 1, ..TrainConfig::for_k(2) };
            let mut a = Trainer::new(cfg.clone(), p.clone()).unwrap();
            let mut b = Trainer::new(cfg, p).unwrap();
            // one prior step so that some latents are dead and the aux term is live
            a.step(&[&x]).unwrap();
            b.step(&[&x]).unwrap();
            let views: Vec<&[f32]> = x.chunks(per * 4).collect();
            let ma = a.step(&views).unwrap();
            let mb = b.step(&[&x]).unwrap();
            proptest::prop_assert!((ma.recon_loss - mb.recon_loss).abs() <= 1e-5 * mb.recon_loss.max(1.0));
            for (ga, gb) in param_groups_mut(&mut a.params).into_iter().zip(param_groups_mut(&mut b.params)) {
                for (u, v) in ga.iter().zip(gb.iter()) {
                    proptest::prop_assert!((u - v).abs() <= 1e-5);
                }
            }
        }
    }
}
