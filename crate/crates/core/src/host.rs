// SPDX-License-Identifier: MIT OR Apache-2.0

//! Host models the SAE is hooked into.
//!
//! A host exposes the hooked-layer activations for an input, finishes the
//! forward pass from (possibly modified) activations to next-token logits,
//! and provides a vector-Jacobian product of the logit difference
//! `u[v_c] - u[v_b]`. Two deterministic toy hosts pool the hooked tokens by
//! their mean and read out either linearly or through one tanh layer.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::sae::{self, LatentState, SaeParams, SteerSpec};
use crate::store::{ActivationShard, Grid};

/// Hooked-layer activations, `tokens x d_l` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Activations {
    pub tokens: usize,
    pub d_l: usize,
    pub data: Vec<f32>,
}

impl Activations {
    pub fn new(tokens: usize, d_l: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != tokens * d_l {
            return Err(Error::invalid(format!(
                "activation block has {} values, expected {tokens}x{d_l}",
                data.len()
            )));
        }
        Ok(Self { tokens, d_l, data })
    }

    pub fn zeros(tokens: usize, d_l: usize) -> Self {
        Self {
            tokens,
            d_l,
            data: vec![0.0; tokens * d_l],
        }
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.d_l..(t + 1) * self.d_l]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f32] {
        &mut self.data[t * self.d_l..(t + 1) * self.d_l]
    }

    fn mean_row(&self) -> Vec<f64> {
        let mut acc = vec![0f64; self.d_l];
        for t in 0..self.tokens {
            linalg::axpy(&mut acc, 1.0, self.row(t));
        }
        let n = self.tokens.max(1) as f64;
        acc.iter_mut().for_each(|v| *v /= n);
        acc
    }
}

/// What the host is asked to process: an optional image followed by text.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HostInput {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default)]
    pub text: Vec<u32>,
}

impl HostInput {
    pub fn text(tokens: Vec<u32>) -> Self {
        Self {
            image: None,
            text: tokens,
        }
    }

    pub fn image_and_text(image: impl Into<String>, tokens: Vec<u32>) -> Self {
        Self {
            image: Some(image.into()),
            text: tokens,
        }
    }
}

/// Kind of a contiguous token range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RangeKind {
    Image { rows: u16, cols: u16 },
    Text,
}

/// Half-open token range `[start, end)` with its modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRange {
    #[serde(flatten)]
    pub kind: RangeKind,
    pub start: usize,
    pub end: usize,
}

impl TokenRange {
    pub fn contains(&self, t: usize) -> bool {
        (self.start..self.end).contains(&t)
    }

    pub fn is_image(&self) -> bool {
        matches!(self.kind, RangeKind::Image { .. })
    }
}

/// The contract a model must satisfy for the SAE to be hooked into it.
pub trait HostModel: Send + Sync {
    /// Hidden size of the hooked layer.
    fn d_model(&self) -> usize;

    fn vocab(&self) -> usize;

    /// Activations at the hook for `input`.
    fn run(&self, input: &HostInput) -> Result<Activations>;

    /// Next-token logits computed from hooked activations.
    fn complete(&self, xhat: &Activations) -> Result<Vec<f64>>;

    /// Gradient of `u[v_c] - u[v_b]` with respect to `xhat`.
    fn vjp(&self, xhat: &Activations, v_c: usize, v_b: usize) -> Result<Activations>;

    /// Logits from a `tokens x d_model` block held in f64. The default
    /// rounds to f32 and calls [`HostModel::complete`].
    fn complete_f64(&self, tokens: usize, xhat: &[f64]) -> Result<Vec<f64>> {
        let data = xhat.iter().map(|&v| v as f32).collect();
        self.complete(&Activations::new(tokens, self.d_model(), data)?)
    }

    /// Labelled ranges partitioning the tokens of `input`.
    fn token_ranges(&self, input: &HostInput) -> Result<Vec<TokenRange>>;
}

impl<H: HostModel + ?Sized> HostModel for Arc<H> {
    fn d_model(&self) -> usize {
        (**self).d_model()
    }
    fn vocab(&self) -> usize {
        (**self).vocab()
    }
    fn run(&self, input: &HostInput) -> Result<Activations> {
        (**self).run(input)
    }
    fn complete(&self, xhat: &Activations) -> Result<Vec<f64>> {
        (**self).complete(xhat)
    }
    fn complete_f64(&self, tokens: usize, xhat: &[f64]) -> Result<Vec<f64>> {
        (**self).complete_f64(tokens, xhat)
    }
    fn vjp(&self, xhat: &Activations, v_c: usize, v_b: usize) -> Result<Activations> {
        (**self).vjp(xhat, v_c, v_b)
    }
    fn token_ranges(&self, input: &HostInput) -> Result<Vec<TokenRange>> {
        (**self).token_ranges(input)
    }
}

/// Small whitespace vocabulary for the toy hosts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyVocab {
    pub words: Vec<String>,
}

impl Default for ToyVocab {
    fn default() -> Self {
        let words = [
            "<unk>", "<bos>", "what", "is", "your", "feeling", "right", "now", "?", "tell", "me", "a", "story",
            "about", "the", "image", "i", "feel", "HAPPY", "SAD", "neutral", "yes", "no", "map", "country", "shown",
            "in", "this", "eat", "money", "chair", "red", "blue", "green", "yellow", "sky", "grass", "wood", "brick",
            "stripes", "wheel", "apple", "and", "of", ".",
        ];
        Self {
            words: words.iter().map(|w| w.to_string()).collect(),
        }
    }
}

impl ToyVocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.words.iter().position(|w| w == word).map(|i| i as u32)
    }

    /// Splits on whitespace; unknown words map to id 0.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.id(w).or_else(|| self.id(&w.to_lowercase())).unwrap_or(0))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.words.get(i as usize).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Embedding front end shared by the toy hosts: image patches pass through
/// unchanged, text tokens are looked up in an embedding table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyFrontEnd {
    pub d_l: usize,
    pub grid: Grid,
    /// `vocab x d_l` text embeddings.
    pub embeddings: Vec<f32>,
    #[serde(skip)]
    pub images: HashMap<String, Vec<f32>>,
}

impl ToyFrontEnd {
    pub fn random(d_l: usize, vocab: usize, grid: Grid, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (d_l as f64).sqrt();
        let embeddings = (0..vocab * d_l)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                (v * scale) as f32
            })
            .collect();
        Self {
            d_l,
            grid,
            embeddings,
            images: HashMap::new(),
        }
    }

    pub fn vocab(&self) -> usize {
        self.embeddings.len() / self.d_l
    }

    /// Registers every image of `shards` as patch activations.
    pub fn add_images(&mut self, shards: &[ActivationShard]) -> Result<()> {
        for s in shards {
            if s.d_l != self.d_l || s.grid != self.grid {
                return Err(Error::invalid("image shard shape differs from host front end"));
            }
            for (i, id) in s.image_ids.iter().enumerate() {
                self.images.insert(id.clone(), s.image(i).to_vec());
            }
        }
        Ok(())
    }

    pub fn add_image(&mut self, id: impl Into<String>, patches: Vec<f32>) -> Result<()> {
        if patches.len() != self.grid.tokens() * self.d_l {
            return Err(Error::invalid("patch block does not match grid x d_l"));
        }
        self.images.insert(id.into(), patches);
        Ok(())
    }

    fn run(&self, input: &HostInput) -> Result<Activations> {
        let mut data = Vec::new();
        if let Some(id) = &input.image {
            let p = self
                .images
                .get(id)
                .ok_or_else(|| Error::NotFound(format!("image {id:?} not known to host")))?;
            data.extend_from_slice(p);
        }
        let vocab = self.vocab();
        for &tok in &input.text {
            let tok = tok as usize;
            if tok >= vocab {
                return Err(Error::invalid(format!("token id {tok} out of vocabulary ({vocab})")));
            }
            data.extend_from_slice(&self.embeddings[tok * self.d_l..(tok + 1) * self.d_l]);
        }
        let n = data.len() / self.d_l;
        if n == 0 {
            return Err(Error::invalid("host input is empty"));
        }
        Activations::new(n, self.d_l, data)
    }

    fn ranges(&self, input: &HostInput) -> Vec<TokenRange> {
        let mut out = Vec::new();
        let mut start = 0;
        if input.image.is_some() {
            let n = self.grid.tokens();
            out.push(TokenRange {
                kind: RangeKind::Image {
                    rows: self.grid.rows,
                    cols: self.grid.cols,
                },
                start,
                end: n,
            });
            start = n;
        }
        if !input.text.is_empty() {
            out.push(TokenRange {
                kind: RangeKind::Text,
                start,
                end: start + input.text.len(),
            });
        }
        out
    }
}

fn dot_f64(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * y).sum()
}

fn check_block(x: &Activations, d_l: usize) -> Result<()> {
    if x.d_l != d_l || x.tokens == 0 || x.data.len() != x.tokens * d_l {
        return Err(Error::invalid(format!(
            "activation block {}x{} does not fit host d_l={d_l}",
            x.tokens, x.d_l
        )));
    }
    Ok(())
}

fn mean_rows_f64(tokens: usize, d_l: usize, x: &[f64]) -> Result<Vec<f64>> {
    if tokens == 0 || x.len() != tokens * d_l {
        return Err(Error::invalid(format!(
            "activation block of {} values does not fit {tokens}x{d_l}",
            x.len()
        )));
    }
    let mut acc = vec![0f64; d_l];
    for row in x.chunks_exact(d_l) {
        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|v| *v /= tokens as f64);
    Ok(acc)
}

fn check_ids(v_c: usize, v_b: usize, vocab: usize) -> Result<()> {
    if v_c >= vocab || v_b >= vocab {
        return Err(Error::invalid(format!(
            "token ids ({v_c}, {v_b}) out of vocabulary ({vocab})"
        )));
    }
    Ok(())
}

/// `u = A * mean_t(xhat_t) + c`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyLinearHost {
    pub front: ToyFrontEnd,
    /// `vocab x d_l` readout.
    pub readout: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ToyLinearHost {
    pub fn random(d_l: usize, vocab: usize, grid: Grid, seed: u64) -> Self {
        let front = ToyFrontEnd::random(d_l, vocab, grid, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let readout = (0..vocab * d_l).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let bias = (0..vocab).map(|_| rng.random_range(-0.1f32..0.1)).collect();
        Self { front, readout, bias }
    }

    pub fn readout_row(&self, v: usize) -> &[f32] {
        let d = self.front.d_l;
        &self.readout[v * d..(v + 1) * d]
    }

    pub fn readout_row_mut(&mut self, v: usize) -> &mut [f32] {
        let d = self.front.d_l;
        &mut self.readout[v * d..(v + 1) * d]
    }
}

impl ToyLinearHost {
    fn logits(&self, p: &[f64]) -> Vec<f64> {
        (0..self.vocab())
            .map(|v| dot_f64(self.readout_row(v), p) + self.bias[v] as f64)
            .collect()
    }
}

impl HostModel for ToyLinearHost {
    fn d_model(&self) -> usize {
        self.front.d_l
    }
    fn vocab(&self) -> usize {
        self.bias.len()
    }
    fn run(&self, input: &HostInput) -> Result<Activations> {
        self.front.run(input)
    }
    fn complete(&self, xhat: &Activations) -> Result<Vec<f64>> {
        check_block(xhat, self.front.d_l)?;
        Ok(self.logits(&xhat.mean_row()))
    }
    fn complete_f64(&self, tokens: usize, xhat: &[f64]) -> Result<Vec<f64>> {
        Ok(self.logits(&mean_rows_f64(tokens, self.front.d_l, xhat)?))
    }
    fn vjp(&self, xhat: &Activations, v_c: usize, v_b: usize) -> Result<Activations> {
        check_block(xhat, self.front.d_l)?;
        check_ids(v_c, v_b, self.vocab())?;
        let t = xhat.tokens as f64;
        let row: Vec<f32> = self
            .readout_row(v_c)
            .iter()
            .zip(self.readout_row(v_b))
            .map(|(a, b)| ((*a as f64 - *b as f64) / t) as f32)
            .collect();
        let mut out = Activations::zeros(xhat.tokens, xhat.d_l);
        for tok in 0..xhat.tokens {
            out.row_mut(tok).copy_from_slice(&row);
        }
        Ok(out)
    }
    fn token_ranges(&self, input: &HostInput) -> Result<Vec<TokenRange>> {
        Ok(self.front.ranges(input))
    }
}

/// `u = A * tanh(W * mean_t(xhat_t) + b) + c`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyMlpHost {
    pub front: ToyFrontEnd,
    pub hidden: usize,
    /// `hidden x d_l`.
    pub w_hidden: Vec<f32>,
    pub b_hidden: Vec<f32>,
    /// `vocab x hidden`.
    pub readout: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ToyMlpHost {
    pub fn random(d_l: usize, hidden: usize, vocab: usize, grid: Grid, seed: u64) -> Self {
        let front = ToyFrontEnd::random(d_l, vocab, grid, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7));
        let s = 1.5 / (d_l as f32).sqrt();
        let w_hidden = (0..hidden * d_l).map(|_| rng.random_range(-s..s)).collect();
        let b_hidden = (0..hidden).map(|_| rng.random_range(-0.2f32..0.2)).collect();
        let readout = (0..vocab * hidden).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let bias = (0..vocab).map(|_| rng.random_range(-0.1f32..0.1)).collect();
        Self {
            front,
            hidden,
            w_hidden,
            b_hidden,
            readout,
            bias,
        }
    }

    fn hidden_act(&self, p: &[f64]) -> Vec<f64> {
        let d = self.front.d_l;
        (0..self.hidden)
            .map(|h| (dot_f64(&self.w_hidden[h * d..(h + 1) * d], p) + self.b_hidden[h] as f64).tanh())
            .collect()
    }

    fn logits(&self, p: &[f64]) -> Vec<f64> {
        let h = self.hidden_act(p);
        (0..self.vocab())
            .map(|v| {
                let row = &self.readout[v * self.hidden..(v + 1) * self.hidden];
                dot_f64(row, &h) + self.bias[v] as f64
            })
            .collect()
    }
}

impl HostModel for ToyMlpHost {
    fn d_model(&self) -> usize {
        self.front.d_l
    }
    fn vocab(&self) -> usize {
        self.bias.len()
    }
    fn run(&self, input: &HostInput) -> Result<Activations> {
        self.front.run(input)
    }
    fn complete(&self, xhat: &Activations) -> Result<Vec<f64>> {
        check_block(xhat, self.front.d_l)?;
        Ok(self.logits(&xhat.mean_row()))
    }
    fn complete_f64(&self, tokens: usize, xhat: &[f64]) -> Result<Vec<f64>> {
        Ok(self.logits(&mean_rows_f64(tokens, self.front.d_l, xhat)?))
    }
    fn vjp(&self, xhat: &Activations, v_c: usize, v_b: usize) -> Result<Activations> {
        check_block(xhat, self.front.d_l)?;
        check_ids(v_c, v_b, self.vocab())?;
        let h = self.hidden_act(&xhat.mean_row());
        let d = self.front.d_l;
        let t = xhat.tokens as f64;
        let mut g_p = vec![0f64; d];
        for k in 0..self.hidden {
            let dd_dh = self.readout[v_c * self.hidden + k] as f64 - self.readout[v_b * self.hidden + k] as f64;
            let dd_da = dd_dh * (1.0 - h[k] * h[k]);
            linalg::axpy(&mut g_p, dd_da, &self.w_hidden[k * d..(k + 1) * d]);
        }
        let row: Vec<f32> = g_p.iter().map(|v| (v / t) as f32).collect();
        let mut out = Activations::zeros(xhat.tokens, d);
        for tok in 0..xhat.tokens {
            out.row_mut(tok).copy_from_slice(&row);
        }
        Ok(out)
    }
    fn token_ranges(&self, input: &HostInput) -> Result<Vec<TokenRange>> {
        Ok(self.front.ranges(input))
    }
}

/// Serializable description of a toy host (weights only; images are
/// registered separately).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ToyHost {
    Linear(ToyLinearHost),
    Mlp(ToyMlpHost),
}

impl ToyHost {
    pub fn front_mut(&mut self) -> &mut ToyFrontEnd {
        match self {
            ToyHost::Linear(h) => &mut h.front,
            ToyHost::Mlp(h) => &mut h.front,
        }
    }

    pub fn front(&self) -> &ToyFrontEnd {
        match self {
            ToyHost::Linear(h) => &h.front,
            ToyHost::Mlp(h) => &h.front,
        }
    }

    fn inner(&self) -> &dyn HostModel {
        match self {
            ToyHost::Linear(h) => h,
            ToyHost::Mlp(h) => h,
        }
    }
}

impl HostModel for ToyHost {
    fn d_model(&self) -> usize {
        self.inner().d_model()
    }
    fn vocab(&self) -> usize {
        self.inner().vocab()
    }
    fn run(&self, input: &HostInput) -> Result<Activations> {
        self.inner().run(input)
    }
    fn complete(&self, xhat: &Activations) -> Result<Vec<f64>> {
        self.inner().complete(xhat)
    }
    fn complete_f64(&self, tokens: usize, xhat: &[f64]) -> Result<Vec<f64>> {
        self.inner().complete_f64(tokens, xhat)
    }
    fn vjp(&self, xhat: &Activations, v_c: usize, v_b: usize) -> Result<Activations> {
        self.inner().vjp(xhat, v_c, v_b)
    }
    fn token_ranges(&self, input: &HostInput) -> Result<Vec<TokenRange>> {
        self.inner().token_ranges(input)
    }
}

/// Wraps a host and counts calls to each capability.
pub struct CountingHost<H> {
    pub inner: H,
    runs: AtomicUsize,
    completions: AtomicUsize,
    vjps: AtomicUsize,
}

impl<H> CountingHost<H> {
    pub fn new(inner: H) -> Self {
        Self {
            inner,
            runs: AtomicUsize::new(0),
            completions: AtomicUsize::new(0),
            vjps: AtomicUsize::new(0),
        }
    }

    pub fn runs(&self) -> usize {
        self.runs.load(Ordering::SeqCst)
    }
    pub fn completions(&self) -> usize {
        self.completions.load(Ordering::SeqCst)
    }
    pub fn vjps(&self) -> usize {
        self.vjps.load(Ordering::SeqCst)
    }
}

impl<H: HostModel> HostModel for CountingHost<H> {
    fn d_model(&self) -> usize {
        self.inner.d_model()
    }
    fn vocab(&self) -> usize {
        self.inner.vocab()
    }
    fn run(&self, input: &HostInput) -> Result<Activations> {
        self.runs.fetch_add(1, Ordering::SeqCst);
        self.inner.run(input)
    }
    fn complete(&self, xhat: &Activations) -> Result<Vec<f64>> {
        self.completions.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(xhat)
    }
    fn complete_f64(&self, tokens: usize, xhat: &[f64]) -> Result<Vec<f64>> {
        self.completions.fetch_add(1, Ordering::SeqCst);
        self.inner.complete_f64(tokens, xhat)
    }
    fn vjp(&self, xhat: &Activations, v_c: usize, v_b: usize) -> Result<Activations> {
        self.vjps.fetch_add(1, Ordering::SeqCst);
        self.inner.vjp(xhat, v_c, v_b)
    }
    fn token_ranges(&self, input: &HostInput) -> Result<Vec<TokenRange>> {
        self.inner.token_ranges(input)
    }
}

/// Output of a forward pass with the SAE spliced in at the hook.
#[derive(Clone, Debug)]
pub struct HookedOutput {
    pub logits: Vec<f64>,
    pub states: Vec<LatentState>,
    /// Activations the host produced at the hook.
    pub x: Activations,
    /// Reconstruction fed downstream instead of `x`.
    pub xhat: Activations,
}

pub(crate) fn check_sae_fits(host: &dyn HostModel, params: &SaeParams) -> Result<()> {
    if host.d_model() != params.d_model() {
        return Err(Error::invalid(format!(
            "host d_l={} differs from SAE d_l={}",
            host.d_model(),
            params.d_model()
        )));
    }
    Ok(())
}

/// Encodes one token with every steer spec that covers it applied.
pub(crate) fn encode_token(x: &[f32], t: usize, params: &SaeParams, steer: &[SteerSpec]) -> Result<LatentState> {
    let z_pre = sae::pre_activations(x, params)?;
    let clamps: Vec<(usize, f32)> = steer
        .iter()
        .filter(|s| s.tokens.contains(t))
        .map(|s| (s.feature, s.value))
        .collect();
    if clamps.is_empty() {
        LatentState::from_pre(z_pre, params.k())
    } else {
        sae::steer_many(&z_pre, &clamps, params.k())
    }
}

/// Runs the host, replaces the hooked activations by the (optionally
/// steered) SAE reconstruction and completes the forward pass. The
/// reconstruction reaches the host in f64; `xhat` holds it rounded to f32.
pub fn hooked_forward(
    host: &dyn HostModel,
    input: &HostInput,
    params: &SaeParams,
    steer: &[SteerSpec],
) -> Result<HookedOutput> {
    check_sae_fits(host, params)?;
    let x = host.run(input)?;
    for s in steer {
        s.validate(params.d_sae(), x.tokens)?;
    }
    let mut xhat = Activations::zeros(x.tokens, x.d_l);
    let mut xhat_f64 = Vec::with_capacity(x.tokens * x.d_l);
    let mut states = Vec::with_capacity(x.tokens);
    for t in 0..x.tokens {
        let st = encode_token(x.row(t), t, params, steer)?;
        let row = sae::decode_f64(&st, params)?;
        xhat.row_mut(t).iter_mut().zip(&row).for_each(|(o, v)| *o = *v as f32);
        xhat_f64.extend(row);
        states.push(st);
    }
    let logits = host.complete_f64(x.tokens, &xhat_f64)?;
    Ok(HookedOutput {
        logits,
        states,
        x,
        xhat,
    })
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(u: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in u.iter().enumerate() {
        if v > u[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding through the hooked SAE, re-applying `steer` at every
/// step. Returns the generated tokens only.
pub fn generate_steered(
    host: &dyn HostModel,
    prompt: &HostInput,
    params: &SaeParams,
    steer: &[SteerSpec],
    max_len: usize,
) -> Result<Vec<u32>> {
    if max_len < 1 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let mut input = prompt.clone();
    let mut out = Vec::with_capacity(max_len);
    for _ in 0..max_len {
        let fwd = hooked_forward(host, &input, params, steer)?;
        let next = argmax(&fwd.logits) as u32;
        out.push(next);
        input.text.push(next);
    }
    Ok(out)
}
