// SPDX-License-Identifier: MIT OR Apache-2.0

//! Planted-dictionary corpora for checking that training recovers known
//! features.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::sae::SaeParams;
use crate::store::{ActivationShard, Grid};

/// Parameters of a planted-dictionary corpus.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub d_l: usize,
    pub d_s_true: usize,
    /// Nonzero coefficients per token.
    pub sparsity: usize,
    /// Requested token count, rounded up to whole images.
    pub n_tokens: usize,
    pub noise_sigma: f32,
    pub seed: u64,
    pub grid: Grid,
    pub images_per_shard: usize,
    /// Coefficients are drawn uniformly from this half-open range.
    pub coef_range: (f32, f32),
}

impl SynthConfig {
    pub fn new(d_l: usize, d_s_true: usize, sparsity: usize, n_tokens: usize, noise_sigma: f32, seed: u64) -> Self {
        Self {
            d_l,
            d_s_true,
            sparsity,
            n_tokens,
            noise_sigma,
            seed,
            grid: Grid { rows: 4, cols: 4 },
            images_per_shard: 1024,
            coef_range: (0.5, 1.5),
        }
    }
}

/// Generated tokens with the dictionary and supports that produced them.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub shards: Vec<ActivationShard>,
    /// `d_s_true` unit-norm atoms of length `d_l`, atom-major.
    pub dictionary: Vec<f32>,
    /// Sorted support of every token, in corpus order.
    pub supports: Vec<Vec<usize>>,
    pub d_l: usize,
}

impl SynthCorpus {
    pub fn atom(&self, j: usize) -> &[f32] {
        &self.dictionary[j * self.d_l..(j + 1) * self.d_l]
    }

    pub fn n_atoms(&self) -> usize {
        self.dictionary.len() / self.d_l
    }
}

/// Draws a random unit-norm dictionary and tokens `x = D s + sigma * noise`.
pub fn synth_gen(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.d_l == 0 || cfg.d_s_true == 0 || cfg.sparsity == 0 {
        return Err(Error::invalid("synthetic dimensions and sparsity must be positive"));
    }
    if cfg.sparsity > cfg.d_s_true {
        return Err(Error::invalid(format!(
            "sparsity {} exceeds dictionary size {}",
            cfg.sparsity, cfg.d_s_true
        )));
    }
    let (lo, hi) = cfg.coef_range;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::invalid("coefficient range must be positive and nonempty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d_l = cfg.d_l;
    let mut dictionary = Vec::with_capacity(cfg.d_s_true * d_l);
    for _ in 0..cfg.d_s_true {
        let mut atom: Vec<f32> = (0..d_l)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            })
            .collect();
        let n = linalg::norm(&atom) as f32;
        atom.iter_mut().for_each(|v| *v /= n);
        dictionary.extend(atom);
    }

    let t = cfg.grid.tokens();
    let n_images = cfg.n_tokens.div_ceil(t);
    let per_shard = cfg.images_per_shard.max(1);
    let mut shards = Vec::new();
    let mut supports = Vec::with_capacity(n_images * t);
    let mut img = 0usize;
    while img < n_images {
        let count = per_shard.min(n_images - img);
        let mut data = Vec::with_capacity(count * t * d_l);
        for _ in 0..count * t {
            let mut support = index::sample(&mut rng, cfg.d_s_true, cfg.sparsity).into_vec();
            support.sort_unstable();
            let mut x = vec![0f64; d_l];
            for &j in &support {
                let c = rng.random_range(lo..hi) as f64;
                linalg::axpy(&mut x, c, &dictionary[j * d_l..(j + 1) * d_l]);
            }
            for v in x.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v += cfg.noise_sigma as f64 * e;
            }
            data.extend(x.into_iter().map(|v| v as f32));
            supports.push(support);
        }
        let ids = (img..img + count).map(|i| format!("synth-{i:07}")).collect();
        shards.push(ActivationShard::new(ids, cfg.grid, d_l, data)?);
        img += count;
    }
    Ok(SynthCorpus {
        shards,
        dictionary,
        supports,
        d_l,
    })
}

/// For each atom of `truth` (atom-major, length `d_l` each), the best
/// cosine with any learned decoder column, averaged over atoms.
pub fn mean_max_cosine(truth: &[f32], d_l: usize, params: &SaeParams) -> f64 {
    let n = truth.len() / d_l;
    if n == 0 {
        return 0.0;
    }
    let learned: Vec<(&[f32], f64)> = (0..params.d_sae())
        .map(|j| {
            let c = params.decoder_column(j);
            (c, linalg::norm(c))
        })
        .collect();
    let mut total = 0.0;
    for i in 0..n {
        let a = &truth[i * d_l..(i + 1) * d_l];
        let na = linalg::norm(a);
        let best = learned
            .iter()
            .filter(|(_, nc)| *nc > 0.0 && na > 0.0)
            .map(|(c, nc)| linalg::dot(a, c) / (na * nc))
            .fold(f64::NEG_INFINITY, f64::max);
        total += if best.is_finite() { best } else { 0.0 };
    }
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_single_sparsity_tokens_are_scaled_atoms() {
        let cfg = SynthConfig::new(8, 5, 1, 64, 0.0, 3);
        let c = synth_gen(&cfg).unwrap();
        let mut tok = 0;
        for s in &c.shards {
            for i in 0..s.n_images() {
                for t in 0..s.tokens_per_image() {
                    let x = s.token(i, t);
                    let j = c.supports[tok][0];
                    let cos = linalg::cosine(x, c.atom(j));
                    assert!((cos - 1.0).abs() < 1e-5);
                    tok += 1;
                }
            }
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let cfg = SynthConfig::new(6, 10, 3, 100, 0.01, 42);
        let a = synth_gen(&cfg).unwrap();
        let b = synth_gen(&cfg).unwrap();
        assert_eq!(a.shards, b.shards);
        assert_eq!(a.dictionary, b.dictionary);
    }

    #[test]
    fn supports_have_exact_sparsity() {
        let cfg = SynthConfig::new(6, 20, 4, 320, 0.0, 1);
        let c = synth_gen(&cfg).unwrap();
        assert_eq!(c.supports.len(), 320);
        let mut hist = [0usize; 21];
        for s in &c.supports {
            let mut u = s.clone();
            u.dedup();
            hist[u.len()] += 1;
        }
        assert_eq!(hist[4], 320);
    }

    #[test]
    fn atoms_have_unit_norm() {
        let c = synth_gen(&SynthConfig::new(16, 12, 2, 16, 0.0, 5)).unwrap();
        for j in 0..c.n_atoms() {
            assert!((linalg::norm(c.atom(j)) - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn sparsity_above_dictionary_is_rejected() {
        assert!(synth_gen(&SynthConfig::new(4, 3, 4, 10, 0.0, 0)).is_err());
    }
}
