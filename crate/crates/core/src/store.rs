// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense activation shards and TopK sparse feature caches.
//!
//! Shard layout (`SAEACT1`): magic, version u32, n_images u64, T u32,
//! d_l u32, rows u16, cols u16, id-table offset u64, then `n*T*d_l` f32
//! values row-major, then the id table (u32 byte length + UTF-8 per id).
//!
//! Cache layout (`SAESPC1`): magic, version u32, n_images u64, T u32,
//! d_s u32, k u32, then one fixed-size record per token: count u16 followed
//! by `k` `(u32 index, f32 value)` slots, unused slots zeroed. A sidecar
//! manifest (one JSON object per line) carries the token grid and maps each
//! image id to its source.
//!
//! Both files end with a CRC32 of their header bytes.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{self, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::sae::{self, SaeParams};

const SHARD_MAGIC: &[u8; 8] = b"SAEACT1\0";
const CACHE_MAGIC: &[u8; 8] = b"SAESPC1\0";
const FORMAT_VERSION: u32 = 1;
const SHARD_HEADER_LEN: u64 = 40;

/// Token grid of an image: token `t` sits at `(t / cols, t % cols)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub rows: u16,
    pub cols: u16,
}

impl Grid {
    pub fn new(rows: u16, cols: u16) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!("grid {rows}x{cols} must be positive")));
        }
        Ok(Self { rows, cols })
    }

    /// Number of tokens `rows * cols`.
    pub fn tokens(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    pub fn cell_of(&self, t: usize) -> (usize, usize) {
        (t / self.cols as usize, t % self.cols as usize)
    }
}

/// Dense cached activations for a batch of images.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationShard {
    pub image_ids: Vec<String>,
    pub grid: Grid,
    pub d_l: usize,
    /// `n_images x T x d_l`, row-major.
    pub data: Vec<f32>,
}

impl ActivationShard {
    pub fn new(image_ids: Vec<String>, grid: Grid, d_l: usize, data: Vec<f32>) -> Result<Self> {
        let s = Self {
            image_ids,
            grid,
            d_l,
            data,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        Grid::new(self.grid.rows, self.grid.cols)?;
        if self.d_l == 0 {
            return Err(Error::invalid("shard d_l must be positive"));
        }
        let want = self.image_ids.len() * self.grid.tokens() * self.d_l;
        if self.data.len() != want {
            return Err(Error::invalid(format!(
                "shard data has {} values, expected {want}",
                self.data.len()
            )));
        }
        if !crate::linalg::all_finite(&self.data) {
            return Err(Error::invalid("shard data contains non-finite values"));
        }
        Ok(())
    }

    pub fn n_images(&self) -> usize {
        self.image_ids.len()
    }

    pub fn tokens_per_image(&self) -> usize {
        self.grid.tokens()
    }

    /// All tokens of image `i`, `T x d_l`.
    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.grid.tokens() * self.d_l;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn token(&self, i: usize, t: usize) -> &[f32] {
        let base = (i * self.grid.tokens() + t) * self.d_l;
        &self.data[base..base + self.d_l]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let t = binio::to_u32(self.grid.tokens(), "T")?;
        let mut w = ByteWriter::with_capacity(SHARD_HEADER_LEN as usize + self.data.len() * 4 + 64);
        w.bytes(SHARD_MAGIC);
        w.u32(FORMAT_VERSION);
        w.u64(self.image_ids.len() as u64);
        w.u32(t);
        w.u32(binio::to_u32(self.d_l, "d_l")?);
        w.u16(self.grid.rows);
        w.u16(self.grid.cols);
        w.u64(SHARD_HEADER_LEN + self.data.len() as u64 * 4);
        w.end_header();
        w.f32s(&self.data);
        debug_assert_eq!(w.len() as u64, SHARD_HEADER_LEN + self.data.len() as u64 * 4);
        for id in &self.image_ids {
            w.u32(binio::to_u32(id.len(), "id length")?);
            w.bytes(id.as_bytes());
        }
        Ok(w.finish())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf, "activation shard");
        r.preamble(SHARD_MAGIC, FORMAT_VERSION)?;
        let n = r.u64()?;
        let t = r.u32()? as usize;
        let d_l = r.u32()? as usize;
        let rows = r.u16()?;
        let cols = r.u16()?;
        let id_offset = r.u64()?;
        if rows == 0 || cols == 0 || t != rows as usize * cols as usize {
            return Err(Error::format(
                20,
                format!("token count {t} does not match grid {rows}x{cols}"),
            ));
        }
        if d_l == 0 {
            return Err(Error::format(24, "d_l must be positive"));
        }
        let data_len = n
            .checked_mul(t as u64)
            .and_then(|v| v.checked_mul(d_l as u64))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::format(12, "n_images overflows"))?;
        let expected_offset = SHARD_HEADER_LEN + data_len;
        if id_offset != expected_offset {
            return Err(Error::format(
                32,
                format!("id table offset {id_offset} disagrees with header (expected {expected_offset})"),
            ));
        }
        let min_len = expected_offset + 4 * n + 4;
        if (buf.len() as u64) < min_len {
            return Err(Error::format(
                buf.len() as u64,
                format!(
                    "truncated activation shard: expected at least {min_len} bytes, found {}",
                    buf.len()
                ),
            ));
        }
        r.expect_body_and_trailer(buf.len() as u64 - SHARD_HEADER_LEN - 4)?;
        let data = r.f32s((data_len / 4) as usize)?;
        let mut image_ids = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let raw = r.take(len)?;
            let id = std::str::from_utf8(raw).map_err(|_| Error::format(r.offset(), "image id is not UTF-8"))?;
            image_ids.push(id.to_owned());
        }
        if r.remaining() != 4 {
            return Err(Error::format(
                r.offset(),
                format!("{} unexpected bytes after id table", r.remaining() - 4),
            ));
        }
        let grid = Grid { rows, cols };
        let shard = Self {
            image_ids,
            grid,
            d_l,
            data,
        };
        if !crate::linalg::all_finite(&shard.data) {
            return Err(Error::format(SHARD_HEADER_LEN, "shard data contains non-finite values"));
        }
        Ok(shard)
    }
}

/// Writes a shard file.
pub fn write_shard(shard: &ActivationShard, path: impl AsRef<Path>) -> Result<()> {
    binio::write_file(path.as_ref(), &shard.to_bytes()?)
}

/// Reads and validates a shard file.
pub fn read_shard(path: impl AsRef<Path>) -> Result<ActivationShard> {
    ActivationShard::from_bytes(&binio::read_file(path.as_ref())?)
}

/// Per-token TopK `(index, value)` pairs for a corpus of images.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseFeatureCache {
    image_ids: Vec<String>,
    sources: Vec<String>,
    grid: Grid,
    d_s: usize,
    k: usize,
    counts: Vec<u16>,
    indices: Vec<u32>,
    values: Vec<f32>,
    lookup: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ManifestLine {
    Header { rows: u16, cols: u16, n_images: u64 },
    Image { image_id: String, source: String },
}

impl SparseFeatureCache {
    /// Empty cache over `grid` with the given latent shape.
    pub fn empty(grid: Grid, d_s: usize, k: usize) -> Result<Self> {
        if d_s == 0 || k == 0 || k > d_s || k > u16::MAX as usize {
            return Err(Error::invalid(format!("invalid cache shape d_s={d_s}, k={k}")));
        }
        Ok(Self {
            image_ids: Vec::new(),
            sources: Vec::new(),
            grid,
            d_s,
            k,
            counts: Vec::new(),
            indices: Vec::new(),
            values: Vec::new(),
            lookup: HashMap::new(),
        })
    }

    pub fn n_images(&self) -> usize {
        self.image_ids.len()
    }
    pub fn tokens_per_image(&self) -> usize {
        self.grid.tokens()
    }
    pub fn grid(&self) -> Grid {
        self.grid
    }
    pub fn d_sae(&self) -> usize {
        self.d_s
    }
    pub fn k(&self) -> usize {
        self.k
    }
    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }
    pub fn sources(&self) -> &[String] {
        &self.sources
    }

    pub fn image_index(&self, image_id: &str) -> Option<usize> {
        self.lookup.get(image_id).copied()
    }

    fn require_image(&self, image_id: &str) -> Result<usize> {
        self.image_index(image_id)
            .ok_or_else(|| Error::NotFound(format!("image {image_id:?} not in cache")))
    }

    /// Active `(indices, values)` of one token, O(1).
    pub fn token(&self, image: usize, t: usize) -> (&[u32], &[f32]) {
        let slot = image * self.grid.tokens() + t;
        let c = self.counts[slot] as usize;
        let base = slot * self.k;
        (&self.indices[base..base + c], &self.values[base..base + c])
    }

    /// Dense `d_s` latent of one token; absent features are 0.
    pub fn densify_token(&self, image: usize, t: usize) -> Vec<f32> {
        let mut z = vec![0.0; self.d_s];
        let (idx, val) = self.token(image, t);
        for (&j, &v) in idx.iter().zip(val) {
            z[j as usize] = v;
        }
        z
    }

    /// Appends one image's token states. Values are stored as given, so
    /// steered runs may write non-positive values.
    pub fn push_image(&mut self, image_id: String, source: String, tokens: &[(Vec<usize>, Vec<f32>)]) -> Result<()> {
        if tokens.len() != self.grid.tokens() {
            return Err(Error::invalid(format!(
                "image has {} tokens, cache expects {}",
                tokens.len(),
                self.grid.tokens()
            )));
        }
        if self.lookup.contains_key(&image_id) {
            return Err(Error::invalid(format!("duplicate image id {image_id:?}")));
        }
        for (idx, val) in tokens {
            if idx.len() != val.len() || idx.len() > self.k {
                return Err(Error::invalid("token record exceeds k or is misaligned"));
            }
            if idx.windows(2).any(|w| w[0] >= w[1]) || idx.iter().any(|&j| j >= self.d_s) {
                return Err(Error::invalid("token indices must be increasing and < d_s"));
            }
            self.counts.push(idx.len() as u16);
            for slot in 0..self.k {
                self.indices.push(idx.get(slot).map_or(0, |&j| j as u32));
                self.values.push(val.get(slot).copied().unwrap_or(0.0));
            }
        }
        self.lookup.insert(image_id.clone(), self.image_ids.len());
        self.image_ids.push(image_id);
        self.sources.push(source);
        Ok(())
    }

    /// Replaces the source of every image listed in `sources`.
    pub fn set_sources(&mut self, sources: &HashMap<String, String>) {
        for (id, src) in self.image_ids.iter().zip(self.sources.iter_mut()) {
            if let Some(s) = sources.get(id) {
                s.clone_into(src);
            }
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let slots = self.counts.len();
        let mut w = ByteWriter::with_capacity(32 + slots * (2 + 8 * self.k) + 4);
        w.bytes(CACHE_MAGIC);
        w.u32(FORMAT_VERSION);
        w.u64(self.image_ids.len() as u64);
        w.u32(binio::to_u32(self.grid.tokens(), "T")?);
        w.u32(binio::to_u32(self.d_s, "d_s")?);
        w.u32(binio::to_u32(self.k, "k")?);
        w.end_header();
        for s in 0..slots {
            w.u16(self.counts[s]);
            for slot in s * self.k..(s + 1) * self.k {
                w.u32(self.indices[slot]);
                w.f32(self.values[slot]);
            }
        }
        Ok(w.finish())
    }

    /// Parses the binary cache. Image ids default to `image-{i}` and the
    /// grid to a single row; [`SparseFeatureCache::load`] fills both from
    /// the manifest.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf, "sparse cache");
        r.preamble(CACHE_MAGIC, FORMAT_VERSION)?;
        let n = r.u64()?;
        let t = r.u32()? as usize;
        let d_s = r.u32()? as usize;
        let k = r.u32()? as usize;
        if t == 0 || t > u16::MAX as usize * u16::MAX as usize {
            return Err(Error::format(20, format!("invalid token count {t}")));
        }
        if d_s == 0 || k == 0 || k > d_s || k > u16::MAX as usize {
            return Err(Error::format(24, format!("invalid cache shape d_s={d_s}, k={k}")));
        }
        let rec = 2 + 8 * k as u64;
        let body = n
            .checked_mul(t as u64)
            .and_then(|v| v.checked_mul(rec))
            .ok_or_else(|| Error::format(12, "n_images overflows"))?;
        r.expect_body_and_trailer(body)?;
        let slots = (n as usize) * t;
        let mut counts = Vec::with_capacity(slots);
        let mut indices = Vec::with_capacity(slots * k);
        let mut values = Vec::with_capacity(slots * k);
        for _ in 0..slots {
            let at = r.offset();
            let c = r.u16()?;
            if c as usize > k {
                return Err(Error::format(at, format!("token count {c} exceeds k={k}")));
            }
            let raw = r.take(8 * k)?;
            let mut prev: Option<u32> = None;
            for (slot, pair) in raw.chunks_exact(8).enumerate() {
                let j = u32::from_le_bytes(pair[..4].try_into().unwrap());
                let v = f32::from_le_bytes(pair[4..].try_into().unwrap());
                if slot < c as usize {
                    if j as usize >= d_s || prev.is_some_and(|p| p >= j) || !v.is_finite() {
                        return Err(Error::format(at, "invalid token record"));
                    }
                    prev = Some(j);
                }
                indices.push(j);
                values.push(v);
            }
            counts.push(c);
        }
        // Rows/cols are not part of the binary header; a single row keeps
        // token order intact until the manifest supplies the real grid.
        let grid = if t <= u16::MAX as usize {
            Grid {
                rows: 1,
                cols: t as u16,
            }
        } else {
            return Err(Error::format(20, "T needs a manifest grid"));
        };
        let image_ids: Vec<String> = (0..n).map(|i| format!("image-{i}")).collect();
        let lookup = image_ids.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        Ok(Self {
            sources: vec![String::new(); n as usize],
            image_ids,
            grid,
            d_s,
            k,
            counts,
            indices,
            values,
            lookup,
        })
    }

    /// Path of the sidecar manifest for a cache file.
    pub fn manifest_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".manifest.jsonl");
        PathBuf::from(s)
    }

    /// Writes the cache file and its manifest.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        binio::write_file(path, &self.to_bytes()?)?;
        let mpath = Self::manifest_path(path);
        let mut out = Vec::new();
        let header = ManifestLine::Header {
            rows: self.grid.rows,
            cols: self.grid.cols,
            n_images: self.image_ids.len() as u64,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        for (id, src) in self.image_ids.iter().zip(&self.sources) {
            serde_json::to_writer(
                &mut out,
                &ManifestLine::Image {
                    image_id: id.clone(),
                    source: src.clone(),
                },
            )?;
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(&mpath).map_err(Error::at_path(&mpath))?;
        f.write_all(&out).map_err(Error::at_path(&mpath))?;
        Ok(())
    }

    /// Reads a cache file and its manifest.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cache = Self::from_bytes(&binio::read_file(path)?)?;
        let mpath = Self::manifest_path(path);
        let f = std::fs::File::open(&mpath).map_err(Error::at_path(&mpath))?;
        let mut ids = Vec::new();
        let mut sources = Vec::new();
        let mut grid = None;
        for (lineno, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(Error::at_path(&mpath))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<ManifestLine>(&line)? {
                ManifestLine::Header { rows, cols, n_images } => {
                    if n_images as usize != cache.n_images() {
                        return Err(Error::invalid(format!(
                            "manifest lists {n_images} images, cache has {}",
                            cache.n_images()
                        )));
                    }
                    grid = Some(Grid::new(rows, cols)?);
                }
                ManifestLine::Image { image_id, source } => {
                    if grid.is_none() {
                        return Err(Error::invalid(format!("manifest line {} precedes header", lineno + 1)));
                    }
                    ids.push(image_id);
                    sources.push(source);
                }
            }
        }
        let grid = grid.ok_or_else(|| Error::invalid("manifest has no header"))?;
        if grid.tokens() != cache.tokens_per_image() || ids.len() != cache.n_images() {
            return Err(Error::invalid("manifest disagrees with cache header"));
        }
        cache.grid = grid;
        cache.lookup = ids.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        if cache.lookup.len() != ids.len() {
            return Err(Error::invalid("manifest contains duplicate image ids"));
        }
        cache.image_ids = ids;
        cache.sources = sources;
        Ok(cache)
    }

    /// Sum of feature `j` over the tokens of every image, in f64.
    fn feature_sums(&self, j: usize) -> Vec<f64> {
        let t = self.grid.tokens();
        (0..self.n_images())
            .map(|i| {
                let mut s = 0f64;
                for tok in 0..t {
                    let (idx, val) = self.token(i, tok);
                    if let Ok(p) = idx.binary_search(&(j as u32)) {
                        s += val[p] as f64;
                    }
                }
                s
            })
            .collect()
    }

    /// Per-feature list of `(image, mean activation)` for every image where
    /// the feature is nonzero, computed in one pass.
    pub fn feature_index(&self) -> Vec<Vec<(usize, f32)>> {
        let t = self.grid.tokens();
        let mut sums: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.d_s];
        for i in 0..self.n_images() {
            for tok in 0..t {
                let (idx, val) = self.token(i, tok);
                for (&j, &v) in idx.iter().zip(val) {
                    let list = &mut sums[j as usize];
                    match list.last_mut() {
                        Some((img, s)) if *img == i => *s += v as f64,
                        _ => list.push((i, v as f64)),
                    }
                }
            }
        }
        sums.into_iter()
            .map(|l| {
                l.into_iter()
                    .map(|(i, s)| (i, (s / t as f64) as f32))
                    .filter(|(_, m)| *m != 0.0)
                    .collect()
            })
            .collect()
    }
}

/// Encodes every token of `shards` and keeps its TopK pairs.
pub fn build_sparse_cache(shards: &[ActivationShard], params: &SaeParams) -> Result<SparseFeatureCache> {
    let grid = shards.first().map_or(Grid { rows: 1, cols: 1 }, |s| s.grid);
    let mut cache = SparseFeatureCache::empty(grid, params.d_sae(), params.k())?;
    for (si, shard) in shards.iter().enumerate() {
        if shard.d_l != params.d_model() {
            return Err(Error::invalid(format!(
                "shard {si} has d_l={}, SAE expects {}",
                shard.d_l,
                params.d_model()
            )));
        }
        if shard.grid != grid {
            return Err(Error::invalid(format!("shard {si} grid differs from shard 0")));
        }
        let t = grid.tokens();
        let encoded: Vec<(Vec<usize>, Vec<f32>)> = (0..shard.n_images() * t)
            .into_par_iter()
            .map(|slot| {
                let s = sae::encode(shard.token(slot / t, slot % t), params)?;
                Ok((s.active, s.values))
            })
            .collect::<Result<_>>()?;
        for (i, id) in shard.image_ids.iter().enumerate() {
            cache.push_image(id.clone(), format!("shard{si}#{i}"), &encoded[i * t..(i + 1) * t])?;
        }
    }
    Ok(cache)
}

/// Mean over each image's `T` tokens of feature `j` (absent tokens count as 0).
pub fn mean_activation(cache: &SparseFeatureCache, j: usize) -> Result<Vec<f32>> {
    if j >= cache.d_s {
        return Err(Error::invalid(format!("feature {j} out of range (d_s={})", cache.d_s)));
    }
    let t = cache.tokens_per_image() as f64;
    Ok(cache.feature_sums(j).into_iter().map(|s| (s / t) as f32).collect())
}

/// One ranked image for a feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopImage {
    pub image_id: String,
    pub mean: f32,
}

/// Mean activations of one feature and its highest-ranked images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureActivationSummary {
    pub feature: usize,
    pub mean_activation: Vec<f32>,
    pub top_images: Vec<TopImage>,
}

/// Ranks images by descending mean, ties by image id; zero means dropped.
pub(crate) fn rank_images<'a>(ids: impl Iterator<Item = (&'a str, f32)>, n: usize) -> Vec<TopImage> {
    let mut ranked: Vec<(&str, f32)> = ids.filter(|(_, m)| *m != 0.0).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked
        .into_iter()
        .take(n)
        .map(|(id, mean)| TopImage {
            image_id: id.to_owned(),
            mean,
        })
        .collect()
}

/// The `n` images with the largest mean activation of feature `j`.
pub fn top_images(cache: &SparseFeatureCache, j: usize, n: usize) -> Result<FeatureActivationSummary> {
    if n < 1 {
        return Err(Error::invalid("top_images needs n >= 1"));
    }
    let means = mean_activation(cache, j)?;
    let top = rank_images(cache.image_ids.iter().map(String::as_str).zip(means.iter().copied()), n);
    Ok(FeatureActivationSummary {
        feature: j,
        mean_activation: means,
        top_images: top,
    })
}

/// Per-token values of one feature on one image, laid out on the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `rows * cols` values.
    pub values: Vec<f32>,
}

impl Heatmap {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::invalid(format!(
                "heatmap has {} values, grid is {rows}x{cols}",
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.cols + c]
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

/// Feature `j`'s per-token values on `image_id`, reshaped to the grid.
pub fn token_heatmap(cache: &SparseFeatureCache, image_id: &str, j: usize) -> Result<Heatmap> {
    let i = cache.require_image(image_id)?;
    if j >= cache.d_s {
        return Err(Error::invalid(format!("feature {j} out of range (d_s={})", cache.d_s)));
    }
    let t = cache.tokens_per_image();
    let values = (0..t)
        .map(|tok| {
            let (idx, val) = cache.token(i, tok);
            idx.binary_search(&(j as u32)).map_or(0.0, |p| val[p])
        })
        .collect();
    Heatmap::new(cache.grid.rows as usize, cache.grid.cols as usize, values)
}

/// Mean activation of every feature on one image, as `(feature, mean)`
/// pairs for features that are nonzero somewhere on the image.
pub fn image_feature_means(cache: &SparseFeatureCache, image_id: &str) -> Result<Vec<(usize, f32)>> {
    let i = cache.require_image(image_id)?;
    let t = cache.tokens_per_image();
    let mut sums: std::collections::BTreeMap<usize, f64> = Default::default();
    for tok in 0..t {
        let (idx, val) = cache.token(i, tok);
        for (&j, &v) in idx.iter().zip(val) {
            *sums.entry(j as usize).or_default() += v as f64;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(j, s)| (j, (s / t as f64) as f32))
        .filter(|(_, m)| *m != 0.0)
        .collect())
}

/// One line of an image manifest: where the pixels of an image live.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: String,
    pub source: String,
}

pub fn write_image_manifest(path: impl AsRef<Path>, entries: &[ImageEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(Error::at_path(path))
}

pub fn read_image_manifest(path: impl AsRef<Path>) -> Result<Vec<ImageEntry>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(Error::at_path(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(Error::at_path(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("{} line {}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_shard(n: usize, grid: Grid, d_l: usize, seed: u64) -> ActivationShard {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * grid.tokens() * d_l)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect();
        ActivationShard::new((0..n).map(|i| format!("img{i:03}")).collect(), grid, d_l, data).unwrap()
    }

    fn tiny_cache(values: &[&[(usize, f32)]], ids: &[&str], t: u16) -> SparseFeatureCache {
        let mut c = SparseFeatureCache::empty(Grid::new(1, t).unwrap(), 8, 3).unwrap();
        for (img, id) in ids.iter().enumerate() {
            let toks: Vec<(Vec<usize>, Vec<f32>)> = (0..t as usize)
                .map(|tok| {
                    let rec = values[img * t as usize + tok];
                    (rec.iter().map(|p| p.0).collect(), rec.iter().map(|p| p.1).collect())
                })
                .collect();
            c.push_image(id.to_string(), String::new(), &toks).unwrap();
        }
        c
    }

    #[test]
    fn shard_roundtrip_is_bit_exact() {
        let s = random_shard(3, Grid::new(2, 2).unwrap(), 5, 1);
        let b = s.to_bytes().unwrap();
        let back = ActivationShard::from_bytes(&b).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes().unwrap(), b);
    }

    #[test]
    fn truncated_shard_names_lengths() {
        let s = random_shard(2, Grid::new(2, 2).unwrap(), 3, 2);
        let b = s.to_bytes().unwrap();
        let err = ActivationShard::from_bytes(&b[..60]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected") && msg.contains("found 60"), "{msg}");
    }

    #[test]
    fn empty_shard_roundtrips() {
        let s = ActivationShard::new(vec![], Grid::new(4, 4).unwrap(), 8, vec![]).unwrap();
        let back = ActivationShard::from_bytes(&s.to_bytes().unwrap()).unwrap();
        assert_eq!(back.n_images(), 0);
        assert_eq!(back.grid, s.grid);
    }

    #[test]
    fn shard_header_mutations_are_rejected() {
        let b = random_shard(2, Grid::new(2, 3).unwrap(), 3, 9).to_bytes().unwrap();
        for i in 0..SHARD_HEADER_LEN as usize {
            for flip in [0x01u8, 0x80, 0xff] {
                let mut m = b.clone();
                m[i] ^= flip;
                assert!(ActivationShard::from_bytes(&m).is_err(), "byte {i} flip {flip:#x}");
            }
        }
    }

    #[test]
    fn cache_header_mutations_are_rejected() {
        let p = SaeParams::new(
            3,
            6,
            2,
            vec![0.5; 18],
            vec![0.0; 3],
            vec![0.1; 6],
            vec![0.2; 18],
            vec![0.0; 3],
        )
        .unwrap();
        let cache = build_sparse_cache(&[random_shard(2, Grid::new(2, 2).unwrap(), 3, 4)], &p).unwrap();
        let b = cache.to_bytes().unwrap();
        for i in 0..32 {
            let mut m = b.clone();
            m[i] ^= 0x04;
            assert!(SparseFeatureCache::from_bytes(&m).is_err(), "byte {i}");
        }
    }

    #[test]
    fn k1_cache_stores_at_most_one_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = |n: usize| (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
        let p = SaeParams::new(4, 6, 1, g(24), g(4), g(6), g(24), g(4)).unwrap();
        let c = build_sparse_cache(&[random_shard(4, Grid::new(2, 2).unwrap(), 4, 5)], &p).unwrap();
        for i in 0..4 {
            for t in 0..4 {
                assert!(c.token(i, t).0.len() <= 1);
            }
        }
    }

    #[test]
    fn empty_shard_list_gives_empty_cache() {
        let p = SaeParams::zeros(2, 4, 2).unwrap();
        let c = build_sparse_cache(&[], &p).unwrap();
        assert_eq!(c.n_images(), 0);
        let back = SparseFeatureCache::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.n_images(), 0);
        assert_eq!(back.d_sae(), 4);
    }

    #[test]
    fn build_rejects_dim_mismatch() {
        let p = SaeParams::zeros(5, 4, 2).unwrap();
        let s = random_shard(1, Grid::new(1, 2).unwrap(), 4, 1);
        assert!(matches!(build_sparse_cache(&[s], &p), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn mean_activation_examples() {
        let c = tiny_cache(&[&[(1, 2.0)], &[], &[(1, 4.0), (2, 1.0)]], &["a", "b", "c"], 1);
        assert_eq!(mean_activation(&c, 1).unwrap(), vec![2.0, 0.0, 4.0]);
        assert_eq!(mean_activation(&c, 5).unwrap(), vec![0.0; 3]);
        assert!(mean_activation(&c, 8).is_err());
    }

    #[test]
    fn top_images_ties_and_exclusions() {
        let c = tiny_cache(&[&[(0, 1.0)], &[(0, 3.0)], &[(0, 3.0)], &[]], &["d", "c", "b", "a"], 1);
        let s = top_images(&c, 0, 5).unwrap();
        let ids: Vec<&str> = s.top_images.iter().map(|t| t.image_id.as_str()).collect();
        assert_eq!(ids, vec!["b", "c", "d"]);
    }

    #[test]
    fn heatmap_examples() {
        let c = tiny_cache(&[&[], &[(3, 2.5)], &[], &[], &[], &[]], &["x"], 6);
        let mut c = c;
        c.grid = Grid::new(2, 3).unwrap();
        let h = token_heatmap(&c, "x", 3).unwrap();
        assert_eq!(h.at(0, 1), 2.5);
        assert_eq!(h.values.iter().filter(|v| **v != 0.0).count(), 1);
        let z = token_heatmap(&c, "x", 4).unwrap();
        assert!(z.values.iter().all(|v| *v == 0.0));
        assert!(matches!(token_heatmap(&c, "nope", 0), Err(Error::NotFound(_))));
    }

    #[test]
    fn feature_index_agrees_with_mean_activation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut g = |n: usize| (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
        let p = SaeParams::new(4, 10, 3, g(40), g(4), g(10), g(40), g(4)).unwrap();
        let c = build_sparse_cache(&[random_shard(6, Grid::new(2, 2).unwrap(), 4, 13)], &p).unwrap();
        let idx = c.feature_index();
        for j in 0..10 {
            let dense = mean_activation(&c, j).unwrap();
            let mut from_idx = vec![0.0f32; 6];
            for &(i, m) in &idx[j] {
                from_idx[i] = m;
            }
            assert_eq!(dense, from_idx);
        }
    }

    #[test]
    fn save_load_with_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = SaeParams::new(
            3,
            6,
            2,
            vec![0.3; 18],
            vec![0.0; 3],
            vec![0.1; 6],
            vec![0.2; 18],
            vec![0.0; 3],
        )
        .unwrap();
        let c = build_sparse_cache(&[random_shard(3, Grid::new(3, 2).unwrap(), 3, 4)], &p).unwrap();
        let path = dir.path().join("feat.spc");
        c.save(&path).unwrap();
        let back = SparseFeatureCache::load(&path).unwrap();
        assert_eq!(back, c);
    }
}
