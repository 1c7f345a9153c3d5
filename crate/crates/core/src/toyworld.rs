// SPDX-License-Identifier: MIT OR Apache-2.0

//! A procedurally generated image world with planted concepts.
//!
//! Every image is a grid of token cells. Some cells are covered by a
//! coloured concept patch; the rest show grey noise. A covered token is the
//! concept's direction scaled per patch, an uncovered token is one random
//! background atom, and both carry Gaussian noise. A well-trained SAE with
//! `k = 1` therefore recovers one feature per concept
//! whose support coincides with the concept patch. The world also produces
//! ground-truth masks, embeddings and mock clients that know the palette.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::{EmbeddingKind, EmbeddingRecord, FileEmbeddings, FileGrounding};
use crate::host::{ToyHost, ToyLinearHost, ToyVocab};
use crate::interpret::client::{KeyedClient, PaletteEntry, PaletteExplainer, PaletteJudge};
use crate::interpret::Concept;
use crate::linalg;
use crate::mask::Mask;
use crate::sae::SaeParams;
use crate::store::{self, ActivationShard, Grid, ImageEntry};

/// A named colour patch and the concept category it belongs to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConcept {
    pub name: String,
    pub rgb: [u8; 3],
    pub category: Concept,
}

impl ToyConcept {
    fn new(name: &str, rgb: [u8; 3], category: Concept) -> Self {
        Self {
            name: name.into(),
            rgb,
            category,
        }
    }
}

pub fn default_concepts() -> Vec<ToyConcept> {
    vec![
        ToyConcept::new("grass", [40, 170, 40], Concept::Texture),
        ToyConcept::new("sky", [90, 160, 230], Concept::Scene),
        ToyConcept::new("brick wall", [170, 60, 40], Concept::Material),
        ToyConcept::new("sun", [245, 215, 40], Concept::Object),
        ToyConcept::new("purple flower", [130, 40, 170], Concept::Object),
        ToyConcept::new("wood", [120, 85, 30], Concept::Material),
        ToyConcept::new("snow", [240, 240, 245], Concept::Texture),
        ToyConcept::new("orange", [250, 140, 10], Concept::Colour),
        ToyConcept::new("cyan", [20, 210, 200], Concept::Colour),
        ToyConcept::new("leaf", [10, 95, 70], Concept::Part),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyWorldConfig {
    pub n_images: usize,
    pub grid: Grid,
    /// Side length of a token cell in pixels.
    pub cell_px: u32,
    pub d_l: usize,
    pub n_background: usize,
    pub concept_coef: (f32, f32),
    /// Relative per-token variation of a patch's coefficient.
    pub concept_jitter: f32,
    pub background_coef: (f32, f32),
    pub noise_sigma: f32,
    /// Upper bound on concept patches per image.
    pub max_concepts: usize,
    /// Upper bound on a patch's height and width in cells.
    pub max_patch_cells: usize,
    pub embed_dim: usize,
    pub images_per_shard: usize,
    pub seed: u64,
    pub concepts: Vec<ToyConcept>,
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        Self {
            n_images: 400,
            grid: Grid { rows: 4, cols: 4 },
            cell_px: 16,
            d_l: 32,
            n_background: 12,
            concept_coef: (2.0, 3.0),
            concept_jitter: 0.05,
            background_coef: (0.2, 0.8),
            noise_sigma: 0.02,
            max_concepts: 2,
            max_patch_cells: 2,
            embed_dim: 16,
            images_per_shard: 256,
            seed: 7,
            concepts: default_concepts(),
        }
    }
}

impl ToyWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.concepts.is_empty() || self.n_images == 0 || self.d_l == 0 || self.cell_px == 0 {
            return Err(Error::Config(
                "toy world needs concepts, images, d_l and cell_px > 0".into(),
            ));
        }
        if self.max_concepts > self.concepts.len() {
            return Err(Error::Config(
                "toyworld.max_concepts exceeds the number of concepts".into(),
            ));
        }
        if self.max_patch_cells == 0
            || self.max_patch_cells > self.grid.rows as usize
            || self.max_patch_cells > self.grid.cols as usize
        {
            return Err(Error::Config("toyworld.max_patch_cells must fit the grid".into()));
        }
        if self.embed_dim <= self.concepts.len() {
            return Err(Error::Config(
                "toyworld.embed_dim must exceed the number of concepts".into(),
            ));
        }
        if self.images_per_shard == 0 {
            return Err(Error::Config("toyworld.images_per_shard must be positive".into()));
        }
        Ok(())
    }

    pub fn image_width(&self) -> u32 {
        self.grid.cols as u32 * self.cell_px
    }

    pub fn image_height(&self) -> u32 {
        self.grid.rows as u32 * self.cell_px
    }
}

/// A rectangle of cells covered by one concept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub concept: usize,
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
    pub coef: f32,
}

impl Placement {
    pub fn covers(&self, r: usize, c: usize) -> bool {
        (self.row..self.row + self.height).contains(&r) && (self.col..self.col + self.width).contains(&c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyImage {
    pub id: String,
    pub placements: Vec<Placement>,
    /// Seed of the pixel noise.
    pub pixel_seed: u64,
}

/// A generated world: planted directions, image layouts and activations.
#[derive(Clone, Debug)]
pub struct ToyWorld {
    pub config: ToyWorldConfig,
    /// `n_concepts x d_l` unit directions.
    pub directions: Vec<f32>,
    /// `n_background x d_l` unit directions.
    pub background: Vec<f32>,
    pub images: Vec<ToyImage>,
    pub shards: Vec<ActivationShard>,
}

fn unit_vectors(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.extend(v.iter().map(|x| (x / norm) as f32));
    }
    out
}

/// Where the files of a written world live.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldFiles {
    pub shards: Vec<PathBuf>,
    pub images: PathBuf,
    pub grounding: PathBuf,
    pub embeddings: PathBuf,
    pub host: PathBuf,
    pub world: PathBuf,
}

/// Directions of a written world, enough to match learned features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSummary {
    pub d_l: usize,
    pub concepts: Vec<ToyConcept>,
    pub directions: Vec<f32>,
    pub images: Vec<ToyImage>,
}

impl WorldSummary {
    pub fn direction(&self, c: usize) -> &[f32] {
        &self.directions[c * self.d_l..(c + 1) * self.d_l]
    }

    /// Concept whose direction has the highest cosine with decoder column
    /// `j`, if that cosine exceeds `min_cos`.
    pub fn matching_concept(&self, params: &SaeParams, j: usize, min_cos: f64) -> Option<(usize, f64)> {
        let col = params.decoder_column(j);
        (0..self.concepts.len())
            .map(|c| (c, linalg::cosine(col, self.direction(c))))
            .filter(|&(_, cos)| cos > min_cos)
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::at_path(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

impl ToyWorld {
    pub fn generate(config: ToyWorldConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n_c = config.concepts.len();
        let d_l = config.d_l;
        let directions = unit_vectors(n_c, d_l, &mut rng);
        let background = unit_vectors(config.n_background, d_l, &mut rng);
        let (rows, cols) = (config.grid.rows as usize, config.grid.cols as usize);
        let t = config.grid.tokens();

        let mut images = Vec::with_capacity(config.n_images);
        let mut data = Vec::with_capacity(config.n_images * t * d_l);
        for i in 0..config.n_images {
            let n_patches = rng.random_range(1..=config.max_concepts);
            let chosen = index::sample(&mut rng, n_c, n_patches).into_vec();
            let mut placements: Vec<Placement> = Vec::new();
            for concept in chosen {
                for _ in 0..32 {
                    let height = rng.random_range(1..=config.max_patch_cells);
                    let width = rng.random_range(1..=config.max_patch_cells);
                    let row = rng.random_range(0..=rows - height);
                    let col = rng.random_range(0..=cols - width);
                    let p = Placement {
                        concept,
                        row,
                        col,
                        height,
                        width,
                        coef: rng.random_range(config.concept_coef.0..config.concept_coef.1),
                    };
                    let overlaps = placements
                        .iter()
                        .any(|q| (0..height).any(|dr| (0..width).any(|dc| q.covers(row + dr, col + dc))));
                    if !overlaps {
                        placements.push(p);
                        break;
                    }
                }
            }
            for tok in 0..t {
                let (r, c) = (tok / cols, tok % cols);
                let mut x = vec![0f64; d_l];
                for p in placements.iter().filter(|p| p.covers(r, c)) {
                    let jitter = 1.0 + rng.random_range(-config.concept_jitter..=config.concept_jitter);
                    let a = (p.coef * jitter) as f64;
                    for (xi, di) in x.iter_mut().zip(&directions[p.concept * d_l..(p.concept + 1) * d_l]) {
                        *xi += a * *di as f64;
                    }
                }
                let covered = placements.iter().any(|p| p.covers(r, c));
                if config.n_background > 0 && !covered {
                    let b = rng.random_range(0..config.n_background);
                    let a = rng.random_range(config.background_coef.0..config.background_coef.1) as f64;
                    for (xi, di) in x.iter_mut().zip(&background[b * d_l..(b + 1) * d_l]) {
                        *xi += a * *di as f64;
                    }
                }
                for xi in x.iter_mut() {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *xi += config.noise_sigma as f64 * n;
                }
                data.extend(x.iter().map(|v| *v as f32));
            }
            images.push(ToyImage {
                id: format!("img{i:05}"),
                placements,
                pixel_seed: rng.random(),
            });
        }

        let per_image = t * d_l;
        let mut shards = Vec::new();
        for (ci, chunk) in images.chunks(config.images_per_shard).enumerate() {
            let start = ci * config.images_per_shard * per_image;
            let ids = chunk.iter().map(|im| im.id.clone()).collect();
            let slice = data[start..start + chunk.len() * per_image].to_vec();
            shards.push(ActivationShard::new(ids, config.grid, d_l, slice)?);
        }
        Ok(Self {
            config,
            directions,
            background,
            images,
            shards,
        })
    }

    pub fn n_concepts(&self) -> usize {
        self.config.concepts.len()
    }

    pub fn direction(&self, c: usize) -> &[f32] {
        let d = self.config.d_l;
        &self.directions[c * d..(c + 1) * d]
    }

    pub fn summary(&self) -> WorldSummary {
        WorldSummary {
            d_l: self.config.d_l,
            concepts: self.config.concepts.clone(),
            directions: self.directions.clone(),
            images: self.images.clone(),
        }
    }

    pub fn image_index(&self, id: &str) -> Option<usize> {
        self.images.iter().position(|im| im.id == id)
    }

    /// Pixels of image `i`: grey noise with flat-coloured concept patches.
    pub fn render(&self, i: usize) -> RgbImage {
        let cfg = &self.config;
        let im = &self.images[i];
        let mut rng = ChaCha8Rng::seed_from_u64(im.pixel_seed);
        let px = cfg.cell_px;
        RgbImage::from_fn(cfg.image_width(), cfg.image_height(), |x, y| {
            let (r, c) = ((y / px) as usize, (x / px) as usize);
            match im.placements.iter().find(|p| p.covers(r, c)) {
                Some(p) => {
                    let rgb = cfg.concepts[p.concept].rgb;
                    Rgb(rgb.map(|v| (v as i32 + rng.random_range(-6..=6)).clamp(1, 255) as u8))
                }
                None => {
                    let g = rng.random_range(100..140);
                    Rgb([0, 1, 2].map(|_| (g + rng.random_range(-5..=5)) as u8))
                }
            }
        })
    }

    /// Cells of image `i` covered by `concept`, at token resolution.
    pub fn token_mask(&self, i: usize, concept: usize) -> Mask {
        let g = self.config.grid;
        let mut m = Mask::empty(g.cols as usize, g.rows as usize);
        for p in self.images[i].placements.iter().filter(|p| p.concept == concept) {
            for r in p.row..p.row + p.height {
                for c in p.col..p.col + p.width {
                    m.set(c, r, true);
                }
            }
        }
        m
    }

    /// Ground-truth segmentation of `concept` in image `i` at pixel
    /// resolution; `None` when the concept is absent.
    pub fn truth_mask(&self, i: usize, concept: usize) -> Option<Mask> {
        let m = self.token_mask(i, concept);
        if m.is_empty() {
            return None;
        }
        m.upsample(self.config.image_width() as usize, self.config.image_height() as usize)
            .ok()
    }

    pub fn palette(&self) -> Vec<PaletteEntry> {
        self.config
            .concepts
            .iter()
            .map(|c| PaletteEntry {
                name: c.name.clone(),
                rgb: c.rgb,
            })
            .collect()
    }

    pub fn explainer(&self) -> PaletteExplainer {
        PaletteExplainer::new(self.palette())
    }

    pub fn judge(&self) -> PaletteJudge {
        PaletteJudge(self.explainer())
    }

    /// Mock refiner mapping each concept description to its name.
    pub fn refiner(&self) -> KeyedClient {
        KeyedClient::new(
            self.config
                .concepts
                .iter()
                .map(|c| (format!("Description: {}", c.name), c.name.clone())),
        )
    }

    /// Mock categorizer mapping each concept name to its category.
    pub fn categorizer(&self) -> KeyedClient {
        KeyedClient::new(
            self.config
                .concepts
                .iter()
                .map(|c| (format!("\"{}\"", c.name), c.category.as_str().to_string())),
        )
    }

    /// Text embeddings near one basis vector per concept; image embeddings
    /// mix the concepts present by area, plus a shared background axis.
    pub fn embeddings(&self) -> Vec<EmbeddingRecord> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe3be_dd00);
        let dim = cfg.embed_dim;
        let bg_axis = cfg.concepts.len();
        let mut noise = |v: &mut Vec<f32>, s: f32| {
            for x in v.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *x += s * n as f32;
            }
        };
        let mut out = Vec::new();
        for (c, concept) in cfg.concepts.iter().enumerate() {
            let mut v = vec![0f32; dim];
            v[c] = 1.0;
            noise(&mut v, 0.05);
            out.push(EmbeddingRecord {
                kind: EmbeddingKind::Text,
                id: concept.name.clone(),
                vector: v,
            });
        }
        let cells = cfg.grid.tokens() as f32;
        for im in &self.images {
            let mut v = vec![0f32; dim];
            let mut covered = 0.0;
            for p in &im.placements {
                let a = (p.height * p.width) as f32 / cells;
                v[p.concept] += a.sqrt();
                covered += a;
            }
            v[bg_axis] = (1.0 - covered).max(0.0).sqrt();
            noise(&mut v, 0.05);
            out.push(EmbeddingRecord {
                kind: EmbeddingKind::Image,
                id: im.id.clone(),
                vector: v,
            });
        }
        out
    }

    /// Linear toy host whose front end knows every image of the world.
    pub fn host(&self, seed: u64) -> Result<ToyHost> {
        let vocab = ToyVocab::default().len();
        let mut h = ToyLinearHost::random(self.config.d_l, vocab, self.config.grid, seed);
        h.front.add_images(&self.shards)?;
        Ok(ToyHost::Linear(h))
    }

    /// Writes images, shards, ground truth, embeddings and host spec under
    /// `dir`; returned paths are relative to `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, host_seed: u64) -> Result<WorldFiles> {
        let dir = dir.as_ref();
        let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(Error::at_path(p));
        for sub in ["images", "shards", "grounding"] {
            mkdir(&dir.join(sub))?;
        }
        let grounding = FileGrounding::new(dir.join("grounding"));
        let mut entries = Vec::with_capacity(self.images.len());
        for (i, im) in self.images.iter().enumerate() {
            let source = format!("images/{}.png", im.id);
            self.render(i).save(dir.join(&source))?;
            entries.push(ImageEntry {
                image_id: im.id.clone(),
                source,
            });
            mkdir(&grounding.root.join(&im.id))?;
            for p in &im.placements {
                let name = &self.config.concepts[p.concept].name;
                let d = grounding.dir_for(&im.id, name);
                mkdir(&d)?;
                if let Some(m) = self.truth_mask(i, p.concept) {
                    m.save(d.join("0.mask"))?;
                }
            }
        }
        let images = PathBuf::from("images.jsonl");
        store::write_image_manifest(dir.join(&images), &entries)?;

        let mut shards = Vec::new();
        for (si, s) in self.shards.iter().enumerate() {
            let rel = PathBuf::from(format!("shards/shard_{si:03}.act"));
            store::write_shard(s, dir.join(&rel))?;
            shards.push(rel);
        }
        let embeddings = PathBuf::from("embeddings.jsonl");
        FileEmbeddings::save(&self.embeddings(), dir.join(&embeddings))?;
        let host = PathBuf::from("host.json");
        let spec = serde_json::to_string_pretty(&self.host(host_seed)?)?;
        std::fs::write(dir.join(&host), spec).map_err(Error::at_path(dir.join(&host)))?;
        let world = PathBuf::from("world.json");
        let summary = serde_json::to_string(&self.summary())?;
        std::fs::write(dir.join(&world), summary).map_err(Error::at_path(dir.join(&world)))?;
        Ok(WorldFiles {
            shards,
            images,
            grounding: PathBuf::from("grounding"),
            embeddings,
            host,
            world,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluate::{iou, GroundingSource};
    use crate::interpret::client::{ChatClient, ChatRequest};
    use crate::interpret::{compose_masked_image, encode_png};

    fn small() -> ToyWorld {
        ToyWorld::generate(ToyWorldConfig {
            n_images: 20,
            images_per_shard: 8,
            ..ToyWorldConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn activations_follow_placements() {
        let w = small();
        assert_eq!(w.shards.len(), 3);
        assert_eq!(w.shards.iter().map(|s| s.n_images()).sum::<usize>(), 20);
        let shard = &w.shards[0];
        for (i, im) in w.images.iter().take(8).enumerate() {
            for t in 0..16 {
                let (r, c) = (t / 4, t % 4);
                let x = shard.token(i, t);
                for (ci, _) in w.config.concepts.iter().enumerate() {
                    let proj = linalg::dot(x, w.direction(ci));
                    let on = im.placements.iter().any(|p| p.concept == ci && p.covers(r, c));
                    if on {
                        assert!(proj > 1.5, "{} t{t} c{ci} {proj}", im.id);
                    } else {
                        assert!(proj.abs() < 1.5, "{} t{t} c{ci} {proj}", im.id);
                    }
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = small();
        let b = small();
        assert_eq!(a.images, b.images);
        assert_eq!(a.shards, b.shards);
        assert_eq!(a.render(3), b.render(3));
    }

    #[test]
    fn patches_do_not_overlap() {
        let w = ToyWorld::generate(ToyWorldConfig::default()).unwrap();
        for im in &w.images {
            assert!(!im.placements.is_empty());
            for r in 0..4 {
                for c in 0..4 {
                    assert!(im.placements.iter().filter(|p| p.covers(r, c)).count() <= 1);
                }
            }
        }
    }

    #[test]
    fn palette_mocks_read_the_rendered_patches() {
        let w = small();
        let i = 0;
        let p = &w.images[i].placements[0];
        let masked = compose_masked_image(&w.render(i), &w.token_mask(i, p.concept)).unwrap();
        let png = encode_png(&masked).unwrap();
        let name = &w.config.concepts[p.concept].name;
        let reply = w
            .explainer()
            .chat(&ChatRequest::with_images("x", &vec![png.clone(); 3]))
            .unwrap();
        assert_eq!(&reply, name);
        let refine = w
            .refiner()
            .chat(&ChatRequest::text(format!("... Description: {name}")))
            .unwrap();
        assert_eq!(&refine, name);
        let cat = w
            .categorizer()
            .chat(&ChatRequest::text(format!("describes \"{name}\": ...")))
            .unwrap();
        assert_eq!(cat, w.config.concepts[p.concept].category.as_str());
        let yes = w
            .judge()
            .chat(&ChatRequest::with_images(format!("is it {name}?"), &[png]))
            .unwrap();
        assert_eq!(yes, "yes");
    }

    #[test]
    fn written_grounding_matches_truth() {
        let w = small();
        let dir = tempfile::tempdir().unwrap();
        let files = w.write(dir.path(), 1).unwrap();
        let g = FileGrounding::new(dir.path().join(&files.grounding));
        let im = &w.images[2];
        let p = &im.placements[0];
        let name = &w.config.concepts[p.concept].name;
        let dets = g.detect(&im.id, name).unwrap().unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0], w.truth_mask(2, p.concept).unwrap());
        let up = w.token_mask(2, p.concept).upsample(64, 64).unwrap();
        assert_eq!(iou(&up, &dets[0]).unwrap(), 1.0);
        let absent = (0..w.n_concepts())
            .find(|c| im.placements.iter().all(|p| p.concept != *c))
            .unwrap();
        assert_eq!(g.detect(&im.id, &w.config.concepts[absent].name).unwrap(), Some(vec![]));
        assert_eq!(g.detect("nope", name).unwrap(), None);
        let manifest = store::read_image_manifest(dir.path().join(&files.images)).unwrap();
        assert_eq!(manifest.len(), 20);
        assert!(dir.path().join(&manifest[0].source).exists());
        let back = WorldSummary::load(dir.path().join(&files.world)).unwrap();
        assert_eq!(back.images, w.images);
    }
}
