// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scoring explanations: IoU against grounded masks, embedding similarity,
//! random-image baselines and per-concept aggregation.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::interpret::{Concept, FeatureRecord};
use crate::linalg;
use crate::mask::Mask;

/// Two-sided 99% normal quantile.
pub const Z99: f64 = 2.576;

/// `|a & b| / |a | b|`, and 0 when both are empty.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    let inter = a.intersection_count(b)?;
    let union = a.union_count(b)?;
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Union of all detections; `None` for an empty list.
pub fn composite_mask(detections: &[Mask]) -> Result<Option<Mask>> {
    let mut it = detections.iter();
    let Some(first) = it.next() else {
        return Ok(None);
    };
    let mut out = first.clone();
    for m in it {
        out.union_with(m)?;
    }
    Ok(Some(out))
}

/// Detection masks for a label on an image.
pub trait GroundingSource: Send + Sync {
    /// `Ok(None)` when no grounding is available for this image.
    fn detect(&self, image_id: &str, label: &str) -> Result<Option<Vec<Mask>>>;
}

/// Text and image embeddings.
pub trait EmbeddingSource: Send + Sync {
    fn text(&self, label: &str) -> Result<Option<Vec<f32>>>;
    fn image(&self, image_id: &str) -> Result<Option<Vec<f32>>>;
}

/// Lower-cased label with runs of non-alphanumerics collapsed to `_`.
pub fn label_slug(label: &str) -> String {
    let mut out = String::new();
    for c in label.trim().to_lowercase().chars() {
        if c.is_alphanumeric() {
            out.push(c);
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

/// Pre-computed masks under `root/<image_id>/<label slug>/`, one file per
/// detection (packed mask files or grayscale images). A missing image
/// directory means grounding is unavailable for that image; a missing or
/// empty label directory means nothing was detected.
#[derive(Clone, Debug)]
pub struct FileGrounding {
    pub root: PathBuf,
}

impl FileGrounding {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dir_for(&self, image_id: &str, label: &str) -> PathBuf {
        self.root.join(image_id).join(label_slug(label))
    }
}

impl GroundingSource for FileGrounding {
    fn detect(&self, image_id: &str, label: &str) -> Result<Option<Vec<Mask>>> {
        if !self.root.join(image_id).is_dir() {
            return Ok(None);
        }
        let dir = self.dir_for(image_id, label);
        if !dir.is_dir() {
            return Ok(Some(Vec::new()));
        }
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(Error::at_path(&dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        paths.iter().map(Mask::load).collect::<Result<Vec<_>>>().map(Some)
    }
}

/// One line of an embedding file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub kind: EmbeddingKind,
    pub id: String,
    pub vector: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Text,
    Image,
}

/// Embeddings read from a JSON-lines file of [`EmbeddingRecord`]s. Text
/// entries are matched by label slug.
#[derive(Clone, Debug, Default)]
pub struct FileEmbeddings {
    text: HashMap<String, Vec<f32>>,
    image: HashMap<String, Vec<f32>>,
}

impl FileEmbeddings {
    pub fn from_records(records: impl IntoIterator<Item = EmbeddingRecord>) -> Self {
        let mut out = Self::default();
        for r in records {
            match r.kind {
                EmbeddingKind::Text => out.text.insert(label_slug(&r.id), r.vector),
                EmbeddingKind::Image => out.image.insert(r.id, r.vector),
            };
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(Error::at_path(path))?;
        let mut recs = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            recs.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::Parse(format!("{} line {}: {e}", path.display(), n + 1)))?,
            );
        }
        Ok(Self::from_records(recs))
    }

    pub fn save(records: &[EmbeddingRecord], path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(Error::at_path(path))?);
        for r in records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

impl EmbeddingSource for FileEmbeddings {
    fn text(&self, label: &str) -> Result<Option<Vec<f32>>> {
        Ok(self.text.get(&label_slug(label)).cloned())
    }
    fn image(&self, image_id: &str) -> Result<Option<Vec<f32>>> {
        Ok(self.image.get(image_id).cloned())
    }
}

/// Settings for the HTTP grounding and embedding sources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceSourceConfig {
    pub endpoint: String,
    pub timeout_secs: u64,
}

impl Default for ServiceSourceConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            timeout_secs: 60,
        }
    }
}

fn http_client(cfg: &ServiceSourceConfig) -> Result<reqwest::blocking::Client> {
    if cfg.endpoint.trim().is_empty() {
        return Err(Error::Config("service endpoint is empty".into()));
    }
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(cfg.timeout_secs))
        .build()
        .map_err(|e| Error::client("cannot build HTTP client", Some(Box::new(e))))
}

fn post_json(
    http: &reqwest::blocking::Client,
    url: &str,
    body: &serde_json::Value,
) -> Result<Option<serde_json::Value>> {
    let resp = http
        .post(url)
        .json(body)
        .send()
        .map_err(|e| Error::client(format!("POST {url} failed"), Some(Box::new(e))))?;
    if resp.status() == reqwest::StatusCode::NOT_FOUND {
        return Ok(None);
    }
    if !resp.status().is_success() {
        return Err(Error::client(format!("POST {url}: HTTP {}", resp.status()), None));
    }
    resp.json()
        .map(Some)
        .map_err(|e| Error::Parse(format!("response from {url} is not JSON: {e}")))
}

/// Grounding service: `POST endpoint {"image_id", "label"}` answers
/// `{"masks": ["<base64 PNG>", ...]}`; 404 means unavailable.
pub struct HttpGrounding {
    cfg: ServiceSourceConfig,
    http: reqwest::blocking::Client,
}

impl HttpGrounding {
    pub fn new(cfg: ServiceSourceConfig) -> Result<Self> {
        let http = http_client(&cfg)?;
        Ok(Self { cfg, http })
    }
}

impl GroundingSource for HttpGrounding {
    fn detect(&self, image_id: &str, label: &str) -> Result<Option<Vec<Mask>>> {
        let Some(v) = post_json(
            &self.http,
            &self.cfg.endpoint,
            &json!({"image_id": image_id, "label": label}),
        )?
        else {
            return Ok(None);
        };
        let masks = v
            .get("masks")
            .and_then(|m| m.as_array())
            .ok_or_else(|| Error::Parse("grounding reply has no masks array".into()))?;
        let b64 = base64::engine::general_purpose::STANDARD;
        masks
            .iter()
            .map(|m| {
                let s = m.as_str().ok_or_else(|| Error::Parse("mask is not a string".into()))?;
                let bytes = b64
                    .decode(s)
                    .map_err(|e| Error::Parse(format!("mask is not base64: {e}")))?;
                let img = image::load_from_memory(&bytes)?.to_luma8();
                let cells: Vec<bool> = img.pixels().map(|p| p.0[0] >= 128).collect();
                Mask::from_bools(img.width() as usize, img.height() as usize, &cells)
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}

/// Embedding service: `POST endpoint {"text"}` or `{"image_id"}` answers
/// `{"embedding": [...]}`; 404 means unavailable.
pub struct HttpEmbeddings {
    cfg: ServiceSourceConfig,
    http: reqwest::blocking::Client,
}

impl HttpEmbeddings {
    pub fn new(cfg: ServiceSourceConfig) -> Result<Self> {
        let http = http_client(&cfg)?;
        Ok(Self { cfg, http })
    }

    fn fetch(&self, body: serde_json::Value) -> Result<Option<Vec<f32>>> {
        let Some(v) = post_json(&self.http, &self.cfg.endpoint, &body)? else {
            return Ok(None);
        };
        let arr = v
            .get("embedding")
            .and_then(|e| e.as_array())
            .ok_or_else(|| Error::Parse("embedding reply has no embedding array".into()))?;
        arr.iter()
            .map(|x| {
                x.as_f64()
                    .map(|f| f as f32)
                    .ok_or_else(|| Error::Parse("embedding value is not a number".into()))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}

impl EmbeddingSource for HttpEmbeddings {
    fn text(&self, label: &str) -> Result<Option<Vec<f32>>> {
        self.fetch(json!({ "text": label }))
    }
    fn image(&self, image_id: &str) -> Result<Option<Vec<f32>>> {
        self.fetch(json!({ "image_id": image_id }))
    }
}

/// IoU of one activation mask (token grid) against the composite detection
/// for `label` on `image_id`; `None` when grounding is unavailable.
pub fn image_iou(
    grounding: &dyn GroundingSource,
    image_id: &str,
    label: &str,
    activation: &Mask,
) -> Result<Option<f64>> {
    let Some(dets) = grounding.detect(image_id, label)? else {
        return Ok(None);
    };
    let Some(ground) = composite_mask(&dets)? else {
        // nothing detected: compare against an empty mask at token resolution
        return iou(activation, &Mask::empty(activation.width(), activation.height())).map(Some);
    };
    let act = activation.upsample(ground.width(), ground.height())?;
    iou(&act, &ground).map(Some)
}

/// Mean IoU over the record's top images for its refined label.
pub fn feature_iou(record: &FeatureRecord, grounding: &dyn GroundingSource) -> Result<f64> {
    let label = record
        .refined_label
        .as_deref()
        .ok_or_else(|| Error::invalid(format!("feature {} has no refined label", record.feature_index)))?;
    let mut scores = Vec::new();
    for (t, m) in record.top_images.iter().zip(&record.masks) {
        if let Some(s) = image_iou(grounding, &t.image_id, label, m)? {
            scores.push(s);
        }
    }
    mean_or_unavailable(&scores, || format!("no grounding for feature {}", record.feature_index))
}

fn mean_or_unavailable(v: &[f64], why: impl FnOnce() -> String) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::ScoreUnavailable(why()));
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean of `100 * cosine(text, image)` over `image_ids`.
pub fn clip_score(label: &str, image_ids: &[&str], source: &dyn EmbeddingSource) -> Result<f64> {
    let Some(t) = source.text(label)? else {
        return Err(Error::ScoreUnavailable(format!("no text embedding for {label:?}")));
    };
    let mut scores = Vec::new();
    for id in image_ids {
        if let Some(v) = source.image(id)? {
            if v.len() != t.len() {
                return Err(Error::invalid(format!(
                    "embedding sizes differ for {id:?}: {} vs {}",
                    v.len(),
                    t.len()
                )));
            }
            scores.push(100.0 * linalg::cosine(&t, &v));
        }
    }
    mean_or_unavailable(&scores, || format!("no image embeddings for {label:?}"))
}

/// Sample mean and 99% half-width of a set of run values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineStat {
    pub mean: f64,
    pub ci99_half_width: f64,
    pub n_runs: usize,
}

/// Normal-approximation summary of `values` (sample standard deviation).
pub fn mean_ci99(values: &[f64]) -> Result<BaselineStat> {
    let n = values.len();
    if n < 2 {
        return Err(Error::invalid("a confidence interval needs at least two runs"));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(BaselineStat {
        mean,
        ci99_half_width: Z99 * var.sqrt() / (n as f64).sqrt(),
        n_runs: n,
    })
}

/// Runs `metric` on `n_runs` independent draws of `sample` distinct image
/// indices out of `n_images`. Runs whose metric is unavailable are dropped.
pub fn random_baseline(
    mut metric: impl FnMut(&[usize]) -> Result<f64>,
    n_images: usize,
    sample: usize,
    n_runs: usize,
    seed: u64,
) -> Result<BaselineStat> {
    if n_runs < 2 {
        return Err(Error::invalid("random_baseline needs n_runs >= 2"));
    }
    let sample = sample.min(n_images);
    if sample == 0 {
        return Err(Error::ScoreUnavailable("no images to sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let idx = index::sample(&mut rng, n_images, sample).into_vec();
        match metric(&idx) {
            Ok(v) => values.push(v),
            Err(Error::ScoreUnavailable(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if values.len() < 2 {
        return Err(Error::ScoreUnavailable(
            "fewer than two baseline runs produced a score".into(),
        ));
    }
    mean_ci99(&values)
}

/// One row of the score table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    /// Concept name, or `total`.
    pub name: String,
    pub iou_mean: Option<f64>,
    pub clip_score_mean: Option<f64>,
    pub n_iou: usize,
    pub n_clip: usize,
    pub n_features: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou_ci99: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_ci99: Option<f64>,
}

impl ScoreRow {
    fn empty(name: &str) -> Self {
        Self {
            name: name.to_string(),
            iou_mean: None,
            clip_score_mean: None,
            n_iou: 0,
            n_clip: 0,
            n_features: 0,
            iou_ci99: None,
            clip_ci99: None,
        }
    }
}

/// Per-concept and total scores, optionally with random-baseline rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
    #[serde(default)]
    pub baseline: Vec<ScoreRow>,
    /// How the embedding score is scaled.
    pub clip_score_scale: String,
    /// Records without a usable refined label or concept.
    pub skipped: usize,
}

fn row_names() -> Vec<&'static str> {
    Concept::ALL.iter().map(Concept::as_str).chain(["total"]).collect()
}

/// Groups scored records by concept; features without a score for a metric
/// are left out of that metric's mean.
pub fn aggregate(records: &[FeatureRecord]) -> ScoreTable {
    let mut rows: Vec<ScoreRow> = row_names().into_iter().map(ScoreRow::empty).collect();
    let mut sums = vec![(0.0f64, 0.0f64); rows.len()];
    let total = rows.len() - 1;
    let mut skipped = 0;
    for r in records {
        let Some(c) = r.concept.filter(|_| r.refined_label.is_some()) else {
            skipped += 1;
            continue;
        };
        let ci = Concept::ALL.iter().position(|x| *x == c).unwrap_or(total);
        for i in [ci, total] {
            rows[i].n_features += 1;
            if let Some(v) = r.scores.iou {
                rows[i].n_iou += 1;
                sums[i].0 += v;
            }
            if let Some(v) = r.scores.clip {
                rows[i].n_clip += 1;
                sums[i].1 += v;
            }
        }
    }
    for (row, (si, sc)) in rows.iter_mut().zip(sums) {
        row.iou_mean = (row.n_iou > 0).then(|| si / row.n_iou as f64);
        row.clip_score_mean = (row.n_clip > 0).then(|| sc / row.n_clip as f64);
    }
    ScoreTable {
        rows,
        baseline: Vec::new(),
        clip_score_scale: "100*cosine".into(),
        skipped,
    }
}

impl ScoreTable {
    pub fn row(&self, name: &str) -> Option<&ScoreRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Tab-separated table: one header row, then the score rows and the
    /// baseline rows (prefixed `random:`).
    pub fn to_tsv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut out = String::from("concept\tiou\tiou_ci99\tclip_score\tclip_ci99\tn_features\tn_iou\tn_clip\n");
        for (prefix, rows) in [("", &self.rows), ("random:", &self.baseline)] {
            for r in rows {
                out.push_str(&format!(
                    "{prefix}{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                    r.name,
                    fmt(r.iou_mean),
                    fmt(r.iou_ci99),
                    fmt(r.clip_score_mean),
                    fmt(r.clip_ci99),
                    r.n_features,
                    r.n_iou,
                    r.n_clip
                ));
            }
        }
        out
    }
}

/// Random-image baseline rows for each concept and the total.
///
/// Each run draws `sample` random image indices; a concept's run value is
/// the mean over its refined features of `iou_on(record, images)` (or
/// `clip_on`), skipping unavailable ones.
#[allow(clippy::too_many_arguments)]
pub fn baseline_rows(
    records: &[FeatureRecord],
    n_images: usize,
    sample: usize,
    iou_runs: usize,
    clip_runs: usize,
    seed: u64,
    mut iou_on: impl FnMut(&FeatureRecord, &[usize]) -> Result<f64>,
    mut clip_on: impl FnMut(&FeatureRecord, &[usize]) -> Result<f64>,
) -> Result<Vec<ScoreRow>> {
    let mut out = Vec::new();
    for (ri, name) in row_names().into_iter().enumerate() {
        let members: Vec<&FeatureRecord> = records
            .iter()
            .filter(|r| r.refined_label.is_some())
            .filter(|r| match r.concept {
                Some(c) => ri == Concept::ALL.len() || Concept::ALL[ri] == c,
                None => false,
            })
            .collect();
        let mut row = ScoreRow::empty(name);
        row.n_features = members.len();
        if members.is_empty() {
            out.push(row);
            continue;
        }
        let run_mean = |f: &mut dyn FnMut(&FeatureRecord, &[usize]) -> Result<f64>, imgs: &[usize]| {
            let mut v = Vec::new();
            for r in &members {
                match f(r, imgs) {
                    Ok(x) => v.push(x),
                    Err(Error::ScoreUnavailable(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            mean_or_unavailable(&v, || "no feature scored in this run".into())
        };
        let seed_i = seed.wrapping_add(ri as u64);
        if iou_runs >= 2 {
            match random_baseline(|imgs| run_mean(&mut iou_on, imgs), n_images, sample, iou_runs, seed_i) {
                Ok(s) => {
                    row.iou_mean = Some(s.mean);
                    row.iou_ci99 = Some(s.ci99_half_width);
                    row.n_iou = s.n_runs;
                }
                Err(Error::ScoreUnavailable(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if clip_runs >= 2 {
            match random_baseline(
                |imgs| run_mean(&mut clip_on, imgs),
                n_images,
                sample,
                clip_runs,
                seed_i ^ 0xc11,
            ) {
                Ok(s) => {
                    row.clip_score_mean = Some(s.mean);
                    row.clip_ci99 = Some(s.ci99_half_width);
                    row.n_clip = s.n_runs;
                }
                Err(Error::ScoreUnavailable(_)) => {}
                Err(e) => return Err(e),
            }
        }
        out.push(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpret::{BinarizeMode, Scores};
    use crate::store::TopImage;
    use proptest::prelude::*;

    fn mask(w: usize, h: usize, cells: &[u8]) -> Mask {
        Mask::from_bools(w, h, &cells.iter().map(|&c| c == 1).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = mask(2, 2, &[1, 1, 0, 1]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&mask(2, 1, &[1, 0]), &mask(2, 1, &[0, 1])).unwrap(), 0.0);
        assert_eq!(iou(&mask(2, 2, &[1, 0, 1, 0]), &Mask::full(2, 2)).unwrap(), 0.5);
        assert_eq!(iou(&Mask::empty(3, 3), &Mask::empty(3, 3)).unwrap(), 0.0);
        assert!(iou(&Mask::empty(2, 3), &Mask::empty(3, 2)).is_err());
    }

    #[test]
    fn composite_examples() {
        let a = mask(2, 2, &[1, 0, 0, 0]);
        let b = mask(2, 2, &[0, 0, 1, 1]);
        assert_eq!(composite_mask(std::slice::from_ref(&a)).unwrap().unwrap(), a);
        assert_eq!(composite_mask(&[a.clone(), b.clone()]).unwrap().unwrap().count(), 3);
        assert_eq!(composite_mask(&[]).unwrap(), None);
        assert!(composite_mask(&[a, Mask::empty(1, 1)]).is_err());
    }

    fn arb_mask() -> impl Strategy<Value = Mask> {
        proptest::collection::vec(any::<bool>(), 12).prop_map(|v| Mask::from_bools(4, 3, &v).unwrap())
    }

    proptest! {
        #[test]
        fn iou_laws(a in arb_mask(), b in arb_mask()) {
            let ab = iou(&a, &b).unwrap();
            prop_assert_eq!(ab, iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            if !a.is_empty() {
                prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
            }
        }

        #[test]
        fn composite_laws(a in arb_mask(), b in arb_mask(), c in arb_mask()) {
            let u = |x: &[Mask]| composite_mask(x).unwrap().unwrap();
            prop_assert_eq!(u(&[a.clone(), b.clone()]), u(&[b.clone(), a.clone()]));
            prop_assert_eq!(u(&[u(&[a.clone(), b.clone()]), c.clone()]), u(&[a.clone(), u(&[b.clone(), c.clone()])]));
            prop_assert_eq!(u(&[a.clone(), a.clone()]), a.clone());
            let oracle: Vec<bool> = a.to_bools().iter().zip(b.to_bools()).map(|(x, y)| *x || y).collect();
            prop_assert_eq!(u(&[a, b]).to_bools(), oracle);
        }

        #[test]
        fn upsampled_iou_matches_grid_iou(a in arb_mask(), b in arb_mask()) {
            let ua = a.upsample(16, 9).unwrap();
            let ub = b.upsample(16, 9).unwrap();
            prop_assert!((iou(&ua, &ub).unwrap() - iou(&a, &b).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn ci_closed_form() {
        let s = mean_ci99(&[0.0, 1.0]).unwrap();
        assert_eq!(s.mean, 0.5);
        let want = 2.576 * (0.5f64.sqrt() / 2f64.sqrt());
        assert!((s.ci99_half_width - want).abs() < 1e-12);
        assert!((s.ci99_half_width - 1.288).abs() < 1e-3);
        assert_eq!(mean_ci99(&[0.3; 5]).unwrap().ci99_half_width, 0.0);
        assert!(mean_ci99(&[1.0]).is_err());
    }

    #[test]
    fn random_baseline_is_reproducible_and_samples_distinct_images() {
        let metric = |idx: &[usize]| {
            let mut u = idx.to_vec();
            u.sort();
            u.dedup();
            assert_eq!(u.len(), 5);
            Ok(idx.iter().sum::<usize>() as f64)
        };
        let a = random_baseline(metric, 40, 5, 10, 3).unwrap();
        let b = random_baseline(metric, 40, 5, 10, 3).unwrap();
        assert_eq!(a, b);
        assert!(random_baseline(metric, 40, 5, 1, 3).is_err());
        let c = random_baseline(|_| Ok(2.0), 40, 5, 30, 1).unwrap();
        assert_eq!((c.mean, c.ci99_half_width, c.n_runs), (2.0, 0.0, 30));
    }

    fn record(feature: usize, concept: Option<Concept>, iou: Option<f64>, clip: Option<f64>) -> FeatureRecord {
        FeatureRecord {
            feature_index: feature,
            top_images: vec![TopImage {
                image_id: "a".into(),
                mean: 1.0,
            }],
            sources: vec!["a.png".into()],
            heatmaps: vec![],
            masks: vec![Mask::full(2, 2)],
            binarize: BinarizeMode::default(),
            evidence_hash: String::new(),
            explanation: Some("x".into()),
            refined_label: concept.map(|_| "x".to_string()),
            refine_attempts: 1,
            concept,
            scores: Scores {
                iou,
                clip,
                consistency: None,
            },
            error: None,
        }
    }

    #[test]
    fn aggregate_examples() {
        let t = aggregate(&[]);
        assert_eq!(t.rows.len(), 7);
        assert!(t.rows.iter().all(|r| r.n_features == 0 && r.iou_mean.is_none()));
        let recs: Vec<FeatureRecord> = Concept::ALL
            .iter()
            .enumerate()
            .map(|(i, c)| record(i, Some(*c), Some(i as f64 / 10.0), Some(20.0 + i as f64)))
            .collect();
        let t = aggregate(&recs);
        for (i, c) in Concept::ALL.iter().enumerate() {
            let r = t.row(c.as_str()).unwrap();
            assert_eq!(r.iou_mean, Some(i as f64 / 10.0));
            assert_eq!(r.clip_score_mean, Some(20.0 + i as f64));
        }
        assert_eq!(t.row("total").unwrap().n_features, 6);
        assert!(t.to_tsv().lines().count() == 8);
    }

    #[test]
    fn aggregate_matches_group_by_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let recs: Vec<FeatureRecord> = (0..200)
            .map(|i| {
                let c = (rng.random_range(0..8) < 7).then(|| Concept::ALL[rng.random_range(0..6)]);
                let iou = rng.random_bool(0.8).then(|| rng.random_range(0.0..1.0));
                let clip = rng.random_bool(0.8).then(|| rng.random_range(10.0..30.0));
                record(i, c, iou, clip)
            })
            .collect();
        let t = aggregate(&recs);
        for c in Concept::ALL {
            let iou: Vec<f64> = recs
                .iter()
                .filter(|r| r.concept == Some(c))
                .filter_map(|r| r.scores.iou)
                .collect();
            let row = t.row(c.as_str()).unwrap();
            assert_eq!(row.n_iou, iou.len());
            let want = iou.iter().sum::<f64>() / iou.len() as f64;
            assert!((row.iou_mean.unwrap() - want).abs() < 1e-12);
        }
        let all: Vec<f64> = recs
            .iter()
            .filter(|r| r.concept.is_some())
            .filter_map(|r| r.scores.clip)
            .collect();
        let want = all.iter().sum::<f64>() / all.len() as f64;
        assert!((t.row("total").unwrap().clip_score_mean.unwrap() - want).abs() < 1e-9);
        assert_eq!(t.skipped, recs.iter().filter(|r| r.concept.is_none()).count());
    }

    #[test]
    fn file_grounding_and_feature_iou() {
        let dir = tempfile::tempdir().unwrap();
        let g = FileGrounding::new(dir.path());
        let mut rec = record(0, Some(Concept::Object), None, None);
        rec.refined_label = Some("Red apple".into());
        rec.masks = vec![mask(2, 2, &[1, 0, 0, 0])];
        assert!(matches!(feature_iou(&rec, &g), Err(Error::ScoreUnavailable(_))));
        std::fs::create_dir_all(dir.path().join("a")).unwrap();
        assert_eq!(feature_iou(&rec, &g).unwrap(), 0.0);
        let d = g.dir_for("a", "Red apple");
        std::fs::create_dir_all(&d).unwrap();
        mask(4, 4, &[1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0])
            .save(d.join("0.mask"))
            .unwrap();
        assert_eq!(feature_iou(&rec, &g).unwrap(), 1.0);
        mask(4, 4, &[0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0])
            .save(d.join("1.mask"))
            .unwrap();
        assert_eq!(feature_iou(&rec, &g).unwrap(), 0.5);
    }

    #[test]
    fn clip_score_examples() {
        let e = FileEmbeddings::from_records([
            EmbeddingRecord {
                kind: EmbeddingKind::Text,
                id: "Blue sky".into(),
                vector: vec![1.0, 0.0],
            },
            EmbeddingRecord {
                kind: EmbeddingKind::Image,
                id: "a".into(),
                vector: vec![2.0, 0.0],
            },
            EmbeddingRecord {
                kind: EmbeddingKind::Image,
                id: "b".into(),
                vector: vec![0.0, 3.0],
            },
        ]);
        assert!((clip_score("blue sky", &["a"], &e).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(clip_score("blue sky", &["b"], &e).unwrap(), 0.0);
        assert!((clip_score("blue sky", &["a", "b", "zz"], &e).unwrap() - 50.0).abs() < 1e-9);
        assert!(matches!(
            clip_score("blue sky", &["zz"], &e),
            Err(Error::ScoreUnavailable(_))
        ));
        assert!(matches!(
            clip_score("grass", &["a"], &e),
            Err(Error::ScoreUnavailable(_))
        ));
    }

    #[test]
    fn embeddings_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        let recs = vec![EmbeddingRecord {
            kind: EmbeddingKind::Image,
            id: "a".into(),
            vector: vec![0.5, -1.0],
        }];
        FileEmbeddings::save(&recs, &p).unwrap();
        let e = FileEmbeddings::load(&p).unwrap();
        assert_eq!(e.image("a").unwrap(), Some(vec![0.5, -1.0]));
    }

    #[test]
    fn slug_examples() {
        assert_eq!(label_slug("  Red apple!! "), "red_apple");
        assert_eq!(label_slug("Train-tracks"), "train_tracks");
    }
}
