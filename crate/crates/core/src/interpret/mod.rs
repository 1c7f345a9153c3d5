// SPDX-License-Identifier: MIT OR Apache-2.0

//! Explaining features from their top-activating evidence.
//!
//! For each feature the top images are masked down to the cells where the
//! feature fires, an explainer model names what those regions share, a
//! refiner condenses the explanation into a short label, and a categoriser
//! files the label under one of six concept kinds.

pub mod client;
pub mod prompts;

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

pub use client::{
    Archive, ChatClient, ChatClientConfig, ChatRequest, KeyedClient, OpenAiChatClient, PaletteEntry, PaletteExplainer,
    PaletteJudge, Part, ScriptedClient, NO_PATTERN_REPLY,
};
pub use prompts::{PromptSet, PromptTemplate};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::store::{self, Heatmap, SparseFeatureCache, TopImage};

/// Explanation stored when the explainer finds no common pattern.
pub const SENTINEL: &str = "unable to produce explanations";

/// Longest accepted refined label, in words.
pub const MAX_LABEL_WORDS: usize = 6;

/// How a heatmap is turned into a mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BinarizeMode {
    /// Active iff `value >= tau * max`.
    Relative { tau: f32 },
    /// Active iff `value >= threshold`.
    Absolute { threshold: f32 },
    /// Active iff `value` is positive and at least the `q`-quantile of the
    /// heatmap's values.
    Quantile { q: f32 },
}

impl Default for BinarizeMode {
    fn default() -> Self {
        BinarizeMode::Relative { tau: 0.5 }
    }
}

/// Relative-threshold binarization on the heatmap's own grid.
pub fn binarize(heatmap: &Heatmap, tau_rel: f32) -> Result<Mask> {
    binarize_with(heatmap, BinarizeMode::Relative { tau: tau_rel })
}

pub fn binarize_with(heatmap: &Heatmap, mode: BinarizeMode) -> Result<Mask> {
    if heatmap.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("heatmap contains non-finite values"));
    }
    let (w, h) = (heatmap.cols, heatmap.rows);
    let cells: Vec<bool> = match mode {
        BinarizeMode::Relative { tau } => {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(Error::invalid(format!("tau_rel must lie in (0, 1], got {tau}")));
            }
            let max = heatmap.max();
            if !(max > 0.0) {
                return Ok(Mask::empty(w, h));
            }
            let cut = tau * max;
            heatmap.values.iter().map(|&v| v >= cut).collect()
        }
        BinarizeMode::Absolute { threshold } => {
            if !(threshold > 0.0) {
                return Err(Error::invalid("absolute threshold must be positive"));
            }
            heatmap.values.iter().map(|&v| v >= threshold).collect()
        }
        BinarizeMode::Quantile { q } => {
            if !(0.0..1.0).contains(&q) {
                return Err(Error::invalid(format!("quantile must lie in [0, 1), got {q}")));
            }
            let mut sorted = heatmap.values.clone();
            sorted.sort_by(f32::total_cmp);
            let cut = sorted[((sorted.len() - 1) as f32 * q).floor() as usize];
            heatmap.values.iter().map(|&v| v > 0.0 && v >= cut).collect()
        }
    };
    Mask::from_bools(w, h, &cells)
}

/// Keeps the pixels of active grid cells and paints every other cell black.
/// The grid is the mask's own `width x height`.
pub fn compose_masked_image(image: &RgbImage, mask: &Mask) -> Result<RgbImage> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if mask.width() == 0 || mask.height() == 0 || w % mask.width() != 0 || h % mask.height() != 0 {
        return Err(Error::invalid(format!(
            "{w}x{h} image does not divide into a {}x{} grid",
            mask.width(),
            mask.height()
        )));
    }
    let (cw, ch) = (w / mask.width(), h / mask.height());
    Ok(RgbImage::from_fn(image.width(), image.height(), |x, y| {
        if mask.get(x as usize / cw, y as usize / ch) {
            *image.get_pixel(x, y)
        } else {
            image::Rgb([0, 0, 0])
        }
    }))
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Concept kinds explanations are filed under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Concept {
    Scene,
    Object,
    Part,
    Material,
    Texture,
    Colour,
}

impl Concept {
    pub const ALL: [Concept; 6] = [
        Concept::Scene,
        Concept::Object,
        Concept::Part,
        Concept::Material,
        Concept::Texture,
        Concept::Colour,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Concept::Scene => "scene",
            Concept::Object => "object",
            Concept::Part => "part",
            Concept::Material => "material",
            Concept::Texture => "texture",
            Concept::Colour => "colour",
        }
    }
}

impl fmt::Display for Concept {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Concept {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.trim().trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
        match norm.as_str() {
            "scene" => Ok(Concept::Scene),
            "object" => Ok(Concept::Object),
            "part" => Ok(Concept::Part),
            "material" => Ok(Concept::Material),
            "texture" => Ok(Concept::Texture),
            "colour" | "color" => Ok(Concept::Colour),
            _ => Err(Error::CategorizationFailed(format!("{s:?} is not a concept"))),
        }
    }
}

/// Scores filled in by evaluation; `None` where unavailable.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub iou: Option<f64>,
    pub clip: Option<f64>,
    pub consistency: Option<f64>,
}

/// Everything known about one feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub feature_index: usize,
    pub top_images: Vec<TopImage>,
    /// Source path of each top image, as stored in the cache.
    #[serde(default)]
    pub sources: Vec<String>,
    pub heatmaps: Vec<Heatmap>,
    pub masks: Vec<Mask>,
    pub binarize: BinarizeMode,
    pub evidence_hash: String,
    #[serde(default)]
    pub explanation: Option<String>,
    #[serde(default)]
    pub refined_label: Option<String>,
    #[serde(default)]
    pub refine_attempts: u32,
    #[serde(default)]
    pub concept: Option<Concept>,
    #[serde(default)]
    pub scores: Scores,
    /// Last stage failure, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl FeatureRecord {
    pub fn is_sentinel(&self) -> bool {
        self.explanation.as_deref() == Some(SENTINEL)
    }

    /// Largest top-image mean, used for ordering.
    pub fn peak_mean(&self) -> f32 {
        self.top_images.first().map_or(0.0, |t| t.mean)
    }

    /// Carries interpretation results over from an older record built from
    /// the same evidence.
    pub fn adopt(&mut self, old: &FeatureRecord) {
        if old.feature_index == self.feature_index && old.evidence_hash == self.evidence_hash {
            self.explanation.clone_from(&old.explanation);
            self.refined_label.clone_from(&old.refined_label);
            self.refine_attempts = old.refine_attempts;
            self.concept = old.concept;
            self.scores = old.scores.clone();
            self.error.clone_from(&old.error);
        }
    }
}

fn evidence_hash(feature: usize, top: &[TopImage], masks: &[Mask], mode: &BinarizeMode) -> Result<String> {
    let payload = serde_json::to_vec(&(feature, top, masks, mode))?;
    Ok(client::hex_digest(&payload))
}

/// Top images, heatmaps and binarized masks of `feature`.
pub fn build_record(
    cache: &SparseFeatureCache,
    feature: usize,
    n_top: usize,
    mode: BinarizeMode,
) -> Result<FeatureRecord> {
    let summary = store::top_images(cache, feature, n_top)?;
    let mut heatmaps = Vec::new();
    let mut masks = Vec::new();
    let mut sources = Vec::new();
    for t in &summary.top_images {
        let hm = store::token_heatmap(cache, &t.image_id, feature)?;
        masks.push(binarize_with(&hm, mode)?);
        heatmaps.push(hm);
        let i = cache
            .image_index(&t.image_id)
            .ok_or_else(|| Error::NotFound(t.image_id.clone()))?;
        sources.push(cache.sources()[i].clone());
    }
    let evidence_hash = evidence_hash(feature, &summary.top_images, &masks, &mode)?;
    Ok(FeatureRecord {
        feature_index: feature,
        top_images: summary.top_images,
        sources,
        heatmaps,
        masks,
        binarize: mode,
        evidence_hash,
        explanation: None,
        refined_label: None,
        refine_attempts: 0,
        concept: None,
        scores: Scores::default(),
        error: None,
    })
}

/// Loads images by cache source path.
pub trait ImageSource: Send + Sync {
    fn load(&self, image_id: &str, source: &str) -> Result<RgbImage>;
}

/// Images stored as files relative to a root directory.
#[derive(Clone, Debug)]
pub struct DirImageSource {
    pub root: std::path::PathBuf,
}

impl ImageSource for DirImageSource {
    fn load(&self, _image_id: &str, source: &str) -> Result<RgbImage> {
        let p = self.root.join(source);
        if !p.exists() {
            return Err(Error::NotFound(format!("image file {}", p.display())));
        }
        Ok(image::open(&p)?.to_rgb8())
    }
}

/// PNG bytes of each top image with its mask applied.
pub fn masked_images(record: &FeatureRecord, images: &dyn ImageSource) -> Result<Vec<Vec<u8>>> {
    record
        .top_images
        .iter()
        .zip(&record.masks)
        .enumerate()
        .map(|(i, (t, m))| {
            let src = record.sources.get(i).map_or("", String::as_str);
            let img = images.load(&t.image_id, src)?;
            encode_png(&compose_masked_image(&img, m)?)
        })
        .collect()
}

/// Asks the explainer what the masked regions share. Returns [`SENTINEL`]
/// when it reports no common pattern.
pub fn explain_feature(
    masked: &[Vec<u8>],
    client: &dyn ChatClient,
    prompts: &PromptSet,
    archive: &Archive,
    feature: usize,
) -> Result<String> {
    if masked.is_empty() {
        return Err(Error::invalid("explain_feature needs at least one masked image"));
    }
    let prompt = prompts.explain.render(&[("n_images", &masked.len().to_string())])?;
    let req = ChatRequest::with_images(prompt, masked);
    let answer = client.chat(&req)?;
    archive.record(feature, "explain", client.model(), &req, &answer)?;
    let text = answer.trim();
    if text.is_empty() {
        return Err(Error::Parse("explainer returned an empty answer".into()));
    }
    let lower = text.to_lowercase();
    if lower.contains(SENTINEL) || lower.contains("no common pattern") {
        return Ok(SENTINEL.to_string());
    }
    Ok(text.to_string())
}

fn clean_label(answer: &str) -> String {
    answer
        .trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '.' || c.is_whitespace())
        .to_string()
}

fn label_ok(label: &str) -> bool {
    let n = label.split_whitespace().count();
    (1..=MAX_LABEL_WORDS).contains(&n)
}

/// A refined label and the number of requests it took.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Refined {
    pub label: String,
    pub attempts: u32,
}

/// Condenses an explanation to at most six words, re-prompting once.
pub fn refine_label(
    explanation: &str,
    client: &dyn ChatClient,
    prompts: &PromptSet,
    archive: &Archive,
    feature: usize,
) -> Result<Refined> {
    if explanation == SENTINEL || explanation.trim().is_empty() {
        return Err(Error::invalid("cannot refine an absent explanation"));
    }
    let max = MAX_LABEL_WORDS.to_string();
    let prompt = prompts
        .refine
        .render(&[("explanation", explanation), ("max_words", &max)])?;
    let req = ChatRequest::text(prompt);
    let first = client.chat(&req)?;
    archive.record(feature, "refine", client.model(), &req, &first)?;
    let label = clean_label(&first);
    if label_ok(&label) {
        return Ok(Refined { label, attempts: 1 });
    }
    let prompt =
        prompts
            .refine_retry
            .render(&[("explanation", explanation), ("max_words", &max), ("previous", &label)])?;
    let req = ChatRequest::text(prompt);
    let second = client.chat(&req)?;
    archive.record(feature, "refine", client.model(), &req, &second)?;
    let label = clean_label(&second);
    if label_ok(&label) {
        Ok(Refined { label, attempts: 2 })
    } else {
        Err(Error::RefinementFailed {
            attempts: 2,
            last: label,
        })
    }
}

fn concept_list() -> String {
    Concept::ALL.iter().map(Concept::as_str).collect::<Vec<_>>().join(", ")
}

/// Files `label` under one of the six concepts, re-prompting once.
pub fn categorize(
    label: &str,
    client: &dyn ChatClient,
    prompts: &PromptSet,
    archive: &Archive,
    feature: usize,
) -> Result<Concept> {
    if label.trim().is_empty() {
        return Err(Error::invalid("cannot categorize an empty label"));
    }
    let concepts = concept_list();
    let req = ChatRequest::text(
        prompts
            .categorize
            .render(&[("label", label), ("concepts", &concepts)])?,
    );
    let first = client.chat(&req)?;
    archive.record(feature, "categorize", client.model(), &req, &first)?;
    if let Ok(c) = first.parse() {
        return Ok(c);
    }
    let req = ChatRequest::text(prompts.categorize_retry.render(&[
        ("label", label),
        ("concepts", &concepts),
        ("previous", first.trim()),
    ])?);
    let second = client.chat(&req)?;
    archive.record(feature, "categorize", client.model(), &req, &second)?;
    second.parse().map_err(|_| {
        Error::CategorizationFailed(format!(
            "{label:?}: answers {:?} and {:?} are not concepts",
            first.trim(),
            second.trim()
        ))
    })
}

fn verdict(answer: &str) -> Option<bool> {
    let word: String = answer
        .trim_start()
        .chars()
        .take_while(|c| c.is_alphabetic())
        .collect::<String>()
        .to_lowercase();
    match word.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

/// Fraction of yes verdicts over `n_samples` judge requests, cycling
/// through the masked images. Unparseable verdicts are left out of the
/// denominator.
pub fn consistency_judge(
    explanation: &str,
    masked: &[Vec<u8>],
    client: &dyn ChatClient,
    prompts: &PromptSet,
    archive: &Archive,
    feature: usize,
    n_samples: usize,
) -> Result<f64> {
    if n_samples < 1 {
        return Err(Error::invalid("n_samples must be at least 1"));
    }
    if masked.is_empty() {
        return Err(Error::invalid("consistency_judge needs at least one masked image"));
    }
    let prompt = prompts.judge.render(&[("explanation", explanation)])?;
    let (mut yes, mut counted) = (0usize, 0usize);
    for s in 0..n_samples {
        let req = ChatRequest::with_images(prompt.clone(), std::slice::from_ref(&masked[s % masked.len()]));
        let answer = client.chat(&req)?;
        archive.record(feature, "judge", client.model(), &req, &answer)?;
        if let Some(v) = verdict(&answer) {
            counted += 1;
            yes += v as usize;
        }
    }
    if counted == 0 {
        return Err(Error::JudgeFailed(n_samples));
    }
    Ok(yes as f64 / counted as f64)
}

/// Writes records as JSON lines, replacing `path` atomically.
pub fn write_records(path: impl AsRef<Path>, records: &[FeatureRecord]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::at_path(dir))?;
    }
    let tmp = path.with_extension("jsonl.tmp");
    {
        let f = std::fs::File::create(&tmp).map_err(Error::at_path(&tmp))?;
        let mut w = std::io::BufWriter::new(f);
        for r in records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path).map_err(Error::at_path(path))
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<FeatureRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(Error::at_path(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
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
    use crate::store::Grid;
    use proptest::prelude::*;

    fn hm(rows: usize, cols: usize, v: Vec<f32>) -> Heatmap {
        Heatmap::new(rows, cols, v).unwrap()
    }

    #[test]
    fn binarize_examples() {
        assert_eq!(
            binarize(&hm(1, 3, vec![1.0, 0.6, 0.4]), 0.5).unwrap().to_bools(),
            vec![true, true, false]
        );
        assert!(binarize(&hm(2, 2, vec![0.0; 4]), 0.5).unwrap().is_empty());
        assert_eq!(binarize(&hm(2, 2, vec![0.3; 4]), 0.5).unwrap().count(), 4);
        assert!(binarize(&hm(1, 1, vec![1.0]), 0.0).is_err());
        assert!(binarize(&hm(1, 1, vec![f32::NAN]), 0.5).is_err());
    }

    #[test]
    fn other_binarize_modes() {
        let h = hm(1, 4, vec![0.0, 0.2, 0.5, 0.9]);
        let m = binarize_with(&h, BinarizeMode::Absolute { threshold: 0.5 }).unwrap();
        assert_eq!(m.to_bools(), vec![false, false, true, true]);
        let m = binarize_with(&h, BinarizeMode::Quantile { q: 0.5 }).unwrap();
        assert_eq!(m.to_bools(), vec![false, true, true, true]);
        let m = binarize_with(&h, BinarizeMode::Quantile { q: 0.0 }).unwrap();
        assert_eq!(m.to_bools(), vec![false, true, true, true]);
    }

    proptest! {
        #[test]
        fn relative_binarize_is_scale_invariant(
            v in proptest::collection::vec(0.0f32..10.0, 16),
            alpha in 0.01f32..100.0,
            tau in 0.05f32..1.0,
        ) {
            let a = binarize(&hm(4, 4, v.clone()), tau).unwrap();
            let scaled: Vec<f32> = v.iter().map(|x| x * alpha).collect();
            let b = binarize(&hm(4, 4, scaled), tau).unwrap();
            // scaling can move a value across the cut only through rounding
            let max = v.iter().cloned().fold(0.0, f32::max);
            let near = v.iter().any(|x| (x - tau * max).abs() <= 1e-4 * max.max(1e-6));
            if !near {
                prop_assert_eq!(a, b);
            }
        }
    }

    fn gradient_image() -> RgbImage {
        RgbImage::from_fn(64, 64, |x, y| image::Rgb([x as u8 + 1, y as u8 + 1, 7]))
    }

    #[test]
    fn compose_examples() {
        let img = gradient_image();
        assert_eq!(compose_masked_image(&img, &Mask::full(4, 4)).unwrap(), img);
        let black = compose_masked_image(&img, &Mask::empty(4, 4)).unwrap();
        assert!(black.pixels().all(|p| p.0 == [0, 0, 0]));
        let mut m = Mask::empty(4, 4);
        m.set(2, 1, true);
        let out = compose_masked_image(&img, &m).unwrap();
        let mut kept = 0;
        for (x, y, p) in out.enumerate_pixels() {
            let inside = (32..48).contains(&x) && (16..32).contains(&y);
            if inside {
                assert_eq!(p, img.get_pixel(x, y));
                kept += 1;
            } else {
                assert_eq!(p.0, [0, 0, 0]);
            }
        }
        assert_eq!(kept, 256);
        assert!(compose_masked_image(&RgbImage::new(63, 64), &m).is_err());
    }

    fn png() -> Vec<u8> {
        encode_png(&gradient_image()).unwrap()
    }

    #[test]
    fn explanation_and_sentinel() {
        let p = PromptSet::default();
        let a = Archive::disabled();
        let c = ScriptedClient::new(["red square regions", "Unable to produce explanations.", "  "]);
        assert_eq!(explain_feature(&[png()], &c, &p, &a, 0).unwrap(), "red square regions");
        assert_eq!(explain_feature(&[png()], &c, &p, &a, 0).unwrap(), SENTINEL);
        assert!(matches!(explain_feature(&[png()], &c, &p, &a, 0), Err(Error::Parse(_))));
        assert!(explain_feature(&[], &c, &p, &a, 0).is_err());
        assert_eq!(c.requests()[0].images().count(), 1);
    }

    #[test]
    fn refine_examples() {
        let p = PromptSet::default();
        let a = Archive::disabled();
        let c = KeyedClient::new([("train tracks", "Train tracks")]);
        let r = refine_label("The feature activates on the train tracks in each image", &c, &p, &a, 0).unwrap();
        assert_eq!(
            r,
            Refined {
                label: "Train tracks".into(),
                attempts: 1
            }
        );

        let c = ScriptedClient::new([
            "the feature fires on a long metal rail line running across the scene",
            "Rail line",
        ]);
        let r = refine_label("rails", &c, &p, &a, 0).unwrap();
        assert_eq!(
            r,
            Refined {
                label: "Rail line".into(),
                attempts: 2
            }
        );

        let long = "one two three four five six seven";
        let c = ScriptedClient::new([long, long]);
        assert!(matches!(
            refine_label("x", &c, &p, &a, 0),
            Err(Error::RefinementFailed { attempts: 2, .. })
        ));
        assert!(refine_label(SENTINEL, &c, &p, &a, 0).is_err());
    }

    #[test]
    fn categorize_examples() {
        let p = PromptSet::default();
        let a = Archive::disabled();
        let c = KeyedClient::new([("train tracks", "object"), ("\"blue\"", "Colour.")]);
        assert_eq!(categorize("Train tracks", &c, &p, &a, 0).unwrap(), Concept::Object);
        assert_eq!(categorize("blue", &c, &p, &a, 0).unwrap(), Concept::Colour);
        let c = ScriptedClient::new(["vehicle-ish", "vehicle-ish"]);
        assert!(matches!(
            categorize("car", &c, &p, &a, 0),
            Err(Error::CategorizationFailed(_))
        ));
        let c = ScriptedClient::new(["vehicle-ish", "texture"]);
        assert_eq!(categorize("car", &c, &p, &a, 0).unwrap(), Concept::Texture);
    }

    #[test]
    fn judge_examples() {
        let p = PromptSet::default();
        let a = Archive::disabled();
        let imgs = vec![png()];
        let c = KeyedClient::default().with_default("Yes.");
        assert_eq!(consistency_judge("e", &imgs, &c, &p, &a, 0, 10).unwrap(), 1.0);
        let c = ScriptedClient::new(["yes"; 7].into_iter().chain(["no"; 3]));
        assert!((consistency_judge("e", &imgs, &c, &p, &a, 0, 10).unwrap() - 0.7).abs() < 1e-12);
        let c = ScriptedClient::new(["yes", "maybe", "no", "unsure"]);
        assert_eq!(consistency_judge("e", &imgs, &c, &p, &a, 0, 4).unwrap(), 0.5);
        let c = ScriptedClient::new(["hmm", "?"]);
        assert!(matches!(
            consistency_judge("e", &imgs, &c, &p, &a, 0, 2),
            Err(Error::JudgeFailed(2))
        ));
    }

    fn small_cache() -> SparseFeatureCache {
        let mut c = SparseFeatureCache::empty(Grid::new(2, 2).unwrap(), 4, 1).unwrap();
        let tok = |j: usize, v: f32| (vec![j], vec![v]);
        c.push_image(
            "a".into(),
            "a.png".into(),
            &[tok(1, 2.0), tok(1, 0.5), tok(0, 1.0), tok(1, 1.5)],
        )
        .unwrap();
        c.push_image(
            "b".into(),
            "b.png".into(),
            &[tok(2, 1.0), tok(1, 0.2), tok(2, 1.0), tok(2, 1.0)],
        )
        .unwrap();
        c
    }

    #[test]
    fn records_roundtrip_and_adopt() {
        let cache = small_cache();
        let mut r = build_record(&cache, 1, 5, BinarizeMode::default()).unwrap();
        assert_eq!(r.top_images.len(), 2);
        assert_eq!(r.masks[0].to_bools(), vec![true, false, false, true]);
        assert_eq!(r.sources, vec!["a.png", "b.png"]);
        r.explanation = Some("x".into());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("records.jsonl");
        write_records(&p, std::slice::from_ref(&r)).unwrap();
        let back = read_records(&p).unwrap();
        assert_eq!(back, vec![r.clone()]);
        let mut fresh = build_record(&cache, 1, 5, BinarizeMode::default()).unwrap();
        fresh.adopt(&back[0]);
        assert_eq!(fresh.explanation.as_deref(), Some("x"));
        let mut other = build_record(&cache, 1, 5, BinarizeMode::Relative { tau: 0.9 }).unwrap();
        other.adopt(&back[0]);
        assert_eq!(other.explanation, None);
    }

    #[test]
    fn concept_parsing() {
        assert_eq!("Color".parse::<Concept>().unwrap(), Concept::Colour);
        assert_eq!(" scene. ".parse::<Concept>().unwrap(), Concept::Scene);
        assert!("vehicle-ish".parse::<Concept>().is_err());
    }
}
