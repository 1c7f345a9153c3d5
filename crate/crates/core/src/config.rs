// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: one TOML file with dotted keys, overridable with
//! `key=value` pairs. Relative paths resolve against the file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::Method;
use crate::error::{Error, Result};
use crate::evaluate::ServiceSourceConfig;
use crate::interpret::client::{
    ChatClient, ChatClientConfig, KeyedClient, OpenAiChatClient, PaletteEntry, PaletteExplainer, PaletteJudge,
    ScriptedClient,
};
use crate::interpret::BinarizeMode;
use crate::toyworld::ToyWorldConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory of activation shards (`*.act`).
    pub shards: Option<PathBuf>,
    /// Image manifest: one `{image_id, source}` object per line.
    pub images: Option<PathBuf>,
    /// Directory image sources are relative to; defaults to the manifest's.
    pub image_root: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub records: Option<PathBuf>,
    /// Grounding masks laid out as `<masks>/<image_id>/<label>/*`.
    pub masks: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub archive: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub attribution: Option<PathBuf>,
    /// Where stage manifests and the used config are written.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeConfig {
    pub d_s: usize,
    pub k: usize,
}

/// How a chat role is served.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ClientSpec {
    Openai(ChatClientConfig),
    Palette {
        palette: Vec<PaletteEntry>,
        #[serde(default)]
        tolerance: Option<u32>,
        #[serde(default)]
        min_share: Option<f32>,
    },
    PaletteJudge {
        palette: Vec<PaletteEntry>,
        #[serde(default)]
        tolerance: Option<u32>,
        #[serde(default)]
        min_share: Option<f32>,
    },
    Keyed {
        entries: Vec<(String, String)>,
        #[serde(default)]
        default: Option<String>,
    },
    Scripted {
        replies: Vec<String>,
    },
}

fn palette(palette: &[PaletteEntry], tolerance: Option<u32>, min_share: Option<f32>) -> PaletteExplainer {
    let mut p = PaletteExplainer::new(palette.to_vec());
    if let Some(t) = tolerance {
        p.tolerance = t;
    }
    if let Some(m) = min_share {
        p.min_share = m;
    }
    p
}

impl ClientSpec {
    pub fn validate(&self, role: &str) -> Result<()> {
        match self {
            ClientSpec::Openai(c) => c.validate().map_err(|e| Error::Config(format!("clients.{role}: {e}"))),
            ClientSpec::Palette { palette, .. } | ClientSpec::PaletteJudge { palette, .. } if palette.is_empty() => {
                Err(Error::Config(format!("clients.{role}.palette is empty")))
            }
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Result<Box<dyn ChatClient>> {
        Ok(match self {
            ClientSpec::Openai(c) => Box::new(OpenAiChatClient::new(c.clone())?),
            ClientSpec::Palette {
                palette: p,
                tolerance,
                min_share,
            } => Box::new(palette(p, *tolerance, *min_share)),
            ClientSpec::PaletteJudge {
                palette: p,
                tolerance,
                min_share,
            } => Box::new(PaletteJudge(palette(p, *tolerance, *min_share))),
            ClientSpec::Keyed { entries, default } => {
                let mut k = KeyedClient::new(entries.clone());
                k.default.clone_from(default);
                Box::new(k)
            }
            ClientSpec::Scripted { replies } => Box::new(ScriptedClient::new(replies.clone())),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientsConfig {
    pub explainer: Option<ClientSpec>,
    pub refiner: Option<ClientSpec>,
    pub categorizer: Option<ClientSpec>,
    pub judge: Option<ClientSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretConfig {
    pub n_top: usize,
    pub binarize: BinarizeMode,
    /// Features to interpret; all features with any activation when empty.
    pub features: Vec<usize>,
    /// Concurrent explanation requests.
    pub concurrency: usize,
    pub judge_samples: usize,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        Self {
            n_top: 5,
            binarize: BinarizeMode::default(),
            features: Vec::new(),
            concurrency: 4,
            judge_samples: 10,
        }
    }
}

/// Where grounding masks or embeddings come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SourceSpec {
    /// Files under `paths.masks` / `paths.embeddings`.
    #[default]
    Files,
    Http(ServiceSourceConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_runs: usize,
    pub clip_runs: usize,
    /// Random images per baseline run.
    pub sample: usize,
    pub seed: u64,
    pub grounding: SourceSpec,
    pub embeddings: SourceSpec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_runs: 10,
            clip_runs: 30,
            sample: 5,
            seed: 0,
            grounding: SourceSpec::Files,
            embeddings: SourceSpec::Files,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HostKind {
    #[default]
    ToyLinear,
    ToyMlp,
    Exchange,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HostConfig {
    pub kind: HostKind,
    /// JSON toy host description (readout weights and text embeddings).
    pub spec: Option<PathBuf>,
    /// Shard directory whose images the toy host's front end serves.
    pub image_shards: Option<PathBuf>,
    /// `host:port` of an exchange-protocol server.
    pub addr: Option<String>,
    /// Command that speaks the exchange protocol over stdio.
    pub command: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteerConfig {
    pub prompt: String,
    pub image: Option<String>,
    pub feature: Option<usize>,
    pub value: f32,
    /// Token positions to clamp; all when empty.
    pub tokens: Vec<usize>,
    pub max_len: usize,
}

impl Default for SteerConfig {
    fn default() -> Self {
        Self {
            prompt: String::new(),
            image: None,
            feature: None,
            value: 0.0,
            tokens: Vec::new(),
            max_len: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributeConfig {
    pub prompt: String,
    pub image: Option<String>,
    /// Chosen token word; the argmax when absent.
    pub v_c: Option<String>,
    pub v_b: Option<String>,
    pub method: Method,
    pub top_n: usize,
}

impl Default for AttributeConfig {
    fn default() -> Self {
        Self {
            prompt: String::new(),
            image: None,
            v_c: None,
            v_b: None,
            method: Method::Approx,
            top_n: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub image: Option<String>,
    pub k_top: usize,
    pub skip: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            image: None,
            k_top: 30,
            skip: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub addr: String,
    /// Allowed CORS origin; any origin when absent.
    pub cors_origin: Option<String>,
    /// Built UI assets served at `/`.
    pub ui_dir: Option<PathBuf>,
    pub page_size: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
            cors_origin: None,
            ui_dir: None,
            page_size: 50,
        }
    }
}

/// Everything a run needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub sae: Option<SaeConfig>,
    pub train: TrainConfig,
    pub clients: ClientsConfig,
    pub interpret: InterpretConfig,
    pub eval: EvalConfig,
    pub host: HostConfig,
    pub steer: SteerConfig,
    pub attribute: AttributeConfig,
    pub probe: ProbeConfig,
    pub serve: ServeConfig,
    pub toyworld: ToyWorldConfig,
    /// Worker threads; all cores when 0.
    pub threads: usize,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Splits `key=value`, parsing the value as a TOML value and falling back
/// to a plain string.
fn parse_override(s: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    let key: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if key.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override {s:?} has an empty key segment")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key, value))
}

fn set_path(table: &mut toml::Table, key: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = key.split_last().expect("nonempty key");
    let mut cur = table;
    for (i, seg) in parents.iter().enumerate() {
        let entry = cur
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("config key `{}` is not a table", key[..=i].join("."))))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    /// Parses TOML text with `overrides` applied on top.
    pub fn from_toml(text: &str, overrides: &[String], base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {}", e.message())))?;
        for o in overrides {
            let (key, value) = parse_override(o)?;
            set_path(&mut table, &key, value)?;
        }
        let aux_k_set = table
            .get("train")
            .and_then(|t| t.as_table())
            .is_some_and(|t| t.contains_key("aux_k"));
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {}", e.message().trim())))?;
        cfg.base_dir = base_dir.into();
        if let (false, Some(sae)) = (aux_k_set, &cfg.sae) {
            cfg.train.aux_k = 2 * sae.k;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::at_path(path))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = if base.as_os_str().is_empty() {
            PathBuf::from(".")
        } else {
            base
        };
        Self::from_toml(&text, overrides, base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    /// Checks that hold for every subcommand.
    pub fn validate(&self) -> Result<()> {
        self.train
            .validate()
            .map_err(|e| Error::Config(format!("train: {e}")))?;
        if let Some(s) = &self.sae {
            if s.k == 0 || s.k > s.d_s {
                return Err(Error::Config(format!(
                    "sae.k must be in 1..=sae.d_s (got k={}, d_s={})",
                    s.k, s.d_s
                )));
            }
        }
        if self.interpret.n_top == 0 {
            return Err(Error::Config("interpret.n_top must be at least 1".into()));
        }
        if self.interpret.concurrency == 0 {
            return Err(Error::Config("interpret.concurrency must be at least 1".into()));
        }
        for (role, c) in [
            ("explainer", &self.clients.explainer),
            ("refiner", &self.clients.refiner),
            ("categorizer", &self.clients.categorizer),
            ("judge", &self.clients.judge),
        ] {
            if let Some(c) = c {
                c.validate(role)?;
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Resolved path of a `paths.*` key, or a named-key error.
    pub fn path(&self, key: &str) -> Result<PathBuf> {
        let p = &self.paths;
        let v = match key {
            "shards" => &p.shards,
            "images" => &p.images,
            "image_root" => &p.image_root,
            "params" => &p.params,
            "checkpoint" => &p.checkpoint,
            "metrics" => &p.metrics,
            "cache" => &p.cache,
            "records" => &p.records,
            "masks" => &p.masks,
            "embeddings" => &p.embeddings,
            "scores" => &p.scores,
            "archive" => &p.archive,
            "prompts" => &p.prompts,
            "attribution" => &p.attribution,
            "out_dir" => &p.out_dir,
            _ => return Err(Error::Config(format!("unknown path key `paths.{key}`"))),
        };
        v.as_deref()
            .map(|v| self.resolve(v))
            .ok_or_else(|| Error::Config(format!("missing config key `paths.{key}`")))
    }

    pub fn optional_path(&self, key: &str) -> Option<PathBuf> {
        self.path(key).ok()
    }

    /// Requires an existing file or directory at `paths.key`.
    pub fn existing_path(&self, key: &str) -> Result<PathBuf> {
        let p = self.path(key)?;
        if !p.exists() {
            return Err(Error::Config(format!(
                "`paths.{key}` points to missing {}",
                p.display()
            )));
        }
        Ok(p)
    }

    pub fn sae(&self) -> Result<&SaeConfig> {
        self.sae
            .as_ref()
            .ok_or_else(|| Error::Config("missing config key `sae.d_s` / `sae.k`".into()))
    }

    pub fn client(&self, role: &str) -> Result<&ClientSpec> {
        let c = match role {
            "explainer" => &self.clients.explainer,
            "refiner" => &self.clients.refiner,
            "categorizer" => &self.clients.categorizer,
            "judge" => &self.clients.judge,
            _ => return Err(Error::Config(format!("unknown client role {role}"))),
        };
        c.as_ref()
            .ok_or_else(|| Error::Config(format!("missing config key `clients.{role}`")))
    }

    /// Image root: `paths.image_root`, else the image manifest's directory.
    pub fn image_root(&self) -> Result<PathBuf> {
        if let Some(r) = self.optional_path("image_root") {
            return Ok(r);
        }
        let m = self.path("images")?;
        Ok(m.parent().map(Path::to_path_buf).unwrap_or_default())
    }

    /// Output directory: `paths.out_dir`, else the config directory.
    pub fn out_dir(&self) -> PathBuf {
        self.optional_path("out_dir").unwrap_or_else(|| self.base_dir.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
threads = 1
[paths]
shards = "shards"
params = "out/sae.prm"
[sae]
d_s = 64
k = 4
[train]
steps = 10
[clients.explainer]
kind = "keyed"
entries = [["red", "red things"]]
"#;

    #[test]
    fn parses_and_resolves() {
        let c = RunConfig::from_toml(SAMPLE, &[], "/run").unwrap();
        assert_eq!(c.path("params").unwrap(), PathBuf::from("/run/out/sae.prm"));
        assert_eq!(c.sae().unwrap().k, 4);
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.train.aux_k, 8);
        assert!(matches!(c.client("explainer").unwrap(), ClientSpec::Keyed { .. }));
    }

    #[test]
    fn missing_keys_are_named() {
        let c = RunConfig::from_toml(SAMPLE, &[], "/run").unwrap();
        let e = c.path("cache").unwrap_err().to_string();
        assert!(e.contains("paths.cache"), "{e}");
        let e = c.client("judge").unwrap_err().to_string();
        assert!(e.contains("clients.judge"), "{e}");
    }

    #[test]
    fn overrides_apply_with_types() {
        let c = RunConfig::from_toml(
            SAMPLE,
            &[
                "train.steps=0".into(),
                "train.lr=0.01".into(),
                "paths.cache=c.spc".into(),
                "sae.k=8".into(),
            ],
            "/run",
        )
        .unwrap();
        assert_eq!(c.train.steps, 0);
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.path("cache").unwrap(), PathBuf::from("/run/c.spc"));
        assert_eq!(c.sae().unwrap().k, 8);
    }

    #[test]
    fn invalid_values_are_rejected_up_front() {
        assert!(RunConfig::from_toml(SAMPLE, &["sae.k=100".into()], "/").is_err());
        assert!(RunConfig::from_toml(SAMPLE, &["unknown_key=1".into()], "/").is_err());
        assert!(RunConfig::from_toml(SAMPLE, &["nokey".into()], "/").is_err());
        let e = RunConfig::from_toml("[clients.judge]\nkind = \"openai\"\n", &[], "/").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn roundtrips_through_toml() {
        let c = RunConfig::from_toml(SAMPLE, &[], "/run").unwrap();
        let back = RunConfig::from_toml(&c.to_toml().unwrap(), &[], "/run").unwrap();
        assert_eq!(back, c);
    }
}
