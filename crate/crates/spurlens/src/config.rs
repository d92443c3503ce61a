//! Run configuration: a JSON file with `${VAR}` environment interpolation.
//!
//! Relative paths resolve against the configuration file's directory. The
//! chat API key falls back to `SPURLENS_CHAT_KEY` and the cache directory to
//! `SPURLENS_CACHE_DIR`, then to `<out_dir>/cache`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spurlens_core::eval::Strategy;
use url::Url;

use crate::endpoints::RetryPolicy;
use crate::error::{json_parse_error, Error, Result};
use crate::loader::{sha256, Format};
use crate::store::canonicalize;

pub const CHAT_KEY_ENV: &str = "SPURLENS_CHAT_KEY";
pub const CACHE_DIR_ENV: &str = "SPURLENS_CACHE_DIR";

/// K for COCO-style datasets.
pub const K_COCO: usize = 100;
/// K for ImageNet-style datasets.
pub const K_IMAGENET: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    pub format: Format,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub images_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointsConfig {
    #[serde(default)]
    pub chat: Option<EndpointConfig>,
    #[serde(default)]
    pub detect: Option<EndpointConfig>,
    #[serde(default)]
    pub embed: Option<EndpointConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HrSetup {
    /// Rank the same-supercategory negatives by cue presence.
    #[default]
    Supercategory,
    /// No ranking: seeded same-supercategory sample against a seeded sample
    /// from other supercategories.
    SupercategoryFixed,
    /// Rank a seeded sample of images lacking the target.
    RandomOutside,
    /// Rank object-removed (black-filled) positives.
    Artificial,
}

impl HrSetup {
    pub fn as_str(self) -> &'static str {
        match self {
            HrSetup::Supercategory => "supercategory",
            HrSetup::SupercategoryFixed => "supercategory_fixed",
            HrSetup::RandomOutside => "random_outside",
            HrSetup::Artificial => "artificial",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HrConfig {
    #[serde(default)]
    pub setup: HrSetup,
    /// Sample size for the sampled setups.
    #[serde(default = "default_hr_n")]
    pub n: usize,
}

impl Default for HrConfig {
    fn default() -> Self {
        HrConfig { setup: HrSetup::default(), n: default_hr_n() }
    }
}

fn default_hr_n() -> usize {
    500
}
fn default_n_candidates() -> usize {
    32
}
fn default_strategy() -> Strategy {
    Strategy::Baseline
}
fn default_max_inflight() -> usize {
    8
}
fn default_error_budget() -> f64 {
    spurlens_core::eval::DEFAULT_ERROR_BUDGET
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub endpoints: EndpointsConfig,
    /// Empty means every class in the dataset.
    #[serde(default)]
    pub classes: Vec<String>,
    #[serde(default)]
    pub exclusions: Vec<String>,
    #[serde(default = "default_n_candidates")]
    pub n_candidates: usize,
    /// Defaults by dataset format: COCO JSON 100, simple manifest 50.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_inflight")]
    pub max_inflight: usize,
    #[serde(default = "default_error_budget")]
    pub error_budget: f64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub hr: HrConfig,
    #[serde(default)]
    pub retry: RetryPolicy,
}

/// Replace each `${NAME}` with the environment variable's value.
pub fn interpolate(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find('}').ok_or_else(|| Error::Config("unterminated `${` in config".into()))?;
        let name = &after[..end];
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(Error::Config(format!("invalid variable name `{name}`")));
        }
        let value = lookup(name).ok_or_else(|| Error::Config(format!("environment variable {name} is not set")))?;
        // keep the JSON valid whatever the value contains
        let quoted = serde_json::to_string(&value).expect("strings serialize");
        out.push_str(&quoted[1..quoted.len() - 1]);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn env_var(name: &str) -> Option<String> {
    std::env::var(name).ok()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let text = interpolate(&raw, env_var)?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| json_parse_error(path, &text, &e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        if let Some(chat) = cfg.endpoints.chat.as_mut() {
            if chat.api_key.is_none() {
                chat.api_key = env_var(CHAT_KEY_ENV);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset.path);
        if let Some(d) = self.dataset.images_dir.as_mut() {
            fix(d);
        }
        fix(&mut self.out_dir);
        if let Some(d) = self.cache_dir.as_mut() {
            fix(d);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == Some(0) {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.n_candidates < 2 || !self.n_candidates.is_multiple_of(2) {
            return Err(Error::Config(format!("n_candidates must be even and positive, got {}", self.n_candidates)));
        }
        if self.max_inflight == 0 {
            return Err(Error::Config("max_inflight must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.error_budget) {
            return Err(Error::Config(format!("error_budget {} outside [0, 1]", self.error_budget)));
        }
        if self.hr.n == 0 {
            return Err(Error::Config("hr.n must be at least 1".into()));
        }
        for (name, ep) in self.endpoints.iter() {
            endpoint_url(name, ep)?;
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k.unwrap_or(match self.dataset.format {
            Format::CocoJson => K_COCO,
            Format::SimpleManifest => K_IMAGENET,
        })
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .or_else(|| env_var(CACHE_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| self.out_dir.join("cache"))
    }

    pub fn dataset_name(&self) -> String {
        self.dataset.name.clone().unwrap_or_else(|| {
            self.dataset.path.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
        })
    }

    /// Digest of the settings that determine results. Credentials and the
    /// output/cache locations are left out.
    pub fn digest(&self) -> Result<String> {
        let mut c = self.clone();
        for ep in [&mut c.endpoints.chat, &mut c.endpoints.detect, &mut c.endpoints.embed].into_iter().flatten() {
            ep.api_key = None;
        }
        c.out_dir = PathBuf::new();
        c.cache_dir = None;
        c.dataset.path = PathBuf::from(c.dataset.path.file_name().unwrap_or_default());
        c.dataset.images_dir = None;
        Ok(sha256(&canonicalize(&c)?).to_hex())
    }
}

impl EndpointsConfig {
    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &EndpointConfig)> {
        [("chat", &self.chat), ("detect", &self.detect), ("embed", &self.embed)]
            .into_iter()
            .filter_map(|(n, e)| e.as_ref().map(|e| (n, e)))
    }
}

pub fn endpoint_url(name: &str, ep: &EndpointConfig) -> Result<Url> {
    let url = Url::parse(&ep.base_url).map_err(|e| Error::Config(format!("{name} endpoint URL `{}`: {e}", ep.base_url)))?;
    if !matches!(url.scheme(), "http" | "https") || url.host().is_none() {
        return Err(Error::Config(format!("{name} endpoint URL `{}` must be http(s) with a host", ep.base_url)));
    }
    if ep.model.trim().is_empty() {
        return Err(Error::Config(format!("{name} endpoint has an empty model id")));
    }
    Ok(url)
}
