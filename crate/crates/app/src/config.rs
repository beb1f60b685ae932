//! Pipeline configuration (TOML) and its fingerprint.

use std::path::{Path, PathBuf};

use clauserec_core::corpus::{normalize_label, CorpusFormat};
use clauserec_core::encoder::EncoderSpec;
use clauserec_core::generator::GeneratorConfig;
use clauserec_core::relevance::{ClassifierConfig, Method, SimilarityMode};
use clauserec_core::retriever::DEFAULT_TOP_N;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub encoder: EncoderSpec,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    pub targets: Vec<TargetConfig>,
    #[serde(default)]
    pub cf: CfConfig,
    #[serde(default)]
    pub docsim: DocsimConfig,
    #[serde(default)]
    pub classifier: ClassifierSection,
    #[serde(default)]
    pub generator: GeneratorSection,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    /// Directory of the config file, used to resolve a relative corpus path.
    #[serde(skip)]
    pub corpus_base: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Relative paths resolve against the config file's directory.
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: CorpusFormat,
}

/// Per-type settings; unset fields fall back to the section defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub docsim_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cf_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lrs: Option<Vec<f64>>,
}

impl TargetConfig {
    fn table(label: &str, k: usize, threshold: f64, lr: f64) -> Self {
        TargetConfig {
            label: label.to_string(),
            docsim_k: Some(k),
            cf_threshold: Some(threshold),
            lrs: Some(vec![lr]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfConfig {
    pub mode: SimilarityMode,
    pub default_threshold: f64,
}

impl Default for CfConfig {
    fn default() -> Self {
        CfConfig {
            mode: SimilarityMode::AsPrinted,
            default_threshold: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DocsimConfig {
    pub default_k: usize,
}

impl Default for DocsimConfig {
    fn default() -> Self {
        DocsimConfig { default_k: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierSection {
    pub lrs: Vec<f64>,
    #[serde(flatten)]
    pub model: ClassifierConfig,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        ClassifierSection {
            lrs: vec![1e-5, 5e-6, 1e-6, 5e-7],
            model: ClassifierConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSection {
    pub enabled: bool,
    #[serde(flatten)]
    pub model: GeneratorConfig,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        GeneratorSection {
            enabled: true,
            model: GeneratorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub top_n: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { top_n: DEFAULT_TOP_N }
    }
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_format() -> CorpusFormat {
    CorpusFormat::JsonlContracts
}

impl PipelineConfig {
    /// Defaults for a LEDGAR-style corpus with the per-type settings that
    /// worked best at full scale.
    pub fn with_corpus(path: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            seed: 42,
            corpus: CorpusConfig {
                path: path.into(),
                format: default_format(),
            },
            encoder: EncoderSpec::default(),
            methods: default_methods(),
            targets: vec![
                TargetConfig::table("governing laws", 1, 0.27, 5e-7),
                TargetConfig::table("counterparts", 2, 0.18, 1e-6),
                TargetConfig::table("notices", 2, 0.15, 5e-6),
                TargetConfig::table("entire agreements", 1, 0.20, 1e-5),
                TargetConfig::table("severability", 3, 0.13, 1e-6),
            ],
            cf: CfConfig::default(),
            docsim: DocsimConfig::default(),
            classifier: ClassifierSection::default(),
            generator: GeneratorSection::default(),
            retrieval: RetrievalConfig::default(),
            corpus_base: None,
        }
    }

    pub fn from_toml(text: &str) -> AppResult<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| AppError::Config(e.to_string()))?;
        for t in &mut cfg.targets {
            t.label = normalize_label(&t.label);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if cfg.corpus.path.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.corpus_base = Some(dir.to_path_buf());
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> AppResult<String> {
        toml::to_string_pretty(self).map_err(|e| AppError::Config(e.to_string()))
    }

    pub fn validate(&self) -> AppResult<()> {
        let bad = |m: String| Err(AppError::Config(m));
        if self.targets.is_empty() {
            return bad("at least one target clause type is required".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.targets {
            if t.label.is_empty() {
                return bad("empty target label".into());
            }
            if !seen.insert(t.label.as_str()) {
                return bad(format!("target {:?} listed twice", t.label));
            }
            if t.docsim_k == Some(0) {
                return bad(format!("docsim_k for {:?} must be at least 1", t.label));
            }
            if let Some(lrs) = &t.lrs {
                if lrs.is_empty() || lrs.iter().any(|lr| lr.is_nan() || *lr <= 0.0) {
                    return bad(format!(
                        "lrs for {:?} must be a nonempty list of positive rates",
                        t.label
                    ));
                }
            }
            if t.cf_threshold.is_some_and(|x| !x.is_finite()) {
                return bad(format!("cf_threshold for {:?} must be finite", t.label));
            }
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty".into());
        }
        if self.docsim.default_k == 0 {
            return bad("docsim.default_k must be at least 1".into());
        }
        if self.classifier.lrs.is_empty() || self.classifier.lrs.iter().any(|lr| lr.is_nan() || *lr <= 0.0) {
            return bad("classifier.lrs must be a nonempty list of positive rates".into());
        }
        let c = &self.classifier.model;
        if c.batch_size == 0 || !(0.0..1.0).contains(&c.dropout) {
            return bad("classifier batch_size must be ≥ 1 and dropout in [0, 1)".into());
        }
        let g = &self.generator.model;
        if g.max_len < 2 {
            return bad("generator.max_len must be at least 2".into());
        }
        if g.hidden == 0 || g.heads == 0 || !g.hidden.is_multiple_of(g.heads) {
            return bad("generator.hidden must be a positive multiple of generator.heads".into());
        }
        if g.batch_size == 0 || g.layers == 0 || g.lr.is_nan() || g.lr <= 0.0 {
            return bad("generator layers, batch_size and lr must be positive".into());
        }
        if self.retrieval.top_n == 0 {
            return bad("retrieval.top_n must be at least 1".into());
        }
        if self.encoder.dimension() == 0 {
            return bad("encoder dimension must be positive".into());
        }
        Ok(())
    }

    /// Stable hash of the configuration contents.
    pub fn fingerprint(&self) -> String {
        hash_json(self)
    }

    /// Corpus path with relative paths resolved against the config file.
    pub fn corpus_path(&self) -> PathBuf {
        match &self.corpus_base {
            Some(base) if self.corpus.path.is_relative() => base.join(&self.corpus.path),
            _ => self.corpus.path.clone(),
        }
    }

    pub fn target(&self, label: &str) -> Option<&TargetConfig> {
        self.targets.iter().find(|t| t.label == label)
    }

    pub fn docsim_k(&self, t: &TargetConfig) -> usize {
        t.docsim_k.unwrap_or(self.docsim.default_k)
    }

    pub fn cf_threshold(&self, t: &TargetConfig) -> f64 {
        t.cf_threshold.unwrap_or(self.cf.default_threshold)
    }

    pub fn lrs<'a>(&'a self, t: &'a TargetConfig) -> &'a [f64] {
        t.lrs.as_deref().unwrap_or(&self.classifier.lrs)
    }

    pub fn uses(&self, m: Method) -> bool {
        self.methods.contains(&m)
    }
}

/// First 16 hex digits of the SHA-256 of a value's JSON form.
pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config values serialize");
    hash_bytes(&json)
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))[..16].to_string()
}
