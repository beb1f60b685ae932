//! Artifact directory layout, JSON persistence and stage stamps.
//!
//! Every stage writes a `.stamp` file next to its outputs holding the
//! fingerprint of the inputs it was built from. A stage is skipped when its
//! stamp matches, and refuses to run when an upstream stamp disagrees with
//! what the current configuration would produce.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

pub const ARTIFACTS_ENV: &str = "CLAUSEREC_ARTIFACTS";
pub const DEFAULT_ROOT: &str = "artifacts";

/// Filesystem-safe form of a clause-type label.
pub fn slug(label: &str) -> String {
    let mut out = String::with_capacity(label.len());
    for c in label.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifacts {
    root: PathBuf,
}

impl Artifacts {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Artifacts { root: root.into() }
    }

    /// Root from the environment, falling back to `./artifacts`.
    pub fn from_env() -> Self {
        Self::new(std::env::var_os(ARTIFACTS_ENV).map_or_else(|| PathBuf::from(DEFAULT_ROOT), PathBuf::from))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn at(&self, dir: &str, name: &str) -> PathBuf {
        self.root.join(dir).join(name)
    }

    pub fn corpus(&self) -> PathBuf {
        self.at("corpus", "corpus.jsonl")
    }
    pub fn ingest_report(&self) -> PathBuf {
        self.at("corpus", "ingest.json")
    }
    pub fn split(&self, label: &str) -> PathBuf {
        self.at("corpus", &format!("split-{}.jsonl", slug(label)))
    }
    pub fn ingest_stamp(&self) -> PathBuf {
        self.at("corpus", "ingest.stamp")
    }

    pub fn encoder(&self) -> PathBuf {
        self.at("reps", "encoder.json")
    }
    pub fn contract_reps(&self) -> PathBuf {
        self.at("reps", "contracts.json")
    }
    pub fn type_reps(&self) -> PathBuf {
        self.at("reps", "types.json")
    }
    pub fn library_embeddings(&self) -> PathBuf {
        self.at("reps", "library.json")
    }
    pub fn incidence(&self) -> PathBuf {
        self.at("matrices", "incidence.json")
    }
    pub fn similarity(&self) -> PathBuf {
        self.at("matrices", "similarity.json")
    }
    pub fn index_stamp(&self) -> PathBuf {
        self.at("reps", "index.stamp")
    }

    pub fn classifier(&self, label: &str) -> PathBuf {
        self.at("models", &format!("classifier-{}.json", slug(label)))
    }
    pub fn generator(&self, label: &str) -> PathBuf {
        self.at("models", &format!("generator-{}.json", slug(label)))
    }
    pub fn history(&self, model_path: &Path) -> PathBuf {
        model_path.with_extension("history.json")
    }

    pub fn report_json(&self) -> PathBuf {
        self.at("reports", "report.jsonl")
    }
    pub fn report_table(&self) -> PathBuf {
        self.at("reports", "report.txt")
    }

    pub fn sessions(&self) -> PathBuf {
        self.root.join("sessions.jsonl")
    }
}

/// Stamp path for an artifact file.
pub fn stamp_for(path: &Path) -> PathBuf {
    path.with_extension("stamp")
}

/// Writes via a temporary sibling and a rename so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> AppResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| AppError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| AppError::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> AppResult<()> {
    let bytes = serde_json::to_vec(value).map_err(|e| AppError::BadArtifact {
        path: path.to_path_buf(),
        source: e,
    })?;
    write_atomic(path, &bytes)
}

/// Reads a JSON artifact; a missing file names the command that makes it.
pub fn read_json<T: DeserializeOwned>(path: &Path, command: &'static str) -> AppResult<T> {
    let bytes = read_required(path, command)?;
    serde_json::from_slice(&bytes).map_err(|e| AppError::BadArtifact {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn read_required(path: &Path, command: &'static str) -> AppResult<Vec<u8>> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(AppError::MissingArtifact {
            path: path.to_path_buf(),
            command,
        }),
        Err(e) => Err(AppError::io(path, e)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Stamp {
    fingerprint: String,
}

pub fn write_stamp(path: &Path, fingerprint: &str) -> AppResult<()> {
    write_json(
        path,
        &Stamp {
            fingerprint: fingerprint.to_string(),
        },
    )
}

/// Fingerprint recorded in a stamp, if the stamp exists and parses.
pub fn read_stamp(path: &Path) -> Option<String> {
    let bytes = fs::read(path).ok()?;
    serde_json::from_slice::<Stamp>(&bytes).ok().map(|s| s.fingerprint)
}

/// True when the stamp exists and records `fingerprint`.
pub fn is_fresh(path: &Path, fingerprint: &str) -> bool {
    read_stamp(path).as_deref() == Some(fingerprint)
}

/// Checks an upstream stamp before a downstream stage consumes its outputs.
pub fn require_stamp(path: &Path, expected: &str, command: &'static str) -> AppResult<()> {
    match read_stamp(path) {
        None => Err(AppError::MissingArtifact {
            path: path.to_path_buf(),
            command,
        }),
        Some(found) if found == expected => Ok(()),
        Some(found) => Err(AppError::FingerprintMismatch {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found,
            command,
        }),
    }
}
