//! On-disk container for trained model weights.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::params::NamedTensor;
use crate::error::{Error, Result};

pub const ARTIFACT_FORMAT: &str = "clauserec-model";
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact<C> {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub encoder_fingerprint: String,
    pub input_dim: usize,
    pub config: C,
    pub params: Vec<NamedTensor>,
}

impl<C: Serialize + DeserializeOwned> ModelArtifact<C> {
    pub fn new(kind: &str, encoder_fingerprint: &str, input_dim: usize, config: C, params: Vec<NamedTensor>) -> Self {
        ModelArtifact {
            format: ARTIFACT_FORMAT.to_string(),
            version: ARTIFACT_VERSION,
            kind: kind.to_string(),
            encoder_fingerprint: encoder_fingerprint.to_string(),
            input_dim,
            config,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = serde_json::to_vec(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Reads an artifact and checks that it was produced for this model
    /// kind, input dimension and encoder.
    pub fn load(path: &Path, kind: &str, input_dim: usize, encoder_fingerprint: &str) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let art: Self = serde_json::from_slice(&bytes)?;
        art.check(kind, input_dim, encoder_fingerprint)?;
        Ok(art)
    }

    pub fn check(&self, kind: &str, input_dim: usize, encoder_fingerprint: &str) -> Result<()> {
        if self.format != ARTIFACT_FORMAT || self.version != ARTIFACT_VERSION {
            return Err(Error::Artifact(format!(
                "unsupported artifact format {} v{}",
                self.format, self.version
            )));
        }
        if self.kind != kind {
            return Err(Error::Artifact(format!("expected a {kind} model, found {}", self.kind)));
        }
        if self.input_dim != input_dim {
            return Err(Error::DimensionMismatch {
                expected: input_dim,
                actual: self.input_dim,
            });
        }
        if self.encoder_fingerprint != encoder_fingerprint {
            return Err(Error::Artifact(format!(
                "model was trained with encoder {}, current encoder is {}",
                self.encoder_fingerprint, encoder_fingerprint
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_refusals() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let art = ModelArtifact::new(
            "mlp",
            "fp1",
            3,
            vec![1u32, 2],
            vec![NamedTensor {
                name: "w".into(),
                shape: vec![3],
                data: vec![0.1, 0.2, 0.3],
            }],
        );
        art.save(&path).unwrap();
        let back = ModelArtifact::<Vec<u32>>::load(&path, "mlp", 3, "fp1").unwrap();
        assert_eq!(back, art);
        assert!(matches!(
            ModelArtifact::<Vec<u32>>::load(&path, "mlp", 4, "fp1"),
            Err(Error::DimensionMismatch { expected: 4, actual: 3 })
        ));
        assert!(matches!(
            ModelArtifact::<Vec<u32>>::load(&path, "mlp", 3, "other"),
            Err(Error::Artifact(_))
        ));
        assert!(ModelArtifact::<Vec<u32>>::load(&path, "decoder", 3, "fp1").is_err());
    }
}
