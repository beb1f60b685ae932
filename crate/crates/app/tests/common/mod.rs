//! Shared fixtures: a small synthetic corpus and a fast configuration.
#![allow(dead_code)]

use std::path::Path;

use clauserec_app::artifacts::Artifacts;
use clauserec_app::{Pipeline, PipelineConfig};
use clauserec_core::corpus::write_corpus;
use clauserec_core::synth::{synthetic_corpus, SynthConfig};

/// Writes a synthetic corpus of `contracts` contracts to `dir/corpus.jsonl`.
pub fn write_synthetic(dir: &Path, contracts: usize) {
    let corpus = synthetic_corpus(&SynthConfig {
        contracts,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut buf = Vec::new();
    write_corpus(&corpus, &mut buf).unwrap();
    std::fs::write(dir.join("corpus.jsonl"), buf).unwrap();
}

pub fn config_toml(generator: bool, classifier_epochs: usize, generator_epochs: usize) -> String {
    format!(
        r#"seed = 7
methods = ["cf", "docsim", "classifier"]
targets = [{{ label = "governing laws", docsim_k = 1, cf_threshold = 0.5, lrs = [1e-3, 3e-4] }}]

[corpus]
path = "corpus.jsonl"

[encoder]
kind = "builtin-deterministic"
dimension = 64
seed = 0

[classifier]
max_epochs = {classifier_epochs}
patience = 20

[generator]
enabled = {generator}
hidden = 16
layers = 1
heads = 2
max_len = 48
lr = 3e-3
batch_size = 16
max_epochs = {generator_epochs}
patience = 4
min_frequency = 1
"#
    )
}

/// A corpus and config in `dir`, with artifacts under `dir/artifacts`.
pub fn fixture(dir: &Path, contracts: usize, generator: bool) -> Pipeline {
    write_synthetic(dir, contracts);
    let cfg_path = dir.join("clauserec.toml");
    std::fs::write(&cfg_path, config_toml(generator, 60, 4)).unwrap();
    pipeline(dir, &dir.join("artifacts"))
}

pub fn pipeline(dir: &Path, artifacts: &Path) -> Pipeline {
    let cfg = PipelineConfig::load(&dir.join("clauserec.toml")).unwrap();
    Pipeline::new(cfg, Artifacts::new(artifacts))
}
