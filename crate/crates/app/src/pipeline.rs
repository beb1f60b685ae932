//! Pipeline stages: ingest, build-index, train-classifier, train-generator
//! and evaluate. Each stage is skipped when its stamp is current.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use clauserec_core::corpus::{
    build_proxy_dataset, read_corpus, read_proxy_dataset, write_corpus, write_proxy_dataset, ClauseLibrary,
    ClauseTypeId, Corpus, CorpusFormat, DatasetSplit,
};
use clauserec_core::encoder::{
    contract_rep, BuiltinEncoder, CachedEncoder, Embedding, Encoder, EncoderSpec, ExternalEncoder, TypeReps,
};
use clauserec_core::eval::{report_jsonl, report_table, ReportRow};
use clauserec_core::generator::{train_decoder, DecoderMeta, DecoderModel, DECODER_KIND};
use clauserec_core::nn::ModelArtifact;
use clauserec_core::relevance::{
    train_classifier_sweep, ClassifierMeta, ClassifierModel, IncidenceMatrix, ItemSimilarityMatrix, Method,
    CLASSIFIER_KIND,
};
use clauserec_core::retriever::Variant;
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    is_fresh, read_json, read_required, require_stamp, stamp_for, write_atomic, write_json, write_stamp, Artifacts,
};
use crate::config::{hash_bytes, hash_json, PipelineConfig, TargetConfig};
use crate::error::{AppError, AppResult};
use crate::evaluation::TargetEval;

pub const CMD_INGEST: &str = "ingest";
pub const CMD_INDEX: &str = "build-index";
pub const CMD_CLASSIFIER: &str = "train-classifier";
pub const CMD_GENERATOR: &str = "train-generator";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Built,
    UpToDate,
}

impl Status {
    pub fn describe(self) -> &'static str {
        match self {
            Status::Built => "built",
            Status::UpToDate => "artifact up to date",
        }
    }
}

/// Persisted encoder: the spec plus fitted state for the built-in encoder.
#[derive(Serialize, Deserialize)]
struct EncoderArtifact {
    spec: EncoderSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    builtin: Option<BuiltinEncoder>,
}

pub fn open_encoder(spec: &EncoderSpec, builtin: Option<BuiltinEncoder>) -> AppResult<Arc<dyn Encoder>> {
    let inner: Arc<dyn Encoder> = match spec {
        EncoderSpec::BuiltinDeterministic { .. } => {
            let enc =
                builtin.ok_or_else(|| AppError::Input("built-in encoder artifact lacks its fitted state".into()))?;
            Arc::new(enc.finish_load())
        }
        EncoderSpec::ExternalService {
            url,
            dimension,
            max_batch,
            timeout_ms,
        } => Arc::new(ExternalEncoder::new(
            url.clone(),
            *dimension,
            *max_batch,
            Duration::from_millis(*timeout_ms),
        )?),
    };
    Ok(Arc::new(CachedEncoder::new(inner)))
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub art: Artifacts,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, art: Artifacts) -> Self {
        Pipeline { cfg, art }
    }

    // -- fingerprints -------------------------------------------------------

    fn corpus_hash(&self) -> AppResult<String> {
        let path = self.cfg.corpus_path();
        let bytes = std::fs::read(&path).map_err(|e| AppError::io(&path, e))?;
        Ok(hash_bytes(&bytes))
    }

    pub fn ingest_fp(&self) -> AppResult<String> {
        Ok(hash_json(&(
            "ingest",
            self.corpus_hash()?,
            self.cfg.corpus.format,
            self.cfg.seed,
        )))
    }

    fn split_fp(&self, ingest: &str, label: &str) -> String {
        hash_json(&("split", ingest, label))
    }

    pub fn index_fp(&self) -> AppResult<String> {
        Ok(hash_json(&(
            "index",
            self.ingest_fp()?,
            &self.cfg.encoder,
            self.cfg.cf.mode,
        )))
    }

    fn classifier_fp(&self, index: &str, ingest: &str, t: &TargetConfig) -> String {
        hash_json(&(
            "classifier",
            index,
            self.split_fp(ingest, &t.label),
            &self.cfg.classifier.model,
            self.cfg.lrs(t),
            self.cfg.seed,
        ))
    }

    fn generator_fp(&self, index: &str, ingest: &str, t: &TargetConfig) -> String {
        hash_json(&(
            "generator",
            index,
            self.split_fp(ingest, &t.label),
            &self.cfg.generator.model,
            self.cfg.seed,
        ))
    }

    // -- loaders ------------------------------------------------------------

    /// The ingested corpus, after checking it matches the configured source.
    pub fn load_corpus(&self) -> AppResult<Corpus> {
        require_stamp(&self.art.ingest_stamp(), &self.ingest_fp()?, CMD_INGEST)?;
        let path = self.art.corpus();
        let bytes = read_required(&path, CMD_INGEST)?;
        Ok(read_corpus(bytes.as_slice(), CorpusFormat::JsonlContracts)?.0)
    }

    pub fn load_split(&self, corpus: &Corpus, label: &str) -> AppResult<DatasetSplit> {
        let path = self.art.split(label);
        require_stamp(&stamp_for(&path), &self.split_fp(&self.ingest_fp()?, label), CMD_INGEST)?;
        let bytes = read_required(&path, CMD_INGEST)?;
        Ok(read_proxy_dataset(&corpus.types, bytes.as_slice())?)
    }

    pub fn load_encoder(&self) -> AppResult<Arc<dyn Encoder>> {
        require_stamp(&self.art.index_stamp(), &self.index_fp()?, CMD_INDEX)?;
        let a: EncoderArtifact = read_json(&self.art.encoder(), CMD_INDEX)?;
        open_encoder(&a.spec, a.builtin)
    }

    /// A trained classifier for `t`, checked against the current inputs.
    pub fn load_classifier(&self, t: &TargetConfig, enc: &dyn Encoder) -> AppResult<ClassifierModel> {
        let path = self.art.classifier(&t.label);
        let fp = self.classifier_fp(&self.index_fp()?, &self.ingest_fp()?, t);
        require_stamp(&stamp_for(&path), &fp, CMD_CLASSIFIER)?;
        let art: ModelArtifact<ClassifierMeta> = read_json(&path, CMD_CLASSIFIER)?;
        art.check(CLASSIFIER_KIND, enc.dimension(), &enc.fingerprint())?;
        Ok(ClassifierModel::from_artifact(&art)?)
    }

    pub fn load_generator(&self, t: &TargetConfig, enc: &dyn Encoder) -> AppResult<DecoderModel> {
        let path = self.art.generator(&t.label);
        let fp = self.generator_fp(&self.index_fp()?, &self.ingest_fp()?, t);
        require_stamp(&stamp_for(&path), &fp, CMD_GENERATOR)?;
        let art: ModelArtifact<DecoderMeta> = read_json(&path, CMD_GENERATOR)?;
        art.check(DECODER_KIND, enc.dimension(), &enc.fingerprint())?;
        Ok(DecoderModel::from_artifact(&art)?)
    }

    // -- stages -------------------------------------------------------------

    pub fn ingest(&self) -> AppResult<Status> {
        let fp = self.ingest_fp()?;
        let stamp = self.art.ingest_stamp();
        let splits_fresh = self
            .cfg
            .targets
            .iter()
            .all(|t| is_fresh(&stamp_for(&self.art.split(&t.label)), &self.split_fp(&fp, &t.label)));
        if is_fresh(&stamp, &fp) && splits_fresh {
            return Ok(Status::UpToDate);
        }

        let src = self.cfg.corpus_path();
        let file = File::open(&src).map_err(|e| AppError::io(&src, e))?;
        let (corpus, report) = read_corpus(BufReader::new(file), self.cfg.corpus.format)?;
        if corpus.is_empty() {
            return Err(AppError::Input(format!(
                "{} contains no usable contracts",
                src.display()
            )));
        }
        tracing::info!(
            contracts = corpus.len(),
            types = corpus.types.len(),
            dropped_clauses = report.dropped_clauses,
            dropped_contracts = report.dropped_contracts,
            "corpus ingested"
        );
        let mut buf = Vec::new();
        write_corpus(&corpus, &mut buf)?;
        write_atomic(&self.art.corpus(), &buf)?;
        write_json(&self.art.ingest_report(), &report)?;

        for t in &self.cfg.targets {
            let target = corpus.types.require(&t.label)?;
            let split = build_proxy_dataset(&corpus, target, self.cfg.seed)?;
            let mut buf = Vec::new();
            write_proxy_dataset(&corpus.types, &split, &mut buf)?;
            let path = self.art.split(&t.label);
            write_atomic(&path, &buf)?;
            write_stamp(&stamp_for(&path), &self.split_fp(&fp, &t.label))?;
            tracing::info!(
                target = %t.label,
                train = split.train.len(),
                validation = split.validation.len(),
                test = split.test.len(),
                "proxy dataset"
            );
        }
        write_stamp(&stamp, &fp)?;
        Ok(Status::Built)
    }

    pub fn build_index(&self) -> AppResult<Status> {
        let fp = self.index_fp()?;
        if is_fresh(&self.art.index_stamp(), &fp) {
            return Ok(Status::UpToDate);
        }
        let corpus = self.load_corpus()?;
        let lib = ClauseLibrary::build(&corpus);
        let artifact = match &self.cfg.encoder {
            spec @ EncoderSpec::BuiltinDeterministic {
                dimension,
                seed,
                buckets,
            } => EncoderArtifact {
                spec: spec.clone(),
                builtin: Some(BuiltinEncoder::fit(
                    *dimension,
                    *seed,
                    *buckets,
                    lib.iter().map(|e| e.clause.tokens.as_slice()),
                )),
            },
            spec => EncoderArtifact {
                spec: spec.clone(),
                builtin: None,
            },
        };
        let enc = open_encoder(&artifact.spec, artifact.builtin.clone())?;

        let reps = corpus
            .contracts
            .iter()
            .map(|c| Ok((c.id.clone(), contract_rep(enc.as_ref(), c)?.0)))
            .collect::<AppResult<Vec<(String, Embedding)>>>()?;
        let library = lib
            .types()
            .map(|t| {
                let clauses: Vec<_> = lib.entries(t).iter().map(|e| &e.clause).collect();
                Ok((t, enc.encode_batch(&clauses)?))
            })
            .collect::<AppResult<Vec<(ClauseTypeId, Vec<Embedding>)>>>()?;
        let type_reps = TypeReps::build(enc.as_ref(), &lib)?;
        let m = IncidenceMatrix::build(&corpus.contracts, corpus.types.len())?;
        let s = ItemSimilarityMatrix::build(&m, self.cfg.cf.mode);

        write_json(&self.art.encoder(), &artifact)?;
        write_json(&self.art.contract_reps(), &reps)?;
        write_json(&self.art.library_embeddings(), &library)?;
        write_json(&self.art.type_reps(), &type_reps)?;
        write_json(&self.art.incidence(), &m)?;
        write_json(&self.art.similarity(), &s)?;
        write_stamp(&self.art.index_stamp(), &fp)?;
        tracing::info!(encoder = %enc.fingerprint(), contracts = reps.len(), clauses = lib.len(), "index built");
        Ok(Status::Built)
    }

    pub fn train_classifiers(&self) -> AppResult<Vec<(String, Status)>> {
        let (index, ingest) = (self.index_fp()?, self.ingest_fp()?);
        let mut out = Vec::new();
        let mut ctx: Option<(Corpus, Arc<dyn Encoder>)> = None;
        for t in &self.cfg.targets {
            let path = self.art.classifier(&t.label);
            let fp = self.classifier_fp(&index, &ingest, t);
            if is_fresh(&stamp_for(&path), &fp) {
                out.push((t.label.clone(), Status::UpToDate));
                continue;
            }
            if ctx.is_none() {
                ctx = Some((self.load_corpus()?, self.load_encoder()?));
            }
            let (corpus, enc) = ctx.as_ref().expect("loaded above");
            let split = self.load_split(corpus, &t.label)?;
            let eval = TargetEval::new(corpus, &split, enc.as_ref())?;
            let (train, val) = eval.classifier_data()?;
            let (model, best, all) =
                train_classifier_sweep(&train, &val, &self.cfg.classifier.model, self.cfg.lrs(t), self.cfg.seed)?;
            tracing::info!(
                target = %t.label,
                lr = best.lr,
                val_accuracy = best.best_val_accuracy,
                epoch = best.best_epoch,
                "classifier trained"
            );
            let art = model.to_artifact(&enc.fingerprint(), best.lr, best.best_val_accuracy);
            write_json(&path, &art)?;
            write_json(&self.art.history(&path), &all)?;
            write_stamp(&stamp_for(&path), &fp)?;
            out.push((t.label.clone(), Status::Built));
        }
        Ok(out)
    }

    pub fn train_generators(&self) -> AppResult<Vec<(String, Status)>> {
        let (index, ingest) = (self.index_fp()?, self.ingest_fp()?);
        let mut out = Vec::new();
        let mut ctx: Option<(Corpus, Arc<dyn Encoder>)> = None;
        for t in &self.cfg.targets {
            let path = self.art.generator(&t.label);
            let fp = self.generator_fp(&index, &ingest, t);
            if is_fresh(&stamp_for(&path), &fp) {
                out.push((t.label.clone(), Status::UpToDate));
                continue;
            }
            if ctx.is_none() {
                ctx = Some((self.load_corpus()?, self.load_encoder()?));
            }
            let (corpus, enc) = ctx.as_ref().expect("loaded above");
            let split = self.load_split(corpus, &t.label)?;
            let eval = TargetEval::new(corpus, &split, enc.as_ref())?;
            let gcfg = &self.cfg.generator.model;
            let (train, val, vocab) = eval.generator_data(gcfg.min_frequency)?;
            let (model, hist) = train_decoder(&train, &val, vocab, enc.dimension(), gcfg, self.cfg.seed)?;
            tracing::info!(
                target = %t.label,
                vocab = model.vocab().len(),
                best_epoch = hist.best_epoch,
                val_loss = hist.best_val_loss,
                dropped_long = hist.dropped_long,
                "generator trained"
            );
            write_json(&path, &model.to_artifact(&enc.fingerprint(), hist.best_val_loss))?;
            write_json(&self.art.history(&path), &hist)?;
            write_stamp(&stamp_for(&path), &fp)?;
            out.push((t.label.clone(), Status::Built));
        }
        Ok(out)
    }

    fn evaluate_fp(&self) -> AppResult<String> {
        let (index, ingest) = (self.index_fp()?, self.ingest_fp()?);
        let models: Vec<String> = self
            .cfg
            .targets
            .iter()
            .flat_map(|t| {
                let mut v = Vec::new();
                if self.cfg.uses(Method::Classifier) {
                    v.push(self.classifier_fp(&index, &ingest, t));
                }
                if self.cfg.generator.enabled {
                    v.push(self.generator_fp(&index, &ingest, t));
                }
                v
            })
            .collect();
        Ok(hash_json(&("evaluate", self.cfg.fingerprint(), index, models)))
    }

    /// Relevance rows for every configured method, then retrieval rows for
    /// both query variants and a generation row when the generator is on.
    pub fn report_rows(&self) -> AppResult<Vec<ReportRow>> {
        let corpus = self.load_corpus()?;
        let enc = self.load_encoder()?;
        let fingerprint = self.cfg.fingerprint();
        let mut rows = Vec::new();
        for t in &self.cfg.targets {
            let split = self.load_split(&corpus, &t.label)?;
            let eval = TargetEval::new(&corpus, &split, enc.as_ref())?;
            for &m in &self.cfg.methods {
                let counts = match m {
                    Method::Cf => eval.cf(self.cfg.cf.mode, self.cfg.cf_threshold(t))?,
                    Method::Docsim => eval.docsim(self.cfg.docsim_k(t))?,
                    Method::Classifier => eval.classifier(&self.load_classifier(t, enc.as_ref())?)?,
                };
                rows.push(ReportRow::relevance(&t.label, m.as_str(), counts, &fingerprint));
            }
            for v in [Variant::CtOnly, Variant::CtPlusType] {
                let (scores, n) = eval.retrieval(v)?;
                rows.push(ReportRow::generation(
                    &t.label,
                    &format!("retrieval-{}", v.as_str()),
                    scores,
                    n,
                    &fingerprint,
                ));
            }
            if self.cfg.generator.enabled {
                let model = self.load_generator(t, enc.as_ref())?;
                let g = &self.cfg.generator.model;
                let (scores, n) = eval.generation(&model, g.max_len, &g.decoding)?;
                rows.push(ReportRow::generation(&t.label, "generation", scores, n, &fingerprint));
            }
        }
        Ok(rows)
    }

    /// Writes the report (JSON rows and a text table) into the artifact
    /// tree and, if given, to `out` as well.
    pub fn evaluate(&self, out: Option<&Path>) -> AppResult<(Status, String)> {
        let fp = self.evaluate_fp()?;
        let json_path = self.art.report_json();
        let (status, json) = if is_fresh(&stamp_for(&json_path), &fp) {
            let bytes = read_required(&json_path, "evaluate")?;
            (Status::UpToDate, String::from_utf8_lossy(&bytes).into_owned())
        } else {
            let rows = self.report_rows()?;
            let json = report_jsonl(&rows)?;
            write_atomic(&json_path, json.as_bytes())?;
            write_atomic(&self.art.report_table(), report_table(&rows).as_bytes())?;
            write_stamp(&stamp_for(&json_path), &fp)?;
            (Status::Built, json)
        };
        if let Some(out) = out {
            write_atomic(out, json.as_bytes())?;
        }
        Ok((status, json))
    }

    /// Every stage in order.
    pub fn run_all(&self) -> AppResult<()> {
        self.ingest()?;
        self.build_index()?;
        if self.cfg.uses(Method::Classifier) {
            self.train_classifiers()?;
        }
        if self.cfg.generator.enabled {
            self.train_generators()?;
        }
        self.evaluate(None)?;
        Ok(())
    }
}
