//! Read-only models used at serve time, built over the whole corpus.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use clauserec_core::corpus::{ClauseLibrary, ClauseTypeId, ClauseTypes, Contract};
use clauserec_core::encoder::{contract_rep, ContractRep, Embedding, Encoder, TypeReps};
use clauserec_core::generator::{condition, DecoderModel, Generated};
use clauserec_core::relevance::{
    cf_predict, cf_scores_absent, ClassifierModel, DocSimIndex, IncidenceMatrix, ItemSimilarityMatrix, Method,
    RelevanceDecision,
};
use clauserec_core::retriever::{RetrievalQuery, Retriever, Variant};
use clauserec_core::{Error, Result};
use serde::Serialize;

use crate::artifacts::read_json;
use crate::config::PipelineConfig;
use crate::error::AppResult;
use crate::pipeline::{Pipeline, CMD_INDEX};

pub struct Models {
    pub config: PipelineConfig,
    pub fingerprint: String,
    pub types: ClauseTypes,
    pub encoder: Arc<dyn Encoder>,
    incidence: IncidenceMatrix,
    similarity: ItemSimilarityMatrix,
    docsim: DocSimIndex,
    retriever: Retriever,
    type_reps: TypeReps,
    classifiers: BTreeMap<ClauseTypeId, ClassifierModel>,
    generators: BTreeMap<ClauseTypeId, DecoderModel>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecisionView {
    pub method: Method,
    pub score: f64,
    pub relevant: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

impl From<&RelevanceDecision> for DecisionView {
    fn from(d: &RelevanceDecision) -> Self {
        DecisionView {
            method: d.method,
            score: d.score,
            relevant: d.relevant,
            threshold: d.threshold_used,
            k: d.k_used,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TypeRelevance {
    #[serde(rename = "type")]
    pub label: String,
    /// True when any method recommends the type.
    pub relevant: bool,
    pub decisions: Vec<DecisionView>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RetrievedView {
    pub rank: usize,
    pub score: f64,
    pub text: String,
    pub source_contract: String,
    pub clause_index: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GeneratedView {
    pub text: String,
    pub truncated: bool,
}

impl From<Generated> for GeneratedView {
    fn from(g: Generated) -> Self {
        GeneratedView {
            text: g.text,
            truncated: g.truncated,
        }
    }
}

impl Models {
    /// Loads the index and every trained model that is current; stale or
    /// missing classifiers and generators are skipped with a warning.
    pub fn load(pipeline: &Pipeline) -> AppResult<Self> {
        let cfg = &pipeline.cfg;
        let art = &pipeline.art;
        let corpus = pipeline.load_corpus()?;
        let encoder = pipeline.load_encoder()?;
        let reps: Vec<(String, Embedding)> = read_json(&art.contract_reps(), CMD_INDEX)?;
        let library: Vec<(ClauseTypeId, Vec<Embedding>)> = read_json(&art.library_embeddings(), CMD_INDEX)?;
        let type_reps: TypeReps = read_json(&art.type_reps(), CMD_INDEX)?;
        let incidence: IncidenceMatrix = read_json(&art.incidence(), CMD_INDEX)?;
        let similarity: ItemSimilarityMatrix = read_json(&art.similarity(), CMD_INDEX)?;

        let types_of: BTreeMap<&str, BTreeSet<ClauseTypeId>> =
            corpus.contracts.iter().map(|c| (c.id.as_str(), c.type_set())).collect();
        let docsim = DocSimIndex::from_reps(
            encoder.fingerprint(),
            reps.into_iter().map(|(id, rep)| {
                let types = types_of.get(id.as_str()).cloned().unwrap_or_default();
                (id, rep, types)
            }),
        );
        let retriever = Retriever::from_parts(ClauseLibrary::build(&corpus), library.into_iter().collect())?;

        let mut classifiers = BTreeMap::new();
        let mut generators = BTreeMap::new();
        for t in &cfg.targets {
            let id = corpus.types.require(&t.label)?;
            if cfg.uses(Method::Classifier) {
                match pipeline.load_classifier(t, encoder.as_ref()) {
                    Ok(m) => {
                        classifiers.insert(id, m);
                    }
                    Err(e) => tracing::warn!(target = %t.label, "classifier unavailable: {e}"),
                }
            }
            if cfg.generator.enabled {
                match pipeline.load_generator(t, encoder.as_ref()) {
                    Ok(m) => {
                        generators.insert(id, m);
                    }
                    Err(e) => tracing::warn!(target = %t.label, "generator unavailable: {e}"),
                }
            }
        }
        Ok(Models {
            fingerprint: cfg.fingerprint(),
            config: cfg.clone(),
            types: corpus.types,
            encoder,
            incidence,
            similarity,
            docsim,
            retriever,
            type_reps,
            classifiers,
            generators,
        })
    }

    pub fn has_generator(&self, t: ClauseTypeId) -> bool {
        self.generators.contains_key(&t)
    }

    pub fn rep(&self, contract: &Contract) -> Result<ContractRep> {
        contract_rep(self.encoder.as_ref(), contract)
    }

    fn threshold(&self, label: &str) -> f64 {
        self.config
            .target(label)
            .map_or(self.config.cf.default_threshold, |t| self.config.cf_threshold(t))
    }

    fn k(&self, label: &str) -> usize {
        self.config
            .target(label)
            .map_or(self.config.docsim.default_k, |t| self.config.docsim_k(t))
    }

    /// Decisions for every type absent from `contract`. Types with a
    /// classifier come first, by descending probability; the rest follow in
    /// label order. Methods needing a contract representation are skipped
    /// for a contract with no encodable clause.
    pub fn relevant_types(&self, contract: &Contract, methods: &[Method]) -> Result<(Vec<TypeRelevance>, Vec<String>)> {
        let mut warnings = Vec::new();
        let present = contract.type_set();
        let rep = match self.rep(contract) {
            Ok(r) if r.0.norm() > 0.0 => Some(r),
            Ok(_) | Err(Error::EmptyContract(_)) => {
                if methods.iter().any(|m| *m != Method::Cf) {
                    warnings.push("contract has no encodable clause; only cf was run".to_string());
                }
                None
            }
            Err(e) => return Err(e),
        };
        let cf = if methods.contains(&Method::Cf) {
            cf_scores_absent(&self.incidence, &self.similarity, &present)?
        } else {
            BTreeMap::new()
        };
        let absent: Vec<ClauseTypeId> = self.types.ids().filter(|t| !present.contains(t)).collect();

        let mut out = Vec::new();
        for &t in &absent {
            let label = self.types.label(t);
            let mut decisions = Vec::new();
            for &m in methods {
                let d = match (m, &rep) {
                    (Method::Cf, _) => Some(cf_predict(cf[&t], self.threshold(label), t, false)),
                    (Method::Docsim, Some(r)) if !self.docsim.is_empty() => {
                        Some(self.docsim.predict(r, &present, t, self.k(label))?)
                    }
                    (Method::Classifier, Some(r)) => match self.classifiers.get(&t) {
                        Some(model) => Some(model.predict(r, t, false)?),
                        None => None,
                    },
                    _ => None,
                };
                decisions.extend(d.as_ref().map(DecisionView::from));
            }
            out.push(TypeRelevance {
                label: label.to_string(),
                relevant: decisions.iter().any(|d| d.relevant),
                decisions,
            });
        }
        let prob = |r: &TypeRelevance| {
            r.decisions
                .iter()
                .find(|d| d.method == Method::Classifier)
                .map(|d| d.score)
        };
        out.sort_by(|a, b| match (prob(a), prob(b)) {
            (Some(x), Some(y)) => y.total_cmp(&x).then_with(|| a.label.cmp(&b.label)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.label.cmp(&b.label),
        });
        Ok((out, warnings))
    }

    pub fn retrieve(
        &self,
        contract: &Contract,
        t: ClauseTypeId,
        variant: Variant,
        top_n: usize,
    ) -> Result<Vec<RetrievedView>> {
        let rep = self.rep(contract)?;
        let q = RetrievalQuery {
            contract_rep: &rep,
            type_rep: self.type_reps.get(t).ok(),
            target: t,
            top_n,
            variant,
            exclude_contract: Some(&contract.id),
        };
        Ok(self
            .retriever
            .retrieve(&q)?
            .into_iter()
            .map(|r| RetrievedView {
                rank: r.rank,
                score: r.score,
                text: r.clause.text,
                source_contract: r.source_contract,
                clause_index: r.clause_index,
            })
            .collect())
    }

    /// One generated clause, or `None` when no decoder is loaded for `t`.
    pub fn generate(&self, contract: &Contract, t: ClauseTypeId) -> Result<Option<GeneratedView>> {
        let Some(model) = self.generators.get(&t) else {
            return Ok(None);
        };
        let rep = self.rep(contract)?;
        let memory = condition(&rep, self.type_reps.get(t)?)?;
        let g = &self.config.generator.model;
        Ok(Some(model.generate(&memory, g.max_len, &g.decoding)?.into()))
    }
}
