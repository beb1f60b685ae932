//! Held-out evaluation for one target clause type.
//!
//! The training pool is every corpus contract whose id is not in the
//! target's validation or test split. CF statistics, the document-similarity
//! index, the clause library and the type representation all come from the
//! pool, so no test contract or held-out clause is visible to any method.

use clauserec_core::corpus::{ClauseLibrary, ClauseTypeId, Contract, Corpus, DatasetSplit, ProxyExample};
use clauserec_core::encoder::{clause_type_rep, contract_rep, ClauseTypeRep, ContractRep, Encoder};
use clauserec_core::eval::{evaluate_generation, evaluate_relevance, ConfusionCounts, RougeScores};
use clauserec_core::generator::{condition, DecoderModel, Decoding, GenerationExample, Vocabulary};
use clauserec_core::relevance::{
    cf_predict, cf_score, classifier_examples, incidence_row, ClassifierModel, DocSimIndex, IncidenceMatrix,
    ItemSimilarityMatrix, LabeledRep, SimilarityMode,
};
use clauserec_core::retriever::{RetrievalQuery, Retriever, Variant};
use clauserec_core::Result;

/// A test example with its encoded contract.
struct Encoded<'a> {
    example: &'a ProxyExample,
    rep: ContractRep,
}

pub struct TargetEval<'a> {
    pub target: ClauseTypeId,
    split: &'a DatasetSplit,
    enc: &'a dyn Encoder,
    pool: Vec<&'a Contract>,
    n_types: usize,
    type_rep: ClauseTypeRep,
    retriever: Retriever,
    test: Vec<Encoded<'a>>,
}

impl<'a> TargetEval<'a> {
    pub fn new(corpus: &'a Corpus, split: &'a DatasetSplit, enc: &'a dyn Encoder) -> Result<Self> {
        let held_out = split.held_out_ids();
        let pool: Vec<&Contract> = corpus
            .contracts
            .iter()
            .filter(|c| !held_out.contains(c.id.as_str()))
            .collect();
        let lib = ClauseLibrary::from_contracts(pool.iter().copied());
        let type_rep = clause_type_rep(enc, &lib, split.target)?;
        let retriever = Retriever::build(enc, lib)?;
        let test = split
            .test
            .iter()
            .map(|e| {
                Ok(Encoded {
                    example: e,
                    rep: contract_rep(enc, &e.contract)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TargetEval {
            target: split.target,
            split,
            enc,
            pool,
            n_types: corpus.types.len(),
            type_rep,
            retriever,
            test,
        })
    }

    pub fn pool(&self) -> &[&'a Contract] {
        &self.pool
    }

    pub fn type_rep(&self) -> &ClauseTypeRep {
        &self.type_rep
    }

    fn counts<F>(&self, mut predict: F) -> Result<ConfusionCounts>
    where
        F: FnMut(&Encoded) -> Result<bool>,
    {
        let pairs = self
            .test
            .iter()
            .map(|e| Ok((predict(e)?, e.example.relevance.is_relevant())))
            .collect::<Result<Vec<_>>>()?;
        evaluate_relevance(pairs)
    }

    pub fn cf_scores(&self, mode: SimilarityMode) -> Result<Vec<(f64, bool)>> {
        let m = IncidenceMatrix::build(self.pool.iter().copied(), self.n_types)?;
        let s = ItemSimilarityMatrix::build(&m, mode);
        self.test
            .iter()
            .map(|e| {
                let row = incidence_row(&e.example.contract.type_set(), self.n_types);
                Ok((cf_score(&m, &s, &row, self.target)?, e.example.relevance.is_relevant()))
            })
            .collect()
    }

    pub fn cf(&self, mode: SimilarityMode, threshold: f64) -> Result<ConfusionCounts> {
        let scores = self.cf_scores(mode)?;
        evaluate_relevance(
            scores
                .into_iter()
                .map(|(s, actual)| (cf_predict(s, threshold, self.target, false).relevant, actual)),
        )
    }

    pub fn docsim(&self, k: usize) -> Result<ConfusionCounts> {
        let index = DocSimIndex::build(self.enc, self.pool.iter().copied())?;
        self.counts(|e| {
            let present = e.example.contract.type_set();
            Ok(index.predict(&e.rep, &present, self.target, k)?.relevant)
        })
    }

    pub fn classifier(&self, model: &ClassifierModel) -> Result<ConfusionCounts> {
        self.counts(|e| Ok(model.predict(&e.rep, self.target, false)?.relevant))
    }

    /// Classifier inputs for the train and validation parts.
    pub fn classifier_data(&self) -> Result<(Vec<LabeledRep>, Vec<LabeledRep>)> {
        Ok((
            classifier_examples(self.enc, &self.split.train)?,
            classifier_examples(self.enc, &self.split.validation)?,
        ))
    }

    fn generation_examples(&self, part: &[ProxyExample], vocab: &Vocabulary) -> Result<Vec<GenerationExample>> {
        part.iter()
            .filter_map(|e| e.held_out.as_ref().map(|h| (e, h)))
            .map(|(e, held)| {
                let rep = contract_rep(self.enc, &e.contract)?;
                Ok(GenerationExample {
                    memory: condition(&rep, &self.type_rep)?,
                    tokens: vocab.encode(&held.tokens),
                })
            })
            .collect()
    }

    /// Decoder inputs for the train and validation parts, encoded with a
    /// vocabulary built from the training clauses only.
    pub fn generator_data(
        &self,
        min_frequency: usize,
    ) -> Result<(Vec<GenerationExample>, Vec<GenerationExample>, Vocabulary)> {
        let vocab = Vocabulary::build(
            self.split
                .train
                .iter()
                .filter_map(|e| e.held_out.as_ref().map(|h| h.tokens.as_slice())),
            min_frequency,
        );
        let train = self.generation_examples(&self.split.train, &vocab)?;
        let validation = self.generation_examples(&self.split.validation, &vocab)?;
        Ok((train, validation, vocab))
    }

    fn relevant_test(&self) -> impl Iterator<Item = (&Encoded<'a>, &'a [String])> + '_ {
        self.test
            .iter()
            .filter_map(|e| e.example.held_out.as_ref().map(|h| (e, h.tokens.as_slice())))
    }

    /// Rank-1 retrieved clause per relevant test example, as token streams.
    pub fn retrieved(&self, variant: Variant) -> Result<Vec<(Vec<String>, Vec<String>)>> {
        self.relevant_test()
            .map(|(e, reference)| {
                let q = RetrievalQuery {
                    contract_rep: &e.rep,
                    type_rep: Some(&self.type_rep),
                    target: self.target,
                    top_n: 1,
                    variant,
                    exclude_contract: Some(&e.example.contract.id),
                };
                let top = self.retriever.retrieve(&q)?;
                let cand = top.into_iter().next().map(|r| r.clause.tokens).unwrap_or_default();
                Ok((cand, reference.to_vec()))
            })
            .collect()
    }

    pub fn retrieval(&self, variant: Variant) -> Result<(RougeScores, usize)> {
        let pairs = self.retrieved(variant)?;
        let n = pairs.len();
        Ok((
            evaluate_generation(pairs.iter().map(|(c, r)| (c.as_slice(), r.as_slice())))?,
            n,
        ))
    }

    pub fn generation(
        &self,
        model: &DecoderModel,
        max_len: usize,
        decoding: &Decoding,
    ) -> Result<(RougeScores, usize)> {
        let pairs = self
            .relevant_test()
            .map(|(e, reference)| {
                let memory = condition(&e.rep, &self.type_rep)?;
                let out = model.generate(&memory, max_len, decoding)?;
                let tokens: Vec<String> = out.text.split_whitespace().map(String::from).collect();
                Ok((tokens, reference.to_vec()))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = pairs.len();
        Ok((
            evaluate_generation(pairs.iter().map(|(c, r)| (c.as_slice(), r.as_slice())))?,
            n,
        ))
    }
}
