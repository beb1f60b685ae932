//! Relevance from the clause types of the most similar known contracts.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Method, RelevanceDecision};
use crate::corpus::{ClauseTypeId, Contract};
use crate::encoder::{contract_rep, cosine, ContractRep, Embedding, Encoder};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    id: String,
    rep: Embedding,
    types: BTreeSet<ClauseTypeId>,
}

/// Contract representations with their type sets, sorted by contract id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DocSimIndex {
    pub encoder_fingerprint: String,
    entries: Vec<IndexEntry>,
}

impl DocSimIndex {
    /// Contracts without any encodable clause, or whose representation is
    /// the zero vector, cannot be compared and are left out.
    pub fn build<'a, I>(enc: &dyn Encoder, contracts: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Contract>,
    {
        let mut entries = Vec::new();
        for c in contracts {
            let rep = match contract_rep(enc, c) {
                Ok(r) => r.0,
                Err(Error::EmptyContract(_)) => continue,
                Err(e) => return Err(e),
            };
            if rep.norm() == 0.0 {
                continue;
            }
            entries.push(IndexEntry {
                id: c.id.clone(),
                rep,
                types: c.type_set(),
            });
        }
        Ok(Self::from_entries(enc.fingerprint(), entries))
    }

    /// Index over precomputed `(id, rep, types)` triples.
    pub fn from_reps<I>(encoder_fingerprint: String, reps: I) -> Self
    where
        I: IntoIterator<Item = (String, Embedding, BTreeSet<ClauseTypeId>)>,
    {
        let entries = reps
            .into_iter()
            .filter(|(_, rep, _)| rep.norm() > 0.0)
            .map(|(id, rep, types)| IndexEntry { id, rep, types })
            .collect();
        Self::from_entries(encoder_fingerprint, entries)
    }

    fn from_entries(encoder_fingerprint: String, mut entries: Vec<IndexEntry>) -> Self {
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        DocSimIndex {
            encoder_fingerprint,
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The `k` most similar contracts as `(id, similarity, types)`, by
    /// descending cosine with ties broken by ascending id.
    pub fn neighbors(&self, query: &ContractRep, k: usize) -> Result<Vec<(&str, f64, &BTreeSet<ClauseTypeId>)>> {
        if self.entries.is_empty() {
            return Err(Error::Empty("document similarity index"));
        }
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let mut scored = self
            .entries
            .iter()
            .map(|e| cosine(&query.0, &e.rep).map(|s| (e, s)))
            .collect::<Result<Vec<_>>>()?;
        // entries are already in id order, so a stable sort keeps ties by id
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        scored.truncate(k);
        Ok(scored.into_iter().map(|(e, s)| (e.id.as_str(), s, &e.types)).collect())
    }

    /// Relevant iff `target` occurs in any of the `k` nearest contracts and
    /// not in the query. The score is the best similarity among neighbors
    /// containing `target`, or 0.
    pub fn predict(
        &self,
        query: &ContractRep,
        present: &BTreeSet<ClauseTypeId>,
        target: ClauseTypeId,
        k: usize,
    ) -> Result<RelevanceDecision> {
        let neighbors = self.neighbors(query, k)?;
        Ok(decide(&neighbors, present, target, k))
    }

    /// Decisions for many targets from one neighbor search.
    pub fn predict_many(
        &self,
        query: &ContractRep,
        present: &BTreeSet<ClauseTypeId>,
        targets: &[ClauseTypeId],
        k: usize,
    ) -> Result<Vec<RelevanceDecision>> {
        let neighbors = self.neighbors(query, k)?;
        Ok(targets.iter().map(|&t| decide(&neighbors, present, t, k)).collect())
    }
}

fn decide(
    neighbors: &[(&str, f64, &BTreeSet<ClauseTypeId>)],
    present: &BTreeSet<ClauseTypeId>,
    target: ClauseTypeId,
    k: usize,
) -> RelevanceDecision {
    let best = neighbors
        .iter()
        .filter(|(_, _, types)| types.contains(&target))
        .map(|(_, s, _)| *s)
        .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))));
    RelevanceDecision {
        target,
        method: Method::Docsim,
        score: best.unwrap_or(0.0),
        relevant: best.is_some() && !present.contains(&target),
        threshold_used: None,
        k_used: Some(k),
    }
}
