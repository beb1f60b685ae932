//! Clause content recommendation by exhaustive similarity search over the
//! clause library of the target type.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Clause, ClauseLibrary, ClauseTypeId};
use crate::encoder::{ClauseTypeRep, ContractRep, Embedding, Encoder};
use crate::error::{Error, Result};

pub const DEFAULT_TOP_N: usize = 5;

/// Which vector is compared against candidate clauses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// The contract representation alone.
    #[default]
    #[serde(rename = "i")]
    CtOnly,
    /// Elementwise mean of the contract and target-type representations.
    #[serde(rename = "ii")]
    CtPlusType,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::CtOnly => "i",
            Variant::CtPlusType => "ii",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i" | "ct_only" => Ok(Variant::CtOnly),
            "ii" | "ct_plus_type" => Ok(Variant::CtPlusType),
            other => Err(Error::InvalidArgument(format!(
                "unknown retrieval variant {other:?} (expected i or ii)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetrievalQuery<'a> {
    pub contract_rep: &'a ContractRep,
    pub type_rep: Option<&'a ClauseTypeRep>,
    pub target: ClauseTypeId,
    pub top_n: usize,
    pub variant: Variant,
    /// Clauses originating from this contract are not candidates.
    pub exclude_contract: Option<&'a str>,
}

impl RetrievalQuery<'_> {
    pub fn vector(&self) -> Result<Embedding> {
        let v = match self.variant {
            Variant::CtOnly => self.contract_rep.0.clone(),
            Variant::CtPlusType => {
                let t = self
                    .type_rep
                    .ok_or_else(|| Error::InvalidArgument("variant ii needs a clause-type representation".into()))?;
                self.contract_rep.0.midpoint(&t.values)?
            }
        };
        if v.norm() == 0.0 {
            return Err(Error::ZeroVector);
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedClause {
    pub clause: Clause,
    pub score: f64,
    pub source_contract: String,
    pub clause_index: usize,
    /// 1-based.
    pub rank: usize,
}

/// A clause library with every clause embedded once.
#[derive(Debug, Clone)]
pub struct Retriever {
    lib: ClauseLibrary,
    embeddings: BTreeMap<ClauseTypeId, Vec<Embedding>>,
}

impl Retriever {
    pub fn build(enc: &dyn Encoder, lib: ClauseLibrary) -> Result<Self> {
        let mut embeddings = BTreeMap::new();
        for t in lib.types() {
            let clauses: Vec<&Clause> = lib.entries(t).iter().map(|e| &e.clause).collect();
            embeddings.insert(t, enc.encode_batch(&clauses)?);
        }
        Ok(Retriever { lib, embeddings })
    }

    /// `embeddings[t][i]` belongs to `lib.entries(t)[i]`.
    pub fn from_parts(lib: ClauseLibrary, embeddings: BTreeMap<ClauseTypeId, Vec<Embedding>>) -> Result<Self> {
        for t in lib.types() {
            let have = embeddings.get(&t).map_or(0, Vec::len);
            if have != lib.entries(t).len() {
                return Err(Error::DimensionMismatch {
                    expected: lib.entries(t).len(),
                    actual: have,
                });
            }
        }
        Ok(Retriever { lib, embeddings })
    }

    pub fn library(&self) -> &ClauseLibrary {
        &self.lib
    }

    pub fn retrieve(&self, q: &RetrievalQuery) -> Result<Vec<RankedClause>> {
        let entries = self.lib.entries(q.target);
        let embeddings = self.embeddings.get(&q.target).map(Vec::as_slice).unwrap_or(&[]);
        rank(q, entries, embeddings)
    }
}

/// One-shot retrieval that embeds only the target type's library clauses.
pub fn retrieve(q: &RetrievalQuery, lib: &ClauseLibrary, enc: &dyn Encoder) -> Result<Vec<RankedClause>> {
    let entries = lib.entries(q.target);
    let clauses: Vec<&Clause> = entries.iter().map(|e| &e.clause).collect();
    let embeddings = if clauses.is_empty() {
        Vec::new()
    } else {
        enc.encode_batch(&clauses)?
    };
    rank(q, entries, &embeddings)
}

fn rank(
    q: &RetrievalQuery,
    entries: &[crate::corpus::LibraryEntry],
    embeddings: &[Embedding],
) -> Result<Vec<RankedClause>> {
    if entries.is_empty() {
        return Err(Error::UnknownClauseType(format!(
            "no library clauses of type #{}",
            q.target.0
        )));
    }
    if q.top_n == 0 {
        return Err(Error::InvalidArgument("top_n must be at least 1".into()));
    }
    let v = q.vector()?;
    let vn = v.norm();
    let mut scored = Vec::with_capacity(entries.len());
    for (entry, emb) in entries.iter().zip(embeddings) {
        if q.exclude_contract == Some(entry.contract_id.as_str()) {
            continue;
        }
        if emb.dim() != v.dim() {
            return Err(Error::DimensionMismatch {
                expected: v.dim(),
                actual: emb.dim(),
            });
        }
        let en = emb.norm();
        let score = if en == 0.0 {
            0.0
        } else {
            let dot: f64 = v.0.iter().zip(&emb.0).map(|(a, b)| a * b).sum();
            (dot / (vn * en)).clamp(-1.0, 1.0)
        };
        scored.push((entry, score));
    }
    // library entries are stored in (contract, index) order, so a stable
    // sort on score alone applies the documented tie-break
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));

    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(q.top_n);
    for (entry, score) in scored {
        if !seen.insert(entry.clause.normalized_text()) {
            continue;
        }
        out.push(RankedClause {
            clause: entry.clause.clone(),
            score,
            source_contract: entry.contract_id.clone(),
            clause_index: entry.clause_index,
            rank: out.len() + 1,
        });
        if out.len() == q.top_n {
            break;
        }
    }
    Ok(out)
}
