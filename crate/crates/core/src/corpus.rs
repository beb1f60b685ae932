//! Contract corpora: ingestion, clause normalization, the clause library and
//! the proxy datasets used to train and evaluate both pipeline stages.
//!
//! Two input layouts are accepted:
//!
//! - contract-grouped JSONL, one contract per line:
//!   `{"id": "c1", "clauses": [{"label": "Notices", "text": "..."}]}`
//! - clause-level JSONL, one clause per line, grouped by `contract_id`:
//!   `{"contract_id": "c1", "label": "Notices", "text": "..."}`
//!
//! Labels are lowercased and whitespace-collapsed. A clause whose token stream
//! is empty after [`preprocess`] is dropped and counted in the
//! [`IngestReport`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense handle of a clause type within one corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClauseTypeId(pub u32);

impl ClauseTypeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Bijection between normalized clause labels and dense ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct ClauseTypes {
    labels: Vec<String>,
    by_label: BTreeMap<String, ClauseTypeId>,
}

impl From<Vec<String>> for ClauseTypes {
    fn from(labels: Vec<String>) -> Self {
        let mut types = ClauseTypes {
            labels,
            by_label: BTreeMap::new(),
        };
        types.reindex();
        types
    }
}

impl From<ClauseTypes> for Vec<String> {
    fn from(types: ClauseTypes) -> Self {
        types.labels
    }
}

impl ClauseTypes {
    /// Builds the registry from a set of labels; ids follow sorted label order.
    pub fn from_labels<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = labels
            .into_iter()
            .map(|l| normalize_label(l.as_ref()))
            .filter(|l| !l.is_empty())
            .collect();
        ClauseTypes::from(set.into_iter().collect::<Vec<_>>())
    }

    fn reindex(&mut self) {
        self.by_label = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), ClauseTypeId(i as u32)))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Looks up a label after normalizing it.
    pub fn id(&self, label: &str) -> Option<ClauseTypeId> {
        self.by_label.get(&normalize_label(label)).copied()
    }

    pub fn require(&self, label: &str) -> Result<ClauseTypeId> {
        self.id(label)
            .ok_or_else(|| Error::UnknownClauseType(label.to_string()))
    }

    pub fn label(&self, id: ClauseTypeId) -> &str {
        &self.labels[id.index()]
    }

    pub fn ids(&self) -> impl Iterator<Item = ClauseTypeId> + '_ {
        (0..self.labels.len() as u32).map(ClauseTypeId)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// A single clause: its type, raw text and preprocessed tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clause {
    pub kind: ClauseTypeId,
    pub text: String,
    pub tokens: Vec<String>,
}

impl Clause {
    pub fn new(kind: ClauseTypeId, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = preprocess(&text);
        Clause { kind, text, tokens }
    }

    /// Whitespace-joined token stream; used for deduplication.
    pub fn normalized_text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contract {
    pub id: String,
    pub clauses: Vec<Clause>,
}

impl Contract {
    pub fn has_type(&self, kind: ClauseTypeId) -> bool {
        self.clauses.iter().any(|c| c.kind == kind)
    }

    pub fn type_set(&self) -> BTreeSet<ClauseTypeId> {
        self.clauses.iter().map(|c| c.kind).collect()
    }
}

/// An ingested corpus: contracts sorted by id plus their label registry.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub types: ClauseTypes,
    pub contracts: Vec<Contract>,
}

impl Corpus {
    pub fn contract(&self, id: &str) -> Option<&Contract> {
        self.contracts
            .binary_search_by(|c| c.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.contracts[i])
    }

    /// Builds a corpus from `(contract id, [(label, text)])` records, applying
    /// the same normalization and dropping rules as file ingestion.
    pub fn from_records<I>(records: I) -> Result<(Corpus, IngestReport)>
    where
        I: IntoIterator<Item = RawContract>,
    {
        assemble(records.into_iter().enumerate().map(|(i, r)| (i + 1, r)))
    }

    pub fn len(&self) -> usize {
        self.contracts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contracts.is_empty()
    }
}

/// Counts of records discarded during ingestion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub dropped_clauses: usize,
    pub dropped_contracts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    JsonlContracts,
    JsonlClauses,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl-contracts" => Ok(CorpusFormat::JsonlContracts),
            "jsonl-clauses" => Ok(CorpusFormat::JsonlClauses),
            other => Err(Error::InvalidArgument(format!("unknown corpus format {other:?}"))),
        }
    }
}

/// Labels may be a single string or, LEDGAR-style, a list; only the first is kept.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum LabelField {
    One(String),
    Many(Vec<String>),
}

impl LabelField {
    fn first(self) -> Option<String> {
        match self {
            LabelField::One(s) => Some(s),
            LabelField::Many(v) => v.into_iter().next(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct RawClause {
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct RawContract {
    pub id: String,
    pub clauses: Vec<RawClause>,
}

#[derive(Deserialize)]
struct ContractLine {
    id: String,
    clauses: Vec<ClauseLine>,
}

#[derive(Deserialize)]
struct ClauseLine {
    label: LabelField,
    text: String,
}

#[derive(Deserialize)]
struct FlatClauseLine {
    contract_id: String,
    label: LabelField,
    text: String,
}

/// Result of [`ingest`].
#[derive(Debug, Clone)]
pub struct Ingested {
    pub corpus: Corpus,
    pub library: ClauseLibrary,
    pub report: IngestReport,
}

/// Reads a corpus file and builds its clause library.
pub fn ingest(path: &Path, format: CorpusFormat) -> Result<Ingested> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let (corpus, report) = read_corpus(BufReader::new(file), format)?;
    if report.dropped_clauses > 0 || report.dropped_contracts > 0 {
        tracing::warn!(
            dropped_clauses = report.dropped_clauses,
            dropped_contracts = report.dropped_contracts,
            "dropped records with empty token streams"
        );
    }
    let library = ClauseLibrary::build(&corpus);
    Ok(Ingested {
        corpus,
        library,
        report,
    })
}

/// Parses a corpus from any reader.
pub fn read_corpus<R: BufRead>(reader: R, format: CorpusFormat) -> Result<(Corpus, IngestReport)> {
    match format {
        CorpusFormat::JsonlContracts => {
            let mut records = Vec::new();
            let mut seen = BTreeSet::new();
            for (line_no, line) in numbered_lines(reader) {
                let line = line?;
                let parsed: ContractLine = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                    line: line_no,
                    message: e.to_string(),
                })?;
                if !seen.insert(parsed.id.clone()) {
                    return Err(Error::DuplicateContract {
                        line: line_no,
                        id: parsed.id,
                    });
                }
                let clauses = parsed
                    .clauses
                    .into_iter()
                    .map(|c| raw_clause(line_no, c.label, c.text))
                    .collect::<Result<Vec<_>>>()?;
                records.push((line_no, RawContract { id: parsed.id, clauses }));
            }
            assemble(records)
        }
        CorpusFormat::JsonlClauses => {
            let mut grouped: BTreeMap<String, (usize, Vec<RawClause>)> = BTreeMap::new();
            for (line_no, line) in numbered_lines(reader) {
                let line = line?;
                let parsed: FlatClauseLine = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                    line: line_no,
                    message: e.to_string(),
                })?;
                let clause = raw_clause(line_no, parsed.label, parsed.text)?;
                grouped
                    .entry(parsed.contract_id)
                    .or_insert_with(|| (line_no, Vec::new()))
                    .1
                    .push(clause);
            }
            assemble(
                grouped
                    .into_iter()
                    .map(|(id, (line, clauses))| (line, RawContract { id, clauses })),
            )
        }
    }
}

fn raw_clause(line: usize, label: LabelField, text: String) -> Result<RawClause> {
    let label = label
        .first()
        .map(|l| normalize_label(&l))
        .filter(|l| !l.is_empty())
        .ok_or_else(|| Error::MalformedLine {
            line,
            message: "clause label is empty".into(),
        })?;
    Ok(RawClause { label, text })
}

/// Yields `(1-based line number, line)` skipping blank lines.
fn numbered_lines<R: BufRead>(reader: R) -> impl Iterator<Item = (usize, Result<String>)> {
    reader
        .lines()
        .enumerate()
        .map(|(i, l)| {
            (
                i + 1,
                l.map_err(|e| Error::MalformedLine {
                    line: i + 1,
                    message: e.to_string(),
                }),
            )
        })
        .filter(|(_, l)| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true))
}

fn assemble<I>(records: I) -> Result<(Corpus, IngestReport)>
where
    I: IntoIterator<Item = (usize, RawContract)>,
{
    let mut report = IngestReport::default();
    let mut kept: BTreeMap<String, Vec<(String, String, Vec<String>)>> = BTreeMap::new();
    for (line, raw) in records {
        if kept.contains_key(&raw.id) {
            return Err(Error::DuplicateContract { line, id: raw.id });
        }
        let mut clauses = Vec::with_capacity(raw.clauses.len());
        for c in raw.clauses {
            let label = normalize_label(&c.label);
            if label.is_empty() {
                return Err(Error::MalformedLine {
                    line,
                    message: "clause label is empty".into(),
                });
            }
            let tokens = preprocess(&c.text);
            if tokens.is_empty() {
                report.dropped_clauses += 1;
                continue;
            }
            clauses.push((label, c.text, tokens));
        }
        if clauses.is_empty() {
            report.dropped_contracts += 1;
            continue;
        }
        kept.insert(raw.id, clauses);
    }

    let types = ClauseTypes::from_labels(kept.values().flatten().map(|(l, _, _)| l.as_str()));
    let contracts = kept
        .into_iter()
        .map(|(id, clauses)| Contract {
            id,
            clauses: clauses
                .into_iter()
                .map(|(label, text, tokens)| Clause {
                    kind: types.id(&label).expect("label registered above"),
                    text,
                    tokens,
                })
                .collect(),
        })
        .collect();
    Ok((Corpus { types, contracts }, report))
}

/// Writes the corpus as contract-grouped JSONL.
pub fn write_corpus<W: Write>(corpus: &Corpus, mut out: W) -> Result<()> {
    for c in &corpus.contracts {
        let raw = to_raw(&corpus.types, c);
        serde_json::to_writer(&mut out, &raw)?;
        out.write_all(b"\n").map_err(|e| Error::io("<corpus writer>", e))?;
    }
    Ok(())
}

pub fn to_raw(types: &ClauseTypes, contract: &Contract) -> RawContract {
    RawContract {
        id: contract.id.clone(),
        clauses: contract
            .clauses
            .iter()
            .map(|cl| RawClause {
                label: types.label(cl.kind).to_string(),
                text: cl.text.clone(),
            })
            .collect(),
    }
}

pub fn normalize_label(label: &str) -> String {
    label
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn punctuation() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\p{P}").expect("valid regex"))
}

/// Lowercases, strips every Unicode punctuation character (general category
/// `P*`, hyphens included), splits on whitespace and drops one-character
/// tokens.
pub fn preprocess(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let stripped = punctuation().replace_all(&lowered, "");
    stripped
        .split_whitespace()
        .filter(|t| t.chars().count() > 1)
        .map(str::to_string)
        .collect()
}

/// One clause in the library, with its provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LibraryEntry {
    pub contract_id: String,
    pub clause_index: usize,
    pub clause: Clause,
}

/// Every clause of a corpus indexed by type.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClauseLibrary {
    by_type: BTreeMap<ClauseTypeId, Vec<LibraryEntry>>,
}

impl ClauseLibrary {
    pub fn build(corpus: &Corpus) -> Self {
        Self::from_contracts(&corpus.contracts)
    }

    pub fn from_contracts<'a, I>(contracts: I) -> Self
    where
        I: IntoIterator<Item = &'a Contract>,
    {
        let mut by_type: BTreeMap<ClauseTypeId, Vec<LibraryEntry>> = BTreeMap::new();
        for c in contracts {
            for (i, clause) in c.clauses.iter().enumerate() {
                by_type.entry(clause.kind).or_default().push(LibraryEntry {
                    contract_id: c.id.clone(),
                    clause_index: i,
                    clause: clause.clone(),
                });
            }
        }
        for entries in by_type.values_mut() {
            entries.sort_by(|a, b| {
                (a.contract_id.as_str(), a.clause_index).cmp(&(b.contract_id.as_str(), b.clause_index))
            });
        }
        ClauseLibrary { by_type }
    }

    pub fn entries(&self, kind: ClauseTypeId) -> &[LibraryEntry] {
        self.by_type.get(&kind).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn types(&self) -> impl Iterator<Item = ClauseTypeId> + '_ {
        self.by_type.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LibraryEntry> {
        self.by_type.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.by_type.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_type.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relevance {
    Relevant,
    NotRelevant,
}

impl Relevance {
    pub fn is_relevant(self) -> bool {
        self == Relevance::Relevant
    }
}

/// A supervised example manufactured from a corpus contract.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProxyExample {
    /// The contract with every clause of the target type removed.
    pub contract: Contract,
    pub target: ClauseTypeId,
    pub relevance: Relevance,
    /// First removed clause in document order; set iff relevant.
    pub held_out: Option<Clause>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Train,
    Validation,
    Test,
}

impl fmt::Display for SplitPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitPart::Train => "train",
            SplitPart::Validation => "validation",
            SplitPart::Test => "test",
        })
    }
}

/// Train/validation/test partition of the proxy examples for one target type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub target: ClauseTypeId,
    pub seed: u64,
    pub train: Vec<ProxyExample>,
    pub validation: Vec<ProxyExample>,
    pub test: Vec<ProxyExample>,
}

impl DatasetSplit {
    pub fn part(&self, part: SplitPart) -> &[ProxyExample] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Validation => &self.validation,
            SplitPart::Test => &self.test,
        }
    }

    pub fn parts(&self) -> impl Iterator<Item = (SplitPart, &ProxyExample)> {
        [SplitPart::Train, SplitPart::Validation, SplitPart::Test]
            .into_iter()
            .flat_map(move |p| self.part(p).iter().map(move |e| (p, e)))
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Contract ids held out from training (validation and test).
    pub fn held_out_ids(&self) -> BTreeSet<&str> {
        self.validation
            .iter()
            .chain(&self.test)
            .map(|e| e.contract.id.as_str())
            .collect()
    }
}

/// Builds the balanced relevant / not-relevant proxy dataset for `target`.
///
/// Relevant examples come from contracts containing the target with all of
/// its clauses removed; contracts consisting only of target clauses cannot be
/// represented and are skipped. The not-relevant class is a seeded uniform
/// sample of contracts lacking the target. The larger class is truncated so
/// the classes match exactly, then examples are split 60/20/20 by contract.
pub fn build_proxy_dataset(corpus: &Corpus, target: ClauseTypeId, seed: u64) -> Result<DatasetSplit> {
    let label = corpus
        .types
        .labels()
        .get(target.index())
        .cloned()
        .ok_or_else(|| Error::UnknownClauseType(format!("#{}", target.0)))?;

    let mut relevant = Vec::new();
    let mut absent = Vec::new();
    for c in &corpus.contracts {
        if c.has_type(target) {
            let held_out = c.clauses.iter().find(|cl| cl.kind == target).cloned();
            let remaining: Vec<Clause> = c.clauses.iter().filter(|cl| cl.kind != target).cloned().collect();
            if remaining.is_empty() {
                continue;
            }
            relevant.push(ProxyExample {
                contract: Contract {
                    id: c.id.clone(),
                    clauses: remaining,
                },
                target,
                relevance: Relevance::Relevant,
                held_out,
            });
        } else {
            absent.push(ProxyExample {
                contract: c.clone(),
                target,
                relevance: Relevance::NotRelevant,
                held_out: None,
            });
        }
    }

    for (class, found) in [("relevant", relevant.len()), ("not_relevant", absent.len())] {
        if found < 2 {
            return Err(Error::InsufficientContracts {
                target: label,
                class,
                needed: 2,
                found,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    relevant.shuffle(&mut rng);
    absent.shuffle(&mut rng);
    let n = relevant.len().min(absent.len());
    relevant.truncate(n);
    absent.truncate(n);

    let mut examples = Vec::with_capacity(2 * n);
    for (r, a) in relevant.into_iter().zip(absent) {
        examples.push(r);
        examples.push(a);
    }
    let total = examples.len();
    let train_end = total * 3 / 5;
    let val_end = total * 4 / 5;
    let test = examples.split_off(val_end);
    let validation = examples.split_off(train_end);
    Ok(DatasetSplit {
        target,
        seed,
        train: examples,
        validation,
        test,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ProxyRecord {
    Header {
        target: String,
        seed: u64,
        train: usize,
        validation: usize,
        test: usize,
    },
    Example {
        split: SplitPart,
        relevance: Relevance,
        contract: RawContract,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        held_out: Option<RawClause>,
    },
}

/// Persists a split as JSONL: one header record, then one record per example.
pub fn write_proxy_dataset<W: Write>(types: &ClauseTypes, split: &DatasetSplit, mut out: W) -> Result<()> {
    let header = ProxyRecord::Header {
        target: types.label(split.target).to_string(),
        seed: split.seed,
        train: split.train.len(),
        validation: split.validation.len(),
        test: split.test.len(),
    };
    let mut emit = |rec: &ProxyRecord| -> Result<()> {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n").map_err(|e| Error::io("<proxy writer>", e))
    };
    emit(&header)?;
    for (part, ex) in split.parts() {
        emit(&ProxyRecord::Example {
            split: part,
            relevance: ex.relevance,
            contract: to_raw(types, &ex.contract),
            held_out: ex.held_out.as_ref().map(|c| RawClause {
                label: types.label(c.kind).to_string(),
                text: c.text.clone(),
            }),
        })?;
    }
    Ok(())
}

pub fn read_proxy_dataset<R: BufRead>(types: &ClauseTypes, reader: R) -> Result<DatasetSplit> {
    let mut lines = numbered_lines(reader);
    let (line_no, first) = lines.next().ok_or(Error::Empty("proxy dataset"))?;
    let header: ProxyRecord = serde_json::from_str(&first?).map_err(|e| Error::MalformedLine {
        line: line_no,
        message: e.to_string(),
    })?;
    let ProxyRecord::Header { target, seed, .. } = header else {
        return Err(Error::MalformedLine {
            line: line_no,
            message: "first record must be the header".into(),
        });
    };
    let target = types.require(&target)?;
    let mut split = DatasetSplit {
        target,
        seed,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (line_no, line) in lines {
        let rec: ProxyRecord = serde_json::from_str(&line?).map_err(|e| Error::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        let ProxyRecord::Example {
            split: part,
            relevance,
            contract,
            held_out,
        } = rec
        else {
            return Err(Error::MalformedLine {
                line: line_no,
                message: "duplicate header".into(),
            });
        };
        let to_clause = |raw: RawClause| -> Result<Clause> { Ok(Clause::new(types.require(&raw.label)?, raw.text)) };
        let example = ProxyExample {
            contract: Contract {
                id: contract.id,
                clauses: contract.clauses.into_iter().map(to_clause).collect::<Result<_>>()?,
            },
            target,
            relevance,
            held_out: held_out.map(to_clause).transpose()?,
        };
        match part {
            SplitPart::Train => split.train.push(example),
            SplitPart::Validation => split.validation.push(example),
            SplitPart::Test => split.test.push(example),
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(s: &str) -> Result<(Corpus, IngestReport)> {
        read_corpus(s.as_bytes(), CorpusFormat::JsonlContracts)
    }

    #[test]
    fn preprocess_examples() {
        assert_eq!(
            preprocess("This  Agreement, shall govern."),
            vec!["this", "agreement", "shall", "govern"]
        );
        assert!(preprocess("").is_empty());
        // hyphen is Pd, so it is stripped before the single-letter filter
        assert_eq!(preprocess("A b c-d"), vec!["cd"]);
    }

    #[test]
    fn preprocess_keeps_symbols_and_unicode_letters() {
        assert_eq!(preprocess("Fee: $500 «Société»"), vec!["fee", "$500", "société"]);
    }

    #[test]
    fn single_record() {
        let (corpus, _) = parse(r#"{"id":"c1","clauses":[{"label":"Notices","text":"Any notice ..."}]}"#).unwrap();
        assert_eq!(corpus.contracts.len(), 1);
        let lib = ClauseLibrary::build(&corpus);
        let notices = corpus.types.id("notices").unwrap();
        assert_eq!(lib.entries(notices).len(), 1);
    }

    #[test]
    fn empty_file() {
        let (corpus, report) = parse("").unwrap();
        assert!(corpus.is_empty());
        assert!(ClauseLibrary::build(&corpus).is_empty());
        assert_eq!(report, IngestReport::default());
    }

    #[test]
    fn duplicate_id_reports_second_line() {
        let text = concat!(
            r#"{"id":"c1","clauses":[{"label":"a","text":"first one"}]}"#,
            "\n",
            r#"{"id":"c1","clauses":[{"label":"a","text":"second one"}]}"#,
            "\n"
        );
        match parse(text) {
            Err(Error::DuplicateContract { line, id }) => {
                assert_eq!(line, 2);
                assert_eq!(id, "c1");
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_number() {
        let text = "{\"id\":\"c1\",\"clauses\":[]}\n{not json\n";
        match parse(text) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn labels_normalized_and_empty_clauses_dropped() {
        let text = r#"{"id":"c1","clauses":[{"label":"  Governing   LAWS ","text":"Delaware law governs"},{"label":"x","text":"a . ,"}]}"#;
        let (corpus, report) = parse(text).unwrap();
        assert_eq!(corpus.types.labels(), ["governing laws"]);
        assert_eq!(report.dropped_clauses, 1);
        assert_eq!(corpus.contracts[0].clauses.len(), 1);
    }

    #[test]
    fn clause_level_adapter_groups_and_keeps_first_label() {
        let text = concat!(
            r#"{"contract_id":"b","label":["Notices","Other"],"text":"notice text here"}"#,
            "\n",
            r#"{"contract_id":"a","label":"Severability","text":"severable provisions"}"#,
            "\n",
            r#"{"contract_id":"b","label":"Waivers","text":"no waiver shall"}"#,
            "\n"
        );
        let (corpus, _) = read_corpus(text.as_bytes(), CorpusFormat::JsonlClauses).unwrap();
        let ids: Vec<_> = corpus.contracts.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        let b = corpus.contract("b").unwrap();
        assert_eq!(corpus.types.label(b.clauses[0].kind), "notices");
        assert_eq!(corpus.types.label(b.clauses[1].kind), "waivers");
    }

    fn corpus_with(n_with: usize, n_without: usize) -> Corpus {
        let mut records = Vec::new();
        for i in 0..n_with {
            records.push(RawContract {
                id: format!("w{i:03}"),
                clauses: vec![
                    RawClause {
                        label: "alpha".into(),
                        text: format!("alpha clause {i}"),
                    },
                    RawClause {
                        label: "target".into(),
                        text: format!("target clause one {i}"),
                    },
                    RawClause {
                        label: "beta".into(),
                        text: "beta clause".into(),
                    },
                    RawClause {
                        label: "target".into(),
                        text: "target clause two".into(),
                    },
                ],
            });
        }
        for i in 0..n_without {
            records.push(RawContract {
                id: format!("o{i:03}"),
                clauses: vec![RawClause {
                    label: "alpha".into(),
                    text: format!("alpha only {i}"),
                }],
            });
        }
        Corpus::from_records(records).unwrap().0
    }

    #[test]
    fn proxy_dataset_balance_and_split() {
        let corpus = corpus_with(10, 30);
        let target = corpus.types.id("target").unwrap();
        let split = build_proxy_dataset(&corpus, target, 7).unwrap();
        assert_eq!(
            (split.train.len(), split.validation.len(), split.test.len()),
            (12, 4, 4)
        );
        let relevant = split.parts().filter(|(_, e)| e.relevance.is_relevant()).count();
        assert_eq!(relevant, 10);

        for (_, e) in split.parts() {
            assert!(!e.contract.has_type(target));
            match e.relevance {
                Relevance::Relevant => {
                    let held = e.held_out.as_ref().unwrap();
                    assert_eq!(held.kind, target);
                    assert!(held.text.starts_with("target clause one"));
                    assert_eq!(e.contract.clauses.len(), 2);
                }
                Relevance::NotRelevant => assert!(e.held_out.is_none()),
            }
        }

        let again = build_proxy_dataset(&corpus, target, 7).unwrap();
        assert_eq!(split, again);
        let other = build_proxy_dataset(&corpus, target, 8).unwrap();
        assert_ne!(split, other);
    }

    #[test]
    fn removing_single_target_clause_from_five() {
        let mut records = vec![RawContract {
            id: "five".into(),
            clauses: ["aa", "bb", "target", "cc", "dd"]
                .iter()
                .map(|l| RawClause {
                    label: l.to_string(),
                    text: format!("{l} text body"),
                })
                .collect(),
        }];
        records.push(RawContract {
            id: "six".into(),
            clauses: vec![
                RawClause {
                    label: "aa".into(),
                    text: "aa text".into(),
                },
                RawClause {
                    label: "target".into(),
                    text: "target text".into(),
                },
            ],
        });
        for i in 0..2 {
            records.push(RawContract {
                id: format!("z{i}"),
                clauses: vec![RawClause {
                    label: "aa".into(),
                    text: "aa text".into(),
                }],
            });
        }
        let corpus = Corpus::from_records(records).unwrap().0;
        let target = corpus.types.id("target").unwrap();
        let split = build_proxy_dataset(&corpus, target, 1).unwrap();
        let five = split.parts().find(|(_, e)| e.contract.id == "five").unwrap().1;
        assert_eq!(five.contract.clauses.len(), 4);
    }

    #[test]
    fn insufficient_class_is_named() {
        let corpus = corpus_with(1, 5);
        let target = corpus.types.id("target").unwrap();
        match build_proxy_dataset(&corpus, target, 0) {
            Err(Error::InsufficientContracts { class, found, .. }) => {
                assert_eq!(class, "relevant");
                assert_eq!(found, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
        let corpus = corpus_with(5, 1);
        match build_proxy_dataset(&corpus, target, 0) {
            Err(Error::InsufficientContracts { class, .. }) => assert_eq!(class, "not_relevant"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn proxy_dataset_persistence_round_trip() {
        let corpus = corpus_with(6, 9);
        let target = corpus.types.id("target").unwrap();
        let split = build_proxy_dataset(&corpus, target, 3).unwrap();
        let mut buf = Vec::new();
        write_proxy_dataset(&corpus.types, &split, &mut buf).unwrap();
        let first: serde_json::Value =
            serde_json::from_str(std::str::from_utf8(&buf).unwrap().lines().next().unwrap()).unwrap();
        assert_eq!(first["record"], "header");
        assert_eq!(first["seed"], 3);
        assert_eq!(first["target"], "target");
        let back = read_proxy_dataset(&corpus.types, buf.as_slice()).unwrap();
        assert_eq!(back, split);
    }

    fn arb_contracts() -> impl Strategy<Value = Vec<RawContract>> {
        let clause = ("[A-Za-z ]{1,12}", "[a-zA-Z,.;: -]{0,40}").prop_map(|(label, text)| RawClause { label, text });
        prop::collection::btree_map("[a-z0-9]{1,6}", prop::collection::vec(clause, 0..5), 0..8)
            .prop_map(|m| m.into_iter().map(|(id, clauses)| RawContract { id, clauses }).collect())
    }

    proptest! {
        #[test]
        fn preprocess_idempotent(s in "\\PC{0,60}") {
            let once = preprocess(&s);
            let twice = preprocess(&once.join(" "));
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn serialize_reingest_round_trip(records in arb_contracts()) {
            let mut text = Vec::new();
            for r in &records {
                serde_json::to_writer(&mut text, r).unwrap();
                text.push(b'\n');
            }
            let parsed = read_corpus(text.as_slice(), CorpusFormat::JsonlContracts);
            // all-whitespace labels are rejected up front
            prop_assume!(parsed.is_ok());
            let (corpus, _) = parsed.unwrap();
            let mut out = Vec::new();
            write_corpus(&corpus, &mut out).unwrap();
            let (again, report) = read_corpus(out.as_slice(), CorpusFormat::JsonlContracts).unwrap();
            prop_assert_eq!(report, IngestReport::default());
            prop_assert_eq!(again, corpus);
        }

        #[test]
        fn split_partitions_sampled_ids(n_with in 2usize..25, n_without in 2usize..25, seed in 0u64..1000) {
            let corpus = corpus_with(n_with, n_without);
            let target = corpus.types.id("target").unwrap();
            let split = build_proxy_dataset(&corpus, target, seed).unwrap();
            let n = n_with.min(n_without);
            prop_assert_eq!(split.len(), 2 * n);
            let ids = |p: &[ProxyExample]| p.iter().map(|e| e.contract.id.clone()).collect::<BTreeSet<_>>();
            let (tr, va, te) = (ids(&split.train), ids(&split.validation), ids(&split.test));
            prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
            prop_assert_eq!(tr.len() + va.len() + te.len(), 2 * n);
            let total = (2 * n) as f64;
            prop_assert!((split.train.len() as f64 - 0.6 * total).abs() <= 1.0);
            prop_assert!((split.validation.len() as f64 - 0.2 * total).abs() <= 1.0);
            prop_assert!((split.test.len() as f64 - 0.2 * total).abs() <= 1.0);
        }
    }
}
