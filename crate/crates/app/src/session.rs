//! Authoring sessions: a working contract, a revision counter and the
//! mutation log that reproduces it.

use clauserec_core::corpus::{normalize_label, Clause, ClauseTypeId, ClauseTypes, Contract};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Mutation {
    AddClause { label: String, text: String },
    RemoveClause { index: usize },
    Accept { label: String, text: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    /// Revision the mutation produced.
    pub revision: u64,
    #[serde(flatten)]
    pub mutation: Mutation,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SessionError {
    #[error("stale revision {given}; session is at revision {current}")]
    Conflict { given: u64, current: u64 },
    #[error("unknown clause type {0:?}")]
    UnknownType(String),
    #[error("clause text has no tokens after preprocessing")]
    EmptyClause,
    #[error("no clause at index {index} (contract has {len})")]
    NoSuchClause { index: usize, len: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub contract: Contract,
    pub revision: u64,
    pub log: Vec<LogEntry>,
}

impl Session {
    pub fn new(id: impl Into<String>) -> Self {
        Session {
            contract: Contract {
                id: id.into(),
                clauses: Vec::new(),
            },
            revision: 0,
            log: Vec::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.contract.id
    }

    fn clause(types: &ClauseTypes, label: &str, text: &str) -> Result<Clause, SessionError> {
        let kind: ClauseTypeId = types
            .id(&normalize_label(label))
            .ok_or_else(|| SessionError::UnknownType(label.to_string()))?;
        let clause = Clause::new(kind, text);
        if clause.tokens.is_empty() {
            return Err(SessionError::EmptyClause);
        }
        Ok(clause)
    }

    /// Applies `m` if `expected` is the current revision.
    pub fn apply(&mut self, types: &ClauseTypes, expected: u64, m: Mutation) -> Result<u64, SessionError> {
        if expected != self.revision {
            return Err(SessionError::Conflict {
                given: expected,
                current: self.revision,
            });
        }
        match &m {
            Mutation::AddClause { label, text } | Mutation::Accept { label, text } => {
                let clause = Self::clause(types, label, text)?;
                self.contract.clauses.push(clause);
            }
            Mutation::RemoveClause { index } => {
                let len = self.contract.clauses.len();
                if *index >= len {
                    return Err(SessionError::NoSuchClause { index: *index, len });
                }
                self.contract.clauses.remove(*index);
            }
        }
        self.revision += 1;
        self.log.push(LogEntry {
            revision: self.revision,
            mutation: m,
        });
        Ok(self.revision)
    }

    /// Rebuilds a session by applying a mutation log from an empty contract.
    pub fn replay(id: &str, types: &ClauseTypes, log: &[LogEntry]) -> Result<Session, SessionError> {
        let mut s = Session::new(id);
        for entry in log {
            let rev = s.apply(types, s.revision, entry.mutation.clone())?;
            if rev != entry.revision {
                return Err(SessionError::Conflict {
                    given: entry.revision,
                    current: rev,
                });
            }
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn types() -> ClauseTypes {
        ClauseTypes::from_labels(["notices", "governing laws"])
    }

    fn add(label: &str, text: &str) -> Mutation {
        Mutation::AddClause {
            label: label.into(),
            text: text.into(),
        }
    }

    #[test]
    fn revisions_and_conflicts() {
        let t = types();
        let mut s = Session::new("s1");
        assert_eq!(s.apply(&t, 0, add("Notices", "all notices in writing")), Ok(1));
        assert_eq!(
            s.apply(&t, 0, add("notices", "again")),
            Err(SessionError::Conflict { given: 0, current: 1 })
        );
        assert_eq!(
            s.apply(&t, 1, add("warranty", "as is")),
            Err(SessionError::UnknownType("warranty".into()))
        );
        assert_eq!(s.apply(&t, 1, add("notices", "a ! b")), Err(SessionError::EmptyClause));
        assert_eq!(
            s.apply(&t, 1, Mutation::RemoveClause { index: 4 }),
            Err(SessionError::NoSuchClause { index: 4, len: 1 })
        );
        assert_eq!(s.revision, 1);
        assert_eq!(s.log.len(), 1);
    }

    #[test]
    fn replay_reconstructs_state() {
        let t = types();
        let mut s = Session::new("s9");
        s.apply(&t, 0, add("notices", "all notices in writing")).unwrap();
        s.apply(&t, 1, add("governing laws", "laws of delaware govern"))
            .unwrap();
        s.apply(&t, 2, Mutation::RemoveClause { index: 0 }).unwrap();
        s.apply(
            &t,
            3,
            Mutation::Accept {
                label: "notices".into(),
                text: "notices by courier".into(),
            },
        )
        .unwrap();
        let back = Session::replay("s9", &t, &s.log).unwrap();
        assert_eq!(back, s);

        let json = serde_json::to_string(&s.log).unwrap();
        assert!(json.contains(r#""op":"remove_clause""#));
        let log: Vec<LogEntry> = serde_json::from_str(&json).unwrap();
        assert_eq!(log, s.log);
    }
}
