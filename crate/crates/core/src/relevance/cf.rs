//! Item-item collaborative filtering over the binary contract × type matrix.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Method, RelevanceDecision};
use crate::corpus::{ClauseTypeId, Contract};
use crate::error::{Error, Result};

/// Below this magnitude the CF denominator is treated as zero.
pub const CF_DENOMINATOR_EPS: f64 = 1e-12;

/// Binary incidence matrix: `r(u, i) = 1` iff contract `u` has a clause of type `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidenceMatrix {
    contract_ids: Vec<String>,
    n_types: usize,
    cells: Vec<f64>,
    row_means: Vec<f64>,
    col_means: Vec<f64>,
}

impl IncidenceMatrix {
    /// One row per contract, one column per type id in `0..n_types`.
    pub fn build<'a, I>(contracts: I, n_types: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Contract>,
    {
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for c in contracts {
            ids.push(c.id.clone());
            rows.push(incidence_row(&c.type_set(), n_types));
        }
        Self::from_rows(ids, &rows)
    }

    pub fn from_rows(contract_ids: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("incidence matrix"));
        }
        if contract_ids.len() != rows.len() {
            return Err(Error::DimensionMismatch {
                expected: rows.len(),
                actual: contract_ids.len(),
            });
        }
        let n_types = rows[0].len();
        if let Some(bad) = rows.iter().find(|r| r.len() != n_types) {
            return Err(Error::DimensionMismatch {
                expected: n_types,
                actual: bad.len(),
            });
        }
        let mut m = IncidenceMatrix {
            contract_ids,
            n_types,
            cells: rows.concat(),
            row_means: Vec::new(),
            col_means: Vec::new(),
        };
        m.recompute_means();
        Ok(m)
    }

    fn recompute_means(&mut self) {
        let (rows, cols) = (self.n_rows(), self.n_types);
        self.row_means = self
            .cells
            .chunks(cols.max(1))
            .map(|r| {
                if cols == 0 {
                    0.0
                } else {
                    r.iter().sum::<f64>() / cols as f64
                }
            })
            .collect();
        self.col_means = (0..cols)
            .map(|i| (0..rows).map(|u| self.cells[u * cols + i]).sum::<f64>() / rows as f64)
            .collect();
    }

    /// Sets one cell and refreshes the cached means.
    pub fn set(&mut self, u: usize, i: usize, value: f64) {
        self.cells[u * self.n_types + i] = value;
        self.recompute_means();
    }

    pub fn n_rows(&self) -> usize {
        self.contract_ids.len()
    }

    pub fn n_types(&self) -> usize {
        self.n_types
    }

    pub fn contract_ids(&self) -> &[String] {
        &self.contract_ids
    }

    pub fn cell(&self, u: usize, i: usize) -> f64 {
        self.cells[u * self.n_types + i]
    }

    pub fn row(&self, u: usize) -> &[f64] {
        &self.cells[u * self.n_types..(u + 1) * self.n_types]
    }

    pub fn row_of(&self, id: &str) -> Option<&[f64]> {
        self.contract_ids.iter().position(|c| c == id).map(|u| self.row(u))
    }

    pub fn row_mean(&self, u: usize) -> f64 {
        self.row_means[u]
    }

    pub fn col_mean(&self, i: usize) -> f64 {
        self.col_means[i]
    }

    pub fn col_means(&self) -> &[f64] {
        &self.col_means
    }
}

/// Incidence row for a contract outside the matrix.
pub fn incidence_row(types: &BTreeSet<ClauseTypeId>, n_types: usize) -> Vec<f64> {
    let mut row = vec![0.0; n_types];
    for t in types {
        if t.index() < n_types {
            row[t.index()] = 1.0;
        }
    }
    row
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityMode {
    /// `Σ_u (r_ui - r̄_u)(r_uj - r̄_j) / (√Σ_u r_ui² · √Σ_u r_uj²)`
    #[default]
    AsPrinted,
    /// `Σ_u (r_ui - r̄_u)(r_uj - r̄_u) / (√Σ_u (r_ui - r̄_u)² · √Σ_u (r_uj - r̄_u)²)`
    StandardAdjusted,
}

impl std::str::FromStr for SimilarityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as-printed" => Ok(SimilarityMode::AsPrinted),
            "standard-adjusted" => Ok(SimilarityMode::StandardAdjusted),
            other => Err(Error::InvalidArgument(format!("unknown similarity mode {other:?}"))),
        }
    }
}

/// Dense type × type similarity table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemSimilarityMatrix {
    pub mode: SimilarityMode,
    n: usize,
    sim: Vec<f64>,
}

impl ItemSimilarityMatrix {
    pub fn build(m: &IncidenceMatrix, mode: SimilarityMode) -> Self {
        let n = m.n_types();
        let rows = m.n_rows();
        let mut sim = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut num = 0.0;
                let mut di = 0.0;
                let mut dj = 0.0;
                for u in 0..rows {
                    let (ri, rj, ru) = (m.cell(u, i), m.cell(u, j), m.row_mean(u));
                    match mode {
                        SimilarityMode::AsPrinted => {
                            num += (ri - ru) * (rj - m.col_mean(j));
                            di += ri * ri;
                            dj += rj * rj;
                        }
                        SimilarityMode::StandardAdjusted => {
                            num += (ri - ru) * (rj - ru);
                            di += (ri - ru) * (ri - ru);
                            dj += (rj - ru) * (rj - ru);
                        }
                    }
                }
                let den = di.sqrt() * dj.sqrt();
                sim[i * n + j] = if den == 0.0 { 0.0 } else { num / den };
            }
        }
        ItemSimilarityMatrix { mode, n, sim }
    }

    pub fn n_types(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.sim[i * self.n + j]
    }
}

/// Predicted affinity of a contract with incidence `row` for type `t`:
/// `Σ_{j≠t} sim(t,j)(r_uj - r̄_j) / Σ_{j≠t} sim(t,j) + r̄_t`, or `r̄_t` when
/// the similarity mass vanishes.
pub fn cf_score(m: &IncidenceMatrix, s: &ItemSimilarityMatrix, row: &[f64], t: ClauseTypeId) -> Result<f64> {
    let n = m.n_types();
    if s.n_types() != n || row.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: if s.n_types() != n { s.n_types() } else { row.len() },
        });
    }
    let ti = t.index();
    if ti >= n {
        return Err(Error::UnknownClauseType(format!("#{}", t.0)));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for j in (0..n).filter(|&j| j != ti) {
        let w = s.get(ti, j);
        num += w * (row[j] - m.col_mean(j));
        den += w;
    }
    if den.abs() < CF_DENOMINATOR_EPS {
        return Ok(m.col_mean(ti));
    }
    Ok(num / den + m.col_mean(ti))
}

/// [`cf_score`] for a contract that is a row of the matrix.
pub fn cf_score_for(m: &IncidenceMatrix, s: &ItemSimilarityMatrix, contract_id: &str, t: ClauseTypeId) -> Result<f64> {
    let row = m
        .row_of(contract_id)
        .ok_or_else(|| Error::UnknownContract(contract_id.to_string()))?;
    cf_score(m, s, row, t)
}

/// Relevant iff the score clears `threshold` and the type is not already present.
pub fn cf_predict(score: f64, threshold: f64, target: ClauseTypeId, present: bool) -> RelevanceDecision {
    RelevanceDecision {
        target,
        method: Method::Cf,
        score,
        relevant: score > threshold && !present,
        threshold_used: Some(threshold),
        k_used: None,
    }
}

/// Scores every type absent from `present` for one query row.
pub fn cf_scores_absent(
    m: &IncidenceMatrix,
    s: &ItemSimilarityMatrix,
    present: &BTreeSet<ClauseTypeId>,
) -> Result<BTreeMap<ClauseTypeId, f64>> {
    let row = incidence_row(present, m.n_types());
    (0..m.n_types() as u32)
        .map(ClauseTypeId)
        .filter(|t| !present.contains(t))
        .map(|t| cf_score(m, s, &row, t).map(|v| (t, v)))
        .collect()
}
