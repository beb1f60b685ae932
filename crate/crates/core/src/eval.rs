//! Classification metrics, ROUGE, and report rows.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn from_pairs<I: IntoIterator<Item = (bool, bool)>>(pairs: I) -> Self {
        let mut c = ConfusionCounts::default();
        for (p, a) in pairs {
            c.record(p, a);
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn metrics(&self) -> ClassificationMetrics {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        ClassificationMetrics {
            precision,
            recall,
            accuracy: ratio(self.tp + self.tn, self.total()),
            f1: harmonic(precision, recall),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub f1: f64,
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(hits: usize, candidate: usize, reference: usize) -> Self {
        let precision = if candidate == 0 {
            0.0
        } else {
            hits as f64 / candidate as f64
        };
        let recall = if reference == 0 {
            0.0
        } else {
            hits as f64 / reference as f64
        };
        Prf {
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1: Prf,
    pub rouge2: Prf,
    #[serde(rename = "rougeL")]
    pub rouge_l: Prf,
}

impl RougeScores {
    /// Component-wise mean.
    pub fn mean(scores: &[RougeScores]) -> Result<RougeScores> {
        if scores.is_empty() {
            return Err(Error::Empty("ROUGE score list"));
        }
        let n = scores.len() as f64;
        let avg = |f: fn(&RougeScores) -> Prf| {
            let (mut p, mut r, mut f1) = (0.0, 0.0, 0.0);
            for s in scores {
                let x = f(s);
                p += x.precision;
                r += x.recall;
                f1 += x.f1;
            }
            Prf {
                precision: p / n,
                recall: r / n,
                f1: f1 / n,
            }
        };
        Ok(RougeScores {
            rouge1: avg(|s| s.rouge1),
            rouge2: avg(|s| s.rouge2),
            rouge_l: avg(|s| s.rouge_l),
        })
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap.
fn rouge_n(candidate: &[String], reference: &[String], n: usize) -> Prf {
    let c = ngram_counts(candidate, n);
    let r = ngram_counts(reference, n);
    let hits = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    Prf::from_counts(hits, c.values().sum(), r.values().sum())
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-1, ROUGE-2 and sentence-level ROUGE-L of a candidate token stream
/// against a reference. Either side empty yields all zeros.
pub fn rouge(candidate: &[String], reference: &[String]) -> RougeScores {
    if candidate.is_empty() || reference.is_empty() {
        return RougeScores::default();
    }
    RougeScores {
        rouge1: rouge_n(candidate, reference, 1),
        rouge2: rouge_n(candidate, reference, 2),
        rouge_l: Prf::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len()),
    }
}

/// Mean ROUGE over `(candidate, reference)` pairs.
pub fn evaluate_generation<'a, I>(pairs: I) -> Result<RougeScores>
where
    I: IntoIterator<Item = (&'a [String], &'a [String])>,
{
    let scores: Vec<RougeScores> = pairs.into_iter().map(|(c, r)| rouge(c, r)).collect();
    if scores.is_empty() {
        return Err(Error::Empty("test split"));
    }
    RougeScores::mean(&scores)
}

/// Confusion counts over `(predicted, actual)` pairs.
pub fn evaluate_relevance<I>(pairs: I) -> Result<ConfusionCounts>
where
    I: IntoIterator<Item = (bool, bool)>,
{
    let c = ConfusionCounts::from_pairs(pairs);
    if c.total() == 0 {
        return Err(Error::Empty("test split"));
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Relevance,
    Generation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Metrics {
    Relevance {
        #[serde(flatten)]
        metrics: ClassificationMetrics,
        #[serde(flatten)]
        counts: ConfusionCounts,
    },
    Generation {
        #[serde(flatten)]
        scores: RougeScores,
        n: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: Task,
    pub clause_type: String,
    pub method: String,
    pub metrics: Metrics,
    pub config_fingerprint: String,
}

impl ReportRow {
    pub fn relevance(clause_type: &str, method: &str, counts: ConfusionCounts, fingerprint: &str) -> Self {
        ReportRow {
            task: Task::Relevance,
            clause_type: clause_type.to_string(),
            method: method.to_string(),
            metrics: Metrics::Relevance {
                metrics: counts.metrics(),
                counts,
            },
            config_fingerprint: fingerprint.to_string(),
        }
    }

    pub fn generation(clause_type: &str, method: &str, scores: RougeScores, n: usize, fingerprint: &str) -> Self {
        ReportRow {
            task: Task::Generation,
            clause_type: clause_type.to_string(),
            method: method.to_string(),
            metrics: Metrics::Generation { scores, n },
            config_fingerprint: fingerprint.to_string(),
        }
    }
}

/// Rows serialized one JSON object per line.
pub fn report_jsonl(rows: &[ReportRow]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Aligned text tables: one for relevance rows, one for generation rows.
pub fn report_table(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    let rel: Vec<_> = rows.iter().filter(|r| r.task == Task::Relevance).collect();
    let gen: Vec<_> = rows.iter().filter(|r| r.task == Task::Generation).collect();
    if !rel.is_empty() {
        let _ = writeln!(
            out,
            "{:<24} {:<12} {:>6} {:>6} {:>6} {:>6}",
            "clause type", "method", "prec", "rec", "acc", "f1"
        );
        for r in rel {
            if let Metrics::Relevance { metrics: m, .. } = &r.metrics {
                let _ = writeln!(
                    out,
                    "{:<24} {:<12} {:>6.3} {:>6.3} {:>6.3} {:>6.3}",
                    r.clause_type, r.method, m.precision, m.recall, m.accuracy, m.f1
                );
            }
        }
    }
    if !gen.is_empty() {
        if !out.is_empty() {
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "{:<24} {:<16} {:>8} {:>8} {:>8}",
            "clause type", "method", "rouge-1", "rouge-2", "rouge-l"
        );
        for r in gen {
            if let Metrics::Generation { scores: s, .. } = &r.metrics {
                let _ = writeln!(
                    out,
                    "{:<24} {:<16} {:>8.3} {:>8.3} {:>8.3}",
                    r.clause_type, r.method, s.rouge1.f1, s.rouge2.f1, s.rouge_l.f1
                );
            }
        }
    }
    out
}
