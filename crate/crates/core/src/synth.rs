//! Seeded synthetic corpus with planted clause-type co-occurrence.
//!
//! Contracts come from four families. The target type appears in every
//! contract of the first two families and never in the others. Four
//! companion types track it closely and the remaining types occur at the
//! same rate everywhere. Every clause carries family vocabulary so contract
//! representations separate by family. Target clauses are mostly the
//! standard wording; a minority are paraphrases built from the boilerplate
//! of other clause types, which resemble their contract more than their type.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, RawClause, RawContract};
use crate::error::Result;

pub const SYNTH_TARGET: &str = "governing laws";

pub const SYNTH_TYPES: [&str; 12] = [
    "governing laws",
    "notices",
    "counterparts",
    "severability",
    "entire agreements",
    "confidentiality",
    "indemnification",
    "termination",
    "assignments",
    "amendments",
    "waivers",
    "definitions",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub contracts: usize,
    pub seed: u64,
    /// Share of target clauses written as boilerplate paraphrases.
    pub paraphrase_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            contracts: 200,
            seed: 17,
            paraphrase_rate: 0.25,
        }
    }
}

struct Family {
    name: &'static str,
    parties: [&'static str; 2],
    words: [&'static str; 6],
    has_target: bool,
}

const FAMILIES: [Family; 4] = [
    Family {
        name: "employment",
        parties: ["employee", "employer"],
        words: ["salary", "bonus", "position", "duties", "vacation", "payroll"],
        has_target: true,
    },
    Family {
        name: "loan",
        parties: ["borrower", "lender"],
        words: [
            "principal",
            "interest",
            "repayment",
            "collateral",
            "advance",
            "maturity",
        ],
        has_target: true,
    },
    Family {
        name: "lease",
        parties: ["tenant", "landlord"],
        words: ["premises", "rent", "property", "occupancy", "utilities", "parking"],
        has_target: false,
    },
    Family {
        name: "services",
        parties: ["customer", "provider"],
        words: ["deliverables", "invoice", "fees", "milestones", "support", "hosting"],
        has_target: false,
    },
];

const STATES: [&str; 8] = [
    "delaware",
    "new york",
    "california",
    "texas",
    "illinois",
    "ohio",
    "nevada",
    "florida",
];

/// Probability that a contract of a target-bearing (first) or other
/// (second) family contains each non-target type.
fn presence(label: &str) -> (f64, f64) {
    match label {
        "notices" | "counterparts" | "severability" | "entire agreements" => (1.0, 0.15),
        _ => (0.35, 0.35),
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, items: &'a [&'a str]) -> &'a str {
    items.choose(rng).copied().expect("nonempty word list")
}

fn family_phrase(rng: &mut ChaCha8Rng, fam: &Family, n: usize) -> String {
    (0..n).map(|_| pick(rng, &fam.words)).collect::<Vec<_>>().join(" ")
}

fn target_clause(rng: &mut ChaCha8Rng, fam: &Family, paraphrase_rate: f64) -> String {
    let state = pick(rng, &STATES);
    let [a, b] = fam.parties;
    if rng.random_bool(paraphrase_rate) {
        let p = family_phrase(rng, fam, 2);
        format!(
            "no amendment or waiver of any provision on {p} binding the {a} and the {b} is effective unless in writing and all notices and provisions remain subject to {state} law"
        )
    } else {
        let tail = pick(
            rng,
            &[
                "without regard to conflicts of law principles",
                "without giving effect to any choice of law rules",
                "excluding its conflict of laws provisions",
            ],
        );
        let verb = pick(
            rng,
            &[
                "governed by and construed",
                "governed by and interpreted",
                "construed and enforced",
            ],
        );
        let w = pick(rng, &fam.words);
        format!(
            "this agreement shall be {verb} in accordance with the laws of the state of {state} {tail} and the {a} and {b} submit to the courts of {state} for any {w} dispute"
        )
    }
}

fn other_clause(rng: &mut ChaCha8Rng, label: &str, fam: &Family) -> String {
    let [a, b] = fam.parties;
    let p = family_phrase(rng, fam, 2);
    match label {
        "notices" => format!(
            "all notices between the {a} and the {b} regarding {p} shall be in writing and delivered by {} to the address on record",
            pick(rng, &["hand", "registered mail", "courier", "email"])
        ),
        "counterparts" => format!(
            "this agreement concerning {p} may be executed in {} counterparts by the {a} and the {b} each of which is an original",
            pick(rng, &["several", "multiple", "any number of"])
        ),
        "severability" => format!(
            "if any provision on {p} is held invalid or unenforceable the remaining provisions binding the {a} and the {b} remain in full force"
        ),
        "entire agreements" => format!(
            "this agreement constitutes the entire understanding of the {a} and the {b} about {p} and supersedes all prior {} agreements",
            pick(rng, &["oral", "written", "oral or written"])
        ),
        "confidentiality" => format!(
            "the {a} shall keep confidential all information of the {b} relating to {p} and shall not disclose it for {} years",
            pick(rng, &["two", "three", "five"])
        ),
        "indemnification" => format!(
            "the {a} shall indemnify and hold harmless the {b} against all losses arising from {p} and any breach of this agreement"
        ),
        "termination" => format!(
            "either the {a} or the {b} may terminate this agreement on {} days written notice and all {p} obligations then cease",
            pick(rng, &["thirty", "sixty", "ninety"])
        ),
        "assignments" => format!(
            "neither the {a} nor the {b} may assign any rights concerning {p} without the prior written consent of the other"
        ),
        "amendments" => format!(
            "no amendment to the terms on {p} is effective unless in writing and signed by the {a} and the {b}"
        ),
        "waivers" => format!(
            "no failure by the {b} to enforce any {p} term against the {a} operates as a waiver of that term"
        ),
        _ => format!(
            "capitalized terms such as {p} used by the {a} and the {b} have the meanings set out in this section"
        ),
    }
}

/// Raw records for the synthetic corpus; contracts are assigned to families
/// round-robin so the families stay balanced.
pub fn synthetic_records(cfg: &SynthConfig) -> Vec<RawContract> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.contracts)
        .map(|i| {
            let fam = &FAMILIES[i % FAMILIES.len()];
            let mut clauses = Vec::new();
            for label in SYNTH_TYPES {
                let text = if label == SYNTH_TARGET {
                    if !fam.has_target {
                        continue;
                    }
                    target_clause(&mut rng, fam, cfg.paraphrase_rate)
                } else {
                    let (with, without) = presence(label);
                    let p = if fam.has_target { with } else { without };
                    if !rng.random_bool(p) {
                        continue;
                    }
                    other_clause(&mut rng, label, fam)
                };
                clauses.push(RawClause {
                    label: label.to_string(),
                    text,
                });
            }
            clauses.shuffle(&mut rng);
            if clauses.is_empty() || clauses.iter().all(|c| c.label == SYNTH_TARGET) {
                clauses.push(RawClause {
                    label: "definitions".to_string(),
                    text: other_clause(&mut rng, "definitions", fam),
                });
            }
            RawContract {
                id: format!("{}-{i:03}", fam.name),
                clauses,
            }
        })
        .collect()
}

pub fn synthetic_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    Ok(Corpus::from_records(synthetic_records(cfg))?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_is_planted_by_family() {
        let corpus = synthetic_corpus(&SynthConfig::default()).unwrap();
        assert_eq!(corpus.len(), 200);
        assert_eq!(corpus.types.len(), 12);
        let t = corpus.types.require(SYNTH_TARGET).unwrap();
        for c in &corpus.contracts {
            let planted = c.id.starts_with("employment") || c.id.starts_with("loan");
            assert_eq!(c.has_type(t), planted, "{}", c.id);
            assert!(c.clauses.iter().any(|cl| cl.kind != t));
        }
    }

    #[test]
    fn seeded() {
        let cfg = SynthConfig::default();
        assert_eq!(synthetic_records(&cfg), synthetic_records(&cfg));
        let other = SynthConfig { seed: 3, ..cfg };
        assert_ne!(synthetic_records(&cfg), synthetic_records(&other));
    }
}
