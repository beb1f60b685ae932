//! Clause-type relevance: is a target type missing from a contract one that
//! the contract should have?
//!
//! Three predictors share one decision record: item-item collaborative
//! filtering over the contract/type incidence matrix ([`cf`]), nearest
//! contracts by representation ([`docsim`]) and a per-type MLP
//! ([`classifier`]).

pub mod cf;
pub mod classifier;
pub mod docsim;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::ClauseTypeId;
use crate::error::Error;

pub use cf::{
    cf_predict, cf_score, cf_scores_absent, incidence_row, IncidenceMatrix, ItemSimilarityMatrix, SimilarityMode,
};
pub use classifier::{
    classifier_examples, train_classifier, train_classifier_sweep, ClassifierConfig, ClassifierMeta, ClassifierModel,
    LabeledRep, TrainHistory, CLASSIFIER_KIND,
};
pub use docsim::DocSimIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cf,
    Docsim,
    Classifier,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Cf, Method::Docsim, Method::Classifier];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cf => "cf",
            Method::Docsim => "docsim",
            Method::Classifier => "classifier",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim() {
            "cf" => Ok(Method::Cf),
            "docsim" => Ok(Method::Docsim),
            "classifier" => Ok(Method::Classifier),
            other => Err(Error::InvalidArgument(format!(
                "unknown relevance method {other:?} (expected cf, docsim or classifier)"
            ))),
        }
    }
}

/// One method's verdict on one target type for one contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceDecision {
    pub target: ClauseTypeId,
    pub method: Method,
    pub score: f64,
    pub relevant: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold_used: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_used: Option<usize>,
}
