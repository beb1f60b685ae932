//! Per-type binary relevance classifier over contract representations.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Method, RelevanceDecision};
use crate::corpus::{ClauseTypeId, ProxyExample};
use crate::encoder::{contract_rep, ContractRep, Embedding, Encoder};
use crate::error::{Error, Result};
use crate::nn::{Adam, Linear, ModelArtifact, ParamStore, Tape, Tensor, Var};

pub const CLASSIFIER_KIND: &str = "relevance-classifier";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    /// Hidden widths; the network has `hidden.len() + 1` linear layers.
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-accuracy improvement before stopping.
    pub patience: usize,
    /// Start the output layer at zero so an untrained model predicts 0.5.
    pub zero_init_output: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: vec![512, 256, 128, 64, 32, 16],
            dropout: 0.3,
            batch_size: 64,
            max_epochs: 5000,
            patience: 50,
            zero_init_output: false,
        }
    }
}

/// A contract representation with its relevance label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRep {
    pub rep: Embedding,
    pub label: bool,
}

/// Encodes proxy examples (target clauses already removed).
pub fn classifier_examples(enc: &dyn Encoder, examples: &[ProxyExample]) -> Result<Vec<LabeledRep>> {
    examples
        .iter()
        .map(|e| {
            Ok(LabeledRep {
                rep: contract_rep(enc, &e.contract)?.0,
                label: e.relevance.is_relevant(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub lr: f64,
    pub train_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    /// 1-based epoch of the kept checkpoint.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Stored alongside the weights so the architecture can be rebuilt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub lr: f64,
    pub best_val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct ClassifierModel {
    input_dim: usize,
    hidden: Vec<usize>,
    dropout: f64,
    store: ParamStore,
    layers: Vec<Linear>,
}

impl ClassifierModel {
    pub fn new(input_dim: usize, cfg: &ClassifierConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(cfg.hidden.len() + 1);
        let mut width = input_dim;
        for (i, &h) in cfg.hidden.iter().enumerate() {
            layers.push(Linear::new(&mut store, &format!("fc{i}"), width, h, rng));
            width = h;
        }
        let name = format!("fc{}", cfg.hidden.len());
        layers.push(if cfg.zero_init_output {
            Linear::zeroed(&mut store, &name, width, 1)
        } else {
            Linear::new(&mut store, &name, width, 1, rng)
        });
        ClassifierModel {
            input_dim,
            hidden: cfg.hidden.clone(),
            dropout: cfg.dropout,
            store,
            layers,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Logits `[batch, 1]` for inputs `[batch, input_dim]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last {
                h = tape.relu(h);
                h = tape.dropout(h, self.dropout);
            }
        }
        Ok(h)
    }

    fn batch(&self, reps: &[&Embedding]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(reps.len() * self.input_dim);
        for r in reps {
            if r.dim() != self.input_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.input_dim,
                    actual: r.dim(),
                });
            }
            data.extend_from_slice(r.as_slice());
        }
        Tensor::new(vec![reps.len(), self.input_dim], data)
    }

    pub fn probabilities(&self, reps: &[&Embedding]) -> Result<Vec<f64>> {
        if reps.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.batch(reps)?;
        let mut tape = Tape::eval(&self.store);
        let xv = tape.constant(x);
        let z = self.forward(&mut tape, xv)?;
        let p = tape.sigmoid(z);
        Ok(tape.value(p).to_vec())
    }

    pub fn probability(&self, rep: &Embedding) -> Result<f64> {
        Ok(self.probabilities(&[rep])?[0])
    }

    /// Relevant iff the probability is strictly above 0.5 and the type is
    /// not already present.
    pub fn predict(&self, rep: &ContractRep, target: ClauseTypeId, present: bool) -> Result<RelevanceDecision> {
        let p = self.probability(&rep.0)?;
        Ok(decision(p, target, present))
    }

    pub fn to_artifact(
        &self,
        encoder_fingerprint: &str,
        lr: f64,
        best_val_accuracy: f64,
    ) -> ModelArtifact<ClassifierMeta> {
        ModelArtifact::new(
            CLASSIFIER_KIND,
            encoder_fingerprint,
            self.input_dim,
            ClassifierMeta {
                hidden: self.hidden.clone(),
                dropout: self.dropout,
                lr,
                best_val_accuracy,
            },
            self.store.to_named(),
        )
    }

    pub fn from_artifact(art: &ModelArtifact<ClassifierMeta>) -> Result<Self> {
        let cfg = ClassifierConfig {
            hidden: art.config.hidden.clone(),
            dropout: art.config.dropout,
            ..ClassifierConfig::default()
        };
        let mut model = ClassifierModel::new(art.input_dim, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        model.store.load_named(&art.params)?;
        Ok(model)
    }
}

pub fn decision(p: f64, target: ClauseTypeId, present: bool) -> RelevanceDecision {
    RelevanceDecision {
        target,
        method: Method::Classifier,
        score: p,
        relevant: p > 0.5 && !present,
        threshold_used: Some(0.5),
        k_used: None,
    }
}

fn accuracy(model: &ClassifierModel, data: &[LabeledRep]) -> Result<f64> {
    let reps: Vec<&Embedding> = data.iter().map(|d| &d.rep).collect();
    let probs = model.probabilities(&reps)?;
    let correct = probs.iter().zip(data).filter(|(p, d)| (**p > 0.5) == d.label).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Trains with Adam at `lr` on shuffled mini-batches, keeping the weights
/// of the epoch with the best validation accuracy.
pub fn train_classifier(
    train: &[LabeledRep],
    validation: &[LabeledRep],
    cfg: &ClassifierConfig,
    lr: f64,
    seed: u64,
) -> Result<(ClassifierModel, TrainHistory)> {
    if train.is_empty() {
        return Err(Error::Empty("classifier training set"));
    }
    if validation.is_empty() {
        return Err(Error::Empty("classifier validation set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let dim = train[0].rep.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ClassifierModel::new(dim, cfg, &mut rng);
    let mut adam = Adam::new(lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory {
        lr,
        train_loss: Vec::new(),
        val_accuracy: Vec::new(),
        best_epoch: 0,
        best_val_accuracy: f64::NEG_INFINITY,
    };
    let mut best = model.store.clone();
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let reps: Vec<&Embedding> = chunk.iter().map(|&i| &train[i].rep).collect();
            let targets: Vec<f64> = chunk.iter().map(|&i| train[i].label as u8 as f64).collect();
            let x = model.batch(&reps)?;
            let grads = {
                let mut tape = Tape::train(&model.store, &mut rng);
                let xv = tape.constant(x);
                let z = model.forward(&mut tape, xv)?;
                let loss = tape.bce_with_logits(z, &targets)?;
                loss_sum += tape.scalar(loss) * chunk.len() as f64;
                tape.backward(loss)?
            };
            model.store.accumulate(&grads);
            adam.step(&mut model.store);
        }
        history.train_loss.push(loss_sum / train.len() as f64);

        let acc = accuracy(&model, validation)?;
        history.val_accuracy.push(acc);
        if acc > history.best_val_accuracy {
            history.best_val_accuracy = acc;
            history.best_epoch = epoch;
            best = model.store.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    model.store = best;
    tracing::debug!(
        lr,
        best_epoch = history.best_epoch,
        acc = history.best_val_accuracy,
        "classifier trained"
    );
    Ok((model, history))
}

/// Trains one model per learning rate and keeps the one with the best
/// validation accuracy (earliest rate on ties).
pub fn train_classifier_sweep(
    train: &[LabeledRep],
    validation: &[LabeledRep],
    cfg: &ClassifierConfig,
    lrs: &[f64],
    seed: u64,
) -> Result<(ClassifierModel, TrainHistory, Vec<TrainHistory>)> {
    let mut best: Option<(ClassifierModel, TrainHistory)> = None;
    let mut all = Vec::with_capacity(lrs.len());
    for &lr in lrs {
        let (model, hist) = train_classifier(train, validation, cfg, lr, seed)?;
        all.push(hist.clone());
        if best
            .as_ref()
            .is_none_or(|(_, b)| hist.best_val_accuracy > b.best_val_accuracy)
        {
            best = Some((model, hist));
        }
    }
    let (model, hist) = best.ok_or_else(|| Error::InvalidArgument("empty learning-rate list".into()))?;
    Ok((model, hist, all))
}
