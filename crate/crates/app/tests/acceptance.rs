//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Every criterion runs at its stated tolerance and time limit.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use clauserec_app::artifacts::Artifacts;
use clauserec_app::config::PipelineConfig;
use clauserec_app::models::Models;
use clauserec_app::service::{AppState, BackgroundServer};
use clauserec_app::session::{LogEntry, Session};
use clauserec_app::Pipeline;
use clauserec_core::corpus::{write_corpus, ClauseTypeId};
use clauserec_core::encoder::Embedding;
use clauserec_core::eval::{rouge, Metrics, Prf, ReportRow};
use clauserec_core::generator::{DecoderArch, DecoderModel, DecoderTrainer, Decoding, GenerationExample, Vocabulary};
use clauserec_core::nn::gradcheck::check_gradients;
use clauserec_core::nn::Tensor;
use clauserec_core::relevance::{
    cf_score, ClassifierConfig, ClassifierModel, IncidenceMatrix, ItemSimilarityMatrix, Method, SimilarityMode,
};
use clauserec_core::synth::{synthetic_corpus, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Check = Result<String>;

struct Suite {
    failed: usize,
}

impl Suite {
    fn run(&mut self, name: &str, limit: Duration, f: impl FnOnce() -> Check) {
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if took <= limit => (true, d),
            Ok(d) => (false, format!("{d}; exceeded time limit {limit:?}")),
            Err(e) => (false, format!("{e:#}")),
        };
        if !ok {
            self.failed += 1;
        }
        println!(
            "{} {name}: {detail} [{:.2}s]",
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    }
}

// ---------------------------------------------------------------------------
// Item-item CF against direct summation

#[allow(clippy::needless_range_loop)]
fn oracle_similarity(rows: &[Vec<f64>], i: usize, j: usize, mode: SimilarityMode) -> f64 {
    let n_users = rows.len();
    let n_items = rows[0].len();
    let user_mean = |u: usize| rows[u].iter().sum::<f64>() / n_items as f64;
    let item_mean = |k: usize| (0..n_users).map(|u| rows[u][k]).sum::<f64>() / n_users as f64;
    let (mut num, mut a, mut b) = (0.0, 0.0, 0.0);
    for u in 0..n_users {
        let ru = user_mean(u);
        match mode {
            SimilarityMode::AsPrinted => {
                num += (rows[u][i] - ru) * (rows[u][j] - item_mean(j));
                a += rows[u][i].powi(2);
                b += rows[u][j].powi(2);
            }
            SimilarityMode::StandardAdjusted => {
                num += (rows[u][i] - ru) * (rows[u][j] - ru);
                a += (rows[u][i] - ru).powi(2);
                b += (rows[u][j] - ru).powi(2);
            }
        }
    }
    let den = a.sqrt() * b.sqrt();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[allow(clippy::needless_range_loop)]
fn oracle_score(rows: &[Vec<f64>], query: &[f64], t: usize, mode: SimilarityMode) -> f64 {
    let n_items = rows[0].len();
    let item_mean = |k: usize| rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for j in 0..n_items {
        if j == t {
            continue;
        }
        let s = oracle_similarity(rows, t, j, mode);
        num += s * (query[j] - item_mean(j));
        den += s;
    }
    if den.abs() < 1e-12 {
        item_mean(t)
    } else {
        num / den + item_mean(t)
    }
}

fn cf_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut compared = 0usize;
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let users = rng.random_range(1..=8);
        let items = rng.random_range(2..=8);
        let bin = |rng: &mut ChaCha8Rng| if rng.random_bool(0.45) { 1.0 } else { 0.0 };
        let rows: Vec<Vec<f64>> = (0..users)
            .map(|_| (0..items).map(|_| bin(&mut rng)).collect())
            .collect();
        let query: Vec<f64> = (0..items).map(|_| bin(&mut rng)).collect();
        let ids = (0..users).map(|u| format!("c{u}")).collect();
        let m = IncidenceMatrix::from_rows(ids, &rows)?;
        for mode in [SimilarityMode::AsPrinted, SimilarityMode::StandardAdjusted] {
            let s = ItemSimilarityMatrix::build(&m, mode);
            for i in 0..items {
                for j in 0..items {
                    let d = (s.get(i, j) - oracle_similarity(&rows, i, j, mode)).abs();
                    worst = worst.max(d);
                    ensure!(d <= 1e-9, "case {case} {mode:?} sim({i},{j}) differs by {d:e}");
                    compared += 1;
                }
            }
            for q in rows.iter().chain(std::iter::once(&query)) {
                for t in 0..items {
                    let got = cf_score(&m, &s, q, ClauseTypeId(t as u32))?;
                    let d = (got - oracle_score(&rows, q, t, mode)).abs();
                    worst = worst.max(d);
                    ensure!(d <= 1e-9, "case {case} {mode:?} score(t={t}) differs by {d:e}");
                    compared += 1;
                }
            }
        }
    }
    Ok(format!(
        "{compared} values over 100 matrices, both modes, max |diff| {worst:.1e} <= 1e-9"
    ))
}

// ---------------------------------------------------------------------------
// ROUGE against brute force

fn ngrams(t: &[String], n: usize) -> Vec<&[String]> {
    if t.len() < n {
        Vec::new()
    } else {
        t.windows(n).collect()
    }
}

/// Clipped overlap by greedy removal from a list of reference n-grams.
fn oracle_hits(c: &[String], r: &[String], n: usize) -> usize {
    let mut pool = ngrams(r, n);
    let mut hits = 0;
    for g in ngrams(c, n) {
        if let Some(pos) = pool.iter().position(|x| *x == g) {
            pool.swap_remove(pos);
            hits += 1;
        }
    }
    hits
}

/// Longest common subsequence by enumerating candidate subsequences.
fn oracle_lcs(c: &[String], r: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << c.len()) {
        let sub: Vec<&String> = (0..c.len()).filter(|k| mask & (1 << k) != 0).map(|k| &c[k]).collect();
        if sub.len() <= best {
            continue;
        }
        let mut it = r.iter();
        if sub.iter().all(|w| it.any(|x| x == *w)) {
            best = sub.len();
        }
    }
    best
}

fn oracle_prf(hits: usize, cand: usize, reference: usize) -> Prf {
    let p = if cand == 0 { 0.0 } else { hits as f64 / cand as f64 };
    let r = if reference == 0 {
        0.0
    } else {
        hits as f64 / reference as f64
    };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Prf {
        precision: p,
        recall: r,
        f1: f,
    }
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn rouge_oracles() -> Check {
    let words = ["the", "cat", "sat", "on", "mat", "a", "dog"];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let pick = |rng: &mut ChaCha8Rng| {
        let len = rng.random_range(0..=12);
        (0..len)
            .map(|_| words[rng.random_range(0..words.len())].to_string())
            .collect::<Vec<_>>()
    };
    for case in 0..50 {
        let c = pick(&mut rng);
        let r = pick(&mut rng);
        let got = rouge(&c, &r);
        let (want1, want2, want_l) = if c.is_empty() || r.is_empty() {
            (Prf::default(), Prf::default(), Prf::default())
        } else {
            (
                oracle_prf(oracle_hits(&c, &r, 1), c.len(), r.len()),
                oracle_prf(
                    oracle_hits(&c, &r, 2),
                    c.len().saturating_sub(1),
                    r.len().saturating_sub(1),
                ),
                oracle_prf(oracle_lcs(&c, &r), c.len(), r.len()),
            )
        };
        ensure!(got.rouge1 == want1, "case {case} rouge-1 {:?} vs {want1:?}", got.rouge1);
        ensure!(got.rouge2 == want2, "case {case} rouge-2 {:?} vs {want2:?}", got.rouge2);
        ensure!(
            got.rouge_l == want_l,
            "case {case} rouge-l {:?} vs {want_l:?}",
            got.rouge_l
        );
    }

    // Worked by hand: "the" occurs twice in the reference.
    let s = rouge(&toks("the cat sat"), &toks("the cat sat on the mat"));
    ensure!(
        s.rouge1.precision == 1.0 && s.rouge1.recall == 0.5,
        "hand 1 rouge-1 {:?}",
        s.rouge1
    );
    ensure!((s.rouge1.f1 - 2.0 / 3.0).abs() < 1e-15, "hand 1 f1 {}", s.rouge1.f1);
    ensure!(
        s.rouge2.precision == 1.0 && s.rouge2.recall == 0.4,
        "hand 1 rouge-2 {:?}",
        s.rouge2
    );
    // Identical nonempty sequences.
    let s = rouge(&toks("aa bb cc"), &toks("aa bb cc"));
    ensure!(
        (s.rouge1.f1, s.rouge2.f1, s.rouge_l.f1) == (1.0, 1.0, 1.0),
        "hand 2 {s:?}"
    );
    // Disjoint token sets.
    let s = rouge(&toks("aa bb"), &toks("cc dd"));
    ensure!(
        (s.rouge1.f1, s.rouge2.f1, s.rouge_l.f1) == (0.0, 0.0, 0.0),
        "hand 3 {s:?}"
    );
    Ok("50 random pairs and 3 hand examples agree exactly".into())
}

// ---------------------------------------------------------------------------
// Gradient checks

fn gradient_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = ClassifierConfig {
        hidden: vec![8, 6, 4],
        ..ClassifierConfig::default()
    };
    let mlp = ClassifierModel::new(6, &cfg, &mut rng);
    let x: Vec<f64> = (0..5 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::new(vec![5, 6], x)?;
    let targets = [1.0, 0.0, 1.0, 1.0, 0.0];
    let mlp_report = check_gradients(mlp.store(), 1e-6, None, |tape| {
        let xv = tape.constant(x.clone());
        let z = mlp.forward(tape, xv)?;
        tape.bce_with_logits(z, &targets)
    })?;
    ensure!(mlp_report.max_rel_error < 1e-4, "MLP {mlp_report:?}");

    let words: Vec<String> = (0..7).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::build([words.as_slice()], 1);
    ensure!(vocab.len() == 11, "vocabulary has {} entries", vocab.len());
    let arch = DecoderArch {
        hidden: 8,
        layers: 1,
        heads: 2,
        ff_hidden: 16,
        dropout: 0.1,
    };
    let dec = DecoderModel::new(arch, 4, vocab, &mut rng)?;
    let data = [
        GenerationExample {
            memory: Embedding(vec![0.3, -0.7, 0.2, 0.9]),
            tokens: vec![4, 7, 9, 10],
        },
        GenerationExample {
            memory: Embedding(vec![-0.5, 0.1, 0.8, -0.2]),
            tokens: vec![10, 5],
        },
    ];
    let refs: Vec<&GenerationExample> = data.iter().collect();
    let dec_report = check_gradients(dec.store(), 1e-5, None, |tape| dec.batch_loss(tape, &refs))?;
    ensure!(dec_report.max_rel_error < 1e-3, "decoder {dec_report:?}");
    Ok(format!(
        "MLP max rel err {:.1e} over {} params (< 1e-4); decoder {:.1e} over {} params (< 1e-3)",
        mlp_report.max_rel_error, mlp_report.checked, dec_report.max_rel_error, dec_report.checked
    ))
}

// ---------------------------------------------------------------------------
// Decoder memorization

fn memorization() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let words: Vec<String> = (0..20).map(|i| format!("w{i:02}")).collect();
    let vocab = Vocabulary::build([words.as_slice()], 1);
    let dim = 16;
    let data: Vec<GenerationExample> = (0..50)
        .map(|_| GenerationExample {
            memory: Embedding((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()),
            tokens: (0..rng.random_range(3..=8))
                .map(|_| rng.random_range(4..vocab.len()))
                .collect(),
        })
        .collect();
    let arch = DecoderArch {
        hidden: 64,
        layers: 1,
        heads: 4,
        ff_hidden: 128,
        dropout: 0.0,
    };
    let mut model = DecoderModel::new(arch.clone(), dim, vocab.clone(), &mut rng)?;
    let mut trainer = DecoderTrainer::new(3e-3, 1);
    let refs: Vec<&GenerationExample> = data.iter().collect();
    let mut reached = None;
    let mut acc = 0.0;
    for step in 1..=2000 {
        trainer.step(&mut model, &refs)?;
        if step % 50 == 0 {
            acc = model.teacher_forced_accuracy(&data)?;
            if acc >= 0.95 {
                reached = Some(step);
                break;
            }
        }
    }
    let Some(step) = reached else {
        anyhow::bail!("teacher-forced accuracy {acc:.3} after 2000 steps");
    };

    // Control: with each memory moved to another sequence the fit must not
    // survive, or the decoder would be ignoring its conditioning.
    let mut swapped = data.clone();
    for (k, e) in swapped.iter_mut().enumerate() {
        e.memory = data[(k + 1) % data.len()].memory.clone();
    }
    let control = model.teacher_forced_accuracy(&swapped)?;
    ensure!(control < 0.5, "accuracy {control:.3} with swapped memories");

    let mut single = DecoderModel::new(arch, dim, vocab, &mut rng)?;
    let pair = &data[0];
    let mut trainer = DecoderTrainer::new(3e-3, 2);
    for _ in 0..300 {
        trainer.step(&mut single, &[pair])?;
    }
    let out = single.generate(&pair.memory, 20, &Decoding::Greedy)?;
    ensure!(
        out.ids == pair.tokens,
        "greedy output {:?} for target {:?}",
        out.ids,
        pair.tokens
    );
    Ok(format!(
        "teacher-forced accuracy {acc:.3} >= 0.95 at step {step} ({control:.3} with swapped memories); single pair reproduced exactly"
    ))
}

// ---------------------------------------------------------------------------
// Synthetic end-to-end

fn synthetic_config(work: &Path) -> Result<PipelineConfig> {
    let repo = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml");
    let mut cfg = PipelineConfig::load(&repo).with_context(|| format!("loading {}", repo.display()))?;
    let corpus = synthetic_corpus(&SynthConfig::default())?;
    let mut buf = Vec::new();
    write_corpus(&corpus, &mut buf)?;
    let path = work.join("synthetic.jsonl");
    std::fs::write(&path, buf)?;
    cfg.corpus.path = path;
    Ok(cfg)
}

fn relevance(rows: &[ReportRow], method: &str) -> Result<(f64, f64)> {
    let row = rows
        .iter()
        .find(|r| r.method == method)
        .with_context(|| format!("no {method} row"))?;
    match &row.metrics {
        Metrics::Relevance { metrics, .. } => Ok((metrics.recall, metrics.f1)),
        _ => anyhow::bail!("{method} row is not a relevance row"),
    }
}

fn rouge1(rows: &[ReportRow], method: &str) -> Result<f64> {
    let row = rows
        .iter()
        .find(|r| r.method == method)
        .with_context(|| format!("no {method} row"))?;
    match &row.metrics {
        Metrics::Generation { scores, .. } => Ok(scores.rouge1.f1),
        _ => anyhow::bail!("{method} row is not a generation row"),
    }
}

fn end_to_end(p: &Pipeline) -> Check {
    let corpus = p.load_corpus()?;
    ensure!(
        corpus.len() == 200 && corpus.types.len() == 12,
        "corpus has {} contracts, {} types",
        corpus.len(),
        corpus.types.len()
    );
    let rows = p.report_rows()?;
    let (_, clf_f1) = relevance(&rows, "classifier")?;
    let (clf_recall, _) = relevance(&rows, "classifier")?;
    let (cf_recall, _) = relevance(&rows, "cf")?;

    let mut k_recall = BTreeMap::new();
    for k in [1, 5] {
        let mut cfg = p.cfg.clone();
        cfg.methods = vec![Method::Docsim];
        cfg.generator.enabled = false;
        for t in &mut cfg.targets {
            t.docsim_k = Some(k);
        }
        let probe = Pipeline::new(cfg, p.art.clone());
        k_recall.insert(k, relevance(&probe.report_rows()?, "docsim")?.0);
    }
    let (r1, r5) = (k_recall[&1], k_recall[&5]);
    let (ri, rii) = (rouge1(&rows, "retrieval-i")?, rouge1(&rows, "retrieval-ii")?);
    let threshold = p.cfg.cf_threshold(&p.cfg.targets[0]);

    let mut failures = Vec::new();
    if clf_f1 < 0.90 {
        failures.push(format!("classifier F1 {clf_f1:.3} < 0.90"));
    }
    if r5 < r1 {
        failures.push(format!("docsim recall k=5 {r5:.3} < k=1 {r1:.3}"));
    }
    if cf_recall < clf_recall {
        failures.push(format!("cf recall {cf_recall:.3} < classifier recall {clf_recall:.3}"));
    }
    if rii < ri {
        failures.push(format!("retrieval ii ROUGE-1 {rii:.3} < i {ri:.3}"));
    }
    let summary = format!(
        "classifier F1 {clf_f1:.3}; docsim recall k=1 {r1:.3}, k=5 {r5:.3}; cf recall {cf_recall:.3} (threshold {threshold}) vs classifier {clf_recall:.3}; ROUGE-1 ii {rii:.3} vs i {ri:.3}"
    );
    ensure!(failures.is_empty(), "{}; {summary}", failures.join("; "));
    Ok(summary)
}

fn reproducibility(first: &Pipeline, work: &Path) -> Check {
    let second = Pipeline::new(first.cfg.clone(), Artifacts::new(work.join("artifacts-b")));
    second.run_all()?;
    let a = std::fs::read(first.art.report_json())?;
    let b = std::fs::read(second.art.report_json())?;
    ensure!(!a.is_empty(), "empty report");
    ensure!(a == b, "reports differ ({} vs {} bytes)", a.len(), b.len());
    Ok(format!("two independent runs wrote identical {}-byte reports", a.len()))
}

// ---------------------------------------------------------------------------
// Live service

fn service(p: &Pipeline) -> Check {
    let state = Arc::new(AppState::new(Models::load(p)?));
    let server = BackgroundServer::start(state.clone())?;
    let http = reqwest::blocking::Client::new();
    let send = |r: reqwest::blocking::RequestBuilder| -> Result<(u16, Value)> {
        let r = r.send()?;
        Ok((r.status().as_u16(), r.json()?))
    };

    let (code, created) = send(http.post(server.url("/sessions")).json(&json!({ "clauses": [
        { "type": "notices", "text": "All notices between the borrower and the lender regarding principal shall be in writing." }
    ]})))?;
    ensure!(code == 201, "create returned {code}");
    let id = created["id"].as_str().context("session id")?.to_string();

    // Present-type exclusion, before and after accepting a recommendation.
    let labels = |v: &Value| -> Vec<String> {
        v["types"]
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(|t| t["type"].as_str().map(String::from))
            .collect()
    };
    let (_, rel) = send(http.get(server.url(&format!("/sessions/{id}/relevant-types"))))?;
    let listed = labels(&rel);
    ensure!(
        !listed.contains(&"notices".to_string()),
        "present type listed: {listed:?}"
    );
    ensure!(
        listed.len() == state.models.types.len() - 1,
        "{} types listed",
        listed.len()
    );
    let (_, rec) = send(http.get(server.url(&format!(
        "/sessions/{id}/recommendations?type=governing%20laws&mode=retrieve"
    ))))?;
    let text = rec["retrieved"][0]["text"]
        .as_str()
        .context("retrieved clause")?
        .to_string();
    let (code, _) = send(
        http.post(server.url(&format!("/sessions/{id}/accept")))
            .json(&json!({ "revision": 1, "type": "governing laws", "text": text })),
    )?;
    ensure!(code == 200, "accept returned {code}");
    let (_, rel) = send(http.get(server.url(&format!("/sessions/{id}/relevant-types"))))?;
    ensure!(
        !labels(&rel).contains(&"governing laws".to_string()),
        "accepted type still listed"
    );

    // Revision conflict.
    let (code, body) = send(
        http.post(server.url(&format!("/sessions/{id}/clauses")))
            .json(&json!({ "revision": 1, "type": "severability", "text": "If any provision is invalid the rest remains in force." })),
    )?;
    ensure!(
        code == 409 && body["current_revision"] == 2,
        "stale write returned {code} {body}"
    );
    let (code, _) = send(http.delete(server.url(&format!("/sessions/{id}/clauses/0?revision=2"))))?;
    ensure!(code == 200, "delete returned {code}");

    // Replay reconstruction.
    let (_, log) = send(http.get(server.url(&format!("/sessions/{id}/log"))))?;
    let entries: Vec<LogEntry> = serde_json::from_value(log["log"].clone())?;
    let replayed = Session::replay(&id, &state.models.types, &entries).map_err(|e| anyhow::anyhow!("{e}"))?;
    let (_, live) = send(http.get(server.url(&format!("/sessions/{id}"))))?;
    let live_texts: Vec<&str> = live["clauses"]
        .as_array()
        .into_iter()
        .flatten()
        .filter_map(|c| c["text"].as_str())
        .collect();
    let replay_texts: Vec<&str> = replayed.contract.clauses.iter().map(|c| c.text.as_str()).collect();
    ensure!(
        live["revision"] == replayed.revision && live_texts == replay_texts,
        "replay diverged: {live} vs {replayed:?}"
    );
    Ok(format!(
        "present types excluded, stale revision rejected with 409, {}-entry log replays to revision {}",
        entries.len(),
        replayed.revision
    ))
}

fn main() {
    let mut suite = Suite { failed: 0 };
    suite.run("cf similarity and score oracles", Duration::from_secs(5), cf_oracles);
    suite.run("rouge oracles", Duration::from_secs(5), rouge_oracles);
    suite.run("gradient checks", Duration::from_secs(60), gradient_checks);
    suite.run("decoder memorization", Duration::from_secs(600), memorization);

    let work = tempfile::tempdir().expect("temp dir");
    let pipeline =
        synthetic_config(work.path()).map(|cfg| Pipeline::new(cfg, Artifacts::new(work.path().join("artifacts-a"))));
    match pipeline {
        Ok(p) => {
            suite.run("synthetic end-to-end", Duration::from_secs(900), || {
                p.run_all()?;
                end_to_end(&p)
            });
            suite.run("report reproducibility", Duration::from_secs(900), || {
                reproducibility(&p, work.path())
            });
            suite.run("service contract", Duration::from_secs(120), || service(&p));
        }
        Err(e) => {
            for name in ["synthetic end-to-end", "report reproducibility", "service contract"] {
                suite.run(name, Duration::ZERO, || Err(anyhow::anyhow!("setup failed: {e:#}")));
            }
        }
    }

    println!("{} criteria failed", suite.failed);
    if suite.failed > 0 {
        std::process::exit(1);
    }
}
