//! Retraining with adversarial inputs added to the training set.
//!
//! Each repetition initializes a fresh model from the base checkpoint's
//! configuration and trains two copies with identical seeds: one on the
//! original training windows, one on those windows plus the adversarial
//! windows. Adversarial windows keep the original next-character targets.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::campaign::PerturbationRecord;
use super::config::RetrainJob;
use super::data::{ingest_text_corpus, Vocabulary};
use super::report::read_perturbations;
use crate::error::{Error, Result};
use crate::rnn::checkpoint::Checkpoint;
use crate::rnn::train::{evaluate_perplexity, token_windows, train, EpochStats, Example, TrainConfig};
use crate::rnn::Model;

pub const TABLE_JSON: &str = "retrain.json";
pub const TABLE_TEXT: &str = "retrain.txt";

/// One epoch row, averaged over repetitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_original: f64,
    pub train_augmented: f64,
    /// `(augmented − original) / original`, in percent.
    pub train_increment_pct: f64,
    pub valid_original: f64,
    pub valid_augmented: f64,
    /// `(original − augmented) / original`, in percent.
    pub valid_decrement_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    pub repetitions: usize,
    pub epochs: usize,
    pub original_windows: usize,
    pub adversarial_windows: usize,
    pub rows: Vec<EpochRow>,
    pub test_original: f64,
    pub test_augmented: f64,
    /// `(original − augmented) / original`, in percent.
    pub test_improvement_pct: f64,
}

fn pct(from: f64, to: f64) -> f64 {
    if from == 0.0 {
        0.0
    } else {
        (to - from) / from * 100.0
    }
}

/// Turns exported perturbations into training windows under `vocab`.
pub fn adversarial_windows(
    records: &[PerturbationRecord],
    vocab: &Vocabulary,
    methodology: Option<&str>,
) -> Result<Vec<Example>> {
    let encode = |s: &[String]| -> Result<Vec<usize>> {
        s.iter()
            .map(|t| {
                let mut cs = t.chars();
                match (cs.next(), cs.next()) {
                    (Some(c), None) => vocab
                        .id(c)
                        .ok_or_else(|| Error::Input(format!("vocabulary mismatch: {c:?} is unknown"))),
                    _ => Err(Error::Input(format!("vocabulary mismatch: token {t:?}"))),
                }
            })
            .collect()
    };
    records
        .iter()
        .filter(|r| methodology.is_none_or(|m| r.methodology == m))
        .map(|r| match (&r.tokens, &r.targets) {
            (Some(t), Some(y)) if t.len() == y.len() && !t.is_empty() => Ok(Example::Tokens {
                inputs: encode(t)?,
                targets: encode(y)?,
            }),
            _ => Err(Error::Input(format!(
                "perturbation record (run {}, input {}) carries no text",
                r.run, r.index
            ))),
        })
        .collect()
}

/// Averages per-epoch histories of several repetitions.
fn average_histories(histories: &[Vec<EpochStats>]) -> Vec<(f64, f64)> {
    let epochs = histories.first().map_or(0, Vec::len);
    (0..epochs)
        .map(|e| {
            let n = histories.len() as f64;
            let t = histories.iter().map(|h| h[e].train_perplexity).sum::<f64>() / n;
            let v = histories.iter().map(|h| h[e].valid_perplexity).sum::<f64>() / n;
            (t, v)
        })
        .collect()
}

/// Runs the experiment on in-memory data.
pub fn retrain_experiment(
    base: &Model,
    train_set: &[Example],
    valid_set: &[Example],
    test_set: &[Example],
    adversarial: &[Example],
    repetitions: usize,
    cfg: &TrainConfig,
) -> Result<RetrainReport> {
    if repetitions == 0 {
        return Err(Error::Config("repetitions must be at least 1".into()));
    }
    let augmented: Vec<Example> = train_set.iter().chain(adversarial).cloned().collect();
    let mut orig_hist = Vec::with_capacity(repetitions);
    let mut aug_hist = Vec::with_capacity(repetitions);
    let (mut test_o, mut test_a) = (0.0, 0.0);
    for r in 0..repetitions {
        let seed = cfg.seed + r as u64;
        let fresh = Model::init(base.config().clone(), seed)?;
        let rcfg = TrainConfig { seed, ..cfg.clone() };
        let o = train(&fresh, train_set, valid_set, &rcfg)?;
        let a = train(&fresh, &augmented, valid_set, &rcfg)?;
        test_o += evaluate_perplexity(&o.model, test_set, rcfg.batch_size)?;
        test_a += evaluate_perplexity(&a.model, test_set, rcfg.batch_size)?;
        orig_hist.push(o.history);
        aug_hist.push(a.history);
    }
    let n = repetitions as f64;
    let (test_original, test_augmented) = (test_o / n, test_a / n);
    let rows = average_histories(&orig_hist)
        .into_iter()
        .zip(average_histories(&aug_hist))
        .enumerate()
        .map(|(e, ((to, vo), (ta, va)))| EpochRow {
            epoch: e + 1,
            train_original: to,
            train_augmented: ta,
            train_increment_pct: pct(to, ta),
            valid_original: vo,
            valid_augmented: va,
            valid_decrement_pct: -pct(vo, va),
        })
        .collect();
    Ok(RetrainReport {
        repetitions,
        epochs: cfg.epochs,
        original_windows: train_set.len(),
        adversarial_windows: adversarial.len(),
        rows,
        test_original,
        test_augmented,
        test_improvement_pct: -pct(test_original, test_augmented),
    })
}

/// Loads checkpoint, corpus and perturbations named by `job` and runs it.
pub fn run_retrain(job: &RetrainJob) -> Result<RetrainReport> {
    let ckpt = Checkpoint::load(&job.checkpoint)?;
    let corpus = ingest_text_corpus(&job.corpus)?;
    let tokens = ckpt
        .tokens
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no vocabulary".into()))?;
    if *tokens != corpus.vocabulary.tokens() {
        return Err(Error::Input(
            "vocabulary mismatch between checkpoint and corpus".into(),
        ));
    }
    let adversarial = match &job.adversarial {
        None => Vec::new(),
        Some(path) => {
            let records = read_perturbations(path)?;
            adversarial_windows(&records, &corpus.vocabulary, job.methodology.as_deref())?
        }
    };
    retrain_experiment(
        &ckpt.model,
        &token_windows(&corpus.train, job.seq_len),
        &token_windows(&corpus.valid, job.seq_len),
        &token_windows(&corpus.test, job.seq_len),
        &adversarial,
        job.repetitions,
        &job.train,
    )
}

pub fn retrain_table(report: &RetrainReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "repetitions {}  epochs {}  windows {} + {} adversarial",
        report.repetitions, report.epochs, report.original_windows, report.adversarial_windows
    );
    let _ = writeln!(
        out,
        "{:>5}  {:>11}  {:>11}  {:>10}  {:>11}  {:>11}  {:>10}",
        "epoch", "train orig", "train aug", "incr %", "valid orig", "valid aug", "decr %"
    );
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{:>5}  {:>11.4}  {:>11.4}  {:>10.3}  {:>11.4}  {:>11.4}  {:>10.3}",
            r.epoch,
            r.train_original,
            r.train_augmented,
            r.train_increment_pct,
            r.valid_original,
            r.valid_augmented,
            r.valid_decrement_pct
        );
    }
    let _ = writeln!(
        out,
        "test perplexity  {:.4} -> {:.4}  ({:+.3} %)",
        report.test_original, report.test_augmented, report.test_improvement_pct
    );
    out
}

pub fn write_retrain(dir: &Path, report: &RetrainReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join(TABLE_JSON);
    std::fs::write(&json, serde_json::to_string_pretty(report)? + "\n").map_err(|e| Error::io(&json, e))?;
    let text = dir.join(TABLE_TEXT);
    std::fs::write(&text, retrain_table(report)).map_err(|e| Error::io(&text, e))
}
