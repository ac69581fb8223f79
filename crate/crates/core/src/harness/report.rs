//! Campaign reports and their on-disk form.
//!
//! A campaign directory holds `records.jsonl` (one object per tested input,
//! in methodology, run, input order), `summary.json` and `summary.txt`.
//! Only `elapsed_seconds` and `seconds_per_input` depend on the wall clock.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::campaign::{CampaignOutput, InputRecord, PerturbationRecord};
use super::config::TaskKind;
use crate::coverage::CoverageSummary;
use crate::error::{Error, Result};
use crate::metrics::{aggregate_rates, mean, MetricPair, MetricReport};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_TEXT: &str = "summary.txt";
pub const PERTURBATIONS_FILE: &str = "perturbations.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: usize,
    pub metrics: MetricReport,
    pub coverage: Vec<CoverageSummary>,
    pub errors: usize,
}

/// Arithmetic means of the per-run figures.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanReport {
    pub generation_rate: f64,
    pub success_rate: f64,
    pub adversary_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub perplexity: Option<MetricPair>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wer: Option<MetricPair>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bleu: Option<MetricPair>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<MetricPair>,
    pub perturbation_l2: f64,
    pub seconds_per_input: f64,
    /// Final coverage ratio per metric, in tracker order.
    pub coverage: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodologyReport {
    pub methodology: String,
    pub runs: Vec<RunReport>,
    pub mean: MeanReport,
}

impl MethodologyReport {
    pub fn new(methodology: String) -> Self {
        Self {
            methodology,
            runs: Vec::new(),
            mean: MeanReport::default(),
        }
    }

    pub fn finalize(&mut self) {
        self.mean = mean_report(&self.runs);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub task_kind: TaskKind,
    pub test_inputs: usize,
    pub num_runs: usize,
    pub seed: u64,
    pub methodologies: Vec<MethodologyReport>,
}

impl CampaignReport {
    pub fn methodology(&self, name: &str) -> Option<&MethodologyReport> {
        self.methodologies.iter().find(|m| m.methodology == name)
    }
}

fn pair_of(records: &[&InputRecord], pick: impl Fn(&super::campaign::Scores) -> Option<f64>) -> Option<MetricPair> {
    let pairs: Vec<MetricPair> = records
        .iter()
        .filter_map(|r| {
            let o = pick(r.original.as_ref()?)?;
            let a = r.adversarial.as_ref().and_then(&pick).unwrap_or(o);
            Some(MetricPair { original: o, adversarial: a })
        })
        .collect();
    (!pairs.is_empty()).then(|| MetricPair::mean_of(&pairs))
}

/// Aggregates one run. Failed inputs count as not generated; task metrics
/// average over the inputs that were scored, with the original value
/// standing in where nothing was generated.
pub fn run_report(run: usize, records: &[InputRecord], coverage: Vec<CoverageSummary>) -> RunReport {
    let rates = aggregate_rates(records.iter().map(InputRecord::effective_outcome));
    let scored: Vec<&InputRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let l2: Vec<f64> = records
        .iter()
        .filter(|r| r.effective_outcome().generated())
        .map(|r| r.perturbation_l2)
        .collect();
    let secs: Vec<f64> = records.iter().map(|r| r.elapsed_seconds).collect();
    RunReport {
        run,
        metrics: MetricReport {
            rates,
            perplexity: pair_of(&scored, |s| s.perplexity),
            wer: pair_of(&scored, |s| s.wer),
            bleu: pair_of(&scored, |s| s.bleu),
            accuracy: pair_of(&scored, |s| s.correct.map(|c| if c { 1.0 } else { 0.0 })),
            perturbation_l2: mean(&l2),
            seconds_per_input: mean(&secs),
        },
        coverage,
        errors: records.len() - scored.len(),
    }
}

fn mean_pair(runs: &[RunReport], pick: impl Fn(&MetricReport) -> Option<MetricPair>) -> Option<MetricPair> {
    let pairs: Vec<MetricPair> = runs.iter().filter_map(|r| pick(&r.metrics)).collect();
    (!pairs.is_empty()).then(|| MetricPair::mean_of(&pairs))
}

pub fn mean_report(runs: &[RunReport]) -> MeanReport {
    let over = |f: &dyn Fn(&RunReport) -> f64| mean(&runs.iter().map(f).collect::<Vec<_>>());
    let coverage = runs
        .first()
        .map(|r| {
            r.coverage
                .iter()
                .enumerate()
                .map(|(i, c)| (c.metric.to_string(), over(&|r: &RunReport| r.coverage[i].ratio)))
                .collect()
        })
        .unwrap_or_default();
    MeanReport {
        generation_rate: over(&|r| r.metrics.rates.generation_rate),
        success_rate: over(&|r| r.metrics.rates.success_rate),
        adversary_rate: over(&|r| r.metrics.rates.adversary_rate),
        perplexity: mean_pair(runs, |m| m.perplexity),
        wer: mean_pair(runs, |m| m.wer),
        bleu: mean_pair(runs, |m| m.bleu),
        accuracy: mean_pair(runs, |m| m.accuracy),
        perturbation_l2: over(&|r| r.metrics.perturbation_l2),
        seconds_per_input: over(&|r| r.metrics.seconds_per_input),
        coverage,
    }
}

fn pair_cell(p: Option<MetricPair>) -> String {
    match p {
        Some(p) => format!("{:.4} -> {:.4}", p.original, p.adversarial),
        None => "-".into(),
    }
}

/// Human-readable table of the per-methodology means.
pub fn summary_table(report: &CampaignReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "task {}  inputs {}  runs {}  seed {}",
        report.task_kind, report.test_inputs, report.num_runs, report.seed
    );
    let wide = report
        .methodologies
        .iter()
        .map(|m| m.methodology.len())
        .max()
        .unwrap_or(0)
        .max(11);
    let (first, second, third) = match report.task_kind {
        TaskKind::CharLm => ("perplexity", "wer", "bleu"),
        TaskKind::SeqClassifier => ("accuracy", "", ""),
    };
    let _ = writeln!(
        out,
        "{:<wide$}  {:>8}  {:>8}  {:>8}  {:>9}  {:>9}  {:<24}  {:<24}  {:<24}  coverage",
        "methodology", "gen", "success", "adv", "l2", "s/input", first, second, third
    );
    for m in &report.methodologies {
        let s = &m.mean;
        let (a, b, c) = match report.task_kind {
            TaskKind::CharLm => (pair_cell(s.perplexity), pair_cell(s.wer), pair_cell(s.bleu)),
            TaskKind::SeqClassifier => (pair_cell(s.accuracy), String::new(), String::new()),
        };
        let cov: Vec<String> = s.coverage.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        let _ = writeln!(
            out,
            "{:<wide$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>9.4}  {:>9.6}  {a:<24}  {b:<24}  {c:<24}  {}",
            m.methodology,
            s.generation_rate,
            s.success_rate,
            s.adversary_rate,
            s.perturbation_l2,
            s.seconds_per_input,
            cov.join(" ")
        );
    }
    out
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes records, JSON summary and text summary into `dir`.
pub fn write_campaign(dir: &Path, output: &CampaignOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(RECORDS_FILE), jsonl(&output.records)?)?;
    write_file(
        &dir.join(SUMMARY_JSON),
        serde_json::to_string_pretty(&output.report)? + "\n",
    )?;
    write_file(&dir.join(SUMMARY_TEXT), summary_table(&output.report))
}

pub fn write_perturbations(dir: &Path, perturbations: &[PerturbationRecord]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(PERTURBATIONS_FILE), jsonl(perturbations)?)
}

pub fn read_perturbations(path: &Path) -> Result<Vec<PerturbationRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::ingestion(path, format!("line {}: {e}", n + 1)))
        })
        .collect()
}

const TIMING_KEYS: [&str; 2] = ["elapsed_seconds", "seconds_per_input"];

fn zero_timing(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            for (k, v) in map.iter_mut() {
                if TIMING_KEYS.contains(&k.as_str()) {
                    *v = serde_json::Value::from(0.0);
                } else {
                    zero_timing(v);
                }
            }
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(zero_timing),
        _ => {}
    }
}

/// Re-serializes JSON or JSON-lines text with every timing field zeroed.
pub fn without_timing(text: &str) -> Result<String> {
    let mut out = String::new();
    if let Ok(mut v) = serde_json::from_str::<serde_json::Value>(text) {
        zero_timing(&mut v);
        return Ok(serde_json::to_string(&v)?);
    }
    for line in text.lines() {
        let mut v: serde_json::Value = serde_json::from_str(line)?;
        zero_timing(&mut v);
        out.push_str(&serde_json::to_string(&v)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timing_is_zeroed_everywhere() {
        let a = r#"{"x":1,"elapsed_seconds":0.25,"inner":[{"seconds_per_input":3.0,"y":2}]}"#;
        let b = r#"{"x":1,"elapsed_seconds":9.5,"inner":[{"seconds_per_input":0.1,"y":2}]}"#;
        assert_eq!(without_timing(a).unwrap(), without_timing(b).unwrap());
        let c = r#"{"x":2,"elapsed_seconds":0.25,"inner":[]}"#;
        assert_ne!(without_timing(a).unwrap(), without_timing(c).unwrap());
        let lines = "{\"elapsed_seconds\":1}\n{\"elapsed_seconds\":2}\n";
        assert_eq!(without_timing(lines).unwrap(), "{\"elapsed_seconds\":0.0}\n{\"elapsed_seconds\":0.0}\n");
    }

    #[test]
    fn means_are_arithmetic() {
        let run = |g: f64, l2: f64| RunReport {
            run: 0,
            metrics: MetricReport {
                rates: crate::metrics::Rates {
                    generation_rate: g,
                    ..Default::default()
                },
                perplexity: Some(MetricPair { original: g, adversarial: 2.0 * g }),
                perturbation_l2: l2,
                ..Default::default()
            },
            coverage: Vec::new(),
            errors: 0,
        };
        let m = mean_report(&[run(0.2, 1.0), run(0.6, 2.0), run(0.4, 6.0)]);
        assert!((m.generation_rate - 0.4).abs() < 1e-12);
        assert!((m.perturbation_l2 - 3.0).abs() < 1e-12);
        assert!((m.perplexity.unwrap().adversarial - 0.8).abs() < 1e-12);
        assert!(m.wer.is_none());
    }
}
