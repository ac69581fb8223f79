//! Testing campaigns.
//!
//! Every methodology runs `num_runs` times over the same test inputs. Each
//! (run, input) pair owns a random stream, and step selection is its first
//! draw, so all methodologies mutate the same steps of the same inputs.
//! Coverage trackers live per (methodology, run) and are updated with the
//! input that was actually tested: the adversarial one when generated,
//! otherwise the original.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{CampaignConfig, Methodology, TaskKind};
use super::data::{ingest_sequence_dataset, ingest_text_with, Vocabulary};
use super::report::{self, CampaignReport, MethodologyReport, RunReport};
use crate::coverage::{select_targets, CoverageMetric, CoverageTracker};
use crate::error::{Error, Result};
use crate::metrics::{bleu, wer};
use crate::objectives::{build_objective, select_steps, ObjectiveKind, ObjectiveSpec};
use crate::rnn::checkpoint::Checkpoint;
use crate::rnn::train::{token_windows, Example};
use crate::rnn::{embed, Batch, CellKind, Model, OutputHead, StateTrace, Targets, Tracking, Unrolled};
use crate::synthesis::{
    classify_outcome, gaussian_continuous, gen_adv_discrete_steps, perturb_continuous,
    perturb_continuous_sign, random_discrete, AdversarialCandidate, CandidateInput, EmbeddingTable,
    Outcome, TaskMetric,
};
use crate::tensor::{argmax, log_softmax_rows, Tensor};

/// The model under test with what the pipeline needs beside it.
#[derive(Debug, Clone)]
pub struct Subject {
    pub model: Model,
    pub task_kind: TaskKind,
    pub vocabulary: Option<Vocabulary>,
    pub embeddings: Option<EmbeddingTable>,
}

impl Subject {
    pub fn new(model: Model, task_kind: TaskKind, vocabulary: Option<Vocabulary>) -> Result<Self> {
        let cfg = model.config();
        match (task_kind, cfg.output_head) {
            (TaskKind::CharLm, OutputHead::PerStep) | (TaskKind::SeqClassifier, OutputHead::Final) => {}
            _ => {
                return Err(Error::Config(format!(
                    "task kind {task_kind} does not match the model's output head"
                )))
            }
        }
        let embeddings = match model.embedding() {
            None => None,
            Some(table) => {
                let tokens = match &vocabulary {
                    Some(v) => v.tokens(),
                    None => (0..table.rows()).map(|i| i.to_string()).collect(),
                };
                Some(EmbeddingTable::new(table.clone(), tokens)?)
            }
        };
        Ok(Self {
            model,
            task_kind,
            vocabulary,
            embeddings,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, task_kind: TaskKind) -> Result<Self> {
        let vocabulary = ckpt.tokens.as_deref().map(Vocabulary::from_tokens).transpose()?;
        Self::new(ckpt.model, task_kind, vocabulary)
    }

    fn metrics_tracked(&self) -> Vec<CoverageMetric> {
        let mut out = vec![CoverageMetric::HsC];
        if self.model.config().cell_kind == CellKind::Lstm {
            out.push(CoverageMetric::CsC);
        }
        out.push(CoverageMetric::Nc);
        out
    }
}

/// Loads the campaign's test inputs: fixed-length next-character windows for
/// language models, labeled sequences for classifiers.
pub fn load_test_inputs(cfg: &CampaignConfig, subject: &Subject) -> Result<Vec<Example>> {
    let mut inputs = match subject.task_kind {
        TaskKind::CharLm => {
            let vocab = subject
                .vocabulary
                .as_ref()
                .ok_or_else(|| Error::Checkpoint("language model checkpoint carries no vocabulary".into()))?;
            let stream = ingest_text_with(&cfg.test_set, vocab)?;
            token_windows(&stream, cfg.seq_len)
        }
        TaskKind::SeqClassifier => {
            let m = subject.model.config();
            ingest_sequence_dataset(
                &cfg.test_set,
                cfg.sequence_steps,
                m.input_dim,
                m.num_classes.unwrap_or(0),
            )?
        }
    };
    if let Some(n) = cfg.max_inputs {
        inputs.truncate(n);
    }
    Ok(inputs)
}

/// Task scores of one tested input.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub perplexity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bleu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub correct: Option<bool>,
}

impl Scores {
    /// The value the outcome is judged on.
    fn primary(&self) -> f64 {
        match (self.perplexity, self.label) {
            (Some(p), _) => p,
            (None, Some(l)) => l as f64,
            (None, None) => f64::NAN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub total: f64,
    pub obj1: f64,
    pub obj2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageSnapshot {
    pub ratio: f64,
    pub positions: usize,
}

/// One line of `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub run: usize,
    pub index: usize,
    pub methodology: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub outcome: Option<Outcome>,
    pub steps: Vec<usize>,
    pub targets: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub objective: Option<ObjectiveTerms>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub original: Option<Scores>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub adversarial: Option<Scores>,
    pub changed_positions: Vec<usize>,
    pub scale_used: Option<usize>,
    pub perturbation_l2: f64,
    /// Coverage of every tracked metric after this input.
    pub coverage: BTreeMap<String, CoverageSnapshot>,
    pub elapsed_seconds: f64,
}

impl InputRecord {
    fn failed(run: usize, index: usize, methodology: &Methodology, err: &Error, elapsed: f64) -> Self {
        Self {
            run,
            index,
            methodology: methodology.name(),
            error: Some(err.to_string()),
            outcome: None,
            steps: Vec::new(),
            targets: 0,
            objective: None,
            original: None,
            adversarial: None,
            changed_positions: Vec::new(),
            scale_used: None,
            perturbation_l2: 0.0,
            coverage: BTreeMap::new(),
            elapsed_seconds: elapsed,
        }
    }

    /// The outcome with failures counted as not generated.
    pub fn effective_outcome(&self) -> Outcome {
        self.outcome.unwrap_or(Outcome::NotGenerated)
    }
}

/// One generated perturbation, for export to external tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub run: usize,
    pub index: usize,
    pub methodology: String,
    pub outcome: Outcome,
    pub l2: f64,
    /// Shape of `delta`: `(T, input_dim)`.
    pub shape: Vec<usize>,
    /// Adversarial minus original input, in embedding space for token models.
    pub delta: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tokens: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub targets: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<usize>,
}

/// Everything one campaign produced.
#[derive(Debug, Clone, PartialEq)]
pub struct CampaignOutput {
    pub report: CampaignReport,
    pub records: Vec<InputRecord>,
    pub perturbations: Vec<PerturbationRecord>,
}

struct Trackers {
    by_metric: BTreeMap<CoverageMetric, CoverageTracker>,
}

impl Trackers {
    fn new(cfg: &CampaignConfig, metrics: &[CoverageMetric]) -> Result<Self> {
        let by_metric = metrics
            .iter()
            .map(|&m| Ok((m, CoverageTracker::new(cfg.coverage_config(m))?)))
            .collect::<Result<_>>()?;
        Ok(Self { by_metric })
    }

    fn get(&self, metric: CoverageMetric) -> Result<&CoverageTracker> {
        self.by_metric.get(&metric).ok_or(Error::MetricMismatch {
            metric: metric.as_str(),
            reason: "the model does not support this metric".into(),
        })
    }

    fn update(&mut self, trace: &StateTrace) -> Result<()> {
        for t in self.by_metric.values_mut() {
            t.update(trace)?;
        }
        Ok(())
    }

    fn snapshot(&self) -> BTreeMap<String, CoverageSnapshot> {
        self.by_metric
            .iter()
            .map(|(m, t)| {
                (
                    m.as_str().to_string(),
                    CoverageSnapshot {
                        ratio: t.ratio(),
                        positions: t.position_map().len(),
                    },
                )
            })
            .collect()
    }
}

/// Random stream of one (run, input) pair.
pub fn input_rng(seed: u64, run: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((run as u64) << 32) | index as u64);
    rng
}

fn batch_of(example: &Example) -> Batch {
    match example {
        Example::Tokens { inputs, .. } => Batch::tokens(std::slice::from_ref(inputs)),
        Example::Labeled { sequence, .. } => {
            Batch::continuous(std::slice::from_ref(sequence)).expect("single sequence batch")
        }
    }
}

fn targets_of(example: &Example) -> Targets {
    match example {
        Example::Tokens { targets, .. } => Targets::PerStep(vec![targets.clone()]),
        Example::Labeled { label, .. } => Targets::Labels(vec![*label]),
    }
}

/// Scores a single-item forward pass from its logits.
fn score(logits: &Tensor, example: &Example) -> Result<Scores> {
    match example {
        Example::Tokens { targets, .. } => {
            let (steps, v) = (logits.shape()[0], logits.shape()[2]);
            let rows = log_softmax_rows(&logits.clone().reshape(&[steps, v])?);
            let lp: Vec<f64> = targets.iter().enumerate().map(|(t, &y)| rows.get(&[t, y])).collect();
            let predicted: Vec<usize> = (0..steps).map(|t| argmax(rows.slice(&[t]))).collect();
            Ok(Scores {
                perplexity: Some(crate::metrics::perplexity(&lp)?),
                wer: Some(wer(targets, &predicted)?),
                bleu: Some(bleu(targets, &predicted)?),
                ..Scores::default()
            })
        }
        Example::Labeled { label, .. } => {
            let predicted = argmax(logits.data());
            Ok(Scores {
                label: Some(predicted),
                correct: Some(predicted == *label),
                ..Scores::default()
            })
        }
    }
}

fn task_metric(kind: TaskKind) -> TaskMetric {
    match kind {
        TaskKind::CharLm => TaskMetric::Perplexity,
        TaskKind::SeqClassifier => TaskMetric::Label,
    }
}

/// Input values the gradient is taken against: embeddings or raw rows.
fn input_values(subject: &Subject, example: &Example) -> Result<Tensor> {
    match example {
        Example::Tokens { inputs, .. } => {
            let e = embed(&subject.model, std::slice::from_ref(inputs))?;
            let (t, d) = (e.shape()[1], e.shape()[2]);
            e.reshape(&[t, d])
        }
        Example::Labeled { sequence, .. } => Ok(sequence.clone()),
    }
}

fn candidate_example(example: &Example, input: &CandidateInput) -> Example {
    match (example, input) {
        (Example::Tokens { targets, .. }, CandidateInput::Tokens(t)) => Example::Tokens {
            inputs: t.clone(),
            targets: targets.clone(),
        },
        (Example::Labeled { label, .. }, CandidateInput::Continuous(s)) => Example::Labeled {
            sequence: s.clone(),
            label: *label,
        },
        _ => unreachable!("candidate kind follows the input kind"),
    }
}

struct Tested {
    record: InputRecord,
    perturbation: Option<PerturbationRecord>,
}

#[allow(clippy::too_many_arguments)]
fn test_input(
    cfg: &CampaignConfig,
    subject: &Subject,
    methodology: &Methodology,
    spec: &ObjectiveSpec,
    trackers: &mut Trackers,
    run: usize,
    index: usize,
    example: &Example,
) -> Result<Tested> {
    let mut rng = input_rng(cfg.seed, run, index);
    let model = &subject.model;
    let batch = batch_of(example);
    let len = batch.lengths[0];
    let steps = select_steps(len, spec.step_policy, &mut rng)?;

    let mut graph = Unrolled::new(model, &batch, Tracking { params: false, input: true })?;
    let trace = graph.trace();
    let original = score(&graph.logits(), example)?;

    let targets = match methodology.metric {
        Some(metric) => select_targets(&trace, trackers.get(metric)?, cfg.m)?,
        None => Vec::new(),
    };
    let n_targets = targets.len();
    let built = build_objective(spec, model.config(), steps.clone(), targets, Some(targets_of(example)))?;
    let (var, value) = built.evaluate(&mut graph)?;

    let x = input_values(subject, example)?;
    let candidate = if methodology.kind == ObjectiveKind::RandomBaseline {
        drop(graph);
        match example {
            Example::Tokens { inputs, .. } => {
                random_discrete(inputs, &steps, embeddings(subject)?, &mut rng)?
            }
            Example::Labeled { sequence, .. } => {
                gaussian_continuous(sequence, &steps, cfg.synthesis.epsilon, &mut rng)?
            }
        }
    } else {
        let full = graph.input_gradient(var);
        drop(graph);
        let mut grad = full.reshape(x.shape())?;
        mask_rows(&mut grad, &steps);
        match example {
            Example::Tokens { inputs, .. } => {
                gen_adv_discrete_steps(inputs, &steps, &grad, embeddings(subject)?, &cfg.synthesis)?
            }
            Example::Labeled { sequence, .. } if methodology.kind == ObjectiveKind::FgsmLoss => {
                perturb_continuous_sign(sequence, &grad, &cfg.synthesis)?
            }
            Example::Labeled { sequence, .. } => perturb_continuous(sequence, &grad, &cfg.synthesis)?,
        }
    };

    let (adversarial, tested_trace, outcome, perturbation) = if candidate.generated() {
        let adv_example = candidate_example(example, &candidate.input);
        let adv_graph = Unrolled::new(model, &batch_of(&adv_example), Tracking::default())?;
        let adv_scores = score(&adv_graph.logits(), &adv_example)?;
        let outcome = classify_outcome(
            true,
            original.primary(),
            adv_scores.primary(),
            task_metric(subject.task_kind),
        );
        let delta = input_values(subject, &adv_example)?.sub(&x)?;
        let perturbation =
            perturbation_record(subject, methodology, run, index, example, &candidate, outcome, delta);
        (Some(adv_scores), adv_graph.trace(), outcome, Some(perturbation))
    } else {
        (None, trace, Outcome::NotGenerated, None)
    };
    trackers.update(&tested_trace)?;

    Ok(Tested {
        record: InputRecord {
            run,
            index,
            methodology: methodology.name(),
            error: None,
            outcome: Some(outcome),
            steps,
            targets: n_targets,
            objective: Some(ObjectiveTerms {
                total: value.total,
                obj1: value.obj1,
                obj2: value.obj2,
            }),
            original: Some(original),
            adversarial,
            changed_positions: candidate.changed_positions.clone(),
            scale_used: candidate.scale_used,
            perturbation_l2: candidate.perturbation_l2,
            coverage: trackers.snapshot(),
            elapsed_seconds: 0.0,
        },
        perturbation,
    })
}

fn embeddings(subject: &Subject) -> Result<&EmbeddingTable> {
    subject
        .embeddings
        .as_ref()
        .ok_or_else(|| Error::Config("token model without an embedding table".into()))
}

fn mask_rows(grad: &mut Tensor, steps: &[usize]) {
    let cols = grad.cols();
    for (t, row) in grad.data_mut().chunks_mut(cols).enumerate() {
        if !steps.contains(&t) {
            row.fill(0.0);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn perturbation_record(
    subject: &Subject,
    methodology: &Methodology,
    run: usize,
    index: usize,
    example: &Example,
    candidate: &AdversarialCandidate,
    outcome: Outcome,
    delta: Tensor,
) -> PerturbationRecord {
    let spell = |ids: &[usize]| -> Option<Vec<String>> {
        let v = subject.vocabulary.as_ref()?;
        Some(ids.iter().map(|&i| v.char(i).map(String::from).unwrap_or_default()).collect())
    };
    let (tokens, targets, label) = match (example, &candidate.input) {
        (Example::Tokens { targets, .. }, CandidateInput::Tokens(adv)) => (spell(adv), spell(targets), None),
        (Example::Labeled { label, .. }, _) => (None, None, Some(*label)),
        _ => (None, None, None),
    };
    PerturbationRecord {
        run,
        index,
        methodology: methodology.name(),
        outcome,
        l2: candidate.perturbation_l2,
        shape: delta.shape().to_vec(),
        delta: delta.into_data(),
        tokens,
        targets,
        label,
    }
}

/// One (methodology, run) pass over the inputs, in input order. Trackers
/// in `warm` replace the empty tracker of their metric at the start.
pub fn run_methodology(
    cfg: &CampaignConfig,
    subject: &Subject,
    methodology: &Methodology,
    run: usize,
    inputs: &[Example],
    warm: &[CoverageTracker],
) -> Result<(RunReport, Vec<InputRecord>, Vec<PerturbationRecord>)> {
    let spec = cfg.objective_spec(methodology);
    spec.validate(subject.model.config())?;
    let mut trackers = Trackers::new(cfg, &subject.metrics_tracked())?;
    for w in warm {
        match trackers.by_metric.get_mut(&w.metric()) {
            Some(t) if t.config() == w.config() => *t = w.clone(),
            _ => {
                return Err(Error::Config(format!(
                    "warm {} tracker does not match the campaign's coverage settings",
                    w.metric()
                )))
            }
        }
    }
    let mut records = Vec::with_capacity(inputs.len());
    let mut perturbations = Vec::new();
    for (index, example) in inputs.iter().enumerate() {
        let start = Instant::now();
        let result = test_input(cfg, subject, methodology, &spec, &mut trackers, run, index, example);
        let elapsed = start.elapsed().as_secs_f64();
        match result {
            Ok(mut tested) => {
                tested.record.elapsed_seconds = elapsed;
                records.push(tested.record);
                perturbations.extend(tested.perturbation);
            }
            Err(e) => records.push(InputRecord::failed(run, index, methodology, &e, elapsed)),
        }
    }
    let coverage = trackers.by_metric.values().map(CoverageTracker::summary).collect();
    let report = report::run_report(run, &records, coverage);
    Ok((report, records, perturbations))
}

/// Runs every configured methodology `num_runs` times over `inputs`.
pub fn run_campaign_on(cfg: &CampaignConfig, subject: &Subject, inputs: &[Example]) -> Result<CampaignOutput> {
    cfg.validate()?;
    for m in &cfg.methodologies {
        cfg.objective_spec(m).validate(subject.model.config())?;
    }
    let jobs: Vec<(usize, usize)> = (0..cfg.methodologies.len())
        .flat_map(|m| (0..cfg.num_runs).map(move |r| (m, r)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(m, r)| run_methodology(cfg, subject, &cfg.methodologies[m], r, inputs, &[]))
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    let mut perturbations = Vec::new();
    let mut methodologies: Vec<MethodologyReport> = Vec::new();
    for (&(m, _), (run_report, recs, perts)) in jobs.iter().zip(results) {
        if methodologies.len() == m {
            methodologies.push(MethodologyReport::new(cfg.methodologies[m].name()));
        }
        methodologies[m].runs.push(run_report);
        records.extend(recs);
        perturbations.extend(perts);
    }
    for m in &mut methodologies {
        m.finalize();
    }
    Ok(CampaignOutput {
        report: CampaignReport {
            task_kind: subject.task_kind,
            test_inputs: inputs.len(),
            num_runs: cfg.num_runs,
            seed: cfg.seed,
            methodologies,
        },
        records,
        perturbations,
    })
}

/// Loads the checkpoint and test set named by `cfg` and runs the campaign.
pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignOutput> {
    cfg.validate()?;
    for p in [&cfg.checkpoint, &cfg.test_set] {
        if !p.exists() {
            return Err(Error::Config(format!("{} does not exist", p.display())));
        }
    }
    let subject = Subject::from_checkpoint(Checkpoint::load(&cfg.checkpoint)?, cfg.task_kind)?;
    let inputs = load_test_inputs(cfg, &subject)?;
    run_campaign_on(cfg, &subject, &inputs)
}
