//! Flat `key = value` configuration files.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Keys are unique and every key must be understood by the consumer.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::coverage::{equal_sections, CoverageConfig, CoverageMetric};
use crate::error::{Error, Result};
use crate::objectives::{ObjectiveKind, ObjectiveSpec, StepPolicy};
use crate::rnn::train::TrainConfig;
use crate::rnn::CellKind;
use crate::synthesis::SynthesisConfig;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets or replaces one key, for `key=value` overrides.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.entries.insert(k.trim().to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn insert(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Removes and parses a key.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}"))),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.take(key)?
            .ok_or_else(|| Error::Config(format!("missing required key {key}")))
    }

    /// Fails on keys nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(_) => Err(Error::Config(format!(
                "unknown keys: {}",
                self.entries.keys().cloned().collect::<Vec<_>>().join(", ")
            ))),
        }
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CharLm,
    SeqClassifier,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::CharLm => "char_lm",
            Self::SeqClassifier => "seq_classifier",
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char_lm" => Ok(Self::CharLm),
            "seq_classifier" => Ok(Self::SeqClassifier),
            _ => Err(Error::Config(format!("unknown task kind {s:?}"))),
        }
    }
}

/// An objective kind with its coverage metric, written `kind` or `kind:METRIC`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Methodology {
    pub kind: ObjectiveKind,
    pub metric: Option<CoverageMetric>,
}

impl Methodology {
    pub fn new(kind: ObjectiveKind, metric: Option<CoverageMetric>) -> Self {
        Self { kind, metric }
    }

    pub fn name(&self) -> String {
        match self.metric {
            Some(m) => format!("{}:{}", self.kind, m),
            None => self.kind.to_string(),
        }
    }
}

impl std::fmt::Display for Methodology {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Methodology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, metric) = match s.trim().split_once(':') {
            Some((k, m)) => (k.parse()?, Some(m.parse()?)),
            None => (s.trim().parse()?, None),
        };
        let kind: ObjectiveKind = kind;
        let metric = match (kind, metric) {
            (ObjectiveKind::DlfuzzJoint, None) => Some(CoverageMetric::Nc),
            (k, None) if k.needs_coverage() => {
                return Err(Error::Config(format!("{k} needs a coverage metric, e.g. {k}:HS_C")))
            }
            (_, m) => m,
        };
        Ok(Self { kind, metric })
    }
}

fn parse_list<T: FromStr<Err = Error>>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::parse)
        .collect()
}

/// Everything a testing campaign needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub checkpoint: PathBuf,
    pub task_kind: TaskKind,
    pub methodologies: Vec<Methodology>,
    pub coverage_sections: usize,
    pub nc_threshold: f64,
    pub m: usize,
    pub lambda_cov: f64,
    pub step_policy: StepPolicy,
    pub synthesis: SynthesisConfig,
    pub test_set: PathBuf,
    pub num_runs: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Window length for text test sets.
    pub seq_len: usize,
    /// Rows per sequence for CSV test sets.
    pub sequence_steps: usize,
    pub max_inputs: Option<usize>,
}

impl CampaignConfig {
    pub fn new(checkpoint: PathBuf, task_kind: TaskKind, test_set: PathBuf) -> Self {
        Self {
            checkpoint,
            task_kind,
            methodologies: vec![Methodology::new(ObjectiveKind::RnnTestJoint, Some(CoverageMetric::HsC))],
            coverage_sections: crate::coverage::DEFAULT_SECTIONS,
            nc_threshold: crate::coverage::DEFAULT_NC_THRESHOLD,
            m: 10,
            lambda_cov: 1.0,
            step_policy: StepPolicy::SingleRandomStep,
            synthesis: SynthesisConfig::default(),
            test_set,
            num_runs: 3,
            seed: 1,
            output_dir: PathBuf::from("out"),
            seq_len: 32,
            sequence_steps: 8,
            max_inputs: None,
        }
    }

    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let checkpoint: PathBuf = kv.require("checkpoint")?;
        let task_kind: TaskKind = kv.require("task_kind")?;
        let test_set: PathBuf = kv.require("test_set")?;
        let mut cfg = Self::new(checkpoint, task_kind, test_set);
        let single: Option<ObjectiveKind> = kv.take("objective")?;
        let metric: Option<CoverageMetric> = kv.take("coverage_metric")?;
        let list: Option<String> = kv.take("objectives")?;
        cfg.methodologies = match (single, list) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("give either objective or objectives, not both".into()))
            }
            (Some(kind), None) => {
                let name = match metric {
                    Some(m) => format!("{kind}:{m}"),
                    None => kind.to_string(),
                };
                vec![name.parse()?]
            }
            (None, Some(list)) => {
                if metric.is_some() {
                    return Err(Error::Config("coverage_metric applies to objective only; write kind:METRIC in objectives".into()));
                }
                parse_list(&list)?
            }
            (None, None) => cfg.methodologies,
        };
        cfg.coverage_sections = kv.take_or("coverage_sections", cfg.coverage_sections)?;
        cfg.nc_threshold = kv.take_or("nc_threshold", cfg.nc_threshold)?;
        cfg.m = kv.take_or("m", cfg.m)?;
        cfg.lambda_cov = kv.take_or("lambda_cov", cfg.lambda_cov)?;
        cfg.step_policy = kv.take_or("step_policy", cfg.step_policy)?;
        cfg.synthesis.max_scale = kv.take_or("max_scale", cfg.synthesis.max_scale)?;
        cfg.synthesis.epsilon = kv.take_or("epsilon", cfg.synthesis.epsilon)?;
        cfg.synthesis.step_size = kv.take("step_size")?;
        cfg.num_runs = kv.take_or("num_runs", cfg.num_runs)?;
        cfg.seed = kv.take_or("seed", cfg.seed)?;
        cfg.output_dir = kv.take_or("output_dir", cfg.output_dir)?;
        cfg.seq_len = kv.take_or("seq_len", cfg.seq_len)?;
        cfg.sequence_steps = kv.take_or("sequence_steps", cfg.sequence_steps)?;
        cfg.max_inputs = kv.take("max_inputs")?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.insert("checkpoint", self.checkpoint.display());
        kv.insert("task_kind", self.task_kind);
        let names: Vec<String> = self.methodologies.iter().map(Methodology::name).collect();
        kv.insert("objectives", names.join(", "));
        kv.insert("coverage_sections", self.coverage_sections);
        kv.insert("nc_threshold", self.nc_threshold);
        kv.insert("m", self.m);
        kv.insert("lambda_cov", self.lambda_cov);
        kv.insert("step_policy", self.step_policy);
        kv.insert("max_scale", self.synthesis.max_scale);
        kv.insert("epsilon", self.synthesis.epsilon);
        if let Some(a) = self.synthesis.step_size {
            kv.insert("step_size", a);
        }
        kv.insert("test_set", self.test_set.display());
        kv.insert("num_runs", self.num_runs);
        kv.insert("seed", self.seed);
        kv.insert("output_dir", self.output_dir.display());
        kv.insert("seq_len", self.seq_len);
        kv.insert("sequence_steps", self.sequence_steps);
        if let Some(n) = self.max_inputs {
            kv.insert("max_inputs", n);
        }
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_runs == 0 {
            return Err(Error::Config("num_runs must be at least 1".into()));
        }
        if self.methodologies.is_empty() {
            return Err(Error::Config("no objectives to run".into()));
        }
        if self.coverage_sections < 2 {
            return Err(Error::Config("coverage_sections must be at least 2".into()));
        }
        if self.seq_len < 2 || self.sequence_steps < 2 {
            return Err(Error::Config("inputs need at least two steps".into()));
        }
        self.synthesis.validate()?;
        self.coverage_config(CoverageMetric::HsC).validate()?;
        for m in &self.methodologies {
            if m.kind == ObjectiveKind::DlfuzzJoint && m.metric != Some(CoverageMetric::Nc) {
                return Err(Error::Config("dlfuzz_joint is guided by NC".into()));
            }
        }
        Ok(())
    }

    pub fn coverage_config(&self, metric: CoverageMetric) -> CoverageConfig {
        CoverageConfig {
            metric,
            section_edges: equal_sections(self.coverage_sections),
            nc_threshold: self.nc_threshold,
        }
    }

    pub fn objective_spec(&self, methodology: &Methodology) -> ObjectiveSpec {
        ObjectiveSpec {
            kind: methodology.kind,
            coverage: methodology.metric.map(|m| self.coverage_config(m)),
            m: self.m,
            lambda_cov: self.lambda_cov,
            step_policy: self.step_policy,
        }
    }
}

/// A model-training job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub task_kind: TaskKind,
    /// Text corpus (char_lm) or training CSV (seq_classifier).
    pub data: PathBuf,
    /// Held-out CSV for seq_classifier.
    pub test_data: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub output_dir: PathBuf,
    pub cell_kind: CellKind,
    pub num_layers: usize,
    pub state_size: usize,
    pub embedding_dim: usize,
    pub seq_len: usize,
    pub sequence_steps: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub train: TrainConfig,
}

impl TrainJob {
    /// 2-layer LSTM, state size 64, 32-dim embeddings, 32-step windows.
    pub fn char_lm(data: PathBuf) -> Self {
        Self {
            task_kind: TaskKind::CharLm,
            data,
            test_data: None,
            checkpoint: PathBuf::from("out/char_lm.ckpt"),
            output_dir: PathBuf::from("out"),
            cell_kind: CellKind::Lstm,
            num_layers: 2,
            state_size: 64,
            embedding_dim: 32,
            seq_len: 32,
            sequence_steps: 8,
            input_dim: 8,
            num_classes: 10,
            train: TrainConfig {
                epochs: 10,
                learning_rate: 2.0,
                lr_decay: 0.5,
                decay_after: 8,
                batch_size: 16,
                clip_norm: 5.0,
                seed: 1,
            },
        }
    }

    /// 1-layer LSTM, state size 32, 8 rows of 8 values, 10 classes.
    pub fn seq_classifier(data: PathBuf, test_data: Option<PathBuf>) -> Self {
        Self {
            task_kind: TaskKind::SeqClassifier,
            test_data,
            checkpoint: PathBuf::from("out/classifier.ckpt"),
            num_layers: 1,
            state_size: 32,
            train: TrainConfig {
                epochs: 20,
                learning_rate: 0.5,
                lr_decay: 0.5,
                decay_after: 15,
                batch_size: 16,
                clip_norm: 5.0,
                seed: 1,
            },
            ..Self::char_lm(data)
        }
    }

    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let task_kind: TaskKind = kv.require("task_kind")?;
        let data: PathBuf = kv.require("data")?;
        let test_data: Option<PathBuf> = kv.take("test_data")?;
        let mut job = match task_kind {
            TaskKind::CharLm => Self::char_lm(data),
            TaskKind::SeqClassifier => Self::seq_classifier(data, None),
        };
        job.test_data = test_data;
        job.checkpoint = kv.take_or("checkpoint", job.checkpoint)?;
        job.output_dir = kv.take_or("output_dir", job.output_dir)?;
        job.cell_kind = kv.take_or("cell_kind", job.cell_kind)?;
        job.num_layers = kv.take_or("num_layers", job.num_layers)?;
        job.state_size = kv.take_or("state_size", job.state_size)?;
        job.embedding_dim = kv.take_or("embedding_dim", job.embedding_dim)?;
        job.seq_len = kv.take_or("seq_len", job.seq_len)?;
        job.sequence_steps = kv.take_or("sequence_steps", job.sequence_steps)?;
        job.input_dim = kv.take_or("input_dim", job.input_dim)?;
        job.num_classes = kv.take_or("num_classes", job.num_classes)?;
        let t = &mut job.train;
        t.epochs = kv.take_or("epochs", t.epochs)?;
        t.learning_rate = kv.take_or("learning_rate", t.learning_rate)?;
        t.lr_decay = kv.take_or("lr_decay", t.lr_decay)?;
        t.decay_after = kv.take_or("decay_after", t.decay_after)?;
        t.batch_size = kv.take_or("batch_size", t.batch_size)?;
        t.clip_norm = kv.take_or("clip_norm", t.clip_norm)?;
        t.seed = kv.take_or("seed", t.seed)?;
        kv.finish()?;
        Ok(job)
    }
}

/// The retraining experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainJob {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    /// Exported perturbation records; `None` runs the null augmentation.
    pub adversarial: Option<PathBuf>,
    /// Only use records of this methodology.
    pub methodology: Option<String>,
    pub output_dir: PathBuf,
    pub repetitions: usize,
    pub seq_len: usize,
    pub train: TrainConfig,
}

impl RetrainJob {
    pub fn new(checkpoint: PathBuf, corpus: PathBuf) -> Self {
        let base = TrainJob::char_lm(corpus.clone()).train;
        Self {
            checkpoint,
            corpus,
            adversarial: None,
            methodology: None,
            output_dir: PathBuf::from("out"),
            repetitions: 5,
            seq_len: 32,
            train: TrainConfig {
                epochs: 12,
                decay_after: 10,
                ..base
            },
        }
    }

    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let mut job = Self::new(kv.require("checkpoint")?, kv.require("corpus")?);
        job.adversarial = kv.take("adversarial")?;
        job.methodology = kv.take("methodology")?;
        job.output_dir = kv.take_or("output_dir", job.output_dir)?;
        job.repetitions = kv.take_or("repetitions", job.repetitions)?;
        job.seq_len = kv.take_or("seq_len", job.seq_len)?;
        let t = &mut job.train;
        t.epochs = kv.take_or("epochs", t.epochs)?;
        t.learning_rate = kv.take_or("learning_rate", t.learning_rate)?;
        t.lr_decay = kv.take_or("lr_decay", t.lr_decay)?;
        t.decay_after = kv.take_or("decay_after", t.decay_after)?;
        t.batch_size = kv.take_or("batch_size", t.batch_size)?;
        t.clip_norm = kv.take_or("clip_norm", t.clip_norm)?;
        t.seed = kv.take_or("seed", t.seed)?;
        kv.finish()?;
        if job.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        Ok(job)
    }
}
