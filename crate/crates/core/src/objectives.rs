//! Scalar objectives maximized by gradient ascent on the model input.
//!
//! * adversary term: `Σ_t Σ_l Σ_e (h_{t-1} + c_t - h_t)`, summed over the batch;
//!   the cell term is dropped for models without cell state
//! * coverage term: sum of the raw values of the selected target states
//! * joint: `adversary + λ·coverage`
//! * baselines: model loss (FGSM style), loss plus `λ·` NC-target sum
//!   (DLFuzz style), and a gradient-free random baseline
//!
//! Every objective decomposes as `total = obj1 + λ·obj2`. For the loss based
//! baselines `obj1` holds the model loss.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coverage::{CoverageConfig, CoverageMetric, StateKind, StateRef};
use crate::error::{Error, Result};
use crate::rnn::{CellKind, RnnConfig, ScalarObjective, StateTrace, Targets, Unrolled};
use crate::tape::Var;
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    RnnTestAdversary,
    CoverageOnly,
    RnnTestJoint,
    FgsmLoss,
    DlfuzzJoint,
    RandomBaseline,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 6] = [
        Self::RnnTestAdversary,
        Self::CoverageOnly,
        Self::RnnTestJoint,
        Self::FgsmLoss,
        Self::DlfuzzJoint,
        Self::RandomBaseline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::RnnTestAdversary => "rnn_test_adversary",
            Self::CoverageOnly => "coverage_only",
            Self::RnnTestJoint => "rnn_test_joint",
            Self::FgsmLoss => "fgsm_loss",
            Self::DlfuzzJoint => "dlfuzz_joint",
            Self::RandomBaseline => "random_baseline",
        }
    }

    pub fn needs_coverage(self) -> bool {
        matches!(self, Self::CoverageOnly | Self::RnnTestJoint | Self::DlfuzzJoint)
    }

    pub fn needs_labels(self) -> bool {
        matches!(self, Self::FgsmLoss | Self::DlfuzzJoint)
    }

    pub fn uses_gradient(self) -> bool {
        self != Self::RandomBaseline
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown objective kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepPolicy {
    SingleRandomStep,
    KRandomSteps(usize),
}

impl StepPolicy {
    pub fn count(self) -> usize {
        match self {
            Self::SingleRandomStep => 1,
            Self::KRandomSteps(k) => k,
        }
    }
}

impl fmt::Display for StepPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::SingleRandomStep => f.write_str("single_random_step"),
            Self::KRandomSteps(k) => write!(f, "k_random_steps({k})"),
        }
    }
}

impl FromStr for StepPolicy {
    type Err = Error;

    /// `single_random_step`, `k_random_steps(k)` or `k_random_steps:k`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown step policy {s:?}"));
        if s == "single_random_step" {
            return Ok(Self::SingleRandomStep);
        }
        let k = s
            .strip_prefix("k_random_steps")
            .map(|r| r.trim_start_matches([':', '(']).trim_end_matches(')'))
            .ok_or_else(bad)?
            .parse::<usize>()
            .map_err(|_| bad())?;
        if k == 0 {
            return Err(Error::Config("k_random_steps needs k ≥ 1".into()));
        }
        Ok(Self::KRandomSteps(k))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub coverage: Option<CoverageConfig>,
    /// Number of target states for the coverage term.
    pub m: usize,
    pub lambda_cov: f64,
    pub step_policy: StepPolicy,
}

impl ObjectiveSpec {
    pub fn new(kind: ObjectiveKind) -> Self {
        Self {
            kind,
            coverage: None,
            m: 10,
            lambda_cov: 1.0,
            step_policy: StepPolicy::SingleRandomStep,
        }
    }

    pub fn with_coverage(mut self, coverage: CoverageConfig) -> Self {
        self.coverage = Some(coverage);
        self
    }

    pub fn with_lambda(mut self, lambda_cov: f64) -> Self {
        self.lambda_cov = lambda_cov;
        self
    }

    pub fn with_steps(mut self, policy: StepPolicy) -> Self {
        self.step_policy = policy;
        self
    }

    pub fn with_m(mut self, m: usize) -> Self {
        self.m = m;
        self
    }

    /// Checks the spec on its own and against the model it will drive.
    pub fn validate(&self, model: &RnnConfig) -> Result<()> {
        if self.kind.needs_coverage() {
            let cov = self.coverage.as_ref().ok_or_else(|| {
                Error::Config(format!("objective {} needs a coverage metric", self.kind))
            })?;
            cov.validate()?;
            if self.kind == ObjectiveKind::DlfuzzJoint && cov.metric != CoverageMetric::Nc {
                return Err(Error::Config("dlfuzz_joint is guided by NC".into()));
            }
            if cov.metric == CoverageMetric::CsC && model.cell_kind != CellKind::Lstm {
                return Err(Error::MetricMismatch {
                    metric: "CS_C",
                    reason: format!("{} models have no cell state", model.cell_kind),
                });
            }
            if self.m == 0 {
                return Err(Error::Config("m must be at least 1".into()));
            }
        }
        if !self.lambda_cov.is_finite() {
            return Err(Error::Config("lambda_cov must be finite".into()));
        }
        if self.step_policy.count() == 0 {
            return Err(Error::Config("step policy must select at least one step".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub total: f64,
    pub obj1: f64,
    pub obj2: f64,
    pub selected_targets: Vec<StateRef>,
    pub chosen_steps: Vec<usize>,
}

/// Distinct steps drawn uniformly from `[1, step_length)`, ascending.
pub fn select_steps<R: Rng + ?Sized>(
    step_length: usize,
    policy: StepPolicy,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if step_length < 2 {
        return Err(Error::StepSelection(format!(
            "input of length {step_length} is too short: need at least 2 steps"
        )));
    }
    let k = policy.count().min(step_length - 1);
    let mut steps: Vec<usize> = rand::seq::index::sample(rng, step_length - 1, k)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    steps.sort_unstable();
    Ok(steps)
}

fn check_steps(t_list: &[usize], lengths: &[usize]) -> Result<()> {
    for &t in t_list {
        if t == 0 {
            return Err(Error::StepSelection("step 0 has no predecessor".into()));
        }
        if let Some(b) = lengths.iter().position(|&n| t >= n) {
            return Err(Error::StepSelection(format!(
                "step {t} is beyond the length {} of batch item {b}",
                lengths[b]
            )));
        }
    }
    Ok(())
}

fn check_layers(layers: &[usize], num_layers: usize) -> Result<()> {
    match layers.iter().find(|&&l| l >= num_layers) {
        Some(l) => Err(Error::Input(format!("layer {l} outside 0..{num_layers}"))),
        None => Ok(()),
    }
}

/// Adversary term on a recorded trace.
pub fn adversary_objective(trace: &StateTrace, t_list: &[usize], layers: &[usize]) -> Result<f64> {
    check_steps(t_list, &trace.step_lengths)?;
    let (_, nl, bb, _) = trace.dims();
    check_layers(layers, nl)?;
    let mut total = 0.0;
    for &t in t_list {
        for &l in layers {
            for b in 0..bb {
                let prev: f64 = trace.hidden_vec(t - 1, l, b).iter().sum();
                let cur: f64 = trace.hidden_vec(t, l, b).iter().sum();
                let cell: f64 = trace.cell_vec(t, l, b).map_or(0.0, |c| c.iter().sum());
                total += prev + cell - cur;
            }
        }
    }
    Ok(total)
}

/// Coverage term on a recorded trace.
pub fn coverage_objective(trace: &StateTrace, targets: &[StateRef]) -> Result<f64> {
    targets.iter().try_fold(0.0, |acc, r| {
        r.value(trace)
            .map(|v| acc + v)
            .ok_or_else(|| Error::Input(format!("target {r:?} is not a valid state")))
    })
}

/// Adversary term built on an unrolled graph.
pub fn adversary_term(graph: &mut Unrolled<'_>, t_list: &[usize], layers: &[usize]) -> Result<Var> {
    check_steps(t_list, graph.lengths())?;
    check_layers(layers, graph.model().config().num_layers)?;
    let mut terms = Vec::new();
    for &t in t_list {
        for &l in layers {
            let (prev, cur) = (graph.hidden(t - 1, l), graph.hidden(t, l));
            let tape = graph.tape_mut();
            let mut d = tape.sub(prev, cur);
            if let Some(c) = graph.cell(t, l) {
                d = graph.tape_mut().add(d, c);
            }
            terms.push(graph.tape_mut().sum_all(d));
        }
    }
    Ok(graph.tape_mut().add_all(&terms))
}

/// Coverage term built on an unrolled graph. Duplicate targets count twice.
pub fn coverage_term(graph: &mut Unrolled<'_>, targets: &[StateRef]) -> Result<Var> {
    let e = graph.model().config().state_size;
    let bsz = graph.lengths().len();
    let mut groups: std::collections::BTreeMap<(usize, usize, StateKind), Tensor> =
        std::collections::BTreeMap::new();
    for r in targets {
        if r.t >= graph.steps() || r.l >= graph.model().config().num_layers || r.b >= bsz || r.e >= e
            || r.t >= graph.lengths()[r.b]
        {
            return Err(Error::Input(format!("target {r:?} is not a valid state")));
        }
        if r.which == StateKind::Cell && graph.cell(r.t, r.l).is_none() {
            return Err(Error::MetricMismatch {
                metric: "CS_C",
                reason: "cell-state target on a model without cell state".into(),
            });
        }
        let w = groups
            .entry((r.t, r.l, r.which))
            .or_insert_with(|| Tensor::zeros(&[bsz, e]));
        let cur = w.get(&[r.b, r.e]);
        w.set(&[r.b, r.e], cur + 1.0);
    }
    let mut terms = Vec::with_capacity(groups.len());
    for ((t, l, which), weights) in groups {
        let v = match which {
            StateKind::Hidden => graph.hidden(t, l),
            StateKind::Cell => graph.cell(t, l).expect("checked above"),
        };
        terms.push(graph.tape_mut().weighted_sum(v, weights));
    }
    Ok(graph.tape_mut().add_all(&terms))
}

/// The model's own predictions as targets: argmax per valid step, or per
/// sequence for final heads.
pub fn predicted_targets(graph: &Unrolled<'_>) -> Targets {
    let logits = graph.logits();
    if logits.rank() == 2 {
        let k = logits.cols();
        return Targets::Labels(
            logits.data().chunks(k).map(argmax).collect(),
        );
    }
    let (steps, bsz) = (logits.shape()[0], logits.shape()[1]);
    Targets::PerStep(
        (0..bsz)
            .map(|b| {
                (0..graph.lengths()[b].min(steps))
                    .map(|t| argmax(logits.slice(&[t, b])))
                    .collect()
            })
            .collect(),
    )
}

/// A spec bound to one input's step selection, targets and labels.
#[derive(Debug, Clone)]
pub struct BuiltObjective {
    pub spec: ObjectiveSpec,
    pub steps: Vec<usize>,
    pub targets: Vec<StateRef>,
    pub labels: Option<Targets>,
}

/// Tape handles of one built objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub total: Var,
    pub obj1: Var,
    pub obj2: Var,
}

pub fn build_objective(
    spec: &ObjectiveSpec,
    model: &RnnConfig,
    steps: Vec<usize>,
    targets: Vec<StateRef>,
    labels: Option<Targets>,
) -> Result<BuiltObjective> {
    spec.validate(model)?;
    if spec.kind.needs_labels() && labels.is_none() {
        return Err(Error::Config(format!("objective {} needs labels", spec.kind)));
    }
    Ok(BuiltObjective {
        spec: spec.clone(),
        steps,
        targets,
        labels,
    })
}

impl BuiltObjective {
    pub fn vars(&self, graph: &mut Unrolled<'_>) -> Result<ObjectiveVars> {
        let layers: Vec<usize> = (0..graph.model().config().num_layers).collect();
        let (obj1, obj2) = match self.spec.kind {
            ObjectiveKind::RnnTestAdversary => {
                let a = adversary_term(graph, &self.steps, &layers)?;
                (a, coverage_term(graph, &[])?)
            }
            ObjectiveKind::CoverageOnly => {
                let zero = coverage_term(graph, &[])?;
                (zero, coverage_term(graph, &self.targets)?)
            }
            ObjectiveKind::RnnTestJoint => {
                let a = adversary_term(graph, &self.steps, &layers)?;
                (a, coverage_term(graph, &self.targets)?)
            }
            ObjectiveKind::FgsmLoss => {
                let loss = graph.loss(self.labels.as_ref().expect("validated"))?;
                (loss, coverage_term(graph, &[])?)
            }
            ObjectiveKind::DlfuzzJoint => {
                let loss = graph.loss(self.labels.as_ref().expect("validated"))?;
                (loss, coverage_term(graph, &self.targets)?)
            }
            ObjectiveKind::RandomBaseline => {
                let zero = coverage_term(graph, &[])?;
                (zero, zero)
            }
        };
        let tape = graph.tape_mut();
        let weighted = tape.scale(obj2, self.spec.lambda_cov);
        let total = tape.add(obj1, weighted);
        Ok(ObjectiveVars { total, obj1, obj2 })
    }

    /// Builds the objective and returns the decomposition with the handle
    /// to differentiate.
    pub fn evaluate(&self, graph: &mut Unrolled<'_>) -> Result<(Var, ObjectiveValue)> {
        let v = self.vars(graph)?;
        let tape = graph.tape();
        Ok((
            v.total,
            ObjectiveValue {
                total: tape.scalar(v.total),
                obj1: tape.scalar(v.obj1),
                obj2: tape.scalar(v.obj2),
                selected_targets: self.targets.clone(),
                chosen_steps: self.steps.clone(),
            },
        ))
    }
}

impl ScalarObjective for BuiltObjective {
    fn build(&self, graph: &mut Unrolled<'_>) -> Result<Var> {
        Ok(self.vars(graph)?.total)
    }
}
