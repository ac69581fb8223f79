//! Turning an input gradient into a concrete adversarial input.
//!
//! Discrete inputs move the embedding of the token at a selected step along
//! the gradient with growing integer scale and snap to the nearest vocabulary
//! embedding, stopping at the first scale that yields a different token.
//! Continuous inputs move along the raw gradient, capped at an L2 budget.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    vectors: Tensor,
    tokens: Vec<String>,
}

impl EmbeddingTable {
    pub fn new(vectors: Tensor, tokens: Vec<String>) -> Result<Self> {
        if vectors.rank() != 2 {
            return Err(Error::Shape("embedding table must be (V, D)".into()));
        }
        let v = vectors.rows();
        if v < 2 {
            return Err(Error::Config("embedding table needs at least two tokens".into()));
        }
        if tokens.len() != v {
            return Err(Error::Config(format!("{} token names for {v} embeddings", tokens.len())));
        }
        let mut rows: Vec<(&[f64], usize)> = (0..v).map(|i| (vectors.slice(&[i]), i)).collect();
        rows.sort_by(|a, b| {
            a.0.iter()
                .zip(b.0)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Config(format!(
                "tokens {} and {} share an embedding",
                w[0].1, w[1].1
            )));
        }
        Ok(Self { vectors, tokens })
    }

    pub fn vocab_size(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vector(&self, id: usize) -> &[f64] {
        self.vectors.slice(&[id])
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Nearest embedding by L2 distance; the lowest id wins ties.
    pub fn nearest(&self, point: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for id in 0..self.vocab_size() {
            let d: f64 = self
                .vector(id)
                .iter()
                .zip(point)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best.1 {
                best = (id, d);
            }
        }
        best.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub max_scale: usize,
    /// L2 budget for continuous perturbations.
    pub epsilon: f64,
    /// Raw multiplier on the gradient before the budget cap; `None` spends
    /// the whole budget.
    pub step_size: Option<f64>,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            max_scale: 10,
            epsilon: 0.04,
            step_size: None,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_scale == 0 {
            return Err(Error::Config("max_scale must be at least 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if let Some(a) = self.step_size {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config("step_size must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    PerformanceReduced,
    GeneratedNotReduced,
    NotGenerated,
}

impl Outcome {
    pub fn generated(self) -> bool {
        self != Self::NotGenerated
    }

    pub fn reduced(self) -> bool {
        self == Self::PerformanceReduced
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateInput {
    Tokens(Vec<usize>),
    Continuous(Tensor),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialCandidate {
    pub input: CandidateInput,
    pub changed_positions: Vec<usize>,
    /// Input-space distance; embedding-space distance for token inputs.
    pub perturbation_l2: f64,
    /// Largest gradient scale that produced a substitution.
    pub scale_used: Option<usize>,
    pub outcome: Outcome,
}

impl AdversarialCandidate {
    fn unchanged(input: CandidateInput) -> Self {
        Self {
            input,
            changed_positions: Vec::new(),
            perturbation_l2: 0.0,
            scale_used: None,
            outcome: Outcome::NotGenerated,
        }
    }

    pub fn generated(&self) -> bool {
        self.outcome.generated()
    }

    pub fn tokens(&self) -> Option<&[usize]> {
        match &self.input {
            CandidateInput::Tokens(t) => Some(t),
            CandidateInput::Continuous(_) => None,
        }
    }
}

fn check_gradient(grad: &Tensor, steps: usize, dim: usize) -> Result<()> {
    grad.expect_shape(&[steps, dim])?;
    if !grad.is_finite() {
        return Err(Error::Input("gradient is not finite".into()));
    }
    Ok(())
}

/// One substitution search at step `t`: the new token and the scale used.
fn search_step(
    x: &[usize],
    t: usize,
    grad: &Tensor,
    embs: &EmbeddingTable,
    cfg: &SynthesisConfig,
) -> Result<Option<(usize, usize)>> {
    if t >= x.len() {
        return Err(Error::Input(format!("step {t} outside input of length {}", x.len())));
    }
    let cur = x[t];
    if cur >= embs.vocab_size() {
        return Err(Error::Input(format!("token id {cur} outside vocabulary")));
    }
    let g = grad.slice(&[t]);
    if g.iter().all(|&v| v == 0.0) {
        return Ok(None);
    }
    let base = embs.vector(cur);
    let mut point = vec![0.0; base.len()];
    for scale in 1..=cfg.max_scale {
        for ((p, &b), &gv) in point.iter_mut().zip(base).zip(g) {
            *p = b + gv * scale as f64;
        }
        let nearest = embs.nearest(&point);
        if nearest != cur {
            return Ok(Some((nearest, scale)));
        }
    }
    Ok(None)
}

fn embedding_distance(embs: &EmbeddingTable, a: &[usize], b: &[usize]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&i, &j)| {
            embs.vector(i)
                .iter()
                .zip(embs.vector(j))
                .map(|(u, v)| (u - v) * (u - v))
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

/// Scaled-gradient nearest-embedding substitution at step `t`.
/// `grad` is `(T, D)`: the gradient with respect to each step's embedding.
pub fn gen_adv_discrete(
    x: &[usize],
    t: usize,
    grad: &Tensor,
    embs: &EmbeddingTable,
    cfg: &SynthesisConfig,
) -> Result<AdversarialCandidate> {
    gen_adv_discrete_steps(x, &[t], grad, embs, cfg)
}

/// Runs the substitution search independently at each step; the candidate is
/// generated if any step changes.
pub fn gen_adv_discrete_steps(
    x: &[usize],
    steps: &[usize],
    grad: &Tensor,
    embs: &EmbeddingTable,
    cfg: &SynthesisConfig,
) -> Result<AdversarialCandidate> {
    cfg.validate()?;
    check_gradient(grad, x.len(), embs.dim())?;
    let mut out = x.to_vec();
    let mut changed = Vec::new();
    let mut scale_used = None;
    for &t in steps {
        if let Some((tok, scale)) = search_step(x, t, grad, embs, cfg)? {
            out[t] = tok;
            changed.push(t);
            scale_used = scale_used.max(Some(scale));
        }
    }
    if changed.is_empty() {
        return Ok(AdversarialCandidate::unchanged(CandidateInput::Tokens(out)));
    }
    changed.sort_unstable();
    changed.dedup();
    Ok(AdversarialCandidate {
        perturbation_l2: embedding_distance(embs, x, &out),
        input: CandidateInput::Tokens(out),
        changed_positions: changed,
        scale_used,
        outcome: Outcome::GeneratedNotReduced,
    })
}

fn changed_rows(delta: &Tensor) -> Vec<usize> {
    let cols = delta.cols();
    (0..delta.rows())
        .filter(|&r| delta.data()[r * cols..(r + 1) * cols].iter().any(|&v| v != 0.0))
        .collect()
}

fn apply_delta(x: &Tensor, delta: Tensor) -> Result<AdversarialCandidate> {
    let norm = delta.l2_norm();
    if norm == 0.0 {
        return Ok(AdversarialCandidate::unchanged(CandidateInput::Continuous(x.clone())));
    }
    let changed = changed_rows(&delta);
    Ok(AdversarialCandidate {
        input: CandidateInput::Continuous(x.add(&delta)?),
        changed_positions: changed,
        perturbation_l2: norm,
        scale_used: None,
        outcome: Outcome::GeneratedNotReduced,
    })
}

/// `x' = x + α·grad` with `‖x' − x‖₂ = min(epsilon, α_raw·‖grad‖₂)`.
/// `x` and `grad` are `(T, input_dim)`.
pub fn perturb_continuous(
    x: &Tensor,
    grad: &Tensor,
    cfg: &SynthesisConfig,
) -> Result<AdversarialCandidate> {
    cfg.validate()?;
    check_gradient(grad, x.rows(), x.cols())?;
    let g = grad.l2_norm();
    if g == 0.0 {
        return Ok(AdversarialCandidate::unchanged(CandidateInput::Continuous(x.clone())));
    }
    let length = cfg.step_size.map_or(cfg.epsilon, |a| (a * g).min(cfg.epsilon));
    apply_delta(x, grad.scale(length / g))
}

/// Sign-of-gradient perturbation with the same L2 budget.
pub fn perturb_continuous_sign(
    x: &Tensor,
    grad: &Tensor,
    cfg: &SynthesisConfig,
) -> Result<AdversarialCandidate> {
    cfg.validate()?;
    check_gradient(grad, x.rows(), x.cols())?;
    let sign = grad.map(|v| if v == 0.0 { 0.0 } else { v.signum() });
    let n = sign.l2_norm();
    if n == 0.0 {
        return Ok(AdversarialCandidate::unchanged(CandidateInput::Continuous(x.clone())));
    }
    apply_delta(x, sign.scale(cfg.epsilon / n))
}

/// Replaces the token at each step with a uniformly drawn different token.
pub fn random_discrete<R: Rng + ?Sized>(
    x: &[usize],
    steps: &[usize],
    embs: &EmbeddingTable,
    rng: &mut R,
) -> Result<AdversarialCandidate> {
    let v = embs.vocab_size();
    let mut out = x.to_vec();
    for &t in steps {
        let cur = *x
            .get(t)
            .ok_or_else(|| Error::Input(format!("step {t} outside input of length {}", x.len())))?;
        let draw = rng.random_range(0..v - 1);
        out[t] = if draw >= cur { draw + 1 } else { draw };
    }
    let mut changed = steps.to_vec();
    changed.sort_unstable();
    changed.dedup();
    if changed.is_empty() {
        return Ok(AdversarialCandidate::unchanged(CandidateInput::Tokens(out)));
    }
    Ok(AdversarialCandidate {
        perturbation_l2: embedding_distance(embs, x, &out),
        input: CandidateInput::Tokens(out),
        changed_positions: changed,
        scale_used: None,
        outcome: Outcome::GeneratedNotReduced,
    })
}

/// Gaussian noise on the rows in `steps`, rescaled to L2 norm `epsilon`.
pub fn gaussian_continuous<R: Rng + ?Sized>(
    x: &Tensor,
    steps: &[usize],
    epsilon: f64,
    rng: &mut R,
) -> Result<AdversarialCandidate> {
    let cols = x.cols();
    let mut noise = Tensor::zeros(x.shape());
    for &t in steps {
        if t >= x.rows() {
            return Err(Error::Input(format!("step {t} outside input of {} rows", x.rows())));
        }
        for v in &mut noise.data_mut()[t * cols..(t + 1) * cols] {
            *v = rng.sample(StandardNormal);
        }
    }
    let n = noise.l2_norm();
    if n == 0.0 {
        return Ok(AdversarialCandidate::unchanged(CandidateInput::Continuous(x.clone())));
    }
    apply_delta(x, noise.scale(epsilon / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMetric {
    Perplexity,
    Wer,
    Bleu,
    Accuracy,
    /// Predicted class; any change counts as a reduction.
    Label,
}

/// Outcome of one candidate from the task metric before and after.
pub fn classify_outcome(generated: bool, original: f64, adversarial: f64, metric: TaskMetric) -> Outcome {
    if !generated {
        return Outcome::NotGenerated;
    }
    let worse = match metric {
        TaskMetric::Perplexity | TaskMetric::Wer => adversarial > original,
        TaskMetric::Bleu | TaskMetric::Accuracy => adversarial < original,
        TaskMetric::Label => adversarial != original,
    };
    if worse {
        Outcome::PerformanceReduced
    } else {
        Outcome::GeneratedNotReduced
    }
}
