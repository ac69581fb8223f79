//! Recurrent network engine with full state capture.
//!
//! [`Unrolled`] is the core: it lays the whole forward pass out on a
//! [`Tape`], keeping a handle on every hidden and cell state so objectives
//! can be built directly on top of them and differentiated with respect to
//! the (embedded) input.

mod cell;
pub mod checkpoint;
pub mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{softmax_rows, Tensor};

pub use cell::{gru_cell_step, lstm_cell_step, vanilla_cell_step, LayerParams};
use cell::{gru_step, lstm_step, vanilla_step, LayerVars};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Vanilla,
    Gru,
    Lstm,
}

impl CellKind {
    pub const ALL: [CellKind; 3] = [CellKind::Vanilla, CellKind::Gru, CellKind::Lstm];

    fn gates(self) -> usize {
        match self {
            CellKind::Vanilla => 1,
            CellKind::Gru => 2,
            CellKind::Lstm => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Vanilla => "vanilla",
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(CellKind::Vanilla),
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(Error::Config(format!("unknown cell kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutputHead {
    /// Softmax over the vocabulary at every step (language models).
    #[serde(rename = "softmax-per-step")]
    PerStep,
    /// Softmax over classes from the last valid step (sequence classifiers).
    #[serde(rename = "softmax-final")]
    Final,
}

impl OutputHead {
    pub fn as_str(self) -> &'static str {
        match self {
            OutputHead::PerStep => "softmax-per-step",
            OutputHead::Final => "softmax-final",
        }
    }
}

impl FromStr for OutputHead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax-per-step" => Ok(OutputHead::PerStep),
            "softmax-final" => Ok(OutputHead::Final),
            other => Err(Error::Config(format!("unknown output head {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RnnConfig {
    pub cell_kind: CellKind,
    pub num_layers: usize,
    pub state_size: usize,
    pub input_dim: usize,
    pub vocab_size: Option<usize>,
    pub embedding_dim: Option<usize>,
    pub output_head: OutputHead,
    /// Class count for [`OutputHead::Final`].
    pub num_classes: Option<usize>,
}

impl RnnConfig {
    /// Character/word language model: embedded tokens, per-step softmax over the vocabulary.
    pub fn language_model(
        cell_kind: CellKind,
        num_layers: usize,
        state_size: usize,
        vocab_size: usize,
        embedding_dim: usize,
    ) -> Self {
        Self {
            cell_kind,
            num_layers,
            state_size,
            input_dim: embedding_dim,
            vocab_size: Some(vocab_size),
            embedding_dim: Some(embedding_dim),
            output_head: OutputHead::PerStep,
            num_classes: None,
        }
    }

    /// Continuous-input sequence classifier.
    pub fn classifier(
        cell_kind: CellKind,
        num_layers: usize,
        state_size: usize,
        input_dim: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            cell_kind,
            num_layers,
            state_size,
            input_dim,
            vocab_size: None,
            embedding_dim: None,
            output_head: OutputHead::Final,
            num_classes: Some(num_classes),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_layers == 0 || self.state_size == 0 || self.input_dim == 0 {
            return fail("num_layers, state_size and input_dim must be positive");
        }
        match (self.vocab_size, self.embedding_dim) {
            (Some(v), Some(d)) => {
                if v < 2 || d == 0 {
                    return fail("vocabulary needs at least two tokens and a positive embedding_dim");
                }
                if d != self.input_dim {
                    return fail("input_dim must equal embedding_dim for token models");
                }
            }
            (None, None) => {}
            _ => return fail("vocab_size and embedding_dim must be given together"),
        }
        match self.output_head {
            OutputHead::PerStep if self.vocab_size.is_none() => {
                fail("per-step softmax head predicts tokens and needs a vocabulary")
            }
            OutputHead::Final if self.num_classes.unwrap_or(0) < 2 => {
                fail("final softmax head needs num_classes ≥ 2")
            }
            _ => Ok(()),
        }
    }

    pub fn output_size(&self) -> usize {
        match self.output_head {
            OutputHead::PerStep => self.vocab_size.unwrap_or(0),
            OutputHead::Final => self.num_classes.unwrap_or(0),
        }
    }

    pub fn is_token_model(&self) -> bool {
        self.vocab_size.is_some()
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.state_size
        }
    }

    /// Every parameter name with the shape this configuration implies.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let e = self.state_size;
        let g = self.cell_kind.gates();
        let mut out = Vec::new();
        if let (Some(v), Some(d)) = (self.vocab_size, self.embedding_dim) {
            out.push(("embedding".to_string(), vec![v, d]));
        }
        for l in 0..self.num_layers {
            let rows = self.layer_input(l) + e;
            out.push((format!("layer{l}.weight"), vec![rows, g * e]));
            out.push((format!("layer{l}.bias"), vec![g * e]));
            if self.cell_kind == CellKind::Gru {
                out.push((format!("layer{l}.cand_weight"), vec![rows, e]));
                out.push((format!("layer{l}.cand_bias"), vec![e]));
            }
        }
        out.push(("output.weight".to_string(), vec![e, self.output_size()]));
        out.push(("output.bias".to_string(), vec![self.output_size()]));
        out
    }
}

/// Named parameter tensors, ordered by name.
pub type ModelParams = BTreeMap<String, Tensor>;

/// Parameters initialised uniformly in `(−scale, scale)` from a seeded generator.
pub fn init_params(config: &RnnConfig, scale: f64, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(config
        .parameter_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let t = Tensor::uniform(&shape, -scale, scale, &mut rng);
            (name, t)
        })
        .collect())
}

/// A validated configuration with matching parameters. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: RnnConfig,
    params: ModelParams,
}

impl Model {
    pub fn new(config: RnnConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let shapes = config.parameter_shapes();
        for (name, shape) in &shapes {
            match params.get(name) {
                None => return Err(Error::Config(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Config(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        shape
                    )))
                }
                Some(t) if !t.is_finite() => {
                    return Err(Error::Config(format!("parameter {name} is not finite")))
                }
                Some(_) => {}
            }
        }
        if params.len() != shapes.len() {
            let extra: Vec<_> = params
                .keys()
                .filter(|k| !shapes.iter().any(|(n, _)| n == *k))
                .collect();
            return Err(Error::Config(format!("unexpected parameters {extra:?}")));
        }
        Ok(Self { config, params })
    }

    /// Fresh model with the uniform(−0.1, 0.1) initialisation.
    pub fn init(config: RnnConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, 0.1, seed)?;
        Self::new(config, params)
    }

    pub fn config(&self) -> &RnnConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn embedding(&self) -> Option<&Tensor> {
        self.params.get("embedding")
    }

    pub fn layer(&self, l: usize) -> LayerParams<'_> {
        LayerParams {
            weight: &self.params[&format!("layer{l}.weight")],
            bias: &self.params[&format!("layer{l}.bias")],
            cand_weight: self.params.get(&format!("layer{l}.cand_weight")),
            cand_bias: self.params.get(&format!("layer{l}.cand_bias")),
        }
    }
}

/// Input values for a padded batch.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchData {
    /// Token ids, `B` rows of `T` ids (padding positions hold any valid id).
    Tokens(Vec<Vec<usize>>),
    /// Already-embedded token inputs `(B, T, embedding_dim)`.
    Embedded(Tensor),
    /// Real-valued inputs `(B, T, input_dim)`.
    Continuous(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub data: BatchData,
    /// Valid steps per batch item, each in `1..=T`.
    pub lengths: Vec<usize>,
}

impl Batch {
    /// Pads variable-length token sequences with id 0.
    pub fn tokens(seqs: &[Vec<usize>]) -> Self {
        let t = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let lengths = seqs.iter().map(Vec::len).collect();
        let rows = seqs
            .iter()
            .map(|s| {
                let mut r = s.clone();
                r.resize(t, 0);
                r
            })
            .collect();
        Self {
            data: BatchData::Tokens(rows),
            lengths,
        }
    }

    /// Stacks `(T_b, input_dim)` sequences into a zero-padded `(B, T, input_dim)` batch.
    pub fn continuous(seqs: &[Tensor]) -> Result<Self> {
        let (values, lengths) = stack_padded(seqs)?;
        Ok(Self {
            data: BatchData::Continuous(values),
            lengths,
        })
    }

    pub fn embedded(seqs: &[Tensor]) -> Result<Self> {
        let (values, lengths) = stack_padded(seqs)?;
        Ok(Self {
            data: BatchData::Embedded(values),
            lengths,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn steps(&self) -> usize {
        match &self.data {
            BatchData::Tokens(rows) => rows.first().map_or(0, Vec::len),
            BatchData::Embedded(t) | BatchData::Continuous(t) => t.shape()[1],
        }
    }
}

fn stack_padded(seqs: &[Tensor]) -> Result<(Tensor, Vec<usize>)> {
    let dim = seqs.first().map_or(0, Tensor::cols);
    if seqs.iter().any(|s| s.rank() != 2 || s.cols() != dim) {
        return Err(Error::Input("sequences must be (T, dim) with a common dim".into()));
    }
    let t = seqs.iter().map(Tensor::rows).max().unwrap_or(0);
    let mut out = Tensor::zeros(&[seqs.len(), t, dim]);
    for (b, s) in seqs.iter().enumerate() {
        out.slice_mut(&[b])[..s.len()].copy_from_slice(s.data());
    }
    Ok((out, seqs.iter().map(Tensor::rows).collect()))
}

/// Supervision for a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Next-token ids `(B, T)`; positions past the item's length are ignored.
    PerStep(Vec<Vec<usize>>),
    /// One class label per batch item.
    Labels(Vec<usize>),
}

/// Every hidden and cell state of one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTrace {
    /// `(T, L, B, E)`
    pub hidden: Tensor,
    /// `(T, L, B, E)`, LSTM only.
    pub cell: Option<Tensor>,
    pub step_lengths: Vec<usize>,
}

impl StateTrace {
    pub fn new(hidden: Tensor, cell: Option<Tensor>, step_lengths: Vec<usize>) -> Result<Self> {
        if hidden.rank() != 4 {
            return Err(Error::Shape("trace hidden states must be (T, L, B, E)".into()));
        }
        if let Some(c) = &cell {
            c.expect_shape(hidden.shape())?;
        }
        let (t, b) = (hidden.shape()[0], hidden.shape()[2]);
        if step_lengths.len() != b || step_lengths.iter().any(|&n| n > t) {
            return Err(Error::Shape("step_lengths must give one length ≤ T per batch item".into()));
        }
        Ok(Self {
            hidden,
            cell,
            step_lengths,
        })
    }

    /// `(T, L, B, E)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.hidden.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn is_valid(&self, t: usize, b: usize) -> bool {
        t < self.step_lengths[b]
    }

    pub fn hidden_vec(&self, t: usize, l: usize, b: usize) -> &[f64] {
        self.hidden.slice(&[t, l, b])
    }

    pub fn cell_vec(&self, t: usize, l: usize, b: usize) -> Option<&[f64]> {
        self.cell.as_ref().map(|c| c.slice(&[t, l, b]))
    }

    /// Number of valid `(t, l, b)` state vectors.
    pub fn valid_vectors(&self) -> usize {
        let (_, l, _, _) = self.dims();
        self.step_lengths.iter().sum::<usize>() * l
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    /// `(T, B, V)` for per-step heads, `(B, K)` for final heads.
    pub logits: Tensor,
    pub trace: Option<StateTrace>,
    /// Mean negative log-likelihood over supervised positions.
    pub loss: Option<f64>,
}

impl ForwardResult {
    /// Row-wise softmax of the logits, rows over the last axis.
    pub fn probabilities(&self) -> Tensor {
        let cols = self.logits.cols();
        let rows = self.logits.len() / cols.max(1);
        let flat = self.logits.clone().reshape(&[rows, cols]).expect("flatten logits");
        softmax_rows(&flat)
            .reshape(self.logits.shape())
            .expect("restore logits shape")
    }
}

/// Which leaves of the unrolled graph carry gradients.
#[derive(Debug, Clone, Copy, Default)]
pub struct Tracking {
    pub params: bool,
    pub input: bool,
}

/// A forward pass laid out on a tape with handles to every state.
#[derive(Debug)]
pub struct Unrolled<'m> {
    model: &'m Model,
    tape: Tape,
    inputs: Vec<Var>,
    hidden: Vec<Vec<Var>>,
    cell: Option<Vec<Vec<Var>>>,
    logits: Vec<Var>,
    params: Vec<(String, Var)>,
    token_ids: Option<Vec<Vec<usize>>>,
    lengths: Vec<usize>,
}

impl<'m> Unrolled<'m> {
    pub fn new(model: &'m Model, batch: &Batch, tracking: Tracking) -> Result<Self> {
        let cfg = &model.config;
        let steps = validate_batch(cfg, batch)?;
        let bsz = batch.batch_size();
        let e = cfg.state_size;
        let mut tape = Tape::new();

        let mut params = Vec::new();
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let vars = LayerVars::load(&mut tape, model.layer(l), tracking.params);
            if tracking.params {
                params.push((format!("layer{l}.weight"), vars.weight));
                params.push((format!("layer{l}.bias"), vars.bias));
                if let (Some(w), Some(b)) = (vars.cand_weight, vars.cand_bias) {
                    params.push((format!("layer{l}.cand_weight"), w));
                    params.push((format!("layer{l}.cand_bias"), b));
                }
            }
            layers.push(vars);
        }
        let out_w = model.params["output.weight"].clone();
        let out_b = model.params["output.bias"].clone();
        let (out_w, out_b) = if tracking.params {
            let w = tape.variable(out_w);
            let b = tape.variable(out_b);
            params.push(("output.weight".into(), w));
            params.push(("output.bias".into(), b));
            (w, b)
        } else {
            (tape.constant(out_w), tape.constant(out_b))
        };

        // Per-step input rows. Token models embed outside the tape; when the
        // embedding table is trained its gradient is scattered from these leaves.
        let input_tracked = tracking.input || (tracking.params && cfg.is_token_model());
        let token_ids = match &batch.data {
            BatchData::Tokens(rows) => Some(rows.clone()),
            _ => None,
        };
        let mut inputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let x = step_input(model, batch, t, bsz);
            inputs.push(if input_tracked {
                tape.variable(x)
            } else {
                tape.constant(x)
            });
        }

        let lstm = cfg.cell_kind == CellKind::Lstm;
        let zeros = Tensor::zeros(&[bsz, e]);
        let mut h_prev: Vec<Var> = (0..cfg.num_layers)
            .map(|_| tape.constant(zeros.clone()))
            .collect();
        let mut c_prev: Vec<Var> = if lstm {
            (0..cfg.num_layers)
                .map(|_| tape.constant(zeros.clone()))
                .collect()
        } else {
            Vec::new()
        };

        let mut hidden = Vec::with_capacity(steps);
        let mut cells = Vec::with_capacity(if lstm { steps } else { 0 });
        let mut logits = Vec::new();
        for t in 0..steps {
            let mut below = inputs[t];
            let mut h_row = Vec::with_capacity(cfg.num_layers);
            let mut c_row = Vec::new();
            for (l, vars) in layers.iter().enumerate() {
                let h = match cfg.cell_kind {
                    CellKind::Vanilla => vanilla_step(&mut tape, vars, below, h_prev[l]),
                    CellKind::Gru => gru_step(&mut tape, vars, below, h_prev[l]),
                    CellKind::Lstm => {
                        let (h, c) = lstm_step(&mut tape, vars, below, h_prev[l], c_prev[l]);
                        c_prev[l] = c;
                        c_row.push(c);
                        h
                    }
                };
                h_prev[l] = h;
                h_row.push(h);
                below = h;
            }
            if cfg.output_head == OutputHead::PerStep {
                let z = tape.matmul(below, out_w);
                logits.push(tape.add_row(z, out_b));
            }
            hidden.push(h_row);
            if lstm {
                cells.push(c_row);
            }
        }

        if cfg.output_head == OutputHead::Final {
            let top = cfg.num_layers - 1;
            let last = if batch.lengths.iter().all(|&n| n == steps) {
                hidden[steps - 1][top]
            } else {
                let mut terms = Vec::new();
                for (t, row) in hidden.iter().enumerate() {
                    if !batch.lengths.iter().any(|&n| n == t + 1) {
                        continue;
                    }
                    let mask = Tensor::from_fn(&[bsz, e], |i| {
                        if batch.lengths[i / e] == t + 1 {
                            1.0
                        } else {
                            0.0
                        }
                    });
                    let m = tape.constant(mask);
                    terms.push(tape.mul(row[top], m));
                }
                tape.add_all(&terms)
            };
            let z = tape.matmul(last, out_w);
            logits.push(tape.add_row(z, out_b));
        }

        Ok(Self {
            model,
            tape,
            inputs,
            hidden,
            cell: lstm.then_some(cells),
            logits,
            params,
            token_ids,
            lengths: batch.lengths.clone(),
        })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn steps(&self) -> usize {
        self.hidden.len()
    }

    pub fn hidden(&self, t: usize, l: usize) -> Var {
        self.hidden[t][l]
    }

    pub fn cell(&self, t: usize, l: usize) -> Option<Var> {
        self.cell.as_ref().map(|c| c[t][l])
    }

    pub fn input(&self, t: usize) -> Var {
        self.inputs[t]
    }

    /// Per-step logits for language models, or the single classifier logits.
    pub fn logit_vars(&self) -> &[Var] {
        &self.logits
    }

    pub fn trace(&self) -> StateTrace {
        let cfg = &self.model.config;
        let (t_n, l_n, b_n, e) = (
            self.steps(),
            cfg.num_layers,
            self.lengths.len(),
            cfg.state_size,
        );
        let gather = |vars: &Vec<Vec<Var>>| {
            let mut out = Vec::with_capacity(t_n * l_n * b_n * e);
            for row in vars {
                for &v in row {
                    out.extend_from_slice(self.tape.value(v).data());
                }
            }
            Tensor::new(vec![t_n, l_n, b_n, e], out).expect("trace shape")
        };
        StateTrace {
            hidden: gather(&self.hidden),
            cell: self.cell.as_ref().map(gather),
            step_lengths: self.lengths.clone(),
        }
    }

    pub fn logits(&self) -> Tensor {
        match self.model.config.output_head {
            OutputHead::PerStep => {
                let mut data = Vec::new();
                for &v in &self.logits {
                    data.extend_from_slice(self.tape.value(v).data());
                }
                let v = self.model.config.output_size();
                Tensor::new(vec![self.logits.len(), self.lengths.len(), v], data)
                    .expect("logit shape")
            }
            OutputHead::Final => self.tape.value(self.logits[0]).clone(),
        }
    }

    /// Mean cross-entropy over supervised positions, added to the tape.
    pub fn loss(&mut self, targets: &Targets) -> Result<Var> {
        let cfg = &self.model.config;
        let k = cfg.output_size();
        match (cfg.output_head, targets) {
            (OutputHead::PerStep, Targets::PerStep(rows)) => {
                if rows.len() != self.lengths.len() {
                    return Err(Error::Input("one target row per batch item".into()));
                }
                let count: usize = self.lengths.iter().sum();
                let mut terms = Vec::with_capacity(self.steps());
                for t in 0..self.steps() {
                    let mut col = Vec::with_capacity(rows.len());
                    for (b, row) in rows.iter().enumerate() {
                        if t < self.lengths[b] {
                            let id = *row.get(t).ok_or_else(|| {
                                Error::Input(format!("target row {b} shorter than its input"))
                            })?;
                            if id >= k {
                                return Err(Error::Input(format!("target id {id} out of vocabulary")));
                            }
                            col.push(Some(id));
                        } else {
                            col.push(None);
                        }
                    }
                    let logits = self.logits[t];
                    terms.push(self.tape.softmax_xent(logits, col, 1.0 / count as f64));
                }
                Ok(self.tape.add_all(&terms))
            }
            (OutputHead::Final, Targets::Labels(labels)) => {
                if labels.len() != self.lengths.len() {
                    return Err(Error::Input("one label per batch item".into()));
                }
                if let Some(bad) = labels.iter().find(|&&y| y >= k) {
                    return Err(Error::Input(format!("label {bad} out of range")));
                }
                let col = labels.iter().map(|&y| Some(y)).collect();
                let logits = self.logits[0];
                Ok(self
                    .tape
                    .softmax_xent(logits, col, 1.0 / labels.len() as f64))
            }
            _ => Err(Error::Config("targets do not match the model's output head".into())),
        }
    }

    /// Gradient of `objective` with respect to the per-step inputs, `(B, T, input_dim)`.
    pub fn input_gradient(&self, objective: Var) -> Tensor {
        let bsz = self.lengths.len();
        let steps = self.steps();
        let d = self.model.config.input_dim;
        let grads = self.tape.backward(objective);
        let mut out = Tensor::zeros(&[bsz, steps, d]);
        for (t, &v) in self.inputs.iter().enumerate() {
            if let Some(g) = grads.get(v) {
                for b in 0..bsz {
                    out.slice_mut(&[b, t]).copy_from_slice(&g.data()[b * d..(b + 1) * d]);
                }
            }
        }
        out
    }

    /// Parameter gradients of `objective`, including the embedding table
    /// when the batch was given as token ids.
    pub fn param_gradients(&self, objective: Var) -> ModelParams {
        let mut grads = self.tape.backward(objective);
        let mut out: ModelParams = self
            .params
            .iter()
            .map(|(name, v)| {
                let shape = self.model.params[name].shape().to_vec();
                let g = grads
                    .take(*v)
                    .map(|g| g.reshape(&shape).expect("gradient shape"))
                    .unwrap_or_else(|| Tensor::zeros(&shape));
                (name.clone(), g)
            })
            .collect();
        if let (Some(table), Some(ids)) = (self.model.embedding(), &self.token_ids) {
            let d = table.cols();
            let mut g_table = Tensor::zeros(table.shape());
            for (t, &v) in self.inputs.iter().enumerate() {
                let Some(g) = grads.get(v) else { continue };
                for (b, row) in ids.iter().enumerate() {
                    if t >= self.lengths[b] {
                        continue;
                    }
                    let dst = g_table.slice_mut(&[row[t]]);
                    for (x, y) in dst.iter_mut().zip(&g.data()[b * d..(b + 1) * d]) {
                        *x += y;
                    }
                }
            }
            out.insert("embedding".into(), g_table);
        }
        out
    }
}

fn validate_batch(cfg: &RnnConfig, batch: &Batch) -> Result<usize> {
    let bsz = batch.batch_size();
    let steps = batch.steps();
    if bsz == 0 || steps == 0 {
        return Err(Error::Input("batch must contain at least one step".into()));
    }
    if batch.lengths.iter().any(|&n| n == 0 || n > steps) {
        return Err(Error::Input(format!(
            "step lengths {:?} must lie in 1..={steps}",
            batch.lengths
        )));
    }
    match &batch.data {
        BatchData::Tokens(rows) => {
            let v = cfg
                .vocab_size
                .ok_or_else(|| Error::Input("token ids given to a continuous-input model".into()))?;
            if rows.len() != bsz || rows.iter().any(|r| r.len() != steps) {
                return Err(Error::Input("token rows must all have length T".into()));
            }
            if let Some(bad) = rows.iter().flatten().find(|&&id| id >= v) {
                return Err(Error::Input(format!("token id {bad} outside vocabulary of {v}")));
            }
        }
        BatchData::Embedded(x) | BatchData::Continuous(x) => {
            let embedded = matches!(batch.data, BatchData::Embedded(_));
            if embedded != cfg.is_token_model() {
                return Err(Error::Input(if embedded {
                    "embedded inputs given to a continuous-input model".into()
                } else {
                    "continuous inputs given to a token model".into()
                }));
            }
            if x.shape() != [bsz, steps, cfg.input_dim] {
                return Err(Error::Input(format!(
                    "inputs have shape {:?}, expected ({bsz}, {steps}, {})",
                    x.shape(),
                    cfg.input_dim
                )));
            }
            if !x.is_finite() {
                return Err(Error::Input("inputs contain non-finite values".into()));
            }
        }
    }
    Ok(steps)
}

fn step_input(model: &Model, batch: &Batch, t: usize, bsz: usize) -> Tensor {
    let d = model.config.input_dim;
    let mut data = Vec::with_capacity(bsz * d);
    match &batch.data {
        BatchData::Tokens(rows) => {
            let table = model.embedding().expect("token model has an embedding");
            for row in rows {
                data.extend_from_slice(table.slice(&[row[t]]));
            }
        }
        BatchData::Embedded(x) | BatchData::Continuous(x) => {
            for b in 0..bsz {
                data.extend_from_slice(x.slice(&[b, t]));
            }
        }
    }
    Tensor::new(vec![bsz, d], data).expect("step input shape")
}

/// Embeds token rows into `(B, T, D)` using the model's table.
pub fn embed(model: &Model, ids: &[Vec<usize>]) -> Result<Tensor> {
    let table = model
        .embedding()
        .ok_or_else(|| Error::Config("model has no embedding table".into()))?;
    let (v, d) = (table.rows(), table.cols());
    let t = ids.first().map_or(0, Vec::len);
    let mut out = Tensor::zeros(&[ids.len(), t, d]);
    for (b, row) in ids.iter().enumerate() {
        if row.len() != t {
            return Err(Error::Input("token rows must have equal length".into()));
        }
        for (s, &id) in row.iter().enumerate() {
            if id >= v {
                return Err(Error::Input(format!("token id {id} outside vocabulary of {v}")));
            }
            out.slice_mut(&[b, s]).copy_from_slice(table.slice(&[id]));
        }
    }
    Ok(out)
}

/// Runs the model. With `capture` the full state trace is returned as well;
/// the logits do not depend on it.
pub fn forward(
    model: &Model,
    batch: &Batch,
    targets: Option<&Targets>,
    capture: bool,
) -> Result<ForwardResult> {
    let mut graph = Unrolled::new(model, batch, Tracking::default())?;
    let loss = match targets {
        Some(t) => {
            let v = graph.loss(t)?;
            Some(graph.tape().scalar(v))
        }
        None => None,
    };
    Ok(ForwardResult {
        logits: graph.logits(),
        trace: capture.then(|| graph.trace()),
        loss,
    })
}

/// A scalar built on top of an unrolled forward pass.
pub trait ScalarObjective {
    fn build(&self, graph: &mut Unrolled<'_>) -> Result<Var>;
}

impl<F> ScalarObjective for F
where
    F: Fn(&mut Unrolled<'_>) -> Result<Var>,
{
    fn build(&self, graph: &mut Unrolled<'_>) -> Result<Var> {
        self(graph)
    }
}

/// Gradient of a scalar objective with respect to the model input
/// (embedding vectors for token models), shape `(B, T, input_dim)`, together
/// with the objective's value.
pub fn gradient_wrt_input(
    model: &Model,
    batch: &Batch,
    objective: &dyn ScalarObjective,
) -> Result<(Tensor, f64)> {
    let mut graph = Unrolled::new(
        model,
        batch,
        Tracking {
            params: false,
            input: true,
        },
    )?;
    let out = objective.build(&mut graph)?;
    let value = graph.tape().scalar(out);
    Ok((graph.input_gradient(out), value))
}
