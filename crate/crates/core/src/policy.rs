//! Softmax policies over a small ReLU scorer, with exact reverse-mode
//! gradients and a plain-text checkpoint format.
//!
//! The scorer is a stack of dense layers. Every layer but the last applies a
//! ReLU; the last emits one score per action and the policy is the softmax of
//! those scores. Log-probabilities are computed with log-sum-exp after
//! subtracting the maximum score, never as `ln(probs)`.
//!
//! # Checkpoint grammar
//!
//! ```text
//! semi-crm-policy v1
//! input_dim <d>
//! action_count <k>
//! activation relu
//! layers <L>
//! # repeated L times, l = 0..L
//! layer <l> <outputs> <inputs>
//! w <inputs values>          # one line per output row, row-major
//! b <outputs values>
//! ```
//!
//! Tokens are separated by single spaces and values are printed as `{:.16e}`
//! (17 significant digits), so a write/read cycle is lossless. Blank lines
//! and lines starting with `#` are ignored on read.

use std::io::{BufRead, Write};

use thiserror::Error;

use crate::rng::RngState;

pub const CHECKPOINT_HEADER: &str = "semi-crm-policy v1";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("context has dimension {actual}, policy expects {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("action {action} out of range for {count} actions")]
    ActionOutOfRange { action: usize, count: usize },
    #[error("invalid policy shape: {0}")]
    InvalidShape(String),
    #[error("checkpoint line {line}: {message}")]
    Checkpoint { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

/// Whether [`SoftmaxPolicy::grad_scalar`] differentiates `log π(a|x)` or
/// `π(a|x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    LogProb,
    Prob,
}

/// Dense layer, `outputs x inputs` weights stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub outputs: usize,
    pub inputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(outputs: usize, inputs: usize) -> Self {
        Self {
            outputs,
            inputs,
            weights: vec![0.0; outputs * inputs],
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, input: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (o, row) in self.weights.chunks_exact(self.inputs).enumerate() {
            out[o] += row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxPolicy {
    input_dim: usize,
    action_count: usize,
    activation: Activation,
    layers: Vec<Dense>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Input to each layer (the context for layer 0).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer; the last entry holds the scores.
    pre: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ForwardPass {
    pub fn scores(&self) -> &[f64] {
        self.pre.last().expect("policy has at least one layer")
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scores.iter().map(|s| s - lse).collect()
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Lowest index attaining the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl SoftmaxPolicy {
    /// Glorot-uniform weights drawn from `rng` layer by layer in row-major
    /// order, zero biases.
    pub fn new(
        input_dim: usize,
        hidden_widths: &[usize],
        action_count: usize,
        rng: &mut RngState,
    ) -> Result<Self, PolicyError> {
        let mut policy = Self::zeros(input_dim, hidden_widths, action_count)?;
        for layer in &mut policy.layers {
            let limit = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.uniform_range(-limit, limit);
            }
        }
        Ok(policy)
    }

    /// All weights and biases zero: the uniform policy.
    pub fn zeros(
        input_dim: usize,
        hidden_widths: &[usize],
        action_count: usize,
    ) -> Result<Self, PolicyError> {
        if input_dim == 0 || action_count == 0 || hidden_widths.contains(&0) {
            return Err(PolicyError::InvalidShape(format!(
                "input_dim={input_dim}, hidden={hidden_widths:?}, actions={action_count}"
            )));
        }
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden_widths);
        widths.push(action_count);
        let layers = widths
            .windows(2)
            .map(|w| Dense::zeros(w[1], w[0]))
            .collect();
        Ok(Self {
            input_dim,
            action_count,
            activation: Activation::Relu,
            layers,
        })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self, PolicyError> {
        let first = layers
            .first()
            .ok_or_else(|| PolicyError::InvalidShape("no layers".into()))?;
        let input_dim = first.inputs;
        let mut expected_in = input_dim;
        for (l, layer) in layers.iter().enumerate() {
            if layer.inputs != expected_in
                || layer.outputs == 0
                || layer.weights.len() != layer.inputs * layer.outputs
                || layer.bias.len() != layer.outputs
            {
                return Err(PolicyError::InvalidShape(format!(
                    "layer {l} is not congruent"
                )));
            }
            if layer
                .weights
                .iter()
                .chain(&layer.bias)
                .any(|v| !v.is_finite())
            {
                return Err(PolicyError::InvalidShape(format!(
                    "layer {l} has non-finite parameters"
                )));
            }
            expected_in = layer.outputs;
        }
        Ok(Self {
            input_dim,
            action_count: expected_in,
            activation: Activation::Relu,
            layers,
        })
    }

    /// A linear policy over one-hot contexts reproducing a strictly positive
    /// row-stochastic table: `probs(e_x) == table[x]` up to rounding.
    pub fn from_table(table: &[Vec<f64>]) -> Result<Self, PolicyError> {
        let contexts = table.len();
        let actions = table.first().map_or(0, Vec::len);
        let mut layer = Dense::zeros(actions, contexts);
        for (x, row) in table.iter().enumerate() {
            if row.len() != actions || row.iter().any(|p| !(*p > 0.0)) {
                return Err(PolicyError::InvalidShape(format!(
                    "table row {x} must be strictly positive with {actions} entries"
                )));
            }
            for (a, p) in row.iter().enumerate() {
                layer.weights[a * contexts + x] = p.ln();
            }
        }
        Self::from_layers(vec![layer])
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.outputs)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    fn check_context(&self, x: &[f64]) -> Result<(), PolicyError> {
        if x.len() != self.input_dim {
            return Err(PolicyError::DimensionMismatch {
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn check_action(&self, a: usize) -> Result<(), PolicyError> {
        if a >= self.action_count {
            return Err(PolicyError::ActionOutOfRange {
                action: a,
                count: self.action_count,
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardPass, PolicyError> {
        self.check_context(x)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&current);
            let next = if l < last {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                Vec::new()
            };
            inputs.push(std::mem::replace(&mut current, next));
            pre.push(z);
        }
        let log_probs = log_softmax(pre.last().unwrap());
        let probs = softmax(pre.last().unwrap());
        Ok(ForwardPass {
            inputs,
            pre,
            log_probs,
            probs,
        })
    }

    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>, PolicyError> {
        Ok(self.forward(x)?.pre.pop().unwrap())
    }

    pub fn probs(&self, x: &[f64]) -> Result<Vec<f64>, PolicyError> {
        Ok(self.forward(x)?.probs)
    }

    pub fn log_probs(&self, x: &[f64]) -> Result<Vec<f64>, PolicyError> {
        Ok(self.forward(x)?.log_probs)
    }

    /// Adds the gradient of `Σ_a dscores[a] · score_a` to `grad`, i.e. backpropagates
    /// an upstream derivative with respect to the scores.
    pub fn accumulate_backward(
        &self,
        pass: &ForwardPass,
        dscores: &[f64],
        grad: &mut PolicyGradient,
    ) {
        debug_assert_eq!(dscores.len(), self.action_count);
        let mut delta = dscores.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &pass.inputs[l];
            let gw = &mut grad.weights[l];
            let gb = &mut grad.biases[l];
            for (o, d) in delta.iter().enumerate() {
                gb[o] += d;
                for (g, x) in gw[o * layer.inputs..(o + 1) * layer.inputs]
                    .iter_mut()
                    .zip(input)
                {
                    *g += d * x;
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; layer.inputs];
                for (row, d) in layer.weights.chunks_exact(layer.inputs).zip(&delta) {
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += w * d;
                    }
                }
                for (p, z) in prev.iter_mut().zip(&pass.pre[l - 1]) {
                    if *z <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }

    /// Gradient of `log π(a|x)` or `π(a|x)` with respect to every parameter.
    pub fn grad_scalar(
        &self,
        x: &[f64],
        a: usize,
        mode: GradMode,
    ) -> Result<PolicyGradient, PolicyError> {
        self.check_action(a)?;
        let pass = self.forward(x)?;
        let scale = match mode {
            GradMode::LogProb => 1.0,
            GradMode::Prob => pass.probs[a],
        };
        let dscores = log_prob_score_grad(&pass.probs, a, scale);
        let mut grad = PolicyGradient::zeros_like(self);
        self.accumulate_backward(&pass, &dscores, &mut grad);
        Ok(grad)
    }

    /// Inverse-CDF draw from `probs(x)` using one uniform from `rng`.
    pub fn sample_action(&self, x: &[f64], rng: &mut RngState) -> Result<usize, PolicyError> {
        Ok(sample_from(&self.probs(x)?, rng))
    }

    pub fn argmax_action(&self, x: &[f64]) -> Result<usize, PolicyError> {
        Ok(argmax(&self.probs(x)?))
    }

    /// `θ ← θ − lr · direction`.
    pub fn apply_step(&mut self, direction: &PolicyGradient, learning_rate: f64) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (w, g) in layer.weights.iter_mut().zip(&direction.weights[l]) {
                *w -= learning_rate * g;
            }
            for (b, g) in layer.bias.iter_mut().zip(&direction.biases[l]) {
                *b -= learning_rate * g;
            }
        }
    }

    /// Parameters flattened layer by layer: weights row-major, then biases.
    pub fn params_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<(), PolicyError> {
        if params.len() != self.param_count() {
            return Err(PolicyError::InvalidShape(format!(
                "{} parameters given, policy has {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut it = params.iter();
        for layer in &mut self.layers {
            for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *v = *it.next().unwrap();
            }
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{CHECKPOINT_HEADER}")?;
        writeln!(out, "input_dim {}", self.input_dim)?;
        writeln!(out, "action_count {}", self.action_count)?;
        writeln!(out, "activation relu")?;
        writeln!(out, "layers {}", self.layers.len())?;
        for (l, layer) in self.layers.iter().enumerate() {
            writeln!(out, "layer {l} {} {}", layer.outputs, layer.inputs)?;
            for row in layer.weights.chunks_exact(layer.inputs) {
                writeln!(out, "w {}", join_values(row))?;
            }
            writeln!(out, "b {}", join_values(&layer.bias))?;
        }
        Ok(())
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }

    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Self, PolicyError> {
        let mut lines = CheckpointLines::new(input);
        let (n, header) = lines.next_line()?;
        if header != CHECKPOINT_HEADER {
            return Err(checkpoint_err(
                n,
                format!("expected header `{CHECKPOINT_HEADER}`, found `{header}`"),
            ));
        }
        let input_dim = lines.keyed_usize("input_dim")?;
        let action_count = lines.keyed_usize("action_count")?;
        let (n, act) = lines.next_line()?;
        if act != "activation relu" {
            return Err(checkpoint_err(
                n,
                format!("unsupported activation line `{act}`"),
            ));
        }
        let layer_count = lines.keyed_usize("layers")?;
        let mut layers = Vec::with_capacity(layer_count);
        for l in 0..layer_count {
            let (n, line) = lines.next_line()?;
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 4 || parts[0] != "layer" || parts[1] != l.to_string() {
                return Err(checkpoint_err(
                    n,
                    format!("expected `layer {l} <outputs> <inputs>`"),
                ));
            }
            let outputs = parse_usize(parts[2], n)?;
            let inputs = parse_usize(parts[3], n)?;
            let mut layer = Dense::zeros(outputs, inputs);
            for o in 0..outputs {
                let row = lines.values("w", inputs)?;
                layer.weights[o * inputs..(o + 1) * inputs].copy_from_slice(&row);
            }
            layer.bias = lines.values("b", outputs)?;
            layers.push(layer);
        }
        let policy =
            Self::from_layers(layers).map_err(|e| checkpoint_err(lines.line_no, e.to_string()))?;
        if policy.input_dim != input_dim || policy.action_count != action_count {
            return Err(checkpoint_err(
                lines.line_no,
                format!(
                    "declared shape {input_dim}->{action_count} disagrees with layers {}->{}",
                    policy.input_dim, policy.action_count
                ),
            ));
        }
        Ok(policy)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), PolicyError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, PolicyError> {
        let file = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }
}

/// `∂(scale · log π_a)/∂scores = scale · (e_a − π)`.
pub(crate) fn log_prob_score_grad(probs: &[f64], a: usize, scale: f64) -> Vec<f64> {
    probs
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let indicator = if j == a { 1.0 } else { 0.0 };
            scale * (indicator - p)
        })
        .collect()
}

/// Inverse-CDF sampling from a probability vector.
pub fn sample_from(probs: &[f64], rng: &mut RngState) -> usize {
    let u = rng.uniform();
    let mut cumulative = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cumulative += p;
        if u < cumulative {
            return i;
        }
    }
    // Rounding left the total below u; fall back to the last positive entry.
    probs
        .iter()
        .rposition(|p| *p > 0.0)
        .unwrap_or(probs.len() - 1)
}

fn join_values(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:.16e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn checkpoint_err(line: usize, message: String) -> PolicyError {
    PolicyError::Checkpoint { line, message }
}

fn parse_usize(token: &str, line: usize) -> Result<usize, PolicyError> {
    token
        .parse()
        .map_err(|_| checkpoint_err(line, format!("`{token}` is not a non-negative integer")))
}

struct CheckpointLines<R> {
    input: R,
    line_no: usize,
}

impl<R: BufRead> CheckpointLines<R> {
    fn new(input: R) -> Self {
        Self { input, line_no: 0 }
    }

    fn next_line(&mut self) -> Result<(usize, String), PolicyError> {
        loop {
            let mut buf = String::new();
            if self.input.read_line(&mut buf)? == 0 {
                return Err(checkpoint_err(
                    self.line_no + 1,
                    "unexpected end of checkpoint".into(),
                ));
            }
            self.line_no += 1;
            let trimmed = buf.trim_end_matches(['\n', '\r']);
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            return Ok((self.line_no, trimmed.to_string()));
        }
    }

    fn keyed_usize(&mut self, key: &str) -> Result<usize, PolicyError> {
        let (n, line) = self.next_line()?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => parse_usize(v, n),
            _ => Err(checkpoint_err(n, format!("expected `{key} <value>`"))),
        }
    }

    fn values(&mut self, tag: &str, count: usize) -> Result<Vec<f64>, PolicyError> {
        let (n, line) = self.next_line()?;
        let mut tokens = line.split(' ');
        if tokens.next() != Some(tag) {
            return Err(checkpoint_err(n, format!("expected a `{tag}` line")));
        }
        let values = tokens
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| checkpoint_err(n, format!("`{t}` is not a number")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() != count {
            return Err(checkpoint_err(
                n,
                format!("expected {count} values, found {}", values.len()),
            ));
        }
        Ok(values)
    }
}

/// Gradient with the same layer shapes as the policy it was computed for.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyGradient {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl PolicyGradient {
    pub fn zeros_like(policy: &SoftmaxPolicy) -> Self {
        Self {
            weights: policy
                .layers
                .iter()
                .map(|l| vec![0.0; l.weights.len()])
                .collect(),
            biases: policy
                .layers
                .iter()
                .map(|l| vec![0.0; l.bias.len()])
                .collect(),
        }
    }

    pub fn is_congruent(&self, policy: &SoftmaxPolicy) -> bool {
        self.weights.len() == policy.layers.len()
            && policy.layers.iter().enumerate().all(|(l, layer)| {
                self.weights[l].len() == layer.weights.len()
                    && self.biases[l].len() == layer.bias.len()
            })
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }

    /// Same order as [`SoftmaxPolicy::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }

    /// `self += factor · other`.
    pub fn add_scaled(&mut self, other: &PolicyGradient, factor: f64) {
        let other = other.flat();
        for (v, o) in self.values_mut().zip(other) {
            *v += factor * o;
        }
    }

    pub fn merge(mut self, other: PolicyGradient) -> PolicyGradient {
        for (l, (w, b)) in other.weights.iter().zip(&other.biases).enumerate() {
            for (s, o) in self.weights[l].iter_mut().zip(w) {
                *s += o;
            }
            for (s, o) in self.biases[l].iter_mut().zip(b) {
                *s += o;
            }
        }
        self
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.values_mut() {
            *v *= factor;
        }
    }

    pub fn norm(&self) -> f64 {
        self.flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
