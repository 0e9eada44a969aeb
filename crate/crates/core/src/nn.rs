//! Layers, initialization, momentum SGD and the progress schedules.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Affine map `x·W + b` with `W: in × out`, `b: 1 × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// Uniform fan-based init on `[-s, s]`, `s = sqrt(6 / (in + out))`; zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let s = init_bound(in_dim, out_dim);
        let data = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-s..=s))
            .collect();
        Linear {
            w: Tensor::new(in_dim, out_dim, data).expect("sized"),
            b: Tensor::zeros(1, out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLinear {
        BoundLinear {
            w: tape.param(self.w.clone()),
            b: tape.param(self.b.clone()),
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = x.matmul(&self.w)?;
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(self.b.data()) {
                *o += b;
            }
        }
        Ok(out)
    }
}

/// Half-width of the uniform init range for a layer.
pub fn init_bound(in_dim: usize, out_dim: usize) -> f64 {
    (6.0 / (in_dim + out_dim) as f64).sqrt()
}

/// Parameter leaves of a [`Linear`] on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, self.w)?;
        tape.add_row(xw, self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Softmax,
    Sigmoid,
}

impl Activation {
    fn name(self) -> &'static str {
        match self {
            Activation::None => "none",
            Activation::Softmax => "softmax",
            Activation::Sigmoid => "sigmoid",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Activation::None),
            "softmax" => Some(Activation::Softmax),
            "sigmoid" => Some(Activation::Sigmoid),
            _ => None,
        }
    }

    fn apply_tape(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::None => Ok(x),
            Activation::Softmax => tape.softmax_rows(x),
            Activation::Sigmoid => Ok(tape.sigmoid(x)),
        }
    }

    fn apply(self, x: Tensor) -> Tensor {
        match self {
            Activation::None => x,
            Activation::Softmax => autodiff::softmax_rows(&x),
            Activation::Sigmoid => x.map(autodiff::sigmoid),
        }
    }
}

/// Stack of [`Linear`] layers with relu between them and `output` on top.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub output: Activation,
}

impl Mlp {
    /// Initializes an MLP with layer widths `dims`, deterministically from `seed`.
    pub fn init(dims: &[usize], output: Activation, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(dims, output, &mut rng)
    }

    pub fn init_with(dims: &[usize], output: Activation, rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::config(format!(
                "an MLP needs at least two dims, got {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(Error::config(format!("zero-width layer in {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        Ok(Mlp { layers, output })
    }

    pub fn from_layers(layers: Vec<Linear>, output: Activation) -> Result<Self> {
        check_chain(&layers)?;
        Ok(Mlp { layers, output })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        BoundMlp {
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
            output: self.output,
        }
    }

    /// Records the forward pass on a fresh binding of the parameters.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, BoundMlp)> {
        let bound = self.bind(tape);
        let y = bound.forward(tape, x)?;
        Ok((y, bound))
    }

    /// Forward pass without a tape.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let h = forward_layers(self.layers.iter(), x)?;
        Ok(self.output.apply(h))
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b])
    }
}

/// Applies `layers` with relu between consecutive layers (none after the last).
pub(crate) fn forward_layers<'a>(
    layers: impl ExactSizeIterator<Item = &'a Linear>,
    x: &Tensor,
) -> Result<Tensor> {
    let n = layers.len();
    let mut h = x.clone();
    for (i, layer) in layers.enumerate() {
        h = layer.apply(&h)?;
        if i + 1 < n {
            h = h.map(|v| if v > 0.0 { v } else { 0.0 });
        }
    }
    Ok(h)
}

pub(crate) fn check_chain(layers: &[Linear]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::config("an MLP needs at least one layer"));
    }
    for (i, pair) in layers.windows(2).enumerate() {
        if pair[0].out_dim() != pair[1].in_dim() {
            return Err(Error::config(format!(
                "layer {i} out_dim {} does not match layer {} in_dim {}",
                pair[0].out_dim(),
                i + 1,
                pair[1].in_dim()
            )));
        }
    }
    for l in layers {
        if l.b.shape() != (1, l.out_dim()) {
            return Err(Error::config(format!(
                "bias shape {:?} does not match out_dim {}",
                l.b.shape(),
                l.out_dim()
            )));
        }
    }
    Ok(())
}

/// Tape leaves for an [`Mlp`].
#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub layers: Vec<BoundLinear>,
    pub output: Activation,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = forward_bound(&self.layers, tape, x)?;
        self.output.apply_tape(tape, h)
    }

    pub fn params(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|l| [l.w, l.b])
    }
}

pub(crate) fn forward_bound(layers: &[BoundLinear], tape: &mut Tape, x: Var) -> Result<Var> {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        h = layer.forward(tape, h)?;
        if i + 1 < layers.len() {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Mini-batch SGD with heavy-ball momentum.
///
/// `v ← μ·v + g; θ ← θ − η·m·v` where `m` is the parameter's learning-rate
/// multiplier.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Default for SgdMomentum {
    fn default() -> Self {
        Self::new(0.9)
    }
}

impl SgdMomentum {
    pub fn new(momentum: f64) -> Self {
        SgdMomentum {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// One update. `params`, `grads` and `lr_multipliers` are parallel lists
    /// in a fixed order that must not change between calls.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Option<&Tensor>],
        lr_multipliers: &[f64],
        eta: f64,
    ) -> Result<()> {
        if grads.len() != params.len() || lr_multipliers.len() != params.len() {
            return Err(Error::contract(format!(
                "sgd_step got {} params, {} grads, {} multipliers",
                params.len(),
                grads.len(),
                lr_multipliers.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|p| Tensor::zeros(p.rows(), p.cols()))
                .collect();
        } else if self.velocity.len() != params.len() {
            return Err(Error::contract("parameter list changed between steps"));
        }
        for (i, ((p, g), &mult)) in params.iter_mut().zip(grads).zip(lr_multipliers).enumerate() {
            let g = g.ok_or_else(|| Error::contract(format!("missing gradient for parameter {i}")))?;
            let v = &mut self.velocity[i];
            if g.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::Dimension {
                    op: "sgd_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            let step = eta * mult;
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv -= step * *vv;
            }
        }
        Ok(())
    }
}

fn check_progress(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::contract(format!("training progress {p} outside [0, 1]")))
    }
}

/// Annealed learning rate `η₀ / (1 + α·p)^β`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub eta0: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            eta0: 0.01,
            alpha: 10.0,
            beta: 0.75,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0 && self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::config(format!("invalid lr schedule {self:?}")));
        }
        Ok(())
    }

    pub fn at(&self, p: f64) -> Result<f64> {
        check_progress(p)?;
        Ok(self.eta0 / (1.0 + self.alpha * p).powf(self.beta))
    }
}

/// Adaptation weight ramp `λ_max · (2 / (1 + exp(−δ·p)) − 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaSchedule {
    pub delta: f64,
    pub lambda_max: f64,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        LambdaSchedule {
            delta: 10.0,
            lambda_max: 1.0,
        }
    }
}

impl LambdaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.lambda_max >= 0.0) {
            return Err(Error::config(format!("invalid lambda schedule {self:?}")));
        }
        Ok(())
    }

    pub fn at(&self, p: f64) -> Result<f64> {
        check_progress(p)?;
        Ok(self.lambda_max * (2.0 / (1.0 + (-self.delta * p).exp()) - 1.0))
    }
}

pub fn lr_at(schedule: &LrSchedule, p: f64) -> Result<f64> {
    schedule.at(p)
}

pub fn lambda_at(schedule: &LambdaSchedule, p: f64) -> Result<f64> {
    schedule.at(p)
}

// ---------------------------------------------------------------------------
// Text serialization
//
// A layer is written as
//
//     linear <in> <out>
//     <in*out weights, row-major, space separated>
//     <out biases>
//
// with every value in Rust's shortest round-trip float notation, so a
// write/read cycle is exact.

pub(crate) fn write_values(out: &mut String, values: &[f64]) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        first = false;
        write!(out, "{v:?}").expect("write to string");
    }
    out.push('\n');
}

pub(crate) fn write_linear(out: &mut String, layer: &Linear) {
    writeln!(out, "linear {} {}", layer.in_dim(), layer.out_dim()).expect("write to string");
    write_values(out, layer.w.data());
    write_values(out, layer.b.data());
}

pub(crate) fn write_mlp(out: &mut String, mlp: &Mlp) {
    writeln!(out, "mlp {} {}", mlp.layers.len(), mlp.output.name()).expect("write to string");
    for l in &mlp.layers {
        write_linear(out, l);
    }
}

/// Line cursor used by the checkpoint reader.
pub(crate) struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    pub line: usize,
}

impl<'a> Lines<'a> {
    pub fn new(text: &'a str) -> Self {
        Lines {
            iter: text.lines().enumerate(),
            line: 0,
        }
    }

    pub fn next_line(&mut self) -> Result<&'a str> {
        let (i, l) = self.iter.next().ok_or_else(|| Error::Parse {
            line: self.line + 1,
            message: "unexpected end of file".into(),
        })?;
        self.line = i + 1;
        Ok(l)
    }

    pub fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            message: message.into(),
        }
    }

    /// Reads a line of the form `<keyword> <fields...>` and returns the fields.
    pub fn expect(&mut self, keyword: &str) -> Result<Vec<&'a str>> {
        let l = self.next_line()?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some(keyword) {
            return Err(self.err(format!("expected `{keyword}`, found `{l}`")));
        }
        Ok(parts.collect())
    }

    pub fn usize_field(&self, s: Option<&&str>) -> Result<usize> {
        s.and_then(|v| v.parse().ok())
            .ok_or_else(|| self.err("expected a non-negative integer"))
    }

    pub fn values(&mut self, count: usize) -> Result<Vec<f64>> {
        let l = self.next_line()?;
        let vals = l
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| self.err(format!("bad number: {e}")))?;
        if vals.len() != count {
            return Err(self.err(format!("expected {count} values, found {}", vals.len())));
        }
        Ok(vals)
    }
}

pub(crate) fn read_linear(lines: &mut Lines<'_>) -> Result<Linear> {
    let f = lines.expect("linear")?;
    let in_dim = lines.usize_field(f.first())?;
    let out_dim = lines.usize_field(f.get(1))?;
    let w = lines.values(in_dim * out_dim)?;
    let b = lines.values(out_dim)?;
    Ok(Linear {
        w: Tensor::new(in_dim, out_dim, w)?,
        b: Tensor::new(1, out_dim, b)?,
    })
}

pub(crate) fn read_mlp(lines: &mut Lines<'_>) -> Result<Mlp> {
    let f = lines.expect("mlp")?;
    let n = lines.usize_field(f.first())?;
    let output = f
        .get(1)
        .and_then(|s| Activation::parse(s))
        .ok_or_else(|| lines.err("unknown output activation"))?;
    let layers = (0..n)
        .map(|_| read_linear(lines))
        .collect::<Result<Vec<_>>>()?;
    Mlp::from_layers(layers, output)
}
