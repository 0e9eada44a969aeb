//! The multi-adversarial network, its baselines, and the training loop.
//!
//! Every algorithm shares one graph: a feature extractor `G_f`, a softmax
//! label predictor `G_y`, and a bank of sigmoid domain discriminators behind
//! a gradient-reversal layer.
//!
//! * `mada`: K discriminators; discriminator `k` sees each row's features
//!   scaled by the predicted probability of class `k`.
//! * `dann`: a single discriminator over unweighted features.
//! * `source_only`: no domain loss.
//!
//! The tape always minimizes `label_loss + domain_loss`. Because the
//! features reach the discriminators through `grad_reverse(·, λ)`, the
//! discriminators descend on the domain loss while the feature extractor
//! receives `−λ` times its gradient, which is the saddle point of
//! `label_loss − λ·domain_loss`.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::data::{make_batches, Batch, Dataset};
use crate::error::{Error, Result};
use crate::eval::{self, Metrics, ProbeConfig};
use crate::nn::{
    self, forward_bound, Activation, BoundLinear, BoundMlp, LambdaSchedule, Linear, Lines,
    LrSchedule, Mlp, SgdMomentum,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Mada,
    Dann,
    SourceOnly,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Mada => "mada",
            Algorithm::Dann => "dann",
            Algorithm::SourceOnly => "source_only",
        }
    }

    /// Number of domain discriminators the algorithm trains.
    pub fn discriminator_count(self, class_count: usize) -> usize {
        match self {
            Algorithm::Mada => class_count,
            Algorithm::Dann => 1,
            Algorithm::SourceOnly => 0,
        }
    }
}

/// How the K discriminators share parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareMode {
    #[default]
    Independent,
    /// The first (lowest) layer is shared.
    Partial,
    Full,
}

impl ShareMode {
    fn name(self) -> &'static str {
        match self {
            ShareMode::Independent => "independent",
            ShareMode::Partial => "partial",
            ShareMode::Full => "full",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "independent" => Some(ShareMode::Independent),
            "partial" => Some(ShareMode::Partial),
            "full" => Some(ShareMode::Full),
            _ => None,
        }
    }
}

/// Domain discriminators stored as a layer pool plus one route per
/// discriminator. Shared layers appear in several routes and therefore
/// exist exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorBank {
    pub share_mode: ShareMode,
    pub pool: Vec<Linear>,
    pub routes: Vec<Vec<usize>>,
}

impl DiscriminatorBank {
    /// `dims` runs from the bottleneck width to 1.
    pub fn init(
        count: usize,
        dims: &[usize],
        share_mode: ShareMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if dims.len() < 2 || dims[dims.len() - 1] != 1 {
            return Err(Error::config(format!(
                "discriminator dims must end in 1, got {dims:?}"
            )));
        }
        let depth = dims.len() - 1;
        let shared_depth = match share_mode {
            ShareMode::Independent => 0,
            ShareMode::Partial => 1.min(depth),
            ShareMode::Full => depth,
        };
        let mut pool = Vec::new();
        let mut shared = Vec::new();
        for d in 0..shared_depth {
            shared.push(pool.len());
            pool.push(Linear::init(dims[d], dims[d + 1], rng));
        }
        let mut routes = Vec::with_capacity(count);
        for _ in 0..count {
            let mut route = shared.clone();
            for d in shared_depth..depth {
                route.push(pool.len());
                pool.push(Linear::init(dims[d], dims[d + 1], rng));
            }
            routes.push(route);
        }
        if count == 0 {
            pool.clear();
        }
        Ok(DiscriminatorBank {
            share_mode,
            pool,
            routes,
        })
    }

    pub fn len(&self) -> usize {
        self.routes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.routes.is_empty()
    }

    /// Discriminator `k` as a standalone network (copies the parameters).
    pub fn discriminator(&self, k: usize) -> Mlp {
        Mlp {
            layers: self.routes[k].iter().map(|&i| self.pool[i].clone()).collect(),
            output: Activation::Sigmoid,
        }
    }

    fn validate(&self, in_dim: usize) -> Result<()> {
        for route in &self.routes {
            if route.iter().any(|&i| i >= self.pool.len()) {
                return Err(Error::config("discriminator route points outside the pool"));
            }
            let layers: Vec<Linear> = route.iter().map(|&i| self.pool[i].clone()).collect();
            nn::check_chain(&layers)?;
            if layers[0].in_dim() != in_dim || layers[layers.len() - 1].out_dim() != 1 {
                return Err(Error::config("discriminator must map the bottleneck to 1 output"));
            }
        }
        Ok(())
    }
}

/// Layer widths of the whole network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub feature_hidden: Vec<usize>,
    pub bottleneck_dim: usize,
    pub label_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            feature_hidden: vec![64],
            bottleneck_dim: 32,
            label_hidden: Vec::new(),
            discriminator_hidden: vec![64, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MadaModel {
    pub class_count: usize,
    pub feature_extractor: Mlp,
    pub label_predictor: Mlp,
    pub discriminators: DiscriminatorBank,
}

impl MadaModel {
    pub fn new(
        input_dim: usize,
        class_count: usize,
        arch: &Architecture,
        discriminator_count: usize,
        share_mode: ShareMode,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || class_count == 0 || arch.bottleneck_dim == 0 {
            return Err(Error::config("input_dim, class_count and bottleneck_dim must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chain = |head: usize, mid: &[usize], tail: usize| {
            let mut d = vec![head];
            d.extend_from_slice(mid);
            d.push(tail);
            d
        };
        let feature_extractor = Mlp::init_with(
            &chain(input_dim, &arch.feature_hidden, arch.bottleneck_dim),
            Activation::None,
            &mut rng,
        )?;
        let label_predictor = Mlp::init_with(
            &chain(arch.bottleneck_dim, &arch.label_hidden, class_count),
            Activation::Softmax,
            &mut rng,
        )?;
        let discriminators = DiscriminatorBank::init(
            discriminator_count,
            &chain(arch.bottleneck_dim, &arch.discriminator_hidden, 1),
            share_mode,
            &mut rng,
        )?;
        Ok(MadaModel {
            class_count,
            feature_extractor,
            label_predictor,
            discriminators,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.feature_extractor.in_dim()
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.feature_extractor.out_dim()
    }

    /// All parameters in a fixed order: feature extractor, label predictor,
    /// discriminator pool.
    pub fn params(&self) -> Vec<&Tensor> {
        self.feature_extractor
            .params()
            .chain(self.label_predictor.params())
            .chain(self.discriminators.pool.iter().flat_map(|l| [&l.w, &l.b]))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.feature_extractor
            .params_mut()
            .chain(self.label_predictor.params_mut())
            .chain(
                self.discriminators
                    .pool
                    .iter_mut()
                    .flat_map(|l| [&mut l.w, &mut l.b]),
            )
            .collect()
    }

    /// Group of each parameter, aligned with [`MadaModel::params`].
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let f = 2 * self.feature_extractor.layers.len();
        let y = 2 * self.label_predictor.layers.len();
        let d = 2 * self.discriminators.pool.len();
        std::iter::repeat_n(ParamGroup::FeatureExtractor, f)
            .chain(std::iter::repeat_n(ParamGroup::LabelPredictor, y))
            .chain(std::iter::repeat_n(ParamGroup::Discriminator, d))
            .collect()
    }

    /// Learning-rate multiplier of each parameter: 1 for the feature
    /// extractor, `fresh` for the label predictor and discriminators.
    pub fn lr_multipliers(&self, fresh: f64) -> Vec<f64> {
        self.param_groups()
            .into_iter()
            .map(|g| match g {
                ParamGroup::FeatureExtractor => 1.0,
                _ => fresh,
            })
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            feature: self.feature_extractor.bind(tape),
            label: self.label_predictor.bind(tape),
            pool: self.discriminators.pool.iter().map(|l| l.bind(tape)).collect(),
        }
    }

    /// Bottleneck features, without a tape.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.feature_extractor.infer(x)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::Dimension {
                op: "model input",
                left: x.shape(),
                right: (x.rows(), self.input_dim()),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    FeatureExtractor,
    LabelPredictor,
    Discriminator,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::FeatureExtractor => "feature_extractor",
            ParamGroup::LabelPredictor => "label_predictor",
            ParamGroup::Discriminator => "discriminators",
        }
    }
}

/// Tape leaves of a [`MadaModel`].
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub feature: BoundMlp,
    pub label: BoundMlp,
    pub pool: Vec<BoundLinear>,
}

impl BoundModel {
    /// Parameter leaves in [`MadaModel::params`] order.
    pub fn param_vars(&self) -> Vec<Var> {
        self.feature
            .params()
            .chain(self.label.params())
            .chain(self.pool.iter().flat_map(|l| [l.w, l.b]))
            .collect()
    }

    fn discriminator(&self, tape: &mut Tape, route: &[usize], x: Var) -> Result<Var> {
        let layers: Vec<BoundLinear> = route.iter().map(|&i| self.pool[i]).collect();
        let logits = forward_bound(&layers, tape, x)?;
        Ok(tape.sigmoid(logits))
    }
}

/// Scalar summary of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    pub label_loss: f64,
    pub domain_loss: f64,
    /// `label_loss − lambda_used · domain_loss`.
    pub total_objective: f64,
    pub lambda_used: f64,
    /// Learning rate of the step; zero when the objective is evaluated outside training.
    pub eta_used: f64,
}

/// A recorded objective: scalar summary plus the tape nodes behind it.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub output: StepOutput,
    /// `label_loss + domain_loss`, the node to differentiate.
    pub loss: Var,
    pub label_loss: Var,
    pub domain_loss: Option<Var>,
    pub features: Var,
    pub probs: Var,
    pub bound: BoundModel,
}

impl LossGraph {
    /// Gradient of every model parameter, in [`MadaModel::params`] order.
    pub fn param_grads<'g>(&self, grads: &'g Gradients) -> Vec<Option<&'g Tensor>> {
        self.bound.param_vars().into_iter().map(|v| grads.get(v)).collect()
    }
}

/// Knobs for how the domain branch sees the class probabilities.
#[derive(Debug, Clone, Default)]
pub struct GraphOptions {
    /// Let discriminator gradients flow into the label predictor through
    /// the attention weights.
    pub attention_flow: bool,
    /// Use these attention weights (`n × K`) instead of the live softmax.
    pub frozen_attention: Option<Tensor>,
}

/// Records the objective of `algorithm` on `tape`.
pub fn build_objective(
    model: &MadaModel,
    batch: &Batch,
    lambda: f64,
    algorithm: Algorithm,
    options: &GraphOptions,
    tape: &mut Tape,
) -> Result<LossGraph> {
    if batch.source_count == 0 {
        return Err(Error::contract("batch has no source rows"));
    }
    if batch.class_labels.len() != batch.source_count || batch.x.rows() != batch.len() {
        return Err(Error::contract("batch bookkeeping is inconsistent"));
    }
    model.check_input(&batch.x)?;
    let k = model.class_count;
    if let Some(&bad) = batch.class_labels.iter().find(|&&l| l >= k) {
        return Err(Error::config(format!(
            "label {bad} exceeds the model's {k} classes"
        )));
    }
    let wanted = algorithm.discriminator_count(k);
    if algorithm != Algorithm::SourceOnly && model.discriminators.len() != wanted {
        return Err(Error::config(format!(
            "{} needs {wanted} discriminators, model has {}",
            algorithm.name(),
            model.discriminators.len()
        )));
    }

    let bound = model.bind(tape);
    let x = tape.constant(batch.x.clone());
    let features = bound.feature.forward(tape, x)?;
    let probs = bound.label.forward(tape, features)?;
    let source_probs = tape.slice_rows(probs, 0, batch.source_count)?;
    let label_loss = tape.cross_entropy(source_probs, &batch.class_labels)?;

    let domain_loss = match algorithm {
        Algorithm::SourceOnly => None,
        Algorithm::Dann => {
            let reversed = tape.grad_reverse(features, lambda)?;
            let pred = bound.discriminator(tape, &model.discriminators.routes[0], reversed)?;
            let ones = Tensor::ones(batch.len(), 1);
            Some(tape.binary_cross_entropy(pred, &batch.domain_labels, &ones)?)
        }
        Algorithm::Mada => {
            let reversed = tape.grad_reverse(features, lambda)?;
            let ones = Tensor::ones(batch.len(), 1);
            let mut total: Option<Var> = None;
            for (c, route) in model.discriminators.routes.iter().enumerate() {
                let weight = match &options.frozen_attention {
                    Some(frozen) => {
                        if frozen.shape() != (batch.len(), k) {
                            return Err(Error::Dimension {
                                op: "frozen attention",
                                left: frozen.shape(),
                                right: (batch.len(), k),
                            });
                        }
                        let col: Vec<f64> = (0..batch.len()).map(|r| frozen.get(r, c)).collect();
                        tape.constant(Tensor::column(&col))
                    }
                    None => {
                        let col = tape.column(probs, c)?;
                        if options.attention_flow {
                            col
                        } else {
                            tape.detach(col)
                        }
                    }
                };
                let weighted = tape.scale_rows(reversed, weight)?;
                let pred = bound.discriminator(tape, route, weighted)?;
                let l = tape.binary_cross_entropy(pred, &batch.domain_labels, &ones)?;
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
            total
        }
    };

    let label_value = tape.value(label_loss).item();
    let (loss, domain_value) = match domain_loss {
        Some(d) => (tape.add(label_loss, d)?, tape.value(d).item()),
        None => (label_loss, 0.0),
    };
    let lambda_used = if algorithm == Algorithm::SourceOnly { 0.0 } else { lambda };
    Ok(LossGraph {
        output: StepOutput {
            label_loss: label_value,
            domain_loss: domain_value,
            total_objective: label_value - lambda_used * domain_value,
            lambda_used,
            eta_used: 0.0,
        },
        loss,
        label_loss,
        domain_loss,
        features,
        probs,
        bound,
    })
}

/// Multi-adversarial objective with detached attention weights.
pub fn mada_loss(model: &MadaModel, batch: &Batch, lambda: f64, tape: &mut Tape) -> Result<LossGraph> {
    build_objective(model, batch, lambda, Algorithm::Mada, &GraphOptions::default(), tape)
}

/// Single-discriminator adversarial objective.
pub fn dann_loss(model: &MadaModel, batch: &Batch, lambda: f64, tape: &mut Tape) -> Result<LossGraph> {
    build_objective(model, batch, lambda, Algorithm::Dann, &GraphOptions::default(), tape)
}

/// Label loss only.
pub fn source_only_loss(model: &MadaModel, batch: &Batch, tape: &mut Tape) -> Result<LossGraph> {
    build_objective(
        model,
        batch,
        0.0,
        Algorithm::SourceOnly,
        &GraphOptions::default(),
        tape,
    )
}

/// Class predictions (ties to the lowest index) and softmax probabilities.
pub fn predict(model: &MadaModel, x: &Tensor) -> Result<(Vec<usize>, Tensor)> {
    let f = model.features(x)?;
    let probs = model.label_predictor.infer(&f)?;
    Ok((probs.argmax_rows(), probs))
}

// ---------------------------------------------------------------------------
// Training

/// Everything one training run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub share_mode: ShareMode,
    /// Number of classes; inferred from the data when zero.
    pub class_count: usize,
    pub architecture: Architecture,
    pub total_iterations: usize,
    pub batch_source: usize,
    pub batch_target: usize,
    pub seed: u64,
    pub lr: LrSchedule,
    pub lambda: LambdaSchedule,
    pub momentum: f64,
    /// Learning-rate multiplier of the label predictor and discriminators.
    pub fresh_lr_multiplier: f64,
    pub attention_flow: bool,
    pub eval_interval: usize,
    /// Iterations between proxy A-distance checkpoints; `None` means 10% of
    /// training, `Some(0)` disables them.
    pub adist_interval: Option<usize>,
    pub probe: ProbeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: Algorithm::Mada,
            share_mode: ShareMode::Independent,
            class_count: 0,
            architecture: Architecture::default(),
            total_iterations: 2000,
            batch_source: 32,
            batch_target: 32,
            seed: 0,
            lr: LrSchedule::default(),
            lambda: LambdaSchedule::default(),
            momentum: 0.9,
            fresh_lr_multiplier: 10.0,
            attention_flow: false,
            eval_interval: 100,
            adist_interval: None,
            probe: ProbeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iterations == 0 {
            return Err(Error::config("total_iterations must be >= 1"));
        }
        if self.batch_source == 0 || self.batch_target == 0 {
            return Err(Error::config("batch sizes must be >= 1"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval_interval must be >= 1"));
        }
        if self.architecture.bottleneck_dim == 0
            || self.architecture.feature_hidden.contains(&0)
            || self.architecture.label_hidden.contains(&0)
            || self.architecture.discriminator_hidden.contains(&0)
        {
            return Err(Error::config("all layer widths must be positive"));
        }
        self.lr.validate()?;
        self.lambda.validate()?;
        self.probe.validate()?;
        Ok(())
    }

    fn adist_every(&self) -> Option<usize> {
        match self.adist_interval {
            Some(0) => None,
            Some(n) => Some(n),
            None => Some((self.total_iterations / 10).max(1)),
        }
    }

    /// Iterations at which metrics are recorded.
    pub fn record_points(&self) -> Vec<usize> {
        let mut pts: Vec<usize> = (0..self.total_iterations)
            .step_by(self.eval_interval)
            .collect();
        pts.push(self.total_iterations);
        pts
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MadaModel,
    pub metrics: Vec<Metrics>,
}

/// Trains and collects every metrics record.
pub fn train(
    config: &TrainConfig,
    source: &Dataset,
    target: &Dataset,
    target_truth: Option<&[usize]>,
) -> Result<TrainOutcome> {
    let mut metrics = Vec::new();
    let model = train_with(config, source, target, target_truth, |m| {
        metrics.push(m.clone());
        Ok(())
    })?;
    Ok(TrainOutcome { model, metrics })
}

/// Trains, handing each metrics record to `on_record` as soon as it exists.
pub fn train_with(
    config: &TrainConfig,
    source: &Dataset,
    target: &Dataset,
    target_truth: Option<&[usize]>,
    mut on_record: impl FnMut(&Metrics) -> Result<()>,
) -> Result<MadaModel> {
    config.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::config("source and target must be nonempty"));
    }
    let source_labels = source
        .dense_labels()
        .ok_or_else(|| Error::contract("source dataset has unlabeled rows"))?;
    let needed = source_labels.iter().max().map_or(1, |m| m + 1);
    let class_count = if config.class_count == 0 {
        source.class_count.max(needed)
    } else {
        config.class_count
    };
    if needed > class_count {
        return Err(Error::config(format!(
            "source labels need {needed} classes, config has {class_count}"
        )));
    }
    if let Some(t) = target_truth {
        if t.len() != target.len() {
            return Err(Error::Dimension {
                op: "target truth",
                left: target.features.shape(),
                right: (t.len(), 1),
            });
        }
    }
    // The training view of the target never carries labels.
    let target = target.unlabeled();

    let mut model = MadaModel::new(
        source.dim(),
        class_count,
        &config.architecture,
        config.algorithm.discriminator_count(class_count),
        config.share_mode,
        config.seed,
    )?;
    let multipliers = model.lr_multipliers(config.fresh_lr_multiplier);
    let mut opt = SgdMomentum::new(config.momentum);
    let mut batches = make_batches(
        source,
        &target,
        config.batch_source,
        config.batch_target,
        config.seed,
    )?;
    let options = GraphOptions {
        attention_flow: config.attention_flow,
        frozen_attention: None,
    };
    let total = config.total_iterations;
    let adist_every = config.adist_every();
    let evaluator = Evaluator {
        source,
        source_labels: &source_labels,
        target: &target,
        target_truth,
        probe: &config.probe,
    };

    for t in 0..=total {
        let p = t as f64 / total as f64;
        let eta = config.lr.at(p)?;
        let lambda = config.lambda.at(p)?;
        let batch = batches.next_batch();
        let mut tape = Tape::new();
        let graph = build_objective(&model, &batch, lambda, config.algorithm, &options, &mut tape)?;
        let mut out = graph.output;
        out.eta_used = eta;
        if !(out.label_loss.is_finite() && out.domain_loss.is_finite()) {
            return Err(Error::Diverged {
                iteration: t,
                detail: format!(
                    "label_loss={} domain_loss={}",
                    out.label_loss, out.domain_loss
                ),
            });
        }
        if t == total || t % config.eval_interval == 0 {
            let with_adist = adist_every.is_some_and(|n| t == total || t % n == 0);
            on_record(&evaluator.record(&model, t, p, lambda, &out, with_adist)?)?;
        }
        if t == total {
            break;
        }
        let grads = tape.backward(graph.loss)?;
        let param_grads = graph.param_grads(&grads);
        let mut params = model.params_mut();
        opt.step(&mut params, &param_grads, &multipliers, eta)?;
    }
    Ok(model)
}

struct Evaluator<'a> {
    source: &'a Dataset,
    source_labels: &'a [usize],
    target: &'a Dataset,
    target_truth: Option<&'a [usize]>,
    probe: &'a ProbeConfig,
}

impl Evaluator<'_> {
    fn record(
        &self,
        model: &MadaModel,
        iteration: usize,
        p: f64,
        lambda: f64,
        out: &StepOutput,
        with_adist: bool,
    ) -> Result<Metrics> {
        let source_accuracy = eval::accuracy(model, self.source, self.source_labels)?;
        let target_accuracy = match self.target_truth {
            Some(t) => Some(eval::accuracy(model, self.target, t)?),
            None => None,
        };
        let a_distance = if with_adist {
            let fs = model.features(&self.source.features)?;
            let ft = model.features(&self.target.features)?;
            Some(eval::proxy_a_distance(&fs, &ft, self.probe)?)
        } else {
            None
        };
        Ok(Metrics {
            iteration,
            p,
            eta: out.eta_used,
            lambda,
            label_loss: out.label_loss,
            domain_loss: out.domain_loss,
            target_accuracy,
            source_accuracy,
            a_distance,
        })
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//     mada-checkpoint v1
//     class_count <K>
//     feature_extractor
//     mlp <layers> <activation>
//     linear <in> <out>
//     <weights>
//     <biases>
//     ...
//     label_predictor
//     mlp ...
//     discriminators <count> <pool size> <share mode>
//     route <pool index>...        (one line per discriminator)
//     linear ...                   (pool layers)
//
// Values use shortest round-trip float notation; loading is exact.

pub const CHECKPOINT_MAGIC: &str = "mada-checkpoint v1";

impl MadaModel {
    pub fn to_checkpoint(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{CHECKPOINT_MAGIC}").expect("write to string");
        writeln!(s, "class_count {}", self.class_count).expect("write to string");
        s.push_str("feature_extractor\n");
        nn::write_mlp(&mut s, &self.feature_extractor);
        s.push_str("label_predictor\n");
        nn::write_mlp(&mut s, &self.label_predictor);
        let bank = &self.discriminators;
        writeln!(
            s,
            "discriminators {} {} {}",
            bank.len(),
            bank.pool.len(),
            bank.share_mode.name()
        )
        .expect("write to string");
        for route in &bank.routes {
            s.push_str("route");
            for i in route {
                write!(s, " {i}").expect("write to string");
            }
            s.push('\n');
        }
        for layer in &bank.pool {
            nn::write_linear(&mut s, layer);
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = Lines::new(text);
        if lines.next_line()?.trim_end() != CHECKPOINT_MAGIC {
            return Err(lines.err(format!("missing `{CHECKPOINT_MAGIC}` header")));
        }
        let f = lines.expect("class_count")?;
        let class_count = lines.usize_field(f.first())?;
        lines.expect("feature_extractor")?;
        let feature_extractor = nn::read_mlp(&mut lines)?;
        lines.expect("label_predictor")?;
        let label_predictor = nn::read_mlp(&mut lines)?;
        let f = lines.expect("discriminators")?;
        let count = lines.usize_field(f.first())?;
        let pool_len = lines.usize_field(f.get(1))?;
        let share_mode = f
            .get(2)
            .and_then(|s| ShareMode::parse(s))
            .ok_or_else(|| lines.err("unknown share mode"))?;
        let mut routes = Vec::with_capacity(count);
        for _ in 0..count {
            let r = lines.expect("route")?;
            let route = r
                .iter()
                .map(|v| v.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| lines.err("bad route index"))?;
            routes.push(route);
        }
        let pool = (0..pool_len)
            .map(|_| nn::read_linear(&mut lines))
            .collect::<Result<Vec<_>>>()?;
        let model = MadaModel {
            class_count,
            feature_extractor,
            label_predictor,
            discriminators: DiscriminatorBank {
                share_mode,
                pool,
                routes,
            },
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        if self.label_predictor.in_dim() != self.bottleneck_dim()
            || self.label_predictor.out_dim() != self.class_count
            || self.label_predictor.output != Activation::Softmax
        {
            return Err(Error::config(
                "label predictor must map the bottleneck to class_count with a softmax head",
            ));
        }
        self.discriminators.validate(self.bottleneck_dim())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_multimode, SyntheticConfig};

    fn arch() -> Architecture {
        Architecture {
            feature_hidden: vec![6],
            bottleneck_dim: 4,
            label_hidden: vec![],
            discriminator_hidden: vec![5, 5],
        }
    }

    fn batch(k: usize) -> Batch {
        let xs = Tensor::from_rows(&[[0.3, -1.1], [1.5, 0.2], [-0.7, 0.9]]);
        let xt = Tensor::from_rows(&[[0.1, 0.4], [-1.2, -0.3], [0.8, 1.7]]);
        let labels: Vec<usize> = (0..3).map(|i| i % k).collect();
        Batch::new(&xs, &labels, &xt).unwrap()
    }

    #[test]
    fn k1_mada_equals_dann() {
        for mode in [ShareMode::Independent, ShareMode::Partial, ShareMode::Full] {
            let m = MadaModel::new(2, 1, &arch(), 1, mode, 4).unwrap();
            let b = batch(1);
            let mut t1 = Tape::new();
            let g1 = mada_loss(&m, &b, 0.6, &mut t1).unwrap();
            let mut t2 = Tape::new();
            let g2 = dann_loss(&m, &b, 0.6, &mut t2).unwrap();
            assert_eq!(g1.output, g2.output);
        }
    }

    #[test]
    fn total_objective_sign_convention() {
        let m = MadaModel::new(2, 3, &arch(), 3, ShareMode::Independent, 1).unwrap();
        let mut tape = Tape::new();
        let g = mada_loss(&m, &batch(3), 0.4, &mut tape).unwrap();
        let o = g.output;
        assert!((o.total_objective - (o.label_loss - 0.4 * o.domain_loss)).abs() < 1e-12);
    }

    #[test]
    fn zero_source_rows_rejected() {
        let m = MadaModel::new(2, 3, &arch(), 3, ShareMode::Independent, 1).unwrap();
        let b = Batch::new(&Tensor::zeros(0, 2), &[], &Tensor::ones(2, 2)).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(
            mada_loss(&m, &b, 1.0, &mut tape),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn discriminator_count_mismatch_is_config_error() {
        let m = MadaModel::new(2, 3, &arch(), 1, ShareMode::Independent, 1).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(
            mada_loss(&m, &batch(3), 1.0, &mut tape),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dann_uniform_discriminator_gives_ln2() {
        let mut m = MadaModel::new(2, 2, &arch(), 1, ShareMode::Independent, 1).unwrap();
        // zero the last discriminator layer so every output is sigmoid(0)
        let last = m.discriminators.pool.len() - 1;
        m.discriminators.pool[last].w = Tensor::zeros(5, 1);
        let mut tape = Tape::new();
        let g = dann_loss(&m, &batch(2), 1.0, &mut tape).unwrap();
        assert!((g.output.domain_loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn source_only_uniform_predictor_gives_ln_k() {
        let mut m = MadaModel::new(2, 4, &arch(), 0, ShareMode::Independent, 1).unwrap();
        m.label_predictor.layers[0].w = Tensor::zeros(4, 4);
        let mut tape = Tape::new();
        let g = source_only_loss(&m, &batch(4), &mut tape).unwrap();
        assert!((g.output.label_loss - 4f64.ln()).abs() < 1e-12);
        assert_eq!(g.output.domain_loss, 0.0);
    }

    #[test]
    fn source_only_ignores_target_rows() {
        let m = MadaModel::new(2, 3, &arch(), 0, ShareMode::Independent, 1).unwrap();
        let b = batch(3);
        let other = Batch::new(
            &b.x.slice_rows(0, 3),
            &b.class_labels,
            &Tensor::from_rows(&[[9.0, -9.0]]),
        )
        .unwrap();
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = source_only_loss(&m, &b, &mut t1).unwrap().output;
        let c = source_only_loss(&m, &other, &mut t2).unwrap().output;
        assert_eq!(a.label_loss, c.label_loss);
    }

    #[test]
    fn share_modes_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full = DiscriminatorBank::init(3, &[4, 5, 5, 1], ShareMode::Full, &mut rng).unwrap();
        assert_eq!(full.pool.len(), 3);
        assert!(full.routes.iter().all(|r| r == &vec![0, 1, 2]));
        let partial =
            DiscriminatorBank::init(3, &[4, 5, 5, 1], ShareMode::Partial, &mut rng).unwrap();
        assert_eq!(partial.pool.len(), 1 + 3 * 2);
        assert!(partial.routes.iter().all(|r| r[0] == 0));
        let ind =
            DiscriminatorBank::init(3, &[4, 5, 5, 1], ShareMode::Independent, &mut rng).unwrap();
        assert_eq!(ind.pool.len(), 9);
    }

    #[test]
    fn predict_tie_break_and_rows() {
        let mut m = MadaModel::new(2, 4, &arch(), 0, ShareMode::Independent, 1).unwrap();
        m.label_predictor.layers[0].w = Tensor::zeros(4, 4);
        let (cls, probs) = predict(&m, &Tensor::from_rows(&[[1.0, 2.0]])).unwrap();
        assert_eq!(cls, vec![0]);
        assert!((probs.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(predict(&m, &Tensor::zeros(1, 3)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = MadaModel::new(2, 3, &arch(), 3, ShareMode::Partial, 9).unwrap();
        let text = m.to_checkpoint();
        assert_eq!(MadaModel::from_checkpoint(&text).unwrap(), m);
        assert!(MadaModel::from_checkpoint("garbage\n").is_err());
    }

    #[test]
    fn record_points_count() {
        let cfg = TrainConfig {
            total_iterations: 250,
            eval_interval: 100,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.record_points(), vec![0, 100, 200, 250]);
    }

    #[test]
    fn zero_iterations_rejected() {
        let s = gen_multimode(&SyntheticConfig {
            samples_per_class: 10,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            total_iterations: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&cfg, &s.source, &s.target, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn labels_beyond_class_count_rejected() {
        let s = gen_multimode(&SyntheticConfig {
            samples_per_class: 10,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            class_count: 3,
            total_iterations: 5,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&cfg, &s.source, &s.target, None),
            Err(Error::Config(_))
        ));
    }
}
