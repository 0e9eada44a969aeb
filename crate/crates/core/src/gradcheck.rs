//! Finite-difference verification of the full adversarial graph.
//!
//! The tape differentiates `label_loss + domain_loss` with a reversal layer
//! in front of the discriminators, which is not the gradient of any single
//! scalar. Each parameter group is therefore checked against the function
//! it is supposed to follow:
//!
//! * feature extractor and label predictor: `C = label_loss − λ·domain_loss`
//! * discriminators: `domain_loss`
//!
//! with the attention weights held at their current values, matching the
//! stop-gradient on the class probabilities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{numeric_gradient, relative_error, Tape};
use crate::data::Batch;
use crate::error::Result;
use crate::model::{build_objective, Algorithm, Architecture, GraphOptions, MadaModel, ParamGroup, ShareMode};
use crate::tensor::Tensor;

/// Settings of a gradient-check run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub class_count: usize,
    pub input_dim: usize,
    pub source_rows: usize,
    pub target_rows: usize,
    pub architecture: Architecture,
    pub share_mode: ShareMode,
    pub lambda: f64,
    pub step: f64,
    pub tolerance: f64,
    pub seeds: Vec<u64>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            class_count: 3,
            input_dim: 2,
            source_rows: 2,
            target_rows: 2,
            architecture: Architecture {
                feature_hidden: vec![6],
                bottleneck_dim: 4,
                label_hidden: vec![],
                discriminator_hidden: vec![5, 5],
            },
            share_mode: ShareMode::Independent,
            lambda: 0.7,
            step: 1e-5,
            tolerance: 1e-4,
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub group: String,
    pub max_relative_error: f64,
}

/// Outcome for one algorithm on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRecord {
    pub algorithm: String,
    pub seed: u64,
    pub groups: Vec<GroupError>,
    /// Largest |gradient| the domain loss alone sends into the feature extractor.
    pub feature_domain_grad_max_abs: f64,
}

impl GradCheckRecord {
    pub fn max_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_relative_error)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub records: Vec<GradCheckRecord>,
    /// With one class: largest gap between MADA and DANN parameter gradients.
    pub k1_mada_dann_max_diff: Option<f64>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Random inputs in `[-2, 2]` with random source labels.
pub fn random_batch(cfg: &GradCheckConfig, rng: &mut impl Rng) -> Batch {
    let mut cloud = |n: usize| {
        let data = (0..n * cfg.input_dim)
            .map(|_| rng.random_range(-2.0..=2.0))
            .collect();
        Tensor::new(n, cfg.input_dim, data).expect("sized")
    };
    let xs = cloud(cfg.source_rows);
    let xt = cloud(cfg.target_rows);
    let labels: Vec<usize> = (0..cfg.source_rows)
        .map(|_| rng.random_range(0..cfg.class_count))
        .collect();
    Batch::new(&xs, &labels, &xt).expect("consistent rows")
}

/// Replaces the zero init biases with draws from `[-0.5, 0.5]`. With zero
/// biases a layer behind an all-dead relu layer sits exactly on the relu
/// kink, where one-sided differences disagree with the subgradient.
pub fn randomize_biases(model: &mut MadaModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_b1a5);
    // parameters come in (weight, bias) pairs
    for (i, p) in model.params_mut().into_iter().enumerate() {
        if i % 2 == 1 {
            p.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.5..=0.5));
        }
    }
}

/// Analytic gradient of the training graph for every parameter.
pub fn analytic_gradients(
    model: &MadaModel,
    batch: &Batch,
    lambda: f64,
    algorithm: Algorithm,
) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let graph = build_objective(model, batch, lambda, algorithm, &GraphOptions::default(), &mut tape)?;
    let grads = tape.backward(graph.loss)?;
    Ok(graph
        .param_grads(&grads)
        .into_iter()
        .zip(model.params())
        .map(|(g, p)| g.cloned().unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())))
        .collect())
}

/// Checks one model on one batch; returns max relative error per group and
/// the magnitude of the domain-only feature gradient.
pub fn check_model(
    model: &MadaModel,
    batch: &Batch,
    lambda: f64,
    algorithm: Algorithm,
    h: f64,
) -> Result<(Vec<GroupError>, f64)> {
    let mut tape = Tape::new();
    let graph = build_objective(model, batch, lambda, algorithm, &GraphOptions::default(), &mut tape)?;
    let frozen = tape.value(graph.probs).clone();
    let grads = tape.backward(graph.loss)?;
    let analytic: Vec<Tensor> = graph
        .param_grads(&grads)
        .into_iter()
        .map(|g| g.cloned().expect("every parameter is bound"))
        .collect();

    let feature_domain_grad_max_abs = match graph.domain_loss {
        Some(d) => {
            let dg = tape.backward(d)?;
            let groups = model.param_groups();
            graph
                .bound
                .param_vars()
                .into_iter()
                .zip(groups)
                .filter(|(_, g)| *g == ParamGroup::FeatureExtractor)
                .flat_map(|(v, _)| dg.wrt(v).data().to_vec())
                .fold(0.0, |m: f64, x| m.max(x.abs()))
        }
        None => 0.0,
    };

    let options = GraphOptions {
        attention_flow: false,
        frozen_attention: Some(frozen),
    };
    let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
    let mut scratch = model.clone();
    let mut eval = |ps: &[Tensor]| -> (f64, f64) {
        for (dst, src) in scratch.params_mut().into_iter().zip(ps) {
            dst.clone_from(src);
        }
        let mut t = Tape::new();
        let g = build_objective(&scratch, batch, lambda, algorithm, &options, &mut t)
            .expect("same shapes as the base evaluation");
        (g.output.label_loss, g.output.domain_loss)
    };
    let n_label = numeric_gradient(|ps| eval(ps).0, &params, h);
    let n_domain = numeric_gradient(|ps| eval(ps).1, &params, h);

    let lambda_used = if algorithm == Algorithm::SourceOnly { 0.0 } else { lambda };
    let mut worst: Vec<(ParamGroup, f64)> = Vec::new();
    for (i, group) in model.param_groups().into_iter().enumerate() {
        if algorithm == Algorithm::SourceOnly && group == ParamGroup::Discriminator {
            continue;
        }
        let err = analytic[i]
            .data()
            .iter()
            .enumerate()
            .map(|(j, &a)| {
                let (ly, ld) = (n_label[i].data()[j], n_domain[i].data()[j]);
                let reference = match group {
                    ParamGroup::Discriminator => ld,
                    _ => ly - lambda_used * ld,
                };
                relative_error(a, reference)
            })
            .fold(0.0, f64::max);
        match worst.iter_mut().find(|(g, _)| *g == group) {
            Some((_, e)) => *e = e.max(err),
            None => worst.push((group, err)),
        }
    }
    let groups = worst
        .into_iter()
        .map(|(g, e)| GroupError {
            group: g.name().to_string(),
            max_relative_error: e,
        })
        .collect();
    Ok((groups, feature_domain_grad_max_abs))
}

/// Runs the check for every seed on the MADA, DANN and source-only graphs.
pub fn run(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut records = Vec::new();
    let mut k1_diff: Option<f64> = None;
    for &seed in &cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = random_batch(cfg, &mut rng);
        let model_seed: u64 = rng.random();
        for algorithm in [Algorithm::Mada, Algorithm::Dann, Algorithm::SourceOnly] {
            let mut model = MadaModel::new(
                cfg.input_dim,
                cfg.class_count,
                &cfg.architecture,
                algorithm.discriminator_count(cfg.class_count),
                cfg.share_mode,
                model_seed,
            )?;
            randomize_biases(&mut model, model_seed);
            let (groups, dom) = check_model(&model, &batch, cfg.lambda, algorithm, cfg.step)?;
            records.push(GradCheckRecord {
                algorithm: algorithm.name().to_string(),
                seed,
                groups,
                feature_domain_grad_max_abs: dom,
            });
        }
        if cfg.class_count == 1 {
            let mut model = MadaModel::new(
                cfg.input_dim,
                1,
                &cfg.architecture,
                1,
                cfg.share_mode,
                model_seed,
            )?;
            randomize_biases(&mut model, model_seed);
            let a = analytic_gradients(&model, &batch, cfg.lambda, Algorithm::Mada)?;
            let b = analytic_gradients(&model, &batch, cfg.lambda, Algorithm::Dann)?;
            let d = a
                .iter()
                .zip(&b)
                .map(|(x, y)| x.max_abs_diff(y))
                .fold(0.0, f64::max);
            k1_diff = Some(k1_diff.map_or(d, |m| m.max(d)));
        }
    }
    let passed = records.iter().all(|r| r.max_error() <= cfg.tolerance)
        && k1_diff.is_none_or(|d| d <= 1e-10);
    Ok(GradCheckReport {
        records,
        k1_mada_dann_max_diff: k1_diff,
        tolerance: cfg.tolerance,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_passes() {
        let report = run(&GradCheckConfig::default()).unwrap();
        for r in &report.records {
            assert!(r.max_error() <= 1e-4, "{r:?}");
        }
        assert!(report.passed);
    }

    #[test]
    fn lambda_zero_blocks_domain_gradient_into_features() {
        let cfg = GradCheckConfig {
            lambda: 0.0,
            seeds: vec![5],
            ..GradCheckConfig::default()
        };
        let report = run(&cfg).unwrap();
        for r in &report.records {
            assert_eq!(r.feature_domain_grad_max_abs, 0.0, "{}", r.algorithm);
        }
        assert!(report.passed);
    }

    #[test]
    fn single_class_mada_matches_dann() {
        let cfg = GradCheckConfig {
            class_count: 1,
            seeds: vec![2],
            ..GradCheckConfig::default()
        };
        let report = run(&cfg).unwrap();
        assert!(report.k1_mada_dann_max_diff.unwrap() <= 1e-10);
        assert!(report.passed);
    }
}
