//! Accuracy, proxy A-distance and embedding export.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::data::{save_csv, Dataset};
use crate::error::{Error, Result};
use crate::model::{predict, MadaModel};
use crate::tensor::Tensor;

/// One evaluation record of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iteration: usize,
    pub p: f64,
    pub eta: f64,
    pub lambda: f64,
    pub label_loss: f64,
    pub domain_loss: f64,
    /// `None` when no target ground truth was supplied.
    pub target_accuracy: Option<f64>,
    pub source_accuracy: f64,
    pub a_distance: Option<f64>,
}

/// Settings of the linear domain probe behind [`proxy_a_distance`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub train_fraction: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            train_fraction: 0.8,
            epochs: 200,
            learning_rate: 0.5,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("probe train_fraction must be in (0, 1)"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::config("probe learning_rate must be > 0"));
        }
        Ok(())
    }
}

/// Fraction of rows whose predicted class equals `truth`.
pub fn accuracy(model: &MadaModel, ds: &Dataset, truth: &[usize]) -> Result<f64> {
    if truth.len() != ds.len() {
        return Err(Error::Dimension {
            op: "accuracy",
            left: ds.features.shape(),
            right: (truth.len(), 1),
        });
    }
    if ds.is_empty() {
        return Err(Error::contract("accuracy of an empty dataset"));
    }
    let (pred, _) = predict(model, &ds.features)?;
    Ok(accuracy_of(&pred, truth))
}

/// Fraction of positions where `pred` and `truth` agree.
pub fn accuracy_of(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}

/// `d_A = max(0, 2·(1 − 2ε))` for a probe test error `ε`.
pub fn a_distance_from_error(eps: f64) -> f64 {
    (2.0 * (1.0 - 2.0 * eps)).max(0.0)
}

/// Proxy A-distance between two feature sets.
///
/// A linear logistic probe is trained to tell the sets apart on a
/// domain-stratified split; its held-out error `ε` gives `2(1 − 2ε)`,
/// clamped at zero.
pub fn proxy_a_distance(source: &Tensor, target: &Tensor, cfg: &ProbeConfig) -> Result<f64> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::contract("proxy A-distance needs rows from both domains"));
    }
    if source.cols() != target.cols() {
        return Err(Error::Dimension {
            op: "proxy_a_distance",
            left: source.shape(),
            right: target.shape(),
        });
    }
    // Each domain is split by an identically seeded generator so the result
    // does not depend on which set is called the source.
    let split = |n: usize| -> Result<(Vec<usize>, Vec<usize>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let n_train = ((n as f64) * cfg.train_fraction).round() as usize;
        let n_train = n_train.clamp(1, n.saturating_sub(1).max(1));
        if n_train >= n {
            return Err(Error::contract("each domain needs at least two rows for the probe"));
        }
        let test = idx.split_off(n_train);
        Ok((idx, test))
    };
    let (s_train, s_test) = split(source.rows())?;
    let (t_train, t_test) = split(target.rows())?;

    let gather = |a: &[usize], b: &[usize]| -> (Tensor, Vec<f64>) {
        let x = source
            .select_rows(a)
            .vstack(&target.select_rows(b))
            .expect("columns checked");
        let mut y = vec![1.0; a.len()];
        y.extend(std::iter::repeat_n(0.0, b.len()));
        (x, y)
    };
    let (x_train, y_train) = gather(&s_train, &t_train);
    let (x_test, y_test) = gather(&s_test, &t_test);

    let probe = LogisticProbe::fit(&x_train, &y_train, cfg.epochs, cfg.learning_rate);
    let wrong = (0..x_test.rows())
        .filter(|&r| {
            let pred = if probe.score(x_test.row(r)) >= 0.5 { 1.0 } else { 0.0 };
            pred != y_test[r]
        })
        .count();
    let eps = wrong as f64 / x_test.rows() as f64;
    Ok(a_distance_from_error(eps))
}

/// Logistic regression on standardized features, full-batch gradient descent
/// from zero.
struct LogisticProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    w: Vec<f64>,
    b: f64,
}

impl LogisticProbe {
    fn fit(x: &Tensor, y: &[f64], epochs: usize, lr: f64) -> Self {
        let (n, d) = x.shape();
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale: Vec<f64> = var
            .iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    0.0
                }
            })
            .collect();
        let mut probe = LogisticProbe {
            mean,
            scale,
            w: vec![0.0; d],
            b: 0.0,
        };
        let z: Vec<Vec<f64>> = (0..n).map(|r| probe.standardize(x.row(r))).collect();
        for _ in 0..epochs {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (zr, &yr) in z.iter().zip(y) {
                let err = sigmoid(probe.logit(zr)) - yr;
                for (g, v) in gw.iter_mut().zip(zr) {
                    *g += err * v;
                }
                gb += err;
            }
            let step = lr / n as f64;
            for (w, g) in probe.w.iter_mut().zip(&gw) {
                *w -= step * g;
            }
            probe.b -= step * gb;
        }
        probe
    }

    fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    fn logit(&self, z: &[f64]) -> f64 {
        self.b + z.iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>()
    }

    fn score(&self, row: &[f64]) -> f64 {
        sigmoid(self.logit(&self.standardize(row)))
    }
}

/// Bottleneck features of `ds` with its labels and domain tag.
pub fn embed(model: &MadaModel, ds: &Dataset) -> Result<Dataset> {
    let f = model.features(&ds.features)?;
    Dataset::new(f, ds.labels.clone(), ds.domain, ds.class_count)
}

/// Writes bottleneck features of each dataset as feature CSV.
pub fn export_embeddings(model: &MadaModel, datasets: &[&Dataset], path: impl AsRef<Path>) -> Result<()> {
    let embedded = datasets
        .iter()
        .map(|ds| embed(model, ds))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Dataset> = embedded.iter().collect();
    save_csv(path, &refs)
}
