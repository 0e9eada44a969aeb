//! File-driven commands behind the `mada` binary.
//!
//! A run is described by one TOML document (see [`RunConfig`]); every
//! field has a default, so a minimal file names only the algorithm and the
//! data. Outputs are plain files: feature CSVs, line-delimited JSON
//! metrics, text checkpoints and a JSON summary.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    drop_target_classes, gen_multimode, load_csv, load_labels, save_csv, save_labels, CsvSchema,
    Dataset, Domain, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::eval::{self, ProbeConfig};
use crate::gradcheck::{self, GradCheckConfig, GradCheckReport};
use crate::model::{train_with, MadaModel, TrainConfig};

/// Where training data comes from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Synthetic task; used when no CSV paths are given.
    pub synthetic: Option<SyntheticConfig>,
    pub source_csv: Option<PathBuf>,
    pub target_csv: Option<PathBuf>,
    /// Ground-truth target labels (`label` header, one per row), evaluation only.
    pub target_truth: Option<PathBuf>,
    /// Target classes removed before training.
    pub drop_target_classes: Vec<usize>,
}

/// Complete description of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// One training run per seed.
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub gradcheck: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs"),
            seeds: vec![0],
            data: DataConfig::default(),
            train: TrainConfig::default(),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.data.source_csv,
            &mut cfg.data.target_csv,
            &mut cfg.data.target_truth,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        self.train.validate()?;
        if let Some(s) = &self.data.synthetic {
            s.validate()?;
        }
        if self.data.source_csv.is_some() != self.data.target_csv.is_some() {
            return Err(Error::config("source_csv and target_csv go together"));
        }
        Ok(())
    }
}

/// Source, unlabeled target and optional target truth.
#[derive(Debug, Clone)]
pub struct ResolvedData {
    pub source: Dataset,
    pub target: Dataset,
    pub target_truth: Option<Vec<usize>>,
}

/// Loads or generates the configured data and applies class removal.
pub fn resolve_data(cfg: &DataConfig, class_count: usize) -> Result<ResolvedData> {
    let (source, target, truth) = match (&cfg.source_csv, &cfg.target_csv) {
        (Some(s), Some(t)) => {
            let schema = |domain| CsvSchema {
                dim: None,
                class_count: (class_count > 0).then_some(class_count),
                domain: Some(domain),
            };
            let mut source = load_csv(s, &schema(Domain::Source))?;
            let target = load_csv(t, &schema(Domain::Target))?;
            let truth = cfg.target_truth.as_ref().map(load_labels).transpose()?;
            if let Some(tr) = &truth {
                if tr.len() != target.len() {
                    return Err(Error::config(format!(
                        "{} truth labels for {} target rows",
                        tr.len(),
                        target.len()
                    )));
                }
            }
            let k = source.class_count.max(target.class_count);
            source.class_count = k;
            let target = Dataset {
                class_count: k,
                ..target.unlabeled()
            };
            (source, target, truth)
        }
        _ => {
            let syn = gen_multimode(&cfg.synthetic.clone().unwrap_or_default())?;
            (syn.source, syn.target, Some(syn.target_truth))
        }
    };
    if cfg.drop_target_classes.is_empty() {
        return Ok(ResolvedData {
            source,
            target,
            target_truth: truth,
        });
    }
    let remove: BTreeSet<usize> = cfg.drop_target_classes.iter().copied().collect();
    let truth = truth.ok_or_else(|| {
        Error::config("drop_target_classes needs target ground truth")
    })?;
    let (target, truth) = drop_target_classes(&target, &truth, &remove);
    Ok(ResolvedData {
        source,
        target,
        target_truth: Some(truth),
    })
}

// ---------------------------------------------------------------------------
// gen

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSummary {
    pub source_rows: usize,
    pub target_rows: usize,
    pub dim: usize,
    pub class_count: usize,
    pub files: Vec<PathBuf>,
}

/// Writes `source.csv`, `target.csv` (unlabeled) and `target_truth.csv`.
pub fn cmd_gen(cfg: &RunConfig, out_dir: &Path) -> Result<GenSummary> {
    let data = resolve_data(&cfg.data, cfg.train.class_count)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let src = out_dir.join("source.csv");
    let tgt = out_dir.join("target.csv");
    let mut files = vec![src.clone(), tgt.clone()];
    save_csv(&src, &[&data.source])?;
    save_csv(&tgt, &[&data.target])?;
    if let Some(t) = &data.target_truth {
        let p = out_dir.join("target_truth.csv");
        save_labels(&p, t)?;
        files.push(p);
    }
    Ok(GenSummary {
        source_rows: data.source.len(),
        target_rows: data.target.len(),
        dim: data.source.dim(),
        class_count: data.source.class_count,
        files,
    })
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub final_target_accuracy: Option<f64>,
    pub final_source_accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub algorithm: String,
    pub runs: Vec<SeedResult>,
    /// Mean of the final target accuracies of the successful runs.
    pub mean_target_accuracy: Option<f64>,
    /// Sample standard deviation over √n.
    pub std_error_target_accuracy: Option<f64>,
}

impl TrainSummary {
    pub fn failed(&self) -> bool {
        self.runs.iter().any(|r| r.error.is_some())
    }
}

/// Mean and standard error (`s/√n`, `s` with `n − 1`) of `values`.
pub fn mean_and_std_error(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, (var / n).sqrt()))
}

/// Directory of one seed's outputs.
pub fn seed_dir(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("seed-{seed}"))
}

fn run_seed(cfg: &RunConfig, data: &ResolvedData, seed: u64, out_dir: &Path) -> Result<SeedResult> {
    let dir = seed_dir(out_dir, seed);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let metrics_path = dir.join("metrics.jsonl");
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut writer = BufWriter::new(file);
    let mut last = None;
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let outcome = train_with(
        &train_cfg,
        &data.source,
        &data.target,
        data.target_truth.as_deref(),
        |m| {
            let line = serde_json::to_string(m).expect("metrics serialize");
            writeln!(writer, "{line}")
                .and_then(|_| writer.flush())
                .map_err(|e| Error::io(&metrics_path, e))?;
            last = Some(m.clone());
            Ok(())
        },
    );
    match outcome {
        Ok(model) => {
            model.save(dir.join("checkpoint.txt"))?;
            Ok(SeedResult {
                seed,
                final_target_accuracy: last.as_ref().and_then(|m| m.target_accuracy),
                final_source_accuracy: last.as_ref().map(|m| m.source_accuracy),
                error: None,
            })
        }
        Err(e @ Error::Diverged { .. }) => {
            let record = serde_json::json!({ "error": e.to_string() });
            writeln!(writer, "{record}")
                .and_then(|_| writer.flush())
                .map_err(|io| Error::io(&metrics_path, io))?;
            Ok(SeedResult {
                seed,
                final_target_accuracy: None,
                final_source_accuracy: None,
                error: Some(e.to_string()),
            })
        }
        Err(e) => Err(e),
    }
}

/// One training run per seed (in parallel), then `summary.json` at the root.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = resolve_data(&cfg.data, cfg.train.class_count)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results: Vec<Result<SeedResult>> = std::thread::scope(|s| {
        let handles: Vec<_> = cfg
            .seeds
            .iter()
            .map(|&seed| {
                let data = &data;
                s.spawn(move || run_seed(cfg, data, seed, out_dir))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    });
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let accs: Vec<f64> = runs.iter().filter_map(|r| r.final_target_accuracy).collect();
    let stats = mean_and_std_error(&accs);
    let summary = TrainSummary {
        algorithm: cfg.train.algorithm.name().to_string(),
        runs,
        mean_target_accuracy: stats.map(|s| s.0),
        std_error_target_accuracy: stats.map(|s| s.1),
    };
    let path = out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// eval

/// Inputs of `mada eval`.
#[derive(Debug, Clone, Default)]
pub struct EvalRequest {
    pub checkpoint: PathBuf,
    /// Feature CSVs; rows are split by their domain column.
    pub data: Vec<PathBuf>,
    /// Ground truth for the target rows, in file order.
    pub target_truth: Option<PathBuf>,
    pub adist: bool,
    pub export: Option<PathBuf>,
    pub probe: ProbeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source_rows: usize,
    pub target_rows: usize,
    pub source_accuracy: Option<f64>,
    pub target_accuracy: Option<f64>,
    pub a_distance: Option<f64>,
    pub exported: Option<PathBuf>,
}

fn load_domain(paths: &[PathBuf], domain: Domain, dim: usize, k: usize) -> Result<Option<Dataset>> {
    let mut acc: Option<Dataset> = None;
    for p in paths {
        let schema = CsvSchema {
            dim: None,
            class_count: Some(k),
            domain: Some(domain),
        };
        let ds = match load_csv(p, &schema) {
            Err(Error::Index { index, bound, .. }) => {
                return Err(Error::config(format!(
                    "{}: label {index} outside the checkpoint's {bound} classes",
                    p.display()
                )))
            }
            other => other?,
        };
        if ds.dim() != dim && !ds.is_empty() {
            return Err(Error::config(format!(
                "{} has {} feature columns, checkpoint expects {dim}",
                p.display(),
                ds.dim()
            )));
        }
        if ds.is_empty() {
            continue;
        }
        acc = Some(match acc {
            None => ds,
            Some(prev) => {
                let mut labels = prev.labels;
                labels.extend(ds.labels);
                Dataset::new(prev.features.vstack(&ds.features)?, labels, domain, k)?
            }
        });
    }
    Ok(acc)
}

pub fn cmd_eval(req: &EvalRequest) -> Result<EvalReport> {
    let model = match MadaModel::load(&req.checkpoint) {
        Err(e @ Error::Io { .. }) => return Err(e),
        Err(e) => return Err(Error::config(format!("checkpoint: {e}"))),
        Ok(m) => m,
    };
    if req.data.is_empty() {
        return Err(Error::config("eval needs at least one --data file"));
    }
    let (dim, k) = (model.input_dim(), model.class_count);
    let source = load_domain(&req.data, Domain::Source, dim, k)?;
    let mut target = load_domain(&req.data, Domain::Target, dim, k)?;
    if let (Some(t), Some(path)) = (&mut target, &req.target_truth) {
        let truth = load_labels(path)?;
        if truth.len() != t.len() {
            return Err(Error::config(format!(
                "{} truth labels for {} target rows",
                truth.len(),
                t.len()
            )));
        }
        *t = t.with_labels(&truth)?;
    }

    let labeled_accuracy = |ds: &Option<Dataset>| -> Result<Option<f64>> {
        match ds.as_ref().and_then(|d| d.dense_labels().map(|l| (d, l))) {
            Some((d, l)) => Ok(Some(eval::accuracy(&model, d, &l)?)),
            None => Ok(None),
        }
    };
    let source_accuracy = labeled_accuracy(&source)?;
    let target_accuracy = labeled_accuracy(&target)?;

    let a_distance = if req.adist {
        match (&source, &target) {
            (Some(s), Some(t)) => Some(eval::proxy_a_distance(
                &model.features(&s.features)?,
                &model.features(&t.features)?,
                &req.probe,
            )?),
            _ => {
                return Err(Error::config(
                    "--adist needs both source and target rows",
                ))
            }
        }
    } else {
        None
    };

    if let Some(path) = &req.export {
        let sets: Vec<&Dataset> = source.iter().chain(target.iter()).collect();
        eval::export_embeddings(&model, &sets, path)?;
    }

    Ok(EvalReport {
        source_rows: source.as_ref().map_or(0, Dataset::len),
        target_rows: target.as_ref().map_or(0, Dataset::len),
        source_accuracy,
        target_accuracy,
        a_distance,
        exported: req.export.clone(),
    })
}

// ---------------------------------------------------------------------------
// gradcheck

pub fn cmd_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.source_rows + cfg.target_rows > 8 {
        return Err(Error::config("gradcheck is meant for at most 8 samples"));
    }
    if cfg.source_rows == 0 || cfg.class_count == 0 || cfg.input_dim == 0 {
        return Err(Error::config(
            "gradcheck needs source rows, classes and input features",
        ));
    }
    gradcheck::run(cfg)
}

/// Process exit code for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Schema(_) | Error::Parse { .. } => 2,
        _ => 1,
    }
}
