//! Datasets, synthetic domain-shift generation, CSV import/export and batching.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Domain label used by the discriminators and the CSV format.
    pub fn label(self) -> u8 {
        match self {
            Domain::Source => 1,
            Domain::Target => 0,
        }
    }
}

/// Feature rows from one domain.
///
/// Target datasets used for training carry no labels; their ground truth
/// travels separately and is only handed to evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<Option<usize>>,
    pub domain: Domain,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<Option<usize>>,
        domain: Domain,
        class_count: usize,
    ) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Dimension {
                op: "dataset",
                left: features.shape(),
                right: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().flatten().find(|&&l| l >= class_count) {
            return Err(Error::Index {
                op: "dataset labels",
                index: bad,
                bound: class_count,
            });
        }
        Ok(Dataset {
            features,
            labels,
            domain,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// All labels, or `None` if any row is unlabeled.
    pub fn dense_labels(&self) -> Option<Vec<usize>> {
        self.labels.iter().copied().collect()
    }

    /// The same rows with every label removed.
    pub fn unlabeled(&self) -> Dataset {
        Dataset {
            labels: vec![None; self.len()],
            ..self.clone()
        }
    }

    /// The same rows labeled with `truth`.
    pub fn with_labels(&self, truth: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.features.clone(),
            truth.iter().map(|&l| Some(l)).collect(),
            self.domain,
            self.class_count,
        )
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            domain: self.domain,
            class_count: self.class_count,
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation

/// Gaussian-mixture domain-shift benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub class_count: usize,
    pub modes_per_class: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    /// Radius of the circle the class centers sit on.
    pub radius: f64,
    /// Distance of each mode from its class center when `modes_per_class > 1`.
    pub mode_spread: f64,
    /// Explicit mode centers, `[class][mode][coordinate]`. Generated when absent.
    pub centers: Option<Vec<Vec<Vec<f64>>>>,
    /// Target rotation in the first coordinate plane, degrees (ignored when swap-prone).
    pub rotation_deg: f64,
    /// Target translation; empty means zero.
    pub translation: Vec<f64>,
    pub noise_sigma: f64,
    pub swap_prone: bool,
    /// Number of class slots the swap-prone rotation skips.
    pub swap_shift: u32,
    pub swap_epsilon_deg: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            class_count: 4,
            modes_per_class: 1,
            samples_per_class: 500,
            dim: 2,
            radius: 3.0,
            mode_spread: 1.0,
            centers: None,
            rotation_deg: 0.0,
            translation: Vec::new(),
            noise_sigma: 0.35,
            swap_prone: true,
            swap_shift: 1,
            swap_epsilon_deg: 5.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// The default swap-prone task: 4 classes on a circle of radius 3,
    /// target rotated by 95 degrees.
    pub fn swap_prone() -> Self {
        Self::default()
    }

    /// Rotation actually applied to the target.
    pub fn effective_rotation_deg(&self) -> f64 {
        if self.swap_prone {
            360.0 / self.class_count as f64 * f64::from(self.swap_shift) + self.swap_epsilon_deg
        } else {
            self.rotation_deg
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::config("synthetic class_count must be >= 2"));
        }
        if self.samples_per_class == 0 || self.modes_per_class == 0 {
            return Err(Error::config(
                "synthetic samples_per_class and modes_per_class must be >= 1",
            ));
        }
        if self.dim < 2 {
            return Err(Error::config("synthetic dim must be >= 2"));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma <= 0.0 {
            return Err(Error::config("noise_sigma must be > 0"));
        }
        if !self.translation.is_empty() && self.translation.len() != self.dim {
            return Err(Error::config(format!(
                "translation has {} entries, dim is {}",
                self.translation.len(),
                self.dim
            )));
        }
        if self.swap_prone && self.swap_shift == 0 {
            return Err(Error::config("swap_shift must be >= 1"));
        }
        if let Some(c) = &self.centers {
            if self.swap_prone {
                return Err(Error::config(
                    "explicit centers cannot be combined with swap_prone",
                ));
            }
            let ok = c.len() == self.class_count
                && c.iter().all(|modes| {
                    modes.len() == self.modes_per_class
                        && modes.iter().all(|m| m.len() == self.dim)
                });
            if !ok {
                return Err(Error::config(
                    "centers must be [class_count][modes_per_class][dim]",
                ));
            }
        }
        Ok(())
    }

    /// Mode centers of the source distribution, `[class][mode] -> point`.
    pub fn source_centers(&self) -> Vec<Vec<Vec<f64>>> {
        if let Some(c) = &self.centers {
            return c.clone();
        }
        let k = self.class_count as f64;
        let m = self.modes_per_class;
        (0..self.class_count)
            .map(|c| {
                let phi = std::f64::consts::TAU * c as f64 / k;
                let base = [self.radius * phi.cos(), self.radius * phi.sin()];
                (0..m)
                    .map(|j| {
                        let mut p = vec![0.0; self.dim];
                        p[0] = base[0];
                        p[1] = base[1];
                        if m > 1 {
                            let psi = phi + std::f64::consts::TAU * j as f64 / m as f64;
                            p[0] += self.mode_spread * psi.cos();
                            p[1] += self.mode_spread * psi.sin();
                        }
                        p
                    })
                    .collect()
            })
            .collect()
    }

    /// Applies the target rotation (first two coordinates) and translation.
    pub fn transform(&self, p: &[f64]) -> Vec<f64> {
        let theta = self.effective_rotation_deg().to_radians();
        let (s, c) = theta.sin_cos();
        let mut out = p.to_vec();
        out[0] = c * p[0] - s * p[1];
        out[1] = s * p[0] + c * p[1];
        for (o, t) in out.iter_mut().zip(&self.translation) {
            *o += t;
        }
        out
    }

    pub fn target_centers(&self) -> Vec<Vec<Vec<f64>>> {
        self.source_centers()
            .iter()
            .map(|modes| modes.iter().map(|p| self.transform(p)).collect())
            .collect()
    }
}

/// Output of [`gen_multimode`].
#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub source: Dataset,
    /// Unlabeled target rows.
    pub target: Dataset,
    /// Ground-truth class of each target row, for evaluation only.
    pub target_truth: Vec<usize>,
}

impl Synthetic {
    /// Drops target rows whose true class is in `remove`.
    pub fn drop_target_classes(&self, remove: &BTreeSet<usize>) -> Synthetic {
        let (target, target_truth) = drop_target_classes(&self.target, &self.target_truth, remove);
        Synthetic {
            source: self.source.clone(),
            target,
            target_truth,
        }
    }
}

fn sample_domain(
    cfg: &SyntheticConfig,
    centers: &[Vec<Vec<f64>>],
    rng: &mut ChaCha8Rng,
) -> (Tensor, Vec<usize>) {
    let normal = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated");
    let n = cfg.class_count * cfg.samples_per_class;
    let mut data = Vec::with_capacity(n * cfg.dim);
    let mut labels = Vec::with_capacity(n);
    for (class, modes) in centers.iter().enumerate() {
        for i in 0..cfg.samples_per_class {
            let center = &modes[i % modes.len()];
            data.extend(center.iter().map(|c| c + normal.sample(rng)));
            labels.push(class);
        }
    }
    (Tensor::new(n, cfg.dim, data).expect("sized"), labels)
}

/// Samples source and target domains from the configured mixtures.
///
/// Each class contributes exactly `samples_per_class` rows per domain, with
/// modes visited round-robin. Source and target draw from independent
/// streams of the same seed.
pub fn gen_multimode(cfg: &SyntheticConfig) -> Result<Synthetic> {
    cfg.validate()?;
    let mut src_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    src_rng.set_stream(0);
    let mut tgt_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    tgt_rng.set_stream(1);

    let (sx, sy) = sample_domain(cfg, &cfg.source_centers(), &mut src_rng);
    let (tx, ty) = sample_domain(cfg, &cfg.target_centers(), &mut tgt_rng);
    let k = cfg.class_count;
    Ok(Synthetic {
        source: Dataset::new(sx, sy.into_iter().map(Some).collect(), Domain::Source, k)?,
        target: Dataset::new(tx.clone(), vec![None; tx.rows()], Domain::Target, k)?,
        target_truth: ty,
    })
}

/// Per-class mean of the rows of `features`.
pub fn class_centroids(features: &Tensor, labels: &[usize], class_count: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; features.cols()]; class_count];
    let mut counts = vec![0usize; class_count];
    for (r, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(features.row(r)) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    sums
}

// ---------------------------------------------------------------------------
// Class removal

/// Removes every labeled row whose class is in `remove`. Unlabeled rows and
/// `class_count` are kept; labels are never renumbered.
pub fn drop_classes(ds: &Dataset, remove: &BTreeSet<usize>) -> Dataset {
    let keep: Vec<usize> = (0..ds.len())
        .filter(|&r| !matches!(ds.labels[r], Some(l) if remove.contains(&l)))
        .collect();
    ds.select(&keep)
}

/// [`drop_classes`] for an unlabeled target whose truth lives beside it.
pub fn drop_target_classes(
    target: &Dataset,
    truth: &[usize],
    remove: &BTreeSet<usize>,
) -> (Dataset, Vec<usize>) {
    let keep: Vec<usize> = (0..target.len())
        .filter(|&r| !remove.contains(&truth[r]))
        .collect();
    let kept_truth = keep.iter().map(|&r| truth[r]).collect();
    (target.select(&keep), kept_truth)
}

// ---------------------------------------------------------------------------
// CSV
//
// Header `f0,f1,...,f{d-1},label,domain`; label is an integer with -1 for
// unlabeled rows; domain is 1 (source) or 0 (target). Values are written in
// shortest round-trip notation so reading back is exact.

/// What [`load_csv`] expects of a file.
#[derive(Debug, Clone, Default)]
pub struct CsvSchema {
    /// Required feature count; inferred from the header when `None`.
    pub dim: Option<usize>,
    /// Label space size; inferred as `max label + 1` (at least 1) when `None`.
    pub class_count: Option<usize>,
    /// Keep only rows of this domain. When `None` the file must hold one domain.
    pub domain: Option<Domain>,
}

pub fn csv_header(dim: usize) -> String {
    let mut h: Vec<String> = (0..dim).map(|i| format!("f{i}")).collect();
    h.push("label".into());
    h.push("domain".into());
    h.join(",")
}

/// Appends `ds` as CSV rows (no header) to `out`.
pub fn write_csv_rows(out: &mut String, ds: &Dataset) {
    for r in 0..ds.len() {
        for v in ds.features.row(r) {
            write!(out, "{v:?},").expect("write to string");
        }
        let label = ds.labels[r].map_or(-1, |l| l as i64);
        writeln!(out, "{label},{}", ds.domain.label()).expect("write to string");
    }
}

/// Writes one or more datasets of equal dimension to a single CSV file.
pub fn save_csv(path: impl AsRef<Path>, datasets: &[&Dataset]) -> Result<()> {
    let path = path.as_ref();
    let dim = datasets.first().map_or(0, |d| d.dim());
    if datasets.iter().any(|d| d.dim() != dim) {
        return Err(Error::Schema("datasets differ in dimension".into()));
    }
    let mut out = csv_header(dim);
    out.push('\n');
    for ds in datasets {
        write_csv_rows(&mut out, ds);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, schema)
}

pub fn parse_csv(text: &str, schema: &CsvSchema) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Schema("empty file, missing header".into()))?;
    let header = header.trim_end_matches('\r');
    let ncols = header.split(',').count();
    if ncols < 2 {
        return Err(Error::Schema(format!("header `{header}` has too few columns")));
    }
    let dim = ncols - 2;
    if header != csv_header(dim) {
        return Err(Error::Schema(format!(
            "header `{header}` does not match `{}`",
            csv_header(dim)
        )));
    }
    if let Some(want) = schema.dim {
        if want != dim {
            return Err(Error::Schema(format!(
                "file has {dim} feature columns, expected {want}"
            )));
        }
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut domains = BTreeSet::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != ncols {
            return Err(Error::Schema(format!(
                "line {line_no}: {} columns, header has {ncols}",
                fields.len()
            )));
        }
        let parse_err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let domain = match fields[ncols - 1].trim() {
            "1" => Domain::Source,
            "0" => Domain::Target,
            other => return Err(parse_err(format!("domain must be 0 or 1, got `{other}`"))),
        };
        if schema.domain.is_some_and(|d| d != domain) {
            continue;
        }
        domains.insert(domain.label());
        for f in &fields[..dim] {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("bad feature value `{f}`")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite feature value `{f}`")));
            }
            data.push(v);
        }
        let label: i64 = fields[dim]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad label `{}`", fields[dim])))?;
        labels.push(match label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(parse_err(format!("label {l} is below -1"))),
        });
    }
    if domains.len() > 1 {
        return Err(Error::Schema(
            "file mixes source and target rows; select a domain".into(),
        ));
    }
    let domain = schema.domain.unwrap_or(if domains.contains(&0) {
        Domain::Target
    } else {
        Domain::Source
    });
    let class_count = schema.class_count.unwrap_or_else(|| {
        labels.iter().flatten().max().map_or(1, |m| m + 1)
    });
    let rows = labels.len();
    Dataset::new(Tensor::new(rows, dim, data)?, labels, domain, class_count)
}

/// Writes ground-truth labels, one per line under a `label` header.
pub fn save_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("label\n");
    for l in labels {
        writeln!(out, "{l}").expect("write to string");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == "label" => {}
        _ => return Err(Error::Schema("label file must start with `label`".into())),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("bad label `{l}`"),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Batching

/// One training mini-batch: source rows first, then target rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    /// Labels of the source rows, in order.
    pub class_labels: Vec<usize>,
    /// `1` for source rows, `0` for target rows.
    pub domain_labels: Tensor,
    pub source_count: usize,
    pub target_count: usize,
}

impl Batch {
    /// Assembles a batch from explicit source and target rows.
    pub fn new(source_x: &Tensor, source_labels: &[usize], target_x: &Tensor) -> Result<Batch> {
        if source_labels.len() != source_x.rows() {
            return Err(Error::Dimension {
                op: "batch",
                left: source_x.shape(),
                right: (source_labels.len(), 1),
            });
        }
        let x = source_x.vstack(target_x)?;
        let (ns, nt) = (source_x.rows(), target_x.rows());
        let mut d = vec![1.0; ns];
        d.extend(std::iter::repeat_n(0.0, nt));
        Ok(Batch {
            x,
            class_labels: source_labels.to_vec(),
            domain_labels: Tensor::column(&d),
            source_count: ns,
            target_count: nt,
        })
    }

    pub fn len(&self) -> usize {
        self.source_count + self.target_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cycles through `0..n` in per-epoch shuffled order.
#[derive(Debug, Clone)]
struct Cursor {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cursor {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        let mut c = Cursor {
            order: (0..n).collect(),
            pos: n,
            rng,
        };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn take(&mut self, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Endless stream of balanced batches.
#[derive(Debug, Clone)]
pub struct BatchStream<'a> {
    source: &'a Dataset,
    source_labels: Vec<usize>,
    target: &'a Dataset,
    batch_source: usize,
    batch_target: usize,
    source_cursor: Cursor,
    target_cursor: Cursor,
}

/// Builds a deterministic batch stream. The source dataset must be fully
/// labeled; target labels are never read.
pub fn make_batches<'a>(
    source: &'a Dataset,
    target: &'a Dataset,
    batch_source: usize,
    batch_target: usize,
    seed: u64,
) -> Result<BatchStream<'a>> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::config("cannot batch an empty dataset"));
    }
    if batch_source == 0 || batch_target == 0 {
        return Err(Error::config("batch sizes must be >= 1"));
    }
    if source.dim() != target.dim() {
        return Err(Error::Dimension {
            op: "make_batches",
            left: source.features.shape(),
            right: target.features.shape(),
        });
    }
    let source_labels = source
        .dense_labels()
        .ok_or_else(|| Error::contract("source dataset has unlabeled rows"))?;
    let mut s_rng = ChaCha8Rng::seed_from_u64(seed);
    s_rng.set_stream(2);
    let mut t_rng = ChaCha8Rng::seed_from_u64(seed);
    t_rng.set_stream(3);
    Ok(BatchStream {
        source,
        source_labels,
        target,
        batch_source,
        batch_target,
        source_cursor: Cursor::new(source.len(), s_rng),
        target_cursor: Cursor::new(target.len(), t_rng),
    })
}

impl BatchStream<'_> {
    pub fn next_batch(&mut self) -> Batch {
        let s_idx = self.source_cursor.take(self.batch_source);
        let t_idx = self.target_cursor.take(self.batch_target);
        let labels: Vec<usize> = s_idx.iter().map(|&i| self.source_labels[i]).collect();
        Batch::new(
            &self.source.features.select_rows(&s_idx),
            &labels,
            &self.target.features.select_rows(&t_idx),
        )
        .expect("dimensions checked at construction")
    }

    /// Source row indices of the next batch without consuming it. Test hook.
    #[doc(hidden)]
    pub fn peek_source_indices(&self) -> Vec<usize> {
        self.source_cursor.clone().take(self.batch_source)
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}
