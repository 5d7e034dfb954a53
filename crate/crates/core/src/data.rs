//! Data plumbing: TSV ingestion, gene filtering, min-max normalization,
//! 4:1 splits, and a seeded synthetic generator that stands in for real
//! cohorts at desk scale.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::rng::RngState;
use crate::autodiff::tensor::Tensor;
use crate::error::{CoreError, Result};
use crate::heads::classify::stratified_indices;
use crate::heads::survival::SurvivalRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionMatrix {
    pub gene_ids: Vec<String>,
    /// [samples x genes], row-major.
    pub samples: Tensor,
    pub labels: Option<Vec<String>>,
    /// (time, event observed) per sample.
    pub survival: Option<Vec<(f64, bool)>>,
    /// Per-gene (min, max) recorded when normalization was fitted.
    pub normalization: Option<Vec<(f64, f64)>>,
}

impl ExpressionMatrix {
    pub fn new(gene_ids: Vec<String>, samples: Tensor) -> Result<Self> {
        let (_, cols) = samples.dims2()?;
        if cols != gene_ids.len() {
            return Err(CoreError::Shape(format!(
                "{} gene ids for {cols} sample columns",
                gene_ids.len()
            )));
        }
        Ok(ExpressionMatrix {
            gene_ids,
            samples,
            labels: None,
            survival: None,
            normalization: None,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.samples.shape[0]
    }

    pub fn n_genes(&self) -> usize {
        self.gene_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_genes();
        &self.samples.values[i * d..(i + 1) * d]
    }

    /// Rows in the given order, metadata included. Indices may repeat.
    pub fn select_rows(&self, idx: &[usize]) -> Result<ExpressionMatrix> {
        let n = self.n_samples();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(CoreError::Contract(format!(
                "row {bad} out of range for {n} samples"
            )));
        }
        let d = self.n_genes();
        let mut values = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        Ok(ExpressionMatrix {
            gene_ids: self.gene_ids.clone(),
            samples: Tensor::new(vec![idx.len(), d], values)?,
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i].clone()).collect()),
            survival: self
                .survival
                .as_ref()
                .map(|s| idx.iter().map(|&i| s[i]).collect()),
            normalization: self.normalization.clone(),
        })
    }

    /// Sorted distinct label names and each sample's index into them.
    pub fn label_classes(&self) -> Result<(Vec<usize>, Vec<String>)> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| CoreError::Contract("matrix carries no labels".into()))?;
        let mut classes: Vec<String> = labels.clone();
        classes.sort();
        classes.dedup();
        let indices = labels
            .iter()
            .map(|l| classes.binary_search(l).unwrap())
            .collect();
        Ok((indices, classes))
    }

    pub fn survival_records(&self) -> Result<Vec<SurvivalRecord>> {
        let survival = self
            .survival
            .as_ref()
            .ok_or_else(|| CoreError::Contract("matrix carries no survival columns".into()))?;
        (0..self.n_samples())
            .map(|i| SurvivalRecord::new(self.row(i).to_vec(), survival[i].0, survival[i].1))
            .collect()
    }
}

fn parse_cell(cell: &str, line: usize, what: &str) -> Result<f64> {
    if cell.is_empty() {
        return Err(CoreError::Parse {
            line,
            message: format!("empty {what} cell"),
        });
    }
    cell.trim().parse::<f64>().map_err(|_| CoreError::Parse {
        line,
        message: format!("{what} cell `{cell}` is not a number"),
    })
}

/// Tab-separated matrix with a header of gene ids plus optional reserved
/// columns `label`, `time`, `event` (time and event must travel together).
/// Line numbers in errors are 1-based and include the header.
pub fn load_tsv(path: impl AsRef<Path>) -> Result<ExpressionMatrix> {
    let text = std::fs::read_to_string(path)?;
    parse_tsv(&text)
}

pub fn parse_tsv(text: &str) -> Result<ExpressionMatrix> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(CoreError::Parse {
        line: 1,
        message: "file is empty".into(),
    })?;
    let columns: Vec<&str> = header.split('\t').collect();
    let mut gene_ids: Vec<String> = Vec::new();
    let mut gene_cols = Vec::new();
    let mut label_col = None;
    let mut time_col = None;
    let mut event_col = None;
    for (i, &name) in columns.iter().enumerate() {
        let slot = match name {
            "label" => &mut label_col,
            "time" => &mut time_col,
            "event" => &mut event_col,
            _ => {
                if name.trim().is_empty() {
                    return Err(CoreError::Parse {
                        line: 1,
                        message: format!("column {} has a blank name", i + 1),
                    });
                }
                if gene_ids.iter().any(|g| g == name) {
                    return Err(CoreError::Parse {
                        line: 1,
                        message: format!("duplicate gene id `{name}`"),
                    });
                }
                gene_ids.push(name.to_string());
                gene_cols.push(i);
                continue;
            }
        };
        if slot.is_some() {
            return Err(CoreError::Parse {
                line: 1,
                message: format!("reserved column `{name}` appears twice"),
            });
        }
        *slot = Some(i);
    }
    if gene_ids.is_empty() {
        return Err(CoreError::Parse {
            line: 1,
            message: "no gene columns in header".into(),
        });
    }
    if time_col.is_some() != event_col.is_some() {
        return Err(CoreError::Parse {
            line: 1,
            message: "survival needs both `time` and `event` columns".into(),
        });
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut survival = Vec::new();
    let mut n = 0;
    for (idx, row) in lines {
        let line = idx + 1;
        if row.is_empty() {
            continue;
        }
        let cells: Vec<&str> = row.split('\t').collect();
        if cells.len() != columns.len() {
            return Err(CoreError::Parse {
                line,
                message: format!(
                    "row has {} cells, header has {}",
                    cells.len(),
                    columns.len()
                ),
            });
        }
        for &c in &gene_cols {
            values.push(parse_cell(cells[c], line, "gene")?);
        }
        if let Some(c) = label_col {
            if cells[c].is_empty() {
                return Err(CoreError::Parse {
                    line,
                    message: "empty label cell".into(),
                });
            }
            labels.push(cells[c].to_string());
        }
        if let (Some(tc), Some(ec)) = (time_col, event_col) {
            let time = parse_cell(cells[tc], line, "time")?;
            if !time.is_finite() || time <= 0.0 {
                return Err(CoreError::Parse {
                    line,
                    message: format!("survival time must be positive, got {time}"),
                });
            }
            let event = match cells[ec].trim() {
                "0" => false,
                "1" => true,
                other => {
                    return Err(CoreError::Parse {
                        line,
                        message: format!("event cell `{other}` must be 0 or 1"),
                    })
                }
            };
            survival.push((time, event));
        }
        n += 1;
    }

    let mut matrix = ExpressionMatrix::new(gene_ids, Tensor::new(vec![n, gene_cols.len()], values)?)?;
    if label_col.is_some() {
        matrix.labels = Some(labels);
    }
    if time_col.is_some() {
        matrix.survival = Some(survival);
    }
    Ok(matrix)
}

/// Inverse of load_tsv; floats are written in shortest round-trip form.
pub fn save_tsv(m: &ExpressionMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    let mut header: Vec<String> = m.gene_ids.clone();
    if m.labels.is_some() {
        header.push("label".into());
    }
    if m.survival.is_some() {
        header.push("time".into());
        header.push("event".into());
    }
    out.push_str(&header.join("\t"));
    out.push('\n');
    for i in 0..m.n_samples() {
        let mut cells: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
        if let Some(labels) = &m.labels {
            cells.push(labels[i].clone());
        }
        if let Some(survival) = &m.survival {
            let (t, e) = survival[i];
            cells.push(format!("{t:?}"));
            cells.push(if e { "1" } else { "0" }.into());
        }
        let _ = writeln!(out, "{}", cells.join("\t"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// A gene is dropped only when it is weak on both axes: variance under the
/// variance threshold and mean under the mean threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterSpec {
    pub variance_threshold: f64,
    pub mean_threshold: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec {
            variance_threshold: 0.4,
            mean_threshold: 0.8,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.variance_threshold < 0.0 || self.mean_threshold < 0.0 {
            return Err(CoreError::Config(format!(
                "filter thresholds must be nonnegative, got variance {} / mean {}",
                self.variance_threshold, self.mean_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub matrix: ExpressionMatrix,
    pub dropped: Vec<String>,
}

fn column_stats(m: &ExpressionMatrix, gene: usize) -> (f64, f64) {
    let n = m.n_samples();
    let d = m.n_genes();
    let mut mean = 0.0;
    for i in 0..n {
        mean += m.samples.values[i * d + gene];
    }
    mean /= n as f64;
    let mut var = 0.0;
    for i in 0..n {
        var += (m.samples.values[i * d + gene] - mean).powi(2);
    }
    var /= (n - 1) as f64;
    (mean, var)
}

/// Drop genes that are low-variance AND low-mean, keeping column order.
pub fn filter_genes(m: &ExpressionMatrix, spec: &FilterSpec) -> Result<FilterOutcome> {
    spec.validate()?;
    if m.normalization.is_some() {
        return Err(CoreError::Contract(
            "gene filtering runs on raw values, before normalization".into(),
        ));
    }
    if m.n_samples() < 2 {
        return Err(CoreError::Contract(
            "gene filtering needs at least two samples to estimate variance".into(),
        ));
    }
    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    for gene in 0..m.n_genes() {
        let (mean, var) = column_stats(m, gene);
        if var < spec.variance_threshold && mean < spec.mean_threshold {
            dropped.push(m.gene_ids[gene].clone());
        } else {
            keep.push(gene);
        }
    }
    if keep.is_empty() {
        return Err(CoreError::Contract(
            "filter dropped every gene; relax the thresholds".into(),
        ));
    }
    let d = m.n_genes();
    let mut values = Vec::with_capacity(m.n_samples() * keep.len());
    for i in 0..m.n_samples() {
        for &gene in &keep {
            values.push(m.samples.values[i * d + gene]);
        }
    }
    let matrix = ExpressionMatrix {
        gene_ids: keep.iter().map(|&gi| m.gene_ids[gi].clone()).collect(),
        samples: Tensor::new(vec![m.n_samples(), keep.len()], values)?,
        labels: m.labels.clone(),
        survival: m.survival.clone(),
        normalization: None,
    };
    Ok(FilterOutcome { matrix, dropped })
}

/// Fit per-gene (min, max) on this matrix and rescale it to [0, 1].
/// Fit on the training split only; carry the stats to test data via
/// apply_normalization.
pub fn minmax_normalize(m: &ExpressionMatrix) -> Result<ExpressionMatrix> {
    let d = m.n_genes();
    let n = m.n_samples();
    if n == 0 {
        return Err(CoreError::Contract("cannot normalize an empty matrix".into()));
    }
    let mut stats = Vec::with_capacity(d);
    for gene in 0..d {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            let v = m.samples.values[i * d + gene];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo == hi {
            return Err(CoreError::DegenerateGene(format!(
                "gene `{}` is constant ({lo}); the filter should have removed it",
                m.gene_ids[gene]
            )));
        }
        stats.push((lo, hi));
    }
    apply_normalization(m, &stats)
}

/// Rescale with previously fitted stats, clamping out-of-range values into
/// [0, 1].
pub fn apply_normalization(m: &ExpressionMatrix, stats: &[(f64, f64)]) -> Result<ExpressionMatrix> {
    let d = m.n_genes();
    if stats.len() != d {
        return Err(CoreError::Shape(format!(
            "{} normalization stats for {d} genes",
            stats.len()
        )));
    }
    for (gene, &(lo, hi)) in stats.iter().enumerate() {
        if !(lo < hi) {
            return Err(CoreError::DegenerateGene(format!(
                "gene `{}` has no spread (min {lo}, max {hi})",
                m.gene_ids[gene]
            )));
        }
    }
    let values = m
        .samples
        .values
        .chunks(d)
        .flat_map(|row| {
            row.iter()
                .zip(stats)
                .map(|(&v, &(lo, hi))| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
        })
        .collect();
    Ok(ExpressionMatrix {
        gene_ids: m.gene_ids.clone(),
        samples: Tensor::new(vec![m.n_samples(), d], values)?,
        labels: m.labels.clone(),
        survival: m.survival.clone(),
        normalization: Some(stats.to_vec()),
    })
}

/// Undo min-max scaling using the stats stored on the matrix.
pub fn denormalize(m: &ExpressionMatrix) -> Result<ExpressionMatrix> {
    let stats = m.normalization.as_ref().ok_or_else(|| {
        CoreError::Contract("matrix carries no normalization stats to undo".into())
    })?;
    let d = m.n_genes();
    let values = m
        .samples
        .values
        .chunks(d)
        .flat_map(|row| {
            row.iter()
                .zip(stats)
                .map(|(&v, &(lo, hi))| lo + v * (hi - lo))
        })
        .collect();
    Ok(ExpressionMatrix {
        gene_ids: m.gene_ids.clone(),
        samples: Tensor::new(vec![m.n_samples(), d], values)?,
        labels: m.labels.clone(),
        survival: m.survival.clone(),
        normalization: None,
    })
}

/// Per-class 4:1 partition (test = ceil of a fifth of each class), shuffled
/// under the seed and concatenated in original row order.
pub fn stratified_split(
    m: &ExpressionMatrix,
    seed: u64,
) -> Result<(ExpressionMatrix, ExpressionMatrix)> {
    let (label_idx, classes) = m.label_classes()?;
    let (train, test) = stratified_indices(&label_idx, classes.len(), seed)?;
    Ok((m.select_rows(&train)?, m.select_rows(&test)?))
}

/// Unstratified 4:1 partition for unlabeled or survival data.
pub fn random_split(
    m: &ExpressionMatrix,
    seed: u64,
) -> Result<(ExpressionMatrix, ExpressionMatrix)> {
    let n = m.n_samples();
    if n < 2 {
        return Err(CoreError::Contract(format!(
            "cannot split {n} sample(s)"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = RngState::new(seed ^ 0x51_17);
    rng.shuffle(&mut idx);
    let held = n.div_ceil(5);
    let mut test = idx[..held].to_vec();
    let mut train = idx[held..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((m.select_rows(&train)?, m.select_rows(&test)?))
}

/// Recipe for a synthetic cohort: class signatures plus shared low-rank
/// structure, squashed into [0, 1], with optional proportional-hazards
/// survival.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    /// One count per class; uneven counts model imbalance.
    pub samples_per_class: Vec<usize>,
    pub gene_count: usize,
    pub latent_rank: usize,
    /// How far class centers sit apart before squashing.
    pub class_signature_strength: f64,
    /// Hazard weights over the latent factors. None disables survival.
    pub survival_weights: Option<Vec<f64>>,
    /// Rate of the independent exponential censor. Censoring hits low-risk
    /// subjects hardest (they live longest), so the marginal fraction
    /// censored depends on the risk spread; the default 0.08 lands near 25%
    /// under the default survival weights.
    pub censor_rate: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_classes: 4,
            samples_per_class: vec![125; 4],
            gene_count: 200,
            latent_rank: 5,
            class_signature_strength: 3.0,
            survival_weights: Some(vec![1.5, -1.5, 1.5, -1.5, 1.5]),
            censor_rate: 0.08,
            noise: 0.3,
            seed: 17,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0
            || self.gene_count == 0
            || self.latent_rank == 0
            || self.samples_per_class.iter().any(|&c| c == 0)
        {
            return Err(CoreError::Config(
                "synthetic counts must all be positive".into(),
            ));
        }
        if self.samples_per_class.len() != self.n_classes {
            return Err(CoreError::Config(format!(
                "{} per-class counts for {} classes",
                self.samples_per_class.len(),
                self.n_classes
            )));
        }
        if self.gene_count < self.latent_rank {
            return Err(CoreError::Config(format!(
                "gene count {} below latent rank {}",
                self.gene_count, self.latent_rank
            )));
        }
        if let Some(w) = &self.survival_weights {
            if w.len() != self.latent_rank {
                return Err(CoreError::Config(format!(
                    "{} hazard weights for latent rank {}",
                    w.len(),
                    self.latent_rank
                )));
            }
        }
        if !(self.censor_rate > 0.0) || !(self.noise >= 0.0) || !(self.class_signature_strength >= 0.0) {
            return Err(CoreError::Config(
                "censor rate must be positive; noise and signature strength nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub matrix: ExpressionMatrix,
    /// The generator's own hazard score per sample, for oracle checks.
    pub true_risks: Option<Vec<f64>>,
}

/// x = sigmoid(class signature + latent . factor + noise), labels attached,
/// survival times exponential with rate exp(w . latent) censored by an
/// independent exponential clock. Identical spec (and seed) reproduces the
/// matrix bit for bit.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = RngState::new(spec.seed);
    let d = spec.gene_count;
    let r = spec.latent_rank;

    let factor = rng.sample_gaussian(vec![r, d], 0.0, 1.0 / (r as f64).sqrt())?;
    let signatures = rng.sample_gaussian(
        vec![spec.n_classes, d],
        0.0,
        spec.class_signature_strength,
    )?;

    let total: usize = spec.samples_per_class.iter().sum();
    let mut values = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    let mut survival = Vec::with_capacity(total);
    let mut risks = Vec::with_capacity(total);
    for (class, &count) in spec.samples_per_class.iter().enumerate() {
        for _ in 0..count {
            let latent: Vec<f64> = (0..r).map(|_| rng.normal(0.0, 1.0)).collect::<Result<_>>()?;
            for g in 0..d {
                let mut x = signatures.values[class * d + g];
                for (k, &z) in latent.iter().enumerate() {
                    x += z * factor.values[k * d + g];
                }
                if spec.noise > 0.0 {
                    x += rng.normal(0.0, spec.noise)?;
                }
                values.push(1.0 / (1.0 + (-x).exp()));
            }
            labels.push(format!("class{class}"));
            if let Some(w) = &spec.survival_weights {
                let risk: f64 = w.iter().zip(&latent).map(|(a, b)| a * b).sum();
                let event_time = -rng.uniform01().max(1e-12).ln() / risk.exp();
                let censor_time = -rng.uniform01().max(1e-12).ln() / spec.censor_rate;
                let time = event_time.min(censor_time).max(1e-12);
                survival.push((time, event_time <= censor_time));
                risks.push(risk);
            }
        }
    }

    let gene_ids = (0..d).map(|g| format!("gene_{g}")).collect();
    let mut matrix = ExpressionMatrix::new(gene_ids, Tensor::new(vec![total, d], values)?)?;
    matrix.labels = Some(labels);
    let has_survival = spec.survival_weights.is_some();
    if has_survival {
        matrix.survival = Some(survival);
    }
    Ok(SyntheticData {
        matrix,
        true_risks: has_survival.then_some(risks),
    })
}
