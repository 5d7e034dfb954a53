//! Post-hoc feature analysis and the ablation ladder. Correlates latent
//! coordinates with genes, ranks features by variance, exports
//! reconstructions for external plotting and compares encoder variants.

use serde::{Deserialize, Serialize};

use crate::autodiff::graph::Graph;
use crate::autodiff::rng::RngState;
use crate::autodiff::tensor::Tensor;
use crate::data::ExpressionMatrix;
use crate::error::{CoreError, Result};
use crate::heads::classify::{fit_classifier, MetricsReport};
use crate::heads::survival::fit_survival;
use crate::heads::FinetuneConfig;
use crate::model::{EncoderKind, GeneMoeConfig, GeneMoeModel};
use crate::pretrain::{pretrain, TrainConfig};

pub const DEFAULT_LEADING_FEATURES: usize = 20;
pub const DEFAULT_STRONG_THRESHOLD: f64 = 0.4;

fn column(t: &Tensor, j: usize) -> Vec<f64> {
    let (rows, cols) = (t.shape[0], t.shape[1]);
    (0..rows).map(|i| t.values[i * cols + j]).collect()
}

fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Indices of the `v` largest-variance latent coordinates, highest first,
/// ties broken toward the lower index.
pub fn leading_features(latents: &Tensor, v: usize) -> Result<Vec<usize>> {
    let (n, d) = latents.dims2()?;
    if n < 2 {
        return Err(CoreError::Contract(format!(
            "variance ranking needs at least 2 samples, got {n}"
        )));
    }
    if v == 0 || v > d {
        return Err(CoreError::Contract(format!(
            "requested {v} leading features from a {d}-dim latent"
        )));
    }
    let mut ranked: Vec<(usize, f64)> = (0..d)
        .map(|j| (j, sample_variance(&column(latents, j))))
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(ranked.into_iter().take(v).map(|(j, _)| j).collect())
}

/// Sample Pearson correlation. Both inputs must vary.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CoreError::Shape(format!(
            "correlation over mismatched lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(CoreError::Contract(
            "correlation needs at least 2 observations".into(),
        ));
    }
    if a.iter().chain(b.iter()).any(|x| !x.is_finite()) {
        return Err(CoreError::Domain(
            "correlation input must be finite".into(),
        ));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    let mut sab = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (da, db) = (x - ma, y - mb);
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(CoreError::UndefinedStatistic(
            "correlation against a constant vector".into(),
        ));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Latent means for every sample, evaluation mode: no gate noise, no
/// dropout, no reparameterization draw.
pub fn encode_latents(model: &GeneMoeModel, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x)?;
    let enc = model.encode(&mut g, &model.store, xv, None)?;
    let (rows, cols) = g.tape.shape(enc.mu);
    Tensor::new(vec![rows, cols], g.value(enc.mu).to_vec())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// Latent coordinates retained for the screen, variance rank order.
    pub leading_feature_indices: Vec<usize>,
    /// Pearson rho per retained coordinate (rows) against every gene
    /// (columns). Degenerate genes are reported as 0.
    pub correlations: Vec<Vec<f64>>,
    /// Genes whose mean absolute correlation over the retained coordinates
    /// exceeds the threshold.
    pub strong_gene_ids: Vec<String>,
    pub threshold: f64,
    /// Coordinates that made the variance cut but are constant over the
    /// encoded samples; they carry no correlation signal and were dropped.
    pub excluded_constant_features: Vec<usize>,
    /// Genes constant over the samples, ineligible for the strong set.
    pub degenerate_genes: Vec<String>,
}

/// Encode the data, keep the top-`v` variance latent coordinates and screen
/// genes by mean absolute correlation against them.
pub fn correlation_report(
    model: &GeneMoeModel,
    data: &ExpressionMatrix,
    v: usize,
    threshold: f64,
) -> Result<CorrelationReport> {
    if !threshold.is_finite() || threshold < 0.0 {
        return Err(CoreError::Config(format!(
            "strong-gene threshold must be finite and nonnegative, got {threshold}"
        )));
    }
    let latents = encode_latents(model, &data.samples)?;
    let candidates = leading_features(&latents, v)?;
    let mut retained = Vec::new();
    let mut excluded = Vec::new();
    let mut feature_cols = Vec::new();
    for &j in &candidates {
        let col = column(&latents, j);
        if sample_variance(&col) == 0.0 {
            excluded.push(j);
        } else {
            retained.push(j);
            feature_cols.push(col);
        }
    }
    let n_genes = data.n_genes();
    let mut gene_is_constant = vec![false; n_genes];
    let mut degenerate = Vec::new();
    let mut gene_cols = Vec::with_capacity(n_genes);
    for gj in 0..n_genes {
        let col = column(&data.samples, gj);
        if sample_variance(&col) == 0.0 {
            gene_is_constant[gj] = true;
            degenerate.push(data.gene_ids[gj].clone());
        }
        gene_cols.push(col);
    }
    let mut correlations = Vec::with_capacity(retained.len());
    for fcol in &feature_cols {
        let mut row = Vec::with_capacity(n_genes);
        for gj in 0..n_genes {
            if gene_is_constant[gj] {
                row.push(0.0);
            } else {
                row.push(pearson(fcol, &gene_cols[gj])?);
            }
        }
        correlations.push(row);
    }
    let mut strong = Vec::new();
    if !correlations.is_empty() {
        for gj in 0..n_genes {
            if gene_is_constant[gj] {
                continue;
            }
            let mean_abs = correlations.iter().map(|r| r[gj].abs()).sum::<f64>()
                / correlations.len() as f64;
            if mean_abs > threshold {
                strong.push(data.gene_ids[gj].clone());
            }
        }
    }
    Ok(CorrelationReport {
        leading_feature_indices: retained,
        correlations,
        strong_gene_ids: strong,
        threshold,
        excluded_constant_features: excluded,
        degenerate_genes: degenerate,
    })
}

/// Heat-map-ready table: one row per retained latent coordinate, one
/// column per gene.
pub fn correlation_csv(report: &CorrelationReport, gene_ids: &[String]) -> Result<String> {
    if let Some(row) = report.correlations.first() {
        if row.len() != gene_ids.len() {
            return Err(CoreError::Shape(format!(
                "report covers {} genes, matrix names {}",
                row.len(),
                gene_ids.len()
            )));
        }
    }
    let mut out = String::from("feature");
    for id in gene_ids {
        out.push(',');
        out.push_str(id);
    }
    out.push('\n');
    for (idx, row) in report.leading_feature_indices.iter().zip(&report.correlations) {
        out.push_str(&format!("latent{idx}"));
        for v in row {
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Deterministic reconstructions: decode the latent means, no sampling.
/// Rows stay aligned with the input.
pub fn reconstructions(model: &GeneMoeModel, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x)?;
    let enc = model.encode(&mut g, &model.store, xv, None)?;
    let recon = model.decode(&mut g, &model.store, enc.mu)?;
    let (rows, cols) = g.tape.shape(recon);
    Tensor::new(vec![rows, cols], g.value(recon).to_vec())
}

/// Plain CSV matrix with a gene-id header, shortest round-trip floats.
pub fn matrix_csv(gene_ids: &[String], values: &Tensor) -> Result<String> {
    let (rows, cols) = values.dims2()?;
    if cols != gene_ids.len() {
        return Err(CoreError::Shape(format!(
            "{} gene ids for {cols} matrix columns",
            gene_ids.len()
        )));
    }
    let mut out = String::new();
    out.push_str(&gene_ids.join(","));
    out.push('\n');
    for i in 0..rows {
        for j in 0..cols {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{:?}", values.values[i * cols + j]));
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub encoder: String,
    pub pretrained: bool,
    /// Gated layers found by introspection; 0 for the dense baseline.
    pub gated_layers: usize,
    /// Held-out classification metrics, when the data carries labels.
    pub report: Option<MetricsReport>,
    /// Held-out concordance, when the data carries survival columns.
    pub concordance: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Four-variant comparison under one seed and budget: dense baseline,
/// gated experts, experts plus attention experts, and the same with
/// adversarial pre-training on the raw matrix first. Each variant is
/// fine-tuned per task the data supports.
pub fn ablate(
    data: &ExpressionMatrix,
    base: &GeneMoeConfig,
    finetune: &FinetuneConfig,
    pretrain_cfg: &TrainConfig,
    gamma: f64,
    seed: u64,
) -> Result<AblationTable> {
    let has_labels = data.labels.is_some();
    let has_survival = data.survival.is_some();
    if !has_labels && !has_survival {
        return Err(CoreError::Contract(
            "ablation needs labels or survival columns to score variants".into(),
        ));
    }
    let ladder = [
        ("dense", EncoderKind::Dense, false),
        ("moe", EncoderKind::Moe, false),
        ("moe_moae", EncoderKind::MoeMoae, false),
        ("moe_moae_pretrained", EncoderKind::MoeMoae, true),
    ];
    let mut rows = Vec::with_capacity(ladder.len());
    for (variant, kind, pretrained) in ladder {
        let mut cfg = base.clone();
        cfg.input_dim = data.n_genes();
        cfg.encoder = kind;
        let mut rng = RngState::new(seed);
        let mut model = GeneMoeModel::new(cfg, &mut rng)?;
        if pretrained {
            pretrain(&mut model, &data.samples, pretrain_cfg, None)?;
        }
        let report = if has_labels {
            let (labels, classes) = data.label_classes()?;
            let mut task_model = model.clone();
            let (_, log) = fit_classifier(
                &mut task_model,
                &data.samples,
                &labels,
                classes.len(),
                gamma,
                finetune,
            )?;
            Some(log.report)
        } else {
            None
        };
        let concordance = if has_survival {
            let records = data.survival_records()?;
            let mut task_model = model.clone();
            let (_, log) = fit_survival(&mut task_model, &records, finetune)?;
            Some(log.test_concordance)
        } else {
            None
        };
        rows.push(AblationRow {
            variant: variant.to_string(),
            encoder: kind.as_str().to_string(),
            pretrained,
            gated_layers: model.gated_layer_count(),
            report,
            concordance,
        });
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn uniform_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = RngState::new(seed);
        let values = (0..rows * cols).map(|_| rng.uniform01()).collect();
        Tensor::new(vec![rows, cols], values).unwrap()
    }

    #[test]
    fn variance_ranking_matches_brute_force() {
        let latents = uniform_matrix(12, 5, 3);
        let got = leading_features(&latents, 5).unwrap();
        let mut expect: Vec<(usize, f64)> = (0..5)
            .map(|j| (j, sample_variance(&column(&latents, j))))
            .collect();
        expect.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let expect: Vec<usize> = expect.into_iter().map(|(j, _)| j).collect();
        assert_eq!(got, expect);
        assert_eq!(leading_features(&latents, 2).unwrap(), expect[..2].to_vec());
    }

    #[test]
    fn single_varying_coordinate_leads() {
        let mut values = vec![0.5; 8 * 3];
        for i in 0..8 {
            values[i * 3 + 1] = i as f64;
        }
        let latents = Tensor::new(vec![8, 3], values).unwrap();
        assert_eq!(leading_features(&latents, 1).unwrap(), vec![1]);
        // all-constant remainder ties at zero variance, lower index first
        assert_eq!(leading_features(&latents, 3).unwrap(), vec![1, 0, 2]);
    }

    #[test]
    fn variance_ranking_rejects_bad_requests() {
        let latents = uniform_matrix(4, 3, 9);
        assert!(leading_features(&latents, 4).is_err());
        assert!(leading_features(&latents, 0).is_err());
        let one_row = uniform_matrix(1, 3, 9);
        assert!(leading_features(&one_row, 1).is_err());
    }

    #[test]
    fn pearson_identity_and_sign() {
        let a = vec![0.2, 1.4, -0.7, 3.0];
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-14);
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-14);
    }

    #[test]
    fn pearson_hand_case() {
        // cov 3/2, sd_a 1, sd_b sqrt(7/3)
        let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.981_980_506_061_965_7).abs() < 1e-12, "{r}");
    }

    #[test]
    fn pearson_rejects_degenerate_input() {
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(CoreError::UndefinedStatistic(_))
        ));
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(pearson(&[1.0], &[2.0]).is_err());
    }

    fn small_config(input_dim: usize) -> GeneMoeConfig {
        GeneMoeConfig {
            input_dim,
            hidden: vec![6],
            latent_dim: 4,
            encoder: EncoderKind::MoeMoae,
            n_experts: 2,
            top_k: 2,
            moae_experts: 2,
            moae_top_k: 1,
            token_count: 2,
            dropout: 0.0,
            critic_hidden: vec![4],
            ..GeneMoeConfig::default()
        }
    }

    #[test]
    fn report_matches_direct_pearson_on_untrained_model() {
        let mut rng = RngState::new(11);
        let model = GeneMoeModel::new(small_config(5), &mut rng).unwrap();
        let x = uniform_matrix(10, 5, 12);
        let gene_ids: Vec<String> = (0..5).map(|g| format!("g{g}")).collect();
        let data = ExpressionMatrix::new(gene_ids, x).unwrap();
        let report = correlation_report(&model, &data, 4, 0.4).unwrap();
        assert_eq!(report.correlations.len(), report.leading_feature_indices.len());
        let latents = encode_latents(&model, &data.samples).unwrap();
        for (row, &j) in report
            .correlations
            .iter()
            .zip(&report.leading_feature_indices)
        {
            let fcol = column(&latents, j);
            for (gj, &r) in row.iter().enumerate() {
                assert!((-1.0..=1.0).contains(&r));
                let direct = pearson(&fcol, &column(&data.samples, gj)).unwrap();
                assert_eq!(r, direct);
            }
        }
    }

    /// Wire gene 0 straight into latent coordinate 0 and leave the other
    /// coordinates dead, then check the screen recovers exactly that.
    fn planted_model() -> GeneMoeModel {
        let cfg = GeneMoeConfig {
            input_dim: 6,
            hidden: vec![4],
            latent_dim: 3,
            encoder: EncoderKind::Dense,
            dropout: 0.0,
            critic_hidden: vec![4],
            ..GeneMoeConfig::default()
        };
        let mut rng = RngState::new(5);
        let mut model = GeneMoeModel::new(cfg, &mut rng).unwrap();
        let w1 = model.store.id("encoder.layer0.weight").unwrap();
        let t = model.store.tensor_mut(w1);
        t.values.iter_mut().for_each(|v| *v = 0.0);
        t.values[0] = 1.0; // in 0 -> hidden 0
        let w2 = model.store.id("mu_head.weight").unwrap();
        let t = model.store.tensor_mut(w2);
        t.values.iter_mut().for_each(|v| *v = 0.0);
        t.values[0] = 1.0; // hidden 0 -> latent 0
        model
    }

    fn planted_data() -> ExpressionMatrix {
        let mut x = uniform_matrix(12, 6, 21);
        for i in 0..12 {
            x.values[i * 6 + 3] = 0.5; // gene 3 constant
        }
        let gene_ids: Vec<String> = (0..6).map(|g| format!("g{g}")).collect();
        ExpressionMatrix::new(gene_ids, x).unwrap()
    }

    #[test]
    fn planted_copy_shows_up_strong() {
        let model = planted_model();
        let data = planted_data();
        let report = correlation_report(&model, &data, 3, 0.4).unwrap();
        assert_eq!(report.leading_feature_indices, vec![0]);
        assert_eq!(report.excluded_constant_features, vec![1, 2]);
        assert!((report.correlations[0][0] - 1.0).abs() < 1e-12);
        assert!(report.strong_gene_ids.contains(&"g0".to_string()));
        assert_eq!(report.degenerate_genes, vec!["g3".to_string()]);
        assert!(!report.strong_gene_ids.contains(&"g3".to_string()));
        assert_eq!(report.correlations[0][3], 0.0);
    }

    #[test]
    fn impossible_threshold_empties_the_strong_set() {
        let report = correlation_report(&planted_model(), &planted_data(), 3, 1.0).unwrap();
        assert!(report.strong_gene_ids.is_empty());
    }

    #[test]
    fn reconstruction_rows_align_and_stay_in_unit_range() {
        let mut rng = RngState::new(2);
        let model = GeneMoeModel::new(small_config(5), &mut rng).unwrap();
        let x = uniform_matrix(9, 5, 13);
        let recon = reconstructions(&model, &x).unwrap();
        assert_eq!(recon.shape, vec![9, 5]);
        assert!(recon.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn csv_renders_expected_shapes() {
        let model = planted_model();
        let data = planted_data();
        let report = correlation_report(&model, &data, 3, 0.4).unwrap();
        let csv = correlation_csv(&report, &data.gene_ids).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + report.correlations.len());
        assert!(lines[0].starts_with("feature,g0,"));
        assert_eq!(lines[1].split(',').count(), 7);
        assert!(lines[1].starts_with("latent0,"));

        let m = matrix_csv(&data.gene_ids, &data.samples).unwrap();
        let lines: Vec<&str> = m.lines().collect();
        assert_eq!(lines.len(), 13);
        assert_eq!(lines[0].split(',').count(), 6);
        let bad_ids = vec!["a".to_string()];
        assert!(matrix_csv(&bad_ids, &data.samples).is_err());
    }

    fn tiny_spec(with_survival: bool) -> SyntheticSpec {
        SyntheticSpec {
            n_classes: 2,
            samples_per_class: vec![12, 12],
            gene_count: 8,
            latent_rank: 2,
            class_signature_strength: 3.0,
            survival_weights: if with_survival {
                Some(vec![1.5, -1.5])
            } else {
                None
            },
            noise: 0.1,
            seed: 31,
            ..SyntheticSpec::default()
        }
    }

    fn tiny_budgets() -> (GeneMoeConfig, FinetuneConfig, TrainConfig) {
        let base = GeneMoeConfig {
            hidden: vec![8],
            latent_dim: 4,
            n_experts: 2,
            top_k: 2,
            moae_experts: 2,
            moae_top_k: 1,
            token_count: 2,
            dropout: 0.0,
            critic_hidden: vec![4],
            ..GeneMoeConfig::default()
        };
        let finetune = FinetuneConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 0.01,
            seed: 3,
            freeze_backbone: false,
            repeats: 1,
        };
        let pre = TrainConfig {
            epochs: 1,
            batch_size: 8,
            critic_steps: 1,
            learning_rate: 1e-4,
            seed: 3,
            ..TrainConfig::default()
        };
        (base, finetune, pre)
    }

    #[test]
    fn ablation_table_has_four_rows_and_a_bare_baseline() {
        let data = generate_synthetic(&tiny_spec(false)).unwrap().matrix;
        let (base, finetune, pre) = tiny_budgets();
        let table = ablate(&data, &base, &finetune, &pre, 0.0, 44).unwrap();
        let names: Vec<&str> = table.rows.iter().map(|r| r.variant.as_str()).collect();
        assert_eq!(names, ["dense", "moe", "moe_moae", "moe_moae_pretrained"]);
        assert_eq!(table.rows[0].gated_layers, 0);
        assert!(table.rows[1].gated_layers > 0);
        assert!(table.rows[2].gated_layers > table.rows[1].gated_layers);
        assert!(table.rows[3].pretrained);
        for row in &table.rows {
            assert!(row.report.is_some());
            assert!(row.concordance.is_none());
        }
        let again = ablate(&data, &base, &finetune, &pre, 0.0, 44).unwrap();
        let a = serde_json::to_string(&table).unwrap();
        let b = serde_json::to_string(&again).unwrap();
        assert_eq!(a, b);
        let back: AblationTable = serde_json::from_str(&a).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), a);
    }

    #[test]
    fn ablation_scores_survival_when_present() {
        let data = generate_synthetic(&tiny_spec(true)).unwrap().matrix;
        let (base, finetune, pre) = tiny_budgets();
        let table = ablate(&data, &base, &finetune, &pre, 0.0, 44).unwrap();
        for row in &table.rows {
            assert!(row.report.is_some());
            let c = row.concordance.unwrap();
            assert!((0.0..=1.0).contains(&c), "{c}");
        }
    }

    #[test]
    fn ablation_without_targets_is_rejected() {
        let x = uniform_matrix(6, 4, 1);
        let ids: Vec<String> = (0..4).map(|g| format!("g{g}")).collect();
        let data = ExpressionMatrix::new(ids, x).unwrap();
        let (base, finetune, pre) = tiny_budgets();
        assert!(ablate(&data, &base, &finetune, &pre, 0.0, 1).is_err());
    }
}
