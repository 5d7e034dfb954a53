//! Subcommand bodies. Each one validates its inputs, runs the library and
//! writes a fixed set of artifacts into the output directory.

use std::path::Path;

use genemoe::analysis::{self, correlation_csv, correlation_report, matrix_csv, reconstructions};
use genemoe::checkpoint::{Checkpoint, CheckpointKind};
use genemoe::data::{
    apply_normalization, filter_genes, generate_synthetic, load_tsv, minmax_normalize, save_tsv,
    ExpressionMatrix, FilterSpec,
};
use genemoe::error::{CoreError, Result};
use genemoe::heads::classify::{
    confusion_matrix, fit_classifier, metrics_from_confusion, predict_labels,
    run_classify_repeats,
};
use genemoe::heads::survival::{
    concordance_index, fit_survival, predict_risks, run_survival_repeats, SurvivalRecord,
};
use genemoe::model::GeneMoeModel;
use genemoe::pretrain::pretrain;
use genemoe::RngState;

use crate::artifacts::{
    emit_risk_groups, ensure_dir, load_model, ndjson_series, read_normalization, require_file,
    write_json, write_normalization, write_text, LoadedHead,
};
use crate::config::FileConfig;

pub fn synth(cfg: &FileConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let data = generate_synthetic(&cfg.synth)?;
    save_tsv(&data.matrix, out.join("data.tsv"))?;
    if let Some(risks) = &data.true_risks {
        let mut body = String::from("true_risk\n");
        for r in risks {
            body.push_str(&format!("{r:?}\n"));
        }
        write_text(&out.join("true_risks.csv"), &body)?;
    }
    let censored = data.matrix.survival.as_ref().map(|s| {
        s.iter().filter(|(_, event)| !event).count() as f64 / s.len() as f64
    });
    let summary = serde_json::json!({
        "samples": data.matrix.n_samples(),
        "genes": data.matrix.n_genes(),
        "classes": cfg.synth.n_classes,
        "survival": data.matrix.survival.is_some(),
        "censored_fraction": censored,
    });
    write_json(&out.join("synth.json"), &summary)?;
    println!(
        "wrote {} samples x {} genes to {}",
        data.matrix.n_samples(),
        data.matrix.n_genes(),
        out.join("data.tsv").display()
    );
    Ok(())
}

pub fn pretrain_cmd(cfg: &FileConfig, data_path: &Path, out: &Path) -> Result<()> {
    require_file(data_path)?;
    ensure_dir(out)?;
    let mut matrix = load_tsv(data_path)?;
    if cfg.data.filter {
        let spec = FilterSpec {
            variance_threshold: cfg.data.variance_threshold,
            mean_threshold: cfg.data.mean_threshold,
        };
        let outcome = filter_genes(&matrix, &spec)?;
        println!(
            "filtered {} flat genes, {} kept",
            outcome.dropped.len(),
            outcome.matrix.n_genes()
        );
        if !outcome.dropped.is_empty() {
            // downstream commands need the same gene set; give them a file
            save_tsv(&outcome.matrix, out.join("filtered.tsv"))?;
        }
        matrix = outcome.matrix;
    }
    if cfg.data.normalize {
        matrix = minmax_normalize(&matrix)?;
        write_normalization(&out.join("normalization.kv"), &matrix)?;
    }
    let mut model_cfg = cfg.model.clone();
    model_cfg.input_dim = matrix.n_genes();
    let mut rng = RngState::new(cfg.training.seed);
    let mut model = GeneMoeModel::new(model_cfg, &mut rng)?;
    let log = pretrain(&mut model, &matrix.samples, &cfg.training, Some(out))?;
    write_text(&out.join("train_log.ndjson"), &log.to_ndjson()?)?;
    let final_name = format!("checkpoint_epoch{:04}.ckpt", cfg.training.epochs);
    std::fs::copy(out.join(final_name), out.join("model.ckpt"))?;
    let last = log.epochs.last().expect("validated epochs >= 1");
    println!(
        "pre-trained {} epochs; final l1 {:.4}; checkpoint {}",
        cfg.training.epochs,
        last.losses.l1,
        out.join("model.ckpt").display()
    );
    Ok(())
}

/// Load a TSV and put it into the model's input space: saved stats when
/// `--norm` is given, a fresh min-max fit when the config asks for
/// normalization, raw values otherwise.
fn load_normalized(
    data_path: &Path,
    norm: Option<&Path>,
    cfg: &FileConfig,
) -> Result<ExpressionMatrix> {
    require_file(data_path)?;
    let matrix = load_tsv(data_path)?;
    match norm {
        Some(p) => {
            require_file(p)?;
            let stats = read_normalization(p, &matrix.gene_ids)?;
            apply_normalization(&matrix, &stats)
        }
        None if cfg.data.normalize => minmax_normalize(&matrix),
        None => Ok(matrix),
    }
}

/// Fresh model from the config, or the weights of a pre-training
/// checkpoint when one is given.
fn start_model(
    cfg: &FileConfig,
    checkpoint: Option<&Path>,
    input_dim: usize,
) -> Result<GeneMoeModel> {
    match checkpoint {
        Some(p) => {
            require_file(p)?;
            let (ckpt, model, _) = load_model(p)?;
            if ckpt.kind != CheckpointKind::Pretrain {
                return Err(CoreError::Config(format!(
                    "warm start expects a pretrain checkpoint, found `{}`",
                    ckpt.kind.as_str()
                )));
            }
            if model.config.input_dim != input_dim {
                return Err(CoreError::Config(format!(
                    "checkpoint expects {} genes, data has {input_dim}",
                    model.config.input_dim
                )));
            }
            Ok(model)
        }
        None => {
            let mut model_cfg = cfg.model.clone();
            model_cfg.input_dim = input_dim;
            let mut rng = RngState::new(cfg.finetune.seed);
            GeneMoeModel::new(model_cfg, &mut rng)
        }
    }
}

fn note_fresh_normalization(
    matrix: &ExpressionMatrix,
    norm: Option<&Path>,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<()> {
    if norm.is_none() && matrix.normalization.is_some() {
        write_normalization(&out.join("normalization.kv"), matrix)?;
        if checkpoint.is_some() {
            eprintln!(
                "note: normalization fitted on this dataset; pass --norm to reuse the stats saved at pre-training"
            );
        }
    }
    Ok(())
}

pub fn survival_cmd(
    cfg: &FileConfig,
    data_path: &Path,
    checkpoint: Option<&Path>,
    norm: Option<&Path>,
    out: &Path,
) -> Result<()> {
    ensure_dir(out)?;
    let matrix = load_normalized(data_path, norm, cfg)?;
    note_fresh_normalization(&matrix, norm, checkpoint, out)?;
    let records = matrix.survival_records()?;
    let base = start_model(cfg, checkpoint, matrix.n_genes())?;
    let mut model = base.clone();
    let (head, log) = fit_survival(&mut model, &records, &cfg.finetune)?;

    let rng = RngState::new(cfg.finetune.seed);
    let mut ckpt = Checkpoint::new(
        CheckpointKind::Survival,
        model.config.clone(),
        cfg.finetune.epochs as u64,
        &rng,
    );
    ckpt.capture_store(&model.store);
    ckpt.write(&out.join("model.ckpt"))?;
    write_text(
        &out.join("survival_log.ndjson"),
        &ndjson_series("nll", &log.nll)?,
    )?;
    write_json(&out.join("survival_report.json"), &log)?;

    let test_records: Vec<SurvivalRecord> =
        log.test_indices.iter().map(|&i| records[i].clone()).collect();
    let test_risks = predict_risks(&model, &head, &test_records)?;
    emit_risk_groups(out, &test_risks, &test_records)?;

    if cfg.finetune.repeats > 1 {
        let summary = run_survival_repeats(&base, &records, &cfg.finetune)?;
        write_json(&out.join("repeats.json"), &summary)?;
    }
    println!(
        "test concordance {:.4} on {} held-out records",
        log.test_concordance, log.test_size
    );
    Ok(())
}

pub fn classify_cmd(
    cfg: &FileConfig,
    data_path: &Path,
    checkpoint: Option<&Path>,
    norm: Option<&Path>,
    out: &Path,
) -> Result<()> {
    ensure_dir(out)?;
    let matrix = load_normalized(data_path, norm, cfg)?;
    note_fresh_normalization(&matrix, norm, checkpoint, out)?;
    let (labels, classes) = matrix.label_classes()?;
    if let Some(bad) = classes.iter().find(|c| c.contains(',')) {
        return Err(CoreError::Config(format!(
            "class name `{bad}` contains a comma and cannot be stored in checkpoint metadata"
        )));
    }
    let base = start_model(cfg, checkpoint, matrix.n_genes())?;
    let mut model = base.clone();
    let (_head, log) = fit_classifier(
        &mut model,
        &matrix.samples,
        &labels,
        classes.len(),
        cfg.classify.gamma,
        &cfg.finetune,
    )?;

    let rng = RngState::new(cfg.finetune.seed);
    let mut ckpt = Checkpoint::new(
        CheckpointKind::Classify,
        model.config.clone(),
        cfg.finetune.epochs as u64,
        &rng,
    );
    ckpt.extra = vec![
        ("classes".into(), classes.join(",")),
        ("gamma".into(), format!("{:?}", cfg.classify.gamma)),
        ("n_classes".into(), classes.len().to_string()),
    ];
    ckpt.capture_store(&model.store);
    ckpt.write(&out.join("model.ckpt"))?;
    write_text(
        &out.join("classify_log.ndjson"),
        &ndjson_series("loss", &log.loss)?,
    )?;
    write_json(&out.join("classify_report.json"), &log)?;

    if cfg.finetune.repeats > 1 {
        let summary = run_classify_repeats(
            &base,
            &matrix.samples,
            &labels,
            classes.len(),
            cfg.classify.gamma,
            &cfg.finetune,
        )?;
        write_json(&out.join("repeats.json"), &summary)?;
    }
    println!(
        "test accuracy {:.4} on {} held-out samples",
        log.report.accuracy_overall, log.test_size
    );
    Ok(())
}

pub fn eval_cmd(
    cfg: &FileConfig,
    data_path: &Path,
    checkpoint: &Path,
    norm: Option<&Path>,
    out: &Path,
) -> Result<()> {
    require_file(checkpoint)?;
    ensure_dir(out)?;
    let (_ckpt, model, head) = load_model(checkpoint)?;
    let matrix = load_normalized(data_path, norm, cfg)?;
    if matrix.n_genes() != model.config.input_dim {
        return Err(CoreError::Config(format!(
            "checkpoint expects {} genes, data has {}",
            model.config.input_dim,
            matrix.n_genes()
        )));
    }
    match head {
        LoadedHead::None => {
            let recon = reconstructions(&model, &matrix.samples)?;
            let total = matrix.samples.values.len();
            let mae = matrix
                .samples
                .values
                .iter()
                .zip(&recon.values)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / total as f64;
            write_json(
                &out.join("eval.json"),
                &serde_json::json!({
                    "kind": "pretrain",
                    "samples": matrix.n_samples(),
                    "mean_abs_error": mae,
                }),
            )?;
            println!(
                "reconstruction mean |err| {:.4} over {} samples",
                mae,
                matrix.n_samples()
            );
        }
        LoadedHead::Cox(cox) => {
            let records = matrix.survival_records()?;
            let risks = predict_risks(&model, &cox, &records)?;
            let c = concordance_index(&risks, &records)?;
            emit_risk_groups(out, &risks, &records)?;
            write_json(
                &out.join("eval.json"),
                &serde_json::json!({
                    "kind": "survival",
                    "samples": records.len(),
                    "concordance": c,
                }),
            )?;
            println!("concordance {:.4} over {} records", c, records.len());
        }
        LoadedHead::Classifier(h, classes) => {
            let preds = predict_labels(&model, &h, &matrix.samples)?;
            let report = match &matrix.labels {
                Some(raw) => {
                    let truth: Vec<usize> = raw
                        .iter()
                        .map(|l| {
                            classes.iter().position(|c| c == l).ok_or_else(|| {
                                CoreError::Config(format!(
                                    "label `{l}` was not seen at training time"
                                ))
                            })
                        })
                        .collect::<Result<_>>()?;
                    let confusion = confusion_matrix(&truth, &preds, classes.len())?;
                    Some(metrics_from_confusion(&confusion)?)
                }
                None => None,
            };
            let mut body = String::from(if matrix.labels.is_some() {
                "sample,predicted,label\n"
            } else {
                "sample,predicted\n"
            });
            for (i, &p) in preds.iter().enumerate() {
                body.push_str(&format!("{i},{}", classes[p]));
                if let Some(raw) = &matrix.labels {
                    body.push_str(&format!(",{}", raw[i]));
                }
                body.push('\n');
            }
            write_text(&out.join("predictions.csv"), &body)?;
            write_json(
                &out.join("eval.json"),
                &serde_json::json!({
                    "kind": "classify",
                    "samples": preds.len(),
                    "report": report,
                }),
            )?;
            match &report {
                Some(r) => println!(
                    "accuracy {:.4} over {} samples",
                    r.accuracy_overall,
                    preds.len()
                ),
                None => println!("predictions written for {} unlabeled samples", preds.len()),
            }
        }
    }
    Ok(())
}

pub fn analyze_cmd(
    cfg: &FileConfig,
    data_path: &Path,
    checkpoint: &Path,
    norm: Option<&Path>,
    out: &Path,
) -> Result<()> {
    require_file(checkpoint)?;
    ensure_dir(out)?;
    let (_ckpt, model, _head) = load_model(checkpoint)?;
    let matrix = load_normalized(data_path, norm, cfg)?;
    if matrix.n_genes() != model.config.input_dim {
        return Err(CoreError::Config(format!(
            "checkpoint expects {} genes, data has {}",
            model.config.input_dim,
            matrix.n_genes()
        )));
    }
    let v = cfg.analyze.leading_features.min(model.config.latent_dim);
    let report = correlation_report(&model, &matrix, v, cfg.analyze.strong_threshold)?;
    write_json(&out.join("analysis.json"), &report)?;
    write_text(
        &out.join("correlations.csv"),
        &correlation_csv(&report, &matrix.gene_ids)?,
    )?;
    write_text(
        &out.join("real.csv"),
        &matrix_csv(&matrix.gene_ids, &matrix.samples)?,
    )?;
    let recon = reconstructions(&model, &matrix.samples)?;
    write_text(&out.join("recon.csv"), &matrix_csv(&matrix.gene_ids, &recon)?)?;
    println!(
        "{} strong genes of {}; {} latent coordinates screened",
        report.strong_gene_ids.len(),
        matrix.n_genes(),
        report.leading_feature_indices.len()
    );
    Ok(())
}

pub fn ablate_cmd(cfg: &FileConfig, data_path: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let matrix = load_normalized(data_path, None, cfg)?;
    let mut base = cfg.model.clone();
    base.input_dim = matrix.n_genes();
    let table = analysis::ablate(
        &matrix,
        &base,
        &cfg.finetune,
        &cfg.training,
        cfg.classify.gamma,
        cfg.finetune.seed,
    )?;
    write_json(&out.join("ablation.json"), &table)?;
    for row in &table.rows {
        let acc = row
            .report
            .as_ref()
            .map(|r| format!("{:.4}", r.accuracy_overall))
            .unwrap_or_else(|| "-".into());
        let conc = row
            .concordance
            .map(|c| format!("{c:.4}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "{:<22} gated_layers={} accuracy={acc} concordance={conc}",
            row.variant, row.gated_layers
        );
    }
    Ok(())
}
