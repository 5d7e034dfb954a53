//! File emission and checkpoint reloading shared by the subcommands. All
//! bodies are pure functions of config, seed and data so repeated runs
//! produce byte-identical files.

use std::fs;
use std::path::Path;

use serde::Serialize;

use genemoe::checkpoint::{Checkpoint, CheckpointKind};
use genemoe::data::ExpressionMatrix;
use genemoe::error::{CoreError, Result};
use genemoe::heads::classify::ClassifierHead;
use genemoe::heads::survival::{
    km_curve, logrank_test, risk_split, CoxHead, KmPoint, SurvivalRecord,
};
use genemoe::model::GeneMoeModel;

pub fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CoreError::Config(format!(
            "required input `{}` does not exist",
            path.display()
        )))
    }
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

pub fn write_text(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    write_text(path, &body)
}

/// One JSON object per epoch, single numeric field.
pub fn ndjson_series(field: &str, values: &[f64]) -> Result<String> {
    let mut out = String::new();
    for (i, v) in values.iter().enumerate() {
        let number = serde_json::Number::from_f64(*v).ok_or_else(|| {
            CoreError::Contract(format!("non-finite {field} value in epoch {}", i + 1))
        })?;
        let mut obj = serde_json::Map::new();
        obj.insert("epoch".into(), (i + 1).into());
        obj.insert(field.into(), number.into());
        out.push_str(&serde_json::to_string(&serde_json::Value::Object(obj))?);
        out.push('\n');
    }
    Ok(out)
}

/// Per-gene stats as `gene=min,max` lines, in matrix column order.
pub fn write_normalization(path: &Path, m: &ExpressionMatrix) -> Result<()> {
    let stats = m.normalization.as_ref().ok_or_else(|| {
        CoreError::Contract("matrix carries no normalization stats to persist".into())
    })?;
    let mut body = String::new();
    for (gene, (lo, hi)) in m.gene_ids.iter().zip(stats) {
        body.push_str(&format!("{gene}={lo:?},{hi:?}\n"));
    }
    write_text(path, &body)
}

/// Reads stats written by `write_normalization` and checks they cover the
/// same genes in the same order as the matrix at hand.
pub fn read_normalization(path: &Path, expected_genes: &[String]) -> Result<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path)?;
    let mut stats = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| CoreError::Parse {
            line: i + 1,
            message,
        };
        let (gene, rest) = line
            .split_once('=')
            .ok_or_else(|| parse_err("expected `gene=min,max`".into()))?;
        let (lo, hi) = rest
            .split_once(',')
            .ok_or_else(|| parse_err("expected `min,max` after `=`".into()))?;
        let lo: f64 = lo
            .parse()
            .map_err(|_| parse_err(format!("bad min `{lo}`")))?;
        let hi: f64 = hi
            .parse()
            .map_err(|_| parse_err(format!("bad max `{hi}`")))?;
        match expected_genes.get(stats.len()) {
            Some(want) if want == gene => stats.push((lo, hi)),
            Some(want) => {
                return Err(CoreError::Config(format!(
                    "normalization file lists `{gene}` where the data has `{want}`; \
                     run on the same preprocessed gene set"
                )))
            }
            None => {
                return Err(CoreError::Config(format!(
                    "normalization file has more genes than the data ({} columns)",
                    expected_genes.len()
                )))
            }
        }
    }
    if stats.len() != expected_genes.len() {
        return Err(CoreError::Config(format!(
            "normalization file covers {} genes, the data has {}",
            stats.len(),
            expected_genes.len()
        )));
    }
    Ok(stats)
}

pub enum LoadedHead {
    None,
    Cox(CoxHead),
    /// Head plus the class names in training order.
    Classifier(ClassifierHead, Vec<String>),
}

/// Rebuild the model (and task head, if the checkpoint carries one) and
/// load the saved weights into it.
pub fn load_model(path: &Path) -> Result<(Checkpoint, GeneMoeModel, LoadedHead)> {
    let ckpt = Checkpoint::read(path)?;
    let mut rng = ckpt.restore_rng();
    let mut model = GeneMoeModel::new(ckpt.config.clone(), &mut rng)?;
    let head = match ckpt.kind {
        CheckpointKind::Pretrain => LoadedHead::None,
        CheckpointKind::Survival => LoadedHead::Cox(CoxHead::init(
            &mut model.store,
            model.config.latent_dim,
            &mut rng,
        )?),
        CheckpointKind::Classify => {
            let n_classes: usize = ckpt
                .extra_value("n_classes")
                .ok_or_else(|| {
                    CoreError::CheckpointContents("classify checkpoint lacks n_classes".into())
                })?
                .parse()
                .map_err(|_| CoreError::CheckpointContents("bad n_classes value".into()))?;
            let gamma: f64 = ckpt
                .extra_value("gamma")
                .unwrap_or("0")
                .parse()
                .map_err(|_| CoreError::CheckpointContents("bad gamma value".into()))?;
            let classes: Vec<String> = ckpt
                .extra_value("classes")
                .ok_or_else(|| {
                    CoreError::CheckpointContents("classify checkpoint lacks class names".into())
                })?
                .split(',')
                .map(str::to_string)
                .collect();
            if classes.len() != n_classes {
                return Err(CoreError::CheckpointContents(format!(
                    "{} class names for {n_classes} classes",
                    classes.len()
                )));
            }
            let head =
                ClassifierHead::init(&mut model.store, model.config.latent_dim, n_classes, gamma, &mut rng)?;
            LoadedHead::Classifier(head, classes)
        }
    };
    ckpt.apply_to_store(&mut model.store)?;
    Ok((ckpt, model, head))
}

pub fn km_csv(points: &[KmPoint]) -> String {
    let mut out = String::from("time,survival,at_risk\n");
    for p in points {
        out.push_str(&format!("{:?},{:?},{}\n", p.time, p.survival, p.at_risk));
    }
    out
}

/// Mean-risk stratification artifacts: one survival curve per group and the
/// log-rank comparison. Degenerate inputs (constant risks, no events) are
/// reported on stderr and skipped rather than failing the run, since the
/// fitted model has already been saved by this point.
pub fn emit_risk_groups(out: &Path, risks: &[f64], records: &[SurvivalRecord]) -> Result<()> {
    if risks.len() < 2 {
        eprintln!("warning: too few records for risk stratification");
        return Ok(());
    }
    let split = risk_split(risks)?;
    if split.degenerate {
        eprintln!("warning: constant risk scores, skipping risk stratification");
        return Ok(());
    }
    let high: Vec<SurvivalRecord> = split.high.iter().map(|&i| records[i].clone()).collect();
    let low: Vec<SurvivalRecord> = split.low.iter().map(|&i| records[i].clone()).collect();
    write_text(&out.join("km_high.csv"), &km_csv(&km_curve(&high)?))?;
    write_text(&out.join("km_low.csv"), &km_csv(&km_curve(&low)?))?;
    match logrank_test(&high, &low) {
        Ok(lr) => write_json(&out.join("logrank.json"), &lr)?,
        Err(CoreError::UndefinedStatistic(msg)) => {
            eprintln!("warning: log-rank undefined, skipped: {msg}");
        }
        Err(e) => return Err(e),
    }
    Ok(())
}
