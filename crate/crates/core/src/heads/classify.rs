//! Multi-class classification head: focal loss over latent means, confusion
//! matrices, and the per-class-averaged metrics used to report them.

use serde::{Deserialize, Serialize};

use crate::autodiff::graph::{Graph, ParamId, ParamStore};
use crate::autodiff::tape::Var;
use crate::autodiff::rng::RngState;
use crate::autodiff::tensor::Tensor;
use crate::error::{CoreError, Result};
use crate::heads::FinetuneConfig;
use crate::model::GeneMoeModel;
use crate::moe::{Activation, DenseLayer};
use crate::optim::Adam;
use crate::pretrain::ensure_finite;

/// Mean over the batch of -alpha_y * (1 - p_y)^gamma * log p_y, with p the
/// softmax of the logits. gamma = 0 reduces to plain cross-entropy; larger
/// gamma down-weights examples the model already gets right. Class weights
/// default to 1.
pub fn focal_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    gamma: f64,
    class_weights: Option<&[f64]>,
) -> Result<Var> {
    let (batch, classes) = g.shape(logits);
    if labels.len() != batch {
        return Err(CoreError::Shape(format!(
            "{} labels for {batch} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(CoreError::Contract(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(CoreError::Config(format!(
            "focal exponent must be nonnegative and finite, got {gamma}"
        )));
    }
    if let Some(w) = class_weights {
        if w.len() != classes {
            return Err(CoreError::Shape(format!(
                "{} class weights for {classes} classes",
                w.len()
            )));
        }
        if let Some(bad) = w.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(CoreError::Domain(format!("bad class weight {bad}")));
        }
    }

    let log_p = g.log_softmax_rows(logits)?;
    let picks: Vec<usize> = labels
        .iter()
        .enumerate()
        .map(|(row, &label)| row * classes + label)
        .collect();
    let log_py = g.gather_flat(log_p, picks, batch, 1)?;
    let mut term = log_py;
    if gamma != 0.0 {
        let py = g.exp(log_py)?;
        let neg = g.neg(py)?;
        let one_minus = g.add_scalar(neg, 1.0)?;
        let factor = g.pow_const(one_minus, gamma)?;
        term = g.mul(factor, log_py)?;
    }
    if let Some(w) = class_weights {
        let alpha: Vec<f64> = labels.iter().map(|&l| w[l]).collect();
        let av = g.constant(&Tensor::new(vec![batch, 1], alpha)?)?;
        term = g.mul(av, term)?;
    }
    let mean = g.mean_all(term)?;
    g.neg(mean)
}

/// Linear logits over the latent mean.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub layer: DenseLayer,
    pub n_classes: usize,
    pub gamma: f64,
}

impl ClassifierHead {
    pub fn init(
        store: &mut ParamStore,
        latent_dim: usize,
        n_classes: usize,
        gamma: f64,
        rng: &mut RngState,
    ) -> Result<Self> {
        if n_classes < 2 {
            return Err(CoreError::Config(format!(
                "classification needs at least 2 classes, got {n_classes}"
            )));
        }
        let layer = DenseLayer::init(
            store,
            "classifier_head",
            latent_dim,
            n_classes,
            Activation::Identity,
            rng,
        )?;
        Ok(ClassifierHead {
            layer,
            n_classes,
            gamma,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mu: Var) -> Result<Var> {
        self.layer.forward(g, store, mu)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layer.params()
    }
}

/// Row = true class, column = predicted class.
pub fn confusion_matrix(
    true_labels: &[usize],
    predicted: &[usize],
    n_classes: usize,
) -> Result<Vec<Vec<u64>>> {
    if true_labels.len() != predicted.len() {
        return Err(CoreError::Shape(format!(
            "{} true labels vs {} predictions",
            true_labels.len(),
            predicted.len()
        )));
    }
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (&t, &p) in true_labels.iter().zip(predicted) {
        if t >= n_classes || p >= n_classes {
            return Err(CoreError::Contract(format!(
                "label pair ({t}, {p}) out of range for {n_classes} classes"
            )));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Trace over total: the usual single-number accuracy.
    pub accuracy_overall: f64,
    /// Mean over classes of (TP_i + TN_i) / N. Collapses to the overall
    /// accuracy at 2 classes and sits above it beyond that.
    pub accuracy_macro: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    pub confusion: Vec<Vec<u64>>,
    /// Classes whose precision or recall denominator was empty; they
    /// contribute zero to the macro averages.
    pub zero_denominator_classes: Vec<usize>,
}

pub fn metrics_from_confusion(confusion: &[Vec<u64>]) -> Result<MetricsReport> {
    let c = confusion.len();
    if c == 0 || confusion.iter().any(|row| row.len() != c) {
        return Err(CoreError::Shape(
            "confusion matrix must be square and non-empty".into(),
        ));
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(CoreError::UndefinedStatistic(
            "confusion matrix holds no samples".into(),
        ));
    }
    let n = total as f64;
    let mut trace = 0u64;
    let mut acc_macro = 0.0;
    let mut precision = 0.0;
    let mut recall = 0.0;
    let mut flagged = Vec::new();
    for i in 0..c {
        let tp = confusion[i][i];
        let row: u64 = confusion[i].iter().sum();
        let col: u64 = confusion.iter().map(|r| r[i]).sum();
        trace += tp;
        let tn = total + tp - row - col;
        acc_macro += (tp + tn) as f64 / n;
        let mut degenerate = false;
        if col > 0 {
            precision += tp as f64 / col as f64;
        } else {
            degenerate = true;
        }
        if row > 0 {
            recall += tp as f64 / row as f64;
        } else {
            degenerate = true;
        }
        if degenerate {
            flagged.push(i);
        }
    }
    let precision_macro = precision / c as f64;
    let recall_macro = recall / c as f64;
    let f1_macro = if precision_macro + recall_macro > 0.0 {
        2.0 * precision_macro * recall_macro / (precision_macro + recall_macro)
    } else {
        0.0
    };
    Ok(MetricsReport {
        accuracy_overall: trace as f64 / n,
        accuracy_macro: acc_macro / c as f64,
        precision_macro,
        recall_macro,
        f1_macro,
        confusion: confusion.to_vec(),
        zero_denominator_classes: flagged,
    })
}

/// Per-class 4:1 split: shuffle each class's rows under the seed and hold
/// out ceil(count/5) of them. Every class must keep at least one training
/// row.
pub fn stratified_indices(
    labels: &[usize],
    n_classes: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(CoreError::Contract(format!(
            "label {bad} out of range for {n_classes} classes"
        )));
    }
    let mut rng = RngState::new(seed ^ 0x57_A7);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..n_classes {
        let mut rows: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|&(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            return Err(CoreError::Stratification(format!(
                "class {class} has no samples"
            )));
        }
        let held = rows.len().div_ceil(5);
        if held == rows.len() {
            return Err(CoreError::Stratification(format!(
                "class {class} has only {} sample(s); none would remain for training",
                rows.len()
            )));
        }
        rng.shuffle(&mut rows);
        test.extend_from_slice(&rows[..held]);
        train.extend_from_slice(&rows[held..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Deterministic argmax predictions (evaluation mode).
pub fn predict_labels(
    model: &GeneMoeModel,
    head: &ClassifierHead,
    x: &Tensor,
) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let xv = g.constant(x)?;
    let enc = model.encode(&mut g, &model.store, xv, None)?;
    let logits = head.forward(&mut g, &model.store, enc.mu)?;
    let (rows, cols) = g.shape(logits);
    let values = g.value(logits);
    Ok((0..rows)
        .map(|r| {
            let row = &values[r * cols..(r + 1) * cols];
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierLog {
    /// Mean focal loss per epoch over the training mini-batches.
    pub loss: Vec<f64>,
    pub report: MetricsReport,
    pub train_size: usize,
    pub test_size: usize,
}

fn gather_rows(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let d = x.shape[1];
    let mut values = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        values.extend_from_slice(&x.values[r * d..(r + 1) * d]);
    }
    Tensor::new(vec![rows.len(), d], values)
}

/// Attach a fresh classifier head to the latent mean and fit by mini-batch
/// Adam on the focal loss, reporting metrics on the stratified held-out
/// split.
pub fn fit_classifier(
    model: &mut GeneMoeModel,
    x: &Tensor,
    labels: &[usize],
    n_classes: usize,
    gamma: f64,
    cfg: &FinetuneConfig,
) -> Result<(ClassifierHead, ClassifierLog)> {
    cfg.validate()?;
    let (rows, d) = x.dims2()?;
    if d != model.config.input_dim {
        return Err(CoreError::Shape(format!(
            "data has {d} columns, the model expects {}",
            model.config.input_dim
        )));
    }
    if labels.len() != rows {
        return Err(CoreError::Shape(format!(
            "{} labels for {rows} rows",
            labels.len()
        )));
    }
    let (train_idx, test_idx) = stratified_indices(labels, n_classes, cfg.seed)?;

    let mut rng = RngState::new(cfg.seed);
    let head = ClassifierHead::init(&mut model.store, model.config.latent_dim, n_classes, gamma, &mut rng)?;
    let mut ids = head.params();
    if !cfg.freeze_backbone {
        ids.extend(model.backbone_param_ids());
    }

    let mut adam = Adam::new(0.9, 0.999);
    let mut loss_log = Vec::with_capacity(cfg.epochs);
    let mut order = train_idx.clone();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = gather_rows(x, chunk)?;
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            model.store.zero_grads();
            let mut g = Graph::new();
            let xv = g.constant(&xb)?;
            let train_rng = if cfg.freeze_backbone {
                None
            } else {
                Some(&mut rng)
            };
            let enc = model.encode(&mut g, &model.store, xv, train_rng)?;
            let logits = head.forward(&mut g, &model.store, enc.mu)?;
            let loss = focal_loss(&mut g, logits, &yb, head.gamma, None)?;
            let value = g.scalar_value(loss)?;
            ensure_finite("focal", value, epoch)?;
            g.backward(loss)?;
            g.write_grads(&mut model.store)?;
            adam.step(&mut model.store, &ids, cfg.learning_rate)?;
            epoch_loss += value;
            batches += 1;
        }
        loss_log.push(epoch_loss / batches as f64);
    }

    let x_test = gather_rows(x, &test_idx)?;
    let y_test: Vec<usize> = test_idx.iter().map(|&i| labels[i]).collect();
    let predicted = predict_labels(model, &head, &x_test)?;
    let confusion = confusion_matrix(&y_test, &predicted, n_classes)?;
    let report = metrics_from_confusion(&confusion)?;
    let log = ClassifierLog {
        loss: loss_log,
        report,
        train_size: train_idx.len(),
        test_size: test_idx.len(),
    };
    Ok((head, log))
}

/// Refit from the same starting weights under shifted seeds; reports the
/// held-out overall accuracy of each run and the mean.
pub fn run_classify_repeats(
    base: &GeneMoeModel,
    x: &Tensor,
    labels: &[usize],
    n_classes: usize,
    gamma: f64,
    cfg: &FinetuneConfig,
) -> Result<super::survival::RepeatSummary> {
    cfg.validate()?;
    let mut seeds = Vec::with_capacity(cfg.repeats);
    let mut values = Vec::with_capacity(cfg.repeats);
    for r in 0..cfg.repeats {
        let mut model = base.clone();
        let mut run_cfg = cfg.clone();
        run_cfg.seed = cfg.seed.wrapping_add(r as u64);
        let (_, log) = fit_classifier(&mut model, x, labels, n_classes, gamma, &run_cfg)?;
        seeds.push(run_cfg.seed);
        values.push(log.report.accuracy_overall);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(super::survival::RepeatSummary {
        seeds,
        values,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use crate::model::{EncoderKind, GeneMoeConfig};

    fn loss_value(
        logits: Tensor,
        labels: &[usize],
        gamma: f64,
        weights: Option<&[f64]>,
    ) -> f64 {
        let mut g = Graph::new();
        let lv = g.constant(&logits).unwrap();
        let loss = focal_loss(&mut g, lv, labels, gamma, weights).unwrap();
        g.scalar_value(loss).unwrap()
    }

    #[test]
    fn gamma_zero_is_cross_entropy() {
        let logits = Tensor::new(
            vec![3, 4],
            vec![
                0.2, -1.0, 0.7, 0.0, 2.0, 0.1, -0.5, 1.0, -2.0, 0.0, 0.3, 0.9,
            ],
        )
        .unwrap();
        let labels = [2usize, 0, 3];
        let focal = loss_value(logits.clone(), &labels, 0.0, None);

        let mut ce = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &logits.values[r * 4..(r + 1) * 4];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            ce += lse - row[y];
        }
        ce /= labels.len() as f64;
        assert!((focal - ce).abs() < 1e-12, "{focal} vs {ce}");
    }

    #[test]
    fn reference_values_at_half_confidence() {
        // Two equal logits put p_y at exactly 0.5.
        let logits = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((loss_value(logits.clone(), &[0], 0.0, None) - ln2).abs() < 1e-15);
        let focal = loss_value(logits, &[0], 2.0, None);
        assert!((focal - 0.25 * ln2).abs() < 1e-15);
        assert!((focal - 0.1733).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_examples_vanish() {
        let logits = Tensor::new(vec![1, 2], vec![12.0, 0.0]).unwrap();
        for gamma in [0.0, 1.0, 2.0, 5.0] {
            assert!(loss_value(logits.clone(), &[0], gamma, None) < 1e-4);
        }
    }

    #[test]
    fn class_weights_scale_linearly() {
        let logits = Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.8, 1.0, 0.0, -1.0]).unwrap();
        let labels = [1usize, 0];
        let base = loss_value(logits.clone(), &labels, 2.0, None);
        let doubled = loss_value(logits, &labels, 2.0, Some(&[2.0, 2.0, 2.0]));
        assert!((doubled - 2.0 * base).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_labels_and_weights() {
        let logits = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let lv = g.constant(&logits).unwrap();
        assert!(matches!(
            focal_loss(&mut g, lv, &[2], 2.0, None),
            Err(CoreError::Contract(_))
        ));
        assert!(matches!(
            focal_loss(&mut g, lv, &[0], 2.0, Some(&[1.0])),
            Err(CoreError::Shape(_))
        ));
        assert!(matches!(
            focal_loss(&mut g, lv, &[0], -1.0, None),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn focal_gradient_check() {
        let mut store = ParamStore::new();
        let id = store
            .register(
                "logits",
                Tensor::new(vec![4, 3], vec![0.3, -0.2, 0.8, 1.0, 0.0, -1.0, 0.4, 0.4, 0.1, -0.6, 0.2, 0.0])
                    .unwrap(),
            )
            .unwrap();
        let labels = [1usize, 0, 2, 1];
        let weights = [1.0, 0.5, 2.0];
        let err = check_gradients(&mut store, &[id], 1e-5, |g, s| {
            let lv = g.param(s, id)?;
            focal_loss(g, lv, &labels, 2.0, Some(&weights))
        })
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn metrics_hand_case() {
        let confusion = vec![vec![8, 2], vec![3, 7]];
        let r = metrics_from_confusion(&confusion).unwrap();
        assert!((r.precision_macro - 0.5 * (8.0 / 11.0 + 7.0 / 9.0)).abs() < 1e-12);
        assert!((r.recall_macro - 0.75).abs() < 1e-12);
        assert!((r.accuracy_overall - 0.75).abs() < 1e-12);
        assert!((r.accuracy_macro - 0.75).abs() < 1e-12);
        let f1 = 2.0 * r.precision_macro * r.recall_macro / (r.precision_macro + r.recall_macro);
        assert!((r.f1_macro - f1).abs() < 1e-12);
        assert!(r.zero_denominator_classes.is_empty());
    }

    #[test]
    fn perfect_predictions_score_one() {
        let confusion = vec![vec![4, 0, 0], vec![0, 9, 0], vec![0, 0, 2]];
        let r = metrics_from_confusion(&confusion).unwrap();
        for v in [
            r.accuracy_overall,
            r.accuracy_macro,
            r.precision_macro,
            r.recall_macro,
            r.f1_macro,
        ] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn empty_classes_are_flagged_not_fatal() {
        // Class 2 never appears as truth or prediction.
        let confusion = vec![vec![3, 1, 0], vec![2, 2, 0], vec![0, 0, 0]];
        let r = metrics_from_confusion(&confusion).unwrap();
        assert_eq!(r.zero_denominator_classes, vec![2]);
        assert!((r.precision_macro - (3.0 / 5.0 + 2.0 / 3.0) / 3.0).abs() < 1e-12);

        assert!(matches!(
            metrics_from_confusion(&[vec![0, 0], vec![0, 0]]),
            Err(CoreError::UndefinedStatistic(_))
        ));
    }

    #[test]
    fn macro_accuracy_dominates_overall_beyond_two_classes() {
        // Closed form: macro = (2*acc + C - 2) / C, so the gap grows with C.
        let mut rng = RngState::new(40);
        for _ in 0..20 {
            let c = 3 + (rng.uniform01() * 3.0) as usize;
            let confusion: Vec<Vec<u64>> = (0..c)
                .map(|_| (0..c).map(|_| (rng.uniform01() * 9.0) as u64).collect())
                .collect();
            if confusion.iter().flatten().sum::<u64>() == 0 {
                continue;
            }
            let r = metrics_from_confusion(&confusion).unwrap();
            assert!(r.accuracy_macro >= r.accuracy_overall - 1e-12);
            let closed = (2.0 * r.accuracy_overall + c as f64 - 2.0) / c as f64;
            assert!((r.accuracy_macro - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn confusion_rows_are_truth() {
        let m = confusion_matrix(&[0, 0, 1, 2], &[0, 1, 1, 0], 3).unwrap();
        assert_eq!(m, vec![vec![1, 1, 0], vec![0, 1, 0], vec![1, 0, 0]]);
        assert!(confusion_matrix(&[0, 3], &[0, 0], 3).is_err());
    }

    #[test]
    fn stratified_split_holds_out_a_fifth_per_class() {
        let labels = [vec![0usize; 10], vec![1usize; 5], vec![2usize; 4]].concat();
        let (train, test) = stratified_indices(&labels, 3, 11).unwrap();
        assert_eq!(train.len() + test.len(), labels.len());
        let held = |class: usize| test.iter().filter(|&&i| labels[i] == class).count();
        assert_eq!(held(0), 2);
        assert_eq!(held(1), 1);
        assert_eq!(held(2), 1);
        let (train2, test2) = stratified_indices(&labels, 3, 11).unwrap();
        assert_eq!((train, test), (train2, test2));
    }

    #[test]
    fn singleton_class_cannot_be_stratified() {
        let labels = [0usize, 0, 0, 1];
        let err = stratified_indices(&labels, 2, 1).unwrap_err();
        match err {
            CoreError::Stratification(msg) => assert!(msg.contains("class 1"), "{msg}"),
            other => panic!("expected stratification error, got {other}"),
        }
    }

    fn tiny_config(input_dim: usize) -> GeneMoeConfig {
        GeneMoeConfig {
            input_dim,
            hidden: vec![12, 8],
            latent_dim: 6,
            encoder: EncoderKind::MoeMoae,
            n_experts: 3,
            top_k: 2,
            moae_experts: 2,
            moae_top_k: 1,
            token_count: 4,
            dropout: 0.0,
            ..GeneMoeConfig::default()
        }
    }

    /// Four well-separated blobs in [0, 1]^d.
    fn blobs(n_per: usize, d: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = RngState::new(seed);
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for class in 0..4usize {
            for _ in 0..n_per {
                for j in 0..d {
                    let center = if j % 4 == class { 0.9 } else { 0.1 };
                    values.push((center + rng.uniform_range(-0.05, 0.05)).clamp(0.0, 1.0));
                }
                labels.push(class);
            }
        }
        (Tensor::new(vec![4 * n_per, d], values).unwrap(), labels)
    }

    #[test]
    fn fit_classifier_separates_blobs_deterministically() {
        let (x, labels) = blobs(15, 8, 17);
        let cfg = FinetuneConfig {
            epochs: 40,
            batch_size: 16,
            learning_rate: 0.02,
            seed: 3,
            ..FinetuneConfig::default()
        };
        let mut rng = RngState::new(8);
        let base = GeneMoeModel::new(tiny_config(8), &mut rng).unwrap();

        let mut m1 = base.clone();
        let (_, log1) = fit_classifier(&mut m1, &x, &labels, 4, 2.0, &cfg).unwrap();
        assert!(
            log1.report.accuracy_overall >= 0.9,
            "accuracy {}",
            log1.report.accuracy_overall
        );
        let trace: u64 = (0..4).map(|i| log1.report.confusion[i][i]).sum();
        let total: u64 = log1.report.confusion.iter().flatten().sum();
        assert_eq!(
            log1.report.accuracy_overall,
            trace as f64 / total as f64
        );
        assert_eq!(log1.test_size, 12);

        let mut m2 = base.clone();
        let (_, log2) = fit_classifier(&mut m2, &x, &labels, 4, 2.0, &cfg).unwrap();
        assert_eq!(log1, log2);
    }

    #[test]
    fn frozen_backbone_is_untouched_by_classification() {
        let (x, labels) = blobs(6, 8, 23);
        let cfg = FinetuneConfig {
            epochs: 5,
            batch_size: 8,
            freeze_backbone: true,
            ..FinetuneConfig::default()
        };
        let mut rng = RngState::new(9);
        let mut model = GeneMoeModel::new(tiny_config(8), &mut rng).unwrap();
        let before: Vec<Vec<f64>> = model.store.iter().map(|(_, t)| t.values.clone()).collect();
        let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
        fit_classifier(&mut model, &x, &labels, 4, 2.0, &cfg).unwrap();
        for (name, old) in names.iter().zip(&before) {
            let id = model.store.id(name).unwrap();
            assert_eq!(&model.store.tensor(id).values, old, "{name} moved");
        }
    }

    #[test]
    fn repeats_report_each_accuracy() {
        let (x, labels) = blobs(6, 8, 29);
        let cfg = FinetuneConfig {
            epochs: 4,
            batch_size: 8,
            repeats: 3,
            seed: 100,
            ..FinetuneConfig::default()
        };
        let mut rng = RngState::new(10);
        let base = GeneMoeModel::new(tiny_config(8), &mut rng).unwrap();
        let summary = run_classify_repeats(&base, &x, &labels, 4, 2.0, &cfg).unwrap();
        assert_eq!(summary.values.len(), 3);
        assert_eq!(summary.seeds, vec![100, 101, 102]);
        assert!((summary.mean - summary.values.iter().sum::<f64>() / 3.0).abs() < 1e-15);
    }
}
