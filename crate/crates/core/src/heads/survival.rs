//! Cox proportional-hazards fine-tuning and the statistics used to judge it:
//! concordance index, Kaplan-Meier curves, two-group log-rank tests and
//! mean-threshold risk grouping.

use serde::{Deserialize, Serialize};

use crate::autodiff::coxpartial;
use crate::autodiff::graph::{Graph, ParamId, ParamStore};
use crate::autodiff::tape::Var;
use crate::autodiff::rng::RngState;
use crate::autodiff::tensor::Tensor;
use crate::error::{CoreError, Result};
use crate::heads::FinetuneConfig;
use crate::model::GeneMoeModel;
use crate::moe::xavier;
use crate::optim::Adam;
use crate::pretrain::ensure_finite;
use crate::special::chi_square_survival;

/// One subject: normalized features, a follow-up time, and whether the event
/// was observed (`event = false` means censored at `time`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub features: Vec<f64>,
    pub time: f64,
    pub event: bool,
}

impl SurvivalRecord {
    pub fn new(features: Vec<f64>, time: f64, event: bool) -> Result<Self> {
        if !time.is_finite() || time <= 0.0 {
            return Err(CoreError::Domain(format!(
                "survival time must be positive and finite, got {time}"
            )));
        }
        Ok(SurvivalRecord {
            features,
            time,
            event,
        })
    }
}

fn times_events(records: &[SurvivalRecord]) -> (Vec<f64>, Vec<bool>) {
    (
        records.iter().map(|r| r.time).collect(),
        records.iter().map(|r| r.event).collect(),
    )
}

fn check_lengths(risks: &[f64], records: &[SurvivalRecord]) -> Result<()> {
    if risks.len() != records.len() {
        return Err(CoreError::Shape(format!(
            "{} risk scores for {} records",
            risks.len(),
            records.len()
        )));
    }
    if records.len() < 2 {
        return Err(CoreError::Contract(
            "survival statistics need at least two records".into(),
        ));
    }
    Ok(())
}

/// Mean negative log partial likelihood of the risk scores, ties sharing the
/// full risk set. Unchanged by adding a constant to every score.
pub fn cox_nll(risks: &[f64], records: &[SurvivalRecord]) -> Result<f64> {
    check_lengths(risks, records)?;
    let (times, events) = times_events(records);
    coxpartial::nll(risks, &times, &events)
}

/// Harrell's concordance: a pair is admissible when the earlier time carries
/// an observed event (or times tie with exactly one event); the pair counts
/// 1 when the earlier-event subject has the higher risk, 0.5 on a risk tie.
pub fn concordance_index(risks: &[f64], records: &[SurvivalRecord]) -> Result<f64> {
    check_lengths(risks, records)?;
    let n = records.len();
    let mut mass = 0.0;
    let mut pairs = 0u64;
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (&records[i], &records[j]);
            let (early, late) = if a.time < b.time && a.event {
                (i, j)
            } else if b.time < a.time && b.event {
                (j, i)
            } else if a.time == b.time && a.event != b.event {
                if a.event {
                    (i, j)
                } else {
                    (j, i)
                }
            } else {
                continue;
            };
            pairs += 1;
            if risks[early] > risks[late] {
                mass += 1.0;
            } else if risks[early] == risks[late] {
                mass += 0.5;
            }
        }
    }
    if pairs == 0 {
        return Err(CoreError::UndefinedStatistic(
            "no admissible pairs for concordance (all censored or all times tied)".into(),
        ));
    }
    Ok(mass / pairs as f64)
}

/// One step of the product-limit curve. `at_risk` and `events` describe the
/// event time the step happens at; the origin row carries the sample count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmPoint {
    pub time: f64,
    pub survival: f64,
    pub at_risk: usize,
    pub events: usize,
}

/// Kaplan-Meier product-limit estimator. Starts at (0, 1); censored subjects
/// stay in the risk set through their own time and leave afterwards. Only
/// event times add steps.
pub fn km_curve(records: &[SurvivalRecord]) -> Result<Vec<KmPoint>> {
    if records.is_empty() {
        return Err(CoreError::Contract(
            "Kaplan-Meier needs at least one record".into(),
        ));
    }
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| records[a].time.total_cmp(&records[b].time));

    let mut points = vec![KmPoint {
        time: 0.0,
        survival: 1.0,
        at_risk: n,
        events: 0,
    }];
    let mut survival = 1.0;
    let mut p = 0;
    while p < n {
        let t = records[order[p]].time;
        let at_risk = n - p;
        let mut d = 0;
        while p < n && records[order[p]].time == t {
            if records[order[p]].event {
                d += 1;
            }
            p += 1;
        }
        if d > 0 {
            survival *= 1.0 - d as f64 / at_risk as f64;
            points.push(KmPoint {
                time: t,
                survival,
                at_risk,
                events: d,
            });
        }
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRankResult {
    pub chi_square: f64,
    pub p_value: f64,
}

/// Two-group log-rank test. At each distinct event time the observed events
/// in group A are compared against the hypergeometric expectation given the
/// pooled risk set; chi-square is the squared standardized total.
pub fn logrank_test(
    group_a: &[SurvivalRecord],
    group_b: &[SurvivalRecord],
) -> Result<LogRankResult> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(CoreError::Contract(
            "log-rank needs two non-empty groups".into(),
        ));
    }
    let pooled: Vec<(f64, bool, bool)> = group_a
        .iter()
        .map(|r| (r.time, r.event, true))
        .chain(group_b.iter().map(|r| (r.time, r.event, false)))
        .collect();
    let mut event_times: Vec<f64> = pooled
        .iter()
        .filter(|&&(_, e, _)| e)
        .map(|&(t, _, _)| t)
        .collect();
    if event_times.is_empty() {
        return Err(CoreError::Contract(
            "log-rank needs at least one observed event".into(),
        ));
    }
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();

    let mut observed_a = 0.0;
    let mut expected_a = 0.0;
    let mut variance = 0.0;
    for &t in &event_times {
        let n1 = pooled.iter().filter(|&&(ti, _, a)| a && ti >= t).count() as f64;
        let n2 = pooled.iter().filter(|&&(ti, _, a)| !a && ti >= t).count() as f64;
        let n = n1 + n2;
        let d = pooled
            .iter()
            .filter(|&&(ti, e, _)| e && ti == t)
            .count() as f64;
        let d1 = pooled
            .iter()
            .filter(|&&(ti, e, a)| a && e && ti == t)
            .count() as f64;
        observed_a += d1;
        expected_a += d * n1 / n;
        if n > 1.0 {
            variance += d * (n1 / n) * (n2 / n) * (n - d) / (n - 1.0);
        }
    }
    if variance == 0.0 {
        return Err(CoreError::UndefinedStatistic(
            "log-rank variance is zero; the group/event layout admits no test".into(),
        ));
    }
    let chi_square = (observed_a - expected_a).powi(2) / variance;
    let p_value = chi_square_survival(chi_square, 1.0)?;
    Ok(LogRankResult {
        chi_square,
        p_value,
    })
}

/// Indices above / at-or-below the mean risk. `degenerate` marks splits where
/// one side came out empty (all risks equal).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSplit {
    pub high: Vec<usize>,
    pub low: Vec<usize>,
    pub threshold: f64,
    pub degenerate: bool,
}

pub fn risk_split(risks: &[f64]) -> Result<RiskSplit> {
    if risks.len() < 2 {
        return Err(CoreError::Contract(
            "risk grouping needs at least two scores".into(),
        ));
    }
    if let Some(bad) = risks.iter().find(|v| !v.is_finite()) {
        return Err(CoreError::Domain(format!("non-finite risk score {bad}")));
    }
    let threshold = risks.iter().sum::<f64>() / risks.len() as f64;
    let mut high = Vec::new();
    let mut low = Vec::new();
    for (i, &r) in risks.iter().enumerate() {
        if r > threshold {
            high.push(i);
        } else {
            low.push(i);
        }
    }
    let degenerate = high.is_empty() || low.is_empty();
    Ok(RiskSplit {
        high,
        low,
        threshold,
        degenerate,
    })
}

/// Linear hazard head over the latent mean. No bias: the partial likelihood
/// is translation-invariant, so one would never move.
#[derive(Debug, Clone)]
pub struct CoxHead {
    pub weight: ParamId,
    pub latent_dim: usize,
}

impl CoxHead {
    pub fn init(store: &mut ParamStore, latent_dim: usize, rng: &mut RngState) -> Result<Self> {
        let weight = xavier(store, "cox_head.weight".into(), latent_dim, 1, rng)?;
        Ok(CoxHead { weight, latent_dim })
    }

    /// Column of risk scores, one per row of `mu`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mu: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        g.matmul(mu, w)
    }
}

pub(crate) fn features_tensor(records: &[SurvivalRecord], d: usize) -> Result<Tensor> {
    let mut values = Vec::with_capacity(records.len() * d);
    for (i, r) in records.iter().enumerate() {
        if r.features.len() != d {
            return Err(CoreError::Shape(format!(
                "record {i} has {} features, the model expects {d}",
                r.features.len()
            )));
        }
        values.extend_from_slice(&r.features);
    }
    Tensor::new(vec![records.len(), d], values)
}

/// Deterministic risk scores (evaluation mode, no gate noise or dropout).
pub fn predict_risks(
    model: &GeneMoeModel,
    head: &CoxHead,
    records: &[SurvivalRecord],
) -> Result<Vec<f64>> {
    let x = features_tensor(records, model.config.input_dim)?;
    let mut g = Graph::new();
    let xv = g.constant(&x)?;
    let enc = model.encode(&mut g, &model.store, xv, None)?;
    let risks = head.forward(&mut g, &model.store, enc.mu)?;
    Ok(g.value(risks).to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalLog {
    /// Training partial-likelihood loss per epoch.
    pub nll: Vec<f64>,
    pub train_concordance: f64,
    pub test_concordance: f64,
    pub train_size: usize,
    pub test_size: usize,
    /// Positions of the held-out records in the caller's slice, so risk
    /// groups and survival curves can be drawn on unseen data afterwards.
    pub test_indices: Vec<usize>,
}

/// Shuffle under the seed and carve off ceil(n/5) held-out records.
fn split_records(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = RngState::new(seed ^ 0x51_17);
    rng.shuffle(&mut idx);
    let test_n = n.div_ceil(5);
    let test = idx[..test_n].to_vec();
    let train = idx[test_n..].to_vec();
    (train, test)
}

/// Attach a fresh Cox head to the model's latent mean and fit it (and,
/// unless frozen, the backbone) by full-batch Adam on the partial
/// likelihood. Returns the head and a log with train/test concordances on
/// the internal 4:1 split.
pub fn fit_survival(
    model: &mut GeneMoeModel,
    records: &[SurvivalRecord],
    cfg: &FinetuneConfig,
) -> Result<(CoxHead, SurvivalLog)> {
    cfg.validate()?;
    if records.len() < 5 {
        return Err(CoreError::Contract(format!(
            "survival fitting needs at least 5 records for a 4:1 split, got {}",
            records.len()
        )));
    }
    let (train_idx, test_idx) = split_records(records.len(), cfg.seed);
    let train: Vec<SurvivalRecord> = train_idx.iter().map(|&i| records[i].clone()).collect();
    let test: Vec<SurvivalRecord> = test_idx.iter().map(|&i| records[i].clone()).collect();
    if !train.iter().any(|r| r.event) {
        return Err(CoreError::Contract(
            "training split carries no observed events".into(),
        ));
    }

    let mut rng = RngState::new(cfg.seed);
    let head = CoxHead::init(&mut model.store, model.config.latent_dim, &mut rng)?;
    let mut ids: Vec<ParamId> = vec![head.weight];
    if !cfg.freeze_backbone {
        ids.extend(model.backbone_param_ids());
    }

    let x_train = features_tensor(&train, model.config.input_dim)?;
    let (times, events) = times_events(&train);
    let mut adam = Adam::new(0.9, 0.999);
    let mut nll_log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        model.store.zero_grads();
        let mut g = Graph::new();
        let xv = g.constant(&x_train)?;
        // A frozen backbone is run in evaluation mode: dropout noise would
        // only jitter the head's fixed inputs.
        let train_rng = if cfg.freeze_backbone {
            None
        } else {
            Some(&mut rng)
        };
        let enc = model.encode(&mut g, &model.store, xv, train_rng)?;
        let risks = head.forward(&mut g, &model.store, enc.mu)?;
        let loss = g.cox_nll(risks, &times, &events)?;
        let value = g.scalar_value(loss)?;
        ensure_finite("cox_nll", value, epoch)?;
        g.backward(loss)?;
        g.write_grads(&mut model.store)?;
        adam.step(&mut model.store, &ids, cfg.learning_rate)?;
        nll_log.push(value);
    }

    let train_risks = predict_risks(model, &head, &train)?;
    let test_risks = predict_risks(model, &head, &test)?;
    let log = SurvivalLog {
        nll: nll_log,
        train_concordance: concordance_index(&train_risks, &train)?,
        test_concordance: concordance_index(&test_risks, &test)?,
        train_size: train.len(),
        test_size: test.len(),
        test_indices: test_idx,
    };
    Ok((head, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub mean: f64,
}

/// Refit from the same starting weights under `cfg.repeats` shifted seeds
/// and average the held-out concordances.
pub fn run_survival_repeats(
    base: &GeneMoeModel,
    records: &[SurvivalRecord],
    cfg: &FinetuneConfig,
) -> Result<RepeatSummary> {
    cfg.validate()?;
    let mut seeds = Vec::with_capacity(cfg.repeats);
    let mut values = Vec::with_capacity(cfg.repeats);
    for r in 0..cfg.repeats {
        let mut model = base.clone();
        let mut run_cfg = cfg.clone();
        run_cfg.seed = cfg.seed.wrapping_add(r as u64);
        let (_, log) = fit_survival(&mut model, records, &run_cfg)?;
        seeds.push(run_cfg.seed);
        values.push(log.test_concordance);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(RepeatSummary {
        seeds,
        values,
        mean,
    })
}
