//! Negative log partial likelihood for proportional-hazards risk scores,
//! with tied event times sharing the full risk set (Breslow handling).
//!
//! Both the value and its hand-derived gradient live here so the tape op and
//! the plain evaluation path stay in lockstep.

use crate::error::{CoreError, Result};

fn validate(risks: &[f64], times: &[f64], events: &[bool]) -> Result<usize> {
    if risks.len() != times.len() || risks.len() != events.len() {
        return Err(CoreError::Shape(format!(
            "risks ({}), times ({}), events ({}) must have equal length",
            risks.len(),
            times.len(),
            events.len()
        )));
    }
    if risks.is_empty() {
        return Err(CoreError::Contract("empty survival sample".into()));
    }
    if let Some(bad) = risks.iter().find(|v| !v.is_finite()) {
        return Err(CoreError::Domain(format!("non-finite risk score {bad}")));
    }
    if let Some(bad) = times.iter().find(|v| !v.is_finite()) {
        return Err(CoreError::Domain(format!("non-finite time {bad}")));
    }
    let n_events = events.iter().filter(|&&e| e).count();
    if n_events == 0 {
        return Err(CoreError::Contract(
            "partial likelihood needs at least one observed event".into(),
        ));
    }
    Ok(n_events)
}

/// Sorted sample order plus, for every index in that order, the shifted
/// exp(risk) and the suffix sum of its time group (the risk-set mass).
struct Prepared {
    order: Vec<usize>,
    shifted_exp: Vec<f64>,
    max_risk: f64,
    /// (start offset in `order`, events in group, risk-set sum) per distinct
    /// time, ascending.
    groups: Vec<(usize, usize, f64)>,
}

fn prepare(risks: &[f64], times: &[f64], events: &[bool]) -> Prepared {
    let n = risks.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let max_risk = risks.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted_exp: Vec<f64> = order.iter().map(|&i| (risks[i] - max_risk).exp()).collect();

    // Suffix sums over sorted positions give the risk set for each group.
    let mut suffix = vec![0.0; n + 1];
    for p in (0..n).rev() {
        suffix[p] = suffix[p + 1] + shifted_exp[p];
    }
    let mut groups = Vec::new();
    let mut p = 0;
    while p < n {
        let t = times[order[p]];
        let start = p;
        let mut d = 0;
        while p < n && times[order[p]] == t {
            if events[order[p]] {
                d += 1;
            }
            p += 1;
        }
        groups.push((start, d, suffix[start]));
    }
    Prepared {
        order,
        shifted_exp,
        max_risk,
        groups,
    }
}

/// Mean over events of log(risk-set sum) - risk. Invariant under adding a
/// constant to every risk score.
pub fn nll(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    let n_events = validate(risks, times, events)?;
    let prep = prepare(risks, times, events);
    let mut total = 0.0;
    for &(start, d, set_sum) in &prep.groups {
        if d == 0 {
            continue;
        }
        let log_set = set_sum.ln();
        let mut pos = start;
        let mut seen = 0;
        while seen < d {
            let idx = prep.order[pos];
            if events[idx] {
                total += (risks[idx] - prep.max_risk) - log_set;
                seen += 1;
            }
            pos += 1;
        }
    }
    Ok(-total / n_events as f64)
}

/// d(nll)/d(risk_j) for every sample.
pub fn nll_gradient(risks: &[f64], times: &[f64], events: &[bool]) -> Result<Vec<f64>> {
    let n_events = validate(risks, times, events)? as f64;
    let prep = prepare(risks, times, events);

    // Running sum over event groups at or before each time of d/S.
    let mut grad = vec![0.0; risks.len()];
    let mut acc = 0.0;
    for (gi, &(start, d, set_sum)) in prep.groups.iter().enumerate() {
        acc += d as f64 / set_sum;
        let end = prep
            .groups
            .get(gi + 1)
            .map(|g| g.0)
            .unwrap_or(prep.order.len());
        for p in start..end {
            let idx = prep.order[p];
            let indicator = if events[idx] { 1.0 } else { 0.0 };
            grad[idx] = -(indicator - prep.shifted_exp[p] * acc) / n_events;
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_events_reference_value() {
        // Equal risks, times 1 and 2, both events:
        // -( (0 - ln 2) + (0 - ln 1) ) / 2 = ln(2)/2.
        let v = nll(&[0.0, 0.0], &[1.0, 2.0], &[true, true]).unwrap();
        assert!((v - 0.5 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn translation_invariance() {
        let risks = [0.3, -1.2, 0.7, 2.1, -0.4];
        let times = [3.0, 1.0, 4.0, 2.0, 5.0];
        let events = [true, false, true, true, false];
        let base = nll(&risks, &times, &events).unwrap();
        for c in [-57.0, 0.001, 13.0] {
            let shifted: Vec<f64> = risks.iter().map(|r| r + c).collect();
            let v = nll(&shifted, &times, &events).unwrap();
            assert!((v - base).abs() < 1e-12, "shift {c}: {v} vs {base}");
        }
    }

    #[test]
    fn ties_share_the_risk_set() {
        // Two events at the same time: both see the full 3-sample risk set.
        let risks: [f64; 3] = [0.5, -0.5, 0.2];
        let times = [1.0, 1.0, 2.0];
        let events = [true, true, false];
        let s: f64 = risks.iter().map(|r| r.exp()).sum();
        let expect = -((risks[0] - s.ln()) + (risks[1] - s.ln())) / 2.0;
        let v = nll(&risks, &times, &events).unwrap();
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let risks = [0.3, -1.2, 0.7, 2.1, -0.4, 0.0];
        let times = [3.0, 1.0, 4.0, 2.0, 5.0, 2.0];
        let events = [true, false, true, true, false, true];
        let grad = nll_gradient(&risks, &times, &events).unwrap();
        let eps = 1e-6;
        for i in 0..risks.len() {
            let mut up = risks.to_vec();
            let mut dn = risks.to_vec();
            up[i] += eps;
            dn[i] -= eps;
            let fd = (nll(&up, &times, &events).unwrap() - nll(&dn, &times, &events).unwrap())
                / (2.0 * eps);
            assert!(
                (fd - grad[i]).abs() < 1e-8,
                "coordinate {i}: fd {fd} vs analytic {}",
                grad[i]
            );
        }
    }

    #[test]
    fn gradient_sums_to_zero() {
        // Translation invariance implies the gradient components cancel.
        let risks = [1.0, 0.2, -0.7, 0.4];
        let times = [2.0, 1.0, 3.0, 4.0];
        let events = [true, true, false, true];
        let grad = nll_gradient(&risks, &times, &events).unwrap();
        let s: f64 = grad.iter().sum();
        assert!(s.abs() < 1e-14);
    }

    #[test]
    fn zero_events_is_a_contract_error() {
        let err = nll(&[0.0, 1.0], &[1.0, 2.0], &[false, false]).unwrap_err();
        assert!(matches!(err, CoreError::Contract(_)));
    }
}
