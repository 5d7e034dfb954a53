//! Noisy top-k gating over a pool of dense experts.
//!
//! The gate scores every expert, perturbs the scores with input-dependent
//! noise during training, keeps the k best per row (ties go to the lowest
//! expert index) and renormalizes with a softmax over the survivors. Experts
//! whose gate column is zero for the whole batch are never evaluated.
//!
//! Two balance regularizers are provided: the L2 norm of the per-expert
//! batch gate mass ("importance") and the squared coefficient of variation
//! of the smooth selection-probability load.

use crate::autodiff::graph::{Graph, ParamId, ParamStore};
use crate::autodiff::rng::RngState;
use crate::autodiff::tape::Var;
use crate::autodiff::tensor::Tensor;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

/// A dense layer; also the expert unit inside gated layers.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub d_in: usize,
    pub d_out: usize,
}

pub(crate) fn xavier(
    store: &mut ParamStore,
    name: String,
    d_in: usize,
    d_out: usize,
    rng: &mut RngState,
) -> Result<ParamId> {
    let std = (2.0 / (d_in + d_out) as f64).sqrt();
    let t = rng.sample_gaussian(vec![d_in, d_out], 0.0, std)?;
    store.register(name, t)
}

impl DenseLayer {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        activation: Activation,
        rng: &mut RngState,
    ) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(CoreError::Config(format!(
                "dense layer `{prefix}` has zero-sized dimension ({d_in} -> {d_out})"
            )));
        }
        let weight = xavier(store, format!("{prefix}.weight"), d_in, d_out, rng)?;
        let bias = store.register(format!("{prefix}.bias"), Tensor::zeros(vec![1, d_out]))?;
        Ok(DenseLayer {
            weight,
            bias,
            activation,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.forward_bound(g, store, x, false)
    }

    /// `frozen` binds the parameters without gradient tracking.
    pub fn forward_bound(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        frozen: bool,
    ) -> Result<Var> {
        let w = if frozen {
            g.param_frozen(store, self.weight)?
        } else {
            g.param(store, self.weight)?
        };
        let b = if frozen {
            g.param_frozen(store, self.bias)?
        } else {
            g.param(store, self.bias)?
        };
        let h = g.matmul(x, w)?;
        let h = g.add(h, b)?;
        match self.activation {
            Activation::Relu => g.relu(h),
            Activation::Tanh => g.tanh(h),
            Activation::Sigmoid => g.sigmoid(h),
            Activation::Identity => Ok(h),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Per-row top-k keep mask over row-major scores. Ties are broken in favor
/// of the lower column index.
pub fn top_k_select(
    values: &[f64],
    rows: usize,
    cols: usize,
    k: usize,
) -> (Vec<bool>, Vec<Vec<usize>>) {
    debug_assert!(k >= 1 && k <= cols);
    let mut keep = vec![false; rows * cols];
    let mut selected = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &values[r * cols..(r + 1) * cols];
        let mut order: Vec<usize> = (0..cols).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let chosen: Vec<usize> = order[..k].to_vec();
        for &c in &chosen {
            keep[r * cols + c] = true;
        }
        selected.push(chosen);
    }
    (keep, selected)
}

/// Gate over `n_experts` scored by a linear map, with trainable
/// input-dependent noise magnitude.
#[derive(Debug, Clone)]
pub struct NoisyTopKGate {
    pub weight: ParamId,
    pub noise_weight: ParamId,
    pub n_experts: usize,
    pub top_k: usize,
}

/// Everything a gate pass produces; the score tensors are kept so the load
/// regularizer can be formed on the same tape.
#[derive(Debug)]
pub struct GateForward {
    /// Row-stochastic (batch x n_experts) with exactly top_k non-zeros per row.
    pub gates: Var,
    /// Scores after noise (equal to `clean_scores` when noise is off).
    pub scores: Var,
    pub clean_scores: Var,
    /// Softplus of the noise projection; present only when noise was on.
    pub noise_scale: Option<Var>,
    /// Per row, the selected expert indices in descending score order.
    pub selected: Vec<Vec<usize>>,
    pub n_experts: usize,
    pub top_k: usize,
}

impl NoisyTopKGate {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        n_experts: usize,
        top_k: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        if n_experts == 0 {
            return Err(CoreError::Config(format!("gate `{prefix}` has zero experts")));
        }
        if top_k == 0 || top_k > n_experts {
            return Err(CoreError::Config(format!(
                "gate `{prefix}`: top_k must be in 1..={n_experts}, got {top_k}"
            )));
        }
        let weight = xavier(store, format!("{prefix}.weight"), d_in, n_experts, rng)?;
        let noise_weight = xavier(store, format!("{prefix}.noise_weight"), d_in, n_experts, rng)?;
        Ok(NoisyTopKGate {
            weight,
            noise_weight,
            n_experts,
            top_k,
        })
    }

    /// Score, perturb (when `noise` is given), mask to the top k and
    /// renormalize. With no noise the result is a pure function of `x`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        noise: Option<&mut RngState>,
    ) -> Result<GateForward> {
        let (batch, _) = g.tape.shape(x);
        let w = g.param(store, self.weight)?;
        let clean = g.matmul(x, w)?;

        let (scores, noise_scale) = match noise {
            Some(rng) => {
                let wn = g.param(store, self.noise_weight)?;
                let raw = g.matmul(x, wn)?;
                let scale = g.softplus(raw)?;
                let z = rng.sample_gaussian(vec![batch, self.n_experts], 0.0, 1.0)?;
                let zv = g.constant(&z)?;
                let perturb = g.mul(zv, scale)?;
                (g.add(clean, perturb)?, Some(scale))
            }
            None => (clean, None),
        };

        let (keep, selected) = top_k_select(
            g.tape.value(scores),
            batch,
            self.n_experts,
            self.top_k,
        );
        let masked = g.masked_fill_neg_inf(scores, keep)?;
        let gates = g.softmax_rows(masked)?;
        Ok(GateForward {
            gates,
            scores,
            clean_scores: clean,
            noise_scale,
            selected,
            n_experts: self.n_experts,
            top_k: self.top_k,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.noise_weight]
    }
}

/// L2 norm of the per-expert batch gate mass, scaled by 1/batch. Uniform
/// routing over n experts gives 1/sqrt(n); total collapse gives 1.
pub fn importance_loss(g: &mut Graph, gates: Var) -> Result<Var> {
    let (batch, _) = g.tape.shape(gates);
    let imp = g.sum_axis(gates, 0)?;
    let sq = g.mul(imp, imp)?;
    let total = g.sum_all(sq)?;
    let norm = g.sqrt(total)?;
    g.mul_scalar(norm, 1.0 / batch as f64)
}

/// Batch gate mass per expert divided by batch size, as plain values
/// (used for logging and balance diagnostics).
pub fn importance_values(g: &Graph, gates: Var) -> Vec<f64> {
    let (batch, n) = g.tape.shape(gates);
    let v = g.tape.value(gates);
    (0..n)
        .map(|j| (0..batch).map(|b| v[b * n + j]).sum::<f64>() / batch as f64)
        .collect()
}

/// Probability, per row and expert, that resampling that expert's noise
/// would put it in the top k while the other noisy scores stay fixed.
/// Differentiable through the clean scores, the noise scale, and the
/// competing threshold score.
pub fn selection_probabilities(g: &mut Graph, gf: &GateForward) -> Result<Var> {
    let scale = gf.noise_scale.ok_or_else(|| {
        CoreError::Contract("load loss requires gate noise to be enabled".into())
    })?;
    let (batch, n) = g.tape.shape(gf.scores);
    let k = gf.top_k;
    if k >= n {
        // Every expert is always selected; the probability is constant 1.
        let ones = Tensor::new(vec![batch, n], vec![1.0; batch * n])?;
        return g.constant(&ones);
    }

    // Threshold for expert j: the k-th highest noisy score excluding j.
    let scores = g.tape.value(gf.scores).to_vec();
    let mut thresh_idx = Vec::with_capacity(batch * n);
    for b in 0..batch {
        let row = &scores[b * n..(b + 1) * n];
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
        let mut position = vec![0usize; n];
        for (pos, &j) in order.iter().enumerate() {
            position[j] = pos;
        }
        for j in 0..n {
            let source = if position[j] < k { order[k] } else { order[k - 1] };
            thresh_idx.push(b * n + source);
        }
    }
    let thresh = g.gather_flat(gf.scores, thresh_idx, batch, n)?;
    let margin = g.sub(gf.clean_scores, thresh)?;
    let ratio = g.div(margin, scale)?;
    g.normal_cdf(ratio)
}

/// Squared coefficient of variation of the smooth per-expert load. Zero when
/// the expected routing is perfectly even; (n - 1) under total collapse.
pub fn load_loss(g: &mut Graph, gf: &GateForward) -> Result<Var> {
    let p = selection_probabilities(g, gf)?;
    let load = g.sum_axis(p, 0)?;
    let mean = g.mean_all(load)?;
    let centered = g.sub(load, mean)?;
    let sq = g.mul(centered, centered)?;
    let var = g.mean_all(sq)?;
    let mean_sq = g.mul(mean, mean)?;
    g.div(var, mean_sq)
}

/// Mixture layer: gate plus dense experts sharing an output dimension.
#[derive(Debug, Clone)]
pub struct MoeLayer {
    pub gate: NoisyTopKGate,
    pub experts: Vec<DenseLayer>,
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Debug)]
pub struct MoeForward {
    pub output: Var,
    pub gate: GateForward,
    /// Experts that were actually run (non-zero gate somewhere in the batch).
    pub evaluated_experts: Vec<usize>,
}

impl MoeLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        n_experts: usize,
        top_k: usize,
        activation: Activation,
        rng: &mut RngState,
    ) -> Result<Self> {
        let gate = NoisyTopKGate::init(store, &format!("{prefix}.gate"), d_in, n_experts, top_k, rng)?;
        let experts = (0..n_experts)
            .map(|i| {
                DenseLayer::init(
                    store,
                    &format!("{prefix}.expert{i}"),
                    d_in,
                    d_out,
                    activation,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MoeLayer {
            gate,
            experts,
            d_in,
            d_out,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        noise: Option<&mut RngState>,
    ) -> Result<MoeForward> {
        let gf = self.gate.forward(g, store, x, noise)?;
        let mut used = vec![false; self.experts.len()];
        for row in &gf.selected {
            for &j in row {
                used[j] = true;
            }
        }
        let mut output: Option<Var> = None;
        let mut evaluated = Vec::new();
        for (j, expert) in self.experts.iter().enumerate() {
            if !used[j] {
                continue;
            }
            evaluated.push(j);
            let e = expert.forward(g, store, x)?;
            let col = g.slice_cols(gf.gates, j, j + 1)?;
            let term = g.mul(col, e)?;
            output = Some(match output {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
        let output = output.expect("top_k >= 1 guarantees at least one expert");
        Ok(MoeForward {
            output,
            gate: gf,
            evaluated_experts: evaluated,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.gate.params();
        for e in &self.experts {
            ids.extend(e.params());
        }
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use crate::special::normal_cdf;

    fn manual_gate(store: &mut ParamStore, d_in: usize, n: usize, k: usize) -> NoisyTopKGate {
        let weight = store
            .register("g.weight", Tensor::zeros(vec![d_in, n]))
            .unwrap();
        let noise_weight = store
            .register("g.noise_weight", Tensor::zeros(vec![d_in, n]))
            .unwrap();
        NoisyTopKGate {
            weight,
            noise_weight,
            n_experts: n,
            top_k: k,
        }
    }

    fn identity(store: &mut ParamStore, n: usize) {
        let id = store.id("g.weight").unwrap();
        let w = store.tensor_mut(id);
        for i in 0..n {
            w.values[i * n + i] = 1.0;
        }
    }

    #[test]
    fn gate_reference_row() {
        // Clean scores [2, 1, 0.5, -1], k = 2: only the first two survive.
        let mut store = ParamStore::new();
        let gate = manual_gate(&mut store, 4, 4, 2);
        identity(&mut store, 4);
        let mut g = Graph::new();
        let x = g.tape.leaf(1, 4, vec![2.0, 1.0, 0.5, -1.0], false).unwrap();
        let gf = gate.forward(&mut g, &store, x, None).unwrap();
        let v = g.tape.value(gf.gates);
        assert!((v[0] - 0.731_058_578_630_004_9).abs() < 1e-4);
        assert!((v[1] - 0.268_941_421_369_995_1).abs() < 1e-4);
        assert_eq!(v[2], 0.0);
        assert_eq!(v[3], 0.0);
        assert_eq!(gf.selected[0], vec![0, 1]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let (keep, sel) = top_k_select(&[1.0, 1.0, 0.0], 1, 3, 1);
        assert_eq!(sel[0], vec![0]);
        assert_eq!(keep, vec![true, false, false]);
        // All equal, k = 2: indices 0 and 1.
        let (_, sel) = top_k_select(&[5.0, 5.0, 5.0, 5.0], 1, 4, 2);
        assert_eq!(sel[0], vec![0, 1]);
    }

    #[test]
    fn rows_are_simplex_with_exact_support() {
        let mut rng = RngState::new(11);
        let mut store = ParamStore::new();
        let gate = NoisyTopKGate::init(&mut store, "g", 6, 5, 2, &mut rng).unwrap();
        let x = rng.sample_gaussian(vec![8, 6], 0.0, 1.0).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(&x).unwrap();
        let gf = gate.forward(&mut g, &store, xv, Some(&mut rng)).unwrap();
        let v = g.tape.value(gf.gates);
        for b in 0..8 {
            let row = &v[b * 5..(b + 1) * 5];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert_eq!(row.iter().filter(|&&p| p > 0.0).count(), 2);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn top_k_equal_n_is_plain_softmax() {
        let mut store = ParamStore::new();
        let gate = manual_gate(&mut store, 3, 3, 3);
        identity(&mut store, 3);
        let mut g = Graph::new();
        let x = g.tape.leaf(1, 3, vec![0.3, -0.7, 1.2], false).unwrap();
        let gf = gate.forward(&mut g, &store, x, None).unwrap();
        let direct = g.tape.leaf(1, 3, vec![0.3, -0.7, 1.2], false).unwrap();
        let sm = g.softmax_rows(direct).unwrap();
        let a = g.tape.value(gf.gates).to_vec();
        let b = g.tape.value(sm).to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let mut rng = RngState::new(5);
        let mut store = ParamStore::new();
        let gate = NoisyTopKGate::init(&mut store, "g", 4, 6, 3, &mut rng).unwrap();
        let x = rng.sample_gaussian(vec![3, 4], 0.0, 1.0).unwrap();
        let run = |store: &ParamStore| {
            let mut g = Graph::new();
            let xv = g.constant(&x).unwrap();
            let gf = gate.forward(&mut g, store, xv, None).unwrap();
            g.tape.value(gf.gates).to_vec()
        };
        assert_eq!(run(&store), run(&store));
    }

    #[test]
    fn invalid_k_rejected() {
        let mut rng = RngState::new(1);
        let mut store = ParamStore::new();
        assert!(matches!(
            NoisyTopKGate::init(&mut store, "g", 4, 4, 5, &mut rng),
            Err(CoreError::Config(_))
        ));
        let mut store2 = ParamStore::new();
        assert!(matches!(
            NoisyTopKGate::init(&mut store2, "g", 4, 4, 0, &mut rng),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn importance_reference_values() {
        let mut g = Graph::new();
        // Uniform routing over 4 experts: loss = 1/sqrt(4) = 0.5.
        let uniform = g.tape.leaf(6, 4, vec![0.25; 24], false).unwrap();
        let l = importance_loss(&mut g, uniform).unwrap();
        assert!((g.tape.value(l)[0] - 0.5).abs() < 1e-12);

        // Everything on one expert: loss = 1.
        let mut vals = vec![0.0; 24];
        for b in 0..6 {
            vals[b * 4] = 1.0;
        }
        let collapsed = g.tape.leaf(6, 4, vals, false).unwrap();
        let l = importance_loss(&mut g, collapsed).unwrap();
        assert!((g.tape.value(l)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn load_collapse_gives_n_minus_one() {
        // Expert 0 dominates every row by a huge margin with k = 1.
        let mut rng = RngState::new(3);
        let mut store = ParamStore::new();
        let gate = manual_gate(&mut store, 4, 4, 1);
        identity(&mut store, 4);
        let mut g = Graph::new();
        let mut vals = vec![0.0; 5 * 4];
        for b in 0..5 {
            vals[b * 4] = 500.0;
        }
        let x = g.tape.leaf(5, 4, vals, false).unwrap();
        let gf = gate.forward(&mut g, &store, x, Some(&mut rng)).unwrap();
        let l = load_loss(&mut g, &gf).unwrap();
        assert!((g.tape.value(l)[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn load_without_noise_is_a_contract_error() {
        let mut store = ParamStore::new();
        let gate = manual_gate(&mut store, 2, 3, 1);
        let mut g = Graph::new();
        let x = g.tape.leaf(1, 2, vec![1.0, 0.0], false).unwrap();
        let gf = gate.forward(&mut g, &store, x, None).unwrap();
        assert!(matches!(
            load_loss(&mut g, &gf),
            Err(CoreError::Contract(_))
        ));
    }

    #[test]
    fn selection_probabilities_match_sampling() {
        // Oracle: redraw one expert's noise many times and count how often
        // it clears the brute-force threshold.
        let mut rng = RngState::new(21);
        let mut store = ParamStore::new();
        let gate = NoisyTopKGate::init(&mut store, "g", 5, 5, 2, &mut rng).unwrap();
        let x = rng.sample_gaussian(vec![3, 5], 0.0, 1.0).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(&x).unwrap();
        let gf = gate.forward(&mut g, &store, xv, Some(&mut rng)).unwrap();
        let p = selection_probabilities(&mut g, &gf).unwrap();
        let probs = g.tape.value(p).to_vec();

        let scores = g.tape.value(gf.scores).to_vec();
        let clean = g.tape.value(gf.clean_scores).to_vec();
        let scale = g.tape.value(gf.noise_scale.unwrap()).to_vec();
        let (batch, n, k) = (3, 5, 2);
        let mut sampler = RngState::new(77);
        for b in 0..batch {
            for j in 0..n {
                let mut others: Vec<f64> = (0..n)
                    .filter(|&c| c != j)
                    .map(|c| scores[b * n + c])
                    .collect();
                others.sort_by(|p, q| q.total_cmp(p));
                let thresh = others[k - 1];
                let mut hits = 0;
                let draws = 20_000;
                for _ in 0..draws {
                    let z = sampler.normal(0.0, 1.0).unwrap();
                    if clean[b * n + j] + z * scale[b * n + j] > thresh {
                        hits += 1;
                    }
                }
                let freq = hits as f64 / draws as f64;
                assert!(
                    (freq - probs[b * n + j]).abs() < 0.02,
                    "row {b} expert {j}: sampled {freq} vs smooth {}",
                    probs[b * n + j]
                );
            }
        }
    }

    #[test]
    fn moe_skips_unselected_experts() {
        let mut rng = RngState::new(9);
        let mut store = ParamStore::new();
        let layer = MoeLayer::init(&mut store, "m", 3, 2, 4, 1, Activation::Relu, &mut rng).unwrap();
        // Bias the gate so expert 2 wins every row.
        let w = store.tensor_mut(layer.gate.weight);
        for v in w.values.iter_mut() {
            *v = 0.0;
        }
        for r in 0..3 {
            w.values[r * 4 + 2] = 5.0;
        }
        let mut g = Graph::new();
        let x = g.tape.leaf(4, 3, vec![1.0; 12], false).unwrap();
        let out = layer.forward(&mut g, &store, x, None).unwrap();
        assert_eq!(out.evaluated_experts, vec![2]);
        assert_eq!(g.tape.shape(out.output), (4, 2));
    }

    #[test]
    fn expert_permutation_permutes_gates_only() {
        let mut rng = RngState::new(13);
        let mut store = ParamStore::new();
        let layer = MoeLayer::init(&mut store, "m", 4, 3, 4, 2, Activation::Tanh, &mut rng).unwrap();
        let x = rng.sample_gaussian(vec![5, 4], 0.0, 1.0).unwrap();

        let run = |store: &ParamStore, layer: &MoeLayer| {
            let mut g = Graph::new();
            let xv = g.constant(&x).unwrap();
            let out = layer.forward(&mut g, store, xv, None).unwrap();
            (
                g.tape.value(out.gate.gates).to_vec(),
                g.tape.value(out.output).to_vec(),
            )
        };
        let (gates0, y0) = run(&store, &layer);

        // Permute experts (and gate columns) with a fixed cycle.
        let perm = [2usize, 0, 3, 1]; // new position of old expert i
        let mut store2 = store.clone();
        let n = 4;
        for gid in [layer.gate.weight, layer.gate.noise_weight] {
            let src = store.tensor(gid).values.clone();
            let dst = store2.tensor_mut(gid);
            for r in 0..4 {
                for j in 0..n {
                    dst.values[r * n + perm[j]] = src[r * n + j];
                }
            }
        }
        let mut layer2 = layer.clone();
        for (i, &p) in perm.iter().enumerate() {
            layer2.experts[p] = layer.experts[i].clone();
        }
        let (gates1, y1) = run(&store2, &layer2);

        for b in 0..5 {
            for j in 0..n {
                assert!((gates0[b * n + j] - gates1[b * n + perm[j]]).abs() < 1e-12);
            }
        }
        for (a, b) in y0.iter().zip(&y1) {
            assert!((a - b).abs() < 1e-9, "outputs differ: {a} vs {b}");
        }
    }

    #[test]
    fn gradients_through_gated_forward() {
        let mut rng = RngState::new(17);
        let mut store = ParamStore::new();
        let layer = MoeLayer::init(&mut store, "m", 4, 3, 4, 2, Activation::Relu, &mut rng).unwrap();
        let x = rng.sample_gaussian(vec![3, 4], 0.0, 1.0).unwrap();
        let base = rng;
        let ids = layer.params();
        let err = check_gradients(&mut store, &ids, 1e-5, |g, s| {
            let mut frozen = base.clone();
            let xv = g.constant(&x)?;
            let out = layer.forward(g, s, xv, Some(&mut frozen))?;
            let fit = g.mean_all(out.output)?;
            let imp = importance_loss(g, out.gate.gates)?;
            let load = load_loss(g, &out.gate)?;
            let a = g.add(fit, imp)?;
            g.add(a, load)
        })
        .unwrap();
        assert!(err < 1e-4, "max relative gradient error {err}");
    }

    #[test]
    fn importance_descent_balances_routing() {
        // Minimizing the importance loss alone drives the batch gate mass
        // toward uniform within a couple hundred steps.
        let mut rng = RngState::new(29);
        let mut store = ParamStore::new();
        let gate = NoisyTopKGate::init(&mut store, "g", 6, 4, 2, &mut rng).unwrap();
        // Skew the initial gate hard toward expert 0.
        store.tensor_mut(gate.weight).values[0] += 4.0;
        let x = rng.sample_gaussian(vec![32, 6], 0.0, 1.0).unwrap();

        let mut adam = crate::optim::Adam::new(0.9, 0.999);
        // Noise is off, so only the clean scoring weight is on the tape.
        let ids = [gate.weight];
        let mut final_cv = f64::INFINITY;
        for _ in 0..200 {
            store.zero_grads();
            let mut g = Graph::new();
            let xv = g.constant(&x).unwrap();
            let gf = gate.forward(&mut g, &store, xv, None).unwrap();
            let loss = importance_loss(&mut g, gf.gates).unwrap();
            g.backward(loss).unwrap();
            g.write_grads(&mut store).unwrap();
            adam.step(&mut store, &ids, 0.05).unwrap();

            let imp = importance_values(&g, gf.gates);
            let mean = imp.iter().sum::<f64>() / imp.len() as f64;
            let var = imp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / imp.len() as f64;
            final_cv = var.sqrt() / mean;
        }
        assert!(final_cv < 0.05, "routing stayed unbalanced: CV {final_cv}");
    }

    #[test]
    fn normal_cdf_op_agrees_with_scalar() {
        let mut g = Graph::new();
        let x = g.tape.leaf(1, 3, vec![-1.1, 0.0, 2.3], false).unwrap();
        let p = g.normal_cdf(x).unwrap();
        let v = g.tape.value(p);
        for (i, &xi) in [-1.1f64, 0.0, 2.3].iter().enumerate() {
            assert!((v[i] - normal_cdf(xi)).abs() < 1e-15);
        }
    }
}
