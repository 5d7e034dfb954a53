//! Mixture of attention experts.
//!
//! Each expert reads the feature vector as a sequence of contiguous tokens,
//! runs single-head scaled dot-product self-attention over them, projects
//! the result back and adds it to the input (residual). A noisy top-k gate,
//! independent of the dense-expert gates, mixes the experts.

use crate::autodiff::graph::{Graph, ParamId, ParamStore};
use crate::autodiff::rng::RngState;
use crate::autodiff::tape::Var;
use crate::error::{CoreError, Result};
use crate::moe::{xavier, GateForward, NoisyTopKGate};

#[derive(Debug, Clone)]
pub struct AttentionExpert {
    pub token_count: usize,
    pub token_dim: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Debug)]
pub struct AttentionForward {
    pub output: Var,
    /// Row-stochastic (token_count x token_count) attention map per batch row.
    pub attention: Vec<Var>,
}

impl AttentionExpert {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        token_count: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        if token_count == 0 || d_model % token_count != 0 {
            return Err(CoreError::Config(format!(
                "attention expert `{prefix}`: token count {token_count} must divide width {d_model}"
            )));
        }
        let token_dim = d_model / token_count;
        let mk = |store: &mut ParamStore, suffix: &str, rng: &mut RngState| {
            xavier(store, format!("{prefix}.{suffix}"), token_dim, token_dim, rng)
        };
        Ok(AttentionExpert {
            token_count,
            token_dim,
            wq: mk(store, "wq", rng)?,
            wk: mk(store, "wk", rng)?,
            wv: mk(store, "wv", rng)?,
            wo: mk(store, "wo", rng)?,
        })
    }

    /// Residual self-attention over tokenized rows; output shape equals input.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<AttentionForward> {
        let (batch, d_model) = g.tape.shape(x);
        if d_model != self.token_count * self.token_dim {
            return Err(CoreError::Shape(format!(
                "attention expert expects width {}, got {d_model}",
                self.token_count * self.token_dim
            )));
        }
        let wq = g.param(store, self.wq)?;
        let wk = g.param(store, self.wk)?;
        let wv = g.param(store, self.wv)?;
        let wo = g.param(store, self.wo)?;
        let scale = 1.0 / (self.token_dim as f64).sqrt();

        let mut rows = Vec::with_capacity(batch);
        let mut maps = Vec::with_capacity(batch);
        for b in 0..batch {
            let row = g.slice_rows(x, b, b + 1)?;
            let tokens = g.reshape(row, self.token_count, self.token_dim)?;
            let q = g.matmul(tokens, wq)?;
            let k = g.matmul(tokens, wk)?;
            let v = g.matmul(tokens, wv)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.mul_scalar(scores, scale)?;
            let attn = g.softmax_rows(scores)?;
            let ctx = g.matmul(attn, v)?;
            let proj = g.matmul(ctx, wo)?;
            rows.push(g.reshape(proj, 1, d_model)?);
            maps.push(attn);
        }
        let stacked = g.concat_rows(&rows)?;
        let output = g.add(x, stacked)?;
        Ok(AttentionForward {
            output,
            attention: maps,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.wq, self.wk, self.wv, self.wo]
    }
}

/// Gated mixture of attention experts; the combined output keeps the input
/// shape, so the layer can sit anywhere in a dense stack.
#[derive(Debug, Clone)]
pub struct MoaeLayer {
    pub gate: NoisyTopKGate,
    pub experts: Vec<AttentionExpert>,
    pub d_model: usize,
}

#[derive(Debug)]
pub struct MoaeForward {
    pub output: Var,
    pub gate: GateForward,
    pub evaluated_experts: Vec<usize>,
}

impl MoaeLayer {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        n_experts: usize,
        top_k: usize,
        token_count: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        let gate = NoisyTopKGate::init(
            store,
            &format!("{prefix}.gate"),
            d_model,
            n_experts,
            top_k,
            rng,
        )?;
        let experts = (0..n_experts)
            .map(|i| {
                AttentionExpert::init(store, &format!("{prefix}.expert{i}"), d_model, token_count, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MoaeLayer {
            gate,
            experts,
            d_model,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        noise: Option<&mut RngState>,
    ) -> Result<MoaeForward> {
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
            let term = g.mul(col, e.output)?;
            output = Some(match output {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
        let output = output.expect("top_k >= 1 guarantees at least one expert");
        Ok(MoaeForward {
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
