//! The full generator (gated encoder, Gaussian latent, dense decoder), the
//! Wasserstein critic, and the loss terms of the pre-training objective.
//!
//! The gradient penalty needs the gradient of the critic output with respect
//! to its input. Because the critic is a plain relu stack, that gradient is
//! itself expressible with first-order tape ops (the relu masks enter as
//! constants), so the penalty backpropagates into the critic weights without
//! a second-order engine.
//!
//! Model methods take the parameter store explicitly rather than reading a
//! field, so callers can evaluate the same architecture under a perturbed
//! store (that is what the finite-difference gradient checker does).

use serde::{Deserialize, Serialize};

use crate::autodiff::graph::{Graph, ParamId, ParamStore};
use crate::autodiff::rng::RngState;
use crate::autodiff::tape::Var;
use crate::autodiff::tensor::Tensor;
use crate::error::{CoreError, Result};
use crate::moae::MoaeLayer;
use crate::moe::{importance_loss, importance_values, load_loss, Activation, DenseLayer, GateForward, MoeLayer};

pub const LOG_SIGMA_MIN: f64 = -7.0;
pub const LOG_SIGMA_MAX: f64 = 4.0;
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Plain dense stack, no gating. The ablation baseline.
    Dense,
    /// Gated dense experts per hidden layer.
    Moe,
    /// Gated dense experts plus a final mixture of attention experts.
    MoeMoae,
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::Dense => "dense",
            EncoderKind::Moe => "moe",
            EncoderKind::MoeMoae => "moe_moae",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(EncoderKind::Dense),
            "moe" => Ok(EncoderKind::Moe),
            "moe_moae" => Ok(EncoderKind::MoeMoae),
            other => Err(CoreError::Config(format!("unknown encoder kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneMoeConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub encoder: EncoderKind,
    pub n_experts: usize,
    pub top_k: usize,
    pub moae_experts: usize,
    pub moae_top_k: usize,
    pub token_count: usize,
    pub dropout: f64,
    pub lambda_kl: f64,
    pub lambda_l1: f64,
    pub lambda_balance: f64,
    pub lambda_gp: f64,
    pub noise_sigma: f64,
    pub critic_hidden: Vec<usize>,
    /// Reconstruct the clean input instead of the augmented one.
    pub reconstruct_clean: bool,
}

impl Default for GeneMoeConfig {
    fn default() -> Self {
        GeneMoeConfig {
            input_dim: 0,
            hidden: vec![1024, 512],
            latent_dim: 128,
            encoder: EncoderKind::MoeMoae,
            n_experts: 8,
            top_k: 2,
            moae_experts: 4,
            moae_top_k: 2,
            token_count: 16,
            dropout: 0.2,
            lambda_kl: 10.0,
            lambda_l1: 20.0,
            lambda_balance: 10.0,
            lambda_gp: 10.0,
            noise_sigma: 0.2,
            critic_hidden: vec![512],
            reconstruct_clean: false,
        }
    }
}

impl GeneMoeConfig {
    pub fn with_input_dim(input_dim: usize) -> Self {
        GeneMoeConfig {
            input_dim,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(CoreError::Config("input_dim must be positive".into()));
        }
        if self.latent_dim == 0 {
            return Err(CoreError::Config("latent_dim must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&h| h == 0) {
            return Err(CoreError::Config(
                "hidden widths must be non-empty and positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        for (name, v) in [
            ("lambda_kl", self.lambda_kl),
            ("lambda_l1", self.lambda_l1),
            ("lambda_balance", self.lambda_balance),
            ("lambda_gp", self.lambda_gp),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CoreError::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.encoder == EncoderKind::MoeMoae {
            let last = *self.hidden.last().unwrap();
            if self.token_count == 0 || last % self.token_count != 0 {
                return Err(CoreError::Config(format!(
                    "token_count {} must divide the last hidden width {last}",
                    self.token_count
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum HiddenLayer {
    Dense(DenseLayer),
    Moe(MoeLayer),
}

#[derive(Debug, Clone)]
struct Encoder {
    layers: Vec<HiddenLayer>,
    attention: Option<MoaeLayer>,
}

/// Relu hidden layers, linear scalar output. Used as the critic.
#[derive(Debug, Clone)]
pub struct DenseStack {
    pub layers: Vec<DenseLayer>,
}

impl DenseStack {
    fn init(store: &mut ParamStore, prefix: &str, dims: &[usize], rng: &mut RngState) -> Result<Self> {
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let act = if i + 2 == dims.len() {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(DenseLayer::init(
                store,
                &format!("{prefix}.layer{i}"),
                dims[i],
                dims[i + 1],
                act,
                rng,
            )?);
        }
        Ok(DenseStack { layers })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, frozen: bool) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward_bound(g, store, h, frozen)?;
        }
        Ok(h)
    }

    /// Forward pass plus the gradient of the (scalar per row) output with
    /// respect to the input, built from tape ops so it stays differentiable
    /// in the weights. Relu masks are taken from the forward values and
    /// enter as constants, which is exact except on the measure-zero set
    /// where a pre-activation is exactly zero.
    pub fn forward_with_input_gradient(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
    ) -> Result<(Var, Var)> {
        let (batch, _) = g.tape.shape(x);
        let last = self
            .layers
            .last()
            .ok_or_else(|| CoreError::Contract("input gradient of an empty stack".into()))?;
        if last.d_out != 1 {
            return Err(CoreError::Contract(
                "input gradient requires a scalar-output stack".into(),
            ));
        }
        let mut h = x;
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut masks: Vec<Tensor> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g.param(store, layer.weight)?;
            let b = g.param(store, layer.bias)?;
            weights.push(w);
            let z = g.matmul(h, w)?;
            let z = g.add(z, b)?;
            if i + 1 < self.layers.len() {
                let zv = g.tape.value(z);
                let mask: Vec<f64> = zv.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
                masks.push(Tensor::new(vec![batch, layer.d_out], mask)?);
                h = g.relu(z)?;
            } else {
                h = z;
            }
        }
        let ones = Tensor::new(vec![batch, 1], vec![1.0; batch])?;
        let mut grad = g.constant(&ones)?;
        for i in (0..self.layers.len()).rev() {
            let wt = g.transpose(weights[i])?;
            grad = g.matmul(grad, wt)?;
            if i > 0 {
                let m = g.constant(&masks[i - 1])?;
                grad = g.mul(grad, m)?;
            }
        }
        Ok((h, grad))
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct GeneMoeModel {
    pub config: GeneMoeConfig,
    pub store: ParamStore,
    encoder: Encoder,
    mu_head: DenseLayer,
    logstd_head: DenseLayer,
    decoder: Vec<DenseLayer>,
    pub critic: DenseStack,
}

pub struct EncodeOutput {
    pub backbone: Var,
    pub mu: Var,
    pub log_sigma: Var,
    pub gates: Vec<GateForward>,
}

pub struct GeneratorPass {
    pub recon: Var,
    pub mu: Var,
    pub log_sigma: Var,
    pub z: Var,
    pub gates: Vec<GateForward>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gan_g: f64,
    pub gan_d: f64,
    pub gp: f64,
    pub kl: f64,
    pub l1: f64,
    pub importance: f64,
    pub load: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Reassembles the generator objective from the parts, in the same
    /// operation order the tape uses, so the identity is exact.
    pub fn recompose(&self, cfg: &GeneMoeConfig) -> f64 {
        self.gan_g
            + cfg.lambda_kl * self.kl
            + cfg.lambda_l1 * self.l1
            + cfg.lambda_balance * (self.importance + self.load)
    }
}

pub struct GeneratorLoss {
    pub total: Var,
    pub recon: Var,
    pub gan_g: f64,
    pub kl: f64,
    pub l1: f64,
    pub importance: f64,
    pub load: f64,
    pub total_value: f64,
    /// Mean gate mass per expert, one vector per gated layer.
    pub gate_mass: Vec<Vec<f64>>,
}

pub struct CriticLoss {
    pub total: Var,
    pub gan_d: f64,
    pub gp: f64,
}

impl GeneMoeModel {
    pub fn new(config: GeneMoeConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut prev = config.input_dim;
        for (i, &h) in config.hidden.iter().enumerate() {
            let prefix = format!("encoder.layer{i}");
            let layer = match config.encoder {
                EncoderKind::Dense => HiddenLayer::Dense(DenseLayer::init(
                    &mut store,
                    &prefix,
                    prev,
                    h,
                    Activation::Relu,
                    rng,
                )?),
                _ => HiddenLayer::Moe(MoeLayer::init(
                    &mut store,
                    &prefix,
                    prev,
                    h,
                    config.n_experts,
                    config.top_k,
                    Activation::Relu,
                    rng,
                )?),
            };
            layers.push(layer);
            prev = h;
        }
        let attention = if config.encoder == EncoderKind::MoeMoae {
            Some(MoaeLayer::init(
                &mut store,
                "encoder.attention",
                prev,
                config.moae_experts,
                config.moae_top_k,
                config.token_count,
                rng,
            )?)
        } else {
            None
        };
        let mu_head = DenseLayer::init(
            &mut store,
            "mu_head",
            prev,
            config.latent_dim,
            Activation::Identity,
            rng,
        )?;
        let logstd_head = DenseLayer::init(
            &mut store,
            "logstd_head",
            prev,
            config.latent_dim,
            Activation::Identity,
            rng,
        )?;
        let mut decoder = Vec::new();
        let mut dims: Vec<usize> = vec![config.latent_dim];
        dims.extend(config.hidden.iter().rev());
        dims.push(config.input_dim);
        for i in 0..dims.len() - 1 {
            let act = if i + 2 == dims.len() {
                Activation::Sigmoid
            } else {
                Activation::Relu
            };
            decoder.push(DenseLayer::init(
                &mut store,
                &format!("decoder.layer{i}"),
                dims[i],
                dims[i + 1],
                act,
                rng,
            )?);
        }
        let mut critic_dims = vec![config.input_dim];
        critic_dims.extend(config.critic_hidden.iter().copied());
        critic_dims.push(1);
        let critic = DenseStack::init(&mut store, "critic", &critic_dims, rng)?;
        Ok(GeneMoeModel {
            config,
            store,
            encoder: Encoder { layers, attention },
            mu_head,
            logstd_head,
            decoder,
            critic,
        })
    }

    pub fn gated_layer_count(&self) -> usize {
        let moe = self
            .encoder
            .layers
            .iter()
            .filter(|l| matches!(l, HiddenLayer::Moe(_)))
            .count();
        moe + self.encoder.attention.is_some() as usize
    }

    pub fn generator_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for layer in &self.encoder.layers {
            match layer {
                HiddenLayer::Dense(d) => ids.extend(d.params()),
                HiddenLayer::Moe(m) => ids.extend(m.params()),
            }
        }
        if let Some(attn) = &self.encoder.attention {
            ids.extend(attn.params());
        }
        ids.extend(self.mu_head.params());
        ids.extend(self.logstd_head.params());
        for layer in &self.decoder {
            ids.extend(layer.params());
        }
        ids
    }

    pub fn critic_param_ids(&self) -> Vec<ParamId> {
        self.critic.params()
    }

    /// Encoder stack plus the mu head: the weights a downstream task head
    /// sits on. The log-sigma head, decoder and critic stay out because
    /// fine-tuning reads the latent mean only.
    pub fn backbone_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for layer in &self.encoder.layers {
            match layer {
                HiddenLayer::Dense(d) => ids.extend(d.params()),
                HiddenLayer::Moe(m) => ids.extend(m.params()),
            }
        }
        if let Some(attn) = &self.encoder.attention {
            ids.extend(attn.params());
        }
        ids.extend(self.mu_head.params());
        ids
    }

    /// Backbone, latent heads and gate records. Passing an rng enables gate
    /// noise and dropout (training mode); `None` is the deterministic
    /// evaluation path.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mut rng: Option<&mut RngState>,
    ) -> Result<EncodeOutput> {
        let (_, d) = g.tape.shape(x);
        if d != self.config.input_dim {
            return Err(CoreError::Config(format!(
                "input has {d} columns, model expects {}",
                self.config.input_dim
            )));
        }
        let mut h = x;
        let mut gates = Vec::new();
        for layer in &self.encoder.layers {
            h = match layer {
                HiddenLayer::Dense(dl) => dl.forward(g, store, h)?,
                HiddenLayer::Moe(ml) => {
                    let out = ml.forward(g, store, h, rng.as_deref_mut())?;
                    gates.push(out.gate);
                    out.output
                }
            };
            if self.config.dropout > 0.0 {
                if let Some(r) = rng.as_deref_mut() {
                    let (rows, cols) = g.tape.shape(h);
                    let mask = r.dropout_mask(vec![rows, cols], self.config.dropout)?;
                    let mask = g.constant(&mask)?;
                    h = g.mul(h, mask)?;
                }
            }
        }
        if let Some(attn) = &self.encoder.attention {
            let out = attn.forward(g, store, h, rng.as_deref_mut())?;
            gates.push(out.gate);
            h = out.output;
        }
        let mu = self.mu_head.forward(g, store, h)?;
        let raw = self.logstd_head.forward(g, store, h)?;
        let log_sigma = g.clamp(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
        Ok(EncodeOutput {
            backbone: h,
            mu,
            log_sigma,
            gates,
        })
    }

    pub fn decode(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let mut h = z;
        for layer in &self.decoder {
            h = layer.forward(g, store, h)?;
        }
        Ok(h)
    }

    /// Encoder, latent sample and reconstruction in one pass.
    pub fn generator_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: &Tensor,
        mut rng: Option<&mut RngState>,
    ) -> Result<GeneratorPass> {
        let xv = g.constant(x)?;
        let enc = self.encode(g, store, xv, rng.as_deref_mut())?;
        let z = reparameterize(g, enc.mu, enc.log_sigma, rng)?;
        let recon = self.decode(g, store, z)?;
        Ok(GeneratorPass {
            recon,
            mu: enc.mu,
            log_sigma: enc.log_sigma,
            z,
            gates: enc.gates,
        })
    }

    pub fn critic_forward(&self, g: &mut Graph, store: &ParamStore, u: Var, frozen: bool) -> Result<Var> {
        self.critic.forward(g, store, u, frozen)
    }

    /// Penalty pushing the critic's input gradient to unit norm along random
    /// interpolates between real and reconstructed rows.
    pub fn gradient_penalty(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        real: Var,
        fake: Var,
        rng: &mut RngState,
    ) -> Result<Var> {
        let (b, d) = g.tape.shape(real);
        let (bf, df) = g.tape.shape(fake);
        if (b, d) != (bf, df) {
            return Err(CoreError::Shape(format!(
                "interpolation endpoints disagree: {b}x{d} vs {bf}x{df}"
            )));
        }
        if b < 2 {
            return Err(CoreError::Contract(
                "gradient penalty needs a batch of at least 2 rows".into(),
            ));
        }
        let t: Vec<f64> = (0..b).map(|_| rng.uniform01()).collect();
        let omt: Vec<f64> = t.iter().map(|v| 1.0 - v).collect();
        let t = g.constant(&Tensor::new(vec![b, 1], t)?)?;
        let omt = g.constant(&Tensor::new(vec![b, 1], omt)?)?;
        let a = g.mul(t, real)?;
        let c = g.mul(omt, fake)?;
        let u = g.add(a, c)?;
        let (_, grad) = self.critic.forward_with_input_gradient(g, store, u)?;
        let sq = g.mul(grad, grad)?;
        let sums = g.sum_axis(sq, 1)?;
        let sums = g.add_scalar(sums, 1e-12)?;
        let norms = g.sqrt(sums)?;
        let dev = g.add_scalar(norms, -1.0)?;
        let dev2 = g.mul(dev, dev)?;
        g.mean_all(dev2)
    }

    /// The generator objective on one batch: adversarial term against a
    /// frozen critic plus the weighted KL, reconstruction and balance terms.
    pub fn generator_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_hat: &Tensor,
        target: &Tensor,
        rng: &mut RngState,
    ) -> Result<GeneratorLoss> {
        let pass = self.generator_forward(g, store, x_hat, Some(rng))?;
        let d_fake = self.critic_forward(g, store, pass.recon, true)?;
        let mean_fake = g.mean_all(d_fake)?;
        let gan_g = g.neg(mean_fake)?;
        let kl = kl_loss(g, pass.mu, pass.log_sigma)?;
        let tgt = g.constant(target)?;
        let l1 = l1_recon_loss(g, pass.recon, tgt)?;
        let mut importance: Option<Var> = None;
        let mut load: Option<Var> = None;
        for gf in &pass.gates {
            let imp = importance_loss(g, gf.gates)?;
            importance = Some(match importance {
                Some(acc) => g.add(acc, imp)?,
                None => imp,
            });
            let ld = load_loss(g, gf)?;
            load = Some(match load {
                Some(acc) => g.add(acc, ld)?,
                None => ld,
            });
        }
        let cfg = &self.config;
        let mut total = gan_g;
        let wkl = g.mul_scalar(kl, cfg.lambda_kl)?;
        total = g.add(total, wkl)?;
        let wl1 = g.mul_scalar(l1, cfg.lambda_l1)?;
        total = g.add(total, wl1)?;
        let (imp_v, load_v) = match (importance, load) {
            (Some(i), Some(l)) => {
                let bal = g.add(i, l)?;
                let wbal = g.mul_scalar(bal, cfg.lambda_balance)?;
                total = g.add(total, wbal)?;
                (g.scalar_value(i)?, g.scalar_value(l)?)
            }
            _ => (0.0, 0.0),
        };
        let gate_mass = pass
            .gates
            .iter()
            .map(|gf| importance_values(g, gf.gates))
            .collect();
        Ok(GeneratorLoss {
            gan_g: g.scalar_value(gan_g)?,
            kl: g.scalar_value(kl)?,
            l1: g.scalar_value(l1)?,
            importance: imp_v,
            load: load_v,
            total_value: g.scalar_value(total)?,
            total,
            recon: pass.recon,
            gate_mass,
        })
    }

    /// The critic objective on one batch against fixed reconstructions:
    /// negative Wasserstein estimate plus the gradient penalty.
    pub fn critic_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_hat: &Tensor,
        recon: &Tensor,
        rng: &mut RngState,
    ) -> Result<CriticLoss> {
        let real = g.constant(x_hat)?;
        let fake = g.constant(recon)?;
        let d_real = self.critic_forward(g, store, real, false)?;
        let d_fake = self.critic_forward(g, store, fake, false)?;
        let mean_real = g.mean_all(d_real)?;
        let mean_fake = g.mean_all(d_fake)?;
        let gan_d = g.sub(mean_fake, mean_real)?;
        let gp = self.gradient_penalty(g, store, real, fake, rng)?;
        let wgp = g.mul_scalar(gp, self.config.lambda_gp)?;
        let total = g.add(gan_d, wgp)?;
        Ok(CriticLoss {
            gan_d: g.scalar_value(gan_d)?,
            gp: g.scalar_value(gp)?,
            total,
        })
    }

    /// Every loss term of the objective on one batch, as plain numbers.
    pub fn loss_breakdown(
        &self,
        store: &ParamStore,
        x_hat: &Tensor,
        target: &Tensor,
        rng: &mut RngState,
    ) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let gen = self.generator_loss(&mut g, store, x_hat, target, rng)?;
        let recon = g.detach(gen.recon);
        let crit = self.critic_loss(&mut g, store, x_hat, &recon, rng)?;
        Ok(LossBreakdown {
            gan_g: gen.gan_g,
            gan_d: crit.gan_d,
            gp: crit.gp,
            kl: gen.kl,
            l1: gen.l1,
            importance: gen.importance,
            load: gen.load,
            total: gen.total_value,
        })
    }
}

fn sigma_from_log(g: &mut Graph, log_sigma: Var) -> Result<Var> {
    let s = g.exp(log_sigma)?;
    g.clamp(s, SIGMA_FLOOR, f64::INFINITY)
}

/// z = mu + sigma * eps while training; z = mu in evaluation.
pub fn reparameterize(g: &mut Graph, mu: Var, log_sigma: Var, rng: Option<&mut RngState>) -> Result<Var> {
    match rng {
        Some(r) => {
            let (b, d) = g.tape.shape(mu);
            let eps = r.sample_gaussian(vec![b, d], 0.0, 1.0)?;
            let eps = g.constant(&eps)?;
            let sigma = sigma_from_log(g, log_sigma)?;
            let noise = g.mul(sigma, eps)?;
            g.add(mu, noise)
        }
        None => Ok(mu),
    }
}

/// Sum over latent dims, mean over batch, of mu^2 + sigma^2 - log sigma^2 - 1.
pub fn kl_loss(g: &mut Graph, mu: Var, log_sigma: Var) -> Result<Var> {
    let sigma = sigma_from_log(g, log_sigma)?;
    let mu2 = g.mul(mu, mu)?;
    let s2 = g.mul(sigma, sigma)?;
    let log_s2 = g.log(s2)?;
    let t = g.add(mu2, s2)?;
    let t = g.sub(t, log_s2)?;
    let t = g.add_scalar(t, -1.0)?;
    let rows = g.sum_axis(t, 1)?;
    g.mean_all(rows)
}

/// Mean absolute difference over all entries.
pub fn l1_recon_loss(g: &mut Graph, recon: Var, target: Var) -> Result<Var> {
    let diff = g.sub(recon, target)?;
    let a = g.abs(diff)?;
    g.mean_all(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;

    fn tiny_config() -> GeneMoeConfig {
        GeneMoeConfig {
            input_dim: 12,
            hidden: vec![8],
            latent_dim: 5,
            encoder: EncoderKind::MoeMoae,
            n_experts: 3,
            top_k: 2,
            moae_experts: 2,
            moae_top_k: 1,
            token_count: 4,
            dropout: 0.1,
            critic_hidden: vec![6],
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.dropout = 1.0;
        assert!(matches!(c.validate(), Err(CoreError::Config(_))));
        let mut c = tiny_config();
        c.token_count = 5;
        assert!(matches!(c.validate(), Err(CoreError::Config(_))));
        let mut c = tiny_config();
        c.lambda_gp = -1.0;
        assert!(matches!(c.validate(), Err(CoreError::Config(_))));
        let mut c = tiny_config();
        c.hidden.clear();
        assert!(matches!(c.validate(), Err(CoreError::Config(_))));
        let mut c = tiny_config();
        c.encoder = EncoderKind::Dense;
        c.token_count = 5;
        assert!(c.validate().is_ok(), "token_count is irrelevant without attention");
    }

    #[test]
    fn encode_shapes_and_eval_determinism() {
        let mut rng = RngState::new(11);
        let model = GeneMoeModel::new(tiny_config(), &mut rng).unwrap();
        let x = rng.sample_gaussian(vec![4, 12], 0.5, 0.3).unwrap();
        let mut g1 = Graph::new();
        let xv = g1.constant(&x).unwrap();
        let e1 = model.encode(&mut g1, &model.store, xv, None).unwrap();
        assert_eq!(g1.tape.shape(e1.mu), (4, 5));
        assert_eq!(g1.tape.shape(e1.log_sigma), (4, 5));
        assert_eq!(e1.gates.len(), 2);
        let mut g2 = Graph::new();
        let xv2 = g2.constant(&x).unwrap();
        let e2 = model.encode(&mut g2, &model.store, xv2, None).unwrap();
        assert_eq!(g1.tape.value(e1.mu), g2.tape.value(e2.mu));
        assert_eq!(g1.tape.value(e1.backbone), g2.tape.value(e2.backbone));
    }

    #[test]
    fn identical_rows_give_identical_mu() {
        let mut rng = RngState::new(13);
        let model = GeneMoeModel::new(tiny_config(), &mut rng).unwrap();
        let row: Vec<f64> = (0..12).map(|i| 0.05 * i as f64).collect();
        let mut vals = row.clone();
        vals.extend_from_slice(&row);
        let x = Tensor::new(vec![2, 12], vals).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(&x).unwrap();
        let e = model.encode(&mut g, &model.store, xv, None).unwrap();
        let mu = g.tape.value(e.mu);
        assert_eq!(&mu[..5], &mu[5..]);
    }

    #[test]
    fn wrong_input_width_is_a_config_error() {
        let mut rng = RngState::new(15);
        let model = GeneMoeModel::new(tiny_config(), &mut rng).unwrap();
        let x = rng.sample_gaussian(vec![2, 7], 0.0, 1.0).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(&x).unwrap();
        assert!(matches!(
            model.encode(&mut g, &model.store, xv, None),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn encoder_kinds_change_gate_count() {
        for (kind, gates) in [
            (EncoderKind::Dense, 0usize),
            (EncoderKind::Moe, 1),
            (EncoderKind::MoeMoae, 2),
        ] {
            let mut rng = RngState::new(17);
            let mut cfg = tiny_config();
            cfg.encoder = kind;
            let model = GeneMoeModel::new(cfg, &mut rng).unwrap();
            assert_eq!(model.gated_layer_count(), gates);
            let x = rng.sample_gaussian(vec![2, 12], 0.5, 0.2).unwrap();
            let mut g = Graph::new();
            let xv = g.constant(&x).unwrap();
            let e = model.encode(&mut g, &model.store, xv, None).unwrap();
            assert_eq!(e.gates.len(), gates);
        }
    }

    #[test]
    fn reparameterize_eval_is_mu() {
        let mut g = Graph::new();
        let mu = g.leaf(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], false).unwrap();
        let ls = g.leaf(2, 3, vec![0.0; 6], false).unwrap();
        let z = reparameterize(&mut g, mu, ls, None).unwrap();
        assert_eq!(z, mu);
    }

    #[test]
    fn reparameterize_sample_variance() {
        let mut rng = RngState::new(23);
        let n = 10_000;
        let mut g = Graph::new();
        let mu = g.leaf(n, 1, vec![0.0; n], false).unwrap();
        let ls = g.leaf(n, 1, vec![0.0; n], false).unwrap();
        let z = reparameterize(&mut g, mu, ls, Some(&mut rng)).unwrap();
        let v = g.tape.value(z);
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!((var - 1.0).abs() < 0.05, "sample variance {var}");
    }

    #[test]
    fn reparameterize_variance_floor() {
        let mut rng = RngState::new(29);
        let mut g = Graph::new();
        let mu = g.leaf(1, 2, vec![0.3, -0.4], false).unwrap();
        let ls = g.leaf(1, 2, vec![-1e9, -1e9], false).unwrap();
        let z = reparameterize(&mut g, mu, ls, Some(&mut rng)).unwrap();
        let v = g.tape.value(z);
        assert!((v[0] - 0.3).abs() < 1e-4 && (v[1] + 0.4).abs() < 1e-4);
        assert_ne!(v, &[0.3, -0.4], "floored sigma still jitters");
    }

    #[test]
    fn kl_reference_values() {
        let cases = [
            (0.0, 0.0, 0.0),
            (1.0, 0.0, 1.0),
            (0.0, std::f64::consts::LN_2, 3.0 - 4.0f64.ln()),
        ];
        for (mu, ls, want) in cases {
            let mut g = Graph::new();
            let m = g.leaf(1, 1, vec![mu], false).unwrap();
            let l = g.leaf(1, 1, vec![ls], false).unwrap();
            let kl = kl_loss(&mut g, m, l).unwrap();
            let got = g.scalar_value(kl).unwrap();
            assert!((got - want).abs() < 1e-12, "kl({mu},{ls}) = {got}, want {want}");
        }
    }

    #[test]
    fn kl_nonnegative_random() {
        let mut rng = RngState::new(31);
        for _ in 0..50 {
            let mu = rng.sample_gaussian(vec![3, 4], 0.0, 2.0).unwrap();
            let ls = rng.sample_gaussian(vec![3, 4], 0.0, 1.5).unwrap();
            let mut g = Graph::new();
            let m = g.constant(&mu).unwrap();
            let l = g.constant(&ls).unwrap();
            let kl = kl_loss(&mut g, m, l).unwrap();
            assert!(g.scalar_value(kl).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn l1_reference_values() {
        let mut g = Graph::new();
        let a = g.leaf(2, 2, vec![0.1, 0.2, 0.3, 0.4], false).unwrap();
        let same = g.leaf(2, 2, vec![0.1, 0.2, 0.3, 0.4], false).unwrap();
        let l = l1_recon_loss(&mut g, a, same).unwrap();
        assert_eq!(g.scalar_value(l).unwrap(), 0.0);
        let shifted = g.add_scalar(a, 0.5).unwrap();
        let l = l1_recon_loss(&mut g, shifted, a).unwrap();
        assert!((g.scalar_value(l).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn l1_matches_brute_force() {
        let mut rng = RngState::new(37);
        let a = rng.sample_gaussian(vec![3, 5], 0.0, 1.0).unwrap();
        let b = rng.sample_gaussian(vec![3, 5], 0.0, 1.0).unwrap();
        let want = a
            .values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / 15.0;
        let mut g = Graph::new();
        let av = g.constant(&a).unwrap();
        let bv = g.constant(&b).unwrap();
        let l = l1_recon_loss(&mut g, av, bv).unwrap();
        assert!((g.scalar_value(l).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn decoder_output_in_unit_interval() {
        let mut rng = RngState::new(41);
        let model = GeneMoeModel::new(tiny_config(), &mut rng).unwrap();
        let z = rng.sample_gaussian(vec![6, 5], 0.0, 3.0).unwrap();
        let mut g = Graph::new();
        let zv = g.constant(&z).unwrap();
        let recon = model.decode(&mut g, &model.store, zv).unwrap();
        assert!(g.tape.value(recon).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn critic_input_gradient_matches_finite_differences() {
        let mut rng = RngState::new(43);
        let model = GeneMoeModel::new(tiny_config(), &mut rng).unwrap();
        let u = rng.sample_gaussian(vec![2, 12], 0.0, 1.0).unwrap();
        let mut g = Graph::new();
        let uv = g.constant(&u).unwrap();
        let (_, grad) = model
            .critic
            .forward_with_input_gradient(&mut g, &model.store, uv)
            .unwrap();
        let analytic = g.tape.value(grad).to_vec();
        let eps = 1e-6;
        for i in 0..u.values.len() {
            let eval = |val: f64| {
                let mut probe = u.clone();
                probe.values[i] = val;
                let mut g = Graph::new();
                let pv = g.constant(&probe).unwrap();
                let out = model.critic_forward(&mut g, &model.store, pv, true).unwrap();
                g.tape.value(out)[i / 12]
            };
            let fd = (eval(u.values[i] + eps) - eval(u.values[i] - eps)) / (2.0 * eps);
            assert!(
                (analytic[i] - fd).abs() <= 1e-5 * analytic[i].abs().max(1.0),
                "coordinate {i}: analytic {} vs fd {fd}",
                analytic[i]
            );
        }
    }

    #[test]
    fn gradient_penalty_linear_critic_oracles() {
        // A linear critic with unit-norm weights has unit input gradient
        // everywhere, so the penalty vanishes; doubling the weights gives
        // (2 - 1)^2 = 1.
        for (scale, want) in [(1.0, 0.0), (2.0, 1.0)] {
            let mut rng = RngState::new(47);
            let mut cfg = tiny_config();
            cfg.critic_hidden = vec![];
            let mut model = GeneMoeModel::new(cfg, &mut rng).unwrap();
            let wid = model.store.id("critic.layer0.weight").unwrap();
            let w = model.store.tensor_mut(wid);
            let norm = w.values.iter().map(|v| v * v).sum::<f64>().sqrt();
            w.values.iter_mut().for_each(|v| *v *= scale / norm);
            let real = rng.sample_gaussian(vec![4, 12], 0.5, 0.2).unwrap();
            let fake = rng.sample_gaussian(vec![4, 12], 0.5, 0.2).unwrap();
            let mut g = Graph::new();
            let rv = g.constant(&real).unwrap();
            let fv = g.constant(&fake).unwrap();
            let gp = model
                .gradient_penalty(&mut g, &model.store, rv, fv, &mut rng)
                .unwrap();
            let got = g.scalar_value(gp).unwrap();
            assert!((got - want).abs() < 1e-9, "scale {scale}: gp {got}, want {want}");
        }
    }

    #[test]
    fn gradient_penalty_rejects_single_row() {
        let mut rng = RngState::new(53);
        let model = GeneMoeModel::new(tiny_config(), &mut rng).unwrap();
        let x = rng.sample_gaussian(vec![1, 12], 0.5, 0.2).unwrap();
        let mut g = Graph::new();
        let rv = g.constant(&x).unwrap();
        let fv = g.constant(&x).unwrap();
        assert!(matches!(
            model.gradient_penalty(&mut g, &model.store, rv, fv, &mut rng),
            Err(CoreError::Contract(_))
        ));
    }

    #[test]
    fn gradient_penalty_gradient_in_critic_weights() {
        // The penalty is built from first-order ops, so its gradient in the
        // critic weights must agree with finite differences.
        let mut rng = RngState::new(59);
        let mut model = GeneMoeModel::new(tiny_config(), &mut rng).unwrap();
        let real = rng.sample_gaussian(vec![3, 12], 0.5, 0.2).unwrap();
        let fake = rng.sample_gaussian(vec![3, 12], 0.5, 0.2).unwrap();
        let base = rng.clone();
        let ids = model.critic_param_ids();
        let mut store = std::mem::replace(&mut model.store, ParamStore::new());
        let err = check_gradients(&mut store, &ids, 1e-6, |g, s| {
            let mut frozen = base.clone();
            let rv = g.constant(&real)?;
            let fv = g.constant(&fake)?;
            model.gradient_penalty(g, s, rv, fv, &mut frozen)
        })
        .unwrap();
        assert!(err < 1e-4, "max relative gradient error {err}");
    }

    #[test]
    fn generator_loss_gradient_check() {
        let mut rng = RngState::new(61);
        let mut model = GeneMoeModel::new(tiny_config(), &mut rng).unwrap();
        let x = rng.sample_gaussian(vec![3, 12], 0.5, 0.2).unwrap();
        let base = rng.clone();
        let ids = model.generator_param_ids();
        let mut store = std::mem::replace(&mut model.store, ParamStore::new());
        let err = check_gradients(&mut store, &ids, 1e-5, |g, s| {
            let mut frozen = base.clone();
            let out = model.generator_loss(g, s, &x, &x, &mut frozen)?;
            Ok(out.total)
        })
        .unwrap();
        assert!(err < 1e-4, "max relative gradient error {err}");
    }

    #[test]
    fn breakdown_recomposes_exactly() {
        let mut rng = RngState::new(67);
        let model = GeneMoeModel::new(tiny_config(), &mut rng).unwrap();
        let x = rng.sample_gaussian(vec![4, 12], 0.5, 0.2).unwrap();
        let bd = model.loss_breakdown(&model.store, &x, &x, &mut rng).unwrap();
        assert_eq!(bd.total, bd.recompose(&model.config));
        assert!(bd.gp >= 0.0 && bd.kl >= 0.0 && bd.l1 >= 0.0);
    }

    #[test]
    fn zero_lambdas_leave_only_the_adversarial_term() {
        let mut rng = RngState::new(71);
        let mut cfg = tiny_config();
        cfg.lambda_kl = 0.0;
        cfg.lambda_l1 = 0.0;
        cfg.lambda_balance = 0.0;
        let model = GeneMoeModel::new(cfg, &mut rng).unwrap();
        let x = rng.sample_gaussian(vec![3, 12], 0.5, 0.2).unwrap();
        let bd = model.loss_breakdown(&model.store, &x, &x, &mut rng).unwrap();
        assert_eq!(bd.total, bd.gan_g);
    }
}
