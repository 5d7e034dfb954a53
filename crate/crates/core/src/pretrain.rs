//! Adversarial pre-training: Gaussian augmentation, alternating critic and
//! generator updates under a linear learning-rate decay, with newline-
//! delimited JSON epoch logs and periodic checkpoints.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::graph::Graph;
use crate::autodiff::rng::RngState;
use crate::autodiff::tensor::Tensor;
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::error::{CoreError, Result};
use crate::model::{GeneMoeModel, LossBreakdown};
use crate::optim::Adam;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub critic_steps: usize,
    /// Epoch at which the linear decay starts; defaults to epochs / 2.
    pub decay_start: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0 disables periodic saves).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            epochs: 200,
            batch_size: 256,
            critic_steps: 5,
            decay_start: None,
            beta1: 0.5,
            beta2: 0.9,
            seed: 42,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn decay_start_epoch(&self) -> usize {
        self.decay_start.unwrap_or(self.epochs / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CoreError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(CoreError::Config(
                "batch_size must be at least 2 (interpolation needs pairs)".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(CoreError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.critic_steps == 0 {
            return Err(CoreError::Config("critic_steps must be at least 1".into()));
        }
        if self.decay_start_epoch() > self.epochs {
            return Err(CoreError::Config(format!(
                "decay_start {} exceeds epochs {}",
                self.decay_start_epoch(),
                self.epochs
            )));
        }
        Ok(())
    }
}

/// Constant learning rate up to the decay knee, then linear decay that
/// would reach zero one epoch past the end.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(CoreError::Contract(format!(
            "epoch {epoch} out of range (0..{})",
            cfg.epochs
        )));
    }
    let knee = cfg.decay_start_epoch();
    if epoch < knee {
        Ok(cfg.learning_rate)
    } else {
        let remaining = (cfg.epochs - epoch) as f64;
        Ok(cfg.learning_rate * remaining / (cfg.epochs - knee) as f64)
    }
}

/// x plus i.i.d. Gaussian noise; deliberately not clamped, the encoder must
/// tolerate slightly out-of-range inputs.
pub fn augment(x: &Tensor, rng: &mut RngState, noise_sigma: f64) -> Result<Tensor> {
    if noise_sigma == 0.0 {
        return Ok(x.clone());
    }
    let noise = rng.sample_gaussian(x.shape.clone(), 0.0, noise_sigma)?;
    let values = x
        .values
        .iter()
        .zip(&noise.values)
        .map(|(a, b)| a + b)
        .collect();
    Tensor::new(x.shape.clone(), values)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub losses: LossBreakdown,
    /// Mean gate mass per expert, one vector per gated layer.
    pub importance: Vec<Vec<f64>>,
    pub generator_steps: usize,
    pub critic_steps: usize,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// One JSON object per epoch. Wall time is skipped so the bytes are a
    /// pure function of seed, config and data.
    pub fn to_ndjson(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn gather_rows(data: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let cols = data.shape[1];
    let mut values = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        values.extend_from_slice(&data.values[i * cols..(i + 1) * cols]);
    }
    Tensor::new(vec![idx.len(), cols], values)
}

pub(crate) fn ensure_finite(term: &str, value: f64, epoch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(CoreError::Numeric {
            term: term.to_string(),
            epoch,
        })
    }
}

/// Run the full adversarial loop, mutating the model weights in place.
/// Per batch: `critic_steps` critic updates against fresh frozen
/// reconstructions, then one generator update on the total objective.
pub fn pretrain(
    model: &mut GeneMoeModel,
    data: &Tensor,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate()?;
    let (n, d) = data.dims2()?;
    if d != model.config.input_dim {
        return Err(CoreError::Config(format!(
            "data has {d} genes, model expects {}",
            model.config.input_dim
        )));
    }
    if cfg.batch_size > n {
        return Err(CoreError::Config(format!(
            "batch_size {} exceeds dataset size {n}",
            cfg.batch_size
        )));
    }
    if !data.values.iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(CoreError::Contract(
            "training data must be min-max normalized to [0, 1]".into(),
        ));
    }

    let mut rng = RngState::new(cfg.seed);
    let mut adam_g = Adam::new(cfg.beta1, cfg.beta2);
    let mut adam_d = Adam::new(cfg.beta1, cfg.beta2);
    let gen_ids = model.generator_param_ids();
    let critic_ids = model.critic_param_ids();
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_schedule(epoch, cfg)?;
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);

        let mut sums = LossBreakdown {
            gan_g: 0.0,
            gan_d: 0.0,
            gp: 0.0,
            kl: 0.0,
            l1: 0.0,
            importance: 0.0,
            load: 0.0,
            total: 0.0,
        };
        let mut importance_sums: Vec<Vec<f64>> = Vec::new();
        let mut gen_steps = 0usize;
        let mut critic_steps = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let x = gather_rows(data, chunk)?;
            let x_hat = augment(&x, &mut rng, model.config.noise_sigma)?;
            let target = if model.config.reconstruct_clean { &x } else { &x_hat };

            for _ in 0..cfg.critic_steps {
                // Fresh reconstruction with the generator held fixed.
                let mut roll = Graph::new();
                let pass = model.generator_forward(&mut roll, &model.store, &x_hat, Some(&mut rng))?;
                let recon = roll.detach(pass.recon);
                drop(roll);

                model.store.zero_grads();
                let mut g = Graph::new();
                let loss = model.critic_loss(&mut g, &model.store, &x_hat, &recon, &mut rng)?;
                ensure_finite("gan_d", loss.gan_d, epoch)?;
                ensure_finite("gp", loss.gp, epoch)?;
                g.backward(loss.total)?;
                g.write_grads(&mut model.store)?;
                adam_d.step(&mut model.store, &critic_ids, lr)?;
                sums.gan_d += loss.gan_d;
                sums.gp += loss.gp;
                critic_steps += 1;
            }

            model.store.zero_grads();
            let mut g = Graph::new();
            let loss = model.generator_loss(&mut g, &model.store, &x_hat, target, &mut rng)?;
            for (term, v) in [
                ("gan_g", loss.gan_g),
                ("kl", loss.kl),
                ("l1", loss.l1),
                ("importance", loss.importance),
                ("load", loss.load),
                ("total", loss.total_value),
            ] {
                ensure_finite(term, v, epoch)?;
            }
            let gate_mass = loss.gate_mass.clone();
            g.backward(loss.total)?;
            g.write_grads(&mut model.store)?;
            adam_g.step(&mut model.store, &gen_ids, lr)?;
            sums.gan_g += loss.gan_g;
            sums.kl += loss.kl;
            sums.l1 += loss.l1;
            sums.importance += loss.importance;
            sums.load += loss.load;
            sums.total += loss.total_value;
            gen_steps += 1;

            if importance_sums.is_empty() {
                importance_sums = gate_mass;
            } else {
                for (acc, v) in importance_sums.iter_mut().zip(&gate_mass) {
                    for (a, b) in acc.iter_mut().zip(v) {
                        *a += b;
                    }
                }
            }
        }

        let gn = gen_steps.max(1) as f64;
        let cn = critic_steps.max(1) as f64;
        let losses = LossBreakdown {
            gan_g: sums.gan_g / gn,
            gan_d: sums.gan_d / cn,
            gp: sums.gp / cn,
            kl: sums.kl / gn,
            l1: sums.l1 / gn,
            importance: sums.importance / gn,
            load: sums.load / gn,
            total: sums.total / gn,
        };
        for v in importance_sums.iter_mut().flat_map(|v| v.iter_mut()) {
            *v /= gn;
        }
        log.epochs.push(EpochLog {
            epoch,
            learning_rate: lr,
            losses,
            importance: importance_sums,
            generator_steps: gen_steps,
            critic_steps,
            wall_time_secs: started.elapsed().as_secs_f64(),
        });

        if let Some(dir) = checkpoint_dir {
            let due = cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
            if due || epoch + 1 == cfg.epochs {
                let mut ckpt = Checkpoint::new(
                    CheckpointKind::Pretrain,
                    model.config.clone(),
                    (epoch + 1) as u64,
                    &rng,
                );
                ckpt.capture_store(&model.store);
                ckpt.add_optimizer("generator", adam_g.export_state(&model.store));
                ckpt.add_optimizer("critic", adam_d.export_state(&model.store));
                ckpt.write(&dir.join(format!("checkpoint_epoch{:04}.ckpt", epoch + 1)))?;
            }
        }
    }
    Ok(log)
}
