//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!   magic "GMOE" | version u32 | kind string | config text | extra text |
//!   epoch u64 | rng (algorithm string, seed u64, word position 2xu64) |
//!   tensor count u32, then per tensor: name, rank u32, dims u64 each,
//!   values f64 each | optimizer count u32, then per optimizer: label,
//!   beta1 f64, beta2 f64, step u64, moment count u32, per moment:
//!   name, length u64, first and second moment arrays.
//!
//! Strings are u32-length-prefixed UTF-8. The config travels as key=value
//! lines with floats in shortest round-trip form, so save/load is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::graph::ParamStore;
use crate::autodiff::rng::{RngState, RNG_ALGORITHM};
use crate::autodiff::tensor::Tensor;
use crate::error::{CoreError, Result};
use crate::model::{EncoderKind, GeneMoeConfig};
use crate::optim::AdamState;

pub const MAGIC: [u8; 4] = *b"GMOE";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Pretrain,
    Survival,
    Classify,
}

impl CheckpointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::Pretrain => "pretrain",
            CheckpointKind::Survival => "survival",
            CheckpointKind::Classify => "classify",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(CheckpointKind::Pretrain),
            "survival" => Ok(CheckpointKind::Survival),
            "classify" => Ok(CheckpointKind::Classify),
            other => Err(CoreError::CheckpointContents(format!(
                "unknown checkpoint kind `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: GeneMoeConfig,
    /// Free-form key=value metadata (head dimensions and the like).
    pub extra: Vec<(String, String)>,
    pub epoch: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    /// Sorted by name.
    pub tensors: Vec<(String, Tensor)>,
    /// Labeled optimizer states, sorted by label.
    pub optimizers: Vec<(String, AdamState)>,
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, config: GeneMoeConfig, epoch: u64, rng: &RngState) -> Self {
        Checkpoint {
            kind,
            config,
            extra: Vec::new(),
            epoch,
            rng_seed: rng.seed(),
            rng_word_pos: rng.word_pos(),
            tensors: Vec::new(),
            optimizers: Vec::new(),
        }
    }

    /// Snapshot every tensor in the store.
    pub fn capture_store(&mut self, store: &ParamStore) {
        self.tensors = store
            .iter()
            .map(|(name, t)| (name.to_string(), t.clone()))
            .collect();
        self.tensors.sort_by(|a, b| a.0.cmp(&b.0));
    }

    pub fn add_optimizer(&mut self, label: &str, state: AdamState) {
        self.optimizers.push((label.to_string(), state));
        self.optimizers.sort_by(|a, b| a.0.cmp(&b.0));
    }

    pub fn extra_value(&self, key: &str) -> Option<&str> {
        self.extra
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn optimizer(&self, label: &str) -> Option<&AdamState> {
        self.optimizers
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, s)| s)
    }

    pub fn restore_rng(&self) -> RngState {
        RngState::restore(self.rng_seed, self.rng_word_pos)
    }

    /// Copy the saved tensors into a store built for the same config. The
    /// name sets must match exactly and every shape must agree.
    pub fn apply_to_store(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(CoreError::CheckpointContents(format!(
                "file has {} tensors, model expects {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, tensor) in &self.tensors {
            let id = store.id(name).ok_or_else(|| {
                CoreError::CheckpointContents(format!("file tensor `{name}` unknown to the model"))
            })?;
            let dst = store.tensor_mut(id);
            if dst.shape != tensor.shape {
                return Err(CoreError::CheckpointShape {
                    name: name.clone(),
                    expected: dst.shape.clone(),
                    found: tensor.shape.clone(),
                });
            }
            dst.values.copy_from_slice(&tensor.values);
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&MAGIC)?;
        put_u32(&mut w, VERSION)?;
        put_str(&mut w, self.kind.as_str())?;
        put_str(&mut w, &config_to_kv(&self.config))?;
        put_str(&mut w, &kv_to_text(&self.extra))?;
        put_u64(&mut w, self.epoch)?;
        put_str(&mut w, RNG_ALGORITHM)?;
        put_u64(&mut w, self.rng_seed)?;
        put_u64(&mut w, (self.rng_word_pos >> 64) as u64)?;
        put_u64(&mut w, self.rng_word_pos as u64)?;
        put_u32(&mut w, self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            put_str(&mut w, name)?;
            put_u32(&mut w, t.shape.len() as u32)?;
            for &d in &t.shape {
                put_u64(&mut w, d as u64)?;
            }
            for &v in &t.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        put_u32(&mut w, self.optimizers.len() as u32)?;
        for (label, s) in &self.optimizers {
            put_str(&mut w, label)?;
            w.write_all(&s.beta1.to_le_bytes())?;
            w.write_all(&s.beta2.to_le_bytes())?;
            put_u64(&mut w, s.step)?;
            put_u32(&mut w, s.moments.len() as u32)?;
            for (name, m, v) in &s.moments {
                put_str(&mut w, name)?;
                put_u64(&mut w, m.len() as u64)?;
                for &x in m {
                    w.write_all(&x.to_le_bytes())?;
                }
                for &x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if magic != MAGIC {
            return Err(CoreError::CheckpointMagic);
        }
        let version = get_u32(&mut r, "version")?;
        if version != VERSION {
            return Err(CoreError::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let kind = CheckpointKind::parse(&get_str(&mut r, "kind")?)?;
        let config = config_from_kv(&get_str(&mut r, "config")?)?;
        let extra = kv_from_text(&get_str(&mut r, "extra")?)?;
        let epoch = get_u64(&mut r, "epoch")?;
        let algorithm = get_str(&mut r, "rng algorithm")?;
        if algorithm != RNG_ALGORITHM {
            return Err(CoreError::CheckpointContents(format!(
                "rng algorithm `{algorithm}` unsupported (expected {RNG_ALGORITHM})"
            )));
        }
        let rng_seed = get_u64(&mut r, "rng seed")?;
        let hi = get_u64(&mut r, "rng word position")?;
        let lo = get_u64(&mut r, "rng word position")?;
        let rng_word_pos = ((hi as u128) << 64) | lo as u128;
        let n_tensors = get_u32(&mut r, "tensor count")?;
        let mut tensors = Vec::with_capacity(n_tensors as usize);
        for _ in 0..n_tensors {
            let name = get_str(&mut r, "tensor name")?;
            let rank = get_u32(&mut r, "tensor rank")?;
            if rank > 8 {
                return Err(CoreError::CheckpointContents(format!(
                    "tensor `{name}` claims rank {rank}"
                )));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            let mut numel = 1usize;
            for _ in 0..rank {
                let d = get_u64(&mut r, "tensor dimension")? as usize;
                numel = numel.checked_mul(d).ok_or_else(|| {
                    CoreError::CheckpointContents(format!("tensor `{name}` dimensions overflow"))
                })?;
                shape.push(d);
            }
            if numel > 100_000_000 {
                return Err(CoreError::CheckpointContents(format!(
                    "tensor `{name}` claims {numel} values"
                )));
            }
            let values = get_f64s(&mut r, numel, "tensor values")?;
            tensors.push((name, Tensor::new(shape, values)?));
        }
        let n_opt = get_u32(&mut r, "optimizer count")?;
        let mut optimizers = Vec::with_capacity(n_opt as usize);
        for _ in 0..n_opt {
            let label = get_str(&mut r, "optimizer label")?;
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b, "optimizer beta1")?;
            let beta1 = f64::from_le_bytes(b);
            read_exact(&mut r, &mut b, "optimizer beta2")?;
            let beta2 = f64::from_le_bytes(b);
            let step = get_u64(&mut r, "optimizer step")?;
            let n_moments = get_u32(&mut r, "moment count")?;
            let mut moments = Vec::with_capacity(n_moments as usize);
            for _ in 0..n_moments {
                let name = get_str(&mut r, "moment name")?;
                let len = get_u64(&mut r, "moment length")? as usize;
                if len > 100_000_000 {
                    return Err(CoreError::CheckpointContents(format!(
                        "moment `{name}` claims {len} values"
                    )));
                }
                let m = get_f64s(&mut r, len, "first moment")?;
                let v = get_f64s(&mut r, len, "second moment")?;
                moments.push((name, m, v));
            }
            optimizers.push((
                label,
                AdamState {
                    beta1,
                    beta2,
                    step,
                    moments,
                },
            ));
        }
        Ok(Checkpoint {
            kind,
            config,
            extra,
            epoch,
            rng_seed,
            rng_word_pos,
            tensors,
            optimizers,
        })
    }
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CoreError::CheckpointTruncated(format!("while reading {what}"))
        } else {
            CoreError::Io(e)
        }
    })
}

fn get_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn get_str<R: Read>(r: &mut R, what: &str) -> Result<String> {
    let len = get_u32(r, what)? as usize;
    if len > 10_000_000 {
        return Err(CoreError::CheckpointContents(format!(
            "{what} claims {len} bytes"
        )));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf, what)?;
    String::from_utf8(buf)
        .map_err(|_| CoreError::CheckpointContents(format!("{what} is not valid utf-8")))
}

fn get_f64s<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    read_exact(r, &mut buf, what)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn kv_to_text(kv: &[(String, String)]) -> String {
    let mut lines: Vec<String> = kv.iter().map(|(k, v)| format!("{k}={v}")).collect();
    lines.sort();
    lines.join("\n")
}

fn kv_from_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CoreError::CheckpointContents(format!("metadata line `{line}` is not key=value"))
        })?;
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn join_dims(dims: &[usize]) -> String {
    dims.iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn config_to_kv(cfg: &GeneMoeConfig) -> String {
    let mut s = String::new();
    use std::fmt::Write as _;
    let _ = writeln!(s, "critic_hidden={}", join_dims(&cfg.critic_hidden));
    let _ = writeln!(s, "dropout={:?}", cfg.dropout);
    let _ = writeln!(s, "encoder={}", cfg.encoder.as_str());
    let _ = writeln!(s, "hidden={}", join_dims(&cfg.hidden));
    let _ = writeln!(s, "input_dim={}", cfg.input_dim);
    let _ = writeln!(s, "lambda_balance={:?}", cfg.lambda_balance);
    let _ = writeln!(s, "lambda_gp={:?}", cfg.lambda_gp);
    let _ = writeln!(s, "lambda_kl={:?}", cfg.lambda_kl);
    let _ = writeln!(s, "lambda_l1={:?}", cfg.lambda_l1);
    let _ = writeln!(s, "latent_dim={}", cfg.latent_dim);
    let _ = writeln!(s, "moae_experts={}", cfg.moae_experts);
    let _ = writeln!(s, "moae_top_k={}", cfg.moae_top_k);
    let _ = writeln!(s, "n_experts={}", cfg.n_experts);
    let _ = writeln!(s, "noise_sigma={:?}", cfg.noise_sigma);
    let _ = writeln!(s, "reconstruct_clean={}", cfg.reconstruct_clean);
    let _ = writeln!(s, "token_count={}", cfg.token_count);
    let _ = writeln!(s, "top_k={}", cfg.top_k);
    s
}

pub fn config_from_kv(text: &str) -> Result<GeneMoeConfig> {
    let mut cfg = GeneMoeConfig::default();
    let bad = |key: &str, v: &str| {
        CoreError::CheckpointContents(format!("config key `{key}` has bad value `{v}`"))
    };
    let mut seen = 0usize;
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CoreError::CheckpointContents(format!("config line `{line}` is not key=value"))
        })?;
        seen += 1;
        match k {
            "critic_hidden" => cfg.critic_hidden = parse_dims(v).ok_or_else(|| bad(k, v))?,
            "dropout" => cfg.dropout = v.parse().map_err(|_| bad(k, v))?,
            "encoder" => cfg.encoder = EncoderKind::parse(v)?,
            "hidden" => cfg.hidden = parse_dims(v).ok_or_else(|| bad(k, v))?,
            "input_dim" => cfg.input_dim = v.parse().map_err(|_| bad(k, v))?,
            "lambda_balance" => cfg.lambda_balance = v.parse().map_err(|_| bad(k, v))?,
            "lambda_gp" => cfg.lambda_gp = v.parse().map_err(|_| bad(k, v))?,
            "lambda_kl" => cfg.lambda_kl = v.parse().map_err(|_| bad(k, v))?,
            "lambda_l1" => cfg.lambda_l1 = v.parse().map_err(|_| bad(k, v))?,
            "latent_dim" => cfg.latent_dim = v.parse().map_err(|_| bad(k, v))?,
            "moae_experts" => cfg.moae_experts = v.parse().map_err(|_| bad(k, v))?,
            "moae_top_k" => cfg.moae_top_k = v.parse().map_err(|_| bad(k, v))?,
            "n_experts" => cfg.n_experts = v.parse().map_err(|_| bad(k, v))?,
            "noise_sigma" => cfg.noise_sigma = v.parse().map_err(|_| bad(k, v))?,
            "reconstruct_clean" => cfg.reconstruct_clean = v.parse().map_err(|_| bad(k, v))?,
            "token_count" => cfg.token_count = v.parse().map_err(|_| bad(k, v))?,
            "top_k" => cfg.top_k = v.parse().map_err(|_| bad(k, v))?,
            other => {
                return Err(CoreError::CheckpointContents(format!(
                    "unknown config key `{other}`"
                )))
            }
        }
    }
    if seen != 17 {
        return Err(CoreError::CheckpointContents(format!(
            "config section has {seen} keys, expected 17"
        )));
    }
    Ok(cfg)
}

fn parse_dims(v: &str) -> Option<Vec<usize>> {
    if v.is_empty() {
        return Some(Vec::new());
    }
    v.split(',').map(|p| p.parse().ok()).collect()
}
