//! The trainable model (embedding, recovery decoder, group head), training logs and
//! the binary checkpoint format.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{EmbeddingConfig, RelationNet};
use crate::error::{Error, Result};
use crate::features::CoordMode;
use crate::nn::Params;
use crate::prediction::{GroupHead, StackAttConfig};
use crate::simulator::RecoveryHead;

pub const PHI_PREFIX: &str = "phi.";
pub const RECOVERY_PREFIX: &str = "bs.";
pub const HEAD_PREFIX: &str = "head.";

const MAGIC: &[u8; 8] = b"SHGDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Derives a child seed from a base seed and a path of integers (splitmix64 mixing).
pub fn mix_seed(seed: u64, path: &[u64]) -> u64 {
    let mut x = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in path {
        x = x.wrapping_add(p.wrapping_mul(0xbf58_476d_1ce4_e5b9)).wrapping_add(0x9e37_79b9_7f4a_7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
    }
    x
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embedding: EmbeddingConfig,
    pub attention: StackAttConfig,
    /// Clip length T; the recovery decoder mixes frames as channels and is tied to it.
    pub frames: usize,
    pub recovery_hidden: usize,
    pub coord_mode: CoordMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding: EmbeddingConfig::default(),
            attention: StackAttConfig::default(),
            frames: 10,
            recovery_hidden: 64,
            coord_mode: CoordMode::Normalized,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.embedding.validate()?;
        self.attention.validate()?;
        if self.frames < self.embedding.temporal_kernel {
            return Err(Error::Config(format!(
                "clip length {} shorter than the temporal kernel {}",
                self.frames, self.embedding.temporal_kernel
            )));
        }
        if self.recovery_hidden == 0 {
            return Err(Error::Config("recovery_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// What happened to the weights so far; stored in checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub init_seed: u64,
    pub pretrained: bool,
    pub stage1: Option<serde_json::Value>,
    pub stage2: Option<serde_json::Value>,
    /// SHA-256 of the embedding weights loaded from a stage-1 checkpoint, if any.
    pub stage1_phi_hash: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Params,
    pub phi: RelationNet,
    pub bs: RecoveryHead,
    pub head: GroupHead,
    pub provenance: Provenance,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = RelationNet::new(cfg.embedding.clone(), &mut params, PHI_PREFIX, &mut rng)?;
        let bs = RecoveryHead::new(cfg.embedding.embed_dim, cfg.recovery_hidden, cfg.frames, &mut params, RECOVERY_PREFIX, &mut rng);
        let head = GroupHead::new(cfg.attention.clone(), cfg.embedding.embed_dim, &mut params, HEAD_PREFIX, &mut rng)?;
        Ok(Self {
            cfg,
            params,
            phi,
            bs,
            head,
            provenance: Provenance {
                init_seed: seed,
                ..Default::default()
            },
        })
    }

    /// SHA-256 over the names and values of every tensor whose name starts with `prefix`.
    pub fn weights_hash(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.params.iter().filter(|(n, _)| n.starts_with(prefix)) {
            h.update(name.as_bytes());
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Copies every tensor under `prefix` from `other` (same architecture required).
    pub fn copy_weights_from(&mut self, other: &Model, prefix: &str) -> Result<()> {
        for id in other.params.ids() {
            let name = other.params.name(id);
            if !name.starts_with(prefix) {
                continue;
            }
            let dst = self
                .params
                .find(name)
                .ok_or_else(|| Error::State(format!("tensor {name} missing in target model")))?;
            let src = other.params.get(id);
            if self.params.get(dst).dim() != src.dim() {
                return Err(Error::State(format!("tensor {name} has a different shape")));
            }
            self.params.get_mut(dst).assign(src);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.cfg.clone(),
            provenance: self.provenance.clone(),
        })?;
        let mut out = Vec::new();
        out.write_all(MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        out.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, v) in self.params.iter() {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(v.nrows() as u64).to_le_bytes())?;
            out.write_all(&(v.ncols() as u64).to_le_bytes())?;
            for x in v.iter() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch; file is truncated or corrupted"));
        }
        let mut r = &body[8..];
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let hlen = read_u64(&mut r)? as usize;
        let header: CheckpointHeader = serde_json::from_slice(take(&mut r, hlen)?)?;
        let mut model = Model::new(header.config, header.provenance.init_seed)?;
        model.provenance = header.provenance;
        let count = read_u32(&mut r)? as usize;
        if count != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {count} tensors, model expects {}",
                model.params.len()
            )));
        }
        for _ in 0..count {
            let nlen = read_u32(&mut r)? as usize;
            let name = String::from_utf8(take(&mut r, nlen)?.to_vec()).map_err(|_| bad("tensor name is not utf-8"))?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let raw = take(&mut r, rows * cols * 8)?;
            let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let id = model
                .params
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            if model.params.get(id).dim() != (rows, cols) {
                return Err(Error::Checkpoint(format!("tensor {name} has shape {rows}x{cols}")));
            }
            *model.params.get_mut(id) = Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes after tensors"));
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    provenance: Provenance,
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Checkpoint("unexpected end of checkpoint".into()));
    }
    let (a, b) = r.split_at(n);
    *r = b;
    Ok(a)
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    take(r, 4)?.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    take(r, 8)?.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub wallclock_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
}

impl TrainReport {
    pub fn push(&mut self, epoch: usize, loss: f64, lr: f64, wallclock_s: f64) {
        self.epochs.push(EpochLog {
            epoch,
            loss,
            lr,
            wallclock_s,
        });
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    /// One `epoch loss lr wallclock_s` line per epoch.
    pub fn to_log(&self) -> String {
        let mut s = String::from("epoch loss lr wallclock_s\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{} {:.8} {:e} {:.3}", e.epoch, e.loss, e.lr, e.wallclock_s);
        }
        s
    }
}
