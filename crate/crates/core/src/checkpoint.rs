//! Binary checkpoint format.
//!
//! Layout (little endian): magic `SDRDCKPT`, u32 version, u64 epoch, u64
//! step, u64 seed, u64 Adam step count, 8-byte config hash, encoder
//! reference (u8 tag then u64 seed or 32-byte file hash), u32-prefixed config
//! TOML, u32 tensor record count and records (u16-prefixed name, u8 rank,
//! u32 dims, f32 payload), u32 batch-norm layer count with (name, u64 update
//! count) pairs, u8 bank flag with optional bank entries, and `END!`.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::contrastive::{EncoderRef, Origin};
use crate::data::RainField;
use crate::error::{Error, Result};
use crate::model::DerainModel;
use crate::nn::BnRunning;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SDRDCKPT";
const END: &[u8; 4] = b"END!";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps (including skipped unlabeled ones).
    pub step: u64,
    pub encoder: EncoderRef,
    pub params: Vec<(String, Tensor)>,
    pub bn: Vec<BnRunning>,
    pub adam_t: u64,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub bank: Option<Vec<(RainField, Origin)>>,
}

/// First 8 bytes of SHA-256 over the config's TOML text.
pub fn config_hash(cfg: &TrainConfig) -> Result<[u8; 8]> {
    Ok(text_hash(&cfg.to_toml()?))
}

fn text_hash(text: &str) -> [u8; 8] {
    let digest = Sha256::digest(text.as_bytes());
    let mut h = [0u8; 8];
    h.copy_from_slice(&digest[..8]);
    h
}

impl Checkpoint {
    /// Rebuild the model and overwrite its parameters and batch-norm state.
    pub fn model(&self) -> Result<DerainModel> {
        let mut model = DerainModel::new(&self.config.model)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, value) in &self.params {
            let id = model
                .store
                .find(name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            if model.store.get(id).shape() != value.shape() {
                return Err(Error::Format(format!("parameter {name} has the wrong shape")));
            }
            *model.store.get_mut(id) = value.clone();
        }
        if model.bn.layers.len() != self.bn.len() {
            return Err(Error::Format("batch-norm layer count mismatch".into()));
        }
        for (dst, src) in model.bn.layers.iter_mut().zip(&self.bn) {
            if dst.name != src.name || dst.mean.len() != src.mean.len() {
                return Err(Error::Format(format!("batch-norm layer {} mismatch", src.name)));
            }
            *dst = src.clone();
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, CHECKPOINT_VERSION);
        for v in [self.epoch, self.step, self.config.seed, self.adam_t] {
            put_u64(&mut w, v);
        }
        let toml = self.config.to_toml()?;
        w.extend_from_slice(&text_hash(&toml));
        match self.encoder {
            EncoderRef::Seed(s) => {
                w.push(0);
                put_u64(&mut w, s);
            }
            EncoderRef::File(h) => {
                w.push(1);
                w.extend_from_slice(&h);
            }
        }
        put_u32(&mut w, toml.len() as u32);
        w.extend_from_slice(toml.as_bytes());

        let mut records: Vec<(String, &Tensor)> = Vec::new();
        for (name, t) in &self.params {
            records.push((format!("param/{name}"), t));
        }
        for ((name, _), t) in self.params.iter().zip(&self.adam_m) {
            records.push((format!("adam_m/{name}"), t));
        }
        for ((name, _), t) in self.params.iter().zip(&self.adam_v) {
            records.push((format!("adam_v/{name}"), t));
        }
        let bn_tensors: Vec<(String, Tensor)> = self
            .bn
            .iter()
            .flat_map(|l| {
                let c = l.mean.len();
                [
                    (format!("bn_mean/{}", l.name), Tensor::from_vec([1, c, 1, 1], l.mean.clone())),
                    (format!("bn_var/{}", l.name), Tensor::from_vec([1, c, 1, 1], l.var.clone())),
                ]
            })
            .map(|(n, t)| t.map(|t| (n, t)))
            .collect::<Result<_>>()?;
        for (n, t) in &bn_tensors {
            records.push((n.clone(), t));
        }
        put_u32(&mut w, records.len() as u32);
        for (name, t) in records {
            put_u16(&mut w, name.len() as u16);
            w.extend_from_slice(name.as_bytes());
            w.push(4);
            for d in t.shape() {
                put_u32(&mut w, d as u32);
            }
            put_f32s(&mut w, t.data());
        }

        put_u32(&mut w, self.bn.len() as u32);
        for l in &self.bn {
            put_u16(&mut w, l.name.len() as u16);
            w.extend_from_slice(l.name.as_bytes());
            put_u64(&mut w, l.updates);
        }

        match &self.bank {
            None => w.push(0),
            Some(entries) => {
                w.push(1);
                put_u32(&mut w, entries.len() as u32);
                for (r, o) in entries {
                    w.push(match o {
                        Origin::Synthetic => 0,
                        Origin::Real => 1,
                    });
                    put_u32(&mut w, r.height() as u32);
                    put_u32(&mut w, r.width() as u32);
                    put_f32s(&mut w, r.data());
                }
            }
        }
        w.extend_from_slice(END);
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader(bytes);
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let epoch = r.u64()?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let adam_t = r.u64()?;
        let hash: [u8; 8] = r.take(8)?.try_into().expect("8 bytes");
        let encoder = match r.u8()? {
            0 => EncoderRef::Seed(r.u64()?),
            1 => EncoderRef::File(r.take(32)?.try_into().expect("32 bytes")),
            t => return Err(Error::Format(format!("unknown encoder tag {t}"))),
        };
        let n = r.u32()? as usize;
        let toml = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Format("config is not UTF-8".into()))?;
        let config = TrainConfig::from_toml(toml)
            .map_err(|e| Error::Format(format!("embedded config: {e}")))?;
        if text_hash(toml) != hash {
            return Err(Error::Format("config hash mismatch".into()));
        }
        if config.seed != seed {
            return Err(Error::Format("seed disagrees with embedded config".into()));
        }

        let count = r.u32()? as usize;
        let mut params = Vec::new();
        let mut adam_m = Vec::new();
        let mut adam_v = Vec::new();
        let mut bn_mean = Vec::new();
        let mut bn_var = Vec::new();
        for _ in 0..count {
            let name = r.name()?;
            let rank = r.u8()?;
            if rank != 4 {
                return Err(Error::Format(format!("record {name} has rank {rank}")));
            }
            let shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
            let data = r.f32s(shape.iter().product())?;
            let t = Tensor::from_vec(shape, data)?;
            let (kind, key) = name
                .split_once('/')
                .ok_or_else(|| Error::Format(format!("bad record name {name}")))?;
            match kind {
                "param" => params.push((key.to_string(), t)),
                "adam_m" => adam_m.push(t),
                "adam_v" => adam_v.push(t),
                "bn_mean" => bn_mean.push((key.to_string(), t.into_vec())),
                "bn_var" => bn_var.push(t.into_vec()),
                _ => return Err(Error::Format(format!("unknown record kind {kind}"))),
            }
        }
        if adam_m.len() != params.len() || adam_v.len() != params.len() {
            return Err(Error::Format("optimizer state does not match parameters".into()));
        }

        let nbn = r.u32()? as usize;
        if nbn != bn_mean.len() || nbn != bn_var.len() {
            return Err(Error::Format("batch-norm records incomplete".into()));
        }
        let mut bn = Vec::with_capacity(nbn);
        for ((name, mean), var) in bn_mean.into_iter().zip(bn_var) {
            let n2 = r.name()?;
            if n2 != name {
                return Err(Error::Format(format!("batch-norm order mismatch at {name}")));
            }
            bn.push(BnRunning {
                name,
                mean,
                var,
                updates: r.u64()?,
            });
        }

        let bank = match r.u8()? {
            0 => None,
            1 => {
                let n = r.u32()? as usize;
                let mut entries = Vec::with_capacity(n);
                for _ in 0..n {
                    let origin = match r.u8()? {
                        0 => Origin::Synthetic,
                        1 => Origin::Real,
                        t => return Err(Error::Format(format!("unknown origin tag {t}"))),
                    };
                    let h = r.u32()? as usize;
                    let w = r.u32()? as usize;
                    let field = RainField::new(h, w, r.f32s(3 * h * w)?)
                        .map_err(|e| Error::Format(format!("bank entry: {e}")))?;
                    entries.push((field, origin));
                }
                Some(entries)
            }
            t => return Err(Error::Format(format!("bad bank flag {t}"))),
        };
        if r.take(4)? != END || !r.0.is_empty() {
            return Err(Error::Format("missing end marker".into()));
        }
        Ok(Checkpoint {
            config,
            epoch,
            step,
            encoder,
            params,
            bn,
            adam_t,
            adam_m,
            adam_v,
            bank,
        })
    }
}

/// Write via a temporary sibling file and rename, so readers never see a
/// partial checkpoint.
pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ck.to_bytes()?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

fn put_u16(w: &mut Vec<u8>, v: u16) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(w: &mut Vec<u8>, data: &[f64]) {
    for &v in data {
        w.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("record name is not UTF-8".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("record too large".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}
