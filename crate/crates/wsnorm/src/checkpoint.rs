//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  b"WSNCKPT1"
//! version  u32
//! tensors  u32 count, then per tensor:
//!            name: u32 length + UTF-8 bytes
//!            shape: u32 rank + u64 dims
//!            data: f64 × numel
//! meta     u32 count, then per entry: name (as above) + u64 value
//! sha256   32 bytes over everything above
//! ```
//!
//! The checksum is verified before any parsing; a flipped bit anywhere
//! fails loudly rather than producing a subtly wrong resume.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::train::{TrainConfig, Trainer};

const MAGIC: &[u8; 8] = b"WSNCKPT1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: Vec<(String, u64)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn meta(&self, key: &str) -> Option<u64> {
        self.meta.iter().find(|(k, _)| k == key).map(|&(_, v)| v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            write_name(&mut buf, name);
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (key, value) in &self.meta {
            write_name(&mut buf, key);
            buf.extend_from_slice(&value.to_le_bytes());
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let buf = fs::read(path)?;
        if buf.len() < MAGIC.len() + 4 + 32 {
            return Err(Error::Checkpoint(format!(
                "{}: too short to be a checkpoint",
                path.display()
            )));
        }
        let (body, stored_digest) = buf.split_at(buf.len() - 32);
        let digest = Sha256::digest(body);
        if digest.as_slice() != stored_digest {
            return Err(Error::Checkpoint(format!(
                "{}: checksum mismatch (file corrupted)",
                path.display()
            )));
        }
        let mut r = Reader { buf: body, pos: 0 };
        let magic = r.bytes(8)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: bad magic {magic:?}",
                path.display()
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: format version {version}, this build reads {VERSION}",
                path.display()
            )));
        }
        let n_tensors = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name = r.name()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(r.bytes(8)?.try_into().unwrap()));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let n_meta = r.u32()? as usize;
        let mut meta = Vec::with_capacity(n_meta);
        for _ in 0..n_meta {
            let key = r.name()?;
            meta.push((key, r.u64()?));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!(
                "{}: {} trailing bytes after the meta table",
                path.display(),
                body.len() - r.pos
            )));
        }
        Ok(Checkpoint { tensors, meta })
    }
}

fn write_name(buf: &mut Vec<u8>, name: &str) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint body".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.bytes(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 name in checkpoint".into()))
    }
}

// ---------------------------------------------------------------------------
// Trainer round-trip

/// Snapshots model state, optimizer velocity, and schedule position.
pub fn save_trainer(trainer: &Trainer, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    for name in trainer.model.state_names() {
        let t = trainer.model.state_get(&name).unwrap().clone();
        tensors.push((format!("model.{name}"), t));
    }
    for (i, v) in trainer.velocity.iter().enumerate() {
        tensors.push((format!("opt.velocity.{i}"), v.clone()));
    }
    let ckpt = Checkpoint {
        tensors,
        meta: vec![
            ("epoch".into(), trainer.epoch as u64),
            ("step".into(), trainer.step as u64),
            ("seed".into(), trainer.cfg.seed),
        ],
    };
    ckpt.save(path)
}

/// Restores a trainer onto a freshly built model. Every stored tensor must
/// land on a slot of the same name and shape; the first mismatch aborts
/// with its name.
pub fn load_trainer(mut model: Model, cfg: TrainConfig, path: &Path) -> Result<Trainer> {
    let ckpt = Checkpoint::load(path)?;
    let seed = ckpt
        .meta("seed")
        .ok_or_else(|| Error::Checkpoint("missing meta key \"seed\"".into()))?;
    if seed != cfg.seed {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained with seed {seed}, config says {}",
            cfg.seed
        )));
    }
    let mut velocity_entries = Vec::new();
    for (name, t) in &ckpt.tensors {
        if let Some(model_name) = name.strip_prefix("model.") {
            model.state_set(model_name, t.clone()).map_err(|e| match e {
                Error::Checkpoint(msg) => Error::Checkpoint(format!("tensor {name:?}: {msg}")),
                other => other,
            })?;
        } else if let Some(idx) = name.strip_prefix("opt.velocity.") {
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad velocity index in {name:?}")))?;
            velocity_entries.push((idx, t.clone()));
        } else {
            return Err(Error::Checkpoint(format!("unknown tensor {name:?}")));
        }
    }
    // Missing model tensors (e.g. a spec with more layers) surface here.
    for name in model.state_names() {
        if ckpt.tensor(&format!("model.{name}")).is_none() {
            return Err(Error::Checkpoint(format!(
                "checkpoint lacks tensor \"model.{name}\" required by the model spec"
            )));
        }
    }
    let mut trainer = Trainer::new(model, cfg)?;
    if velocity_entries.len() != trainer.velocity.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} velocity buffers, model has {} parameters",
            velocity_entries.len(),
            trainer.velocity.len()
        )));
    }
    velocity_entries.sort_by_key(|&(i, _)| i);
    for (i, v) in velocity_entries {
        if i >= trainer.velocity.len() {
            return Err(Error::Checkpoint(format!("velocity index {i} out of range")));
        }
        if v.shape() != trainer.velocity[i].shape() {
            return Err(Error::Checkpoint(format!(
                "velocity buffer {i}: stored shape {:?}, expected {:?}",
                v.shape(),
                trainer.velocity[i].shape()
            )));
        }
        trainer.velocity[i] = v;
    }
    trainer.epoch = ckpt
        .meta("epoch")
        .ok_or_else(|| Error::Checkpoint("missing meta key \"epoch\"".into()))?
        as usize;
    trainer.step = ckpt
        .meta("step")
        .ok_or_else(|| Error::Checkpoint("missing meta key \"step\"".into()))?
        as usize;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data;
    use crate::model::{build_model, Arch, ModelSpec};
    use crate::norm::NormKind;
    use crate::reparam::ReparamKind;

    #[test]
    fn container_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ckpt = Checkpoint {
            tensors: vec![
                ("w".into(), Tensor::new(vec![2, 2], vec![1.5, -0.25, 3e-300, f64::MIN_POSITIVE]).unwrap()),
                ("b".into(), Tensor::zeros(&[3])),
            ],
            meta: vec![("epoch".into(), 7)],
        };
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.meta("epoch"), Some(7));
        let w = back.tensor("w").unwrap();
        for (a, b) in w.data().iter().zip(ckpt.tensors[0].1.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ckpt = Checkpoint {
            tensors: vec![("w".into(), Tensor::zeros(&[4]))],
            meta: vec![],
        };
        ckpt.save(&path).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        bytes[20] ^= 1;
        fs::write(&path, &bytes).unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");

        // Version bump with a recomputed checksum still fails, on version.
        ckpt.save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 99;
        let body_len = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&digest);
        fs::write(&path, &bytes).unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let mut ds = data::synth_blobs(21, 24, 3).unwrap();
        let m = ds.channel_moments().unwrap();
        ds.standardize(&m);
        let spec = ModelSpec::new(Arch::ConvNet4, NormKind::gn(), ReparamKind::Ws);
        let cfg = TrainConfig {
            lr: 0.05,
            epochs: 2,
            batch_size: 8,
            seed: 13,
            ..TrainConfig::default()
        };

        // Uninterrupted: two epochs.
        let mut straight = Trainer::new(build_model(&spec, cfg.seed).unwrap(), cfg.clone()).unwrap();
        straight.run_epoch(&ds, None).unwrap();
        straight.run_epoch(&ds, None).unwrap();

        // Interrupted: one epoch, save, load, second epoch.
        let mut first = Trainer::new(build_model(&spec, cfg.seed).unwrap(), cfg.clone()).unwrap();
        first.run_epoch(&ds, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep1.ckpt");
        save_trainer(&first, &path).unwrap();
        let mut resumed =
            load_trainer(build_model(&spec, cfg.seed).unwrap(), cfg.clone(), &path).unwrap();
        assert_eq!(resumed.epoch, 1);
        resumed.run_epoch(&ds, None).unwrap();

        for (a, b) in straight.model.convs.iter().zip(&resumed.model.convs) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(straight.model.fc_w.data(), resumed.model.fc_w.data());
        assert_eq!(straight.step, resumed.step);
    }

    #[test]
    fn mismatched_spec_names_first_bad_tensor() {
        let spec = ModelSpec::new(Arch::ConvNet4, NormKind::gn(), ReparamKind::Ws);
        let cfg = TrainConfig {
            seed: 3,
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(build_model(&spec, 3).unwrap(), cfg.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_trainer(&trainer, &path).unwrap();

        // A deeper model misses tensors; the error names one.
        let bigger = ModelSpec::new(Arch::MiniResNet(8), NormKind::gn(), ReparamKind::Ws);
        let err = load_trainer(build_model(&bigger, 3).unwrap(), cfg.clone(), &path)
            .err()
            .unwrap()
            .to_string();
        assert!(err.contains("conv") || err.contains("norm"), "{err}");

        // Wrong seed is refused outright.
        let wrong_seed = TrainConfig { seed: 4, ..cfg };
        let err = load_trainer(build_model(&spec, 3).unwrap(), wrong_seed, &path)
            .err()
            .unwrap()
            .to_string();
        assert!(err.contains("seed"), "{err}");
    }
}
