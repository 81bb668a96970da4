//! Checkpoint file: magic `MMCKPT01`, `u64` step, `u32`-length-prefixed
//! config echo, bank path and 32-byte SHA-256 of the bank snapshot, then
//! `u32` count of named tensors (`u32` name length, UTF-8 name, tensor
//! container).

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::memory::MemoryBank;
use crate::pipeline::nets::{Generator, QueryEncoder};
use crate::pipeline::train::{Model, Trainer};
use crate::tensor::{read_u32, read_u64, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MMCKPT01";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: String,
    pub bank_path: String,
    pub bank_sha256: [u8; 32],
    pub tensors: Vec<(String, Tensor)>,
}

/// SHA-256 of a bank's snapshot bytes.
pub fn bank_digest(bank: &MemoryBank) -> Result<[u8; 32]> {
    let mut buf = Vec::new();
    bank.write_snapshot(&mut buf)?;
    Ok(Sha256::digest(&buf).into())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn read_string<R: Read>(r: &mut R, what: &str) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 1 << 24 {
        return Err(Error::format("checkpoint", format!("{what} length {n} is implausible")));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::format("checkpoint", format!("{what} is not UTF-8")))
}

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, config: &RunConfig, bank_path: &str) -> Result<Self> {
        let mut tensors = Vec::new();
        for ps in [&trainer.model.generator.params, &trainer.model.query.params, &trainer.disc_params] {
            tensors.extend(ps.iter().map(|(n, t)| (n.to_string(), t.clone())));
        }
        Ok(Checkpoint {
            step: trainer.steps_taken(),
            config: config.render(),
            bank_path: bank_path.to_string(),
            bank_sha256: bank_digest(&trainer.bank)?,
            tensors,
        })
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&self.step.to_le_bytes())?;
        write_string(&mut w, &self.config)?;
        write_string(&mut w, &self.bank_path)?;
        w.write_all(&self.bank_sha256)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_string(&mut w, name)?;
            t.write_container(&mut w)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let step = read_u64(&mut r)?;
        let config = read_string(&mut r, "config")?;
        let bank_path = read_string(&mut r, "bank path")?;
        let mut bank_sha256 = [0u8; 32];
        r.read_exact(&mut bank_sha256)?;
        let n = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = read_string(&mut r, "tensor name")?;
            tensors.push((name, Tensor::read_container(&mut r)?));
        }
        Ok(Checkpoint {
            step,
            config,
            bank_path,
            bank_sha256,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read(&bytes[..])
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        c.merge_text(&self.config)?;
        Ok(c)
    }

    /// Rebuilds the inference networks from the config echo and the stored
    /// tensors.
    pub fn model(&self) -> Result<Model> {
        let cfg = self.run_config()?;
        let gen_cfg = cfg.generator_config()?;
        let mut generator = Generator::new(gen_cfg.clone(), 0)?;
        let mut query = QueryEncoder::new(gen_cfg.resolution, cfg.get("model.key_dim")?, 0)?;
        let pick = |prefix: &'static str| self.tensors.iter().filter(move |(n, _)| n.starts_with(prefix));
        let gen_entries: Vec<_> = pick("gen.").collect();
        if gen_entries.len() != generator.params.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} generator tensors, model needs {}", gen_entries.len(), generator.params.len()),
            ));
        }
        generator.params.load_named(gen_entries.into_iter().map(|(n, t)| (n.as_str(), t)))?;
        let q_entries: Vec<_> = pick("query.").collect();
        if q_entries.len() != query.params.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} query tensors, model needs {}", q_entries.len(), query.params.len()),
            ));
        }
        query.params.load_named(q_entries.into_iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(Model { generator, query })
    }

    /// Fails unless `bank` hashes to the recorded digest.
    pub fn verify_bank(&self, bank: &MemoryBank) -> Result<()> {
        let d = bank_digest(bank)?;
        if d != self.bank_sha256 {
            return Err(Error::format(
                "checkpoint",
                format!("bank digest {} does not match recorded {}", hex(&d), hex(&self.bank_sha256)),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::dataset::synth_dataset;

    #[test]
    fn round_trip_and_model_rebuild() {
        let mut cfg = RunConfig::default();
        for kv in [
            "model.resolution=16",
            "model.blocks=2",
            "model.base_channels=4",
            "model.noise_dim=8",
            "model.mapping_width=6",
            "model.wavelet_levels=1",
            "model.key_dim=4",
            "model.disc_channels=2",
            "train.batch=2",
            "memory.capacity=4",
            "degrade.scale_r=2",
        ] {
            cfg.apply_override(kv).unwrap();
        }
        let mut tr = Trainer::new(cfg.generator_config().unwrap(), cfg.train_config().unwrap()).unwrap();
        let data = synth_dataset(4, 16, 0).unwrap();
        tr.train_step(&data).unwrap();
        let ck = Checkpoint::from_trainer(&tr, &cfg, "bank.mmb").unwrap();
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"MMCKPT01");
        let back = Checkpoint::read(&buf[..]).unwrap();
        assert_eq!(back.step, 1);
        assert_eq!(back.bank_path, "bank.mmb");
        back.verify_bank(&tr.bank).unwrap();
        let model = back.model().unwrap();
        for ((n1, a), (n2, b)) in model.generator.params.iter().zip(tr.model.generator.params.iter()) {
            assert_eq!(n1, n2);
            assert!(a.max_abs_diff(b) < 1e-6);
        }
        let mut other = tr.bank.clone();
        other.write(0, &crate::memory::Query::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap(), &crate::wavelet::WaveletCode::zeros(9), 99);
        assert!(back.verify_bank(&other).is_err());
        buf[0] = b'X';
        assert!(Checkpoint::read(&buf[..]).is_err());
    }
}
