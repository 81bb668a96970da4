//! Flat `key = value` run configuration with dotted keys.
//!
//! Lines starting with `#` are comments. Every recognized key has a default;
//! unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::degradation::DegradationRanges;
use crate::error::{Error, Result};
use crate::modulation::GateMode;
use crate::nn::AdamConfig;
use crate::objectives::LossWeights;
use crate::pipeline::nets::GeneratorConfig;
use crate::pipeline::train::TrainConfig;

/// Where a default comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    /// Value reported for the published method.
    Published,
    /// Chosen for this implementation.
    ToolDefault,
}

impl Source {
    pub fn label(self) -> &'static str {
        match self {
            Source::Published => "published setting",
            Source::ToolDefault => "tool default",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub source: Source,
    pub help: &'static str,
}

const fn k(key: &'static str, default: &'static str, source: Source, help: &'static str) -> KeySpec {
    KeySpec {
        key,
        default,
        source,
        help,
    }
}

use Source::{Published as P, ToolDefault as T};

pub const KEYS: &[KeySpec] = &[
    k("seed", "0", T, "master seed for every random stream"),
    k("data.count", "64", T, "number of procedural faces"),
    k("data.resolution", "64", T, "side length of procedural faces"),
    k("model.resolution", "64", T, "working resolution of the generator"),
    k("model.blocks", "4", T, "number of RM3 decoder blocks (7 in the full-size model)"),
    k("model.base_channels", "8", T, "feature width at full resolution"),
    k("model.widths", "", T, "comma-separated per-scale widths, full resolution first"),
    k("model.noise_dim", "512", P, "dimension of the input noise vector"),
    k("model.mapping_width", "64", T, "width of the mapping network and noise embeddings"),
    k("model.wavelet_levels", "2", T, "wavelet packet depth n (code length 3*(4^n-1))"),
    k("model.gate", "shared", T, "instance/layer gate resolution: shared or per-channel"),
    k("model.key_dim", "32", T, "memory key (query) dimension"),
    k("model.disc_channels", "8", T, "first-layer width of each patch discriminator"),
    k("train.steps", "2000", T, "number of training steps"),
    k("train.batch", "8", P, "images per step"),
    k("train.lr", "0.0002", P, "Adam learning rate"),
    k("train.beta1", "0.5", P, "Adam first-moment decay"),
    k("train.beta2", "0.999", P, "Adam second-moment decay"),
    k("train.eps", "1e-8", T, "Adam denominator epsilon"),
    k("train.checkpoint_every", "500", T, "steps between checkpoints (0 disables)"),
    k("loss.lambda_rec", "100", P, "weight of the restored-image reconstruction loss"),
    k("loss.lambda_rec_prime", "100", P, "weight of the middle-resolution reconstruction loss"),
    k("loss.lambda_ccx", "1", P, "weight of the component contextual loss"),
    k("loss.adv_weights", "4,2,1,1", P, "discriminator weights at scales 1,2,4,8"),
    k("loss.vgg_weights", "0.03125,0.0625,0.125,0.25,1", P, "perceptual stage weights"),
    k("loss.huber_delta", "0.1", T, "Huber threshold on [-1,1] images"),
    k("memory.capacity", "982", P, "number of memory slots"),
    k("memory.eta", "0.7", P, "KL threshold separating positives from negatives"),
    k("memory.margin", "0.1", P, "triplet margin"),
    k("degrade.scale_r", "0", T, "fixed downsampling factor (0 samples from scale_min..scale_max)"),
    k("degrade.scale_min", "2", P, "smallest downsampling factor"),
    k("degrade.scale_max", "12", P, "largest downsampling factor"),
    k("degrade.noise_min", "1", P, "smallest noise sigma on the 0-255 scale"),
    k("degrade.noise_max", "15", P, "largest noise sigma on the 0-255 scale"),
    k("degrade.jpeg_min", "40", P, "lowest compression quality"),
    k("degrade.jpeg_max", "80", P, "highest compression quality"),
    k("degrade.blur_min", "1", P, "smallest Gaussian blur sigma"),
    k("degrade.blur_max", "5", P, "largest Gaussian blur sigma"),
    k("degrade.motion_min", "3", T, "shortest motion blur"),
    k("degrade.motion_max", "11", T, "longest motion blur"),
    k("degrade.stage_prob", "0.5", T, "probability of each optional degradation stage"),
];

pub fn key_spec(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|s| s.key == key)
}

/// Effective configuration: defaults overlaid by file entries and overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|s| (s.key.to_string(), s.default.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key_spec(key).is_none() {
            return Err(Error::UnknownKey(key.to_string()));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Applies `key = value` lines.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.merge_text(&text)
    }

    /// Applies a single `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn get_str(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownKey(key.to_string()))
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.get_str(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("{key} = {raw:?} is not a valid value")))
    }

    fn list(&self, key: &str) -> Result<Vec<f64>> {
        let raw = self.get_str(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: {s:?} is not a number")))
            })
            .collect()
    }

    /// Sorted `key = value` lines, suitable for echoing into output folders.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn generator_config(&self) -> Result<GeneratorConfig> {
        let gate = match self.get_str("model.gate")? {
            "shared" => GateMode::Shared,
            "per-channel" => GateMode::PerChannel,
            other => return Err(Error::Config(format!("model.gate must be shared or per-channel, got {other:?}"))),
        };
        let widths = self
            .list("model.widths")?
            .into_iter()
            .map(|v| {
                if v >= 1.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Config(format!("model.widths entry {v} is not a positive integer")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = GeneratorConfig {
            resolution: self.get("model.resolution")?,
            block_count: self.get("model.blocks")?,
            base_channels: self.get("model.base_channels")?,
            noise_dim: self.get("model.noise_dim")?,
            mapping_width: self.get("model.mapping_width")?,
            wavelet_levels: self.get("model.wavelet_levels")?,
            widths,
            gate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn degradation_ranges(&self) -> Result<DegradationRanges> {
        let fixed: usize = self.get("degrade.scale_r")?;
        let scale = if fixed > 0 {
            (fixed, fixed)
        } else {
            (self.get("degrade.scale_min")?, self.get("degrade.scale_max")?)
        };
        let r = DegradationRanges {
            scale,
            noise_sigma: (self.get("degrade.noise_min")?, self.get("degrade.noise_max")?),
            jpeg_quality: (self.get("degrade.jpeg_min")?, self.get("degrade.jpeg_max")?),
            gaussian_sigma: (self.get("degrade.blur_min")?, self.get("degrade.blur_max")?),
            motion_length: (self.get("degrade.motion_min")?, self.get("degrade.motion_max")?),
            stage_probability: self.get("degrade.stage_prob")?,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        let adv = self.list("loss.adv_weights")?;
        let vgg = self.list("loss.vgg_weights")?;
        let adv: [f64; 4] = adv
            .try_into()
            .map_err(|_| Error::Config("loss.adv_weights needs 4 entries".into()))?;
        let vgg: [f64; 5] = vgg
            .try_into()
            .map_err(|_| Error::Config("loss.vgg_weights needs 5 entries".into()))?;
        let w = LossWeights {
            lambda_rec: self.get("loss.lambda_rec")?,
            lambda_rec_prime: self.get("loss.lambda_rec_prime")?,
            lambda_ccx: self.get("loss.lambda_ccx")?,
            adv_scale_weights: adv,
            vgg_layer_weights: vgg,
            huber_delta: self.get("loss.huber_delta")?,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = TrainConfig {
            batch: self.get("train.batch")?,
            adam: AdamConfig {
                lr: self.get("train.lr")?,
                beta1: self.get("train.beta1")?,
                beta2: self.get("train.beta2")?,
                eps: self.get("train.eps")?,
            },
            steps: self.get("train.steps")?,
            seed: self.get("seed")?,
            weights: self.loss_weights()?,
            memory_capacity: self.get("memory.capacity")?,
            eta: self.get("memory.eta")?,
            margin: self.get("memory.margin")?,
            degradation: self.degradation_ranges()?,
            key_dim: self.get("model.key_dim")?,
            disc_channels: self.get("model.disc_channels")?,
        };
        t.validate()?;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_valid_configs() {
        let c = RunConfig::default();
        let g = c.generator_config().unwrap();
        assert_eq!((g.resolution, g.block_count, g.noise_dim), (64, 4, 512));
        let t = c.train_config().unwrap();
        assert_eq!(t, TrainConfig::default());
        assert_eq!(c.degradation_ranges().unwrap(), DegradationRanges::default());
    }

    #[test]
    fn file_and_overrides() {
        let mut c = RunConfig::default();
        c.merge_text("# comment\ntrain.lr = 0.001  # inline\n\nmemory.capacity=10\n").unwrap();
        c.apply_override("degrade.scale_r=4").unwrap();
        let t = c.train_config().unwrap();
        assert_eq!(t.adam.lr, 0.001);
        assert_eq!(t.memory_capacity, 10);
        assert_eq!(t.degradation.scale, (4, 4));
        assert!(c.render().contains("memory.capacity = 10\n"));
    }

    #[test]
    fn unknown_and_malformed_rejected() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("train.nope", "1"), Err(Error::UnknownKey(_))));
        assert!(c.merge_text("just words").is_err());
        c.set("train.batch", "eight").unwrap();
        assert!(c.train_config().is_err());
        let mut c = RunConfig::default();
        c.set("loss.adv_weights", "1,2").unwrap();
        assert!(c.loss_weights().is_err());
    }

    #[test]
    fn every_key_has_a_parseable_default() {
        let c = RunConfig::default();
        assert_eq!(c.values.len(), KEYS.len());
        c.generator_config().unwrap();
        c.train_config().unwrap();
    }
}
