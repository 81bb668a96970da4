//! Training loop: per step a discriminator update, a generator update and a
//! wavelet-memory update (query encoder step followed by bank writes).

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::degradation::{bicubic_resize, degrade, substream_seed, DegradationConfig, DegradationRanges};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::memory::{MemoryBank, Query, UpdateKind, DEFAULT_CAPACITY, DEFAULT_ETA, DEFAULT_MARGIN};
use crate::nn::{accumulate, zero_grads, Adam, AdamConfig, ParamSet};
use crate::objectives::{
    adversarial_losses, component_contextual_loss, component_contextual_on_graph, discriminator_loss_on_graph,
    generator_adv_loss_on_graph, huber, perceptual_loss, perceptual_on_graph, total_loss, CropBox, FeatureNet,
    LossParts, LossWeights, MultiScaleDiscriminator,
};
use crate::pipeline::dataset::ToySample;
use crate::pipeline::nets::{to_signed, upsample_input, Generator, GeneratorConfig, QueryEncoder};
use crate::tensor::Tensor;
use crate::wavelet::{wavelet_style_code, wpd_forward, WaveletCode};

const BATCH_SALT: u64 = 0x6261_7463_6800_0001;
const DEGRADE_SALT: u64 = 0x6465_6772_6164_6502;
const NOISE_SALT: u64 = 0x6e6f_6973_6500_0003;
const EVAL_SALT: u64 = 0x6576_616c_0000_0004;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub adam: AdamConfig,
    pub steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub memory_capacity: usize,
    pub eta: f64,
    pub margin: f64,
    pub degradation: DegradationRanges,
    pub key_dim: usize,
    pub disc_channels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 8,
            adam: AdamConfig::default(),
            steps: 2000,
            seed: 0,
            weights: LossWeights::default(),
            memory_capacity: DEFAULT_CAPACITY,
            eta: DEFAULT_ETA,
            margin: DEFAULT_MARGIN,
            degradation: DegradationRanges::default(),
            key_dim: 32,
            disc_channels: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        let positive = self.batch > 0
            && self.memory_capacity > 0
            && self.eta > 0.0
            && self.margin >= 0.0
            && self.key_dim > 0
            && self.disc_channels > 0
            && a.lr > 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.eps > 0.0;
        if !positive {
            return Err(Error::Config(format!("invalid training configuration {self:?}")));
        }
        self.weights.validate()?;
        self.degradation.validate()
    }
}

/// Networks needed at inference time.
#[derive(Clone, Debug)]
pub struct Model {
    pub generator: Generator,
    pub query: QueryEncoder,
}

/// One training example after degradation.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub index: usize,
    /// Ground truth in `[-1, 1]`.
    pub hr: Tensor,
    /// Degraded image in `[0, 1]`.
    pub lq: Tensor,
    /// `lq` upsampled to the working resolution, in `[-1, 1]`.
    pub lq_up: Tensor,
    pub code: WaveletCode,
    pub noise: Tensor,
    pub boxes: Vec<CropBox>,
    pub degradation: DegradationConfig,
}

/// Structured record of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub seed: u64,
    pub parts: LossParts,
    pub total: f64,
    pub disc: f64,
    pub wmm: f64,
    pub merged: usize,
    pub written: usize,
    pub occupancy: usize,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = &self.parts;
        write!(
            f,
            "step={} seed={} total={:.9e} adv={:.9e} rec={:.9e} rec_prime={:.9e} vgg={:.9e} ccx={:.9e} disc={:.9e} wmm={:.9e} merged={} written={} occupancy={}",
            self.step, self.seed, self.total, p.adv, p.rec, p.rec_prime, p.vgg, p.ccx, self.disc, self.wmm,
            self.merged, self.written, self.occupancy
        )
    }
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub disc: MultiScaleDiscriminator,
    pub disc_params: ParamSet,
    pub features: FeatureNet,
    pub bank: MemoryBank,
    adam_g: Adam,
    adam_d: Adam,
    adam_q: Adam,
    step: u64,
}

/// Ground-truth wavelet code of a `[-1, 1]` image.
pub fn ground_truth_code(hr: &Tensor, levels: usize) -> Result<WaveletCode> {
    Ok(wavelet_style_code(&wpd_forward(hr, levels)?))
}

impl Trainer {
    pub fn new(gen_config: GeneratorConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let generator = Generator::new(gen_config.clone(), substream_seed(seed, 1))?;
        let query = QueryEncoder::new(gen_config.resolution, config.key_dim, substream_seed(seed, 2))?;
        let mut disc_params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, 3));
        let disc = MultiScaleDiscriminator::new(&mut disc_params, config.disc_channels, &mut rng);
        let bank = MemoryBank::new(config.memory_capacity, config.key_dim, gen_config.code_dim())?;
        Ok(Trainer {
            adam_g: Adam::new(config.adam, &generator.params),
            adam_d: Adam::new(config.adam, &disc_params),
            adam_q: Adam::new(config.adam, &query.params),
            model: Model { generator, query },
            disc,
            disc_params,
            features: FeatureNet::new(0),
            bank,
            config,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn gen_config(&self) -> &GeneratorConfig {
        &self.model.generator.config
    }

    /// Degrades one sample with a configuration drawn from `seed`.
    pub fn prepare(&self, sample: &ToySample, seed: u64) -> Result<Prepared> {
        let res = self.gen_config().resolution;
        let (c, h, w) = sample.image.dims3()?;
        if (c, h, w) != (3, res, res) {
            return Err(Error::Config(format!(
                "training image {} is {c}x{h}x{w}, expected 3x{res}x{res}",
                sample.index
            )));
        }
        let cfg = self
            .config
            .degradation
            .sample_divisible(substream_seed(seed, DEGRADE_SALT), h, w)?;
        let (lq, degradation) = degrade(&sample.image, &cfg)?;
        let hr = sample.image.map(to_signed);
        Ok(Prepared {
            index: sample.index,
            code: ground_truth_code(&hr, self.gen_config().wavelet_levels)?,
            lq_up: upsample_input(&lq, res)?,
            lq,
            hr,
            noise: self.model.generator.sample_noise(substream_seed(seed, NOISE_SALT)),
            boxes: sample.boxes.to_vec(),
            degradation,
        })
    }

    /// The batch used at `step`.
    pub fn prepare_batch(&self, data: &[ToySample], step: u64) -> Result<Vec<Prepared>> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let step_seed = substream_seed(self.config.seed ^ BATCH_SALT, step);
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
        (0..self.config.batch)
            .map(|slot| {
                let i = rng.random_range(0..data.len());
                self.prepare(&data[i], substream_seed(step_seed, slot as u64))
            })
            .collect()
    }

    /// Fixed per-image degradation used for evaluation.
    pub fn prepare_eval(&self, data: &[ToySample]) -> Result<Vec<Prepared>> {
        data.iter()
            .map(|s| self.prepare(s, substream_seed(self.config.seed ^ EVAL_SALT, s.index as u64)))
            .collect()
    }

    /// Generator-side loss parts computed with plain (non-graph) functions.
    pub fn generator_loss_parts(&self, p: &Prepared) -> Result<LossParts> {
        let gen = &self.model.generator;
        let (restored, x_mr) = gen.generator_forward(&p.lq, &p.noise, &p.code.as_tensor())?;
        let w = &self.config.weights;
        let (_, adv) = adversarial_losses(&self.disc, &self.disc_params, &p.hr, &restored, &w.adv_scale_weights)?;
        Ok(LossParts {
            adv,
            rec_prime: huber(&x_mr, &p.hr, w.huber_delta)?,
            rec: huber(&restored, &p.hr, w.huber_delta)?,
            vgg: perceptual_loss(&self.features, &restored, &p.hr, &w.vgg_layer_weights)?,
            ccx: component_contextual_loss(&self.features, &restored, &p.hr, &p.boxes)?,
        })
    }

    fn check_finite(&self, what: &str, v: f64, batch: &[Prepared]) -> Result<()> {
        if v.is_finite() {
            return Ok(());
        }
        let mut msg = format!("{what} is {v} at step {}; batch:", self.step);
        for p in batch {
            msg.push_str(&format!(" [image={} {}]", p.index, p.degradation));
        }
        Err(Error::NonFinite(msg))
    }

    /// Runs one full step on `data`.
    pub fn train_step(&mut self, data: &[ToySample]) -> Result<StepLog> {
        let batch = self.prepare_batch(data, self.step)?;
        let n = batch.len() as f64;
        let w = self.config.weights.clone();

        struct Pending {
            g: Graph,
            gen_vars: crate::nn::Bound,
            restored: Var,
            rec: Var,
            rec_prime: Var,
            vgg: Var,
            ccx: Var,
        }
        let mut pending = Vec::with_capacity(batch.len());
        for p in &batch {
            let mut g = Graph::new();
            let gen_vars = self.model.generator.params.bind(&mut g, true);
            let feat_vars = self.features.params.bind(&mut g, false);
            let lq_up = g.constant(p.lq_up.clone());
            let noise = g.constant(p.noise.clone());
            let code = g.constant(p.code.as_tensor());
            let hr = g.constant(p.hr.clone());
            let out = self.model.generator.forward(&mut g, &gen_vars, lq_up, noise, code)?;
            let rec = g.huber(out.restored, hr, w.huber_delta)?;
            let rec_prime = g.huber(out.x_mr, hr, w.huber_delta)?;
            let vgg = perceptual_on_graph(&mut g, &self.features, &feat_vars, out.restored, hr, &w.vgg_layer_weights)?;
            let ccx = component_contextual_on_graph(&mut g, &self.features, &feat_vars, out.restored, hr, &p.boxes)?;
            pending.push(Pending {
                g,
                gen_vars,
                restored: out.restored,
                rec,
                rec_prime,
                vgg,
                ccx,
            });
        }

        // Discriminator step on detached fakes.
        let mut d_grads = zero_grads(&self.disc_params);
        let mut d_loss = 0.0;
        for (p, pend) in batch.iter().zip(&pending) {
            let mut g = Graph::new();
            let dv = self.disc_params.bind(&mut g, true);
            let real = g.constant(p.hr.clone());
            let fake = g.constant(pend.g.value(pend.restored).clone());
            let pr = self.disc.forward(&mut g, &dv, real)?;
            let pf = self.disc.forward(&mut g, &dv, fake)?;
            let loss = discriminator_loss_on_graph(&mut g, &pr, &pf, &w.adv_scale_weights)?;
            d_loss += g.scalar_value(loss) / n;
            g.backward(loss)?;
            accumulate(&mut d_grads, &dv.grads(&g), 1.0 / n);
        }
        self.check_finite("discriminator loss", d_loss, &batch)?;
        self.adam_d.step(&mut self.disc_params, &d_grads)?;

        // Generator step against the updated discriminator.
        let mut g_grads = zero_grads(&self.model.generator.params);
        let mut parts = LossParts::default();
        for mut pend in pending {
            let g = &mut pend.g;
            let dv = self.disc_params.bind(g, false);
            let pf = self.disc.forward(g, &dv, pend.restored)?;
            let adv = generator_adv_loss_on_graph(g, &pf, &w.adv_scale_weights)?;
            let terms = [
                g.scale(pend.rec_prime, w.lambda_rec_prime),
                g.scale(pend.rec, w.lambda_rec),
                pend.vgg,
                g.scale(pend.ccx, w.lambda_ccx),
            ];
            let mut total = adv;
            for t in terms {
                total = g.add(total, t)?;
            }
            parts.adv += g.scalar_value(adv) / n;
            parts.rec += g.scalar_value(pend.rec) / n;
            parts.rec_prime += g.scalar_value(pend.rec_prime) / n;
            parts.vgg += g.scalar_value(pend.vgg) / n;
            parts.ccx += g.scalar_value(pend.ccx) / n;
            g.backward(total)?;
            accumulate(&mut g_grads, &pend.gen_vars.grads(g), 1.0 / n);
        }
        let total = total_loss(&parts, &w);
        self.check_finite("generator loss", total, &batch)?;
        self.adam_g.step(&mut self.model.generator.params, &g_grads)?;

        // Wavelet memory: query encoder step, then serialized bank updates.
        let mut q_grads = zero_grads(&self.model.query.params);
        let mut wmm = 0.0;
        let mut queries = Vec::with_capacity(batch.len());
        for p in &batch {
            let mut g = Graph::new();
            let qv = self.model.query.params.bind(&mut g, true);
            let x = g.constant(p.lq_up.clone());
            let q = self.model.query.forward(&mut g, &qv, x)?;
            queries.push(Query::new(g.value(q).data().to_vec())?);
            let (loss, _) = self.bank.triplet_on_graph(&mut g, q, &p.code, self.config.margin, self.config.eta)?;
            wmm += g.scalar_value(loss) / n;
            g.backward(loss)?;
            accumulate(&mut q_grads, &qv.grads(&g), 1.0 / n);
        }
        self.check_finite("memory loss", wmm, &batch)?;
        self.adam_q.step(&mut self.model.query.params, &q_grads)?;
        let (mut merged, mut written) = (0, 0);
        for (q, p) in queries.iter().zip(&batch) {
            let r = self.bank.update(q, &p.code, self.config.eta, self.step + 1)?;
            match r.kind {
                UpdateKind::Merged => merged += 1,
                UpdateKind::Written { .. } => written += 1,
            }
        }

        let log = StepLog {
            step: self.step,
            seed: self.config.seed,
            parts,
            total,
            disc: d_loss,
            wmm,
            merged,
            written,
            occupancy: self.bank.occupied_count(),
        };
        self.step += 1;
        Ok(log)
    }

    /// Runs `steps` steps, calling `on_step` after each.
    pub fn run(&mut self, data: &[ToySample], steps: usize, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let mut logs = Vec::with_capacity(steps);
        for _ in 0..steps {
            let log = self.train_step(data)?;
            on_step(&log);
            logs.push(log);
        }
        Ok(logs)
    }

    /// Mean Huber of the restored image against ground truth, using the
    /// ground-truth wavelet codes and fixed noise.
    pub fn training_huber(&self, eval: &[Prepared]) -> Result<f64> {
        let mut s = 0.0;
        for p in eval {
            let (restored, _) = self.model.generator.generator_forward(&p.lq, &p.noise, &p.code.as_tensor())?;
            s += huber(&restored, &p.hr, self.config.weights.huber_delta)?;
        }
        Ok(s / eval.len().max(1) as f64)
    }
}

/// Bicubic upsampling of a `[0, 1]` image, clamped, as the no-learning baseline.
pub fn bicubic_baseline(lq: &Tensor, res: usize) -> Result<Tensor> {
    Ok(bicubic_resize(lq, res, res)?.map(|v| v.clamp(0.0, 1.0)))
}
