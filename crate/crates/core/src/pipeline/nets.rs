//! Generator (U-Net encoder, mapping network, RM³ decoder) and the query
//! encoder of the wavelet memory.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::degradation::bicubic_resize;
use crate::error::{Error, Result};
use crate::graph::{Graph, Reduction, Var};
use crate::modulation::{AttentionMaps, BlockInput, GateMode, Rm3Config, Rm3Params, NORM_EPS};
use crate::nn::{Bound, Conv, Dense, ParamSet};
use crate::tensor::Tensor;
use crate::wavelet::code_len;

pub const LEAK: f64 = 0.2;
/// x_mr is clamped to this magnitude before entering the output logits.
pub const BASE_CLAMP: f64 = 0.999;
/// Smallest spatial extent of the feature ladder.
pub const MIN_RES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub resolution: usize,
    /// Number of RM³ blocks; 0 returns the U-Net output directly.
    pub block_count: usize,
    pub base_channels: usize,
    pub noise_dim: usize,
    pub mapping_width: usize,
    pub wavelet_levels: usize,
    /// Per-scale widths from full resolution downward; derived from
    /// `base_channels` when empty.
    pub widths: Vec<usize>,
    pub gate: GateMode,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            resolution: 64,
            block_count: 4,
            base_channels: 8,
            noise_dim: 512,
            mapping_width: 64,
            wavelet_levels: 2,
            widths: Vec::new(),
            gate: GateMode::Shared,
        }
    }
}

impl GeneratorConfig {
    /// Number of encoder scales (one per block, at least one).
    pub fn scales(&self) -> usize {
        self.block_count.max(1)
    }

    pub fn code_dim(&self) -> usize {
        code_len(3, self.wavelet_levels)
    }

    pub fn widths(&self) -> Vec<usize> {
        if !self.widths.is_empty() {
            return self.widths.clone();
        }
        (0..self.scales())
            .map(|i| self.base_channels * (1 << i.min(2)))
            .collect()
    }

    /// Spatial extent of encoder scale `i` (0 is full resolution).
    pub fn scale_res(&self, i: usize) -> usize {
        (self.resolution >> i.min(30)).max(MIN_RES.min(self.resolution))
    }

    pub fn validate(&self) -> Result<()> {
        let m = 1usize << self.wavelet_levels;
        if self.resolution == 0 || !self.resolution.is_multiple_of(m) {
            return Err(Error::Config(format!(
                "resolution {} must be a positive multiple of 2^{}",
                self.resolution, self.wavelet_levels
            )));
        }
        if self.wavelet_levels == 0 {
            return Err(Error::Config("wavelet levels must be at least 1".into()));
        }
        if !self.resolution.is_power_of_two() {
            return Err(Error::Config(format!("resolution {} must be a power of two", self.resolution)));
        }
        if self.base_channels == 0 || self.noise_dim == 0 || self.mapping_width == 0 {
            return Err(Error::Config("channel and embedding widths must be positive".into()));
        }
        if !self.widths.is_empty() && (self.widths.len() != self.scales() || self.widths.contains(&0)) {
            return Err(Error::Config(format!(
                "expected {} positive widths, got {:?}",
                self.scales(),
                self.widths
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    conv: Conv,
    down: bool,
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    rm3: Rm3Params,
    post: Conv,
    up: bool,
}

/// Generator parameters and layer layout.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamSet,
    stem: Conv,
    levels: Vec<EncoderLevel>,
    /// U-Net decoder convolutions, from the deepest skip upward.
    unet_up: Vec<(Conv, bool)>,
    unet_out: Conv,
    mapping: Vec<Dense>,
    mapping_heads: Vec<Dense>,
    blocks: Vec<DecoderBlock>,
    to_rgb: Conv,
}

/// Graph nodes produced by one generator pass.
#[derive(Clone, Debug)]
pub struct GenOutput {
    pub restored: Var,
    pub x_mr: Var,
    /// Refined U-Net features from full resolution downward.
    pub z_s: Vec<Var>,
    pub z_n: Vec<Var>,
    pub maps: Vec<AttentionMaps>,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let w = config.widths();
        let n = config.scales();
        let stem = Conv::new(&mut ps, "gen.enc.stem", 3, w[0], 3, &mut rng);
        let mut levels = Vec::with_capacity(n);
        for i in 0..n {
            let c_in = if i == 0 { w[0] } else { w[i - 1] };
            levels.push(EncoderLevel {
                conv: Conv::new(&mut ps, &format!("gen.enc.level{i}"), c_in, w[i], 3, &mut rng),
                down: i > 0 && config.scale_res(i) < config.scale_res(i - 1),
            });
        }
        let mut unet_up = Vec::new();
        for i in (0..n.saturating_sub(1)).rev() {
            let conv = Conv::new(&mut ps, &format!("gen.unet.up{i}"), w[i + 1] + w[i], w[i], 3, &mut rng);
            unet_up.push((conv, levels[i + 1].down));
        }
        let unet_out = Conv::new(&mut ps, "gen.unet.out", w[0], 3, 3, &mut rng);
        // x_mr starts as the bicubic input.
        ps.get_mut(unet_out.weight).data_mut().fill(0.0);
        let mw = config.mapping_width;
        let mapping = (0..4)
            .map(|i| {
                let d_in = if i == 0 { config.noise_dim } else { mw };
                Dense::new(&mut ps, &format!("gen.map.fc{i}"), d_in, mw, &mut rng)
            })
            .collect();
        let mapping_heads = (0..config.block_count)
            .map(|j| Dense::new(&mut ps, &format!("gen.map.head{j}"), mw, mw, &mut rng))
            .collect();
        let mut blocks = Vec::with_capacity(config.block_count);
        for j in 0..config.block_count {
            let level = n - 1 - j;
            let c = w[level];
            let rm3 = Rm3Params::new(
                &mut ps,
                &format!("gen.rm3.block{j}"),
                Rm3Config {
                    channels: c,
                    spatial_channels: c,
                    noise_dim: mw,
                    code_dim: config.code_dim(),
                    eps: NORM_EPS,
                    gate: config.gate,
                },
                &mut rng,
            );
            let c_next = if level == 0 { w[0] } else { w[level - 1] };
            let post = Conv::new(&mut ps, &format!("gen.rm3.post{j}"), c, c_next, 3, &mut rng);
            blocks.push(DecoderBlock {
                rm3,
                post,
                up: level > 0 && levels[level].down,
            });
        }
        let to_rgb = Conv::new(&mut ps, "gen.to_rgb", w[0], 3, 3, &mut rng);
        ps.get_mut(to_rgb.weight).data_mut().iter_mut().for_each(|v| *v *= 0.1);
        Ok(Generator {
            config,
            params: ps,
            stem,
            levels,
            unet_up,
            unet_out,
            mapping,
            mapping_heads,
            blocks,
            to_rgb,
        })
    }

    /// U-Net pass; returns `x_mr` and the refined per-scale features from
    /// full resolution downward (the deepest is the bottleneck).
    pub fn encoder_forward(&self, g: &mut Graph, p: &Bound, lq_up: Var) -> Result<(Var, Vec<Var>)> {
        let r = self.config.resolution;
        if g.shape(lq_up) != [3, r, r] {
            return Err(Error::shape(
                "generator",
                format!("input {:?} does not match working resolution {r}", g.shape(lq_up)),
            ));
        }
        let stem = self.stem.forward(g, p, lq_up)?;
        let mut h = g.leaky_relu(stem, LEAK);
        let mut feats = Vec::with_capacity(self.levels.len());
        for lvl in &self.levels {
            if lvl.down {
                h = g.avg_pool(h, 2)?;
            }
            let c = lvl.conv.forward(g, p, h)?;
            h = g.leaky_relu(c, LEAK);
            feats.push(h);
        }
        let n = feats.len();
        let mut refined = vec![feats[n - 1]; n];
        let mut d = feats[n - 1];
        for (k, (conv, up)) in self.unet_up.iter().enumerate() {
            let i = n - 2 - k;
            if *up {
                d = g.upsample_nearest(d, 2)?;
            }
            let cat = g.concat(&[d, feats[i]])?;
            let c = conv.forward(g, p, cat)?;
            d = g.leaky_relu(c, LEAK);
            refined[i] = d;
        }
        let out = self.unet_out.forward(g, p, d)?;
        let x_mr = g.add(lq_up, out)?;
        Ok((x_mr, refined))
    }

    /// Mapping network: one embedding per block.
    pub fn mapping_forward(&self, g: &mut Graph, p: &Bound, noise: Var) -> Result<Vec<Var>> {
        if g.shape(noise) != [self.config.noise_dim] {
            return Err(Error::shape(
                "mapping_network",
                format!("noise {:?}, expected [{}]", g.shape(noise), self.config.noise_dim),
            ));
        }
        let mut h = noise;
        for fc in &self.mapping {
            let y = fc.forward(g, p, h)?;
            h = g.leaky_relu(y, LEAK);
        }
        self.mapping_heads.iter().map(|head| head.forward(g, p, h)).collect()
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, lq_up: Var, noise: Var, z_w: Var) -> Result<GenOutput> {
        if g.shape(z_w) != [self.config.code_dim()] {
            return Err(Error::shape(
                "generator",
                format!("wavelet code {:?}, expected [{}]", g.shape(z_w), self.config.code_dim()),
            ));
        }
        let (x_mr, z_s) = self.encoder_forward(g, p, lq_up)?;
        let z_n = self.mapping_forward(g, p, noise)?;
        if self.blocks.is_empty() {
            return Ok(GenOutput {
                restored: x_mr,
                x_mr,
                z_s,
                z_n,
                maps: Vec::new(),
            });
        }
        let n = z_s.len();
        let mut h = z_s[n - 1];
        let mut maps = Vec::with_capacity(self.blocks.len());
        for (j, block) in self.blocks.iter().enumerate() {
            let out = block.rm3.forward(
                g,
                p,
                BlockInput {
                    h,
                    z_s: z_s[n - 1 - j],
                    z_n: z_n[j],
                    z_w,
                },
            )?;
            maps.push(out.maps);
            let a = g.leaky_relu(out.out, LEAK);
            let c = block.post.forward(g, p, a)?;
            h = g.leaky_relu(c, LEAK);
            if block.up {
                h = g.upsample_nearest(h, 2)?;
            }
        }
        // The projection refines x_mr in logit space.
        let base = atanh_on_graph(g, x_mr)?;
        let rgb = self.to_rgb.forward(g, p, h)?;
        let logits = g.add(rgb, base)?;
        let restored = g.tanh(logits);
        Ok(GenOutput {
            restored,
            x_mr,
            z_s,
            z_n,
            maps,
        })
    }

    /// Standard-normal noise vector from `seed`.
    pub fn sample_noise(&self, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[self.config.noise_dim], |_| StandardNormal.sample(&mut rng))
    }

    /// Plain forward: `lq` in `[0, 1]` at any size; returns the restored
    /// image in `[-1, 1]` and `x_mr`.
    pub fn generator_forward(&self, lq: &Tensor, noise: &Tensor, z_w: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let up = g.constant(upsample_input(lq, self.config.resolution)?);
        let nz = g.constant(noise.clone());
        let zw = g.constant(z_w.clone());
        let out = self.forward(&mut g, &p, up, nz, zw)?;
        Ok((g.value(out.restored).clone(), g.value(out.x_mr).clone()))
    }
}

/// `atanh` of `x` clamped to `BASE_CLAMP`, as `(ln(1 + x) - ln(1 - x)) / 2`.
fn atanh_on_graph(g: &mut Graph, x: Var) -> Result<Var> {
    let c = g.clamp(x, -BASE_CLAMP, BASE_CLAMP);
    let plus = g.affine(c, 1.0, 1.0);
    let minus = g.affine(c, -1.0, 1.0);
    let lp = g.ln(plus);
    let lm = g.ln(minus);
    let d = g.sub(lp, lm)?;
    Ok(g.scale(d, 0.5))
}

/// Bicubic upsampling of a `[0, 1]` image to `res x res`, mapped to `[-1, 1]`.
pub fn upsample_input(lq: &Tensor, res: usize) -> Result<Tensor> {
    let (c, _, _) = lq.dims3()?;
    if c != 3 {
        return Err(Error::shape("generator", format!("expected 3 channels, got {c}")));
    }
    Ok(bicubic_resize(lq, res, res)?.map(to_signed))
}

pub fn to_signed(v: f64) -> f64 {
    2.0 * v - 1.0
}

pub fn to_unit(v: f64) -> f64 {
    ((v + 1.0) / 2.0).clamp(0.0, 1.0)
}

pub const QUERY_WIDTHS: [usize; 3] = [8, 16, 16];

/// Strided conv stack, global average pool, projection and normalization.
#[derive(Clone, Debug)]
pub struct QueryEncoder {
    pub params: ParamSet,
    pub resolution: usize,
    pub key_dim: usize,
    convs: Vec<Conv>,
    proj: Dense,
}

impl QueryEncoder {
    pub fn new(resolution: usize, key_dim: usize, seed: u64) -> Result<Self> {
        if key_dim == 0 {
            return Err(Error::Config("key dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let mut c_in = 3;
        let convs = QUERY_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv::new(&mut ps, &format!("query.conv{i}"), c_in, c, 3, &mut rng);
                c_in = c;
                conv
            })
            .collect();
        let proj = Dense::new(&mut ps, "query.proj", c_in, key_dim, &mut rng);
        Ok(QueryEncoder {
            params: ps,
            resolution,
            key_dim,
            convs,
            proj,
        })
    }

    /// Unit-norm query node from an upsampled `[-1, 1]` input node.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            let c = conv.forward(g, p, h)?;
            h = g.leaky_relu(c, LEAK);
            let (_, hh, ww) = g.value(h).dims3()?;
            if i + 1 < self.convs.len() && hh >= 2 * MIN_RES && hh % 2 == 0 && ww % 2 == 0 {
                h = g.avg_pool(h, 2)?;
            }
        }
        let (c, hh, ww) = g.value(h).dims3()?;
        let flat = g.reshape(h, &[c, hh * ww])?;
        let s = g.reduce(flat, 1, Reduction::Sum)?;
        let pooled = g.scale(s, 1.0 / (hh * ww) as f64);
        let y = self.proj.forward(g, p, pooled)?;
        let sq = g.mul(y, y)?;
        let n2 = g.sum(sq);
        let n2 = g.affine(n2, 1.0, 1e-24);
        let n = g.sqrt(n2);
        let inv = g.recip(n);
        let inv = g.expand(inv, 0, self.key_dim)?;
        g.mul(y, inv)
    }

    /// Query for a `[0, 1]` low-quality image of any size.
    pub fn encode(&self, lq: &Tensor) -> Result<crate::memory::Query> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(upsample_input(lq, self.resolution)?);
        let q = self.forward(&mut g, &p, x)?;
        crate::memory::Query::new(g.value(q).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            resolution: 16,
            block_count: 2,
            base_channels: 4,
            noise_dim: 8,
            mapping_width: 6,
            wavelet_levels: 1,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn output_shapes_and_scale_count() {
        let cfg = small();
        let gen = Generator::new(cfg.clone(), 0).unwrap();
        let lq = Tensor::full(&[3, 4, 4], 0.5);
        let noise = gen.sample_noise(1);
        let zw = Tensor::zeros(&[cfg.code_dim()]);
        let (out, x_mr) = gen.generator_forward(&lq, &noise, &zw).unwrap();
        assert_eq!(out.shape(), &[3, 16, 16]);
        assert_eq!(x_mr.shape(), &[3, 16, 16]);
        assert!(out.data().iter().all(|v| v.abs() <= 1.0));
        let mut g = Graph::new();
        let p = gen.params.bind(&mut g, false);
        let x = g.constant(upsample_input(&lq, 16).unwrap());
        let (_, feats) = gen.encoder_forward(&mut g, &p, x).unwrap();
        assert_eq!(feats.len(), cfg.block_count);
    }

    #[test]
    fn deterministic_and_noise_sensitive() {
        let cfg = small();
        let gen = Generator::new(cfg.clone(), 3).unwrap();
        let lq = Tensor::from_fn(&[3, 8, 8], |i| (i % 7) as f64 / 7.0);
        let zw = Tensor::full(&[cfg.code_dim()], 0.1);
        let n1 = gen.sample_noise(1);
        let a = gen.generator_forward(&lq, &n1, &zw).unwrap().0;
        let b = gen.generator_forward(&lq, &n1, &zw).unwrap().0;
        assert_eq!(a, b);
        let c = gen.generator_forward(&lq, &gen.sample_noise(2), &zw).unwrap().0;
        assert_eq!(a.shape(), c.shape());
        assert!(a.max_abs_diff(&c) > 0.0);
    }

    #[test]
    fn mapping_zero_noise_and_count() {
        let cfg = small();
        let gen = Generator::new(cfg.clone(), 0).unwrap();
        let mut g = Graph::new();
        let p = gen.params.bind(&mut g, false);
        let z = g.constant(Tensor::zeros(&[cfg.noise_dim]));
        let outs = gen.mapping_forward(&mut g, &p, z).unwrap();
        assert_eq!(outs.len(), cfg.block_count);
    }

    #[test]
    fn seven_block_ladder() {
        let cfg = GeneratorConfig {
            block_count: 7,
            wavelet_levels: 4,
            base_channels: 2,
            mapping_width: 4,
            noise_dim: 512,
            ..GeneratorConfig::default()
        };
        assert_eq!(cfg.code_dim(), 765);
        let gen = Generator::new(cfg.clone(), 0).unwrap();
        let lq = Tensor::full(&[3, 16, 16], 0.3);
        let (out, _) = gen
            .generator_forward(&lq, &gen.sample_noise(0), &Tensor::zeros(&[765]))
            .unwrap();
        assert_eq!(out.shape(), &[3, 64, 64]);
    }

    #[test]
    fn zero_blocks_returns_unet_output() {
        let cfg = GeneratorConfig { block_count: 0, ..small() };
        let gen = Generator::new(cfg.clone(), 0).unwrap();
        let lq = Tensor::full(&[3, 4, 4], 0.5);
        let (out, x_mr) = gen
            .generator_forward(&lq, &gen.sample_noise(0), &Tensor::zeros(&[cfg.code_dim()]))
            .unwrap();
        assert_eq!(out, x_mr);
    }

    #[test]
    fn config_validation() {
        assert!(GeneratorConfig { resolution: 24, ..small() }.validate().is_err());
        assert!(GeneratorConfig { widths: vec![4], ..small() }.validate().is_err());
        assert!(small().validate().is_ok());
    }

    #[test]
    fn query_is_unit_norm_and_deterministic() {
        let enc = QueryEncoder::new(16, 8, 0).unwrap();
        let lq = Tensor::from_fn(&[3, 4, 4], |i| (i % 5) as f64 / 5.0);
        let q = enc.encode(&lq).unwrap();
        let n: f64 = q.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        assert_eq!(q, enc.encode(&lq).unwrap());
    }
}
