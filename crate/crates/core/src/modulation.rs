//! The RM³ block: instance- and layer-normalized features, each denormalized
//! by three affine sources (spatial map, noise embedding, wavelet code) and
//! fused with per-pixel softmax attention over the sources; the two branches
//! are then blended by a sigmoid gate computed from the raw feature.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::nn::{Bound, Conv, Dense, ParamSet};
use crate::ops;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// Resolution of the instance/layer gate `M_O`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GateMode {
    /// One map shared by all channels.
    #[default]
    Shared,
    /// One map per feature channel.
    PerChannel,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rm3Config {
    /// Feature width `C` of the modulated map.
    pub channels: usize,
    /// Channels of the spatial embedding `z_S`.
    pub spatial_channels: usize,
    pub noise_dim: usize,
    pub code_dim: usize,
    pub eps: f64,
    pub gate: GateMode,
}

/// Learnable parameters of one block (ids into a shared [`ParamSet`]).
///
/// Each affine head emits `[gamma_I, beta_I, gamma_L, beta_L]`, `C` channels
/// each; gamma biases start at 1 so a fresh block is close to plain
/// normalization.
#[derive(Clone, Copy, Debug)]
pub struct Rm3Params {
    pub config: Rm3Config,
    pub spatial_affine: Conv,
    pub noise_affine: Dense,
    pub wavelet_affine: Dense,
    pub attn_instance: Conv,
    pub attn_layer: Conv,
    pub attn_gate: Conv,
}

/// Graph inputs of one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockInput {
    /// `[C, H, W]` feature.
    pub h: Var,
    /// `[C_S, H_S, W_S]` spatial embedding, resampled to `H x W` if needed.
    pub z_s: Var,
    /// Noise embedding `[D_N]`.
    pub z_n: Var,
    /// Wavelet style code `[D_W]`.
    pub z_w: Var,
}

/// Attention maps produced during a forward pass, each `[1, H, W]` (the gate
/// is `[C, H, W]` in per-channel mode).
#[derive(Clone, Copy, Debug)]
pub struct AttentionMaps {
    pub instance: [Var; 3],
    pub layer: [Var; 3],
    pub gate: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Rm3Output {
    pub out: Var,
    pub maps: AttentionMaps,
}

fn set_bias(ps: &mut ParamSet, dense_or_conv_bias: crate::nn::ParamId, c: usize) {
    let b = ps.get_mut(dense_or_conv_bias);
    for (i, v) in b.data_mut().iter_mut().enumerate() {
        // layout [gamma_I, beta_I, gamma_L, beta_L]
        let group = i / c;
        *v = if group.is_multiple_of(2) { 1.0 } else { 0.0 };
    }
}

impl Rm3Params {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, config: Rm3Config, rng: &mut R) -> Self {
        let c = config.channels;
        let spatial_affine = Conv::new(ps, &format!("{name}.spatial_affine"), config.spatial_channels, 4 * c, 3, rng);
        let noise_affine = Dense::new(ps, &format!("{name}.noise_affine"), config.noise_dim, 4 * c, rng);
        let wavelet_affine = Dense::new(ps, &format!("{name}.wavelet_affine"), config.code_dim, 4 * c, rng);
        for b in [spatial_affine.bias, noise_affine.bias, wavelet_affine.bias] {
            set_bias(ps, b, c);
        }
        // Affine heads start small so the sources perturb rather than replace
        // the normalized feature.
        for w in [spatial_affine.weight, noise_affine.weight, wavelet_affine.weight] {
            ps.get_mut(w).data_mut().iter_mut().for_each(|v| *v *= 0.1);
        }
        let gate_out = match config.gate {
            GateMode::Shared => 1,
            GateMode::PerChannel => c,
        };
        Rm3Params {
            config,
            spatial_affine,
            noise_affine,
            wavelet_affine,
            attn_instance: Conv::new(ps, &format!("{name}.attn_instance"), c, 3, 3, rng),
            attn_layer: Conv::new(ps, &format!("{name}.attn_layer"), c, 3, 3, rng),
            attn_gate: Conv::new(ps, &format!("{name}.attn_gate"), c, gate_out, 3, rng),
        }
    }

    /// Records the block on `g`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, input: BlockInput) -> Result<Rm3Output> {
        let cfg = &self.config;
        let c = cfg.channels;
        let (hc, h, w) = g.value(input.h).dims3()?;
        if hc != c {
            return Err(Error::shape("rm3", format!("feature has {hc} channels, block expects {c}")));
        }
        let (sc, sh, sw) = g.value(input.z_s).dims3()?;
        if sc != cfg.spatial_channels {
            return Err(Error::shape(
                "rm3",
                format!("spatial embedding has {sc} channels, block expects {}", cfg.spatial_channels),
            ));
        }
        let z_s = if (sh, sw) == (h, w) {
            input.z_s
        } else {
            g.resize_bilinear(input.z_s, h, w)?
        };

        let (h_i, _, _) = g.instance_norm(input.h, cfg.eps)?;
        let (h_l, _, _) = g.layer_norm(input.h, cfg.eps)?;

        let spatial = self.spatial_affine.forward(g, p, z_s)?;
        let noise = self.noise_affine.forward(g, p, input.z_n)?;
        let noise = g.broadcast_channels(noise, h, w)?;
        let wave = self.wavelet_affine.forward(g, p, input.z_w)?;
        let wave = g.broadcast_channels(wave, h, w)?;

        let branch = |g: &mut Graph, norm: Var, which: usize, head: &Conv| -> Result<(Var, [Var; 3])> {
            let logits = head.forward(g, p, norm)?;
            let attn = g.softmax(logits, 0)?;
            let mut terms = Vec::with_capacity(3);
            let mut maps = [norm; 3];
            for (k, src) in [spatial, noise, wave].into_iter().enumerate() {
                let gamma = g.narrow(src, (2 * which) * c, c)?;
                let beta = g.narrow(src, (2 * which + 1) * c, c)?;
                let modulated = denormalize_on_graph(g, norm, gamma, beta)?;
                let m = g.narrow(attn, k, 1)?;
                maps[k] = m;
                let mb = g.broadcast_map(m, c)?;
                terms.push(g.mul(modulated, mb)?);
            }
            Ok((g.add_all(&terms)?, maps))
        };
        let (out_i, maps_i) = branch(g, h_i, 0, &self.attn_instance)?;
        let (out_l, maps_l) = branch(g, h_l, 1, &self.attn_layer)?;

        let gate_logits = self.attn_gate.forward(g, p, input.h)?;
        let gate = g.sigmoid(gate_logits);
        let gate_b = match cfg.gate {
            GateMode::Shared => g.broadcast_map(gate, c)?,
            GateMode::PerChannel => gate,
        };
        let inv = g.affine(gate_b, -1.0, 1.0);
        let a = g.mul(out_i, gate_b)?;
        let b = g.mul(out_l, inv)?;
        let out = g.add(a, b)?;
        Ok(Rm3Output {
            out,
            maps: AttentionMaps {
                instance: maps_i,
                layer: maps_l,
                gate,
            },
        })
    }
}

/// `gamma * h_norm + beta` where `gamma`/`beta` are either full maps or
/// per-channel vectors broadcast over space.
pub fn denormalize_on_graph(g: &mut Graph, h_norm: Var, gamma: Var, beta: Var) -> Result<Var> {
    let (c, h, w) = g.value(h_norm).dims3()?;
    let fit = |g: &mut Graph, v: Var| -> Result<Var> {
        let s = g.shape(v).to_vec();
        if s == [c, h, w] {
            Ok(v)
        } else if s == [c] {
            g.broadcast_channels(v, h, w)
        } else {
            Err(Error::shape("denormalize", format!("cannot broadcast {s:?} onto [{c}, {h}, {w}]")))
        }
    };
    let gamma = fit(g, gamma)?;
    let beta = fit(g, beta)?;
    let scaled = g.mul(gamma, h_norm)?;
    g.add(scaled, beta)
}

/// Per-channel standardization; returns the normalized map and per-channel
/// means and deviations `sqrt(var + eps)`.
pub fn instance_normalize(h: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (c, hh, ww) = h.dims3()?;
    if hh * ww < 2 {
        return Err(Error::contract("instance normalization needs at least two positions"));
    }
    let (y, mu, inv) = kernels::standardize(h.data(), c, eps);
    Ok((Tensor::new(h.shape(), y)?, mu, inv.iter().map(|v| 1.0 / v).collect()))
}

/// Standardization over all of `C, H, W` jointly.
pub fn layer_normalize(h: &Tensor, eps: f64) -> Result<(Tensor, f64, f64)> {
    h.dims3()?;
    if h.numel() < 2 {
        return Err(Error::contract("layer normalization needs at least two values"));
    }
    let (y, mu, inv) = kernels::standardize(h.data(), 1, eps);
    Ok((Tensor::new(h.shape(), y)?, mu[0], 1.0 / inv[0]))
}

pub fn denormalize_branch(h_norm: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, ga, be) = (g.constant(h_norm.clone()), g.constant(gamma.clone()), g.constant(beta.clone()));
    let out = denormalize_on_graph(&mut g, x, ga, be)?;
    Ok(g.value(out).clone())
}

/// Per-pixel softmax over the three source logits of `head`; returns
/// `(M_S, M_N, M_W)`, each `[1, H, W]`.
pub fn attention_maps(h_norm: &Tensor, head_weight: &Tensor, head_bias: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    if head_weight.shape().first() != Some(&3) {
        return Err(Error::shape("attention_maps", format!("head must emit 3 channels, weight {:?}", head_weight.shape())));
    }
    let pad = head_weight.shape()[2] / 2;
    let logits = ops::conv2d(h_norm, head_weight, head_bias, 1, pad)?;
    let a = ops::softmax(&logits, 0)?;
    let (_, h, w) = a.dims3()?;
    let plane = |k: usize| Tensor::new(&[1, h, w], a.channel(k).to_vec());
    Ok((plane(0)?, plane(1)?, plane(2)?))
}

/// Evaluates a block on plain tensors.
pub fn rm3_forward(
    params: &Rm3Params,
    store: &ParamSet,
    h: &Tensor,
    z_s: &Tensor,
    z_n: &Tensor,
    z_w: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let input = BlockInput {
        h: g.constant(h.clone()),
        z_s: g.constant(z_s.clone()),
        z_n: g.constant(z_n.clone()),
        z_w: g.constant(z_w.clone()),
    };
    let out = params.forward(&mut g, &p, input)?;
    Ok(g.value(out.out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> Rm3Config {
        Rm3Config {
            channels: 3,
            spatial_channels: 2,
            noise_dim: 5,
            code_dim: 4,
            eps: NORM_EPS,
            gate: GateMode::Shared,
        }
    }

    #[test]
    fn instance_norm_constant_channel_is_zero() {
        let (y, mu, sd) = instance_normalize(&Tensor::full(&[2, 3, 3], 4.0), NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(mu, vec![4.0, 4.0]);
        assert!((sd[0] - NORM_EPS.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn instance_norm_unit_pair() {
        let (y, _, _) = instance_normalize(&Tensor::new(&[1, 1, 2], vec![-1.0, 1.0]).unwrap(), NORM_EPS).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5 && (y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_sees_what_instance_norm_removes() {
        // Same value across channels at each pixel, varying spatially per channel offset.
        let h = Tensor::from_fn(&[2, 2, 2], |i| if i < 4 { 1.0 } else { 3.0 });
        let (hi, _, _) = instance_normalize(&h, NORM_EPS).unwrap();
        let (hl, mu, _) = layer_normalize(&h, NORM_EPS).unwrap();
        assert!(hi.data().iter().all(|&v| v == 0.0));
        assert!(hl.data().iter().all(|&v| v.abs() > 0.9));
        assert_eq!(mu, 2.0);
        let (z, _, _) = layer_normalize(&Tensor::full(&[2, 2, 2], 7.0), NORM_EPS).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn denormalize_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::uniform(&[2, 3, 3], -1.0, 1.0, &mut rng);
        let id = denormalize_branch(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2])).unwrap();
        assert_eq!(id, x);
        let beta = Tensor::uniform(&[2, 3, 3], -1.0, 1.0, &mut rng);
        let y = denormalize_branch(&x, &Tensor::zeros(&[2, 3, 3]), &beta).unwrap();
        assert_eq!(y, beta);
        assert!(denormalize_branch(&x, &Tensor::zeros(&[3]), &beta).is_err());
    }

    #[test]
    fn attention_zero_head_is_uniform() {
        let x = Tensor::full(&[4, 3, 3], 0.3);
        let (s, n, w) = attention_maps(&x, &Tensor::zeros(&[3, 4, 3, 3]), &Tensor::zeros(&[3])).unwrap();
        for m in [s, n, w] {
            assert!(m.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
        let b = Tensor::new(&[3], vec![10.0, -10.0, -10.0]).unwrap();
        let (s, n, _) = attention_maps(&x, &Tensor::zeros(&[3, 4, 3, 3]), &b).unwrap();
        assert!(s.data().iter().all(|&v| v > 0.9999));
        assert!(n.data().iter().all(|&v| v < 1e-4));
    }

    #[test]
    fn gate_saturation_selects_instance_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let blk = Rm3Params::new(&mut ps, "b", cfg(), &mut rng);
        ps.get_mut(blk.attn_gate.weight).data_mut().fill(0.0);
        ps.get_mut(blk.attn_gate.bias).data_mut().fill(20.0);
        let h = Tensor::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
        let zs = Tensor::uniform(&[2, 2, 2], -1.0, 1.0, &mut rng);
        let zn = Tensor::uniform(&[5], -1.0, 1.0, &mut rng);
        let zw = Tensor::uniform(&[4], -1.0, 1.0, &mut rng);
        let full = rm3_forward(&blk, &ps, &h, &zs, &zn, &zw).unwrap();
        ps.get_mut(blk.attn_gate.bias).data_mut().fill(-20.0);
        let layer_only = rm3_forward(&blk, &ps, &h, &zs, &zn, &zw).unwrap();
        assert!(full.max_abs_diff(&layer_only) > 1e-3);
    }
}
