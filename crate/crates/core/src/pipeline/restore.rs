//! Inference: query the memory, retrieve a wavelet code, run the generator.

use crate::error::Result;
use crate::memory::MemoryBank;
use crate::graph::{Graph, Var};
use crate::pipeline::nets::{to_unit, upsample_input};
use crate::pipeline::train::Model;
use crate::tensor::Tensor;
use crate::wavelet::WaveletCode;

#[derive(Clone, Debug)]
pub struct Restored {
    /// `[3, R, R]` in `[0, 1]`.
    pub image: Tensor,
    /// Retrieved slot and its similarity; `None` when the bank was empty.
    pub retrieved: Option<(usize, f64)>,
    pub code: WaveletCode,
}

/// Attention maps of one decoder block.
#[derive(Clone, Debug)]
pub struct BlockMaps {
    /// Source weights (spatial, noise, wavelet) of the instance branch, `[3, H, W]`.
    pub instance: Tensor,
    /// Same for the layer branch.
    pub layer: Tensor,
    /// Instance-vs-layer gate.
    pub gate: Tensor,
}

fn retrieve(lq: &Tensor, model: &Model, bank: &MemoryBank) -> Result<(Option<(usize, f64)>, WaveletCode)> {
    if bank.is_empty() {
        log::warn!("memory bank is empty; restoring with a zero wavelet code");
        return Ok((None, WaveletCode::zeros(model.generator.config.code_dim())));
    }
    let q = model.query.encode(lq)?;
    let top = bank.knn_retrieve(&q, 1)?[0];
    Ok((Some(top), bank.value_code(top.0)))
}

/// Restores a `[0, 1]` low-quality image.
pub fn restore(lq: &Tensor, model: &Model, bank: &MemoryBank, seed: u64) -> Result<Restored> {
    let gen = &model.generator;
    let (retrieved, code) = retrieve(lq, model, bank)?;
    let noise = gen.sample_noise(seed);
    let (out, _) = gen.generator_forward(lq, &noise, &code.as_tensor())?;
    Ok(Restored {
        image: out.map(to_unit),
        retrieved,
        code,
    })
}

/// Per-block attention maps of the restoration pass for `lq`.
pub fn attention_maps(lq: &Tensor, model: &Model, bank: &MemoryBank, seed: u64) -> Result<Vec<BlockMaps>> {
    let gen = &model.generator;
    let (_, code) = retrieve(lq, model, bank)?;
    let mut g = Graph::new();
    let p = gen.params.bind(&mut g, false);
    let up = g.constant(upsample_input(lq, gen.config.resolution)?);
    let nz = g.constant(gen.sample_noise(seed));
    let zw = g.constant(code.as_tensor());
    let out = gen.forward(&mut g, &p, up, nz, zw)?;
    let stack = |g: &Graph, vs: &[Var; 3]| -> Result<Tensor> {
        let (_, h, w) = g.value(vs[0]).dims3()?;
        let data = vs.iter().flat_map(|&v| g.value(v).data().iter().copied()).collect();
        Tensor::new(&[3, h, w], data)
    };
    out.maps
        .iter()
        .map(|m| {
            Ok(BlockMaps {
                instance: stack(&g, &m.instance)?,
                layer: stack(&g, &m.layer)?,
                gate: g.value(m.gate).clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::Query;
    use crate::pipeline::nets::{Generator, GeneratorConfig, QueryEncoder};

    fn model() -> Model {
        let cfg = GeneratorConfig {
            resolution: 16,
            block_count: 2,
            base_channels: 4,
            noise_dim: 8,
            mapping_width: 6,
            wavelet_levels: 1,
            ..GeneratorConfig::default()
        };
        Model {
            generator: Generator::new(cfg, 0).unwrap(),
            query: QueryEncoder::new(16, 4, 0).unwrap(),
        }
    }

    #[test]
    fn deterministic_and_single_entry() {
        let m = model();
        let lq = Tensor::from_fn(&[3, 8, 8], |i| (i % 11) as f64 / 11.0);
        let mut bank = MemoryBank::new(3, 4, 9).unwrap();
        let empty = restore(&lq, &m, &bank, 1).unwrap();
        assert!(empty.retrieved.is_none());
        assert_eq!(empty.code, WaveletCode::zeros(9));
        let code = WaveletCode::new((0..9).map(|i| i as f64 / 9.0).collect());
        bank.write(2, &Query::new(vec![1.0, -1.0, 0.5, 0.0]).unwrap(), &code, 1);
        let a = restore(&lq, &m, &bank, 1).unwrap();
        let b = restore(&lq, &m, &bank, 1).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.retrieved.unwrap().0, 2);
        assert_eq!(a.code, code);
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn attention_maps_cover_every_block() {
        let m = model();
        let lq = Tensor::from_fn(&[3, 8, 8], |i| (i % 5) as f64 / 5.0);
        let bank = MemoryBank::new(3, 4, 9).unwrap();
        let maps = attention_maps(&lq, &m, &bank, 0).unwrap();
        assert_eq!(maps.len(), 2);
        for b in &maps {
            let (c, h, w) = b.instance.dims3().unwrap();
            assert_eq!(c, 3);
            for i in 0..h * w {
                let s: f64 = (0..3).map(|k| b.instance.data()[k * h * w + i]).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}
