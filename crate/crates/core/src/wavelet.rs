//! Full wavelet packet decomposition with the orthonormal Haar filters, its
//! exact inverse, and the pooled wavelet style code.
//!
//! At every level all four children of every node are split again, so an
//! `n`-level tree holds `4^n` equally sized subbands. Children of one split are
//! ordered (row-low, col-low), (row-low, col-high), (row-high, col-low),
//! (row-high, col-high), where "row" is the filter run along each image row
//! (horizontal) and "col" the filter run down each column (vertical). Subband
//! `j` of an `n`-level tree sits at `parent * 4 + child`, so index 0 is the
//! all-lowpass band.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decomposition of a `[C, H, W]` image into `4^levels` subbands.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPacketTree {
    levels: usize,
    channel_count: usize,
    /// Each subband is `[C, H / 2^n, W / 2^n]`.
    subbands: Vec<Tensor>,
    /// Extent of the decomposed (possibly padded) image.
    padded_shape: (usize, usize),
    /// Extent of the image before reflect padding.
    original_shape: (usize, usize),
}

/// How detail subbands are reduced to one number each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CodePooling {
    /// Signed spatial mean (adaptive average pooling).
    #[default]
    Mean,
    /// Mean of absolute coefficients.
    Energy,
}

/// Pooled detail-band statistics, channel-major then subband `1..4^n`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletCode {
    pub values: Vec<f64>,
}

impl WaveletCode {
    pub fn new(values: Vec<f64>) -> Self {
        WaveletCode { values }
    }

    pub fn zeros(len: usize) -> Self {
        WaveletCode { values: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(&[self.values.len()], self.values.clone()).expect("vector")
    }
}

/// Length of the style code for `channels` channels and `levels` levels.
pub fn code_len(channels: usize, levels: usize) -> usize {
    channels * (4usize.pow(levels as u32) - 1)
}

const R2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Splits one `h x w` plane into four `h/2 x w/2` planes.
fn split(plane: &[f64], h: usize, w: usize) -> [Vec<f64>; 4] {
    let (ho, wo) = (h / 2, w / 2);
    let mut out: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; ho * wo]);
    for y in 0..ho {
        for x in 0..wo {
            let a = plane[2 * y * w + 2 * x];
            let b = plane[2 * y * w + 2 * x + 1];
            let c = plane[(2 * y + 1) * w + 2 * x];
            let d = plane[(2 * y + 1) * w + 2 * x + 1];
            // horizontal pass
            let (top_lo, top_hi) = ((a + b) * R2, (a - b) * R2);
            let (bot_lo, bot_hi) = ((c + d) * R2, (c - d) * R2);
            // vertical pass
            let i = y * wo + x;
            out[0][i] = (top_lo + bot_lo) * R2;
            out[1][i] = (top_lo - bot_lo) * R2;
            out[2][i] = (top_hi + bot_hi) * R2;
            out[3][i] = (top_hi - bot_hi) * R2;
        }
    }
    out
}

fn merge(parts: [&[f64]; 4], ho: usize, wo: usize) -> Vec<f64> {
    let (h, w) = (ho * 2, wo * 2);
    let mut plane = vec![0.0; h * w];
    for y in 0..ho {
        for x in 0..wo {
            let i = y * wo + x;
            let (ll, lh, hl, hh) = (parts[0][i], parts[1][i], parts[2][i], parts[3][i]);
            let top_lo = (ll + lh) * R2;
            let bot_lo = (ll - lh) * R2;
            let top_hi = (hl + hh) * R2;
            let bot_hi = (hl - hh) * R2;
            plane[2 * y * w + 2 * x] = (top_lo + top_hi) * R2;
            plane[2 * y * w + 2 * x + 1] = (top_lo - top_hi) * R2;
            plane[(2 * y + 1) * w + 2 * x] = (bot_lo + bot_hi) * R2;
            plane[(2 * y + 1) * w + 2 * x + 1] = (bot_lo - bot_hi) * R2;
        }
    }
    plane
}

/// `n`-level full packet decomposition. `H` and `W` must be multiples of `2^n`.
pub fn wpd_forward(image: &Tensor, levels: usize) -> Result<WaveletPacketTree> {
    let (c, h, w) = image.dims3()?;
    if levels == 0 {
        return Err(Error::contract("wavelet packet decomposition needs at least one level"));
    }
    let m = 1usize << levels;
    if h % m != 0 || w % m != 0 {
        return Err(Error::contract(format!(
            "image {h}x{w} must be a multiple of {m} for {levels}-level decomposition"
        )));
    }
    // per channel: current list of nodes
    let mut per_channel: Vec<Vec<Vec<f64>>> = (0..c).map(|ch| vec![image.channel(ch).to_vec()]).collect();
    let (mut ch_h, mut ch_w) = (h, w);
    for _ in 0..levels {
        for nodes in per_channel.iter_mut() {
            *nodes = nodes.iter().flat_map(|p| split(p, ch_h, ch_w)).collect();
        }
        ch_h /= 2;
        ch_w /= 2;
    }
    let count = 4usize.pow(levels as u32);
    let subbands = (0..count)
        .map(|j| {
            let data = per_channel.iter().flat_map(|nodes| nodes[j].iter().copied()).collect();
            Tensor::new(&[c, ch_h, ch_w], data).expect("subband shape")
        })
        .collect();
    Ok(WaveletPacketTree {
        levels,
        channel_count: c,
        subbands,
        padded_shape: (h, w),
        original_shape: (h, w),
    })
}

/// Reflect-pads the image up to the next multiple of `2^levels` before
/// decomposing; the inverse crops the padding away again.
pub fn wpd_forward_padded(image: &Tensor, levels: usize) -> Result<WaveletPacketTree> {
    let (_, h, w) = image.dims3()?;
    let m = 1usize << levels;
    let ph = h.div_ceil(m) * m;
    let pw = w.div_ceil(m) * m;
    let padded = reflect_pad(image, ph, pw)?;
    let mut tree = wpd_forward(&padded, levels)?;
    tree.original_shape = (h, w);
    Ok(tree)
}

/// Pads bottom/right edges by mirror reflection (edge sample not repeated).
pub fn reflect_pad(image: &Tensor, ph: usize, pw: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if ph < h || pw < w {
        return Err(Error::contract("padded size smaller than image"));
    }
    let reflect = |i: usize, n: usize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let r = i % period;
        if r < n {
            r
        } else {
            period - r
        }
    };
    let mut out = Tensor::zeros(&[c, ph, pw]);
    for ch in 0..c {
        for y in 0..ph {
            for x in 0..pw {
                out.set3(ch, y, x, image.at3(ch, reflect(y, h), reflect(x, w)));
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`wpd_forward`] (and of the padded variant, which is
/// cropped back to its original extent).
pub fn wpd_inverse(tree: &WaveletPacketTree) -> Result<Tensor> {
    let expected = 4usize.pow(tree.levels as u32);
    if tree.levels == 0 || tree.subbands.len() != expected {
        return Err(Error::contract(format!(
            "tree with {} levels must have {expected} subbands, found {}",
            tree.levels,
            tree.subbands.len()
        )));
    }
    let (c, mut sh, mut sw) = tree.subbands[0].dims3()?;
    if tree.subbands.iter().any(|s| s.shape() != [c, sh, sw]) {
        return Err(Error::contract("subbands disagree in shape"));
    }
    let mut per_channel: Vec<Vec<Vec<f64>>> = (0..c)
        .map(|ch| tree.subbands.iter().map(|s| s.channel(ch).to_vec()).collect())
        .collect();
    for _ in 0..tree.levels {
        for nodes in per_channel.iter_mut() {
            *nodes = nodes
                .chunks_exact(4)
                .map(|q| merge([&q[0], &q[1], &q[2], &q[3]], sh, sw))
                .collect();
        }
        sh *= 2;
        sw *= 2;
    }
    let data: Vec<f64> = per_channel.into_iter().flat_map(|mut n| n.remove(0)).collect();
    let full = Tensor::new(&[c, sh, sw], data)?;
    let (oh, ow) = tree.original_shape;
    if (oh, ow) == (sh, sw) {
        Ok(full)
    } else {
        crate::ops::crop(&full, 0, 0, oh, ow)
    }
}

/// Pooled code over the detail subbands `1..4^n` (the all-lowpass band is
/// excluded), channel-major.
pub fn wavelet_style_code(tree: &WaveletPacketTree) -> WaveletCode {
    wavelet_style_code_with(tree, CodePooling::Mean)
}

pub fn wavelet_style_code_with(tree: &WaveletPacketTree, pooling: CodePooling) -> WaveletCode {
    let mut values = Vec::with_capacity(code_len(tree.channel_count, tree.levels));
    for ch in 0..tree.channel_count {
        for band in &tree.subbands[1..] {
            let plane = band.channel(ch);
            let n = plane.len() as f64;
            let v = match pooling {
                CodePooling::Mean => plane.iter().sum::<f64>() / n,
                CodePooling::Energy => plane.iter().map(|v| v.abs()).sum::<f64>() / n,
            };
            values.push(v);
        }
    }
    WaveletCode { values }
}

impl WaveletPacketTree {
    /// Builds a tree from explicit subbands (each `[C, h, w]`).
    pub fn from_subbands(levels: usize, subbands: Vec<Tensor>) -> Result<Self> {
        let first = subbands
            .first()
            .ok_or_else(|| Error::contract("tree needs subbands"))?;
        let (c, h, w) = first.dims3()?;
        let m = 1usize << levels;
        Ok(WaveletPacketTree {
            levels,
            channel_count: c,
            subbands,
            padded_shape: (h * m, w * m),
            original_shape: (h * m, w * m),
        })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn channel_count(&self) -> usize {
        self.channel_count
    }

    pub fn subbands(&self) -> &[Tensor] {
        &self.subbands
    }

    pub fn original_shape(&self) -> (usize, usize) {
        self.original_shape
    }

    pub fn padded_shape(&self) -> (usize, usize) {
        self.padded_shape
    }

    /// Sum of squared coefficients over all subbands.
    pub fn energy(&self) -> f64 {
        self.subbands.iter().map(Tensor::sum_sq).sum()
    }

    /// Tile position `(row, col)` of subband `j` in a `2^n x 2^n` mosaic;
    /// vertical detail moves down, horizontal detail moves right.
    pub fn tile_position(&self, j: usize) -> (usize, usize) {
        let (mut row, mut col) = (0, 0);
        for l in 0..self.levels {
            let child = (j >> (2 * (self.levels - 1 - l))) & 3;
            row = row * 2 + (child & 1);
            col = col * 2 + (child >> 1);
        }
        (row, col)
    }

    /// One channel's subbands arranged as a mosaic, each tile independently
    /// stretched to `[0, 1]`.
    pub fn mosaic(&self, channel: usize) -> Tensor {
        let (_, sh, sw) = self.subbands[0].dims3().expect("rank 3");
        let m = 1usize << self.levels;
        let mut out = Tensor::zeros(&[1, sh * m, sw * m]);
        for (j, band) in self.subbands.iter().enumerate() {
            let plane = band.channel(channel);
            let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = if hi - lo > 1e-12 { hi - lo } else { 1.0 };
            let (r, c) = self.tile_position(j);
            for y in 0..sh {
                for x in 0..sw {
                    let v = if hi - lo > 1e-12 { (plane[y * sw + x] - lo) / span } else { 0.5 };
                    out.set3(0, r * sh + y, c * sw + x, v);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_block_has_no_detail() {
        let t = wpd_forward(&Tensor::full(&[1, 2, 2], 1.0), 1).unwrap();
        let vals: Vec<f64> = t.subbands().iter().map(|s| s.data()[0]).collect();
        assert!((vals[0] - 2.0).abs() < 1e-15);
        assert!(vals[1..].iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn horizontal_oscillation_lands_in_row_high_col_low() {
        let img = Tensor::new(&[1, 2, 2], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let t = wpd_forward(&img, 1).unwrap();
        let vals: Vec<f64> = t.subbands().iter().map(|s| s.data()[0]).collect();
        assert!(vals[0].abs() < 1e-15 && vals[1].abs() < 1e-15 && vals[3].abs() < 1e-15);
        assert!((vals[2] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn indivisible_size_names_multiple() {
        let err = wpd_forward(&Tensor::zeros(&[1, 12, 16]), 3).unwrap_err();
        assert!(err.to_string().contains("multiple of 8"), "{err}");
    }

    #[test]
    fn zero_tree_inverts_to_zero() {
        let bands = (0..16).map(|_| Tensor::zeros(&[2, 3, 3])).collect();
        let tree = WaveletPacketTree::from_subbands(2, bands).unwrap();
        let img = wpd_inverse(&tree).unwrap();
        assert_eq!(img.shape(), &[2, 12, 12]);
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn malformed_tree_rejected() {
        let bands = (0..5).map(|_| Tensor::zeros(&[1, 2, 2])).collect();
        let tree = WaveletPacketTree::from_subbands(1, bands).unwrap();
        assert!(wpd_inverse(&tree).is_err());
    }

    #[test]
    fn small_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::uniform(&[1, 8, 8], -1.0, 1.0, &mut rng);
        let back = wpd_inverse(&wpd_forward(&img, 1).unwrap()).unwrap();
        assert!(back.max_abs_diff(&img) < 1e-10);
    }

    #[test]
    fn code_means_match_direct_subband_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Tensor::uniform(&[1, 16, 16], 0.0, 1.0, &mut rng);
        let tree = wpd_forward(&img, 2).unwrap();
        let code = wavelet_style_code(&tree);
        assert_eq!(code.len(), 15);
        for j in 1..16 {
            let band = &tree.subbands()[j];
            let mean = band.data().iter().sum::<f64>() / band.numel() as f64;
            assert!((code.values[j - 1] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_image_code_is_zero() {
        let tree = wpd_forward(&Tensor::full(&[3, 32, 32], 0.4), 3).unwrap();
        let code = wavelet_style_code(&tree);
        assert_eq!(code.len(), code_len(3, 3));
        assert!(code.values.iter().all(|v| v.abs() < 1e-12));
        let energy = wavelet_style_code_with(&tree, CodePooling::Energy);
        assert!(energy.values.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn full_scale_code_is_765() {
        assert_eq!(code_len(3, 4), 765);
        let tree = wpd_forward(&Tensor::zeros(&[3, 16, 16]), 4).unwrap();
        assert_eq!(wavelet_style_code(&tree).len(), 765);
    }

    #[test]
    fn padded_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = Tensor::uniform(&[2, 13, 10], 0.0, 1.0, &mut rng);
        let tree = wpd_forward_padded(&img, 2).unwrap();
        assert_eq!(tree.padded_shape(), (16, 12));
        assert_eq!(tree.original_shape(), (13, 10));
        assert!(wpd_inverse(&tree).unwrap().max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn tile_positions_cover_the_mosaic() {
        let tree = wpd_forward(&Tensor::zeros(&[1, 8, 8], ), 2).unwrap();
        let mut seen = std::collections::HashSet::new();
        for j in 0..16 {
            assert!(seen.insert(tree.tile_position(j)));
        }
        assert_eq!(tree.tile_position(0), (0, 0));
        assert_eq!(tree.mosaic(0).shape(), &[1, 8, 8]);
    }
}
