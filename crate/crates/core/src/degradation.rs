//! Blind degradation synthesis: blur, bicubic downsampling, additive Gaussian
//! noise and a block-DCT compression stage, applied in that order.
//!
//! Images are `[C, H, W]` tensors with values in `[0, 1]`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Normalized isotropic Gaussian kernel of side `2 * ceil(3 sigma) + 1`.
pub fn gaussian_kernel(sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::contract(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let half = (3.0 * sigma).ceil() as usize;
    let k = 2 * half + 1;
    let mut t = Tensor::from_fn(&[k, k], |i| {
        let y = (i / k) as f64 - half as f64;
        let x = (i % k) as f64 - half as f64;
        (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
    });
    normalize_kernel(&mut t);
    Ok(t)
}

fn normalize_kernel(t: &mut Tensor) {
    let s = t.sum();
    t.data_mut().iter_mut().for_each(|v| *v /= s);
}

/// Anti-aliased straight line of `length` unit-spaced taps through the kernel
/// center. `angle` is measured counter-clockwise from the +x axis with rows
/// growing downward.
pub fn motion_kernel(length: usize, angle: f64) -> Result<Tensor> {
    if length == 0 {
        return Err(Error::contract("motion blur length must be at least 1"));
    }
    let half = (length - 1).div_ceil(2) + usize::from(length > 1 && angle.sin().abs() > 1e-12 && angle.cos().abs() > 1e-12);
    let k = 2 * half + 1;
    let mut t = Tensor::zeros(&[k, k]);
    let (dx, dy) = (angle.cos(), -angle.sin());
    let w = 1.0 / length as f64;
    for i in 0..length {
        let s = i as f64 - (length as f64 - 1.0) / 2.0;
        let (px, py) = (half as f64 + s * dx, half as f64 + s * dy);
        let (x0, y0) = (px.floor(), py.floor());
        let (fx, fy) = (px - x0, py - y0);
        for (yy, wy) in [(y0, 1.0 - fy), (y0 + 1.0, fy)] {
            for (xx, wx) in [(x0, 1.0 - fx), (x0 + 1.0, fx)] {
                let wt = w * wy * wx;
                if wt == 0.0 {
                    continue;
                }
                let (r, c) = (yy as usize, xx as usize);
                t.data_mut()[r * k + c] += wt;
            }
        }
    }
    normalize_kernel(&mut t);
    Ok(t)
}

/// Convolves every channel with a square `kernel`, reflecting at the borders.
pub fn blur(image: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    let k = match kernel.shape() {
        &[a, b] if a == b && a % 2 == 1 => a,
        s => return Err(Error::shape("blur", format!("kernel must be odd square, got {s:?}"))),
    };
    let half = (k / 2) as isize;
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let mut r = i.rem_euclid(period);
        if r >= n {
            r = period - r;
        }
        r as usize
    };
    let kd = kernel.data();
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let plane = image.channel(ch);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for ky in 0..k {
                    let sy = reflect(y as isize + ky as isize - half, h);
                    let row = &plane[sy * w..(sy + 1) * w];
                    for kx in 0..k {
                        let sx = reflect(x as isize + kx as isize - half, w);
                        s += kd[ky * k + kx] * row[sx];
                    }
                }
                out.set3(ch, y, x, s);
            }
        }
    }
    Ok(out)
}

/// Catmull-Rom cubic (`a = -0.5`).
pub fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Taps for resampling one axis of extent `src` to `dst` samples. When
/// shrinking, the kernel is widened by the scale factor (antialiasing).
fn cubic_taps(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    let width = scale.max(1.0);
    let support = 2.0 * width;
    (0..dst)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for j in lo..=hi {
                let wgt = cubic((center - j as f64) / width);
                if wgt == 0.0 {
                    continue;
                }
                total += wgt;
                let idx = j.clamp(0, src as isize - 1) as usize;
                match taps.iter_mut().find(|t| t.0 == idx) {
                    Some(t) => t.1 += wgt,
                    None => taps.push((idx, wgt)),
                }
            }
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Separable bicubic resampling to `out_h x out_w`.
pub fn bicubic_resize(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::contract("bicubic target size must be positive"));
    }
    let ty = cubic_taps(h, out_h);
    let tx = cubic_taps(w, out_w);
    let mut tmp = vec![0.0; c * h * out_w];
    for ch in 0..c {
        let plane = image.channel(ch);
        for y in 0..h {
            for (ox, taps) in tx.iter().enumerate() {
                tmp[(ch * h + y) * out_w + ox] = taps.iter().map(|&(j, wt)| wt * plane[y * w + j]).sum();
            }
        }
    }
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        for (oy, taps) in ty.iter().enumerate() {
            for ox in 0..out_w {
                out[(ch * out_h + oy) * out_w + ox] =
                    taps.iter().map(|&(j, wt)| wt * tmp[(ch * h + j) * out_w + ox]).sum();
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Bicubic resize by an integer factor; shrinks when `down` is set.
pub fn bicubic_scale(image: &Tensor, factor: usize, down: bool) -> Result<Tensor> {
    let (_, h, w) = image.dims3()?;
    if factor == 0 {
        return Err(Error::contract("scale factor must be positive"));
    }
    if down {
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::contract(format!("{h}x{w} is not divisible by scale {factor}")));
        }
        bicubic_resize(image, h / factor, w / factor)
    } else {
        bicubic_resize(image, h * factor, w * factor)
    }
}

/// Adds `N(0, (sigma/255)^2)` noise and clamps to `[0, 1]`.
pub fn add_gaussian_noise<R: Rng + ?Sized>(image: &Tensor, sigma_255: f64, rng: &mut R) -> Tensor {
    if sigma_255 == 0.0 {
        return image.clone();
    }
    let s = sigma_255 / 255.0;
    let mut out = image.clone();
    for v in out.data_mut() {
        let n: f64 = StandardNormal.sample(rng);
        *v = (*v + s * n).clamp(0.0, 1.0);
    }
    out
}

/// Standard JPEG luminance quantization table (row-major, natural order).
pub const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Quality-scaled table, `clamp(floor((Q * s + 50) / 100), 1, 255)`.
pub fn quant_table(quality: u8) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::contract(format!("JPEG quality must be in 1..=100, got {quality}")));
    }
    let q = quality as u32;
    let s = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut t = [0.0; 64];
    for (o, &base) in t.iter_mut().zip(&LUMA_TABLE) {
        *o = ((base as u32 * s + 50) / 100).clamp(1, 255) as f64;
    }
    Ok(t)
}

fn dct_matrix() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (u, row) in m.iter_mut().enumerate() {
        let alpha = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = alpha * (((2 * x + 1) as f64 * u as f64 * PI) / 16.0).cos();
        }
    }
    m
}

/// Orthonormal 8x8 DCT-II.
pub fn dct8(block: &[f64; 64]) -> [f64; 64] {
    let m = dct_matrix();
    let mut tmp = [0.0; 64];
    for u in 0..8 {
        for x in 0..8 {
            tmp[u * 8 + x] = (0..8).map(|y| m[u][y] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            out[u * 8 + v] = (0..8).map(|x| tmp[u * 8 + x] * m[v][x]).sum();
        }
    }
    out
}

pub fn idct8(coef: &[f64; 64]) -> [f64; 64] {
    let m = dct_matrix();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for v in 0..8 {
            tmp[y * 8 + v] = (0..8).map(|u| m[u][y] * coef[u * 8 + v]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| tmp[y * 8 + v] * m[v][x]).sum();
        }
    }
    out
}

fn rgb_to_ycbcr(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    (
        0.299 * r + 0.587 * g + 0.114 * b,
        128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b,
        128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b,
    )
}

fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64) -> (f64, f64, f64) {
    (
        y + 1.402 * (cr - 128.0),
        y - 0.344_136 * (cb - 128.0) - 0.714_136 * (cr - 128.0),
        y + 1.772 * (cb - 128.0),
    )
}

/// Lossy block-DCT round trip: color transform (3-channel images), 8x8 DCT
/// per channel, quantization with the scaled luminance table, and back.
/// Borders are edge-replicated up to a multiple of 8.
pub fn jpeg_like(image: &Tensor, quality: u8) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if c != 1 && c != 3 {
        return Err(Error::shape("jpeg_like", format!("expected 1 or 3 channels, got {c}")));
    }
    let table = quant_table(quality)?;
    let (ph, pw) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let mut planes = vec![vec![0.0; ph * pw]; c];
    for y in 0..ph {
        for x in 0..pw {
            let (sy, sx) = (y.min(h - 1), x.min(w - 1));
            if c == 3 {
                let px = |ch| image.at3(ch, sy, sx) * 255.0;
                let (yy, cb, cr) = rgb_to_ycbcr(px(0), px(1), px(2));
                planes[0][y * pw + x] = yy;
                planes[1][y * pw + x] = cb;
                planes[2][y * pw + x] = cr;
            } else {
                planes[0][y * pw + x] = image.at3(0, sy, sx) * 255.0;
            }
        }
    }
    for plane in planes.iter_mut() {
        for by in (0..ph).step_by(8) {
            for bx in (0..pw).step_by(8) {
                let mut blk = [0.0; 64];
                for i in 0..8 {
                    for j in 0..8 {
                        blk[i * 8 + j] = plane[(by + i) * pw + bx + j] - 128.0;
                    }
                }
                let mut coef = dct8(&blk);
                for (v, q) in coef.iter_mut().zip(&table) {
                    *v = (*v / q).round() * q;
                }
                let rec = idct8(&coef);
                for i in 0..8 {
                    for j in 0..8 {
                        plane[(by + i) * pw + bx + j] = rec[i * 8 + j] + 128.0;
                    }
                }
            }
        }
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    for y in 0..h {
        for x in 0..w {
            let i = y * pw + x;
            if c == 3 {
                let (r, g, b) = ycbcr_to_rgb(planes[0][i], planes[1][i], planes[2][i]);
                for (ch, v) in [r, g, b].into_iter().enumerate() {
                    out.set3(ch, y, x, (v / 255.0).clamp(0.0, 1.0));
                }
            } else {
                out.set3(0, y, x, (planes[0][i] / 255.0).clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BlurKind {
    None,
    Gaussian { sigma: f64 },
    Motion { length: usize, angle: f64 },
}

/// Which optional stages run; downsampling always runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageMask {
    pub blur: bool,
    pub noise: bool,
    pub jpeg: bool,
}

/// One sampled realization of the degradation model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationConfig {
    pub blur: BlurKind,
    pub scale_r: usize,
    pub noise_sigma: f64,
    pub jpeg_quality: u8,
    pub stage_mask: StageMask,
    pub seed: u64,
}

/// Sampling ranges (inclusive) and optional-stage probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationRanges {
    pub scale: (usize, usize),
    pub noise_sigma: (f64, f64),
    pub jpeg_quality: (u8, u8),
    pub gaussian_sigma: (f64, f64),
    pub motion_length: (usize, usize),
    pub stage_probability: f64,
}

impl Default for DegradationRanges {
    fn default() -> Self {
        DegradationRanges {
            scale: (2, 12),
            noise_sigma: (1.0, 15.0),
            jpeg_quality: (40, 80),
            gaussian_sigma: (1.0, 5.0),
            motion_length: (3, 11),
            stage_probability: 0.5,
        }
    }
}

impl DegradationRanges {
    pub fn validate(&self) -> Result<()> {
        let ok = self.scale.0 >= 1
            && self.scale.0 <= self.scale.1
            && self.noise_sigma.0 >= 0.0
            && self.noise_sigma.0 <= self.noise_sigma.1
            && self.jpeg_quality.0 >= 1
            && self.jpeg_quality.0 <= self.jpeg_quality.1
            && self.jpeg_quality.1 <= 100
            && self.gaussian_sigma.0 > 0.0
            && self.gaussian_sigma.0 <= self.gaussian_sigma.1
            && self.motion_length.0 >= 1
            && self.motion_length.0 <= self.motion_length.1
            && (0.0..=1.0).contains(&self.stage_probability);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid degradation ranges {self:?}")))
        }
    }

    /// Draws a configuration from the seeded generator.
    pub fn sample(&self, seed: u64) -> Result<DegradationConfig> {
        let scales: Vec<usize> = (self.scale.0..=self.scale.1).collect();
        self.sample_from(seed, &scales)
    }

    /// Like [`sample`](Self::sample), but only draws scale factors that divide
    /// both `h` and `w`.
    pub fn sample_divisible(&self, seed: u64, h: usize, w: usize) -> Result<DegradationConfig> {
        let scales: Vec<usize> = (self.scale.0..=self.scale.1)
            .filter(|r| h.is_multiple_of(*r) && w.is_multiple_of(*r))
            .collect();
        if scales.is_empty() {
            return Err(Error::Config(format!(
                "no scale in {}..={} divides {h}x{w}",
                self.scale.0, self.scale.1
            )));
        }
        self.sample_from(seed, &scales)
    }

    fn sample_from(&self, seed: u64, scales: &[usize]) -> Result<DegradationConfig> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = self.stage_probability;
        let stage_mask = StageMask {
            blur: rng.random_bool(p),
            noise: rng.random_bool(p),
            jpeg: rng.random_bool(p),
        };
        let use_gaussian = rng.random_bool(0.5);
        let sigma = rng.random_range(self.gaussian_sigma.0..=self.gaussian_sigma.1);
        let length = rng.random_range(self.motion_length.0..=self.motion_length.1);
        let angle = rng.random_range(0.0..PI);
        let blur = if !stage_mask.blur {
            BlurKind::None
        } else if use_gaussian {
            BlurKind::Gaussian { sigma }
        } else {
            BlurKind::Motion { length, angle }
        };
        Ok(DegradationConfig {
            blur,
            scale_r: scales[rng.random_range(0..scales.len())],
            noise_sigma: rng.random_range(self.noise_sigma.0..=self.noise_sigma.1),
            jpeg_quality: rng.random_range(self.jpeg_quality.0..=self.jpeg_quality.1),
            stage_mask,
            seed,
        })
    }
}

/// Independent per-image seed derived from a master seed (SplitMix64 mix).
pub fn substream_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl DegradationConfig {
    /// Only downsampling by `r`.
    pub fn downsample_only(scale_r: usize) -> Self {
        DegradationConfig {
            blur: BlurKind::None,
            scale_r,
            noise_sigma: 0.0,
            jpeg_quality: 100,
            stage_mask: StageMask {
                blur: false,
                noise: false,
                jpeg: false,
            },
            seed: 0,
        }
    }

    /// The blur kernel of the active blur stage, if any.
    pub fn kernel(&self) -> Result<Option<Tensor>> {
        if !self.stage_mask.blur {
            return Ok(None);
        }
        match self.blur {
            BlurKind::None => Ok(None),
            BlurKind::Gaussian { sigma } => gaussian_kernel(sigma).map(Some),
            BlurKind::Motion { length, angle } => motion_kernel(length, angle).map(Some),
        }
    }
}

impl fmt::Display for DegradationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, sigma, length, angle) = match self.blur {
            BlurKind::None => ("none", 0.0, 0, 0.0),
            BlurKind::Gaussian { sigma } => ("gaussian", sigma, 0, 0.0),
            BlurKind::Motion { length, angle } => ("motion", 0.0, length, angle),
        };
        let m = self.stage_mask;
        write!(
            f,
            "seed={} blur={} gaussian_sigma={:?} motion_length={} motion_angle={:?} scale_r={} noise_sigma={:?} jpeg_quality={} mask_blur={} mask_noise={} mask_jpeg={}",
            self.seed, kind, sigma, length, angle, self.scale_r, self.noise_sigma, self.jpeg_quality,
            m.blur as u8, m.noise as u8, m.jpeg as u8
        )
    }
}

impl FromStr for DegradationConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut kv = std::collections::HashMap::new();
        for tok in s.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::format("manifest", format!("token {tok:?} is not key=value")))?;
            kv.insert(k, v);
        }
        fn get<T: FromStr>(kv: &std::collections::HashMap<&str, &str>, k: &str) -> Result<T> {
            kv.get(k)
                .ok_or_else(|| Error::format("manifest", format!("missing {k}")))?
                .parse()
                .map_err(|_| Error::format("manifest", format!("bad value for {k}")))
        }
        let flag = |k: &str| -> Result<bool> { Ok(get::<u8>(&kv, k)? != 0) };
        let blur = match *kv.get("blur").unwrap_or(&"none") {
            "none" => BlurKind::None,
            "gaussian" => BlurKind::Gaussian {
                sigma: get(&kv, "gaussian_sigma")?,
            },
            "motion" => BlurKind::Motion {
                length: get(&kv, "motion_length")?,
                angle: get(&kv, "motion_angle")?,
            },
            other => return Err(Error::format("manifest", format!("unknown blur kind {other}"))),
        };
        Ok(DegradationConfig {
            blur,
            scale_r: get(&kv, "scale_r")?,
            noise_sigma: get(&kv, "noise_sigma")?,
            jpeg_quality: get(&kv, "jpeg_quality")?,
            stage_mask: StageMask {
                blur: flag("mask_blur")?,
                noise: flag("mask_noise")?,
                jpeg: flag("mask_jpeg")?,
            },
            seed: get(&kv, "seed")?,
        })
    }
}

/// Applies blur, downsampling by `r`, noise and compression in that order.
pub fn degrade(image: &Tensor, config: &DegradationConfig) -> Result<(Tensor, DegradationConfig)> {
    let mut x = match config.kernel()? {
        Some(k) => blur(image, &k)?,
        None => image.clone(),
    };
    x = if config.scale_r == 1 {
        x
    } else {
        bicubic_scale(&x, config.scale_r, true)?.map(|v| v.clamp(0.0, 1.0))
    };
    if config.stage_mask.noise {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        x = add_gaussian_noise(&x, config.noise_sigma, &mut rng);
    }
    if config.stage_mask.jpeg {
        x = jpeg_like(&x, config.jpeg_quality)?;
    }
    Ok((x, *config))
}
