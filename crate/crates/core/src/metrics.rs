//! Full-reference image quality metrics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    a.dims3()
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|i| win[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| win[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM and mean contrast-structure term of one channel plane.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> (f64, f64) {
    let win = gaussian_window();
    let c1 = (K1 * peak).powi(2);
    let c2 = (K2 * peak).powi(2);
    let prod = |f: fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &win);
    let mu_b = filter_valid(b, h, w, &win);
    let aa = filter_valid(&prod(|x, _| x * x), h, w, &win);
    let bb = filter_valid(&prod(|_, y| y * y), h, w, &win);
    let ab = filter_valid(&prod(|x, y| x * y), h, w, &win);
    let n = mu_a.len() as f64;
    let (mut s_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let cs = (2.0 * cov + c2) / (va + vb + c2);
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        s_sum += l * cs;
        cs_sum += cs;
    }
    (s_sum / n, cs_sum / n)
}

fn ssim_parts(a: &Tensor, b: &Tensor, peak: f64) -> Result<(f64, f64)> {
    let (c, h, w) = same_shape("ssim", a, b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let (mut s, mut cs) = (0.0, 0.0);
    for ch in 0..c {
        let (a1, b1) = ssim_plane(a.channel(ch), b.channel(ch), h, w, peak);
        s += a1;
        cs += b1;
    }
    Ok((s / c as f64, cs / c as f64))
}

/// Structural similarity with data range 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ssim_with_peak(a, b, 1.0)
}

pub fn ssim_with_peak(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    Ok(ssim_parts(a, b, peak)?.0)
}

/// Number of dyadic scales usable for an `h x w` image (at most 5).
pub fn ms_ssim_scales(h: usize, w: usize) -> usize {
    let mut n = 0;
    let (mut h, mut w) = (h, w);
    while n < MS_SSIM_WEIGHTS.len() && h >= SSIM_WINDOW && w >= SSIM_WINDOW {
        n += 1;
        h /= 2;
        w /= 2;
    }
    n
}

/// 2x2 mean downsampling, dropping an odd trailing row or column.
pub fn halve(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let s = x.at3(ch, 2 * y, 2 * xx)
                    + x.at3(ch, 2 * y + 1, 2 * xx)
                    + x.at3(ch, 2 * y, 2 * xx + 1)
                    + x.at3(ch, 2 * y + 1, 2 * xx + 1);
                out.set3(ch, y, xx, s / 4.0);
            }
        }
    }
    Ok(out)
}

/// Multi-scale SSIM with data range 1. Uses fewer scales (exponents
/// renormalized) when the image is too small for five.
pub fn ms_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (_, h, w) = same_shape("ms_ssim", a, b)?;
    let scales = ms_ssim_scales(h, w);
    if scales == 0 {
        return Err(Error::contract(format!(
            "ms_ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    if scales < MS_SSIM_WEIGHTS.len() {
        log::warn!("ms_ssim: {h}x{w} image supports only {scales} scales; exponents renormalized");
    }
    let wsum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let (mut x, mut y) = (a.clone(), b.clone());
    let mut out = 1.0;
    for (s, weight) in MS_SSIM_WEIGHTS[..scales].iter().enumerate() {
        let (full, cs) = ssim_parts(&x, &y, 1.0)?;
        let e = weight / wsum;
        if scales == 1 {
            return Ok(full);
        }
        if s + 1 == scales {
            out *= full.max(0.0).powf(e);
        } else {
            out *= cs.max(0.0).powf(e);
            x = halve(&x)?;
            y = halve(&y)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_img(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        Tensor::uniform(&[c, h, w], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn psnr_cases() {
        let a = rand_img(3, 8, 8, 1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let c = rand_img(3, 8, 8, 2);
        let mse: f64 = a.data().iter().zip(c.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 192.0;
        assert!((psnr(&a, &c, 1.0).unwrap() - (-10.0 * mse.log10())).abs() < 1e-9);
        assert_eq!(psnr(&a, &c, 1.0).unwrap(), psnr(&c, &a, 1.0).unwrap());
        assert!(psnr(&a, &rand_img(3, 8, 9, 2), 1.0).is_err());
    }

    fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
        let (c, h, w) = a.dims3().unwrap();
        let mut win = [[0.0; 11]; 11];
        let mut tot = 0.0;
        for (i, row) in win.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (y, x) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(x * x + y * y) / 4.5).exp();
                tot += *v;
            }
        }
        let (c1, c2) = (1e-4, 9e-4);
        let mut acc = 0.0;
        let mut count = 0.0;
        for ch in 0..c {
            for y in 0..=h - 11 {
                for x in 0..=w - 11 {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wt = win[i][j] / tot;
                            let p = a.at3(ch, y + i, x + j);
                            let q = b.at3(ch, y + i, x + j);
                            ma += wt * p;
                            mb += wt * q;
                            saa += wt * p * p;
                            sbb += wt * q * q;
                            sab += wt * p * q;
                        }
                    }
                    let va = saa - ma * ma;
                    let vb = sbb - mb * mb;
                    let cov = sab - ma * mb;
                    acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1.0;
                }
            }
        }
        acc / count
    }

    #[test]
    fn ssim_cases() {
        let a = rand_img(3, 20, 24, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let flat = Tensor::full(&[1, 16, 16], 0.2);
        let shifted = flat.map(|v| v + 0.7);
        assert!(ssim(&flat, &shifted).unwrap() < 1.0);
        let b = rand_img(3, 20, 24, 4);
        let s = ssim(&a, &b).unwrap();
        assert!((s - ssim_oracle(&a, &b)).abs() < 1e-6);
        assert_eq!(s, ssim(&b, &a).unwrap());
        assert!((-1.0..1.0).contains(&s));
        assert!(ssim(&rand_img(1, 8, 8, 1), &rand_img(1, 8, 8, 2)).is_err());
    }

    #[test]
    fn ms_ssim_cases() {
        let a = rand_img(1, 16, 16, 5);
        let b = rand_img(1, 16, 16, 6);
        assert_eq!(ms_ssim_scales(16, 16), 1);
        assert!((ms_ssim(&a, &b).unwrap() - ssim(&a, &b).unwrap()).abs() < 1e-12);
        assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ms_ssim_scales(176, 176), 5);
        assert_eq!(ms_ssim_scales(128, 128), 4);
    }

    #[test]
    fn ms_ssim_composes_scales() {
        let a = rand_img(1, 128, 128, 7);
        let b = a.zip_map(&rand_img(1, 128, 128, 8), |x, y| 0.7 * x + 0.3 * y).unwrap();
        let n = ms_ssim_scales(128, 128);
        let wsum: f64 = MS_SSIM_WEIGHTS[..n].iter().sum();
        let (mut x, mut y) = (a.clone(), b.clone());
        let mut oracle = 1.0;
        for s in 0..n {
            let (full, cs) = ssim_parts(&x, &y, 1.0).unwrap();
            let term = if s + 1 == n { full } else { cs };
            oracle *= term.powf(MS_SSIM_WEIGHTS[s] / wsum);
            x = halve(&x).unwrap();
            y = halve(&y).unwrap();
        }
        assert!((ms_ssim(&a, &b).unwrap() - oracle).abs() < 1e-6);
    }
}
