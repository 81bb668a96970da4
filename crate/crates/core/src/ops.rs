//! Plain (non-recording) tensor operations.

use crate::error::{Error, Result};
use crate::kernels::{self, BilinearAxis, ConvGeom};
use crate::tensor::Tensor;

/// Cross-correlation of a `[C_in, H, W]` input with a `[C_out, C_in, k, k]`
/// weight.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let geom = ConvGeom::new(input.shape(), weight.shape(), bias.shape(), stride, pad)?;
    let (out, _) = kernels::conv2d_forward(input.data(), weight.data(), bias.data(), &geom);
    Tensor::new(&[geom.c_out, geom.h_out, geom.w_out], out)
}

/// `weight * input + bias`.
pub fn fully_connected(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (d_out, d_in) = match weight.shape() {
        &[o, i] => (o, i),
        s => return Err(Error::shape("fully_connected", format!("weight must be rank 2, got {s:?}"))),
    };
    if input.shape() != [d_in] {
        return Err(Error::shape(
            "fully_connected",
            format!("input {:?} does not match weight inner extent {d_in}", input.shape()),
        ));
    }
    if bias.shape() != [d_out] {
        return Err(Error::shape(
            "fully_connected",
            format!("bias {:?} does not match weight outer extent {d_out}", bias.shape()),
        ));
    }
    let x = input.data();
    let w = weight.data();
    let out = (0..d_out)
        .map(|o| {
            w[o * d_in..(o + 1) * d_in]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + bias.data()[o]
        })
        .collect();
    Tensor::new(&[d_out], out)
}

pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = kernels::axis_view(input.shape(), axis)?;
    Tensor::new(input.shape(), kernels::softmax_forward(input.data(), outer, n, inner))
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(crate::graph::sigmoid)
}

pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if factor == 0 {
        return Err(Error::contract("upsample factor must be positive"));
    }
    let (ho, wo) = (h * factor, w * factor);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                out[(ch * ho + oy) * wo + ox] = input.at3(ch, oy / factor, ox / factor);
            }
        }
    }
    Tensor::new(&[c, ho, wo], out)
}

/// Non-overlapping `k x k` mean pooling.
pub fn avg_pool(input: &Tensor, k: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::shape(
            "avg_pool",
            format!("{h}x{w} is not divisible by pool size {k}"),
        ));
    }
    let (ho, wo) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for yy in 0..h {
            for xx in 0..w {
                out[(ch * ho + yy / k) * wo + xx / k] += input.at3(ch, yy, xx);
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= norm);
    Tensor::new(&[c, ho, wo], out)
}

pub fn resize_bilinear(input: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, hi, wi) = input.dims3()?;
    if h == 0 || w == 0 {
        return Err(Error::contract("bilinear target must be non-empty"));
    }
    let ay = BilinearAxis::new(hi, h);
    let ax = BilinearAxis::new(wi, w);
    Tensor::new(&[c, h, w], kernels::bilinear_forward(input.data(), c, hi, wi, &ay, &ax))
}

pub fn crop(input: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
    let (c, hi, wi) = input.dims3()?;
    if y0 + h > hi || x0 + w > wi || h == 0 || w == 0 {
        return Err(Error::shape(
            "crop",
            format!("window ({y0},{x0}) {h}x{w} outside {hi}x{wi}"),
        ));
    }
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for yy in 0..h {
            let row = (ch * hi + y0 + yy) * wi + x0;
            out.extend_from_slice(&input.data()[row..row + w]);
        }
    }
    Tensor::new(&[c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (ci, h, wd) = x.dims3().unwrap();
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[co, ho, wo]);
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b.data()[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.at3(c, iy as usize, ix as usize)
                                        * w.data()[((o * ci + c) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out.set3(o, oy, ox, s);
                }
            }
        }
        out
    }

    #[test]
    fn conv_full_overlap_center() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap();
        assert_eq!(y.at3(0, 1, 1), 9.0);
        assert_eq!(y.at3(0, 0, 0), 4.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[1, 4, 5], -1.0, 1.0, &mut rng);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_six_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::uniform(&[2, 5, 5], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[3], -1.0, 1.0, &mut rng);
        for (stride, pad) in [(1, 1), (1, 0), (2, 1)] {
            let got = conv2d(&x, &w, &b, stride, pad).unwrap();
            let want = naive_conv(&x, &w, &b, stride, pad);
            assert!(got.max_abs_diff(&want) < 1e-12, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn conv_shape_errors_name_axes() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap_err();
        assert!(err.to_string().contains("axis 1"), "{err}");
        let w = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(conv2d(&x, &w, &Tensor::zeros(&[1]), 2, 1).is_err());
    }

    #[test]
    fn fully_connected_cases() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        assert_eq!(fully_connected(&x, &eye, &Tensor::zeros(&[3])).unwrap(), x);
        let b = Tensor::new(&[2], vec![0.25, -4.0]).unwrap();
        assert_eq!(fully_connected(&x, &Tensor::zeros(&[2, 3]), &b).unwrap(), b);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(&[4], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[3], -1.0, 1.0, &mut rng);
        let y = fully_connected(&x, &w, &b).unwrap();
        for o in 0..3 {
            let mut s = b.data()[o];
            for i in 0..4 {
                s += w.data()[o * 4 + i] * x.data()[i];
            }
            assert!((y.data()[o] - s).abs() < 1e-12);
        }
        assert!(fully_connected(&Tensor::zeros(&[5]), &w, &b).is_err());
    }

    #[test]
    fn softmax_examples() {
        let y = softmax(&Tensor::zeros(&[3]), 0).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = 0.7;
        let y = softmax(&Tensor::new(&[2], vec![x, x + 2f64.ln()]).unwrap(), 0).unwrap();
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-12);
        // 1/(1+e) and e/(1+e) to 17 significant digits
        let y = softmax(&Tensor::new(&[2], vec![1000.0, 1001.0]).unwrap(), 0).unwrap();
        assert!((y.data()[0] - 0.268_941_421_369_995_1).abs() < 1e-15);
        assert!((y.data()[1] - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn softmax_inner_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(&[3, 4, 5], -30.0, 30.0, &mut rng);
        let y = softmax(&x, 1).unwrap();
        for a in 0..3 {
            for c in 0..5 {
                let s: f64 = (0..4).map(|b| y.data()[(a * 4 + b) * 5 + c]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_and_upsampling() {
        let x = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
        let p = avg_pool(&x, 2).unwrap();
        assert_eq!(p.data(), &[2.5, 4.5, 10.5, 12.5]);
        let u = upsample_nearest(&p, 2).unwrap();
        assert_eq!(u.shape(), &[1, 4, 4]);
        assert_eq!(u.at3(0, 3, 3), 12.5);
        assert!(avg_pool(&Tensor::zeros(&[1, 5, 4]), 2).is_err());
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::uniform(&[2, 5, 7], 0.0, 1.0, &mut rng);
        assert!(resize_bilinear(&x, 5, 7).unwrap().max_abs_diff(&x) < 1e-15);
        let c = Tensor::full(&[1, 4, 4], 0.3);
        let y = resize_bilinear(&c, 9, 3).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
    }
}
