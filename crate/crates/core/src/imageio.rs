//! 8-bit PNG reading and writing for `[C, H, W]` tensors in `[0, 1]`.

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image(format!("{}: {e}", path.display()))
}

/// Loads any supported image as a 3-channel tensor in `[0, 1]`.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} does not exist", path.display()),
        )));
    }
    let img = ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|e| image_err(path, e))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set3(c, y as usize, x as usize, p[c] as f64 / 255.0);
        }
    }
    Ok(t)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1- or 3-channel tensor as an 8-bit PNG (values clamped).
pub fn save_png(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = t.dims3()?;
    match c {
        1 => {
            let img = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([quantize(t.at3(0, y as usize, x as usize))]));
            img.save(path).map_err(|e| image_err(path, e))
        }
        3 => {
            let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                image::Rgb([0, 1, 2].map(|ch| quantize(t.at3(ch, y as usize, x as usize))))
            });
            img.save(path).map_err(|e| image_err(path, e))
        }
        _ => Err(Error::shape("save_png", format!("expected 1 or 3 channels, got {c}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_eight_bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let t = Tensor::from_fn(&[3, 5, 7], |i| ((i * 37) % 256) as f64 / 255.0);
        save_png(&p, &t).unwrap();
        assert_eq!(load_rgb(&p).unwrap(), t);
        let g = Tensor::from_fn(&[1, 4, 4], |i| i as f64 / 15.0);
        save_png(dir.path().join("g.png"), &g).unwrap();
        let back = load_rgb(dir.path().join("g.png")).unwrap();
        assert_eq!(back.shape(), &[3, 4, 4]);
        assert!(matches!(load_rgb(dir.path().join("missing.png")), Err(Error::Io(_))));
        assert!(save_png(dir.path().join("x.png"), &Tensor::zeros(&[2, 2, 2])).is_err());
    }
}
