//! Procedural toy faces: a head ellipse with two eyes and a mouth arc over a
//! gradient background. Component rectangles are known analytically.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::degradation::substream_seed;
use crate::error::{Error, Result};
use crate::imageio::{load_rgb, save_png};
use crate::objectives::CropBox;
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Ellipse in normalized image coordinates (`[0, 1]` on both axes).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    fn inside(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }

    /// Pixel bounding box at resolution `res`, clipped to the image.
    pub fn pixel_box(&self, res: usize) -> CropBox {
        bbox(self.cx - self.rx, self.cy - self.ry, self.cx + self.rx, self.cy + self.ry, res)
    }
}

fn bbox(x0: f64, y0: f64, x1: f64, y1: f64, res: usize) -> CropBox {
    let r = res as f64;
    let px0 = (x0 * r).floor().max(0.0) as usize;
    let py0 = (y0 * r).floor().max(0.0) as usize;
    let px1 = ((x1 * r).ceil() as usize).min(res);
    let py1 = ((y1 * r).ceil() as usize).min(res);
    CropBox {
        y0: py0,
        x0: px0,
        h: (py1 - py0).max(1),
        w: (px1 - px0).max(1),
    }
}

/// Parabolic mouth band `y = cy + bend * (1 - ((x - cx) / half_width)^2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MouthArc {
    pub cx: f64,
    pub cy: f64,
    pub half_width: f64,
    pub bend: f64,
    pub thickness: f64,
}

impl MouthArc {
    fn inside(&self, x: f64, y: f64) -> bool {
        let u = (x - self.cx) / self.half_width;
        if u.abs() > 1.0 {
            return false;
        }
        let center = self.cy + self.bend * (1.0 - u * u);
        (y - center).abs() <= self.thickness / 2.0
    }

    pub fn pixel_box(&self, res: usize) -> CropBox {
        let lo = self.cy.min(self.cy + self.bend) - self.thickness / 2.0;
        let hi = self.cy.max(self.cy + self.bend) + self.thickness / 2.0;
        bbox(self.cx - self.half_width, lo, self.cx + self.half_width, hi, res)
    }
}

/// Crop rectangles of the three facial components.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComponentBoxes {
    pub left_eye: CropBox,
    pub right_eye: CropBox,
    pub mouth: CropBox,
}

impl ComponentBoxes {
    pub fn to_vec(&self) -> Vec<CropBox> {
        vec![self.left_eye, self.right_eye, self.mouth]
    }
}

/// Everything needed to render one face.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyFaceSpec {
    pub head: Ellipse,
    pub eyes: [Ellipse; 2],
    pub pupil_scale: f64,
    pub mouth: MouthArc,
    pub background: [[f64; 3]; 2],
    pub skin: [f64; 3],
    pub iris: [f64; 3],
    pub lip: [f64; 3],
    /// Amplitude of the sinusoidal skin texture.
    pub texture_amplitude: f64,
    /// `(frequency_x, frequency_y, phase)` of each texture component.
    pub texture: Vec<(f64, f64, f64)>,
}

fn color<R: Rng + ?Sized>(rng: &mut R, lo: [f64; 3], hi: [f64; 3]) -> [f64; 3] {
    [
        rng.random_range(lo[0]..=hi[0]),
        rng.random_range(lo[1]..=hi[1]),
        rng.random_range(lo[2]..=hi[2]),
    ]
}

impl ToyFaceSpec {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let head = Ellipse {
            cx: rng.random_range(0.47..=0.53),
            cy: rng.random_range(0.49..=0.55),
            rx: rng.random_range(0.28..=0.36),
            ry: rng.random_range(0.36..=0.43),
        };
        let dx = rng.random_range(0.33..=0.45) * head.rx;
        let dy = rng.random_range(0.15..=0.30) * head.ry;
        let erx = rng.random_range(0.05..=0.075);
        let ery = rng.random_range(0.03..=0.045);
        let eyes = [-1.0, 1.0].map(|side| Ellipse {
            cx: head.cx + side * dx,
            cy: head.cy - dy,
            rx: erx,
            ry: ery,
        });
        let mouth = MouthArc {
            cx: head.cx,
            cy: head.cy + rng.random_range(0.38..=0.50) * head.ry,
            half_width: rng.random_range(0.30..=0.45) * head.rx,
            bend: rng.random_range(-0.04..=0.05),
            thickness: rng.random_range(0.025..=0.04),
        };
        let components = rng.random_range(2..=4);
        let texture = (0..components)
            .map(|_| {
                (
                    rng.random_range(2.0..=9.0),
                    rng.random_range(2.0..=9.0),
                    rng.random_range(0.0..2.0 * PI),
                )
            })
            .collect();
        ToyFaceSpec {
            head,
            eyes,
            pupil_scale: rng.random_range(0.35..=0.6),
            mouth,
            background: [
                color(rng, [0.05, 0.05, 0.1], [0.5, 0.5, 0.6]),
                color(rng, [0.2, 0.2, 0.2], [0.8, 0.8, 0.9]),
            ],
            skin: color(rng, [0.45, 0.3, 0.2], [0.95, 0.8, 0.7]),
            iris: color(rng, [0.05, 0.05, 0.05], [0.35, 0.4, 0.45]),
            lip: color(rng, [0.45, 0.05, 0.05], [0.8, 0.35, 0.35]),
            texture_amplitude: rng.random_range(0.01..=0.05),
            texture,
        }
    }

    fn shade(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = {
            let [top, bottom] = self.background;
            [0, 1, 2].map(|k| top[k] + (bottom[k] - top[k]) * y)
        };
        if self.head.inside(x, y) {
            let t: f64 = self
                .texture
                .iter()
                .map(|&(fx, fy, ph)| (2.0 * PI * (fx * x + fy * y) + ph).sin())
                .sum::<f64>()
                * self.texture_amplitude
                / self.texture.len() as f64;
            c = self.skin.map(|v| v + t);
        }
        for eye in &self.eyes {
            if eye.inside(x, y) {
                c = [0.95, 0.95, 0.93];
                let pupil = Ellipse {
                    rx: eye.ry * self.pupil_scale * 1.6,
                    ry: eye.ry * self.pupil_scale * 1.6,
                    ..*eye
                };
                if pupil.inside(x, y) {
                    c = self.iris;
                }
            }
        }
        if self.mouth.inside(x, y) {
            c = self.lip;
        }
        c
    }

    /// Renders with 4x4 supersampling, quantized to 8-bit levels.
    pub fn render(&self, res: usize) -> Tensor {
        const SS: usize = 4;
        let mut t = Tensor::zeros(&[3, res, res]);
        let r = res as f64;
        for py in 0..res {
            for px in 0..res {
                let mut acc = [0.0; 3];
                for sy in 0..SS {
                    for sx in 0..SS {
                        let x = (px as f64 + (sx as f64 + 0.5) / SS as f64) / r;
                        let y = (py as f64 + (sy as f64 + 0.5) / SS as f64) / r;
                        let c = self.shade(x, y);
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                for (k, a) in acc.iter().enumerate() {
                    let v = (a / (SS * SS) as f64).clamp(0.0, 1.0);
                    t.set3(k, py, px, (v * 255.0).round() / 255.0);
                }
            }
        }
        t
    }

    pub fn boxes(&self, res: usize) -> ComponentBoxes {
        ComponentBoxes {
            left_eye: self.eyes[0].pixel_box(res),
            right_eye: self.eyes[1].pixel_box(res),
            mouth: self.mouth.pixel_box(res),
        }
    }
}

/// One generated training image.
#[derive(Clone, Debug)]
pub struct ToySample {
    pub index: usize,
    pub seed: u64,
    /// `[3, R, R]` in `[0, 1]`.
    pub image: Tensor,
    pub boxes: ComponentBoxes,
    pub spec: ToyFaceSpec,
}

impl ToySample {
    pub fn file_name(&self) -> String {
        format!("face_{:05}.png", self.index)
    }

    /// Manifest row: `index seed file left_eye right_eye mouth` with boxes as
    /// `y0,x0,h,w`.
    pub fn manifest_row(&self) -> String {
        let b = |c: CropBox| format!("{},{},{},{}", c.y0, c.x0, c.h, c.w);
        format!(
            "index={} seed={} file={} left_eye={} right_eye={} mouth={}",
            self.index,
            self.seed,
            self.file_name(),
            b(self.boxes.left_eye),
            b(self.boxes.right_eye),
            b(self.boxes.mouth)
        )
    }
}

/// Parses the box columns of a manifest row.
pub fn parse_manifest_row(line: &str) -> Result<(String, ComponentBoxes)> {
    let mut file = None;
    let mut boxes = [None; 3];
    for tok in line.split_whitespace() {
        let Some((k, v)) = tok.split_once('=') else {
            return Err(Error::format("dataset manifest", format!("token {tok:?}")));
        };
        let slot = match k {
            "file" => {
                file = Some(v.to_string());
                continue;
            }
            "left_eye" => 0,
            "right_eye" => 1,
            "mouth" => 2,
            _ => continue,
        };
        let nums: Vec<usize> = v
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::format("dataset manifest", format!("box {v:?}"))))
            .collect::<Result<_>>()?;
        if nums.len() != 4 {
            return Err(Error::format("dataset manifest", format!("box {v:?} needs 4 numbers")));
        }
        boxes[slot] = Some(CropBox {
            y0: nums[0],
            x0: nums[1],
            h: nums[2],
            w: nums[3],
        });
    }
    let missing = || Error::format("dataset manifest", format!("incomplete row {line:?}"));
    Ok((
        file.ok_or_else(missing)?,
        ComponentBoxes {
            left_eye: boxes[0].ok_or_else(missing)?,
            right_eye: boxes[1].ok_or_else(missing)?,
            mouth: boxes[2].ok_or_else(missing)?,
        },
    ))
}

pub fn synth_sample(index: usize, resolution: usize, seed: u64) -> ToySample {
    let s = substream_seed(seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let spec = ToyFaceSpec::sample(&mut rng);
    ToySample {
        index,
        seed: s,
        image: spec.render(resolution),
        boxes: spec.boxes(resolution),
        spec,
    }
}

/// `count` faces at `resolution`; image `i` depends only on `(seed, i)`.
pub fn synth_dataset(count: usize, resolution: usize, seed: u64) -> Result<Vec<ToySample>> {
    if resolution < 16 {
        return Err(Error::Config(format!("toy faces need at least 16 pixels, got {resolution}")));
    }
    Ok((0..count).map(|i| synth_sample(i, resolution, seed)).collect())
}

/// Reads a directory written by [`write_dataset`]: `manifest.txt` plus one
/// PNG per row. Face parameters are re-derived from the recorded seeds.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<ToySample>> {
    let dir = dir.as_ref();
    let text = std::fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (file, boxes) = parse_manifest_row(line)?;
        let field = |key: &str| -> Result<u64> {
            line.split_whitespace()
                .find_map(|t| t.strip_prefix(key))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format("dataset manifest", format!("missing {key} in {line:?}")))
        };
        let seed = field("seed=")?;
        out.push(ToySample {
            index: field("index=")? as usize,
            seed,
            image: load_rgb(dir.join(&file))?,
            boxes,
            spec: ToyFaceSpec::sample(&mut ChaCha8Rng::seed_from_u64(seed)),
        });
    }
    if out.is_empty() {
        return Err(Error::format("dataset manifest", format!("{} lists no images", dir.display())));
    }
    Ok(out)
}

/// Writes each face as PNG plus `manifest.txt`.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[ToySample]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for s in samples {
        save_png(dir.join(s.file_name()), &s.image)?;
        manifest.push_str(&s.manifest_row());
        manifest.push('\n');
    }
    std::fs::write(dir.join(MANIFEST_NAME), manifest)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = synth_dataset(3, 32, 7).unwrap();
        let b = synth_dataset(3, 32, 7).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.boxes, y.boxes);
        }
        let c = synth_dataset(1, 32, 8).unwrap();
        assert_ne!(a[0].image, c[0].image);
    }

    #[test]
    fn images_are_eight_bit_in_range() {
        let s = synth_sample(0, 64, 1);
        assert_eq!(s.image.shape(), &[3, 64, 64]);
        for &v in s.image.data() {
            assert!((0.0..=1.0).contains(&v));
            assert!(((v * 255.0).round() - v * 255.0).abs() < 1e-9);
        }
    }

    #[test]
    fn eye_boxes_inside_head_box() {
        for i in 0..1000 {
            let s = ToyFaceSpec::sample(&mut ChaCha8Rng::seed_from_u64(i));
            let res = 64;
            let head = s.head.pixel_box(res);
            for eye in [s.boxes(res).left_eye, s.boxes(res).right_eye, s.boxes(res).mouth] {
                assert!(eye.fits(res, res));
                assert!(eye.y0 >= head.y0 && eye.x0 >= head.x0);
                assert!(eye.y0 + eye.h <= head.y0 + head.h && eye.x0 + eye.w <= head.x0 + head.w);
            }
        }
    }

    #[test]
    fn manifest_round_trip() {
        let s = synth_sample(4, 64, 2);
        let (file, boxes) = parse_manifest_row(&s.manifest_row()).unwrap();
        assert_eq!(file, "face_00004.png");
        assert_eq!(boxes, s.boxes);
        assert!(parse_manifest_row("file=a.png left_eye=1,2,3").is_err());
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let data = synth_dataset(3, 32, 5).unwrap();
        write_dataset(dir.path(), &data).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.index, b.index);
            assert_eq!(a.boxes, b.boxes);
            assert_eq!(a.spec, b.spec);
            assert!(a.image.max_abs_diff(&b.image) < 1e-12);
        }
    }
}
