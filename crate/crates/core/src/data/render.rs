//! 4x supersampled rasterizer for shapes scenes.

use std::io::Write;

use super::scene::{Background, SceneObject, Shape, IMAGE_SIZE};
use crate::autodiff::Tensor;

const SUPERSAMPLE: usize = 4;

/// Interleaved RGB8 raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Option<Self> {
        (data.len() == height * width * 3).then_some(Self {
            height,
            width,
            data,
        })
    }

    /// `H x W x 3` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.height, self.width, 3],
            self.data.iter().map(|&v| f64::from(v) / 255.0).collect(),
        )
    }

    pub fn upsample_nearest(&self, factor: usize) -> RgbImage {
        let (h, w) = (self.height * factor, self.width * factor);
        let mut data = Vec::with_capacity(h * w * 3);
        for i in 0..h {
            for j in 0..w {
                let src = ((i / factor) * self.width + j / factor) * 3;
                data.extend_from_slice(&self.data[src..src + 3]);
            }
        }
        RgbImage {
            height: h,
            width: w,
            data,
        }
    }

    pub fn pixel(&self, r: usize, c: usize) -> [u8; 3] {
        let i = (r * self.width + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, r: usize, c: usize, rgb: [u8; 3]) {
        let i = (r * self.width + c) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Binary PPM (P6).
    pub fn write_ppm(&self, mut out: impl Write) -> std::io::Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.data)
    }
}

fn background_rgb(bg: Background, r: f64, c: f64) -> [f64; 3] {
    let (dark, light) = ([0.30, 0.30, 0.32], [0.55, 0.54, 0.52]);
    let pick = |on: bool| if on { light } else { dark };
    match bg {
        Background::Plain => [0.45, 0.44, 0.43],
        Background::Striped => pick((r / 4.0).floor() as i64 % 2 == 0),
        Background::Checkered => {
            pick(((r / 8.0).floor() as i64 + (c / 8.0).floor() as i64) % 2 == 0)
        }
        Background::Dotted => {
            let (fr, fc) = (r.rem_euclid(8.0) - 4.0, c.rem_euclid(8.0) - 4.0);
            pick(fr * fr + fc * fc < 2.25)
        }
    }
}

fn inside(o: &SceneObject, r: f64, c: f64) -> bool {
    let b = &o.position;
    if !b.contains(r, c) {
        return false;
    }
    match o.shape {
        Shape::Square => true,
        Shape::Circle => {
            let (cr, cc) = b.center();
            let rad = b.height() / 2.0;
            (r - cr).powi(2) + (c - cc).powi(2) <= rad * rad
        }
        Shape::Triangle => {
            // apex at top-center, base along the bottom edge
            let t = (r - b.r0) / b.height();
            let half = t * b.width() / 2.0;
            let cc = (b.c0 + b.c1) / 2.0;
            (c - cc).abs() <= half
        }
    }
}

/// Renders at `scale` times the base resolution. Geometry stays in base
/// pixel units.
pub fn render(bg: Background, objects: &[SceneObject], scale: usize) -> RgbImage {
    let n = IMAGE_SIZE * scale;
    let inv = 1.0 / scale as f64;
    let sub = 1.0 / SUPERSAMPLE as f64;
    let mut data = Vec::with_capacity(n * n * 3);
    for i in 0..n {
        for j in 0..n {
            let mut acc = [0.0; 3];
            for a in 0..SUPERSAMPLE {
                for b in 0..SUPERSAMPLE {
                    let r = (i as f64 + (a as f64 + 0.5) * sub) * inv;
                    let c = (j as f64 + (b as f64 + 0.5) * sub) * inv;
                    let rgb = objects
                        .iter()
                        .rev()
                        .find(|o| inside(o, r, c))
                        .map(|o| o.color.rgb())
                        .unwrap_or_else(|| background_rgb(bg, r, c));
                    for k in 0..3 {
                        acc[k] += rgb[k];
                    }
                }
            }
            let norm = (SUPERSAMPLE * SUPERSAMPLE) as f64;
            data.extend(
                acc.iter()
                    .map(|v| ((v / norm) * 255.0).round().clamp(0.0, 255.0) as u8),
            );
        }
    }
    RgbImage {
        height: n,
        width: n,
        data,
    }
}
