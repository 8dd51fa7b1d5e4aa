//! Image-space shapes shared by the data generator, region providers and the
//! attention metrics. Coordinates are `(row, col)` in pixels with the origin
//! at the top-left corner of the image.

use serde::{Deserialize, Serialize};

/// Axis-aligned box `[r0, r1) x [c0, c1)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub r0: f64,
    pub c0: f64,
    pub r1: f64,
    pub c1: f64,
}

impl PixelBox {
    pub fn new(r0: f64, c0: f64, r1: f64, c1: f64) -> Self {
        Self { r0, c0, r1, c1 }
    }

    pub fn height(&self) -> f64 {
        (self.r1 - self.r0).max(0.0)
    }

    pub fn width(&self) -> f64 {
        (self.c1 - self.c0).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.height() * self.width()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.r0 + self.r1) / 2.0, (self.c0 + self.c1) / 2.0)
    }

    pub fn intersection(&self, other: &PixelBox) -> f64 {
        let h = (self.r1.min(other.r1) - self.r0.max(other.r0)).max(0.0);
        let w = (self.c1.min(other.c1) - self.c0.max(other.c0)).max(0.0);
        h * w
    }

    pub fn iou(&self, other: &PixelBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clip(&self, height: f64, width: f64) -> PixelBox {
        PixelBox {
            r0: self.r0.clamp(0.0, height),
            c0: self.c0.clamp(0.0, width),
            r1: self.r1.clamp(0.0, height),
            c1: self.c1.clamp(0.0, width),
        }
    }

    pub fn contains(&self, r: f64, c: f64) -> bool {
        r >= self.r0 && r < self.r1 && c >= self.c0 && c < self.c1
    }

    pub fn to_quad(&self) -> Quad {
        Quad([
            (self.r0, self.c0),
            (self.r0, self.c1),
            (self.r1, self.c1),
            (self.r1, self.c0),
        ])
    }
}

/// Closed polygon of four `(row, col)` corners in drawing order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quad(pub [(f64, f64); 4]);

impl Quad {
    /// Even-odd crossing test; orientation-agnostic.
    pub fn contains(&self, r: f64, c: f64) -> bool {
        let pts = &self.0;
        let mut inside = false;
        let mut j = 3;
        for i in 0..4 {
            let (ri, ci) = pts[i];
            let (rj, cj) = pts[j];
            if (ri > r) != (rj > r) {
                let cross = ci + (r - ri) * (cj - ci) / (rj - ri);
                if c < cross {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    pub fn bounding_box(&self) -> PixelBox {
        let rs = self.0.iter().map(|p| p.0);
        let cs = self.0.iter().map(|p| p.1);
        PixelBox {
            r0: rs.clone().fold(f64::INFINITY, f64::min),
            r1: rs.fold(f64::NEG_INFINITY, f64::max),
            c0: cs.clone().fold(f64::INFINITY, f64::min),
            c1: cs.fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Boolean pixel mask over an `height x width` raster; pixel `(i, j)` is
/// inside when its center `(i + 0.5, j + 0.5)` is.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn from_fn(height: usize, width: usize, inside: impl Fn(f64, f64) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                bits.push(inside(i as f64 + 0.5, j as f64 + 0.5));
            }
        }
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn of_quad(q: &Quad, height: usize, width: usize) -> Self {
        let bb = q.bounding_box();
        Self::from_fn(height, width, |r, c| {
            r >= bb.r0 && r <= bb.r1 && c >= bb.c0 && c <= bb.c1 && q.contains(r, c)
        })
    }

    pub fn of_box(b: &PixelBox, height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |r, c| b.contains(r, c))
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn overlap(&self, other: &Mask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_of_identical_and_disjoint_boxes() {
        let a = PixelBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&PixelBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
        let half = PixelBox::new(0.0, 5.0, 10.0, 15.0);
        assert!((a.iou(&half) - 50.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn quad_mask_matches_box_mask_for_axis_aligned_quads() {
        let b = PixelBox::new(3.0, 5.0, 17.0, 12.0);
        let qm = Mask::of_quad(&b.to_quad(), 32, 32);
        let bm = Mask::of_box(&b, 32, 32);
        assert_eq!(qm, bm);
        assert_eq!(bm.count(), 14 * 7);
    }

    #[test]
    fn rotated_quad_contains_its_center() {
        let q = Quad([(10.0, 0.0), (20.0, 10.0), (10.0, 20.0), (0.0, 10.0)]);
        assert!(q.contains(10.0, 10.0));
        assert!(!q.contains(1.0, 1.0));
        // reversed orientation
        let mut r = q.0;
        r.reverse();
        assert!(Quad(r).contains(10.0, 10.0));
    }
}
