//! Center-parameterized boxes and the handful of geometric operations the
//! sampler, scorer and metrics share.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box stored as center and size, in pixels.
///
/// Invariant: `w > 0` and `h > 0`. Corner form is derived on demand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite ({cx}, {cy}, {w}, {h})"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!("non-positive size {w}x{h}")));
        }
        Ok(Self { cx, cy, w, h })
    }

    /// Builds a box from `[x1, y1, x2, y2]`; rejects `x2 <= x1` or `y2 <= y1`.
    pub fn from_corners(corners: [f64; 4]) -> Result<Self> {
        let [x1, y1, x2, y2] = corners;
        if !(x2 > x1 && y2 > y1) {
            return Err(Error::InvalidBox(format!(
                "corners [{x1}, {y1}, {x2}, {y2}] are not ordered"
            )));
        }
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// Builds a box from COCO `[x, y, w, h]` (top-left origin).
    pub fn from_xywh(xywh: [f64; 4]) -> Result<Self> {
        let [x, y, w, h] = xywh;
        Self::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn xywh(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.w,
            self.h,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let [ax1, ay1, ax2, ay2] = self.corners();
        let [bx1, by1, bx2, by2] = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        iw * ih
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }

    /// Whether the corner box lies inside `[0, W] x [0, H]` up to `tol`.
    pub fn inside(&self, shape: ImageShape, tol: f64) -> bool {
        let [x1, y1, x2, y2] = self.corners();
        x1 >= -tol && y1 >= -tol && x2 <= shape.width + tol && y2 <= shape.height + tol
    }

    /// Intersection with the image rectangle, re-centered on the clipped
    /// corners. `None` when nothing of positive area remains.
    pub fn intersect_image(&self, shape: ImageShape) -> Option<BBox> {
        let [x1, y1, x2, y2] = self.corners();
        let (x1, y1) = (x1.max(0.0), y1.max(0.0));
        let (x2, y2) = (x2.min(shape.width), y2.min(shape.height));
        BBox::from_corners([x1, y1, x2, y2]).ok()
    }
}

/// Image extent in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageShape {
    pub width: f64,
    pub height: f64,
}

impl ImageShape {
    pub fn new(width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
            return Err(Error::InvalidBox(format!("image shape {width}x{height}")));
        }
        Ok(Self { width, height })
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (0.0..=self.width).contains(&x) && (0.0..=self.height).contains(&y)
    }
}

/// A single point annotation with its category index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointAnno {
    pub x: f64,
    pub y: f64,
    pub category: usize,
}

/// Intersection over union. Symmetric, in `[0, 1]`, zero for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Point-centered proposal of size `scale` and aspect `ratio`, shrunk so it
/// stays inside the image while keeping its center on the point.
///
/// Width is `min(ratio * scale, 2 px, 2 (W - px))`, height is
/// `min(scale / ratio, 2 py, 2 (H - py))`.
pub fn clip_to_image(point: &PointAnno, scale: f64, ratio: f64, shape: ImageShape) -> Result<BBox> {
    if !(scale > 0.0 && ratio > 0.0) {
        return Err(Error::InvalidBox(format!("scale {scale}, ratio {ratio}")));
    }
    let (px, py) = (point.x, point.y);
    if !shape.contains(px, py) {
        return Err(Error::InvalidBox(format!(
            "point ({px}, {py}) outside image"
        )));
    }
    let w = (ratio * scale).min(2.0 * px).min(2.0 * (shape.width - px));
    let h = (scale / ratio).min(2.0 * py).min(2.0 * (shape.height - py));
    if w <= 0.0 || h <= 0.0 {
        return Err(Error::DegenerateProposal { x: px, y: py });
    }
    Ok(BBox {
        cx: px,
        cy: py,
        w,
        h,
    })
}
