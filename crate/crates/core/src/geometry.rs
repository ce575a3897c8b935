//! Axis-aligned boxes in continuous pixel coordinates.
//!
//! Coordinates are exclusive: a box covering pixels `0..4` horizontally has
//! `x1 = 0`, `x2 = 4` and width `4`. No `+1` correction is applied anywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    x1: f32,
    y1: f32,
    x2: f32,
    y2: f32,
}

impl BBox {
    /// Builds a box, rejecting non-finite coordinates and negative extents.
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::contract(format!(
                "non-finite box [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        if x2 < x1 || y2 < y1 {
            return Err(Error::contract(format!(
                "negative box extent [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Trusted constructor for values produced by this crate's own kernels.
    pub(crate) fn raw(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        debug_assert!(x2 >= x1 && y2 >= y1, "[{x1}, {y1}, {x2}, {y2}]");
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn from_xywh(x: f32, y: f32, w: f32, h: f32) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub const fn x1(&self) -> f32 {
        self.x1
    }
    pub const fn y1(&self) -> f32 {
        self.y1
    }
    pub const fn x2(&self) -> f32 {
        self.x2
    }
    pub const fn y2(&self) -> f32 {
        self.y2
    }

    pub fn coords(&self) -> [f32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f32, f32) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn has_positive_area(&self) -> bool {
        self.width() > 0.0 && self.height() > 0.0
    }

    /// Clamps every coordinate into `[0, width] x [0, height]`.
    pub fn clip(&self, width: f32, height: f32) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    /// True when the box lies entirely inside `[0, width] x [0, height]`.
    pub fn is_inside(&self, width: f32, height: f32) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    /// Multiplies x coordinates by `sx` and y coordinates by `sy`.
    pub fn scale(&self, sx: f32, sy: f32) -> Self {
        Self::raw(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }

    pub fn translate(&self, dx: f32, dy: f32) -> Self {
        Self::raw(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }
}

/// Intersection over union. Zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || inter <= 0.0 {
        return 0.0;
    }
    (inter / union).min(1.0)
}

pub fn clip(b: &BBox, width: f32, height: f32) -> BBox {
    b.clip(width, height)
}

/// Row-major `rows x cols` matrix of IoU values.
#[derive(Debug, Clone, PartialEq)]
pub struct IouMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl IouMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }
}

pub fn iou_matrix(rows: &[BBox], cols: &[BBox]) -> IouMatrix {
    let mut values = Vec::with_capacity(rows.len() * cols.len());
    for a in rows {
        values.extend(cols.iter().map(|b| iou(a, b)));
    }
    IouMatrix {
        rows: rows.len(),
        cols: cols.len(),
        values,
    }
}
