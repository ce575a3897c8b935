//! Regression parameterization: scale-invariant center translation plus
//! log-space size shift, relative to an anchor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Default bound on `|tw|`, `|th|` before exponentiation.
pub fn default_clamp() -> f32 {
    (1000.0f32 / 16.0).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Delta {
    pub tx: f32,
    pub ty: f32,
    pub tw: f32,
    pub th: f32,
}

impl Delta {
    pub const ZERO: Delta = Delta {
        tx: 0.0,
        ty: 0.0,
        tw: 0.0,
        th: 0.0,
    };

    pub fn new(tx: f32, ty: f32, tw: f32, th: f32) -> Self {
        Self { tx, ty, tw, th }
    }

    pub fn to_array(self) -> [f32; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(a: [f32; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

fn center_form(b: &BBox) -> (f64, f64, f64, f64) {
    let (x1, y1, x2, y2) = (b.x1() as f64, b.y1() as f64, b.x2() as f64, b.y2() as f64);
    (0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1)
}

/// Regression target that moves `anchor` onto `gt`.
pub fn encode(gt: &BBox, anchor: &BBox) -> Result<Delta> {
    if !anchor.has_positive_area() {
        return Err(Error::contract("encode: anchor must have positive size"));
    }
    if !gt.has_positive_area() {
        return Err(Error::contract("encode: ground truth must have positive size"));
    }
    let (gx, gy, gw, gh) = center_form(gt);
    let (ax, ay, aw, ah) = center_form(anchor);
    Ok(Delta {
        tx: ((gx - ax) / aw) as f32,
        ty: ((gy - ay) / ah) as f32,
        tw: (gw / aw).ln() as f32,
        th: (gh / ah).ln() as f32,
    })
}

/// Applies `delta` to `anchor`; size shifts are clamped to `±clamp`.
///
/// Non-finite translation components are treated as zero so the output is
/// always a finite box with non-negative extent.
pub fn decode(delta: &Delta, anchor: &BBox, clamp: f32) -> BBox {
    let (ax, ay, aw, ah) = center_form(anchor);
    let finite_or_zero = |v: f32| if v.is_finite() { v as f64 } else { 0.0 };
    let clamp = clamp as f64;
    let tw = finite_or_zero(delta.tw).clamp(-clamp, clamp);
    let th = finite_or_zero(delta.th).clamp(-clamp, clamp);
    // Translation is bounded so extreme logits cannot overflow f32.
    let tx = finite_or_zero(delta.tx).clamp(-1e6, 1e6);
    let ty = finite_or_zero(delta.ty).clamp(-1e6, 1e6);
    let cx = ax + tx * aw;
    let cy = ay + ty * ah;
    let hw = 0.5 * aw * tw.exp();
    let hh = 0.5 * ah * th.exp();
    let (x1, x2) = ((cx - hw) as f32, (cx + hw) as f32);
    let (y1, y2) = ((cy - hh) as f32, (cy + hh) as f32);
    BBox::raw(x1, y1, x2.max(x1), y2.max(y1))
}
