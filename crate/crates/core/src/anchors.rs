//! Dense square anchor grids, one per detection module.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Detection module identifier. `M1` sits at stride 8, `M2` at 16, `M3` at 32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModuleId {
    M1,
    M2,
    M3,
}

impl ModuleId {
    pub const ALL: [ModuleId; 3] = [ModuleId::M1, ModuleId::M2, ModuleId::M3];

    /// Builds an id from its 1-based number.
    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            1 => Ok(ModuleId::M1),
            2 => Ok(ModuleId::M2),
            3 => Ok(ModuleId::M3),
            _ => Err(Error::config(format!("module id must be 1, 2 or 3, got {n}"))),
        }
    }

    pub fn number(self) -> u32 {
        self.index() as u32 + 1
    }

    pub fn index(self) -> usize {
        match self {
            ModuleId::M1 => 0,
            ModuleId::M2 => 1,
            ModuleId::M3 => 2,
        }
    }
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.number())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorConfig {
    /// Side length in pixels of a scale-1 anchor.
    pub base_size: f32,
    /// Scale set per module, indexed by `ModuleId::index`.
    pub scales: [Vec<f32>; 3],
    /// Feature stride per module in input pixels.
    pub strides: [u32; 3],
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            base_size: 16.0,
            scales: [vec![1.0, 2.0], vec![4.0, 8.0], vec![16.0, 32.0]],
            strides: [8, 16, 32],
        }
    }
}

impl AnchorConfig {
    /// The finer five-scale-per-module variant used for anchor-density ablations.
    pub fn finer() -> Self {
        Self {
            scales: [
                vec![0.25, 0.5, 1.0, 2.0, 3.0],
                vec![4.0, 6.0, 8.0, 10.0, 12.0],
                vec![16.0, 20.0, 24.0, 28.0, 32.0],
            ],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_size.is_finite() && self.base_size > 0.0) {
            return Err(Error::config(format!(
                "base_size must be positive, got {}",
                self.base_size
            )));
        }
        for (i, set) in self.scales.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::config(format!("module m{} has no scales", i + 1)));
            }
            if set.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(Error::config(format!(
                    "module m{} scales must be positive",
                    i + 1
                )));
            }
            if set.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::config(format!(
                    "module m{} scales must be strictly increasing",
                    i + 1
                )));
            }
        }
        if self.strides[0] == 0 || self.strides.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config(
                "strides must be positive and strictly increasing",
            ));
        }
        Ok(())
    }

    pub fn stride(&self, module: ModuleId) -> u32 {
        self.strides[module.index()]
    }

    pub fn module_scales(&self, module: ModuleId) -> &[f32] {
        &self.scales[module.index()]
    }

    /// Sorted union of all modules' scale sets, for a single-module head.
    pub fn union_scales(&self) -> Vec<f32> {
        let mut all: Vec<f32> = self.scales.iter().flatten().copied().collect();
        all.sort_by(f32::total_cmp);
        all.dedup();
        all
    }
}

/// Anchors of one module, laid out row-major over `(row, col, scale)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub module: ModuleId,
    pub stride: u32,
    pub feature_w: usize,
    pub feature_h: usize,
    pub scales: Vec<f32>,
    pub base_size: f32,
    pub boxes: Vec<BBox>,
}

impl AnchorSet {
    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Flat index of the anchor at `(row, col, scale)`.
    pub fn index(&self, row: usize, col: usize, scale: usize) -> usize {
        (row * self.feature_w + col) * self.num_scales() + scale
    }

    /// Inverse of [`AnchorSet::index`].
    pub fn position(&self, index: usize) -> (usize, usize, usize) {
        let k = self.num_scales();
        let cell = index / k;
        (cell / self.feature_w, cell % self.feature_w, index % k)
    }
}

/// Generates the anchor grid for `module` on a `feature_w x feature_h` map.
pub fn generate(
    config: &AnchorConfig,
    module: ModuleId,
    feature_w: usize,
    feature_h: usize,
) -> Result<AnchorSet> {
    generate_with_scales(
        module,
        config.stride(module),
        config.module_scales(module),
        config.base_size,
        feature_w,
        feature_h,
    )
}

/// Lower-level generator for arbitrary scale sets (e.g. a merged single head).
pub fn generate_with_scales(
    module: ModuleId,
    stride: u32,
    scales: &[f32],
    base_size: f32,
    feature_w: usize,
    feature_h: usize,
) -> Result<AnchorSet> {
    if feature_w == 0 || feature_h == 0 {
        return Err(Error::contract(format!(
            "feature map must be at least 1x1, got {feature_w}x{feature_h}"
        )));
    }
    if scales.is_empty() {
        return Err(Error::config("anchor scale set is empty"));
    }
    let s = stride as f32;
    let mut boxes = Vec::with_capacity(feature_w * feature_h * scales.len());
    for row in 0..feature_h {
        let cy = (row as f32 + 0.5) * s;
        for col in 0..feature_w {
            let cx = (col as f32 + 0.5) * s;
            for &scale in scales {
                let half = 0.5 * scale * base_size;
                boxes.push(BBox::raw(cx - half, cy - half, cx + half, cy + half));
            }
        }
    }
    Ok(AnchorSet {
        module,
        stride,
        feature_w,
        feature_h,
        scales: scales.to_vec(),
        base_size,
        boxes,
    })
}

/// `true` where the anchor lies entirely inside the image.
pub fn cross_boundary_mask(anchors: &AnchorSet, image_w: f32, image_h: f32) -> Vec<bool> {
    anchors
        .boxes
        .iter()
        .map(|b| b.is_inside(image_w, image_h))
        .collect()
}
