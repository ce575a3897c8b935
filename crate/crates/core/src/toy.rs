//! Seeded synthetic scenes: bright square "faces" on a dark noisy
//! background, sized and placed so that each face size band is covered by
//! inside-image anchors of exactly one detection module.
//!
//! The default geometry shrinks the usual anchor base of 16 px by 0.375
//! to 6 px so all three modules fit a 128×128 image: M1 anchors {6, 12}
//! at stride 8, M2 {24, 48} at stride 16, M3 {96, 192} at stride 32.
//! Small faces (12 px) centre on stride-8 anchor centres, medium faces
//! (30 px, 80 × 0.375) on stride-16 centres, and a large face (112 px)
//! fills most of the frame with its corner in `[0, 16]`, which guarantees
//! an M3 anchor with IoU above 0.55.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorConfig, ModuleId};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeBand {
    Small,
    Medium,
    Large,
}

impl SizeBand {
    pub const ALL: [SizeBand; 3] = [SizeBand::Small, SizeBand::Medium, SizeBand::Large];

    /// Module whose anchors cover this band.
    pub fn designated_module(self) -> ModuleId {
        match self {
            SizeBand::Small => ModuleId::M1,
            SizeBand::Medium => ModuleId::M2,
            SizeBand::Large => ModuleId::M3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SizeBand::Small => "small",
            SizeBand::Medium => "medium",
            SizeBand::Large => "large",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub num_images: usize,
    pub image_size: usize,
    pub small_side: u32,
    pub medium_side: u32,
    pub large_side: u32,
    /// Every `large_every`-th image holds one large face and nothing else.
    pub large_every: usize,
    /// Inclusive ranges of small and medium faces per other image.
    pub small_per_image: (usize, usize),
    pub medium_per_image: (usize, usize),
    /// Max integer offset of a face centre from its anchor centre.
    pub jitter: i32,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            num_images: 64,
            image_size: 128,
            small_side: 12,
            medium_side: 30,
            large_side: 112,
            large_every: 4,
            small_per_image: (2, 4),
            medium_per_image: (1, 2),
            jitter: 1,
            seed: 7,
        }
    }
}

impl ToyConfig {
    /// Anchor geometry the scenes are laid out for.
    pub fn anchor_config() -> AnchorConfig {
        AnchorConfig {
            base_size: 6.0,
            ..AnchorConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s == 0 || !s.is_multiple_of(32) {
            return Err(Error::config(format!("toy image size must be a positive multiple of 32, got {s}")));
        }
        if self.large_side as usize > s || self.small_side == 0 || self.medium_side == 0 {
            return Err(Error::config("toy face sides must be positive and fit the image"));
        }
        if self.large_every == 0 {
            return Err(Error::config("large_every must be positive"));
        }
        let ok = |(a, b): (usize, usize)| a <= b;
        if !ok(self.small_per_image) || !ok(self.medium_per_image) {
            return Err(Error::config("face count ranges must satisfy min <= max"));
        }
        if self.jitter < 0 {
            return Err(Error::config("jitter must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub name: String,
    pub image: Image,
    pub faces: Vec<BBox>,
    pub bands: Vec<SizeBand>,
}

/// Generates the dataset. Identical configs give identical scenes.
pub fn generate(config: &ToyConfig) -> Result<Vec<ToySample>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.num_images)
        .map(|i| scene(config, i, &mut rng))
        .collect()
}

fn overlaps(a: &BBox, b: &BBox, gap: f32) -> bool {
    a.x1() < b.x2() + gap && b.x1() < a.x2() + gap && a.y1() < b.y2() + gap && b.y1() < a.y2() + gap
}

fn scene(config: &ToyConfig, i: usize, rng: &mut ChaCha8Rng) -> Result<ToySample> {
    let size = config.image_size;
    let mut faces: Vec<BBox> = Vec::new();
    let mut bands = Vec::new();
    if i.is_multiple_of(config.large_every) {
        let side = config.large_side as f32;
        let slack = (size as f32 - side).clamp(0.0, 16.0) as u32;
        let x = rng.random_range(0..=slack) as f32;
        let y = rng.random_range(0..=slack) as f32;
        faces.push(BBox::new(x, y, x + side, y + side)?);
        bands.push(SizeBand::Large);
    } else {
        let n_med = rng.random_range(config.medium_per_image.0..=config.medium_per_image.1);
        let n_small = rng.random_range(config.small_per_image.0..=config.small_per_image.1);
        for (band, n, side, stride) in [
            (SizeBand::Medium, n_med, config.medium_side, 16),
            (SizeBand::Small, n_small, config.small_side, 8),
        ] {
            let half = side as i32 / 2;
            let j = config.jitter;
            // Anchor centres whose jittered face stays inside the image.
            let mut centres: Vec<(i32, i32)> = Vec::new();
            let cells = size / stride;
            for r in 0..cells {
                for c in 0..cells {
                    let cx = ((2 * c + 1) * stride / 2) as i32;
                    let cy = ((2 * r + 1) * stride / 2) as i32;
                    let fits = |v: i32| v - half - j >= 0 && v - half + side as i32 + j <= size as i32;
                    if fits(cx) && fits(cy) {
                        centres.push((cx, cy));
                    }
                }
            }
            centres.shuffle(rng);
            let mut placed = 0;
            for (cx, cy) in centres {
                if placed == n {
                    break;
                }
                let dx = rng.random_range(-j..=j);
                let dy = rng.random_range(-j..=j);
                let x1 = (cx + dx - half) as f32;
                let y1 = (cy + dy - half) as f32;
                let b = BBox::new(x1, y1, x1 + side as f32, y1 + side as f32)?;
                if faces.iter().any(|f| overlaps(f, &b, 4.0)) {
                    continue;
                }
                faces.push(b);
                bands.push(band);
                placed += 1;
            }
        }
    }

    let mut image = Image::new(size, size);
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                image.set(c, y, x, 0.1 + rng.random_range(-0.05f32..0.05));
            }
        }
    }
    for f in &faces {
        let base = rng.random_range(0.75f32..0.95);
        let tint: [f32; 3] = std::array::from_fn(|_| base + rng.random_range(-0.05f32..0.05));
        let [x1, y1, x2, y2] = f.coords();
        image.fill_rect(x1 as usize, y1 as usize, x2 as usize, y2 as usize, tint);
    }
    Ok(ToySample {
        name: format!("toy_{i:04}"),
        image,
        faces,
        bands,
    })
}
