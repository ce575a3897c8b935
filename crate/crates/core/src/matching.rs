//! Anchor-to-face assignment.
//!
//! An anchor is positive only when its best IoU with some face exceeds the
//! positive threshold. There is no fallback that forces a best anchor per
//! face: a face whose size fits none of a module's anchors yields no positive
//! in that module, which is what specializes each module to a scale range.

use serde::{Deserialize, Serialize};

use crate::anchors::{cross_boundary_mask, AnchorSet, ModuleId};
use crate::boxcodec::{encode, Delta};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchConfig {
    /// Positive iff max IoU is strictly above this.
    pub positive_iou: f32,
    /// Negative iff max IoU is strictly below this.
    pub negative_iou: f32,
    /// Anchors not fully inside the image are labeled ignore.
    pub exclude_cross_boundary: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            positive_iou: 0.5,
            negative_iou: 0.3,
            exclude_cross_boundary: true,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.negative_iou)
            && (0.0..=1.0).contains(&self.positive_iou)
            && self.negative_iou <= self.positive_iou;
        if !ok {
            return Err(Error::config(format!(
                "need 0 <= negative_iou ({}) <= positive_iou ({}) <= 1",
                self.negative_iou, self.positive_iou
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub module: ModuleId,
    pub labels: Vec<Label>,
    /// Index of the best-overlapping face; set for positives only.
    pub gt_index: Vec<Option<usize>>,
    /// Regression target; set for positives only.
    pub targets: Vec<Option<Delta>>,
    pub max_iou: Vec<f32>,
}

impl MatchResult {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices_with(Label::Positive)
    }

    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices_with(Label::Negative)
    }

    fn indices_with(&self, label: Label) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(move |(_, &l)| l == label)
            .map(|(i, _)| i)
    }
}

/// Labels every anchor of one module against the ground-truth faces.
pub fn assign(
    anchors: &AnchorSet,
    gts: &[BBox],
    image_w: f32,
    image_h: f32,
    config: &MatchConfig,
) -> Result<MatchResult> {
    if !(image_w > 0.0 && image_h > 0.0) {
        return Err(Error::contract(format!(
            "image dims must be positive, got {image_w}x{image_h}"
        )));
    }
    let stride = anchors.stride as f32;
    if (anchors.feature_w as f32) * stride < image_w || (anchors.feature_h as f32) * stride < image_h
    {
        return Err(Error::contract(format!(
            "{}x{} grid at stride {} does not cover a {}x{} image",
            anchors.feature_w, anchors.feature_h, anchors.stride, image_w, image_h
        )));
    }
    if let Some(bad) = gts.iter().find(|g| !g.has_positive_area()) {
        return Err(Error::contract(format!(
            "zero-area ground truth {:?} must be dropped at ingestion",
            bad.coords()
        )));
    }

    let inside = if config.exclude_cross_boundary {
        cross_boundary_mask(anchors, image_w, image_h)
    } else {
        vec![true; anchors.len()]
    };

    let n = anchors.len();
    let mut labels = Vec::with_capacity(n);
    let mut gt_index = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    let mut max_iou = Vec::with_capacity(n);

    for (anchor, &in_bounds) in anchors.boxes.iter().zip(&inside) {
        let mut best = 0.0f32;
        let mut best_j = None;
        for (j, gt) in gts.iter().enumerate() {
            let v = iou(anchor, gt);
            if best_j.is_none() || v > best {
                best = v;
                best_j = Some(j);
            }
        }
        max_iou.push(best);
        if !in_bounds {
            labels.push(Label::Ignore);
            gt_index.push(None);
            targets.push(None);
        } else if best > config.positive_iou {
            let j = best_j.expect("positive implies a face");
            labels.push(Label::Positive);
            gt_index.push(Some(j));
            targets.push(Some(encode(&gts[j], anchor)?));
        } else if best < config.negative_iou {
            labels.push(Label::Negative);
            gt_index.push(None);
            targets.push(None);
        } else {
            labels.push(Label::Ignore);
            gt_index.push(None);
            targets.push(None);
        }
    }

    Ok(MatchResult {
        module: anchors.module,
        labels,
        gt_index,
        targets,
        max_iou,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{generate, generate_with_scales, AnchorConfig};
    use rand::{Rng, SeedableRng};

    /// Brute-force double loop over anchors and faces applying the thresholds.
    fn oracle_labels(anchors: &AnchorSet, gts: &[BBox], w: f32, h: f32) -> Vec<(Label, Option<usize>)> {
        let mut out = Vec::new();
        for a in &anchors.boxes {
            let inside = a.x1() >= 0.0 && a.y1() >= 0.0 && a.x2() <= w && a.y2() <= h;
            let mut ious = Vec::new();
            for g in gts {
                let ix = (a.x2().min(g.x2()) - a.x1().max(g.x1())).max(0.0);
                let iy = (a.y2().min(g.y2()) - a.y1().max(g.y1())).max(0.0);
                let inter = ix * iy;
                let uni = a.area() + g.area() - inter;
                ious.push(if inter > 0.0 { inter / uni } else { 0.0 });
            }
            let m = ious.iter().cloned().fold(0.0f32, f32::max);
            let arg = ious.iter().position(|&v| v == m);
            out.push(if !inside {
                (Label::Ignore, None)
            } else if m > 0.5 {
                (Label::Positive, arg)
            } else if m < 0.3 {
                (Label::Negative, None)
            } else {
                (Label::Ignore, None)
            });
        }
        out
    }

    #[test]
    fn no_faces_means_all_negative_or_ignore() {
        let set = generate(&AnchorConfig::default(), ModuleId::M1, 8, 8).unwrap();
        let m = assign(&set, &[], 64.0, 64.0, &MatchConfig::default()).unwrap();
        let mask = cross_boundary_mask(&set, 64.0, 64.0);
        for (l, inside) in m.labels.iter().zip(mask) {
            assert_eq!(*l, if inside { Label::Negative } else { Label::Ignore });
        }
    }

    #[test]
    fn exact_anchor_match_gets_zero_target() {
        let set = generate(&AnchorConfig::default(), ModuleId::M1, 8, 8).unwrap();
        let idx = set.index(3, 4, 1);
        let gt = set.boxes[idx];
        let m = assign(&set, &[gt], 64.0, 64.0, &MatchConfig::default()).unwrap();
        assert_eq!(m.labels[idx], Label::Positive);
        assert_eq!(m.targets[idx], Some(Delta::ZERO));
        assert_eq!(m.gt_index[idx], Some(0));
    }

    #[test]
    fn small_face_has_no_large_module_positive() {
        let cfg = AnchorConfig::default();
        let set = generate(&cfg, ModuleId::M3, 32, 32).unwrap();
        let face = BBox::from_center(400.0, 400.0, 40.0, 40.0).unwrap();
        let m = assign(&set, &[face], 1024.0, 1024.0, &MatchConfig::default()).unwrap();
        assert_eq!(m.count(Label::Positive), 0);
    }

    #[test]
    fn boundary_values_ignored() {
        // Anchor side 2 at origin cell; faces chosen for IoU exactly 0.5 and 0.3.
        let set = generate_with_scales(ModuleId::M1, 4, &[1.0], 2.0, 1, 1).unwrap();
        let a = set.boxes[0];
        assert_eq!(a.coords(), [1.0, 1.0, 3.0, 3.0]);
        let half = BBox::new(1.0, 1.0, 3.0, 2.0).unwrap();
        assert_eq!(iou(&a, &half), 0.5);
        let m = assign(&set, &[half], 4.0, 4.0, &MatchConfig::default()).unwrap();
        assert_eq!(m.labels[0], Label::Ignore);
    }

    #[test]
    fn ties_pick_lowest_face_index() {
        let set = generate_with_scales(ModuleId::M1, 8, &[1.0], 8.0, 1, 1).unwrap();
        let a = set.boxes[0];
        let left = BBox::new(0.0, 0.0, 7.0, 8.0).unwrap();
        let right = BBox::new(1.0, 0.0, 8.0, 8.0).unwrap();
        assert_eq!(iou(&a, &left), iou(&a, &right));
        let m = assign(&set, &[right, left], 8.0, 8.0, &MatchConfig::default()).unwrap();
        assert_eq!(m.gt_index[0], Some(0));
        let m = assign(&set, &[left, right], 8.0, 8.0, &MatchConfig::default()).unwrap();
        assert_eq!(m.gt_index[0], Some(0));
    }

    #[test]
    fn contract_errors() {
        let set = generate(&AnchorConfig::default(), ModuleId::M1, 2, 2).unwrap();
        assert!(assign(&set, &[], 0.0, 16.0, &MatchConfig::default()).is_err());
        assert!(assign(&set, &[], 64.0, 64.0, &MatchConfig::default()).is_err());
        let zero = BBox::new(1.0, 1.0, 1.0, 4.0).unwrap();
        assert!(assign(&set, &[zero], 16.0, 16.0, &MatchConfig::default()).is_err());
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let w = rng.random_range(1..8usize);
            let h = rng.random_range(1..8usize);
            let set = generate_with_scales(ModuleId::M1, 8, &[1.0, 1.5, 2.0], 8.0, w, h).unwrap();
            let (iw, ih) = ((w * 8) as f32, (h * 8) as f32);
            let gts: Vec<BBox> = (0..rng.random_range(0..10))
                .map(|_| {
                    let x = rng.random_range(-4.0..iw);
                    let y = rng.random_range(-4.0..ih);
                    BBox::new(x, y, x + rng.random_range(2.0..20.0), y + rng.random_range(2.0..20.0))
                        .unwrap()
                })
                .collect();
            let m = assign(&set, &gts, iw, ih, &MatchConfig::default()).unwrap();
            let oracle = oracle_labels(&set, &gts, iw, ih);
            for (i, (l, g)) in oracle.into_iter().enumerate() {
                assert_eq!(m.labels[i], l);
                assert_eq!(m.gt_index[i], g);
                assert_eq!(m.targets[i].is_some(), l == Label::Positive);
            }
        }
    }
}
