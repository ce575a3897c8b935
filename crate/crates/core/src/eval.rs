//! Ground-truth ingestion and detection scoring: greedy IoU matching,
//! precision/recall and all-point interpolated AP.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::infer::ImageDetections;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub bbox: BBox,
    /// Outside the active subset: detections on it count neither way.
    pub ignore: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruthDB {
    images: Vec<(String, Vec<GtBox>)>,
    index: HashMap<String, usize>,
}

impl GroundTruthDB {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image: impl Into<String>, boxes: Vec<GtBox>) -> Result<()> {
        let image = image.into();
        if self.index.contains_key(&image) {
            return Err(Error::format(format!("duplicate ground-truth image `{image}`")));
        }
        if let Some(b) = boxes.iter().find(|b| !b.bbox.has_positive_area()) {
            return Err(Error::contract(format!("`{image}`: degenerate face box {:?}", b.bbox)));
        }
        self.index.insert(image.clone(), self.images.len());
        self.images.push((image, boxes));
        Ok(())
    }

    pub fn insert_boxes(&mut self, image: impl Into<String>, boxes: &[BBox]) -> Result<()> {
        self.insert(
            image,
            boxes.iter().map(|&bbox| GtBox { bbox, ignore: false }).collect(),
        )
    }

    pub fn get(&self, image: &str) -> Option<&[GtBox]> {
        self.index.get(image).map(|&i| self.images[i].1.as_slice())
    }

    pub fn images(&self) -> impl Iterator<Item = (&str, &[GtBox])> {
        self.images.iter().map(|(n, b)| (n.as_str(), b.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Faces that count towards recall.
    pub fn num_active(&self) -> usize {
        self.images
            .iter()
            .map(|(_, b)| b.iter().filter(|g| !g.ignore).count())
            .sum()
    }

    /// Copy where only faces listed in `subset` (same image, same box) stay
    /// active; all others become ignore regions.
    pub fn with_subset(&self, subset: &GroundTruthDB) -> GroundTruthDB {
        let mut out = self.clone();
        for (name, boxes) in &mut out.images {
            let keep = subset.get(name).unwrap_or(&[]);
            for g in boxes.iter_mut() {
                g.ignore = g.ignore || !keep.iter().any(|k| !k.ignore && k.bbox == g.bbox);
            }
        }
        out
    }

    /// Copy where faces failing `active` become ignore regions.
    pub fn filter(&self, active: impl Fn(&BBox) -> bool) -> GroundTruthDB {
        let mut out = self.clone();
        for (_, boxes) in &mut out.images {
            for g in boxes.iter_mut() {
                g.ignore = g.ignore || !active(&g.bbox);
            }
        }
        out
    }

    /// Parses WIDER-style text: image line, count line, then `x y w h ...`
    /// rows. Returns the database and warnings for dropped rows.
    pub fn parse_wider(text: &str) -> Result<(GroundTruthDB, Vec<String>)> {
        let mut db = GroundTruthDB::new();
        let mut warnings = Vec::new();
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .peekable();
        let numeric = |l: &str| -> Option<Vec<f64>> {
            l.split_whitespace().map(|t| t.parse().ok()).collect()
        };
        while let Some((_, name)) = lines.next() {
            let name = name.trim();
            let (ln, count) = lines
                .next()
                .ok_or_else(|| Error::format(format!("`{name}`: missing face count")))?;
            let n: usize = count
                .trim()
                .parse()
                .map_err(|_| Error::format(format!("line {}: bad face count `{}`", ln + 1, count.trim())))?;
            let mut boxes = Vec::with_capacity(n);
            for _ in 0..n {
                let (ln, row) = lines
                    .next()
                    .ok_or_else(|| Error::format(format!("`{name}`: expected {n} face rows")))?;
                let v = numeric(row)
                    .filter(|v| v.len() >= 4)
                    .ok_or_else(|| Error::format(format!("line {}: bad face row `{row}`", ln + 1)))?;
                let (x, y, w, h) = (v[0] as f32, v[1] as f32, v[2] as f32, v[3] as f32);
                if !(w > 0.0 && h > 0.0) {
                    warnings.push(format!("line {}: dropped face with w={w} h={h} in `{name}`", ln + 1));
                    continue;
                }
                let bbox = BBox::from_xywh(x, y, w, h)
                    .map_err(|e| Error::format(format!("line {}: {e}", ln + 1)))?;
                boxes.push(GtBox { bbox, ignore: false });
            }
            // The official files put one all-zero placeholder row after a
            // zero count.
            if n == 0 {
                if let Some(&(_, next)) = lines.peek() {
                    if numeric(next).is_some_and(|v| v.len() >= 4) {
                        lines.next();
                    }
                }
            }
            db.insert(name, boxes)?;
        }
        Ok((db, warnings))
    }

    /// WIDER-style text of the active faces.
    pub fn to_wider(&self) -> String {
        let mut s = String::new();
        for (name, boxes) in &self.images {
            let active: Vec<&GtBox> = boxes.iter().filter(|g| !g.ignore).collect();
            let _ = writeln!(s, "{name}\n{}", active.len());
            for g in active {
                let _ = writeln!(
                    s,
                    "{} {} {} {}",
                    g.bbox.x1(),
                    g.bbox.y1(),
                    g.bbox.width(),
                    g.bbox.height()
                );
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    /// Matched an ignore region.
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedDetection {
    pub score: f32,
    pub image: usize,
    /// Index into that image's detection list.
    pub detection: usize,
    pub outcome: Outcome,
    /// Matched face index within the image, for true positives.
    pub gt: Option<usize>,
}

/// Visits all detections in descending score order (ties by image order,
/// then list order). Each detection takes the highest-IoU face that is
/// still unmatched (ignore regions never become matched). IoU at least
/// `iou_threshold` on an active face is a true positive, on an ignore
/// region it is ignored, otherwise a false positive.
pub fn match_detections(
    dets: &[ImageDetections],
    gt: &GroundTruthDB,
    iou_threshold: f32,
) -> Result<Vec<MatchedDetection>> {
    let mut gts = Vec::with_capacity(dets.len());
    let mut seen = std::collections::HashSet::new();
    for d in dets {
        if !seen.insert(d.image.as_str()) {
            return Err(Error::format(format!("detections list image `{}` twice", d.image)));
        }
        gts.push(
            gt.get(&d.image)
                .ok_or_else(|| Error::MissingGroundTruth(d.image.clone()))?,
        );
    }
    let mut order: Vec<(usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, d)| (0..d.boxes.len()).map(move |j| (i, j)))
        .collect();
    order.sort_by(|&(ia, ja), &(ib, jb)| {
        dets[ib].boxes[jb]
            .score
            .total_cmp(&dets[ia].boxes[ja].score)
            .then((ia, ja).cmp(&(ib, jb)))
    });
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut out = Vec::with_capacity(order.len());
    for (i, j) in order {
        let b = &dets[i].boxes[j];
        let mut best: Option<(usize, f32)> = None;
        for (k, g) in gts[i].iter().enumerate() {
            if matched[i][k] {
                continue;
            }
            let v = iou(&b.bbox, &g.bbox);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((k, v));
            }
        }
        let (outcome, gt_idx) = match best {
            Some((k, v)) if v >= iou_threshold => {
                if gts[i][k].ignore {
                    (Outcome::Ignored, None)
                } else {
                    matched[i][k] = true;
                    (Outcome::TruePositive, Some(k))
                }
            }
            _ => (Outcome::FalsePositive, None),
        };
        out.push(MatchedDetection {
            score: b.score,
            image: i,
            detection: j,
            outcome,
            gt: gt_idx,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    /// Score of the lowest-ranked detection included.
    pub threshold: f32,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub ap: f64,
}

/// All-point interpolated AP over score-ranked `(score, is_tp)` pairs.
/// Precision is monotonized from the right and integrated over the recall
/// steps. `total_gt = 0` yields AP 0 and an empty curve.
pub fn average_precision(ranked: &[(f32, bool)], total_gt: usize) -> PrCurve {
    if total_gt == 0 {
        return PrCurve {
            points: Vec::new(),
            ap: 0.0,
        };
    }
    let mut points = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (rank, &(score, hit)) in ranked.iter().enumerate() {
        tp += hit as usize;
        points.push(PrPoint {
            threshold: score,
            recall: tp as f64 / total_gt as f64,
            precision: tp as f64 / (rank + 1) as f64,
        });
    }
    let mut envelope = vec![0.0; points.len()];
    let mut running = 0.0f64;
    for i in (0..points.len()).rev() {
        running = running.max(points[i].precision);
        envelope[i] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, &e) in points.iter().zip(&envelope) {
        if p.recall > prev_recall {
            ap += (p.recall - prev_recall) * e;
            prev_recall = p.recall;
        }
    }
    PrCurve { points, ap }
}

/// Matches and scores in one call, skipping ignored detections.
pub fn evaluate(dets: &[ImageDetections], gt: &GroundTruthDB, iou_threshold: f32) -> Result<(PrCurve, Vec<MatchedDetection>)> {
    let matches = match_detections(dets, gt, iou_threshold)?;
    let ranked: Vec<(f32, bool)> = matches
        .iter()
        .filter(|m| m.outcome != Outcome::Ignored)
        .map(|m| (m.score, m.outcome == Outcome::TruePositive))
        .collect();
    Ok((average_precision(&ranked, gt.num_active()), matches))
}

/// `threshold,recall,precision` rows then `AP,<value>`.
pub fn pr_csv(curve: &PrCurve) -> String {
    let mut s = String::from("threshold,recall,precision\n");
    for p in &curve.points {
        let _ = writeln!(s, "{:.6},{:.6},{:.6}", p.threshold, p.recall, p.precision);
    }
    let _ = writeln!(s, "AP,{:.6}", curve.ap);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::ScoredBox;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x1: f32, y1: f32, x2: f32, y2: f32) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn dets(image: &str, v: &[(BBox, f32)]) -> ImageDetections {
        ImageDetections {
            image: image.into(),
            boxes: v.iter().map(|&(bbox, score)| ScoredBox { bbox, score }).collect(),
        }
    }

    #[test]
    fn wider_parsing() {
        let text = "a.jpg\n2\n10 20 5 6 0 0 0 0 0 0\n1 1 0 4\nb.jpg\n0\n0 0 0 0 0 0 0 0 0 0\nc.jpg\n1\n3 4 2 2\n";
        let (db, warnings) = GroundTruthDB::parse_wider(text).unwrap();
        assert_eq!(db.len(), 3);
        assert_eq!(db.get("a.jpg").unwrap()[0].bbox, bx(10.0, 20.0, 15.0, 26.0));
        assert_eq!(db.get("a.jpg").unwrap().len(), 1);
        assert!(db.get("b.jpg").unwrap().is_empty());
        assert_eq!(db.get("c.jpg").unwrap()[0].bbox, bx(3.0, 4.0, 5.0, 6.0));
        assert_eq!(warnings.len(), 1);
        assert!(GroundTruthDB::parse_wider("a\n1\n").is_err());
        assert!(GroundTruthDB::parse_wider("a\n0\na\n0\n").is_err());
        let (again, _) = GroundTruthDB::parse_wider(&db.to_wider()).unwrap();
        assert_eq!(again, db);
    }

    #[test]
    fn perfect_detections() {
        let mut gt = GroundTruthDB::new();
        let faces = [bx(0.0, 0.0, 10.0, 10.0), bx(20.0, 20.0, 40.0, 40.0)];
        gt.insert_boxes("x", &faces).unwrap();
        let d = dets("x", &[(faces[0], 0.2), (faces[1], 0.9)]);
        let (curve, m) = evaluate(&[d], &gt, 0.5).unwrap();
        assert!(m.iter().all(|m| m.outcome == Outcome::TruePositive));
        assert_eq!(curve.ap, 1.0);
        assert_eq!(curve.points.last().unwrap().recall, 1.0);
    }

    #[test]
    fn duplicate_is_false_positive() {
        let mut gt = GroundTruthDB::new();
        gt.insert_boxes("x", &[bx(0.0, 0.0, 10.0, 10.0)]).unwrap();
        let d = dets("x", &[(bx(0.0, 0.0, 10.0, 10.0), 0.9), (bx(0.5, 0.0, 10.0, 10.0), 0.8)]);
        let m = match_detections(&[d], &gt, 0.5).unwrap();
        assert_eq!(m[0].outcome, Outcome::TruePositive);
        assert_eq!(m[1].outcome, Outcome::FalsePositive);
    }

    #[test]
    fn missing_image_is_an_error() {
        let gt = GroundTruthDB::new();
        let d = dets("nope", &[]);
        assert!(matches!(match_detections(&[d], &gt, 0.5), Err(Error::MissingGroundTruth(_))));
    }

    #[test]
    fn hand_computed_ap() {
        let c = average_precision(&[(0.9, true), (0.8, false)], 2);
        assert!((c.ap - 0.5).abs() < 1e-15);
        let c = average_precision(&[(0.9, false), (0.8, true), (0.7, true)], 2);
        // Points (0.5, 0.5), (1.0, 2/3); envelope 2/3 for both steps.
        assert!((c.ap - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(average_precision(&[(0.5, true)], 0).ap, 0.0);
        assert!(average_precision(&[(0.5, true)], 0).points.is_empty());
    }

    #[test]
    fn ignore_regions_absorb_detections() {
        let mut gt = GroundTruthDB::new();
        gt.insert_boxes("x", &[bx(0.0, 0.0, 10.0, 10.0), bx(50.0, 50.0, 60.0, 60.0)]).unwrap();
        let small_only = gt.filter(|b| b.x1() < 20.0);
        assert_eq!(small_only.num_active(), 1);
        let d = dets("x", &[(bx(50.0, 50.0, 60.0, 60.0), 0.9), (bx(50.0, 50.0, 60.0, 61.0), 0.8), (bx(0.0, 0.0, 10.0, 10.0), 0.7)]);
        let (curve, m) = evaluate(&[d], &small_only, 0.5).unwrap();
        assert_eq!(m[0].outcome, Outcome::Ignored);
        assert_eq!(m[1].outcome, Outcome::Ignored);
        assert_eq!(m[2].outcome, Outcome::TruePositive);
        assert_eq!(curve.ap, 1.0);

        let mut sub = GroundTruthDB::new();
        sub.insert_boxes("x", &[bx(50.0, 50.0, 60.0, 60.0)]).unwrap();
        let s = gt.with_subset(&sub);
        assert_eq!(s.num_active(), 1);
        assert!(s.get("x").unwrap()[0].ignore);
    }

    #[test]
    fn csv_layout() {
        let c = average_precision(&[(0.9, true), (0.8, false)], 2);
        assert_eq!(pr_csv(&c), "threshold,recall,precision\n0.900000,0.500000,1.000000\n0.800000,0.500000,0.500000\nAP,0.500000\n");
    }

    #[test]
    fn score_scaling_and_fp_flips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(1..30);
            let mut ranked: Vec<(f32, bool)> = (0..n).map(|i| (1.0 - i as f32 / 64.0, rng.random_bool(0.5))).collect();
            let total = ranked.iter().filter(|r| r.1).count() + rng.random_range(1..5);
            let base = average_precision(&ranked, total).ap;
            let scaled: Vec<_> = ranked.iter().map(|&(s, f)| (s * 0.37, f)).collect();
            assert_eq!(average_precision(&scaled, total).ap, base);
            if let Some(i) = ranked.iter().position(|r| !r.1) {
                ranked[i].1 = true;
                assert!(average_precision(&ranked, total).ap >= base);
            }
        }
    }
}
