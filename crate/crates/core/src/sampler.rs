//! Per-module online hard example mining.
//!
//! Hard positives are the positives the network currently scores lowest as
//! faces; hard negatives are the negatives it scores highest.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{Label, MatchResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OhemConfig {
    pub batch_per_module: usize,
    /// Upper bound on the positive share of the mini-batch.
    pub positive_fraction: f32,
}

impl Default for OhemConfig {
    fn default() -> Self {
        Self {
            batch_per_module: 256,
            positive_fraction: 0.25,
        }
    }
}

impl OhemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_per_module == 0 {
            return Err(Error::config("batch_per_module must be at least 1"));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return Err(Error::config(format!(
                "positive_fraction must lie in (0, 1), got {}",
                self.positive_fraction
            )));
        }
        Ok(())
    }

    pub fn positive_quota(&self) -> usize {
        (self.positive_fraction as f64 * self.batch_per_module as f64).ceil() as usize
    }
}

/// Selects the module's mini-batch. `face_scores` are face-class softmax
/// probabilities aligned with the match labels. The result is sorted by
/// anchor index.
pub fn select(face_scores: &[f32], matching: &MatchResult, config: &OhemConfig) -> Result<Vec<usize>> {
    if face_scores.len() != matching.len() {
        return Err(Error::contract(format!(
            "{} scores for {} anchors",
            face_scores.len(),
            matching.len()
        )));
    }
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (i, label) in matching.labels.iter().enumerate() {
        match label {
            Label::Positive => positives.push(i),
            Label::Negative => negatives.push(i),
            Label::Ignore => {}
        }
    }

    let take_pos = config.positive_quota().min(positives.len());
    let take_neg = (config.batch_per_module - take_pos).min(negatives.len());

    let by_score = |a: &usize, b: &usize| -> Ordering {
        face_scores[*a].total_cmp(&face_scores[*b]).then(a.cmp(b))
    };
    let by_score_desc = |a: &usize, b: &usize| -> Ordering {
        face_scores[*b].total_cmp(&face_scores[*a]).then(a.cmp(b))
    };

    let mut chosen = smallest_k(positives, take_pos, by_score);
    chosen.extend(smallest_k(negatives, take_neg, by_score_desc));
    chosen.sort_unstable();
    Ok(chosen)
}

fn smallest_k<F>(mut items: Vec<usize>, k: usize, cmp: F) -> Vec<usize>
where
    F: Fn(&usize, &usize) -> Ordering,
{
    if k == 0 {
        return Vec::new();
    }
    if k < items.len() {
        items.select_nth_unstable_by(k - 1, &cmp);
        items.truncate(k);
    }
    items
}
