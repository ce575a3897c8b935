//! Multi-task detection loss: per-module mean softmax cross-entropy over the
//! sampled anchors, plus `lambda` times the per-module mean smooth-L1
//! regression error over the sampled positives.
//!
//! Values are accumulated in f64; gradients are returned in f32 with respect
//! to the raw logits and predicted deltas.

use serde::{Deserialize, Serialize};

use crate::anchors::ModuleId;
use crate::boxcodec::Delta;
use crate::error::{Error, Result};
use crate::matching::{Label, MatchResult};

/// Which anchors enter the classification term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    /// The OHEM mini-batch only.
    #[default]
    Sampled,
    /// Every positive or negative anchor, ignoring the sampler.
    AllLabeled,
}

pub struct ModuleLossInput<'a> {
    /// `[background, face]` logits per anchor.
    pub logits: &'a [[f32; 2]],
    pub deltas: &'a [Delta],
    pub matching: &'a MatchResult,
    /// Mini-batch indices from the sampler.
    pub sampled: &'a [usize],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModuleLoss {
    pub module: ModuleId,
    pub classification: f64,
    pub regression: f64,
    /// Anchors in the classification term.
    pub num_classified: usize,
    /// Positives in the regression term.
    pub num_regressed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossValue {
    pub modules: Vec<ModuleLoss>,
    pub lambda: f64,
    pub total: f64,
}

impl LossValue {
    pub fn classification(&self) -> f64 {
        self.modules.iter().map(|m| m.classification).sum()
    }

    pub fn regression(&self) -> f64 {
        self.modules.iter().map(|m| m.regression).sum()
    }
}

/// Gradients over every anchor of a module; zero outside the mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleGradients {
    pub logits: Vec<[f32; 2]>,
    pub deltas: Vec<Delta>,
}

/// `(p_background, p_face)` for one logit pair.
pub fn softmax2(l: [f32; 2]) -> [f64; 2] {
    let (a, b) = (l[0] as f64, l[1] as f64);
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let z = ea + eb;
    [ea / z, eb / z]
}

/// Mean negative log-likelihood; `is_face[i]` selects the target class.
pub fn classification_loss(logits: &[[f32; 2]], is_face: &[bool]) -> Result<(f64, Vec<[f32; 2]>)> {
    if logits.len() != is_face.len() {
        return Err(Error::contract(format!(
            "{} logit pairs for {} labels",
            logits.len(),
            is_face.len()
        )));
    }
    if logits.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (l, &face) in logits.iter().zip(is_face) {
        let (a, b) = (l[0] as f64, l[1] as f64);
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        let target = if face { b } else { a };
        total += lse - target;
        let p = softmax2(*l);
        let (t0, t1) = if face { (0.0, 1.0) } else { (1.0, 0.0) };
        grads.push([((p[0] - t0) / n) as f32, ((p[1] - t1) / n) as f32]);
    }
    Ok((total / n, grads))
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Smooth-L1 summed over components and entries, divided by the entry count.
pub fn regression_loss(pred: &[Delta], target: &[Delta]) -> Result<(f64, Vec<Delta>)> {
    if pred.len() != target.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = pred.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(target) {
        let (p, t) = (p.to_array(), t.to_array());
        let mut g = [0.0f32; 4];
        for c in 0..4 {
            let d = p[c] as f64 - t[c] as f64;
            total += smooth_l1(d);
            g[c] = (smooth_l1_grad(d) / n) as f32;
        }
        grads.push(Delta::from_array(g));
    }
    Ok((total / n, grads))
}

fn mini_batch(input: &ModuleLossInput<'_>, scope: LossScope) -> Result<Vec<usize>> {
    let n = input.matching.len();
    if input.logits.len() != n || input.deltas.len() != n {
        return Err(Error::contract(format!(
            "module {}: {} logits / {} deltas for {} anchors",
            input.matching.module,
            input.logits.len(),
            input.deltas.len(),
            n
        )));
    }
    match scope {
        LossScope::AllLabeled => Ok((0..n)
            .filter(|&i| input.matching.labels[i] != Label::Ignore)
            .collect()),
        LossScope::Sampled => {
            for &i in input.sampled {
                if i >= n {
                    return Err(Error::contract(format!("sampled index {i} out of range {n}")));
                }
                if input.matching.labels[i] == Label::Ignore {
                    return Err(Error::contract(format!("sampled anchor {i} is labeled ignore")));
                }
            }
            Ok(input.sampled.to_vec())
        }
    }
}

/// Sums the per-module terms and returns gradients for every module.
pub fn total_loss(
    inputs: &[ModuleLossInput<'_>],
    lambda: f64,
    scope: LossScope,
) -> Result<(LossValue, Vec<ModuleGradients>)> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::config(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let mut modules = Vec::with_capacity(inputs.len());
    let mut all_grads = Vec::with_capacity(inputs.len());
    let mut total = 0.0;
    for input in inputs {
        let batch = mini_batch(input, scope)?;
        let n = input.matching.len();
        let logits: Vec<[f32; 2]> = batch.iter().map(|&i| input.logits[i]).collect();
        let is_face: Vec<bool> = batch
            .iter()
            .map(|&i| input.matching.labels[i] == Label::Positive)
            .collect();
        let (cls, cls_grad) = classification_loss(&logits, &is_face)?;

        let positives: Vec<usize> = batch
            .iter()
            .copied()
            .filter(|&i| input.matching.labels[i] == Label::Positive)
            .collect();
        let pred: Vec<Delta> = positives.iter().map(|&i| input.deltas[i]).collect();
        let target = positives
            .iter()
            .map(|&i| {
                input.matching.targets[i]
                    .ok_or_else(|| Error::contract(format!("positive anchor {i} has no target")))
            })
            .collect::<Result<Vec<_>>>()?;
        let (reg, reg_grad) = regression_loss(&pred, &target)?;

        let mut g = ModuleGradients {
            logits: vec![[0.0; 2]; n],
            deltas: vec![Delta::ZERO; n],
        };
        for (&i, gl) in batch.iter().zip(cls_grad) {
            g.logits[i] = gl;
        }
        let lam = lambda as f32;
        for (&i, gd) in positives.iter().zip(reg_grad) {
            let a = gd.to_array();
            g.deltas[i] = Delta::new(a[0] * lam, a[1] * lam, a[2] * lam, a[3] * lam);
        }

        total += cls + lambda * reg;
        modules.push(ModuleLoss {
            module: input.matching.module,
            classification: cls,
            regression: reg,
            num_classified: batch.len(),
            num_regressed: positives.len(),
        });
        all_grads.push(g);
    }
    Ok((
        LossValue {
            modules,
            lambda,
            total,
        },
        all_grads,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn uniform_logits_cost_log2() {
        let (l, _) = classification_loss(&[[0.0, 0.0], [0.0, 0.0]], &[true, false]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_cost_nothing() {
        let (l, _) = classification_loss(&[[-10.0, 10.0], [10.0, -10.0]], &[true, false]).unwrap();
        assert!(l < 1e-8);
    }

    #[test]
    fn empty_inputs_are_zero() {
        assert_eq!(classification_loss(&[], &[]).unwrap().0, 0.0);
        assert_eq!(regression_loss(&[], &[]).unwrap().0, 0.0);
        let (v, g) = total_loss(&[], 1.0, LossScope::Sampled).unwrap();
        assert_eq!(v.total, 0.0);
        assert!(g.is_empty());
    }

    #[test]
    fn regression_examples() {
        let t = Delta::new(0.1, -0.2, 0.3, 0.0);
        assert_eq!(regression_loss(&[t], &[t]).unwrap().0, 0.0);
        let p = Delta::new(0.6, -0.2, 0.3, 0.0);
        assert!((regression_loss(&[p], &[t]).unwrap().0 - 0.125).abs() < 1e-7);
        let p = Delta::new(2.1, -0.2, 0.3, 0.0);
        assert!((regression_loss(&[p], &[t]).unwrap().0 - 1.5).abs() < 1e-6);
    }

    #[test]
    fn smooth_l1_is_c1_at_one() {
        assert_eq!(smooth_l1(1.0), 0.5);
        let below = 1.0 - 1e-12;
        assert!((smooth_l1(below) - 0.5).abs() < 1e-11);
        assert!((smooth_l1_grad(below) - 1.0).abs() < 1e-11);
        assert_eq!(smooth_l1_grad(1.0), 1.0);
        assert_eq!(smooth_l1_grad(-1.0), -1.0);
        assert_eq!(smooth_l1(-1.0), 0.5);
    }

    #[test]
    fn classification_gradient_matches_central_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let n = rng.random_range(1..12);
            let logits: Vec<[f32; 2]> = (0..n)
                .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
                .collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
            let (_, g) = classification_loss(&logits, &labels).unwrap();
            for i in 0..n {
                for c in 0..2 {
                    let eps = 1e-3f32;
                    let mut lp = logits.clone();
                    lp[i][c] += eps;
                    let mut lm = logits.clone();
                    lm[i][c] -= eps;
                    let h = (lp[i][c] - lm[i][c]) as f64;
                    let fd = (classification_loss(&lp, &labels).unwrap().0
                        - classification_loss(&lm, &labels).unwrap().0)
                        / h;
                    let a = g[i][c] as f64;
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                    assert!(rel < 1e-4, "rel {rel} a {a} fd {fd}");
                }
            }
        }
    }

    fn matching(labels: Vec<Label>, targets: Vec<Option<Delta>>) -> MatchResult {
        let n = labels.len();
        MatchResult {
            module: ModuleId::M2,
            labels,
            gt_index: vec![None; n],
            targets,
            max_iou: vec![0.0; n],
        }
    }

    #[test]
    fn linear_combination_of_terms() {
        let m = matching(
            vec![Label::Positive, Label::Negative, Label::Ignore],
            vec![Some(Delta::new(0.5, 0.0, 0.0, 0.0)), None, None],
        );
        let logits = [[0.0, 0.0], [0.0, 0.0], [5.0, 1.0]];
        let deltas = [Delta::ZERO; 3];
        let input = ModuleLossInput {
            logits: &logits,
            deltas: &deltas,
            matching: &m,
            sampled: &[0, 1],
        };
        let (v, _) = total_loss(&[input], 1.0, LossScope::Sampled).unwrap();
        assert!((v.total - (2f64.ln() + 0.125)).abs() < 1e-7);
        assert_eq!(v.modules[0].num_classified, 2);
        assert_eq!(v.modules[0].num_regressed, 1);
    }

    #[test]
    fn ignore_and_negative_deltas_do_not_matter() {
        let m = matching(
            vec![Label::Positive, Label::Negative, Label::Ignore],
            vec![Some(Delta::new(0.2, 0.1, -0.3, 0.4)), None, None],
        );
        let deltas = [Delta::new(0.1, 0.0, 0.0, 0.0), Delta::ZERO, Delta::ZERO];
        let base_logits = [[0.3, -0.2], [0.1, 0.4], [0.0, 0.0]];
        let run = |logits: &[[f32; 2]], deltas: &[Delta], scope| {
            let input = ModuleLossInput {
                logits,
                deltas,
                matching: &m,
                sampled: &[0, 1],
            };
            total_loss(&[input], 1.0, scope).unwrap().0.total
        };
        for scope in [LossScope::Sampled, LossScope::AllLabeled] {
            let base = run(&base_logits, &deltas, scope);
            let mut d2 = deltas;
            d2[1] = Delta::new(9.0, -9.0, 3.0, 3.0);
            d2[2] = Delta::new(9.0, -9.0, 3.0, 3.0);
            assert_eq!(run(&base_logits, &d2, scope), base);
            let mut l2 = base_logits;
            l2[2] = [-40.0, 40.0];
            assert_eq!(run(&l2, &deltas, scope), base);
        }
    }

    #[test]
    fn rejects_ignore_in_sample() {
        let m = matching(vec![Label::Ignore], vec![None]);
        let input = ModuleLossInput {
            logits: &[[0.0, 0.0]],
            deltas: &[Delta::ZERO],
            matching: &m,
            sampled: &[0],
        };
        assert!(total_loss(&[input], 1.0, LossScope::Sampled).is_err());
        let input = ModuleLossInput {
            logits: &[[0.0, 0.0]],
            deltas: &[Delta::ZERO],
            matching: &m,
            sampled: &[3],
        };
        assert!(total_loss(&[input], 1.0, LossScope::Sampled).is_err());
    }
}
