//! SGD training loop: forward, per-module anchor assignment, OHEM, loss,
//! backward and a momentum/weight-decay update. Single-threaded and
//! deterministic for a given seed.

use std::fmt;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorConfig;
use crate::boxcodec::Delta;
use crate::error::{Error, Result};
use crate::eval::{GroundTruthDB, Outcome};
use crate::geometry::BBox;
use crate::image::Image;
use crate::infer::{self, Detection, ImageDetections, InferConfig};
use crate::loss::{softmax2, total_loss, LossScope, ModuleLossInput};
use crate::matching::{assign, MatchConfig, MatchResult};
use crate::sampler::{select, OhemConfig};
use crate::sshgraph::{DetectionModuleOutput, ModuleOutputGrad, SshNet, INPUT_MULTIPLE};
use crate::tensornet::{ConvParams, Tensor};
use crate::config::RunConfig;
use crate::toy::{self, SizeBand, ToySample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_drop_factor: f64,
    /// First iteration trained at the dropped rate.
    pub lr_drop_iteration: usize,
    pub iterations: usize,
    /// Images whose gradients are averaged into one update.
    pub images_per_step: usize,
    pub lambda: f64,
    pub loss_scope: LossScope,
    pub freeze_stage1: bool,
    /// Loss above this aborts training.
    pub divergence_threshold: f64,
    pub seed: u64,
    pub matching: MatchConfig,
    pub ohem: OhemConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.004,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drop_factor: 10.0,
            lr_drop_iteration: 18_000,
            iterations: 21_000,
            images_per_step: 1,
            lambda: 1.0,
            loss_scope: LossScope::Sampled,
            freeze_stage1: false,
            divergence_threshold: 1e3,
            seed: 0,
            matching: MatchConfig::default(),
            ohem: OhemConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Schedule used for the synthetic toy runs: 2000 iterations with the
    /// drop at the same relative point as 18K of 21K.
    pub fn toy() -> Self {
        Self {
            learning_rate: 0.01,
            iterations: 2000,
            lr_drop_iteration: 1714,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.lr_drop_factor >= 1.0 && self.lr_drop_factor.is_finite()) {
            return bad(format!("lr_drop_factor must be >= 1, got {}", self.lr_drop_factor));
        }
        if self.images_per_step == 0 {
            return bad("images_per_step must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.divergence_threshold.is_nan() || self.divergence_threshold <= 0.0 {
            return bad("divergence_threshold must be positive".into());
        }
        self.matching.validate()?;
        self.ohem.validate()
    }

    /// Learning rate in effect at `iteration` (0-based).
    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration >= self.lr_drop_iteration {
            self.learning_rate / self.lr_drop_factor
        } else {
            self.learning_rate
        }
    }
}

/// `v ← μv + (g + wd·θ)`, `θ ← θ − lr·v`, elementwise in f64.
pub fn sgd_update(theta: &mut [f32], grad: &[f32], velocity: &mut [f32], lr: f64, momentum: f64, weight_decay: f64) {
    for ((t, &g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let nv = momentum * *v as f64 + (g as f64 + weight_decay * *t as f64);
        *v = nv as f32;
        *t = (*t as f64 - lr * nv) as f32;
    }
}

/// Momentum buffers, one per parameter tensor in graph order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    velocity: Vec<Vec<f32>>,
}

impl SgdState {
    pub fn velocity(&self) -> &[Vec<f32>] {
        &self.velocity
    }
}

/// One update over every trainable tensor. A non-finite gradient aborts
/// before any parameter changes.
pub fn sgd_step(
    params: &mut [(String, &mut ConvParams)],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let tensors: Vec<(String, &mut Tensor)> = params
        .iter_mut()
        .flat_map(|(n, p)| {
            let ConvParams { weight, bias, .. } = &mut **p;
            [(format!("{n}.weight"), weight), (format!("{n}.bias"), bias)]
        })
        .collect();
    for (name, t) in &tensors {
        if let Some(g) = t.grad() {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    iteration: 0,
                    reason: format!("non-finite gradient {} in `{name}`[{i}]", g[i]),
                });
            }
        }
    }
    if state.velocity.is_empty() {
        state.velocity = tensors.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    }
    if state.velocity.len() != tensors.len() {
        return Err(Error::contract("optimizer state does not match the parameter list"));
    }
    for ((_, t), v) in tensors.into_iter().zip(&mut state.velocity) {
        if !t.requires_grad() {
            continue;
        }
        let (data, grad) = t.data_and_grad_mut();
        match grad {
            Some(g) => sgd_update(data, g, v, lr, momentum, weight_decay),
            None => sgd_update(data, &vec![0.0; v.len()], v, lr, momentum, weight_decay),
        }
    }
    Ok(())
}

/// One training image with its faces.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub name: String,
    pub image: Image,
    pub faces: Vec<BBox>,
}

impl From<&ToySample> for TrainSample {
    fn from(s: &ToySample) -> Self {
        Self {
            name: s.name.clone(),
            image: s.image.clone(),
            faces: s.faces.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub classification: f64,
    pub regression: f64,
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("iteration,lr,loss,classification,regression\n");
    for r in trace {
        let _ = writeln!(
            s,
            "{},{:e},{:.9},{:.9},{:.9}",
            r.iteration, r.lr, r.loss, r.classification, r.regression
        );
    }
    s
}

/// Training stopped early; carries the trace up to the failure.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub trace: Vec<TraceRow>,
}

impl fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} logged iterations)", self.error, self.trace.len())
    }
}

impl std::error::Error for TrainAbort {}

/// Per-anchor `[background, face]` logits and deltas of batch item 0.
pub fn flatten_output(out: &DetectionModuleOutput) -> Result<(Vec<[f32; 2]>, Vec<Delta>)> {
    let (_, c, h, w) = out.cls.dims4()?;
    let k = c / 2;
    let hw = h * w;
    let cls = out.cls.data();
    let reg = out.reg.data();
    let mut logits = Vec::with_capacity(hw * k);
    let mut deltas = Vec::with_capacity(hw * k);
    for p in 0..hw {
        for s in 0..k {
            logits.push([cls[2 * s * hw + p], cls[(2 * s + 1) * hw + p]]);
            deltas.push(Delta::new(
                reg[4 * s * hw + p],
                reg[(4 * s + 1) * hw + p],
                reg[(4 * s + 2) * hw + p],
                reg[(4 * s + 3) * hw + p],
            ));
        }
    }
    Ok((logits, deltas))
}

/// Inverse of [`flatten_output`] for gradients, scaled by `scale`.
fn scatter_grad(
    out: &DetectionModuleOutput,
    logits: &[[f32; 2]],
    deltas: &[Delta],
    scale: f32,
) -> Result<ModuleOutputGrad> {
    let (_, c, h, w) = out.cls.dims4()?;
    let k = c / 2;
    let hw = h * w;
    let mut gc = Tensor::zeros(out.cls.shape());
    let mut gr = Tensor::zeros(out.reg.shape());
    {
        let (dc, dr) = (gc.data_mut(), gr.data_mut());
        for p in 0..hw {
            for s in 0..k {
                let i = p * k + s;
                dc[2 * s * hw + p] = logits[i][0] * scale;
                dc[(2 * s + 1) * hw + p] = logits[i][1] * scale;
                let d = deltas[i].to_array();
                for (j, v) in d.iter().enumerate() {
                    dr[(4 * s + j) * hw + p] = v * scale;
                }
            }
        }
    }
    Ok(ModuleOutputGrad {
        module: out.module,
        cls: gc,
        reg: gr,
    })
}

/// Runs `config.iterations` SGD steps over `samples`, visiting images in a
/// seeded shuffled order per epoch.
pub fn train(
    net: &mut SshNet,
    anchors: &AnchorConfig,
    samples: &[TrainSample],
    config: &TrainConfig,
) -> std::result::Result<Vec<TraceRow>, TrainAbort> {
    let mut trace = Vec::with_capacity(config.iterations);
    let abort = |error: Error, trace: Vec<TraceRow>| TrainAbort { error, trace };
    if let Err(e) = config.validate() {
        return Err(abort(e, trace));
    }
    if samples.is_empty() {
        return Err(abort(Error::config("training set is empty"), trace));
    }
    net.set_stage1_trainable(!config.freeze_stage1);

    // Inputs and anchor labels depend only on the image, so both are
    // computed once.
    let mut prepared = Vec::with_capacity(samples.len());
    for s in samples {
        match prepare(net, anchors, s, &config.matching) {
            Ok(p) => prepared.push(p),
            Err(e) => return Err(abort(e, trace)),
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut state = SgdState::default();
    for iteration in 0..config.iterations {
        net.zero_grad();
        let mut row = TraceRow {
            iteration,
            lr: config.lr_at(iteration),
            loss: 0.0,
            classification: 0.0,
            regression: 0.0,
        };
        for _ in 0..config.images_per_step {
            if order.is_empty() {
                order = (0..prepared.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let idx = order.pop().expect("refilled above");
            let res = image_step(net, &prepared[idx], config);
            let value = match res {
                Ok(v) => v,
                Err(e) => return Err(abort(with_iteration(e, iteration), trace)),
            };
            let n = config.images_per_step as f64;
            row.loss += value.total / n;
            row.classification += value.classification() / n;
            row.regression += value.lambda * value.regression() / n;
        }
        if !row.loss.is_finite() || row.loss > config.divergence_threshold {
            trace.push(row);
            let reason = format!("loss {} exceeds {}", row.loss, config.divergence_threshold);
            return Err(abort(Error::Diverged { iteration, reason }, trace));
        }
        let mut params = net.params_mut();
        if let Err(e) = sgd_step(&mut params, &mut state, row.lr, config.momentum, config.weight_decay) {
            trace.push(row);
            return Err(abort(with_iteration(e, iteration), trace));
        }
        trace.push(row);
    }
    Ok(trace)
}

fn with_iteration(e: Error, iteration: usize) -> Error {
    match e {
        Error::Diverged { reason, .. } => Error::Diverged { iteration, reason },
        other => other,
    }
}

struct Prepared {
    input: Tensor,
    matches: Vec<MatchResult>,
}

fn prepare(net: &SshNet, anchors: &AnchorConfig, s: &TrainSample, cfg: &MatchConfig) -> Result<Prepared> {
    let input = s.image.to_tensor(INPUT_MULTIPLE);
    let (_, _, ph, pw) = input.dims4()?;
    let mut matches = Vec::new();
    for m in net.module_ids() {
        let stride = anchors.stride(m) as usize;
        let set = net.anchor_set(anchors, m, pw / stride, ph / stride)?;
        matches.push(assign(
            &set,
            &s.faces,
            s.image.width() as f32,
            s.image.height() as f32,
            cfg,
        )?);
    }
    Ok(Prepared { input, matches })
}

fn image_step(net: &mut SshNet, p: &Prepared, config: &TrainConfig) -> Result<crate::loss::LossValue> {
    let (outputs, cache) = net.forward(&p.input)?;
    let flat: Vec<(Vec<[f32; 2]>, Vec<Delta>)> =
        outputs.iter().map(flatten_output).collect::<Result<_>>()?;
    let mut sampled = Vec::with_capacity(outputs.len());
    for ((logits, _), m) in flat.iter().zip(&p.matches) {
        if logits.len() != m.len() {
            return Err(Error::contract(format!(
                "{}: {} anchors in the output, {} labelled",
                m.module,
                logits.len(),
                m.len()
            )));
        }
        let scores: Vec<f32> = logits.iter().map(|&l| softmax2(l)[1] as f32).collect();
        sampled.push(select(&scores, m, &config.ohem)?);
    }
    let inputs: Vec<ModuleLossInput<'_>> = flat
        .iter()
        .zip(&p.matches)
        .zip(&sampled)
        .map(|(((logits, deltas), matching), sampled)| ModuleLossInput {
            logits,
            deltas,
            matching,
            sampled,
        })
        .collect();
    let (value, grads) = total_loss(&inputs, config.lambda, config.loss_scope)?;
    let scale = 1.0 / config.images_per_step as f32;
    let out_grads: Vec<ModuleOutputGrad> = outputs
        .iter()
        .zip(&grads)
        .map(|(o, g)| scatter_grad(o, &g.logits, &g.deltas, scale))
        .collect::<Result<_>>()?;
    net.backward(&cache, &out_grads)?;
    Ok(value)
}

/// Result of [`train_toy`].
#[derive(Debug, Clone)]
pub struct ToyRun {
    pub net: SshNet,
    pub dataset: Vec<ToySample>,
    pub trace: Vec<TraceRow>,
}

/// Generates the synthetic dataset, builds a network seeded with
/// `train.seed` and trains it.
pub fn train_toy(config: &RunConfig) -> std::result::Result<ToyRun, TrainAbort> {
    let fail = |error| TrainAbort { error, trace: Vec::new() };
    config.validate().map_err(fail)?;
    let dataset = toy::generate(&config.toy).map_err(fail)?;
    let mut net = SshNet::build(&config.backbone, &config.anchors, config.train.seed).map_err(fail)?;
    let samples: Vec<TrainSample> = dataset.iter().map(TrainSample::from).collect();
    let trace = train(&mut net, &config.anchors, &samples, &config.train)?;
    Ok(ToyRun { net, dataset, trace })
}

// ---------------------------------------------------------------------------
// Toy evaluation

#[derive(Debug, Clone, PartialEq)]
pub struct BandReport {
    pub band: SizeBand,
    pub faces: usize,
    /// AP with the other bands' faces as ignore regions.
    pub ap: f64,
    pub true_positives: usize,
    /// Fraction of this band's true positives (over all detections) that
    /// come from the band's designated module.
    pub designated_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyReport {
    pub ap: f64,
    pub bands: Vec<BandReport>,
}

/// Single-scale detection at native resolution on every sample, then AP
/// overall and per band.
pub fn evaluate_toy(
    net: &SshNet,
    anchors: &AnchorConfig,
    samples: &[ToySample],
    infer_config: &InferConfig,
) -> Result<ToyReport> {
    let mut all: Vec<Vec<Detection>> = Vec::with_capacity(samples.len());
    for s in samples {
        let side = s.image.width().min(s.image.height()) as f64;
        let long = s.image.width().max(s.image.height()) as f64;
        all.push(infer::detect(net, anchors, &s.image, side, long, infer_config)?.detections);
    }
    let files: Vec<ImageDetections> = samples
        .iter()
        .zip(&all)
        .map(|(s, d)| ImageDetections {
            image: s.name.clone(),
            boxes: infer::DetectionSet { detections: d.clone() }.scored_boxes(),
        })
        .collect();
    let mut gt = GroundTruthDB::new();
    for s in samples {
        gt.insert_boxes(s.name.clone(), &s.faces)?;
    }
    let (curve, matches) = crate::eval::evaluate(&files, &gt, 0.5)?;

    let mut bands = Vec::new();
    for band in SizeBand::ALL {
        let mut band_gt = GroundTruthDB::new();
        for s in samples {
            let boxes = s
                .faces
                .iter()
                .zip(&s.bands)
                .map(|(&bbox, &b)| crate::eval::GtBox { bbox, ignore: b != band })
                .collect();
            band_gt.insert(s.name.clone(), boxes)?;
        }
        let (band_curve, _) = crate::eval::evaluate(&files, &band_gt, 0.5)?;
        let tps: Vec<_> = matches
            .iter()
            .filter(|m| m.outcome == Outcome::TruePositive)
            .filter(|m| samples[m.image].bands[m.gt.expect("tp has gt")] == band)
            .collect();
        let designated = tps
            .iter()
            .filter(|m| all[m.image][m.detection].module == band.designated_module())
            .count();
        bands.push(BandReport {
            band,
            faces: band_gt.num_active(),
            ap: band_curve.ap,
            true_positives: tps.len(),
            designated_fraction: if tps.is_empty() {
                0.0
            } else {
                designated as f64 / tps.len() as f64
            },
        });
    }
    Ok(ToyReport { ap: curve.ap, bands })
}
