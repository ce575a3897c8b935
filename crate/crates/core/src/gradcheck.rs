//! Finite-difference verification of every analytic backward pass.
//!
//! Operator suites differentiate independent naive f64 reference forwards
//! (direct loops, no im2col or GEMM) by central differences and compare with
//! the f32 analytic gradients of the real kernels. The loss suite
//! differentiates the loss value itself, which is accumulated in f64.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::ModuleId;
use crate::boxcodec::Delta;
use crate::loss::{total_loss, LossScope, ModuleLossInput};
use crate::matching::{Label, MatchResult};
use crate::tensornet::{self as tn, ConvParams, Tensor};

pub const FD_EPSILON: f64 = 1e-3;
pub const OP_TOLERANCE: f64 = 1e-3;
pub const LOSS_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub suites: Vec<SuiteResult>,
    pub seconds: f64,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            writeln!(
                f,
                "{:<6} {:<22} instances={:<3} max_rel_error={:.3e} tolerance={:.0e}",
                if s.passed() { "PASS" } else { "FAIL" },
                s.name,
                s.instances,
                s.max_rel_error,
                s.tolerance
            )?;
        }
        write!(f, "elapsed {:.2}s", self.seconds)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

const REL_FLOOR: f64 = 1e-3;

/// Runs every suite on `instances` seeded random problems each.
pub fn run(seed: u64, instances: usize) -> Report {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    type Suite = (&'static str, f64, fn(&mut ChaCha8Rng) -> f64);
    let suites: [Suite; 9] = [
        ("conv2d_3x3", OP_TOLERANCE, check_conv3x3),
        ("conv2d_1x1", OP_TOLERANCE, check_conv1x1),
        ("conv2d_3x3_stride2", OP_TOLERANCE, check_conv_strided),
        ("relu", OP_TOLERANCE, check_relu),
        ("maxpool2x2", OP_TOLERANCE, check_maxpool),
        ("upsample_bilinear_2x", OP_TOLERANCE, check_upsample),
        ("add", OP_TOLERANCE, check_add),
        ("concat_channels", OP_TOLERANCE, check_concat),
        ("total_loss", LOSS_TOLERANCE, check_total_loss),
    ];
    let results = suites
        .iter()
        .map(|&(name, tolerance, f)| {
            let max = (0..instances).map(|_| f(&mut rng)).fold(0.0, f64::max);
            SuiteResult {
                name,
                instances,
                max_rel_error: max,
                tolerance,
            }
        })
        .collect();
    Report {
        suites: results,
        seconds: start.elapsed().as_secs_f64(),
    }
}

// ---------------------------------------------------------------------------
// f64 reference forwards on (shape, data) pairs

#[derive(Clone)]
struct Ref {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Ref {
    fn of(t: &Tensor) -> Self {
        let (n, c, h, w) = t.dims4().expect("nchw");
        Self {
            n,
            c,
            h,
            w,
            v: t.data().iter().map(|&x| x as f64).collect(),
        }
    }

    fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.v[((b * self.c + c) * self.h + y) * self.w + x]
    }
}

fn ref_conv(x: &Ref, weight: &[f64], bias: &[f64], c_out: usize, k: usize, stride: usize, pad: usize) -> Vec<f64> {
    let ho = (x.h + 2 * pad - k) / stride + 1;
    let wo = (x.w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; x.n * c_out * ho * wo];
    for b in 0..x.n {
        for co in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[co];
                    for ci in 0..x.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                let wv = weight[((co * x.c + ci) * k + ky) * k + kx];
                                acc += wv * x.at(b, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out[((b * c_out + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn ref_upsample(x: &Ref) -> Vec<f64> {
    let tap = |p: usize, n: usize| {
        let s = ((p as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n - 1);
        (i0, (i0 + 1).min(n - 1), s - i0 as f64)
    };
    let (ho, wo) = (2 * x.h, 2 * x.w);
    let mut out = Vec::with_capacity(x.n * x.c * ho * wo);
    for b in 0..x.n {
        for c in 0..x.c {
            for oy in 0..ho {
                let (y0, y1, ly) = tap(oy, x.h);
                for ox in 0..wo {
                    let (x0, x1, lx) = tap(ox, x.w);
                    let v = (1.0 - ly) * ((1.0 - lx) * x.at(b, c, y0, x0) + lx * x.at(b, c, y0, x1))
                        + ly * ((1.0 - lx) * x.at(b, c, y1, x0) + lx * x.at(b, c, y1, x1));
                    out.push(v);
                }
            }
        }
    }
    out
}

fn ref_maxpool(x: &Ref) -> Vec<f64> {
    let mut out = Vec::new();
    for b in 0..x.n {
        for c in 0..x.c {
            for oy in 0..x.h / 2 {
                for ox in 0..x.w / 2 {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x.at(b, c, 2 * oy + dy, 2 * ox + dx));
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Generic checker

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max relative error between `analytic[i]` and the central difference of
/// `f` with respect to `inputs[i]`.
fn compare(inputs: &[f64], analytic: &[f32], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    let mut buf = inputs.to_vec();
    for i in 0..inputs.len() {
        buf[i] = inputs[i] + FD_EPSILON;
        let up = f(&buf);
        buf[i] = inputs[i] - FD_EPSILON;
        let down = f(&buf);
        buf[i] = inputs[i];
        let numeric = (up - down) / (2.0 * FD_EPSILON);
        worst = worst.max(rel_error(analytic[i] as f64, numeric, REL_FLOOR));
    }
    worst
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).expect("shape")
}

fn as_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn with_values(template: &Ref, v: &[f64]) -> Ref {
    Ref {
        v: v.to_vec(),
        ..template.clone()
    }
}

fn check_conv(rng: &mut ChaCha8Rng, k: usize, stride: usize) -> f64 {
    let (c_in, c_out) = (3, 4);
    let x = random_tensor(&[2, c_in, 6, 6], rng);
    let mut p = ConvParams::new(c_in, c_out, k).expect("kernel");
    p.stride = stride;
    p.weight = random_tensor(&[c_out, c_in, k, k], rng).with_requires_grad(true);
    p.bias = random_tensor(&[c_out], rng).with_requires_grad(true);
    let y = tn::conv2d(&x, &p).expect("conv");
    let r = random_tensor(y.shape(), rng);
    let gx = tn::conv2d_backward(&x, &mut p, &r, true).expect("backward").expect("gx");
    let rv = as_f64(&r);
    let xr = Ref::of(&x);
    let (wv, bv) = (as_f64(&p.weight), as_f64(&p.bias));
    let pad = p.padding;

    let e_x = compare(&xr.v, gx.data(), |v| {
        dot(&rv, &ref_conv(&with_values(&xr, v), &wv, &bv, c_out, k, stride, pad))
    });
    let e_w = compare(&wv, p.weight.grad().expect("gw"), |v| {
        dot(&rv, &ref_conv(&xr, v, &bv, c_out, k, stride, pad))
    });
    let e_b = compare(&bv, p.bias.grad().expect("gb"), |v| {
        dot(&rv, &ref_conv(&xr, &wv, v, c_out, k, stride, pad))
    });
    e_x.max(e_w).max(e_b)
}

fn check_conv3x3(rng: &mut ChaCha8Rng) -> f64 {
    check_conv(rng, 3, 1)
}

fn check_conv1x1(rng: &mut ChaCha8Rng) -> f64 {
    check_conv(rng, 1, 1)
}

fn check_conv_strided(rng: &mut ChaCha8Rng) -> f64 {
    check_conv(rng, 3, 2)
}

fn check_relu(rng: &mut ChaCha8Rng) -> f64 {
    // Keep inputs away from the kink by more than the FD step.
    let data: Vec<f32> = (0..2 * 3 * 6 * 6)
        .map(|_| {
            let m = rng.random_range(0.05f32..1.0);
            if rng.random() { m } else { -m }
        })
        .collect();
    let x = Tensor::from_vec(&[2, 3, 6, 6], data).expect("shape");
    let y = tn::relu(&x);
    let r = random_tensor(y.shape(), rng);
    let gx = tn::relu_backward(&y, &r).expect("relu");
    let rv = as_f64(&r);
    compare(&as_f64(&x), gx.data(), |v| {
        dot(&rv, &v.iter().map(|&u| u.max(0.0)).collect::<Vec<_>>())
    })
}

fn check_maxpool(rng: &mut ChaCha8Rng) -> f64 {
    // Distinct values at least 0.01 apart so no window has a near tie.
    let n = 2 * 3 * 6 * 6;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let data: Vec<f32> = order.iter().map(|&i| i as f32 * 0.01 - 1.0).collect();
    let x = Tensor::from_vec(&[2, 3, 6, 6], data).expect("shape");
    let y = tn::maxpool2x2(&x).expect("pool");
    let r = random_tensor(y.shape(), rng);
    let gx = tn::maxpool2x2_backward(&x, &r).expect("pool backward");
    let rv = as_f64(&r);
    let xr = Ref::of(&x);
    compare(&xr.v, gx.data(), |v| dot(&rv, &ref_maxpool(&with_values(&xr, v))))
}

fn check_upsample(rng: &mut ChaCha8Rng) -> f64 {
    let x = random_tensor(&[2, 3, 6, 6], rng);
    let y = tn::upsample_bilinear_2x(&x).expect("upsample");
    let r = random_tensor(y.shape(), rng);
    let gx = tn::upsample_bilinear_2x_backward(&r, x.shape()).expect("backward");
    let rv = as_f64(&r);
    let xr = Ref::of(&x);
    compare(&xr.v, gx.data(), |v| dot(&rv, &ref_upsample(&with_values(&xr, v))))
}

fn check_add(rng: &mut ChaCha8Rng) -> f64 {
    let x = random_tensor(&[2, 3, 6, 6], rng);
    let y = random_tensor(&[2, 3, 6, 6], rng);
    let r = random_tensor(x.shape(), rng);
    let (gx, gy) = tn::add_backward(&r);
    let (rv, xv, yv) = (as_f64(&r), as_f64(&x), as_f64(&y));
    let sum = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u + v).collect::<Vec<_>>();
    let ex = compare(&xv, gx.data(), |v| dot(&rv, &sum(v, &yv)));
    let ey = compare(&yv, gy.data(), |v| dot(&rv, &sum(&xv, v)));
    ex.max(ey)
}

fn check_concat(rng: &mut ChaCha8Rng) -> f64 {
    let a = random_tensor(&[2, 3, 6, 6], rng);
    let b = random_tensor(&[2, 2, 6, 6], rng);
    let y = tn::concat_channels(&[&a, &b]).expect("concat");
    let r = random_tensor(y.shape(), rng);
    let grads = tn::concat_channels_backward(&r, &[3, 2]).expect("backward");
    let rv = as_f64(&r);
    // Reference: explicit per-element placement into the (n, 5, h, w) output.
    let place = |av: &[f64], bv: &[f64]| {
        let hw = 36;
        let mut out = vec![0.0; 2 * 5 * hw];
        for n in 0..2 {
            for c in 0..5 {
                for i in 0..hw {
                    out[(n * 5 + c) * hw + i] = if c < 3 {
                        av[(n * 3 + c) * hw + i]
                    } else {
                        bv[(n * 2 + c - 3) * hw + i]
                    };
                }
            }
        }
        out
    };
    let (av, bv) = (as_f64(&a), as_f64(&b));
    let ea = compare(&av, grads[0].data(), |v| dot(&rv, &place(v, &bv)));
    let eb = compare(&bv, grads[1].data(), |v| dot(&rv, &place(&av, v)));
    ea.max(eb)
}

/// Random three-module loss instance: labels, targets, an OHEM-like sample.
/// One module's labels, logits, deltas and sampled indices.
pub type LossInstance = (MatchResult, Vec<[f32; 2]>, Vec<Delta>, Vec<usize>);

pub fn random_loss_instance(rng: &mut impl Rng) -> Vec<LossInstance> {
    ModuleId::ALL
        .iter()
        .map(|&module| {
            let n = rng.random_range(4..40);
            let mut m = MatchResult {
                module,
                labels: Vec::with_capacity(n),
                gt_index: vec![None; n],
                targets: vec![None; n],
                max_iou: vec![0.0; n],
            };
            let mut deltas = Vec::with_capacity(n);
            for i in 0..n {
                let label = match rng.random_range(0..6) {
                    0 | 1 => Label::Positive,
                    2 => Label::Ignore,
                    _ => Label::Negative,
                };
                m.labels.push(label);
                let pred: [f32; 4] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
                if label == Label::Positive {
                    m.gt_index[i] = Some(0);
                    // Keep |pred - target| away from the smooth-L1 kink.
                    let target: [f32; 4] = std::array::from_fn(|c| loop {
                        let t = rng.random_range(-2.0f32..2.0);
                        if ((pred[c] - t).abs() - 1.0).abs() > 0.01 {
                            break t;
                        }
                    });
                    m.targets[i] = Some(Delta::from_array(target));
                }
                deltas.push(Delta::from_array(pred));
            }
            let logits: Vec<[f32; 2]> = (0..n)
                .map(|_| [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)])
                .collect();
            let sampled: Vec<usize> = (0..n)
                .filter(|&i| m.labels[i] != Label::Ignore && rng.random_bool(0.7))
                .collect();
            (m, logits, deltas, sampled)
        })
        .collect()
}

fn check_total_loss(rng: &mut ChaCha8Rng) -> f64 {
    let inst = random_loss_instance(rng);
    let lambda = rng.random_range(0.5..2.0);
    let eval = |inst: &[LossInstance]| {
        let inputs: Vec<ModuleLossInput<'_>> = inst
            .iter()
            .map(|(m, l, d, s)| ModuleLossInput {
                logits: l,
                deltas: d,
                matching: m,
                sampled: s,
            })
            .collect();
        total_loss(&inputs, lambda, LossScope::Sampled).expect("loss")
    };
    let (_, grads) = eval(&inst);
    let mut worst = 0.0f64;
    let eps = FD_EPSILON as f32;
    for k in 0..inst.len() {
        for i in 0..inst[k].1.len() {
            for c in 0..6 {
                let mut up = inst.clone();
                let mut down = inst.clone();
                let (u, d, a) = if c < 2 {
                    up[k].1[i][c] += eps;
                    down[k].1[i][c] -= eps;
                    (up[k].1[i][c], down[k].1[i][c], grads[k].logits[i][c])
                } else {
                    let mut ua = up[k].2[i].to_array();
                    let mut da = down[k].2[i].to_array();
                    ua[c - 2] += eps;
                    da[c - 2] -= eps;
                    up[k].2[i] = Delta::from_array(ua);
                    down[k].2[i] = Delta::from_array(da);
                    (ua[c - 2], da[c - 2], grads[k].deltas[i].to_array()[c - 2])
                };
                let numeric = (eval(&up).0.total - eval(&down).0.total) / (u as f64 - d as f64);
                worst = worst.max(rel_error(a as f64, numeric, 1e-6));
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        let report = run(1234, 3);
        println!("{report}");
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(0.0, 0.0, 1e-3), 0.0);
        assert!((rel_error(1.0, 1.1, 1e-3) - 0.1 / 1.1).abs() < 1e-12);
        assert!((rel_error(1e-6, 0.0, 1e-3) - 1e-3).abs() < 1e-12);
    }
}
