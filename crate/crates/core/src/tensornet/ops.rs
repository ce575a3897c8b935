use super::{ConvParams, Tensor};
use crate::error::{Error, Result};

fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::contract(format!(
            "input extent {input} (pad {pad}) smaller than kernel {kernel}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, p: &ConvParams) -> Result<(usize, Self)> {
        p.validate()?;
        let (n, c, h, w) = x.dims4()?;
        if c != p.c_in() {
            return Err(Error::contract(format!(
                "conv expects {} input channels, got {}",
                p.c_in(),
                c
            )));
        }
        let (kh, kw) = p.kernel();
        let ho = conv_out_dim(h, kh, p.stride, p.padding)?;
        let wo = conv_out_dim(w, kw, p.stride, p.padding)?;
        Ok((
            n,
            Self {
                c_in: c,
                h,
                w,
                kh,
                kw,
                stride: p.stride,
                pad: p.padding,
                ho,
                wo,
            },
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Input column for output column `o` and kernel offset `k`, if in bounds.
    fn src_index(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let v = (o * self.stride + k) as isize - self.pad as isize;
        (v >= 0 && (v as usize) < extent).then_some(v as usize)
    }

    /// Unfolds one image `(c, h, w)` into `(c*kh*kw, ho*wo)`.
    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let hw = self.ho * self.wo;
        for ci in 0..self.c_in {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let out_row = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        match self.src_index(oy, ky, self.h) {
                            None => out_row.fill(0.0),
                            Some(iy) => {
                                let src = &plane[iy * self.w..(iy + 1) * self.w];
                                if self.stride == 1 {
                                    self.copy_row_unit_stride(src, kx, out_row);
                                } else {
                                    for (ox, v) in out_row.iter_mut().enumerate() {
                                        *v = self.src_index(ox, kx, self.w).map_or(0.0, |ix| src[ix]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn copy_row_unit_stride(&self, src: &[f32], kx: usize, out: &mut [f32]) {
        // Output column ox reads src[ox + kx - pad].
        let shift = kx as isize - self.pad as isize;
        let lo = (-shift).max(0) as usize;
        let hi = ((self.w as isize - shift).min(self.wo as isize)).max(lo as isize) as usize;
        out[..lo].fill(0.0);
        out[hi..].fill(0.0);
        if hi > lo {
            let s0 = (lo as isize + shift) as usize;
            out[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: accumulates columns into `gx`.
    fn col2im(&self, cols: &[f32], gx: &mut [f32]) {
        let hw = self.ho * self.wo;
        for ci in 0..self.c_in {
            let plane = &mut gx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let Some(iy) = self.src_index(oy, ky, self.h) else {
                            continue;
                        };
                        let in_row = &src[oy * self.wo..(oy + 1) * self.wo];
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        for (ox, &g) in in_row.iter().enumerate() {
                            if let Some(ix) = self.src_index(ox, kx, self.w) {
                                dst[ix] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c (m x n) = alpha * a (m x k) * b (k x n) + beta * c`, with explicit
/// row/column strides for `a` and `b` so transposes need no copies.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the asserted extents cover every element the kernel touches,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let (n, g) = ConvGeom::new(x, p)?;
    let c_out = p.c_out();
    let hw = g.ho * g.wo;
    let kk = g.patch_len();
    let in_len = g.c_in * g.h * g.w;
    let mut out = Tensor::zeros(&[n, c_out, g.ho, g.wo]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * hw] };
    let wdat = p.weight.data();
    let bias = p.bias.data();
    for b in 0..n {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let ob = &mut out.data_mut()[b * c_out * hw..(b + 1) * c_out * hw];
        for (co, row) in ob.chunks_exact_mut(hw).enumerate() {
            row.fill(bias[co]);
        }
        let src: &[f32] = if g.is_pointwise() {
            xb
        } else {
            g.im2col(xb, &mut cols);
            &cols
        };
        gemm(c_out, kk, hw, wdat, (kk, 1), src, (hw, 1), 1.0, ob);
    }
    Ok(out)
}

/// Accumulates weight and bias gradients into `p` (when trainable) and
/// returns the input gradient when `need_input_grad` is set.
pub fn conv2d_backward(
    x: &Tensor,
    p: &mut ConvParams,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<Option<Tensor>> {
    let (n, g) = ConvGeom::new(x, p)?;
    let c_out = p.c_out();
    if grad_out.shape() != [n, c_out, g.ho, g.wo] {
        return Err(Error::contract(format!(
            "conv grad shape {:?} != output shape {:?}",
            grad_out.shape(),
            [n, c_out, g.ho, g.wo]
        )));
    }
    let hw = g.ho * g.wo;
    let kk = g.patch_len();
    let in_len = g.c_in * g.h * g.w;
    let train = p.weight.requires_grad();
    let mut gx = need_input_grad.then(|| Tensor::zeros(x.shape()));
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * hw] };
    let mut gcols = if g.is_pointwise() || !need_input_grad {
        Vec::new()
    } else {
        vec![0.0; kk * hw]
    };
    for b in 0..n {
        let gob = &grad_out.data()[b * c_out * hw..(b + 1) * c_out * hw];
        if train {
            let xb = &x.data()[b * in_len..(b + 1) * in_len];
            let src: &[f32] = if g.is_pointwise() {
                xb
            } else {
                g.im2col(xb, &mut cols);
                &cols
            };
            gemm(c_out, hw, kk, gob, (hw, 1), src, (1, hw), 1.0, p.weight.grad_mut());
            let gb = p.bias.grad_mut();
            for (co, row) in gob.chunks_exact(hw).enumerate() {
                gb[co] += row.iter().sum::<f32>();
            }
        }
        if let Some(gx) = gx.as_mut() {
            let gxb = &mut gx.data_mut()[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                gemm(kk, c_out, hw, p.weight.data(), (1, kk), gob, (hw, 1), 0.0, gxb);
            } else {
                gemm(kk, c_out, hw, p.weight.data(), (1, kk), gob, (hw, 1), 0.0, &mut gcols);
                g.col2im(&gcols, gxb);
            }
        }
    }
    Ok(gx)
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.grad = None;
    y.requires_grad = false;
    for v in y.data_mut() {
        *v = v.max(0.0);
    }
    y
}

/// Backward of [`relu`] given its output.
pub fn relu_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    same_shape(y, grad_out, "relu")?;
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(y.shape(), data)
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "{op}: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Window-2 stride-2 max pooling; odd trailing rows/columns are dropped.
pub fn maxpool2x2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        let oplane = &mut dst[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            let r0 = &plane[2 * oy * w..(2 * oy + 1) * w];
            let r1 = &plane[(2 * oy + 1) * w..(2 * oy + 2) * w];
            for ox in 0..wo {
                let (a, b) = (r0[2 * ox], r0[2 * ox + 1]);
                let (c2, d) = (r1[2 * ox], r1[2 * ox + 1]);
                oplane[oy * wo + ox] = a.max(b).max(c2).max(d);
            }
        }
    }
    Ok(out)
}

/// Routes each output gradient to the first maximal element of its window.
pub fn maxpool2x2_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (h / 2, w / 2);
    if grad_out.shape() != [n, c, ho, wo] {
        return Err(Error::contract(format!(
            "maxpool grad shape {:?} != {:?}",
            grad_out.shape(),
            [n, c, ho, wo]
        )));
    }
    let mut gx = Tensor::zeros(x.shape());
    let src = x.data();
    let g = grad_out.data();
    let dst = gx.data_mut();
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let cand = [
                    base + 2 * oy * w + 2 * ox,
                    base + 2 * oy * w + 2 * ox + 1,
                    base + (2 * oy + 1) * w + 2 * ox,
                    base + (2 * oy + 1) * w + 2 * ox + 1,
                ];
                let mut best = cand[0];
                for &i in &cand[1..] {
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                dst[best] += g[p * ho * wo + oy * wo + ox];
            }
        }
    }
    Ok(gx)
}

/// Source taps for 2x bilinear upsampling along one axis, half-pixel centers.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f32, f32)> {
    (0..2 * n)
        .map(|p| {
            let src = ((p as f32 + 0.5) * 0.5 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let l = src - i0 as f32;
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

pub fn upsample_bilinear_2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::contract("upsample of an empty map"));
    }
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        let op = &mut dst[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let top = wx0 * plane[y0 * w + x0] + wx1 * plane[y0 * w + x1];
                let bot = wx0 * plane[y1 * w + x0] + wx1 * plane[y1 * w + x1];
                op[oy * wo + ox] = wy0 * top + wy1 * bot;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample_bilinear_2x`] for an input of `input_shape`.
pub fn upsample_bilinear_2x_backward(grad_out: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let [n, c, h, w] = input_shape[..] else {
        return Err(Error::contract("upsample backward needs an NCHW shape"));
    };
    let (ho, wo) = (2 * h, 2 * w);
    if grad_out.shape() != [n, c, ho, wo] {
        return Err(Error::contract(format!(
            "upsample grad shape {:?} != {:?}",
            grad_out.shape(),
            [n, c, ho, wo]
        )));
    }
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let mut gx = Tensor::zeros(input_shape);
    let g = grad_out.data();
    let dst = gx.data_mut();
    for p in 0..n * c {
        let gp = &g[p * ho * wo..(p + 1) * ho * wo];
        let plane = &mut dst[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = gp[oy * wo + ox];
                plane[y0 * w + x0] += wy0 * wx0 * v;
                plane[y0 * w + x1] += wy0 * wx1 * v;
                plane[y1 * w + x0] += wy1 * wx0 * v;
                plane[y1 * w + x1] += wy1 * wx1 * v;
            }
        }
    }
    Ok(gx)
}

pub fn add(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape(x, y, "add")?;
    let data = x.data().iter().zip(y.data()).map(|(a, b)| a + b).collect();
    Tensor::from_vec(x.shape(), data)
}

/// Both addends receive the output gradient unchanged.
pub fn add_backward(grad_out: &Tensor) -> (Tensor, Tensor) {
    let mut g = grad_out.clone();
    g.grad = None;
    (g.clone(), g)
}

pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::contract("concat of zero tensors"))?;
    let (n, _, h, w) = first.dims4()?;
    let mut channels = Vec::with_capacity(xs.len());
    for t in xs {
        let (tn, tc, th, tw) = t.dims4()?;
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::contract(format!(
                "concat: shape {:?} incompatible with {:?}",
                t.shape(),
                first.shape()
            )));
        }
        channels.push(tc);
    }
    let total: usize = channels.iter().sum();
    let hw = h * w;
    let mut data = Vec::with_capacity(n * total * hw);
    for b in 0..n {
        for (t, &c) in xs.iter().zip(&channels) {
            data.extend_from_slice(&t.data()[b * c * hw..(b + 1) * c * hw]);
        }
    }
    Tensor::from_vec(&[n, total, h, w], data)
}

/// Splits an output gradient back into per-input gradients.
pub fn concat_channels_backward(grad_out: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let (n, c, h, w) = grad_out.dims4()?;
    if channels.iter().sum::<usize>() != c {
        return Err(Error::contract(format!(
            "concat backward: channels {channels:?} do not sum to {c}"
        )));
    }
    let hw = h * w;
    let mut parts: Vec<Vec<f32>> = channels
        .iter()
        .map(|&ci| Vec::with_capacity(n * ci * hw))
        .collect();
    let g = grad_out.data();
    for b in 0..n {
        let mut off = b * c * hw;
        for (part, &ci) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&g[off..off + ci * hw]);
            off += ci * hw;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(d, &ci)| Tensor::from_vec(&[n, ci, h, w], d))
        .collect()
}

/// Two-way softmax over channel pairs `(2k, 2k + 1)` at every pixel.
pub fn softmax_pairs(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if c % 2 != 0 {
        return Err(Error::contract(format!("softmax_pairs needs even channels, got {c}")));
    }
    let hw = h * w;
    let mut out = x.clone();
    out.grad = None;
    let src = x.data();
    let dst = out.data_mut();
    for b in 0..n {
        for k in 0..c / 2 {
            let a0 = (b * c + 2 * k) * hw;
            let a1 = a0 + hw;
            for i in 0..hw {
                let (u, v) = (src[a0 + i], src[a1 + i]);
                let m = u.max(v);
                let (eu, ev) = ((u - m).exp(), (v - m).exp());
                let z = eu + ev;
                dst[a0 + i] = eu / z;
                dst[a1 + i] = ev / z;
            }
        }
    }
    Ok(out)
}
