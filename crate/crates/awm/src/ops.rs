//! Forward operators and their reverse-mode gradients.
//!
//! Convolution and the fully connected layer lower to f64 gemm
//! (`matrixmultiply`); everything else is direct loops. All operators
//! validate shapes up front and return `Err` on mismatch.

use std::cell::RefCell;
use std::rc::Rc;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// elementwise / reduction basics
// ---------------------------------------------------------------------------

pub fn add(a: &Var, b: &Var) -> Result<Var> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", a.shape(), b.shape()));
    }
    let mut out = a.value().clone();
    out.add_assign(b.value());
    Ok(Var::new_op(out, vec![a.clone(), b.clone()], Box::new(|ctx| {
        ctx.parents[0].accumulate(ctx.grad);
        ctx.parents[1].accumulate(ctx.grad);
    })))
}

pub fn mul(a: &Var, b: &Var) -> Result<Var> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mul", a.shape(), b.shape()));
    }
    let data: Vec<f64> = a
        .value()
        .data()
        .iter()
        .zip(b.value().data())
        .map(|(x, y)| x * y)
        .collect();
    let out = Tensor::new(a.shape(), data)?;
    Ok(Var::new_op(out, vec![a.clone(), b.clone()], Box::new(|ctx| {
        let a = &ctx.parents[0];
        let b = &ctx.parents[1];
        let mut ga = b.value().clone();
        for (g, &go) in ga.data_mut().iter_mut().zip(ctx.grad.data()) {
            *g *= go;
        }
        let mut gb = a.value().clone();
        for (g, &go) in gb.data_mut().iter_mut().zip(ctx.grad.data()) {
            *g *= go;
        }
        a.accumulate(&ga);
        b.accumulate(&gb);
    })))
}

pub fn scale(a: &Var, c: f64) -> Var {
    let out = a.value().map(|x| x * c);
    Var::new_op(out, vec![a.clone()], Box::new(move |ctx| {
        ctx.parents[0].accumulate(&ctx.grad.map(|g| g * c));
    }))
}

pub fn sum(a: &Var) -> Var {
    let total: f64 = a.value().data().iter().sum();
    Var::new_op(Tensor::scalar(total), vec![a.clone()], Box::new(|ctx| {
        let g = ctx.grad.item();
        let p = &ctx.parents[0];
        p.accumulate(&Tensor::full(p.shape(), g));
    }))
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn activation(x: &Var, kind: Activation) -> Var {
    match kind {
        Activation::Relu => relu(x),
        Activation::Sigmoid => sigmoid(x),
    }
}

pub fn relu(x: &Var) -> Var {
    let out = x.value().map(|v| v.max(0.0));
    Var::new_op(out, vec![x.clone()], Box::new(|ctx| {
        let x = &ctx.parents[0];
        let mut g = ctx.grad.clone();
        for (g, &xv) in g.data_mut().iter_mut().zip(x.value().data()) {
            if xv <= 0.0 {
                *g = 0.0;
            }
        }
        x.accumulate(&g);
    }))
}

pub fn sigmoid(x: &Var) -> Var {
    let out = x.value().map(|v| 1.0 / (1.0 + (-v).exp()));
    Var::new_op(out, vec![x.clone()], Box::new(|ctx| {
        let mut g = ctx.grad.clone();
        for (g, &y) in g.data_mut().iter_mut().zip(ctx.out.data()) {
            *g *= y * (1.0 - y);
        }
        ctx.parents[0].accumulate(&g);
    }))
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Fill `col` (Cin*Kh*Kw rows by OH*OW cols, row-major) from one image.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    let nsp = oh * ow;
    for c in 0..cin {
        for dkh in 0..kh {
            for dkw in 0..kw {
                let row = (c * kh + dkh) * kw + dkw;
                let dst = &mut col[row * nsp..(row + 1) * nsp];
                for o_h in 0..oh {
                    let ih = o_h * stride + dkh;
                    if ih < pad || ih >= h + pad {
                        dst[o_h * ow..(o_h + 1) * ow].fill(0.0);
                        continue;
                    }
                    let ih = ih - pad;
                    let src_row = &x[(c * h + ih) * w..(c * h + ih + 1) * w];
                    for o_w in 0..ow {
                        let iw = o_w * stride + dkw;
                        dst[o_h * ow + o_w] = if iw < pad || iw >= w + pad {
                            0.0
                        } else {
                            src_row[iw - pad]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the column gradient back into one image's gradient buffer.
#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let nsp = oh * ow;
    for c in 0..cin {
        for dkh in 0..kh {
            for dkw in 0..kw {
                let row = (c * kh + dkh) * kw + dkw;
                let src = &col[row * nsp..(row + 1) * nsp];
                for o_h in 0..oh {
                    let ih = o_h * stride + dkh;
                    if ih < pad || ih >= h + pad {
                        continue;
                    }
                    let ih = ih - pad;
                    for o_w in 0..ow {
                        let iw = o_w * stride + dkw;
                        if iw < pad || iw >= w + pad {
                            continue;
                        }
                        dx[(c * h + ih) * w + iw - pad] += src[o_h * ow + o_w];
                    }
                }
            }
        }
    }
}

/// Zero-padded 2-D convolution (cross-correlation, the CNN convention).
pub fn conv2d(x: &Var, kernel: &Var, stride: usize, pad: usize) -> Result<Var> {
    let (b, cin, h, w) = x.value().dims4("conv2d input")?;
    let (cout, kcin, kh, kw) = kernel.value().dims4("conv2d kernel")?;
    if cin != kcin {
        return Err(Error::shape("conv2d channels", &[cout, cin, kh, kw], kernel.shape()));
    }
    if stride == 0 || stride > 2 {
        return Err(Error::invalid(format!("conv2d stride must be 1 or 2, got {stride}")));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::invalid(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let k = cin * kh * kw;
    let nsp = oh * ow;

    let mut out = Tensor::zeros(&[b, cout, oh, ow]);
    let mut col = vec![0.0f64; k * nsp];
    {
        let xd = x.value().data();
        let wd = kernel.value().data();
        let od = out.data_mut();
        for bi in 0..b {
            im2col(&xd[bi * cin * h * w..], cin, h, w, kh, kw, stride, pad, oh, ow, &mut col);
            unsafe {
                matrixmultiply::dgemm(
                    cout, k, nsp,
                    1.0,
                    wd.as_ptr(), k as isize, 1,
                    col.as_ptr(), nsp as isize, 1,
                    0.0,
                    od[bi * cout * nsp..].as_mut_ptr(), nsp as isize, 1,
                );
            }
        }
    }

    let dims = (b, cin, h, w, cout, kh, kw, stride, pad, oh, ow);
    Ok(Var::new_op(out, vec![x.clone(), kernel.clone()], Box::new(move |ctx| {
        let (b, cin, h, w, cout, kh, kw, stride, pad, oh, ow) = dims;
        let k = cin * kh * kw;
        let nsp = oh * ow;
        let x = &ctx.parents[0];
        let kernel = &ctx.parents[1];
        let xd = x.value().data();
        let wd = kernel.value().data();
        let gd = ctx.grad.data();

        let mut dx = Tensor::zeros(x.shape());
        let mut dw = Tensor::zeros(kernel.shape());
        let mut col = vec![0.0f64; k * nsp];
        let mut dcol = vec![0.0f64; k * nsp];
        {
            let dxd = dx.data_mut();
            let dwd = dw.data_mut();
            for bi in 0..b {
                im2col(&xd[bi * cin * h * w..], cin, h, w, kh, kw, stride, pad, oh, ow, &mut col);
                let dy = &gd[bi * cout * nsp..(bi + 1) * cout * nsp];
                unsafe {
                    // dW += dY (Cout x Nsp) * col^T (Nsp x K)
                    matrixmultiply::dgemm(
                        cout, nsp, k,
                        1.0,
                        dy.as_ptr(), nsp as isize, 1,
                        col.as_ptr(), 1, nsp as isize,
                        1.0,
                        dwd.as_mut_ptr(), k as isize, 1,
                    );
                    // dcol = W^T (K x Cout) * dY (Cout x Nsp)
                    matrixmultiply::dgemm(
                        k, cout, nsp,
                        1.0,
                        wd.as_ptr(), 1, k as isize,
                        dy.as_ptr(), nsp as isize, 1,
                        0.0,
                        dcol.as_mut_ptr(), nsp as isize, 1,
                    );
                }
                col2im(&dcol, cin, h, w, kh, kw, stride, pad, oh, ow,
                       &mut dxd[bi * cin * h * w..(bi + 1) * cin * h * w]);
            }
        }
        x.accumulate(&dx);
        kernel.accumulate(&dw);
    })))
}

// ---------------------------------------------------------------------------
// fully connected
// ---------------------------------------------------------------------------

/// y = x * w^T + bias, with x: BxD, w: ExD, bias: E.
pub fn fully_connected(x: &Var, w: &Var, bias: &Var) -> Result<Var> {
    let (b, d) = x.value().dims2("fully_connected input")?;
    let (e, wd_) = w.value().dims2("fully_connected weight")?;
    if wd_ != d {
        return Err(Error::shape("fully_connected weight", &[e, d], w.shape()));
    }
    if bias.shape() != [e] {
        return Err(Error::shape("fully_connected bias", &[e], bias.shape()));
    }

    let mut out = Tensor::zeros(&[b, e]);
    unsafe {
        matrixmultiply::dgemm(
            b, d, e,
            1.0,
            x.value().data().as_ptr(), d as isize, 1,
            w.value().data().as_ptr(), 1, d as isize,
            0.0,
            out.data_mut().as_mut_ptr(), e as isize, 1,
        );
    }
    {
        let bd = bias.value().data().to_vec();
        let od = out.data_mut();
        for bi in 0..b {
            for (o, &bv) in od[bi * e..(bi + 1) * e].iter_mut().zip(&bd) {
                *o += bv;
            }
        }
    }

    Ok(Var::new_op(out, vec![x.clone(), w.clone(), bias.clone()], Box::new(move |ctx| {
        let x = &ctx.parents[0];
        let w = &ctx.parents[1];
        let bias = &ctx.parents[2];
        let (b, d) = (x.shape()[0], x.shape()[1]);
        let e = w.shape()[0];
        let gd = ctx.grad.data();

        let mut dx = Tensor::zeros(&[b, d]);
        let mut dw = Tensor::zeros(&[e, d]);
        let mut db = Tensor::zeros(&[e]);
        unsafe {
            // dX = dY (BxE) * W (ExD)
            matrixmultiply::dgemm(
                b, e, d,
                1.0,
                gd.as_ptr(), e as isize, 1,
                w.value().data().as_ptr(), d as isize, 1,
                0.0,
                dx.data_mut().as_mut_ptr(), d as isize, 1,
            );
            // dW = dY^T (ExB) * X (BxD)
            matrixmultiply::dgemm(
                e, b, d,
                1.0,
                gd.as_ptr(), 1, e as isize,
                x.value().data().as_ptr(), d as isize, 1,
                0.0,
                dw.data_mut().as_mut_ptr(), d as isize, 1,
            );
        }
        for bi in 0..b {
            for (dbv, &g) in db.data_mut().iter_mut().zip(&gd[bi * e..(bi + 1) * e]) {
                *dbv += g;
            }
        }
        x.accumulate(&dx);
        w.accumulate(&dw);
        bias.accumulate(&db);
    })))
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

/// Per-channel spatial mean: BxCxHxW -> BxC.
pub fn global_avg_pool(x: &Var) -> Result<Var> {
    let (b, c, h, w) = x.value().dims4("global_avg_pool")?;
    let inv = 1.0 / (h * w) as f64;
    let mut out = Tensor::zeros(&[b, c]);
    {
        let xd = x.value().data();
        let od = out.data_mut();
        for i in 0..b * c {
            od[i] = xd[i * h * w..(i + 1) * h * w].iter().sum::<f64>() * inv;
        }
    }
    Ok(Var::new_op(out, vec![x.clone()], Box::new(move |ctx| {
        let x = &ctx.parents[0];
        let (b, c, h, w) = x.value().dims4("global_avg_pool grad").unwrap();
        let inv = 1.0 / (h * w) as f64;
        let mut dx = Tensor::zeros(x.shape());
        {
            let gd = ctx.grad.data();
            let dxd = dx.data_mut();
            for i in 0..b * c {
                let g = gd[i] * inv;
                dxd[i * h * w..(i + 1) * h * w].fill(g);
            }
        }
        x.accumulate(&dx);
    })))
}

/// 2x2 average pooling with stride 2 (DenseNet transitions).
pub fn avg_pool2(x: &Var) -> Result<Var> {
    let (b, c, h, w) = x.value().dims4("avg_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!("avg_pool2 needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    {
        let xd = x.value().data();
        let od = out.data_mut();
        for i in 0..b * c {
            let src = &xd[i * h * w..];
            let dst = &mut od[i * oh * ow..(i + 1) * oh * ow];
            for o_h in 0..oh {
                for o_w in 0..ow {
                    let s = src[(2 * o_h) * w + 2 * o_w]
                        + src[(2 * o_h) * w + 2 * o_w + 1]
                        + src[(2 * o_h + 1) * w + 2 * o_w]
                        + src[(2 * o_h + 1) * w + 2 * o_w + 1];
                    dst[o_h * ow + o_w] = s * 0.25;
                }
            }
        }
    }
    Ok(Var::new_op(out, vec![x.clone()], Box::new(move |ctx| {
        let x = &ctx.parents[0];
        let (b, c, h, w) = x.value().dims4("avg_pool2 grad").unwrap();
        let (oh, ow) = (h / 2, w / 2);
        let mut dx = Tensor::zeros(x.shape());
        {
            let gd = ctx.grad.data();
            let dxd = dx.data_mut();
            for i in 0..b * c {
                let src = &gd[i * oh * ow..];
                let dst = &mut dxd[i * h * w..(i + 1) * h * w];
                for o_h in 0..oh {
                    for o_w in 0..ow {
                        let g = src[o_h * ow + o_w] * 0.25;
                        dst[(2 * o_h) * w + 2 * o_w] += g;
                        dst[(2 * o_h) * w + 2 * o_w + 1] += g;
                        dst[(2 * o_h + 1) * w + 2 * o_w] += g;
                        dst[(2 * o_h + 1) * w + 2 * o_w + 1] += g;
                    }
                }
            }
        }
        x.accumulate(&dx);
    })))
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics buffer for one batch-norm layer. Updated as a side
/// effect of train-mode forward; not a gradient-carrying parameter.
#[derive(Clone)]
pub struct BnStats {
    inner: Rc<RefCell<BnStatsInner>>,
}

struct BnStatsInner {
    mean: Tensor,
    var: Tensor,
}

impl BnStats {
    pub fn new(channels: usize) -> BnStats {
        BnStats {
            inner: Rc::new(RefCell::new(BnStatsInner {
                mean: Tensor::zeros(&[channels]),
                var: Tensor::full(&[channels], 1.0),
            })),
        }
    }

    pub fn mean(&self) -> Tensor {
        self.inner.borrow().mean.clone()
    }

    pub fn var(&self) -> Tensor {
        self.inner.borrow().var.clone()
    }

    pub fn set(&self, mean: Tensor, var: Tensor) {
        let mut s = self.inner.borrow_mut();
        s.mean = mean;
        s.var = var;
    }
}

/// Batch normalization over (B, H, W) per channel. Train mode normalizes by
/// batch statistics and updates the running buffers (momentum 0.1, unbiased
/// variance in the running estimate); eval mode uses the stored buffers.
pub fn batch_norm(x: &Var, gamma: &Var, beta: &Var, stats: &BnStats, train: bool) -> Result<Var> {
    let (b, c, h, w) = x.value().dims4("batch_norm")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("batch_norm gamma/beta", &[c], gamma.shape()));
    }
    let m = b * h * w;
    if train && m < 2 {
        return Err(Error::invalid(format!(
            "batch_norm train mode needs B*H*W >= 2, got {m} (variance undefined)"
        )));
    }

    let sp = h * w;
    let (mean, var) = if train {
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        let xd = x.value().data();
        for ci in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                s += xd[(bi * c + ci) * sp..(bi * c + ci + 1) * sp].iter().sum::<f64>();
            }
            mean[ci] = s / m as f64;
        }
        for ci in 0..c {
            let mu = mean[ci];
            let mut s = 0.0;
            for bi in 0..b {
                for &v in &xd[(bi * c + ci) * sp..(bi * c + ci + 1) * sp] {
                    let d = v - mu;
                    s += d * d;
                }
            }
            var[ci] = s / m as f64;
        }
        // running update, torch convention: unbiased variance estimate
        let unbias = m as f64 / (m as f64 - 1.0);
        let mut rmean = stats.mean();
        let mut rvar = stats.var();
        for ci in 0..c {
            let rm = rmean.data()[ci];
            let rv = rvar.data()[ci];
            rmean.data_mut()[ci] = (1.0 - BN_MOMENTUM) * rm + BN_MOMENTUM * mean[ci];
            rvar.data_mut()[ci] = (1.0 - BN_MOMENTUM) * rv + BN_MOMENTUM * var[ci] * unbias;
        }
        stats.set(rmean, rvar);
        (mean, var)
    } else {
        (stats.mean().data().to_vec(), stats.var().data().to_vec())
    };

    let istd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    {
        let xd = x.value().data();
        let gd = gamma.value().data();
        let bd = beta.value().data();
        let xh = xhat.data_mut();
        let od = out.data_mut();
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * sp;
                let (mu, is, g, be) = (mean[ci], istd[ci], gd[ci], bd[ci]);
                for j in 0..sp {
                    let xn = (xd[base + j] - mu) * is;
                    xh[base + j] = xn;
                    od[base + j] = g * xn + be;
                }
            }
        }
    }

    let saved = (xhat, istd, train);
    Ok(Var::new_op(out, vec![x.clone(), gamma.clone(), beta.clone()], Box::new(move |ctx| {
        let (xhat, istd, train) = &saved;
        let x = &ctx.parents[0];
        let gamma = &ctx.parents[1];
        let beta = &ctx.parents[2];
        let (b, c, h, w) = x.value().dims4("batch_norm grad").unwrap();
        let sp = h * w;
        let m = (b * sp) as f64;
        let gd = ctx.grad.data();
        let xh = xhat.data();
        let gv = gamma.value().data().to_vec();

        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * sp;
                let mut sg = 0.0;
                let mut sb = 0.0;
                for j in 0..sp {
                    sg += gd[base + j] * xh[base + j];
                    sb += gd[base + j];
                }
                dgamma[ci] += sg;
                dbeta[ci] += sb;
            }
        }

        let mut dx = Tensor::zeros(x.shape());
        {
            let dxd = dx.data_mut();
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * sp;
                    let gi = gv[ci] * istd[ci];
                    if *train {
                        let mg = dbeta[ci] / m;
                        let mgx = dgamma[ci] / m;
                        for j in 0..sp {
                            dxd[base + j] = gi * (gd[base + j] - mg - xh[base + j] * mgx);
                        }
                    } else {
                        for j in 0..sp {
                            dxd[base + j] = gi * gd[base + j];
                        }
                    }
                }
            }
        }
        x.accumulate(&dx);
        gamma.accumulate(&Tensor::from_vec(dgamma));
        beta.accumulate(&Tensor::from_vec(dbeta));
    })))
}

// ---------------------------------------------------------------------------
// concatenation
// ---------------------------------------------------------------------------

fn concat_dim1(paths: &[Var], rank4: bool, context: &str) -> Result<Var> {
    if paths.is_empty() {
        return Err(Error::invalid(format!("{context}: empty path list")));
    }
    let first = paths[0].shape();
    let b = first[0];
    let sp: usize = if rank4 { first[2] * first[3] } else { 1 };
    let mut widths = Vec::with_capacity(paths.len());
    for p in paths {
        let s = p.shape();
        let ok = s.len() == first.len()
            && s[0] == b
            && (!rank4 || (s[2] == first[2] && s[3] == first[3]));
        if !ok {
            return Err(Error::shape(context, first, s));
        }
        widths.push(s[1]);
    }
    let total: usize = widths.iter().sum();
    let shape: Vec<usize> = if rank4 {
        vec![b, total, first[2], first[3]]
    } else {
        vec![b, total]
    };
    let mut out = Tensor::zeros(&shape);
    {
        let od = out.data_mut();
        let mut offset = 0usize;
        for (p, &wc) in paths.iter().zip(&widths) {
            let pd = p.value().data();
            for bi in 0..b {
                let dst = (bi * total + offset) * sp;
                let src = bi * wc * sp;
                od[dst..dst + wc * sp].copy_from_slice(&pd[src..src + wc * sp]);
            }
            offset += wc;
        }
    }
    let widths_c = widths.clone();
    Ok(Var::new_op(out, paths.to_vec(), Box::new(move |ctx| {
        let total: usize = widths_c.iter().sum();
        let gd = ctx.grad.data();
        let mut offset = 0usize;
        for (p, &wc) in ctx.parents.iter().zip(&widths_c) {
            let mut g = Tensor::zeros(p.shape());
            {
                let gdst = g.data_mut();
                for bi in 0..b {
                    let src = (bi * total + offset) * sp;
                    let dst = bi * wc * sp;
                    gdst[dst..dst + wc * sp].copy_from_slice(&gd[src..src + wc * sp]);
                }
            }
            p.accumulate(&g);
            offset += wc;
        }
    })))
}

/// Concatenate BxCixHxW feature maps along channels.
pub fn concat_channels(paths: &[Var]) -> Result<Var> {
    for p in paths {
        p.value().dims4("concat_channels")?;
    }
    concat_dim1(paths, true, "concat_channels")
}

/// Concatenate BxCi feature vectors along the feature dimension.
pub fn concat_features(paths: &[Var]) -> Result<Var> {
    for p in paths {
        p.value().dims2("concat_features")?;
    }
    concat_dim1(paths, false, "concat_features")
}

// ---------------------------------------------------------------------------
// weighted merges and row normalization
// ---------------------------------------------------------------------------

/// Per-row normalization: lambda[b,i] = s[b,i] / sum_j s[b,j].
/// Gradients flow through the denominator.
pub fn normalize_rows(s: &Var) -> Result<Var> {
    let (b, n) = s.value().dims2("normalize_rows")?;
    let mut out = Tensor::zeros(&[b, n]);
    {
        let sd = s.value().data();
        let od = out.data_mut();
        for bi in 0..b {
            let row = &sd[bi * n..(bi + 1) * n];
            let total: f64 = row.iter().sum();
            for i in 0..n {
                od[bi * n + i] = row[i] / total;
            }
        }
    }
    Ok(Var::new_op(out, vec![s.clone()], Box::new(move |ctx| {
        let s = &ctx.parents[0];
        let (b, n) = (s.shape()[0], s.shape()[1]);
        let sd = s.value().data();
        let od = ctx.out.data();
        let gd = ctx.grad.data();
        let mut ds = Tensor::zeros(s.shape());
        {
            let dsd = ds.data_mut();
            for bi in 0..b {
                let total: f64 = sd[bi * n..(bi + 1) * n].iter().sum();
                let dot: f64 = (0..n).map(|i| gd[bi * n + i] * od[bi * n + i]).sum();
                for i in 0..n {
                    dsd[bi * n + i] = (gd[bi * n + i] - dot) / total;
                }
            }
        }
        s.accumulate(&ds);
    })))
}

/// out[b] = lambda[b,0] * f[b] + lambda[b,1] * x[b], per-row scalar broadcast.
pub fn weighted_merge_sum(f: &Var, x: &Var, lambda: &Var) -> Result<Var> {
    if f.shape() != x.shape() {
        return Err(Error::shape("weighted_merge_sum", f.shape(), x.shape()));
    }
    let b = f.shape()[0];
    if lambda.shape() != [b, 2] {
        return Err(Error::shape("weighted_merge_sum lambda", &[b, 2], lambda.shape()));
    }
    let per: usize = f.shape()[1..].iter().product();
    let mut out = Tensor::zeros(f.shape());
    {
        let fd = f.value().data();
        let xd = x.value().data();
        let ld = lambda.value().data();
        let od = out.data_mut();
        for bi in 0..b {
            let (l1, l2) = (ld[bi * 2], ld[bi * 2 + 1]);
            for j in 0..per {
                od[bi * per + j] = l1 * fd[bi * per + j] + l2 * xd[bi * per + j];
            }
        }
    }
    Ok(Var::new_op(out, vec![f.clone(), x.clone(), lambda.clone()], Box::new(move |ctx| {
        let f = &ctx.parents[0];
        let x = &ctx.parents[1];
        let lambda = &ctx.parents[2];
        let b = f.shape()[0];
        let per: usize = f.shape()[1..].iter().product();
        let fd = f.value().data();
        let xd = x.value().data();
        let ld = lambda.value().data();
        let gd = ctx.grad.data();

        let mut df = Tensor::zeros(f.shape());
        let mut dx = Tensor::zeros(x.shape());
        let mut dl = Tensor::zeros(lambda.shape());
        {
            let dfd = df.data_mut();
            let dxd = dx.data_mut();
            let dld = dl.data_mut();
            for bi in 0..b {
                let (l1, l2) = (ld[bi * 2], ld[bi * 2 + 1]);
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for j in 0..per {
                    let g = gd[bi * per + j];
                    dfd[bi * per + j] = l1 * g;
                    dxd[bi * per + j] = l2 * g;
                    s1 += g * fd[bi * per + j];
                    s2 += g * xd[bi * per + j];
                }
                dld[bi * 2] = s1;
                dld[bi * 2 + 1] = s2;
            }
        }
        f.accumulate(&df);
        x.accumulate(&dx);
        lambda.accumulate(&dl);
    })))
}

/// Scale each path by its per-row weight, then concatenate along channels.
pub fn weighted_merge_concat(paths: &[Var], lambda: &Var) -> Result<Var> {
    let n = paths.len();
    if n == 0 {
        return Err(Error::invalid("weighted_merge_concat: empty path list"));
    }
    let (b, _, h, w) = paths[0].value().dims4("weighted_merge_concat")?;
    if lambda.shape() != [b, n] {
        return Err(Error::shape("weighted_merge_concat lambda", &[b, n], lambda.shape()));
    }
    let mut widths = Vec::with_capacity(n);
    for p in paths {
        let (pb, pc, ph, pw) = p.value().dims4("weighted_merge_concat path")?;
        if pb != b || ph != h || pw != w {
            return Err(Error::shape("weighted_merge_concat path", paths[0].shape(), p.shape()));
        }
        widths.push(pc);
    }
    let total: usize = widths.iter().sum();
    let sp = h * w;
    let mut out = Tensor::zeros(&[b, total, h, w]);
    {
        let ld = lambda.value().data();
        let od = out.data_mut();
        let mut offset = 0usize;
        for (i, (p, &wc)) in paths.iter().zip(&widths).enumerate() {
            let pd = p.value().data();
            for bi in 0..b {
                let l = ld[bi * n + i];
                let dst = (bi * total + offset) * sp;
                let src = bi * wc * sp;
                for j in 0..wc * sp {
                    od[dst + j] = l * pd[src + j];
                }
            }
            offset += wc;
        }
    }
    let widths_c = widths.clone();
    let mut parents = paths.to_vec();
    parents.push(lambda.clone());
    Ok(Var::new_op(out, parents, Box::new(move |ctx| {
        let n = widths_c.len();
        let total: usize = widths_c.iter().sum();
        let lambda = &ctx.parents[n];
        let ld = lambda.value().data();
        let gd = ctx.grad.data();
        let mut dl = Tensor::zeros(lambda.shape());
        let mut offset = 0usize;
        for (i, &wc) in widths_c.iter().enumerate() {
            let p = &ctx.parents[i];
            let pd = p.value().data();
            let mut dp = Tensor::zeros(p.shape());
            {
                let dpd = dp.data_mut();
                let dld = dl.data_mut();
                for bi in 0..b {
                    let l = ld[bi * n + i];
                    let src = (bi * total + offset) * sp;
                    let dst = bi * wc * sp;
                    let mut s = 0.0;
                    for j in 0..wc * sp {
                        let g = gd[src + j];
                        dpd[dst + j] = l * g;
                        s += g * pd[dst + j];
                    }
                    dld[bi * n + i] = s;
                }
            }
            p.accumulate(&dp);
            offset += wc;
        }
        lambda.accumulate(&dl);
    })))
}

/// Parameter-free shortcut for stage boundaries: spatial subsampling by
/// `stride` plus zero padding of the channel dimension up to `cout`.
pub fn subsample_pad_channels(x: &Var, stride: usize, cout: usize) -> Result<Var> {
    let (b, cin, h, w) = x.value().dims4("subsample_pad_channels")?;
    if cout < cin {
        return Err(Error::invalid(format!(
            "subsample_pad_channels cannot shrink channels ({cin} -> {cout})"
        )));
    }
    let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
    let mut out = Tensor::zeros(&[b, cout, oh, ow]);
    {
        let xd = x.value().data();
        let od = out.data_mut();
        for bi in 0..b {
            for ci in 0..cin {
                for oy in 0..oh {
                    for ox in 0..ow {
                        od[((bi * cout + ci) * oh + oy) * ow + ox] =
                            xd[((bi * cin + ci) * h + oy * stride) * w + ox * stride];
                    }
                }
            }
        }
    }
    Ok(Var::new_op(out, vec![x.clone()], Box::new(move |ctx| {
        let x = &ctx.parents[0];
        let (b, cin, h, w) = x.value().dims4("subsample_pad_channels grad").unwrap();
        let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
        let gd = ctx.grad.data();
        let mut dx = Tensor::zeros(x.shape());
        {
            let dxd = dx.data_mut();
            for bi in 0..b {
                for ci in 0..cin {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dxd[((bi * cin + ci) * h + oy * stride) * w + ox * stride] +=
                                gd[((bi * cout + ci) * oh + oy) * ow + ox];
                        }
                    }
                }
            }
        }
        x.accumulate(&dx);
    })))
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

/// Mean softmax cross-entropy over the batch, stabilized by max-subtraction.
pub fn softmax_cross_entropy(logits: &Var, labels: &[usize]) -> Result<Var> {
    let (b, k) = logits.value().dims2("softmax_cross_entropy")?;
    if labels.len() != b {
        return Err(Error::invalid(format!(
            "label count {} does not match batch size {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range [0,{k})")));
    }

    let ld = logits.value().data();
    let mut probs = Tensor::zeros(&[b, k]);
    let mut loss = 0.0f64;
    {
        let pd = probs.data_mut();
        for bi in 0..b {
            let row = &ld[bi * k..(bi + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..k {
                let e = (row[i] - mx).exp();
                pd[bi * k + i] = e;
                z += e;
            }
            for i in 0..k {
                pd[bi * k + i] /= z;
            }
            loss -= row[labels[bi]] - mx - z.ln();
        }
    }
    loss /= b as f64;

    let labels = labels.to_vec();
    Ok(Var::new_op(Tensor::scalar(loss), vec![logits.clone()], Box::new(move |ctx| {
        let logits = &ctx.parents[0];
        let (b, k) = (logits.shape()[0], logits.shape()[1]);
        let g = ctx.grad.item() / b as f64;
        let mut dl = probs.clone();
        {
            let dld = dl.data_mut();
            for (bi, &lab) in labels.iter().enumerate() {
                dld[bi * k + lab] -= 1.0;
            }
            for v in dld.iter_mut() {
                *v *= g;
            }
        }
        logits.accumulate(&dl);
    })))
}

/// Count of argmax(logits) == label; tie broken toward the lower class id.
pub fn correct_count(logits: &Tensor, labels: &[usize]) -> usize {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let ld = logits.data();
    let mut correct = 0;
    for bi in 0..b {
        let row = &ld[bi * k..(bi + 1) * k];
        let mut best = 0;
        for i in 1..k {
            if row[i] > row[best] {
                best = i;
            }
        }
        if best == labels[bi] {
            correct += 1;
        }
    }
    correct
}
