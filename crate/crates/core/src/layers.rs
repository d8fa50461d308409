//! Layer-level operations on the tape: convolutions, dense, batch norm,
//! pooling and the softmax cross-entropy task loss.
//!
//! Activations are NCHW, conv kernels C_out x C_in x Ky x Kx, dense weights
//! C_out x C_in. Strides and padding are (y, x) pairs. All backward rules
//! are hand-derived and covered by finite-difference checks.

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

fn shape_err(op: &str, detail: String) -> Error {
    Error::ShapeMismatch { op: op.into(), detail }
}

fn dims4(op: &str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(shape_err(op, format!("expected 4-D NCHW tensor, got {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

fn dims2(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(shape_err(op, format!("expected 2-D tensor, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

fn out_extent(op: &str, extent: usize, pad: usize, k: usize, s: usize) -> Result<usize> {
    let padded = extent + 2 * pad;
    if padded >= k {
        let o = (padded - k) / s + 1;
        if o > 0 {
            return Ok(o);
        }
    }
    Err(shape_err(
        op,
        format!("non-positive output size: extent {extent}, pad {pad}, kernel {k}, stride {s}"),
    ))
}

/// Valid output range [lo, hi) such that `o*stride + k - pad` stays inside
/// `[0, extent)`.
fn valid_range(out_len: usize, stride: usize, k: usize, pad: usize, extent: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let last_in = extent as i64 - 1 + pad as i64 - k as i64;
    if last_in < 0 {
        return (0, 0);
    }
    let hi = (last_in as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Standard cross-correlation. `stride`/`padding` are (y, x).
pub fn conv2d(
    tape: &Tape,
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    let (n, ci, h, wd) = dims4("conv2d", x)?;
    let (co, ciw, kh, kw) = dims4("conv2d", w)?;
    if ci != ciw {
        return Err(shape_err(
            "conv2d",
            format!("input has {ci} channels but kernel expects {ciw}"),
        ));
    }
    if let Some(b) = bias {
        if b.numel() != co {
            return Err(shape_err("conv2d", format!("bias length {} != {co}", b.numel())));
        }
    }
    let (sy, sx) = stride;
    let (py, px) = padding;
    let oh = out_extent("conv2d", h, py, kh, sy)?;
    let ow = out_extent("conv2d", wd, px, kw, sx)?;

    let data = {
        let xv = x.data();
        let wv = w.data();
        let mut out = vec![0.0; n * co * oh * ow];
        if let Some(b) = bias {
            let bv = b.data();
            for nn in 0..n {
                for c in 0..co {
                    let plane = &mut out[(nn * co + c) * oh * ow..(nn * co + c + 1) * oh * ow];
                    plane.iter_mut().for_each(|v| *v = bv[c]);
                }
            }
        }
        for nn in 0..n {
            for c in 0..co {
                let o_base = (nn * co + c) * oh * ow;
                for cc in 0..ci {
                    let x_base = (nn * ci + cc) * h * wd;
                    let w_base = (c * ci + cc) * kh * kw;
                    for ky in 0..kh {
                        let (lo_y, hi_y) = valid_range(oh, sy, ky, py, h);
                        for kx in 0..kw {
                            let wgt = wv[w_base + ky * kw + kx];
                            if wgt == 0.0 {
                                continue;
                            }
                            let (lo_x, hi_x) = valid_range(ow, sx, kx, px, wd);
                            for oy in lo_y..hi_y {
                                let iy = oy * sy + ky - py;
                                let xrow = &xv[x_base + iy * wd..x_base + (iy + 1) * wd];
                                let orow = &mut out[o_base + oy * ow..o_base + (oy + 1) * ow];
                                for ox in lo_x..hi_x {
                                    orow[ox] += wgt * xrow[ox * sx + kx - px];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    };

    let inputs: Vec<&Tensor> = match bias {
        Some(b) => vec![x, w, b],
        None => vec![x, w],
    };
    let out = tape.output(vec![n, co, oh, ow], data, &inputs);
    let (xc, wc, bc, oc) = (x.clone(), w.clone(), bias.cloned(), out.clone());
    tape.push_rule(&out, move || {
        let g = oc.grad_snapshot();
        if let Some(b) = &bc {
            if b.requires_grad() {
                let mut db = vec![0.0; co];
                for nn in 0..n {
                    for c in 0..co {
                        let base = (nn * co + c) * oh * ow;
                        db[c] += g[base..base + oh * ow].iter().sum::<f64>();
                    }
                }
                b.accum_grad(&db);
            }
        }
        let need_dx = xc.requires_grad();
        let need_dw = wc.requires_grad();
        if !need_dx && !need_dw {
            return;
        }
        let xv = xc.data();
        let wv = wc.data();
        let mut dx = if need_dx { vec![0.0; xv.len()] } else { Vec::new() };
        let mut dw = if need_dw { vec![0.0; wv.len()] } else { Vec::new() };
        for nn in 0..n {
            for c in 0..co {
                let o_base = (nn * co + c) * oh * ow;
                for cc in 0..ci {
                    let x_base = (nn * ci + cc) * h * wd;
                    let w_base = (c * ci + cc) * kh * kw;
                    for ky in 0..kh {
                        let (lo_y, hi_y) = valid_range(oh, sy, ky, py, h);
                        for kx in 0..kw {
                            let wgt = wv[w_base + ky * kw + kx];
                            let (lo_x, hi_x) = valid_range(ow, sx, kx, px, wd);
                            let mut dw_acc = 0.0;
                            for oy in lo_y..hi_y {
                                let iy = oy * sy + ky - py;
                                let grow = &g[o_base + oy * ow..o_base + (oy + 1) * ow];
                                if need_dx {
                                    let dxrow =
                                        &mut dx[x_base + iy * wd..x_base + (iy + 1) * wd];
                                    if need_dw {
                                        let xrow =
                                            &xv[x_base + iy * wd..x_base + (iy + 1) * wd];
                                        for ox in lo_x..hi_x {
                                            let ix = ox * sx + kx - px;
                                            let gv = grow[ox];
                                            dw_acc += gv * xrow[ix];
                                            dxrow[ix] += gv * wgt;
                                        }
                                    } else {
                                        for ox in lo_x..hi_x {
                                            dxrow[ox * sx + kx - px] += grow[ox] * wgt;
                                        }
                                    }
                                } else {
                                    let xrow = &xv[x_base + iy * wd..x_base + (iy + 1) * wd];
                                    for ox in lo_x..hi_x {
                                        dw_acc += grow[ox] * xrow[ox * sx + kx - px];
                                    }
                                }
                            }
                            if need_dw {
                                dw[w_base + ky * kw + kx] += dw_acc;
                            }
                        }
                    }
                }
            }
        }
        drop(xv);
        drop(wv);
        if need_dx {
            xc.accum_grad(&dx);
        }
        if need_dw {
            wc.accum_grad(&dw);
        }
    });
    Ok(out)
}

/// Depthwise convolution: one Ky x Kx filter per channel, kernel shape
/// C x 1 x Ky x Kx.
pub fn dw_conv2d(
    tape: &Tape,
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    let (n, c, h, wd) = dims4("dw_conv2d", x)?;
    let (cw, one, kh, kw) = dims4("dw_conv2d", w)?;
    if cw != c || one != 1 {
        return Err(shape_err(
            "dw_conv2d",
            format!("kernel must be Cx1xKyxKx with C={c}, got {:?}", w.shape()),
        ));
    }
    if let Some(b) = bias {
        if b.numel() != c {
            return Err(shape_err("dw_conv2d", format!("bias length {} != {c}", b.numel())));
        }
    }
    let (sy, sx) = stride;
    let (py, px) = padding;
    let oh = out_extent("dw_conv2d", h, py, kh, sy)?;
    let ow = out_extent("dw_conv2d", wd, px, kw, sx)?;

    let data = {
        let xv = x.data();
        let wv = w.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for nn in 0..n {
            for cc in 0..c {
                let o_base = (nn * c + cc) * oh * ow;
                let x_base = (nn * c + cc) * h * wd;
                let w_base = cc * kh * kw;
                if let Some(b) = bias {
                    let bv = b.data()[cc];
                    out[o_base..o_base + oh * ow].iter_mut().for_each(|v| *v = bv);
                }
                for ky in 0..kh {
                    let (lo_y, hi_y) = valid_range(oh, sy, ky, py, h);
                    for kx in 0..kw {
                        let wgt = wv[w_base + ky * kw + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        let (lo_x, hi_x) = valid_range(ow, sx, kx, px, wd);
                        for oy in lo_y..hi_y {
                            let iy = oy * sy + ky - py;
                            let xrow = &xv[x_base + iy * wd..x_base + (iy + 1) * wd];
                            let orow = &mut out[o_base + oy * ow..o_base + (oy + 1) * ow];
                            for ox in lo_x..hi_x {
                                orow[ox] += wgt * xrow[ox * sx + kx - px];
                            }
                        }
                    }
                }
            }
        }
        out
    };

    let inputs: Vec<&Tensor> = match bias {
        Some(b) => vec![x, w, b],
        None => vec![x, w],
    };
    let out = tape.output(vec![n, c, oh, ow], data, &inputs);
    let (xc, wc, bc, oc) = (x.clone(), w.clone(), bias.cloned(), out.clone());
    tape.push_rule(&out, move || {
        let g = oc.grad_snapshot();
        if let Some(b) = &bc {
            if b.requires_grad() {
                let mut db = vec![0.0; c];
                for nn in 0..n {
                    for cc in 0..c {
                        let base = (nn * c + cc) * oh * ow;
                        db[cc] += g[base..base + oh * ow].iter().sum::<f64>();
                    }
                }
                b.accum_grad(&db);
            }
        }
        let need_dx = xc.requires_grad();
        let need_dw = wc.requires_grad();
        if !need_dx && !need_dw {
            return;
        }
        let xv = xc.data();
        let wv = wc.data();
        let mut dx = if need_dx { vec![0.0; xv.len()] } else { Vec::new() };
        let mut dw = if need_dw { vec![0.0; wv.len()] } else { Vec::new() };
        for nn in 0..n {
            for cc in 0..c {
                let o_base = (nn * c + cc) * oh * ow;
                let x_base = (nn * c + cc) * h * wd;
                let w_base = cc * kh * kw;
                for ky in 0..kh {
                    let (lo_y, hi_y) = valid_range(oh, sy, ky, py, h);
                    for kx in 0..kw {
                        let wgt = wv[w_base + ky * kw + kx];
                        let (lo_x, hi_x) = valid_range(ow, sx, kx, px, wd);
                        let mut dw_acc = 0.0;
                        for oy in lo_y..hi_y {
                            let iy = oy * sy + ky - py;
                            let grow = &g[o_base + oy * ow..o_base + (oy + 1) * ow];
                            let xrow = &xv[x_base + iy * wd..x_base + (iy + 1) * wd];
                            for ox in lo_x..hi_x {
                                let ix = ox * sx + kx - px;
                                let gv = grow[ox];
                                dw_acc += gv * xrow[ix];
                                if need_dx {
                                    dx[x_base + iy * wd + ix] += gv * wgt;
                                }
                            }
                        }
                        if need_dw {
                            dw[w_base + ky * kw + kx] += dw_acc;
                        }
                    }
                }
            }
        }
        drop(xv);
        drop(wv);
        if need_dx {
            xc.accum_grad(&dx);
        }
        if need_dw {
            wc.accum_grad(&dw);
        }
    });
    Ok(out)
}

/// Fully connected: y = x w^T + b with x N x F and w K x F.
pub fn linear(tape: &Tape, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, f) = dims2("linear", x)?;
    let (k, fw) = dims2("linear", w)?;
    if f != fw {
        return Err(shape_err("linear", format!("x has {f} features but w expects {fw}")));
    }
    if b.numel() != k {
        return Err(shape_err("linear", format!("bias length {} != {k}", b.numel())));
    }
    let data = {
        let xv = x.data();
        let wv = w.data();
        let bv = b.data();
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let xrow = &xv[i * f..(i + 1) * f];
            for j in 0..k {
                let wrow = &wv[j * f..(j + 1) * f];
                let mut acc = bv[j];
                for p in 0..f {
                    acc += xrow[p] * wrow[p];
                }
                out[i * k + j] = acc;
            }
        }
        out
    };
    let out = tape.output(vec![n, k], data, &[x, w, b]);
    let (xc, wc, bc, oc) = (x.clone(), w.clone(), b.clone(), out.clone());
    tape.push_rule(&out, move || {
        let g = oc.grad_snapshot();
        if bc.requires_grad() {
            let mut db = vec![0.0; k];
            for i in 0..n {
                for j in 0..k {
                    db[j] += g[i * k + j];
                }
            }
            bc.accum_grad(&db);
        }
        if xc.requires_grad() {
            let wv = wc.data();
            let mut dx = vec![0.0; n * f];
            for i in 0..n {
                for j in 0..k {
                    let gv = g[i * k + j];
                    if gv == 0.0 {
                        continue;
                    }
                    let wrow = &wv[j * f..(j + 1) * f];
                    let dxrow = &mut dx[i * f..(i + 1) * f];
                    for p in 0..f {
                        dxrow[p] += gv * wrow[p];
                    }
                }
            }
            xc.accum_grad(&dx);
        }
        if wc.requires_grad() {
            let xv = xc.data();
            let mut dw = vec![0.0; k * f];
            for i in 0..n {
                let xrow = &xv[i * f..(i + 1) * f];
                for j in 0..k {
                    let gv = g[i * k + j];
                    if gv == 0.0 {
                        continue;
                    }
                    let dwrow = &mut dw[j * f..(j + 1) * f];
                    for p in 0..f {
                        dwrow[p] += gv * xrow[p];
                    }
                }
            }
            wc.accum_grad(&dw);
        }
    });
    Ok(out)
}

/// How a batch-norm forward sources its statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BnMode {
    /// Batch statistics; running stats updated with the given momentum.
    Train { momentum: f64 },
    /// Running statistics, nothing updated.
    Eval,
}

pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch normalization over N, H, W.
///
/// `running_mean` / `running_var` are state, not graph inputs: they are read
/// (eval) or written (train) but never receive gradients.
pub fn batchnorm(
    tape: &Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    mode: BnMode,
) -> Result<Tensor> {
    let (n, c, h, w) = dims4("batchnorm", x)?;
    for (name, t) in [("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)] {
        if t.numel() != c {
            return Err(shape_err("batchnorm", format!("{name} length {} != {c}", t.numel())));
        }
    }
    let cnt = n * h * w;
    let plane = h * w;

    // per-channel statistics used for normalization
    let (mean, var) = match mode {
        BnMode::Train { .. } => {
            let xv = x.data();
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for cc in 0..c {
                let mut s = 0.0;
                for nn in 0..n {
                    let base = (nn * c + cc) * plane;
                    s += xv[base..base + plane].iter().sum::<f64>();
                }
                mean[cc] = s / cnt as f64;
            }
            for cc in 0..c {
                let m = mean[cc];
                let mut s = 0.0;
                for nn in 0..n {
                    let base = (nn * c + cc) * plane;
                    s += xv[base..base + plane].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
                var[cc] = s / cnt as f64;
            }
            (mean, var)
        }
        BnMode::Eval => (running_mean.to_vec(), running_var.to_vec()),
    };

    if let BnMode::Train { momentum } = mode {
        // unbiased variance goes into the running estimate
        let bessel = if cnt > 1 { cnt as f64 / (cnt - 1) as f64 } else { 1.0 };
        let mut rm = running_mean.data_mut();
        let mut rv = running_var.data_mut();
        for cc in 0..c {
            rm[cc] = (1.0 - momentum) * rm[cc] + momentum * mean[cc];
            rv[cc] = (1.0 - momentum) * rv[cc] + momentum * var[cc] * bessel;
        }
    }

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let (x_hat, data) = {
        let xv = x.data();
        let gv = gamma.data();
        let bv = beta.data();
        let mut x_hat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * plane;
                let (m, inv, ga, be) = (mean[cc], inv_std[cc], gv[cc], bv[cc]);
                for i in base..base + plane {
                    let xh = (xv[i] - m) * inv;
                    x_hat[i] = xh;
                    out[i] = ga * xh + be;
                }
            }
        }
        (x_hat, out)
    };

    let out = tape.output(vec![n, c, h, w], data, &[x, gamma, beta]);
    let (xc, gc, bc, oc) = (x.clone(), gamma.clone(), beta.clone(), out.clone());
    let batch_stats = matches!(mode, BnMode::Train { .. });
    tape.push_rule(&out, move || {
        let g = oc.grad_snapshot();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * plane;
                for i in base..base + plane {
                    dgamma[cc] += g[i] * x_hat[i];
                    dbeta[cc] += g[i];
                }
            }
        }
        if gc.requires_grad() {
            gc.accum_grad(&dgamma);
        }
        if bc.requires_grad() {
            bc.accum_grad(&dbeta);
        }
        if xc.requires_grad() {
            let gv = gc.data();
            let mut dx = vec![0.0; g.len()];
            if batch_stats {
                // d/dx flows through the batch mean and variance as well
                for nn in 0..n {
                    for cc in 0..c {
                        let base = (nn * c + cc) * plane;
                        let scale = gv[cc] * inv_std[cc] / cnt as f64;
                        for i in base..base + plane {
                            dx[i] = scale
                                * (cnt as f64 * g[i] - dbeta[cc] - x_hat[i] * dgamma[cc]);
                        }
                    }
                }
            } else {
                for nn in 0..n {
                    for cc in 0..c {
                        let base = (nn * c + cc) * plane;
                        let scale = gv[cc] * inv_std[cc];
                        for i in base..base + plane {
                            dx[i] = scale * g[i];
                        }
                    }
                }
            }
            xc.accum_grad(&dx);
        }
    });
    Ok(out)
}

fn pool_prologue(
    op: &str,
    x: &Tensor,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = dims4(op, x)?;
    let (ky, kx) = kernel;
    let (sy, sx) = stride;
    if ky == 0 || kx == 0 || sy == 0 || sx == 0 {
        return Err(shape_err(op, "kernel and stride must be positive".into()));
    }
    let oh = out_extent(op, h, 0, ky, sy)?;
    let ow = out_extent(op, w, 0, kx, sx)?;
    Ok((n, c, oh, ow, h, w))
}

pub fn maxpool(
    tape: &Tape,
    x: &Tensor,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor> {
    let (n, c, oh, ow, h, w) = pool_prologue("maxpool", x, kernel, stride)?;
    let (ky, kx) = kernel;
    let (sy, sx) = stride;
    let (data, argmax) = {
        let xv = x.data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut arg = vec![0usize; n * c * oh * ow];
        for nn in 0..n {
            for cc in 0..c {
                let x_base = (nn * c + cc) * h * w;
                let o_base = (nn * c + cc) * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for dy in 0..ky {
                            let iy = oy * sy + dy;
                            for dx in 0..kx {
                                let ix = ox * sx + dx;
                                let i = x_base + iy * w + ix;
                                if xv[i] > best {
                                    best = xv[i];
                                    best_i = i;
                                }
                            }
                        }
                        out[o_base + oy * ow + ox] = best;
                        arg[o_base + oy * ow + ox] = best_i;
                    }
                }
            }
        }
        (out, arg)
    };
    let out = tape.output(vec![n, c, oh, ow], data, &[x]);
    let (xc, oc) = (x.clone(), out.clone());
    tape.push_rule(&out, move || {
        let g = oc.grad_snapshot();
        let mut dx = vec![0.0; xc.numel()];
        for (gi, &src) in g.iter().zip(&argmax) {
            dx[src] += gi;
        }
        xc.accum_grad(&dx);
    });
    Ok(out)
}

pub fn avgpool(
    tape: &Tape,
    x: &Tensor,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor> {
    let (n, c, oh, ow, h, w) = pool_prologue("avgpool", x, kernel, stride)?;
    let (ky, kx) = kernel;
    let (sy, sx) = stride;
    let win = (ky * kx) as f64;
    let data = {
        let xv = x.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for nn in 0..n {
            for cc in 0..c {
                let x_base = (nn * c + cc) * h * w;
                let o_base = (nn * c + cc) * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for dy in 0..ky {
                            let iy = oy * sy + dy;
                            for dx in 0..kx {
                                s += xv[x_base + iy * w + ox * sx + dx];
                            }
                        }
                        out[o_base + oy * ow + ox] = s / win;
                    }
                }
            }
        }
        out
    };
    let out = tape.output(vec![n, c, oh, ow], data, &[x]);
    let (xc, oc) = (x.clone(), out.clone());
    tape.push_rule(&out, move || {
        let g = oc.grad_snapshot();
        let mut dx = vec![0.0; xc.numel()];
        for nn in 0..n {
            for cc in 0..c {
                let x_base = (nn * c + cc) * h * w;
                let o_base = (nn * c + cc) * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[o_base + oy * ow + ox] / win;
                        for dy in 0..ky {
                            let iy = oy * sy + dy;
                            for dx_ in 0..kx {
                                dx[x_base + iy * w + ox * sx + dx_] += gv;
                            }
                        }
                    }
                }
            }
        }
        xc.accum_grad(&dx);
    });
    Ok(out)
}

/// Mean over H and W, producing N x C.
pub fn global_avgpool(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = dims4("global_avgpool", x)?;
    let plane = h * w;
    let data = {
        let xv = x.data();
        let mut out = vec![0.0; n * c];
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * plane;
                out[nn * c + cc] = xv[base..base + plane].iter().sum::<f64>() / plane as f64;
            }
        }
        out
    };
    let out = tape.output(vec![n, c], data, &[x]);
    let (xc, oc) = (x.clone(), out.clone());
    tape.push_rule(&out, move || {
        let g = oc.grad_snapshot();
        let mut dx = vec![0.0; n * c * plane];
        for nn in 0..n {
            for cc in 0..c {
                let gv = g[nn * c + cc] / plane as f64;
                let base = (nn * c + cc) * plane;
                dx[base..base + plane].iter_mut().for_each(|v| *v += gv);
            }
        }
        xc.accum_grad(&dx);
    });
    Ok(out)
}

/// Mean softmax cross-entropy over the batch. Log-sum-exp stabilized.
pub fn softmax_cross_entropy(tape: &Tape, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = dims2("softmax_cross_entropy", logits)?;
    if labels.len() != n {
        return Err(shape_err(
            "softmax_cross_entropy",
            format!("{n} logit rows vs {} labels", labels.len()),
        ));
    }
    for &l in labels {
        if l >= k {
            return Err(Error::LabelOutOfRange { label: l, classes: k });
        }
    }
    let (loss, probs) = {
        let lv = logits.data();
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for i in 0..n {
            let row = &lv[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..k {
                let e = (row[j] - m).exp();
                probs[i * k + j] = e;
                z += e;
            }
            for j in 0..k {
                probs[i * k + j] /= z;
            }
            total += z.ln() - (row[labels[i]] - m);
        }
        (total / n as f64, probs)
    };
    let out = tape.output(vec![1], vec![loss], &[logits]);
    let (lc, oc) = (logits.clone(), out.clone());
    let labels = labels.to_vec();
    tape.push_rule(&out, move || {
        let g = oc.grad_snapshot()[0] / n as f64;
        let mut dl = probs.clone();
        for i in 0..n {
            dl[i * k + labels[i]] -= 1.0;
        }
        dl.iter_mut().for_each(|v| *v *= g);
        lc.accum_grad(&dl);
    });
    Ok(out)
}

/// Index of the row-wise maximum (first wins on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let s = logits.shape();
    let (n, k) = (s[0], s[1]);
    let lv = logits.data();
    (0..n)
        .map(|i| {
            let row = &lv[i * k..(i + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
