//! Neural-network ops on `[C, H, W]` maps and `[L, C]` / `[C, L]` sequences.
//!
//! Numeric contracts worth noting:
//! - pooling windows are the adaptive `[floor(r*N/o), ceil((r+1)*N/o))` kind,
//!   so `o == N` is the bitwise identity;
//! - bilinear resize uses half-pixel source coordinates with edge clamping
//!   (`align_corners=false` semantics) and is the bitwise identity when the
//!   size does not change;
//! - GELU is the exact-erf form, not the tanh approximation;
//! - dropout rescales kept values by `1/(1-p)` so eval needs no correction.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::SplitRng;
use crate::scalar::{sc, Scalar};
use crate::tensor::ops::dims3;
use crate::tensor::{result_of, Tensor};

#[inline]
fn saxpy<T: Scalar>(dst: &mut [T], src: &[T], c: T) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d = *d + c * *s;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        acc = acc + *x * *y;
    }
    acc
}

/// Half-open output range `[lo, hi)` of positions whose receptive input
/// `o*stride + k_off - pad` lands inside `[0, len)`.
fn conv_span(len: usize, out_len: usize, k_off: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k_off >= pad { 0 } else { (pad - k_off).div_ceil(stride) };
    if len + pad <= k_off {
        return (0, 0);
    }
    let hi = (((len - 1 + pad - k_off) / stride) + 1).min(out_len);
    (lo.min(hi), hi)
}

/// 2D convolution: `x [Ci,H,W]`, `w [Co,Ci/g,k,k]`, optional bias `[Co]`.
/// Kernel size 1 or 3, stride 1 or 2, zero padding.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let (ci, h, wd) = dims3("conv2d", x)?;
    let (co, cig, k) = match w.shape() {
        [co, cig, kh, kw] if kh == kw => (*co, *cig, *kh),
        s => return Err(Error::shape("conv2d", format!("weight {s:?} is not [Co,Ci/g,k,k]"))),
    };
    if !matches!(k, 1 | 3) {
        return Err(Error::shape("conv2d", format!("kernel size {k} unsupported")));
    }
    if !matches!(stride, 1 | 2) {
        return Err(Error::shape("conv2d", format!("stride {stride} unsupported")));
    }
    if pad > k / 2 {
        return Err(Error::shape("conv2d", format!("pad {pad} exceeds k/2")));
    }
    if groups == 0 || ci % groups != 0 || co % groups != 0 || cig != ci / groups {
        return Err(Error::shape(
            "conv2d",
            format!("groups {groups} incompatible with Ci={ci}, Co={co}, w Ci/g={cig}"),
        ));
    }
    if let Some(bias) = b {
        if bias.shape() != [co] {
            return Err(Error::shape("conv2d", format!("bias {:?} vs Co={co}", bias.shape())));
        }
    }
    if h + 2 * pad < k || wd + 2 * pad < k {
        return Err(Error::shape("conv2d", format!("input {h}x{wd} smaller than kernel {k}")));
    }
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;

    let mut out = vec![T::zero(); co * oh * ow];
    {
        let xd = x.data();
        let wdat = w.data();
        if let Some(bias) = b {
            let bd = bias.data();
            for c in 0..co {
                out[c * oh * ow..(c + 1) * oh * ow].fill(bd[c]);
            }
        }
        forward_conv2d(&xd, &wdat, &mut out, h, wd, co, cig, k, oh, ow, stride, pad, groups);
    }

    let px = x.clone();
    let pw = w.clone();
    let pb = b.cloned();
    let mut parents: Vec<&Tensor<T>> = vec![x, w];
    if let Some(bias) = b {
        parents.push(bias);
    }
    Ok(result_of(out, vec![co, oh, ow], &parents, move |g, sink| {
        let xd = px.data();
        let wdat = pw.data();
        let cog = co / groups;
        // d/dx: scatter the kernel back through every tap.
        let mut gx = vec![T::zero(); ci * h * wd];
        let mut gw = vec![T::zero(); co * cig * k * k];
        for gi in 0..groups {
            for col in gi * cog..(gi + 1) * cog {
                let gplane = &g[col * oh * ow..(col + 1) * oh * ow];
                for cil in 0..cig {
                    let cin = gi * cig + cil;
                    for ky in 0..k {
                        let (oy_lo, oy_hi) = conv_span(h, oh, ky, stride, pad);
                        for kx in 0..k {
                            let (ox_lo, ox_hi) = conv_span(wd, ow, kx, stride, pad);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let wv = wdat[((col * cig + cil) * k + ky) * k + kx];
                            let mut wacc = T::zero();
                            for oy in oy_lo..oy_hi {
                                let iy = oy * stride + ky - pad;
                                let grow = &gplane[oy * ow + ox_lo..oy * ow + ox_hi];
                                let ix0 = ox_lo * stride + kx - pad;
                                if stride == 1 {
                                    let xrow = &xd[(cin * h + iy) * wd + ix0..];
                                    wacc = wacc + dot(grow, &xrow[..grow.len()]);
                                    let xrow = &mut gx[(cin * h + iy) * wd + ix0..];
                                    saxpy(&mut xrow[..grow.len()], grow, wv);
                                } else {
                                    let xbase = (cin * h + iy) * wd;
                                    for (i, &gv) in grow.iter().enumerate() {
                                        let ix = ix0 + i * stride;
                                        wacc = wacc + gv * xd[xbase + ix];
                                        gx[xbase + ix] = gx[xbase + ix] + wv * gv;
                                    }
                                }
                            }
                            let wi = ((col * cig + cil) * k + ky) * k + kx;
                            gw[wi] = gw[wi] + wacc;
                        }
                    }
                }
            }
        }
        sink.add(&px, gx);
        sink.add(&pw, gw);
        if let Some(bias) = &pb {
            let mut gb = vec![T::zero(); co];
            for (c, gslot) in gb.iter_mut().enumerate() {
                *gslot = g[c * oh * ow..(c + 1) * oh * ow].iter().copied().sum();
            }
            sink.add(bias, gb);
        }
    }))
}

#[allow(clippy::too_many_arguments)]
fn forward_conv2d<T: Scalar>(
    xd: &[T],
    wdat: &[T],
    out: &mut [T],
    h: usize,
    wd: usize,
    co: usize,
    cig: usize,
    k: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    groups: usize,
) {
    let cog = co / groups;
    for gi in 0..groups {
        for col in gi * cog..(gi + 1) * cog {
            let oplane = &mut out[col * oh * ow..(col + 1) * oh * ow];
            for cil in 0..cig {
                let cin = gi * cig + cil;
                for ky in 0..k {
                    let (oy_lo, oy_hi) = conv_span(h, oh, ky, stride, pad);
                    for kx in 0..k {
                        let (ox_lo, ox_hi) = conv_span(wd, ow, kx, stride, pad);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let wv = wdat[((col * cig + cil) * k + ky) * k + kx];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let ix0 = ox_lo * stride + kx - pad;
                            let orow = &mut oplane[oy * ow + ox_lo..oy * ow + ox_hi];
                            if stride == 1 {
                                let xrow = &xd[(cin * h + iy) * wd + ix0..];
                                saxpy(orow, &xrow[..orow.len()], wv);
                            } else {
                                let xbase = (cin * h + iy) * wd;
                                for (i, o) in orow.iter_mut().enumerate() {
                                    *o = *o + wv * xd[xbase + ix0 + i * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 1D convolution over `[C, L]`. Width 1 is pointwise; width 4 is causal
/// (left pad 3, output length L). Grouping as in conv2d.
pub fn conv1d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    groups: usize,
) -> Result<Tensor<T>> {
    let (ci, l) = match x.shape() {
        [c, l] => (*c, *l),
        s => return Err(Error::shape("conv1d", format!("expected [C,L], got {s:?}"))),
    };
    let (co, cig, k) = match w.shape() {
        [co, cig, k] => (*co, *cig, *k),
        s => return Err(Error::shape("conv1d", format!("weight {s:?} is not [Co,Ci/g,k]"))),
    };
    if !matches!(k, 1 | 4) {
        return Err(Error::shape("conv1d", format!("kernel width {k} unsupported")));
    }
    if groups == 0 || ci % groups != 0 || co % groups != 0 || cig != ci / groups {
        return Err(Error::shape(
            "conv1d",
            format!("groups {groups} incompatible with Ci={ci}, Co={co}, w Ci/g={cig}"),
        ));
    }
    if let Some(bias) = b {
        if bias.shape() != [co] {
            return Err(Error::shape("conv1d", format!("bias {:?} vs Co={co}", bias.shape())));
        }
    }
    let pad = k - 1; // causal left pad; zero for width 1

    let mut out = vec![T::zero(); co * l];
    {
        let xd = x.data();
        let wdat = w.data();
        if let Some(bias) = b {
            let bd = bias.data();
            for c in 0..co {
                out[c * l..(c + 1) * l].fill(bd[c]);
            }
        }
        let cog = co / groups;
        for gi in 0..groups {
            for col in gi * cog..(gi + 1) * cog {
                for cil in 0..cig {
                    let cin = gi * cig + cil;
                    for j in 0..k {
                        // input index = t + j - pad, valid for t >= pad - j
                        let t0 = pad - j;
                        let wv = wdat[(col * cig + cil) * k + j];
                        let orow = &mut out[col * l + t0..(col + 1) * l];
                        let xrow = &xd[cin * l..cin * l + (l - t0)];
                        saxpy(orow, xrow, wv);
                    }
                }
            }
        }
    }

    let px = x.clone();
    let pw = w.clone();
    let pb = b.cloned();
    let mut parents: Vec<&Tensor<T>> = vec![x, w];
    if let Some(bias) = b {
        parents.push(bias);
    }
    Ok(result_of(out, vec![co, l], &parents, move |g, sink| {
        let xd = px.data();
        let wdat = pw.data();
        let cog = co / groups;
        let mut gx = vec![T::zero(); ci * l];
        let mut gw = vec![T::zero(); co * cig * k];
        for gi in 0..groups {
            for col in gi * cog..(gi + 1) * cog {
                let grow_full = &g[col * l..(col + 1) * l];
                for cil in 0..cig {
                    let cin = gi * cig + cil;
                    for j in 0..k {
                        let t0 = pad - j;
                        let wv = wdat[(col * cig + cil) * k + j];
                        let grow = &grow_full[t0..];
                        let xrow = &xd[cin * l..cin * l + (l - t0)];
                        let wi = (col * cig + cil) * k + j;
                        gw[wi] = gw[wi] + dot(grow, xrow);
                        let gxrow = &mut gx[cin * l..cin * l + (l - t0)];
                        saxpy(gxrow, grow, wv);
                    }
                }
            }
        }
        sink.add(&px, gx);
        sink.add(&pw, gw);
        if let Some(bias) = &pb {
            let mut gb = vec![T::zero(); co];
            for (c, gslot) in gb.iter_mut().enumerate() {
                *gslot = g[c * l..(c + 1) * l].iter().copied().sum();
            }
            sink.add(bias, gb);
        }
    }))
}

fn pool_windows(n: usize, o: usize) -> Vec<(usize, usize)> {
    (0..o).map(|r| (r * n / o, ((r + 1) * n).div_ceil(o))).collect()
}

/// Adaptive average pooling of `[C, H, W]` to `[C, oh, ow]`.
/// `oh == H && ow == W` is the identity (bitwise).
pub fn avg_pool_to<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (c, h, w) = dims3("avg_pool_to", x)?;
    if oh == 0 || ow == 0 {
        return Err(Error::shape("avg_pool_to", "target size must be positive"));
    }
    let rows = pool_windows(h, oh);
    let cols = pool_windows(w, ow);
    let xd = x.data();
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for (r, &(y0, y1)) in rows.iter().enumerate() {
            for (cc, &(x0, x1)) in cols.iter().enumerate() {
                let mut acc = T::zero();
                for y in y0..y1 {
                    acc = acc + xd[(ch * h + y) * w + x0..(ch * h + y) * w + x1]
                        .iter()
                        .copied()
                        .sum::<T>();
                }
                let cnt = ((y1 - y0) * (x1 - x0)) as f64;
                out[(ch * oh + r) * ow + cc] = acc * sc::<T>(1.0 / cnt);
            }
        }
    }
    drop(xd);
    let px = x.clone();
    let (rows_b, cols_b) = (rows.clone(), cols.clone());
    Ok(result_of(out, vec![c, oh, ow], &[x], move |g, sink| {
        let gx = sink.slot(&px);
        for ch in 0..c {
            for (r, &(y0, y1)) in rows_b.iter().enumerate() {
                for (cc, &(x0, x1)) in cols_b.iter().enumerate() {
                    let share = g[(ch * oh + r) * ow + cc]
                        * sc::<T>(1.0 / ((y1 - y0) * (x1 - x0)) as f64);
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            let i = (ch * h + y) * w + xx;
                            gx[i] = gx[i] + share;
                        }
                    }
                }
            }
        }
    }))
}

/// Per-axis source taps for half-pixel bilinear sampling with edge clamp.
fn bilinear_taps(n: usize, o: usize) -> Vec<(usize, usize, f64)> {
    let ratio = n as f64 / o as f64;
    (0..o)
        .map(|d| {
            let src = (d as f64 + 0.5) * ratio - 0.5;
            if src <= 0.0 {
                (0, 0, 0.0)
            } else if src >= (n - 1) as f64 {
                (n - 1, n - 1, 0.0)
            } else {
                let i0 = src.floor() as usize;
                (i0, i0 + 1, src - i0 as f64)
            }
        })
        .collect()
}

/// Bilinear resize of `[C, H, W]` to `[C, oh, ow]` (half-pixel centers,
/// clamped edges). Same-size resize returns the input tensor itself.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (c, h, w) = dims3("bilinear_resize", x)?;
    if oh == 0 || ow == 0 {
        return Err(Error::shape("bilinear_resize", "target size must be positive"));
    }
    if oh == h && ow == w {
        return Ok(x.clone());
    }
    let ys = Rc::new(bilinear_taps(h, oh));
    let xs = Rc::new(bilinear_taps(w, ow));
    let xd = x.data();
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = &xd[ch * h * w..(ch + 1) * h * w];
        let oplane = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            let (wy0, wy1) = (sc::<T>(1.0 - ty), sc::<T>(ty));
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let (wx0, wx1) = (sc::<T>(1.0 - tx), sc::<T>(tx));
                let top = plane[y0 * w + x0] * wx0 + plane[y0 * w + x1] * wx1;
                let bot = plane[y1 * w + x0] * wx0 + plane[y1 * w + x1] * wx1;
                oplane[oy * ow + ox] = top * wy0 + bot * wy1;
            }
        }
    }
    drop(xd);
    let px = x.clone();
    let (ys_b, xs_b) = (Rc::clone(&ys), Rc::clone(&xs));
    Ok(result_of(out, vec![c, oh, ow], &[x], move |g, sink| {
        let gx = sink.slot(&px);
        for ch in 0..c {
            let gplane = &g[ch * oh * ow..(ch + 1) * oh * ow];
            let xplane = &mut gx[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, ty)) in ys_b.iter().enumerate() {
                for (ox, &(x0, x1, tx)) in xs_b.iter().enumerate() {
                    let gv = gplane[oy * ow + ox].to_f64c();
                    xplane[y0 * w + x0] =
                        xplane[y0 * w + x0] + sc::<T>(gv * (1.0 - ty) * (1.0 - tx));
                    xplane[y0 * w + x1] = xplane[y0 * w + x1] + sc::<T>(gv * (1.0 - ty) * tx);
                    xplane[y1 * w + x0] = xplane[y1 * w + x0] + sc::<T>(gv * ty * (1.0 - tx));
                    xplane[y1 * w + x1] = xplane[y1 * w + x1] + sc::<T>(gv * ty * tx);
                }
            }
        }
    }))
}

/// Running mean/variance owned by a batch-norm layer. Shared handles so the
/// checkpoint registry can serialize them by name.
#[derive(Debug, Clone)]
pub struct RunningStats<T: Scalar> {
    pub mean: Rc<RefCell<Vec<T>>>,
    pub var: Rc<RefCell<Vec<T>>>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Rc::new(RefCell::new(vec![T::zero(); channels])),
            var: Rc::new(RefCell::new(vec![T::one(); channels])),
        }
    }
}

/// Batch normalization over `[C, ...]` with per-channel statistics.
/// Training mode normalizes by the current batch stats and folds them into
/// the running estimates (momentum 0.1 by convention); eval mode uses only
/// the running estimates. Biased variance throughout.
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &RunningStats<T>,
    train: bool,
    momentum: f64,
    eps: f64,
) -> Result<Tensor<T>> {
    let c = *x
        .shape()
        .first()
        .ok_or_else(|| Error::shape("batch_norm", "rank 0 input".to_string()))?;
    let n = x.numel() / c.max(1);
    if c == 0 || n == 0 {
        return Err(Error::shape("batch_norm", "empty input"));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batch_norm",
            format!("affine {:?}/{:?} vs C={c}", gamma.shape(), beta.shape()),
        ));
    }

    let xd = x.data();
    let (mut mu, mut var) = (vec![T::zero(); c], vec![T::zero(); c]);
    if train {
        let inv_n = sc::<T>(1.0 / n as f64);
        for ch in 0..c {
            let plane = &xd[ch * n..(ch + 1) * n];
            let m: T = plane.iter().copied().sum::<T>() * inv_n;
            let mut v = T::zero();
            for &p in plane {
                let d = p - m;
                v = v + d * d;
            }
            mu[ch] = m;
            var[ch] = v * inv_n;
        }
        let mom = sc::<T>(momentum);
        let keep = sc::<T>(1.0 - momentum);
        let mut rm = stats.mean.borrow_mut();
        let mut rv = stats.var.borrow_mut();
        for ch in 0..c {
            rm[ch] = keep * rm[ch] + mom * mu[ch];
            rv[ch] = keep * rv[ch] + mom * var[ch];
        }
    } else {
        mu.copy_from_slice(&stats.mean.borrow());
        var.copy_from_slice(&stats.var.borrow());
    }

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + sc::<T>(eps)).sqrt()).collect();
    let gd = gamma.data();
    let bd = beta.data();
    let mut out = vec![T::zero(); c * n];
    for ch in 0..c {
        let (m, is, gm, bt) = (mu[ch], inv_std[ch], gd[ch], bd[ch]);
        let plane = &xd[ch * n..(ch + 1) * n];
        let oplane = &mut out[ch * n..(ch + 1) * n];
        for (o, &p) in oplane.iter_mut().zip(plane.iter()) {
            *o = gm * (p - m) * is + bt;
        }
    }
    drop(xd);
    drop(gd);
    drop(bd);

    let (px, pg, pbeta) = (x.clone(), gamma.clone(), beta.clone());
    let shape = x.shape().to_vec();
    Ok(result_of(out, shape, &[x, gamma, beta], move |g, sink| {
        let xd = px.data();
        let gd = pg.data();
        let mut gx = vec![T::zero(); c * n];
        let mut ggamma = vec![T::zero(); c];
        let mut gbeta = vec![T::zero(); c];
        let inv_n = sc::<T>(1.0 / n as f64);
        for ch in 0..c {
            let (m, is) = (mu[ch], inv_std[ch]);
            let plane = &xd[ch * n..(ch + 1) * n];
            let gplane = &g[ch * n..(ch + 1) * n];
            let mut gsum = T::zero();
            let mut gxhat = T::zero();
            for (&gv, &p) in gplane.iter().zip(plane.iter()) {
                gsum = gsum + gv;
                gxhat = gxhat + gv * (p - m) * is;
            }
            ggamma[ch] = gxhat;
            gbeta[ch] = gsum;
            let go = &mut gx[ch * n..(ch + 1) * n];
            if train {
                let (mg, mgx) = (gsum * inv_n, gxhat * inv_n);
                let coef = gd[ch] * is;
                for ((o, &gv), &p) in go.iter_mut().zip(gplane.iter()).zip(plane.iter()) {
                    let xhat = (p - m) * is;
                    *o = coef * (gv - mg - xhat * mgx);
                }
            } else {
                let coef = gd[ch] * is;
                for (o, &gv) in go.iter_mut().zip(gplane.iter()) {
                    *o = coef * gv;
                }
            }
        }
        sink.add(&px, gx);
        sink.add(&pg, ggamma);
        sink.add(&pbeta, gbeta);
    }))
}

/// Layer normalization of `[L, C]` rows with learned per-channel affine.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (l, c) = match x.shape() {
        [l, c] => (*l, *c),
        s => return Err(Error::shape("layer_norm", format!("expected [L,C], got {s:?}"))),
    };
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("layer_norm", format!("affine shapes vs C={c}")));
    }
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let inv_c = sc::<T>(1.0 / c as f64);
    let mut out = vec![T::zero(); l * c];
    let mut mus = vec![T::zero(); l];
    let mut inv_stds = vec![T::zero(); l];
    for i in 0..l {
        let row = &xd[i * c..(i + 1) * c];
        let m: T = row.iter().copied().sum::<T>() * inv_c;
        let mut v = T::zero();
        for &p in row {
            let d = p - m;
            v = v + d * d;
        }
        let is = T::one() / (v * inv_c + sc::<T>(eps)).sqrt();
        mus[i] = m;
        inv_stds[i] = is;
        let orow = &mut out[i * c..(i + 1) * c];
        for j in 0..c {
            orow[j] = gd[j] * (row[j] - m) * is + bd[j];
        }
    }
    drop(xd);
    drop(gd);
    drop(bd);

    let (px, pg, pbeta) = (x.clone(), gamma.clone(), beta.clone());
    Ok(result_of(out, vec![l, c], &[x, gamma, beta], move |g, sink| {
        let xd = px.data();
        let gd = pg.data();
        let mut gx = vec![T::zero(); l * c];
        let mut ggamma = vec![T::zero(); c];
        let mut gbeta = vec![T::zero(); c];
        let inv_c = sc::<T>(1.0 / c as f64);
        for i in 0..l {
            let (m, is) = (mus[i], inv_stds[i]);
            let row = &xd[i * c..(i + 1) * c];
            let grow = &g[i * c..(i + 1) * c];
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for j in 0..c {
                let xhat = (row[j] - m) * is;
                let gg = gd[j] * grow[j];
                s1 = s1 + gg;
                s2 = s2 + gg * xhat;
                ggamma[j] = ggamma[j] + grow[j] * xhat;
                gbeta[j] = gbeta[j] + grow[j];
            }
            s1 = s1 * inv_c;
            s2 = s2 * inv_c;
            let gxrow = &mut gx[i * c..(i + 1) * c];
            for j in 0..c {
                let xhat = (row[j] - m) * is;
                gxrow[j] = (gd[j] * grow[j] - s1 - xhat * s2) * is;
            }
        }
        sink.add(&px, gx);
        sink.add(&pg, ggamma);
        sink.add(&pbeta, gbeta);
    }))
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
    let px = x.clone();
    result_of(data, x.shape().to_vec(), &[x], move |g, sink| {
        let xd = px.data();
        sink.add(
            &px,
            g.iter()
                .zip(xd.iter())
                .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                .collect(),
        );
    })
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v * sigmoid(v)).collect();
    let px = x.clone();
    result_of(data, x.shape().to_vec(), &[x], move |g, sink| {
        let xd = px.data();
        sink.add(
            &px,
            g.iter()
                .zip(xd.iter())
                .map(|(&gv, &v)| {
                    let s = sigmoid(v);
                    gv * s * (T::one() + v * (T::one() - s))
                })
                .collect(),
        );
    })
}

/// Exact GELU: `x * Phi(x)` with the Gaussian CDF via erf.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let half = sc::<T>(0.5);
    let inv_sqrt2 = sc::<T>(std::f64::consts::FRAC_1_SQRT_2);
    let data = x
        .data()
        .iter()
        .map(|&v| v * half * (T::one() + Scalar::erf(v * inv_sqrt2)))
        .collect();
    let px = x.clone();
    result_of(data, x.shape().to_vec(), &[x], move |g, sink| {
        let xd = px.data();
        let inv_sqrt_2pi = sc::<T>(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        sink.add(
            &px,
            g.iter()
                .zip(xd.iter())
                .map(|(&gv, &v)| {
                    let phi_cdf = half * (T::one() + Scalar::erf(v * inv_sqrt2));
                    let pdf = (-(v * v) * half).exp() * inv_sqrt_2pi;
                    gv * (phi_cdf + v * pdf)
                })
                .collect(),
        );
    })
}

#[inline]
pub(crate) fn softplus_val<T: Scalar>(v: T) -> T {
    let hi = sc::<T>(20.0);
    if v > hi {
        v
    } else if v < -hi {
        v.exp()
    } else {
        (T::one() + v.exp()).ln()
    }
}

pub fn softplus<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| softplus_val(v)).collect();
    let px = x.clone();
    result_of(data, x.shape().to_vec(), &[x], move |g, sink| {
        let xd = px.data();
        sink.add(&px, g.iter().zip(xd.iter()).map(|(&gv, &v)| gv * sigmoid(v)).collect());
    })
}

/// Inverted dropout: keeps with probability `1-p`, rescales by `1/(1-p)`.
/// Identity (the same tensor) in eval mode or at `p == 0`.
pub fn dropout<T: Scalar>(
    x: &Tensor<T>,
    p: f64,
    train: bool,
    rng: &mut SplitRng,
) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::domain("dropout", format!("p={p} outside [0,1)")));
    }
    if !train || p == 0.0 {
        return Ok(x.clone());
    }
    let keep_scale = sc::<T>(1.0 / (1.0 - p));
    let mask: Rc<Vec<T>> = Rc::new(
        (0..x.numel())
            .map(|_| if rng.uniform_f64() < p { T::zero() } else { keep_scale })
            .collect(),
    );
    let data = x.data().iter().zip(mask.iter()).map(|(&v, &m)| v * m).collect();
    let px = x.clone();
    let pm = Rc::clone(&mask);
    Ok(result_of(data, x.shape().to_vec(), &[x], move |g, sink| {
        sink.add(&px, g.iter().zip(pm.iter()).map(|(&gv, &m)| gv * m).collect());
    }))
}

/// Softmax along dim 0 of `[K, ...]`, per trailing position.
pub fn softmax_dim0<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let k = *x
        .shape()
        .first()
        .ok_or_else(|| Error::shape("softmax_dim0", "rank 0 input".to_string()))?;
    let n = x.numel() / k.max(1);
    if k == 0 || n == 0 {
        return Err(Error::shape("softmax_dim0", "empty input"));
    }
    let xd = x.data();
    let mut out = vec![T::zero(); k * n];
    for j in 0..n {
        let mut mx = xd[j];
        for ch in 1..k {
            mx = mx.max(xd[ch * n + j]);
        }
        let mut denom = T::zero();
        for ch in 0..k {
            let e = (xd[ch * n + j] - mx).exp();
            out[ch * n + j] = e;
            denom = denom + e;
        }
        let inv = T::one() / denom;
        for ch in 0..k {
            out[ch * n + j] = out[ch * n + j] * inv;
        }
    }
    drop(xd);
    let y_saved = Rc::new(out.clone());
    let px = x.clone();
    Ok(result_of(out, x.shape().to_vec(), &[x], move |g, sink| {
        let y = &y_saved;
        let mut gx = vec![T::zero(); k * n];
        for j in 0..n {
            let mut s = T::zero();
            for ch in 0..k {
                s = s + g[ch * n + j] * y[ch * n + j];
            }
            for ch in 0..k {
                gx[ch * n + j] = y[ch * n + j] * (g[ch * n + j] - s);
            }
        }
        sink.add(&px, gx);
    }))
}
