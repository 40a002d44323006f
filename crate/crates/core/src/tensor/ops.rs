//! Structural and arithmetic tensor ops with hand-written backwards.
//!
//! Conventions: `[L, C]` matrices are row-major (row `l` contiguous), feature
//! maps are `[C, H, W]` channel-major. Sequence<->map reshapes and the gather
//! used by cross-scan routing are index permutations, so their backwards are
//! the inverse permutations (scatter-add).

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{result_of, Tensor};

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(result_of(data, a.shape().to_vec(), &[a, b], move |g, sink| {
        sink.add(&pa, g.to_vec());
        sink.add(&pb, g.to_vec());
    }))
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x - y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(result_of(data, a.shape().to_vec(), &[a, b], move |g, sink| {
        sink.add(&pa, g.to_vec());
        sink.add(&pb, g.iter().map(|&v| -v).collect());
    }))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(result_of(data, a.shape().to_vec(), &[a, b], move |g, sink| {
        let (da, db) = (pa.data(), pb.data());
        sink.add(&pa, g.iter().zip(db.iter()).map(|(&gv, &bv)| gv * bv).collect());
        sink.add(&pb, g.iter().zip(da.iter()).map(|(&gv, &av)| gv * av).collect());
    }))
}

pub fn scale<T: Scalar>(x: &Tensor<T>, c: f64) -> Tensor<T> {
    let cc = T::from_f64c(c);
    let data = x.data().iter().map(|&v| v * cc).collect();
    let px = x.clone();
    result_of(data, x.shape().to_vec(), &[x], move |g, sink| {
        sink.add(&px, g.iter().map(|&v| v * cc).collect());
    })
}

pub fn add_scalar<T: Scalar>(x: &Tensor<T>, c: f64) -> Tensor<T> {
    let cc = T::from_f64c(c);
    let data = x.data().iter().map(|&v| v + cc).collect();
    let px = x.clone();
    result_of(data, x.shape().to_vec(), &[x], move |g, sink| {
        sink.add(&px, g.to_vec());
    })
}

/// Same row-major data under a new shape.
pub fn reshape<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if shape.iter().product::<usize>() != x.numel() {
        return Err(Error::shape(
            "reshape",
            format!("{:?} does not hold {} elements", shape, x.numel()),
        ));
    }
    let px = x.clone();
    Ok(result_of(x.to_vec(), shape.to_vec(), &[x], move |g, sink| {
        sink.add(&px, g.to_vec());
    }))
}

pub fn sum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s: T = x.data().iter().copied().sum();
    let px = x.clone();
    result_of(vec![s], vec![1], &[x], move |g, sink| {
        sink.add(&px, vec![g[0]; px.numel()]);
    })
}

pub fn mean<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.numel().max(1);
    let inv = T::from_f64c(1.0 / n as f64);
    let s: T = x.data().iter().copied().sum();
    let px = x.clone();
    result_of(vec![s * inv], vec![1], &[x], move |g, sink| {
        sink.add(&px, vec![g[0] * inv; px.numel()]);
    })
}

/// `[M, K] x [K, P] -> [M, P]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2("matmul", a)?;
    let (kb, p) = dims2("matmul", b)?;
    if k != kb {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![T::zero(); m * p];
    {
        let ad = a.data();
        let bd = b.data();
        matmul_into(&ad, &bd, &mut out, m, k, p);
    }
    let (pa, pb) = (a.clone(), b.clone());
    Ok(result_of(out, vec![m, p], &[a, b], move |g, sink| {
        let ad = pa.data();
        let bd = pb.data();
        // ga[i,k] = sum_j g[i,j] * b[k,j]  (rows of g and b are contiguous)
        let mut ga = vec![T::zero(); m * k];
        for i in 0..m {
            let grow = &g[i * p..(i + 1) * p];
            for kk in 0..k {
                let brow = &bd[kk * p..(kk + 1) * p];
                let mut acc = T::zero();
                for j in 0..p {
                    acc = acc + grow[j] * brow[j];
                }
                ga[i * k + kk] = acc;
            }
        }
        sink.add(&pa, ga);
        // gb[k,j] = sum_i a[i,k] * g[i,j]
        let mut gb = vec![T::zero(); k * p];
        for i in 0..m {
            let grow = &g[i * p..(i + 1) * p];
            for kk in 0..k {
                let aik = ad[i * k + kk];
                if aik != T::zero() {
                    let brow = &mut gb[kk * p..(kk + 1) * p];
                    for j in 0..p {
                        brow[j] = brow[j] + aik * grow[j];
                    }
                }
            }
        }
        sink.add(&pb, gb);
    }))
}

pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == T::zero() {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for j in 0..p {
                orow[j] = orow[j] + aik * brow[j];
            }
        }
    }
}

fn dims2<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize)> {
    match x.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected rank 2, got {s:?}"))),
    }
}

/// `[R, C] -> [C, R]`.
pub fn transpose2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = dims2("transpose2", x)?;
    let xd = x.data();
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = xd[i * c + j];
        }
    }
    drop(xd);
    let px = x.clone();
    Ok(result_of(out, vec![c, r], &[x], move |g, sink| {
        let mut gx = vec![T::zero(); r * c];
        for j in 0..c {
            for i in 0..r {
                gx[i * c + j] = g[j * r + i];
            }
        }
        sink.add(&px, gx);
    }))
}

/// Concatenates along dim 0; trailing dims must agree.
pub fn concat0<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::shape("concat0", "no inputs"));
    }
    let trailing = &parts[0].shape()[1..];
    let mut dim0 = 0usize;
    for p in parts {
        if p.ndim() != trailing.len() + 1 || &p.shape()[1..] != trailing {
            return Err(Error::shape(
                "concat0",
                format!("{:?} does not stack on [{:?}]", p.shape(), trailing),
            ));
        }
        dim0 += p.shape()[0];
    }
    let mut shape = vec![dim0];
    shape.extend_from_slice(trailing);
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in parts {
        data.extend_from_slice(&p.data());
    }
    let owned: Vec<Tensor<T>> = parts.iter().map(|p| (*p).clone()).collect();
    Ok(result_of(data, shape, parts, move |g, sink| {
        let mut off = 0usize;
        for p in &owned {
            let n = p.numel();
            sink.add(p, g[off..off + n].to_vec());
            off += n;
        }
    }))
}

/// Columns `[c0, c1)` of an `[L, C]` matrix.
pub fn slice_cols<T: Scalar>(x: &Tensor<T>, c0: usize, c1: usize) -> Result<Tensor<T>> {
    let (l, c) = dims2("slice_cols", x)?;
    if c0 >= c1 || c1 > c {
        return Err(Error::shape("slice_cols", format!("range {c0}..{c1} of {c} columns")));
    }
    let w = c1 - c0;
    let xd = x.data();
    let mut out = Vec::with_capacity(l * w);
    for i in 0..l {
        out.extend_from_slice(&xd[i * c + c0..i * c + c1]);
    }
    drop(xd);
    let px = x.clone();
    Ok(result_of(out, vec![l, w], &[x], move |g, sink| {
        let gx = sink.slot(&px);
        for i in 0..l {
            for j in 0..w {
                gx[i * c + c0 + j] = gx[i * c + c0 + j] + g[i * w + j];
            }
        }
    }))
}

/// Row permutation/selection: `out[i, :] = x[idx[i], :]`.
pub fn gather_rows<T: Scalar>(x: &Tensor<T>, idx: &Rc<Vec<usize>>) -> Result<Tensor<T>> {
    let (l, c) = dims2("gather_rows", x)?;
    if let Some(&bad) = idx.iter().find(|&&i| i >= l) {
        return Err(Error::domain("gather_rows", format!("index {bad} out of {l} rows")));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(idx.len() * c);
    for &src in idx.iter() {
        out.extend_from_slice(&xd[src * c..(src + 1) * c]);
    }
    drop(xd);
    let px = x.clone();
    let pidx = Rc::clone(idx);
    let rows = idx.len();
    Ok(result_of(out, vec![rows, c], &[x], move |g, sink| {
        let gx = sink.slot(&px);
        for (i, &src) in pidx.iter().enumerate() {
            let grow = &g[i * c..(i + 1) * c];
            let xrow = &mut gx[src * c..(src + 1) * c];
            for j in 0..c {
                xrow[j] = xrow[j] + grow[j];
            }
        }
    }))
}

/// `[C, H, W] -> [H*W, C]` in row-major raster order.
pub fn seq_from_map<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = match x.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape("seq_from_map", format!("expected [C,H,W], got {s:?}"))),
    };
    let l = h * w;
    let xd = x.data();
    let mut out = vec![T::zero(); l * c];
    for ch in 0..c {
        let plane = &xd[ch * l..(ch + 1) * l];
        for p in 0..l {
            out[p * c + ch] = plane[p];
        }
    }
    drop(xd);
    let px = x.clone();
    Ok(result_of(out, vec![l, c], &[x], move |g, sink| {
        let mut gx = vec![T::zero(); c * l];
        for ch in 0..c {
            let plane = &mut gx[ch * l..(ch + 1) * l];
            for p in 0..l {
                plane[p] = g[p * c + ch];
            }
        }
        sink.add(&px, gx);
    }))
}

/// `[H*W, C] -> [C, H, W]`; inverse of [`seq_from_map`].
pub fn map_from_seq<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (l, c) = dims2("map_from_seq", x)?;
    if l != h * w {
        return Err(Error::shape("map_from_seq", format!("{l} rows vs {h}x{w}")));
    }
    let xd = x.data();
    let mut out = vec![T::zero(); c * l];
    for p in 0..l {
        let row = &xd[p * c..(p + 1) * c];
        for ch in 0..c {
            out[ch * l + p] = row[ch];
        }
    }
    drop(xd);
    let px = x.clone();
    Ok(result_of(out, vec![c, h, w], &[x], move |g, sink| {
        let mut gx = vec![T::zero(); l * c];
        for ch in 0..c {
            let plane = &g[ch * l..(ch + 1) * l];
            for p in 0..l {
                gx[p * c + ch] = plane[p];
            }
        }
        sink.add(&px, gx);
    }))
}

/// Adds a length-`P` bias to every row of an `[L, P]` matrix.
pub fn add_row_bias<T: Scalar>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (l, p) = dims2("add_row_bias", x)?;
    if b.shape() != [p] {
        return Err(Error::shape("add_row_bias", format!("bias {:?} vs {p} cols", b.shape())));
    }
    let xd = x.data();
    let bd = b.data();
    let mut out = Vec::with_capacity(l * p);
    for i in 0..l {
        for j in 0..p {
            out.push(xd[i * p + j] + bd[j]);
        }
    }
    drop(xd);
    drop(bd);
    let (px, pb) = (x.clone(), b.clone());
    Ok(result_of(out, vec![l, p], &[x, b], move |g, sink| {
        sink.add(&px, g.to_vec());
        let mut gb = vec![T::zero(); p];
        for i in 0..l {
            for j in 0..p {
                gb[j] = gb[j] + g[i * p + j];
            }
        }
        sink.add(&pb, gb);
    }))
}

/// Horizontal flip of a `[C, H, W]` map. Forward-only (used for test-time
/// augmentation and data preparation, outside the autodiff graph).
pub fn flip_w<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = dims3("flip_w", x)?;
    let xd = x.data();
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let row = &xd[(ch * h + y) * w..(ch * h + y + 1) * w];
            let orow = &mut out[(ch * h + y) * w..(ch * h + y + 1) * w];
            for xx in 0..w {
                orow[xx] = row[w - 1 - xx];
            }
        }
    }
    drop(xd);
    Tensor::from_vec(out, x.shape())
}

/// Vertical flip of a `[C, H, W]` map. Forward-only.
pub fn flip_h<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = dims3("flip_h", x)?;
    let xd = x.data();
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let src = &xd[(ch * h + (h - 1 - y)) * w..(ch * h + (h - y)) * w];
            out[(ch * h + y) * w..(ch * h + y + 1) * w].copy_from_slice(src);
        }
    }
    drop(xd);
    Tensor::from_vec(out, x.shape())
}

pub(crate) fn dims3<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::shape(op, format!("expected [C,H,W], got {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn matmul_small_known_product() {
        let a = t64(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t64(&[1.0, 1.0], &[2, 1]);
        let y = matmul(&a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
        assert_eq!(y.to_vec(), vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = t64(&[0.0; 6], &[2, 3]);
        let b = t64(&[0.0; 8], &[4, 2]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matmul_backward_known_values() {
        // y = sum(A @ B); dy/dA[i,k] = sum_j B[k,j], dy/dB[k,j] = sum_i A[i,k].
        let a = Tensor::param(vec![1.0f64, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::param(vec![5.0f64, 6.0, 7.0, 8.0], &[2, 2]).unwrap();
        sum(&matmul(&a, &b).unwrap()).backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![11.0, 15.0, 11.0, 15.0]);
        assert_eq!(b.grad().unwrap(), vec![4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn transpose_round_trip() {
        let x = t64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let tt = transpose2(&transpose2(&x).unwrap()).unwrap();
        assert_eq!(tt.to_vec(), x.to_vec());
        assert_eq!(transpose2(&x).unwrap().to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let a = t64(&[1.0, 2.0], &[1, 2]);
        let b = t64(&[3.0, 4.0, 5.0, 6.0], &[2, 2]);
        let y = concat0(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn concat_backward_splits_gradient() {
        let a = Tensor::param(vec![1.0f64, 2.0], &[1, 2]).unwrap();
        let b = Tensor::param(vec![3.0f64, 4.0], &[1, 2]).unwrap();
        let y = concat0(&[&a, &b]).unwrap();
        sum(&mul(&y, &y).unwrap()).backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0, 4.0]);
        assert_eq!(b.grad().unwrap(), vec![6.0, 8.0]);
    }

    #[test]
    fn slice_cols_values_and_grad() {
        let x = Tensor::param(vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let y = slice_cols(&x, 1, 3).unwrap();
        assert_eq!(y.to_vec(), vec![2.0, 3.0, 5.0, 6.0]);
        sum(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn gather_rows_permutation_and_scatter_add() {
        let x = Tensor::param(vec![1.0f64, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let idx = Rc::new(vec![1usize, 0, 1]);
        let y = gather_rows(&x, &idx).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        sum(&y).backward().unwrap();
        // Row 1 was gathered twice, so it receives two contributions.
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 2.0, 2.0]);
        assert!(gather_rows(&x, &Rc::new(vec![2usize])).is_err());
    }

    #[test]
    fn seq_map_round_trip_is_identity() {
        let x = t64(&(0..24).map(|v| v as f64).collect::<Vec<_>>(), &[2, 3, 4]);
        let seq = seq_from_map(&x).unwrap();
        assert_eq!(seq.shape(), &[12, 2]);
        // Raster position 5 = (row 1, col 1): channel values 5 and 17.
        assert_eq!(seq.to_vec()[5 * 2], 5.0);
        assert_eq!(seq.to_vec()[5 * 2 + 1], 17.0);
        let back = map_from_seq(&seq, 3, 4).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
        assert_eq!(back.shape(), x.shape());
    }

    #[test]
    fn add_row_bias_broadcasts_and_reduces() {
        let x = Tensor::param(vec![0.0f64; 6], &[3, 2]).unwrap();
        let b = Tensor::param(vec![1.0f64, -1.0], &[2]).unwrap();
        let y = add_row_bias(&x, &b).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
        sum(&y).backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![3.0, 3.0]);
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn flips_are_involutions() {
        let x = t64(&(0..12).map(|v| v as f64).collect::<Vec<_>>(), &[1, 3, 4]);
        let fw = flip_w(&x).unwrap();
        assert_eq!(fw.to_vec()[0..4], [3.0, 2.0, 1.0, 0.0]);
        assert_eq!(flip_w(&fw).unwrap().to_vec(), x.to_vec());
        let fh = flip_h(&x).unwrap();
        assert_eq!(fh.to_vec()[0..4], [8.0, 9.0, 10.0, 11.0]);
        assert_eq!(flip_h(&fh).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn elementwise_ops_and_grads() {
        let a = Tensor::param(vec![1.0f64, -2.0], &[2]).unwrap();
        let b = Tensor::param(vec![3.0f64, 0.5], &[2]).unwrap();
        assert_eq!(add(&a, &b).unwrap().to_vec(), vec![4.0, -1.5]);
        assert_eq!(sub(&a, &b).unwrap().to_vec(), vec![-2.0, -2.5]);
        assert_eq!(mul(&a, &b).unwrap().to_vec(), vec![3.0, -1.0]);
        assert_eq!(add_scalar(&a, 1.0).to_vec(), vec![2.0, -1.0]);
        assert_eq!(mean(&b).item(), 1.75);

        sum(&sub(&a, &b).unwrap()).backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(b.grad().unwrap(), vec![-1.0, -1.0]);
    }
}
