//! Four-route 2D cross-scan: a square feature map unrolled into four
//! sequences (row-major forward/backward, column-major forward/backward),
//! each a pure index permutation of the same data. The merge inverts each
//! permutation and sums, so identity route transforms give exactly 4x.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ops, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteId {
    RowFwd,
    RowBwd,
    ColFwd,
    ColBwd,
}

pub const ROUTE_IDS: [RouteId; 4] = [RouteId::RowFwd, RouteId::RowBwd, RouteId::ColFwd, RouteId::ColBwd];

#[derive(Debug, Clone)]
pub struct ScanRoute {
    pub id: RouteId,
    /// `seq[i] = raster[perm[i]]`.
    pub perm: Rc<Vec<usize>>,
    /// `raster[j] = seq[inv[j]]`; `inv[perm[i]] == i`.
    pub inv: Rc<Vec<usize>>,
}

/// The four routes over an `n x n` raster.
pub fn routes(n: usize) -> [ScanRoute; 4] {
    let l = n * n;
    ROUTE_IDS.map(|id| {
        let perm: Vec<usize> = match id {
            RouteId::RowFwd => (0..l).collect(),
            RouteId::RowBwd => (0..l).rev().collect(),
            RouteId::ColFwd => (0..l).map(|i| (i % n) * n + i / n).collect(),
            RouteId::ColBwd => (0..l).rev().map(|i| (i % n) * n + i / n).collect(),
        };
        let mut inv = vec![0usize; l];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        ScanRoute { id, perm: Rc::new(perm), inv: Rc::new(inv) }
    })
}

/// `[C, N, N] -> 4 x [N*N, C]` sequences, one per route.
pub fn cross_scan_expand<T: Scalar>(x_map: &Tensor<T>) -> Result<[Tensor<T>; 4]> {
    let n = square_side(x_map)?;
    let seq = ops::seq_from_map(x_map)?;
    let rs = routes(n);
    Ok([
        ops::gather_rows(&seq, &rs[0].perm)?,
        ops::gather_rows(&seq, &rs[1].perm)?,
        ops::gather_rows(&seq, &rs[2].perm)?,
        ops::gather_rows(&seq, &rs[3].perm)?,
    ])
}

/// Inverse-permutes each route's output back to raster order and sums the
/// four maps. Summation is pairwise in route-id order, `(r0+r1)+(r2+r3)`,
/// so the identity-transform case is bitwise 4x.
pub fn cross_scan_merge<T: Scalar>(y_routes: &[Tensor<T>; 4], n: usize) -> Result<Tensor<T>> {
    let l = n * n;
    let c = match y_routes[0].shape() {
        [rows, c] if *rows == l => *c,
        s => return Err(Error::shape("cross_scan_merge", format!("route 0 shape {s:?} vs L={l}"))),
    };
    for (i, y) in y_routes.iter().enumerate() {
        if y.shape() != [l, c] {
            return Err(Error::shape(
                "cross_scan_merge",
                format!("route {i} shape {:?} vs [{l}, {c}]", y.shape()),
            ));
        }
    }
    let rs = routes(n);
    let back: Vec<Tensor<T>> = y_routes
        .iter()
        .zip(rs.iter())
        .map(|(y, r)| ops::gather_rows(y, &r.inv))
        .collect::<Result<_>>()?;
    let left = ops::add(&back[0], &back[1])?;
    let right = ops::add(&back[2], &back[3])?;
    ops::map_from_seq(&ops::add(&left, &right)?, n, n)
}

pub(crate) fn square_side<T: Scalar>(x: &Tensor<T>) -> Result<usize> {
    match x.shape() {
        [_, h, w] if h == w => Ok(*h),
        s => Err(Error::shape("cross_scan", format!("expected square [C,N,N], got {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutations_invert() {
        for n in [1usize, 2, 3, 5, 8] {
            for r in routes(n) {
                for i in 0..n * n {
                    assert_eq!(r.inv[r.perm[i]], i, "{:?} n={n}", r.id);
                }
            }
        }
    }

    #[test]
    fn two_by_two_route_orders() {
        // Raster [[a,b],[c,d]] with a=1, b=2, c=3, d=4.
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0], &[1, 2, 2]).unwrap();
        let seqs = cross_scan_expand(&x).unwrap();
        let flat: Vec<Vec<f64>> = seqs.iter().map(|s| s.to_vec()).collect();
        assert_eq!(flat[0], vec![1.0, 2.0, 3.0, 4.0], "row forward");
        assert_eq!(flat[1], vec![4.0, 3.0, 2.0, 1.0], "row backward");
        assert_eq!(flat[2], vec![1.0, 3.0, 2.0, 4.0], "column forward");
        assert_eq!(flat[3], vec![4.0, 2.0, 3.0, 1.0], "column backward");
    }

    #[test]
    fn expand_outputs_are_permutations() {
        let vals: Vec<f64> = (0..2 * 9).map(|v| v as f64 * 0.31).collect();
        let x = Tensor::from_vec(vals.clone(), &[2, 3, 3]).unwrap();
        for seq in cross_scan_expand(&x).unwrap() {
            let mut got = seq.to_vec();
            let mut want: Vec<f64> = vals.clone();
            got.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn n_equals_one_collapses_to_singletons() {
        let x = Tensor::from_vec(vec![0.5f64, -2.0], &[2, 1, 1]).unwrap();
        let seqs = cross_scan_expand(&x).unwrap();
        for s in &seqs {
            assert_eq!(s.shape(), &[1, 2]);
            assert_eq!(s.to_vec(), vec![0.5, -2.0]);
        }
    }

    #[test]
    fn expand_rejects_non_square() {
        let x = Tensor::<f64>::zeros(&[1, 2, 3]);
        assert!(cross_scan_expand(&x).is_err());
    }

    #[test]
    fn merge_of_identity_transforms_is_exactly_4x() {
        let vals: Vec<f64> = (0..3 * 16).map(|v| (v as f64).sin() * 0.77 + 0.1).collect();
        let x = Tensor::from_vec(vals.clone(), &[3, 4, 4]).unwrap();
        let seqs = cross_scan_expand(&x).unwrap();
        let merged = cross_scan_merge(&seqs, 4).unwrap();
        assert_eq!(merged.shape(), &[3, 4, 4]);
        for (m, v) in merged.to_vec().iter().zip(vals.iter()) {
            assert_eq!(m.to_bits(), (4.0 * v).to_bits(), "bitwise 4x");
        }
    }

    #[test]
    fn merge_with_single_live_route_recovers_input() {
        let vals: Vec<f64> = (0..9).map(|v| v as f64 - 4.0).collect();
        let x = Tensor::from_vec(vals.clone(), &[1, 3, 3]).unwrap();
        let seqs = cross_scan_expand(&x).unwrap();
        for live in 0..4 {
            let picked: [Tensor<f64>; 4] = std::array::from_fn(|r| {
                if r == live {
                    seqs[r].clone()
                } else {
                    Tensor::zeros(&[9, 1])
                }
            });
            let merged = cross_scan_merge(&picked, 3).unwrap();
            assert_eq!(merged.to_vec(), vals, "route {live} alone reconstructs the raster");
        }
    }
}
