//! First-order recurrence as an associative scan.
//!
//! The step `h_t = a_t * h_{t-1} + b_t` is the composition of affine maps
//! `(a1,b1)∘(a2,b2) = (a1*a2, a2*b1 + b2)` (left element applied first), with
//! identity `(1, 0)`. Inclusive prefixes of that monoid give every `h_t` from
//! `h_0` at once: `h_t = A_t * h_0 + B_t` where `(A_t, B_t)` is the prefix.
//!
//! Two evaluators over multi-lane element buffers (`L` steps by `lanes`
//! independent recurrences, lane-minor layout):
//! - a plain left-to-right carry;
//! - a work-efficient chunked form: sequential scans within fixed-size
//!   chunks, a Blelloch up/down-sweep exclusive scan over chunk aggregates,
//!   then a prefix-combine pass. The tree shape is fixed by the chunk size,
//!   so results are run-to-run deterministic.

use crate::scalar::Scalar;

pub const DEFAULT_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanElem<T: Scalar> {
    pub a: T,
    pub b: T,
}

impl<T: Scalar> ScanElem<T> {
    #[inline]
    pub fn identity() -> Self {
        ScanElem { a: T::one(), b: T::zero() }
    }

    /// `first` applied to the state, then `second`.
    #[inline]
    pub fn compose(first: Self, second: Self) -> Self {
        ScanElem { a: first.a * second.a, b: first.b * second.a + second.b }
    }

    #[inline]
    pub fn apply(self, h0: T) -> T {
        self.a * h0 + self.b
    }
}

/// In-place inclusive scan, plain carry. `elems.len() == l * lanes`.
pub fn scan_sequential<T: Scalar>(elems: &mut [ScanElem<T>], l: usize, lanes: usize) {
    debug_assert_eq!(elems.len(), l * lanes);
    for t in 1..l {
        let (prev, cur) = elems.split_at_mut(t * lanes);
        let prev = &prev[(t - 1) * lanes..];
        for s in 0..lanes {
            cur[s] = ScanElem::compose(prev[s], cur[s]);
        }
    }
}

/// In-place inclusive scan via chunked Blelloch sweeps. Equivalent to
/// [`scan_sequential`] up to floating-point reassociation.
pub fn scan_parallel<T: Scalar>(elems: &mut [ScanElem<T>], l: usize, lanes: usize, chunk: usize) {
    debug_assert_eq!(elems.len(), l * lanes);
    let chunk = chunk.max(1);
    if l <= chunk {
        scan_sequential(elems, l, lanes);
        return;
    }
    let nc = l.div_ceil(chunk);

    // Local inclusive scans per chunk.
    for c in 0..nc {
        let t0 = c * chunk;
        let len = chunk.min(l - t0);
        scan_sequential(&mut elems[t0 * lanes..(t0 + len) * lanes], len, lanes);
    }

    // Exclusive scan of chunk aggregates (last local prefix of each chunk).
    let m = nc.next_power_of_two();
    let mut agg = vec![ScanElem::<T>::identity(); m * lanes];
    for c in 0..nc {
        let last = (c * chunk + chunk.min(l - c * chunk) - 1) * lanes;
        agg[c * lanes..(c + 1) * lanes].copy_from_slice(&elems[last..last + lanes]);
    }
    blelloch_exclusive(&mut agg, m, lanes);

    // Fold each chunk's exclusive prefix into its local scans.
    for c in 1..nc {
        let pref = agg[c * lanes..(c + 1) * lanes].to_vec();
        let t0 = c * chunk;
        let len = chunk.min(l - t0);
        for t in t0..t0 + len {
            let row = &mut elems[t * lanes..(t + 1) * lanes];
            for s in 0..lanes {
                row[s] = ScanElem::compose(pref[s], row[s]);
            }
        }
    }
}

/// Classic Blelloch exclusive scan in place; `m` must be a power of two
/// (positions past the logical end hold identities).
fn blelloch_exclusive<T: Scalar>(buf: &mut [ScanElem<T>], m: usize, lanes: usize) {
    debug_assert!(m.is_power_of_two());
    debug_assert_eq!(buf.len(), m * lanes);
    // Up-sweep: reduce pairs bottom-up.
    let mut step = 2;
    while step <= m {
        let half = step / 2;
        let mut i = step - 1;
        while i < m {
            for s in 0..lanes {
                buf[i * lanes + s] =
                    ScanElem::compose(buf[(i - half) * lanes + s], buf[i * lanes + s]);
            }
            i += step;
        }
        step *= 2;
    }
    // Down-sweep: root becomes identity, push prefixes down.
    for s in 0..lanes {
        buf[(m - 1) * lanes + s] = ScanElem::identity();
    }
    let mut step = m;
    while step >= 2 {
        let half = step / 2;
        let mut i = step - 1;
        while i < m {
            for s in 0..lanes {
                let left_sum = buf[(i - half) * lanes + s];
                let prefix = buf[i * lanes + s];
                buf[(i - half) * lanes + s] = prefix;
                // Non-commutative: the incoming prefix precedes the left
                // subtree in sequence order, so it composes first.
                buf[i * lanes + s] = ScanElem::compose(prefix, left_sum);
            }
            i += step;
        }
        step = half;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitRng;

    fn random_elems(rng: &mut SplitRng, n: usize) -> Vec<ScanElem<f64>> {
        (0..n)
            .map(|_| ScanElem { a: rng.uniform(-1.0, 1.0), b: rng.uniform::<f64>(-2.0, 2.0) })
            .collect()
    }

    #[test]
    fn composition_is_associative() {
        let mut rng = SplitRng::new(4);
        for _ in 0..500 {
            let e: Vec<ScanElem<f64>> = random_elems(&mut rng, 3);
            let left = ScanElem::compose(ScanElem::compose(e[0], e[1]), e[2]);
            let right = ScanElem::compose(e[0], ScanElem::compose(e[1], e[2]));
            assert!((left.a - right.a).abs() < 1e-6);
            assert!((left.b - right.b).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_is_neutral() {
        let e = ScanElem { a: 0.3f64, b: -1.7 };
        let id = ScanElem::identity();
        assert_eq!(ScanElem::compose(id, e), e);
        assert_eq!(ScanElem::compose(e, id), e);
    }

    #[test]
    fn sequential_prefixes_replay_the_recurrence() {
        let mut rng = SplitRng::new(5);
        let l = 17;
        let mut elems = random_elems(&mut rng, l);
        let orig = elems.clone();
        scan_sequential(&mut elems, l, 1);
        let h0 = 0.8;
        let mut h = h0;
        for t in 0..l {
            h = orig[t].a * h + orig[t].b;
            assert!((elems[t].apply(h0) - h).abs() < 1e-12, "prefix {t} disagrees");
        }
    }

    #[test]
    fn parallel_matches_sequential_at_awkward_lengths() {
        let mut rng = SplitRng::new(6);
        for &l in &[1usize, 2, 3, 7, 63, 64, 65, 100, 129, 1000] {
            for &lanes in &[1usize, 3] {
                let mut seq = random_elems(&mut rng, l * lanes);
                let mut par = seq.clone();
                scan_sequential(&mut seq, l, lanes);
                scan_parallel(&mut par, l, lanes, 16);
                for (i, (a, b)) in seq.iter().zip(par.iter()).enumerate() {
                    assert!(
                        (a.a - b.a).abs() < 1e-10 && (a.b - b.b).abs() < 1e-10,
                        "L={l} lanes={lanes} elem {i}: {a:?} vs {b:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn chunk_size_does_not_change_results_beyond_tolerance() {
        let mut rng = SplitRng::new(7);
        let l = 300;
        let base = random_elems(&mut rng, l);
        let mut reference = base.clone();
        scan_sequential(&mut reference, l, 1);
        for &chunk in &[1usize, 2, 5, 64, 512] {
            let mut v = base.clone();
            scan_parallel(&mut v, l, 1, chunk);
            for (a, b) in reference.iter().zip(v.iter()) {
                assert!((a.a - b.a).abs() < 1e-10 && (a.b - b.b).abs() < 1e-10);
            }
        }
    }
}
