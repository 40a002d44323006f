//! Scan throughput benchmark: sequential carry vs chunked work-efficient scan
//! on the same random recurrences, reported as CSV.
//!
//! One row per (impl, L, D, S). `wall_ns_per_token` counts a token as one
//! (step, channel) pair; the state dimension is the per-token work factor.
//! Channels are processed one at a time so the largest configuration stays in
//! a few megabytes of working set. Error columns compare full trajectories
//! against the sequential carry; the sequential rows are zero by definition.

use std::time::Instant;

use crate::rng::{Domain, SplitRng};
use crate::ssm::scan::{scan_parallel, scan_sequential, ScanElem};
use crate::ssm::DEFAULT_CHUNK;

pub const BENCH_SEQ_LENS: [usize; 4] = [256, 1024, 4096, 16384];
pub const BENCH_CHANNELS: [usize; 2] = [64, 576];
pub const BENCH_STATES: [usize; 2] = [8, 16];

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub impl_name: &'static str,
    pub l: usize,
    pub d: usize,
    pub s: usize,
    pub wall_ns_per_token: f64,
    pub max_abs_err_vs_sequential: f64,
}

impl BenchRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.2},{:.3e}",
            self.impl_name, self.l, self.d, self.s, self.wall_ns_per_token, self.max_abs_err_vs_sequential
        )
    }
}

pub fn csv_header() -> &'static str {
    "impl,L,D,S,wall_ns_per_token,max_abs_err_vs_sequential"
}

/// Coefficients in the regime realistic discretization produces: decay
/// bounded away from 1 so trajectories (and rounding differences) stay small.
fn fill_lane(elems: &mut [ScanElem<f32>], rng: &mut SplitRng) {
    for e in elems.iter_mut() {
        e.a = rng.uniform::<f64>(0.2, 0.8) as f32;
        e.b = rng.uniform::<f64>(-0.5, 0.5) as f32;
    }
}

/// Sequential and parallel rows for one configuration.
pub fn bench_config(l: usize, d: usize, s: usize, cfg_idx: u64, seed: u64) -> (BenchRow, BenchRow) {
    let lanes = s;
    let base = SplitRng::new(seed);
    let mut elems = vec![ScanElem::<f32>::identity(); l * lanes];
    let mut seq = elems.clone();
    let mut par = elems.clone();

    let (mut t_seq, mut t_par) = (0.0f64, 0.0f64);
    let mut max_err = 0.0f64;
    for ch in 0..d {
        let mut rng = base.split(Domain::Other, cfg_idx, ch as u64);
        fill_lane(&mut elems, &mut rng);
        seq.copy_from_slice(&elems);
        par.copy_from_slice(&elems);

        let t0 = Instant::now();
        scan_sequential(&mut seq, l, lanes);
        t_seq += t0.elapsed().as_nanos() as f64;

        let t1 = Instant::now();
        scan_parallel(&mut par, l, lanes, DEFAULT_CHUNK);
        t_par += t1.elapsed().as_nanos() as f64;

        for (a, b) in seq.iter().zip(&par) {
            // h from zero initial state is the b component of the prefix.
            let err = (a.b as f64 - b.b as f64).abs();
            if err > max_err {
                max_err = err;
            }
        }
    }

    let tokens = (l * d) as f64;
    (
        BenchRow {
            impl_name: "sequential",
            l,
            d,
            s,
            wall_ns_per_token: t_seq / tokens,
            max_abs_err_vs_sequential: 0.0,
        },
        BenchRow {
            impl_name: "parallel",
            l,
            d,
            s,
            wall_ns_per_token: t_par / tokens,
            max_abs_err_vs_sequential: max_err,
        },
    )
}

/// The full benchmark grid, two rows per configuration.
pub fn bench_scan(seed: u64) -> Vec<BenchRow> {
    let mut rows = Vec::new();
    let mut cfg_idx = 0u64;
    for &l in &BENCH_SEQ_LENS {
        for &d in &BENCH_CHANNELS {
            for &s in &BENCH_STATES {
                let (a, b) = bench_config(l, d, s, cfg_idx, seed);
                rows.push(a);
                rows.push(b);
                cfg_idx += 1;
            }
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_config_rows_have_the_documented_shape() {
        let (seq, par) = bench_config(256, 4, 8, 0, 7);
        assert_eq!(seq.impl_name, "sequential");
        assert_eq!(seq.max_abs_err_vs_sequential, 0.0);
        assert!(par.max_abs_err_vs_sequential < 1e-5, "err {}", par.max_abs_err_vs_sequential);
        assert!(seq.wall_ns_per_token > 0.0 && par.wall_ns_per_token > 0.0);
        let cols = csv_header().split(',').count();
        assert_eq!(seq.to_csv().split(',').count(), cols);
        assert_eq!(par.to_csv().split(',').count(), cols);
        assert!(par.to_csv().starts_with("parallel,256,4,8,"));
    }

    #[test]
    fn errors_are_seed_deterministic() {
        let (_, a) = bench_config(1024, 2, 16, 3, 11);
        let (_, b) = bench_config(1024, 2, 16, 3, 11);
        assert_eq!(a.max_abs_err_vs_sequential, b.max_abs_err_vs_sequential);
    }
}
