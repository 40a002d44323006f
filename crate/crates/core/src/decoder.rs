//! Pyramid decoder: dense spatial pyramid pooling, the pyramid-fusion
//! mixing stage (one mamba block plus a convolutional FFN), low-level
//! detail fusion, and the segmentation head.
//!
//! DSPP pools the high-level `N x N` map to every size in an arithmetic
//! scale ladder (step `max(1, N/8)`, capped at `N-1`), projects each pooled
//! map with a 1x1 conv, upsamples back, and concatenates everything behind
//! the untouched input block. The ladder is dense on purpose: nearby scales
//! overlap, unlike the classic {1,2,3,6} pyramid (kept here only as an
//! ablation comparator).

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::mamba::{MambaBlock, MambaConfig, ScanMode};
use crate::rng::SplitRng;
use crate::scalar::Scalar;
use crate::tensor::nn::{self, RunningStats};
use crate::tensor::{ops, Tensor};

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;
pub const FFN_DROPOUT: f64 = 0.1;

/// A spatial feature with its downsampling factor relative to the input
/// image; fusion logic checks stride ordering instead of guessing from
/// dimensions.
#[derive(Debug, Clone)]
pub struct FeatureMap<T: Scalar> {
    pub map: Tensor<T>,
    pub stride: usize,
}

fn uni<T: Scalar>(rng: &mut SplitRng, n: usize, fan_in: usize) -> Vec<T> {
    let b = (1.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.uniform(-b, b)).collect()
}

/// Conv (no bias) + batch norm + ReLU, the workhorse refinement unit.
#[derive(Debug, Clone)]
pub struct ConvBnRelu<T: Scalar> {
    pub w: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: RunningStats<T>,
    pad: usize,
}

impl<T: Scalar> ConvBnRelu<T> {
    pub fn new(cin: usize, cout: usize, k: usize, rng: &mut SplitRng) -> Result<Self> {
        let fan_in = cin * k * k;
        Ok(ConvBnRelu {
            w: Tensor::param(uni(rng, cout * cin * k * k, fan_in), &[cout, cin, k, k])?,
            gamma: Tensor::param(vec![T::one(); cout], &[cout])?,
            beta: Tensor::param(vec![T::zero(); cout], &[cout])?,
            stats: RunningStats::new(cout),
            pad: k / 2,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let c = nn::conv2d(x, &self.w, None, 1, self.pad, 1)?;
        let b = nn::batch_norm(&c, &self.gamma, &self.beta, &self.stats, train, BN_MOMENTUM, BN_EPS)?;
        Ok(nn::relu(&b))
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    pub fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, Rc<RefCell<Vec<T>>>)) {
        f(format!("{prefix}.running_mean"), self.stats.mean.clone());
        f(format!("{prefix}.running_var"), self.stats.var.clone());
    }
}

/// Pooling-scale ladder: `1, 1+step, 1+2*step, ...` capped at `N-1`,
/// with `step = max(1, N/8)`.
pub fn dspp_scales(n: usize) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Config(format!("pyramid pooling needs N >= 2, got {n}")));
    }
    let step = (n / 8).max(1);
    Ok((1..n).step_by(step).collect())
}

/// Classic sparse pyramid, for the comparator configuration only.
pub fn spp_scales() -> Vec<usize> {
    vec![1, 2, 3, 6]
}

/// Multi-scale pooling block: per scale, adaptive-average-pool to `i x i`,
/// 1x1 conv (C -> C), bilinear upsample back to `N x N`; output is the raw
/// input concatenated with every branch, channel-first.
#[derive(Debug, Clone)]
pub struct Dspp<T: Scalar> {
    pub convs: Vec<(Tensor<T>, Tensor<T>)>,
    pub scales: Vec<usize>,
    pub c: usize,
    pub n: usize,
}

impl<T: Scalar> Dspp<T> {
    pub fn new(c: usize, n: usize, rng: &mut SplitRng) -> Result<Self> {
        Self::with_scales(c, n, dspp_scales(n)?, rng)
    }

    pub fn with_scales(c: usize, n: usize, scales: Vec<usize>, rng: &mut SplitRng) -> Result<Self> {
        if scales.is_empty() || scales[0] != 1 {
            return Err(Error::Config(format!("pooling scales must start at 1: {scales:?}")));
        }
        if scales.windows(2).any(|w| w[0] >= w[1]) || *scales.last().unwrap() > n - 1 {
            return Err(Error::Config(format!("scales {scales:?} not ascending within [1, {}]", n - 1)));
        }
        let convs = (0..scales.len())
            .map(|_| {
                Ok((
                    Tensor::param(uni(rng, c * c, c), &[c, c, 1, 1])?,
                    Tensor::param(vec![T::zero(); c], &[c])?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dspp { convs, scales, c, n })
    }

    pub fn out_channels(&self) -> usize {
        (self.scales.len() + 1) * self.c
    }

    /// The pooling ladder is fixed at construction, but the map side is read
    /// from the input, so one block serves rescaled inference inputs too.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let m = match x.shape() {
            [c, mh, mw] if *c == self.c && mh == mw => *mh,
            sh => {
                return Err(Error::shape(
                    "dspp",
                    format!("input {sh:?}, expected a square [{}, M, M] map", self.c),
                ))
            }
        };
        let mut branches: Vec<Tensor<T>> = Vec::with_capacity(self.scales.len() + 1);
        branches.push(x.clone());
        for (&i, (w, b)) in self.scales.iter().zip(self.convs.iter()) {
            let pooled = nn::avg_pool_to(x, i, i)?;
            let proj = nn::conv2d(&pooled, w, Some(b), 1, 0, 1)?;
            branches.push(nn::bilinear_resize(&proj, m, m)?);
        }
        let refs: Vec<&Tensor<T>> = branches.iter().collect();
        ops::concat0(&refs)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, (w, b)) in self.convs.iter().enumerate() {
            f(format!("{prefix}.conv{i}.w"), w);
            f(format!("{prefix}.conv{i}.b"), b);
        }
    }
}

/// Channel-mixing FFN on the map: ConvBNReLU reduction, 1x1 expansion to
/// 4x width, GELU, dropout, 1x1 back down, dropout.
#[derive(Debug, Clone)]
pub struct ConvFfn<T: Scalar> {
    pub reduce: ConvBnRelu<T>,
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
    pub d_dec: usize,
}

impl<T: Scalar> ConvFfn<T> {
    pub fn new(c_in: usize, d_dec: usize, rng: &mut SplitRng) -> Result<Self> {
        let hidden = 4 * d_dec;
        Ok(ConvFfn {
            reduce: ConvBnRelu::new(c_in, d_dec, 3, rng)?,
            fc1_w: Tensor::param(uni(rng, hidden * d_dec, d_dec), &[hidden, d_dec, 1, 1])?,
            fc1_b: Tensor::param(vec![T::zero(); hidden], &[hidden])?,
            fc2_w: Tensor::param(uni(rng, d_dec * hidden, hidden), &[d_dec, hidden, 1, 1])?,
            fc2_b: Tensor::param(vec![T::zero(); d_dec], &[d_dec])?,
            d_dec,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, train: bool, rng: &mut SplitRng) -> Result<Tensor<T>> {
        let r = self.reduce.forward(x, train)?;
        let h = nn::conv2d(&r, &self.fc1_w, Some(&self.fc1_b), 1, 0, 1)?;
        let h = nn::dropout(&nn::gelu(&h), FFN_DROPOUT, train, rng)?;
        let out = nn::conv2d(&h, &self.fc2_w, Some(&self.fc2_b), 1, 0, 1)?;
        nn::dropout(&out, FFN_DROPOUT, train, rng)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.reduce.visit_params(&format!("{prefix}.reduce"), f);
        f(format!("{prefix}.fc1.w"), &self.fc1_w);
        f(format!("{prefix}.fc1.b"), &self.fc1_b);
        f(format!("{prefix}.fc2.w"), &self.fc2_w);
        f(format!("{prefix}.fc2.b"), &self.fc2_b);
    }

    pub fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, Rc<RefCell<Vec<T>>>)) {
        self.reduce.visit_buffers(&format!("{prefix}.reduce"), f);
    }
}

/// Pyramid fusion: flatten the multi-scale map to a token sequence, mix it
/// with one mamba block, restore the map, and compress with the ConvFFN.
#[derive(Debug, Clone)]
pub struct Pfm<T: Scalar> {
    pub mamba: MambaBlock<T>,
    pub ffn: ConvFfn<T>,
    pub c_ms: usize,
    pub n: usize,
}

impl<T: Scalar> Pfm<T> {
    pub fn new(
        c_ms: usize,
        n: usize,
        d_dec: usize,
        state: usize,
        scan_2d: bool,
        rng: &mut SplitRng,
    ) -> Result<Self> {
        let mode = if scan_2d { ScanMode::Cross2d { n } } else { ScanMode::Seq1d };
        Ok(Pfm {
            mamba: MambaBlock::new(MambaConfig::new(c_ms, 1, state, mode), rng)?,
            ffn: ConvFfn::new(c_ms, d_dec, rng)?,
            c_ms,
            n,
        })
    }

    pub fn forward(&self, x_ms: &Tensor<T>, train: bool, rng: &mut SplitRng) -> Result<Tensor<T>> {
        let m = match x_ms.shape() {
            [c, mh, mw] if *c == self.c_ms && mh == mw => *mh,
            sh => {
                return Err(Error::shape(
                    "pfm",
                    format!("input {sh:?}, expected a square [{}, M, M] map", self.c_ms),
                ))
            }
        };
        let seq = ops::seq_from_map(x_ms)?;
        let mixed = self.mamba.forward(&seq)?;
        let map = ops::map_from_seq(&mixed, m, m)?;
        self.ffn.forward(&map, train, rng)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.mamba.visit_params(&format!("{prefix}.mamba"), f);
        self.ffn.visit_params(&format!("{prefix}.ffn"), f);
    }

    pub fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, Rc<RefCell<Vec<T>>>)) {
        self.ffn.visit_buffers(&format!("{prefix}.ffn"), f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FuseMode {
    /// Project the detail feature to the decoder width and add.
    Sum,
    /// Concatenate, letting the refinement conv do the mixing.
    Concat,
}

/// Brings the decoder feature up to the detail feature's resolution and
/// blends in the low-level map, then refines with a 3x3 ConvBNReLU.
#[derive(Debug, Clone)]
pub struct FuseLowLevel<T: Scalar> {
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    pub refine: ConvBnRelu<T>,
    pub mode: FuseMode,
    pub d_dec: usize,
}

impl<T: Scalar> FuseLowLevel<T> {
    pub fn new(c_low: usize, d_dec: usize, mode: FuseMode, rng: &mut SplitRng) -> Result<Self> {
        let refine_in = match mode {
            FuseMode::Sum => d_dec,
            FuseMode::Concat => 2 * d_dec,
        };
        Ok(FuseLowLevel {
            proj_w: Tensor::param(uni(rng, d_dec * c_low, c_low), &[d_dec, c_low, 1, 1])?,
            proj_b: Tensor::param(vec![T::zero(); d_dec], &[d_dec])?,
            refine: ConvBnRelu::new(refine_in, d_dec, 3, rng)?,
            mode,
            d_dec,
        })
    }

    pub fn forward(
        &self,
        dec: &FeatureMap<T>,
        low: &FeatureMap<T>,
        train: bool,
    ) -> Result<FeatureMap<T>> {
        if low.stride >= dec.stride {
            return Err(Error::Config(format!(
                "detail feature must sit above the decoder feature: strides {} vs {}",
                low.stride, dec.stride
            )));
        }
        let (h, w) = match low.map.shape() {
            [_, h, w] => (*h, *w),
            sh => return Err(Error::shape("fuse_low_level", format!("low {sh:?}"))),
        };
        let up = nn::bilinear_resize(&dec.map, h, w)?;
        let lowp = nn::conv2d(&low.map, &self.proj_w, Some(&self.proj_b), 1, 0, 1)?;
        let blended = match self.mode {
            FuseMode::Sum => ops::add(&up, &lowp)?,
            FuseMode::Concat => ops::concat0(&[&up, &lowp])?,
        };
        Ok(FeatureMap { map: self.refine.forward(&blended, train)?, stride: low.stride })
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.proj.w"), &self.proj_w);
        f(format!("{prefix}.proj.b"), &self.proj_b);
        self.refine.visit_params(&format!("{prefix}.refine"), f);
    }

    pub fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, Rc<RefCell<Vec<T>>>)) {
        self.refine.visit_buffers(&format!("{prefix}.refine"), f);
    }
}

/// 1x1 classifier conv plus bilinear upsample to the requested output size;
/// emits raw logits.
#[derive(Debug, Clone)]
pub struct SegHead<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub classes: usize,
}

impl<T: Scalar> SegHead<T> {
    pub fn new(d_in: usize, classes: usize, rng: &mut SplitRng) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("segmentation needs >= 2 classes, got {classes}")));
        }
        Ok(SegHead {
            w: Tensor::param(uni(rng, classes * d_in, d_in), &[classes, d_in, 1, 1])?,
            b: Tensor::param(vec![T::zero(); classes], &[classes])?,
            classes,
        })
    }

    pub fn forward(&self, f: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        let logits = nn::conv2d(f, &self.w, Some(&self.b), 1, 0, 1)?;
        nn::bilinear_resize(&logits, out_h, out_w)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }
}
