//! Miniature residual encoder.
//!
//! Stem (3x3, stride 2) then four stages of residual blocks; stages 2..4
//! halve resolution, so stage outputs sit at strides 2/4/8/16 relative to
//! the input. The decoder taps two of them: a low-level detail feature
//! (stride 4 by default) and the high-level feature (stride 16).
//!
//! Block shape: `y = relu(bn(conv3x3(relu(bn(conv3x3(x))))) + shortcut)`,
//! where the shortcut is the identity when shape allows and a strided 1x1
//! conv + norm otherwise.

use std::cell::RefCell;
use std::rc::Rc;

use crate::decoder::FeatureMap;
use crate::error::{Error, Result};
use crate::rng::SplitRng;
use crate::scalar::Scalar;
use crate::tensor::nn::{self, RunningStats};
use crate::tensor::{ops, Tensor};

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub stem_channels: usize,
    /// Four entries; first stage keeps the stem resolution, the rest stride 2.
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
    /// Index of the stage feeding the detail-fusion path (stride 4).
    pub low_stage: usize,
    /// Index of the stage feeding the decoder (stride 16).
    pub high_stage: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stem_channels: 16,
            stage_channels: [16, 32, 64, 64],
            blocks_per_stage: 1,
            low_stage: 1,
            high_stage: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config(format!(
                "stage channels must be non-decreasing: {:?}",
                self.stage_channels
            )));
        }
        if self.low_stage >= self.high_stage || self.high_stage > 3 {
            return Err(Error::Config(format!(
                "stage taps out of order: low {} high {}",
                self.low_stage, self.high_stage
            )));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be >= 1".into()));
        }
        Ok(())
    }

    pub fn stage_stride(&self, idx: usize) -> usize {
        2 << idx.min(3)
    }

    pub fn low_channels(&self) -> usize {
        self.stage_channels[self.low_stage]
    }

    pub fn high_channels(&self) -> usize {
        self.stage_channels[self.high_stage]
    }
}

struct Norm<T: Scalar> {
    gamma: Tensor<T>,
    beta: Tensor<T>,
    stats: RunningStats<T>,
}

impl<T: Scalar> Norm<T> {
    fn new(c: usize) -> Result<Self> {
        Ok(Norm {
            gamma: Tensor::param(vec![T::one(); c], &[c])?,
            beta: Tensor::param(vec![T::zero(); c], &[c])?,
            stats: RunningStats::new(c),
        })
    }

    fn forward(&self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        nn::batch_norm(x, &self.gamma, &self.beta, &self.stats, train, BN_MOMENTUM, BN_EPS)
    }
}

fn uni<T: Scalar>(rng: &mut SplitRng, n: usize, fan_in: usize) -> Vec<T> {
    let b = (1.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.uniform(-b, b)).collect()
}

fn conv_w<T: Scalar>(rng: &mut SplitRng, co: usize, ci: usize, k: usize) -> Result<Tensor<T>> {
    Tensor::param(uni(rng, co * ci * k * k, ci * k * k), &[co, ci, k, k])
}

/// Two 3x3 conv+norm pairs with a residual shortcut.
pub struct ResBlock<T: Scalar> {
    w1: Tensor<T>,
    n1: Norm<T>,
    w2: Tensor<T>,
    n2: Norm<T>,
    shortcut: Option<(Tensor<T>, Norm<T>)>,
    stride: usize,
}

impl<T: Scalar> ResBlock<T> {
    pub fn new(cin: usize, cout: usize, stride: usize, rng: &mut SplitRng) -> Result<Self> {
        let shortcut = if cin != cout || stride != 1 {
            Some((conv_w(rng, cout, cin, 1)?, Norm::new(cout)?))
        } else {
            None
        };
        Ok(ResBlock {
            w1: conv_w(rng, cout, cin, 3)?,
            n1: Norm::new(cout)?,
            w2: conv_w(rng, cout, cout, 3)?,
            n2: Norm::new(cout)?,
            shortcut,
            stride,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let h = nn::conv2d(x, &self.w1, None, self.stride, 1, 1)?;
        let h = nn::relu(&self.n1.forward(&h, train)?);
        let h = nn::conv2d(&h, &self.w2, None, 1, 1, 1)?;
        let h = self.n2.forward(&h, train)?;
        let sc = match &self.shortcut {
            Some((w, n)) => {
                let s = nn::conv2d(x, w, None, self.stride, 0, 1)?;
                n.forward(&s, train)?
            }
            None => x.clone(),
        };
        Ok(nn::relu(&ops::add(&h, &sc)?))
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.n1.gamma"), &self.n1.gamma);
        f(format!("{prefix}.n1.beta"), &self.n1.beta);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.n2.gamma"), &self.n2.gamma);
        f(format!("{prefix}.n2.beta"), &self.n2.beta);
        if let Some((w, n)) = &self.shortcut {
            f(format!("{prefix}.short.w"), w);
            f(format!("{prefix}.short.gamma"), &n.gamma);
            f(format!("{prefix}.short.beta"), &n.beta);
        }
    }

    pub fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, Rc<RefCell<Vec<T>>>)) {
        f(format!("{prefix}.n1.running_mean"), self.n1.stats.mean.clone());
        f(format!("{prefix}.n1.running_var"), self.n1.stats.var.clone());
        f(format!("{prefix}.n2.running_mean"), self.n2.stats.mean.clone());
        f(format!("{prefix}.n2.running_var"), self.n2.stats.var.clone());
        if let Some((_, n)) = &self.shortcut {
            f(format!("{prefix}.short.running_mean"), n.stats.mean.clone());
            f(format!("{prefix}.short.running_var"), n.stats.var.clone());
        }
    }

    /// Moves post-norm ReLU inputs off the kink for finite-difference work.
    pub(crate) fn nudge_norm_shifts(&self) {
        for n in [&self.n1, &self.n2].into_iter().chain(self.shortcut.iter().map(|(_, n)| n)) {
            n.beta.set_data(&vec![crate::scalar::sc(0.3); n.beta.numel()]);
        }
    }
}

pub struct Encoder<T: Scalar> {
    stem_w: Tensor<T>,
    stem_norm: Norm<T>,
    stages: Vec<Vec<ResBlock<T>>>,
    pub cfg: EncoderConfig,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(cfg: EncoderConfig, rng: &mut SplitRng) -> Result<Self> {
        cfg.validate()?;
        let stem_w = conv_w(rng, cfg.stem_channels, 3, 3)?;
        let stem_norm = Norm::new(cfg.stem_channels)?;
        let mut stages = Vec::with_capacity(4);
        let mut cin = cfg.stem_channels;
        for (i, &cout) in cfg.stage_channels.iter().enumerate() {
            let mut blocks = Vec::with_capacity(cfg.blocks_per_stage);
            for b in 0..cfg.blocks_per_stage {
                let stride = if i > 0 && b == 0 { 2 } else { 1 };
                blocks.push(ResBlock::new(cin, cout, stride, rng)?);
                cin = cout;
            }
            stages.push(blocks);
        }
        Ok(Encoder { stem_w, stem_norm, stages, cfg })
    }

    /// Runs the trunk and returns the detail and high-level taps.
    pub fn forward(&self, image: &Tensor<T>, train: bool) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
        let (h, w) = match image.shape() {
            [3, h, w] => (*h, *w),
            sh => return Err(Error::shape("encoder", format!("expected [3,H,W], got {sh:?}"))),
        };
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::shape("encoder", format!("{h}x{w} not divisible by 16")));
        }
        let mut x = nn::relu(&self.stem_norm.forward(
            &nn::conv2d(image, &self.stem_w, None, 2, 1, 1)?,
            train,
        )?);
        let mut low = None;
        for (i, stage) in self.stages.iter().enumerate() {
            for blk in stage {
                x = blk.forward(&x, train)?;
            }
            if i == self.cfg.low_stage {
                low = Some(FeatureMap { map: x.clone(), stride: self.cfg.stage_stride(i) });
            }
        }
        let high = FeatureMap { map: x, stride: self.cfg.stage_stride(3) };
        Ok((low.expect("low tap index validated"), high))
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.stem.w"), &self.stem_w);
        f(format!("{prefix}.stem.gamma"), &self.stem_norm.gamma);
        f(format!("{prefix}.stem.beta"), &self.stem_norm.beta);
        for (i, stage) in self.stages.iter().enumerate() {
            for (b, blk) in stage.iter().enumerate() {
                blk.visit_params(&format!("{prefix}.stage{i}.block{b}"), f);
            }
        }
    }

    pub fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, Rc<RefCell<Vec<T>>>)) {
        f(format!("{prefix}.stem.running_mean"), self.stem_norm.stats.mean.clone());
        f(format!("{prefix}.stem.running_var"), self.stem_norm.stats.var.clone());
        for (i, stage) in self.stages.iter().enumerate() {
            for (b, blk) in stage.iter().enumerate() {
                blk.visit_buffers(&format!("{prefix}.stage{i}.block{b}"), f);
            }
        }
    }
}
