//! Full network assembly: encoder trunk, pyramid pooling, the Mamba-based
//! feature mixer, detail fusion, and the classification head.
//!
//! Every variant constructs every submodule so checkpoints and parameter
//! registries keep one layout; ablation variants simply route around the
//! disabled pieces. The head is sized for the feature it actually receives,
//! which differs per variant.

use std::cell::RefCell;
use std::rc::Rc;

use crate::decoder::{Dspp, FeatureMap, FuseLowLevel, FuseMode, Pfm, SegHead};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::rng::{Domain, SplitRng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Encoder, bilinear upsample, 1x1 head.
    Baseline,
    /// Baseline plus the dense pyramid pooling stage.
    Dspp,
    /// Pyramid pooling plus the sequence mixer, no detail fusion.
    DsppPfm,
    /// The whole decoder including low-level fusion.
    Full,
}

impl Variant {
    pub fn all() -> [Variant; 4] {
        [Variant::Baseline, Variant::Dspp, Variant::DsppPfm, Variant::Full]
    }

    pub fn label(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Dspp => "+dspp",
            Variant::DsppPfm => "+dspp+pfm",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "dspp" | "+dspp" => Ok(Variant::Dspp),
            "dspp_pfm" | "+dspp+pfm" => Ok(Variant::DsppPfm),
            "full" => Ok(Variant::Full),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub num_classes: usize,
    /// Square input edge; the pyramid grid size is input_size / 16.
    pub input_size: usize,
    pub state_size: usize,
    pub d_dec: usize,
    pub scan_2d: bool,
    pub fuse: FuseMode,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn desk(num_classes: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            num_classes,
            input_size: 64,
            state_size: 16,
            d_dec: 64,
            scan_2d: true,
            fuse: FuseMode::Sum,
            variant: Variant::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.input_size % 16 != 0 || self.input_size == 0 {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of 16",
                self.input_size
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.state_size == 0 || self.d_dec == 0 {
            return Err(Error::Config("state_size and d_dec must be positive".into()));
        }
        Ok(())
    }

    /// Side length of the high-level feature grid.
    pub fn grid(&self) -> usize {
        self.input_size / 16
    }
}

pub struct Model<T: Scalar> {
    pub encoder: Encoder<T>,
    pub dspp: Dspp<T>,
    pub pfm: Pfm<T>,
    pub fuse: FuseLowLevel<T>,
    pub head: SegHead<T>,
    pub cfg: ModelConfig,
}

impl<T: Scalar> Model<T> {
    /// Deterministic build: the same (config, seed) pair always yields
    /// bit-identical parameters.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SplitRng::new(seed).split(Domain::Init, 0, 0);
        let encoder = Encoder::new(cfg.encoder.clone(), &mut rng)?;
        let c_high = cfg.encoder.high_channels();
        let n = cfg.grid();
        let dspp = Dspp::new(c_high, n, &mut rng)?;
        let pfm = Pfm::new(dspp.out_channels(), n, cfg.d_dec, cfg.state_size, cfg.scan_2d, &mut rng)?;
        let fuse = FuseLowLevel::new(cfg.encoder.low_channels(), cfg.d_dec, cfg.fuse, &mut rng)?;
        let head_in = match cfg.variant {
            Variant::Baseline => c_high,
            Variant::Dspp => dspp.out_channels(),
            Variant::DsppPfm | Variant::Full => cfg.d_dec,
        };
        let head = SegHead::new(head_in, cfg.num_classes, &mut rng)?;
        Ok(Model { encoder, dspp, pfm, fuse, head, cfg })
    }

    /// Logits at input resolution, `[K, H, W]`.
    pub fn forward(&self, image: &Tensor<T>, train: bool, rng: &mut SplitRng) -> Result<Tensor<T>> {
        let (h, w) = match image.shape() {
            [3, h, w] => (*h, *w),
            s => return Err(Error::shape("model", format!("expected [3,H,W], got {s:?}"))),
        };
        let (low, high) = self.encoder.forward(image, train)?;
        let feat = match self.cfg.variant {
            Variant::Baseline => high.map,
            Variant::Dspp => self.dspp.forward(&high.map)?,
            Variant::DsppPfm => {
                let ms = self.dspp.forward(&high.map)?;
                self.pfm.forward(&ms, train, rng)?
            }
            Variant::Full => {
                let ms = self.dspp.forward(&high.map)?;
                let dec = FeatureMap { map: self.pfm.forward(&ms, train, rng)?, stride: high.stride };
                self.fuse.forward(&dec, &low, train)?.map
            }
        };
        self.head.forward(&feat, h, w)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.encoder.visit_params("encoder", f);
        self.dspp.visit_params("dspp", f);
        self.pfm.visit_params("pfm", f);
        self.fuse.visit_params("fuse", f);
        self.head.visit_params("head", f);
    }

    pub fn visit_buffers(&self, f: &mut dyn FnMut(String, Rc<RefCell<Vec<T>>>)) {
        self.encoder.visit_buffers("encoder", f);
        self.pfm.visit_buffers("pfm", f);
        self.fuse.visit_buffers("fuse", f);
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, t| out.push((name, t.clone())));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    pub fn zero_grad(&self) {
        self.visit_params(&mut |_, t| t.zero_grad());
    }
}
