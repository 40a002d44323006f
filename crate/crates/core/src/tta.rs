//! Test-time augmentation: average logits over flipped and rescaled copies.
//!
//! Every branch is forwarded at its transformed geometry, brought back to the
//! native resolution, un-flipped, and averaged. The singleton configuration
//! (no flip, scale 1.0) takes the same code path and stays bit-identical to a
//! plain forward because every transform short-circuits on identity.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::SplitRng;
use crate::scalar::Scalar;
use crate::tensor::{nn, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flip {
    None,
    H,
    V,
    HV,
}

impl Flip {
    /// (vertical, horizontal) axis toggles.
    fn axes(self) -> (bool, bool) {
        match self {
            Flip::None => (false, false),
            Flip::H => (false, true),
            Flip::V => (true, false),
            Flip::HV => (true, true),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TtaConfig {
    pub flips: Vec<Flip>,
    pub scales: Vec<f64>,
}

impl TtaConfig {
    /// Single branch; exactly a plain forward.
    pub fn plain() -> Self {
        TtaConfig { flips: vec![Flip::None], scales: vec![1.0] }
    }

    pub fn full() -> Self {
        TtaConfig {
            flips: vec![Flip::None, Flip::H, Flip::V, Flip::HV],
            scales: vec![0.75, 1.0, 1.25],
        }
    }

    /// Every scale must land on a 16-divisible size after rounding, or the
    /// encoder would reject the branch at forward time.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.flips.is_empty() || self.scales.is_empty() {
            return Err(Error::Config("tta needs at least one flip and one scale".into()));
        }
        for &f in &self.scales {
            if !(f > 0.0) {
                return Err(Error::Config(format!("tta scale {f} must be positive")));
            }
            for d in [h, w] {
                let r = scaled(d, f);
                if r == 0 || r % 16 != 0 {
                    return Err(Error::Config(format!(
                        "tta scale {f} turns {d} into {r}, not a positive multiple of 16"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn scaled(d: usize, f: f64) -> usize {
    (d as f64 * f).round() as usize
}

/// Flip a `[C, H, W]` tensor across the requested axes. Pure data movement,
/// no gradient graph; identity returns the same handle.
pub fn flip_chw<T: Scalar>(x: &Tensor<T>, flip: Flip) -> Result<Tensor<T>> {
    let (fv, fh) = flip.axes();
    if !fv && !fh {
        return Ok(x.clone());
    }
    let (c, h, w) = match x.shape() {
        [c, h, w] => (*c, *h, *w),
        sh => return Err(Error::shape("flip_chw", format!("expected [C,H,W], got {sh:?}"))),
    };
    let d = x.to_vec();
    let mut out = vec![T::zero(); d.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = if fv { h - 1 - y } else { y };
            for xx in 0..w {
                let sx = if fh { w - 1 - xx } else { xx };
                out[(ch * h + y) * w + xx] = d[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::from_vec(out, &[c, h, w])
}

/// Averaged logits over all (flip, scale) branches, plus the branch count
/// actually forwarded (for accounting in tests and logs).
pub fn tta_infer_counted<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    cfg: &TtaConfig,
) -> Result<(Tensor<T>, usize)> {
    let (h, w) = match image.shape() {
        [3, h, w] => (*h, *w),
        sh => return Err(Error::shape("tta", format!("expected [3,H,W], got {sh:?}"))),
    };
    cfg.validate(h, w)?;
    // Eval-mode forwards draw nothing from the stream; any rng works.
    let mut rng = SplitRng::with_stream(0, 0);
    let mut sum: Option<Vec<f64>> = None;
    let mut only: Option<Tensor<T>> = None;
    let mut branches = 0usize;
    for &flip in &cfg.flips {
        for &scale in &cfg.scales {
            let flipped = flip_chw(image, flip)?;
            let resized = nn::bilinear_resize(&flipped, scaled(h, scale), scaled(w, scale))?;
            let logits = model.forward(&resized, false, &mut rng)?;
            let native = nn::bilinear_resize(&logits, h, w)?;
            let restored = flip_chw(&native, flip)?;
            branches += 1;
            only = Some(restored.clone());
            let data = restored.to_vec();
            match &mut sum {
                None => sum = Some(data.iter().map(|v| v.to_f64c()).collect()),
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(&data) {
                        *a += v.to_f64c();
                    }
                }
            }
        }
    }
    if branches == 1 {
        return Ok((only.expect("one branch ran"), 1));
    }
    let acc = sum.expect("at least one branch ran");
    let inv = 1.0 / branches as f64;
    let k = acc.len() / (h * w);
    let mean = acc.iter().map(|&v| T::from_f64c(v * inv)).collect();
    Ok((Tensor::from_vec(mean, &[k, h, w])?, branches))
}

pub fn tta_infer<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    cfg: &TtaConfig,
) -> Result<Tensor<T>> {
    Ok(tta_infer_counted(model, image, cfg)?.0)
}
