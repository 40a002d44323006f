//! Patch cropping and training-time augmentation.
//!
//! Geometry rules that matter for label integrity: image resampling is
//! bilinear, mask resampling is always nearest-neighbor, and any padding
//! introduces reflected pixels in the image but only the ignore label in the
//! mask. Ignore therefore never turns into a class and classes never bleed
//! into padding.

use crate::data::raster::{ImageBuf, MaskBuf};
use crate::error::{Error, Result};
use crate::rng::SplitRng;

#[derive(Debug, Clone, Copy)]
pub struct AugmentationConfig {
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub scale: (f64, f64),
    pub crop: usize,
    pub mosaic_p: f64,
    pub ignore: u32,
}

impl AugmentationConfig {
    pub fn desk(crop: usize) -> Self {
        AugmentationConfig {
            hflip_p: 0.5,
            vflip_p: 0.5,
            scale: (0.75, 1.25),
            crop,
            mosaic_p: 0.25,
            ignore: 255,
        }
    }

    /// No-op configuration; useful as an eval-path sanity anchor.
    pub fn identity(crop: usize) -> Self {
        AugmentationConfig {
            hflip_p: 0.0,
            vflip_p: 0.0,
            scale: (1.0, 1.0),
            crop,
            mosaic_p: 0.0,
            ignore: 255,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop % 16 != 0 {
            return Err(Error::Config(format!(
                "crop size {} must be a positive multiple of 16",
                self.crop
            )));
        }
        if !(self.scale.0 > 0.0 && self.scale.0 <= self.scale.1) {
            return Err(Error::Config(format!("bad scale range {:?}", self.scale)));
        }
        Ok(())
    }
}

pub type Sample = (ImageBuf, MaskBuf);

/// Top-left offsets of patch windows covering a tile. The trailing window on
/// each axis snaps inward so the edge is covered without leaving bounds.
pub fn crop_patches(
    tile_h: usize,
    tile_w: usize,
    patch: usize,
    stride: usize,
) -> Result<Vec<(usize, usize)>> {
    if patch == 0 || stride == 0 {
        return Err(Error::Config("patch and stride must be positive".into()));
    }
    if patch > tile_h || patch > tile_w {
        return Err(Error::Config(format!(
            "patch {patch} exceeds tile {tile_h}x{tile_w}"
        )));
    }
    let axis = |dim: usize| {
        let mut offs = Vec::new();
        let mut o = 0;
        while o + patch <= dim {
            offs.push(o);
            o += stride;
        }
        if offs.last().map(|&last| last + patch < dim).unwrap_or(true) {
            offs.push(dim - patch);
        }
        offs
    };
    let (ys, xs) = (axis(tile_h), axis(tile_w));
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect())
}

pub fn hflip(s: &Sample) -> Sample {
    let (img, mask) = s;
    let (h, w) = (img.h, img.w);
    let mut oi = ImageBuf::new(h, w);
    let mut om = MaskBuf::new(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                oi.set(c, y, x, img.at(c, y, w - 1 - x));
            }
            om.set(y, x, mask.at(y, w - 1 - x));
        }
    }
    (oi, om)
}

pub fn vflip(s: &Sample) -> Sample {
    let (img, mask) = s;
    let (h, w) = (img.h, img.w);
    let mut oi = ImageBuf::new(h, w);
    let mut om = MaskBuf::new(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                oi.set(c, y, x, img.at(c, h - 1 - y, x));
            }
            om.set(y, x, mask.at(h - 1 - y, x));
        }
    }
    (oi, om)
}

/// Half-pixel-center bilinear resize; identical dims short-circuit to a copy.
pub fn resize_image(img: &ImageBuf, oh: usize, ow: usize) -> ImageBuf {
    if (oh, ow) == (img.h, img.w) {
        return img.clone();
    }
    let mut out = ImageBuf::new(oh, ow);
    let sy = img.h as f64 / oh as f64;
    let sx = img.w as f64 / ow as f64;
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.h - 1);
        let wy = fy - y0 as f64;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.w - 1);
            let wx = fx - x0 as f64;
            for c in 0..3 {
                let top = img.at(c, y0, x0) as f64 * (1.0 - wx) + img.at(c, y0, x1) as f64 * wx;
                let bot = img.at(c, y1, x0) as f64 * (1.0 - wx) + img.at(c, y1, x1) as f64 * wx;
                out.set(c, y, x, (top * (1.0 - wy) + bot * wy) as f32);
            }
        }
    }
    out
}

/// Nearest-neighbor resize; labels are categorical and must not blend.
pub fn resize_mask(mask: &MaskBuf, oh: usize, ow: usize) -> MaskBuf {
    if (oh, ow) == (mask.h, mask.w) {
        return mask.clone();
    }
    let mut out = MaskBuf::new(oh, ow, 0);
    let sy = mask.h as f64 / oh as f64;
    let sx = mask.w as f64 / ow as f64;
    for y in 0..oh {
        let iy = (((y as f64 + 0.5) * sy - 0.5).round().max(0.0) as usize).min(mask.h - 1);
        for x in 0..ow {
            let ix = (((x as f64 + 0.5) * sx - 0.5).round().max(0.0) as usize).min(mask.w - 1);
            out.set(y, x, mask.at(iy, ix));
        }
    }
    out
}

fn crop(s: &Sample, y0: usize, x0: usize, h: usize, w: usize) -> Sample {
    let (img, mask) = s;
    let mut oi = ImageBuf::new(h, w);
    let mut om = MaskBuf::new(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                oi.set(c, y, x, img.at(c, y0 + y, x0 + x));
            }
            om.set(y, x, mask.at(y0 + y, x0 + x));
        }
    }
    (oi, om)
}

/// Bottom/right padding: mirrored pixels for the image, ignore for the mask.
fn pad_to(s: &Sample, h: usize, w: usize, ignore: u32) -> Sample {
    let (img, mask) = s;
    if img.h >= h && img.w >= w {
        return (img.clone(), mask.clone());
    }
    let (h, w) = (h.max(img.h), w.max(img.w));
    let reflect = |i: usize, n: usize| {
        if i < n {
            i
        } else {
            let over = i - n + 1;
            n.saturating_sub(1 + over.min(n.saturating_sub(1)))
        }
    };
    let mut oi = ImageBuf::new(h, w);
    let mut om = MaskBuf::new(h, w, ignore);
    for y in 0..h {
        let sy = reflect(y, img.h);
        for x in 0..w {
            let sx = reflect(x, img.w);
            for c in 0..3 {
                oi.set(c, y, x, img.at(c, sy, sx));
            }
            if y < mask.h && x < mask.w {
                om.set(y, x, mask.at(y, x));
            }
        }
    }
    (oi, om)
}

/// Random crop to exactly (h, w), padding first if the sample is short.
fn crop_or_pad(s: &Sample, h: usize, w: usize, ignore: u32, rng: &mut SplitRng) -> Sample {
    let padded;
    let s = if s.0.h < h || s.0.w < w {
        padded = pad_to(s, h, w, ignore);
        &padded
    } else {
        s
    };
    let y0 = rng.below(s.0.h - h + 1);
    let x0 = rng.below(s.0.w - w + 1);
    crop(s, y0, x0, h, w)
}

/// Flips and uniform rescale, the per-sample half of the pipeline.
fn flip_scale(s: &Sample, cfg: &AugmentationConfig, rng: &mut SplitRng) -> Sample {
    let mut cur = s.clone();
    if rng.chance(cfg.hflip_p) {
        cur = hflip(&cur);
    }
    if rng.chance(cfg.vflip_p) {
        cur = vflip(&cur);
    }
    let f = rng.uniform::<f64>(cfg.scale.0, cfg.scale.1);
    let oh = ((cur.0.h as f64 * f).round() as usize).max(1);
    let ow = ((cur.0.w as f64 * f).round() as usize).max(1);
    (resize_image(&cur.0, oh, ow), resize_mask(&cur.1, oh, ow))
}

/// Full augmentation: either the plain flip/scale/crop chain, or a 4-sample
/// mosaic around a jittered center with a final random crop. `extra` supplies
/// the additional samples mosaic needs.
pub fn augment(
    s: &Sample,
    extra: &mut dyn FnMut() -> Sample,
    cfg: &AugmentationConfig,
    rng: &mut SplitRng,
) -> Result<Sample> {
    cfg.validate()?;
    let c = cfg.crop;
    if rng.chance(cfg.mosaic_p) {
        // Canvas 2c x 2c split into four rectangles at the jittered center.
        let cy = c / 2 + rng.below(c + 1);
        let cx = c / 2 + rng.below(c + 1);
        let mut img = ImageBuf::new(2 * c, 2 * c);
        let mut mask = MaskBuf::new(2 * c, 2 * c, cfg.ignore);
        let quads = [(0, 0, cy, cx), (0, cx, cy, 2 * c - cx), (cy, 0, 2 * c - cy, cx), (cy, cx, 2 * c - cy, 2 * c - cx)];
        for (i, &(y0, x0, qh, qw)) in quads.iter().enumerate() {
            if qh == 0 || qw == 0 {
                continue;
            }
            let src = if i == 0 { s.clone() } else { extra() };
            let piece = flip_scale(&src, cfg, rng);
            let piece = crop_or_pad(&piece, qh, qw, cfg.ignore, rng);
            for y in 0..qh {
                for x in 0..qw {
                    for ch in 0..3 {
                        img.set(ch, y0 + y, x0 + x, piece.0.at(ch, y, x));
                    }
                    mask.set(y0 + y, x0 + x, piece.1.at(y, x));
                }
            }
        }
        Ok(crop_or_pad(&(img, mask), c, c, cfg.ignore, rng))
    } else {
        let scaled = flip_scale(s, cfg, rng);
        Ok(crop_or_pad(&scaled, c, c, cfg.ignore, rng))
    }
}
