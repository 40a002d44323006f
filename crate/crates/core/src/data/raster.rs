//! Binary PPM (P6) images and PGM (P5) masks.
//!
//! The two netpbm formats cover everything the pipeline needs with a loader
//! small enough to audit byte-by-byte. Writers emit one canonical header
//! (`P6\n<w> <h>\n255\n`), so load-save round trips are byte-identical on
//! canonical files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Float image in [0,1], channel-major `[3, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub h: usize,
    pub w: usize,
    pub px: Vec<f32>,
}

/// Integer label map, row-major `[H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskBuf {
    pub h: usize,
    pub w: usize,
    pub px: Vec<u32>,
}

impl ImageBuf {
    pub fn new(h: usize, w: usize) -> Self {
        ImageBuf { h, w, px: vec![0.0; 3 * h * w] }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.px[c * self.h * self.w + y * self.w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.px[c * self.h * self.w + y * self.w + x] = v;
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            self.px.iter().map(|&v| T::from_f64c(v as f64)).collect(),
            &[3, self.h, self.w],
        )
        .expect("buffer shape is consistent")
    }
}

impl MaskBuf {
    pub fn new(h: usize, w: usize, fill: u32) -> Self {
        MaskBuf { h, w, px: vec![fill; h * w] }
    }

    pub fn at(&self, y: usize, x: usize) -> u32 {
        self.px[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u32) {
        self.px[y * self.w + x] = v;
    }
}

/// Netpbm header: magic, two dims, maxval, single whitespace after maxval.
/// `#` comments are legal anywhere in the whitespace.
fn parse_header<'a>(bytes: &'a [u8], magic: &str, path: &Path) -> Result<(usize, usize, &'a [u8])> {
    let bad = |why: &str| Error::Data(format!("{}: {why}", path.display()));
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(bad(&format!("not a {magic} file")));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Skip whitespace and comment lines.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if pos == start {
            return Err(bad("expected a decimal field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| bad("header field overflow"))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(bad(&format!("unsupported maxval {maxval}, this reader wants 255")));
    }
    if w == 0 || h == 0 {
        return Err(bad("zero dimension"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(bad("missing whitespace after maxval")),
    }
    Ok((w, h, &bytes[pos..]))
}

pub fn load_image(path: &Path) -> Result<ImageBuf> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, body) = parse_header(&bytes, "P6", path)?;
    if body.len() != 3 * w * h {
        return Err(Error::Data(format!(
            "{}: {} payload bytes for {w}x{h} rgb",
            path.display(),
            body.len()
        )));
    }
    let mut img = ImageBuf::new(h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                img.set(c, y, x, body[(y * w + x) * 3 + c] as f32 / 255.0);
            }
        }
    }
    Ok(img)
}

pub fn save_image(path: &Path, img: &ImageBuf) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.reserve(3 * img.w * img.h);
    for y in 0..img.h {
        for x in 0..img.w {
            for c in 0..3 {
                out.push((img.at(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_mask(path: &Path) -> Result<MaskBuf> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, body) = parse_header(&bytes, "P5", path)?;
    if body.len() != w * h {
        return Err(Error::Data(format!(
            "{}: {} payload bytes for {w}x{h} gray",
            path.display(),
            body.len()
        )));
    }
    Ok(MaskBuf { h, w, px: body.iter().map(|&b| b as u32).collect() })
}

pub fn save_mask(path: &Path, mask: &MaskBuf) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", mask.w, mask.h).into_bytes();
    for &v in &mask.px {
        if v > 255 {
            return Err(Error::Data(format!("mask value {v} does not fit 8-bit storage")));
        }
        out.push(v as u8);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
