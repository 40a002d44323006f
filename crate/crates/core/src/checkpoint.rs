//! Checkpoint serialization.
//!
//! Layout, all little-endian: magic `PYMB`, format version, a length-prefixed
//! config echo, run counters (epoch, step, best metric, seed), then three
//! record sections (parameters, norm running buffers, optimizer moments) and
//! a trailing CRC32 of everything before it. Records carry name, dims, and
//! f32 payloads. Loading parses and validates the whole file before touching
//! any live state, so a bad checkpoint can never leave a model half-written.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdamW;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"PYMB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainMeta {
    pub epoch: u32,
    pub step: u64,
    pub best_miou: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Fully parsed checkpoint, not yet applied to anything.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub meta: TrainMeta,
    pub config_text: String,
    pub params: Vec<Record>,
    pub buffers: Vec<Record>,
    pub opt_step: u64,
    pub opt_moments: Vec<(String, Vec<f32>, Vec<f32>)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f32]) {
    let nb = name.as_bytes();
    out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
    out.extend_from_slice(nb);
    out.push(dims.len() as u8);
    for &d in dims {
        put_u32(out, d as u32);
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    opt: Option<&AdamW<T>>,
    meta: &TrainMeta,
    config_text: &str,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, config_text.len() as u32);
    out.extend_from_slice(config_text.as_bytes());
    put_u32(&mut out, meta.epoch);
    put_u64(&mut out, meta.step);
    out.push(meta.best_miou.is_some() as u8);
    out.extend_from_slice(&meta.best_miou.unwrap_or(0.0).to_le_bytes());
    put_u64(&mut out, meta.seed);

    let as_f32 = |v: &[T]| v.iter().map(|x| x.to_f64c() as f32).collect::<Vec<f32>>();

    let mut params = Vec::new();
    model.visit_params(&mut |name, t| params.push((name, t.shape().to_vec(), as_f32(&t.data()))));
    put_u32(&mut out, params.len() as u32);
    for (name, dims, data) in &params {
        put_record(&mut out, name, dims, data);
    }

    let mut buffers = Vec::new();
    model.visit_buffers(&mut |name, cell| {
        let v = cell.borrow();
        buffers.push((name, vec![v.len()], as_f32(&v)));
    });
    put_u32(&mut out, buffers.len() as u32);
    for (name, dims, data) in &buffers {
        put_record(&mut out, name, dims, data);
    }

    match opt {
        Some(opt) => {
            out.push(1);
            put_u64(&mut out, opt.step_count());
            let mut count = 0u32;
            let mut moments = Vec::new();
            opt.visit_state(&mut |name, m, v| {
                moments.push((name.to_string(), as_f32(m), as_f32(v)));
                count += 1;
            });
            put_u32(&mut out, count);
            for (name, m, v) in &moments {
                put_record(&mut out, &format!("m.{name}"), &[m.len()], m);
                put_record(&mut out, &format!("v.{name}"), &[v.len()], v);
            }
        }
        None => out.push(0),
    }

    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);

    // Write-then-rename so a crash mid-save never leaves a torn file behind.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Integrity(format!(
                "truncated: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn record(&mut self) -> Result<Record> {
        let name_len = self.u16()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| Error::Integrity("record name is not utf-8".into()))?;
        let ndim = self.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = self.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Record { name, dims, data })
    }
}

pub fn load(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Integrity(format!("file is only {} bytes", bytes.len())));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(payload) != stored {
        return Err(Error::Integrity("CRC mismatch".into()));
    }
    let mut cur = Cursor { buf: payload, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Integrity("bad magic bytes".into()));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    let cfg_len = cur.u32()? as usize;
    let config_text = String::from_utf8(cur.take(cfg_len)?.to_vec())
        .map_err(|_| Error::Integrity("config echo is not utf-8".into()))?;
    let epoch = cur.u32()?;
    let step = cur.u64()?;
    let has_best = cur.u8()? != 0;
    let best = cur.f64()?;
    let seed = cur.u64()?;

    let n_params = cur.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        params.push(cur.record()?);
    }
    let n_buffers = cur.u32()? as usize;
    let mut buffers = Vec::with_capacity(n_buffers);
    for _ in 0..n_buffers {
        buffers.push(cur.record()?);
    }

    let mut opt_step = 0;
    let mut opt_moments = Vec::new();
    if cur.u8()? != 0 {
        opt_step = cur.u64()?;
        let n = cur.u32()? as usize;
        for _ in 0..n {
            let m = cur.record()?;
            let v = cur.record()?;
            let name = m
                .name
                .strip_prefix("m.")
                .ok_or_else(|| Error::Integrity(format!("unexpected moment record {}", m.name)))?
                .to_string();
            if v.name.strip_prefix("v.") != Some(&name) {
                return Err(Error::Integrity(format!("moment pair mismatch: {} / {}", m.name, v.name)));
            }
            opt_moments.push((name, m.data, v.data));
        }
    }
    if cur.pos != payload.len() {
        return Err(Error::Integrity(format!("{} trailing bytes", payload.len() - cur.pos)));
    }

    Ok(Loaded {
        meta: TrainMeta { epoch, step, best_miou: has_best.then_some(best), seed },
        config_text,
        params,
        buffers,
        opt_step,
        opt_moments,
    })
}

impl Loaded {
    /// Copies every parameter and buffer into `model` (and moments into the
    /// optimizer). Validates the complete name/shape correspondence first;
    /// nothing is written unless everything matches.
    pub fn apply<T: Scalar>(&self, model: &Model<T>, opt: Option<&mut AdamW<T>>) -> Result<()> {
        let by_name: HashMap<&str, &Record> =
            self.params.iter().map(|r| (r.name.as_str(), r)).collect();
        let mut targets = Vec::new();
        model.visit_params(&mut |name, t| targets.push((name, t.clone())));
        if targets.len() != self.params.len() {
            return Err(Error::Integrity(format!(
                "checkpoint has {} parameters, model needs {}",
                self.params.len(),
                targets.len()
            )));
        }
        for (name, t) in &targets {
            let rec = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Integrity(format!("checkpoint is missing {name}")))?;
            if rec.dims != t.shape() {
                return Err(Error::Integrity(format!(
                    "{name}: checkpoint shape {:?} vs model {:?}",
                    rec.dims,
                    t.shape()
                )));
            }
        }

        let buf_by_name: HashMap<&str, &Record> =
            self.buffers.iter().map(|r| (r.name.as_str(), r)).collect();
        let mut buf_targets = Vec::new();
        model.visit_buffers(&mut |name, cell| buf_targets.push((name, cell)));
        if buf_targets.len() != self.buffers.len() {
            return Err(Error::Integrity("running-buffer count mismatch".into()));
        }
        for (name, cell) in &buf_targets {
            let rec = buf_by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Integrity(format!("checkpoint is missing buffer {name}")))?;
            if rec.data.len() != cell.borrow().len() {
                return Err(Error::Integrity(format!("buffer {name} length mismatch")));
            }
        }

        for (name, t) in &targets {
            let rec = by_name[name.as_str()];
            t.set_data(&rec.data.iter().map(|&v| T::from_f64c(v as f64)).collect::<Vec<T>>());
        }
        for (name, cell) in &buf_targets {
            let rec = buf_by_name[name.as_str()];
            *cell.borrow_mut() = rec.data.iter().map(|&v| T::from_f64c(v as f64)).collect();
        }

        if let Some(opt) = opt {
            let moments: HashMap<&str, (&[f32], &[f32])> = self
                .opt_moments
                .iter()
                .map(|(n, m, v)| (n.as_str(), (m.as_slice(), v.as_slice())))
                .collect();
            let to_t = |v: &[f32]| v.iter().map(|&x| T::from_f64c(x as f64)).collect::<Vec<T>>();
            opt.load_state(self.opt_step, |name| {
                moments.get(name).map(|(m, v)| (to_t(m), to_t(v)))
            })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::SplitRng;
    use crate::tensor::{ops, Tensor};

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("ckpt_test_{tag}_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig { input_size: 32, ..ModelConfig::desk(3) }
    }

    fn dump_params(m: &Model<f32>) -> Vec<u32> {
        let mut v = Vec::new();
        m.visit_params(&mut |_, t| v.extend(t.to_vec().iter().map(|x| x.to_bits())));
        m.visit_buffers(&mut |_, c| v.extend(c.borrow().iter().map(|x| x.to_bits())));
        v
    }

    /// One train-mode forward/backward/step to move params and BN stats off
    /// their initial values.
    fn perturb(model: &Model<f32>, opt: &mut AdamW<f32>) {
        let mut rng = SplitRng::with_stream(2, 7);
        let img = Tensor::from_vec(
            (0..3 * 32 * 32).map(|_| rng.normal()).collect(),
            &[3, 32, 32],
        )
        .unwrap();
        let logits = model.forward(&img, true, &mut rng).unwrap();
        ops::mean(&logits).backward().unwrap();
        opt.step(1e-3, 1e-3).unwrap();
        opt.zero_grad();
    }

    #[test]
    fn round_trip_restores_every_bit() {
        let dir = tmpdir("round");
        let path = dir.join("a.ckpt");
        let model = Model::<f32>::init(small_cfg(), 21).unwrap();
        let mut opt = AdamW::new(model.named_params(), 0.01);
        perturb(&model, &mut opt);

        let meta = TrainMeta { epoch: 3, step: 17, best_miou: Some(0.625), seed: 21 };
        save(&path, &model, Some(&opt), &meta, "echo").unwrap();

        let other = Model::<f32>::init(small_cfg(), 99).unwrap();
        let mut other_opt = AdamW::new(other.named_params(), 0.01);
        assert_ne!(dump_params(&model), dump_params(&other));

        let loaded = load(&path).unwrap();
        assert_eq!(loaded.meta, meta);
        assert_eq!(loaded.config_text, "echo");
        loaded.apply(&other, Some(&mut other_opt)).unwrap();
        assert_eq!(dump_params(&model), dump_params(&other));
        assert_eq!(other_opt.step_count(), 1);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tmpdir("idem");
        let (p1, p2) = (dir.join("one.ckpt"), dir.join("two.ckpt"));
        let model = Model::<f32>::init(small_cfg(), 22).unwrap();
        let meta = TrainMeta { epoch: 0, step: 0, best_miou: None, seed: 22 };
        save(&p1, &model, None, &meta, "cfg").unwrap();

        let fresh = Model::<f32>::init(small_cfg(), 1).unwrap();
        load(&p1).unwrap().apply(&fresh, None).unwrap();
        save(&p2, &fresh, None, &meta, "cfg").unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncation_anywhere_is_an_integrity_error() {
        let dir = tmpdir("trunc");
        let path = dir.join("full.ckpt");
        let model = Model::<f32>::init(small_cfg(), 23).unwrap();
        let meta = TrainMeta { epoch: 1, step: 2, best_miou: None, seed: 23 };
        save(&path, &model, None, &meta, "cfg").unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let cut = dir.join("cut.ckpt");
        for keep in [3usize, 16, bytes.len() / 2, bytes.len() - 1] {
            std::fs::write(&cut, &bytes[..keep]).unwrap();
            assert!(
                matches!(load(&cut), Err(Error::Integrity(_))),
                "truncation to {keep} bytes went unnoticed"
            );
        }
    }

    #[test]
    fn corruption_and_version_skew_fail_loudly() {
        let dir = tmpdir("corrupt");
        let path = dir.join("base.ckpt");
        let model = Model::<f32>::init(small_cfg(), 24).unwrap();
        let meta = TrainMeta { epoch: 0, step: 0, best_miou: None, seed: 24 };
        save(&path, &model, None, &meta, "cfg").unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // Flip one payload byte: CRC must catch it.
        let mut bad = bytes.clone();
        bad[40] ^= 0x10;
        let p_bad = dir.join("flip.ckpt");
        std::fs::write(&p_bad, &bad).unwrap();
        assert!(matches!(load(&p_bad), Err(Error::Integrity(_))));

        // Bump the version and re-hash so only the version check trips.
        let mut newer = bytes.clone();
        newer[4] = 9;
        let len = newer.len();
        let crc = crc32fast::hash(&newer[..len - 4]);
        newer[len - 4..].copy_from_slice(&crc.to_le_bytes());
        let p_new = dir.join("newer.ckpt");
        std::fs::write(&p_new, &newer).unwrap();
        assert!(matches!(
            load(&p_new),
            Err(Error::Version { found: 9, expected: FORMAT_VERSION })
        ));
    }

    #[test]
    fn mismatched_model_is_rejected_before_any_write() {
        let dir = tmpdir("mismatch");
        let path = dir.join("k3.ckpt");
        let model = Model::<f32>::init(small_cfg(), 25).unwrap();
        let meta = TrainMeta { epoch: 0, step: 0, best_miou: None, seed: 25 };
        save(&path, &model, None, &meta, "cfg").unwrap();

        // Different class count: the head shape cannot match.
        let other = Model::<f32>::init(
            ModelConfig { input_size: 32, ..ModelConfig::desk(5) },
            25,
        )
        .unwrap();
        let before = dump_params(&other);
        assert!(load(&path).unwrap().apply(&other, None).is_err());
        assert_eq!(before, dump_params(&other), "failed apply must not mutate");
    }
}
