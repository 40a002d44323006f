//! Training loop: shuffled mini-batches with gradient accumulation, two-group
//! learning rates, per-epoch validation, early stopping, and checkpointing.
//!
//! Reproducibility contract: every random decision draws from a stream keyed
//! by (seed, purpose, epoch, index), never from a shared cursor. A run resumed
//! from an epoch-boundary checkpoint therefore replays the exact shuffles,
//! augmentations and dropout masks the uninterrupted run would have used.

use std::path::PathBuf;

use crate::checkpoint::{self, TrainMeta};
use crate::data::augment::{augment, AugmentationConfig, Sample};
use crate::data::raster::MaskBuf;
use crate::error::{Error, Result};
use crate::loss::joint_loss;
use crate::metrics::{metrics, ConfusionMatrix, Metrics};
use crate::model::Model;
use crate::optim::AdamW;
use crate::rng::{Domain, SplitRng};
use crate::scalar::Scalar;
use crate::schedule::LrSchedule;
use crate::tensor::{ops, Tensor};
use crate::tta::{tta_infer, TtaConfig};

/// One optimizer step in the log, mirrored verbatim into the CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLine {
    pub step: u64,
    pub epoch: u32,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub ce: f64,
    pub dice: f64,
    pub total: f64,
}

impl LogLine {
    pub fn csv_header() -> &'static str {
        "step,epoch,lr_encoder,lr_decoder,ce,dice,total"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.10e},{:.10e},{:.8},{:.8},{:.8}",
            self.step, self.epoch, self.lr_encoder, self.lr_decoder, self.ce, self.dice, self.total
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr_decoder: f64,
    pub lr_encoder: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub patience: usize,
    pub augment: Option<AugmentationConfig>,
    pub ignore: u32,
    pub seed: u64,
    /// Where `best.ckpt` / `last.ckpt` land; in-memory runs skip saving.
    pub checkpoint_dir: Option<PathBuf>,
    /// Run configuration echoed into checkpoints for provenance.
    pub config_echo: String,
}

impl TrainOptions {
    pub fn quick(seed: u64) -> Self {
        TrainOptions {
            max_epochs: 1,
            batch_size: 2,
            lr_decoder: 6e-4,
            lr_encoder: 6e-5,
            weight_decay: 0.01,
            warmup_epochs: 0,
            patience: 10,
            augment: None,
            ignore: 255,
            seed,
            checkpoint_dir: None,
            config_echo: String::new(),
        }
    }

    pub fn validate(&self, n_train: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("need at least one epoch".into()));
        }
        if n_train == 0 {
            return Err(Error::Config("training set is empty".into()));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitReport {
    pub log: Vec<LogLine>,
    pub val_miou: Vec<f64>,
    pub best_miou: Option<f64>,
    pub best_epoch: Option<u32>,
    pub epochs_run: u32,
    pub stopped_early: bool,
}

pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub opt: AdamW<T>,
    pub meta: TrainMeta,
    enc_sched: LrSchedule,
    dec_sched: LrSchedule,
    opts: TrainOptions,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, opts: TrainOptions, n_train: usize) -> Result<Self> {
        opts.validate(n_train)?;
        let opt = AdamW::new(model.named_params(), opts.weight_decay);
        let steps_per_epoch = n_train.div_ceil(opts.batch_size) as u64;
        let total = steps_per_epoch * opts.max_epochs as u64;
        let warm = steps_per_epoch * opts.warmup_epochs as u64;
        let meta = TrainMeta { epoch: 0, step: 0, best_miou: None, seed: opts.seed };
        Ok(Trainer {
            enc_sched: LrSchedule::new(opts.lr_encoder, warm, total),
            dec_sched: LrSchedule::new(opts.lr_decoder, warm, total),
            model,
            opt,
            meta,
            opts,
        })
    }

    /// Rebuilds a trainer mid-run: fresh model of the same architecture, then
    /// checkpointed parameters, buffers, moments and counters applied on top.
    pub fn resume(model: Model<T>, opts: TrainOptions, n_train: usize, ckpt: &PathBuf) -> Result<Self> {
        let mut t = Self::new(model, opts, n_train)?;
        let loaded = checkpoint::load(ckpt)?;
        loaded.apply(&t.model, Some(&mut t.opt))?;
        t.meta = loaded.meta.clone();
        Ok(t)
    }

    pub fn options(&self) -> &TrainOptions {
        &self.opts
    }

    /// One pass over the training set: shuffle, accumulate per-sample
    /// gradients of loss / batch_size, step, log.
    pub fn run_epoch(&mut self, train: &[Sample]) -> Result<Vec<LogLine>> {
        let epoch = self.meta.epoch;
        let n = train.len();
        let base = SplitRng::new(self.opts.seed);
        let mut order: Vec<usize> = (0..n).collect();
        base.split(Domain::Shuffle, epoch as u64, 0).shuffle(&mut order);

        let mut lines = Vec::with_capacity(order.len().div_ceil(self.opts.batch_size));
        for (b, batch) in order.chunks(self.opts.batch_size).enumerate() {
            self.model.zero_grad();
            let inv = 1.0 / batch.len() as f64;
            let (mut ce, mut dice, mut total) = (0.0, 0.0, 0.0);
            for (j, &idx) in batch.iter().enumerate() {
                let pos = (b * self.opts.batch_size + j) as u64;
                let sample = self.prepared_sample(train, idx, epoch as u64, pos)?;
                let mut drop_rng = base.split(Domain::Dropout, epoch as u64, pos);
                let image = sample.0.to_tensor::<T>();
                let logits = self.model.forward(&image, true, &mut drop_rng)?;
                let (loss, bd) = joint_loss(&logits, &sample.1.px, Some(self.opts.ignore))?;
                ops::scale(&loss, inv).backward()?;
                ce += bd.ce * inv;
                dice += bd.dice * inv;
                total += bd.total * inv;
            }
            let (lr_e, lr_d) =
                (self.enc_sched.lr_at(self.meta.step), self.dec_sched.lr_at(self.meta.step));
            self.opt.step(lr_e, lr_d)?;
            self.meta.step += 1;
            lines.push(LogLine {
                step: self.meta.step,
                epoch,
                lr_encoder: lr_e,
                lr_decoder: lr_d,
                ce,
                dice,
                total,
            });
        }
        Ok(lines)
    }

    /// Augmented view of sample `idx`, or a plain copy when augmentation is
    /// off. Extra mosaic members come from the same stream, drawn up front so
    /// stream positions stay independent of the mosaic coin flip.
    fn prepared_sample(
        &self,
        train: &[Sample],
        idx: usize,
        epoch: u64,
        pos: u64,
    ) -> Result<Sample> {
        let Some(cfg) = &self.opts.augment else {
            return Ok(train[idx].clone());
        };
        let mut rng = SplitRng::new(self.opts.seed).split(Domain::Augment, epoch, pos);
        let picks = [rng.below(train.len()), rng.below(train.len()), rng.below(train.len())];
        let mut next = 0usize;
        let mut extra = || {
            let s = train[picks[next]].clone();
            next += 1;
            s
        };
        augment(&train[idx], &mut extra, cfg, &mut rng)
    }

    /// Full training run with per-epoch validation and early stopping on val
    /// mIoU. `on_line` sees every optimizer step as it happens.
    pub fn fit(
        &mut self,
        train: &[Sample],
        val: &[Sample],
        on_line: &mut dyn FnMut(&LogLine),
    ) -> Result<FitReport> {
        self.opts.validate(train.len())?;
        let mut report = FitReport::default();
        let mut bad_epochs = 0usize;
        while (self.meta.epoch as usize) < self.opts.max_epochs {
            let lines = self.run_epoch(train)?;
            for l in &lines {
                on_line(l);
            }
            report.log.extend(lines);
            let finished = self.meta.epoch;
            self.meta.epoch = finished + 1;

            let miou = if val.is_empty() {
                f64::NAN
            } else {
                let (m, _) = evaluate(&self.model, val, self.opts.ignore, None)?;
                m.miou
            };
            report.val_miou.push(miou);
            report.epochs_run = self.meta.epoch;

            let improved = !miou.is_nan()
                && self.meta.best_miou.map(|b| miou > b).unwrap_or(true);
            if improved {
                self.meta.best_miou = Some(miou);
                report.best_miou = Some(miou);
                report.best_epoch = Some(finished);
                bad_epochs = 0;
                self.save_checkpoint("best.ckpt")?;
            } else if !val.is_empty() {
                bad_epochs += 1;
            }
            self.save_checkpoint("last.ckpt")?;

            if bad_epochs >= self.opts.patience {
                report.stopped_early = true;
                break;
            }
        }
        Ok(report)
    }

    fn save_checkpoint(&self, name: &str) -> Result<()> {
        let Some(dir) = &self.opts.checkpoint_dir else {
            return Ok(());
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(
            &dir.join(name),
            &self.model,
            Some(&self.opt),
            &self.meta,
            &self.opts.config_echo,
        )
    }
}

/// Hard prediction: per-pixel argmax over class logits (ties -> lower index).
pub fn predict_mask<T: Scalar>(logits: &Tensor<T>) -> Result<MaskBuf> {
    let (k, h, w) = match logits.shape() {
        [k, h, w] => (*k, *h, *w),
        sh => return Err(Error::shape("predict", format!("expected [K,H,W], got {sh:?}"))),
    };
    let d = logits.data();
    let plane = h * w;
    let mut out = MaskBuf::new(h, w, 0);
    for p in 0..plane {
        let (mut best, mut arg) = (d[p].to_f64c(), 0u32);
        for c in 1..k {
            let v = d[c * plane + p].to_f64c();
            if v > best {
                best = v;
                arg = c as u32;
            }
        }
        out.px[p] = arg;
    }
    Ok(out)
}

/// Eval-mode pass over a dataset into one global confusion matrix. With a
/// TTA config, logits are branch-averaged before the argmax.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &[Sample],
    ignore: u32,
    tta: Option<&TtaConfig>,
) -> Result<(Metrics, ConfusionMatrix)> {
    let mut cm = ConfusionMatrix::new(model.cfg.num_classes)?;
    let mut rng = SplitRng::with_stream(0, 0);
    for (img, mask) in data {
        let image = img.to_tensor::<T>();
        let logits = match tta {
            Some(cfg) => tta_infer(model, &image, cfg)?,
            None => model.forward(&image, false, &mut rng)?,
        };
        let pred = predict_mask(&logits)?;
        cm.record(&mask.px, &pred.px, Some(ignore))?;
    }
    Ok((metrics(&cm)?, cm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::synth_sample;
    use crate::model::ModelConfig;

    fn small_cfg(k: usize) -> ModelConfig {
        ModelConfig { input_size: 32, ..ModelConfig::desk(k) }
    }

    fn dataset(seed: u64, n: usize, size: usize, k: usize) -> Vec<Sample> {
        (0..n).map(|i| synth_sample(seed, i as u64, size, k)).collect()
    }

    #[test]
    fn four_samples_batch_two_is_exactly_two_steps() {
        let data = dataset(0, 4, 32, 3);
        let model = Model::<f32>::init(small_cfg(3), 1).unwrap();
        let mut opts = TrainOptions::quick(1);
        opts.augment = Some(AugmentationConfig::desk(32));
        let mut tr = Trainer::new(model, opts, data.len()).unwrap();
        let report = tr.fit(&data, &[], &mut |_| {}).unwrap();
        assert_eq!(report.log.len(), 2);
        assert_eq!(report.log[0].step, 1);
        assert_eq!(report.log[1].step, 2);
        assert_eq!(tr.meta.step, 2);
        for l in &report.log {
            assert!(l.ce >= 0.0 && (0.0..=1.0).contains(&l.dice), "bounds: {l:?}");
            assert!(l.total.is_finite());
        }
    }

    #[test]
    fn fixed_seed_reproduces_the_loss_log() {
        let data = dataset(3, 4, 32, 3);
        let run = || {
            let model = Model::<f32>::init(small_cfg(3), 5).unwrap();
            let mut opts = TrainOptions::quick(5);
            opts.max_epochs = 2;
            opts.augment = Some(AugmentationConfig::desk(32));
            let mut tr = Trainer::new(model, opts, data.len()).unwrap();
            tr.fit(&data, &[], &mut |_| {}).unwrap().log
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b, "same seed must give a bit-identical loss log");
    }

    #[test]
    fn resume_from_checkpoint_matches_uninterrupted_run() {
        let data = dataset(7, 4, 32, 3);
        let val = dataset(8, 2, 32, 3);
        let dir = std::env::temp_dir().join(format!("trainer_resume_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);

        // Uninterrupted: three epochs in double precision.
        let mut full_opts = TrainOptions::quick(9);
        full_opts.max_epochs = 3;
        let model = Model::<f64>::init(small_cfg(3), 11).unwrap();
        let mut full = Trainer::new(model, full_opts.clone(), data.len()).unwrap();
        let full_log = full.fit(&data, &val, &mut |_| {}).unwrap().log;

        // Interrupted: same schedule horizon, stopped after two epochs.
        std::fs::create_dir_all(&dir).unwrap();
        let model = Model::<f64>::init(small_cfg(3), 11).unwrap();
        let mut part = Trainer::new(model, full_opts.clone(), data.len()).unwrap();
        for epoch in 0..2u32 {
            let lines = part.run_epoch(&data).unwrap();
            assert_eq!(lines.len(), 2);
            part.meta.epoch = epoch + 1;
        }
        let ckpt = dir.join("last.ckpt");
        checkpoint::save(&ckpt, &part.model, Some(&part.opt), &part.meta, "").unwrap();

        let model = Model::<f64>::init(small_cfg(3), 999).unwrap(); // weights get overwritten
        let mut resumed = Trainer::resume(model, full_opts, data.len(), &ckpt).unwrap();
        assert_eq!(resumed.meta.epoch, 2);
        assert_eq!(resumed.meta.step, 4);
        let tail = resumed.run_epoch(&data).unwrap();

        // Checkpoints carry f32 payloads, so allow quantization-level drift.
        for (a, b) in full_log[4..].iter().zip(&tail) {
            assert_eq!(a.step, b.step);
            assert_eq!(a.lr_decoder, b.lr_decoder);
            assert!((a.total - b.total).abs() < 1e-6, "step {}: {} vs {}", a.step, a.total, b.total);
        }
    }

    #[test]
    fn early_stop_fires_after_patience_without_improvement() {
        let data = dataset(12, 2, 32, 3);
        let val = dataset(13, 2, 32, 3);
        let model = Model::<f32>::init(small_cfg(3), 2).unwrap();
        let mut opts = TrainOptions::quick(2);
        opts.max_epochs = 30;
        opts.batch_size = 2;
        opts.patience = 2;
        let mut tr = Trainer::new(model, opts, data.len()).unwrap();
        // A best score no real epoch can beat: every epoch counts as a miss,
        // so the stop must fire after exactly `patience` epochs.
        tr.meta.best_miou = Some(2.0);
        let report = tr.fit(&data, &val, &mut |_| {}).unwrap();
        assert!(report.stopped_early);
        assert_eq!(report.epochs_run, 2);
        assert_eq!(report.best_miou, None, "nothing improved on the seeded best");
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let model = Model::<f32>::init(small_cfg(4), 21).unwrap();
        let mut rng = SplitRng::with_stream(0, 0);
        let mut data = dataset(14, 2, 32, 4);
        for (img, mask) in data.iter_mut() {
            let logits = model.forward(&img.to_tensor::<f32>(), false, &mut rng).unwrap();
            *mask = predict_mask(&logits).unwrap();
        }
        let (m, _) = evaluate(&model, &data, 255, None).unwrap();
        assert_eq!(m.oa, 1.0);
        assert_eq!(m.miou, 1.0);
        assert_eq!(m.f1, 1.0);
    }

    #[test]
    fn batched_and_one_by_one_evaluation_agree() {
        let model = Model::<f32>::init(small_cfg(3), 31).unwrap();
        let data = dataset(15, 3, 32, 3);
        let (_, together) = evaluate(&model, &data, 255, None).unwrap();
        let mut merged = ConfusionMatrix::new(3).unwrap();
        for s in &data {
            let (_, one) = evaluate(&model, std::slice::from_ref(s), 255, None).unwrap();
            merged.merge(&one).unwrap();
        }
        for gt in 0..3 {
            for pred in 0..3 {
                assert_eq!(together.at(gt, pred), merged.at(gt, pred));
            }
        }
    }

    #[test]
    fn log_line_csv_shape_matches_header() {
        let l = LogLine {
            step: 3,
            epoch: 1,
            lr_encoder: 6e-5,
            lr_decoder: 6e-4,
            ce: 1.25,
            dice: 0.5,
            total: 1.75,
        };
        let header_cols = LogLine::csv_header().split(',').count();
        assert_eq!(l.to_csv().split(',').count(), header_cols);
        assert!(l.to_csv().starts_with("3,1,"));
    }
}
