//! Command-line surface: train, eval, infer, dataset synthesis, the scan
//! benchmark, gradient checking, and the component ablation.
//!
//! Exit codes: 0 success, 2 usage, 3 config, 4 data, 5 anything else.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::bench;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::manifest::DatasetManifest;
use crate::data::raster::{load_image, save_mask};
use crate::data::synth::synth_dataset;
use crate::data::augment::Sample;
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::metrics::Metrics;
use crate::model::{Model, Variant};
use crate::rng::SplitRng;
use crate::trainer::{evaluate, predict_mask, LogLine, Trainer};
use crate::tta::TtaConfig;

#[derive(Parser)]
#[command(name = "pymamba", version, about = "Semantic segmentation with a selective-scan pyramid decoder")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a config file; logs and checkpoints go to its out_dir.
    Train {
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the config's validation split.
    Eval {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Average logits over flips and scales before the argmax.
        #[arg(long)]
        tta: bool,
    },
    /// Segment one image and write the label map as a P5 mask.
    Infer {
        checkpoint: PathBuf,
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset with exact masks.
    Synth {
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
    },
    /// Time sequential vs parallel scans and report per-config error (CSV).
    BenchScan {
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Verify analytic gradients against central differences.
    Gradcheck {
        /// Only run checks whose name contains this substring.
        #[arg(long)]
        module: Option<String>,
    },
    /// Train all four model variants on one config and tabulate val metrics.
    Ablate {
        config: PathBuf,
    },
}

pub fn run_cli() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let run = match cli.cmd {
        Cmd::Train { config } => cmd_train(&config),
        Cmd::Eval { config, checkpoint, tta } => cmd_eval(&config, &checkpoint, tta),
        Cmd::Infer { checkpoint, image, out } => cmd_infer(&checkpoint, &image, &out),
        Cmd::Synth { out_dir, seed, n, size, classes } => cmd_synth(&out_dir, seed, n, size, classes),
        Cmd::BenchScan { csv } => cmd_bench(csv.as_deref()),
        Cmd::Gradcheck { module } => cmd_gradcheck(module.as_deref()),
        Cmd::Ablate { config } => cmd_ablate(&config),
    };
    match run {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Loads a manifest and every sample in it, cross-checking the class count
/// against the run config before any training time is spent.
fn load_split(path: &Path, classes: usize) -> Result<(DatasetManifest, Vec<Sample>)> {
    let mf = DatasetManifest::load(path)?;
    if mf.classes != classes {
        return Err(Error::Config(format!(
            "{}: manifest has {} classes but the config says {}",
            path.display(),
            mf.classes,
            classes
        )));
    }
    let mut samples = Vec::with_capacity(mf.len());
    for i in 0..mf.len() {
        samples.push(mf.load_sample(i)?);
    }
    Ok((mf, samples))
}

fn cmd_train(config: &Path) -> Result<()> {
    let (cfg, echo) = RunConfig::load(config)?;
    let (_, train) = load_split(&cfg.train_manifest, cfg.classes)?;
    let val = match &cfg.val_manifest {
        Some(p) => load_split(p, cfg.classes)?.1,
        None => Vec::new(),
    };
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;

    let model = Model::<f32>::init(cfg.model.clone(), cfg.seed)?;
    println!(
        "# {} preset: {} train / {} val tiles, {} classes, {} parameters, seed {}",
        cfg.preset.label(),
        train.len(),
        val.len(),
        cfg.classes,
        model.param_count(),
        cfg.seed
    );

    let mut trainer = Trainer::new(model, cfg.train_options(echo), train.len())?;
    let log_path = cfg.out_dir.join("train_log.csv");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "{}", LogLine::csv_header()).map_err(|e| Error::io(&log_path, e))?;
    println!("{}", LogLine::csv_header());
    let report = trainer.fit(&train, &val, &mut |l| {
        println!("{}", l.to_csv());
        let _ = writeln!(log, "{}", l.to_csv());
    })?;

    println!(
        "# done: {} epochs{}",
        report.epochs_run,
        if report.stopped_early { " (stopped early)" } else { "" }
    );
    match (report.best_miou, report.best_epoch) {
        (Some(m), Some(e)) => println!("# best val mIoU {m:.4} at epoch {e}"),
        _ => println!("# no validation split; metrics not tracked"),
    }
    println!("# checkpoints in {}", cfg.out_dir.display());
    Ok(())
}

/// Rebuilds the model a checkpoint was trained with and loads its weights.
fn model_from_checkpoint(path: &Path) -> Result<(Model<f32>, RunConfig)> {
    let loaded = checkpoint::load(path)?;
    if loaded.config_text.trim().is_empty() {
        return Err(Error::Config(format!(
            "{}: checkpoint carries no embedded run config",
            path.display()
        )));
    }
    let cfg = RunConfig::parse(&loaded.config_text)?;
    let model = Model::<f32>::init(cfg.model.clone(), cfg.seed)?;
    loaded.apply(&model, None)?;
    Ok((model, cfg))
}

fn print_report(title: &str, names: &[String], m: &Metrics, ignored: u64) {
    println!("{title}");
    println!("{:-<38}", "");
    println!("{:<24} {:>12}", "class", "IoU");
    for (k, iou) in m.per_class_iou.iter().enumerate() {
        let label = names.get(k).map(String::as_str).unwrap_or("?");
        match iou {
            Some(v) => println!("{:<24} {:>12.4}", format!("{k} {label}"), v),
            None => println!("{:<24} {:>12}", format!("{k} {label}"), "absent"),
        }
    }
    println!("{:-<38}", "");
    println!("{:<24} {:>12.4}", "mIoU", m.miou);
    println!("{:<24} {:>12.4}", "OA", m.oa);
    println!("{:<24} {:>12.4}", "F1", m.f1);
    println!("{:<24} {:>12.4}", "precision", m.precision);
    println!("{:<24} {:>12.4}", "recall", m.recall);
    println!("{:<24} {:>12}", "ignored pixels", ignored);
}

fn cmd_eval(config: &Path, ckpt: &Path, tta: bool) -> Result<()> {
    let (cfg, _) = RunConfig::load(config)?;
    let split = cfg.val_manifest.as_ref().unwrap_or(&cfg.train_manifest);
    let (mf, data) = load_split(split, cfg.classes)?;

    let loaded = checkpoint::load(ckpt)?;
    let model = Model::<f32>::init(cfg.model.clone(), cfg.seed)?;
    loaded.apply(&model, None)?;

    let tta_cfg = if tta {
        let t = TtaConfig::full();
        t.validate(cfg.model.input_size, cfg.model.input_size)?;
        Some(t)
    } else {
        None
    };
    let (m, cm) = evaluate(&model, &data, cfg.ignore, tta_cfg.as_ref())?;
    print_report(
        &format!(
            "{} on {} ({} tiles, tta {})",
            ckpt.display(),
            split.display(),
            data.len(),
            if tta { "on" } else { "off" }
        ),
        &mf.class_names,
        &m,
        cm.ignored,
    );
    Ok(())
}

fn cmd_infer(ckpt: &Path, image: &Path, out: &Path) -> Result<()> {
    let (model, cfg) = model_from_checkpoint(ckpt)?;
    let img = load_image(image)?;
    let x = img.to_tensor::<f32>();
    let mut rng = SplitRng::with_stream(0, 0);
    let logits = model.forward(&x, false, &mut rng)?;
    let mask = predict_mask(&logits)?;
    save_mask(out, &mask)?;
    println!(
        "{} -> {} ({}x{}, {} classes)",
        image.display(),
        out.display(),
        mask.w,
        mask.h,
        cfg.classes
    );
    Ok(())
}

fn cmd_synth(out_dir: &Path, seed: u64, n: usize, size: usize, classes: usize) -> Result<()> {
    let mf = synth_dataset(out_dir, seed, n, size, classes)?;
    println!(
        "wrote {} samples ({}x{}, {} classes) under {}",
        mf.len(),
        size,
        size,
        classes,
        out_dir.display()
    );
    Ok(())
}

fn cmd_bench(csv: Option<&Path>) -> Result<()> {
    let mut out: Box<dyn Write> = match csv {
        Some(p) => Box::new(fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => Box::new(std::io::stdout()),
    };
    let sink = Path::new(csv.map(Path::as_os_str).unwrap_or("stdout".as_ref()));
    let emit = |out: &mut dyn Write, line: &str| -> Result<()> {
        writeln!(out, "{line}").map_err(|e| Error::io(sink, e))
    };
    emit(&mut *out, bench::csv_header())?;
    let mut cfg_idx = 0u64;
    for &l in &bench::BENCH_SEQ_LENS {
        for &d in &bench::BENCH_CHANNELS {
            for &s in &bench::BENCH_STATES {
                let (seq, par) = bench::bench_config(l, d, s, cfg_idx, 0);
                emit(&mut *out, &seq.to_csv())?;
                emit(&mut *out, &par.to_csv())?;
                if csv.is_some() {
                    eprintln!("bench L={l} D={d} S={s} done");
                }
                cfg_idx += 1;
            }
        }
    }
    Ok(())
}

fn cmd_gradcheck(module: Option<&str>) -> Result<()> {
    let reports = gradcheck::run_all(module)?;
    if reports.is_empty() {
        return Err(Error::Usage(format!(
            "no gradient check matches '{}'",
            module.unwrap_or("")
        )));
    }
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{:<12} {}  max rel err {:.3e} over {} entries",
            r.name,
            if r.pass { "pass" } else { "FAIL" },
            r.max_rel_err,
            r.checked
        );
        if !r.pass {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::domain("gradcheck", format!("failed: {}", failed.join(", "))))
    }
}

fn cmd_ablate(config: &Path) -> Result<()> {
    let (cfg, echo) = RunConfig::load(config)?;
    let (_, train) = load_split(&cfg.train_manifest, cfg.classes)?;
    let val = match &cfg.val_manifest {
        Some(p) => load_split(p, cfg.classes)?.1,
        None => Vec::new(),
    };
    let eval_split: &[Sample] = if val.is_empty() { &train } else { &val };
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;

    let mut rows = Vec::new();
    for variant in Variant::all() {
        let mut mcfg = cfg.model.clone();
        mcfg.variant = variant;
        let model = Model::<f32>::init(mcfg, cfg.seed)?;
        let mut opts = cfg.train_options(echo.clone());
        opts.checkpoint_dir = Some(cfg.out_dir.join(variant.label()));
        eprintln!("training {} ({} max epochs)", variant.label(), opts.max_epochs);
        let mut trainer = Trainer::new(model, opts, train.len())?;
        let report = trainer.fit(&train, &val, &mut |_| {})?;
        let (m, _) = evaluate(&trainer.model, eval_split, cfg.ignore, None)?;
        eprintln!(
            "  {} epochs{}, mIoU {:.4}",
            report.epochs_run,
            if report.stopped_early { " (early stop)" } else { "" },
            m.miou
        );
        rows.push((variant.label(), m));
    }

    println!("{:<16} {:>8} {:>8} {:>8}", "variant", "mIoU", "OA", "F1");
    for (label, m) in &rows {
        println!("{label:<16} {:>8.4} {:>8.4} {:>8.4}", m.miou, m.oa, m.f1);
    }
    Ok(())
}
