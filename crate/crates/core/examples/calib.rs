//! Scratch calibration harness for the training-based acceptance gates.
//! Not part of the shipped surface.

use pymamba::data::augment::Sample;
use pymamba::data::synth::synth_sample;
use pymamba::model::{Model, ModelConfig, Variant};
use pymamba::trainer::{evaluate, TrainOptions, Trainer};

fn dataset(seed: u64, range: std::ops::Range<u64>, size: usize, k: usize) -> Vec<Sample> {
    range.map(|i| synth_sample(seed, i, size, k)).collect()
}

fn opts(seed: u64, max_epochs: usize, lr_dec: f64, lr_enc: f64) -> TrainOptions {
    TrainOptions {
        max_epochs,
        batch_size: 4,
        lr_decoder: lr_dec,
        lr_encoder: lr_enc,
        weight_decay: 0.01,
        warmup_epochs: 5,
        patience: usize::MAX,
        augment: None,
        ignore: 255,
        seed,
        checkpoint_dir: None,
        config_echo: String::new(),
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("overfit");
    match mode {
        "overfit" => {
            let variant = match args.get(2).map(String::as_str).unwrap_or("full") {
                "baseline" => Variant::Baseline,
                v => Variant::parse(v).unwrap(),
            };
            let lr_dec: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(6e-4);
            let lr_enc: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(6e-4);
            let max_epochs: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(300);
            let train = dataset(0, 0..8, 64, 4);
            let cfg = ModelConfig { variant, ..ModelConfig::desk(4) };
            let model = Model::<f32>::init(cfg, 0).unwrap();
            let mut tr = Trainer::new(model, opts(0, max_epochs, lr_dec, lr_enc), 8).unwrap();
            let t0 = std::time::Instant::now();
            let mut best = 0.0f64;
            for e in 0..max_epochs {
                let lines = tr.run_epoch(&train).unwrap();
                tr.meta.epoch += 1;
                let (m, _) = evaluate(&tr.model, &train, 255, None).unwrap();
                best = best.max(m.miou);
                if (e + 1) % 5 == 0 || m.miou >= 0.95 {
                    println!(
                        "epoch {:3} loss {:.4} miou {:.4} best {:.4} {:.0}s",
                        e + 1,
                        lines.last().unwrap().total,
                        m.miou,
                        best,
                        t0.elapsed().as_secs_f64()
                    );
                }
                if best >= 0.97 {
                    break;
                }
            }
            println!("done: best {best:.4} in {:.0}s", t0.elapsed().as_secs_f64());
        }
        "ablate" => {
            let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(12);
            let lr_enc: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(6e-4);
            let train = dataset(0, 0..64, 64, 4);
            let val = dataset(0, 64..80, 64, 4);
            for variant in Variant::all() {
                let mut scores = Vec::new();
                for seed in [0u64, 1, 2] {
                    let cfg = ModelConfig { variant, ..ModelConfig::desk(4) };
                    let model = Model::<f32>::init(cfg, seed).unwrap();
                    let mut tr =
                        Trainer::new(model, opts(seed, epochs, 6e-4, lr_enc), 64).unwrap();
                    let t0 = std::time::Instant::now();
                    for _ in 0..epochs {
                        tr.run_epoch(&train).unwrap();
                        tr.meta.epoch += 1;
                    }
                    let (m, _) = evaluate(&tr.model, &val, 255, None).unwrap();
                    println!(
                        "{:10} seed {seed}: val miou {:.4} ({:.0}s)",
                        variant.label(),
                        m.miou,
                        t0.elapsed().as_secs_f64()
                    );
                    scores.push(m.miou);
                }
                scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
                println!("{:10} median {:.4}", variant.label(), scores[1]);
            }
        }
        other => eprintln!("unknown mode {other}"),
    }
}
