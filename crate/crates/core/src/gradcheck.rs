//! Finite-difference verification of every hand-written backward.
//!
//! All checks run in `f64` with central differences: perturb one parameter
//! entry by `±h`, rebuild the forward pass, and compare `(L+ - L-)/2h`
//! against the analytic gradient from `backward()`. Loss closures must be
//! deterministic per call (stochastic pieces re-seed their own streams), so
//! the only thing that changes between evaluations is the perturbed entry.

use crate::error::Result;
use crate::rng::SplitRng;
use crate::tensor::{no_grad, nn, ops, Tensor};

pub const DEFAULT_H: f64 = 1e-4;
pub const DEFAULT_RTOL: f64 = 1e-3;
const ATOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub pass: bool,
}

impl CheckReport {
    fn merge(name: &str, parts: Vec<CheckReport>) -> CheckReport {
        CheckReport {
            name: name.to_string(),
            max_rel_err: parts.iter().map(|p| p.max_rel_err).fold(0.0, f64::max),
            checked: parts.iter().map(|p| p.checked).sum(),
            pass: parts.iter().all(|p| p.pass),
        }
    }
}

/// Central-difference check of `loss_fn` against the analytic gradient of
/// `param`, at the given flat indices.
pub fn check_param(
    name: &str,
    loss_fn: &mut dyn FnMut() -> Result<Tensor<f64>>,
    param: &Tensor<f64>,
    indices: &[usize],
    h: f64,
    rtol: f64,
) -> Result<CheckReport> {
    param.zero_grad();
    let loss = loss_fn()?;
    loss.backward()?;
    let analytic = param.grad().unwrap_or_else(|| vec![0.0; param.numel()]);

    let mut max_rel = 0.0f64;
    let mut pass = true;
    for &i in indices {
        let orig = param.to_vec()[i];
        let eval = |v: f64, f: &mut dyn FnMut() -> Result<Tensor<f64>>| -> Result<f64> {
            let mut d = param.to_vec();
            d[i] = v;
            param.set_data(&d);
            let out = no_grad(|| f().map(|t| t.item()));
            out
        };
        let lp = eval(orig + h, loss_fn)?;
        let lm = eval(orig - h, loss_fn)?;
        let mut d = param.to_vec();
        d[i] = orig;
        param.set_data(&d);

        let numeric = (lp - lm) / (2.0 * h);
        let err = (analytic[i] - numeric).abs();
        let denom = analytic[i].abs().max(numeric.abs());
        let rel = if denom > ATOL { err / denom } else { 0.0 };
        max_rel = max_rel.max(rel);
        if err > ATOL && rel > rtol {
            pass = false;
        }
    }
    Ok(CheckReport { name: name.to_string(), max_rel_err: max_rel, checked: indices.len(), pass })
}

fn all_idx(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn randn(rng: &mut SplitRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// Deterministic scalar probe: `mean((x + 0.3)^2 * r)` with a fixed random
/// weighting, so gradients depend on position and value.
fn probe(x: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let mut rng = SplitRng::with_stream(seed, 9999);
    let r = Tensor::from_vec(randn(&mut rng, x.numel()), x.shape())?;
    let shifted = ops::add_scalar(x, 0.3);
    Ok(ops::mean(&ops::mul(&ops::mul(&shifted, &shifted)?, &r)?))
}

fn new_param(rng: &mut SplitRng, shape: &[usize]) -> Tensor<f64> {
    Tensor::param(randn(rng, shape.iter().product()), shape).expect("param shape")
}

macro_rules! check {
    ($name:expr, $param:expr, $loss:expr) => {
        check_param($name, &mut $loss, &$param, &all_idx($param.numel()), DEFAULT_H, DEFAULT_RTOL)
    };
}

fn check_matmul() -> Result<CheckReport> {
    let mut rng = SplitRng::with_stream(1, 11);
    let a = new_param(&mut rng, &[3, 4]);
    let b = new_param(&mut rng, &[4, 2]);
    let mut loss = || probe(&ops::matmul(&a, &b)?, 1);
    Ok(CheckReport::merge(
        "matmul",
        vec![check!("a", a, loss)?, check!("b", b, loss)?],
    ))
}

fn check_structural() -> Result<CheckReport> {
    let mut rng = SplitRng::with_stream(2, 11);
    let x = new_param(&mut rng, &[4, 6]);
    let idx = std::rc::Rc::new(vec![3usize, 0, 2, 2, 1]);
    let mut loss = || {
        let t = ops::transpose2(&x)?;
        let back = ops::transpose2(&t)?;
        let cols = ops::slice_cols(&back, 1, 5)?;
        let gathered = ops::gather_rows(&cols, &idx)?;
        let cat = ops::concat0(&[&gathered, &cols])?;
        probe(&cat, 2)
    };
    let r1 = check!("structural", x, loss)?;

    let m = new_param(&mut rng, &[3, 4, 4]);
    let mut loss2 = || {
        let seq = ops::seq_from_map(&m)?;
        let map = ops::map_from_seq(&seq, 4, 4)?;
        probe(&map, 3)
    };
    let r2 = check!("seq_map", m, loss2)?;

    let xb = new_param(&mut rng, &[5, 3]);
    let b = new_param(&mut rng, &[3]);
    let mut loss3 = || probe(&ops::add_row_bias(&xb, &b)?, 4);
    let r3 = check!("bias_x", xb, loss3)?;
    let r4 = check!("bias_b", b, loss3)?;
    Ok(CheckReport::merge("structural", vec![r1, r2, r3, r4]))
}

fn check_conv2d() -> Result<CheckReport> {
    let mut rng = SplitRng::with_stream(3, 11);
    let x = new_param(&mut rng, &[3, 6, 6]);
    let w = new_param(&mut rng, &[4, 3, 3, 3]);
    let b = new_param(&mut rng, &[4]);
    let mut loss = || probe(&nn::conv2d(&x, &w, Some(&b), 1, 1, 1)?, 5);
    let r1 = check!("x", x, loss)?;
    let r2 = check!("w", w, loss)?;
    let r3 = check!("b", b, loss)?;

    let w2 = new_param(&mut rng, &[2, 3, 3, 3]);
    let mut loss_s2 = || probe(&nn::conv2d(&x, &w2, None, 2, 1, 1)?, 6);
    let r4 = check!("w_s2", w2, loss_s2)?;
    let r5 = check!("x_s2", x, loss_s2)?;

    let wg = new_param(&mut rng, &[3, 1, 3, 3]);
    let mut loss_g = || probe(&nn::conv2d(&x, &wg, None, 1, 1, 3)?, 7);
    let r6 = check!("w_depthwise", wg, loss_g)?;

    let w1 = new_param(&mut rng, &[5, 3, 1, 1]);
    let mut loss_1 = || probe(&nn::conv2d(&x, &w1, None, 1, 0, 1)?, 8);
    let r7 = check!("w_1x1", w1, loss_1)?;
    Ok(CheckReport::merge("conv2d", vec![r1, r2, r3, r4, r5, r6, r7]))
}

fn check_conv1d() -> Result<CheckReport> {
    let mut rng = SplitRng::with_stream(4, 11);
    let x = new_param(&mut rng, &[4, 7]);
    let w1 = new_param(&mut rng, &[3, 4, 1]);
    let b1 = new_param(&mut rng, &[3]);
    let mut loss = || probe(&nn::conv1d(&x, &w1, Some(&b1), 1)?, 9);
    let r1 = check!("x_w1", x, loss)?;
    let r2 = check!("w_w1", w1, loss)?;
    let r3 = check!("b_w1", b1, loss)?;

    let w4 = new_param(&mut rng, &[4, 1, 4]);
    let b4 = new_param(&mut rng, &[4]);
    let mut loss4 = || probe(&nn::conv1d(&x, &w4, Some(&b4), 4)?, 10);
    let r4 = check!("x_w4", x, loss4)?;
    let r5 = check!("w_w4", w4, loss4)?;
    Ok(CheckReport::merge("conv1d", vec![r1, r2, r3, r4, r5]))
}

fn check_resample() -> Result<CheckReport> {
    let mut rng = SplitRng::with_stream(5, 11);
    let x = new_param(&mut rng, &[2, 5, 5]);
    let mut pool = || probe(&nn::avg_pool_to(&x, 3, 2)?, 11);
    let r1 = check!("avg_pool", x, pool)?;
    let mut up = || probe(&nn::bilinear_resize(&x, 8, 9)?, 12);
    let r2 = check!("bilinear_up", x, up)?;
    let mut down = || probe(&nn::bilinear_resize(&x, 3, 2)?, 13);
    let r3 = check!("bilinear_down", x, down)?;
    Ok(CheckReport::merge("resample", vec![r1, r2, r3]))
}

fn check_norms() -> Result<CheckReport> {
    let mut rng = SplitRng::with_stream(6, 11);
    let x = new_param(&mut rng, &[3, 10]);
    let gamma = new_param(&mut rng, &[3]);
    let beta = new_param(&mut rng, &[3]);
    let stats = nn::RunningStats::<f64>::new(3);
    let mut train = || probe(&nn::batch_norm(&x, &gamma, &beta, &stats, true, 0.1, 1e-5)?, 14);
    let r1 = check!("bn_train_x", x, train)?;
    let r2 = check!("bn_train_gamma", gamma, train)?;
    let r3 = check!("bn_train_beta", beta, train)?;

    *stats.mean.borrow_mut() = randn(&mut rng, 3);
    *stats.var.borrow_mut() = vec![0.7, 1.3, 2.1];
    let mut eval = || probe(&nn::batch_norm(&x, &gamma, &beta, &stats, false, 0.1, 1e-5)?, 15);
    let r4 = check!("bn_eval_x", x, eval)?;
    let r5 = check!("bn_eval_gamma", gamma, eval)?;

    let xl = new_param(&mut rng, &[6, 5]);
    let lg = new_param(&mut rng, &[5]);
    let lb = new_param(&mut rng, &[5]);
    let mut ln = || probe(&nn::layer_norm(&xl, &lg, &lb, 1e-5)?, 16);
    let r6 = check!("ln_x", xl, ln)?;
    let r7 = check!("ln_gamma", lg, ln)?;
    let r8 = check!("ln_beta", lb, ln)?;
    Ok(CheckReport::merge("norms", vec![r1, r2, r3, r4, r5, r6, r7, r8]))
}

fn check_activations() -> Result<CheckReport> {
    let mut rng = SplitRng::with_stream(7, 11);
    // Keep relu inputs away from the kink; central differences straddle it.
    let vals: Vec<f64> =
        randn(&mut rng, 24).into_iter().map(|v| v + 0.25 * v.signum()).collect();
    let x = Tensor::param(vals, &[24]).unwrap();
    let mut relu = || probe(&nn::relu(&x), 17);
    let r1 = check!("relu", x, relu)?;
    let mut silu = || probe(&nn::silu(&x), 18);
    let r2 = check!("silu", x, silu)?;
    let mut gelu = || probe(&nn::gelu(&x), 19);
    let r3 = check!("gelu", x, gelu)?;
    let mut softplus = || probe(&nn::softplus(&x), 20);
    let r4 = check!("softplus", x, softplus)?;

    let xs = new_param(&mut rng, &[5, 6]);
    let mut softmax = || probe(&nn::softmax_dim0(&xs)?, 21);
    let r5 = check!("softmax", xs, softmax)?;

    let xd = new_param(&mut rng, &[30]);
    let mut drop = || {
        // Same stream every evaluation: the mask is part of the function.
        let mut drng = SplitRng::with_stream(123, 456);
        probe(&nn::dropout(&xd, 0.3, true, &mut drng)?, 22)
    };
    let r6 = check!("dropout", xd, drop)?;
    Ok(CheckReport::merge("activations", vec![r1, r2, r3, r4, r5, r6]))
}

fn check_scan() -> Result<CheckReport> {
    use crate::ssm::{selective_scan, DiscretizationMode, S6Params, ScanKind};
    let mut parts = Vec::new();
    let combos = [
        (DiscretizationMode::Zoh, ScanKind::Sequential, 64, "zoh_seq"),
        (DiscretizationMode::Zoh, ScanKind::Parallel, 2, "zoh_par"),
        (DiscretizationMode::Euler, ScanKind::Sequential, 64, "euler_seq"),
    ];
    for (mode, kind, chunk, tag) in combos {
        let mut rng = SplitRng::with_stream(8, 11);
        let (l, d, s) = (5usize, 3usize, 2usize);
        let p = S6Params::<f64>::init(d, s, &mut rng);
        let u = new_param(&mut rng, &[l, d]);
        let h0 = Tensor::from_vec(randn(&mut rng, d * s), &[d, s])?;
        let mut loss = || {
            let (y, _) = selective_scan(&u, &p, Some(&h0), mode, kind, chunk)?;
            probe(&y, 23)
        };
        parts.push(check!(&format!("{tag}_u"), u, loss)?);
        for (pname, t) in p.tensors() {
            let t = t.clone();
            parts.push(check!(&format!("{tag}_{pname}"), t, loss)?);
        }
    }
    Ok(CheckReport::merge("selective_scan", parts))
}

fn check_cross_scan() -> Result<CheckReport> {
    use crate::ssm::cross::{cross_scan_expand, cross_scan_merge};
    let mut rng = SplitRng::with_stream(9, 11);
    let x = new_param(&mut rng, &[2, 3, 3]);
    let mut loss = || {
        let routes = cross_scan_expand(&x)?;
        // Scale routes unevenly so a wrong inverse permutation cannot hide
        // behind the symmetry of the sum.
        let scaled = [
            ops::scale(&routes[0], 0.5),
            ops::scale(&routes[1], 1.5),
            ops::scale(&routes[2], 2.5),
            ops::scale(&routes[3], 3.5),
        ];
        probe(&cross_scan_merge(&scaled, 3)?, 24)
    };
    check!("cross_scan", x, loss)
}

fn check_mamba() -> Result<CheckReport> {
    use crate::mamba::{MambaBlock, MambaConfig, ScanMode};
    let mut parts = Vec::new();
    let cases = [
        (MambaConfig::new(6, 1, 2, ScanMode::Cross2d { n: 3 }), 9usize, "cross2d"),
        (MambaConfig::new(4, 2, 2, ScanMode::Seq1d), 5usize, "seq1d"),
    ];
    for (cfg, l, tag) in cases {
        let mut rng = SplitRng::with_stream(10, 11);
        let blk = MambaBlock::<f64>::new(cfg, &mut rng)?;
        // w_out starts at zero, which would block gradient flow into
        // everything upstream of it; open it for the check.
        blk.w_out.set_data(&randn(&mut rng, blk.w_out.numel()));
        let x = new_param(&mut rng, &[l, cfg.d_model]);
        let mut loss = || probe(&blk.forward(&x)?, 25);
        parts.push(check!(&format!("{tag}_x"), x, loss)?);
        let mut named = Vec::new();
        blk.visit_params(tag, &mut |name, t| named.push((name, t.clone())));
        for (name, t) in named {
            parts.push(check!(&name, t, loss)?);
        }
    }
    Ok(CheckReport::merge("mamba_block", parts))
}

fn check_decoder() -> Result<CheckReport> {
    use crate::decoder::{Dspp, FeatureMap, FuseLowLevel, FuseMode, Pfm, SegHead};
    let mut rng = SplitRng::with_stream(11, 11);
    let (c, n, d_dec) = (4usize, 4usize, 4usize);

    let dspp = Dspp::<f64>::new(c, n, &mut rng)?;
    let pfm = Pfm::<f64>::new(dspp.out_channels(), n, d_dec, 2, true, &mut rng)?;
    pfm.mamba.w_out.set_data(&randn(&mut rng, pfm.mamba.w_out.numel()));
    // Shift the post-norm ReLU inputs off the kink so central differences
    // stay one-sided-free.
    pfm.ffn.reduce.beta.set_data(&vec![0.3; d_dec]);
    let x = new_param(&mut rng, &[c, n, n]);
    let mut loss = || {
        let mut drng = SplitRng::with_stream(77, 78);
        let ms = dspp.forward(&x)?;
        probe(&pfm.forward(&ms, true, &mut drng)?, 26)
    };
    let mut parts = vec![check!("x", x, loss)?];
    let mut named = Vec::new();
    dspp.visit_params("dspp", &mut |nm, t| named.push((nm, t.clone())));
    pfm.visit_params("pfm", &mut |nm, t| named.push((nm, t.clone())));
    for (name, t) in named {
        parts.push(check!(&name, t, loss)?);
    }

    let fuse = FuseLowLevel::<f64>::new(3, d_dec, FuseMode::Sum, &mut rng)?;
    fuse.refine.beta.set_data(&vec![0.3; d_dec]);
    let head = SegHead::<f64>::new(d_dec, 3, &mut rng)?;
    let xd = new_param(&mut rng, &[d_dec, 2, 2]);
    let xl = new_param(&mut rng, &[3, 4, 4]);
    let mut loss2 = || {
        let dec = FeatureMap { map: xd.clone(), stride: 16 };
        let low = FeatureMap { map: xl.clone(), stride: 4 };
        let fused = fuse.forward(&dec, &low, true)?;
        probe(&head.forward(&fused.map, 8, 8)?, 27)
    };
    parts.push(check!("fuse_dec_in", xd, loss2)?);
    parts.push(check!("fuse_low_in", xl, loss2)?);
    let mut named2 = Vec::new();
    fuse.visit_params("fuse", &mut |nm, t| named2.push((nm, t.clone())));
    head.visit_params("head", &mut |nm, t| named2.push((nm, t.clone())));
    for (name, t) in named2 {
        parts.push(check!(&name, t, loss2)?);
    }
    Ok(CheckReport::merge("decoder", parts))
}

fn check_encoder() -> Result<CheckReport> {
    use crate::encoder::ResBlock;
    let mut parts = Vec::new();
    for (cin, cout, stride, hw, tag) in [(3usize, 4usize, 2usize, 6usize, "proj"), (4, 4, 1, 4, "ident")] {
        let mut rng = SplitRng::with_stream(12, 11);
        let blk = ResBlock::<f64>::new(cin, cout, stride, &mut rng)?;
        blk.nudge_norm_shifts();
        let x = new_param(&mut rng, &[cin, hw, hw]);
        let mut loss = || probe(&blk.forward(&x, true)?, 28);
        parts.push(check!(&format!("{tag}_x"), x, loss)?);
        let mut named = Vec::new();
        blk.visit_params(tag, &mut |nm, t| named.push((nm, t.clone())));
        for (name, t) in named {
            parts.push(check!(&name, t, loss)?);
        }
    }
    Ok(CheckReport::merge("encoder_block", parts))
}

fn check_losses() -> Result<CheckReport> {
    use crate::loss::{ce_loss, dice_loss, joint_loss};
    let mut rng = SplitRng::with_stream(13, 11);
    let (k, n) = (3usize, 8usize);
    let labels: Vec<u32> = (0..n).map(|i| if i == 5 { 255 } else { (i % k) as u32 }).collect();

    let logits = new_param(&mut rng, &[k, 2, 4]);
    let lb = labels.clone();
    let mut ce = || ce_loss(&logits, &lb, Some(255));
    let r1 = check!("ce_logits", logits, ce)?;

    let raw = new_param(&mut rng, &[k, n]);
    let lb2 = labels.clone();
    let mut dice = || {
        let probs = nn::softmax_dim0(&raw)?;
        dice_loss(&probs, &lb2, 1.0, Some(255))
    };
    let r2 = check!("dice_probs", raw, dice)?;

    let lb3 = labels;
    let mut joint = || joint_loss(&logits, &lb3, Some(255)).map(|(t, _)| t);
    let r3 = check!("joint_logits", logits, joint)?;
    Ok(CheckReport::merge("losses", vec![r1, r2, r3]))
}

/// End-to-end check: the full desk model at 32x32 under the joint training
/// loss, spot-checking entries from one tensor per parameter group. The
/// per-op checks above cover every backward in isolation; this one makes
/// sure the composition is wired correctly too.
fn check_model() -> Result<CheckReport> {
    use crate::data::synth::synth_sample;
    use crate::loss::joint_loss;
    use crate::model::{Model, ModelConfig};

    let cfg = ModelConfig { input_size: 32, ..ModelConfig::desk(3) };
    let model = Model::<f64>::init(cfg, 17)?;
    // A zero output projection in the mixer would hide upstream parameters
    // from the loss; give it signal before differentiating through it.
    let mut wrng = SplitRng::with_stream(17, 94);
    let w = &model.pfm.mamba.w_out;
    w.set_data(&(0..w.numel()).map(|_| wrng.uniform(-0.05, 0.05)).collect::<Vec<f64>>());

    let (img, msk) = synth_sample(17, 0, 32, 3);
    let image = img.to_tensor::<f64>();
    let mut labels = msk.px.clone();
    labels[0] = 255; // exercise the ignore path end to end

    // Largest tensor per top-level group (encoder, dspp, pfm, fuse, head),
    // four spread entries each. Eval-mode forwards keep the closure
    // deterministic: batch norm reads frozen running stats and dropout is a
    // no-op, while gamma/beta/weights still sit on the tape.
    let params = model.named_params();
    let mut picks: Vec<(String, String, Tensor<f64>)> = Vec::new();
    for (name, t) in &params {
        let group = name.split('.').next().unwrap_or("").to_string();
        match picks.iter_mut().find(|(g, _, _)| *g == group) {
            Some(slot) if t.numel() > slot.2.numel() => {
                slot.1 = name.clone();
                slot.2 = t.clone();
            }
            Some(_) => {}
            None => picks.push((group, name.clone(), t.clone())),
        }
    }

    let mut reports = Vec::new();
    for (_, name, t) in &picks {
        let n = t.numel();
        let mut idx = vec![0, n / 3, 2 * n / 3, n - 1];
        idx.dedup();
        let mut loss = || {
            let mut rng = SplitRng::with_stream(0, 0);
            let logits = model.forward(&image, false, &mut rng)?;
            joint_loss(&logits, &labels, Some(255)).map(|(t, _)| t)
        };
        reports.push(check_param(name, &mut loss, t, &idx, DEFAULT_H, DEFAULT_RTOL)?);
    }
    Ok(CheckReport::merge("model", reports))
}

/// Every registered gradient check, optionally filtered by substring.
/// Extended as higher-level modules come online.
pub fn run_all(filter: Option<&str>) -> Result<Vec<CheckReport>> {
    type CheckFn = fn() -> Result<CheckReport>;
    let checks: &[(&str, CheckFn)] = &[
        ("matmul", check_matmul as CheckFn),
        ("structural", check_structural),
        ("conv2d", check_conv2d),
        ("conv1d", check_conv1d),
        ("resample", check_resample),
        ("norms", check_norms),
        ("activations", check_activations),
        ("scan", check_scan),
        ("cross_scan", check_cross_scan),
        ("mamba", check_mamba),
        ("decoder", check_decoder),
        ("encoder", check_encoder),
        ("losses", check_losses),
        ("model", check_model),
    ];
    let mut out = Vec::new();
    for (name, f) in checks {
        if let Some(pat) = filter {
            if !name.contains(pat) {
                continue;
            }
        }
        out.push(f()?);
    }
    Ok(out)
}
