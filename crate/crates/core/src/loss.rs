//! Segmentation losses: pixel cross-entropy plus class-wise soft Dice.
//!
//! Both take logits shaped `[K, ...]` with classes on the leading dim and an
//! integer label per remaining element. Pixels carrying the ignore label drop
//! out of every sum. The joint loss is the plain sum of the two terms; Dice
//! exists to counter class imbalance that per-pixel CE ignores.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{nn, ops, result_of, Tensor};

pub const DICE_SMOOTH: f64 = 1.0;

/// Numeric copies of the last computed loss terms, for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub dice: f64,
    pub total: f64,
}

fn class_layout<T: Scalar>(logits: &Tensor<T>, labels: &[u32]) -> Result<(usize, usize)> {
    let k = *logits
        .shape()
        .first()
        .ok_or_else(|| Error::shape("loss", "logits need a class dim"))?;
    let n = logits.numel() / k.max(1);
    if k < 2 || n == 0 {
        return Err(Error::shape("loss", format!("bad logits shape {:?}", logits.shape())));
    }
    if labels.len() != n {
        return Err(Error::shape(
            "loss",
            format!("{} labels for {} pixels", labels.len(), n),
        ));
    }
    Ok((k, n))
}

fn validate_labels(labels: &[u32], k: usize, ignore: Option<u32>) -> Result<()> {
    for &y in labels {
        if Some(y) == ignore {
            continue;
        }
        if y as usize >= k {
            return Err(Error::Data(format!("label {y} out of range for {k} classes")));
        }
    }
    Ok(())
}

/// Mean negative log-likelihood under a per-pixel softmax.
///
/// Averages over non-ignored pixels only; a tile with nothing labeled
/// contributes an exact zero instead of 0/0.
pub fn ce_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u32],
    ignore: Option<u32>,
) -> Result<Tensor<T>> {
    let (k, n) = class_layout(logits, labels)?;
    validate_labels(labels, k, ignore)?;

    let data = logits.data();
    // Row-major [K, N]: class stride is n.
    let mut probs = vec![T::zero(); k * n];
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (px, &y) in labels.iter().enumerate() {
        if Some(y) == ignore {
            continue;
        }
        let mut m = f64::NEG_INFINITY;
        for c in 0..k {
            m = m.max(data[c * n + px].to_f64c());
        }
        let mut z = 0.0f64;
        for c in 0..k {
            z += (data[c * n + px].to_f64c() - m).exp();
        }
        for c in 0..k {
            probs[c * n + px] = T::from_f64c((data[c * n + px].to_f64c() - m).exp() / z);
        }
        total += m + z.ln() - data[y as usize * n + px].to_f64c();
        count += 1;
    }
    drop(data);

    let denom = count.max(1) as f64;
    let value = T::from_f64c(total / denom);
    let labels: Vec<u32> = labels.to_vec();
    let parent = logits.clone();
    Ok(result_of(vec![value], vec![1], &[logits], move |g, sink| {
        let scale = g[0] * T::from_f64c(1.0 / denom);
        let mut gx = vec![T::zero(); k * n];
        for (px, &y) in labels.iter().enumerate() {
            if Some(y) == ignore {
                continue;
            }
            for c in 0..k {
                let onehot = if c == y as usize { T::one() } else { T::zero() };
                gx[c * n + px] = scale * (probs[c * n + px] - onehot);
            }
        }
        sink.add(&parent, gx);
    }))
}

/// Class-wise soft Dice loss over probabilities (not logits).
///
/// `1 - mean_k (2*I_k + smooth) / (U_k + smooth)` with `I_k` the overlap of
/// predicted mass and the one-hot target and `U_k` the sum of both masses.
/// Bounded in [0, 1] for any distribution input.
pub fn dice_loss<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[u32],
    smooth: f64,
    ignore: Option<u32>,
) -> Result<Tensor<T>> {
    let (k, n) = class_layout(probs, labels)?;
    validate_labels(labels, k, ignore)?;

    let p = probs.data();
    let mut inter = vec![0.0f64; k];
    let mut mass = vec![0.0f64; k];
    let mut truth = vec![0.0f64; k];
    for (px, &y) in labels.iter().enumerate() {
        if Some(y) == ignore {
            continue;
        }
        truth[y as usize] += 1.0;
        for c in 0..k {
            let v = p[c * n + px].to_f64c();
            mass[c] += v;
            if c == y as usize {
                inter[c] += v;
            }
        }
    }
    drop(p);

    let mut loss = 1.0f64;
    let mut denoms = vec![0.0f64; k];
    for c in 0..k {
        denoms[c] = mass[c] + truth[c] + smooth;
        loss -= (2.0 * inter[c] + smooth) / denoms[c] / k as f64;
    }

    let labels: Vec<u32> = labels.to_vec();
    let parent = probs.clone();
    let value = T::from_f64c(loss);
    Ok(result_of(vec![value], vec![1], &[probs], move |g, sink| {
        // d/dp[c,px] of -(1/K)(2I_c+s)/(U_c+s):
        //   overlap term only when the pixel belongs to class c.
        let mut gx = vec![T::zero(); k * n];
        let g0 = g[0].to_f64c();
        for (px, &y) in labels.iter().enumerate() {
            if Some(y) == ignore {
                continue;
            }
            for c in 0..k {
                let num = 2.0 * inter[c] + smooth;
                let two_y = if c == y as usize { 2.0 } else { 0.0 };
                let d = -(two_y * denoms[c] - num) / (denoms[c] * denoms[c]) / k as f64;
                gx[c * n + px] = T::from_f64c(g0 * d);
            }
        }
        sink.add(&parent, gx);
    }))
}

/// The printed per-pixel ratio form, kept for audit only: terms with
/// `p + y = 0` are skipped because the ratio is undefined there.
pub fn dice_loss_per_pixel<T: Scalar>(probs: &Tensor<T>, labels: &[u32]) -> Result<f64> {
    let (k, n) = class_layout(probs, labels)?;
    validate_labels(labels, k, None)?;
    let p = probs.data();
    let mut acc = 0.0f64;
    for (px, &y) in labels.iter().enumerate() {
        for c in 0..k {
            let prob = p[c * n + px].to_f64c();
            let t = if c == y as usize { 1.0 } else { 0.0 };
            if prob + t > 0.0 {
                acc += t * prob / (prob + t);
            }
        }
    }
    Ok(1.0 - 2.0 * acc / n as f64)
}

/// Differentiable CE + Dice with a numeric breakdown for the log line.
pub fn joint_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u32],
    ignore: Option<u32>,
) -> Result<(Tensor<T>, LossBreakdown)> {
    let (k, n) = class_layout(logits, labels)?;
    let ce = ce_loss(logits, labels, ignore)?;
    // Softmax over the class dim: view [K, N] columns as distributions.
    let flat = ops::reshape(logits, &[k, n])?;
    let probs = nn::softmax_dim0(&flat)?;
    let dice = dice_loss(&probs, labels, DICE_SMOOTH, ignore)?;
    let total = ops::add(&ce, &dice)?;
    let breakdown = LossBreakdown {
        ce: ce.item().to_f64c(),
        dice: dice.item().to_f64c(),
        total: total.item().to_f64c(),
    };
    Ok((total, breakdown))
}
