//! Loss and schedule arithmetic for two-phase fine-tuning.
//!
//! The pieces here are deliberately small and exact: a polynomial
//! learning-rate decay, deep-supervision weights that halve per resolution
//! level, soft Dice plus cross-entropy, nearest-neighbor label
//! downsampling for supervising coarse heads, and the two-phase loss
//! composition in which the final segmentation head only joins the total
//! after the warm-up phase.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, LabelVolume, ScalarVolume};

/// Exponent of the polynomial decay schedule.
pub const POLY_EXPONENT: f64 = 0.9;

/// Smoothing term in the soft Dice denominator and numerator.
pub const DICE_EPSILON: f64 = 1e-5;

/// Probabilities are clamped here before the cross-entropy log.
pub const LOG_CLAMP: f64 = 1e-12;

/// Epochs in the first training phase, during which only the
/// deep-supervision losses are composed; the final head joins at this
/// epoch.
pub const PHASE_ONE_EPOCHS: u32 = 200;

/// Polynomial learning-rate decay configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub init_lr: f64,
    pub max_epoch: u32,
}

impl LrSchedule {
    pub fn new(init_lr: f64, max_epoch: u32) -> Result<Self> {
        if !init_lr.is_finite() || init_lr <= 0.0 {
            return Err(Error::validation(format!(
                "initial learning rate must be finite and positive, got {init_lr}"
            )));
        }
        if max_epoch == 0 {
            return Err(Error::validation(
                "max_epoch must be positive".to_string(),
            ));
        }
        Ok(Self { init_lr, max_epoch })
    }
}

/// Learning rate at `epoch`: `init_lr * (1 - epoch / max_epoch)^0.9`.
///
/// Defined for `0 <= epoch <= max_epoch`; the endpoints evaluate exactly to
/// `init_lr` and `0`.
pub fn poly_lr(schedule: &LrSchedule, epoch: u32) -> Result<f64> {
    if epoch > schedule.max_epoch {
        return Err(Error::range(format!(
            "epoch {epoch} past the end of the schedule ({} epochs)",
            schedule.max_epoch
        )));
    }
    let frac = 1.0 - epoch as f64 / schedule.max_epoch as f64;
    Ok(schedule.init_lr * frac.powf(POLY_EXPONENT))
}

/// Deep-supervision weights for `n` resolution levels, highest resolution
/// first: `w_i` proportional to `2^-(i-1)`, normalized to sum to 1. Each
/// weight is exactly twice its successor.
pub fn ds_weights(n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::validation(
            "deep supervision needs at least one level".to_string(),
        ));
    }
    let denom = (2f64).powi(n as i32) - 1.0;
    Ok((1..=n)
        .map(|i| (2f64).powi((n - i) as i32) / denom)
        .collect())
}

/// Hard Dice overlap of two masks: `2|A intersect B| / (|A| + |B|)`. Two
/// empty masks score 1, one empty mask scores 0.
pub fn dice_score(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::validation(format!(
            "mask dims differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

fn check_probs_target(probs: &ScalarVolume, target: &LabelVolume) -> Result<()> {
    if probs.dims() != target.dims() {
        return Err(Error::validation(format!(
            "probability dims {:?} do not match target dims {:?}",
            probs.dims(),
            target.dims()
        )));
    }
    if probs.channels() != target.num_classes() {
        return Err(Error::validation(format!(
            "{} probability channels for {} target classes",
            probs.channels(),
            target.num_classes()
        )));
    }
    let n = probs.num_voxels();
    let k = probs.channels();
    let values = probs.values();
    for v in 0..n {
        let mut sum = 0.0;
        for c in 0..k {
            sum += values[c * n + v];
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::validation(format!(
                "per-voxel probabilities must sum to 1, found {sum}"
            )));
        }
    }
    Ok(())
}

/// Soft Dice loss: `1 - mean_c (2 sum(p*g) + eps) / (sum(p) + sum(g) + eps)`
/// with the mean over all `K` channels and `g` the one-hot target.
pub fn soft_dice_loss(probs: &ScalarVolume, target: &LabelVolume) -> Result<f64> {
    check_probs_target(probs, target)?;
    let n = probs.num_voxels();
    let k = probs.channels();
    let values = probs.values();
    let labels = target.labels();
    let mut mean = 0.0;
    for c in 0..k {
        let chan = &values[c * n..(c + 1) * n];
        let mut overlap = 0.0;
        let mut p_sum = 0.0;
        let mut g_sum = 0.0;
        for (v, &p) in chan.iter().enumerate() {
            p_sum += p;
            if labels[v] as usize == c {
                overlap += p;
                g_sum += 1.0;
            }
        }
        mean += (2.0 * overlap + DICE_EPSILON) / (p_sum + g_sum + DICE_EPSILON);
    }
    Ok(1.0 - mean / k as f64)
}

/// Mean cross-entropy: `-log p[target]` averaged over voxels, with the
/// probability clamped at [`LOG_CLAMP`] before the log.
pub fn cross_entropy_loss(probs: &ScalarVolume, target: &LabelVolume) -> Result<f64> {
    check_probs_target(probs, target)?;
    let n = probs.num_voxels();
    let values = probs.values();
    let mut sum = 0.0;
    for (v, &label) in target.labels().iter().enumerate() {
        let p = values[label as usize * n + v].max(LOG_CLAMP);
        sum -= p.ln();
    }
    Ok(sum / n as f64)
}

/// Soft Dice plus mean cross-entropy, as a plain sum.
pub fn dice_ce_loss(probs: &ScalarVolume, target: &LabelVolume) -> Result<f64> {
    Ok(soft_dice_loss(probs, target)? + cross_entropy_loss(probs, target)?)
}

/// Downsamples a label volume by integer factors per axis, picking the
/// block-origin voxel of each block. Dims must divide evenly; spacing
/// scales by the factors so physical extent is preserved.
pub fn downsample_labels(target: &LabelVolume, factors: [usize; 3]) -> Result<LabelVolume> {
    if factors.iter().any(|&f| f == 0) {
        return Err(Error::validation(format!(
            "downsampling factors must be positive, got {factors:?}"
        )));
    }
    let dims = target.dims();
    for a in 0..3 {
        if dims[a] % factors[a] != 0 {
            return Err(Error::validation(format!(
                "dims {dims:?} not divisible by factors {factors:?}"
            )));
        }
    }
    let out_dims = [
        dims[0] / factors[0],
        dims[1] / factors[1],
        dims[2] / factors[2],
    ];
    let spacing = target.spacing();
    let out_spacing = [
        spacing[0] * factors[0] as f64,
        spacing[1] * factors[1] as f64,
        spacing[2] * factors[2] as f64,
    ];
    let mut labels = Vec::with_capacity(out_dims[0] * out_dims[1] * out_dims[2]);
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                labels.push(target.label_at(x * factors[0], y * factors[1], z * factors[2]));
            }
        }
    }
    LabelVolume::new(out_dims, out_spacing, target.num_classes(), labels)
}

/// One supervised resolution level in a [`LossReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossLevel {
    /// Resolution divisor relative to the finest level: level `i` carries
    /// `2^(i-1)`, so level 1 is full resolution and each level halves it.
    pub resolution_divisor: u64,
    pub weight: f64,
    pub loss: f64,
}

/// Composed training loss for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: u32,
    /// 1 during warm-up, 2 once the final head is included.
    pub phase: u8,
    pub per_level: Vec<LossLevel>,
    pub final_loss: f64,
    pub final_included: bool,
    pub total: f64,
}

/// Combines deep-supervision losses (highest resolution first) with the
/// final-head loss. During the first [`PHASE_ONE_EPOCHS`] epochs the total
/// is the weighted deep-supervision sum alone; from then on the final-head
/// loss is added.
pub fn compose_loss(epoch: u32, ds_losses: &[f64], final_loss: f64) -> Result<LossReport> {
    if ds_losses.is_empty() {
        return Err(Error::validation(
            "deep supervision needs at least one loss".to_string(),
        ));
    }
    if ds_losses.iter().any(|l| !l.is_finite()) || !final_loss.is_finite() {
        return Err(Error::validation("losses must be finite".to_string()));
    }
    let weights = ds_weights(ds_losses.len())?;
    let per_level: Vec<LossLevel> = weights
        .iter()
        .zip(ds_losses)
        .enumerate()
        .map(|(i, (&weight, &loss))| LossLevel {
            resolution_divisor: 1u64 << i,
            weight,
            loss,
        })
        .collect();
    let mut total: f64 = per_level.iter().map(|l| l.weight * l.loss).sum();
    let final_included = epoch >= PHASE_ONE_EPOCHS;
    if final_included {
        total += final_loss;
    }
    Ok(LossReport {
        epoch,
        phase: if final_included { 2 } else { 1 },
        per_level,
        final_loss,
        final_included,
        total,
    })
}
