//! Intensity normalisation: z-score over brain voxels, outlier clamp,
//! shift to a non-negative range with zeroed background, then resampling
//! onto the training grid.

use ndarray::{Array3, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{compute_brain_mask, resample_case, BrainMask, MultiModalCase};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessParams {
    pub clamp_lo: f32,
    pub clamp_hi: f32,
    pub shift: f32,
    pub target_grid: [usize; 3],
}

impl Default for PreprocessParams {
    fn default() -> Self {
        PreprocessParams {
            clamp_lo: -5.0,
            clamp_hi: 5.0,
            shift: 5.0,
            target_grid: [128; 3],
        }
    }
}

impl PreprocessParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.clamp_lo < self.clamp_hi) {
            return Err(Error::Config(format!(
                "clamp_lo ({}) must be below clamp_hi ({})",
                self.clamp_lo, self.clamp_hi
            )));
        }
        if self.shift != -self.clamp_lo {
            return Err(Error::Config(format!(
                "shift ({}) must equal -clamp_lo ({}) so that the output minimum is 0",
                self.shift, -self.clamp_lo
            )));
        }
        if self.target_grid.contains(&0) {
            return Err(Error::Config(format!(
                "target_grid {:?} must be positive",
                self.target_grid
            )));
        }
        Ok(())
    }
}

/// Mean and population standard deviation over the masked voxels (two passes, f64).
pub fn masked_stats(channel: ArrayView3<'_, f32>, mask: &BrainMask) -> (f64, f64, usize) {
    let mut n = 0usize;
    let mut sum = 0.0f64;
    Zip::from(&channel).and(mask.view()).for_each(|&v, &m| {
        if m {
            n += 1;
            sum += v as f64;
        }
    });
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = sum / n as f64;
    let mut sq = 0.0f64;
    Zip::from(&channel).and(mask.view()).for_each(|&v, &m| {
        if m {
            let d = v as f64 - mean;
            sq += d * d;
        }
    });
    (mean, (sq / n as f64).sqrt(), n)
}

/// Standardises mask voxels to zero mean and unit variance; others are copied.
pub fn zscore_channel(
    channel: ArrayView3<'_, f32>,
    mask: &BrainMask,
    channel_index: usize,
) -> Result<Array3<f32>> {
    let (mean, std, n) = masked_stats(channel, mask);
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    if !(std > 0.0) {
        return Err(Error::ConstantChannel {
            channel: channel_index,
        });
    }
    let mut out = channel.to_owned();
    Zip::from(&mut out).and(mask.view()).for_each(|v, &m| {
        if m {
            *v = ((*v as f64 - mean) / std) as f32;
        }
    });
    Ok(out)
}

pub fn clamp_channel(channel: ArrayView3<'_, f32>, lo: f32, hi: f32) -> Result<Array3<f32>> {
    if !(lo < hi) {
        return Err(Error::Config(format!("clamp bounds [{lo}, {hi}] are empty")));
    }
    Ok(channel.mapv(|v| v.clamp(lo, hi)))
}

pub fn shift_and_zero_background(
    channel: ArrayView3<'_, f32>,
    mask: &BrainMask,
    shift: f32,
) -> Array3<f32> {
    let mut out = channel.to_owned();
    Zip::from(&mut out)
        .and(mask.view())
        .for_each(|v, &m| *v = if m { *v + shift } else { 0.0 });
    out
}

/// Normalises every channel at native resolution. Returns the mask it used.
pub fn normalize_case(
    case: &MultiModalCase,
    params: &PreprocessParams,
) -> Result<(MultiModalCase, BrainMask)> {
    params.validate()?;
    let mask = compute_brain_mask(case)?;
    let mut out = case.clone();
    for (index, mut channel) in out.channels.axis_iter_mut(Axis(0)).enumerate() {
        let z = zscore_channel(channel.view(), &mask, index)?;
        let c = clamp_channel(z.view(), params.clamp_lo, params.clamp_hi)?;
        let s = shift_and_zero_background(c.view(), &mask, params.shift);
        channel.assign(&s);
    }
    Ok((out, mask))
}

/// Full chain: mask, z-score, clamp, shift/zero, resample to `target_grid`.
pub fn preprocess_case(case: &MultiModalCase, params: &PreprocessParams) -> Result<MultiModalCase> {
    let (normalized, _) = normalize_case(case, params)?;
    resample_case(&normalized, params.target_grid)
}
