//! Inference on raw cases, restoring the native geometry.

use ndarray::{Array3, Axis};

use crate::cascade::{CascadeModel, ForwardOptions, CLASS_LABELS};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::preprocess::{preprocess_case, PreprocessParams};
use crate::volume::{resample_nearest, MultiModalCase};

/// Per-voxel argmax over the class axis of `[classes, x, y, z]` probabilities,
/// mapped to label values. Ties go to the lower class.
pub fn argmax_labels(probs: ndarray::ArrayView4<'_, f32>) -> Array3<u8> {
    let (_, x, y, z) = probs.dim();
    Array3::from_shape_fn((x, y, z), |(i, j, k)| {
        let mut best = 0;
        for c in 1..probs.shape()[0] {
            if probs[[c, i, j, k]] > probs[[best, i, j, k]] {
                best = c;
            }
        }
        CLASS_LABELS[best]
    })
}

/// Preprocess, run the cascade, take the finest stage's argmax and bring the
/// labels back to the case's own grid (nearest neighbour).
pub fn predict(model: &CascadeModel<f32>, params: &PreprocessParams, case: &MultiModalCase) -> Result<Array3<u8>> {
    if params.target_grid != model.grid {
        return Err(Error::Checkpoint(format!(
            "preprocessing target_grid {:?} differs from the model grid {:?}",
            params.target_grid, model.grid
        )));
    }
    let pre = preprocess_case(case, params)?;
    let input = pre.channels.insert_axis(Axis(0)).into_dyn();
    let outputs = model.forward(&input, &ForwardOptions::default())?;
    let finest = outputs.last().expect("at least one stage");
    let probs = finest
        .probs
        .index_axis(Axis(0), 0)
        .into_dimensionality::<ndarray::Ix4>()
        .expect("stage probabilities are 5-D");
    let labels = argmax_labels(probs);
    resample_nearest(labels.view(), case.shape())
}

pub fn predict_with_checkpoint(checkpoint: &Checkpoint, case: &MultiModalCase) -> Result<Array3<u8>> {
    predict(&checkpoint.model, &checkpoint.header.preprocess, case)
}
