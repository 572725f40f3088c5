//! Mean soft-Dice loss over classes (or over tumour regions).

use ndarray::{Array4, ArrayD, ArrayView3, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, Real, Var};
use crate::cascade::CLASS_LABELS;
use crate::error::{Error, Result};
use crate::nn::Graph;

/// Added to every denominator (and half of it, times the numerator factor,
/// to every numerator so that a perfect prediction scores exactly).
pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceVariant {
    /// `sum(p*g) / sum(p+g)`: a perfect prediction scores 0.5 per class.
    Half,
    /// `2 sum(p*g) / sum(p+g)`.
    #[default]
    Standard,
}

impl DiceVariant {
    pub fn numerator_factor(self) -> f64 {
        match self {
            DiceVariant::Half => 1.0,
            DiceVariant::Standard => 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpace {
    /// The four raw classes, background included.
    #[default]
    Classes,
    /// Whole tumour, tumour core and enhancing tumour.
    Regions,
}

/// Rows: WT, TC, ET. Columns follow [`CLASS_LABELS`].
pub const REGION_MIX: [[f64; 4]; 3] = [[0.0, 1.0, 1.0, 1.0], [0.0, 1.0, 0.0, 1.0], [0.0, 0.0, 0.0, 1.0]];

/// `[classes, x, y, z]` indicator volumes in [`CLASS_LABELS`] order.
pub fn one_hot<T: Real>(labels: ArrayView3<'_, u8>) -> Result<Array4<T>> {
    let (x, y, z) = labels.dim();
    let mut out = Array4::zeros((CLASS_LABELS.len(), x, y, z));
    for ((i, j, k), &l) in labels.indexed_iter() {
        let c = CLASS_LABELS
            .iter()
            .position(|&v| v == l)
            .ok_or(Error::LabelValue(l as i64))?;
        out[[c, i, j, k]] = T::one();
    }
    Ok(out)
}

/// Maps a `[batch, 4, ...]` class tensor to `[batch, 3, ...]` region tensor.
pub fn to_regions<T: Real>(x: ArrayViewD<'_, T>) -> ArrayD<T> {
    let shape = x.shape();
    let mut out_shape = shape.to_vec();
    out_shape[1] = REGION_MIX.len();
    let mut out = ArrayD::zeros(IxDyn(&out_shape));
    for n in 0..shape[0] {
        for (r, row) in REGION_MIX.iter().enumerate() {
            for (c, &w) in row.iter().enumerate() {
                if w != 0.0 {
                    let src = x.index_axis(ndarray::Axis(0), n).index_axis(ndarray::Axis(0), c).to_owned();
                    let mut dst = out.index_axis_mut(ndarray::Axis(0), n);
                    let mut dst = dst.index_axis_mut(ndarray::Axis(0), r);
                    dst.scaled_add(T::of(w), &src);
                }
            }
        }
    }
    out
}

/// Value-only mean Dice loss over `[batch, channels, ...]` tensors.
pub fn mean_dice_loss<T: Real>(
    probs: ArrayViewD<'_, T>,
    target: ArrayViewD<'_, T>,
    variant: DiceVariant,
) -> Result<T> {
    if probs.shape() != target.shape() || probs.ndim() < 3 {
        return Err(Error::Shape(format!(
            "dice loss: prediction {:?} and target {:?} must match and have batch and channel axes",
            probs.shape(),
            target.shape()
        )));
    }
    let mut tape = crate::autograd::Tape::new();
    let p = tape.constant(probs.to_owned().into_shape_with_order(five_d(probs.shape())).unwrap());
    let t = target.to_owned().into_shape_with_order(five_d(target.shape())).unwrap();
    let loss = tape.dice_loss(p, t, T::of(variant.numerator_factor()), T::of(DICE_SMOOTH));
    Ok(tape.value(loss)[0])
}

fn five_d(shape: &[usize]) -> IxDyn {
    let spatial: usize = shape[2..].iter().product();
    IxDyn(&[shape[0], shape[1], spatial, 1, 1])
}

/// Adds the loss of `probs` (softmax over [`CLASS_LABELS`]) against the
/// one-hot `target` to the graph.
pub fn dice_loss_var<T: Real>(
    g: &mut Graph<'_, T>,
    probs: Var,
    target: &ArrayD<T>,
    variant: DiceVariant,
    space: LossSpace,
) -> Result<Var> {
    if g.tape.shape(probs) != target.shape() {
        return Err(Error::Shape(format!(
            "dice loss: prediction {:?} and target {:?} differ",
            g.tape.shape(probs),
            target.shape()
        )));
    }
    let k = T::of(variant.numerator_factor());
    let s = T::of(DICE_SMOOTH);
    match space {
        LossSpace::Classes => Ok(g.tape.dice_loss(probs, target.clone(), k, s)),
        LossSpace::Regions => {
            let mix = ArrayD::from_shape_fn(IxDyn(&[3, 4, 1, 1, 1]), |i| T::of(REGION_MIX[i[0]][i[1]]));
            let w = g.tape.constant(mix);
            let regions = g.tape.conv3d(probs, w, None, ConvSpec::pointwise());
            let t = to_regions(target.view());
            Ok(g.tape.dice_loss(regions, t, k, s))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn perfect_prediction_scores() {
        let labels = Array3::from_shape_fn((4, 4, 4), |(x, y, _)| if x > y { 2 } else { 0 });
        let gt = one_hot::<f64>(labels.view()).unwrap().insert_axis(ndarray::Axis(0)).into_dyn();
        let exact = mean_dice_loss(gt.view(), gt.view(), DiceVariant::Half).unwrap();
        assert_eq!(exact, 0.5);
        let standard = mean_dice_loss(gt.view(), gt.view(), DiceVariant::Standard).unwrap();
        assert!(standard.abs() < 1e-12);
    }

    #[test]
    fn one_hot_rejects_unknown_label() {
        let labels = Array3::from_elem((2, 2, 2), 3u8);
        assert!(matches!(one_hot::<f32>(labels.view()), Err(Error::LabelValue(3))));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = ArrayD::<f64>::zeros(IxDyn(&[1, 2, 3, 3, 3]));
        let b = ArrayD::<f64>::zeros(IxDyn(&[1, 2, 3, 3, 2]));
        assert!(mean_dice_loss(a.view(), b.view(), DiceVariant::Standard).is_err());
    }

    #[test]
    fn region_mix_composes_classes() {
        let labels = Array3::from_shape_vec((4, 1, 1), vec![0u8, 1, 2, 4]).unwrap();
        let gt = one_hot::<f64>(labels.view()).unwrap().insert_axis(ndarray::Axis(0)).into_dyn();
        let r = to_regions(gt.view());
        let col = |c: usize| (0..4).map(|i| r[[0, c, i, 0, 0]]).collect::<Vec<_>>();
        assert_eq!(col(0), vec![0.0, 1.0, 1.0, 1.0]);
        assert_eq!(col(1), vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(col(2), vec![0.0, 0.0, 0.0, 1.0]);
    }
}
