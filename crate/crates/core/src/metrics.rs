//! Tumour regions and overlap / surface-distance metrics.

use ndarray::{Array3, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    WT,
    TC,
    ET,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::WT, Region::TC, Region::ET];

    pub fn name(self) -> &'static str {
        match self {
            Region::WT => "WT",
            Region::TC => "TC",
            Region::ET => "ET",
        }
    }

    /// Raw labels making up the region.
    pub fn labels(self) -> &'static [u8] {
        match self {
            Region::WT => &[1, 2, 4],
            Region::TC => &[1, 4],
            Region::ET => &[4],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMasks {
    pub wt: Array3<bool>,
    pub tc: Array3<bool>,
    pub et: Array3<bool>,
}

impl RegionMasks {
    pub fn get(&self, region: Region) -> &Array3<bool> {
        match region {
            Region::WT => &self.wt,
            Region::TC => &self.tc,
            Region::ET => &self.et,
        }
    }
}

pub fn region_map(labels: ArrayView3<'_, u8>) -> Result<RegionMasks> {
    if let Some(&bad) = labels.iter().find(|&&l| !matches!(l, 0 | 1 | 2 | 4)) {
        return Err(Error::LabelValue(bad as i64));
    }
    Ok(RegionMasks {
        wt: labels.mapv(|l| l != 0),
        tc: labels.mapv(|l| l == 1 || l == 4),
        et: labels.mapv(|l| l == 4),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub dice: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Overlap ratios. An empty denominator scores 1 when the numerator's
/// counterpart is empty too (agreement on absence) and 0 otherwise.
pub fn binary_metrics(pred: ArrayView3<'_, bool>, gt: ArrayView3<'_, bool>) -> BinaryMetrics {
    assert_eq!(pred.shape(), gt.shape(), "binary_metrics: shape mismatch");
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    Zip::from(&pred).and(&gt).for_each(|&p, &g| match (p, g) {
        (true, true) => tp += 1,
        (true, false) => fp += 1,
        (false, true) => fn_ += 1,
        (false, false) => tn += 1,
    });
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    BinaryMetrics {
        dice: ratio(2 * tp, 2 * tp + fp + fn_),
        sensitivity: if tp + fn_ == 0 {
            if fp == 0 { 1.0 } else { 0.0 }
        } else {
            tp as f64 / (tp + fn_) as f64
        },
        specificity: if tn + fp == 0 {
            if fn_ == 0 { 1.0 } else { 0.0 }
        } else {
            tn as f64 / (tn + fp) as f64
        },
    }
}

/// Mask voxels with at least one 6-neighbour outside the mask (or outside the volume).
pub fn surface(mask: ArrayView3<'_, bool>) -> Vec<[usize; 3]> {
    let (nx, ny, nz) = mask.dim();
    let mut out = Vec::new();
    for ((x, y, z), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        let border = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
        if border
            || !mask[[x - 1, y, z]]
            || !mask[[x + 1, y, z]]
            || !mask[[x, y - 1, z]]
            || !mask[[x, y + 1, z]]
            || !mask[[x, y, z - 1]]
            || !mask[[x, y, z + 1]]
        {
            out.push([x, y, z]);
        }
    }
    out
}

/// Exact squared Euclidean distance (in mm²) from every voxel to the
/// nearest `true` voxel of `features`; infinite when there is none.
pub fn squared_distance_transform(features: ArrayView3<'_, bool>, spacing: [f64; 3]) -> Array3<f64> {
    let mut d = features.mapv(|f| if f { 0.0 } else { f64::INFINITY });
    let mut f = Vec::new();
    let mut out = Vec::new();
    for axis in 0..3 {
        let n = d.shape()[axis];
        f.resize(n, 0.0);
        out.resize(n, 0.0);
        for mut lane in d.lanes_mut(ndarray::Axis(axis)) {
            for (i, v) in lane.iter().enumerate() {
                f[i] = *v;
            }
            lower_envelope(&f, spacing[axis], &mut out);
            for (i, v) in lane.iter_mut().enumerate() {
                *v = out[i];
            }
        }
    }
    d
}

/// One-dimensional squared distance transform of a sampled function
/// (lower envelope of parabolas rooted at finite samples).
fn lower_envelope(f: &[f64], step: f64, out: &mut [f64]) {
    let n = f.len();
    let pos = |i: usize| i as f64 * step;
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let Some(&top) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = ((f[q] + pos(q) * pos(q)) - (f[top] + pos(top) * pos(top))) / (2.0 * (pos(q) - pos(top)));
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Distances (mm) from every surface voxel of `from` to the surface of `to`.
fn directed_surface_distances(from: ArrayView3<'_, bool>, to: ArrayView3<'_, bool>, spacing: [f64; 3]) -> Vec<f64> {
    let target = surface(to);
    let mut features = Array3::from_elem(to.raw_dim(), false);
    for p in &target {
        features[*p] = true;
    }
    let dt = squared_distance_transform(features.view(), spacing);
    surface(from).iter().map(|p| dt[*p].sqrt()).collect()
}

/// Symmetric Hausdorff distance between mask surfaces; `None` if either mask is empty.
pub fn hausdorff_distance(pred: ArrayView3<'_, bool>, gt: ArrayView3<'_, bool>, spacing: [f64; 3]) -> Option<f64> {
    assert_eq!(pred.shape(), gt.shape(), "hausdorff: shape mismatch");
    if !pred.iter().any(|&v| v) || !gt.iter().any(|&v| v) {
        return None;
    }
    let a = directed_surface_distances(pred, gt, spacing);
    let b = directed_surface_distances(gt, pred, spacing);
    Some(a.into_iter().chain(b).fold(0.0, f64::max))
}

/// `q`-quantile (linear interpolation) of the pooled directed surface distances.
pub fn hausdorff_quantile(
    pred: ArrayView3<'_, bool>,
    gt: ArrayView3<'_, bool>,
    spacing: [f64; 3],
    q: f64,
) -> Option<f64> {
    assert_eq!(pred.shape(), gt.shape(), "hausdorff: shape mismatch");
    if !pred.iter().any(|&v| v) || !gt.iter().any(|&v| v) {
        return None;
    }
    let mut all = directed_surface_distances(pred, gt, spacing);
    all.extend(directed_surface_distances(gt, pred, spacing));
    all.sort_by(f64::total_cmp);
    Some(quantile_sorted(&all, q))
}

/// Linear-interpolation quantile of sorted data: position `q * (n - 1)`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HausdorffMode {
    #[default]
    Max,
    Percentile95,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub region: Region,
    pub dice: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Millimetres; `None` when either mask is empty.
    pub hausdorff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub case_id: String,
    pub regions: Vec<RegionMetrics>,
}

impl MetricsReport {
    pub fn region(&self, region: Region) -> &RegionMetrics {
        self.regions.iter().find(|r| r.region == region).expect("all regions are reported")
    }
}

pub fn evaluate_labels(
    case_id: &str,
    pred: ArrayView3<'_, u8>,
    gt: ArrayView3<'_, u8>,
    spacing: [f64; 3],
    mode: HausdorffMode,
) -> Result<MetricsReport> {
    if pred.shape() != gt.shape() {
        return Err(Error::GridMismatch {
            what: format!("prediction for {case_id}"),
            expected: gt.dim().into(),
            found: pred.dim().into(),
        });
    }
    let p = region_map(pred)?;
    let g = region_map(gt)?;
    let regions = Region::ALL
        .iter()
        .map(|&region| {
            let (pm, gm) = (p.get(region).view(), g.get(region).view());
            let m = binary_metrics(pm, gm);
            let hausdorff = match mode {
                HausdorffMode::Max => hausdorff_distance(pm, gm, spacing),
                HausdorffMode::Percentile95 => hausdorff_quantile(pm, gm, spacing, 0.95),
            };
            RegionMetrics {
                region,
                dice: m.dice,
                sensitivity: m.sensitivity,
                specificity: m.specificity,
                hausdorff,
            }
        })
        .collect();
    Ok(MetricsReport {
        case_id: case_id.to_string(),
        regions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(shape: (usize, usize, usize), on: &[[usize; 3]]) -> Array3<bool> {
        let mut m = Array3::from_elem(shape, false);
        for p in on {
            m[*p] = true;
        }
        m
    }

    #[test]
    fn region_nesting_for_single_et_voxel() {
        let mut l = Array3::<u8>::zeros((3, 3, 3));
        l[[1, 1, 1]] = 4;
        let r = region_map(l.view()).unwrap();
        for region in Region::ALL {
            assert_eq!(r.get(region).iter().filter(|&&v| v).count(), 1);
        }
        let empty = region_map(Array3::<u8>::zeros((2, 2, 2)).view()).unwrap();
        assert!(Region::ALL.iter().all(|&g| !empty.get(g).iter().any(|&v| v)));
        assert!(matches!(region_map(Array3::from_elem((1, 1, 1), 3u8).view()), Err(Error::LabelValue(3))));
    }

    #[test]
    fn identical_and_disjoint_masks() {
        let a = mask((4, 4, 4), &[[1, 1, 1], [1, 2, 1]]);
        let m = binary_metrics(a.view(), a.view());
        assert_eq!((m.dice, m.sensitivity, m.specificity), (1.0, 1.0, 1.0));
        let b = mask((4, 4, 4), &[[3, 3, 3]]);
        let m = binary_metrics(a.view(), b.view());
        assert_eq!((m.dice, m.sensitivity), (0.0, 0.0));
        let e = mask((4, 4, 4), &[]);
        let m = binary_metrics(e.view(), e.view());
        assert_eq!((m.dice, m.sensitivity, m.specificity), (1.0, 1.0, 1.0));
    }

    #[test]
    fn hausdorff_examples() {
        let a = mask((5, 5, 5), &[[2, 2, 2]]);
        let b = mask((5, 5, 5), &[[2, 3, 2]]);
        assert_eq!(hausdorff_distance(a.view(), a.view(), [1.0; 3]), Some(0.0));
        assert_eq!(hausdorff_distance(a.view(), b.view(), [1.0; 3]), Some(1.0));
        assert_eq!(hausdorff_distance(a.view(), b.view(), [1.0, 2.5, 1.0]), Some(2.5));
        let e = mask((5, 5, 5), &[]);
        assert_eq!(hausdorff_distance(a.view(), e.view(), [1.0; 3]), None);
    }

    #[test]
    fn surface_of_a_solid_cube_excludes_its_interior() {
        let m = Array3::from_shape_fn((5, 5, 5), |(x, y, z)| (1..4).contains(&x) && (1..4).contains(&y) && (1..4).contains(&z));
        let s = surface(m.view());
        assert_eq!(s.len(), 27 - 1);
        assert!(!s.contains(&[2, 2, 2]));
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let f = mask((6, 5, 7), &[[0, 0, 0], [5, 4, 6], [2, 3, 1]]);
        let spacing = [1.0, 0.5, 2.0];
        let dt = squared_distance_transform(f.view(), spacing);
        for ((x, y, z), &d) in dt.indexed_iter() {
            let best = [[0, 0, 0], [5, 4, 6], [2, 3, 1]]
                .iter()
                .map(|p: &[usize; 3]| {
                    let dx = (x as f64 - p[0] as f64) * spacing[0];
                    let dy = (y as f64 - p[1] as f64) * spacing[1];
                    let dz = (z as f64 - p[2] as f64) * spacing[2];
                    dx * dx + dy * dy + dz * dz
                })
                .fold(f64::INFINITY, f64::min);
            assert!((d - best).abs() < 1e-9, "{x},{y},{z}: {d} vs {best}");
        }
    }

    #[test]
    fn quantile_linear_interpolation() {
        let v = [1.0, 2.0, 4.0, 8.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 8.0);
        assert_eq!(quantile_sorted(&v, 0.5), 3.0);
        assert_eq!(quantile_sorted(&v, 0.25), 1.75);
    }
}
