//! Volumetric data types, BraTS directory ingestion and grid resampling.

use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, ArrayView3, Axis, ShapeBuilder};

use crate::error::{Error, Result};
use crate::nifti::{self, VoxelData};

/// Raw label values that may appear in a segmentation.
pub const LABEL_VALUES: [u8; 4] = [0, 1, 2, 4];

/// Input MRI acquisitions, in the fixed channel order of every case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    T1,
    T1ce,
    T2,
    Flair,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T1, Modality::T1ce, Modality::T2, Modality::Flair];

    /// File-name suffix used by the BraTS layout.
    pub fn suffix(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::T1ce => "t1ce",
            Modality::T2 => "t2",
            Modality::Flair => "flair",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.suffix())
    }
}

/// Sampling grid of a volume: shape, voxel size and the voxel-to-world affine.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Grid {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub affine: [[f64; 4]; 4],
}

impl Grid {
    /// Axis-aligned grid with the origin at world zero.
    pub fn new(shape: [usize; 3], spacing: [f64; 3]) -> Self {
        let mut affine = [[0.0; 4]; 4];
        for axis in 0..3 {
            affine[axis][axis] = spacing[axis];
        }
        affine[3][3] = 1.0;
        Grid {
            shape,
            spacing,
            affine,
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.shape.iter().product()
    }

    /// Grid covering the same corner-to-corner extent with `target` samples per axis.
    pub fn resampled(&self, target: [usize; 3]) -> Grid {
        let mut ratio = [0.0; 3];
        let mut first = [0.0; 3];
        for axis in 0..3 {
            let (n_in, n_out) = (self.shape[axis], target[axis]);
            if n_out == 1 {
                ratio[axis] = n_in as f64;
                first[axis] = (n_in as f64 - 1.0) / 2.0;
            } else {
                ratio[axis] = (n_in as f64 - 1.0) / (n_out as f64 - 1.0);
            }
        }
        let mut affine = self.affine;
        for row in 0..3 {
            for col in 0..3 {
                affine[row][col] = self.affine[row][col] * ratio[col];
            }
            affine[row][3] = self.affine[row][3]
                + (0..3).map(|c| self.affine[row][c] * first[c]).sum::<f64>();
        }
        let spacing = [
            self.spacing[0] * ratio[0],
            self.spacing[1] * ratio[1],
            self.spacing[2] * ratio[2],
        ];
        Grid {
            shape: target,
            spacing,
            affine,
        }
    }
}

/// One subject: four co-registered modalities, optional labels, shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalCase {
    pub case_id: String,
    /// `[modality, x, y, z]`, modality order as in [`Modality::ALL`].
    pub channels: Array4<f32>,
    pub labels: Option<Array3<u8>>,
    pub grid: Grid,
}

impl MultiModalCase {
    pub fn new(
        case_id: impl Into<String>,
        channels: Array4<f32>,
        labels: Option<Array3<u8>>,
        grid: Grid,
    ) -> Result<Self> {
        let shape = channels.shape();
        if shape[0] != 4 {
            return Err(Error::Shape(format!(
                "a case needs 4 channels, got {}",
                shape[0]
            )));
        }
        let found = [shape[1], shape[2], shape[3]];
        if found != grid.shape {
            return Err(Error::GridMismatch {
                what: "channels".into(),
                expected: grid.shape,
                found,
            });
        }
        if let Some(labels) = &labels {
            let dim = labels.dim();
            let found = [dim.0, dim.1, dim.2];
            if found != grid.shape {
                return Err(Error::GridMismatch {
                    what: "labels".into(),
                    expected: grid.shape,
                    found,
                });
            }
            validate_labels(labels.view())?;
        }
        Ok(MultiModalCase {
            case_id: case_id.into(),
            channels: channels.as_standard_layout().into_owned(),
            labels,
            grid,
        })
    }

    pub fn channel(&self, modality: Modality) -> ArrayView3<'_, f32> {
        self.channels.index_axis(Axis(0), modality.index())
    }

    pub fn shape(&self) -> [usize; 3] {
        self.grid.shape
    }
}

/// Checks that every label is one of [`LABEL_VALUES`].
pub fn validate_labels(labels: ArrayView3<'_, u8>) -> Result<()> {
    match labels.iter().find(|v| !LABEL_VALUES.contains(v)) {
        Some(&v) => Err(Error::LabelValue(v as i64)),
        None => Ok(()),
    }
}

/// Voxels where at least one modality is non-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BrainMask(pub Array3<bool>);

impl BrainMask {
    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn view(&self) -> ArrayView3<'_, bool> {
        self.0.view()
    }
}

pub fn compute_brain_mask(case: &MultiModalCase) -> Result<BrainMask> {
    let [x, y, z] = case.shape();
    let mut mask = Array3::from_elem((x, y, z), false);
    for channel in case.channels.outer_iter() {
        ndarray::Zip::from(&mut mask)
            .and(&channel)
            .for_each(|m, &v| *m |= v != 0.0);
    }
    let mask = BrainMask(mask);
    if mask.count() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Linear,
    Nearest,
}

/// Source coordinate of output index `i` under corner-to-corner alignment.
pub fn source_coordinate(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        (n_in as f64 - 1.0) / 2.0
    } else {
        i as f64 * (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
    }
}

fn check_target(target: [usize; 3]) -> Result<()> {
    if target.contains(&0) {
        return Err(Error::Shape(format!(
            "resample target {target:?} must be positive on every axis"
        )));
    }
    Ok(())
}

fn nearest_index(i: usize, n_in: usize, n_out: usize) -> usize {
    let c = source_coordinate(i, n_in, n_out);
    ((c + 0.5).floor() as usize).min(n_in - 1)
}

/// Resamples an intensity volume onto `target` samples per axis.
pub fn resample(
    volume: ArrayView3<'_, f32>,
    target: [usize; 3],
    mode: Interpolation,
) -> Result<Array3<f32>> {
    check_target(target)?;
    if mode == Interpolation::Nearest {
        return resample_nearest(volume, target);
    }
    let (nx, ny, nz) = volume.dim();
    let n_in = [nx, ny, nz];
    let taps: Vec<Vec<(usize, usize, f64)>> = (0..3)
        .map(|axis| {
            (0..target[axis])
                .map(|i| {
                    let c = source_coordinate(i, n_in[axis], target[axis]);
                    let i0 = (c.floor() as usize).min(n_in[axis] - 1);
                    let w = c - i0 as f64;
                    let i1 = if w > 0.0 { (i0 + 1).min(n_in[axis] - 1) } else { i0 };
                    (i0, i1, w)
                })
                .collect()
        })
        .collect();
    let mut out = Array3::<f32>::zeros((target[0], target[1], target[2]));
    let lerp = |a: f64, b: f64, w: f64| if w == 0.0 { a } else { a * (1.0 - w) + b * w };
    for (i, &(x0, x1, wx)) in taps[0].iter().enumerate() {
        for (j, &(y0, y1, wy)) in taps[1].iter().enumerate() {
            for (k, &(z0, z1, wz)) in taps[2].iter().enumerate() {
                let v = |x: usize, y: usize, z: usize| volume[[x, y, z]] as f64;
                let c00 = lerp(v(x0, y0, z0), v(x0, y0, z1), wz);
                let c01 = lerp(v(x0, y1, z0), v(x0, y1, z1), wz);
                let c10 = lerp(v(x1, y0, z0), v(x1, y0, z1), wz);
                let c11 = lerp(v(x1, y1, z0), v(x1, y1, z1), wz);
                let c0 = lerp(c00, c01, wy);
                let c1 = lerp(c10, c11, wy);
                out[[i, j, k]] = lerp(c0, c1, wx) as f32;
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour resampling; never produces values absent from the input.
pub fn resample_nearest<T: Copy + Default>(
    volume: ArrayView3<'_, T>,
    target: [usize; 3],
) -> Result<Array3<T>> {
    check_target(target)?;
    let (nx, ny, nz) = volume.dim();
    let xs: Vec<usize> = (0..target[0]).map(|i| nearest_index(i, nx, target[0])).collect();
    let ys: Vec<usize> = (0..target[1]).map(|i| nearest_index(i, ny, target[1])).collect();
    let zs: Vec<usize> = (0..target[2]).map(|i| nearest_index(i, nz, target[2])).collect();
    Ok(Array3::from_shape_fn(
        (target[0], target[1], target[2]),
        |(i, j, k)| volume[[xs[i], ys[j], zs[k]]],
    ))
}

/// Resamples every channel (linear) and the labels (nearest) of a case.
pub fn resample_case(case: &MultiModalCase, target: [usize; 3]) -> Result<MultiModalCase> {
    check_target(target)?;
    if target == case.shape() {
        return Ok(case.clone());
    }
    let mut channels = Array4::<f32>::zeros((4, target[0], target[1], target[2]));
    for (src, mut dst) in case.channels.outer_iter().zip(channels.outer_iter_mut()) {
        dst.assign(&resample(src, target, Interpolation::Linear)?);
    }
    let labels = case
        .labels
        .as_ref()
        .map(|l| resample_nearest(l.view(), target))
        .transpose()?;
    Ok(MultiModalCase {
        case_id: case.case_id.clone(),
        channels,
        labels,
        grid: case.grid.resampled(target),
    })
}

fn to_file_order<T: Copy>(volume: ArrayView3<'_, T>) -> Vec<T> {
    volume.t().iter().copied().collect()
}

fn from_file_order<T: Clone>(shape: [usize; 3], values: Vec<T>) -> Array3<T> {
    Array3::from_shape_vec((shape[0], shape[1], shape[2]).f(), values)
        .expect("voxel count matches header")
        .as_standard_layout()
        .into_owned()
}

/// Locates `<dir>/<case_id>_<suffix>.nii.gz` (or `.nii`).
pub fn find_volume(dir: &Path, case_id: &str, suffix: &str) -> Option<PathBuf> {
    ["nii.gz", "nii"]
        .iter()
        .map(|ext| dir.join(format!("{case_id}_{suffix}.{ext}")))
        .find(|p| p.is_file())
}

fn case_id_of(dir: &Path) -> Result<String> {
    dir.file_name()
        .and_then(|n| n.to_str())
        .map(str::to_owned)
        .ok_or_else(|| Error::io(dir, std::io::Error::other("directory has no usable name")))
}

/// Reads an intensity volume and its grid.
pub fn read_intensity(path: &Path) -> Result<(Array3<f32>, Grid)> {
    let img = nifti::read(path)?;
    let grid = Grid {
        shape: img.shape,
        spacing: img.spacing,
        affine: img.affine,
    };
    let values = img.values.into_iter().map(|v| v as f32).collect();
    Ok((from_file_order(img.shape, values), grid))
}

/// Reads a segmentation; values must lie in [`LABEL_VALUES`].
pub fn read_labels(path: &Path) -> Result<(Array3<u8>, Grid)> {
    let img = nifti::read(path)?;
    let grid = Grid {
        shape: img.shape,
        spacing: img.spacing,
        affine: img.affine,
    };
    let mut values = Vec::with_capacity(img.values.len());
    for v in img.values {
        let rounded = v.round();
        if rounded != v || !LABEL_VALUES.iter().any(|&l| l as f64 == rounded) {
            return Err(Error::LabelValue(rounded as i64));
        }
        values.push(rounded as u8);
    }
    Ok((from_file_order(img.shape, values), grid))
}

pub fn write_intensity(path: &Path, volume: ArrayView3<'_, f32>, grid: &Grid) -> Result<()> {
    nifti::write(
        path,
        grid.shape,
        grid.spacing,
        &grid.affine,
        &VoxelData::F32(to_file_order(volume)),
    )
}

pub fn write_labels(path: &Path, labels: ArrayView3<'_, u8>, grid: &Grid) -> Result<()> {
    nifti::write(
        path,
        grid.shape,
        grid.spacing,
        &grid.affine,
        &VoxelData::U8(to_file_order(labels)),
    )
}

/// Loads a case from a BraTS-style directory `<case_id>/<case_id>_<suffix>.nii.gz`.
pub fn load_case(dir: &Path) -> Result<MultiModalCase> {
    let case_id = case_id_of(dir)?;
    let mut grid: Option<Grid> = None;
    let mut volumes = Vec::with_capacity(4);
    for modality in Modality::ALL {
        let path = find_volume(dir, &case_id, modality.suffix()).ok_or_else(|| {
            Error::MissingModality {
                modality: modality.suffix().into(),
                dir: dir.to_path_buf(),
            }
        })?;
        let (volume, g) = read_intensity(&path)?;
        match &grid {
            Some(first) if first.shape != g.shape => {
                return Err(Error::GridMismatch {
                    what: path.display().to_string(),
                    expected: first.shape,
                    found: g.shape,
                })
            }
            Some(_) => {}
            None => grid = Some(g),
        }
        volumes.push(volume);
    }
    let grid = grid.expect("four modalities read");
    let labels = match find_volume(dir, &case_id, "seg") {
        Some(path) => {
            let (labels, g) = read_labels(&path)?;
            if g.shape != grid.shape {
                return Err(Error::GridMismatch {
                    what: path.display().to_string(),
                    expected: grid.shape,
                    found: g.shape,
                });
            }
            Some(labels)
        }
        None => None,
    };
    let views: Vec<_> = volumes.iter().map(|v| v.view()).collect();
    let channels = ndarray::stack(Axis(0), &views).expect("equal shapes checked");
    MultiModalCase::new(case_id, channels, labels, grid)
}

/// Writes a case under `parent/<case_id>/` and returns that directory.
pub fn save_case(case: &MultiModalCase, parent: &Path) -> Result<PathBuf> {
    let dir = parent.join(&case.case_id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for modality in Modality::ALL {
        let path = dir.join(format!("{}_{}.nii.gz", case.case_id, modality.suffix()));
        write_intensity(&path, case.channel(modality), &case.grid)?;
    }
    if let Some(labels) = &case.labels {
        let path = dir.join(format!("{}_seg.nii.gz", case.case_id));
        write_labels(&path, labels.view(), &case.grid)?;
    }
    Ok(dir)
}

/// Case directories directly under `root`, sorted by name.
pub fn list_case_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                if find_volume(&path, name, Modality::T1.suffix()).is_some() {
                    dirs.push(path);
                }
            }
        }
    }
    dirs.sort();
    Ok(dirs)
}
