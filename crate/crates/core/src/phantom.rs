//! Deterministic synthetic cases with known ground truth.
//!
//! A phantom is an ellipsoidal "brain" holding a nested ellipsoidal lesion:
//! edema (label 2) around an enhancing rim (label 4) around a necrotic
//! centre (label 1). Tissue intensities are chosen so that no single
//! modality separates every label:
//!
//! | tissue    | T1  | T1ce | T2  | FLAIR |
//! |-----------|-----|------|-----|-------|
//! | healthy   | 500 | 500  | 400 | 300   |
//! | edema     | 500 | 500  | 800 | 700   |
//! | enhancing | 500 | 1100 | 800 | 300   |
//! | necrosis  | 250 | 500  | 800 | 300   |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use ndarray::{Array3, Array4};

use crate::error::{Error, Result};
use crate::volume::{Grid, MultiModalCase, LABEL_VALUES};

/// Per-modality mean intensity of each tissue class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueIntensities {
    pub healthy: [f32; 4],
    pub edema: [f32; 4],
    pub enhancing: [f32; 4],
    pub necrosis: [f32; 4],
}

impl Default for TissueIntensities {
    fn default() -> Self {
        TissueIntensities {
            healthy: [500.0, 500.0, 400.0, 300.0],
            edema: [500.0, 500.0, 800.0, 700.0],
            enhancing: [500.0, 1100.0, 800.0, 300.0],
            necrosis: [250.0, 500.0, 800.0, 300.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub brain_center: [f64; 3],
    pub brain_radii: [f64; 3],
    pub lesion_center: [f64; 3],
    pub edema_radii: [f64; 3],
    pub core_radii: [f64; 3],
    pub necrosis_radii: [f64; 3],
    pub intensities: TissueIntensities,
    pub noise_std: f32,
    pub seed: u64,
}

impl PhantomSpec {
    /// Fixed geometry scaled to the grid, lesion displaced along the sagittal axis.
    pub fn standard(shape: [usize; 3], seed: u64) -> Self {
        let n = shape.map(|v| v as f64);
        let center = n.map(|v| (v - 1.0) / 2.0);
        PhantomSpec {
            shape,
            spacing: [1.0; 3],
            brain_center: center,
            brain_radii: n.map(|v| 0.42 * v),
            lesion_center: [center[0] - 0.12 * n[0], center[1] + 0.05 * n[1], center[2]],
            edema_radii: n.map(|v| 0.25 * v),
            core_radii: n.map(|v| 0.16 * v),
            necrosis_radii: n.map(|v| 0.09 * v),
            intensities: TissueIntensities::default(),
            noise_std: 20.0,
            seed,
        }
    }

    /// [`PhantomSpec::standard`] with lesion position and size jittered by `seed`.
    pub fn random(shape: [usize; 3], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a11);
        let mut spec = PhantomSpec::standard(shape, seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let mut jitter = |scale: f64| (unit.sample(&mut rng) as f64 * scale).clamp(-2.0 * scale, 2.0 * scale);
        for axis in 0..3 {
            spec.lesion_center[axis] += jitter(0.025 * shape[axis] as f64);
        }
        let size = 1.0 + jitter(0.06);
        for axis in 0..3 {
            spec.edema_radii[axis] *= size;
            spec.core_radii[axis] *= size;
            spec.necrosis_radii[axis] *= size;
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(Error::Config(format!("phantom shape {:?} must be positive", self.shape)));
        }
        for axis in 0..3 {
            let (e, c, n) = (
                self.edema_radii[axis],
                self.core_radii[axis],
                self.necrosis_radii[axis],
            );
            if !(e > c && c > n && n > 0.0) {
                return Err(Error::Config(format!(
                    "lesion radii must be strictly decreasing and positive on axis {axis}: {e} > {c} > {n}"
                )));
            }
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("phantom noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

fn inside(p: [f64; 3], center: [f64; 3], radii: [f64; 3]) -> bool {
    (0..3)
        .map(|a| ((p[a] - center[a]) / radii[a]).powi(2))
        .sum::<f64>()
        <= 1.0
}

/// Exact counts recorded while the phantom is rasterised.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomBookkeeping {
    /// Voxel count per entry of [`LABEL_VALUES`].
    pub label_counts: [usize; 4],
    pub brain_voxels: usize,
    /// Mean index coordinate of all tumour voxels (labels 1, 2 and 4).
    pub lesion_centroid: [f64; 3],
}

impl PhantomBookkeeping {
    pub fn count(&self, label: u8) -> usize {
        LABEL_VALUES
            .iter()
            .position(|&l| l == label)
            .map_or(0, |i| self.label_counts[i])
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub case: MultiModalCase,
    pub bookkeeping: PhantomBookkeeping,
}

pub fn generate_phantom(case_id: &str, spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let [nx, ny, nz] = spec.shape;
    let mut labels = Array3::<u8>::zeros((nx, ny, nz));
    let mut brain = Array3::from_elem((nx, ny, nz), false);
    let mut label_counts = [0usize; 4];
    let mut brain_voxels = 0;
    let mut centroid = [0.0f64; 3];
    for ((x, y, z), label) in labels.indexed_iter_mut() {
        let p = [x as f64, y as f64, z as f64];
        let in_brain = inside(p, spec.brain_center, spec.brain_radii);
        let value = if inside(p, spec.lesion_center, spec.necrosis_radii) {
            1
        } else if inside(p, spec.lesion_center, spec.core_radii) {
            4
        } else if inside(p, spec.lesion_center, spec.edema_radii) {
            2
        } else {
            0
        };
        if value != 0 && !in_brain {
            return Err(Error::Config(format!(
                "lesion voxel ({x}, {y}, {z}) lies outside the brain ellipsoid"
            )));
        }
        *label = value;
        brain[[x, y, z]] = in_brain;
        if in_brain {
            brain_voxels += 1;
        }
        let slot = LABEL_VALUES.iter().position(|&l| l == value).unwrap();
        label_counts[slot] += 1;
        if value != 0 {
            for a in 0..3 {
                centroid[a] += p[a];
            }
        }
    }
    let lesion = label_counts[1] + label_counts[2] + label_counts[3];
    if lesion > 0 {
        for c in &mut centroid {
            *c /= lesion as f64;
        }
    }

    let noise = Normal::new(0.0f32, spec.noise_std.max(0.0)).expect("finite noise std");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut channels = Array4::<f32>::zeros((4, nx, ny, nz));
    let t = &spec.intensities;
    for ((x, y, z), &label) in labels.indexed_iter() {
        if !brain[[x, y, z]] {
            continue;
        }
        let means = match label {
            1 => t.necrosis,
            2 => t.edema,
            4 => t.enhancing,
            _ => t.healthy,
        };
        for (c, &mean) in means.iter().enumerate() {
            let mut v = mean;
            if spec.noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            // brain voxels must stay non-zero so the mask recovers the ellipsoid
            if v == 0.0 {
                v = f32::MIN_POSITIVE;
            }
            channels[[c, x, y, z]] = v;
        }
    }

    let case = MultiModalCase::new(
        case_id,
        channels,
        Some(labels),
        Grid::new(spec.shape, spec.spacing),
    )?;
    Ok(Phantom {
        case,
        bookkeeping: PhantomBookkeeping {
            label_counts,
            brain_voxels,
            lesion_centroid: centroid,
        },
    })
}

/// `count` randomly jittered phantoms named `phantom_000`, `phantom_001`, ...
pub fn generate_dataset(shape: [usize; 3], count: usize, base_seed: u64) -> Result<Vec<Phantom>> {
    (0..count)
        .map(|i| {
            let spec = PhantomSpec::random(shape, base_seed.wrapping_add(i as u64));
            generate_phantom(&format!("phantom_{i:03}"), &spec)
        })
        .collect()
}
