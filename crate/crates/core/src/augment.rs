//! Training-time augmentation (sagittal flip, channel mute) and offline
//! cubic b-spline elastic deformation.
//!
//! Random draws are made by the caller from its own stream so that every
//! epoch is reproducible and the probabilities are testable in isolation.

use ndarray::{Array3, Array4, ArrayView3, Axis};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::MultiModalCase;

/// Axis of the `[x, y, z]` grid that crosses the sagittal plane.
pub const SAGITTAL_AXIS: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub mute_prob: f64,
    pub noise_mean: f32,
    pub noise_std: f32,
    /// Control-point spacing of the deformation grid, in voxels.
    pub bspline_grid: usize,
    /// Standard deviation of control-point displacements, in voxels.
    pub bspline_sigma: f64,
    /// Deformed copies written per case by offline augmentation.
    pub copies: usize,
    /// Derived from the root `seed` of the configuration file.
    #[serde(skip_deserializing)]
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            mute_prob: 0.1,
            noise_mean: 5.0,
            noise_std: 2.5,
            bspline_grid: 32,
            bspline_sigma: 4.0,
            copies: 1,
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No flipping, no muting.
    pub fn disabled() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            mute_prob: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("flip_prob", self.flip_prob), ("mute_prob", self.mute_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if !(self.bspline_sigma >= 0.0) || !self.bspline_sigma.is_finite() {
            return Err(Error::Config("bspline_sigma must be finite and non-negative".into()));
        }
        if self.bspline_grid == 0 {
            return Err(Error::Config("bspline_grid must be positive".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

/// Seed for the stream owned by one (case, epoch) augmentation job.
pub fn derive_seed(base_seed: u64, case_id: &str, epoch: u64) -> u64 {
    // FNV-1a over the id, then a splitmix finaliser
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in case_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = base_seed ^ h ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn draw_flip<R: Rng + ?Sized>(rng: &mut R, flip_prob: f64) -> bool {
    rng.random_bool(flip_prob)
}

pub fn draw_mutes<R: Rng + ?Sized>(rng: &mut R, mute_prob: f64) -> [bool; 4] {
    std::array::from_fn(|_| rng.random_bool(mute_prob))
}

/// Mirrors channels and labels across the sagittal plane when `draw` is set.
pub fn sagittal_flip(case: &MultiModalCase, draw: bool) -> MultiModalCase {
    if !draw {
        return case.clone();
    }
    let mut channels = case.channels.view();
    channels.invert_axis(Axis(SAGITTAL_AXIS + 1));
    let labels = case.labels.as_ref().map(|l| {
        let mut v = l.view();
        v.invert_axis(Axis(SAGITTAL_AXIS));
        v.as_standard_layout().into_owned()
    });
    MultiModalCase {
        case_id: case.case_id.clone(),
        channels: channels.as_standard_layout().into_owned(),
        labels,
        grid: case.grid.clone(),
    }
}

/// Replaces every channel whose draw is set by i.i.d. Gaussian noise.
pub fn channel_mute<R: Rng + ?Sized>(
    case: &MultiModalCase,
    draws: [bool; 4],
    noise_mean: f32,
    noise_std: f32,
    rng: &mut R,
) -> MultiModalCase {
    let mut out = case.clone();
    if !draws.iter().any(|&d| d) {
        return out;
    }
    let noise = Normal::new(noise_mean, noise_std).expect("finite noise parameters");
    for (mut channel, _) in out
        .channels
        .axis_iter_mut(Axis(0))
        .zip(draws)
        .filter(|(_, d)| *d)
    {
        channel.iter_mut().for_each(|v| *v = noise.sample(rng));
    }
    out
}

/// Result of an elastic deformation.
#[derive(Debug, Clone)]
pub struct Deformation {
    pub case: MultiModalCase,
    /// Smallest Jacobian determinant of the mapping over all voxel centres.
    pub min_jacobian: f64,
}

impl Deformation {
    /// Whether the sampled mapping folds (a non-positive Jacobian somewhere).
    pub fn folded(&self) -> bool {
        self.min_jacobian <= 0.0
    }
}

fn basis(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let u = 1.0 - t;
    [
        u * u * u / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

fn basis_derivative(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let u = 1.0 - t;
    [
        -u * u / 2.0,
        (3.0 * t2 - 4.0 * t) / 2.0,
        (-3.0 * t2 + 2.0 * t + 1.0) / 2.0,
        t2 / 2.0,
    ]
}

struct AxisTaps {
    first: usize,
    weights: [f64; 4],
    derivs: [f64; 4],
}

fn axis_taps(n: usize, spacing: usize) -> Vec<AxisTaps> {
    let g = spacing as f64;
    (0..n)
        .map(|x| {
            let s = x as f64 / g;
            let first = s.floor() as usize;
            let t = s - first as f64;
            let d = basis_derivative(t);
            AxisTaps {
                first,
                weights: basis(t),
                derivs: d.map(|v| v / g),
            }
        })
        .collect()
}

/// Dense displacement field (voxels) of a random cubic b-spline transform,
/// plus the Jacobian determinant of `x -> x + u(x)` at every voxel.
pub fn bspline_field(
    shape: [usize; 3],
    grid_spacing: usize,
    sigma: f64,
    seed: u64,
) -> (Array4<f64>, Array3<f64>) {
    let ctrl = shape.map(|n| (n.saturating_sub(1)) / grid_spacing + 4);
    let mut phi = Array4::<f64>::zeros((3, ctrl[0], ctrl[1], ctrl[2]));
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        phi.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
    }
    let taps: Vec<Vec<AxisTaps>> = (0..3).map(|a| axis_taps(shape[a], grid_spacing)).collect();
    let mut field = Array4::<f64>::zeros((3, shape[0], shape[1], shape[2]));
    let mut jac = Array3::<f64>::ones((shape[0], shape[1], shape[2]));
    if sigma == 0.0 {
        return (field, jac);
    }
    for (x, tx) in taps[0].iter().enumerate() {
        for (y, ty) in taps[1].iter().enumerate() {
            for (z, tz) in taps[2].iter().enumerate() {
                // u[c] and du[c][axis]
                let mut u = [0.0f64; 3];
                let mut du = [[0.0f64; 3]; 3];
                for a in 0..4 {
                    for b in 0..4 {
                        for c in 0..4 {
                            let (ix, iy, iz) = (tx.first + a, ty.first + b, tz.first + c);
                            let w = tx.weights[a] * ty.weights[b] * tz.weights[c];
                            let wx = tx.derivs[a] * ty.weights[b] * tz.weights[c];
                            let wy = tx.weights[a] * ty.derivs[b] * tz.weights[c];
                            let wz = tx.weights[a] * ty.weights[b] * tz.derivs[c];
                            for comp in 0..3 {
                                let p = phi[[comp, ix, iy, iz]];
                                u[comp] += w * p;
                                du[comp][0] += wx * p;
                                du[comp][1] += wy * p;
                                du[comp][2] += wz * p;
                            }
                        }
                    }
                }
                for comp in 0..3 {
                    field[[comp, x, y, z]] = u[comp];
                    du[comp][comp] += 1.0;
                }
                let m = du;
                jac[[x, y, z]] = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
            }
        }
    }
    (field, jac)
}

fn sample_linear(volume: &ArrayView3<'_, f32>, p: [f64; 3]) -> f32 {
    let dims = volume.dim();
    let n = [dims.0, dims.1, dims.2];
    let mut base = [0isize; 3];
    let mut w = [0.0f64; 3];
    for a in 0..3 {
        let f = p[a].floor();
        base[a] = f as isize;
        w[a] = p[a] - f;
    }
    let fetch = |x: isize, y: isize, z: isize| -> f64 {
        if x < 0 || y < 0 || z < 0 || x >= n[0] as isize || y >= n[1] as isize || z >= n[2] as isize {
            0.0
        } else {
            volume[[x as usize, y as usize, z as usize]] as f64
        }
    };
    let mut acc = 0.0;
    for dx in 0..2 {
        let wx = if dx == 0 { 1.0 - w[0] } else { w[0] };
        if wx == 0.0 {
            continue;
        }
        for dy in 0..2 {
            let wy = if dy == 0 { 1.0 - w[1] } else { w[1] };
            if wy == 0.0 {
                continue;
            }
            for dz in 0..2 {
                let wz = if dz == 0 { 1.0 - w[2] } else { w[2] };
                if wz == 0.0 {
                    continue;
                }
                acc += wx * wy * wz * fetch(base[0] + dx, base[1] + dy, base[2] + dz);
            }
        }
    }
    acc as f32
}

fn sample_nearest(volume: &ArrayView3<'_, u8>, p: [f64; 3]) -> u8 {
    let dims = volume.dim();
    let n = [dims.0, dims.1, dims.2];
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let r = (p[a] + 0.5).floor();
        if r < 0.0 || r >= n[a] as f64 {
            return 0;
        }
        idx[a] = r as usize;
    }
    volume[idx]
}

/// Warps a case with a random b-spline deformation (channels linear, labels nearest).
pub fn bspline_deform(case: &MultiModalCase, config: &AugmentConfig, seed: u64) -> Result<Deformation> {
    config.validate()?;
    let shape = case.shape();
    let (field, jac) = bspline_field(shape, config.bspline_grid, config.bspline_sigma, seed);
    let min_jacobian = jac.iter().copied().fold(f64::INFINITY, f64::min);
    let mut channels = Array4::<f32>::zeros(case.channels.raw_dim());
    let mut labels = case.labels.as_ref().map(|l| Array3::<u8>::zeros(l.raw_dim()));
    let views: Vec<ArrayView3<'_, f32>> = case.channels.outer_iter().collect();
    let label_view = case.labels.as_ref().map(|l| l.view());
    for x in 0..shape[0] {
        for y in 0..shape[1] {
            for z in 0..shape[2] {
                let p = [
                    x as f64 + field[[0, x, y, z]],
                    y as f64 + field[[1, x, y, z]],
                    z as f64 + field[[2, x, y, z]],
                ];
                for (c, v) in views.iter().enumerate() {
                    channels[[c, x, y, z]] = sample_linear(v, p);
                }
                if let (Some(out), Some(src)) = (labels.as_mut(), label_view.as_ref()) {
                    out[[x, y, z]] = sample_nearest(src, p);
                }
            }
        }
    }
    if min_jacobian <= 0.0 {
        log::warn!(
            "b-spline deformation of {} folds the grid (min Jacobian {min_jacobian:.3})",
            case.case_id
        );
    }
    Ok(Deformation {
        case: MultiModalCase {
            case_id: case.case_id.clone(),
            channels,
            labels,
            grid: case.grid.clone(),
        },
        min_jacobian,
    })
}

/// Applies the per-sample training augmentations in order: flip, then mute.
pub fn augment_for_training<R: Rng + ?Sized>(
    case: &MultiModalCase,
    config: &AugmentConfig,
    rng: &mut R,
) -> MultiModalCase {
    let flip = draw_flip(rng, config.flip_prob);
    let mutes = draw_mutes(rng, config.mute_prob);
    let flipped = sagittal_flip(case, flip);
    channel_mute(&flipped, mutes, config.noise_mean, config.noise_std, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};

    fn phantom() -> MultiModalCase {
        generate_phantom("p", &PhantomSpec::standard([16, 14, 12], 3)).unwrap().case
    }

    #[test]
    fn flip_is_an_involution() {
        let case = phantom();
        let twice = sagittal_flip(&sagittal_flip(&case, true), true);
        assert_eq!(twice, case);
        assert_eq!(sagittal_flip(&case, false), case);
        assert_ne!(sagittal_flip(&case, true), case);
    }

    #[test]
    fn no_mute_draws_is_identity() {
        let case = phantom();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(channel_mute(&case, [false; 4], 5.0, 2.5, &mut rng), case);
    }

    #[test]
    fn mute_touches_only_drawn_channels() {
        let case = phantom();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = channel_mute(&case, [false, true, false, false], 5.0, 2.5, &mut rng);
        assert_eq!(out.labels, case.labels);
        for c in [0, 2, 3] {
            assert_eq!(out.channels.index_axis(Axis(0), c), case.channels.index_axis(Axis(0), c));
        }
        assert_ne!(out.channels.index_axis(Axis(0), 1), case.channels.index_axis(Axis(0), 1));
    }

    #[test]
    fn zero_sigma_is_identity_warp() {
        let case = phantom();
        let config = AugmentConfig {
            bspline_sigma: 0.0,
            bspline_grid: 4,
            ..Default::default()
        };
        let d = bspline_deform(&case, &config, 5).unwrap();
        assert_eq!(d.case, case);
        assert_eq!(d.min_jacobian, 1.0);
    }

    #[test]
    fn warp_is_seeded_and_keeps_labels_valid() {
        let case = phantom();
        let config = AugmentConfig {
            bspline_sigma: 1.5,
            bspline_grid: 4,
            ..Default::default()
        };
        let a = bspline_deform(&case, &config, 11).unwrap();
        let b = bspline_deform(&case, &config, 11).unwrap();
        assert_eq!(a.case, b.case);
        assert_ne!(a.case, case);
        assert!(a.case.labels.unwrap().iter().all(|v| [0, 1, 2, 4].contains(v)));
    }

    #[test]
    fn huge_sigma_reports_folding() {
        let case = phantom();
        let config = AugmentConfig {
            bspline_sigma: 20.0,
            bspline_grid: 3,
            ..Default::default()
        };
        let d = bspline_deform(&case, &config, 2).unwrap();
        assert!(d.folded());
        assert_eq!(d.case.shape(), case.shape());
    }

    #[test]
    fn bspline_basis_is_a_partition_of_unity() {
        for i in 0..=20 {
            let t = i as f64 / 20.0;
            let s: f64 = basis(t).iter().sum();
            let ds: f64 = basis_derivative(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(ds.abs() < 1e-12);
        }
    }

    #[test]
    fn field_jacobian_matches_finite_differences() {
        let shape = [12, 12, 12];
        let (field, jac) = bspline_field(shape, 4, 0.8, 3);
        let (x, y, z) = (5, 6, 7);
        // central differences of x + u(x) on the voxel lattice only approximate the
        // analytic derivative; the cubic field is smooth enough for a loose check
        let mut m = [[0.0; 3]; 3];
        for c in 0..3 {
            m[c][0] = (field[[c, x + 1, y, z]] - field[[c, x - 1, y, z]]) / 2.0;
            m[c][1] = (field[[c, x, y + 1, z]] - field[[c, x, y - 1, z]]) / 2.0;
            m[c][2] = (field[[c, x, y, z + 1]] - field[[c, x, y, z - 1]]) / 2.0;
            m[c][c] += 1.0;
        }
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        assert!((det - jac[[x, y, z]]).abs() < 0.05, "{det} vs {}", jac[[x, y, z]]);
    }

    #[test]
    fn derived_seeds_differ_per_case_and_epoch() {
        let a = derive_seed(1, "a", 0);
        assert_ne!(a, derive_seed(1, "b", 0));
        assert_ne!(a, derive_seed(1, "a", 1));
        assert_eq!(a, derive_seed(1, "a", 0));
    }
}
