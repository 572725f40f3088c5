//! im2col / col2im kernels shared by convolution and transposed convolution.
//!
//! A transposed convolution is the adjoint of a convolution with the same
//! geometry, so both are expressed over one [`Geom`]: `big` is the image
//! side (convolution input, transposed-convolution output) and `small` the
//! patch side (convolution output, transposed-convolution input).

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};

use super::Real;

use std::sync::atomic::{AtomicUsize, Ordering};

/// Upper bound on the number of elements of one im2col buffer.
static COLUMN_BUDGET: AtomicUsize = AtomicUsize::new(1 << 22);

#[cfg(test)]
pub(crate) fn set_column_budget(elements: usize) -> usize {
    COLUMN_BUDGET.swap(elements, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Geom {
    pub big: [usize; 3],
    pub small: [usize; 3],
    pub k: usize,
    pub s: usize,
    pub p: usize,
}

impl Geom {
    pub fn conv(input: [usize; 3], k: usize, s: usize, p: usize) -> Option<Geom> {
        let mut small = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * p;
            if padded < k {
                return None;
            }
            small[a] = (padded - k) / s + 1;
        }
        Some(Geom {
            big: input,
            small,
            k,
            s,
            p,
        })
    }

    pub fn transposed(input: [usize; 3], k: usize, s: usize, p: usize) -> Option<Geom> {
        let mut big = [0; 3];
        for a in 0..3 {
            let full = (input[a].checked_sub(1)?) * s + k;
            big[a] = full.checked_sub(2 * p).filter(|&v| v > 0)?;
        }
        Some(Geom {
            big,
            small: input,
            k,
            s,
            p,
        })
    }

    pub fn big_len(&self) -> usize {
        self.big.iter().product()
    }

    pub fn small_len(&self) -> usize {
        self.small.iter().product()
    }

    fn small_plane(&self) -> usize {
        self.small[1] * self.small[2]
    }

    pub fn taps(&self) -> usize {
        self.k * self.k * self.k
    }

    /// Splits the patch side into depth ranges whose column buffers fit the budget.
    pub fn chunks(&self, rows: usize) -> Vec<(usize, usize)> {
        let per_plane = rows * self.small_plane();
        let planes = (COLUMN_BUDGET.load(Ordering::Relaxed) / per_plane.max(1)).max(1);
        (0..self.small[0])
            .step_by(planes)
            .map(|d0| (d0, (d0 + planes).min(self.small[0])))
            .collect()
    }

    /// Range of patch indices `o` with `0 <= o*s + tap - p < n`.
    fn valid(&self, n_big: usize, n_small: usize, tap: usize) -> (usize, usize) {
        let s = self.s as isize;
        let offset = tap as isize - self.p as isize;
        // o*s + offset >= 0  <=>  o >= ceil(-offset / s)
        let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
        // o*s + offset < n  <=>  o < ceil((n - offset) / s)
        let hi_num = n_big as isize - offset;
        let hi = if hi_num <= 0 { 0 } else { (hi_num + s - 1) / s };
        let lo = (lo as usize).min(n_small);
        let hi = (hi as usize).clamp(lo, n_small);
        (lo, hi)
    }
}

/// Gathers patches of `channels` image planes for patch depths `d0..d1`
/// into `cols`, laid out `[channels * k^3, (d1 - d0) * plane]`.
pub(crate) fn im2col<T: Real>(
    src: &[T],
    channels: usize,
    g: &Geom,
    (d0, d1): (usize, usize),
    cols: &mut [T],
) {
    let [bd, bh, bw] = g.big;
    let [_, sh, sw] = g.small;
    let plane = sh * sw;
    let ncols = (d1 - d0) * plane;
    let big_plane = bh * bw;
    let big_len = bd * big_plane;
    debug_assert_eq!(cols.len(), channels * g.taps() * ncols);
    let (s, p) = (g.s as isize, g.p as isize);
    let mut row = 0;
    for c in 0..channels {
        let channel = &src[c * big_len..(c + 1) * big_len];
        for kd in 0..g.k {
            for kh in 0..g.k {
                let (oh_lo, oh_hi) = g.valid(bh, sh, kh);
                for kw in 0..g.k {
                    let (ow_lo, ow_hi) = g.valid(bw, sw, kw);
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    row += 1;
                    for od in d0..d1 {
                        let out = &mut dst[(od - d0) * plane..(od - d0 + 1) * plane];
                        let id = od as isize * s + kd as isize - p;
                        if id < 0 || id >= bd as isize {
                            out.fill(T::zero());
                            continue;
                        }
                        let slab = &channel[id as usize * big_plane..(id as usize + 1) * big_plane];
                        out[..oh_lo * sw].fill(T::zero());
                        out[oh_hi * sw..].fill(T::zero());
                        for oh in oh_lo..oh_hi {
                            let ih = (oh as isize * s + kh as isize - p) as usize;
                            let line = &slab[ih * bw..(ih + 1) * bw];
                            let o = &mut out[oh * sw..(oh + 1) * sw];
                            o[..ow_lo].fill(T::zero());
                            o[ow_hi..].fill(T::zero());
                            if g.s == 1 {
                                let iw0 = (ow_lo as isize + kw as isize - p) as usize;
                                o[ow_lo..ow_hi].copy_from_slice(&line[iw0..iw0 + (ow_hi - ow_lo)]);
                            } else {
                                for ow in ow_lo..ow_hi {
                                    o[ow] = line[(ow as isize * s + kw as isize - p) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds `cols` back onto the image planes.
pub(crate) fn col2im<T: Real>(
    cols: &[T],
    channels: usize,
    g: &Geom,
    (d0, d1): (usize, usize),
    dst: &mut [T],
) {
    let [bd, bh, bw] = g.big;
    let [_, sh, sw] = g.small;
    let plane = sh * sw;
    let ncols = (d1 - d0) * plane;
    let big_plane = bh * bw;
    let big_len = bd * big_plane;
    let (s, p) = (g.s as isize, g.p as isize);
    let mut row = 0;
    for c in 0..channels {
        let channel = &mut dst[c * big_len..(c + 1) * big_len];
        for kd in 0..g.k {
            for kh in 0..g.k {
                let (oh_lo, oh_hi) = g.valid(bh, sh, kh);
                for kw in 0..g.k {
                    let (ow_lo, ow_hi) = g.valid(bw, sw, kw);
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    row += 1;
                    for od in d0..d1 {
                        let id = od as isize * s + kd as isize - p;
                        if id < 0 || id >= bd as isize {
                            continue;
                        }
                        let from = &src[(od - d0) * plane..(od - d0 + 1) * plane];
                        let slab =
                            &mut channel[id as usize * big_plane..(id as usize + 1) * big_plane];
                        for oh in oh_lo..oh_hi {
                            let ih = (oh as isize * s + kh as isize - p) as usize;
                            let line = &mut slab[ih * bw..(ih + 1) * bw];
                            let f = &from[oh * sw..(oh + 1) * sw];
                            for ow in ow_lo..ow_hi {
                                let iw = (ow as isize * s + kw as isize - p) as usize;
                                line[iw] += f[ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * a . b + beta * c`
pub(crate) fn gemm<T: Real>(alpha: T, a: &ArrayView2<'_, T>, b: &ArrayView2<'_, T>, beta: T, c: &mut ArrayViewMut2<'_, T>) {
    general_mat_mul(alpha, a, b, beta, c);
}

/// Row-strided `[rows, len]` view into a channel-major buffer.
pub(crate) fn rows_view<T>(buf: &[T], offset: usize, rows: usize, row_stride: usize, len: usize) -> ArrayView2<'_, T> {
    let end = offset + (rows - 1) * row_stride + len;
    ArrayView2::from_shape((rows, len).strides((row_stride, 1)), &buf[offset..end])
        .expect("strided view within bounds")
}

pub(crate) fn rows_view_mut<T>(
    buf: &mut [T],
    offset: usize,
    rows: usize,
    row_stride: usize,
    len: usize,
) -> ArrayViewMut2<'_, T> {
    let end = offset + (rows - 1) * row_stride + len;
    ArrayViewMut2::from_shape((rows, len).strides((row_stride, 1)), &mut buf[offset..end])
        .expect("strided view within bounds")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_patch(src: &[f64], g: &Geom, c: usize, tap: [usize; 3], o: [usize; 3]) -> f64 {
        let mut idx = [0isize; 3];
        for a in 0..3 {
            idx[a] = (o[a] * g.s + tap[a]) as isize - g.p as isize;
            if idx[a] < 0 || idx[a] >= g.big[a] as isize {
                return 0.0;
            }
        }
        let [_, bh, bw] = g.big;
        src[c * g.big_len() + (idx[0] as usize * bh + idx[1] as usize) * bw + idx[2] as usize]
    }

    #[test]
    fn im2col_matches_direct_indexing() {
        for (big, k, s, p) in [([5, 4, 6], 3, 1, 1), ([6, 6, 4], 2, 2, 0), ([7, 5, 5], 3, 2, 1)] {
            let g = Geom::conv(big, k, s, p).unwrap();
            let channels = 2;
            let src: Vec<f64> = (0..channels * g.big_len()).map(|i| i as f64 + 1.0).collect();
            let range = (0, g.small[0]);
            let ncols = g.small_len();
            let mut cols = vec![0.0; channels * g.taps() * ncols];
            im2col(&src, channels, &g, range, &mut cols);
            let mut row = 0;
            for c in 0..channels {
                for kd in 0..k {
                    for kh in 0..k {
                        for kw in 0..k {
                            for od in 0..g.small[0] {
                                for oh in 0..g.small[1] {
                                    for ow in 0..g.small[2] {
                                        let col = (od * g.small[1] + oh) * g.small[2] + ow;
                                        assert_eq!(
                                            cols[row * ncols + col],
                                            naive_patch(&src, &g, c, [kd, kh, kw], [od, oh, ow])
                                        );
                                    }
                                }
                            }
                            row += 1;
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = Geom::conv([5, 6, 4], 3, 2, 1).unwrap();
        let channels = 3;
        let x: Vec<f64> = (0..channels * g.big_len()).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let n = channels * g.taps() * g.small_len();
        let y: Vec<f64> = (0..n).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let mut cols = vec![0.0; n];
        im2col(&x, channels, &g, (0, g.small[0]), &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, channels, &g, (0, g.small[0]), &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn transposed_geometry_inverts_conv_geometry() {
        let c = Geom::conv([8, 6, 4], 2, 2, 0).unwrap();
        assert_eq!(c.small, [4, 3, 2]);
        let t = Geom::transposed([4, 3, 2], 2, 2, 0).unwrap();
        assert_eq!(t, c);
    }
}
