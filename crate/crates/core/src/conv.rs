//! Direct 3x3 convolution kernels (stride 1, zero padding 1).
//!
//! Every channel of an item is copied into a zero-bordered plane of
//! `(H+2)·(W+2)` values plus two slack values. In that layout the output
//! pixel `(y, x)` lives at flat index `i = y·(W+2) + x` of an `H·(W+2)`
//! "row-padded" plane, and the nine taps of its window are the padded-plane
//! values at `i + ky·(W+2) + kx`. Each output plane is then one long loop of
//! nine shifted multiply-adds per input channel, which the compiler
//! vectorizes without any packing or unfolding. The two extra values per
//! row are scratch and are dropped when the result is compacted.
//!
//! Products are accumulated with fused multiply-adds. On x86-64 the kernels
//! are also compiled with AVX2 and FMA enabled and selected at run time;
//! both variants perform the same fused operations in the same order, so
//! results do not depend on the variant.

use crate::scalar::Scalar;

/// Lanes of the per-lane accumulators used by the weight-gradient
/// reduction. A fixed lane count keeps the summation order independent of
/// the vector width.
const LANES: usize = 8;

/// Geometry of one padded plane.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Plane {
    pub h: usize,
    pub w: usize,
}

impl Plane {
    /// Width of a padded row.
    fn stride(self) -> usize {
        self.w + 2
    }

    /// Values in one padded plane, including the two slack values.
    pub fn padded_len(self) -> usize {
        (self.h + 2) * self.stride() + 2
    }

    /// Values in one row-padded output plane.
    pub fn rows_len(self) -> usize {
        self.h * self.stride()
    }

    /// Offset of the row-padded window of a padded plane whose pixels are
    /// the interior pixels.
    pub fn interior(self) -> usize {
        self.stride() + 1
    }

    fn tap(self, k: usize) -> usize {
        (k / 3) * self.stride() + k % 3
    }
}

/// Copies `c` planes of `x` (C, H, W) into zero-bordered padded planes.
pub(crate) fn pad<T: Scalar>(x: &[T], c: usize, p: Plane) -> Vec<T> {
    let mut out = vec![T::zero(); c * p.padded_len()];
    for (src, dst) in x
        .chunks_exact(p.h * p.w)
        .take(c)
        .zip(out.chunks_exact_mut(p.padded_len()))
    {
        for (y, row) in src.chunks_exact(p.w).enumerate() {
            let at = (y + 1) * p.stride() + 1;
            dst[at..at + p.w].copy_from_slice(row);
        }
    }
    out
}

/// Adds row-padded planes `acc` (C, H·(W+2)) into compact planes `out`
/// (C, H, W).
pub(crate) fn add_compact<T: Scalar>(acc: &[T], c: usize, p: Plane, out: &mut [T]) {
    for (src, dst) in acc
        .chunks_exact(p.rows_len())
        .take(c)
        .zip(out.chunks_exact_mut(p.h * p.w))
    {
        for (s, d) in src.chunks_exact(p.stride()).zip(dst.chunks_exact_mut(p.w)) {
            for (a, &b) in d.iter_mut().zip(&s[..p.w]) {
                *a = *a + b;
            }
        }
    }
}

/// Row-padded convolution of padded planes `xp` (I channels) with kernels
/// `k` laid out (O, I, 9). Returns O row-padded planes.
pub(crate) fn conv3<T: Scalar>(xp: &[T], ic: usize, k: &[T], oc: usize, p: Plane) -> Vec<T> {
    let mut acc = vec![T::zero(); oc * p.rows_len()];
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
        // SAFETY: the CPU supports AVX2 and FMA, checked just above.
        unsafe { conv3_avx2(xp, ic, k, p, &mut acc) };
        return acc;
    }
    conv3_body(xp, ic, k, p, &mut acc);
    acc
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
fn conv3_avx2<T: Scalar>(xp: &[T], ic: usize, k: &[T], p: Plane, acc: &mut [T]) {
    conv3_body(xp, ic, k, p, acc);
}

#[inline(always)]
fn conv3_body<T: Scalar>(xp: &[T], ic: usize, k: &[T], p: Plane, acc: &mut [T]) {
    let (n, pl) = (p.rows_len(), p.padded_len());
    let taps: [usize; 9] = std::array::from_fn(|t| p.tap(t));
    for (o, dst) in acc.chunks_exact_mut(n).enumerate() {
        for i in 0..ic {
            let src = &xp[i * pl..(i + 1) * pl];
            let w = &k[(o * ic + i) * 9..(o * ic + i + 1) * 9];
            let s: [&[T]; 9] = std::array::from_fn(|t| &src[taps[t]..taps[t] + n]);
            for j in 0..n {
                let mut v = dst[j];
                for t in 0..9 {
                    v = w[t].mul_add(s[t][j], v);
                }
                dst[j] = v;
            }
        }
    }
}

/// Accumulates the kernel gradient into `dk` (O, I, 9): the correlation of
/// padded output gradients `gp` (O planes) with padded inputs `xp` (I
/// planes). The interior window of a padded plane is zero in its scratch
/// columns, so they contribute nothing.
pub(crate) fn kernel_grad<T: Scalar>(xp: &[T], ic: usize, gp: &[T], p: Plane, dk: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
        // SAFETY: the CPU supports AVX2 and FMA, checked just above.
        unsafe { kernel_grad_avx2(xp, ic, gp, p, dk) };
        return;
    }
    kernel_grad_body(xp, ic, gp, p, dk);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
fn kernel_grad_avx2<T: Scalar>(xp: &[T], ic: usize, gp: &[T], p: Plane, dk: &mut [T]) {
    kernel_grad_body(xp, ic, gp, p, dk);
}

#[inline(always)]
fn kernel_grad_body<T: Scalar>(xp: &[T], ic: usize, gp: &[T], p: Plane, dk: &mut [T]) {
    let (n, pl) = (p.rows_len(), p.padded_len());
    let taps: [usize; 9] = std::array::from_fn(|t| p.tap(t));
    let full = n / LANES * LANES;
    for (o, plane) in gp.chunks_exact(pl).enumerate() {
        let go = &plane[p.interior()..p.interior() + n];
        for i in 0..ic {
            let src = &xp[i * pl..(i + 1) * pl];
            let s: [&[T]; 9] = std::array::from_fn(|t| &src[taps[t]..taps[t] + n]);
            let mut lanes = [[T::zero(); LANES]; 9];
            for j in (0..full).step_by(LANES) {
                let gv: &[T; LANES] = go[j..j + LANES].try_into().expect("lane chunk");
                for (acc, st) in lanes.iter_mut().zip(&s) {
                    let sv: &[T; LANES] = st[j..j + LANES].try_into().expect("lane chunk");
                    for l in 0..LANES {
                        acc[l] = gv[l].mul_add(sv[l], acc[l]);
                    }
                }
            }
            let out = &mut dk[(o * ic + i) * 9..(o * ic + i + 1) * 9];
            for (t, acc) in lanes.iter().enumerate() {
                let mut total = acc.iter().fold(T::zero(), |a, &b| a + b);
                for j in full..n {
                    total = go[j].mul_add(s[t][j], total);
                }
                out[t] = out[t] + total;
            }
        }
    }
}

/// Kernels of the transposed convolution: (O, I, 3, 3) kernels rearranged
/// as (I, O, 9) with each 3x3 rotated by 180 degrees.
pub(crate) fn transposed_kernels<T: Scalar>(w: &[T], oc: usize, ic: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for o in 0..oc {
        for i in 0..ic {
            for t in 0..9 {
                out[(i * oc + o) * 9 + t] = w[(o * ic + i) * 9 + 8 - t];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padded_layout_round_trips_through_compaction() {
        let p = Plane { h: 3, w: 4 };
        let x: Vec<f64> = (0..24).map(f64::from).collect();
        let xp = pad(&x, 2, p);
        assert_eq!(xp.len(), 2 * p.padded_len());
        let mut back = vec![0.0; 24];
        let rows: Vec<f64> = xp
            .chunks_exact(p.padded_len())
            .flat_map(|plane| plane[p.interior()..p.interior() + p.rows_len()].to_vec())
            .collect();
        add_compact(&rows, 2, p, &mut back);
        assert_eq!(back, x);
        // the scratch columns of the interior window are border zeros
        for plane in xp.chunks_exact(p.padded_len()) {
            let win = &plane[p.interior()..p.interior() + p.rows_len()];
            for row in win.chunks_exact(p.stride()) {
                assert_eq!(&row[p.w..], &[0.0, 0.0]);
            }
        }
    }

    #[test]
    fn transposed_kernels_rotate_and_swap() {
        let w: Vec<f64> = (0..2 * 3 * 9).map(f64::from).collect();
        let t = transposed_kernels(&w, 2, 3);
        for o in 0..2 {
            for i in 0..3 {
                for k in 0..9 {
                    assert_eq!(t[(i * 2 + o) * 9 + k], w[(o * 3 + i) * 9 + 8 - k]);
                }
            }
        }
    }
}
