//! 3x3 same-padded convolution over a "wide" padded layout.
//!
//! Each sample plane is copied into a zero-bordered buffer of row length
//! `W + 2`. Output position `p = y(W+2) + x` then reads input at `p + ky(W+2) + kx`,
//! so every tap is a contiguous slice and the inner loops are plain vector
//! multiply-adds. Wide rows carry two discarded columns each. The input
//! gradient is the same convolution applied to the output gradient with
//! spatially flipped, channel-transposed weights.

use super::layer::KERNEL;
use super::tensor::{lane_sum, Scalar};

const TAPS: usize = KERNEL * KERNEL;
/// Lanes per output block in the forward kernel.
const BLOCK: usize = 32;
/// Lanes per accumulator in the weight-gradient kernel.
const DOT: usize = 8;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Copy)]
struct Wide {
    h: usize,
    w: usize,
    row: usize,
    /// Wide positions per plane, rounded up to a whole number of blocks.
    span: usize,
    /// Padded plane stride (border rows plus read slack).
    plane: usize,
}

impl Wide {
    fn new(h: usize, w: usize) -> Self {
        let row = w + 2;
        let span = (h * row).div_ceil(BLOCK) * BLOCK;
        Wide {
            h,
            w,
            row,
            span,
            plane: span + 2 * row + 2,
        }
    }

    fn offset(&self, tap: usize) -> usize {
        (tap / KERNEL) * self.row + tap % KERNEL
    }

    /// Zero-bordered copy of `[n, planes, h, w]` as `[n * planes, plane]`.
    fn pad<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let hw = self.h * self.w;
        let count = x.len() / hw;
        let mut out = vec![T::zero(); count * self.plane];
        for (src, dst) in x.chunks_exact(hw).zip(out.chunks_exact_mut(self.plane)) {
            for (y, line) in src.chunks_exact(self.w).enumerate() {
                let start = (y + 1) * self.row + 1;
                dst[start..start + self.w].copy_from_slice(line);
            }
        }
        out
    }

    /// Output-gradient planes laid out on the wide grid, discarded columns zero.
    fn widen<T: Scalar>(&self, dy: &[T]) -> Vec<T> {
        let hw = self.h * self.w;
        let count = dy.len() / hw;
        let mut out = vec![T::zero(); count * self.span];
        for (src, dst) in dy.chunks_exact(hw).zip(out.chunks_exact_mut(self.span)) {
            for (y, line) in src.chunks_exact(self.w).enumerate() {
                dst[y * self.row..y * self.row + self.w].copy_from_slice(line);
            }
        }
        out
    }
}

/// Output `[batch, co, h, w]` of a padded input `[batch, ci, plane]`.
#[inline(always)]
fn correlate_impl<T: Scalar>(g: &Wide, padded: &[T], weight: &[T], bias: &[T], ci: usize, co: usize) -> Vec<T> {
    let batch = padded.len() / (ci * g.plane);
    let hw = g.h * g.w;
    let mut out = vec![T::zero(); batch * co * hw];
    for s in 0..batch {
        let xs = &padded[s * ci * g.plane..(s + 1) * ci * g.plane];
        let dst = &mut out[s * co * hw..(s + 1) * co * hw];
        let mut o = 0;
        while o + 2 <= co {
            correlate_block::<T, 2>(g, xs, weight, bias, ci, o, dst);
            o += 2;
        }
        if o < co {
            correlate_block::<T, 1>(g, xs, weight, bias, ci, o, dst);
        }
    }
    out
}

/// Output channels `o0..o0 + OUT` of one sample.
#[inline(always)]
fn correlate_block<T: Scalar, const OUT: usize>(
    g: &Wide,
    xs: &[T],
    weight: &[T],
    bias: &[T],
    ci: usize,
    o0: usize,
    dst: &mut [T],
) {
    let offsets: [usize; TAPS] = std::array::from_fn(|t| g.offset(t));
    for p0 in (0..g.span).step_by(BLOCK) {
        let mut acc: [[T; BLOCK]; OUT] = std::array::from_fn(|j| [bias[o0 + j]; BLOCK]);
        for c in 0..ci {
            let plane = &xs[c * g.plane..(c + 1) * g.plane];
            assert!(p0 + offsets[TAPS - 1] + BLOCK <= plane.len());
            let taps: [&[T]; OUT] = std::array::from_fn(|j| &weight[((o0 + j) * ci + c) * TAPS..][..TAPS]);
            for (t, &off) in offsets.iter().enumerate() {
                // SAFETY: offsets are increasing, so the assert above covers every tap.
                let src = unsafe { plane.get_unchecked(p0 + off..p0 + off + BLOCK) };
                for (lanes, w) in acc.iter_mut().zip(&taps) {
                    let wv = w[t];
                    for (a, &v) in lanes.iter_mut().zip(src) {
                        *a = wv.mul_add(v, *a);
                    }
                }
            }
        }
        // Scatter the block back onto the compact grid, skipping the wide columns.
        let hw = g.h * g.w;
        for (j, lanes) in acc.iter().enumerate() {
            let plane = &mut dst[(o0 + j) * hw..(o0 + j + 1) * hw];
            let mut p = p0;
            while p < (p0 + BLOCK).min(g.h * g.row) {
                let (y, x) = (p / g.row, p % g.row);
                let run = (g.w.saturating_sub(x)).min(p0 + BLOCK - p);
                if run > 0 {
                    plane[y * g.w + x..][..run].copy_from_slice(&lanes[p - p0..p - p0 + run]);
                }
                p += run + if x + run >= g.w { g.row - (x + run) } else { 0 };
            }
        }
    }
}

/// `dw[o, c, t] = sum over batch and positions of dwide[o] * padded[c] shifted by t`.
#[inline(always)]
fn weight_grad_impl<T: Scalar>(g: &Wide, padded: &[T], dwide: &[T], ci: usize, co: usize) -> Vec<T> {
    let batch = padded.len() / (ci * g.plane);
    let offsets: [usize; TAPS] = std::array::from_fn(|t| g.offset(t));
    let mut dw = vec![T::zero(); co * ci * TAPS];
    for o in 0..co {
        for c in 0..ci {
            let mut acc = [[T::zero(); DOT]; TAPS];
            for s in 0..batch {
                let d = &dwide[(s * co + o) * g.span..(s * co + o + 1) * g.span];
                let plane = &padded[(s * ci + c) * g.plane..(s * ci + c + 1) * g.plane];
                assert!(g.span + offsets[TAPS - 1] <= plane.len());
                for (blk, dv) in d.chunks_exact(DOT).enumerate() {
                    let p0 = blk * DOT;
                    for (lanes, &off) in acc.iter_mut().zip(&offsets) {
                        // SAFETY: p0 + DOT <= span and the assert above bounds the largest offset.
                        let src = unsafe { plane.get_unchecked(p0 + off..p0 + off + DOT) };
                        for ((a, &x), &d) in lanes.iter_mut().zip(src).zip(dv) {
                            *a = d.mul_add(x, *a);
                        }
                    }
                }
            }
            for (t, lanes) in acc.iter().enumerate() {
                dw[(o * ci + c) * TAPS + t] = lanes.iter().copied().fold(T::zero(), |a, b| a + b);
            }
        }
    }
    dw
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx,fma")]
unsafe fn correlate_avx<T: Scalar>(g: &Wide, padded: &[T], weight: &[T], bias: &[T], ci: usize, co: usize) -> Vec<T> {
    correlate_impl(g, padded, weight, bias, ci, co)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx,fma")]
unsafe fn weight_grad_avx<T: Scalar>(g: &Wide, padded: &[T], dwide: &[T], ci: usize, co: usize) -> Vec<T> {
    weight_grad_impl(g, padded, dwide, ci, co)
}

// Both paths use fused multiply-add in the same order, so they agree bit for
// bit; the fallback is only slower.
fn correlate<T: Scalar>(g: &Wide, padded: &[T], weight: &[T], bias: &[T], ci: usize, co: usize) -> Vec<T> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("fma") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { correlate_avx(g, padded, weight, bias, ci, co) };
    }
    correlate_impl(g, padded, weight, bias, ci, co)
}

fn weight_grad<T: Scalar>(g: &Wide, padded: &[T], dwide: &[T], ci: usize, co: usize) -> Vec<T> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("fma") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { weight_grad_avx(g, padded, dwide, ci, co) };
    }
    weight_grad_impl(g, padded, dwide, ci, co)
}

/// `[batch, co, h, w]` output of `[batch, ci, h, w]` input.
pub(crate) fn forward<T: Scalar>(g: &ConvGeom, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let wide = Wide::new(g.h, g.w);
    let padded = wide.pad(x);
    correlate(&wide, &padded, weight, bias, g.in_channels, g.out_channels)
}

pub(crate) struct ConvGrads<T> {
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
    pub input: Option<Vec<T>>,
}

/// Gradients for the requested `(weight, bias, input)` flags.
pub(crate) fn backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let (want_w, want_b, want_x) = want;
    let (ci, co) = (g.in_channels, g.out_channels);
    let hw = g.h * g.w;
    let wide = Wide::new(g.h, g.w);

    let bias = want_b.then(|| {
        let mut db = vec![T::zero(); co];
        for sample in dy.chunks_exact(co * hw) {
            for (acc, p) in db.iter_mut().zip(sample.chunks_exact(hw)) {
                *acc = *acc + T::lit(lane_sum(p, p, |v, _| v));
            }
        }
        db
    });

    let weight_grad = want_w.then(|| {
        let padded = wide.pad(x);
        let dwide = wide.widen(dy);
        weight_grad(&wide, &padded, &dwide, ci, co)
    });

    let input = want_x.then(|| {
        let mut flipped = vec![T::zero(); weight.len()];
        for o in 0..co {
            for c in 0..ci {
                for t in 0..TAPS {
                    flipped[(c * co + o) * TAPS + (TAPS - 1 - t)] = weight[(o * ci + c) * TAPS + t];
                }
            }
        }
        let padded = wide.pad(dy);
        correlate(&wide, &padded, &flipped, &vec![T::zero(); ci], co, ci)
    });

    ConvGrads {
        weight: weight_grad,
        bias,
        input,
    }
}
