//! Separable 1D interpolation kernels shared by voxel resampling and the
//! neural upsampling layer.
//!
//! Sample positions use the half-pixel convention: output index `d` maps to
//! source coordinate `(d + 0.5) · n_in / n_out − 0.5`. The coordinate is
//! computed from integers, so two calls whose `n_in / n_out` ratios agree
//! produce bit-identical fractional weights. Edges are clamped.

use crate::scalar::Scalar;

/// Two-tap linear weights for one output sample: `(1 − w)·src[lo] + w·src[hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearTap {
    pub lo: usize,
    pub hi: usize,
    pub w: f64,
}

/// Four-tap cubic weights for one output sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubicTap {
    pub idx: [usize; 4],
    pub w: [f64; 4],
}

/// Source coordinate of output sample `d` as `(floor, fraction)`.
/// `floor` may be negative at the leading edge.
fn source_coord(d: usize, n_in: usize, n_out: usize) -> (i64, f64) {
    let num = (2 * d as i64 + 1) * n_in as i64 - n_out as i64;
    let den = 2 * n_out as i64;
    let fl = num.div_euclid(den);
    let rem = num.rem_euclid(den);
    (fl, rem as f64 / den as f64)
}

pub fn linear_taps(n_in: usize, n_out: usize) -> Vec<LinearTap> {
    assert!(n_in > 0 && n_out > 0);
    (0..n_out)
        .map(|d| {
            let (fl, frac) = source_coord(d, n_in, n_out);
            if fl < 0 {
                LinearTap { lo: 0, hi: 0, w: 0.0 }
            } else if fl as usize >= n_in - 1 {
                LinearTap { lo: n_in - 1, hi: n_in - 1, w: 0.0 }
            } else {
                let lo = fl as usize;
                LinearTap { lo, hi: lo + 1, w: frac }
            }
        })
        .collect()
}

/// Catmull-Rom (Keys, a = −0.5) cubic weights with clamped indices.
pub fn cubic_taps(n_in: usize, n_out: usize) -> Vec<CubicTap> {
    assert!(n_in > 0 && n_out > 0);
    const A: f64 = -0.5;
    let kernel = |x: f64| {
        let x = x.abs();
        if x <= 1.0 {
            ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
        } else if x < 2.0 {
            ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
        } else {
            0.0
        }
    };
    let clamp = |i: i64| i.clamp(0, n_in as i64 - 1) as usize;
    (0..n_out)
        .map(|d| {
            let (fl, t) = source_coord(d, n_in, n_out);
            let w = if t == 0.0 {
                [0.0, 1.0, 0.0, 0.0]
            } else {
                [kernel(1.0 + t), kernel(t), kernel(1.0 - t), kernel(2.0 - t)]
            };
            CubicTap {
                idx: [clamp(fl - 1), clamp(fl), clamp(fl + 1), clamp(fl + 2)],
                w,
            }
        })
        .collect()
}

pub fn nearest_indices(n_in: usize, n_out: usize) -> Vec<usize> {
    assert!(n_in > 0 && n_out > 0);
    (0..n_out)
        .map(|d| ((d * n_in) as f64 + 0.5 * n_in as f64) / n_out as f64)
        .map(|s| (s.floor() as usize).min(n_in - 1))
        .collect()
}

/// Interpolation family for [`resample_axis`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    Linear,
    Cubic,
    Nearest,
}

/// Resamples `data` (x-fastest, `dims`) along one axis to `n_out` samples.
pub fn resample_axis<T: Scalar>(
    data: &[T],
    dims: [usize; 3],
    axis: usize,
    n_out: usize,
    kernel: Kernel,
) -> (Vec<T>, [usize; 3]) {
    let n_in = dims[axis];
    let mut out_dims = dims;
    out_dims[axis] = n_out;
    let total = out_dims[0] * out_dims[1] * out_dims[2];
    let mut out = vec![T::zero(); total];
    if total == 0 {
        return (out, out_dims);
    }
    let in_stride = [1, dims[0], dims[0] * dims[1]][axis];
    let out_stride = [1, out_dims[0], out_dims[0] * out_dims[1]][axis];

    // Every line along `axis` starts at a base offset that shares the other
    // two coordinates between input and output.
    let lines: Vec<(usize, usize)> = {
        let mut v = Vec::with_capacity(total / n_out.max(1));
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for j in 0..dims[b] {
            for i in 0..dims[a] {
                let mut c = [0usize; 3];
                c[a] = i;
                c[b] = j;
                let ib = c[0] + dims[0] * (c[1] + dims[1] * c[2]);
                let ob = c[0] + out_dims[0] * (c[1] + out_dims[1] * c[2]);
                v.push((ib, ob));
            }
        }
        v
    };

    match kernel {
        Kernel::Linear => {
            let taps = linear_taps(n_in, n_out);
            let taps: Vec<(usize, usize, T, T)> = taps
                .iter()
                .map(|t| (t.lo, t.hi, T::one() - T::lit(t.w), T::lit(t.w)))
                .collect();
            for &(ib, ob) in &lines {
                for (d, &(lo, hi, w0, w1)) in taps.iter().enumerate() {
                    out[ob + d * out_stride] =
                        data[ib + lo * in_stride] * w0 + data[ib + hi * in_stride] * w1;
                }
            }
        }
        Kernel::Cubic => {
            let taps = cubic_taps(n_in, n_out);
            for &(ib, ob) in &lines {
                for (d, t) in taps.iter().enumerate() {
                    let mut acc = T::zero();
                    for k in 0..4 {
                        acc += data[ib + t.idx[k] * in_stride] * T::lit(t.w[k]);
                    }
                    out[ob + d * out_stride] = acc;
                }
            }
        }
        Kernel::Nearest => {
            let idx = nearest_indices(n_in, n_out);
            for &(ib, ob) in &lines {
                for (d, &s) in idx.iter().enumerate() {
                    out[ob + d * out_stride] = data[ib + s * in_stride];
                }
            }
        }
    }
    (out, out_dims)
}

/// Separable resampling to `out_dims`, axes processed in x, y, z order.
/// Axes whose extent does not change are skipped.
pub fn resample_separable<T: Scalar>(
    data: &[T],
    dims: [usize; 3],
    out_dims: [usize; 3],
    kernel: Kernel,
) -> Vec<T> {
    let mut cur = data.to_vec();
    let mut cur_dims = dims;
    for axis in 0..3 {
        if out_dims[axis] != cur_dims[axis] {
            let (next, nd) = resample_axis(&cur, cur_dims, axis, out_dims[axis], kernel);
            cur = next;
            cur_dims = nd;
        }
    }
    cur
}

/// Adjoint of [`resample_axis`] with [`Kernel::Linear`]: scatters `grad_out`
/// (shape `dims` with `axis` replaced by `n_out`) back to the input lattice.
pub fn linear_axis_adjoint<T: Scalar>(
    grad_out: &[T],
    dims: [usize; 3],
    axis: usize,
    n_out: usize,
) -> Vec<T> {
    let n_in = dims[axis];
    let mut out_dims = dims;
    out_dims[axis] = n_out;
    let mut grad_in = vec![T::zero(); dims[0] * dims[1] * dims[2]];
    let taps = linear_taps(n_in, n_out);
    let in_stride = [1, dims[0], dims[0] * dims[1]][axis];
    let out_stride = [1, out_dims[0], out_dims[0] * out_dims[1]][axis];
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    for j in 0..dims[b] {
        for i in 0..dims[a] {
            let mut c = [0usize; 3];
            c[a] = i;
            c[b] = j;
            let ib = c[0] + dims[0] * (c[1] + dims[1] * c[2]);
            let ob = c[0] + out_dims[0] * (c[1] + out_dims[1] * c[2]);
            for (d, t) in taps.iter().enumerate() {
                let g = grad_out[ob + d * out_stride];
                let w1 = T::lit(t.w);
                grad_in[ib + t.lo * in_stride] += g * (T::one() - w1);
                grad_in[ib + t.hi * in_stride] += g * w1;
            }
        }
    }
    grad_in
}
