//! Image-quality metrics and gradient statistics.

use std::io::{self, Write};

use thiserror::Error;

use crate::field::Field3;
use crate::volume::VoxelGrid;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 3], [usize; 3]),
    #[error("bit depth mismatch")]
    DepthMismatch,
    #[error("window of {window} exceeds grid extent {extent} on axis {axis}")]
    WindowTooLarge { window: usize, extent: usize, axis: usize },
    #[error("gradient cutoff must be non-negative, got {0}")]
    NegativeCutoff(f64),
    #[error("gradient bin width must be positive, got {0}")]
    InvalidBinWidth(f64),
    #[error("empty grid")]
    Empty,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn check_pair(a: &VoxelGrid, b: &VoxelGrid) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(MetricsError::ShapeMismatch(a.dims(), b.dims()));
    }
    if a.depth() != b.depth() {
        return Err(MetricsError::DepthMismatch);
    }
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB with `MAX = 2^depth − 1`.
/// Identical inputs give `f64::INFINITY`.
pub fn psnr(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    check_pair(a, b)?;
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse / a.len() as f64;
    let max = a.depth().max_value() as f64;
    Ok(20.0 * max.log10() - 10.0 * mse.log10())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    /// Window edge length (odd).
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

pub(crate) fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let r = (window / 2) as i64;
    (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Gaussian blur along one axis; where the kernel leaves the grid it is
/// truncated and renormalized.
fn blur_axis(data: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let n = dims[axis] as i64;
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let mut out = vec![0.0; data.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let c = crate::field::coords_of(dims, i)[axis] as i64;
        let base = i - c as usize * stride;
        let (mut acc, mut wsum) = (0.0, 0.0);
        for k in -r..=r {
            let p = c + k;
            if p < 0 || p >= n {
                continue;
            }
            let w = kernel[(k + r) as usize];
            acc += w * data[base + p as usize * stride];
            wsum += w;
        }
        *o = acc / wsum;
    }
    out
}

pub(crate) fn blur(data: &[f64], dims: [usize; 3], kernel: &[f64]) -> Vec<f64> {
    let mut cur = data.to_vec();
    for axis in 0..3 {
        if dims[axis] > 1 {
            cur = blur_axis(&cur, dims, axis, kernel);
        }
    }
    cur
}

/// Per-voxel SSIM map. Axes of unit extent are not windowed, so 2D slices
/// use a 2D window.
pub fn ssim_map(a: &VoxelGrid, b: &VoxelGrid, params: SsimParams) -> Result<Field3<f64>> {
    check_pair(a, b)?;
    let dims = a.dims();
    for axis in 0..3 {
        if dims[axis] > 1 && params.window > dims[axis] {
            return Err(MetricsError::WindowTooLarge {
                window: params.window,
                extent: dims[axis],
                axis,
            });
        }
    }
    let max = a.depth().max_value() as f64;
    let c1 = (params.k1 * max).powi(2);
    let c2 = (params.k2 * max).powi(2);
    let kernel = gaussian_kernel(params.window, params.sigma);
    let xa = a.to_f64();
    let xb = b.to_f64();
    let aa: Vec<f64> = xa.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = xb.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = xa.iter().zip(&xb).map(|(x, y)| x * y).collect();
    let mu_a = blur(&xa, dims, &kernel);
    let mu_b = blur(&xb, dims, &kernel);
    let e_aa = blur(&aa, dims, &kernel);
    let e_bb = blur(&bb, dims, &kernel);
    let e_ab = blur(&ab, dims, &kernel);
    let values = (0..xa.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .collect();
    Ok(Field3::from_vec(dims, values).expect("dims"))
}

/// Mean SSIM over all voxels.
pub fn ssim(a: &VoxelGrid, b: &VoxelGrid, params: SsimParams) -> Result<f64> {
    let map = ssim_map(a, b, params)?;
    Ok(map.data().iter().sum::<f64>() / map.len() as f64)
}

/// Central differences in the interior, one-sided at faces, zero along
/// unit-extent axes; magnitude is the Euclidean norm of the partials.
pub fn gradient_magnitude(grid: &VoxelGrid) -> Field3<f64> {
    gradient_magnitude_of(&grid.to_field())
}

pub fn gradient_magnitude_of(field: &Field3<f64>) -> Field3<f64> {
    let dims = field.dims();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let data = field.data();
    let values = (0..data.len())
        .map(|i| {
            let c = field.coords(i);
            let mut sq = 0.0;
            for axis in 0..3 {
                let n = dims[axis];
                if n < 2 {
                    continue;
                }
                let s = strides[axis];
                let d = if c[axis] == 0 {
                    data[i + s] - data[i]
                } else if c[axis] == n - 1 {
                    data[i] - data[i - s]
                } else {
                    0.5 * (data[i + s] - data[i - s])
                };
                sq += d * d;
            }
            sq.sqrt()
        })
        .collect();
    Field3::from_vec(dims, values).expect("dims")
}

/// Joint (intensity, gradient magnitude) counts.
#[derive(Debug, Clone, PartialEq)]
pub struct JointHistogram {
    pub intensity_bins: usize,
    pub gradient_bins: usize,
    pub gradient_bin_width: f64,
    /// Row-major `[intensity][gradient_bin]`.
    pub counts: Vec<u64>,
}

impl JointHistogram {
    pub fn count(&self, intensity: usize, gradient_bin: usize) -> u64 {
        self.counts[intensity * self.gradient_bins + gradient_bin]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn intensity_marginal(&self) -> Vec<u64> {
        self.counts
            .chunks(self.gradient_bins)
            .map(|row| row.iter().sum())
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "intensity,gradient_bin,count")?;
        for i in 0..self.intensity_bins {
            for g in 0..self.gradient_bins {
                let c = self.count(i, g);
                if c > 0 {
                    writeln!(w, "{i},{g},{c}")?;
                }
            }
        }
        Ok(())
    }
}

/// Joint histogram of voxel intensity against gradient magnitude, optionally
/// keeping only voxels with magnitude `≤ grad_cutoff`.
pub fn intensity_gradient_histogram(
    grid: &VoxelGrid,
    grad_cutoff: Option<f64>,
    bin_width: f64,
) -> Result<JointHistogram> {
    let grad = gradient_magnitude(grid);
    joint_histogram_from(grid, &grad, grad_cutoff, bin_width)
}

pub fn joint_histogram_from(
    grid: &VoxelGrid,
    grad: &Field3<f64>,
    grad_cutoff: Option<f64>,
    bin_width: f64,
) -> Result<JointHistogram> {
    if let Some(c) = grad_cutoff {
        if !(c >= 0.0) {
            return Err(MetricsError::NegativeCutoff(c));
        }
    }
    if !(bin_width > 0.0) {
        return Err(MetricsError::InvalidBinWidth(bin_width));
    }
    let keep = |g: f64| grad_cutoff.is_none_or(|c| g <= c);
    let max_g = grad
        .data()
        .iter()
        .copied()
        .filter(|&g| keep(g))
        .fold(0.0, f64::max);
    let gradient_bins = (max_g / bin_width).floor() as usize + 1;
    let intensity_bins = grid.depth().levels();
    let mut counts = vec![0u64; intensity_bins * gradient_bins];
    for (&v, &g) in grid.data().iter().zip(grad.data()) {
        if keep(g) {
            let gb = ((g / bin_width).floor() as usize).min(gradient_bins - 1);
            counts[v as usize * gradient_bins + gb] += 1;
        }
    }
    Ok(JointHistogram {
        intensity_bins,
        gradient_bins,
        gradient_bin_width: bin_width,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prep::histogram;
    use crate::volume::BitDepth;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(dims: [usize; 3], seed: u64) -> VoxelGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        VoxelGrid::new(dims, 1.0, BitDepth::U8, (0..n).map(|_| rng.random_range(0..=255)).collect()).unwrap()
    }

    /// Direct per-voxel SSIM with an explicit 3D window.
    fn ssim_brute(a: &VoxelGrid, b: &VoxelGrid, p: SsimParams) -> f64 {
        let dims = a.dims();
        let k = gaussian_kernel(p.window, p.sigma);
        let r = (p.window / 2) as i64;
        let c1 = (p.k1 * 255.0f64).powi(2);
        let c2 = (p.k2 * 255.0f64).powi(2);
        let mut total = 0.0;
        for z in 0..dims[2] as i64 {
            for y in 0..dims[1] as i64 {
                for x in 0..dims[0] as i64 {
                    let (mut w, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                    let span = |n: usize| if n > 1 { -r..=r } else { 0..=0 };
                    for dz in span(dims[2]) {
                        for dy in span(dims[1]) {
                            for dx in span(dims[0]) {
                                let (px, py, pz) = (x + dx, y + dy, z + dz);
                                if px < 0 || py < 0 || pz < 0 || px >= dims[0] as i64 || py >= dims[1] as i64 || pz >= dims[2] as i64 {
                                    continue;
                                }
                                let kw = |d: i64, n: usize| if n > 1 { k[(d + r) as usize] } else { 1.0 };
                                let wt = kw(dx, dims[0]) * kw(dy, dims[1]) * kw(dz, dims[2]);
                                let va = a.get(px as usize, py as usize, pz as usize) as f64;
                                let vb = b.get(px as usize, py as usize, pz as usize) as f64;
                                w += wt;
                                sa += wt * va;
                                sb += wt * vb;
                                saa += wt * va * va;
                                sbb += wt * vb * vb;
                                sab += wt * va * vb;
                            }
                        }
                    }
                    let (ma, mb) = (sa / w, sb / w);
                    let va = saa / w - ma * ma;
                    let vb = sbb / w - mb * mb;
                    let cov = sab / w - ma * mb;
                    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                }
            }
        }
        total / a.len() as f64
    }

    #[test]
    fn psnr_cases() {
        let a = random_grid([6, 6, 6], 1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let a = VoxelGrid::from_fn([4, 4, 4], 1.0, BitDepth::U8, |x, y, z| (x + y + z) as u16 * 10).unwrap();
        let b = a.with_data(a.data().iter().map(|v| v + 1).collect()).unwrap();
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0 * 255f64.log10()).abs() < 1e-12);
        assert!((p - 48.13).abs() < 0.005);
        let c = VoxelGrid::filled([4, 4, 3], 1.0, BitDepth::U8, 0).unwrap();
        assert!(matches!(psnr(&a, &c), Err(MetricsError::ShapeMismatch(..))));
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let a = random_grid([12, 12, 12], 7);
        assert_eq!(ssim(&a, &a, SsimParams::default()).unwrap(), 1.0);
    }

    #[test]
    fn ssim_inverted_two_phase_is_negative_and_matches_brute_force() {
        let a = VoxelGrid::from_fn([12, 11, 11], 1.0, BitDepth::U8, |x, y, z| if (x / 3 + y / 4 + z / 5) % 2 == 0 { 30 } else { 220 })
            .unwrap();
        let b = a.with_data(a.data().iter().map(|v| 255 - v).collect()).unwrap();
        let p = SsimParams::default();
        let fast = ssim(&a, &b, p).unwrap();
        let slow = ssim_brute(&a, &b, p);
        assert!(fast < 0.0, "ssim = {fast}");
        assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");
    }

    #[test]
    fn ssim_random_matches_brute_force_2d() {
        let a = random_grid([13, 12, 1], 3);
        let b = random_grid([13, 12, 1], 4);
        let p = SsimParams::default();
        assert!((ssim(&a, &b, p).unwrap() - ssim_brute(&a, &b, p)).abs() < 1e-10);
    }

    #[test]
    fn ssim_window_too_large() {
        let a = random_grid([10, 12, 12], 1);
        assert!(matches!(
            ssim(&a, &a, SsimParams::default()),
            Err(MetricsError::WindowTooLarge { axis: 0, .. })
        ));
    }

    #[test]
    fn gradient_of_constant_and_ramp() {
        let g = VoxelGrid::filled([5, 5, 5], 1.0, BitDepth::U8, 77).unwrap();
        assert!(gradient_magnitude(&g).data().iter().all(|&v| v == 0.0));
        let r = VoxelGrid::from_fn([6, 3, 3], 1.0, BitDepth::U8, |x, _, _| 2 * x as u16).unwrap();
        let gm = gradient_magnitude(&r);
        for z in 0..3 {
            for y in 0..3 {
                for x in 0..6 {
                    assert_eq!(gm.get(x, y, z), 2.0);
                }
            }
        }
    }

    #[test]
    fn isolated_voxel_halo_matches_stencil() {
        let mut g = VoxelGrid::filled([5, 5, 5], 1.0, BitDepth::U8, 0).unwrap();
        g.set(2, 2, 2, 100);
        let gm = gradient_magnitude(&g);
        // central difference stencil: the six face neighbours see 100/2, the
        // centre and everything else sees zero
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..5 {
                    let d = (x as i64 - 2).abs() + (y as i64 - 2).abs() + (z as i64 - 2).abs();
                    let want = if d == 1 { 50.0 } else { 0.0 };
                    assert_eq!(gm.get(x, y, z), want, "({x},{y},{z})");
                }
            }
        }
    }

    #[test]
    fn joint_histogram_cases() {
        let g = VoxelGrid::filled([4, 4, 4], 1.0, BitDepth::U8, 90).unwrap();
        let jh = intensity_gradient_histogram(&g, None, 1.0).unwrap();
        assert_eq!(jh.gradient_bins, 1);
        assert_eq!(jh.count(90, 0), 64);

        let r = VoxelGrid::from_fn([6, 2, 2], 1.0, BitDepth::U8, |x, _, _| 3 * x as u16).unwrap();
        let jh = intensity_gradient_histogram(&r, Some(0.0), 1.0).unwrap();
        assert_eq!(jh.total(), 0);
        assert!(matches!(
            intensity_gradient_histogram(&r, Some(-1.0), 1.0),
            Err(MetricsError::NegativeCutoff(_))
        ));
    }

    proptest! {
        #[test]
        fn symmetric_metrics(seed in 0u64..500) {
            let a = random_grid([11, 11, 1], seed);
            let b = random_grid([11, 11, 1], seed + 1000);
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            let p = SsimParams::default();
            prop_assert!((ssim(&a, &b, p).unwrap() - ssim(&b, &a, p).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn joint_marginal_equals_histogram(seed in 0u64..500) {
            let g = random_grid([5, 4, 3], seed);
            let jh = intensity_gradient_histogram(&g, None, 2.5).unwrap();
            prop_assert_eq!(jh.intensity_marginal(), histogram(&g).bins);
        }

        #[test]
        fn gradient_translation_equivariant(seed in 0u64..500) {
            let g = random_grid([8, 6, 6], seed);
            let shifted = VoxelGrid::from_fn([8, 6, 6], 1.0, BitDepth::U8,
                |x, y, z| if x == 0 { 0 } else { g.get(x - 1, y, z) }).unwrap();
            let a = gradient_magnitude(&g);
            let b = gradient_magnitude(&shifted);
            for z in 1..5 { for y in 1..5 { for x in 1..6 {
                prop_assert_eq!(a.get(x, y, z), b.get(x + 1, y, z));
            }}}
        }
    }
}
