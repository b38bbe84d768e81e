//! Synthetic rock volumes with known ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::metrics::{blur, gaussian_kernel};
use crate::micp::{thomeer_eval, MicpCurve, ThomeerModel};
use crate::scalar::quantize;
use crate::volume::{BitDepth, PatchPairSet, Result, VolumeError, VoxelGrid};

pub const LABEL_PORE: u8 = 0;
pub const LABEL_GRAIN: u8 = 1;
pub const LABEL_MICRO: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpherePackConfig {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    /// Grains are added until the pore fraction drops to this value.
    pub target_porosity: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    pub pore_value: f64,
    pub grain_value: f64,
    /// Intensity of micro-porous grains.
    pub micro_value: f64,
    /// Probability that a grain is micro-porous.
    pub micro_fraction: f64,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SpherePackConfig {
    fn default() -> Self {
        Self {
            dims: [64, 64, 64],
            voxel_size: 1.0,
            target_porosity: 0.25,
            radius_min: 5.0,
            radius_max: 9.0,
            pore_value: 40.0,
            grain_value: 200.0,
            micro_value: 120.0,
            micro_fraction: 0.0,
            blur_sigma: 0.5,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticRock {
    pub grid: VoxelGrid,
    /// Per-voxel [`LABEL_PORE`], [`LABEL_GRAIN`] or [`LABEL_MICRO`].
    pub labels: Vec<u8>,
    /// Exact pore fraction of the label field.
    pub macro_porosity: f64,
    /// Exact micro-porous grain fraction of the label field.
    pub micro_fraction: f64,
}

impl SyntheticRock {
    /// Local porosity of micro-porous grains implied by the intensities.
    pub fn micro_phi(cfg: &SpherePackConfig) -> f64 {
        (cfg.grain_value - cfg.micro_value) / (cfg.grain_value - cfg.pore_value)
    }
}

/// Overlapping random grain spheres in a pore background, optionally
/// Gaussian-blurred and with additive Gaussian noise.
pub fn sphere_pack(cfg: &SpherePackConfig) -> Result<SyntheticRock> {
    if !(cfg.target_porosity > 0.0 && cfg.target_porosity < 1.0) {
        return Err(VolumeError::Invalid("target porosity must be in (0,1)".into()));
    }
    if !(cfg.radius_min > 0.0 && cfg.radius_max >= cfg.radius_min) {
        return Err(VolumeError::Invalid("invalid radius range".into()));
    }
    let [nx, ny, nz] = cfg.dims;
    let n = nx * ny * nz;
    if n == 0 {
        return Err(VolumeError::EmptyOutput(cfg.dims));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut labels = vec![LABEL_PORE; n];
    let mut pores = n;
    let target = (cfg.target_porosity * n as f64).round() as usize;
    while pores > target {
        let r: f64 = rng.random_range(cfg.radius_min..=cfg.radius_max);
        let c = [
            rng.random_range(0.0..nx as f64),
            rng.random_range(0.0..ny as f64),
            rng.random_range(0.0..nz as f64),
        ];
        let label = if rng.random::<f64>() < cfg.micro_fraction {
            LABEL_MICRO
        } else {
            LABEL_GRAIN
        };
        let lo = |a: usize| ((c[a] - r).floor().max(0.0)) as usize;
        let hi = |a: usize, m: usize| ((c[a] + r).ceil() as usize).min(m - 1);
        for z in lo(2)..=hi(2, nz) {
            for y in lo(1)..=hi(1, ny) {
                for x in lo(0)..=hi(0, nx) {
                    let d2 = (x as f64 + 0.5 - c[0]).powi(2) + (y as f64 + 0.5 - c[1]).powi(2) + (z as f64 + 0.5 - c[2]).powi(2);
                    if d2 <= r * r {
                        let i = x + nx * (y + ny * z);
                        if labels[i] == LABEL_PORE {
                            pores -= 1;
                        }
                        labels[i] = label;
                    }
                }
            }
        }
    }
    let micro = labels.iter().filter(|&&l| l == LABEL_MICRO).count();
    let values: Vec<f64> = labels
        .iter()
        .map(|&l| match l {
            LABEL_PORE => cfg.pore_value,
            LABEL_MICRO => cfg.micro_value,
            _ => cfg.grain_value,
        })
        .collect();
    let values = finish(values, cfg.dims, cfg.blur_sigma, cfg.noise_sigma, &mut rng);
    let grid = VoxelGrid::from_real(cfg.dims, cfg.voxel_size, BitDepth::U8, &values)?;
    Ok(SyntheticRock {
        grid,
        labels,
        macro_porosity: pores as f64 / n as f64,
        micro_fraction: micro as f64 / n as f64,
    })
}

fn finish(mut values: Vec<f64>, dims: [usize; 3], sigma: f64, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if sigma > 0.0 {
        let window = 2 * (3.0 * sigma).ceil() as usize + 1;
        values = blur(&values, dims, &gaussian_kernel(window, sigma));
    }
    if noise > 0.0 {
        let nd = Normal::new(0.0, noise).expect("positive sigma");
        values.iter_mut().for_each(|v| *v += nd.sample(rng));
    }
    values
}

/// Two-level texture: smoothed white noise split at its median, so half the
/// voxels take `low` and half `high`.
pub fn binary_texture(dims: [usize; 3], correlation: f64, low: u16, high: u16, seed: u64) -> Result<VoxelGrid> {
    let n = dims.iter().product::<usize>();
    if n == 0 {
        return Err(VolumeError::EmptyOutput(dims));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let window = 2 * (3.0 * correlation).ceil() as usize + 1;
    let smooth = blur(&noise, dims, &gaussian_kernel(window, correlation));
    let mut sorted = smooth.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let median = sorted[n / 2];
    let data = smooth.iter().map(|&v| if v < median { low } else { high }).collect();
    VoxelGrid::new(dims, 1.0, BitDepth::U8, data)
}

/// Block-mean downsampling by an integer factor on every non-unit axis,
/// followed by optional Gaussian noise.
pub fn area_downsample(grid: &VoxelGrid, factor: usize, noise_sigma: f64, seed: u64) -> Result<VoxelGrid> {
    if factor == 0 {
        return Err(VolumeError::InvalidFactor(0.0));
    }
    let d = grid.dims();
    let f = d.map(|n| if n == 1 { 1 } else { factor });
    if (0..3).any(|a| d[a] % f[a] != 0) {
        return Err(VolumeError::DimensionMismatch(format!("{d:?} not divisible by {factor}")));
    }
    let od = [d[0] / f[0], d[1] / f[1], d[2] / f[2]];
    let mut acc = vec![0.0; od.iter().product()];
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                acc[x / f[0] + od[0] * (y / f[1] + od[1] * (z / f[2]))] += grid.get(x, y, z) as f64;
            }
        }
    }
    let inv = 1.0 / (f[0] * f[1] * f[2]) as f64;
    acc.iter_mut().for_each(|v| *v *= inv);
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = Normal::new(0.0, noise_sigma).expect("positive sigma");
        acc.iter_mut().for_each(|v| *v += nd.sample(&mut rng));
    }
    let max = grid.depth().max_value();
    let data = acc.iter().map(|&v| quantize(v, max)).collect();
    VoxelGrid::new(od, grid.voxel_size() * factor as f64, grid.depth(), data)
}

/// Paired 2D texture patches: each HR patch is an independent
/// [`binary_texture`] and its LR partner the block mean by `scale`.
pub fn texture_patch_pairs(count: usize, hr_size: usize, scale: usize, correlation: f64, seed: u64) -> Result<PatchPairSet> {
    if scale == 0 || hr_size % scale != 0 {
        return Err(VolumeError::InvalidFactor(scale as f64));
    }
    let mut lr_patches = Vec::with_capacity(count);
    let mut hr_patches = Vec::with_capacity(count);
    for i in 0..count {
        let s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
        let hr = binary_texture([hr_size, hr_size, 1], correlation, 40, 200, s)?;
        lr_patches.push(area_downsample(&hr, scale, 0.0, 0)?);
        hr_patches.push(hr);
    }
    Ok(PatchPairSet {
        lr_patches,
        hr_patches,
        scale,
        paired: true,
    })
}

/// Noise-free MICP curve sampled at `n` log-spaced pressures.
pub fn synthetic_micp(model: &ThomeerModel<f64>, n: usize, p_lo: f64, p_hi: f64) -> crate::micp::Result<MicpCurve<f64>> {
    let (a, b) = (p_lo.log10(), p_hi.log10());
    let pts = (0..n)
        .map(|i| {
            let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            let p = 10f64.powf(a + (b - a) * t);
            (p, thomeer_eval(model, p).min(1.0))
        })
        .collect();
    MicpCurve::new(pts)
}

/// 8-bit volume rescaled to the full 16-bit range (`v × 257`) with
/// Gaussian noise given in 8-bit units.
pub fn promote_u16(grid: &VoxelGrid, noise_sigma: f64, seed: u64) -> Result<VoxelGrid> {
    if grid.depth() != BitDepth::U8 {
        return Err(VolumeError::DimensionMismatch("promotion expects an 8-bit grid".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nd = (noise_sigma > 0.0).then(|| Normal::new(0.0, noise_sigma * 257.0).expect("positive sigma"));
    let data = grid
        .data()
        .iter()
        .map(|&v| {
            let n = nd.as_ref().map_or(0.0, |d| d.sample(&mut rng));
            quantize(v as f64 * 257.0 + n, u16::MAX)
        })
        .collect();
    VoxelGrid::new(grid.dims(), grid.voxel_size(), BitDepth::U16, data)
}
