//! Intensity preprocessing: 16→8 bit normalization, histograms, histogram
//! matching and line profiles.

use std::io::{self, Write};

use thiserror::Error;

use crate::volume::{BitDepth, VolumeError, VoxelGrid};

#[derive(Debug, Error)]
pub enum PrepError {
    #[error("expected a {expected}-bit grid, got {found}-bit")]
    WrongDepth { expected: u32, found: u32 },
    #[error("degenerate intensity range: p_min = p_max = {0}")]
    DegenerateRange(u16),
    #[error("clip fraction {0} outside [0, 0.5)")]
    InvalidClip(f64),
    #[error("empty grid")]
    Empty,
    #[error("bit depth mismatch between source and reference")]
    DepthMismatch,
    #[error("point {0:?} lies outside the grid")]
    OutOfBounds([usize; 3]),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T> = std::result::Result<T, PrepError>;

/// Exact per-level voxel counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    pub bins: Vec<u64>,
    pub total: u64,
}

impl Histogram {
    /// Cumulative counts, `cdf[g] = #{v ≤ g}`.
    pub fn cumulative(&self) -> Vec<u64> {
        let mut acc = 0;
        self.bins
            .iter()
            .map(|&c| {
                acc += c;
                acc
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "intensity,count")?;
        for (g, c) in self.bins.iter().enumerate() {
            writeln!(w, "{g},{c}")?;
        }
        Ok(())
    }
}

pub fn histogram(grid: &VoxelGrid) -> Histogram {
    let mut bins = vec![0u64; grid.depth().levels()];
    for &v in grid.data() {
        bins[v as usize] += 1;
    }
    Histogram {
        bins,
        total: grid.len() as u64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationParams {
    pub p_min: u16,
    pub p_max: u16,
    pub clip_fraction: f64,
}

pub const DEFAULT_CLIP_FRACTION: f64 = 1e-4;

/// Intensity cutoffs after removing `clip_fraction` of the voxels from each
/// tail: `p_min` is the smallest level whose cumulative count exceeds
/// `clip·N`, `p_max` the smallest level whose cumulative count reaches
/// `(1 − clip)·N`.
pub fn clip_levels(hist: &Histogram, clip_fraction: f64) -> Result<(u16, u16)> {
    if !(0.0..0.5).contains(&clip_fraction) {
        return Err(PrepError::InvalidClip(clip_fraction));
    }
    if hist.total == 0 {
        return Err(PrepError::Empty);
    }
    let n = hist.total as f64;
    let lo_target = clip_fraction * n;
    let hi_target = (1.0 - clip_fraction) * n;
    let cdf = hist.cumulative();
    let p_min = cdf.iter().position(|&c| c as f64 > lo_target).unwrap_or(0);
    let p_max = cdf
        .iter()
        .position(|&c| c as f64 >= hi_target)
        .unwrap_or(cdf.len() - 1);
    Ok((p_min as u16, p_max as u16))
}

/// Linear 16→8 bit requantization between clipped extremes, clamped and
/// rounded half-up: `round(255 · (p − p_min) / (p_max − p_min))`.
pub fn normalize_u16_to_u8(grid: &VoxelGrid, clip_fraction: f64) -> Result<(VoxelGrid, NormalizationParams)> {
    if grid.depth() != BitDepth::U16 {
        return Err(PrepError::WrongDepth {
            expected: 16,
            found: grid.depth().bits(),
        });
    }
    let (p_min, p_max) = clip_levels(&histogram(grid), clip_fraction)?;
    if p_min >= p_max {
        return Err(PrepError::DegenerateRange(p_min));
    }
    let params = NormalizationParams {
        p_min,
        p_max,
        clip_fraction,
    };
    let range = (p_max - p_min) as u64;
    // floor((2·255·(p − p_min) + range) / (2·range)) is half-up rounding in
    // exact integer arithmetic
    let map = |p: u16| -> u16 {
        if p <= p_min {
            0
        } else if p >= p_max {
            255
        } else {
            let num = 2 * 255 * (p - p_min) as u64 + range;
            (num / (2 * range)) as u16
        }
    };
    let data = grid.data().iter().map(|&p| map(p)).collect();
    let out = VoxelGrid::new(grid.dims(), grid.voxel_size(), BitDepth::U8, data)?;
    Ok((out, params))
}

/// Monotone gray-level lookup table taking `src` onto `reference`: each level
/// `g` maps to the smallest `h` with `CDF_ref(h) ≥ CDF_src(g)`.
pub fn histogram_match_lut(src: &Histogram, reference: &Histogram) -> Result<Vec<u16>> {
    if reference.total == 0 || src.total == 0 {
        return Err(PrepError::Empty);
    }
    if src.bins.len() != reference.bins.len() {
        return Err(PrepError::DepthMismatch);
    }
    let cs = src.cumulative();
    let cr = reference.cumulative();
    let (ns, nr) = (src.total as u128, reference.total as u128);
    let mut lut = Vec::with_capacity(cs.len());
    let mut h = 0usize;
    for &c in &cs {
        // CDF_ref(h) ≥ CDF_src(g)  ⇔  cr[h]·ns ≥ c·nr; h never decreases
        while (cr[h] as u128) * ns < (c as u128) * nr {
            h += 1;
        }
        lut.push(h as u16);
    }
    Ok(lut)
}

pub fn histogram_match(src: &VoxelGrid, reference: &VoxelGrid) -> Result<VoxelGrid> {
    if src.depth() != reference.depth() {
        return Err(PrepError::DepthMismatch);
    }
    let lut = histogram_match_lut(&histogram(src), &histogram(reference))?;
    let data = src.data().iter().map(|&g| lut[g as usize]).collect();
    Ok(src.with_data(data)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileSample {
    pub distance_um: f64,
    pub intensity: u16,
}

/// Nearest-voxel samples along a segment at unit steps of the dominant axis.
pub fn line_profile(grid: &VoxelGrid, start: [usize; 3], end: [usize; 3]) -> Result<Vec<ProfileSample>> {
    let dims = grid.dims();
    for p in [start, end] {
        if (0..3).any(|a| p[a] >= dims[a]) {
            return Err(PrepError::OutOfBounds(p));
        }
    }
    let delta = [0, 1, 2].map(|a| end[a] as f64 - start[a] as f64);
    let steps = delta.iter().map(|d| d.abs()).fold(0.0, f64::max) as usize;
    let length = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
    let out = (0..=steps)
        .map(|i| {
            let t = if steps == 0 { 0.0 } else { i as f64 / steps as f64 };
            let p = [0, 1, 2].map(|a| ((start[a] as f64 + t * delta[a]) + 0.5).floor() as usize);
            ProfileSample {
                distance_um: t * length * grid.voxel_size(),
                intensity: grid.get(p[0], p[1], p[2]),
            }
        })
        .collect();
    Ok(out)
}

pub fn write_profile_csv<W: Write>(profile: &[ProfileSample], mut w: W) -> io::Result<()> {
    writeln!(w, "distance_um,intensity")?;
    for s in profile {
        writeln!(w, "{},{}", s.distance_um, s.intensity)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid16(values: Vec<u16>) -> VoxelGrid {
        VoxelGrid::new([values.len(), 1, 1], 1.0, BitDepth::U16, values).unwrap()
    }

    #[test]
    fn normalization_endpoints_and_midpoint() {
        let g = grid16(vec![1000, 3000, 2000, 1000, 3000]);
        let (out, p) = normalize_u16_to_u8(&g, 0.0).unwrap();
        assert_eq!((p.p_min, p.p_max), (1000, 3000));
        assert_eq!(out.data(), &[0, 255, 128, 0, 255]);
    }

    #[test]
    fn normalization_full_range_matches_per_voxel_formula() {
        let g = grid16((0..=65535u16).collect());
        let (out, _) = normalize_u16_to_u8(&g, 0.0).unwrap();
        for (p, &o) in out.data().iter().enumerate() {
            let want = ((p as f64 / 65535.0) * 255.0 + 0.5).floor() as u16;
            assert_eq!(o, want, "level {p}");
        }
        let h = histogram(&out);
        assert!(h.bins.iter().all(|&c| c > 0));
    }

    #[test]
    fn normalization_errors() {
        assert!(matches!(
            normalize_u16_to_u8(&grid16(vec![5; 10]), 0.0),
            Err(PrepError::DegenerateRange(5))
        ));
        let g8 = VoxelGrid::filled([2, 1, 1], 1.0, BitDepth::U8, 3).unwrap();
        assert!(matches!(normalize_u16_to_u8(&g8, 0.0), Err(PrepError::WrongDepth { .. })));
    }

    #[test]
    fn clipping_ignores_outliers() {
        let mut v = vec![500u16; 10_000];
        v[0] = 0;
        v[1] = 65535;
        v[2..5000].iter_mut().for_each(|x| *x = 400);
        let (lo, hi) = clip_levels(&histogram(&grid16(v)), 1e-3).unwrap();
        assert_eq!((lo, hi), (400, 500));
    }

    #[test]
    fn histogram_counts() {
        let g = VoxelGrid::filled([3, 3, 3], 1.0, BitDepth::U8, 100).unwrap();
        let h = histogram(&g);
        assert_eq!(h.bins[100], 27);
        assert_eq!(h.bins.iter().sum::<u64>(), 27);
        let g = VoxelGrid::new([3, 1, 1], 1.0, BitDepth::U8, vec![0, 0, 255]).unwrap();
        let h = histogram(&g);
        assert_eq!((h.bins[0], h.bins[255]), (2, 1));
        assert_eq!(h.bins.iter().filter(|&&c| c > 0).count(), 2);
    }

    #[test]
    fn match_uniform_to_constant() {
        let src = VoxelGrid::new([256, 1, 1], 1.0, BitDepth::U8, (0..256).collect()).unwrap();
        let reference = VoxelGrid::filled([10, 1, 1], 1.0, BitDepth::U8, 100).unwrap();
        let out = histogram_match(&src, &reference).unwrap();
        assert!(out.data().iter().all(|&v| v == 100));
    }

    #[test]
    fn match_to_self_preserves_occupied_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = VoxelGrid::new([50, 1, 1], 1.0, BitDepth::U8, (0..50).map(|_| rng.random_range(20..90)).collect())
            .unwrap();
        assert_eq!(histogram_match(&g, &g).unwrap(), g);
    }

    #[test]
    fn profile_cases() {
        let g = VoxelGrid::new([3, 1, 1], 2.0, BitDepth::U8, vec![10, 20, 30]).unwrap();
        let p = line_profile(&g, [0, 0, 0], [2, 0, 0]).unwrap();
        assert_eq!(p.iter().map(|s| s.intensity).collect::<Vec<_>>(), vec![10, 20, 30]);
        assert_eq!(p[2].distance_um, 4.0);
        let p = line_profile(&g, [1, 0, 0], [1, 0, 0]).unwrap();
        assert_eq!(p.len(), 1);
        assert!(line_profile(&g, [0, 0, 0], [3, 0, 0]).is_err());
    }

    #[test]
    fn diagonal_profile_across_step() {
        let g = VoxelGrid::from_fn([8, 8, 1], 1.0, BitDepth::U8, |x, y, _| if x + y >= 8 { 200 } else { 40 }).unwrap();
        let p = line_profile(&g, [0, 0, 0], [7, 7, 0]).unwrap();
        assert_eq!(p.len(), 8);
        for (i, s) in p.iter().enumerate() {
            assert_eq!(s.intensity, g.get(i, i, 0));
        }
        assert!(p.windows(2).all(|w| w[0].intensity <= w[1].intensity));
    }

    proptest! {
        #[test]
        fn match_lut_monotone_and_cdf_bound(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n1 = rng.random_range(1..400);
            let n2 = rng.random_range(1..400);
            let lo = rng.random_range(0..200u16);
            let src = VoxelGrid::new([n1, 1, 1], 1.0, BitDepth::U8,
                (0..n1).map(|_| rng.random_range(0..=255)).collect()).unwrap();
            let reference = VoxelGrid::new([n2, 1, 1], 1.0, BitDepth::U8,
                (0..n2).map(|_| rng.random_range(lo..=255)).collect()).unwrap();
            let lut = histogram_match_lut(&histogram(&src), &histogram(&reference)).unwrap();
            prop_assert!(lut.windows(2).all(|w| w[0] <= w[1]));

            let out = histogram_match(&src, &reference).unwrap();
            let co = histogram(&out).cumulative();
            let cr = histogram(&reference).cumulative();
            // the CDF gap is bounded by the heaviest source level, which is
            // moved as a unit
            let max_bin = *histogram(&src).bins.iter().max().unwrap() as f64 / n1 as f64;
            for g in 0..256 {
                let d = (co[g] as f64 / n1 as f64 - cr[g] as f64 / n2 as f64).abs();
                prop_assert!(d <= max_bin + 1e-12);
            }
        }

        #[test]
        fn normalization_affine_on_unclipped_range(a in 0u16..60000, b in 0u16..60000) {
            let g = grid16(vec![0, 60000, a, b]);
            let (out, _) = normalize_u16_to_u8(&g, 0.0).unwrap();
            let exact = |p: u16| p as f64 * 255.0 / 60000.0;
            prop_assert!((out.data()[2] as f64 - exact(a)).abs() <= 0.5);
            prop_assert!((out.data()[3] as f64 - exact(b)).abs() <= 0.5);
        }
    }
}
