//! Gradient-based threshold selection and two-marker watershed.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::field::{coords_of, for_each_face_neighbor, Field3};
use crate::metrics::{gradient_magnitude, joint_histogram_from};
use crate::volume::{self, BitDepth, VoxelGrid};

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("invalid thresholds: pore_max {pore_max} must be below grain_min {grain_min}")]
    InvalidThresholds { pore_max: i64, grain_min: i64 },
    #[error("gradient cutoff must be positive, got {0}")]
    InvalidCutoff(f64),
    #[error("restricted histogram has no valley between two modes")]
    NoValley,
    #[error("no {0} marker voxels; watershed needs both phases")]
    DegenerateMarkers(&'static str),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error(transparent)]
    Volume(#[from] volume::VolumeError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
}

pub type Result<T> = std::result::Result<T, SegmentError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdPair {
    /// Voxels at or below are pure pore.
    pub pore_max: u16,
    /// Voxels at or above are pure grain.
    pub grain_min: u16,
    pub grad_cutoff: f64,
}

impl ThresholdPair {
    pub fn new(pore_max: u16, grain_min: u16, grad_cutoff: f64) -> Result<Self> {
        if pore_max >= grain_min {
            return Err(SegmentError::InvalidThresholds {
                pore_max: pore_max as i64,
                grain_min: grain_min as i64,
            });
        }
        if !(grad_cutoff > 0.0) {
            return Err(SegmentError::InvalidCutoff(grad_cutoff));
        }
        Ok(Self {
            pore_max,
            grain_min,
            grad_cutoff,
        })
    }

    /// Both thresholds moved by `delta`.
    pub fn shifted(&self, delta: i32, max_value: u16) -> Result<Self> {
        let p = self.pore_max as i64 + delta as i64;
        let g = self.grain_min as i64 + delta as i64;
        if p < 0 || g > max_value as i64 || p >= g {
            return Err(SegmentError::InvalidThresholds {
                pore_max: p,
                grain_min: g,
            });
        }
        Self::new(p as u16, g as u16, self.grad_cutoff)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdConfig {
    pub n_regions: usize,
    pub half_width: u16,
    /// Seeds are drawn from voxels at or above this gradient quantile.
    pub seed_percentile: f64,
    /// Half-edge of the cubic region around each seed.
    pub region_radius: usize,
    /// Box half-width used to smooth the marginal before mode search.
    pub smoothing: usize,
    /// Modes closer than this are treated as one.
    pub min_mode_separation: usize,
    pub seed: u64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            n_regions: 20,
            half_width: 5,
            seed_percentile: 0.9,
            region_radius: 3,
            smoothing: 2,
            min_mode_separation: 10,
            seed: 0,
        }
    }
}

/// Smallest accepted gradient cutoff; region minima of exactly flat data
/// would otherwise give zero.
pub const MIN_GRAD_CUTOFF: f64 = 1e-6;

/// Thresholds selection result with its intermediate quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSelection {
    pub thresholds: ThresholdPair,
    pub valley: u16,
    pub modes: (u16, u16),
    pub region_minima: Vec<f64>,
    pub marginal: Vec<u64>,
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Grad cutoff = min over `n_regions` seeded interfacial cubes of the cube's
/// minimum gradient magnitude.
pub fn interfacial_cutoff(grad: &Field3<f64>, cfg: &ThresholdConfig) -> Result<(f64, Vec<f64>)> {
    if cfg.n_regions == 0 {
        return Err(SegmentError::Invalid("n_regions must be ≥ 1".into()));
    }
    let data = grad.data();
    if data.is_empty() {
        return Err(SegmentError::Invalid("empty volume".into()));
    }
    let mut sorted = data.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let level = quantile_sorted(&sorted, cfg.seed_percentile.clamp(0.0, 1.0));
    let candidates: Vec<usize> = (0..data.len()).filter(|&i| data[i] >= level && data[i] > 0.0).collect();
    if candidates.is_empty() {
        return Err(SegmentError::NoValley);
    }
    let dims = grad.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r = cfg.region_radius;
    let minima: Vec<f64> = (0..cfg.n_regions)
        .map(|_| {
            let c = coords_of(dims, candidates[rng.random_range(0..candidates.len())]);
            let lo = c.map(|v| v.saturating_sub(r));
            let hi = [0, 1, 2].map(|a| (c[a] + r).min(dims[a] - 1));
            let mut m = f64::INFINITY;
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        m = m.min(grad.get(x, y, z));
                    }
                }
            }
            m
        })
        .collect();
    let cutoff = minima.iter().copied().fold(f64::INFINITY, f64::min).max(MIN_GRAD_CUTOFF);
    Ok((cutoff, minima))
}

fn smooth(marginal: &[u64], h: usize) -> Vec<f64> {
    let n = marginal.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(h);
            let hi = (i + h).min(n - 1);
            marginal[lo..=hi].iter().sum::<u64>() as f64 / (hi - lo + 1) as f64
        })
        .collect()
}

/// The two most prominent modes of a (smoothed) marginal, in ascending order.
pub fn find_modes(marginal: &[u64], smoothing: usize, min_separation: usize) -> Result<(u16, u16)> {
    if marginal.len() < 3 {
        return Err(SegmentError::NoValley);
    }
    let s = smooth(marginal, smoothing);
    let n = s.len();
    // plateau-aware local maxima: a run of equal values higher than both sides
    let mut peaks: Vec<(f64, usize)> = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && s[j + 1] == s[i] {
            j += 1;
        }
        let left = i == 0 || s[i - 1] < s[i];
        let right = j == n - 1 || s[j + 1] < s[i];
        if left && right && s[i] > 0.0 {
            peaks.push((s[i], (i + j) / 2));
        }
        i = j + 1;
    }
    // rank by topographic prominence so shoulders of one mode lose to a
    // second mode behind a real dip
    let prominence = |h: f64, at: usize| -> f64 {
        let side = |range: &mut dyn Iterator<Item = usize>| -> Option<f64> {
            let mut low = h;
            for k in range {
                if s[k] > h {
                    return Some(low);
                }
                low = low.min(s[k]);
            }
            None
        };
        let col = match (side(&mut (0..at).rev()), side(&mut (at + 1..n))) {
            (Some(l), Some(r)) => l.max(r),
            (Some(c), None) | (None, Some(c)) => c,
            (None, None) => 0.0,
        };
        h - col
    };
    let mut ranked: Vec<(f64, f64, usize)> = peaks.iter().map(|&(h, at)| (prominence(h, at), h, at)).collect();
    ranked.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then(b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal))
            .then(a.2.cmp(&b.2))
    });
    let first = ranked.first().map(|r| (r.1, r.2)).ok_or(SegmentError::NoValley)?;
    let second = ranked
        .iter()
        .skip(1)
        .map(|r| (r.1, r.2))
        .find(|p| p.1.abs_diff(first.1) >= min_separation.max(2))
        .ok_or(SegmentError::NoValley)?;
    let (a, b) = (first.1.min(second.1), first.1.max(second.1));
    Ok((a as u16, b as u16))
}

/// Lowest-count intensity strictly between the modes; ties resolve to the
/// median tied position.
pub fn find_valley(marginal: &[u64], modes: (u16, u16)) -> Result<u16> {
    let (a, b) = (modes.0 as usize, modes.1 as usize);
    if b <= a + 1 || b >= marginal.len() {
        return Err(SegmentError::NoValley);
    }
    let m = marginal[a + 1..b].iter().copied().min().expect("non-empty range");
    let tied: Vec<usize> = (a + 1..b).filter(|&i| marginal[i] == m).collect();
    Ok(tied[(tied.len() - 1) / 2] as u16)
}

/// Valley and the bracketing pair `valley ± half_width`.
pub fn valley_thresholds(
    marginal: &[u64],
    cfg: &ThresholdConfig,
    grad_cutoff: f64,
) -> Result<(u16, (u16, u16), ThresholdPair)> {
    let modes = find_modes(marginal, cfg.smoothing, cfg.min_mode_separation)?;
    let v = find_valley(marginal, modes)?;
    let p = v as i64 - cfg.half_width as i64;
    let g = v as i64 + cfg.half_width as i64;
    if p < 0 || g >= marginal.len() as i64 {
        return Err(SegmentError::InvalidThresholds {
            pore_max: p,
            grain_min: g,
        });
    }
    Ok((v, modes, ThresholdPair::new(p as u16, g as u16, grad_cutoff)?))
}

pub fn select_optimal_thresholds(grid: &VoxelGrid, cfg: &ThresholdConfig) -> Result<ThresholdSelection> {
    let grad = gradient_magnitude(grid);
    select_with_gradient(grid, &grad, cfg)
}

pub fn select_with_gradient(grid: &VoxelGrid, grad: &Field3<f64>, cfg: &ThresholdConfig) -> Result<ThresholdSelection> {
    let (cutoff, region_minima) = interfacial_cutoff(grad, cfg)?;
    let marginal = joint_histogram_from(grid, grad, Some(cutoff), 1.0)?.intensity_marginal();
    let (valley, modes, thresholds) = valley_thresholds(&marginal, cfg, cutoff)?;
    Ok(ThresholdSelection {
        thresholds,
        valley,
        modes,
        region_minima,
        marginal,
    })
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Pore,
    Grain,
}

impl Phase {
    /// Raw byte: pore white, grain black.
    pub fn byte(self) -> u16 {
        match self {
            Phase::Pore => 255,
            Phase::Grain => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub labels: Vec<Phase>,
}

impl LabelGrid {
    pub fn pore_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == Phase::Pore).count()
    }

    pub fn pore_fraction(&self) -> f64 {
        self.pore_count() as f64 / self.labels.len().max(1) as f64
    }

    pub fn to_grid(&self) -> Result<VoxelGrid> {
        Ok(VoxelGrid::new(
            self.dims,
            self.voxel_size,
            BitDepth::U8,
            self.labels.iter().map(|l| l.byte()).collect(),
        )?)
    }

    pub fn from_grid(grid: &VoxelGrid) -> Self {
        Self {
            dims: grid.dims(),
            voxel_size: grid.voxel_size(),
            labels: grid
                .data()
                .iter()
                .map(|&v| if v >= 128 { Phase::Pore } else { Phase::Grain })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path, meta: &Path) -> Result<()> {
        volume::save_raw(&self.to_grid()?, path, meta)?;
        Ok(())
    }
}

pub fn watershed_segment(grid: &VoxelGrid, thresholds: &ThresholdPair) -> Result<LabelGrid> {
    let grad = gradient_magnitude(grid);
    watershed_with_gradient(grid, &grad, thresholds)
}

/// Flood from pore/grain markers in ascending gradient order. Each voxel
/// takes the label of the neighbour that first queued it; equal gradients
/// pop in insertion order.
pub fn watershed_with_gradient(grid: &VoxelGrid, grad: &Field3<f64>, thr: &ThresholdPair) -> Result<LabelGrid> {
    let dims = grid.dims();
    if grad.dims() != dims {
        return Err(SegmentError::DimensionMismatch("gradient field".into()));
    }
    if thr.pore_max >= thr.grain_min {
        return Err(SegmentError::InvalidThresholds {
            pore_max: thr.pore_max as i64,
            grain_min: thr.grain_min as i64,
        });
    }
    let n = grid.len();
    let mut label: Vec<Option<Phase>> = grid
        .data()
        .iter()
        .map(|&v| {
            if v <= thr.pore_max {
                Some(Phase::Pore)
            } else if v >= thr.grain_min {
                Some(Phase::Grain)
            } else {
                None
            }
        })
        .collect();
    if !label.contains(&Some(Phase::Pore)) {
        return Err(SegmentError::DegenerateMarkers("pore"));
    }
    if !label.contains(&Some(Phase::Grain)) {
        return Err(SegmentError::DegenerateMarkers("grain"));
    }
    #[derive(PartialEq, PartialOrd)]
    struct Key(f64, u64, usize);
    impl Eq for Key {}
    impl Ord for Key {
        fn cmp(&self, o: &Self) -> Ordering {
            self.0
                .partial_cmp(&o.0)
                .unwrap_or(Ordering::Equal)
                .then(self.1.cmp(&o.1))
        }
    }
    let g = grad.data();
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let mut push_neighbors = |i: usize, lab: &mut Vec<Option<Phase>>, heap: &mut BinaryHeap<Reverse<Key>>| {
        let phase = lab[i];
        for_each_face_neighbor(dims, i, |j| {
            if lab[j].is_none() {
                lab[j] = phase;
                heap.push(Reverse(Key(g[j], seq, j)));
                seq += 1;
            }
        });
    };
    for i in 0..n {
        let v = grid.data()[i];
        if v <= thr.pore_max || v >= thr.grain_min {
            push_neighbors(i, &mut label, &mut heap);
        }
    }
    while let Some(Reverse(Key(_, _, i))) = heap.pop() {
        push_neighbors(i, &mut label, &mut heap);
    }
    Ok(LabelGrid {
        dims,
        voxel_size: grid.voxel_size(),
        labels: label.into_iter().map(|l| l.expect("connected grid is fully flooded")).collect(),
    })
}

/// One segmentation per delta, shifting both thresholds together.
pub fn threshold_sweep(grid: &VoxelGrid, base: &ThresholdPair, deltas: &[i32]) -> Result<Vec<(ThresholdPair, LabelGrid)>> {
    let grad = gradient_magnitude(grid);
    let max = grid.depth().max_value();
    deltas
        .iter()
        .map(|&d| {
            let t = base.shifted(d, max)?;
            Ok((t, watershed_with_gradient(grid, &grad, &t)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{sphere_pack, SpherePackConfig};

    fn blurred_sphere(n: usize, r: f64) -> VoxelGrid {
        let c = n as f64 / 2.0;
        let raw: Vec<f64> = (0..n * n * n)
            .map(|i| {
                let [x, y, z] = coords_of([n; 3], i);
                let d = ((x as f64 + 0.5 - c).powi(2) + (y as f64 + 0.5 - c).powi(2) + (z as f64 + 0.5 - c).powi(2)).sqrt();
                if d <= r {
                    40.0
                } else {
                    200.0
                }
            })
            .collect();
        let k = crate::metrics::gaussian_kernel(7, 1.0);
        let b = crate::metrics::blur(&raw, [n; 3], &k);
        VoxelGrid::from_real([n; 3], 1.0, BitDepth::U8, &b).unwrap()
    }

    #[test]
    fn valley_at_60_gives_55_65() {
        let marginal: Vec<u64> = (0..256)
            .map(|i: i64| {
                let a = 1000.0 * (-((i - 30) as f64).powi(2) / 200.0).exp();
                let b = 1500.0 * (-((i - 150) as f64).powi(2) / 2000.0).exp();
                (a + b).round() as u64 + if i == 60 { 0 } else { 1 }
            })
            .collect();
        let (v, modes, t) = valley_thresholds(&marginal, &ThresholdConfig::default(), 10.75).unwrap();
        assert_eq!(modes, (30, 150));
        assert_eq!(v, 60);
        assert_eq!((t.pore_max, t.grain_min), (55, 65));
    }

    #[test]
    fn shoulder_loses_to_distinct_mode() {
        // grain mode at 200 with a taller-than-pore shoulder near 185
        let marginal: Vec<u64> = (0..256)
            .map(|i: i64| {
                let pore = 300.0 * (-((i - 40) as f64).powi(2) / 200.0).exp();
                let grain = 2000.0 * (-((i - 200) as f64).powi(2) / 72.0).exp();
                let ripple = 400.0 * (-((i - 184) as f64).powi(2) / 8.0).exp();
                (pore + grain + ripple).round() as u64
            })
            .collect();
        let (a, b) = find_modes(&marginal, 2, 10).unwrap();
        assert!((38..=42).contains(&a), "{a}");
        assert!((198..=202).contains(&b), "{b}");
    }

    #[test]
    fn unimodal_has_no_valley() {
        let m: Vec<u64> = (0..256).map(|i: i64| (1000.0 * (-((i - 100) as f64).powi(2) / 400.0).exp()) as u64).collect();
        assert!(matches!(find_modes(&m, 2, 10), Err(SegmentError::NoValley)));
    }

    #[test]
    fn binary_volume_thresholds_separate() {
        let data: Vec<u16> = (0..4096).map(|i| if (i / 7) % 3 == 0 { 0 } else { 255 }).collect();
        let g = VoxelGrid::new([16, 16, 16], 1.0, BitDepth::U8, data).unwrap();
        let sel = select_optimal_thresholds(&g, &ThresholdConfig::default()).unwrap();
        assert!(sel.thresholds.pore_max > 0 && sel.thresholds.grain_min < 255);
    }

    #[test]
    fn pre_thresholded_and_checkerboard() {
        let data: Vec<u16> = (0..512)
            .map(|i| {
                let [x, y, z] = coords_of([8; 3], i);
                if (x + y + z) % 2 == 0 {
                    10
                } else {
                    240
                }
            })
            .collect();
        let g = VoxelGrid::new([8; 3], 1.0, BitDepth::U8, data.clone()).unwrap();
        let t = ThresholdPair::new(55, 65, 1.0).unwrap();
        let l = watershed_segment(&g, &t).unwrap();
        for (p, v) in l.labels.iter().zip(&data) {
            assert_eq!(*p == Phase::Pore, *v == 10);
        }
    }

    #[test]
    fn degenerate_markers() {
        let g = VoxelGrid::filled([4; 3], 1.0, BitDepth::U8, 200).unwrap();
        let t = ThresholdPair::new(55, 65, 1.0).unwrap();
        assert!(matches!(watershed_segment(&g, &t), Err(SegmentError::DegenerateMarkers("pore"))));
        assert!(ThresholdPair::new(65, 65, 1.0).is_err());
        assert!(ThresholdPair::new(55, 65, 0.0).is_err());
    }

    #[test]
    fn blurred_sphere_volume() {
        let (n, r) = (32, 8.0);
        let g = blurred_sphere(n, r);
        let t = ThresholdPair::new(115, 125, 1.0).unwrap();
        let l = watershed_segment(&g, &t).unwrap();
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * r * r * r;
        let shell = 4.0 * std::f64::consts::PI * r * r;
        assert!((l.pore_count() as f64 - analytic).abs() <= shell, "{} vs {analytic}", l.pore_count());
    }

    #[test]
    fn marker_voxels_keep_class_and_sweep_monotone() {
        let rock = sphere_pack(&SpherePackConfig {
            dims: [32; 3],
            noise_sigma: 4.0,
            ..SpherePackConfig::default()
        })
        .unwrap();
        let base = ThresholdPair::new(100, 140, 1.0).unwrap();
        let sweep = threshold_sweep(&rock.grid, &base, &[-3, -2, -1, 0, 1, 2, 3]).unwrap();
        let direct = watershed_segment(&rock.grid, &base).unwrap();
        assert_eq!(sweep[3].1, direct);
        let mut last = 0.0;
        for (t, l) in &sweep {
            for (p, &v) in l.labels.iter().zip(rock.grid.data()) {
                if v <= t.pore_max {
                    assert_eq!(*p, Phase::Pore);
                }
                if v >= t.grain_min {
                    assert_eq!(*p, Phase::Grain);
                }
            }
            assert!(l.pore_fraction() >= last);
            last = l.pore_fraction();
        }
        assert!(base.shifted(-200, 255).is_err());
    }
}
