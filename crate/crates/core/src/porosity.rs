//! Micro-porosity maps, bulk porosity and block heterogeneity.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::field::Field3;
use crate::segment::{LabelGrid, Phase, ThresholdPair};
use crate::volume::{self, write_atomic, VoxelGrid};

#[derive(Debug, Error)]
pub enum PorosityError {
    #[error("pore and grain thresholds coincide at {0}")]
    DegenerateThresholds(u16),
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimensionMismatch([usize; 3], [usize; 3]),
    #[error("invalid block size {0}")]
    InvalidBlockSize(usize),
    #[error(transparent)]
    Volume(#[from] volume::VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PorosityError>;

/// Per-voxel micro-porosity; zero on pore voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct PorosityMap {
    pub field: Field3<f32>,
    pub voxel_size: f64,
}

impl PorosityMap {
    pub fn dims(&self) -> [usize; 3] {
        self.field.dims()
    }

    pub fn save(&self, path: &Path, meta: &Path) -> Result<()> {
        volume::save_raw_f32(&self.field, self.voxel_size, path, meta)?;
        Ok(())
    }

    pub fn load(path: &Path, meta: &Path) -> Result<Self> {
        let (field, voxel_size) = volume::load_raw_f32(path, meta)?;
        Ok(Self { field, voxel_size })
    }
}

/// Linear intensity-to-porosity mapping: 1 at `pore_max`, 0 at `grain_min`.
pub fn local_phi(t: f64, pore_max: f64, grain_min: f64) -> f64 {
    ((t - grain_min) / (pore_max - grain_min)).clamp(0.0, 1.0)
}

pub fn local_porosity_map(grid: &VoxelGrid, labels: &LabelGrid, thr: &ThresholdPair) -> Result<PorosityMap> {
    if grid.dims() != labels.dims {
        return Err(PorosityError::DimensionMismatch(grid.dims(), labels.dims));
    }
    if thr.pore_max == thr.grain_min {
        return Err(PorosityError::DegenerateThresholds(thr.pore_max));
    }
    let (p, g) = (thr.pore_max as f64, thr.grain_min as f64);
    let data = grid
        .data()
        .iter()
        .zip(&labels.labels)
        .map(|(&t, &l)| match l {
            Phase::Pore => 0.0,
            Phase::Grain => local_phi(t as f64, p, g) as f32,
        })
        .collect();
    Ok(PorosityMap {
        field: Field3::from_vec(grid.dims(), data).expect("dims checked"),
        voxel_size: grid.voxel_size(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PorositySummary {
    pub macro_porosity: f64,
    pub micro_porosity: f64,
    pub total: f64,
}

impl PorositySummary {
    pub fn csv(&self) -> String {
        format!(
            "macro,micro,total\n{:.6},{:.6},{:.6}\n",
            self.macro_porosity, self.micro_porosity, self.total
        )
    }
}

pub fn porosity_summary(labels: &LabelGrid, pmap: &PorosityMap) -> Result<PorositySummary> {
    if labels.dims != pmap.dims() {
        return Err(PorosityError::DimensionMismatch(labels.dims, pmap.dims()));
    }
    let n = labels.labels.len().max(1) as f64;
    let pores = labels.pore_count() as f64;
    let micro: f64 = labels
        .labels
        .iter()
        .zip(pmap.field.data())
        .filter(|(l, _)| **l == Phase::Grain)
        .map(|(_, &v)| v as f64)
        .sum();
    let (macro_porosity, micro_porosity) = (pores / n, micro / n);
    Ok(PorositySummary {
        macro_porosity,
        micro_porosity,
        total: macro_porosity + micro_porosity,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlockPorosity {
    #[default]
    Combined,
    MacroOnly,
    MicroOnly,
}

impl std::str::FromStr for BlockPorosity {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "combined" => Ok(Self::Combined),
            "macro" => Ok(Self::MacroOnly),
            "micro" => Ok(Self::MicroOnly),
            _ => Err(format!("unknown block porosity mode '{s}'")),
        }
    }
}

/// Percentile `q` ∈ [0,1] of ascending-sorted values, linear between order statistics.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Lower quantile matching one standard deviation below the median.
const P_LOW: f64 = 0.158_655_253_931_457_05;

/// Heterogeneity coefficient (P50 − P15.87)/P50 on the ascending order.
/// `None` for an empty population or a zero median.
pub fn dykstra_parsons_coefficient(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let p50 = percentile_sorted(&s, 0.5);
    if p50 == 0.0 {
        return None;
    }
    Some((p50 - percentile_sorted(&s, P_LOW)) / p50)
}

/// Mean porosity of every complete, non-overlapping cube of edge `b`.
pub fn block_porosities(labels: &LabelGrid, pmap: &PorosityMap, b: usize, mode: BlockPorosity) -> Result<Vec<f64>> {
    let d = labels.dims;
    if d != pmap.dims() {
        return Err(PorosityError::DimensionMismatch(d, pmap.dims()));
    }
    if b == 0 || d.iter().any(|&n| b > n) {
        return Err(PorosityError::InvalidBlockSize(b));
    }
    let nb = d.map(|n| n / b);
    let phi = pmap.field.data();
    let vol = (b * b * b) as f64;
    Ok((0..nb[0] * nb[1] * nb[2])
        .into_par_iter()
        .map(|k| {
            let (bx, by, bz) = (k % nb[0], (k / nb[0]) % nb[1], k / (nb[0] * nb[1]));
            let mut acc = 0.0;
            for z in bz * b..(bz + 1) * b {
                for y in by * b..(by + 1) * b {
                    let row = d[0] * (y + d[1] * z);
                    for i in row + bx * b..row + (bx + 1) * b {
                        let pore = labels.labels[i] == Phase::Pore;
                        acc += match mode {
                            BlockPorosity::Combined if pore => 1.0,
                            BlockPorosity::MacroOnly if pore => 1.0,
                            BlockPorosity::MicroOnly | BlockPorosity::Combined if !pore => phi[i] as f64,
                            _ => 0.0,
                        };
                    }
                }
            }
            acc / vol
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpPoint {
    pub block_size: usize,
    pub blocks: usize,
    pub coefficient: Option<f64>,
}

pub fn dykstra_parsons(labels: &LabelGrid, pmap: &PorosityMap, block_sizes: &[usize], mode: BlockPorosity) -> Result<Vec<DpPoint>> {
    block_sizes
        .iter()
        .map(|&b| {
            let v = block_porosities(labels, pmap, b, mode)?;
            Ok(DpPoint {
                block_size: b,
                blocks: v.len(),
                coefficient: dykstra_parsons_coefficient(&v),
            })
        })
        .collect()
}

/// Absent coefficients are written as empty fields.
pub fn dp_csv(curve: &[DpPoint]) -> String {
    let mut s = String::from("block_size,blocks,v_dp\n");
    for p in curve {
        let v = p.coefficient.map(|c| format!("{c:.6}")).unwrap_or_default();
        let _ = writeln!(s, "{},{},{}", p.block_size, p.blocks, v);
    }
    s
}

pub fn write_dp_csv(curve: &[DpPoint], path: &Path) -> Result<()> {
    write_atomic(path, dp_csv(curve).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::BitDepth;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, LogNormal};

    fn labels_from(dims: [usize; 3], f: impl Fn(usize) -> Phase) -> LabelGrid {
        LabelGrid {
            dims,
            voxel_size: 1.0,
            labels: (0..dims.iter().product()).map(f).collect(),
        }
    }

    #[test]
    fn endpoints_and_clamping() {
        let g = VoxelGrid::new([5, 1, 1], 1.0, BitDepth::U8, vec![65, 55, 250, 60, 0]).unwrap();
        let l = labels_from([5, 1, 1], |_| Phase::Grain);
        let t = ThresholdPair::new(55, 65, 1.0).unwrap();
        let m = local_porosity_map(&g, &l, &t).unwrap();
        assert_eq!(m.field.data(), &[0.0, 1.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn pore_voxels_excluded() {
        let g = VoxelGrid::filled([2, 1, 1], 1.0, BitDepth::U8, 0).unwrap();
        let l = labels_from([2, 1, 1], |i| if i == 0 { Phase::Pore } else { Phase::Grain });
        let m = local_porosity_map(&g, &l, &ThresholdPair::new(55, 65, 1.0).unwrap()).unwrap();
        assert_eq!(m.field.data(), &[0.0, 1.0]);
    }

    #[test]
    fn summaries() {
        let l = labels_from([4, 1, 1], |_| Phase::Pore);
        let m = PorosityMap {
            field: Field3::filled([4, 1, 1], 0.0),
            voxel_size: 1.0,
        };
        let s = porosity_summary(&l, &m).unwrap();
        assert_eq!((s.macro_porosity, s.micro_porosity), (1.0, 0.0));

        let l = labels_from([4, 1, 1], |i| if i < 2 { Phase::Pore } else { Phase::Grain });
        let m = PorosityMap {
            field: Field3::from_vec([4, 1, 1], vec![0.0, 0.0, 0.4, 0.4]).unwrap(),
            voxel_size: 1.0,
        };
        let s = porosity_summary(&l, &m).unwrap();
        assert!((s.macro_porosity - 0.5).abs() < 1e-12);
        assert!((s.micro_porosity - 0.2).abs() < 1e-6);
        assert!((s.total - 0.7).abs() < 1e-6);
    }

    #[test]
    fn dp_of_homogeneous_and_single_block() {
        let l = labels_from([8; 3], |i| if i % 2 == 0 { Phase::Pore } else { Phase::Grain });
        let m = PorosityMap {
            field: Field3::filled([8; 3], 0.25),
            voxel_size: 1.0,
        };
        let c = dykstra_parsons(&l, &m, &[2, 4, 8], BlockPorosity::Combined).unwrap();
        assert_eq!(c[0].coefficient, Some(0.0));
        assert_eq!(c[1].coefficient, Some(0.0));
        assert_eq!(c[2].coefficient, Some(0.0));
        assert!(dp_csv(&c).ends_with("8,1,0.000000\n"));
        assert!(block_porosities(&l, &m, 9, BlockPorosity::Combined).is_err());
    }

    #[test]
    fn lognormal_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = LogNormal::new(-2.0, 0.5).unwrap();
        let v: Vec<f64> = (0..10_000).map(|_| d.sample(&mut rng)).collect();
        let c = dykstra_parsons_coefficient(&v).unwrap();
        assert!((c - (1.0 - (-0.5f64).exp())).abs() < 0.03, "{c}");
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile_sorted(&[0.0, 10.0], 0.25), 2.5);
        assert_eq!(dykstra_parsons_coefficient(&[0.0, 0.0, 0.0]), None);
        assert_eq!(dykstra_parsons_coefficient(&[]), None);
        assert_eq!(dykstra_parsons_coefficient(&[0.3]), Some(0.0));
    }
}
